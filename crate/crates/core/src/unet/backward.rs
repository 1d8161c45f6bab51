use super::{Tape, UNetConfig, NORM_EPS};
use crate::attention::{cross_attention_backward, CrossAttentionWeights};
use crate::encoders::ConditioningSequence;
use crate::error::{Error, Result};
use crate::tensor::{backward as vjp, Tensor};
use crate::weights::ModelWeights;

struct Backward<'a> {
    tape: &'a Tape,
    cond: &'a ConditioningSequence,
    weights: &'a ModelWeights,
    config: &'a UNetConfig,
    grads: &'a mut ModelWeights,
    d_cond: Tensor,
}

impl Backward<'_> {
    fn site(&mut self, layer_id: &str, d: Tensor) -> Result<Tensor> {
        let Some(cache) = self.tape.sites.iter().find(|s| s.layer_id == layer_id) else {
            return Ok(d);
        };
        let (c, hh, ww) = (cache.input.dim(0), cache.input.dim(1), cache.input.dim(2));
        let dy = d.reshape(&[c, hh * ww])?.transpose()?;
        let attn_w = CrossAttentionWeights::from_weights(self.weights, layer_id, self.config.heads)?;
        let (dx, dc) = cross_attention_backward(&cache.attn, self.cond, &attn_w, layer_id, &dy, self.grads)?;
        self.d_cond = self.d_cond.add(&dc)?;
        let d_normed = dx.transpose()?.reshape(&[c, hh, ww])?;
        let gamma = self.weights.param(layer_id, "norm_gamma")?;
        let (dh, dgamma, dbeta) = vjp::group_norm(&cache.input, self.config.norm_groups, gamma, NORM_EPS, &d_normed)?;
        self.grads.accumulate(&format!("{layer_id}/norm_gamma"), &dgamma)?;
        self.grads.accumulate(&format!("{layer_id}/norm_beta"), &dbeta)?;
        d.add(&dh)
    }

    fn block(&mut self, name: &str, d_act: &Tensor) -> Result<Tensor> {
        let cache = self
            .tape
            .blocks
            .iter()
            .find(|b| b.name == name)
            .ok_or_else(|| Error::Training(format!("tape has no block `{name}`")))?;
        let d_pre = vjp::silu(&cache.pre, d_act)?;
        let c = d_pre.dim(0);
        let plane = d_pre.numel() / c;
        let d_bias: Vec<f32> = d_pre
            .data()
            .chunks(plane)
            .map(|row| row.iter().map(|&v| v as f64).sum::<f64>() as f32)
            .collect();
        let d_bias = Tensor::new(&[1, c], d_bias)?;
        let (_, d_tw, d_tb) = vjp::linear(&self.tape.temb, self.weights.param(name, "time_weight")?, &d_bias)?;
        self.grads.accumulate(&format!("{name}/time_weight"), &d_tw)?;
        self.grads.accumulate(&format!("{name}/time_bias"), &d_tb)?;
        let (dx, dw, db) = vjp::conv2d(&cache.input, self.weights.param(name, "weight")?, cache.stride, 1, &d_pre)?;
        self.grads.accumulate(&format!("{name}/weight"), &dw)?;
        self.grads.accumulate(&format!("{name}/bias"), &db)?;
        Ok(dx)
    }
}

/// Backpropagate `d_out` (gradient w.r.t. the predicted noise) through the
/// recorded forward pass. Parameter gradients are accumulated into `grads`;
/// the gradient w.r.t. the conditioning tokens is returned.
pub(crate) fn backward(
    tape: &Tape,
    d_out: &Tensor,
    cond: &ConditioningSequence,
    weights: &ModelWeights,
    config: &UNetConfig,
    grads: &mut ModelWeights,
) -> Result<Tensor> {
    let mut b = Backward {
        tape,
        cond,
        weights,
        config,
        grads,
        d_cond: Tensor::zeros(cond.tokens().shape())?,
    };
    let (dh4, dw, db) = vjp::conv2d(&tape.out_input, weights.param("conv_out", "weight")?, 1, 1, d_out)?;
    b.grads.accumulate("conv_out/weight", &dw)?;
    b.grads.accumulate("conv_out/bias", &db)?;

    let dh = b.site("up2.attn1", dh4)?;
    let d_h0_skip = dh.clone();
    let d_up = b.block("up2", &dh)?;
    let dh3 = vjp::resize_nearest(&tape.h3_shape, &d_up)?;
    let dh = b.site("up1.attn2", dh3)?;
    let dh = b.site("up1.attn1", dh)?;
    let d_h1_skip = dh.clone();
    let d_up = b.block("up1", &dh)?;
    let dh2 = vjp::resize_nearest(&tape.h2_shape, &d_up)?;
    let dh = b.site("mid.attn", dh2)?;
    let dh1 = b.block("mid", &dh)?.add(&d_h1_skip)?;
    let dh = b.site("down1.attn", dh1)?;
    let dh0 = b.block("down1", &dh)?.add(&d_h0_skip)?;
    b.block("conv_in", &dh0)?;
    Ok(b.d_cond)
}
