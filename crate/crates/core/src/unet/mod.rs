//! Tiny UNet ε-predictor with named cross-attention sites.
//!
//! ```text
//! latent [4,16,16]
//!   conv_in (3x3)            -> h0 [C,16,16]
//!   down1  (3x3, stride 2)   -> [2C,8,8]  -> down1.attn            -> h1
//!   mid    (3x3, stride 2)   -> [2C,4,4]  -> mid.attn              -> h2
//!   up1    (up x2, 3x3) + h1 -> [2C,8,8]  -> up1.attn1 -> up1.attn2 -> h3
//!   up2    (up x2, 3x3) + h0 -> [C,16,16] -> up2.attn1             -> h4
//!   conv_out (3x3)           -> eps [4,16,16]
//! ```
//!
//! Every conv block adds a per-channel projection of the sinusoidal timestep
//! embedding before its SiLU. Each attention site is a residual
//! `h + attn(group_norm(h))` whose queries come from the flattened feature map
//! and whose keys/values come from the conditioning sequence.

pub(crate) mod backward;

use crate::attention::{
    cross_attention_cached, AttentionCache, CaptureSink, CrossAttentionWeights, IpMaskDirective, Site,
};
use crate::encoders::ConditioningSequence;
use crate::error::{Error, Result};
use crate::sampler::TRAIN_TIMESTEPS;
use crate::tensor::Tensor;
use crate::weights::ModelWeights;

/// Every attention slot the architecture provides, in execution order.
pub const SITE_SLOTS: [&str; 5] = ["down1.attn", "mid.attn", "up1.attn1", "up1.attn2", "up2.attn1"];

/// Conv blocks that receive a timestep projection.
pub const CONV_BLOCKS: [&str; 5] = ["conv_in", "down1", "mid", "up1", "up2"];

pub const DEFAULT_CAPTURE_LAYER: &str = "up1.attn2";
pub(crate) const NORM_EPS: f32 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct UNetConfig {
    pub latent_channels: usize,
    pub base_width: usize,
    pub spatial: (usize, usize),
    /// Enabled attention sites; each must be one of [`SITE_SLOTS`].
    pub attention_sites: Vec<String>,
    pub heads: usize,
    pub head_dim: usize,
    /// Width of the conditioning tokens.
    pub d_model: usize,
    pub temb_dim: usize,
    pub norm_groups: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            base_width: 16,
            spatial: (16, 16),
            attention_sites: SITE_SLOTS.iter().map(|s| s.to_string()).collect(),
            heads: 4,
            head_dim: 16,
            d_model: 64,
            temb_dim: 32,
            norm_groups: 4,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::UNetConfig(m));
        for (i, id) in self.attention_sites.iter().enumerate() {
            if !SITE_SLOTS.contains(&id.as_str()) {
                return bad(format!("unknown attention site `{id}`"));
            }
            if self.attention_sites[..i].contains(id) {
                return bad(format!("duplicate attention site `{id}`"));
            }
        }
        if !self.attention_sites.iter().any(|s| s.starts_with("up")) {
            return bad("at least one up-block attention site is required".into());
        }
        let (h, w) = self.spatial;
        if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
            return bad(format!("spatial {h}x{w} must be a positive multiple of 4"));
        }
        if self.base_width % self.norm_groups != 0 || self.heads == 0 || self.head_dim == 0 {
            return bad("base_width must be divisible by norm_groups; heads/head_dim positive".into());
        }
        Ok(())
    }

    pub fn has_site(&self, layer_id: &str) -> bool {
        self.attention_sites.iter().any(|s| s == layer_id)
    }

    /// Enabled sites in execution order.
    pub fn sites(&self) -> impl Iterator<Item = &'static str> + '_ {
        SITE_SLOTS.iter().copied().filter(|s| self.has_site(s))
    }

    pub fn inner_dim(&self) -> usize {
        self.heads * self.head_dim
    }

    /// Spatial grid `(H_ℓ, W_ℓ)` at an attention site.
    pub fn layer_resolution(&self, layer_id: &str) -> Result<(usize, usize)> {
        if !self.has_site(layer_id) {
            return Err(Error::UnknownLayer(layer_id.to_string()));
        }
        let (h, w) = self.spatial;
        let div = match layer_id {
            "down1.attn" | "up1.attn1" | "up1.attn2" => 2,
            "mid.attn" => 4,
            _ => 1,
        };
        Ok((h / div, w / div))
    }

    /// Feature width `d_ℓ` at an attention site.
    pub fn layer_channels(&self, layer_id: &str) -> Result<usize> {
        if !self.has_site(layer_id) {
            return Err(Error::UnknownLayer(layer_id.to_string()));
        }
        Ok(if layer_id.starts_with("up2") {
            self.base_width
        } else {
            2 * self.base_width
        })
    }

    /// `(out, in)` channels of each conv block, plus `conv_out`.
    pub(crate) fn conv_shapes(&self) -> [(&'static str, usize, usize); 6] {
        let c = self.base_width;
        [
            ("conv_in", c, self.latent_channels),
            ("down1", 2 * c, c),
            ("mid", 2 * c, 2 * c),
            ("up1", 2 * c, 2 * c),
            ("up2", c, 2 * c),
            ("conv_out", self.latent_channels, c),
        ]
    }
}

/// Free function form of [`UNetConfig::layer_resolution`].
pub fn layer_resolution(config: &UNetConfig, layer_id: &str) -> Result<(usize, usize)> {
    config.layer_resolution(layer_id)
}

/// Which sites receive the subject mask during a guided call.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum MaskSites {
    #[default]
    All,
    Only(Vec<String>),
}

impl MaskSites {
    pub fn includes(&self, layer_id: &str) -> bool {
        match self {
            MaskSites::All => true,
            MaskSites::Only(ids) => ids.iter().any(|s| s == layer_id),
        }
    }
}

/// IP handling for one UNet call.
#[derive(Debug, Clone, Default)]
pub struct Guidance<'a> {
    pub ip_scale: f32,
    pub mask: Option<&'a Tensor>,
    pub mask_sites: MaskSites,
}

impl<'a> Guidance<'a> {
    pub fn unmasked(ip_scale: f32) -> Self {
        Self {
            ip_scale,
            mask: None,
            mask_sites: MaskSites::All,
        }
    }

    fn directive(&self, layer_id: &str) -> IpMaskDirective<'a> {
        IpMaskDirective {
            mask: self.mask.filter(|_| self.mask_sites.includes(layer_id)),
            ip_scale: self.ip_scale,
        }
    }
}

/// Sinusoidal embedding `[sin(t·f_i), cos(t·f_i)]` with `f_i = 10000^(−i/half)`.
pub fn timestep_embedding(t: f32, dim: usize) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = vec![0f32; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        data[i] = arg.sin() as f32;
        data[half + i] = arg.cos() as f32;
    }
    Tensor::new(&[1, dim], data)
}

pub(crate) struct SiteCache {
    pub layer_id: &'static str,
    pub input: Tensor,
    pub attn: AttentionCache,
}

pub(crate) struct BlockCache {
    pub name: &'static str,
    pub input: Tensor,
    pub pre: Tensor,
    pub stride: usize,
}

/// Activations recorded during a training forward pass.
pub(crate) struct Tape {
    pub temb: Tensor,
    pub blocks: Vec<BlockCache>,
    pub sites: Vec<SiteCache>,
    pub h2_shape: Vec<usize>,
    pub h3_shape: Vec<usize>,
    pub out_input: Tensor,
}

/// Predict the noise in `latent` at timestep `t`.
pub fn predict_noise(
    latent: &Tensor,
    t: usize,
    cond: &ConditioningSequence,
    weights: &ModelWeights,
    config: &UNetConfig,
    guidance: &Guidance<'_>,
    sink: Option<&mut CaptureSink>,
) -> Result<Tensor> {
    Ok(forward(latent, t, cond, weights, config, guidance, sink, false)?.0)
}

pub(crate) fn forward_with_tape(
    latent: &Tensor,
    t: usize,
    cond: &ConditioningSequence,
    weights: &ModelWeights,
    config: &UNetConfig,
    guidance: &Guidance<'_>,
) -> Result<(Tensor, Tape)> {
    let (out, tape) = forward(latent, t, cond, weights, config, guidance, None, true)?;
    Ok((out, tape.expect("tape requested")))
}

struct Forward<'a, 'b> {
    cond: &'a ConditioningSequence,
    weights: &'a ModelWeights,
    config: &'a UNetConfig,
    guidance: &'a Guidance<'b>,
    sink: Option<&'a mut CaptureSink>,
    temb: Tensor,
    tape: Option<Tape>,
}

impl Forward<'_, '_> {
    fn conv_block(&mut self, name: &'static str, x: &Tensor, stride: usize) -> Result<Tensor> {
        let pre = x
            .conv2d(
                self.weights.param(name, "weight")?,
                Some(self.weights.param(name, "bias")?),
                stride,
                1,
            )?
            .add_channel_bias(&time_bias(self.weights, name, &self.temb)?)?;
        let out = pre.silu()?;
        if let Some(tape) = self.tape.as_mut() {
            tape.blocks.push(BlockCache {
                name,
                input: x.clone(),
                pre,
                stride,
            });
        }
        Ok(out)
    }

    fn site(&mut self, layer_id: &'static str, h: &Tensor) -> Result<Tensor> {
        if !self.config.has_site(layer_id) {
            return Ok(h.clone());
        }
        let spatial = self.config.layer_resolution(layer_id)?;
        let (c, hh, ww) = (h.dim(0), h.dim(1), h.dim(2));
        if (hh, ww) != spatial || c != self.config.layer_channels(layer_id)? {
            return Err(Error::UNetConfig(format!(
                "shape drift at {layer_id}: got {:?}, expected {spatial:?}",
                h.shape()
            )));
        }
        let normed = h.group_norm(
            self.config.norm_groups,
            self.weights.param(layer_id, "norm_gamma")?,
            self.weights.param(layer_id, "norm_beta")?,
            NORM_EPS,
        )?;
        let x = normed.reshape(&[c, hh * ww])?.transpose()?;
        let attn_w = CrossAttentionWeights::from_weights(self.weights, layer_id, self.config.heads)?;
        let site = Site {
            layer_id,
            spatial_dims: spatial,
        };
        let directive = self.guidance.directive(layer_id);
        let (y, cache) = cross_attention_cached(&x, self.cond, &attn_w, &directive, &site)?;
        let out = h.add(&y.transpose()?.reshape(&[c, hh, ww])?)?;
        if let Some(sink) = self.sink.as_deref_mut() {
            if sink.wants(layer_id) {
                sink_push(sink, layer_id, &cache, spatial);
            }
        }
        if let Some(tape) = self.tape.as_mut() {
            tape.sites.push(SiteCache {
                layer_id,
                input: h.clone(),
                attn: cache,
            });
        }
        Ok(out)
    }
}

fn sink_push(sink: &mut CaptureSink, layer_id: &str, cache: &AttentionCache, spatial: (usize, usize)) {
    sink.push_probs(layer_id, cache.probs().clone(), spatial);
}

pub(crate) fn time_bias(weights: &ModelWeights, block: &str, temb: &Tensor) -> Result<Tensor> {
    let b = temb.linear(
        weights.param(block, "time_weight")?,
        Some(weights.param(block, "time_bias")?),
    )?;
    let n = b.numel();
    b.reshape(&[n])
}

#[allow(clippy::too_many_arguments)]
fn forward(
    latent: &Tensor,
    t: usize,
    cond: &ConditioningSequence,
    weights: &ModelWeights,
    config: &UNetConfig,
    guidance: &Guidance<'_>,
    sink: Option<&mut CaptureSink>,
    record: bool,
) -> Result<(Tensor, Option<Tape>)> {
    let expected = [config.latent_channels, config.spatial.0, config.spatial.1];
    if latent.shape() != expected {
        return Err(Error::ShapeMismatch {
            op: "predict_noise latent",
            left: latent.shape().to_vec(),
            right: expected.to_vec(),
        });
    }
    if t >= TRAIN_TIMESTEPS {
        return Err(Error::UNetConfig(format!("timestep {t} outside 0..{TRAIN_TIMESTEPS}")));
    }
    if cond.d_model() != config.d_model {
        return Err(Error::ShapeMismatch {
            op: "predict_noise conditioning",
            left: cond.tokens().shape().to_vec(),
            right: vec![cond.len(), config.d_model],
        });
    }
    let temb = timestep_embedding(t as f32, config.temb_dim)?;
    let mut f = Forward {
        cond,
        weights,
        config,
        guidance,
        sink,
        temb: temb.clone(),
        tape: record.then(|| Tape {
            temb,
            blocks: Vec::new(),
            sites: Vec::new(),
            h2_shape: Vec::new(),
            h3_shape: Vec::new(),
            out_input: Tensor::zeros(&[1]).expect("scalar"),
        }),
    };

    let h0 = f.conv_block("conv_in", latent, 1)?;
    let h = f.conv_block("down1", &h0, 2)?;
    let h1 = f.site("down1.attn", &h)?;
    let h = f.conv_block("mid", &h1, 2)?;
    let h2 = f.site("mid.attn", &h)?;
    let up = h2.resize_nearest((h1.dim(1), h1.dim(2)))?;
    let h = f.conv_block("up1", &up, 1)?.add(&h1)?;
    let h = f.site("up1.attn1", &h)?;
    let h3 = f.site("up1.attn2", &h)?;
    let up = h3.resize_nearest((h0.dim(1), h0.dim(2)))?;
    let h = f.conv_block("up2", &up, 1)?.add(&h0)?;
    let h4 = f.site("up2.attn1", &h)?;
    let out = h4.conv2d(
        weights.param("conv_out", "weight")?,
        Some(weights.param("conv_out", "bias")?),
        1,
        1,
    )?;
    if out.shape() != latent.shape() {
        return Err(Error::UNetConfig(format!("output shape {:?} drifted", out.shape())));
    }
    if let Some(tape) = f.tape.as_mut() {
        tape.h2_shape = h2.shape().to_vec();
        tape.h3_shape = h3.shape().to_vec();
        tape.out_input = h4;
    }
    Ok((out, f.tape))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::build_conditioning;
    use crate::model::{init_unet_weights, zero_like};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cond(seed: u64) -> ConditioningSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let text = Tensor::from_fn(&[16, 64], |_| rng.gen_range(-1.0..1.0)).unwrap();
        let ip = Tensor::from_fn(&[4, 64], |_| rng.gen_range(-1.0..1.0)).unwrap();
        build_conditioning(&text, &ip).unwrap()
    }

    fn latent(seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[4, 16, 16], |_| rng.gen_range(-1.0..1.0)).unwrap()
    }

    fn random_weights(cfg: &UNetConfig) -> ModelWeights {
        let mut w = init_unet_weights(cfg, 7).unwrap();
        // make the output layer nonzero so upstream changes are visible
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let out = w.get("conv_out/weight").unwrap().map("t", |_| rng.gen_range(-0.2..0.2)).unwrap();
        w.insert("conv_out/weight", out);
        w
    }

    #[test]
    fn layer_resolutions() {
        let cfg = UNetConfig::default();
        assert_eq!(cfg.layer_resolution("mid.attn").unwrap(), (4, 4));
        assert_eq!(cfg.layer_resolution("up1.attn2").unwrap(), (8, 8));
        assert_eq!(cfg.layer_resolution("up2.attn1").unwrap(), (16, 16));
        assert!(matches!(cfg.layer_resolution("up9.attn"), Err(Error::UnknownLayer(_))));
    }

    #[test]
    fn config_validation() {
        let mut cfg = UNetConfig::default();
        cfg.attention_sites = vec!["mid.attn".into()];
        assert!(cfg.validate().is_err());
        cfg.attention_sites = vec!["up1.attn2".into(), "up1.attn2".into()];
        assert!(cfg.validate().is_err());
        assert!(UNetConfig::default().validate().is_ok());
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let cfg = UNetConfig::default();
        let w = zero_like(&init_unet_weights(&cfg, 1).unwrap()).unwrap();
        let y = predict_noise(&latent(1), 500, &cond(1), &w, &cfg, &Guidance::unmasked(1.0), None).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn deterministic_and_shape_preserving() {
        let cfg = UNetConfig::default();
        let w = random_weights(&cfg);
        let a = predict_noise(&latent(2), 300, &cond(2), &w, &cfg, &Guidance::unmasked(1.0), None).unwrap();
        let b = predict_noise(&latent(2), 300, &cond(2), &w, &cfg, &Guidance::unmasked(1.0), None).unwrap();
        assert_eq!(a.shape(), &[4, 16, 16]);
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn text_token_perturbation_changes_output() {
        let cfg = UNetConfig::default();
        let w = random_weights(&cfg);
        let c = cond(3);
        let mut text = c.text_rows().unwrap().into_data();
        text[5] += 0.5;
        let c2 = build_conditioning(&Tensor::new(&[16, 64], text).unwrap(), &c.ip_rows().unwrap()).unwrap();
        let g = Guidance::unmasked(1.0);
        let a = predict_noise(&latent(3), 300, &c, &w, &cfg, &g, None).unwrap();
        let b = predict_noise(&latent(3), 300, &c2, &w, &cfg, &g, None).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() > 0.0);
    }

    #[test]
    fn all_ones_mask_bitwise_and_capture_complete() {
        let cfg = UNetConfig::default();
        let w = random_weights(&cfg);
        let ones = Tensor::ones(&[8, 8]).unwrap();
        let masked = Guidance {
            ip_scale: 1.0,
            mask: Some(&ones),
            mask_sites: MaskSites::All,
        };
        let mut sink = CaptureSink::new();
        let a = predict_noise(&latent(4), 100, &cond(4), &w, &cfg, &Guidance::unmasked(1.0), None).unwrap();
        let b = predict_noise(&latent(4), 100, &cond(4), &w, &cfg, &masked, Some(&mut sink)).unwrap();
        assert!(a.bit_eq(&b));
        let ids: Vec<&str> = sink.records().iter().map(|r| r.layer_id.as_str()).collect();
        assert_eq!(ids, SITE_SLOTS.to_vec());
        for r in sink.records() {
            assert_eq!(r.spatial_dims, cfg.layer_resolution(&r.layer_id).unwrap());
            assert_eq!(r.tokens(), 20);
        }
    }

    #[test]
    fn missing_weight_is_reported() {
        let cfg = UNetConfig::default();
        let mut w = ModelWeights::new();
        for (name, t) in init_unet_weights(&cfg, 1).unwrap().iter() {
            if name != "mid.attn/to_k" {
                w.insert(name.clone(), t.clone());
            }
        }
        let err = predict_noise(&latent(1), 1, &cond(1), &w, &cfg, &Guidance::unmasked(1.0), None).unwrap_err();
        assert!(matches!(err, Error::MissingWeight(n) if n == "mid.attn/to_k"));
    }
}
