//! Text + IP cross-attention with probability capture and spatial IP masking.
//!
//! Logits are `Q·Kᵀ/√d_head` over the concatenated conditioning sequence.
//! Two adjustments touch only the IP columns, both before the softmax:
//!
//! * IP scale `λ`: `ln λ` is added to the IP logits (`λ = 1` leaves them
//!   untouched, `λ = 0` removes them).
//! * Mask: at every spatial position whose mask cell is 0, all IP logits are
//!   replaced by [`MASK_SENTINEL`]. The softmax then renormalizes the row onto
//!   the text columns, so background positions attend to text alone.

use std::ops::Range;

use crate::encoders::ConditioningSequence;
use crate::error::{Error, Result};
use crate::tensor::{backward, kernels, softmax_in_place, Tensor};
use crate::weights::ModelWeights;

/// Finite stand-in for `−∞`. `exp(MASK_SENTINEL − max)` underflows to exactly 0.
pub const MASK_SENTINEL: f32 = -1e9;

/// Post-softmax attention probabilities captured at one site and step.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub layer_id: String,
    /// 0-based step within the pass that produced it.
    pub step_index: usize,
    /// `[heads, S, T]`
    pub probs: Tensor,
    pub spatial_dims: (usize, usize),
}

impl AttentionRecord {
    pub fn heads(&self) -> usize {
        self.probs.dim(0)
    }

    pub fn positions(&self) -> usize {
        self.probs.dim(1)
    }

    pub fn tokens(&self) -> usize {
        self.probs.dim(2)
    }
}

/// How IP tokens are treated at one attention call.
#[derive(Debug, Clone, Copy)]
pub struct IpMaskDirective<'a> {
    /// Binary subject grid at any resolution; resized to the site's grid.
    pub mask: Option<&'a Tensor>,
    pub ip_scale: f32,
}

impl Default for IpMaskDirective<'_> {
    fn default() -> Self {
        Self {
            mask: None,
            ip_scale: 1.0,
        }
    }
}

/// Append-only collector for attention records, owned by one generation job.
#[derive(Debug, Default)]
pub struct CaptureSink {
    step_index: usize,
    layers: Option<Vec<String>>,
    records: Vec<AttentionRecord>,
}

impl CaptureSink {
    /// Capture every attention site.
    pub fn new() -> Self {
        Self::default()
    }

    /// Capture only the named sites.
    pub fn for_layers<I: IntoIterator<Item = S>, S: Into<String>>(layers: I) -> Self {
        Self {
            layers: Some(layers.into_iter().map(Into::into).collect()),
            ..Self::default()
        }
    }

    pub fn set_step(&mut self, step_index: usize) {
        self.step_index = step_index;
    }

    pub fn wants(&self, layer_id: &str) -> bool {
        self.layers
            .as_ref()
            .map_or(true, |l| l.iter().any(|x| x == layer_id))
    }

    pub fn records(&self) -> &[AttentionRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<AttentionRecord> {
        self.records
    }

    pub(crate) fn push_probs(&mut self, layer_id: &str, probs: Tensor, spatial_dims: (usize, usize)) {
        self.records.push(AttentionRecord {
            layer_id: layer_id.to_string(),
            step_index: self.step_index,
            probs,
            spatial_dims,
        });
    }
}

/// Projection weights of one cross-attention site.
#[derive(Debug, Clone, Copy)]
pub struct CrossAttentionWeights<'a> {
    /// `[d_ℓ, inner]`
    pub to_q: &'a Tensor,
    /// `[d_model, inner]`
    pub to_k: &'a Tensor,
    /// `[d_model, inner]`
    pub to_v: &'a Tensor,
    /// `[inner, d_ℓ]`
    pub to_out: &'a Tensor,
    /// `[d_ℓ]`
    pub out_bias: Option<&'a Tensor>,
    pub heads: usize,
}

impl<'a> CrossAttentionWeights<'a> {
    pub fn from_weights(weights: &'a ModelWeights, layer_id: &str, heads: usize) -> Result<Self> {
        Ok(Self {
            to_q: weights.param(layer_id, "to_q")?,
            to_k: weights.param(layer_id, "to_k")?,
            to_v: weights.param(layer_id, "to_v")?,
            to_out: weights.param(layer_id, "to_out")?,
            out_bias: Some(weights.param(layer_id, "out_bias")?),
            heads,
        })
    }

    fn inner(&self) -> usize {
        self.to_q.dim(1)
    }

    fn head_dim(&self) -> usize {
        self.inner() / self.heads
    }
}

/// Where an attention call sits: its id and spatial grid.
#[derive(Debug, Clone, Copy)]
pub struct Site<'a> {
    pub layer_id: &'a str,
    pub spatial_dims: (usize, usize),
}

pub(crate) struct AttentionCache {
    x: Tensor,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    /// `[heads, S, T]`
    probs: Tensor,
    merged: Tensor,
}

impl AttentionCache {
    pub(crate) fn probs(&self) -> &Tensor {
        &self.probs
    }
}

/// `softmax(QKᵀ/√d)·V` over text + IP tokens, projected back to `[S, d_ℓ]`.
pub fn cross_attention(
    features: &Tensor,
    cond: &ConditioningSequence,
    weights: &CrossAttentionWeights<'_>,
    directive: &IpMaskDirective<'_>,
    site: &Site<'_>,
    sink: Option<&mut CaptureSink>,
) -> Result<Tensor> {
    let (out, cache) = cross_attention_cached(features, cond, weights, directive, site)?;
    if let Some(sink) = sink {
        if sink.wants(site.layer_id) {
            sink.push_probs(site.layer_id, cache.probs, site.spatial_dims);
        }
    }
    Ok(out)
}

/// Binary keep-flags per spatial position (true = subject, IP columns kept).
fn resolve_mask(directive: &IpMaskDirective<'_>, site: &Site<'_>) -> Result<Option<Vec<bool>>> {
    let Some(mask) = directive.mask else {
        return Ok(None);
    };
    let (h, w) = site.spatial_dims;
    if h == 0 || w == 0 || mask.rank() != 2 {
        return Err(Error::Attention(format!(
            "mask {:?} cannot be resized to {h}x{w}",
            mask.shape()
        )));
    }
    let resized = mask.resize_nearest((h, w))?;
    Ok(Some(resized.data().iter().map(|&v| v != 0.0).collect()))
}

pub(crate) fn cross_attention_cached(
    features: &Tensor,
    cond: &ConditioningSequence,
    weights: &CrossAttentionWeights<'_>,
    directive: &IpMaskDirective<'_>,
    site: &Site<'_>,
) -> Result<(Tensor, AttentionCache)> {
    let s = features.dim(0);
    if s != site.spatial_dims.0 * site.spatial_dims.1 {
        return Err(Error::Attention(format!(
            "{}: {s} positions do not match grid {:?}",
            site.layer_id, site.spatial_dims
        )));
    }
    if !(directive.ip_scale >= 0.0 && directive.ip_scale.is_finite()) {
        return Err(Error::Attention(format!("ip_scale {} must be >= 0", directive.ip_scale)));
    }
    if weights.inner() % weights.heads != 0 {
        return Err(Error::Attention("inner width not divisible by heads".into()));
    }
    let keep = resolve_mask(directive, site)?;

    let q = features.linear(weights.to_q, None)?;
    let k = cond.tokens().linear(weights.to_k, None)?;
    let v = cond.tokens().linear(weights.to_v, None)?;
    let t = cond.len();
    let (heads, dh, inner) = (weights.heads, weights.head_dim(), weights.inner());
    let ip = cond.ip_span();
    let scale = 1.0 / (dh as f32).sqrt();
    let ip_bias = ip_logit_bias(directive.ip_scale);

    let mut probs = vec![0f32; heads * s * t];
    let mut merged = vec![0f32; s * inner];
    for h in 0..heads {
        let qh = head_slice(q.data(), s, inner, h, dh);
        let kh = head_slice(k.data(), t, inner, h, dh);
        let vh = head_slice(v.data(), t, inner, h, dh);
        let mut logits = kernels::gemm_a_bt(&qh, &kh, s, dh, t);
        for (pos, row) in logits.chunks_mut(t).enumerate() {
            for l in row.iter_mut() {
                *l *= scale;
                if !l.is_finite() {
                    return Err(Error::Attention(format!("{}: non-finite logit", site.layer_id)));
                }
            }
            let masked = keep.as_ref().is_some_and(|m| !m[pos]);
            apply_ip_bias(&mut row[ip.clone()], ip_bias, masked);
            softmax_in_place(row);
        }
        let oh = kernels::gemm(&logits, &vh, s, t, dh);
        for pos in 0..s {
            merged[pos * inner + h * dh..pos * inner + (h + 1) * dh]
                .copy_from_slice(&oh[pos * dh..(pos + 1) * dh]);
        }
        probs[h * s * t..(h + 1) * s * t].copy_from_slice(&logits);
    }
    let merged = Tensor::new(&[s, inner], merged)?;
    let out = merged.linear(weights.to_out, weights.out_bias)?;
    let cache = AttentionCache {
        x: features.clone(),
        q,
        k,
        v,
        probs: Tensor::new(&[heads, s, t], probs)?,
        merged,
    };
    Ok((out, cache))
}

#[derive(Debug, Clone, Copy)]
enum IpBias {
    None,
    Add(f32),
    Remove,
}

fn ip_logit_bias(ip_scale: f32) -> IpBias {
    if ip_scale == 1.0 {
        IpBias::None
    } else if ip_scale == 0.0 {
        IpBias::Remove
    } else {
        IpBias::Add(ip_scale.ln())
    }
}

fn apply_ip_bias(ip_logits: &mut [f32], bias: IpBias, masked: bool) {
    if masked {
        ip_logits.iter_mut().for_each(|l| *l = MASK_SENTINEL);
        return;
    }
    match bias {
        IpBias::None => {}
        IpBias::Add(b) => ip_logits.iter_mut().for_each(|l| *l += b),
        IpBias::Remove => ip_logits.iter_mut().for_each(|l| *l = MASK_SENTINEL),
    }
}

fn head_slice(data: &[f32], rows: usize, inner: usize, h: usize, dh: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(rows * dh);
    for r in 0..rows {
        out.extend_from_slice(&data[r * inner + h * dh..r * inner + (h + 1) * dh]);
    }
    out
}

/// Gradients of one attention call. Returns `(d_features, d_cond_tokens)` and
/// accumulates parameter gradients under `layer_id/*` in `grads`.
pub(crate) fn cross_attention_backward(
    cache: &AttentionCache,
    cond: &ConditioningSequence,
    weights: &CrossAttentionWeights<'_>,
    layer_id: &str,
    d_out: &Tensor,
    grads: &mut ModelWeights,
) -> Result<(Tensor, Tensor)> {
    let (d_merged, d_wout, d_bout) = backward::linear(&cache.merged, weights.to_out, d_out)?;
    grads.accumulate(&format!("{layer_id}/to_out"), &d_wout)?;
    grads.accumulate(&format!("{layer_id}/out_bias"), &d_bout)?;

    let s = cache.x.dim(0);
    let t = cond.len();
    let (heads, dh, inner) = (weights.heads, weights.head_dim(), weights.inner());
    let scale = 1.0 / (dh as f32).sqrt();
    let mut dq = vec![0f32; s * inner];
    let mut dk = vec![0f32; t * inner];
    let mut dv = vec![0f32; t * inner];
    let mut d_logits = vec![0f32; s * t];
    for h in 0..heads {
        let p = &cache.probs.data()[h * s * t..(h + 1) * s * t];
        let doh = head_slice(d_merged.data(), s, inner, h, dh);
        let qh = head_slice(cache.q.data(), s, inner, h, dh);
        let kh = head_slice(cache.k.data(), t, inner, h, dh);
        let vh = head_slice(cache.v.data(), t, inner, h, dh);
        let dp = kernels::gemm_a_bt(&doh, &vh, s, dh, t);
        let dvh = kernels::gemm_at_b(p, &doh, s, t, dh);
        for pos in 0..s {
            backward::softmax_row(
                &p[pos * t..(pos + 1) * t],
                &dp[pos * t..(pos + 1) * t],
                &mut d_logits[pos * t..(pos + 1) * t],
            );
        }
        d_logits.iter_mut().for_each(|g| *g *= scale);
        let dqh = kernels::gemm(&d_logits, &kh, s, t, dh);
        let dkh = kernels::gemm_at_b(&d_logits, &qh, s, t, dh);
        scatter_head(&mut dq, &dqh, s, inner, h, dh);
        scatter_head(&mut dk, &dkh, t, inner, h, dh);
        scatter_head(&mut dv, &dvh, t, inner, h, dh);
    }
    let dq = Tensor::new(&[s, inner], dq)?;
    let dk = Tensor::new(&[t, inner], dk)?;
    let dv = Tensor::new(&[t, inner], dv)?;
    let (dx, dwq, _) = backward::linear(&cache.x, weights.to_q, &dq)?;
    let (dc_k, dwk, _) = backward::linear(cond.tokens(), weights.to_k, &dk)?;
    let (dc_v, dwv, _) = backward::linear(cond.tokens(), weights.to_v, &dv)?;
    grads.accumulate(&format!("{layer_id}/to_q"), &dwq)?;
    grads.accumulate(&format!("{layer_id}/to_k"), &dwk)?;
    grads.accumulate(&format!("{layer_id}/to_v"), &dwv)?;
    Ok((dx, dc_k.add(&dc_v)?))
}

fn scatter_head(dst: &mut [f32], src: &[f32], rows: usize, inner: usize, h: usize, dh: usize) {
    for r in 0..rows {
        dst[r * inner + h * dh..r * inner + (h + 1) * dh].copy_from_slice(&src[r * dh..(r + 1) * dh]);
    }
}

/// How per-head maps are combined into one spatial map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HeadReduce {
    #[default]
    Mean,
    Max,
}

/// Spatial map `[S]` of the attention on `columns` (summed), reduced over heads.
pub fn columns_share(record: &AttentionRecord, columns: Range<usize>, reduce: HeadReduce) -> Result<Tensor> {
    let (heads, s, t) = (record.heads(), record.positions(), record.tokens());
    if columns.start > columns.end || columns.end > t {
        return Err(Error::SpanOutOfRange {
            start: columns.start,
            end: columns.end,
            len: t,
        });
    }
    let p = record.probs.data();
    let map = (0..s)
        .map(|pos| {
            let per_head = (0..heads).map(|h| {
                let row = &p[(h * s + pos) * t..(h * s + pos + 1) * t];
                row[columns.clone()].iter().map(|&v| v as f64).sum::<f64>()
            });
            match reduce {
                HeadReduce::Mean => (per_head.sum::<f64>() / heads as f64) as f32,
                HeadReduce::Max => per_head.fold(f64::MIN, f64::max) as f32,
            }
        })
        .collect();
    Tensor::new(&[s], map)
}

/// Head-averaged attention on IP token `token` (0-based within `ip_span`).
pub fn ip_attention_share(record: &AttentionRecord, ip_span: Range<usize>, token: usize) -> Result<Tensor> {
    if ip_span.end > record.tokens() || token >= ip_span.len() {
        return Err(Error::SpanOutOfRange {
            start: ip_span.start,
            end: ip_span.end,
            len: record.tokens(),
        });
    }
    let col = ip_span.start + token;
    columns_share(record, col..col + 1, HeadReduce::Mean)
}
