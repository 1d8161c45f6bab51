//! Subject mask from captured IP-token attention: select a map, average it over
//! a step window, min-max normalize, binarize.

use std::fmt;
use std::str::FromStr;

use crate::attention::{columns_share, AttentionRecord, HeadReduce};
use crate::encoders::IP_TOKENS;
use crate::error::{Error, Result};
use crate::sampler::StepWindow;
use crate::tensor::Tensor;
use crate::unet::UNetConfig;

/// Number of histogram bins used by the Otsu policy.
pub const OTSU_BINS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThresholdPolicy {
    /// `value >= θ` is subject.
    Fixed(f32),
    Otsu,
}

impl Default for ThresholdPolicy {
    fn default() -> Self {
        ThresholdPolicy::Fixed(0.5)
    }
}

impl fmt::Display for ThresholdPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ThresholdPolicy::Fixed(t) => write!(f, "fixed:{t}"),
            ThresholdPolicy::Otsu => write!(f, "otsu"),
        }
    }
}

impl FromStr for ThresholdPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "otsu" {
            return Ok(ThresholdPolicy::Otsu);
        }
        let theta = s
            .strip_prefix("fixed:")
            .and_then(|v| v.parse::<f32>().ok())
            .filter(|t| (0.0..=1.0).contains(t))
            .ok_or_else(|| Error::Config(format!("mask policy `{s}` (expected `fixed:<0..1>` or `otsu`)")))?;
        Ok(ThresholdPolicy::Fixed(theta))
    }
}

/// Which attention map becomes the subject map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskToken {
    /// IP token by 0-based index (`ip1` is 0).
    Ip(usize),
    /// `1 − (ip₂ + ip₃)`: the complement of the background tokens.
    NotBackground,
}

impl Default for MaskToken {
    fn default() -> Self {
        MaskToken::Ip(0)
    }
}

impl fmt::Display for MaskToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MaskToken::Ip(i) => write!(f, "ip{}", i + 1),
            MaskToken::NotBackground => write!(f, "not-ip2-ip3"),
        }
    }
}

impl FromStr for MaskToken {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "not-ip2-ip3" {
            return Ok(MaskToken::NotBackground);
        }
        s.strip_prefix("ip")
            .and_then(|v| v.parse::<usize>().ok())
            .filter(|&i| (1..=IP_TOKENS).contains(&i))
            .map(|i| MaskToken::Ip(i - 1))
            .ok_or_else(|| Error::Config(format!("mask token `{s}` (expected ip1..ip4 or not-ip2-ip3)")))
    }
}

/// Whether the window is averaged before or after thresholding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MaskAveraging {
    /// Average soft maps, binarize once.
    #[default]
    Soft,
    /// Binarize each step, then majority vote (ties are subject).
    Binary,
}

impl fmt::Display for MaskAveraging {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskAveraging::Soft => "soft",
            MaskAveraging::Binary => "binary",
        })
    }
}

impl FromStr for MaskAveraging {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "soft" => Ok(MaskAveraging::Soft),
            "binary" => Ok(MaskAveraging::Binary),
            other => Err(Error::Config(format!("mask averaging `{other}` (expected soft or binary)"))),
        }
    }
}

/// Where a mask came from.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskProvenance {
    pub layer_id: String,
    /// 1-based steps that were averaged.
    pub steps: Vec<usize>,
    pub token: MaskToken,
    pub policy: ThresholdPolicy,
    pub averaging: MaskAveraging,
    /// Threshold actually applied (mean over steps for per-step Otsu).
    pub threshold: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectMask {
    /// Binary `[H, W]` grid at capture-layer resolution.
    pub grid: Tensor,
    pub source: MaskProvenance,
}

impl SubjectMask {
    /// Wrap an externally supplied binary grid.
    pub fn from_grid(grid: Tensor, source: MaskProvenance) -> Result<Self> {
        if grid.rank() != 2 || grid.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Mask("grid must be a binary [H, W] tensor".into()));
        }
        Ok(Self { grid, source })
    }

    /// Fraction of subject cells.
    pub fn coverage(&self) -> f64 {
        self.grid.sum() / self.grid.numel() as f64
    }

    pub fn is_empty(&self) -> bool {
        self.grid.data().iter().all(|&v| v == 0.0)
    }

    /// Human-readable provenance for the sidecar file.
    pub fn sidecar(&self) -> String {
        let s = &self.source;
        let steps: Vec<String> = s.steps.iter().map(|v| v.to_string()).collect();
        format!(
            "layer = {}\nsteps = {}\ntoken = {}\npolicy = {}\naveraging = {}\nthreshold = {}\nshape = {}x{}\ncoverage = {}\n",
            s.layer_id,
            steps.join(","),
            s.token,
            s.policy,
            s.averaging,
            s.threshold,
            self.grid.dim(0),
            self.grid.dim(1),
            self.coverage()
        )
    }
}

/// Soft spatial map `[S]` of one record for the chosen token. IP tokens are
/// the trailing four columns.
pub fn token_map(record: &AttentionRecord, token: MaskToken) -> Result<Tensor> {
    let t = record.tokens();
    if t < IP_TOKENS {
        return Err(Error::Mask(format!("record has {t} tokens, fewer than {IP_TOKENS}")));
    }
    let ip0 = t - IP_TOKENS;
    match token {
        MaskToken::Ip(i) if i < IP_TOKENS => columns_share(record, ip0 + i..ip0 + i + 1, HeadReduce::Mean),
        MaskToken::Ip(i) => Err(Error::Mask(format!("IP token index {i} out of range"))),
        MaskToken::NotBackground => {
            columns_share(record, ip0 + 1..ip0 + 3, HeadReduce::Mean)?.map("mask", |v| -v)
        }
    }
}

/// Min-max normalize to [0, 1]. A zero-range map is an error.
pub fn normalize(map: &Tensor) -> Result<Tensor> {
    let d = map.data();
    if d.is_empty() {
        return Err(Error::Mask("empty map".into()));
    }
    let lo = d.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = d.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if hi - lo <= 0.0 {
        return Err(Error::ConstantMap { value: lo });
    }
    let range = (hi - lo) as f64;
    map.map("normalize", |v| ((v - lo) as f64 / range) as f32)
}

/// Otsu threshold over a 64-bin histogram of values in [0, 1]. Between-class
/// variance is scanned over every bin boundary; when several boundaries tie
/// (empty bins between the modes) the middle of the first maximal run is taken.
pub fn otsu_threshold(values: &[f32]) -> Result<f32> {
    let mut count = [0f64; OTSU_BINS];
    let mut sum = [0f64; OTSU_BINS];
    for &v in values {
        let b = ((v as f64 * OTSU_BINS as f64) as usize).min(OTSU_BINS - 1);
        count[b] += 1.0;
        sum[b] += v as f64;
    }
    let total: f64 = count.iter().sum();
    let total_sum: f64 = sum.iter().sum();
    let mut best = f64::NEG_INFINITY;
    let mut run = (0usize, 0usize);
    let mut in_run = false;
    let (mut w0, mut s0) = (0.0, 0.0);
    for k in 1..OTSU_BINS {
        w0 += count[k - 1];
        s0 += sum[k - 1];
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            in_run = false;
            continue;
        }
        let m0 = s0 / w0;
        let m1 = (total_sum - s0) / w1;
        let var = w0 * w1 * (m0 - m1) * (m0 - m1);
        if var > best {
            best = var;
            run = (k, k);
            in_run = true;
        } else if var == best && in_run && run.1 == k - 1 {
            run.1 = k;
        } else {
            in_run = false;
        }
    }
    if best == f64::NEG_INFINITY {
        return Err(Error::Mask("otsu needs at least two distinct histogram bins".into()));
    }
    Ok(((run.0 + run.1) as f64 / 2.0 / OTSU_BINS as f64) as f32)
}

/// Binarize a map with values in [0, 1]; returns the mask and the threshold.
pub fn binarize_with_threshold(map: &Tensor, policy: ThresholdPolicy) -> Result<(Tensor, f32)> {
    if map.numel() == 0 {
        return Err(Error::Mask("empty map".into()));
    }
    if map.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Mask("binarize expects values in [0, 1]".into()));
    }
    let theta = match policy {
        ThresholdPolicy::Fixed(t) => t,
        ThresholdPolicy::Otsu => otsu_threshold(map.data())?,
    };
    Ok((map.map("binarize", |v| if v >= theta { 1.0 } else { 0.0 })?, theta))
}

pub fn binarize(map: &Tensor, policy: ThresholdPolicy) -> Result<Tensor> {
    Ok(binarize_with_threshold(map, policy)?.0)
}

/// Derive the subject mask from `records` with the default soft averaging.
pub fn derive_mask(
    records: &[AttentionRecord],
    capture_layer: &str,
    window: StepWindow,
    token: MaskToken,
    policy: ThresholdPolicy,
) -> Result<SubjectMask> {
    derive_mask_with(records, capture_layer, window, token, policy, MaskAveraging::Soft)
}

pub fn derive_mask_with(
    records: &[AttentionRecord],
    capture_layer: &str,
    window: StepWindow,
    token: MaskToken,
    policy: ThresholdPolicy,
    averaging: MaskAveraging,
) -> Result<SubjectMask> {
    if window.is_empty() {
        return Err(Error::Mask("empty step window".into()));
    }
    let mut maps = Vec::with_capacity(window.len());
    let mut spatial = None;
    for step in window.indices() {
        let mut found = records
            .iter()
            .filter(|r| r.layer_id == capture_layer && r.step_index == step);
        let rec = found
            .next()
            .ok_or_else(|| Error::Mask(format!("no record for layer `{capture_layer}` at step {}", step + 1)))?;
        if found.next().is_some() {
            return Err(Error::Mask(format!(
                "duplicate records for layer `{capture_layer}` at step {}",
                step + 1
            )));
        }
        if *spatial.get_or_insert(rec.spatial_dims) != rec.spatial_dims {
            return Err(Error::Mask("spatial size differs between steps".into()));
        }
        maps.push(token_map(rec, token)?);
    }
    let (h, w) = spatial.expect("window is nonempty");
    let n = maps.len() as f64;
    let (grid, threshold) = match averaging {
        MaskAveraging::Soft => {
            let mean = mean_maps(&maps, n)?;
            binarize_with_threshold(&normalize(&mean)?, policy)?
        }
        MaskAveraging::Binary => {
            let mut bins = Vec::with_capacity(maps.len());
            let mut theta_sum = 0.0f64;
            for m in &maps {
                let (b, t) = binarize_with_threshold(&normalize(m)?, policy)?;
                theta_sum += t as f64;
                bins.push(b);
            }
            let votes = mean_maps(&bins, n)?;
            (votes.map("vote", |v| if v >= 0.5 { 1.0 } else { 0.0 })?, (theta_sum / n) as f32)
        }
    };
    Ok(SubjectMask {
        grid: grid.reshape(&[h, w])?,
        source: MaskProvenance {
            layer_id: capture_layer.to_string(),
            steps: window.indices().map(|i| i + 1).collect(),
            token,
            policy,
            averaging,
            threshold,
        },
    })
}

fn mean_maps(maps: &[Tensor], n: f64) -> Result<Tensor> {
    let len = maps[0].numel();
    let data = (0..len)
        .map(|i| (maps.iter().map(|m| m.data()[i] as f64).sum::<f64>() / n) as f32)
        .collect();
    Tensor::new(maps[0].shape(), data)
}

/// The mask resized to `layer_id`'s grid; stays binary.
pub fn mask_for_layer(mask: &SubjectMask, layer_id: &str, config: &UNetConfig) -> Result<Tensor> {
    let target = config.layer_resolution(layer_id)?;
    mask.grid.resize_nearest(target)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Record over 2 text + 4 IP tokens with the given ip₁ share per position
    /// (remaining mass on the first text token), identical across 2 heads.
    pub(crate) fn record_with_ip1(layer: &str, step: usize, hw: (usize, usize), ip1: &[f32]) -> AttentionRecord {
        let t = 6;
        let s = ip1.len();
        let mut p = vec![0f32; 2 * s * t];
        for h in 0..2 {
            for (pos, &v) in ip1.iter().enumerate() {
                let row = &mut p[(h * s + pos) * t..(h * s + pos + 1) * t];
                row[2] = v;
                row[0] = 1.0 - v;
            }
        }
        AttentionRecord {
            layer_id: layer.into(),
            step_index: step,
            probs: Tensor::new(&[2, s, t], p).unwrap(),
            spatial_dims: hw,
        }
    }

    fn window(a: usize, b: usize) -> StepWindow {
        StepWindow::new(a, b).unwrap()
    }

    #[test]
    fn normalize_then_fixed_threshold() {
        let recs = vec![
            record_with_ip1("up1.attn2", 1, (2, 2), &[0.1, 0.9, 0.2, 0.8]),
            record_with_ip1("up1.attn2", 2, (2, 2), &[0.1, 0.9, 0.2, 0.8]),
        ];
        let m = derive_mask(&recs, "up1.attn2", window(2, 3), MaskToken::Ip(0), ThresholdPolicy::default()).unwrap();
        assert_eq!(m.grid.data(), &[0., 1., 0., 1.]);
        assert_eq!(m.grid.shape(), &[2, 2]);
        assert_eq!(m.source.steps, vec![2, 3]);
        assert_eq!(m.source.threshold, 0.5);
    }

    #[test]
    fn identical_maps_average_to_either() {
        let a = [0.3, 0.5, 0.7, 0.1];
        let recs = vec![record_with_ip1("l", 0, (2, 2), &a), record_with_ip1("l", 1, (2, 2), &a)];
        let both = derive_mask(&recs, "l", window(1, 2), MaskToken::Ip(0), ThresholdPolicy::Otsu).unwrap();
        let one = derive_mask(&recs, "l", window(1, 1), MaskToken::Ip(0), ThresholdPolicy::Otsu).unwrap();
        assert_eq!(both.grid, one.grid);
    }

    #[test]
    fn single_step_equals_binarize_of_normalized_map() {
        let vals = [0.05, 0.4, 0.33, 0.9, 0.12, 0.6];
        let rec = record_with_ip1("l", 0, (2, 3), &vals);
        let m = derive_mask(std::slice::from_ref(&rec), "l", window(1, 1), MaskToken::Ip(0), ThresholdPolicy::Fixed(0.5))
            .unwrap();
        let expect = binarize(&normalize(&token_map(&rec, MaskToken::Ip(0)).unwrap()).unwrap(), ThresholdPolicy::Fixed(0.5))
            .unwrap();
        assert_eq!(m.grid.data(), expect.data());
    }

    #[test]
    fn binarize_examples() {
        let ones = Tensor::ones(&[3, 3]).unwrap();
        assert_eq!(binarize(&ones, ThresholdPolicy::Fixed(0.5)).unwrap(), ones);
        let v = Tensor::new(&[2], vec![0.2, 0.8]).unwrap();
        assert_eq!(binarize(&v, ThresholdPolicy::Fixed(0.5)).unwrap().data(), &[0., 1.]);
        let tie = Tensor::new(&[2], vec![0.5, 0.49]).unwrap();
        assert_eq!(binarize(&tie, ThresholdPolicy::Fixed(0.5)).unwrap().data(), &[1., 0.]);
    }

    #[test]
    fn otsu_separates_bimodal_map() {
        let mut vals = vec![0.1f32; 8];
        vals.extend(vec![0.9f32; 8]);
        let map = Tensor::new(&[4, 4], vals.clone()).unwrap();
        let (mask, theta) = binarize_with_threshold(&map, ThresholdPolicy::Otsu).unwrap();
        assert!(theta > 0.1 && theta <= 0.9);
        let expect: Vec<f32> = vals.iter().map(|&v| if v == 0.9 { 1.0 } else { 0.0 }).collect();
        assert_eq!(mask.data(), &expect[..]);
    }

    #[test]
    fn constant_map_is_an_error() {
        let recs = vec![record_with_ip1("l", 0, (1, 2), &[0.4, 0.4])];
        let err = derive_mask(&recs, "l", window(1, 1), MaskToken::Ip(0), ThresholdPolicy::default()).unwrap_err();
        assert!(matches!(err, Error::ConstantMap { .. }));
    }

    #[test]
    fn missing_step_or_layer() {
        let recs = vec![record_with_ip1("l", 0, (1, 2), &[0.1, 0.4])];
        assert!(matches!(
            derive_mask(&recs, "l", window(1, 2), MaskToken::Ip(0), ThresholdPolicy::default()),
            Err(Error::Mask(_))
        ));
        assert!(matches!(
            derive_mask(&recs, "other", window(1, 1), MaskToken::Ip(0), ThresholdPolicy::default()),
            Err(Error::Mask(_))
        ));
    }

    #[test]
    fn binary_averaging_majority_vote() {
        let recs = vec![
            record_with_ip1("l", 0, (1, 3), &[0.0, 1.0, 0.9]),
            record_with_ip1("l", 1, (1, 3), &[0.0, 1.0, 0.1]),
        ];
        let m = derive_mask_with(
            &recs,
            "l",
            window(1, 2),
            MaskToken::Ip(0),
            ThresholdPolicy::Fixed(0.5),
            MaskAveraging::Binary,
        )
        .unwrap();
        assert_eq!(m.grid.data(), &[0., 1., 1.]);
    }

    #[test]
    fn not_background_policy_uses_complement() {
        let mut rec = record_with_ip1("l", 0, (1, 2), &[0.0, 0.0]);
        let mut p = rec.probs.clone().into_data();
        // position 0 attends to ip2 (background); position 1 does not
        for h in 0..2 {
            let row0 = h * 2 * 6;
            p[row0] = 0.2;
            p[row0 + 3] = 0.8;
        }
        rec.probs = Tensor::new(&[2, 2, 6], p).unwrap();
        let m = derive_mask(&[rec], "l", window(1, 1), MaskToken::NotBackground, ThresholdPolicy::default()).unwrap();
        assert_eq!(m.grid.data(), &[0., 1.]);
    }

    #[test]
    fn mask_for_layer_transport() {
        let cfg = UNetConfig::default();
        let src = MaskProvenance {
            layer_id: "up1.attn2".into(),
            steps: vec![2, 3],
            token: MaskToken::Ip(0),
            policy: ThresholdPolicy::default(),
            averaging: MaskAveraging::Soft,
            threshold: 0.5,
        };
        let grid = Tensor::from_fn(&[8, 8], |i| ((i / 8 + i % 8) % 2) as f32).unwrap();
        let m = SubjectMask::from_grid(grid.clone(), src.clone()).unwrap();
        assert_eq!(mask_for_layer(&m, "up1.attn1", &cfg).unwrap(), grid);
        let up = mask_for_layer(&m, "up2.attn1", &cfg).unwrap();
        assert_eq!(up.shape(), &[16, 16]);
        assert!(up.data().iter().all(|&v| v == 0.0 || v == 1.0));
        assert_eq!(up.at(&[2, 3]), grid.at(&[1, 1]));
        assert!(mask_for_layer(&m, "nope", &cfg).is_err());

        let checker = Tensor::new(&[2, 2], vec![1., 0., 0., 1.]).unwrap();
        let m2 = SubjectMask::from_grid(checker, src).unwrap();
        let small = UNetConfig {
            spatial: (8, 8),
            ..UNetConfig::default()
        };
        let out = mask_for_layer(&m2, "up1.attn2", &small).unwrap();
        assert_eq!(out.data(), &[1., 1., 0., 0., 1., 1., 0., 0., 0., 0., 1., 1., 0., 0., 1., 1.]);
    }

    #[test]
    fn policy_strings_round_trip() {
        for p in [ThresholdPolicy::Fixed(0.5), ThresholdPolicy::Fixed(0.25), ThresholdPolicy::Otsu] {
            assert_eq!(p.to_string().parse::<ThresholdPolicy>().unwrap(), p);
        }
        for t in [MaskToken::Ip(0), MaskToken::Ip(3), MaskToken::NotBackground] {
            assert_eq!(t.to_string().parse::<MaskToken>().unwrap(), t);
        }
        assert!("ip5".parse::<MaskToken>().is_err());
    }
}
