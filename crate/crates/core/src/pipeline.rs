//! Baseline and two-pass masked generation.

use std::fmt;
use std::str::FromStr;

use crate::attention::{AttentionRecord, CaptureSink};
use crate::encoders::ConditioningSequence;
use crate::error::{Error, Result};
use crate::io::kv::KvMap;
use crate::mask::{derive_mask_with, MaskAveraging, MaskProvenance, MaskToken, SubjectMask, ThresholdPolicy};
use crate::model::{Model, LATENT_FACTOR};
use crate::sampler::{initial_noise, make_schedule, step, NoiseSeed, StepWindow, NOISE_ALGORITHM};
use crate::tensor::Tensor;
use crate::trainer::data::parse_synthetic_reference;
use crate::unet::{predict_noise, Guidance, MaskSites, DEFAULT_CAPTURE_LAYER, SITE_SLOTS};

/// Fixed output bias of the toy decoder.
pub const DECODER_BIAS: f32 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Method {
    Baseline,
    #[default]
    Monkey,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Baseline => "baseline",
            Method::Monkey => "monkey",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "baseline" => Ok(Method::Baseline),
            "monkey" => Ok(Method::Monkey),
            other => Err(Error::Config(format!("method `{other}` (expected baseline or monkey)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationConfig {
    pub seed: NoiseSeed,
    pub prompt: String,
    /// `synthetic:<color>:<shape>` or a PNG path.
    pub reference: String,
    pub pass1_steps: usize,
    pub pass1_window: StepWindow,
    pub pass2_steps: usize,
    pub pass2_mask_window: StepWindow,
    pub ip_scale: f32,
    pub capture_layer: String,
    pub mask_policy: ThresholdPolicy,
    pub mask_token: MaskToken,
    pub mask_averaging: MaskAveraging,
    pub mask_sites: MaskSites,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            seed: NoiseSeed::new(0),
            prompt: "on top of green grass".into(),
            reference: "synthetic:red:circle".into(),
            pass1_steps: 4,
            pass1_window: StepWindow { first: 2, last: 3 },
            pass2_steps: 8,
            pass2_mask_window: StepWindow { first: 3, last: 6 },
            ip_scale: 1.0,
            capture_layer: DEFAULT_CAPTURE_LAYER.into(),
            mask_policy: ThresholdPolicy::default(),
            mask_token: MaskToken::default(),
            mask_averaging: MaskAveraging::default(),
            mask_sites: MaskSites::All,
        }
    }
}

const CONFIG_KEYS: [&str; 14] = [
    "seed",
    "noise",
    "prompt",
    "reference",
    "pass1_steps",
    "pass1_window",
    "pass2_steps",
    "pass2_mask_window",
    "ip_scale",
    "capture_layer",
    "mask_policy",
    "mask_token",
    "mask_averaging",
    "mask_sites",
];

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.prompt.trim().is_empty() {
            return Err(Error::EmptyPrompt);
        }
        if self.prompt.contains(['\n', '\r']) || self.reference.contains(['\n', '\r']) {
            return Err(Error::Config("prompt and reference must be single lines".into()));
        }
        if self.pass1_steps == 0 || self.pass2_steps == 0 {
            return Err(Error::ZeroSteps);
        }
        if self.pass1_window.is_empty() {
            return Err(Error::Config("pass1_window must not be empty".into()));
        }
        self.pass1_window.check_within(self.pass1_steps)?;
        self.pass2_mask_window.check_within(self.pass2_steps)?;
        if !self.ip_scale.is_finite() || self.ip_scale < 0.0 {
            return Err(Error::Config(format!("ip_scale must be finite and >= 0, got {}", self.ip_scale)));
        }
        if !SITE_SLOTS.contains(&self.capture_layer.as_str()) {
            return Err(Error::UnknownLayer(self.capture_layer.clone()));
        }
        if let MaskSites::Only(ids) = &self.mask_sites {
            if let Some(bad) = ids.iter().find(|id| !SITE_SLOTS.contains(&id.as_str())) {
                return Err(Error::UnknownLayer(bad.clone()));
            }
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("seed", self.seed.seed);
        kv.set("noise", NOISE_ALGORITHM);
        kv.set("prompt", &self.prompt);
        kv.set("reference", &self.reference);
        kv.set("pass1_steps", self.pass1_steps);
        kv.set("pass1_window", self.pass1_window);
        kv.set("pass2_steps", self.pass2_steps);
        kv.set("pass2_mask_window", self.pass2_mask_window);
        kv.set("ip_scale", self.ip_scale);
        kv.set("capture_layer", &self.capture_layer);
        kv.set("mask_policy", self.mask_policy);
        kv.set("mask_token", self.mask_token);
        kv.set("mask_averaging", self.mask_averaging);
        kv.set(
            "mask_sites",
            match &self.mask_sites {
                MaskSites::All => "all".to_string(),
                MaskSites::Only(ids) => ids.join(","),
            },
        );
        kv
    }

    /// Overwrite fields present in `kv`; returns keys this config does not own.
    pub fn apply_kv(&mut self, kv: &KvMap) -> Result<Vec<String>> {
        if let Some(seed) = kv.parse_opt::<u64>("seed")? {
            self.seed = NoiseSeed::new(seed);
        }
        if let Some(alg) = kv.get("noise") {
            if alg != NOISE_ALGORITHM {
                return Err(Error::Config(format!("noise generator `{alg}` is not `{NOISE_ALGORITHM}`")));
            }
        }
        if let Some(v) = kv.get("prompt") {
            self.prompt = v.to_string();
        }
        if let Some(v) = kv.get("reference") {
            self.reference = v.to_string();
        }
        if let Some(v) = kv.parse_opt("pass1_steps")? {
            self.pass1_steps = v;
        }
        if let Some(v) = kv.get("pass1_window") {
            self.pass1_window = v.parse()?;
        }
        if let Some(v) = kv.parse_opt("pass2_steps")? {
            self.pass2_steps = v;
        }
        if let Some(v) = kv.get("pass2_mask_window") {
            self.pass2_mask_window = v.parse()?;
        }
        if let Some(v) = kv.parse_opt("ip_scale")? {
            self.ip_scale = v;
        }
        if let Some(v) = kv.get("capture_layer") {
            self.capture_layer = v.to_string();
        }
        if let Some(v) = kv.get("mask_policy") {
            self.mask_policy = v.parse()?;
        }
        if let Some(v) = kv.get("mask_token") {
            self.mask_token = v.parse()?;
        }
        if let Some(v) = kv.get("mask_averaging") {
            self.mask_averaging = v.parse()?;
        }
        if let Some(v) = kv.get("mask_sites") {
            self.mask_sites = parse_mask_sites(v);
        }
        Ok(kv
            .keys()
            .filter(|k| !CONFIG_KEYS.contains(k))
            .map(str::to_string)
            .collect())
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let mut cfg = GenerationConfig::default();
        let extra = cfg.apply_kv(kv)?;
        if let Some(k) = extra.first() {
            return Err(Error::Config(format!("unknown key `{k}`")));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn echo(&self) -> String {
        self.to_kv().render()
    }
}

pub fn parse_mask_sites(v: &str) -> MaskSites {
    match v.trim() {
        "all" => MaskSites::All,
        list => MaskSites::Only(list.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationResult {
    pub latent: Tensor,
    pub image: Tensor,
    pub pass1_image: Option<Tensor>,
    pub mask: Option<SubjectMask>,
    pub records: Vec<AttentionRecord>,
    /// Initial noise shared by every pass.
    pub noise: Tensor,
    /// CRC32 of the noise bytes as consumed by each pass.
    pub noise_checksums: Vec<u32>,
    /// Latent entering each step of the final pass.
    pub trajectory: Vec<Tensor>,
    pub config_echo: String,
}

/// Extra controls used by tests and the inspect command.
#[derive(Debug, Clone, Default)]
pub struct GenerationOptions {
    /// Additional layers captured during pass 1.
    pub capture_layers: Vec<String>,
    /// Also capture every site during pass 2.
    pub capture_pass2: bool,
    /// Replace the derived mask with this grid (test hook).
    pub mask_override: Option<Tensor>,
}

/// Decode with the transposed convolution (kernel = stride = 4) and clamp to [0, 1].
pub fn decode_latent(latent: &Tensor, decoder_weight: &Tensor) -> Result<Tensor> {
    let k = LATENT_FACTOR;
    if latent.rank() != 3 || decoder_weight.shape() != [latent.dim(0), 3, k, k] {
        return Err(Error::ShapeMismatch {
            op: "decode_latent",
            left: latent.shape().to_vec(),
            right: decoder_weight.shape().to_vec(),
        });
    }
    let (lc, h, w) = (latent.dim(0), latent.dim(1), latent.dim(2));
    let (oh, ow) = (h * k, w * k);
    let (x, wt) = (latent.data(), decoder_weight.data());
    let mut out = vec![0f32; 3 * oh * ow];
    for c in 0..3 {
        for y in 0..oh {
            for xx in 0..ow {
                let (sy, sx, a, b) = (y / k, xx / k, y % k, xx % k);
                let mut acc = DECODER_BIAS as f64;
                for l in 0..lc {
                    acc += wt[((l * 3 + c) * k + a) * k + b] as f64 * x[(l * h + sy) * w + sx] as f64;
                }
                out[(c * oh + y) * ow + xx] = (acc as f32).clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new(&[3, oh, ow], out)
}

/// Reference image `[3, H, W]` for a config reference string.
pub fn load_reference(reference: &str) -> Result<Tensor> {
    if reference.starts_with("synthetic:") {
        parse_synthetic_reference(reference)
    } else {
        crate::io::png::read_rgb(std::path::Path::new(reference))
    }
}

struct PassMask<'a> {
    grid: &'a Tensor,
    window: StepWindow,
    sites: &'a MaskSites,
}

struct Pass<'a> {
    model: &'a Model,
    cond: &'a ConditioningSequence,
    ip_scale: f32,
}

impl Pass<'_> {
    fn run(
        &self,
        noise: &Tensor,
        steps: usize,
        mask: Option<PassMask<'_>>,
        mut sink: Option<&mut CaptureSink>,
        mut trajectory: Option<&mut Vec<Tensor>>,
    ) -> Result<Tensor> {
        let schedule = make_schedule(steps)?;
        let ucfg = &self.model.config.unet;
        let mut latent = noise.clone();
        for i in 0..steps {
            if let Some(tr) = trajectory.as_deref_mut() {
                tr.push(latent.clone());
            }
            let guidance = match &mask {
                Some(m) if m.window.contains_index(i) => Guidance {
                    ip_scale: self.ip_scale,
                    mask: Some(m.grid),
                    mask_sites: m.sites.clone(),
                },
                _ => Guidance::unmasked(self.ip_scale),
            };
            if let Some(s) = sink.as_deref_mut() {
                s.set_step(i);
            }
            let eps = predict_noise(
                &latent,
                schedule.timesteps[i],
                self.cond,
                &self.model.weights,
                ucfg,
                &guidance,
                sink.as_deref_mut(),
            )?;
            latent = step(&latent, &eps, &schedule, i)?;
        }
        Ok(latent)
    }
}

fn noise_for(config: &GenerationConfig, model: &Model) -> Result<Tensor> {
    let u = &model.config.unet;
    initial_noise(config.seed, &[u.latent_channels, u.spatial.0, u.spatial.1])
}

fn checksum(t: &Tensor) -> u32 {
    crc32fast::hash(&t.to_le_bytes())
}

fn conditioning(config: &GenerationConfig, model: &Model) -> Result<ConditioningSequence> {
    model.conditioning(&config.prompt, &load_reference(&config.reference)?)
}

fn decode(model: &Model, latent: &Tensor) -> Result<Tensor> {
    decode_latent(latent, model.weights.get("decoder/weight")?)
}

/// Single unmasked pass of `pass2_steps` steps.
pub fn generate_baseline(config: &GenerationConfig, model: &Model) -> Result<GenerationResult> {
    config.validate()?;
    let cond = conditioning(config, model)?;
    baseline_with(config, model, &cond)
}

/// Baseline pass conditioned on text alone (IP rows removed).
pub fn generate_text_only(config: &GenerationConfig, model: &Model) -> Result<GenerationResult> {
    config.validate()?;
    let cond = ConditioningSequence::text_only(&model.text_tokens(&config.prompt)?)?;
    baseline_with(config, model, &cond)
}

fn baseline_with(config: &GenerationConfig, model: &Model, cond: &ConditioningSequence) -> Result<GenerationResult> {
    let noise = noise_for(config, model)?;
    let pass = Pass {
        model,
        cond,
        ip_scale: config.ip_scale,
    };
    let mut trajectory = Vec::new();
    let noise_checksums = vec![checksum(&noise)];
    let latent = pass.run(&noise, config.pass2_steps, None, None, Some(&mut trajectory))?;
    Ok(GenerationResult {
        image: decode(model, &latent)?,
        latent,
        pass1_image: None,
        mask: None,
        records: Vec::new(),
        noise,
        noise_checksums,
        trajectory,
        config_echo: config.echo(),
    })
}

pub fn generate_monkey(config: &GenerationConfig, model: &Model) -> Result<GenerationResult> {
    generate_monkey_with(config, model, &GenerationOptions::default())
}

pub fn generate_monkey_with(
    config: &GenerationConfig,
    model: &Model,
    options: &GenerationOptions,
) -> Result<GenerationResult> {
    config.validate()?;
    if !model.config.unet.has_site(&config.capture_layer) {
        return Err(Error::UnknownLayer(config.capture_layer.clone()));
    }
    let cond = conditioning(config, model)?;
    let noise = noise_for(config, model)?;
    let pass = Pass {
        model,
        cond: &cond,
        ip_scale: config.ip_scale,
    };

    let mut layers = vec![config.capture_layer.clone()];
    layers.extend(options.capture_layers.iter().cloned());
    let mut sink = CaptureSink::for_layers(layers);
    let mut checksums = vec![checksum(&noise)];
    let pass1_latent = pass.run(&noise, config.pass1_steps, None, Some(&mut sink), None)?;
    let pass1_image = decode(model, &pass1_latent)?;
    let mut records = sink.into_records();

    let mask = match &options.mask_override {
        Some(grid) => SubjectMask::from_grid(
            grid.clone(),
            MaskProvenance {
                layer_id: "override".into(),
                steps: Vec::new(),
                token: config.mask_token,
                policy: config.mask_policy,
                averaging: config.mask_averaging,
                threshold: f32::NAN,
            },
        ),
        None => derive_mask_with(
            &records,
            &config.capture_layer,
            config.pass1_window,
            config.mask_token,
            config.mask_policy,
            config.mask_averaging,
        )
        .and_then(|m| {
            if m.is_empty() {
                Err(Error::Mask("derived mask is empty (no subject cells)".into()))
            } else {
                Ok(m)
            }
        }),
    }
    .map_err(|e| Error::MaskDerivation {
        source: Box::new(e),
        pass1_image: Box::new(pass1_image.clone()),
    })?;

    checksums.push(checksum(&noise));
    if checksums[0] != checksums[1] {
        return Err(Error::Config("initial noise changed between passes".into()));
    }
    let mut trajectory = Vec::new();
    let mut sink2 = CaptureSink::new();
    let latent = pass.run(
        &noise,
        config.pass2_steps,
        Some(PassMask {
            grid: &mask.grid,
            window: config.pass2_mask_window,
            sites: &config.mask_sites,
        }),
        options.capture_pass2.then_some(&mut sink2),
        Some(&mut trajectory),
    )?;
    if options.capture_pass2 {
        records.extend(sink2.into_records().into_iter().map(|mut r| {
            r.layer_id = format!("pass2:{}", r.layer_id);
            r
        }));
    }
    Ok(GenerationResult {
        image: decode(model, &latent)?,
        latent,
        pass1_image: Some(pass1_image),
        mask: Some(mask),
        records,
        noise,
        noise_checksums: checksums,
        trajectory,
        config_echo: config.echo(),
    })
}

/// Attention records of an unmasked `pass1_steps` run for `layers`.
pub fn capture_pass1(config: &GenerationConfig, model: &Model, layers: &[String]) -> Result<Vec<AttentionRecord>> {
    config.validate()?;
    if let Some(bad) = layers.iter().find(|l| !model.config.unet.has_site(l)) {
        return Err(Error::UnknownLayer(bad.clone()));
    }
    let cond = conditioning(config, model)?;
    let noise = noise_for(config, model)?;
    let pass = Pass {
        model,
        cond: &cond,
        ip_scale: config.ip_scale,
    };
    let mut sink = CaptureSink::for_layers(layers.iter().cloned());
    pass.run(&noise, config.pass1_steps, None, Some(&mut sink), None)?;
    Ok(sink.into_records())
}

pub fn generate(config: &GenerationConfig, model: &Model, method: Method) -> Result<GenerationResult> {
    match method {
        Method::Baseline => generate_baseline(config, model),
        Method::Monkey => generate_monkey(config, model),
    }
}
