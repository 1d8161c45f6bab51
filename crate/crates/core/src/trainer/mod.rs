//! Denoising training on the synthetic corpus, with explicit backward passes.

pub mod data;
pub mod gradcheck;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::attention::CaptureSink;
use crate::encoders::{build_conditioning, embed_ids, encode_image_backward, encode_image_cached, tokenize};
use crate::error::{Error, Result};
use crate::io::kv::KvMap;
use crate::mask::{token_map, MaskToken};
use crate::model::{encode_latent, Model};
use crate::sampler::{alpha_bar, initial_noise, make_schedule, NoiseSeed, StepWindow, TRAIN_TIMESTEPS};
use crate::tensor::Tensor;
use crate::unet::{backward::backward, forward_with_tape, predict_noise, Guidance};
use crate::weights::ModelWeights;

use data::SyntheticSample;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub momentum: f32,
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
    pub report_every: usize,
    pub dataset_size: usize,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.02,
            momentum: 0.9,
            batch_size: 8,
            iterations: 4000,
            seed: 0,
            report_every: 50,
            dataset_size: 128,
            grad_clip: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = self.learning_rate > 0.0
            && self.batch_size > 0
            && self.iterations > 0
            && self.report_every > 0
            && self.dataset_size > 0;
        if !positive || !(0.0..1.0).contains(&self.momentum) || self.grad_clip < 0.0 {
            return Err(Error::Training(format!("invalid train config {self:?}")));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("learning_rate", self.learning_rate);
        kv.set("momentum", self.momentum);
        kv.set("batch_size", self.batch_size);
        kv.set("iterations", self.iterations);
        kv.set("train_seed", self.seed);
        kv.set("report_every", self.report_every);
        kv.set("dataset_size", self.dataset_size);
        kv.set("grad_clip", self.grad_clip);
        kv
    }

    /// Overwrite fields present in `kv`.
    pub fn apply_kv(&mut self, kv: &KvMap) -> Result<()> {
        if let Some(v) = kv.parse_opt("learning_rate")? {
            self.learning_rate = v;
        }
        if let Some(v) = kv.parse_opt("momentum")? {
            self.momentum = v;
        }
        if let Some(v) = kv.parse_opt("batch_size")? {
            self.batch_size = v;
        }
        if let Some(v) = kv.parse_opt("iterations")? {
            self.iterations = v;
        }
        if let Some(v) = kv.parse_opt("train_seed")? {
            self.seed = v;
        }
        if let Some(v) = kv.parse_opt("report_every")? {
            self.report_every = v;
        }
        if let Some(v) = kv.parse_opt("dataset_size")? {
            self.dataset_size = v;
        }
        if let Some(v) = kv.parse_opt("grad_clip")? {
            self.grad_clip = v;
        }
        Ok(())
    }
}

/// One corrupted training example.
#[derive(Debug, Clone)]
pub struct Example {
    pub noisy: Tensor,
    pub t: usize,
    pub noise: Tensor,
    pub caption: String,
    pub reference: Tensor,
}

impl Example {
    pub fn new(sample: &SyntheticSample, t: usize, noise: Tensor) -> Result<Self> {
        let x0 = encode_latent(&sample.image)?;
        let a = alpha_bar(t);
        let (sa, s1a) = (a.sqrt(), (1.0 - a).sqrt());
        let noisy = Tensor::new(
            x0.shape(),
            x0.data()
                .iter()
                .zip(noise.data())
                .map(|(&x, &e)| (sa * x as f64 + s1a * e as f64) as f32)
                .collect(),
        )?;
        Ok(Self {
            noisy,
            t,
            noise,
            caption: sample.caption.clone(),
            reference: sample.reference.clone(),
        })
    }
}

/// Mean squared noise-prediction error. With `grads`, also accumulates
/// `grad_scale · ∂loss/∂θ` for every parameter, including the text table and
/// the image encoder.
pub fn example_loss(model: &Model, ex: &Example, grads: Option<(&mut ModelWeights, f64)>) -> Result<f64> {
    let w = &model.weights;
    let ids = tokenize(&ex.caption, &model.vocab, model.config.max_text_len)?;
    let table = w.get("text/embedding")?;
    let text = embed_ids(&ids, table)?;
    let s = model.config.encoder.input_size;
    let reference = ex.reference.resize_nearest((s, s))?;
    let (ip, enc_cache) = encode_image_cached(&reference, w, &model.config.encoder)?;
    let cond = build_conditioning(&text, &ip)?;
    let guidance = Guidance::unmasked(1.0);
    let ucfg = &model.config.unet;
    let Some((grads, scale)) = grads else {
        let pred = predict_noise(&ex.noisy, ex.t, &cond, w, ucfg, &guidance, None)?;
        return Ok(mse(&pred, &ex.noise));
    };
    let (pred, tape) = forward_with_tape(&ex.noisy, ex.t, &cond, w, ucfg, &guidance)?;
    let loss = mse(&pred, &ex.noise);
    let n = pred.numel() as f64;
    let d_out = Tensor::new(
        pred.shape(),
        pred.data()
            .iter()
            .zip(ex.noise.data())
            .map(|(&p, &e)| (2.0 * (p as f64 - e as f64) / n * scale) as f32)
            .collect(),
    )?;
    let d_cond = backward(&tape, &d_out, &cond, w, ucfg, grads)?;

    let d = table.dim(1);
    let mut d_table = vec![0f32; table.numel()];
    for (row, &id) in ids.iter().enumerate() {
        for k in 0..d {
            d_table[id * d + k] += d_cond.data()[row * d + k];
        }
    }
    grads.accumulate("text/embedding", &Tensor::new(table.shape(), d_table)?)?;
    let ip_span = cond.ip_span();
    let d_ip = Tensor::new(&[ip_span.len(), d], d_cond.data()[ip_span.start * d..ip_span.end * d].to_vec())?;
    encode_image_backward(&enc_cache, &d_ip, w, &model.config.encoder, grads)?;
    Ok(loss)
}

fn mse(pred: &Tensor, target: &Tensor) -> f64 {
    let sum: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &e)| (p as f64 - e as f64).powi(2))
        .sum();
    sum / pred.numel() as f64
}

/// Whether a parameter is updated by training.
pub fn is_trainable(name: &str) -> bool {
    !name.starts_with("decoder/")
}

/// SGD with heavy-ball momentum.
#[derive(Debug, Clone, Default)]
pub struct Sgd {
    velocity: ModelWeights,
}

impl Sgd {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn apply(&mut self, weights: &mut ModelWeights, grads: &ModelWeights, lr: f32, momentum: f32) -> Result<()> {
        for (name, g) in grads.iter().filter(|(n, _)| is_trainable(n)) {
            let v = match self.velocity.get(name) {
                Ok(prev) => Tensor::new(
                    g.shape(),
                    prev.data().iter().zip(g.data()).map(|(&v, &g)| momentum * v + g).collect(),
                )?,
                Err(_) => g.clone(),
            };
            let p = weights.get_mut(name)?;
            let updated = Tensor::new(
                p.shape(),
                p.data().iter().zip(v.data()).map(|(&p, &v)| p - lr * v).collect(),
            )?;
            *p = updated;
            self.velocity.insert(name.clone(), v);
        }
        Ok(())
    }
}

fn global_norm(grads: &ModelWeights) -> f64 {
    grads
        .iter()
        .flat_map(|(_, t)| t.data().iter())
        .map(|&v| (v as f64).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// One optimizer step on `batch`; returns the mean batch loss.
pub fn train_step(
    model: &mut Model,
    batch: &[&SyntheticSample],
    optimizer: &mut Sgd,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
    iteration: usize,
) -> Result<f32> {
    if batch.is_empty() {
        return Err(Error::Training("empty batch".into()));
    }
    let u = &model.config.unet;
    let shape = [u.latent_channels, u.spatial.0, u.spatial.1];
    let mut grads = ModelWeights::new();
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for sample in batch {
        let t = rng.gen_range(0..TRAIN_TIMESTEPS);
        let noise = Tensor::from_fn(&shape, |_| rng.sample::<f32, _>(StandardNormal))?;
        let ex = Example::new(sample, t, noise)?;
        loss += example_loss(model, &ex, Some((&mut grads, scale)))? * scale;
    }
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            iteration,
            detail: format!("batch of {} gave loss {loss}", batch.len()),
        });
    }
    if config.grad_clip > 0.0 {
        let norm = global_norm(&grads);
        if !norm.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration,
                detail: "gradient norm is not finite".into(),
            });
        }
        if norm > config.grad_clip as f64 {
            let k = (config.grad_clip as f64 / norm) as f32;
            grads = grads.map(|_, g| g.scale(k))?;
        }
    }
    optimizer.apply(&mut model.weights, &grads, config.learning_rate, config.momentum)?;
    Ok(loss as f32)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// `(iteration, mean loss since the previous report)`, 1-based iterations.
    pub losses: Vec<(usize, f32)>,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,loss\n");
        for (i, l) in &self.losses {
            out.push_str(&format!("{i},{l}\n"));
        }
        out
    }
}

/// Train in place. `on_report` sees each reported point as it is produced.
pub fn train(
    model: &mut Model,
    dataset: &[SyntheticSample],
    config: &TrainConfig,
    mut on_report: impl FnMut(usize, f32),
) -> Result<TrainReport> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Training("empty dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut optimizer = Sgd::new();
    let mut losses = Vec::new();
    let (mut acc, mut count) = (0.0f64, 0usize);
    for it in 1..=config.iterations {
        let batch: Vec<&SyntheticSample> = (0..config.batch_size)
            .map(|_| &dataset[rng.gen_range(0..dataset.len())])
            .collect();
        acc += train_step(model, &batch, &mut optimizer, config, &mut rng, it)? as f64;
        count += 1;
        if it % config.report_every == 0 || it == config.iterations {
            let mean = (acc / count as f64) as f32;
            losses.push((it, mean));
            on_report(it, mean);
            acc = 0.0;
            count = 0;
        }
    }
    Ok(TrainReport { losses })
}

/// Mean ip₁ attention inside and outside one image's ground-truth mask.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Contrast {
    pub inside: f64,
    pub outside: f64,
}

impl Contrast {
    pub fn passes(&self) -> bool {
        self.inside > self.outside
    }
}

/// Token-role probe: noise each sample to the timesteps of steps `window` of a
/// `steps`-step schedule, capture `layer`, average the ip₁ map, upsample it to
/// the ground-truth mask grid and compare inside/outside means.
pub fn subject_contrast(
    model: &Model,
    samples: &[SyntheticSample],
    layer: &str,
    steps: usize,
    window: StepWindow,
    seed: u64,
) -> Result<Vec<Contrast>> {
    let schedule = make_schedule(steps)?;
    window.check_within(steps)?;
    let u = &model.config.unet;
    let shape = [u.latent_channels, u.spatial.0, u.spatial.1];
    let (lh, lw) = u.layer_resolution(layer)?;
    let mut out = Vec::with_capacity(samples.len());
    for (k, sample) in samples.iter().enumerate() {
        let noise = initial_noise(NoiseSeed::new(seed.wrapping_add(k as u64)), &shape)?;
        let cond = model.conditioning(&sample.caption, &sample.reference)?;
        let mut acc = vec![0f64; lh * lw];
        for i in window.indices() {
            let ex = Example::new(sample, schedule.timesteps[i], noise.clone())?;
            let mut sink = CaptureSink::for_layers([layer]);
            predict_noise(&ex.noisy, ex.t, &cond, &model.weights, u, &Guidance::unmasked(1.0), Some(&mut sink))?;
            let rec = sink
                .records()
                .first()
                .ok_or_else(|| Error::UnknownLayer(layer.to_string()))?;
            for (a, v) in acc.iter_mut().zip(token_map(rec, MaskToken::Ip(0))?.data()) {
                *a += *v as f64;
            }
        }
        let n = window.len() as f64;
        let map = Tensor::new(&[lh, lw], acc.iter().map(|v| (v / n) as f32).collect())?;
        let (mh, mw) = (sample.mask.dim(0), sample.mask.dim(1));
        let up = map.resize_nearest((mh, mw))?;
        let (mut si, mut ni, mut so, mut no) = (0.0, 0usize, 0.0, 0usize);
        for (v, m) in up.data().iter().zip(sample.mask.data()) {
            if *m == 1.0 {
                si += *v as f64;
                ni += 1;
            } else {
                so += *v as f64;
                no += 1;
            }
        }
        if ni == 0 || no == 0 {
            return Err(Error::Training(format!("sample {k} mask has an empty class")));
        }
        out.push(Contrast {
            inside: si / ni as f64,
            outside: so / no as f64,
        });
    }
    Ok(out)
}
