//! Prompt × subject evaluation grid with pluggable embedders.

use std::path::Path;

use crate::encoders::{embed_ids, tokenize, PAD_ID};
use crate::error::{Error, Result};
use crate::io::atomic_write;
use crate::model::Model;
use crate::pipeline::{generate, load_reference, GenerationConfig, Method};
use crate::sampler::{splitmix64, NoiseSeed};
use crate::tensor::Tensor;

const PROMPTS: &str = include_str!("../resources/prompts.txt");

/// The 20 bundled background prompts, in file order.
pub fn bundled_prompts() -> Vec<&'static str> {
    PROMPTS.lines().map(str::trim).filter(|l| !l.is_empty()).collect()
}

/// `a·b / (‖a‖‖b‖)` in f64, clamped to [−1, 1].
pub fn cosine_sim(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Eval(format!("vector lengths differ: {} vs {}", a.len(), b.len())));
    }
    let (mut dot, mut na, mut nb) = (0f64, 0f64, 0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

pub trait ImageEmbedder {
    fn embed_image(&self, image: &Tensor) -> Result<Vec<f32>>;
}

pub trait TextEmbedder {
    fn embed_text(&self, prompt: &str) -> Result<Vec<f32>>;
}

/// Mean of selected IP tokens from the model's image encoder.
pub struct EncoderEmbedder<'a> {
    pub model: &'a Model,
    pub tokens: std::ops::Range<usize>,
}

impl<'a> EncoderEmbedder<'a> {
    /// All IP tokens.
    pub fn image(model: &'a Model) -> Self {
        let n = model.config.encoder.regions.len();
        Self { model, tokens: 0..n }
    }

    /// The subject (first) token only.
    pub fn identity(model: &'a Model) -> Self {
        Self { model, tokens: 0..1 }
    }
}

impl ImageEmbedder for EncoderEmbedder<'_> {
    fn embed_image(&self, image: &Tensor) -> Result<Vec<f32>> {
        let tokens = self.model.image_tokens(image)?;
        let d = tokens.dim(1);
        let mut acc = vec![0f64; d];
        for t in self.tokens.clone() {
            for (a, v) in acc.iter_mut().zip(&tokens.data()[t * d..(t + 1) * d]) {
                *a += *v as f64;
            }
        }
        let n = self.tokens.len() as f64;
        Ok(acc.into_iter().map(|v| (v / n) as f32).collect())
    }
}

/// Raw pixels.
pub struct PixelEmbedder;

impl ImageEmbedder for PixelEmbedder {
    fn embed_image(&self, image: &Tensor) -> Result<Vec<f32>> {
        Ok(image.data().to_vec())
    }
}

/// Mean of the non-padding word embeddings.
pub struct MeanTextEmbedder<'a> {
    pub model: &'a Model,
}

impl TextEmbedder for MeanTextEmbedder<'_> {
    fn embed_text(&self, prompt: &str) -> Result<Vec<f32>> {
        let ids: Vec<usize> = tokenize(prompt, &self.model.vocab, self.model.config.max_text_len)?
            .into_iter()
            .filter(|&id| id != PAD_ID)
            .collect();
        let rows = embed_ids(&ids, self.model.weights.get("text/embedding")?)?;
        let d = rows.dim(1);
        let mut acc = vec![0f64; d];
        for r in 0..ids.len() {
            for (a, v) in acc.iter_mut().zip(&rows.data()[r * d..(r + 1) * d]) {
                *a += *v as f64;
            }
        }
        Ok(acc.into_iter().map(|v| (v / ids.len() as f64) as f32).collect())
    }
}

/// `text` scores the image embedding from `image` against the prompt, so the
/// two must share a width.
pub struct Embedders<'a> {
    pub image: &'a dyn ImageEmbedder,
    pub identity: &'a dyn ImageEmbedder,
    pub text: &'a dyn TextEmbedder,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scores {
    pub text_sim: f64,
    pub image_sim: f64,
    pub identity_sim: f64,
}

pub fn score(generated: &Tensor, reference: &Tensor, prompt: &str, e: &Embedders) -> Result<Scores> {
    let gen_img = e.image.embed_image(generated)?;
    Ok(Scores {
        text_sim: cosine_sim(&gen_img, &e.text.embed_text(prompt)?)?,
        image_sim: cosine_sim(&gen_img, &e.image.embed_image(reference)?)?,
        identity_sim: cosine_sim(&e.identity.embed_image(generated)?, &e.identity.embed_image(reference)?)?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub subject: usize,
    pub prompt: usize,
    pub seed: u64,
    pub scores: Scores,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellFailure {
    pub subject: usize,
    pub prompt: usize,
    pub seed: u64,
    pub module: &'static str,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRun {
    pub method: Method,
    pub subjects: Vec<String>,
    pub prompts: Vec<String>,
    pub cells: Vec<Cell>,
    pub failures: Vec<CellFailure>,
    /// Arithmetic means over successful cells; absent if none succeeded.
    pub means: Option<Scores>,
}

impl EvalRun {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Eval(e.to_string());
        w.write_record(["method", "subject", "prompt", "seed", "text_sim", "image_sim", "identity_sim"])
            .map_err(csv_err)?;
        for c in &self.cells {
            w.write_record([
                self.method.to_string(),
                self.subjects[c.subject].clone(),
                self.prompts[c.prompt].clone(),
                c.seed.to_string(),
                c.scores.text_sim.to_string(),
                c.scores.image_sim.to_string(),
                c.scores.identity_sim.to_string(),
            ])
            .map_err(csv_err)?;
        }
        finish(w)
    }
}

/// Per-cell seed from `(base, subject, prompt)`.
pub fn cell_seed(base: u64, subject: usize, prompt: usize) -> u64 {
    splitmix64(splitmix64(base, subject as u64), prompt as u64)
}

/// One generation per (subject, prompt). `base` supplies every setting except
/// seed, prompt and reference.
pub fn run_grid(
    subjects: &[String],
    prompts: &[&str],
    method: Method,
    model: &Model,
    embedders: &Embedders,
    base: &GenerationConfig,
) -> Result<EvalRun> {
    if subjects.is_empty() || prompts.is_empty() {
        return Err(Error::Eval("need at least one subject and one prompt".into()));
    }
    let mut cells = Vec::new();
    let mut failures = Vec::new();
    for (si, subject) in subjects.iter().enumerate() {
        let reference = load_reference(subject)?;
        for (pi, prompt) in prompts.iter().enumerate() {
            let seed = cell_seed(base.seed.seed, si, pi);
            let config = GenerationConfig {
                seed: NoiseSeed::new(seed),
                prompt: prompt.to_string(),
                reference: subject.clone(),
                ..base.clone()
            };
            let outcome = generate(&config, model, method).and_then(|r| score(&r.image, &reference, prompt, embedders));
            match outcome {
                Ok(scores) => cells.push(Cell {
                    subject: si,
                    prompt: pi,
                    seed,
                    scores,
                }),
                Err(e) => failures.push(CellFailure {
                    subject: si,
                    prompt: pi,
                    seed,
                    module: e.module(),
                    message: e.to_string(),
                }),
            }
        }
    }
    let means = (!cells.is_empty()).then(|| {
        let n = cells.len() as f64;
        let sum = |f: fn(&Scores) -> f64| cells.iter().map(|c| f(&c.scores)).sum::<f64>() / n;
        Scores {
            text_sim: sum(|s| s.text_sim),
            image_sim: sum(|s| s.image_sim),
            identity_sim: sum(|s| s.identity_sim),
        }
    });
    Ok(EvalRun {
        method,
        subjects: subjects.to_vec(),
        prompts: prompts.iter().map(|p| p.to_string()).collect(),
        cells,
        failures,
        means,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScatterRow {
    pub method: String,
    pub text_sim_mean: f64,
    pub image_sim_mean: f64,
}

/// One row per run with successful cells: `method,text_sim_mean,image_sim_mean`.
pub fn export_scatter(runs: &[EvalRun]) -> Result<String> {
    if runs.is_empty() {
        return Err(Error::Eval("no runs to export".into()));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Eval(e.to_string());
    w.write_record(["method", "text_sim_mean", "image_sim_mean"]).map_err(csv_err)?;
    for run in runs {
        if let Some(m) = run.means {
            w.write_record([run.method.to_string(), m.text_sim.to_string(), m.image_sim.to_string()])
                .map_err(csv_err)?;
        }
    }
    finish(w)
}

pub fn write_scatter(path: &Path, runs: &[EvalRun]) -> Result<()> {
    atomic_write(path, export_scatter(runs)?.as_bytes())
}

pub fn load_scatter(text: &str) -> Result<Vec<ScatterRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let headers = r.headers().map_err(|e| Error::Eval(e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["method", "text_sim_mean", "image_sim_mean"] {
        return Err(Error::Eval(format!("unexpected scatter header {headers:?}")));
    }
    let num = |s: &str| s.parse::<f64>().map_err(|e| Error::Eval(format!("`{s}`: {e}")));
    r.records()
        .map(|rec| {
            let rec = rec.map_err(|e| Error::Eval(e.to_string()))?;
            Ok(ScatterRow {
                method: rec[0].to_string(),
                text_sim_mean: num(&rec[1])?,
                image_sim_mean: num(&rec[2])?,
            })
        })
        .collect()
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Eval(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Eval(e.to_string()))
}
