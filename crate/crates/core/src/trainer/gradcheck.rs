//! Central finite differences against the hand-written backward passes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::data::SyntheticSample;
use super::{example_loss, is_trainable, Example};
use crate::error::Result;
use crate::model::Model;
use crate::sampler::{initial_noise, NoiseSeed, TRAIN_TIMESTEPS};
use crate::tensor::{backward, Tensor};
use crate::weights::ModelWeights;

/// Finite-difference half step.
pub const FD_STEP: f32 = 1e-3;

/// Difference formula used as the numeric oracle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Stencil {
    /// `(f(p+h) − f(p−h)) / 2h`
    Central { step: f32 },
    /// `(−f(p+2h) + 8f(p+h) − 8f(p−h) + f(p−2h)) / 12h`
    FivePoint { step: f32 },
}

impl Default for Stencil {
    fn default() -> Self {
        Stencil::Central { step: FD_STEP }
    }
}

/// Gradients smaller than this are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checks: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.checks.iter().map(|c| c.rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.checks.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// `|a − n| / max(|a|, |n|, REL_FLOOR)`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Numeric derivative of `loss` in parameter `(name, index)`. Divisors use
/// the steps actually taken after f32 rounding of `p ± h`.
fn finite_difference(
    weights: &mut ModelWeights,
    name: &str,
    index: usize,
    stencil: Stencil,
    mut loss: impl FnMut(&ModelWeights) -> Result<f64>,
) -> Result<f64> {
    let original = weights.get(name)?.clone();
    let p = original.data()[index];
    let mut perturbed = |v: f32| -> Result<f64> {
        let mut data = original.data().to_vec();
        data[index] = v;
        *weights.get_mut(name)? = Tensor::new(original.shape(), data)?;
        loss(weights)
    };
    let d = match stencil {
        Stencil::Central { step } => {
            let (up, down) = (p + step, p - step);
            (perturbed(up)? - perturbed(down)?) / (up as f64 - down as f64)
        }
        Stencil::FivePoint { step } => {
            let (up, down) = (p + step, p - step);
            let (up2, down2) = (p + 2.0 * step, p - 2.0 * step);
            let near = (perturbed(up)? - perturbed(down)?) / (up as f64 - down as f64);
            let far = (perturbed(up2)? - perturbed(down2)?) / (up2 as f64 - down2 as f64);
            (4.0 * near - far) / 3.0
        }
    };
    *weights.get_mut(name)? = original;
    Ok(d)
}

fn pick_params(weights: &ModelWeights, n: usize, rng: &mut ChaCha8Rng) -> Vec<(String, usize)> {
    let names: Vec<(String, usize)> = weights
        .iter()
        .filter(|(name, _)| is_trainable(name))
        .map(|(name, t)| (name.clone(), t.numel()))
        .collect();
    (0..n)
        .map(|_| {
            let (name, numel) = &names[rng.gen_range(0..names.len())];
            (name.clone(), rng.gen_range(0..*numel))
        })
        .collect()
}

/// Check `n_params` randomly chosen parameters of the full model (text table,
/// image encoder and UNet) on one noised sample, using central differences.
pub fn check_gradients(model: &Model, sample: &SyntheticSample, n_params: usize, seed: u64) -> Result<GradCheckReport> {
    check_gradients_with(model, sample, n_params, seed, Stencil::default())
}

pub fn check_gradients_with(
    model: &Model,
    sample: &SyntheticSample,
    n_params: usize,
    seed: u64,
    stencil: Stencil,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = &model.config.unet;
    let t = rng.gen_range(0..TRAIN_TIMESTEPS);
    let noise = initial_noise(NoiseSeed::new(seed), &[u.latent_channels, u.spatial.0, u.spatial.1])?;
    let ex = Example::new(sample, t, noise)?;
    let mut grads = ModelWeights::new();
    example_loss(model, &ex, Some((&mut grads, 1.0)))?;

    let mut probe = model.clone();
    let mut checks = Vec::with_capacity(n_params);
    for (name, index) in pick_params(&model.weights, n_params, &mut rng) {
        let analytic = grads.get(&name).map(|g| g.data()[index] as f64).unwrap_or(0.0);
        let config = probe.config.clone();
        let vocab = probe.vocab.clone();
        let numeric = finite_difference(&mut probe.weights, &name, index, stencil, |w| {
            let m = Model {
                config: config.clone(),
                vocab: vocab.clone(),
                weights: w.clone(),
            };
            example_loss(&m, &ex, None)
        })?;
        checks.push(ParamCheck {
            rel_error: rel_error(analytic, numeric),
            name,
            index,
            analytic,
            numeric,
        });
    }
    Ok(GradCheckReport { checks })
}

/// Linear-only model `y = x·W + b` with MSE to a fixed target.
#[derive(Debug, Clone)]
pub struct LinearProblem {
    pub x: Tensor,
    pub target: Tensor,
    pub weights: ModelWeights,
}

impl LinearProblem {
    pub fn random(seed: u64, batch: usize, inputs: usize, outputs: usize) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |shape: &[usize]| Tensor::from_fn(shape, |_| rng.gen_range(-1.0f32..1.0));
        let x = draw(&[batch, inputs])?;
        let target = draw(&[batch, outputs])?;
        let mut weights = ModelWeights::new();
        weights.insert("linear/weight", draw(&[inputs, outputs])?);
        weights.insert("linear/bias", draw(&[outputs])?);
        Ok(Self { x, target, weights })
    }

    /// Loss evaluated entirely in f64 from the f32 parameters.
    pub fn loss(&self, weights: &ModelWeights) -> Result<f64> {
        let w = weights.get("linear/weight")?;
        let b = weights.get("linear/bias")?;
        let (rows, inputs, outputs) = (self.x.dim(0), self.x.dim(1), w.dim(1));
        let mut sum = 0.0;
        for r in 0..rows {
            for o in 0..outputs {
                let y = b.data()[o] as f64
                    + (0..inputs)
                        .map(|i| self.x.data()[r * inputs + i] as f64 * w.data()[i * outputs + o] as f64)
                        .sum::<f64>();
                sum += (y - self.target.data()[r * outputs + o] as f64).powi(2);
            }
        }
        Ok(sum / (rows * outputs) as f64)
    }

    pub fn gradients(&self) -> Result<ModelWeights> {
        let w = self.weights.get("linear/weight")?;
        let y = self.x.linear(w, Some(self.weights.get("linear/bias")?))?;
        let n = y.numel() as f64;
        let dy = Tensor::new(
            y.shape(),
            y.data()
                .iter()
                .zip(self.target.data())
                .map(|(&a, &b)| (2.0 * (a as f64 - b as f64) / n) as f32)
                .collect(),
        )?;
        let (_, dw, db) = backward::linear(&self.x, w, &dy)?;
        let mut g = ModelWeights::new();
        g.insert("linear/weight", dw);
        g.insert("linear/bias", db);
        Ok(g)
    }

    /// Check every parameter.
    pub fn check(&self) -> Result<GradCheckReport> {
        let grads = self.gradients()?;
        let mut weights = self.weights.clone();
        let mut checks = Vec::new();
        for (name, t) in self.weights.iter() {
            for index in 0..t.numel() {
                let analytic = grads.get(name)?.data()[index] as f64;
                let numeric = finite_difference(&mut weights, name, index, Stencil::default(), |w| self.loss(w))?;
                checks.push(ParamCheck {
                    name: name.clone(),
                    index,
                    analytic,
                    numeric,
                    rel_error: rel_error(analytic, numeric),
                });
            }
        }
        Ok(GradCheckReport { checks })
    }
}
