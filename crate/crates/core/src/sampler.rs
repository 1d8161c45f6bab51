//! Deterministic few-step DDIM sampling (η = 0) and counter-based noise.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Length of the training timestep range.
pub const TRAIN_TIMESTEPS: usize = 1000;

/// Offset of the cosine ᾱ law.
const COSINE_S: f64 = 0.008;

/// Bound applied to every x₀ estimate.
pub const X0_CLAMP: f32 = 3.0;

/// Identifier of the noise generator, written into reproducibility records.
pub const NOISE_ALGORITHM: &str = "splitmix64-boxmuller-v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NoiseSeed {
    pub seed: u64,
}

impl NoiseSeed {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn algorithm(&self) -> &'static str {
        NOISE_ALGORITHM
    }
}

/// SplitMix64 output for counter `i` under `seed`.
pub(crate) fn splitmix64(seed: u64, i: u64) -> u64 {
    let mut z = seed.wrapping_add(i.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform in (0, 1] from the top 53 bits.
fn unit(bits: u64) -> f64 {
    ((bits >> 11) as f64 + 1.0) / (1u64 << 53) as f64
}

/// Standard normal tensor. Element pair `(2k, 2k+1)` comes from one
/// Box–Muller transform of counters `2k` and `2k+1`; `libm` keeps the
/// transcendental results identical across platforms.
pub fn initial_noise(seed: NoiseSeed, shape: &[usize]) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n + 1);
    let mut k = 0u64;
    while data.len() < n {
        let u1 = unit(splitmix64(seed.seed, 2 * k));
        let u2 = unit(splitmix64(seed.seed, 2 * k + 1));
        let r = libm::sqrt(-2.0 * libm::log(u1));
        let theta = 2.0 * std::f64::consts::PI * u2;
        data.push((r * libm::cos(theta)) as f32);
        data.push((r * libm::sin(theta)) as f32);
        k += 1;
    }
    data.truncate(n);
    Tensor::new(shape, data)
}

/// Cumulative signal rate ᾱ(t) of the cosine law, for t in [0, 1000).
pub fn alpha_bar(t: usize) -> f64 {
    let f = |x: f64| {
        let v = (x / TRAIN_TIMESTEPS as f64 + COSINE_S) / (1.0 + COSINE_S) * std::f64::consts::FRAC_PI_2;
        libm::cos(v).powi(2)
    };
    // Evaluated at t+1 so ᾱ(0) < 1 and ᾱ(999) > 0.
    f(t as f64 + 1.0) / f(0.0)
}

/// Inclusive 1-based step range as written in configs ("2-3"). Empty when
/// `last < first`, rendered as "none".
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepWindow {
    pub first: usize,
    pub last: usize,
}

impl StepWindow {
    pub fn new(first: usize, last: usize) -> Result<Self> {
        if first == 0 {
            return Err(Error::StepOutOfRange { index: 0, num_steps: last });
        }
        Ok(Self { first, last })
    }

    pub const fn empty() -> Self {
        Self { first: 1, last: 0 }
    }

    pub fn is_empty(&self) -> bool {
        self.last < self.first
    }

    pub fn len(&self) -> usize {
        if self.is_empty() {
            0
        } else {
            self.last - self.first + 1
        }
    }

    /// Whether 0-based step `i` lies inside the window.
    pub fn contains_index(&self, i: usize) -> bool {
        !self.is_empty() && (self.first..=self.last).contains(&(i + 1))
    }

    /// 0-based step indices covered by the window.
    pub fn indices(&self) -> std::ops::Range<usize> {
        if self.is_empty() {
            0..0
        } else {
            self.first - 1..self.last
        }
    }

    pub fn check_within(&self, num_steps: usize) -> Result<()> {
        if !self.is_empty() && self.last > num_steps {
            return Err(Error::StepOutOfRange {
                index: self.last,
                num_steps,
            });
        }
        Ok(())
    }
}

impl std::fmt::Display for StepWindow {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.is_empty() {
            write!(f, "none")
        } else {
            write!(f, "{}-{}", self.first, self.last)
        }
    }
}

impl std::str::FromStr for StepWindow {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "none" {
            return Ok(Self::empty());
        }
        let bad = || Error::Config(format!("step window `{s}` (expected `a-b` or `none`)"));
        let (a, b) = s.split_once('-').ok_or_else(bad)?;
        let a = a.trim().parse().map_err(|_| bad())?;
        let b = b.trim().parse().map_err(|_| bad())?;
        if a == 0 || b < a {
            return Err(bad());
        }
        Ok(Self { first: a, last: b })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub num_steps: usize,
    pub timesteps: Vec<usize>,
    pub alpha_bars: Vec<f64>,
}

/// Evenly spaced trailing timesteps `t_i = floor(1000·(N−i)/N) − 1`, so the
/// first step always starts at t = 999 and an N-step schedule is a subset of
/// any schedule whose length is a multiple of N.
pub fn make_schedule(num_steps: usize) -> Result<Schedule> {
    if num_steps == 0 {
        return Err(Error::ZeroSteps);
    }
    if num_steps > TRAIN_TIMESTEPS {
        return Err(Error::StepOutOfRange {
            index: num_steps,
            num_steps: TRAIN_TIMESTEPS,
        });
    }
    let timesteps: Vec<usize> = (0..num_steps)
        .map(|i| TRAIN_TIMESTEPS * (num_steps - i) / num_steps - 1)
        .collect();
    let alpha_bars = timesteps.iter().map(|&t| alpha_bar(t)).collect();
    Ok(Schedule {
        num_steps,
        timesteps,
        alpha_bars,
    })
}

/// One deterministic DDIM update from step `i` to step `i + 1`.
pub fn step(latent: &Tensor, eps_pred: &Tensor, schedule: &Schedule, i: usize) -> Result<Tensor> {
    if i >= schedule.num_steps {
        return Err(Error::StepOutOfRange {
            index: i,
            num_steps: schedule.num_steps,
        });
    }
    if latent.shape() != eps_pred.shape() {
        return Err(Error::ShapeMismatch {
            op: "step",
            left: latent.shape().to_vec(),
            right: eps_pred.shape().to_vec(),
        });
    }
    let a = schedule.alpha_bars[i];
    let (sa, s1a) = (a.sqrt(), (1.0 - a).sqrt());
    let x0: Vec<f32> = latent
        .data()
        .iter()
        .zip(eps_pred.data())
        .map(|(&x, &e)| (((x as f64 - s1a * e as f64) / sa) as f32).clamp(-X0_CLAMP, X0_CLAMP))
        .collect();
    if i + 1 == schedule.num_steps {
        return Tensor::new(latent.shape(), x0);
    }
    let an = schedule.alpha_bars[i + 1];
    let (sn, s1n) = (an.sqrt(), (1.0 - an).sqrt());
    let data = x0
        .iter()
        .zip(eps_pred.data())
        .map(|(&x0, &e)| (sn * x0 as f64 + s1n * e as f64) as f32)
        .collect();
    Tensor::new(latent.shape(), data)
}
