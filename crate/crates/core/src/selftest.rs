//! Quick invariant checks behind `monkey selftest`.

use crate::attention::AttentionRecord;
use crate::error::{Error, Result};
use crate::eval::cosine_sim;
use crate::io::checkpoint;
use crate::mask::{derive_mask, MaskToken, ThresholdPolicy};
use crate::model::{Model, ModelConfig};
use crate::pipeline::{generate_baseline, generate_monkey, generate_monkey_with, GenerationConfig, GenerationOptions};
use crate::sampler::{initial_noise, make_schedule, NoiseSeed, StepWindow};
use crate::tensor::Tensor;

type Check = fn() -> Result<()>;

const CHECKS: [(&str, Check); 8] = [
    ("softmax rows sum to one", softmax_rows),
    ("schedule 4 is a subset of schedule 8", schedule_subset),
    ("noise is seed-deterministic", noise_determinism),
    ("fixed-threshold mask oracle", mask_oracle),
    ("checkpoint round trip is bitwise", checkpoint_round_trip),
    ("cosine similarity unit cases", cosine_cases),
    ("generation is deterministic and passes share noise", generation_determinism),
    ("all-ones mask equals baseline", all_ones_mask_is_noop),
];

/// Run every check; each entry is `(name, outcome)`.
pub fn run_all() -> Vec<(&'static str, Result<()>)> {
    CHECKS.iter().map(|(name, f)| (*name, f())).collect()
}

fn ensure(ok: bool, module_err: impl FnOnce() -> Error) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(module_err())
    }
}

fn softmax_rows() -> Result<()> {
    let x = Tensor::from_fn(&[7, 11], |i| ((i * 37 % 23) as f32 - 11.0) * 0.7)?;
    let p = x.softmax(1)?;
    for r in 0..7 {
        let s: f64 = p.data()[r * 11..(r + 1) * 11].iter().map(|&v| v as f64).sum();
        ensure((s - 1.0).abs() < 1e-6, || Error::NonFinite { op: "softmax row sum" })?;
    }
    Ok(())
}

fn schedule_subset() -> Result<()> {
    let (a, b) = (make_schedule(4)?, make_schedule(8)?);
    ensure(a.timesteps == [999, 749, 499, 249], || Error::StepOutOfRange { index: 0, num_steps: 4 })?;
    ensure(a.timesteps.iter().all(|t| b.timesteps.contains(t)), || Error::StepOutOfRange {
        index: 0,
        num_steps: 8,
    })
}

fn noise_determinism() -> Result<()> {
    let a = initial_noise(NoiseSeed::new(11), &[4, 16, 16])?;
    let b = initial_noise(NoiseSeed::new(11), &[4, 16, 16])?;
    let c = initial_noise(NoiseSeed::new(12), &[4, 16, 16])?;
    ensure(a.bit_eq(&b) && !a.bit_eq(&c), || Error::Config("noise is not a function of the seed".into()))
}

fn mask_oracle() -> Result<()> {
    // ip1 share 0.9 on the left column, 0.1 on the right, 2x2 grid, one head
    let ip1 = [0.9f32, 0.1, 0.9, 0.1];
    let mut probs = Vec::new();
    for &v in &ip1 {
        probs.extend([1.0 - v, 0.0, v, 0.0, 0.0, 0.0]);
    }
    let rec = |step| -> Result<AttentionRecord> {
        Ok(AttentionRecord {
            layer_id: "up1.attn2".into(),
            step_index: step,
            probs: Tensor::new(&[1, 4, 6], probs.clone())?,
            spatial_dims: (2, 2),
        })
    };
    let records = [rec(1)?, rec(2)?];
    let m = derive_mask(
        &records,
        "up1.attn2",
        StepWindow::new(2, 3)?,
        MaskToken::Ip(0),
        ThresholdPolicy::Fixed(0.5),
    )?;
    ensure(m.grid.data() == [1.0, 0.0, 1.0, 0.0], || Error::Mask(format!("unexpected mask {:?}", m.grid.data())))
}

fn checkpoint_round_trip() -> Result<()> {
    let m = Model::random(ModelConfig::default(), 21)?;
    let bytes = checkpoint::to_bytes(&m);
    let back = checkpoint::from_bytes(&bytes)?;
    ensure(back == m && checkpoint::to_bytes(&back) == bytes, || {
        Error::Malformed("round trip changed the model".into())
    })
}

fn cosine_cases() -> Result<()> {
    let ok = (cosine_sim(&[0.5, -2.0], &[0.5, -2.0])? - 1.0).abs() < 1e-9
        && cosine_sim(&[1.0, 0.0], &[0.0, 1.0])?.abs() < 1e-9
        && (cosine_sim(&[1.0, 0.0], &[1.0, 1.0])? - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-9;
    ensure(ok, || Error::Eval("cosine unit case mismatch".into()))
}

fn generation_determinism() -> Result<()> {
    let model = Model::random(ModelConfig::default(), 1)?;
    let cfg = GenerationConfig::default();
    let (a, b) = (generate_monkey(&cfg, &model)?, generate_monkey(&cfg, &model)?);
    let same = a.image.bit_eq(&b.image) && a.mask == b.mask;
    let shared = a.noise_checksums.len() == 2 && a.noise_checksums[0] == a.noise_checksums[1];
    ensure(same && shared, || Error::Config("generation is not reproducible".into()))
}

fn all_ones_mask_is_noop() -> Result<()> {
    let model = Model::random(ModelConfig::default(), 1)?;
    let cfg = GenerationConfig::default();
    let base = generate_baseline(&cfg, &model)?;
    let opts = GenerationOptions {
        mask_override: Some(Tensor::full(&[8, 8], 1.0)?),
        ..Default::default()
    };
    let masked = generate_monkey_with(&cfg, &model, &opts)?;
    ensure(masked.latent.bit_eq(&base.latent), || {
        Error::Config("all-ones mask changed the output".into())
    })
}

#[cfg(test)]
mod tests {
    #[test]
    fn all_checks_pass() {
        for (name, outcome) in super::run_all() {
            assert!(outcome.is_ok(), "{name}: {outcome:?}");
        }
    }
}
