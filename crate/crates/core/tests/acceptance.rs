//! Acceptance suite: one PASS/FAIL line per criterion.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use monkey_core::attention::{cross_attention, CaptureSink, CrossAttentionWeights, IpMaskDirective, Site};
use monkey_core::encoders::{build_conditioning, ConditioningSequence};
use monkey_core::error::Error;
use monkey_core::eval::{self, cosine_sim, EncoderEmbedder, Embedders, MeanTextEmbedder};
use monkey_core::io::checkpoint;
use monkey_core::mask::{derive_mask, MaskToken, ThresholdPolicy};
use monkey_core::model::{Model, ModelConfig};
use monkey_core::pipeline::{
    generate_baseline, generate_monkey, generate_monkey_with, generate_text_only, GenerationConfig, GenerationOptions,
    Method,
};
use monkey_core::sampler::{initial_noise, StepWindow};
use monkey_core::trainer::gradcheck::{check_gradients, check_gradients_with, LinearProblem, Stencil};
use monkey_core::trainer::{data, subject_contrast, train, TrainConfig};
use monkey_core::Tensor;
use monkey_core::attention::AttentionRecord;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------- attention

struct Instance {
    x: Tensor,
    cond: ConditioningSequence,
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    bo: Tensor,
    heads: usize,
    grid: (usize, usize),
}

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0f32..1.0)).unwrap()
}

/// S ≤ 6 positions, T = text + 4 IP ≤ 6 tokens.
fn instance(rng: &mut ChaCha8Rng) -> Instance {
    let grid = (rng.gen_range(1..=2), rng.gen_range(1..=3));
    let s = grid.0 * grid.1;
    let n_text = rng.gen_range(1..=2);
    let (d, dm) = (rng.gen_range(2..=6), rng.gen_range(2..=6));
    let heads = rng.gen_range(1..=2);
    let inner = heads * rng.gen_range(1..=4);
    let text = uniform(&[n_text, dm], rng);
    let ip = uniform(&[4, dm], rng);
    Instance {
        x: uniform(&[s, d], rng),
        cond: build_conditioning(&text, &ip).unwrap(),
        wq: uniform(&[d, inner], rng),
        wk: uniform(&[dm, inner], rng),
        wv: uniform(&[dm, inner], rng),
        wo: uniform(&[inner, d], rng),
        bo: uniform(&[d], rng),
        heads,
        grid,
    }
}

impl Instance {
    fn weights(&self) -> CrossAttentionWeights<'_> {
        CrossAttentionWeights {
            to_q: &self.wq,
            to_k: &self.wk,
            to_v: &self.wv,
            to_out: &self.wo,
            out_bias: Some(&self.bo),
            heads: self.heads,
        }
    }

    fn run(&self, mask: Option<&Tensor>, ip_scale: f32) -> (Tensor, AttentionRecord) {
        self.run_with(&self.cond, mask, ip_scale)
    }

    fn run_with(&self, cond: &ConditioningSequence, mask: Option<&Tensor>, ip_scale: f32) -> (Tensor, AttentionRecord) {
        let mut sink = CaptureSink::new();
        let out = cross_attention(
            &self.x,
            cond,
            &self.weights(),
            &IpMaskDirective { mask, ip_scale },
            &Site {
                layer_id: "probe",
                spatial_dims: self.grid,
            },
            Some(&mut sink),
        )
        .unwrap();
        (out, sink.into_records().remove(0))
    }

    /// Per-element f64 attention: IP weights scaled by `ip_scale` and zeroed
    /// where `keep` is false. Returns `(probs [h][s][t], out [s][d])`.
    fn oracle(&self, keep: Option<&[bool]>, ip_scale: f64) -> (Vec<f64>, Vec<f64>) {
        let (s, d) = (self.x.dim(0), self.x.dim(1));
        let toks = self.cond.tokens();
        let (t, dm) = (toks.dim(0), toks.dim(1));
        let inner = self.wq.dim(1);
        let dh = inner / self.heads;
        let ip = self.cond.ip_span();
        let proj = |src: &Tensor, w: &Tensor, rows: usize, width: usize| -> Vec<f64> {
            let mut out = vec![0f64; rows * inner];
            for r in 0..rows {
                for c in 0..inner {
                    out[r * inner + c] = (0..width).map(|a| src.at(&[r, a]) as f64 * w.at(&[a, c]) as f64).sum();
                }
            }
            out
        };
        let q = proj(&self.x, &self.wq, s, d);
        let k = proj(toks, &self.wk, t, dm);
        let v = proj(toks, &self.wv, t, dm);
        let mut probs = vec![0f64; self.heads * s * t];
        let mut merged = vec![0f64; s * inner];
        for h in 0..self.heads {
            for i in 0..s {
                let logits: Vec<f64> = (0..t)
                    .map(|j| {
                        (0..dh).map(|e| q[i * inner + h * dh + e] * k[j * inner + h * dh + e]).sum::<f64>()
                            / (dh as f64).sqrt()
                    })
                    .collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let w: Vec<f64> = (0..t)
                    .map(|j| {
                        let e = (logits[j] - m).exp();
                        if !ip.contains(&j) {
                            e
                        } else if keep.is_some_and(|kp| !kp[i]) {
                            0.0
                        } else {
                            e * ip_scale
                        }
                    })
                    .collect();
                let z: f64 = w.iter().sum();
                for j in 0..t {
                    probs[(h * s + i) * t + j] = w[j] / z;
                    for e in 0..dh {
                        merged[i * inner + h * dh + e] += w[j] / z * v[j * inner + h * dh + e];
                    }
                }
            }
        }
        let mut out = vec![0f64; s * d];
        for i in 0..s {
            for b in 0..d {
                out[i * d + b] =
                    self.bo.data()[b] as f64 + (0..inner).map(|c| merged[i * inner + c] * self.wo.at(&[c, b]) as f64).sum::<f64>();
            }
        }
        (probs, out)
    }
}

fn max_diff(a: &[f32], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y).abs()).fold(0.0, f64::max)
}

fn c1_attention_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut worst_out, mut worst_p, mut worst_row) = (0f64, 0f64, 0f64);
    for _ in 0..100 {
        let inst = instance(&mut rng);
        let (out, rec) = inst.run(None, 1.0);
        let (p, o) = inst.oracle(None, 1.0);
        worst_out = worst_out.max(max_diff(out.data(), &o));
        worst_p = worst_p.max(max_diff(rec.probs.data(), &p));
        for row in rec.probs.data().chunks(rec.tokens()) {
            worst_row = worst_row.max((row.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(worst_out < 1e-5 && worst_p < 1e-5, || format!("oracle gap out {worst_out:.2e}, probs {worst_p:.2e}"))?;
    check(worst_row < 1e-5, || format!("row sum off by {worst_row:.2e}"))?;
    check(secs < 5.0, || format!("took {secs:.2}s"))?;
    Ok(format!(
        "100 instances, max |out−oracle| {worst_out:.1e}, max |p−oracle| {worst_p:.1e}, row sums within {worst_row:.1e}, {secs:.3}s"
    ))
}

fn random_mask(rng: &mut ChaCha8Rng, grid: (usize, usize)) -> Tensor {
    let n = grid.0 * grid.1;
    let mut m: Vec<f32> = (0..n).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
    m[rng.gen_range(0..n)] = 0.0;
    Tensor::new(&[grid.0, grid.1], m).unwrap()
}

fn c2_masking_semantics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = 0f64;
    let mut background = 0;
    for _ in 0..100 {
        let inst = instance(&mut rng);
        let mask = random_mask(&mut rng, inst.grid);
        let (_, plain) = inst.run(None, 1.0);
        let (out, masked) = inst.run(Some(&mask), 1.0);
        let keep: Vec<bool> = mask.data().iter().map(|&v| v != 0.0).collect();
        let (_, o) = inst.oracle(Some(&keep), 1.0);
        worst = worst.max(max_diff(out.data(), &o));
        let (s, t) = (masked.positions(), masked.tokens());
        let ip = inst.cond.ip_span();
        for h in 0..masked.heads() {
            for i in 0..s {
                let row = &masked.probs.data()[(h * s + i) * t..(h * s + i + 1) * t];
                let base = &plain.probs.data()[(h * s + i) * t..(h * s + i + 1) * t];
                if keep[i] {
                    check(row == base, || "subject position changed".into())?;
                    continue;
                }
                background += 1;
                check(row[ip.clone()].iter().all(|&p| p == 0.0), || format!("IP mass {:?} at background", &row[ip.clone()]))?;
                let text_mass: f64 = base[..ip.start].iter().map(|&p| p as f64).sum();
                for j in 0..ip.start {
                    worst = worst.max((row[j] as f64 - base[j] as f64 / text_mass).abs());
                }
            }
        }
    }
    check(worst < 1e-5, || format!("renormalization gap {worst:.2e}"))?;
    Ok(format!(
        "100 instances, {background} background rows: IP mass exactly 0, text renormalized within {worst:.1e}"
    ))
}

/// Recompose attention from public tensor ops with no scale handling.
fn unscaled_recomposition(inst: &Instance) -> (Tensor, Tensor) {
    let s = inst.x.dim(0);
    let toks = inst.cond.tokens();
    let t = toks.dim(0);
    let inner = inst.wq.dim(1);
    let dh = inner / inst.heads;
    let q = inst.x.linear(&inst.wq, None).unwrap();
    let k = toks.linear(&inst.wk, None).unwrap();
    let v = toks.linear(&inst.wv, None).unwrap();
    let cols = |m: &Tensor, rows: usize, h: usize| {
        Tensor::from_fn(&[rows, dh], |i| m.data()[(i / dh) * inner + h * dh + i % dh]).unwrap()
    };
    let scale = 1.0 / (dh as f32).sqrt();
    let mut probs = Vec::new();
    let mut merged = vec![0f32; s * inner];
    for h in 0..inst.heads {
        let logits = cols(&q, s, h).matmul(&cols(&k, t, h).transpose().unwrap()).unwrap();
        let p = logits.map("scale", |l| l * scale).unwrap().softmax(1).unwrap();
        let oh = p.matmul(&cols(&v, t, h)).unwrap();
        for i in 0..s {
            merged[i * inner + h * dh..i * inner + (h + 1) * dh].copy_from_slice(&oh.data()[i * dh..(i + 1) * dh]);
        }
        probs.extend_from_slice(p.data());
    }
    let merged = Tensor::new(&[s, inner], merged).unwrap();
    let out = merged.linear(&inst.wo, Some(&inst.bo)).unwrap();
    (out, Tensor::new(&[inst.heads, s, t], probs).unwrap())
}

fn c3_noop_equivalences() -> Outcome {
    let model = Model::random(ModelConfig::default(), 3).map_err(|e| e.to_string())?;
    let mut cases = 0;
    for seed in [0u64, 7, 42] {
        let cfg = GenerationConfig {
            seed: monkey_core::sampler::NoiseSeed::new(seed),
            ..Default::default()
        };
        // (a) all-ones mask
        let base = generate_baseline(&cfg, &model).map_err(|e| e.to_string())?;
        let opts = GenerationOptions {
            mask_override: Some(Tensor::ones(&[8, 8]).unwrap()),
            ..Default::default()
        };
        let ones = generate_monkey_with(&cfg, &model, &opts).map_err(|e| e.to_string())?;
        check(ones.latent.bit_eq(&base.latent) && ones.image.bit_eq(&base.image), || {
            format!("seed {seed}: all-ones mask differs from baseline")
        })?;
        // (c) zero scale
        let zero = GenerationConfig { ip_scale: 0.0, ..cfg.clone() };
        let a = generate_baseline(&zero, &model).map_err(|e| e.to_string())?;
        let b = generate_text_only(&zero, &model).map_err(|e| e.to_string())?;
        let gap = a.latent.max_abs_diff(&b.latent).unwrap().max(a.image.max_abs_diff(&b.image).unwrap());
        check(gap < 1e-6, || format!("seed {seed}: ip_scale 0 vs text-only gap {gap:.2e}"))?;
        cases += 1;
    }
    // (b) unit scale, and (c) at the attention call
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut zero_gap = 0f32;
    for _ in 0..100 {
        let inst = instance(&mut rng);
        let (out, rec) = inst.run(None, 1.0);
        let (ref_out, ref_probs) = unscaled_recomposition(&inst);
        check(out.bit_eq(&ref_out) && rec.probs.bit_eq(&ref_probs), || "ip_scale 1 is not bitwise unscaled".into())?;
        let (z, _) = inst.run(None, 0.0);
        let text_only = ConditioningSequence::text_only(&inst.cond.text_rows().unwrap()).unwrap();
        let (tz, _) = inst.run_with(&text_only, None, 1.0);
        zero_gap = zero_gap.max(z.max_abs_diff(&tz).unwrap());
    }
    check(zero_gap < 1e-6, || format!("attention-level ip_scale 0 gap {zero_gap:.2e}"))?;
    Ok(format!(
        "(a) all-ones mask bitwise = baseline on {cases} seeds; (b) ip_scale 1 bitwise = unscaled attention on 100 instances; (c) ip_scale 0 vs text-only within 1e-6 (attention max {zero_gap:.1e})"
    ))
}

// ---------------------------------------------------------------- CLI

fn monkey(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_monkey"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    check(out.status.success(), || {
        format!("monkey {args:?} failed: {}", String::from_utf8_lossy(&out.stderr))
    })
}

fn same_files(a: &Path, b: &Path) -> Result<usize, String> {
    let mut names: Vec<_> = std::fs::read_dir(a)
        .map_err(|e| e.to_string())?
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    for n in &names {
        let (x, y) = (std::fs::read(a.join(n)).map_err(|e| e.to_string())?, std::fs::read(b.join(n)).map_err(|e| e.to_string())?);
        check(x == y, || format!("{n:?} differs"))?;
    }
    Ok(names.len())
}

fn c4_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut files = 0;
    for method in ["baseline", "monkey"] {
        let runs: Vec<_> = (0..2).map(|k| dir.path().join(format!("{method}{k}"))).collect();
        for r in &runs {
            monkey(&["generate", "--seed", "7", "--prompt", "in the snow", "--method", method, "--out", r.to_str().unwrap()])?;
        }
        files += same_files(&runs[0], &runs[1])?;
    }
    let model = Model::random(ModelConfig::default(), 0).map_err(|e| e.to_string())?;
    let cfg = GenerationConfig {
        seed: monkey_core::sampler::NoiseSeed::new(7),
        prompt: "in the snow".into(),
        ..Default::default()
    };
    let res = generate_monkey(&cfg, &model).map_err(|e| e.to_string())?;
    let noise = initial_noise(cfg.seed, &[4, 16, 16]).unwrap();
    let crc = crc32fast::hash(&noise.to_le_bytes());
    check(res.noise_checksums == [crc, crc], || format!("noise checksums {:?} vs {crc:#x}", res.noise_checksums))?;
    check(res.noise.bit_eq(&noise) && res.trajectory[0].bit_eq(&noise), || "pass 2 did not start from the seed noise".into())?;
    Ok(format!(
        "two CLI runs per method byte-identical ({files} files); pass-1 and pass-2 noise CRC {crc:#010x} match"
    ))
}

fn c5_recipe() -> Outcome {
    let cfg = GenerationConfig::default();
    check(
        cfg.pass1_steps == 4
            && cfg.pass1_window == StepWindow::new(2, 3).unwrap()
            && cfg.pass2_steps == 8
            && cfg.pass2_mask_window == StepWindow::new(3, 6).unwrap(),
        || format!("defaults differ: {}", cfg.echo()),
    )?;
    let model = Model::random(ModelConfig::default(), 0).map_err(|e| e.to_string())?;
    let start = Instant::now();
    let res = generate_monkey(&cfg, &model).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let mask = res.mask.ok_or("no mask")?;
    let want = model.config.unet.layer_resolution("up1.attn2").unwrap();
    check(mask.grid.shape() == [want.0, want.1], || format!("mask shape {:?}", mask.grid.shape()))?;
    check(mask.grid.data().iter().all(|&v| v == 0.0 || v == 1.0), || "mask not binary".into())?;
    check(secs < 10.0, || format!("took {secs:.2}s"))?;
    Ok(format!(
        "4 steps (window 2-3) + 8 steps (window 3-6) in {secs:.2}s, binary {}x{} mask, coverage {:.3}",
        want.0,
        want.1,
        mask.coverage()
    ))
}

fn c6_gradcheck() -> Outcome {
    let linear = LinearProblem::random(3, 4, 16, 4).unwrap().check().map_err(|e| e.to_string())?;
    let model = Model::random(ModelConfig::default(), 3).map_err(|e| e.to_string())?;
    let sample = &data::make_dataset(1, 1).unwrap()[0];
    let oracle = check_gradients_with(&model, sample, 60, 1, Stencil::FivePoint { step: 0.1 }).map_err(|e| e.to_string())?;
    let plain = check_gradients(&model, sample, 60, 1).map_err(|e| e.to_string())?;
    check(linear.max_rel_error() < 1e-4, || format!("linear {:?}", linear.worst()))?;
    check(oracle.max_rel_error() < 1e-2, || format!("full UNet {:?}", oracle.worst()))?;
    Ok(format!(
        "linear {} params max rel {:.1e} (central h=1e-3); full toy UNet 60 params max rel {:.1e} (five-point h=0.1; central h=1e-3 gives {:.1e}, limited by f32 forward noise)",
        linear.checks.len(),
        linear.max_rel_error(),
        oracle.max_rel_error(),
        plain.max_rel_error()
    ))
}

/// Seed of the held-out set; training sets are drawn from `TrainConfig::seed`.
const HELD_OUT_SEED: u64 = 0x4e1d_0u64;

fn c7_token_roles() -> Outcome {
    let cfg = TrainConfig::default();
    let train_set = data::make_dataset(cfg.seed, cfg.dataset_size).map_err(|e| e.to_string())?;
    let held_out = data::make_dataset(HELD_OUT_SEED, 20).map_err(|e| e.to_string())?;
    let mut model = Model::init(ModelConfig::default(), cfg.seed).map_err(|e| e.to_string())?;
    let start = Instant::now();
    let report = train(&mut model, &train_set, &cfg, |_, _| {}).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let window = StepWindow::new(2, 3).unwrap();
    let contrasts = subject_contrast(&model, &held_out, "up1.attn2", 4, window, 11).map_err(|e| e.to_string())?;
    let passed = contrasts.iter().filter(|c| c.passes()).count();
    let (first, last) = (report.losses[0].1, report.losses.last().unwrap().1);
    check(secs <= 20.0 * 60.0, || format!("training took {secs:.0}s"))?;
    check(passed * 10 >= 7 * contrasts.len(), || format!("only {passed}/{} held-out images", contrasts.len()))?;
    Ok(format!(
        "{} iterations on {} samples in {secs:.0}s (loss {first:.3} -> {last:.3}); ip1 inside > outside on {passed}/20 held-out images",
        cfg.iterations, cfg.dataset_size
    ))
}

fn c8_mask_oracle() -> Outcome {
    // 4x4 ip1 maps, identical at steps 2 and 3, already spanning [0, 1]:
    //   background 0.00/0.05 (10 cells), middle 0.40/0.45 (4), top 0.95/1.00 (2).
    // fixed(0.5) keeps the top cells. Otsu: splitting below the middle cluster
    // gives between-class variance 0.0798, splitting above it 0.0764, so the
    // threshold falls between 0.05 and 0.40 and keeps middle + top.
    #[rustfmt::skip]
    let map = [
        0.00, 0.05, 0.00, 0.05,
        0.05, 0.40, 0.45, 0.00,
        0.00, 0.95, 1.00, 0.05,
        0.05, 0.40, 0.45, 0.00f32,
    ];
    #[rustfmt::skip]
    let fixed_want = [
        0., 0., 0., 0.,
        0., 0., 0., 0.,
        0., 1., 1., 0.,
        0., 0., 0., 0.0f32,
    ];
    #[rustfmt::skip]
    let otsu_want = [
        0., 0., 0., 0.,
        0., 1., 1., 0.,
        0., 1., 1., 0.,
        0., 1., 1., 0.0f32,
    ];
    let record = |step| {
        let mut p = Vec::new();
        for &v in &map {
            p.extend([(1.0 - v) / 2.0, (1.0 - v) / 2.0, v, 0.0, 0.0, 0.0]);
        }
        AttentionRecord {
            layer_id: "up1.attn2".into(),
            step_index: step,
            probs: Tensor::new(&[1, 16, 6], p).unwrap(),
            spatial_dims: (4, 4),
        }
    };
    // a pass-1 step outside the window that would change the result
    let mut outside = record(0);
    outside.probs = Tensor::new(&[1, 16, 6], [0.0, 0.0, 1.0, 0.0, 0.0, 0.0].repeat(16)).unwrap();
    let records = [outside, record(1), record(2)];
    let w = StepWindow::new(2, 3).unwrap();
    for (policy, want) in [(ThresholdPolicy::Fixed(0.5), fixed_want), (ThresholdPolicy::Otsu, otsu_want)] {
        let m = derive_mask(&records, "up1.attn2", w, MaskToken::Ip(0), policy).map_err(|e| e.to_string())?;
        check(m.grid.data() == want, || format!("{policy}: got {:?}", m.grid.data()))?;
    }
    Ok("bimodal 4x4 maps: fixed(0.5) -> 2 cells, otsu -> 6 cells, both exact".into())
}

fn c9_round_trips() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let model = Model::random(ModelConfig::default(), 9).map_err(|e| e.to_string())?;
    let ckpt = dir.path().join("m.mnky");
    checkpoint::save(&ckpt, &model).map_err(|e| e.to_string())?;
    let back = checkpoint::load(&ckpt).map_err(|e| e.to_string())?;
    check(back == model, || "checkpoint round trip changed the model".into())?;
    let bytes = std::fs::read(&ckpt).unwrap();
    check(checkpoint::to_bytes(&back) == bytes, || "re-serialized bytes differ".into())?;
    let all_bitwise = model.weights.iter().all(|(n, t)| back.weights.get(n).unwrap().bit_eq(t));
    check(all_bitwise, || "tensor bits differ".into())?;

    let mut flipped = bytes.clone();
    let i = bytes.len() - 64;
    flipped[i] ^= 0x10;
    let mut v99 = bytes.clone();
    v99[4..6].copy_from_slice(&99u16.to_le_bytes());
    let errors = [
        checkpoint::from_bytes(&flipped).err(),
        checkpoint::from_bytes(&v99).err(),
        checkpoint::from_bytes(&bytes[..bytes.len() / 2]).err(),
    ];
    let kinds: Vec<&str> = errors
        .iter()
        .map(|e| match e {
            Some(Error::Crc { .. }) => "crc",
            Some(Error::Version { found: 99, expected: 1 }) => "version",
            Some(Error::Truncated { .. }) => "truncated",
            _ => "other",
        })
        .collect();
    check(kinds == ["crc", "version", "truncated"], || format!("error kinds {kinds:?}"))?;
    let version_msg = errors[1].as_ref().unwrap().to_string();
    check(version_msg.contains("99") && version_msg.contains('1'), || version_msg.clone())?;

    let first = dir.path().join("first");
    let second = dir.path().join("second");
    monkey(&[
        "generate", "--checkpoint", ckpt.to_str().unwrap(), "--seed", "5", "--prompt", "on the beach",
        "--out", first.to_str().unwrap(),
    ])?;
    let record = first.join("record.txt");
    monkey(&["generate", "--config", record.to_str().unwrap(), "--out", second.to_str().unwrap()])?;
    let n = same_files(&first, &second)?;
    Ok(format!(
        "checkpoint bitwise; CRC / version / truncation rejected distinctly; re-run from record.txt reproduced {n} files byte-identically"
    ))
}

fn c10_eval() -> Outcome {
    let model = Model::random(ModelConfig::default(), 4).map_err(|e| e.to_string())?;
    let (img, id, txt) = (EncoderEmbedder::image(&model), EncoderEmbedder::identity(&model), MeanTextEmbedder { model: &model });
    let e = Embedders {
        image: &img,
        identity: &id,
        text: &txt,
    };
    let prompts = eval::bundled_prompts();
    check(prompts.len() == 20, || format!("{} bundled prompts", prompts.len()))?;
    let subjects = vec!["synthetic:blue:triangle".to_string()];
    let base = GenerationConfig::default();
    let a = eval::run_grid(&subjects, &prompts, Method::Monkey, &model, &e, &base).map_err(|e| e.to_string())?;
    let b = eval::run_grid(&subjects, &prompts, Method::Monkey, &model, &e, &base).map_err(|e| e.to_string())?;
    check(a == b, || "grid runs differ".into())?;
    check(a.cells.len() + a.failures.len() == 20, || "not 20 cells".into())?;
    let r2 = 0.5f64.sqrt();
    let cases = [
        (cosine_sim(&[0.3, -1.7, 2.2], &[0.3, -1.7, 2.2]), 1.0),
        (cosine_sim(&[1.0, 0.0], &[0.0, 1.0]), 0.0),
        (cosine_sim(&[1.0, 0.0], &[1.0, 1.0]), r2),
    ];
    for (got, want) in cases {
        let got = got.map_err(|e| e.to_string())?;
        check((got - want).abs() < 1e-9, || format!("cosine {got} vs {want}"))?;
    }
    Ok(format!(
        "1 subject x 20 prompts reproducible ({} scored, {} failed); cosine 1 / 0 / sqrt(2)/2 within 1e-9",
        a.cells.len(),
        a.failures.len()
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("attention oracle", c1_attention_oracle),
        ("masking semantics", c2_masking_semantics),
        ("no-op equivalences", c3_noop_equivalences),
        ("determinism", c4_determinism),
        ("default recipe", c5_recipe),
        ("gradient check", c6_gradcheck),
        ("ip1 attends to the subject", c7_token_roles),
        ("mask oracle", c8_mask_oracle),
        ("checkpoint and record round trips", c9_round_trips),
        ("eval harness", c10_eval),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let id = (i + 1).to_string();
        let selected = |x: &String| if x.parse::<usize>().is_ok() { *x == id } else { name.contains(x.as_str()) };
        if !filter.is_empty() && !filter.iter().any(selected) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {id:>2} {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {id:>2} {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
