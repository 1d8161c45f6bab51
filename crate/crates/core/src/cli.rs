//! Command-line front end. Settings layer as defaults, then `--config` file,
//! then flags.

use std::ffi::OsString;
use std::fmt::Display;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::eval::{self, EncoderEmbedder, Embedders, MeanTextEmbedder};
use crate::io::{atomic_write, checkpoint, grid, kv::KvMap, png};
use crate::mask::{MaskAveraging, MaskToken, ThresholdPolicy};
use crate::model::{Model, ModelConfig};
use crate::pipeline::{self, GenerationConfig, Method};
use crate::sampler::StepWindow;
use crate::selftest;
use crate::trainer::{self, data, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "monkey", version, about = "Two-pass IP-token masking on a toy latent diffusion model")]
struct Cli {
    /// `key = value` file applied before flags.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train on the synthetic corpus and write a checkpoint.
    Train(TrainArgs),
    /// Generate one image.
    Generate(GenerateArgs),
    /// Dump pass-1 attention grids for one or more layers.
    Inspect(InspectArgs),
    /// Run a subject × prompt grid and write score CSVs.
    Eval(EvalArgs),
    /// Run the built-in invariant checks.
    Selftest,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    learning_rate: Option<f32>,
    #[arg(long)]
    momentum: Option<f32>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    report_every: Option<usize>,
    #[arg(long)]
    dataset_size: Option<usize>,
    #[arg(long)]
    grad_clip: Option<f32>,
    /// Checkpoint to write.
    #[arg(long, default_value = "model.mnky")]
    out: PathBuf,
    /// Loss curve CSV; defaults to the checkpoint path with `.loss.csv`.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
}

#[derive(Debug, Args, Clone)]
struct GenArgs {
    /// Checkpoint path, or `random:<seed>` for untrained weights.
    #[arg(long)]
    checkpoint: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    prompt: Option<String>,
    /// `synthetic:<color>:<shape>` or a PNG path.
    #[arg(long)]
    reference: Option<String>,
    #[arg(long)]
    pass1_steps: Option<usize>,
    /// 1-based inclusive, e.g. `2-3`.
    #[arg(long)]
    pass1_window: Option<StepWindow>,
    #[arg(long)]
    pass2_steps: Option<usize>,
    /// 1-based inclusive, e.g. `3-6`, or `none`.
    #[arg(long)]
    pass2_mask_window: Option<StepWindow>,
    #[arg(long)]
    ip_scale: Option<f32>,
    #[arg(long)]
    capture_layer: Option<String>,
    /// `otsu` or `fixed:<theta>`.
    #[arg(long)]
    mask_policy: Option<ThresholdPolicy>,
    /// `ip1`..`ip4` or `not-ip2-ip3`.
    #[arg(long)]
    mask_token: Option<MaskToken>,
    #[arg(long)]
    mask_averaging: Option<MaskAveraging>,
    /// `all` or a comma-separated list of attention sites.
    #[arg(long)]
    mask_sites: Option<String>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[arg(long)]
    method: Option<Method>,
    #[command(flatten)]
    gen: GenArgs,
}

#[derive(Debug, Args)]
struct InspectArgs {
    /// Attention site to dump; repeat for several.
    #[arg(long = "layer", required = true)]
    layers: Vec<String>,
    #[command(flatten)]
    gen: GenArgs,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Subject reference; repeat for several.
    #[arg(long = "subject")]
    subjects: Vec<String>,
    /// Methods to run; defaults to both.
    #[arg(long = "method")]
    methods: Vec<Method>,
    /// Number of bundled prompts to use, in file order.
    #[arg(long)]
    prompts: Option<usize>,
    #[command(flatten)]
    gen: GenArgs,
}

/// Run the CLI and return the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error [{}]: {e}", e.module());
            1
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let file = match &cli.config {
        Some(p) => KvMap::parse_text(&std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
        None => KvMap::new(),
    };
    match cli.command {
        Command::Train(a) => train(&file, &a),
        Command::Generate(a) => generate(&file, &a),
        Command::Inspect(a) => inspect(&file, &a),
        Command::Eval(a) => run_eval(&file, &a),
        Command::Selftest => run_selftest(),
    }
}

fn set<T: Display>(kv: &mut KvMap, key: &str, v: &Option<T>) {
    if let Some(v) = v {
        kv.set(key, v);
    }
}

fn reject_unknown(keys: impl IntoIterator<Item = String>, allowed: &[&str]) -> Result<()> {
    match keys.into_iter().find(|k| !allowed.contains(&k.as_str())) {
        Some(k) => Err(Error::Config(format!("unknown config key `{k}`"))),
        None => Ok(()),
    }
}

const TRAIN_KEYS: [&str; 8] = [
    "learning_rate",
    "momentum",
    "batch_size",
    "iterations",
    "train_seed",
    "report_every",
    "dataset_size",
    "grad_clip",
];

fn train(file: &KvMap, a: &TrainArgs) -> Result<()> {
    reject_unknown(file.keys().map(str::to_string), &TRAIN_KEYS)?;
    let mut flags = KvMap::new();
    set(&mut flags, "learning_rate", &a.learning_rate);
    set(&mut flags, "momentum", &a.momentum);
    set(&mut flags, "batch_size", &a.batch_size);
    set(&mut flags, "iterations", &a.iterations);
    set(&mut flags, "train_seed", &a.seed);
    set(&mut flags, "report_every", &a.report_every);
    set(&mut flags, "dataset_size", &a.dataset_size);
    set(&mut flags, "grad_clip", &a.grad_clip);
    let mut cfg = TrainConfig::default();
    cfg.apply_kv(file)?;
    cfg.apply_kv(&flags)?;
    cfg.validate()?;

    let dataset = data::make_dataset(cfg.seed, cfg.dataset_size)?;
    let mut model = Model::init(ModelConfig::default(), cfg.seed)?;
    let report = trainer::train(&mut model, &dataset, &cfg, |it, loss| println!("iteration {it}: loss {loss:.5}"))?;
    checkpoint::save(&a.out, &model)?;
    let csv_path = a.loss_csv.clone().unwrap_or_else(|| a.out.with_extension("loss.csv"));
    atomic_write(&csv_path, report.to_csv().as_bytes())?;
    println!("wrote {}", a.out.display());
    println!("wrote {}", csv_path.display());
    Ok(())
}

/// Generation settings plus the checkpoint they run against.
struct Resolved {
    config: GenerationConfig,
    checkpoint: String,
    method: Method,
}

fn resolve(file: &KvMap, a: &GenArgs, method: Option<Method>, extra_keys: &[&str]) -> Result<Resolved> {
    let mut flags = KvMap::new();
    set(&mut flags, "seed", &a.seed);
    set(&mut flags, "prompt", &a.prompt);
    set(&mut flags, "reference", &a.reference);
    set(&mut flags, "pass1_steps", &a.pass1_steps);
    set(&mut flags, "pass1_window", &a.pass1_window);
    set(&mut flags, "pass2_steps", &a.pass2_steps);
    set(&mut flags, "pass2_mask_window", &a.pass2_mask_window);
    set(&mut flags, "ip_scale", &a.ip_scale);
    set(&mut flags, "capture_layer", &a.capture_layer);
    set(&mut flags, "mask_policy", &a.mask_policy);
    set(&mut flags, "mask_token", &a.mask_token);
    set(&mut flags, "mask_averaging", &a.mask_averaging);
    set(&mut flags, "mask_sites", &a.mask_sites);
    let mut config = GenerationConfig::default();
    let unknown = config.apply_kv(file)?;
    let mut allowed = vec!["checkpoint", "method"];
    allowed.extend_from_slice(extra_keys);
    reject_unknown(unknown, &allowed)?;
    config.apply_kv(&flags)?;
    config.validate()?;
    let checkpoint = a
        .checkpoint
        .clone()
        .or_else(|| file.get("checkpoint").map(str::to_string))
        .unwrap_or_else(|| "random:0".to_string());
    let method = match (method, file.get("method")) {
        (Some(m), _) => m,
        (None, Some(v)) => v.parse()?,
        (None, None) => Method::default(),
    };
    Ok(Resolved {
        config,
        checkpoint,
        method,
    })
}

fn load_model(spec: &str) -> Result<Model> {
    match spec.strip_prefix("random:") {
        Some(seed) => {
            let seed = seed
                .parse()
                .map_err(|_| Error::Config(format!("bad random checkpoint seed in `{spec}`")))?;
            Model::random(ModelConfig::default(), seed)
        }
        None => checkpoint::load(Path::new(spec)),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: PathBuf, bytes: &[u8]) -> Result<()> {
    atomic_write(&path, bytes)?;
    println!("wrote {}", path.display());
    Ok(())
}

/// Reproducibility record: a config file that `generate --config` accepts.
pub fn record_text(config: &GenerationConfig, method: Method, checkpoint: &str) -> String {
    let mut kv = config.to_kv();
    kv.set("method", method);
    kv.set("checkpoint", checkpoint);
    kv.render()
}

fn generate(file: &KvMap, a: &GenerateArgs) -> Result<()> {
    let r = resolve(file, &a.gen, a.method, &[])?;
    let model = load_model(&r.checkpoint)?;
    let out = &a.gen.out;
    create_dir(out)?;
    let result = match pipeline::generate(&r.config, &model, r.method) {
        Ok(res) => res,
        Err(Error::MaskDerivation { source, pass1_image }) => {
            write(out.join("pass1.png"), &png::encode_rgb(&pass1_image)?)?;
            return Err(Error::MaskDerivation { source, pass1_image });
        }
        Err(e) => return Err(e),
    };
    write(out.join("image.png"), &png::encode_rgb(&result.image)?)?;
    if let Some(p1) = &result.pass1_image {
        write(out.join("pass1.png"), &png::encode_rgb(p1)?)?;
    }
    if let Some(mask) = &result.mask {
        let (h, w) = (mask.grid.dim(0), mask.grid.dim(1));
        let px: Vec<u8> = mask.grid.data().iter().map(|&v| if v >= 0.5 { 255 } else { 0 }).collect();
        write(out.join("mask.png"), &png::encode_gray(&px, w, h)?)?;
        write(out.join("mask.txt"), mask.sidecar().as_bytes())?;
    }
    write(out.join("record.txt"), record_text(&r.config, r.method, &r.checkpoint).as_bytes())
}

fn inspect(file: &KvMap, a: &InspectArgs) -> Result<()> {
    let r = resolve(file, &a.gen, None, &[])?;
    let model = load_model(&r.checkpoint)?;
    let records = pipeline::capture_pass1(&r.config, &model, &a.layers)?;
    create_dir(&a.gen.out)?;
    for layer in &a.layers {
        let path = a.gen.out.join(format!("grid_{layer}.png"));
        grid::dump_attention_grid(&records, layer, &path)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn run_eval(file: &KvMap, a: &EvalArgs) -> Result<()> {
    let r = resolve(file, &a.gen, None, &[])?;
    let model = load_model(&r.checkpoint)?;
    let subjects = if a.subjects.is_empty() {
        vec![r.config.reference.clone()]
    } else {
        a.subjects.clone()
    };
    let all = eval::bundled_prompts();
    let prompts = &all[..a.prompts.unwrap_or(all.len()).min(all.len())];
    let methods = if a.methods.is_empty() {
        vec![Method::Baseline, Method::Monkey]
    } else {
        a.methods.clone()
    };
    let (img, id, txt) = (
        EncoderEmbedder::image(&model),
        EncoderEmbedder::identity(&model),
        MeanTextEmbedder { model: &model },
    );
    let embedders = Embedders {
        image: &img,
        identity: &id,
        text: &txt,
    };
    create_dir(&a.gen.out)?;
    let mut runs = Vec::new();
    for method in methods {
        let run = eval::run_grid(&subjects, prompts, method, &model, &embedders, &r.config)?;
        match run.means {
            Some(m) => println!(
                "{method}: {} cells, {} failed; text {:.4} image {:.4} identity {:.4}",
                run.cells.len(),
                run.failures.len(),
                m.text_sim,
                m.image_sim,
                m.identity_sim
            ),
            None => println!("{method}: all {} cells failed", run.failures.len()),
        }
        for f in &run.failures {
            println!("  failed cell ({}, {}) [{}]: {}", f.subject, f.prompt, f.module, f.message);
        }
        write(a.gen.out.join(format!("cells_{method}.csv")), run.to_csv()?.as_bytes())?;
        runs.push(run);
    }
    write(a.gen.out.join("scatter.csv"), eval::export_scatter(&runs)?.as_bytes())
}

fn run_selftest() -> Result<()> {
    let results = selftest::run_all();
    let total = results.len();
    let mut first = None;
    for (name, outcome) in results {
        match outcome {
            Ok(()) => println!("PASS {name}"),
            Err(e) => {
                println!("FAIL {name}: {e}");
                first.get_or_insert(e);
            }
        }
    }
    match first {
        Some(e) => {
            eprintln!("self-checks failed out of {total}");
            Err(e)
        }
        None => Ok(()),
    }
}
