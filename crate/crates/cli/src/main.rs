use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ffw::baselines::{evaluate, magnitude_prune, train_vanilla_marks, EvalOptions, VanillaConfig};
use ffw::data::{self, Dataset, DatasetSpec, Role};
use ffw::ffw::{ffw_run, FfwConfig};
use ffw::gating::GateMode;
use ffw::nn::{Architecture, Checkpoint};
use ffw::report::write_metrics_csv;
use ffw::theory;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const SEED_VAR: &str = "FFW_SEED";

#[derive(Parser)]
#[command(name = "ffw", version, about = "Bias extraction by learned pruning masks on frozen networks")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset (or colorize MNIST IDX files).
    GenData(GenData),
    /// Train encoder and classifier on a (biased) dataset.
    TrainVanilla(TrainVanilla),
    /// Learn gates on a frozen checkpoint.
    Ffw(FfwArgs),
    /// Global magnitude pruning baseline.
    PruneMagnitude(Prune),
    /// Task accuracy, bias accuracy and sparsity of a checkpoint.
    Eval(EvalArgs),
    /// Closed-form information quantities.
    #[command(subcommand)]
    Theory(TheoryCmd),
}

#[derive(Clone, Copy, ValueEnum)]
enum RoleArg {
    Biased,
    Unbiased,
}

#[derive(Clone, Copy, ValueEnum)]
enum ArchArg {
    Mlp,
    Conv,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Unstructured,
    Structured,
}

#[derive(Args)]
struct GenData {
    #[arg(long, value_enum, default_value = "biased")]
    role: RoleArg,
    /// Fraction of bias-aligned samples (forced to 1/N for the unbiased role).
    #[arg(long, default_value_t = 0.95)]
    rho: f64,
    /// Correlation of the right background half; produces two bias sources.
    #[arg(long)]
    rho_right: Option<f64>,
    #[arg(long, default_value_t = 8000)]
    n: usize,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 9)]
    height: usize,
    #[arg(long, default_value_t = 9)]
    width: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated split fractions, e.g. 0.6,0.2,0.2.
    #[arg(long)]
    split: Option<String>,
    /// MNIST IDX image file; with --mnist-labels, colorizes instead of generating.
    #[arg(long, requires = "mnist_labels")]
    mnist_images: Option<PathBuf>,
    #[arg(long, requires = "mnist_images")]
    mnist_labels: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainVanilla {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value = "mlp")]
    arch: ArchArg,
    /// Hidden width of the MLP encoder.
    #[arg(long, default_value_t = 64)]
    hidden: usize,
    /// Extra checkpoints at these (fractional) epochs, comma-separated.
    #[arg(long)]
    marks: Option<String>,
}

#[derive(Args)]
struct FfwArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    val: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Metrics CSV path (default: next to --out).
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    gate_lr: Option<f64>,
    #[arg(long)]
    probe_lr: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct Prune {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    sparsity: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Fit the fresh probe here; otherwise --data is split in half.
    #[arg(long)]
    probe_data: Option<PathBuf>,
    #[arg(long)]
    fresh_probe: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// Also write the JSON result here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum TheoryCmd {
    /// Task-prediction information over a (phi, K) grid as CSV.
    Surface {
        #[arg(long, default_value_t = 10)]
        n: usize,
        #[arg(long, default_value_t = 0.9)]
        rho: f64,
        #[arg(long, default_value_t = 51)]
        grid: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// All closed forms at one point, as JSON.
    Point {
        #[arg(long, default_value_t = 10)]
        n: usize,
        #[arg(long, default_value_t = 0.9)]
        rho: f64,
        #[arg(long, default_value_t = 0.0)]
        phi: f64,
        #[arg(long, default_value_t = 0.0)]
        k: f64,
    },
}

/// Reads a JSON config; an empty file yields the defaults.
fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else { return Ok(T::default()) };
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    if text.trim().is_empty() {
        return Ok(T::default());
    }
    serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}

/// Flag, then `FFW_SEED`, then the config value.
fn resolve_seed(flag: Option<u64>, fallback: u64) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_VAR) {
        Ok(v) => v.trim().parse().with_context(|| format!("{SEED_VAR}={v} is not an unsigned integer")),
        Err(_) => Ok(fallback),
    }
}

fn digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_manifest(primary: &Path, command: &str, config: impl Serialize, seed: Option<u64>, inputs: &[&Path], outputs: &[PathBuf]) -> Result<()> {
    let inputs: serde_json::Map<String, Value> =
        inputs.iter().map(|p| Ok((p.display().to_string(), Value::String(digest(p)?)))).collect::<Result<_>>()?;
    let outputs: serde_json::Map<String, Value> =
        outputs.iter().map(|p| Ok((p.display().to_string(), Value::String(digest(p)?)))).collect::<Result<_>>()?;
    let m = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "config": config,
        "seed": seed,
        "inputs": inputs,
        "outputs": outputs,
    });
    let path = sibling(primary, ".manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&m)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn load_data(path: &Path) -> Result<Dataset> {
    Dataset::load(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn load_ck(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn parse_list(s: &str) -> Result<Vec<f64>> {
    s.split(',').map(|v| v.trim().parse::<f64>().with_context(|| format!("bad number {v:?}"))).collect()
}

fn part_names(k: usize) -> Vec<String> {
    match k {
        2 => vec!["train".into(), "test".into()],
        3 => vec!["train".into(), "val".into(), "test".into()],
        _ => (0..k).map(|i| format!("part{i}")).collect(),
    }
}

fn gen_data(a: GenData) -> Result<()> {
    let seed = resolve_seed(a.seed, 0)?;
    let role = match a.role {
        RoleArg::Biased => Role::Biased,
        RoleArg::Unbiased => Role::Unbiased,
    };
    let mut inputs: Vec<&Path> = Vec::new();
    let (data, config) = match (&a.mnist_images, &a.mnist_labels) {
        (Some(img), Some(lab)) => {
            inputs.extend([img.as_path(), lab.as_path()]);
            let rho = if role == Role::Unbiased { 1.0 / a.classes as f64 } else { a.rho };
            let d = data::colorize_mnist(&data::read_idx(img)?, &data::read_idx(lab)?, rho, a.classes, seed)?;
            (d, json!({"source": "mnist", "rho": rho, "n_biases": a.classes}))
        }
        _ => {
            let mut spec = DatasetSpec::desk(role, a.rho, a.n, seed);
            spec.n_classes = a.classes;
            spec.n_biases = a.classes;
            spec.palette_size = a.classes;
            spec.height = a.height;
            spec.width = a.width;
            if role == Role::Unbiased {
                spec.rho = 1.0 / a.classes as f64;
            }
            let d = match a.rho_right {
                Some(r) => {
                    let r = if role == Role::Unbiased { spec.rho } else { r };
                    data::gen_two_sided(&spec.two_sided(r))?
                }
                None => data::gen_color_shapes(&spec)?,
            };
            let cfg = serde_json::to_value(&d.spec)?;
            (d, cfg)
        }
    };
    let outputs = match &a.split {
        None => {
            data.save(&a.out)?;
            vec![a.out.clone()]
        }
        Some(s) => {
            let fr = parse_list(s)?;
            let parts = data::split(&data, &fr, seed)?;
            let stem = a.out.with_extension("");
            let ext = a.out.extension().map_or("ffwd".to_string(), |e| e.to_string_lossy().into_owned());
            let mut outs = Vec::new();
            for (part, name) in parts.iter().zip(part_names(fr.len())) {
                let p = sibling(&stem, &format!("-{name}.{ext}"));
                part.save(&p)?;
                outs.push(p);
            }
            outs
        }
    };
    for p in &outputs {
        println!("{}", p.display());
    }
    write_manifest(&a.out, "gen-data", json!({"dataset": config, "split": a.split}), Some(seed), &inputs, &outputs)
}

fn train(a: TrainVanilla) -> Result<()> {
    let mut cfg: VanillaConfig = load_config(a.config.as_deref())?;
    cfg.epochs = a.epochs.unwrap_or(cfg.epochs);
    cfg.lr = a.lr.unwrap_or(cfg.lr);
    cfg.batch_size = a.batch_size.unwrap_or(cfg.batch_size);
    cfg.seed = resolve_seed(a.seed, cfg.seed)?;
    let data = load_data(&a.data)?;
    let [c, h, w] = [3, data.spec.height, data.spec.width];
    let n = data.spec.n_classes;
    let arch = match a.arch {
        ArchArg::Mlp => Architecture::mlp_default(c, h, w, a.hidden, n),
        ArchArg::Conv => Architecture::conv_default(c, h, w, n),
    };
    let extra = a.marks.as_deref().map(parse_list).transpose()?.unwrap_or_default();
    let mut marks = vec![cfg.epochs];
    marks.extend(&extra);
    let cks = train_vanilla_marks(&data, &arch, &cfg, &marks)?;
    cks[0].save(&a.out)?;
    let mut outputs = vec![a.out.clone()];
    for (m, ck) in extra.iter().zip(&cks[1..]) {
        let p = sibling(&a.out.with_extension(""), &format!("-e{m}.ffw"));
        ck.save(&p)?;
        outputs.push(p);
    }
    write_manifest(&a.out, "train-vanilla", json!({"vanilla": cfg, "architecture": arch, "marks": extra}), Some(cfg.seed), &[&a.data], &outputs)
}

fn run_ffw(a: FfwArgs) -> Result<()> {
    let mut cfg: FfwConfig = load_config(a.config.as_deref())?;
    if let Some(m) = a.mode {
        cfg.mode = match m {
            ModeArg::Unstructured => GateMode::Unstructured,
            ModeArg::Structured => GateMode::Structured,
        };
    }
    cfg.gamma = a.gamma.unwrap_or(cfg.gamma);
    cfg.gate_lr = a.gate_lr.or(cfg.gate_lr);
    cfg.probe_lr = a.probe_lr.unwrap_or(cfg.probe_lr);
    cfg.patience = a.patience.unwrap_or(cfg.patience);
    cfg.max_epochs = a.max_epochs.unwrap_or(cfg.max_epochs);
    cfg.seed = resolve_seed(a.seed, cfg.seed)?;
    let ck = load_ck(&a.checkpoint)?;
    let (train, val) = (load_data(&a.train)?, load_data(&a.val)?);
    let (masked, report) = ffw_run(&ck, &train, &val, &cfg)?;
    masked.save(&a.out)?;
    let metrics = a.metrics.clone().unwrap_or_else(|| sibling(&a.out, ".metrics.csv"));
    let file = fs::File::create(&metrics).with_context(|| format!("creating {}", metrics.display()))?;
    let mut w = std::io::BufWriter::new(file);
    write_metrics_csv(&mut w, &report.rows)?;
    w.flush()?;
    let summary = json!({
        "epochs": report.epochs,
        "final_tau": report.final_tau,
        "stop": report.stop,
        "final": report.final_metrics,
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    let resolved = json!({"ffw": cfg, "gate_lr_effective": cfg.gate_lr(), "summary": summary});
    write_manifest(&a.out, "ffw", resolved, Some(cfg.seed), &[&a.checkpoint, &a.train, &a.val], &[a.out.clone(), metrics])
}

fn prune(a: Prune) -> Result<()> {
    let ck = load_ck(&a.checkpoint)?;
    let pruned = magnitude_prune(&ck, a.sparsity)?;
    pruned.save(&a.out)?;
    write_manifest(&a.out, "prune-magnitude", json!({"sparsity": a.sparsity}), None, &[&a.checkpoint], &[a.out.clone()])
}

fn eval(a: EvalArgs) -> Result<()> {
    let seed = resolve_seed(a.seed, 0)?;
    let ck = load_ck(&a.checkpoint)?;
    let data = load_data(&a.data)?;
    let probe = a.probe_data.as_deref().map(load_data).transpose()?;
    if !a.fresh_probe && ck.probe.is_none() {
        eprintln!("note: checkpoint has no probe and --fresh-probe is off; bias accuracy is omitted");
    }
    let opts = EvalOptions { fresh_probe: a.fresh_probe, seed, ..EvalOptions::default() };
    let r = evaluate(&ck, &data, probe.as_ref(), &opts)?;
    let out = json!({
        "task": r.task_acc,
        "bias": r.bias_acc,
        "sparsity": r.sparsity,
        "param_sparsity": r.param_sparsity,
        "subgroups": r.subgroups,
        "n": r.n,
    });
    let text = serde_json::to_string_pretty(&out)? + "\n";
    print!("{text}");
    if let Some(p) = &a.out {
        fs::write(p, &text).with_context(|| format!("writing {}", p.display()))?;
        let mut inputs: Vec<&Path> = vec![&a.checkpoint, &a.data];
        if let Some(pd) = &a.probe_data {
            inputs.push(pd);
        }
        write_manifest(p, "eval", json!({"fresh_probe": a.fresh_probe}), Some(seed), &inputs, std::slice::from_ref(p))?;
    }
    Ok(())
}

fn theory_cmd(t: TheoryCmd) -> Result<()> {
    match t {
        TheoryCmd::Surface { n, rho, grid, out } => {
            let g = theory::unit_grid(grid)?;
            let rows = theory::surface(n, rho, &g, &g)?;
            match &out {
                Some(p) => {
                    let f = fs::File::create(p).with_context(|| format!("creating {}", p.display()))?;
                    let mut w = std::io::BufWriter::new(f);
                    theory::write_surface_csv(&rows, &mut w)?;
                    w.flush()?;
                    write_manifest(p, "theory surface", json!({"n": n, "rho": rho, "grid": grid}), None, &[], std::slice::from_ref(p))?;
                }
                None => theory::write_surface_csv(&rows, std::io::stdout().lock())?,
            }
        }
        TheoryCmd::Point { n, rho, phi, k } => {
            let p = theory::TheoryParams::square(n, rho).with_phi(phi).with_k(k);
            let opt = |r: ffw::Result<f64>| r.ok();
            let out = json!({
                "params": p,
                "mi_bias_target": theory::mi_bias_target_closed(&p)?,
                "mi_bias_prediction_normalized": opt(theory::mi_bias_prediction_closed(&p)),
                "mi_task_prediction": opt(theory::mi_task_prediction_closed(&p)),
            });
            println!("{}", serde_json::to_string_pretty(&out)?);
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData(a) => gen_data(a),
        Cmd::TrainVanilla(a) => train(a),
        Cmd::Ffw(a) => run_ffw(a),
        Cmd::PruneMagnitude(a) => prune(a),
        Cmd::Eval(a) => eval(a),
        Cmd::Theory(t) => theory_cmd(t),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
