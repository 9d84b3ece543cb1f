//! The `rsfnet` command line.
//!
//! Exit codes: 0 success, 1 internal error, 2 IO or file-format error,
//! 3 invalid arguments or configuration.

pub mod config;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

pub use config::{parse_entries, Preset, RunConfig};

use crate::data::{io, load_dataset, make_synthetic_dataset, Checkpoint, SamplePair, SceneMode};
use crate::error::Error;
use crate::eval::{bench_latency, count_cost, evaluate, macc_miou, scores_csv, scores_table, FLOP_CONVENTION};
use crate::model::rsf::SpatialBlock;
use crate::model::{train, Model};
use crate::plg::pseudo_label_detail;
use crate::reparam::verify_equivalence;
use crate::seed::substream;
use crate::tensor::{Parameters, Tensor};

#[derive(Debug, Parser)]
#[command(name = "rsfnet", version, about = "RGB-thermal segmentation with residual spatial fusion")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// File of `key = value` lines.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    /// Run the model in float64.
    #[arg(long)]
    pub fp64: bool,
    /// Override any configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct SourceArgs {
    /// Dataset root with rgb/, thm/, labels/ and split files.
    #[arg(long, value_name = "PATH", conflicts_with = "synthetic")]
    pub dataset: Option<PathBuf>,
    #[arg(long, default_value = "train")]
    pub split: String,
    /// Generate scenes instead: day, night or mixed.
    #[arg(long, value_name = "MODE")]
    pub synthetic: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Saliency pseudo-labels for every sample, as CSV.
    Plg {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        source: SourceArgs,
        /// Comma-separated box radii.
        #[arg(long, value_name = "LIST")]
        scales: Option<String>,
        /// Also write saliency maps as PNG.
        #[arg(long)]
        saliency: bool,
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
    },
    /// Train a model; writes model.ckpt, loss_log.csv and config.txt.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        source: SourceArgs,
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
    },
    /// Collapse every spatial block into one convolution and check the result.
    Fuse {
        checkpoint: PathBuf,
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
        /// Largest allowed output deviation.
        #[arg(long, value_name = "FLOAT", default_value_t = 1e-5)]
        tol: f64,
        /// Random inputs per block.
        #[arg(long, value_name = "N", default_value_t = 8)]
        trials: usize,
        #[arg(long, value_name = "N", default_value_t = 0)]
        seed: u64,
    },
    /// Per-class accuracy and IoU of a checkpoint on a dataset.
    Eval {
        checkpoint: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        source: SourceArgs,
        /// Leave class 0 out of the means.
        #[arg(long)]
        exclude_unlabeled: bool,
        /// Directory for metrics.csv and predicted label maps.
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
    /// Parameter, FLOP and latency comparison of the multi-branch and fused forms.
    Bench {
        /// Checkpoint to measure; a fresh model from the configuration otherwise.
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, value_name = "N", default_value_t = 10)]
        trials: usize,
        #[arg(long, value_name = "N", default_value_t = 2)]
        warmup: usize,
    },
}

/// Why a command stopped.
#[derive(Debug)]
pub enum Failure {
    Lib(Error),
    Internal(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Lib(e) if e.is_io_or_format() => 2,
            Failure::Lib(e) if e.is_validation() => 3,
            _ => 1,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Lib(e) => write!(f, "{e}"),
            Failure::Internal(m) => write!(f, "internal error: {m}"),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn fs_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn write_file(path: &Path, contents: &str) -> crate::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(fs_err(dir))?;
    }
    fs::write(path, contents).map_err(fs_err(path))
}

fn resolve_config(args: &ConfigArgs, extra: &[(String, String)]) -> crate::Result<RunConfig> {
    let mut entries = match &args.config {
        Some(path) => parse_entries(&fs::read_to_string(path).map_err(fs_err(path))?)?,
        None => Vec::new(),
    };
    entries.extend(extra.iter().cloned());
    for kv in &args.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config {
            key: kv.clone(),
            msg: "expected KEY=VALUE".into(),
        })?;
        entries.push((k.trim().to_string(), v.trim().to_string()));
    }
    if let Some(seed) = args.seed {
        entries.push(("seed".into(), seed.to_string()));
    }
    if args.fp64 {
        entries.push(("fp64".into(), "true".into()));
    }
    RunConfig::resolve(&entries)
}

fn load_samples(source: &SourceArgs, cfg: &RunConfig) -> crate::Result<Vec<SamplePair>> {
    match (&source.dataset, &source.synthetic) {
        (Some(root), None) => load_dataset(root, &source.split),
        (None, Some(mode)) => make_synthetic_dataset(cfg.scenes, cfg.seed, mode.parse::<SceneMode>()?),
        _ => Err(Error::invalid("pass exactly one of --dataset or --synthetic")),
    }
}

fn load_model(path: &Path) -> crate::Result<Model> {
    Model::from_checkpoint(&Checkpoint::load(path)?)
}

fn cmd_plg(cfg: &ConfigArgs, source: &SourceArgs, scales: Option<&str>, saliency: bool, out: &Path) -> CmdResult {
    let extra: Vec<(String, String)> = scales.map(|s| ("scales".to_string(), s.to_string())).into_iter().collect();
    let cfg = resolve_config(cfg, &extra)?;
    let samples = load_samples(source, &cfg)?;
    let mut csv = String::from("id,p_rgb,p_thm\n");
    for s in &samples {
        let d = pseudo_label_detail(&s.rgb, &s.thm, &s.gt, &cfg.plg).map_err(|e| Error::Sample {
            id: s.id.clone(),
            msg: e.to_string(),
        })?;
        let _ = writeln!(csv, "{},{:.6},{:.6}", s.id, d.labels.p_rgb, d.labels.p_thm);
        if saliency {
            for (tag, m) in [("rgb", &d.saliency_rgb), ("thm", &d.saliency_thm)] {
                let bytes = m.values().iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect();
                io::write_gray_png(&out.join("saliency").join(format!("{}_{tag}.png", s.id)), m.height(), m.width(), bytes)?;
            }
        }
    }
    write_file(&out.join("pseudo_labels.csv"), &csv)?;
    write_file(&out.join("config.txt"), &cfg.to_text())?;
    println!("wrote pseudo-labels for {} samples to {}", samples.len(), out.join("pseudo_labels.csv").display());
    Ok(())
}

fn cmd_train(cfg: &ConfigArgs, source: &SourceArgs, out: &Path) -> CmdResult {
    let mut cfg = resolve_config(cfg, &[])?;
    let samples = load_samples(source, &cfg)?;
    cfg.train.steps = cfg.steps_for(samples.len());
    write_file(&out.join("config.txt"), &cfg.to_text())?;
    let mut model = Model::init(&cfg.model, &mut substream(cfg.seed, "init"))?;
    let mut log = String::from("step,lr,loss,seg,reg\n");
    let every = cfg.checkpoint_every;
    let ckpt = out.join("model.ckpt");
    let stats = train(&mut model, &samples, &cfg.train, |s, m| {
        let _ = writeln!(log, "{},{},{},{},{}", s.step, s.lr, s.loss, s.seg, s.reg);
        if s.step % 25 == 0 {
            println!("step {:>5}  lr {:.5}  loss {:.5}", s.step, s.lr, s.loss);
        }
        if every > 0 && (s.step + 1) % every == 0 {
            m.to_checkpoint().save(&ckpt)?;
        }
        Ok(())
    })?;
    write_file(&out.join("loss_log.csv"), &log)?;
    model.to_checkpoint().save(&ckpt)?;
    if let (Some(first), Some(last)) = (stats.first(), stats.last()) {
        println!("loss {:.5} -> {:.5} over {} steps; wrote {}", first.loss, last.loss, stats.len(), ckpt.display());
    }
    Ok(())
}

fn cmd_fuse(input: &Path, out: &Path, tol: f64, trials: usize, seed: u64) -> CmdResult {
    let bytes = fs::read(input).map_err(fs_err(input))?;
    let ck = Checkpoint::from_bytes(&bytes)?;
    let model = Model::from_checkpoint(&ck)?;
    if model.is_fused() {
        println!("{} is already fused; copied unchanged", input.display());
        if input != out {
            fs::write(out, &bytes).map_err(fs_err(out))?;
        }
        return Ok(());
    }
    if trials == 0 || !(tol >= 0.0) {
        return Err(Error::invalid("fuse: --trials must be positive and --tol non-negative").into());
    }
    let fused = model.fused()?;
    let mut deviations = Vec::new();
    let mut failed = Vec::new();
    println!("block,max_abs_deviation,tolerance,passed");
    for (s, (a, b)) in model.rsf.iter().zip(&fused.rsf).enumerate() {
        for (tag, src, dst) in [("rgb", &a.rgb.block, &b.rgb.block), ("thm", &a.thm.block, &b.thm.block)] {
            let (SpatialBlock::Branches(branches), SpatialBlock::Fused(conv)) = (src, dst) else {
                return Err(Failure::Internal(format!("rsf{}.{tag}: unexpected block form", s + 1)));
            };
            let r = verify_equivalence(branches, conv, trials, tol, seed)?;
            let name = format!("rsf{}.{tag}", s + 1);
            println!("{name},{:e},{:e},{}", r.max_abs_deviation, r.tolerance, r.passed);
            if !r.passed {
                failed.push(name);
            }
            deviations.push(r.max_abs_deviation);
        }
    }
    if !failed.is_empty() {
        return Err(Failure::Internal(format!("fused blocks exceed tolerance {tol:e}: {}", failed.join(", "))));
    }
    let mut out_ck = fused.to_checkpoint();
    let n = deviations.len();
    out_ck.set("fuse_report.max_abs_deviation", &Tensor::new(&[n], deviations)?);
    out_ck.set("fuse_report.tolerance", &Tensor::new(&[1], vec![tol])?);
    out_ck.set("fuse_report.trials", &Tensor::new(&[1], vec![trials as f64])?);
    out_ck.save(out)?;
    println!(
        "parameters {} -> {}; wrote {}",
        model.param_count(),
        fused.param_count(),
        out.display()
    );
    Ok(())
}

fn cmd_eval(checkpoint: &Path, cfg: &ConfigArgs, source: &SourceArgs, exclude_unlabeled: bool, out: Option<&Path>) -> CmdResult {
    let model = load_model(checkpoint)?;
    let mut extra = vec![("num_classes".to_string(), model.config.num_classes.to_string())];
    if model.config.dtype == crate::DType::F64 {
        extra.push(("fp64".into(), "true".into()));
    }
    let run = resolve_config(cfg, &extra)?;
    let samples = load_samples(source, &run)?;
    if samples.is_empty() {
        return Err(Error::invalid("eval: the dataset has no samples").into());
    }
    let (cm, preds) = evaluate(&model, &samples)?;
    let scores = macc_miou(&cm, !exclude_unlabeled);
    print!("{}", scores_table(&scores));
    if let Some(dir) = out {
        write_file(&dir.join("metrics.csv"), &scores_csv(&scores))?;
        for (s, p) in samples.iter().zip(&preds) {
            io::write_labels(&dir.join("pred").join(format!("{}.png", s.id)), p)?;
        }
    }
    Ok(())
}

fn cmd_bench(checkpoint: Option<&Path>, cfg: &ConfigArgs, h: usize, w: usize, trials: usize, warmup: usize) -> CmdResult {
    let run = resolve_config(cfg, &[])?;
    let model = match checkpoint {
        Some(p) => load_model(p)?,
        None => Model::init(&run.model, &mut substream(run.seed, "init"))?,
    };
    if trials == 0 {
        return Err(Error::invalid("bench: --trials must be at least 1").into());
    }
    let mut forms = Vec::new();
    if !model.is_fused() {
        forms.push(("multi_branch", model.clone()));
    }
    forms.push(("fused", model.fused()?));

    let mut rng = substream(run.seed, "bench");
    let rgb = Tensor::uniform(&[1, 3, h, w], 0.0, 1.0, model.config.dtype, &mut rng);
    let thm = Tensor::uniform(&[1, 1, h, w], 0.0, 1.0, model.config.dtype, &mut rng);
    println!("# {FLOP_CONVENTION}");
    println!("# input 1x{h}x{w}, {trials} timed runs after {warmup} warmup, one thread");
    println!("form,params,flops,mean_ms,p50_ms,p95_ms,std_ms");
    for (name, m) in forms {
        let cost = count_cost(&m.config, h, w, m.is_fused())?.total();
        if cost.params != m.param_count() as u64 {
            return Err(Failure::Internal(format!(
                "{name}: counted {} parameters, model holds {}",
                cost.params,
                m.param_count()
            )));
        }
        let inference = m.detached();
        let stats = bench_latency(trials, warmup, || inference.forward(&rgb, &thm, false).map(|_| ()))?;
        println!(
            "{name},{},{},{:.3},{:.3},{:.3},{:.3}",
            cost.params, cost.flops, stats.mean_ms, stats.p50_ms, stats.p95_ms, stats.std_ms
        );
    }
    Ok(())
}

fn configure_threads() -> crate::Result<()> {
    let Ok(v) = std::env::var("RSF_THREADS") else {
        return Ok(());
    };
    let n: usize = v.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| Error::Config {
        key: "RSF_THREADS".into(),
        msg: format!("expected a positive integer, got {v:?}"),
    })?;
    // A second call in the same process keeps the first pool.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Runs a parsed command line.
pub fn execute(cli: &Cli) -> CmdResult {
    configure_threads()?;
    match &cli.command {
        Command::Plg {
            cfg,
            source,
            scales,
            saliency,
            out,
        } => cmd_plg(cfg, source, scales.as_deref(), *saliency, out),
        Command::Train { cfg, source, out } => cmd_train(cfg, source, out),
        Command::Fuse {
            checkpoint,
            out,
            tol,
            trials,
            seed,
        } => cmd_fuse(checkpoint, out, *tol, *trials, *seed),
        Command::Eval {
            checkpoint,
            cfg,
            source,
            exclude_unlabeled,
            out,
        } => cmd_eval(checkpoint, cfg, source, *exclude_unlabeled, out.as_deref()),
        Command::Bench {
            checkpoint,
            cfg,
            height,
            width,
            trials,
            warmup,
        } => cmd_bench(checkpoint.as_deref(), cfg, *height, *width, *trials, *warmup),
    }
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 3 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => {
            let _ = std::io::stdout().flush();
            0
        }
        Err(f) => {
            eprintln!("error: {f}");
            f.exit_code()
        }
    }
}
