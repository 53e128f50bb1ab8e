//! Command implementations behind the `karat` binary.

pub mod config;

use clap::{Args, Parser, Subcommand};
use config::{parse_text, ConfigError, RunConfig};
use karat_analysis::count::count_params_flops;
use karat_analysis::histogram::weight_histogram;
use karat_analysis::landscape::{loss_landscape, LandscapeOptions};
use karat_analysis::spectra::{scree_count, spectral_scan, Stage};
use karat_core::attention::{KaratConfig, Sharing};
use karat_core::checkpoint::Checkpoint;
use karat_core::simplex::project_simplex;
use karat_core::vit::{AttentionKind, Vit, VitConfig};
use karat_core::KaratError;
use karat_harness::data::{load_cifar10, load_idx, synthetic_shapes, Dataset};
use karat_harness::train::{evaluate_checkpoint, train};
use karat_harness::transfer::attention_transfer_train;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.0)
    }
}

impl From<KaratError> for CliError {
    fn from(e: KaratError) -> Self {
        if let KaratError::Config(m) = e {
            CliError::Config(m)
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

type Res<T> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "karat", about = "Learnable attention experiments on compact vision transformers")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug, Clone)]
struct CountArgs {
    #[command(flatten)]
    common: Common,
    /// vit-micro, vit-mini, vit-tiny, vit-small or vit-base.
    #[arg(long)]
    preset: Option<String>,
    /// `softmax`, or `g<G>b` / `g<G>u` for Fourier KArAt with r=12 (blockwise / universal).
    #[arg(long)]
    attention: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Train a model and write checkpoints and metrics.
    Train(Common),
    /// Evaluate `eval.checkpoint` on the test split.
    Eval(Common),
    /// Train a student on a teacher's attention maps.
    Transfer(Common),
    /// Diagnostics on checkpoints.
    Analyze {
        #[command(subcommand)]
        what: AnalyzeCmd,
    },
    /// Project whitespace-separated vectors (one per line) onto the probability simplex.
    Project {
        /// Read from this file instead of standard input.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Parameter and FLOP accounting.
    Count(CountArgs),
}

#[derive(Subcommand, Debug)]
enum AnalyzeCmd {
    /// Singular values of attention matrices.
    Spectra(Common),
    /// Weight histograms per parameter group.
    Hist(Common),
    /// Loss surface along the trajectory's principal directions.
    Landscape(Common),
    /// Parameter and FLOP accounting.
    Count(CountArgs),
}

/// Splits `--dotted.key=value` overrides from the arguments clap understands.
fn split_overrides(args: Vec<String>) -> (Vec<String>, Vec<(String, String)>) {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for a in args {
        if let Some(body) = a.strip_prefix("--") {
            if let Some((k, v)) = body.split_once('=') {
                if k.contains('.') {
                    overrides.push((k.to_string(), v.to_string()));
                    continue;
                }
            }
        }
        rest.push(a);
    }
    (rest, overrides)
}

fn resolve(common: &Common, overrides: &[(String, String)]) -> Res<RunConfig> {
    let file = match &common.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("--config {}: {e}", p.display())))?;
            parse_text(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => Vec::new(),
    };
    let mut ov = overrides.to_vec();
    if let Some(s) = common.seed {
        ov.push(("seed".into(), s.to_string()));
    }
    Ok(RunConfig::resolve(&file, &ov)?)
}

fn out_dir(common: &Common, default: &str) -> Res<PathBuf> {
    let dir = common.out.clone().unwrap_or_else(|| PathBuf::from(default));
    std::fs::create_dir_all(&dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
    Ok(dir)
}

fn existing(key: &str, path: &str) -> Res<PathBuf> {
    let p = PathBuf::from(path);
    if !p.exists() {
        return Err(CliError::Config(format!("{key}: {path} does not exist")));
    }
    Ok(p)
}

fn load_split(cfg: &RunConfig, key: &str) -> Res<Option<Dataset>> {
    let classes: usize = cfg.parse("model.classes")?;
    let paths = cfg.list(key);
    if paths.is_empty() {
        return Ok(None);
    }
    let paths = paths.iter().map(|p| existing(key, p)).collect::<Res<Vec<_>>>()?;
    match cfg.get("data.format") {
        "idx" => {
            if paths.len() != 2 {
                return Err(CliError::Config(format!("{key}: idx expects `images,labels`")));
            }
            Ok(Some(load_idx(&paths[0], &paths[1], classes)?))
        }
        "cifar10" => Ok(Some(load_cifar10(&paths)?)),
        _ => unreachable!("format checked by caller"),
    }
}

/// Training and test splits for the configured dataset.
fn datasets(cfg: &RunConfig) -> Res<(Dataset, Dataset)> {
    let model = cfg.model()?;
    let (train_set, test_set) = match cfg.get("data.format") {
        "synthetic" => {
            if model.channels != 1 {
                return Err(CliError::Config("data.format: synthetic images have 1 channel; set model.channels = 1".into()));
            }
            let seed: u64 = cfg.parse("data.synthetic_seed")?;
            let mk = |n, s| synthetic_shapes(n, model.classes, model.image_size, s);
            (mk(cfg.parse("data.train_size")?, seed)?, mk(cfg.parse("data.test_size")?, seed.wrapping_add(1))?)
        }
        "idx" | "cifar10" => {
            let train = load_split(cfg, "data.train")?
                .ok_or_else(|| CliError::Config("data.train: required but not set".into()))?;
            let test = load_split(cfg, "data.test")?.unwrap_or_else(|| train.clone());
            (train, test)
        }
        v => return Err(CliError::Config(format!("data.format: unknown format `{v}` (synthetic, idx, cifar10)"))),
    };
    if let Some((h, w, c)) = train_set.image_shape() {
        if h != model.image_size || w != model.image_size || c != model.channels {
            return Err(CliError::Config(format!(
                "data: images are {h}×{w}×{c}, model expects {0}×{0}×{1}",
                model.image_size, model.channels
            )));
        }
    }
    if train_set.classes != model.classes {
        return Err(CliError::Config(format!(
            "model.classes is {} but the dataset has {} classes",
            model.classes, train_set.classes
        )));
    }
    Ok((train_set, test_set))
}

fn load_checkpoint(cfg: &RunConfig, key: &str) -> Res<Checkpoint> {
    let path = cfg.required(key)?;
    let p = existing(key, path)?;
    Ok(Checkpoint::load(p)?)
}

fn model_from(cfg: &RunConfig, ckpt: &Checkpoint) -> Res<Vit> {
    let mut m = Vit::new(cfg.model()?, 0)?;
    m.load_checkpoint(ckpt)?;
    Ok(m)
}

fn persist(cfg: &RunConfig, dir: &Path) -> Res<()> {
    std::fs::write(dir.join("config.resolved"), cfg.to_text())?;
    Ok(())
}

fn report_run(out: &mut dyn Write, art: &karat_harness::train::RunArtifacts) -> Res<()> {
    if let Some(last) = art.metrics.last() {
        let f = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
        writeln!(
            out,
            "final epoch={} step={} train_loss={:.6} top1={} top5={}",
            last.epoch,
            last.step,
            last.train_loss,
            f(last.top1),
            f(last.top5)
        )?;
    }
    Ok(())
}

fn cmd_train(common: &Common, ov: &[(String, String)], out: &mut dyn Write) -> Res<()> {
    let cfg = resolve(common, ov)?;
    let model_cfg = cfg.model()?;
    let tc = cfg.train()?;
    let (train_set, test_set) = datasets(&cfg)?;
    let dir = out_dir(common, "karat-run")?;
    persist(&cfg, &dir)?;
    let model = Vit::new(model_cfg, tc.seed)?;
    let art = train(model, &tc, &train_set, Some(&test_set), Some(&dir))?;
    report_run(out, &art)
}

fn cmd_eval(common: &Common, ov: &[(String, String)], out: &mut dyn Write) -> Res<()> {
    let cfg = resolve(common, ov)?;
    let ckpt = load_checkpoint(&cfg, "eval.checkpoint")?;
    let (_, test_set) = datasets(&cfg)?;
    let r = evaluate_checkpoint(&ckpt, &cfg.model()?, &test_set)?;
    writeln!(out, "top1={} top5={} loss={}", r.top1, r.top5, r.loss)?;
    Ok(())
}

fn cmd_transfer(common: &Common, ov: &[(String, String)], out: &mut dyn Write) -> Res<()> {
    let cfg = resolve(common, ov)?;
    let teacher_cfg_path = existing("transfer.teacher_config", cfg.required("transfer.teacher_config")?)?;
    let text = std::fs::read_to_string(&teacher_cfg_path)?;
    let teacher_run = RunConfig::resolve(&parse_text(&text)?, &[])?;
    let teacher = model_from(&teacher_run, &load_checkpoint(&cfg, "transfer.teacher")?)?;
    let tc = cfg.train()?;
    let (train_set, test_set) = datasets(&cfg)?;
    let dir = out_dir(common, "karat-transfer")?;
    persist(&cfg, &dir)?;
    let art = attention_transfer_train(&teacher, cfg.model()?, &tc, &train_set, Some(&test_set), Some(&dir))?;
    report_run(out, &art)
}

fn cmd_spectra(common: &Common, ov: &[(String, String)], out: &mut dyn Write) -> Res<()> {
    let cfg = resolve(common, ov)?;
    let model = model_from(&cfg, &load_checkpoint(&cfg, "analysis.checkpoint")?)?;
    let (_, test_set) = datasets(&cfg)?;
    let n: usize = cfg.parse("analysis.samples")?;
    let layers = match cfg.list("analysis.layers") {
        l if l.is_empty() => vec![model.cfg.depth - 1],
        l => l
            .iter()
            .map(|s| s.parse().map_err(|_| CliError::Config(format!("analysis.layers: cannot parse `{s}`"))))
            .collect::<Res<Vec<usize>>>()?,
    };
    let samples = test_set.take(n).images;
    let rep = spectral_scan(&model, &samples, &layers)?;
    let dir = out_dir(common, "karat-analysis")?;
    std::fs::write(dir.join("spectra_pre.csv"), rep.csv(Stage::Pre))?;
    std::fs::write(dir.join("spectra_post.csv"), rep.csv(Stage::Post))?;
    writeln!(out, "matrices {} max reconstruction error {:e}", rep.entries.len(), rep.max_reconstruction_error)?;
    for stage in [Stage::Pre, Stage::Post] {
        let counts: Vec<_> = rep.entries.iter().filter(|e| e.stage == stage).map(|e| scree_count(&e.sigma)).collect();
        let mean = counts.iter().map(|s| s.count as f64).sum::<f64>() / counts.len().max(1) as f64;
        let flat = counts.iter().filter(|s| s.no_elbow).count();
        writeln!(out, "{} scree count mean {mean:.2} (no elbow in {flat} of {})", stage.name(), counts.len())?;
    }
    match rep.max_row_sum_deviation {
        Some(d) => writeln!(out, "row-sum check: max |‖A·1‖ − √N| = {d:e}")?,
        None => writeln!(out, "row-sum check: post-activation rows are not stochastic")?,
    }
    Ok(())
}

fn cmd_hist(common: &Common, ov: &[(String, String)], out: &mut dyn Write) -> Res<()> {
    let cfg = resolve(common, ov)?;
    let ckpt = load_checkpoint(&cfg, "analysis.checkpoint")?;
    let h = weight_histogram(&ckpt, cfg.parse("analysis.bins")?);
    let dir = out_dir(common, "karat-analysis")?;
    std::fs::write(dir.join("histogram.csv"), h.csv())?;
    for (g, c) in &h.counts {
        writeln!(out, "{} {}", g.name(), c.iter().sum::<u64>())?;
    }
    writeln!(out, "range ±{} total {}", h.range, h.total())?;
    Ok(())
}

fn trajectory(cfg: &RunConfig) -> Res<Vec<Checkpoint>> {
    let entries = cfg.list("analysis.trajectory");
    if entries.is_empty() {
        return Err(CliError::Config("analysis.trajectory: required but not set".into()));
    }
    let mut paths = Vec::new();
    for e in &entries {
        let p = existing("analysis.trajectory", e)?;
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(&p)?
                .filter_map(|d| d.ok().map(|d| d.path()))
                .filter(|q| {
                    q.file_name()
                        .and_then(|n| n.to_str())
                        .is_some_and(|n| n.starts_with("epoch_") && n.ends_with(".ckpt"))
                })
                .collect();
            found.sort();
            paths.extend(found);
        } else {
            paths.push(p);
        }
    }
    paths.iter().map(|p| Ok(Checkpoint::load(p)?)).collect()
}

fn cmd_landscape(common: &Common, ov: &[(String, String)], out: &mut dyn Write) -> Res<()> {
    let cfg = resolve(common, ov)?;
    let traj = trajectory(&cfg)?;
    let (_, test_set) = datasets(&cfg)?;
    let eval = test_set.take(cfg.parse("analysis.eval_samples")?);
    let opts = LandscapeOptions {
        resolution: cfg.parse("analysis.resolution")?,
        extent: cfg.parse("analysis.extent")?,
        filter_normalize: cfg.flag("analysis.filter_normalize")?,
    };
    let grid = loss_landscape(&traj, &cfg.model()?, &eval, &opts)?;
    let dir = out_dir(common, "karat-analysis")?;
    std::fs::write(dir.join("landscape.csv"), grid.csv())?;
    let (lo, hi) = grid.losses.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &l| (a.min(l), b.max(l)));
    writeln!(
        out,
        "checkpoints {} sigma {:e} {:e} anchor loss {} grid loss range [{lo}, {hi}]",
        traj.len(),
        grid.sigma[0],
        grid.sigma[1],
        grid.anchor_loss
    )?;
    Ok(())
}

fn preset_config(name: &str) -> Res<VitConfig> {
    Ok(match name.trim_start_matches("vit-") {
        "micro" => VitConfig::micro(16, 1, 4, 2),
        "mini" => VitConfig::mini(32, 3, 4, 10),
        "tiny" => VitConfig::tiny(10),
        "small" => VitConfig::small(1000),
        "base" => VitConfig::base(10),
        other => return Err(CliError::Config(format!("--preset: unknown preset `{other}`"))),
    })
}

/// `softmax`, or `g<G><b|u>`.
fn attention_shorthand(s: &str) -> Res<AttentionKind> {
    if s == "softmax" {
        return Ok(AttentionKind::Softmax);
    }
    let bad = || CliError::Config(format!("--attention: expected softmax or g<G>b / g<G>u, got `{s}`"));
    let body = s.strip_prefix('g').ok_or_else(bad)?;
    let (digits, mode) = body.split_at(body.len().saturating_sub(1));
    let g: usize = digits.parse().map_err(|_| bad())?;
    let mut k = KaratConfig::fourier(g, 12);
    k.sharing = match mode {
        "b" | "B" => Sharing::Blockwise,
        "u" | "U" => Sharing::Universal,
        _ => return Err(bad()),
    };
    Ok(AttentionKind::Karat(k))
}

fn cmd_count(args: &CountArgs, ov: &[(String, String)], out: &mut dyn Write) -> Res<()> {
    let cfg = match &args.preset {
        Some(p) => {
            let mut c = preset_config(p)?;
            if let Some(a) = &args.attention {
                c.attention = attention_shorthand(a)?;
            }
            c.validate()?;
            c
        }
        None => {
            let mut c = resolve(&args.common, ov)?.model()?;
            if let Some(a) = &args.attention {
                c.attention = attention_shorthand(a)?;
            }
            c
        }
    };
    write!(out, "{}", count_params_flops(&cfg).render())?;
    Ok(())
}

/// Shortest round-trip decimal form of each coordinate.
pub fn format_vector(v: &[f64]) -> String {
    v.iter().map(|x| format!("{}", x + 0.0)).collect::<Vec<_>>().join(" ")
}

fn cmd_project(input: &mut dyn BufRead, out: &mut dyn Write) -> Res<()> {
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            writeln!(out)?;
            continue;
        }
        let v = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| CliError::Config(format!("line {}: cannot parse `{t}`", i + 1))))
            .collect::<Res<Vec<f64>>>()?;
        let r = project_simplex(&v).map_err(|e| CliError::Config(format!("line {}: {e}", i + 1)))?;
        writeln!(out, "{}", format_vector(&r.x_star))?;
    }
    Ok(())
}

fn init_threads() -> Res<()> {
    if let Ok(v) = std::env::var("KARAT_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::Config(format!("KARAT_THREADS: expected a positive integer, got `{v}`")))?;
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

/// Runs one command; `args` excludes the program name.
pub fn run(args: Vec<String>, stdin: &mut dyn BufRead, stdout: &mut dyn Write) -> Res<()> {
    let (rest, overrides) = split_overrides(args);
    let cli = match Cli::try_parse_from(std::iter::once("karat".to_string()).chain(rest)) {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            write!(stdout, "{e}")?;
            return Ok(());
        }
        Err(e) => return Err(CliError::Config(e.to_string().trim_end().to_string())),
    };
    init_threads()?;
    let no_overrides = |ov: &[(String, String)]| -> Res<()> {
        match ov.first() {
            Some((k, _)) => Err(CliError::Config(format!("--{k}: this command takes no config overrides"))),
            None => Ok(()),
        }
    };
    match &cli.cmd {
        Cmd::Train(c) => cmd_train(c, &overrides, stdout),
        Cmd::Eval(c) => cmd_eval(c, &overrides, stdout),
        Cmd::Transfer(c) => cmd_transfer(c, &overrides, stdout),
        Cmd::Analyze { what } => match what {
            AnalyzeCmd::Spectra(c) => cmd_spectra(c, &overrides, stdout),
            AnalyzeCmd::Hist(c) => cmd_hist(c, &overrides, stdout),
            AnalyzeCmd::Landscape(c) => cmd_landscape(c, &overrides, stdout),
            AnalyzeCmd::Count(a) => cmd_count(a, &overrides, stdout),
        },
        Cmd::Project { input } => {
            no_overrides(&overrides)?;
            match input {
                Some(p) => {
                    let f = std::fs::File::open(p).map_err(|e| CliError::Config(format!("--input {}: {e}", p.display())))?;
                    cmd_project(&mut std::io::BufReader::new(f), stdout)
                }
                None => cmd_project(stdin, stdout),
            }
        }
        Cmd::Count(a) => cmd_count(a, &overrides, stdout),
    }
}
