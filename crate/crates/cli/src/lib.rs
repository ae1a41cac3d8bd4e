//! Command-line front end: argument grammar, dispatch and exit codes.
//!
//! Exit codes: `0` success, `1` usage error, `2` data, format or check failure.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use dsgate::checks::{gradient_suite, CaseResult};
use dsgate::data::{gen_dataset, load_dataset, save_dataset, validation_seed, SceneSample};
use dsgate::dso::{channel_stats, surface_grid, write_surface_csv, GateStatistic, GridRange, RegionConfig};
use dsgate::gating::{added_param_count, LogitOffset, DEFAULT_ALPHA, DEFAULT_BETA, DEFAULT_GROUPS};
use dsgate::io::load_tensor;
use dsgate::train::{ablate, evaluate, train, write_ablation_csv, AblationAxis, ToyConfig, ToyModel, TrainConfig};
use dsgate::{Error, Tensor64};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "dsgate", version, about = "Decision-space gating experiments on synthetic data")]
pub struct Cli {
    /// Seed for every random draw.
    #[arg(long, global = true, env = "DS_SEED", default_value_t = 7)]
    pub seed: u64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample the operator and its region labels over a (mu, d) grid.
    Surface(SurfaceArgs),
    /// Per-channel statistics and region labels of a tensor file.
    Stats(StatsArgs),
    /// Finite-difference checks of every backward pass.
    Gradcheck(GradcheckArgs),
    /// Write a synthetic dataset directory.
    GenData(GenDataArgs),
    /// Train the toy classifier.
    Train(TrainArgs),
    /// Evaluate a saved toy classifier.
    Eval(EvalArgs),
    /// Train once per value of one configuration axis.
    Ablate(AblateArgs),
    /// Parameter overhead of the two gates.
    Params(ParamsArgs),
}

/// Parses `min:max:steps`.
pub fn parse_range(s: &str) -> Result<GridRange, String> {
    let parts: Vec<&str> = s.split(':').collect();
    let [min, max, steps] = parts[..] else {
        return Err(format!("expected min:max:steps, got '{s}'"));
    };
    let min: f64 = min.trim().parse().map_err(|_| format!("bad range minimum '{min}'"))?;
    let max: f64 = max.trim().parse().map_err(|_| format!("bad range maximum '{max}'"))?;
    let steps: usize = steps.trim().parse().map_err(|_| format!("bad step count '{steps}'"))?;
    GridRange::new(min, max, steps).map_err(|e| e.to_string())
}

#[derive(Debug, Clone, Args)]
pub struct RegionArgs {
    /// Relative width of the band around d = mu.
    #[arg(long, default_value_t = 0.2)]
    pub band: f64,
    /// Operator value separating mixed from background inside the band.
    #[arg(long, default_value_t = 1.0)]
    pub threshold: f64,
}

impl RegionArgs {
    fn config(&self) -> Result<RegionConfig, Error> {
        RegionConfig::new(self.band, self.threshold)
    }
}

#[derive(Debug, Args)]
pub struct SurfaceArgs {
    /// Spatial-mean axis as min:max:steps.
    #[arg(long, value_parser = parse_range, default_value = "0:3:61")]
    pub mu: GridRange,
    /// Max-minus-mean axis as min:max:steps.
    #[arg(long, value_parser = parse_range, default_value = "0:3:61")]
    pub d: GridRange,
    #[command(flatten)]
    pub region: RegionArgs,
    /// Output CSV; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    /// DST1 tensor file.
    #[arg(long)]
    pub input: PathBuf,
    #[command(flatten)]
    pub region: RegionArgs,
    /// Output CSV; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Random configurations to sweep.
    #[arg(long, default_value_t = 20)]
    pub configs: usize,
    /// Relative finite-difference step.
    #[arg(long, default_value_t = 1e-4)]
    pub step: f64,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-5)]
    pub tol: f64,
    /// Per-case CSV; a summary is always printed.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Number of samples.
    #[arg(long, default_value_t = 2048)]
    pub count: usize,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// Disable the decision-space gate.
    #[arg(long)]
    pub no_dsg: bool,
    /// Disable the multi-path gate.
    #[arg(long)]
    pub no_msg: bool,
    /// Multi-path gate group count.
    #[arg(long, default_value_t = DEFAULT_GROUPS)]
    pub groups: usize,
    /// Temperature range.
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    pub alpha: f64,
    /// Temperature floor.
    #[arg(long, default_value_t = DEFAULT_BETA)]
    pub beta: f64,
    /// Gate input statistic: mean, max or dso.
    #[arg(long, default_value = "dso")]
    pub operator: GateStatistic,
    /// Add the raw scale logits to the gate logits instead of scaled noise.
    #[arg(long)]
    pub raw_scale_offset: bool,
}

impl ModelArgs {
    fn config(&self) -> Result<ToyConfig, Error> {
        let mut cfg = ToyConfig::default();
        let b = &mut cfg.block;
        b.use_dsg = !self.no_dsg;
        b.use_msg = !self.no_msg;
        b.groups = self.groups;
        b.alpha = self.alpha;
        b.beta = self.beta;
        b.statistic = self.operator;
        b.offset = if self.raw_scale_offset { LogitOffset::RawScale } else { LogitOffset::Noise };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Training dataset directory; generated from the seed when omitted.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Generated training samples.
    #[arg(long, default_value_t = 2048)]
    pub samples: usize,
    /// Generated validation samples.
    #[arg(long, default_value_t = 512)]
    pub val_samples: usize,
}

#[derive(Debug, Clone, Args)]
pub struct OptimArgs {
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    /// Learning rate.
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    /// Minibatch size.
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
}

impl OptimArgs {
    fn config(&self, seed: u64) -> TrainConfig {
        TrainConfig { epochs: self.epochs, lr: self.lr, momentum: self.momentum, batch_size: self.batch, seed }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    /// Per-epoch metrics CSV.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Directory for the trained parameter bundle.
    #[arg(long)]
    pub save: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Saved model directory.
    #[arg(long)]
    pub model: PathBuf,
    /// Dataset directory; a seeded validation set is generated when omitted.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Generated samples when no directory is given.
    #[arg(long, default_value_t = 512)]
    pub samples: usize,
    /// Confusion-matrix CSV.
    #[arg(long)]
    pub confusion: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// groups, alpha or operator.
    #[arg(long)]
    pub axis: AblationAxis,
    /// Comma-separated axis values.
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<String>,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    /// Output CSV; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ParamsArgs {
    /// Block output channels.
    #[arg(long, default_value_t = 64)]
    pub channels: usize,
    #[arg(long, default_value_t = 2)]
    pub bottlenecks: usize,
    #[arg(long, default_value_t = DEFAULT_GROUPS)]
    pub groups: usize,
}

/// Failure of a command after parsing.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Usage(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

/// Parses `args` (program name first) and runs the command.
pub fn run<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{e}");
                    EXIT_OK
                }
                _ => {
                    let _ = write!(err, "{e}");
                    EXIT_USAGE
                }
            };
        }
    };
    match dispatch(&cli, out, err) {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(msg)) => {
            let _ = writeln!(err, "error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Data(msg)) => {
            let _ = writeln!(err, "error: {msg}");
            EXIT_DATA
        }
    }
}

fn dispatch(cli: &Cli, out: &mut dyn Write, err: &mut dyn Write) -> CmdResult {
    let seed = cli.seed;
    match &cli.command {
        Command::Surface(a) => surface(a, out),
        Command::Stats(a) => stats(a, out),
        Command::Gradcheck(a) => gradcheck(a, seed, out),
        Command::GenData(a) => gen_data(a, seed, out),
        Command::Train(a) => train_cmd(a, seed, out, err),
        Command::Eval(a) => eval_cmd(a, seed, out),
        Command::Ablate(a) => ablate_cmd(a, seed, out),
        Command::Params(a) => params(a, out),
    }
}

/// Runs `body` against the file at `path`, or against `fallback` when absent.
fn with_output(path: Option<&Path>, fallback: &mut dyn Write, body: impl FnOnce(&mut dyn Write) -> CmdResult) -> CmdResult {
    match path {
        Some(p) => {
            let mut w = BufWriter::new(File::create(p).map_err(|e| Failure::Data(format!("{}: {e}", p.display())))?);
            body(&mut w)?;
            w.flush()?;
            Ok(())
        }
        None => body(fallback),
    }
}

fn surface(a: &SurfaceArgs, out: &mut dyn Write) -> CmdResult {
    let points = surface_grid(a.mu, a.d, &a.region.config()?)?;
    with_output(a.out.as_deref(), out, |w| Ok(write_surface_csv(&points, w)?))
}

fn stats(a: &StatsArgs, out: &mut dyn Write) -> CmdResult {
    let cfg = a.region.config()?;
    let x: Tensor64 = load_tensor(&a.input)?;
    let st = channel_stats(&x);
    with_output(a.out.as_deref(), out, |w| {
        writeln!(w, "batch,channel,mu,m,d,phi,label")?;
        for r in st.rows() {
            let label = cfg.classify(r.mu, r.d, r.phi);
            writeln!(w, "{},{},{},{},{},{},{label}", r.batch, r.channel, r.mu, r.m, r.d, r.phi)?;
        }
        Ok(())
    })
}

fn write_cases(cases: &[CaseResult], w: &mut dyn Write) -> std::io::Result<()> {
    writeln!(w, "case,max_rel_err,worst_index,analytical,numerical,redraws,pass")?;
    for c in cases {
        let r = &c.report;
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            c.name, r.max_rel_err, r.worst_index, r.analytical, r.numerical, c.redraws, r.pass
        )?;
    }
    Ok(())
}

fn gradcheck(a: &GradcheckArgs, seed: u64, out: &mut dyn Write) -> CmdResult {
    if a.configs == 0 {
        return Err(Failure::Usage("--configs must be at least 1".into()));
    }
    let cases = gradient_suite(seed, a.configs, a.step, a.tol)?;
    if let Some(p) = &a.out {
        with_output(Some(p), out, |w| Ok(write_cases(&cases, w)?))?;
    }
    let failed: Vec<&CaseResult> = cases.iter().filter(|c| !c.report.pass).collect();
    let worst = cases.iter().map(|c| c.report.max_rel_err).fold(0.0, f64::max);
    writeln!(out, "cases={} failed={} worst_rel_err={worst:e}", cases.len(), failed.len())?;
    for c in &failed {
        writeln!(out, "FAIL {} rel_err={:e} at {}", c.name, c.report.max_rel_err, c.report.worst_index)?;
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Data(format!("{} gradient checks above tolerance {}", failed.len(), a.tol)))
    }
}

fn gen_data(a: &GenDataArgs, seed: u64, out: &mut dyn Write) -> CmdResult {
    let samples = gen_dataset::<f64>(seed, a.count)?;
    save_dataset(&samples, &a.out)?;
    writeln!(out, "wrote {} samples to {}", samples.len(), a.out.display())?;
    Ok(())
}

fn datasets(a: &DataArgs, seed: u64) -> Result<(Vec<SceneSample<f64>>, Vec<SceneSample<f64>>), Failure> {
    let data = match &a.data {
        Some(dir) => load_dataset(dir)?,
        None => gen_dataset(seed, a.samples)?,
    };
    let val = gen_dataset(validation_seed(seed), a.val_samples)?;
    Ok((data, val))
}

fn train_cmd(a: &TrainArgs, seed: u64, out: &mut dyn Write, err: &mut dyn Write) -> CmdResult {
    let cfg = a.model.config()?;
    let (data, val) = datasets(&a.data, seed)?;
    let outcome = train(&cfg, &data, &val, &a.optim.config(seed))?;
    let m = &outcome.metrics;
    for r in &m.records {
        writeln!(err, "epoch {:>3}  loss {:.4}  train {:.3}  val {:.3}", r.epoch, r.loss, r.train_acc, r.val_acc)?;
    }
    if let Some(p) = &a.metrics {
        with_output(Some(p), out, |w| Ok(m.write_csv(w)?))?;
    }
    if let Some(dir) = &a.save {
        outcome.model.save(dir)?;
    }
    let (first, last) = (m.initial(), m.last());
    writeln!(
        out,
        "initial_loss={} final_loss={} val_acc={} config={}",
        first.loss, last.loss, last.val_acc, m.config_digest
    )?;
    Ok(())
}

fn eval_cmd(a: &EvalArgs, seed: u64, out: &mut dyn Write) -> CmdResult {
    let model: ToyModel<f64> = ToyModel::load(&a.model)?;
    let data = match &a.data {
        Some(dir) => load_dataset(dir)?,
        None => gen_dataset(validation_seed(seed), a.samples)?,
    };
    let report = evaluate(&model, &data)?;
    if let Some(p) = &a.confusion {
        with_output(Some(p), out, |w| Ok(report.write_confusion_csv(w)?))?;
    }
    writeln!(out, "accuracy={} loss={}", report.accuracy, report.loss)?;
    Ok(())
}

fn ablate_cmd(a: &AblateArgs, seed: u64, out: &mut dyn Write) -> CmdResult {
    let (data, val) = datasets(&a.data, seed)?;
    let rows = ablate(a.axis, &a.values, &ToyConfig::default(), &data, &val, &a.optim.config(seed))?;
    with_output(a.out.as_deref(), out, |w| Ok(write_ablation_csv(a.axis, &rows, w)?))
}

fn params(a: &ParamsArgs, out: &mut dyn Write) -> CmdResult {
    if a.channels < 2 || a.bottlenecks == 0 || a.groups < 2 {
        return Err(Failure::Usage("need --channels ≥ 2, --bottlenecks ≥ 1 and --groups ≥ 2".into()));
    }
    let p = added_param_count(a.channels, a.bottlenecks, a.groups);
    writeln!(out, "dsg={} msg={}", p.dsg, p.msg)?;
    Ok(())
}
