//! `pyrad` command line: train, score, eval, ablate, gradcheck, synth.
//!
//! Exit codes: 0 success, 1 internal error, 2 usage or configuration,
//! 3 numeric failure, 4 data or protocol error.

pub mod config;

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use pyrad_core::ablation::run_ablation;
use pyrad_core::checkpoint::{self, Checkpoint};
use pyrad_core::data::{list_images, load_image, make_synthetic_benchmark, DatasetKind, DatasetSpec, Split, SyntheticSpec};
use pyrad_core::gradcheck::{check_model_gradients, CompositeSetup};
use pyrad_core::loss::anomaly_score;
use pyrad_core::metrics::{roc_curve, REPORT_CSV_HEADER};
use pyrad_core::{build_model, evaluate, AblationAxis, Error, Mode, Model, OptimizerState, PerceptualNet};
use pyrad_tensor::gradcheck::{check_operators_with_fault, DEFAULT_TOLERANCE};
use pyrad_tensor::OpKind;

pub use config::{ConfigErrors, RunConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INTERNAL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_DATA: i32 = 4;

pub const CHECKPOINT_FILE: &str = "model.pyrd";
pub const LOSS_FILE: &str = "loss.csv";
/// Resolved config written next to the checkpoint; `score` and `eval`
/// rebuild the network from it.
pub const RUN_CONFIG_FILE: &str = "run.cfg";
pub const LOSS_CSV_HEADER: &str = "epoch,mean_loss,steps";
pub const ROC_CSV_HEADER: &str = "threshold,fpr,tpr";

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl From<ConfigErrors> for Failure {
    fn from(e: ConfigErrors) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => EXIT_USAGE,
            Failure::Core(e) if e.is_numeric() => EXIT_NUMERIC,
            Failure::Core(Error::Config(_) | Error::Load(_) | Error::Frozen(_)) => EXIT_USAGE,
            Failure::Core(Error::Dataset(_) | Error::Protocol(_) | Error::Format { .. } | Error::Io { .. }) => EXIT_DATA,
            Failure::Core(_) => EXIT_INTERNAL,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) => f.write_str(m),
            Failure::Core(e) => write!(f, "{e}"),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::Core(Error::Io { path: path.to_path_buf(), source: e })
}

fn out_failure(e: std::io::Error) -> Failure {
    io_failure(Path::new("<stdout>"), e)
}

#[derive(Parser, Debug)]
#[command(name = "pyrad", version, about = "Pyramidal reconstruction anomaly detector")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train on the configured data; writes model.pyrd, loss.csv and run.cfg.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (overrides `out_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides `seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print `path,score` for an image or every image of a directory.
    Score {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Evaluate on the test split below ROOT and print the report row.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Write the ROC curve as `threshold,fpr,tpr`.
        #[arg(long)]
        roc_out: Option<PathBuf>,
    },
    /// Train and evaluate every variant along one axis.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// `encoders` or `lambda`.
        #[arg(long)]
        axis: String,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Finite-difference check of every operator and of the full model.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write the synthetic benchmark as a directory dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = SyntheticSpec::default().seed)]
        seed: u64,
        #[arg(long, default_value_t = SyntheticSpec::default().size)]
        size: usize,
        #[arg(long, default_value_t = SyntheticSpec::default().n_train)]
        n_train: usize,
        #[arg(long, default_value_t = SyntheticSpec::default().n_test_normal)]
        n_test_normal: usize,
        #[arg(long, default_value_t = SyntheticSpec::default().n_test_anomalous)]
        n_test_anomalous: usize,
    },
}

/// Parse `args` (program name first) and run the command.
pub fn run<I, S>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let text = e.render().to_string();
            return if e.use_stderr() {
                let _ = write!(stderr, "{text}");
                EXIT_USAGE
            } else {
                let _ = write!(stdout, "{text}");
                EXIT_OK
            };
        }
    };
    let result = match cli.command {
        Command::Train { config, out, seed } => cmd_train(&config, out.as_deref(), seed, stderr),
        Command::Score { checkpoint, input } => cmd_score(&checkpoint, &input, stdout),
        Command::Eval { checkpoint, data, roc_out } => cmd_eval(&checkpoint, &data, roc_out.as_deref(), stdout),
        Command::Ablate { config, axis, seed } => cmd_ablate(&config, &axis, seed, stdout, stderr),
        Command::Gradcheck { seed } => cmd_gradcheck(seed, None, stdout),
        Command::Synth { out, seed, size, n_train, n_test_normal, n_test_anomalous } => {
            let spec = SyntheticSpec { seed, n_train, n_test_normal, n_test_anomalous, size };
            cmd_synth(&spec, &out, stderr)
        }
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(f) => {
            let _ = writeln!(stderr, "error: {f}");
            f.exit_code()
        }
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig, Failure> {
    let cfg = RunConfig::read(path)?;
    Ok(match seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn checkpoint_of(model: &Model<f32>, state: &OptimizerState<f32>) -> Checkpoint {
    let mut tensors = model.named_tensors();
    tensors.extend(state.to_tensors());
    Checkpoint { step: state.step, tensors }
}

pub fn cmd_train(config: &Path, out: Option<&Path>, seed: Option<u64>, log: &mut dyn Write) -> CmdResult {
    let cfg = load_config(config, seed)?;
    let Some(dir) = out.map(Path::to_path_buf).or_else(|| cfg.out_dir.clone()) else {
        return Err(Failure::Usage("no output directory: pass --out or set `out_dir`".into()));
    };
    std::fs::create_dir_all(&dir).map_err(|e| io_failure(&dir, e))?;
    let cfg_path = dir.join(RUN_CONFIG_FILE);
    std::fs::write(&cfg_path, cfg.to_text()).map_err(|e| io_failure(&cfg_path, e))?;

    let train_set = cfg.data.load(Split::Train)?;
    let loss_path = dir.join(LOSS_FILE);
    let mut loss_csv = BufWriter::new(File::create(&loss_path).map_err(|e| io_failure(&loss_path, e))?);
    writeln!(loss_csv, "{LOSS_CSV_HEADER}").map_err(|e| io_failure(&loss_path, e))?;
    let ckpt_path = dir.join(CHECKPOINT_FILE);
    let epochs = cfg.train.epochs;
    let mut sink = |rec: &pyrad_core::EpochRecord, model: &Model<f32>, state: &OptimizerState<f32>, save: bool| {
        writeln!(loss_csv, "{},{},{}", rec.epoch, rec.mean_loss, rec.steps)
            .and_then(|_| loss_csv.flush())
            .map_err(|e| Error::Io { path: loss_path.clone(), source: e })?;
        let _ = writeln!(log, "epoch {}/{epochs} loss {:.6}", rec.epoch, rec.mean_loss);
        if save {
            checkpoint::write(&ckpt_path, &checkpoint_of(model, state))?;
        }
        Ok(())
    };
    let run = cfg.experiment().fit(&train_set, &mut sink)?;
    checkpoint::write(&ckpt_path, &checkpoint_of(&run.model, &run.state))?;
    Ok(())
}

/// Rebuild the trained network from a checkpoint and its `run.cfg`.
/// Any problem with either file is a usage error.
pub fn load_trained(ckpt_path: &Path) -> Result<(RunConfig, Model<f32>, PerceptualNet<f32>), Failure> {
    let usage = |e: Error| Failure::Usage(format!("cannot load checkpoint: {e}"));
    let ckpt = checkpoint::read(ckpt_path).map_err(usage)?;
    let cfg_path = ckpt_path.with_file_name(RUN_CONFIG_FILE);
    if !cfg_path.is_file() {
        return Err(Failure::Usage(format!("{} has no {RUN_CONFIG_FILE} beside it", ckpt_path.display())));
    }
    let cfg = RunConfig::read(&cfg_path)?;
    let mut model = build_model(&cfg.model, cfg.seed, None).map_err(usage)?;
    model.load_tensors(&ckpt.tensors).map_err(usage)?;
    let net = cfg.loss.perceptual_net()?;
    Ok((cfg, model, net))
}

pub fn cmd_score(ckpt: &Path, input: &Path, stdout: &mut dyn Write) -> CmdResult {
    let (cfg, mut model, net) = load_trained(ckpt)?;
    let paths = if input.is_dir() { list_images(input)? } else { vec![input.to_path_buf()] };
    writeln!(stdout, "path,score").map_err(out_failure)?;
    for p in paths {
        let img = load_image(&p, Some(cfg.model.input_size))?;
        let score = anomaly_score(&mut model, &net, cfg.loss.lambda, &img)?;
        writeln!(stdout, "{},{score}", p.display()).map_err(out_failure)?;
    }
    Ok(())
}

pub fn cmd_eval(ckpt: &Path, data: &Path, roc_out: Option<&Path>, stdout: &mut dyn Write) -> CmdResult {
    let (cfg, mut model, net) = load_trained(ckpt)?;
    let spec = DatasetSpec {
        kind: if cfg.data.kind == DatasetKind::Idx { DatasetKind::Idx } else { DatasetKind::Directory },
        root: data.to_path_buf(),
        ..cfg.data.clone()
    };
    let test = spec.load(Split::Test)?;
    let report = evaluate(&mut model, &net, cfg.loss.lambda, &test)?;
    if let Some(path) = roc_out {
        let mut text = format!("{ROC_CSV_HEADER}\n");
        for p in roc_curve(&report.samples)? {
            text.push_str(&format!("{},{},{}\n", p.threshold, p.fpr, p.tpr));
        }
        std::fs::write(path, text).map_err(|e| io_failure(path, e))?;
    }
    writeln!(stdout, "{REPORT_CSV_HEADER}").map_err(out_failure)?;
    writeln!(stdout, "{}", report.csv_row(&cfg.preset)).map_err(out_failure)?;
    Ok(())
}

pub fn cmd_ablate(config: &Path, axis: &str, seed: Option<u64>, stdout: &mut dyn Write, log: &mut dyn Write) -> CmdResult {
    let axis: AblationAxis = axis.parse().map_err(|e: Error| Failure::Usage(e.to_string()))?;
    let cfg = load_config(config, seed)?;
    let train_set = cfg.data.load(Split::Train)?;
    let test_set = cfg.data.load(Split::Test)?;
    let rows = run_ablation(&cfg.experiment(), axis, &train_set, &test_set, stdout)?;
    for r in &rows {
        if let Err(e) = &r.outcome {
            let _ = writeln!(log, "warning: {} failed: {e}", r.config);
        }
    }
    Ok(())
}

/// Operator checks followed by the whole model in both modes, one
/// `check,max_rel_err,status` line each. `fault` breaks one backward
/// kernel to exercise the failure path.
pub fn cmd_gradcheck(seed: u64, fault: Option<OpKind>, stdout: &mut dyn Write) -> CmdResult {
    writeln!(stdout, "check,max_rel_err,status").map_err(out_failure)?;
    let mut failed = Vec::new();
    let mut line = |name: &str, err: f64, ok: bool| -> CmdResult {
        if !ok {
            failed.push(name.to_string());
        }
        writeln!(stdout, "{name},{err:.3e},{}", if ok { "pass" } else { "FAIL" }).map_err(out_failure)
    };
    for c in check_operators_with_fault(seed, fault).map_err(Error::from)? {
        line(&c.name, c.max_rel_err, c.passed)?;
    }
    let setup = CompositeSetup::default();
    for (name, mode) in [("model_eval", Mode::Eval), ("model_train", Mode::Train)] {
        let r = check_model_gradients(&setup, seed, mode)?;
        line(name, r.max_rel_err, r.max_rel_err <= DEFAULT_TOLERANCE)?;
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Core(Error::Numeric(format!("gradient check failed for {}", failed.join(", ")))))
    }
}

pub fn cmd_synth(spec: &SyntheticSpec, out: &Path, log: &mut dyn Write) -> CmdResult {
    let bench = make_synthetic_benchmark(spec)?;
    bench.write_layout(out)?;
    let _ = writeln!(
        log,
        "wrote {} train and {} test images below {}",
        bench.train.len(),
        bench.test.len(),
        out.display()
    );
    Ok(())
}
