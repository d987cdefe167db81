//! The four subcommands as library functions; `main` only parses flags.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use pseudoneg::losses::degenerate_audit;
use pseudoneg::par::Execution;
use pseudoneg::pose::{evaluate_pose_suite, CopeState, PoseModel, PoseRow};
use pseudoneg::rng::stream;
use pseudoneg::rot3::{angle_chi_square, sample_uniform_quaternion, ChiSquareSummary, PointCloud, UnitQuaternion};
use pseudoneg::trainer::{
    collapse_report, config_digest, generate_dataset, hex, Checkpoint, EpochMetrics, Model, SyntheticShapeSpec,
    Trainer,
};

use crate::experiment::ExperimentConfig;
use crate::CliError;

pub const CONFIG_FILE: &str = "config.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const POSE_FILE: &str = "pose_errors.csv";
pub const AUDIT_FILE: &str = "collapse_audit.txt";
pub const QUATS_FILE: &str = "quats.csv";

/// Bins of the rotation-angle histogram behind the sampling check.
pub const CHI_SQUARE_BINS: usize = 20;
/// Tolerance of the exact checks on the degenerate configuration.
pub const EXACT_TOL: f64 = 1e-9;
/// A trained model must keep the repulsion term this far below its maximum.
pub const COLLAPSE_MARGIN: f64 = 0.1;

/// `#` lines opening every CSV output.
pub fn csv_preamble(digest: &str) -> String {
    format!(
        "# tool = pseudoneg {}\n# config_digest = {digest}\n",
        env!("CARGO_PKG_VERSION")
    )
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(io_err(path))
}

fn prepare_out(out: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out).map_err(io_err(out))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    if !path.exists() {
        return Err(CliError::Io {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint not found"),
        });
    }
    Ok(Checkpoint::load(path)?)
}

pub struct TrainOptions {
    pub config: ExperimentConfig,
    /// Whether `config` came from a file (resuming then requires it to
    /// match the checkpoint).
    pub config_given: bool,
    pub out: PathBuf,
    pub resume: Option<PathBuf>,
    pub quiet: bool,
    pub execution: Execution,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub metrics: Vec<EpochMetrics>,
    pub checkpoint: PathBuf,
}

/// Trains (or resumes) and writes the resolved config, the metrics CSV and
/// the checkpoint. On divergence the last good checkpoint is still written
/// before the error is returned.
pub fn train(opts: TrainOptions) -> Result<TrainOutcome, CliError> {
    prepare_out(&opts.out)?;
    let mut cfg = opts.config.clone();
    let mut trainer = match &opts.resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            let trainer = Trainer::from_checkpoint(&ckpt, opts.execution)?;
            if opts.config_given && trainer.config() != &cfg.train {
                return Err(CliError::Usage(format!(
                    "config training settings differ from checkpoint {} (digest {})",
                    path.display(),
                    hex(&config_digest(&ckpt.config_text))
                )));
            }
            cfg.train = trainer.config().clone();
            trainer
        }
        None => Trainer::new(cfg.train.clone(), opts.execution)?,
    };
    cfg.validate()?;
    let digest = cfg.digest();
    write_file(&opts.out.join(CONFIG_FILE), &cfg.to_text())?;

    let metrics_path = opts.out.join(METRICS_FILE);
    let append = opts.resume.is_some() && metrics_path.exists();
    let mut csv = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(&metrics_path)
        .map_err(io_err(&metrics_path))?;
    if !append {
        writeln!(csv, "{}{}", csv_preamble(&digest), EpochMetrics::CSV_HEADER).map_err(io_err(&metrics_path))?;
    }

    let ckpt_path = opts.out.join(CHECKPOINT_FILE);
    let total = cfg.train.total_epochs();
    let mut metrics = Vec::new();
    while !trainer.is_finished() {
        match trainer.run_epoch() {
            Ok(m) => {
                writeln!(csv, "{}", m.csv_row()).map_err(io_err(&metrics_path))?;
                if !opts.quiet {
                    eprintln!(
                        "epoch {}/{total} {} total={:.5} align={:.5} cope={:.5} unif={:.5} spread={:.5}",
                        m.epoch, m.phase, m.total, m.align, m.cope, m.unif, m.spread
                    );
                }
                metrics.push(m);
            }
            Err(e) => {
                trainer.checkpoint().save(&ckpt_path)?;
                return Err(CliError::Diverged {
                    source: e,
                    checkpoint: ckpt_path,
                });
            }
        }
    }
    csv.flush().map_err(io_err(&metrics_path))?;
    trainer.checkpoint().save(&ckpt_path)?;
    Ok(TrainOutcome {
        metrics,
        checkpoint: ckpt_path,
    })
}

/// Reads every `*.xyz` file of `dir` in name order.
pub fn read_dataset_dir(dir: &Path) -> Result<Vec<PointCloud>, CliError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "xyz"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Usage(format!("no .xyz files in {}", dir.display())));
    }
    paths
        .iter()
        .map(|p| PointCloud::read(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display()))))
        .collect()
}

/// Held-out clouds: same generator as training, different seed and count.
pub fn held_out_clouds(cfg: &ExperimentConfig) -> Result<Vec<PointCloud>, CliError> {
    let spec = SyntheticShapeSpec {
        dataset_seed: cfg.eval.eval_dataset_seed,
        instances: cfg.eval.eval_instances,
        ..cfg.train.dataset.clone()
    };
    Ok(generate_dataset(&spec)?)
}

pub struct EvalOptions {
    pub config: ExperimentConfig,
    pub checkpoint: PathBuf,
    pub dataset: Option<PathBuf>,
    pub out: PathBuf,
    pub execution: Execution,
}

/// Runs the pose suite on a trained checkpoint and writes the error table.
pub fn eval_pose(opts: EvalOptions) -> Result<Vec<PoseRow>, CliError> {
    let ckpt = load_checkpoint(&opts.checkpoint)?;
    let (train, model) = Model::from_checkpoint(&ckpt)?;
    let cfg = ExperimentConfig { train, ..opts.config };
    cfg.validate()?;
    let clouds = match &opts.dataset {
        Some(dir) => read_dataset_dir(dir)?,
        None => held_out_clouds(&cfg)?,
    };
    let rows = pose_table(&model, &cfg, &clouds, opts.execution)?;
    prepare_out(&opts.out)?;
    write_file(&opts.out.join(CONFIG_FILE), &cfg.to_text())?;
    let mut text = csv_preamble(&cfg.digest());
    text.push_str(PoseRow::CSV_HEADER);
    text.push('\n');
    for r in &rows {
        text.push_str(&r.csv_row());
        text.push('\n');
    }
    write_file(&opts.out.join(POSE_FILE), &text)?;
    Ok(rows)
}

pub fn pose_table(
    model: &Model,
    cfg: &ExperimentConfig,
    clouds: &[PointCloud],
    execution: Execution,
) -> Result<Vec<PoseRow>, CliError> {
    let pose_model = PoseModel {
        encoder: &model.encoder,
        encoder_cfg: &cfg.train.encoder,
        cope: CopeState {
            params: &model.cope,
            cfg: &cfg.train.cope,
        },
    };
    Ok(evaluate_pose_suite(&pose_model, clouds, &cfg.eval, &cfg.pose, execution)?)
}

#[derive(Debug, Clone, PartialEq)]
pub enum AuditTarget {
    Degenerate,
    Checkpoint(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuditReport {
    pub lines: Vec<String>,
    pub passed: bool,
}

impl AuditReport {
    fn check(&mut self, what: &str, ok: bool) {
        self.lines.push(format!("check {what}: {}", if ok { "PASS" } else { "FAIL" }));
        self.passed &= ok;
    }

    pub fn text(&self) -> String {
        let mut s = self.lines.join("\n");
        s.push('\n');
        s
    }
}

/// Degenerate-configuration audit, plus the trained-model audit when a
/// checkpoint is given. Uses `num_negatives` and `tau` from the config (or
/// the checkpoint's config).
pub fn collapse_audit(
    target: &AuditTarget,
    cfg: &ExperimentConfig,
    execution: Execution,
) -> Result<AuditReport, CliError> {
    let (cfg, model) = match target {
        AuditTarget::Degenerate => (cfg.clone(), None),
        AuditTarget::Checkpoint(path) => {
            let (train, model) = Model::from_checkpoint(&load_checkpoint(path)?)?;
            (ExperimentConfig { train, ..cfg.clone() }, Some(model))
        }
    };
    let loss = &cfg.train.loss;
    let mut report = AuditReport {
        lines: vec![
            format!("num_negatives = {}", loss.num_negatives),
            format!("tau = {}", loss.tau),
            format!("bound_log_m_plus_1 = {:.7}", loss.collapse_bound()),
            "[degenerate]".into(),
        ],
        passed: true,
    };
    let audit = degenerate_audit(16, 8, loss.num_negatives, loss.tau)?;
    for (name, v) in audit.sie.components() {
        report.lines.push(format!("sie.{name} = {v:e}"));
    }
    report.lines.push(format!("sie_loss = {:e}", audit.sie_total));
    report.lines.push(format!("cope_loss = {:.10}", audit.cope));
    report.check(&format!("sie_loss == 0 (tol {EXACT_TOL:e})"), audit.sie_total.abs() <= EXACT_TOL);
    report.check(
        &format!("cope_loss == log(M+1) (tol {EXACT_TOL:e})"),
        (audit.cope - audit.bound).abs() <= EXACT_TOL,
    );
    if let Some(model) = model {
        let clouds = held_out_clouds(&cfg)?;
        let r = collapse_report(&model, &cfg.train, &clouds, cfg.eval.eval_seed, execution)?;
        report.lines.push("[trained]".into());
        report.lines.push(format!("items = {}", r.items));
        report.lines.push(format!("align = {:.6}", r.align));
        report.lines.push(format!("cope_loss = {:.6}", r.cope));
        report.lines.push(format!("distance_below_bound = {:.6}", r.bound - r.cope));
        report.lines.push(format!("pseudo_negative_spread = {:.6}", r.spread));
        report.check(
            &format!("cope_loss < log(M+1) - {COLLAPSE_MARGIN}"),
            r.cope < r.bound - COLLAPSE_MARGIN,
        );
    }
    Ok(report)
}

/// Writes the audit report when an output directory is given.
pub fn write_audit(report: &AuditReport, out: &Path) -> Result<(), CliError> {
    prepare_out(out)?;
    write_file(&out.join(AUDIT_FILE), &report.text())
}

#[derive(Debug, Clone)]
pub struct QuatSample {
    pub quats: Vec<UnitQuaternion>,
    pub chi_square: ChiSquareSummary,
}

pub fn sample_quats(count: usize, seed: u64) -> Result<QuatSample, CliError> {
    if count == 0 {
        return Err(CliError::Usage("count must be >= 1".into()));
    }
    let mut rng = stream(seed, "sample-quats", &[]);
    let quats: Vec<UnitQuaternion> = (0..count).map(|_| sample_uniform_quaternion(&mut rng)).collect();
    let chi_square = angle_chi_square(&quats, CHI_SQUARE_BINS);
    Ok(QuatSample { quats, chi_square })
}

/// Writes `quats.csv` and a config snapshot; the trailing `#` line carries
/// the angle-distribution statistic.
pub fn write_quats(sample: &QuatSample, count: usize, seed: u64, out: &Path) -> Result<(), CliError> {
    prepare_out(out)?;
    let config = format!("count = {count}\nseed = {seed}\n");
    write_file(&out.join(CONFIG_FILE), &config)?;
    let mut text = csv_preamble(&hex(&config_digest(&config)));
    text.push_str("w,x,y,z\n");
    for q in &sample.quats {
        let [w, x, y, z] = q.to_array();
        text.push_str(&format!("{w},{x},{y},{z}\n"));
    }
    text.push_str(&chi_square_line(&sample.chi_square));
    text.push('\n');
    write_file(&out.join(QUATS_FILE), &text)
}

pub fn chi_square_line(c: &ChiSquareSummary) -> String {
    format!(
        "# chi_square statistic = {:.6} dof = {} p_value = {:.6}",
        c.statistic, c.dof, c.p_value
    )
}
