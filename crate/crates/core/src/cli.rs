//! The `poselift` command-line pipeline.
//!
//! Every subcommand works inside one output directory (`--out`, default
//! `runs`):
//!
//! | stage        | reads                          | writes                                        |
//! |--------------|--------------------------------|-----------------------------------------------|
//! | `gen`        | -                              | `dataset.jsonl`                               |
//! | `train-nf`   | `dataset.jsonl`                | `flow.ckpt`, `flow_trace.csv`                 |
//! | `train-lift` | `dataset.jsonl`, `flow.ckpt`   | `lifter.ckpt`, `lift_trace.csv`               |
//! | `train-reg`  | `dataset.jsonl`, `flow.ckpt`   | `regressor.ckpt`, `reg_trace.csv`, `features.bin` |
//! | `eval`       | dataset + model or predictions | `eval_<model>.csv`, `eval_<model>.json`       |
//!
//! Each of these also writes `<stage>.manifest.json` with the resolved
//! configuration, the seed and SHA-256 hashes of its inputs and outputs.
//! `project` and `lift` print one record's pose as JSON on stdout.
//!
//! Exit codes: 0 success, 1 usage or input error, 2 numerical failure.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{project, rotate_azimuth_about_root};
use crate::checkpoint::{file_hash, Checkpoint};
use crate::data::{generate, Dataset, SampleRecord, SyntheticConfig};
use crate::error::{Error, Result};
use crate::liftnet::{self, LiftTrainConfig, LiftTrainer, Lifter, LifterArch};
use crate::metrics::{EvalItem, EvalReport};
use crate::normflow::{pose_rows, FlowArch, FlowModel, FlowTrainConfig, FlowTrainer, DEFAULT_BLOCKS, DEFAULT_HIDDEN};
use crate::regnet::{
    self, Decoder, DecoderArch, FeatureFile, FeatureProvider, RegTrainConfig, RegTrainer, SyntheticFeatures,
};
use crate::skeleton::{Pose3D, Topology};

/// Environment variable naming the default `--config` file.
pub const CONFIG_ENV: &str = "POSELIFT_CONFIG";

pub const DATASET_FILE: &str = "dataset.jsonl";
pub const FLOW_FILE: &str = "flow.ckpt";
pub const LIFTER_FILE: &str = "lifter.ckpt";
pub const REGRESSOR_FILE: &str = "regressor.ckpt";
pub const FEATURES_FILE: &str = "features.bin";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub out: PathBuf,
    pub data: DataSection,
    pub flow: FlowSection,
    pub lift: LiftSection,
    pub reg: RegSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            out: PathBuf::from("runs"),
            data: DataSection::default(),
            flow: FlowSection::default(),
            lift: LiftSection::default(),
            reg: RegSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Trailing fraction of the dataset held out for evaluation.
    pub test_fraction: f64,
    pub synthetic: SyntheticConfig,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { test_fraction: 0.15, synthetic: SyntheticConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowSection {
    pub blocks: usize,
    pub hidden: usize,
    pub train: FlowTrainConfig,
}

impl Default for FlowSection {
    fn default() -> Self {
        Self { blocks: DEFAULT_BLOCKS, hidden: DEFAULT_HIDDEN, train: FlowTrainConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LiftSection {
    pub dim: usize,
    /// Depth of a zero output; the mean training subject distance when unset.
    pub depth_prior: Option<f64>,
    pub train: LiftTrainConfig,
}

impl Default for LiftSection {
    fn default() -> Self {
        Self { dim: liftnet::DEFAULT_DIM, depth_prior: None, train: LiftTrainConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegSection {
    /// Precomputed feature file; synthetic features are captured when unset.
    pub features: Option<PathBuf>,
    pub feature_width: usize,
    pub feature_noise: f64,
    pub feature_seed: u64,
    pub depth_prior: Option<f64>,
    pub train: RegTrainConfig,
}

impl Default for RegSection {
    fn default() -> Self {
        Self {
            features: None,
            feature_width: regnet::DEFAULT_FEATURE_WIDTH,
            feature_noise: 0.05,
            feature_seed: 0,
            depth_prior: None,
            train: RegTrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::invalid(format!("cannot serialize config: {e}")))
    }
}

#[derive(Debug, Parser)]
#[command(name = "poselift", version, about = "Perspective 2D-to-3D pose lifting pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long, env = CONFIG_ENV)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides `out` in the config).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct Training {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Model {
    Lift,
    Reg,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
        /// Number of records.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train the 2D pose flow prior.
    TrainNf(Training),
    /// Train the lifter (needs a flow).
    TrainLift(Training),
    /// Train the regressor head (needs a flow).
    TrainReg(Training),
    /// Score a model, or a predictions file, against ground truth.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "lift")]
        model: Model,
        /// Ground-truth dataset; defaults to the held-out part of the generated one.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Dataset whose `y_gt` poses are predictions, matched by id.
        #[arg(long)]
        pred: Option<PathBuf>,
    },
    /// Project one record's 3D pose through its camera.
    Project {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Record id; the first record when omitted.
        #[arg(long)]
        id: Option<u64>,
        /// Rotate the pose about the root by this azimuth (degrees) first.
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        azimuth: f64,
    },
    /// Lift one record's 2D pose with the trained lifter.
    Lift {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        id: Option<u64>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

/// Parses `args` (including the program name) and runs the command, writing
/// regular output to `out` and diagnostics to `err`. Returns the exit code.
pub fn run_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK { out.write_all(text.as_bytes()) } else { err.write_all(text.as_bytes()) };
            return code;
        }
    };
    match execute(cli.command, out) {
        Ok(()) => EXIT_OK,
        // Output closed early by the reader (e.g. `| head`).
        Err(Error::Io(e)) if e.kind() == std::io::ErrorKind::BrokenPipe => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            if e.is_numerical() {
                EXIT_NUMERICAL
            } else {
                EXIT_USAGE
            }
        }
    }
}

/// [`run_with`] on the process's stdout and stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run_with(args, &mut std::io::stdout(), &mut std::io::stderr())
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(o) = &common.out {
        cfg.out = o.clone();
    }
    Ok(cfg)
}

fn execute(cmd: Command, out: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Gen { common, seed, count } => {
            let mut cfg = resolve(&common)?;
            if let Some(s) = seed {
                cfg.data.synthetic.seed = s;
            }
            if let Some(c) = count {
                cfg.data.synthetic.count = c;
            }
            gen(&cfg, out)
        }
        Command::TrainNf(t) => {
            let mut cfg = resolve(&t.common)?;
            override_train(&mut cfg.flow.train.seed, &mut cfg.flow.train.epochs, &t);
            train_nf(&cfg, out)
        }
        Command::TrainLift(t) => {
            let mut cfg = resolve(&t.common)?;
            override_train(&mut cfg.lift.train.seed, &mut cfg.lift.train.epochs, &t);
            train_lift(&cfg, out)
        }
        Command::TrainReg(t) => {
            let mut cfg = resolve(&t.common)?;
            override_train(&mut cfg.reg.train.seed, &mut cfg.reg.train.epochs, &t);
            train_reg(&cfg, out)
        }
        Command::Eval { common, model, dataset, pred } => {
            eval(&resolve(&common)?, model, dataset.as_deref(), pred.as_deref(), out)
        }
        Command::Project { common, dataset, id, azimuth } => {
            let cfg = resolve(&common)?;
            let (record, _) = pick_record(&cfg, dataset.as_deref(), id)?;
            let topo = Topology::h36m();
            let pose = rotate_azimuth_about_root(&record.y_gt, azimuth.to_radians(), &topo)?;
            let x = project(&pose, &record.camera.intrinsics, &record.camera.extrinsics)?;
            print_pose(out, record.id, &topo, x.joints().map(|p| p.to_vec()))
        }
        Command::Lift { common, dataset, id, checkpoint } => {
            let cfg = resolve(&common)?;
            let (record, _) = pick_record(&cfg, dataset.as_deref(), id)?;
            let path = checkpoint.unwrap_or_else(|| cfg.out.join(LIFTER_FILE));
            let lifter = Lifter::from_checkpoint(&load_dependency(&path, "train-lift")?)?;
            let topo = Topology::h36m();
            let y = lifter.lift(&record.x_gt, &record.camera)?;
            print_pose(out, record.id, &topo, y.joints().map(|p| p.to_vec()))
        }
    }
}

fn override_train(seed: &mut u64, epochs: &mut usize, t: &Training) {
    if let Some(s) = t.seed {
        *seed = s;
    }
    if let Some(e) = t.epochs {
        *epochs = e;
    }
}

#[derive(Serialize)]
struct JointOut<'a> {
    name: &'a str,
    position: Vec<f64>,
}

#[derive(Serialize)]
struct PoseOut<'a> {
    id: u64,
    joints: Vec<JointOut<'a>>,
}

fn print_pose(out: &mut dyn Write, id: u64, topo: &Topology, joints: impl Iterator<Item = Vec<f64>>) -> Result<()> {
    let pose = PoseOut {
        id,
        joints: joints.enumerate().map(|(j, position)| JointOut { name: topo.joint_name(j), position }).collect(),
    };
    writeln!(out, "{}", serde_json::to_string_pretty(&pose)?)?;
    Ok(())
}

fn pick_record(cfg: &RunConfig, dataset: Option<&Path>, id: Option<u64>) -> Result<(SampleRecord, PathBuf)> {
    let path = dataset.map(Path::to_path_buf).unwrap_or_else(|| cfg.out.join(DATASET_FILE));
    let ds = load_dataset(&path)?;
    let record = match id {
        Some(id) => ds.records.into_iter().find(|r| r.id == id),
        None => ds.records.into_iter().next(),
    };
    let record = record.ok_or_else(|| {
        Error::invalid(format!("{}: no record {}", path.display(), id.map_or("at all".into(), |i| i.to_string())))
    })?;
    Ok((record, path))
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    if !path.exists() {
        return Err(Error::MissingDependency(format!("{} not found; run gen first", path.display())));
    }
    Dataset::load(path)
}

fn load_dependency(path: &Path, stage: &str) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::MissingDependency(format!("{} not found; run {stage} first", path.display())));
    }
    Checkpoint::load(path)
}

/// Training and held-out parts of the generated dataset.
fn split_dataset(cfg: &RunConfig) -> Result<(Dataset, Dataset, PathBuf)> {
    if !(0.0..1.0).contains(&cfg.data.test_fraction) {
        return Err(Error::invalid(format!("test_fraction {} must lie in [0, 1)", cfg.data.test_fraction)));
    }
    let path = cfg.out.join(DATASET_FILE);
    let ds = load_dataset(&path)?;
    let (train, test) = ds.split(cfg.data.test_fraction);
    if train.records.is_empty() {
        return Err(Error::invalid(format!("{} has no training records", path.display())));
    }
    Ok((train, test, path))
}

fn mean_subject_depth(records: &[SampleRecord]) -> f64 {
    records.iter().map(|r| r.camera.extrinsics.t[2]).sum::<f64>() / records.len() as f64
}

#[derive(Serialize)]
struct FileEntry {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    stage: &'a str,
    version: &'a str,
    seed: u64,
    config: &'a RunConfig,
    inputs: Vec<FileEntry>,
    outputs: Vec<FileEntry>,
}

/// Writes `<stage>.manifest.json`; file paths inside the output directory are
/// recorded relative to it so identical runs in different places match.
fn write_manifest(cfg: &RunConfig, stage: &str, seed: u64, inputs: &[&Path], outputs: &[&Path]) -> Result<PathBuf> {
    let entry = |p: &Path| -> Result<FileEntry> {
        let shown = p.strip_prefix(&cfg.out).unwrap_or(p);
        Ok(FileEntry { path: shown.display().to_string(), sha256: file_hash(p)? })
    };
    let manifest = Manifest {
        stage,
        version: env!("CARGO_PKG_VERSION"),
        seed,
        config: cfg,
        inputs: inputs.iter().map(|p| entry(p)).collect::<Result<_>>()?,
        outputs: outputs.iter().map(|p| entry(p)).collect::<Result<_>>()?,
    };
    let path = cfg.out.join(format!("{stage}.manifest.json"));
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(path)
}

fn gen(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    std::fs::create_dir_all(&cfg.out)?;
    let ds = generate(&cfg.data.synthetic)?;
    let path = cfg.out.join(DATASET_FILE);
    ds.save(&path)?;
    write_manifest(cfg, "gen", cfg.data.synthetic.seed, &[], &[&path])?;
    writeln!(out, "wrote {} records to {}", ds.records.len(), path.display())?;
    Ok(())
}

fn train_nf(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let (train, _, data_path) = split_dataset(cfg)?;
    let topo = Topology::h36m();
    let arch = FlowArch { blocks: cfg.flow.blocks, hidden: cfg.flow.hidden, ..FlowArch::for_topology(&topo) };
    let xs: Vec<_> = train.records.iter().map(|r| r.x_gt.clone()).collect();
    let mut trainer = FlowTrainer::new(FlowModel::new(arch, cfg.flow.train.seed)?, cfg.flow.train.clone());
    trainer.fit(&pose_rows(&xs))?;
    let ck = trainer.model.to_checkpoint()?.with_meta("trace", &trainer.trace)?;
    let ck_path = cfg.out.join(FLOW_FILE);
    ck.save(&ck_path)?;
    let mut csv = String::from("epoch,nll\n");
    for (e, nll) in trainer.trace.iter().enumerate() {
        let _ = writeln!(csv, "{e},{nll}");
    }
    let trace_path = cfg.out.join("flow_trace.csv");
    std::fs::write(&trace_path, csv)?;
    write_manifest(cfg, "train-nf", cfg.flow.train.seed, &[&data_path], &[&ck_path, &trace_path])?;
    writeln!(
        out,
        "flow: {} epochs, final NLL {:.4}",
        trainer.trace.len(),
        trainer.trace.last().copied().unwrap_or(f64::NAN)
    )?;
    Ok(())
}

fn load_flow(cfg: &RunConfig) -> Result<(FlowModel, PathBuf)> {
    let path = cfg.out.join(FLOW_FILE);
    Ok((FlowModel::from_checkpoint(&load_dependency(&path, "train-nf")?)?, path))
}

fn train_lift(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let (flow, flow_path) = load_flow(cfg)?;
    let (train, _, data_path) = split_dataset(cfg)?;
    let topo = Topology::h36m();
    let prior = cfg.lift.depth_prior.unwrap_or_else(|| mean_subject_depth(&train.records));
    let arch = LifterArch::new(topo.joint_count(), cfg.lift.dim, prior);
    let lifter = Lifter::new(arch, liftnet::fit_input_norm(&train.records)?, cfg.lift.train.seed)?;
    let mut trainer = LiftTrainer::new(lifter, &flow, topo, cfg.lift.train.clone());
    trainer.fit(&train.records)?;
    let ck_path = cfg.out.join(LIFTER_FILE);
    trainer.checkpoint()?.save(&ck_path)?;
    let mut csv = format!("epoch,total,{},clamped\n", liftnet::TERMS.join(","));
    for e in &trainer.trace {
        let terms: Vec<String> = e.terms.iter().map(f64::to_string).collect();
        let _ = writeln!(csv, "{},{},{},{}", e.epoch, e.total, terms.join(","), e.clamped);
    }
    let trace_path = cfg.out.join("lift_trace.csv");
    std::fs::write(&trace_path, csv)?;
    write_manifest(cfg, "train-lift", cfg.lift.train.seed, &[&data_path, &flow_path], &[&ck_path, &trace_path])?;
    if let (Some(first), Some(last)) = (trainer.trace.first(), trainer.trace.last()) {
        writeln!(out, "lifter: {} epochs, objective {:.4} -> {:.4}", trainer.trace.len(), first.total, last.total)?;
    }
    Ok(())
}

/// Feature source for the regressor: the configured file, or synthetic
/// features captured once into `features.bin` for reuse by `eval`.
fn reg_features(cfg: &RunConfig, records: &[SampleRecord], capture: bool) -> Result<(FeatureFile, PathBuf)> {
    if let Some(p) = &cfg.reg.features {
        return Ok((FeatureFile::load(p)?, p.clone()));
    }
    let path = cfg.out.join(FEATURES_FILE);
    if capture {
        let provider = SyntheticFeatures::new(
            cfg.reg.feature_width,
            Topology::h36m().joint_count(),
            cfg.reg.feature_noise,
            cfg.reg.feature_seed,
        )?;
        let file = FeatureFile::capture(&provider, records)?;
        file.save(&path)?;
        return Ok((file, path));
    }
    if !path.exists() {
        return Err(Error::MissingDependency(format!("{} not found; run train-reg first", path.display())));
    }
    Ok((FeatureFile::load(&path)?, path))
}

fn train_reg(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let (flow, flow_path) = load_flow(cfg)?;
    let (train, test, data_path) = split_dataset(cfg)?;
    let all: Vec<SampleRecord> = train.records.iter().chain(&test.records).cloned().collect();
    let (features, features_path) = reg_features(cfg, &all, true)?;
    let topo = Topology::h36m();
    let prior = cfg.reg.depth_prior.unwrap_or_else(|| mean_subject_depth(&train.records));
    let arch = DecoderArch::new(topo.joint_count(), features.width(), prior);
    let decoder = Decoder::new(arch, regnet::fit_input_norm(&features, &train.records)?, cfg.reg.train.seed)?;
    let mut trainer = RegTrainer::new(decoder, &flow, topo, cfg.reg.train.clone());
    trainer.fit(&features, &train.records)?;
    let ck_path = cfg.out.join(REGRESSOR_FILE);
    trainer.checkpoint()?.save(&ck_path)?;
    let mut csv = format!("epoch,total,{},joint_error\n", regnet::TERMS.join(","));
    for e in &trainer.trace {
        let terms: Vec<String> = e.terms.iter().map(f64::to_string).collect();
        let _ = writeln!(csv, "{},{},{},{}", e.epoch, e.total, terms.join(","), e.joint_error);
    }
    let trace_path = cfg.out.join("reg_trace.csv");
    std::fs::write(&trace_path, csv)?;
    let mut inputs: Vec<&Path> = vec![&data_path, &flow_path];
    let mut outputs: Vec<&Path> = vec![&ck_path, &trace_path];
    if cfg.reg.features.is_some() {
        inputs.push(&features_path);
    } else {
        outputs.push(&features_path);
    }
    write_manifest(cfg, "train-reg", cfg.reg.train.seed, &inputs, &outputs)?;
    if let (Some(first), Some(last)) = (trainer.trace.first(), trainer.trace.last()) {
        writeln!(
            out,
            "regressor: {} epochs, 2D error {:.5} -> {:.5}",
            trainer.trace.len(),
            first.joint_error,
            last.joint_error
        )?;
    }
    Ok(())
}

fn eval(cfg: &RunConfig, model: Model, dataset: Option<&Path>, pred: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    let (gt, gt_path) = match dataset {
        Some(p) => (load_dataset(p)?, p.to_path_buf()),
        None => {
            let (_, test, path) = split_dataset(cfg)?;
            (test, path)
        }
    };
    if gt.records.is_empty() {
        return Err(Error::invalid(format!("{} has no evaluation records", gt_path.display())));
    }
    let topo = Topology::h36m();
    let mut inputs: Vec<PathBuf> = vec![gt_path];
    let (name, preds): (&str, Vec<Pose3D>) = if let Some(p) = pred {
        let pd = load_dataset(p)?;
        inputs.push(p.to_path_buf());
        let by_id: std::collections::HashMap<u64, &Pose3D> = pd.records.iter().map(|r| (r.id, &r.y_gt)).collect();
        let preds = gt
            .records
            .iter()
            .map(|r| {
                by_id
                    .get(&r.id)
                    .map(|&y| y.clone())
                    .ok_or_else(|| Error::invalid(format!("{} has no prediction for record {}", p.display(), r.id)))
            })
            .collect::<Result<_>>()?;
        ("pred", preds)
    } else {
        match model {
            Model::Lift => {
                let path = cfg.out.join(LIFTER_FILE);
                let lifter = Lifter::from_checkpoint(&load_dependency(&path, "train-lift")?)?;
                inputs.push(path);
                let xs: Vec<_> = gt.records.iter().map(|r| r.x_gt.clone()).collect();
                let cams: Vec<_> = gt.records.iter().map(|r| r.camera).collect();
                ("lift", lifter.lift_batch(&xs, &cams)?)
            }
            Model::Reg => {
                let path = cfg.out.join(REGRESSOR_FILE);
                let decoder = Decoder::from_checkpoint(&load_dependency(&path, "train-reg")?)?;
                let (features, fpath) = reg_features(cfg, &gt.records, false)?;
                inputs.extend([path, fpath]);
                // The rotation drawn here only affects the unused rotated view.
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let outputs = decoder.predict(&features, &gt.records, &topo, &mut rng)?;
                ("reg", outputs.into_iter().map(|o| o.yhat).collect())
            }
        }
    };
    let items: Vec<EvalItem<'_>> = gt
        .records
        .iter()
        .zip(&preds)
        .map(|(r, p)| EvalItem { id: r.id, sequence: &r.sequence, pred: p, gt: &r.y_gt })
        .collect();
    let report = EvalReport::build(&items, &topo)?;
    std::fs::create_dir_all(&cfg.out)?;
    let csv_path = cfg.out.join(format!("eval_{name}.csv"));
    let json_path = cfg.out.join(format!("eval_{name}.json"));
    std::fs::write(&csv_path, report.to_csv())?;
    std::fs::write(&json_path, report.to_json()?)?;
    let input_refs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    write_manifest(cfg, &format!("eval-{name}"), 0, &input_refs, &[&csv_path, &json_path])?;
    let a = report.aggregate;
    writeln!(
        out,
        "{} samples: MPJPE {:.2} PA-MPJPE {:.2} N-MPJPE {:.2} N-PCK@150 {:.4} AUC {:.4}",
        report.count, a.mpjpe, a.pa_mpjpe, a.n_mpjpe, a.n_pck_150, a.auc
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_capture(args: &[&str]) -> (i32, String, String) {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let code = run_with(std::iter::once("poselift").chain(args.iter().copied()), &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn unknown_flag_is_a_usage_error() {
        let (code, _, err) = run_capture(&["gen", "--bogus"]);
        assert_eq!(code, EXIT_USAGE);
        assert!(err.contains("Usage"), "{err}");
    }

    #[test]
    fn help_succeeds() {
        let (code, out, _) = run_capture(&["--help"]);
        assert_eq!(code, EXIT_OK);
        assert!(out.contains("train-lift"));
    }

    #[test]
    fn missing_flow_names_the_stage_to_run() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().to_str().unwrap();
        let (code, _, err) = run_capture(&["train-lift", "--out", out]);
        assert_eq!(code, EXIT_USAGE);
        assert!(err.contains("run train-nf first"), "{err}");
        let (_, _, err) = run_capture(&["train-nf", "--out", out]);
        assert!(err.contains("run gen first"), "{err}");
    }

    #[test]
    fn default_config_roundtrips_through_toml() {
        let cfg = RunConfig::default();
        let back: RunConfig = toml::from_str(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_config_keeps_other_defaults() {
        let cfg: RunConfig = toml::from_str("[lift]\ndim = 64\n[lift.train]\nepochs = 3\n").unwrap();
        assert_eq!(cfg.lift.dim, 64);
        assert_eq!(cfg.lift.train.epochs, 3);
        assert_eq!(cfg.lift.train.batch, LiftTrainConfig::default().batch);
        assert_eq!(cfg.flow, FlowSection::default());
        assert!(toml::from_str::<RunConfig>("[lift]\nwidth = 3\n").is_err());
    }
}
