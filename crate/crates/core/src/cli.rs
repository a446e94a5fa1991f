//! Config-driven batch commands: `synth`, `train`, `eval`, `noise-sweep`,
//! `angle-curve` and `ablate`.
//!
//! Every command writes its resolved configuration to `<out>/config.json`
//! before doing any work; running again with `--config <out>/config.json`
//! reproduces the outputs byte for byte.

use std::collections::{BTreeMap, HashMap};
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::augment::{AugmentPolicy, DEFAULT_PERSPECTIVE_MAGNITUDE};
use crate::baselines::{
    knn_classify, HistogramClassifier, HistogramMetric, KeypointClassifier, KeypointConfig,
    LinearClassifierConfig, OvoClassifier,
};
use crate::dataset::{
    apply_mask, composite_on_background, load_dataset, load_images, make_leave_sequence_out_split,
    make_one_shot_split, DatasetSplit, ImageSample, PoseLabel,
};
use crate::error::{Error, Result};
use crate::evalkit::{
    angle_bins, convergence_compare, evaluate, noise_sweep, read_report, write_curve_csv,
    write_report, EvaluationReport, DEFAULT_BIN_WIDTH_DEG,
};
use crate::network::{load_checkpoint, ArchConfig, LearningSchedule, Network, CONV_LAYERS};
use crate::pipeline::{
    self, random_patch, EvalTarget, Labeling, PipelineResult, StageOutcome, StagePlan,
};
use crate::seed::{self, derive_seed};
use crate::synth::{self, SynthConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

pub const CONFIG_ECHO: &str = "config.json";

#[derive(Debug, Parser)]
#[command(
    name = "instarec",
    version,
    about = "Multi-stage pre-training for one-shot instance recognition"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// JSON experiment config; missing fields take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Master seed; overrides the config value.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker thread cap. Results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic turntable dataset into `--out`.
    Synth,
    /// Run the configured stages and write checkpoints and traces.
    Train,
    /// One-shot novel-view evaluation of a checkpoint or baseline.
    Eval(EvalArgs),
    /// Accuracy under bounding-box noise.
    NoiseSweep {
        #[command(flatten)]
        eval: EvalArgs,
        /// Comma-separated noise levels.
        #[arg(long, value_delimiter = ',')]
        levels: Option<Vec<f64>>,
    },
    /// Re-bin an existing report by azimuth difference.
    AngleCurve {
        /// Report path, with or without the `.json` extension.
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        bin_width: Option<f64>,
    },
    /// Run a family of pipeline variants and tabulate them.
    Ablate {
        #[arg(long, value_enum)]
        kind: Option<AblationKind>,
    },
}

#[derive(Debug, Clone, Default, Args)]
pub struct EvalArgs {
    #[arg(long, value_enum)]
    pub classifier: Option<ClassifierKind>,
    #[arg(long, value_enum)]
    pub metric: Option<MetricArg>,
    /// Keypoint ratio-test threshold.
    #[arg(long)]
    pub ratio: Option<f64>,
    #[arg(long, conflicts_with = "no_ransac")]
    pub ransac: bool,
    #[arg(long)]
    pub no_ransac: bool,
    /// Embedding layer for `knn` / `linear`.
    #[arg(long)]
    pub layer: Option<String>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub test_background: Option<TestBackground>,
    #[arg(long)]
    pub bin_width: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MetricArg {
    Intersection,
    Correlation,
    ChiSquared,
    Bhattacharyya,
}

impl From<MetricArg> for HistogramMetric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::Intersection => HistogramMetric::Intersection,
            MetricArg::Correlation => HistogramMetric::Correlation,
            MetricArg::ChiSquared => HistogramMetric::ChiSquared,
            MetricArg::Bhattacharyya => HistogramMetric::Bhattacharyya,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierKind {
    #[default]
    Network,
    Histogram,
    Keypoints,
    Knn,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum, Default)]
#[serde(rename_all = "snake_case")]
pub enum TestBackground {
    /// Mask-segmented objects on black.
    #[default]
    None,
    /// Objects composited onto held-out background scenes.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum, Default)]
#[serde(rename_all = "snake_case")]
pub enum AblationKind {
    #[default]
    Freeze,
    Labeling,
    Background,
    Perspective,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    #[default]
    Classlevel,
    Multiview,
    Singleview,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SplitConfig {
    /// Every sample is a training sample; no test set.
    #[default]
    All,
    OneShot {
        train_elevation: f64,
        test_elevation: f64,
    },
    LeaveSequenceOut,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundMode {
    /// Images as stored.
    #[default]
    None,
    /// Everything outside the mask painted black.
    Black,
    /// Composited onto random training backgrounds.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub root: PathBuf,
    pub classlevel: PathBuf,
    pub multiview: PathBuf,
    pub singleview: PathBuf,
    pub backgrounds_train: PathBuf,
    pub backgrounds_test: PathBuf,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data"),
            classlevel: synth::CLASSLEVEL_DIR.into(),
            multiview: synth::MULTIVIEW_DIR.into(),
            singleview: synth::SINGLEVIEW_DIR.into(),
            backgrounds_train: synth::BACKGROUND_TRAIN_DIR.into(),
            backgrounds_test: synth::BACKGROUND_TEST_DIR.into(),
        }
    }
}

impl DataConfig {
    pub fn path(&self, p: &Path) -> PathBuf {
        self.root.join(p)
    }

    fn dataset(&self, kind: DatasetKind) -> PathBuf {
        self.path(match kind {
            DatasetKind::Classlevel => &self.classlevel,
            DatasetKind::Multiview => &self.multiview,
            DatasetKind::Singleview => &self.singleview,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfig {
    pub name: String,
    pub dataset: DatasetKind,
    pub split: SplitConfig,
    pub labeling: Labeling,
    pub pose_bins: u32,
    pub freeze: Vec<String>,
    pub iterations: u64,
    /// Multiplier on the base/head rates 0.001/0.01.
    pub rate_scale: f64,
    /// Divide both rates by ten.
    pub fine_tune: bool,
    /// Replaces `iterations`, `rate_scale` and `fine_tune` when set.
    pub schedule: Option<LearningSchedule>,
    pub augment: AugmentPolicy,
    pub background: BackgroundMode,
    pub batch_size: usize,
    pub eval_every: u64,
    pub eval_on: EvalTarget,
    pub eval_limit: usize,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            name: "stage".into(),
            dataset: DatasetKind::Classlevel,
            split: SplitConfig::All,
            labeling: Labeling::Instance,
            pose_bins: 36,
            freeze: Vec::new(),
            iterations: 1000,
            rate_scale: 10.0,
            fine_tune: false,
            schedule: None,
            augment: AugmentPolicy::standard(),
            background: BackgroundMode::None,
            batch_size: pipeline::DEFAULT_BATCH_SIZE,
            eval_every: 0,
            eval_on: EvalTarget::None,
            eval_limit: 0,
        }
    }
}

impl StageConfig {
    pub fn schedule(&self) -> Result<LearningSchedule> {
        let s = match &self.schedule {
            Some(s) => s.clone(),
            None => {
                let s = LearningSchedule::scaled_recipe(self.iterations, self.rate_scale);
                if self.fine_tune {
                    s.fine_tune()
                } else {
                    s
                }
            }
        };
        s.validate()?;
        Ok(s)
    }
}

pub fn default_stages() -> Vec<StageConfig> {
    vec![
        StageConfig {
            name: "class".into(),
            labeling: Labeling::Category,
            ..StageConfig::default()
        },
        StageConfig {
            name: "multiview".into(),
            dataset: DatasetKind::Multiview,
            iterations: 800,
            background: BackgroundMode::Random,
            ..StageConfig::default()
        },
        StageConfig {
            name: "oneshot".into(),
            dataset: DatasetKind::Singleview,
            split: SplitConfig::OneShot {
                train_elevation: 30.0,
                test_elevation: 45.0,
            },
            freeze: CONV_LAYERS.iter().map(|s| s.to_string()).collect(),
            iterations: 300,
            fine_tune: true,
            eval_every: 25,
            eval_on: EvalTarget::Test,
            ..StageConfig::default()
        },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Base name of the report files.
    pub name: String,
    pub classifier: ClassifierKind,
    pub checkpoint: Option<PathBuf>,
    pub metric: HistogramMetric,
    pub keypoints: KeypointConfig,
    pub layer: String,
    pub linear: LinearClassifierConfig,
    pub train_elevation: f64,
    pub test_elevation: f64,
    pub test_background: TestBackground,
    pub bin_width: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            name: "eval".into(),
            classifier: ClassifierKind::Network,
            checkpoint: None,
            metric: HistogramMetric::Intersection,
            keypoints: KeypointConfig::default(),
            layer: "fc7".into(),
            linear: LinearClassifierConfig::default(),
            train_elevation: 30.0,
            test_elevation: 45.0,
            test_background: TestBackground::None,
            bin_width: DEFAULT_BIN_WIDTH_DEG,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub name: String,
    pub levels: Vec<f64>,
    /// Side of the square scene each query is composited into.
    pub canvas: u32,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            name: "noise".into(),
            levels: (0..=10).map(f64::from).collect(),
            canvas: 48,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    pub name: String,
    pub kind: AblationKind,
    /// Stage varied by the labeling and background ablations.
    pub stage: String,
    /// Stage whose freeze set and augmentation are varied.
    pub final_stage: String,
    /// Fraction of the final accuracy used as the convergence target.
    pub convergence_fraction: f64,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            name: "ablation".into(),
            kind: AblationKind::Freeze,
            stage: "multiview".into(),
            final_stage: "oneshot".into(),
            convergence_fraction: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub synth: SynthConfig,
    pub network: ArchConfig,
    pub stages: Vec<StageConfig>,
    pub eval: EvalConfig,
    pub noise: NoiseConfig,
    pub ablate: AblateConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            synth: SynthConfig::default(),
            network: ArchConfig::default(),
            stages: default_stages(),
            eval: EvalConfig::default(),
            noise: NoiseConfig::default(),
            ablate: AblateConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        let mut names = std::collections::BTreeSet::new();
        for s in &self.stages {
            if !names.insert(s.name.as_str()) {
                return Err(Error::Config(format!("duplicate stage name {:?}", s.name)));
            }
            if s.name.is_empty() || s.name.contains(['/', '\\']) {
                return Err(Error::Config(format!(
                    "stage name {:?} is not a plain file name",
                    s.name
                )));
            }
            s.schedule().map_err(config_error)?;
            s.augment.validate()?;
            if s.pose_bins == 0 || s.batch_size == 0 {
                return Err(Error::Config(format!(
                    "stage {}: pose_bins and batch_size must be >= 1",
                    s.name
                )));
            }
        }
        if !(self.eval.bin_width > 0.0) {
            return Err(Error::Config(format!(
                "bin_width {} must be positive",
                self.eval.bin_width
            )));
        }
        if self.noise.levels.iter().any(|n| !(*n >= 0.0)) {
            return Err(Error::Config("noise levels must be >= 0".into()));
        }
        if !(self.ablate.convergence_fraction > 0.0 && self.ablate.convergence_fraction <= 1.0) {
            return Err(Error::Config(
                "convergence_fraction must lie in (0, 1]".into(),
            ));
        }
        Ok(())
    }

    /// Seeds that would otherwise be free parameters follow the master.
    fn resolve_seeds(&mut self) {
        self.eval.keypoints.seed = derive_seed(self.seed, &["keypoints"]);
    }

    fn require_dir(&self, p: &Path) -> Result<PathBuf> {
        let full = self.data.path(p);
        if full.is_dir() {
            Ok(full)
        } else {
            Err(Error::Config(format!(
                "data directory {} does not exist",
                full.display()
            )))
        }
    }
}

fn config_error(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}

/// Exit code for an error: configuration problems are told apart from
/// failures while running.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

/// Parse arguments, run the command, and return the process exit code.
pub fn run_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match run(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let mut cfg = match &cli.common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.common.seed {
        cfg.seed = s;
    }
    if let Command::Eval(a) | Command::NoiseSweep { eval: a, .. } = &cli.command {
        apply_eval_args(&mut cfg.eval, a);
    }
    match &cli.command {
        Command::NoiseSweep {
            levels: Some(l), ..
        } => cfg.noise.levels = l.clone(),
        Command::AngleCurve {
            bin_width: Some(w), ..
        } => cfg.eval.bin_width = *w,
        Command::Ablate { kind: Some(k) } => cfg.ablate.kind = *k,
        _ => {}
    }
    cfg.resolve_seeds();
    cfg.validate()?;

    let out = &cli.common.out;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    echo_config(&cfg, out)?;

    let work = || match &cli.command {
        Command::Synth => cmd_synth(&cfg, out),
        Command::Train => cmd_train(&cfg, out).map(|_| ()),
        Command::Eval(_) => cmd_eval(&cfg, out).map(|_| ()),
        Command::NoiseSweep { .. } => cmd_noise_sweep(&cfg, out).map(|_| ()),
        Command::AngleCurve { report, .. } => cmd_angle_curve(&cfg, report, out).map(|_| ()),
        Command::Ablate { .. } => cmd_ablate(&cfg, out).map(|_| ()),
    };
    match cli.common.threads {
        Some(n) if n > 0 => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?
            .install(work),
        Some(_) => Err(Error::Config("--threads must be >= 1".into())),
        None => work(),
    }
}

fn apply_eval_args(e: &mut EvalConfig, a: &EvalArgs) {
    if let Some(c) = a.classifier {
        e.classifier = c;
    }
    if let Some(m) = a.metric {
        e.metric = m.into();
    }
    if let Some(r) = a.ratio {
        e.keypoints.ratio = r;
    }
    if a.ransac {
        e.keypoints.use_ransac = true;
    }
    if a.no_ransac {
        e.keypoints.use_ransac = false;
    }
    if let Some(l) = &a.layer {
        e.layer = l.clone();
    }
    if let Some(c) = &a.checkpoint {
        e.checkpoint = Some(c.clone());
    }
    if let Some(t) = a.test_background {
        e.test_background = t;
    }
    if let Some(w) = a.bin_width {
        e.bin_width = w;
    }
}

pub fn echo_config(cfg: &ExperimentConfig, out: &Path) -> Result<PathBuf> {
    let p = out.join(CONFIG_ECHO);
    let text = serde_json::to_string_pretty(cfg).expect("config serializes");
    std::fs::write(&p, text + "\n").map_err(|e| Error::io(&p, e))?;
    Ok(p)
}

pub fn cmd_synth(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let ds = synth::synthesize(&cfg.synth, cfg.seed)?;
    synth::write_synth(&ds, out)?;
    log::info!(
        "wrote {} class-level, {} multi-view and {} single-view images",
        ds.classlevel.len(),
        ds.multiview.len(),
        ds.singleview.len()
    );
    Ok(())
}

/// Datasets loaded once and shared by every stage and variant.
struct DataCache<'a> {
    cfg: &'a ExperimentConfig,
    sets: HashMap<DatasetKind, Arc<Vec<ImageSample>>>,
    backgrounds: HashMap<bool, Arc<Vec<RgbImage>>>,
}

impl<'a> DataCache<'a> {
    fn new(cfg: &'a ExperimentConfig) -> Self {
        Self {
            cfg,
            sets: HashMap::new(),
            backgrounds: HashMap::new(),
        }
    }

    fn samples(&mut self, kind: DatasetKind) -> Result<Arc<Vec<ImageSample>>> {
        if let Some(s) = self.sets.get(&kind) {
            return Ok(s.clone());
        }
        let p = self.cfg.data.dataset(kind);
        if !p.is_dir() {
            return Err(Error::Config(format!(
                "data directory {} does not exist",
                p.display()
            )));
        }
        let s = Arc::new(load_dataset(&p)?);
        self.sets.insert(kind, s.clone());
        Ok(s)
    }

    fn backgrounds(&mut self, test: bool) -> Result<Arc<Vec<RgbImage>>> {
        if let Some(b) = self.backgrounds.get(&test) {
            return Ok(b.clone());
        }
        let d = &self.cfg.data;
        let dir = self.cfg.require_dir(if test {
            &d.backgrounds_test
        } else {
            &d.backgrounds_train
        })?;
        let b = load_images(&dir)?;
        if b.is_empty() {
            return Err(Error::Config(format!(
                "no backgrounds under {}",
                dir.display()
            )));
        }
        let b = Arc::new(b);
        self.backgrounds.insert(test, b.clone());
        Ok(b)
    }

    fn split(&mut self, kind: DatasetKind, split: SplitConfig) -> Result<DatasetSplit> {
        let samples = self.samples(kind)?;
        match split {
            SplitConfig::All => Ok(DatasetSplit {
                num_classes: samples
                    .iter()
                    .map(|s| s.instance_id as usize + 1)
                    .max()
                    .unwrap_or(0),
                train: samples.to_vec(),
                test: Vec::new(),
            }),
            SplitConfig::OneShot {
                train_elevation,
                test_elevation,
            } => make_one_shot_split(&samples, train_elevation, test_elevation),
            SplitConfig::LeaveSequenceOut => make_leave_sequence_out_split(&samples),
        }
    }

    fn plan(&mut self, stage: &StageConfig) -> Result<StagePlan> {
        let split = self.split(stage.dataset, stage.split)?;
        let pool = match stage.background {
            BackgroundMode::Random => Some(self.backgrounds(false)?),
            _ => None,
        };
        stage.plan(split, pool, self.cfg.seed)
    }
}

impl StageConfig {
    /// Training plan on `split`; `pool` is used only in random-background
    /// mode. The stage seed is derived from `master_seed` and the name.
    pub fn plan(
        &self,
        mut split: DatasetSplit,
        pool: Option<Arc<Vec<RgbImage>>>,
        master_seed: u64,
    ) -> Result<StagePlan> {
        let pool = match self.background {
            BackgroundMode::None => None,
            BackgroundMode::Black => {
                split.train = split
                    .train
                    .iter()
                    .map(|s| apply_mask(s, Rgb([0, 0, 0])))
                    .collect::<Result<_>>()?;
                None
            }
            BackgroundMode::Random => Some(pool.ok_or_else(|| {
                Error::Config(format!(
                    "stage {}: random background needs a background pool",
                    self.name
                ))
            })?),
        };
        let seed_v = derive_seed(master_seed, &["stage", &self.name]);
        let mut plan = StagePlan::new(&self.name, split, self.schedule()?, seed_v);
        plan.labeling = self.labeling;
        plan.pose_bins = self.pose_bins;
        plan.freeze = self.freeze.clone();
        plan.augment_policy = self.augment.clone();
        plan.background_pool = pool;
        plan.batch_size = self.batch_size;
        plan.eval_every = self.eval_every;
        plan.eval_on = self.eval_on;
        plan.eval_limit = self.eval_limit;
        Ok(plan)
    }
}

fn initial_network(cfg: &ExperimentConfig) -> Result<Network<f32>> {
    cfg.network
        .build(2, &mut seed::rng_from(cfg.seed, &["init"]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub stages: Vec<StageSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub name: String,
    pub iterations: u64,
    pub final_accuracy: Option<f64>,
    pub checksum: String,
}

fn summarize(stages: &[StageOutcome]) -> TrainSummary {
    TrainSummary {
        stages: stages
            .iter()
            .map(|s| StageSummary {
                name: s.name.clone(),
                iterations: s.schedule.stop_at_iteration,
                final_accuracy: s.trace.final_accuracy(),
                checksum: format!("{:016x}", s.checkpoint.checksum(&[])),
            })
            .collect(),
    }
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(v).expect("value serializes");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn cmd_train(cfg: &ExperimentConfig, out: &Path) -> Result<PipelineResult> {
    if cfg.stages.is_empty() {
        return Err(Error::Config("no stages configured".into()));
    }
    let mut data = DataCache::new(cfg);
    let plans: Vec<StagePlan> = cfg
        .stages
        .iter()
        .map(|s| data.plan(s))
        .collect::<Result<_>>()?;
    let result = pipeline::run_multistage(&plans, initial_network(cfg)?)?;
    result.write(out)?;
    write_json(&out.join("train_summary.json"), &summarize(&result.stages))?;
    Ok(result)
}

enum Classifier {
    Network(Network<f32>),
    Histogram(HistogramClassifier),
    Keypoints(KeypointClassifier),
    Knn {
        net: Network<f32>,
        layer: String,
        gallery: Vec<(Vec<f32>, u32)>,
    },
    Linear {
        net: Network<f32>,
        layer: String,
        model: OvoClassifier,
    },
}

impl Classifier {
    fn build(cfg: &EvalConfig, gallery: &[ImageSample], num_classes: usize) -> Result<Self> {
        let checkpoint = || -> Result<Network<f32>> {
            let p = cfg.checkpoint.as_ref().ok_or_else(|| {
                Error::Config(format!(
                    "classifier {:?} needs eval.checkpoint",
                    cfg.classifier
                ))
            })?;
            if !p.is_file() {
                return Err(Error::Config(format!(
                    "checkpoint {} does not exist",
                    p.display()
                )));
            }
            Ok(load_checkpoint(p, None)?.network)
        };
        let labeled = |net: &Network<f32>| -> Result<Vec<(Vec<f32>, u32)>> {
            let e = pipeline::embed(net, gallery, &cfg.layer)?;
            Ok(e.into_iter()
                .zip(gallery.iter().map(|s| s.instance_id))
                .collect())
        };
        Ok(match cfg.classifier {
            ClassifierKind::Network => {
                let net = checkpoint()?;
                if net.num_classes() != num_classes {
                    return Err(Error::Config(format!(
                        "checkpoint head has {} classes but the one-shot set has {num_classes}",
                        net.num_classes()
                    )));
                }
                Classifier::Network(net)
            }
            ClassifierKind::Histogram => {
                Classifier::Histogram(HistogramClassifier::new(gallery, cfg.metric)?)
            }
            ClassifierKind::Keypoints => {
                Classifier::Keypoints(KeypointClassifier::new(gallery, cfg.keypoints)?)
            }
            ClassifierKind::Knn => {
                let net = checkpoint()?;
                let gallery = labeled(&net)?;
                Classifier::Knn {
                    net,
                    layer: cfg.layer.clone(),
                    gallery,
                }
            }
            ClassifierKind::Linear => {
                let net = checkpoint()?;
                let model = OvoClassifier::train(&labeled(&net)?, cfg.linear)?;
                Classifier::Linear {
                    net,
                    layer: cfg.layer.clone(),
                    model,
                }
            }
        })
    }

    fn classify(&self, s: &ImageSample) -> Result<u32> {
        let one = std::slice::from_ref(s);
        match self {
            Classifier::Network(net) => Ok(pipeline::predict(net, one)?[0]),
            Classifier::Histogram(h) => h.classify(s),
            Classifier::Keypoints(k) => k.classify(s),
            Classifier::Knn {
                net,
                layer,
                gallery,
            } => knn_classify(&pipeline::embed(net, one, layer)?[0], gallery),
            Classifier::Linear { net, layer, model } => {
                model.classify(&pipeline::embed(net, one, layer)?[0])
            }
        }
    }
}

/// Composite every test query onto a held-out background patch.
pub fn composite_queries(
    queries: &[ImageSample],
    backgrounds: &[RgbImage],
    seed_v: u64,
) -> Result<Vec<ImageSample>> {
    if backgrounds.is_empty() {
        return Err(Error::invalid("no test backgrounds"));
    }
    queries
        .iter()
        .enumerate()
        .map(|(i, q)| {
            let mut rng = seed::rng_from(seed_v, &["test-background", &i.to_string()]);
            let bg = &backgrounds[i % backgrounds.len()];
            let (w, h) = q.dimensions();
            let patch = random_patch(bg, w, h, &mut rng);
            composite_on_background(q, &patch, &mut rng)
        })
        .collect()
}

fn one_shot_split(cfg: &ExperimentConfig, data: &mut DataCache) -> Result<DatasetSplit> {
    let mut split = data.split(
        DatasetKind::Singleview,
        SplitConfig::OneShot {
            train_elevation: cfg.eval.train_elevation,
            test_elevation: cfg.eval.test_elevation,
        },
    )?;
    if cfg.eval.test_background == TestBackground::Random {
        let bgs = data.backgrounds(true)?;
        split.test = composite_queries(&split.test, &bgs, derive_seed(cfg.seed, &["eval"]))?;
    }
    Ok(split)
}

fn report_config(cfg: &ExperimentConfig) -> serde_json::Value {
    serde_json::to_value(cfg).expect("config serializes")
}

pub fn cmd_eval(cfg: &ExperimentConfig, out: &Path) -> Result<EvaluationReport> {
    let mut data = DataCache::new(cfg);
    let split = one_shot_split(cfg, &mut data)?;
    let clf = Classifier::build(&cfg.eval, &split.train, split.num_classes)?;
    let mut report = evaluate(&cfg.eval.name, |s| clf.classify(s), &split);
    report.angle_curve = Some(angle_bins(&report.records, cfg.eval.bin_width)?);
    report.config = report_config(cfg);
    report.seeds.insert("master".into(), cfg.seed);
    report
        .seeds
        .insert("eval".into(), derive_seed(cfg.seed, &["eval"]));
    write_report(&report, &out.join(&cfg.eval.name))?;
    log::info!(
        "{}: accuracy {:?}",
        cfg.eval.name,
        report.aggregates.accuracy
    );
    Ok(report)
}

pub fn cmd_noise_sweep(cfg: &ExperimentConfig, out: &Path) -> Result<EvaluationReport> {
    let mut data = DataCache::new(cfg);
    let split = data.split(
        DatasetKind::Singleview,
        SplitConfig::OneShot {
            train_elevation: cfg.eval.train_elevation,
            test_elevation: cfg.eval.test_elevation,
        },
    )?;
    let clf = Classifier::build(&cfg.eval, &split.train, split.num_classes)?;
    let bgs = data.backgrounds(true)?;
    let scene_seed = derive_seed(cfg.seed, &["noise-scenes"]);
    let scenes = synth::noise_scenes(&split.test, &bgs, cfg.noise.canvas, scene_seed)?;
    let (w, h) = split
        .test
        .first()
        .map(|s| s.dimensions())
        .unwrap_or((32, 32));
    let pose = PoseLabel::new(0.0, 0.0)?;
    let as_sample = |img: &RgbImage| ImageSample {
        pixels: img.clone(),
        mask: None,
        pose,
        instance_id: 0,
        category_id: 0,
        category: String::new(),
        textured: false,
    };
    let sweep_seed = derive_seed(cfg.seed, &["noise-sweep"]);
    let curve = noise_sweep(
        |img| clf.classify(&as_sample(img)),
        &scenes,
        &cfg.noise.levels,
        sweep_seed,
        (w, h),
    )?;
    let mut report = EvaluationReport::new(&cfg.noise.name, Vec::new(), Vec::new());
    report.noise_curve = Some(curve);
    report.config = report_config(cfg);
    report.seeds.insert("master".into(), cfg.seed);
    report.seeds.insert("scenes".into(), scene_seed);
    report.seeds.insert("sweep".into(), sweep_seed);
    write_report(&report, &out.join(&cfg.noise.name))?;
    Ok(report)
}

pub fn cmd_angle_curve(cfg: &ExperimentConfig, report: &Path, out: &Path) -> Result<PathBuf> {
    let base = if report.extension().is_some_and(|e| e == "json") {
        report.with_extension("")
    } else {
        report.to_path_buf()
    };
    if !base.with_extension("json").is_file() {
        return Err(Error::Config(format!(
            "report {} does not exist",
            base.display()
        )));
    }
    let rep = read_report(&base)?;
    let bins = angle_bins(&rep.records, cfg.eval.bin_width)?;
    let p = out.join(format!("{}_angle.csv", rep.name));
    write_curve_csv(&p, &bins)?;
    Ok(p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    /// One-shot accuracy on mask-segmented queries.
    pub accuracy: f64,
    /// One-shot accuracy on queries composited onto test backgrounds.
    pub composited_accuracy: Option<f64>,
    /// First evaluated iteration of the final stage reaching the
    /// convergence fraction of its own final accuracy.
    pub convergence_iteration: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub kind: AblationKind,
    pub rows: Vec<AblationRow>,
}

fn find_stage<'s>(stages: &'s mut [StageConfig], name: &str) -> Result<&'s mut StageConfig> {
    stages
        .iter_mut()
        .find(|s| s.name == name)
        .ok_or_else(|| Error::Config(format!("no stage named {name:?}")))
}

/// Stage lists for each variant of `kind`.
pub fn ablation_variants(cfg: &ExperimentConfig) -> Result<Vec<(String, Vec<StageConfig>)>> {
    let a = &cfg.ablate;
    let base = cfg.stages.clone();
    let variant = |name: &str,
                   f: &dyn Fn(&mut Vec<StageConfig>) -> Result<()>|
     -> Result<(String, Vec<StageConfig>)> {
        let mut s = base.clone();
        f(&mut s)?;
        Ok((name.to_string(), s))
    };
    let body: Vec<String> = cfg
        .network
        .layer_specs(2)
        .iter()
        .filter(|l| l.kind.has_params())
        .map(|l| l.name.clone())
        .collect();
    let body: Vec<String> = body[..body.len() - 1].to_vec();
    let frozen_except = |keep: &[&str]| -> Vec<String> {
        body.iter()
            .filter(|n| !keep.contains(&n.as_str()))
            .cloned()
            .collect()
    };
    Ok(match a.kind {
        AblationKind::Freeze => {
            let sets = [
                ("all_frozen", frozen_except(&[])),
                ("fc7", frozen_except(&["fc7"])),
                ("fc6_fc7", frozen_except(&["fc6", "fc7"])),
                ("none_frozen", Vec::new()),
            ];
            sets.iter()
                .map(|(n, f)| {
                    variant(n, &|s| {
                        find_stage(s, &a.final_stage)?.freeze = f.clone();
                        Ok(())
                    })
                })
                .collect::<Result<_>>()?
        }
        AblationKind::Labeling => [
            ("instance", Labeling::Instance),
            ("pose_class", Labeling::PoseClass),
        ]
        .iter()
        .map(|(n, l)| {
            variant(n, &|s| {
                find_stage(s, &a.stage)?.labeling = *l;
                Ok(())
            })
        })
        .collect::<Result<_>>()?,
        AblationKind::Background => vec![
            variant("none", &|s| {
                find_stage(s, &a.stage)?;
                s.retain(|x| x.name != a.stage);
                Ok(())
            })?,
            variant("black", &|s| {
                find_stage(s, &a.stage)?.background = BackgroundMode::Black;
                Ok(())
            })?,
            variant("random", &|s| {
                find_stage(s, &a.stage)?.background = BackgroundMode::Random;
                Ok(())
            })?,
        ],
        AblationKind::Perspective => {
            let warp = |s: &mut Vec<StageConfig>| -> Result<()> {
                let f = find_stage(s, &a.final_stage)?;
                f.augment = f
                    .augment
                    .clone()
                    .with_perspective(DEFAULT_PERSPECTIVE_MAGNITUDE);
                Ok(())
            };
            vec![
                variant("multiview", &|_| Ok(()))?,
                variant("perspective_only", &|s| {
                    find_stage(s, &a.stage)?;
                    s.retain(|x| x.name != a.stage);
                    warp(s)
                })?,
                variant("multiview_perspective", &warp)?,
            ]
        }
    })
}

pub fn cmd_ablate(cfg: &ExperimentConfig, out: &Path) -> Result<AblationTable> {
    let variants = ablation_variants(cfg)?;
    let mut data = DataCache::new(cfg);
    let mut eval_cfg = cfg.clone();
    eval_cfg.eval.test_background = TestBackground::None;
    let plain = one_shot_split(&eval_cfg, &mut data)?;
    let composited = match data.backgrounds(true) {
        Ok(b) => Some(composite_queries(
            &plain.test,
            &b,
            derive_seed(cfg.seed, &["eval"]),
        )?),
        Err(_) => None,
    };
    // identical stage prefixes are trained once
    let mut memo: BTreeMap<String, (Network<f32>, StageOutcome)> = BTreeMap::new();
    let mut rows = Vec::new();
    let mut traces = Vec::new();
    for (name, stages) in &variants {
        let mut net = initial_network(cfg)?;
        let mut last = None;
        for k in 0..stages.len() {
            let key = serde_json::to_string(&stages[..=k]).expect("stages serialize");
            if let Some((n, o)) = memo.get(&key) {
                net = n.clone();
                last = Some(o.clone());
                continue;
            }
            let plan = data.plan(&stages[k])?;
            let (next, trace) = pipeline::run_stage(net, &plan)?;
            let outcome = StageOutcome {
                name: plan.name.clone(),
                trace,
                checkpoint: next.clone(),
                schedule: plan.schedule.clone(),
            };
            memo.insert(key, (next.clone(), outcome.clone()));
            net = next;
            last = Some(outcome);
        }
        let last = last.ok_or_else(|| Error::Config(format!("variant {name} has no stages")))?;
        let accuracy = pipeline::accuracy(&net, &plain.test)?;
        let composited_accuracy = composited
            .as_ref()
            .map(|c| pipeline::accuracy(&net, c))
            .transpose()?;
        let own = last.trace.final_accuracy().unwrap_or(accuracy);
        let series = last.trace.accuracy_series();
        let conv = convergence_compare(
            &[(name.clone(), series.clone())],
            cfg.ablate.convergence_fraction * own,
        )?;
        rows.push(AblationRow {
            variant: name.clone(),
            accuracy,
            composited_accuracy,
            convergence_iteration: conv[0].first_iteration,
        });
        traces.push((name.clone(), last.trace));
    }
    let table = AblationTable {
        kind: cfg.ablate.kind,
        rows,
    };
    write_json(&out.join(format!("{}.json", cfg.ablate.name)), &table)?;
    write_curve_csv(&out.join(format!("{}.csv", cfg.ablate.name)), &table.rows)?;
    for (name, t) in traces {
        let p = out.join(format!("{}_{name}_trace.csv", cfg.ablate.name));
        let f = std::fs::File::create(&p).map_err(|e| Error::io(&p, e))?;
        t.write_csv(std::io::BufWriter::new(f))?;
    }
    Ok(table)
}
