//! End-to-end runs: load or generate data, train (or load a checkpoint),
//! tune the feasibility threshold, evaluate, and write artifacts.
//!
//! Relative paths in a config file resolve against the file's directory. The
//! output directory resolves against `$COMPCOS_ARTIFACT_ROOT` when that is set.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embed::{ModelParams, PrimitiveTable};
use crate::error::{Error, Result};
use crate::eval::{evaluate_with, EvalReport, PrimitiveBias, ScoreMatrix};
use crate::feasibility::{feasibility_scores, hard_mask, tune_threshold, CandidatePolicy, FeasibilityTable, MaskConfig, Mixing};
use crate::io::checkpoint::{save_checkpoint, Checkpoint};
use crate::io::report::{json_string, load_feasibility_report, save_feasibility_report};
use crate::io::{load_checkpoint, load_embeddings, load_features, load_manifest, MissingPolicy};
use crate::space::{CompositionSpace, Dataset, Split, WorldMode};
use crate::synth::{generate_synthetic, GenConfig, GroundTruth};
use crate::train::{split_labels, split_scores, train, EpochLog, TrainConfig, TrainMode};

pub const ARTIFACT_ROOT_VAR: &str = "COMPCOS_ARTIFACT_ROOT";
pub const REPORT_FILE: &str = "report.json";
pub const FEASIBILITY_FILE: &str = "feasibility.tsv";
pub const TRAIN_LOG_FILE: &str = "train_log.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.czsk";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingTokens {
    #[default]
    Error,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataConfig {
    Files {
        manifest: PathBuf,
        features: PathBuf,
        embeddings: PathBuf,
        #[serde(default)]
        missing_tokens: MissingTokens,
    },
    Synthetic(GenConfig),
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Synthetic(GenConfig::default())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskPolicy {
    #[default]
    None,
    Hard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskSettings {
    pub policy: MaskPolicy,
    /// Fixed threshold; tuned on validation AUC when absent.
    pub tau: Option<f64>,
    /// Number of quantile steps for tuning.
    pub steps: usize,
}

impl Default for MaskSettings {
    fn default() -> Self {
        MaskSettings {
            policy: MaskPolicy::None,
            tau: None,
            steps: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub closed_world: bool,
    pub open_world: bool,
    pub primitive_bias: PrimitiveBias,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            closed_world: true,
            open_world: true,
            primitive_bias: PrimitiveBias::BestHm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSettings {
    pub dir: PathBuf,
    /// Evaluate this checkpoint instead of training.
    pub checkpoint: Option<PathBuf>,
}

impl Default for OutputSettings {
    fn default() -> Self {
        OutputSettings {
            dir: PathBuf::from("artifacts"),
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub train: TrainConfig,
    pub mask: MaskSettings,
    pub eval: EvalSettings,
    pub output: OutputSettings,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let position = match e.span() {
                Some(span) => {
                    let before = &text[..span.start.min(text.len())];
                    let line = before.matches('\n').count() + 1;
                    let column = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
                    format!("line {line}, column {column}")
                }
                None => "unknown position".into(),
            };
            Error::parse(path, position, e.message())
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_toml(&crate::io::read_text(path)?, path)
    }

    /// Overrides the training seed and, for synthetic data, the generator seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.train.seed = seed;
        if let DataConfig::Synthetic(g) = &mut self.data {
            g.seed = seed;
        }
        self
    }
}

/// Everything a run needs, in memory.
#[derive(Debug, Clone)]
pub struct Prepared {
    /// Open-world space over the full vocabulary product.
    pub space: CompositionSpace,
    /// Closed-world evaluation space.
    pub closed: CompositionSpace,
    pub dataset: Dataset,
    pub features: Array2<f64>,
    pub embeddings: PrimitiveTable,
    pub truth: Option<GroundTruth>,
}

/// Seen pairs plus every validation and test label.
pub fn closed_world_space(space: &CompositionSpace, dataset: &Dataset) -> CompositionSpace {
    let extra = dataset.samples.iter().filter(|s| s.split != Split::Train).map(|s| s.pair);
    space.to_closed_world(extra)
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

pub fn prepare(data: &DataConfig, base: &Path, seed: u64) -> Result<Prepared> {
    match data {
        DataConfig::Synthetic(g) => {
            let d = generate_synthetic(g)?;
            Ok(Prepared {
                closed: closed_world_space(&d.space, &d.dataset),
                space: d.space,
                dataset: d.dataset,
                features: d.features,
                embeddings: d.embeddings,
                truth: Some(d.truth),
            })
        }
        DataConfig::Files {
            manifest,
            features,
            embeddings,
            missing_tokens,
        } => {
            let (space, dataset) = load_manifest(resolve(base, manifest))?;
            let features = load_features(resolve(base, features))?;
            let violations = dataset.validate(&space, features.nrows());
            if let Some(v) = violations.first() {
                return Err(Error::Validation(format!("{} violation(s), first: {v}", violations.len())));
            }
            let policy = match missing_tokens {
                MissingTokens::Error => MissingPolicy::Error,
                MissingTokens::Random => MissingPolicy::RandomInit { seed },
            };
            let embeddings = load_embeddings(resolve(base, embeddings), space.vocab(), policy)?;
            let (open, closed) = match space.mode() {
                WorldMode::OpenWorld => {
                    let closed = closed_world_space(&space, &dataset);
                    (space, closed)
                }
                WorldMode::ClosedWorld => (space.to_open_world(), space),
            };
            Ok(Prepared {
                space: open,
                closed,
                dataset,
                features,
                embeddings,
                truth: None,
            })
        }
    }
}

/// Fresh parameters for `data`; the hidden width defaults to the embedding dim.
pub fn init_params(data: &Prepared, cfg: &TrainConfig) -> Result<ModelParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(u64::MAX);
    let hidden = cfg.hidden_dim.unwrap_or(data.embeddings.dim());
    ModelParams::init(
        data.features.ncols(),
        hidden,
        data.embeddings.clone(),
        cfg.dropout,
        cfg.temperature,
        &mut rng,
    )
}

/// The space a training mode optimises and validates against.
pub fn training_space(data: &Prepared, mode: TrainMode) -> &CompositionSpace {
    match mode {
        TrainMode::ClosedWorld => &data.closed,
        _ => &data.space,
    }
}

pub fn train_model(data: &Prepared, cfg: &TrainConfig) -> Result<(Checkpoint, Vec<EpochLog>)> {
    let init = init_params(data, cfg)?;
    let outcome = train(&data.dataset, data.features.view(), training_space(data, cfg.mode), init, cfg)?;
    let ckpt = Checkpoint {
        state: outcome.state,
        best: Some(outcome.best_params),
        best_epoch: outcome.best_epoch,
    };
    Ok((ckpt, outcome.log))
}

/// Evaluation summary without the full curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub best_seen: f64,
    pub best_unseen: f64,
    pub best_hm: f64,
    pub auc: f64,
    pub hm_bias: f64,
    pub state_acc: f64,
    pub obj_acc: f64,
    pub n_seen_samples: usize,
    pub n_unseen_samples: usize,
}

impl From<&EvalReport> for Summary {
    fn from(r: &EvalReport) -> Self {
        Summary {
            best_seen: r.best_seen,
            best_unseen: r.best_unseen,
            best_hm: r.best_hm,
            auc: r.auc,
            hm_bias: r.hm_bias,
            state_acc: r.state_acc,
            obj_acc: r.obj_acc,
            n_seen_samples: r.n_seen_samples,
            n_unseen_samples: r.n_unseen_samples,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSummary {
    pub tau: f64,
    /// Validation AUC at `tau` when it was tuned.
    pub val_auc: Option<f64>,
    /// Unseen compositions removed from the output space.
    pub n_masked: usize,
    pub n_unseen: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub train_mode: TrainMode,
    pub seed: u64,
    pub best_epoch: Option<usize>,
    pub mixing: Mixing,
    pub closed_world: Option<Summary>,
    pub open_world: Option<Summary>,
    pub mask: Option<MaskSummary>,
    pub open_world_masked: Option<Summary>,
}

/// Test-split scores of `params` over `space`.
pub fn test_scores(params: &ModelParams, data: &Prepared, space: &CompositionSpace) -> Result<ScoreMatrix> {
    split_scores(params, &data.dataset, data.features.view(), space, Split::Test)
}

/// Picks or tunes the hard-mask threshold and returns the mask with its summary.
pub fn choose_mask(
    params: &ModelParams,
    data: &Prepared,
    feas: &FeasibilityTable,
    settings: &MaskSettings,
) -> Result<(Vec<bool>, MaskSummary)> {
    let space = &data.space;
    let (tau, val_auc) = match settings.tau {
        Some(tau) => (tau, None),
        None => {
            let val = split_scores(params, &data.dataset, data.features.view(), space, Split::Val)?;
            let choice = tune_threshold(feas, &val, space, &CandidatePolicy::Quantiles { steps: settings.steps })?;
            (choice.tau, Some(choice.auc))
        }
    };
    let mask = hard_mask(feas, space, MaskConfig::new(tau)?);
    let n_unseen = space.len() - space.n_seen();
    let n_masked = mask.iter().filter(|&&m| !m).count();
    Ok((
        mask,
        MaskSummary {
            tau,
            val_auc,
            n_masked,
            n_unseen,
        },
    ))
}

/// Evaluates `params` per the config and returns the report plus the
/// feasibility table used for masking and ranking.
pub fn evaluate_model(
    params: &ModelParams,
    data: &Prepared,
    cfg: &ExperimentConfig,
    best_epoch: Option<usize>,
) -> Result<(RunReport, FeasibilityTable)> {
    let feas = feasibility_scores(&params.primitives, &data.space, cfg.train.mixing, best_epoch.unwrap_or(0))?;
    let bias = cfg.eval.primitive_bias;
    let closed_world = if cfg.eval.closed_world {
        Some(Summary::from(&evaluate_with(&test_scores(params, data, &data.closed)?, None, bias)?))
    } else {
        None
    };
    let (mut open_world, mut mask, mut open_world_masked) = (None, None, None);
    if cfg.eval.open_world {
        let scores = test_scores(params, data, &data.space)?;
        open_world = Some(Summary::from(&evaluate_with(&scores, None, bias)?));
        if cfg.mask.policy == MaskPolicy::Hard {
            let (m, summary) = choose_mask(params, data, &feas, &cfg.mask)?;
            open_world_masked = Some(Summary::from(&evaluate_with(&scores, Some(&m), bias)?));
            mask = Some(summary);
        }
    }
    Ok((
        RunReport {
            train_mode: cfg.train.mode,
            seed: cfg.train.seed,
            best_epoch,
            mixing: cfg.train.mixing,
            closed_world,
            open_world,
            mask,
            open_world_masked,
        },
        feas,
    ))
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub out_dir: PathBuf,
    pub report: RunReport,
}

/// Output directory for a config: `$COMPCOS_ARTIFACT_ROOT/<dir>` when the
/// variable is set and `dir` is relative, else `dir` against `base`.
pub fn output_dir(cfg: &ExperimentConfig, base: &Path) -> PathBuf {
    match std::env::var_os(ARTIFACT_ROOT_VAR) {
        Some(root) if !cfg.output.dir.is_absolute() => PathBuf::from(root).join(&cfg.output.dir),
        _ => resolve(base, &cfg.output.dir),
    }
}

/// Runs a parsed config; relative input paths resolve against `base`.
pub fn run_config(cfg: &ExperimentConfig, base: &Path, out_dir: &Path) -> Result<ExperimentOutcome> {
    cfg.train.check()?;
    let data = prepare(&cfg.data, base, cfg.train.seed)?;
    let (ckpt, log) = match &cfg.output.checkpoint {
        Some(path) => (load_checkpoint(resolve(base, path))?, Vec::new()),
        None => train_model(&data, &cfg.train)?,
    };
    let (report, feas) = evaluate_model(ckpt.params(), &data, cfg, ckpt.best_epoch)?;

    crate::io::write_atomic(&out_dir.join(REPORT_FILE), json_string(&report)?.as_bytes())?;
    crate::io::write_atomic(&out_dir.join(TRAIN_LOG_FILE), json_string(&log)?.as_bytes())?;
    save_feasibility_report(out_dir.join(FEASIBILITY_FILE), &feas, &data.space)?;
    if cfg.output.checkpoint.is_none() {
        save_checkpoint(out_dir.join(CHECKPOINT_FILE), &ckpt)?;
    }
    Ok(ExperimentOutcome {
        out_dir: out_dir.to_path_buf(),
        report,
    })
}

/// Loads a TOML config and runs it; errors carry the config path.
pub fn run_experiment(config_path: impl AsRef<Path>) -> Result<ExperimentOutcome> {
    let path = config_path.as_ref();
    let with_path = |e: Error| e.context(format!("experiment {}", path.display()));
    let cfg = ExperimentConfig::load(path).map_err(with_path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    run_config(&cfg, base, &output_dir(&cfg, base)).map_err(with_path)
}

/// Evaluates scores produced elsewhere. Rows are the `split` samples in
/// dataset order and columns follow the target order of `space`.
pub fn evaluate_external(
    scores: Array2<f64>,
    space: &CompositionSpace,
    dataset: &Dataset,
    split: Split,
    mask: Option<&[bool]>,
    bias: PrimitiveBias,
) -> Result<EvalReport> {
    let labels = split_labels(dataset, space, split)?;
    if scores.nrows() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: labels.len(),
            actual: scores.nrows(),
        }
        .context(format!("score rows vs {split} samples")));
    }
    evaluate_with(&ScoreMatrix::new(scores, labels, space)?, mask, bias)
}

/// File-based [`evaluate_external`]: a CZSF score matrix, the manifest it
/// refers to, and optionally a feasibility ranking with its threshold.
pub fn evaluate_scores_file(
    scores: &Path,
    manifest: &Path,
    split: Split,
    ranking: Option<(&Path, f64)>,
    bias: PrimitiveBias,
) -> Result<EvalReport> {
    let (space, dataset) = load_manifest(manifest)?;
    let scores = load_features(scores)?;
    let mask = match ranking {
        Some((path, tau)) => {
            let feas = load_feasibility_report(path, &space)?;
            Some(hard_mask(&feas, &space, MaskConfig::new(tau)?))
        }
        None => None,
    };
    evaluate_external(scores, &space, &dataset, split, mask.as_deref(), bias)
}
