//! Experiment drivers behind the `atvr` binary.
//!
//! Every run reads one JSON config, writes CSV (plus SVG/JSON where useful)
//! into an output directory, and finishes with `manifest.json` naming the
//! experiment, the config as run, the seed, and every file written. CSV
//! columns are fixed per experiment and rows come out in a fixed order, so a
//! rerun with the same config and seed reproduces every CSV byte for byte.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::attack::{exact_adv_loss_union, AttackConfig, StepSize};
use crate::data::{gen_gaussian, Dataset, GaussianSpec};
use crate::error::{Error, Result};
use crate::expansion::{
    fit_min_slope, predict_target_loss, theoretical_slope_cross_norm, SlopeFormula, CE_LIPSCHITZ, DEFAULT_ZERO_TOL,
};
use crate::model::{load_model, save_model, Activation, Model, ModelKind};
use crate::numerics::{svd_spectrum, Matrix, RandomSource};
use crate::svg::{Plot, Style};
use crate::threat::{Ball, Norm, ThreatModel};
use crate::training::{
    at_vr_train, at_vr_train_with, empirical_adv_risk, gap_curve, RiskMethod, TrainConfig, TRAIN_LOG_HEADER,
};
use crate::variation::{
    dataset_variation, fast_lpv, hausdorff_estimate, union_variation, variation_bounds, variation_exact_linear,
    Distance, Estimator, HausdorffConfig, L2Distance, LinearMapDistance,
};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

const STREAM_HELD_OUT: u64 = 11;
const STREAM_INIT: u64 = 12;
const STREAM_MODELS: u64 = 13;
const STREAM_SAMPLES: u64 = 14;
const STREAM_DISTANCE: u64 = 15;

/// Written last by every run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub experiment: String,
    pub version: String,
    pub seed: u64,
    pub config: serde_json::Value,
    /// Paths relative to the output directory.
    pub outputs: Vec<String>,
}

/// A config for one subcommand. The run seed lives in the config and the
/// `--seed` flag overwrites it.
pub trait ExperimentConfig: Serialize + DeserializeOwned + Default {
    const KIND: &'static str;
    fn seed_mut(&mut self) -> &mut u64;
    fn validate(&self) -> Result<()> {
        Ok(())
    }
}

/// Parses a config document; unknown keys and bad values are config errors.
pub fn parse_config<C: ExperimentConfig>(text: &str) -> Result<C> {
    let c: C = serde_json::from_str(text).map_err(|e| Error::Config(format!("{}: {e}", C::KIND)))?;
    c.validate().map_err(into_config)?;
    Ok(c)
}

fn into_config(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}

struct Outputs {
    dir: PathBuf,
    files: Vec<String>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self { dir: dir.to_path_buf(), files: Vec::new() })
    }

    fn path(&mut self, name: &str) -> Result<PathBuf> {
        let p = self.dir.join(name);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        self.files.push(name.to_string());
        Ok(p)
    }

    fn csv(&mut self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
        let mut w = csv::Writer::from_path(self.path(name)?)?;
        w.write_record(header)?;
        for r in rows {
            w.write_record(r)?;
        }
        w.flush()?;
        Ok(())
    }

    fn text(&mut self, name: &str, body: &str) -> Result<()> {
        fs::write(self.path(name)?, body)?;
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        self.text(name, &(serde_json::to_string_pretty(value)? + "\n"))
    }

    fn finish<C: ExperimentConfig>(self, cfg: &C, seed: u64) -> Result<ExperimentManifest> {
        let manifest = ExperimentManifest {
            experiment: C::KIND.to_string(),
            version: VERSION.to_string(),
            seed,
            config: serde_json::to_value(cfg)?,
            outputs: self.files,
        };
        fs::write(self.dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(manifest)
    }
}

fn f(v: f64) -> String {
    v.to_string()
}

/// Two-Gaussian data; `seed: None` takes the run seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaussianSource {
    pub n: usize,
    pub sigma: f64,
    pub samples_per_class: usize,
    pub seed: Option<u64>,
}

impl Default for GaussianSource {
    fn default() -> Self {
        let s = GaussianSpec::default();
        Self { n: s.n, sigma: s.sigma, samples_per_class: s.samples_per_class, seed: None }
    }
}

impl GaussianSource {
    fn spec(&self, run_seed: u64) -> GaussianSpec {
        GaussianSpec { n: self.n, sigma: self.sigma, samples_per_class: self.samples_per_class, seed: self.seed.unwrap_or(run_seed) }
    }
}

/// Seed of the held-out draw that pairs with a training draw.
pub fn held_out_seed(train_seed: u64) -> u64 {
    RandomSource::derive(train_seed, &[STREAM_HELD_OUT]).next_u64()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Gaussian(GaussianSource),
    Csv {
        train: PathBuf,
        #[serde(default)]
        held_out: Option<PathBuf>,
        #[serde(default = "two")]
        classes: usize,
    },
}

fn two() -> usize {
    2
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Gaussian(GaussianSource::default())
    }
}

/// Which samples an evaluation runs on. Configs must say so explicitly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSet {
    Train,
    HeldOut,
}

impl DataSource {
    pub fn load(&self, set: EvalSet, run_seed: u64) -> Result<Dataset> {
        match (self, set) {
            (DataSource::Gaussian(g), EvalSet::Train) => gen_gaussian(&g.spec(run_seed)),
            (DataSource::Gaussian(g), EvalSet::HeldOut) => {
                let spec = g.spec(run_seed);
                gen_gaussian(&GaussianSpec { seed: held_out_seed(spec.seed), ..spec })
            }
            (DataSource::Csv { train, classes, .. }, EvalSet::Train) => Dataset::read_csv(train, *classes),
            (DataSource::Csv { held_out: Some(p), classes, .. }, EvalSet::HeldOut) => Dataset::read_csv(p, *classes),
            (DataSource::Csv { held_out: None, .. }, EvalSet::HeldOut) => {
                Err(Error::Config("eval_set is held_out but the csv source has no held_out file".into()))
            }
        }
    }
}

/// Architecture for freshly initialized models.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub features: usize,
    pub hidden: usize,
    pub activation: Activation,
    pub identity_classifier: bool,
    pub classes: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self { kind: ModelKind::Linear, features: 5, hidden: 16, activation: Activation::Tanh, identity_classifier: false, classes: 2 }
    }
}

impl ModelSpec {
    /// Initializes from the run seed's init substream.
    pub fn build(&self, input_dim: usize, run_seed: u64) -> Result<Model> {
        let mut rng = RandomSource::derive(run_seed, &[STREAM_INIT]);
        match self.kind {
            ModelKind::Linear => Model::linear_random(input_dim, self.features, self.classes, self.identity_classifier, &mut rng),
            ModelKind::Mlp1 => Model::mlp_random(
                input_dim,
                self.hidden,
                self.features,
                self.classes,
                self.activation,
                self.identity_classifier,
                &mut rng,
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSource {
    Checkpoint(PathBuf),
    Random(ModelSpec),
}

impl Default for ModelSource {
    fn default() -> Self {
        ModelSource::Random(ModelSpec::default())
    }
}

impl ModelSource {
    fn load(&self, input_dim: usize, run_seed: u64) -> Result<Model> {
        let m = match self {
            ModelSource::Checkpoint(p) => load_model(p)?.0,
            ModelSource::Random(spec) => spec.build(input_dim, run_seed)?,
        };
        if m.input_dim() != input_dim {
            return Err(Error::Config(format!("model takes {} inputs but the data has {input_dim}", m.input_dim())));
        }
        Ok(m)
    }
}

// ---------------------------------------------------------------- gen-data

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenDataConfig {
    pub seed: u64,
    pub n: usize,
    pub sigma: f64,
    pub samples_per_class: usize,
    /// Also write `held_out.csv` with this many points per class.
    pub held_out_per_class: usize,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        let s = GaussianSpec::default();
        Self { seed: 0, n: s.n, sigma: s.sigma, samples_per_class: s.samples_per_class, held_out_per_class: 0 }
    }
}

impl ExperimentConfig for GenDataConfig {
    const KIND: &'static str = "gen-data";
    fn seed_mut(&mut self) -> &mut u64 {
        &mut self.seed
    }
    fn validate(&self) -> Result<()> {
        self.spec().validate()
    }
}

impl GenDataConfig {
    fn spec(&self) -> GaussianSpec {
        GaussianSpec { n: self.n, sigma: self.sigma, samples_per_class: self.samples_per_class, seed: self.seed }
    }
}

pub fn run_gen_data(cfg: &GenDataConfig, out_dir: &Path) -> Result<ExperimentManifest> {
    let mut out = Outputs::new(out_dir)?;
    let spec = cfg.spec();
    gen_gaussian(&spec)?.write_csv(&out.path("data.csv")?)?;
    if cfg.held_out_per_class > 0 {
        let held = GaussianSpec { samples_per_class: cfg.held_out_per_class, seed: held_out_seed(spec.seed), ..spec };
        gen_gaussian(&held)?.write_csv(&out.path("held_out.csv")?)?;
    }
    out.finish(cfg, cfg.seed)
}

// ---------------------------------------------------------------- train

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct TrainRunConfig {
    pub seed: u64,
    pub data: DataSource,
    pub model: ModelSpec,
    /// Its `seed` is replaced by the run seed.
    pub train: TrainConfig,
    /// Also save `checkpoints/epoch_NNNN.json` every this many epochs.
    pub checkpoint_every: Option<usize>,
}

impl ExperimentConfig for TrainRunConfig {
    const KIND: &'static str = "train";
    fn seed_mut(&mut self) -> &mut u64 {
        &mut self.seed
    }
    fn validate(&self) -> Result<()> {
        if self.checkpoint_every == Some(0) {
            return Err(Error::Config("checkpoint_every must be positive".into()));
        }
        self.train.validate()
    }
}

pub fn run_train(cfg: &TrainRunConfig, out_dir: &Path) -> Result<ExperimentManifest> {
    let mut out = Outputs::new(out_dir)?;
    let data = cfg.data.load(EvalSet::Train, cfg.seed)?;
    let init = cfg.model.build(data.dim(), cfg.seed)?;
    let train = TrainConfig { seed: cfg.seed, ..cfg.train.clone() };
    let mut snapshots = Vec::new();
    let (model, log) = at_vr_train_with(&init, &data, &train, |epoch, m, _| {
        if cfg.checkpoint_every.is_some_and(|k| epoch % k == 0) {
            snapshots.push((epoch, m.clone()));
        }
    })?;
    for (epoch, m) in &snapshots {
        save_model(m, &out.path(&format!("checkpoints/epoch_{epoch:04}.json"))?, cfg.seed, *epoch)?;
    }
    save_model(&model, &out.path("model.json")?, cfg.seed, train.epochs)?;
    let rows: Vec<Vec<String>> = log
        .iter()
        .map(|r| {
            vec![
                r.epoch.to_string(),
                f(r.clean_loss),
                f(r.adv_loss),
                f(r.variation),
                f(r.objective),
                f(r.clean_acc),
                f(r.adv_acc),
            ]
        })
        .collect();
    out.csv("train_log.csv", &TRAIN_LOG_HEADER, &rows)?;
    out.finish(cfg, cfg.seed)
}

// ---------------------------------------------------------------- eval

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub data: DataSource,
    pub eval_set: EvalSet,
    #[serde(default)]
    pub model: ModelSource,
    pub threat_models: Vec<ThreatModel>,
    #[serde(default = "auto")]
    pub method: RiskMethod,
    #[serde(default = "AttackConfig::evaluation")]
    pub attack: AttackConfig,
}

fn auto() -> RiskMethod {
    RiskMethod::Auto
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataSource::default(),
            eval_set: EvalSet::Train,
            model: ModelSource::default(),
            threat_models: vec![Ball::linf(0.01).into()],
            method: RiskMethod::Auto,
            attack: AttackConfig::evaluation(),
        }
    }
}

impl ExperimentConfig for EvalConfig {
    const KIND: &'static str = "eval";
    fn seed_mut(&mut self) -> &mut u64 {
        &mut self.seed
    }
    fn validate(&self) -> Result<()> {
        if self.threat_models.is_empty() {
            return Err(Error::Config("threat_models is empty".into()));
        }
        self.attack.validate()
    }
}

pub fn run_eval(cfg: &EvalConfig, out_dir: &Path) -> Result<ExperimentManifest> {
    let mut out = Outputs::new(out_dir)?;
    let data = cfg.data.load(cfg.eval_set, cfg.seed)?;
    let model = cfg.model.load(data.dim(), cfg.seed)?;
    let attack = cfg.attack.with_seed(cfg.seed);
    let mut rows = Vec::new();
    for tm in &cfg.threat_models {
        let r = empirical_adv_risk(&model, &data, tm, cfg.method, &attack)?;
        rows.push(vec![tm.to_string(), method_label(r.method).into(), f(r.mean_loss), f(r.accuracy)]);
    }
    out.csv("eval.csv", &["threat_model", "method", "mean_loss", "accuracy"], &rows)?;
    out.finish(cfg, cfg.seed)
}

fn method_label(m: RiskMethod) -> &'static str {
    match m {
        RiskMethod::Clean => "clean",
        RiskMethod::Pgd => "pgd",
        RiskMethod::ExactLinear => "exact_linear",
        RiskMethod::Auto => "auto",
    }
}

// ---------------------------------------------------------------- variation

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum DistanceConfig {
    L2,
    /// `||M (a - b)||_2` with a random `k x n` map drawn from the run seed.
    RandomLinear { k: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum VariationEstimatorConfig {
    Standard(Estimator),
    FastLpv { eps: f64, steps: usize, distance: DistanceConfig },
}

impl Default for VariationEstimatorConfig {
    fn default() -> Self {
        VariationEstimatorConfig::Standard(Estimator::Auto(AttackConfig::variation()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariationConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub data: DataSource,
    pub eval_set: EvalSet,
    #[serde(default)]
    pub model: ModelSource,
    /// Ignored by `fast_lpv`, which carries its own radius.
    #[serde(default = "default_source")]
    pub threat_model: ThreatModel,
    #[serde(default)]
    pub estimator: VariationEstimatorConfig,
    /// Only the first this many samples.
    #[serde(default)]
    pub max_samples: Option<usize>,
}

fn default_source() -> ThreatModel {
    Ball::linf(0.01).into()
}

impl Default for VariationConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataSource::default(),
            eval_set: EvalSet::Train,
            model: ModelSource::default(),
            threat_model: default_source(),
            estimator: VariationEstimatorConfig::default(),
            max_samples: None,
        }
    }
}

impl ExperimentConfig for VariationConfig {
    const KIND: &'static str = "variation";
    fn seed_mut(&mut self) -> &mut u64 {
        &mut self.seed
    }
    fn validate(&self) -> Result<()> {
        if let VariationEstimatorConfig::FastLpv { eps, distance, .. } = self.estimator {
            if !(eps >= 0.0 && eps.is_finite()) {
                return Err(Error::Config(format!("fast_lpv eps must be nonnegative, got {eps}")));
            }
            if distance == (DistanceConfig::RandomLinear { k: 0 }) {
                return Err(Error::Config("random_linear distance needs k >= 1".into()));
            }
        }
        Ok(())
    }
}

fn truncate(data: Dataset, max: Option<usize>) -> Dataset {
    match max {
        Some(m) if m < data.len() => data.slice(0..m),
        _ => data,
    }
}

pub fn run_variation(cfg: &VariationConfig, out_dir: &Path) -> Result<ExperimentManifest> {
    let mut out = Outputs::new(out_dir)?;
    let data = truncate(cfg.data.load(cfg.eval_set, cfg.seed)?, cfg.max_samples);
    if data.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let model = cfg.model.load(data.dim(), cfg.seed)?;
    let mut rows = Vec::with_capacity(data.len());
    let mean = match &cfg.estimator {
        VariationEstimatorConfig::Standard(est) => {
            let dv = dataset_variation(&model, &data, &cfg.threat_model, est, cfg.seed)?;
            for (i, (e, x)) in dv.per_sample.iter().zip(data.inputs()).enumerate() {
                let member = e.member_values.iter().position(|v| *v == e.value).unwrap_or(0);
                let ball = cfg.threat_model.members()[member];
                let n1 = ball.p.distance(&e.witness.0, x);
                let n2 = ball.p.distance(&e.witness.1, x);
                rows.push(vec![
                    i.to_string(),
                    e.method.label().into(),
                    ball.p.label().into(),
                    f(ball.eps),
                    f(e.value),
                    format!("{};{}", f(n1), f(n2)),
                ]);
            }
            dv.mean
        }
        VariationEstimatorConfig::FastLpv { eps, steps, distance } => {
            let dist: Box<dyn Distance> = match distance {
                DistanceConfig::L2 => Box::new(L2Distance),
                DistanceConfig::RandomLinear { k } => Box::new(LinearMapDistance::random(
                    data.dim(),
                    *k,
                    &mut RandomSource::derive(cfg.seed, &[STREAM_DISTANCE]),
                )),
            };
            let label = match distance {
                DistanceConfig::L2 => "l2",
                DistanceConfig::RandomLinear { .. } => "random_linear",
            };
            let est: Vec<_> = data
                .inputs()
                .par_iter()
                .enumerate()
                .map(|(i, x)| {
                    let mut rng = RandomSource::derive(cfg.seed, &[STREAM_SAMPLES, i as u64]);
                    fast_lpv(&model, dist.as_ref(), x, *eps, *steps, &mut rng)
                })
                .collect::<Result<_>>()?;
            for (i, e) in est.iter().enumerate() {
                let (d1, d2) = e.witness_distances.unwrap_or((0.0, 0.0));
                rows.push(vec![i.to_string(), e.method.label().into(), label.into(), f(*eps), f(e.value), format!("{};{}", f(d1), f(d2))]);
            }
            est.iter().map(|e| e.value).sum::<f64>() / est.len() as f64
        }
    };
    out.csv("variation.csv", &["sample_id", "method", "p", "eps", "value", "witness_norms"], &rows)?;
    out.csv("variation_summary.csv", &["samples", "mean_variation"], &[vec![data.len().to_string(), f(mean)]])?;
    out.finish(cfg, cfg.seed)
}

// ---------------------------------------------------------------- expansion

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ExpansionMode {
    /// Affine extractors with standard-normal entries.
    RandomNormal { models: usize, input_dim: usize, features: usize },
    /// Snapshots of one training run every `every` epochs.
    TrainingTrajectory {
        data: DataSource,
        model: ModelSpec,
        train: TrainConfig,
        every: usize,
        /// Samples used to average variation of nonlinear snapshots.
        eval_samples: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpansionConfig {
    pub seed: u64,
    pub source: Ball,
    /// The target threat model is `source ∪ target`.
    pub target: Ball,
    pub mode: ExpansionMode,
    pub zero_tol: f64,
    /// PGD used where no exact variation exists (`l_inf` above 20 inputs,
    /// nonlinear extractors).
    pub pgd: AttackConfig,
}

/// Sign steps of twice the radius land on a vertex every step, which makes
/// PGD an alternating maximization for affine maps.
pub fn expansion_pgd_default() -> AttackConfig {
    AttackConfig { steps: 20, step_size: StepSize::Relative(2.0), restarts: 10, keep_best: true, seed: 0, clip: None }
}

impl Default for ExpansionConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            source: Ball::l2(0.01),
            target: Ball::linf(0.05),
            mode: ExpansionMode::RandomNormal { models: 100, input_dim: 25, features: 5 },
            zero_tol: DEFAULT_ZERO_TOL,
            pgd: expansion_pgd_default(),
        }
    }
}

impl ExperimentConfig for ExpansionConfig {
    const KIND: &'static str = "expansion";
    fn seed_mut(&mut self) -> &mut u64 {
        &mut self.seed
    }
    fn validate(&self) -> Result<()> {
        if !(self.source.eps > 0.0) {
            return Err(Error::Config("source radius must be positive".into()));
        }
        match &self.mode {
            ExpansionMode::RandomNormal { models, input_dim, features } => {
                if *models == 0 || *input_dim == 0 || *features == 0 {
                    return Err(Error::Config("models, input_dim and features must be positive".into()));
                }
            }
            ExpansionMode::TrainingTrajectory { every, train, eval_samples, .. } => {
                if *every == 0 || *eval_samples == 0 {
                    return Err(Error::Config("every and eval_samples must be positive".into()));
                }
                train.validate()?;
            }
        }
        self.pgd.validate()
    }
}

/// Result of an expansion study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpansionStudy {
    pub points: Vec<(f64, f64)>,
    pub slope: f64,
    pub excluded: usize,
    /// Largest `sigma_max / sigma_min` over the affine extractors; `None`
    /// for nonlinear models.
    pub condition_bound: Option<f64>,
    pub theoretical_slope: Option<f64>,
}

/// `(V(h, S), V(h, S ∪ T))` for one affine extractor: exact where possible,
/// PGD otherwise, at the origin (affine variation does not depend on `x`).
pub fn linear_variation_pair(w: &Matrix, source: &Ball, target: &Ball, pgd: &AttackConfig, rng: &mut RandomSource) -> Result<(f64, f64)> {
    let model = Model::new(
        crate::model::Extractor::Linear { weight: w.clone(), bias: vec![0.0; w.rows()] },
        crate::model::Classifier { weight: None, bias: vec![0.0; w.rows()] },
    )?;
    let x = vec![0.0; w.cols()];
    let est = Estimator::Auto(*pgd);
    let t = ThreatModel::ball(*source).with(*target);
    let vt = union_variation(&model, &x, &t, &est, rng)?;
    // the first member is the source itself
    Ok((vt.member_values[0], vt.value))
}

pub fn expansion_study(cfg: &ExpansionConfig) -> Result<ExpansionStudy> {
    let pgd = cfg.pgd.with_seed(cfg.seed);
    let (points, weights): (Vec<(f64, f64)>, Vec<Option<Matrix>>) = match &cfg.mode {
        ExpansionMode::RandomNormal { models, input_dim, features } => {
            let r: Vec<((f64, f64), Option<Matrix>)> = (0..*models)
                .into_par_iter()
                .map(|i| {
                    let mut rng = RandomSource::derive(cfg.seed, &[STREAM_MODELS, i as u64]);
                    let w = Matrix::random_normal(*features, *input_dim, 1.0, &mut rng);
                    Ok((linear_variation_pair(&w, &cfg.source, &cfg.target, &pgd, &mut rng)?, Some(w)))
                })
                .collect::<Result<_>>()?;
            r.into_iter().unzip()
        }
        ExpansionMode::TrainingTrajectory { data, model, train, every, eval_samples } => {
            let data = data.load(EvalSet::Train, cfg.seed)?;
            let init = model.build(data.dim(), cfg.seed)?;
            let train = TrainConfig { seed: cfg.seed, ..train.clone() };
            let mut snaps = vec![init.clone()];
            at_vr_train_with(&init, &data, &train, |epoch, m, _| {
                if epoch % every == 0 {
                    snaps.push(m.clone());
                }
            })?;
            let sub = truncate(data, Some(*eval_samples));
            let s: ThreatModel = cfg.source.into();
            let t = s.with(cfg.target);
            let est = Estimator::Auto(pgd);
            let mut out = Vec::new();
            for m in &snaps {
                let vs = dataset_variation(m, &sub, &s, &est, cfg.seed)?.mean;
                let vt = dataset_variation(m, &sub, &t, &est, cfg.seed)?.mean;
                out.push(((vs, vt), m.linear_weight().cloned()));
            }
            out.into_iter().unzip()
        }
    };
    let fit = fit_min_slope(&points, cfg.zero_tol)?;
    let condition_bound = if weights.iter().all(Option::is_some) {
        let mut b = 1.0f64;
        for w in weights.iter().flatten() {
            b = b.max(svd_spectrum(w)?.condition_number);
        }
        Some(b)
    } else {
        None
    };
    let n = match &cfg.mode {
        ExpansionMode::RandomNormal { input_dim, .. } => *input_dim,
        ExpansionMode::TrainingTrajectory { .. } => weights.iter().flatten().next().map_or(0, Matrix::cols),
    };
    let theoretical_slope = match condition_bound {
        Some(b) if b.is_finite() && n > 0 => Some(theoretical_slope_cross_norm(&SlopeFormula {
            p: cfg.source.p,
            q: cfg.target.p,
            eps1: cfg.source.eps,
            eps2: cfg.target.eps,
            n,
            b,
        })?),
        _ => None,
    };
    Ok(ExpansionStudy { points, slope: fit.slope, excluded: fit.excluded_count, condition_bound, theoretical_slope })
}

pub fn run_expansion(cfg: &ExpansionConfig, out_dir: &Path) -> Result<ExperimentManifest> {
    let mut out = Outputs::new(out_dir)?;
    let study = expansion_study(cfg)?;
    let rows: Vec<Vec<String>> =
        study.points.iter().enumerate().map(|(i, (x, y))| vec![i.to_string(), f(*x), f(*y)]).collect();
    out.csv("expansion_points.csv", &["model", "source_variation", "target_variation"], &rows)?;
    let opt = |v: Option<f64>| v.map(f).unwrap_or_default();
    out.csv(
        "expansion_fit.csv",
        &["slope", "retained", "excluded", "condition_bound", "theoretical_slope"],
        &[vec![
            f(study.slope),
            (study.points.len() - study.excluded).to_string(),
            study.excluded.to_string(),
            opt(study.condition_bound),
            opt(study.theoretical_slope),
        ]],
    )?;
    let xmax = study.points.iter().map(|p| p.0).fold(0.0, f64::max);
    let mut plot = Plot::new(
        &format!("{} -> {} ∪ {}", cfg.source, cfg.source, cfg.target),
        "source variation",
        "target variation",
    );
    plot.add("models", study.points.clone(), Style::Scatter);
    plot.add(&format!("min slope {:.3}", study.slope), vec![(0.0, 0.0), (xmax, study.slope * xmax)], Style::Line);
    out.text("expansion.svg", &plot.render())?;
    out.finish(cfg, cfg.seed)
}

// ---------------------------------------------------------------- gap

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GapConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub data: DataSource,
    pub eval_set: EvalSet,
    #[serde(default)]
    pub model: ModelSpec,
    /// `lambda` and `seed` are set per run.
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_lambdas")]
    pub lambdas: Vec<f64>,
    #[serde(default = "default_target_eps")]
    pub target_eps: Vec<f64>,
    #[serde(default = "default_target_norms")]
    pub target_norms: Vec<Norm>,
    #[serde(default = "auto")]
    pub method: RiskMethod,
    #[serde(default = "AttackConfig::evaluation")]
    pub attack: AttackConfig,
}

fn default_lambdas() -> Vec<f64> {
    vec![0.0, 1.0]
}

fn default_target_eps() -> Vec<f64> {
    vec![0.01, 0.02, 0.03, 0.05, 0.075, 0.1]
}

fn default_target_norms() -> Vec<Norm> {
    vec![Norm::LInf, Norm::L2]
}

impl Default for GapConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataSource::default(),
            eval_set: EvalSet::Train,
            model: ModelSpec::default(),
            train: TrainConfig::default(),
            lambdas: default_lambdas(),
            target_eps: default_target_eps(),
            target_norms: default_target_norms(),
            method: RiskMethod::Auto,
            attack: AttackConfig::evaluation(),
        }
    }
}

impl ExperimentConfig for GapConfig {
    const KIND: &'static str = "gap";
    fn seed_mut(&mut self) -> &mut u64 {
        &mut self.seed
    }
    fn validate(&self) -> Result<()> {
        if self.lambdas.is_empty() || self.target_eps.is_empty() || self.target_norms.is_empty() {
            return Err(Error::Config("lambdas, target_eps and target_norms must be nonempty".into()));
        }
        for &l in &self.lambdas {
            TrainConfig { lambda: l, ..self.train.clone() }.validate()?;
        }
        for &e in &self.target_eps {
            Ball::new(Norm::L2, e)?;
        }
        self.attack.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapStudyRow {
    pub lambda: f64,
    pub target_norm: Norm,
    pub target_eps: f64,
    pub target: String,
    pub source_loss: f64,
    pub target_loss: f64,
    pub gap: f64,
    pub target_acc: f64,
    pub clean_acc: f64,
}

/// Trains one model per lambda from a shared initialization and data, then
/// evaluates gaps for every target `source ∪ l_q(eps)`.
pub fn gap_study(cfg: &GapConfig) -> Result<Vec<GapStudyRow>> {
    let train_data = cfg.data.load(EvalSet::Train, cfg.seed)?;
    let eval_data = cfg.data.load(cfg.eval_set, cfg.seed)?;
    let init = cfg.model.build(train_data.dim(), cfg.seed)?;
    let attack = cfg.attack.with_seed(cfg.seed);
    let mut rows = Vec::new();
    for &lambda in &cfg.lambdas {
        let (model, _) = at_vr_train(&init, &train_data, &TrainConfig { lambda, seed: cfg.seed, ..cfg.train.clone() })?;
        let clean = empirical_adv_risk(&model, &eval_data, &cfg.train.source, RiskMethod::Clean, &attack)?;
        for &q in &cfg.target_norms {
            let targets: Vec<ThreatModel> =
                cfg.target_eps.iter().map(|&e| cfg.train.source.with(Ball { p: q, eps: e })).collect();
            let gaps = gap_curve(&model, &eval_data, &cfg.train.source, &targets, cfg.method, &attack)?;
            for (g, &e) in gaps.into_iter().zip(&cfg.target_eps) {
                rows.push(GapStudyRow {
                    lambda,
                    target_norm: q,
                    target_eps: e,
                    target: g.target,
                    source_loss: g.source_loss,
                    target_loss: g.target_loss,
                    gap: g.gap,
                    target_acc: g.target_acc,
                    clean_acc: clean.accuracy,
                });
            }
        }
    }
    Ok(rows)
}

pub fn run_gap(cfg: &GapConfig, out_dir: &Path) -> Result<ExperimentManifest> {
    let mut out = Outputs::new(out_dir)?;
    let rows = gap_study(cfg)?;
    let csv_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                f(r.lambda),
                r.target_norm.label().into(),
                f(r.target_eps),
                r.target.clone(),
                f(r.source_loss),
                f(r.target_loss),
                f(r.gap),
                f(r.target_acc),
                f(r.clean_acc),
            ]
        })
        .collect();
    out.csv(
        "gap.csv",
        &["lambda", "target_norm", "target_eps", "target", "source_loss", "target_loss", "gap", "target_acc", "clean_acc"],
        &csv_rows,
    )?;
    let mut plot = Plot::new(&format!("generalization gap, source {}", cfg.train.source), "target eps", "gap");
    for &q in &cfg.target_norms {
        for &l in &cfg.lambdas {
            let pts = rows.iter().filter(|r| r.lambda == l && r.target_norm == q).map(|r| (r.target_eps, r.gap)).collect();
            plot.add(&format!("l{} lambda={l}", q.label()), pts, Style::Line);
        }
    }
    out.text("gap.svg", &plot.render())?;
    out.finish(cfg, cfg.seed)
}

// ---------------------------------------------------------------- hausdorff

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HausdorffRunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub data: DataSource,
    pub eval_set: EvalSet,
    #[serde(default)]
    pub model: ModelSource,
    #[serde(default = "default_source")]
    pub source: ThreatModel,
    /// Joined to the source to form the target.
    pub target: Vec<Ball>,
    #[serde(default)]
    pub hausdorff: HausdorffConfig,
    #[serde(default = "AttackConfig::variation")]
    pub variation: AttackConfig,
    #[serde(default = "default_max_samples")]
    pub max_samples: Option<usize>,
}

fn default_max_samples() -> Option<usize> {
    Some(100)
}

impl Default for HausdorffRunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataSource::default(),
            eval_set: EvalSet::Train,
            model: ModelSource::default(),
            source: default_source(),
            target: vec![Ball::linf(0.05)],
            hausdorff: HausdorffConfig::default(),
            variation: AttackConfig::variation(),
            max_samples: default_max_samples(),
        }
    }
}

impl ExperimentConfig for HausdorffRunConfig {
    const KIND: &'static str = "hausdorff";
    fn seed_mut(&mut self) -> &mut u64 {
        &mut self.seed
    }
    fn validate(&self) -> Result<()> {
        if self.target.is_empty() {
            return Err(Error::Config("target is empty".into()));
        }
        self.hausdorff.outer.validate()?;
        self.variation.validate()
    }
}

pub fn run_hausdorff(cfg: &HausdorffRunConfig, out_dir: &Path) -> Result<ExperimentManifest> {
    let mut out = Outputs::new(out_dir)?;
    let data = truncate(cfg.data.load(cfg.eval_set, cfg.seed)?, cfg.max_samples);
    let model = cfg.model.load(data.dim(), cfg.seed)?;
    let target = cfg.target.iter().fold(cfg.source.clone(), |t, b| t.with(*b));
    let scale = CE_LIPSCHITZ * model.classifier_lipschitz()?;
    let est = Estimator::Auto(cfg.variation);
    let rows: Vec<Vec<String>> = data
        .inputs()
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let mut rng = RandomSource::derive(cfg.seed, &[STREAM_SAMPLES, i as u64]);
            let h = hausdorff_estimate(&model, x, &cfg.source, &target, &cfg.hausdorff, &mut rng)?;
            let v = union_variation(&model, x, &target, &est, &mut rng)?;
            Ok(vec![i.to_string(), f(h.value), f(v.value), f(scale * h.value), f(scale * v.value)])
        })
        .collect::<Result<_>>()?;
    out.csv(
        "hausdorff.csv",
        &["sample_id", "hausdorff", "target_variation", "hausdorff_bound", "variation_bound"],
        &rows,
    )?;
    out.finish(cfg, cfg.seed)
}

// ---------------------------------------------------------------- verify-bounds

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    pub seed: u64,
    pub models: usize,
    pub input_dim: usize,
    /// At least `input_dim` so the lower bound applies.
    pub features: usize,
    pub points_per_model: usize,
    pub norms: Vec<Norm>,
    pub source_eps: f64,
    /// Target radii; each must be at least `source_eps`.
    pub target_eps: Vec<f64>,
    /// Multiplies `sigma_max(A)` in the soundness check; 1 for the real bound.
    /// The bound has at least a factor 2 of slack for binary affine models
    /// (the variation is a diameter, the loss change is set by a radius), so
    /// a negative control needs a scale well below 0.5.
    pub sigma_scale: f64,
    pub tolerance: f64,
    pub check_hausdorff: bool,
    pub hausdorff: HausdorffConfig,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            models: 100,
            input_dim: 5,
            features: 8,
            points_per_model: 2,
            norms: vec![Norm::LInf, Norm::L2],
            source_eps: 0.05,
            target_eps: vec![0.05, 0.2],
            sigma_scale: 1.0,
            tolerance: 1e-9,
            check_hausdorff: true,
            hausdorff: HausdorffConfig::default(),
        }
    }
}

impl ExperimentConfig for VerifyConfig {
    const KIND: &'static str = "verify-bounds";
    fn seed_mut(&mut self) -> &mut u64 {
        &mut self.seed
    }
    fn validate(&self) -> Result<()> {
        if self.models == 0 || self.input_dim == 0 || self.features == 0 || self.points_per_model == 0 {
            return Err(Error::Config("models, input_dim, features and points_per_model must be positive".into()));
        }
        if self.norms.is_empty() || self.target_eps.is_empty() {
            return Err(Error::Config("norms and target_eps must be nonempty".into()));
        }
        if !(self.source_eps > 0.0) || self.target_eps.iter().any(|e| !(*e >= self.source_eps)) {
            return Err(Error::Config("need 0 < source_eps <= every target_eps".into()));
        }
        if !(self.sigma_scale >= 0.0) {
            return Err(Error::Config("sigma_scale must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub model: usize,
    pub model_seed: u64,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvariantReport {
    pub name: String,
    pub pass: bool,
    pub checked: usize,
    pub failures: Vec<Failure>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub all_pass: bool,
    pub invariants: Vec<InvariantReport>,
}

/// One checked inequality `lhs <= rhs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyRow {
    pub invariant: &'static str,
    pub model: usize,
    pub model_seed: u64,
    pub case: String,
    pub lhs: f64,
    pub rhs: f64,
    pub pass: bool,
}

/// Seed that regenerates model `i` of a verification run with
/// [`verify_model`].
pub fn verify_model_seed(run_seed: u64, i: usize) -> u64 {
    RandomSource::derive(run_seed, &[STREAM_MODELS, i as u64]).next_u64()
}

/// Binary affine model drawn from a model seed.
pub fn verify_model(model_seed: u64, input_dim: usize, features: usize) -> Result<Model> {
    Model::linear_random(input_dim, features, 2, false, &mut RandomSource::new(model_seed))
}

/// Checks, on random binary affine models:
///
/// * `bound_soundness`: exact `L_T - L_S <= sqrt(2) sigma_max(A) V(h, T)`
///   pointwise, for `T = S ∪ l_q(eps_T)`;
/// * `lemma_sandwich`: exact variation lies within the singular-value bounds;
/// * `hausdorff_domination`: the Hausdorff estimate, and so its bound, never
///   exceeds the target variation;
/// * `expansion_dominance`: the fitted slope over the model set stays below
///   the theoretical slope at the measured condition bound.
pub fn verify_bounds(cfg: &VerifyConfig) -> Result<(VerifyReport, Vec<VerifyRow>)> {
    cfg.validate()?;
    let mut pairs = Vec::new();
    for &p in &cfg.norms {
        for &q in &cfg.norms {
            for &e in &cfg.target_eps {
                pairs.push((Ball { p, eps: cfg.source_eps }, Ball { p: q, eps: e }));
            }
        }
    }
    let per_model: Vec<(Vec<VerifyRow>, Matrix)> = (0..cfg.models)
        .into_par_iter()
        .map(|i| verify_one(cfg, i, &pairs))
        .collect::<Result<_>>()?;

    let mut rows = Vec::new();
    let mut b = 1.0f64;
    for (r, w) in &per_model {
        rows.extend(r.iter().cloned());
        b = b.max(svd_spectrum(w)?.condition_number);
    }
    for (s, t) in &pairs {
        let pts: Vec<(f64, f64)> = per_model
            .iter()
            .map(|(_, w)| {
                let a = vec![0.0; w.cols()];
                let vs = variation_exact_linear(w, s, &a)?.value;
                let vt = variation_exact_linear(w, t, &a)?.value;
                Ok((vs, vs.max(vt)))
            })
            .collect::<Result<_>>()?;
        let fit = fit_min_slope(&pts, DEFAULT_ZERO_TOL)?;
        let theory = if b.is_finite() {
            theoretical_slope_cross_norm(&SlopeFormula { p: s.p, q: t.p, eps1: s.eps, eps2: t.eps, n: cfg.input_dim, b })?
        } else {
            f64::INFINITY
        };
        rows.push(VerifyRow {
            invariant: "expansion_dominance",
            model: 0,
            model_seed: cfg.seed,
            case: format!("{s}->{t}"),
            lhs: fit.slope,
            rhs: theory,
            pass: fit.slope <= theory * (1.0 + 1e-12),
        });
    }

    let names = ["bound_soundness", "lemma_sandwich", "hausdorff_domination", "expansion_dominance"];
    let invariants: Vec<InvariantReport> = names
        .iter()
        .filter(|n| cfg.check_hausdorff || **n != "hausdorff_domination")
        .map(|name| {
            let mine: Vec<&VerifyRow> = rows.iter().filter(|r| r.invariant == *name).collect();
            let failures: Vec<Failure> = mine
                .iter()
                .filter(|r| !r.pass)
                .map(|r| Failure {
                    model: r.model,
                    model_seed: r.model_seed,
                    detail: format!("{}: {} > {}", r.case, r.lhs, r.rhs),
                })
                .collect();
            InvariantReport { name: name.to_string(), pass: failures.is_empty(), checked: mine.len(), failures }
        })
        .collect();
    let all_pass = invariants.iter().all(|i| i.pass);
    Ok((VerifyReport { all_pass, invariants }, rows))
}

fn verify_one(cfg: &VerifyConfig, i: usize, pairs: &[(Ball, Ball)]) -> Result<(Vec<VerifyRow>, Matrix)> {
    let seed = verify_model_seed(cfg.seed, i);
    let model = verify_model(seed, cfg.input_dim, cfg.features)?;
    let w = model.linear_weight().expect("linear").clone();
    let sigma_g = model.classifier_lipschitz()? * cfg.sigma_scale;
    let mut rng = RandomSource::derive(seed, &[STREAM_SAMPLES]);
    let mut rows = Vec::new();
    let mut row = |invariant, case: String, lhs: f64, rhs: f64, tol: f64| {
        rows.push(VerifyRow { invariant, model: i, model_seed: seed, case, lhs, rhs, pass: lhs <= rhs + tol });
    };

    for &p in &cfg.norms {
        let ball = Ball { p, eps: cfg.source_eps };
        let exact = variation_exact_linear(&w, &ball, &vec![0.0; cfg.input_dim])?.value;
        let bounds = variation_bounds(&w, &ball)?;
        let tol = 1e-12 * bounds.upper.max(1e-300);
        row("lemma_sandwich", format!("{ball} upper"), exact, bounds.upper, tol);
        if let Some(lo) = bounds.lower {
            row("lemma_sandwich", format!("{ball} lower"), lo, exact, tol);
        }
    }

    for k in 0..cfg.points_per_model {
        let x: Vec<f64> = (0..cfg.input_dim).map(|_| rng.uniform(0.0, 1.0)).collect();
        let y = rng.index(2);
        for (s, t) in pairs {
            let src: ThreatModel = (*s).into();
            let tgt = src.with(*t);
            let ls = exact_adv_loss_union(&model, &x, y, &src)?;
            let lt = exact_adv_loss_union(&model, &x, y, &tgt)?;
            let vt = union_variation(&model, &x, &tgt, &Estimator::Exact, &mut rng)?.value;
            let case = format!("x{k} {s}->{t}");
            row("bound_soundness", case.clone(), lt - ls, CE_LIPSCHITZ * sigma_g * vt, cfg.tolerance);
            if cfg.check_hausdorff {
                let h = hausdorff_estimate(&model, &x, &src, &tgt, &cfg.hausdorff, &mut rng)?.value;
                row("hausdorff_domination", case, CE_LIPSCHITZ * sigma_g * h, CE_LIPSCHITZ * sigma_g * vt, cfg.tolerance);
            }
        }
    }
    Ok((rows, w))
}

pub fn run_verify_bounds(cfg: &VerifyConfig, out_dir: &Path) -> Result<(ExperimentManifest, VerifyReport)> {
    let mut out = Outputs::new(out_dir)?;
    let (report, rows) = verify_bounds(cfg)?;
    let csv_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.invariant.into(),
                r.model.to_string(),
                r.model_seed.to_string(),
                r.case.clone(),
                f(r.lhs),
                f(r.rhs),
                r.pass.to_string(),
            ]
        })
        .collect();
    out.csv("verify_rows.csv", &["invariant", "model", "model_seed", "case", "lhs", "rhs", "pass"], &csv_rows)?;
    out.json("verify_report.json", &report)?;
    Ok((out.finish(cfg, cfg.seed)?, report))
}

// ---------------------------------------------------------------- predict-loss

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictLossConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub data: DataSource,
    pub eval_set: EvalSet,
    #[serde(default)]
    pub model: ModelSource,
    #[serde(default = "default_source_ball")]
    pub source: Ball,
    /// Each is joined to the source.
    pub targets: Vec<Ball>,
    /// Expansion slope; by default the theoretical slope at the model's own
    /// condition number (affine extractors only).
    #[serde(default)]
    pub slope: Option<f64>,
    #[serde(default = "default_rho")]
    pub rho: f64,
    #[serde(default = "auto")]
    pub method: RiskMethod,
    #[serde(default = "AttackConfig::evaluation")]
    pub attack: AttackConfig,
    #[serde(default = "AttackConfig::variation")]
    pub variation: AttackConfig,
}

fn default_source_ball() -> Ball {
    Ball::linf(0.01)
}

fn default_rho() -> f64 {
    CE_LIPSCHITZ
}

impl Default for PredictLossConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataSource::default(),
            eval_set: EvalSet::Train,
            model: ModelSource::default(),
            source: default_source_ball(),
            targets: vec![Ball::linf(0.05), Ball::l2(0.1)],
            slope: None,
            rho: default_rho(),
            method: RiskMethod::Auto,
            attack: AttackConfig::evaluation(),
            variation: AttackConfig::variation(),
        }
    }
}

impl ExperimentConfig for PredictLossConfig {
    const KIND: &'static str = "predict-loss";
    fn seed_mut(&mut self) -> &mut u64 {
        &mut self.seed
    }
    fn validate(&self) -> Result<()> {
        if self.targets.is_empty() {
            return Err(Error::Config("targets is empty".into()));
        }
        if let Some(s) = self.slope {
            if !(s >= 1.0) {
                return Err(Error::Config(format!("slope must be >= 1, got {s}")));
            }
        }
        if !(self.rho >= 0.0) {
            return Err(Error::Config("rho must be nonnegative".into()));
        }
        self.attack.validate()?;
        self.variation.validate()
    }
}

pub fn run_predict_loss(cfg: &PredictLossConfig, out_dir: &Path) -> Result<ExperimentManifest> {
    let mut out = Outputs::new(out_dir)?;
    let data = cfg.data.load(cfg.eval_set, cfg.seed)?;
    let model = cfg.model.load(data.dim(), cfg.seed)?;
    let attack = cfg.attack.with_seed(cfg.seed);
    let src: ThreatModel = cfg.source.into();
    let source_loss = empirical_adv_risk(&model, &data, &src, cfg.method, &attack)?;
    let v_s = dataset_variation(&model, &data, &src, &Estimator::Auto(cfg.variation), cfg.seed)?.mean;
    let sigma_g = model.classifier_lipschitz()?;
    let mut rows = Vec::new();
    for t in &cfg.targets {
        let slope = match (cfg.slope, model.linear_weight()) {
            (Some(s), _) => s,
            (None, Some(w)) => {
                let b = svd_spectrum(w)?.condition_number;
                if !b.is_finite() {
                    return Err(Error::Degenerate("extractor weight is rank deficient; give `slope` explicitly".into()));
                }
                theoretical_slope_cross_norm(&SlopeFormula {
                    p: cfg.source.p,
                    q: t.p,
                    eps1: cfg.source.eps,
                    eps2: t.eps,
                    n: w.cols(),
                    b,
                })?
            }
            (None, None) => return Err(Error::Config("nonlinear extractor: `slope` must be given".into())),
        };
        let predicted = predict_target_loss(source_loss.mean_loss, v_s, cfg.rho, sigma_g, slope);
        let measured = empirical_adv_risk(&model, &data, &src.with(*t), cfg.method, &attack)?;
        rows.push(vec![
            src.with(*t).to_string(),
            f(source_loss.mean_loss),
            f(v_s),
            f(slope),
            f(predicted),
            f(measured.mean_loss),
            method_label(measured.method).into(),
            (measured.mean_loss <= predicted).to_string(),
        ]);
    }
    out.csv(
        "predict_loss.csv",
        &["target", "source_loss", "source_variation", "slope", "predicted", "measured", "method", "holds"],
        &rows,
    )?;
    out.finish(cfg, cfg.seed)
}
