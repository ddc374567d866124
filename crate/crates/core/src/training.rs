//! Adversarial training with variation regularization, and risk/gap
//! evaluation.
//!
//! Each step minimizes
//!
//! ```text
//! (1/m) Σ [ max_{x' in S(x)} CE(f(x'), y) + λ max_{x1, x2 in S(x)} ||h(x1) - h(x2)||_2 ]
//! ```
//!
//! by computing both inner maxima with PGD on the current parameters, then
//! taking an SGD-momentum step at the frozen witnesses.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{exact_adv_loss_union, exact_worst_margin_union, pgd_attack, AttackConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{argmax, Model, Objective, ObjectiveSample};
use crate::numerics::RandomSource;
use crate::threat::{Ball, ThreatModel};
use crate::variation::{fast_lpv, union_variation, Estimator, L2Distance};

const STREAM_SHUFFLE: u64 = 1;
const STREAM_ATTACK: u64 = 2;
const STREAM_VARIATION: u64 = 3;
const STREAM_EVAL: u64 = 4;

/// How training computes variation witnesses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TrainVariation {
    Pgd(AttackConfig),
    /// Penalty method under the `l_2` distance with the largest source radius.
    FastLpv { steps: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda: f64,
    pub epochs: usize,
    /// `None` trains full batch.
    pub batch_size: Option<usize>,
    pub learning_rate: f64,
    pub momentum: f64,
    pub source: ThreatModel,
    pub attack: AttackConfig,
    pub variation: TrainVariation,
    /// Reshuffle every epoch; only matters with mini-batches.
    pub shuffle: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.0,
            epochs: 200,
            batch_size: None,
            learning_rate: 0.1,
            momentum: 0.9,
            source: Ball::linf(0.01).into(),
            attack: AttackConfig::training(),
            variation: TrainVariation::Pgd(AttackConfig::variation()),
            shuffle: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidInput(format!("lambda must be nonnegative, got {}", self.lambda)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidInput(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidInput(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.batch_size == Some(0) {
            return Err(Error::InvalidInput("batch size must be positive".into()));
        }
        self.attack.validate()?;
        if let TrainVariation::Pgd(c) = &self.variation {
            c.validate()?;
        }
        Ok(())
    }
}

/// Per-epoch means over the training set, measured on the parameters each
/// batch was attacked with (before its update).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub clean_loss: f64,
    pub adv_loss: f64,
    pub variation: f64,
    pub objective: f64,
    pub clean_acc: f64,
    pub adv_acc: f64,
}

pub const TRAIN_LOG_HEADER: [&str; 7] = ["epoch", "clean_loss", "adv_loss", "variation", "objective", "clean_acc", "adv_acc"];

struct SampleStats {
    x_adv: Vec<f64>,
    pair: (Vec<f64>, Vec<f64>),
    clean_loss: f64,
    adv_loss: f64,
    variation: f64,
    clean_ok: bool,
    adv_ok: bool,
}

/// Runs [`at_vr_train_with`] without an epoch callback.
pub fn at_vr_train(init: &Model, data: &Dataset, cfg: &TrainConfig) -> Result<(Model, Vec<EpochRecord>)> {
    at_vr_train_with(init, data, cfg, |_, _, _| {})
}

/// Trains from `init`. `on_epoch(epoch, model, record)` sees the model after
/// each epoch's updates. Per-sample work inside a batch runs in parallel;
/// every sample draws from its own `(seed, stream, epoch, index)` substream,
/// so the result is the same for any thread count.
pub fn at_vr_train_with<F>(
    init: &Model,
    data: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<(Model, Vec<EpochRecord>)>
where
    F: FnMut(usize, &Model, &EpochRecord),
{
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    crate::error::check_dim(init.input_dim(), data.dim())?;
    if data.num_classes() > init.num_classes() {
        return Err(Error::InvalidInput(format!(
            "dataset has {} classes but the model only {}",
            data.num_classes(),
            init.num_classes()
        )));
    }
    let mut model = init.clone();
    let mut params = model.params();
    let mut velocity = vec![0.0; params.len()];
    let batch = cfg.batch_size.unwrap_or(data.len()).min(data.len());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        if cfg.shuffle && batch < data.len() {
            let mut rng = RandomSource::derive(cfg.seed, &[STREAM_SHUFFLE, epoch as u64]);
            order = (0..data.len()).collect();
            rng.shuffle(&mut order);
        }
        let mut sums = [0.0f64; 5];
        for chunk in order.chunks(batch) {
            let stats: Vec<SampleStats> = chunk
                .par_iter()
                .map(|&i| sample_stats(&model, data, i, epoch, cfg))
                .collect::<Result<_>>()?;
            let samples: Vec<ObjectiveSample<'_>> = chunk
                .iter()
                .zip(&stats)
                .map(|(&i, s)| ObjectiveSample {
                    input: &s.x_adv,
                    label: data.labels()[i],
                    pair: Some((s.pair.0.as_slice(), s.pair.1.as_slice())),
                })
                .collect();
            let objective = if cfg.lambda == 0.0 { Objective::CrossEntropy } else { Objective::Regularized { lambda: cfg.lambda } };
            let (value, grad) = model.grad_params(&samples, objective).map_err(|e| {
                Error::Numeric(format!("epoch {epoch}: objective evaluation failed: {e}"))
            })?;
            if !value.is_finite() {
                return Err(Error::Numeric(format!("epoch {epoch}: non-finite objective {value}")));
            }
            for ((p, v), g) in params.iter_mut().zip(velocity.iter_mut()).zip(&grad) {
                *v = cfg.momentum * *v + g;
                *p -= cfg.learning_rate * *v;
            }
            model.set_params(&params)?;
            for s in &stats {
                sums[0] += s.clean_loss;
                sums[1] += s.adv_loss;
                sums[2] += s.variation;
                sums[3] += s.clean_ok as u8 as f64;
                sums[4] += s.adv_ok as u8 as f64;
            }
        }
        let m = data.len() as f64;
        let (adv_loss, variation) = (sums[1] / m, sums[2] / m);
        let record = EpochRecord {
            epoch,
            clean_loss: sums[0] / m,
            adv_loss,
            variation,
            objective: adv_loss + cfg.lambda * variation,
            clean_acc: sums[3] / m,
            adv_acc: sums[4] / m,
        };
        on_epoch(epoch, &model, &record);
        log.push(record);
    }
    Ok((model, log))
}

fn sample_stats(model: &Model, data: &Dataset, i: usize, epoch: usize, cfg: &TrainConfig) -> Result<SampleStats> {
    let x = data.inputs()[i].as_slice();
    let y = data.labels()[i];
    let key = [epoch as u64, i as u64];
    let mut rng = RandomSource::derive(cfg.seed, &[STREAM_ATTACK, key[0], key[1]]);
    let adv = pgd_attack(model, x, y, &cfg.source, &cfg.attack, &mut rng)?;
    let mut vrng = RandomSource::derive(cfg.seed, &[STREAM_VARIATION, key[0], key[1]]);
    let var = match &cfg.variation {
        TrainVariation::Pgd(vc) => union_variation(model, x, &cfg.source, &Estimator::Pgd(*vc), &mut vrng)?,
        TrainVariation::FastLpv { steps } => {
            let eps = cfg.source.members().iter().map(|b| b.eps).fold(0.0, f64::max);
            fast_lpv(model, &L2Distance, x, eps, *steps, &mut vrng)?
        }
    };
    let clean = model.forward(x)?;
    let adv_fwd = model.forward(&adv.x_adv)?;
    Ok(SampleStats {
        clean_loss: crate::model::ce_loss(&clean.logits, y).value,
        adv_loss: adv.loss,
        variation: var.value,
        clean_ok: argmax(&clean.logits) == y,
        adv_ok: argmax(&adv_fwd.logits) == y,
        x_adv: adv.x_adv,
        pair: var.witness,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskMethod {
    Clean,
    Pgd,
    ExactLinear,
    /// Exact for binary affine models, PGD otherwise.
    Auto,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskEstimate {
    pub mean_loss: f64,
    pub accuracy: f64,
    /// Never `Auto`: the method actually used.
    pub method: RiskMethod,
}

/// Mean worst-case loss and worst-case accuracy over `data`.
///
/// With PGD a sample counts as correct when the loss-maximizing point is
/// still classified correctly; with the exact method, when the worst-case
/// margin stays positive.
pub fn empirical_adv_risk(
    model: &Model,
    data: &Dataset,
    tm: &ThreatModel,
    method: RiskMethod,
    cfg: &AttackConfig,
) -> Result<RiskEstimate> {
    if data.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let method = resolve_method(model, method);
    let per: Vec<(f64, bool)> = data
        .inputs()
        .par_iter()
        .zip(data.labels())
        .enumerate()
        .map(|(i, (x, &y))| -> Result<(f64, bool)> {
            match method {
                RiskMethod::Clean => {
                    let f = model.forward(x)?;
                    Ok((crate::model::ce_loss(&f.logits, y).value, argmax(&f.logits) == y))
                }
                RiskMethod::ExactLinear => {
                    let loss = exact_adv_loss_union(model, x, y, tm)?;
                    Ok((loss, exact_worst_margin_union(model, x, y, tm)? > 0.0))
                }
                _ => {
                    let mut rng = RandomSource::derive(cfg.seed, &[STREAM_EVAL, i as u64]);
                    let a = pgd_attack(model, x, y, tm, cfg, &mut rng)?;
                    Ok((a.loss, model.predict(&a.x_adv)? == y))
                }
            }
        })
        .collect::<Result<_>>()?;
    let m = per.len() as f64;
    Ok(RiskEstimate {
        mean_loss: per.iter().map(|p| p.0).sum::<f64>() / m,
        accuracy: per.iter().filter(|p| p.1).count() as f64 / m,
        method,
    })
}

fn resolve_method(model: &Model, method: RiskMethod) -> RiskMethod {
    match method {
        RiskMethod::Auto if model.is_binary_linear() => RiskMethod::ExactLinear,
        RiskMethod::Auto => RiskMethod::Pgd,
        m => m,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub target: String,
    pub source_loss: f64,
    pub target_loss: f64,
    pub gap: f64,
    pub target_acc: f64,
}

/// `L_T - L_S` for each target, all with one evaluation method. Targets are
/// expected to contain the source (build them with [`ThreatModel::with`]).
pub fn gap_curve(
    model: &Model,
    data: &Dataset,
    source: &ThreatModel,
    targets: &[ThreatModel],
    method: RiskMethod,
    cfg: &AttackConfig,
) -> Result<Vec<GapRow>> {
    let s = empirical_adv_risk(model, data, source, method, cfg)?;
    targets
        .iter()
        .map(|t| {
            let r = empirical_adv_risk(model, data, t, method, cfg)?;
            Ok(GapRow {
                target: t.to_string(),
                source_loss: s.mean_loss,
                target_loss: r.mean_loss,
                gap: r.mean_loss - s.mean_loss,
                target_acc: r.accuracy,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::StepSize;
    use crate::data::{gen_gaussian, GaussianSpec};

    fn small_task(seed: u64) -> (Model, Dataset) {
        let data = gen_gaussian(&GaussianSpec { n: 6, samples_per_class: 40, seed, ..Default::default() }).unwrap();
        let model = Model::linear_random(6, 3, 2, false, &mut RandomSource::new(seed + 100)).unwrap();
        (model, data)
    }

    #[test]
    fn zero_epochs_returns_init() {
        let (m, d) = small_task(0);
        let (out, log) = at_vr_train(&m, &d, &TrainConfig { epochs: 0, ..Default::default() }).unwrap();
        assert_eq!(out, m);
        assert!(log.is_empty());
    }

    // Independent plain adversarial-training loop; lambda = 0 must follow it exactly.
    #[test]
    fn lambda_zero_matches_plain_at() {
        let (m, d) = small_task(1);
        let cfg = TrainConfig { epochs: 5, batch_size: Some(16), ..Default::default() };
        let (trained, _) = at_vr_train(&m, &d, &cfg).unwrap();

        let mut plain = m.clone();
        let mut p = plain.params();
        let mut v = vec![0.0; p.len()];
        for epoch in 1..=cfg.epochs {
            let mut order: Vec<usize> = (0..d.len()).collect();
            RandomSource::derive(cfg.seed, &[STREAM_SHUFFLE, epoch as u64]).shuffle(&mut order);
            for chunk in order.chunks(16) {
                let advs: Vec<Vec<f64>> = chunk
                    .iter()
                    .map(|&i| {
                        let mut rng = RandomSource::derive(cfg.seed, &[STREAM_ATTACK, epoch as u64, i as u64]);
                        pgd_attack(&plain, &d.inputs()[i], d.labels()[i], &cfg.source, &cfg.attack, &mut rng).unwrap().x_adv
                    })
                    .collect();
                let batch: Vec<ObjectiveSample<'_>> = chunk
                    .iter()
                    .zip(&advs)
                    .map(|(&i, a)| ObjectiveSample { input: a, label: d.labels()[i], pair: None })
                    .collect();
                let (_, g) = plain.grad_params(&batch, Objective::CrossEntropy).unwrap();
                for j in 0..p.len() {
                    v[j] = 0.9 * v[j] + g[j];
                    p[j] -= 0.1 * v[j];
                }
                plain.set_params(&p).unwrap();
            }
        }
        let diff = trained.params().iter().zip(plain.params()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff <= 1e-15, "{diff}");
    }

    #[test]
    fn deterministic_across_thread_counts() {
        let (m, d) = small_task(2);
        let cfg = TrainConfig { epochs: 3, lambda: 0.5, ..Default::default() };
        let run = |threads| {
            rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(|| at_vr_train(&m, &d, &cfg).unwrap())
        };
        let (a, la) = run(1);
        let (b, lb) = run(4);
        assert_eq!(a.params(), b.params());
        assert_eq!(la, lb);
    }

    #[test]
    fn objective_decreases() {
        let (m, d) = small_task(3);
        let cfg = TrainConfig { epochs: 30, lambda: 1.0, ..Default::default() };
        let (_, log) = at_vr_train(&m, &d, &cfg).unwrap();
        assert!(log.last().unwrap().objective < log[0].objective);
    }

    #[test]
    fn fast_lpv_variant_trains() {
        let (m, d) = small_task(4);
        let cfg = TrainConfig { epochs: 3, lambda: 1.0, variation: TrainVariation::FastLpv { steps: 5 }, ..Default::default() };
        let (_, log) = at_vr_train(&m, &d, &cfg).unwrap();
        assert!(log.iter().all(|r| r.variation.is_finite()));
    }

    #[test]
    fn rejects_bad_config() {
        let (m, d) = small_task(5);
        for cfg in [
            TrainConfig { lambda: -1.0, ..Default::default() },
            TrainConfig { momentum: 1.0, ..Default::default() },
            TrainConfig { learning_rate: 0.0, ..Default::default() },
            TrainConfig { batch_size: Some(0), ..Default::default() },
        ] {
            assert!(at_vr_train(&m, &d, &cfg).is_err());
        }
    }

    #[test]
    fn constant_model_risk_is_log_two() {
        let (mut m, d) = small_task(6);
        m.set_params(&vec![0.0; m.num_params()]).unwrap();
        for method in [RiskMethod::Clean, RiskMethod::Pgd, RiskMethod::ExactLinear] {
            let r = empirical_adv_risk(&m, &d, &Ball::l2(0.3).into(), method, &AttackConfig::evaluation()).unwrap();
            assert!((r.mean_loss - 2f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_radius_equals_clean() {
        let (m, d) = small_task(7);
        let clean = empirical_adv_risk(&m, &d, &Ball::linf(0.0).into(), RiskMethod::Clean, &AttackConfig::evaluation()).unwrap();
        for method in [RiskMethod::Pgd, RiskMethod::ExactLinear] {
            let r = empirical_adv_risk(&m, &d, &Ball::linf(0.0).into(), method, &AttackConfig::evaluation()).unwrap();
            assert!((r.mean_loss - clean.mean_loss).abs() < 1e-12);
            assert_eq!(r.accuracy, clean.accuracy);
        }
    }

    #[test]
    fn pgd_risk_close_to_exact() {
        let (m, d) = small_task(8);
        let cfg = AttackConfig { steps: 40, step_size: StepSize::Relative(0.25), ..AttackConfig::evaluation() };
        for tm in [ThreatModel::from(Ball::linf(0.05)), Ball::l2(0.2).into()] {
            let e = empirical_adv_risk(&m, &d, &tm, RiskMethod::ExactLinear, &cfg).unwrap();
            let p = empirical_adv_risk(&m, &d, &tm, RiskMethod::Pgd, &cfg).unwrap();
            assert!((e.mean_loss - p.mean_loss).abs() < 1e-4, "{} vs {}", e.mean_loss, p.mean_loss);
        }
        assert_eq!(resolve_method(&m, RiskMethod::Auto), RiskMethod::ExactLinear);
    }

    #[test]
    fn gap_curve_rules() {
        let (m, d) = small_task(9);
        let s: ThreatModel = Ball::linf(0.01).into();
        let targets: Vec<ThreatModel> = [0.01, 0.02, 0.05, 0.1].iter().map(|&e| s.with(Ball::linf(e))).collect();
        let rows = gap_curve(&m, &d, &s, &targets, RiskMethod::ExactLinear, &AttackConfig::evaluation()).unwrap();
        assert_eq!(rows[0].gap, 0.0);
        assert!(rows.windows(2).all(|w| w[1].gap >= w[0].gap));
        assert!(empirical_adv_risk(&m, &d.slice(0..0), &s, RiskMethod::Clean, &AttackConfig::evaluation()).is_err());
    }
}
