//! Variation of a feature extractor over a threat model,
//!
//! ```text
//! V(h, N) = E_x max_{x1, x2 in N(x)} ||h(x1) - h(x2)||_2
//! ```
//!
//! This module estimates the inner maximum per sample (simultaneous PGD on
//! both points, or the Lagrangian penalty method for general distances),
//! evaluates it exactly for affine extractors, bounds it with extreme
//! singular values, and estimates the directed Hausdorff distance between a
//! target and a source neighborhood in feature space.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{ascent_direction, AttackConfig};
use crate::data::Dataset;
use crate::error::{check_dim, Error, Result};
use crate::model::Model;
use crate::numerics::{norm2, svd, svd_spectrum, Matrix, RandomSource};
use crate::threat::{project_unchecked, random_extreme_point, random_init, Ball, Norm, ThreatModel};

/// Vertex enumeration limit for exact `l_inf` variation (`2^(n-1)` patterns).
pub const MAX_VERTEX_DIM: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariationMethod {
    Pgd,
    ExactClosedForm,
    VertexEnum,
    FastLpv,
}

impl VariationMethod {
    pub fn label(self) -> &'static str {
        match self {
            VariationMethod::Pgd => "pgd",
            VariationMethod::ExactClosedForm => "exact_closed_form",
            VariationMethod::VertexEnum => "vertex_enum",
            VariationMethod::FastLpv => "fast_lpv",
        }
    }
}

/// A measured or exact per-sample variation with the pair attaining it.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationEstimate {
    pub value: f64,
    pub witness: (Vec<f64>, Vec<f64>),
    pub method: VariationMethod,
    /// One value per union member; a single entry for plain balls.
    pub member_values: Vec<f64>,
    /// Distances `d(x1, x)`, `d(x2, x)` reported by soft-constraint methods.
    pub witness_distances: Option<(f64, f64)>,
}

impl VariationEstimate {
    fn from_witness(model: &Model, x1: Vec<f64>, x2: Vec<f64>, method: VariationMethod) -> Self {
        let value = feature_distance(model, &x1, &x2);
        Self { value, witness: (x1, x2), method, member_values: vec![value], witness_distances: None }
    }
}

/// How to compute the per-member maximum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Estimator {
    /// Simultaneous PGD on both points.
    Pgd(AttackConfig),
    /// Closed form / vertex enumeration; affine extractors only.
    Exact,
    /// Exact when the extractor is affine and the ball admits it, else PGD.
    Auto(AttackConfig),
}

fn feature_distance(model: &Model, x1: &[f64], x2: &[f64]) -> f64 {
    let h1 = model.features_unchecked(x1);
    let h2 = model.features_unchecked(x2);
    Norm::L2.distance(&h1, &h2)
}

// Gradients of ||h(x1) - h(x2)|| with respect to x1 and x2, plus the value.
fn pair_gradients(model: &Model, x1: &[f64], x2: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let h1 = model.features_unchecked(x1);
    let h2 = model.features_unchecked(x2);
    let diff: Vec<f64> = h1.iter().zip(&h2).map(|(a, b)| a - b).collect();
    let v = norm2(&diff);
    if v == 0.0 {
        let n = x1.len();
        return (0.0, vec![0.0; n], vec![0.0; n]);
    }
    let u: Vec<f64> = diff.iter().map(|d| d / v).collect();
    let g1 = model.extractor_vjp_unchecked(x1, &u);
    let g2: Vec<f64> = model.extractor_vjp_unchecked(x2, &u).into_iter().map(|g| -g).collect();
    (v, g1, g2)
}

fn finite_value(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric(format!("non-finite variation {v}")))
    }
}

/// Simultaneous projected ascent on `x1` and `x2`: both start from a random
/// point of the ball and take one step each per iteration against the same
/// objective value. Reports the final pair, or the best pair seen when
/// `cfg.keep_best` is set. Restarts keep the largest reported value.
pub fn variation_pgd(
    model: &Model,
    x: &[f64],
    ball: &Ball,
    cfg: &AttackConfig,
    rng: &mut RandomSource,
) -> Result<VariationEstimate> {
    check_dim(model.input_dim(), x.len())?;
    cfg.validate()?;
    if ball.eps == 0.0 {
        return Ok(VariationEstimate::from_witness(model, x.to_vec(), x.to_vec(), VariationMethod::Pgd));
    }
    let alpha = cfg.step_size.resolve(ball.eps);
    let mut best: Option<(f64, Vec<f64>, Vec<f64>)> = None;
    for _ in 0..cfg.restarts {
        let mut x1 = random_init(x, ball, rng);
        let mut x2 = random_init(x, ball, rng);
        cfg.clip_in_place(&mut x1);
        cfg.clip_in_place(&mut x2);
        let mut run_best: Option<(f64, Vec<f64>, Vec<f64>)> = None;
        for _ in 0..cfg.steps {
            let (v, g1, g2) = pair_gradients(model, &x1, &x2);
            finite_value(v)?;
            if cfg.keep_best && run_best.as_ref().map_or(true, |b| v > b.0) {
                run_best = Some((v, x1.clone(), x2.clone()));
            }
            let d1 = ascent_direction(ball.p, &g1);
            let d2 = ascent_direction(ball.p, &g2);
            let s1: Vec<f64> = x1.iter().zip(&d1).map(|(a, d)| a + alpha * d).collect();
            let s2: Vec<f64> = x2.iter().zip(&d2).map(|(a, d)| a + alpha * d).collect();
            x1 = project_unchecked(&s1, x, ball);
            x2 = project_unchecked(&s2, x, ball);
            cfg.clip_in_place(&mut x1);
            cfg.clip_in_place(&mut x2);
        }
        let v = finite_value(feature_distance(model, &x1, &x2))?;
        let candidate = match run_best {
            Some(b) if b.0 > v => b,
            _ => (v, x1, x2),
        };
        if best.as_ref().map_or(true, |b| candidate.0 > b.0) {
            best = Some(candidate);
        }
    }
    let (_, x1, x2) = best.expect("restarts >= 1");
    Ok(VariationEstimate::from_witness(model, x1, x2, VariationMethod::Pgd))
}

/// Exact `max ||W (x1 - x2)||_2` over the ball, witnessed around `anchor`.
///
/// * `l_2`: `2 eps sigma_max(W)` along the top right singular vector.
/// * `l_1`: `2 eps max_j ||W_{:,j}||_2` along the best coordinate axis.
/// * `l_inf`: `2 eps max_{s in {±1}^n} ||W s||_2` by Gray-code enumeration of
///   the `2^(n-1)` sign patterns up to global sign; needs `n <= 20`.
pub fn variation_exact_linear(w: &Matrix, ball: &Ball, anchor: &[f64]) -> Result<VariationEstimate> {
    check_dim(w.cols(), anchor.len())?;
    let n = w.cols();
    let (direction, method) = match ball.p {
        Norm::L2 => {
            let f = svd(w)?;
            (f.v.column(0), VariationMethod::ExactClosedForm)
        }
        Norm::L1 => {
            let norms = w.column_norms();
            let mut j = 0;
            for (k, v) in norms.iter().enumerate() {
                if *v > norms[j] {
                    j = k;
                }
            }
            let mut e = vec![0.0; n];
            if n > 0 {
                e[j] = 1.0;
            }
            (e, VariationMethod::ExactClosedForm)
        }
        Norm::LInf => {
            if n > MAX_VERTEX_DIM {
                return Err(Error::Capacity(format!(
                    "exact l_inf variation enumerates 2^(n-1) vertices; n = {n} exceeds {MAX_VERTEX_DIM}, use variation_pgd"
                )));
            }
            (best_vertex(w), VariationMethod::VertexEnum)
        }
    };
    let x1: Vec<f64> = anchor.iter().zip(&direction).map(|(a, d)| a + ball.eps * d).collect();
    let x2: Vec<f64> = anchor.iter().zip(&direction).map(|(a, d)| a - ball.eps * d).collect();
    let delta: Vec<f64> = x1.iter().zip(&x2).map(|(a, b)| a - b).collect();
    let value = norm2(&w.matvec_unchecked(&delta));
    Ok(VariationEstimate { value, witness: (x1, x2), method, member_values: vec![value], witness_distances: None })
}

// Sign vector maximizing ||W s||_2, last coordinate pinned to +1.
fn best_vertex(w: &Matrix) -> Vec<f64> {
    let n = w.cols();
    if n == 0 {
        return Vec::new();
    }
    let cols: Vec<Vec<f64>> = (0..n).map(|j| w.column(j)).collect();
    let mut signs = vec![1.0; n];
    let mut ws = w.matvec_unchecked(&signs);
    let mut best = (ws.iter().map(|v| v * v).sum::<f64>(), 0u64);
    let mut pattern = 0u64;
    for k in 1u64..(1u64 << (n - 1)) {
        let j = k.trailing_zeros() as usize;
        pattern ^= 1 << j;
        let s = signs[j];
        for (acc, c) in ws.iter_mut().zip(&cols[j]) {
            *acc -= 2.0 * s * c;
        }
        signs[j] = -s;
        let sq: f64 = ws.iter().map(|v| v * v).sum();
        if sq > best.0 {
            best = (sq, pattern);
        }
    }
    (0..n).map(|j| if best.1 >> j & 1 == 1 { -1.0 } else { 1.0 }).collect()
}

/// Exact variation of an affine-extractor model at `x` over one ball.
pub fn variation_exact_model(model: &Model, x: &[f64], ball: &Ball) -> Result<VariationEstimate> {
    let w = model
        .linear_weight()
        .ok_or_else(|| Error::Unsupported("exact variation needs an affine feature extractor".into()))?;
    variation_exact_linear(w, ball, x)
}

/// Bounds from extreme singular values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariationBounds {
    /// Absent when `W` has a nontrivial kernel.
    pub lower: Option<f64>,
    pub upper: f64,
}

/// Singular-value sandwich for affine extractors with weight `w`:
///
/// * upper: `2 eps n^(1/2 - 1/p) sigma_max` for `p >= 2`, `2 eps sigma_max`
///   for `p in {1, 2}`;
/// * lower: `2 eps sigma_min` for `p >= 2`, `2 eps sigma_min / sqrt(n)` for
///   `p = 1`.
///
/// The lower bound relies on `||W d|| >= sigma_min ||d||`, which fails when
/// the input dimension exceeds the feature dimension or `W` is rank
/// deficient; it is omitted then.
pub fn variation_bounds(w: &Matrix, ball: &Ball) -> Result<VariationBounds> {
    let stats = svd_spectrum(w)?;
    let n = w.cols() as f64;
    let eps = ball.eps;
    let upper = match ball.p {
        Norm::L1 | Norm::L2 => 2.0 * eps * stats.sigma_max,
        Norm::LInf => 2.0 * eps * n.sqrt() * stats.sigma_max,
    };
    let injective = w.cols() <= w.rows() && !stats.is_rank_deficient();
    let lower = injective.then(|| match ball.p {
        Norm::L2 | Norm::LInf => 2.0 * eps * stats.sigma_min,
        Norm::L1 => 2.0 * eps * stats.sigma_min / n.sqrt(),
    });
    Ok(VariationBounds { lower, upper })
}

/// Variation of one ball with the chosen estimator.
pub fn ball_variation(
    model: &Model,
    x: &[f64],
    ball: &Ball,
    estimator: &Estimator,
    rng: &mut RandomSource,
) -> Result<VariationEstimate> {
    match estimator {
        Estimator::Pgd(cfg) => variation_pgd(model, x, ball, cfg, rng),
        Estimator::Exact => variation_exact_model(model, x, ball),
        Estimator::Auto(cfg) => {
            if exact_available(model, ball) {
                variation_exact_model(model, x, ball)
            } else {
                variation_pgd(model, x, ball, cfg, rng)
            }
        }
    }
}

pub fn exact_available(model: &Model, ball: &Ball) -> bool {
    model.is_linear() && (ball.p != Norm::LInf || model.input_dim() <= MAX_VERTEX_DIM)
}

/// Maximum of the member variations; the witness comes from the first
/// member attaining it.
pub fn union_variation(
    model: &Model,
    x: &[f64],
    tm: &ThreatModel,
    estimator: &Estimator,
    rng: &mut RandomSource,
) -> Result<VariationEstimate> {
    let mut best: Option<VariationEstimate> = None;
    let mut values = Vec::with_capacity(tm.members().len());
    for ball in tm.members() {
        let est = ball_variation(model, x, ball, estimator, rng)?;
        values.push(est.value);
        if best.as_ref().map_or(true, |b| est.value > b.value) {
            best = Some(est);
        }
    }
    let mut best = best.expect("threat models are nonempty");
    best.member_values = values;
    Ok(best)
}

/// Differentiable distance used by [`fast_lpv`].
pub trait Distance: Sync {
    fn distance(&self, a: &[f64], b: &[f64]) -> f64;
    /// Gradient of `distance(a, b)` with respect to `a`.
    fn grad_first(&self, a: &[f64], b: &[f64]) -> Vec<f64>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct L2Distance;

impl Distance for L2Distance {
    fn distance(&self, a: &[f64], b: &[f64]) -> f64 {
        Norm::L2.distance(a, b)
    }

    fn grad_first(&self, a: &[f64], b: &[f64]) -> Vec<f64> {
        let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
        let r = norm2(&d);
        if r == 0.0 {
            return vec![0.0; d.len()];
        }
        d.into_iter().map(|v| v / r).collect()
    }
}

/// `d(a, b) = ||M (a - b)||_2` for a fixed map `M`; a stand-in for a learned
/// perceptual distance.
#[derive(Debug, Clone)]
pub struct LinearMapDistance {
    map: Matrix,
}

impl LinearMapDistance {
    pub fn new(map: Matrix) -> Self {
        Self { map }
    }

    /// `k x n` map with `N(0, 1/k)` entries.
    pub fn random(input_dim: usize, k: usize, rng: &mut RandomSource) -> Self {
        Self { map: Matrix::random_normal(k, input_dim, 1.0 / (k.max(1) as f64).sqrt(), rng) }
    }
}

impl Distance for LinearMapDistance {
    fn distance(&self, a: &[f64], b: &[f64]) -> f64 {
        let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
        norm2(&self.map.matvec_unchecked(&d))
    }

    fn grad_first(&self, a: &[f64], b: &[f64]) -> Vec<f64> {
        let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
        let md = self.map.matvec_unchecked(&d);
        let r = norm2(&md);
        if r == 0.0 {
            return vec![0.0; d.len()];
        }
        self.map.tr_matvec_unchecked(&md).into_iter().map(|v| v / r).collect()
    }
}

fn checked_distance(dist: &dyn Distance, a: &[f64], b: &[f64]) -> Result<f64> {
    let d = dist.distance(a, b);
    if !d.is_finite() || d < 0.0 {
        return Err(Error::InvalidDistance(format!("distance returned {d}")));
    }
    Ok(d)
}

/// Lagrangian-penalty variation under a general distance.
///
/// Maximizes `||h(x1) - h(x2)|| - tau (max(0, d(x1,x) - eps) + max(0, d(x2,x) - eps))`
/// with `tau = 10^(i/n)` and step length `eps * 0.1^(i/n)` at iteration `i`,
/// measured in units of `d` along the normalized gradient. Both points start
/// at `x + 0.01 N(0, I)`. The constraint is soft, so the witnesses may end
/// slightly outside the `eps`-ball; their distances are reported.
pub fn fast_lpv(
    model: &Model,
    dist: &dyn Distance,
    x: &[f64],
    eps: f64,
    steps: usize,
    rng: &mut RandomSource,
) -> Result<VariationEstimate> {
    check_dim(model.input_dim(), x.len())?;
    if !(eps >= 0.0) {
        return Err(Error::InvalidInput(format!("radius must be nonnegative, got {eps}")));
    }
    let self_d = checked_distance(dist, x, x)?;
    if self_d > 1e-12 {
        return Err(Error::InvalidDistance(format!("d(x, x) = {self_d}, expected 0")));
    }
    let mut x1: Vec<f64> = x.iter().map(|v| v + 0.01 * rng.normal()).collect();
    let mut x2: Vec<f64> = x.iter().map(|v| v + 0.01 * rng.normal()).collect();
    let n = steps.max(1) as f64;
    for i in 1..=steps {
        let frac = i as f64 / n;
        let tau = 10f64.powf(frac);
        let (_, mut g1, mut g2) = pair_gradients(model, &x1, &x2);
        for (xi, g) in [(&x1, &mut g1), (&x2, &mut g2)] {
            if checked_distance(dist, xi, x)? > eps {
                let dg = dist.grad_first(xi, x);
                for (gj, dj) in g.iter_mut().zip(dg) {
                    *gj -= tau * dj;
                }
            }
        }
        let eta = eps * 0.1f64.powf(frac);
        let s1 = lpv_step(dist, &x1, &g1, eta)?;
        let s2 = lpv_step(dist, &x2, &g2, eta)?;
        x1 = s1;
        x2 = s2;
    }
    let d1 = checked_distance(dist, &x1, x)?;
    let d2 = checked_distance(dist, &x2, x)?;
    let mut est = VariationEstimate::from_witness(model, x1, x2, VariationMethod::FastLpv);
    finite_value(est.value)?;
    est.witness_distances = Some((d1, d2));
    Ok(est)
}

// x + (eta / m) * g/||g||, with m the directional rate of d along the step.
fn lpv_step(dist: &dyn Distance, x: &[f64], grad: &[f64], eta: f64) -> Result<Vec<f64>> {
    let gn = norm2(grad);
    if gn == 0.0 || !gn.is_finite() {
        return Ok(x.to_vec());
    }
    let delta: Vec<f64> = grad.iter().map(|g| g / gn).collect();
    let probe: Vec<f64> = x.iter().zip(&delta).map(|(a, d)| a + 0.1 * d).collect();
    let m = checked_distance(dist, x, &probe)? / 0.1;
    if m == 0.0 {
        return Ok(x.to_vec());
    }
    Ok(x.iter().zip(&delta).map(|(a, d)| a + eta / m * d).collect())
}

/// Settings for [`hausdorff_estimate`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HausdorffConfig {
    /// Outer ascent over the target.
    pub outer: AttackConfig,
    pub inner_steps: usize,
    pub inner_restarts: usize,
    /// Extra outer starting points on the boundary of each target ball.
    pub boundary_samples: usize,
}

impl Default for HausdorffConfig {
    fn default() -> Self {
        Self {
            outer: AttackConfig { steps: 20, restarts: 2, keep_best: true, ..AttackConfig::training() },
            inner_steps: 20,
            inner_restarts: 5,
            boundary_samples: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HausdorffEstimate {
    pub value: f64,
    /// Target point and its nearest source point found.
    pub witness: (Vec<f64>, Vec<f64>),
}

/// Estimate of `max_{x1 in T(x)} min_{x2 in S(x)} ||h(x1) - h(x2)||_2`.
///
/// The outer maximum runs projected ascent on `x1` using the gradient at the
/// current inner minimizer; the inner minimum runs projected descent on `x2`,
/// started from the Euclidean projection of `x1` onto each source ball plus
/// random starts. Each reported pair is feasible, so the value never exceeds
/// the target variation.
pub fn hausdorff_estimate(
    model: &Model,
    x: &[f64],
    source: &ThreatModel,
    target: &ThreatModel,
    cfg: &HausdorffConfig,
    rng: &mut RandomSource,
) -> Result<HausdorffEstimate> {
    check_dim(model.input_dim(), x.len())?;
    cfg.outer.validate()?;
    let mut best = HausdorffEstimate { value: 0.0, witness: (x.to_vec(), x.to_vec()) };
    for ball in target.members() {
        let mut starts = Vec::new();
        if ball.eps > 0.0 {
            for _ in 0..cfg.outer.restarts {
                starts.push(random_init(x, ball, rng));
            }
            for _ in 0..cfg.boundary_samples {
                starts.push(random_extreme_point(x, ball, rng));
            }
        } else {
            starts.push(x.to_vec());
        }
        let alpha = cfg.outer.step_size.resolve(ball.eps);
        for start in starts {
            let mut x1 = start;
            cfg.outer.clip_in_place(&mut x1);
            for step in 0..=cfg.outer.steps {
                let (d, x2) = nearest_in_source(model, x, &x1, source, cfg, rng)?;
                if d > best.value {
                    best = HausdorffEstimate { value: d, witness: (x1.clone(), x2.clone()) };
                }
                if step == cfg.outer.steps || ball.eps == 0.0 {
                    break;
                }
                let (_, g1, _) = pair_gradients(model, &x1, &x2);
                let dir = ascent_direction(ball.p, &g1);
                let s: Vec<f64> = x1.iter().zip(&dir).map(|(a, d)| a + alpha * d).collect();
                x1 = project_unchecked(&s, x, ball);
                cfg.outer.clip_in_place(&mut x1);
            }
        }
    }
    finite_value(best.value)?;
    Ok(best)
}

// Approximate min over the source of the feature distance to h(x1).
fn nearest_in_source(
    model: &Model,
    x: &[f64],
    x1: &[f64],
    source: &ThreatModel,
    cfg: &HausdorffConfig,
    rng: &mut RandomSource,
) -> Result<(f64, Vec<f64>)> {
    let h1 = model.features_unchecked(x1);
    let dist = |p: &[f64]| Norm::L2.distance(&h1, &model.features_unchecked(p));
    let mut best: Option<(f64, Vec<f64>)> = None;
    for ball in source.members() {
        let mut starts = vec![project_unchecked(x1, x, ball)];
        if ball.eps > 0.0 {
            for _ in 1..cfg.inner_restarts {
                starts.push(random_init(x, ball, rng));
            }
        }
        for start in starts {
            let mut x2 = start;
            cfg.outer.clip_in_place(&mut x2);
            let mut d = dist(&x2);
            let mut local = (d, x2.clone());
            if ball.eps > 0.0 {
                for t in 0..cfg.inner_steps {
                    if d == 0.0 {
                        break;
                    }
                    let (_, _, g2) = pair_gradients(model, x1, &x2);
                    let gn = norm2(&g2);
                    if gn == 0.0 {
                        break;
                    }
                    // geometric decay from eps/2 down to eps/200
                    let beta = 0.5 * ball.eps * 0.01f64.powf(t as f64 / cfg.inner_steps.max(1) as f64);
                    let s: Vec<f64> = x2.iter().zip(&g2).map(|(a, g)| a - beta * g / gn).collect();
                    x2 = project_unchecked(&s, x, ball);
                    cfg.outer.clip_in_place(&mut x2);
                    d = dist(&x2);
                    if d < local.0 {
                        local = (d, x2.clone());
                    }
                }
            }
            if best.as_ref().map_or(true, |b| local.0 < b.0) {
                best = Some(local);
            }
        }
    }
    let (d, x2) = best.expect("threat models are nonempty");
    Ok((finite_value(d)?, x2))
}

/// Mean variation over a dataset with per-sample estimates.
#[derive(Debug, Clone)]
pub struct DatasetVariation {
    pub mean: f64,
    pub per_sample: Vec<VariationEstimate>,
}

/// Mean of per-sample variations. Sample `i` draws from the substream
/// `(seed, i)`, so results do not depend on scheduling; the mean is summed
/// in index order.
pub fn dataset_variation(
    model: &Model,
    data: &Dataset,
    tm: &ThreatModel,
    estimator: &Estimator,
    seed: u64,
) -> Result<DatasetVariation> {
    if data.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let per_sample: Vec<VariationEstimate> = data
        .inputs()
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let mut rng = RandomSource::derive(seed, &[STREAM_VARIATION, i as u64]);
            union_variation(model, x, tm, estimator, &mut rng)
        })
        .collect::<Result<_>>()?;
    let mean = per_sample.iter().map(|e| e.value).sum::<f64>() / per_sample.len() as f64;
    Ok(DatasetVariation { mean, per_sample })
}

pub(crate) const STREAM_VARIATION: u64 = 0x5641_5249;
