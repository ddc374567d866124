//! Expansion functions relating source variation to target variation.
//!
//! An expansion function `s` satisfies `s(0) = 0`, `s(x) >= x` and
//! `s(V(h, S)) >= V(h, T)` over a model class. For affine extractors with
//! condition number at most `B` and `l_p` balls it can be taken linear; the
//! slopes below follow from the singular-value sandwich in
//! [`crate::variation::variation_bounds`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::threat::Norm;

/// Source variations at or below this are excluded from slope fits.
pub const DEFAULT_ZERO_TOL: f64 = 1e-8;

/// Minimum-slope linear fit through the origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpansionFit {
    pub slope: f64,
    /// Retained `(source_var, target_var)` points.
    pub points: Vec<(f64, f64)>,
    pub excluded_count: usize,
}

/// Smallest `k >= 1` with `k x >= y` on every point with `x > zero_tol`.
pub fn fit_min_slope(points: &[(f64, f64)], zero_tol: f64) -> Result<ExpansionFit> {
    if let Some(p) = points.iter().find(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite point {p:?}")));
    }
    let (kept, dropped): (Vec<(f64, f64)>, Vec<(f64, f64)>) = points.iter().partition(|(x, _)| *x > zero_tol);
    if kept.is_empty() {
        return Err(Error::Degenerate(format!(
            "all {} points have source variation <= {zero_tol}",
            points.len()
        )));
    }
    let slope = kept.iter().map(|(x, y)| y / x).fold(1.0, f64::max);
    Ok(ExpansionFit { slope, points: kept, excluded_count: dropped.len() })
}

/// Parameters of a theoretical slope: source `l_p(eps1)`, target
/// `l_p(eps1) ∪ l_q(eps2)`, input dimension `n`, condition-number bound `b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlopeFormula {
    pub p: Norm,
    pub q: Norm,
    pub eps1: f64,
    pub eps2: f64,
    pub n: usize,
    pub b: f64,
}

impl SlopeFormula {
    fn validate(&self) -> Result<()> {
        if !(self.eps1 > 0.0 && self.eps1.is_finite()) {
            return Err(Error::InvalidInput(format!("eps1 must be positive, got {}", self.eps1)));
        }
        if !(self.eps2 >= 0.0 && self.eps2.is_finite()) {
            return Err(Error::InvalidInput(format!("eps2 must be nonnegative, got {}", self.eps2)));
        }
        if !(self.b >= 1.0) {
            return Err(Error::InvalidInput(format!("condition bound must be >= 1, got {}", self.b)));
        }
        if self.n == 0 {
            return Err(Error::InvalidInput("input dimension must be positive".into()));
        }
        Ok(())
    }
}

/// Slope for growing a single `l_p` ball from `eps1` to `eps2`:
/// `sqrt(n) B eps2/eps1` for `p = 1`, `B eps2/eps1` for `p = 2`,
/// `sqrt(n) B eps2/eps1` for `p = inf`.
pub fn theoretical_slope_same_norm(f: &SlopeFormula) -> Result<f64> {
    f.validate()?;
    if f.p != f.q {
        return Err(Error::InvalidInput(format!("same-norm slope needs p = q, got {} and {}", f.p, f.q)));
    }
    if f.eps2 < f.eps1 {
        return Err(Error::InvalidInput(format!("eps2 = {} is below eps1 = {}", f.eps2, f.eps1)));
    }
    let ratio = f.b * f.eps2 / f.eps1;
    let rn = (f.n as f64).sqrt();
    Ok(match f.p {
        Norm::L2 => ratio,
        Norm::L1 | Norm::LInf => rn * ratio,
    })
}

/// Slope for the target `l_p(eps1) ∪ l_q(eps2)`.
///
/// | p | q | slope |
/// |---|---|---|
/// | 1 | 2 | `sqrt(n) B max(eps2, eps1) / eps1` |
/// | 1 | inf | `sqrt(n) B max(sqrt(n) eps2, eps1) / eps1` |
/// | 2 | 1 | `B max(eps2, eps1) / eps1` |
/// | 2 | inf | `B max(sqrt(n) eps2, eps1) / eps1` |
/// | inf | 1, 2 | `B max(eps2, sqrt(n) eps1) / eps1` |
///
/// With `p = q` the union is the larger ball and the same-norm slope applies.
pub fn theoretical_slope_cross_norm(f: &SlopeFormula) -> Result<f64> {
    f.validate()?;
    let (e1, e2, b) = (f.eps1, f.eps2, f.b);
    let rn = (f.n as f64).sqrt();
    Ok(match (f.p, f.q) {
        (p, q) if p == q => return theoretical_slope_same_norm(&SlopeFormula { eps2: e2.max(e1), ..*f }),
        (Norm::L1, Norm::L2) => rn * b * e2.max(e1) / e1,
        (Norm::L1, Norm::LInf) => rn * b * (rn * e2).max(e1) / e1,
        (Norm::L2, Norm::L1) => b * e2.max(e1) / e1,
        (Norm::L2, Norm::LInf) => b * (rn * e2).max(e1) / e1,
        (Norm::LInf, _) => b * e2.max(rn * e1) / e1,
        (p, q) => unreachable!("covered above: ({p}, {q})"),
    })
}

/// `source_loss + rho * sigma_g * slope * source_variation`.
///
/// All inputs are expected nonnegative with `slope >= 1`.
pub fn predict_target_loss(source_loss: f64, source_variation: f64, rho: f64, sigma_g: f64, slope: f64) -> f64 {
    source_loss + rho * sigma_g * slope * source_variation
}

/// Lipschitz constant of the logistic/softmax cross-entropy with respect to
/// the logits, the `rho` in [`predict_target_loss`].
pub const CE_LIPSCHITZ: f64 = std::f64::consts::SQRT_2;
