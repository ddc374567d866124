//! Threat models: `l_p` balls around an anchor point and finite unions of them.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::numerics::{norm2, RandomSource};

/// Slack accepted when deciding a point already lies in a ball. Keeps
/// projection idempotent under rounding.
const INSIDE_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Norm {
    #[serde(rename = "1")]
    L1,
    #[serde(rename = "2")]
    L2,
    #[serde(rename = "inf")]
    LInf,
}

impl Norm {
    pub fn of(self, v: &[f64]) -> f64 {
        match self {
            Norm::L1 => v.iter().map(|x| x.abs()).sum(),
            Norm::L2 => norm2(v),
            Norm::LInf => v.iter().fold(0.0, |m, x| m.max(x.abs())),
        }
    }

    /// Norm of `a - b`.
    pub fn distance(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Norm::L1 => a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum(),
            Norm::L2 => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
            Norm::LInf => a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs())),
        }
    }

    pub fn dual(self) -> Norm {
        match self {
            Norm::L1 => Norm::LInf,
            Norm::L2 => Norm::L2,
            Norm::LInf => Norm::L1,
        }
    }

    /// `1/p`, with `1/inf = 0`.
    pub fn reciprocal(self) -> f64 {
        match self {
            Norm::L1 => 1.0,
            Norm::L2 => 0.5,
            Norm::LInf => 0.0,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Norm::L1 => "1",
            Norm::L2 => "2",
            Norm::LInf => "inf",
        }
    }
}

impl fmt::Display for Norm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for Norm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1" | "l1" => Ok(Norm::L1),
            "2" | "l2" => Ok(Norm::L2),
            "inf" | "linf" => Ok(Norm::LInf),
            other => Err(Error::InvalidInput(format!("unknown norm {other:?}"))),
        }
    }
}

/// `{ x' : ||x' - anchor||_p <= eps }`
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ball {
    pub p: Norm,
    pub eps: f64,
}

impl Ball {
    pub fn new(p: Norm, eps: f64) -> Result<Self> {
        if !(eps >= 0.0) || !eps.is_finite() {
            return Err(Error::InvalidInput(format!("ball radius must be finite and nonnegative, got {eps}")));
        }
        Ok(Self { p, eps })
    }

    pub fn linf(eps: f64) -> Self {
        Self { p: Norm::LInf, eps }
    }

    pub fn l2(eps: f64) -> Self {
        Self { p: Norm::L2, eps }
    }

    pub fn l1(eps: f64) -> Self {
        Self { p: Norm::L1, eps }
    }

    pub fn scaled(self, factor: f64) -> Self {
        Self { p: self.p, eps: self.eps * factor }
    }
}

impl fmt::Display for Ball {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "l{}:{}", self.p, self.eps)
    }
}

/// A nonempty union of balls sharing the same anchor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ThreatModelRepr", into = "ThreatModelRepr")]
pub struct ThreatModel {
    members: Vec<Ball>,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum ThreatModelRepr {
    Union { union: Vec<Ball> },
    Ball(Ball),
}

impl TryFrom<ThreatModelRepr> for ThreatModel {
    type Error = Error;

    fn try_from(r: ThreatModelRepr) -> Result<Self> {
        let members = match r {
            ThreatModelRepr::Ball(b) => vec![b],
            ThreatModelRepr::Union { union } => union,
        };
        for b in &members {
            Ball::new(b.p, b.eps)?;
        }
        Self::union(members)
    }
}

impl From<ThreatModel> for ThreatModelRepr {
    fn from(tm: ThreatModel) -> Self {
        if tm.members.len() == 1 {
            ThreatModelRepr::Ball(tm.members[0])
        } else {
            ThreatModelRepr::Union { union: tm.members }
        }
    }
}

impl From<Ball> for ThreatModel {
    fn from(b: Ball) -> Self {
        Self { members: vec![b] }
    }
}

impl ThreatModel {
    pub fn ball(b: Ball) -> Self {
        b.into()
    }

    pub fn union(members: Vec<Ball>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::Empty("threat model union"));
        }
        Ok(Self { members })
    }

    /// `self ∪ {extra}`, the way targets are built from a source.
    pub fn with(&self, extra: Ball) -> Self {
        let mut members = self.members.clone();
        if !members.contains(&extra) {
            members.push(extra);
        }
        Self { members }
    }

    pub fn members(&self) -> &[Ball] {
        &self.members
    }
}

impl fmt::Display for ThreatModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let [b] = self.members.as_slice() {
            return write!(f, "{b}");
        }
        f.write_str("union(")?;
        for (i, b) in self.members.iter().enumerate() {
            if i > 0 {
                f.write_str("+")?;
            }
            write!(f, "{b}")?;
        }
        f.write_str(")")
    }
}

/// Euclidean projection of `v` onto the ball around `anchor`.
pub fn project(v: &[f64], anchor: &[f64], ball: &Ball) -> Result<Vec<f64>> {
    check_dim(anchor.len(), v.len())?;
    Ok(project_unchecked(v, anchor, ball))
}

pub(crate) fn project_unchecked(v: &[f64], anchor: &[f64], ball: &Ball) -> Vec<f64> {
    let eps = ball.eps;
    match ball.p {
        Norm::LInf => v.iter().zip(anchor).map(|(&x, &a)| x.clamp(a - eps, a + eps)).collect(),
        Norm::L2 => {
            let r = Norm::L2.distance(v, anchor);
            if r <= eps + INSIDE_SLACK {
                return v.to_vec();
            }
            let s = eps / r;
            v.iter().zip(anchor).map(|(&x, &a)| a + (x - a) * s).collect()
        }
        Norm::L1 => {
            let d: Vec<f64> = v.iter().zip(anchor).map(|(x, a)| x - a).collect();
            if Norm::L1.of(&d) <= eps + INSIDE_SLACK {
                return v.to_vec();
            }
            let theta = simplex_threshold(&d, eps);
            d.iter()
                .zip(anchor)
                .map(|(&di, &a)| a + di.signum() * (di.abs() - theta).max(0.0))
                .collect()
        }
    }
}

// Threshold `theta` such that sum_i max(|d_i| - theta, 0) = radius; assumes
// ||d||_1 > radius.
fn simplex_threshold(d: &[f64], radius: f64) -> f64 {
    let mut mags: Vec<f64> = d.iter().map(|x| x.abs()).collect();
    mags.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (j, &u) in mags.iter().enumerate() {
        cumsum += u;
        let t = (cumsum - radius) / (j + 1) as f64;
        if u - t > 0.0 {
            theta = t;
        } else {
            break;
        }
    }
    theta.max(0.0)
}

/// True iff some member ball contains `v` with slack `tol`.
pub fn contains(v: &[f64], anchor: &[f64], tm: &ThreatModel, tol: f64) -> Result<bool> {
    check_dim(anchor.len(), v.len())?;
    Ok(tm.members.iter().any(|b| b.p.distance(v, anchor) <= b.eps + tol))
}

/// `project(anchor + u)` with `u` coordinatewise uniform on `[-eps, eps]`.
pub fn random_init(anchor: &[f64], ball: &Ball, rng: &mut RandomSource) -> Vec<f64> {
    if ball.eps == 0.0 {
        return anchor.to_vec();
    }
    let shifted: Vec<f64> = anchor.iter().map(|&a| a + rng.uniform(-ball.eps, ball.eps)).collect();
    project_unchecked(&shifted, anchor, ball)
}

/// A point on the boundary of the ball: a random vertex for `l_inf`, a random
/// direction for `l_2`, a random signed axis point for `l_1`.
pub(crate) fn random_extreme_point(anchor: &[f64], ball: &Ball, rng: &mut RandomSource) -> Vec<f64> {
    let n = anchor.len();
    match ball.p {
        Norm::LInf => anchor.iter().map(|&a| a + ball.eps * rng.sign()).collect(),
        Norm::L2 => {
            let g = rng.normal_vec(n);
            let r = norm2(&g);
            if r == 0.0 {
                return anchor.to_vec();
            }
            anchor.iter().zip(&g).map(|(&a, &gi)| a + ball.eps * gi / r).collect()
        }
        Norm::L1 => {
            let mut out = anchor.to_vec();
            if n > 0 {
                let j = rng.index(n);
                out[j] += ball.eps * rng.sign();
            }
            out
        }
    }
}
