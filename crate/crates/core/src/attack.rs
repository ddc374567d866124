//! Loss-maximizing PGD over a threat model, and the exact worst-case loss of a
//! binary affine model over an `l_p` ball.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::model::{binary_margin, Model};
use crate::numerics::{norm2, RandomSource};
use crate::threat::{project_unchecked, random_init, Ball, Norm, ThreatModel};

/// PGD step size, either absolute or as a fraction of each ball's radius.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepSize {
    Absolute(f64),
    Relative(f64),
}

impl StepSize {
    pub fn resolve(self, eps: f64) -> f64 {
        match self {
            StepSize::Absolute(a) => a,
            StepSize::Relative(r) => r * eps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub steps: usize,
    pub step_size: StepSize,
    pub restarts: usize,
    /// Report the best iterate seen instead of the last one.
    pub keep_best: bool,
    pub seed: u64,
    /// Optional data-domain box applied after every projection.
    pub clip: Option<(f64, f64)>,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self::training()
    }
}

impl AttackConfig {
    /// 10 steps of size `eps/9`, one start.
    pub fn training() -> Self {
        Self {
            steps: 10,
            step_size: StepSize::Relative(1.0 / 9.0),
            restarts: 1,
            keep_best: true,
            seed: 0,
            clip: None,
        }
    }

    /// Same steps as [`AttackConfig::training`] with 10 restarts.
    pub fn evaluation() -> Self {
        Self { restarts: 10, ..Self::training() }
    }

    /// Settings for variation estimation: reports the final iterate unless
    /// `keep_best` is switched on.
    pub fn variation() -> Self {
        Self { keep_best: false, ..Self::training() }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.restarts == 0 {
            return Err(Error::InvalidInput("attack restarts must be at least 1".into()));
        }
        let s = match self.step_size {
            StepSize::Absolute(s) | StepSize::Relative(s) => s,
        };
        if !(s > 0.0) || !s.is_finite() {
            return Err(Error::InvalidInput(format!("step size must be positive, got {s}")));
        }
        if let Some((lo, hi)) = self.clip {
            if !(lo <= hi) {
                return Err(Error::InvalidInput(format!("clip range [{lo}, {hi}] is empty")));
            }
        }
        Ok(())
    }

    pub(crate) fn clip_in_place(&self, x: &mut [f64]) {
        if let Some((lo, hi)) = self.clip {
            for v in x {
                *v = v.clamp(lo, hi);
            }
        }
    }
}

/// Ascent direction for one PGD step: the sign of the gradient for `l_inf`,
/// the `l_2`-normalized gradient otherwise.
pub(crate) fn ascent_direction(p: Norm, grad: &[f64]) -> Vec<f64> {
    match p {
        Norm::LInf => grad
            .iter()
            .map(|&g| if g > 0.0 { 1.0 } else if g < 0.0 { -1.0 } else { 0.0 })
            .collect(),
        Norm::L1 | Norm::L2 => {
            let n = norm2(grad);
            if n > 0.0 {
                grad.iter().map(|g| g / n).collect()
            } else {
                vec![0.0; grad.len()]
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult {
    pub x_adv: Vec<f64>,
    pub loss: f64,
    /// Index of the union member that produced the result.
    pub member: usize,
}

/// PGD maximizing the cross-entropy at `(x, label)` over `tm`. Union members
/// are attacked independently and the highest loss wins.
pub fn pgd_attack(
    model: &Model,
    x: &[f64],
    label: usize,
    tm: &ThreatModel,
    cfg: &AttackConfig,
    rng: &mut RandomSource,
) -> Result<AttackResult> {
    check_dim(model.input_dim(), x.len())?;
    cfg.validate()?;
    let mut best: Option<AttackResult> = None;
    for (member, ball) in tm.members().iter().enumerate() {
        let (x_adv, loss) = pgd_ball(model, x, label, ball, cfg, rng)?;
        if best.as_ref().map_or(true, |b| loss > b.loss) {
            best = Some(AttackResult { x_adv, loss, member });
        }
    }
    Ok(best.expect("threat models are nonempty"))
}

fn pgd_ball(
    model: &Model,
    x: &[f64],
    label: usize,
    ball: &Ball,
    cfg: &AttackConfig,
    rng: &mut RandomSource,
) -> Result<(Vec<f64>, f64)> {
    if cfg.steps == 0 || ball.eps == 0.0 {
        let loss = finite(model.loss(x, label)?)?;
        return Ok((x.to_vec(), loss));
    }
    let alpha = cfg.step_size.resolve(ball.eps);
    let mut best: Option<(Vec<f64>, f64)> = None;
    for _ in 0..cfg.restarts {
        let mut cur = random_init(x, ball, rng);
        cfg.clip_in_place(&mut cur);
        let (mut loss, mut grad) = model.loss_and_grad_input(&cur, label)?;
        finite(loss)?;
        let mut run_best = (cur.clone(), loss);
        for _ in 0..cfg.steps {
            let dir = ascent_direction(ball.p, &grad);
            let stepped: Vec<f64> = cur.iter().zip(&dir).map(|(c, d)| c + alpha * d).collect();
            cur = project_unchecked(&stepped, x, ball);
            cfg.clip_in_place(&mut cur);
            (loss, grad) = model.loss_and_grad_input(&cur, label)?;
            finite(loss)?;
            if loss > run_best.1 {
                run_best = (cur.clone(), loss);
            }
        }
        let candidate = if cfg.keep_best { run_best } else { (cur, loss) };
        if best.as_ref().map_or(true, |b| candidate.1 > b.1) {
            best = Some(candidate);
        }
    }
    Ok(best.expect("restarts >= 1"))
}

fn finite(loss: f64) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::Numeric(format!("non-finite loss {loss}")))
    }
}

fn binary_linear_parts(model: &Model, x: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if !model.is_binary_linear() {
        return Err(Error::Unsupported(
            "exact adversarial loss needs an affine extractor with a two-class classifier".into(),
        ));
    }
    check_dim(model.input_dim(), x.len())?;
    if label > 1 {
        return Err(Error::InvalidInput(format!("label {label} out of range for 2 classes")));
    }
    let margin = binary_margin(&model.forward(x)?.logits, label);
    let a = model.classifier_matrix();
    let c: Vec<f64> = a.row(label).iter().zip(a.row(1 - label)).map(|(p, q)| p - q).collect();
    let direction = model.linear_weight().expect("linear").tr_matvec_unchecked(&c);
    Ok((margin, direction))
}

/// Worst-case margin `logit_y - logit_other` over the ball: the clean margin
/// minus `eps * ||W^T (a_y - a_other)||_*` with the dual norm.
pub fn exact_worst_margin(model: &Model, x: &[f64], label: usize, ball: &Ball) -> Result<f64> {
    let (margin, direction) = binary_linear_parts(model, x, label)?;
    Ok(margin - ball.eps * ball.p.dual().of(&direction))
}

/// Exact maximum cross-entropy of a binary affine model over the ball,
/// `log(1 + exp(-worst_margin))`. Exact because the loss is decreasing in the
/// margin and the margin is affine in the input.
pub fn exact_adv_loss_linear(model: &Model, x: &[f64], label: usize, ball: &Ball) -> Result<f64> {
    Ok(softplus(-exact_worst_margin(model, x, label, ball)?))
}

/// Worst case over every member of a union.
pub fn exact_adv_loss_union(model: &Model, x: &[f64], label: usize, tm: &ThreatModel) -> Result<f64> {
    Ok(softplus(-exact_worst_margin_union(model, x, label, tm)?))
}

pub fn exact_worst_margin_union(model: &Model, x: &[f64], label: usize, tm: &ThreatModel) -> Result<f64> {
    let (margin, direction) = binary_linear_parts(model, x, label)?;
    Ok(tm
        .members()
        .iter()
        .map(|b| margin - b.eps * b.p.dual().of(&direction))
        .fold(f64::INFINITY, f64::min))
}

/// `log(1 + e^z)` without overflow.
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Classifier, Extractor};
    use crate::numerics::Matrix;
    use crate::threat::contains;

    fn binary_identity(bias: [f64; 2]) -> Model {
        Model::new(
            Extractor::Linear { weight: Matrix::identity(2), bias: vec![0.0; 2] },
            Classifier { weight: Some(Matrix::identity(2)), bias: bias.to_vec() },
        )
        .unwrap()
    }

    // Exhaustive grid over a 2-D ball and its boundary.
    fn grid_max_loss(model: &Model, x: &[f64], y: usize, ball: &Ball) -> f64 {
        let k = 400;
        let mut best = f64::NEG_INFINITY;
        for i in 0..=k {
            for j in 0..=k {
                let mut d = [
                    ball.eps * (2.0 * i as f64 / k as f64 - 1.0),
                    ball.eps * (2.0 * j as f64 / k as f64 - 1.0),
                ];
                // grid points outside the ball are pulled radially onto its boundary
                let r = ball.p.of(&d);
                if r > ball.eps {
                    d = [d[0] * ball.eps / r, d[1] * ball.eps / r];
                }
                let p = [x[0] + d[0], x[1] + d[1]];
                best = best.max(model.loss(&p, y).unwrap());
            }
        }
        best
    }

    #[test]
    fn zero_steps_or_radius_returns_clean_point() {
        let mut rng = RandomSource::new(1);
        let m = Model::linear_random(3, 2, 2, false, &mut rng).unwrap();
        let x = [0.1, 0.5, 0.9];
        let clean = m.loss(&x, 1).unwrap();
        let cfg = AttackConfig { steps: 0, ..AttackConfig::evaluation() };
        let r = pgd_attack(&m, &x, 1, &Ball::linf(0.3).into(), &cfg, &mut rng).unwrap();
        assert_eq!((r.x_adv.as_slice(), r.loss), (&x[..], clean));
        let r = pgd_attack(&m, &x, 1, &Ball::l2(0.0).into(), &AttackConfig::evaluation(), &mut rng).unwrap();
        assert_eq!((r.x_adv.as_slice(), r.loss), (&x[..], clean));
    }

    #[test]
    fn constant_model_is_unaffected() {
        let mut m = Model::linear_random(3, 2, 2, false, &mut RandomSource::new(2)).unwrap();
        m.set_params(&vec![0.0; m.num_params()]).unwrap();
        let x = [0.2, 0.2, 0.2];
        let r = pgd_attack(&m, &x, 0, &Ball::linf(0.5).into(), &AttackConfig::evaluation(), &mut RandomSource::new(3))
            .unwrap();
        assert_eq!(r.loss, m.loss(&x, 0).unwrap());
    }

    #[test]
    fn exact_loss_closed_form_example() {
        // clean margin 1, W = I, a_y - a_other = (1, 0)
        let m = Model::new(
            Extractor::Linear { weight: Matrix::identity(2), bias: vec![0.0; 2] },
            Classifier { weight: Some(Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap()), bias: vec![0.0; 2] },
        )
        .unwrap();
        let x = [1.0, 0.0];
        let l = exact_adv_loss_linear(&m, &x, 0, &Ball::linf(0.1)).unwrap();
        assert!((l - 0.341153).abs() < 1e-6, "{l}");
        assert!((l - (1.0 + (-0.9f64).exp()).ln()).abs() < 1e-15);
        let clean = exact_adv_loss_linear(&m, &x, 0, &Ball::linf(0.0)).unwrap();
        assert!((clean - m.loss(&x, 0).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn exact_loss_matches_grid_in_2d() {
        let mut rng = RandomSource::new(5);
        for p in [Norm::L1, Norm::L2, Norm::LInf] {
            for _ in 0..3 {
                let m = Model::linear_random(2, 3, 2, false, &mut rng).unwrap();
                let x = rng.normal_vec(2);
                let ball = Ball::new(p, 0.4).unwrap();
                let exact = exact_adv_loss_linear(&m, &x, 1, &ball).unwrap();
                let grid = grid_max_loss(&m, &x, 1, &ball);
                assert!(exact >= grid - 1e-12);
                assert!((exact - grid).abs() < 1e-4, "{p}: {exact} vs {grid}");
            }
        }
    }

    #[test]
    fn exact_rejects_unsupported_models() {
        let mut rng = RandomSource::new(6);
        let m3 = Model::linear_random(3, 2, 3, false, &mut rng).unwrap();
        assert!(matches!(
            exact_adv_loss_linear(&m3, &[0.0; 3], 0, &Ball::linf(0.1)),
            Err(Error::Unsupported(_))
        ));
        let mlp = Model::mlp_random(3, 4, 2, 2, Default::default(), false, &mut rng).unwrap();
        assert!(exact_adv_loss_linear(&mlp, &[0.0; 3], 0, &Ball::linf(0.1)).is_err());
    }

    #[test]
    fn pgd_reaches_exact_loss_on_binary_linear() {
        let mut rng = RandomSource::new(7);
        let cfg = AttackConfig { steps: 40, step_size: StepSize::Relative(0.25), ..AttackConfig::evaluation() };
        for p in [Norm::LInf, Norm::L2] {
            for _ in 0..20 {
                let m = Model::linear_random(6, 3, 2, false, &mut rng).unwrap();
                let x = rng.normal_vec(6);
                let y = rng.index(2);
                let ball = Ball::new(p, 0.2).unwrap();
                let exact = exact_adv_loss_linear(&m, &x, y, &ball).unwrap();
                let r = pgd_attack(&m, &x, y, &ball.into(), &cfg, &mut rng).unwrap();
                assert!(r.loss <= exact + 1e-9);
                assert!(exact - r.loss < 1e-6, "{p}: {} vs {exact}", r.loss);
                assert!(contains(&r.x_adv, &x, &ball.into(), 1e-9).unwrap());
            }
        }
    }

    #[test]
    fn union_attack_takes_worst_member() {
        let m = binary_identity([0.0, 0.0]);
        let x = [0.3, 0.1];
        let tm = ThreatModel::union(vec![Ball::linf(0.05), Ball::l2(0.2)]).unwrap();
        let cfg = AttackConfig { steps: 50, step_size: StepSize::Relative(0.2), ..AttackConfig::evaluation() };
        let r = pgd_attack(&m, &x, 0, &tm, &cfg, &mut RandomSource::new(9)).unwrap();
        let exact = exact_adv_loss_union(&m, &x, 0, &tm).unwrap();
        assert_eq!(r.member, 1);
        assert!((r.loss - exact).abs() < 1e-6);
        assert!(contains(&r.x_adv, &x, &tm, 1e-9).unwrap());
    }

    #[test]
    fn keep_best_is_monotone_in_steps() {
        let mut rng = RandomSource::new(10);
        let m = Model::mlp_random(4, 6, 3, 2, Default::default(), false, &mut rng).unwrap();
        let x = rng.normal_vec(4);
        let tm: ThreatModel = Ball::linf(0.3).into();
        let mut prev = f64::NEG_INFINITY;
        for steps in 0..15 {
            let cfg = AttackConfig { steps, restarts: 1, seed: 0, ..AttackConfig::training() };
            let r = pgd_attack(&m, &x, 1, &tm, &cfg, &mut RandomSource::new(44)).unwrap();
            if steps > 0 {
                assert!(r.loss >= prev);
            }
            prev = r.loss;
        }
    }

    #[test]
    fn exact_loss_monotone_in_radius() {
        let mut rng = RandomSource::new(12);
        let m = Model::linear_random(5, 3, 2, false, &mut rng).unwrap();
        let x = rng.normal_vec(5);
        let mut prev = 0.0;
        for k in 0..20 {
            let l = exact_adv_loss_linear(&m, &x, 0, &Ball::l2(0.05 * k as f64)).unwrap();
            assert!(l >= prev);
            prev = l;
        }
    }

    #[test]
    fn clip_keeps_points_in_box_and_ball() {
        let mut rng = RandomSource::new(13);
        let m = Model::linear_random(4, 2, 2, false, &mut rng).unwrap();
        let x = [0.0, 1.0, 0.5, 0.02];
        let cfg = AttackConfig { clip: Some((0.0, 1.0)), ..AttackConfig::evaluation() };
        let ball = Ball::linf(0.1);
        let r = pgd_attack(&m, &x, 0, &ball.into(), &cfg, &mut rng).unwrap();
        assert!(r.x_adv.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(contains(&r.x_adv, &x, &ball.into(), 1e-12).unwrap());
    }

    #[test]
    fn softplus_is_stable() {
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0 && softplus(-1000.0) < 1e-300);
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
    }
}
