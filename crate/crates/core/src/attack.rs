//! Gradient-based input perturbations.
//!
//! Five attack families share one bookkeeping format, [`PerturbationRecord`]:
//!
//! - [`fgsm`]: one signed-gradient step of the per-example loss;
//! - [`pgd`]: iterated signed steps projected back onto the l-infinity ball;
//! - [`bv_attack`]: one *unsigned* cross-entropy gradient step, the
//!   decomposition-aware attack for classifiers;
//! - [`bias_direction_attack`]: moves along the negated gradient of the
//!   ensemble-mean prediction, the direction that changes the bias term of
//!   the squared-error decomposition fastest per unit l2 norm;
//! - [`variance_direction_attack`]: moves along the gradient of the deployed
//!   member's squared deviation from the ensemble mean, the direction that
//!   inflates the variance term fastest.
//!
//! Conventions shared by all of them: `sign(0) = 0`; `epsilon = 0` returns
//! the input unchanged; and every record reports the *measured* perturbation
//! levels (mean-square and l-infinity), which is what downstream comparisons
//! key on — never the nominal epsilon.

use crate::data::Target;
use crate::ensemble::Ensemble;
use crate::error::{Error, Result};
use crate::model::{Head, Model};
use crate::scalar::{l2_norm, pairwise_mean, Scalar};

/// Below this l2 norm a gradient carries no usable direction and
/// normalised attacks mark their output degenerate instead of dividing.
pub const DEGENERATE_NORM_FLOOR: f64 = 1e-12;

/// Which attack to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackKind {
    /// No perturbation; the clean baseline every sweep includes.
    None,
    /// Fast gradient sign method.
    Fgsm,
    /// Projected gradient descent (iterated FGSM with projection).
    Pgd,
    /// Unsigned cross-entropy gradient step.
    BiasVariance,
    /// Negated gradient of the ensemble-mean prediction, l2-normalised.
    BiasDirection,
    /// Gradient of the deployed member's squared deviation from the
    /// ensemble mean, l2-normalised.
    VarianceDirection,
}

impl AttackKind {
    /// Stable lowercase name used in configs and CSV output.
    pub fn name(&self) -> &'static str {
        match self {
            AttackKind::None => "none",
            AttackKind::Fgsm => "fgsm",
            AttackKind::Pgd => "pgd",
            AttackKind::BiasVariance => "bv",
            AttackKind::BiasDirection => "bias_dir",
            AttackKind::VarianceDirection => "var_dir",
        }
    }

    /// Parses the name produced by [`AttackKind::name`].
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(AttackKind::None),
            "fgsm" => Ok(AttackKind::Fgsm),
            "pgd" => Ok(AttackKind::Pgd),
            "bv" => Ok(AttackKind::BiasVariance),
            "bias_dir" => Ok(AttackKind::BiasDirection),
            "var_dir" => Ok(AttackKind::VarianceDirection),
            other => Err(Error::InvalidConfig(format!(
                "unknown attack kind \"{other}\"; expected none, fgsm, pgd, bv, bias_dir, or var_dir"
            ))),
        }
    }
}

/// Fully specified attack: kind plus every knob the kind understands.
#[derive(Debug, Clone)]
pub struct AttackSpec {
    pub kind: AttackKind,
    /// Attack budget. Interpreted per kind: l-infinity radius for
    /// fgsm/pgd, raw gradient scale for bv, l2 length for the direction
    /// attacks.
    pub epsilon: f64,
    /// Iteration count (pgd only).
    pub steps: usize,
    /// Per-iteration step size (pgd only); `None` means `epsilon / 4`.
    pub step_size: Option<f64>,
    /// Optional hard cap on the l-infinity norm of the perturbation. For
    /// the epsilon-ball attacks it is a validation constraint (epsilon must
    /// fit inside it); for the unsigned bv attack, whose step length is not
    /// bounded by epsilon, it is applied as a per-coordinate clip.
    pub linf_bound: Option<f64>,
    /// Optional valid input range; outputs are clamped into it.
    pub clamp: Option<(f64, f64)>,
    /// Index of the deployed ensemble member whose gradients drive the
    /// attack (ignored by the pure-ensemble bias-direction attack).
    pub member: usize,
}

impl AttackSpec {
    /// An attack of the given kind with default knobs.
    pub fn new(kind: AttackKind, epsilon: f64) -> Self {
        AttackSpec {
            kind,
            epsilon,
            steps: 5,
            step_size: None,
            linf_bound: None,
            clamp: None,
            member: 0,
        }
    }

    /// Checks every knob for sanity.
    pub fn validate(&self) -> Result<()> {
        if !self.epsilon.is_finite() || self.epsilon < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "attack epsilon must be finite and non-negative, got {}",
                self.epsilon
            )));
        }
        if self.kind == AttackKind::Pgd {
            if self.steps == 0 {
                return Err(Error::InvalidConfig("pgd needs at least one step".into()));
            }
            if let Some(a) = self.step_size {
                if !a.is_finite() || a <= 0.0 {
                    return Err(Error::InvalidConfig(format!(
                        "pgd step_size must be finite and positive, got {a}"
                    )));
                }
            }
        }
        // Every kind except bv keeps ||beta||_inf <= epsilon by
        // construction, so bounds on the perturbation reduce to budget
        // checks there; bv's epsilon is a gradient scale, not a length.
        let structurally_bounded =
            !matches!(self.kind, AttackKind::BiasVariance | AttackKind::None);
        if let Some(delta) = self.linf_bound {
            if !delta.is_finite() || delta <= 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "linf_bound must be finite and positive, got {delta}"
                )));
            }
            if structurally_bounded && self.epsilon > delta {
                return Err(Error::InvalidConfig(format!(
                    "epsilon {} exceeds the linf_bound {delta}",
                    self.epsilon
                )));
            }
        }
        if let Some((lo, hi)) = self.clamp {
            if !lo.is_finite() || !hi.is_finite() || lo >= hi {
                return Err(Error::InvalidConfig(format!(
                    "clamp range [{lo}, {hi}] is not a valid interval"
                )));
            }
            if structurally_bounded && self.epsilon > hi - lo {
                return Err(Error::InvalidConfig(format!(
                    "epsilon {} exceeds the clamp range width {}",
                    self.epsilon,
                    hi - lo
                )));
            }
        }
        Ok(())
    }

    /// Effective pgd step size: explicit value or `epsilon / 4`.
    pub fn effective_step_size(&self) -> f64 {
        self.step_size.unwrap_or(self.epsilon / 4.0)
    }
}

/// One attacked example with measured perturbation levels.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationRecord<S: Scalar> {
    pub x_clean: Vec<S>,
    pub x_adv: Vec<S>,
    /// Mean squared coordinate difference between adv and clean.
    pub mse_level: f64,
    /// Largest absolute coordinate difference.
    pub linf_level: f64,
    /// Set when a normalised attack found no usable direction and returned
    /// the input unchanged.
    pub degenerate: bool,
}

/// Measured perturbation levels `(mean-square, l-infinity)`.
pub fn perturbation_level<S: Scalar>(clean: &[S], adv: &[S]) -> (f64, f64) {
    assert_eq!(clean.len(), adv.len(), "perturbation_level length mismatch");
    let diffs: Vec<f64> = clean
        .iter()
        .zip(adv)
        .map(|(&c, &a)| (a - c).to_f64().unwrap_or(f64::NAN))
        .collect();
    let sq: Vec<f64> = diffs.iter().map(|d| d * d).collect();
    let mse = pairwise_mean(&sq);
    let linf = diffs.iter().fold(0.0f64, |m, d| m.max(d.abs()));
    (mse, linf)
}

fn make_record<S: Scalar>(x_clean: &[S], x_adv: Vec<S>, degenerate: bool) -> PerturbationRecord<S> {
    let (mse_level, linf_level) = perturbation_level(x_clean, &x_adv);
    PerturbationRecord {
        x_clean: x_clean.to_vec(),
        x_adv,
        mse_level,
        linf_level,
        degenerate,
    }
}

fn identity_record<S: Scalar>(x: &[S]) -> PerturbationRecord<S> {
    PerturbationRecord {
        x_clean: x.to_vec(),
        x_adv: x.to_vec(),
        mse_level: 0.0,
        linf_level: 0.0,
        degenerate: false,
    }
}

/// Sign with `sign(0) = 0`, so zero-gradient coordinates stay untouched.
fn sign<S: Scalar>(v: S) -> S {
    if v > S::zero() {
        S::one()
    } else if v < S::zero() {
        -S::one()
    } else {
        S::zero()
    }
}

fn clamp_coord<S: Scalar>(v: S, lo: S, hi: S) -> S {
    if v < lo {
        lo
    } else if v > hi {
        hi
    } else {
        v
    }
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if !epsilon.is_finite() || epsilon < 0.0 {
        return Err(Error::InvalidConfig(format!(
            "attack epsilon must be finite and non-negative, got {epsilon}"
        )));
    }
    Ok(())
}

/// Shared signed-step loop behind [`fgsm`] and [`pgd`].
///
/// Each iteration takes a signed gradient step of size `alpha`, projects
/// back onto the l-infinity ball of radius `epsilon` around the clean
/// input, then clamps into the valid domain. FGSM is exactly one iteration
/// with `alpha = epsilon`, so `pgd` with those knobs is bit-identical to
/// `fgsm` by construction. The returned flag reports whether every
/// iteration saw an identically zero gradient (`sign(0) = 0` leaves the
/// input untouched in that case).
fn signed_gradient_steps<S: Scalar>(
    model: &Model<S>,
    x_clean: &[S],
    target: &Target<S>,
    epsilon: f64,
    steps: usize,
    alpha: f64,
    clamp: Option<(f64, f64)>,
) -> Result<(Vec<S>, bool)> {
    let eps = S::from_f64_lit(epsilon);
    let step = S::from_f64_lit(alpha);
    let domain = clamp.map(|(lo, hi)| (S::from_f64_lit(lo), S::from_f64_lit(hi)));

    let mut x = x_clean.to_vec();
    let mut moved = false;
    for _ in 0..steps {
        let grad = model.input_gradient(&x, target)?;
        for i in 0..x.len() {
            let s = sign(grad[i]);
            if s != S::zero() {
                moved = true;
            }
            let candidate = x[i] + step * s;
            let ball = clamp_coord(candidate, x_clean[i] - eps, x_clean[i] + eps);
            x[i] = match domain {
                Some((lo, hi)) => clamp_coord(ball, lo, hi),
                None => ball,
            };
        }
    }
    Ok((x, !moved))
}

/// Fast gradient sign method: `x + epsilon * sign(grad loss)`, clamped.
pub fn fgsm<S: Scalar>(
    model: &Model<S>,
    x: &[S],
    target: &Target<S>,
    epsilon: f64,
    clamp: Option<(f64, f64)>,
) -> Result<PerturbationRecord<S>> {
    check_epsilon(epsilon)?;
    if epsilon == 0.0 {
        return Ok(identity_record(x));
    }
    let (x_adv, degenerate) = signed_gradient_steps(model, x, target, epsilon, 1, epsilon, clamp)?;
    Ok(make_record(x, x_adv, degenerate))
}

/// Projected gradient descent: `steps` signed-gradient iterations, each
/// projected onto the epsilon ball and the valid domain. No random start.
pub fn pgd<S: Scalar>(
    model: &Model<S>,
    x: &[S],
    target: &Target<S>,
    epsilon: f64,
    steps: usize,
    step_size: Option<f64>,
    clamp: Option<(f64, f64)>,
) -> Result<PerturbationRecord<S>> {
    check_epsilon(epsilon)?;
    if steps == 0 {
        return Err(Error::InvalidConfig("pgd needs at least one step".into()));
    }
    if let Some(a) = step_size {
        if !a.is_finite() || a <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "pgd step_size must be finite and positive, got {a}"
            )));
        }
    }
    if epsilon == 0.0 {
        return Ok(identity_record(x));
    }
    let alpha = step_size.unwrap_or(epsilon / 4.0);
    let (x_adv, degenerate) =
        signed_gradient_steps(model, x, target, epsilon, steps, alpha, clamp)?;
    Ok(make_record(x, x_adv, degenerate))
}

/// Unsigned gradient attack for classifiers: `x + epsilon * grad CE`.
///
/// Unlike FGSM this keeps the raw gradient geometry, which is what ties the
/// attack to the first-order cross-entropy decomposition: the induced loss
/// change is `epsilon * ||grad CE||^2` to first order. Because epsilon
/// scales a raw gradient, the step length is unbounded; `linf_bound` clips
/// each coordinate of the perturbation when a hard cap is needed.
pub fn bv_attack<S: Scalar>(
    model: &Model<S>,
    x: &[S],
    label: usize,
    epsilon: f64,
    linf_bound: Option<f64>,
    clamp: Option<(f64, f64)>,
) -> Result<PerturbationRecord<S>> {
    check_epsilon(epsilon)?;
    if model.spec().head != Head::Classification {
        return Err(Error::InvalidConfig(
            "bv_attack requires a classification model".into(),
        ));
    }
    if epsilon == 0.0 {
        return Ok(identity_record(x));
    }
    let grad = model.input_gradient(x, &Target::Label(label))?;
    let degenerate = l2_norm(&grad).to_f64().unwrap_or(0.0) < DEGENERATE_NORM_FLOOR;
    let eps = S::from_f64_lit(epsilon);
    let cap = linf_bound.map(S::from_f64_lit);
    let domain = clamp.map(|(lo, hi)| (S::from_f64_lit(lo), S::from_f64_lit(hi)));
    let x_adv: Vec<S> = x
        .iter()
        .zip(&grad)
        .map(|(&xi, &gi)| {
            let beta = match cap {
                Some(d) => clamp_coord(eps * gi, -d, d),
                None => eps * gi,
            };
            let v = xi + beta;
            match domain {
                Some((lo, hi)) => clamp_coord(v, lo, hi),
                None => v,
            }
        })
        .collect();
    Ok(make_record(x, x_adv, degenerate))
}

/// Applies an l2-normalised step `epsilon * direction / ||direction||`,
/// or flags a degenerate direction.
fn normalized_step<S: Scalar>(
    x: &[S],
    direction: &[S],
    epsilon: f64,
    clamp: Option<(f64, f64)>,
) -> PerturbationRecord<S> {
    let norm = l2_norm(direction).to_f64().unwrap_or(0.0);
    if norm < DEGENERATE_NORM_FLOOR {
        let mut rec = identity_record(x);
        rec.degenerate = true;
        return rec;
    }
    let scale = S::from_f64_lit(epsilon / norm);
    let domain = clamp.map(|(lo, hi)| (S::from_f64_lit(lo), S::from_f64_lit(hi)));
    let x_adv: Vec<S> = x
        .iter()
        .zip(direction)
        .map(|(&xi, &di)| {
            let v = xi + scale * di;
            match domain {
                Some((lo, hi)) => clamp_coord(v, lo, hi),
                None => v,
            }
        })
        .collect();
    make_record(x, x_adv, false)
}

/// Moves `epsilon` along the negated gradient of the ensemble-mean
/// prediction (regression ensembles).
///
/// Per unit l2 norm this is the direction that changes the squared-bias
/// term of the error decomposition fastest at first order.
pub fn bias_direction_attack<S: Scalar>(
    ensemble: &Ensemble<S>,
    x: &[S],
    epsilon: f64,
    clamp: Option<(f64, f64)>,
) -> Result<PerturbationRecord<S>> {
    check_epsilon(epsilon)?;
    if ensemble.spec().head != Head::Regression {
        return Err(Error::InvalidConfig(
            "bias_direction_attack requires a regression ensemble".into(),
        ));
    }
    if epsilon == 0.0 {
        return Ok(identity_record(x));
    }
    let grad = ensemble.mean_prediction_gradient(x)?;
    let direction: Vec<S> = grad.iter().map(|&g| -g).collect();
    Ok(normalized_step(x, &direction, epsilon, clamp))
}

/// Moves `epsilon` along the gradient of the deployed member's squared
/// deviation from the ensemble mean (regression ensembles).
///
/// The direction is `(f_k(x) - fbar(x)) * (grad f_k - grad fbar)`, which
/// inflates the variance term of the error decomposition fastest per unit
/// l2 norm. Degenerate when the member sits exactly on the mean or their
/// gradients coincide.
pub fn variance_direction_attack<S: Scalar>(
    ensemble: &Ensemble<S>,
    member: usize,
    x: &[S],
    epsilon: f64,
    clamp: Option<(f64, f64)>,
) -> Result<PerturbationRecord<S>> {
    check_epsilon(epsilon)?;
    if ensemble.spec().head != Head::Regression {
        return Err(Error::InvalidConfig(
            "variance_direction_attack requires a regression ensemble".into(),
        ));
    }
    if member >= ensemble.len() {
        return Err(Error::InvalidConfig(format!(
            "member {member} out of range for an ensemble of {}",
            ensemble.len()
        )));
    }
    if epsilon == 0.0 {
        return Ok(identity_record(x));
    }
    let geo = ensemble.mse_geometry(x)?;
    let dev = geo.member_values[member] - geo.mean_value;
    let direction: Vec<S> = geo.member_gradients[member]
        .iter()
        .zip(&geo.mean_gradient)
        .map(|(&gk, &gm)| dev * (gk - gm))
        .collect();
    Ok(normalized_step(x, &direction, epsilon, clamp))
}

/// Runs the attack described by `spec` against one example.
///
/// Gradient-based kinds attack the deployed member named by `spec.member`;
/// the direction attacks use the ensemble geometry (the variance direction
/// additionally needs the deployed member).
pub fn generate<S: Scalar>(
    spec: &AttackSpec,
    ensemble: &Ensemble<S>,
    x: &[S],
    target: &Target<S>,
) -> Result<PerturbationRecord<S>> {
    spec.validate()?;
    if spec.member >= ensemble.len() {
        return Err(Error::InvalidConfig(format!(
            "attack member {} out of range for an ensemble of {}",
            spec.member,
            ensemble.len()
        )));
    }
    let deployed = &ensemble.members()[spec.member];
    match spec.kind {
        AttackKind::None => Ok(identity_record(x)),
        AttackKind::Fgsm => fgsm(deployed, x, target, spec.epsilon, spec.clamp),
        AttackKind::Pgd => pgd(
            deployed,
            x,
            target,
            spec.epsilon,
            spec.steps,
            spec.step_size,
            spec.clamp,
        ),
        AttackKind::BiasVariance => match target {
            Target::Label(l) => {
                bv_attack(deployed, x, *l, spec.epsilon, spec.linf_bound, spec.clamp)
            }
            Target::Value(_) => Err(Error::InvalidConfig(
                "bv attack requires a class label target".into(),
            )),
        },
        AttackKind::BiasDirection => bias_direction_attack(ensemble, x, spec.epsilon, spec.clamp),
        AttackKind::VarianceDirection => {
            variance_direction_attack(ensemble, spec.member, x, spec.epsilon, spec.clamp)
        }
    }
}
