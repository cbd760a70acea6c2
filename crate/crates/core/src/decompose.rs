//! Loss decompositions for ensembles under input perturbation.
//!
//! Squared error splits exactly, per probe point, into irreducible noise,
//! squared bias of the ensemble mean, and member variance around that mean.
//! Cross-entropy splits exactly into a bias term (KL from the true label
//! distribution to the normalised geometric mean `pi*`) and a dispersion
//! term (mean KL from `pi*` out to the members).
//!
//! Under a perturbation `beta` each decomposition has a first-order form:
//! the clean terms plus linear shifts computed from input gradients. The
//! perturbed reports here expose those shifts, an exact perturbed total,
//! and the residual between them — which must vanish quadratically as the
//! perturbation shrinks. [`taylor_residual_scan`] measures that decay rate.
//!
//! Every aggregate is a fixed-order pairwise mean, so reports are
//! bit-reproducible.

use crate::ensemble::Ensemble;
use crate::error::{Error, Result};
use crate::model::{Head, Model};
use crate::scalar::{pairwise_mean, pairwise_sum, Scalar};

fn to_f64<S: Scalar>(v: S) -> f64 {
    v.to_f64().unwrap_or(f64::NAN)
}

fn dot_f64<S: Scalar>(a: &[S], b: &[S]) -> f64 {
    let products: Vec<f64> = a.iter().zip(b).map(|(&x, &y)| to_f64(x * y)).collect();
    pairwise_sum(&products)
}

fn check_lengths(points: usize, targets: usize, what: &str) -> Result<()> {
    if points == 0 {
        return Err(Error::InvalidConfig(format!(
            "{what} needs at least one probe point"
        )));
    }
    if points != targets {
        return Err(Error::InvalidConfig(format!(
            "{what}: {points} probe points but {targets} targets"
        )));
    }
    Ok(())
}

// ---- squared error, clean ---------------------------------------------------

/// Squared-error decomposition averaged over probe points.
#[derive(Debug, Clone, PartialEq)]
pub struct MseReport {
    /// Irreducible observation-noise variance (supplied analytically).
    pub noise_variance: f64,
    /// Mean squared gap between the ensemble-mean prediction and the truth.
    pub bias_sq: f64,
    /// Mean member variance around the ensemble mean.
    pub variance: f64,
    /// Expected squared error of a randomly drawn member against noisy
    /// observations: noise + mean-over-points of mean-over-members error.
    pub total: f64,
    /// `total - (noise_variance + bias_sq + variance)`; zero up to rounding.
    pub residual: f64,
}

/// Decomposes ensemble squared error at clean inputs.
///
/// `true_values[i]` is the noise-free target at `inputs[i]`;
/// `noise_variance` is the analytic variance of the observation noise.
pub fn mse_decompose<S: Scalar>(
    ensemble: &Ensemble<S>,
    inputs: &[Vec<S>],
    true_values: &[f64],
    noise_variance: f64,
) -> Result<MseReport> {
    check_lengths(inputs.len(), true_values.len(), "mse_decompose")?;
    if ensemble.spec().head != Head::Regression {
        return Err(Error::InvalidConfig(
            "mse_decompose requires a regression ensemble".into(),
        ));
    }
    if !noise_variance.is_finite() || noise_variance < 0.0 {
        return Err(Error::InvalidConfig(format!(
            "noise_variance must be finite and non-negative, got {noise_variance}"
        )));
    }

    let mut bias_terms = Vec::with_capacity(inputs.len());
    let mut var_terms = Vec::with_capacity(inputs.len());
    let mut total_terms = Vec::with_capacity(inputs.len());
    for (x, &g) in inputs.iter().zip(true_values) {
        let values: Vec<f64> = ensemble
            .members()
            .iter()
            .map(|m| Ok(to_f64(m.predict_scalar(x)?)))
            .collect::<Result<_>>()?;
        let mean = pairwise_mean(&values);
        bias_terms.push((mean - g) * (mean - g));
        let devs: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
        var_terms.push(pairwise_mean(&devs));
        let errs: Vec<f64> = values.iter().map(|v| (v - g) * (v - g)).collect();
        total_terms.push(pairwise_mean(&errs));
    }

    let bias_sq = pairwise_mean(&bias_terms);
    let variance = pairwise_mean(&var_terms);
    let total = noise_variance + pairwise_mean(&total_terms);
    Ok(MseReport {
        noise_variance,
        bias_sq,
        variance,
        total,
        residual: total - (noise_variance + bias_sq + variance),
    })
}

// ---- squared error, perturbed ----------------------------------------------

/// Squared-error decomposition at perturbed inputs, with the first-order
/// shift terms.
#[derive(Debug, Clone, PartialEq)]
pub struct MseAdvReport {
    pub noise_variance: f64,
    /// Clean squared bias and member variance, for reference.
    pub bias_sq_clean: f64,
    pub variance_clean: f64,
    /// Mean first-order shift of the ensemble-mean prediction:
    /// `grad fbar . beta`.
    pub mean_shift: f64,
    /// Mean first-order shift of the member variance:
    /// `mean_k 2 (f_k - fbar) (grad f_k - grad fbar) . beta`.
    pub variance_shift: f64,
    /// Squared bias reconstructed from the first-order mean shift:
    /// mean of `(fbar + mean_shift_x - truth)^2`.
    pub bias_sq_adv: f64,
    /// Squared bias measured exactly at the perturbed inputs:
    /// mean of `(fbar(x_adv) - truth)^2`. Together with `variance_adv`
    /// this gives the exact perturbed decomposition (zero residual).
    pub bias_sq_adv_exact: f64,
    /// Member variance measured exactly at the perturbed inputs.
    pub variance_adv: f64,
    /// `noise + bias_sq_adv + variance_adv`.
    pub reconstructed_total: f64,
    /// `noise +` mean-over-points of mean-over-members squared error at the
    /// perturbed inputs: the quantity the reconstruction approximates.
    pub actual_total: f64,
    /// `actual_total - reconstructed_total`. Quadratic in the perturbation;
    /// exactly zero (to rounding) when every member is linear.
    pub residual: f64,
}

/// Decomposes ensemble squared error at perturbed inputs.
///
/// `perturbed[i]` is the attacked version of `inputs[i]`; the perturbation
/// is their difference. Truth stays anchored at the clean input: the
/// adversary moves what the models see, not what the world does.
pub fn mse_adv_decompose<S: Scalar>(
    ensemble: &Ensemble<S>,
    inputs: &[Vec<S>],
    true_values: &[f64],
    noise_variance: f64,
    perturbed: &[Vec<S>],
) -> Result<MseAdvReport> {
    check_lengths(inputs.len(), true_values.len(), "mse_adv_decompose")?;
    if perturbed.len() != inputs.len() {
        return Err(Error::InvalidConfig(format!(
            "mse_adv_decompose: {} clean inputs but {} perturbed inputs",
            inputs.len(),
            perturbed.len()
        )));
    }
    if ensemble.spec().head != Head::Regression {
        return Err(Error::InvalidConfig(
            "mse_adv_decompose requires a regression ensemble".into(),
        ));
    }
    if !noise_variance.is_finite() || noise_variance < 0.0 {
        return Err(Error::InvalidConfig(format!(
            "noise_variance must be finite and non-negative, got {noise_variance}"
        )));
    }

    let n = inputs.len();
    let mut bias_clean_terms = Vec::with_capacity(n);
    let mut var_clean_terms = Vec::with_capacity(n);
    let mut mean_shift_terms = Vec::with_capacity(n);
    let mut var_shift_terms = Vec::with_capacity(n);
    let mut bias_adv_terms = Vec::with_capacity(n);
    let mut bias_adv_exact_terms = Vec::with_capacity(n);
    let mut var_adv_terms = Vec::with_capacity(n);
    let mut actual_terms = Vec::with_capacity(n);

    for ((x, x_adv), &g) in inputs.iter().zip(perturbed).zip(true_values) {
        if x_adv.len() != x.len() {
            return Err(Error::InvalidConfig(
                "perturbed input dimension differs from clean input".into(),
            ));
        }
        let beta: Vec<S> = x_adv.iter().zip(x).map(|(&a, &c)| a - c).collect();
        let geo = ensemble.mse_geometry(x)?;
        let mean_clean = to_f64(geo.mean_value);

        bias_clean_terms.push((mean_clean - g) * (mean_clean - g));
        let devs: Vec<f64> = geo
            .member_values
            .iter()
            .map(|&v| {
                let d = to_f64(v) - mean_clean;
                d * d
            })
            .collect();
        var_clean_terms.push(pairwise_mean(&devs));

        let shift = dot_f64(&geo.mean_gradient, &beta);
        mean_shift_terms.push(shift);

        let member_shifts: Vec<f64> = geo
            .member_values
            .iter()
            .zip(&geo.member_gradients)
            .map(|(&v, gk)| {
                let dev = to_f64(v) - mean_clean;
                let diff_grad: Vec<S> = gk
                    .iter()
                    .zip(&geo.mean_gradient)
                    .map(|(&a, &b)| a - b)
                    .collect();
                2.0 * dev * dot_f64(&diff_grad, &beta)
            })
            .collect();
        var_shift_terms.push(pairwise_mean(&member_shifts));

        bias_adv_terms.push((mean_clean + shift - g) * (mean_clean + shift - g));

        let adv_values: Vec<f64> = ensemble
            .members()
            .iter()
            .map(|m| Ok(to_f64(m.predict_scalar(x_adv)?)))
            .collect::<Result<_>>()?;
        let adv_mean = pairwise_mean(&adv_values);
        let adv_devs: Vec<f64> = adv_values
            .iter()
            .map(|v| (v - adv_mean) * (v - adv_mean))
            .collect();
        var_adv_terms.push(pairwise_mean(&adv_devs));
        bias_adv_exact_terms.push((adv_mean - g) * (adv_mean - g));
        let errs: Vec<f64> = adv_values.iter().map(|v| (v - g) * (v - g)).collect();
        actual_terms.push(pairwise_mean(&errs));
    }

    let bias_sq_adv = pairwise_mean(&bias_adv_terms);
    let variance_adv = pairwise_mean(&var_adv_terms);
    let reconstructed_total = noise_variance + bias_sq_adv + variance_adv;
    let actual_total = noise_variance + pairwise_mean(&actual_terms);
    Ok(MseAdvReport {
        noise_variance,
        bias_sq_clean: pairwise_mean(&bias_clean_terms),
        variance_clean: pairwise_mean(&var_clean_terms),
        mean_shift: pairwise_mean(&mean_shift_terms),
        variance_shift: pairwise_mean(&var_shift_terms),
        bias_sq_adv,
        bias_sq_adv_exact: pairwise_mean(&bias_adv_exact_terms),
        variance_adv,
        reconstructed_total,
        actual_total,
        residual: actual_total - reconstructed_total,
    })
}

// ---- cross-entropy, clean ----------------------------------------------------

/// Cross-entropy decomposition averaged over probe points.
#[derive(Debug, Clone, PartialEq)]
pub struct CeReport {
    /// Mean `-log pi*_t`: KL from the one-hot truth to the normalised
    /// geometric mean.
    pub bias_kl: f64,
    /// Mean `mean_k KL(pi* || p_k)`: dispersion of the members around `pi*`.
    pub dispersion_kl: f64,
    /// Mean over points and members of the cross-entropy `-log p_k(t | x)`.
    pub total_ce: f64,
    /// `total_ce - (bias_kl + dispersion_kl)`; zero up to rounding.
    pub residual: f64,
}

/// Decomposes mean ensemble cross-entropy at clean inputs.
pub fn ce_kl_decompose<S: Scalar>(
    ensemble: &Ensemble<S>,
    inputs: &[Vec<S>],
    labels: &[usize],
) -> Result<CeReport> {
    check_lengths(inputs.len(), labels.len(), "ce_kl_decompose")?;
    if ensemble.spec().head != Head::Classification {
        return Err(Error::InvalidConfig(
            "ce_kl_decompose requires a classification ensemble".into(),
        ));
    }
    let classes = ensemble.spec().output_dim;

    let mut bias_terms = Vec::with_capacity(inputs.len());
    let mut dispersion_terms = Vec::with_capacity(inputs.len());
    let mut total_terms = Vec::with_capacity(inputs.len());
    for (x, &t) in inputs.iter().zip(labels) {
        if t >= classes {
            return Err(Error::InvalidConfig(format!(
                "label {t} out of range for {classes} classes"
            )));
        }
        let per_member: Vec<Vec<S>> = ensemble
            .members()
            .iter()
            .map(|m| m.log_probs(x))
            .collect::<Result<_>>()?;
        let mut mean_log = Vec::with_capacity(classes);
        for c in 0..classes {
            let col: Vec<S> = per_member.iter().map(|lp| lp[c]).collect();
            mean_log.push(pairwise_mean(&col));
        }
        let log_pi_star = crate::graph::log_softmax_slice(&mean_log);
        bias_terms.push(-to_f64(log_pi_star[t]));

        // Dispersion from the definition, not the closed form; agreement
        // with -logsumexp(mean_log) is verified elsewhere.
        let pi_star: Vec<S> = log_pi_star.iter().map(|&l| l.exp()).collect();
        let member_kls: Vec<f64> = per_member
            .iter()
            .map(|lp| {
                let terms: Vec<f64> = pi_star
                    .iter()
                    .zip(&log_pi_star)
                    .zip(lp)
                    .map(|((&p, &lps), &lpk)| to_f64(p) * (to_f64(lps) - to_f64(lpk)))
                    .collect();
                pairwise_sum(&terms)
            })
            .collect();
        dispersion_terms.push(pairwise_mean(&member_kls));

        let ces: Vec<f64> = per_member.iter().map(|lp| -to_f64(lp[t])).collect();
        total_terms.push(pairwise_mean(&ces));
    }

    let bias_kl = pairwise_mean(&bias_terms);
    let dispersion_kl = pairwise_mean(&dispersion_terms);
    let total_ce = pairwise_mean(&total_terms);
    Ok(CeReport {
        bias_kl,
        dispersion_kl,
        total_ce,
        residual: total_ce - (bias_kl + dispersion_kl),
    })
}

// ---- cross-entropy, perturbed -------------------------------------------------

/// First-order cross-entropy decomposition at perturbed inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct CeAdvReport {
    /// Clean bias and dispersion, for reference.
    pub bias_kl: f64,
    pub dispersion_kl: f64,
    /// Mean first-order shift of the bias term: `-(grad log pi*_t) . beta`.
    pub bias_shift: f64,
    /// Mean first-order shift of the dispersion term:
    /// `(grad mean_k KL(pi* || p_k)) . beta`. Exactly zero for a
    /// single-member ensemble, whose dispersion is identically zero.
    pub dispersion_shift: f64,
    /// `bias_kl + dispersion_kl + bias_shift + dispersion_shift`.
    pub predicted_total: f64,
    /// Mean over points and members of cross-entropy at the perturbed
    /// inputs.
    pub actual_total: f64,
    /// `actual_total - predicted_total`; quadratic in the perturbation.
    pub residual: f64,
}

/// First-order prediction of mean ensemble cross-entropy under perturbation.
///
/// Both decomposition terms are shifted by their own input gradients: the
/// bias term through `grad log pi*_t`, the dispersion term through the
/// gradient of the mean member KL. Their sum equals the gradient of the
/// mean cross-entropy, so the prediction is a full first-order Taylor
/// expansion and the residual decays quadratically.
pub fn ce_adv_firstorder<S: Scalar>(
    ensemble: &Ensemble<S>,
    inputs: &[Vec<S>],
    labels: &[usize],
    perturbed: &[Vec<S>],
) -> Result<CeAdvReport> {
    check_lengths(inputs.len(), labels.len(), "ce_adv_firstorder")?;
    if perturbed.len() != inputs.len() {
        return Err(Error::InvalidConfig(format!(
            "ce_adv_firstorder: {} clean inputs but {} perturbed inputs",
            inputs.len(),
            perturbed.len()
        )));
    }
    if ensemble.spec().head != Head::Classification {
        return Err(Error::InvalidConfig(
            "ce_adv_firstorder requires a classification ensemble".into(),
        ));
    }
    let classes = ensemble.spec().output_dim;

    let n = inputs.len();
    let mut bias_terms = Vec::with_capacity(n);
    let mut dispersion_terms = Vec::with_capacity(n);
    let mut bias_shift_terms = Vec::with_capacity(n);
    let mut dispersion_shift_terms = Vec::with_capacity(n);
    let mut actual_terms = Vec::with_capacity(n);

    for ((x, x_adv), &t) in inputs.iter().zip(perturbed).zip(labels) {
        if t >= classes {
            return Err(Error::InvalidConfig(format!(
                "label {t} out of range for {classes} classes"
            )));
        }
        if x_adv.len() != x.len() {
            return Err(Error::InvalidConfig(
                "perturbed input dimension differs from clean input".into(),
            ));
        }
        let beta: Vec<S> = x_adv.iter().zip(x).map(|(&a, &c)| a - c).collect();
        let geo = ensemble.ce_geometry(x)?;

        bias_terms.push(-to_f64(geo.log_pi_star[t]));
        // Dispersion in closed form: -logsumexp(m) = log pi*_c - m_c.
        dispersion_terms.push(to_f64(geo.log_pi_star[0]) - to_f64(geo.mean_log_probs[0]));

        bias_shift_terms.push(-dot_f64(&geo.log_pi_star_gradient(t), &beta));
        dispersion_shift_terms.push(dot_f64(&geo.dispersion_gradient(), &beta));

        let ces: Vec<f64> = ensemble
            .members()
            .iter()
            .map(|m| Ok(-to_f64(m.log_probs(x_adv)?[t])))
            .collect::<Result<_>>()?;
        actual_terms.push(pairwise_mean(&ces));
    }

    let bias_kl = pairwise_mean(&bias_terms);
    let dispersion_kl = pairwise_mean(&dispersion_terms);
    let bias_shift = pairwise_mean(&bias_shift_terms);
    let dispersion_shift = pairwise_mean(&dispersion_shift_terms);
    let predicted_total = bias_kl + dispersion_kl + bias_shift + dispersion_shift;
    let actual_total = pairwise_mean(&actual_terms);
    Ok(CeAdvReport {
        bias_kl,
        dispersion_kl,
        bias_shift,
        dispersion_shift,
        predicted_total,
        actual_total,
        residual: actual_total - predicted_total,
    })
}

// ---- single-model score form --------------------------------------------------

/// First-order cross-entropy sensitivity of one model's softmax scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreReport {
    /// Mean clean cross-entropy.
    pub clean_ce: f64,
    /// Per-class mean sensitivity `c_i = -(grad log p_i) . beta`.
    pub class_sensitivities: Vec<f64>,
    /// Mean sensitivity of the true class, `c_t`: the first-order
    /// cross-entropy change.
    pub true_class_shift: f64,
    /// `clean_ce + true_class_shift`.
    pub predicted_total: f64,
    /// Mean cross-entropy at the perturbed inputs.
    pub actual_total: f64,
    /// `actual_total - predicted_total`; quadratic in the perturbation.
    pub residual: f64,
    /// Mean l2 norm of `grad sum_j p_j`. Softmax scores sum to one
    /// identically, so this is zero up to rounding — a self-check that the
    /// sensitivities were computed against normalised scores.
    pub score_sum_gradient_norm: f64,
}

/// First-order cross-entropy analysis of a single classifier's scores.
pub fn softmax_ce_adv_decompose<S: Scalar>(
    model: &Model<S>,
    inputs: &[Vec<S>],
    labels: &[usize],
    perturbed: &[Vec<S>],
) -> Result<ScoreReport> {
    check_lengths(inputs.len(), labels.len(), "softmax_ce_adv_decompose")?;
    if perturbed.len() != inputs.len() {
        return Err(Error::InvalidConfig(format!(
            "softmax_ce_adv_decompose: {} clean inputs but {} perturbed inputs",
            inputs.len(),
            perturbed.len()
        )));
    }
    if model.spec().head != Head::Classification {
        return Err(Error::InvalidConfig(
            "softmax_ce_adv_decompose requires a classification model".into(),
        ));
    }
    let classes = model.spec().output_dim;

    let n = inputs.len();
    let mut clean_terms = Vec::with_capacity(n);
    let mut class_terms: Vec<Vec<f64>> = vec![Vec::with_capacity(n); classes];
    let mut true_shift_terms = Vec::with_capacity(n);
    let mut actual_terms = Vec::with_capacity(n);
    let mut sum_grad_norms = Vec::with_capacity(n);

    for ((x, x_adv), &t) in inputs.iter().zip(perturbed).zip(labels) {
        if t >= classes {
            return Err(Error::InvalidConfig(format!(
                "label {t} out of range for {classes} classes"
            )));
        }
        if x_adv.len() != x.len() {
            return Err(Error::InvalidConfig(
                "perturbed input dimension differs from clean input".into(),
            ));
        }
        let beta: Vec<S> = x_adv.iter().zip(x).map(|(&a, &c)| a - c).collect();
        let log_probs = model.log_probs(x)?;
        clean_terms.push(-to_f64(log_probs[t]));

        let mut sum_grad = vec![0.0f64; x.len()];
        for c in 0..classes {
            let grad = model.logprob_gradient(x, c)?;
            let sensitivity = -dot_f64(&grad, &beta);
            class_terms[c].push(sensitivity);
            if c == t {
                true_shift_terms.push(sensitivity);
            }
            // grad sum_j p_j = sum_j p_j grad log p_j.
            let p = to_f64(log_probs[c].exp());
            for (s, &g) in sum_grad.iter_mut().zip(&grad) {
                *s += p * to_f64(g);
            }
        }
        let norm_sq: f64 = sum_grad.iter().map(|v| v * v).sum();
        sum_grad_norms.push(norm_sq.sqrt());

        actual_terms.push(-to_f64(model.log_probs(x_adv)?[t]));
    }

    let clean_ce = pairwise_mean(&clean_terms);
    let true_class_shift = pairwise_mean(&true_shift_terms);
    let predicted_total = clean_ce + true_class_shift;
    let actual_total = pairwise_mean(&actual_terms);
    Ok(ScoreReport {
        clean_ce,
        class_sensitivities: class_terms.iter().map(|v| pairwise_mean(v)).collect(),
        true_class_shift,
        predicted_total,
        actual_total,
        residual: actual_total - predicted_total,
        score_sum_gradient_norm: pairwise_mean(&sum_grad_norms),
    })
}

// ---- residual decay measurement ------------------------------------------------

/// Result of fitting the decay rate of first-order residuals.
#[derive(Debug, Clone, PartialEq)]
pub struct TaylorScan {
    /// Perturbation scales, as given.
    pub epsilons: Vec<f64>,
    /// Residual magnitude at each scale, as given.
    pub residuals: Vec<f64>,
    /// Magnitudes at or below this floor are treated as rounding noise and
    /// excluded from the fit.
    pub floor: f64,
    /// How many scales survived the floor.
    pub points_used: usize,
    /// Log-log least-squares slope over the surviving scales, or `None`
    /// when fewer than two survive — meaning the expansion is exact to
    /// machine precision at every tested scale.
    pub slope: Option<f64>,
}

/// Fits `log |residual|` against `log epsilon` by least squares.
///
/// A first-order expansion of a smooth function leaves a residual that
/// scales as `epsilon^2`, so a correct implementation shows a slope near 2.
/// Residuals below `floor` are excluded: once a residual reaches rounding
/// level its logarithm is meaningless.
pub fn taylor_residual_scan(epsilons: &[f64], residuals: &[f64], floor: f64) -> Result<TaylorScan> {
    if epsilons.is_empty() || epsilons.len() != residuals.len() {
        return Err(Error::InvalidConfig(format!(
            "taylor_residual_scan needs matching non-empty scales and residuals, got {} and {}",
            epsilons.len(),
            residuals.len()
        )));
    }
    if let Some(&e) = epsilons.iter().find(|&&e| !e.is_finite() || e <= 0.0) {
        return Err(Error::InvalidConfig(format!(
            "perturbation scales must be finite and positive, got {e}"
        )));
    }
    if !floor.is_finite() || floor < 0.0 {
        return Err(Error::InvalidConfig(format!(
            "floor must be finite and non-negative, got {floor}"
        )));
    }

    let pairs: Vec<(f64, f64)> = epsilons
        .iter()
        .zip(residuals)
        .filter(|(_, &r)| r.abs() > floor)
        .map(|(&e, &r)| (e.ln(), r.abs().ln()))
        .collect();

    let slope = if pairs.len() < 2 {
        None
    } else {
        let n = pairs.len() as f64;
        let mean_u = pairs.iter().map(|(u, _)| u).sum::<f64>() / n;
        let mean_w = pairs.iter().map(|(_, w)| w).sum::<f64>() / n;
        let sxx: f64 = pairs.iter().map(|(u, _)| (u - mean_u) * (u - mean_u)).sum();
        if sxx == 0.0 {
            return Err(Error::InvalidConfig(
                "taylor_residual_scan needs at least two distinct scales above the floor".into(),
            ));
        }
        let sxy: f64 = pairs.iter().map(|(u, w)| (u - mean_u) * (w - mean_w)).sum();
        Some(sxy / sxx)
    };

    Ok(TaylorScan {
        epsilons: epsilons.to_vec(),
        residuals: residuals.to_vec(),
        floor,
        points_used: pairs.len(),
        slope,
    })
}

/// Default rounding floor for residual scans: double-precision identities
/// bottom out around 1e-13 once a handful of points are averaged.
pub const RESIDUAL_FLOOR: f64 = 1e-13;
