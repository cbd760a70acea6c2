//! Ensembles: the same architecture trained from several seeds.
//!
//! The decompositions in this crate all compare a deployed model against
//! the ensemble it was drawn from. For regression the reference point is
//! the arithmetic mean predictor; for classification it is the normalised
//! geometric mean of the member distributions, which is the softmax of the
//! member-averaged log-probabilities. This module trains ensembles and
//! exposes both geometries together with their input gradients.

use rayon::prelude::*;

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::graph::log_softmax_slice;
use crate::model::{train, Head, MlpSpec, Model, TrainConfig};
use crate::scalar::{pairwise_mean, pairwise_sum, Scalar};

/// Independently trained models sharing one architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble<S: Scalar> {
    members: Vec<Model<S>>,
    seeds: Vec<u64>,
}

/// Trains one member per seed, in parallel.
///
/// Each member's run is self-contained and seeded, so the result is
/// bit-identical no matter how many worker threads rayon uses. Seeds must
/// be distinct — duplicate seeds would silently train identical members
/// and understate every variance estimate.
pub fn train_ensemble<S: Scalar>(
    spec: &MlpSpec,
    data: &LabeledDataset<S>,
    cfg: &TrainConfig,
    seeds: &[u64],
) -> Result<Ensemble<S>> {
    if seeds.is_empty() {
        return Err(Error::InvalidConfig(
            "ensemble needs at least one seed".into(),
        ));
    }
    let mut sorted = seeds.to_vec();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::InvalidConfig(format!(
            "ensemble seeds must be distinct, got {seeds:?}"
        )));
    }
    let members: Vec<Model<S>> = seeds
        .par_iter()
        .map(|&seed| train(spec, data, cfg, seed))
        .collect::<Result<Vec<_>>>()?;
    Ensemble::from_members(members, seeds.to_vec())
}

/// Regression geometry of an ensemble at one input: member predictions,
/// their mean, and all the input gradients.
#[derive(Debug, Clone)]
pub struct MseGeometry<S: Scalar> {
    /// Member predictions at the probe point.
    pub member_values: Vec<S>,
    /// Arithmetic mean of the member predictions.
    pub mean_value: S,
    /// Input gradient of each member's prediction.
    pub member_gradients: Vec<Vec<S>>,
    /// Input gradient of the mean prediction.
    pub mean_gradient: Vec<S>,
}

/// Classification geometry of an ensemble at one input.
///
/// `m` denotes the member-averaged log-probabilities; the normalised
/// geometric mean distribution is `softmax(m)`.
#[derive(Debug, Clone)]
pub struct CeGeometry<S: Scalar> {
    /// `m_i`: mean over members of `log p_k(i | x)`.
    pub mean_log_probs: Vec<S>,
    /// `log softmax(m)`: log of the normalised geometric mean distribution.
    pub log_pi_star: Vec<S>,
    /// `softmax(m)` itself.
    pub pi_star: Vec<S>,
    /// Input gradient of each `m_i` (class-major: `[class][coordinate]`).
    pub grad_mean_log_probs: Vec<Vec<S>>,
    /// Ensembles of one member have identically zero dispersion; remember
    /// that so the dispersion gradient can be exactly zero, not just tiny.
    single_member: bool,
}

impl<S: Scalar> CeGeometry<S> {
    /// Input gradient of `log pi*_class`.
    ///
    /// Differentiating `log softmax(m)_c = m_c - logsumexp(m)` gives
    /// `grad m_c - sum_j softmax(m)_j grad m_j`.
    pub fn log_pi_star_gradient(&self, class: usize) -> Vec<S> {
        let correction = self.weighted_grad_sum();
        self.grad_mean_log_probs[class]
            .iter()
            .zip(&correction)
            .map(|(&g, &c)| g - c)
            .collect()
    }

    /// Input gradient of the mean KL dispersion `-logsumexp(m)`.
    ///
    /// For a single-member ensemble the dispersion is identically zero as a
    /// function of the input, so its gradient is exactly zero.
    pub fn dispersion_gradient(&self) -> Vec<S> {
        let dim = self.grad_mean_log_probs[0].len();
        if self.single_member {
            return vec![S::zero(); dim];
        }
        self.weighted_grad_sum().into_iter().map(|v| -v).collect()
    }

    /// `sum_j softmax(m)_j grad m_j`, the gradient of `logsumexp(m)`.
    fn weighted_grad_sum(&self) -> Vec<S> {
        let dim = self.grad_mean_log_probs[0].len();
        let mut out = Vec::with_capacity(dim);
        for d in 0..dim {
            let terms: Vec<S> = self
                .pi_star
                .iter()
                .zip(&self.grad_mean_log_probs)
                .map(|(&p, g)| p * g[d])
                .collect();
            out.push(pairwise_sum(&terms));
        }
        out
    }
}

impl<S: Scalar> Ensemble<S> {
    /// Wraps already-trained members, checking they share an architecture.
    pub fn from_members(members: Vec<Model<S>>, seeds: Vec<u64>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::InvalidConfig(
                "ensemble needs at least one member".into(),
            ));
        }
        if members.len() != seeds.len() {
            return Err(Error::InvalidConfig(format!(
                "{} members but {} seeds",
                members.len(),
                seeds.len()
            )));
        }
        let spec = members[0].spec().clone();
        if let Some(k) = members.iter().position(|m| *m.spec() != spec) {
            return Err(Error::InvalidConfig(format!(
                "member {k} has a different architecture from member 0"
            )));
        }
        Ok(Ensemble { members, seeds })
    }

    /// The trained members, in seed order.
    pub fn members(&self) -> &[Model<S>] {
        &self.members
    }

    /// Training seed of each member.
    pub fn seeds(&self) -> &[u64] {
        &self.seeds
    }

    /// Number of members.
    pub fn len(&self) -> usize {
        self.members.len()
    }

    /// Ensembles are never empty.
    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// The shared architecture.
    pub fn spec(&self) -> &MlpSpec {
        self.members[0].spec()
    }

    fn require_head(&self, head: Head, what: &str) -> Result<()> {
        if self.spec().head != head {
            return Err(Error::InvalidConfig(format!(
                "{what} requires a {} ensemble",
                match head {
                    Head::Regression => "regression",
                    Head::Classification => "classification",
                }
            )));
        }
        Ok(())
    }

    // ---- regression geometry --------------------------------------------

    /// Mean of the member predictions at `x`.
    pub fn mean_prediction(&self, x: &[S]) -> Result<S> {
        self.require_head(Head::Regression, "mean_prediction")?;
        let values: Vec<S> = self
            .members
            .iter()
            .map(|m| m.predict_scalar(x))
            .collect::<Result<_>>()?;
        Ok(pairwise_mean(&values))
    }

    /// Input gradient of the mean prediction at `x`.
    pub fn mean_prediction_gradient(&self, x: &[S]) -> Result<Vec<S>> {
        Ok(self.mse_geometry(x)?.mean_gradient)
    }

    /// Full regression geometry at `x`: every member's value and gradient
    /// plus their means, computed once.
    pub fn mse_geometry(&self, x: &[S]) -> Result<MseGeometry<S>> {
        self.require_head(Head::Regression, "mse_geometry")?;
        let member_values: Vec<S> = self
            .members
            .iter()
            .map(|m| m.predict_scalar(x))
            .collect::<Result<_>>()?;
        let member_gradients: Vec<Vec<S>> = self
            .members
            .iter()
            .map(|m| m.output_gradient(x))
            .collect::<Result<_>>()?;
        let mean_value = pairwise_mean(&member_values);
        let dim = x.len();
        let mut mean_gradient = Vec::with_capacity(dim);
        for d in 0..dim {
            let col: Vec<S> = member_gradients.iter().map(|g| g[d]).collect();
            mean_gradient.push(pairwise_mean(&col));
        }
        Ok(MseGeometry {
            member_values,
            mean_value,
            member_gradients,
            mean_gradient,
        })
    }

    // ---- classification geometry ------------------------------------------

    /// `m_i`: mean over members of the log class probabilities at `x`.
    pub fn mean_log_probs(&self, x: &[S]) -> Result<Vec<S>> {
        self.require_head(Head::Classification, "mean_log_probs")?;
        let per_member: Vec<Vec<S>> = self
            .members
            .iter()
            .map(|m| m.log_probs(x))
            .collect::<Result<_>>()?;
        let classes = self.spec().output_dim;
        let mut m = Vec::with_capacity(classes);
        for c in 0..classes {
            let col: Vec<S> = per_member.iter().map(|lp| lp[c]).collect();
            m.push(pairwise_mean(&col));
        }
        Ok(m)
    }

    /// The normalised geometric mean of the member distributions:
    /// `softmax(mean_k log p_k)`.
    pub fn normalized_geometric_mean(&self, x: &[S]) -> Result<Vec<S>> {
        let m = self.mean_log_probs(x)?;
        Ok(log_softmax_slice(&m).into_iter().map(|l| l.exp()).collect())
    }

    /// `logsumexp` of the mean log-probabilities. Always <= 0; this is the
    /// (negated) mean KL dispersion in closed form.
    pub fn log_partition(&self, x: &[S]) -> Result<S> {
        let m = self.mean_log_probs(x)?;
        // logsumexp(m) = m_c - log_softmax(m)_c for any c; use class 0.
        let ls = log_softmax_slice(&m);
        Ok(m[0] - ls[0])
    }

    /// Mean KL divergence from the normalised geometric mean to the members:
    /// `mean_k KL(pi* || p_k)`, computed from the definition.
    ///
    /// This deliberately does *not* use the closed form `-logsumexp(m)`;
    /// agreement between the two is one of the identities the test suite
    /// verifies.
    pub fn kl_mean(&self, x: &[S]) -> Result<S> {
        self.require_head(Head::Classification, "kl_mean")?;
        let m = self.mean_log_probs(x)?;
        let log_pi_star = log_softmax_slice(&m);
        let pi_star: Vec<S> = log_pi_star.iter().map(|&l| l.exp()).collect();
        let per_member: Vec<S> = self
            .members
            .iter()
            .map(|member| {
                let lp = member.log_probs(x)?;
                let terms: Vec<S> = pi_star
                    .iter()
                    .zip(&log_pi_star)
                    .zip(&lp)
                    .map(|((&p, &lps), &lpk)| p * (lps - lpk))
                    .collect();
                Ok(pairwise_sum(&terms))
            })
            .collect::<Result<_>>()?;
        Ok(pairwise_mean(&per_member))
    }

    /// Full classification geometry at `x`, computed once: the averaged
    /// log-probabilities, the normalised geometric mean, and all gradients.
    pub fn ce_geometry(&self, x: &[S]) -> Result<CeGeometry<S>> {
        self.require_head(Head::Classification, "ce_geometry")?;
        let classes = self.spec().output_dim;
        let per_member_logs: Vec<Vec<S>> = self
            .members
            .iter()
            .map(|m| m.log_probs(x))
            .collect::<Result<_>>()?;
        let mut mean_log_probs = Vec::with_capacity(classes);
        for c in 0..classes {
            let col: Vec<S> = per_member_logs.iter().map(|lp| lp[c]).collect();
            mean_log_probs.push(pairwise_mean(&col));
        }
        let log_pi_star = log_softmax_slice(&mean_log_probs);
        let pi_star: Vec<S> = log_pi_star.iter().map(|&l| l.exp()).collect();

        let mut grad_mean_log_probs = Vec::with_capacity(classes);
        for c in 0..classes {
            let per_member_grads: Vec<Vec<S>> = self
                .members
                .iter()
                .map(|m| m.logprob_gradient(x, c))
                .collect::<Result<_>>()?;
            let mut g = Vec::with_capacity(x.len());
            for d in 0..x.len() {
                let col: Vec<S> = per_member_grads.iter().map(|gr| gr[d]).collect();
                g.push(pairwise_mean(&col));
            }
            grad_mean_log_probs.push(g);
        }

        Ok(CeGeometry {
            mean_log_probs,
            log_pi_star,
            pi_star,
            grad_mean_log_probs,
            single_member: self.members.len() == 1,
        })
    }
}
