//! Adversarial training: SGD where each example is perturbed against the
//! model's current parameters right before its update step.
//!
//! The perturbation is regenerated every time an example is visited, so the
//! attack always targets the parameters of that moment — training against a
//! stale, pre-generated adversarial set is a different (weaker) protocol.
//! With [`AttackKind::None`] the hook never replaces an input and the run is
//! bit-identical to [`crate::model::train`].

use rayon::prelude::*;

use crate::attack::{bv_attack, fgsm, pgd, AttackKind, AttackSpec};
use crate::data::{LabeledDataset, Target};
use crate::ensemble::Ensemble;
use crate::error::{Error, Result};
use crate::model::{train_with_hook, MlpSpec, Model, TrainConfig};
use crate::scalar::Scalar;

/// Checks that `attack` makes sense at training time.
///
/// The direction attacks need a full ensemble's geometry, which does not
/// exist while a single member is mid-training; only the single-model
/// attacks (plus `none`) are accepted.
fn check_training_attack(attack: &AttackSpec) -> Result<()> {
    attack.validate()?;
    match attack.kind {
        AttackKind::None | AttackKind::Fgsm | AttackKind::Pgd | AttackKind::BiasVariance => Ok(()),
        AttackKind::BiasDirection | AttackKind::VarianceDirection => {
            Err(Error::InvalidConfig(format!(
                "attack kind \"{}\" needs an ensemble and cannot be used for training; \
                 use none, fgsm, pgd, or bv",
                attack.kind.name()
            )))
        }
    }
}

/// Perturbs one training example against the current model.
fn perturb_example<S: Scalar>(
    attack: &AttackSpec,
    model: &Model<S>,
    x: &[S],
    target: &Target<S>,
) -> Result<Option<Vec<S>>> {
    match attack.kind {
        AttackKind::None => Ok(None),
        AttackKind::Fgsm => Ok(Some(
            fgsm(model, x, target, attack.epsilon, attack.clamp)?.x_adv,
        )),
        AttackKind::Pgd => Ok(Some(
            pgd(
                model,
                x,
                target,
                attack.epsilon,
                attack.steps,
                attack.step_size,
                attack.clamp,
            )?
            .x_adv,
        )),
        AttackKind::BiasVariance => match target {
            Target::Label(label) => Ok(Some(
                bv_attack(
                    model,
                    x,
                    *label,
                    attack.epsilon,
                    attack.linf_bound,
                    attack.clamp,
                )?
                .x_adv,
            )),
            Target::Value(_) => Err(Error::InvalidConfig(
                "bv attack requires a class label target".into(),
            )),
        },
        AttackKind::BiasDirection | AttackKind::VarianceDirection => {
            unreachable!("rejected by check_training_attack")
        }
    }
}

/// Adversarially trains a single model.
///
/// Identical to [`crate::model::train`] except that each visited example is
/// replaced by its attacked version, regenerated from the parameters the
/// model has at that step.
pub fn adversarial_train_member<S: Scalar>(
    spec: &MlpSpec,
    data: &LabeledDataset<S>,
    cfg: &TrainConfig,
    attack: &AttackSpec,
    seed: u64,
) -> Result<Model<S>> {
    check_training_attack(attack)?;
    train_with_hook(spec, data, cfg, seed, |model, x, target| {
        perturb_example(attack, model, x, target)
    })
}

/// Adversarially trains one member per seed, in parallel.
///
/// Each member's run is self-contained (the attack only ever uses that
/// member's own current parameters), so results are bit-reproducible
/// regardless of how the seeds are scheduled across threads.
pub fn adversarial_train<S: Scalar>(
    spec: &MlpSpec,
    data: &LabeledDataset<S>,
    cfg: &TrainConfig,
    attack: &AttackSpec,
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
    check_training_attack(attack)?;
    let members: Vec<Model<S>> = seeds
        .par_iter()
        .map(|&seed| adversarial_train_member(spec, data, cfg, attack, seed))
        .collect::<Result<Vec<_>>>()?;
    Ensemble::from_members(members, seeds.to_vec())
}
