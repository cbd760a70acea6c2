//! The `verify` subcommand: a fast, self-contained battery of the
//! invariants the whole laboratory rests on.
//!
//! Every check is independent, takes at most a couple of seconds, and
//! reports one PASS/FAIL line. The battery covers the layers bottom-up:
//! the seeded generator, reverse-mode gradients against finite differences,
//! attack contracts (zero-budget identity, budget saturation, PGD/FGSM
//! degeneracy), the decomposition identities (exact and first-order), the
//! binary formats, and end-to-end CSV determinism.

use bvlab::attack::{bv_attack, fgsm, pgd};
use bvlab::cifar::CifarBatch;
use bvlab::data::{
    gen_linear_regression, gen_two_gaussians, split, GaussianTaskConfig, LinearTaskConfig, Target,
};
use bvlab::decompose::{ce_adv_firstorder, ce_kl_decompose, mse_adv_decompose, mse_decompose};
use bvlab::ensemble::{train_ensemble, Ensemble};
use bvlab::finite_diff::{check_gradient, FiniteDiffConfig};
use bvlab::model::{build_mlp, train, Activation, Head, MlpSpec, Model, TrainConfig};
use bvlab::rng::SplitMix64;
use bvlab::tensor::Tensor;
use bvlab::Model64;

use crate::config::Config;
use crate::harness::{build_experiment, rows_to_csv, run_sweep};

/// Outcome of one named invariant check.
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    /// Failure explanation; empty on success.
    pub detail: String,
}

type Check = (&'static str, fn() -> Result<(), String>);

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn err_str<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

// ---- fixtures -------------------------------------------------------------------

/// Ensemble, test inputs, noisy targets, and noise variance.
type RegressionFixture = (Ensemble<f64>, Vec<Vec<f64>>, Vec<f64>, f64);

fn tiny_regression_ensemble() -> Result<RegressionFixture, String> {
    let cfg = LinearTaskConfig {
        n: 90,
        dim: 2,
        ..Default::default()
    };
    let (data, task) = err_str(gen_linear_regression::<f64>(&cfg, 7))?;
    let spec = MlpSpec {
        input_dim: 2,
        hidden: vec![6],
        output_dim: 1,
        activation: Activation::Sigmoid,
        head: Head::Regression,
    };
    let tc = TrainConfig {
        epochs: 12,
        learning_rate: 0.1,
    };
    let ens = err_str(train_ensemble(&spec, &data, &tc, &[1, 2, 3]))?;
    let inputs = data.features()[..40].to_vec();
    let truths: Vec<f64> = inputs.iter().map(|x| task.eval(x)).collect();
    Ok((ens, inputs, truths, task.noise_variance()))
}

fn tiny_classifier() -> Result<Model64, String> {
    let cfg = GaussianTaskConfig {
        n: 90,
        dim: 4,
        mean_low: 0.0,
        mean_high: 2.0,
        std_dev: 1.0,
    };
    let data = err_str(gen_two_gaussians::<f64>(&cfg, 5))?;
    let spec = MlpSpec {
        input_dim: 4,
        hidden: vec![6],
        output_dim: 2,
        activation: Activation::Sigmoid,
        head: Head::Classification,
    };
    err_str(train(
        &spec,
        &data,
        &TrainConfig {
            epochs: 10,
            learning_rate: 0.05,
        },
        3,
    ))
}

// ---- checks ---------------------------------------------------------------------

fn chk_rng_reference() -> Result<(), String> {
    let mut rng = SplitMix64::new(0);
    let expected = [
        0xE220A8397B1DCDAFu64,
        0x6E789E6AA1B965F4,
        0x06C45D188009454F,
    ];
    for (i, &want) in expected.iter().enumerate() {
        let got = rng.next_u64();
        ensure(
            got == want,
            format!("seed-0 output {i}: {got:#x} != {want:#x}"),
        )?;
    }
    let mut a = SplitMix64::new(99).stream(4);
    let mut b = SplitMix64::new(99).stream(4);
    ensure(a.next_u64() == b.next_u64(), "streams are not reproducible")
}

fn chk_gradients_match_finite_differences() -> Result<(), String> {
    let model = tiny_classifier()?;
    let x = vec![0.4, -0.2, 1.1, 0.3];
    let target = Target::Label(1);
    let grad = err_str(model.input_gradient(&x, &target))?;
    let loss = |p: &[f64]| model.loss(p, &target).expect("loss is defined near x");
    let worst = check_gradient(&loss, &x, &grad, &FiniteDiffConfig::default())?;
    ensure(worst < 1e-4, format!("gradient disagreement {worst}"))
}

fn chk_zero_epsilon_identity() -> Result<(), String> {
    let model = tiny_classifier()?;
    let x = [0.3, 1.2, -0.4, 0.9];
    let t = Target::Label(0);
    for rec in [
        err_str(fgsm(&model, &x, &t, 0.0, None))?,
        err_str(pgd(&model, &x, &t, 0.0, 5, None, None))?,
        err_str(bv_attack(&model, &x, 0, 0.0, None, None))?,
    ] {
        ensure(
            rec.x_adv == x.to_vec(),
            "zero-epsilon attack moved the input",
        )?;
        ensure(
            rec.mse_level == 0.0 && rec.linf_level == 0.0,
            "zero-epsilon attack reported nonzero levels",
        )?;
    }
    Ok(())
}

fn chk_fgsm_budget() -> Result<(), String> {
    let model = tiny_classifier()?;
    let x = [0.5, 0.1, -0.8, 1.4];
    let eps = 0.05;
    let rec = err_str(fgsm(&model, &x, &Target::Label(0), eps, None))?;
    ensure(
        rec.linf_level <= eps * (1.0 + 1e-12),
        format!("linf level {} above budget {eps}", rec.linf_level),
    )
}

fn chk_pgd_degenerates_to_fgsm() -> Result<(), String> {
    let model = tiny_classifier()?;
    let x = [1.0, -0.25, 0.125, 2.0];
    let t = Target::Label(1);
    let a = err_str(fgsm(&model, &x, &t, 0.03, None))?;
    let b = err_str(pgd(&model, &x, &t, 0.03, 1, Some(0.03), None))?;
    for (u, v) in a.x_adv.iter().zip(&b.x_adv) {
        ensure(
            u.to_bits() == v.to_bits(),
            "single-step pgd differs from fgsm",
        )?;
    }
    Ok(())
}

fn chk_bv_direction_is_ce_gradient() -> Result<(), String> {
    let model = tiny_classifier()?;
    let x = [0.6, -0.2, 1.1, 0.4];
    let eps = 0.7;
    let rec = err_str(bv_attack(&model, &x, 1, eps, None, None))?;
    let grad = err_str(model.input_gradient(&x, &Target::Label(1)))?;
    for (i, ((adv, clean), g)) in rec.x_adv.iter().zip(&rec.x_clean).zip(&grad).enumerate() {
        let beta = adv - clean;
        ensure(
            (beta - eps * g).abs() < 1e-12,
            format!("bv step is not the CE gradient at coordinate {i}"),
        )?;
    }
    Ok(())
}

fn chk_mse_identity() -> Result<(), String> {
    let (ens, inputs, truths, noise) = tiny_regression_ensemble()?;
    let rep = err_str(mse_decompose(&ens, &inputs, &truths, noise))?;
    ensure(
        rep.residual.abs() < 1e-10,
        format!("clean MSE identity residual {}", rep.residual),
    )
}

fn chk_linear_perturbed_mse_exact() -> Result<(), String> {
    let spec = MlpSpec {
        input_dim: 2,
        hidden: vec![],
        output_dim: 1,
        activation: Activation::Relu,
        head: Head::Regression,
    };
    let members: Vec<Model64> = [(vec![1.0, -0.5], 0.2), (vec![0.4, 0.8], -0.1)]
        .iter()
        .map(|(w, b)| {
            err_str(Model::from_parts(
                spec.clone(),
                vec![err_str(Tensor::matrix(1, 2, w.clone()))?],
                vec![Tensor::vector(vec![*b])],
            ))
        })
        .collect::<Result<_, String>>()?;
    let ens = err_str(Ensemble::from_members(members, vec![0, 1]))?;
    let inputs = vec![vec![0.3, 0.7], vec![-1.0, 0.25], vec![2.0, -2.0]];
    let truths = vec![0.5, -0.25, 1.0];
    let perturbed: Vec<Vec<f64>> = inputs
        .iter()
        .map(|x| vec![x[0] + 0.05, x[1] - 0.125])
        .collect();
    let rep = err_str(mse_adv_decompose(&ens, &inputs, &truths, 0.01, &perturbed))?;
    ensure(
        rep.residual.abs() < 1e-10,
        format!("all-linear first-order residual {}", rep.residual),
    )
}

fn chk_ce_identity() -> Result<(), String> {
    let cfg = GaussianTaskConfig {
        n: 90,
        dim: 4,
        mean_low: 0.0,
        mean_high: 2.5,
        std_dev: 1.0,
    };
    let data = err_str(gen_two_gaussians::<f64>(&cfg, 11))?;
    let spec = MlpSpec {
        input_dim: 4,
        hidden: vec![5],
        output_dim: 2,
        activation: Activation::Sigmoid,
        head: Head::Classification,
    };
    let tc = TrainConfig {
        epochs: 8,
        learning_rate: 0.05,
    };
    let ens = err_str(train_ensemble(&spec, &data, &tc, &[1, 2, 3]))?;
    let inputs = data.features()[..40].to_vec();
    let labels: Vec<usize> = (0..40)
        .map(|i| match data.target(i) {
            Target::Label(l) => l,
            Target::Value(_) => unreachable!(),
        })
        .collect();
    let rep = err_str(ce_kl_decompose(&ens, &inputs, &labels))?;
    ensure(
        rep.residual.abs() < 1e-10,
        format!("CE identity residual {}", rep.residual),
    )?;

    // Singleton ensemble: the dispersion shift must vanish identically.
    let solo = err_str(Ensemble::from_members(
        vec![ens.members()[0].clone()],
        vec![1],
    ))?;
    let perturbed: Vec<Vec<f64>> = inputs
        .iter()
        .zip(&labels)
        .map(|(x, &l)| {
            err_str(bv_attack(&solo.members()[0], x, l, 0.05, None, None)).map(|r| r.x_adv)
        })
        .collect::<Result<_, String>>()?;
    let adv = err_str(ce_adv_firstorder(&solo, &inputs, &labels, &perturbed))?;
    ensure(
        adv.dispersion_shift == 0.0,
        format!("K=1 dispersion shift {} != 0", adv.dispersion_shift),
    )
}

fn chk_model_roundtrip() -> Result<(), String> {
    let spec = MlpSpec {
        input_dim: 3,
        hidden: vec![4, 2],
        output_dim: 2,
        activation: Activation::Relu,
        head: Head::Classification,
    };
    let model = err_str(build_mlp::<f64>(&spec, 17))?;
    let bytes = model.to_bytes();
    let back = err_str(Model::<f64>::from_bytes(&bytes))?;
    for (a, b) in model.flat_params().iter().zip(back.flat_params().iter()) {
        ensure(
            a.to_bits() == b.to_bits(),
            "model parameters changed in round-trip",
        )?;
    }
    ensure(
        back.spec() == model.spec(),
        "model spec changed in round-trip",
    )
}

fn chk_cifar_roundtrip() -> Result<(), String> {
    let mut rng = SplitMix64::new(123);
    let n = 4;
    let mut bytes = Vec::with_capacity(n * 3073);
    for _ in 0..n {
        bytes.push(rng.below(10) as u8);
        for _ in 0..3072 {
            bytes.push(rng.below(256) as u8);
        }
    }
    let batch = err_str(CifarBatch::from_bytes(&bytes))?;
    ensure(
        batch.to_bytes() == bytes,
        "CIFAR bytes changed in round-trip",
    )
}

fn chk_split_partitions() -> Result<(), String> {
    let cfg = LinearTaskConfig {
        n: 50,
        dim: 2,
        ..Default::default()
    };
    let (data, _) = err_str(gen_linear_regression::<f64>(&cfg, 3))?;
    let (a, b) = err_str(split(&data, 0.8, 9))?;
    ensure(
        a.len() + b.len() == data.len(),
        format!(
            "split lost examples: {} + {} != {}",
            a.len(),
            b.len(),
            data.len()
        ),
    )
}

fn chk_csv_determinism() -> Result<(), String> {
    let cfg = err_str(Config::parse(
        "task = regression\n\
         data.n = 60\n\
         data.seed = 5\n\
         model.hidden = 4\n\
         model.activation = sigmoid\n\
         train.epochs = 5\n\
         train.learning_rate = 0.1\n\
         seeds = 1,2\n\
         attack.kinds = fgsm\n\
         attack.fgsm.epsilons = 0.05\n",
    ))?;
    let exp = err_str(build_experiment(&cfg))?;
    let csv_a = {
        let ens = err_str(exp.train_ensemble())?;
        rows_to_csv(&err_str(run_sweep(&exp, &ens))?)
    };
    let csv_b = {
        let ens = err_str(exp.train_ensemble())?;
        rows_to_csv(&err_str(run_sweep(&exp, &ens))?)
    };
    ensure(
        csv_a == csv_b,
        "two identical runs produced different CSV bytes",
    )?;
    ensure(
        csv_a.ends_with('\n') && !csv_a.contains('\r'),
        "CSV line endings are not LF",
    )
}

/// Runs the whole battery; one result per named invariant.
pub fn run_all() -> Vec<CheckResult> {
    let checks: &[Check] = &[
        ("rng-reference-vectors", chk_rng_reference),
        (
            "gradients-match-finite-differences",
            chk_gradients_match_finite_differences,
        ),
        (
            "attacks-identity-at-zero-epsilon",
            chk_zero_epsilon_identity,
        ),
        ("fgsm-respects-linf-budget", chk_fgsm_budget),
        ("pgd-single-step-equals-fgsm", chk_pgd_degenerates_to_fgsm),
        (
            "bv-direction-is-ce-gradient",
            chk_bv_direction_is_ce_gradient,
        ),
        ("mse-identity-residual", chk_mse_identity),
        ("linear-perturbed-mse-exact", chk_linear_perturbed_mse_exact),
        ("ce-identity-and-k1-dispersion", chk_ce_identity),
        ("model-binary-roundtrip", chk_model_roundtrip),
        ("cifar-binary-roundtrip", chk_cifar_roundtrip),
        ("split-partitions-dataset", chk_split_partitions),
        ("csv-byte-determinism", chk_csv_determinism),
    ];
    checks
        .iter()
        .map(|(name, f)| match f() {
            Ok(()) => CheckResult {
                name,
                passed: true,
                detail: String::new(),
            },
            Err(detail) => CheckResult {
                name,
                passed: false,
                detail,
            },
        })
        .collect()
}
