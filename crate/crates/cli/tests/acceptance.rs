//! Acceptance battery: the eleven checks that gate this repository.
//!
//! Layout: criteria 1-8 are exact-identity and first-order-validity checks
//! on small trained fixtures, 9-10 reproduce the simulated-data trend
//! figures at desk scale, 11 pins determinism and binary formats. Trained
//! fixtures are shared through lazy statics so the battery stays fast, and
//! every random quantity is seeded, so each check is exactly reproducible.
//! Each test ends by printing one `acceptance NN <name>: pass` line with
//! the measured margin (visible under `--nocapture`).

use std::process::Command;

use once_cell::sync::Lazy;

use bvlab::attack::{bv_attack, fgsm, generate, pgd, AttackKind, AttackSpec};
use bvlab::cifar::{load_cifar10, save_cifar10, CifarBatch, CIFAR_RECORD_BYTES};
use bvlab::data::{
    gen_linear_regression, gen_two_gaussians, split, GaussianTaskConfig, LabeledDataset,
    LinearTask, LinearTaskConfig, Target, Targets,
};
use bvlab::decompose::{
    ce_adv_firstorder, mse_adv_decompose, mse_decompose, softmax_ce_adv_decompose,
    taylor_residual_scan, RESIDUAL_FLOOR,
};
use bvlab::ensemble::{train_ensemble, Ensemble};
use bvlab::finite_diff::{gradient_disagreement, FiniteDiffConfig};
use bvlab::model::{build_mlp, Activation, Head, MlpSpec, Model, TrainConfig};
use bvlab::rng::SplitMix64;
use bvlab::{Ensemble64, LabeledDataset64};

use bvlab_cli::config::Config;
use bvlab_cli::harness::{build_experiment, run_sweep, SweepRow};

// ---- shared fixtures ----------------------------------------------------------

/// A trained regression ensemble plus its held-out evaluation set.
struct RegFixture {
    ensemble: Ensemble64,
    /// Test features.
    inputs: Vec<Vec<f64>>,
    /// Noisy observed targets at the test features.
    noisy: Vec<f64>,
    /// Noise-free true values at the test features.
    truth: Vec<f64>,
    task: LinearTask,
}

#[allow(clippy::too_many_arguments)]
fn reg_fixture(
    seed: u64,
    n_train: usize,
    n_test: usize,
    noise_half_width: f64,
    activation: Activation,
    hidden: Vec<usize>,
    seeds: &[u64],
    epochs: usize,
    learning_rate: f64,
    noiseless_training: bool,
) -> RegFixture {
    let cfg = LinearTaskConfig {
        n: n_train + n_test,
        dim: 2,
        feature_low: -1.0,
        feature_high: 1.0,
        noise_half_width,
    };
    let (data, task) = gen_linear_regression::<f64>(&cfg, seed).expect("valid task config");

    // Features are i.i.d., so a prefix/suffix split is an unbiased split.
    let train_idx: Vec<usize> = (0..n_train).collect();
    let test_idx: Vec<usize> = (n_train..n_train + n_test).collect();
    let mut train = data.subset(&train_idx);
    let test = data.subset(&test_idx);

    if noiseless_training {
        let clean: Vec<f64> = train.features().iter().map(|x| task.eval(x)).collect();
        train = LabeledDataset::new(train.features().to_vec(), Targets::Values(clean))
            .expect("aligned targets");
    }

    let spec = MlpSpec {
        input_dim: 2,
        hidden,
        output_dim: 1,
        activation,
        head: Head::Regression,
    };
    let train_cfg = TrainConfig {
        epochs,
        learning_rate,
    };
    let ensemble = train_ensemble::<f64>(&spec, &train, &train_cfg, seeds).expect("training");

    let inputs = test.features().to_vec();
    let noisy: Vec<f64> = (0..test.len())
        .map(|i| match test.target(i) {
            Target::Value(v) => v,
            Target::Label(_) => unreachable!("regression targets"),
        })
        .collect();
    let truth: Vec<f64> = inputs.iter().map(|x| task.eval(x)).collect();
    RegFixture {
        ensemble,
        inputs,
        noisy,
        truth,
        task,
    }
}

/// The simulated regression setup: 2-d uniform features, linear target with
/// uniform noise, one hidden layer of 100 ReLU units, five seeds.
static REG_RELU: Lazy<RegFixture> = Lazy::new(|| {
    reg_fixture(
        11,
        1000,
        2000,
        0.1,
        Activation::Relu,
        vec![100],
        &[1, 2, 3, 4, 5],
        250,
        0.02,
        false,
    )
});

/// A smooth (sigmoid) regression ensemble for Taylor-residual scans. Kept
/// deliberately short of convergence: the quadratic term of the residual is
/// weighted by the remaining bias, so a near-interpolating ensemble would
/// push the measurable decay into higher orders over the scanned scales.
static REG_SIGMOID: Lazy<RegFixture> = Lazy::new(|| {
    reg_fixture(
        17,
        400,
        300,
        0.1,
        Activation::Sigmoid,
        vec![30],
        &[1, 2, 3],
        100,
        0.1,
        false,
    )
});

/// Noise-floor fixture: trained to near-interpolation on noiseless targets,
/// evaluated later against noisy observations of the same task.
static REG_NOISE_FLOOR: Lazy<RegFixture> = Lazy::new(|| {
    reg_fixture(
        33,
        512,
        10_000,
        1.0,
        Activation::Relu,
        vec![100],
        &[1, 2, 3],
        1500,
        0.02,
        true,
    )
});

/// A trained classification ensemble plus its held-out evaluation set.
struct ClsFixture {
    ensemble: Ensemble64,
    inputs: Vec<Vec<f64>>,
    labels: Vec<usize>,
}

fn cls_labels(data: &LabeledDataset64) -> Vec<usize> {
    (0..data.len())
        .map(|i| match data.target(i) {
            Target::Label(l) => l,
            Target::Value(_) => unreachable!("classification targets"),
        })
        .collect()
}

/// The simulated classification setup: 50-d two-Gaussian task with well
/// separated means, two sigmoid hidden layers of 50 and 100 units, five
/// seeds.
static CLS_SIGMOID: Lazy<ClsFixture> = Lazy::new(|| {
    let cfg = GaussianTaskConfig {
        n: 700,
        dim: 50,
        mean_low: 0.0,
        mean_high: 10.0,
        std_dev: 1.0,
    };
    let data = gen_two_gaussians::<f64>(&cfg, 22).expect("valid task config");
    let (train, test) = split(&data, 500.0 / 700.0, 3).expect("split");
    let spec = MlpSpec {
        input_dim: 50,
        hidden: vec![50, 100],
        output_dim: 2,
        activation: Activation::Sigmoid,
        head: Head::Classification,
    };
    let train_cfg = TrainConfig {
        epochs: 80,
        learning_rate: 0.1,
    };
    let ensemble =
        train_ensemble::<f64>(&spec, &train, &train_cfg, &[1, 2, 3, 4, 5]).expect("training");
    ClsFixture {
        ensemble,
        inputs: test.features().to_vec(),
        labels: cls_labels(&test),
    }
});

// ---- small helpers --------------------------------------------------------------

fn member_values(ensemble: &Ensemble64, x: &[f64]) -> Vec<f64> {
    ensemble
        .members()
        .iter()
        .map(|m| m.predict_scalar(x).expect("prediction"))
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// KL(p || q) for dense simplex vectors, from the definition.
fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&pi, &qi)| {
            if pi > 0.0 {
                pi * (pi.ln() - qi.ln())
            } else {
                0.0
            }
        })
        .sum()
}

/// Count of strictly decreasing adjacent steps.
fn decreasing_steps(v: &[f64]) -> usize {
    v.windows(2).filter(|w| w[1] < w[0]).count()
}

/// Argmax with lowest-index tie-break.
fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// White-box per-member ensemble accuracy under FGSM at one epsilon:
/// each member is attacked against itself, member accuracies are averaged.
/// Returns `(mean accuracy, mean measured mse level)`.
fn white_box_fgsm_accuracy(
    ensemble: &Ensemble64,
    inputs: &[Vec<f64>],
    labels: &[usize],
    epsilon: f64,
) -> (f64, f64) {
    let mut accs = Vec::new();
    let mut levels = Vec::new();
    for (k, member) in ensemble.members().iter().enumerate() {
        let mut correct = 0usize;
        for (x, &t) in inputs.iter().zip(labels) {
            let rec = fgsm(member, x, &Target::Label(t), epsilon, None).expect("attack");
            levels.push(rec.mse_level);
            let lp = member.log_probs(&rec.x_adv).expect("prediction");
            if argmax(&lp) == t {
                correct += 1;
            }
        }
        let _ = k;
        accs.push(correct as f64 / inputs.len() as f64);
    }
    (mean(&accs), mean(&levels))
}

/// Perturbs every input with the given attack; returns perturbed points and
/// the mean measured mse level.
fn perturb_all(
    ensemble: &Ensemble64,
    spec: &AttackSpec,
    inputs: &[Vec<f64>],
    targets: &[Target<f64>],
) -> (Vec<Vec<f64>>, f64) {
    let mut perturbed = Vec::with_capacity(inputs.len());
    let mut levels = Vec::with_capacity(inputs.len());
    for (x, t) in inputs.iter().zip(targets) {
        let rec = generate(spec, ensemble, x, t).expect("attack");
        levels.push(rec.mse_level);
        perturbed.push(rec.x_adv);
    }
    (perturbed, mean(&levels))
}

fn rows_for<'a>(rows: &'a [SweepRow], attack: &str, metric: &str) -> Vec<&'a SweepRow> {
    let mut out: Vec<&SweepRow> = rows
        .iter()
        .filter(|r| r.attack == attack && r.metric == metric)
        .collect();
    out.sort_by(|a, b| a.epsilon.partial_cmp(&b.epsilon).expect("finite epsilon"));
    out
}

// ---- 1: exact squared-error ensemble identity -----------------------------------

#[test]
fn c01_mse_ensemble_identity_is_exact_per_point() {
    let fix = &*REG_RELU;
    assert_eq!(fix.inputs.len(), 2000);

    let mut worst = 0.0f64;
    for (x, &y) in fix.inputs.iter().zip(&fix.noisy) {
        let values = member_values(&fix.ensemble, x);
        let fbar = mean(&values);
        let lhs = mean(&values.iter().map(|f| (y - f) * (y - f)).collect::<Vec<_>>());
        let var = mean(
            &values
                .iter()
                .map(|f| (f - fbar) * (f - fbar))
                .collect::<Vec<_>>(),
        );
        let gap = (lhs - (y - fbar) * (y - fbar) - var).abs();
        worst = worst.max(gap);
    }
    assert!(
        worst < 1e-10,
        "per-point ensemble identity violated: worst gap {worst:.3e}"
    );
    println!("acceptance 01 mse-ensemble-identity: pass (worst per-point gap {worst:.3e} < 1e-10 over 2000 points)");
}

// ---- 2: analytic noise floor ------------------------------------------------------

#[test]
fn c02_noise_floor_matches_analytic_variance() {
    let fix = &*REG_NOISE_FLOOR;
    let sigma2 = fix.task.noise_variance();
    assert!(
        (sigma2 - 1.0 / 3.0).abs() < 1e-15,
        "half-width 1 has variance 1/3"
    );
    assert_eq!(fix.inputs.len(), 10_000);

    // Mean squared error of each member against noisy observations.
    let mut terms = Vec::with_capacity(fix.inputs.len());
    for (x, &y) in fix.inputs.iter().zip(&fix.noisy) {
        let values = member_values(&fix.ensemble, x);
        terms.push(mean(
            &values.iter().map(|f| (y - f) * (y - f)).collect::<Vec<_>>(),
        ));
    }
    let total = mean(&terms);
    let rel = (total - sigma2).abs() / sigma2;
    assert!(
        rel < 0.05,
        "noise floor off: total {total:.5}, analytic {sigma2:.5}, relative gap {rel:.4}"
    );
    println!(
        "acceptance 02 noise-floor: pass (total {total:.5} vs analytic {sigma2:.5}, relative gap {rel:.4} < 0.05)"
    );
}

// ---- 3: exact cross-entropy identity and geometric-mean optimality ---------------

#[test]
fn c03_ce_identity_is_exact_and_geometric_mean_is_optimal() {
    let fix = &*CLS_SIGMOID;
    let ens = &fix.ensemble;

    let mut worst = 0.0f64;
    for (x, &t) in fix.inputs.iter().zip(&fix.labels) {
        let member_probs: Vec<Vec<f64>> = ens
            .members()
            .iter()
            .map(|m| m.probs(x).expect("probs"))
            .collect();
        let pi_star = ens.normalized_geometric_mean(x).expect("pi star");
        let onehot: Vec<f64> = (0..pi_star.len())
            .map(|c| if c == t { 1.0 } else { 0.0 })
            .collect();

        let lhs = mean(
            &member_probs
                .iter()
                .map(|p| kl(&onehot, p))
                .collect::<Vec<_>>(),
        );
        let bias = kl(&onehot, &pi_star);
        let dispersion = mean(
            &member_probs
                .iter()
                .map(|p| kl(&pi_star, p))
                .collect::<Vec<_>>(),
        );
        worst = worst.max((lhs - bias - dispersion).abs());
    }
    assert!(
        worst < 1e-10,
        "per-point cross-entropy identity violated: worst gap {worst:.3e}"
    );

    // The normalised geometric mean minimises the mean KL to the members:
    // no random simplex candidate may beat it (up to rounding slack).
    let mut rng = SplitMix64::new(99);
    let mut worst_margin = f64::INFINITY;
    for x in fix.inputs.iter().take(20) {
        let member_probs: Vec<Vec<f64>> = ens
            .members()
            .iter()
            .map(|m| m.probs(x).expect("probs"))
            .collect();
        let pi_star = ens.normalized_geometric_mean(x).expect("pi star");
        let star_score = mean(
            &member_probs
                .iter()
                .map(|p| kl(&pi_star, p))
                .collect::<Vec<_>>(),
        );
        for _ in 0..1000 {
            // Uniform Dirichlet draw via normalised exponentials.
            let e: Vec<f64> = (0..pi_star.len()).map(|_| -rng.next_f64().ln()).collect();
            let s: f64 = e.iter().sum();
            let candidate: Vec<f64> = e.iter().map(|v| v / s).collect();
            let score = mean(
                &member_probs
                    .iter()
                    .map(|p| kl(&candidate, p))
                    .collect::<Vec<_>>(),
            );
            worst_margin = worst_margin.min(score - star_score);
            assert!(
                score + 1e-12 >= star_score,
                "random candidate beat the geometric mean by {:.3e}",
                star_score - score
            );
        }
    }
    println!(
        "acceptance 03 ce-identity-and-star-optimality: pass (worst identity gap {worst:.3e} < 1e-10; closest candidate within {worst_margin:.3e} of optimal over 20x1000 draws)"
    );
}

// ---- 4: first-order squared-error validity ---------------------------------------

#[test]
fn c04_first_order_mse_is_exact_for_linear_and_quadratic_for_smooth() {
    // Hand-built linear members: the first-order reconstruction is exact.
    let dim = 3;
    let spec = MlpSpec {
        input_dim: dim,
        hidden: vec![],
        output_dim: 1,
        activation: Activation::Relu,
        head: Head::Regression,
    };
    let coeffs: [(Vec<f64>, f64); 3] = [
        (vec![0.7, -1.3, 0.4], 0.2),
        (vec![0.5, -0.9, 0.1], -0.1),
        (vec![1.1, -1.0, 0.6], 0.05),
    ];
    let members: Vec<Model<f64>> = coeffs
        .iter()
        .map(|(a, b)| {
            Model::from_parts(
                spec.clone(),
                vec![bvlab::tensor::Tensor::matrix(1, dim, a.clone()).expect("shape")],
                vec![bvlab::tensor::Tensor::vector(vec![*b])],
            )
            .expect("valid parts")
        })
        .collect();
    let linear = Ensemble::from_members(members, vec![1, 2, 3]).expect("ensemble");

    let mut rng = SplitMix64::new(7);
    let inputs: Vec<Vec<f64>> = (0..50)
        .map(|_| (0..dim).map(|_| rng.uniform(-1.0, 1.0)).collect())
        .collect();
    let truths: Vec<f64> = inputs
        .iter()
        .map(|x| 0.8 * x[0] - x[1] + 0.3 * x[2])
        .collect();
    let perturbed: Vec<Vec<f64>> = inputs
        .iter()
        .map(|x| x.iter().map(|v| v + rng.uniform(-0.5, 0.5)).collect())
        .collect();
    let report = mse_adv_decompose(&linear, &inputs, &truths, 0.01, &perturbed).expect("report");
    assert!(
        report.residual.abs() < 1e-10,
        "linear ensemble must be first-order exact, residual {:.3e}",
        report.residual
    );

    // Smooth ensemble: the residual of the first-order reconstruction decays
    // quadratically in the perturbation scale. The scan perturbs along the
    // l2-normalised mean-gradient direction: it is fixed at the clean point
    // (so the perturbation is exactly linear in epsilon) and its first-order
    // term has one sign at every point, so the aggregate residual cannot
    // cancel across points and fake a different decay order.
    let fix = &*REG_SIGMOID;
    let inputs: Vec<Vec<f64>> = fix.inputs.iter().take(150).cloned().collect();
    let truths: Vec<f64> = fix.truth.iter().take(150).cloned().collect();
    let targets: Vec<Target<f64>> = fix
        .noisy
        .iter()
        .take(150)
        .map(|&y| Target::Value(y))
        .collect();

    let epsilons = [0.04, 0.02, 0.01, 0.005];
    let mut residuals = Vec::new();
    for &eps in &epsilons {
        let spec = AttackSpec::new(AttackKind::BiasDirection, eps);
        let (perturbed, _) = perturb_all(&fix.ensemble, &spec, &inputs, &targets);
        let report = mse_adv_decompose(
            &fix.ensemble,
            &inputs,
            &truths,
            fix.task.noise_variance(),
            &perturbed,
        )
        .expect("report");
        residuals.push(report.residual.abs());
    }
    let scan = taylor_residual_scan(&epsilons, &residuals, RESIDUAL_FLOOR).expect("scan");
    let slope = scan.slope.expect("residuals above rounding floor");
    assert!(
        (1.8..=2.2).contains(&slope),
        "residual decay slope {slope:.3} outside [1.8, 2.2]; residuals {residuals:?}"
    );
    println!(
        "acceptance 04 first-order-mse: pass (linear residual {:.3e} < 1e-10; smooth-scan slope {slope:.3} in [1.8, 2.2])",
        report.residual
    );
}

// ---- 5: the bias direction is optimal at first order -----------------------------

#[test]
fn c05_bias_direction_maximises_first_order_bias_change() {
    let fix = &*REG_RELU;
    let epsilon = 0.5;
    let mut rng = SplitMix64::new(55);

    let mut worst_margin = f64::INFINITY;
    for x in fix.inputs.iter().take(10) {
        let grad = fix.ensemble.mean_prediction_gradient(x).expect("gradient");
        let norm: f64 = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        let best = epsilon * norm; // |grad . beta| along the gradient direction

        for _ in 0..1000 {
            // Random unit direction from normalised Gaussians.
            let u: Vec<f64> = (0..grad.len()).map(|_| rng.standard_normal()).collect();
            let un: f64 = u.iter().map(|v| v * v).sum::<f64>().sqrt();
            let dot: f64 = grad.iter().zip(&u).map(|(g, v)| g * v / un).sum();
            let candidate = (epsilon * dot).abs();
            worst_margin = worst_margin.min(best - candidate);
            assert!(
                candidate <= best + 1e-9,
                "random direction beat the gradient direction: {candidate:.6e} > {best:.6e}"
            );
        }
    }
    println!(
        "acceptance 05 bias-direction-optimality: pass (closest random direction within {worst_margin:.3e} of the bound over 10x1000 draws)"
    );
}

// ---- 6: direction attacks separate the two terms ---------------------------------

#[test]
fn c06_direction_attacks_separate_bias_and_variance() {
    let fix = &*REG_RELU;
    let inputs: Vec<Vec<f64>> = fix.inputs.iter().take(200).cloned().collect();
    let truths: Vec<f64> = fix.truth.iter().take(200).cloned().collect();
    let targets: Vec<Target<f64>> = fix
        .noisy
        .iter()
        .take(200)
        .map(|&y| Target::Value(y))
        .collect();

    let clean = mse_decompose(&fix.ensemble, &inputs, &truths, fix.task.noise_variance())
        .expect("clean decomposition");

    // Both direction attacks take an l2-normalised step, so equal epsilons
    // give equal measured levels; the grid covers mse levels 0.5 .. 2.5.
    let epsilons: Vec<f64> = [0.5f64, 1.0, 1.5, 2.0, 2.5]
        .iter()
        .map(|lvl| (lvl * 2.0).sqrt())
        .collect();

    let mut bias_increase_bias_attack = Vec::new();
    let mut bias_increase_var_attack = Vec::new();
    let mut var_increase_var_attack = Vec::new();
    for &eps in &epsilons {
        let bias_spec = AttackSpec::new(AttackKind::BiasDirection, eps);
        let var_spec = AttackSpec::new(AttackKind::VarianceDirection, eps);
        let (bias_pts, bias_level) = perturb_all(&fix.ensemble, &bias_spec, &inputs, &targets);
        let (var_pts, var_level) = perturb_all(&fix.ensemble, &var_spec, &inputs, &targets);

        // Matched by measured level, not by nominal epsilon.
        let gap = (bias_level - var_level).abs() / bias_level.max(var_level);
        assert!(
            gap < 0.05,
            "levels diverged at eps {eps}: {bias_level:.5} vs {var_level:.5}"
        );

        let bias_report = mse_adv_decompose(
            &fix.ensemble,
            &inputs,
            &truths,
            fix.task.noise_variance(),
            &bias_pts,
        )
        .expect("report");
        let var_report = mse_adv_decompose(
            &fix.ensemble,
            &inputs,
            &truths,
            fix.task.noise_variance(),
            &var_pts,
        )
        .expect("report");

        bias_increase_bias_attack.push(bias_report.bias_sq_adv_exact - clean.bias_sq);
        bias_increase_var_attack.push(var_report.bias_sq_adv_exact - clean.bias_sq);
        var_increase_var_attack.push(var_report.variance_adv - clean.variance);
    }

    for (i, (&b, &v)) in bias_increase_bias_attack
        .iter()
        .zip(&bias_increase_var_attack)
        .enumerate()
    {
        assert!(
            b > v,
            "at level {i} the bias attack's bias increase {b:.5} did not exceed the variance attack's {v:.5}"
        );
    }
    let last_var = *var_increase_var_attack.last().expect("non-empty grid");
    assert!(
        last_var > 0.0,
        "variance attack did not raise the variance term at the largest level: {last_var:.5e}"
    );
    println!(
        "acceptance 06 direction-attacks: pass (bias-attack bias increase beats variance-attack at all 5 matched levels; variance increase at top level {last_var:.4})"
    );
}

// ---- 7: first-order cross-entropy validity ----------------------------------------

#[test]
fn c07_first_order_ce_residuals_decay_quadratically() {
    let fix = &*CLS_SIGMOID;
    let inputs: Vec<Vec<f64>> = fix.inputs.iter().take(150).cloned().collect();
    let labels: Vec<usize> = fix.labels.iter().take(150).cloned().collect();
    let targets: Vec<Target<f64>> = labels.iter().map(|&l| Target::Label(l)).collect();

    // Ensemble-level first-order expansion, scanned over a halving ladder
    // small enough that the quadratic term dominates the cubic one.
    let epsilons = [0.1, 0.05, 0.025, 0.0125];
    let mut ens_residuals = Vec::new();
    let mut score_residuals = Vec::new();
    for &eps in &epsilons {
        let spec = AttackSpec::new(AttackKind::Fgsm, eps);
        let (perturbed, _) = perturb_all(&fix.ensemble, &spec, &inputs, &targets);
        let ens_report =
            ce_adv_firstorder(&fix.ensemble, &inputs, &labels, &perturbed).expect("report");
        ens_residuals.push(ens_report.residual.abs());
        let score_report =
            softmax_ce_adv_decompose(&fix.ensemble.members()[0], &inputs, &labels, &perturbed)
                .expect("report");
        score_residuals.push(score_report.residual.abs());
    }
    let ens_slope = taylor_residual_scan(&epsilons, &ens_residuals, RESIDUAL_FLOOR)
        .expect("scan")
        .slope
        .expect("residuals above floor");
    let score_slope = taylor_residual_scan(&epsilons, &score_residuals, RESIDUAL_FLOOR)
        .expect("scan")
        .slope
        .expect("residuals above floor");
    assert!(
        (1.8..=2.2).contains(&ens_slope),
        "ensemble residual slope {ens_slope:.3} outside [1.8, 2.2]; residuals {ens_residuals:?}"
    );
    assert!(
        (1.8..=2.2).contains(&score_slope),
        "score residual slope {score_slope:.3} outside [1.8, 2.2]; residuals {score_residuals:?}"
    );

    // Single-member degenerate case: the dispersion shift vanishes exactly
    // and the bias shift collapses to the unsigned-gradient inner product
    // epsilon * mean ||grad CE||^2.
    let solo = Ensemble::from_members(vec![fix.ensemble.members()[0].clone()], vec![1])
        .expect("singleton ensemble");
    let eps = 0.05;
    let mut perturbed = Vec::with_capacity(inputs.len());
    let mut grad_sq = Vec::with_capacity(inputs.len());
    for (x, &t) in inputs.iter().zip(&labels) {
        let rec = bv_attack(&solo.members()[0], x, t, eps, None, None).expect("attack");
        perturbed.push(rec.x_adv);
        let g = solo.members()[0]
            .input_gradient(x, &Target::Label(t))
            .expect("gradient");
        grad_sq.push(g.iter().map(|v| v * v).sum::<f64>());
    }
    let report = ce_adv_firstorder(&solo, &inputs, &labels, &perturbed).expect("report");
    assert_eq!(
        report.dispersion_shift, 0.0,
        "singleton dispersion shift must vanish exactly"
    );
    let inner = eps * mean(&grad_sq);
    let gap = (report.bias_shift - inner).abs();
    assert!(
        gap < 1e-10,
        "singleton bias shift {:.6e} vs attack inner product {inner:.6e} (gap {gap:.3e})",
        report.bias_shift
    );
    println!(
        "acceptance 07 first-order-ce: pass (ensemble slope {ens_slope:.3}, score slope {score_slope:.3}, singleton inner-product gap {gap:.3e} < 1e-10)"
    );
}

// ---- 8: attack conformance and gradient engine -------------------------------------

#[test]
fn c08_attack_conformance_and_gradient_checks() {
    // Random smooth models over both heads.
    let mut rng = SplitMix64::new(123);
    let mut worst_fd = 0.0f64;
    let mut checks = 0usize;
    let mut worst_bv_gap = 0.0f64;

    for seed in 0..10u64 {
        let head = if seed % 2 == 0 {
            Head::Regression
        } else {
            Head::Classification
        };
        let spec = MlpSpec {
            input_dim: 4,
            hidden: vec![8, 6],
            output_dim: if head == Head::Regression { 1 } else { 3 },
            activation: Activation::Sigmoid,
            head,
        };
        let model = build_mlp::<f64>(&spec, seed).expect("build");

        for _ in 0..10 {
            let x: Vec<f64> = (0..4).map(|_| rng.uniform(-1.5, 1.5)).collect();
            let target = match head {
                Head::Regression => Target::Value(rng.uniform(-1.0, 1.0)),
                Head::Classification => Target::Label(rng.below(3)),
            };

            // Gradient engine vs central differences.
            let grad = model.input_gradient(&x, &target).expect("gradient");
            let loss = |p: &[f64]| model.loss(p, &target).expect("loss");
            let (disagreement, _) =
                gradient_disagreement(&loss, &x, &grad, &FiniteDiffConfig::default());
            worst_fd = worst_fd.max(disagreement);
            checks += 1;

            // Identity at epsilon zero.
            let zero = fgsm(&model, &x, &target, 0.0, None).expect("attack");
            assert_eq!(zero.x_adv, x);

            // One projected step of size epsilon is exactly one signed step.
            let eps = 0.05 + rng.uniform(0.0, 0.2);
            let f = fgsm(&model, &x, &target, eps, None).expect("attack");
            let p = pgd(&model, &x, &target, eps, 1, Some(eps), None).expect("attack");
            assert_eq!(
                f.x_adv.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                p.x_adv.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                "single-step projected attack differs from the signed step"
            );

            // The l-infinity bound is tight: every coordinate with a nonzero
            // gradient moves by exactly epsilon, and none moves more.
            assert!(f.linf_level <= eps * (1.0 + 1e-12));
            if grad.iter().all(|g| g.abs() > 1e-12) && head == Head::Regression {
                // For regression the loss gradient is grad * 2(f - y) which
                // shares the coordinate zero-pattern with grad itself.
                assert!(
                    (f.linf_level - eps).abs() < 1e-12,
                    "expected a tight step, got {} vs {eps}",
                    f.linf_level
                );
            }
            let multi = pgd(&model, &x, &target, eps, 4, None, None).expect("attack");
            assert!(multi.linf_level <= eps * (1.0 + 1e-12));

            // The unsigned attack's step is exactly epsilon times the
            // cross-entropy input gradient.
            if head == Head::Classification {
                let t = match target {
                    Target::Label(l) => l,
                    _ => unreachable!(),
                };
                let rec = bv_attack(&model, &x, t, eps, None, None).expect("attack");
                for ((&a, &c), &g) in rec.x_adv.iter().zip(&x).zip(&grad) {
                    let gap = ((a - c) - eps * g).abs();
                    worst_bv_gap = worst_bv_gap.max(gap);
                    assert!(
                        gap < 1e-12,
                        "unsigned step strayed from the gradient: {gap:.3e}"
                    );
                }
            }
        }
    }
    assert_eq!(checks, 100);
    assert!(
        worst_fd < 1e-4,
        "worst finite-difference disagreement {worst_fd:.3e} exceeds 1e-4"
    );
    println!(
        "acceptance 08 attack-conformance: pass (100 gradient checks, worst {worst_fd:.3e} < 1e-4; unsigned-step gap {worst_bv_gap:.3e} < 1e-12)"
    );
}

// ---- 9: simulated-data trends under the full pipeline ------------------------------

#[test]
fn c09_fgsm_sweeps_reproduce_simulated_trends() {
    // Regression: bias and variance terms grow with the attack budget.
    let cfg = Config::parse(
        "task = regression\n\
         data.n = 1000\n\
         data.dim = 2\n\
         data.seed = 5\n\
         train.epochs = 150\n\
         train.learning_rate = 0.02\n\
         model.hidden = 100\n\
         attack.kinds = fgsm\n\
         attack.fgsm.epsilons = 0.05,0.1,0.2,0.35,0.5\n\
         report = loss-decomposition\n\
         eval.limit = 150\n",
    )
    .expect("config");
    let exp = build_experiment(&cfg).expect("experiment");
    cfg.finish().expect("all keys known");
    let ensemble = exp.train_ensemble().expect("training");
    let rows = run_sweep(&exp, &ensemble).expect("sweep");

    let bias: Vec<f64> = rows_for(&rows, "fgsm", "bias_sq")
        .iter()
        .map(|r| r.value)
        .collect();
    let var: Vec<f64> = rows_for(&rows, "fgsm", "variance")
        .iter()
        .map(|r| r.value)
        .collect();
    assert_eq!(bias.len(), 5);
    assert!(
        decreasing_steps(&bias) <= 1,
        "bias not nondecreasing in epsilon (more than one down-step): {bias:?}"
    );
    assert!(
        decreasing_steps(&var) <= 1,
        "variance not nondecreasing in epsilon (more than one down-step): {var:?}"
    );

    // Classification: the decomposition terms grow with the budget, and the
    // across-seed accuracy variance rises while the attack is contested, then
    // collapses once accuracy saturates near zero. The grid samples the
    // saturation shoulder (eps = 2) once rather than dwelling in the deep
    // plateau, where the across-seed spread collapses because every member
    // fails the same points in lock-step.
    let cls_base = "task = classification\n\
         data.n = 600\n\
         data.dim = 50\n\
         data.seed = 6\n\
         train.epochs = 60\n\
         train.learning_rate = 0.1\n\
         model.hidden = 50,100\n\
         model.activation = sigmoid\n\
         attack.kinds = fgsm\n\
         attack.fgsm.epsilons = 0.5,1,2,6,6.5,7,8\n\
         eval.limit = 120\n";
    let cfg = Config::parse(&format!("{cls_base}report = loss-decomposition\n")).expect("config");
    let exp = build_experiment(&cfg).expect("experiment");
    cfg.finish().expect("all keys known");
    let ensemble = exp.train_ensemble().expect("training");
    let rows = run_sweep(&exp, &ensemble).expect("sweep");

    let bias_kl: Vec<f64> = rows_for(&rows, "fgsm", "bias_kl")
        .iter()
        .map(|r| r.value)
        .collect();
    let disp_kl: Vec<f64> = rows_for(&rows, "fgsm", "dispersion_kl")
        .iter()
        .map(|r| r.value)
        .collect();
    assert_eq!(bias_kl.len(), 7);
    assert!(
        decreasing_steps(&bias_kl) <= 1,
        "bias_kl not nondecreasing in epsilon (more than one down-step): {bias_kl:?}"
    );
    assert!(
        decreasing_steps(&disp_kl) <= 1,
        "dispersion_kl not nondecreasing in epsilon (more than one down-step): {disp_kl:?}"
    );

    let cfg = Config::parse(&format!("{cls_base}report = accuracy-bv\n")).expect("config");
    let exp = build_experiment(&cfg).expect("experiment");
    cfg.finish().expect("all keys known");
    let rows = run_sweep(&exp, &ensemble).expect("sweep");

    let clean_acc = rows_for(&rows, "none", "accuracy_mean")[0].value;
    let acc: Vec<f64> = rows_for(&rows, "fgsm", "accuracy_mean")
        .iter()
        .map(|r| r.value)
        .collect();
    let acc_var: Vec<f64> = rows_for(&rows, "fgsm", "accuracy_variance")
        .iter()
        .map(|r| r.value)
        .collect();
    assert!(clean_acc > 0.9, "clean accuracy too low: {clean_acc}");
    let last_acc = *acc.last().expect("non-empty grid");
    assert!(
        last_acc < 0.5 * clean_acc,
        "attack never collapsed accuracy: {acc:?}"
    );

    // Rise then fall: the variance peak sits strictly inside the sweep.
    let mut series = vec![rows_for(&rows, "none", "accuracy_variance")[0].value];
    series.extend_from_slice(&acc_var);
    let peak = argmax(&series);
    assert!(
        peak > 0 && peak < series.len() - 1,
        "accuracy variance must peak strictly inside the sweep: {series:?}"
    );
    assert!(
        series[peak] > series[0] && series[peak] > *series.last().expect("non-empty"),
        "accuracy variance must rise then fall: {series:?}"
    );
    println!(
        "acceptance 09 simulated-trends: pass (bias/variance nondecreasing under fgsm; accuracy variance peaks at index {peak} of {} and falls off)",
        series.len()
    );
}

// ---- 10: adversarial training shrinks the accuracy drop ---------------------------

#[test]
fn c10_adversarial_training_reduces_accuracy_drop_at_matched_levels() {
    // Same 50-d two-Gaussian task and [50, 100] sigmoid model as the sweep
    // test. The comparison sits on the first accuracy cliff (eps in
    // [1.5, 2]): per-example perturbation during training keeps the loss
    // active after the clean examples saturate, which widens the logit
    // margins and pushes that cliff to larger budgets. Past the second
    // cliff (eps around 7) every member collapses and the training-time
    // budget of 0.05 no longer separates the two ensembles.
    let cfg = GaussianTaskConfig {
        n: 700,
        dim: 50,
        mean_low: 0.0,
        mean_high: 10.0,
        std_dev: 1.0,
    };
    let data = gen_two_gaussians::<f64>(&cfg, 44).expect("task");
    let (train, test) = split(&data, 500.0 / 700.0, 9).expect("split");
    let spec = MlpSpec {
        input_dim: 50,
        hidden: vec![50, 100],
        output_dim: 2,
        activation: Activation::Sigmoid,
        head: Head::Classification,
    };
    let train_cfg = TrainConfig {
        epochs: 60,
        learning_rate: 0.1,
    };
    let seeds = [1u64, 2, 3, 4, 5];

    let clean = train_ensemble::<f64>(&spec, &train, &train_cfg, &seeds).expect("clean training");
    let robust_attack = AttackSpec::new(AttackKind::Fgsm, 0.05);
    let robust = bvlab::advtrain::adversarial_train::<f64>(
        &spec,
        &train,
        &train_cfg,
        &robust_attack,
        &seeds,
    )
    .expect("adversarial training");

    let inputs = test.features().to_vec();
    let labels = cls_labels(&test);

    let (clean_base, _) = white_box_fgsm_accuracy(&clean, &inputs, &labels, 0.0);
    let (robust_base, _) = white_box_fgsm_accuracy(&robust, &inputs, &labels, 0.0);

    let mut summary = Vec::new();
    for &eps in &[1.5, 1.75, 2.0] {
        let (clean_acc, clean_level) = white_box_fgsm_accuracy(&clean, &inputs, &labels, eps);
        let (robust_acc, robust_level) = white_box_fgsm_accuracy(&robust, &inputs, &labels, eps);

        // Same nominal epsilon must land at the same measured level for the
        // comparison to be honest.
        let gap = (clean_level - robust_level).abs() / clean_level.max(robust_level);
        assert!(
            gap < 0.05,
            "levels diverged at eps {eps}: {clean_level:.5} vs {robust_level:.5}"
        );

        let clean_drop = clean_base - clean_acc;
        let robust_drop = robust_base - robust_acc;
        assert!(
            robust_drop < clean_drop,
            "adversarially trained ensemble dropped no less at eps {eps}: {robust_drop:.4} vs {clean_drop:.4}"
        );
        summary.push(format!(
            "eps {eps}: drop {robust_drop:.3} vs {clean_drop:.3}"
        ));
    }
    println!(
        "acceptance 10 robust-training: pass (smaller drop at 3 matched levels; {})",
        summary.join("; ")
    );
}

// ---- 11: determinism and binary formats --------------------------------------------

#[test]
fn c11_determinism_and_binary_formats() {
    // Identical configs through the real binary produce byte-identical CSVs.
    let dir = tempfile::tempdir().expect("tempdir");
    let config_path = dir.path().join("exp.cfg");
    std::fs::write(
        &config_path,
        "task = regression\n\
         data.n = 80\n\
         data.dim = 2\n\
         data.seed = 3\n\
         train.epochs = 30\n\
         model.hidden = 12\n\
         seeds = 1,2\n\
         attack.kinds = fgsm\n\
         attack.fgsm.epsilons = 0.05,0.1\n\
         eval.limit = 10\n",
    )
    .expect("write config");

    let run = |out: &std::path::Path| {
        let status = Command::new(env!("CARGO_BIN_EXE_bvlab"))
            .args([
                "sweep",
                "--config",
                config_path.to_str().expect("utf8 path"),
                "--out",
                out.to_str().expect("utf8 path"),
                "--threads",
                "2",
            ])
            .status()
            .expect("binary runs");
        assert!(status.success(), "sweep failed");
        std::fs::read(out).expect("csv written")
    };
    let a = run(&dir.path().join("a.csv"));
    let b = run(&dir.path().join("b.csv"));
    assert_eq!(
        a, b,
        "identical configs must produce byte-identical reports"
    );
    assert!(!a.contains(&b'\r'), "line endings must be bare LF");

    // CIFAR-format batches round-trip bit-exactly through disk.
    let mut rng = SplitMix64::new(77);
    let mut raw = Vec::new();
    for record in 0..3u8 {
        raw.push(record % 10);
        for _ in 0..CIFAR_RECORD_BYTES - 1 {
            raw.push((rng.next_u64() & 0xFF) as u8);
        }
    }
    let batch = CifarBatch::from_bytes(&raw).expect("synthetic batch");
    let bin_path = dir.path().join("batch.bin");
    save_cifar10(&batch, &bin_path).expect("save");
    let reloaded = load_cifar10(&bin_path).expect("load");
    assert_eq!(
        reloaded.to_bytes(),
        raw,
        "cifar bytes must round-trip exactly"
    );

    // Model files round-trip bit-exactly through disk.
    let model = &REG_RELU.ensemble.members()[0];
    let model_path = dir.path().join("member.bvml");
    model.save(&model_path).expect("save model");
    let back = Model::<f64>::load(&model_path).expect("load model");
    assert_eq!(back, *model, "model must round-trip exactly");
    assert_eq!(
        back.flat_params()
            .iter()
            .map(|v| v.to_bits())
            .collect::<Vec<_>>(),
        model
            .flat_params()
            .iter()
            .map(|v| v.to_bits())
            .collect::<Vec<_>>()
    );
    println!(
        "acceptance 11 determinism-and-formats: pass (byte-identical CSVs of {} bytes; cifar and model files round-trip bit-exactly)",
        a.len()
    );
}
