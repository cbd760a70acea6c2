//! Experiment orchestration: config → data → ensemble → attacked
//! evaluations → CSV rows.
//!
//! Three report shapes share one long-format CSV schema
//! (`task,attack,epsilon,mse_level,linf_level,metric,value,seed_count`):
//!
//! - **loss-decomposition** — error decompositions (squared error or
//!   cross-entropy) at attacked inputs, per attack and epsilon, with the
//!   first-order shift terms alongside the exactly measured ones;
//! - **accuracy-bv** — mean and across-seed variance of accuracy and loss,
//!   each ensemble member attacked white-box against itself;
//! - **matched-compare** — cross-attack comparison keyed by *measured*
//!   perturbation level: the first attack's epsilon grid fixes the levels
//!   and every other attack's epsilon is tuned by bisection to match, since
//!   nominal epsilons are not comparable across attack families.
//!
//! Every run is a pure function of its config: training is bit-reproducible
//! per seed regardless of thread count, evaluation keeps a fixed order, and
//! rows are sorted before emission, so identical configs produce
//! byte-identical CSV files.

use std::path::Path;

use bvlab::advtrain::adversarial_train;
use bvlab::attack::{generate, AttackKind, AttackSpec};
use bvlab::cifar::{load_cifar10, CIFAR_MEAN, CIFAR_STD};
use bvlab::data::{
    gen_linear_regression, gen_two_gaussians, split, GaussianTaskConfig, LinearTask,
    LinearTaskConfig, Target,
};
use bvlab::decompose::{ce_adv_firstorder, ce_kl_decompose, mse_adv_decompose, mse_decompose};
use bvlab::model::{Activation, Head, MlpSpec, TrainConfig};
use bvlab::scalar::pairwise_mean;
use bvlab::text::csv_float;
use bvlab::{Ensemble64, Error, LabeledDataset64, Result};
use rayon::prelude::*;

use crate::config::Config;

/// Relative tolerance for calling two measured perturbation levels equal.
pub const MATCH_TOLERANCE: f64 = 0.05;
/// Bisection step budget when tuning an epsilon to a target level.
pub const MATCH_MAX_STEPS: usize = 50;

/// Which experiment family the config describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    /// Linear target with uniform noise, squared-error ensemble.
    Regression,
    /// Two-Gaussian binary classification, softmax ensemble.
    Classification,
    /// Small image classification from a CIFAR-10 binary batch file.
    CifarSubset,
}

impl TaskKind {
    /// Stable name used in configs and the CSV `task` column.
    pub fn name(&self) -> &'static str {
        match self {
            TaskKind::Regression => "regression",
            TaskKind::Classification => "classification",
            TaskKind::CifarSubset => "cifar-subset",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "regression" => Ok(TaskKind::Regression),
            "classification" => Ok(TaskKind::Classification),
            "cifar-subset" => Ok(TaskKind::CifarSubset),
            other => Err(Error::InvalidConfig(format!(
                "unknown task \"{other}\"; expected regression, classification, or cifar-subset"
            ))),
        }
    }
}

/// What the emitted rows report.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportKind {
    /// Error decomposition terms per (attack, epsilon).
    LossDecomposition,
    /// Accuracy/loss mean and across-seed variance per (attack, epsilon).
    AccuracyBv,
    /// Cross-attack rows keyed by measured perturbation level.
    MatchedCompare,
}

impl ReportKind {
    pub fn name(&self) -> &'static str {
        match self {
            ReportKind::LossDecomposition => "loss-decomposition",
            ReportKind::AccuracyBv => "accuracy-bv",
            ReportKind::MatchedCompare => "matched-compare",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "loss-decomposition" => Ok(ReportKind::LossDecomposition),
            "accuracy-bv" => Ok(ReportKind::AccuracyBv),
            "matched-compare" => Ok(ReportKind::MatchedCompare),
            other => Err(Error::InvalidConfig(format!(
                "unknown report kind \"{other}\"; expected loss-decomposition, \
                 accuracy-bv, or matched-compare"
            ))),
        }
    }
}

/// One attack family plus the epsilon grid to sweep it over.
#[derive(Debug, Clone)]
pub struct GridEntry {
    /// Attack with every knob set; `epsilon` is overwritten per grid point.
    pub attack: AttackSpec,
    /// Non-negative, strictly ascending epsilons.
    pub epsilons: Vec<f64>,
}

/// Fully resolved experiment: everything a run needs, nothing left to parse.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub task: TaskKind,
    /// The complete generated (or loaded) dataset before splitting.
    pub full_data: LabeledDataset64,
    pub train_data: LabeledDataset64,
    pub test_data: LabeledDataset64,
    /// Regression truth oracle; `None` for classification tasks.
    pub truth: Option<LinearTask>,
    /// Observation-noise variance entering the squared-error decomposition.
    pub noise_variance: f64,
    pub model_spec: MlpSpec,
    pub train_cfg: TrainConfig,
    /// Training-time attack; kind `none` means clean training.
    pub train_attack: AttackSpec,
    pub seeds: Vec<u64>,
    pub grid: Vec<GridEntry>,
    pub report: ReportKind,
    /// Number of test points evaluated (prefix of the test split).
    pub eval_limit: usize,
    /// Optional path to export the full dataset as CSV.
    pub export_path: Option<String>,
    /// Output path from the config; the command line may override it.
    pub out: Option<String>,
}

fn parse_task_data(
    cfg: &Config,
    task: TaskKind,
) -> Result<(LabeledDataset64, Option<LinearTask>, f64)> {
    let seed = cfg.get_u64("data.seed", 1)?;
    match task {
        TaskKind::Regression => {
            let task_cfg = LinearTaskConfig {
                n: cfg.get_usize("data.n", 1000)?,
                dim: cfg.get_usize("data.dim", 2)?,
                feature_low: cfg.get_f64("data.low", -1.0)?,
                feature_high: cfg.get_f64("data.high", 1.0)?,
                noise_half_width: cfg.get_f64("data.noise_half_width", 0.1)?,
            };
            let (data, task) = gen_linear_regression::<f64>(&task_cfg, seed)?;
            let noise = task.noise_variance();
            Ok((data, Some(task), noise))
        }
        TaskKind::Classification => {
            let task_cfg = GaussianTaskConfig {
                n: cfg.get_usize("data.n", 1000)?,
                dim: cfg.get_usize("data.dim", 50)?,
                mean_low: cfg.get_f64("data.mean_low", 0.0)?,
                mean_high: cfg.get_f64("data.mean_high", 10.0)?,
                std_dev: cfg.get_f64("data.std_dev", 1.0)?,
            };
            Ok((gen_two_gaussians::<f64>(&task_cfg, seed)?, None, 0.0))
        }
        TaskKind::CifarSubset => {
            let path = cfg.require_str("data.path")?;
            let batch = load_cifar10(&path)?;
            let mut data = batch.to_dataset::<f64>(&CIFAR_MEAN, &CIFAR_STD)?;
            if let Some(limit) = cfg.get_opt_usize("data.limit")? {
                if limit == 0 || limit > data.len() {
                    return Err(Error::InvalidConfig(format!(
                        "data.limit {limit} outside 1..={}",
                        data.len()
                    )));
                }
                let indices: Vec<usize> = (0..limit).collect();
                data = data.subset(&indices);
            }
            Ok((data, None, 0.0))
        }
    }
}

/// The tightest single interval containing every normalised pixel value:
/// the default clamp range for image-domain attacks.
fn cifar_clamp() -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for c in 0..3 {
        lo = lo.min((0.0 - CIFAR_MEAN[c]) / CIFAR_STD[c]);
        hi = hi.max((1.0 - CIFAR_MEAN[c]) / CIFAR_STD[c]);
    }
    (lo, hi)
}

/// Rejects attack kinds that cannot run on the task's model head, so the
/// mismatch is a configuration error instead of a mid-run failure: the
/// unsigned-gradient attack follows a cross-entropy gradient (classifiers
/// only) and the direction attacks follow the squared-error decomposition
/// geometry (regression ensembles only).
fn check_kind_fits_head(kind: AttackKind, head: Head) -> Result<()> {
    let ok = match kind {
        AttackKind::BiasVariance => head == Head::Classification,
        AttackKind::BiasDirection | AttackKind::VarianceDirection => head == Head::Regression,
        AttackKind::None | AttackKind::Fgsm | AttackKind::Pgd => true,
    };
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!(
            "attack kind \"{}\" does not apply to a {} task",
            kind.name(),
            match head {
                Head::Regression => "regression",
                Head::Classification => "classification",
            }
        )))
    }
}

fn parse_attack(
    cfg: &Config,
    kind: AttackKind,
    prefix: &str,
    member: usize,
    clamp: Option<(f64, f64)>,
) -> Result<AttackSpec> {
    let mut attack = AttackSpec::new(kind, 0.0);
    attack.member = member;
    attack.clamp = clamp;
    attack.steps = cfg.get_usize(&format!("{prefix}.steps"), attack.steps)?;
    attack.step_size = cfg.get_opt_f64(&format!("{prefix}.step_size"))?;
    attack.linf_bound = cfg.get_opt_f64(&format!("{prefix}.linf_bound"))?;
    Ok(attack)
}

/// Builds an [`Experiment`] from a parsed config, consuming every key it
/// understands; call [`Config::finish`] afterwards so leftovers are errors.
pub fn build_experiment(cfg: &Config) -> Result<Experiment> {
    let task = TaskKind::parse(&cfg.require_str("task")?)?;
    let (full_data, truth, noise_variance) = parse_task_data(cfg, task)?;

    let train_fraction = cfg.get_f64("data.train_fraction", 0.8)?;
    let split_seed = cfg.get_u64("data.split_seed", 1)?;
    let (train_data, test_data) = split(&full_data, train_fraction, split_seed)?;

    let default_hidden: &[usize] = match task {
        TaskKind::Regression => &[100],
        TaskKind::Classification => &[50, 100],
        TaskKind::CifarSubset => &[32],
    };
    let activation = match cfg.get_str("model.activation", "relu").as_str() {
        "relu" => Activation::Relu,
        "sigmoid" => Activation::Sigmoid,
        other => {
            return Err(Error::InvalidConfig(format!(
                "unknown model.activation \"{other}\"; expected relu or sigmoid"
            )))
        }
    };
    let (head, output_dim) = match task {
        TaskKind::Regression => (Head::Regression, 1),
        TaskKind::Classification | TaskKind::CifarSubset => {
            let classes = full_data.n_classes().ok_or_else(|| {
                Error::InvalidConfig("classification task produced unlabeled data".into())
            })?;
            (Head::Classification, classes)
        }
    };
    let model_spec = MlpSpec {
        input_dim: full_data.feature_dim(),
        hidden: cfg.get_usize_list("model.hidden", default_hidden)?,
        output_dim,
        activation,
        head,
    };
    model_spec.validate()?;

    let train_cfg = TrainConfig {
        epochs: cfg.get_usize("train.epochs", 100)?,
        learning_rate: cfg.get_f64("train.learning_rate", 0.01)?,
    };
    train_cfg.validate()?;

    // Simulated features live on their natural scale; images get the
    // normalised pixel box unless the config overrides it.
    let default_clamp = match task {
        TaskKind::CifarSubset => Some(cifar_clamp()),
        _ => None,
    };
    let clamp = match (cfg.get_opt_f64("clamp.lo")?, cfg.get_opt_f64("clamp.hi")?) {
        (Some(lo), Some(hi)) => Some((lo, hi)),
        (None, None) => default_clamp,
        _ => {
            return Err(Error::InvalidConfig(
                "clamp.lo and clamp.hi must be given together".into(),
            ))
        }
    };
    let member = cfg.get_usize("attack.member", 0)?;

    let train_kind = AttackKind::parse(&cfg.get_str("train.attack", "none"))?;
    check_kind_fits_head(train_kind, head)?;
    let mut train_attack = parse_attack(cfg, train_kind, "train", member, clamp)?;
    train_attack.epsilon = cfg.get_f64("train.epsilon", 0.0)?;
    train_attack.validate()?;

    let mut grid = Vec::new();
    for kind_name in cfg.get_str_list("attack.kinds", &[]) {
        let kind = AttackKind::parse(&kind_name)?;
        check_kind_fits_head(kind, head)?;
        let prefix = format!("attack.{kind_name}");
        let attack = parse_attack(cfg, kind, &prefix, member, clamp)?;
        let epsilons = cfg.get_f64_list(&format!("{prefix}.epsilons"), &[])?;
        if epsilons.is_empty() {
            return Err(Error::InvalidConfig(format!(
                "attack \"{kind_name}\" listed in attack.kinds but {prefix}.epsilons is missing"
            )));
        }
        if epsilons.iter().any(|&e| e < 0.0) {
            return Err(Error::InvalidConfig(format!(
                "{prefix}.epsilons must be non-negative"
            )));
        }
        if epsilons.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig(format!(
                "{prefix}.epsilons must be strictly ascending"
            )));
        }
        grid.push(GridEntry { attack, epsilons });
    }

    let seeds = cfg.get_u64_list("seeds", &[1, 2, 3, 4, 5])?;
    if seeds.is_empty() {
        return Err(Error::InvalidConfig(
            "seeds must list at least one seed".into(),
        ));
    }

    let report = ReportKind::parse(&cfg.get_str("report", "loss-decomposition"))?;
    if report == ReportKind::AccuracyBv && head != Head::Classification {
        return Err(Error::InvalidConfig(
            "accuracy-bv reports need a classification task".into(),
        ));
    }

    let eval_default = test_data.len().min(200);
    let eval_limit = cfg.get_usize("eval.limit", eval_default)?;
    if eval_limit == 0 || eval_limit > test_data.len() {
        return Err(Error::InvalidConfig(format!(
            "eval.limit {} outside 1..={}",
            eval_limit,
            test_data.len()
        )));
    }

    let export_path = cfg.get_opt_str("data.export");
    let out = cfg.get_opt_str("out");

    Ok(Experiment {
        task,
        full_data,
        train_data,
        test_data,
        truth,
        noise_variance,
        model_spec,
        train_cfg,
        train_attack,
        seeds,
        grid,
        report,
        eval_limit,
        export_path,
        out,
    })
}

impl Experiment {
    /// Trains the ensemble this experiment evaluates (clean or adversarial
    /// depending on `train.attack`).
    pub fn train_ensemble(&self) -> Result<Ensemble64> {
        adversarial_train(
            &self.model_spec,
            &self.train_data,
            &self.train_cfg,
            &self.train_attack,
            &self.seeds,
        )
    }

    /// The evaluated prefix of the test split: inputs and targets.
    pub fn eval_points(&self) -> (Vec<Vec<f64>>, Vec<Target<f64>>) {
        let inputs = self.test_data.features()[..self.eval_limit].to_vec();
        let targets = (0..self.eval_limit)
            .map(|i| self.test_data.target(i))
            .collect();
        (inputs, targets)
    }

    /// True-function values for the evaluated points (regression only).
    fn truth_values(&self, inputs: &[Vec<f64>]) -> Result<Vec<f64>> {
        let task = self.truth.as_ref().ok_or_else(|| {
            Error::InvalidConfig("loss decomposition on this task needs a regression truth".into())
        })?;
        Ok(inputs.iter().map(|x| task.eval(x)).collect())
    }

    fn labels(&self, targets: &[Target<f64>]) -> Result<Vec<usize>> {
        targets
            .iter()
            .map(|t| match t {
                Target::Label(l) => Ok(*l),
                Target::Value(_) => Err(Error::InvalidConfig(
                    "this report needs class labels, not regression targets".into(),
                )),
            })
            .collect()
    }

    /// Writes the full dataset as CSV when `data.export` is configured.
    pub fn maybe_export_data(&self) -> Result<()> {
        if let Some(path) = &self.export_path {
            std::fs::write(path, self.full_data.to_csv())
                .map_err(|e| Error::io(path.clone(), e))?;
        }
        Ok(())
    }
}

// ---- rows and CSV -------------------------------------------------------------

/// One metric of one (attack, epsilon) cell, in the long CSV format.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub task: String,
    pub attack: String,
    /// Nominal epsilon the attack ran with.
    pub epsilon: f64,
    /// Mean over evaluated points (and members, for white-box-per-member
    /// reports) of the measured mean-square perturbation.
    pub mse_level: f64,
    /// Largest absolute coordinate displacement seen across the evaluation.
    pub linf_level: f64,
    pub metric: String,
    pub value: f64,
    pub seed_count: usize,
}

/// Renders rows in the fixed schema, sorted by (attack, epsilon, metric).
pub fn rows_to_csv(rows: &[SweepRow]) -> String {
    // Epsilons are validated finite, so the float comparison is total here.
    let mut sorted: Vec<&SweepRow> = rows.iter().collect();
    sorted.sort_by(|a, b| {
        a.attack
            .cmp(&b.attack)
            .then(a.epsilon.partial_cmp(&b.epsilon).expect("finite epsilon"))
            .then(a.metric.cmp(&b.metric))
    });
    let mut out =
        String::from("task,attack,epsilon,mse_level,linf_level,metric,value,seed_count\n");
    for r in sorted {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.task,
            r.attack,
            csv_float(r.epsilon),
            csv_float(r.mse_level),
            csv_float(r.linf_level),
            r.metric,
            csv_float(r.value),
            r.seed_count
        ));
    }
    out
}

/// Writes rows to a CSV file.
pub fn write_csv(path: impl AsRef<Path>, rows: &[SweepRow]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, rows_to_csv(rows)).map_err(|e| Error::io(path.display().to_string(), e))
}

// ---- perturbation plumbing ----------------------------------------------------

/// Attacked copies of the evaluation points plus their measured levels.
struct PerturbedSet {
    perturbed: Vec<Vec<f64>>,
    /// Mean over points of the per-point mean-square displacement.
    mse_level: f64,
    /// Max over points of the per-point l-infinity displacement.
    linf_level: f64,
}

fn perturb_points(
    ensemble: &Ensemble64,
    attack: &AttackSpec,
    epsilon: f64,
    inputs: &[Vec<f64>],
    targets: &[Target<f64>],
) -> Result<PerturbedSet> {
    let mut spec = attack.clone();
    spec.epsilon = epsilon;
    spec.validate()?;
    let records: Vec<_> = inputs
        .par_iter()
        .zip(targets.par_iter())
        .map(|(x, t)| generate(&spec, ensemble, x, t))
        .collect::<Result<Vec<_>>>()?;
    let mses: Vec<f64> = records.iter().map(|r| r.mse_level).collect();
    let linf = records.iter().fold(0.0f64, |m, r| m.max(r.linf_level));
    Ok(PerturbedSet {
        perturbed: records.into_iter().map(|r| r.x_adv).collect(),
        mse_level: pairwise_mean(&mses),
        linf_level: linf,
    })
}

/// Across-seed sample variance (n−1 denominator); zero for fewer than two
/// samples, matching "no spread" for a singleton.
fn sample_variance(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let mean = pairwise_mean(values);
    let sq: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
    let n = values.len() as f64;
    pairwise_mean(&sq) * n / (n - 1.0)
}

/// Classification accuracy with argmax ties broken toward the lowest index.
fn accuracy(model: &bvlab::Model64, inputs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    let correct: Vec<f64> = inputs
        .iter()
        .zip(labels)
        .map(|(x, &label)| {
            let probs = model.probs(x)?;
            let mut best = 0usize;
            for (i, &p) in probs.iter().enumerate() {
                if p > probs[best] {
                    best = i;
                }
            }
            Ok(if best == label { 1.0 } else { 0.0 })
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(pairwise_mean(&correct))
}

fn mean_loss(model: &bvlab::Model64, inputs: &[Vec<f64>], targets: &[Target<f64>]) -> Result<f64> {
    let losses: Vec<f64> = inputs
        .iter()
        .zip(targets)
        .map(|(x, t)| model.loss(x, t))
        .collect::<Result<Vec<f64>>>()?;
    Ok(pairwise_mean(&losses))
}

// ---- metric evaluation per (attack, epsilon) ----------------------------------

/// Levels plus named metric values for one (attack, epsilon) cell.
struct CellReport {
    mse_level: f64,
    linf_level: f64,
    metrics: Vec<(&'static str, f64)>,
}

/// Loss-decomposition metrics: the decomposition measured at the attacked
/// inputs, alongside the first-order reconstruction and its residual.
fn decomposition_cell(
    exp: &Experiment,
    ensemble: &Ensemble64,
    attack: &AttackSpec,
    epsilon: f64,
    inputs: &[Vec<f64>],
    targets: &[Target<f64>],
) -> Result<CellReport> {
    let set = perturb_points(ensemble, attack, epsilon, inputs, targets)?;
    let metrics = match exp.task {
        TaskKind::Regression => {
            let truths = exp.truth_values(inputs)?;
            let rep = mse_adv_decompose(
                ensemble,
                inputs,
                &truths,
                exp.noise_variance,
                &set.perturbed,
            )?;
            vec![
                ("noise", rep.noise_variance),
                ("bias_sq", rep.bias_sq_adv_exact),
                ("variance", rep.variance_adv),
                ("mse", rep.actual_total),
                ("bias_sq_clean", rep.bias_sq_clean),
                ("variance_clean", rep.variance_clean),
                ("mean_shift", rep.mean_shift),
                ("variance_shift", rep.variance_shift),
                ("bias_sq_firstorder", rep.bias_sq_adv),
                ("reconstructed_mse", rep.reconstructed_total),
                ("residual", rep.residual),
            ]
        }
        TaskKind::Classification | TaskKind::CifarSubset => {
            let labels = exp.labels(targets)?;
            let first = ce_adv_firstorder(ensemble, inputs, &labels, &set.perturbed)?;
            // The exact perturbed decomposition: same identity, evaluated
            // where the attacked models actually look.
            let exact = ce_kl_decompose(ensemble, &set.perturbed, &labels)?;
            vec![
                ("bias_kl", exact.bias_kl),
                ("dispersion_kl", exact.dispersion_kl),
                ("ce", exact.total_ce),
                ("bias_kl_clean", first.bias_kl),
                ("dispersion_kl_clean", first.dispersion_kl),
                ("bias_shift", first.bias_shift),
                ("dispersion_shift", first.dispersion_shift),
                ("predicted_ce", first.predicted_total),
                ("residual", first.residual),
            ]
        }
    };
    Ok(CellReport {
        mse_level: set.mse_level,
        linf_level: set.linf_level,
        metrics,
    })
}

/// Accuracy-bv metrics: every member attacked white-box against itself,
/// then mean and across-seed sample variance of accuracy and loss.
fn accuracy_cell(
    exp: &Experiment,
    ensemble: &Ensemble64,
    attack: &AttackSpec,
    epsilon: f64,
    inputs: &[Vec<f64>],
    targets: &[Target<f64>],
) -> Result<CellReport> {
    let labels = exp.labels(targets)?;
    let mut accs = Vec::with_capacity(ensemble.len());
    let mut losses = Vec::with_capacity(ensemble.len());
    let mut level_means = Vec::with_capacity(ensemble.len());
    let mut linf = 0.0f64;
    for k in 0..ensemble.len() {
        let mut member_attack = attack.clone();
        member_attack.member = k;
        let set = perturb_points(ensemble, &member_attack, epsilon, inputs, targets)?;
        let model = &ensemble.members()[k];
        accs.push(accuracy(model, &set.perturbed, &labels)?);
        losses.push(mean_loss(model, &set.perturbed, targets)?);
        level_means.push(set.mse_level);
        linf = linf.max(set.linf_level);
    }
    Ok(CellReport {
        mse_level: pairwise_mean(&level_means),
        linf_level: linf,
        metrics: vec![
            ("accuracy_mean", pairwise_mean(&accs)),
            ("accuracy_variance", sample_variance(&accs)),
            ("loss_mean", pairwise_mean(&losses)),
            ("loss_variance", sample_variance(&losses)),
        ],
    })
}

fn cell_for(
    exp: &Experiment,
    ensemble: &Ensemble64,
    report: ReportKind,
    attack: &AttackSpec,
    epsilon: f64,
    inputs: &[Vec<f64>],
    targets: &[Target<f64>],
) -> Result<CellReport> {
    match report {
        ReportKind::LossDecomposition => {
            decomposition_cell(exp, ensemble, attack, epsilon, inputs, targets)
        }
        ReportKind::AccuracyBv => accuracy_cell(exp, ensemble, attack, epsilon, inputs, targets),
        ReportKind::MatchedCompare => Err(Error::InvalidConfig(
            "matched-compare is driven by run_compare, not by a single cell".into(),
        )),
    }
}

fn push_cell(
    rows: &mut Vec<SweepRow>,
    exp: &Experiment,
    attack_name: &str,
    epsilon: f64,
    cell: &CellReport,
) {
    for (metric, value) in &cell.metrics {
        rows.push(SweepRow {
            task: exp.task.name().to_string(),
            attack: attack_name.to_string(),
            epsilon,
            mse_level: cell.mse_level,
            linf_level: cell.linf_level,
            metric: (*metric).to_string(),
            value: *value,
            seed_count: exp.seeds.len(),
        });
    }
}

/// The clean-baseline cell every report opens with (attack `none`, ε = 0).
fn baseline_cell(
    exp: &Experiment,
    ensemble: &Ensemble64,
    report: ReportKind,
    inputs: &[Vec<f64>],
    targets: &[Target<f64>],
) -> Result<CellReport> {
    match report {
        ReportKind::LossDecomposition => {
            // Use the clean decompositions directly so baseline rows carry
            // the clean identity (and its residual), not degenerate
            // perturbed forms.
            let metrics = match exp.task {
                TaskKind::Regression => {
                    let truths = exp.truth_values(inputs)?;
                    let rep = mse_decompose(ensemble, inputs, &truths, exp.noise_variance)?;
                    vec![
                        ("noise", rep.noise_variance),
                        ("bias_sq", rep.bias_sq),
                        ("variance", rep.variance),
                        ("mse", rep.total),
                        ("residual", rep.residual),
                    ]
                }
                TaskKind::Classification | TaskKind::CifarSubset => {
                    let labels = exp.labels(targets)?;
                    let rep = ce_kl_decompose(ensemble, inputs, &labels)?;
                    vec![
                        ("bias_kl", rep.bias_kl),
                        ("dispersion_kl", rep.dispersion_kl),
                        ("ce", rep.total_ce),
                        ("residual", rep.residual),
                    ]
                }
            };
            Ok(CellReport {
                mse_level: 0.0,
                linf_level: 0.0,
                metrics,
            })
        }
        _ => {
            let none = AttackSpec::new(AttackKind::None, 0.0);
            cell_for(exp, ensemble, report, &none, 0.0, inputs, targets)
        }
    }
}

// ---- the three operations ------------------------------------------------------

/// Runs the epsilon sweep: a clean baseline plus one cell per
/// (attack, epsilon) grid point.
pub fn run_sweep(exp: &Experiment, ensemble: &Ensemble64) -> Result<Vec<SweepRow>> {
    let report = match exp.report {
        ReportKind::MatchedCompare => {
            return Err(Error::InvalidConfig(
                "report = matched-compare belongs to the compare subcommand".into(),
            ))
        }
        other => other,
    };
    let (inputs, targets) = exp.eval_points();
    let mut rows = Vec::new();

    let base = baseline_cell(exp, ensemble, report, &inputs, &targets)?;
    push_cell(&mut rows, exp, AttackKind::None.name(), 0.0, &base);

    for entry in &exp.grid {
        for &eps in &entry.epsilons {
            let cell = cell_for(exp, ensemble, report, &entry.attack, eps, &inputs, &targets)?;
            push_cell(&mut rows, exp, entry.attack.kind.name(), eps, &cell);
        }
    }
    Ok(rows)
}

/// Measured mean mse-level an attack produces at a nominal epsilon, under
/// the same protocol the metrics use (white-box per member for accuracy
/// reports, deployed-member otherwise).
fn level_at(
    ensemble: &Ensemble64,
    report: ReportKind,
    attack: &AttackSpec,
    epsilon: f64,
    inputs: &[Vec<f64>],
    targets: &[Target<f64>],
) -> Result<f64> {
    if epsilon == 0.0 {
        return Ok(0.0);
    }
    match report {
        ReportKind::AccuracyBv => {
            let mut level_means = Vec::with_capacity(ensemble.len());
            for k in 0..ensemble.len() {
                let mut member_attack = attack.clone();
                member_attack.member = k;
                let set = perturb_points(ensemble, &member_attack, epsilon, inputs, targets)?;
                level_means.push(set.mse_level);
            }
            Ok(pairwise_mean(&level_means))
        }
        _ => Ok(perturb_points(ensemble, attack, epsilon, inputs, targets)?.mse_level),
    }
}

/// Outcome of tuning one attack's epsilon toward a target level.
struct Tuned {
    epsilon: f64,
    matched: bool,
}

/// Bisects epsilon until the measured level matches `target` within
/// [`MATCH_TOLERANCE`], assuming the level is nondecreasing in epsilon.
fn tune_epsilon(
    ensemble: &Ensemble64,
    report: ReportKind,
    attack: &AttackSpec,
    target: f64,
    inputs: &[Vec<f64>],
    targets: &[Target<f64>],
) -> Result<Tuned> {
    if target == 0.0 {
        return Ok(Tuned {
            epsilon: 0.0,
            matched: true,
        });
    }
    let close = |level: f64| (level - target).abs() <= MATCH_TOLERANCE * target;

    // Bracket the target: grow the upper end until it overshoots. Clamped
    // domains cap what epsilon is admissible (and what level is reachable).
    let eps_cap = attack.clamp.map(|(lo, hi)| hi - lo);
    let mut hi = eps_cap.unwrap_or(1e-3);
    let mut hi_level = level_at(ensemble, report, attack, hi, inputs, targets)?;
    if eps_cap.is_none() {
        let mut expansions = 0;
        while hi_level < target && expansions < 60 {
            hi *= 2.0;
            hi_level = level_at(ensemble, report, attack, hi, inputs, targets)?;
            expansions += 1;
        }
    }
    if close(hi_level) {
        return Ok(Tuned {
            epsilon: hi,
            matched: true,
        });
    }
    if hi_level < target {
        // Even the cap (or 60 doublings) cannot reach the level: degenerate
        // gradient, saturated clamp, or an absurd target.
        return Ok(Tuned {
            epsilon: hi,
            matched: false,
        });
    }

    let mut lo = 0.0f64;
    let mut best_eps = hi;
    let mut best_gap = (hi_level - target).abs();
    for _ in 0..MATCH_MAX_STEPS {
        let mid = 0.5 * (lo + hi);
        let level = level_at(ensemble, report, attack, mid, inputs, targets)?;
        let gap = (level - target).abs();
        if gap < best_gap {
            best_gap = gap;
            best_eps = mid;
        }
        if close(level) {
            return Ok(Tuned {
                epsilon: mid,
                matched: true,
            });
        }
        if level < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(Tuned {
        epsilon: best_eps,
        matched: false,
    })
}

/// Cross-attack comparison at matched measured levels.
///
/// The first grid attack is the reference: its epsilon list defines the
/// comparison levels. Every other attack's epsilon is tuned per level; rows
/// carry the tuned nominal epsilon, the measured levels, the task metrics,
/// and a `matched` flag (1 matched within tolerance, 0 not).
pub fn run_compare(exp: &Experiment, ensemble: &Ensemble64) -> Result<Vec<SweepRow>> {
    if exp.grid.len() < 2 {
        return Err(Error::InvalidConfig(
            "matched comparison needs at least two attacks in attack.kinds".into(),
        ));
    }
    // Metric set follows the task: decomposition terms for regression,
    // accuracy statistics for classification.
    let report = match exp.task {
        TaskKind::Regression => ReportKind::LossDecomposition,
        TaskKind::Classification | TaskKind::CifarSubset => ReportKind::AccuracyBv,
    };
    let (inputs, targets) = exp.eval_points();
    let mut rows = Vec::new();

    let reference = &exp.grid[0];
    let mut levels = Vec::with_capacity(reference.epsilons.len());
    for &eps in &reference.epsilons {
        let cell = cell_for(
            exp,
            ensemble,
            report,
            &reference.attack,
            eps,
            &inputs,
            &targets,
        )?;
        levels.push(cell.mse_level);
        push_cell(&mut rows, exp, reference.attack.kind.name(), eps, &cell);
        rows.push(SweepRow {
            task: exp.task.name().to_string(),
            attack: reference.attack.kind.name().to_string(),
            epsilon: eps,
            mse_level: cell.mse_level,
            linf_level: cell.linf_level,
            metric: "matched".to_string(),
            value: 1.0,
            seed_count: exp.seeds.len(),
        });
    }

    for entry in &exp.grid[1..] {
        for &target_level in &levels {
            let tuned = tune_epsilon(
                ensemble,
                report,
                &entry.attack,
                target_level,
                &inputs,
                &targets,
            )?;
            let cell = cell_for(
                exp,
                ensemble,
                report,
                &entry.attack,
                tuned.epsilon,
                &inputs,
                &targets,
            )?;
            push_cell(
                &mut rows,
                exp,
                entry.attack.kind.name(),
                tuned.epsilon,
                &cell,
            );
            rows.push(SweepRow {
                task: exp.task.name().to_string(),
                attack: entry.attack.kind.name().to_string(),
                epsilon: tuned.epsilon,
                mse_level: cell.mse_level,
                linf_level: cell.linf_level,
                metric: "matched".to_string(),
                value: if tuned.matched { 1.0 } else { 0.0 },
                seed_count: exp.seeds.len(),
            });
        }
    }
    Ok(rows)
}

/// Loss-decomposition rows regardless of the configured report kind: the
/// `decompose` subcommand's behavior.
pub fn run_decompose(exp: &Experiment, ensemble: &Ensemble64) -> Result<Vec<SweepRow>> {
    let mut forced = exp.clone();
    forced.report = ReportKind::LossDecomposition;
    run_sweep(&forced, ensemble)
}
