//! Datasets and synthetic task generators.
//!
//! Two families of synthetic data drive the experiments: a linear
//! regression task with uniform observation noise (so the irreducible
//! noise variance is known in closed form), and a two-class Gaussian
//! classification task with class means separated along every coordinate.
//! Both are deterministic functions of a seed.

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::scalar::Scalar;
use crate::text::csv_float;

/// Supervised target for a single example.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Target<S: Scalar> {
    /// Real-valued regression target.
    Value(S),
    /// Class index for classification.
    Label(usize),
}

/// Target column of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets<S: Scalar> {
    /// Regression targets, one per example.
    Values(Vec<S>),
    /// Class labels, one per example, each in `0..n_classes`.
    Labels {
        labels: Vec<usize>,
        n_classes: usize,
    },
}

/// Feature matrix plus aligned targets.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset<S: Scalar> {
    features: Vec<Vec<S>>,
    targets: Targets<S>,
}

impl<S: Scalar> LabeledDataset<S> {
    /// Creates a dataset, validating internal consistency.
    pub fn new(features: Vec<Vec<S>>, targets: Targets<S>) -> Result<Self> {
        if features.is_empty() {
            return Err(Error::InvalidConfig(
                "dataset must contain at least one example".into(),
            ));
        }
        let dim = features[0].len();
        if dim == 0 {
            return Err(Error::InvalidConfig(
                "feature dimension must be at least 1".into(),
            ));
        }
        for (i, f) in features.iter().enumerate() {
            if f.len() != dim {
                return Err(Error::InvalidConfig(format!(
                    "example {i} has {} features but example 0 has {dim}",
                    f.len()
                )));
            }
        }
        let target_len = match &targets {
            Targets::Values(v) => v.len(),
            Targets::Labels { labels, n_classes } => {
                if *n_classes < 2 {
                    return Err(Error::InvalidConfig(format!(
                        "classification needs at least 2 classes, got {n_classes}"
                    )));
                }
                if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= *n_classes) {
                    return Err(Error::InvalidConfig(format!(
                        "label {l} at example {i} is out of range for {n_classes} classes"
                    )));
                }
                labels.len()
            }
        };
        if target_len != features.len() {
            return Err(Error::InvalidConfig(format!(
                "{} examples but {target_len} targets",
                features.len()
            )));
        }
        Ok(LabeledDataset { features, targets })
    }

    /// Number of examples.
    pub fn len(&self) -> usize {
        self.features.len()
    }

    /// True when the dataset holds no examples (never, post-validation).
    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    /// Number of features per example.
    pub fn feature_dim(&self) -> usize {
        self.features[0].len()
    }

    /// Feature vector of example `i`.
    pub fn feature(&self, i: usize) -> &[S] {
        &self.features[i]
    }

    /// All feature vectors.
    pub fn features(&self) -> &[Vec<S>] {
        &self.features
    }

    /// Target of example `i`.
    pub fn target(&self, i: usize) -> Target<S> {
        match &self.targets {
            Targets::Values(v) => Target::Value(v[i]),
            Targets::Labels { labels, .. } => Target::Label(labels[i]),
        }
    }

    /// The whole target column.
    pub fn targets(&self) -> &Targets<S> {
        &self.targets
    }

    /// Number of classes for classification data, `None` for regression.
    pub fn n_classes(&self) -> Option<usize> {
        match &self.targets {
            Targets::Values(_) => None,
            Targets::Labels { n_classes, .. } => Some(*n_classes),
        }
    }

    /// New dataset holding the selected examples, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let features = indices.iter().map(|&i| self.features[i].clone()).collect();
        let targets = match &self.targets {
            Targets::Values(v) => Targets::Values(indices.iter().map(|&i| v[i]).collect()),
            Targets::Labels { labels, n_classes } => Targets::Labels {
                labels: indices.iter().map(|&i| labels[i]).collect(),
                n_classes: *n_classes,
            },
        };
        LabeledDataset { features, targets }
    }

    /// Renders the dataset as CSV: columns `x_0..x_{d-1},target`, LF line
    /// endings, floats with 12 significant digits.
    pub fn to_csv(&self) -> String {
        let dim = self.feature_dim();
        let mut out = String::new();
        for c in 0..dim {
            out.push_str(&format!("x_{c},"));
        }
        out.push_str("target\n");
        for i in 0..self.len() {
            for v in self.feature(i) {
                out.push_str(&csv_float(v.to_f64().unwrap_or(f64::NAN)));
                out.push(',');
            }
            match self.target(i) {
                Target::Value(v) => out.push_str(&csv_float(v.to_f64().unwrap_or(f64::NAN))),
                Target::Label(l) => out.push_str(&l.to_string()),
            }
            out.push('\n');
        }
        out
    }
}

/// Splits a dataset into shuffled train/test partitions.
///
/// `train_fraction` must leave at least one example on each side. The split
/// is a deterministic function of the seed and the dataset order.
pub fn split<S: Scalar>(
    data: &LabeledDataset<S>,
    train_fraction: f64,
    seed: u64,
) -> Result<(LabeledDataset<S>, LabeledDataset<S>)> {
    if !(0.0..=1.0).contains(&train_fraction) || !train_fraction.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "train_fraction must be in [0, 1], got {train_fraction}"
        )));
    }
    let n = data.len();
    let n_train = (train_fraction * n as f64).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::InvalidConfig(format!(
            "train_fraction {train_fraction} leaves an empty partition for {n} examples"
        )));
    }
    let mut rng = SplitMix64::new(seed);
    let order = rng.shuffle_indices(n);
    let train = data.subset(&order[..n_train]);
    let test = data.subset(&order[n_train..]);
    Ok((train, test))
}

// ---- linear regression task ------------------------------------------------

/// Parameters for the synthetic linear regression task.
#[derive(Debug, Clone)]
pub struct LinearTaskConfig {
    /// Number of examples to generate.
    pub n: usize,
    /// Feature dimension.
    pub dim: usize,
    /// Features are drawn uniformly from `[feature_low, feature_high)`.
    pub feature_low: f64,
    pub feature_high: f64,
    /// Observation noise is uniform on `[-noise_half_width, noise_half_width)`.
    pub noise_half_width: f64,
}

impl Default for LinearTaskConfig {
    fn default() -> Self {
        LinearTaskConfig {
            n: 1000,
            dim: 2,
            feature_low: -1.0,
            feature_high: 1.0,
            noise_half_width: 0.1,
        }
    }
}

/// The ground-truth linear function behind a generated regression dataset.
///
/// Keeping the true function around lets experiments measure bias against
/// the noiseless target rather than the noisy observations.
#[derive(Debug, Clone)]
pub struct LinearTask {
    coefficients: Vec<f64>,
    intercept: f64,
    noise_half_width: f64,
}

impl LinearTask {
    /// Noise-free target value at `x`.
    pub fn eval<S: Scalar>(&self, x: &[S]) -> f64 {
        assert_eq!(x.len(), self.coefficients.len(), "dimension mismatch");
        let mut acc = self.intercept;
        for (c, v) in self.coefficients.iter().zip(x) {
            acc += c * v.to_f64().unwrap_or(f64::NAN);
        }
        acc
    }

    /// Variance of the uniform observation noise: `h^2 / 3` for
    /// half-width `h`.
    pub fn noise_variance(&self) -> f64 {
        self.noise_half_width * self.noise_half_width / 3.0
    }

    /// The true coefficient vector.
    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    /// The true intercept.
    pub fn intercept(&self) -> f64 {
        self.intercept
    }
}

/// Generates the linear regression task: `y = w . x + b + noise`.
///
/// Coefficients, features, and noise come from separate substreams of the
/// seed, so e.g. changing `n` leaves the true function unchanged.
pub fn gen_linear_regression<S: Scalar>(
    cfg: &LinearTaskConfig,
    seed: u64,
) -> Result<(LabeledDataset<S>, LinearTask)> {
    if cfg.n == 0 || cfg.dim == 0 {
        return Err(Error::InvalidConfig(
            "linear task needs n >= 1 and dim >= 1".into(),
        ));
    }
    // `partial_cmp` so a NaN endpoint is rejected along with empty ranges.
    if cfg.feature_low.partial_cmp(&cfg.feature_high) != Some(std::cmp::Ordering::Less) {
        return Err(Error::InvalidConfig(format!(
            "feature range [{}, {}) is empty",
            cfg.feature_low, cfg.feature_high
        )));
    }
    if cfg.noise_half_width < 0.0 || !cfg.noise_half_width.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "noise_half_width must be finite and non-negative, got {}",
            cfg.noise_half_width
        )));
    }

    let root = SplitMix64::new(seed);
    let mut coeff_rng = root.stream(0);
    let mut feature_rng = root.stream(1);
    let mut noise_rng = root.stream(2);

    let coefficients: Vec<f64> = (0..cfg.dim).map(|_| coeff_rng.uniform(-1.0, 1.0)).collect();
    let intercept = coeff_rng.uniform(-1.0, 1.0);
    let task = LinearTask {
        coefficients,
        intercept,
        noise_half_width: cfg.noise_half_width,
    };

    let mut features = Vec::with_capacity(cfg.n);
    let mut values = Vec::with_capacity(cfg.n);
    for _ in 0..cfg.n {
        let x: Vec<f64> = (0..cfg.dim)
            .map(|_| feature_rng.uniform(cfg.feature_low, cfg.feature_high))
            .collect();
        let noise = if cfg.noise_half_width > 0.0 {
            noise_rng.uniform(-cfg.noise_half_width, cfg.noise_half_width)
        } else {
            0.0
        };
        let y = task.eval(&x) + noise;
        features.push(x.into_iter().map(S::from_f64_lit).collect());
        values.push(S::from_f64_lit(y));
    }

    let data = LabeledDataset::new(features, Targets::Values(values))?;
    Ok((data, task))
}

// ---- two-Gaussian classification task ---------------------------------------

/// Parameters for the two-class Gaussian classification task.
#[derive(Debug, Clone)]
pub struct GaussianTaskConfig {
    /// Number of examples to generate.
    pub n: usize,
    /// Feature dimension.
    pub dim: usize,
    /// Every coordinate of a class-0 example is `N(mean_low, std_dev^2)`.
    pub mean_low: f64,
    /// Every coordinate of a class-1 example is `N(mean_high, std_dev^2)`.
    pub mean_high: f64,
    /// Shared coordinate standard deviation.
    pub std_dev: f64,
}

impl Default for GaussianTaskConfig {
    fn default() -> Self {
        GaussianTaskConfig {
            n: 1000,
            dim: 50,
            mean_low: 0.0,
            mean_high: 10.0,
            std_dev: 1.0,
        }
    }
}

/// Generates the two-Gaussian binary classification task.
///
/// Labels are fair coin flips; features are isotropic Gaussians centred at
/// the label's mean. Labels and features use separate substreams.
pub fn gen_two_gaussians<S: Scalar>(
    cfg: &GaussianTaskConfig,
    seed: u64,
) -> Result<LabeledDataset<S>> {
    if cfg.n == 0 || cfg.dim == 0 {
        return Err(Error::InvalidConfig(
            "gaussian task needs n >= 1 and dim >= 1".into(),
        ));
    }
    if cfg.std_dev <= 0.0 || !cfg.std_dev.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "std_dev must be finite and positive, got {}",
            cfg.std_dev
        )));
    }

    let root = SplitMix64::new(seed);
    let mut label_rng = root.stream(0);
    let mut feature_rng = root.stream(1);

    let mut features = Vec::with_capacity(cfg.n);
    let mut labels = Vec::with_capacity(cfg.n);
    for _ in 0..cfg.n {
        let label = label_rng.below(2);
        let mean = if label == 0 {
            cfg.mean_low
        } else {
            cfg.mean_high
        };
        let x: Vec<S> = (0..cfg.dim)
            .map(|_| S::from_f64_lit(feature_rng.normal(mean, cfg.std_dev)))
            .collect();
        features.push(x);
        labels.push(label);
    }

    LabeledDataset::new(
        features,
        Targets::Labels {
            labels,
            n_classes: 2,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_inconsistent_data() {
        let err = LabeledDataset::<f64>::new(vec![], Targets::Values(vec![])).unwrap_err();
        assert!(err.to_string().contains("at least one example"));

        let err = LabeledDataset::new(
            vec![vec![1.0], vec![2.0, 3.0]],
            Targets::Values(vec![0.0, 0.0]),
        )
        .unwrap_err();
        assert!(err.to_string().contains("example 1"));

        let err = LabeledDataset::new(
            vec![vec![1.0], vec![2.0]],
            Targets::Labels {
                labels: vec![0, 2],
                n_classes: 2,
            },
        )
        .unwrap_err();
        assert!(err.to_string().contains("out of range"));

        let err =
            LabeledDataset::new(vec![vec![1.0]], Targets::Values(vec![0.0, 1.0])).unwrap_err();
        assert!(err.to_string().contains("1 examples but 2 targets"));
    }

    #[test]
    fn linear_task_is_deterministic_and_noise_bounded() {
        let cfg = LinearTaskConfig {
            n: 500,
            dim: 2,
            noise_half_width: 0.1,
            ..Default::default()
        };
        let (a, task_a) = gen_linear_regression::<f64>(&cfg, 7).unwrap();
        let (b, task_b) = gen_linear_regression::<f64>(&cfg, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(task_a.coefficients(), task_b.coefficients());

        // Every observation sits within the noise half-width of the true line.
        for i in 0..a.len() {
            let Target::Value(y) = a.target(i) else {
                panic!("regression targets")
            };
            let clean = task_a.eval(a.feature(i));
            assert!((y - clean).abs() <= cfg.noise_half_width + 1e-12);
        }

        let (c, _) = gen_linear_regression::<f64>(&cfg, 8).unwrap();
        assert_ne!(a, c, "different seeds must give different data");
    }

    #[test]
    fn true_function_is_independent_of_sample_count() {
        let small = LinearTaskConfig {
            n: 10,
            ..Default::default()
        };
        let large = LinearTaskConfig {
            n: 200,
            ..Default::default()
        };
        let (_, task_small) = gen_linear_regression::<f64>(&small, 42).unwrap();
        let (_, task_large) = gen_linear_regression::<f64>(&large, 42).unwrap();
        assert_eq!(task_small.coefficients(), task_large.coefficients());
        assert_eq!(task_small.intercept(), task_large.intercept());
    }

    #[test]
    fn uniform_noise_variance_matches_closed_form() {
        let cfg = LinearTaskConfig {
            n: 60_000,
            dim: 1,
            noise_half_width: 0.3,
            ..Default::default()
        };
        let (data, task) = gen_linear_regression::<f64>(&cfg, 3).unwrap();
        let mut acc = 0.0;
        for i in 0..data.len() {
            let Target::Value(y) = data.target(i) else {
                unreachable!()
            };
            let r = y - task.eval(data.feature(i));
            acc += r * r;
        }
        let empirical = acc / data.len() as f64;
        let analytic = task.noise_variance();
        assert!((analytic - 0.03).abs() < 1e-12);
        assert!(
            (empirical - analytic).abs() / analytic < 0.05,
            "empirical {empirical} vs analytic {analytic}"
        );
    }

    #[test]
    fn gaussian_task_classes_are_where_they_should_be() {
        let cfg = GaussianTaskConfig {
            n: 2000,
            dim: 5,
            mean_low: 0.0,
            mean_high: 10.0,
            std_dev: 1.0,
        };
        let data = gen_two_gaussians::<f64>(&cfg, 11).unwrap();
        assert_eq!(data.n_classes(), Some(2));

        let mut count = [0usize; 2];
        let mut sums = [0.0f64; 2];
        for i in 0..data.len() {
            let Target::Label(l) = data.target(i) else {
                unreachable!()
            };
            count[l] += 1;
            sums[l] += data.feature(i).iter().sum::<f64>() / cfg.dim as f64;
        }
        // Fair coin labels: both classes well represented.
        assert!(count[0] > 800 && count[1] > 800, "{count:?}");
        let mean0 = sums[0] / count[0] as f64;
        let mean1 = sums[1] / count[1] as f64;
        assert!(mean0.abs() < 0.2, "class 0 mean {mean0}");
        assert!((mean1 - 10.0).abs() < 0.2, "class 1 mean {mean1}");
    }

    #[test]
    fn split_partitions_without_loss() {
        let cfg = LinearTaskConfig {
            n: 100,
            ..Default::default()
        };
        let (data, _) = gen_linear_regression::<f64>(&cfg, 1).unwrap();
        let (train, test) = split(&data, 0.8, 99).unwrap();
        assert_eq!(train.len(), 80);
        assert_eq!(test.len(), 20);

        // Same seed reproduces the same split; the two sides are disjoint
        // as multisets and jointly cover the original data.
        let (train2, _) = split(&data, 0.8, 99).unwrap();
        assert_eq!(train, train2);

        let mut all: Vec<Vec<f64>> = train
            .features()
            .iter()
            .chain(test.features().iter())
            .cloned()
            .collect();
        let mut original: Vec<Vec<f64>> = data.features().to_vec();
        all.sort_by(|a, b| a.partial_cmp(b).unwrap());
        original.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(all, original);
    }

    #[test]
    fn split_rejects_empty_partitions() {
        let cfg = LinearTaskConfig {
            n: 10,
            ..Default::default()
        };
        let (data, _) = gen_linear_regression::<f64>(&cfg, 1).unwrap();
        assert!(split(&data, 0.0, 0).is_err());
        assert!(split(&data, 1.0, 0).is_err());
        assert!(split(&data, 0.01, 0).is_err()); // rounds to zero train examples
    }

    #[test]
    fn csv_export_has_header_and_lf_endings() {
        let data = LabeledDataset::new(
            vec![vec![1.0f64, 2.0], vec![3.0, 4.0]],
            Targets::Labels {
                labels: vec![0, 1],
                n_classes: 2,
            },
        )
        .unwrap();
        let csv = data.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "x_0,x_1,target");
        assert!(csv.ends_with('\n'));
        assert!(!csv.contains('\r'));
        let row: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(row.len(), 3);
        assert_eq!(row[2], "0");
    }
}
