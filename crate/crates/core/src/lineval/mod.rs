//! Linear evaluation: class-balanced label subsampling, stratified k-fold,
//! linear probes on frozen features and model-averaged metrics.

pub mod metrics;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{self, EvalTransform, Patch};
use crate::model::{self, LinearClassifier, ModelError, Network};
use crate::seed;
use crate::trainer::{self, OptimizerState, Sgd};

pub use metrics::{confusion_matrix, metrics, ClassMetrics, Metrics};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid evaluation input: {0}")]
    Input(String),
    #[error("invalid evaluation config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] trainer::TrainError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub label_fractions: Vec<f64>,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Batch size for fractions at or below `small_fraction`.
    pub small_batch_size: usize,
    pub batch_size: usize,
    pub small_fraction: f64,
    pub folds: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            label_fractions: vec![0.01, 0.1, 0.2, 1.0],
            epochs: 15,
            lr: 0.2,
            momentum: 0.9,
            weight_decay: 0.0,
            small_batch_size: 32,
            batch_size: 512,
            small_fraction: 0.01,
            folds: 5,
            seed: 0,
        }
    }
}

impl EvalConfig {
    /// Paper protocol with batch sizes scaled by 1/8 for desk-sized label sets.
    pub fn desk() -> Self {
        Self { small_batch_size: 4, batch_size: 64, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        if self.label_fractions.is_empty() || self.label_fractions.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
            return Err(EvalError::Config("label fractions must be non-empty and lie in (0, 1]".into()));
        }
        if self.folds < 2 {
            return Err(EvalError::Config("need at least 2 folds".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.small_batch_size == 0 {
            return Err(EvalError::Config("epochs and batch sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn batch_size_for(&self, fraction: f64) -> usize {
        if fraction <= self.small_fraction + 1e-12 {
            self.small_batch_size
        } else {
            self.batch_size
        }
    }
}

/// Per-class sample counts for a class-balanced subset of `target` samples.
///
/// Each class first gets `floor(target/K)` capped at its size; what is left
/// (the cap shortfall plus the division remainder) is handed out one sample
/// at a time, round-robin in class order, to classes that still have spare
/// samples.
pub fn balanced_quotas(class_sizes: &[usize], target: usize) -> Vec<usize> {
    let k = class_sizes.len();
    if k == 0 {
        return Vec::new();
    }
    let base = target / k;
    let mut quotas: Vec<usize> = class_sizes.iter().map(|&n| n.min(base)).collect();
    let mut left = target.min(class_sizes.iter().sum()) - quotas.iter().sum::<usize>();
    while left > 0 {
        for (q, &n) in quotas.iter_mut().zip(class_sizes) {
            if left == 0 {
                break;
            }
            if *q < n {
                *q += 1;
                left -= 1;
            }
        }
    }
    quotas
}

fn indices_by_class(labels: &[usize], classes: usize) -> Result<Vec<Vec<usize>>, EvalError> {
    let mut by_class = vec![Vec::new(); classes];
    for (i, &y) in labels.iter().enumerate() {
        by_class
            .get_mut(y)
            .ok_or_else(|| EvalError::Input(format!("label {y} out of range for {classes} classes")))?
            .push(i);
    }
    Ok(by_class)
}

/// Class-balanced subset of `round(fraction·n)` labeled samples. Returns
/// sorted indices into `labels`. Each class is shuffled once per seed, so a
/// larger fraction always contains a smaller one's selection.
pub fn subsample_labels(labels: &[usize], classes: usize, fraction: f64, seed: u64) -> Result<Vec<usize>, EvalError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(EvalError::Config(format!("label fraction {fraction} outside (0, 1]")));
    }
    let mut by_class = indices_by_class(labels, classes)?;
    let target = (fraction * labels.len() as f64).round() as usize;
    let sizes: Vec<usize> = by_class.iter().map(Vec::len).collect();
    let quotas = balanced_quotas(&sizes, target);
    let mut chosen = Vec::with_capacity(target);
    for (c, (members, q)) in by_class.iter_mut().zip(quotas).enumerate() {
        members.shuffle(&mut seed::rng(seed, &[0x5AB5, c as u64]));
        chosen.extend_from_slice(&members[..q]);
    }
    if chosen.is_empty() {
        return Err(EvalError::Input(format!("fraction {fraction} of {} samples selects nothing", labels.len())));
    }
    chosen.sort_unstable();
    Ok(chosen)
}

/// Partitions `0..n` into `k` folds. With labels, each class is dealt
/// round-robin across folds (continuing where the previous class stopped), so
/// per-class fold counts differ by at most one. Classes with fewer than `k`
/// members are pooled and dealt together after the stratified ones.
pub fn kfold(n: usize, k: usize, labels: Option<&[usize]>, seed: u64) -> Result<Vec<Vec<usize>>, EvalError> {
    if k < 2 || n < k {
        return Err(EvalError::Input(format!("cannot split {n} samples into {k} folds")));
    }
    let mut folds = vec![Vec::with_capacity(n / k + 1); k];
    let mut next = 0usize;
    let mut deal = |items: &[usize], folds: &mut Vec<Vec<usize>>| {
        for &i in items {
            folds[next].push(i);
            next = (next + 1) % k;
        }
    };
    match labels {
        None => {
            let mut all: Vec<usize> = (0..n).collect();
            all.shuffle(&mut seed::rng(seed, &[0xF01D]));
            deal(&all, &mut folds);
        }
        Some(labels) => {
            if labels.len() != n {
                return Err(EvalError::Input(format!("{} labels for {n} samples", labels.len())));
            }
            let classes = labels.iter().max().map_or(0, |&m| m + 1);
            let mut pooled = Vec::new();
            for (c, mut members) in indices_by_class(labels, classes)?.into_iter().enumerate() {
                if members.is_empty() {
                    continue;
                }
                members.shuffle(&mut seed::rng(seed, &[0xF01D, c as u64]));
                if members.len() < k {
                    log::warn!("class {c} has {} < {k} samples; folded without stratification", members.len());
                    pooled.extend(members);
                } else {
                    deal(&members, &mut folds);
                }
            }
            // Each pooled class is contiguous and shorter than k, so its
            // members still land in distinct folds.
            deal(&pooled, &mut folds);
        }
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

/// Trains one linear classifier with minibatch softmax cross-entropy SGD at
/// a constant learning rate on the rows `train` of `features`.
pub fn fit_linear(
    features: ArrayView2<f64>,
    labels: &[usize],
    classes: usize,
    train: &[usize],
    cfg: &EvalConfig,
    batch_size: usize,
    seed: u64,
) -> Result<LinearClassifier, EvalError> {
    if features.nrows() != labels.len() {
        return Err(EvalError::Input(format!("{} feature rows for {} labels", features.nrows(), labels.len())));
    }
    if train.is_empty() {
        return Err(EvalError::Input("empty training set".into()));
    }
    let mut clf = LinearClassifier::zeros(features.ncols(), classes);
    let mut state = OptimizerState::new([&clf.weight, &clf.bias]);
    let sgd = Sgd { momentum: cfg.momentum, weight_decay: cfg.weight_decay };
    let mut order = train.to_vec();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut seed::rng(seed, &[0x11AE, epoch as u64]));
        for chunk in order.chunks(batch_size) {
            let x = features.select(Axis(0), chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let (_, dw, db) = clf.cross_entropy(x.view(), &y)?;
            trainer::sgd_step(vec![&mut clf.weight, &mut clf.bias], &[dw, db], &mut state, cfg.lr, &sgd)?;
        }
    }
    Ok(clf)
}

/// One classifier per fold, each trained on the other folds.
pub fn train_linear(
    features: ArrayView2<f64>,
    labels: &[usize],
    classes: usize,
    folds: &[Vec<usize>],
    cfg: &EvalConfig,
    batch_size: usize,
) -> Result<Vec<LinearClassifier>, EvalError> {
    if features.nrows() != labels.len() {
        return Err(EvalError::Input(format!("{} feature rows for {} labels", features.nrows(), labels.len())));
    }
    folds
        .iter()
        .enumerate()
        .map(|(f, held_out)| {
            let train: Vec<usize> = folds
                .iter()
                .enumerate()
                .filter(|&(g, _)| g != f)
                .flat_map(|(_, idx)| idx.iter().copied())
                .collect();
            debug_assert!(held_out.iter().all(|i| !train.contains(i)));
            fit_linear(features, labels, classes, &train, cfg, batch_size, seed::derive(cfg.seed, &[f as u64]))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEval {
    pub confusion: Vec<Vec<u64>>,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub checkpoint: String,
    pub fraction: f64,
    pub seed: u64,
    pub train_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub meta: ReportMeta,
    pub per_model: Vec<ModelEval>,
    /// Mean of the per-model macro-F1 values, in `[0, 1]`.
    pub macro_f1: f64,
    /// Mean of the per-model balanced accuracies, in `[0, 1]`.
    pub balanced_accuracy: f64,
}

/// Scores every classifier on the full test set and averages their metrics.
pub fn evaluate(
    classifiers: &[LinearClassifier],
    features: ArrayView2<f64>,
    labels: &[usize],
) -> Result<EvalReport, EvalError> {
    if classifiers.is_empty() {
        return Err(EvalError::Input("no classifiers".into()));
    }
    if features.nrows() != labels.len() {
        return Err(EvalError::Input(format!("{} feature rows for {} labels", features.nrows(), labels.len())));
    }
    let classes = classifiers[0].classes();
    let mut per_model = Vec::with_capacity(classifiers.len());
    for clf in classifiers {
        let pred = clf.predict(features)?;
        let confusion = confusion_matrix(labels, &pred, classes);
        let metrics = metrics(&confusion)?;
        per_model.push(ModelEval { confusion, metrics });
    }
    let n = per_model.len() as f64;
    Ok(EvalReport {
        meta: ReportMeta::default(),
        macro_f1: per_model.iter().map(|m| m.metrics.macro_f1).sum::<f64>() / n,
        balanced_accuracy: per_model.iter().map(|m| m.metrics.balanced_accuracy).sum::<f64>() / n,
        per_model,
    })
}

/// The full protocol for one label fraction: subsample, k-fold, train one
/// probe per fold, evaluate on the test set. Returns the report and the
/// trained probes.
pub fn run_protocol(
    train_features: ArrayView2<f64>,
    train_labels: &[usize],
    test_features: ArrayView2<f64>,
    test_labels: &[usize],
    classes: usize,
    fraction: f64,
    cfg: &EvalConfig,
) -> Result<(EvalReport, Vec<LinearClassifier>), EvalError> {
    cfg.validate()?;
    let subset = subsample_labels(train_labels, classes, fraction, cfg.seed)?;
    let x = train_features.select(Axis(0), &subset);
    let y: Vec<usize> = subset.iter().map(|&i| train_labels[i]).collect();
    let folds = kfold(subset.len(), cfg.folds, Some(&y), cfg.seed)?;
    let probes = train_linear(x.view(), &y, classes, &folds, cfg, cfg.batch_size_for(fraction))?;
    let mut report = evaluate(&probes, test_features, test_labels)?;
    report.meta = ReportMeta { checkpoint: String::new(), fraction, seed: cfg.seed, train_samples: subset.len() };
    Ok((report, probes))
}

impl EvalReport {
    /// Human-readable report; metrics are printed ×100.
    pub fn to_text(&self) -> String {
        use std::fmt::Write;
        let mut s = String::new();
        let m = &self.meta;
        let _ = writeln!(s, "checkpoint: {}", m.checkpoint);
        let _ = writeln!(s, "label fraction: {}%", fmt_percent(m.fraction));
        let _ = writeln!(s, "seed: {}", m.seed);
        let _ = writeln!(s, "training samples: {}", m.train_samples);
        let _ = writeln!(s, "macro F1 (mean of {} models): {:.2}", self.per_model.len(), 100.0 * self.macro_f1);
        let _ = writeln!(s, "balanced accuracy (mean of {} models): {:.2}", self.per_model.len(), 100.0 * self.balanced_accuracy);
        for (i, me) in self.per_model.iter().enumerate() {
            let _ = writeln!(
                s,
                "\nmodel {i}: macro F1 {:.2}  balanced accuracy {:.2}  accuracy {:.2}",
                100.0 * me.metrics.macro_f1,
                100.0 * me.metrics.balanced_accuracy,
                100.0 * me.metrics.accuracy
            );
            if !me.metrics.excluded.is_empty() {
                let _ = writeln!(s, "  classes without test support: {:?}", me.metrics.excluded);
            }
            let _ = writeln!(s, "  class  precision  recall      f1  support");
            for (c, cm) in me.metrics.per_class.iter().enumerate() {
                let _ = writeln!(
                    s,
                    "  {c:>5}  {:>9.2}  {:>6.2}  {:>6.2}  {:>7}",
                    100.0 * cm.precision,
                    100.0 * cm.recall,
                    100.0 * cm.f1,
                    cm.support
                );
            }
            let _ = writeln!(s, "  confusion (rows = truth):");
            for row in &me.confusion {
                let cells: Vec<String> = row.iter().map(|v| format!("{v:>6}")).collect();
                let _ = writeln!(s, "  {}", cells.join(""));
            }
        }
        s
    }
}

/// `0.01 -> "1"`, `0.2 -> "20"`, `1.0 -> "100"`.
pub fn fmt_percent(fraction: f64) -> String {
    let p = fraction * 100.0;
    if (p - p.round()).abs() < 1e-9 {
        format!("{}", p.round() as i64)
    } else {
        format!("{p}")
    }
}

/// Feature rows for the probes are plain `f64`.
pub fn to_f64_features(h: &Array2<f32>) -> Array2<f64> {
    h.mapv(f64::from)
}

/// Frozen-encoder features of `patches` under the evaluation transform,
/// computed `batch` images at a time.
pub fn extract_features(
    net: &Network<f32>,
    patches: &[Patch],
    transform: &EvalTransform,
    batch: usize,
) -> Result<Array2<f64>, EvalError> {
    let d = net.encoder.feature_dim();
    let mut out = Array2::zeros((patches.len(), d));
    for (i, chunk) in patches.chunks(batch.max(1)).enumerate() {
        let views = chunk
            .iter()
            .map(|p| augment::eval_view(p, transform))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| EvalError::Input(e.to_string()))?;
        let h = net.encode(&model::images_to_map::<f32>(&views)?)?;
        let start = i * batch.max(1);
        out.slice_mut(ndarray::s![start..start + chunk.len(), ..]).assign(&to_f64_features(&h));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn labels_from_sizes(sizes: &[usize]) -> Vec<usize> {
        sizes.iter().enumerate().flat_map(|(c, &n)| std::iter::repeat(c).take(n)).collect()
    }

    #[test]
    fn quota_examples() {
        assert_eq!(balanced_quotas(&[10, 1000], 600), vec![10, 590]);
        // Training-set class counts of the annotated set.
        let table = [22_020, 9_471, 19_488, 16_566, 22_341, 1_917];
        assert_eq!(balanced_quotas(&table, 918), vec![153; 6]);
        assert_eq!(balanced_quotas(&table, 91_803), table.to_vec());
        assert_eq!(balanced_quotas(&[5, 5, 5], 7), vec![3, 2, 2]);
        assert_eq!(balanced_quotas(&[0, 4, 9], 12), vec![0, 4, 8]);
    }

    #[test]
    fn full_fraction_is_identity() {
        let labels = labels_from_sizes(&[7, 3, 12]);
        let all = subsample_labels(&labels, 3, 1.0, 4).unwrap();
        assert_eq!(all, (0..labels.len()).collect::<Vec<_>>());
    }

    #[test]
    fn subsampling_rejects_bad_input() {
        assert!(subsample_labels(&[0, 1], 2, 0.0, 0).is_err());
        assert!(subsample_labels(&[0, 1], 2, 0.1, 0).is_err());
        assert!(subsample_labels(&[0, 5], 2, 1.0, 0).is_err());
    }

    #[test]
    fn fold_examples() {
        let folds = kfold(10, 5, None, 1).unwrap();
        assert!(folds.iter().all(|f| f.len() == 2));
        let labels = [vec![0; 7], vec![1; 5]].concat();
        let folds = kfold(12, 5, Some(&labels), 3).unwrap();
        let counts: Vec<usize> = folds.iter().map(|f| f.iter().filter(|&&i| labels[i] == 0).count()).collect();
        assert_eq!(counts, vec![2, 2, 1, 1, 1]);
        assert!(kfold(3, 5, None, 0).is_err());
    }

    proptest! {
        #[test]
        fn folds_partition_and_stratify(
            labels in proptest::collection::vec(0usize..4, 5..80),
            k in 2usize..6,
            s in 0u64..1000,
        ) {
            prop_assume!(labels.len() >= k);
            let folds = kfold(labels.len(), k, Some(&labels), s).unwrap();
            let mut all: Vec<usize> = folds.iter().flatten().copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..labels.len()).collect::<Vec<_>>());
            for c in 0..4 {
                let counts: Vec<usize> = folds.iter().map(|f| f.iter().filter(|&&i| labels[i] == c).count()).collect();
                prop_assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
            }
            let sizes: Vec<usize> = folds.iter().map(Vec::len).collect();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        }

        #[test]
        fn quotas_are_monotone_in_target(sizes in proptest::collection::vec(0usize..50, 1..7), t in 0usize..300) {
            let a = balanced_quotas(&sizes, t);
            let b = balanced_quotas(&sizes, t + 1);
            prop_assert!(a.iter().zip(&b).all(|(x, y)| x <= y));
            prop_assert_eq!(a.iter().sum::<usize>(), t.min(sizes.iter().sum()));
        }

        #[test]
        fn larger_fraction_contains_smaller(sizes in proptest::collection::vec(1usize..40, 2..6), s in 0u64..100) {
            let labels = labels_from_sizes(&sizes);
            let k = sizes.len();
            let small = subsample_labels(&labels, k, 0.2, s).unwrap_or_default();
            let big = subsample_labels(&labels, k, 0.5, s).unwrap();
            prop_assert!(small.iter().all(|i| big.contains(i)));
        }
    }

    #[test]
    fn separable_features_are_learned_perfectly() {
        let n = 40;
        let features = Array2::from_shape_fn((n, 2), |(i, j)| {
            let side = if i % 2 == 0 { 1.0 } else { -1.0 };
            if j == 0 { side * (1.0 + (i % 5) as f64 * 0.1) } else { (i % 7) as f64 * 0.3 - 1.0 }
        });
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let all: Vec<usize> = (0..n).collect();
        let cfg = EvalConfig::default();
        let clf = fit_linear(features.view(), &labels, 2, &all, &cfg, 8, 0).unwrap();
        assert_eq!(clf.predict(features.view()).unwrap(), labels);
    }

    #[test]
    fn zero_features_predict_the_majority() {
        let labels = [vec![0; 3], vec![1; 9], vec![2; 4]].concat();
        let features = Array2::zeros((labels.len(), 5));
        let all: Vec<usize> = (0..labels.len()).collect();
        let clf = fit_linear(features.view(), &labels, 3, &all, &EvalConfig::default(), 4, 0).unwrap();
        assert!(clf.predict(features.view()).unwrap().iter().all(|&p| p == 1));
    }

    #[test]
    fn training_is_deterministic_and_checks_lengths() {
        let features = Array2::from_shape_fn((20, 3), |(i, j)| ((i * 3 + j) % 7) as f64);
        let labels: Vec<usize> = (0..20).map(|i| i % 3).collect();
        let folds = kfold(20, 5, Some(&labels), 0).unwrap();
        let cfg = EvalConfig::default();
        let a = train_linear(features.view(), &labels, 3, &folds, &cfg, 4).unwrap();
        let b = train_linear(features.view(), &labels, 3, &folds, &cfg, 4).unwrap();
        assert_eq!(a.len(), 5);
        assert_eq!(a, b);
        assert!(train_linear(features.view(), &labels[..10], 3, &folds, &cfg, 4).is_err());
    }

    #[test]
    fn evaluate_averages_models() {
        let features = Array2::from_shape_fn((4, 2), |(i, j)| if i % 2 == j { 1.0 } else { 0.0 });
        let labels = [0, 1, 0, 1];
        let perfect = LinearClassifier { weight: Array2::eye(2), bias: Array2::zeros((1, 2)) };
        let constant = LinearClassifier { weight: Array2::zeros((2, 2)), bias: Array2::zeros((1, 2)) };
        let r = evaluate(&[perfect.clone(), perfect.clone()], features.view(), &labels).unwrap();
        assert_eq!((r.macro_f1, r.balanced_accuracy), (1.0, 1.0));
        let r = evaluate(&[perfect, constant], features.view(), &labels).unwrap();
        assert!((r.balanced_accuracy - 0.75).abs() < 1e-15);
        assert_eq!(r.per_model[1].metrics.balanced_accuracy, 0.5);
    }

    #[test]
    fn percent_labels() {
        assert_eq!(fmt_percent(0.01), "1");
        assert_eq!(fmt_percent(0.1), "10");
        assert_eq!(fmt_percent(0.2), "20");
        assert_eq!(fmt_percent(1.0), "100");
    }
}
