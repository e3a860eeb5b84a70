//! Encoder, projection head and linear classifier.
//!
//! The desk encoder is a stack of strided 3×3 conv + ReLU stages followed by
//! global average pooling, so it accepts any input size. The projection head
//! maps features to unit-norm embeddings. The paper-scale backbone shape is
//! kept as [`EncoderPreset::Paper`] for documentation; it cannot be built.

pub mod checkpoint;
mod layers;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::Patch;
use crate::real::{self, Real};
use crate::seed;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
pub use layers::{Conv3x3, Dense, FeatureMap};

/// Lower bound on embedding norms during normalization.
pub const PROJECTION_EPSILON: f64 = 1e-8;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("the {0:?} preset is documentation only and cannot be instantiated")]
    UnsupportedPreset(EncoderPreset),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderPreset {
    Desk,
    /// ResNet-50 with 2048-d pooled features.
    Paper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub channels: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub preset: EncoderPreset,
    pub stages: Vec<StageConfig>,
    /// Per-pixel channel normalization after every convolution.
    pub norm: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl EncoderConfig {
    pub fn desk() -> Self {
        let stage = |channels| StageConfig { channels, stride: 2 };
        Self { preset: EncoderPreset::Desk, stages: vec![stage(16), stage(32), stage(64), stage(128)], norm: true }
    }

    pub fn paper() -> Self {
        Self { preset: EncoderPreset::Paper, stages: Vec::new(), norm: false }
    }

    pub fn feature_dim(&self) -> usize {
        match self.preset {
            EncoderPreset::Paper => 2048,
            EncoderPreset::Desk => self.stages.last().map_or(0, |s| s.channels),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.preset == EncoderPreset::Paper {
            return Err(ModelError::UnsupportedPreset(EncoderPreset::Paper));
        }
        if self.stages.is_empty() {
            return Err(ModelError::Config("encoder needs at least one stage".into()));
        }
        if self.stages.iter().any(|s| s.channels == 0 || s.stride == 0) {
            return Err(ModelError::Config("stage channels and stride must be positive".into()));
        }
        if self.feature_dim() < 8 {
            return Err(ModelError::Config(format!("feature dim {} < 8", self.feature_dim())));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjectionKind {
    /// Linear, ReLU, linear.
    Mlp,
    /// A single bias-free linear map.
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectionConfig {
    pub kind: ProjectionKind,
    pub hidden_dim: usize,
    pub output_dim: usize,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        Self { kind: ProjectionKind::Mlp, hidden_dim: 128, output_dim: 128 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub projection: ProjectionConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        self.encoder.validate()?;
        let p = &self.projection;
        if p.output_dim < 2 || (p.kind == ProjectionKind::Mlp && p.hidden_dim == 0) {
            return Err(ModelError::Config("projection dims too small".into()));
        }
        Ok(())
    }
}

/// Stacks square RGB images of equal size into a 3-channel feature map.
pub fn images_to_map<T: Real>(images: &[Patch]) -> Result<FeatureMap<T>, ModelError> {
    let first = images.first().ok_or_else(|| ModelError::Shape("empty image batch".into()))?;
    let (w, h) = first.dimensions();
    if let Some(bad) = images.iter().find(|im| im.dimensions() != (w, h)) {
        return Err(ModelError::Shape(format!(
            "mixed image sizes {}x{} and {}x{}",
            w,
            h,
            bad.width(),
            bad.height()
        )));
    }
    let (w, h) = (w as usize, h as usize);
    let mut data = Vec::with_capacity(images.len() * w * h * 3);
    for im in images {
        data.extend(im.as_raw().iter().map(|&v| T::of(f64::from(v))));
    }
    let data = Array2::from_shape_vec((images.len() * w * h, 3), data).expect("length matches shape");
    Ok(FeatureMap { n: images.len(), h, w, data })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<T> {
    pub stages: Vec<Conv3x3<T>>,
}

pub(crate) struct EncoderCache<T> {
    convs: Vec<layers::ConvCache<T>>,
}

impl<T: Real> Encoder<T> {
    pub fn new(cfg: &EncoderConfig, rng: &mut impl rand::Rng) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut c_in = 3;
        let stages = cfg
            .stages
            .iter()
            .map(|s| {
                let conv = Conv3x3::new(c_in, s.channels, s.stride, cfg.norm, rng);
                c_in = s.channels;
                conv
            })
            .collect();
        Ok(Self { stages })
    }

    pub fn feature_dim(&self) -> usize {
        self.stages.last().map_or(0, |s| s.out_channels())
    }

    fn check_input(&self, x: &FeatureMap<T>) -> Result<(), ModelError> {
        if x.channels() != 3 || x.n == 0 || x.h == 0 || x.w == 0 {
            return Err(ModelError::Shape(format!(
                "expected non-empty 3-channel images, got n={} {}x{}x{}",
                x.n,
                x.h,
                x.w,
                x.channels()
            )));
        }
        Ok(())
    }

    /// `[n, d_h]` pooled features.
    pub fn encode(&self, x: &FeatureMap<T>) -> Result<Array2<T>, ModelError> {
        self.check_input(x)?;
        let mut map = self.stages[0].forward(x);
        for conv in &self.stages[1..] {
            map = conv.forward(&map);
        }
        Ok(map.global_average())
    }

    pub(crate) fn encode_cached(&self, x: &FeatureMap<T>) -> Result<(Array2<T>, EncoderCache<T>), ModelError> {
        self.check_input(x)?;
        let mut convs: Vec<layers::ConvCache<T>> = Vec::with_capacity(self.stages.len());
        for (i, conv) in self.stages.iter().enumerate() {
            let cache = match i {
                0 => conv.forward_cached(x),
                _ => conv.forward_cached(convs[i - 1].output()),
            };
            convs.push(cache);
        }
        let h = convs.last().expect("validated non-empty").output().global_average();
        Ok((h, EncoderCache { convs }))
    }

    /// Gradients in parameter order, stage by stage.
    pub(crate) fn backward(&self, cache: &EncoderCache<T>, dh: ArrayView2<T>) -> Vec<Array2<T>> {
        let last = cache.convs.last().expect("validated non-empty").output();
        let mut grad = last.global_average_backward(dh);
        let mut per_stage = Vec::with_capacity(self.stages.len());
        for (i, conv) in self.stages.iter().enumerate().rev() {
            let (grads, dx) = conv.backward(&cache.convs[i], grad, i > 0);
            per_stage.push(grads);
            match dx {
                Some(dx) => grad = dx,
                None => break,
            }
        }
        per_stage.into_iter().rev().flatten().collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead<T> {
    pub first: Dense<T>,
    pub second: Option<Dense<T>>,
}

pub(crate) struct HeadCache<T> {
    h: Array2<T>,
    hidden: Option<Array2<T>>,
    z: Array2<T>,
    norms: Vec<T>,
}

impl<T: Real> ProjectionHead<T> {
    pub fn new(d_in: usize, cfg: &ProjectionConfig, rng: &mut impl rand::Rng) -> Self {
        match cfg.kind {
            ProjectionKind::Mlp => Self {
                first: Dense::new(d_in, cfg.hidden_dim, true, rng),
                second: Some(Dense::new(cfg.hidden_dim, cfg.output_dim, true, rng)),
            },
            ProjectionKind::Linear => Self { first: Dense::new(d_in, cfg.output_dim, false, rng), second: None },
        }
    }

    fn raw(&self, h: ArrayView2<T>) -> (Option<Array2<T>>, Array2<T>) {
        let mut a = self.first.forward(h);
        match &self.second {
            Some(second) => {
                layers::relu_inplace(&mut a);
                let u = second.forward(a.view());
                (Some(a), u)
            }
            None => (None, a),
        }
    }

    /// Unit-norm embeddings. Rows that are exactly zero before normalization
    /// stay zero and are reported.
    pub fn project(&self, h: ArrayView2<T>) -> Array2<T> {
        let (_, u) = self.raw(h);
        let (z, norms) = real::normalize_rows(u.view(), T::of(PROJECTION_EPSILON));
        let degenerate = norms.iter().filter(|&&n| n <= T::of(PROJECTION_EPSILON)).count();
        if degenerate > 0 {
            log::warn!("{degenerate} projection rows had zero norm before normalization");
        }
        z
    }

    pub(crate) fn project_cached(&self, h: Array2<T>) -> (Array2<T>, HeadCache<T>) {
        let (hidden, u) = self.raw(h.view());
        let (z, norms) = real::normalize_rows(u.view(), T::of(PROJECTION_EPSILON));
        (z.clone(), HeadCache { h, hidden, z, norms })
    }

    /// Returns head gradients in parameter order and the gradient w.r.t. `h`.
    pub(crate) fn backward(&self, cache: &HeadCache<T>, dz: ArrayView2<T>) -> (Vec<Array2<T>>, Array2<T>) {
        let du = real::normalize_rows_backward(cache.z.view(), &cache.norms, dz);
        match (&self.second, &cache.hidden) {
            (Some(second), Some(hidden)) => {
                let (dw2, db2, mut dhidden) = second.backward(hidden.view(), du.view());
                layers::relu_backward(&mut dhidden, hidden);
                let (dw1, db1, dh) = self.first.backward(cache.h.view(), dhidden.view());
                let grads = vec![dw1, db1.expect("mlp has biases"), dw2, db2.expect("mlp has biases")];
                (grads, dh)
            }
            _ => {
                let (dw, _, dh) = self.first.backward(cache.h.view(), du.view());
                (vec![dw], dh)
            }
        }
    }
}

/// Encoder `f` plus projection head `g`.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    pub config: ModelConfig,
    pub encoder: Encoder<T>,
    pub head: ProjectionHead<T>,
}

/// Intermediate values of a training forward pass.
pub struct ForwardTrace<T> {
    encoder: EncoderCache<T>,
    head: HeadCache<T>,
}

impl<T: Real> Network<T> {
    /// Seeded initialization; the same `(config, seed)` always gives the same
    /// parameters.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = seed::rng(seed, &[0x30DE1]);
        let encoder = Encoder::new(&config.encoder, &mut rng)?;
        let head = ProjectionHead::new(encoder.feature_dim(), &config.projection, &mut rng);
        Ok(Self { config: config.clone(), encoder, head })
    }

    pub fn encode(&self, x: &FeatureMap<T>) -> Result<Array2<T>, ModelError> {
        self.encoder.encode(x)
    }

    pub fn project(&self, h: ArrayView2<T>) -> Array2<T> {
        self.head.project(h)
    }

    pub fn forward_train(&self, x: &FeatureMap<T>) -> Result<(Array2<T>, ForwardTrace<T>), ModelError> {
        let (h, encoder) = self.encoder.encode_cached(x)?;
        let (z, head) = self.head.project_cached(h);
        Ok((z, ForwardTrace { encoder, head }))
    }

    /// Parameter gradients given `∂L/∂z`, in [`Self::named_params`] order.
    pub fn backward(&self, trace: &ForwardTrace<T>, dz: ArrayView2<T>) -> Vec<Array2<T>> {
        let (head_grads, dh) = self.head.backward(&trace.head, dz);
        let mut grads = self.encoder.backward(&trace.encoder, dh.view());
        grads.extend(head_grads);
        grads
    }

    pub fn named_params(&self) -> Vec<(String, &Array2<T>)> {
        let mut out = Vec::new();
        for (i, conv) in self.encoder.stages.iter().enumerate() {
            for (name, p) in conv.params() {
                out.push((format!("encoder.stage{i}.{name}"), p));
            }
        }
        out.push(("head.first.weight".into(), &self.head.first.weight));
        if let Some(b) = &self.head.first.bias {
            out.push(("head.first.bias".into(), b));
        }
        if let Some(second) = &self.head.second {
            out.push(("head.second.weight".into(), &second.weight));
            if let Some(b) = &second.bias {
                out.push(("head.second.bias".into(), b));
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array2<T>> {
        let mut out = Vec::new();
        for conv in &mut self.encoder.stages {
            out.extend(conv.params_mut());
        }
        out.push(&mut self.head.first.weight);
        if let Some(b) = &mut self.head.first.bias {
            out.push(b);
        }
        if let Some(second) = &mut self.head.second {
            out.push(&mut second.weight);
            if let Some(b) = &mut second.bias {
                out.push(b);
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.len()).sum()
    }
}

/// Affine classifier on frozen features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearClassifier {
    /// `[d_h, K]`.
    pub weight: Array2<f64>,
    /// `[1, K]`.
    pub bias: Array2<f64>,
}

impl LinearClassifier {
    pub fn zeros(d: usize, classes: usize) -> Self {
        Self { weight: Array2::zeros((d, classes)), bias: Array2::zeros((1, classes)) }
    }

    pub fn classes(&self) -> usize {
        self.weight.ncols()
    }

    pub fn classify(&self, h: ArrayView2<f64>) -> Result<Array2<f64>, ModelError> {
        if h.ncols() != self.weight.nrows() {
            return Err(ModelError::Shape(format!(
                "features have dim {}, classifier expects {}",
                h.ncols(),
                self.weight.nrows()
            )));
        }
        Ok(h.dot(&self.weight) + &self.bias)
    }

    /// Argmax of the logits; ties go to the lowest class id.
    pub fn predict(&self, h: ArrayView2<f64>) -> Result<Vec<usize>, ModelError> {
        Ok(self.classify(h)?.axis_iter(Axis(0)).map(|r| argmax(r.as_slice().expect("row-major"))).collect())
    }

    /// Mean softmax cross-entropy over the rows and its gradients
    /// `(loss, d_weight, d_bias)`.
    pub fn cross_entropy(
        &self,
        h: ArrayView2<f64>,
        labels: &[usize],
    ) -> Result<(f64, Array2<f64>, Array2<f64>), ModelError> {
        if labels.len() != h.nrows() {
            return Err(ModelError::Shape(format!("{} labels for {} rows", labels.len(), h.nrows())));
        }
        let k = self.classes();
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(ModelError::Shape(format!("label {bad} out of range for {k} classes")));
        }
        let mut probs = self.classify(h)?;
        let n = h.nrows().max(1) as f64;
        let mut loss = 0.0;
        for (mut row, &y) in probs.axis_iter_mut(Axis(0)).zip(labels) {
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            row.mapv_inplace(|v| (v - m).exp());
            let s = row.sum();
            row /= s;
            loss -= row[y].ln();
            row[y] -= 1.0;
        }
        probs /= n;
        let dw = h.t().dot(&probs);
        let db = probs.sum_axis(Axis(0)).insert_axis(Axis(0));
        Ok((loss / n, dw, db))
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;
    use rand::Rng;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                preset: EncoderPreset::Desk,
                stages: vec![StageConfig { channels: 4, stride: 2 }, StageConfig { channels: 16, stride: 2 }],
                norm: true,
            },
            projection: ProjectionConfig { kind: ProjectionKind::Mlp, hidden_dim: 12, output_dim: 8 },
        }
    }

    fn random_images(n: usize, side: u32, s: u64) -> Vec<Patch> {
        let mut rng = seed::rng(s, &[]);
        (0..n)
            .map(|_| Patch::from_fn(side, side, |_, _| Rgb([rng.random(), rng.random(), rng.random()])))
            .collect()
    }

    #[test]
    fn encode_shapes_and_determinism() {
        let net = Network::<f32>::new(&ModelConfig::default(), 1).unwrap();
        let mut imgs = random_images(8, 32, 2);
        imgs[1] = imgs[0].clone();
        let h = net.encode(&images_to_map(&imgs).unwrap()).unwrap();
        assert_eq!(h.dim(), (8, 128));
        assert_eq!(h.row(0), h.row(1));
        assert!(h.iter().all(|v| v.is_finite()));
        let z = net.project(h.view());
        assert_eq!(z.dim(), (8, 128));
        for r in z.axis_iter(Axis(0)) {
            assert!((r.dot(&r).sqrt() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn zeroed_last_stage_gives_zero_features() {
        let mut net = Network::<f64>::new(&tiny_config(), 3).unwrap();
        let last = net.encoder.stages.last_mut().unwrap();
        last.weight.fill(0.0);
        last.bias.fill(0.0);
        let h = net.encode(&images_to_map(&random_images(3, 9, 1)).unwrap()).unwrap();
        assert!(h.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_head_is_scale_invariant() {
        let mut cfg = tiny_config();
        cfg.projection.kind = ProjectionKind::Linear;
        let net = Network::<f64>::new(&cfg, 4).unwrap();
        let h = net.encode(&images_to_map(&random_images(4, 8, 5)).unwrap()).unwrap();
        let a = net.project(h.view());
        let b = net.project((&h * 5.0).view());
        assert!((&a - &b).iter().all(|v| v.abs() < 1e-12), "{}", &a - &b);
    }

    #[test]
    fn shape_errors() {
        let net = Network::<f64>::new(&tiny_config(), 4).unwrap();
        let bad = FeatureMap { n: 1, h: 2, w: 2, data: Array2::zeros((4, 2)) };
        assert!(matches!(net.encode(&bad), Err(ModelError::Shape(_))));
        let mixed = vec![Patch::new(4, 4), Patch::new(5, 5)];
        assert!(images_to_map::<f64>(&mixed).is_err());
        assert_eq!(
            Network::<f32>::new(&ModelConfig { encoder: EncoderConfig::paper(), ..ModelConfig::default() }, 0),
            Err(ModelError::UnsupportedPreset(EncoderPreset::Paper))
        );
        let clf = LinearClassifier::zeros(3, 2);
        assert!(clf.classify(Array2::zeros((1, 4)).view()).is_err());
    }

    #[test]
    fn desk_preset_is_small() {
        let net = Network::<f32>::new(&ModelConfig::default(), 0).unwrap();
        assert_eq!(net.encoder.feature_dim(), 128);
        assert_eq!(EncoderConfig::paper().feature_dim(), 2048);
        assert!(net.param_count() < 500_000, "{}", net.param_count());
        assert_eq!(net.named_params().len(), net.clone().params_mut().len());
    }

    #[test]
    fn zero_classifier_outputs_bias() {
        let mut clf = LinearClassifier::zeros(5, 3);
        clf.bias = Array2::from_shape_vec((1, 3), vec![0.5, -1.0, 2.0]).unwrap();
        let h = Array2::from_shape_fn((4, 5), |(i, j)| (i * 7 + j) as f64);
        let logits = clf.classify(h.view()).unwrap();
        for r in logits.axis_iter(Axis(0)) {
            assert_eq!(r.to_vec(), vec![0.5, -1.0, 2.0]);
        }
    }

    #[test]
    fn full_backward_matches_finite_differences() {
        for norm in [true, false] {
            let mut cfg = tiny_config();
            cfg.encoder.norm = norm;
            check_full_backward(&cfg);
        }
    }

    fn check_full_backward(cfg: &ModelConfig) {
        // L = sum(z * r) for a fixed random r, so dL/dz = r.
        let net = Network::<f64>::new(cfg, 21).unwrap();
        let x = images_to_map::<f64>(&random_images(4, 12, 8)).unwrap();
        let mut rng = seed::rng(5, &[]);
        let r = Array2::from_shape_simple_fn((4, 8), || rng.random_range(-1.0..1.0));
        let (_, trace) = net.forward_train(&x).unwrap();
        let grads = net.backward(&trace, r.view());
        let loss_at = |n: &Network<f64>| {
            let z = n.project(n.encode(&x).unwrap().view());
            (&z * &r).sum()
        };
        let step = 1e-6;
        let mut worst: f64 = 0.0;
        for (p, g) in grads.iter().enumerate() {
            for idx in 0..g.len() {
                let (mut plus, mut minus) = (net.clone(), net.clone());
                plus.params_mut()[p].as_slice_mut().unwrap()[idx] += step;
                minus.params_mut()[p].as_slice_mut().unwrap()[idx] -= step;
                let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * step);
                let a = g.as_slice().unwrap()[idx];
                worst = worst.max((fd - a).abs() / fd.abs().max(a.abs()).max(1e-6));
            }
        }
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn desk_forward_is_fast() {
        let net = Network::<f32>::new(&ModelConfig::default(), 0).unwrap();
        let x = images_to_map::<f32>(&random_images(1, 32, 2)).unwrap();
        net.encode(&x).unwrap();
        let start = std::time::Instant::now();
        let runs = 20;
        for _ in 0..runs {
            net.project(net.encode(&x).unwrap().view());
        }
        let per_image = start.elapsed() / runs;
        assert!(per_image < std::time::Duration::from_millis(10), "{per_image:?}");
    }

    #[test]
    fn aligned_classifier_separates_orthogonal_features() {
        let k = 4;
        let h = Array2::from_shape_fn((8, k), |(i, j)| if i % k == j { 3.0 } else { 0.0 });
        let clf = LinearClassifier { weight: Array2::eye(k), bias: Array2::zeros((1, k)) };
        assert_eq!(clf.predict(h.view()).unwrap(), (0..8).map(|i| i % k).collect::<Vec<_>>());
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut rng = seed::rng(11, &[]);
        let h = Array2::from_shape_simple_fn((6, 4), || rng.random_range(-1.0..1.0));
        let labels = [0, 2, 1, 2, 0, 1];
        let clf = LinearClassifier {
            weight: Array2::from_shape_simple_fn((4, 3), || rng.random_range(-1.0..1.0)),
            bias: Array2::from_shape_simple_fn((1, 3), || rng.random_range(-1.0..1.0)),
        };
        let (_, dw, db) = clf.cross_entropy(h.view(), &labels).unwrap();
        let step = 1e-6;
        let loss_at = |c: &LinearClassifier| c.cross_entropy(h.view(), &labels).unwrap().0;
        let mut worst: f64 = 0.0;
        for idx in 0..12 {
            let (r, c) = (idx / 3, idx % 3);
            let (mut p, mut m) = (clf.clone(), clf.clone());
            p.weight[[r, c]] += step;
            m.weight[[r, c]] -= step;
            let fd = (loss_at(&p) - loss_at(&m)) / (2.0 * step);
            worst = worst.max((fd - dw[[r, c]]).abs() / fd.abs().max(1e-3));
        }
        for c in 0..3 {
            let (mut p, mut m) = (clf.clone(), clf.clone());
            p.bias[[0, c]] += step;
            m.bias[[0, c]] -= step;
            let fd = (loss_at(&p) - loss_at(&m)) / (2.0 * step);
            worst = worst.max((fd - db[[0, c]]).abs() / fd.abs().max(1e-3));
        }
        assert!(worst < 1e-5, "{worst}");
    }
}
