//! The learnable parts of one stage: a synthetic featurizer standing in for
//! backbone features, a ridge-regression box regressor, a softmax classifier
//! trained by full-batch gradient descent, and the combined stage loss.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::assign::best_match;
use crate::error::{Error, Result};
use crate::geometry::{
    denormalize_delta, encode_delta, normalize_delta, smooth_l1, BBox, Delta, NormStats,
};
use crate::harness::Scene;
use crate::seed::derive_seed;

/// Boxes whose best IoU is below this get pure-noise observation slots.
pub const BACKGROUND_IOU: f64 = 0.3;

/// Weight of the box term in [`stage_loss`].
pub const LOC_WEIGHT: f64 = 1.0;

pub const DEFAULT_RIDGE: f64 = 1e-3;
pub const DEFAULT_LR: f64 = 0.1;
pub const DEFAULT_EPOCHS: usize = 300;

/// Box coordinates are rounded to this grid before seeding feature noise.
const NOISE_QUANTUM: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    /// Number of foreground classes `M`.
    pub n_classes: usize,
    /// Base std of the noisy box-offset observation.
    pub observation_noise: f64,
    /// Extra observation std per unit of `1 - IoU`.
    pub noise_growth: f64,
    /// Std of the noise on the per-class evidence slots.
    pub evidence_noise: f64,
    pub distractor_dims: usize,
    pub seed: u64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            n_classes: 3,
            observation_noise: 0.01,
            noise_growth: 0.15,
            evidence_noise: 0.15,
            distractor_dims: 8,
            seed: 42,
        }
    }
}

impl FeatureConfig {
    /// Geometry (4) + observation (4) + class evidence (M) + distractors + bias.
    pub fn dim(&self) -> usize {
        4 + 4 + self.n_classes + self.distractor_dims + 1
    }

    /// Index of the first observation slot.
    pub const OBSERVATION_OFFSET: usize = 4;

    pub fn validate(&self) -> Result<()> {
        let stds = [
            self.observation_noise,
            self.noise_growth,
            self.evidence_noise,
        ];
        if stds.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument(
                "feature noise levels must be finite and >= 0".into(),
            ));
        }
        if self.n_classes == 0 {
            return Err(Error::InvalidArgument("n_classes must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// The four observation slots.
    pub fn observation(&self) -> [f64; 4] {
        let o = FeatureConfig::OBSERVATION_OFFSET;
        [self.0[o], self.0[o + 1], self.0[o + 2], self.0[o + 3]]
    }
}

fn noise_seed(seed: u64, image_id: u64, b: &BBox) -> u64 {
    let q = |v: f64| (v / NOISE_QUANTUM).round() as i64 as u64;
    derive_seed(seed, &[image_id, q(b.cx), q(b.cy), q(b.w), q(b.h)])
}

/// Synthetic features for `b` in `scene`.
///
/// Layout: `[cx/W, cy/H, ln(w/W), ln(h/H)]`, a noisy observation of the offset
/// to the best-matching ground truth (pure noise for background boxes), one
/// evidence slot per class carrying the box's IoU on its matched class plus
/// noise, `distractor_dims` standard-normal slots, and a constant 1.
///
/// The observation std is `observation_noise + noise_growth * (1 - IoU)`, so
/// poorly aligned boxes are harder to regress. All noise is a pure function of
/// `(cfg.seed, scene.image_id, b)`.
pub fn featurize(b: &BBox, scene: &Scene, cfg: &FeatureConfig) -> FeatureVector {
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed(cfg.seed, scene.image_id, b));
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };

    let mut v = Vec::with_capacity(cfg.dim());
    v.push(b.cx / scene.width);
    v.push(b.cy / scene.height);
    v.push((b.w / scene.width).ln());
    v.push((b.h / scene.height).ln());

    let matched = best_match(b, &scene.gts);
    let best_iou = matched.map_or(0.0, |(_, o)| o);
    let sigma = cfg.observation_noise + cfg.noise_growth * (1.0 - best_iou);
    let offset = match matched {
        Some((j, o)) if o >= BACKGROUND_IOU => encode_delta(b, &scene.gts[j].bbox).to_array(),
        _ => [0.0; 4],
    };
    for off in offset {
        v.push(off + sigma * normal());
    }

    let class = matched
        .filter(|&(_, o)| o > 0.0)
        .map(|(j, _)| scene.gts[j].class_id);
    for k in 1..=cfg.n_classes {
        let signal = if class == Some(k) { best_iou } else { 0.0 };
        v.push(signal + cfg.evidence_noise * normal());
    }

    for _ in 0..cfg.distractor_dims {
        v.push(normal());
    }
    v.push(1.0);
    FeatureVector(v)
}

/// Dense row-major matrix used for model weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Weights {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// One cascade stage: threshold, box regressor (`D x 4`), classifier
/// (`(M + 1) x D`) and the target statistics the regressor was trained with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageModel {
    pub u: f64,
    pub reg_weights: Weights,
    pub cls_weights: Weights,
    pub stats: NormStats,
}

impl StageModel {
    /// A stage that leaves boxes where they are and scores every class equally.
    pub fn identity(u: f64, dim: usize, n_classes: usize) -> Self {
        Self {
            u,
            reg_weights: Weights::zeros(dim, 4),
            cls_weights: Weights::zeros(n_classes + 1, dim),
            stats: NormStats::IDENTITY,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.reg_weights.rows
    }

    /// Number of outputs of the classifier, background included.
    pub fn n_outputs(&self) -> usize {
        self.cls_weights.rows
    }

    pub fn check_dims(&self, cfg: &FeatureConfig) -> Result<()> {
        let d = cfg.dim();
        if self.reg_weights.rows != d
            || self.reg_weights.cols != 4
            || self.cls_weights.cols != d
            || self.cls_weights.rows != cfg.n_classes + 1
        {
            return Err(Error::Dimension(format!(
                "stage weights are {}x{} / {}x{}, features have D={d} and M={}",
                self.reg_weights.rows,
                self.reg_weights.cols,
                self.cls_weights.rows,
                self.cls_weights.cols,
                cfg.n_classes
            )));
        }
        Ok(())
    }
}

fn check_finite(what: &'static str, rows: &[FeatureVector]) -> Result<()> {
    if rows.iter().all(|r| r.0.iter().all(|v| v.is_finite())) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

/// Closed-form ridge regression `argmin |XW - T|^2 + ridge |W|^2` through a
/// Cholesky factorization of the normal equations.
pub fn fit_regressor(features: &[FeatureVector], targets: &[Delta], ridge: f64) -> Result<Weights> {
    if features.len() != targets.len() {
        return Err(Error::Dimension(format!(
            "{} feature rows but {} targets",
            features.len(),
            targets.len()
        )));
    }
    if features.is_empty() {
        return Err(Error::InsufficientData("no regression samples".into()));
    }
    if !(ridge > 0.0 && ridge.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "ridge must be > 0, got {ridge}"
        )));
    }
    check_finite("fit_regressor features", features)?;
    if !targets.iter().all(Delta::is_finite) {
        return Err(Error::NonFinite("fit_regressor targets"));
    }
    let d = features[0].0.len();
    if features.iter().any(|f| f.0.len() != d) {
        return Err(Error::Dimension("ragged feature rows".into()));
    }

    let mut gram = DMatrix::<f64>::zeros(d, d);
    let mut rhs = DMatrix::<f64>::zeros(d, 4);
    for (f, t) in features.iter().zip(targets) {
        let x = &f.0;
        let t = t.to_array();
        for i in 0..d {
            let xi = x[i];
            for j in i..d {
                gram[(i, j)] += xi * x[j];
            }
            for k in 0..4 {
                rhs[(i, k)] += xi * t[k];
            }
        }
    }
    for i in 0..d {
        for j in 0..i {
            gram[(i, j)] = gram[(j, i)];
        }
        gram[(i, i)] += ridge;
    }

    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::Solve("normal equations are not positive definite".into()))?;
    let w = chol.solve(&rhs);
    let mut data = Vec::with_capacity(d * 4);
    for i in 0..d {
        for k in 0..4 {
            data.push(w[(i, k)]);
        }
    }
    Weights::from_rows(d, 4, data)
}

/// Numerically stable softmax of `logits`.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn logits(w: &Weights, x: &[f64]) -> Vec<f64> {
    (0..w.rows)
        .map(|k| w.row(k).iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

/// Mean cross-entropy of `softmax(W x)` against `labels`, and its gradient
/// with respect to `W`.
pub fn cross_entropy_with_grad(
    w: &Weights,
    features: &[FeatureVector],
    labels: &[usize],
) -> (f64, Weights) {
    let n = features.len().max(1) as f64;
    let mut grad = Weights::zeros(w.rows, w.cols);
    let mut loss = 0.0;
    for (f, &y) in features.iter().zip(labels) {
        let x = f.as_slice();
        let p = softmax(&logits(w, x));
        loss -= p[y].clamp(f64::MIN_POSITIVE, 1.0).ln();
        for (k, pk) in p.iter().enumerate() {
            let coef = pk - if k == y { 1.0 } else { 0.0 };
            let row = &mut grad.data[k * w.cols..(k + 1) * w.cols];
            for (g, xi) in row.iter_mut().zip(x) {
                *g += coef * xi;
            }
        }
    }
    grad.data.iter_mut().for_each(|g| *g /= n);
    (loss / n, grad)
}

pub fn cross_entropy(w: &Weights, features: &[FeatureVector], labels: &[usize]) -> f64 {
    let n = features.len().max(1) as f64;
    features
        .iter()
        .zip(labels)
        .map(|(f, &y)| {
            -softmax(&logits(w, f.as_slice()))[y]
                .clamp(f64::MIN_POSITIVE, 1.0)
                .ln()
        })
        .sum::<f64>()
        / n
}

/// Outcome of [`fit_classifier`].
#[derive(Debug, Clone)]
pub struct ClassifierFit {
    pub weights: Weights,
    /// Training loss before each step, followed by the final loss.
    pub losses: Vec<f64>,
}

/// Per-column affine map applied to classifier inputs before descent.
struct Standardizer {
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// Index and value of a constant column that absorbs the centering.
    bias: Option<(usize, f64)>,
}

impl Standardizer {
    fn fit(features: &[FeatureVector]) -> Self {
        let d = features[0].0.len();
        let n = features.len() as f64;
        let mut mean = vec![0.0; d];
        for f in features {
            for (m, x) in mean.iter_mut().zip(&f.0) {
                *m += x / n;
            }
        }
        let mut var = vec![0.0; d];
        for f in features {
            for ((v, x), m) in var.iter_mut().zip(&f.0).zip(&mean) {
                *v += (x - m) * (x - m) / n;
            }
        }
        let constant: Vec<bool> = (0..d)
            .map(|j| var[j] <= 1e-24 * (1.0 + mean[j] * mean[j]))
            .collect();
        let bias = (0..d)
            .find(|&j| constant[j] && mean[j] != 0.0)
            .map(|j| (j, features[0].0[j]));
        let mut scale = vec![1.0; d];
        for j in 0..d {
            if constant[j] {
                mean[j] = 0.0;
            } else if bias.is_some() {
                scale[j] = var[j].sqrt();
            } else {
                // Without an intercept only rescale, by the root mean square.
                scale[j] = (var[j] + mean[j] * mean[j]).sqrt();
                mean[j] = 0.0;
            }
        }
        Self { mean, scale, bias }
    }

    fn apply(&self, f: &FeatureVector) -> FeatureVector {
        FeatureVector(
            f.0.iter()
                .zip(self.mean.iter().zip(&self.scale))
                .map(|(x, (m, s))| (x - m) / s)
                .collect(),
        )
    }

    /// Weights on raw features giving the same logits as `v` on standardized ones.
    fn unfold(&self, v: &Weights) -> Weights {
        let mut w = v.clone();
        for k in 0..v.rows {
            let mut offset = 0.0;
            for j in 0..v.cols {
                w.data[k * v.cols + j] = v.get(k, j) / self.scale[j];
                offset += v.get(k, j) * self.mean[j] / self.scale[j];
            }
            if let Some((b, c)) = self.bias {
                w.data[k * v.cols + b] -= offset / c;
            }
        }
        w
    }
}

/// Full-batch gradient descent on the mean softmax cross-entropy, starting
/// from zero weights. `n_outputs` counts the background class.
///
/// Descent runs on standardized inputs (each non-constant column centered
/// and scaled to unit variance, the offset folded into a constant column if
/// there is one); the returned weights act on the raw features. Geometry
/// slots such as `ln(w/W)` sit far from zero and would otherwise dominate
/// the step size.
pub fn fit_classifier(
    features: &[FeatureVector],
    labels: &[usize],
    n_outputs: usize,
    lr: f64,
    epochs: usize,
) -> Result<ClassifierFit> {
    if features.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} feature rows but {} labels",
            features.len(),
            labels.len()
        )));
    }
    if features.is_empty() {
        return Err(Error::InsufficientData("no classification samples".into()));
    }
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::InvalidArgument(format!("lr must be > 0, got {lr}")));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= n_outputs) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {n_outputs} outputs"
        )));
    }
    check_finite("fit_classifier features", features)?;

    let d = features[0].0.len();
    if features.iter().any(|f| f.0.len() != d) {
        return Err(Error::Dimension("ragged feature rows".into()));
    }
    let standardizer = Standardizer::fit(features);
    let z: Vec<FeatureVector> = features.iter().map(|f| standardizer.apply(f)).collect();
    let mut v = Weights::zeros(n_outputs, d);
    let mut losses = Vec::with_capacity(epochs + 1);
    for step in 0..epochs {
        let (loss, grad) = cross_entropy_with_grad(&v, &z, labels);
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        losses.push(loss);
        for (vi, gi) in v.data.iter_mut().zip(&grad.data) {
            *vi -= lr * gi;
        }
    }
    let w = standardizer.unfold(&v);
    let last = cross_entropy(&w, features, labels);
    if !last.is_finite() || w.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Diverged {
            step: epochs,
            loss: last,
        });
    }
    losses.push(last);
    Ok(ClassifierFit { weights: w, losses })
}

/// Regressor output for `f`, mapped back to raw offsets with the stage's
/// statistics.
pub fn predict_delta(model: &StageModel, f: &FeatureVector) -> Delta {
    let w = &model.reg_weights;
    let mut out = [0.0; 4];
    for (i, xi) in f.as_slice().iter().enumerate() {
        for (k, o) in out.iter_mut().enumerate() {
            *o += xi * w.get(i, k);
        }
    }
    denormalize_delta(&Delta::from_array(out), &model.stats)
}

/// Class posterior `p(y = k | x)` for `k = 0..=M`.
pub fn predict_scores(model: &StageModel, f: &FeatureVector) -> Vec<f64> {
    softmax(&logits(&model.cls_weights, f.as_slice()))
}

/// One training example as seen by [`stage_loss`].
#[derive(Debug, Clone)]
pub struct LabeledFeature {
    pub features: FeatureVector,
    pub label: usize,
    /// Raw offset to the matched ground truth; present for positives.
    pub target: Option<Delta>,
}

/// Mean classification cross-entropy plus [`LOC_WEIGHT`] times the mean
/// smooth-L1 residual between predicted and target normalized offsets over
/// the positives of the batch.
pub fn stage_loss(model: &StageModel, batch: &[LabeledFeature]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InsufficientData("empty batch".into()));
    }
    let mut cls = 0.0;
    let mut loc = 0.0;
    let mut n_pos = 0usize;
    for s in batch {
        let p = predict_scores(model, &s.features);
        cls -= p[s.label].clamp(f64::MIN_POSITIVE, 1.0).ln();
        if s.label >= 1 {
            if let Some(t) = s.target {
                let pred = normalize_delta(&predict_delta(model, &s.features), &model.stats);
                let goal = normalize_delta(&t, &model.stats);
                let r = pred.to_array();
                let g = goal.to_array();
                loc += smooth_l1(&Delta::from_array(std::array::from_fn(|k| r[k] - g[k])));
                n_pos += 1;
            }
        }
    }
    let cls = cls / batch.len() as f64;
    let loc = if n_pos == 0 { 0.0 } else { loc / n_pos as f64 };
    Ok(cls + LOC_WEIGHT * loc)
}
