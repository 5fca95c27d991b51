//! Multi-stage training and inference.
//!
//! A cascade trains stage `t` on the boxes produced by stage `t - 1`, each
//! stage with its own IoU threshold and regression statistics. The two
//! comparison detectors live here as well: iterative refinement with a single
//! stage applied `k` times, and the integral-loss detector that trains several
//! classifiers at different thresholds on one shared box distribution.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assign::{compute_stats, match_and_label, sample_minibatch, LabeledSample};
use crate::error::{Error, Result};
use crate::eval::{coco_ap, ground_truth_set, ApReport, Detection};
use crate::geometry::{clip_box, decode_delta, nms, normalize_delta, BBox, Delta, NormStats};
use crate::harness::Scene;
use crate::model::{
    featurize, fit_classifier, fit_regressor, predict_delta, predict_scores, stage_loss,
    FeatureConfig, FeatureVector, LabeledFeature, StageModel, DEFAULT_EPOCHS, DEFAULT_LR,
    DEFAULT_RIDGE,
};
use crate::seed::derive_seed;

/// Thresholds of up to four stages; the first three are the standard cascade.
pub const DEFAULT_THRESHOLDS: [f64; 4] = [0.5, 0.6, 0.7, 0.75];

/// Minimum positives a stage needs to be trained.
pub const MIN_POSITIVES: usize = 2;

const SAMPLING_STREAM: u64 = 0x5a4d_706c_6521;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// One IoU threshold per stage.
    pub thresholds: Vec<f64>,
    /// When false every stage is labeled at the first threshold.
    pub increasing_iou: bool,
    /// When false regression targets are left unnormalized at every stage.
    pub use_stats: bool,
    pub ridge: f64,
    pub lr: f64,
    pub epochs: usize,
    /// Stage-1 minibatch size per image.
    pub batch_per_image: usize,
    pub fg_fraction: f64,
    pub seed: u64,
    pub features: FeatureConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            thresholds: DEFAULT_THRESHOLDS[..3].to_vec(),
            increasing_iou: true,
            use_stats: true,
            ridge: DEFAULT_RIDGE,
            lr: DEFAULT_LR,
            epochs: DEFAULT_EPOCHS,
            batch_per_image: 64,
            fg_fraction: crate::assign::DEFAULT_FG_FRACTION,
            seed: 42,
            features: FeatureConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Same configuration with different stage thresholds.
    pub fn with_thresholds(&self, thresholds: &[f64]) -> Self {
        Self {
            thresholds: thresholds.to_vec(),
            ..self.clone()
        }
    }

    /// Thresholds actually used to label each stage.
    pub fn stage_thresholds(&self) -> Vec<f64> {
        if self.increasing_iou {
            self.thresholds.clone()
        } else {
            vec![self.thresholds[0]; self.thresholds.len()]
        }
    }

    fn validate(&self) -> Result<()> {
        if self.thresholds.is_empty() {
            return Err(Error::InvalidArgument(
                "at least one threshold is required".into(),
            ));
        }
        if self.thresholds.iter().any(|&u| !(u > 0.0 && u < 1.0)) {
            return Err(Error::InvalidArgument(format!(
                "thresholds must lie in (0, 1), got {:?}",
                self.thresholds
            )));
        }
        if self.thresholds.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidArgument(format!(
                "thresholds must be non-decreasing, got {:?}",
                self.thresholds
            )));
        }
        self.features.validate()
    }
}

/// A trained cascade. Immutable after training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeModel {
    pub stages: Vec<StageModel>,
    pub thresholds: Vec<f64>,
    pub feature_config: FeatureConfig,
}

impl CascadeModel {
    pub fn n_stages(&self) -> usize {
        self.stages.len()
    }

    /// One stage applied `k` times in a row.
    pub fn repeated(stage: &StageModel, k: usize, feature_config: &FeatureConfig) -> Self {
        Self {
            stages: vec![stage.clone(); k],
            thresholds: vec![stage.u; k],
            feature_config: feature_config.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() || self.stages.len() != self.thresholds.len() {
            return Err(Error::Dimension(format!(
                "{} stages but {} thresholds",
                self.stages.len(),
                self.thresholds.len()
            )));
        }
        if self.thresholds.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidArgument(
                "cascade thresholds must be non-decreasing".into(),
            ));
        }
        for s in &self.stages {
            s.check_dims(&self.feature_config)?;
        }
        Ok(())
    }
}

/// Several classifiers sharing one regressor. Every head carries a copy of
/// the shared regressor and its statistics; only the classifier differs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntegralModel {
    pub thresholds: Vec<f64>,
    pub heads: Vec<StageModel>,
    pub feature_config: FeatureConfig,
}

/// Everything that can be saved to a model file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Detector {
    Cascade(CascadeModel),
    /// A single stage applied `iterations` times at inference.
    Iterative {
        base: CascadeModel,
        iterations: usize,
    },
    Integral(IntegralModel),
}

impl Detector {
    pub fn validate(&self) -> Result<()> {
        match self {
            Detector::Cascade(m) => m.validate(),
            Detector::Iterative { base, iterations } => {
                if *iterations == 0 || base.n_stages() != 1 {
                    return Err(Error::InvalidArgument(
                        "iterative model needs one stage and at least one iteration".into(),
                    ));
                }
                base.validate()
            }
            Detector::Integral(m) => {
                if m.heads.is_empty() || m.heads.len() != m.thresholds.len() {
                    return Err(Error::Dimension(
                        "integral heads and thresholds differ".into(),
                    ));
                }
                m.heads
                    .iter()
                    .try_for_each(|h| h.check_dims(&m.feature_config))
            }
        }
    }

    pub fn feature_config(&self) -> &FeatureConfig {
        match self {
            Detector::Cascade(m) => &m.feature_config,
            Detector::Iterative { base, .. } => &base.feature_config,
            Detector::Integral(m) => &m.feature_config,
        }
    }

    /// Runs the detector on `proposals` of `scene`.
    pub fn infer(
        &self,
        scene: &Scene,
        proposals: &[BBox],
        cfg: &InferenceConfig,
    ) -> InferenceTrace {
        match self {
            Detector::Cascade(m) => run_cascade(m, scene, proposals, cfg),
            Detector::Iterative { base, iterations } => run_cascade(
                &CascadeModel::repeated(&base.stages[0], *iterations, &base.feature_config),
                scene,
                proposals,
                cfg,
            ),
            Detector::Integral(m) => infer_integral(m, scene, proposals, cfg),
        }
    }

    /// Detections over all scenes, optionally with ground truths added to
    /// the proposals.
    pub fn detect(&self, scenes: &[Scene], add_gt: bool, cfg: &InferenceConfig) -> Vec<Detection> {
        scenes
            .iter()
            .flat_map(|s| {
                let proposals = if add_gt {
                    add_gt_to_proposals(&s.proposals, &s.gts)
                } else {
                    s.proposals.clone()
                };
                self.infer(s, &proposals, cfg).detections
            })
            .collect()
    }

    pub fn evaluate(&self, scenes: &[Scene], add_gt: bool, cfg: &InferenceConfig) -> ApReport {
        coco_ap(&self.detect(scenes, add_gt, cfg), &ground_truth_set(scenes))
    }
}

/// How final detection scores are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scoring {
    /// The last stage's own classifier.
    LastStage,
    /// Mean of every stage's classifier on the last stage's input boxes.
    Ensemble,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InferenceConfig {
    pub scoring: Scoring,
    /// Class scores below this are not reported.
    pub min_score: f64,
    /// Per-class NMS threshold.
    pub nms_iou: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            scoring: Scoring::LastStage,
            min_score: 0.05,
            nms_iou: 0.5,
        }
    }
}

/// Per-stage record of one inference run.
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceTrace {
    pub image_id: u64,
    /// Boxes entering stage `t`.
    pub stage_inputs: Vec<Vec<BBox>>,
    /// Boxes leaving stage `t`.
    pub stage_outputs: Vec<Vec<BBox>>,
    /// Posterior of stage `t`'s classifier on its input boxes.
    pub posteriors: Vec<Vec<Vec<f64>>>,
    /// `cross_posteriors[t][s]`: classifier `s <= t` evaluated on the boxes
    /// entering stage `t`.
    pub cross_posteriors: Vec<Vec<Vec<Vec<f64>>>>,
    pub detections: Vec<Detection>,
}

impl InferenceTrace {
    pub fn len(&self) -> usize {
        self.stage_inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stage_inputs.is_empty()
    }

    pub fn final_boxes(&self) -> &[BBox] {
        self.stage_outputs.last().map_or(&[], Vec::as_slice)
    }
}

/// Mean of `posteriors` across its first axis.
fn mean_posteriors(posteriors: &[Vec<Vec<f64>>]) -> Vec<Vec<f64>> {
    let n = posteriors.len() as f64;
    let Some(first) = posteriors.first() else {
        return Vec::new();
    };
    (0..first.len())
        .map(|i| {
            (0..first[i].len())
                .map(|k| posteriors.iter().map(|p| p[i][k]).sum::<f64>() / n)
                .collect()
        })
        .collect()
}

/// Mean posterior of all stage classifiers on the boxes entering the last
/// stage.
pub fn ensemble_scores(trace: &InferenceTrace) -> Vec<Vec<f64>> {
    trace
        .cross_posteriors
        .last()
        .map(|c| mean_posteriors(c))
        .unwrap_or_default()
}

/// Mean posterior of classifiers `0..=t` on the boxes entering stage `t`.
pub fn ensemble_scores_at(trace: &InferenceTrace, t: usize) -> Vec<Vec<f64>> {
    mean_posteriors(&trace.cross_posteriors[t])
}

/// Per-class detections above `cfg.min_score`, after per-class NMS.
pub fn detections_from(
    image_id: u64,
    boxes: &[BBox],
    posteriors: &[Vec<f64>],
    cfg: &InferenceConfig,
) -> Vec<Detection> {
    let n_outputs = posteriors.first().map_or(0, Vec::len);
    let mut out = Vec::new();
    for class_id in 1..n_outputs {
        let candidates: Vec<(BBox, f64)> = boxes
            .iter()
            .zip(posteriors)
            .filter(|(_, p)| p[class_id] >= cfg.min_score)
            .map(|(b, p)| (*b, p[class_id]))
            .collect();
        for i in nms(&candidates, cfg.nms_iou) {
            out.push(Detection {
                image_id,
                class_id,
                bbox: candidates[i].0,
                score: candidates[i].1,
            });
        }
    }
    out
}

/// Applies the stage regressor to `b`, clipping to the image. A box that
/// would collapse to zero area stays where it was.
pub fn regress_box(stage: &StageModel, scene: &Scene, b: &BBox, f: &FeatureVector) -> BBox {
    let moved = decode_delta(b, &predict_delta(stage, f)).bbox;
    if !moved.is_valid() {
        return *b;
    }
    clip_box(&moved, scene.width, scene.height).unwrap_or(*b)
}

/// Boxes refined by every stage in turn, re-featurized before each stage.
pub fn run_cascade(
    model: &CascadeModel,
    scene: &Scene,
    proposals: &[BBox],
    cfg: &InferenceConfig,
) -> InferenceTrace {
    let fc = &model.feature_config;
    let mut trace = InferenceTrace {
        image_id: scene.image_id,
        stage_inputs: Vec::with_capacity(model.n_stages()),
        stage_outputs: Vec::with_capacity(model.n_stages()),
        posteriors: Vec::with_capacity(model.n_stages()),
        cross_posteriors: Vec::with_capacity(model.n_stages()),
        detections: Vec::new(),
    };
    let mut boxes = proposals.to_vec();
    for (t, stage) in model.stages.iter().enumerate() {
        let feats: Vec<FeatureVector> = boxes.iter().map(|b| featurize(b, scene, fc)).collect();
        let cross: Vec<Vec<Vec<f64>>> = model.stages[..=t]
            .iter()
            .map(|s| feats.iter().map(|f| predict_scores(s, f)).collect())
            .collect();
        let outputs: Vec<BBox> = boxes
            .iter()
            .zip(&feats)
            .map(|(b, f)| regress_box(stage, scene, b, f))
            .collect();
        trace.posteriors.push(cross[t].clone());
        trace.cross_posteriors.push(cross);
        trace
            .stage_inputs
            .push(std::mem::replace(&mut boxes, outputs.clone()));
        trace.stage_outputs.push(outputs);
    }
    let scores = match cfg.scoring {
        Scoring::LastStage => trace.posteriors.last().cloned().unwrap_or_default(),
        Scoring::Ensemble => ensemble_scores(&trace),
    };
    trace.detections = detections_from(scene.image_id, trace.final_boxes(), &scores, cfg);
    trace
}

/// The same regressor applied `k` times, re-featurizing in between.
pub fn iterative_bbox(
    stage: &StageModel,
    scene: &Scene,
    proposals: &[BBox],
    k: usize,
    features: &FeatureConfig,
) -> Vec<BBox> {
    let mut boxes = proposals.to_vec();
    for _ in 0..k {
        boxes = boxes
            .iter()
            .map(|b| regress_box(stage, scene, b, &featurize(b, scene, features)))
            .collect();
    }
    boxes
}

/// Ground-truth boxes appended to the proposal list.
pub fn add_gt_to_proposals(proposals: &[BBox], gts: &[crate::assign::GroundTruth]) -> Vec<BBox> {
    proposals
        .iter()
        .copied()
        .chain(gts.iter().map(|g| g.bbox))
        .collect()
}

/// Once-regressed boxes scored by the mean posterior of all heads.
pub fn infer_integral(
    model: &IntegralModel,
    scene: &Scene,
    proposals: &[BBox],
    cfg: &InferenceConfig,
) -> InferenceTrace {
    let fc = &model.feature_config;
    let feats: Vec<FeatureVector> = proposals.iter().map(|b| featurize(b, scene, fc)).collect();
    let per_head: Vec<Vec<Vec<f64>>> = model
        .heads
        .iter()
        .map(|h| feats.iter().map(|f| predict_scores(h, f)).collect())
        .collect();
    let mean = mean_posteriors(&per_head);
    let outputs: Vec<BBox> = proposals
        .iter()
        .zip(&feats)
        .map(|(b, f)| regress_box(&model.heads[0], scene, b, f))
        .collect();
    let detections = detections_from(scene.image_id, &outputs, &mean, cfg);
    InferenceTrace {
        image_id: scene.image_id,
        stage_inputs: vec![proposals.to_vec()],
        stage_outputs: vec![outputs],
        posteriors: vec![mean],
        cross_posteriors: vec![per_head],
        detections,
    }
}

/// A box in the training pool, tied to the scene it belongs to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoolBox {
    pub scene: usize,
    pub bbox: BBox,
}

/// What happened while training one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageRecord {
    pub threshold: f64,
    /// Best-match IoU of every training box entering the stage.
    pub input_ious: Vec<f64>,
    pub positives: usize,
    /// Statistics of the stage's positives, whether or not they were used.
    pub observed_stats: NormStats,
    pub classifier_loss: f64,
    pub stage_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingReport {
    pub stages: Vec<StageRecord>,
}

impl TrainingReport {
    /// Fraction of stage `t`'s training boxes with IoU at least `u`.
    pub fn fraction_above(&self, t: usize, u: f64) -> f64 {
        let ious = &self.stages[t].input_ious;
        ious.iter().filter(|&&o| o >= u).count() as f64 / ious.len().max(1) as f64
    }
}

fn label_pool(scenes: &[Scene], pool: &[PoolBox], u: f64) -> Vec<LabeledSample> {
    pool.iter()
        .map(|p| match_and_label(&[p.bbox], &scenes[p.scene].gts, u)[0])
        .collect()
}

/// Stage-1 pool: a foreground-balanced minibatch of proposals per image,
/// labeled at `u`.
pub fn initial_pool(scenes: &[Scene], u: f64, cfg: &TrainConfig) -> Result<Vec<PoolBox>> {
    let mut pool = Vec::new();
    for (i, s) in scenes.iter().enumerate() {
        let labeled = match_and_label(&s.proposals, &s.gts, u);
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[SAMPLING_STREAM, s.image_id]));
        let batch = sample_minibatch(&labeled, cfg.batch_per_image, cfg.fg_fraction, &mut rng)?;
        pool.extend(batch.into_iter().map(|l| PoolBox {
            scene: i,
            bbox: l.bbox,
        }));
    }
    Ok(pool)
}

struct FittedStage {
    model: StageModel,
    record: StageRecord,
    features: Vec<FeatureVector>,
}

fn count_positives(labeled: &[LabeledSample]) -> usize {
    labeled.iter().filter(|l| l.is_positive()).count()
}

fn fit_stage(
    scenes: &[Scene],
    pool: &[PoolBox],
    u: f64,
    stage_index: usize,
    cfg: &TrainConfig,
) -> Result<FittedStage> {
    let fc = &cfg.features;
    let labeled = label_pool(scenes, pool, u);
    let positives = count_positives(&labeled);
    if positives < MIN_POSITIVES {
        return Err(Error::ScarcePositives {
            stage: stage_index + 1,
            threshold: u,
            positives,
        });
    }
    let features: Vec<FeatureVector> = pool
        .iter()
        .map(|p| featurize(&p.bbox, &scenes[p.scene], fc))
        .collect();

    let observed_stats = compute_stats(&labeled, u)?;
    let stats = if cfg.use_stats {
        observed_stats
    } else {
        NormStats::IDENTITY
    };

    let (reg_x, reg_t): (Vec<FeatureVector>, Vec<Delta>) = labeled
        .iter()
        .zip(&features)
        .filter_map(|(l, f)| l.target.map(|t| (f.clone(), normalize_delta(&t, &stats))))
        .unzip();
    let reg_weights = fit_regressor(&reg_x, &reg_t, cfg.ridge)?;

    let labels: Vec<usize> = labeled.iter().map(|l| l.label).collect();
    let fit = fit_classifier(&features, &labels, fc.n_classes + 1, cfg.lr, cfg.epochs)?;

    let model = StageModel {
        u,
        reg_weights,
        cls_weights: fit.weights,
        stats,
    };
    let batch: Vec<LabeledFeature> = labeled
        .iter()
        .zip(&features)
        .map(|(l, f)| LabeledFeature {
            features: f.clone(),
            label: l.label,
            target: l.target,
        })
        .collect();
    let loss = stage_loss(&model, &batch)?;
    let record = StageRecord {
        threshold: u,
        input_ious: labeled.iter().map(|l| l.iou).collect(),
        positives,
        observed_stats,
        classifier_loss: fit.losses.last().copied().unwrap_or(f64::NAN),
        stage_loss: loss,
    };
    Ok(FittedStage {
        model,
        record,
        features,
    })
}

/// Trains the cascade stage by stage, each stage on the regressed output of
/// the one before it.
pub fn train_cascade(
    scenes: &[Scene],
    cfg: &TrainConfig,
) -> Result<(CascadeModel, TrainingReport)> {
    cfg.validate()?;
    let thresholds = cfg.stage_thresholds();
    let mut pool = initial_pool(scenes, thresholds[0], cfg)?;
    let mut stages = Vec::with_capacity(thresholds.len());
    let mut report = TrainingReport::default();

    for (t, &u) in thresholds.iter().enumerate() {
        let fitted = fit_stage(scenes, &pool, u, t, cfg)?;
        log::info!(
            "stage {}: u={u} boxes={} positives={} loss={:.4}",
            t + 1,
            pool.len(),
            fitted.record.positives,
            fitted.record.stage_loss
        );
        if t + 1 < thresholds.len() {
            pool = pool
                .iter()
                .zip(&fitted.features)
                .map(|(p, f)| PoolBox {
                    scene: p.scene,
                    bbox: regress_box(&fitted.model, &scenes[p.scene], &p.bbox, f),
                })
                .collect();
        }
        stages.push(fitted.model);
        report.stages.push(fitted.record);
    }

    let model = CascadeModel {
        stages,
        thresholds,
        feature_config: cfg.features.clone(),
    };
    Ok((model, report))
}

/// Positive counts of the integral-loss detector, one per threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct IntegralReport {
    pub positives: Vec<(f64, usize)>,
}

/// One regressor trained at the lowest threshold plus one classifier per
/// threshold, all on the same stage-1 pool.
pub fn train_integral(
    scenes: &[Scene],
    cfg: &TrainConfig,
) -> Result<(IntegralModel, IntegralReport)> {
    cfg.validate()?;
    let u_min = cfg.thresholds.iter().copied().fold(f64::INFINITY, f64::min);
    let pool = initial_pool(scenes, u_min, cfg)?;
    let shared = fit_stage(scenes, &pool, u_min, 0, cfg)?;

    let mut heads = Vec::with_capacity(cfg.thresholds.len());
    let mut positives = Vec::with_capacity(cfg.thresholds.len());
    for (i, &u) in cfg.thresholds.iter().enumerate() {
        let labeled = label_pool(scenes, &pool, u);
        let n_pos = count_positives(&labeled);
        positives.push((u, n_pos));
        if u == u_min {
            let mut head = shared.model.clone();
            head.u = u;
            heads.push(head);
            continue;
        }
        if n_pos < MIN_POSITIVES {
            return Err(Error::ScarcePositives {
                stage: i + 1,
                threshold: u,
                positives: n_pos,
            });
        }
        let labels: Vec<usize> = labeled.iter().map(|l| l.label).collect();
        let fit = fit_classifier(
            &shared.features,
            &labels,
            cfg.features.n_classes + 1,
            cfg.lr,
            cfg.epochs,
        )?;
        heads.push(StageModel {
            u,
            reg_weights: shared.model.reg_weights.clone(),
            cls_weights: fit.weights,
            stats: shared.model.stats,
        });
    }
    let model = IntegralModel {
        thresholds: cfg.thresholds.clone(),
        heads,
        feature_config: cfg.features.clone(),
    };
    Ok((model, IntegralReport { positives }))
}
