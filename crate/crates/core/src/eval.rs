//! COCO-style detection evaluation.
//!
//! Detections are matched greedily per image and class in descending score
//! order, AP uses 101-point interpolation, and the headline number averages
//! AP over the IoU thresholds 0.50, 0.55, ..., 0.95. There is no cap on the
//! number of detections per image.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::assign::{best_match, GroundTruth};
use crate::cascade::{
    detections_from, ensemble_scores_at, regress_box, run_cascade, CascadeModel, InferenceConfig,
    InferenceTrace,
};
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::harness::Scene;
use crate::model::{featurize, FeatureConfig, StageModel};

/// Number of points of the interpolated recall grid.
pub const RECALL_POINTS: usize = 101;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: u64,
    pub class_id: usize,
    pub bbox: BBox,
    pub score: f64,
}

/// Ground truths keyed by image id.
pub type GroundTruthSet = BTreeMap<u64, Vec<GroundTruth>>;

pub fn ground_truth_set(scenes: &[Scene]) -> GroundTruthSet {
    scenes.iter().map(|s| (s.image_id, s.gts.clone())).collect()
}

/// The ten COCO matching thresholds, `0.50 + 0.05 k`.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|k| (50 + 5 * k) as f64 / 100.0).collect()
}

/// Indices of `dets` sorted by descending score, ties by ascending index.
fn score_order(dets: &[Detection], idx: &mut [usize]) {
    idx.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
}

/// True-positive flag for every detection at matching threshold `iou_t`.
///
/// Within one image and class, detections are visited by descending score and
/// each claims the unmatched ground truth of highest IoU, provided that IoU is
/// at least `iou_t`. Each ground truth is claimed at most once.
pub fn match_detections(dets: &[Detection], gts: &GroundTruthSet, iou_t: f64) -> Vec<bool> {
    let mut groups: BTreeMap<(u64, usize), Vec<usize>> = BTreeMap::new();
    for (i, d) in dets.iter().enumerate() {
        groups.entry((d.image_id, d.class_id)).or_default().push(i);
    }

    let mut flags = vec![false; dets.len()];
    for ((image_id, class_id), mut members) in groups {
        let Some(image_gts) = gts.get(&image_id) else {
            continue;
        };
        let candidates: Vec<&BBox> = image_gts
            .iter()
            .filter(|g| g.class_id == class_id)
            .map(|g| &g.bbox)
            .collect();
        let mut taken = vec![false; candidates.len()];
        score_order(dets, &mut members);
        for i in members {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in candidates.iter().enumerate() {
                if taken[j] {
                    continue;
                }
                let o = iou(&dets[i].bbox, g);
                if o >= iou_t && best.is_none_or(|(_, bo)| o > bo) {
                    best = Some((j, o));
                }
            }
            if let Some((j, _)) = best {
                taken[j] = true;
                flags[i] = true;
            }
        }
    }
    flags
}

/// 101-point interpolated average precision of a ranked list of TP/FP flags.
///
/// Returns 0 when `n_gt` is 0.
pub fn average_precision(flags: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 || flags.is_empty() {
        return 0.0;
    }
    let mut tp = Vec::with_capacity(flags.len());
    let mut precision = Vec::with_capacity(flags.len());
    let (mut n_tp, mut n_fp) = (0usize, 0usize);
    for &f in flags {
        if f {
            n_tp += 1;
        } else {
            n_fp += 1;
        }
        tp.push(n_tp);
        precision.push(n_tp as f64 / (n_tp + n_fp) as f64);
    }
    // precision envelope: best precision at this recall or beyond
    for i in (0..precision.len() - 1).rev() {
        if precision[i] < precision[i + 1] {
            precision[i] = precision[i + 1];
        }
    }

    // recall_k >= r / 100  <=>  100 * tp_k >= r * n_gt, kept in integers
    let mut sum = 0.0;
    let mut k = 0;
    for r in 0..RECALL_POINTS {
        while k < tp.len() && 100 * tp[k] < r * n_gt {
            k += 1;
        }
        if k < tp.len() {
            sum += precision[k];
        }
    }
    sum / RECALL_POINTS as f64
}

/// Class-averaged AP at one matching threshold. Only classes with at least
/// one ground truth take part.
pub fn ap_at_threshold(dets: &[Detection], gts: &GroundTruthSet, iou_t: f64) -> f64 {
    let flags = match_detections(dets, gts, iou_t);
    class_averaged_ap(dets, gts, &flags)
}

fn class_averaged_ap(dets: &[Detection], gts: &GroundTruthSet, flags: &[bool]) -> f64 {
    let mut n_gt: BTreeMap<usize, usize> = BTreeMap::new();
    for g in gts.values().flatten() {
        *n_gt.entry(g.class_id).or_default() += 1;
    }
    if n_gt.is_empty() {
        return 0.0;
    }
    let mut sum = 0.0;
    for (&class_id, &count) in &n_gt {
        let mut idx: Vec<usize> = (0..dets.len())
            .filter(|&i| dets[i].class_id == class_id && gts.contains_key(&dets[i].image_id))
            .collect();
        score_order(dets, &mut idx);
        let ranked: Vec<bool> = idx.iter().map(|&i| flags[i]).collect();
        sum += average_precision(&ranked, count);
    }
    sum / n_gt.len() as f64
}

/// AP at each COCO threshold and their mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    pub per_threshold: Vec<(f64, f64)>,
    pub mean_ap: f64,
}

impl ApReport {
    pub fn from_thresholds(per_threshold: Vec<(f64, f64)>) -> Self {
        let mean_ap = if per_threshold.is_empty() {
            0.0
        } else {
            per_threshold.iter().map(|(_, ap)| ap).sum::<f64>() / per_threshold.len() as f64
        };
        Self {
            per_threshold,
            mean_ap,
        }
    }

    /// AP at the threshold closest to `t`.
    pub fn ap_at(&self, t: f64) -> Option<f64> {
        self.per_threshold
            .iter()
            .find(|(th, _)| (th - t).abs() < 1e-9)
            .map(|&(_, ap)| ap)
    }

    /// `threshold,ap` rows followed by a `mean,<value>` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("threshold,ap\n");
        for (t, ap) in &self.per_threshold {
            out.push_str(&format!("{t:.6},{ap:.6}\n"));
        }
        out.push_str(&format!("mean,{:.6}\n", self.mean_ap));
        out
    }
}

pub fn coco_ap(dets: &[Detection], gts: &GroundTruthSet) -> ApReport {
    ApReport::from_thresholds(
        coco_thresholds()
            .into_iter()
            .map(|t| (t, ap_at_threshold(dets, gts, t)))
            .collect(),
    )
}

/// One row of a per-stage evaluation table.
#[derive(Debug, Clone, PartialEq)]
pub struct StageRow {
    /// `"1"`, `"2"`, ... for single stages, `"1~2"`, `"1~3"` for ensembles.
    pub label: String,
    pub report: ApReport,
}

/// Header and rows for a list of labelled reports, one row per report, with
/// the mean AP followed by AP at each threshold.
pub fn rows_to_csv(rows: &[StageRow]) -> String {
    let mut out = String::from("stage,ap");
    for t in coco_thresholds() {
        out.push_str(&format!(",ap{}", (t * 100.0).round() as u32));
    }
    out.push('\n');
    for row in rows {
        out.push_str(&format!("{},{:.6}", row.label, row.report.mean_ap));
        for (_, ap) in &row.report.per_threshold {
            out.push_str(&format!(",{ap:.6}"));
        }
        out.push('\n');
    }
    out
}

/// Mean output IoU per input-IoU bin, for plotting a regressor's
/// localization curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub bin_low: f64,
    pub bin_high: f64,
    pub count: usize,
    pub mean_input_iou: f64,
    pub mean_output_iou: f64,
}

/// Bins `(input IoU, output IoU)` pairs by input IoU. Empty bins are omitted.
pub fn bin_curve(pairs: &[(f64, f64)], bin_width: f64) -> Vec<CurvePoint> {
    let n_bins = (1.0 / bin_width - 1e-9).ceil() as usize;
    let mut acc = vec![(0usize, 0.0f64, 0.0f64); n_bins];
    for &(input, output) in pairs {
        let i = ((input / bin_width).floor() as usize).min(n_bins - 1);
        acc[i].0 += 1;
        acc[i].1 += input;
        acc[i].2 += output;
    }
    acc.into_iter()
        .enumerate()
        .filter(|(_, (n, _, _))| *n > 0)
        .map(|(i, (n, si, so))| CurvePoint {
            bin_low: i as f64 * bin_width,
            bin_high: ((i + 1) as f64 * bin_width).min(1.0),
            count: n,
            mean_input_iou: si / n as f64,
            mean_output_iou: so / n as f64,
        })
        .collect()
}

pub fn curve_to_csv(points: &[CurvePoint]) -> String {
    let mut out = String::from("bin_low,bin_high,count,mean_input_iou,mean_output_iou\n");
    for p in points {
        out.push_str(&format!(
            "{:.6},{:.6},{},{:.6},{:.6}\n",
            p.bin_low, p.bin_high, p.count, p.mean_input_iou, p.mean_output_iou
        ));
    }
    out
}

/// Table of AP reports for every stage of `model` and for the classifier
/// ensembles on stages 2 and up.
///
/// Row `t` scores stage `t`'s output boxes with its own classifier. Row
/// `1~t` scores the same boxes with the mean posterior of classifiers
/// `1..=t`, all evaluated on the boxes entering stage `t`.
pub fn stage_report(
    model: &CascadeModel,
    scenes: &[Scene],
    cfg: &InferenceConfig,
) -> Vec<StageRow> {
    let n = model.n_stages();
    let traces: Vec<InferenceTrace> = scenes
        .iter()
        .map(|s| run_cascade(model, s, &s.proposals, cfg))
        .collect();
    let gts = ground_truth_set(scenes);

    let evaluate = |pick: &dyn Fn(&InferenceTrace) -> Vec<Vec<f64>>, t: usize| {
        let dets: Vec<Detection> = traces
            .iter()
            .flat_map(|tr| detections_from(tr.image_id, &tr.stage_outputs[t], &pick(tr), cfg))
            .collect();
        coco_ap(&dets, &gts)
    };

    let mut rows = Vec::with_capacity(2 * n - 1);
    for t in 0..n {
        rows.push(StageRow {
            label: (t + 1).to_string(),
            report: evaluate(&|tr| tr.posteriors[t].clone(), t),
        });
    }
    for t in 1..n {
        rows.push(StageRow {
            label: format!("1~{}", t + 1),
            report: evaluate(&|tr| ensemble_scores_at(tr, t), t),
        });
    }
    rows
}

/// Input and output IoU of every proposal that overlaps an object, after one
/// application of `stage`'s regressor.
pub fn localization_pairs(
    stage: &StageModel,
    features: &FeatureConfig,
    scenes: &[Scene],
) -> Vec<(f64, f64)> {
    let mut pairs = Vec::new();
    for s in scenes {
        for b in &s.proposals {
            let Some((j, before)) = best_match(b, &s.gts).filter(|&(_, o)| o > 0.0) else {
                continue;
            };
            let out = regress_box(stage, s, b, &featurize(b, s, features));
            pairs.push((before, iou(&out, &s.gts[j].bbox)));
        }
    }
    pairs
}

/// Mean output IoU per input-IoU bin for one regressor.
pub fn localization_curve(
    stage: &StageModel,
    features: &FeatureConfig,
    scenes: &[Scene],
    bin_width: f64,
) -> Result<Vec<CurvePoint>> {
    if !(bin_width > 0.0 && bin_width <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "bin_width must lie in (0, 1], got {bin_width}"
        )));
    }
    Ok(bin_curve(
        &localization_pairs(stage, features, scenes),
        bin_width,
    ))
}

pub mod oracle {
    //! Exhaustive re-derivation of AP used to cross-check [`super::average_precision`].
    //!
    //! Shares no code with the main path: its own matching loop, an explicit
    //! precision/recall table with one row per score cut-off, and a maximum
    //! over every qualifying cut-off for each recall level.

    use std::collections::BTreeSet;

    use super::{Detection, GroundTruthSet};
    use crate::error::{Error, Result};
    use crate::geometry::BBox;

    /// Largest number of detections per image the oracle accepts.
    pub const MAX_DETECTIONS_PER_IMAGE: usize = 12;

    fn overlap(a: &BBox, b: &BBox) -> f64 {
        let left = (a.cx - a.w / 2.0).max(b.cx - b.w / 2.0);
        let right = (a.cx + a.w / 2.0).min(b.cx + b.w / 2.0);
        let top = (a.cy - a.h / 2.0).max(b.cy - b.h / 2.0);
        let bottom = (a.cy + a.h / 2.0).min(b.cy + b.h / 2.0);
        if right <= left || bottom <= top {
            return 0.0;
        }
        let inter = (right - left) * (bottom - top);
        let area_a =
            ((a.cx + a.w / 2.0) - (a.cx - a.w / 2.0)) * ((a.cy + a.h / 2.0) - (a.cy - a.h / 2.0));
        let area_b =
            ((b.cx + b.w / 2.0) - (b.cx - b.w / 2.0)) * ((b.cy + b.h / 2.0) - (b.cy - b.h / 2.0));
        (inter / (area_a + area_b - inter)).clamp(0.0, 1.0)
    }

    /// Rank of detection `a` relative to `b`: true when `a` is visited first.
    fn before(dets: &[Detection], a: usize, b: usize) -> bool {
        dets[a].score > dets[b].score || (dets[a].score == dets[b].score && a < b)
    }

    /// Class-averaged AP at matching threshold `iou_t`, computed exhaustively.
    pub fn brute_force_ap_oracle(
        dets: &[Detection],
        gts: &GroundTruthSet,
        iou_t: f64,
    ) -> Result<f64> {
        for image_id in gts.keys() {
            let n = dets.iter().filter(|d| d.image_id == *image_id).count();
            if n > MAX_DETECTIONS_PER_IMAGE {
                return Err(Error::OracleTooLarge(n));
            }
        }

        // TP flags, by selection sort over each (image, class) group
        let mut is_tp = vec![false; dets.len()];
        for (image_id, image_gts) in gts {
            let classes: BTreeSet<usize> = dets
                .iter()
                .filter(|d| d.image_id == *image_id)
                .map(|d| d.class_id)
                .collect();
            for class_id in classes {
                let mut pending: Vec<usize> = (0..dets.len())
                    .filter(|&i| dets[i].image_id == *image_id && dets[i].class_id == class_id)
                    .collect();
                let mut used = vec![false; image_gts.len()];
                while !pending.is_empty() {
                    let mut pick = 0;
                    for p in 1..pending.len() {
                        if before(dets, pending[p], pending[pick]) {
                            pick = p;
                        }
                    }
                    let d = pending.remove(pick);
                    let mut choice: Option<usize> = None;
                    let mut choice_iou = -1.0;
                    for (j, g) in image_gts.iter().enumerate() {
                        if used[j] || g.class_id != class_id {
                            continue;
                        }
                        let o = overlap(&dets[d].bbox, &g.bbox);
                        if o >= iou_t && o > choice_iou {
                            choice = Some(j);
                            choice_iou = o;
                        }
                    }
                    if let Some(j) = choice {
                        used[j] = true;
                        is_tp[d] = true;
                    }
                }
            }
        }

        let classes: BTreeSet<usize> = gts.values().flatten().map(|g| g.class_id).collect();
        if classes.is_empty() {
            return Ok(0.0);
        }
        let mut total = 0.0;
        for &class_id in &classes {
            let n_gt = gts
                .values()
                .flatten()
                .filter(|g| g.class_id == class_id)
                .count();
            let members: Vec<usize> = (0..dets.len())
                .filter(|&i| dets[i].class_id == class_id && gts.contains_key(&dets[i].image_id))
                .collect();
            // one row per cut-off: (true positives, detections kept)
            let mut table: Vec<(usize, usize)> = Vec::new();
            for &cut in &members {
                let kept: Vec<usize> = members
                    .iter()
                    .copied()
                    .filter(|&i| i == cut || before(dets, i, cut))
                    .collect();
                let tps = kept.iter().filter(|&&i| is_tp[i]).count();
                table.push((tps, kept.len()));
            }
            let mut ap = 0.0;
            for r in 0..=100usize {
                let mut best = 0.0f64;
                for &(tps, kept) in &table {
                    if 100 * tps >= r * n_gt {
                        let p = tps as f64 / kept as f64;
                        if p > best {
                            best = p;
                        }
                    }
                }
                ap += best;
            }
            total += ap / 101.0;
        }
        Ok(total / classes.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(cx: f64, cy: f64, w: f64, h: f64) -> BBox {
        BBox::new(cx, cy, w, h).unwrap()
    }

    fn one_gt() -> GroundTruthSet {
        let mut gts = GroundTruthSet::new();
        gts.insert(
            0,
            vec![GroundTruth {
                bbox: b(50.0, 50.0, 100.0, 10.0),
                class_id: 1,
            }],
        );
        gts
    }

    fn det(bbox: BBox, score: f64) -> Detection {
        Detection {
            image_id: 0,
            class_id: 1,
            bbox,
            score,
        }
    }

    /// Horizontal shift of a 100-wide box giving IoU `o` with the original.
    fn shift_for(o: f64) -> f64 {
        100.0 * (1.0 - o) / (1.0 + o)
    }

    #[test]
    fn matching_examples() {
        let gts = one_gt();
        let g = gts[&0][0].bbox;
        assert_eq!(match_detections(&[det(g, 1.0)], &gts, 0.5), vec![true]);
        assert_eq!(
            match_detections(&[det(g, 0.4), det(g, 0.9)], &gts, 0.5),
            vec![false, true]
        );
        let near = det(b(50.0 + shift_for(0.72), 50.0, 100.0, 10.0), 0.9);
        for t in coco_thresholds() {
            assert_eq!(
                match_detections(&[near], &gts, t),
                vec![t <= 0.70 + 1e-12],
                "t={t}"
            );
        }
    }

    #[test]
    fn wrong_class_never_matches() {
        let gts = one_gt();
        let mut d = det(gts[&0][0].bbox, 1.0);
        d.class_id = 2;
        assert_eq!(match_detections(&[d], &gts, 0.5), vec![false]);
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[true], 1), 1.0);
        assert_eq!(average_precision(&[false, true], 1), 0.5);
        assert_eq!(average_precision(&[true, false], 1), 1.0);
        assert_eq!(average_precision(&[], 0), 0.0);
        assert_eq!(average_precision(&[false], 0), 0.0);
        assert_eq!(average_precision(&[], 3), 0.0);
    }

    #[test]
    fn ap_half_recall() {
        // one of two objects found at precision 1: recall points 0..=50
        assert_eq!(average_precision(&[true], 2), 51.0 / 101.0);
    }

    #[test]
    fn coco_examples() {
        let gts = one_gt();
        let g = gts[&0][0].bbox;
        let perfect = coco_ap(&[det(g, 1.0)], &gts);
        assert!(perfect.per_threshold.iter().all(|&(_, ap)| ap == 1.0));
        assert_eq!(perfect.mean_ap, 1.0);

        let near = det(b(50.0 + shift_for(0.72), 50.0, 100.0, 10.0), 0.9);
        assert_eq!(coco_ap(&[near], &gts).mean_ap, 0.5);

        let none = coco_ap(&[], &gts);
        assert!(none.per_threshold.iter().all(|&(_, ap)| ap == 0.0));
        assert_eq!(none.per_threshold.len(), 10);
    }

    #[test]
    fn report_csv_format() {
        let r = ApReport::from_thresholds(vec![(0.5, 1.0), (0.55, 0.25)]);
        assert_eq!(r.mean_ap, 0.625);
        assert_eq!(
            r.to_csv(),
            "threshold,ap\n0.500000,1.000000\n0.550000,0.250000\nmean,0.625000\n"
        );
        assert_eq!(r.ap_at(0.55), Some(0.25));
    }

    #[test]
    fn stage_table_header() {
        let csv = rows_to_csv(&[]);
        assert_eq!(
            csv,
            "stage,ap,ap50,ap55,ap60,ap65,ap70,ap75,ap80,ap85,ap90,ap95\n"
        );
    }

    #[test]
    fn curve_binning() {
        let pts = bin_curve(&[(0.52, 0.6), (0.54, 0.7), (0.91, 0.95)], 0.05);
        assert_eq!(pts.len(), 2);
        assert_eq!(pts[0].count, 2);
        assert!((pts[0].mean_output_iou - 0.65).abs() < 1e-12);
        assert!((pts[1].bin_low - 0.9).abs() < 1e-12);
        let diagonal = bin_curve(&[(0.6, 0.6), (0.8, 0.8)], 0.1);
        assert!(diagonal
            .iter()
            .all(|p| p.mean_input_iou == p.mean_output_iou));
    }

    #[test]
    fn oracle_small_cases() {
        let gts = one_gt();
        let g = gts[&0][0].bbox;
        assert_eq!(
            oracle::brute_force_ap_oracle(&[], &GroundTruthSet::new(), 0.5).unwrap(),
            0.0
        );
        assert_eq!(ap_at_threshold(&[], &GroundTruthSet::new(), 0.5), 0.0);
        assert_eq!(
            oracle::brute_force_ap_oracle(&[det(g, 1.0)], &gts, 0.5).unwrap(),
            1.0
        );
        assert_eq!(ap_at_threshold(&[det(g, 1.0)], &gts, 0.5), 1.0);
        let crowd = vec![det(g, 0.5); 13];
        assert!(oracle::brute_force_ap_oracle(&crowd, &gts, 0.5).is_err());
    }
}
