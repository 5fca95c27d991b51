//! IoU-threshold labeling, minibatch sampling, target statistics and IoU
//! histograms.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{encode_delta, iou, BBox, Delta, NormStats};

/// Lower bound on every component of the standard deviation returned by
/// [`compute_stats`].
pub const STD_FLOOR: f64 = 1e-4;

/// Foreground fraction of a stage-1 minibatch.
pub const DEFAULT_FG_FRACTION: f64 = 0.25;

/// An annotated object. Class ids start at 1; 0 is background.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub bbox: BBox,
    pub class_id: usize,
}

/// A box together with the label it receives at some IoU threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledSample {
    pub bbox: BBox,
    /// 0 for background, otherwise the class of `matched_gt`.
    pub label: usize,
    pub matched_gt: Option<usize>,
    /// IoU with the best-overlapping ground truth (0 when there is none).
    pub iou: f64,
    /// Raw (unnormalized) offset to the matched ground truth.
    pub target: Option<Delta>,
}

impl LabeledSample {
    pub fn is_positive(&self) -> bool {
        self.label > 0
    }
}

/// Index and IoU of the ground truth overlapping `b` the most. Ties go to the
/// lowest index. `None` when `gts` is empty.
pub fn best_match(b: &BBox, gts: &[GroundTruth]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (j, gt) in gts.iter().enumerate() {
        let o = iou(b, &gt.bbox);
        match best {
            Some((_, bo)) if o <= bo => {}
            _ => best = Some((j, o)),
        }
    }
    best
}

/// Labels each proposal with the class of its argmax-IoU ground truth when
/// that IoU is at least `u`, and with background otherwise.
pub fn match_and_label(proposals: &[BBox], gts: &[GroundTruth], u: f64) -> Vec<LabeledSample> {
    proposals
        .iter()
        .map(|b| match best_match(b, gts) {
            Some((j, o)) if o >= u => LabeledSample {
                bbox: *b,
                label: gts[j].class_id,
                matched_gt: Some(j),
                iou: o,
                target: Some(encode_delta(b, &gts[j].bbox)),
            },
            found => LabeledSample {
                bbox: *b,
                label: 0,
                matched_gt: None,
                iou: found.map_or(0.0, |(_, o)| o),
                target: None,
            },
        })
        .collect()
}

/// Draws up to `batch_size * fg_fraction` positives without replacement and
/// fills the rest of the batch with negatives. When negatives run out the
/// batch is simply smaller; when positives run out, negatives take their
/// place.
///
/// The returned samples keep their original relative order.
pub fn sample_minibatch<R: Rng + ?Sized>(
    samples: &[LabeledSample],
    batch_size: usize,
    fg_fraction: f64,
    rng: &mut R,
) -> Result<Vec<LabeledSample>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
    }
    if !(fg_fraction > 0.0 && fg_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "fg_fraction must lie in (0, 1), got {fg_fraction}"
        )));
    }
    let (mut pos, mut neg): (Vec<usize>, Vec<usize>) =
        (0..samples.len()).partition(|&i| samples[i].is_positive());

    let fg_quota = (batch_size as f64 * fg_fraction).floor() as usize;
    let n_pos = pos.len().min(fg_quota);
    let n_neg = neg.len().min(batch_size - n_pos);

    pos.shuffle(rng);
    neg.shuffle(rng);
    let mut chosen: Vec<usize> = pos[..n_pos].iter().chain(&neg[..n_neg]).copied().collect();
    chosen.sort_unstable();
    Ok(chosen.into_iter().map(|i| samples[i]).collect())
}

/// Mean and population standard deviation of the raw targets of positives
/// whose IoU is at least `u`. Samples below `u` are treated as outliers and
/// left out.
pub fn compute_stats(samples: &[LabeledSample], u: f64) -> Result<NormStats> {
    let targets: Vec<[f64; 4]> = samples
        .iter()
        .filter(|s| s.is_positive() && s.iou >= u)
        .filter_map(|s| s.target.map(Delta::to_array))
        .collect();
    if targets.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "{} positives with IoU >= {u}, need at least 2",
            targets.len()
        )));
    }
    let n = targets.len() as f64;
    let mut mean = [0.0; 4];
    for t in &targets {
        for (m, v) in mean.iter_mut().zip(t) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);

    let mut var = [0.0; 4];
    for t in &targets {
        for k in 0..4 {
            let d = t[k] - mean[k];
            var[k] += d * d;
        }
    }
    let std = var.map(|v| (v / n).sqrt().max(STD_FLOOR));
    NormStats::new(mean, std)
}

/// Fixed-width IoU histogram over `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct IouHistogram {
    pub bin_width: f64,
    pub counts: Vec<usize>,
    /// `(threshold, percentage of samples with IoU >= threshold)`.
    pub above: Vec<(f64, f64)>,
}

impl IouHistogram {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// `(bin_low, bin_high)` of bin `i`.
    pub fn bin_edges(&self, i: usize) -> (f64, f64) {
        let lo = i as f64 * self.bin_width;
        let hi = ((i + 1) as f64 * self.bin_width).min(1.0);
        (lo, hi)
    }

    /// Index of the fullest bin; the lowest one on ties.
    pub fn mode_bin(&self) -> Option<usize> {
        let max = *self.counts.iter().max()?;
        if max == 0 {
            return None;
        }
        self.counts.iter().position(|&c| c == max)
    }

    /// `bin_low,bin_high,count` rows, then `threshold,percent_above` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_low,bin_high,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            let (lo, hi) = self.bin_edges(i);
            out.push_str(&format!("{lo:.6},{hi:.6},{c}\n"));
        }
        out.push_str("threshold,percent_above\n");
        for (t, p) in &self.above {
            out.push_str(&format!("{t:.6},{p:.6}\n"));
        }
        out
    }
}

pub fn iou_histogram(ious: &[f64], bin_width: f64, thresholds: &[f64]) -> Result<IouHistogram> {
    if !(bin_width > 0.0 && bin_width <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "bin_width must lie in (0, 1], got {bin_width}"
        )));
    }
    let n_bins = (1.0 / bin_width - 1e-9).ceil() as usize;
    let mut counts = vec![0usize; n_bins];
    for &o in ious {
        let i = ((o / bin_width).floor() as usize).min(n_bins - 1);
        counts[i] += 1;
    }
    let above = thresholds
        .iter()
        .map(|&t| {
            let pct = if ious.is_empty() {
                0.0
            } else {
                100.0 * ious.iter().filter(|&&o| o >= t).count() as f64 / ious.len() as f64
            };
            (t, pct)
        })
        .collect();
    Ok(IouHistogram {
        bin_width,
        counts,
        above,
    })
}

/// Histogram of the IoUs stored on `samples`.
pub fn sample_iou_histogram(
    samples: &[LabeledSample],
    bin_width: f64,
    thresholds: &[f64],
) -> Result<IouHistogram> {
    let ious: Vec<f64> = samples.iter().map(|s| s.iou).collect();
    iou_histogram(&ious, bin_width, thresholds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn b(cx: f64, cy: f64, w: f64, h: f64) -> BBox {
        BBox::new(cx, cy, w, h).unwrap()
    }

    fn gt(bbox: BBox, class_id: usize) -> GroundTruth {
        GroundTruth { bbox, class_id }
    }

    fn positive(iou: f64, target: [f64; 4]) -> LabeledSample {
        LabeledSample {
            bbox: b(0.0, 0.0, 1.0, 1.0),
            label: 1,
            matched_gt: Some(0),
            iou,
            target: Some(Delta::from_array(target)),
        }
    }

    fn negative() -> LabeledSample {
        LabeledSample {
            bbox: b(0.0, 0.0, 1.0, 1.0),
            label: 0,
            matched_gt: None,
            iou: 0.0,
            target: None,
        }
    }

    #[test]
    fn labels_follow_threshold() {
        let g = b(50.0, 50.0, 100.0, 10.0);
        // horizontal shift s keeps IoU = (100 - s) / (100 + s)
        let shift_for = |o: f64| 100.0 * (1.0 - o) / (1.0 + o);
        let p60 = b(50.0 + shift_for(0.6), 50.0, 100.0, 10.0);
        let p49 = b(50.0 + shift_for(0.49), 50.0, 100.0, 10.0);
        let out = match_and_label(&[p60, p49], &[gt(g, 3)], 0.5);
        assert!((out[0].iou - 0.6).abs() < 1e-12);
        assert_eq!(out[0].label, 3);
        assert_eq!(out[0].matched_gt, Some(0));
        assert_eq!(out[0].target, Some(encode_delta(&p60, &g)));
        assert_eq!(out[1].label, 0);
        assert!(out[1].target.is_none());
    }

    #[test]
    fn no_ground_truth_means_background() {
        let out = match_and_label(&[b(5.0, 5.0, 2.0, 2.0)], &[], 0.5);
        assert_eq!(out[0].label, 0);
        assert_eq!(out[0].iou, 0.0);
        assert!(out[0].target.is_none() && out[0].matched_gt.is_none());
    }

    #[test]
    fn equal_iou_tie_goes_to_lower_index() {
        let p = b(50.0, 50.0, 10.0, 10.0);
        let out = match_and_label(&[p], &[gt(p, 2), gt(p, 1)], 0.5);
        assert_eq!(out[0].matched_gt, Some(0));
        assert_eq!(out[0].label, 2);
    }

    #[test]
    fn minibatch_counts() {
        let mut samples = vec![positive(0.8, [0.0; 4]); 200];
        samples.extend(vec![negative(); 800]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = sample_minibatch(&samples, 128, 0.25, &mut rng).unwrap();
        assert_eq!(batch.iter().filter(|s| s.is_positive()).count(), 32);
        assert_eq!(batch.iter().filter(|s| !s.is_positive()).count(), 96);

        let mut scarce = vec![positive(0.8, [0.0; 4]); 10];
        scarce.extend(vec![negative(); 800]);
        let batch = sample_minibatch(&scarce, 128, 0.25, &mut rng).unwrap();
        assert_eq!(batch.iter().filter(|s| s.is_positive()).count(), 10);
        assert_eq!(batch.len(), 128);

        assert!(sample_minibatch(&[], 128, 0.25, &mut rng)
            .unwrap()
            .is_empty());
        assert!(sample_minibatch(&scarce, 0, 0.25, &mut rng).is_err());
        assert!(sample_minibatch(&scarce, 8, 1.0, &mut rng).is_err());
    }

    #[test]
    fn minibatch_is_seed_deterministic() {
        let samples: Vec<LabeledSample> = (0..500)
            .map(|i| {
                if i % 3 == 0 {
                    positive(0.5 + i as f64 / 1000.0, [i as f64, 0.0, 0.0, 0.0])
                } else {
                    negative()
                }
            })
            .collect();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sample_minibatch(&samples, 64, 0.25, &mut rng).unwrap()
        };
        assert_eq!(draw(9), draw(9));
        assert_ne!(draw(9), draw(10));
    }

    #[test]
    fn stats_examples() {
        let same = vec![positive(0.9, [0.2, -0.1, 0.05, 0.0]); 5];
        let s = compute_stats(&same, 0.5).unwrap();
        assert_eq!(s.mean, [0.2, -0.1, 0.05, 0.0]);
        assert_eq!(s.std, [STD_FLOOR; 4]);

        let pair = vec![
            positive(0.9, [0.1, 0.0, 0.0, 0.0]),
            positive(0.9, [-0.1, 0.0, 0.0, 0.0]),
        ];
        let s = compute_stats(&pair, 0.5).unwrap();
        assert_eq!(s.mean[0], 0.0);
        assert!((s.std[0] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn stats_drop_samples_below_threshold() {
        let samples = vec![
            positive(0.9, [0.1, 0.0, 0.0, 0.0]),
            positive(0.9, [-0.1, 0.0, 0.0, 0.0]),
            positive(0.55, [5.0, 5.0, 5.0, 5.0]),
            negative(),
        ];
        let s = compute_stats(&samples, 0.7).unwrap();
        assert_eq!(s.mean[0], 0.0);
        assert!(compute_stats(&samples, 0.95).is_err());
        assert!(compute_stats(&[negative(), negative()], 0.5).is_err());
    }

    #[test]
    fn histogram_examples() {
        let h = iou_histogram(&[1.0; 7], 0.1, &[0.5, 0.9]).unwrap();
        assert_eq!(h.counts.len(), 10);
        assert_eq!(h.counts[9], 7);
        assert_eq!(h.total(), 7);
        assert_eq!(h.above, vec![(0.5, 100.0), (0.9, 100.0)]);

        let h = iou_histogram(&[], 0.1, &[0.5]).unwrap();
        assert!(h.counts.iter().all(|&c| c == 0));
        assert_eq!(h.above, vec![(0.5, 0.0)]);
        assert_eq!(h.mode_bin(), None);

        let uniform: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
        let h = iou_histogram(&uniform, 0.1, &[0.5]).unwrap();
        assert_eq!(h.above[0].1, 60.0);

        assert!(iou_histogram(&uniform, 0.0, &[]).is_err());
        assert!(iou_histogram(&uniform, 1.5, &[]).is_err());
    }

    #[test]
    fn histogram_csv_layout() {
        let h = iou_histogram(&[0.3, 0.7], 0.5, &[0.5]).unwrap();
        assert_eq!(
            h.to_csv(),
            "bin_low,bin_high,count\n0.000000,0.500000,1\n0.500000,1.000000,1\n\
             threshold,percent_above\n0.500000,50.000000\n"
        );
    }
}
