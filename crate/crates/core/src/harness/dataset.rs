//! Seeded synthetic scenes: uniformly placed ground truths, Gaussian-jittered
//! proposals around each of them, and background boxes that overlap no
//! object by more than [`BACKGROUND_MAX_IOU`].

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::assign::{best_match, GroundTruth};
use crate::error::{Error, Result};
use crate::geometry::{clip_box, BBox};
use crate::seed::derive_seed;

/// Background boxes are rejection-sampled below this IoU with every object.
pub const BACKGROUND_MAX_IOU: f64 = 0.3;

/// Attempts per box before generation gives up.
const MAX_ATTEMPTS: usize = 1000;

/// Generated coordinates are snapped to multiples of this (a power of two) so
/// that center and corner forms convert into each other exactly.
pub const COORD_GRID: f64 = 1.0 / 1024.0;

/// One synthetic image: its ground truths and the proposals fed to the
/// detection head.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image_id: u64,
    pub width: f64,
    pub height: f64,
    pub gts: Vec<GroundTruth>,
    pub proposals: Vec<BBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub n_images: usize,
    pub n_classes: usize,
    /// Inclusive range of objects per image.
    pub gts_per_image: [usize; 2],
    pub proposals_per_gt: usize,
    /// Std of the center jitter, as a fraction of the object's half-width
    /// and half-height.
    pub jitter_center_std: f64,
    /// Std of the log-size jitter.
    pub jitter_logsize_std: f64,
    pub background_per_image: usize,
    pub image_width: f64,
    pub image_height: f64,
    /// Object side lengths are log-uniform in `[min_size, max_size]`.
    pub min_size: f64,
    pub max_size: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_images: 500,
            n_classes: 3,
            gts_per_image: [1, 4],
            proposals_per_gt: 16,
            jitter_center_std: 0.35,
            jitter_logsize_std: 0.30,
            background_per_image: 16,
            image_width: 640.0,
            image_height: 480.0,
            min_size: 32.0,
            max_size: 192.0,
            seed: 42,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.n_classes == 0 {
            return bad("n_classes must be >= 1");
        }
        if self.gts_per_image[0] > self.gts_per_image[1] {
            return bad("gts_per_image must be an increasing [min, max] pair");
        }
        if !(self.jitter_center_std >= 0.0 && self.jitter_logsize_std >= 0.0) {
            return bad("jitter stds must be >= 0");
        }
        if !(self.image_width > 0.0 && self.image_height > 0.0) {
            return bad("image size must be positive");
        }
        if !(self.min_size > 0.0 && self.min_size <= self.max_size) {
            return bad("object sizes must satisfy 0 < min_size <= max_size");
        }
        Ok(())
    }
}

fn snap(v: f64) -> f64 {
    (v / COORD_GRID).round() * COORD_GRID
}

/// Snaps a box to [`COORD_GRID`], keeping it non-degenerate.
fn snapped(b: &BBox) -> Option<BBox> {
    let w = snap(b.w);
    let h = snap(b.h);
    BBox::new(snap(b.cx), snap(b.cy), w, h).ok()
}

fn log_uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        (rng.random_range(lo.ln()..hi.ln())).exp()
    }
}

fn generate_scene(cfg: &DatasetConfig, image_id: u64) -> Result<Scene> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[image_id]));
    let (width, height) = (cfg.image_width, cfg.image_height);
    let fail = |reason: String| Error::Generation { image_id, reason };

    let n_gts = rng.random_range(cfg.gts_per_image[0]..=cfg.gts_per_image[1]);
    let mut gts = Vec::with_capacity(n_gts);
    for _ in 0..n_gts {
        let mut placed = None;
        for _ in 0..MAX_ATTEMPTS {
            let w = log_uniform(&mut rng, cfg.min_size, cfg.max_size);
            let h = log_uniform(&mut rng, cfg.min_size, cfg.max_size);
            if w >= width || h >= height {
                continue;
            }
            let cx = rng.random_range(0.5 * w..width - 0.5 * w);
            let cy = rng.random_range(0.5 * h..height - 0.5 * h);
            if let Some(b) = BBox::new(cx, cy, w, h).ok().and_then(|b| snapped(&b)) {
                placed = Some(b);
                break;
            }
        }
        let bbox = placed.ok_or_else(|| fail("object does not fit in the image".into()))?;
        let class_id = rng.random_range(1..=cfg.n_classes);
        gts.push(GroundTruth { bbox, class_id });
    }

    let mut proposals = Vec::with_capacity(n_gts * cfg.proposals_per_gt + cfg.background_per_image);
    for g in &gts {
        let g = g.bbox;
        for _ in 0..cfg.proposals_per_gt {
            let mut made = None;
            for _ in 0..MAX_ATTEMPTS {
                let zx: f64 = StandardNormal.sample(&mut rng);
                let zy: f64 = StandardNormal.sample(&mut rng);
                let zw: f64 = StandardNormal.sample(&mut rng);
                let zh: f64 = StandardNormal.sample(&mut rng);
                let raw = BBox {
                    cx: g.cx + zx * cfg.jitter_center_std * g.w / 2.0,
                    cy: g.cy + zy * cfg.jitter_center_std * g.h / 2.0,
                    w: g.w * (zw * cfg.jitter_logsize_std).exp(),
                    h: g.h * (zh * cfg.jitter_logsize_std).exp(),
                };
                if let Some(b) = clip_box(&raw, width, height).and_then(|b| snapped(&b)) {
                    made = Some(b);
                    break;
                }
            }
            proposals.push(made.ok_or_else(|| fail("jittered proposal left the image".into()))?);
        }
    }

    for _ in 0..cfg.background_per_image {
        let mut made = None;
        for _ in 0..MAX_ATTEMPTS {
            let w = log_uniform(&mut rng, cfg.min_size, cfg.max_size).min(width);
            let h = log_uniform(&mut rng, cfg.min_size, cfg.max_size).min(height);
            let cx = rng.random_range(0.0..=width - w) + 0.5 * w;
            let cy = rng.random_range(0.0..=height - h) + 0.5 * h;
            let Some(b) = BBox::new(cx, cy, w, h).ok().and_then(|b| snapped(&b)) else {
                continue;
            };
            if best_match(&b, &gts).is_none_or(|(_, o)| o < BACKGROUND_MAX_IOU) {
                made = Some(b);
                break;
            }
        }
        proposals.push(made.ok_or_else(|| fail("no room for a background box".into()))?);
    }

    Ok(Scene {
        image_id,
        width,
        height,
        gts,
        proposals,
    })
}

/// Deterministic dataset of `cfg.n_images` scenes with ids `0..n_images`.
/// Each scene draws from its own stream, so a scene does not depend on how
/// many others were generated.
pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Vec<Scene>> {
    cfg.validate()?;
    (0..cfg.n_images as u64)
        .map(|id| generate_scene(cfg, id))
        .collect()
}

/// Splits off the last `holdout` scenes for evaluation. When `holdout` is 0
/// or not smaller than the dataset, both halves are the whole dataset.
pub fn split(scenes: &[Scene], holdout: usize) -> (&[Scene], &[Scene]) {
    if holdout == 0 || holdout >= scenes.len() {
        (scenes, scenes)
    } else {
        scenes.split_at(scenes.len() - holdout)
    }
}

/// IoU of every proposal with its best-matching ground truth, restricted to
/// proposals that overlap some object.
pub fn matched_proposal_ious(scenes: &[Scene]) -> Vec<f64> {
    scenes
        .iter()
        .flat_map(|s| {
            s.proposals
                .iter()
                .filter_map(|p| best_match(p, &s.gts).map(|(_, o)| o))
                .filter(|&o| o > 0.0)
        })
        .collect()
}
