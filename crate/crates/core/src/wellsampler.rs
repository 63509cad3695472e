//! Cross-well anchor/target sampling, multi-view augmentation,
//! patchification and anchor masking.
//!
//! A training row pairs two wells of one perturbation: the anchor well is
//! expanded into one global crop plus focal crops, each flipped at random
//! and masked; the target well gets a single global-crop view, unmasked.
//! In single-well mode both roles are served by the same well, which is
//! the ablation baseline.

use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::hcsdata::{DataError, DatasetManifest, PerturbationId, WellRecord};
use crate::ndtensor::Tensor;
use crate::streams::stream_rng;

#[derive(Debug, Error)]
pub enum SampleError {
    #[error("invalid augment config: {0}")]
    Config(String),
    #[error("perturbation {id} has {wells} well(s), cross-well sampling needs 2")]
    NotEnoughWells { id: String, wells: usize },
    #[error("no sampleable perturbations in this batch")]
    EmptyBatch,
    #[error(transparent)]
    Data(#[from] DataError),
}

pub type Result<T> = std::result::Result<T, SampleError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplingMode {
    CrossWell,
    SingleWell,
}

impl SamplingMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SamplingMode::CrossWell => "cross-well",
            SamplingMode::SingleWell => "single-well",
        }
    }
}

impl FromStr for SamplingMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "cross-well" => Ok(SamplingMode::CrossWell),
            "single-well" => Ok(SamplingMode::SingleWell),
            other => Err(format!("unknown mode {other:?}, expected cross-well or single-well")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AugmentConfig {
    pub view_h: usize,
    pub view_w: usize,
    /// Area-fraction range for the global crop, within (0, 1].
    pub global_scale: (f64, f64),
    /// Area-fraction range for focal crops.
    pub focal_scale: (f64, f64),
    pub flip_prob: f64,
    pub mask_ratio: f64,
    pub anchor_views: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            view_h: 64,
            view_w: 64,
            global_scale: (0.3, 1.0),
            focal_scale: (0.05, 0.3),
            flip_prob: 0.5,
            mask_ratio: 0.15,
            anchor_views: 11,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let c = |ok: bool, msg: &str| if ok { Ok(()) } else { Err(SampleError::Config(msg.to_string())) };
        c(self.view_h >= 1 && self.view_w >= 1, "view size must be positive")?;
        for (lo, hi) in [self.global_scale, self.focal_scale] {
            c(lo > 0.0 && hi <= 1.0 && lo <= hi, "scale ranges must lie in (0, 1]")?;
        }
        c((0.0..=1.0).contains(&self.flip_prob), "flip_prob must be in [0, 1]")?;
        c((0.0..1.0).contains(&self.mask_ratio), "mask_ratio must be in [0, 1)")?;
        c(self.anchor_views >= 1, "anchor_views must be >= 1")?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AnchorTargetPair {
    pub perturbation: PerturbationId,
    pub anchor_well: WellRecord,
    pub target_well: WellRecord,
}

/// Draws an anchor/target pair for one perturbation.
///
/// Cross-well mode draws two distinct wells uniformly without replacement;
/// single-well mode draws one well and uses it for both roles.
pub fn sample_pair(
    pert: &str,
    manifest: &DatasetManifest,
    rng: &mut ChaCha8Rng,
    mode: SamplingMode,
) -> Result<AnchorTargetPair> {
    let entry = manifest
        .perturbation(pert)
        .ok_or_else(|| DataError::Integrity(format!("unknown perturbation {pert}")))?;
    let m = entry.record_indices.len();
    match mode {
        SamplingMode::CrossWell => {
            if m < 2 {
                return Err(SampleError::NotEnoughWells { id: pert.to_string(), wells: m });
            }
            let first = rng.gen_range(0..m);
            let mut second = rng.gen_range(0..m - 1);
            if second >= first {
                second += 1;
            }
            let anchor = manifest.records[entry.record_indices[first]].clone();
            let target = manifest.records[entry.record_indices[second]].clone();
            Ok(AnchorTargetPair { perturbation: anchor.perturbation.clone(), anchor_well: anchor, target_well: target })
        }
        SamplingMode::SingleWell => {
            if m < 1 {
                return Err(SampleError::NotEnoughWells { id: pert.to_string(), wells: m });
            }
            let idx = rng.gen_range(0..m);
            let well = manifest.records[entry.record_indices[idx]].clone();
            Ok(AnchorTargetPair {
                perturbation: well.perturbation.clone(),
                anchor_well: well.clone(),
                target_well: well,
            })
        }
    }
}

/// Perturbations sampleable in `mode`, plus the ones that would be skipped.
pub fn eligible_perturbations(manifest: &DatasetManifest, mode: SamplingMode) -> (Vec<String>, Vec<String>) {
    let needed = match mode {
        SamplingMode::CrossWell => 2,
        SamplingMode::SingleWell => 1,
    };
    let mut eligible = Vec::new();
    let mut skipped = Vec::new();
    for id in manifest.perturbation_ids() {
        if manifest.well_count(id) >= needed {
            eligible.push(id.clone());
        } else {
            skipped.push(id.clone());
        }
    }
    (eligible, skipped)
}

fn bilinear_resize(src: &[f32], channels: usize, sh: usize, sw: usize, dh: usize, dw: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; channels * dh * dw];
    let scale_y = sh as f32 / dh as f32;
    let scale_x = sw as f32 / dw as f32;
    for c in 0..channels {
        let plane = &src[c * sh * sw..(c + 1) * sh * sw];
        let dst = &mut out[c * dh * dw..(c + 1) * dh * dw];
        for y in 0..dh {
            let sy = ((y as f32 + 0.5) * scale_y - 0.5).max(0.0);
            let y0 = (sy as usize).min(sh - 1);
            let y1 = (y0 + 1).min(sh - 1);
            let fy = sy - y0 as f32;
            for x in 0..dw {
                let sx = ((x as f32 + 0.5) * scale_x - 0.5).max(0.0);
                let x0 = (sx as usize).min(sw - 1);
                let x1 = (x0 + 1).min(sw - 1);
                let fx = sx - x0 as f32;
                let v00 = plane[y0 * sw + x0];
                let v01 = plane[y0 * sw + x1];
                let v10 = plane[y1 * sw + x0];
                let v11 = plane[y1 * sw + x1];
                let top = v00 + (v01 - v00) * fx;
                let bot = v10 + (v11 - v10) * fx;
                dst[y * dw + x] = top + (bot - top) * fy;
            }
        }
    }
    out
}

fn flip_view(view: &mut [f32], channels: usize, h: usize, w: usize, horizontal: bool, vertical: bool) {
    for c in 0..channels {
        let plane = &mut view[c * h * w..(c + 1) * h * w];
        if horizontal {
            for y in 0..h {
                plane[y * w..(y + 1) * w].reverse();
            }
        }
        if vertical {
            for y in 0..h / 2 {
                for x in 0..w {
                    plane.swap(y * w + x, (h - 1 - y) * w + x);
                }
            }
        }
    }
}

/// One random-resized-crop view with independent horizontal/vertical flips.
/// Draw order per view is fixed: scale, top, left, flip-h, flip-v.
fn crop_view(img: &Tensor<f32>, scale: (f64, f64), cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let (c, sh, sw) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let s = if scale.0 == scale.1 { scale.0 } else { rng.gen_range(scale.0..=scale.1) };
    let side = s.sqrt();
    let ch = ((side * sh as f64).round() as usize).clamp(1, sh);
    let cw = ((side * sw as f64).round() as usize).clamp(1, sw);
    let top = rng.gen_range(0..=sh - ch);
    let left = rng.gen_range(0..=sw - cw);
    let mut window = vec![0.0f32; c * ch * cw];
    for ci in 0..c {
        for y in 0..ch {
            let src = (ci * sh + top + y) * sw + left;
            let dst = (ci * ch + y) * cw;
            window[dst..dst + cw].copy_from_slice(&img.data()[src..src + cw]);
        }
    }
    let mut view = bilinear_resize(&window, c, ch, cw, cfg.view_h, cfg.view_w);
    let flip_h = rng.gen::<f64>() < cfg.flip_prob;
    let flip_v = rng.gen::<f64>() < cfg.flip_prob;
    flip_view(&mut view, c, cfg.view_h, cfg.view_w, flip_h, flip_v);
    view
}

/// Builds the augmented views for one pair: anchor view 1 is a global crop,
/// views 2..V_a are focal crops, and the target gets a single global crop.
pub fn make_views(
    anchor_img: &Tensor<f32>,
    target_img: &Tensor<f32>,
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<Tensor<f32>>, Tensor<f32>)> {
    cfg.validate()?;
    for img in [anchor_img, target_img] {
        let (h, w) = (img.shape()[1], img.shape()[2]);
        if cfg.view_h > h || cfg.view_w > w {
            return Err(SampleError::Config(format!(
                "view size {}x{} exceeds source {}x{}",
                cfg.view_h, cfg.view_w, h, w
            )));
        }
    }
    let c = anchor_img.shape()[0];
    let view_shape = vec![c, cfg.view_h, cfg.view_w];
    let mut anchors = Vec::with_capacity(cfg.anchor_views);
    for v in 0..cfg.anchor_views {
        let scale = if v == 0 { cfg.global_scale } else { cfg.focal_scale };
        let data = crop_view(anchor_img, scale, cfg, rng);
        anchors.push(Tensor::from_vec(view_shape.clone(), data).map_err(DataError::Tensor)?);
    }
    let target_data = crop_view(target_img, cfg.global_scale, cfg, rng);
    let target = Tensor::from_vec(view_shape, target_data).map_err(DataError::Tensor)?;
    Ok((anchors, target))
}

/// Cuts a `(C, h, w)` view into `(h/p)*(w/p)` tokens of length `C*p*p`,
/// ordered row-major over the patch grid.
pub fn patchify(view: &Tensor<f32>, patch: usize) -> Result<Tensor<f32>> {
    let (c, h, w) = (view.shape()[0], view.shape()[1], view.shape()[2]);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(SampleError::Config(format!("view {h}x{w} not divisible by patch {patch}")));
    }
    let (gh, gw) = (h / patch, w / patch);
    let token_len = c * patch * patch;
    let mut tokens = vec![0.0f32; gh * gw * token_len];
    let data = view.data();
    for gy in 0..gh {
        for gx in 0..gw {
            let t = gy * gw + gx;
            let out = &mut tokens[t * token_len..(t + 1) * token_len];
            for ci in 0..c {
                for py in 0..patch {
                    let src = (ci * h + gy * patch + py) * w + gx * patch;
                    let dst = (ci * patch + py) * patch;
                    out[dst..dst + patch].copy_from_slice(&data[src..src + patch]);
                }
            }
        }
    }
    Tensor::from_vec(vec![gh * gw, token_len], tokens).map_err(|e| SampleError::Data(DataError::Tensor(e)))
}

/// Uniformly drops `floor(mask_ratio * n)` patch indices without
/// replacement; returns the kept indices in ascending order.
pub fn sample_keep_indices(n_patches: usize, mask_ratio: f64, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n_drop = (mask_ratio * n_patches as f64).floor() as usize;
    let mut indices: Vec<usize> = (0..n_patches).collect();
    // Partial Fisher-Yates: the first n_drop slots become the dropped set.
    for i in 0..n_drop {
        let j = rng.gen_range(i..n_patches);
        indices.swap(i, j);
    }
    let mut keep: Vec<usize> = indices[n_drop..].to_vec();
    keep.sort_unstable();
    keep
}

/// Patchifies and masks in one step: dropped patches are removed from the
/// token sequence, not zeroed. The target path uses `mask_ratio = 0`.
pub fn patchify_and_mask(
    view: &Tensor<f32>,
    patch: usize,
    mask_ratio: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor<f32>, Vec<usize>)> {
    let tokens = patchify(view, patch)?;
    let n = tokens.shape()[0];
    let keep = sample_keep_indices(n, mask_ratio, rng);
    let token_len = tokens.shape()[1];
    let mut kept = vec![0.0f32; keep.len() * token_len];
    for (r, &idx) in keep.iter().enumerate() {
        kept[r * token_len..(r + 1) * token_len]
            .copy_from_slice(&tokens.data()[idx * token_len..(idx + 1) * token_len]);
    }
    let kept =
        Tensor::from_vec(vec![keep.len(), token_len], kept).map_err(|e| SampleError::Data(DataError::Tensor(e)))?;
    Ok((kept, keep))
}

/// A collated training mini-batch.
#[derive(Debug, Clone)]
pub struct ViewBatch {
    /// `(B, V_a, C, h, w)` anchor views.
    pub anchors: Tensor<f32>,
    /// `(B, 1, C, h, w)` target views.
    pub targets: Tensor<f32>,
    /// Kept patch indices per `(row, anchor view)`; filled by [`mask_batch`].
    pub anchor_keeps: Vec<Vec<Vec<usize>>>,
    pub pert_ids: Vec<String>,
    /// `(batch, plate, well)` keys, for diagnostics.
    pub anchor_wells: Vec<(String, String, String)>,
    pub target_wells: Vec<(String, String, String)>,
    /// Perturbations that could not be sampled in this batch.
    pub skipped: Vec<String>,
}

impl ViewBatch {
    pub fn rows(&self) -> usize {
        self.pert_ids.len()
    }
}

/// Collates one mini-batch: for each perturbation, sample a pair and build
/// its views. Ineligible perturbations are skipped and reported; a batch
/// where everything was skipped is an error.
pub fn collate_minibatch(
    perts: &[String],
    manifest: &DatasetManifest,
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
    mode: SamplingMode,
) -> Result<ViewBatch> {
    cfg.validate()?;
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for pert in perts {
        match sample_pair(pert, manifest, rng, mode) {
            Ok(pair) => {
                let anchor_img = manifest.load_well_image(&pair.anchor_well)?;
                let target_img = manifest.load_well_image(&pair.target_well)?;
                let (anchor_views, target_view) = make_views(&anchor_img, &target_img, cfg, rng)?;
                rows.push((pair, anchor_views, target_view));
            }
            Err(SampleError::NotEnoughWells { id, .. }) => skipped.push(id),
            Err(e) => return Err(e),
        }
    }
    if rows.is_empty() {
        return Err(SampleError::EmptyBatch);
    }

    let b = rows.len();
    let c = rows[0].1[0].shape()[0];
    let (h, w) = (cfg.view_h, cfg.view_w);
    let view_len = c * h * w;
    let mut anchors = vec![0.0f32; b * cfg.anchor_views * view_len];
    let mut targets = vec![0.0f32; b * view_len];
    let mut pert_ids = Vec::with_capacity(b);
    let mut anchor_wells = Vec::with_capacity(b);
    let mut target_wells = Vec::with_capacity(b);
    for (r, (pair, views, target)) in rows.iter().enumerate() {
        for (v, view) in views.iter().enumerate() {
            let dst = (r * cfg.anchor_views + v) * view_len;
            anchors[dst..dst + view_len].copy_from_slice(view.data());
        }
        targets[r * view_len..(r + 1) * view_len].copy_from_slice(target.data());
        pert_ids.push(pair.perturbation.id.clone());
        anchor_wells.push(pair.anchor_well.well_key());
        target_wells.push(pair.target_well.well_key());
    }
    Ok(ViewBatch {
        anchors: Tensor::from_vec(vec![b, cfg.anchor_views, c, h, w], anchors).map_err(DataError::Tensor)?,
        targets: Tensor::from_vec(vec![b, 1, c, h, w], targets).map_err(DataError::Tensor)?,
        anchor_keeps: Vec::new(),
        pert_ids,
        anchor_wells,
        target_wells,
        skipped,
    })
}

/// Draws the per-view keep lists for a collated batch given the encoder's
/// patch size. Kept separate from collation so the same views can be
/// tokenized for any patch grid.
pub fn mask_batch(batch: &mut ViewBatch, patch: usize, mask_ratio: f64, rng: &mut ChaCha8Rng) -> Result<()> {
    let shape = batch.anchors.shape().to_vec();
    let (b, va, h, w) = (shape[0], shape[1], shape[3], shape[4]);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(SampleError::Config(format!("view {h}x{w} not divisible by patch {patch}")));
    }
    let n_patches = (h / patch) * (w / patch);
    batch.anchor_keeps = (0..b)
        .map(|_| (0..va).map(|_| sample_keep_indices(n_patches, mask_ratio, rng)).collect())
        .collect();
    Ok(())
}

/// Seeded shuffle of the eligible perturbations, partitioned into batches.
/// The last partial batch is kept.
pub fn epoch_plan(eligible: &[String], seed: u64, epoch: u64, batch_size: usize) -> Vec<Vec<String>> {
    let mut order: Vec<String> = eligible.to_vec();
    let mut rng = stream_rng(seed, "sample.epoch-shuffle", &[epoch]);
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}
