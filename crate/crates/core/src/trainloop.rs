//! Training orchestration: schedules, the step loop, checkpointing,
//! metrics logging, and the embedding-extraction pass.
//!
//! One epoch visits every eligible perturbation exactly once, in a seeded
//! shuffle partitioned into mini-batches. Each step collates a batch,
//! runs the target branch without gradients, runs the anchor branch on a
//! recording tape through the alignment loss, applies AdamW with the
//! scheduled learning rate and weight decay, and EMA-updates the target.
//! All schedules are keyed to global steps.

use std::path::{Path, PathBuf};

use thiserror::Error;

use std::cell::RefCell;
use std::rc::Rc;

use crate::hcsdata::{DataError, DatasetManifest};
use crate::msnloss::{self, EmaSchedule, LossConfig, MsnLossOutput, PrototypeBank};
use crate::ndtensor::{AdamWState, BufferPool, ParamSet, Tape, Tensor, TensorError, ValueId, adamw_step};
use crate::retrieval::{EmbeddingRow, EmbeddingTable, RetrievalError};
use crate::streams::stream_rng;
use crate::vitencoder::{self, EncoderConfig, EncoderWeights, bind_weights};
use crate::wellsampler::{
    AugmentConfig, SampleError, SamplingMode, ViewBatch, collate_minibatch, eligible_perturbations, epoch_plan,
    mask_batch, patchify,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    Config(String),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error("non-finite loss at step {step}; offending batch: {batch}")]
    NonFinite { step: u64, batch: String },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, TrainError>;

fn io_err(path: &Path, source: std::io::Error) -> TrainError {
    TrainError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub final_lr: f64,
    pub warmup_epochs: usize,
    pub wd_start: f64,
    pub wd_end: f64,
    pub ema: EmaSchedule,
    pub augment: AugmentConfig,
    /// Prototype count T.
    pub prototypes: usize,
    pub anchor_temp: f64,
    pub target_temp: f64,
    pub loss: LossConfig,
    pub mode: SamplingMode,
    pub seed: u64,
    pub encoder: EncoderConfig,
    /// Additionally checkpoint every k epochs; 0 means final only.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 64,
            base_lr: 2e-4,
            final_lr: 1e-6,
            warmup_epochs: 15,
            wd_start: 0.04,
            wd_end: 0.4,
            ema: EmaSchedule::default(),
            augment: AugmentConfig::default(),
            prototypes: 1024,
            anchor_temp: 0.1,
            target_temp: 0.025,
            loss: LossConfig::default(),
            mode: SamplingMode::CrossWell,
            seed: 0,
            encoder: EncoderConfig::desk(),
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let c = |ok: bool, msg: &str| if ok { Ok(()) } else { Err(TrainError::Config(msg.to_string())) };
        c(self.epochs >= 1, "epochs must be >= 1")?;
        c(self.batch_size >= 1, "batch_size must be >= 1")?;
        c(self.warmup_epochs < self.epochs, "warmup_epochs must be < epochs")?;
        c(self.base_lr >= 0.0 && self.final_lr >= 0.0, "learning rates must be >= 0")?;
        c(self.wd_start >= 0.0 && self.wd_end >= 0.0, "weight decay must be >= 0")?;
        c(self.prototypes >= 2, "need at least 2 prototypes")?;
        c(self.anchor_temp > 0.0 && self.target_temp > 0.0 && self.target_temp <= self.anchor_temp,
          "temperatures must satisfy 0 < target <= anchor")?;
        self.ema.validate()?;
        self.loss.validate()?;
        self.encoder.validate()?;
        self.augment.validate().map_err(TrainError::Sample)?;
        let p = self.encoder.patch_size;
        c(self.augment.view_h % p == 0 && self.augment.view_w % p == 0, "view size must be divisible by patch size")?;
        c(
            self.augment.view_h / p == self.encoder.max_grid && self.augment.view_w / p == self.encoder.max_grid,
            "view grid must match the encoder's positional grid",
        )?;
        Ok(())
    }

    /// Canonical flat key=value echo; embedded verbatim in checkpoints.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        s.push_str(&self.encoder.echo());
        s.push_str(&format!(
            "epochs={}\nbatch_size={}\nbase_lr={}\nfinal_lr={}\nwarmup_epochs={}\nwd_start={}\nwd_end={}\n",
            self.epochs, self.batch_size, self.base_lr, self.final_lr, self.warmup_epochs, self.wd_start, self.wd_end
        ));
        s.push_str(&format!("ema_start={}\nema_end={}\n", self.ema.start, self.ema.end));
        s.push_str(&format!(
            "view_h={}\nview_w={}\nglobal_scale_min={}\nglobal_scale_max={}\nfocal_scale_min={}\nfocal_scale_max={}\nflip_prob={}\nmask_ratio={}\nanchor_views={}\n",
            self.augment.view_h,
            self.augment.view_w,
            self.augment.global_scale.0,
            self.augment.global_scale.1,
            self.augment.focal_scale.0,
            self.augment.focal_scale.1,
            self.augment.flip_prob,
            self.augment.mask_ratio,
            self.augment.anchor_views
        ));
        s.push_str(&format!(
            "prototypes={}\nanchor_temp={}\ntarget_temp={}\nalign_weight={}\nentropy_weight={}\n",
            self.prototypes, self.anchor_temp, self.target_temp, self.loss.align_weight, self.loss.entropy_weight
        ));
        s.push_str(&format!(
            "mode={}\nseed={}\ncheckpoint_every={}\n",
            self.mode.as_str(),
            self.seed,
            self.checkpoint_every
        ));
        s
    }

    pub fn from_echo(echo: &str) -> Result<Self> {
        let mut map = std::collections::HashMap::new();
        for line in echo.lines() {
            if let Some((k, v)) = line.split_once('=') {
                map.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        let get = |k: &str| -> Result<String> {
            map.get(k).cloned().ok_or_else(|| TrainError::Config(format!("config echo missing {k}")))
        };
        macro_rules! parse {
            ($k:expr) => {
                get($k)?.parse().map_err(|_| TrainError::Config(format!("bad value for {}", $k)))?
            };
        }
        Ok(TrainConfig {
            epochs: parse!("epochs"),
            batch_size: parse!("batch_size"),
            base_lr: parse!("base_lr"),
            final_lr: parse!("final_lr"),
            warmup_epochs: parse!("warmup_epochs"),
            wd_start: parse!("wd_start"),
            wd_end: parse!("wd_end"),
            ema: EmaSchedule { start: parse!("ema_start"), end: parse!("ema_end") },
            augment: AugmentConfig {
                view_h: parse!("view_h"),
                view_w: parse!("view_w"),
                global_scale: (parse!("global_scale_min"), parse!("global_scale_max")),
                focal_scale: (parse!("focal_scale_min"), parse!("focal_scale_max")),
                flip_prob: parse!("flip_prob"),
                mask_ratio: parse!("mask_ratio"),
                anchor_views: parse!("anchor_views"),
            },
            prototypes: parse!("prototypes"),
            anchor_temp: parse!("anchor_temp"),
            target_temp: parse!("target_temp"),
            loss: LossConfig { align_weight: parse!("align_weight"), entropy_weight: parse!("entropy_weight") },
            mode: get("mode")?.parse().map_err(TrainError::Config)?,
            seed: parse!("seed"),
            encoder: EncoderConfig::from_echo(echo)?,
            checkpoint_every: parse!("checkpoint_every"),
        })
    }
}

// ── schedules ────────────────────────────────────────────────────────

/// Linear warmup from zero to `base_lr`, then half-cosine decay to
/// `final_lr`. Endpoints are exact: `lr_at(warmup) == base_lr` and
/// `lr_at(total-1) == final_lr`.
pub fn lr_at(step: u64, total_steps: u64, warmup_steps: u64, base_lr: f64, final_lr: f64) -> f64 {
    if warmup_steps > 0 && step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    let denom = total_steps.saturating_sub(1).saturating_sub(warmup_steps).max(1);
    let t = ((step - warmup_steps) as f64 / denom as f64).clamp(0.0, 1.0);
    let u = 0.5 * (1.0 - (std::f64::consts::PI * t).cos());
    base_lr * (1.0 - u) + final_lr * u
}

/// Increasing half-cosine from `wd_start` at step 0 to `wd_end` at the
/// final step.
pub fn wd_at(step: u64, total_steps: u64, wd_start: f64, wd_end: f64) -> f64 {
    let denom = total_steps.saturating_sub(1).max(1);
    let t = (step as f64 / denom as f64).clamp(0.0, 1.0);
    let u = 0.5 * (1.0 - (std::f64::consts::PI * t).cos());
    wd_start * (1.0 - u) + wd_end * u
}

/// Linear EMA momentum ramp from `start` at step 0 to `end` at the final
/// step.
pub fn momentum_at(step: u64, total_steps: u64, schedule: &EmaSchedule) -> f64 {
    let denom = total_steps.saturating_sub(1).max(1);
    let t = (step as f64 / denom as f64).clamp(0.0, 1.0);
    schedule.start * (1.0 - t) + schedule.end * t
}

// ── state ────────────────────────────────────────────────────────────

/// Mutable training state: both weight trees, prototypes, optimizer
/// moments, counters and the metrics history.
pub struct TrainState {
    pub anchor: EncoderWeights,
    pub target: EncoderWeights,
    pub prototypes: ParamSet,
    pub opt_encoder: AdamWState,
    pub opt_prototypes: AdamWState,
    pub global_step: u64,
    pub epoch: u64,
    pub metrics: Vec<MetricsRow>,
    /// Recycles tape buffers across steps.
    pool: Rc<RefCell<BufferPool<f32>>>,
}

impl TrainState {
    /// Fresh state; the target tree starts as an exact copy of the anchor.
    pub fn init(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut enc_rng = stream_rng(cfg.seed, "init.encoder", &[]);
        let anchor = EncoderWeights::init(&cfg.encoder, &mut enc_rng)?;
        let target = anchor.clone();
        let mut proto_rng = stream_rng(cfg.seed, "init.prototypes", &[]);
        let bank = PrototypeBank::init(cfg.prototypes, cfg.encoder.proj_dim, &mut proto_rng)?;
        let mut prototypes = ParamSet::new();
        prototypes.push("prototypes", bank.prototypes, false);
        let opt_encoder = AdamWState::new(&anchor.params);
        let opt_prototypes = AdamWState::new(&prototypes);
        Ok(TrainState {
            anchor,
            target,
            prototypes,
            opt_encoder,
            opt_prototypes,
            global_step: 0,
            epoch: 0,
            metrics: Vec::new(),
            pool: BufferPool::new(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub epoch: u64,
    pub loss: f64,
    pub ce: f64,
    pub entropy: f64,
    pub lr: f64,
    pub wd: f64,
    pub momentum: f64,
}

pub const METRICS_HEADER: &str = "step,epoch,loss,ce,entropy,lr,wd,momentum";

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| io_err(path, e))?);
    writeln!(f, "{METRICS_HEADER}").map_err(|e| io_err(path, e))?;
    for r in rows {
        writeln!(
            f,
            "{},{},{},{},{},{},{},{}",
            r.step, r.epoch, r.loss, r.ce, r.entropy, r.lr, r.wd, r.momentum
        )
        .map_err(|e| io_err(path, e))?;
    }
    Ok(())
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub metrics_path: PathBuf,
    pub metrics: Vec<MetricsRow>,
    /// Perturbations ineligible for the chosen mode.
    pub skipped: Vec<String>,
    pub steps_per_epoch: u64,
    pub total_steps: u64,
}

// ── token assembly ───────────────────────────────────────────────────

fn view_image(views: &Tensor<f32>, row: usize, view: usize, c: usize, h: usize, w: usize) -> Tensor<f32> {
    let len = c * h * w;
    let vcount = views.shape()[1];
    let start = (row * vcount + view) * len;
    Tensor::from_vec(vec![c, h, w], views.data()[start..start + len].to_vec()).expect("view bounds")
}

/// Gathers masked anchor tokens: `(B*V_a, keep, token_len)` plus the keep
/// lists flattened in the same row order.
fn anchor_tokens(batch: &ViewBatch, patch: usize) -> Result<(Tensor<f32>, Vec<Vec<usize>>)> {
    let shape = batch.anchors.shape().to_vec();
    let (b, va, c, h, w) = (shape[0], shape[1], shape[2], shape[3], shape[4]);
    let token_len = c * patch * patch;
    let keep_len = batch.anchor_keeps[0][0].len();
    let nseq = b * va;
    let mut data = vec![0.0f32; nseq * keep_len * token_len];
    let mut keeps = Vec::with_capacity(nseq);
    for r in 0..b {
        for v in 0..va {
            let view = view_image(&batch.anchors, r, v, c, h, w);
            let tokens = patchify(&view, patch)?;
            let keep = &batch.anchor_keeps[r][v];
            let seq = r * va + v;
            for (t, &idx) in keep.iter().enumerate() {
                let dst = (seq * keep_len + t) * token_len;
                data[dst..dst + token_len]
                    .copy_from_slice(&tokens.data()[idx * token_len..(idx + 1) * token_len]);
            }
            keeps.push(keep.clone());
        }
    }
    let tokens = Tensor::from_vec(vec![nseq, keep_len, token_len], data).map_err(TensorError::from)?;
    Ok((tokens, keeps))
}

/// Full (unmasked) target tokens: `(B, n_patches, token_len)`.
fn target_tokens(batch: &ViewBatch, patch: usize) -> Result<(Tensor<f32>, Vec<Vec<usize>>)> {
    let shape = batch.targets.shape().to_vec();
    let (b, c, h, w) = (shape[0], shape[2], shape[3], shape[4]);
    let n = (h / patch) * (w / patch);
    let token_len = c * patch * patch;
    let mut data = vec![0.0f32; b * n * token_len];
    for r in 0..b {
        let view = view_image(&batch.targets, r, 0, c, h, w);
        let tokens = patchify(&view, patch)?;
        data[r * n * token_len..(r + 1) * n * token_len].copy_from_slice(tokens.data());
    }
    let identity: Vec<usize> = (0..n).collect();
    let keeps = vec![identity; b];
    let tokens = Tensor::from_vec(vec![b, n, token_len], data).map_err(TensorError::from)?;
    Ok((tokens, keeps))
}

// ── the step ─────────────────────────────────────────────────────────

fn describe_batch(batch: &ViewBatch) -> String {
    batch
        .pert_ids
        .iter()
        .zip(batch.anchor_wells.iter().zip(&batch.target_wells))
        .map(|(p, (a, t))| format!("{p}[anchor {}/{}/{}, target {}/{}/{}]", a.0, a.1, a.2, t.0, t.1, t.2))
        .collect::<Vec<_>>()
        .join("; ")
}

/// Target branch: no gradients, target weights, sharper temperature.
fn target_scores(state: &TrainState, cfg: &TrainConfig, batch: &ViewBatch) -> Result<Tensor<f32>> {
    let (tokens, keeps) = target_tokens(batch, cfg.encoder.patch_size)?;
    let mut tape = Tape::<f32>::inference().with_pool(Rc::clone(&state.pool));
    let bound = bind_weights(&mut tape, &state.target);
    let proto = tape.constant(&state.prototypes.params[0].tensor);
    let token_id = tape.constant(&tokens);
    let pooled = vitencoder::encode_batch(&mut tape, &bound, &cfg.encoder, token_id, &keeps)?;
    let z = vitencoder::project(&mut tape, &bound, pooled)?;
    let s = msnloss::assignment_scores(&mut tape, proto, z, cfg.target_temp)?;
    Ok(tape.to_tensor(s))
}

/// Anchor branch forward + loss on a recording tape. Returns the tape and
/// the ids needed to pull gradients after backward.
fn anchor_loss(
    state: &TrainState,
    cfg: &TrainConfig,
    batch: &ViewBatch,
    s_target: &Tensor<f32>,
) -> Result<(Tape<f32>, Vec<ValueId>, ValueId, MsnLossOutput)> {
    let (tokens, keeps) = anchor_tokens(batch, cfg.encoder.patch_size)?;
    let mut tape = Tape::<f32>::new().with_pool(Rc::clone(&state.pool));
    let bound = bind_weights(&mut tape, &state.anchor);
    let leaf_ids = vitencoder::bound_ids_in_order(&bound, &state.anchor);
    let mut proto_tensor = state.prototypes.params[0].tensor.clone();
    proto_tensor.requires_grad = true;
    let proto = tape.leaf(&proto_tensor);
    let token_id = tape.constant(&tokens);
    let pooled = vitencoder::encode_batch(&mut tape, &bound, &cfg.encoder, token_id, &keeps)?;
    let z = vitencoder::project(&mut tape, &bound, pooled)?;
    let s = msnloss::assignment_scores(&mut tape, proto, z, cfg.anchor_temp)?;
    let out = msnloss::msn_loss(&mut tape, s_target, s, &cfg.loss)?;
    Ok((tape, leaf_ids, proto, out))
}

fn profile_enabled() -> bool {
    static ON: std::sync::OnceLock<bool> = std::sync::OnceLock::new();
    *ON.get_or_init(|| std::env::var_os("CROSSWELL_PROFILE").is_some())
}

macro_rules! phase {
    ($label:expr, $body:expr) => {{
        let t = std::time::Instant::now();
        let out = $body;
        if profile_enabled() {
            eprintln!("profile {}: {:.3}s", $label, t.elapsed().as_secs_f64());
        }
        out
    }};
}

/// Runs one optimization step on a collated batch. Returns the loss parts.
fn train_step(state: &mut TrainState, cfg: &TrainConfig, batch: &ViewBatch, total_steps: u64, steps_per_epoch: u64) -> Result<MetricsRow> {
    let step = state.global_step;
    let s_target = phase!("target", target_scores(state, cfg, batch))
        .map_err(|e| wrap_nonfinite(e, step, batch))?;
    let (mut tape, leaf_ids, proto_id, loss_out) =
        phase!("anchor_fwd", anchor_loss(state, cfg, batch, &s_target)).map_err(|e| wrap_nonfinite(e, step, batch))?;
    if !loss_out.loss_value.is_finite() {
        return Err(TrainError::NonFinite { step, batch: describe_batch(batch) });
    }
    phase!("backward", tape.backward(loss_out.loss))?;
    for (param, &id) in state.anchor.params.params.iter_mut().zip(&leaf_ids) {
        if let Some(g) = tape.take_grad(id) {
            param.tensor.accumulate_grad(&g);
        }
    }
    if let Some(g) = tape.take_grad(proto_id) {
        state.prototypes.params[0].tensor.accumulate_grad(&g);
    }
    drop(tape);

    let warmup_steps = cfg.warmup_epochs as u64 * steps_per_epoch;
    let lr = lr_at(step, total_steps, warmup_steps, cfg.base_lr, cfg.final_lr);
    let wd = wd_at(step, total_steps, cfg.wd_start, cfg.wd_end);
    adamw_step(&mut state.anchor.params, &mut state.opt_encoder, lr as f32, wd as f32)?;
    adamw_step(&mut state.prototypes, &mut state.opt_prototypes, lr as f32, wd as f32)?;
    state.anchor.params.clear_grads();
    state.prototypes.clear_grads();

    let momentum = momentum_at(step, total_steps, &cfg.ema);
    msnloss::ema_update(&mut state.target.params, &state.anchor.params, momentum)?;

    let row = MetricsRow {
        step,
        epoch: state.epoch,
        loss: loss_out.loss_value,
        ce: loss_out.ce_value,
        entropy: loss_out.entropy_value,
        lr,
        wd,
        momentum,
    };
    state.global_step += 1;
    Ok(row)
}

fn wrap_nonfinite(e: TrainError, step: u64, batch: &ViewBatch) -> TrainError {
    match e {
        TrainError::Tensor(TensorError::NonFinite { .. }) => {
            TrainError::NonFinite { step, batch: describe_batch(batch) }
        }
        other => other,
    }
}

/// Full training run. Writes `metrics.csv` and `checkpoint.ckpt` (plus
/// periodic epoch checkpoints when configured) under `out_dir`.
pub fn train(manifest: &DatasetManifest, cfg: &TrainConfig, out_dir: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let (eligible, skipped) = eligible_perturbations(manifest, cfg.mode);
    if eligible.is_empty() {
        return Err(TrainError::Config(format!(
            "no perturbation is sampleable in {} mode",
            cfg.mode.as_str()
        )));
    }
    let mut state = TrainState::init(cfg)?;
    let steps_per_epoch = epoch_plan(&eligible, cfg.seed, 0, cfg.batch_size).len() as u64;
    let total_steps = cfg.epochs as u64 * steps_per_epoch;

    let checkpoint_path = out_dir.join("checkpoint.ckpt");
    for epoch in 0..cfg.epochs as u64 {
        state.epoch = epoch;
        for (batch_idx, perts) in epoch_plan(&eligible, cfg.seed, epoch, cfg.batch_size).iter().enumerate() {
            let mut rng = stream_rng(cfg.seed, "sample.batch", &[epoch, batch_idx as u64]);
            let mut batch = collate_minibatch(perts, manifest, &cfg.augment, &mut rng, cfg.mode)?;
            mask_batch(&mut batch, cfg.encoder.patch_size, cfg.augment.mask_ratio, &mut rng)?;
            let row = train_step(&mut state, cfg, &batch, total_steps, steps_per_epoch)?;
            state.metrics.push(row);
        }
        if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every as u64 == 0 && epoch + 1 < cfg.epochs as u64 {
            save_state(&out_dir.join(format!("checkpoint_epoch_{:04}.ckpt", epoch + 1)), cfg, &state)?;
        }
    }
    save_state(&checkpoint_path, cfg, &state)?;
    let metrics_path = out_dir.join("metrics.csv");
    write_metrics(&metrics_path, &state.metrics)?;
    Ok(TrainOutcome {
        checkpoint: checkpoint_path,
        metrics_path,
        metrics: state.metrics,
        skipped,
        steps_per_epoch,
        total_steps,
    })
}

fn save_state(path: &Path, cfg: &TrainConfig, state: &TrainState) -> Result<()> {
    vitencoder::save_checkpoint(
        path,
        &cfg.echo(),
        &[
            ("anchor", &state.anchor.params),
            ("target", &state.target.params),
            ("prototypes", &state.prototypes),
        ],
    )?;
    Ok(())
}

// ── evaluation pass ──────────────────────────────────────────────────

/// One backbone feature per well record, through the gradient-trained
/// (anchor) encoder of a checkpoint.
pub fn extract_embeddings(manifest: &DatasetManifest, checkpoint: &Path) -> Result<EmbeddingTable> {
    let (echo, sections) = vitencoder::load_checkpoint(checkpoint)?;
    let cfg = TrainConfig::from_echo(&echo)?;
    let anchor = sections
        .into_iter()
        .find(|(name, _)| name == "anchor")
        .map(|(_, params)| EncoderWeights { cfg: cfg.encoder.clone(), params })
        .ok_or_else(|| TrainError::Config("checkpoint has no anchor section".into()))?;
    let mut rows = Vec::with_capacity(manifest.records.len());
    for record in &manifest.records {
        let image = manifest.load_well_image(record)?;
        let feature = vitencoder::embed_for_eval(&image, &anchor, cfg.augment.view_h, cfg.augment.view_w)?;
        rows.push(EmbeddingRow {
            batch_id: record.batch_id.clone(),
            plate_id: record.plate_id.clone(),
            well_id: record.well_id.clone(),
            perturbation_id: record.perturbation.id.clone(),
            feature,
        });
    }
    Ok(EmbeddingTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hcsdata::{SyntheticConfig, generate_synthetic};

    fn tiny_dataset() -> (tempfile::TempDir, DatasetManifest) {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SyntheticConfig {
            n_perturbations: 4,
            n_clusters: 2,
            wells_per_perturbation: 2,
            n_batches: 2,
            plates_per_batch: 1,
            channels: 2,
            height: 16,
            width: 16,
            n_compounds: 0,
            seed: 21,
            ..SyntheticConfig::default()
        };
        let (manifest, _) = generate_synthetic(&cfg, dir.path()).unwrap();
        (dir, manifest)
    }

    fn tiny_train_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 4,
            base_lr: 1e-3,
            final_lr: 1e-5,
            warmup_epochs: 1,
            augment: AugmentConfig {
                view_h: 16,
                view_w: 16,
                anchor_views: 2,
                mask_ratio: 0.25,
                ..AugmentConfig::default()
            },
            prototypes: 8,
            encoder: EncoderConfig {
                patch_size: 8,
                embed_dim: 32,
                depth: 2,
                n_heads: 2,
                mlp_ratio: 2.0,
                max_grid: 2,
                proj_dim: 16,
                channels: 2,
            },
            seed: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn schedule_endpoints_are_exact() {
        let spe = 10u64;
        let total = 100 * spe;
        let warmup = 15 * spe;
        assert_eq!(lr_at(0, total, warmup, 2e-4, 1e-6), 0.0);
        assert_eq!(lr_at(warmup, total, warmup, 2e-4, 1e-6), 2e-4);
        assert_eq!(lr_at(total - 1, total, warmup, 2e-4, 1e-6), 1e-6);
        assert_eq!(wd_at(0, total, 0.04, 0.4), 0.04);
        assert_eq!(wd_at(total - 1, total, 0.04, 0.4), 0.4);
        let ema = EmaSchedule { start: 0.996, end: 1.0 };
        assert_eq!(momentum_at(0, total, &ema), 0.996);
        assert_eq!(momentum_at(total - 1, total, &ema), 1.0);
    }

    #[test]
    fn schedule_midpoints_match_closed_forms() {
        // Odd total so the midpoint step sits exactly at t = 1/2.
        let total = 1001u64;
        let mid = (total - 1) / 2;
        assert!((wd_at(mid, total, 0.04, 0.4) - 0.22).abs() < 1e-12);
        let ema = EmaSchedule { start: 0.996, end: 1.0 };
        assert!((momentum_at(mid, total, &ema) - 0.998).abs() < 1e-12);
    }

    #[test]
    fn schedules_are_monotone_on_their_segments() {
        let total = 300u64;
        let warmup = 45u64;
        let mut prev = -1.0;
        for s in 0..=warmup {
            let lr = lr_at(s, total, warmup, 2e-4, 1e-6);
            assert!(lr >= prev);
            prev = lr;
        }
        for s in warmup..total {
            let lr = lr_at(s, total, warmup, 2e-4, 1e-6);
            assert!(lr <= prev + 1e-18);
            prev = lr;
        }
        let mut prev = 0.0;
        for s in 0..total {
            let wd = wd_at(s, total, 0.04, 0.4);
            assert!(wd >= prev);
            prev = wd;
        }
        let ema = EmaSchedule::default();
        let mut prev = 0.0;
        for s in 0..total {
            let m = momentum_at(s, total, &ema);
            assert!(m >= prev);
            prev = m;
        }
    }

    #[test]
    fn target_equals_anchor_at_step_zero() {
        let state = TrainState::init(&tiny_train_cfg()).unwrap();
        assert!(state.anchor.params.shape_isomorphic(&state.target.params));
        for (a, t) in state.anchor.params.params.iter().zip(&state.target.params.params) {
            assert_eq!(a.tensor.data(), t.tensor.data());
        }
    }

    #[test]
    fn one_epoch_training_runs_and_logs_metrics() {
        let (_dir, manifest) = tiny_dataset();
        let out = tempfile::tempdir().unwrap();
        let cfg = tiny_train_cfg();
        let outcome = train(&manifest, &cfg, out.path()).unwrap();
        assert_eq!(outcome.steps_per_epoch, 1);
        assert_eq!(outcome.metrics.len(), 2);
        assert!(outcome.metrics.iter().all(|r| r.loss.is_finite()));
        assert!(outcome.checkpoint.is_file());
        assert!(outcome.metrics_path.is_file());
        // Metrics row count equals total steps.
        assert_eq!(outcome.metrics.len() as u64, outcome.total_steps);
    }

    #[test]
    fn training_is_bit_deterministic() {
        let (_dir, manifest) = tiny_dataset();
        let cfg = tiny_train_cfg();
        let out1 = tempfile::tempdir().unwrap();
        let out2 = tempfile::tempdir().unwrap();
        train(&manifest, &cfg, out1.path()).unwrap();
        train(&manifest, &cfg, out2.path()).unwrap();
        let c1 = std::fs::read(out1.path().join("checkpoint.ckpt")).unwrap();
        let c2 = std::fs::read(out2.path().join("checkpoint.ckpt")).unwrap();
        assert_eq!(c1, c2);
        let m1 = std::fs::read(out1.path().join("metrics.csv")).unwrap();
        let m2 = std::fs::read(out2.path().join("metrics.csv")).unwrap();
        assert_eq!(m1, m2);
    }

    #[test]
    fn zero_loss_weights_leave_only_decay() {
        let (_dir, manifest) = tiny_dataset();
        let out = tempfile::tempdir().unwrap();
        let mut cfg = tiny_train_cfg();
        cfg.loss = LossConfig { align_weight: 0.0, entropy_weight: 0.0 };
        cfg.epochs = 1;
        cfg.warmup_epochs = 0;
        cfg.wd_start = 0.5;
        cfg.wd_end = 0.5;
        cfg.ema.start = 1.0; // keep the target fixed so only decay moves weights
        cfg.ema.end = 1.0;

        let state = TrainState::init(&cfg).unwrap();
        let before: Vec<Vec<f32>> =
            state.anchor.params.params.iter().map(|p| p.tensor.data().to_vec()).collect();
        let outcome = train(&manifest, &cfg, out.path()).unwrap();
        assert_eq!(outcome.metrics[0].loss, 0.0);

        let (_, sections) = vitencoder::load_checkpoint(&outcome.checkpoint).unwrap();
        let anchor_after = &sections.iter().find(|(n, _)| n == "anchor").unwrap().1;
        let lr = outcome.metrics[0].lr as f32;
        let wd = outcome.metrics[0].wd as f32;
        for ((p_after, p_before), p_init) in
            anchor_after.params.iter().zip(&before).zip(&state.anchor.params.params)
        {
            let factor = if p_init.decay { 1.0 - lr * wd } else { 1.0 };
            for (&after, &b) in p_after.tensor.data().iter().zip(p_before) {
                assert!((after - b * factor).abs() <= 1e-7_f32.max(b.abs() * 1e-5), "{after} vs {}", b * factor);
            }
        }
    }

    #[test]
    fn divergent_lr_aborts_with_batch_identifiers() {
        let (_dir, manifest) = tiny_dataset();
        let out = tempfile::tempdir().unwrap();
        let mut cfg = tiny_train_cfg();
        cfg.epochs = 4;
        cfg.warmup_epochs = 1;
        cfg.base_lr = 1e30;
        cfg.final_lr = 1e30;
        let err = train(&manifest, &cfg, out.path()).unwrap_err();
        match err {
            TrainError::NonFinite { batch, .. } => {
                assert!(batch.contains("gene_000"), "{batch}");
                assert!(batch.contains("anchor"), "{batch}");
            }
            other => panic!("expected NonFinite, got {other}"),
        }
    }

    #[test]
    fn extract_embeddings_matches_records_and_width() {
        let (_dir, manifest) = tiny_dataset();
        let out = tempfile::tempdir().unwrap();
        let cfg = tiny_train_cfg();
        let outcome = train(&manifest, &cfg, out.path()).unwrap();
        let table = extract_embeddings(&manifest, &outcome.checkpoint).unwrap();
        assert_eq!(table.rows.len(), manifest.records.len());
        assert_eq!(table.width(), cfg.encoder.embed_dim);
        // Re-running produces the identical table.
        let again = extract_embeddings(&manifest, &outcome.checkpoint).unwrap();
        for (a, b) in table.rows.iter().zip(&again.rows) {
            assert_eq!(a.feature, b.feature);
        }
    }

    #[test]
    fn config_echo_round_trips() {
        let cfg = tiny_train_cfg();
        let echo = cfg.echo();
        let back = TrainConfig::from_echo(&echo).unwrap();
        assert_eq!(back.echo(), echo);
    }
}
