//! Vision-transformer encoder over masked patch-token sequences, plus the
//! projection head into the representation space.
//!
//! The encoder is a pre-norm ViT: patch projection, learned positional
//! table indexed by original patch position, a class token that is never
//! masked, `depth` attention/MLP blocks, and a final layer norm. The
//! pooled feature is the final class-token output; evaluation embeddings
//! use this backbone feature, while training projects it through a
//! three-layer GELU MLP into the prototype space.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::ndtensor::{Element, ParamSet, Result, Tape, Tensor, TensorError, ValueId};
use crate::wellsampler::patchify;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub n_heads: usize,
    pub mlp_ratio: f64,
    /// Positional table covers a `max_grid x max_grid` patch grid.
    pub max_grid: usize,
    /// Projection head output dimension D.
    pub proj_dim: usize,
    pub channels: usize,
}

impl EncoderConfig {
    /// Small preset for 64x64 five-channel wells; trains on CPU in minutes.
    pub fn desk() -> Self {
        EncoderConfig {
            patch_size: 8,
            embed_dim: 192,
            depth: 6,
            n_heads: 6,
            mlp_ratio: 4.0,
            max_grid: 8,
            proj_dim: 256,
            channels: 5,
        }
    }

    /// ViT-S/16 on 224x224 inputs; kept for parameter-count parity.
    pub fn vit_s16() -> Self {
        EncoderConfig {
            patch_size: 16,
            embed_dim: 384,
            depth: 12,
            n_heads: 6,
            mlp_ratio: 4.0,
            max_grid: 14,
            proj_dim: 256,
            channels: 5,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "desk" => Some(Self::desk()),
            "vit-s16" => Some(Self::vit_s16()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(TensorError::InvalidArgument { op: "encoder_config", msg });
        if self.embed_dim == 0 || self.embed_dim % self.n_heads != 0 {
            return bad(format!("embed_dim {} not divisible by n_heads {}", self.embed_dim, self.n_heads));
        }
        if self.depth == 0 || self.patch_size == 0 || self.max_grid == 0 || self.proj_dim == 0 || self.channels == 0 {
            return bad("all dimensions must be positive".into());
        }
        if self.mlp_ratio <= 0.0 {
            return bad("mlp_ratio must be positive".into());
        }
        Ok(())
    }

    pub fn token_len(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn hidden_dim(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.n_heads
    }

    pub fn pos_rows(&self) -> usize {
        1 + self.max_grid * self.max_grid
    }

    /// Echo as flat key=value lines, parseable by [`EncoderConfig::from_echo`].
    pub fn echo(&self) -> String {
        format!(
            "patch_size={}\nembed_dim={}\ndepth={}\nn_heads={}\nmlp_ratio={}\nmax_grid={}\nproj_dim={}\nchannels={}\n",
            self.patch_size, self.embed_dim, self.depth, self.n_heads, self.mlp_ratio, self.max_grid, self.proj_dim, self.channels
        )
    }

    pub fn from_echo(echo: &str) -> Result<Self> {
        let mut map = HashMap::new();
        for line in echo.lines() {
            if let Some((k, v)) = line.split_once('=') {
                map.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        let get = |k: &str| -> Result<String> {
            map.get(k).cloned().ok_or_else(|| TensorError::Format(format!("config echo missing {k}")))
        };
        let parse_usize = |k: &str| -> Result<usize> {
            get(k)?.parse().map_err(|_| TensorError::Format(format!("bad value for {k}")))
        };
        Ok(EncoderConfig {
            patch_size: parse_usize("patch_size")?,
            embed_dim: parse_usize("embed_dim")?,
            depth: parse_usize("depth")?,
            n_heads: parse_usize("n_heads")?,
            mlp_ratio: get("mlp_ratio")?.parse().map_err(|_| TensorError::Format("bad mlp_ratio".into()))?,
            max_grid: parse_usize("max_grid")?,
            proj_dim: parse_usize("proj_dim")?,
            channels: parse_usize("channels")?,
        })
    }
}

/// Weight-decay convention by parameter name: norms, biases, the class
/// token, positional rows for the class slot, and prototypes are exempt.
pub fn default_decay(name: &str) -> bool {
    !(name.ends_with(".bias")
        || name.ends_with(".gamma")
        || name.ends_with(".beta")
        || name.ends_with("cls_token")
        || name.ends_with("prototypes"))
}

fn trunc_normal(rng: &mut ChaCha8Rng, std: f32) -> f32 {
    loop {
        let x: f32 = rng.sample(StandardNormal);
        if x.abs() <= 2.0 {
            return x * std;
        }
    }
}

fn init_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f32) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| trunc_normal(rng, std)).collect();
    Tensor::from_vec(shape, data).expect("shape matches data")
}

/// The encoder + projection-head weight tree.
#[derive(Debug, Clone)]
pub struct EncoderWeights {
    pub cfg: EncoderConfig,
    pub params: ParamSet,
}

impl EncoderWeights {
    /// Truncated-normal (std 0.02) projections, zero biases, unit norms.
    pub fn init(cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let e = cfg.embed_dim;
        let hidden = cfg.hidden_dim();
        let std = 0.02;
        let mut p = ParamSet::new();
        let mut add = |set: &mut ParamSet, name: String, t: Tensor<f32>| {
            let decay = default_decay(&name);
            set.push(name, t, decay);
        };
        add(&mut p, "patch_embed.weight".into(), init_tensor(rng, vec![cfg.token_len(), e], std));
        add(&mut p, "patch_embed.bias".into(), Tensor::zeros(vec![e]));
        add(&mut p, "pos_embed".into(), init_tensor(rng, vec![cfg.pos_rows(), e], std));
        add(&mut p, "cls_token".into(), init_tensor(rng, vec![1, e], std));
        for i in 0..cfg.depth {
            add(&mut p, format!("block{i}.ln1.gamma"), Tensor::full(vec![e], 1.0));
            add(&mut p, format!("block{i}.ln1.beta"), Tensor::zeros(vec![e]));
            for which in ["q", "k", "v"] {
                add(&mut p, format!("block{i}.attn.{which}.weight"), init_tensor(rng, vec![e, e], std));
                add(&mut p, format!("block{i}.attn.{which}.bias"), Tensor::zeros(vec![e]));
            }
            add(&mut p, format!("block{i}.attn.proj.weight"), init_tensor(rng, vec![e, e], std));
            add(&mut p, format!("block{i}.attn.proj.bias"), Tensor::zeros(vec![e]));
            add(&mut p, format!("block{i}.ln2.gamma"), Tensor::full(vec![e], 1.0));
            add(&mut p, format!("block{i}.ln2.beta"), Tensor::zeros(vec![e]));
            add(&mut p, format!("block{i}.mlp.fc1.weight"), init_tensor(rng, vec![e, hidden], std));
            add(&mut p, format!("block{i}.mlp.fc1.bias"), Tensor::zeros(vec![hidden]));
            add(&mut p, format!("block{i}.mlp.fc2.weight"), init_tensor(rng, vec![hidden, e], std));
            add(&mut p, format!("block{i}.mlp.fc2.bias"), Tensor::zeros(vec![e]));
        }
        add(&mut p, "final_norm.gamma".into(), Tensor::full(vec![e], 1.0));
        add(&mut p, "final_norm.beta".into(), Tensor::zeros(vec![e]));
        add(&mut p, "proj.fc1.weight".into(), init_tensor(rng, vec![e, e], std));
        add(&mut p, "proj.fc1.bias".into(), Tensor::zeros(vec![e]));
        add(&mut p, "proj.fc2.weight".into(), init_tensor(rng, vec![e, e], std));
        add(&mut p, "proj.fc2.bias".into(), Tensor::zeros(vec![e]));
        add(&mut p, "proj.fc3.weight".into(), init_tensor(rng, vec![e, cfg.proj_dim], std));
        add(&mut p, "proj.fc3.bias".into(), Tensor::zeros(vec![cfg.proj_dim]));
        Ok(EncoderWeights { cfg: cfg.clone(), params: p })
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }
}

/// Tape-registered weights, addressed by name.
pub struct BoundWeights {
    ids: HashMap<String, ValueId>,
}

impl BoundWeights {
    /// Assembles a binding from (name, id) pairs, for callers that
    /// register leaves themselves (gradient checking, ablations).
    pub fn from_ids(ids: impl IntoIterator<Item = (String, ValueId)>) -> Self {
        BoundWeights { ids: ids.into_iter().collect() }
    }

    pub fn get(&self, name: &str) -> ValueId {
        *self.ids.get(name).unwrap_or_else(|| panic!("unknown weight {name}"))
    }
}

/// Registers every parameter on the tape (as leaves on a recording tape,
/// as constants otherwise) and returns the name → id map.
pub fn bind_weights<E: Element>(tape: &mut Tape<E>, weights: &EncoderWeights) -> BoundWeights {
    let mut ids = HashMap::new();
    for p in &weights.params.params {
        let cast = p.tensor.map_into(|x| E::from_f64(x as f64));
        let mut cast = cast;
        cast.requires_grad = true;
        ids.insert(p.name.clone(), tape.leaf(&cast));
    }
    BoundWeights { ids }
}

/// Leaf ids in parameter order, for gradient extraction after backward.
pub fn bound_ids_in_order(bound: &BoundWeights, weights: &EncoderWeights) -> Vec<ValueId> {
    weights.params.params.iter().map(|p| bound.get(&p.name)).collect()
}

/// Encodes a batch of masked token sequences.
///
/// `tokens` has shape `(nseq, L, token_len)`; `keeps[s]` lists the original
/// patch-grid position of each kept token of sequence `s` (length `L`).
/// Positional rows are gathered by original position, the class token is
/// prepended, and the pooled output is the final-norm class-token row:
/// shape `(nseq, embed_dim)`.
pub fn encode_batch<E: Element>(
    tape: &mut Tape<E>,
    w: &BoundWeights,
    cfg: &EncoderConfig,
    tokens: ValueId,
    keeps: &[Vec<usize>],
) -> Result<ValueId> {
    let shape = tape.shape(tokens).to_vec();
    if shape.len() != 3 || shape[2] != cfg.token_len() {
        return Err(TensorError::ShapeMismatch {
            op: "encode",
            lhs: shape,
            rhs: vec![keeps.len(), keeps.first().map_or(0, |k| k.len()), cfg.token_len()],
        });
    }
    let (nseq, l) = (shape[0], shape[1]);
    if keeps.len() != nseq || keeps.iter().any(|k| k.len() != l) {
        return Err(TensorError::InvalidArgument {
            op: "encode",
            msg: format!("keep lists must be {nseq} sequences of {l} indices"),
        });
    }
    let grid_cells = cfg.max_grid * cfg.max_grid;
    if let Some(&bad) = keeps.iter().flatten().find(|&&i| i >= grid_cells) {
        return Err(TensorError::InvalidArgument {
            op: "encode",
            msg: format!("keep index {bad} outside {}x{} grid", cfg.max_grid, cfg.max_grid),
        });
    }
    let e = cfg.embed_dim;
    let eps = E::from_f64(1e-6);

    // Patch projection with positional rows gathered by original position.
    let flat = tape.reshape(tokens, &[nseq * l, cfg.token_len()])?;
    let projected = tape.matmul_bias(flat, w.get("patch_embed.weight"), w.get("patch_embed.bias"))?;
    let pos_indices: Vec<usize> = keeps.iter().flatten().map(|&i| i + 1).collect();
    let pos = tape.gather_rows(w.get("pos_embed"), &pos_indices)?;
    let patches = tape.add(projected, pos)?;
    let patches = tape.reshape(patches, &[nseq, l, e])?;

    // Class token (position row 0), one per sequence.
    let cls = tape.gather_rows(w.get("cls_token"), &vec![0; nseq])?;
    let cls_pos = tape.gather_rows(w.get("pos_embed"), &vec![0; nseq])?;
    let cls = tape.add(cls, cls_pos)?;
    let cls = tape.reshape(cls, &[nseq, 1, e])?;

    let mut x = tape.concat(&[cls, patches], 1)?;
    let s = l + 1;
    let heads = cfg.n_heads;
    let dh = cfg.head_dim();
    let scale = E::from_f64(1.0 / (dh as f64).sqrt());

    for i in 0..cfg.depth {
        // Attention branch; q/k/v stay head-interleaved, the fused ops
        // address each head's columns in place.
        let ln1 = tape.layer_norm(x, w.get(&format!("block{i}.ln1.gamma")), w.get(&format!("block{i}.ln1.beta")), eps)?;
        let ln1_flat = tape.reshape(ln1, &[nseq * s, e])?;
        let q = tape.matmul_bias(ln1_flat, w.get(&format!("block{i}.attn.q.weight")), w.get(&format!("block{i}.attn.q.bias")))?;
        let k = tape.matmul_bias(ln1_flat, w.get(&format!("block{i}.attn.k.weight")), w.get(&format!("block{i}.attn.k.bias")))?;
        let v = tape.matmul_bias(ln1_flat, w.get(&format!("block{i}.attn.v.weight")), w.get(&format!("block{i}.attn.v.bias")))?;
        let q = tape.reshape(q, &[nseq, s, e])?;
        let k = tape.reshape(k, &[nseq, s, e])?;
        let v = tape.reshape(v, &[nseq, s, e])?;
        let scores = tape.attention_scores(q, k, heads, scale)?;
        let attn = tape.softmax(scores, 2)?;
        let ctx = tape.attention_context(attn, v, heads)?;
        let ctx = tape.reshape(ctx, &[nseq * s, e])?;
        let out = tape.matmul_bias(ctx, w.get(&format!("block{i}.attn.proj.weight")), w.get(&format!("block{i}.attn.proj.bias")))?;
        let out = tape.reshape(out, &[nseq, s, e])?;
        x = tape.add(x, out)?;

        // MLP branch.
        let ln2 = tape.layer_norm(x, w.get(&format!("block{i}.ln2.gamma")), w.get(&format!("block{i}.ln2.beta")), eps)?;
        let ln2_flat = tape.reshape(ln2, &[nseq * s, e])?;
        let h = tape.matmul_bias(ln2_flat, w.get(&format!("block{i}.mlp.fc1.weight")), w.get(&format!("block{i}.mlp.fc1.bias")))?;
        let h = tape.gelu(h)?;
        let o = tape.matmul_bias(h, w.get(&format!("block{i}.mlp.fc2.weight")), w.get(&format!("block{i}.mlp.fc2.bias")))?;
        let o = tape.reshape(o, &[nseq, s, e])?;
        x = tape.add(x, o)?;
    }

    let x = tape.layer_norm(x, w.get("final_norm.gamma"), w.get("final_norm.beta"), eps)?;
    let pooled = tape.slice(x, 1, 0, 1)?;
    tape.reshape(pooled, &[nseq, e])
}

/// Three-layer GELU MLP from pooled features to the representation space.
/// No normalization here; the similarity computation normalizes.
pub fn project<E: Element>(tape: &mut Tape<E>, w: &BoundWeights, features: ValueId) -> Result<ValueId> {
    let h = tape.matmul_bias(features, w.get("proj.fc1.weight"), w.get("proj.fc1.bias"))?;
    let h = tape.gelu(h)?;
    let h = tape.matmul_bias(h, w.get("proj.fc2.weight"), w.get("proj.fc2.bias"))?;
    let h = tape.gelu(h)?;
    tape.matmul_bias(h, w.get("proj.fc3.weight"), w.get("proj.fc3.bias"))
}

/// Full-image evaluation embedding: center resize to the view size, full
/// patchification (no masking), backbone pooled feature (pre-projection).
pub fn embed_for_eval(
    image: &Tensor<f32>,
    weights: &EncoderWeights,
    view_h: usize,
    view_w: usize,
) -> Result<Vec<f32>> {
    let cfg = &weights.cfg;
    let resized = center_resize(image, view_h, view_w);
    let tokens = patchify(&resized, cfg.patch_size)
        .map_err(|e| TensorError::InvalidArgument { op: "embed_for_eval", msg: e.to_string() })?;
    let n = tokens.shape()[0];
    let keeps = vec![(0..n).collect::<Vec<usize>>()];
    let mut tape = Tape::<f32>::inference();
    let bound = bind_weights(&mut tape, weights);
    let token_id = tape.constant_from(vec![1, n, cfg.token_len()], tokens.data().to_vec())?;
    let pooled = encode_batch(&mut tape, &bound, cfg, token_id, &keeps)?;
    Ok(tape.value(pooled).to_vec())
}

fn center_resize(image: &Tensor<f32>, view_h: usize, view_w: usize) -> Tensor<f32> {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    if h == view_h && w == view_w {
        return image.clone();
    }
    let mut out = vec![0.0f32; c * view_h * view_w];
    let scale_y = h as f32 / view_h as f32;
    let scale_x = w as f32 / view_w as f32;
    for ci in 0..c {
        let plane = &image.data()[ci * h * w..(ci + 1) * h * w];
        let dst = &mut out[ci * view_h * view_w..(ci + 1) * view_h * view_w];
        for y in 0..view_h {
            let sy = ((y as f32 + 0.5) * scale_y - 0.5).max(0.0);
            let y0 = (sy as usize).min(h - 1);
            let y1 = (y0 + 1).min(h - 1);
            let fy = sy - y0 as f32;
            for x in 0..view_w {
                let sx = ((x as f32 + 0.5) * scale_x - 0.5).max(0.0);
                let x0 = (sx as usize).min(w - 1);
                let x1 = (x0 + 1).min(w - 1);
                let fx = sx - x0 as f32;
                let v00 = plane[y0 * w + x0];
                let v01 = plane[y0 * w + x1];
                let v10 = plane[y1 * w + x0];
                let v11 = plane[y1 * w + x1];
                let top = v00 + (v01 - v00) * fx;
                let bot = v10 + (v11 - v10) * fx;
                dst[y * view_w + x] = top + (bot - top) * fy;
            }
        }
    }
    Tensor::from_vec(vec![c, view_h, view_w], out).expect("shape matches")
}

// ── checkpoints ──────────────────────────────────────────────────────

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CWCKPT1\n";

/// Writes named parameter sections as concatenated NDT1 tensors with a CSV
/// index of `(name, offset, shape)` and the run config echoed verbatim.
pub fn save_checkpoint(path: &std::path::Path, config_echo: &str, sections: &[(&str, &ParamSet)]) -> Result<()> {
    let mut blob: Vec<u8> = Vec::new();
    let mut csv = String::from("name,offset,shape\n");
    for (section, set) in sections {
        for p in &set.params {
            let offset = blob.len();
            crate::ndtensor::write_ndt1_to(&mut blob, &p.tensor)?;
            let shape: Vec<String> = p.tensor.shape().iter().map(|d| d.to_string()).collect();
            csv.push_str(&format!("{section}/{},{offset},{}\n", p.name, shape.join("x")));
        }
    }
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(config_echo.len() as u32).to_le_bytes());
    out.extend_from_slice(&(csv.len() as u32).to_le_bytes());
    out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
    out.extend_from_slice(config_echo.as_bytes());
    out.extend_from_slice(csv.as_bytes());
    out.extend_from_slice(&blob);
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads a checkpoint back into `(config echo, sections)`. Weight-decay
/// flags are reconstructed from the naming convention.
pub fn load_checkpoint(path: &std::path::Path) -> Result<(String, Vec<(String, ParamSet)>)> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 24 || &bytes[0..8] != CHECKPOINT_MAGIC {
        return Err(TensorError::Format("not a checkpoint file".into()));
    }
    let config_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let csv_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let blob_len = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    let config_start = 24;
    let csv_start = config_start + config_len;
    let blob_start = csv_start + csv_len;
    if bytes.len() != blob_start + blob_len {
        return Err(TensorError::Format("checkpoint length mismatch".into()));
    }
    let config_echo = String::from_utf8(bytes[config_start..csv_start].to_vec())
        .map_err(|_| TensorError::Format("config echo is not utf-8".into()))?;
    let csv = String::from_utf8(bytes[csv_start..blob_start].to_vec())
        .map_err(|_| TensorError::Format("index is not utf-8".into()))?;
    let blob = &bytes[blob_start..];

    let mut sections: Vec<(String, ParamSet)> = Vec::new();
    for (lineno, line) in csv.lines().enumerate() {
        if lineno == 0 {
            if line != "name,offset,shape" {
                return Err(TensorError::Format("bad checkpoint index header".into()));
            }
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 3 {
            return Err(TensorError::Format(format!("bad index row {line:?}")));
        }
        let (section, name) = parts[0]
            .split_once('/')
            .ok_or_else(|| TensorError::Format(format!("index name {:?} missing section", parts[0])))?;
        let offset: usize = parts[1].parse().map_err(|_| TensorError::Format("bad offset".into()))?;
        let tensor = crate::ndtensor::read_ndt1_from(&mut &blob[offset..])?;
        let declared: Vec<usize> = parts[2]
            .split('x')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|_| TensorError::Format("bad shape".into())))
            .collect::<Result<_>>()?;
        if tensor.shape() != declared.as_slice() {
            return Err(TensorError::Format(format!("index shape {declared:?} != tensor {:?}", tensor.shape())));
        }
        if sections.last().map(|(s, _)| s.as_str()) != Some(section) {
            sections.push((section.to_string(), ParamSet::new()));
        }
        let set = &mut sections.last_mut().unwrap().1;
        let decay = default_decay(name);
        set.push(name, tensor, decay);
    }
    Ok((config_echo, sections))
}
