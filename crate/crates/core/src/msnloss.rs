//! Prototype bank, similarity assignments, the cross-well alignment loss,
//! and the EMA target update.
//!
//! Assignments compare L2-normalized representations against L2-normalized
//! prototypes (cosine similarity), sharpen by temperature, and softmax over
//! prototypes. The loss aligns each anchor view's assignment distribution
//! with its perturbation's target-view distribution via cross-entropy.
//!
//! Anti-collapse: because every assignment row sums to one, the batch mean
//! of the raw scores is the constant `1/T` and cannot regularize anything;
//! the implemented term instead maximizes the Shannon entropy of the mean
//! anchor assignment (ME-MAX), which is what "mean entropy maximization"
//! has to denote for softmax rows. With weights `λ1, λ2`:
//!
//! ```text
//! loss = λ1 * mean_rows CE(s_target, s_anchor) - λ2 * H(mean_rows s_anchor)
//! ```
//!
//! Gradients flow to the anchor encoder, projection head and prototypes
//! only; target scores enter as constants produced behind the
//! stop-gradient boundary, and target weights are updated exclusively by
//! [`ema_update`].

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::ndtensor::{Element, ParamSet, Result, Tape, Tensor, TensorError, ValueId};

/// Additive guard inside the loss logs: keeps `0 * log(0)` finite without
/// perturbing softmax-range probabilities (anchor entries are ≥ ~1e-12).
const LOG_GUARD: f64 = 1e-30;

#[derive(Debug, Clone)]
pub struct PrototypeBank {
    /// `(T, D)` learnable prototype matrix, stored unnormalized.
    pub prototypes: Tensor<f32>,
    pub anchor_temp: f64,
    pub target_temp: f64,
}

impl PrototypeBank {
    /// Unit-Gaussian initialization; prototypes are normalized at use, not
    /// in storage.
    pub fn init(count: usize, dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let bank = PrototypeBank {
            prototypes: Tensor::from_vec(
                vec![count, dim],
                (0..count * dim).map(|_| rng.sample::<f32, _>(StandardNormal)).collect(),
            )?,
            anchor_temp: 0.1,
            target_temp: 0.025,
        };
        bank.validate()?;
        Ok(bank)
    }

    pub fn count(&self) -> usize {
        self.prototypes.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.prototypes.shape()[1]
    }

    pub fn validate(&self) -> Result<()> {
        if self.count() < 2 {
            return Err(TensorError::InvalidArgument {
                op: "prototype_bank",
                msg: format!("need at least 2 prototypes, got {}", self.count()),
            });
        }
        if !(self.target_temp > 0.0 && self.target_temp <= self.anchor_temp) {
            return Err(TensorError::InvalidArgument {
                op: "prototype_bank",
                msg: format!(
                    "temperatures must satisfy 0 < target ({}) <= anchor ({})",
                    self.target_temp, self.anchor_temp
                ),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LossConfig {
    /// λ1, weight of the alignment cross-entropy.
    pub align_weight: f64,
    /// λ2, weight of the mean-entropy regularizer.
    pub entropy_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { align_weight: 1.0, entropy_weight: 1.0 }
    }
}

impl LossConfig {
    /// Zero weights are tolerated so the zero-gradient diagnostic path
    /// (loss identically zero, updates driven by decay alone) stays
    /// expressible; meaningful training wants `align_weight > 0`.
    pub fn validate(&self) -> Result<()> {
        if self.align_weight < 0.0 || self.entropy_weight < 0.0 {
            return Err(TensorError::InvalidArgument {
                op: "loss_config",
                msg: format!("need λ1 >= 0 and λ2 >= 0, got ({}, {})", self.align_weight, self.entropy_weight),
            });
        }
        Ok(())
    }
}

/// EMA momentum endpoints; the schedule over steps lives in the trainer.
#[derive(Debug, Clone, Copy)]
pub struct EmaSchedule {
    pub start: f64,
    pub end: f64,
}

impl Default for EmaSchedule {
    fn default() -> Self {
        EmaSchedule { start: 0.996, end: 1.0 }
    }
}

impl EmaSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.start && self.start <= self.end && self.end <= 1.0) {
            return Err(TensorError::InvalidArgument {
                op: "ema_schedule",
                msg: format!("need 0 <= start <= end <= 1, got ({}, {})", self.start, self.end),
            });
        }
        Ok(())
    }
}

/// Softmax over prototypes of temperature-scaled cosine similarities.
///
/// `z` is `(rows, D)`, `prototypes` is `(T, D)`; both are L2-normalized
/// along D before the dot product. Exact-zero rows are rejected.
pub fn assignment_scores<E: Element>(
    tape: &mut Tape<E>,
    prototypes: ValueId,
    z: ValueId,
    temperature: f64,
) -> Result<ValueId> {
    if temperature <= 0.0 {
        return Err(TensorError::InvalidArgument {
            op: "assignment_scores",
            msg: format!("temperature must be positive, got {temperature}"),
        });
    }
    let zs = tape.shape(z).to_vec();
    let ps = tape.shape(prototypes).to_vec();
    if zs.len() != 2 || ps.len() != 2 || zs[1] != ps[1] {
        return Err(TensorError::ShapeMismatch { op: "assignment_scores", lhs: zs, rhs: ps });
    }
    let dim = zs[1];
    for (r, row) in tape.value(z).chunks(dim).enumerate() {
        if row.iter().all(|&x| x == E::zero()) {
            return Err(TensorError::InvalidArgument {
                op: "assignment_scores",
                msg: format!("row {r} of z has zero norm"),
            });
        }
    }
    let z_hat = tape.l2_normalize(z, 1)?;
    let p_hat = tape.l2_normalize(prototypes, 1)?;
    let p_t = tape.transpose(p_hat, 0, 1)?;
    let cos = tape.matmul(z_hat, p_t)?;
    let scaled = tape.mul_scalar(cos, E::from_f64(1.0 / temperature))?;
    tape.softmax(scaled, 1)
}

/// Loss pieces extracted before backward (values only).
#[derive(Debug, Clone, Copy)]
pub struct MsnLossOutput {
    pub loss: ValueId,
    pub loss_value: f64,
    pub ce_value: f64,
    pub entropy_value: f64,
}

/// The alignment loss over one mini-batch.
///
/// `target_scores` has one row per perturbation (`B x T`), computed behind
/// the stop-gradient boundary; `anchor_scores` is on-tape with `B*V_a`
/// rows, batch-major. Each anchor view row is aligned with its
/// perturbation's single target row.
pub fn msn_loss<E: Element>(
    tape: &mut Tape<E>,
    target_scores: &Tensor<E>,
    anchor_scores: ValueId,
    cfg: &LossConfig,
) -> Result<MsnLossOutput> {
    cfg.validate()?;
    let a_shape = tape.shape(anchor_scores).to_vec();
    let t_shape = target_scores.shape().to_vec();
    if a_shape.len() != 2 || t_shape.len() != 2 || a_shape[1] != t_shape[1] || t_shape[0] == 0 {
        return Err(TensorError::ShapeMismatch { op: "msn_loss", lhs: a_shape, rhs: t_shape });
    }
    let (rows, t) = (a_shape[0], a_shape[1]);
    let b = t_shape[0];
    if rows % b != 0 {
        return Err(TensorError::ShapeMismatch { op: "msn_loss", lhs: vec![rows, t], rhs: vec![b, t] });
    }
    let views = rows / b;

    // Broadcast target rows over the views of their perturbation.
    let mut expanded = vec![E::zero(); rows * t];
    for r in 0..rows {
        let src = (r / views) * t;
        expanded[r * t..(r + 1) * t].copy_from_slice(&target_scores.data()[src..src + t]);
    }
    let s_plus = tape.constant_from(vec![rows, t], expanded)?;

    // CE term: -(1/rows) * sum(s_plus * log s).
    let guarded = tape.add_scalar(anchor_scores, E::from_f64(LOG_GUARD))?;
    let log_s = tape.log(guarded)?;
    let prod = tape.mul(s_plus, log_s)?;
    let total = tape.sum(prod, None)?;
    let ce = tape.mul_scalar(total, E::from_f64(-1.0 / rows as f64))?;
    let ce_value = tape.value(ce)[0].to_f64();

    // Mean-entropy term: H(mean over rows of s).
    let s_bar = tape.mean(anchor_scores, Some(0))?;
    let s_bar_guarded = tape.add_scalar(s_bar, E::from_f64(LOG_GUARD))?;
    let log_bar = tape.log(s_bar_guarded)?;
    let bar_prod = tape.mul(s_bar, log_bar)?;
    let neg_entropy = tape.sum(bar_prod, None)?;
    let entropy = tape.neg(neg_entropy)?;
    let entropy_value = tape.value(entropy)[0].to_f64();

    let weighted_ce = tape.mul_scalar(ce, E::from_f64(cfg.align_weight))?;
    let weighted_ent = tape.mul_scalar(entropy, E::from_f64(-cfg.entropy_weight))?;
    let loss = tape.add(weighted_ce, weighted_ent)?;
    let loss_value = tape.value(loss)[0].to_f64();
    Ok(MsnLossOutput { loss, loss_value, ce_value, entropy_value })
}

/// EMA update `target <- m * target + (1 - m) * anchor` over every
/// parameter. Prototypes live on the anchor side only and never appear in
/// the target tree. No tape involvement.
pub fn ema_update(target: &mut ParamSet, anchor: &ParamSet, momentum: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&momentum) {
        return Err(TensorError::InvalidArgument {
            op: "ema_update",
            msg: format!("momentum must be in [0, 1], got {momentum}"),
        });
    }
    if !target.shape_isomorphic(anchor) {
        return Err(TensorError::InvalidArgument {
            op: "ema_update",
            msg: "target and anchor weight trees are not shape-isomorphic".into(),
        });
    }
    let m = momentum as f32;
    for (t, a) in target.params.iter_mut().zip(&anchor.params) {
        for (tv, av) in t.tensor.data_mut().iter_mut().zip(a.tensor.data()) {
            *tv = m * *tv + (1.0 - m) * av;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::streams::stream_rng;

    fn proto_tensor(rows: Vec<Vec<f32>>) -> Tensor<f32> {
        let dim = rows[0].len();
        let t = rows.len();
        Tensor::from_vec(vec![t, dim], rows.concat()).unwrap()
    }

    #[test]
    fn aligned_prototype_dominates_at_low_temperature() {
        let mut tape = Tape::<f32>::inference();
        let protos = proto_tensor(vec![
            vec![1.0, 0.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0, 0.0],
        ]);
        let p = tape.constant(&protos);
        let z = tape.constant(&proto_tensor(vec![vec![0.0, 2.0, 0.0, 0.0]]));
        let s = assignment_scores(&mut tape, p, z, 0.02).unwrap();
        let row = tape.value(s);
        assert!(row[1] > 0.999, "{row:?}");
    }

    #[test]
    fn identical_prototypes_give_uniform_scores() {
        let mut tape = Tape::<f32>::inference();
        let p = tape.constant(&proto_tensor(vec![vec![0.3, -0.7, 0.1]; 5]));
        let z = tape.constant(&proto_tensor(vec![vec![1.0, 0.5, -0.2]]));
        let s = assignment_scores(&mut tape, p, z, 0.1).unwrap();
        for &x in tape.value(s) {
            assert!((x - 0.2).abs() < 1e-6);
        }
    }

    #[test]
    fn default_prototype_count_row_length() {
        let mut rng = stream_rng(1, "proto", &[]);
        let bank = PrototypeBank::init(1024, 16, &mut rng).unwrap();
        let mut tape = Tape::<f32>::inference();
        let p = tape.constant(&bank.prototypes);
        let z = tape.constant(&proto_tensor(vec![vec![0.5; 16]]));
        let s = assignment_scores(&mut tape, p, z, bank.anchor_temp).unwrap();
        assert_eq!(tape.shape(s), &[1, 1024]);
    }

    #[test]
    fn zero_norm_row_is_rejected() {
        let mut tape = Tape::<f32>::inference();
        let p = tape.constant(&proto_tensor(vec![vec![1.0, 0.0], vec![0.0, 1.0]]));
        let z = tape.constant(&proto_tensor(vec![vec![0.0, 0.0]]));
        let err = assignment_scores(&mut tape, p, z, 0.1).unwrap_err();
        assert!(err.to_string().contains("zero norm"), "{err}");
    }

    #[test]
    fn scores_are_scale_invariant_in_z() {
        let mut rng = stream_rng(2, "z", &[]);
        let z_data: Vec<f32> = (0..6).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let scaled: Vec<f32> = z_data.iter().map(|&x| x * 37.5).collect();
        let protos = proto_tensor(vec![vec![0.2, -0.5, 0.9], vec![-0.3, 0.8, 0.1], vec![0.7, 0.7, -0.7]]);
        let mut tape = Tape::<f32>::inference();
        let p = tape.constant(&protos);
        let z1 = tape.constant(&Tensor::from_vec(vec![2, 3], z_data).unwrap());
        let z2 = tape.constant(&Tensor::from_vec(vec![2, 3], scaled).unwrap());
        let s1 = assignment_scores(&mut tape, p, z1, 0.1).unwrap();
        let s2 = assignment_scores(&mut tape, p, z2, 0.1).unwrap();
        for (a, b) in tape.value(s1).iter().zip(tape.value(s2)) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn rows_sum_to_one() {
        let mut rng = stream_rng(3, "z", &[]);
        let protos = Tensor::from_vec(vec![7, 4], (0..28).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap();
        let z = Tensor::from_vec(vec![5, 4], (0..20).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap();
        let mut tape = Tape::<f32>::inference();
        let p = tape.constant(&protos);
        let zi = tape.constant(&z);
        let s = assignment_scores(&mut tape, p, zi, 0.07).unwrap();
        for row in tape.value(s).chunks(7) {
            let total: f32 = row.iter().sum();
            assert!((total - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn identical_one_hots_give_zero_loss() {
        let mut tape = Tape::<f32>::new();
        let one_hot = proto_tensor(vec![vec![0.0, 1.0, 0.0, 0.0]]);
        let anchor = tape.constant(&one_hot);
        let cfg = LossConfig { align_weight: 1.0, entropy_weight: 0.0 };
        let out = msn_loss(&mut tape, &one_hot, anchor, &cfg).unwrap();
        assert_eq!(out.loss_value, 0.0);
    }

    #[test]
    fn uniform_rows_entropy_term_is_log_t() {
        // λ1 -> 0 is not allowed, so test the entropy piece directly while
        // keeping λ1 * CE separately verified.
        let t = 8usize;
        let uniform = Tensor::from_vec(vec![2, t], vec![1.0f32 / t as f32; 2 * t]).unwrap();
        let mut tape = Tape::<f32>::new();
        let anchor = tape.constant(&uniform);
        let out = msn_loss(&mut tape, &uniform, anchor, &LossConfig::default()).unwrap();
        assert!((out.entropy_value - (t as f64).ln()).abs() < 1e-6);
        // With uniform targets the CE equals log T too.
        assert!((out.ce_value - (t as f64).ln()).abs() < 1e-6);
        // loss = λ1 * CE - λ2 * H = 0 for λ1 = λ2 = 1 on uniform rows.
        assert!(out.loss_value.abs() < 1e-6);
    }

    #[test]
    fn loss_matches_direct_summation_oracle() {
        let mut rng = stream_rng(4, "loss", &[]);
        let (b, views, t) = (3usize, 2usize, 5usize);
        let rows = b * views;
        let softmax_rows = |n: usize, rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f32> {
            let mut out = Vec::with_capacity(n * t);
            for _ in 0..n {
                let raw: Vec<f32> = (0..t).map(|_| rng.gen_range(0.01f32..1.0)).collect();
                let total: f32 = raw.iter().sum();
                out.extend(raw.iter().map(|x| x / total));
            }
            out
        };
        let s_plus = Tensor::from_vec(vec![b, t], softmax_rows(b, &mut rng)).unwrap();
        let s_anchor = Tensor::from_vec(vec![rows, t], softmax_rows(rows, &mut rng)).unwrap();
        let cfg = LossConfig { align_weight: 0.7, entropy_weight: 1.3 };

        let mut tape = Tape::<f32>::new();
        let anchor = tape.constant(&s_anchor);
        let out = msn_loss(&mut tape, &s_plus, anchor, &cfg).unwrap();

        // Independent scalar-loop oracle in f64.
        let mut ce = 0.0f64;
        for r in 0..rows {
            let target_row = r / views;
            for m in 0..t {
                let sp = s_plus.data()[target_row * t + m] as f64;
                let sa = s_anchor.data()[r * t + m] as f64;
                ce -= sp * sa.ln();
            }
        }
        ce /= rows as f64;
        let mut entropy = 0.0f64;
        for m in 0..t {
            let mut mean = 0.0f64;
            for r in 0..rows {
                mean += s_anchor.data()[r * t + m] as f64;
            }
            mean /= rows as f64;
            entropy -= mean * mean.ln();
        }
        let expected = cfg.align_weight * ce - cfg.entropy_weight * entropy;
        assert!((out.loss_value - expected).abs() < 1e-6, "{} vs {expected}", out.loss_value);
        assert!((out.ce_value - ce).abs() < 1e-6);
        assert!((out.entropy_value - entropy).abs() < 1e-6);
    }

    #[test]
    fn row_count_mismatch_is_an_error() {
        let mut tape = Tape::<f32>::new();
        let s_plus = Tensor::from_vec(vec![3, 4], vec![0.25; 12]).unwrap();
        let anchor = tape.constant(&Tensor::from_vec(vec![7, 4], vec![0.25; 28]).unwrap());
        assert!(msn_loss(&mut tape, &s_plus, anchor, &LossConfig::default()).is_err());
    }

    #[test]
    fn gradient_only_reaches_the_anchor_path() {
        // Target scores enter as constants; anchor z receives gradient,
        // a stop-gradient copy of it does not.
        let mut rng = stream_rng(5, "grad", &[]);
        let mut tape = Tape::<f32>::new();
        let protos = Tensor::from_vec(vec![4, 3], (0..12).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap();
        let p = tape.leaf(&protos.clone().requires_grad(true));
        let z = tape.leaf(
            &Tensor::from_vec(vec![2, 3], (0..6).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
                .unwrap()
                .requires_grad(true),
        );
        let z_frozen = tape.stop_gradient(z);
        let s_target_id = assignment_scores(&mut tape, p, z_frozen, 0.025).unwrap();
        let s_target = tape.to_tensor(s_target_id);
        let s_anchor = assignment_scores(&mut tape, p, z, 0.1).unwrap();
        let out = msn_loss(&mut tape, &s_target, s_anchor, &LossConfig::default()).unwrap();
        tape.backward(out.loss).unwrap();
        assert!(tape.grad(z).is_some());
        assert!(tape.grad(p).is_some());
    }

    #[test]
    fn entropy_regularizer_does_not_decrease_batch_entropy() {
        // With the CE weight effectively silenced (identical distributions
        // so CE is at its minimum in s), one small gradient step on z in
        // the -λ2 H(s̄) direction must not reduce H(s̄).
        let mut rng = stream_rng(6, "ent", &[]);
        let protos = Tensor::from_vec(vec![6, 4], (0..24).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap();
        let z0 = Tensor::from_vec(vec![3, 4], (0..12).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap();

        let entropy_of = |z_t: &Tensor<f32>| -> (f64, Vec<f32>) {
            let mut tape = Tape::<f32>::new();
            let p = tape.constant(&protos);
            let z = tape.leaf(&z_t.clone().requires_grad(true));
            let s = assignment_scores(&mut tape, p, z, 0.1).unwrap();
            let s_bar = tape.mean(s, Some(0)).unwrap();
            let log_bar = tape.log(s_bar).unwrap();
            let prod = tape.mul(s_bar, log_bar).unwrap();
            let neg_h = tape.sum(prod, None).unwrap();
            // loss = -λ2 H = sum(s_bar log s_bar) * λ2 with λ2 = 1.
            let h = -tape.value(neg_h)[0] as f64;
            tape.backward(neg_h).unwrap();
            (h, tape.take_grad(z).unwrap())
        };
        let (h0, grad) = entropy_of(&z0);
        let step = 1e-3f32;
        let moved = Tensor::from_vec(
            vec![3, 4],
            z0.data().iter().zip(&grad).map(|(&x, &g)| x - step * g).collect(),
        )
        .unwrap();
        let (h1, _) = entropy_of(&moved);
        assert!(h1 >= h0 - 1e-7, "entropy decreased: {h0} -> {h1}");
    }

    #[test]
    fn ema_endpoints_and_closed_form() {
        let mut rng = stream_rng(7, "ema", &[]);
        let mut make = |v: f32| {
            let mut set = ParamSet::new();
            set.push("a", Tensor::from_vec(vec![3], vec![v, v * 2.0, v * 3.0]).unwrap(), true);
            set.push("b", Tensor::from_vec(vec![2], vec![rng.gen(), rng.gen()]).unwrap(), false);
            set
        };
        let anchor = make(1.0);
        // m = 1: fixpoint.
        let mut target = make(5.0);
        let before = target.params[0].tensor.data().to_vec();
        ema_update(&mut target, &anchor, 1.0).unwrap();
        assert_eq!(target.params[0].tensor.data(), &before[..]);
        // m = 0: copy.
        ema_update(&mut target, &anchor, 0.0).unwrap();
        assert_eq!(target.params[0].tensor.data(), anchor.params[0].tensor.data());
        // m = 0.996: closed form within 1e-7.
        let mut target = make(5.0);
        ema_update(&mut target, &anchor, 0.996).unwrap();
        for ((t, a), b) in target.params[0]
            .tensor
            .data()
            .iter()
            .zip(anchor.params[0].tensor.data())
            .zip(&[5.0f32, 10.0, 15.0])
        {
            let expect = 0.996 * b + 0.004 * a;
            assert!((t - expect).abs() < 1e-7);
        }
    }

    #[test]
    fn ema_shape_mismatch_is_an_error() {
        let mut a = ParamSet::new();
        a.push("w", Tensor::zeros(vec![2, 2]), true);
        let mut b = ParamSet::new();
        b.push("w", Tensor::zeros(vec![2, 3]), true);
        assert!(ema_update(&mut b, &a, 0.5).is_err());
    }

    #[test]
    fn bank_and_config_validation() {
        let mut rng = stream_rng(8, "v", &[]);
        assert!(PrototypeBank::init(1, 4, &mut rng).is_err());
        let mut bank = PrototypeBank::init(4, 4, &mut rng).unwrap();
        bank.target_temp = 0.5; // larger than anchor_temp 0.1
        assert!(bank.validate().is_err());
        assert!(LossConfig { align_weight: -0.5, entropy_weight: 1.0 }.validate().is_err());
        assert!(LossConfig { align_weight: 1.0, entropy_weight: -0.1 }.validate().is_err());
        assert!(LossConfig { align_weight: 0.0, entropy_weight: 0.0 }.validate().is_ok());
        assert!(EmaSchedule { start: 0.9, end: 0.8 }.validate().is_err());
    }
}
