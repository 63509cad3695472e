//! Gradient verification against central finite differences.
//!
//! The graph under test is described once, generically over the element
//! type. Autodiff gradients are computed with the `f32` training path;
//! reference derivatives come from re-evaluating the same graph in `f64`
//! at `x ± h`, which keeps the oracle independent of single-precision
//! round-off.

use super::{Element, Result, Tape, Tensor, ValueId};

/// Describes a scalar-valued graph over named leaves, buildable at any
/// element precision.
pub trait GraphBuilder {
    /// Leaf names and their base values.
    fn leaves(&self) -> Vec<(String, Tensor<f64>)>;

    /// Builds the graph on `tape` from registered leaves (one id per leaf,
    /// in `leaves()` order) and returns the scalar output.
    fn build<E: Element>(&self, tape: &mut Tape<E>, leaves: &[ValueId]) -> Result<ValueId>;
}

#[derive(Debug, Clone)]
pub struct LeafReport {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub leaves: Vec<LeafReport>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.leaves.iter().map(|l| l.max_rel_err).fold(0.0, f64::max)
    }
}

/// Relative error with an absolute floor so that near-zero gradient pairs
/// compare on an absolute scale instead of blowing up.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(1e-3);
    (a - b).abs() / denom
}

fn eval_f64(builder: &impl GraphBuilder, values: &[Tensor<f64>]) -> Result<f64> {
    let mut tape = Tape::<f64>::inference();
    let ids: Vec<ValueId> = values.iter().map(|t| tape.constant(t)).collect();
    let out = builder.build(&mut tape, &ids)?;
    Ok(tape.value(out)[0])
}

/// Compares `f32` autodiff gradients of every leaf element against `f64`
/// central differences with step `h`. Leaves that receive no gradient are
/// compared against the finite-difference values all the same (both should
/// then be zero).
pub fn grad_check(builder: &impl GraphBuilder, h: f64) -> Result<GradCheckReport> {
    let leaves = builder.leaves();

    // Autodiff pass in f32.
    let mut tape = Tape::<f32>::new();
    let ids: Vec<ValueId> = leaves
        .iter()
        .map(|(_, t)| tape.leaf(&t.to_f32().requires_grad(true)))
        .collect();
    let out = builder.build(&mut tape, &ids)?;
    tape.backward(out)?;
    let ad_grads: Vec<Vec<f64>> = ids
        .iter()
        .zip(&leaves)
        .map(|(&id, (_, t))| {
            tape.take_grad(id)
                .map(|g| g.iter().map(|&x| x as f64).collect())
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();

    // Central differences in f64, one perturbed element at a time.
    let base: Vec<Tensor<f64>> = leaves.iter().map(|(_, t)| t.clone()).collect();
    let mut reports = Vec::with_capacity(leaves.len());
    for (li, (name, t)) in leaves.iter().enumerate() {
        let mut max_rel = 0.0f64;
        for ei in 0..t.numel() {
            let mut plus = base.clone();
            plus[li].data_mut()[ei] += h;
            let mut minus = base.clone();
            minus[li].data_mut()[ei] -= h;
            let fd = (eval_f64(builder, &plus)? - eval_f64(builder, &minus)?) / (2.0 * h);
            let rel = relative_error(ad_grads[li][ei], fd);
            if rel > max_rel {
                max_rel = rel;
            }
        }
        reports.push(LeafReport { name: name.clone(), max_rel_err: max_rel, checked: t.numel() });
    }
    Ok(GradCheckReport { leaves: reports })
}
