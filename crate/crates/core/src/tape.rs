//! Reverse-mode differentiation over a linear operation tape.
//!
//! Forward ops append value nodes plus a backward closure; `backward`
//! replays the closures in exact reverse execution order and accumulates
//! gradients into every leased [`Parameter`]. One logical thread per tape;
//! node values are immutable once produced.

use std::collections::HashMap;

use crate::error::{MsfError, Result};
use crate::tensor::Tensor;

/// A learnable value plus its gradient accumulator.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    /// Whether weight decay applies to this parameter in the optimizer.
    pub decay: bool,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct ParamId(pub usize);

/// Ordered, named collection of parameters. Registration order is the
/// canonical order for checkpoints and optimizer state.
#[derive(Default, Clone)]
pub struct ParamSet {
    params: Vec<Parameter>,
    by_name: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, decay: bool) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let grad = Tensor::zeros(value.shape());
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            value,
            grad,
            decay,
        });
        ParamId(id)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    /// Total scalar entry count across all parameters.
    pub fn entry_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            for g in p.grad.data_mut() {
                *g = 0.0;
            }
        }
    }
}

/// Handle to a value node on a tape.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type BackwardFn = Box<dyn Fn(&[Tensor], &mut [Vec<f64>])>;

/// Ordered record of executed differentiable operations.
#[derive(Default)]
pub struct Tape {
    values: Vec<Tensor>,
    backs: Vec<BackwardFn>,
    leases: Vec<(usize, ParamId)>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Introduce a constant leaf. No gradient flows out of it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_node(t)
    }

    /// Bring a parameter's current value onto the tape. After `backward`,
    /// the gradient at this node is added into the parameter's `grad`.
    pub fn lease(&mut self, params: &ParamSet, id: ParamId) -> Var {
        let v = self.push_node(params.get(id).value.clone());
        self.leases.push((v.0, id));
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn num_nodes(&self) -> usize {
        self.values.len()
    }

    /// Append a value node (op output). Used by op implementations.
    pub(crate) fn push_node(&mut self, t: Tensor) -> Var {
        self.values.push(t);
        Var(self.values.len() - 1)
    }

    /// Register the backward closure for the op that produced the most
    /// recent node(s). The closure receives all node values and the
    /// per-node gradient buffers; it must only write gradients of nodes
    /// created before the ones it reads.
    pub(crate) fn push_backward<F>(&mut self, f: F)
    where
        F: Fn(&[Tensor], &mut [Vec<f64>]) + 'static,
    {
        self.backs.push(Box::new(f));
    }

    /// Compute gradients of a scalar `loss` per node, without touching any
    /// ParamSet. Returned buffers are indexed by node.
    pub fn grads_of(&self, loss: Var) -> Result<Vec<Vec<f64>>> {
        let lt = &self.values[loss.0];
        if !lt.is_scalar() {
            return Err(MsfError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Vec<f64>> = self.values.iter().map(|t| vec![0.0; t.numel()]).collect();
        grads[loss.0][0] = 1.0;
        for back in self.backs.iter().rev() {
            back(&self.values, &mut grads);
        }
        Ok(grads)
    }

    /// Reverse pass: accumulate d(loss)/d(param) into every leased
    /// parameter's `grad` (additive; the caller zeroes grads).
    pub fn backward(&self, loss: Var, params: &mut ParamSet) -> Result<()> {
        let grads = self.grads_of(loss)?;
        for &(node, pid) in &self.leases {
            let p = params.get_mut(pid);
            for (g, src) in p.grad.data_mut().iter_mut().zip(&grads[node]) {
                *g += src;
            }
        }
        Ok(())
    }
}

/// Split the gradient buffers so an op backward can read its output grad
/// while mutating input grads. Valid because outputs are always created
/// after their inputs.
pub(crate) fn out_grad(grads: &mut [Vec<f64>], out: usize) -> (&mut [Vec<f64>], &[f64]) {
    let (lo, hi) = grads.split_at_mut(out);
    (lo, &hi[0])
}

/// Same, for an op with several consecutive output nodes starting at `first_out`.
pub(crate) fn out_grads(
    grads: &mut [Vec<f64>],
    first_out: usize,
    n_out: usize,
) -> (&mut [Vec<f64>], &[Vec<f64>]) {
    let (lo, hi) = grads.split_at_mut(first_out);
    (lo, &hi[..n_out])
}

/// Max relative error between analytic gradients and central finite
/// differences of `f`, taken over every entry of every parameter.
///
/// `f` must deterministically build a scalar loss on the given tape from
/// the current parameter values.
pub fn finite_diff_check<F>(f: F, params: &mut ParamSet, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamSet) -> Result<Var>,
{
    let all: Vec<(ParamId, usize)> = (0..params.len())
        .flat_map(|p| (0..params.get(ParamId(p)).value.numel()).map(move |i| (ParamId(p), i)))
        .collect();
    finite_diff_check_entries(f, params, step, &all)
}

/// Finite-difference check restricted to an explicit list of parameter
/// entries. Used when the full sweep is too expensive (end-to-end models).
pub fn finite_diff_check_entries<F>(
    f: F,
    params: &mut ParamSet,
    step: f64,
    entries: &[(ParamId, usize)],
) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamSet) -> Result<Var>,
{
    assert!(step > 0.0, "finite_diff_check requires step > 0");

    // Analytic gradients.
    params.zero_grads();
    let mut tape = Tape::new();
    let loss = f(&mut tape, params)?;
    tape.backward(loss, params)?;
    let analytic: Vec<Vec<f64>> = params.iter().map(|p| p.grad.data().to_vec()).collect();

    let eval = |params: &ParamSet| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = f(&mut tape, params)?;
        Ok(tape.value(loss).item())
    };

    let mut max_rel = 0.0f64;
    for &(pid, i) in entries {
        let orig = params.get(pid).value.data()[i];
        params.get_mut(pid).value.data_mut()[i] = orig + step;
        let up = eval(params)?;
        params.get_mut(pid).value.data_mut()[i] = orig - step;
        let down = eval(params)?;
        params.get_mut(pid).value.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        // The floor keeps entries whose true gradient sits below the
        // central-difference cancellation noise (~eps*|f|/step) from being
        // scored against that noise.
        let denom = analytic[pid.0][i].abs().max(numeric.abs()).max(1e-6);
        let rel = (analytic[pid.0][i] - numeric).abs() / denom;
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}
