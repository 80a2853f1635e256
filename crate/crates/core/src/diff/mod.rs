//! Reverse-mode gradients over dense parameter tensors, Adam, and
//! finite-difference verification.

mod adam;
mod check;
pub mod container;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use check::{finite_diff_check, finite_diff_check_param, finite_diff_check_with, FdEntry, FdReport, REL_FLOOR};
pub use tape::{argmax, logit, sigmoid, softmax_values, softplus, Fault, Gradients, SparseGrad, Tape, Var};
pub use tensor::{ParamId, ParamStore, ParamTensor, MAX_RANK};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("non-finite value produced by `{primitive}` (operand {operand})")]
    NonFinite {
        primitive: &'static str,
        operand: usize,
    },
    #[error("tape already swept; record again before calling backward")]
    DeadTape,
    #[error("backward needs a scalar root, got {0} outputs")]
    NonScalarRoot(usize),
    #[error("tensor `{name}`: invalid shape {shape:?}")]
    BadShape { name: String, shape: Vec<usize> },
    #[error("tensor `{name}`: expected {expected} values, got {got}")]
    LengthMismatch {
        name: String,
        expected: usize,
        got: usize,
    },
    #[error("tensor `{name}`: non-finite value at {index}")]
    NonFiniteValue { name: String, index: usize },
    #[error("optimizer produced a non-finite value in `{name}` at {index}")]
    NonFiniteUpdate { name: String, index: usize },
    #[error("function is not finite at a perturbed point")]
    NonFiniteProbe,
}

/// Tape plus the parameters it reads from.
#[derive(Clone, Copy)]
pub struct Ctx<'t> {
    pub tape: &'t Tape,
    pub params: &'t ParamStore,
}

impl<'t> Ctx<'t> {
    pub fn new(tape: &'t Tape, params: &'t ParamStore) -> Self {
        Self { tape, params }
    }

    #[inline]
    pub fn param(&self, id: ParamId, index: usize) -> Var<'t> {
        self.tape.param(self.params, id, index)
    }

    #[inline]
    pub fn cst(&self, v: f64) -> Var<'t> {
        self.tape.constant(v)
    }

    pub fn cst3(&self, v: [f64; 3]) -> [Var<'t>; 3] {
        v.map(|x| self.tape.constant(x))
    }
}

/// Output of [`record_and_eval`]: values plus the live tape behind them.
pub struct Recording {
    tape: Tape,
    roots: Vec<Root>,
    pub output: Vec<f64>,
}

#[derive(Clone, Copy)]
struct Root {
    index: usize,
}

/// Runs `f` on a fresh tape bound to `store` and keeps the tape for one backward sweep.
pub fn record_and_eval<F>(store: &ParamStore, f: F) -> Result<Recording, DiffError>
where
    F: for<'t> FnOnce(&Ctx<'t>) -> Vec<Var<'t>>,
{
    let tape = Tape::new();
    let ((output, roots), fault) = {
        let ctx = Ctx::new(&tape, store);
        let outs = f(&ctx);
        // Each output is rerouted through an identity node so it can be addressed after
        // the borrow ends; `tape.len()` before the push is that node's index.
        let mut output = Vec::with_capacity(outs.len());
        let mut roots = Vec::with_capacity(outs.len());
        for v in &outs {
            roots.push(Root { index: tape.len() });
            let _ = tape.custom("output", v.val(), [(*v, 1.0)]);
            output.push(v.val());
        }
        ((output, roots), tape.fault())
    };
    if let Some(f) = fault {
        return Err(DiffError::NonFinite {
            primitive: f.primitive,
            operand: f.operand,
        });
    }
    Ok(Recording {
        tape,
        roots,
        output,
    })
}

impl Recording {
    /// Accumulates d(output)/d(params) into `store`. Requires a single output.
    pub fn backward(&self, store: &mut ParamStore) -> Result<(), DiffError> {
        if self.roots.len() != 1 {
            return Err(DiffError::NonScalarRoot(self.roots.len()));
        }
        let root = self.tape.node_var(self.roots[0].index, self.output[0]);
        let grads = self.tape.backward(root)?;
        grads.accumulate(store);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_then_backward() {
        let mut store = ParamStore::new();
        let x = store.add(ParamTensor::new("x", &[1], vec![3.0]).unwrap());
        let rec = record_and_eval(&store, |ctx| {
            let v = ctx.param(x, 0);
            vec![v * v]
        })
        .unwrap();
        assert_eq!(rec.output, vec![9.0]);
        rec.backward(&mut store).unwrap();
        assert_eq!(store.get(x).grad(), &[6.0]);
        assert_eq!(rec.backward(&mut store), Err(DiffError::DeadTape));
    }

    #[test]
    fn vector_root_is_rejected() {
        let mut store = ParamStore::new();
        let x = store.add(ParamTensor::new("x", &[2], vec![1.0, 2.0]).unwrap());
        let rec = record_and_eval(&store, |ctx| vec![ctx.param(x, 0), ctx.param(x, 1)]).unwrap();
        assert_eq!(rec.backward(&mut store), Err(DiffError::NonScalarRoot(2)));
    }

    #[test]
    fn non_finite_intermediate_names_primitive() {
        let store = ParamStore::new();
        let err = record_and_eval(&store, |ctx| vec![ctx.cst(-1.0).sqrt()]).err();
        assert_eq!(
            err,
            Some(DiffError::NonFinite {
                primitive: "sqrt",
                operand: 0
            })
        );
    }

    #[test]
    fn additive_accumulation() {
        let mut store = ParamStore::new();
        let x = store.add(ParamTensor::new("x", &[1], vec![0.7]).unwrap());
        fn f(v: Var<'_>) -> Var<'_> {
            v.sin()
        }
        fn g(v: Var<'_>) -> Var<'_> {
            v * v * v
        }
        let joint = record_and_eval(&store, |ctx| {
            let v = ctx.param(x, 0);
            vec![f(v) + g(v)]
        })
        .unwrap();
        joint.backward(&mut store).unwrap();
        let together = store.get(x).grad()[0];
        store.zero_grads();
        record_and_eval(&store, |ctx| vec![f(ctx.param(x, 0))])
            .unwrap()
            .backward(&mut store)
            .unwrap();
        record_and_eval(&store, |ctx| vec![g(ctx.param(x, 0))])
            .unwrap()
            .backward(&mut store)
            .unwrap();
        assert!((store.get(x).grad()[0] - together).abs() < 1e-15);
    }
}
