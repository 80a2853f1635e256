//! Central finite differences against reverse-mode adjoints.

use super::tape::{Tape, Var};
use super::tensor::{ParamId, ParamStore};
use super::{Ctx, DiffError};

/// Gradients smaller than this are compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct FdEntry {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub abs_err: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FdReport {
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub entries: Vec<FdEntry>,
}

impl FdReport {
    fn push(&mut self, index: usize, analytic: f64, numeric: f64) {
        let abs_err = (analytic - numeric).abs();
        let rel_err = abs_err / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
        self.max_abs_err = self.max_abs_err.max(abs_err);
        self.max_rel_err = self.max_rel_err.max(rel_err);
        self.entries.push(FdEntry {
            index,
            analytic,
            numeric,
            abs_err,
            rel_err,
        });
    }

    pub fn passes(&self, rel_tol: f64) -> bool {
        self.max_rel_err < rel_tol
    }

    pub fn merge(&mut self, other: FdReport) {
        for e in other.entries {
            self.push(e.index, e.analytic, e.numeric);
        }
    }

    /// Fixed-width table, one row per entry.
    pub fn table(&self) -> String {
        let mut out = format!(
            "{:>6} {:>16} {:>16} {:>10} {:>10}\n",
            "index", "analytic", "numeric", "abs", "rel"
        );
        for e in &self.entries {
            out.push_str(&format!(
                "{:>6} {:>16.9e} {:>16.9e} {:>10.2e} {:>10.2e}\n",
                e.index, e.analytic, e.numeric, e.abs_err, e.rel_err
            ));
        }
        out
    }
}

/// Compares the reverse-mode gradient of `f` at `x` with
/// `(f(x + eps) - f(x - eps)) / (2 eps)` per coordinate.
pub fn finite_diff_check<F>(f: F, x: &[f64], eps: f64) -> Result<FdReport, DiffError>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let store = ParamStore::new();
    finite_diff_check_with(&store, |ctx, x| f(ctx.tape, x), x, eps)
}

/// [`finite_diff_check`] for functions that also read (fixed) parameters.
pub fn finite_diff_check_with<F>(store: &ParamStore, f: F, x: &[f64], eps: f64) -> Result<FdReport, DiffError>
where
    F: for<'t> Fn(&Ctx<'t>, &[Var<'t>]) -> Var<'t>,
{
    assert!(eps > 0.0, "finite-difference step must be positive");
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, store);
    let vars: Vec<Var<'_>> = x.iter().map(|&v| tape.var(v)).collect();
    let root = f(&ctx, &vars);
    let grads = tape.backward(root)?;

    let eval = |pt: &[f64]| -> Result<f64, DiffError> {
        let tape = Tape::detached();
        let ctx = Ctx::new(&tape, store);
        let vars: Vec<Var<'_>> = pt.iter().map(|&v| tape.constant(v)).collect();
        let y = f(&ctx, &vars).val();
        if !y.is_finite() {
            return Err(DiffError::NonFiniteProbe);
        }
        Ok(y)
    };

    let mut report = FdReport::default();
    let mut pt = x.to_vec();
    for i in 0..x.len() {
        pt[i] = x[i] + eps;
        let hi = eval(&pt)?;
        pt[i] = x[i] - eps;
        let lo = eval(&pt)?;
        pt[i] = x[i];
        report.push(i, grads.wrt(vars[i]), (hi - lo) / (2.0 * eps));
    }
    Ok(report)
}

/// Same check against entries of a stored tensor. `indices = None` checks every entry.
pub fn finite_diff_check_param<F>(
    store: &mut ParamStore,
    param: ParamId,
    indices: Option<&[usize]>,
    eps: f64,
    f: F,
) -> Result<FdReport, DiffError>
where
    F: for<'t> Fn(&Ctx<'t>) -> Var<'t>,
{
    assert!(eps > 0.0, "finite-difference step must be positive");
    store.zero_grads();
    {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, store);
        let root = f(&ctx);
        let grads = tape.backward(root)?;
        grads.accumulate(store);
    }
    let analytic = store.get(param).grad().to_vec();
    store.zero_grads();

    let all: Vec<usize>;
    let indices = match indices {
        Some(ix) => ix,
        None => {
            all = (0..store.get(param).len()).collect();
            &all
        }
    };
    let eval = |store: &ParamStore| -> Result<f64, DiffError> {
        let tape = Tape::detached();
        let y = f(&Ctx::new(&tape, store)).val();
        if !y.is_finite() {
            return Err(DiffError::NonFiniteProbe);
        }
        Ok(y)
    };
    let mut report = FdReport::default();
    for &i in indices {
        let x0 = store.get(param).values()[i];
        store.get_mut(param).values_mut()[i] = x0 + eps;
        let hi = eval(store)?;
        store.get_mut(param).values_mut()[i] = x0 - eps;
        let lo = eval(store)?;
        store.get_mut(param).values_mut()[i] = x0;
        report.push(i, analytic[i], (hi - lo) / (2.0 * eps));
    }
    Ok(report)
}
