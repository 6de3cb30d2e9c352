//! Central finite-difference audits of analytic gradients.

use std::collections::BTreeMap;

use super::{ParameterStore, Tape, Tensor, Var};
use crate::error::Result;

/// Relative error used throughout: `|analytic − numeric| / max(1, |analytic|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

/// Worst disagreement found for one parameter path.
#[derive(Clone, Debug, PartialEq)]
pub struct PathAudit {
    pub path: String,
    pub numel: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
}

/// Compares the analytic gradient of every entry of every parameter against
/// central differences of `loss`. `loss` must rebuild its computation from
/// the store it is given.
pub fn audit_store<L>(store: &ParameterStore<f64>, eps: f64, mut loss: L) -> Result<Vec<PathAudit>>
where
    L: FnMut(&ParameterStore<f64>, &mut Tape<f64>) -> Result<Var>,
{
    let mut analytic = store.clone();
    analytic.zero_grads();
    let mut tape = Tape::new();
    let l = loss(&analytic, &mut tape)?;
    tape.backward(l, &mut analytic)?;

    let mut work = store.clone();
    let mut eval = |s: &ParameterStore<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let v = loss(s, &mut t)?;
        Ok(t.value(v)[0])
    };
    let paths: Vec<String> = store.paths().map(str::to_string).collect();
    let mut out = Vec::with_capacity(paths.len());
    for path in paths {
        let grad = analytic.grad(&path)?.expect("ensured").to_vec();
        let mut audit = PathAudit {
            path: path.clone(),
            numel: grad.len(),
            max_rel_error: 0.0,
            worst_index: 0,
        };
        for (i, &g) in grad.iter().enumerate() {
            let orig = work.get(&path)?.data()[i];
            work.get_mut(&path)?.data_mut()[i] = orig + eps;
            let plus = eval(&work)?;
            work.get_mut(&path)?.data_mut()[i] = orig - eps;
            let minus = eval(&work)?;
            work.get_mut(&path)?.data_mut()[i] = orig;
            let err = relative_error(g, (plus - minus) / (2.0 * eps));
            if err > audit.max_rel_error {
                audit.max_rel_error = err;
                audit.worst_index = i;
            }
        }
        out.push(audit);
    }
    Ok(out)
}

/// Finite-difference check of an arbitrary tape function with respect to
/// its inputs. Returns the worst relative error over all input entries.
pub fn audit_inputs<G>(inputs: &[Tensor<f64>], eps: f64, mut f: G) -> Result<f64>
where
    G: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t)).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.grads(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut eval = |ts: &[Tensor<f64>]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = ts.iter().map(|x| t.input(x)).collect();
        let o = f(&mut t, &vs)?;
        Ok(t.value(o)[0])
    };
    let mut worst: f64 = 0.0;
    #[allow(clippy::needless_range_loop)]
    for k in 0..work.len() {
        for i in 0..work[k].len() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + eps;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = orig - eps;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = orig;
            worst = worst.max(relative_error(analytic[k][i], (plus - minus) / (2.0 * eps)));
        }
    }
    Ok(worst)
}

/// Groups per-path audits by their leading path component.
pub fn by_module(audits: &[PathAudit]) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    for a in audits {
        let module = a.path.split('.').next().unwrap_or("").to_string();
        let e = out.entry(module).or_insert(0.0f64);
        *e = e.max(a.max_rel_error);
    }
    out
}
