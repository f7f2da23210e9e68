//! Central finite-difference oracle for the tape.
//!
//! The oracle only evaluates forward values, so it stays independent of the
//! backward rules it checks. Non-scalar outputs are contracted with fixed
//! pseudo-random weights before differencing.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::numerics::{Bound, Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Perturbation for the central difference.
    pub step: f64,
    /// Differences below this are accepted regardless of relative error.
    pub abs_floor: f64,
    /// Upper bound on checked coordinates per tensor (`None` = all).
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            abs_floor: 1e-7,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
    /// (tensor index, coordinate, analytic, numeric) of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

fn contract(g: &mut Graph<f64>, out: Var) -> Result<Var> {
    if g.value(out).len() == 1 {
        return g.reshape(out, &[]);
    }
    let shape = g.shape(out).to_vec();
    let n = g.value(out).len();
    // Fixed weights in [0.5, 1.5) with alternating sign.
    let w: Vec<f64> = (0..n)
        .map(|i| {
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            ((i as f64 * 0.618_033_988_75).fract() + 0.5) * sign
        })
        .collect();
    let wv = g.constant(Tensor::new(shape, w)?);
    let prod = g.mul(out, wv)?;
    Ok(g.sum(prod))
}

/// Compare backward gradients for every tensor of `store` against central
/// differences of `f`.
pub fn check_params<F>(store: &ParamStore<f64>, f: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &Bound) -> Result<Var>,
{
    let mut g = Graph::new();
    let bound = store.bind(&mut g, true);
    let out = f(&mut g, &bound)?;
    let loss = contract(&mut g, out)?;
    let grads = g.backward(loss)?;

    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let b = s.bind(&mut g, false);
        let out = f(&mut g, &b)?;
        let loss = contract(&mut g, out)?;
        Ok(g.value(loss).item())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
        worst: None,
    };
    let ids: Vec<ParamId> = store.ids().collect();
    for (ti, id) in ids.into_iter().enumerate() {
        let len = store.get(id).len();
        let coords: Vec<usize> = match opts.max_coords {
            Some(k) if k < len => sample(&mut rng, len, k).into_vec(),
            _ => (0..len).collect(),
        };
        let analytic = grads.get(bound[id]);
        for c in coords {
            let base = store.get(id).data()[c];
            work.get_mut(id).data_mut()[c] = base + opts.step;
            let up = eval(&work)?;
            work.get_mut(id).data_mut()[c] = base - opts.step;
            let down = eval(&work)?;
            work.get_mut(id).data_mut()[c] = base;
            let numeric = (up - down) / (2.0 * opts.step);
            let a = analytic.map_or(0.0, |t| t.data()[c]);
            let abs = (a - numeric).abs();
            let rel = if abs <= opts.abs_floor {
                0.0
            } else {
                abs / a.abs().max(numeric.abs())
            };
            report.checked += 1;
            report.max_abs_err = report.max_abs_err.max(abs);
            if report.worst.is_none() || rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((ti, c, a, numeric));
            }
        }
    }
    Ok(report)
}

/// [`check_params`] for a plain list of input tensors.
pub fn check_inputs<F>(inputs: &[Tensor<f64>], f: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut store = ParamStore::new();
    for (i, t) in inputs.iter().enumerate() {
        store.add(format!("input{i}"), t.clone());
    }
    check_params(&store, |g, b| f(g, b.vars()), opts)
}
