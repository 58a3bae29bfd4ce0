//! Central finite-difference verification of analytic gradients in `f64`.
//!
//! The scalar probed is `sum(out * R)` for a fixed random `R`, so every
//! output element contributes with a distinct weight.

pub mod suite;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{Mode, ParamStore, Session, Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct CheckConfig {
    /// Central-difference step.
    pub h: f64,
    /// Maximum accepted relative error.
    pub tol: f64,
    /// Denominator floor of the relative error, so near-zero gradients are
    /// compared absolutely.
    pub floor: f64,
    /// Coordinates probed per tensor (all of them when the tensor is smaller).
    pub samples: usize,
}

impl Default for CheckConfig {
    fn default() -> Self {
        CheckConfig {
            h: 1e-5,
            tol: 1e-4,
            floor: 1e-3,
            samples: 24,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Mismatch {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckReport {
    pub name: String,
    pub seed: u64,
    pub max_rel_err: f64,
    pub checked: usize,
    /// Coordinate with the largest relative error.
    pub worst: Option<Mismatch>,
    pub tol: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol && self.checked > 0
    }
}

pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Re-draw every parameter from `N(0, std^2)` so zero-initialised layers
/// do not make the check trivially pass.
pub fn randomize(store: &mut ParamStore<f64>, seed: u64, std: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let shape = store.value(id).shape().to_vec();
        *store.value_mut(id) = Tensor::randn(shape, std, &mut rng);
    }
}

struct Tracker {
    cfg: CheckConfig,
    max: f64,
    checked: usize,
    worst: Option<Mismatch>,
}

impl Tracker {
    fn note(&mut self, tensor: &str, index: usize, analytic: f64, numeric: f64) {
        let e = rel_err(analytic, numeric, self.cfg.floor);
        self.checked += 1;
        if e >= self.max || self.worst.is_none() {
            self.max = e;
            self.worst = Some(Mismatch {
                tensor: tensor.to_string(),
                index,
                analytic,
                numeric,
            });
        }
    }
}

fn probe_indices(len: usize, samples: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if len <= samples {
        (0..len).collect()
    } else {
        let mut v = sample(rng, len, samples).into_vec();
        v.sort_unstable();
        v
    }
}

fn weighted_sum(out: &Tensor<f64>, r: &Tensor<f64>) -> f64 {
    out.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

/// Check the gradients of `f` with respect to every input and every
/// parameter in `store`. `f` runs in `mode` (batch norm uses batch
/// statistics in training mode, which is differentiable).
pub fn check_module<F>(
    name: &str,
    store: &mut ParamStore<f64>,
    inputs: &[Tensor<f64>],
    mode: Mode,
    seed: u64,
    cfg: CheckConfig,
    f: F,
) -> Result<CheckReport>
where
    F: Fn(&mut Session<f64>, &[Var<f64>]) -> Result<Var<f64>>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    store.zero_grad();

    // analytic pass
    let (r, input_grads) = {
        let mut s = Session::new(store, mode);
        let vars: Vec<Var<f64>> = inputs.iter().map(|x| s.input(x.clone())).collect();
        let out = f(&mut s, &vars)?;
        let r = Tensor::randn(out.shape().to_vec(), 1.0, &mut rng);
        let rv = s.constant(r.clone());
        let prod = crate::ops::mul(&mut s, &out, &rv)?;
        let loss = crate::ops::sum_all(&mut s, &prod);
        let g = s.backward(&loss)?;
        let ig: Vec<Option<Tensor<f64>>> = vars.iter().map(|v| g.wrt(v)).collect();
        (r, ig)
    };

    let eval = |store: &mut ParamStore<f64>, inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut s = Session::untracked(store, mode);
        let vars: Vec<Var<f64>> = inputs.iter().map(|x| s.constant(x.clone())).collect();
        let out = f(&mut s, &vars)?;
        Ok(weighted_sum(out.value(), &r))
    };

    let mut tr = Tracker {
        cfg,
        max: 0.0,
        checked: 0,
        worst: None,
    };
    let mut xs: Vec<Tensor<f64>> = inputs.to_vec();
    for k in 0..xs.len() {
        let len = xs[k].numel();
        for idx in probe_indices(len, cfg.samples, &mut rng) {
            let orig = xs[k].data()[idx];
            xs[k].data_mut()[idx] = orig + cfg.h;
            let up = eval(store, &xs)?;
            xs[k].data_mut()[idx] = orig - cfg.h;
            let dn = eval(store, &xs)?;
            xs[k].data_mut()[idx] = orig;
            let numeric = (up - dn) / (2.0 * cfg.h);
            let analytic = input_grads[k].as_ref().map_or(0.0, |g| g.data()[idx]);
            tr.note(&format!("input{k}"), idx, analytic, numeric);
        }
    }

    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let pname = store.get(id).name.clone();
        let analytic_all = store.get(id).grad.clone();
        let len = store.value(id).numel();
        for idx in probe_indices(len, cfg.samples, &mut rng) {
            let orig = store.value(id).data()[idx];
            store.value_mut(id).data_mut()[idx] = orig + cfg.h;
            let up = eval(store, &xs)?;
            store.value_mut(id).data_mut()[idx] = orig - cfg.h;
            let dn = eval(store, &xs)?;
            store.value_mut(id).data_mut()[idx] = orig;
            let numeric = (up - dn) / (2.0 * cfg.h);
            let analytic = analytic_all.as_ref().map_or(0.0, |g| g.data()[idx]);
            tr.note(&pname, idx, analytic, numeric);
        }
    }

    Ok(CheckReport {
        name: name.to_string(),
        seed,
        max_rel_err: tr.max,
        checked: tr.checked,
        worst: tr.worst,
        tol: cfg.tol,
    })
}

/// Check a parameter-free function of its inputs.
pub fn check_fn<F>(name: &str, inputs: &[Tensor<f64>], seed: u64, cfg: CheckConfig, f: F) -> Result<CheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var<f64>]) -> Result<Var<f64>>,
{
    let mut store = ParamStore::new();
    check_module(name, &mut store, inputs, Mode::Train, seed, cfg, |s, xs| f(s, xs))
}

/// `x^2` whose backward deliberately returns `2.2 x`. Used to show that the
/// harness catches a wrong gradient.
pub fn faulty_square(t: &mut Tape<f64>, x: &Var<f64>) -> Var<f64> {
    let xv = x.value().clone();
    let y = xv.map(|v| v * v);
    t.record("faulty_square", y, &[x], move |g, sink| {
        if let Some(gx) = sink.slot(0) {
            for (i, o) in gx.iter_mut().enumerate() {
                *o += g[i] * 2.2 * xv.data()[i];
            }
        }
    })
}

/// Run the harness on [`faulty_square`]; a correct harness reports failure.
pub fn negative_control(seed: u64) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::randn([2, 3], 1.0, &mut rng);
    check_fn("faulty_square", &[x], seed, CheckConfig::default(), |t, xs| Ok(faulty_square(t, &xs[0])))
}
