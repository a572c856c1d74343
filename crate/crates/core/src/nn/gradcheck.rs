//! Central finite-difference checks of analytic gradients.
//!
//! The forward closure is the only thing the check relies on, so it stays
//! independent of the backward pass it verifies.

use rand::Rng;

use super::layers::BatchNorm;
use super::loss::softmax_cross_entropy;
use super::param::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::{seed_rng, LayerMode};
use crate::error::Result;
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Gradients smaller than this fraction of the loss magnitude are compared in
/// absolute terms; central differences cannot resolve them any better.
const SCALE_FLOOR: f64 = 1e-4;

/// Shrinking steps tried when a perturbation flips a ReLU or pooling branch.
const EPS_RETRIES: usize = 3;

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Coordinates where every step size crossed a non-differentiable point.
    pub skipped: usize,
    pub max_rel_error: f64,
    pub worst: Option<Mismatch>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_error <= tol
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        self.skipped += other.skipped;
        if other.max_rel_error > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
            if other.worst.is_some() {
                self.worst = other.worst;
            }
        }
    }
}

/// One random coordinate from every parameter tensor, then uniform draws over
/// all scalars until `count` coordinates are chosen.
pub fn sample_coordinates<R: Rng + ?Sized>(
    store: &ParamStore<f64>,
    count: usize,
    rng: &mut R,
) -> Vec<(ParamId, usize)> {
    let ids: Vec<ParamId> = store.ids().collect();
    let mut picks: Vec<(ParamId, usize)> = ids
        .iter()
        .map(|&id| (id, rng.gen_range(0..store.param(id).len())))
        .collect();
    let total = store.scalar_count();
    while picks.len() < count {
        let mut flat = rng.gen_range(0..total);
        for &id in &ids {
            let n = store.param(id).len();
            if flat < n {
                picks.push((id, flat));
                break;
            }
            flat -= n;
        }
    }
    picks
}

/// Compare the gradients already accumulated in `store` against central
/// differences of `forward`, which must return the scalar loss and the tape's
/// branch signature for the current parameter values.
pub fn check_coordinates<F>(
    store: &mut ParamStore<f64>,
    coords: &[(ParamId, usize)],
    eps: f64,
    mut forward: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut ParamStore<f64>) -> Result<(f64, u64)>,
{
    let (base_loss, base_sig) = forward(store)?;
    let floor = SCALE_FLOOR * base_loss.abs().max(1.0);
    let mut report = GradCheckReport::default();
    for &(id, idx) in coords {
        let analytic = store.param(id).grad.data()[idx];
        let original = store.param(id).value.data()[idx];
        let mut numeric = None;
        let mut step = eps;
        for _ in 0..EPS_RETRIES {
            store.param_mut(id).value.data_mut()[idx] = original + step;
            let (plus, sig_plus) = forward(store)?;
            store.param_mut(id).value.data_mut()[idx] = original - step;
            let (minus, sig_minus) = forward(store)?;
            store.param_mut(id).value.data_mut()[idx] = original;
            if sig_plus == base_sig && sig_minus == base_sig {
                numeric = Some((plus - minus) / (2.0 * step));
                break;
            }
            step /= 10.0;
        }
        let Some(numeric) = numeric else {
            report.skipped += 1;
            continue;
        };
        report.checked += 1;
        let err = relative_error(analytic, numeric, floor);
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some(Mismatch {
                param: store.param(id).name.clone(),
                index: idx,
                analytic,
                numeric,
            });
        }
    }
    Ok(report)
}

/// Check every coordinate of every parameter.
pub fn check_all<F>(store: &mut ParamStore<f64>, eps: f64, forward: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut ParamStore<f64>) -> Result<(f64, u64)>,
{
    let coords: Vec<(ParamId, usize)> = store
        .ids()
        .flat_map(|id| (0..store.param(id).len()).map(move |i| (id, i)))
        .collect();
    check_coordinates(store, &coords, eps, forward)
}

/// Gradient check of `build` under the scalar loss `Σ r ⊙ y`, where `y` is the
/// graph output and `r` a fixed random projection.
pub fn check_projected<R, F>(
    store: &mut ParamStore<f64>,
    mode: LayerMode,
    eps: f64,
    rng: &mut R,
    mut build: F,
) -> Result<GradCheckReport>
where
    R: Rng + ?Sized,
    F: FnMut(&mut Tape<f64>, &mut ParamStore<f64>) -> Result<Var>,
{
    let mut tape = Tape::new(mode);
    let y = build(&mut tape, store)?;
    let proj = Tensor::from_fn(tape.dims(y), |_| rng.gen_range(-1.0..1.0));
    store.zero_grads();
    tape.backward(y, proj.clone(), store)?;
    check_all(store, eps, |s| {
        let mut tape = Tape::new(mode);
        let y = build(&mut tape, s)?;
        let loss = tape.value(y).data().iter().zip(proj.data()).map(|(a, b)| a * b).sum();
        Ok((loss, tape.branch_signature()))
    })
}

/// Gradient check of mean softmax cross-entropy on random `B×C` logits.
pub fn check_cross_entropy<R: Rng + ?Sized>(
    b: usize,
    c: usize,
    eps: f64,
    rng: &mut R,
) -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let id = store.add("logits", Tensor::from_fn(&[b, c], |_| rng.gen_range(-3.0..3.0)));
    let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..c)).collect();
    let ce = softmax_cross_entropy(&store.param(id).value, &labels)?;
    store.param_mut(id).grad = ce.grad;
    check_all(&mut store, eps, |s| {
        Ok((softmax_cross_entropy(&s.param(id).value, &labels)?.loss, 0))
    })
}

fn random_tensor<R: Rng + ?Sized>(rng: &mut R, dims: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(dims, |_| rng.gen_range(-1.0..1.0))
}

/// One randomly shaped finite-difference check per layer type.
pub fn layer_checks<R: Rng + ?Sized>(rng: &mut R) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let eps = DEFAULT_EPS;
    let mut out = Vec::new();

    {
        let (b, c, k) = (rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(1..=3));
        let (h, w) = (rng.gen_range(3..=7), rng.gen_range(3..=7));
        let (kh, kw) = (rng.gen_range(1..=h), rng.gen_range(1..=w));
        let mut s = ParamStore::new();
        let x = s.add("x", random_tensor(rng, &[b, c, h, w]));
        let kern = s.add("kernel", random_tensor(rng, &[k, c, kh, kw]));
        let bias = s.add("bias", random_tensor(rng, &[k]));
        let r = check_projected(&mut s, LayerMode::Train, eps, rng, |t, s| {
            let (x, kern, bias) = (t.param(s, x), t.param(s, kern), t.param(s, bias));
            t.conv2d(x, kern, bias)
        })?;
        out.push(("conv2d", r));
    }
    {
        let (b, k) = (rng.gen_range(1..=2), rng.gen_range(1..=3));
        let (h, w) = (rng.gen_range(2..=9), rng.gen_range(2..=9));
        let (ph, pw) = (rng.gen_range(1..=h), rng.gen_range(1..=w));
        let mut s = ParamStore::new();
        let x = s.add("x", random_tensor(rng, &[b, k, h, w]));
        let r = check_projected(&mut s, LayerMode::Train, eps, rng, |t, s| {
            let x = t.param(s, x);
            t.maxpool2d(x, ph, pw)
        })?;
        out.push(("maxpool2d", r));
    }
    {
        let (b, c, k) = (rng.gen_range(1..=2), rng.gen_range(1..=2), rng.gen_range(1..=3));
        let (h, w) = (rng.gen_range(4..=8), rng.gen_range(4..=8));
        let (kh, kw) = (rng.gen_range(1..=h - 1), rng.gen_range(1..=w - 1));
        let (ph, pw) = (rng.gen_range(1..=h - kh + 1), rng.gen_range(1..=w - kw + 1));
        let mut s = ParamStore::new();
        let x = s.add("x", random_tensor(rng, &[b, c, h, w]));
        let kern = s.add("kernel", random_tensor(rng, &[k, c, kh, kw]));
        let bias = s.add("bias", random_tensor(rng, &[k]).map(|v| v + 0.5));
        let r = check_projected(&mut s, LayerMode::Train, eps, rng, |t, s| {
            let (x, kern, bias) = (t.param(s, x), t.param(s, kern), t.param(s, bias));
            t.conv_relu_maxpool(x, kern, bias, ph, pw)
        })?;
        out.push(("conv_relu_maxpool", r));
    }
    {
        let dims = [rng.gen_range(1..=3), rng.gen_range(1..=4), rng.gen_range(1..=9), 1];
        let mut s = ParamStore::new();
        let x = s.add("x", random_tensor(rng, &dims));
        let r = check_projected(&mut s, LayerMode::Train, eps, rng, |t, s| {
            let x = t.param(s, x);
            t.global_maxpool(x)
        })?;
        out.push(("global_maxpool", r));
    }
    {
        let (b, n, m) = (rng.gen_range(1..=4), rng.gen_range(1..=8), rng.gen_range(1..=6));
        let mut s = ParamStore::new();
        let x = s.add("x", random_tensor(rng, &[b, n]));
        let w = s.add("weight", random_tensor(rng, &[m, n]));
        let bias = s.add("bias", random_tensor(rng, &[m]));
        let r = check_projected(&mut s, LayerMode::Train, eps, rng, |t, s| {
            let (x, w, bias) = (t.param(s, x), t.param(s, w), t.param(s, bias));
            t.dense(x, w, bias)
        })?;
        out.push(("dense", r));
    }
    {
        let dims = [rng.gen_range(1..=4), rng.gen_range(1..=8)];
        let mut s = ParamStore::new();
        let x = s.add("x", random_tensor(rng, &dims));
        let r = check_projected(&mut s, LayerMode::Train, eps, rng, |t, s| {
            let x = t.param(s, x);
            Ok(t.relu(x))
        })?;
        out.push(("relu", r));
    }
    for (name, mode) in [("batch_norm_train", LayerMode::Train), ("batch_norm_eval", LayerMode::Eval)] {
        let (b, n) = (rng.gen_range(2..=8), rng.gen_range(1..=5));
        let mut s = ParamStore::new();
        let x = s.add("x", random_tensor(rng, &[b, n]).map(|v| 3.0 * v + 0.5));
        let bn = BatchNorm::new(&mut s, "bn", n);
        s.param_mut(bn.gamma).value = random_tensor(rng, &[n]).map(|v| v + 1.5);
        s.param_mut(bn.beta).value = random_tensor(rng, &[n]);
        let st = s.stats_mut(bn.stats);
        for (m, v) in st.mean.iter_mut().zip(st.var.iter_mut()) {
            *m = rng.gen_range(-1.0..1.0);
            *v = rng.gen_range(0.5..2.0);
        }
        let r = check_projected(&mut s, mode, eps, rng, |t, s| {
            let x = t.param(s, x);
            bn.forward(t, s, x)
        })?;
        out.push((name, r));
    }
    {
        let dims = [rng.gen_range(1..=4), rng.gen_range(2..=10)];
        let rate = rng.gen_range(0.1..0.7);
        let mask_seed = rng.gen();
        let mut s = ParamStore::new();
        let x = s.add("x", random_tensor(rng, &dims));
        let r = check_projected(&mut s, LayerMode::Train, eps, rng, |t, s| {
            let x = t.param(s, x);
            t.dropout(x, rate, &mut seed_rng(mask_seed))
        })?;
        out.push(("dropout", r));
    }
    {
        let b = rng.gen_range(1..=3);
        let (n1, n2) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
        let mut s = ParamStore::new();
        let a = s.add("a", random_tensor(rng, &[b, n1]));
        let c = s.add("c", random_tensor(rng, &[b, 2, n2]));
        let r = check_projected(&mut s, LayerMode::Train, eps, rng, |t, s| {
            let (a, c) = (t.param(s, a), t.param(s, c));
            let c = t.flatten(c)?;
            t.concat(&[c, a])
        })?;
        out.push(("flatten_concat", r));
    }
    let (b, c) = (rng.gen_range(1..=6), rng.gen_range(2..=5));
    out.push(("softmax_cross_entropy", check_cross_entropy(b, c, eps, rng)?));
    Ok(out)
}
