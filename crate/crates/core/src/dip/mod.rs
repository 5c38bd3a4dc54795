//! Deep-Image-Prior engine: a randomly initialised skip network fitted to a
//! single image by Adam on a masked mean-squared error.
//!
//! Everything runs on `f64` on the calling thread, so a run is bit-for-bit
//! reproducible from its inputs and seed.

mod layers;
mod net;

pub use net::{init_network, NetworkState, OutputActivation, ParamInfo, ParamKind, SkipNetConfig};

use layers::Feat;
use ndarray::{Array3, ArrayView3};
use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Optimisation recipe for one fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSpec {
    pub steps: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainSpec {
    fn default() -> Self {
        Self {
            steps: 4000,
            learning_rate: 0.02,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::Config("adam eps must be positive".into()));
        }
        Ok(())
    }
}

/// Per-element loss weights `[C, H, W]`; `true` entries contribute to the loss.
#[derive(Debug, Clone, PartialEq)]
pub struct LossMask(ndarray::Array3<bool>);

impl LossMask {
    pub fn new(values: ndarray::Array3<bool>) -> Result<Self> {
        if !values.iter().any(|&v| v) {
            return Err(Error::EmptyRegion);
        }
        Ok(Self(values))
    }

    pub fn full(c: usize, h: usize, w: usize) -> Self {
        Self(ndarray::Array3::from_elem((c, h, w), true))
    }

    pub fn values(&self) -> ArrayView3<'_, bool> {
        self.0.view()
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&v| v).count()
    }
}

/// Mean of `(pred - target)^2` over the entries selected by `lmask`.
pub fn masked_mse(
    pred: ArrayView3<'_, f64>,
    target: ArrayView3<'_, f64>,
    lmask: &LossMask,
) -> Result<f64> {
    crate::data::check_same_shape(pred, target)?;
    if lmask.0.shape() != pred.shape() {
        return Err(Error::ShapeMismatch {
            expected: pred.shape().to_vec(),
            got: lmask.0.shape().to_vec(),
        });
    }
    let (sum, count) = pred
        .iter()
        .zip(target.iter())
        .zip(lmask.0.iter())
        .filter(|(_, &m)| m)
        .fold((0.0, 0usize), |(s, n), ((p, t), _)| (s + (p - t) * (p - t), n + 1));
    if count == 0 {
        return Err(Error::EmptyRegion);
    }
    Ok(sum / count as f64)
}

/// Loss and `dloss/dpred` for the flat buffers used during training.
fn mse_and_grad(pred: &[f64], target: &[f64], mask: &[bool], count: usize) -> (f64, Vec<f64>) {
    let n = count as f64;
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .zip(mask)
        .map(|((p, t), &m)| {
            if m {
                let d = p - t;
                loss += d * d;
                2.0 * d / n
            } else {
                0.0
            }
        })
        .collect();
    (loss / n, grad)
}

/// Fixed DIP input: uniform noise in `[0, 0.1)`, drawn from a stream separate from the weights.
pub fn noise_input(channels: usize, h: usize, w: usize, seed: u64) -> Array3<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6e6f_6973_655f_696e);
    Array3::from_shape_fn((channels, h, w), |_| rng.random::<f64>() * 0.1)
}

fn to_feat(a: ArrayView3<'_, f64>) -> Feat {
    let (c, h, w) = a.dim();
    Feat {
        c,
        h,
        w,
        data: a.iter().copied().collect(),
    }
}

fn from_feat(f: Feat) -> Array3<f64> {
    Array3::from_shape_vec((f.c, f.h, f.w), f.data).expect("feature buffer matches its shape")
}

/// Evaluates the network on `[Cin, H, W]`; H and W must be divisible by `2^scales`.
pub fn forward(net: &NetworkState, input: ArrayView3<'_, f64>) -> Result<Array3<f64>> {
    let (c, h, w) = input.dim();
    net.check_input(c, h, w)?;
    Ok(from_feat(net.forward_feat(&to_feat(input))))
}

/// Loss at the current weights and its gradient w.r.t. every parameter.
pub fn loss_and_gradient(
    net: &NetworkState,
    input: ArrayView3<'_, f64>,
    target: ArrayView3<'_, f64>,
    lmask: &LossMask,
) -> Result<(f64, Vec<f64>)> {
    let problem = Problem::new(net.config(), input, target, lmask)?;
    Ok(problem.loss_and_gradient(net))
}

/// Validated, flattened training data.
struct Problem {
    input: Feat,
    target: Vec<f64>,
    mask: Vec<bool>,
    count: usize,
}

impl Problem {
    fn new(
        config: &SkipNetConfig,
        input: ArrayView3<'_, f64>,
        target: ArrayView3<'_, f64>,
        lmask: &LossMask,
    ) -> Result<Self> {
        config.validate()?;
        let (c, h, w) = input.dim();
        if c != config.input_channels {
            return Err(Error::ShapeMismatch {
                expected: vec![config.input_channels, h, w],
                got: vec![c, h, w],
            });
        }
        let m = config.size_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(Error::Precondition(format!(
                "spatial size {h}x{w} is not divisible by {m}"
            )));
        }
        let want = [config.out_channels, h, w];
        if target.shape() != want {
            return Err(Error::ShapeMismatch {
                expected: want.to_vec(),
                got: target.shape().to_vec(),
            });
        }
        if lmask.0.shape() != want {
            return Err(Error::ShapeMismatch {
                expected: want.to_vec(),
                got: lmask.0.shape().to_vec(),
            });
        }
        Ok(Self {
            input: to_feat(input),
            target: target.iter().copied().collect(),
            mask: lmask.0.iter().copied().collect(),
            count: lmask.count(),
        })
    }

    fn loss_and_signs(&self, net: &NetworkState) -> (f64, Vec<bool>) {
        let (out, tape) = net.forward_tape(&self.input);
        (mse_and_grad(&out.data, &self.target, &self.mask, self.count).0, tape.activation_signs())
    }

    fn loss_and_gradient(&self, net: &NetworkState) -> (f64, Vec<f64>) {
        let (out, tape) = net.forward_tape(&self.input);
        let (loss, dout) = mse_and_grad(&out.data, &self.target, &self.mask, self.count);
        let dout = Feat { data: dout, ..out };
        (loss, net.backward(&tape, dout))
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], spec: &TrainSpec) {
        self.t += 1;
        let (b1, b2) = (spec.adam_beta1, spec.adam_beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= spec.learning_rate * m_hat / (v_hat.sqrt() + spec.adam_eps);
        }
    }
}

/// Result of [`train_dip`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Network output after the last update.
    pub output: Array3<f64>,
    /// Loss before each update, one entry per step.
    pub loss_trace: Vec<f64>,
}

/// Fits a freshly initialised network so that `forward(input)` matches `target` where `lmask` is set.
pub fn train_dip(
    config: &SkipNetConfig,
    input: ArrayView3<'_, f64>,
    target: ArrayView3<'_, f64>,
    lmask: &LossMask,
    spec: &TrainSpec,
) -> Result<TrainOutcome> {
    spec.validate()?;
    let problem = Problem::new(config, input, target, lmask)?;
    let mut net = init_network(config, spec.seed)?;
    let mut adam = Adam::new(net.num_parameters());
    let mut loss_trace = Vec::with_capacity(spec.steps);
    for step in 0..spec.steps {
        let (loss, grad) = problem.loss_and_gradient(&net);
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        loss_trace.push(loss);
        adam.step(net.values_mut(), &grad, spec);
        if log::log_enabled!(log::Level::Debug) && (step + 1) % 250 == 0 {
            log::debug!("step {}: loss {loss:.6}", step + 1);
        }
    }
    let output = from_feat(net.forward_feat(&problem.input));
    if output.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence {
            step: spec.steps,
            loss: f64::NAN,
        });
    }
    Ok(TrainOutcome { output, loss_trace })
}

/// Ridders' extrapolation of central differences of `f` at step sizes
/// `h, h/1.4, h/1.4^2, ...`, returning the estimate with the smallest
/// estimated error. `f` returns `None` when its argument lands on a kink.
fn ridders(mut f: impl FnMut(f64) -> Option<f64>, h: f64) -> Option<f64> {
    const SHRINK: f64 = 1.4;
    const TABLE: usize = 10;
    const SAFE: f64 = 2.0;
    let shrink2 = SHRINK * SHRINK;
    let mut central = |h: f64| Some((f(h)? - f(-h)?) / (2.0 * h));
    let mut prev = vec![central(h)?];
    let mut best = prev[0];
    let mut err = f64::INFINITY;
    let mut h = h;
    for i in 1..TABLE {
        h /= SHRINK;
        let mut row = vec![central(h)?];
        let mut fac = shrink2;
        for j in 1..=i {
            let v = (row[j - 1] * fac - prev[j - 1]) / (fac - 1.0);
            fac *= shrink2;
            let e = (v - row[j - 1]).abs().max((v - prev[j - 1]).abs());
            if e <= err {
                err = e;
                best = v;
            }
            row.push(v);
        }
        if (row[i] - prev[i - 1]).abs() >= SAFE * err {
            break;
        }
        prev = row;
    }
    Some(best)
}

/// Largest relative error between backprop and finite differences over
/// `n_probes` randomly chosen weights of a network initialised from `seed`.
///
/// The numerical derivative extrapolates central differences starting at step
/// `eps`. The error is `|a - n| / max(|a|, |n|, 1e-6 * max|grad|)`; the floor
/// keeps weights whose gradient is lost in roundoff from dominating the
/// result. A weight whose perturbation flips the sign of any leaky-ReLU input
/// sits on a kink where the loss is not differentiable, so it is passed over
/// and another weight is drawn in its place.
#[allow(clippy::too_many_arguments)]
pub fn grad_check(
    config: &SkipNetConfig,
    input: ArrayView3<'_, f64>,
    target: ArrayView3<'_, f64>,
    lmask: &LossMask,
    eps: f64,
    n_probes: usize,
    seed: u64,
) -> Result<f64> {
    if !(eps.is_finite() && eps > 0.0) {
        return Err(Error::Precondition(format!("eps must be positive, got {eps}")));
    }
    let problem = Problem::new(config, input, target, lmask)?;
    let mut net = init_network(config, seed)?;
    let (_, analytic) = problem.loss_and_gradient(&net);
    let n = net.num_parameters();
    let floor = (1e-6 * analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()))).max(1e-300);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let (_, signs) = problem.loss_and_signs(&net);
    let mut worst = 0.0f64;
    let mut probed = 0;
    for i in order {
        if probed == n_probes {
            break;
        }
        let orig = net.values()[i];
        let numeric = ridders(
            |d| {
                net.values_mut()[i] = orig + d;
                let (loss, s) = problem.loss_and_signs(&net);
                net.values_mut()[i] = orig;
                (s == signs).then_some(loss)
            },
            eps,
        );
        let Some(numeric) = numeric else { continue };
        probed += 1;
        let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(floor);
        worst = worst.max(rel);
    }
    if probed < n_probes.min(n) {
        return Err(Error::Precondition(format!(
            "only {probed} of {n_probes} probes avoid activation kinks at eps {eps}"
        )));
    }
    Ok(worst)
}
