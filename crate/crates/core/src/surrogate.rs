//! Two-hidden-layer ReLU surrogate with hand-written reverse-mode gradients.
//!
//! Parameters live in one flat buffer. Layer `l` occupies a row-major
//! `out x in` weight block followed by its `out` biases, which keeps the
//! optimizer and finite-difference checks layout-agnostic.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::task::OfflineDataset;

/// Floor below which the adapted output scale is considered degenerate.
pub const ADAPT_STD_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layer_sizes: Vec<usize>,
    params: Vec<f64>,
}

/// Per-input activations kept for the backward pass.
#[derive(Debug, Default, Clone)]
pub struct Trace {
    /// `acts[0]` is the input; `acts[l + 1]` the post-activation of layer `l`.
    acts: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    delta: Vec<f64>,
    delta_prev: Vec<f64>,
}

impl Mlp {
    pub fn zeros(layer_sizes: Vec<usize>) -> Result<Self> {
        if layer_sizes.len() < 2 || layer_sizes.iter().any(|&n| n == 0) {
            return Err(Error::validation(
                "model.layer_sizes",
                format!("{layer_sizes:?} must have >= 2 positive entries"),
            ));
        }
        if *layer_sizes.last().unwrap() != 1 {
            return Err(Error::validation("model.layer_sizes", "output width must be 1"));
        }
        let n = layer_sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        Ok(Mlp {
            layer_sizes,
            params: vec![0.0; n],
        })
    }

    /// `[dim, hidden, hidden, 1]` with weights uniform in `±scale/sqrt(fan_in)`
    /// and zero biases.
    pub fn init(dim: usize, hidden: usize, seed: u64, scale: f64) -> Result<Self> {
        let mut net = Mlp::zeros(vec![dim, hidden, hidden, 1])?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in 0..net.num_layers() {
            let bound = scale / (net.layer_sizes[l] as f64).sqrt();
            for w in net.weights_mut(l) {
                *w = bound * (2.0 * rng.random::<f64>() - 1.0);
            }
        }
        Ok(net)
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn offset(&self, layer: usize) -> usize {
        self.layer_sizes[..=layer]
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    fn ranges(&self, layer: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let start = self.offset(layer);
        let (fan_in, fan_out) = (self.layer_sizes[layer], self.layer_sizes[layer + 1]);
        let w_end = start + fan_in * fan_out;
        (start..w_end, w_end..w_end + fan_out)
    }

    pub fn weights(&self, layer: usize) -> &[f64] {
        &self.params[self.ranges(layer).0]
    }

    pub fn weights_mut(&mut self, layer: usize) -> &mut [f64] {
        let r = self.ranges(layer).0;
        &mut self.params[r]
    }

    pub fn biases(&self, layer: usize) -> &[f64] {
        &self.params[self.ranges(layer).1]
    }

    pub fn biases_mut(&mut self, layer: usize) -> &mut [f64] {
        let r = self.ranges(layer).1;
        &mut self.params[r]
    }

    /// Forward pass that keeps the activations needed by [`Mlp::backward`].
    pub fn forward_traced(&self, x: &[f64], trace: &mut Trace) -> Result<f64> {
        check_len(self.input_dim(), x.len())?;
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("network input".into()));
        }
        let layers = self.num_layers();
        trace.acts.resize(layers + 1, Vec::new());
        trace.pre.resize(layers, Vec::new());
        trace.acts[0].clear();
        trace.acts[0].extend_from_slice(x);
        for l in 0..layers {
            let (fan_in, fan_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            let (wr, br) = self.ranges(l);
            let w = &self.params[wr];
            let b = &self.params[br];
            let (head, tail) = trace.acts.split_at_mut(l + 1);
            let input = &head[l];
            let pre = &mut trace.pre[l];
            pre.clear();
            for o in 0..fan_out {
                let row = &w[o * fan_in..(o + 1) * fan_in];
                let z = row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>() + b[o];
                if !z.is_finite() {
                    return Err(Error::NonFiniteActivation { layer: l });
                }
                pre.push(z);
            }
            let out = &mut tail[0];
            out.clear();
            if l + 1 == layers {
                out.extend_from_slice(pre);
            } else {
                out.extend(pre.iter().map(|&z| z.max(0.0)));
            }
        }
        Ok(trace.acts[layers][0])
    }

    pub fn forward(&self, x: &[f64]) -> Result<f64> {
        self.forward_traced(x, &mut Trace::default())
    }

    /// Smallest |pre-activation| over the hidden layers, used to keep
    /// finite-difference checks away from ReLU kinks.
    pub fn min_abs_preactivation(&self, x: &[f64]) -> Result<f64> {
        let mut trace = Trace::default();
        self.forward_traced(x, &mut trace)?;
        Ok(trace.pre[..self.num_layers() - 1]
            .iter()
            .flatten()
            .fold(f64::INFINITY, |m, z| m.min(z.abs())))
    }

    /// Adds `upstream * d h(x) / d theta` into `grad`; returns `h(x)`.
    ///
    /// When `input_grad` is given it receives `upstream * d h(x) / d x`.
    pub fn backprop_into(
        &self,
        x: &[f64],
        upstream: f64,
        grad: &mut [f64],
        input_grad: Option<&mut [f64]>,
        trace: &mut Trace,
    ) -> Result<f64> {
        let out = self.forward_traced(x, trace)?;
        self.backward(trace, upstream, grad, input_grad)?;
        Ok(out)
    }

    /// Reverse pass over a trace produced by [`Mlp::forward_traced`].
    pub fn backward(
        &self,
        trace: &mut Trace,
        upstream: f64,
        grad: &mut [f64],
        mut input_grad: Option<&mut [f64]>,
    ) -> Result<()> {
        check_len(self.params.len(), grad.len())?;
        if trace.acts.len() != self.num_layers() + 1 {
            return Err(Error::validation("trace", "backward called without a forward pass"));
        }
        if upstream == 0.0 && input_grad.is_none() {
            return Ok(());
        }
        let layers = self.num_layers();
        trace.delta.clear();
        trace.delta.push(upstream);
        for l in (0..layers).rev() {
            let (fan_in, fan_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            let (wr, br) = self.ranges(l);
            let input = &trace.acts[l];
            for o in 0..fan_out {
                let d = trace.delta[o];
                if d == 0.0 {
                    continue;
                }
                grad[br.start + o] += d;
                let row = &mut grad[wr.start + o * fan_in..wr.start + (o + 1) * fan_in];
                for (g, a) in row.iter_mut().zip(input) {
                    *g += d * a;
                }
            }
            if l == 0 && input_grad.is_none() {
                break;
            }
            let w = &self.params[wr];
            trace.delta_prev.clear();
            trace.delta_prev.resize(fan_in, 0.0);
            for o in 0..fan_out {
                let d = trace.delta[o];
                if d == 0.0 {
                    continue;
                }
                let row = &w[o * fan_in..(o + 1) * fan_in];
                for (p, wv) in trace.delta_prev.iter_mut().zip(row) {
                    *p += d * wv;
                }
            }
            if l > 0 {
                // ReLU subgradient at exactly zero is zero.
                for (p, z) in trace.delta_prev.iter_mut().zip(&trace.pre[l - 1]) {
                    if *z <= 0.0 {
                        *p = 0.0;
                    }
                }
            } else if let Some(ig) = input_grad.as_deref_mut() {
                ig.copy_from_slice(&trace.delta_prev);
            }
            std::mem::swap(&mut trace.delta, &mut trace.delta_prev);
        }
        Ok(())
    }

    /// Gradient of `sum_i upstream_i * h(x_i)` with respect to every parameter.
    pub fn param_gradients<X: AsRef<[f64]>>(&self, inputs: &[X], upstream: &[f64]) -> Result<Vec<f64>> {
        check_len(inputs.len(), upstream.len())?;
        let mut grad = vec![0.0; self.params.len()];
        let mut trace = Trace::default();
        for (x, &g) in inputs.iter().zip(upstream) {
            if g != 0.0 {
                self.backprop_into(x.as_ref(), g, &mut grad, None, &mut trace)?;
            }
        }
        Ok(grad)
    }

    pub fn input_gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut scratch = vec![0.0; self.params.len()];
        let mut ig = vec![0.0; self.input_dim()];
        self.backprop_into(x, 1.0, &mut scratch, Some(&mut ig), &mut Trace::default())?;
        Ok(ig)
    }
}

/// Per-coordinate input standardization `(x - mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Standardizer {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Population mean and std per coordinate; zero-spread coordinates get std 1.
    pub fn fit(designs: &[Vec<f64>]) -> Result<Self> {
        let first = designs.first().ok_or(Error::Empty("design set"))?;
        let n = designs.len() as f64;
        let dim = first.len();
        let mut mean = vec![0.0; dim];
        for x in designs {
            check_len(dim, x.len())?;
            for (m, v) in mean.iter_mut().zip(x) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for x in designs {
            for ((s, v), m) in var.iter_mut().zip(x).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd < ADAPT_STD_FLOOR {
                    1.0
                } else {
                    sd
                }
            })
            .collect();
        Ok(Standardizer { mean, std })
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn invert(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| m + s * v)
            .collect()
    }
}

/// Output z-score constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Adaptation {
    pub mean: f64,
    pub std: f64,
    pub degenerate: bool,
}

/// The network together with its input standardization and output adaptation.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpSurrogate {
    pub net: Mlp,
    pub scaler: Standardizer,
    pub adaptation: Option<Adaptation>,
}

/// Fresh `[dim, hidden, hidden, 1]` surrogate with identity standardization.
pub fn init_surrogate(dim: usize, hidden: usize, seed: u64) -> Result<MlpSurrogate> {
    init_surrogate_scaled(dim, hidden, seed, 1.0)
}

pub fn init_surrogate_scaled(dim: usize, hidden: usize, seed: u64, scale: f64) -> Result<MlpSurrogate> {
    if dim == 0 || hidden == 0 {
        return Err(Error::validation("model", "dim and hidden must be >= 1"));
    }
    Ok(MlpSurrogate {
        net: Mlp::init(dim, hidden, seed, scale)?,
        scaler: Standardizer::identity(dim),
        adaptation: None,
    })
}

impl MlpSurrogate {
    pub fn dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn forward(&self, x: &[f64]) -> Result<f64> {
        check_len(self.dim(), x.len())?;
        self.net.forward(&self.scaler.apply(x))
    }

    /// Parameter gradients for raw (unstandardized) inputs.
    pub fn param_gradients<X: AsRef<[f64]>>(&self, inputs: &[X], upstream: &[f64]) -> Result<Vec<f64>> {
        let z: Vec<Vec<f64>> = inputs.iter().map(|x| self.scaler.apply(x.as_ref())).collect();
        self.net.param_gradients(&z, upstream)
    }

    /// Gradient of the raw output with respect to the raw input.
    pub fn input_gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len(self.dim(), x.len())?;
        let mut g = self.net.input_gradient(&self.scaler.apply(x))?;
        for (gi, s) in g.iter_mut().zip(&self.scaler.std) {
            *gi /= s;
        }
        Ok(g)
    }

    pub fn adaptation(&self) -> Result<Adaptation> {
        self.adaptation.ok_or(Error::NotAdapted)
    }

    pub fn predict_adapted(&self, x: &[f64]) -> Result<f64> {
        let a = self.adaptation()?;
        Ok((self.forward(x)? - a.mean) / a.std)
    }
}

/// Sets the output z-score constants from the surrogate's predictions on the
/// dataset designs.
pub fn zscore_adapt(model: &mut MlpSurrogate, dataset: &OfflineDataset) -> Result<Adaptation> {
    zscore_adapt_designs(model, &dataset.designs)
}

pub fn zscore_adapt_designs(model: &mut MlpSurrogate, designs: &[Vec<f64>]) -> Result<Adaptation> {
    if designs.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let preds = designs
        .iter()
        .map(|x| model.forward(x))
        .collect::<Result<Vec<_>>>()?;
    let n = preds.len() as f64;
    let mean = preds.iter().sum::<f64>() / n;
    let std = (preds.iter().map(|p| (p - mean) * (p - mean)).sum::<f64>() / n).sqrt();
    let adaptation = if std < ADAPT_STD_FLOOR {
        Adaptation {
            mean,
            std: 1.0,
            degenerate: true,
        }
    } else {
        Adaptation {
            mean,
            std,
            degenerate: false,
        }
    };
    model.adaptation = Some(adaptation);
    Ok(adaptation)
}

/// JSON layout of a persisted surrogate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SavedModel {
    pub layer_sizes: Vec<usize>,
    /// Row-major `out x in` weight matrix per layer.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
    pub adapt_mean: Option<f64>,
    pub adapt_std: Option<f64>,
    #[serde(default)]
    pub adapt_degenerate: bool,
    pub objective: Option<String>,
    pub seed: u64,
    pub config: serde_json::Value,
}

impl SavedModel {
    pub fn from_model(
        model: &MlpSurrogate,
        objective: Option<&str>,
        seed: u64,
        config: serde_json::Value,
    ) -> Self {
        let net = &model.net;
        SavedModel {
            layer_sizes: net.layer_sizes().to_vec(),
            weights: (0..net.num_layers()).map(|l| net.weights(l).to_vec()).collect(),
            biases: (0..net.num_layers()).map(|l| net.biases(l).to_vec()).collect(),
            input_mean: model.scaler.mean.clone(),
            input_std: model.scaler.std.clone(),
            adapt_mean: model.adaptation.map(|a| a.mean),
            adapt_std: model.adaptation.map(|a| a.std),
            adapt_degenerate: model.adaptation.is_some_and(|a| a.degenerate),
            objective: objective.map(str::to_owned),
            seed,
            config,
        }
    }

    pub fn to_model(&self) -> Result<MlpSurrogate> {
        let mut net = Mlp::zeros(self.layer_sizes.clone())?;
        check_len(net.num_layers(), self.weights.len())?;
        check_len(net.num_layers(), self.biases.len())?;
        for l in 0..net.num_layers() {
            check_len(net.weights(l).len(), self.weights[l].len())?;
            check_len(net.biases(l).len(), self.biases[l].len())?;
            net.weights_mut(l).copy_from_slice(&self.weights[l]);
            net.biases_mut(l).copy_from_slice(&self.biases[l]);
        }
        if !net.params().iter().all(|p| p.is_finite()) {
            return Err(Error::NonFinite("model parameters".into()));
        }
        check_len(net.input_dim(), self.input_mean.len())?;
        check_len(net.input_dim(), self.input_std.len())?;
        let adaptation = match (self.adapt_mean, self.adapt_std) {
            (Some(mean), Some(std)) if std > 0.0 => Some(Adaptation {
                mean,
                std,
                degenerate: self.adapt_degenerate,
            }),
            (None, None) => None,
            _ => return Err(Error::validation("model.adapt_std", "must be > 0 when set")),
        };
        Ok(MlpSurrogate {
            net,
            scaler: Standardizer {
                mean: self.input_mean.clone(),
                std: self.input_std.clone(),
            },
            adaptation,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::parse("model", e))?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))
    }
}
