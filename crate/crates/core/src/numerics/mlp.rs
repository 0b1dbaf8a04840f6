//! Fixed-topology feed-forward network with explicit activation tapes.
//!
//! A network is a chain of dense layers `y = act(W x + b)`. Conditional
//! networks (the denoiser) see `concat(state, time_features(t), class_row)`
//! as their input; plain networks (classifier, feature extractor) see the
//! state only. `forward` returns a [`Tape`] holding every layer input and
//! output, which is all `backward` needs for exact reverse-mode gradients.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use super::linalg::{check_len, ensure_finite, Mat};
use super::rng::Rng;
use crate::error::{Error, Result};

static GENERATION: AtomicU64 = AtomicU64::new(1);

fn next_generation() -> u64 {
    GENERATION.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// Shape `(out, in)`.
    pub weight: Mat,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

/// Timestep and class conditioning appended to the state input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conditioning {
    /// Number of sinusoidal timestep features (even).
    pub time_dim: usize,
    /// Largest valid timestep; valid range is `1..=max_t`.
    pub max_t: usize,
    /// One learned row per class label.
    pub class_table: Mat,
}

/// Shape description used to build a fresh network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub state_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    /// `None` for plain (unconditioned) networks.
    pub conditioning: Option<ConditioningSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditioningSpec {
    pub time_dim: usize,
    pub max_t: usize,
    pub num_classes: usize,
    pub class_dim: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp {
    state_dim: usize,
    conditioning: Option<Conditioning>,
    layers: Vec<Dense>,
    #[serde(skip, default = "next_generation")]
    generation: u64,
}

impl PartialEq for Mlp {
    fn eq(&self, other: &Self) -> bool {
        self.state_dim == other.state_dim
            && self.conditioning == other.conditioning
            && self.layers == other.layers
    }
}

/// Activation record of one forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    generation: u64,
    class_id: Option<usize>,
    /// `inputs[l]` is the input to layer `l`; `outputs[l]` its activation.
    inputs: Vec<Vec<f64>>,
    outputs: Vec<Vec<f64>>,
}

impl Tape {
    pub fn layer_output(&self, layer: usize) -> &[f64] {
        &self.outputs[layer]
    }

    pub fn output(&self) -> &[f64] {
        self.outputs.last().expect("tape has at least one layer")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseGrad {
    pub weight: Mat,
    pub bias: Vec<f64>,
}

/// Gradients with the same layout as an [`Mlp`]'s parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grads {
    pub layers: Vec<DenseGrad>,
    pub class_table: Option<Mat>,
}

/// Sinusoidal features of an integer timestep.
pub fn time_features(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for k in 0..half {
        let freq = (-(k as f64) / half as f64 * 10_000f64.ln()).exp();
        out.push((t as f64 * freq).sin());
    }
    for k in 0..half {
        let freq = (-(k as f64) / half as f64 * 10_000f64.ln()).exp();
        out.push((t as f64 * freq).cos());
    }
    out
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the activation output `y`.
    #[inline]
    fn grad_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

impl Mlp {
    /// Builds a network with `N(0, 1/fan_in)` weights, zero biases and
    /// standard-normal class embeddings.
    pub fn build(spec: &MlpSpec, rng: &mut Rng) -> Result<Self> {
        if spec.state_dim == 0 || spec.output_dim == 0 {
            return Err(Error::argument("network dimensions must be positive"));
        }
        let conditioning = match spec.conditioning {
            None => None,
            Some(c) => {
                if c.time_dim % 2 != 0 {
                    return Err(Error::argument("time_dim must be even"));
                }
                if c.num_classes == 0 || c.max_t == 0 {
                    return Err(Error::argument("conditioning needs classes and timesteps"));
                }
                let mut table = Mat::zeros(c.num_classes, c.class_dim);
                for v in table.as_mut_slice() {
                    *v = rng.standard_normal();
                }
                Some(Conditioning {
                    time_dim: c.time_dim,
                    max_t: c.max_t,
                    class_table: table,
                })
            }
        };
        let in_dim = spec.state_dim
            + conditioning
                .as_ref()
                .map_or(0, |c| c.time_dim + c.class_table.cols());
        let mut sizes = vec![in_dim];
        sizes.extend(&spec.hidden);
        sizes.push(spec.output_dim);
        let n = sizes.len() - 1;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let scale = 1.0 / (fan_in as f64).sqrt();
                let mut weight = Mat::zeros(fan_out, fan_in);
                for v in weight.as_mut_slice() {
                    *v = scale * rng.standard_normal();
                }
                Dense {
                    weight,
                    bias: vec![0.0; fan_out],
                    activation: if i + 1 == n {
                        Activation::Identity
                    } else {
                        Activation::Tanh
                    },
                }
            })
            .collect();
        Ok(Mlp {
            state_dim: spec.state_dim,
            conditioning,
            layers,
            generation: next_generation(),
        })
    }

    /// Assembles a network from explicit layers; validates the chain.
    pub fn from_layers(
        state_dim: usize,
        conditioning: Option<Conditioning>,
        layers: Vec<Dense>,
    ) -> Result<Self> {
        let mut expected = state_dim
            + conditioning
                .as_ref()
                .map_or(0, |c| c.time_dim + c.class_table.cols());
        if layers.is_empty() {
            return Err(Error::argument("network needs at least one layer"));
        }
        for layer in &layers {
            check_len("Mlp layer input", expected, layer.weight.cols())?;
            check_len("Mlp layer bias", layer.weight.rows(), layer.bias.len())?;
            ensure_finite(layer.weight.as_slice(), "Mlp weights")?;
            ensure_finite(&layer.bias, "Mlp biases")?;
            expected = layer.weight.rows();
        }
        Ok(Mlp {
            state_dim,
            conditioning,
            layers,
            generation: next_generation(),
        })
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.rows())
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn conditioning(&self) -> Option<&Conditioning> {
        self.conditioning.as_ref()
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.conditioning.as_ref().map(|c| c.class_table.rows())
    }

    /// Mutable access invalidates outstanding tapes.
    pub fn layers_mut(&mut self) -> &mut [Dense] {
        self.generation = next_generation();
        &mut self.layers
    }

    pub fn conditioning_mut(&mut self) -> Option<&mut Conditioning> {
        self.generation = next_generation();
        self.conditioning.as_mut()
    }

    /// Replaces the class table with a zero table of `num_classes` rows.
    pub fn reset_class_table(&mut self, num_classes: usize) -> Result<()> {
        let cond = self
            .conditioning
            .as_mut()
            .ok_or_else(|| Error::argument("network has no class embedding"))?;
        if num_classes == 0 {
            return Err(Error::argument("class table needs at least one row"));
        }
        cond.class_table = Mat::zeros(num_classes, cond.class_table.cols());
        self.generation = next_generation();
        Ok(())
    }

    fn assemble_input(&self, state: &[f64], t: usize, class_id: usize) -> Result<Vec<f64>> {
        let cond = self
            .conditioning
            .as_ref()
            .ok_or_else(|| Error::argument("conditional forward on a plain network"))?;
        check_len("forward state", self.state_dim, state.len())?;
        if t == 0 || t > cond.max_t {
            return Err(Error::argument(format!(
                "timestep {t} outside [1, {}]",
                cond.max_t
            )));
        }
        if class_id >= cond.class_table.rows() {
            return Err(Error::Label {
                label: class_id,
                size: cond.class_table.rows(),
            });
        }
        let mut input = Vec::with_capacity(self.layers[0].weight.cols());
        input.extend_from_slice(state);
        input.extend(time_features(t, cond.time_dim));
        input.extend_from_slice(cond.class_table.row(class_id));
        Ok(input)
    }

    /// Conditional forward pass `f(state, t, class_id)`.
    pub fn forward(&self, state: &[f64], t: usize, class_id: usize) -> Result<(Vec<f64>, Tape)> {
        ensure_finite(state, "forward input")?;
        let input = self.assemble_input(state, t, class_id)?;
        self.run(input, Some(class_id))
    }

    /// Forward pass of an unconditioned network.
    pub fn forward_plain(&self, x: &[f64]) -> Result<(Vec<f64>, Tape)> {
        if self.conditioning.is_some() {
            return Err(Error::argument("plain forward on a conditional network"));
        }
        check_len("forward state", self.state_dim, x.len())?;
        ensure_finite(x, "forward input")?;
        self.run(x.to_vec(), None)
    }

    fn run(&self, input: Vec<f64>, class_id: Option<usize>) -> Result<(Vec<f64>, Tape)> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut x = input;
        for layer in &self.layers {
            let mut z = layer.weight.matvec(&x)?;
            for (zi, b) in z.iter_mut().zip(&layer.bias) {
                *zi = layer.activation.apply(*zi + b);
            }
            inputs.push(x);
            x = z.clone();
            outputs.push(z);
        }
        ensure_finite(&x, "forward output")?;
        Ok((
            x,
            Tape {
                generation: self.generation,
                class_id,
                inputs,
                outputs,
            },
        ))
    }

    /// Reverse pass returning fresh parameter gradients and the gradient
    /// with respect to the state input.
    pub fn backward(&self, tape: &Tape, grad_output: &[f64]) -> Result<(Grads, Vec<f64>)> {
        let mut grads = Grads::zeros_like(self);
        let input_grad = self.backward_into(tape, grad_output, 1.0, &mut grads)?;
        Ok((grads, input_grad))
    }

    /// Accumulates `scale ·` parameter gradients into `acc`.
    pub fn backward_into(
        &self,
        tape: &Tape,
        grad_output: &[f64],
        scale: f64,
        acc: &mut Grads,
    ) -> Result<Vec<f64>> {
        if tape.generation != self.generation || tape.inputs.len() != self.layers.len() {
            return Err(Error::State(
                "tape was recorded against different parameters".into(),
            ));
        }
        check_len("backward grad_output", self.output_dim(), grad_output.len())?;
        ensure_finite(grad_output, "backward grad_output")?;
        let mut g = grad_output.to_vec();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            for (gi, y) in g.iter_mut().zip(&tape.outputs[l]) {
                *gi *= layer.activation.grad_from_output(*y);
            }
            let dst = &mut acc.layers[l];
            dst.weight.add_outer(&g, &tape.inputs[l], scale)?;
            for (db, gi) in dst.bias.iter_mut().zip(&g) {
                *db += scale * gi;
            }
            g = layer.weight.matvec_t(&g)?;
        }
        if let (Some(cond), Some(class_id)) = (&self.conditioning, tape.class_id) {
            let offset = self.state_dim + cond.time_dim;
            let table = acc
                .class_table
                .as_mut()
                .ok_or_else(|| Error::State("gradient buffer lacks class table".into()))?;
            for (dst, gi) in table.row_mut(class_id).iter_mut().zip(&g[offset..]) {
                *dst += scale * gi;
            }
        }
        g.truncate(self.state_dim);
        ensure_finite(&g, "backward input gradient")?;
        Ok(g)
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.rows() * l.weight.cols() + l.bias.len())
            .sum::<usize>()
            + self
                .conditioning
                .as_ref()
                .map_or(0, |c| c.class_table.rows() * c.class_table.cols())
    }

    /// Flattened parameters: per layer weights then bias, then class table.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.bias);
        }
        if let Some(c) = &self.conditioning {
            out.extend_from_slice(c.class_table.as_slice());
        }
        out
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        check_len("set_params_flat", self.num_params(), flat.len())?;
        ensure_finite(flat, "set_params_flat")?;
        let mut i = 0;
        for l in &mut self.layers {
            let n = l.weight.as_slice().len();
            l.weight.as_mut_slice().copy_from_slice(&flat[i..i + n]);
            i += n;
            let n = l.bias.len();
            l.bias.copy_from_slice(&flat[i..i + n]);
            i += n;
        }
        if let Some(c) = &mut self.conditioning {
            let n = c.class_table.as_slice().len();
            c.class_table.as_mut_slice().copy_from_slice(&flat[i..i + n]);
        }
        self.generation = next_generation();
        Ok(())
    }
}

impl Grads {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        Grads {
            layers: mlp
                .layers
                .iter()
                .map(|l| DenseGrad {
                    weight: Mat::zeros(l.weight.rows(), l.weight.cols()),
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
            class_table: mlp
                .conditioning
                .as_ref()
                .map(|c| Mat::zeros(c.class_table.rows(), c.class_table.cols())),
        }
    }

    fn for_each_mut(&mut self, mut f: impl FnMut(&mut f64)) {
        for l in &mut self.layers {
            l.weight.as_mut_slice().iter_mut().for_each(&mut f);
            l.bias.iter_mut().for_each(&mut f);
        }
        if let Some(t) = &mut self.class_table {
            t.as_mut_slice().iter_mut().for_each(&mut f);
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.bias);
        }
        if let Some(t) = &self.class_table {
            out.extend_from_slice(t.as_slice());
        }
        out
    }

    pub fn scale(&mut self, s: f64) {
        self.for_each_mut(|v| *v *= s);
    }

    /// `self += a · other`.
    pub fn axpy(&mut self, a: f64, other: &Grads) -> Result<()> {
        if self.layers.len() != other.layers.len()
            || self.class_table.is_some() != other.class_table.is_some()
        {
            return Err(Error::Dimension {
                context: "Grads::axpy",
                expected: self.layers.len(),
                got: other.layers.len(),
            });
        }
        for (d, s) in self.layers.iter_mut().zip(&other.layers) {
            if !d.weight.same_shape(&s.weight) {
                return Err(Error::Dimension {
                    context: "Grads::axpy weight",
                    expected: d.weight.as_slice().len(),
                    got: s.weight.as_slice().len(),
                });
            }
            for (x, y) in d.weight.as_mut_slice().iter_mut().zip(s.weight.as_slice()) {
                *x += a * y;
            }
            for (x, y) in d.bias.iter_mut().zip(&s.bias) {
                *x += a * y;
            }
        }
        if let (Some(d), Some(s)) = (&mut self.class_table, &other.class_table) {
            for (x, y) in d.as_mut_slice().iter_mut().zip(s.as_slice()) {
                *x += a * y;
            }
        }
        Ok(())
    }

    pub fn norm(&self) -> f64 {
        self.flat().iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.flat().iter().all(|v| v.is_finite())
    }

    pub fn is_zero(&self) -> bool {
        self.flat().iter().all(|v| *v == 0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear(w: Mat, b: Vec<f64>) -> Mlp {
        let n = w.cols();
        Mlp::from_layers(
            n,
            None,
            vec![Dense {
                weight: w,
                bias: b,
                activation: Activation::Identity,
            }],
        )
        .unwrap()
    }

    #[test]
    fn zero_network_outputs_zero() {
        let mut rng = Rng::new(0);
        let spec = MlpSpec {
            state_dim: 3,
            hidden: vec![5],
            output_dim: 3,
            conditioning: Some(ConditioningSpec {
                time_dim: 4,
                max_t: 10,
                num_classes: 2,
                class_dim: 2,
            }),
        };
        let mut net = Mlp::build(&spec, &mut rng).unwrap();
        let zeros = vec![0.0; net.num_params()];
        net.set_params_flat(&zeros).unwrap();
        let (y, _) = net.forward(&[1.0, -2.0, 0.5], 3, 1).unwrap();
        assert_eq!(y, vec![0.0; 3]);
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let net = linear(Mat::identity(3), vec![0.0; 3]);
        let v = [0.3, -1.2, 4.0];
        assert_eq!(net.forward_plain(&v).unwrap().0, v.to_vec());
    }

    #[test]
    fn linear_layer_gradients_closed_form() {
        let w = Mat::from_vec(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.0]).unwrap();
        let net = linear(w, vec![0.1, -0.2]);
        let x = [0.5, -1.0, 2.0];
        let g = [0.7, -0.3];
        let (_, tape) = net.forward_plain(&x).unwrap();
        let (grads, input_grad) = net.backward(&tape, &g).unwrap();
        for r in 0..2 {
            for c in 0..3 {
                assert_eq!(grads.layers[0].weight.get(r, c), g[r] * x[c]);
            }
        }
        assert_eq!(grads.layers[0].bias, g.to_vec());
        assert_eq!(input_grad, net.layers()[0].weight.matvec_t(&g).unwrap());
    }

    #[test]
    fn zero_grad_output_gives_zero_grads() {
        let mut rng = Rng::new(2);
        let spec = MlpSpec {
            state_dim: 2,
            hidden: vec![4, 4],
            output_dim: 3,
            conditioning: None,
        };
        let net = Mlp::build(&spec, &mut rng).unwrap();
        let (_, tape) = net.forward_plain(&[0.2, 0.4]).unwrap();
        let (g, ig) = net.backward(&tape, &[0.0; 3]).unwrap();
        assert!(g.is_zero());
        assert!(ig.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn stale_tape_rejected() {
        let mut rng = Rng::new(3);
        let spec = MlpSpec {
            state_dim: 2,
            hidden: vec![3],
            output_dim: 2,
            conditioning: None,
        };
        let mut net = Mlp::build(&spec, &mut rng).unwrap();
        let (_, tape) = net.forward_plain(&[0.1, 0.2]).unwrap();
        let p = net.params_flat();
        net.set_params_flat(&p).unwrap();
        assert!(matches!(
            net.backward(&tape, &[1.0, 1.0]),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn label_and_timestep_checked() {
        let mut rng = Rng::new(4);
        let spec = MlpSpec {
            state_dim: 2,
            hidden: vec![3],
            output_dim: 2,
            conditioning: Some(ConditioningSpec {
                time_dim: 2,
                max_t: 5,
                num_classes: 3,
                class_dim: 2,
            }),
        };
        let net = Mlp::build(&spec, &mut rng).unwrap();
        assert!(matches!(
            net.forward(&[0.0, 0.0], 1, 3),
            Err(Error::Label { label: 3, size: 3 })
        ));
        assert!(net.forward(&[0.0, 0.0], 0, 0).is_err());
        assert!(net.forward(&[0.0, 0.0], 6, 0).is_err());
        assert!(matches!(
            net.forward(&[0.0], 1, 0),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn serde_roundtrip_is_exact() {
        let mut rng = Rng::new(8);
        let spec = MlpSpec {
            state_dim: 3,
            hidden: vec![4],
            output_dim: 3,
            conditioning: Some(ConditioningSpec {
                time_dim: 4,
                max_t: 7,
                num_classes: 2,
                class_dim: 3,
            }),
        };
        let net = Mlp::build(&spec, &mut rng).unwrap();
        let s = serde_json::to_string(&net).unwrap();
        let back: Mlp = serde_json::from_str(&s).unwrap();
        assert_eq!(net, back);
    }
}
