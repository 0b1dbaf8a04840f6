//! First-order optimizers over [`Mlp`] parameters.

use serde::{Deserialize, Serialize};

use super::mlp::{Grads, Mlp};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerKind {
    Sgd {
        momentum: f64,
        weight_decay: f64,
    },
    Adam {
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
    },
}

impl OptimizerKind {
    pub fn sgd() -> Self {
        OptimizerKind::Sgd {
            momentum: 0.0,
            weight_decay: 0.0,
        }
    }

    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Which parameter groups receive updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamMask {
    /// Dense layers.
    pub backbone: bool,
    pub class_table: bool,
}

impl ParamMask {
    pub const ALL: ParamMask = ParamMask {
        backbone: true,
        class_table: true,
    };

    fn flags(&self, params: &Mlp) -> Vec<bool> {
        let mut out = Vec::with_capacity(params.num_params());
        for l in params.layers() {
            out.extend(std::iter::repeat_n(
                self.backbone,
                l.weight.as_slice().len() + l.bias.len(),
            ));
        }
        if let Some(c) = params.conditioning() {
            out.extend(std::iter::repeat_n(
                self.class_table,
                c.class_table.as_slice().len(),
            ));
        }
        out
    }
}

/// Stateful optimizer (momentum buffers, Adam moments).
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    mask: ParamMask,
    first: Vec<f64>,
    second: Vec<f64>,
    steps: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Result<Self> {
        if !(lr >= 0.0) || !lr.is_finite() {
            return Err(Error::argument(format!("learning rate must be >= 0, got {lr}")));
        }
        match kind {
            OptimizerKind::Sgd { momentum, weight_decay } => {
                if !(0.0..1.0).contains(&momentum) || weight_decay < 0.0 {
                    return Err(Error::argument("sgd momentum in [0,1), weight_decay >= 0"));
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps, weight_decay } => {
                if !(0.0..1.0).contains(&beta1)
                    || !(0.0..1.0).contains(&beta2)
                    || eps <= 0.0
                    || weight_decay < 0.0
                {
                    return Err(Error::argument("invalid adam hyperparameters"));
                }
            }
        }
        Ok(Optimizer {
            kind,
            lr,
            mask: ParamMask::ALL,
            first: Vec::new(),
            second: Vec::new(),
            steps: 0,
        })
    }

    pub fn with_mask(mut self, mask: ParamMask) -> Self {
        self.mask = mask;
        self
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Applies one descent step `params -= update(grads)`.
    ///
    /// Non-finite gradients are rejected before any parameter is touched.
    pub fn step(&mut self, params: &mut Mlp, grads: &Grads) -> Result<()> {
        let g = grads.flat();
        if g.len() != params.num_params() {
            return Err(Error::Dimension {
                context: "Optimizer::step",
                expected: params.num_params(),
                got: g.len(),
            });
        }
        if !g.iter().all(|v| v.is_finite()) {
            return Err(Error::numeric("optimizer received non-finite gradients"));
        }
        let trainable = self.mask.flags(params);
        let mut p = params.params_flat();
        if self.first.len() != p.len() {
            self.first = vec![0.0; p.len()];
            self.second = vec![0.0; p.len()];
        }
        self.steps += 1;
        match self.kind {
            OptimizerKind::Sgd { momentum, weight_decay } => {
                for i in 0..p.len() {
                    if !trainable[i] {
                        continue;
                    }
                    let gi = g[i] + weight_decay * p[i];
                    let d = if momentum > 0.0 {
                        self.first[i] = momentum * self.first[i] + gi;
                        self.first[i]
                    } else {
                        gi
                    };
                    p[i] -= self.lr * d;
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps, weight_decay } => {
                let bc1 = 1.0 - beta1.powi(self.steps as i32);
                let bc2 = 1.0 - beta2.powi(self.steps as i32);
                for i in 0..p.len() {
                    if !trainable[i] {
                        continue;
                    }
                    let gi = g[i] + weight_decay * p[i];
                    self.first[i] = beta1 * self.first[i] + (1.0 - beta1) * gi;
                    self.second[i] = beta2 * self.second[i] + (1.0 - beta2) * gi * gi;
                    let m = self.first[i] / bc1;
                    let v = self.second[i] / bc2;
                    p[i] -= self.lr * m / (v.sqrt() + eps);
                }
            }
        }
        if !p.iter().all(|v| v.is_finite()) {
            return Err(Error::numeric("optimizer produced non-finite parameters"));
        }
        params.set_params_flat(&p)
    }
}

/// Plain gradient step `params − lr·grads` returning new parameters.
pub fn sgd_step(params: &Mlp, grads: &Grads, lr: f64) -> Result<Mlp> {
    let mut out = params.clone();
    Optimizer::new(OptimizerKind::sgd(), lr)?.step(&mut out, grads)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::linalg::Mat;
    use crate::numerics::mlp::{Activation, Dense};

    fn scalar_net(w: f64) -> Mlp {
        Mlp::from_layers(
            1,
            None,
            vec![Dense {
                weight: Mat::from_vec(1, 1, vec![w]).unwrap(),
                bias: vec![0.0],
                activation: Activation::Identity,
            }],
        )
        .unwrap()
    }

    fn scalar_grads(net: &Mlp, g: f64) -> Grads {
        let mut grads = Grads::zeros_like(net);
        grads.layers[0].weight.set(0, 0, g);
        grads
    }

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        let net = scalar_net(1.3);
        let out = sgd_step(&net, &scalar_grads(&net, 5.0), 0.0).unwrap();
        assert_eq!(out, net);
    }

    #[test]
    fn plain_step_arithmetic() {
        let net = scalar_net(1.0);
        let out = sgd_step(&net, &scalar_grads(&net, 2.0), 0.1).unwrap();
        assert_eq!(out.layers()[0].weight.get(0, 0), 0.8);
    }

    #[test]
    fn momentum_matches_hand_unrolled_recurrence() {
        let mut net = scalar_net(1.0);
        let grads = scalar_grads(&net, 2.0);
        let kind = OptimizerKind::Sgd {
            momentum: 0.9,
            weight_decay: 0.0,
        };
        let mut opt = Optimizer::new(kind, 0.1).unwrap();
        opt.step(&mut net, &grads).unwrap();
        opt.step(&mut net, &grads).unwrap();
        // v1 = 2, p1 = 1 - 0.2 = 0.8; v2 = 0.9*2 + 2 = 3.8, p2 = 0.8 - 0.38
        let v1 = 2.0;
        let p1 = 1.0 - 0.1 * v1;
        let v2 = 0.9 * v1 + 2.0;
        let p2 = p1 - 0.1 * v2;
        assert_eq!(net.layers()[0].weight.get(0, 0), p2);
    }

    #[test]
    fn non_finite_grads_rejected_without_mutation() {
        let mut net = scalar_net(1.0);
        let before = net.clone();
        let grads = scalar_grads(&net, f64::NAN);
        let mut opt = Optimizer::new(OptimizerKind::sgd(), 0.1).unwrap();
        assert!(matches!(opt.step(&mut net, &grads), Err(Error::Numeric(_))));
        assert_eq!(net, before);
    }

    #[test]
    fn negative_lr_rejected() {
        assert!(Optimizer::new(OptimizerKind::sgd(), -1.0).is_err());
    }
}
