use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::encoder::Parameters;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd { momentum: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSettings {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        OptimizerSettings {
            kind: OptimizerKind::adam(),
            learning_rate: 3.0e-4,
            weight_decay: 1.0e-4,
        }
    }
}

/// Moment accumulators keyed by parameter name. SGD uses only `first`.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub settings: OptimizerSettings,
    pub step: u64,
    pub first: BTreeMap<String, Vec<f64>>,
    pub second: BTreeMap<String, Vec<f64>>,
}

impl OptimizerState {
    pub fn new(settings: OptimizerSettings) -> Self {
        OptimizerState {
            settings,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    /// One update with decoupled weight decay. Parameters without a gradient
    /// entry are left untouched.
    pub fn step(&mut self, params: &mut Parameters, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::Shape(format!("gradient for unknown parameter {name}")))?;
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "gradient {name} has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            if !g.is_finite() {
                return Err(Error::Numerical(format!("non-finite gradient for {name}")));
            }
        }
        self.step += 1;
        let lr = self.settings.learning_rate;
        let wd = self.settings.weight_decay;
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            let n = p.len();
            match self.settings.kind {
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let m = self.first.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
                    let v = self.second.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
                    let c1 = 1.0 - beta1.powi(self.step as i32);
                    let c2 = 1.0 - beta2.powi(self.step as i32);
                    for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mi = beta1 * *mi + (1.0 - beta1) * gi;
                        *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                        let update = (*mi / c1) / ((*vi / c2).sqrt() + eps);
                        *w -= lr * (update + wd * *w);
                    }
                }
                OptimizerKind::Sgd { momentum } => {
                    let m = self.first.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
                    for ((w, &gi), mi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()) {
                        *mi = momentum * *mi + gi;
                        *w -= lr * (*mi + wd * *w);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Tensor {
        Tensor::new(vec![1], vec![v]).unwrap()
    }

    fn single(name: &str, v: f64) -> Parameters {
        let mut p = Parameters::new();
        p.insert(name, scalar(v));
        p
    }

    #[test]
    fn zero_gradient_no_decay_is_noop() {
        let mut p = single("w", 0.7);
        let mut st = OptimizerState::new(OptimizerSettings {
            weight_decay: 0.0,
            ..Default::default()
        });
        let g = BTreeMap::from([("w".to_string(), scalar(0.0))]);
        for _ in 0..5 {
            st.step(&mut p, &g).unwrap();
        }
        assert_eq!(p.get("w").unwrap().data(), &[0.7]);
        assert_eq!(st.step, 5);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut p = single("w", 0.0);
        let mut st = OptimizerState::new(OptimizerSettings {
            weight_decay: 0.0,
            ..Default::default()
        });
        let g = BTreeMap::from([("w".to_string(), scalar(1.0))]);
        st.step(&mut p, &g).unwrap();
        // bias-corrected moments are both 1, so the step is lr / (1 + eps)
        let want = -3.0e-4 / (1.0 + 1e-8);
        assert!((p.get("w").unwrap().data()[0] - want).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_named() {
        let mut p = single("conv.w", 0.0);
        let mut st = OptimizerState::new(OptimizerSettings::default());
        let g = BTreeMap::from([("conv.w".to_string(), scalar(f64::NAN))]);
        match st.step(&mut p, &g) {
            Err(Error::Numerical(m)) => assert!(m.contains("conv.w")),
            other => panic!("{other:?}"),
        }
        assert_eq!(st.step, 0);
    }

    #[test]
    fn identical_runs_identical_trajectories() {
        let run = || {
            let mut p = single("w", 1.0);
            let mut st = OptimizerState::new(OptimizerSettings::default());
            let mut traj = vec![];
            for i in 0..10 {
                let g = BTreeMap::from([("w".to_string(), scalar((i as f64).sin()))]);
                st.step(&mut p, &g).unwrap();
                traj.push(p.get("w").unwrap().data()[0]);
            }
            traj
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn sgd_momentum_step() {
        let mut p = single("w", 1.0);
        let mut st = OptimizerState::new(OptimizerSettings {
            kind: OptimizerKind::Sgd { momentum: 0.9 },
            learning_rate: 0.1,
            weight_decay: 0.0,
        });
        let g = BTreeMap::from([("w".to_string(), scalar(1.0))]);
        st.step(&mut p, &g).unwrap();
        st.step(&mut p, &g).unwrap();
        // 1 - 0.1 * 1 - 0.1 * 1.9
        assert!((p.get("w").unwrap().data()[0] - 0.71).abs() < 1e-12);
    }
}
