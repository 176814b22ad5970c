use crate::error::{shape_err, Error, Result};
use crate::{ParamStore, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = |t: &Tensor<T>| Tensor::zeros(t.shape());
        Self {
            step: 0,
            m: params.tensors().iter().map(zeros).collect(),
            v: params.tensors().iter().map(zeros).collect(),
        }
    }
}

/// One bias-corrected Adam update of every parameter.
///
/// All gradients are checked for finiteness before any parameter is touched.
pub fn adam_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(shape_err(
            "adam_step",
            format!(
                "{} parameters, {} gradients, {} moment slots",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    for (id, g) in grads.iter().enumerate() {
        if g.shape() != params.get(id).shape() || state.m[id].shape() != g.shape() {
            return Err(shape_err(
                "adam_step",
                format!(
                    "gradient shape {:?} for `{}` does not match",
                    g.shape(),
                    params.name(id)
                ),
            ));
        }
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient {
                name: params.name(id).to_string(),
            });
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let c1 = T::of(1.0 - cfg.beta1.powf(t));
    let c2 = T::of(1.0 - cfg.beta2.powf(t));
    let (lr, eps) = (T::of(cfg.lr), T::of(cfg.eps));
    let one = T::one();
    for (id, g) in grads.iter().enumerate() {
        let p = params.get_mut(id).data_mut();
        let m = state.m[id].data_mut();
        let v = state.v[id].data_mut();
        for k in 0..p.len() {
            let gk = g.data()[k];
            m[k] = b1 * m[k] + (one - b1) * gk;
            v[k] = b2 * v[k] + (one - b2) * gk * gk;
            let mh = m[k] / c1;
            let vh = v[k] / c2;
            p[k] -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}
