//! Bias-corrected Adam with per-group learning rates.

use crate::error::{Error, Result};
use crate::nn::{ParamGroup, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One Adam update of a single array at step `t >= 1`.
#[allow(clippy::too_many_arguments)]
pub fn adam_step(
    name: &str,
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    lr: f64,
    hyper: AdamHyper,
    t: u64,
) -> Result<()> {
    if t == 0 {
        return Err(Error::contract("adam step counter starts at 1"));
    }
    if param.len() != grad.len() || m.len() != grad.len() || v.len() != grad.len() {
        return Err(Error::shape("adam_step", &[param.len()], &[grad.len()]));
    }
    check_finite(name, grad)?;
    let c1 = 1.0 - hyper.beta1.powi(t as i32);
    let c2 = 1.0 - hyper.beta2.powi(t as i32);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * g;
        v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        param[i] -= lr * m_hat / (v_hat.sqrt() + hyper.eps);
    }
    Ok(())
}

fn check_finite(name: &str, grad: &[f64]) -> Result<()> {
    if let Some(x) = grad.iter().find(|x| !x.is_finite()) {
        return Err(Error::Numeric {
            op: "adam_step",
            detail: format!("non-finite gradient {x} in parameter {name}"),
        });
    }
    Ok(())
}

/// First and second moments for every parameter of a store.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub hyper: AdamHyper,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Completed steps.
    pub t: u64,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self {
            hyper: AdamHyper::default(),
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    /// Updates every trainable parameter that has a gradient. All gradients
    /// are checked before any parameter moves.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], lr: impl Fn(ParamGroup) -> f64) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        for ((_, p), g) in store.iter().zip(grads) {
            if let Some(g) = g {
                check_finite(&p.name, g.data())?;
            }
        }
        self.t += 1;
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for (id, g) in ids.into_iter().zip(grads) {
            let (Some(g), false) = (g, store.param(id).frozen) else { continue };
            let rate = lr(store.param(id).group);
            let name = store.param(id).name.clone();
            let i = id.index();
            adam_step(
                &name,
                store.value_mut(id).data_mut(),
                g.data(),
                self.m[i].data_mut(),
                self.v[i].data_mut(),
                rate,
                self.hyper,
                self.t,
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamGroup;

    fn run(g: f64, lr: f64) -> (f64, f64, f64) {
        let (mut p, mut m, mut v) = ([0.5], [0.0], [0.0]);
        adam_step("w", &mut p, &[g], &mut m, &mut v, lr, AdamHyper::default(), 1).unwrap();
        (p[0], m[0], v[0])
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        assert_eq!(run(0.0, 1e-3), (0.5, 0.0, 0.0));
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        assert_eq!(run(3.0, 0.0).0, 0.5);
    }

    #[test]
    fn first_step_moves_by_lr_against_the_sign() {
        for g in [2.5, -0.3, 1e-3] {
            let (p, _, _) = run(g, 1e-2);
            // m_hat = g and v_hat = g^2 after one step
            let want = 0.5 - 1e-2 * g / (g.abs() + 1e-8);
            assert!((p - want).abs() < 1e-15);
            assert!((p - (0.5 - 1e-2 * g.signum())).abs() < 1e-7);
        }
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let (mut p, mut m, mut v) = ([0.5], [0.0], [0.0]);
        let err = adam_step("enc.w", &mut p, &[f64::NAN], &mut m, &mut v, 1e-3, AdamHyper::default(), 1).unwrap_err();
        assert!(err.to_string().contains("enc.w"));
        assert_eq!(p[0], 0.5);
    }

    #[test]
    fn groups_get_their_own_learning_rates() {
        let mut store = ParamStore::new();
        let e = store.add("e", Tensor::zeros(&[3]), ParamGroup::Encoder);
        let h = store.add("h", Tensor::zeros(&[3]), ParamGroup::Head);
        let f = store.add_frozen("f", Tensor::zeros(&[3]), ParamGroup::Head);
        let mut adam = Adam::new(&store);
        let unit = Some(Tensor::full(&[3], 1.0));
        adam.step(&mut store, &[unit.clone(), unit.clone(), unit], |g| match g {
            ParamGroup::Encoder => 1e-4,
            ParamGroup::Head => 1e-3,
        })
        .unwrap();
        for &x in store.value(e).data() {
            assert!((x + 1e-4).abs() < 1e-10);
        }
        for &x in store.value(h).data() {
            assert!((x + 1e-3).abs() < 1e-10);
        }
        assert!(store.value(f).data().iter().all(|&x| x == 0.0));
    }
}
