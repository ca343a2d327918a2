use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moments per parameter plus the shared step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Real> AdamState<T> {
    /// Zero moments shaped like `params`.
    pub fn new(params: &BTreeMap<String, Tensor<T>>) -> Result<Self> {
        let zeros = || -> Result<BTreeMap<String, Tensor<T>>> {
            params
                .iter()
                .map(|(k, p)| Ok((k.clone(), Tensor::zeros(p.shape())?)))
                .collect()
        };
        Ok(Self {
            m: zeros()?,
            v: zeros()?,
            t: 0,
            beta1: BETA1,
            beta2: BETA2,
            eps: ADAM_EPS,
        })
    }
}

/// One Adam update with weight decay folded into the gradient (`g + wd·p`).
pub fn adam_step<T: Real>(
    params: &mut BTreeMap<String, Tensor<T>>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut AdamState<T>,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    for (name, p) in params.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::contract(format!("no gradient for {name}")))?;
        for (what, other) in [
            ("gradient", Some(g)),
            ("first moment", state.m.get(name)),
            ("second moment", state.v.get(name)),
        ] {
            match other {
                Some(t) if t.shape() == p.shape() => {}
                Some(t) => {
                    return Err(Error::ShapeMismatch {
                        op: "adam_step",
                        lhs: p.shape().to_vec(),
                        rhs: t.shape().to_vec(),
                    })
                }
                None => return Err(Error::contract(format!("no {what} for {name}"))),
            }
        }
    }
    if grads.len() != params.len() {
        return Err(Error::contract(
            "gradients name parameters that do not exist",
        ));
    }
    state.t += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let bc1 = 1.0 - b1.powi(state.t as i32);
    let bc2 = 1.0 - b2.powi(state.t as i32);
    for (name, p) in params.iter_mut() {
        let g = grads[name].data();
        let m = state.m.get_mut(name).expect("checked above").data_mut();
        let v = state.v.get_mut(name).expect("checked above").data_mut();
        for (((pi, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g)
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            let pv = pi.as_f64();
            let gv = gi.as_f64() + weight_decay * pv;
            let mn = b1 * mi.as_f64() + (1.0 - b1) * gv;
            let vn = b2 * vi.as_f64() + (1.0 - b2) * gv * gv;
            *mi = T::cast(mn);
            *vi = T::cast(vn);
            let step = lr * (mn / bc1) / ((vn / bc2).sqrt() + state.eps);
            *pi = T::cast(pv - step);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(name: &str, data: Vec<f64>) -> BTreeMap<String, Tensor<f64>> {
        let n = data.len();
        BTreeMap::from([(name.to_string(), Tensor::from_vec(&[n], data).unwrap())])
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = one("w", vec![0.5, -2.0, 3.0]);
        let before = p.clone();
        let g = one("w", vec![0.0; 3]);
        let mut s = AdamState::new(&p).unwrap();
        for _ in 0..5 {
            adam_step(&mut p, &g, &mut s, 1e-3, 0.0).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(s.t, 5);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let lr = 1e-4;
        let mut p = one("w", vec![1.0, 1.0, 1.0]);
        let g = one("w", vec![0.3, -7.0, 1e-2]);
        let mut s = AdamState::new(&p).unwrap();
        adam_step(&mut p, &g, &mut s, lr, 0.0).unwrap();
        for (&x, &gv) in p["w"].data().iter().zip(g["w"].data()) {
            let hand = 1.0 - lr * gv / (gv.abs() + ADAM_EPS);
            assert!((x - hand).abs() < 1e-15, "{x} vs {hand}");
            assert!((x - (1.0 - lr * gv.signum())).abs() < 1e-6 * lr);
        }
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let mut p = one("w", vec![1.0, 2.0]);
        let g = one("w", vec![1.0]);
        let mut s = AdamState::new(&p).unwrap();
        assert!(adam_step(&mut p, &g, &mut s, 1e-3, 0.0).is_err());
        assert_eq!(s.t, 0);
    }
}
