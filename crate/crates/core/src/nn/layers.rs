//! Composite layers built from graph primitives.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::conv::ConvSpec;
use crate::tensor::Real;

/// Negative slope of every LeakyReLU in the model.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Weight and optional bias of one convolution.
#[derive(Clone, Copy, Debug)]
pub struct ConvParams<'a> {
    pub spec: &'a ConvSpec,
    pub weight: Var,
    pub bias: Option<Var>,
}

pub fn conv<T: Real>(g: &mut Graph<T>, x: Var, p: ConvParams<'_>) -> Result<Var> {
    g.conv3d(x, p.weight, p.bias, p.spec)
}

/// `tconv_a(x) ⊙ sigmoid(tconv_b(x))`.
pub fn gated_transposed_conv3d<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    value: ConvParams<'_>,
    gate: ConvParams<'_>,
) -> Result<Var> {
    if value.spec.stride != gate.spec.stride {
        return Err(Error::contract("gated branches must share a stride"));
    }
    let a = conv(g, x, value)?;
    let b = conv(g, x, gate)?;
    if g.shape(a) != g.shape(b) {
        return Err(Error::ShapeMismatch {
            op: "gated_transposed_conv3d",
            lhs: g.shape(a).to_vec(),
            rhs: g.shape(b).to_vec(),
        });
    }
    let s = g.sigmoid(b);
    g.mul(a, s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(gate_bias: f64) -> (Graph<f64>, Var, Var, Var, Var, Var, ConvSpec) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let spec = ConvSpec::transposed(2, 3, 4, 2, 1);
        let mut g = Graph::new();
        let x = g.constant(Tensor::randn(&[1, 2, 3, 3, 3], 0.0, 1.0, &mut rng).unwrap());
        let wa = g.param(Tensor::randn(&spec.weight_shape(), 0.0, 0.3, &mut rng).unwrap());
        let ba = g.param(Tensor::randn(&[3], 0.0, 0.3, &mut rng).unwrap());
        let wb = g.param(Tensor::randn(&spec.weight_shape(), 0.0, 0.3, &mut rng).unwrap());
        let bb = g.param(Tensor::full(&[3], gate_bias).unwrap());
        (g, x, wa, ba, wb, bb, spec)
    }

    #[test]
    fn matches_manual_composition() {
        let (mut g, x, wa, ba, wb, bb, spec) = setup(0.1);
        let pa = ConvParams {
            spec: &spec,
            weight: wa,
            bias: Some(ba),
        };
        let pb = ConvParams {
            spec: &spec,
            weight: wb,
            bias: Some(bb),
        };
        let out = gated_transposed_conv3d(&mut g, x, pa, pb).unwrap();
        let a = g.conv3d(x, wa, Some(ba), &spec).unwrap();
        let b = g.conv3d(x, wb, Some(bb), &spec).unwrap();
        let s = g.sigmoid(b);
        let m = g.mul(a, s).unwrap();
        assert_eq!(g.value(out), g.value(m));
        assert_eq!(g.shape(out), &[1, 3, 6, 6, 6]);
    }

    #[test]
    fn saturated_gate_passes_value() {
        let (mut g, x, wa, ba, wb, bb, spec) = setup(20.0);
        let zero_w = g.param(Tensor::zeros(&spec.weight_shape()).unwrap());
        let pa = ConvParams {
            spec: &spec,
            weight: wa,
            bias: Some(ba),
        };
        let out = gated_transposed_conv3d(
            &mut g,
            x,
            pa,
            ConvParams {
                spec: &spec,
                weight: zero_w,
                bias: Some(bb),
            },
        )
        .unwrap();
        let a = g.conv3d(x, wa, Some(ba), &spec).unwrap();
        let diff = g.value(out).max_abs_diff(g.value(a));
        let scale = g.value(a).data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(diff <= scale * 3e-9);

        let zb = g.param(Tensor::zeros(&[3]).unwrap());
        let half = gated_transposed_conv3d(
            &mut g,
            x,
            pa,
            ConvParams {
                spec: &spec,
                weight: zero_w,
                bias: Some(zb),
            },
        )
        .unwrap();
        let want = g.value(a).map(|v| 0.5 * v);
        assert!(g.value(half).max_abs_diff(&want) < 1e-15);
        let _ = wb;
    }
}
