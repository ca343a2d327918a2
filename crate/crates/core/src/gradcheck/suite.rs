//! The self-verification suite: one central-difference check per op family plus
//! an end-to-end check of the full training objective.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{grad_check_with, CheckOptions, GradCheckReport};
use crate::autodiff::{Graph, OpKind, Var};
use crate::error::{Error, Result};
use crate::losses::{
    cross_entropy, generalized_dice_loss, kl_divergence, segmentation_loss, total_loss, LossWeights,
};
use crate::model::{forward_train, one_hot, Ctx, Gaussian, ModelConfig, ModelParams};
use crate::nn::spectral::spectral_normalize;
use crate::nn::{
    gated_transposed_conv3d, ConvParams, ConvSpec, ResizeMode, SpectralMode, SpectralState,
};
use crate::tensor::Tensor;

type Grads = BTreeMap<String, Tensor<f64>>;

/// Tolerance for single layers.
pub const LAYER_TOLERANCE: f64 = 1e-6;
/// Tolerance for the whole model objective.
pub const MODEL_TOLERANCE: f64 = 1e-4;

/// Result of one family check.
#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: &'static str,
    /// Graph op kinds whose backward rules this entry exercises.
    pub covers: Vec<OpKind>,
    pub tolerance: f64,
    pub report: GradCheckReport,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < self.tolerance
    }
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub entries: Vec<SuiteEntry>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(SuiteEntry::passed)
    }

    /// One line per entry: name, worst relative error, tolerance and verdict.
    pub fn render(&self) -> String {
        let w = self.entries.iter().map(|e| e.name.len()).max().unwrap_or(0);
        self.entries
            .iter()
            .map(|e| {
                format!(
                    "{:<w$}  max_rel_err {:.3e}  tol {:.0e}  {}{}\n",
                    e.name,
                    e.report.max_rel_error,
                    e.tolerance,
                    if e.passed() { "ok" } else { "FAIL" },
                    match (e.passed(), e.report.worst_values) {
                        (false, Some((a, n))) => format!("  analytic {a:.6e} numeric {n:.6e}"),
                        _ => String::new(),
                    }
                )
            })
            .collect()
    }
}

/// Scale of the end-to-end model check.
#[derive(Clone, Copy, Debug)]
pub struct SuiteOptions {
    pub model: ModelConfig,
    pub seed: u64,
    /// Central-difference step for the layer checks.
    pub layer_step: f64,
    /// Central-difference step for the model check.
    pub model_step: f64,
    pub corrupt: Option<OpKind>,
}

impl SuiteOptions {
    /// Smallest model the architecture allows: 16³ input, two classes, width 2.
    pub fn tiny() -> Self {
        Self {
            model: ModelConfig {
                input_size: 16,
                num_classes: 2,
                latent_dim: 4,
                base_width: 2,
            },
            seed: 0,
            layer_step: 1e-4,
            model_step: 1e-6,
            corrupt: None,
        }
    }
}

/// `Σ out ⊙ r` for a fixed random `r`, so every output coordinate matters.
fn probe(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let r = Tensor::randn(g.shape(out), 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let r = g.constant(r);
    let p = g.mul(out, r)?;
    Ok(g.sum_all(p))
}

type Objective = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

struct Case {
    name: &'static str,
    covers: Vec<OpKind>,
    inputs: Vec<Tensor<f64>>,
    f: Objective,
}

fn case(
    name: &'static str,
    covers: &[OpKind],
    inputs: Vec<Tensor<f64>>,
    f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static,
) -> Case {
    Case {
        name,
        covers: covers.to_vec(),
        inputs,
        f: Box::new(f),
    }
}

fn layer_cases(rng: &mut ChaCha8Rng) -> Result<Vec<Case>> {
    use OpKind::*;
    let mut n = |shape: &[usize]| Tensor::<f64>::randn(shape, 0.0, 1.0, rng);
    let a = n(&[2, 3, 4])?;
    let b = n(&[1, 3, 1])?;
    let x = n(&[2, 3, 4])?;
    let vol = n(&[1, 2, 4, 4, 4])?;
    let logits = n(&[2, 3, 2, 2, 2])?;
    let (m1, l1, m2, l2) = (n(&[2, 5])?, n(&[2, 5])?, n(&[2, 5])?, n(&[2, 5])?);
    let conv = ConvSpec::conv(2, 3, 3, 1, 1);
    let down = ConvSpec::conv(2, 3, 3, 2, 1).without_bias();
    let up = ConvSpec::transposed(2, 3, 4, 2, 1);
    let refine = ConvSpec::transposed(2, 3, 3, 1, 1).without_bias();
    let cw = n(&conv.weight_shape())?.map(|v| v * 0.3);
    let dw = n(&down.weight_shape())?.map(|v| v * 0.3);
    let uw = n(&up.weight_shape())?.map(|v| v * 0.3);
    let rw = n(&refine.weight_shape())?.map(|v| v * 0.3);
    let bias = n(&[3])?;
    let gw = n(&up.weight_shape())?.map(|v| v * 0.3);
    let gb = n(&[3])?;
    let sw = n(&[4, 2, 3, 3, 3])?;
    let u = {
        let mut r = ChaCha8Rng::seed_from_u64(99);
        let mut s = SpectralState::<f64>::new(4, &mut r);
        s.iterations = 20;
        let (_, _) =
            crate::nn::spectral::spectral_normalize_tensor(&sw, &mut s, SpectralMode::Update)?;
        s
    };
    let positive = Tensor::<f64>::uniform(&[2, 3, 4], 0.5, 2.0, rng)?;
    let onehot = one_hot::<f64>(
        &[0, 1, 2, 2, 1, 0, 1, 1, 2, 0, 0, 0, 1, 2, 2, 1],
        2,
        3,
        [2, 2, 2],
    )?;
    let onehot2 = onehot.clone();

    Ok(vec![
        case(
            "elementwise",
            &[Add, Sub, Mul, Div],
            vec![a.clone(), b.clone(), positive.clone()],
            |g, v| {
                let s = g.add(v[0], v[1])?;
                let d = g.sub(v[0], v[1])?;
                let m = g.mul(s, d)?;
                let q = g.div(m, v[2])?;
                probe(g, q, 1)
            },
        ),
        case(
            "scalar",
            &[AddScalar, MulScalar],
            vec![x.clone()],
            |g, v| {
                let s = g.mul_scalar(v[0], -1.7);
                let s = g.add_scalar(s, 0.3);
                let s = g.mul(s, s)?;
                probe(g, s, 2)
            },
        ),
        case("exp", &[Exp], vec![x.clone()], |g, v| {
            let e = g.exp(v[0]);
            probe(g, e, 3)
        }),
        case("log", &[Log], vec![positive.clone()], |g, v| {
            let l = g.log(v[0]);
            probe(g, l, 4)
        }),
        case("sigmoid", &[Sigmoid], vec![x.clone()], |g, v| {
            let s = g.sigmoid(v[0]);
            probe(g, s, 5)
        }),
        case("relu", &[Relu], vec![x.clone()], |g, v| {
            let s = g.relu(v[0]);
            probe(g, s, 6)
        }),
        case("leaky_relu", &[LeakyRelu], vec![x.clone()], |g, v| {
            let s = g.leaky_relu(v[0], 0.2);
            probe(g, s, 7)
        }),
        case("clamp", &[Clamp], vec![x.clone()], |g, v| {
            let s = g.clamp(v[0], -0.5, 0.5);
            probe(g, s, 8)
        }),
        case("reshape", &[Reshape], vec![x.clone()], |g, v| {
            let s = g.reshape(v[0], &[4, 6])?;
            let s = g.mul(s, s)?;
            probe(g, s, 9)
        }),
        case("expand", &[Expand], vec![b.clone()], |g, v| {
            let s = g.expand(v[0], &[2, 3, 4])?;
            let s = g.mul(s, s)?;
            probe(g, s, 10)
        }),
        case("concat", &[Concat], vec![a.clone(), x.clone()], |g, v| {
            let s = g.concat(&[v[0], v[1]], 1)?;
            let s = g.mul(s, s)?;
            probe(g, s, 11)
        }),
        case("slice", &[Slice], vec![x.clone()], |g, v| {
            let s = g.slice(v[0], 2, 1, 2)?;
            let s = g.mul(s, s)?;
            probe(g, s, 12)
        }),
        case("sum", &[Sum], vec![x.clone()], |g, v| {
            let s = g.mul(v[0], v[0])?;
            let s = g.sum(s, &[0, 2], true)?;
            probe(g, s, 13)
        }),
        case("mean", &[Mean], vec![x.clone()], |g, v| {
            let s = g.mul(v[0], v[0])?;
            let s = g.mean(s, &[1], false)?;
            probe(g, s, 14)
        }),
        case("softmax", &[Softmax], vec![logits.clone()], |g, v| {
            let s = g.softmax_channels(v[0])?;
            probe(g, s, 15)
        }),
        case(
            "log_softmax",
            &[LogSoftmax],
            vec![logits.clone()],
            |g, v| {
                let s = g.log_softmax_channels(v[0])?;
                probe(g, s, 16)
            },
        ),
        case(
            "conv3d",
            &[Conv3d],
            vec![vol.clone(), cw, dw, bias.clone()],
            move |g, v| {
                let a = g.conv3d(v[0], v[1], Some(v[3]), &conv)?;
                let b = g.conv3d(v[0], v[2], None, &down)?;
                let pa = probe(g, a, 17)?;
                let pb = probe(g, b, 18)?;
                g.add(pa, pb)
            },
        ),
        case(
            "conv_transpose3d",
            &[ConvTranspose3d],
            vec![vol.clone(), uw.clone(), rw, bias.clone()],
            move |g, v| {
                let a = g.conv3d(v[0], v[1], Some(v[3]), &up)?;
                let b = g.conv3d(v[0], v[2], None, &refine)?;
                let pa = probe(g, a, 19)?;
                let pb = probe(g, b, 20)?;
                g.add(pa, pb)
            },
        ),
        case("avg_pool3d", &[AvgPool3d], vec![vol.clone()], |g, v| {
            let s = g.mul(v[0], v[0])?;
            let s = g.avg_pool3d(s, 2)?;
            probe(g, s, 21)
        }),
        case("resize", &[Resize], vec![vol.clone()], |g, v| {
            let s = g.resize(v[0], [7, 3, 5], ResizeMode::Trilinear)?;
            let t = g.resize(v[0], [6, 6, 6], ResizeMode::Nearest)?;
            let ps = probe(g, s, 22)?;
            let pt = probe(g, t, 23)?;
            g.add(ps, pt)
        }),
        case("spectral_normalize", &[], vec![sw], move |g, v| {
            let mut state = u.clone();
            let w = spectral_normalize(g, v[0], &mut state, SpectralMode::Frozen)?;
            probe(g, w, 24)
        }),
        case(
            "gated_transposed_conv3d",
            &[],
            vec![vol, uw, bias, gw, gb],
            move |g, v| {
                let value = ConvParams {
                    spec: &up,
                    weight: v[1],
                    bias: Some(v[2]),
                };
                let gate = ConvParams {
                    spec: &up,
                    weight: v[3],
                    bias: Some(v[4]),
                };
                let s = gated_transposed_conv3d(g, v[0], value, gate)?;
                probe(g, s, 25)
            },
        ),
        case("cross_entropy", &[], vec![logits.clone()], move |g, v| {
            let y = g.constant(onehot.clone());
            cross_entropy(g, v[0], y)
        }),
        case("generalized_dice", &[], vec![logits], move |g, v| {
            let y = g.constant(onehot2.clone());
            let p = g.softmax_channels(v[0])?;
            generalized_dice_loss(g, p, y, 1e-6)
        }),
        case("kl_divergence", &[], vec![m1, l1, m2, l2], |g, v| {
            let q = Gaussian {
                mean: v[0],
                logvar: v[1],
            };
            let p = Gaussian {
                mean: v[2],
                logvar: v[3],
            };
            kl_divergence(g, &q, &p)
        }),
    ])
}

/// Central-difference check of `∂L/∂θ` for the full objective `λ1·L_Seg + λ2·L_KL`.
///
/// Every parameter tensor is probed along its own normalized analytic gradient
/// `d`, comparing `⟨∇L, d⟩` with `(L(θ + hd) − L(θ − hd)) / 2h`. A wrong gradient
/// shows up as a mismatch between its norm and the measured slope. Single
/// coordinates are a poor probe here: a 16³ ReLU network has so many kinks
/// within `h` of a typical point that per-coordinate slopes are dominated by
/// crossings, while the gradient direction has the largest slope to measure.
/// Spectral vectors stay frozen and the reparameterization noise is drawn from
/// a fixed seed, so the objective is a deterministic function of the parameters.
/// Biases start from small random values instead of zero: zero biases put
/// ReLU inputs of dead regions exactly on the kink, where no finite
/// difference agrees with any one-sided derivative.
pub fn model_grad_check(
    cfg: ModelConfig,
    seed: u64,
    opts: &CheckOptions,
) -> Result<GradCheckReport> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::<f64>::init(cfg, &mut rng)?;
    for (name, t) in params.tensors_mut() {
        if name.ends_with(".bias") {
            let jitter = Tensor::<f64>::randn(t.shape(), 0.0, 0.1, &mut rng)?;
            t.data_mut()
                .iter_mut()
                .zip(jitter.data())
                .for_each(|(a, b)| *a += b);
        }
    }
    let s = cfg.input_size;
    let image = Tensor::<f64>::uniform(&[1, 1, s, s, s], 0.0, 1.0, &mut rng)?;
    let c = (s as f64 - 1.0) / 2.0;
    let labels: Vec<u8> = (0..s * s * s)
        .map(|i| {
            let (z, y, x) = ((i / (s * s)) as f64, ((i / s) % s) as f64, (i % s) as f64);
            let r2 = (z - c).powi(2) + (y - c).powi(2) + (x - c).powi(2);
            ((r2.sqrt() < s as f64 / 4.0) as usize % cfg.num_classes) as u8
        })
        .collect();
    let onehot = one_hot::<f64>(&labels, 1, cfg.num_classes, [s; 3])?;
    let weights = LossWeights::default();

    let objective =
        |params: &mut ModelParams<f64>, trainable: bool| -> Result<(f64, Option<Grads>)> {
            let mut ctx = Ctx::with(params, SpectralMode::Frozen, trainable);
            if let Some(kind) = opts.corrupt {
                ctx.g.corrupt_backward(kind);
            }
            let x = ctx.g.constant(image.clone());
            let y = ctx.g.constant(onehot.clone());
            let mut eps = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
            let out = forward_train(&mut ctx, x, y, &mut eps)?;
            let seg = segmentation_loss(&mut ctx.g, out.logits, y, weights.epsilon)?;
            let kl = kl_divergence(&mut ctx.g, &out.posterior, &out.prior)?;
            let total = total_loss(&mut ctx.g, seg, kl, &weights)?;
            let value = ctx.g.value(total).item()?;
            if !value.is_finite() {
                return Err(Error::NonFinite("model objective".into()));
            }
            let grads = if trainable {
                Some(ctx.gradients(total)?)
            } else {
                None
            };
            Ok((value, grads))
        };

    let (_, grads) = objective(&mut params, true)?;
    let grads = grads.expect("trainable pass returns gradients");
    let h = opts.h;
    let mut groups: BTreeMap<&str, Vec<&String>> = BTreeMap::new();
    for name in grads.keys() {
        let module = name.split('.').next().unwrap_or(name);
        groups.entry(module).or_default().push(name);
    }
    let mut report = GradCheckReport::new();
    for (i, names) in groups.values().enumerate() {
        let norm = names
            .iter()
            .flat_map(|n| grads[*n].data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        let dirs: Vec<Tensor<f64>> = if norm > 0.0 {
            names.iter().map(|n| grads[*n].map(|v| v / norm)).collect()
        } else {
            names
                .iter()
                .map(|n| Tensor::<f64>::randn(grads[*n].shape(), 0.0, 1.0, &mut rng))
                .collect::<Result<_>>()?
        };
        let analytic: f64 = names
            .iter()
            .zip(&dirs)
            .map(|(n, d)| {
                grads[*n]
                    .data()
                    .iter()
                    .zip(d.data())
                    .map(|(g, d)| g * d)
                    .sum::<f64>()
            })
            .sum();
        let originals: Vec<Tensor<f64>> =
            names.iter().map(|n| params.tensors()[*n].clone()).collect();
        let mut eval_at = |sign: f64| -> Result<f64> {
            for ((n, o), d) in names.iter().zip(&originals).zip(&dirs) {
                let shifted: Vec<f64> = o
                    .data()
                    .iter()
                    .zip(d.data())
                    .map(|(&o, &d)| o + sign * h * d)
                    .collect();
                set_tensor(&mut params, n, &shifted);
            }
            Ok(objective(&mut params, false)?.0)
        };
        let fp = eval_at(1.0)?;
        let fm = eval_at(-1.0)?;
        for (n, o) in names.iter().zip(&originals) {
            set_tensor(&mut params, n, o.data());
        }
        report.record(i, 0, analytic, (fp - fm) / (2.0 * h));
    }
    Ok(report)
}

fn set_tensor(params: &mut ModelParams<f64>, name: &str, values: &[f64]) {
    if let Some(t) = params.tensors_mut().get_mut(name) {
        t.data_mut().copy_from_slice(values);
    }
}

/// Runs every layer check and the end-to-end model check.
pub fn run_suite(opts: &SuiteOptions) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let check = CheckOptions {
        h: opts.layer_step,
        corrupt: opts.corrupt,
        ..CheckOptions::default()
    };
    let mut entries = Vec::new();
    for c in layer_cases(&mut rng)? {
        let report = grad_check_with(&c.f, &c.inputs, &check)?;
        entries.push(SuiteEntry {
            name: c.name,
            covers: c.covers,
            tolerance: LAYER_TOLERANCE,
            report,
        });
    }
    let model_check = CheckOptions {
        h: opts.model_step,
        ..check
    };
    let report = model_grad_check(opts.model, opts.seed, &model_check)?;
    entries.push(SuiteEntry {
        name: "model_end_to_end",
        covers: Vec::new(),
        tolerance: MODEL_TOLERANCE,
        report,
    });
    Ok(SuiteReport { entries })
}
