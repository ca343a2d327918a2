use rand::Rng;

use super::config::{Encoder, ENCODER_CONVS, LEVELS};
use super::params::{Ctx, ModelParams};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Bounds applied to every predicted log-variance.
pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;

/// Diagonal Gaussian over the latent space; both members are `[B, N]`.
#[derive(Clone, Copy, Debug)]
pub struct Gaussian {
    pub mean: Var,
    pub logvar: Var,
}

/// How a latent vector is drawn from a [`Gaussian`].
pub enum Sampling<'r, R: Rng + ?Sized> {
    Reparameterized(&'r mut R),
    Mean,
}

/// Per-scale affine parameters; index 0 holds scale 1 (coarsest).
#[derive(Clone, Debug)]
pub struct Modulation {
    pub alpha: Vec<Var>,
    pub beta: Vec<Var>,
}

impl Modulation {
    /// `α ≡ 1`, `β ≡ 0` at every scale.
    pub fn identity<T: Real>(ctx: &mut Ctx<'_, T>, batch: usize) -> Result<Self> {
        let cfg = ctx.config();
        let mut alpha = Vec::new();
        let mut beta = Vec::new();
        for i in 1..=LEVELS {
            let shape = cfg.decoder_shape(batch, i);
            alpha.push(ctx.g.constant(Tensor::ones(&shape)?));
            beta.push(ctx.g.constant(Tensor::zeros(&shape)?));
        }
        Ok(Self { alpha, beta })
    }
}

/// Outputs of a training forward pass.
#[derive(Clone, Debug)]
pub struct TrainForward {
    pub logits: Var,
    pub posterior: Gaussian,
    pub prior: Gaussian,
}

/// `[B, C, D, H, W]` one-hot encoding of `labels` (`B·D·H·W` values, each `< classes`).
pub fn one_hot<T: Real>(
    labels: &[u8],
    batch: usize,
    classes: usize,
    dims: [usize; 3],
) -> Result<Tensor<T>> {
    let v = dims[0] * dims[1] * dims[2];
    if labels.len() != batch * v {
        return Err(Error::ShapeMismatch {
            op: "one_hot",
            lhs: vec![batch, dims[0], dims[1], dims[2]],
            rhs: vec![labels.len()],
        });
    }
    let mut data = vec![T::zero(); batch * classes * v];
    for (i, &l) in labels.iter().enumerate() {
        let l = l as usize;
        if l >= classes {
            return Err(Error::contract(format!(
                "label {l} out of range for {classes} classes"
            )));
        }
        let (b, p) = (i / v, i % v);
        data[(b * classes + l) * v + p] = T::one();
    }
    Tensor::from_vec(&[batch, classes, dims[0], dims[1], dims[2]], data)
}

fn check_image<T: Real>(ctx: &Ctx<'_, T>, image: Var) -> Result<()> {
    let d = ctx.config().input_size;
    let s = ctx.g.shape(image);
    if s.len() != 5 || s[1] != 1 || s[2..] != [d, d, d] {
        return Err(Error::ShapeMismatch {
            op: "model input",
            lhs: s.to_vec(),
            rhs: vec![s.first().copied().unwrap_or(0), 1, d, d, d],
        });
    }
    Ok(())
}

/// Prior (image only) or posterior (image plus one-hot labels) encoder.
pub fn encode<T: Real>(
    ctx: &mut Ctx<'_, T>,
    which: Encoder,
    image: Var,
    labels: Option<Var>,
) -> Result<Gaussian> {
    check_image(ctx, image)?;
    let mut x = match (which, labels) {
        (Encoder::Prior, None) => image,
        (Encoder::Posterior, Some(l)) => ctx.g.concat(&[image, l], 1)?,
        (Encoder::Prior, Some(_)) => {
            return Err(Error::contract("prior encoder must not see labels"))
        }
        (Encoder::Posterior, None) => {
            return Err(Error::contract("posterior encoder needs labels"))
        }
    };
    let p = which.prefix();
    for b in 0..LEVELS {
        if b > 0 {
            x = ctx.g.avg_pool3d(x, 2)?;
        }
        for j in 0..ENCODER_CONVS {
            x = ctx.conv(&format!("{p}.block{b}.conv{j}"), x)?;
            x = ctx.g.relu(x);
        }
    }
    x = ctx.conv(&format!("{p}.head"), x)?;
    let stats = ctx.g.mean(x, &[2, 3, 4], false)?;
    let n = ctx.config().latent_dim;
    let mean = ctx.g.slice(stats, 1, 0, n)?;
    let logvar = ctx.g.slice(stats, 1, n, n)?;
    let logvar = ctx
        .g
        .clamp(logvar, T::cast(LOGVAR_MIN), T::cast(LOGVAR_MAX));
    Ok(Gaussian { mean, logvar })
}

/// `z = μ + exp(½·logvar) ⊙ ε` or `z = μ`.
pub fn sample_latent<T: Real, R: Rng + ?Sized>(
    ctx: &mut Ctx<'_, T>,
    q: &Gaussian,
    mode: Sampling<'_, R>,
) -> Result<Var> {
    match mode {
        Sampling::Mean => Ok(q.mean),
        Sampling::Reparameterized(rng) => {
            let shape = ctx.g.shape(q.mean).to_vec();
            let eps = ctx.g.constant(Tensor::randn(&shape, 0.0, 1.0, rng)?);
            let half = ctx.g.mul_scalar(q.logvar, T::cast(0.5));
            let std = ctx.g.exp(half);
            let noise = ctx.g.mul(std, eps)?;
            ctx.g.add(q.mean, noise)
        }
    }
}

/// The SFT cascade: tiles `z` to the bottleneck grid, then per scale
/// `z_i = g_i(z_{i-1})`, `α_i = f_i(z_i)`, `β_i = h_i(z_i)`.
pub fn hsft_generate<T: Real>(ctx: &mut Ctx<'_, T>, z: Var) -> Result<Modulation> {
    let cfg = ctx.config();
    let zs = ctx.g.shape(z).to_vec();
    if zs.len() != 2 || zs[1] != cfg.latent_dim {
        return Err(Error::ShapeMismatch {
            op: "hsft_generate",
            lhs: zs,
            rhs: vec![0, cfg.latent_dim],
        });
    }
    let b = zs[0];
    let s = cfg.input_size >> LEVELS;
    let col = ctx.g.reshape(z, &[b, cfg.latent_dim, 1, 1, 1])?;
    let mut zi = ctx.g.expand(col, &[b, cfg.latent_dim, s, s, s])?;
    let slope = T::cast(crate::nn::LEAKY_SLOPE);
    let mut alpha = Vec::with_capacity(LEVELS);
    let mut beta = Vec::with_capacity(LEVELS);
    for i in 1..=LEVELS {
        zi = ctx.gated(
            &format!("sft{i}.g.up.value"),
            &format!("sft{i}.g.up.gate"),
            zi,
        )?;
        zi = ctx.gated(
            &format!("sft{i}.g.refine.value"),
            &format!("sft{i}.g.refine.gate"),
            zi,
        )?;

        let a = ctx.conv(&format!("sft{i}.f.conv0"), zi)?;
        let a = ctx.g.leaky_relu(a, slope);
        alpha.push(ctx.conv(&format!("sft{i}.f.conv1"), a)?);

        let h = ctx.conv(&format!("sft{i}.h.conv0"), zi)?;
        let h = ctx.g.leaky_relu(h, slope);
        let h = ctx.conv(&format!("sft{i}.h.conv1"), h)?;
        beta.push(ctx.g.sigmoid(h));
    }
    Ok(Modulation { alpha, beta })
}

/// `α ⊙ F + β`; all three must have identical shapes.
pub fn modulate<T: Real>(ctx: &mut Ctx<'_, T>, f: Var, alpha: Var, beta: Var) -> Result<Var> {
    for other in [alpha, beta] {
        if ctx.g.shape(other) != ctx.g.shape(f) {
            return Err(Error::ShapeMismatch {
                op: "modulate",
                lhs: ctx.g.shape(f).to_vec(),
                rhs: ctx.g.shape(other).to_vec(),
            });
        }
    }
    let scaled = ctx.g.mul(alpha, f)?;
    ctx.g.add(scaled, beta)
}

fn residual<T: Real>(ctx: &mut Ctx<'_, T>, prefix: &str, x: Var) -> Result<Var> {
    let h = ctx.conv(&format!("{prefix}.conv0"), x)?;
    let h = ctx.g.relu(h);
    let h = ctx.conv(&format!("{prefix}.conv1"), h)?;
    let s = ctx.g.add(h, x)?;
    Ok(ctx.g.relu(s))
}

/// V-Net backbone returning `[B, C, D, D, D]` logits; `m` modulates each decoder block.
pub fn vnet_forward<T: Real>(
    ctx: &mut Ctx<'_, T>,
    image: Var,
    m: Option<&Modulation>,
) -> Result<Var> {
    check_image(ctx, image)?;
    let x = ctx.conv("vnet.input", image)?;
    let mut x = ctx.g.relu(x);
    let mut skips = Vec::with_capacity(LEVELS);
    for l in 0..LEVELS {
        x = residual(ctx, &format!("vnet.enc{l}"), x)?;
        skips.push(x);
        x = ctx.conv(&format!("vnet.enc{l}.down"), x)?;
        x = ctx.g.relu(x);
    }
    x = residual(ctx, "vnet.bottleneck", x)?;
    for i in 1..=LEVELS {
        let up = ctx.conv(&format!("vnet.dec{i}.up"), x)?;
        let up = ctx.g.relu(up);
        let cat = ctx.g.concat(&[up, skips[LEVELS - i]], 1)?;
        let h = ctx.conv(&format!("vnet.dec{i}.conv0"), cat)?;
        let h = ctx.g.relu(h);
        let h = ctx.conv(&format!("vnet.dec{i}.conv1"), h)?;
        x = ctx.g.relu(h);
        if let Some(m) = m {
            x = modulate(ctx, x, m.alpha[i - 1], m.beta[i - 1])?;
        }
    }
    ctx.conv("vnet.head", x)
}

/// Posterior sample drives the decoder; both Gaussians are returned for the KL term.
pub fn forward_train<T: Real, R: Rng + ?Sized>(
    ctx: &mut Ctx<'_, T>,
    image: Var,
    labels_onehot: Var,
    rng: &mut R,
) -> Result<TrainForward> {
    let prior = encode(ctx, Encoder::Prior, image, None)?;
    let posterior = encode(ctx, Encoder::Posterior, image, Some(labels_onehot))?;
    let z = sample_latent(ctx, &posterior, Sampling::Reparameterized(rng))?;
    let m = hsft_generate(ctx, z)?;
    let logits = vnet_forward(ctx, image, Some(&m))?;
    Ok(TrainForward {
        logits,
        posterior,
        prior,
    })
}

/// Latent source at inference time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InferMode {
    PriorMean,
    /// One reparameterized prior draw from the given seed.
    PriorSample(u64),
}

/// Result of [`forward_infer`].
#[derive(Clone, Debug)]
pub struct Inference<T> {
    pub logits: Tensor<T>,
    pub probs: Tensor<T>,
    /// Per-voxel argmax, `[B, D, D, D]` flattened; ties go to the lowest class.
    pub labels: Vec<u8>,
}

/// Per-voxel argmax over axis 1 of `[B, C, ...]`, ties toward the lowest index.
pub fn argmax_channels<T: Real>(t: &Tensor<T>) -> Vec<u8> {
    let s = t.shape();
    let (b, c) = (s[0], s[1]);
    let v: usize = s[2..].iter().product();
    let mut out = vec![0u8; b * v];
    for bi in 0..b {
        let base = bi * c * v;
        let mut best: Vec<T> = t.data()[base..base + v].to_vec();
        let o = &mut out[bi * v..(bi + 1) * v];
        for ch in 1..c {
            let row = &t.data()[base + ch * v..base + (ch + 1) * v];
            for ((bv, lab), &x) in best.iter_mut().zip(o.iter_mut()).zip(row) {
                if x > *bv {
                    *bv = x;
                    *lab = ch as u8;
                }
            }
        }
    }
    out
}

/// Label-free prediction through the prior path.
pub fn forward_infer<T: Real>(
    params: &mut ModelParams<T>,
    image: &Tensor<T>,
    mode: InferMode,
) -> Result<Inference<T>> {
    let mut ctx = Ctx::infer(params);
    let x = ctx.g.constant(image.clone());
    let prior = encode(&mut ctx, Encoder::Prior, x, None)?;
    let z = match mode {
        InferMode::PriorMean => {
            sample_latent::<T, rand_chacha::ChaCha8Rng>(&mut ctx, &prior, Sampling::Mean)?
        }
        InferMode::PriorSample(seed) => {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            sample_latent(&mut ctx, &prior, Sampling::Reparameterized(&mut rng))?
        }
    };
    let m = hsft_generate(&mut ctx, z)?;
    let logits = vnet_forward(&mut ctx, x, Some(&m))?;
    let probs = ctx.g.softmax_channels(logits)?;
    let probs = ctx.g.value(probs).clone();
    let logits = ctx.g.value(logits).clone();
    let labels = argmax_channels(&probs);
    Ok(Inference {
        logits,
        probs,
        labels,
    })
}
