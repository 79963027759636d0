//! Dual sliced-Wasserstein discriminators.
//!
//! A discriminator is the composition of a convolutional encoder E mapping
//! images to an r-dimensional latent code with M dual SWD blocks. Each block
//! multiplies the code by an orthogonal matrix (a learned set of projection
//! directions) and applies per-coordinate functions
//! T_i(x) = u_i * LeakyReLU(w_i * x + b_i), averaging over coordinates.
//! The projection matrices live on the Stiefel manifold; their update rule
//! projects the Euclidean gradient onto the tangent space and retracts with a
//! sign-fixed QR factorization.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::linalg::{qr, Mat};
use crate::nn::{join, Conv2d, Dense, ParamOwner, ParamVisitor};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Frobenius drift tolerance enforced on every incoming projection matrix.
pub const MANIFOLD_TOLERANCE: f64 = 1e-5;

/// Random orthogonal r x r matrix: QR of an i.i.d. Gaussian draw with the R
/// diagonal forced positive. Deterministic given the seed.
pub fn init_orthogonal(r: usize, seed: u64) -> Mat {
    assert!(r >= 1, "init_orthogonal needs r >= 1");
    let mut rng = Rng::new(seed);
    let g = Mat {
        rows: r,
        cols: r,
        data: rng.normal_vec(r * r),
    };
    let (q, _r) = qr(&g);
    q
}

/// One Stiefel step: tangent-project the Euclidean gradient at `theta`, take
/// an SGD step, and retract back to the manifold by QR.
pub fn stiefel_update(theta: &Mat, euclid_grad: &Mat, lr: f64) -> Result<Mat> {
    let defect = theta.orthogonality_defect();
    if defect > MANIFOLD_TOLERANCE {
        return Err(CoreError::ManifoldDrift {
            frobenius: defect,
            tolerance: MANIFOLD_TOLERANCE,
        });
    }
    // G~ = G - Theta * sym(Theta' G), sym(A) = (A + A') / 2
    let tg = theta.transpose().matmul(euclid_grad);
    let sym = tg.add(&tg.transpose()).scale(0.5);
    let tangent = euclid_grad.sub(&theta.matmul(&sym));
    let stepped = theta.sub(&tangent.scale(lr));
    let (q, _r) = qr(&stepped);
    Ok(q)
}

/// One dual SWD block: orthogonal projection + element-wise dual functions.
#[derive(Clone)]
pub struct SwdBlock {
    /// r x r orthogonal projection matrix (Stiefel-constrained).
    pub theta: Tensor,
    pub u: Tensor,
    pub w: Tensor,
    pub b: Tensor,
}

impl SwdBlock {
    pub fn new(r: usize, rng: &mut Rng) -> Self {
        let theta = init_orthogonal(r, rng.next_u64());
        SwdBlock {
            theta: Tensor::param(&[r, r], theta.data),
            u: Tensor::param(&[r], rng.normal_vec(r)),
            w: Tensor::param(&[r], rng.normal_vec(r)),
            b: Tensor::param(&[r], vec![0.0; r]),
        }
    }

    pub fn latent(&self) -> usize {
        self.theta.shape()[0]
    }
}

impl ParamOwner for SwdBlock {
    fn visit_params(&mut self, prefix: &str, v: &mut dyn ParamVisitor) {
        v.visit(&join(prefix, "theta"), &mut self.theta);
        v.visit(&join(prefix, "u"), &mut self.u);
        v.visit(&join(prefix, "w"), &mut self.w);
        v.visit(&join(prefix, "b"), &mut self.b);
    }
}

/// Per-sample block score: mean_i u_i * LeakyReLU(w_i * (e Theta)_i + b_i).
pub fn swd_block_forward(embd: &Tensor, block: &SwdBlock, slope: f64) -> Tensor {
    let (bsz, r) = embd.dims2("swd_block_forward");
    assert_eq!(r, block.latent(), "latent width mismatch");
    let orth = embd.matmul(&block.theta);
    let pre = orth
        .mul(&block.w.broadcast_rows(bsz))
        .add(&block.b.broadcast_rows(bsz));
    let act = pre.leaky_relu(slope);
    let scored = act.mul(&block.u.broadcast_rows(bsz));
    scored
        .row_sum_keep()
        .mul_scalar(1.0 / r as f64)
        .reshape(&[bsz])
}

/// Strided-conv encoder ending in a dense projection to the latent width
/// (a WGAN-GP-style critic trunk without the final scalar layer; no
/// normalization layers so per-sample gradient penalties stay exact).
pub struct SwdEncoder {
    pub convs: Vec<Conv2d>,
    pub dense: Dense,
    pub slope: f64,
}

impl SwdEncoder {
    pub fn new(
        in_channels: usize,
        image_h: usize,
        image_w: usize,
        channels: &[usize],
        latent: usize,
        slope: f64,
        rng: &mut Rng,
    ) -> Self {
        let mut convs = Vec::new();
        let mut ic = in_channels;
        let mut h = image_h;
        let mut w = image_w;
        for &oc in channels {
            assert!(h % 2 == 0 && w % 2 == 0, "encoder input must halve cleanly");
            convs.push(Conv2d::new(ic, oc, 4, 2, 1, rng));
            ic = oc;
            h /= 2;
            w /= 2;
        }
        let dense = Dense::new(ic * h * w, latent, rng);
        SwdEncoder {
            convs,
            dense,
            slope,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let mut t = x.clone();
        for conv in &self.convs {
            t = conv.forward(&t).leaky_relu(self.slope);
        }
        let (b, c, h, w) = t.dims4("encoder trunk");
        self.dense.forward(&t.reshape(&[b, c * h * w]))
    }
}

impl ParamOwner for SwdEncoder {
    fn visit_params(&mut self, prefix: &str, v: &mut dyn ParamVisitor) {
        for (i, conv) in self.convs.iter_mut().enumerate() {
            conv.visit_params(&join(prefix, &alloc::format!("conv{i}")), v);
        }
        self.dense.visit_params(&join(prefix, "dense"), v);
    }
}

#[derive(Clone, Debug)]
pub struct SwdDiscConfig {
    pub in_channels: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub channels: Vec<usize>,
    /// Latent width r.
    pub latent: usize,
    /// Number of dual SWD blocks M.
    pub blocks: usize,
    pub leaky_slope: f64,
}

impl SwdDiscConfig {
    /// Word-level defaults: conditioned input (x concatenated with y),
    /// 32x128 canvas, r^w = 128, M^w = 4.
    pub fn word_default() -> Self {
        SwdDiscConfig {
            in_channels: 2,
            image_h: 32,
            image_w: 128,
            channels: vec![32, 64, 128, 256],
            latent: 128,
            blocks: 4,
            leaky_slope: 0.2,
        }
    }

    /// Character-level defaults: unconditioned 32x32 cells, r^c = 32, M^c = 4.
    pub fn char_default() -> Self {
        SwdDiscConfig {
            in_channels: 1,
            image_h: 32,
            image_w: 32,
            channels: vec![32, 64, 128],
            latent: 32,
            blocks: 4,
            leaky_slope: 0.2,
        }
    }
}

/// D := {S_m o E}: encoder plus M dual SWD blocks, scores averaged over
/// blocks.
pub struct SwdDiscriminator {
    pub encoder: SwdEncoder,
    pub blocks: Vec<SwdBlock>,
    pub config: SwdDiscConfig,
}

impl SwdDiscriminator {
    pub fn new(config: SwdDiscConfig, rng: &mut Rng) -> Self {
        let encoder = SwdEncoder::new(
            config.in_channels,
            config.image_h,
            config.image_w,
            &config.channels,
            config.latent,
            config.leaky_slope,
            rng,
        );
        let blocks = (0..config.blocks)
            .map(|_| SwdBlock::new(config.latent, rng))
            .collect();
        SwdDiscriminator {
            encoder,
            blocks,
            config,
        }
    }

    pub fn embed(&self, x: &Tensor) -> Tensor {
        self.encoder.forward(x)
    }

    /// Per-sample scores [b]: mean over the M blocks of the block outputs.
    pub fn forward(&self, x: &Tensor) -> Tensor {
        let embd = self.embed(x);
        self.score_embedding(&embd)
    }

    /// Scores from an already-computed embedding.
    pub fn score_embedding(&self, embd: &Tensor) -> Tensor {
        let mut acc: Option<Tensor> = None;
        for block in &self.blocks {
            let s = swd_block_forward(embd, block, self.config.leaky_slope);
            acc = Some(match acc {
                None => s,
                Some(a) => a.add(&s),
            });
        }
        acc.expect("discriminator needs at least one block")
            .mul_scalar(1.0 / self.blocks.len() as f64)
    }

    /// Re-orthogonalization safety check across all blocks.
    pub fn max_manifold_defect(&self) -> f64 {
        self.blocks
            .iter()
            .map(|blk| {
                let r = blk.latent();
                Mat {
                    rows: r,
                    cols: r,
                    data: blk.theta.data().to_vec(),
                }
                .orthogonality_defect()
            })
            .fold(0.0, f64::max)
    }
}

impl ParamOwner for SwdDiscriminator {
    fn visit_params(&mut self, prefix: &str, v: &mut dyn ParamVisitor) {
        self.encoder.visit_params(&join(prefix, "encoder"), v);
        for (i, blk) in self.blocks.iter_mut().enumerate() {
            blk.visit_params(&join(prefix, &alloc::format!("blocks.{i}")), v);
        }
    }
}

/// Parameter names that must be updated with `stiefel_update` rather than a
/// Euclidean optimizer.
pub fn is_stiefel_param(name: &str) -> bool {
    name.ends_with(".theta")
}
