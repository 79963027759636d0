//! Scalar objectives: convex-combination probe points, the squared gradient
//! penalty, the Lipschitz penalty on the dual functions, the word- and
//! character-level discriminator losses, the combined generator objective,
//! and CTC.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::math;
use crate::swd::{SwdBlock, SwdDiscriminator};
use crate::tensor::{grad, Tensor};

/// Every knob of the adversarial game in one place. Defaults are the
/// published operating point: lambda_char 2, lambda_recons 100,
/// lambda1 20, lambda2 10, lr 1e-4, M = 4 blocks, r_c 32, r_w 128.
#[derive(Clone, Debug)]
pub struct HyperParams {
    pub lambda_char: f64,
    pub lambda_recons: f64,
    pub lambda1_c: f64,
    pub lambda1_w: f64,
    pub lambda2_c: f64,
    pub lambda2_w: f64,
    pub n_critic: usize,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub m_c: usize,
    pub m_w: usize,
    pub r_c: usize,
    pub r_w: usize,
    pub batch_size: usize,
    pub leaky_slope: f64,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            lambda_char: 2.0,
            lambda_recons: 100.0,
            lambda1_c: 20.0,
            lambda1_w: 20.0,
            lambda2_c: 10.0,
            lambda2_w: 10.0,
            n_critic: 5,
            lr: 1e-4,
            adam_beta1: 0.0,
            adam_beta2: 0.9,
            m_c: 4,
            m_w: 4,
            r_c: 32,
            r_w: 128,
            batch_size: 16,
            leaky_slope: 0.2,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_char", self.lambda_char),
            ("lambda_recons", self.lambda_recons),
            ("lambda1_c", self.lambda1_c),
            ("lambda1_w", self.lambda1_w),
            ("lambda2_c", self.lambda2_c),
            ("lambda2_w", self.lambda2_w),
        ] {
            if v < 0.0 {
                return Err(CoreError::InvalidArgument(alloc::format!(
                    "{name} must be >= 0, got {v}"
                )));
            }
        }
        if self.n_critic < 1 {
            return Err(CoreError::InvalidArgument("n_critic must be >= 1".into()));
        }
        if !(self.lr >= 0.0) {
            return Err(CoreError::InvalidArgument(alloc::format!(
                "lr must be >= 0, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(CoreError::InvalidArgument("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-sample convex combination eps*x + (1-eps)*x_tilde. The result is a
/// fresh grad-enabled leaf: penalties probe it, nothing differentiates
/// through it.
pub fn interpolate(x: &Tensor, x_tilde: &Tensor, eps: &[f64]) -> Result<Tensor> {
    if x.shape() != x_tilde.shape() {
        return Err(CoreError::DimensionMismatch {
            expected: alloc::format!("{:?}", x.shape()),
            got: alloc::format!("{:?}", x_tilde.shape()),
        });
    }
    let b = x.shape()[0];
    if eps.len() != b {
        return Err(CoreError::DimensionMismatch {
            expected: alloc::format!("{b} eps values"),
            got: alloc::format!("{}", eps.len()),
        });
    }
    if eps.iter().any(|&e| !(0.0..=1.0).contains(&e)) {
        return Err(CoreError::InvalidArgument("eps must lie in [0,1]".into()));
    }
    let per = x.len() / b;
    let mut data = vec![0.0; x.len()];
    for bi in 0..b {
        let e = eps[bi];
        for i in 0..per {
            let idx = bi * per + i;
            data[idx] = e * x.data()[idx] + (1.0 - e) * x_tilde.data()[idx];
        }
    }
    Ok(Tensor::param(x.shape(), data))
}

/// Mean over the batch of ||d/dx D(x)||_2^2 at `x_hat` (the squared-norm
/// penalty; note there is no "-1" reference point).
///
/// `d` must produce independent per-sample scores [b] so that the gradient
/// of the summed score is the stack of per-sample gradients.
pub fn gradient_penalty_sq<D: Fn(&Tensor) -> Tensor>(d: D, x_hat: &Tensor) -> Tensor {
    let probe = x_hat.detach_with_grad();
    let scores = d(&probe);
    assert_eq!(
        scores.shape(),
        &[x_hat.shape()[0]],
        "scores must be per-sample"
    );
    let total = scores.sum_all();
    let gx = grad(&total, &[&probe]).remove(0);
    gx.sample_dot(&gx).mean_all()
}

/// Mean over batch and blocks of ||grad T(x_bar) - 1||_2^2 where the i-th
/// derivative of the dual function is u_i * w_i * LeakyReLU'(w_i x_i + b_i),
/// evaluated on the orthogonalized embedding coordinates.
pub fn lipschitz_penalty_t(blocks: &[SwdBlock], x_bar_embd: &Tensor, slope: f64) -> Tensor {
    let (bsz, r) = x_bar_embd.dims2("lipschitz_penalty_t");
    let mut acc: Option<Tensor> = None;
    for block in blocks {
        assert_eq!(block.latent(), r, "latent width mismatch");
        let orth = x_bar_embd.matmul(&block.theta);
        let pre = orth
            .mul(&block.w.broadcast_rows(bsz))
            .add(&block.b.broadcast_rows(bsz));
        // LeakyReLU' as a constant mask: piecewise-constant, so its own
        // derivative vanishes almost everywhere.
        let mask: Vec<f64> = pre
            .data()
            .iter()
            .map(|&v| if v > 0.0 { 1.0 } else { slope })
            .collect();
        let mask = Tensor::constant(&[bsz, r], mask);
        let dvec = block
            .u
            .broadcast_rows(bsz)
            .mul(&block.w.broadcast_rows(bsz))
            .mul(&mask);
        let dev = dvec.add_scalar(-1.0);
        let per_sample = dev.sample_dot(&dev);
        let term = per_sample.mean_all();
        acc = Some(match acc {
            None => term,
            Some(a) => a.add(&term),
        });
    }
    acc.expect("need at least one block")
        .mul_scalar(1.0 / blocks.len() as f64)
}

fn condition(img: &Tensor, y: &Tensor) -> Tensor {
    Tensor::concat(1, &[img.clone(), y.clone()])
}

/// Word-level loss value:
/// E[D(x|y)] - E[D(x_tilde|y)] + lambda1_w * GP + lambda2_w * LP.
/// The critic ascends the first difference and descends the penalties; see
/// [`critic_objective_word`].
pub fn word_disc_loss(
    x: &Tensor,
    x_tilde: &Tensor,
    y: &Tensor,
    x_hat: &Tensor,
    x_bar: &Tensor,
    d_w: &SwdDiscriminator,
    hp: &HyperParams,
) -> Tensor {
    let (gap, gp, lp) = word_disc_terms(x, x_tilde, y, x_hat, x_bar, d_w);
    gap.add(&gp.mul_scalar(hp.lambda1_w))
        .add(&lp.mul_scalar(hp.lambda2_w))
}

/// The three word-level terms (gap, gradient penalty, Lipschitz penalty).
pub fn word_disc_terms(
    x: &Tensor,
    x_tilde: &Tensor,
    y: &Tensor,
    x_hat: &Tensor,
    x_bar: &Tensor,
    d_w: &SwdDiscriminator,
) -> (Tensor, Tensor, Tensor) {
    let real = d_w.forward(&condition(x, y)).mean_all();
    let fake = d_w.forward(&condition(x_tilde, y)).mean_all();
    let gap = real.sub(&fake);

    let y_fixed = y.detach();
    let gp = gradient_penalty_sq(|probe| d_w.forward(&condition(probe, &y_fixed)), x_hat);

    let embd = d_w.embed(&condition(&x_bar.detach(), &y_fixed));
    let lp = lipschitz_penalty_t(&d_w.blocks, &embd, d_w.config.leaky_slope);
    (gap, gp, lp)
}

/// Character-level loss value over flattened cell batches (every character
/// of every word in the batch is one sample):
/// E[D(x_c)] - E[D(x_tilde_c)] + lambda1_c * GP + lambda2_c * LP.
pub fn char_disc_loss(
    cells_real: &Tensor,
    cells_gen: &Tensor,
    cells_hat: &Tensor,
    cells_bar: &Tensor,
    d_c: &SwdDiscriminator,
    hp: &HyperParams,
) -> Tensor {
    let (gap, gp, lp) = char_disc_terms(cells_real, cells_gen, cells_hat, cells_bar, d_c);
    gap.add(&gp.mul_scalar(hp.lambda1_c))
        .add(&lp.mul_scalar(hp.lambda2_c))
}

pub fn char_disc_terms(
    cells_real: &Tensor,
    cells_gen: &Tensor,
    cells_hat: &Tensor,
    cells_bar: &Tensor,
    d_c: &SwdDiscriminator,
) -> (Tensor, Tensor, Tensor) {
    let real = d_c.forward(cells_real).mean_all();
    let fake = d_c.forward(cells_gen).mean_all();
    let gap = real.sub(&fake);
    let gp = gradient_penalty_sq(|probe| d_c.forward(probe), cells_hat);
    let embd = d_c.embed(&cells_bar.detach());
    let lp = lipschitz_penalty_t(&d_c.blocks, &embd, d_c.config.leaky_slope);
    (gap, gp, lp)
}

/// Mean absolute difference over batch and pixels (the L1 reconstruction
/// term, pix2pix normalization).
pub fn l1_reconstruction(x_tilde: &Tensor, x: &Tensor) -> Tensor {
    x_tilde.sub(x).abs().mean_all()
}

/// Combined generator objective:
/// L_w_term + lambda_char * L_c_term + lambda_recons * E||x_tilde - x||_1,
/// where the adversarial terms carry the generator-side sign (the generator
/// minimizes this; penalty terms are excluded since they regularize the critics
/// only and are detached from the generator's gradient).
pub fn total_generator_loss(
    l_w_term: &Tensor,
    l_c_term: &Tensor,
    x: &Tensor,
    x_tilde: &Tensor,
    hp: &HyperParams,
) -> Tensor {
    let recon = l1_reconstruction(x_tilde, x);
    l_w_term
        .add(&l_c_term.mul_scalar(hp.lambda_char))
        .add(&recon.mul_scalar(hp.lambda_recons))
}

// ---- CTC ----

/// Minimal number of frames needed to emit `label` (adjacent repeats force a
/// separating blank).
pub fn ctc_min_steps(label: &[usize]) -> usize {
    let repeats = label.windows(2).filter(|w| w[0] == w[1]).count();
    label.len() + repeats
}

/// CTC negative log-likelihood of `label` under per-step log-probabilities
/// [T, classes]; the blank is the last class. Standard log-space
/// forward/backward over the blank-expanded label.
///
/// First-order differentiable: the backward pass uses the alpha-beta
/// posterior as a constant, which is exact for gradients but not for
/// higher-order derivatives (nothing in this crate needs those through CTC).
pub fn ctc_loss(log_probs: &Tensor, label: &[usize]) -> Result<Tensor> {
    let (t_steps, classes) = log_probs.dims2("ctc_loss");
    if classes < 2 {
        return Err(CoreError::InvalidArgument(
            "need at least one symbol plus blank".into(),
        ));
    }
    let blank = classes - 1;
    for &s in label {
        if s >= blank {
            return Err(CoreError::InvalidArgument(alloc::format!(
                "label symbol {s} out of range (blank = {blank})"
            )));
        }
    }
    let min_steps = ctc_min_steps(label);
    if t_steps < min_steps {
        return Err(CoreError::LabelTooLong {
            label_len: label.len(),
            min_steps,
            steps: t_steps,
        });
    }

    // Expanded label: blank, l1, blank, l2, ..., blank
    let s_len = 2 * label.len() + 1;
    let sym = |s: usize| -> usize {
        if s % 2 == 0 {
            blank
        } else {
            label[s / 2]
        }
    };
    let lp = |t: usize, k: usize| log_probs.data()[t * classes + k];
    let neg = f64::NEG_INFINITY;

    // Forward variables (alpha includes the emission at t).
    let mut alpha = vec![neg; t_steps * s_len];
    alpha[0] = lp(0, blank);
    if s_len > 1 {
        alpha[1] = lp(0, sym(1));
    }
    for t in 1..t_steps {
        for s in 0..s_len {
            let stay = alpha[(t - 1) * s_len + s];
            let step = if s >= 1 {
                alpha[(t - 1) * s_len + s - 1]
            } else {
                neg
            };
            let skip = if s >= 2 && sym(s) != blank && sym(s) != sym(s - 2) {
                alpha[(t - 1) * s_len + s - 2]
            } else {
                neg
            };
            let total = math::logsumexp3(stay, step, skip);
            alpha[t * s_len + s] = if total == neg {
                neg
            } else {
                total + lp(t, sym(s))
            };
        }
    }
    let log_p = if s_len > 1 {
        math::logsumexp2(
            alpha[(t_steps - 1) * s_len + s_len - 1],
            alpha[(t_steps - 1) * s_len + s_len - 2],
        )
    } else {
        alpha[(t_steps - 1) * s_len]
    };
    if !log_p.is_finite() {
        return Err(CoreError::NumericalFailure(
            "ctc alignment probability is zero".into(),
        ));
    }

    // Backward variables (beta excludes the emission at t).
    let mut beta = vec![neg; t_steps * s_len];
    beta[(t_steps - 1) * s_len + s_len - 1] = 0.0;
    if s_len > 1 {
        beta[(t_steps - 1) * s_len + s_len - 2] = 0.0;
    }
    for t in (0..t_steps - 1).rev() {
        for s in 0..s_len {
            let stay = beta[(t + 1) * s_len + s] + lp(t + 1, sym(s));
            let step = if s + 1 < s_len {
                beta[(t + 1) * s_len + s + 1] + lp(t + 1, sym(s + 1))
            } else {
                neg
            };
            let skip = if s + 2 < s_len && sym(s + 2) != blank && sym(s + 2) != sym(s) {
                beta[(t + 1) * s_len + s + 2] + lp(t + 1, sym(s + 2))
            } else {
                neg
            };
            beta[t * s_len + s] = math::logsumexp3(stay, step, skip);
        }
    }

    // Posterior over classes per step: gamma[t][k] = P(path emits k at t).
    let mut gamma = vec![0.0; t_steps * classes];
    for t in 0..t_steps {
        for s in 0..s_len {
            let a = alpha[t * s_len + s];
            let b = beta[t * s_len + s];
            if a == neg || b == neg {
                continue;
            }
            gamma[t * classes + sym(s)] += math::exp(a + b - log_p);
        }
    }

    let posterior = Tensor::constant(&[t_steps, classes], gamma);
    let shape = vec![t_steps, classes];
    Ok(Tensor::from_op(
        vec![1],
        vec![-log_p],
        vec![log_probs.clone()],
        Box::new(move |_p, _o, g| {
            let dlp = g.broadcast_to(&shape).mul(&posterior).neg();
            vec![Some(dlp)]
        }),
    ))
}

/// Mean CTC loss over a batch: per-step [b, classes] log-probabilities and
/// one label per sample.
pub fn ctc_loss_batch(log_prob_seq: &[Tensor], labels: &[Vec<usize>]) -> Result<Tensor> {
    let b = log_prob_seq[0].shape()[0];
    if labels.len() != b {
        return Err(CoreError::DimensionMismatch {
            expected: alloc::format!("{b} labels"),
            got: alloc::format!("{}", labels.len()),
        });
    }
    let mut acc: Option<Tensor> = None;
    for (bi, label) in labels.iter().enumerate() {
        let rows: Vec<Tensor> = log_prob_seq
            .iter()
            .map(|s| s.slice_axis(0, bi, 1))
            .collect();
        let mat = Tensor::concat(0, &rows);
        let loss = ctc_loss(&mat, label)?;
        acc = Some(match acc {
            None => loss,
            Some(a) => a.add(&loss),
        });
    }
    Ok(acc.expect("non-empty batch").mul_scalar(1.0 / b as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamOwner;
    use crate::rng::Rng;
    use crate::swd::{SwdDiscConfig, SwdDiscriminator};
    use crate::tensor::{max_rel_err, numeric_gradient};

    #[test]
    fn interpolate_endpoints_and_midpoint() {
        let x = Tensor::constant(&[2, 1, 1, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let xt = Tensor::constant(&[2, 1, 1, 2], vec![5.0, 6.0, 7.0, 8.0]);
        assert_eq!(interpolate(&x, &xt, &[1.0, 1.0]).unwrap().data(), x.data());
        assert_eq!(interpolate(&x, &xt, &[0.0, 0.0]).unwrap().data(), xt.data());
        let mid = interpolate(&x, &xt, &[0.5, 0.5]).unwrap();
        assert_eq!(mid.data(), &[3.0, 4.0, 5.0, 6.0]);
        assert!(interpolate(&x, &xt, &[0.5]).is_err());
        assert!(interpolate(&x, &xt, &[0.5, 1.5]).is_err());
    }

    #[test]
    fn gradient_penalty_of_constant_d_is_zero() {
        let x = Tensor::constant(&[3, 1, 2, 2], vec![0.5; 12]);
        let gp = gradient_penalty_sq(|p| Tensor::full(&[p.shape()[0]], 7.0), &x);
        assert_eq!(gp.scalar_value(), 0.0);
    }

    #[test]
    fn gradient_penalty_of_linear_d_is_weight_norm() {
        // D(x) = <a, x> per sample: the penalty is exactly ||a||^2.
        let mut rng = Rng::new(1);
        let a = rng.normal_vec(4);
        let a_t = Tensor::constant(&[2, 1, 2, 2], [a.clone(), a.clone()].concat());
        let x = Tensor::constant(&[2, 1, 2, 2], rng.normal_vec(8));
        let gp = gradient_penalty_sq(|p| p.sample_dot(&a_t), &x);
        let want: f64 = a.iter().map(|v| v * v).sum();
        assert!((gp.scalar_value() - want).abs() < 1e-6);
    }

    #[test]
    fn gradient_penalty_param_grads_match_fd() {
        // gp through a one-conv "discriminator": double backprop path.
        let mut rng = Rng::new(2);
        let x0 = rng.normal_vec(2 * 1 * 4 * 4);
        let w0 = rng.normal_vec(1 * 1 * 3 * 3);

        let build = |wv: &[f64]| {
            let w = Tensor::param(&[1, 1, 3, 3], wv.to_vec());
            let x = Tensor::constant(&[2, 1, 4, 4], x0.clone());
            let gp = gradient_penalty_sq(
                |p| {
                    let y = p.conv2d(&w, 1, 1).tanh();
                    y.sample_dot(&Tensor::ones(y.shape()))
                },
                &x,
            );
            (gp, w)
        };
        let (gp, w) = build(&w0);
        let analytic = grad(&gp, &[&w]).remove(0);
        let numeric = numeric_gradient(|v| build(v).0.scalar_value(), &w0, 1e-5);
        let err = max_rel_err(analytic.data(), &numeric);
        assert!(err < 1e-6, "gp param rel err {err}");
    }

    fn unit_slope_block(r: usize) -> SwdBlock {
        let mut rng = Rng::new(3);
        let mut blk = SwdBlock::new(r, &mut rng);
        blk.u = Tensor::param(&[r], vec![1.0; r]);
        blk.w = Tensor::param(&[r], vec![1.0; r]);
        blk.b = Tensor::param(&[r], vec![1e3; r]);
        blk
    }

    #[test]
    fn lipschitz_penalty_zero_at_unit_slope() {
        let r = 6;
        let blk = unit_slope_block(r);
        let mut rng = Rng::new(4);
        let embd = Tensor::constant(&[3, r], rng.normal_vec(3 * r));
        let lp = lipschitz_penalty_t(&[blk.clone()], &embd, 0.2);
        assert_eq!(lp.scalar_value(), 0.0);
    }

    #[test]
    fn lipschitz_penalty_zero_u_is_latent_width() {
        let r = 5;
        let mut rng = Rng::new(5);
        let mut blk = SwdBlock::new(r, &mut rng);
        blk.u = Tensor::param(&[r], vec![0.0; r]);
        let embd = Tensor::constant(&[2, r], rng.normal_vec(2 * r));
        let lp = lipschitz_penalty_t(&[blk.clone()], &embd, 0.2);
        assert!((lp.scalar_value() - r as f64).abs() < 1e-12);
    }

    #[test]
    fn lipschitz_penalty_matches_scalar_reference() {
        let r = 4;
        let slope = 0.2;
        let mut rng = Rng::new(6);
        let blk = SwdBlock::new(r, &mut rng);
        let embd_data = rng.normal_vec(3 * r);
        let embd = Tensor::constant(&[3, r], embd_data.clone());
        let lp = lipschitz_penalty_t(&[blk.clone()], &embd, slope).scalar_value();

        let mut want = 0.0;
        for bi in 0..3 {
            let mut dev_sq = 0.0;
            for i in 0..r {
                let mut orth = 0.0;
                for j in 0..r {
                    orth += embd_data[bi * r + j] * blk.theta.data()[j * r + i];
                }
                let pre = blk.w.data()[i] * orth + blk.b.data()[i];
                let dprime = if pre > 0.0 { 1.0 } else { slope };
                let d = blk.u.data()[i] * blk.w.data()[i] * dprime;
                dev_sq += (d - 1.0) * (d - 1.0);
            }
            want += dev_sq / 3.0;
        }
        assert!((lp - want).abs() < 1e-12);
    }

    #[test]
    fn lipschitz_penalty_grads_match_fd() {
        let r = 4;
        let mut rng = Rng::new(7);
        let embd_data = rng.normal_vec(2 * r);
        let u0 = rng.normal_vec(r);

        let build = |uv: &[f64]| {
            let mut rng2 = Rng::new(70);
            let mut blk = SwdBlock::new(r, &mut rng2);
            blk.u = Tensor::param(&[r], uv.to_vec());
            let embd = Tensor::constant(&[2, r], embd_data.clone());
            let lp = lipschitz_penalty_t(&[blk.clone()], &embd, 0.2);
            (lp, blk)
        };
        let (lp, blk) = build(&u0);
        let analytic = grad(&lp, &[&blk.u]).remove(0);
        let numeric = numeric_gradient(|v| build(v).0.scalar_value(), &u0, 1e-6);
        assert!(max_rel_err(analytic.data(), &numeric) < 1e-7);
    }

    fn tiny_word_disc(rng: &mut Rng) -> SwdDiscriminator {
        SwdDiscriminator::new(
            SwdDiscConfig {
                in_channels: 2,
                image_h: 4,
                image_w: 8,
                channels: vec![2, 3],
                latent: 4,
                blocks: 2,
                leaky_slope: 0.2,
            },
            rng,
        )
    }

    #[test]
    fn word_loss_zero_for_identical_inputs_without_penalties() {
        let mut rng = Rng::new(8);
        let d = tiny_word_disc(&mut rng);
        let mut hp = HyperParams::default();
        hp.lambda1_w = 0.0;
        hp.lambda2_w = 0.0;
        let x = Tensor::constant(&[2, 1, 4, 8], rng.normal_vec(64));
        let y = Tensor::constant(&[2, 1, 4, 8], rng.normal_vec(64));
        let x_hat = interpolate(&x, &x, &[0.3, 0.7]).unwrap();
        let loss = word_disc_loss(&x, &x, &y, &x_hat, &x_hat, &d, &hp);
        assert!(loss.scalar_value().abs() < 1e-12);
    }

    #[test]
    fn word_loss_constant_d_zero_u_scales_with_latent() {
        // Constant (zero-weight) encoder and u = 0: difference term and GP
        // vanish, LP contributes lambda2_w * r per the zero-u case.
        let mut rng = Rng::new(9);
        let mut d = tiny_word_disc(&mut rng);
        d.visit_params("", &mut |name: &str, t: &mut Tensor| {
            if name.contains("encoder") || name.ends_with(".u") {
                *t = Tensor::param(t.shape(), vec![0.0; t.len()]);
            }
        });
        let hp = HyperParams::default();
        let x = Tensor::constant(&[2, 1, 4, 8], rng.normal_vec(64));
        let xt = Tensor::constant(&[2, 1, 4, 8], rng.normal_vec(64));
        let y = Tensor::constant(&[2, 1, 4, 8], rng.normal_vec(64));
        let x_hat = interpolate(&x, &xt, &[0.5, 0.5]).unwrap();
        let loss = word_disc_loss(&x, &xt, &y, &x_hat, &x_hat, &d, &hp);
        let want = hp.lambda2_w * 4.0; // r = 4
        assert!(
            (loss.scalar_value() - want).abs() < 1e-9,
            "{} vs {want}",
            loss.scalar_value()
        );
    }

    #[test]
    fn word_loss_matches_term_by_term_assembly() {
        let mut rng = Rng::new(10);
        let d = tiny_word_disc(&mut rng);
        let hp = HyperParams::default();
        let x = Tensor::constant(&[2, 1, 4, 8], rng.normal_vec(64));
        let xt = Tensor::constant(&[2, 1, 4, 8], rng.normal_vec(64));
        let y = Tensor::constant(&[2, 1, 4, 8], rng.normal_vec(64));
        let x_hat = interpolate(&x, &xt, &[0.2, 0.9]).unwrap();
        let x_bar = interpolate(&x, &xt, &[0.6, 0.1]).unwrap();

        let loss = word_disc_loss(&x, &xt, &y, &x_hat, &x_bar, &d, &hp).scalar_value();
        let (gap, gp, lp) = word_disc_terms(&x, &xt, &y, &x_hat, &x_bar, &d);
        let want = gap.scalar_value()
            + hp.lambda1_w * gp.scalar_value()
            + hp.lambda2_w * lp.scalar_value();
        assert!((loss - want).abs() < 1e-12);
        assert!(gp.scalar_value() >= 0.0);
        assert!(lp.scalar_value() >= 0.0);
    }

    #[test]
    fn word_loss_is_batch_permutation_invariant() {
        let mut rng = Rng::new(11);
        let d = tiny_word_disc(&mut rng);
        let hp = HyperParams::default();
        let xa = rng.normal_vec(32);
        let xb = rng.normal_vec(32);
        let ya = rng.normal_vec(32);
        let yb = rng.normal_vec(32);
        let ta = rng.normal_vec(32);
        let tb = rng.normal_vec(32);

        let pack = |first: &[f64], second: &[f64]| {
            Tensor::constant(&[2, 1, 4, 8], [first.to_vec(), second.to_vec()].concat())
        };
        let loss_for = |order: bool| {
            let (x, y, xt, eps) = if order {
                (pack(&xa, &xb), pack(&ya, &yb), pack(&ta, &tb), [0.3, 0.8])
            } else {
                (pack(&xb, &xa), pack(&yb, &ya), pack(&tb, &ta), [0.8, 0.3])
            };
            let x_hat = interpolate(&x, &xt, &eps).unwrap();
            word_disc_loss(&x, &xt, &y, &x_hat, &x_hat, &d, &hp).scalar_value()
        };
        assert!((loss_for(true) - loss_for(false)).abs() < 1e-12);
    }

    fn tiny_char_disc(rng: &mut Rng) -> SwdDiscriminator {
        SwdDiscriminator::new(
            SwdDiscConfig {
                in_channels: 1,
                image_h: 4,
                image_w: 4,
                channels: vec![2],
                latent: 3,
                blocks: 2,
                leaky_slope: 0.2,
            },
            rng,
        )
    }

    #[test]
    fn char_loss_zero_for_identical_cells_without_penalties() {
        let mut rng = Rng::new(12);
        let d = tiny_char_disc(&mut rng);
        let mut hp = HyperParams::default();
        hp.lambda1_c = 0.0;
        hp.lambda2_c = 0.0;
        let cells = Tensor::constant(&[5, 1, 4, 4], rng.normal_vec(80));
        let hat = interpolate(&cells, &cells, &vec![0.5; 5]).unwrap();
        let loss = char_disc_loss(&cells, &cells, &hat, &hat, &d, &hp);
        assert!(loss.scalar_value().abs() < 1e-12);
    }

    #[test]
    fn char_loss_averages_over_characters_not_words() {
        // Words with 2 and 3 characters flatten to a 5-cell batch; the
        // expectation runs over the 5 cells.
        let mut rng = Rng::new(13);
        let d = tiny_char_disc(&mut rng);
        let mut hp = HyperParams::default();
        hp.lambda1_c = 0.0;
        hp.lambda2_c = 0.0;
        let real = Tensor::constant(&[5, 1, 4, 4], rng.normal_vec(80));
        let gen = Tensor::constant(&[5, 1, 4, 4], rng.normal_vec(80));
        let hat = interpolate(&real, &gen, &vec![0.5; 5]).unwrap();
        let loss = char_disc_loss(&real, &gen, &hat, &hat, &d, &hp).scalar_value();

        let scores_real = d.forward(&real);
        let scores_gen = d.forward(&gen);
        let mean5 = |t: &Tensor| t.data().iter().sum::<f64>() / 5.0;
        let want = mean5(&scores_real) - mean5(&scores_gen);
        assert!((loss - want).abs() < 1e-12);
    }

    #[test]
    fn char_loss_matches_term_by_term_assembly() {
        let mut rng = Rng::new(40);
        let d = tiny_char_disc(&mut rng);
        let hp = HyperParams::default();
        let real = Tensor::constant(&[4, 1, 4, 4], rng.normal_vec(64));
        let gen = Tensor::constant(&[4, 1, 4, 4], rng.normal_vec(64));
        let hat = interpolate(&real, &gen, &[0.1, 0.4, 0.7, 0.95]).unwrap();
        let bar = interpolate(&real, &gen, &[0.8, 0.3, 0.6, 0.2]).unwrap();
        let loss = char_disc_loss(&real, &gen, &hat, &bar, &d, &hp).scalar_value();
        let (gap, gp, lp) = char_disc_terms(&real, &gen, &hat, &bar, &d);
        let want = gap.scalar_value()
            + hp.lambda1_c * gp.scalar_value()
            + hp.lambda2_c * lp.scalar_value();
        assert!((loss - want).abs() < 1e-12);
    }

    #[test]
    fn char_loss_is_cell_permutation_invariant() {
        let mut rng = Rng::new(41);
        let d = tiny_char_disc(&mut rng);
        let hp = HyperParams::default();
        let cells: Vec<Vec<f64>> = (0..3).map(|_| rng.normal_vec(16)).collect();
        let gens: Vec<Vec<f64>> = (0..3).map(|_| rng.normal_vec(16)).collect();
        let eps = [0.2, 0.5, 0.9];
        let loss_for = |order: [usize; 3]| {
            let pack = |src: &[Vec<f64>]| {
                Tensor::constant(
                    &[3, 1, 4, 4],
                    order.iter().flat_map(|&i| src[i].iter().copied()).collect(),
                )
            };
            let r = pack(&cells);
            let g = pack(&gens);
            let e: Vec<f64> = order.iter().map(|&i| eps[i]).collect();
            let hat = interpolate(&r, &g, &e).unwrap();
            char_disc_loss(&r, &g, &hat, &hat, &d, &hp).scalar_value()
        };
        let a = loss_for([0, 1, 2]);
        let b = loss_for([2, 0, 1]);
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn generator_loss_zero_when_perfect() {
        let mut rng = Rng::new(14);
        let x = Tensor::constant(&[2, 1, 2, 2], rng.normal_vec(8));
        let zero = Tensor::zeros(&[1]);
        let hp = HyperParams::default();
        let total = total_generator_loss(&zero, &zero, &x, &x, &hp);
        assert_eq!(total.scalar_value(), 0.0);
    }

    #[test]
    fn generator_loss_recons_scaling_is_linear() {
        let mut rng = Rng::new(15);
        let x = Tensor::constant(&[2, 1, 2, 2], rng.normal_vec(8));
        let xt = Tensor::constant(&[2, 1, 2, 2], rng.normal_vec(8));
        let zero = Tensor::zeros(&[1]);
        let mut hp = HyperParams::default();
        hp.lambda_recons = 50.0;
        let a = total_generator_loss(&zero, &zero, &x, &xt, &hp).scalar_value();
        hp.lambda_recons = 100.0;
        let b = total_generator_loss(&zero, &zero, &x, &xt, &hp).scalar_value();
        assert!((b - 2.0 * a).abs() < 1e-12);
    }

    #[test]
    fn generator_loss_default_weighting() {
        // lambda_char = 2, lambda_recons = 100 on a fixed instance.
        let mut rng = Rng::new(16);
        let x = Tensor::constant(&[1, 1, 2, 2], rng.normal_vec(4));
        let xt = Tensor::constant(&[1, 1, 2, 2], rng.normal_vec(4));
        let lw = Tensor::constant(&[1], vec![0.37]);
        let lc = Tensor::constant(&[1], vec![-0.11]);
        let hp = HyperParams::default();
        assert_eq!(hp.lambda_char, 2.0);
        assert_eq!(hp.lambda_recons, 100.0);
        let total = total_generator_loss(&lw, &lc, &x, &xt, &hp).scalar_value();
        let recon = l1_reconstruction(&xt, &x).scalar_value();
        let want = 0.37 + 2.0 * (-0.11) + 100.0 * recon;
        assert!((total - want).abs() < 1e-12);
    }

    // ---- CTC ----

    #[test]
    fn ctc_single_step_single_symbol() {
        // T=1, label "a", p(a) = 0.6 -> -ln 0.6
        let lp = Tensor::constant(&[1, 3], vec![0.6f64.ln(), 0.3f64.ln(), 0.1f64.ln()]);
        let loss = ctc_loss(&lp, &[0]).unwrap();
        assert!((loss.scalar_value() + 0.6f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ctc_two_steps_three_alignments() {
        // T=2, label "a": paths aa, a-, -a
        let p1 = [0.5, 0.2, 0.3]; // a, b, blank
        let p2 = [0.1, 0.6, 0.3];
        let lp = Tensor::constant(
            &[2, 3],
            p1.iter().chain(p2.iter()).map(|&v: &f64| v.ln()).collect(),
        );
        let loss = ctc_loss(&lp, &[0]).unwrap();
        let want = -(p1[0] * p2[0] + p1[0] * p2[2] + p1[2] * p2[0]).ln();
        assert!((loss.scalar_value() - want).abs() < 1e-12);
    }

    /// Brute-force CTC: enumerate every path in (classes)^T, keep those that
    /// collapse to the label.
    fn ctc_enumerate(probs: &[Vec<f64>], label: &[usize], blank: usize) -> f64 {
        let t = probs.len();
        let classes = probs[0].len();
        let mut total = 0.0;
        let mut path = vec![0usize; t];
        loop {
            // collapse
            let mut collapsed: Vec<usize> = Vec::new();
            let mut prev = usize::MAX;
            for &c in &path {
                if c != prev && c != blank {
                    collapsed.push(c);
                }
                prev = c;
            }
            if collapsed == label {
                let p: f64 = path.iter().enumerate().map(|(i, &c)| probs[i][c]).product();
                total += p;
            }
            // next path
            let mut i = 0;
            loop {
                if i == t {
                    return -total.ln();
                }
                path[i] += 1;
                if path[i] < classes {
                    break;
                }
                path[i] = 0;
                i += 1;
            }
        }
    }

    #[test]
    fn ctc_matches_exhaustive_enumeration() {
        let mut rng = Rng::new(17);
        for t in 1..=5usize {
            for alphabet in 1..=3usize {
                let classes = alphabet + 1;
                // random normalized rows
                let probs: Vec<Vec<f64>> = (0..t)
                    .map(|_| {
                        let raw: Vec<f64> = (0..classes).map(|_| rng.uniform() + 0.05).collect();
                        let s: f64 = raw.iter().sum();
                        raw.into_iter().map(|v| v / s).collect()
                    })
                    .collect();
                let lp = Tensor::constant(
                    &[t, classes],
                    probs.iter().flatten().map(|&v| v.ln()).collect(),
                );
                // all labels of length 0..=t over the alphabet (feasible ones)
                let mut labels: Vec<Vec<usize>> = vec![Vec::new()];
                for _ in 0..t {
                    let mut next = Vec::new();
                    for l in &labels {
                        for s in 0..alphabet {
                            let mut l2 = l.clone();
                            l2.push(s);
                            next.push(l2);
                        }
                    }
                    labels.extend(next);
                }
                labels.dedup();
                for label in labels {
                    if ctc_min_steps(&label) > t {
                        assert!(matches!(
                            ctc_loss(&lp, &label).unwrap_err(),
                            CoreError::LabelTooLong { .. }
                        ));
                        continue;
                    }
                    let got = ctc_loss(&lp, &label).unwrap().scalar_value();
                    let want = ctc_enumerate(&probs, &label, alphabet);
                    assert!(
                        (got - want).abs() <= 1e-10,
                        "t={t} alphabet={alphabet} label={label:?}: {got} vs {want}"
                    );
                }
            }
        }
    }

    #[test]
    fn ctc_rejects_infeasible_label() {
        let lp = Tensor::constant(&[2, 3], vec![-1.0; 6]);
        // "aa" needs 3 steps (blank between repeats)
        assert!(matches!(
            ctc_loss(&lp, &[0, 0]).unwrap_err(),
            CoreError::LabelTooLong { min_steps: 3, .. }
        ));
    }

    #[test]
    fn ctc_gradients_match_fd() {
        let mut rng = Rng::new(18);
        let (t, classes) = (4, 4);
        let x0 = rng.normal_vec(t * classes);
        let label = vec![0usize, 2];

        let f = |v: &[f64]| {
            let x = Tensor::param(&[t, classes], v.to_vec());
            let lp = crate::tensor::log_softmax_rows(&x);
            (ctc_loss(&lp, &label).unwrap(), x)
        };
        let (loss, x) = f(&x0);
        let analytic = grad(&loss, &[&x]).remove(0);
        let numeric = numeric_gradient(|v| f(v).0.scalar_value(), &x0, 1e-6);
        let err = max_rel_err(analytic.data(), &numeric);
        assert!(err < 1e-7, "ctc rel err {err}");
    }

    #[test]
    fn hyperparams_validate() {
        assert!(HyperParams::default().validate().is_ok());
        let mut hp = HyperParams::default();
        hp.lambda_char = -1.0;
        assert!(hp.validate().is_err());
        let mut hp = HyperParams::default();
        hp.n_critic = 0;
        assert!(hp.validate().is_err());
    }
}
