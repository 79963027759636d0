//! Network building blocks on top of the autodiff tape: convolution layers,
//! dense layers, batch norm, LSTM cells, and a visitor for named parameters.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Walks every parameter tensor of a model in a stable order. The same
/// traversal feeds the optimizer and the checkpoint writer, so ordering and
/// names must not depend on runtime values.
pub trait ParamVisitor {
    fn visit(&mut self, name: &str, t: &mut Tensor);
}

impl<F: FnMut(&str, &mut Tensor)> ParamVisitor for F {
    fn visit(&mut self, name: &str, t: &mut Tensor) {
        self(name, t)
    }
}

/// Visitor over non-trainable state (batch-norm running statistics).
pub trait BufferVisitor {
    fn visit(&mut self, name: &str, data: &mut Vec<f64>);
}

impl<F: FnMut(&str, &mut Vec<f64>)> BufferVisitor for F {
    fn visit(&mut self, name: &str, data: &mut Vec<f64>) {
        self(name, data)
    }
}

pub trait ParamOwner {
    fn visit_params(&mut self, prefix: &str, v: &mut dyn ParamVisitor);

    /// Running buffers that belong in a checkpoint but receive no
    /// gradients. Most layers have none.
    fn visit_buffers(&mut self, _prefix: &str, _v: &mut dyn BufferVisitor) {}

    fn named_params(&mut self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit_params("", &mut |name: &str, t: &mut Tensor| {
            out.push((String::from(name), t.clone()));
        });
        out
    }

    fn param_count(&mut self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        String::from(name)
    } else {
        format!("{prefix}.{name}")
    }
}

fn gaussian_param(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.normal() * std).collect();
    Tensor::param(shape, data)
}

// ---- convolution ----

pub struct Conv2d {
    pub w: Tensor,
    pub b: Tensor,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(ic: usize, oc: usize, k: usize, stride: usize, pad: usize, rng: &mut Rng) -> Self {
        let std = math::sqrt(2.0 / (ic * k * k) as f64);
        Conv2d {
            w: gaussian_param(&[oc, ic, k, k], std, rng),
            b: Tensor::param(&[oc], vec![0.0; oc]),
            stride,
            pad,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let y = x.conv2d(&self.w, self.stride, self.pad);
        let (b, _c, h, w) = y.dims4("conv2d out");
        y.add(&self.b.broadcast_channel(b, h, w))
    }
}

impl ParamOwner for Conv2d {
    fn visit_params(&mut self, prefix: &str, v: &mut dyn ParamVisitor) {
        v.visit(&join(prefix, "w"), &mut self.w);
        v.visit(&join(prefix, "b"), &mut self.b);
    }
}

/// Transposed convolution (the adjoint of a strided conv), used by the
/// decoder half of the generator. Weight layout [ic, oc, kh, kw].
pub struct Deconv2d {
    pub w: Tensor,
    pub b: Tensor,
    pub stride: usize,
    pub pad: usize,
}

impl Deconv2d {
    pub fn new(ic: usize, oc: usize, k: usize, stride: usize, pad: usize, rng: &mut Rng) -> Self {
        let std = math::sqrt(2.0 / (ic * k * k) as f64);
        Deconv2d {
            w: gaussian_param(&[ic, oc, k, k], std, rng),
            b: Tensor::param(&[oc], vec![0.0; oc]),
            stride,
            pad,
        }
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.w.shape()[2];
        (
            (h - 1) * self.stride + k - 2 * self.pad,
            (w - 1) * self.stride + k - 2 * self.pad,
        )
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let (_b, _c, h, w) = x.dims4("deconv in");
        let (oh, ow) = self.out_size(h, w);
        let y = x.conv2d_input_grad(&self.w, self.stride, self.pad, oh, ow);
        let (b, _c, h2, w2) = y.dims4("deconv out");
        y.add(&self.b.broadcast_channel(b, h2, w2))
    }
}

impl ParamOwner for Deconv2d {
    fn visit_params(&mut self, prefix: &str, v: &mut dyn ParamVisitor) {
        v.visit(&join(prefix, "w"), &mut self.w);
        v.visit(&join(prefix, "b"), &mut self.b);
    }
}

// ---- dense ----

pub struct Dense {
    pub w: Tensor,
    pub b: Tensor,
}

impl Dense {
    pub fn new(input: usize, output: usize, rng: &mut Rng) -> Self {
        let std = math::sqrt(1.0 / input as f64);
        Dense {
            w: gaussian_param(&[input, output], std, rng),
            b: Tensor::param(&[output], vec![0.0; output]),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let (m, _) = x.dims2("dense in");
        x.matmul(&self.w).add(&self.b.broadcast_rows(m))
    }
}

impl ParamOwner for Dense {
    fn visit_params(&mut self, prefix: &str, v: &mut dyn ParamVisitor) {
        v.visit(&join(prefix, "w"), &mut self.w);
        v.visit(&join(prefix, "b"), &mut self.b);
    }
}

// ---- batch norm ----

/// Per-channel batch normalization for [b,c,h,w] tensors.
///
/// `forward_train` normalizes with batch statistics and updates the running
/// buffers; `forward_eval` applies the stored statistics as constants, which
/// is also what the finite-difference gradient tests require.
pub struct BatchNorm2d {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new(c: usize) -> Self {
        BatchNorm2d {
            gamma: Tensor::param(&[c], vec![1.0; c]),
            beta: Tensor::param(&[c], vec![0.0; c]),
            running_mean: vec![0.0; c],
            running_var: vec![1.0; c],
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    fn affine(&self, xhat: &Tensor) -> Tensor {
        let (b, _c, h, w) = xhat.dims4("batchnorm");
        xhat.mul(&self.gamma.broadcast_channel(b, h, w))
            .add(&self.beta.broadcast_channel(b, h, w))
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Tensor {
        let (b, c, h, w) = x.dims4("batchnorm");
        let count = (b * h * w) as f64;
        let mean = x.sum_per_channel().mul_scalar(1.0 / count);
        let centered = x.sub(&mean.broadcast_channel(b, h, w));
        let var = centered
            .mul(&centered)
            .sum_per_channel()
            .mul_scalar(1.0 / count);
        let denom = var.add_scalar(self.eps).sqrt();
        let xhat = centered.div(&denom.broadcast_channel(b, h, w));

        for ci in 0..c {
            self.running_mean[ci] =
                (1.0 - self.momentum) * self.running_mean[ci] + self.momentum * mean.data()[ci];
            self.running_var[ci] =
                (1.0 - self.momentum) * self.running_var[ci] + self.momentum * var.data()[ci];
        }
        self.affine(&xhat)
    }

    pub fn forward_eval(&self, x: &Tensor) -> Tensor {
        let (b, c, h, w) = x.dims4("batchnorm");
        let mean = Tensor::constant(&[c], self.running_mean.clone());
        let denom: Vec<f64> = self
            .running_var
            .iter()
            .map(|&v| math::sqrt(v + self.eps))
            .collect();
        let denom = Tensor::constant(&[c], denom);
        let xhat = x
            .sub(&mean.broadcast_channel(b, h, w))
            .div(&denom.broadcast_channel(b, h, w));
        self.affine(&xhat)
    }
}

impl ParamOwner for BatchNorm2d {
    fn visit_params(&mut self, prefix: &str, v: &mut dyn ParamVisitor) {
        v.visit(&join(prefix, "gamma"), &mut self.gamma);
        v.visit(&join(prefix, "beta"), &mut self.beta);
    }

    fn visit_buffers(&mut self, prefix: &str, v: &mut dyn BufferVisitor) {
        v.visit(&join(prefix, "running_mean"), &mut self.running_mean);
        v.visit(&join(prefix, "running_var"), &mut self.running_var);
    }
}

// ---- LSTM ----

/// Single-direction LSTM cell; gate order in the fused matrices is
/// [input, forget, cell, output].
pub struct LstmCell {
    pub wx: Tensor,
    pub wh: Tensor,
    pub b: Tensor,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(input: usize, hidden: usize, rng: &mut Rng) -> Self {
        let std = math::sqrt(1.0 / (input + hidden) as f64);
        LstmCell {
            wx: gaussian_param(&[input, 4 * hidden], std, rng),
            wh: gaussian_param(&[hidden, 4 * hidden], std, rng),
            b: Tensor::param(&[4 * hidden], vec![0.0; 4 * hidden]),
            hidden,
        }
    }

    pub fn step(&self, x: &Tensor, h: &Tensor, c: &Tensor) -> (Tensor, Tensor) {
        let (bsz, _) = x.dims2("lstm step");
        let gates = x
            .matmul(&self.wx)
            .add(&h.matmul(&self.wh))
            .add(&self.b.broadcast_rows(bsz));
        let hd = self.hidden;
        let i = gates.slice_axis(1, 0, hd).sigmoid();
        let f = gates.slice_axis(1, hd, hd).sigmoid();
        let g = gates.slice_axis(1, 2 * hd, hd).tanh();
        let o = gates.slice_axis(1, 3 * hd, hd).sigmoid();
        let c_next = f.mul(c).add(&i.mul(&g));
        let h_next = o.mul(&c_next.tanh());
        (h_next, c_next)
    }

    pub fn run(&self, seq: &[Tensor]) -> Vec<Tensor> {
        let bsz = seq[0].shape()[0];
        let mut h = Tensor::zeros(&[bsz, self.hidden]);
        let mut c = Tensor::zeros(&[bsz, self.hidden]);
        let mut out = Vec::with_capacity(seq.len());
        for x in seq {
            let (h2, c2) = self.step(x, &h, &c);
            h = h2;
            c = c2;
            out.push(h.clone());
        }
        out
    }
}

impl ParamOwner for LstmCell {
    fn visit_params(&mut self, prefix: &str, v: &mut dyn ParamVisitor) {
        v.visit(&join(prefix, "wx"), &mut self.wx);
        v.visit(&join(prefix, "wh"), &mut self.wh);
        v.visit(&join(prefix, "b"), &mut self.b);
    }
}

/// Bidirectional LSTM layer: forward and reversed passes concatenated per
/// time step, [b, 2*hidden].
pub struct BiLstm {
    pub fw: LstmCell,
    pub bw: LstmCell,
}

impl BiLstm {
    pub fn new(input: usize, hidden: usize, rng: &mut Rng) -> Self {
        BiLstm {
            fw: LstmCell::new(input, hidden, rng),
            bw: LstmCell::new(input, hidden, rng),
        }
    }

    pub fn forward(&self, seq: &[Tensor]) -> Vec<Tensor> {
        let fw_out = self.fw.run(seq);
        let rev: Vec<Tensor> = seq.iter().rev().cloned().collect();
        let mut bw_out = self.bw.run(&rev);
        bw_out.reverse();
        fw_out
            .iter()
            .zip(&bw_out)
            .map(|(f, b)| Tensor::concat(1, &[f.clone(), b.clone()]))
            .collect()
    }
}

impl ParamOwner for BiLstm {
    fn visit_params(&mut self, prefix: &str, v: &mut dyn ParamVisitor) {
        self.fw.visit_params(&join(prefix, "fw"), v);
        self.bw.visit_params(&join(prefix, "bw"), v);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad, max_rel_err, numeric_gradient};

    #[test]
    fn conv_layer_shapes() {
        let mut rng = Rng::new(1);
        let conv = Conv2d::new(1, 4, 4, 2, 1, &mut rng);
        let x = Tensor::constant(&[2, 1, 8, 16], vec![0.5; 2 * 8 * 16]);
        let y = conv.forward(&x);
        assert_eq!(y.shape(), &[2, 4, 4, 8]);
    }

    #[test]
    fn deconv_inverts_conv_spatial_size() {
        let mut rng = Rng::new(2);
        let deconv = Deconv2d::new(4, 2, 4, 2, 1, &mut rng);
        let x = Tensor::constant(&[1, 4, 4, 8], vec![0.1; 4 * 4 * 8]);
        let y = deconv.forward(&x);
        assert_eq!(y.shape(), &[1, 2, 8, 16]);
    }

    #[test]
    fn dense_matches_manual() {
        let mut rng = Rng::new(3);
        let d = Dense::new(3, 2, &mut rng);
        let x = Tensor::constant(&[1, 3], vec![1.0, 2.0, 3.0]);
        let y = d.forward(&x);
        let w = d.w.data();
        let want = w[0] + 2.0 * w[2] + 3.0 * w[4] + d.b.data()[0];
        assert!((y.data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn batchnorm_train_normalizes() {
        let mut rng = Rng::new(4);
        let mut bn = BatchNorm2d::new(2);
        let x = Tensor::constant(&[4, 2, 3, 3], rng.normal_vec(4 * 2 * 9));
        let y = bn.forward_train(&x);
        let (b, c, h, w) = y.dims4("t");
        for ci in 0..c {
            let mut vals = Vec::new();
            for bi in 0..b {
                let base = (bi * c + ci) * h * w;
                vals.extend_from_slice(&y.data()[base..base + h * w]);
            }
            let m: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            let v: f64 = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-10);
            assert!((v - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn batchnorm_eval_is_deterministic() {
        let mut rng = Rng::new(5);
        let bn = BatchNorm2d::new(3);
        let x = Tensor::constant(&[2, 3, 2, 2], rng.normal_vec(2 * 3 * 4));
        let y1 = bn.forward_eval(&x);
        let y2 = bn.forward_eval(&x);
        assert_eq!(y1.data(), y2.data());
    }

    #[test]
    fn lstm_gradients_match_fd() {
        let mut rng = Rng::new(6);
        let cell = LstmCell::new(3, 2, &mut rng);
        let x0 = rng.normal_vec(2 * 3);

        let f = |v: &[f64]| {
            let x = Tensor::param(&[2, 3], v.to_vec());
            let seq = vec![x.clone(), x.mul_scalar(0.5)];
            let out = cell.run(&seq);
            let y = out[1].mul(&out[1]).sum_all();
            (y, x)
        };
        let (y, x) = f(&x0);
        let analytic = grad(&y, &[&x]).remove(0);
        let numeric = numeric_gradient(|v| f(v).0.scalar_value(), &x0, 1e-6);
        let err = max_rel_err(analytic.data(), &numeric);
        assert!(err < 1e-7, "lstm rel err {err}");
    }

    #[test]
    fn bilstm_output_width_and_reversal_asymmetry() {
        let mut rng = Rng::new(7);
        let bi = BiLstm::new(3, 4, &mut rng);
        let seq: Vec<Tensor> = (0..5)
            .map(|_| Tensor::constant(&[2, 3], rng.normal_vec(6)))
            .collect();
        let out = bi.forward(&seq);
        assert_eq!(out.len(), 5);
        assert_eq!(out[0].shape(), &[2, 8]);

        let rev: Vec<Tensor> = seq.iter().rev().cloned().collect();
        let out_rev = bi.forward(&rev);
        let diff: f64 = out[0]
            .data()
            .iter()
            .zip(out_rev[0].data())
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(
            diff > 1e-6,
            "reversing the sequence must change the outputs"
        );
    }

    #[test]
    fn param_visitor_names_are_stable() {
        let mut rng = Rng::new(8);
        let mut bi = BiLstm::new(2, 2, &mut rng);
        let names: Vec<String> = bi.named_params().into_iter().map(|(n, _)| n).collect();
        assert_eq!(
            names,
            vec!["fw.wx", "fw.wh", "fw.b", "bw.wx", "bw.wh", "bw.b"]
        );
    }
}
