//! Network layers: convolution, pooling, ReLU, dropout, dense, softmax, and
//! the assembled two-conv classifier.
//!
//! Convolutions are cross-correlations (no kernel flip), valid padding,
//! stride 1. The assembled network is
//!
//! ```text
//! [1,s,s] -> conv1 -> ReLU -> conv2 -> ReLU -> maxpool 2x2
//!         -> flatten -> dropout -> dense1 -> ReLU -> dropout -> dense2
//!         -> softmax
//! ```
//!
//! Each layer ships a forward and a backward routine; the batched
//! `network_forward`/`network_backward` pair fuses them with im2col GEMMs
//! for throughput while computing exactly the same values as the layer-wise
//! routines.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// Hyperparameters fixing every tensor extent in the network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    /// Input side length s; inputs are `[1, s, s]`.
    pub input: usize,
    /// Kernel count of the first convolution.
    pub conv1: usize,
    /// Kernel count of the second convolution.
    pub conv2: usize,
    /// Width of the hidden dense layer.
    pub hidden: usize,
    /// Output classes.
    pub classes: usize,
    /// Dropout rate applied to the flattened pool output.
    pub drop_flat: f64,
    /// Dropout rate applied to the hidden activations.
    pub drop_hidden: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            input: 50,
            conv1: 32,
            conv2: 64,
            hidden: 128,
            classes: 3,
            drop_flat: 0.25,
            drop_hidden: 0.5,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input < 6 {
            return Err(Error::Dimension(format!(
                "input side {} too small for two 3x3 convolutions and a 2x2 pool",
                self.input
            )));
        }
        if (self.input - 4) % 2 != 0 {
            return Err(Error::Dimension(format!(
                "input side {} leaves an odd {}x{} map before the 2x2 pool",
                self.input,
                self.input - 4,
                self.input - 4
            )));
        }
        if self.conv1 == 0 || self.conv2 == 0 || self.hidden == 0 || self.classes == 0 {
            return Err(Error::Dimension("layer widths must be positive".into()));
        }
        for (name, rate) in [("drop_flat", self.drop_flat), ("drop_hidden", self.drop_hidden)] {
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::Parameter(format!(
                    "{name} rate {rate} outside [0, 1)"
                )));
            }
        }
        Ok(())
    }

    /// Side of the first convolution's output map.
    pub fn conv1_side(&self) -> usize {
        self.input - 2
    }

    /// Side of the second convolution's output map.
    pub fn conv2_side(&self) -> usize {
        self.input - 4
    }

    /// Side of the pooled map.
    pub fn pool_side(&self) -> usize {
        (self.input - 4) / 2
    }

    /// Flattened feature count entering the first dense layer.
    pub fn flat_len(&self) -> usize {
        self.conv2 * self.pool_side() * self.pool_side()
    }

    /// Total trainable parameter count.
    pub fn param_count(&self) -> usize {
        self.conv1 * 9
            + self.conv1
            + self.conv2 * self.conv1 * 9
            + self.conv2
            + self.flat_len() * self.hidden
            + self.hidden
            + self.hidden * self.classes
            + self.classes
    }
}

/// All trainable tensors, in checkpoint order.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub conv1_k: Tensor,
    pub conv1_b: Tensor,
    pub conv2_k: Tensor,
    pub conv2_b: Tensor,
    pub dense1_w: Tensor,
    pub dense1_b: Tensor,
    pub dense2_w: Tensor,
    pub dense2_b: Tensor,
}

impl NetworkParams {
    /// He-uniform initialization: weights from U(-L, L) with
    /// L = sqrt(6 / fan_in), biases zero. Draw order is fixed: each tensor in
    /// checkpoint order, elements row-major.
    pub fn init(cfg: &NetworkConfig, rng: &mut ChaCha8Rng) -> Result<NetworkParams> {
        cfg.validate()?;
        let mut he = |dims: &[usize], fan_in: usize| -> Result<Tensor> {
            let limit = (6.0 / fan_in as f64).sqrt();
            let len: usize = dims.iter().product();
            let data: Vec<f64> = (0..len).map(|_| rng.gen_range(-limit..limit)).collect();
            Tensor::from_vec(dims, data)
        };
        let conv1_k = he(&[cfg.conv1, 1, 3, 3], 9)?;
        let conv1_b = Tensor::zeros(&[cfg.conv1])?;
        let conv2_k = he(&[cfg.conv2, cfg.conv1, 3, 3], cfg.conv1 * 9)?;
        let conv2_b = Tensor::zeros(&[cfg.conv2])?;
        let flat = cfg.flat_len();
        let dense1_w = he(&[flat, cfg.hidden], flat)?;
        let dense1_b = Tensor::zeros(&[cfg.hidden])?;
        let dense2_w = he(&[cfg.hidden, cfg.classes], cfg.hidden)?;
        let dense2_b = Tensor::zeros(&[cfg.classes])?;
        Ok(NetworkParams {
            conv1_k,
            conv1_b,
            conv2_k,
            conv2_b,
            dense1_w,
            dense1_b,
            dense2_w,
            dense2_b,
        })
    }

    /// Tensors in checkpoint order.
    pub fn tensors(&self) -> [&Tensor; 8] {
        [
            &self.conv1_k,
            &self.conv1_b,
            &self.conv2_k,
            &self.conv2_b,
            &self.dense1_w,
            &self.dense1_b,
            &self.dense2_w,
            &self.dense2_b,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 8] {
        [
            &mut self.conv1_k,
            &mut self.conv1_b,
            &mut self.conv2_k,
            &mut self.conv2_b,
            &mut self.dense1_w,
            &mut self.dense1_b,
            &mut self.dense2_w,
            &mut self.dense2_b,
        ]
    }

    /// Rebuilds parameters from tensors in checkpoint order, rejecting
    /// incoherent shapes.
    pub fn from_tensors(mut tensors: Vec<Tensor>) -> Result<NetworkParams> {
        if tensors.len() != 8 {
            return Err(Error::Dimension(format!(
                "{} parameter tensors, expected 8",
                tensors.len()
            )));
        }
        let dense2_b = tensors.pop().unwrap();
        let dense2_w = tensors.pop().unwrap();
        let dense1_b = tensors.pop().unwrap();
        let dense1_w = tensors.pop().unwrap();
        let conv2_b = tensors.pop().unwrap();
        let conv2_k = tensors.pop().unwrap();
        let conv1_b = tensors.pop().unwrap();
        let conv1_k = tensors.pop().unwrap();
        let params = NetworkParams {
            conv1_k,
            conv1_b,
            conv2_k,
            conv2_b,
            dense1_w,
            dense1_b,
            dense2_w,
            dense2_b,
        };
        params.config()?;
        Ok(params)
    }

    /// The architecture these tensors realize. Dropout rates come back zero:
    /// they are a training-time setting, not a property of the weights.
    pub fn config(&self) -> Result<NetworkConfig> {
        let kd1 = self.conv1_k.dims();
        if self.conv1_k.rank() != 4 || kd1[1] != 1 || kd1[2] != 3 || kd1[3] != 3 {
            return Err(Error::Dimension(format!(
                "conv1 kernels {kd1:?}, expected [c1, 1, 3, 3]"
            )));
        }
        let c1 = kd1[0];
        let kd2 = self.conv2_k.dims();
        if self.conv2_k.rank() != 4 || kd2[1] != c1 || kd2[2] != 3 || kd2[3] != 3 {
            return Err(Error::Dimension(format!(
                "conv2 kernels {kd2:?}, expected [c2, {c1}, 3, 3]"
            )));
        }
        let c2 = kd2[0];
        if self.conv1_b.dims() != [c1] || self.conv2_b.dims() != [c2] {
            return Err(Error::Dimension(
                "convolution bias lengths do not match kernel counts".into(),
            ));
        }
        if self.dense1_w.rank() != 2 {
            return Err(Error::Dimension(format!(
                "dense1 weights rank {}, expected 2",
                self.dense1_w.rank()
            )));
        }
        let flat = self.dense1_w.dims()[0];
        let hidden = self.dense1_w.dims()[1];
        // flat = c2 * p², p the pooled side, so the input side is 2p + 4
        let pooled_sq = if flat % c2 == 0 { flat / c2 } else { 0 };
        let p = (pooled_sq as f64).sqrt().round() as usize;
        if pooled_sq == 0 || p * p != pooled_sq {
            return Err(Error::Dimension(format!(
                "dense1 input width {flat} is not {c2} x (pooled side)^2"
            )));
        }
        if self.dense1_b.dims() != [hidden] {
            return Err(Error::Dimension(
                "dense1 bias length does not match its width".into(),
            ));
        }
        if self.dense2_w.rank() != 2 || self.dense2_w.dims()[0] != hidden {
            return Err(Error::Dimension(format!(
                "dense2 weights {:?}, expected [{hidden}, classes]",
                self.dense2_w.dims()
            )));
        }
        let classes = self.dense2_w.dims()[1];
        if self.dense2_b.dims() != [classes] {
            return Err(Error::Dimension(
                "dense2 bias length does not match the class count".into(),
            ));
        }
        let cfg = NetworkConfig {
            input: 2 * p + 4,
            conv1: c1,
            conv2: c2,
            hidden,
            classes,
            drop_flat: 0.0,
            drop_hidden: 0.0,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Loss gradients, one tensor per parameter tensor, same shapes and order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub conv1_k: Tensor,
    pub conv1_b: Tensor,
    pub conv2_k: Tensor,
    pub conv2_b: Tensor,
    pub dense1_w: Tensor,
    pub dense1_b: Tensor,
    pub dense2_w: Tensor,
    pub dense2_b: Tensor,
}

impl Gradients {
    pub fn zeros(cfg: &NetworkConfig) -> Result<Gradients> {
        let flat = cfg.flat_len();
        Ok(Gradients {
            conv1_k: Tensor::zeros(&[cfg.conv1, 1, 3, 3])?,
            conv1_b: Tensor::zeros(&[cfg.conv1])?,
            conv2_k: Tensor::zeros(&[cfg.conv2, cfg.conv1, 3, 3])?,
            conv2_b: Tensor::zeros(&[cfg.conv2])?,
            dense1_w: Tensor::zeros(&[flat, cfg.hidden])?,
            dense1_b: Tensor::zeros(&[cfg.hidden])?,
            dense2_w: Tensor::zeros(&[cfg.hidden, cfg.classes])?,
            dense2_b: Tensor::zeros(&[cfg.classes])?,
        })
    }

    pub fn tensors(&self) -> [&Tensor; 8] {
        [
            &self.conv1_k,
            &self.conv1_b,
            &self.conv2_k,
            &self.conv2_b,
            &self.dense1_w,
            &self.dense1_b,
            &self.dense2_w,
            &self.dense2_b,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 8] {
        [
            &mut self.conv1_k,
            &mut self.conv1_b,
            &mut self.conv2_k,
            &mut self.conv2_b,
            &mut self.dense1_w,
            &mut self.dense1_b,
            &mut self.dense2_w,
            &mut self.dense2_b,
        ]
    }
}

// ---------------------------------------------------------------------------
// Individual layer operations (reference-grade, tensor in / tensor out).
// ---------------------------------------------------------------------------

/// Elementwise max(0, x).
pub fn relu_forward(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// dx = dy where x > 0, else 0.
pub fn relu_backward(x: &Tensor, dy: &Tensor) -> Result<Tensor> {
    if x.shape() != dy.shape() {
        return Err(Error::Dimension(format!(
            "relu_backward: shape {:?} vs {:?}",
            x.dims(),
            dy.dims()
        )));
    }
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&xv, &gv)| if xv > 0.0 { gv } else { 0.0 })
        .collect();
    Tensor::from_vec(x.dims(), data)
}

/// Shared validation: input `[C,H,W]` against kernels `[O,C,kh,kw]`.
/// Returns `(c, h, w, o, kh, kw)`.
fn conv_dims_nobias(input: &Tensor, kernels: &Tensor) -> Result<(usize, usize, usize, usize, usize, usize)> {
    if input.rank() != 3 || kernels.rank() != 4 {
        return Err(Error::Dimension(format!(
            "conv2d: input rank {} (need 3), kernels rank {} (need 4)",
            input.rank(),
            kernels.rank()
        )));
    }
    let (c, h, w) = (input.dims()[0], input.dims()[1], input.dims()[2]);
    let (o, kc, kh, kw) = (
        kernels.dims()[0],
        kernels.dims()[1],
        kernels.dims()[2],
        kernels.dims()[3],
    );
    if kc != c {
        return Err(Error::Dimension(format!(
            "conv2d: input has {c} channels, kernels expect {kc}"
        )));
    }
    if h < kh || w < kw {
        return Err(Error::Dimension(format!(
            "conv2d: input {h}x{w} smaller than kernel {kh}x{kw}"
        )));
    }
    Ok((c, h, w, o, kh, kw))
}

fn conv_dims(
    input: &Tensor,
    kernels: &Tensor,
    bias: &Tensor,
) -> Result<(usize, usize, usize, usize, usize, usize)> {
    let dims = conv_dims_nobias(input, kernels)?;
    if bias.dims() != [dims.3] {
        return Err(Error::Dimension(format!(
            "conv2d: bias {:?} for {} output channels",
            bias.dims(),
            dims.3
        )));
    }
    Ok(dims)
}

/// Valid cross-correlation, stride 1: input `[C,H,W]`, kernels `[O,C,kh,kw]`,
/// bias `[O]` -> `[O, H-kh+1, W-kw+1]`.
pub fn conv2d_forward(input: &Tensor, kernels: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (c, h, w, o, kh, kw) = conv_dims(input, kernels, bias)?;
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let mut col = Vec::new();
    im2col(input.data(), c, h, w, kh, kw, &mut col);
    let mut out = vec![0.0; o * oh * ow];
    gemm::gemm_nn_st(
        o,
        c * kh * kw,
        oh * ow,
        kernels.data(),
        c * kh * kw,
        &col,
        oh * ow,
        &mut out,
        oh * ow,
        false,
    );
    for (ch, &b) in out.chunks_mut(oh * ow).zip(bias.data()) {
        for v in ch {
            *v += b;
        }
    }
    Tensor::from_vec(&[o, oh, ow], out)
}

/// Gradients of a valid cross-correlation. `dout` is `[O, H-kh+1, W-kw+1]`;
/// returns `(dinput, dkernels, dbias)`.
pub fn conv2d_backward(
    input: &Tensor,
    kernels: &Tensor,
    dout: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (c, h, w, o, kh, kw) = conv_dims_nobias(input, kernels)?;
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    if dout.dims() != [o, oh, ow] {
        return Err(Error::Dimension(format!(
            "conv2d_backward: dout {:?}, expected [{o}, {oh}, {ow}]",
            dout.dims()
        )));
    }
    let k = c * kh * kw;
    let p = oh * ow;

    // dbias: sum of each output channel
    let dbias: Vec<f64> = dout.data().chunks(p).map(|ch| ch.iter().sum()).collect();

    // dkernels = dout · col^T
    let mut col = Vec::new();
    im2col(input.data(), c, h, w, kh, kw, &mut col);
    let mut dk = vec![0.0; o * k];
    gemm::gemm_nt_st(o, p, k, dout.data(), p, &col, p, &mut dk, k, false);

    // dinput = scatter of kernels^T · dout
    let mut kt = vec![0.0; o * k];
    gemm::transpose_into(kernels.data(), o, k, &mut kt);
    let mut dcol = vec![0.0; k * p];
    gemm::gemm_nn_st(k, o, p, &kt, o, dout.data(), p, &mut dcol, p, false);
    let mut dinput = vec![0.0; c * h * w];
    col2im_add(&dcol, c, h, w, kh, kw, &mut dinput);

    Ok((
        Tensor::from_vec(&[c, h, w], dinput)?,
        Tensor::from_vec(&[o, c, kh, kw], dk)?,
        Tensor::from_vec(&[o], dbias)?,
    ))
}

/// 2x2 max pooling, stride 2, on `[C,H,W]` with even H and W. Returns the
/// pooled map and, per output cell, the window slot (0..4, row-major) of the
/// chosen maximum; ties pick the earliest slot.
pub fn maxpool2x2_forward(x: &Tensor) -> Result<(Tensor, Vec<u8>)> {
    if x.rank() != 3 {
        return Err(Error::Dimension(format!(
            "maxpool2x2 needs [C,H,W], got rank {}",
            x.rank()
        )));
    }
    let (c, h, w) = (x.dims()[0], x.dims()[1], x.dims()[2]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Dimension(format!(
            "maxpool2x2 needs even extents, got {h}x{w}"
        )));
    }
    let (ph, pw) = (h / 2, w / 2);
    let mut out = vec![0.0; c * ph * pw];
    let mut pos = vec![0u8; c * ph * pw];
    pool_channels(x.data(), c, h, w, &mut out, &mut pos);
    Ok((Tensor::from_vec(&[c, ph, pw], out)?, pos))
}

/// Routes `dy` back to the chosen window slots; zeros elsewhere.
pub fn maxpool2x2_backward(dy: &Tensor, positions: &[u8], in_dims: &[usize]) -> Result<Tensor> {
    if in_dims.len() != 3 {
        return Err(Error::Dimension(format!(
            "maxpool2x2_backward: in_dims {in_dims:?}, expected [C,H,W]"
        )));
    }
    let (c, h, w) = (in_dims[0], in_dims[1], in_dims[2]);
    let (ph, pw) = (h / 2, w / 2);
    if dy.dims() != [c, ph, pw] || positions.len() != c * ph * pw {
        return Err(Error::Dimension(format!(
            "maxpool2x2_backward: dy {:?} / {} positions, expected [{c}, {ph}, {pw}]",
            dy.dims(),
            positions.len()
        )));
    }
    let mut dx = vec![0.0; c * h * w];
    for ch in 0..c {
        for py in 0..ph {
            for px in 0..pw {
                let i = (ch * ph + py) * pw + px;
                let slot = positions[i] as usize;
                let (sy, sx) = (slot / 2, slot % 2);
                dx[(ch * h + 2 * py + sy) * w + 2 * px + sx] = dy.data()[i];
            }
        }
    }
    Tensor::from_vec(in_dims, dx)
}

/// Inverted dropout. In training, each element is kept with probability
/// `1 - rate` and scaled by `1/(1 - rate)`, else zeroed; in eval the input
/// passes through untouched and no random numbers are drawn. The returned
/// mask records the factor applied to each element — `1/(1 - rate)` or 0 in
/// training, all ones in eval — so the backward pass is a plain product.
pub fn dropout_forward(
    x: &Tensor,
    rate: f64,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, Tensor)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Parameter(format!("dropout rate {rate} outside [0, 1)")));
    }
    if !training {
        let ones = Tensor::new(x.dims(), 1.0)?;
        return Ok((x.clone(), ones));
    }
    let scale = 1.0 / (1.0 - rate);
    let mut keep = vec![0u8; x.len()];
    fill_dropout_mask(&mut keep, rate, rng);
    let factors: Vec<f64> = keep.iter().map(|&m| f64::from(m) * scale).collect();
    let data = x.data().iter().zip(&factors).map(|(&v, &f)| v * f).collect();
    let mask = Tensor::from_vec(x.dims(), factors)?;
    Ok((Tensor::from_vec(x.dims(), data)?, mask))
}

/// dx = dy * mask, where mask holds the factors recorded by the forward pass.
pub fn dropout_backward(dy: &Tensor, mask: &Tensor) -> Result<Tensor> {
    if dy.shape() != mask.shape() {
        return Err(Error::Dimension(format!(
            "dropout_backward: dy {:?} vs mask {:?}",
            dy.dims(),
            mask.dims()
        )));
    }
    let data = dy
        .data()
        .iter()
        .zip(mask.data())
        .map(|(&g, &f)| g * f)
        .collect();
    Tensor::from_vec(dy.dims(), data)
}

/// Keep decision per element: draw a u32 and keep when it falls below
/// `(1 - rate) * 2^32`. One draw per element, row-major.
fn fill_dropout_mask(mask: &mut [u8], rate: f64, rng: &mut ChaCha8Rng) {
    use rand::RngCore;
    let keep = 1.0 - rate;
    let threshold = (keep * 4_294_967_296.0) as u64; // 2^32; rate 0 => all kept
    for m in mask.iter_mut() {
        *m = u8::from((rng.next_u32() as u64) < threshold);
    }
}

/// Affine map on a batch: `x [n,F] · w [F,H] + b [H] -> [n,H]`.
pub fn dense_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    if x.rank() != 2 || w.rank() != 2 || b.rank() != 1 {
        return Err(Error::Dimension(
            "dense_forward: expected x [n,F], w [F,H], b [H]".into(),
        ));
    }
    let (n, f) = (x.dims()[0], x.dims()[1]);
    let (wf, hdim) = (w.dims()[0], w.dims()[1]);
    if f != wf || b.dims()[0] != hdim {
        return Err(Error::Dimension(format!(
            "dense_forward: x [{n},{f}], w [{wf},{hdim}], b [{}]",
            b.dims()[0]
        )));
    }
    let mut out = vec![0.0; n * hdim];
    gemm::gemm_nn_par(n, f, hdim, x.data(), f, w.data(), hdim, &mut out, hdim, false);
    for row in out.chunks_mut(hdim) {
        for (v, &bv) in row.iter_mut().zip(b.data()) {
            *v += bv;
        }
    }
    Tensor::from_vec(&[n, hdim], out)
}

/// Gradients of [`dense_forward`]: returns `(dx, dw, db)`.
pub fn dense_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, f) = (x.dims()[0], x.dims()[1]);
    let (wf, hdim) = (w.dims()[0], w.dims()[1]);
    if f != wf || dy.dims() != [n, hdim] {
        return Err(Error::Dimension(format!(
            "dense_backward: x [{n},{f}], w [{wf},{hdim}], dy {:?}",
            dy.dims()
        )));
    }
    // dx = dy · w^T  (w rows are contiguous along H, so use the nt kernel)
    let mut dx = vec![0.0; n * f];
    gemm::gemm_nt_st(n, hdim, f, dy.data(), hdim, w.data(), hdim, &mut dx, f, false);
    // dw = x^T · dy, computed as (dy^T · x)^T to keep GEMM operands row-major
    let mut dyt = vec![0.0; n * hdim];
    gemm::transpose_into(dy.data(), n, hdim, &mut dyt);
    let mut g = vec![0.0; hdim * f];
    gemm::gemm_nn_st(hdim, n, f, &dyt, n, x.data(), f, &mut g, f, false);
    let mut dw = vec![0.0; f * hdim];
    gemm::transpose_into(&g, hdim, f, &mut dw);
    // db = column sums of dy
    let mut db = vec![0.0; hdim];
    for row in dy.data().chunks(hdim) {
        for (d, &v) in db.iter_mut().zip(row) {
            *d += v;
        }
    }
    Ok((
        Tensor::from_vec(&[n, f], dx)?,
        Tensor::from_vec(&[f, hdim], dw)?,
        Tensor::from_vec(&[hdim], db)?,
    ))
}

/// Row-wise softmax with max subtraction; each output row sums to 1.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    if logits.rank() != 2 {
        return Err(Error::Dimension(format!(
            "softmax needs [n,K], got rank {}",
            logits.rank()
        )));
    }
    let k = logits.dims()[1];
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks(k) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
        let sum: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|&e| e / sum));
    }
    Tensor::from_vec(logits.dims(), out)
}

// ---------------------------------------------------------------------------
// Assembled network, batched.
// ---------------------------------------------------------------------------

/// Activations and masks recorded by a training-mode forward pass, exactly
/// what the backward pass needs.
pub struct ForwardCache {
    /// Input batch `[n, 1, s, s]`.
    pub input: Tensor,
    /// conv1 output after ReLU, `[n, c1, s-2, s-2]` flattened.
    pub conv1_act: Vec<f64>,
    /// Chosen window slot per pooled cell, `[n, flat]`.
    pub pool_pos: Vec<u8>,
    /// Flattened pool output after dropout, `[n, flat]`.
    pub flat: Vec<f64>,
    /// Dropout keep mask on the flat features, `[n, flat]`.
    pub drop_flat: Vec<u8>,
    /// dense1 pre-activation, `[n, hidden]`.
    pub dense1_pre: Vec<f64>,
    /// Hidden activations after ReLU and dropout, `[n, hidden]`.
    pub hidden: Vec<f64>,
    /// Dropout keep mask on the hidden activations, `[n, hidden]`.
    pub drop_hidden: Vec<u8>,
    /// Whether dropout was active (decides backward scaling).
    pub training: bool,
    pub batch: usize,
}

/// Per-worker scratch for the per-image convolution passes.
struct ImageScratch {
    act2: Vec<f64>,
}

impl ImageScratch {
    fn new(cfg: &NetworkConfig) -> ImageScratch {
        let a2 = cfg.conv2_side();
        ImageScratch { act2: vec![0.0; cfg.conv2 * a2 * a2] }
    }
}

/// Full forward pass over a batch `[n, 1, s, s]`. In training mode dropout
/// masks are drawn from `rng` (flat mask first, then hidden mask, row-major);
/// pass `None` for eval, which draws nothing.
///
/// Returns class probabilities `[n, classes]` and the cache for
/// [`network_backward`].
pub fn network_forward(
    params: &NetworkParams,
    cfg: &NetworkConfig,
    input: Tensor,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(Tensor, ForwardCache)> {
    cfg.validate()?;
    if input.rank() != 4 || input.dims()[1] != 1 || input.dims()[2] != cfg.input || input.dims()[3] != cfg.input
    {
        return Err(Error::Dimension(format!(
            "network input {:?}, expected [n, 1, {}, {}]",
            input.dims(),
            cfg.input,
            cfg.input
        )));
    }
    let n = input.dims()[0];
    let s = cfg.input;
    let a1 = cfg.conv1_side();
    let flat_len = cfg.flat_len();
    let act1_len = cfg.conv1 * a1 * a1;

    let mut conv1_act = vec![0.0; n * act1_len];
    let mut pool_pos = vec![0u8; n * flat_len];
    let mut flat = vec![0.0; n * flat_len];

    // Convolutional trunk, one image per task; buffers are disjoint chunks.
    conv1_act
        .par_chunks_mut(act1_len)
        .zip(pool_pos.par_chunks_mut(flat_len))
        .zip(flat.par_chunks_mut(flat_len))
        .zip(input.data().par_chunks(s * s))
        .for_each_init(
            || ImageScratch::new(cfg),
            |sc, (((act1, pos), fl), img)| {
                forward_image(params, cfg, img, sc, act1, pos, fl);
            },
        );

    // Dropout on the flat features (in place), then the dense head.
    let training = rng.is_some();
    let mut drop_flat = vec![1u8; n * flat_len];
    let mut drop_hidden = vec![1u8; n * cfg.hidden];
    if let Some(rng) = rng {
        if cfg.drop_flat > 0.0 {
            fill_dropout_mask(&mut drop_flat, cfg.drop_flat, rng);
            let scale = 1.0 / (1.0 - cfg.drop_flat);
            for (v, &m) in flat.iter_mut().zip(&drop_flat) {
                *v = if m == 1 { *v * scale } else { 0.0 };
            }
        }
        if cfg.drop_hidden > 0.0 {
            fill_dropout_mask(&mut drop_hidden, cfg.drop_hidden, rng);
        }
    }

    let mut dense1_pre = vec![0.0; n * cfg.hidden];
    gemm::gemm_nn_par(
        n,
        flat_len,
        cfg.hidden,
        &flat,
        flat_len,
        params.dense1_w.data(),
        cfg.hidden,
        &mut dense1_pre,
        cfg.hidden,
        false,
    );
    for row in dense1_pre.chunks_mut(cfg.hidden) {
        for (v, &b) in row.iter_mut().zip(params.dense1_b.data()) {
            *v += b;
        }
    }

    let hid_scale = if training && cfg.drop_hidden > 0.0 {
        1.0 / (1.0 - cfg.drop_hidden)
    } else {
        1.0
    };
    let hidden: Vec<f64> = dense1_pre
        .iter()
        .zip(&drop_hidden)
        .map(|(&v, &m)| if m == 1 { v.max(0.0) * hid_scale } else { 0.0 })
        .collect();

    let mut logits = vec![0.0; n * cfg.classes];
    gemm::gemm_nn_st(
        n,
        cfg.hidden,
        cfg.classes,
        &hidden,
        cfg.hidden,
        params.dense2_w.data(),
        cfg.classes,
        &mut logits,
        cfg.classes,
        false,
    );
    for row in logits.chunks_mut(cfg.classes) {
        for (v, &b) in row.iter_mut().zip(params.dense2_b.data()) {
            *v += b;
        }
    }

    let probs = softmax(&Tensor::from_vec(&[n, cfg.classes], logits)?)?;
    let cache = ForwardCache {
        input,
        conv1_act,
        pool_pos,
        flat,
        drop_flat,
        dense1_pre,
        hidden,
        drop_hidden,
        training,
        batch: n,
    };
    Ok((probs, cache))
}

/// Backward pass matching [`network_forward`]: gradients of the mean
/// cross-entropy over the batch. `probs` is the softmax output from the
/// forward pass; `labels[i]` is the true class of row i. Because softmax and
/// cross-entropy fuse, the logit gradient is `(probs - onehot) / n` and no
/// probability ever needs differentiating on its own.
///
/// Per-image convolution gradients are computed in parallel but reduced in
/// batch order, so the result does not depend on thread count.
pub fn network_backward(
    params: &NetworkParams,
    cfg: &NetworkConfig,
    cache: &ForwardCache,
    probs: &Tensor,
    labels: &[usize],
) -> Result<Gradients> {
    let n = cache.batch;
    if probs.dims() != [n, cfg.classes] {
        return Err(Error::Dimension(format!(
            "network_backward: probs {:?}, expected [{n}, {}]",
            probs.dims(),
            cfg.classes
        )));
    }
    if labels.len() != n {
        return Err(Error::Dimension(format!(
            "network_backward: {} labels for a batch of {n}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= cfg.classes) {
        return Err(Error::Parameter(format!(
            "network_backward: label {bad} outside 0..{}",
            cfg.classes
        )));
    }
    let mut dlogits = probs.clone();
    {
        let d = dlogits.data_mut();
        let inv = 1.0 / n as f64;
        for (i, &label) in labels.iter().enumerate() {
            let row = &mut d[i * cfg.classes..(i + 1) * cfg.classes];
            row[label] -= 1.0;
            for v in row.iter_mut() {
                *v *= inv;
            }
        }
    }
    let dlogits = &dlogits;
    let s = cfg.input;
    let a1 = cfg.conv1_side();
    let flat_len = cfg.flat_len();
    let act1_len = cfg.conv1 * a1 * a1;
    let hdim = cfg.hidden;
    let kcls = cfg.classes;
    let mut grads = Gradients::zeros(cfg)?;

    // dense2: dW = hiddenᵀ · dy, db = column sums
    {
        gemm::gemm_tn_st(
            hdim,
            n,
            kcls,
            &cache.hidden,
            hdim,
            dlogits.data(),
            kcls,
            grads.dense2_w.data_mut(),
            kcls,
            false,
        );
        let db = grads.dense2_b.data_mut();
        for row in dlogits.data().chunks(kcls) {
            for (d, &v) in db.iter_mut().zip(row) {
                *d += v;
            }
        }
    }

    // into the hidden layer: dropout, then ReLU gate on the pre-activation
    let mut dh = vec![0.0; n * hdim];
    gemm::gemm_nt_st(
        n,
        kcls,
        hdim,
        dlogits.data(),
        kcls,
        params.dense2_w.data(),
        kcls,
        &mut dh,
        hdim,
        false,
    );
    let hid_scale = if cache.training && cfg.drop_hidden > 0.0 {
        1.0 / (1.0 - cfg.drop_hidden)
    } else {
        1.0
    };
    for ((g, &m), &pre) in dh.iter_mut().zip(&cache.drop_hidden).zip(&cache.dense1_pre) {
        *g = if m == 1 && pre > 0.0 { *g * hid_scale } else { 0.0 };
    }

    // dense1: dW = flatᵀ · dh, db = column sums, dflat^T = W1 · dh^T
    let mut dht = vec![0.0; n * hdim];
    gemm::transpose_into(&dh, n, hdim, &mut dht);
    {
        gemm::gemm_tn_par(
            flat_len,
            n,
            hdim,
            &cache.flat,
            flat_len,
            &dh,
            hdim,
            grads.dense1_w.data_mut(),
            hdim,
            false,
        );
        let db = grads.dense1_b.data_mut();
        for row in dh.chunks(hdim) {
            for (d, &v) in db.iter_mut().zip(row) {
                *d += v;
            }
        }
    }
    let mut dflat_t = vec![0.0; flat_len * n];
    gemm::gemm_nn_par(
        flat_len,
        hdim,
        n,
        params.dense1_w.data(),
        hdim,
        &dht,
        n,
        &mut dflat_t,
        n,
        false,
    );
    let mut dflat = vec![0.0; n * flat_len];
    gemm::transpose_into(&dflat_t, flat_len, n, &mut dflat);
    drop(dflat_t);

    // back through the flat dropout
    let flat_scale = if cache.training && cfg.drop_flat > 0.0 {
        1.0 / (1.0 - cfg.drop_flat)
    } else {
        1.0
    };
    for (g, &m) in dflat.iter_mut().zip(&cache.drop_flat) {
        *g = if m == 1 { *g * flat_scale } else { 0.0 };
    }

    // Convolutional trunk: images are processed in fixed-size chunks, each
    // chunk accumulating one partial in batch order. The chunk grain never
    // depends on thread count, so the reduction order — chunk partials
    // combined low to high — is schedule-independent.
    const CHUNK: usize = 15;
    let partials: Vec<ConvPartial> = (0..n)
        .step_by(CHUNK)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map_init(
            || BackScratch::new(cfg),
            |sc, start| {
                let mut part = ConvPartial::zeros(cfg);
                for i in start..(start + CHUNK).min(n) {
                    backward_image(
                        cfg,
                        params.conv2_k.data(),
                        &cache.input.data()[i * s * s..][..s * s],
                        &cache.conv1_act[i * act1_len..][..act1_len],
                        &cache.pool_pos[i * flat_len..][..flat_len],
                        &cache.flat[i * flat_len..][..flat_len],
                        &dflat[i * flat_len..][..flat_len],
                        sc,
                        &mut part,
                    );
                }
                part
            },
        )
        .collect();
    let mut dk2t = vec![0.0; cfg.conv1 * 9 * cfg.conv2];
    for part in &partials {
        add_assign(&mut dk2t, &part.dk2t);
        add_assign(grads.conv2_b.data_mut(), &part.db2);
        add_assign(grads.conv1_k.data_mut(), &part.dk1);
        add_assign(grads.conv1_b.data_mut(), &part.db1);
    }
    gemm::transpose_into(&dk2t, cfg.conv1 * 9, cfg.conv2, grads.conv2_k.data_mut());
    Ok(grads)
}

/// Kernel/bias gradient sums for one chunk of images. `dk2t` is the conv2
/// kernel gradient stored transposed, `[conv1·9 × conv2]`, as the GEMM
/// produces it; it is flipped once after all partials are combined.
struct ConvPartial {
    dk2t: Vec<f64>,
    db2: Vec<f64>,
    dk1: Vec<f64>,
    db1: Vec<f64>,
}

impl ConvPartial {
    fn zeros(cfg: &NetworkConfig) -> ConvPartial {
        ConvPartial {
            dk2t: vec![0.0; cfg.conv1 * 9 * cfg.conv2],
            db2: vec![0.0; cfg.conv2],
            dk1: vec![0.0; cfg.conv1 * 9],
            db1: vec![0.0; cfg.conv1],
        }
    }
}

struct BackScratch {
    col1: Vec<f64>,
    dy2t: Vec<f64>,
    dact1: Vec<f64>,
}

impl BackScratch {
    fn new(cfg: &NetworkConfig) -> BackScratch {
        let a1 = cfg.conv1_side();
        let a2 = cfg.conv2_side();
        BackScratch {
            col1: vec![0.0; 9 * a1 * a1],
            dy2t: vec![0.0; a2 * a2 * cfg.conv2],
            dact1: vec![0.0; cfg.conv1 * a1 * a1],
        }
    }
}

fn add_assign(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Convolutional trunk for a single image: conv1+ReLU into `act1`, conv2 and
/// ReLU via scratch, pool into `flat`/`pos` (flat is pre-dropout here).
/// Patch matrices are packed straight out of the pixel buffers; bias and
/// ReLU ride along in the GEMM epilogue.
fn forward_image(
    params: &NetworkParams,
    cfg: &NetworkConfig,
    img: &[f64],
    sc: &mut ImageScratch,
    act1: &mut [f64],
    pos: &mut [u8],
    flat: &mut [f64],
) {
    let s = cfg.input;
    let a1 = cfg.conv1_side();
    let a2 = cfg.conv2_side();
    gemm::gemm_conv_fwd(
        params.conv1_k.data(),
        params.conv1_b.data(),
        gemm::PatchSrc { src: img, chans: 1, h: s, w: s, kh: 3, kw: 3 },
        act1,
    );
    gemm::gemm_conv_fwd(
        params.conv2_k.data(),
        params.conv2_b.data(),
        gemm::PatchSrc { src: act1, chans: cfg.conv1, h: a1, w: a1, kh: 3, kw: 3 },
        &mut sc.act2,
    );
    pool_channels(&sc.act2, cfg.conv2, a2, a2, flat, pos);
}

/// Adds one image's convolution gradients onto `part`. The conv2 output
/// gradient is kept transposed (`[a2² × conv2]`): that layout is what both
/// the weight-gradient GEMM and the fused data-gradient GEMM consume, so the
/// dense `[conv2 × a2²]` map never exists.
#[allow(clippy::too_many_arguments)]
fn backward_image(
    cfg: &NetworkConfig,
    k2: &[f64],
    img: &[f64],
    act1: &[f64],
    pos: &[u8],
    flat_stored: &[f64],
    dflat: &[f64],
    sc: &mut BackScratch,
    part: &mut ConvPartial,
) {
    let s = cfg.input;
    let a1 = cfg.conv1_side();
    let a2 = cfg.conv2_side();
    let p = cfg.pool_side();
    let co = cfg.conv2;

    // un-pool into the transposed conv2 map; the stored flat value is
    // positive exactly when the chosen pre-activation was, so it doubles as
    // the ReLU gate. Bias gradients fall out of the same walk.
    sc.dy2t.fill(0.0);
    for o in 0..co {
        let mut bsum = 0.0;
        for py in 0..p {
            for px in 0..p {
                let i = (o * p + py) * p + px;
                if flat_stored[i] > 0.0 {
                    let slot = pos[i] as usize;
                    let (sy, sx) = (slot / 2, slot % 2);
                    let g = dflat[i];
                    sc.dy2t[((2 * py + sy) * a2 + 2 * px + sx) * co + o] = g;
                    bsum += g;
                }
            }
        }
        part.db2[o] += bsum;
    }

    // conv2 kernel gradient (transposed), patches packed from act1
    let patches = gemm::PatchSrc { src: act1, chans: cfg.conv1, h: a1, w: a1, kh: 3, kw: 3 };
    gemm::gemm_conv_dw_t(patches, &sc.dy2t, co, &mut part.dk2t, true);

    // into conv1: dy2t · K2 scatter-added onto the activation layout, then
    // gated by conv1's ReLU
    sc.dact1.fill(0.0);
    gemm::gemm_conv_ddata(&sc.dy2t, k2, co, cfg.conv1, a1, a1, 3, 3, &mut sc.dact1);
    for (g, &a) in sc.dact1.iter_mut().zip(act1) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }

    // conv1 gradients
    im2col(img, 1, s, s, 3, 3, &mut sc.col1);
    gemm::gemm_nt_st(cfg.conv1, a1 * a1, 9, &sc.dact1, a1 * a1, &sc.col1, a1 * a1, &mut part.dk1, 9, true);
    for (d, ch) in part.db1.iter_mut().zip(sc.dact1.chunks(a1 * a1)) {
        *d += ch.iter().sum::<f64>();
    }
}

/// Patch matrix for a valid correlation: row `(c·kh+dy)·kw+dx`, column
/// `y·ow+x` holds `src[c][y+dy][x+dx]`.
pub(crate) fn im2col(
    src: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    dst: &mut Vec<f64>,
) {
    let oh = h - kh + 1;
    let ow = w - kw + 1;
    dst.resize(c * kh * kw * oh * ow, 0.0);
    let mut row = 0;
    for ch in 0..c {
        for dy in 0..kh {
            for dx in 0..kw {
                let dst_row = &mut dst[row * oh * ow..][..oh * ow];
                for y in 0..oh {
                    let src_off = (ch * h + y + dy) * w + dx;
                    dst_row[y * ow..][..ow].copy_from_slice(&src[src_off..][..ow]);
                }
                row += 1;
            }
        }
    }
}

/// Transpose of [`im2col`] as a scatter-add: accumulates patch-matrix
/// gradients back onto the source layout.
pub(crate) fn col2im_add(
    col: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    dst: &mut [f64],
) {
    let oh = h - kh + 1;
    let ow = w - kw + 1;
    let mut row = 0;
    for ch in 0..c {
        for dy in 0..kh {
            for dx in 0..kw {
                let src_row = &col[row * oh * ow..][..oh * ow];
                for y in 0..oh {
                    let dst_off = (ch * h + y + dy) * w + dx;
                    for (d, &v) in dst[dst_off..][..ow].iter_mut().zip(&src_row[y * ow..][..ow]) {
                        *d += v;
                    }
                }
                row += 1;
            }
        }
    }
}

/// 2x2/stride-2 max over each channel; `out`/`pos` are `[c, h/2, w/2]` flat.
fn pool_channels(src: &[f64], c: usize, h: usize, w: usize, out: &mut [f64], pos: &mut [u8]) {
    let (ph, pw) = (h / 2, w / 2);
    for ch in 0..c {
        for py in 0..ph {
            let r0 = &src[(ch * h + 2 * py) * w..][..w];
            let r1 = &src[(ch * h + 2 * py + 1) * w..][..w];
            let orow = (ch * ph + py) * pw;
            for px in 0..pw {
                let cand = [r0[2 * px], r0[2 * px + 1], r1[2 * px], r1[2 * px + 1]];
                let mut best = 0usize;
                for (i, &v) in cand.iter().enumerate().skip(1) {
                    if v > cand[best] {
                        best = i;
                    }
                }
                out[orow + px] = cand[best];
                pos[orow + px] = best as u8;
            }
        }
    }
}
