//! Minimal dense differentiable core: matrices, SiLU, batch normalization,
//! small MLPs with hand-derived reverse-mode gradients, and the Adam update.
//!
//! Networks in this crate are tiny (hidden widths of a few hundred at most),
//! so everything is plain `f64` with structured per-module tapes rather than a
//! general graph compiler.

use crate::error::{FraglinkError, Result};
use crate::rng::SeedStream;

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    /// Build from row-major data; validates the length and entry finiteness.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(FraglinkError::ShapeMismatch(format!(
                "matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(FraglinkError::ShapeMismatch("non-finite matrix entry".into()));
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// `self * other`.
    pub fn matmul(&self, other: &DenseMatrix) -> DenseMatrix {
        assert_eq!(self.cols, other.rows, "matmul inner dims");
        let mut out = DenseMatrix::zeros(self.rows, other.cols);
        let oc = other.cols;
        for i in 0..self.rows {
            let a_row = self.row(i);
            let out_row = &mut out.data[i * oc..(i + 1) * oc];
            for (k, &aik) in a_row.iter().enumerate() {
                if aik == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * oc..(k + 1) * oc];
                for j in 0..oc {
                    out_row[j] += aik * b_row[j];
                }
            }
        }
        out
    }

    /// `self * other^T`.
    pub fn matmul_transpose_b(&self, other: &DenseMatrix) -> DenseMatrix {
        assert_eq!(self.cols, other.cols, "matmul_transpose_b inner dims");
        let mut out = DenseMatrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a_row = self.row(i);
            for k in 0..other.rows {
                let b_row = other.row(k);
                let mut acc = 0.0;
                for j in 0..self.cols {
                    acc += a_row[j] * b_row[j];
                }
                out.set(i, k, acc);
            }
        }
        out
    }

    /// `self^T * other`.
    pub fn matmul_transpose_a(&self, other: &DenseMatrix) -> DenseMatrix {
        assert_eq!(self.rows, other.rows, "matmul_transpose_a inner dims");
        let mut out = DenseMatrix::zeros(self.cols, other.cols);
        let oc = other.cols;
        for i in 0..self.rows {
            let a_row = self.row(i);
            let b_row = other.row(i);
            for (k, &aik) in a_row.iter().enumerate() {
                if aik == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[k * oc..(k + 1) * oc];
                for j in 0..oc {
                    out_row[j] += aik * b_row[j];
                }
            }
        }
        out
    }
}

/// `x * sigmoid(x)`.
pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// Derivative of [`silu`]: `sigmoid(x) * (1 + x * (1 - sigmoid(x)))`.
pub fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    None,
    Silu,
}

/// Forward/backward mode: train uses batch statistics in normalization layers
/// and updates their running estimates; eval uses the stored running values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch normalization over the row (node) axis.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub epsilon: f64,
}

impl BatchNorm {
    pub fn new(dim: usize) -> Self {
        BatchNorm {
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
            momentum: 0.1,
            epsilon: 1e-5,
        }
    }
}

/// One fully-connected layer: affine, then optional batch norm, then activation.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `in_dim x out_dim`; applied as `y = x W + b`.
    pub weight: DenseMatrix,
    pub bias: Vec<f64>,
    pub norm: Option<BatchNorm>,
    pub activation: Activation,
}

impl DenseLayer {
    /// Uniform `±sqrt(1/fan_in)` weights, zero bias.
    pub fn init(
        in_dim: usize,
        out_dim: usize,
        with_norm: bool,
        activation: Activation,
        stream: &mut SeedStream,
    ) -> Self {
        let bound = (1.0 / in_dim as f64).sqrt();
        let data: Vec<f64> =
            (0..in_dim * out_dim).map(|_| stream.uniform_range(-bound, bound)).collect();
        DenseLayer {
            weight: DenseMatrix::from_vec(in_dim, out_dim, data).expect("finite init"),
            bias: vec![0.0; out_dim],
            norm: if with_norm { Some(BatchNorm::new(out_dim)) } else { None },
            activation,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn zero_weights(&mut self) {
        self.weight.data_mut().fill(0.0);
        self.bias.fill(0.0);
    }
}

/// An ordered stack of [`DenseLayer`]s.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<DenseLayer>,
}

impl MlpParams {
    pub fn in_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.in_dim())
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim())
    }
}

#[derive(Debug, Clone)]
struct BnTape {
    x_hat: DenseMatrix,
    inv_std: Vec<f64>,
    mode: Mode,
}

#[derive(Debug, Clone)]
struct LayerTape {
    /// Input to the affine map.
    x: DenseMatrix,
    bn: Option<BnTape>,
    /// Input to the activation (post-norm pre-activation values).
    pre_act: DenseMatrix,
}

/// Recorded primal values of one MLP forward pass, consumed by [`mlp_backward`].
#[derive(Debug, Clone)]
pub struct GradientTape {
    layers: Vec<LayerTape>,
    out_shape: (usize, usize),
}

/// Gradients mirroring [`MlpParams`].
#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub layers: Vec<LayerGrads>,
}

#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub d_weight: DenseMatrix,
    pub d_bias: Vec<f64>,
    pub d_gamma: Option<Vec<f64>>,
    pub d_beta: Option<Vec<f64>>,
}

impl MlpGrads {
    pub fn zeros_like(params: &MlpParams) -> Self {
        MlpGrads {
            layers: params
                .layers
                .iter()
                .map(|l| LayerGrads {
                    d_weight: DenseMatrix::zeros(l.in_dim(), l.out_dim()),
                    d_bias: vec![0.0; l.out_dim()],
                    d_gamma: l.norm.as_ref().map(|n| vec![0.0; n.gamma.len()]),
                    d_beta: l.norm.as_ref().map(|n| vec![0.0; n.beta.len()]),
                })
                .collect(),
        }
    }

    pub fn accumulate(&mut self, other: &MlpGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.d_weight.data_mut().iter_mut().zip(b.d_weight.data()) {
                *x += y;
            }
            for (x, y) in a.d_bias.iter_mut().zip(&b.d_bias) {
                *x += y;
            }
            if let (Some(g), Some(h)) = (a.d_gamma.as_mut(), b.d_gamma.as_ref()) {
                for (x, y) in g.iter_mut().zip(h) {
                    *x += y;
                }
            }
            if let (Some(g), Some(h)) = (a.d_beta.as_mut(), b.d_beta.as_ref()) {
                for (x, y) in g.iter_mut().zip(h) {
                    *x += y;
                }
            }
        }
    }
}

/// Run the MLP. In train mode, normalization layers use batch statistics and
/// update their running estimates in place; in eval mode they read the stored
/// running values and nothing is mutated.
pub fn mlp_forward(
    params: &mut MlpParams,
    x: &DenseMatrix,
    mode: Mode,
) -> Result<(DenseMatrix, GradientTape)> {
    let mut cur = x.clone();
    let mut tapes = Vec::with_capacity(params.layers.len());
    for layer in &mut params.layers {
        if cur.cols() != layer.in_dim() {
            return Err(FraglinkError::ShapeMismatch(format!(
                "mlp_forward: input width {} does not match layer input {}",
                cur.cols(),
                layer.in_dim()
            )));
        }
        let mut affine = cur.matmul(&layer.weight);
        for i in 0..affine.rows() {
            let row = affine.row_mut(i);
            for (v, b) in row.iter_mut().zip(&layer.bias) {
                *v += b;
            }
        }

        let bn_tape = if let Some(norm) = layer.norm.as_mut() {
            let n = affine.rows();
            let d = affine.cols();
            let (mut x_hat, mut inv_std) = (DenseMatrix::zeros(n, d), vec![0.0; d]);
            match mode {
                Mode::Train => {
                    let mut mean = vec![0.0; d];
                    let mut var = vec![0.0; d];
                    for i in 0..n {
                        for (j, v) in affine.row(i).iter().enumerate() {
                            mean[j] += v;
                        }
                    }
                    for m in &mut mean {
                        *m /= n as f64;
                    }
                    for i in 0..n {
                        for (j, v) in affine.row(i).iter().enumerate() {
                            let c = v - mean[j];
                            var[j] += c * c;
                        }
                    }
                    for v in &mut var {
                        *v /= n as f64;
                    }
                    for j in 0..d {
                        inv_std[j] = 1.0 / (var[j] + norm.epsilon).sqrt();
                    }
                    for i in 0..n {
                        for j in 0..d {
                            x_hat.set(i, j, (affine.at(i, j) - mean[j]) * inv_std[j]);
                        }
                    }
                    let unbias = if n > 1 { n as f64 / (n as f64 - 1.0) } else { 1.0 };
                    for j in 0..d {
                        norm.running_mean[j] =
                            (1.0 - norm.momentum) * norm.running_mean[j] + norm.momentum * mean[j];
                        norm.running_var[j] = (1.0 - norm.momentum) * norm.running_var[j]
                            + norm.momentum * var[j] * unbias;
                    }
                }
                Mode::Eval => {
                    for j in 0..d {
                        inv_std[j] = 1.0 / (norm.running_var[j] + norm.epsilon).sqrt();
                    }
                    for i in 0..n {
                        for j in 0..d {
                            x_hat.set(i, j, (affine.at(i, j) - norm.running_mean[j]) * inv_std[j]);
                        }
                    }
                }
            }
            let mut scaled = DenseMatrix::zeros(n, d);
            for i in 0..n {
                for j in 0..d {
                    scaled.set(i, j, norm.gamma[j] * x_hat.at(i, j) + norm.beta[j]);
                }
            }
            let tape = BnTape { x_hat, inv_std, mode };
            affine = scaled;
            Some(tape)
        } else {
            None
        };

        let pre_act = affine.clone();
        let activated = match layer.activation {
            Activation::None => affine,
            Activation::Silu => {
                let mut out = affine;
                for v in out.data_mut() {
                    *v = silu(*v);
                }
                out
            }
        };
        tapes.push(LayerTape { x: cur, bn: bn_tape, pre_act });
        cur = activated;
    }
    let out_shape = (cur.rows(), cur.cols());
    Ok((cur, GradientTape { layers: tapes, out_shape }))
}

/// Eval-mode forward without a tape; never mutates parameters. Used on the
/// sampling path where no gradients are needed.
pub fn mlp_infer(params: &MlpParams, x: &DenseMatrix) -> Result<DenseMatrix> {
    let mut cur = x.clone();
    for layer in &params.layers {
        if cur.cols() != layer.in_dim() {
            return Err(FraglinkError::ShapeMismatch(format!(
                "mlp_infer: input width {} does not match layer input {}",
                cur.cols(),
                layer.in_dim()
            )));
        }
        let mut affine = cur.matmul(&layer.weight);
        for i in 0..affine.rows() {
            let row = affine.row_mut(i);
            for (v, b) in row.iter_mut().zip(&layer.bias) {
                *v += b;
            }
        }
        if let Some(norm) = &layer.norm {
            for i in 0..affine.rows() {
                let row = affine.row_mut(i);
                for (j, v) in row.iter_mut().enumerate() {
                    let inv_std = 1.0 / (norm.running_var[j] + norm.epsilon).sqrt();
                    *v = norm.gamma[j] * (*v - norm.running_mean[j]) * inv_std + norm.beta[j];
                }
            }
        }
        if layer.activation == Activation::Silu {
            for v in affine.data_mut() {
                *v = silu(*v);
            }
        }
        cur = affine;
    }
    Ok(cur)
}

/// Exact reverse-mode gradients of the recorded forward pass.
/// Returns the gradient with respect to the input and all parameter gradients.
pub fn mlp_backward(
    params: &MlpParams,
    tape: &GradientTape,
    d_y: &DenseMatrix,
) -> Result<(DenseMatrix, MlpGrads)> {
    if tape.layers.len() != params.layers.len() {
        return Err(FraglinkError::TapeMismatch(format!(
            "tape has {} layers, params have {}",
            tape.layers.len(),
            params.layers.len()
        )));
    }
    if (d_y.rows(), d_y.cols()) != tape.out_shape {
        return Err(FraglinkError::TapeMismatch(format!(
            "upstream gradient is {}x{}, forward output was {}x{}",
            d_y.rows(),
            d_y.cols(),
            tape.out_shape.0,
            tape.out_shape.1
        )));
    }
    let mut grads = MlpGrads::zeros_like(params);
    let mut upstream = d_y.clone();
    for (idx, layer) in params.layers.iter().enumerate().rev() {
        let lt = &tape.layers[idx];
        let n = upstream.rows();
        let d = upstream.cols();

        // Activation.
        let mut d_pre = upstream;
        if layer.activation == Activation::Silu {
            for i in 0..n {
                for j in 0..d {
                    let g = silu_grad(lt.pre_act.at(i, j));
                    d_pre.set(i, j, d_pre.at(i, j) * g);
                }
            }
        }

        // Batch norm.
        let d_affine = if let Some(norm) = &layer.norm {
            let bt = lt.bn.as_ref().ok_or_else(|| {
                FraglinkError::TapeMismatch("norm layer missing batch-norm tape".into())
            })?;
            let lg = &mut grads.layers[idx];
            let d_gamma = lg.d_gamma.as_mut().expect("norm grads allocated");
            let d_beta = lg.d_beta.as_mut().expect("norm grads allocated");
            let mut d_xhat = DenseMatrix::zeros(n, d);
            for i in 0..n {
                for j in 0..d {
                    let dy = d_pre.at(i, j);
                    d_beta[j] += dy;
                    d_gamma[j] += dy * bt.x_hat.at(i, j);
                    d_xhat.set(i, j, dy * norm.gamma[j]);
                }
            }
            match bt.mode {
                Mode::Eval => {
                    let mut d_a = DenseMatrix::zeros(n, d);
                    for i in 0..n {
                        for j in 0..d {
                            d_a.set(i, j, d_xhat.at(i, j) * bt.inv_std[j]);
                        }
                    }
                    d_a
                }
                Mode::Train => {
                    let mut sum_dxhat = vec![0.0; d];
                    let mut sum_dxhat_xhat = vec![0.0; d];
                    for i in 0..n {
                        for j in 0..d {
                            sum_dxhat[j] += d_xhat.at(i, j);
                            sum_dxhat_xhat[j] += d_xhat.at(i, j) * bt.x_hat.at(i, j);
                        }
                    }
                    let nf = n as f64;
                    let mut d_a = DenseMatrix::zeros(n, d);
                    for i in 0..n {
                        for j in 0..d {
                            let v = (nf * d_xhat.at(i, j)
                                - sum_dxhat[j]
                                - bt.x_hat.at(i, j) * sum_dxhat_xhat[j])
                                * bt.inv_std[j]
                                / nf;
                            d_a.set(i, j, v);
                        }
                    }
                    d_a
                }
            }
        } else {
            d_pre
        };

        // Affine: y = x W + b.
        let lg = &mut grads.layers[idx];
        lg.d_weight = lt.x.matmul_transpose_a(&d_affine);
        for i in 0..n {
            for (j, v) in d_affine.row(i).iter().enumerate() {
                lg.d_bias[j] += v;
            }
        }
        upstream = d_affine.matmul_transpose_b(&layer.weight);
    }
    Ok((upstream, grads))
}

/// Flat parameter/gradient packing. The traversal order (per layer: weight,
/// bias, gamma, beta) defines the layout of optimizer state and must match
/// between [`MlpParams`] and [`MlpGrads`].
impl MlpParams {
    pub fn num_trainable(&self) -> usize {
        self.layers
            .iter()
            .map(|l| {
                l.weight.data().len()
                    + l.bias.len()
                    + l.norm.as_ref().map_or(0, |n| n.gamma.len() + n.beta.len())
            })
            .sum()
    }

    pub fn write_flat(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend_from_slice(l.weight.data());
            out.extend_from_slice(&l.bias);
            if let Some(n) = &l.norm {
                out.extend_from_slice(&n.gamma);
                out.extend_from_slice(&n.beta);
            }
        }
    }

    pub fn read_flat(&mut self, src: &[f64], pos: &mut usize) {
        let mut take = |dst: &mut [f64]| {
            dst.copy_from_slice(&src[*pos..*pos + dst.len()]);
            *pos += dst.len();
        };
        for l in &mut self.layers {
            take(l.weight.data_mut());
            take(&mut l.bias);
            if let Some(n) = &mut l.norm {
                take(&mut n.gamma);
                take(&mut n.beta);
            }
        }
    }
}

impl MlpGrads {
    pub fn write_flat(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend_from_slice(l.d_weight.data());
            out.extend_from_slice(&l.d_bias);
            if let Some(g) = &l.d_gamma {
                out.extend_from_slice(g);
            }
            if let Some(b) = &l.d_beta {
                out.extend_from_slice(b);
            }
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    step_count: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64, n_params: usize) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay,
            step_count: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len(), "optimizer state size");
        assert_eq!(params.len(), grads.len(), "gradient size");
        self.step_count += 1;
        let b1c = 1.0 - self.beta1.powi(self.step_count as i32);
        let b2c = 1.0 - self.beta2.powi(self.step_count as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let m_hat = self.m[i] / b1c;
            let v_hat = self.v[i] / b2c;
            params[i] -= self.lr * (m_hat / (v_hat.sqrt() + self.epsilon)
                + self.weight_decay * params[i]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stream() -> SeedStream {
        SeedStream::from_parts(99, 0)
    }

    fn fixed_matrix(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
        let mut s = SeedStream::from_parts(seed, 7);
        DenseMatrix::from_vec(rows, cols, (0..rows * cols).map(|_| s.normal()).collect()).unwrap()
    }

    #[test]
    fn silu_fixed_points() {
        assert_eq!(silu(0.0), 0.0);
        assert!((silu(20.0) - 20.0).abs() < 1e-6);
        assert!((silu(1.0) - 0.7310585786300049).abs() < 1e-15);
    }

    #[test]
    fn silu_grad_matches_central_differences() {
        let h = 1e-6;
        for &x in &[-3.0, -0.5, 0.0, 0.7, 1.0, 4.2] {
            let fd = (silu(x + h) - silu(x - h)) / (2.0 * h);
            assert!((silu_grad(x) - fd).abs() < 1e-8, "at x={x}");
        }
        assert!((silu_grad(1.0) - 0.9276705118714867).abs() < 1e-15);
    }

    #[test]
    fn single_layer_zero_weights_outputs_zero() {
        let mut params = MlpParams {
            layers: vec![DenseLayer {
                weight: DenseMatrix::zeros(3, 2),
                bias: vec![0.0; 2],
                norm: None,
                activation: Activation::None,
            }],
        };
        let x = fixed_matrix(4, 3, 1);
        let (y, _) = mlp_forward(&mut params, &x, Mode::Eval).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_layer_identity_passthrough() {
        let mut w = DenseMatrix::zeros(3, 3);
        for i in 0..3 {
            w.set(i, i, 1.0);
        }
        let mut params = MlpParams {
            layers: vec![DenseLayer {
                weight: w,
                bias: vec![0.0; 3],
                norm: None,
                activation: Activation::None,
            }],
        };
        let x = fixed_matrix(2, 3, 2);
        let (y, _) = mlp_forward(&mut params, &x, Mode::Eval).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                assert!((y.at(i, j) - x.at(i, j)).abs() < 1e-15);
            }
        }
    }

    /// Scalar-by-scalar oracle for a norm-free MLP.
    fn scalar_forward(params: &MlpParams, x: &DenseMatrix) -> DenseMatrix {
        let mut cur = x.clone();
        for layer in &params.layers {
            let mut next = DenseMatrix::zeros(cur.rows(), layer.out_dim());
            for i in 0..cur.rows() {
                for j in 0..layer.out_dim() {
                    let mut acc = layer.bias[j];
                    for k in 0..layer.in_dim() {
                        acc += cur.at(i, k) * layer.weight.at(k, j);
                    }
                    let v = match layer.activation {
                        Activation::None => acc,
                        Activation::Silu => acc / (1.0 + (-acc).exp()),
                    };
                    next.set(i, j, v);
                }
            }
            cur = next;
        }
        cur
    }

    #[test]
    fn two_layer_net_matches_scalar_oracle() {
        let mut s = stream();
        let mut params = MlpParams {
            layers: vec![
                DenseLayer::init(3, 5, false, Activation::Silu, &mut s),
                DenseLayer::init(5, 2, false, Activation::None, &mut s),
            ],
        };
        let x = fixed_matrix(2, 3, 3);
        let (y, _) = mlp_forward(&mut params, &x, Mode::Eval).unwrap();
        let oracle = scalar_forward(&params, &x);
        for i in 0..2 {
            for j in 0..2 {
                assert!((y.at(i, j) - oracle.at(i, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_zero_upstream_gives_zero_grads() {
        let mut s = stream();
        let mut params = MlpParams {
            layers: vec![DenseLayer::init(4, 3, true, Activation::Silu, &mut s)],
        };
        let x = fixed_matrix(5, 4, 4);
        let (y, tape) = mlp_forward(&mut params, &x, Mode::Train).unwrap();
        let d_y = DenseMatrix::zeros(y.rows(), y.cols());
        let (d_x, grads) = mlp_backward(&params, &tape, &d_y).unwrap();
        assert!(d_x.data().iter().all(|&v| v == 0.0));
        let mut flat = Vec::new();
        grads.write_flat(&mut flat);
        assert!(flat.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_layer_weight_gradient_is_outer_product() {
        // y = x W with zero bias and no activation: dL/dW = x^T dL/dy.
        let mut s = stream();
        let mut params = MlpParams {
            layers: vec![DenseLayer::init(3, 2, false, Activation::None, &mut s)],
        };
        let x = fixed_matrix(4, 3, 5);
        let (_, tape) = mlp_forward(&mut params, &x, Mode::Train).unwrap();
        let d_y = fixed_matrix(4, 2, 6);
        let (_, grads) = mlp_backward(&params, &tape, &d_y).unwrap();
        let expect = x.matmul_transpose_a(&d_y);
        for i in 0..3 {
            for j in 0..2 {
                assert!((grads.layers[0].d_weight.at(i, j) - expect.at(i, j)).abs() < 1e-12);
            }
        }
    }

    fn gradcheck_mlp(layers: Vec<DenseLayer>, rows: usize, draws: usize, seed: u64) {
        let mut s = SeedStream::from_parts(seed, 0);
        for _ in 0..draws {
            let mut params = MlpParams { layers: layers.clone() };
            // Randomize parameters.
            let n = params.num_trainable();
            let fresh: Vec<f64> = (0..n).map(|_| s.normal() * 0.5).collect();
            let mut pos = 0;
            params.read_flat(&fresh, &mut pos);
            let x = DenseMatrix::from_vec(
                rows,
                params.in_dim(),
                (0..rows * params.in_dim()).map(|_| s.normal()).collect(),
            )
            .unwrap();
            // Loss: sum of squares of outputs, so dL/dy = 2y.
            let loss = |p: &mut MlpParams| {
                let (y, _) = mlp_forward(p, &x, Mode::Train).unwrap();
                y.data().iter().map(|v| v * v).sum::<f64>()
            };
            let (y, tape) = mlp_forward(&mut params, &x, Mode::Train).unwrap();
            let mut d_y = y.clone();
            for v in d_y.data_mut() {
                *v *= 2.0;
            }
            let (_, grads) = mlp_backward(&params, &tape, &d_y).unwrap();
            let mut analytic = Vec::new();
            grads.write_flat(&mut analytic);
            let mut flat = Vec::new();
            params.write_flat(&mut flat);
            let h = 1e-5;
            for k in 0..flat.len() {
                let orig = flat[k];
                flat[k] = orig + h;
                let mut pos = 0;
                params.read_flat(&flat, &mut pos);
                let up = loss(&mut params);
                flat[k] = orig - h;
                let mut pos = 0;
                params.read_flat(&flat, &mut pos);
                let down = loss(&mut params);
                flat[k] = orig;
                let mut pos = 0;
                params.read_flat(&flat, &mut pos);
                let fd = (up - down) / (2.0 * h);
                let denom = analytic[k].abs().max(fd.abs()).max(1e-3);
                assert!(
                    (analytic[k] - fd).abs() / denom < 1e-4,
                    "param {k}: analytic {} vs fd {fd}",
                    analytic[k]
                );
            }
        }
    }

    #[test]
    fn gradcheck_plain_affine() {
        let mut s = stream();
        gradcheck_mlp(vec![DenseLayer::init(3, 4, false, Activation::None, &mut s)], 5, 50, 101);
    }

    #[test]
    fn gradcheck_silu_layer() {
        let mut s = stream();
        gradcheck_mlp(vec![DenseLayer::init(3, 4, false, Activation::Silu, &mut s)], 5, 50, 102);
    }

    #[test]
    fn gradcheck_batchnorm_layer() {
        let mut s = stream();
        gradcheck_mlp(vec![DenseLayer::init(3, 4, true, Activation::None, &mut s)], 6, 50, 103);
    }

    #[test]
    fn gradcheck_three_layer_stack() {
        let mut s = stream();
        gradcheck_mlp(
            vec![
                DenseLayer::init(3, 6, false, Activation::Silu, &mut s),
                DenseLayer::init(6, 6, true, Activation::Silu, &mut s),
                DenseLayer::init(6, 2, false, Activation::None, &mut s),
            ],
            4,
            10,
            104,
        );
    }

    #[test]
    fn batchnorm_train_standardizes_batch() {
        let mut s = stream();
        let mut params = MlpParams {
            layers: vec![DenseLayer::init(3, 4, true, Activation::None, &mut s)],
        };
        let x = fixed_matrix(64, 3, 8);
        let (y, _) = mlp_forward(&mut params, &x, Mode::Train).unwrap();
        // gamma = 1, beta = 0 at init, so the output is the standardized batch.
        for j in 0..4 {
            let mean: f64 = (0..64).map(|i| y.at(i, j)).sum::<f64>() / 64.0;
            let var: f64 = (0..64).map(|i| (y.at(i, j) - mean).powi(2)).sum::<f64>() / 64.0;
            assert!(mean.abs() < 1e-6, "feature {j} mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "feature {j} var {var}");
        }
    }

    #[test]
    fn eval_mode_is_row_wise_deterministic() {
        let mut s = stream();
        let params = MlpParams {
            layers: vec![
                DenseLayer::init(3, 5, true, Activation::Silu, &mut s),
                DenseLayer::init(5, 2, false, Activation::None, &mut s),
            ],
        };
        let big = fixed_matrix(6, 3, 9);
        let y_big = mlp_infer(&params, &big).unwrap();
        // The tape-recording eval path must agree with the inference path.
        let mut scratch = params.clone();
        let (y_fwd, _) = mlp_forward(&mut scratch, &big, Mode::Eval).unwrap();
        assert_eq!(y_big, y_fwd);
        for i in 0..6 {
            let single = DenseMatrix::from_vec(1, 3, big.row(i).to_vec()).unwrap();
            let y_one = mlp_infer(&params, &single).unwrap();
            for j in 0..2 {
                assert!((y_big.at(i, j) - y_one.at(0, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_rejects_mismatched_upstream() {
        let mut s = stream();
        let mut params = MlpParams {
            layers: vec![DenseLayer::init(3, 2, false, Activation::None, &mut s)],
        };
        let x = fixed_matrix(4, 3, 10);
        let (_, tape) = mlp_forward(&mut params, &x, Mode::Train).unwrap();
        let bad = DenseMatrix::zeros(4, 3);
        assert!(matches!(
            mlp_backward(&params, &tape, &bad),
            Err(FraglinkError::TapeMismatch(_))
        ));
    }

    #[test]
    fn adam_descends_quadratic() {
        let mut opt = Adam::new(0.05, 0.0, 2);
        let mut p = vec![3.0, -2.0];
        for _ in 0..500 {
            let g = vec![2.0 * p[0], 2.0 * p[1]];
            opt.step(&mut p, &g);
        }
        assert!(p[0].abs() < 1e-2 && p[1].abs() < 1e-2, "{p:?}");
    }
}
