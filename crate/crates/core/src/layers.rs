//! Sequential-model layers with explicit forward caches and backward passes.
//!
//! Every tensor passed through a layer carries the batch as its leading
//! dimension. Convolution tensors are laid out `[batch, channels, height, width]`.
//! Backward passes return parameter gradients *summed* over the batch; the
//! division by the batch size happens once, in the optimizer.

use serde::{Deserialize, Serialize};

use crate::tensor::{Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    #[serde(rename = "maxpool2d")]
    MaxPool2d { kernel: usize, stride: usize },
    Flatten,
    #[serde(rename = "fc")]
    FullyConnected { in_dim: usize, out_dim: usize },
    #[serde(rename = "relu")]
    ReLU,
    #[serde(rename = "softmax_ce")]
    SoftmaxCrossEntropy,
}

fn one() -> usize {
    1
}

impl LayerKind {
    pub fn has_params(&self) -> bool {
        matches!(
            self,
            LayerKind::Conv2d { .. } | LayerKind::FullyConnected { .. }
        )
    }

    pub fn is_conv(&self) -> bool {
        matches!(self, LayerKind::Conv2d { .. })
    }

    pub fn is_fc(&self) -> bool {
        matches!(self, LayerKind::FullyConnected { .. })
    }

    /// Shapes of the learnable tensors: weight first, then bias.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerKind::Conv2d {
                in_ch,
                out_ch,
                kernel,
                ..
            } => vec![vec![out_ch, in_ch, kernel, kernel], vec![out_ch]],
            LayerKind::FullyConnected { in_dim, out_dim } => {
                vec![vec![out_dim, in_dim], vec![out_dim]]
            }
            _ => Vec::new(),
        }
    }

    pub fn param_count(&self) -> u64 {
        self.param_shapes()
            .iter()
            .map(|s| s.iter().product::<usize>() as u64)
            .sum()
    }

    /// Number of inputs feeding each output unit; zero for parameterless layers.
    pub fn fan_in(&self) -> usize {
        match *self {
            LayerKind::Conv2d { in_ch, kernel, .. } => in_ch * kernel * kernel,
            LayerKind::FullyConnected { in_dim, .. } => in_dim,
            _ => 0,
        }
    }

    /// Per-sample output shape for a per-sample input shape (batch dim excluded).
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = |msg: String| Err(TensorError::InvalidLayer(msg));
        match *self {
            LayerKind::Conv2d {
                in_ch,
                out_ch,
                kernel,
                stride,
                padding,
            } => {
                if input.len() != 3 || input[0] != in_ch {
                    return bad(format!("conv2d expects [{in_ch}, h, w], got {input:?}"));
                }
                if kernel == 0 || stride == 0 {
                    return bad("conv2d kernel and stride must be positive".into());
                }
                let (h, w) = (input[1] + 2 * padding, input[2] + 2 * padding);
                if h < kernel || w < kernel {
                    return bad(format!("conv2d kernel {kernel} larger than padded input {input:?}"));
                }
                Ok(vec![out_ch, (h - kernel) / stride + 1, (w - kernel) / stride + 1])
            }
            LayerKind::MaxPool2d { kernel, stride } => {
                if input.len() != 3 {
                    return bad(format!("maxpool2d expects [c, h, w], got {input:?}"));
                }
                if kernel == 0 || stride == 0 || input[1] < kernel || input[2] < kernel {
                    return bad(format!("maxpool2d kernel {kernel} does not fit {input:?}"));
                }
                Ok(vec![
                    input[0],
                    (input[1] - kernel) / stride + 1,
                    (input[2] - kernel) / stride + 1,
                ])
            }
            LayerKind::Flatten => Ok(vec![input.iter().product()]),
            LayerKind::FullyConnected { in_dim, out_dim } => {
                if input != [in_dim] {
                    return bad(format!("fc expects [{in_dim}], got {input:?}"));
                }
                Ok(vec![out_dim])
            }
            LayerKind::ReLU => Ok(input.to_vec()),
            LayerKind::SoftmaxCrossEntropy => {
                if input.len() != 1 {
                    return bad(format!("softmax_ce expects [classes], got {input:?}"));
                }
                Ok(input.to_vec())
            }
        }
    }
}

/// Whatever a layer needs from its forward pass to run backward.
#[derive(Debug, Clone)]
pub enum LayerCache {
    Input(Tensor),
    Pool { argmax: Vec<usize>, in_shape: Vec<usize> },
    Flatten { in_shape: Vec<usize> },
    Softmax { probs: Tensor },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub kind: LayerKind,
    pub params: Vec<Tensor>,
}

impl Layer {
    /// A layer with zero-filled parameters.
    pub fn zeroed(kind: LayerKind) -> Self {
        let params = kind.param_shapes().iter().map(|s| Tensor::zeros(s)).collect();
        Self { kind, params }
    }

    pub fn with_params(kind: LayerKind, params: Vec<Tensor>) -> Result<Self> {
        let shapes = kind.param_shapes();
        if shapes.len() != params.len() {
            return Err(TensorError::InvalidLayer(format!(
                "{kind:?} takes {} parameter tensors, got {}",
                shapes.len(),
                params.len()
            )));
        }
        for (s, p) in shapes.iter().zip(&params) {
            p.expect_shape(s)?;
        }
        Ok(Self { kind, params })
    }

    pub fn forward(&self, input: &Tensor) -> Result<(Tensor, LayerCache)> {
        if input.shape().is_empty() {
            return Err(TensorError::InvalidLayer("input has no batch dimension".into()));
        }
        let per_sample = self.kind.output_shape(&input.shape()[1..])?;
        let n = input.batch();
        let mut out_shape = vec![n];
        out_shape.extend_from_slice(&per_sample);
        match self.kind {
            LayerKind::Conv2d { stride, padding, .. } => {
                let out = conv2d_forward(input, &self.params[0], &self.params[1], stride, padding, &out_shape);
                Ok((out, LayerCache::Input(input.clone())))
            }
            LayerKind::MaxPool2d { kernel, stride } => {
                let (out, argmax) = maxpool_forward(input, kernel, stride, &out_shape);
                Ok((
                    out,
                    LayerCache::Pool {
                        argmax,
                        in_shape: input.shape().to_vec(),
                    },
                ))
            }
            LayerKind::Flatten => Ok((
                Tensor::new(out_shape, input.data().to_vec())?,
                LayerCache::Flatten {
                    in_shape: input.shape().to_vec(),
                },
            )),
            LayerKind::FullyConnected { in_dim, out_dim } => {
                let w = self.params[0].data();
                let b = self.params[1].data();
                let x = input.data();
                let mut y = vec![0.0f32; n * out_dim];
                for s in 0..n {
                    let row = &x[s * in_dim..(s + 1) * in_dim];
                    for o in 0..out_dim {
                        let wr = &w[o * in_dim..(o + 1) * in_dim];
                        let mut acc = 0.0f32;
                        for i in 0..in_dim {
                            acc += row[i] * wr[i];
                        }
                        y[s * out_dim + o] = acc + b[o];
                    }
                }
                Ok((Tensor::new(out_shape, y)?, LayerCache::Input(input.clone())))
            }
            LayerKind::ReLU => {
                let y = input.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
                Ok((Tensor::new(out_shape, y)?, LayerCache::Input(input.clone())))
            }
            LayerKind::SoftmaxCrossEntropy => {
                let probs = softmax_rows(input);
                Ok((probs.clone(), LayerCache::Softmax { probs }))
            }
        }
    }

    /// Returns `(grad_in, param_grads)`; parameter gradients are batch sums.
    pub fn backward(&self, cache: &LayerCache, grad_out: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        match (self.kind, cache) {
            (LayerKind::Conv2d { stride, padding, .. }, LayerCache::Input(input)) => {
                let expected = self.forward_shape(input)?;
                grad_out.expect_shape(&expected)?;
                Ok(conv2d_backward(input, &self.params[0], grad_out, stride, padding))
            }
            (LayerKind::MaxPool2d { .. }, LayerCache::Pool { argmax, in_shape }) => {
                if grad_out.len() != argmax.len() {
                    return Err(TensorError::ShapeMismatch {
                        expected: vec![argmax.len()],
                        actual: grad_out.shape().to_vec(),
                    });
                }
                let mut gin = Tensor::zeros(in_shape);
                let gd = gin.data_mut();
                for (g, &idx) in grad_out.data().iter().zip(argmax) {
                    gd[idx] += g;
                }
                Ok((gin, Vec::new()))
            }
            (LayerKind::Flatten, LayerCache::Flatten { in_shape }) => {
                let flat = [in_shape[0], in_shape[1..].iter().product()];
                grad_out.expect_shape(&flat)?;
                Ok((Tensor::new(in_shape.clone(), grad_out.data().to_vec())?, Vec::new()))
            }
            (LayerKind::FullyConnected { in_dim, out_dim }, LayerCache::Input(input)) => {
                let n = input.batch();
                grad_out.expect_shape(&[n, out_dim])?;
                let w = self.params[0].data();
                let x = input.data();
                let g = grad_out.data();
                let mut gw = vec![0.0f32; out_dim * in_dim];
                let mut gb = vec![0.0f32; out_dim];
                let mut gx = vec![0.0f32; n * in_dim];
                for s in 0..n {
                    let xr = &x[s * in_dim..(s + 1) * in_dim];
                    let gr = &g[s * out_dim..(s + 1) * out_dim];
                    for o in 0..out_dim {
                        let go = gr[o];
                        gb[o] += go;
                        let gwr = &mut gw[o * in_dim..(o + 1) * in_dim];
                        for i in 0..in_dim {
                            gwr[i] += go * xr[i];
                        }
                    }
                    let gxr = &mut gx[s * in_dim..(s + 1) * in_dim];
                    for i in 0..in_dim {
                        let mut acc = 0.0f32;
                        for o in 0..out_dim {
                            acc += gr[o] * w[o * in_dim + i];
                        }
                        gxr[i] = acc;
                    }
                }
                Ok((
                    Tensor::new(input.shape().to_vec(), gx)?,
                    vec![
                        Tensor::new(vec![out_dim, in_dim], gw)?,
                        Tensor::new(vec![out_dim], gb)?,
                    ],
                ))
            }
            (LayerKind::ReLU, LayerCache::Input(input)) => {
                grad_out.expect_shape(input.shape())?;
                let g = input
                    .data()
                    .iter()
                    .zip(grad_out.data())
                    .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                    .collect();
                Ok((Tensor::new(input.shape().to_vec(), g)?, Vec::new()))
            }
            (LayerKind::SoftmaxCrossEntropy, LayerCache::Softmax { probs }) => {
                grad_out.expect_shape(probs.shape())?;
                let classes = probs.row_len();
                let p = probs.data();
                let g = grad_out.data();
                let mut gin = vec![0.0f32; p.len()];
                for s in 0..probs.batch() {
                    let r = s * classes..(s + 1) * classes;
                    let dot: f32 = p[r.clone()].iter().zip(&g[r.clone()]).map(|(a, b)| a * b).sum();
                    for j in r {
                        gin[j] = p[j] * (g[j] - dot);
                    }
                }
                Ok((Tensor::new(probs.shape().to_vec(), gin)?, Vec::new()))
            }
            (kind, _) => Err(TensorError::InvalidLayer(format!(
                "cache does not belong to a {kind:?} layer"
            ))),
        }
    }

    fn forward_shape(&self, input: &Tensor) -> Result<Vec<usize>> {
        let mut s = vec![input.batch()];
        s.extend(self.kind.output_shape(&input.shape()[1..])?);
        Ok(s)
    }
}

fn conv2d_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
    out_shape: &[usize],
) -> Tensor {
    let [n, c_in, h, w] = [input.shape()[0], input.shape()[1], input.shape()[2], input.shape()[3]];
    let [_, c_out, oh, ow] = [out_shape[0], out_shape[1], out_shape[2], out_shape[3]];
    let k = weight.shape()[2];
    let x = input.data();
    let wt = weight.data();
    let b = bias.data();
    let mut y = vec![0.0f32; n * c_out * oh * ow];
    for s in 0..n {
        for o in 0..c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0f32;
                    for c in 0..c_in {
                        for ky in 0..k {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += x[((s * c_in + c) * h + iy as usize) * w + ix as usize]
                                    * wt[((o * c_in + c) * k + ky) * k + kx];
                            }
                        }
                    }
                    y[((s * c_out + o) * oh + oy) * ow + ox] = acc + b[o];
                }
            }
        }
    }
    Tensor::new(out_shape.to_vec(), y).expect("conv output shape")
}

fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    padding: usize,
) -> (Tensor, Vec<Tensor>) {
    let [n, c_in, h, w] = [input.shape()[0], input.shape()[1], input.shape()[2], input.shape()[3]];
    let [_, c_out, oh, ow] = [
        grad_out.shape()[0],
        grad_out.shape()[1],
        grad_out.shape()[2],
        grad_out.shape()[3],
    ];
    let k = weight.shape()[2];
    let x = input.data();
    let wt = weight.data();
    let g = grad_out.data();
    let mut gx = vec![0.0f32; x.len()];
    let mut gw = vec![0.0f32; wt.len()];
    let mut gb = vec![0.0f32; c_out];
    for s in 0..n {
        for o in 0..c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let go = g[((s * c_out + o) * oh + oy) * ow + ox];
                    gb[o] += go;
                    for c in 0..c_in {
                        for ky in 0..k {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let xi = ((s * c_in + c) * h + iy as usize) * w + ix as usize;
                                let wi = ((o * c_in + c) * k + ky) * k + kx;
                                gw[wi] += go * x[xi];
                                gx[xi] += go * wt[wi];
                            }
                        }
                    }
                }
            }
        }
    }
    (
        Tensor::new(input.shape().to_vec(), gx).expect("conv grad_in shape"),
        vec![
            Tensor::new(weight.shape().to_vec(), gw).expect("conv grad_w shape"),
            Tensor::new(vec![c_out], gb).expect("conv grad_b shape"),
        ],
    )
}

fn maxpool_forward(input: &Tensor, kernel: usize, stride: usize, out_shape: &[usize]) -> (Tensor, Vec<usize>) {
    let [n, c, h, w] = [input.shape()[0], input.shape()[1], input.shape()[2], input.shape()[3]];
    let (oh, ow) = (out_shape[2], out_shape[3]);
    let x = input.data();
    let mut y = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let idx = base + (oy * stride + ky) * w + ox * stride + kx;
                        // first maximum wins ties
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                y.push(x[best]);
                argmax.push(best);
            }
        }
    }
    (Tensor::new(out_shape.to_vec(), y).expect("pool output shape"), argmax)
}

/// Numerically stable row-wise softmax over `[batch, classes]`.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let classes = logits.row_len();
    let mut out = logits.data().to_vec();
    for row in out.chunks_mut(classes.max(1)) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Tensor::new(logits.shape().to_vec(), out).expect("softmax shape")
}

/// Summed cross-entropy loss over the batch and its gradient w.r.t. the logits.
///
/// The per-sample gradient is `softmax(z) - onehot(label)`; no batch averaging.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f32, Tensor)> {
    if logits.shape().len() != 2 || logits.batch() != labels.len() {
        return Err(TensorError::ShapeMismatch {
            expected: vec![labels.len(), logits.row_len()],
            actual: logits.shape().to_vec(),
        });
    }
    let classes = logits.row_len();
    let z = logits.data();
    let mut grad = softmax_rows(logits).into_data();
    let mut loss = 0.0f32;
    for (s, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(TensorError::BadLabel { label, classes });
        }
        let row = &z[s * classes..(s + 1) * classes];
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f32>().ln();
        loss += lse - row[label];
        grad[s * classes + label] -= 1.0;
    }
    Ok((loss, Tensor::new(logits.shape().to_vec(), grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fc(in_dim: usize, out_dim: usize, w: Vec<f32>, b: Vec<f32>) -> Layer {
        Layer::with_params(
            LayerKind::FullyConnected { in_dim, out_dim },
            vec![
                Tensor::new(vec![out_dim, in_dim], w).unwrap(),
                Tensor::new(vec![out_dim], b).unwrap(),
            ],
        )
        .unwrap()
    }

    #[test]
    fn relu_forward_and_backward() {
        let relu = Layer::zeroed(LayerKind::ReLU);
        let x = Tensor::new(vec![1, 3], vec![-1.0, 0.0, 2.0]).unwrap();
        let (y, _) = relu.forward(&x).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);

        let x = Tensor::new(vec![1, 2], vec![-1.0, 2.0]).unwrap();
        let (_, cache) = relu.forward(&x).unwrap();
        let g = Tensor::new(vec![1, 2], vec![5.0, 5.0]).unwrap();
        let (gin, pg) = relu.backward(&cache, &g).unwrap();
        assert_eq!(gin.data(), &[0.0, 5.0]);
        assert!(pg.is_empty());
    }

    #[test]
    fn fc_identity_is_identity() {
        let layer = fc(3, 3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.], vec![0.0; 3]);
        let v = Tensor::new(vec![1, 3], vec![0.5, -1.25, 3.0]).unwrap();
        assert_eq!(layer.forward(&v).unwrap().0, v);
    }

    #[test]
    fn conv_1x1_scales_input() {
        let kind = LayerKind::Conv2d {
            in_ch: 1,
            out_ch: 1,
            kernel: 1,
            stride: 1,
            padding: 0,
        };
        let layer = Layer::with_params(kind, vec![Tensor::full(&[1, 1, 1, 1], 2.0), Tensor::zeros(&[1])]).unwrap();
        let (y, _) = layer.forward(&Tensor::full(&[1, 1, 2, 2], 1.0)).unwrap();
        assert_eq!(y, Tensor::full(&[1, 1, 2, 2], 2.0));
    }

    #[test]
    fn softmax_ce_symmetric_two_class() {
        let logits = Tensor::zeros(&[1, 2]);
        let (loss, grad) = softmax_cross_entropy(&logits, &[0]).unwrap();
        assert!((loss - std::f32::consts::LN_2).abs() < 1e-7);
        assert_eq!(grad.data(), &[-0.5, 0.5]);
    }

    #[test]
    fn softmax_ce_rejects_bad_label() {
        let logits = Tensor::zeros(&[1, 2]);
        assert!(matches!(
            softmax_cross_entropy(&logits, &[2]),
            Err(TensorError::BadLabel { label: 2, classes: 2 })
        ));
    }

    #[test]
    fn shape_mismatch_on_bad_input() {
        let layer = fc(3, 2, vec![0.0; 6], vec![0.0; 2]);
        let bad = Tensor::zeros(&[1, 4]);
        assert!(matches!(layer.forward(&bad), Err(TensorError::InvalidLayer(_))));
        let (_, cache) = layer.forward(&Tensor::zeros(&[1, 3])).unwrap();
        assert!(matches!(
            layer.backward(&cache, &Tensor::zeros(&[1, 3])),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn pool_routes_gradient_to_max() {
        let pool = Layer::zeroed(LayerKind::MaxPool2d { kernel: 2, stride: 2 });
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 4.0, 3.0, 2.0]).unwrap();
        let (y, cache) = pool.forward(&x).unwrap();
        assert_eq!(y.data(), &[4.0]);
        let (gin, _) = pool.backward(&cache, &Tensor::full(&[1, 1, 1, 1], 7.0)).unwrap();
        assert_eq!(gin.data(), &[0.0, 7.0, 0.0, 0.0]);
    }

    #[test]
    fn output_shapes() {
        let conv = LayerKind::Conv2d {
            in_ch: 3,
            out_ch: 64,
            kernel: 11,
            stride: 4,
            padding: 2,
        };
        assert_eq!(conv.output_shape(&[3, 224, 224]).unwrap(), vec![64, 55, 55]);
        let pool = LayerKind::MaxPool2d { kernel: 3, stride: 2 };
        assert_eq!(pool.output_shape(&[64, 55, 55]).unwrap(), vec![64, 27, 27]);
        assert_eq!(LayerKind::Flatten.output_shape(&[256, 6, 6]).unwrap(), vec![9216]);
    }
}
