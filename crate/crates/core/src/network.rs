//! Sequential networks built from [`Layer`]s.

use crate::layers::{softmax_cross_entropy, Layer, LayerCache, LayerKind};
use crate::tensor::{Result, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

/// Forward caches for every layer of a [`Sequential`], in layer order.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    caches: Vec<LayerCache>,
}

/// Loss, input gradient, and per-tensor parameter gradient sums for one batch.
#[derive(Debug, Clone)]
pub struct LossGrads {
    pub loss: f32,
    pub grad_in: Tensor,
    pub param_grads: Vec<Tensor>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    pub fn kinds(&self) -> impl Iterator<Item = LayerKind> + '_ {
        self.layers.iter().map(|l| l.kind)
    }

    pub fn ends_with_loss(&self) -> bool {
        matches!(self.layers.last().map(|l| l.kind), Some(LayerKind::SoftmaxCrossEntropy))
    }

    /// All learnable tensors, layer by layer (weight before bias).
    pub fn params(&self) -> Vec<Tensor> {
        self.layers.iter().flat_map(|l| l.params.iter().cloned()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().flat_map(|l| &l.params).map(Tensor::len).sum()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.params.iter_mut())
    }

    pub fn set_params(&mut self, params: &[Tensor]) -> Result<()> {
        let expected: usize = self.layers.iter().map(|l| l.params.len()).sum();
        if params.len() != expected {
            return Err(TensorError::InvalidLayer(format!(
                "expected {expected} parameter tensors, got {}",
                params.len()
            )));
        }
        for (dst, src) in self.params_mut().zip(params) {
            src.expect_shape(dst.shape())?;
            *dst = src.clone();
        }
        Ok(())
    }

    /// Runs every layer, including a trailing softmax if present.
    pub fn forward(&self, input: &Tensor) -> Result<(Tensor, ForwardTrace)> {
        self.forward_range(input, self.layers.len())
    }

    fn forward_range(&self, input: &Tensor, end: usize) -> Result<(Tensor, ForwardTrace)> {
        let mut caches = Vec::with_capacity(end);
        let mut x = input.clone();
        for layer in &self.layers[..end] {
            let (y, cache) = layer.forward(&x)?;
            caches.push(cache);
            x = y;
        }
        Ok((x, ForwardTrace { caches }))
    }

    /// Backpropagates `grad_out` through the layers recorded in `trace`.
    pub fn backward(&self, trace: &ForwardTrace, grad_out: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let mut grad = grad_out.clone();
        let mut per_layer = Vec::with_capacity(trace.caches.len());
        for (layer, cache) in self.layers[..trace.caches.len()].iter().zip(&trace.caches).rev() {
            let (g, pg) = layer.backward(cache, &grad)?;
            per_layer.push(pg);
            grad = g;
        }
        per_layer.reverse();
        Ok((grad, per_layer.into_iter().flatten().collect()))
    }

    /// Forward to the logits, summed cross-entropy, and a full backward pass.
    ///
    /// The network must end with a `SoftmaxCrossEntropy` layer; the softmax is
    /// fused into the loss rather than run as a separate layer.
    pub fn loss_and_grads(&self, input: &Tensor, labels: &[usize]) -> Result<LossGrads> {
        if !self.ends_with_loss() {
            return Err(TensorError::InvalidLayer(
                "network does not end with softmax_ce".into(),
            ));
        }
        let body = self.layers.len() - 1;
        let (logits, trace) = self.forward_range(input, body)?;
        let (loss, grad_logits) = softmax_cross_entropy(&logits, labels)?;
        let (grad_in, param_grads) = self.backward(&trace, &grad_logits)?;
        Ok(LossGrads {
            loss,
            grad_in,
            param_grads,
        })
    }
}
