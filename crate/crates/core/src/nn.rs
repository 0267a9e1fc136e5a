//! Transformer building blocks shared by both hierarchy levels.

use crate::error::{Error, Result};
use crate::tensor::{layer_norm, Float, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;
/// MLP hidden width as a multiple of the embedding width.
pub const MLP_RATIO: usize = 4;

/// Affine map `x · weight + bias`, with `weight` stored `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear<T: Float> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Float> Linear<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let wd = weight.dims();
        if wd.len() != 2 || bias.dims() != [wd[1]] {
            return Err(Error::shape(
                "linear",
                format!("weight {:?} with bias {:?}", wd, bias.dims()),
            ));
        }
        Ok(Linear { weight, bias })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.matmul(&self.weight)?.add(&self.bias)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNormParams<T: Float> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Float> LayerNormParams<T> {
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        layer_norm(x, &self.gamma, &self.beta, LAYER_NORM_EPS)
    }
}

#[derive(Clone, Debug)]
pub struct AttentionParams<T: Float> {
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub output: Linear<T>,
    heads: usize,
}

impl<T: Float> AttentionParams<T> {
    /// Tensors in order `w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o`, each weight
    /// `[D, D]`, each bias `[D]`.
    pub fn new(tensors: [Tensor<T>; 8], heads: usize) -> Result<Self> {
        let [wq, bq, wk, bk, wv, bv, wo, bo] = tensors;
        let d = wq.shape().last();
        if heads == 0 || d % heads != 0 {
            return Err(Error::invalid(
                "mhsa",
                format!("embedding width {d} is not divisible by {heads} heads"),
            ));
        }
        let p = AttentionParams {
            query: Linear::new(wq, bq)?,
            key: Linear::new(wk, bk)?,
            value: Linear::new(wv, bv)?,
            output: Linear::new(wo, bo)?,
            heads,
        };
        for l in [&p.query, &p.key, &p.value, &p.output] {
            if l.weight.dims() != [d, d] {
                return Err(Error::shape("mhsa", format!("projection {:?}, expected [{d}, {d}]", l.weight.dims())));
            }
        }
        Ok(p)
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn dim(&self) -> usize {
        self.query.weight.dims()[0]
    }

    pub fn head_dim(&self) -> usize {
        self.dim() / self.heads
    }
}

/// Multi-head scaled dot-product self-attention over `x: [B, N, D]`.
pub fn mhsa<T: Float>(x: &Tensor<T>, p: &AttentionParams<T>) -> Result<Tensor<T>> {
    mhsa_with_weights(x, p).map(|(out, _)| out)
}

/// As [`mhsa`], also returning the attention probabilities `[B, H, N, N]`.
pub fn mhsa_with_weights<T: Float>(
    x: &Tensor<T>,
    p: &AttentionParams<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let dims = x.dims();
    if dims.len() != 3 || dims[2] != p.dim() {
        return Err(Error::shape("mhsa", format!("x {:?} for width {}", dims, p.dim())));
    }
    let (b, n, d) = (dims[0], dims[1], dims[2]);
    let (h, hd) = (p.heads, p.head_dim());
    let split = |t: Tensor<T>| t.reshape([b, n, h, hd])?.permute(&[0, 2, 1, 3]);
    let q = split(p.query.forward(x)?)?;
    let k_t = p.key.forward(x)?.reshape([b, n, h, hd])?.permute(&[0, 2, 3, 1])?;
    let v = split(p.value.forward(x)?)?;
    let scores = q.matmul(&k_t)?.scale(1.0 / (hd as f64).sqrt());
    let attn = scores.softmax()?;
    let context = attn
        .matmul(&v)?
        .permute(&[0, 2, 1, 3])?
        .reshape([b, n, d])?;
    Ok((p.output.forward(&context)?, attn))
}

/// Two affine maps with GELU between, `D -> 4D -> D`.
#[derive(Clone, Debug)]
pub struct MlpParams<T: Float> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

impl<T: Float> MlpParams<T> {
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu())
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLayerParams<T: Float> {
    pub ln1: LayerNormParams<T>,
    pub attention: AttentionParams<T>,
    pub ln2: LayerNormParams<T>,
    pub mlp: MlpParams<T>,
}

impl<T: Float> EncoderLayerParams<T> {
    /// Parameter names (relative to the layer) and shapes, in storage order.
    pub fn param_shapes(d: usize) -> Vec<(&'static str, Vec<usize>)> {
        let hidden = MLP_RATIO * d;
        vec![
            ("ln1.gamma", vec![d]),
            ("ln1.beta", vec![d]),
            ("attn.w_q", vec![d, d]),
            ("attn.b_q", vec![d]),
            ("attn.w_k", vec![d, d]),
            ("attn.b_k", vec![d]),
            ("attn.w_v", vec![d, d]),
            ("attn.b_v", vec![d]),
            ("attn.w_o", vec![d, d]),
            ("attn.b_o", vec![d]),
            ("ln2.gamma", vec![d]),
            ("ln2.beta", vec![d]),
            ("mlp.fc1.weight", vec![d, hidden]),
            ("mlp.fc1.bias", vec![hidden]),
            ("mlp.fc2.weight", vec![hidden, d]),
            ("mlp.fc2.bias", vec![d]),
        ]
    }

    /// Builds a layer from tensors ordered as in [`Self::param_shapes`].
    pub fn from_slice(t: &[Tensor<T>], heads: usize) -> Result<Self> {
        if t.len() != 16 {
            return Err(Error::invalid(
                "encoder_layer",
                format!("expected 16 parameter tensors, got {}", t.len()),
            ));
        }
        let attn: [Tensor<T>; 8] = std::array::from_fn(|i| t[2 + i].clone());
        Ok(EncoderLayerParams {
            ln1: LayerNormParams {
                gamma: t[0].clone(),
                beta: t[1].clone(),
            },
            attention: AttentionParams::new(attn, heads)?,
            ln2: LayerNormParams {
                gamma: t[10].clone(),
                beta: t[11].clone(),
            },
            mlp: MlpParams {
                fc1: Linear::new(t[12].clone(), t[13].clone())?,
                fc2: Linear::new(t[14].clone(), t[15].clone())?,
            },
        })
    }
}

/// Pre-LN residual block: `x' = x + MHSA(LN(x))`, `out = x' + MLP(LN(x'))`.
pub fn encoder_layer<T: Float>(x: &Tensor<T>, p: &EncoderLayerParams<T>) -> Result<Tensor<T>> {
    let attended = x.add(&mhsa(&p.ln1.forward(x)?, &p.attention)?)?;
    attended.add(&p.mlp.forward(&p.ln2.forward(&attended)?)?)
}
