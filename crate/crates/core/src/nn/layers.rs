use super::graph::{Graph, Var};
use super::params::{Init, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::Result;

/// `y = x·W + b` with `W: [in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Self {
        let std = (1.0 / fan_in as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), init.normal(&[fan_in, fan_out], std), true);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]), false));
        Linear { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_row_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Square-kernel convolution with optional per-channel bias.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        let std = (2.0 / (cin * kernel * kernel) as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            init.normal(&[cout, cin, kernel, kernel], std),
            true,
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[cout]), false));
        Conv2d {
            weight,
            bias,
            stride,
            pad,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let y = g.conv2d(x, w, self.stride, self.pad)?;
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_channel_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Init::constant(&[dim], 1.0), false),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim]), false),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let ga = g.param(self.gamma);
        let be = g.param(self.beta);
        g.layer_norm(x, ga, be)
    }
}

/// Multi-head self-attention over a `[tokens, dim]` sequence.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    qkv: Linear,
    out: Linear,
    heads: usize,
    dim: usize,
}

impl SelfAttention {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, dim: usize, heads: usize) -> Self {
        assert!(
            heads > 0 && dim.is_multiple_of(heads),
            "dim {dim} not divisible by {heads} heads"
        );
        SelfAttention {
            qkv: Linear::new(store, init, &format!("{name}.qkv"), dim, 3 * dim, true),
            out: Linear::new(store, init, &format!("{name}.out"), dim, dim, true),
            heads,
            dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let qkv = self.qkv.forward(g, x)?;
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let q = g.slice_cols(qkv, h * dh, dh)?;
            let k = g.slice_cols(qkv, self.dim + h * dh, dh)?;
            let v = g.slice_cols(qkv, 2 * self.dim + h * dh, dh)?;
            let kt = g.transpose(k);
            let scores = g.matmul(q, kt)?;
            let scores = g.scale(scores, scale);
            let attn = g.softmax_rows(scores);
            heads.push(g.matmul(attn, v)?);
        }
        let cat = g.concat_cols(&heads)?;
        self.out.forward(g, cat)
    }
}

/// Pre-norm transformer encoder layer.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    ln1: LayerNorm,
    attn: SelfAttention,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl EncoderLayer {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, dim: usize, heads: usize, hidden: usize) -> Self {
        EncoderLayer {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            attn: SelfAttention::new(store, init, &format!("{name}.attn"), dim, heads),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            fc1: Linear::new(store, init, &format!("{name}.mlp.fc1"), dim, hidden, true),
            fc2: Linear::new(store, init, &format!("{name}.mlp.fc2"), hidden, dim, true),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.ln1.forward(g, x)?;
        let h = self.attn.forward(g, h)?;
        let x = g.add(x, h)?;
        let h = self.ln2.forward(g, x)?;
        let h = self.fc1.forward(g, h)?;
        let h = g.gelu(h);
        let h = self.fc2.forward(g, h)?;
        g.add(x, h)
    }
}

/// Stack of [`EncoderLayer`]s followed by a final layer norm.
#[derive(Debug, Clone)]
pub struct Encoder {
    layers: Vec<EncoderLayer>,
    norm: LayerNorm,
}

impl Encoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        dim: usize,
        depth: usize,
        heads: usize,
        hidden: usize,
    ) -> Self {
        Encoder {
            layers: (0..depth)
                .map(|i| EncoderLayer::new(store, init, &format!("{name}.layer{i}"), dim, heads, hidden))
                .collect(),
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim),
        }
    }

    pub fn forward(&self, g: &mut Graph, mut x: Var) -> Result<Var> {
        for layer in &self.layers {
            x = layer.forward(g, x)?;
        }
        self.norm.forward(g, x)
    }
}
