//! Rotation-equivariant feature extraction.
//!
//! A shared-weight CNN backbone runs on the BEV image rotated by every
//! angle of the set `{0, 2π/N_R, …}`; each output is rotated back and the
//! results are max-pooled elementwise. The resulting `H × W × C` map is
//! tokenized by a convolutional stem, encoded by a pre-norm transformer
//! and pooled by a sigmoid-gated global average into one descriptor.
//!
//! Downsampling uses 2×2 average pooling and the stem uses 2×2 stride-2
//! kernels, so every downsampled grid stays centered on the image center
//! and stem tokens see only their own patch.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::bev::BevImage;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Encoder, Graph, Init, LayerNorm, Linear, ParamId, ParamStore, RotationMap, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureNetConfig {
    /// Side of the square BEV input.
    pub input_side: usize,
    /// Size `N_R` of the rotation set.
    pub rotation_count: usize,
    /// Output channels of the four backbone blocks.
    pub backbone_widths: [usize; 4],
    pub backbone_bias: bool,
    /// Tokenizer patch `(P_H, P_W)`; square powers of two.
    pub patch_size: (usize, usize),
    pub vit_dim: usize,
    pub vit_depth: usize,
    pub vit_heads: usize,
    pub vit_mlp_ratio: usize,
    pub stem_bias: bool,
    pub output_dim: usize,
}

impl Default for FeatureNetConfig {
    fn default() -> Self {
        FeatureNetConfig {
            input_side: 128,
            rotation_count: 8,
            backbone_widths: [32, 64, 128, 128],
            backbone_bias: true,
            patch_size: (4, 4),
            vit_dim: 256,
            vit_depth: 6,
            vit_heads: 4,
            vit_mlp_ratio: 4,
            stem_bias: true,
            output_dim: 512,
        }
    }
}

impl FeatureNetConfig {
    /// `(H, W, C)` of the aggregated feature map.
    pub fn mfa_shape(&self) -> (usize, usize, usize) {
        let s = self.input_side / 4;
        (s, s, self.backbone_widths[3])
    }

    pub fn token_count(&self) -> usize {
        let (h, w, _) = self.mfa_shape();
        (h / self.patch_size.0) * (w / self.patch_size.1)
    }

    pub fn rotation_angles(&self) -> Vec<f64> {
        (0..self.rotation_count)
            .map(|r| TAU * r as f64 / self.rotation_count as f64)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.rotation_count < 1 || self.rotation_count > u16::MAX as usize {
            return bad(format!("rotation_count must be >= 1, got {}", self.rotation_count));
        }
        if self.input_side < 4 || !self.input_side.is_multiple_of(4) {
            return bad(format!(
                "input_side {} must be a positive multiple of 4",
                self.input_side
            ));
        }
        if self.backbone_widths.contains(&0) {
            return bad("backbone widths must be positive".into());
        }
        let (ph, pw) = self.patch_size;
        if ph != pw || ph == 0 || !ph.is_power_of_two() {
            return bad(format!("patch size {ph}x{pw} must be square powers of two"));
        }
        let (h, w, _) = self.mfa_shape();
        if h % ph != 0 || w % pw != 0 {
            return bad(format!("feature map {h}x{w} not divisible by patch {ph}x{pw}"));
        }
        if self.vit_dim == 0 || self.vit_heads == 0 || !self.vit_dim.is_multiple_of(self.vit_heads) {
            return bad(format!(
                "vit_dim {} must be divisible by vit_heads {}",
                self.vit_dim, self.vit_heads
            ));
        }
        if ph > 1 && self.vit_dim < 2 {
            return bad("vit_dim must be >= 2 with a convolutional stem".into());
        }
        if self.vit_mlp_ratio == 0 || self.output_dim == 0 {
            return bad("vit_mlp_ratio and output_dim must be positive".into());
        }
        Ok(())
    }
}

/// Rotates a square `[S, S]` or `[C, S, S]` array about its center with
/// bilinear interpolation and zero fill.
pub fn rotate_image(img: &Tensor, angle: f64) -> Result<Tensor> {
    let (c, h, w) = match img.shape() {
        [h, w] => (1, *h, *w),
        [c, h, w] => (*c, *h, *w),
        s => {
            return Err(Error::InvalidArgument(format!(
                "rotate_image expects a 2-D or 3-D array, got {s:?}"
            )))
        }
    };
    if h != w {
        return Err(Error::InvalidArgument(format!(
            "rotate_image needs square spatial dims, got {h}x{w}"
        )));
    }
    let map = RotationMap::cached(h, angle);
    let mut out = vec![0.0; c * h * w];
    map.apply(img.data(), &mut out);
    Tensor::new(img.shape().to_vec(), out)
}

/// `[1, S, S]` tensor view of a BEV image.
pub fn image_tensor(img: &BevImage) -> Tensor {
    Tensor::from_parts(vec![1, img.side(), img.side()], img.pixels().to_vec())
}

#[derive(Debug, Clone)]
struct Block {
    downsample: bool,
    conv: Conv2d,
    skip: Option<Conv2d>,
}

impl Block {
    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let x = if self.downsample { g.avg_pool2(x)? } else { x };
        let h = g.gelu(x);
        let h = self.conv.forward(g, h)?;
        let skip = match &self.skip {
            Some(p) => p.forward(g, x)?,
            None => x,
        };
        g.add(h, skip)
    }
}

/// Four pre-activation residual blocks; blocks 2 and 3 halve the grid.
#[derive(Debug, Clone)]
pub struct Backbone {
    blocks: Vec<Block>,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, widths: [usize; 4], bias: bool) -> Self {
        let mut cin = 1;
        let blocks = widths
            .iter()
            .enumerate()
            .map(|(i, &cout)| {
                let b = Block {
                    downsample: i == 1 || i == 2,
                    conv: Conv2d::new(store, init, &format!("{name}.block{i}.conv"), cin, cout, 3, 1, 1, bias),
                    skip: (cin != cout)
                        .then(|| Conv2d::new(store, init, &format!("{name}.block{i}.skip"), cin, cout, 1, 1, 0, false)),
                };
                cin = cout;
                b
            })
            .collect();
        Backbone { blocks }
    }

    pub fn forward(&self, g: &mut Graph, mut x: Var) -> Result<Var> {
        for b in &self.blocks {
            x = b.forward(g, x)?;
        }
        Ok(x)
    }
}

#[derive(Debug, Clone)]
struct StemStage {
    conv: Conv2d,
    norm: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct FeatureNet {
    cfg: FeatureNetConfig,
    backbone: Backbone,
    stem: Vec<StemStage>,
    stem_proj: Conv2d,
    pos_embed: ParamId,
    encoder: Encoder,
    gate: Linear,
    proj: Linear,
}

/// Intermediate values of the gated global head.
pub struct HeadParts {
    pub gate: Var,
    pub pooled: Var,
    pub output: Var,
}

impl FeatureNet {
    pub fn new(cfg: &FeatureNetConfig, store: &mut ParamStore, init: &mut Init, name: &str) -> Result<Self> {
        cfg.validate()?;
        let backbone = Backbone::new(
            store,
            init,
            &format!("{name}.backbone"),
            cfg.backbone_widths,
            cfg.backbone_bias,
        );
        let (_, _, c) = cfg.mfa_shape();
        let d = cfg.vit_dim;
        let stages = cfg.patch_size.0.trailing_zeros() as usize;
        let hidden = (d / 2).max(1);
        let mut cin = c;
        let stem = (0..stages)
            .map(|i| {
                let s = StemStage {
                    conv: Conv2d::new(
                        store,
                        init,
                        &format!("{name}.stem{i}.conv"),
                        cin,
                        hidden,
                        2,
                        2,
                        0,
                        cfg.stem_bias,
                    ),
                    norm: LayerNorm::new(store, &format!("{name}.stem{i}.norm"), hidden),
                };
                cin = hidden;
                s
            })
            .collect();
        let stem_proj = Conv2d::new(
            store,
            init,
            &format!("{name}.stem.proj"),
            cin,
            d,
            1,
            1,
            0,
            cfg.stem_bias,
        );
        let pos_embed = store.add(
            format!("{name}.pos_embed"),
            init.normal(&[cfg.token_count(), d], 0.02),
            false,
        );
        let encoder = Encoder::new(
            store,
            init,
            &format!("{name}.vit"),
            d,
            cfg.vit_depth,
            cfg.vit_heads,
            d * cfg.vit_mlp_ratio,
        );
        let gate = Linear::new(store, init, &format!("{name}.head.gate"), d, 1, true);
        let proj = Linear::new(store, init, &format!("{name}.head.proj"), d, cfg.output_dim, true);
        Ok(FeatureNet {
            cfg: cfg.clone(),
            backbone,
            stem,
            stem_proj,
            pos_embed,
            encoder,
            gate,
            proj,
        })
    }

    pub fn config(&self) -> &FeatureNetConfig {
        &self.cfg
    }

    pub fn pos_embed(&self) -> ParamId {
        self.pos_embed
    }

    pub fn gate_layer(&self) -> &Linear {
        &self.gate
    }

    pub fn backbone_forward(&self, g: &mut Graph, img: Var) -> Result<Var> {
        self.backbone.forward(g, img)
    }

    /// `max_r R_r⁻¹ φ(R_r I)` over the rotation set.
    pub fn mfa_forward(&self, g: &mut Graph, img: Var) -> Result<Var> {
        let side = self.cfg.input_side;
        if g.shape(img) != [1, side, side] {
            return Err(Error::ShapeMismatch {
                context: "mfa_forward input".into(),
                expected: vec![1, side, side],
                actual: g.shape(img).to_vec(),
            });
        }
        let (h, _, _) = self.cfg.mfa_shape();
        let mut branches = Vec::with_capacity(self.cfg.rotation_count);
        for angle in self.cfg.rotation_angles() {
            if angle == 0.0 {
                branches.push(self.backbone.forward(g, img)?);
                continue;
            }
            let rotated = g.rotate(img, RotationMap::cached(side, angle))?;
            let f = self.backbone.forward(g, rotated)?;
            branches.push(g.rotate(f, RotationMap::cached(h, -angle))?);
        }
        if branches.len() == 1 {
            return Ok(branches[0]);
        }
        g.max_n(&branches)
    }

    /// Convolutional stem tokens `[M, d]` before positional embeddings.
    pub fn stem_tokens(&self, g: &mut Graph, f: Var) -> Result<Var> {
        let (h, w, c) = self.cfg.mfa_shape();
        if g.shape(f) != [c, h, w] {
            return Err(Error::ShapeMismatch {
                context: "vit_forward input".into(),
                expected: vec![c, h, w],
                actual: g.shape(f).to_vec(),
            });
        }
        let mut x = f;
        for stage in &self.stem {
            x = stage.conv.forward(g, x)?;
            let (ch, hh, ww) = g.value(x).dims3();
            let flat = g.reshape(x, vec![ch, hh * ww])?;
            let tokens = g.transpose(flat);
            let tokens = stage.norm.forward(g, tokens)?;
            let tokens = g.gelu(tokens);
            let back = g.transpose(tokens);
            x = g.reshape(back, vec![ch, hh, ww])?;
        }
        let x = self.stem_proj.forward(g, x)?;
        let (d, hh, ww) = g.value(x).dims3();
        let flat = g.reshape(x, vec![d, hh * ww])?;
        Ok(g.transpose(flat))
    }

    /// Tokenize, add positional embeddings and encode: `[M, d]`.
    pub fn vit_forward(&self, g: &mut Graph, f: Var) -> Result<Var> {
        let tokens = self.stem_tokens(g, f)?;
        let pos = g.param(self.pos_embed);
        let x = g.add(tokens, pos)?;
        self.encoder.forward(g, x)
    }

    /// `GAP(F + σ(FC(F)) ⊙ F)` followed by the output projection.
    pub fn global_head(&self, g: &mut Graph, tokens: Var) -> Result<HeadParts> {
        let logits = self.gate.forward(g, tokens)?;
        let gate = g.sigmoid(logits);
        let weighted = g.mul_row_scale(tokens, gate)?;
        let sum = g.add(tokens, weighted)?;
        let pooled = g.mean_rows(sum);
        let output = self.proj.forward(g, pooled)?;
        Ok(HeadParts { gate, pooled, output })
    }

    /// Full pipeline for one `[1, S, S]` image: a `[1, output_dim]` row.
    pub fn forward(&self, g: &mut Graph, img: Var) -> Result<Var> {
        let f = self.mfa_forward(g, img)?;
        let t = self.vit_forward(g, f)?;
        Ok(self.global_head(g, t)?.output)
    }

    pub fn forward_image(&self, g: &mut Graph, img: &BevImage) -> Result<Var> {
        let v = g.input(image_tensor(img));
        self.forward(g, v)
    }
}
