//! A small Vision Transformer without a class token.
//!
//! Images are cut into `N = (W/stride)²` non-overlapping patches, projected
//! to `D` dimensions and offset by learned positional embeddings. `L`
//! pre-norm blocks (`z' = MSA(LN(z)) + z`, `z = FFN(LN(z')) + z'`) follow.
//! The embedding is an MLP over the concatenation of all `N` final tokens:
//! `Linear → LayerNorm → GELU → Linear`, then row normalization.

use super::{check_params, normal_tensor, FeatureEncoder};
use crate::error::{Error, Result};
use crate::rng::DetRng;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VitConfig {
    pub image_width: usize,
    pub patch_stride: usize,
    pub channels: usize,
    pub token_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub head_hidden: usize,
    pub output_dim: usize,
}

impl VitConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.patch_stride > 0
            && self.image_width > 0
            && self.image_width.is_multiple_of(self.patch_stride)
            && self.channels > 0
            && self.token_dim >= 2
            && self.heads > 0
            && self.token_dim.is_multiple_of(self.heads)
            && self.ffn_hidden > 0
            && self.head_hidden >= 2
            && self.output_dim >= 2;
        if !ok {
            return Err(Error::Config(format!("invalid vit config {self:?}")));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_width / self.patch_stride
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_len(&self) -> usize {
        self.patch_stride * self.patch_stride * self.channels
    }

    pub fn input_len(&self) -> usize {
        self.image_width * self.image_width * self.channels
    }

    /// Number of scalars in all parameters.
    pub fn param_count(&self) -> usize {
        let (n, d, f, h, o) = (
            self.tokens(),
            self.token_dim,
            self.ffn_hidden,
            self.head_hidden,
            self.output_dim,
        );
        let per_layer = 4 * d * d + 2 * d * f + 9 * d + f;
        self.patch_len() * d + n * d + self.layers * per_layer + n * d * h + 3 * h + h * o + o
    }
}

/// Splits a `W×W×C` image (row-major, channels last) into patch rows.
/// Patches are ordered row-major over the grid; each row is the row-major
/// flattening of its `stride×stride×C` block.
pub fn patchify(image: &[f64], config: &VitConfig) -> Result<Tensor> {
    if image.len() != config.input_len() {
        return Err(Error::Shape {
            op: "patchify",
            lhs: vec![config.image_width, config.image_width, config.channels],
            rhs: vec![image.len()],
        });
    }
    let (w, s, c, grid) = (config.image_width, config.patch_stride, config.channels, config.grid());
    let mut out = Vec::with_capacity(image.len());
    for pr in 0..grid {
        for pc in 0..grid {
            for y in 0..s {
                let start = ((pr * s + y) * w + pc * s) * c;
                out.extend_from_slice(&image[start..start + s * c]);
            }
        }
    }
    Tensor::matrix(config.tokens(), config.patch_len(), out)
}

/// Projection leaves of one self-attention block.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

/// Multi-head self-attention over the rows of `x` (`N×D`), with
/// `1/sqrt(D/H)` score scaling.
pub fn multi_head_attention(g: &mut Graph, x: Var, p: &AttentionParams, heads: usize) -> Result<Var> {
    let d = g.value(x).cols();
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::Config(format!("{d} not divisible into {heads} heads")));
    }
    let hd = d / heads;
    let q = g.matmul(x, p.wq)?;
    let q = g.add_row_bias(q, p.bq)?;
    let k = g.matmul(x, p.wk)?;
    let k = g.add_row_bias(k, p.bk)?;
    let v = g.matmul(x, p.wv)?;
    let v = g.add_row_bias(v, p.bv)?;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * hd, (h + 1) * hd)?,
                g.slice_cols(k, h * hd, (h + 1) * hd)?,
                g.slice_cols(v, h * hd, (h + 1) * hd)?,
            )
        };
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale);
        let attn = g.row_softmax(scores)?;
        outs.push(g.matmul(attn, vh)?);
    }
    let merged = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
    let o = g.matmul(merged, p.wo)?;
    g.add_row_bias(o, p.bo)
}

const PER_LAYER: usize = 16;
const HEAD_PARAMS: usize = 6;

#[derive(Clone, Debug, PartialEq)]
pub struct VitEncoder {
    config: VitConfig,
    params: Vec<Tensor>,
}

impl VitEncoder {
    /// Weights from `N(0, init_std²)`, layer-norm gains 1, biases 0.
    pub fn new(config: VitConfig, init_std: f64, rng: &mut DetRng) -> Result<Self> {
        config.validate()?;
        let (n, d, f, h, o) = (
            config.tokens(),
            config.token_dim,
            config.ffn_hidden,
            config.head_hidden,
            config.output_dim,
        );
        let mut params = vec![
            normal_tensor(&[config.patch_len(), d], init_std, rng),
            normal_tensor(&[n, d], init_std, rng),
        ];
        for _ in 0..config.layers {
            params.push(Tensor::ones(&[d]));
            params.push(Tensor::zeros(&[d]));
            for _ in 0..4 {
                params.push(normal_tensor(&[d, d], init_std, rng));
                params.push(Tensor::zeros(&[d]));
            }
            params.push(Tensor::ones(&[d]));
            params.push(Tensor::zeros(&[d]));
            params.push(normal_tensor(&[d, f], init_std, rng));
            params.push(Tensor::zeros(&[f]));
            params.push(normal_tensor(&[f, d], init_std, rng));
            params.push(Tensor::zeros(&[d]));
        }
        params.push(normal_tensor(&[n * d, h], init_std, rng));
        params.push(Tensor::zeros(&[h]));
        params.push(Tensor::ones(&[h]));
        params.push(Tensor::zeros(&[h]));
        params.push(normal_tensor(&[h, o], init_std, rng));
        params.push(Tensor::zeros(&[o]));
        Ok(VitEncoder { config, params })
    }

    pub fn from_params(config: VitConfig, params: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let expected = 2 + config.layers * PER_LAYER + HEAD_PARAMS;
        let total: usize = params.iter().map(Tensor::len).sum();
        if params.len() != expected || total != config.param_count() {
            return Err(Error::Format("vit parameters do not match config".into()));
        }
        Ok(VitEncoder { config, params })
    }

    pub fn config(&self) -> &VitConfig {
        &self.config
    }

    /// Index of the positional table within [`params`](FeatureEncoder::params).
    pub const POSITIONAL: usize = 1;

    /// Final-layer tokens `z_L` (`N×D`) of one image.
    pub fn encode_tokens(&self, g: &mut Graph, p: &[Var], image: &[f64]) -> Result<Var> {
        check_params(&self.params, p)?;
        let patches = g.constant(patchify(image, &self.config)?);
        let z = g.matmul(patches, p[0])?;
        let mut z = g.add(z, p[1])?;
        for l in 0..self.config.layers {
            let b = 2 + l * PER_LAYER;
            let attn = AttentionParams {
                wq: p[b + 2],
                bq: p[b + 3],
                wk: p[b + 4],
                bk: p[b + 5],
                wv: p[b + 6],
                bv: p[b + 7],
                wo: p[b + 8],
                bo: p[b + 9],
            };
            let h = g.layer_norm(z, p[b], p[b + 1])?;
            let h = multi_head_attention(g, h, &attn, self.config.heads)?;
            z = g.add(h, z)?;
            let h = g.layer_norm(z, p[b + 10], p[b + 11])?;
            let h = g.matmul(h, p[b + 12])?;
            let h = g.add_row_bias(h, p[b + 13])?;
            let h = g.gelu(h);
            let h = g.matmul(h, p[b + 14])?;
            let h = g.add_row_bias(h, p[b + 15])?;
            z = g.add(h, z)?;
        }
        Ok(z)
    }
}

impl FeatureEncoder for VitEncoder {
    fn input_dim(&self) -> usize {
        self.config.input_len()
    }

    fn output_dim(&self) -> usize {
        self.config.output_dim
    }

    fn params(&self) -> &[Tensor] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    fn forward(&self, g: &mut Graph, p: &[Var], input: &Tensor) -> Result<Var> {
        check_params(&self.params, p)?;
        if input.cols() != self.input_dim() {
            return Err(Error::Shape {
                op: "vit forward",
                lhs: vec![self.input_dim()],
                rhs: input.shape().to_vec(),
            });
        }
        let flat_len = self.config.tokens() * self.config.token_dim;
        let mut flat = Vec::with_capacity(input.rows());
        for i in 0..input.rows() {
            let z = self.encode_tokens(g, p, input.row(i))?;
            flat.push(g.reshape(z, &[1, flat_len])?);
        }
        let x = g.concat_rows(&flat)?;
        let h0 = 2 + self.config.layers * PER_LAYER;
        let h = g.matmul(x, p[h0])?;
        let h = g.add_row_bias(h, p[h0 + 1])?;
        let h = g.layer_norm(h, p[h0 + 2], p[h0 + 3])?;
        let h = g.gelu(h);
        let o = g.matmul(h, p[h0 + 4])?;
        let o = g.add_row_bias(o, p[h0 + 5])?;
        g.l2_normalize_rows(o)
    }
}
