//! Feature extractors mapping raw inputs to unit-norm embeddings.

mod mlp;
mod vit;

pub use mlp::{MlpConfig, MlpEncoder};
pub use vit::{multi_head_attention, patchify, AttentionParams, VitConfig, VitEncoder};

use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::rng::DetRng;
use crate::tensor::{Graph, Tensor, Var};

/// Common surface of the encoders. Parameters are plain tensors owned by the
/// encoder; a forward pass binds them to graph leaves first.
pub trait FeatureEncoder {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn params(&self) -> &[Tensor];
    fn params_mut(&mut self) -> &mut [Tensor];

    /// Maps a `B×input_dim` batch to `B×output_dim` unit rows using the bound
    /// parameter leaves `params` (in [`params`](Self::params) order).
    fn forward(&self, g: &mut Graph, params: &[Var], input: &Tensor) -> Result<Var>;

    fn param_count(&self) -> usize {
        self.params().iter().map(Tensor::len).sum()
    }

    /// Registers every parameter as a trainable leaf.
    fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.params().iter().map(|p| g.param(p.clone())).collect()
    }

    /// Gradient-free embedding of a batch.
    fn embed(&self, input: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars: Vec<Var> = self.params().iter().map(|p| g.constant(p.clone())).collect();
        let out = self.forward(&mut g, &vars, input)?;
        Ok(g.value(out).clone())
    }
}

/// Either encoder, for storage in checkpoints and configs.
#[derive(Clone, Debug, PartialEq)]
pub enum Encoder {
    Mlp(MlpEncoder),
    Vit(VitEncoder),
}

impl FeatureEncoder for Encoder {
    fn input_dim(&self) -> usize {
        match self {
            Encoder::Mlp(e) => e.input_dim(),
            Encoder::Vit(e) => e.input_dim(),
        }
    }

    fn output_dim(&self) -> usize {
        match self {
            Encoder::Mlp(e) => e.output_dim(),
            Encoder::Vit(e) => e.output_dim(),
        }
    }

    fn params(&self) -> &[Tensor] {
        match self {
            Encoder::Mlp(e) => e.params(),
            Encoder::Vit(e) => e.params(),
        }
    }

    fn params_mut(&mut self) -> &mut [Tensor] {
        match self {
            Encoder::Mlp(e) => e.params_mut(),
            Encoder::Vit(e) => e.params_mut(),
        }
    }

    fn forward(&self, g: &mut Graph, params: &[Var], input: &Tensor) -> Result<Var> {
        match self {
            Encoder::Mlp(e) => e.forward(g, params, input),
            Encoder::Vit(e) => e.forward(g, params, input),
        }
    }
}

pub(crate) fn normal_tensor(shape: &[usize], std: f64, rng: &mut DetRng) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    let mut t = Tensor::zeros(shape);
    t.data_mut().iter_mut().for_each(|v| *v = dist.sample(rng));
    t
}

pub(crate) fn check_params(expected: &[Tensor], got: &[Var]) -> Result<()> {
    if expected.len() != got.len() {
        return Err(crate::error::Error::Shape {
            op: "encoder params",
            lhs: vec![expected.len()],
            rhs: vec![got.len()],
        });
    }
    Ok(())
}

/// Gradient-free embedding of every row of `inputs`, `chunk` rows per graph.
pub fn embed_rows<E: FeatureEncoder + ?Sized>(enc: &E, inputs: &Tensor, chunk: usize) -> Result<Tensor> {
    let (n, d) = inputs.dims2();
    let chunk = chunk.max(1);
    let mut out = Vec::with_capacity(n * enc.output_dim());
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let part = Tensor::matrix(end - start, d, inputs.data()[start * d..end * d].to_vec())?;
        out.extend_from_slice(enc.embed(&part)?.data());
        start = end;
    }
    Tensor::matrix(n, enc.output_dim(), out)
}
