use super::{check_params, normal_tensor, FeatureEncoder};
use crate::error::{Error, Result};
use crate::rng::DetRng;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden: usize,
    pub output_dim: usize,
}

/// Two affine layers with an ELU between them, then row normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpEncoder {
    config: MlpConfig,
    /// `[w1 (in×h), b1 (h), w2 (h×out), b2 (out)]`
    params: Vec<Tensor>,
}

impl MlpEncoder {
    pub fn new(config: MlpConfig, init_std: f64, rng: &mut DetRng) -> Result<Self> {
        Self::validate(&config)?;
        let MlpConfig {
            input_dim,
            hidden,
            output_dim,
        } = config;
        let params = vec![
            normal_tensor(&[input_dim, hidden], init_std, rng),
            Tensor::zeros(&[hidden]),
            normal_tensor(&[hidden, output_dim], init_std, rng),
            Tensor::zeros(&[output_dim]),
        ];
        Ok(MlpEncoder { config, params })
    }

    /// Square layers initialized to the identity with zero biases.
    pub fn identity(dim: usize) -> Self {
        MlpEncoder {
            config: MlpConfig {
                input_dim: dim,
                hidden: dim,
                output_dim: dim,
            },
            params: vec![
                Tensor::identity(dim),
                Tensor::zeros(&[dim]),
                Tensor::identity(dim),
                Tensor::zeros(&[dim]),
            ],
        }
    }

    pub fn from_params(config: MlpConfig, params: Vec<Tensor>) -> Result<Self> {
        Self::validate(&config)?;
        let shapes = [
            vec![config.input_dim, config.hidden],
            vec![config.hidden],
            vec![config.hidden, config.output_dim],
            vec![config.output_dim],
        ];
        if params.len() != 4 || params.iter().zip(&shapes).any(|(p, s)| p.shape() != s.as_slice()) {
            return Err(Error::Format("mlp parameter shapes do not match config".into()));
        }
        Ok(MlpEncoder { config, params })
    }

    fn validate(c: &MlpConfig) -> Result<()> {
        if c.input_dim == 0 || c.hidden == 0 || c.output_dim < 2 {
            return Err(Error::Config(format!("invalid mlp shape {c:?}")));
        }
        Ok(())
    }

    pub fn config(&self) -> &MlpConfig {
        &self.config
    }
}

impl FeatureEncoder for MlpEncoder {
    fn input_dim(&self) -> usize {
        self.config.input_dim
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
        let x = g.constant(input.clone());
        let h = g.matmul(x, p[0])?;
        let h = g.add_row_bias(h, p[1])?;
        let h = g.elu(h);
        let o = g.matmul(h, p[2])?;
        let o = g.add_row_bias(o, p[3])?;
        g.l2_normalize_rows(o)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::tensor::finite_difference_check_multi;

    #[test]
    fn identity_layers_keep_direction() {
        let enc = MlpEncoder::identity(3);
        let x = Tensor::matrix(1, 3, vec![2.0, 0.5, 1.0]).unwrap();
        let y = enc.embed(&x).unwrap();
        let n = (4.0f64 + 0.25 + 1.0).sqrt();
        for (a, b) in y.data().iter().zip([2.0 / n, 0.5 / n, 1.0 / n]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn output_rows_are_unit() {
        let mut r = rng::seeded(4);
        let cfg = MlpConfig {
            input_dim: 5,
            hidden: 7,
            output_dim: 4,
        };
        let enc = MlpEncoder::new(cfg, 0.5, &mut r).unwrap();
        let x = normal_tensor(&[6, 5], 1.0, &mut r);
        let y = enc.embed(&x).unwrap();
        for i in 0..6 {
            let n: f64 = y.row(i).iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
        assert_eq!(enc.param_count(), 5 * 7 + 7 + 7 * 4 + 4);
    }

    #[test]
    fn gradient_check() {
        let mut r = rng::seeded(9);
        let cfg = MlpConfig {
            input_dim: 3,
            hidden: 4,
            output_dim: 3,
        };
        let enc = MlpEncoder::new(cfg, 0.7, &mut r).unwrap();
        let x = normal_tensor(&[2, 3], 1.0, &mut r);
        let probe = normal_tensor(&[2, 3], 1.0, &mut r);
        let err = finite_difference_check_multi(
            |g, vars| {
                let y = enc.forward(g, vars, &x)?;
                let c = g.constant(probe.clone());
                let p = g.mul(y, c)?;
                Ok(g.reduce_sum(p))
            },
            enc.params(),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
