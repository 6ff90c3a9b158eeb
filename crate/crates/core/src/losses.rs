//! Margin-based softmax losses over cosine logits.
//!
//! All margin losses share one kernel: for sample `i` with positive column
//! `y`, the loss is
//!
//! ```text
//! log(1 + Σ_terms Σ_{j≠y} exp(s·cos θ_j − s·(cos(m1·θ_y + m2) − m3)))
//! ```
//!
//! evaluated as a log-sum-exp over `{0} ∪ {exponents}` so that `s = 64`
//! cannot overflow. A single term with `(m1, m2, m3)` is the unified margin
//! loss; several terms sharing a sample give the stage losses of the
//! trainer. The additive cosine margin `m3` is always *subtracted* from the
//! positive cosine (a penalty), so CosFace is `(1, 0, m)`.
//!
//! Returned losses are batch means.

use std::f64::consts::PI;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Cosines are clamped to `±COS_CLAMP` before any `arccos`.
pub const COS_CLAMP: f64 = 1.0 - 1e-7;

/// Unit-norm class centers `W = [w_1 … w_C]`, stored `d×C`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierBank {
    weights: Tensor,
}

impl ClassifierBank {
    /// Entries drawn from `U(-1, 1)`, then each column normalized.
    pub fn random<R: Rng + ?Sized>(dim: usize, classes: usize, rng: &mut R) -> Result<Self> {
        let data = (0..dim * classes).map(|_| rng.random_range(-1.0..1.0)).collect();
        Self::from_weights(Tensor::matrix(dim, classes, data)?)
    }

    /// Wraps a `d×C` matrix, normalizing every column.
    pub fn from_weights(weights: Tensor) -> Result<Self> {
        if weights.shape().len() != 2 || weights.rows() < 2 || weights.cols() < 2 {
            return Err(Error::domain(
                "classifier_bank",
                format!("need d ≥ 2 and C ≥ 2, got {:?}", weights.shape()),
            ));
        }
        let mut bank = ClassifierBank { weights };
        let all: Vec<usize> = (0..bank.classes()).collect();
        bank.renormalize_columns(&all)?;
        Ok(bank)
    }

    /// Wraps stored weights as-is.
    pub(crate) fn from_raw(weights: Tensor) -> Result<Self> {
        if weights.shape().len() != 2 {
            return Err(Error::Format(format!("classifier shape {:?}", weights.shape())));
        }
        Ok(ClassifierBank { weights })
    }

    pub fn dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn classes(&self) -> usize {
        self.weights.cols()
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub(crate) fn weights_mut(&mut self) -> &mut Tensor {
        &mut self.weights
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.dim()).map(|r| self.weights.at(r, j)).collect()
    }

    pub fn renormalize_columns(&mut self, cols: &[usize]) -> Result<()> {
        let (d, c) = (self.dim(), self.classes());
        let data = self.weights.data_mut();
        for &j in cols {
            if j >= c {
                return Err(Error::OutOfRange {
                    what: "classifier columns",
                    index: j,
                    len: c,
                });
            }
            let norm = (0..d).map(|r| data[r * c + j].powi(2)).sum::<f64>().sqrt();
            if !(norm >= crate::tensor::MIN_ROW_NORM) {
                return Err(Error::Degenerate {
                    op: "classifier column",
                    row: j,
                    norm,
                });
            }
            for r in 0..d {
                data[r * c + j] /= norm;
            }
        }
        Ok(())
    }
}

/// Scale and the three margins of the unified loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MarginSpec {
    pub s: f64,
    /// Multiplicative angular margin (SphereFace), `≥ 1`.
    pub m1: f64,
    /// Additive angular margin in radians (ArcFace), `≥ 0`.
    pub m2: f64,
    /// Additive cosine margin (CosFace), `≥ 0`, subtracted from the positive.
    pub m3: f64,
}

impl MarginSpec {
    pub fn new(s: f64, m1: f64, m2: f64, m3: f64) -> Result<Self> {
        if !(s > 0.0) || !(m1 >= 1.0) || !(m2 >= 0.0) || !(m3 >= 0.0) {
            return Err(Error::domain(
                "margin_spec",
                format!("invalid margins s={s} m1={m1} m2={m2} m3={m3}"),
            ));
        }
        Ok(MarginSpec { s, m1, m2, m3 })
    }

    pub fn angular(s: f64) -> Self {
        MarginSpec {
            s,
            m1: 1.0,
            m2: 0.0,
            m3: 0.0,
        }
    }

    pub fn cosface(s: f64, m: f64) -> Self {
        MarginSpec {
            s,
            m1: 1.0,
            m2: 0.0,
            m3: m,
        }
    }

    pub fn arcface(s: f64, m: f64) -> Self {
        MarginSpec {
            s,
            m1: 1.0,
            m2: m,
            m3: 0.0,
        }
    }

    pub fn sphereface(s: f64, m: f64) -> Self {
        MarginSpec {
            s,
            m1: m,
            m2: 0.0,
            m3: 0.0,
        }
    }

    /// Scaled positive logit `s·(cos(m1·θ + m2) − m3)` and its derivative
    /// w.r.t. `cos θ`. The angle `m1·θ + m2` is clamped to `[0, π]`.
    fn positive_logit(&self, cos: f64) -> (f64, f64) {
        if self.m1 == 1.0 && self.m2 == 0.0 {
            return (self.s * (cos - self.m3), self.s);
        }
        let theta = cos.acos();
        let raw = self.m1 * theta + self.m2;
        let phi = raw.clamp(0.0, PI);
        let dcos = if raw > 0.0 && raw < PI {
            self.m1 * phi.sin() / (1.0 - cos * cos).sqrt()
        } else {
            0.0
        };
        (self.s * (phi.cos() - self.m3), self.s * dcos)
    }
}

/// Cosine logits `B×K` plus the column of each row's positive class.
#[derive(Clone, Debug)]
pub struct CosineLogits {
    pub values: Var,
    pub label_column: Vec<usize>,
}

/// `⟨x_i, w_j⟩` for unit rows `features` (`B×d`) and unit columns
/// `centers` (`d×K`), clamped to `±COS_CLAMP`.
pub fn cosine_logits(g: &mut Graph, features: Var, centers: Var, label_column: Vec<usize>) -> Result<CosineLogits> {
    let raw = g.matmul(features, centers)?;
    let (b, k) = g.value(raw).dims2();
    if label_column.len() != b {
        return Err(Error::Shape {
            op: "cosine_logits",
            lhs: vec![b, k],
            rhs: vec![label_column.len()],
        });
    }
    if let Some(&bad) = label_column.iter().find(|&&c| c >= k) {
        return Err(Error::OutOfRange {
            what: "logit columns",
            index: bad,
            len: k,
        });
    }
    let values = g.clamp(raw, -COS_CLAMP, COS_CLAMP);
    Ok(CosineLogits { values, label_column })
}

/// Mean cross-entropy of raw logits (`B×C`) at integer labels.
pub fn softmax_ce_loss(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let lv = g.value(logits);
    let (b, c) = lv.dims2();
    if labels.len() != b {
        return Err(Error::Shape {
            op: "softmax_ce_loss",
            lhs: vec![b, c],
            rhs: vec![labels.len()],
        });
    }
    let mut grad = Tensor::zeros(lv.shape());
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::OutOfRange {
                what: "labels",
                index: y,
                len: c,
            });
        }
        let row = lv.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        let loss = lse - row[y];
        if !loss.is_finite() {
            return Err(Error::non_finite(format!("softmax_ce_loss sample {i}")));
        }
        total += loss;
        for (gv, v) in grad.row_mut(i).iter_mut().zip(row) {
            *gv = (v - lse).exp() / b as f64;
        }
        grad.row_mut(i)[y] -= 1.0 / b as f64;
    }
    g.fused_scalar(total / b as f64, vec![(logits, grad)])
}

/// One additive term of a margin loss: cosines against some column set and
/// the margins applied to the positive entry.
#[derive(Clone, Debug)]
pub struct MarginTerm<'a> {
    pub logits: &'a CosineLogits,
    pub spec: MarginSpec,
}

/// Per-sample losses and `∂(mean loss)/∂cos` for each term.
fn margin_kernel(terms: &[(&Tensor, &[usize], MarginSpec)]) -> Result<(Vec<f64>, Vec<Tensor>)> {
    let first = terms.first().ok_or_else(|| Error::domain("margin_loss", "no terms"))?;
    let b = first.0.rows();
    for (values, labels, _) in terms {
        if values.rows() != b || labels.len() != b {
            return Err(Error::Shape {
                op: "margin_loss",
                lhs: first.0.shape().to_vec(),
                rhs: values.shape().to_vec(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= values.cols()) {
            return Err(Error::OutOfRange {
                what: "logit columns",
                index: bad,
                len: values.cols(),
            });
        }
    }
    let mut grads: Vec<Tensor> = terms.iter().map(|(v, _, _)| Tensor::zeros(v.shape())).collect();
    let mut losses = Vec::with_capacity(b);
    let inv_b = 1.0 / b as f64;
    let mut exps: Vec<Vec<f64>> = terms.iter().map(|(v, _, _)| vec![0.0; v.cols()]).collect();
    let mut pos: Vec<(f64, f64)> = vec![(0.0, 0.0); terms.len()];

    for i in 0..b {
        let mut max = 0.0f64;
        for (t, (values, labels, spec)) in terms.iter().enumerate() {
            let row = values.row(i);
            let y = labels[i];
            pos[t] = spec.positive_logit(row[y]);
            for (j, &c) in row.iter().enumerate() {
                if j != y {
                    let a = spec.s * c - pos[t].0;
                    exps[t][j] = a;
                    max = max.max(a);
                }
            }
        }
        let mut total = (-max).exp();
        for (row, (_, labels, _)) in exps.iter_mut().zip(terms) {
            for (j, slot) in row.iter_mut().enumerate() {
                if j != labels[i] {
                    *slot = (*slot - max).exp();
                    total += *slot;
                }
            }
        }
        let loss = max + total.ln();
        if !loss.is_finite() {
            return Err(Error::non_finite(format!("margin loss sample {i}")));
        }
        losses.push(loss);
        for (t, (values, labels, spec)) in terms.iter().enumerate() {
            let y = labels[i];
            let row = values.row(i);
            let grow = grads[t].row_mut(i);
            let mut mass = 0.0;
            for j in 0..row.len() {
                if j != y {
                    let p = exps[t][j] / total;
                    mass += p;
                    grow[j] = p * spec.s * inv_b;
                }
            }
            grow[y] = -mass * pos[t].1 * inv_b;
        }
    }
    Ok((losses, grads))
}

fn terms_loss(g: &mut Graph, terms: &[MarginTerm<'_>]) -> Result<Var> {
    let values: Vec<Tensor> = terms.iter().map(|t| g.value(t.logits.values).clone()).collect();
    let kernel_in: Vec<(&Tensor, &[usize], MarginSpec)> = terms
        .iter()
        .zip(&values)
        .map(|(t, v)| (v, t.logits.label_column.as_slice(), t.spec))
        .collect();
    let (losses, grads) = margin_kernel(&kernel_in)?;
    let mean = losses.iter().sum::<f64>() / losses.len() as f64;
    let inputs = terms.iter().map(|t| t.logits.values).zip(grads).collect();
    g.fused_scalar(mean, inputs)
}

/// Batch mean of `log(1 + Σ_terms Σ_{j≠y} e^{s cos θ_j} / e^{s(cos(m1θ_y+m2) − m3)})`.
pub fn margin_terms_loss(g: &mut Graph, terms: &[MarginTerm<'_>]) -> Result<Var> {
    terms_loss(g, terms)
}

pub fn unified_margin_loss(g: &mut Graph, logits: &CosineLogits, spec: MarginSpec) -> Result<Var> {
    terms_loss(g, &[MarginTerm { logits, spec }])
}

/// Unified loss with `(m1, m2, m3) = (1, 0, m)`.
pub fn cosface_loss(g: &mut Graph, logits: &CosineLogits, s: f64, m: f64) -> Result<Var> {
    unified_margin_loss(g, logits, MarginSpec::cosface(s, m))
}

/// Margin-free normalized softmax (`s·cos θ` logits).
pub fn angular_loss(g: &mut Graph, logits: &CosineLogits, s: f64) -> Result<Var> {
    unified_margin_loss(g, logits, MarginSpec::angular(s))
}

/// Per-sample unified losses for plain cosine values, without a graph.
pub fn per_sample_margin_losses(values: &Tensor, label_column: &[usize], spec: MarginSpec) -> Result<Vec<f64>> {
    Ok(margin_kernel(&[(values, label_column, spec)])?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_difference_check;

    fn logits(g: &mut Graph, rows: &[&[f64]], labels: &[usize]) -> CosineLogits {
        let t = Tensor::from_rows(rows).unwrap();
        CosineLogits {
            values: g.constant(t),
            label_column: labels.to_vec(),
        }
    }

    #[test]
    fn symmetric_two_way_is_ln2() {
        let mut g = Graph::new();
        let l = logits(&mut g, &[&[0.3, 0.3]], &[0]);
        let v = unified_margin_loss(&mut g, &l, MarginSpec::angular(64.0)).unwrap();
        assert!((g.value(v).item() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn cosface_separated_is_zero() {
        let mut g = Graph::new();
        let l = logits(&mut g, &[&[1.0, -1.0]], &[0]);
        let v = cosface_loss(&mut g, &l, 64.0, 0.4).unwrap();
        let expect = (-64.0f64 - 64.0 * 0.6).exp().ln_1p();
        assert!((g.value(v).item() - expect).abs() < 1e-12);
        assert!(g.value(v).item() < 1e-12);
    }

    #[test]
    fn cosface_equal_cosines_closed_form() {
        let mut g = Graph::new();
        let l = logits(&mut g, &[&[0.1, 0.1]], &[1]);
        let v = cosface_loss(&mut g, &l, 64.0, 0.4).unwrap();
        let expect = (64.0f64 * 0.4).exp().ln_1p();
        assert!((g.value(v).item() - expect).abs() < 1e-9);
    }

    #[test]
    fn softmax_ce_closed_forms() {
        let mut g = Graph::new();
        let u = g.constant(Tensor::full(&[3, 5], 0.7));
        let v = softmax_ce_loss(&mut g, u, &[0, 4, 2]).unwrap();
        assert!((g.value(v).item() - 5f64.ln()).abs() < 1e-14);

        let l = 3.5;
        let t = g.constant(Tensor::matrix(1, 2, vec![l, 0.0]).unwrap());
        let v = softmax_ce_loss(&mut g, t, &[0]).unwrap();
        assert!((g.value(v).item() - (-l).exp().ln_1p()).abs() < 1e-14);

        assert!(matches!(
            softmax_ce_loss(&mut g, t, &[2]),
            Err(Error::OutOfRange { index: 2, .. })
        ));
    }

    #[test]
    fn softmax_ce_gradient() {
        let x = Tensor::matrix(2, 3, vec![0.2, -1.0, 2.5, 0.0, 0.3, -0.7]).unwrap();
        let err = finite_difference_check(|g, v| softmax_ce_loss(g, v, &[2, 0]), &x, 1e-5).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn label_out_of_range_is_rejected() {
        let mut g = Graph::new();
        let l = logits(&mut g, &[&[0.1, 0.2]], &[2]);
        assert!(unified_margin_loss(&mut g, &l, MarginSpec::angular(1.0)).is_err());
    }

    #[test]
    fn margin_spec_validation() {
        assert!(MarginSpec::new(0.0, 1.0, 0.0, 0.0).is_err());
        assert!(MarginSpec::new(1.0, 0.5, 0.0, 0.0).is_err());
        assert!(MarginSpec::new(1.0, 1.0, -0.1, 0.0).is_err());
        assert!(MarginSpec::new(64.0, 1.0, 0.5, 0.35).is_ok());
    }

    #[test]
    fn arccos_margins_reduce_to_plain_angle() {
        let spec = MarginSpec::new(2.0, 1.0, 1e-300, 0.0).unwrap();
        let (z, dz) = spec.positive_logit(0.4);
        assert!((z - 0.8).abs() < 1e-12);
        assert!((dz - 2.0).abs() < 1e-9);
    }

    #[test]
    fn sphereface_angle_is_clamped_to_pi() {
        let spec = MarginSpec::sphereface(1.0, 4.0);
        let (z, dz) = spec.positive_logit(-0.5); // θ = 2π/3, 4θ > π
        assert_eq!(z, -1.0);
        assert_eq!(dz, 0.0);
    }

    #[test]
    fn bank_columns_are_unit() {
        let w = Tensor::matrix(2, 3, vec![3., 0., 1., 4., 2., 1.]).unwrap();
        let bank = ClassifierBank::from_weights(w).unwrap();
        for j in 0..3 {
            let n: f64 = bank.column(j).iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-15);
        }
        assert_eq!(bank.column(0), vec![0.6, 0.8]);
        assert!(ClassifierBank::from_weights(Tensor::zeros(&[1, 3])).is_err());
    }
}
