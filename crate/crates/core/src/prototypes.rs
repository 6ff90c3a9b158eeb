//! Feature-expectation prototypes.
//!
//! Each class keeps a unit vector `e_i` that tracks the running expectation of
//! its features. Updates mix the old prototype with a new feature using an
//! adaptive weight `α = σ(⟨e_i, x⟩)`, with `σ` the logistic function, and then
//! project back onto the sphere. Prototypes are statistics: they enter the
//! graph only as constants.

use crate::error::{Error, Result};
use crate::losses::COS_CLAMP;
use crate::tensor::{Graph, Tensor, Var};

pub fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank {
    dim: usize,
    /// Class-major: prototype `i` occupies `data[i*dim..(i+1)*dim]`.
    data: Vec<f64>,
    initialized: Vec<bool>,
}

impl PrototypeBank {
    pub fn new(dim: usize, classes: usize) -> Self {
        PrototypeBank {
            dim,
            data: vec![0.0; dim * classes],
            initialized: vec![false; classes],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.initialized.len()
    }

    pub fn is_initialized(&self, class: usize) -> bool {
        self.initialized.get(class).copied().unwrap_or(false)
    }

    pub fn initialized_count(&self) -> usize {
        self.initialized.iter().filter(|&&b| b).count()
    }

    pub fn initialized_flags(&self) -> &[bool] {
        &self.initialized
    }

    pub(crate) fn raw(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn from_raw(dim: usize, data: Vec<f64>, initialized: Vec<bool>) -> Result<Self> {
        if data.len() != dim * initialized.len() {
            return Err(Error::Format("prototype bank size mismatch".into()));
        }
        Ok(PrototypeBank { dim, data, initialized })
    }

    fn check_class(&self, class: usize) -> Result<()> {
        if class >= self.classes() {
            return Err(Error::OutOfRange {
                what: "prototype classes",
                index: class,
                len: self.classes(),
            });
        }
        Ok(())
    }

    /// Prototype of an initialized class.
    pub fn prototype(&self, class: usize) -> Result<&[f64]> {
        self.check_class(class)?;
        if !self.initialized[class] {
            return Err(Error::State(format!("prototype of class {class} is not initialized")));
        }
        Ok(&self.data[class * self.dim..(class + 1) * self.dim])
    }

    /// Folds one unit feature into the prototype of `class` and returns the
    /// new prototype. The first feature seen initializes it verbatim.
    pub fn update(&mut self, class: usize, x: &[f64]) -> Result<&[f64]> {
        self.check_class(class)?;
        if x.len() != self.dim {
            return Err(Error::Shape {
                op: "prototype update",
                lhs: vec![self.dim],
                rhs: vec![x.len()],
            });
        }
        let d = self.dim;
        let e = &mut self.data[class * d..(class + 1) * d];
        if !self.initialized[class] {
            e.copy_from_slice(x);
            self.initialized[class] = true;
            return Ok(e);
        }
        // αe + (1−α)e = e; skip the rounding of mix-and-renormalize
        if e == x {
            return Ok(e);
        }
        let cos: f64 = e.iter().zip(x).map(|(a, b)| a * b).sum();
        let alpha = logistic(cos);
        for (ev, &xv) in e.iter_mut().zip(x) {
            *ev = alpha * *ev + (1.0 - alpha) * xv;
        }
        let norm = e.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm >= crate::tensor::MIN_ROW_NORM) {
            return Err(Error::Degenerate {
                op: "prototype update",
                row: class,
                norm,
            });
        }
        e.iter_mut().for_each(|v| *v /= norm);
        Ok(e)
    }

    /// Sequential [`update`](Self::update) over a batch, in row order.
    pub fn batch_update(&mut self, labels: &[usize], features: &Tensor) -> Result<()> {
        if labels.len() != features.rows() {
            return Err(Error::Shape {
                op: "prototype batch_update",
                lhs: features.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        for (i, &y) in labels.iter().enumerate() {
            self.update(y, features.row(i))?;
        }
        Ok(())
    }

    /// Prototypes of `classes` as a constant `d×K` graph node.
    pub fn constant_columns(&self, g: &mut Graph, classes: &[usize]) -> Result<Var> {
        let k = classes.len();
        let mut cols = vec![0.0; self.dim * k];
        for (c, &class) in classes.iter().enumerate() {
            let e = self.prototype(class)?;
            for (r, v) in e.iter().enumerate() {
                cols[r * k + c] = *v;
            }
        }
        Ok(g.constant(Tensor::matrix(self.dim, k, cols)?))
    }
}

/// `⟨x_i, e_j⟩` for unit features against the prototypes of `classes`,
/// clamped like classifier cosines. Gradients reach `features` only.
pub fn cos_to_prototypes(g: &mut Graph, features: Var, bank: &PrototypeBank, classes: &[usize]) -> Result<Var> {
    let e = bank.constant_columns(g, classes)?;
    let raw = g.matmul(features, e)?;
    Ok(g.clamp(raw, -COS_CLAMP, COS_CLAMP))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_sample_initializes_verbatim() {
        let mut bank = PrototypeBank::new(3, 2);
        let x = [0.0, 0.6, 0.8];
        assert_eq!(bank.update(1, &x).unwrap(), &x);
        assert!(bank.is_initialized(1));
        assert!(!bank.is_initialized(0));
    }

    #[test]
    fn fixed_point_is_exact() {
        let mut bank = PrototypeBank::new(2, 1);
        let x = [0.6, 0.8];
        bank.update(0, &x).unwrap();
        for _ in 0..5 {
            assert_eq!(bank.update(0, &x).unwrap(), &x);
        }
        // norm rounds to 0.9999999999999999; still bit-exact
        let n = (0.1f64 * 0.1 + 0.7 * 0.7 + 0.3 * 0.3).sqrt();
        let y = [0.1 / n, 0.7 / n, 0.3 / n];
        let mut bank = PrototypeBank::new(3, 1);
        bank.update(0, &y).unwrap();
        assert_eq!(bank.update(0, &y).unwrap(), &y);
    }

    #[test]
    fn orthogonal_update_hits_the_diagonal() {
        let mut bank = PrototypeBank::new(2, 1);
        bank.update(0, &[1.0, 0.0]).unwrap();
        let e = bank.update(0, &[0.0, 1.0]).unwrap().to_vec();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((e[0] - h).abs() < 1e-15 && (e[1] - h).abs() < 1e-15);
    }

    #[test]
    fn batch_update_is_sequential() {
        let a = [1.0, 0.0];
        let b = [0.0, 1.0];
        let c = [0.6, -0.8];
        let mut one = PrototypeBank::new(2, 1);
        one.update(0, &a).unwrap();
        let mut two = one.clone();
        let mut seq = one.clone();

        one.batch_update(&[0, 0], &Tensor::from_rows(&[b, c]).unwrap()).unwrap();
        seq.update(0, &b).unwrap();
        seq.update(0, &c).unwrap();
        assert_eq!(one, seq);

        two.batch_update(&[0, 0], &Tensor::from_rows(&[c, b]).unwrap()).unwrap();
        assert_ne!(one.prototype(0).unwrap(), two.prototype(0).unwrap());
    }

    #[test]
    fn errors() {
        let mut bank = PrototypeBank::new(2, 2);
        assert!(matches!(bank.update(2, &[1.0, 0.0]), Err(Error::OutOfRange { .. })));
        assert!(matches!(bank.prototype(0), Err(Error::State(_))));
        let mut g = Graph::new();
        let f = g.constant(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap());
        assert!(cos_to_prototypes(&mut g, f, &bank, &[0]).is_err());
    }

    #[test]
    fn prototype_cosines() {
        let mut bank = PrototypeBank::new(2, 2);
        bank.update(0, &[1.0, 0.0]).unwrap();
        bank.update(1, &[0.0, 1.0]).unwrap();
        let mut g = Graph::new();
        let f = g.param(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap());
        let c = cos_to_prototypes(&mut g, f, &bank, &[0, 1]).unwrap();
        assert_eq!(g.value(c).data(), &[COS_CLAMP, 0.0]);
    }
}
