//! Per-phase training objectives.
//!
//! All three losses score unit features against the classifier columns of a
//! [`SampleSet`]. The classifier is bound raw and normalized in-graph so that
//! its gradient is the tangent component at the unit sphere.

use crate::error::{Error, Result};
use crate::losses::{
    cosface_loss, cosine_logits, margin_terms_loss, ClassifierBank, CosineLogits, MarginSpec, MarginTerm,
};
use crate::ncs::{self, SampleSet};
use crate::prototypes::{cos_to_prototypes, PrototypeBank};
use crate::tensor::{Graph, Var};

/// Classifier columns of `set` bound as a trainable `d×K` leaf.
#[derive(Clone, Debug)]
pub struct ClassifierBinding {
    pub var: Var,
    pub set: SampleSet,
}

impl ClassifierBinding {
    pub fn bind(g: &mut Graph, bank: &ClassifierBank, set: SampleSet) -> Result<Self> {
        let var = ncs::bind_columns(g, bank, &set)?;
        Ok(ClassifierBinding { var, set })
    }
}

fn classifier_logits(g: &mut Graph, features: Var, w: &ClassifierBinding, labels: &[usize]) -> Result<CosineLogits> {
    let cols = w.set.label_columns(labels)?;
    let t = g.transpose(w.var)?;
    let t = g.l2_normalize_rows(t)?;
    let centers = g.transpose(t)?;
    cosine_logits(g, features, centers, cols)
}

/// CosFace over the sampled columns.
pub fn loss_alignment(
    g: &mut Graph,
    features: Var,
    w: &ClassifierBinding,
    labels: &[usize],
    s: f64,
    m: f64,
) -> Result<Var> {
    let logits = classifier_logits(g, features, w, labels)?;
    cosface_loss(g, &logits, s, m)
}

/// Prototype cosines over the initialized members of `set`, with the label
/// column of each sample. Every positive prototype must be initialized.
fn prototype_logits(
    g: &mut Graph,
    features: Var,
    protos: &PrototypeBank,
    set: &SampleSet,
    labels: &[usize],
) -> Result<CosineLogits> {
    let classes: Vec<usize> = set
        .global_ids()
        .iter()
        .copied()
        .filter(|&c| protos.is_initialized(c))
        .collect();
    let mut cols = Vec::with_capacity(labels.len());
    for &y in labels {
        match classes.binary_search(&y) {
            Ok(i) => cols.push(i),
            Err(_) => {
                return Err(Error::State(format!(
                    "prototype of class {y} referenced before initialization"
                )));
            }
        }
    }
    let values = cos_to_prototypes(g, features, protos, &classes)?;
    Ok(CosineLogits {
        values,
        label_column: cols,
    })
}

/// `log(1 + Σ_j e^{s cos θ_j − s(cos θ_y − m1)} + Σ_j e^{s cos φ_j − s(cos φ_y − m2)})`
/// over the columns of `w.set`, where `φ` are angles to the prototypes.
#[allow(clippy::too_many_arguments)]
pub fn loss_stabilization(
    g: &mut Graph,
    features: Var,
    w: &ClassifierBinding,
    protos: &PrototypeBank,
    labels: &[usize],
    s: f64,
    m1: f64,
    m2: f64,
) -> Result<Var> {
    let cls = classifier_logits(g, features, w, labels)?;
    let proto = prototype_logits(g, features, protos, &w.set, labels)?;
    margin_terms_loss(
        g,
        &[
            MarginTerm {
                logits: &cls,
                spec: MarginSpec::cosface(s, m1),
            },
            MarginTerm {
                logits: &proto,
                spec: MarginSpec::cosface(s, m2),
            },
        ],
    )
}

/// Stabilization objective over every class. `w` must bind the full set.
#[allow(clippy::too_many_arguments)]
pub fn loss_refinement(
    g: &mut Graph,
    features: Var,
    w: &ClassifierBinding,
    protos: &PrototypeBank,
    labels: &[usize],
    s: f64,
    m1: f64,
    m2: f64,
) -> Result<Var> {
    if w.set.len() != protos.classes() {
        return Err(Error::State(format!(
            "refinement needs all {} classes bound, got {}",
            protos.classes(),
            w.set.len()
        )));
    }
    loss_stabilization(g, features, w, protos, labels, s, m1, m2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn axis(d: usize, k: usize, sign: f64) -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[k] = sign;
        v
    }

    #[test]
    fn separated_alignment_is_negligible() {
        // two antipodal classes: cos_y = 1, cos_j = -1
        let w = Tensor::matrix(2, 2, vec![1.0, -1.0, 0.0, 0.0]).unwrap();
        let bank = ClassifierBank::from_weights(w).unwrap();
        let mut g = Graph::new();
        let x = g.param(Tensor::from_rows(&[[1.0, 0.0], [-1.0, 0.0]]).unwrap());
        let b = ClassifierBinding::bind(&mut g, &bank, SampleSet::full(2)).unwrap();
        let loss = loss_alignment(&mut g, x, &b, &[0, 1], 64.0, 0.4).unwrap();
        assert!(g.value(loss).item() < 1e-12);
    }

    #[test]
    fn symmetric_terms_give_ln3() {
        // one negative per term with cos_j = cos_y and zero margins
        let w = Tensor::matrix(2, 2, vec![1.0, 1.0, 1.0, -1.0]).unwrap();
        let bank = ClassifierBank::from_weights(w).unwrap();
        let mut protos = PrototypeBank::new(2, 2);
        protos.update(0, &[1.0, 0.0]).unwrap();
        protos.update(1, &[1.0, 0.0]).unwrap();
        let mut g = Graph::new();
        let x = g.param(Tensor::from_rows(&[[1.0, 0.0]]).unwrap());
        let b = ClassifierBinding::bind(&mut g, &bank, SampleSet::full(2)).unwrap();
        let loss = loss_stabilization(&mut g, x, &b, &protos, &[0], 10.0, 0.0, 0.0).unwrap();
        assert!((g.value(loss).item() - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn gradient_skips_prototypes_and_reaches_features_and_columns() {
        let w = Tensor::matrix(3, 3, vec![1.0, 0.2, 0.0, 0.1, 1.0, 0.3, 0.0, 0.1, 1.0]).unwrap();
        let bank = ClassifierBank::from_weights(w).unwrap();
        let mut protos = PrototypeBank::new(3, 3);
        for c in 0..3 {
            protos.update(c, &axis(3, c, 1.0)).unwrap();
        }
        let mut g = Graph::new();
        let x0 = g.param(Tensor::from_rows(&[[0.6, 0.8, 0.0], [0.0, 0.6, 0.8]]).unwrap());
        let x = g.l2_normalize_rows(x0).unwrap();
        let b = ClassifierBinding::bind(&mut g, &bank, SampleSet::full(3)).unwrap();
        let loss = loss_refinement(&mut g, x, &b, &protos, &[0, 1], 8.0, 0.4, 0.4).unwrap();
        g.backward(loss).unwrap();
        assert!(g.grad(x0).unwrap().data().iter().any(|v| *v != 0.0));
        assert!(g.grad(b.var).unwrap().data().iter().any(|v| *v != 0.0));
        for v in g.vars() {
            if !g.requires_grad(v) {
                assert!(g.grad(v).is_none());
            }
        }
    }

    #[test]
    fn uninitialized_positive_prototype_is_rejected() {
        let bank = ClassifierBank::from_weights(Tensor::identity(2)).unwrap();
        let protos = PrototypeBank::new(2, 2);
        let mut g = Graph::new();
        let x = g.param(Tensor::from_rows(&[[1.0, 0.0]]).unwrap());
        let b = ClassifierBinding::bind(&mut g, &bank, SampleSet::full(2)).unwrap();
        let err = loss_stabilization(&mut g, x, &b, &protos, &[0], 8.0, 0.4, 0.4);
        assert!(matches!(err, Err(Error::State(_))));
    }

    #[test]
    fn refinement_requires_full_set() {
        let bank = ClassifierBank::from_weights(Tensor::identity(3)).unwrap();
        let mut protos = PrototypeBank::new(3, 3);
        protos.update(0, &[1.0, 0.0, 0.0]).unwrap();
        let mut g = Graph::new();
        let x = g.param(Tensor::from_rows(&[[1.0, 0.0, 0.0]]).unwrap());
        let set = SampleSet::from_ids(vec![0, 1], 3).unwrap();
        let b = ClassifierBinding::bind(&mut g, &bank, set).unwrap();
        assert!(loss_refinement(&mut g, x, &b, &protos, &[0], 8.0, 0.4, 0.4).is_err());
    }
}
