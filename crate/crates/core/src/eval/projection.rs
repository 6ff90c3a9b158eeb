//! Two-dimensional angular view of an embedding set.
//!
//! Each feature maps to its cosine distances `1 − cos(x, r_k)` from two
//! orthonormal reference directions.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum RefPolicy {
    /// Top two principal directions of the (centered) features.
    #[default]
    Pca,
    /// The first two coordinate axes.
    Axes,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AngularProjection {
    pub refs: [Vec<f64>; 2],
    /// `(1 − cos(x, r_1), 1 − cos(x, r_2), label)`
    pub points: Vec<(f64, f64, usize)>,
}

fn principal_directions(features: &Tensor) -> Result<[Vec<f64>; 2]> {
    let (n, d) = features.dims2();
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(features.row(i)) {
            *m += v / n as f64;
        }
    }
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for i in 0..n {
        let c: Vec<f64> = features.row(i).iter().zip(&mean).map(|(v, m)| v - m).collect();
        for a in 0..d {
            for b in 0..d {
                cov[(a, b)] += c[a] * c[b];
            }
        }
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]];
    let second = eig.eigenvalues[order[1]];
    if !(top > 0.0) || !(second > 1e-12 * top) {
        return Err(Error::domain(
            "angular_projection",
            "feature set spans fewer than two directions",
        ));
    }
    let pick = |k: usize| {
        let mut v: Vec<f64> = eig.eigenvectors.column(order[k]).iter().copied().collect();
        // deterministic sign: largest-magnitude entry positive
        let big = v
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .map(|(i, _)| i)
            .unwrap_or(0);
        if v[big] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        v
    };
    Ok([pick(0), pick(1)])
}

pub fn angular_projection(features: &Tensor, labels: &[usize], policy: RefPolicy) -> Result<AngularProjection> {
    if features.shape().len() != 2 || features.cols() < 2 {
        return Err(Error::domain("angular_projection", "need d ≥ 2"));
    }
    if features.rows() != labels.len() {
        return Err(Error::Shape {
            op: "angular_projection",
            lhs: features.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    let d = features.cols();
    let refs = match policy {
        RefPolicy::Pca => principal_directions(features)?,
        RefPolicy::Axes => {
            let mut a = vec![0.0; d];
            let mut b = vec![0.0; d];
            a[0] = 1.0;
            b[1] = 1.0;
            [a, b]
        }
    };
    let mut points = Vec::with_capacity(labels.len());
    for (i, &y) in labels.iter().enumerate() {
        let x = features.row(i);
        let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(n >= crate::tensor::MIN_ROW_NORM) {
            return Err(Error::Degenerate {
                op: "angular_projection",
                row: i,
                norm: n,
            });
        }
        let cos = |r: &[f64]| (x.iter().zip(r).map(|(a, b)| a * b).sum::<f64>() / n).clamp(-1.0, 1.0);
        points.push((1.0 - cos(&refs[0]), 1.0 - cos(&refs[1]), y));
    }
    Ok(AngularProjection { refs, points })
}

impl AngularProjection {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("dist_ref1,dist_ref2,label\n");
        for (a, b, y) in &self.points {
            out.push_str(&format!("{a},{b},{y}\n"));
        }
        out
    }

    /// Mean over classes of the RMS distance of each class's points from
    /// their own 2-D mean.
    pub fn mean_class_spread(&self) -> f64 {
        use std::collections::BTreeMap;
        let mut groups: BTreeMap<usize, Vec<(f64, f64)>> = BTreeMap::new();
        for &(a, b, y) in &self.points {
            groups.entry(y).or_default().push((a, b));
        }
        let mut total = 0.0;
        for pts in groups.values() {
            let n = pts.len() as f64;
            let (ma, mb) = pts.iter().fold((0.0, 0.0), |(x, y), p| (x + p.0 / n, y + p.1 / n));
            let var = pts.iter().map(|p| (p.0 - ma).powi(2) + (p.1 - mb).powi(2)).sum::<f64>() / n;
            total += var.sqrt();
        }
        total / groups.len().max(1) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_coordinates() {
        let f = Tensor::from_rows(&[[1.0, 0.0, 0.0], [-2.0, 0.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        let p = angular_projection(&f, &[0, 1, 2], RefPolicy::Axes).unwrap();
        assert_eq!(p.points[0], (0.0, 1.0, 0));
        assert_eq!(p.points[1].0, 2.0);
        assert_eq!(p.points[2], (1.0, 1.0, 2));
    }

    #[test]
    fn pca_refs_are_orthonormal() {
        let f = Tensor::from_rows(&[
            [1.0, 0.1, 0.0],
            [-1.0, -0.1, 0.0],
            [0.0, 0.5, 0.2],
            [0.1, -0.5, -0.2],
            [0.3, 0.2, 0.1],
        ])
        .unwrap();
        let p = angular_projection(&f, &[0; 5], RefPolicy::Pca).unwrap();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        assert!((dot(&p.refs[0], &p.refs[0]) - 1.0).abs() < 1e-12);
        assert!((dot(&p.refs[1], &p.refs[1]) - 1.0).abs() < 1e-12);
        assert!(dot(&p.refs[0], &p.refs[1]).abs() < 1e-12);
        assert!(p
            .points
            .iter()
            .all(|&(a, b, _)| (0.0..=2.0).contains(&a) && (0.0..=2.0).contains(&b)));
    }

    #[test]
    fn rank_one_features_fail_pca() {
        let f = Tensor::from_rows(&[[1.0, 0.0], [2.0, 0.0], [3.0, 0.0]]).unwrap();
        assert!(angular_projection(&f, &[0, 0, 0], RefPolicy::Pca).is_err());
    }
}
