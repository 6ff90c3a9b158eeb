//! Verification metrics over cosine pair scores.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// FAR operating points reported by default.
pub const REPORT_FARS: [f64; 6] = [1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VerificationPair {
    pub a: usize,
    pub b: usize,
    pub is_match: bool,
}

fn split_scores(scores: &[f64], is_match: &[bool]) -> Result<(Vec<f64>, Vec<f64>)> {
    if scores.len() != is_match.len() {
        return Err(Error::Shape {
            op: "verification",
            lhs: vec![scores.len()],
            rhs: vec![is_match.len()],
        });
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::non_finite(format!("pair score {i}")));
    }
    let mut gen = Vec::new();
    let mut imp = Vec::new();
    for (&s, &m) in scores.iter().zip(is_match) {
        if m {
            gen.push(s)
        } else {
            imp.push(s)
        }
    }
    if imp.is_empty() {
        return Err(Error::Protocol("no impostor pairs".into()));
    }
    if gen.is_empty() {
        return Err(Error::Protocol("no genuine pairs".into()));
    }
    gen.sort_by(f64::total_cmp);
    imp.sort_by(f64::total_cmp);
    Ok((gen, imp))
}

/// Number of entries of ascending `v` that are `≥ t`.
fn count_at_least(v: &[f64], t: f64) -> usize {
    v.len() - v.partition_point(|&x| x < t)
}

fn count_above(v: &[f64], t: f64) -> usize {
    v.len() - v.partition_point(|&x| x <= t)
}

/// True accept rate at the smallest impostor score `τ` whose impostor
/// accept rate (scores `≥ τ`) is at most `far`. When no impostor score
/// qualifies the threshold sits strictly above every impostor.
pub fn tar_at_far(scores: &[f64], is_match: &[bool], far: f64) -> Result<f64> {
    if !(far > 0.0 && far < 1.0) {
        return Err(Error::domain(
            "tar_at_far",
            format!("far must lie in (0, 1), got {far}"),
        ));
    }
    let (gen, imp) = split_scores(scores, is_match)?;
    Ok(tar_sorted(&gen, &imp, far))
}

fn tar_sorted(gen: &[f64], imp: &[f64], far: f64) -> f64 {
    let ni = imp.len() as f64;
    let mut i = 0;
    while i < imp.len() {
        let t = imp[i];
        let accepted = imp.len() - i;
        if accepted as f64 / ni <= far {
            return count_at_least(gen, t) as f64 / gen.len() as f64;
        }
        while i < imp.len() && imp[i] == t {
            i += 1;
        }
    }
    count_above(gen, imp[imp.len() - 1]) as f64 / gen.len() as f64
}

/// `(FAR, TAR)` at every impostor-score threshold, plus the point above
/// the highest impostor. FAR strictly increases along the curve.
pub fn roc(scores: &[f64], is_match: &[bool]) -> Result<Vec<(f64, f64)>> {
    let (gen, imp) = split_scores(scores, is_match)?;
    let (ng, ni) = (gen.len() as f64, imp.len() as f64);
    let top = imp[imp.len() - 1];
    let mut out = vec![(0.0, count_above(&gen, top) as f64 / ng)];
    let mut i = imp.len();
    while i > 0 {
        let t = imp[i - 1];
        while i > 0 && imp[i - 1] == t {
            i -= 1;
        }
        let far = (imp.len() - i) as f64 / ni;
        out.push((far, count_at_least(&gen, t) as f64 / ng));
    }
    Ok(out)
}

/// Mean cosine over same-class sample pairs, and over pairs of class
/// centroids (normalized class means).
pub fn cluster_stats(features: &Tensor, labels: &[usize]) -> Result<(f64, f64)> {
    if features.rows() != labels.len() {
        return Err(Error::Shape {
            op: "cluster_stats",
            lhs: features.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    let d = features.cols();
    let mut unit: Vec<Vec<f64>> = Vec::with_capacity(labels.len());
    for i in 0..features.rows() {
        let r = features.row(i);
        let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(n >= crate::tensor::MIN_ROW_NORM) {
            return Err(Error::Degenerate {
                op: "cluster_stats",
                row: i,
                norm: n,
            });
        }
        unit.push(r.iter().map(|v| v / n).collect());
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        groups.entry(y).or_default().push(i);
    }
    if groups.len() < 2 {
        return Err(Error::domain("cluster_stats", "need at least two classes"));
    }
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();

    let (mut intra, mut pairs) = (0.0, 0usize);
    let mut centroids = Vec::with_capacity(groups.len());
    for (&y, members) in &groups {
        for (k, &i) in members.iter().enumerate() {
            for &j in &members[k + 1..] {
                intra += dot(&unit[i], &unit[j]);
                pairs += 1;
            }
        }
        let mut c = vec![0.0; d];
        for &i in members {
            for (a, b) in c.iter_mut().zip(&unit[i]) {
                *a += b;
            }
        }
        let n = c.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(n >= crate::tensor::MIN_ROW_NORM) {
            return Err(Error::Degenerate {
                op: "class centroid",
                row: y,
                norm: n,
            });
        }
        c.iter_mut().for_each(|v| *v /= n);
        centroids.push(c);
    }
    if pairs == 0 {
        return Err(Error::domain("cluster_stats", "every class has a single sample"));
    }
    let (mut inter, mut cpairs) = (0.0, 0usize);
    for a in 0..centroids.len() {
        for b in a + 1..centroids.len() {
            inter += dot(&centroids[a], &centroids[b]);
            cpairs += 1;
        }
    }
    Ok((intra / pairs as f64, inter / cpairs as f64))
}

/// Cosine similarity of each pair of rows.
pub fn score_pairs(features: &Tensor, pairs: &[VerificationPair]) -> Result<Vec<f64>> {
    let n = features.rows();
    let norms: Vec<f64> = (0..n)
        .map(|i| features.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    pairs
        .iter()
        .map(|p| {
            for id in [p.a, p.b] {
                if id >= n {
                    return Err(Error::OutOfRange {
                        what: "embeddings",
                        index: id,
                        len: n,
                    });
                }
            }
            if p.a == p.b {
                return Err(Error::Protocol(format!(
                    "pair ({}, {}) compares a sample with itself",
                    p.a, p.b
                )));
            }
            let dot: f64 = features
                .row(p.a)
                .iter()
                .zip(features.row(p.b))
                .map(|(x, y)| x * y)
                .sum();
            let denom = norms[p.a] * norms[p.b];
            if !(denom > 0.0) {
                return Err(Error::Degenerate {
                    op: "pair score",
                    row: if norms[p.a] > 0.0 { p.b } else { p.a },
                    norm: 0.0,
                });
            }
            Ok(dot / denom)
        })
        .collect()
}

/// Every unordered pair of distinct samples.
pub fn all_pairs(labels: &[usize]) -> Vec<VerificationPair> {
    let mut out = Vec::with_capacity(labels.len() * labels.len().saturating_sub(1) / 2);
    for a in 0..labels.len() {
        for b in a + 1..labels.len() {
            out.push(VerificationPair {
                a,
                b,
                is_match: labels[a] == labels[b],
            });
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerificationReport {
    pub roc: Vec<(f64, f64)>,
    pub tar_at: Vec<(f64, f64)>,
    pub intra_mean_cos: f64,
    pub inter_mean_cos: f64,
    pub samples: usize,
    pub pairs: usize,
}

impl VerificationReport {
    pub fn build(features: &Tensor, labels: &[usize], pairs: &[VerificationPair], fars: &[f64]) -> Result<Self> {
        let scores = score_pairs(features, pairs)?;
        let matches: Vec<bool> = pairs.iter().map(|p| p.is_match).collect();
        let tar_at = fars
            .iter()
            .map(|&f| tar_at_far(&scores, &matches, f).map(|t| (f, t)))
            .collect::<Result<Vec<_>>>()?;
        let (intra, inter) = cluster_stats(features, labels)?;
        Ok(VerificationReport {
            roc: roc(&scores, &matches)?,
            tar_at,
            intra_mean_cos: intra,
            inter_mean_cos: inter,
            samples: features.rows(),
            pairs: pairs.len(),
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,far,value\n");
        for (f, t) in &self.tar_at {
            out.push_str(&format!("tar,{f:e},{t}\n"));
        }
        out.push_str(&format!("intra_mean_cos,,{}\n", self.intra_mean_cos));
        out.push_str(&format!("inter_mean_cos,,{}\n", self.inter_mean_cos));
        out.push_str(&format!("samples,,{}\n", self.samples));
        out.push_str(&format!("pairs,,{}\n", self.pairs));
        for (f, t) in &self.roc {
            out.push_str(&format!("roc,{f},{t}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separated_scores() {
        let s = [0.9, 0.9, 0.1, 0.1, 0.1];
        let m = [true, true, false, false, false];
        assert_eq!(tar_at_far(&s, &m, 0.01).unwrap(), 1.0);
    }

    #[test]
    fn small_hand_case() {
        let s = [0.9, 0.2, 0.8, 0.1];
        let m = [true, true, false, false];
        assert_eq!(tar_at_far(&s, &m, 0.5).unwrap(), 0.5);
        assert_eq!(tar_at_far(&s, &m, 0.4).unwrap(), 0.5);
        assert_eq!(tar_at_far(&s, &m, 0.99).unwrap(), 0.5);
    }

    #[test]
    fn ties_count_on_the_accept_side() {
        let s = [0.5, 0.5, 0.1];
        let m = [true, false, false];
        // τ = 0.5 gives impostor rate 0.5
        assert_eq!(tar_at_far(&s, &m, 0.5).unwrap(), 1.0);
        assert_eq!(tar_at_far(&s, &m, 0.4).unwrap(), 0.0);
    }

    #[test]
    fn protocol_errors() {
        assert!(matches!(tar_at_far(&[0.3], &[true], 0.1), Err(Error::Protocol(_))));
        assert!(tar_at_far(&[0.3, 0.1], &[true, false], 1.0).is_err());
    }

    #[test]
    fn roc_is_monotone() {
        let s = [0.9, 0.7, 0.7, 0.4, 0.8, 0.7, 0.3, 0.3];
        let m = [true, true, true, true, false, false, false, false];
        let r = roc(&s, &m).unwrap();
        assert_eq!(r.first().unwrap().0, 0.0);
        assert_eq!(r.last().unwrap(), &(1.0, 1.0));
        assert!(r.windows(2).all(|w| w[0].0 < w[1].0 && w[0].1 <= w[1].1));
    }

    #[test]
    fn cluster_extremes() {
        let f = Tensor::from_rows(&[[1.0, 0.0], [1.0, 0.0], [0.0, 2.0], [0.0, 1.0]]).unwrap();
        assert_eq!(cluster_stats(&f, &[0, 0, 1, 1]).unwrap(), (1.0, 0.0));
        let f = Tensor::from_rows(&[[1.0, 0.0], [1.0, 0.0], [-1.0, 0.0]]).unwrap();
        assert_eq!(cluster_stats(&f, &[0, 0, 1]).unwrap().1, -1.0);
        assert!(cluster_stats(&f, &[0, 0, 0]).is_err());
        assert!(cluster_stats(&f, &[0, 1, 2]).is_err());
    }

    #[test]
    fn pair_scores() {
        let f = Tensor::from_rows(&[[1.0, 0.0], [2.0, 0.0], [0.0, 1.0]]).unwrap();
        let pairs = all_pairs(&[0, 0, 1]);
        assert_eq!(pairs.len(), 3);
        assert_eq!(score_pairs(&f, &pairs).unwrap(), vec![1.0, 0.0, 0.0]);
        let bad = [VerificationPair {
            a: 0,
            b: 0,
            is_match: true,
        }];
        assert!(score_pairs(&f, &bad).is_err());
    }
}
