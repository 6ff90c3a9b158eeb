//! von Mises–Fisher sampling on the unit sphere `S^{d-1}`.
//!
//! Uses Wood's rejection scheme for the cosine `w = ⟨x, μ⟩` and a uniform
//! direction in the tangent space of `μ`.

use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::DetRng;

pub fn random_unit(dim: usize, rng: &mut DetRng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Draws `n` unit vectors from vMF(`mean`, `kappa`).
pub fn sample_vmf(mean: &[f64], kappa: f64, n: usize, rng: &mut DetRng) -> Result<Vec<Vec<f64>>> {
    if !(kappa > 0.0) || !kappa.is_finite() {
        return Err(Error::domain(
            "sample_vmf",
            format!("kappa must be positive, got {kappa}"),
        ));
    }
    let d = mean.len();
    let norm = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
    if d < 2 || (norm - 1.0).abs() > 1e-9 {
        return Err(Error::domain("sample_vmf", "mean must be a unit vector with d ≥ 2"));
    }
    let dm1 = (d - 1) as f64;
    // b written to avoid cancellation at large kappa
    let b = dm1 / (2.0 * kappa + (4.0 * kappa * kappa + dm1 * dm1).sqrt());
    let x0 = (1.0 - b) / (1.0 + b);
    let c = kappa * x0 + dm1 * (1.0 - x0 * x0).ln();
    let beta = Beta::new(dm1 / 2.0, dm1 / 2.0).map_err(|e| Error::domain("sample_vmf", e.to_string()))?;

    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let w = loop {
            let z: f64 = beta.sample(rng);
            let w = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z);
            let u: f64 = rng.random();
            if kappa * w + dm1 * (1.0 - x0 * w).ln() - c >= u.ln() {
                break w;
            }
        };
        // tangent direction orthogonal to the mean
        let v = loop {
            let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let proj: f64 = v.iter().zip(mean).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(mean).for_each(|(a, m)| *a -= proj * m);
            let vn = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if vn > 1e-12 {
                break v.into_iter().map(|x| x / vn).collect::<Vec<_>>();
            }
        };
        let r = (1.0 - w * w).max(0.0).sqrt();
        let mut x: Vec<f64> = mean.iter().zip(&v).map(|(m, t)| w * m + r * t).collect();
        let xn = x.iter().map(|t| t * t).sum::<f64>().sqrt();
        x.iter_mut().for_each(|t| *t /= xn);
        out.push(x);
    }
    Ok(out)
}
