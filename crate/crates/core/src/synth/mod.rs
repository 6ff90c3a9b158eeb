//! Deterministic synthetic identity data.
//!
//! Two generators: labeled clusters on the unit sphere (vMF or
//! Gaussian-then-normalize), and small procedural images built from one
//! smooth template per identity plus jitter and noise. Every identity draws
//! from its own derived ChaCha8 stream, so output depends only on the seed.

mod vmf;

pub use vmf::{random_unit, sample_vmf};

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Labeled rows of inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    /// Stable sample ids, unique across the splits of one generated set.
    pub ids: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    /// Rows at `indices`, in that order.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let dim = self.input_dim();
        let mut data = Vec::with_capacity(indices.len() * dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.inputs.row(i));
            labels.push(self.labels[i]);
        }
        let t = Tensor::matrix(indices.len(), dim, data).expect("batch shape");
        (t, labels)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClusterModel {
    Vmf,
    /// `normalize(μ + N(0, 1/κ · I))`, a cheaper approximation.
    Gaussian,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SphereClusterSpec {
    pub classes: usize,
    pub dim: usize,
    /// Concentration shared by every identity.
    pub kappa: f64,
    pub samples_per_class: usize,
    pub seed: u64,
    pub model: ClusterModel,
}

impl SphereClusterSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.dim < 2 || !(self.kappa > 0.0) || self.samples_per_class == 0 {
            return Err(Error::Config(format!("invalid sphere cluster spec {self:?}")));
        }
        Ok(())
    }
}

/// Class mean directions followed by per-identity samples, identity-major.
pub fn gen_sphere_dataset(spec: &SphereClusterSpec) -> Result<(Dataset, Vec<Vec<f64>>)> {
    spec.validate()?;
    let mut mean_rng = rng::derived(spec.seed, 0);
    let means: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| random_unit(spec.dim, &mut mean_rng))
        .collect();
    let mut data = Vec::with_capacity(spec.classes * spec.samples_per_class * spec.dim);
    let mut labels = Vec::new();
    for (c, mean) in means.iter().enumerate() {
        let mut r = rng::derived(spec.seed, 1 + c as u64);
        let samples = match spec.model {
            ClusterModel::Vmf => sample_vmf(mean, spec.kappa, spec.samples_per_class, &mut r)?,
            ClusterModel::Gaussian => {
                let sd = (1.0 / spec.kappa).sqrt();
                (0..spec.samples_per_class)
                    .map(|_| {
                        let mut x: Vec<f64> = mean
                            .iter()
                            .map(|m| m + sd * r.sample::<f64, _>(StandardNormal))
                            .collect();
                        let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                        x.iter_mut().for_each(|v| *v /= n);
                        x
                    })
                    .collect()
            }
        };
        for s in samples {
            data.extend(s);
            labels.push(c);
        }
    }
    let n = labels.len();
    let ds = Dataset {
        inputs: Tensor::matrix(n, spec.dim, data)?,
        labels,
        ids: (0..n).collect(),
        classes: spec.classes,
    };
    Ok((ds, means))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageClassSpec {
    pub classes: usize,
    pub width: usize,
    pub channels: usize,
    pub train_per_class: usize,
    pub eval_per_class: usize,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
    /// Maximum absolute translation, in pixels, along each axis.
    pub jitter: usize,
    pub seed: u64,
}

impl ImageClassSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2
            || self.width < 2
            || self.channels == 0
            || self.train_per_class == 0
            || !(self.noise >= 0.0)
            || self.jitter >= self.width
        {
            return Err(Error::Config(format!("invalid image class spec {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageDataset {
    pub train: Dataset,
    pub eval: Dataset,
    pub templates: Vec<Vec<f64>>,
}

const TEMPLATE_WAVES: usize = 4;

/// Smooth random pattern in `[0, 1]`: a few low-frequency plane waves.
fn template(width: usize, channels: usize, r: &mut rng::DetRng) -> Vec<f64> {
    let mut waves = Vec::new();
    for _ in 0..channels * TEMPLATE_WAVES {
        let fx: f64 = r.random_range(-2.0..2.0);
        let fy: f64 = r.random_range(-2.0..2.0);
        let phase: f64 = r.random_range(0.0..std::f64::consts::TAU);
        let amp: f64 = r.random_range(0.3..1.0);
        waves.push((fx, fy, phase, amp));
    }
    let mut img = vec![0.0; width * width * channels];
    for y in 0..width {
        for x in 0..width {
            for c in 0..channels {
                let (u, v) = (x as f64 / width as f64, y as f64 / width as f64);
                let mut s = 0.0;
                for &(fx, fy, ph, a) in &waves[c * TEMPLATE_WAVES..(c + 1) * TEMPLATE_WAVES] {
                    s += a * (std::f64::consts::TAU * (fx * u + fy * v) + ph).cos();
                }
                img[(y * width + x) * channels + c] = s;
            }
        }
    }
    let (lo, hi) = img.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    let span = (hi - lo).max(1e-12);
    img.iter_mut().for_each(|v| *v = (*v - lo) / span);
    img
}

/// Template translated by `(dy, dx)` with edge replication, plus noise.
fn render(t: &[f64], spec: &ImageClassSpec, r: &mut rng::DetRng) -> Vec<f64> {
    let (w, ch) = (spec.width, spec.channels);
    let j = spec.jitter as i64;
    let (dy, dx) = if j > 0 {
        (r.random_range(-j..=j), r.random_range(-j..=j))
    } else {
        (0, 0)
    };
    let noise = if spec.noise > 0.0 {
        Some(Normal::new(0.0, spec.noise).expect("finite noise"))
    } else {
        None
    };
    let mut out = vec![0.0; w * w * ch];
    for y in 0..w {
        for x in 0..w {
            let sy = (y as i64 - dy).clamp(0, w as i64 - 1) as usize;
            let sx = (x as i64 - dx).clamp(0, w as i64 - 1) as usize;
            for c in 0..ch {
                let mut v = t[(sy * w + sx) * ch + c];
                if let Some(n) = &noise {
                    v += n.sample(r);
                }
                out[(y * w + x) * ch + c] = v.clamp(0.0, 1.0);
            }
        }
    }
    out
}

/// Identity-stratified train/eval images. Sample `k` of identity `c` has id
/// `c·(train+eval) + k`; the first `train_per_class` go to the train split.
pub fn gen_image_dataset(spec: &ImageClassSpec) -> Result<ImageDataset> {
    spec.validate()?;
    let dim = spec.width * spec.width * spec.channels;
    let per = spec.train_per_class + spec.eval_per_class;
    let mut templates = Vec::with_capacity(spec.classes);
    let (mut tr, mut ev) = (
        (Vec::new(), Vec::new(), Vec::new()),
        (Vec::new(), Vec::new(), Vec::new()),
    );
    for c in 0..spec.classes {
        let mut r = rng::derived(spec.seed, 1 + c as u64);
        let t = template(spec.width, spec.channels, &mut r);
        for k in 0..per {
            let img = render(&t, spec, &mut r);
            let split = if k < spec.train_per_class { &mut tr } else { &mut ev };
            split.0.extend(img);
            split.1.push(c);
            split.2.push(c * per + k);
        }
        templates.push(t);
    }
    let make = |(data, labels, ids): (Vec<f64>, Vec<usize>, Vec<usize>)| -> Result<Dataset> {
        let n = labels.len();
        let inputs = if n == 0 {
            Tensor::zeros(&[1, dim])
        } else {
            Tensor::matrix(n, dim, data)?
        };
        Ok(Dataset {
            inputs,
            labels,
            ids,
            classes: spec.classes,
        })
    };
    Ok(ImageDataset {
        train: make(tr)?,
        eval: make(ev)?,
        templates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sphere(kappa: f64, seed: u64) -> SphereClusterSpec {
        SphereClusterSpec {
            classes: 4,
            dim: 16,
            kappa,
            samples_per_class: 50,
            seed,
            model: ClusterModel::Vmf,
        }
    }

    #[test]
    fn sphere_dataset_is_deterministic_and_balanced() {
        let (a, _) = gen_sphere_dataset(&sphere(20.0, 3)).unwrap();
        let (b, _) = gen_sphere_dataset(&sphere(20.0, 3)).unwrap();
        assert_eq!(a, b);
        for c in 0..4 {
            assert_eq!(a.labels.iter().filter(|&&l| l == c).count(), 50);
        }
        let (c, _) = gen_sphere_dataset(&sphere(20.0, 4)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn gaussian_model_rows_are_unit() {
        let spec = SphereClusterSpec {
            model: ClusterModel::Gaussian,
            ..sphere(10.0, 1)
        };
        let (d, _) = gen_sphere_dataset(&spec).unwrap();
        for i in 0..d.len() {
            let n: f64 = d.inputs.row(i).iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    fn images(noise: f64, jitter: usize) -> ImageClassSpec {
        ImageClassSpec {
            classes: 3,
            width: 8,
            channels: 1,
            train_per_class: 4,
            eval_per_class: 2,
            noise,
            jitter,
            seed: 5,
        }
    }

    #[test]
    fn noiseless_images_repeat_the_template() {
        let d = gen_image_dataset(&images(0.0, 0)).unwrap();
        for i in 0..d.train.len() {
            let c = d.train.labels[i];
            assert_eq!(d.train.inputs.row(i), d.templates[c].as_slice());
        }
    }

    #[test]
    fn splits_are_disjoint_and_clamped() {
        let d = gen_image_dataset(&images(0.4, 2)).unwrap();
        assert_eq!(d.train.len(), 12);
        assert_eq!(d.eval.len(), 6);
        assert!(d.train.ids.iter().all(|id| !d.eval.ids.contains(id)));
        for ds in [&d.train, &d.eval] {
            assert!(ds.inputs.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert_eq!(d, gen_image_dataset(&images(0.4, 2)).unwrap());
    }
}
