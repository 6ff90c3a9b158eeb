//! Finite-difference checks of every differentiable component, each run
//! over a range of random seeds.

use rand::Rng;

use crate::encoders::{FeatureEncoder, MlpConfig, MlpEncoder, VitConfig, VitEncoder};
use crate::engine::stage::{loss_alignment, loss_refinement, loss_stabilization, ClassifierBinding};
use crate::error::{Error, Result};
use crate::losses::{
    angular_loss, cosface_loss, cosine_logits, softmax_ce_loss, unified_margin_loss, CosineLogits, MarginSpec,
};
use crate::ncs::{self, SampleSet};
use crate::prototypes::PrototypeBank;
use crate::rng::{self, DetRng};
use crate::tensor::{finite_difference_check_multi, Graph, Tensor, Var};

pub const MODULES: [&str; 4] = ["tensor", "losses", "engine", "encoders"];

pub const LOSS_TOLERANCE: f64 = 1e-4;
pub const ENCODER_TOLERANCE: f64 = 1e-3;

const EPS: f64 = 1e-6;
const BATCH: usize = 3;
const DIM: usize = 5;
const CLASSES: usize = 6;
const SCALE: f64 = 64.0;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckOutcome {
    pub module: &'static str,
    pub name: &'static str,
    pub seeds: u64,
    pub worst: f64,
    pub tolerance: f64,
}

impl GradCheckOutcome {
    pub fn passed(&self) -> bool {
        self.worst <= self.tolerance
    }
}

type Check = fn(&mut DetRng) -> Result<f64>;

fn normal(shape: &[usize], rng: &mut DetRng) -> Tensor {
    crate::encoders::normal_tensor(shape, 1.0, rng)
}

fn labels(rng: &mut DetRng) -> Vec<usize> {
    (0..BATCH).map(|_| rng.random_range(0..CLASSES)).collect()
}

/// Unit features and unit classifier columns built in-graph from raw leaves.
fn unit_logits(g: &mut Graph, x: Var, w: Var, labels: &[usize]) -> Result<CosineLogits> {
    let f = g.l2_normalize_rows(x)?;
    let t = g.transpose(w)?;
    let t = g.l2_normalize_rows(t)?;
    let c = g.transpose(t)?;
    cosine_logits(g, f, c, labels.to_vec())
}

fn margin_check(rng: &mut DetRng, spec: MarginSpec) -> Result<f64> {
    let y = labels(rng);
    let inputs = [normal(&[BATCH, DIM], rng), normal(&[DIM, CLASSES], rng)];
    finite_difference_check_multi(
        |g, v| {
            let l = unit_logits(g, v[0], v[1], &y)?;
            unified_margin_loss(g, &l, spec)
        },
        &inputs,
        EPS,
    )
}

fn check_softmax(rng: &mut DetRng) -> Result<f64> {
    let y = labels(rng);
    let inputs = [normal(&[BATCH, DIM], rng), normal(&[DIM, CLASSES], rng)];
    finite_difference_check_multi(
        |g, v| {
            let z = g.matmul(v[0], v[1])?;
            softmax_ce_loss(g, z, &y)
        },
        &inputs,
        EPS,
    )
}

fn check_angular(rng: &mut DetRng) -> Result<f64> {
    let y = labels(rng);
    let inputs = [normal(&[BATCH, DIM], rng), normal(&[DIM, CLASSES], rng)];
    finite_difference_check_multi(
        |g, v| {
            let l = unit_logits(g, v[0], v[1], &y)?;
            angular_loss(g, &l, SCALE)
        },
        &inputs,
        EPS,
    )
}

fn check_cosface(rng: &mut DetRng) -> Result<f64> {
    let y = labels(rng);
    let inputs = [normal(&[BATCH, DIM], rng), normal(&[DIM, CLASSES], rng)];
    finite_difference_check_multi(
        |g, v| {
            let l = unit_logits(g, v[0], v[1], &y)?;
            cosface_loss(g, &l, SCALE, 0.4)
        },
        &inputs,
        EPS,
    )
}

fn check_arcface(rng: &mut DetRng) -> Result<f64> {
    margin_check(rng, MarginSpec::arcface(SCALE, 0.5))
}

fn check_sphereface(rng: &mut DetRng) -> Result<f64> {
    margin_check(rng, MarginSpec::sphereface(SCALE, 1.35))
}

fn check_combined_margin(rng: &mut DetRng) -> Result<f64> {
    margin_check(rng, MarginSpec::new(SCALE, 1.1, 0.2, 0.1)?)
}

struct StageFixture {
    labels: Vec<usize>,
    set: SampleSet,
    protos: PrototypeBank,
    inputs: [Tensor; 2],
}

fn stage_fixture(rng: &mut DetRng, ratio: f64) -> Result<StageFixture> {
    let labels = labels(rng);
    let set = ncs::sample(CLASSES, ratio, &labels, rng)?;
    let mut protos = PrototypeBank::new(DIM, CLASSES);
    for c in 0..CLASSES {
        let e = crate::synth::random_unit(DIM, rng);
        protos.update(c, &e)?;
    }
    let inputs = [normal(&[BATCH, DIM], rng), normal(&[DIM, set.len()], rng)];
    Ok(StageFixture {
        labels,
        set,
        protos,
        inputs,
    })
}

/// Binds `w` (a raw `d×K` leaf) as the classifier of `set`, normalized.
fn binding(g: &mut Graph, w: Var, set: &SampleSet) -> Result<ClassifierBinding> {
    let t = g.transpose(w)?;
    let t = g.l2_normalize_rows(t)?;
    let var = g.transpose(t)?;
    Ok(ClassifierBinding { var, set: set.clone() })
}

fn check_alignment(rng: &mut DetRng) -> Result<f64> {
    let fx = stage_fixture(rng, 0.5)?;
    finite_difference_check_multi(
        |g, v| {
            let f = g.l2_normalize_rows(v[0])?;
            let b = binding(g, v[1], &fx.set)?;
            loss_alignment(g, f, &b, &fx.labels, SCALE, 0.4)
        },
        &fx.inputs,
        EPS,
    )
}

fn check_stabilization(rng: &mut DetRng) -> Result<f64> {
    let fx = stage_fixture(rng, 0.5)?;
    finite_difference_check_multi(
        |g, v| {
            let f = g.l2_normalize_rows(v[0])?;
            let b = binding(g, v[1], &fx.set)?;
            loss_stabilization(g, f, &b, &fx.protos, &fx.labels, SCALE, 0.4, 0.4)
        },
        &fx.inputs,
        EPS,
    )
}

fn check_refinement(rng: &mut DetRng) -> Result<f64> {
    let fx = stage_fixture(rng, 1.0)?;
    finite_difference_check_multi(
        |g, v| {
            let f = g.l2_normalize_rows(v[0])?;
            let b = binding(g, v[1], &fx.set)?;
            loss_refinement(g, f, &b, &fx.protos, &fx.labels, SCALE, 0.4, 0.4)
        },
        &fx.inputs,
        EPS,
    )
}

/// A composite of the primitive operators not covered by the losses.
fn check_primitives(rng: &mut DetRng) -> Result<f64> {
    let inputs = [
        normal(&[3, 4], rng),
        normal(&[4, 4], rng),
        normal(&[4], rng),
        normal(&[4], rng),
        normal(&[3, 4], rng),
    ];
    let probe = normal(&[3, 6], rng);
    finite_difference_check_multi(
        |g, v| {
            let h = g.matmul(v[0], v[1])?;
            let h = g.layer_norm(h, v[2], v[3])?;
            let a = g.gelu(h);
            let b = g.elu(v[4]);
            let ab = g.mul(a, b)?;
            let e = g.exp(ab);
            let one = g.constant(Tensor::scalar(1.0));
            let e = g.add(e, one)?;
            let l = g.log(e)?;
            let s = g.row_softmax(l)?;
            let n = g.l2_normalize_rows(b)?;
            let c = g.concat_cols(&[s, n])?;
            let c = g.slice_cols(c, 1, 7)?;
            let p = g.constant(probe.clone());
            let c = g.mul(c, p)?;
            let c = g.scale(c, 0.5);
            let m = g.reduce_mean(c);
            let t = g.transpose(v[0])?;
            let t = g.reduce_sum(t);
            let t = g.scale(t, 1e-2);
            g.add(m, t)
        },
        &inputs,
        EPS,
    )
}

fn encoder_probe_check<E: FeatureEncoder>(enc: &E, x: &Tensor, probe: &Tensor) -> Result<f64> {
    finite_difference_check_multi(
        |g, vars| {
            let y = enc.forward(g, vars, x)?;
            let c = g.constant(probe.clone());
            let p = g.mul(y, c)?;
            Ok(g.reduce_sum(p))
        },
        enc.params(),
        EPS,
    )
}

fn check_mlp(rng: &mut DetRng) -> Result<f64> {
    let cfg = MlpConfig {
        input_dim: 4,
        hidden: 6,
        output_dim: 3,
    };
    let enc = MlpEncoder::new(cfg, 0.7, rng)?;
    let x = normal(&[2, 4], rng);
    let probe = normal(&[2, 3], rng);
    encoder_probe_check(&enc, &x, &probe)
}

/// Two-layer ViT on 4×4 single-channel images.
fn check_vit(rng: &mut DetRng) -> Result<f64> {
    let cfg = VitConfig {
        image_width: 4,
        patch_stride: 2,
        channels: 1,
        token_dim: 4,
        layers: 2,
        heads: 2,
        ffn_hidden: 6,
        head_hidden: 4,
        output_dim: 3,
    };
    let enc = VitEncoder::new(cfg, 0.5, rng)?;
    let x = normal(&[2, cfg.input_len()], rng);
    let probe = normal(&[2, 3], rng);
    encoder_probe_check(&enc, &x, &probe)
}

fn cases() -> Vec<(&'static str, &'static str, Check, f64)> {
    vec![
        ("tensor", "primitives", check_primitives as Check, LOSS_TOLERANCE),
        ("losses", "softmax_ce", check_softmax, LOSS_TOLERANCE),
        ("losses", "normalized_softmax", check_angular, LOSS_TOLERANCE),
        ("losses", "cosface", check_cosface, LOSS_TOLERANCE),
        ("losses", "arcface", check_arcface, LOSS_TOLERANCE),
        ("losses", "sphereface", check_sphereface, LOSS_TOLERANCE),
        ("losses", "combined_margin", check_combined_margin, LOSS_TOLERANCE),
        ("engine", "alignment", check_alignment, LOSS_TOLERANCE),
        ("engine", "stabilization", check_stabilization, LOSS_TOLERANCE),
        ("engine", "refinement", check_refinement, LOSS_TOLERANCE),
        ("encoders", "mlp", check_mlp, ENCODER_TOLERANCE),
        ("encoders", "vit", check_vit, ENCODER_TOLERANCE),
    ]
}

/// Runs every check of `module` (or all modules) for seeds `0..seeds`,
/// reporting the worst relative error per check.
pub fn run_grad_checks(module: Option<&str>, seeds: u64) -> Result<Vec<GradCheckOutcome>> {
    if let Some(m) = module {
        if !MODULES.contains(&m) {
            return Err(Error::Config(format!(
                "unknown module `{m}` (expected one of {})",
                MODULES.join(", ")
            )));
        }
    }
    let selected: Vec<_> = cases()
        .into_iter()
        .filter(|c| module.is_none_or(|m| m == c.0))
        .collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = selected
            .iter()
            .map(|&(module, name, check, tolerance)| {
                scope.spawn(move || -> Result<GradCheckOutcome> {
                    let mut worst: f64 = 0.0;
                    for seed in 0..seeds {
                        let mut rng = rng::derived(seed, 0x6772_6164);
                        worst = worst.max(check(&mut rng)?);
                    }
                    Ok(GradCheckOutcome {
                        module,
                        name,
                        seeds,
                        worst,
                        tolerance,
                    })
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("grad check thread panicked"))
            .collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_check_passes_on_a_few_seeds() {
        for out in run_grad_checks(None, 3).unwrap() {
            assert!(out.passed(), "{out:?}");
        }
    }

    #[test]
    fn unknown_module_is_rejected() {
        assert!(run_grad_checks(Some("nope"), 1).is_err());
    }
}
