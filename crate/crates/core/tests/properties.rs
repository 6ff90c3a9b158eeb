use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::Rng;

use pco_core::eval::{cluster_stats, roc, tar_at_far};
use pco_core::losses::{per_sample_margin_losses, unified_margin_loss, CosineLogits, MarginSpec};
use pco_core::ncs;
use pco_core::prototypes::PrototypeBank;
use pco_core::rng;
use pco_core::synth::random_unit;
use pco_core::tensor::{Graph, Tensor};

/// Rows of cosines in `[-1, 1]` with one label per row.
fn cos_batch(max_rows: usize, max_cols: usize) -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<usize>)> {
    (1..=max_rows, 2..=max_cols).prop_flat_map(|(b, k)| {
        (
            prop::collection::vec(prop::collection::vec(-1.0f64..1.0, k), b),
            prop::collection::vec(0..k, b),
        )
    })
}

fn losses(rows: &[Vec<f64>], labels: &[usize], spec: MarginSpec) -> Vec<f64> {
    per_sample_margin_losses(&Tensor::from_rows(rows).unwrap(), labels, spec).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn larger_cosine_margin_never_lowers_loss(
        (rows, labels) in cos_batch(6, 8),
        s in 1.0f64..64.0,
        m in 0.0f64..0.8,
        dm in 0.0f64..0.5,
    ) {
        let lo = losses(&rows, &labels, MarginSpec::cosface(s, m));
        let hi = losses(&rows, &labels, MarginSpec::cosface(s, m + dm));
        for (a, b) in lo.iter().zip(&hi) {
            prop_assert!(b >= a, "{b} < {a}");
        }
    }

    #[test]
    fn extra_negative_never_lowers_loss(
        (rows, labels) in cos_batch(6, 8),
        extra in prop::collection::vec(-1.0f64..1.0, 6),
        s in 1.0f64..64.0,
        m1 in 1.0f64..2.0,
        m2 in 0.0f64..0.5,
        m3 in 0.0f64..0.4,
    ) {
        let spec = MarginSpec::new(s, m1, m2, m3).unwrap();
        let wider: Vec<Vec<f64>> = rows.iter().zip(&extra).map(|(r, &e)| {
            let mut r = r.clone();
            r.push(e);
            r
        }).collect();
        let base = losses(&rows, &labels, spec);
        let more = losses(&wider, &labels, spec);
        for (a, b) in base.iter().zip(&more) {
            prop_assert!(b >= a, "{b} < {a}");
        }
    }

    #[test]
    fn negative_column_order_is_irrelevant(
        (rows, labels) in cos_batch(6, 8),
        s in 1.0f64..64.0,
        m3 in 0.0f64..0.5,
        shuffle_seed in any::<u64>(),
    ) {
        let k = rows[0].len();
        let mut perm: Vec<usize> = (0..k).collect();
        let mut r = rng::seeded(shuffle_seed);
        for i in (1..k).rev() {
            perm.swap(i, r.random_range(0..=i));
        }
        // column j of the permuted batch is column perm[j] of the original
        let permuted: Vec<Vec<f64>> = rows.iter().map(|row| perm.iter().map(|&p| row[p]).collect()).collect();
        let new_labels: Vec<usize> = labels.iter().map(|&y| perm.iter().position(|&p| p == y).unwrap()).collect();
        let spec = MarginSpec::cosface(s, m3);
        let a = losses(&rows, &labels, spec);
        let b = losses(&permuted, &new_labels, spec);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
        }
    }

    #[test]
    fn loss_gradient_signs(
        (mut rows, labels) in cos_batch(5, 6),
        s in 1.0f64..64.0,
        m2 in 0.0f64..0.5,
        m3 in 0.0f64..0.4,
    ) {
        // keep θ_y + m2 inside [0, π] so the angular margin stays monotone
        for (row, &y) in rows.iter_mut().zip(&labels) {
            row[y] = row[y].max(-0.5);
        }
        let mut g = Graph::new();
        let values = g.param(Tensor::from_rows(&rows).unwrap());
        let logits = CosineLogits { values, label_column: labels.clone() };
        let loss = unified_margin_loss(&mut g, &logits, MarginSpec::new(s, 1.0, m2, m3).unwrap()).unwrap();
        g.backward(loss).unwrap();
        let grad = g.grad(values).unwrap();
        for (i, &y) in labels.iter().enumerate() {
            for j in 0..rows[0].len() {
                let d = grad.at(i, j);
                if j == y {
                    prop_assert!(d <= 0.0, "positive partial {d}");
                } else {
                    prop_assert!(d >= 0.0, "negative partial {d}");
                }
            }
        }
    }

    #[test]
    fn sampled_loss_is_bounded_by_full_loss(
        classes in 4usize..40,
        ratio in 0.05f64..1.0,
        batch in 1usize..8,
        seed in any::<u64>(),
        s in 1.0f64..64.0,
        m in 0.0f64..0.5,
    ) {
        let mut r = rng::seeded(seed);
        let labels: Vec<usize> = (0..batch).map(|_| r.random_range(0..classes)).collect();
        let rows: Vec<Vec<f64>> = (0..batch).map(|_| (0..classes).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
        let set = ncs::sample(classes, ratio, &labels, &mut r).unwrap();

        let ids = set.global_ids();
        prop_assert!(ids.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(labels.iter().all(|&y| set.contains(y)));
        let distinct = { let mut l = labels.clone(); l.sort(); l.dedup(); l.len() };
        prop_assert_eq!(ids.len(), ncs::sampled_count(classes, ratio).max(distinct));

        let sub: Vec<Vec<f64>> = rows.iter().map(|row| ids.iter().map(|&c| row[c]).collect()).collect();
        let cols = set.label_columns(&labels).unwrap();
        let spec = MarginSpec::cosface(s, m);
        let part = losses(&sub, &cols, spec);
        let full = losses(&rows, &labels, spec);
        for (a, b) in part.iter().zip(&full) {
            prop_assert!(a <= b, "{a} > {b}");
        }
    }

    #[test]
    fn sampling_is_reproducible(classes in 2usize..100, ratio in 0.01f64..1.0, seed in any::<u64>()) {
        let labels = [0, classes - 1];
        let a = ncs::sample(classes, ratio, &labels, &mut rng::seeded(seed)).unwrap();
        let b = ncs::sample(classes, ratio, &labels, &mut rng::seeded(seed)).unwrap();
        prop_assert_eq!(a.global_ids(), b.global_ids());
    }

    #[test]
    fn prototypes_stay_unit(
        dim in 2usize..12,
        updates in prop::collection::vec((0usize..4, any::<u64>()), 1..60),
    ) {
        let mut bank = PrototypeBank::new(dim, 4);
        for (class, seed) in updates {
            let x = random_unit(dim, &mut rng::seeded(seed));
            bank.update(class, &x).unwrap();
        }
        for c in 0..4 {
            if let Ok(e) = bank.prototype(c) {
                let n = e.iter().map(|v| v * v).sum::<f64>().sqrt();
                prop_assert!((n - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn softmax_and_normalize_rows(rows in prop::collection::vec(prop::collection::vec(-30.0f64..30.0, 1..7), 1..5)) {
        let k = rows[0].len();
        let rows: Vec<Vec<f64>> = rows.into_iter().map(|mut r| { r.resize(k, 0.5); r }).collect();
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&rows).unwrap());
        let sm = g.row_softmax(x).unwrap();
        let t = g.value(sm);
        for i in 0..t.rows() {
            let row = t.row(i);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        if rows.iter().all(|r| r.iter().map(|v| v * v).sum::<f64>() > 1e-6) {
            let n = g.l2_normalize_rows(x).unwrap();
            let t = g.value(n);
            for i in 0..t.rows() {
                prop_assert!((t.row(i).iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() <= 1e-12);
            }
        }
    }
}

/// TAR at the smallest impostor score whose impostor accept rate fits the
/// budget, by exhaustive counting.
fn brute_tar(gen: &[f64], imp: &[f64], far: f64) -> f64 {
    let rate = |t: f64| imp.iter().filter(|&&v| v >= t).count() as f64 / imp.len() as f64;
    let tau = imp
        .iter()
        .copied()
        .filter(|&t| rate(t) <= far)
        .fold(f64::INFINITY, f64::min);
    let accepted = if tau.is_finite() {
        gen.iter().filter(|&&g| g >= tau).count()
    } else {
        let top = imp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        gen.iter().filter(|&&g| g > top).count()
    };
    accepted as f64 / gen.len() as f64
}

fn protocol() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    // coarse grid so ties are common
    prop::collection::vec(((0i32..20).prop_map(|v| v as f64 / 10.0 - 1.0), any::<bool>()), 2..80)
        .prop_filter("needs both kinds", |v| v.iter().any(|p| p.1) && v.iter().any(|p| !p.1))
        .prop_map(|v| v.into_iter().unzip())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn tar_matches_exhaustive_sweep((scores, is_match) in protocol(), far in 0.001f64..0.999) {
        let gen: Vec<f64> = scores.iter().zip(&is_match).filter(|p| *p.1).map(|p| *p.0).collect();
        let imp: Vec<f64> = scores.iter().zip(&is_match).filter(|p| !*p.1).map(|p| *p.0).collect();
        prop_assert_eq!(tar_at_far(&scores, &is_match, far).unwrap(), brute_tar(&gen, &imp, far));
    }

    #[test]
    fn tar_is_monotone_in_far((scores, is_match) in protocol(), a in 0.001f64..0.999, b in 0.001f64..0.999) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(tar_at_far(&scores, &is_match, lo).unwrap() <= tar_at_far(&scores, &is_match, hi).unwrap());
    }

    #[test]
    fn roc_is_a_monotone_step((scores, is_match) in protocol()) {
        let curve = roc(&scores, &is_match).unwrap();
        prop_assert_eq!(curve[0].0, 0.0);
        prop_assert_eq!(curve.last().unwrap().0, 1.0);
        for w in curve.windows(2) {
            prop_assert!(w[1].0 > w[0].0 && w[1].1 >= w[0].1);
        }
    }

    #[test]
    fn cluster_stats_ignore_rotation(dim in 2usize..10, n in 4usize..30, seed in any::<u64>()) {
        let mut r = rng::seeded(seed);
        let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let rows: Vec<Vec<f64>> = (0..n).map(|_| random_unit(dim, &mut r)).collect();
        let q = DMatrix::<f64>::from_fn(dim, dim, |_, _| r.random_range(-1.0..1.0)).qr().q();
        let rotated: Vec<Vec<f64>> = rows.iter().map(|x| {
            (0..dim).map(|i| (0..dim).map(|j| q[(i, j)] * x[j]).sum()).collect()
        }).collect();
        let (a_intra, a_inter) = cluster_stats(&Tensor::from_rows(&rows).unwrap(), &labels).unwrap();
        let (b_intra, b_inter) = cluster_stats(&Tensor::from_rows(&rotated).unwrap(), &labels).unwrap();
        prop_assert!((a_intra - b_intra).abs() <= 1e-9);
        prop_assert!((a_inter - b_inter).abs() <= 1e-9);
    }
}
