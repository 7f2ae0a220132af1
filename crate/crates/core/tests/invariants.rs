use csaw::imageops::{inverse, jigsaw_array, sample_permutation};
use csaw::losses::{self, DmMode, LossWeights};
use csaw::protocols::harmonic_mean;
use csaw::vatp::{self, VatParams};
use ndarray::{Array1, Array2, Array3};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn grid() -> impl Strategy<Value = usize> {
    prop::sample::select(vec![1usize, 2, 4, 7, 14])
}

fn image() -> impl Strategy<Value = Array3<f64>> {
    prop::collection::vec(-3.0f64..3.0, 3 * 28 * 28).prop_map(|v| Array3::from_shape_vec((3, 28, 28), v).unwrap())
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(-2.0f64..2.0, rows * cols).prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

fn sorted(x: &Array3<f64>) -> Vec<u64> {
    let mut v: Vec<u64> = x.iter().map(|f| f.to_bits()).collect();
    v.sort_unstable();
    v
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn jigsaw_inverse_restores_and_preserves_pixels(x in image(), g in grid(), seed in any::<u64>()) {
        let p = sample_permutation(g, seed).unwrap();
        let y = jigsaw_array(x.view(), &p).unwrap();
        prop_assert_eq!(sorted(&y), sorted(&x));
        prop_assert_eq!(jigsaw_array(y.view(), &inverse(&p)).unwrap(), x);
    }

    #[test]
    fn jigsaw_composes(x in image(), g in grid(), s1 in any::<u64>(), s2 in any::<u64>()) {
        let (p, q) = (sample_permutation(g, s1).unwrap(), sample_permutation(g, s2).unwrap());
        let twice = jigsaw_array(jigsaw_array(x.view(), &p).unwrap().view(), &q).unwrap();
        prop_assert_eq!(twice, jigsaw_array(x.view(), &q.compose(&p).unwrap()).unwrap());
    }

    #[test]
    fn attention_mask_stays_in_unit_interval(
        style in prop::collection::vec(-10.0f64..10.0, 16),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = VatParams::init(&[8], 16, 4, 0.02, &mut rng).unwrap();
        let s = Array1::from(style);
        let a = p.mask(s.view());
        prop_assert!(a.iter().all(|v| *v > 0.0 && *v < 1.0));
        let token = vatp::apply_attention(a.view(), s.view());
        for (t, s) in token.iter().zip(s.iter()) {
            prop_assert!((t - s) * s >= 0.0);
            prop_assert!((t - s).abs() <= s.abs());
        }
    }

    #[test]
    fn barlow_twins_ignores_joint_row_order(z1 in matrix(6, 3), z2 in matrix(6, 3), seed in any::<u64>()) {
        let mut order: Vec<usize> = (0..6).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut ChaCha8Rng::seed_from_u64(seed));
        let pick = |z: &Array2<f64>| z.select(ndarray::Axis(0), &order);
        match losses::barlow_twins(z1.view(), z2.view(), 5.1e-3) {
            Ok(l) => {
                prop_assert!(l >= 0.0);
                let shuffled = losses::barlow_twins(pick(&z1).view(), pick(&z2).view(), 5.1e-3).unwrap();
                prop_assert!((l - shuffled).abs() <= 1e-9 * l.max(1.0));
                // the loss compares the two views symmetrically
                let swapped = losses::barlow_twins(z2.view(), z1.view(), 5.1e-3).unwrap();
                prop_assert!((l - swapped).abs() <= 1e-9 * l.max(1.0));
            }
            Err(e) => prop_assert!(matches!(e, csaw::CsawError::ZeroVariance(_))),
        }
    }

    #[test]
    fn barlow_twins_ignores_a_common_dimension_order(z1 in matrix(6, 4), z2 in matrix(6, 4), seed in any::<u64>()) {
        let mut dims: Vec<usize> = (0..4).collect();
        rand::seq::SliceRandom::shuffle(dims.as_mut_slice(), &mut ChaCha8Rng::seed_from_u64(seed));
        let pick = |z: &Array2<f64>| z.select(ndarray::Axis(1), &dims);
        if let Ok(l) = losses::barlow_twins(z1.view(), z2.view(), 5.1e-3) {
            let permuted = losses::barlow_twins(pick(&z1).view(), pick(&z2).view(), 5.1e-3).unwrap();
            prop_assert!((l - permuted).abs() <= 1e-9 * l.max(1.0));
        }
    }

    #[test]
    fn barlow_twins_is_scale_and_shift_invariant(z1 in matrix(5, 4), z2 in matrix(5, 4), a in 0.1f64..10.0, b in -5.0f64..5.0) {
        if let Ok(l) = losses::barlow_twins(z1.view(), z2.view(), 0.1) {
            let moved = z1.mapv(|v| a * v + b);
            let l2 = losses::barlow_twins(moved.view(), z2.view(), 0.1).unwrap();
            prop_assert!((l - l2).abs() <= 1e-8 * l.max(1.0));
        }
    }

    #[test]
    fn harmonic_mean_bounds(base in 1e-3f64..100.0, new in 1e-3f64..100.0) {
        let hm = harmonic_mean(base, new).unwrap();
        prop_assert!(hm <= (base + new) / 2.0 + 1e-12);
        prop_assert!(hm >= base.min(new) - 1e-12);
        prop_assert!((hm - harmonic_mean(new, base).unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn total_loss_is_the_alpha_blend(
        ce in 0.0f64..20.0, ssl in 0.0f64..50.0, recon in 0.0f64..500.0, dm in 0.0f64..3.0, alpha in 0.0f64..=1.0,
    ) {
        let w = LossWeights { alpha, ..Default::default() };
        let r = losses::total_loss(ce, ssl, recon, dm, &w);
        prop_assert!((r.total - (ce + alpha * (ssl + recon) + (1.0 - alpha) * dm)).abs() <= 1e-9);
        prop_assert!((w.coefficients().combine(ce, ssl, recon, dm) - r.total).abs() <= 1e-9);
    }

    #[test]
    fn softmax_rows_are_distributions(logits in matrix(4, 5), shift in -100.0f64..100.0) {
        let p = vatp::softmax_rows(logits.view());
        for row in p.rows() {
            prop_assert!((row.sum() - 1.0).abs() <= 1e-12);
            prop_assert!(row.iter().all(|v| *v >= 0.0));
        }
        let q = vatp::softmax_rows((&logits + shift).view());
        prop_assert!((&p - &q).iter().all(|d| d.abs() <= 1e-12));
    }

    #[test]
    fn diversity_terms_are_bounded(logits in matrix(4, 5)) {
        let p = vatp::softmax_rows((&logits * 3.0).view());
        let h = losses::diversity_loss(p.view(), DmMode::Entropy).unwrap();
        prop_assert!(h >= 0.0 && h <= 5f64.ln() + 1e-12);
        let m = losses::diversity_loss(p.view(), DmMode::MinProb).unwrap();
        prop_assert!(m >= 0.0 && m <= 0.2 + 1e-12);
    }
}
