use proptest::prelude::*;

use pipediag::diagnosis::{classify_fate, triple_from_scores, Fate};
use pipediag::scoring::failure_index;
use pipediag::stats::{bow_cosine, cohens_dz, holm_correction, PairedSample};

fn words() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec("[a-e]{1,3}", 0..12)
}

proptest! {
    #[test]
    fn failure_index_is_nonnegative_and_additive(v in prop::collection::vec(0.0f64..0.99, 1..8)) {
        let f = failure_index(&v).unwrap();
        prop_assert!(f >= 0.0);
        let split = v.len() / 2;
        let parts = failure_index(&v[..split]).unwrap_or(0.0) + failure_index(&v[split..]).unwrap_or(0.0);
        prop_assert!((f - parts).abs() < 1e-9);
    }

    #[test]
    fn mediation_identity_holds(fb in 0.0f64..20.0, fa in 0.0f64..20.0, fbb in 0.0f64..20.0) {
        let t = triple_from_scores("x", 2, fb, fa, fbb);
        prop_assert!((t.te - t.nde - t.nie).abs() < 1e-12);
    }

    #[test]
    fn fates_partition_the_line(nie in -2.0f64..2.0, tau in 0.0f64..0.5) {
        let label = classify_fate(nie, tau).label;
        let expected = if nie > tau { Fate::Amplifier } else if nie < -tau { Fate::Compensator } else { Fate::Propagator };
        prop_assert_eq!(label, expected);
    }

    #[test]
    fn cosine_is_symmetric_and_order_free(a in words(), b in words(), seed in any::<u64>()) {
        let sa = a.join(" ");
        let sb = b.join(" ");
        prop_assert_eq!(bow_cosine(&sa, &sb), bow_cosine(&sb, &sa));
        let mut shuffled = a.clone();
        let n = shuffled.len();
        if n > 1 {
            shuffled.rotate_left((seed as usize) % n);
        }
        prop_assert!((bow_cosine(&shuffled.join(" "), &sb) - bow_cosine(&sa, &sb)).abs() < 1e-12);
        let c = bow_cosine(&sa, &sb);
        prop_assert!((0.0..=1.0).contains(&c));
    }

    #[test]
    fn holm_never_lowers_a_p_value(raw in prop::collection::vec(0.0f64..1.0, 1..12)) {
        let adj = holm_correction(&raw).unwrap();
        for (r, a) in raw.iter().zip(&adj) {
            prop_assert!(a >= r);
            prop_assert!(*a <= 1.0);
        }
    }

    #[test]
    fn dz_sign_follows_mean_difference(d in prop::collection::vec(-3.0f64..3.0, 3..20)) {
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        if let Ok(dz) = cohens_dz(&PairedSample::from_differences(&d)) {
            prop_assert!(dz.is_finite());
            if mean.abs() > 1e-9 {
                prop_assert_eq!(dz.signum(), mean.signum());
            }
        }
    }
}
