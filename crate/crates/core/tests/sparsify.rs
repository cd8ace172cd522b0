use proptest::collection::vec;
use proptest::prelude::*;
use steerscope::sparsify::{
    bottomk_sparsify, dropout_sparsify, gradient_sparsify, hypergeom_pvalue, hypergeom_pvalue_exact,
    ie_sparsify, iou, matched_k,
};

fn pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (4usize..40).prop_flat_map(|d| (vec(-2.0f64..2.0, d), vec(-2.0f64..2.0, d)))
}

proptest! {
    #[test]
    fn gradient_rule_keeps_exactly_the_admissible_dims((s, ie) in pair(), tau in -1.0f64..3.0) {
        let v = gradient_sparsify(&s, &ie, tau).unwrap();
        for i in 0..s.len() {
            let keep = s[i] != 0.0 && ie[i] / s[i] >= tau;
            prop_assert_eq!(v.keep[i], keep);
            prop_assert_eq!(v.values[i], if keep { s[i] } else { 0.0 });
        }
    }

    #[test]
    fn sparsity_grows_with_tau((s, ie) in pair()) {
        let ks = matched_k(&s, &ie, &[-1.0, 0.0, 0.5, 1.0, 2.0]).unwrap();
        prop_assert!(ks.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn matched_methods_zero_exactly_k((s, ie) in pair(), frac in 0.0f64..=1.0, seed in any::<u64>()) {
        prop_assume!(s.iter().all(|x| *x != 0.0));
        let k = (frac * s.len() as f64) as usize;
        for v in [
            ie_sparsify(&s, &ie, k).unwrap(),
            bottomk_sparsify(&s, k).unwrap(),
            dropout_sparsify(&s, k, seed).unwrap(),
        ] {
            prop_assert_eq!(v.zeroed(), k);
        }
        let b = bottomk_sparsify(&s, k).unwrap();
        let kept_min = b.support().iter().map(|&i| s[i].abs()).fold(f64::INFINITY, f64::min);
        prop_assert!((0..s.len()).filter(|i| !b.keep[*i]).all(|i| s[i].abs() <= kept_min));
    }

    #[test]
    fn iou_is_symmetric_and_bounded((s, ie) in pair(), t1 in -0.5f64..1.0, t2 in -0.5f64..1.0) {
        let a = gradient_sparsify(&s, &ie, t1).unwrap();
        let b = gradient_sparsify(&s, &ie, t2).unwrap();
        if a.support().is_empty() && b.support().is_empty() {
            prop_assert!(iou(&a, &b).is_err());
        } else {
            let x = iou(&a, &b).unwrap();
            prop_assert!((0.0..=1.0).contains(&x));
            prop_assert_eq!(x, iou(&b, &a).unwrap());
        }
    }

    #[test]
    fn tail_matches_integer_ratio(
        (d, a, b, o) in (1usize..60)
            .prop_flat_map(|d| (Just(d), 0..=d, 0..=d))
            .prop_flat_map(|(d, a, b)| (Just(d), Just(a), Just(b), 0..=a.min(b)))
    ) {
        let (num, den) = hypergeom_pvalue_exact(d, a, b, o).unwrap();
        let exact = num as f64 / den as f64;
        let p = hypergeom_pvalue(d, a, b, o).unwrap();
        prop_assert!((p - exact).abs() <= 1e-12 + 1e-10 * exact, "{p} vs {exact}");
    }

    #[test]
    fn tail_is_a_decreasing_probability((d, a, b) in (1usize..200).prop_flat_map(|d| (Just(d), 0..=d, 0..=d))) {
        let ps: Vec<f64> = (0..=a.min(b)).map(|o| hypergeom_pvalue(d, a, b, o).unwrap()).collect();
        prop_assert!(ps.iter().all(|p| (0.0..=1.0).contains(p)));
        prop_assert_eq!(ps[0], 1.0);
        prop_assert!(ps.windows(2).all(|w| w[1] <= w[0] + 1e-15));
    }
}

#[test]
fn impossible_tuples_are_rejected() {
    assert!(hypergeom_pvalue(10, 11, 2, 0).is_err());
    assert!(hypergeom_pvalue(10, 3, 2, 3).is_err());
    assert!(ie_sparsify(&[1.0, 2.0], &[0.0], 1).is_err());
    assert!(bottomk_sparsify(&[1.0, 2.0], 3).is_err());
}

#[test]
fn large_dimensions_stay_finite() {
    // expected overlap 90
    let p = hypergeom_pvalue(1000, 300, 300, 150).unwrap();
    assert!(p > 0.0 && p < 1e-10, "{p}");
}
