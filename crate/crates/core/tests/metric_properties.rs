use lightcam::eval::{aam_softmax_loss, compute_eer, compute_min_dcf, cosine_score, detection_cost, AamConfig, DcfParams, TrialScores};
use lightcam::Tensor;
use proptest::prelude::*;

fn scores() -> impl Strategy<Value = TrialScores> {
    (prop::collection::vec(-1.0f64..1.0, 1..25), prop::collection::vec(-1.0f64..1.0, 1..25))
        .prop_map(|(t, n)| TrialScores::new(t, n))
}

proptest! {
    #[test]
    fn cosine_is_scale_invariant(
        a in prop::collection::vec(-3.0f32..3.0, 8),
        b in prop::collection::vec(-3.0f32..3.0, 8),
        alpha in 0.01f32..100.0,
        beta in 0.01f32..100.0,
    ) {
        prop_assume!(a.iter().any(|v| v.abs() > 1e-3) && b.iter().any(|v| v.abs() > 1e-3));
        let base = cosine_score(&a, &b).unwrap();
        let sa: Vec<f32> = a.iter().map(|v| v * alpha).collect();
        let sb: Vec<f32> = b.iter().map(|v| v * beta).collect();
        prop_assert!((cosine_score(&sa, &sb).unwrap() - base).abs() <= 1e-6);
        prop_assert!((-1.0..=1.0).contains(&base));
    }

    #[test]
    fn eer_does_not_grow_with_a_clear_target(t in scores()) {
        let before = compute_eer(&t).unwrap().eer;
        let top = t.nontarget.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 1.0;
        let mut more = t.clone();
        more.target.push(top);
        prop_assert!(compute_eer(&more).unwrap().eer <= before + 1e-12);
    }

    #[test]
    fn min_dcf_is_bounded(t in scores()) {
        let p = DcfParams::default();
        let m = compute_min_dcf(&t, &p).unwrap().min_dcf;
        prop_assert!((0.0..=1.0).contains(&m));
        let at_eer = detection_cost(&t, compute_eer(&t).unwrap().threshold, &p).unwrap();
        prop_assert!(m <= at_eer + 1e-12);
    }

    #[test]
    fn eer_in_unit_interval(t in scores()) {
        let r = compute_eer(&t).unwrap();
        prop_assert!((0.0..=1.0).contains(&r.eer));
    }

    #[test]
    fn margin_never_lowers_loss_for_aligned_embedding(
        w in prop::collection::vec(-1.0f32..1.0, 12),
        classes in 2usize..4,
    ) {
        let w = Tensor::new(vec![classes, 4], w[..classes * 4].to_vec()).unwrap();
        prop_assume!((0..classes).all(|c| w.row(c).iter().any(|v| v.abs() > 1e-2)));
        let e = w.row(0).to_vec();
        let loss = |m| aam_softmax_loss(&e, 0, &AamConfig { margin: m, scale: 32.0, class_weights: w.clone() }).unwrap();
        prop_assert!(loss(0.2) >= loss(0.0));
        prop_assert!(loss(0.0) >= 0.0);
    }
}
