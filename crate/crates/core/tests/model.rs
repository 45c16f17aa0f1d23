use interpdn_core::config::{tiny, AblationMode, BackboneKind, TrainConfig};
use interpdn_core::gradcheck::{gradient_check, synthetic_batch};
use interpdn_core::model::{
    denormalize_rows, forward_batch, forward_full, init_params, loss_and_grad, ModelParams, ModelSpec,
};
use interpdn_core::params::ParamSet;

fn cfg_with(mode: AblationMode) -> TrainConfig {
    let mut cfg = tiny();
    cfg.model.mode = mode;
    cfg
}

#[test]
fn init_is_seeded() {
    let spec = ModelSpec::from_config(&tiny(), 2).unwrap();
    let a: ModelParams<f64> = init_params(&spec, 5);
    let b: ModelParams<f64> = init_params(&spec, 5);
    let c: ModelParams<f64> = init_params(&spec, 6);
    assert_eq!(a.flatten(), b.flatten());
    assert_ne!(a.flatten(), c.flatten());
    a.check_against(&spec).unwrap();
}

#[test]
fn weights_respect_fan_in_bound() {
    let spec = ModelSpec::from_config(&tiny(), 2).unwrap();
    let p: ModelParams<f64> = init_params(&spec, 1);
    p.visit("", &mut |t| {
        if t.name.ends_with(".weight") && t.shape.len() == 2 {
            let bound = 1.0 / (t.shape[0] as f64).sqrt();
            assert!(t.values.iter().all(|v| v.abs() <= bound), "{}", t.name);
        }
        if t.name.ends_with(".bias") {
            assert!(t.values.iter().all(|&v| v == 0.0), "{}", t.name);
        }
    });
}

#[test]
fn modes_have_distinct_manifests() {
    let full = ModelSpec::from_config(&tiny(), 2).unwrap();
    let sbsp = ModelSpec::from_config(&cfg_with(AblationMode::Sbsp), 2).unwrap();
    let a = init_params::<f32>(&full, 0).manifest();
    let b = init_params::<f32>(&sbsp, 0).manifest();
    assert_ne!(a, b);
    assert!(b.iter().all(|(n, _)| !n.starts_with("coarse")));
    assert!(a.iter().any(|(n, _)| n.starts_with("coarse.1")));
}

#[test]
fn full_output_shapes_and_weights() {
    let spec = ModelSpec::from_config(&tiny(), 3).unwrap();
    let params: ModelParams<f64> = init_params(&spec, 2);
    let (input, _) = synthetic_batch(&spec, 1, 9);
    let window = interpdn_core::model::rows_to_window(input.view(), 0, 3);
    let out = forward_full(&params, &spec, window.view()).unwrap();
    assert_eq!(out.prediction.dim(), (8, 3));
    let fine = out.fine.expect("fused fine stage");
    assert_eq!(fine.len(), 3);
    for f in &fine {
        assert!(f.weights.iter().all(|w| (0.0..=1.0).contains(w)));
        for j in 0..8 {
            let want = f.weights[j] * f.expectation_1[j] + (1.0 - f.weights[j]) * f.expectation_2[j];
            assert_eq!(f.fused[j], want);
        }
    }
    assert_eq!(out.coarse.unwrap()[0].fused.len(), 4);
}

#[test]
fn sbsp_has_no_distributions() {
    let spec = ModelSpec::from_config(&cfg_with(AblationMode::Sbsp), 2).unwrap();
    assert!(!spec.is_probabilistic());
    let params: ModelParams<f64> = init_params(&spec, 2);
    let (input, _) = synthetic_batch(&spec, 1, 3);
    let window = interpdn_core::model::rows_to_window(input.view(), 0, 2);
    let out = forward_full(&params, &spec, window.view()).unwrap();
    assert!(out.fine.is_none() && out.coarse.is_none());
}

#[test]
fn fourbsp_averages_scalar_branches() {
    let spec = ModelSpec::from_config(&cfg_with(AblationMode::Fourbsp), 2).unwrap();
    let params: ModelParams<f64> = init_params(&spec, 4);
    let (input, _) = synthetic_batch(&spec, 3, 4);
    let pass = forward_batch(&params, &spec, input.view(), false).unwrap();
    assert_eq!(pass.fine.units.len(), 4);
    let mut mean = pass.fine.units[0].expectation.clone();
    for u in &pass.fine.units[1..] {
        mean += &u.expectation;
    }
    mean /= 4.0;
    let want = denormalize_rows(&params, &pass, &mean, 2);
    for (a, b) in want.iter().zip(pass.prediction.iter()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn modes_zero_their_disabled_terms() {
    for (mode, zero_c, zero_t, zero_f) in [
        (AblationMode::Ibbpdp, true, true, false),
        (AblationMode::Bspdp, true, false, true),
        (AblationMode::Sbsp, true, true, true),
    ] {
        let spec = ModelSpec::from_config(&cfg_with(mode), 2).unwrap();
        let params: ModelParams<f64> = init_params(&spec, 1);
        let (input, target) = synthetic_batch(&spec, 4, 2);
        let (terms, total, _) = loss_and_grad(&params, &spec, input.view(), target.view()).unwrap();
        assert_eq!(terms.l_c == 0.0, zero_c, "{mode:?} L_c");
        assert_eq!(terms.l_t == 0.0, zero_t, "{mode:?} L_t");
        assert_eq!(terms.l_f == 0.0, zero_f, "{mode:?} L_f");
        assert!(total >= terms.l_p);
    }
}

#[test]
fn gradients_match_in_every_mode() {
    for mode in AblationMode::ALL {
        let r = gradient_check(&cfg_with(mode), 2, 3, 7, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-4, "{mode:?}: {} at {}", r.max_rel_error, r.worst);
    }
}

#[test]
fn dlinear_backbone_gradients() {
    let mut cfg = tiny();
    cfg.model.backbone = BackboneKind::Dlinear;
    let r = gradient_check(&cfg, 2, 3, 1, 1e-5).unwrap();
    assert!(r.max_rel_error < 1e-4, "{} at {}", r.max_rel_error, r.worst);
}

#[test]
fn horizon_not_divisible_by_downsample() {
    let mut cfg = tiny();
    cfg.model.horizon = 7;
    cfg.model.downsample = 3;
    let spec = ModelSpec::from_config(&cfg, 1).unwrap();
    assert_eq!(spec.coarse.as_ref().unwrap().steps, 3);
    let r = gradient_check(&cfg, 1, 2, 3, 1e-5).unwrap();
    assert!(r.max_rel_error < 1e-4, "{} at {}", r.max_rel_error, r.worst);
}
