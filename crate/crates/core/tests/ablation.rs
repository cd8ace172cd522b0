mod common;

use common::{model, small_config, vector};
use steerscope::ablation::{ablated_pass, generate_ablated_batch, AblationKind};
use steerscope::model::{Arch, Interventions};

const PROMPTS: [[usize; 4]; 3] = [[1, 2, 3, 4], [5, 6, 7, 8], [9, 1, 9, 2]];

#[test]
fn qk_freeze_keeps_base_attention_from_the_steering_layer() {
    let config = small_config(Arch::Transformer);
    let m = model(&config, 21, 4.0);
    let v = vector(8, 0, 5.0, 21);
    let (base, steered) = ablated_pass(&m, &PROMPTS[0], &v, 1.0, AblationKind::QkFreeze).unwrap();
    for l in v.layer..config.n_layers {
        let gap = base.attn_probs[l].iter().zip(&steered.attn_probs[l]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(gap < 1e-12, "layer {l}: {gap}");
    }
    let (_, plain) = ablated_pass(&m, &PROMPTS[0], &v, 1.0, AblationKind::None).unwrap();
    assert!(plain.attn_probs[1].iter().zip(&base.attn_probs[1]).any(|(a, b)| (a - b).abs() > 1e-6));
}

#[test]
fn ov_freeze_keeps_base_values() {
    let config = small_config(Arch::Transformer);
    let m = model(&config, 22, 4.0);
    let v = vector(8, 1, 5.0, 22);
    let (base, steered) = ablated_pass(&m, &PROMPTS[1], &v, -1.0, AblationKind::OvFreeze).unwrap();
    assert!(base.values[1].max_abs_diff(&steered.values[1]) < 1e-12);
}

#[test]
fn zero_coefficient_matches_unsteered_generation() {
    let config = small_config(Arch::Transformer);
    let m = model(&config, 23, 4.0);
    let v = vector(8, 0, 5.0, 23);
    let prompts: Vec<Vec<usize>> = PROMPTS.iter().map(|p| p.to_vec()).collect();
    let plain = m.generate_batch(&prompts, &Interventions::none(), 6, None).unwrap();
    for kind in AblationKind::ALL {
        let got = generate_ablated_batch(&m, &prompts, &v, 0.0, kind, 6, None).unwrap();
        for (g, p) in got.iter().zip(&plain) {
            assert_eq!(&g.tokens, p, "{kind}");
        }
    }
}

#[test]
fn no_ablation_is_plain_steering() {
    let config = small_config(Arch::Transformer);
    let m = model(&config, 24, 4.0);
    let v = vector(8, 1, 3.0, 24);
    let prompts: Vec<Vec<usize>> = PROMPTS.iter().map(|p| p.to_vec()).collect();
    let plain = m.generate_batch(&prompts, &v.interventions(-1.0), 6, None).unwrap();
    let got = generate_ablated_batch(&m, &prompts, &v, -1.0, AblationKind::None, 6, None).unwrap();
    for (g, p) in got.iter().zip(&plain) {
        assert_eq!(&g.tokens, p);
    }
}
