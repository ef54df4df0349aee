mod common;

use common::{check_model_gradients, mini_config};
use freqshift::netcore::{Model, ModelConfig};

#[test]
fn mini_model_gradients_match_finite_differences() {
    let mut kinks = 0;
    let mut checked = 0;
    for seed in 0..20 {
        let r = check_model_gradients(&mini_config(), seed, 4);
        assert!(
            r.mismatches.is_empty(),
            "seed {seed}: {:?}",
            &r.mismatches[..r.mismatches.len().min(5)]
        );
        kinks += r.kinks.len();
        checked += r.checked;
    }
    assert!(kinks * 50 < checked, "{kinks} of {checked} entries sit next to a kink");
}

#[test]
fn gradients_without_attention_match_finite_differences() {
    let cfg = ModelConfig {
        fam_enabled: false,
        ..mini_config()
    };
    for seed in 0..5 {
        let r = check_model_gradients(&cfg, seed, 3);
        assert!(r.mismatches.is_empty(), "seed {seed}: {:?}", r.mismatches);
    }
}

#[test]
fn gradient_check_covers_every_parameter() {
    let r = check_model_gradients(&mini_config(), 3, 4);
    let model = Model::new(mini_config(), 3).unwrap();
    assert_eq!(r.checked, model.num_params());
}
