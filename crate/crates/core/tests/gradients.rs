mod common;

use common::{analytic, max_relative_error, micro_instance};

#[test]
fn gradients_match_central_differences() {
    for seed in 0..10 {
        let m = micro_instance(seed);
        let err = max_relative_error(&m, 1e-5);
        assert!(err < 1e-4, "seed {seed}: relative error {err}");
    }
}

#[test]
fn output_bias_gradient_is_zero() {
    // A constant shift of every attention logit cannot change the softmax, so
    // without the L2 term the output bias receives no gradient.
    for seed in 0..5 {
        let mut m = micro_instance(seed);
        m.hp.lambda1 = 0.0;
        m.hp.lambda2 = 0.0;
        let g = analytic(&m);
        assert!(g.b1.abs() < 1e-12, "seed {seed}: {}", g.b1);
        assert!(max_relative_error(&m, 1e-5) < 1e-4);
    }
}
