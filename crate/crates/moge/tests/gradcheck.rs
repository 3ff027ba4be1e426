use moge::gradcheck::{default_model_suite, model_gradcheck, reg_gradcheck, GradMutation, ToyProblem};
use moge::router::RoutingMode;

#[test]
fn regularizer_gradients_match_finite_differences() {
    for seed in 0..5 {
        for r in reg_gradcheck(seed).unwrap() {
            assert!(r.passed(), "seed {seed}: {} rel error {:e}", r.name, r.rel_error);
        }
    }
}

#[test]
fn model_gradients_match_finite_differences() {
    for seed in 0..3 {
        for r in default_model_suite(seed, &GradMutation::None).unwrap() {
            assert!(r.passed(), "seed {seed}: {} rel error {:e}", r.name, r.rel_error);
        }
    }
}

#[test]
fn sign_flip_is_caught_and_named() {
    let problem = ToyProblem::new(0, 4, 1, RoutingMode::SoftmaxFirst).unwrap();
    for tensor in ["gate.weight", "experts.0.w1", "classifier.bias"] {
        let results = model_gradcheck(&problem, &GradMutation::FlipSign(tensor.into())).unwrap();
        let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
        assert!(failed.iter().any(|n| n.ends_with(tensor)), "{tensor}: {failed:?}");
        assert!(failed.iter().all(|n| n.ends_with(tensor)), "{tensor}: {failed:?}");
    }
}

#[test]
fn verdicts_repeat() {
    let a = default_model_suite(7, &GradMutation::None).unwrap();
    let b = default_model_suite(7, &GradMutation::None).unwrap();
    assert_eq!(a, b);
}
