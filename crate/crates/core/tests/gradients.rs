//! Finite-difference checks of every hand-written backward pass above the
//! layer library: losses, decomposition, both attention blocks, and the whole
//! model in single precision.

use lmfd_core::gradcheck::{self, GradCheck};
use lmfd_core::network::LmfdModel;
use lmfd_core::nn::count_params;

fn assert_passes(check: GradCheck) {
    assert!(
        check.passed(),
        "{}: worst relative error {:e} over {} entries (tolerance {:e})",
        check.name,
        check.max_rel_err,
        check.checked,
        check.tolerance
    );
}

#[test]
fn loss_gradients() {
    assert_passes(gradcheck::losses().unwrap());
}

#[test]
fn decomposition_gradients() {
    assert_passes(gradcheck::decomposition(1).unwrap());
}

#[test]
fn spatial_attention_gradients() {
    assert_passes(gradcheck::spatial_attention(7, 10).unwrap());
    assert_passes(gradcheck::spatial_attention(5, 20).unwrap());
}

#[test]
fn channel_attention_gradients() {
    assert_passes(gradcheck::channel_attention(30).unwrap());
}

#[test]
fn end_to_end_gradient_check_single_precision() {
    let model = LmfdModel::<f32>::new(gradcheck::end_to_end_config(), 5).unwrap();
    // The learnable masks scale with the input resolution (4 x 224 x 224);
    // the budget applies to the network weights.
    let masks = model.filter_bank.as_ref().map_or(0, |b| count_params(b));
    let n = count_params(&model) - masks;
    assert!(n <= 100_000, "{n} network parameters");
    assert_passes(gradcheck::end_to_end_single_precision(5, 10).unwrap());
}

#[test]
fn a_wrong_gradient_is_caught() {
    let mut check = gradcheck::losses().unwrap();
    assert!(check.passed());
    check.max_rel_err = gradcheck::rel_err(1.0, 1.1);
    assert!(!check.passed());
}
