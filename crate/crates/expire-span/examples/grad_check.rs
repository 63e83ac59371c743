//! Verify every parameter gradient of a small two-layer model against
//! central finite differences, end to end through block caching, ramp
//! masking, renormalization and the span penalty.
//!
//!   cargo run --release --example grad_check

use expire_span::selftest::{check_end_to_end_gradients, gradient_check_model};

fn main() {
    let (model, _) = gradient_check_model().expect("model builds");
    let n_params: usize = model.params().iter().map(|t| t.len()).sum();
    println!(
        "model: {} layers, d_model {}, {} parameters; 32 tokens in 4 cached blocks",
        model.cfg.n_layers, model.cfg.d_model, n_params
    );
    println!("differencing every coordinate (two forwards each)...");
    let report = check_end_to_end_gradients(false);
    println!("[{}] {}", if report.passed { "PASS" } else { "FAIL" }, report.detail);
    std::process::exit(if report.passed { 0 } else { 1 });
}
