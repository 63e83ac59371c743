//! Train on the long-range copy task twice — once with learned expiration,
//! once with a short fixed span — and compare answer accuracy and memory.
//! The expiring model keeps the A-prefix alive and lets distractors fade;
//! the fixed window physically cannot see the prefix from the answer slots.
//!
//!   cargo run --release --example train_copy [distance] [steps]

use expire_span::model::{Model, ModelConfig, SpanMode};
use expire_span::tasks::copy::{CopyConfig, CopyTask};
use expire_span::train::{train_loop, TrainConfig};

fn main() {
    let mut args = std::env::args().skip(1);
    let distance: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(128);
    let steps: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(1200);

    let task = CopyTask {
        cfg: CopyConfig { distance, count_min: 1, count_max: 8, seed: 0, eval_samples: 32 },
    };
    let max_span = (2 * distance).max(64);
    let base_model = ModelConfig {
        vocab_size: expire_span::tasks::copy::VOCAB,
        n_layers: 2,
        d_model: 32,
        n_heads: 2,
        d_ff: 128,
        block_size: 64.min(max_span),
        max_span,
        ramp: (max_span / 8).max(1),
        mode: SpanMode::ExpireSpan,
        fixed_span_length: None,
        dropout: 0.0,
        scaled_variant: false,
    };
    let train = TrainConfig {
        alpha: 1e-5,
        learning_rate: 3e-3,
        warmup_steps: 100,
        total_steps: steps,
        clip_norm: 1.0,
        batch_size: 2,
        seed: 0,
        random_shorten: false,
        eval_interval: (steps / 4).max(1),
    };

    for (name, mode, fixed) in [
        ("expire-span", SpanMode::ExpireSpan, None),
        ("fixed-span(64)", SpanMode::FixedSpan, Some(64)),
    ] {
        let mut cfg = base_model.clone();
        cfg.mode = mode;
        cfg.fixed_span_length = fixed;
        let mut tcfg = train.clone();
        if mode == SpanMode::FixedSpan {
            tcfg.alpha = 0.0;
        }
        let mut model = Model::new(cfg, 1).expect("config is valid");
        println!("== {name}: distance {distance}, {steps} steps");
        let out = train_loop(
            &mut model,
            &task,
            &tcfg,
            |row, _, _| {
                println!(
                    "  step {:5}  loss {:.4}  exact-match {:5.1}%  avg_mem {:6.1}  avg_span {:6.1}",
                    row.step,
                    row.task_loss,
                    row.metric * 100.0,
                    row.avg_mem,
                    row.avg_span
                );
                Ok(())
            },
            0,
            None,
        )
        .expect("training runs");
        if let Some(last) = out.history.last() {
            println!(
                "  final: exact-match {:.1}%, average memory {:.1} entries\n",
                last.metric * 100.0,
                last.avg_mem
            );
        }
    }
}
