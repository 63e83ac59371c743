//! Inference-time span reduction: train on the copy task, then cap every
//! predicted span at evaluation and watch accuracy fall off once the cap
//! drops below the distance the answer depends on.
//!
//!   cargo run --release --example span_reduction_eval [distance] [steps]

use expire_span::commands::eval_stream;
use expire_span::model::{Model, ModelConfig, SpanMode};
use expire_span::tasks::copy::{CopyConfig, CopyTask};
use expire_span::train::{train_loop, TrainConfig};

fn main() {
    let mut args = std::env::args().skip(1);
    let distance: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(128);
    let steps: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(1500);

    let task = CopyTask {
        cfg: CopyConfig { distance, count_min: 1, count_max: 8, seed: 0, eval_samples: 32 },
    };
    let cfg = ModelConfig {
        vocab_size: expire_span::tasks::copy::VOCAB,
        n_layers: 2,
        d_model: 32,
        n_heads: 2,
        d_ff: 128,
        block_size: 64,
        max_span: 2 * distance,
        ramp: distance / 4,
        mode: SpanMode::ExpireSpan,
        fixed_span_length: None,
        dropout: 0.0,
        scaled_variant: false,
    };
    let tcfg = TrainConfig {
        alpha: 1e-5,
        learning_rate: 3e-3,
        warmup_steps: 100,
        total_steps: steps,
        clip_norm: 1.0,
        batch_size: 2,
        seed: 0,
        random_shorten: false,
        eval_interval: (steps / 2).max(1),
    };
    let mut model = Model::new(cfg, 1).expect("config is valid");
    println!("training {steps} steps on copy with distance {distance}...");
    train_loop(&mut model, &task, &tcfg, |_, _, _| Ok(()), 0, None).expect("training runs");

    println!("{:>10}  {:>12}  {:>8}", "span cap", "exact match", "avg mem");
    for cap in [None, Some(2 * distance), Some(distance), Some(distance / 2), Some(distance / 4)]
    {
        let row = eval_stream(&mut model, &task, 0, cap.map(|c| c as f64)).expect("eval runs");
        let label = cap.map_or("full".to_string(), |c| c.to_string());
        println!("{label:>10}  {:11.1}%  {:8.1}", row.metric * 100.0, row.avg_mem);
    }
}
