//! Train a model on the copy task, then export per-token spans and show
//! which tokens it chose to remember. The prefix that determines the answer
//! earns spans near the maximum while distractors expire almost immediately.
//!
//!   cargo run --release --example span_analysis [distance] [steps]

use expire_span::commands::span_trace_csv;
use expire_span::model::{Model, ModelConfig, SpanMode};
use expire_span::tasks::copy::{CopyConfig, CopyTask, TOK_A, TOK_B, TOK_GO, TOK_SLOT};
use expire_span::train::{train_loop, TaskStream, TrainConfig};

fn main() {
    let mut args = std::env::args().skip(1);
    let distance: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(96);
    let steps: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(1200);

    let task = CopyTask {
        cfg: CopyConfig { distance, count_min: 1, count_max: 8, seed: 0, eval_samples: 16 },
    };
    let cfg = ModelConfig {
        vocab_size: expire_span::tasks::copy::VOCAB,
        n_layers: 2,
        d_model: 32,
        n_heads: 2,
        d_ff: 128,
        block_size: 32,
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

    let sample = task.sample(999_999);
    let csv = span_trace_csv(&mut model, &sample.input_tokens).expect("trace exports");
    std::fs::write("span_trace.csv", &csv).expect("writable cwd");
    println!("wrote span_trace.csv ({} rows)", csv.lines().count() - 1);

    // summary: mean span per token type per layer
    let names = |t: usize| match t {
        TOK_A => "A    ",
        TOK_B => "B    ",
        TOK_GO => "GO   ",
        TOK_SLOT => "SLOT ",
        _ => "END  ",
    };
    for l in 0..model.cfg.n_layers {
        let mut by: std::collections::BTreeMap<usize, (f64, usize)> = Default::default();
        for line in csv.lines().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            if f[0].parse::<usize>().unwrap() != l {
                continue;
            }
            let tok: usize = f[2].parse().unwrap();
            let span: f64 = f[3].parse().unwrap();
            let e = by.entry(tok).or_insert((0.0, 0));
            e.0 += span;
            e.1 += 1;
        }
        println!("layer {l}:");
        for (tok, (sum, n)) in by {
            println!("  {}  mean span {:8.1}  ({} tokens)", names(tok), sum / n as f64, n);
        }
    }
}
