//! Character-level language-model smoke run. Reads any text file (or
//! synthesizes a tiny patterned corpus) and reports bits per byte.
//!
//!   cargo run --release --example train_char_lm [path] [steps]

use expire_span::model::{Model, ModelConfig, SpanMode};
use expire_span::tasks::charlm::CharLmTask;
use expire_span::train::{train_loop, TrainConfig};

fn synth_corpus() -> Vec<u8> {
    // periodic structure a tiny model can compress well below 8 bpb
    let mut out = Vec::new();
    let words = ["the river bends ", "the forest waits ", "rain over stone ", "a long memory "];
    for i in 0..4000 {
        out.extend_from_slice(words[i % words.len()].as_bytes());
        if i % 7 == 0 {
            out.push(b'\n');
        }
    }
    out
}

fn main() {
    let mut args = std::env::args().skip(1);
    let path = args.next();
    let steps: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(400);

    let bytes = match &path {
        Some(p) => std::fs::read(p).expect("readable text file"),
        None => synth_corpus(),
    };
    let block = 64;
    let task = CharLmTask::from_bytes(&bytes, block, 4).expect("non-empty corpus");
    println!(
        "corpus: {} bytes, vocab {} symbols ({} blocks per chunk)",
        bytes.len(),
        task.vocab_size(),
        4
    );

    let cfg = ModelConfig {
        vocab_size: task.vocab_size(),
        n_layers: 2,
        d_model: 48,
        n_heads: 4,
        d_ff: 192,
        block_size: block,
        max_span: 256,
        ramp: 32,
        mode: SpanMode::ExpireSpan,
        fixed_span_length: None,
        dropout: 0.0,
        scaled_variant: false,
    };
    let tcfg = TrainConfig {
        alpha: 1e-6,
        learning_rate: 2e-3,
        warmup_steps: 50,
        total_steps: steps,
        clip_norm: 1.0,
        batch_size: 1,
        seed: 0,
        random_shorten: true,
        eval_interval: (steps / 4).max(1),
    };

    let mut model = Model::new(cfg, 3).expect("config is valid");
    train_loop(
        &mut model,
        &task,
        &tcfg,
        |row, _, _| {
            println!(
                "  step {:5}  valid bpb {:.3}  avg_mem {:6.1}  avg_span {:6.1}",
                row.step,
                row.bpb.unwrap_or(f64::NAN),
                row.avg_mem,
                row.avg_span
            );
            Ok(())
        },
        0,
        None,
    )
    .expect("training runs");
}
