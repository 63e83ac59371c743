//! Train on the easy colliding-particles task: frames stream in six tokens
//! per step and questions ask for the quadrant of recent collisions. Larger
//! maximum spans reach further back and answer more of them.
//!
//!   cargo run --release --example train_collision [max_span] [steps]

use expire_span::model::{Model, ModelConfig, SpanMode};
use expire_span::tasks::collision::{CollisionConfig, CollisionTask};
use expire_span::train::{train_loop, TrainConfig};

fn main() {
    let mut args = std::env::args().skip(1);
    let max_span: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(256);
    let steps: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(1500);

    let task = CollisionTask {
        cfg: CollisionConfig {
            grid_size: 8,
            n_colors: 5,
            color_change_prob: 0.05,
            matched_query_rate: 0.4,
            episode_steps: 80,
            easy_mode: true,
            question_interval: 16,
            seed: 0,
            eval_episodes: 16,
        },
    };
    let cfg = ModelConfig {
        vocab_size: task.cfg.vocab_size(),
        n_layers: 2,
        d_model: 32,
        n_heads: 2,
        d_ff: 128,
        block_size: 32.min(max_span),
        max_span,
        ramp: 16.min(max_span),
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
        batch_size: 1,
        seed: 0,
        random_shorten: false,
        eval_interval: (steps / 3).max(1),
    };

    let mut model = Model::new(cfg, 1).expect("config is valid");
    println!("easy collision, max span {max_span}, {steps} steps");
    train_loop(
        &mut model,
        &task,
        &tcfg,
        |row, _, _| {
            println!(
                "  step {:5}  loss {:.4}  error {:5.1}%  avg_mem {:6.1}  avg_span {:6.1}",
                row.step,
                row.task_loss,
                (1.0 - row.metric) * 100.0,
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
