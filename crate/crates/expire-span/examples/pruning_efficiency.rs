//! Measure what permanent deletion buys: with spans trained far below the
//! maximum, prune the banks at each block boundary or let them grow, and
//! compare median time per batch plus peak bank size.
//!
//!   cargo run --release --example pruning_efficiency [max_span]

use expire_span::metrics::timed_batch;
use expire_span::model::{ForwardOptions, Model, ModelConfig, SpanMode};
use expire_span::rng::Rng;
use expire_span::tensor::tape::Tape;

fn main() {
    let max_span: usize = std::env::args()
        .nth(1)
        .and_then(|a| a.parse().ok())
        .unwrap_or(512);
    let block = 32;
    let cfg = ModelConfig {
        vocab_size: 11,
        n_layers: 2,
        d_model: 32,
        n_heads: 2,
        d_ff: 128,
        block_size: block,
        max_span,
        ramp: 16,
        mode: SpanMode::ExpireSpan,
        fixed_span_length: None,
        dropout: 0.0,
        scaled_variant: false,
    };
    let mut model = Model::new(cfg, 9).expect("config is valid");
    // stand-in for a trained model whose spans collapsed well below L
    for l in model.layers.iter_mut() {
        l.predictor.as_mut().unwrap().b.data[0] = -3.0;
    }
    let tokens: Vec<usize> = {
        let mut rng = Rng::new(4);
        (0..3 * max_span).map(|_| rng.below(11)).collect()
    };
    println!(
        "forwarding {} tokens in blocks of {block}, max span {max_span}, spans ~{:.0}",
        tokens.len(),
        model.layers[0].predictor.as_ref().unwrap().predict_value(&vec![0.0; 32])
    );

    let mut run = |prune: bool| {
        let mut peak = 0usize;
        let timing = timed_batch(
            || {
                model.reset_state();
                let mut rng = Rng::new(0);
                for chunk in tokens.chunks(block) {
                    if prune {
                        model.prune_banks(model.next_position());
                    }
                    let mut tape = Tape::new();
                    let bound = model.bind(&mut tape);
                    let out = model
                        .forward_block(&mut tape, &bound, chunk, &ForwardOptions::default(), &mut rng, false)
                        .expect("forward");
                    peak = peak.max(out.stats.peak_bank);
                    model.detach_banks(&tape);
                }
            },
            5,
        );
        (timing, peak)
    };

    let (pruned, peak_pruned) = run(true);
    let (unpruned, peak_unpruned) = run(false);
    println!(
        "pruned:   median {:8.1} ms  (spread {:.1} ms)  peak bank {} entries",
        pruned.median_ms, pruned.spread_ms, peak_pruned
    );
    println!(
        "unpruned: median {:8.1} ms  (spread {:.1} ms)  peak bank {} entries",
        unpruned.median_ms, unpruned.spread_ms, peak_unpruned
    );
    let bound = max_span + 16 + block;
    println!(
        "speedup {:.2}x; pruned peak {} <= L + R + K = {}",
        unpruned.median_ms / pruned.median_ms,
        peak_pruned,
        bound
    );
}
