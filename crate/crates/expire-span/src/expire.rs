//! Learned memory expiration: span prediction, the soft ramp mask, attention
//! renormalization bookkeeping, block-boundary pruning, the span penalty with
//! its in-ramp timing, and the memory-size identity with a brute-force
//! counting oracle.
//!
//! A memory born at step `i` with span `e` keeps full attention weight while
//! `t - i <= e`, decays linearly to zero over the next `R` steps, and is
//! deleted for good once its weight hits zero at a block boundary. The ramp
//! is the only gradient path into `e`.

use crate::error::{Error, Result};
use crate::tensor::tape::{RowSrc, ScalarSrc, Tape, Var};
use crate::tensor::Tensor;

/// Predicts a lifetime in timesteps from a hidden state: `L * sigmoid(w.h + b)`,
/// or `L * sigmoid((w.h + b)/R)` in the scaled variant used for very large `L`
/// where tiny weight changes would otherwise swing spans violently.
#[derive(Clone, Debug)]
pub struct SpanPredictor {
    pub w: Tensor,
    pub b: Tensor,
    pub max_span: f64,
    pub ramp: f64,
    pub scaled_variant: bool,
}

impl SpanPredictor {
    /// Zero-initialized predictor: every span starts at L/2.
    pub fn new(d: usize, max_span: f64, ramp: f64, scaled_variant: bool) -> Self {
        assert!(ramp > 0.0 && ramp <= max_span, "need 0 < R <= L");
        SpanPredictor {
            w: Tensor::param(vec![d, 1], vec![0.0; d]),
            b: Tensor::param(vec![1], vec![0.0]),
            max_span,
            ramp,
            scaled_variant,
        }
    }

    /// Value-only span for a single hidden vector.
    pub fn predict_value(&self, h: &[f64]) -> f64 {
        assert_eq!(h.len(), self.w.data.len());
        let mut z = self.b.data[0];
        for (hi, wi) in h.iter().zip(&self.w.data) {
            z += hi * wi;
        }
        if self.scaled_variant {
            z /= self.ramp;
        }
        self.max_span * sigmoid(z)
    }

    /// Differentiable spans for a block of hidden rows: returns a 1-D var of
    /// length `rows(h)`, with gradients flowing into w, b, and h.
    pub fn predict(&self, tape: &mut Tape, w: Var, b: Var, h: Var) -> Result<Var> {
        let rows = tape.shape_of(h)[0];
        let z = tape.matmul(h, w)?;
        let z = tape.add_row_bias(z, b)?;
        let z = if self.scaled_variant { tape.scale(z, 1.0 / self.ramp) } else { z };
        let s = tape.sigmoid(z);
        let e = tape.scale(s, self.max_span);
        tape.reshape(e, vec![rows])
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Time left before memory `i` expires, seen from query time `t`.
pub fn remaining_span(e: f64, i: usize, t: usize) -> Result<f64> {
    if t < i {
        return Err(Error::Config(format!("query time {t} precedes birth {i}")));
    }
    Ok(e - (t - i) as f64)
}

/// Soft mask over remaining span: max(0, min(1, 1 + r/R)).
pub fn soft_mask(r: f64, ramp: f64) -> f64 {
    assert!(ramp > 0.0);
    (1.0 + r / ramp).clamp(0.0, 1.0)
}

/// Mask of memory `i` for query `t` given its frozen span.
pub fn mask_at(e: f64, i: usize, t: usize, ramp: f64) -> f64 {
    soft_mask(e - (t - i) as f64, ramp)
}

/// Where the value of a cached vector lives: on the current tape while the
/// step that created it is still open, or frozen once detached.
#[derive(Clone, Debug)]
pub enum Slot {
    Attached { var: Var, row: usize },
    Frozen(Vec<f64>),
}

impl Slot {
    pub fn as_row_src(&self) -> RowSrc {
        match self {
            Slot::Attached { var, row } => RowSrc::Node { var: *var, row: *row },
            Slot::Frozen(v) => RowSrc::Frozen(v.clone()),
        }
    }
}

/// One cached timestep: the hidden state that produced the span, per-layer
/// key/value rows, birth time, and the span itself. The span value is fixed
/// at creation for the entry's whole lifetime; the node handle keeps the
/// gradient linkage alive until the step boundary detaches it.
#[derive(Clone, Debug)]
pub struct MemoryEntry {
    pub birth: usize,
    pub span: f64,
    pub span_node: Option<(Var, usize)>,
    pub hidden: Slot,
    pub key: Slot,
    pub value: Slot,
}

/// Ordered ring of live memories for one layer.
#[derive(Clone, Debug, Default)]
pub struct MemoryBank {
    pub layer: usize,
    entries: Vec<MemoryEntry>,
    /// Tape epoch the attached slots belong to; stale handles are a bug.
    tape_epoch: Option<u64>,
    pub deleted_total: usize,
}

impl MemoryBank {
    pub fn new(layer: usize) -> Self {
        MemoryBank { layer, ..Default::default() }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[MemoryEntry] {
        &self.entries
    }

    pub fn clear(&mut self) {
        self.entries.clear();
        self.tape_epoch = None;
        self.deleted_total = 0;
    }

    pub fn push(&mut self, entry: MemoryEntry, tape_epoch: u64) {
        if let Some(last) = self.entries.last() {
            assert!(entry.birth > last.birth, "birth times must strictly increase");
        }
        match self.tape_epoch {
            None => self.tape_epoch = Some(tape_epoch),
            Some(e) => assert_eq!(e, tape_epoch, "bank holds handles from another tape"),
        }
        self.entries.push(entry);
    }

    pub fn assert_epoch(&self, tape: &Tape) {
        if self.entries.iter().any(|e| matches!(e.hidden, Slot::Attached { .. })) {
            assert_eq!(
                self.tape_epoch,
                Some(tape.epoch()),
                "bank has attached slots from a finished tape; detach first"
            );
        }
    }

    /// Delete every entry whose mask is exactly zero for the first query of
    /// the new block. Deletion is permanent; masks only decrease with time.
    pub fn prune(&mut self, block_start: usize, ramp: f64) -> usize {
        let before = self.entries.len();
        self.entries.retain(|e| mask_at(e.span, e.birth, block_start, ramp) > 0.0);
        let deleted = before - self.entries.len();
        self.deleted_total += deleted;
        deleted
    }

    /// Fixed-span variant: keep only memories within `span` steps of the new
    /// block's first query.
    pub fn prune_fixed(&mut self, block_start: usize, span: usize) -> usize {
        let before = self.entries.len();
        self.entries.retain(|e| block_start - e.birth <= span);
        let deleted = before - self.entries.len();
        self.deleted_total += deleted;
        deleted
    }

    /// Snapshot every attached slot into plain values. Called at step
    /// boundaries so cached state stops carrying gradient into finished
    /// tapes; values are preserved exactly.
    pub fn detach(&mut self, tape: &Tape) {
        for e in self.entries.iter_mut() {
            for slot in [&mut e.hidden, &mut e.key, &mut e.value] {
                if let Slot::Attached { var, row } = slot {
                    let w = tape.shape_of(*var)[1];
                    let data = tape.value(*var)[*row * w..(*row + 1) * w].to_vec();
                    *slot = Slot::Frozen(data);
                }
            }
            e.span_node = None;
        }
        self.tape_epoch = None;
    }

    pub fn span_values(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.span).collect()
    }

    /// Span sources for the bank in entry order, attached where possible.
    pub fn span_srcs(&self) -> Vec<ScalarSrc> {
        self.entries
            .iter()
            .map(|e| match e.span_node {
                Some((var, idx)) => ScalarSrc::Node { var, idx },
                None => ScalarSrc::Frozen(e.span),
            })
            .collect()
    }
}

/// Memories that are inside the ramp (0 < m < 1 strictly) for at least one
/// query of the block `[block_start, block_start + k)`. Each qualifying
/// memory appears exactly once regardless of how many queries see it.
///
/// Membership is decided on span values; the returned sources keep gradient
/// linkage where the entry is still attached.
pub fn in_ramp_sources(
    entries: impl Iterator<Item = (usize, f64, Option<(Var, usize)>)>,
    block_start: usize,
    k: usize,
    ramp: f64,
) -> Vec<ScalarSrc> {
    assert!(k > 0);
    let mut out = Vec::new();
    for (birth, span, node) in entries {
        let t_lo = block_start.max(birth);
        let t_hi = block_start + k - 1;
        let in_ramp = (t_lo..=t_hi).any(|t| {
            let d = (t - birth) as f64;
            d > span && d < span + ramp
        });
        if in_ramp {
            out.push(match node {
                Some((var, idx)) => ScalarSrc::Node { var, idx },
                None => ScalarSrc::Frozen(span),
            });
        }
    }
    out
}

/// Total span penalty for one block of one layer: alpha * sum(e_i) / T over
/// the in-ramp memories, as a differentiable scalar on the tape. Returns a
/// zero constant when nothing is in ramp.
pub fn aux_span_loss(
    tape: &mut Tape,
    in_ramp: &[ScalarSrc],
    alpha: f64,
    tokens_in_block: usize,
) -> Result<Var> {
    if alpha < 0.0 {
        return Err(Error::Config(format!("span loss coefficient must be >= 0, got {alpha}")));
    }
    if in_ramp.is_empty() || alpha == 0.0 {
        return Ok(tape.constant_scalar(0.0));
    }
    let spans = tape.gather_scalars(in_ramp.to_vec());
    let total = tape.sum_all(spans);
    Ok(tape.scale(total, alpha / tokens_in_block as f64))
}

/// Brute-force average memory size: for memories born at 0..N-1 with the
/// given spans, count |C_t| = #{i < t : m_ti > 0} for every t in 1..=T and
/// average. This is the authoritative count the closed form is tested
/// against.
pub fn memory_size_oracle(spans: &[f64], ramp: f64, horizon: usize) -> f64 {
    assert!(horizon >= spans.len(), "need T >= N");
    let mut total: u64 = 0;
    for t in 1..=horizon {
        for (i, &e) in spans.iter().enumerate().take(t.min(spans.len())) {
            if mask_at(e, i, t, ramp) > 0.0 {
                total += 1;
            }
        }
    }
    total as f64 / horizon as f64
}

/// Closed-form estimate of the average memory size: R - 1 + mean(floor(e_i)).
pub fn memory_size_closed_form(spans: &[f64], ramp: f64, horizon: usize) -> f64 {
    let sum_floor: f64 = spans.iter().map(|e| e.floor()).sum();
    ramp - 1.0 + sum_floor / horizon as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn predict_midpoint_at_zero_weights() {
        let p = SpanPredictor::new(4, 16384.0, 128.0, false);
        assert_eq!(p.predict_value(&[0.3, -1.0, 2.0, 0.0]), 8192.0);
        let p = SpanPredictor::new(4, 32768.0, 128.0, true);
        assert_eq!(p.predict_value(&[1.0; 4]), 16384.0);
    }

    #[test]
    fn predict_matches_sigmoid() {
        // w.h + b = 1, L = 100
        let mut p = SpanPredictor::new(1, 100.0, 10.0, false);
        p.w.data[0] = 1.0;
        let e = p.predict_value(&[1.0]);
        assert!((e - 73.10585786300049).abs() < 1e-9);
    }

    #[test]
    fn remaining_span_arithmetic() {
        assert_eq!(remaining_span(10.0, 0, 0).unwrap(), 10.0);
        assert_eq!(remaining_span(10.0, 0, 10).unwrap(), 0.0);
        assert!((remaining_span(73.1, 5, 40).unwrap() - 38.1).abs() < 1e-12);
        assert!(remaining_span(1.0, 5, 4).is_err());
    }

    #[test]
    fn soft_mask_exact_points() {
        let r = 128.0;
        assert_eq!(soft_mask(0.0, r), 1.0);
        assert_eq!(soft_mask(-r / 2.0, r), 0.5);
        assert_eq!(soft_mask(-r, r), 0.0);
        assert_eq!(soft_mask(r, r), 1.0);
    }

    #[test]
    fn prune_boundary_is_inclusive() {
        let mut bank = MemoryBank::new(0);
        bank.push(entry(0, 10.0), 1);
        // block start 26: m = max(0, min(1, 1 + (10-26)/16)) = 0 -> deleted
        let mut b1 = bank.clone();
        assert_eq!(b1.prune(26, 16.0), 1);
        assert_eq!(b1.len(), 0);
        // block start 25: m = 1/16 > 0 -> kept
        let mut b2 = bank.clone();
        assert_eq!(b2.prune(25, 16.0), 0);
        assert_eq!(b2.len(), 1);
        // empty bank
        let mut b3 = MemoryBank::new(0);
        assert_eq!(b3.prune(100, 16.0), 0);
    }

    #[test]
    fn aux_loss_arithmetic() {
        let mut tape = Tape::new();
        let srcs = vec![ScalarSrc::Frozen(100.0), ScalarSrc::Frozen(200.0)];
        let v = aux_span_loss(&mut tape, &srcs, 1e-6, 2).unwrap();
        assert!((tape.scalar_value(v) - 1.5e-4).abs() < 1e-18);
        let z = aux_span_loss(&mut tape, &srcs, 0.0, 2).unwrap();
        assert_eq!(tape.scalar_value(z), 0.0);
        let empty = aux_span_loss(&mut tape, &[], 1.0, 4).unwrap();
        assert_eq!(tape.scalar_value(empty), 0.0);
        assert!(aux_span_loss(&mut tape, &srcs, -1.0, 2).is_err());
    }

    fn entry(birth: usize, span: f64) -> MemoryEntry {
        MemoryEntry {
            birth,
            span,
            span_node: None,
            hidden: Slot::Frozen(vec![0.0]),
            key: Slot::Frozen(vec![0.0]),
            value: Slot::Frozen(vec![0.0]),
        }
    }

    #[test]
    fn oracle_counts_single_memory() {
        // e = 5.5, R = 2: live for t - i in 1..=7 (m > 0 iff d < 7.5)
        let avg = memory_size_oracle(&[5.5], 2.0, 20);
        assert!((avg - 7.0 / 20.0).abs() < 1e-12);
    }

    #[test]
    fn oracle_tiny_spans_approach_ramp_floor() {
        // all spans ~ 0: per-memory live count is R - 1 (d in 1..R-? d < e+R)
        let n = 2000;
        let spans = vec![1e-9; n];
        let avg = memory_size_oracle(&spans, 16.0, n);
        let closed = memory_size_closed_form(&spans, 16.0, n);
        assert!((closed - 15.0).abs() < 1e-9);
        assert!((avg - closed).abs() <= 1.2, "avg {avg} closed {closed}");
    }

    #[test]
    fn oracle_integer_spans_unit_ramp() {
        // R = 1 and integer spans: per-memory live count is exactly e_i + 1 - 1 = e_i
        // live: d < e + 1 and d >= 1 -> d in 1..=e
        let spans = vec![3.0, 5.0, 2.0, 7.0];
        let avg = memory_size_oracle(&spans, 1.0, 400);
        let per_memory: f64 = spans.iter().sum::<f64>();
        assert!((avg - per_memory / 400.0).abs() < 1e-12);
    }

    #[test]
    fn closed_form_tracks_oracle_with_slack() {
        let mut rng = crate::rng::Rng::new(20);
        let l = 100.0;
        let ramp = 16.0;
        let horizon = 5000;
        for _ in 0..20 {
            let spans: Vec<f64> = (0..horizon).map(|_| rng.uniform(0.0, l)).collect();
            let oracle = memory_size_oracle(&spans, ramp, horizon);
            let closed = memory_size_closed_form(&spans, ramp, horizon);
            let slack = (l + ramp) / horizon as f64 * 2.0 + 1.0;
            assert!(
                (oracle - closed).abs() <= slack,
                "oracle {oracle} closed {closed} slack {slack}"
            );
        }
    }

    #[test]
    fn in_ramp_membership_is_strict_and_once_per_block() {
        let ramp = 4.0;
        // block [10, 14): queries t = 10..13
        // e=2.0 born 0: d in 10..13, ramp is (2,6) -> all d outside -> not in ramp
        // e=9.5 born 0: ramp (9.5,13.5) -> d=10..13 inside -> in ramp (once)
        // e=10.0 born 0: ramp (10,14) -> d=11,12,13 strictly inside -> in ramp
        // e=13.0 born 0: ramp (13,17) -> no d in 10..13 strictly above 13 -> not
        let items = vec![
            (0usize, 2.0f64, None),
            (0, 9.5, None),
            (0, 10.0, None),
            (0, 13.0, None),
        ];
        let srcs = in_ramp_sources(items.into_iter(), 10, 4, ramp);
        assert_eq!(srcs.len(), 2);
        // boundary: d == e exactly (m == 1) is not in ramp; d == e + R (m == 0) is not
        let exact = vec![(0usize, 12.0f64, None), (0, 6.0, None)];
        let srcs = in_ramp_sources(exact.into_iter(), 10, 4, ramp);
        // e=12: d in 10..13, strictly above 12 is d=13 < 16 -> in ramp
        // e=6: ramp (6,10): d=10..13 -> none strictly below 10 -> not in ramp
        assert_eq!(srcs.len(), 1);
    }

    #[test]
    fn detach_preserves_values_exactly() {
        let mut tape = Tape::new();
        let t = Tensor::param(vec![2, 3], vec![1.5, -2.25, 3.0, 0.125, 7.0, -0.5]);
        let v = tape.leaf(&t);
        let mut bank = MemoryBank::new(0);
        bank.push(
            MemoryEntry {
                birth: 0,
                span: 4.0,
                span_node: None,
                hidden: Slot::Attached { var: v, row: 1 },
                key: Slot::Attached { var: v, row: 0 },
                value: Slot::Attached { var: v, row: 1 },
            },
            tape.epoch(),
        );
        bank.detach(&tape);
        match &bank.entries()[0].key {
            Slot::Frozen(d) => assert_eq!(d, &vec![1.5, -2.25, 3.0]),
            _ => panic!("still attached"),
        }
        match &bank.entries()[0].hidden {
            Slot::Frozen(d) => assert_eq!(d, &vec![0.125, 7.0, -0.5]),
            _ => panic!("still attached"),
        }
    }
}
