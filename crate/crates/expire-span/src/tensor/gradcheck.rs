//! Finite-difference verification of analytic gradients.
//!
//! Central differences (f(x+eps e_j) - f(x-eps e_j)) / 2eps against whatever
//! `backward` produced, coordinate by coordinate. The checker never touches
//! the implementation path it verifies: it only re-evaluates the closure.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Max over coordinates of |analytic - numeric| / max(1, |numeric|).
///
/// `f` maps a parameter vector to a scalar and must be deterministic.
/// `analytic` is the already-computed gradient being verified.
pub fn grad_check<F>(mut f: F, x: &Tensor, analytic: &[f64], eps: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    assert!(
        (1e-6..=1e-3).contains(&eps),
        "eps {eps} outside the sensible range for 64-bit floats"
    );
    assert_eq!(analytic.len(), x.data.len());
    let mut probe = x.data.clone();
    let mut worst = 0.0f64;
    for j in 0..probe.len() {
        let orig = probe[j];
        probe[j] = orig + eps;
        let up = f(&probe)?;
        probe[j] = orig - eps;
        let down = f(&probe)?;
        probe[j] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!("grad_check probe at coordinate {j}")));
        }
        let numeric = (up - down) / (2.0 * eps);
        let rel = (analytic[j] - numeric).abs() / numeric.abs().max(1.0);
        if rel > worst {
            worst = rel;
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::tape::Tape;
    use crate::rng::Rng;

    #[test]
    fn square_function() {
        // f = x^2 at x = 3: analytic 2x = 6.
        let x = Tensor::param(vec![1], vec![3.0]);
        let err = grad_check(|v| Ok(v[0] * v[0]), &x, &[6.0], 1e-5).unwrap();
        assert!(err <= 1e-8, "err {err}");
    }

    #[test]
    fn ramp_interior_is_smooth() {
        let x = Tensor::param(vec![1], vec![0.5]);
        let f = |v: &[f64]| -> crate::error::Result<f64> {
            let mut tape = Tape::new();
            let t = Tensor::param(vec![1], v.to_vec());
            let xv = tape.leaf(&t);
            let y = tape.clamp01_ramp(xv);
            Ok(tape.scalar_value(y))
        };
        // analytic gradient inside (0,1) is exactly 1
        let err = grad_check(f, &x, &[1.0], 1e-5).unwrap();
        assert!(err <= 1e-8, "err {err}");
    }

    // x = 0 exactly sits on the ramp kink, where central differences
    // straddle two pieces; such points are excluded from checking by
    // contract, so there is no test at the kink.

    #[test]
    fn nonfinite_probe_is_an_error() {
        // sqrt below zero at the downward probe produces NaN
        let x = Tensor::param(vec![1], vec![0.0]);
        let res = grad_check(|v| Ok(v[0].sqrt()), &x, &[0.0], 1e-5);
        assert!(matches!(res, Err(crate::error::Error::NonFinite(_))));
    }

    /// Every differentiable op, checked against central differences at
    /// interior points over many random draws.
    #[test]
    fn ops_match_finite_differences() {
        let mut rng = Rng::new(1234);
        let mut worst_overall = 0.0f64;
        for seed in 0..100u64 {
            let _ = seed;
            // random matmul pair
            let m = rng.range_inclusive(1, 4);
            let k = rng.range_inclusive(1, 4);
            let n = rng.range_inclusive(1, 4);
            let mut a = Tensor::param(vec![m, k], vec![0.0; m * k]);
            rng.fill_uniform(&mut a.data, -2.0, 2.0);
            let mut b = Tensor::param(vec![k, n], vec![0.0; k * n]);
            rng.fill_uniform(&mut b.data, -2.0, 2.0);
            // weights for a scalarizing projection so the loss mixes outputs
            let mut w = vec![0.0; m * n];
            rng.fill_uniform(&mut w, -1.0, 1.0);

            let run = |av: &[f64], bv: &[f64]| -> crate::error::Result<(f64, Vec<f64>, Vec<f64>)> {
                let mut tape = Tape::new();
                let ta = Tensor::param(vec![m, k], av.to_vec());
                let tb = Tensor::param(vec![k, n], bv.to_vec());
                let va = tape.leaf(&ta);
                let vb = tape.leaf(&tb);
                let prod = tape.matmul(va, vb)?;
                let wv = tape.constant(vec![m, n], w.clone());
                let mixed = tape.mul(prod, wv)?;
                let sig = tape.sigmoid(mixed);
                let loss = tape.sum_all(sig);
                tape.backward(loss)?;
                Ok((
                    tape.scalar_value(loss),
                    tape.grad_of(va).unwrap().to_vec(),
                    tape.grad_of(vb).unwrap().to_vec(),
                ))
            };
            let (_, ga, gb) = run(&a.data, &b.data).unwrap();
            let b_data = b.data.clone();
            let err_a =
                grad_check(|av| run(av, &b_data).map(|r| r.0), &a, &ga, 1e-5).unwrap();
            let a_data = a.data.clone();
            let err_b =
                grad_check(|bv| run(&a_data, bv).map(|r| r.0), &b, &gb, 1e-5).unwrap();
            worst_overall = worst_overall.max(err_a).max(err_b);
        }
        assert!(worst_overall <= 1e-6, "matmul chain worst rel err {worst_overall}");
    }

    #[test]
    fn fused_row_ops_match_finite_differences() {
        let mut rng = Rng::new(99);
        let mut worst = 0.0f64;
        for _ in 0..100 {
            let rows = rng.range_inclusive(1, 3);
            let cols = rng.range_inclusive(2, 5);
            let mut x = Tensor::param(vec![rows, cols], vec![0.0; rows * cols]);
            rng.fill_uniform(&mut x.data, -2.0, 2.0);
            let mut mask = Tensor::param(vec![rows, cols], vec![0.0; rows * cols]);
            // keep mask coordinates away from the renormalizer's zero set
            rng.fill_uniform(&mut mask.data, 0.2, 1.0);
            let live = vec![true; rows * cols];
            let mut w = vec![0.0; rows * cols];
            rng.fill_uniform(&mut w, -1.0, 1.0);

            let live2 = live.clone();
            let run = |xv: &[f64], mv: &[f64]| -> crate::error::Result<(f64, Vec<f64>, Vec<f64>)> {
                let mut tape = Tape::new();
                let tx = Tensor::param(vec![rows, cols], xv.to_vec());
                let tm = Tensor::param(vec![rows, cols], mv.to_vec());
                let vx = tape.leaf(&tx);
                let vm = tape.leaf(&tm);
                let sm = tape.masked_softmax_rows(vx, &live2)?;
                let rn = tape.renorm_rows(sm, vm, &live2)?;
                let wv = tape.constant(vec![rows, cols], w.clone());
                let mixed = tape.mul(rn, wv)?;
                let loss = tape.sum_all(mixed);
                tape.backward(loss)?;
                Ok((
                    tape.scalar_value(loss),
                    tape.grad_of(vx).unwrap().to_vec(),
                    tape.grad_of(vm).unwrap().to_vec(),
                ))
            };
            let (_, gx, gm) = run(&x.data, &mask.data).unwrap();
            let m_data = mask.data.clone();
            let err_x = grad_check(|v| run(v, &m_data).map(|r| r.0), &x, &gx, 1e-5).unwrap();
            let x_data = x.data.clone();
            let err_m = grad_check(|v| run(&x_data, v).map(|r| r.0), &mask, &gm, 1e-5).unwrap();
            worst = worst.max(err_x).max(err_m);
        }
        assert!(worst <= 1e-6, "softmax/renorm worst rel err {worst}");
    }

    #[test]
    fn norm_gelu_embed_match_finite_differences() {
        let mut rng = Rng::new(555);
        let mut worst = 0.0f64;
        for _ in 0..100 {
            let rows = rng.range_inclusive(1, 3);
            let cols = rng.range_inclusive(2, 5);
            let vocab = 7;
            let ids: Vec<usize> = (0..rows).map(|_| rng.below(vocab)).collect();
            let mut table = Tensor::param(vec![vocab, cols], vec![0.0; vocab * cols]);
            rng.fill_uniform(&mut table.data, -1.5, 1.5);
            let mut gain = Tensor::param(vec![cols], vec![0.0; cols]);
            rng.fill_uniform(&mut gain.data, 0.5, 1.5);
            let mut bias = Tensor::param(vec![cols], vec![0.0; cols]);
            rng.fill_uniform(&mut bias.data, -0.5, 0.5);
            let mut w = vec![0.0; rows * cols];
            rng.fill_uniform(&mut w, -1.0, 1.0);

            let ids2 = ids.clone();
            let run = |tv: &[f64],
                       gv: &[f64],
                       bv: &[f64]|
             -> crate::error::Result<(f64, Vec<f64>, Vec<f64>, Vec<f64>)> {
                let mut tape = Tape::new();
                let tt = Tensor::param(vec![vocab, cols], tv.to_vec());
                let tg = Tensor::param(vec![cols], gv.to_vec());
                let tb = Tensor::param(vec![cols], bv.to_vec());
                let vt = tape.leaf(&tt);
                let vg = tape.leaf(&tg);
                let vb = tape.leaf(&tb);
                let emb = tape.embed(vt, ids2.clone())?;
                let normed = tape.layer_norm(emb, vg, vb)?;
                let act = tape.gelu(normed);
                let wv = tape.constant(vec![rows, cols], w.clone());
                let mixed = tape.mul(act, wv)?;
                let loss = tape.sum_all(mixed);
                tape.backward(loss)?;
                Ok((
                    tape.scalar_value(loss),
                    tape.grad_of(vt).unwrap().to_vec(),
                    tape.grad_of(vg).unwrap().to_vec(),
                    tape.grad_of(vb).unwrap().to_vec(),
                ))
            };
            let (_, gt, gg, gb) = run(&table.data, &gain.data, &bias.data).unwrap();
            let (gd, bd) = (gain.data.clone(), bias.data.clone());
            let err_t = grad_check(|v| run(v, &gd, &bd).map(|r| r.0), &table, &gt, 1e-5).unwrap();
            let (td, bd) = (table.data.clone(), bias.data.clone());
            let err_g = grad_check(|v| run(&td, v, &bd).map(|r| r.0), &gain, &gg, 1e-5).unwrap();
            let (td, gd) = (table.data.clone(), gain.data.clone());
            let err_b = grad_check(|v| run(&td, &gd, v).map(|r| r.0), &bias, &gb, 1e-5).unwrap();
            worst = worst.max(err_t).max(err_g).max(err_b);
        }
        assert!(worst <= 1e-6, "norm/gelu/embed worst rel err {worst}");
    }

    #[test]
    fn arithmetic_softmax_dropout_match_finite_differences() {
        let mut rng = Rng::new(2468);
        let mut worst = 0.0f64;
        for _ in 0..100 {
            let rows = rng.range_inclusive(1, 3);
            let cols = rng.range_inclusive(2, 4);
            let n = rows * cols;
            let mut a = Tensor::param(vec![rows, cols], vec![0.0; n]);
            rng.fill_uniform(&mut a.data, -2.0, 2.0);
            let mut b = Tensor::param(vec![rows, cols], vec![0.0; n]);
            // denominator kept away from zero
            rng.fill_uniform(&mut b.data, 0.5, 2.5);
            let mut bias = Tensor::param(vec![cols], vec![0.0; cols]);
            rng.fill_uniform(&mut bias.data, -1.0, 1.0);
            let keep_seed = rng.next_u64();
            let mut w = vec![0.0; n];
            rng.fill_uniform(&mut w, -1.0, 1.0);

            let run = |av: &[f64], bv: &[f64], cv: &[f64]| -> crate::error::Result<(f64, Vec<f64>, Vec<f64>, Vec<f64>)> {
                let mut tape = Tape::new();
                let ta = Tensor::param(vec![rows, cols], av.to_vec());
                let tb = Tensor::param(vec![rows, cols], bv.to_vec());
                let tc = Tensor::param(vec![cols], cv.to_vec());
                let va = tape.leaf(&ta);
                let vb = tape.leaf(&tb);
                let vc = tape.leaf(&tc);
                let sum = tape.add(va, vb)?;
                let diff = tape.sub(sum, vb)?;
                let quot = tape.div(diff, vb)?;
                let biased = tape.add_row_bias(quot, vc)?;
                let soft = tape.softmax_rows(biased)?;
                let dropped = tape.dropout(soft, 0.25, &mut Rng::new(keep_seed));
                let wv = tape.constant(vec![rows, cols], w.clone());
                let mixed = tape.mul(dropped, wv)?;
                let scaled = tape.scale(mixed, 1.5);
                let loss = tape.sum_all(scaled);
                tape.backward(loss)?;
                Ok((
                    tape.scalar_value(loss),
                    tape.grad_of(va).unwrap().to_vec(),
                    tape.grad_of(vb).unwrap().to_vec(),
                    tape.grad_of(vc).unwrap().to_vec(),
                ))
            };
            let (_, ga, gb, gc) = run(&a.data, &b.data, &bias.data).unwrap();
            let (bd, cd) = (b.data.clone(), bias.data.clone());
            let err_a = grad_check(|v| run(v, &bd, &cd).map(|r| r.0), &a, &ga, 1e-5).unwrap();
            let (ad, cd) = (a.data.clone(), bias.data.clone());
            let err_b = grad_check(|v| run(&ad, v, &cd).map(|r| r.0), &b, &gb, 1e-5).unwrap();
            let (ad, bd) = (a.data.clone(), b.data.clone());
            let err_c = grad_check(|v| run(&ad, &bd, v).map(|r| r.0), &bias, &gc, 1e-5).unwrap();
            worst = worst.max(err_a).max(err_b).max(err_c);
        }
        assert!(worst <= 1e-6, "arithmetic chain worst rel err {worst}");
    }

    #[test]
    fn ramp_mask_and_gathers_match_finite_differences() {
        let mut rng = Rng::new(777);
        let mut worst = 0.0f64;
        for _ in 0..100 {
            let cols = rng.range_inclusive(2, 5);
            let rows = rng.range_inclusive(1, 3);
            let ramp = 4.0;
            let mut spans = Tensor::param(vec![cols], vec![0.0; cols]);
            rng.fill_uniform(&mut spans.data, 1.0, 9.0);
            // distances put every cell strictly inside the ramp interior,
            // away from the kinks so finite differences are valid
            let dists: Vec<f64> = (0..rows * cols)
                .map(|i| spans.data[i % cols] + rng.uniform(0.5, ramp - 0.5))
                .collect();
            let mut w = vec![0.0; rows * cols];
            rng.fill_uniform(&mut w, -1.0, 1.0);

            let d2 = dists.clone();
            let run = |sv: &[f64]| -> crate::error::Result<(f64, Vec<f64>)> {
                let mut tape = Tape::new();
                let ts = Tensor::param(vec![cols], sv.to_vec());
                let vs = tape.leaf(&ts);
                let m = tape.ramp_mask(vs, d2.clone(), rows, ramp)?;
                let wv = tape.constant(vec![rows, cols], w.clone());
                let mixed = tape.mul(m, wv)?;
                let loss = tape.sum_all(mixed);
                tape.backward(loss)?;
                Ok((tape.scalar_value(loss), tape.grad_of(vs).unwrap().to_vec()))
            };
            let (_, gs) = run(&spans.data).unwrap();
            let err = grad_check(|v| run(v).map(|r| r.0), &spans, &gs, 1e-5).unwrap();
            worst = worst.max(err);
        }
        assert!(worst <= 1e-6, "ramp mask worst rel err {worst}");
    }
}
