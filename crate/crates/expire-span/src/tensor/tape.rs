//! Recording tape for reverse-mode differentiation.
//!
//! Forward ops compute eagerly and append a record; `backward` replays the
//! records once, in reverse order, accumulating gradients into every node
//! that requires them. Graph construction is single-threaded; one tape per
//! training worker.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

static TAPE_COUNTER: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a tape. Only valid for the tape that created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// A row taken either from a live tape node or from frozen (detached) data.
#[derive(Clone, Debug)]
pub enum RowSrc {
    Node { var: Var, row: usize },
    Frozen(Vec<f64>),
}

/// A scalar taken either from a live tape node or from a frozen value.
#[derive(Clone, Copy, Debug)]
pub enum ScalarSrc {
    Node { var: Var, idx: usize },
    Frozen(f64),
}

enum Op {
    Leaf,
    /// out = a[m,k] * b[k,n]
    Matmul { a: Var, b: Var },
    /// out = a[m,k] * b[n,k]^T
    MatmulNT { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Div { a: Var, b: Var },
    Scale { a: Var, c: f64 },
    /// bias (len n) added to every row of a [m,n]
    AddRowBias { a: Var, bias: Var },
    Sigmoid { a: Var },
    /// elementwise max(0, min(1, x)); gradient 1 strictly inside (0,1), else 0
    Clamp01Ramp { a: Var },
    Gelu { a: Var },
    /// row-wise layer norm; saved = (mean, rstd) per row
    LayerNorm { a: Var, gain: Var, bias: Var, saved: Vec<(f64, f64)> },
    /// stable softmax over the last axis
    Softmax { a: Var },
    /// softmax over the last axis restricted to `live` cells; dead cells are exactly 0
    MaskedSoftmax { a: Var, live: Vec<bool> },
    /// out_tj = m_tj a_tj / sum_j m_tj a_tj over live cells
    RenormRows { a: Var, m: Var, live: Vec<bool> },
    /// out_tj = clamp01(1 + (spans_j - dist_tj) / ramp)
    RampMask { spans: Var, rows: usize, ramp: f64 },
    /// out = scores + table[idx], idx precomputed per cell
    PosBias { scores: Var, table: Var, idx: Vec<usize> },
    /// out rows = table[ids]
    Embed { table: Var, ids: Vec<usize> },
    /// scalar sum over scored rows of (logsumexp(row) - row[target])
    CrossEntropySum { logits: Var, targets: Vec<usize>, scored: Vec<bool> },
    SumAll { a: Var },
    Reshape { a: Var },
    /// concatenate along axis 0; parts share trailing shape
    ConcatRows { parts: Vec<Var> },
    /// concatenate 2-D parts along axis 1; parts share row count
    ConcatCols { parts: Vec<Var> },
    SliceCols { a: Var, start: usize, len: usize },
    GatherRows { sources: Vec<RowSrc>, width: usize },
    GatherScalars { sources: Vec<ScalarSrc> },
    Dropout { a: Var, keep: Vec<bool>, scale: f64 },
}

struct Record {
    op: Op,
    out: Var,
}

pub struct Tape {
    id: u64,
    shapes: Vec<Vec<usize>>,
    datas: Vec<Vec<f64>>,
    grads: Vec<Option<Vec<f64>>>,
    requires: Vec<bool>,
    records: Vec<Record>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: TAPE_COUNTER.fetch_add(1, Ordering::Relaxed),
            shapes: Vec::new(),
            datas: Vec::new(),
            grads: Vec::new(),
            requires: Vec::new(),
            records: Vec::new(),
        }
    }

    /// Identity of this tape; bank slots remember it to catch stale handles.
    pub fn epoch(&self) -> u64 {
        self.id
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>, requires: bool) -> Var {
        let var = Var(self.shapes.len());
        self.shapes.push(shape);
        self.datas.push(data);
        self.grads.push(None);
        self.requires.push(requires);
        self.records.push(Record { op, out: var });
        var
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Var {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        self.push(Op::Leaf, shape, data, false)
    }

    pub fn constant_scalar(&mut self, v: f64) -> Var {
        self.constant(vec![1], vec![v])
    }

    /// Bind a tensor as a leaf; differentiable iff the tensor requires grad.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(Op::Leaf, t.shape.clone(), t.data.clone(), t.requires_grad)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.datas[v.0]
    }

    pub fn shape_of(&self, v: Var) -> &[usize] {
        &self.shapes[v.0]
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        debug_assert_eq!(self.datas[v.0].len(), 1);
        self.datas[v.0][0]
    }

    pub fn grad_of(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    fn rows_cols(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = &self.shapes[v.0];
        match s.len() {
            1 => Ok((1, s[0])),
            2 => Ok((s[0], s[1])),
            _ => Err(Error::shape(op, format!("expected 1-D or 2-D, got {s:?}"))),
        }
    }

    // ── forward ops ─────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.rows_cols(a, "matmul")?;
        let (kb, n) = self.rows_cols(b, "matmul")?;
        if ka != kb {
            return Err(Error::shape("matmul", format!("inner extents {ka} vs {kb}")));
        }
        let mut out = vec![0.0; m * n];
        {
            let da = &self.datas[a.0];
            let db = &self.datas[b.0];
            for i in 0..m {
                for p in 0..ka {
                    let aip = da[i * ka + p];
                    if aip == 0.0 {
                        continue;
                    }
                    let brow = &db[p * n..(p + 1) * n];
                    let orow = &mut out[i * n..(i + 1) * n];
                    for j in 0..n {
                        orow[j] += aip * brow[j];
                    }
                }
            }
        }
        let req = self.requires[a.0] || self.requires[b.0];
        Ok(self.push(Op::Matmul { a, b }, vec![m, n], out, req))
    }

    /// a[m,k] times b[n,k] transposed: out[m,n].
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.rows_cols(a, "matmul_nt")?;
        let (n, kb) = self.rows_cols(b, "matmul_nt")?;
        if ka != kb {
            return Err(Error::shape("matmul_nt", format!("inner extents {ka} vs {kb}")));
        }
        let mut out = vec![0.0; m * n];
        {
            let da = &self.datas[a.0];
            let db = &self.datas[b.0];
            for i in 0..m {
                let arow = &da[i * ka..(i + 1) * ka];
                for j in 0..n {
                    let brow = &db[j * ka..(j + 1) * ka];
                    let mut acc = 0.0;
                    for p in 0..ka {
                        acc += arow[p] * brow[p];
                    }
                    out[i * n + j] = acc;
                }
            }
        }
        let req = self.requires[a.0] || self.requires[b.0];
        Ok(self.push(Op::MatmulNT { a, b }, vec![m, n], out, req))
    }

    fn elementwise(&mut self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shapes[a.0] != self.shapes[b.0] {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shapes[a.0], self.shapes[b.0]),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "add")?;
        let data: Vec<f64> =
            self.datas[a.0].iter().zip(&self.datas[b.0]).map(|(x, y)| x + y).collect();
        let req = self.requires[a.0] || self.requires[b.0];
        let shape = self.shapes[a.0].clone();
        Ok(self.push(Op::Add { a, b }, shape, data, req))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "sub")?;
        let data: Vec<f64> =
            self.datas[a.0].iter().zip(&self.datas[b.0]).map(|(x, y)| x - y).collect();
        let req = self.requires[a.0] || self.requires[b.0];
        let shape = self.shapes[a.0].clone();
        Ok(self.push(Op::Sub { a, b }, shape, data, req))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "mul")?;
        let data: Vec<f64> =
            self.datas[a.0].iter().zip(&self.datas[b.0]).map(|(x, y)| x * y).collect();
        let req = self.requires[a.0] || self.requires[b.0];
        let shape = self.shapes[a.0].clone();
        Ok(self.push(Op::Mul { a, b }, shape, data, req))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "div")?;
        let data: Vec<f64> =
            self.datas[a.0].iter().zip(&self.datas[b.0]).map(|(x, y)| x / y).collect();
        let req = self.requires[a.0] || self.requires[b.0];
        let shape = self.shapes[a.0].clone();
        Ok(self.push(Op::Div { a, b }, shape, data, req))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data: Vec<f64> = self.datas[a.0].iter().map(|x| x * c).collect();
        let req = self.requires[a.0];
        let shape = self.shapes[a.0].clone();
        self.push(Op::Scale { a, c }, shape, data, req)
    }

    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.rows_cols(a, "add_row_bias")?;
        if self.datas[bias.0].len() != n {
            return Err(Error::shape(
                "add_row_bias",
                format!("bias length {} vs row width {n}", self.datas[bias.0].len()),
            ));
        }
        let mut data = self.datas[a.0].clone();
        {
            let db = &self.datas[bias.0];
            for i in 0..m {
                for j in 0..n {
                    data[i * n + j] += db[j];
                }
            }
        }
        let req = self.requires[a.0] || self.requires[bias.0];
        let shape = self.shapes[a.0].clone();
        Ok(self.push(Op::AddRowBias { a, bias }, shape, data, req))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let data: Vec<f64> = self.datas[a.0]
            .iter()
            .map(|&x| {
                // Branch keeps exp arguments non-positive for stability.
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            })
            .collect();
        let req = self.requires[a.0];
        let shape = self.shapes[a.0].clone();
        self.push(Op::Sigmoid { a }, shape, data, req)
    }

    pub fn clamp01_ramp(&mut self, a: Var) -> Var {
        let data: Vec<f64> = self.datas[a.0].iter().map(|&x| x.clamp(0.0, 1.0)).collect();
        let req = self.requires[a.0];
        let shape = self.shapes[a.0].clone();
        self.push(Op::Clamp01Ramp { a }, shape, data, req)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let data: Vec<f64> = self.datas[a.0].iter().map(|&x| gelu_fwd(x)).collect();
        let req = self.requires[a.0];
        let shape = self.shapes[a.0].clone();
        self.push(Op::Gelu { a }, shape, data, req)
    }

    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.rows_cols(a, "layer_norm")?;
        if self.datas[gain.0].len() != n || self.datas[bias.0].len() != n {
            return Err(Error::shape("layer_norm", "gain/bias length"));
        }
        if n == 0 {
            return Err(Error::EmptyAxis);
        }
        let eps = 1e-5;
        let mut data = vec![0.0; m * n];
        let mut saved = Vec::with_capacity(m);
        {
            let da = &self.datas[a.0];
            let dg = &self.datas[gain.0];
            let db = &self.datas[bias.0];
            for i in 0..m {
                let row = &da[i * n..(i + 1) * n];
                let mean = row.iter().sum::<f64>() / n as f64;
                let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
                let rstd = 1.0 / (var + eps).sqrt();
                saved.push((mean, rstd));
                for j in 0..n {
                    data[i * n + j] = (row[j] - mean) * rstd * dg[j] + db[j];
                }
            }
        }
        let req = self.requires[a.0] || self.requires[gain.0] || self.requires[bias.0];
        let shape = self.shapes[a.0].clone();
        Ok(self.push(Op::LayerNorm { a, gain, bias, saved }, shape, data, req))
    }

    /// Stable softmax over the last axis; rows sum to 1.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.rows_cols(a, "softmax")?;
        if n == 0 {
            return Err(Error::EmptyAxis);
        }
        let mut data = vec![0.0; m * n];
        {
            let da = &self.datas[a.0];
            for i in 0..m {
                let row = &da[i * n..(i + 1) * n];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..n {
                    let e = (row[j] - max).exp();
                    data[i * n + j] = e;
                    sum += e;
                }
                for j in 0..n {
                    data[i * n + j] /= sum;
                }
            }
        }
        let req = self.requires[a.0];
        let shape = self.shapes[a.0].clone();
        Ok(self.push(Op::Softmax { a }, shape, data, req))
    }

    /// Softmax over the live cells of each row; dead cells produce exactly 0.
    /// The arithmetic only visits live cells, so removing dead cells from the
    /// input leaves live outputs bit-identical.
    pub fn masked_softmax_rows(&mut self, a: Var, live: &[bool]) -> Result<Var> {
        let (m, n) = self.rows_cols(a, "masked_softmax")?;
        if live.len() != m * n {
            return Err(Error::shape("masked_softmax", "mask length"));
        }
        let mut data = vec![0.0; m * n];
        {
            let da = &self.datas[a.0];
            for i in 0..m {
                let row = &da[i * n..(i + 1) * n];
                let lrow = &live[i * n..(i + 1) * n];
                let mut max = f64::NEG_INFINITY;
                for j in 0..n {
                    if lrow[j] && row[j] > max {
                        max = row[j];
                    }
                }
                if max == f64::NEG_INFINITY {
                    return Err(Error::DegenerateRow { row: i });
                }
                let mut sum = 0.0;
                for j in 0..n {
                    if lrow[j] {
                        let e = (row[j] - max).exp();
                        data[i * n + j] = e;
                        sum += e;
                    }
                }
                for j in 0..n {
                    if lrow[j] {
                        data[i * n + j] /= sum;
                    }
                }
            }
        }
        let req = self.requires[a.0];
        let shape = self.shapes[a.0].clone();
        Ok(self.push(Op::MaskedSoftmax { a, live: live.to_vec() }, shape, data, req))
    }

    /// Reweight post-softmax attention rows by the mask and renormalize:
    /// out_tj = m_tj a_tj / sum_j m_tj a_tj. Rows where the weighted sum is
    /// zero have every live memory expired.
    pub fn renorm_rows(&mut self, a: Var, m: Var, live: &[bool]) -> Result<Var> {
        let (rows, cols) = self.rows_cols(a, "renorm_rows")?;
        self.elementwise(a, m, "renorm_rows")?;
        if live.len() != rows * cols {
            return Err(Error::shape("renorm_rows", "mask length"));
        }
        let mut data = vec![0.0; rows * cols];
        {
            let da = &self.datas[a.0];
            let dm = &self.datas[m.0];
            for i in 0..rows {
                let base = i * cols;
                let mut sum = 0.0;
                for j in 0..cols {
                    if live[base + j] {
                        sum += dm[base + j] * da[base + j];
                    }
                }
                if sum == 0.0 {
                    return Err(Error::DegenerateRow { row: i });
                }
                for j in 0..cols {
                    if live[base + j] {
                        data[base + j] = dm[base + j] * da[base + j] / sum;
                    }
                }
            }
        }
        let req = self.requires[a.0] || self.requires[m.0];
        let shape = self.shapes[a.0].clone();
        Ok(self.push(Op::RenormRows { a, m, live: live.to_vec() }, shape, data, req))
    }

    /// Soft expiry mask from spans: out_tj = clamp01(1 + (spans_j - dist_tj)/ramp).
    pub fn ramp_mask(&mut self, spans: Var, dists: Vec<f64>, rows: usize, ramp: f64) -> Result<Var> {
        let cols = self.datas[spans.0].len();
        if dists.len() != rows * cols {
            return Err(Error::shape("ramp_mask", "distance matrix size"));
        }
        assert!(ramp > 0.0);
        let mut data = vec![0.0; rows * cols];
        {
            let ds = &self.datas[spans.0];
            for t in 0..rows {
                for j in 0..cols {
                    data[t * cols + j] =
                        (1.0 + (ds[j] - dists[t * cols + j]) / ramp).clamp(0.0, 1.0);
                }
            }
        }
        let req = self.requires[spans.0];
        Ok(self.push(Op::RampMask { spans, rows, ramp }, vec![rows, cols], data, req))
    }

    /// Add a learned bias looked up per cell: out = scores + table[idx].
    pub fn pos_bias(&mut self, scores: Var, table: Var, idx: Vec<usize>) -> Result<Var> {
        let numel = self.datas[scores.0].len();
        if idx.len() != numel {
            return Err(Error::shape("pos_bias", "index matrix size"));
        }
        let tbl_len = self.datas[table.0].len();
        if let Some(bad) = idx.iter().find(|&&i| i >= tbl_len) {
            return Err(Error::shape("pos_bias", format!("index {bad} out of table {tbl_len}")));
        }
        let mut data = self.datas[scores.0].clone();
        {
            let tb = &self.datas[table.0];
            for (v, &i) in data.iter_mut().zip(&idx) {
                *v += tb[i];
            }
        }
        let req = self.requires[scores.0] || self.requires[table.0];
        let shape = self.shapes[scores.0].clone();
        Ok(self.push(Op::PosBias { scores, table, idx }, shape, data, req))
    }

    /// Embedding lookup with scatter-add backward.
    pub fn embed(&mut self, table: Var, ids: Vec<usize>) -> Result<Var> {
        let (v, d) = self.rows_cols(table, "embed")?;
        if let Some(bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::shape("embed", format!("token id {bad} out of vocab {v}")));
        }
        let n = ids.len();
        let mut data = vec![0.0; n * d];
        {
            let dt = &self.datas[table.0];
            for (r, &id) in ids.iter().enumerate() {
                data[r * d..(r + 1) * d].copy_from_slice(&dt[id * d..(id + 1) * d]);
            }
        }
        let req = self.requires[table.0];
        Ok(self.push(Op::Embed { table, ids }, vec![n, d], data, req))
    }

    /// Sum of per-row cross-entropy (nats) over scored rows, with integer
    /// targets. Returns the scalar node and the number of scored rows.
    pub fn cross_entropy_sum(
        &mut self,
        logits: Var,
        targets: Vec<usize>,
        scored: Vec<bool>,
    ) -> Result<(Var, usize)> {
        let (m, v) = self.rows_cols(logits, "cross_entropy")?;
        if targets.len() != m || scored.len() != m {
            return Err(Error::shape("cross_entropy", "targets/mask length"));
        }
        if let Some(bad) = targets.iter().zip(&scored).find(|(&t, &s)| s && t >= v) {
            return Err(Error::shape("cross_entropy", format!("target {} out of vocab {v}", bad.0)));
        }
        let mut total = 0.0;
        let mut count = 0;
        {
            let dl = &self.datas[logits.0];
            for i in 0..m {
                if !scored[i] {
                    continue;
                }
                let row = &dl[i * v..(i + 1) * v];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                total += lse - row[targets[i]];
                count += 1;
            }
        }
        let req = self.requires[logits.0];
        let out = self.push(Op::CrossEntropySum { logits, targets, scored }, vec![1], vec![total], req);
        Ok((out, count))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let total = self.datas[a.0].iter().sum();
        let req = self.requires[a.0];
        self.push(Op::SumAll { a }, vec![1], vec![total], req)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.datas[a.0].len() {
            return Err(Error::shape("reshape", format!("{shape:?} vs {} elements", self.datas[a.0].len())));
        }
        let data = self.datas[a.0].clone();
        let req = self.requires[a.0];
        Ok(self.push(Op::Reshape { a }, shape, data, req))
    }

    /// Concatenate along axis 0 (works for 1-D vectors and 2-D matrices).
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        assert!(!parts.is_empty());
        let trailing: Vec<usize> = self.shapes[parts[0].0][1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        let mut req = false;
        for &p in parts {
            if self.shapes[p.0][1..] != trailing[..] {
                return Err(Error::shape("concat_rows", "trailing shape mismatch"));
            }
            lead += self.shapes[p.0][0];
            data.extend_from_slice(&self.datas[p.0]);
            req |= self.requires[p.0];
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&trailing);
        Ok(self.push(Op::ConcatRows { parts: parts.to_vec() }, shape, data, req))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        assert!(!parts.is_empty());
        let (rows, _) = self.rows_cols(parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0;
        let mut req = false;
        for &p in parts {
            let (r, c) = self.rows_cols(p, "concat_cols")?;
            if r != rows {
                return Err(Error::shape("concat_cols", "row count mismatch"));
            }
            widths.push(c);
            total += c;
            req |= self.requires[p.0];
        }
        let mut data = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let dp = &self.datas[p.0];
            for r in 0..rows {
                data[r * total + off..r * total + off + w].copy_from_slice(&dp[r * w..(r + 1) * w]);
            }
            off += w;
        }
        Ok(self.push(Op::ConcatCols { parts: parts.to_vec() }, vec![rows, total], data, req))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.rows_cols(a, "slice_cols")?;
        if start + len > cols {
            return Err(Error::shape("slice_cols", format!("{start}+{len} out of {cols}")));
        }
        let mut data = vec![0.0; rows * len];
        {
            let da = &self.datas[a.0];
            for r in 0..rows {
                data[r * len..(r + 1) * len]
                    .copy_from_slice(&da[r * cols + start..r * cols + start + len]);
            }
        }
        let req = self.requires[a.0];
        Ok(self.push(Op::SliceCols { a, start, len }, vec![rows, len], data, req))
    }

    /// Assemble a matrix from rows living on this tape or frozen outside it.
    pub fn gather_rows(&mut self, sources: Vec<RowSrc>, width: usize) -> Var {
        let n = sources.len();
        let mut data = vec![0.0; n * width];
        let mut req = false;
        for (r, src) in sources.iter().enumerate() {
            match src {
                RowSrc::Node { var, row } => {
                    let (_, c) = self.rows_cols(*var, "gather_rows").expect("gather source shape");
                    assert_eq!(c, width, "gather_rows width mismatch");
                    let drow = &self.datas[var.0][row * width..(row + 1) * width];
                    data[r * width..(r + 1) * width].copy_from_slice(drow);
                    req |= self.requires[var.0];
                }
                RowSrc::Frozen(v) => {
                    assert_eq!(v.len(), width, "gather_rows width mismatch");
                    data[r * width..(r + 1) * width].copy_from_slice(v);
                }
            }
        }
        self.push(Op::GatherRows { sources, width }, vec![n, width], data, req)
    }

    /// Assemble a vector from scalars living on this tape or frozen outside it.
    pub fn gather_scalars(&mut self, sources: Vec<ScalarSrc>) -> Var {
        let n = sources.len();
        let mut data = vec![0.0; n];
        let mut req = false;
        for (r, src) in sources.iter().enumerate() {
            match src {
                ScalarSrc::Node { var, idx } => {
                    data[r] = self.datas[var.0][*idx];
                    req |= self.requires[var.0];
                }
                ScalarSrc::Frozen(v) => data[r] = *v,
            }
        }
        self.push(Op::GatherScalars { sources }, vec![n], data, req)
    }

    /// Inverted-scaling dropout. `rate == 0` is an exact identity.
    pub fn dropout(&mut self, a: Var, rate: f64, rng: &mut crate::rng::Rng) -> Var {
        assert!((0.0..1.0).contains(&rate));
        if rate == 0.0 {
            return a;
        }
        let keep: Vec<bool> = (0..self.datas[a.0].len()).map(|_| !rng.chance(rate)).collect();
        let scale = 1.0 / (1.0 - rate);
        let data: Vec<f64> = self.datas[a.0]
            .iter()
            .zip(&keep)
            .map(|(&x, &k)| if k { x * scale } else { 0.0 })
            .collect();
        let req = self.requires[a.0];
        let shape = self.shapes[a.0].clone();
        self.push(Op::Dropout { a, keep, scale }, shape, data, req)
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Each record is visited exactly once
    /// in reverse order; repeated calls without resetting accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.datas[loss.0].len() != 1 {
            return Err(Error::NonScalarLoss(self.shapes[loss.0].clone()));
        }
        if self.records.is_empty() {
            return Err(Error::shape("backward", "empty tape"));
        }
        if !self.requires[loss.0] {
            // Loss does not depend on any differentiable leaf; nothing to do.
            return Ok(());
        }
        // Sweep into scratch buffers so each call propagates exactly one unit
        // of seed, then fold into the persistent per-node accumulators.
        let mut scratch: Vec<Option<Vec<f64>>> = vec![None; self.datas.len()];
        add_to(&mut scratch[loss.0], &[1.0], 1);

        let Tape { shapes, datas, grads, requires, records, .. } = self;

        for rec in records.iter().rev() {
            let out = rec.out;
            if !requires[out.0] {
                continue;
            }
            let gout = match scratch[out.0].take() {
                Some(g) => g,
                None => continue,
            };
            backward_step(&rec.op, &gout, out, shapes, datas, &mut scratch, requires);
            scratch[out.0] = Some(gout);
        }
        for (slot, s) in grads.iter_mut().zip(scratch) {
            if let Some(s) = s {
                add_to(slot, &s, s.len());
            }
        }
        Ok(())
    }
}

fn gelu_fwd(x: f64) -> f64 {
    // tanh-form approximation
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_bwd(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn add_to(slot: &mut Option<Vec<f64>>, contrib: &[f64], len: usize) {
    let g = slot.get_or_insert_with(|| vec![0.0; len]);
    for (dst, src) in g.iter_mut().zip(contrib) {
        *dst += src;
    }
}

/// Accumulate into `var`'s grad through a closure that writes contributions
/// into a scratch slice. Skips non-differentiable inputs.
fn accum<F>(grads: &mut [Option<Vec<f64>>], requires: &[bool], var: Var, len: usize, f: F)
where
    F: FnOnce(&mut [f64]),
{
    if !requires[var.0] {
        return;
    }
    let g = grads[var.0].get_or_insert_with(|| vec![0.0; len]);
    f(g);
}

#[allow(clippy::too_many_lines)]
fn backward_step(
    op: &Op,
    gout: &[f64],
    out: Var,
    shapes: &[Vec<usize>],
    datas: &[Vec<f64>],
    grads: &mut [Option<Vec<f64>>],
    requires: &[bool],
) {
    let rows_cols = |v: Var| -> (usize, usize) {
        let s = &shapes[v.0];
        match s.len() {
            1 => (1, s[0]),
            _ => (s[0], s[1]),
        }
    };
    match op {
        Op::Leaf => {}
        Op::Matmul { a, b } => {
            let (m, k) = rows_cols(*a);
            let (_, n) = rows_cols(*b);
            accum(grads, requires, *a, m * k, |ga| {
                let db = &datas[b.0];
                for i in 0..m {
                    for p in 0..k {
                        let mut acc = 0.0;
                        let grow = &gout[i * n..(i + 1) * n];
                        let brow = &db[p * n..(p + 1) * n];
                        for j in 0..n {
                            acc += grow[j] * brow[j];
                        }
                        ga[i * k + p] += acc;
                    }
                }
            });
            accum(grads, requires, *b, k * n, |gb| {
                let da = &datas[a.0];
                for i in 0..m {
                    for p in 0..k {
                        let aip = da[i * k + p];
                        if aip == 0.0 {
                            continue;
                        }
                        let grow = &gout[i * n..(i + 1) * n];
                        let brow = &mut gb[p * n..(p + 1) * n];
                        for j in 0..n {
                            brow[j] += aip * grow[j];
                        }
                    }
                }
            });
        }
        Op::MatmulNT { a, b } => {
            let (m, k) = rows_cols(*a);
            let (n, _) = rows_cols(*b);
            accum(grads, requires, *a, m * k, |ga| {
                let db = &datas[b.0];
                for i in 0..m {
                    for j in 0..n {
                        let gij = gout[i * n + j];
                        if gij == 0.0 {
                            continue;
                        }
                        let brow = &db[j * k..(j + 1) * k];
                        let garow = &mut ga[i * k..(i + 1) * k];
                        for p in 0..k {
                            garow[p] += gij * brow[p];
                        }
                    }
                }
            });
            accum(grads, requires, *b, n * k, |gb| {
                let da = &datas[a.0];
                for i in 0..m {
                    for j in 0..n {
                        let gij = gout[i * n + j];
                        if gij == 0.0 {
                            continue;
                        }
                        let arow = &da[i * k..(i + 1) * k];
                        let gbrow = &mut gb[j * k..(j + 1) * k];
                        for p in 0..k {
                            gbrow[p] += gij * arow[p];
                        }
                    }
                }
            });
        }
        Op::Add { a, b } => {
            let len = gout.len();
            accum(grads, requires, *a, len, |g| {
                for (d, s) in g.iter_mut().zip(gout) {
                    *d += s;
                }
            });
            accum(grads, requires, *b, len, |g| {
                for (d, s) in g.iter_mut().zip(gout) {
                    *d += s;
                }
            });
        }
        Op::Sub { a, b } => {
            let len = gout.len();
            accum(grads, requires, *a, len, |g| {
                for (d, s) in g.iter_mut().zip(gout) {
                    *d += s;
                }
            });
            accum(grads, requires, *b, len, |g| {
                for (d, s) in g.iter_mut().zip(gout) {
                    *d -= s;
                }
            });
        }
        Op::Mul { a, b } => {
            let len = gout.len();
            accum(grads, requires, *a, len, |g| {
                for i in 0..len {
                    g[i] += gout[i] * datas[b.0][i];
                }
            });
            accum(grads, requires, *b, len, |g| {
                for i in 0..len {
                    g[i] += gout[i] * datas[a.0][i];
                }
            });
        }
        Op::Div { a, b } => {
            let len = gout.len();
            accum(grads, requires, *a, len, |g| {
                for i in 0..len {
                    g[i] += gout[i] / datas[b.0][i];
                }
            });
            accum(grads, requires, *b, len, |g| {
                for i in 0..len {
                    let bv = datas[b.0][i];
                    g[i] -= gout[i] * datas[a.0][i] / (bv * bv);
                }
            });
        }
        Op::Scale { a, c } => {
            accum(grads, requires, *a, gout.len(), |g| {
                for (d, s) in g.iter_mut().zip(gout) {
                    *d += s * c;
                }
            });
        }
        Op::AddRowBias { a, bias } => {
            let (m, n) = rows_cols(*a);
            accum(grads, requires, *a, m * n, |g| {
                for (d, s) in g.iter_mut().zip(gout) {
                    *d += s;
                }
            });
            accum(grads, requires, *bias, n, |g| {
                for i in 0..m {
                    for j in 0..n {
                        g[j] += gout[i * n + j];
                    }
                }
            });
        }
        Op::Sigmoid { a } => {
            let y = &datas[out.0];
            accum(grads, requires, *a, gout.len(), |g| {
                for i in 0..gout.len() {
                    g[i] += gout[i] * y[i] * (1.0 - y[i]);
                }
            });
        }
        Op::Clamp01Ramp { a } => {
            let x = &datas[a.0];
            accum(grads, requires, *a, gout.len(), |g| {
                for i in 0..gout.len() {
                    // Exactly zero at and beyond the kinks.
                    if x[i] > 0.0 && x[i] < 1.0 {
                        g[i] += gout[i];
                    }
                }
            });
        }
        Op::Gelu { a } => {
            let x = &datas[a.0];
            accum(grads, requires, *a, gout.len(), |g| {
                for i in 0..gout.len() {
                    g[i] += gout[i] * gelu_bwd(x[i]);
                }
            });
        }
        Op::LayerNorm { a, gain, bias, saved } => {
            let (m, n) = rows_cols(*a);
            let da = &datas[a.0];
            let dg = &datas[gain.0];
            accum(grads, requires, *gain, n, |g| {
                for i in 0..m {
                    let (mean, rstd) = saved[i];
                    for j in 0..n {
                        let xhat = (da[i * n + j] - mean) * rstd;
                        g[j] += gout[i * n + j] * xhat;
                    }
                }
            });
            accum(grads, requires, *bias, n, |g| {
                for i in 0..m {
                    for j in 0..n {
                        g[j] += gout[i * n + j];
                    }
                }
            });
            accum(grads, requires, *a, m * n, |g| {
                for i in 0..m {
                    let (mean, rstd) = saved[i];
                    let mut sum_gy = 0.0;
                    let mut sum_gy_xhat = 0.0;
                    for j in 0..n {
                        let gy = gout[i * n + j] * dg[j];
                        let xhat = (da[i * n + j] - mean) * rstd;
                        sum_gy += gy;
                        sum_gy_xhat += gy * xhat;
                    }
                    let inv_n = 1.0 / n as f64;
                    for j in 0..n {
                        let gy = gout[i * n + j] * dg[j];
                        let xhat = (da[i * n + j] - mean) * rstd;
                        g[i * n + j] +=
                            rstd * (gy - inv_n * sum_gy - xhat * inv_n * sum_gy_xhat);
                    }
                }
            });
        }
        Op::Softmax { a } => {
            let (m, n) = rows_cols(*a);
            let y = &datas[out.0];
            accum(grads, requires, *a, m * n, |g| {
                for i in 0..m {
                    let yrow = &y[i * n..(i + 1) * n];
                    let grow = &gout[i * n..(i + 1) * n];
                    let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        g[i * n + j] += yrow[j] * (grow[j] - dot);
                    }
                }
            });
        }
        Op::MaskedSoftmax { a, live } => {
            let (m, n) = rows_cols(*a);
            let y = &datas[out.0];
            accum(grads, requires, *a, m * n, |g| {
                for i in 0..m {
                    let base = i * n;
                    let mut dot = 0.0;
                    for j in 0..n {
                        if live[base + j] {
                            dot += y[base + j] * gout[base + j];
                        }
                    }
                    for j in 0..n {
                        if live[base + j] {
                            g[base + j] += y[base + j] * (gout[base + j] - dot);
                        }
                    }
                }
            });
        }
        Op::RenormRows { a, m, live } => {
            let (rows, cols) = rows_cols(*a);
            let da = &datas[a.0];
            let dm = &datas[m.0];
            let dout = &datas[out.0];
            // Per row: S = sum(m*a); out = m*a/S; d/dw_j = (g_j - sum_i g_i out_i)/S.
            let mut coefs = vec![0.0; rows * cols];
            for i in 0..rows {
                let base = i * cols;
                let mut s = 0.0;
                let mut common = 0.0;
                for j in 0..cols {
                    if live[base + j] {
                        s += dm[base + j] * da[base + j];
                        common += gout[base + j] * dout[base + j];
                    }
                }
                for j in 0..cols {
                    if live[base + j] {
                        coefs[base + j] = (gout[base + j] - common) / s;
                    }
                }
            }
            accum(grads, requires, *a, rows * cols, |g| {
                for i in 0..rows * cols {
                    g[i] += dm[i] * coefs[i];
                }
            });
            accum(grads, requires, *m, rows * cols, |g| {
                for i in 0..rows * cols {
                    g[i] += da[i] * coefs[i];
                }
            });
        }
        Op::RampMask { spans, rows, ramp } => {
            let cols = datas[spans.0].len();
            let y = &datas[out.0];
            accum(grads, requires, *spans, cols, |g| {
                for t in 0..*rows {
                    for j in 0..cols {
                        let v = y[t * cols + j];
                        if v > 0.0 && v < 1.0 {
                            g[j] += gout[t * cols + j] / ramp;
                        }
                    }
                }
            });
        }
        Op::PosBias { scores, table, idx } => {
            accum(grads, requires, *scores, gout.len(), |g| {
                for (d, s) in g.iter_mut().zip(gout) {
                    *d += s;
                }
            });
            let tbl_len = datas[table.0].len();
            accum(grads, requires, *table, tbl_len, |g| {
                for (cell, &i) in idx.iter().enumerate() {
                    g[i] += gout[cell];
                }
            });
        }
        Op::Embed { table, ids } => {
            let (_, d) = rows_cols(*table);
            let tbl_len = datas[table.0].len();
            accum(grads, requires, *table, tbl_len, |g| {
                for (r, &id) in ids.iter().enumerate() {
                    let grow = &gout[r * d..(r + 1) * d];
                    let trow = &mut g[id * d..(id + 1) * d];
                    for j in 0..d {
                        trow[j] += grow[j];
                    }
                }
            });
        }
        Op::CrossEntropySum { logits, targets, scored } => {
            let (m, v) = rows_cols(*logits);
            let dl = &datas[logits.0];
            let go = gout[0];
            accum(grads, requires, *logits, m * v, |g| {
                for i in 0..m {
                    if !scored[i] {
                        continue;
                    }
                    let row = &dl[i * v..(i + 1) * v];
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    let mut probs = vec![0.0; v];
                    for j in 0..v {
                        probs[j] = (row[j] - max).exp();
                        sum += probs[j];
                    }
                    for j in 0..v {
                        let p = probs[j] / sum;
                        let onehot = if j == targets[i] { 1.0 } else { 0.0 };
                        g[i * v + j] += go * (p - onehot);
                    }
                }
            });
        }
        Op::SumAll { a } => {
            let go = gout[0];
            accum(grads, requires, *a, datas[a.0].len(), |g| {
                for d in g.iter_mut() {
                    *d += go;
                }
            });
        }
        Op::Reshape { a } => {
            accum(grads, requires, *a, gout.len(), |g| {
                for (d, s) in g.iter_mut().zip(gout) {
                    *d += s;
                }
            });
        }
        Op::ConcatRows { parts } => {
            let mut off = 0;
            for &p in parts {
                let len = datas[p.0].len();
                accum(grads, requires, p, len, |g| {
                    for (d, s) in g.iter_mut().zip(&gout[off..off + len]) {
                        *d += s;
                    }
                });
                off += len;
            }
        }
        Op::ConcatCols { parts } => {
            let rows = shapes[parts[0].0][0];
            let total: usize = parts.iter().map(|p| shapes[p.0][1]).sum();
            let mut off = 0;
            for &p in parts {
                let w = shapes[p.0][1];
                accum(grads, requires, p, rows * w, |g| {
                    for r in 0..rows {
                        for j in 0..w {
                            g[r * w + j] += gout[r * total + off + j];
                        }
                    }
                });
                off += w;
            }
        }
        Op::SliceCols { a, start, len } => {
            let (rows, cols) = rows_cols(*a);
            accum(grads, requires, *a, rows * cols, |g| {
                for r in 0..rows {
                    for j in 0..*len {
                        g[r * cols + start + j] += gout[r * len + j];
                    }
                }
            });
        }
        Op::GatherRows { sources, width } => {
            for (r, src) in sources.iter().enumerate() {
                if let RowSrc::Node { var, row } = src {
                    let len = datas[var.0].len();
                    accum(grads, requires, *var, len, |g| {
                        let grow = &gout[r * width..(r + 1) * width];
                        let trow = &mut g[row * width..(row + 1) * width];
                        for j in 0..*width {
                            trow[j] += grow[j];
                        }
                    });
                }
            }
        }
        Op::GatherScalars { sources } => {
            for (r, src) in sources.iter().enumerate() {
                if let ScalarSrc::Node { var, idx } = src {
                    let len = datas[var.0].len();
                    accum(grads, requires, *var, len, |g| {
                        g[*idx] += gout[r];
                    });
                }
            }
        }
        Op::Dropout { a, keep, scale } => {
            accum(grads, requires, *a, gout.len(), |g| {
                for i in 0..gout.len() {
                    if keep[i] {
                        g[i] += gout[i] * scale;
                    }
                }
            });
        }
    }
}
