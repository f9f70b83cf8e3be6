//! Tape-based reverse-mode autodiff over [`Tensor`] values.
//!
//! One `Graph` records one forward pass (typically a whole minibatch); ops
//! append nodes in execution order and `backward` walks the tape in reverse,
//! accumulating gradients additively. Parameter leaves borrow their values
//! from a [`ParamSet`] so nothing is copied per pass; gradients for them are
//! handed back with [`Graph::into_param_grads`] once the tape is consumed.
//!
//! The tape is dropped (or rebuilt) between batches, which is what clears it.

use std::collections::HashMap;

use crate::error::{LainError, Result};
use crate::params::{ParamId, ParamSet};
use crate::tensor::{sigmoid, Tensor, MASKED_LOGIT};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum NodeValue {
    Owned(Tensor),
    Param(ParamId),
}

enum Op {
    Leaf,
    /// a [m x k] * b [k x n] -> [m x n]
    Matmul { a: Var, b: Var },
    /// a [m x k] * b[n x k]^T -> [m x n]
    MatmulBT { a: Var, b: Var },
    /// m [r x c] * v [c] -> [r]
    MatVec { m: Var, v: Var },
    /// v [r] * m [r x c] -> [c]
    VecMat { v: Var, m: Var },
    Add { a: Var, b: Var },
    MulElem { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    AddConst { x: Var },
    /// x [r x c] + bias [c] broadcast over rows
    AddBias { x: Var, bias: Var },
    Relu { x: Var },
    Sigmoid { x: Var },
    Softplus { x: Var },
    Ln { x: Var },
    OneMinus { x: Var },
    Clamp { x: Var, lo: f64, hi: f64 },
    /// Row-wise layer norm with learnable gain/bias over the last dim.
    LayerNorm { x: Var, gain: Var, bias: Var, eps: f64 },
    /// Masked softmax over a vector; masked positions output exact zero.
    SoftmaxMasked { x: Var, mask: Option<Vec<bool>> },
    /// Elementwise x / s with s a single-element tensor.
    DivScalar { x: Var, s: Var },
    /// x + s broadcast, with s a single-element tensor.
    AddScalarB { x: Var, s: Var },
    /// Elementwise multiply by a constant vector (e.g. labels).
    MulConst { x: Var, c: Vec<f64> },
    SumAll { x: Var },
    /// Row gather from an embedding table; row 0 is frozen padding and
    /// receives no gradient.
    GatherRows { table: Var, ids: Vec<u32> },
    /// Row r of a matrix as a vector.
    RowOf { m: Var, r: usize },
    Reshape { x: Var },
    /// Stack rows of a on top of rows of b (same column count).
    ConcatRows { a: Var, b: Var },
    /// Concatenate vectors into one vector.
    ConcatVecs { parts: Vec<Var> },
    /// Stack equal-length vectors as matrix rows.
    StackRows { rows: Vec<Var> },
    /// Repeat a vector as n identical matrix rows.
    RepeatRow { v: Var, n: usize },
    /// Inverted dropout with a fixed mask.
    Dropout { x: Var, mask: Vec<bool>, keep: f64 },
    /// out[b, i] = sin(L_b w_i), out[b, d_f + i] = cos(L_b w_i).
    FourierRows { omega: Var, lengths: Vec<f64> },
}

pub struct Graph<'a> {
    set: &'a ParamSet,
    vals: Vec<NodeValue>,
    ops: Vec<Op>,
    grads: Vec<Vec<f64>>,
    param_nodes: HashMap<usize, Var>,
    region_sig: u64,
}

impl<'a> Graph<'a> {
    pub fn new(set: &'a ParamSet) -> Self {
        Graph {
            set,
            vals: Vec::new(),
            ops: Vec::new(),
            grads: Vec::new(),
            param_nodes: HashMap::new(),
            region_sig: 0xcbf2_9ce4_8422_2325,
        }
    }

    /// Hash of the branch pattern taken by every piecewise op (`relu`,
    /// `clamp`) during this forward pass, folding one symbol per element in
    /// execution order. The loss is smooth in the parameters as long as every
    /// branch stays on the same side, so two passes with equal signatures lie
    /// on one smooth piece — the precondition for a central finite difference
    /// between them to estimate a derivative. The branch classes mirror the
    /// subgradient convention used by `backward` (`relu` passes gradient iff
    /// input > 0; `clamp` iff strictly inside the interval).
    pub fn region_signature(&self) -> u64 {
        self.region_sig
    }

    fn fold_region(&mut self, symbol: u8) {
        self.region_sig ^= symbol as u64;
        self.region_sig = self.region_sig.wrapping_mul(0x0000_0100_0000_01b3);
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.vals[v.0] {
            NodeValue::Owned(t) => t,
            NodeValue::Param(id) => &self.set.get(*id).tensor,
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.vals.push(NodeValue::Owned(value));
        self.ops.push(op);
        Var(self.vals.len() - 1)
    }

    /// Constant leaf (no parameter binding).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.vals.push(NodeValue::Owned(t));
        self.ops.push(Op::Leaf);
        Var(self.vals.len() - 1)
    }

    /// Parameter leaf; repeated calls for the same parameter return the same
    /// node so fan-out gradients accumulate.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes.get(&id.0) {
            return *v;
        }
        self.vals.push(NodeValue::Param(id));
        self.ops.push(Op::Leaf);
        let v = Var(self.vals.len() - 1);
        self.param_nodes.insert(id.0, v);
        v
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let t = self.value(v);
        match t.shape() {
            [r, c] => Ok((*r, *c)),
            s => Err(LainError::shape(op, format!("expected matrix, got shape {s:?}"))),
        }
    }

    fn dims1(&self, v: Var, op: &'static str) -> Result<usize> {
        let t = self.value(v);
        match t.shape() {
            [n] => Ok(*n),
            s => Err(LainError::shape(op, format!("expected vector, got shape {s:?}"))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(LainError::shape("matmul", format!("[{m}x{k}] * [{k2}x{n}]")));
        }
        let mut out = vec![0.0; m * n];
        mm_acc(self.value(a).data(), m, k, self.value(b).data(), n, &mut out);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::Matmul { a, b }))
    }

    /// a [m x k] times the transpose of b [n x k].
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul_bt")?;
        let (n, k2) = self.dims2(b, "matmul_bt")?;
        if k != k2 {
            return Err(LainError::shape("matmul_bt", format!("[{m}x{k}] * [{n}x{k2}]^T")));
        }
        let mut out = vec![0.0; m * n];
        mm_abt_acc(self.value(a).data(), m, k, self.value(b).data(), n, &mut out);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatmulBT { a, b }))
    }

    pub fn matvec(&mut self, m: Var, v: Var) -> Result<Var> {
        let (r, c) = self.dims2(m, "matvec")?;
        let n = self.dims1(v, "matvec")?;
        if c != n {
            return Err(LainError::shape("matvec", format!("[{r}x{c}] * [{n}]")));
        }
        let md = self.value(m).data();
        let vd = self.value(v).data();
        let out: Vec<f64> = (0..r).map(|i| dot(&md[i * c..(i + 1) * c], vd)).collect();
        Ok(self.push(Tensor::vector(out), Op::MatVec { m, v }))
    }

    pub fn vecmat(&mut self, v: Var, m: Var) -> Result<Var> {
        let n = self.dims1(v, "vecmat")?;
        let (r, c) = self.dims2(m, "vecmat")?;
        if n != r {
            return Err(LainError::shape("vecmat", format!("[{n}] * [{r}x{c}]")));
        }
        let vd = self.value(v).data();
        let md = self.value(m).data();
        let mut out = vec![0.0; c];
        for i in 0..r {
            let vi = vd[i];
            let row = &md[i * c..(i + 1) * c];
            for (o, &x) in out.iter_mut().zip(row) {
                *o += vi * x;
            }
        }
        Ok(self.push(Tensor::vector(out), Op::VecMat { v, m }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if sa != sb {
            return Err(LainError::shape("add", format!("{sa:?} vs {sb:?}")));
        }
        let out: Vec<f64> =
            self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        Ok(self.push(Tensor::new(sa, out)?, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if sa != sb {
            return Err(LainError::shape("mul", format!("{sa:?} vs {sb:?}")));
        }
        let out: Vec<f64> =
            self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        Ok(self.push(Tensor::new(sa, out)?, Op::MulElem { a, b }))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let mut out = Tensor::zeros(t.shape().to_vec());
        for (o, &v) in out.data_mut().iter_mut().zip(t.data()) {
            *o = v * c;
        }
        self.push(out, Op::Scale { x, c })
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let mut out = Tensor::zeros(t.shape().to_vec());
        for (o, &v) in out.data_mut().iter_mut().zip(t.data()) {
            *o = v + c;
        }
        self.push(out, Op::AddConst { x })
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "add_bias")?;
        let n = self.dims1(bias, "add_bias")?;
        if c != n {
            return Err(LainError::shape("add_bias", format!("[{r}x{c}] + [{n}]")));
        }
        let xd = self.value(x).data();
        let bd = self.value(bias).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = xd[i * c + j] + bd[j];
            }
        }
        Ok(self.push(Tensor::new(vec![r, c], out)?, Op::AddBias { x, bias }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let mut out = Tensor::zeros(t.shape().to_vec());
        let mut symbols = Vec::with_capacity(t.len());
        for (o, &v) in out.data_mut().iter_mut().zip(t.data()) {
            *o = v.max(0.0);
            symbols.push((v > 0.0) as u8);
        }
        for s in symbols {
            self.fold_region(s);
        }
        self.push(out, Op::Relu { x })
    }

    pub fn sigmoid_op(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let mut out = Tensor::zeros(t.shape().to_vec());
        for (o, &v) in out.data_mut().iter_mut().zip(t.data()) {
            *o = sigmoid(v);
        }
        self.push(out, Op::Sigmoid { x })
    }

    pub fn softplus_op(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let mut out = Tensor::zeros(t.shape().to_vec());
        for (o, &v) in out.data_mut().iter_mut().zip(t.data()) {
            *o = crate::tensor::softplus(v);
        }
        self.push(out, Op::Softplus { x })
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let mut out = Tensor::zeros(t.shape().to_vec());
        for (o, &v) in out.data_mut().iter_mut().zip(t.data()) {
            if v <= 0.0 {
                return Err(LainError::domain("ln", format!("argument {v} not positive")));
            }
            *o = v.ln();
        }
        Ok(self.push(out, Op::Ln { x }))
    }

    pub fn one_minus(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let mut out = Tensor::zeros(t.shape().to_vec());
        for (o, &v) in out.data_mut().iter_mut().zip(t.data()) {
            *o = 1.0 - v;
        }
        self.push(out, Op::OneMinus { x })
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let t = self.value(x);
        let mut out = Tensor::zeros(t.shape().to_vec());
        let mut symbols = Vec::with_capacity(t.len());
        for (o, &v) in out.data_mut().iter_mut().zip(t.data()) {
            *o = v.clamp(lo, hi);
            symbols.push(if v > lo && v < hi { 1u8 } else if v <= lo { 0 } else { 2 });
        }
        for s in symbols {
            self.fold_region(s);
        }
        self.push(out, Op::Clamp { x, lo, hi })
    }

    /// Layer norm over the last dimension with learnable gain and bias.
    /// Accepts a vector (one row) or a matrix (row-wise).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let (rows, cols) = match shape.as_slice() {
            [n] => (1usize, *n),
            [r, c] => (*r, *c),
            s => return Err(LainError::shape("layer_norm", format!("rank {} input", s.len()))),
        };
        let gn = self.dims1(gain, "layer_norm")?;
        let bn = self.dims1(bias, "layer_norm")?;
        if gn != cols || bn != cols {
            return Err(LainError::shape(
                "layer_norm",
                format!("gain [{gn}] / bias [{bn}] vs feature dim {cols}"),
            ));
        }
        if !(eps > 0.0) {
            return Err(LainError::domain("layer_norm", format!("eps must be positive, got {eps}")));
        }
        let xd = self.value(x).data();
        let gd = self.value(gain).data();
        let bd = self.value(bias).data();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &xd[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..cols {
                out[r * cols + j] = (row[j] - mean) * inv * gd[j] + bd[j];
            }
        }
        Ok(self.push(Tensor::new(shape, out)?, Op::LayerNorm { x, gain, bias, eps }))
    }

    /// Masked softmax over a logit vector at unit temperature. Masked
    /// positions are pinned to [`MASKED_LOGIT`] pre-normalization and output
    /// exact zero. Errors if every position is masked.
    pub fn softmax_masked(&mut self, x: Var, mask: Option<Vec<bool>>) -> Result<Var> {
        let n = self.dims1(x, "softmax_masked")?;
        if let Some(m) = &mask {
            if m.len() != n {
                return Err(LainError::shape(
                    "softmax_masked",
                    format!("mask length {} vs logits length {}", m.len(), n),
                ));
            }
        }
        let xd = self.value(x).data();
        let valid = |i: usize| mask.as_ref().map_or(true, |m| m[i]);
        let mut max = f64::NEG_INFINITY;
        for i in 0..n {
            if valid(i) {
                max = max.max(xd[i]);
            }
        }
        if max == f64::NEG_INFINITY {
            return Err(LainError::DegenerateMask);
        }
        let mut out = vec![0.0; n];
        let mut sum = 0.0;
        for i in 0..n {
            let z = if valid(i) { xd[i] } else { MASKED_LOGIT };
            let e = (z - max).exp();
            out[i] = e;
            sum += e;
        }
        for (i, o) in out.iter_mut().enumerate() {
            if valid(i) {
                *o /= sum;
            } else {
                *o = 0.0;
            }
        }
        Ok(self.push(Tensor::vector(out), Op::SoftmaxMasked { x, mask }))
    }

    /// Elementwise division by a single-element tensor (e.g. a temperature).
    pub fn div_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(LainError::shape(
                "div_scalar",
                format!("divisor must be a scalar, got shape {:?}", self.value(s).shape()),
            ));
        }
        let sv = self.value(s).data()[0];
        if sv == 0.0 {
            return Err(LainError::domain("div_scalar", "division by zero"));
        }
        let t = self.value(x);
        let mut out = Tensor::zeros(t.shape().to_vec());
        for (o, &v) in out.data_mut().iter_mut().zip(t.data()) {
            *o = v / sv;
        }
        Ok(self.push(out, Op::DivScalar { x, s }))
    }

    /// Broadcast-add a single-element tensor to every element of x.
    pub fn add_scalar_b(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(LainError::shape(
                "add_scalar_b",
                format!("addend must be a scalar, got shape {:?}", self.value(s).shape()),
            ));
        }
        let sv = self.value(s).data()[0];
        let t = self.value(x);
        let mut out = Tensor::zeros(t.shape().to_vec());
        for (o, &v) in out.data_mut().iter_mut().zip(t.data()) {
            *o = v + sv;
        }
        Ok(self.push(out, Op::AddScalarB { x, s }))
    }

    pub fn mul_const(&mut self, x: Var, c: Vec<f64>) -> Result<Var> {
        let t = self.value(x);
        if t.len() != c.len() {
            return Err(LainError::shape(
                "mul_const",
                format!("{} elements vs {} constants", t.len(), c.len()),
            ));
        }
        let mut out = Tensor::zeros(t.shape().to_vec());
        for ((o, &v), &k) in out.data_mut().iter_mut().zip(t.data()).zip(&c) {
            *o = v * k;
        }
        Ok(self.push(out, Op::MulConst { x, c }))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll { x })
    }

    pub fn gather_rows(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let (v, d) = self.dims2(table, "gather_rows")?;
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= v) {
            return Err(LainError::shape("gather_rows", format!("id {bad} >= vocab {v}")));
        }
        let td = self.value(table).data();
        let mut out = vec![0.0; ids.len() * d];
        for (i, &id) in ids.iter().enumerate() {
            out[i * d..(i + 1) * d].copy_from_slice(&td[id as usize * d..(id as usize + 1) * d]);
        }
        Ok(self.push(Tensor::new(vec![ids.len(), d], out)?, Op::GatherRows { table, ids: ids.to_vec() }))
    }

    pub fn row_of(&mut self, m: Var, r: usize) -> Result<Var> {
        let (rows, _c) = self.dims2(m, "row_of")?;
        if r >= rows {
            return Err(LainError::shape("row_of", format!("row {r} >= {rows}")));
        }
        let out = self.value(m).row(r).to_vec();
        Ok(self.push(Tensor::vector(out), Op::RowOf { m, r }))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x);
        let n: usize = shape.iter().product();
        if n != t.len() {
            return Err(LainError::shape(
                "reshape",
                format!("cannot view {:?} as {:?}", t.shape(), shape),
            ));
        }
        let out = Tensor::new(shape, t.data().to_vec())?;
        Ok(self.push(out, Op::Reshape { x }))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.dims2(a, "concat_rows")?;
        let (rb, cb) = self.dims2(b, "concat_rows")?;
        if ca != cb {
            return Err(LainError::shape("concat_rows", format!("[{ra}x{ca}] over [{rb}x{cb}]")));
        }
        let mut out = Vec::with_capacity((ra + rb) * ca);
        out.extend_from_slice(self.value(a).data());
        out.extend_from_slice(self.value(b).data());
        Ok(self.push(Tensor::new(vec![ra + rb, ca], out)?, Op::ConcatRows { a, b }))
    }

    pub fn concat_vecs(&mut self, parts: &[Var]) -> Result<Var> {
        let mut out = Vec::new();
        for &p in parts {
            self.dims1(p, "concat_vecs")?;
            out.extend_from_slice(self.value(p).data());
        }
        Ok(self.push(Tensor::vector(out), Op::ConcatVecs { parts: parts.to_vec() }))
    }

    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        if rows.is_empty() {
            return Err(LainError::shape("stack_rows", "no rows"));
        }
        let c = self.dims1(rows[0], "stack_rows")?;
        let mut out = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            let n = self.dims1(r, "stack_rows")?;
            if n != c {
                return Err(LainError::shape("stack_rows", format!("row length {n} vs {c}")));
            }
            out.extend_from_slice(self.value(r).data());
        }
        Ok(self.push(Tensor::new(vec![rows.len(), c], out)?, Op::StackRows { rows: rows.to_vec() }))
    }

    pub fn repeat_row(&mut self, v: Var, n: usize) -> Result<Var> {
        let c = self.dims1(v, "repeat_row")?;
        let vd = self.value(v).data();
        let mut out = Vec::with_capacity(n * c);
        for _ in 0..n {
            out.extend_from_slice(vd);
        }
        Ok(self.push(Tensor::new(vec![n, c], out)?, Op::RepeatRow { v, n }))
    }

    /// Inverted dropout with an externally drawn keep mask.
    pub fn dropout(&mut self, x: Var, mask: Vec<bool>, keep: f64) -> Result<Var> {
        let t = self.value(x);
        if mask.len() != t.len() {
            return Err(LainError::shape(
                "dropout",
                format!("mask length {} vs {} elements", mask.len(), t.len()),
            ));
        }
        if !(keep > 0.0 && keep <= 1.0) {
            return Err(LainError::domain("dropout", format!("keep probability {keep}")));
        }
        let mut out = Tensor::zeros(t.shape().to_vec());
        for ((o, &v), &m) in out.data_mut().iter_mut().zip(t.data()).zip(&mask) {
            *o = if m { v / keep } else { 0.0 };
        }
        Ok(self.push(out, Op::Dropout { x, mask, keep }))
    }

    /// Fourier feature rows [sin(L w); cos(L w)] for a batch of lengths.
    pub fn fourier_rows(&mut self, omega: Var, lengths: &[f64]) -> Result<Var> {
        let d_f = self.dims1(omega, "fourier_rows")?;
        let od = self.value(omega).data();
        let b = lengths.len();
        let mut out = vec![0.0; b * 2 * d_f];
        for (r, &l) in lengths.iter().enumerate() {
            for i in 0..d_f {
                let (s, c) = (l * od[i]).sin_cos();
                out[r * 2 * d_f + i] = s;
                out[r * 2 * d_f + d_f + i] = c;
            }
        }
        Ok(self.push(
            Tensor::new(vec![b, 2 * d_f], out)?,
            Op::FourierRows { omega, lengths: lengths.to_vec() },
        ))
    }

    fn grad_slice(&mut self, v: Var, len: usize) -> &mut [f64] {
        let g = &mut self.grads[v.0];
        if g.is_empty() {
            g.resize(len, 0.0);
        }
        g.as_mut_slice()
    }

    /// Reverse pass from a scalar output. Gradients accumulate additively;
    /// ops whose output never received gradient are skipped.
    pub fn backward(&mut self, out: Var) -> Result<()> {
        if self.value(out).len() != 1 {
            return Err(LainError::shape(
                "backward",
                format!("output must be scalar, got shape {:?}", self.value(out).shape()),
            ));
        }
        self.grads = vec![Vec::new(); self.vals.len()];
        self.grads[out.0] = vec![1.0];
        for i in (0..self.ops.len()).rev() {
            if self.grads[i].is_empty() {
                continue;
            }
            let g = std::mem::take(&mut self.grads[i]);
            self.step_backward(i, &g);
            self.grads[i] = g;
        }
        Ok(())
    }

    fn step_backward(&mut self, node: usize, g: &[f64]) {
        // self.ops[node] is borrowed immutably while input grads are written;
        // inputs always have smaller indices than the node itself.
        let op = std::mem::replace(&mut self.ops[node], Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let n = self.value(*b).cols();
                let (ad, bd) = (
                    self.value(*a).data().to_vec(),
                    self.value(*b).data().to_vec(),
                );
                mm_abt_acc(g, m, n, &bd, k, self.grad_slice(*a, m * k));
                mm_atb_acc(&ad, m, k, g, n, self.grad_slice(*b, k * n));
            }
            Op::MatmulBT { a, b } => {
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let n = self.value(*b).rows();
                let (ad, bd) = (
                    self.value(*a).data().to_vec(),
                    self.value(*b).data().to_vec(),
                );
                mm_acc(g, m, n, &bd, k, self.grad_slice(*a, m * k));
                mm_atb_acc(g, m, n, &ad, k, self.grad_slice(*b, n * k));
            }
            Op::MatVec { m, v } => {
                let (r, c) = (self.value(*m).rows(), self.value(*m).cols());
                let md = self.value(*m).data().to_vec();
                let vd = self.value(*v).data().to_vec();
                {
                    let gm = self.grad_slice(*m, r * c);
                    for i in 0..r {
                        let gi = g[i];
                        for j in 0..c {
                            gm[i * c + j] += gi * vd[j];
                        }
                    }
                }
                let gv = self.grad_slice(*v, c);
                for i in 0..r {
                    let gi = g[i];
                    for j in 0..c {
                        gv[j] += gi * md[i * c + j];
                    }
                }
            }
            Op::VecMat { v, m } => {
                let (r, c) = (self.value(*m).rows(), self.value(*m).cols());
                let md = self.value(*m).data().to_vec();
                let vd = self.value(*v).data().to_vec();
                {
                    let gv = self.grad_slice(*v, r);
                    for i in 0..r {
                        gv[i] += dot(&md[i * c..(i + 1) * c], g);
                    }
                }
                let gm = self.grad_slice(*m, r * c);
                for i in 0..r {
                    let vi = vd[i];
                    for j in 0..c {
                        gm[i * c + j] += vi * g[j];
                    }
                }
            }
            Op::Add { a, b } => {
                let n = g.len();
                axpy(self.grad_slice(*a, n), g, 1.0);
                axpy(self.grad_slice(*b, n), g, 1.0);
            }
            Op::MulElem { a, b } => {
                let n = g.len();
                let ad = self.value(*a).data().to_vec();
                let bd = self.value(*b).data().to_vec();
                {
                    let ga = self.grad_slice(*a, n);
                    for i in 0..n {
                        ga[i] += g[i] * bd[i];
                    }
                }
                let gb = self.grad_slice(*b, n);
                for i in 0..n {
                    gb[i] += g[i] * ad[i];
                }
            }
            Op::Scale { x, c } => {
                axpy(self.grad_slice(*x, g.len()), g, *c);
            }
            Op::AddConst { x } => {
                axpy(self.grad_slice(*x, g.len()), g, 1.0);
            }
            Op::AddBias { x, bias } => {
                let (r, c) = (self.value(*x).rows(), self.value(*x).cols());
                axpy(self.grad_slice(*x, r * c), g, 1.0);
                let gb = self.grad_slice(*bias, c);
                for i in 0..r {
                    for j in 0..c {
                        gb[j] += g[i * c + j];
                    }
                }
            }
            Op::Relu { x } => {
                let xd = self.value(*x).data().to_vec();
                let gx = self.grad_slice(*x, g.len());
                for i in 0..g.len() {
                    if xd[i] > 0.0 {
                        gx[i] += g[i];
                    }
                }
            }
            Op::Sigmoid { x } => {
                let s = owned_data(&self.vals[node]);
                let gx = self.grad_slice(*x, g.len());
                for i in 0..g.len() {
                    gx[i] += g[i] * s[i] * (1.0 - s[i]);
                }
            }
            Op::Softplus { x } => {
                let xd = self.value(*x).data().to_vec();
                let gx = self.grad_slice(*x, g.len());
                for i in 0..g.len() {
                    gx[i] += g[i] * sigmoid(xd[i]);
                }
            }
            Op::Ln { x } => {
                let xd = self.value(*x).data().to_vec();
                let gx = self.grad_slice(*x, g.len());
                for i in 0..g.len() {
                    gx[i] += g[i] / xd[i];
                }
            }
            Op::OneMinus { x } => {
                axpy(self.grad_slice(*x, g.len()), g, -1.0);
            }
            Op::Clamp { x, lo, hi } => {
                let xd = self.value(*x).data().to_vec();
                let gx = self.grad_slice(*x, g.len());
                for i in 0..g.len() {
                    if xd[i] > *lo && xd[i] < *hi {
                        gx[i] += g[i];
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let shape = self.value(*x).shape().to_vec();
                let (rows, cols) = match shape.as_slice() {
                    [n] => (1usize, *n),
                    [r, c] => (*r, *c),
                    _ => unreachable!(),
                };
                let xd = self.value(*x).data().to_vec();
                let gd = self.value(*gain).data().to_vec();
                let nf = cols as f64;
                let mut gx_own = vec![0.0; rows * cols];
                let mut ggain = vec![0.0; cols];
                let mut gbias = vec![0.0; cols];
                for r in 0..rows {
                    let row = &xd[r * cols..(r + 1) * cols];
                    let grow = &g[r * cols..(r + 1) * cols];
                    let mean = row.iter().sum::<f64>() / nf;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / nf;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                    let gh: Vec<f64> = grow.iter().zip(&gd).map(|(a, b)| a * b).collect();
                    let mean_gh = gh.iter().sum::<f64>() / nf;
                    let mean_ghx = gh.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / nf;
                    for j in 0..cols {
                        gx_own[r * cols + j] += (gh[j] - mean_gh - xhat[j] * mean_ghx) * inv;
                        ggain[j] += grow[j] * xhat[j];
                        gbias[j] += grow[j];
                    }
                }
                axpy(self.grad_slice(*x, rows * cols), &gx_own, 1.0);
                axpy(self.grad_slice(*gain, cols), &ggain, 1.0);
                axpy(self.grad_slice(*bias, cols), &gbias, 1.0);
            }
            Op::SoftmaxMasked { x, mask } => {
                let s = owned_data(&self.vals[node]);
                let valid = |i: usize| mask.as_ref().map_or(true, |m| m[i]);
                let mut inner = 0.0;
                for i in 0..g.len() {
                    if valid(i) {
                        inner += g[i] * s[i];
                    }
                }
                let gx = self.grad_slice(*x, g.len());
                for i in 0..g.len() {
                    if valid(i) {
                        gx[i] += s[i] * (g[i] - inner);
                    }
                }
            }
            Op::DivScalar { x, s } => {
                let sv = self.value(*s).data()[0];
                let xd = self.value(*x).data().to_vec();
                let mut gs = 0.0;
                {
                    let gx = self.grad_slice(*x, g.len());
                    for i in 0..g.len() {
                        gx[i] += g[i] / sv;
                        gs -= g[i] * xd[i] / (sv * sv);
                    }
                }
                self.grad_slice(*s, 1)[0] += gs;
            }
            Op::AddScalarB { x, s } => {
                axpy(self.grad_slice(*x, g.len()), g, 1.0);
                self.grad_slice(*s, 1)[0] += g.iter().sum::<f64>();
            }
            Op::MulConst { x, c } => {
                let gx = self.grad_slice(*x, g.len());
                for i in 0..g.len() {
                    gx[i] += g[i] * c[i];
                }
            }
            Op::SumAll { x } => {
                let n = self.value(*x).len();
                let gx = self.grad_slice(*x, n);
                for v in gx.iter_mut() {
                    *v += g[0];
                }
            }
            Op::GatherRows { table, ids } => {
                let d = self.value(*table).cols();
                let rows = self.value(*table).rows();
                let gt = self.grad_slice(*table, rows * d);
                for (i, &id) in ids.iter().enumerate() {
                    if id == 0 {
                        continue;
                    }
                    let dst = &mut gt[id as usize * d..(id as usize + 1) * d];
                    axpy(dst, &g[i * d..(i + 1) * d], 1.0);
                }
            }
            Op::RowOf { m, r } => {
                let (rows, c) = (self.value(*m).rows(), self.value(*m).cols());
                let gm = self.grad_slice(*m, rows * c);
                axpy(&mut gm[r * c..(r + 1) * c], g, 1.0);
            }
            Op::Reshape { x } => {
                axpy(self.grad_slice(*x, g.len()), g, 1.0);
            }
            Op::ConcatRows { a, b } => {
                let na = self.value(*a).len();
                let nb = self.value(*b).len();
                axpy(self.grad_slice(*a, na), &g[..na], 1.0);
                axpy(self.grad_slice(*b, nb), &g[na..na + nb], 1.0);
            }
            Op::ConcatVecs { parts } => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    axpy(self.grad_slice(p, n), &g[off..off + n], 1.0);
                    off += n;
                }
            }
            Op::StackRows { rows } => {
                let c = self.value(rows[0]).len();
                for (i, &r) in rows.iter().enumerate() {
                    axpy(self.grad_slice(r, c), &g[i * c..(i + 1) * c], 1.0);
                }
            }
            Op::RepeatRow { v, n } => {
                let c = self.value(*v).len();
                let gv = self.grad_slice(*v, c);
                for i in 0..*n {
                    axpy(gv, &g[i * c..(i + 1) * c], 1.0);
                }
            }
            Op::Dropout { x, mask, keep } => {
                let gx = self.grad_slice(*x, g.len());
                for i in 0..g.len() {
                    if mask[i] {
                        gx[i] += g[i] / keep;
                    }
                }
            }
            Op::FourierRows { omega, lengths } => {
                let d_f = self.value(*omega).len();
                let od = self.value(*omega).data().to_vec();
                let go = self.grad_slice(*omega, d_f);
                for (r, &l) in lengths.iter().enumerate() {
                    for i in 0..d_f {
                        let (s, c) = (l * od[i]).sin_cos();
                        go[i] += l * (c * g[r * 2 * d_f + i] - s * g[r * 2 * d_f + d_f + i]);
                    }
                }
            }
        }
        self.ops[node] = op;
    }

    /// Gradient of a node after `backward`; zeros if it never received one.
    pub fn grad(&self, v: Var) -> Vec<f64> {
        let g = &self.grads[v.0];
        if g.is_empty() {
            vec![0.0; self.value(v).len()]
        } else {
            g.clone()
        }
    }

    /// Consume the tape and return accumulated parameter gradients.
    pub fn into_param_grads(self) -> Vec<(ParamId, Vec<f64>)> {
        let mut ids: Vec<(usize, Var)> = self.param_nodes.iter().map(|(k, v)| (*k, *v)).collect();
        ids.sort_by_key(|(k, _)| *k);
        ids.into_iter()
            .map(|(k, v)| {
                let n = self.value(v).len();
                let g = &self.grads[v.0];
                let g = if g.is_empty() { vec![0.0; n] } else { g.clone() };
                (ParamId(k), g)
            })
            .collect()
    }
}

fn owned_data(v: &NodeValue) -> Vec<f64> {
    match v {
        NodeValue::Owned(t) => t.data().to_vec(),
        NodeValue::Param(_) => unreachable!("op outputs are always owned"),
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(dst: &mut [f64], src: &[f64], c: f64) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += c * s;
    }
}

/// out[m x n] += a[m x k] * b[k x n]
fn mm_acc(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (l, &ail) in arow.iter().enumerate() {
            if ail == 0.0 {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += ail * bv;
            }
        }
    }
}

/// out[m x n] += a[m x k] * b[n x k]^T
fn mm_abt_acc(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for j in 0..n {
            orow[j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// out[k x n] += a[m x k]^T * b[m x n]
fn mm_atb_acc(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (l, &ail) in arow.iter().enumerate() {
            if ail == 0.0 {
                continue;
            }
            let orow = &mut out[l * n..(l + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += ail * bv;
            }
        }
    }
}
