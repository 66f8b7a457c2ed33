//! Dense float64 arrays and a tape-based reverse-mode autodiff graph.
//!
//! A [`Graph`] owns every node created during one forward pass. Nodes are
//! appended in creation order, so the arena is already topologically sorted
//! and [`Graph::backward`] walks it in reverse. Handles ([`Var`]) are plain
//! indices and only meaningful for the graph that issued them.

use rand::Rng;

use crate::error::{Error, Result};

/// Variance epsilon used by [`Graph::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Row-major dense array of rank 0 to 3.
#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Array {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.len() > 3 {
            return Err(Error::Shape(format!("rank {} > 3 for shape {:?}", shape.len(), shape)));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!("shape {:?} needs {} values, got {}", shape, n, data.len())));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![], data: vec![v] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(&[rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows of a rank-2 array (or leading size otherwise).
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Size of the last dimension.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Transpose of a rank-2 array.
    pub fn t(&self) -> Array {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Array { shape: vec![c, r], data: out }
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Relu(Var),
    Gelu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Embed { table: Var, ids: Vec<usize> },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Scale(Var, f64),
    Transpose(Var),
    Dropout { x: Var, mask: Vec<f64> },
    SumAll(Var),
    RowCosine { a: Var, b: Var },
    Custom { x: Var, grad: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Vec<f64>,
    shape: Vec<usize>,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Primitive selector used by generic tooling (gradient checks, benches).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Primitive {
    MatMul,
    Add,
    Mul,
    Relu,
    Gelu,
    Softmax,
    LogSoftmax,
    LayerNorm,
    EmbedLookup,
    Concat,
    Slice,
    Scale,
    Transpose,
    Dropout,
}

/// Reverse-mode autodiff tape.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    check_finite: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn broadcast_ok(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), check_finite: cfg!(debug_assertions) }
    }

    /// Enables or disables the non-finite input check performed by every primitive.
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<f64>, shape: Vec<usize>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.nodes.push(Node { value, shape, op, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn check(&self, inputs: &[Var], what: &str) -> Result<()> {
        if self.check_finite {
            for v in inputs {
                if self.nodes[v.0].value.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite(format!("input to {what}")));
                }
            }
        }
        Ok(())
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&mut self, a: &Array) -> Var {
        self.push(a.data.clone(), a.shape.clone(), Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, a: &Array) -> Var {
        self.push(a.data.clone(), a.shape.clone(), Op::Leaf, false)
    }

    pub fn constant_owned(&mut self, a: Array) -> Var {
        self.push(a.data, a.shape, Op::Leaf, false)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn value(&self, v: Var) -> Array {
        let n = &self.nodes[v.0];
        Array { shape: n.shape.clone(), data: n.value.clone() }
    }

    pub fn grad(&self, v: Var) -> Option<Array> {
        let n = &self.nodes[v.0];
        n.grad.as_ref().map(|g| Array { shape: n.shape.clone(), data: g.clone() })
    }

    /// `a @ b` for rank-2 operands, or batched over the leading dim for rank 3.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(&[a, b], "matmul")?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, m, k, n) = match (sa.len(), sb.len()) {
            (2, 2) if sa[1] == sb[0] => (1, sa[0], sa[1], sb[1]),
            (3, 3) if sa[0] == sb[0] && sa[2] == sb[1] => (sa[0], sa[1], sa[2], sb[2]),
            _ => return Err(Error::Shape(format!("matmul {:?} x {:?}", sa, sb))),
        };
        let mut out = vec![0.0; batch * m * n];
        {
            let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
            for bt in 0..batch {
                let ao = &av[bt * m * k..(bt + 1) * m * k];
                let bo = &bv[bt * k * n..(bt + 1) * k * n];
                let oo = &mut out[bt * m * n..(bt + 1) * m * n];
                matmul_into(ao, bo, oo, m, k, n);
            }
        }
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, shape, Op::MatMul(a, b), rg))
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Vec<f64>> {
        self.check(&[a, b], name)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !broadcast_ok(sa, sb) {
            return Err(Error::Shape(format!("{name} {:?} with {:?}", sa, sb)));
        }
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let nb = bv.len().max(1);
        Ok(av.iter().enumerate().map(|(i, &x)| f(x, bv[i % nb])).collect())
    }

    /// Elementwise sum; `b` may broadcast over the leading dims of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, shape, Op::Add(a, b), rg))
    }

    /// Elementwise product; `b` may broadcast over the leading dims of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, shape, Op::Mul(a, b), rg))
    }

    fn unary(&mut self, x: Var, name: &str, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        self.check(&[x], name)?;
        let out = self.nodes[x.0].value.iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(out, shape, op, rg))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "relu", |v| v.max(0.0), Op::Relu(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "gelu", gelu, Op::Gelu(x))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, "scale", |v| v * c, Op::Scale(x, c))
    }

    fn rowwise(&mut self, x: Var, name: &str, f: impl Fn(&[f64], &mut [f64])) -> Result<Vec<f64>> {
        self.check(&[x], name)?;
        let shape = self.shape(x);
        if shape.is_empty() {
            return Err(Error::Shape(format!("{name} on a scalar")));
        }
        let c = *shape.last().unwrap();
        let xv = &self.nodes[x.0].value;
        let mut out = vec![0.0; xv.len()];
        if c > 0 {
            for (src, dst) in xv.chunks(c).zip(out.chunks_mut(c)) {
                f(src, dst);
            }
        }
        Ok(out)
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let out = self.rowwise(x, "softmax", softmax_row)?;
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(out, shape, Op::Softmax(x), rg))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let out = self.rowwise(x, "log_softmax", log_softmax_row)?;
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(out, shape, Op::LogSoftmax(x), rg))
    }

    /// Normalizes the last dim to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        self.check(&[x], "layer_norm")?;
        let shape = self.shape(x).to_vec();
        let c = *shape.last().ok_or_else(|| Error::Shape("layer_norm on a scalar".into()))?;
        let xv = &self.nodes[x.0].value;
        let rows = if c == 0 { 0 } else { xv.len() / c };
        let mut out = vec![0.0; xv.len()];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let src = &xv[r * c..(r + 1) * c];
            let mean = src.iter().sum::<f64>() / c as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (o, v) in out[r * c..(r + 1) * c].iter_mut().zip(src) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let rg = self.rg(x);
        Ok(self.push(out, shape, Op::LayerNorm { x, inv_std }, rg))
    }

    /// Gathers rows of a `[V, d]` table.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(Error::Shape(format!("embedding table {:?}", shape)));
        }
        let (v, d) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::IdOutOfRange { id: bad, size: v });
        }
        let tv = &self.nodes[table.0].value;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(out, vec![ids.len(), d], Op::Embed { table, ids: ids.to_vec() }, rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::Shape(format!("concat axis {axis} for {:?}", base)));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            let same = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !same {
                return Err(Error::Shape(format!("concat {:?} with {:?}", base, s)));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let len = self.shape(*v)[axis] * inner;
                out.extend_from_slice(&self.nodes[v.0].value[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = inputs.iter().any(|v| self.rg(*v));
        Ok(self.push(out, shape, Op::Concat { inputs: inputs.to_vec(), axis }, rg))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(Error::Shape(format!("slice {start}..{} on axis {axis} of {:?}", start + len, s)));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let xv = &self.nodes[x.0].value;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * s[axis] * inner + start * inner;
            out.extend_from_slice(&xv[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(out, shape, Op::Slice { x, axis, start }, rg))
    }

    /// Swaps the last two dims.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::Shape(format!("transpose of {:?}", s)));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let batch = if s.len() == 3 { s[0] } else { 1 };
        let xv = &self.nodes[x.0].value;
        let mut out = vec![0.0; xv.len()];
        for b in 0..batch {
            transpose_into(&xv[b * r * c..(b + 1) * r * c], &mut out[b * r * c..(b + 1) * r * c], r, c);
        }
        let mut shape = s;
        let n = shape.len();
        shape.swap(n - 2, n - 1);
        let rg = self.rg(x);
        Ok(self.push(out, shape, Op::Transpose(x), rg))
    }

    /// Inverted dropout with a mask drawn from `rng`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let mask: Vec<f64> = (0..self.nodes[x.0].value.len())
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        self.dropout_with_mask(x, mask)
    }

    /// Dropout with an explicit multiplicative mask (already rescaled).
    pub fn dropout_with_mask(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        if mask.len() != self.nodes[x.0].value.len() {
            return Err(Error::Shape(format!("dropout mask {} for {:?}", mask.len(), self.shape(x))));
        }
        self.check(&[x], "dropout")?;
        let out = self.nodes[x.0].value.iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(out, shape, Op::Dropout { x, mask }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(&[x], "sum")?;
        let s = self.nodes[x.0].value.iter().sum();
        let rg = self.rg(x);
        Ok(self.push(vec![s], vec![], Op::SumAll(x), rg))
    }

    /// Cosine similarity of matching rows of two `[n, d]` arrays; zero-norm rows score 0.
    pub fn row_cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(&[a, b], "row_cosine")?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sa != sb {
            return Err(Error::Shape(format!("row_cosine {:?} with {:?}", sa, sb)));
        }
        let d = sa[1];
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let out = (0..sa[0]).map(|r| cosine(&av[r * d..(r + 1) * d], &bv[r * d..(r + 1) * d])).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, vec![sa[0]], Op::RowCosine { a, b }, rg))
    }

    /// Attaches an externally computed scalar loss whose gradient with respect
    /// to `x` is already known.
    pub(crate) fn custom_scalar(&mut self, x: Var, value: f64, grad: Vec<f64>) -> Var {
        debug_assert_eq!(grad.len(), self.nodes[x.0].value.len());
        let rg = self.rg(x);
        self.push(vec![value], vec![], Op::Custom { x, grad }, rg)
    }

    /// Dispatches a primitive by kind (used by gradient-check tooling).
    pub fn apply(&mut self, kind: Primitive, inputs: &[Var]) -> Result<Var> {
        let need = |n: usize| -> Result<()> {
            if inputs.len() < n {
                Err(Error::Shape(format!("{kind:?} needs {n} inputs")))
            } else {
                Ok(())
            }
        };
        match kind {
            Primitive::MatMul => {
                need(2)?;
                self.matmul(inputs[0], inputs[1])
            }
            Primitive::Add => {
                need(2)?;
                self.add(inputs[0], inputs[1])
            }
            Primitive::Mul => {
                need(2)?;
                self.mul(inputs[0], inputs[1])
            }
            Primitive::Relu => {
                need(1)?;
                self.relu(inputs[0])
            }
            Primitive::Gelu => {
                need(1)?;
                self.gelu(inputs[0])
            }
            Primitive::Softmax => {
                need(1)?;
                self.softmax(inputs[0])
            }
            Primitive::LogSoftmax => {
                need(1)?;
                self.log_softmax(inputs[0])
            }
            Primitive::LayerNorm => {
                need(1)?;
                self.layer_norm(inputs[0])
            }
            Primitive::Concat => {
                need(1)?;
                self.concat(inputs, 0)
            }
            Primitive::Transpose => {
                need(1)?;
                self.transpose(inputs[0])
            }
            Primitive::Scale => {
                need(1)?;
                self.scale(inputs[0], 0.5)
            }
            Primitive::Slice => {
                need(1)?;
                let n = self.shape(inputs[0])[0];
                self.slice(inputs[0], 0, 0, n.div_ceil(2))
            }
            Primitive::EmbedLookup => {
                need(1)?;
                let v = self.shape(inputs[0])[0];
                let ids: Vec<usize> = (0..v).rev().collect();
                self.embed(inputs[0], &ids)
            }
            Primitive::Dropout => {
                need(1)?;
                let n = self.nodes[inputs[0].0].value.len();
                let mask = (0..n).map(|i| if i % 3 == 0 { 0.0 } else { 1.5 }).collect();
                self.dropout_with_mask(inputs[0], mask)
            }
        }
    }

    /// Accumulates d`loss`/d`node` into the gradient of every node that
    /// depends on a parameter leaf. Repeated calls add up.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.nodes[loss.0].shape.iter().all(|&d| d == 1) {
            return Err(Error::NotScalar(self.nodes[loss.0].shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    /// Clears accumulated gradients on all nodes.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let mut send = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
                slot => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
                let (batch, m, k, n) =
                    if sa.len() == 2 { (1, sa[0], sa[1], sb[1]) } else { (sa[0], sa[1], sa[2], sb[2]) };
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                if self.rg(*a) {
                    let mut ga = vec![0.0; batch * m * k];
                    for bt in 0..batch {
                        let go = &g[bt * m * n..(bt + 1) * m * n];
                        let bo = &bv[bt * k * n..(bt + 1) * k * n];
                        let gao = &mut ga[bt * m * k..(bt + 1) * m * k];
                        // dA = dC B^T
                        for r in 0..m {
                            let grow = &go[r * n..(r + 1) * n];
                            for p in 0..k {
                                gao[r * k + p] = dot(grow, &bo[p * n..(p + 1) * n]);
                            }
                        }
                    }
                    send(*a, ga);
                }
                if self.rg(*b) {
                    let mut gb = vec![0.0; batch * k * n];
                    for bt in 0..batch {
                        let go = &g[bt * m * n..(bt + 1) * m * n];
                        let ao = &av[bt * m * k..(bt + 1) * m * k];
                        let gbo = &mut gb[bt * k * n..(bt + 1) * k * n];
                        // dB = A^T dC
                        for r in 0..m {
                            let grow = &go[r * n..(r + 1) * n];
                            for p in 0..k {
                                let s = ao[r * k + p];
                                if s != 0.0 {
                                    axpy(s, grow, &mut gbo[p * n..(p + 1) * n]);
                                }
                            }
                        }
                    }
                    send(*b, gb);
                }
            }
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                if self.rg(*b) {
                    send(*b, reduce_broadcast(g, self.nodes[b.0].value.len()));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let nb = bv.len().max(1);
                if self.rg(*a) {
                    send(*a, g.iter().enumerate().map(|(i, gi)| gi * bv[i % nb]).collect());
                }
                if self.rg(*b) {
                    let prod: Vec<f64> = g.iter().zip(av).map(|(gi, ai)| gi * ai).collect();
                    send(*b, reduce_broadcast(&prod, bv.len()));
                }
            }
            Op::Relu(x) => {
                let xv = &self.nodes[x.0].value;
                send(*x, g.iter().zip(xv).map(|(gi, v)| if *v > 0.0 { *gi } else { 0.0 }).collect());
            }
            Op::Gelu(x) => {
                let xv = &self.nodes[x.0].value;
                send(*x, g.iter().zip(xv).map(|(gi, v)| gi * gelu_grad(*v)).collect());
            }
            Op::Scale(x, c) => send(*x, g.iter().map(|gi| gi * c).collect()),
            Op::Softmax(x) => {
                let c = *node.shape.last().unwrap();
                let mut out = vec![0.0; g.len()];
                if c > 0 {
                    for ((y, gr), o) in node.value.chunks(c).zip(g.chunks(c)).zip(out.chunks_mut(c)) {
                        let s = dot(y, gr);
                        for j in 0..c {
                            o[j] = y[j] * (gr[j] - s);
                        }
                    }
                }
                send(*x, out);
            }
            Op::LogSoftmax(x) => {
                let c = *node.shape.last().unwrap();
                let mut out = vec![0.0; g.len()];
                if c > 0 {
                    for ((y, gr), o) in node.value.chunks(c).zip(g.chunks(c)).zip(out.chunks_mut(c)) {
                        let s: f64 = gr.iter().sum();
                        for j in 0..c {
                            o[j] = gr[j] - y[j].exp() * s;
                        }
                    }
                }
                send(*x, out);
            }
            Op::LayerNorm { x, inv_std } => {
                let c = *node.shape.last().unwrap();
                let mut out = vec![0.0; g.len()];
                if c > 0 {
                    let cf = c as f64;
                    for (r, ((xh, gr), o)) in node.value.chunks(c).zip(g.chunks(c)).zip(out.chunks_mut(c)).enumerate() {
                        let mg = gr.iter().sum::<f64>() / cf;
                        let mgx = dot(gr, xh) / cf;
                        for j in 0..c {
                            o[j] = inv_std[r] * (gr[j] - mg - xh[j] * mgx);
                        }
                    }
                }
                send(*x, out);
            }
            Op::Embed { table, ids } => {
                let d = self.nodes[table.0].shape[1];
                let mut out = vec![0.0; self.nodes[table.0].value.len()];
                for (r, &id) in ids.iter().enumerate() {
                    axpy(1.0, &g[r * d..(r + 1) * d], &mut out[id * d..(id + 1) * d]);
                }
                send(*table, out);
            }
            Op::Concat { inputs, axis } => {
                let s = &node.shape;
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let mut pieces: Vec<Vec<f64>> =
                    inputs.iter().map(|v| Vec::with_capacity(self.nodes[v.0].value.len())).collect();
                let mut off = 0;
                for _ in 0..outer {
                    for (k, v) in inputs.iter().enumerate() {
                        let len = self.nodes[v.0].shape[*axis] * inner;
                        pieces[k].extend_from_slice(&g[off..off + len]);
                        off += len;
                    }
                }
                for (v, p) in inputs.iter().zip(pieces) {
                    send(*v, p);
                }
            }
            Op::Slice { x, axis, start } => {
                let s = &self.nodes[x.0].shape;
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let len = node.shape[*axis];
                let mut out = vec![0.0; self.nodes[x.0].value.len()];
                for o in 0..outer {
                    let base = o * s[*axis] * inner + start * inner;
                    out[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                send(*x, out);
            }
            Op::Transpose(x) => {
                let s = &node.shape;
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                let batch = if s.len() == 3 { s[0] } else { 1 };
                let mut out = vec![0.0; g.len()];
                for b in 0..batch {
                    transpose_into(&g[b * r * c..(b + 1) * r * c], &mut out[b * r * c..(b + 1) * r * c], r, c);
                }
                send(*x, out);
            }
            Op::Dropout { x, mask } => send(*x, g.iter().zip(mask).map(|(a, m)| a * m).collect()),
            Op::SumAll(x) => send(*x, vec![g[0]; self.nodes[x.0].value.len()]),
            Op::RowCosine { a, b } => {
                let d = self.nodes[a.0].shape[1];
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let mut ga = vec![0.0; av.len()];
                let mut gb = vec![0.0; bv.len()];
                for r in 0..node.shape[0] {
                    let (x, y) = (&av[r * d..(r + 1) * d], &bv[r * d..(r + 1) * d]);
                    let (nx, ny) = (dot(x, x).sqrt(), dot(y, y).sqrt());
                    if nx == 0.0 || ny == 0.0 {
                        continue;
                    }
                    let cs = node.value[r];
                    for j in 0..d {
                        ga[r * d + j] = g[r] * (y[j] / (nx * ny) - cs * x[j] / (nx * nx));
                        gb[r * d + j] = g[r] * (x[j] / (nx * ny) - cs * y[j] / (ny * ny));
                    }
                }
                send(*a, ga);
                send(*b, gb);
            }
            Op::Custom { x, grad } => send(*x, grad.iter().map(|v| v * g[0]).collect()),
        }
    }
}

fn reduce_broadcast(g: &[f64], n: usize) -> Vec<f64> {
    if n == g.len() {
        return g.to_vec();
    }
    let mut out = vec![0.0; n];
    for chunk in g.chunks(n.max(1)) {
        axpy(1.0, chunk, &mut out);
    }
    out
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(s: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += s * xi;
    }
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let s = a[i * k + p];
            if s != 0.0 {
                axpy(s, &b[p * n..(p + 1) * n], orow);
            }
        }
    }
}

fn transpose_into(src: &[f64], dst: &mut [f64], r: usize, c: usize) {
    for i in 0..r {
        for j in 0..c {
            dst[j * r + i] = src[i * c + j];
        }
    }
}

/// Cosine similarity; 0 when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (dot(a, a).sqrt(), dot(b, b).sqrt());
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}

pub(crate) fn softmax_row(x: &[f64], out: &mut [f64]) {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (o, v) in out.iter_mut().zip(x) {
        *o = (v - m).exp();
        s += *o;
    }
    out.iter_mut().for_each(|o| *o /= s);
}

pub(crate) fn log_softmax_row(x: &[f64], out: &mut [f64]) {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    for (o, v) in out.iter_mut().zip(x) {
        *o = v - lse;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Maximum relative error between the analytic gradient of `f` at `x` and a
/// central finite difference with step `h`:
/// `max_i |a_i - n_i| / (|a_i| + |n_i| + 1e-12)`.
pub fn grad_check<F>(f: F, x: &Array, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.param(x);
    let out = f(&mut g, xv)?;
    g.backward(out)?;
    let analytic = g.grad(xv).map(|a| a.data).unwrap_or_else(|| vec![0.0; x.len()]);

    let eval = |arr: &Array| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.param(arr);
        let out = f(&mut g, v)?;
        Ok(g.data(out)[0])
    };
    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + h;
        let up = eval(&probe)?;
        probe.data[i] = orig - h;
        let down = eval(&probe)?;
        probe.data[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[i];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
        worst = worst.max(rel);
    }
    Ok(worst)
}
