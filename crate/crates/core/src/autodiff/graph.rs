use super::tensor::{matmul_into, matmul_nt_into, matmul_tn_into, Real, Tensor};
use super::AutodiffError;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

enum Value<'p, T> {
    Owned(Tensor<T>),
    Borrowed(&'p Tensor<T>),
}

impl<T> Value<'_, T> {
    fn get(&self) -> &Tensor<T> {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

enum Op<T> {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulNt(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, T),
    Gelu(NodeId),
    Softmax(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gather {
        table: NodeId,
        ids: Vec<usize>,
    },
    ConcatRows(NodeId, NodeId),
    SliceCols {
        x: NodeId,
        start: usize,
    },
    ConcatCols(Vec<NodeId>),
    /// Entries masked to -inf receive no gradient.
    Masked(NodeId),
    CrossEntropy {
        logits: NodeId,
        targets: Vec<Option<usize>>,
        probs: Vec<T>,
        count: usize,
    },
    Sum(NodeId),
}

struct Node<'p, T> {
    value: Value<'p, T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Tape of tensor operations recorded during one forward pass.
///
/// Nodes are appended in evaluation order, so reverse insertion order is a
/// valid reverse topological order and [`Graph::backward`] visits every
/// node once. Parameters can be borrowed to avoid copying them per pass.
pub struct Graph<'p, T: Real = f32> {
    nodes: Vec<Node<'p, T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl<'p, T: Real> Graph<'p, T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Value<'p, T>, op: Op<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn owned(&mut self, t: Tensor<T>, op: Op<T>, parents: &[NodeId]) -> NodeId {
        let needs = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.push(Value::Owned(t), op, needs)
    }

    /// Differentiable leaf owning its value.
    pub fn input(&mut self, t: Tensor<T>) -> NodeId {
        self.push(Value::Owned(t), Op::Leaf, true)
    }

    /// Differentiable leaf borrowing its value.
    pub fn param(&mut self, t: &'p Tensor<T>) -> NodeId {
        self.push(Value::Borrowed(t), Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> NodeId {
        self.push(Value::Owned(t), Op::Leaf, false)
    }

    pub fn constant_ref(&mut self, t: &'p Tensor<T>) -> NodeId {
        self.push(Value::Borrowed(t), Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        self.nodes[id.0].value.get()
    }

    fn dims2(&self, id: NodeId) -> (usize, usize) {
        let t = self.value(id);
        (t.rows(), t.cols())
    }

    fn mismatch(&self, op: &'static str, a: NodeId, b: NodeId) -> AutodiffError {
        AutodiffError::ShapeMismatch {
            op,
            left: self.value(a).shape().to_vec(),
            right: self.value(b).shape().to_vec(),
        }
    }

    /// `a[n,k] * b[k,m]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let (n, k) = self.dims2(a);
        let (k2, m) = self.dims2(b);
        if k != k2 || self.value(b).shape().len() != 2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let mut out = vec![T::zero(); n * m];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, n, k, m);
        Ok(self.owned(Tensor::new(vec![n, m], out)?, Op::MatMul(a, b), &[a, b]))
    }

    /// `a[n,k] * b[m,k]^T`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let (n, k) = self.dims2(a);
        let (m, k2) = self.dims2(b);
        if k != k2 {
            return Err(self.mismatch("matmul_nt", a, b));
        }
        let mut out = vec![T::zero(); n * m];
        matmul_nt_into(self.value(a).data(), self.value(b).data(), &mut out, n, k, m);
        Ok(self.owned(Tensor::new(vec![n, m], out)?, Op::MatMulNt(a, b), &[a, b]))
    }

    fn zip_same(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<NodeId, AutodiffError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.mismatch(name, a, b));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.owned(Tensor::new(shape, data)?, op, &[a, b]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Broadcast-add a length-m vector to every row of `a[n,m]`.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId, AutodiffError> {
        let (n, m) = self.dims2(a);
        if self.value(bias).len() != m {
            return Err(self.mismatch("add_row", a, bias));
        }
        let b = self.value(bias).data();
        let data = self
            .value(a)
            .data()
            .chunks(m)
            .flat_map(|row| row.iter().zip(b).map(|(&x, &y)| x + y))
            .collect();
        Ok(self.owned(Tensor::new(vec![n, m], data)?, Op::AddRow(a, bias), &[a, bias]))
    }

    pub fn scale(&mut self, a: NodeId, s: T) -> NodeId {
        let t = self.value(a);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| x * s).collect())
            .expect("same shape");
        self.owned(out, Op::Scale(a, s), &[a])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let c = T::from_f64(GELU_C);
        let k = T::from_f64(0.044715);
        let half = T::from_f64(0.5);
        let t = self.value(a);
        let data = t
            .data()
            .iter()
            .map(|&x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()))
            .collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.owned(out, Op::Gelu(a), &[a])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let cols = t.cols();
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(cols) {
            softmax_in_place(row);
        }
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.owned(out, Op::Softmax(a), &[a])
    }

    /// Layer normalization over the last axis with learned scale and shift.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId, AutodiffError> {
        let (n, m) = self.dims2(x);
        if self.value(gamma).len() != m {
            return Err(self.mismatch("layer_norm", x, gamma));
        }
        if self.value(beta).len() != m {
            return Err(self.mismatch("layer_norm", x, beta));
        }
        let eps = T::from_f64(LN_EPS);
        let mf = T::from_f64(m as f64);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = Vec::with_capacity(n * m);
        let mut rstd = Vec::with_capacity(n);
        let mut out = Vec::with_capacity(n * m);
        for row in self.value(x).data().chunks(m) {
            let mean = row.iter().copied().sum::<T>() / mf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / mf;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        };
        Ok(self.owned(Tensor::new(vec![n, m], out)?, op, &[x, gamma, beta]))
    }

    /// Rows of `table[V,d]` selected by `ids`.
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId, AutodiffError> {
        let (v, d) = self.dims2(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(AutodiffError::IndexOutOfRange { index: bad, len: v });
        }
        let t = self.value(table);
        let data = ids.iter().flat_map(|&i| t.row(i).iter().copied()).collect();
        let op = Op::Gather {
            table,
            ids: ids.to_vec(),
        };
        Ok(self.owned(Tensor::new(vec![ids.len(), d], data)?, op, &[table]))
    }

    /// Stack `a[n1,d]` on top of `b[n2,d]` along the sequence axis.
    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let (n1, d) = self.dims2(a);
        let (n2, d2) = self.dims2(b);
        if d != d2 {
            return Err(self.mismatch("concat_rows", a, b));
        }
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        Ok(self.owned(Tensor::new(vec![n1 + n2, d], data)?, Op::ConcatRows(a, b), &[a, b]))
    }

    /// Columns `start..end` of `x[n,m]`.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId, AutodiffError> {
        let (n, m) = self.dims2(x);
        if start >= end || end > m {
            return Err(AutodiffError::IndexOutOfRange { index: end, len: m });
        }
        let data = self
            .value(x)
            .data()
            .chunks(m)
            .flat_map(|row| row[start..end].iter().copied())
            .collect();
        Ok(self.owned(Tensor::new(vec![n, end - start], data)?, Op::SliceCols { x, start }, &[x]))
    }

    /// Side-by-side concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, AutodiffError> {
        let n = self.dims2(parts[0]).0;
        if let Some(&bad) = parts.iter().find(|&&p| self.dims2(p).0 != n) {
            return Err(self.mismatch("concat_cols", parts[0], bad));
        }
        let widths: Vec<usize> = parts.iter().map(|&p| self.dims2(p).1).collect();
        let m: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * m);
        for i in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        Ok(self.owned(Tensor::new(vec![n, m], data)?, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Sets entries above the diagonal of a square score matrix to -inf.
    pub fn causal_mask(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        let (n, m) = self.dims2(a);
        if n != m {
            return Err(self.mismatch("causal_mask", a, a));
        }
        let mut data = self.value(a).data().to_vec();
        for i in 0..n {
            for x in &mut data[i * m + i + 1..(i + 1) * m] {
                *x = T::neg_infinity();
            }
        }
        Ok(self.owned(Tensor::new(vec![n, m], data)?, Op::Masked(a), &[a]))
    }

    /// Sets the listed columns of every row to -inf.
    pub fn mask_cols(&mut self, a: NodeId, cols: &[bool]) -> Result<NodeId, AutodiffError> {
        let m = self.dims2(a).1;
        if cols.len() != m {
            return Err(AutodiffError::ShapeMismatch {
                op: "mask_cols",
                left: self.value(a).shape().to_vec(),
                right: vec![cols.len()],
            });
        }
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(m) {
            for (x, &masked) in row.iter_mut().zip(cols) {
                if masked {
                    *x = T::neg_infinity();
                }
            }
        }
        let shape = self.value(a).shape().to_vec();
        Ok(self.owned(Tensor::new(shape, data)?, Op::Masked(a), &[a]))
    }

    /// Mean cross-entropy of `softmax(logits)` rows against target indices;
    /// rows with no target are skipped.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[Option<usize>]) -> Result<NodeId, AutodiffError> {
        let (n, m) = self.dims2(logits);
        if targets.len() != n {
            return Err(AutodiffError::ShapeMismatch {
                op: "cross_entropy",
                left: vec![n, m],
                right: vec![targets.len()],
            });
        }
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(AutodiffError::NoTargets);
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = T::zero();
        for (row, target) in probs.chunks_mut(m).zip(targets) {
            softmax_in_place(row);
            if let Some(t) = *target {
                if t >= m {
                    return Err(AutodiffError::IndexOutOfRange { index: t, len: m });
                }
                loss = loss - row[t].max(T::min_positive_value()).ln();
            }
        }
        loss = loss / T::from_f64(count as f64);
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
            count,
        };
        Ok(self.owned(Tensor::scalar(loss), op, &[logits]))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().copied().sum();
        self.owned(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&mut self, root: NodeId) -> Result<(), AutodiffError> {
        if self.value(root).len() != 1 {
            return Err(AutodiffError::NonScalarOutput(self.value(root).shape().to_vec()));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.grads.get(id.0)?.as_deref()
    }

    fn accumulate(&mut self, id: NodeId, f: impl FnOnce(&mut [T], &Self)) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        let mut buf = self.grads[id.0]
            .take()
            .unwrap_or_else(|| vec![T::zero(); self.value(id).len()]);
        f(&mut buf, self);
        self.grads[id.0] = Some(buf);
    }

    fn propagate(&mut self, i: usize, g: &[T]) {
        // The op is moved out so the graph can be borrowed mutably below.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (n, k) = self.dims2(a);
                let m = self.dims2(b).1;
                self.accumulate(a, |ga, s| matmul_nt_into(g, s.value(b).data(), ga, n, m, k));
                self.accumulate(b, |gb, s| matmul_tn_into(s.value(a).data(), g, gb, n, k, m));
            }
            &Op::MatMulNt(a, b) => {
                let (n, k) = self.dims2(a);
                let m = self.dims2(b).0;
                self.accumulate(a, |ga, s| matmul_into(g, s.value(b).data(), ga, n, m, k));
                self.accumulate(b, |gb, s| matmul_tn_into(g, s.value(a).data(), gb, n, m, k));
            }
            &Op::Add(a, b) => {
                self.accumulate(a, |ga, _| add_assign(ga, g));
                self.accumulate(b, |gb, _| add_assign(gb, g));
            }
            &Op::Mul(a, b) => {
                self.accumulate(a, |ga, s| {
                    for ((x, &gi), &y) in ga.iter_mut().zip(g).zip(s.value(b).data()) {
                        *x = *x + gi * y;
                    }
                });
                self.accumulate(b, |gb, s| {
                    for ((x, &gi), &y) in gb.iter_mut().zip(g).zip(s.value(a).data()) {
                        *x = *x + gi * y;
                    }
                });
            }
            &Op::AddRow(a, bias) => {
                self.accumulate(a, |ga, _| add_assign(ga, g));
                self.accumulate(bias, |gb, _| {
                    let m = gb.len();
                    for row in g.chunks(m) {
                        add_assign(gb, row);
                    }
                });
            }
            &Op::Scale(a, s) => {
                self.accumulate(a, |ga, _| {
                    for (x, &gi) in ga.iter_mut().zip(g) {
                        *x = *x + gi * s;
                    }
                });
            }
            &Op::Gelu(a) => {
                let c = T::from_f64(GELU_C);
                let k = T::from_f64(0.044715);
                let half = T::from_f64(0.5);
                let three = T::from_f64(3.0);
                self.accumulate(a, |ga, s| {
                    for ((x, &gi), &v) in ga.iter_mut().zip(g).zip(s.value(a).data()) {
                        let th = (c * (v + k * v * v * v)).tanh();
                        let d = half * (T::one() + th)
                            + half * v * (T::one() - th * th) * c * (T::one() + three * k * v * v);
                        *x = *x + gi * d;
                    }
                });
            }
            &Op::Softmax(a) => {
                let y = self.value(NodeId(i)).data().to_vec();
                let m = self.dims2(a).1;
                self.accumulate(a, |ga, _| {
                    for ((gx, gy), yr) in ga.chunks_mut(m).zip(g.chunks(m)).zip(y.chunks(m)) {
                        let dot: T = gy.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for ((x, &gi), &yi) in gx.iter_mut().zip(gy).zip(yr) {
                            *x = *x + yi * (gi - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let m = self.dims2(*x).1;
                let mf = T::from_f64(m as f64);
                self.accumulate(*gamma, |gg, _| {
                    for (gr, hr) in g.chunks(m).zip(xhat.chunks(m)) {
                        for ((o, &gi), &h) in gg.iter_mut().zip(gr).zip(hr) {
                            *o = *o + gi * h;
                        }
                    }
                });
                self.accumulate(*beta, |gb, _| {
                    for gr in g.chunks(m) {
                        add_assign(gb, gr);
                    }
                });
                self.accumulate(*x, |gx, s| {
                    let gamma = s.value(*gamma).data();
                    for (r, ((gxr, gr), hr)) in gx.chunks_mut(m).zip(g.chunks(m)).zip(xhat.chunks(m)).enumerate() {
                        let dh: Vec<T> = gr.iter().zip(gamma).map(|(&a, &b)| a * b).collect();
                        let mean_dh = dh.iter().copied().sum::<T>() / mf;
                        let mean_dhh = dh.iter().zip(hr).map(|(&a, &b)| a * b).sum::<T>() / mf;
                        for ((o, &d), &h) in gxr.iter_mut().zip(&dh).zip(hr) {
                            *o = *o + rstd[r] * (d - mean_dh - h * mean_dhh);
                        }
                    }
                });
            }
            Op::Gather { table, ids } => {
                let d = self.dims2(*table).1;
                self.accumulate(*table, |gt, _| {
                    for (row, &id) in g.chunks(d).zip(ids) {
                        add_assign(&mut gt[id * d..(id + 1) * d], row);
                    }
                });
            }
            &Op::ConcatRows(a, b) => {
                let split = self.value(a).len();
                self.accumulate(a, |ga, _| add_assign(ga, &g[..split]));
                self.accumulate(b, |gb, _| add_assign(gb, &g[split..]));
            }
            &Op::SliceCols { x, start } => {
                let m = self.dims2(x).1;
                let w = self.dims2(NodeId(i)).1;
                self.accumulate(x, |gx, _| {
                    for (gxr, gr) in gx.chunks_mut(m).zip(g.chunks(w)) {
                        add_assign(&mut gxr[start..start + w], gr);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let m = self.dims2(NodeId(i)).1;
                let mut offset = 0;
                for &p in parts {
                    let w = self.dims2(p).1;
                    self.accumulate(p, |gp, _| {
                        for (gpr, gr) in gp.chunks_mut(w).zip(g.chunks(m)) {
                            add_assign(gpr, &gr[offset..offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            &Op::Masked(a) => {
                let out = self.value(NodeId(i)).data().to_vec();
                self.accumulate(a, |ga, _| {
                    for ((x, &gi), &o) in ga.iter_mut().zip(g).zip(&out) {
                        if o != T::neg_infinity() {
                            *x = *x + gi;
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let m = self.dims2(*logits).1;
                let scale = g[0] / T::from_f64(*count as f64);
                self.accumulate(*logits, |gl, _| {
                    for ((glr, pr), t) in gl.chunks_mut(m).zip(probs.chunks(m)).zip(targets) {
                        let Some(t) = *t else { continue };
                        for (j, (x, &p)) in glr.iter_mut().zip(pr).enumerate() {
                            let onehot = if j == t { T::one() } else { T::zero() };
                            *x = *x + scale * (p - onehot);
                        }
                    }
                });
            }
            &Op::Sum(a) => {
                self.accumulate(a, |ga, _| {
                    for x in ga.iter_mut() {
                        *x = *x + g[0];
                    }
                });
            }
        }
        self.nodes[i].op = op;
    }
}

fn add_assign<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

/// Numerically stable softmax; a row of all -inf stays all zero.
pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        row.iter_mut().for_each(|x| *x = T::zero());
        return;
    }
    let mut total = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total = total + *x;
    }
    for x in row.iter_mut() {
        *x = *x / total;
    }
}
