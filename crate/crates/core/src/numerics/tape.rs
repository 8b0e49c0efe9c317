//! Eager reverse-mode tape.
//!
//! Every builder method evaluates its node immediately and records enough of
//! the trace for [`Tape::backward`]. Tensors are treated as matrices
//! `[rows, cols]`; rank-1 values act as a single row.

use super::{NumericsError, ParamStore, Real, SegmentId, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(SegmentId),
    Detach,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Affine { x: Var, w: Var, b: Var },
    Silu(Var),
    Relu(Var),
    Sin(Var),
    Cos(Var),
    Concat(Vec<Var>),
    Embedding { table: Var, ids: Vec<usize> },
    Mse(Var, Var),
    SoftmaxXent { logits: Var, labels: Vec<usize> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::Detach => "detach",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Affine { .. } => "affine",
            Op::Silu(_) => "silu",
            Op::Relu(_) => "relu",
            Op::Sin(_) => "sin",
            Op::Cos(_) => "cos",
            Op::Concat(_) => "concat",
            Op::Embedding { .. } => "embedding",
            Op::Mse(..) => "mse",
            Op::SoftmaxXent { .. } => "softmax_xent",
        }
    }
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

/// Evaluation trace of one computation.
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.as_matrix_dims()
    }

    fn shape_err(&self, op: &str, msg: String) -> NumericsError {
        NumericsError::Structure {
            node: self.nodes.len(),
            op: op.to_string(),
            msg,
        }
    }

    fn push(&mut self, op: Op, value: Tensor<T>) -> Result<Var, NumericsError> {
        if !value.is_finite() {
            return Err(NumericsError::NonFinite {
                node: self.nodes.len(),
                op: op.name().to_string(),
            });
        }
        let requires_grad = match &op {
            Op::Input | Op::Detach => false,
            Op::Param(_) => true,
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Mse(a, b) => {
                self.requires_grad(*a) || self.requires_grad(*b)
            }
            Op::Scale(a, _) | Op::Silu(a) | Op::Relu(a) | Op::Sin(a) | Op::Cos(a) => {
                self.requires_grad(*a)
            }
            Op::Affine { x, w, b } => {
                self.requires_grad(*x) || self.requires_grad(*w) || self.requires_grad(*b)
            }
            Op::Concat(parts) => parts.iter().any(|p| self.requires_grad(*p)),
            Op::Embedding { table, .. } => self.requires_grad(*table),
            Op::SoftmaxXent { logits, .. } => self.requires_grad(*logits),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Constant input; never receives gradient.
    pub fn input(&mut self, value: Tensor<T>) -> Result<Var, NumericsError> {
        self.push(Op::Input, value)
    }

    /// Leaf bound to a parameter segment; backward accumulates into its grad buffer.
    pub fn param(&mut self, store: &ParamStore<T>, id: SegmentId) -> Result<Var, NumericsError> {
        self.push(Op::Param(id), store.value(id).clone())
    }

    /// Stop-gradient marker: same value, no gradient flows to `a`.
    pub fn detach(&mut self, a: Var) -> Result<Var, NumericsError> {
        let v = self.value(a).clone();
        self.push(Op::Detach, v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(self.shape_err(
                "matmul",
                format!("inner dimensions differ: [{m},{k}] x [{k2},{n}]"),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            n as isize,
            1,
            T::zero(),
            &mut out,
        );
        self.push(Op::MatMul(a, b), Tensor::from_parts_unchecked(vec![m, n], out))
    }

    /// Elementwise sum; `b` may also be a single row broadcast over the rows of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (m, n) = self.dims(a);
        let (mb, nb) = self.dims(b);
        if nb != n || (mb != m && mb != 1) {
            return Err(self.shape_err(
                "add",
                format!("cannot add [{mb},{nb}] to [{m},{n}]"),
            ));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let out: Vec<T> = if mb == m {
            av.iter().zip(bv).map(|(&x, &y)| x + y).collect()
        } else {
            av.chunks(n)
                .flat_map(|row| row.iter().zip(bv).map(|(&x, &y)| x + y))
                .collect()
        };
        let shape = self.value(a).shape().to_vec();
        self.push(Op::Add(a, b), Tensor::from_parts_unchecked(shape, out))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("sub", a, b)?;
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x - y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.push(Op::Sub(a, b), Tensor::from_parts_unchecked(shape, out))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("mul", a, b)?;
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.push(Op::Mul(a, b), Tensor::from_parts_unchecked(shape, out))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, NumericsError> {
        let k = T::lit(c);
        let out = self.value(a).data().iter().map(|&x| x * k).collect();
        let shape = self.value(a).shape().to_vec();
        self.push(Op::Scale(a, c), Tensor::from_parts_unchecked(shape, out))
    }

    /// `x·w + b` with `x: [m,k]`, `w: [k,n]`, `b: [n]` or `[1,n]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NumericsError> {
        let (m, k) = self.dims(x);
        let (k2, n) = self.dims(w);
        let (bm, bn) = self.dims(b);
        if k != k2 || bm != 1 || bn != n {
            return Err(self.shape_err(
                "affine",
                format!("x [{m},{k}], w [{k2},{n}], b [{bm},{bn}] are incompatible"),
            ));
        }
        let bias = self.value(b).data();
        let mut out: Vec<T> = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(bias);
        }
        T::gemm(
            m,
            k,
            n,
            self.value(x).data(),
            k as isize,
            1,
            self.value(w).data(),
            n as isize,
            1,
            T::one(),
            &mut out,
        );
        self.push(
            Op::Affine { x, w, b },
            Tensor::from_parts_unchecked(vec![m, n], out),
        )
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(T) -> T) -> Result<Var, NumericsError> {
        let out = self.value(a).data().iter().map(|&x| f(x)).collect();
        let shape = self.value(a).shape().to_vec();
        self.push(op, Tensor::from_parts_unchecked(shape, out))
    }

    pub fn silu(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.unary(a, Op::Silu(a), |x| x * sigmoid(x))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.unary(a, Op::Relu(a), |x| if x > T::zero() { x } else { T::zero() })
    }

    pub fn sin(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.unary(a, Op::Sin(a), T::sin)
    }

    pub fn cos(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.unary(a, Op::Cos(a), T::cos)
    }

    /// Column-wise concatenation of matrices with equal row counts.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let Some(&first) = parts.first() else {
            return Err(self.shape_err("concat", "no inputs".into()));
        };
        let rows = self.dims(first).0;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.dims(p);
            if r != rows {
                return Err(self.shape_err(
                    "concat",
                    format!("row counts differ: {rows} vs {r} (node {})", p.0),
                ));
            }
            total += c;
        }
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        self.push(
            Op::Concat(parts.to_vec()),
            Tensor::from_parts_unchecked(vec![rows, total], out),
        )
    }

    /// Row gather: output row `i` is `table[ids[i]]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, NumericsError> {
        let (rows, cols) = self.dims(table);
        if ids.is_empty() {
            return Err(self.shape_err("embedding", "empty id list".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(self.shape_err(
                "embedding",
                format!("id {bad} out of range for table with {rows} rows"),
            ));
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            out.extend_from_slice(t.row(i));
        }
        self.push(
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            Tensor::from_parts_unchecked(vec![ids.len(), cols], out),
        )
    }

    /// Mean of squared differences over all elements; scalar output.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("mse", a, b)?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let n = T::lit(av.len() as f64);
        let s: T = av.iter().zip(bv).map(|(&x, &y)| (x - y) * (x - y)).sum();
        self.push(Op::Mse(a, b), Tensor::scalar(s / n))
    }

    /// Mean softmax cross-entropy of `logits: [m, classes]` against integer labels.
    pub fn softmax_xent(&mut self, logits: Var, labels: &[usize]) -> Result<Var, NumericsError> {
        let (m, c) = self.dims(logits);
        if labels.len() != m || labels.iter().any(|&l| l >= c) {
            return Err(self.shape_err(
                "softmax_xent",
                format!("{} labels for [{m},{c}] logits", labels.len()),
            ));
        }
        let lv = self.value(logits);
        let mut total = T::zero();
        for (i, &l) in labels.iter().enumerate() {
            let row = lv.row(i);
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&z| (z - mx).exp()).sum::<T>().ln() + mx;
            total = total + (lse - row[l]);
        }
        let v = total / T::lit(m as f64);
        self.push(
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
            },
            Tensor::scalar(v),
        )
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<(), NumericsError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if self.dims(a) != self.dims(b) {
            return Err(self.shape_err(op, format!("shapes differ: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    /// Reverse sweep from a scalar `root`, accumulating into `params` grad buffers.
    pub fn backward(&self, root: Var, params: &mut ParamStore<T>) -> Result<(), NumericsError> {
        if self.value(root).len() != 1 {
            return Err(NumericsError::Structure {
                node: root.0,
                op: self.nodes[root.0].op.name().to_string(),
                msg: format!(
                    "backward needs a scalar root, got shape {:?}",
                    self.value(root).shape()
                ),
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![T::one()]);

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            match &node.op {
                Op::Input | Op::Detach => {}
                Op::Param(id) => {
                    let seg = params.segment_mut(*id);
                    if seg.grad.len() != g.len() {
                        return Err(NumericsError::Structure {
                            node: i,
                            op: "param".into(),
                            msg: format!("segment '{}' changed shape since forward", seg.name),
                        });
                    }
                    for (acc, v) in seg.grad.data_mut().iter_mut().zip(&g) {
                        *acc = *acc + *v;
                    }
                }
                Op::MatMul(a, b) => {
                    let (m, k) = self.dims(*a);
                    let n = self.dims(*b).1;
                    if self.requires_grad(*a) {
                        let ga = slot(&mut grads, *a, m * k);
                        // dA = G · Bᵀ
                        T::gemm(m, n, k, &g, n as isize, 1, self.value(*b).data(), 1, n as isize, T::one(), ga);
                    }
                    if self.requires_grad(*b) {
                        let gb = slot(&mut grads, *b, k * n);
                        // dB = Aᵀ · G
                        T::gemm(k, m, n, self.value(*a).data(), 1, k as isize, &g, n as isize, 1, T::one(), gb);
                    }
                }
                Op::Add(a, b) => {
                    if self.requires_grad(*a) {
                        add_into(slot(&mut grads, *a, g.len()), &g);
                    }
                    if self.requires_grad(*b) {
                        let nb = self.value(*b).len();
                        let gb = slot(&mut grads, *b, nb);
                        if nb == g.len() {
                            add_into(gb, &g);
                        } else {
                            col_sum_into(gb, &g);
                        }
                    }
                }
                Op::Sub(a, b) => {
                    if self.requires_grad(*a) {
                        add_into(slot(&mut grads, *a, g.len()), &g);
                    }
                    if self.requires_grad(*b) {
                        for (acc, v) in slot(&mut grads, *b, g.len()).iter_mut().zip(&g) {
                            *acc = *acc - *v;
                        }
                    }
                }
                Op::Mul(a, b) => {
                    if self.requires_grad(*a) {
                        let bv = self.value(*b).data();
                        for ((acc, v), y) in slot(&mut grads, *a, g.len()).iter_mut().zip(&g).zip(bv) {
                            *acc = *acc + *v * *y;
                        }
                    }
                    if self.requires_grad(*b) {
                        let av = self.value(*a).data();
                        for ((acc, v), x) in slot(&mut grads, *b, g.len()).iter_mut().zip(&g).zip(av) {
                            *acc = *acc + *v * *x;
                        }
                    }
                }
                Op::Scale(a, c) => {
                    let k = T::lit(*c);
                    for (acc, v) in slot(&mut grads, *a, g.len()).iter_mut().zip(&g) {
                        *acc = *acc + *v * k;
                    }
                }
                Op::Affine { x, w, b } => {
                    let (m, k) = self.dims(*x);
                    let n = self.dims(*w).1;
                    if self.requires_grad(*x) {
                        let gx = slot(&mut grads, *x, m * k);
                        T::gemm(m, n, k, &g, n as isize, 1, self.value(*w).data(), 1, n as isize, T::one(), gx);
                    }
                    if self.requires_grad(*w) {
                        let gw = slot(&mut grads, *w, k * n);
                        T::gemm(k, m, n, self.value(*x).data(), 1, k as isize, &g, n as isize, 1, T::one(), gw);
                    }
                    if self.requires_grad(*b) {
                        col_sum_into(slot(&mut grads, *b, n), &g);
                    }
                }
                Op::Silu(a) => {
                    let xv = self.value(*a).data();
                    for ((acc, v), &x) in slot(&mut grads, *a, g.len()).iter_mut().zip(&g).zip(xv) {
                        let s = sigmoid(x);
                        *acc = *acc + *v * s * (T::one() + x * (T::one() - s));
                    }
                }
                Op::Relu(a) => {
                    let xv = self.value(*a).data();
                    for ((acc, v), &x) in slot(&mut grads, *a, g.len()).iter_mut().zip(&g).zip(xv) {
                        if x > T::zero() {
                            *acc = *acc + *v;
                        }
                    }
                }
                Op::Sin(a) => {
                    let xv = self.value(*a).data();
                    for ((acc, v), &x) in slot(&mut grads, *a, g.len()).iter_mut().zip(&g).zip(xv) {
                        *acc = *acc + *v * x.cos();
                    }
                }
                Op::Cos(a) => {
                    let xv = self.value(*a).data();
                    for ((acc, v), &x) in slot(&mut grads, *a, g.len()).iter_mut().zip(&g).zip(xv) {
                        *acc = *acc - *v * x.sin();
                    }
                }
                Op::Concat(parts) => {
                    let (rows, total) = node.value.as_matrix_dims();
                    let mut offset = 0;
                    for &p in parts {
                        let c = self.dims(p).1;
                        if self.requires_grad(p) {
                            let gp = slot(&mut grads, p, rows * c);
                            for r in 0..rows {
                                let src = &g[r * total + offset..r * total + offset + c];
                                add_into(&mut gp[r * c..(r + 1) * c], src);
                            }
                        }
                        offset += c;
                    }
                }
                Op::Embedding { table, ids } => {
                    let (rows, cols) = self.dims(*table);
                    let gt = slot(&mut grads, *table, rows * cols);
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * cols..(id + 1) * cols], &g[r * cols..(r + 1) * cols]);
                    }
                }
                Op::Mse(a, b) => {
                    let av = self.value(*a).data();
                    let bv = self.value(*b).data();
                    let k = g[0] * T::lit(2.0 / av.len() as f64);
                    if self.requires_grad(*a) {
                        for ((acc, x), y) in slot(&mut grads, *a, av.len()).iter_mut().zip(av).zip(bv) {
                            *acc = *acc + k * (*x - *y);
                        }
                    }
                    if self.requires_grad(*b) {
                        for ((acc, x), y) in slot(&mut grads, *b, av.len()).iter_mut().zip(av).zip(bv) {
                            *acc = *acc - k * (*x - *y);
                        }
                    }
                }
                Op::SoftmaxXent { logits, labels } => {
                    let (m, c) = self.dims(*logits);
                    let lv = self.value(*logits);
                    let k = g[0] / T::lit(m as f64);
                    let gl = slot(&mut grads, *logits, m * c);
                    for (i, &l) in labels.iter().enumerate() {
                        let row = lv.row(i);
                        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
                        let z: T = row.iter().map(|&v| (v - mx).exp()).sum();
                        for (j, &v) in row.iter().enumerate() {
                            let p = (v - mx).exp() / z;
                            let t = if j == l { T::one() } else { T::zero() };
                            gl[i * c + j] = gl[i * c + j] + k * (p - t);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn slot<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn add_into<T: Real>(acc: &mut [T], src: &[T]) {
    for (a, s) in acc.iter_mut().zip(src) {
        *a = *a + *s;
    }
}

fn col_sum_into<T: Real>(acc: &mut [T], g: &[T]) {
    let n = acc.len();
    for row in g.chunks(n) {
        add_into(acc, row);
    }
}
