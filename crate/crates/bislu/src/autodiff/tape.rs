//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Ops are recorded in forward execution order; `backward` replays them in
//! reverse, accumulating vector-Jacobian products. Gradients add across
//! multiple uses of a value. Shape mismatches are programmer errors and
//! panic with both shapes in the message.

use super::{RngState, Scalar, Tensor};

/// Handle to a value on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Clamp floor applied inside `log`.
pub const LOG_EPS: f64 = 1e-12;

enum Op<F: Scalar> {
    Leaf,
    Matmul { a: Var, b: Var },
    /// out = a · bᵀ, a: m×k, b: n×k.
    MatmulNt { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    /// Row vector broadcast-added to every row of a matrix.
    AddRow { mat: Var, row: Var },
    RepeatRow { row: Var, n: usize },
    Scale { x: Var, c: F },
    /// out = c - x; the constant is baked into the forward data.
    SubFromConst { x: Var },
    Sigmoid { x: Var },
    Tanh { x: Var },
    Relu { x: Var },
    Gelu { x: Var },
    Exp { x: Var },
    /// ln(max(x, LOG_EPS)).
    Log { x: Var },
    Clamp { x: Var, lo: F, hi: F },
    /// Row-wise max-subtracted softmax; a vector is one row.
    SoftmaxRows { x: Var },
    /// Vector -> scalar, max-subtracted.
    LogSumExp { x: Var },
    Sum { x: Var },
    /// Column sums: m×c -> c.
    SumAxis0 { x: Var },
    ConcatVec { a: Var, b: Var },
    ConcatCols { a: Var, b: Var },
    Row { mat: Var, i: usize },
    SliceRows { mat: Var, r0: usize, r1: usize },
    SliceCols { mat: Var, c0: usize, c1: usize },
    StackRows { parts: Vec<Var> },
    GatherRows { mat: Var, ids: Vec<usize> },
    /// out[r] = mat[r, ids[r]].
    SelectPerRow { mat: Var, ids: Vec<usize> },
    /// Flat gather: out[i] = x[ids[i]].
    GatherElems { x: Var, ids: Vec<usize> },
    Dropout { x: Var, mask: Vec<bool>, scale: F },
    Reshape { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, mean: Vec<F>, inv_std: Vec<F> },
    /// out[p, t] = Σ_a Σ_b gs[i_p, a] · u[a, t, b] · ge[j_p, b] for pairs (i_p, j_p);
    /// u is a k×s×k tensor stored flat.
    BilinearPairs { gs: Var, ge: Var, u: Var, pairs: Vec<(usize, usize)>, s: usize },
}

struct Node<F: Scalar> {
    data: Vec<F>,
    shape: Vec<usize>,
    op: Op<F>,
    grad: Option<Vec<F>>,
}

pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
    backward_done: bool,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

// ── raw matrix kernels (used by forward and backward) ────────────────

/// a: m×k, b: k×n -> m×n.
fn mm<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::ZERO; m * n];
    for i in 0..m {
        for t in 0..k {
            let av = a[i * k + t];
            if av == F::ZERO {
                continue;
            }
            let brow = &b[t * n..(t + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// a: m×k, b: n×k -> a · bᵀ: m×n.
fn mm_nt<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::ZERO; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = F::ZERO;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// a: m×k, b: m×n -> aᵀ · b: k×n.
fn mm_tn<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::ZERO; k * n];
    for t in 0..m {
        let arow = &a[t * k..(t + 1) * k];
        let brow = &b[t * n..(t + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == F::ZERO {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn stable_softmax<F: Scalar>(row: &[F]) -> Vec<F> {
    let mut mx = row[0];
    for &v in row {
        mx = mx.maxs(v);
    }
    let mut out: Vec<F> = row.iter().map(|&v| (v - mx).exp()).collect();
    let total: F = out.iter().copied().sum();
    out.iter_mut().for_each(|v| *v /= total);
    out
}

fn gelu_val<F: Scalar>(x: F) -> F {
    // tanh approximation
    let c = F::from_f64(0.7978845608028654); // sqrt(2/pi)
    let a = F::from_f64(0.044715);
    let half = F::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (F::ONE + u.tanh())
}

fn gelu_grad<F: Scalar>(x: F) -> F {
    let c = F::from_f64(0.7978845608028654);
    let a = F::from_f64(0.044715);
    let half = F::from_f64(0.5);
    let three = F::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = F::ONE - t * t;
    half * (F::ONE + t) + half * x * sech2 * c * (F::ONE + three * a * x * x)
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, data: Vec<F>, shape: Vec<usize>, op: Op<F>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        // Forward ops must not manufacture NaN/Inf from finite inputs.
        debug_assert!(
            matches!(op, Op::Leaf) || data.iter().all(|v| v.is_finite()),
            "non-finite value produced by a forward op (shape {:?})",
            shape
        );
        self.nodes.push(Node {
            data,
            shape,
            op,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    // ── leaves ────────────────────────────────────────────────────────

    pub fn leaf(&mut self, data: Vec<F>, shape: Vec<usize>) -> Var {
        self.push(data, shape, Op::Leaf)
    }

    pub fn leaf_tensor(&mut self, t: &Tensor<F>) -> Var {
        self.leaf(t.data.clone(), t.shape.clone())
    }

    pub fn scalar(&mut self, x: F) -> Var {
        self.leaf(vec![x], vec![])
    }

    /// Identity forward, no gradient flows back through it.
    pub fn detach(&mut self, x: Var) -> Var {
        let data = self.nodes[x.0].data.clone();
        let shape = self.nodes[x.0].shape.clone();
        self.leaf(data, shape)
    }

    // ── accessors ─────────────────────────────────────────────────────

    pub fn value(&self, v: Var) -> &[F] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn dims2(&self, v: Var, what: &str) -> (usize, usize) {
        let s = &self.nodes[v.0].shape;
        assert!(s.len() == 2, "{what} expects a matrix, got shape {s:?}");
        (s[0], s[1])
    }

    fn dim1(&self, v: Var, what: &str) -> usize {
        let s = &self.nodes[v.0].shape;
        assert!(s.len() == 1, "{what} expects a vector, got shape {s:?}");
        s[0]
    }

    // ── ops ───────────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.dims2(a, "matmul lhs");
        let (k2, n) = self.dims2(b, "matmul rhs");
        assert_eq!(
            k, k2,
            "matmul shape mismatch: lhs {:?} rhs {:?}",
            self.shape(a),
            self.shape(b)
        );
        let data = mm(self.value(a), self.value(b), m, k, n);
        self.push(data, vec![m, n], Op::Matmul { a, b })
    }

    /// a · bᵀ with a: m×k, b: n×k.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.dims2(a, "matmul_nt lhs");
        let (n, k2) = self.dims2(b, "matmul_nt rhs");
        assert_eq!(
            k, k2,
            "matmul_nt shape mismatch: lhs {:?} rhs {:?}",
            self.shape(a),
            self.shape(b)
        );
        let data = mm_nt(self.value(a), self.value(b), m, k, n);
        self.push(data, vec![m, n], Op::MatmulNt { a, b })
    }

    fn binary_elementwise(&mut self, a: Var, b: Var, what: &str) -> (Vec<usize>, usize) {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b);
        assert_eq!(sa, sb, "{what} shape mismatch: lhs {sa:?} rhs {sb:?}");
        let n = self.nodes[a.0].data.len();
        (sa, n)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (shape, n) = self.binary_elementwise(a, b, "add");
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            data.push(self.nodes[a.0].data[i] + self.nodes[b.0].data[i]);
        }
        self.push(data, shape, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (shape, n) = self.binary_elementwise(a, b, "sub");
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            data.push(self.nodes[a.0].data[i] - self.nodes[b.0].data[i]);
        }
        self.push(data, shape, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (shape, n) = self.binary_elementwise(a, b, "mul");
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            data.push(self.nodes[a.0].data[i] * self.nodes[b.0].data[i]);
        }
        self.push(data, shape, Op::Mul { a, b })
    }

    /// mat: m×c plus row vector of width c, broadcast over rows.
    pub fn add_row(&mut self, mat: Var, row: Var) -> Var {
        let (m, c) = self.dims2(mat, "add_row lhs");
        let w = self.dim1(row, "add_row rhs");
        assert_eq!(
            c, w,
            "add_row shape mismatch: mat {:?} row {:?}",
            self.shape(mat),
            self.shape(row)
        );
        let mut data = self.nodes[mat.0].data.clone();
        for r in 0..m {
            for j in 0..c {
                data[r * c + j] += self.nodes[row.0].data[j];
            }
        }
        self.push(data, vec![m, c], Op::AddRow { mat, row })
    }

    /// Vector of width c tiled into an n×c matrix.
    pub fn repeat_row(&mut self, row: Var, n: usize) -> Var {
        let c = self.dim1(row, "repeat_row");
        let mut data = Vec::with_capacity(n * c);
        for _ in 0..n {
            data.extend_from_slice(&self.nodes[row.0].data);
        }
        self.push(data, vec![n, c], Op::RepeatRow { row, n })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let cf = F::from_f64(c);
        let data = self.nodes[x.0].data.iter().map(|&v| v * cf).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(data, shape, Op::Scale { x, c: cf })
    }

    /// out = c - x.
    pub fn sub_from_const(&mut self, c: f64, x: Var) -> Var {
        let cf = F::from_f64(c);
        let data = self.nodes[x.0].data.iter().map(|&v| cf - v).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(data, shape, Op::SubFromConst { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let data = self
            .nodes[x.0]
            .data
            .iter()
            .map(|&v| {
                if v >= F::ZERO {
                    F::ONE / (F::ONE + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (F::ONE + e)
                }
            })
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(data, shape, Op::Sigmoid { x })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let data = self.nodes[x.0].data.iter().map(|&v| v.tanh()).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(data, shape, Op::Tanh { x })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data = self
            .nodes[x.0]
            .data
            .iter()
            .map(|&v| v.maxs(F::ZERO))
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(data, shape, Op::Relu { x })
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let data = self.nodes[x.0].data.iter().map(|&v| gelu_val(v)).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(data, shape, Op::Gelu { x })
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let data = self.nodes[x.0].data.iter().map(|&v| v.exp()).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(data, shape, Op::Exp { x })
    }

    /// ln(max(x, 1e-12)); the clamp keeps log(0) out of the loss paths.
    pub fn log(&mut self, x: Var) -> Var {
        let eps = F::from_f64(LOG_EPS);
        let data = self
            .nodes[x.0]
            .data
            .iter()
            .map(|&v| v.maxs(eps).ln())
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(data, shape, Op::Log { x })
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        assert!(lo <= hi, "clamp bounds inverted: [{lo}, {hi}]");
        let (lof, hif) = (F::from_f64(lo), F::from_f64(hi));
        let data = self
            .nodes[x.0]
            .data
            .iter()
            .map(|&v| v.maxs(lof).mins(hif))
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(data, shape, Op::Clamp { x, lo: lof, hi: hif })
    }

    /// Max-subtracted softmax along the last axis. A vector is one row.
    pub fn softmax(&mut self, x: Var) -> Var {
        let shape = self.nodes[x.0].shape.clone();
        let (rows, cols) = match shape.len() {
            1 => (1, shape[0]),
            2 => (shape[0], shape[1]),
            _ => panic!("softmax expects a vector or matrix, got shape {shape:?}"),
        };
        assert!(cols >= 1, "softmax over an empty axis, shape {shape:?}");
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            data.extend(stable_softmax(&self.nodes[x.0].data[r * cols..(r + 1) * cols]));
        }
        self.push(data, shape, Op::SoftmaxRows { x })
    }

    /// Stable log(Σ exp(x_i)) of a vector, as a scalar.
    pub fn logsumexp(&mut self, x: Var) -> Var {
        let n = self.dim1(x, "logsumexp");
        assert!(n >= 1, "logsumexp of an empty vector");
        let row = &self.nodes[x.0].data;
        let mut mx = row[0];
        for &v in row {
            mx = mx.maxs(v);
        }
        let total: F = row.iter().map(|&v| (v - mx).exp()).sum();
        let out = mx + total.ln();
        self.push(vec![out], vec![], Op::LogSumExp { x })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total: F = self.nodes[x.0].data.iter().copied().sum();
        self.push(vec![total], vec![], Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].data.len();
        assert!(n > 0, "mean of an empty tensor");
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Column sums of a matrix: m×c -> c.
    pub fn sum_axis0(&mut self, x: Var) -> Var {
        let (m, c) = self.dims2(x, "sum_axis0");
        let mut data = vec![F::ZERO; c];
        for r in 0..m {
            for j in 0..c {
                data[j] += self.nodes[x.0].data[r * c + j];
            }
        }
        self.push(data, vec![c], Op::SumAxis0 { x })
    }

    pub fn concat_vec(&mut self, a: Var, b: Var) -> Var {
        let la = self.dim1(a, "concat lhs");
        let lb = self.dim1(b, "concat rhs");
        let mut data = Vec::with_capacity(la + lb);
        data.extend_from_slice(&self.nodes[a.0].data);
        data.extend_from_slice(&self.nodes[b.0].data);
        self.push(data, vec![la + lb], Op::ConcatVec { a, b })
    }

    /// Concatenate two matrices with equal row counts along the columns.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (ma, ca) = self.dims2(a, "concat_cols lhs");
        let (mb, cb) = self.dims2(b, "concat_cols rhs");
        assert_eq!(
            ma, mb,
            "concat_cols shape mismatch: lhs {:?} rhs {:?}",
            self.shape(a),
            self.shape(b)
        );
        let mut data = Vec::with_capacity(ma * (ca + cb));
        for r in 0..ma {
            data.extend_from_slice(&self.nodes[a.0].data[r * ca..(r + 1) * ca]);
            data.extend_from_slice(&self.nodes[b.0].data[r * cb..(r + 1) * cb]);
        }
        self.push(data, vec![ma, ca + cb], Op::ConcatCols { a, b })
    }

    /// Extract row i of a matrix as a vector.
    pub fn row(&mut self, mat: Var, i: usize) -> Var {
        let (m, c) = self.dims2(mat, "row");
        assert!(i < m, "row index {i} out of bounds for {m} rows");
        let data = self.nodes[mat.0].data[i * c..(i + 1) * c].to_vec();
        self.push(data, vec![c], Op::Row { mat, i })
    }

    pub fn slice_rows(&mut self, mat: Var, r0: usize, r1: usize) -> Var {
        let (m, c) = self.dims2(mat, "slice_rows");
        assert!(
            r0 < r1 && r1 <= m,
            "slice_rows range {r0}..{r1} out of bounds for {m} rows"
        );
        let data = self.nodes[mat.0].data[r0 * c..r1 * c].to_vec();
        self.push(data, vec![r1 - r0, c], Op::SliceRows { mat, r0, r1 })
    }

    pub fn slice_cols(&mut self, mat: Var, c0: usize, c1: usize) -> Var {
        let (m, c) = self.dims2(mat, "slice_cols");
        assert!(
            c0 < c1 && c1 <= c,
            "slice_cols range {c0}..{c1} out of bounds for {c} cols"
        );
        let w = c1 - c0;
        let mut data = Vec::with_capacity(m * w);
        for r in 0..m {
            data.extend_from_slice(&self.nodes[mat.0].data[r * c + c0..r * c + c1]);
        }
        self.push(data, vec![m, w], Op::SliceCols { mat, c0, c1 })
    }

    /// Stack equal-width vectors into a matrix, one per row.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "stack_rows of zero vectors");
        let c = self.dim1(parts[0], "stack_rows");
        let mut data = Vec::with_capacity(parts.len() * c);
        for &p in parts {
            let w = self.dim1(p, "stack_rows");
            assert_eq!(
                c,
                w,
                "stack_rows width mismatch: first {:?} vs {:?}",
                self.shape(parts[0]),
                self.shape(p)
            );
            data.extend_from_slice(&self.nodes[p.0].data);
        }
        self.push(
            data,
            vec![parts.len(), c],
            Op::StackRows {
                parts: parts.to_vec(),
            },
        )
    }

    /// Gather rows of a matrix by index (rows may repeat).
    pub fn gather_rows(&mut self, mat: Var, ids: &[usize]) -> Var {
        let (m, c) = self.dims2(mat, "gather_rows");
        let mut data = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            assert!(i < m, "gather_rows index {i} out of bounds for {m} rows");
            data.extend_from_slice(&self.nodes[mat.0].data[i * c..(i + 1) * c]);
        }
        self.push(
            data,
            vec![ids.len(), c],
            Op::GatherRows {
                mat,
                ids: ids.to_vec(),
            },
        )
    }

    /// out[r] = mat[r, ids[r]]; one element picked per row.
    pub fn select_per_row(&mut self, mat: Var, ids: &[usize]) -> Var {
        let (m, c) = self.dims2(mat, "select_per_row");
        assert_eq!(m, ids.len(), "select_per_row needs one index per row");
        let mut data = Vec::with_capacity(m);
        for (r, &j) in ids.iter().enumerate() {
            assert!(j < c, "select_per_row index {j} out of bounds for {c} cols");
            data.push(self.nodes[mat.0].data[r * c + j]);
        }
        self.push(
            data,
            vec![m],
            Op::SelectPerRow {
                mat,
                ids: ids.to_vec(),
            },
        )
    }

    /// Flat gather over any tensor: out[i] = x[ids[i]].
    pub fn gather_elems(&mut self, x: Var, ids: &[usize]) -> Var {
        let n = self.nodes[x.0].data.len();
        let mut data = Vec::with_capacity(ids.len());
        for &i in ids {
            assert!(i < n, "gather_elems index {i} out of bounds for {n} elements");
            data.push(self.nodes[x.0].data[i]);
        }
        self.push(
            data,
            vec![ids.len()],
            Op::GatherElems {
                x,
                ids: ids.to_vec(),
            },
        )
    }

    /// Inverted dropout: kept entries scaled by 1/(1-rate). rate 0 is the
    /// identity (no node recorded, no randoms drawn).
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut RngState) -> Var {
        assert!(
            (0.0..1.0).contains(&rate),
            "dropout rate {rate} outside [0, 1)"
        );
        if rate == 0.0 {
            return x;
        }
        let n = self.nodes[x.0].data.len();
        let mask: Vec<bool> = (0..n).map(|_| rng.next_f64() >= rate).collect();
        let scale = F::from_f64(1.0 / (1.0 - rate));
        let data = self
            .nodes[x.0]
            .data
            .iter()
            .zip(&mask)
            .map(|(&v, &keep)| if keep { v * scale } else { F::ZERO })
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(data, shape, Op::Dropout { x, mask, scale })
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        let n = self.nodes[x.0].data.len();
        assert_eq!(
            shape.iter().product::<usize>(),
            n,
            "reshape to {:?} incompatible with {} elements (from {:?})",
            shape,
            n,
            self.shape(x)
        );
        let data = self.nodes[x.0].data.clone();
        self.push(data, shape, Op::Reshape { x })
    }

    /// Per-row layer normalization with learned gain/bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (m, c) = self.dims2(x, "layer_norm");
        let wg = self.dim1(gamma, "layer_norm gamma");
        let wb = self.dim1(beta, "layer_norm beta");
        assert!(
            wg == c && wb == c,
            "layer_norm shape mismatch: x {:?} gamma {:?} beta {:?}",
            self.shape(x),
            self.shape(gamma),
            self.shape(beta)
        );
        let epsf = F::from_f64(eps);
        let inv_c = F::from_f64(1.0 / c as f64);
        let mut data = vec![F::ZERO; m * c];
        let mut means = Vec::with_capacity(m);
        let mut inv_stds = Vec::with_capacity(m);
        for r in 0..m {
            let xrow = &self.nodes[x.0].data[r * c..(r + 1) * c];
            let mean: F = xrow.iter().copied().sum::<F>() * inv_c;
            let var: F = xrow
                .iter()
                .map(|&v| (v - mean) * (v - mean))
                .sum::<F>()
                * inv_c;
            let inv_std = F::ONE / (var + epsf).sqrt();
            for j in 0..c {
                let xhat = (xrow[j] - mean) * inv_std;
                data[r * c + j] = self.nodes[gamma.0].data[j] * xhat + self.nodes[beta.0].data[j];
            }
            means.push(mean);
            inv_stds.push(inv_std);
        }
        self.push(
            data,
            vec![m, c],
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean: means,
                inv_std: inv_stds,
            },
        )
    }

    /// Bilinear pair scores: for each (i, j) pair, out[p, t] = gs_iᵀ · U_t · ge_j
    /// with U a k×s×k tensor stored flat as [a, t, b].
    pub fn bilinear_pairs(&mut self, gs: Var, ge: Var, u: Var, s: usize, pairs: &[(usize, usize)]) -> Var {
        let (n1, k1) = self.dims2(gs, "bilinear_pairs start");
        let (n2, k2) = self.dims2(ge, "bilinear_pairs end");
        assert_eq!(
            k1, k2,
            "bilinear_pairs width mismatch: start {:?} end {:?}",
            self.shape(gs),
            self.shape(ge)
        );
        let k = k1;
        let ushape = self.shape(u).to_vec();
        assert_eq!(
            ushape,
            vec![k, s, k],
            "bilinear_pairs U shape {ushape:?} does not match k×s×k = [{k}, {s}, {k}]"
        );
        for &(i, j) in pairs {
            assert!(
                i < n1 && j < n2,
                "bilinear pair ({i}, {j}) out of bounds for {n1}×{n2} rows"
            );
        }
        // Per distinct start row i, precompute m_i[t, b] = Σ_a gs[i, a] · u[a, t, b].
        let mut start_ctx: Vec<Option<Vec<F>>> = vec![None; n1];
        let udata = &self.nodes[u.0].data;
        let gsd = &self.nodes[gs.0].data;
        let ged = &self.nodes[ge.0].data;
        let mut data = vec![F::ZERO; pairs.len() * s];
        for (p, &(i, j)) in pairs.iter().enumerate() {
            if start_ctx[i].is_none() {
                start_ctx[i] = Some(mm(&gsd[i * k..(i + 1) * k], udata, 1, k, s * k));
            }
            let mi = start_ctx[i].as_ref().unwrap();
            let gej = &ged[j * k..(j + 1) * k];
            for t in 0..s {
                let mrow = &mi[t * k..(t + 1) * k];
                let mut acc = F::ZERO;
                for (&mv, &gv) in mrow.iter().zip(gej) {
                    acc += mv * gv;
                }
                data[p * s + t] = acc;
            }
        }
        self.push(
            data,
            vec![pairs.len(), s],
            Op::BilinearPairs {
                gs,
                ge,
                u,
                pairs: pairs.to_vec(),
                s,
            },
        )
    }

    // ── backward ──────────────────────────────────────────────────────

    fn accumulate(&mut self, v: Var, contribution: &[F]) {
        let node = &mut self.nodes[v.0];
        match &mut node.grad {
            Some(g) => {
                debug_assert_eq!(g.len(), contribution.len());
                for (dst, src) in g.iter_mut().zip(contribution) {
                    *dst += *src;
                }
            }
            None => node.grad = Some(contribution.to_vec()),
        }
    }

    /// Reverse sweep from a scalar loss. Every node reachable from `loss`
    /// ends up with dLoss/dNode in its grad buffer.
    pub fn backward(&mut self, loss: Var) {
        assert!(
            self.nodes[loss.0].data.len() == 1,
            "backward requires a scalar loss, got shape {:?}",
            self.shape(loss)
        );
        assert!(!self.backward_done, "backward already ran on this tape");
        self.backward_done = true;
        self.nodes[loss.0].grad = Some(vec![F::ONE]);

        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = self.nodes[idx].grad.clone() else {
                continue;
            };
            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::Matmul { a, b } => {
                    let (a, b) = (*a, *b);
                    let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    let n = self.nodes[b.0].shape[1];
                    let da = mm_nt(&g, &self.nodes[b.0].data, m, n, k);
                    let db = mm_tn(&self.nodes[a.0].data, &g, m, k, n);
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                Op::MatmulNt { a, b } => {
                    let (a, b) = (*a, *b);
                    let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    let n = self.nodes[b.0].shape[0];
                    let da = mm(&g, &self.nodes[b.0].data, m, n, k);
                    let db = mm_tn(&g, &self.nodes[a.0].data, m, n, k);
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    self.accumulate(a, &g);
                    self.accumulate(b, &g);
                }
                Op::Sub { a, b } => {
                    let (a, b) = (*a, *b);
                    self.accumulate(a, &g);
                    let neg: Vec<F> = g.iter().map(|&v| -v).collect();
                    self.accumulate(b, &neg);
                }
                Op::Mul { a, b } => {
                    let (a, b) = (*a, *b);
                    let da: Vec<F> = g
                        .iter()
                        .zip(&self.nodes[b.0].data)
                        .map(|(&gv, &bv)| gv * bv)
                        .collect();
                    let db: Vec<F> = g
                        .iter()
                        .zip(&self.nodes[a.0].data)
                        .map(|(&gv, &av)| gv * av)
                        .collect();
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                Op::AddRow { mat, row } => {
                    let (mat, row) = (*mat, *row);
                    let c = self.nodes[row.0].data.len();
                    let m = g.len() / c;
                    let mut drow = vec![F::ZERO; c];
                    for r in 0..m {
                        for j in 0..c {
                            drow[j] += g[r * c + j];
                        }
                    }
                    self.accumulate(mat, &g);
                    self.accumulate(row, &drow);
                }
                Op::RepeatRow { row, n } => {
                    let (row, n) = (*row, *n);
                    let c = self.nodes[row.0].data.len();
                    let mut drow = vec![F::ZERO; c];
                    for r in 0..n {
                        for j in 0..c {
                            drow[j] += g[r * c + j];
                        }
                    }
                    self.accumulate(row, &drow);
                }
                Op::Scale { x, c } => {
                    let (x, c) = (*x, *c);
                    let dx: Vec<F> = g.iter().map(|&v| v * c).collect();
                    self.accumulate(x, &dx);
                }
                Op::SubFromConst { x } => {
                    let x = *x;
                    let dx: Vec<F> = g.iter().map(|&v| -v).collect();
                    self.accumulate(x, &dx);
                }
                Op::Sigmoid { x } => {
                    let x = *x;
                    let y = &self.nodes[idx].data;
                    let dx: Vec<F> = g
                        .iter()
                        .zip(y)
                        .map(|(&gv, &yv)| gv * yv * (F::ONE - yv))
                        .collect();
                    self.accumulate(x, &dx);
                }
                Op::Tanh { x } => {
                    let x = *x;
                    let y = &self.nodes[idx].data;
                    let dx: Vec<F> = g
                        .iter()
                        .zip(y)
                        .map(|(&gv, &yv)| gv * (F::ONE - yv * yv))
                        .collect();
                    self.accumulate(x, &dx);
                }
                Op::Relu { x } => {
                    let x = *x;
                    let dx: Vec<F> = g
                        .iter()
                        .zip(&self.nodes[x.0].data)
                        .map(|(&gv, &xv)| if xv > F::ZERO { gv } else { F::ZERO })
                        .collect();
                    self.accumulate(x, &dx);
                }
                Op::Gelu { x } => {
                    let x = *x;
                    let dx: Vec<F> = g
                        .iter()
                        .zip(&self.nodes[x.0].data)
                        .map(|(&gv, &xv)| gv * gelu_grad(xv))
                        .collect();
                    self.accumulate(x, &dx);
                }
                Op::Exp { x } => {
                    let x = *x;
                    let y = &self.nodes[idx].data;
                    let dx: Vec<F> = g.iter().zip(y).map(|(&gv, &yv)| gv * yv).collect();
                    self.accumulate(x, &dx);
                }
                Op::Log { x } => {
                    let x = *x;
                    let eps = F::from_f64(LOG_EPS);
                    let dx: Vec<F> = g
                        .iter()
                        .zip(&self.nodes[x.0].data)
                        .map(|(&gv, &xv)| if xv > eps { gv / xv } else { F::ZERO })
                        .collect();
                    self.accumulate(x, &dx);
                }
                Op::Clamp { x, lo, hi } => {
                    let (x, lo, hi) = (*x, *lo, *hi);
                    let dx: Vec<F> = g
                        .iter()
                        .zip(&self.nodes[x.0].data)
                        .map(|(&gv, &xv)| if xv >= lo && xv <= hi { gv } else { F::ZERO })
                        .collect();
                    self.accumulate(x, &dx);
                }
                Op::SoftmaxRows { x } => {
                    let x = *x;
                    let shape = &self.nodes[idx].shape;
                    let (rows, cols) = if shape.len() == 1 {
                        (1, shape[0])
                    } else {
                        (shape[0], shape[1])
                    };
                    let y = &self.nodes[idx].data;
                    let mut dx = vec![F::ZERO; rows * cols];
                    for r in 0..rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: F = yr.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                        for j in 0..cols {
                            dx[r * cols + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    self.accumulate(x, &dx);
                }
                Op::LogSumExp { x } => {
                    let x = *x;
                    let probs = stable_softmax(&self.nodes[x.0].data);
                    let dx: Vec<F> = probs.iter().map(|&p| p * g[0]).collect();
                    self.accumulate(x, &dx);
                }
                Op::Sum { x } => {
                    let x = *x;
                    let dx = vec![g[0]; self.nodes[x.0].data.len()];
                    self.accumulate(x, &dx);
                }
                Op::SumAxis0 { x } => {
                    let x = *x;
                    let (m, c) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                    let mut dx = vec![F::ZERO; m * c];
                    for r in 0..m {
                        dx[r * c..(r + 1) * c].copy_from_slice(&g);
                    }
                    self.accumulate(x, &dx);
                }
                Op::ConcatVec { a, b } => {
                    let (a, b) = (*a, *b);
                    let la = self.nodes[a.0].data.len();
                    self.accumulate(a, &g[..la]);
                    let gb = g[la..].to_vec();
                    self.accumulate(b, &gb);
                }
                Op::ConcatCols { a, b } => {
                    let (a, b) = (*a, *b);
                    let (m, ca) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    let cb = self.nodes[b.0].shape[1];
                    let mut da = vec![F::ZERO; m * ca];
                    let mut db = vec![F::ZERO; m * cb];
                    for r in 0..m {
                        let grow = &g[r * (ca + cb)..(r + 1) * (ca + cb)];
                        da[r * ca..(r + 1) * ca].copy_from_slice(&grow[..ca]);
                        db[r * cb..(r + 1) * cb].copy_from_slice(&grow[ca..]);
                    }
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                Op::Row { mat, i } => {
                    let (mat, i) = (*mat, *i);
                    let c = self.nodes[mat.0].shape[1];
                    let m = self.nodes[mat.0].shape[0];
                    let mut dmat = vec![F::ZERO; m * c];
                    dmat[i * c..(i + 1) * c].copy_from_slice(&g);
                    self.accumulate(mat, &dmat);
                }
                Op::SliceRows { mat, r0, r1 } => {
                    let (mat, r0, r1) = (*mat, *r0, *r1);
                    let (m, c) = (self.nodes[mat.0].shape[0], self.nodes[mat.0].shape[1]);
                    let mut dmat = vec![F::ZERO; m * c];
                    dmat[r0 * c..r1 * c].copy_from_slice(&g);
                    self.accumulate(mat, &dmat);
                }
                Op::SliceCols { mat, c0, c1 } => {
                    let (mat, c0, c1) = (*mat, *c0, *c1);
                    let (m, c) = (self.nodes[mat.0].shape[0], self.nodes[mat.0].shape[1]);
                    let w = c1 - c0;
                    let mut dmat = vec![F::ZERO; m * c];
                    for r in 0..m {
                        dmat[r * c + c0..r * c + c1].copy_from_slice(&g[r * w..(r + 1) * w]);
                    }
                    self.accumulate(mat, &dmat);
                }
                Op::StackRows { parts } => {
                    let parts = parts.clone();
                    let c = self.nodes[parts[0].0].data.len();
                    for (r, p) in parts.iter().enumerate() {
                        self.accumulate(*p, &g[r * c..(r + 1) * c]);
                    }
                }
                Op::GatherRows { mat, ids } => {
                    let mat = *mat;
                    let ids = ids.clone();
                    let (m, c) = (self.nodes[mat.0].shape[0], self.nodes[mat.0].shape[1]);
                    let mut dmat = vec![F::ZERO; m * c];
                    for (r, &i) in ids.iter().enumerate() {
                        for j in 0..c {
                            dmat[i * c + j] += g[r * c + j];
                        }
                    }
                    self.accumulate(mat, &dmat);
                }
                Op::SelectPerRow { mat, ids } => {
                    let mat = *mat;
                    let ids = ids.clone();
                    let (m, c) = (self.nodes[mat.0].shape[0], self.nodes[mat.0].shape[1]);
                    let mut dmat = vec![F::ZERO; m * c];
                    for (r, &j) in ids.iter().enumerate() {
                        dmat[r * c + j] += g[r];
                    }
                    self.accumulate(mat, &dmat);
                }
                Op::GatherElems { x, ids } => {
                    let x = *x;
                    let ids = ids.clone();
                    let mut dx = vec![F::ZERO; self.nodes[x.0].data.len()];
                    for (r, &i) in ids.iter().enumerate() {
                        dx[i] += g[r];
                    }
                    self.accumulate(x, &dx);
                }
                Op::Dropout { x, mask, scale } => {
                    let (x, scale) = (*x, *scale);
                    let dx: Vec<F> = g
                        .iter()
                        .zip(mask)
                        .map(|(&gv, &keep)| if keep { gv * scale } else { F::ZERO })
                        .collect();
                    self.accumulate(x, &dx);
                }
                Op::Reshape { x } => {
                    let x = *x;
                    self.accumulate(x, &g);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    mean,
                    inv_std,
                } => {
                    let (x, gamma, beta) = (*x, *gamma, *beta);
                    let mean = mean.clone();
                    let inv_std = inv_std.clone();
                    let (m, c) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                    let inv_c = F::from_f64(1.0 / c as f64);
                    let mut dx = vec![F::ZERO; m * c];
                    let mut dgamma = vec![F::ZERO; c];
                    let mut dbeta = vec![F::ZERO; c];
                    for r in 0..m {
                        let xrow = &self.nodes[x.0].data[r * c..(r + 1) * c];
                        let grow = &g[r * c..(r + 1) * c];
                        let gam = &self.nodes[gamma.0].data;
                        let mut mean_dxhat = F::ZERO;
                        let mut mean_dxhat_xhat = F::ZERO;
                        let mut xhat = vec![F::ZERO; c];
                        let mut dxhat = vec![F::ZERO; c];
                        for j in 0..c {
                            xhat[j] = (xrow[j] - mean[r]) * inv_std[r];
                            dxhat[j] = grow[j] * gam[j];
                            mean_dxhat += dxhat[j];
                            mean_dxhat_xhat += dxhat[j] * xhat[j];
                            dgamma[j] += grow[j] * xhat[j];
                            dbeta[j] += grow[j];
                        }
                        mean_dxhat *= inv_c;
                        mean_dxhat_xhat *= inv_c;
                        for j in 0..c {
                            dx[r * c + j] =
                                inv_std[r] * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                        }
                    }
                    self.accumulate(x, &dx);
                    self.accumulate(gamma, &dgamma);
                    self.accumulate(beta, &dbeta);
                }
                Op::BilinearPairs { gs, ge, u, pairs, s } => {
                    let (gs, ge, u, s) = (*gs, *ge, *u, *s);
                    let pairs = pairs.clone();
                    let k = self.nodes[gs.0].shape[1];
                    let n1 = self.nodes[gs.0].shape[0];
                    let n2 = self.nodes[ge.0].shape[0];
                    let udata = &self.nodes[u.0].data;
                    let gsd = &self.nodes[gs.0].data;
                    let ged = &self.nodes[ge.0].data;

                    // m_i[t, b] = Σ_a gs[i, a] u[a, t, b]; r_j[a, t] = Σ_b u[a, t, b] ge[j, b]
                    let mut start_ctx: Vec<Option<Vec<F>>> = vec![None; n1];
                    let mut end_ctx: Vec<Option<Vec<F>>> = vec![None; n2];
                    let mut dgs = vec![F::ZERO; n1 * k];
                    let mut dge = vec![F::ZERO; n2 * k];
                    let mut du = vec![F::ZERO; k * s * k];
                    for (p, &(i, j)) in pairs.iter().enumerate() {
                        let gp = &g[p * s..(p + 1) * s];
                        if start_ctx[i].is_none() {
                            start_ctx[i] =
                                Some(mm(&gsd[i * k..(i + 1) * k], udata, 1, k, s * k));
                        }
                        if end_ctx[j].is_none() {
                            // r_j stored as [a, t]: mm_nt of u rows against ge_j per (a, t)
                            let mut rj = vec![F::ZERO; k * s];
                            for a in 0..k {
                                for t in 0..s {
                                    let urow = &udata[a * s * k + t * k..a * s * k + (t + 1) * k];
                                    let gej = &ged[j * k..(j + 1) * k];
                                    let mut acc = F::ZERO;
                                    for (&uv, &gv) in urow.iter().zip(gej) {
                                        acc += uv * gv;
                                    }
                                    rj[a * s + t] = acc;
                                }
                            }
                            end_ctx[j] = Some(rj);
                        }
                        let mi = start_ctx[i].as_ref().unwrap();
                        let rj = end_ctx[j].as_ref().unwrap();
                        // dgs[i, a] += Σ_t gp[t] r_j[a, t]
                        for a in 0..k {
                            let mut acc = F::ZERO;
                            for t in 0..s {
                                acc += gp[t] * rj[a * s + t];
                            }
                            dgs[i * k + a] += acc;
                        }
                        // dge[j, b] += Σ_t gp[t] m_i[t, b]
                        for t in 0..s {
                            let gpt = gp[t];
                            if gpt == F::ZERO {
                                continue;
                            }
                            let mrow = &mi[t * k..(t + 1) * k];
                            for b in 0..k {
                                dge[j * k + b] += gpt * mrow[b];
                            }
                        }
                        // du[a, t, b] += gs[i, a] gp[t] ge[j, b]
                        let gsi = &gsd[i * k..(i + 1) * k];
                        let gej = &ged[j * k..(j + 1) * k];
                        for a in 0..k {
                            let ga = gsi[a];
                            if ga == F::ZERO {
                                continue;
                            }
                            for t in 0..s {
                                let coeff = ga * gp[t];
                                if coeff == F::ZERO {
                                    continue;
                                }
                                let urow = &mut du[a * s * k + t * k..a * s * k + (t + 1) * k];
                                for (o, &gv) in urow.iter_mut().zip(gej) {
                                    *o += coeff * gv;
                                }
                            }
                        }
                    }
                    self.accumulate(gs, &dgs);
                    self.accumulate(ge, &dge);
                    self.accumulate(u, &du);
                }
            }
        }
    }

    // ── composites ────────────────────────────────────────────────────

    /// x: m×in, w: out×in, b: out -> m×out.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul_nt(x, w);
        self.add_row(y, b)
    }

    /// Vector-input linear layer: x: in, w: out×in, b: out -> out.
    pub fn linear_vec(&mut self, x: Var, w: Var, b: Var) -> Var {
        let n = self.dim1(x, "linear_vec input");
        let xr = self.reshape(x, vec![1, n]);
        let y = self.linear(xr, w, b);
        let out = self.shape(y)[1];
        self.reshape(y, vec![out])
    }
}
