use super::kernels::{gemm, gemm_nt, gemm_tn, transpose2};
use super::tensor::numel;
use super::{Scalar, Tensor, TensorError};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_rhs: bool,
    },
    Transpose {
        a: Var,
        batch: usize,
        rows: usize,
        cols: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddRow {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        s: T,
    },
    ScaleBy {
        a: Var,
        s: Var,
    },
    Exp {
        a: Var,
    },
    Log {
        a: Var,
    },
    Abs {
        a: Var,
    },
    Concat {
        parts: Vec<(Var, usize)>,
        rows: usize,
    },
    MaskedMean {
        a: Var,
        len: usize,
        inner: usize,
        weights: Vec<T>,
    },
    Sum {
        a: Var,
    },
    LayerNorm {
        a: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu {
        a: Var,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Softmax {
        a: Var,
    },
    SoftmaxCe {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    L2Normalize {
        a: Var,
        len: usize,
        inner: usize,
        norms: Vec<T>,
    },
    Reshape {
        a: Var,
    },
    Permute {
        a: Var,
        perm: Vec<usize>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], one entry per trainable leaf.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to a leaf, `None` for non-trainable nodes.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Define-by-run recording of differentiable operations.
///
/// Nodes are appended in execution order, so the node list is always a
/// topological order of the graph.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

const GELU_C: f64 = 0.044_715;
// sqrt(2 / pi)
const GELU_K: f64 = 0.797_884_560_802_865_4;

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Clears all recorded nodes so the tape can record a fresh forward pass.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn guard(&self) -> Result<(), TensorError> {
        if self.consumed {
            Err(TensorError::TapeConsumed)
        } else {
            Ok(())
        }
    }

    fn push(
        &mut self,
        opname: &'static str,
        shape: Vec<usize>,
        data: Vec<T>,
        op: Op<T>,
        inputs: &[Var],
    ) -> Result<Var, TensorError> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: opname });
        }
        let requires_grad = inputs.iter().any(|&v| self.rg(v));
        let value = Tensor::new(shape, data).unwrap_or_else(|e| panic!("{opname}: {e}"));
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records an input tensor. Gradients flow to it iff `requires_grad` is set.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let requires_grad = t.requires_grad;
        let mut value = t;
        value.grad = None;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a copy of a parameter, trainable or frozen.
    pub fn param(&mut self, t: &Tensor<T>, trainable: bool) -> Var {
        let mut value = Tensor::new(t.shape().to_vec(), t.data().to_vec())
            .expect("parameter tensors are well formed");
        value.requires_grad = trainable;
        self.leaf(value)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let mut t = t;
        t.requires_grad = false;
        self.leaf(t)
    }

    /// Matrix product: `[m×k]·[k×n]`, batched `[b×m×k]·[b×k×n]`, or
    /// `[b×m×k]·[k×n]` with a shared right operand.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.guard()?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, m, k, n, shared_rhs, out_shape) = match (sa.len(), sb.len()) {
            (2, 2) if sa[1] == sb[0] => (1, sa[0], sa[1], sb[1], false, vec![sa[0], sb[1]]),
            (3, 3) if sa[0] == sb[0] && sa[2] == sb[1] => {
                (sa[0], sa[1], sa[2], sb[2], false, vec![sa[0], sa[1], sb[2]])
            }
            (3, 2) if sa[2] == sb[0] => {
                (1, sa[0] * sa[1], sa[2], sb[1], true, vec![sa[0], sa[1], sb[1]])
            }
            _ => return Err(mismatch("matmul", &sa, &sb)),
        };
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (da, db) = (self.data(a), self.data(b));
            for bi in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &da[bi * m * k..(bi + 1) * m * k],
                    &db[bi * k * n..(bi + 1) * k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                );
            }
        }
        self.push(
            "matmul",
            out_shape,
            out,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_rhs,
            },
            &[a, b],
        )
    }

    /// Swaps the last two axes of a rank-2 or rank-3 tensor.
    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        self.guard()?;
        let s = self.shape(a).to_vec();
        let (batch, rows, cols) = match s.len() {
            2 => (1, s[0], s[1]),
            3 => (s[0], s[1], s[2]),
            r => {
                return Err(TensorError::BadAxis {
                    op: "transpose",
                    axis: 1,
                    rank: r,
                })
            }
        };
        let d = self.data(a);
        let mut out = Vec::with_capacity(d.len());
        for bi in 0..batch {
            out.extend(transpose2(rows, cols, &d[bi * rows * cols..(bi + 1) * rows * cols]));
        }
        let mut shape = s.clone();
        let r = shape.len();
        shape.swap(r - 1, r - 2);
        self.push(
            "transpose",
            shape,
            out,
            Op::Transpose {
                a,
                batch,
                rows,
                cols,
            },
            &[a],
        )
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var, TensorError> {
        self.guard()?;
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(name, self.shape(a), self.shape(b)));
        }
        let out = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(name, shape, out, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    /// Adds a bias vector to every row along the last axis.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.guard()?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sb.len() != 1 || sa.last() != Some(&sb[0]) {
            return Err(mismatch("add_row", &sa, &sb));
        }
        let w = sb[0];
        let bias = self.data(b);
        let out = self
            .data(a)
            .chunks(w)
            .flat_map(|row| row.iter().zip(bias).map(|(&x, &y)| x + y))
            .collect();
        self.push("add_row", sa, out, Op::AddRow { a, b }, &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var, TensorError> {
        self.guard()?;
        let out = self.data(a).iter().map(|&x| x * s).collect();
        let shape = self.shape(a).to_vec();
        self.push("scale", shape, out, Op::Scale { a, s }, &[a])
    }

    /// Multiplies by a single-element tensor that may itself be trainable.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var, TensorError> {
        self.guard()?;
        if self.value(s).numel() != 1 {
            return Err(mismatch("scale_by", self.shape(a), self.shape(s)));
        }
        let sv = self.data(s)[0];
        let out = self.data(a).iter().map(|&x| x * sv).collect();
        let shape = self.shape(a).to_vec();
        self.push("scale_by", shape, out, Op::ScaleBy { a, s }, &[a, s])
    }

    fn unary(
        &mut self,
        name: &'static str,
        a: Var,
        f: impl Fn(T) -> T,
        op: Op<T>,
    ) -> Result<Var, TensorError> {
        self.guard()?;
        let out = self.data(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(name, shape, out, op, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary("exp", a, |x| x.exp(), Op::Exp { a })
    }

    pub fn log(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary("log", a, |x| x.ln(), Op::Log { a })
    }

    pub fn abs(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary("abs", a, |x| x.abs(), Op::Abs { a })
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var, TensorError> {
        let (c, k) = (T::lit(GELU_C), T::lit(GELU_K));
        let half = T::lit(0.5);
        self.unary(
            "gelu",
            a,
            move |x| half * x * (T::one() + (k * (x + c * x * x * x)).tanh()),
            Op::Gelu { a },
        )
    }

    /// Concatenates along the last axis; leading dimensions must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        self.guard()?;
        let first = self.shape(*parts.first().ok_or(TensorError::EmptyBatch)?).to_vec();
        let lead = &first[..first.len() - 1];
        let rows: usize = lead.iter().product();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || &s[..s.len() - 1] != lead {
                return Err(mismatch("concat", &first, s));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let op = Op::Concat {
            parts: parts.iter().copied().zip(widths).collect(),
            rows,
        };
        self.push("concat", shape, out, op, parts)
    }

    /// Mean over `axis`. The optional mask covers the leading dimensions up to
    /// and including `axis` (shape `shape[..=axis]`); `false` entries are
    /// excluded from the mean.
    pub fn masked_mean(
        &mut self,
        a: Var,
        axis: usize,
        mask: Option<&[bool]>,
    ) -> Result<Var, TensorError> {
        self.guard()?;
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(TensorError::BadAxis {
                op: "masked_mean",
                axis,
                rank: s.len(),
            });
        }
        let (outer, len, inner) = split_axis(&s, axis);
        if let Some(m) = mask {
            if m.len() != outer * len {
                return Err(TensorError::MaskLength {
                    op: "masked_mean",
                    expected: outer * len,
                    got: m.len(),
                });
            }
        }
        let mut weights = vec![T::zero(); outer * len];
        for o in 0..outer {
            let keep = |l: usize| mask.map_or(true, |m| m[o * len + l]);
            let count = (0..len).filter(|&l| keep(l)).count();
            if count == 0 {
                return Err(TensorError::EmptyMask {
                    op: "masked_mean",
                    index: o,
                });
            }
            let w = T::one() / T::lit(count as f64);
            for l in 0..len {
                if keep(l) {
                    weights[o * len + l] = w;
                }
            }
        }
        let d = self.data(a);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            let acc = &mut out[o * inner..(o + 1) * inner];
            let mut sums = vec![T::zero(); inner];
            let mut w = T::zero();
            for l in 0..len {
                let wl = weights[o * len + l];
                if wl != T::zero() {
                    w = wl;
                    add_into(&mut sums, &d[(o * len + l) * inner..(o * len + l + 1) * inner]);
                }
            }
            for (x, s) in acc.iter_mut().zip(sums) {
                *x = s * w;
            }
        }
        let mut shape = s.clone();
        shape.remove(axis);
        self.push(
            "masked_mean",
            shape,
            out,
            Op::MaskedMean {
                a,
                len,
                inner,
                weights,
            },
            &[a],
        )
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        self.guard()?;
        let total = self.data(a).iter().fold(T::zero(), |acc, &x| acc + x);
        self.push("sum", Vec::new(), vec![total], Op::Sum { a }, &[a])
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var, eps: T) -> Result<Var, TensorError> {
        self.guard()?;
        let s = self.shape(a).to_vec();
        let w = *s.last().unwrap_or(&1);
        if self.shape(gain) != [w] || self.shape(bias) != [w] {
            return Err(mismatch("layer_norm", &s, self.shape(gain)));
        }
        let rows = numel(&s) / w;
        let wt = T::lit(w as f64);
        let (d, g, b) = (self.data(a), self.data(gain), self.data(bias));
        let mut xhat = Vec::with_capacity(d.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(d.len());
        for row in d.chunks(w) {
            let mean = row.iter().fold(T::zero(), |acc, &x| acc + x) / wt;
            let var = row
                .iter()
                .fold(T::zero(), |acc, &x| acc + (x - mean) * (x - mean))
                / wt;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for ((&x, &gi), &bi) in row.iter().zip(g).zip(b) {
                let xh = (x - mean) * r;
                xhat.push(xh);
                out.push(xh * gi + bi);
            }
        }
        self.push(
            "layer_norm",
            s,
            out,
            Op::LayerNorm {
                a,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[a, gain, bias],
        )
    }

    /// Gathers rows of a `[V×d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        self.guard()?;
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(TensorError::BadAxis {
                op: "embedding",
                axis: 1,
                rank: s.len(),
            });
        }
        let (v, d) = (s[0], s[1]);
        if ids.is_empty() {
            return Err(TensorError::EmptyBatch);
        }
        let t = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "embedding",
                    index: id,
                    size: v,
                });
            }
            out.extend_from_slice(&t[id * d..(id + 1) * d]);
        }
        self.push(
            "embedding",
            vec![ids.len(), d],
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        self.softmax_impl(a, None)
    }

    /// Softmax over the last axis where `key_mask` (shape `[groups×K]`) zeroes
    /// excluded columns. Rows are split evenly into `groups` consecutive blocks.
    pub fn masked_softmax(&mut self, a: Var, key_mask: &[bool]) -> Result<Var, TensorError> {
        self.softmax_impl(a, Some(key_mask))
    }

    fn softmax_impl(&mut self, a: Var, key_mask: Option<&[bool]>) -> Result<Var, TensorError> {
        self.guard()?;
        let s = self.shape(a).to_vec();
        let k = *s.last().unwrap_or(&1);
        let rows = numel(&s) / k;
        let groups = key_mask.map_or(1, |m| m.len() / k);
        if let Some(m) = key_mask {
            if m.len() % k != 0 || groups == 0 || rows % groups != 0 {
                return Err(TensorError::MaskLength {
                    op: "softmax",
                    expected: k,
                    got: m.len(),
                });
            }
        }
        let per_group = rows / groups;
        let d = self.data(a);
        let mut out = vec![T::zero(); d.len()];
        for r in 0..rows {
            let mrow = key_mask.map(|m| &m[(r / per_group) * k..(r / per_group + 1) * k]);
            let keep = |j: usize| mrow.map_or(true, |m| m[j]);
            let row = &d[r * k..(r + 1) * k];
            let mut mx = T::neg_infinity();
            for (j, &x) in row.iter().enumerate() {
                if keep(j) && x > mx {
                    mx = x;
                }
            }
            if mx == T::neg_infinity() {
                return Err(TensorError::EmptyMask {
                    op: "softmax",
                    index: r,
                });
            }
            let orow = &mut out[r * k..(r + 1) * k];
            let mut z = T::zero();
            for (j, (&x, o)) in row.iter().zip(orow.iter_mut()).enumerate() {
                if keep(j) {
                    *o = (x - mx).exp();
                    z = z + *o;
                }
            }
            for o in orow.iter_mut() {
                *o = *o / z;
            }
        }
        self.push("softmax", s, out, Op::Softmax { a }, &[a])
    }

    /// Mean over rows of `-log softmax(logits)[row, target]`.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
    ) -> Result<Var, TensorError> {
        self.guard()?;
        let s = self.shape(logits).to_vec();
        if s.len() != 2 {
            return Err(TensorError::BadAxis {
                op: "softmax_cross_entropy",
                axis: 1,
                rank: s.len(),
            });
        }
        let (b, c) = (s[0], s[1]);
        if targets.is_empty() {
            return Err(TensorError::EmptyBatch);
        }
        if targets.len() != b {
            return Err(mismatch("softmax_cross_entropy", &s, &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(TensorError::IndexOutOfRange {
                op: "softmax_cross_entropy",
                index: bad,
                size: c,
            });
        }
        let d = self.data(logits);
        let mut probs = Vec::with_capacity(b * c);
        let mut total = T::zero();
        for (row, &t) in d.chunks(c).zip(targets) {
            let mut arg = 0;
            for (j, &x) in row.iter().enumerate() {
                if x > row[arg] {
                    arg = j;
                }
            }
            let mx = row[arg];
            // log-sum-exp as mx + ln(1 + rest) keeps near-zero losses accurate
            let rest = row
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != arg)
                .fold(T::zero(), |acc, (_, &x)| acc + (x - mx).exp());
            let lse_tail = rest.ln_1p();
            let logz = mx + lse_tail;
            total = total + ((mx - row[t]) + lse_tail);
            probs.extend(row.iter().map(|&x| (x - logz).exp()));
        }
        let loss = total / T::lit(b as f64);
        self.push(
            "softmax_cross_entropy",
            Vec::new(),
            vec![loss],
            Op::SoftmaxCe {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Scales every slice along `axis` to unit Euclidean norm.
    pub fn l2_normalize(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        self.guard()?;
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(TensorError::BadAxis {
                op: "l2_normalize",
                axis,
                rank: s.len(),
            });
        }
        let (outer, len, inner) = split_axis(&s, axis);
        let d = self.data(a);
        let mut norms = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let sq = (0..len).fold(T::zero(), |acc, l| {
                    let x = d[(o * len + l) * inner + i];
                    acc + x * x
                });
                if sq == T::zero() {
                    return Err(TensorError::ZeroNorm { index: o * inner + i });
                }
                norms.push(sq.sqrt());
            }
        }
        let mut out = vec![T::zero(); d.len()];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    let idx = (o * len + l) * inner + i;
                    out[idx] = d[idx] / norms[o * inner + i];
                }
            }
        }
        self.push(
            "l2_normalize",
            s,
            out,
            Op::L2Normalize {
                a,
                len,
                inner,
                norms,
            },
            &[a],
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        self.guard()?;
        if numel(shape) != self.value(a).numel() {
            return Err(mismatch("reshape", self.shape(a), shape));
        }
        let out = self.data(a).to_vec();
        self.push("reshape", shape.to_vec(), out, Op::Reshape { a }, &[a])
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var, TensorError> {
        self.guard()?;
        let s = self.shape(a).to_vec();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(mismatch("permute", &s, perm));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
        let out = permute_data(self.data(a), &s, perm);
        self.push(
            "permute",
            out_shape,
            out,
            Op::Permute {
                a,
                perm: perm.to_vec(),
            },
            &[a],
        )
    }

    /// Reverse pass from a scalar loss. Consumes the tape: a second call
    /// without re-recording the forward pass is rejected.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>, TensorError> {
        self.guard()?;
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NotScalar(self.shape(loss).to_vec()));
        }
        self.consumed = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        let mut leaf_grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if let Op::Leaf = node.op {
                leaf_grads[idx] = Some(g);
                continue;
            }
            self.backprop_node(idx, &g, &mut grads);
        }
        for (idx, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && leaf_grads[idx].is_none() {
                leaf_grads[idx] = Some(vec![T::zero(); node.value.numel()]);
            }
        }
        Ok(Gradients { grads: leaf_grads })
    }

    fn backprop_node(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let out = nodes[idx].value.data();
        let rg = |v: Var| nodes[v.0].requires_grad;
        let val = |v: Var| nodes[v.0].value.data();
        macro_rules! buf {
            ($v:expr) => {
                grad_buf(grads, nodes, $v)
            };
        }

        match &nodes[idx].op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_rhs,
            } => {
                if rg(a) {
                    let bd = val(b);
                    let ga = buf!(a);
                    for bi in 0..batch {
                        let boff = if shared_rhs { 0 } else { bi * k * n };
                        gemm_nt(
                            m,
                            n,
                            k,
                            &g[bi * m * n..(bi + 1) * m * n],
                            &bd[boff..boff + k * n],
                            &mut ga[bi * m * k..(bi + 1) * m * k],
                        );
                    }
                }
                if rg(b) {
                    let ad = val(a);
                    let gb = buf!(b);
                    for bi in 0..batch {
                        let boff = if shared_rhs { 0 } else { bi * k * n };
                        gemm_tn(
                            m,
                            k,
                            n,
                            &ad[bi * m * k..(bi + 1) * m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            &mut gb[boff..boff + k * n],
                        );
                    }
                }
            }
            &Op::Transpose {
                a,
                batch,
                rows,
                cols,
            } => {
                let ga = buf!(a);
                for bi in 0..batch {
                    let t = transpose2(cols, rows, &g[bi * rows * cols..(bi + 1) * rows * cols]);
                    add_into(&mut ga[bi * rows * cols..(bi + 1) * rows * cols], &t);
                }
            }
            &Op::Add { a, b } => {
                if rg(a) {
                    add_into(buf!(a), g);
                }
                if rg(b) {
                    add_into(buf!(b), g);
                }
            }
            &Op::AddRow { a, b } => {
                if rg(a) {
                    add_into(buf!(a), g);
                }
                if rg(b) {
                    let gb = buf!(b);
                    let w = gb.len();
                    for row in g.chunks(w) {
                        add_into(gb, row);
                    }
                }
            }
            &Op::Sub { a, b } => {
                if rg(a) {
                    add_into(buf!(a), g);
                }
                if rg(b) {
                    for (d, &x) in buf!(b).iter_mut().zip(g) {
                        *d = *d - x;
                    }
                }
            }
            &Op::Mul { a, b } => {
                if rg(a) {
                    let bd = val(b);
                    for ((d, &x), &y) in buf!(a).iter_mut().zip(g).zip(bd) {
                        *d = *d + x * y;
                    }
                }
                if rg(b) {
                    let ad = val(a);
                    for ((d, &x), &y) in buf!(b).iter_mut().zip(g).zip(ad) {
                        *d = *d + x * y;
                    }
                }
            }
            &Op::Scale { a, s } => {
                for (d, &x) in buf!(a).iter_mut().zip(g) {
                    *d = *d + x * s;
                }
            }
            &Op::ScaleBy { a, s } => {
                let sv = val(s)[0];
                if rg(a) {
                    for (d, &x) in buf!(a).iter_mut().zip(g) {
                        *d = *d + x * sv;
                    }
                }
                if rg(s) {
                    let ad = val(a);
                    let dot = g.iter().zip(ad).fold(T::zero(), |acc, (&x, &y)| acc + x * y);
                    let gs = buf!(s);
                    gs[0] = gs[0] + dot;
                }
            }
            &Op::Exp { a } => {
                for ((d, &x), &y) in buf!(a).iter_mut().zip(g).zip(out) {
                    *d = *d + x * y;
                }
            }
            &Op::Log { a } => {
                let ad = val(a);
                for ((d, &x), &y) in buf!(a).iter_mut().zip(g).zip(ad) {
                    *d = *d + x / y;
                }
            }
            &Op::Abs { a } => {
                let ad = val(a);
                for ((d, &x), &y) in buf!(a).iter_mut().zip(g).zip(ad) {
                    let sign = if y > T::zero() {
                        T::one()
                    } else if y < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    };
                    *d = *d + x * sign;
                }
            }
            &Op::Gelu { a } => {
                let (c, k) = (T::lit(GELU_C), T::lit(GELU_K));
                let (half, three) = (T::lit(0.5), T::lit(3.0));
                let ad = val(a);
                for ((d, &x), &y) in buf!(a).iter_mut().zip(g).zip(ad) {
                    let th = (k * (y + c * y * y * y)).tanh();
                    let dudx = k * (T::one() + three * c * y * y);
                    let deriv = half * (T::one() + th) + half * y * (T::one() - th * th) * dudx;
                    *d = *d + x * deriv;
                }
            }
            Op::Concat { parts, rows } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let mut off = 0;
                for &(p, w) in parts {
                    if rg(p) {
                        let gp = buf!(p);
                        for r in 0..*rows {
                            add_into(
                                &mut gp[r * w..(r + 1) * w],
                                &g[r * total + off..r * total + off + w],
                            );
                        }
                    }
                    off += w;
                }
            }
            &Op::MaskedMean {
                a,
                len,
                inner,
                ref weights,
            } => {
                let ga = buf!(a);
                for (ol, &w) in weights.iter().enumerate() {
                    if w == T::zero() {
                        continue;
                    }
                    let o = ol / len;
                    let gs = &g[o * inner..(o + 1) * inner];
                    for (d, &x) in ga[ol * inner..(ol + 1) * inner].iter_mut().zip(gs) {
                        *d = *d + x * w;
                    }
                }
            }
            &Op::Sum { a } => {
                let g0 = g[0];
                for d in buf!(a).iter_mut() {
                    *d = *d + g0;
                }
            }
            &Op::LayerNorm {
                a,
                gain,
                bias,
                ref xhat,
                ref rstd,
            } => {
                let w = val(gain).len();
                let gv = val(gain);
                if rg(a) {
                    let wt = T::lit(w as f64);
                    let ga = buf!(a);
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gr = &g[r * w..(r + 1) * w];
                        let xr = &xhat[r * w..(r + 1) * w];
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for j in 0..w {
                            let dxh = gr[j] * gv[j];
                            mean_d = mean_d + dxh;
                            mean_dx = mean_dx + dxh * xr[j];
                        }
                        mean_d = mean_d / wt;
                        mean_dx = mean_dx / wt;
                        for j in 0..w {
                            let dxh = gr[j] * gv[j];
                            let v = &mut ga[r * w + j];
                            *v = *v + rs * (dxh - mean_d - xr[j] * mean_dx);
                        }
                    }
                }
                if rg(gain) {
                    let gg = buf!(gain);
                    for (gr, xr) in g.chunks(w).zip(xhat.chunks(w)) {
                        for ((d, &x), &y) in gg.iter_mut().zip(gr).zip(xr) {
                            *d = *d + x * y;
                        }
                    }
                }
                if rg(bias) {
                    let gb = buf!(bias);
                    for gr in g.chunks(w) {
                        add_into(gb, gr);
                    }
                }
            }
            &Op::Embedding { table, ref ids } => {
                let gt = buf!(table);
                let d = gt.len() / nodes[table.0].value.shape()[0];
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                }
            }
            &Op::Softmax { a } => {
                let k = *nodes[idx].value.shape().last().unwrap_or(&1);
                let ga = buf!(a);
                for ((gr, yr), dr) in g.chunks(k).zip(out.chunks(k)).zip(ga.chunks_mut(k)) {
                    let dot = gr.iter().zip(yr).fold(T::zero(), |acc, (&x, &y)| acc + x * y);
                    for ((d, &x), &y) in dr.iter_mut().zip(gr).zip(yr) {
                        *d = *d + y * (x - dot);
                    }
                }
            }
            &Op::SoftmaxCe {
                logits,
                ref targets,
                ref probs,
            } => {
                let b = targets.len();
                let c = probs.len() / b;
                let scale = g[0] / T::lit(b as f64);
                let gl = buf!(logits);
                for (r, &t) in targets.iter().enumerate() {
                    for j in 0..c {
                        let onehot = if j == t { T::one() } else { T::zero() };
                        let v = &mut gl[r * c + j];
                        *v = *v + (probs[r * c + j] - onehot) * scale;
                    }
                }
            }
            &Op::L2Normalize {
                a,
                len,
                inner,
                ref norms,
            } => {
                let outer = norms.len() / inner;
                let ga = buf!(a);
                for o in 0..outer {
                    for i in 0..inner {
                        let nrm = norms[o * inner + i];
                        let at = |l: usize| (o * len + l) * inner + i;
                        let dot = (0..len).fold(T::zero(), |acc, l| acc + out[at(l)] * g[at(l)]);
                        for l in 0..len {
                            let j = at(l);
                            ga[j] = ga[j] + (g[j] - out[j] * dot) / nrm;
                        }
                    }
                }
            }
            &Op::Reshape { a } => add_into(buf!(a), g),
            &Op::Permute { a, ref perm } => {
                let out_shape = nodes[idx].value.shape().to_vec();
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let back = permute_data(g, &out_shape, &inv);
                add_into(buf!(a), &back);
            }
        }
    }
}

fn grad_buf<'a, T: Scalar>(
    grads: &'a mut [Option<Vec<T>>],
    nodes: &[Node<T>],
    v: Var,
) -> &'a mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.numel()])
}

fn permute_data<T: Scalar>(data: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..data.len() {
        out.push(data[src]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}
