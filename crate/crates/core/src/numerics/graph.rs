use ndarray::{Array2, Axis};

use super::attention::{self, AttentionLayout};
use super::{top_k_indices, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Forward rule of a custom node: input values to output value.
pub type CustomForward<'a, S> = dyn Fn(&[&Array2<S>]) -> Result<Array2<S>> + 'a;

/// Backward rule of a custom node: `(upstream, inputs, output)` to one
/// optional gradient per input. The rule is used verbatim; no automatic
/// differentiation happens through a custom node.
pub type CustomBackward<S> = Box<dyn Fn(&Array2<S>, &[&Array2<S>], &Array2<S>) -> Vec<Option<Array2<S>>>>;

enum Op<S: Scalar> {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, S),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    SoftmaxRows(Var),
    TopKRenorm { input: Var, selected: Vec<Vec<usize>> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Array2<S> },
    Silu(Var),
    RmsNorm { input: Var, inv_rms: Vec<S> },
    Attention { q: Var, k: Var, v: Var, layout: AttentionLayout, probs: Vec<Array2<S>> },
    GatherRows { input: Var, rows: Vec<usize> },
    Column { input: Var, col: usize },
    Custom { inputs: Vec<Var>, backward: CustomBackward<S> },
}

struct Node<S: Scalar> {
    value: Array2<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// A single-use differentiation tape.
///
/// Nodes are appended in evaluation order, so reverse insertion order is a
/// valid reverse topological order for the backward sweep. Discrete choices
/// made during the forward pass (top-k selections, argmaxes) are folded
/// into [`Graph::decisions`] so callers can detect when a perturbation
/// crossed a selection boundary.
pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Array2<S>>>,
    decisions: Vec<u64>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims<S>(a: &Array2<S>) -> (usize, usize) {
    a.dim()
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            decisions: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<S> {
        &self.nodes[v.0].value
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> S {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last [`Graph::backward`] call.
    pub fn grad(&self, v: Var) -> Option<&Array2<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Fingerprints of discrete choices made while building the graph.
    pub fn decisions(&self) -> &[u64] {
        &self.decisions
    }

    pub fn record_decision(&mut self, tag: u64) {
        self.decisions.push(tag);
    }

    fn push(&mut self, value: Array2<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Array2<S>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Array2<S>) -> Var {
        self.leaf(value, false)
    }

    /// Records a parameter as a leaf, honoring its `requires_grad` flag.
    pub fn param(&mut self, t: &Tensor<S>) -> Var {
        self.leaf(t.value.clone(), t.requires_grad)
    }

    /// Records a parameter as a constant regardless of its flag.
    pub fn frozen_param(&mut self, t: &Tensor<S>) -> Var {
        self.leaf(t.value.clone(), false)
    }

    /// `a · b`, or `a · bᵀ` when `trans_b`.
    pub fn matmul_ext(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ar, ac) = dims(self.value(a));
        let (br, bc) = dims(self.value(b));
        let inner = if trans_b { bc } else { br };
        if ac != inner {
            return Err(Error::shape(
                "matmul",
                format!("{ar}x{ac} · {br}x{bc}{}", if trans_b { "ᵀ" } else { "" }),
            ));
        }
        let out = if trans_b {
            self.value(a).dot(&self.value(b).t())
        } else {
            self.value(a).dot(self.value(b))
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul { a, b, trans_b }, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ext(a, b, false)
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ext(a, b, true)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (da, db) = (dims(self.value(a)), dims(self.value(b)));
        if da != db {
            return Err(Error::shape(op, format!("{da:?} vs {db:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a) + self.value(b);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Adds a `1 x m` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, ac) = dims(self.value(a));
        let rd = dims(self.value(row));
        if rd != (1, ac) {
            return Err(Error::shape("add_row", format!("row {rd:?} for {ac} columns")));
        }
        let out = self.value(a) + self.value(row);
        let rg = self.rg(&[a, row]);
        Ok(self.push(out, Op::AddRow(a, row), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a) * self.value(b);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Multiplies every row of `a` elementwise by a `1 x m` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, ac) = dims(self.value(a));
        let rd = dims(self.value(row));
        if rd != (1, ac) {
            return Err(Error::shape("mul_row", format!("row {rd:?} for {ac} columns")));
        }
        let out = self.value(a) * self.value(row);
        let rg = self.rg(&[a, row]);
        Ok(self.push(out, Op::MulRow(a, row), rg))
    }

    /// Multiplies every column of `a` elementwise by an `n x 1` column.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (ar, _) = dims(self.value(a));
        let cd = dims(self.value(col));
        if cd != (ar, 1) {
            return Err(Error::shape("mul_col", format!("column {cd:?} for {ar} rows")));
        }
        let out = self.value(a) * self.value(col);
        let rg = self.rg(&[a, col]);
        Ok(self.push(out, Op::MulCol(a, col), rg))
    }

    pub fn scale(&mut self, a: Var, s: S) -> Var {
        let out = self.value(a) * s;
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Array2::from_elem((1, 1), self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(out, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = Array2::from_elem((1, 1), v.sum() / S::of(v.len() as f64));
        let rg = self.rg(&[a]);
        self.push(out, Op::Mean(a), rg)
    }

    /// Column-wise mean, `n x m -> 1 x m`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let out = self
            .value(a)
            .mean_axis(Axis(0))
            .ok_or_else(|| Error::shape("mean_rows", "zero rows"))?
            .insert_axis(Axis(0));
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::MeanRows(a), rg))
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for mut row in out.rows_mut() {
            let max = row
                .iter()
                .copied()
                .fold(S::neg_infinity(), |m, v| if v > m { v } else { m });
            row.mapv_inplace(|v| (v - max).exp());
            let total = row.sum();
            row.mapv_inplace(|v| v / total);
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::SoftmaxRows(a), rg)
    }

    /// Keeps the `k` largest entries of each row (ties to the lower index),
    /// zeroes the rest and renormalizes the kept entries to sum to one.
    ///
    /// The selection is treated as constant when differentiating.
    pub fn top_k_renorm(&mut self, a: Var, k: usize) -> Result<Var> {
        let (rows, cols) = dims(self.value(a));
        if k == 0 || k > cols {
            return Err(Error::shape("top_k", format!("k={k} over {cols} columns")));
        }
        let mut out = Array2::zeros((rows, cols));
        let mut selected = Vec::with_capacity(rows);
        let mut tag: u64 = 0xcbf2_9ce4_8422_2325;
        for (r, row) in self.value(a).rows().into_iter().enumerate() {
            let vals: Vec<S> = row.to_vec();
            let sel = top_k_indices(&vals, k);
            let total: S = sel.iter().map(|&i| vals[i]).sum();
            for &i in &sel {
                out[[r, i]] = vals[i] / total;
                tag = (tag ^ (i as u64 + 1)).wrapping_mul(0x100_0000_01b3);
            }
            tag = (tag ^ 0xff).wrapping_mul(0x100_0000_01b3);
            selected.push(sel);
        }
        self.decisions.push(tag);
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::TopKRenorm { input: a, selected }, rg))
    }

    /// Mean cross-entropy of row-wise logits against integer targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (rows, cols) = dims(self.value(logits));
        if rows != targets.len() || rows == 0 {
            return Err(Error::shape(
                "cross_entropy",
                format!("{rows} rows vs {} targets", targets.len()),
            ));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= cols) {
            return Err(Error::shape(
                "cross_entropy",
                format!("target {t} outside {cols} classes"),
            ));
        }
        let mut probs = self.value(logits).clone();
        let mut loss = S::zero();
        for (r, mut row) in probs.rows_mut().into_iter().enumerate() {
            let max = row
                .iter()
                .copied()
                .fold(S::neg_infinity(), |m, v| if v > m { v } else { m });
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<S>().ln() + max;
            loss -= row[targets[r]] - lse;
            row.mapv_inplace(|v| (v - lse).exp());
        }
        let out = Array2::from_elem((1, 1), loss / S::of(rows as f64));
        let rg = self.rg(&[logits]);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x / (S::one() + (-x).exp()));
        let rg = self.rg(&[a]);
        self.push(out, Op::Silu(a), rg)
    }

    /// Root-mean-square normalization of each row, without a gain.
    pub fn rms_norm(&mut self, a: Var, eps: S) -> Var {
        let mut out = self.value(a).clone();
        let cols = S::of(out.ncols() as f64);
        let mut inv_rms = Vec::with_capacity(out.nrows());
        for mut row in out.rows_mut() {
            let ms = row.iter().map(|&v| v * v).sum::<S>() / cols;
            let inv = (ms + eps).sqrt().recip();
            row.mapv_inplace(|v| v * inv);
            inv_rms.push(inv);
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::RmsNorm { input: a, inv_rms }, rg)
    }

    /// Causal multi-head scaled dot-product attention over `batch`
    /// sequences of `seq` tokens laid out row-wise.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    ) -> Result<Var> {
        let layout = AttentionLayout { batch, seq, heads };
        let shape = dims(self.value(q));
        if dims(self.value(k)) != shape || dims(self.value(v)) != shape {
            return Err(Error::shape("attention", "q, k, v shapes differ"));
        }
        if shape.0 != batch * seq || heads == 0 || !shape.1.is_multiple_of(heads) {
            return Err(Error::shape(
                "attention",
                format!("{shape:?} for batch={batch} seq={seq} heads={heads}"),
            ));
        }
        let (out, probs) =
            attention::forward(self.value(q), self.value(k), self.value(v), layout);
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            },
            rg,
        ))
    }

    /// Stacks the listed rows of `a` (embedding lookup, row selection).
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (n, _) = dims(self.value(a));
        if let Some(&r) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::shape("gather_rows", format!("row {r} of {n}")));
        }
        let out = self.value(a).select(Axis(0), rows);
        let rg = self.rg(&[a]);
        Ok(self.push(
            out,
            Op::GatherRows {
                input: a,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Column `col` of `a` as an `n x 1` matrix.
    pub fn column(&mut self, a: Var, col: usize) -> Result<Var> {
        let (_, m) = dims(self.value(a));
        if col >= m {
            return Err(Error::shape("column", format!("column {col} of {m}")));
        }
        let out = self.value(a).column(col).to_owned().insert_axis(Axis(1));
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Column { input: a, col }, rg))
    }

    /// Records a node whose forward and backward rules are supplied by the
    /// caller.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        forward: &CustomForward<'_, S>,
        backward: CustomBackward<S>,
    ) -> Result<Var> {
        let vals: Vec<&Array2<S>> = inputs.iter().map(|v| self.value(*v)).collect();
        let out = forward(&vals)?;
        let rg = self.rg(inputs);
        Ok(self.push(
            out,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward,
            },
            rg,
        ))
    }

    /// Reverse sweep from a `1 x 1` loss. Gradients of earlier calls are
    /// discarded; within one sweep, contributions from multiple uses of a
    /// node are summed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if dims(self.value(loss)) != (1, 1) {
            return Err(Error::shape(
                "backward",
                format!("loss must be 1x1, got {:?}", dims(self.value(loss))),
            ));
        }
        let mut grads: Vec<Option<Array2<S>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::from_elem((1, 1), S::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let (lower, upper) = grads.split_at_mut(idx);
            let Some(g) = upper[0].as_ref() else { continue };
            self.propagate(node, g, lower)?;
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, node: &Node<S>, g: &Array2<S>, grads: &mut [Option<Array2<S>>]) -> Result<()> {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        let needs = |v: Var| nodes[v.0].requires_grad;
        let mut acc = |v: Var, d: Array2<S>| {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &d,
                slot @ None => *slot = Some(d),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                if needs(*a) {
                    let da = if *trans_b { g.dot(val(*b)) } else { g.dot(&val(*b).t()) };
                    acc(*a, da);
                }
                if needs(*b) {
                    let db = if *trans_b { g.t().dot(val(*a)) } else { val(*a).t().dot(g) };
                    acc(*b, db);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::AddRow(a, r) => {
                acc(*a, g.clone());
                if needs(*r) {
                    acc(*r, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    acc(*a, g * val(*b));
                }
                if needs(*b) {
                    acc(*b, g * val(*a));
                }
            }
            Op::MulRow(a, r) => {
                if needs(*a) {
                    acc(*a, g * val(*r));
                }
                if needs(*r) {
                    acc(*r, (g * val(*a)).sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulCol(a, c) => {
                if needs(*a) {
                    acc(*a, g * val(*c));
                }
                if needs(*c) {
                    acc(*c, (g * val(*a)).sum_axis(Axis(1)).insert_axis(Axis(1)));
                }
            }
            Op::Scale(a, s) => acc(*a, g * *s),
            Op::Sum(a) => acc(*a, Array2::from_elem(val(*a).dim(), g[[0, 0]])),
            Op::Mean(a) => {
                let n = S::of(val(*a).len() as f64);
                acc(*a, Array2::from_elem(val(*a).dim(), g[[0, 0]] / n));
            }
            Op::MeanRows(a) => {
                let (n, m) = val(*a).dim();
                let row = g / S::of(n as f64);
                acc(*a, row.broadcast((n, m)).expect("row broadcast").to_owned());
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut d = g * y;
                for (mut drow, yrow) in d.rows_mut().into_iter().zip(y.rows()) {
                    let dot = drow.sum();
                    drow.zip_mut_with(&yrow, |dv, &yv| *dv = *dv - yv * dot);
                }
                acc(*a, d);
            }
            Op::TopKRenorm { input, selected } => {
                let p = val(*input);
                let w = &node.value;
                let mut d = Array2::zeros(p.dim());
                for (r, sel) in selected.iter().enumerate() {
                    let total: S = sel.iter().map(|&i| p[[r, i]]).sum();
                    let inner: S = sel.iter().map(|&i| g[[r, i]] * w[[r, i]]).sum();
                    for &j in sel {
                        d[[r, j]] = (g[[r, j]] - inner) / total;
                    }
                }
                acc(*input, d);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let scale = g[[0, 0]] / S::of(targets.len() as f64);
                let mut d = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    d[[r, t]] -= S::one();
                }
                d.mapv_inplace(|v| v * scale);
                acc(*logits, d);
            }
            Op::Silu(a) => {
                let x = val(*a);
                let mut d = g.clone();
                d.zip_mut_with(x, |dv, &xv| {
                    let s = (S::one() + (-xv).exp()).recip();
                    *dv = *dv * s * (S::one() + xv * (S::one() - s));
                });
                acc(*a, d);
            }
            Op::RmsNorm { input, inv_rms } => {
                let y = &node.value;
                let cols = S::of(y.ncols() as f64);
                let mut d = g.clone();
                for ((mut drow, yrow), &inv) in d.rows_mut().into_iter().zip(y.rows()).zip(inv_rms) {
                    let m = drow.iter().zip(yrow.iter()).map(|(&a, &b)| a * b).sum::<S>() / cols;
                    drow.zip_mut_with(&yrow, |dv, &yv| *dv = inv * (*dv - yv * m));
                }
                acc(*input, d);
            }
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            } => {
                let (dq, dk, dv) = attention::backward(g, val(*q), val(*k), val(*v), probs, *layout);
                acc(*q, dq);
                acc(*k, dk);
                acc(*v, dv);
            }
            Op::GatherRows { input, rows } => {
                let mut d = Array2::zeros(val(*input).dim());
                for (src, &dst) in rows.iter().enumerate() {
                    let mut target = d.row_mut(dst);
                    target += &g.row(src);
                }
                acc(*input, d);
            }
            Op::Column { input, col } => {
                let mut d = Array2::zeros(val(*input).dim());
                d.column_mut(*col).assign(&g.column(0));
                acc(*input, d);
            }
            Op::Custom { inputs, backward } => {
                let vals: Vec<&Array2<S>> = inputs.iter().map(|v| val(*v)).collect();
                let input_grads = backward(g, &vals, &node.value);
                if input_grads.len() != inputs.len() {
                    return Err(Error::shape(
                        "custom backward",
                        format!("{} grads for {} inputs", input_grads.len(), inputs.len()),
                    ));
                }
                for (v, d) in inputs.iter().zip(input_grads) {
                    if let Some(d) = d {
                        if d.dim() != val(*v).dim() {
                            return Err(Error::shape(
                                "custom backward",
                                format!("grad {:?} for input {:?}", d.dim(), val(*v).dim()),
                            ));
                        }
                        acc(*v, d);
                    }
                }
            }
        }
        Ok(())
    }
}
