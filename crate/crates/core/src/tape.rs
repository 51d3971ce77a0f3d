//! A small reverse-mode differentiation tape over dense `f64` matrices.
//!
//! Every value is a 2-D array; vectors are `1 × d` rows and scalars `1 × 1`.
//! Values are computed eagerly when an op is recorded, and [`Tape::backward`]
//! walks the recorded ops in reverse.

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

use crate::kg::MergedGraph;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<'g> {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulTransB(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    GraphMean(Var, &'g MergedGraph),
    Gather(Var, Vec<usize>),
    SoftmaxRows(Var),
    CrossMatch { hp: Var, hq: Var, attn: Var },
    Concat(Var, Var),
    SumRows(Var),
    AbsSum(Var),
    RowAbsSum(Var),
    HingeAllPairs { pos: Var, neg: Var, margin: f64 },
    StackRows(Vec<Var>),
    AddMany(Vec<Var>),
    SliceRows(Var, usize, usize),
}

struct Node<'g> {
    value: Array2<f64>,
    op: Op<'g>,
}

#[derive(Default)]
pub struct Tape<'g> {
    nodes: Vec<Node<'g>>,
}

/// Gradients of a scalar output with respect to every recorded node.
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros of the given shape when `v` did not
    /// influence the output.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Array2<f64> {
        self.get(v).cloned().unwrap_or_else(|| Array2::zeros(shape))
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_rows(x: ArrayView2<f64>) -> Array2<f64> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum: f64 = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// `m_p = Σ_q a_pq (h_p − h_q)`, computed termwise so identical rows give
/// exact zeros.
pub fn cross_match_values(hp: ArrayView2<f64>, hq: ArrayView2<f64>, attn: ArrayView2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(hp.raw_dim());
    for (p, mut m) in out.rows_mut().into_iter().enumerate() {
        for q in 0..hq.nrows() {
            let a = attn[[p, q]];
            Zip::from(&mut m)
                .and(hp.row(p))
                .and(hq.row(q))
                .for_each(|m, &x, &y| *m += a * (x - y));
        }
    }
    out
}

pub(crate) fn graph_mean(x: ArrayView2<f64>, graph: &MergedGraph) -> Array2<f64> {
    let mut out = Array2::zeros(x.raw_dim());
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        row += &x.row(i);
        for &j in graph.neighbors(i) {
            row += &x.row(j);
        }
        let eps = graph.norm_constants[i];
        row.mapv_inplace(|v| v / eps);
    }
    out
}

impl<'g> Tape<'g> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op<'g>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulTransB(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    /// Adds a `1 × d` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    /// Row `i` becomes the mean of rows `N_i ∪ {i}`.
    pub fn graph_mean(&mut self, a: Var, graph: &'g MergedGraph) -> Var {
        let v = graph_mean(self.value(a).view(), graph);
        self.push(v, Op::GraphMean(a, graph))
    }

    pub fn gather(&mut self, a: Var, rows: &[usize]) -> Var {
        let v = self.value(a).select(Axis(0), rows);
        self.push(v, Op::Gather(a, rows.to_vec()))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a).view());
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn cross_match(&mut self, hp: Var, hq: Var, attn: Var) -> Var {
        let v = cross_match_values(self.value(hp).view(), self.value(hq).view(), self.value(attn).view());
        self.push(v, Op::CrossMatch { hp, hq, attn })
    }

    /// Column-wise concatenation `[a ‖ b]`.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let v = ndarray::concatenate![Axis(1), self.value(a).view(), self.value(b).view()];
        self.push(v, Op::Concat(a, b))
    }

    pub fn sum_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.push(v, Op::SumRows(a))
    }

    /// Sum of absolute values of all entries, as a scalar.
    pub fn abs_sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().map(|x| x.abs()).sum::<f64>();
        self.push(Array2::from_elem((1, 1), s), Op::AbsSum(a))
    }

    /// Per-row L1 norms as an `n × 1` column.
    pub fn row_abs_sum(&mut self, a: Var) -> Var {
        let v = self.value(a).map_axis(Axis(1), |r| r.iter().map(|x| x.abs()).sum::<f64>());
        self.push(v.insert_axis(Axis(1)), Op::RowAbsSum(a))
    }

    /// `Σ_i Σ_j max(0, pos_i − neg_j + margin)` over two `· × 1` columns.
    pub fn hinge_all_pairs(&mut self, pos: Var, neg: Var, margin: f64) -> Var {
        let p = self.value(pos);
        let n = self.value(neg);
        let mut s = 0.0;
        for &a in p.iter() {
            for &b in n.iter() {
                s += (a - b + margin).max(0.0);
            }
        }
        self.push(Array2::from_elem((1, 1), s), Op::HingeAllPairs { pos, neg, margin })
    }

    /// Rows `start..end` of `a`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![start..end, ..]).to_owned();
        self.push(v, Op::SliceRows(a, start, end))
    }

    /// Stacks rows of equal width into one matrix.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("stack_rows: width mismatch");
        self.push(v, Op::StackRows(parts.to_vec()))
    }

    pub fn add_many(&mut self, parts: &[Var]) -> Var {
        let mut acc = self.value(parts[0]).clone();
        for &p in &parts[1..] {
            acc += self.value(p);
        }
        self.push(acc, Op::AddMany(parts.to_vec()))
    }

    /// Reverse pass from a `1 × 1` output.
    pub fn backward(&self, output: Var) -> Gradients {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Array2<f64>>> = (0..n).map(|_| None).collect();
        grads[output.0] = Some(Array2::ones(self.value(output).raw_dim()));

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    accum(&mut grads, *a, ga);
                    accum(&mut grads, *b, gb);
                }
                Op::MatMulTransB(a, b) => {
                    let ga = g.dot(self.value(*b));
                    let gb = g.t().dot(self.value(*a));
                    accum(&mut grads, *a, ga);
                    accum(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accum(&mut grads, *a, g.clone());
                    accum(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    accum(&mut grads, *a, g.clone());
                    accum(&mut grads, *b, -&g);
                }
                Op::Mul(a, b) => {
                    accum(&mut grads, *a, &g * self.value(*b));
                    accum(&mut grads, *b, &g * self.value(*a));
                }
                Op::AddRow(a, row) => {
                    accum(&mut grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    accum(&mut grads, *a, g.clone());
                }
                Op::Scale(a, c) => accum(&mut grads, *a, &g * *c),
                Op::Relu(a) => {
                    let mut ga = g.clone();
                    Zip::from(&mut ga)
                        .and(self.value(*a))
                        .for_each(|d, &x| if x <= 0.0 { *d = 0.0 });
                    accum(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let mut ga = g.clone();
                    Zip::from(&mut ga)
                        .and(&node.value)
                        .for_each(|d, &y| *d *= y * (1.0 - y));
                    accum(&mut grads, *a, ga);
                }
                Op::GraphMean(a, graph) => {
                    // The normalized adjacency is not symmetric, so scatter
                    // each output row's gradient back to its sources.
                    let mut ga = Array2::zeros(g.raw_dim());
                    for i in 0..g.nrows() {
                        let gi = g.row(i).mapv(|v| v / graph.norm_constants[i]);
                        let mut r = ga.row_mut(i);
                        r += &gi;
                        for &j in graph.neighbors(i) {
                            let mut r = ga.row_mut(j);
                            r += &gi;
                        }
                    }
                    accum(&mut grads, *a, ga);
                }
                Op::Gather(a, rows) => {
                    let shape = self.value(*a).raw_dim();
                    let dst = grads[a.0].get_or_insert_with(|| Array2::zeros(shape));
                    for (k, &r) in rows.iter().enumerate() {
                        let mut row = dst.row_mut(r);
                        row += &g.row(k);
                    }
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = Array2::zeros(g.raw_dim());
                    for ((mut out, gr), yr) in ga.rows_mut().into_iter().zip(g.rows()).zip(y.rows()) {
                        let dot: f64 = gr.iter().zip(yr.iter()).map(|(a, b)| a * b).sum();
                        Zip::from(&mut out)
                            .and(gr)
                            .and(yr)
                            .for_each(|o, &gv, &yv| *o = yv * (gv - dot));
                    }
                    accum(&mut grads, *a, ga);
                }
                Op::CrossMatch { hp, hq, attn } => {
                    let a = self.value(*attn);
                    let hpv = self.value(*hp);
                    let hqv = self.value(*hq);
                    let row_mass = a.sum_axis(Axis(1)).insert_axis(Axis(1));
                    accum(&mut grads, *hp, &g * &row_mass);
                    accum(&mut grads, *hq, -a.t().dot(&g));
                    // ∂/∂a_pq = g_p · (h_p − h_q)
                    let gp_hp = (&g * hpv).sum_axis(Axis(1)).insert_axis(Axis(1));
                    let g_hq = g.dot(&hqv.t());
                    accum(&mut grads, *attn, &gp_hp - &g_hq);
                }
                Op::Concat(a, b) => {
                    let wa = self.value(*a).ncols();
                    accum(&mut grads, *a, g.slice(s![.., ..wa]).to_owned());
                    accum(&mut grads, *b, g.slice(s![.., wa..]).to_owned());
                }
                Op::SumRows(a) => {
                    let shape = self.value(*a).raw_dim();
                    let ga = g.broadcast(shape).unwrap().to_owned();
                    accum(&mut grads, *a, ga);
                }
                Op::AbsSum(a) => {
                    let gs = g[[0, 0]];
                    accum(&mut grads, *a, self.value(*a).mapv(|x| gs * sign(x)));
                }
                Op::RowAbsSum(a) => {
                    let mut ga = self.value(*a).mapv(sign);
                    ga *= &g;
                    accum(&mut grads, *a, ga);
                }
                Op::HingeAllPairs { pos, neg, margin } => {
                    let gs = g[[0, 0]];
                    let p = self.value(*pos);
                    let n = self.value(*neg);
                    let mut gp = Array2::zeros(p.raw_dim());
                    let mut gn = Array2::zeros(n.raw_dim());
                    for (i, &a) in p.iter().enumerate() {
                        for (j, &b) in n.iter().enumerate() {
                            if a - b + margin > 0.0 {
                                gp.as_slice_mut().unwrap()[i] += gs;
                                gn.as_slice_mut().unwrap()[j] -= gs;
                            }
                        }
                    }
                    accum(&mut grads, *pos, gp);
                    accum(&mut grads, *neg, gn);
                }
                Op::StackRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let h = self.value(p).nrows();
                        accum(&mut grads, p, g.slice(s![start..start + h, ..]).to_owned());
                        start += h;
                    }
                }
                Op::AddMany(parts) => {
                    for &p in parts {
                        accum(&mut grads, p, g.clone());
                    }
                }
                Op::SliceRows(a, start, end) => {
                    let shape = self.value(*a).raw_dim();
                    let dst = grads[a.0].get_or_insert_with(|| Array2::zeros(shape));
                    let mut block = dst.slice_mut(s![*start..*end, ..]);
                    block += &g;
                }
            }
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn accum(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central differences of `f` at `x`.
    fn numeric(x: &Array2<f64>, f: impl Fn(&Array2<f64>) -> f64) -> Array2<f64> {
        let h = 1e-6;
        let mut out = Array2::zeros(x.raw_dim());
        for idx in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            xm.as_slice_mut().unwrap()[idx] -= h;
            out.as_slice_mut().unwrap()[idx] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        out
    }

    fn assert_close(a: &Array2<f64>, b: &Array2<f64>, tol: f64) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol * (1.0 + y.abs()), "{x} vs {y}");
        }
    }

    #[test]
    fn matmul_softmax_chain() {
        let x = array![[0.3, -0.2, 0.5], [1.0, 0.1, -0.4]];
        let w = array![[0.2, 0.7], [-0.5, 0.3], [0.9, -0.1]];
        let f = |x: &Array2<f64>| {
            let mut t = Tape::new();
            let xv = t.leaf(x.clone());
            let wv = t.leaf(w.clone());
            let y = t.matmul(xv, wv);
            let s = t.softmax_rows(y);
            let z = t.sigmoid(s);
            let r = t.sum_rows(z);
            let out = t.abs_sum(r);
            (t.scalar(out), t.backward(out).get(xv).cloned().unwrap())
        };
        let (_, analytic) = f(&x);
        let num = numeric(&x, |x| f(x).0);
        assert_close(&analytic, &num, 1e-6);
    }

    #[test]
    fn cross_match_gradients() {
        let hp = array![[0.3, -0.2], [1.0, 0.4], [-0.7, 0.2]];
        let hq = array![[0.5, 0.1], [-0.3, 0.8]];
        let run = |hp: &Array2<f64>, hq: &Array2<f64>| {
            let mut t = Tape::new();
            let a = t.leaf(hp.clone());
            let b = t.leaf(hq.clone());
            let logits = t.matmul_t(a, b);
            let attn = t.softmax_rows(logits);
            let m = t.cross_match(a, b, attn);
            let sq = t.mul(m, m);
            let total = t.sum_rows(sq);
            let cat = t.concat(total, total);
            let out = t.abs_sum(cat);
            let g = t.backward(out);
            (t.scalar(out), g.get(a).cloned().unwrap(), g.get(b).cloned().unwrap())
        };
        let (_, ga, gb) = run(&hp, &hq);
        assert_close(&ga, &numeric(&hp, |x| run(x, &hq).0), 1e-6);
        assert_close(&gb, &numeric(&hq, |x| run(&hp, x).0), 1e-6);
    }

    #[test]
    fn hinge_and_stack() {
        let x = array![[0.4], [1.3]];
        let run = |x: &Array2<f64>| {
            let mut t = Tape::new();
            let v = t.leaf(x.clone());
            let a = t.gather(v, &[0]);
            let b = t.gather(v, &[1, 0]);
            let c = t.scale(a, 2.0);
            let pos = t.stack_rows(&[a, c]);
            let h = t.hinge_all_pairs(pos, b, 0.45);
            let h2 = t.add_many(&[h, h]);
            let out = t.relu(h2);
            (t.scalar(out), t.backward(out).get(v).cloned().unwrap())
        };
        let (_, g) = run(&x);
        assert_close(&g, &numeric(&x, |x| run(x).0), 1e-6);
    }
}
