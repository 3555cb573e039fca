//! Tape-based reverse-mode automatic differentiation over small dense
//! matrices.
//!
//! Every forward op appends one node to a [`Tape`] and returns a [`Var`]
//! handle. Nodes are stored in creation order, so a reverse sweep over the
//! node list visits every node after all of its consumers. All arithmetic is
//! `f64`.
//!
//! ```
//! use gflowseq::autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::scalar(3.0));
//! let y = tape.square(x);
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().item(), 6.0);
//! ```

use crate::error::{Error, Result};

/// Row-major dense matrix. Column vectors have `cols == 1`; scalars are 1x1.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                detail: format!("{rows}x{cols} needs {} values, got {}", rows * cols, data.len()),
            });
        }
        Ok(Tensor { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { rows: 1, cols: 1, data: vec![value] }
    }

    pub fn vector(values: Vec<f64>) -> Self {
        Tensor { rows: values.len(), cols: 1, data: values }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// Value of a 1x1 tensor (first element otherwise).
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Neg(Var),
    MatMul(Var, Var),
    Tanh(Var),
    Relu(Var),
    LogSoftmax(Var),
    Gather(Var, usize),
    Select(Var, Vec<usize>),
    Row(Var, usize),
    Sum(Var),
    Mean(Var),
    Square(Var),
    Log(Var),
    Exp(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Recorded forward pass. Single-threaded; build one per pass.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    adjoints: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Adjoint of `var`, or `None` when the output does not depend on it.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.adjoints.get(var.0).and_then(Option::as_ref)
    }

    /// Adjoint of `var`, zero-filled with the given shape when absent.
    pub fn get_or_zeros(&self, var: Var, rows: usize, cols: usize) -> Tensor {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(rows, cols))
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.adjoints.get_mut(var.0).and_then(Option::take)
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        detail: format!("{}x{} vs {}x{}", a.rows, a.cols, b.rows, b.cols),
    }
}

fn log_softmax_values(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn scalar_value(&self, var: Var) -> f64 {
        self.nodes[var.0].value.item()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Input node. Parameters and constants are both leaves; constants simply
    /// have their adjoint ignored.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant(&mut self, value: f64) -> Var {
        self.leaf(Tensor::scalar(value))
    }

    fn binary_same_shape(&mut self, a: Var, b: Var, name: &'static str) -> Result<(Vec<f64>, (usize, usize))> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta, tb));
        }
        let f: fn(f64, f64) -> f64 = match name {
            "add" => |x, y| x + y,
            "sub" => |x, y| x - y,
            _ => |x, y| x * y,
        };
        let out = ta.data.iter().zip(&tb.data).map(|(x, y)| f(*x, *y)).collect();
        Ok((out, ta.shape()))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (data, (r, c)) = self.binary_same_shape(a, b, "add")?;
        Ok(self.push(Tensor { rows: r, cols: c, data }, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (data, (r, c)) = self.binary_same_shape(a, b, "sub")?;
        Ok(self.push(Tensor { rows: r, cols: c, data }, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (data, (r, c)) = self.binary_same_shape(a, b, "mul")?;
        Ok(self.push(Tensor { rows: r, cols: c, data }, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let t = self.value(a);
        let data = t.data.iter().map(|x| x * factor).collect();
        let out = Tensor { rows: t.rows, cols: t.cols, data };
        self.push(out, Op::Scale(a, factor))
    }

    /// Adds a constant to every element.
    pub fn shift(&mut self, a: Var, offset: f64) -> Var {
        let t = self.value(a);
        let data = t.data.iter().map(|x| x + offset).collect();
        let out = Tensor { rows: t.rows, cols: t.cols, data };
        self.push(out, Op::Shift(a))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = t.data.iter().map(|x| -x).collect();
        let out = Tensor { rows: t.rows, cols: t.cols, data };
        self.push(out, Op::Neg(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols != tb.rows {
            return Err(shape_err("matmul", ta, tb));
        }
        let (n, k, m) = (ta.rows, ta.cols, tb.cols);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = &ta.data[i * k..(i + 1) * k];
            for (p, &av) in row.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let brow = &tb.data[p * m..(p + 1) * m];
                let orow = &mut out[i * m..(i + 1) * m];
                for (o, bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        Ok(self.push(Tensor { rows: n, cols: m, data: out }, Op::MatMul(a, b)))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(a);
        let data = t.data.iter().map(|x| f(*x)).collect();
        let out = Tensor { rows: t.rows, cols: t.cols, data };
        self.push(out, op)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    /// Log-softmax over all elements, computed with max subtraction.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::Shape { op: "log_softmax", detail: "empty input".into() });
        }
        let out = Tensor { rows: t.rows, cols: t.cols, data: log_softmax_values(&t.data) };
        Ok(self.push(out, Op::LogSoftmax(a)))
    }

    /// Element `index` (flat) as a scalar.
    pub fn gather(&mut self, a: Var, index: usize) -> Result<Var> {
        let t = self.value(a);
        if index >= t.len() {
            return Err(Error::Shape {
                op: "gather",
                detail: format!("index {index} into {} elements", t.len()),
            });
        }
        let out = Tensor::scalar(t.data[index]);
        Ok(self.push(out, Op::Gather(a, index)))
    }

    /// Column vector of the elements at `indices` (flat), in order.
    pub fn select(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= t.len()) {
            return Err(Error::Shape {
                op: "select",
                detail: format!("index {bad} into {} elements", t.len()),
            });
        }
        let out = Tensor::vector(indices.iter().map(|&i| t.data[i]).collect());
        Ok(self.push(out, Op::Select(a, indices.to_vec())))
    }

    /// Row `r` of a matrix, as a column vector.
    pub fn row(&mut self, a: Var, r: usize) -> Result<Var> {
        let t = self.value(a);
        if r >= t.rows {
            return Err(Error::Shape {
                op: "row",
                detail: format!("row {r} of {}x{}", t.rows, t.cols),
            });
        }
        let out = Tensor::vector(t.data[r * t.cols..(r + 1) * t.cols].to_vec());
        Ok(self.push(out, Op::Row(a, r)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data.iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// Sum of several scalars (or same-shaped tensors), left to right.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let (&first, rest) = terms.split_first().ok_or_else(|| Error::Shape {
            op: "add_all",
            detail: "no terms".into(),
        })?;
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.value(output);
        if out.len() != 1 {
            return Err(Error::NotScalar { rows: out.rows, cols: out.cols });
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        adj[output.0] = Some(Tensor::scalar(1.0));

        fn acc(adj: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut adj[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for idx in (0..=output.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            let y = &node.value;
            match &node.op {
                Op::Leaf => {
                    adj[idx] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    acc(&mut adj, *a, g.clone());
                    acc(&mut adj, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    let neg = Tensor { data: g.data.iter().map(|x| -x).collect(), ..g.clone() };
                    acc(&mut adj, *a, g.clone());
                    acc(&mut adj, *b, neg);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let ga = zip_map(&g, vb, |g, x| g * x);
                    let gb = zip_map(&g, va, |g, x| g * x);
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::Scale(a, f) => acc(&mut adj, *a, map(&g, |x| x * f)),
                Op::Shift(a) => acc(&mut adj, *a, g.clone()),
                Op::Neg(a) => acc(&mut adj, *a, map(&g, |x| -x)),
                Op::MatMul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let (n, k, m) = (va.rows, va.cols, vb.cols);
                    // dA = G B^T, dB = A^T G
                    let mut ga = vec![0.0; n * k];
                    let mut gb = vec![0.0; k * m];
                    for i in 0..n {
                        let grow = &g.data[i * m..(i + 1) * m];
                        for p in 0..k {
                            let brow = &vb.data[p * m..(p + 1) * m];
                            ga[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                            let av = va.data[i * k + p];
                            if av != 0.0 {
                                for (o, gv) in gb[p * m..(p + 1) * m].iter_mut().zip(grow) {
                                    *o += av * gv;
                                }
                            }
                        }
                    }
                    acc(&mut adj, *a, Tensor { rows: n, cols: k, data: ga });
                    acc(&mut adj, *b, Tensor { rows: k, cols: m, data: gb });
                }
                Op::Tanh(a) => acc(&mut adj, *a, zip_map(&g, y, |g, t| g * (1.0 - t * t))),
                Op::Relu(a) => {
                    let x = self.value(*a);
                    acc(&mut adj, *a, zip_map(&g, x, |g, x| if x > 0.0 { g } else { 0.0 }));
                }
                Op::Square(a) => {
                    let x = self.value(*a);
                    acc(&mut adj, *a, zip_map(&g, x, |g, x| 2.0 * g * x));
                }
                Op::Log(a) => {
                    let x = self.value(*a);
                    acc(&mut adj, *a, zip_map(&g, x, |g, x| g / x));
                }
                Op::Exp(a) => acc(&mut adj, *a, zip_map(&g, y, |g, e| g * e)),
                Op::LogSoftmax(a) => {
                    let gsum: f64 = g.data.iter().sum();
                    acc(&mut adj, *a, zip_map(&g, y, |g, ly| g - ly.exp() * gsum));
                }
                Op::Gather(a, i) => {
                    let src = self.value(*a);
                    let mut t = Tensor::zeros(src.rows, src.cols);
                    t.data[*i] = g.data[0];
                    acc(&mut adj, *a, t);
                }
                Op::Select(a, indices) => {
                    let src = self.value(*a);
                    let mut t = Tensor::zeros(src.rows, src.cols);
                    for (gv, &i) in g.data.iter().zip(indices) {
                        t.data[i] += gv;
                    }
                    acc(&mut adj, *a, t);
                }
                Op::Row(a, r) => {
                    let src = self.value(*a);
                    let mut t = Tensor::zeros(src.rows, src.cols);
                    t.data[r * src.cols..(r + 1) * src.cols].copy_from_slice(&g.data);
                    acc(&mut adj, *a, t);
                }
                Op::Sum(a) => {
                    let src = self.value(*a);
                    let t = Tensor { rows: src.rows, cols: src.cols, data: vec![g.data[0]; src.len()] };
                    acc(&mut adj, *a, t);
                }
                Op::Mean(a) => {
                    let src = self.value(*a);
                    let v = g.data[0] / src.len() as f64;
                    let t = Tensor { rows: src.rows, cols: src.cols, data: vec![v; src.len()] };
                    acc(&mut adj, *a, t);
                }
            }
        }
        Ok(Gradients { adjoints: adj })
    }
}

fn map(g: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor { rows: g.rows, cols: g.cols, data: g.data.iter().map(|x| f(*x)).collect() }
}

fn zip_map(g: &Tensor, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor {
        rows: g.rows,
        cols: g.cols,
        data: g.data.iter().zip(&other.data).map(|(a, b)| f(*a, *b)).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fd_check<F>(inputs: &[Tensor], build: F) -> f64
    where
        F: Fn(&mut Tape, &[Var]) -> Var,
    {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, &vars);
        let grads = tape.backward(out).unwrap();

        let eval = |perturbed: &[Tensor]| {
            let mut t = Tape::new();
            let vs: Vec<Var> = perturbed.iter().map(|x| t.leaf(x.clone())).collect();
            let o = build(&mut t, &vs);
            t.scalar_value(o)
        };
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for (k, input) in inputs.iter().enumerate() {
            let analytic = grads.get_or_zeros(vars[k], input.rows(), input.cols());
            for i in 0..input.len() {
                let mut plus = inputs.to_vec();
                plus[k].data_mut()[i] += h;
                let mut minus = inputs.to_vec();
                minus[k].data_mut()[i] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.data()[i];
                let err = (a - numeric).abs() / (a.abs().max(numeric.abs()).max(1e-3));
                worst = worst.max(err);
            }
        }
        worst
    }

    #[test]
    fn log_softmax_of_zeros_is_minus_log_two() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.0, 0.0]));
        let y = tape.log_softmax(x).unwrap();
        for v in tape.value(y).data() {
            assert!((v + 2f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn gathered_log_prob_is_non_positive() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![3.0, -1.0, 7.5, 2.0]));
        let y = tape.log_softmax(x).unwrap();
        let g = tape.gather(y, 2).unwrap();
        assert!(tape.scalar_value(g) <= 0.0);
    }

    #[test]
    fn identity_matmul_is_identity() {
        let a = Tensor::new(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let mut tape = Tape::new();
        let i = tape.leaf(Tensor::identity(3));
        let av = tape.leaf(a.clone());
        let out = tape.matmul(i, av).unwrap();
        assert_eq!(tape.value(out), &a);
    }

    #[test]
    fn square_derivative() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.square(x);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn log_softmax_gradient_sums_to_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.3, -1.2, 2.0]));
        let y = tape.log_softmax(x).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        // d/dx sum_k log_softmax_k = 1 - n*softmax, which sums to zero over x
        let total: f64 = g.get(x).unwrap().data().iter().sum();
        assert!(total.abs() < 1e-12);
        // each row of the Jacobian sums to zero
        for k in 0..3 {
            let mut t = Tape::new();
            let x = t.leaf(Tensor::vector(vec![0.3, -1.2, 2.0]));
            let y = t.log_softmax(x).unwrap();
            let e = t.gather(y, k).unwrap();
            let g = t.backward(e).unwrap();
            let row: f64 = g.get(x).unwrap().data().iter().sum();
            assert!(row.abs() < 1e-12);
        }
    }

    #[test]
    fn log_softmax_is_stable_for_large_inputs() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1e6, -1e6, 0.0, 999_999.0]));
        let y = tape.log_softmax(x).unwrap();
        assert!(tape.value(y).data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn shape_errors_are_reported() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(2, 3));
        let b = tape.leaf(Tensor::zeros(2, 3));
        assert!(matches!(tape.matmul(a, b), Err(Error::Shape { op: "matmul", .. })));
        let c = tape.leaf(Tensor::zeros(3, 2));
        assert!(matches!(tape.add(a, c), Err(Error::Shape { op: "add", .. })));
        assert!(tape.gather(a, 6).is_err());
    }

    #[test]
    fn non_scalar_backward_is_rejected() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(2, 1));
        assert!(matches!(tape.backward(a), Err(Error::NotScalar { rows: 2, cols: 1 })));
    }

    #[test]
    fn backward_is_deterministic() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::new(2, 2, vec![0.1, -0.4, 0.7, 0.2]).unwrap());
        let x = tape.leaf(Tensor::vector(vec![1.0, -2.0]));
        let h = tape.matmul(w, x).unwrap();
        let t = tape.tanh(h);
        let l = tape.log_softmax(t).unwrap();
        let o = tape.gather(l, 1).unwrap();
        let g1 = tape.backward(o).unwrap();
        let g2 = tape.backward(o).unwrap();
        assert_eq!(g1.get(w), g2.get(w));
    }

    #[test]
    fn three_layer_network_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut rand_t = |r: usize, c: usize| {
            Tensor::new(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
        };
        let inputs = vec![rand_t(5, 4), rand_t(5, 5), rand_t(3, 5), rand_t(4, 1)];
        let err = fd_check(&inputs, |t, v| {
            let h1 = t.matmul(v[0], v[3]).unwrap();
            let a1 = t.tanh(h1);
            let h2 = t.matmul(v[1], a1).unwrap();
            let a2 = t.relu(h2);
            let h3 = t.matmul(v[2], a2).unwrap();
            let l = t.log_softmax(h3).unwrap();
            let g = t.gather(l, 1).unwrap();
            t.square(g)
        });
        assert!(err <= 1e-4, "relative error {err}");
    }

    fn vec_strategy(n: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-2.0f64..2.0, n)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn every_op_matches_finite_differences(
            a in vec_strategy(6),
            b in vec_strategy(6),
            m in vec_strategy(6),
            pos in proptest::collection::vec(0.2f64..3.0, 6),
            idx in 0usize..6,
        ) {
            let ta = Tensor::new(3, 2, a).unwrap();
            let tb = Tensor::new(3, 2, b).unwrap();
            let tm = Tensor::new(2, 3, m).unwrap();
            let tp = Tensor::new(3, 2, pos).unwrap();
            let checks: Vec<(&str, f64)> = vec![
                ("add", fd_check(&[ta.clone(), tb.clone()], |t, v| { let x = t.add(v[0], v[1]).unwrap(); let y = t.mul(x, x).unwrap(); t.sum(y) })),
                ("sub", fd_check(&[ta.clone(), tb.clone()], |t, v| { let x = t.sub(v[0], v[1]).unwrap(); let y = t.square(x); t.mean(y) })),
                ("mul", fd_check(&[ta.clone(), tb.clone()], |t, v| { let x = t.mul(v[0], v[1]).unwrap(); t.sum(x) })),
                ("scale_shift_neg", fd_check(&[ta.clone()], |t, v| { let x = t.scale(v[0], -1.7); let y = t.shift(x, 0.3); let z = t.neg(y); let w = t.square(z); t.sum(w) })),
                ("matmul", fd_check(&[tm.clone(), ta.clone()], |t, v| { let x = t.matmul(v[0], v[1]).unwrap(); let y = t.tanh(x); t.sum(y) })),
                ("tanh", fd_check(&[ta.clone()], |t, v| { let x = t.tanh(v[0]); t.sum(x) })),
                ("relu", fd_check(&[ta.clone()], |t, v| { let x = t.relu(v[0]); let y = t.square(x); t.sum(y) })),
                ("log_softmax_gather", fd_check(&[ta.clone()], |t, v| { let x = t.log_softmax(v[0]).unwrap(); t.gather(x, idx).unwrap() })),
                ("select", fd_check(&[ta.clone()], |t, v| { let x = t.select(v[0], &[idx, (idx + 2) % 6, idx]).unwrap(); let y = t.log_softmax(x).unwrap(); t.gather(y, 0).unwrap() })),
                ("row", fd_check(&[ta.clone()], |t, v| { let x = t.row(v[0], idx % 3).unwrap(); let y = t.exp(x); t.sum(y) })),
                ("log", fd_check(&[tp.clone()], |t, v| { let x = t.log(v[0]); t.sum(x) })),
                ("exp", fd_check(&[ta.clone()], |t, v| { let x = t.exp(v[0]); t.mean(x) })),
            ];
            for (name, err) in checks {
                prop_assert!(err <= 1e-4, "{} relative error {}", name, err);
            }
        }
    }
}
