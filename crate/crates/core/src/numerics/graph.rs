//! Reverse-mode gradient tape over [`Tensor`]s.
//!
//! Operations evaluate eagerly and record just enough to replay the chain
//! rule backwards. Only the primitives the model needs are supported:
//! affine maps, elementwise SiLU/exp/log/square, row softmax, LogSumExp,
//! sums and column plumbing. Gradients are carried in `f64`.

use super::{Scalar, Tensor};
use crate::error::{ensure, Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Silu(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    SoftmaxRows(Var),
    LogSumExpRows(Var),
    Sum(Var),
    Mean(Var),
    ConcatCols(Var, Var),
    Column(Var, usize),
    Reshape(Var),
}

struct Node<S> {
    value: Tensor<S>,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf whose gradient is wanted.
    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.push_leaf(value, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, name: &'static str, value: Tensor<S>, op: Op, inputs: &[Var]) -> Result<Var> {
        if let Some(bad) = value.data().iter().find(|x| !x.is_finite()) {
            return Err(Error::Numeric {
                op: name,
                detail: format!("produced {bad} (output shape {:?})", value.shape()),
            });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn unary(&mut self, name: &'static str, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let out = self.value(a).map(|x| S::cast(f(x.f64())));
        self.push(name, out, op, &[a])
    }

    fn same_shape(&self, name: &str, a: Var, b: Var) -> Result<()> {
        ensure!(
            self.shape(a) == self.shape(b),
            "{name}: shapes {:?} and {:?} differ",
            self.shape(a),
            self.shape(b)
        );
        Ok(())
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| S::cast(f(x.f64(), y.f64())))
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        self.push(name, out, op, &[a, b])
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        ensure!(k == k2, "matmul: inner dimensions {k} and {k2} differ");
        let out = matmul_forward(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push("matmul", Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), &[a, b])
    }

    /// Adds a length-`n` bias to every row of an `[m, n]` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        ensure!(
            self.shape(bias) == [n],
            "add_row: bias shape {:?} does not match {n} columns",
            self.shape(bias)
        );
        let (va, vb) = (self.value(a).data(), self.value(bias).data());
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            data.extend((0..n).map(|j| S::cast(va[i * n + j].f64() + vb[j].f64())));
        }
        self.push("add_row", Tensor::new(vec![m, n], data)?, Op::AddRow(a, bias), &[a, bias])
    }

    /// Affine map `x W + b` with `W: [in, out]`.
    pub fn affine(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let xw = self.matmul(x, weight)?;
        self.add_row(xw, bias)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("scale", a, Op::Scale(a, c), |x| c * x)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("add_scalar", a, Op::AddScalar(a), |x| x + c)
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.unary("silu", a, Op::Silu(a), |x| x * sigmoid(x))
    }

    /// `log(1 + e^x)`.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary("softplus", a, Op::Softplus(a), |x| x.max(0.0) + (-x.abs()).exp().ln_1p())
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary("log", a, Op::Log(a), f64::ln)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary("square", a, Op::Square(a), |x| x * x)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        let va = self.value(a).data();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = &va[i * n..(i + 1) * n];
            let lse = super::tensor::logsumexp_f64(row.iter().map(|x| x.f64()));
            data.extend(row.iter().map(|x| S::cast((x.f64() - lse).exp())));
        }
        self.push("softmax_rows", Tensor::new(vec![m, n], data)?, Op::SoftmaxRows(a), &[a])
    }

    /// Row-wise LogSumExp: `[m, n] -> [m]`.
    pub fn logsumexp_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        ensure!(n > 0, "logsumexp_rows: empty rows");
        let va = self.value(a).data();
        let data = (0..m)
            .map(|i| S::cast(super::tensor::logsumexp_f64(va[i * n..(i + 1) * n].iter().map(|x| x.f64()))))
            .collect();
        self.push("logsumexp_rows", Tensor::new(vec![m], data)?, Op::LogSumExpRows(a), &[a])
    }

    /// LogSumExp of a vector: `[n] -> []`.
    pub fn logsumexp(&mut self, a: Var) -> Result<Var> {
        let n = match self.shape(a) {
            &[n] => n,
            other => return Err(Error::contract(format!("logsumexp expects a vector, got {other:?}"))),
        };
        ensure!(n > 0, "logsumexp of an empty vector");
        let row = self.reshape(a, &[1, n])?;
        let lse = self.logsumexp_rows(row)?;
        self.reshape(lse, &[])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum_f64();
        self.push("sum", Tensor::scalar(S::cast(s)), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        ensure!(n > 0, "mean of an empty tensor");
        let s = self.value(a).sum_f64() / n as f64;
        self.push("mean", Tensor::scalar(S::cast(s)), Op::Mean(a), &[a])
    }

    /// `[m, p] ++ [m, q] -> [m, p + q]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, p) = self.value(a).dims2()?;
        let (m2, q) = self.value(b).dims2()?;
        ensure!(m == m2, "concat_cols: row counts {m} and {m2} differ");
        let (va, vb) = (self.value(a), self.value(b));
        let mut data = Vec::with_capacity(m * (p + q));
        for i in 0..m {
            data.extend_from_slice(va.row(i));
            data.extend_from_slice(vb.row(i));
        }
        self.push("concat_cols", Tensor::new(vec![m, p + q], data)?, Op::ConcatCols(a, b), &[a, b])
    }

    /// Column `j` of an `[m, n]` matrix as a length-`m` vector.
    pub fn column(&mut self, a: Var, j: usize) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        ensure!(j < n, "column {j} out of range for {n} columns");
        let va = self.value(a).data();
        let data = (0..m).map(|i| va[i * n + j]).collect();
        self.push("column", Tensor::new(vec![m], data)?, Op::Column(a, j), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        self.push("reshape", out, Op::Reshape(a), &[a])
    }

    /// Gradients of the scalar `output` with respect to every node.
    pub fn backward(&self, output: Var) -> Result<Gradients<S>> {
        let out_val = self.value(output);
        ensure!(
            out_val.len() == 1,
            "backward needs a scalar output, got shape {:?}",
            out_val.shape()
        );
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![1.0]);

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &upstream, &mut grads);
            grads[idx] = Some(upstream);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            _scalar: std::marker::PhantomData,
        })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node<S>, up: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        match node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.nodes[a.0].value.dims2().expect("checked in forward");
                let n = self.nodes[b.0].value.shape()[1];
                if self.wants(a) {
                    let vb = val(b);
                    let mut g = vec![0.0; m * k];
                    for i in 0..m {
                        let urow = &up[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &vb[p * n..(p + 1) * n];
                            g[i * k + p] = urow.iter().zip(brow).map(|(u, b)| u * b.f64()).sum();
                        }
                    }
                    accumulate(grads, a, g);
                }
                if self.wants(b) {
                    let va = val(a);
                    let mut g = vec![0.0; k * n];
                    for i in 0..m {
                        let urow = &up[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = va[i * k + p].f64();
                            if aip == 0.0 {
                                continue;
                            }
                            let grow = &mut g[p * n..(p + 1) * n];
                            for (gj, u) in grow.iter_mut().zip(urow) {
                                *gj += aip * u;
                            }
                        }
                    }
                    accumulate(grads, b, g);
                }
            }
            Op::AddRow(a, bias) => {
                if self.wants(a) {
                    accumulate(grads, a, up.to_vec());
                }
                if self.wants(bias) {
                    let n = self.nodes[bias.0].value.len();
                    let mut g = vec![0.0; n];
                    for row in up.chunks(n) {
                        for (gj, u) in g.iter_mut().zip(row) {
                            *gj += u;
                        }
                    }
                    accumulate(grads, bias, g);
                }
            }
            Op::Add(a, b) => {
                if self.wants(a) {
                    accumulate(grads, a, up.to_vec());
                }
                if self.wants(b) {
                    accumulate(grads, b, up.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(a) {
                    accumulate(grads, a, up.to_vec());
                }
                if self.wants(b) {
                    accumulate(grads, b, up.iter().map(|u| -u).collect());
                }
            }
            Op::Mul(a, b) => {
                if self.wants(a) {
                    let g = up.iter().zip(val(b)).map(|(u, y)| u * y.f64()).collect();
                    accumulate(grads, a, g);
                }
                if self.wants(b) {
                    let g = up.iter().zip(val(a)).map(|(u, x)| u * x.f64()).collect();
                    accumulate(grads, b, g);
                }
            }
            Op::Scale(a, c) => accumulate(grads, a, up.iter().map(|u| c * u).collect()),
            Op::AddScalar(a) | Op::Reshape(a) => accumulate(grads, a, up.to_vec()),
            Op::Silu(a) => {
                let g = up
                    .iter()
                    .zip(val(a))
                    .map(|(u, x)| {
                        let x = x.f64();
                        let s = sigmoid(x);
                        u * s * (1.0 + x * (1.0 - s))
                    })
                    .collect();
                accumulate(grads, a, g);
            }
            Op::Softplus(a) => {
                let g = up.iter().zip(val(a)).map(|(u, x)| u * sigmoid(x.f64())).collect();
                accumulate(grads, a, g);
            }
            Op::Exp(a) => {
                let g = up.iter().zip(node.value.data()).map(|(u, y)| u * y.f64()).collect();
                accumulate(grads, a, g);
            }
            Op::Log(a) => {
                let g = up.iter().zip(val(a)).map(|(u, x)| u / x.f64()).collect();
                accumulate(grads, a, g);
            }
            Op::Square(a) => {
                let g = up.iter().zip(val(a)).map(|(u, x)| 2.0 * x.f64() * u).collect();
                accumulate(grads, a, g);
            }
            Op::SoftmaxRows(a) => {
                let n = node.value.shape()[1];
                let y = node.value.data();
                let mut g = Vec::with_capacity(up.len());
                for (urow, yrow) in up.chunks(n).zip(y.chunks(n)) {
                    let dot: f64 = urow.iter().zip(yrow).map(|(u, y)| u * y.f64()).sum();
                    g.extend(urow.iter().zip(yrow).map(|(u, y)| y.f64() * (u - dot)));
                }
                accumulate(grads, a, g);
            }
            Op::LogSumExpRows(a) => {
                let x = val(a);
                let n = self.nodes[a.0].value.shape()[1];
                let mut g = Vec::with_capacity(x.len());
                for (i, xrow) in x.chunks(n).enumerate() {
                    // recomputed in f64; the stored output was rounded to S
                    let l = super::tensor::logsumexp_f64(xrow.iter().map(|v| v.f64()));
                    g.extend(xrow.iter().map(|v| up[i] * (v.f64() - l).exp()));
                }
                accumulate(grads, a, g);
            }
            Op::Sum(a) => {
                let n = self.nodes[a.0].value.len();
                accumulate(grads, a, vec![up[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.len();
                accumulate(grads, a, vec![up[0] / n as f64; n]);
            }
            Op::ConcatCols(a, b) => {
                let p = self.nodes[a.0].value.shape()[1];
                let q = self.nodes[b.0].value.shape()[1];
                if self.wants(a) {
                    let g = up.chunks(p + q).flat_map(|r| r[..p].to_vec()).collect();
                    accumulate(grads, a, g);
                }
                if self.wants(b) {
                    let g = up.chunks(p + q).flat_map(|r| r[p..].to_vec()).collect();
                    accumulate(grads, b, g);
                }
            }
            Op::Column(a, j) => {
                let n = self.nodes[a.0].value.shape()[1];
                let mut g = vec![0.0; up.len() * n];
                for (i, u) in up.iter().enumerate() {
                    g[i * n + j] = *u;
                }
                accumulate(grads, a, g);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.iter_mut().zip(g) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g),
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

/// Row-major matrix product with `f64` accumulation.
pub(crate) fn matmul_forward<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = Vec::with_capacity(m * n);
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|x| *x = 0.0);
        for p in 0..k {
            let aip = a[i * k + p].f64();
            if aip == 0.0 {
                continue;
            }
            for (x, bj) in acc.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *x += aip * bj.f64();
            }
        }
        out.extend(acc.iter().map(|&x| S::cast(x)));
    }
    out
}

/// Result of [`Graph::backward`].
pub struct Gradients<S> {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    _scalar: std::marker::PhantomData<S>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient with respect to `v`; zeros if `v` does not reach the output.
    pub fn get(&self, v: Var) -> Tensor<S> {
        let shape = &self.shapes[v.0];
        match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => Tensor::new(shape.clone(), g.iter().map(|&x| S::cast(x)).collect())
                .expect("gradient shape tracks value shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// Full-precision gradient buffer, row-major.
    pub fn get_f64(&self, v: Var) -> Vec<f64> {
        match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => vec![0.0; self.shapes[v.0].iter().product()],
        }
    }
}

/// Evaluates a scalar expression and its gradient with respect to `inputs`.
///
/// `f` receives a fresh graph and one `Var` per input, in order.
pub fn value_and_grad<S, F>(f: F, inputs: &[Tensor<S>]) -> Result<(S, Vec<Tensor<S>>)>
where
    S: Scalar,
    F: FnOnce(&mut Graph<S>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let value = g.value(out).item()?;
    Ok((value, vars.iter().map(|&v| grads.get(v)).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_of_three() {
        let x = Tensor::scalar(3.0_f64);
        let (v, g) = value_and_grad(
            |g, xs| {
                let y = g.mul(xs[0], xs[0])?;
                g.sum(y)
            },
            &[x],
        )
        .unwrap();
        assert_eq!(v, 9.0);
        assert_eq!(g[0].item().unwrap(), 6.0);
    }

    #[test]
    fn logsumexp_tied_logits() {
        let x = Tensor::vector(vec![0.0_f64]);
        let (v, g) = value_and_grad(
            |g, xs| {
                let zero = g.constant(Tensor::vector(vec![0.0]));
                let both = g.reshape(xs[0], &[1, 1])?;
                let z = g.reshape(zero, &[1, 1])?;
                let row = g.concat_cols(both, z)?;
                let row = g.reshape(row, &[2])?;
                g.logsumexp(row)
            },
            &[x],
        )
        .unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-15);
        assert!((g[0].data()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let x = Tensor::vector(vec![1.0_f32, 2.0]);
        let err = value_and_grad(|g, xs| g.square(xs[0]), &[x]).unwrap_err();
        assert!(matches!(err, Error::Contract(_)), "{err}");
    }

    #[test]
    fn nan_names_the_operation() {
        let x = Tensor::vector(vec![-1.0_f32]);
        let err = value_and_grad(
            |g, xs| {
                let l = g.log(xs[0])?;
                g.sum(l)
            },
            &[x],
        )
        .unwrap_err();
        match err {
            Error::Numeric { op, .. } => assert_eq!(op, "log"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn constants_get_no_gradient_work() {
        let mut g = Graph::<f32>::new();
        let w = g.constant(Tensor::matrix(2, 2, vec![1., 2., 3., 4.]).unwrap());
        let x = g.param(Tensor::matrix(1, 2, vec![1., 1.]).unwrap());
        let y = g.matmul(x, w).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).data(), &[3., 7.]);
        assert_eq!(grads.get(w).data(), &[0., 0., 0., 0.]);
    }
}
