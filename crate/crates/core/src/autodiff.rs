//! Reverse-mode differentiation over small dense networks.
//!
//! A [`Tape`] records vector-valued nodes. Dense layers are a single fused
//! node whose weights live in an external flat parameter array, so the tape
//! grows with the number of layers rather than the number of weights.
//! Elementwise binary ops broadcast operands of length one.
//!
//! ```
//! use occufield::autodiff::Tape;
//!
//! let mut tape = Tape::detached();
//! let x = tape.input(&[3.0]);
//! let y = tape.square(x);
//! let out = tape.scalar(y).unwrap();
//! let grads = tape.backward(out).unwrap();
//! assert_eq!(grads.wrt(x), vec![6.0]);
//! ```

use crate::{logistic, Error, Result, Vec3};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    id: usize,
    len: usize,
}

impl Var {
    pub fn id(self) -> usize {
        self.id
    }

    pub fn len(self) -> usize {
        self.len
    }

    pub fn is_empty(self) -> bool {
        self.len == 0
    }
}

/// A scalar node together with its primal value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualValue {
    pub primal: f64,
    pub node: Var,
}

/// Location of a dense layer inside a flat parameter array. Weights are
/// stored row-major (`rows x cols`) starting at `weight`, followed by
/// `rows` bias entries starting at `bias`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenseBlock {
    pub weight: usize,
    pub bias: usize,
    pub rows: usize,
    pub cols: usize,
}

impl DenseBlock {
    /// Lay out a `rows x cols` layer at `offset`; returns the block and the
    /// next free offset.
    pub fn at(offset: usize, rows: usize, cols: usize) -> (Self, usize) {
        let block = DenseBlock {
            weight: offset,
            bias: offset + rows * cols,
            rows,
            cols,
        };
        (block, offset + rows * cols + rows)
    }

    pub fn param_count(&self) -> usize {
        self.rows * self.cols + self.rows
    }

    pub fn weights<'a>(&self, params: &'a [f64]) -> &'a [f64] {
        &params[self.weight..self.weight + self.rows * self.cols]
    }

    pub fn biases<'a>(&self, params: &'a [f64]) -> &'a [f64] {
        &params[self.bias..self.bias + self.rows]
    }

    /// `out = W x (+ b)`.
    pub fn apply(&self, params: &[f64], x: &[f64], with_bias: bool, out: &mut Vec<f64>) {
        debug_assert_eq!(x.len(), self.cols);
        let w = self.weights(params);
        out.clear();
        out.extend(w.chunks_exact(self.cols).map(|row| dot(row, x)));
        if with_bias {
            for (o, b) in out.iter_mut().zip(self.biases(params)) {
                *o += b;
            }
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Constant,
    Param { offset: usize },
    Affine { input: usize, block: DenseBlock, bias: bool },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    Shift(usize),
    Sin(usize),
    Cos(usize),
    Logistic(usize),
    LogSigmoid(usize),
    Ln(usize),
    Exp(usize),
    Square(usize),
    LeakyRelu(usize, f64),
    Clamp(usize, f64, f64),
    Sum(usize),
    Norm(usize),
    Slice(usize, usize),
    Concat(Vec<usize>),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TapeState {
    Recording,
    Differentiated,
}

/// Computation graph recorded in topological order.
#[derive(Debug, Clone)]
pub struct Tape<'p> {
    params: &'p [f64],
    nodes: Vec<Node>,
    state: TapeState,
}

/// Result of a reverse sweep: parameter gradients and per-node adjoints.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: Vec<f64>,
    adjoints: Adjoints,
}

impl Gradients {
    /// Adjoint of `var` (zeros when the node was unreachable).
    pub fn wrt(&self, var: Var) -> Vec<f64> {
        self.adjoints.wrt(var)
    }
}

/// Per-node adjoints left behind by a reverse sweep.
#[derive(Debug, Clone)]
pub struct Adjoints(Vec<Vec<f64>>);

impl Adjoints {
    pub fn wrt(&self, var: Var) -> Vec<f64> {
        match self.0.get(var.id) {
            Some(a) if !a.is_empty() => a.clone(),
            _ => vec![0.0; var.len],
        }
    }
}

impl Tape<'static> {
    /// A tape without a parameter registry.
    pub fn detached() -> Self {
        Tape::new(&[])
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p [f64]) -> Self {
        Tape {
            params,
            nodes: Vec::with_capacity(256),
            state: TapeState::Recording,
        }
    }

    pub fn params(&self) -> &'p [f64] {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.id].value
    }

    fn push(&mut self, op: Op, value: Vec<f64>) -> Var {
        let var = Var {
            id: self.nodes.len(),
            len: value.len(),
        };
        self.nodes.push(Node { op, value });
        var
    }

    /// Differentiable leaf; its adjoint is available after `backward`.
    pub fn input(&mut self, values: &[f64]) -> Var {
        self.push(Op::Input, values.to_vec())
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, values: &[f64]) -> Var {
        self.push(Op::Constant, values.to_vec())
    }

    /// Vector view of `len` registered parameters starting at `offset`.
    pub fn param(&mut self, offset: usize, len: usize) -> Var {
        let value = self.params[offset..offset + len].to_vec();
        self.push(Op::Param { offset }, value)
    }

    /// Fused `W x + b` (or `W x` when `bias` is false).
    pub fn affine(&mut self, x: Var, block: DenseBlock, bias: bool) -> Var {
        assert_eq!(x.len, block.cols, "affine input width");
        let mut out = Vec::with_capacity(block.rows);
        block.apply(self.params, &self.nodes[x.id].value, bias, &mut out);
        self.push(
            Op::Affine {
                input: x.id,
                block,
                bias,
            },
            out,
        )
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let (va, vb) = (&self.nodes[a.id].value, &self.nodes[b.id].value);
        match (va.len(), vb.len()) {
            (n, m) if n == m => va.iter().zip(vb).map(|(x, y)| f(*x, *y)).collect(),
            (1, _) => vb.iter().map(|y| f(va[0], *y)).collect(),
            (_, 1) => va.iter().map(|x| f(*x, vb[0])).collect(),
            (n, m) => panic!("operand lengths {n} and {m} do not broadcast"),
        }
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.nodes[a.id].value.iter().map(|x| f(*x)).collect();
        self.push(op, value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary(a, b, |x, y| x + y);
        self.push(Op::Add(a.id, b.id), v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary(a, b, |x, y| x - y);
        self.push(Op::Sub(a.id, b.id), v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary(a, b, |x, y| x * y);
        self.push(Op::Mul(a.id, b.id), v)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary(a, b, |x, y| x / y);
        self.push(Op::Div(a.id, b.id), v)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a.id, c), |x| c * x)
    }

    pub fn shift(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Shift(a.id), |x| x + c)
    }

    /// `1 - a`.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let neg = self.scale(a, -1.0);
        self.shift(neg, 1.0)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sin(a.id), f64::sin)
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, Op::Cos(a.id), f64::cos)
    }

    pub fn logistic(&mut self, a: Var) -> Var {
        self.unary(a, Op::Logistic(a.id), logistic)
    }

    /// `log(logistic(a)) = -log(1 + exp(-a))`, evaluated stably.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::LogSigmoid(a.id), log_sigmoid)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Op::Ln(a.id), f64::ln)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a.id), f64::exp)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a.id), |x| x * x)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(a, Op::LeakyRelu(a.id, slope), |x| if x > 0.0 { x } else { slope * x })
    }

    /// Clamp with zero gradient outside `[lo, hi]`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp(a.id, lo, hi), |x| x.clamp(lo, hi))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.id].value.iter().sum();
        self.push(Op::Sum(a.id), vec![s])
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let p = self.mul(a, b);
        self.sum(p)
    }

    /// Euclidean norm; the gradient at the origin is taken as zero.
    pub fn norm(&mut self, a: Var) -> Var {
        let n = self.nodes[a.id].value.iter().map(|x| x * x).sum::<f64>().sqrt();
        self.push(Op::Norm(a.id), vec![n])
    }

    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.nodes[a.id].value[start..start + len].to_vec();
        self.push(Op::Slice(a.id, start), v)
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let v: Vec<f64> = parts
            .iter()
            .flat_map(|p| self.nodes[p.id].value.iter().copied())
            .collect();
        self.push(Op::Concat(parts.iter().map(|p| p.id).collect()), v)
    }

    /// Wrap a length-one node as a [`DualValue`].
    pub fn scalar(&self, v: Var) -> Result<DualValue> {
        if v.len != 1 {
            return Err(Error::DimensionMismatch {
                expected: 1,
                found: v.len,
            });
        }
        Ok(DualValue {
            primal: self.nodes[v.id].value[0],
            node: v,
        })
    }

    /// Allow another reverse sweep over the same recording.
    pub fn reset(&mut self) {
        self.state = TapeState::Recording;
    }

    /// Gradient of a scalar output with respect to every registered
    /// parameter and every node.
    pub fn backward(&mut self, output: DualValue) -> Result<Gradients> {
        let mut params = vec![0.0; self.params.len()];
        let adjoints = self.backward_into(output.node, &[1.0], &mut params)?;
        Ok(Gradients { params, adjoints })
    }

    /// Reverse sweep seeded with `seed` at `output`. Parameter gradients
    /// are accumulated into `param_grads`.
    pub fn backward_into(
        &mut self,
        output: Var,
        seed: &[f64],
        param_grads: &mut [f64],
    ) -> Result<Adjoints> {
        if self.state == TapeState::Differentiated {
            return Err(Error::TapeState("backward already ran; call reset() first"));
        }
        if seed.len() != output.len {
            return Err(Error::DimensionMismatch {
                expected: output.len,
                found: seed.len(),
            });
        }
        if param_grads.len() != self.params.len() {
            return Err(Error::DimensionMismatch {
                expected: self.params.len(),
                found: param_grads.len(),
            });
        }
        self.state = TapeState::Differentiated;

        let mut adj: Vec<Vec<f64>> = vec![Vec::new(); output.id + 1];
        adj[output.id] = seed.to_vec();

        for id in (0..=output.id).rev() {
            if adj[id].is_empty() {
                continue;
            }
            let g = std::mem::take(&mut adj[id]);
            let node = &self.nodes[id];
            if node.value.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { node: id });
            }
            self.propagate(id, &g, &mut adj, param_grads);
            adj[id] = g;
        }
        Ok(Adjoints(adj))
    }

    fn propagate(&self, id: usize, g: &[f64], adj: &mut [Vec<f64>], param_grads: &mut [f64]) {
        let node = &self.nodes[id];
        let val = |i: usize| -> &[f64] { &self.nodes[i].value };

        // Accumulate `contrib` into the adjoint of node `target`, summing
        // over broadcast dimensions when `target` has length one.
        fn acc(adj: &mut [Vec<f64>], target: usize, len: usize, contrib: impl Iterator<Item = f64>) {
            let slot = &mut adj[target];
            if slot.is_empty() {
                slot.resize(len, 0.0);
            }
            if len == 1 {
                slot[0] += contrib.sum::<f64>();
            } else {
                for (s, c) in slot.iter_mut().zip(contrib) {
                    *s += c;
                }
            }
        }
        // Broadcast-aware element accessor.
        fn at(v: &[f64], i: usize) -> f64 {
            if v.len() == 1 {
                v[0]
            } else {
                v[i]
            }
        }

        let n = g.len();
        match &node.op {
            Op::Input | Op::Constant => {}
            Op::Param { offset } => {
                for (p, gi) in param_grads[*offset..*offset + n].iter_mut().zip(g) {
                    *p += gi;
                }
            }
            Op::Affine { input, block, bias } => {
                let x = val(*input);
                let w = block.weights(self.params);
                let cols = block.cols;
                for (r, gr) in g.iter().enumerate() {
                    if *gr == 0.0 {
                        continue;
                    }
                    let row = &mut param_grads[block.weight + r * cols..block.weight + (r + 1) * cols];
                    for (p, xi) in row.iter_mut().zip(x) {
                        *p += gr * xi;
                    }
                }
                if *bias {
                    for (p, gi) in param_grads[block.bias..block.bias + block.rows].iter_mut().zip(g) {
                        *p += gi;
                    }
                }
                if !matches!(self.nodes[*input].op, Op::Constant) {
                    let mut gx = vec![0.0; cols];
                    for (row, gr) in w.chunks_exact(cols).zip(g) {
                        for (o, wi) in gx.iter_mut().zip(row) {
                            *o += gr * wi;
                        }
                    }
                    acc(adj, *input, cols, gx.into_iter());
                }
            }
            Op::Add(a, b) => {
                let (la, lb) = (val(*a).len(), val(*b).len());
                acc(adj, *a, la, g.iter().copied());
                acc(adj, *b, lb, g.iter().copied());
            }
            Op::Sub(a, b) => {
                let (la, lb) = (val(*a).len(), val(*b).len());
                acc(adj, *a, la, g.iter().copied());
                acc(adj, *b, lb, g.iter().map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(adj, *a, va.len(), (0..n).map(|i| g[i] * at(vb, i)));
                acc(adj, *b, vb.len(), (0..n).map(|i| g[i] * at(va, i)));
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(adj, *a, va.len(), (0..n).map(|i| g[i] / at(vb, i)));
                acc(
                    adj,
                    *b,
                    vb.len(),
                    (0..n).map(|i| -g[i] * at(va, i) / (at(vb, i) * at(vb, i))),
                );
            }
            Op::Scale(a, c) => acc(adj, *a, n, g.iter().map(|x| c * x)),
            Op::Shift(a) => acc(adj, *a, n, g.iter().copied()),
            Op::Sin(a) => {
                let x = val(*a);
                acc(adj, *a, n, (0..n).map(|i| g[i] * x[i].cos()));
            }
            Op::Cos(a) => {
                let x = val(*a);
                acc(adj, *a, n, (0..n).map(|i| -g[i] * x[i].sin()));
            }
            Op::Logistic(a) => {
                let y = &node.value;
                acc(adj, *a, n, (0..n).map(|i| g[i] * y[i] * (1.0 - y[i])));
            }
            Op::LogSigmoid(a) => {
                let x = val(*a);
                acc(adj, *a, n, (0..n).map(|i| g[i] * logistic(-x[i])));
            }
            Op::Ln(a) => {
                let x = val(*a);
                acc(adj, *a, n, (0..n).map(|i| g[i] / x[i]));
            }
            Op::Exp(a) => {
                let y = &node.value;
                acc(adj, *a, n, (0..n).map(|i| g[i] * y[i]));
            }
            Op::Square(a) => {
                let x = val(*a);
                acc(adj, *a, n, (0..n).map(|i| 2.0 * g[i] * x[i]));
            }
            Op::LeakyRelu(a, slope) => {
                let x = val(*a);
                acc(adj, *a, n, (0..n).map(|i| if x[i] > 0.0 { g[i] } else { slope * g[i] }));
            }
            Op::Clamp(a, lo, hi) => {
                let x = val(*a);
                acc(
                    adj,
                    *a,
                    n,
                    (0..n).map(|i| if x[i] < *lo || x[i] > *hi { 0.0 } else { g[i] }),
                );
            }
            Op::Sum(a) => {
                let la = val(*a).len();
                acc(adj, *a, la, std::iter::repeat_n(g[0], la));
            }
            Op::Norm(a) => {
                let x = val(*a);
                let norm = node.value[0];
                let scale = if norm > 0.0 { g[0] / norm } else { 0.0 };
                acc(adj, *a, x.len(), x.iter().map(|xi| scale * xi));
            }
            Op::Slice(a, start) => {
                let la = val(*a).len();
                let slot = &mut adj[*a];
                if slot.is_empty() {
                    slot.resize(la, 0.0);
                }
                for (s, gi) in slot[*start..*start + n].iter_mut().zip(g) {
                    *s += gi;
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let lp = val(*p).len();
                    acc(adj, *p, lp, g[offset..offset + lp].iter().copied());
                    offset += lp;
                }
            }
        }
    }
}

/// Stable `-log(1 + exp(-u))`.
pub fn log_sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        -(-u).exp().ln_1p()
    } else {
        u - u.exp().ln_1p()
    }
}

/// Gradient of `output` with respect to position inputs. `inputs` must
/// cover exactly three coordinates (one length-3 node or three scalars).
pub fn grad_wrt_input(tape: &mut Tape<'_>, output: DualValue, inputs: &[Var]) -> Result<Vec3> {
    let total: usize = inputs.iter().map(|v| v.len).sum();
    if total != 3 {
        return Err(Error::DimensionMismatch {
            expected: 3,
            found: total,
        });
    }
    let mut scratch = vec![0.0; tape.params.len()];
    let adj = tape.backward_into(output.node, &[1.0], &mut scratch)?;
    let g: Vec<f64> = inputs.iter().flat_map(|v| adj.wrt(*v)).collect();
    Ok(Vec3::new(g[0], g[1], g[2]))
}

/// `params <- params - lr * grads`.
pub fn sgd_step(params: &mut [f64], grads: &[f64], learning_rate: f64) -> Result<()> {
    check_step(params, grads, learning_rate)?;
    for (p, g) in params.iter_mut().zip(grads) {
        *p -= learning_rate * g;
    }
    Ok(())
}

fn check_step(params: &[f64], grads: &[f64], learning_rate: f64) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::DimensionMismatch {
            expected: params.len(),
            found: grads.len(),
        });
    }
    if !(learning_rate > 0.0) {
        return Err(Error::Config(format!("learning rate must be positive, got {learning_rate}")));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric {
            what: format!("gradient entry {i}"),
        });
    }
    Ok(())
}

/// Stochastic gradient descent with optional heavy-ball momentum.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(learning_rate: f64, momentum: f64, n_params: usize) -> Self {
        Sgd {
            learning_rate,
            momentum,
            velocity: vec![0.0; n_params],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if self.momentum == 0.0 {
            return sgd_step(params, grads, self.learning_rate);
        }
        check_step(params, grads, self.learning_rate)?;
        for ((p, g), v) in params.iter_mut().zip(grads).zip(self.velocity.iter_mut()) {
            *v = self.momentum * *v + g;
            *p -= self.learning_rate * *v;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    fn unary_grad(x: f64, build: impl Fn(&mut Tape<'static>, Var) -> Var) -> f64 {
        let mut tape = Tape::detached();
        let v = tape.input(&[x]);
        let y = build(&mut tape, v);
        let out = tape.scalar(y).unwrap();
        tape.backward(out).unwrap().wrt(v)[0]
    }

    #[test]
    fn sin_at_zero() {
        assert_eq!(unary_grad(0.0, |t, v| t.sin(v)), 1.0);
    }

    #[test]
    fn square_at_three() {
        assert_eq!(unary_grad(3.0, |t, v| t.mul(v, v)), 6.0);
        assert_eq!(unary_grad(3.0, |t, v| t.square(v)), 6.0);
    }

    #[test]
    fn primitives_match_finite_differences() {
        let h = 1e-5;
        let cases: Vec<(f64, Box<dyn Fn(f64) -> f64>, Box<dyn Fn(&mut Tape<'static>, Var) -> Var>)> = vec![
            (0.7, Box::new(f64::sin), Box::new(|t, v| t.sin(v))),
            (0.7, Box::new(f64::cos), Box::new(|t, v| t.cos(v))),
            (-1.3, Box::new(logistic), Box::new(|t, v| t.logistic(v))),
            (-1.3, Box::new(log_sigmoid), Box::new(|t, v| t.log_sigmoid(v))),
            (2.1, Box::new(f64::ln), Box::new(|t, v| t.ln(v))),
            (0.4, Box::new(f64::exp), Box::new(|t, v| t.exp(v))),
            (
                0.4,
                Box::new(|x| x * (x + 2.0)),
                Box::new(|t, v| {
                    let s = t.shift(v, 2.0);
                    t.mul(v, s)
                }),
            ),
            (
                0.4,
                Box::new(|x| x / (1.0 + x * x)),
                Box::new(|t, v| {
                    let s = t.square(v);
                    let d = t.shift(s, 1.0);
                    t.div(v, d)
                }),
            ),
            (-0.5, Box::new(|x| if x > 0.0 { x } else { 0.2 * x }), Box::new(|t, v| t.leaky_relu(v, 0.2))),
        ];
        for (x, f, build) in cases {
            let g = unary_grad(x, build);
            let expected = fd(f, x, h);
            assert!((g - expected).abs() / expected.abs().max(1e-8) < 1e-6, "{g} vs {expected}");
        }
    }

    #[test]
    fn affine_gradients() {
        // 2x3 layer, params laid out [W (6), b (2)].
        let params = [0.5, -1.0, 2.0, 0.25, 0.75, -0.5, 0.1, -0.2];
        let (block, end) = DenseBlock::at(0, 2, 3);
        assert_eq!(end, 8);
        let x0 = [1.0, 2.0, -1.0];
        let eval = |p: &[f64], x: &[f64]| {
            let mut out = Vec::new();
            block.apply(p, x, true, &mut out);
            out.iter().map(|v| v.sin()).sum::<f64>()
        };
        let mut tape = Tape::new(&params);
        let x = tape.input(&x0);
        let a = tape.affine(x, block, true);
        let s = tape.sin(a);
        let y = tape.sum(s);
        let out = tape.scalar(y).unwrap();
        assert!((out.primal - eval(&params, &x0)).abs() < 1e-15);
        let grads = tape.backward(out).unwrap();
        let h = 1e-5;
        for i in 0..params.len() {
            let mut p = params;
            p[i] += h;
            let up = eval(&p, &x0);
            p[i] -= 2.0 * h;
            let down = eval(&p, &x0);
            let f = (up - down) / (2.0 * h);
            assert!((grads.params[i] - f).abs() / f.abs().max(1e-8) < 1e-6);
        }
        let gx = grads.wrt(x);
        for i in 0..3 {
            let mut xp = x0;
            xp[i] += h;
            let up = eval(&params, &xp);
            xp[i] -= 2.0 * h;
            let down = eval(&params, &xp);
            let f = (up - down) / (2.0 * h);
            assert!((gx[i] - f).abs() / f.abs().max(1e-8) < 1e-6);
        }
    }

    #[test]
    fn unreachable_nodes_get_zero() {
        let params = [1.0, 2.0];
        let mut tape = Tape::new(&params);
        let p = tape.param(0, 1);
        let _unused = tape.param(1, 1);
        let y = tape.square(p);
        let out = tape.scalar(y).unwrap();
        let g = tape.backward(out).unwrap();
        assert_eq!(g.params, vec![2.0, 0.0]);
    }

    #[test]
    fn second_backward_is_rejected() {
        let mut tape = Tape::detached();
        let x = tape.input(&[1.0]);
        let out = tape.scalar(x).unwrap();
        tape.backward(out).unwrap();
        assert!(matches!(tape.backward(out), Err(Error::TapeState(_))));
        tape.reset();
        assert!(tape.backward(out).is_ok());
    }

    #[test]
    fn non_finite_primal_reports_node() {
        let mut tape = Tape::detached();
        let x = tape.input(&[-1.0]);
        let y = tape.ln(x);
        let out = tape.scalar(y).unwrap();
        match tape.backward(out) {
            Err(Error::NonFinite { node }) => assert_eq!(node, y.id()),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn grad_wrt_input_identity_and_logistic() {
        let mut tape = Tape::detached();
        let x = tape.input(&[0.3, -2.0, 5.0]);
        let x0 = tape.slice(x, 0, 1);
        let out = tape.scalar(x0).unwrap();
        let g = grad_wrt_input(&mut tape, out, &[x]).unwrap();
        assert_eq!(g, Vec3::new(1.0, 0.0, 0.0));

        let mut tape = Tape::detached();
        let xs: Vec<Var> = [0.3, -2.0, 5.0].iter().map(|v| tape.input(&[*v])).collect();
        let y = tape.logistic(xs[0]);
        let out = tape.scalar(y).unwrap();
        let g = grad_wrt_input(&mut tape, out, &xs).unwrap();
        let s = logistic(0.3);
        assert!((g.x - s * (1.0 - s)).abs() < 1e-15);
        assert_eq!((g.y, g.z), (0.0, 0.0));
    }

    #[test]
    fn broadcast_scalar_operands() {
        let mut tape = Tape::detached();
        let v = tape.input(&[1.0, 2.0, 3.0]);
        let s = tape.input(&[2.0]);
        let q = tape.div(v, s);
        let y = tape.sum(q);
        let out = tape.scalar(y).unwrap();
        assert_eq!(out.primal, 3.0);
        let g = tape.backward(out).unwrap();
        assert_eq!(g.wrt(v), vec![0.5, 0.5, 0.5]);
        assert_eq!(g.wrt(s), vec![-6.0 / 4.0]);
    }

    #[test]
    fn norm_gradient_is_zero_at_origin() {
        let mut tape = Tape::detached();
        let v = tape.input(&[0.0, 0.0]);
        let n = tape.norm(v);
        let out = tape.scalar(n).unwrap();
        assert_eq!(tape.backward(out).unwrap().wrt(v), vec![0.0, 0.0]);
    }

    #[test]
    fn sgd_examples() {
        let mut p = [1.0];
        sgd_step(&mut p, &[2.0], 0.1).unwrap();
        assert!((p[0] - 0.8).abs() < 1e-15);
        let mut q = [1.0, -3.0];
        sgd_step(&mut q, &[0.0, 0.0], 0.1).unwrap();
        assert_eq!(q, [1.0, -3.0]);
        assert!(sgd_step(&mut q, &[f64::NAN, 0.0], 0.1).is_err());
        assert!(sgd_step(&mut q, &[0.0, 0.0], 0.0).is_err());
    }

    #[test]
    fn sgd_fits_convex_quadratic() {
        // f(p) = (p - 3)^2 / 2 * 4 has minimizer 3.
        let mut p = [-5.0];
        for _ in 0..200 {
            let mut tape = Tape::new(&p);
            let v = tape.param(0, 1);
            let d = tape.shift(v, -3.0);
            let sq = tape.square(d);
            let y = tape.scale(sq, 2.0);
            let out = tape.scalar(y).unwrap();
            let g = tape.backward(out).unwrap().params;
            sgd_step(&mut p, &g, 0.1).unwrap();
        }
        assert!((p[0] - 3.0).abs() < 1e-6);
    }

    #[test]
    fn momentum_sgd_converges() {
        let mut p = [10.0];
        let mut opt = Sgd::new(0.05, 0.9, 1);
        for _ in 0..400 {
            let g = [2.0 * (p[0] - 1.0)];
            opt.step(&mut p, &g).unwrap();
        }
        assert!((p[0] - 1.0).abs() < 1e-6);
    }
}
