//! Scalar Wengert tape.
//!
//! Nodes are appended in evaluation order, so every node's inputs precede it.
//! Reverse sweeps come in two flavours: [`Tape::vjp`] accumulates plain `f64`
//! adjoints, while [`Tape::grad_vars`] records the adjoint computation itself
//! as new tape nodes. Differentiating the recorded gradient a second time is
//! how Hessian-vector products are formed.

use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    Const,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Shift(usize),
    Neg(usize),
    Square(usize),
    Recip(usize),
    Exp(usize),
    Ln(usize),
    Tanh(usize),
    Sigmoid(usize),
    Softplus(usize),
    Relu(usize),
    /// Heaviside step with zero derivative everywhere; `step(0) = 0`.
    Step,
    Sum(Box<[usize]>),
    /// Sum of inputs weighted by constants.
    Dot(Box<[usize]>, Box<[f64]>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Const => "const",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Shift(..) => "shift",
            Op::Neg(..) => "neg",
            Op::Square(..) => "square",
            Op::Recip(..) => "recip",
            Op::Exp(..) => "exp",
            Op::Ln(..) => "ln",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Softplus(..) => "softplus",
            Op::Relu(..) => "relu",
            Op::Step => "step",
            Op::Sum(..) => "sum",
            Op::Dot(..) => "dot",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: f64,
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    first_non_finite: Option<usize>,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(n: usize) -> Self {
        Self {
            nodes: Vec::with_capacity(n),
            first_non_finite: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> f64 {
        self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: f64) -> Var {
        let idx = self.nodes.len();
        if !value.is_finite() && self.first_non_finite.is_none() {
            self.first_non_finite = Some(idx);
        }
        self.nodes.push(Node { op, value });
        Var(idx)
    }

    fn is_const(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::Const)
    }

    /// Errors with the first node whose value was not finite.
    pub fn check_finite(&self) -> Result<()> {
        match self.first_non_finite {
            None => Ok(()),
            Some(node) => Err(Error::NonFinite {
                node,
                op: self.nodes[node].op.name(),
            }),
        }
    }

    pub fn input(&mut self, value: f64) -> Var {
        self.push(Op::Input, value)
    }

    pub fn inputs(&mut self, values: &[f64]) -> Vec<Var> {
        values.iter().map(|&v| self.input(v)).collect()
    }

    pub fn constant(&mut self, value: f64) -> Var {
        self.push(Op::Const, value)
    }

    pub fn constants(&mut self, values: &[f64]) -> Vec<Var> {
        values.iter().map(|&v| self.constant(v)).collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        match (self.is_const(a), self.is_const(b)) {
            (true, true) => self.constant(self.value(a) + self.value(b)),
            (true, false) => self.shift(b, self.value(a)),
            (false, true) => self.shift(a, self.value(b)),
            (false, false) => {
                let v = self.value(a) + self.value(b);
                self.push(Op::Add(a.0, b.0), v)
            }
        }
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        match (self.is_const(a), self.is_const(b)) {
            (true, true) => self.constant(self.value(a) - self.value(b)),
            (false, true) => self.shift(a, -self.value(b)),
            _ => {
                let v = self.value(a) - self.value(b);
                self.push(Op::Sub(a.0, b.0), v)
            }
        }
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        match (self.is_const(a), self.is_const(b)) {
            (true, true) => self.constant(self.value(a) * self.value(b)),
            (true, false) => self.scale(b, self.value(a)),
            (false, true) => self.scale(a, self.value(b)),
            (false, false) => {
                let v = self.value(a) * self.value(b);
                self.push(Op::Mul(a.0, b.0), v)
            }
        }
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(Op::Scale(a.0, c), v)
    }

    pub fn shift(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) + c;
        self.push(Op::Shift(a.0), v)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = -self.value(a);
        self.push(Op::Neg(a.0), v)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let x = self.value(a);
        self.push(Op::Square(a.0), x * x)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let v = 1.0 / self.value(a);
        self.push(Op::Recip(a.0), v)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).exp();
        self.push(Op::Exp(a.0), v)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).ln();
        self.push(Op::Ln(a.0), v)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).tanh();
        self.push(Op::Tanh(a.0), v)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = sigmoid(self.value(a));
        self.push(Op::Sigmoid(a.0), v)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = softplus(self.value(a));
        self.push(Op::Softplus(a.0), v)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).max(0.0);
        self.push(Op::Relu(a.0), v)
    }

    pub fn step(&mut self, a: Var) -> Var {
        let v = if self.value(a) > 0.0 { 1.0 } else { 0.0 };
        self.push(Op::Step, v)
    }

    pub fn sum(&mut self, xs: &[Var]) -> Var {
        match xs.len() {
            0 => self.constant(0.0),
            1 => xs[0],
            2 => self.add(xs[0], xs[1]),
            _ => {
                let v = xs.iter().map(|x| self.value(*x)).sum();
                let idx: Box<[usize]> = xs.iter().map(|x| x.0).collect();
                self.push(Op::Sum(idx), v)
            }
        }
    }

    /// `Σ wᵢ·xᵢ` with constant weights.
    pub fn dot_const(&mut self, xs: &[Var], weights: &[f64]) -> Var {
        debug_assert_eq!(xs.len(), weights.len());
        let v = xs
            .iter()
            .zip(weights)
            .map(|(x, w)| self.value(*x) * w)
            .sum();
        let idx: Box<[usize]> = xs.iter().map(|x| x.0).collect();
        self.push(Op::Dot(idx, weights.into()), v)
    }

    /// `Σ aᵢ·bᵢ`. Pairs with a constant factor are gathered into one
    /// constant-weighted node.
    pub fn inner(&mut self, a: &[Var], b: &[Var]) -> Var {
        debug_assert_eq!(a.len(), b.len());
        let mut lin_vars = Vec::new();
        let mut lin_w = Vec::new();
        let mut terms = Vec::new();
        for (&x, &y) in a.iter().zip(b) {
            match (self.is_const(x), self.is_const(y)) {
                (false, true) => {
                    lin_vars.push(x);
                    lin_w.push(self.value(y));
                }
                (true, false) => {
                    lin_vars.push(y);
                    lin_w.push(self.value(x));
                }
                _ => terms.push(self.mul(x, y)),
            }
        }
        if !lin_vars.is_empty() {
            terms.push(self.dot_const(&lin_vars, &lin_w));
        }
        self.sum(&terms)
    }

    /// Reverse sweep from `seeds` (node, adjoint) pairs; returns the adjoints
    /// of `wrt`. With a single seed `(loss, 1.0)` this is the gradient.
    pub fn vjp(&self, seeds: &[(Var, f64)], wrt: &[Var]) -> Vec<f64> {
        let top = seeds.iter().map(|(v, _)| v.0).max().unwrap_or(0);
        let mut adj = vec![0.0; top + 1];
        for &(v, s) in seeds {
            adj[v.0] += s;
        }
        for i in (0..=top).rev() {
            let g = adj[i];
            if g == 0.0 {
                continue;
            }
            let node = &self.nodes[i];
            let val = |j: usize| self.nodes[j].value;
            match &node.op {
                Op::Input | Op::Const | Op::Step => {}
                Op::Add(a, b) => {
                    adj[*a] += g;
                    adj[*b] += g;
                }
                Op::Sub(a, b) => {
                    adj[*a] += g;
                    adj[*b] -= g;
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    adj[*a] += g * vb;
                    adj[*b] += g * va;
                }
                Op::Scale(a, c) => adj[*a] += g * c,
                Op::Shift(a) => adj[*a] += g,
                Op::Neg(a) => adj[*a] -= g,
                Op::Square(a) => adj[*a] += 2.0 * val(*a) * g,
                Op::Recip(a) => adj[*a] -= g * node.value * node.value,
                Op::Exp(a) => adj[*a] += g * node.value,
                Op::Ln(a) => adj[*a] += g / val(*a),
                Op::Tanh(a) => adj[*a] += g * (1.0 - node.value * node.value),
                Op::Sigmoid(a) => adj[*a] += g * node.value * (1.0 - node.value),
                Op::Softplus(a) => adj[*a] += g * sigmoid(val(*a)),
                Op::Relu(a) => {
                    if val(*a) > 0.0 {
                        adj[*a] += g
                    }
                }
                Op::Sum(xs) => {
                    for &x in xs.iter() {
                        adj[x] += g;
                    }
                }
                Op::Dot(xs, ws) => {
                    for (&x, w) in xs.iter().zip(ws.iter()) {
                        adj[x] += g * w;
                    }
                }
            }
        }
        wrt.iter()
            .map(|v| adj.get(v.0).copied().unwrap_or(0.0))
            .collect()
    }

    pub fn gradient(&self, output: Var, wrt: &[Var]) -> Vec<f64> {
        self.vjp(&[(output, 1.0)], wrt)
    }

    /// Records the reverse sweep of `output` on this tape and returns one
    /// node per entry of `wrt` holding `∂output/∂wrt[i]`. The returned nodes
    /// are themselves differentiable.
    pub fn grad_vars(&mut self, output: Var, wrt: &[Var]) -> Vec<Var> {
        let top = output.0;
        let mut adj: Vec<Option<Var>> = vec![None; top + 1];
        adj[top] = Some(self.constant(1.0));

        fn acc(tape: &mut Tape, adj: &mut [Option<Var>], at: usize, contrib: Var) {
            adj[at] = Some(match adj[at] {
                None => contrib,
                Some(prev) => tape.add(prev, contrib),
            });
        }

        for i in (0..=top).rev() {
            let Some(g) = adj[i] else { continue };
            let op = self.nodes[i].op.clone();
            let this = Var(i);
            match op {
                Op::Input | Op::Const | Op::Step => {}
                Op::Add(a, b) => {
                    acc(self, &mut adj, a, g);
                    acc(self, &mut adj, b, g);
                }
                Op::Sub(a, b) => {
                    acc(self, &mut adj, a, g);
                    let ng = self.neg(g);
                    acc(self, &mut adj, b, ng);
                }
                Op::Mul(a, b) => {
                    let ga = self.mul(g, Var(b));
                    acc(self, &mut adj, a, ga);
                    let gb = self.mul(g, Var(a));
                    acc(self, &mut adj, b, gb);
                }
                Op::Scale(a, c) => {
                    let ga = self.scale(g, c);
                    acc(self, &mut adj, a, ga);
                }
                Op::Shift(a) => acc(self, &mut adj, a, g),
                Op::Neg(a) => {
                    let ga = self.neg(g);
                    acc(self, &mut adj, a, ga);
                }
                Op::Square(a) => {
                    let two_a = self.scale(Var(a), 2.0);
                    let ga = self.mul(g, two_a);
                    acc(self, &mut adj, a, ga);
                }
                Op::Recip(a) => {
                    let sq = self.square(this);
                    let t = self.mul(g, sq);
                    let ga = self.neg(t);
                    acc(self, &mut adj, a, ga);
                }
                Op::Exp(a) => {
                    let ga = self.mul(g, this);
                    acc(self, &mut adj, a, ga);
                }
                Op::Ln(a) => {
                    let r = self.recip(Var(a));
                    let ga = self.mul(g, r);
                    acc(self, &mut adj, a, ga);
                }
                Op::Tanh(a) => {
                    let sq = self.square(this);
                    let nsq = self.neg(sq);
                    let d = self.shift(nsq, 1.0);
                    let ga = self.mul(g, d);
                    acc(self, &mut adj, a, ga);
                }
                Op::Sigmoid(a) => {
                    let ns = self.neg(this);
                    let one_minus = self.shift(ns, 1.0);
                    let d = self.mul(this, one_minus);
                    let ga = self.mul(g, d);
                    acc(self, &mut adj, a, ga);
                }
                Op::Softplus(a) => {
                    let s = self.sigmoid(Var(a));
                    let ga = self.mul(g, s);
                    acc(self, &mut adj, a, ga);
                }
                Op::Relu(a) => {
                    let s = self.step(Var(a));
                    let ga = self.mul(g, s);
                    acc(self, &mut adj, a, ga);
                }
                Op::Sum(xs) => {
                    for &x in xs.iter() {
                        acc(self, &mut adj, x, g);
                    }
                }
                Op::Dot(xs, ws) => {
                    for (&x, &w) in xs.iter().zip(ws.iter()) {
                        let gx = self.scale(g, w);
                        acc(self, &mut adj, x, gx);
                    }
                }
            }
        }

        wrt.iter()
            .map(|v| match adj.get(v.0).copied().flatten() {
                Some(g) => g,
                None => self.constant(0.0),
            })
            .collect()
    }
}
