//! Reverse-mode automatic differentiation on a flat index arena.
//!
//! The training loop needs parameter gradients of losses that themselves
//! contain the *input* gradient and Hessian of a scalar network. Those inner
//! derivatives are expanded in closed form layer by layer (see
//! [`crate::pann`]), so the outer derivative reduces to plain reverse-mode AD
//! over a scalar expression graph. Nodes live in a `Vec` arena addressed by
//! [`Var`] indices; one backward sweep per loss yields adjoints for every
//! recorded node, and the parameter leaves are read off directly.
//!
//! The [`Algebra`] trait abstracts over the recording tape and a zero-cost
//! plain-`f64` evaluator ([`Reals`]) so the network forward pass is written
//! once and shared between training (taped) and solving/metrics (untaped).

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(u32);

impl Var {
    /// Position in the adjoint vector returned by [`Tape::gradient`].
    pub(crate) fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Copy)]
enum Op {
    /// Leaf or literal: no parents.
    Nullary,
    Add(u32, u32),
    Sub(u32, u32),
    Mul(u32, u32),
    Div(u32, u32),
    Neg(u32),
    Exp(u32),
    Ln(u32),
    /// ln(1 + a), kept as a primitive so softplus tails stay accurate.
    Ln1p(u32),
    /// Inner product of `pairs` interleaved (a, b) operands in `aux`.
    Dot { first: u32, pairs: u32 },
    /// Sum of `count` operands in `aux`.
    Sum { first: u32, count: u32 },
}

/// Recording tape. Cleared and rebuilt every optimizer step because branch
/// decisions inside numerically stable primitives depend on current values.
#[derive(Default)]
pub struct Tape {
    vals: Vec<f64>,
    ops: Vec<Op>,
    aux: Vec<u32>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(nodes: usize) -> Self {
        Tape {
            vals: Vec::with_capacity(nodes),
            ops: Vec::with_capacity(nodes),
            aux: Vec::with_capacity(nodes),
        }
    }

    /// Drops all nodes but keeps allocations for the next epoch.
    pub fn clear(&mut self) {
        self.vals.clear();
        self.ops.clear();
        self.aux.clear();
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    fn push(&mut self, val: f64, op: Op) -> Var {
        let id = u32::try_from(self.vals.len()).expect("tape overflow");
        self.vals.push(val);
        self.ops.push(op);
        Var(id)
    }

    /// Records an independent variable (a differentiation target).
    pub fn leaf(&mut self, val: f64) -> Var {
        self.push(val, Op::Nullary)
    }

    pub fn value(&self, v: Var) -> f64 {
        self.vals[v.0 as usize]
    }

    /// Adjoints of every node w.r.t. `output`, by one reverse sweep.
    pub fn gradient(&self, output: Var) -> Vec<f64> {
        let mut adj = Vec::new();
        self.gradient_into(output, &mut adj);
        adj
    }

    /// As [`Tape::gradient`], reusing the caller's buffer.
    pub fn gradient_into(&self, output: Var, adj: &mut Vec<f64>) {
        adj.clear();
        adj.resize(self.vals.len(), 0.0);
        adj[output.0 as usize] = 1.0;
        for i in (0..=output.0 as usize).rev() {
            let g = adj[i];
            if g == 0.0 {
                continue;
            }
            match self.ops[i] {
                Op::Nullary => {}
                Op::Add(a, b) => {
                    adj[a as usize] += g;
                    adj[b as usize] += g;
                }
                Op::Sub(a, b) => {
                    adj[a as usize] += g;
                    adj[b as usize] -= g;
                }
                Op::Mul(a, b) => {
                    adj[a as usize] += g * self.vals[b as usize];
                    adj[b as usize] += g * self.vals[a as usize];
                }
                Op::Div(a, b) => {
                    let vb = self.vals[b as usize];
                    adj[a as usize] += g / vb;
                    adj[b as usize] -= g * self.vals[i] / vb;
                }
                Op::Neg(a) => adj[a as usize] -= g,
                Op::Exp(a) => adj[a as usize] += g * self.vals[i],
                Op::Ln(a) => adj[a as usize] += g / self.vals[a as usize],
                Op::Ln1p(a) => adj[a as usize] += g / (1.0 + self.vals[a as usize]),
                Op::Dot { first, pairs } => {
                    let lo = first as usize;
                    for k in 0..pairs as usize {
                        let a = self.aux[lo + 2 * k] as usize;
                        let b = self.aux[lo + 2 * k + 1] as usize;
                        adj[a] += g * self.vals[b];
                        adj[b] += g * self.vals[a];
                    }
                }
                Op::Sum { first, count } => {
                    let lo = first as usize;
                    for k in 0..count as usize {
                        adj[self.aux[lo + k] as usize] += g;
                    }
                }
            }
        }
    }
}

/// Scalar operations shared by the recording tape and plain evaluation.
///
/// Branching for numerical stability is done on [`Algebra::val`]; the branch
/// taken is part of the recorded graph, which is why tapes are rebuilt per
/// evaluation point.
pub trait Algebra {
    type S: Copy;

    /// Embeds a constant (not a differentiation target).
    fn lit(&mut self, v: f64) -> Self::S;
    /// Current numeric value, for branch decisions and diagnostics.
    fn val(&self, s: Self::S) -> f64;

    fn add(&mut self, a: Self::S, b: Self::S) -> Self::S;
    fn sub(&mut self, a: Self::S, b: Self::S) -> Self::S;
    fn mul(&mut self, a: Self::S, b: Self::S) -> Self::S;
    fn div(&mut self, a: Self::S, b: Self::S) -> Self::S;
    fn neg(&mut self, a: Self::S) -> Self::S;
    fn exp(&mut self, a: Self::S) -> Self::S;
    fn ln(&mut self, a: Self::S) -> Self::S;
    /// `ln(1 + a)`, accurate for |a| near zero.
    fn ln_1p(&mut self, a: Self::S) -> Self::S;
    /// Inner product `Σ a_k b_k`, accumulated in index order.
    fn dot(&mut self, a: &[Self::S], b: &[Self::S]) -> Self::S;
    /// Plain sum `Σ x_k`, accumulated in index order.
    fn sum(&mut self, xs: &[Self::S]) -> Self::S;

    /// `a * k` for a constant `k`.
    fn scale(&mut self, a: Self::S, k: f64) -> Self::S {
        let l = self.lit(k);
        self.mul(a, l)
    }
}

/// Plain `f64` evaluation, no recording.
pub struct Reals;

impl Algebra for Reals {
    type S = f64;

    fn lit(&mut self, v: f64) -> f64 {
        v
    }
    fn val(&self, s: f64) -> f64 {
        s
    }
    fn add(&mut self, a: f64, b: f64) -> f64 {
        a + b
    }
    fn sub(&mut self, a: f64, b: f64) -> f64 {
        a - b
    }
    fn mul(&mut self, a: f64, b: f64) -> f64 {
        a * b
    }
    fn div(&mut self, a: f64, b: f64) -> f64 {
        a / b
    }
    fn neg(&mut self, a: f64) -> f64 {
        -a
    }
    fn exp(&mut self, a: f64) -> f64 {
        a.exp()
    }
    fn ln(&mut self, a: f64) -> f64 {
        a.ln()
    }
    fn ln_1p(&mut self, a: f64) -> f64 {
        a.ln_1p()
    }
    fn dot(&mut self, a: &[f64], b: &[f64]) -> f64 {
        debug_assert_eq!(a.len(), b.len());
        let mut acc = 0.0;
        for k in 0..a.len() {
            acc += a[k] * b[k];
        }
        acc
    }
    fn sum(&mut self, xs: &[f64]) -> f64 {
        let mut acc = 0.0;
        for x in xs {
            acc += x;
        }
        acc
    }
}

impl Algebra for Tape {
    type S = Var;

    fn lit(&mut self, v: f64) -> Var {
        self.push(v, Op::Nullary)
    }
    fn val(&self, s: Var) -> f64 {
        self.value(s)
    }
    fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a.0, b.0))
    }
    fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a.0, b.0))
    }
    fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a.0, b.0))
    }
    fn div(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) / self.value(b);
        self.push(v, Op::Div(a.0, b.0))
    }
    fn neg(&mut self, a: Var) -> Var {
        let v = -self.value(a);
        self.push(v, Op::Neg(a.0))
    }
    fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).exp();
        self.push(v, Op::Exp(a.0))
    }
    fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).ln();
        self.push(v, Op::Ln(a.0))
    }
    fn ln_1p(&mut self, a: Var) -> Var {
        let v = self.value(a).ln_1p();
        self.push(v, Op::Ln1p(a.0))
    }
    fn dot(&mut self, a: &[Var], b: &[Var]) -> Var {
        debug_assert_eq!(a.len(), b.len());
        let first = u32::try_from(self.aux.len()).expect("tape aux overflow");
        let mut acc = 0.0;
        for k in 0..a.len() {
            acc += self.value(a[k]) * self.value(b[k]);
            self.aux.push(a[k].0);
            self.aux.push(b[k].0);
        }
        let pairs = a.len() as u32;
        self.push(acc, Op::Dot { first, pairs })
    }
    fn sum(&mut self, xs: &[Var]) -> Var {
        let first = u32::try_from(self.aux.len()).expect("tape aux overflow");
        let mut acc = 0.0;
        for x in xs {
            acc += self.value(*x);
            self.aux.push(x.0);
        }
        let count = xs.len() as u32;
        self.push(acc, Op::Sum { first, count })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Builds a fixed expression mixing every op; returns (output, leaves).
    fn mixed_expression(t: &mut Tape, vals: &[f64; 4]) -> (Var, Vec<Var>) {
        let leaves: Vec<Var> = vals.iter().map(|&v| t.leaf(v)).collect();
        let (a, b, c, d) = (leaves[0], leaves[1], leaves[2], leaves[3]);
        let ab = t.mul(a, b);
        let s = t.add(ab, c);
        let e = t.exp(d);
        let q = t.div(s, e);
        let l = t.ln(s);
        let n = t.neg(q);
        let dt = t.dot(&[a, b, n], &[c, d, l]);
        let out = t.sum(&[dt, q, l]);
        (out, leaves)
    }

    fn eval_mixed(v: &[f64; 4]) -> f64 {
        let (a, b, c, d) = (v[0], v[1], v[2], v[3]);
        let s = a * b + c;
        let q = s / d.exp();
        let l = s.ln();
        let dt = a * c + b * d + (-q) * l;
        dt + q + l
    }

    #[test]
    fn product_rule_hand_check() {
        // f = a*b + c at (2, 3, 5): df/da = 3, df/db = 2, df/dc = 1.
        let mut t = Tape::new();
        let a = t.leaf(2.0);
        let b = t.leaf(3.0);
        let c = t.leaf(5.0);
        let ab = t.mul(a, b);
        let f = t.add(ab, c);
        assert_eq!(t.value(f), 11.0);
        let g = t.gradient(f);
        assert_eq!(g[0], 3.0);
        assert_eq!(g[1], 2.0);
        assert_eq!(g[2], 1.0);
    }

    #[test]
    fn division_and_log_hand_check() {
        // f = ln(a / b) = ln a - ln b: df/da = 1/a, df/db = -1/b.
        let mut t = Tape::new();
        let a = t.leaf(2.5);
        let b = t.leaf(4.0);
        let q = t.div(a, b);
        let f = t.ln(q);
        let g = t.gradient(f);
        assert!((g[0] - 1.0 / 2.5).abs() < 1e-15);
        assert!((g[1] + 1.0 / 4.0).abs() < 1e-15);
    }

    #[test]
    fn dot_matches_manual_expansion() {
        let mut t = Tape::new();
        let xs: Vec<Var> = [1.0, 2.0, 3.0].iter().map(|&v| t.leaf(v)).collect();
        let ys: Vec<Var> = [4.0, 5.0, 6.0].iter().map(|&v| t.leaf(v)).collect();
        let d = t.dot(&xs, &ys);
        assert_eq!(t.value(d), 32.0);
        let g = t.gradient(d);
        // d(x·y)/dx_k = y_k and vice versa.
        assert_eq!(&g[0..3], &[4.0, 5.0, 6.0]);
        assert_eq!(&g[3..6], &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn gradient_of_leaf_is_one() {
        let mut t = Tape::new();
        let a = t.leaf(7.0);
        let g = t.gradient(a);
        assert_eq!(g[0], 1.0);
    }

    #[test]
    fn tape_matches_plain_evaluation() {
        let vals = [0.7, -1.3, 2.9, 0.4];
        let mut t = Tape::new();
        let (out, _) = mixed_expression(&mut t, &vals);
        assert!((t.value(out) - eval_mixed(&vals)).abs() < 1e-14);
    }

    #[test]
    fn gradients_match_central_differences() {
        let base = [0.7, -1.3, 2.9, 0.4];
        let mut t = Tape::new();
        let (out, leaves) = mixed_expression(&mut t, &base);
        let adj = t.gradient(out);
        let h = 1e-6;
        for i in 0..4 {
            let mut up = base;
            up[i] += h;
            let mut dn = base;
            dn[i] -= h;
            let fd = (eval_mixed(&up) - eval_mixed(&dn)) / (2.0 * h);
            let ad = adj[leaves[i].0 as usize];
            assert!(
                (ad - fd).abs() <= 1e-7 * (1.0 + fd.abs()),
                "leaf {i}: ad {ad} vs fd {fd}"
            );
        }
    }

    #[test]
    fn ln_1p_keeps_tiny_arguments() {
        // ln(1 + x) ~ x for tiny x; plain ln(1 + x) would round to zero.
        let mut t = Tape::new();
        let a = t.leaf(1e-22);
        let f = t.ln_1p(a);
        assert!((t.value(f) - 1e-22).abs() < 1e-36);
        let g = t.gradient(f);
        assert!((g[0] - 1.0).abs() < 1e-15);
        // Derivative 1/(1 + x) at a generic point.
        let mut t = Tape::new();
        let a = t.leaf(3.0);
        let f = t.ln_1p(a);
        let g = t.gradient(f);
        assert!((g[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn clear_reuses_allocations() {
        let mut t = Tape::with_capacity(16);
        let a = t.leaf(1.0);
        let b = t.leaf(2.0);
        t.add(a, b);
        assert_eq!(t.len(), 3);
        t.clear();
        assert!(t.is_empty());
        let a = t.leaf(3.0);
        assert_eq!(t.value(a), 3.0);
    }
}
