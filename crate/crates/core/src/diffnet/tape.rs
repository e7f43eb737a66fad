//! Reverse-mode tape over scalar values plus batched surrogate calls.
//!
//! Every scalar node stores its local linearization (parent, partial) so
//! the reverse sweep is a single pass of multiply-adds. A surrogate call
//! produces a block of output slots and is pulled back in one vector-Jacobian
//! product when the sweep reaches the block.

use super::TransitionModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
enum Node {
    Leaf,
    Lin { start: usize, len: usize },
    CallOut { call: usize },
}

struct Call<C> {
    x: Vec<Var>,
    u: Vec<Var>,
    out_start: usize,
    out_len: usize,
    cache: C,
}

pub struct Tape<'m, M: TransitionModel> {
    model: &'m M,
    vals: Vec<f64>,
    nodes: Vec<Node>,
    terms: Vec<(usize, f64)>,
    calls: Vec<Call<M::Cache>>,
}

impl<'m, M: TransitionModel> Tape<'m, M> {
    pub fn new(model: &'m M) -> Self {
        Self { model, vals: Vec::new(), nodes: Vec::new(), terms: Vec::new(), calls: Vec::new() }
    }

    pub fn clear(&mut self) {
        self.vals.clear();
        self.nodes.clear();
        self.terms.clear();
        self.calls.clear();
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    #[inline]
    pub fn value(&self, v: Var) -> f64 {
        self.vals[v.0]
    }

    pub fn values(&self, vs: &[Var]) -> Vec<f64> {
        vs.iter().map(|&v| self.vals[v.0]).collect()
    }

    /// Independent variable or constant; both are leaves.
    pub fn leaf(&mut self, value: f64) -> Var {
        self.vals.push(value);
        self.nodes.push(Node::Leaf);
        Var(self.vals.len() - 1)
    }

    /// `constant + sum coef * var`, recorded with the given partials.
    pub fn linear(&mut self, terms: &[(Var, f64)], constant: f64) -> Var {
        let value = constant + terms.iter().map(|&(v, c)| c * self.vals[v.0]).sum::<f64>();
        self.with_partials(value, terms)
    }

    /// Node with an externally computed value and local partials.
    pub fn with_partials(&mut self, value: f64, partials: &[(Var, f64)]) -> Var {
        let start = self.terms.len();
        self.terms.extend(partials.iter().filter(|(_, c)| *c != 0.0).map(|&(v, c)| (v.0, c)));
        let len = self.terms.len() - start;
        self.vals.push(value);
        self.nodes.push(if len == 0 { Node::Leaf } else { Node::Lin { start, len } });
        Var(self.vals.len() - 1)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.linear(&[(a, 1.0), (b, 1.0)], 0.0)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.linear(&[(a, 1.0), (b, -1.0)], 0.0)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.vals[a.0], self.vals[b.0]);
        self.with_partials(va * vb, &[(a, vb), (b, va)])
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let va = self.vals[a.0];
        self.with_partials(va.ln(), &[(a, 1.0 / va)])
    }

    /// Clamp into `[lo, hi]`; the derivative is zero while saturated.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let va = self.vals[a.0];
        if va < lo {
            self.with_partials(lo, &[])
        } else if va > hi {
            self.with_partials(hi, &[])
        } else {
            self.with_partials(va, &[(a, 1.0)])
        }
    }

    /// `0.5 * v^T diag(w) v` for a diagonal weight.
    pub fn half_weighted_square(&mut self, v: &[Var], weights: &[f64]) -> Var {
        let mut value = 0.0;
        let mut partials = Vec::with_capacity(v.len());
        for (&vi, &w) in v.iter().zip(weights) {
            let x = self.vals[vi.0];
            value += 0.5 * w * x * x;
            partials.push((vi, w * x));
        }
        self.with_partials(value, &partials)
    }

    /// `0.5 * v^T W v` for a symmetric matrix `W` (row-major).
    pub fn half_quadratic(&mut self, v: &[Var], w: &[f64]) -> Var {
        let n = v.len();
        let x: Vec<f64> = v.iter().map(|vi| self.vals[vi.0]).collect();
        let mut value = 0.0;
        let mut partials = Vec::with_capacity(n);
        for i in 0..n {
            let wx: f64 = (0..n).map(|j| w[i * n + j] * x[j]).sum();
            value += 0.5 * x[i] * wx;
            partials.push((v[i], wx));
        }
        self.with_partials(value, &partials)
    }

    pub fn sum(&mut self, vs: &[Var]) -> Var {
        let terms: Vec<(Var, f64)> = vs.iter().map(|&v| (v, 1.0)).collect();
        self.linear(&terms, 0.0)
    }

    /// Surrogate evaluated at each of `times` from `(x, u)`.
    /// Returns `times.len() * n` output variables, row-major by time.
    pub fn call(&mut self, times: &[f64], x: &[Var], u: &[Var]) -> Vec<Var> {
        let xv = self.values(x);
        let uv = self.values(u);
        let (out, cache) = self.model.predict(times, &xv, &uv);
        let call = self.calls.len();
        let out_start = self.vals.len();
        for v in &out {
            self.vals.push(*v);
            self.nodes.push(Node::CallOut { call });
        }
        self.calls.push(Call { x: x.to_vec(), u: u.to_vec(), out_start, out_len: out.len(), cache });
        (out_start..out_start + out.len()).map(Var).collect()
    }

    /// Adjoints of `output` with respect to every slot on the tape.
    pub fn gradient(&self, output: Var) -> Vec<f64> {
        let mut adj = vec![0.0; self.vals.len()];
        adj[output.0] = 1.0;
        let mut slot = output.0 + 1;
        while slot > 0 {
            slot -= 1;
            match self.nodes[slot] {
                Node::Leaf => {}
                Node::Lin { start, len } => {
                    let a = adj[slot];
                    if a != 0.0 {
                        for &(p, c) in &self.terms[start..start + len] {
                            adj[p] += a * c;
                        }
                    }
                }
                Node::CallOut { call } => {
                    let c = &self.calls[call];
                    let cot = &adj[c.out_start..c.out_start + c.out_len];
                    if cot.iter().any(|&v| v != 0.0) {
                        let mut xb = vec![0.0; c.x.len()];
                        let mut ub = vec![0.0; c.u.len()];
                        self.model.pullback(&c.cache, cot, &mut xb, &mut ub);
                        for (v, g) in c.x.iter().zip(&xb) {
                            adj[v.0] += g;
                        }
                        for (v, g) in c.u.iter().zip(&ub) {
                            adj[v.0] += g;
                        }
                    }
                    // The whole block is handled once; skip its remaining slots.
                    slot = c.out_start;
                }
            }
        }
        adj
    }
}
