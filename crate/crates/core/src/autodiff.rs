//! Reverse-mode differentiation over a flat scalar tape.
//!
//! Values are computed eagerly while recording; `backward` runs one reverse
//! sweep and accumulates gradients additively at parameter leaves. A
//! stop-gradient marker keeps its forward value but blocks the sweep, which
//! is what the gradient-trick photometric loss needs.
//!
//! Losses in this crate have many parameters and a single scalar output, so
//! an explicit tape beats dual numbers. Dot-product ops exist because MLP
//! layers would otherwise dominate the node count.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("domain violation in {op}: operand {value}")]
    Domain { op: &'static str, value: f64 },
}

/// Handle to a tape node.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(u32);

#[derive(Copy, Clone, Debug)]
enum Op {
    Const,
    Param(u32),
    Add(u32, u32),
    Sub(u32, u32),
    Mul(u32, u32),
    Div(u32, u32),
    Exp(u32),
    Ln(u32),
    Sqrt(u32),
    Pow(u32, u32),
    Softplus(u32),
    Sigmoid(u32),
    Max(u32, u32),
    Min(u32, u32),
    Abs(u32),
    StopGrad,
    /// sum_i vals[a_i] * vals[b_i] over pairs[start..start+len]
    DotNodes { start: u32, len: u32 },
    /// sum_i vals[a_i] * c_i over consts[start..start+len]
    DotConst { start: u32, len: u32 },
}

#[derive(Default)]
pub struct Tape {
    ops: Vec<Op>,
    vals: Vec<f64>,
    pairs: Vec<(u32, u32)>,
    weighted: Vec<(u32, f64)>,
    n_params: usize,
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Drops all nodes but keeps allocations; parameter count is reset too.
    pub fn clear(&mut self) {
        self.ops.clear();
        self.vals.clear();
        self.pairs.clear();
        self.weighted.clear();
        self.n_params = 0;
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn value(&self, v: Var) -> f64 {
        self.vals[v.0 as usize]
    }

    fn push(&mut self, op: Op, val: f64) -> Var {
        let idx = self.ops.len() as u32;
        self.ops.push(op);
        self.vals.push(val);
        Var(idx)
    }

    pub fn constant(&mut self, c: f64) -> Var {
        self.push(Op::Const, c)
    }

    /// Leaf for parameter slot `id`. The same id may back several leaves;
    /// their gradients accumulate.
    pub fn param(&mut self, id: usize, value: f64) -> Var {
        self.n_params = self.n_params.max(id + 1);
        self.push(Op::Param(id as u32), value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(Op::Add(a.0, b.0), v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(Op::Sub(a.0, b.0), v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(Op::Mul(a.0, b.0), v)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let vb = self.value(b);
        if vb == 0.0 {
            return Err(AutodiffError::Domain { op: "div", value: vb });
        }
        let v = self.value(a) / vb;
        Ok(self.push(Op::Div(a.0, b.0), v))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).exp();
        self.push(Op::Exp(a.0), v)
    }

    pub fn ln(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let va = self.value(a);
        if va <= 0.0 {
            return Err(AutodiffError::Domain { op: "log", value: va });
        }
        Ok(self.push(Op::Ln(a.0), va.ln()))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let va = self.value(a);
        if va < 0.0 {
            return Err(AutodiffError::Domain { op: "sqrt", value: va });
        }
        Ok(self.push(Op::Sqrt(a.0), va.sqrt()))
    }

    /// General power a^b; base must be positive.
    pub fn pow(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let va = self.value(a);
        if va <= 0.0 {
            return Err(AutodiffError::Domain { op: "pow", value: va });
        }
        let v = va.powf(self.value(b));
        Ok(self.push(Op::Pow(a.0, b.0), v))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = softplus(self.value(a));
        self.push(Op::Softplus(a.0), v)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = sigmoid(self.value(a));
        self.push(Op::Sigmoid(a.0), v)
    }

    pub fn max(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).max(self.value(b));
        self.push(Op::Max(a.0, b.0), v)
    }

    pub fn min(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).min(self.value(b));
        self.push(Op::Min(a.0, b.0), v)
    }

    /// Absolute value with subgradient 0 at the origin.
    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).abs();
        self.push(Op::Abs(a.0), v)
    }

    /// Forward value passes through; the backward sweep treats it as const.
    pub fn stop_grad(&mut self, a: Var) -> Var {
        let v = self.value(a);
        self.push(Op::StopGrad, v)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let z = self.constant(0.0);
        self.sub(z, a)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = self.constant(c);
        self.mul(a, c)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let c = self.constant(c);
        self.add(a, c)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    pub fn sum(&mut self, xs: &[Var]) -> Var {
        match xs {
            [] => self.constant(0.0),
            [x] => *x,
            _ => {
                let ones: Vec<(Var, f64)> = xs.iter().map(|&x| (x, 1.0)).collect();
                self.dot_const(&ones)
            }
        }
    }

    /// sum_i a_i * b_i as a single node.
    pub fn dot_nodes(&mut self, terms: &[(Var, Var)]) -> Var {
        let start = self.pairs.len() as u32;
        let mut v = 0.0;
        for &(a, b) in terms {
            v += self.value(a) * self.value(b);
            self.pairs.push((a.0, b.0));
        }
        self.push(Op::DotNodes { start, len: terms.len() as u32 }, v)
    }

    /// sum_i a_i * c_i with constant weights as a single node.
    pub fn dot_const(&mut self, terms: &[(Var, f64)]) -> Var {
        let start = self.weighted.len() as u32;
        let mut v = 0.0;
        for &(a, c) in terms {
            v += self.value(a) * c;
            self.weighted.push((a.0, c));
        }
        self.push(Op::DotConst { start, len: terms.len() as u32 }, v)
    }

    pub fn dot3(&mut self, a: [Var; 3], b: [Var; 3]) -> Var {
        self.dot_nodes(&[(a[0], b[0]), (a[1], b[1]), (a[2], b[2])])
    }

    /// Unit vector a/|a|; errors when the norm is zero.
    pub fn normalize3(&mut self, a: [Var; 3]) -> Result<[Var; 3], AutodiffError> {
        let n2 = self.dot3(a, a);
        if self.value(n2) == 0.0 {
            return Err(AutodiffError::Domain { op: "normalize3", value: 0.0 });
        }
        let n = self.sqrt(n2)?;
        Ok([self.div(a[0], n)?, self.div(a[1], n)?, self.div(a[2], n)?])
    }

    /// Numerically stable softmax; the max shift is a constant, which leaves
    /// the gradient identical to the unshifted form.
    pub fn softmax(&mut self, xs: &[Var]) -> Vec<Var> {
        assert!(!xs.is_empty(), "softmax over empty slice");
        let m = xs.iter().map(|&x| self.value(x)).fold(f64::NEG_INFINITY, f64::max);
        let shift = self.constant(m);
        let exps: Vec<Var> = xs
            .iter()
            .map(|&x| {
                let d = self.sub(x, shift);
                self.exp(d)
            })
            .collect();
        let total = self.sum(&exps);
        exps.iter()
            .map(|&e| self.div(e, total).expect("softmax sum is positive"))
            .collect()
    }

    /// Reverse sweep from a scalar output. Returns one gradient per
    /// parameter slot (length `n_params`).
    pub fn backward(&self, output: Var) -> Vec<f64> {
        let mut grads = vec![0.0f64; self.n_params];
        self.sweep(output, &mut |p, a| grads[p] += a);
        grads
    }

    /// Like `backward` but collects only the touched parameter slots;
    /// useful when a huge parameter vector is touched sparsely per tape.
    /// Entries may repeat a slot (shared leaves); callers accumulate.
    pub fn backward_sparse(&self, output: Var) -> Vec<(u32, f64)> {
        let mut grads = Vec::new();
        self.sweep(output, &mut |p, a| grads.push((p as u32, a)));
        grads
    }

    fn sweep(&self, output: Var, sink: &mut dyn FnMut(usize, f64)) {
        let n = self.ops.len();
        let mut adj = vec![0.0f64; n];
        adj[output.0 as usize] = 1.0;
        for i in (0..n).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            match self.ops[i] {
                Op::Const | Op::StopGrad => {}
                Op::Param(p) => sink(p as usize, a),
                Op::Add(x, y) => {
                    adj[x as usize] += a;
                    adj[y as usize] += a;
                }
                Op::Sub(x, y) => {
                    adj[x as usize] += a;
                    adj[y as usize] -= a;
                }
                Op::Mul(x, y) => {
                    adj[x as usize] += a * self.vals[y as usize];
                    adj[y as usize] += a * self.vals[x as usize];
                }
                Op::Div(x, y) => {
                    let vy = self.vals[y as usize];
                    adj[x as usize] += a / vy;
                    adj[y as usize] -= a * self.vals[i] / vy;
                }
                Op::Exp(x) => adj[x as usize] += a * self.vals[i],
                Op::Ln(x) => adj[x as usize] += a / self.vals[x as usize],
                Op::Sqrt(x) => adj[x as usize] += a * 0.5 / self.vals[i],
                Op::Pow(x, y) => {
                    let vx = self.vals[x as usize];
                    let vy = self.vals[y as usize];
                    adj[x as usize] += a * vy * self.vals[i] / vx;
                    adj[y as usize] += a * self.vals[i] * vx.ln();
                }
                Op::Softplus(x) => adj[x as usize] += a * sigmoid(self.vals[x as usize]),
                Op::Sigmoid(x) => {
                    let s = self.vals[i];
                    adj[x as usize] += a * s * (1.0 - s);
                }
                Op::Max(x, y) => {
                    if self.vals[x as usize] >= self.vals[y as usize] {
                        adj[x as usize] += a;
                    } else {
                        adj[y as usize] += a;
                    }
                }
                Op::Min(x, y) => {
                    if self.vals[x as usize] <= self.vals[y as usize] {
                        adj[x as usize] += a;
                    } else {
                        adj[y as usize] += a;
                    }
                }
                Op::Abs(x) => {
                    let vx = self.vals[x as usize];
                    let s = if vx > 0.0 {
                        1.0
                    } else if vx < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    adj[x as usize] += a * s;
                }
                Op::DotNodes { start, len } => {
                    for &(x, y) in &self.pairs[start as usize..(start + len) as usize] {
                        adj[x as usize] += a * self.vals[y as usize];
                        adj[y as usize] += a * self.vals[x as usize];
                    }
                }
                Op::DotConst { start, len } => {
                    for &(x, c) in &self.weighted[start as usize..(start + len) as usize] {
                        adj[x as usize] += a * c;
                    }
                }
            }
        }
    }
}

#[derive(Debug, PartialEq, Eq)]
pub enum AdamOutcome {
    Applied,
    /// The whole update was skipped because a gradient was non-finite.
    SkippedNonFinite { index: usize },
}

/// Adam with bias correction.
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState { m: vec![0.0; n], v: vec![0.0; n], t: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    /// Grows the state if a later tape registered more parameters.
    pub fn ensure_len(&mut self, n: usize) {
        if n > self.m.len() {
            self.m.resize(n, 0.0);
            self.v.resize(n, 0.0);
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> AdamOutcome {
        self.step_scaled(params, grads, lr, |_| 1.0)
    }

    /// Adam step with a per-parameter learning-rate multiplier.
    pub fn step_scaled(
        &mut self,
        params: &mut [f64],
        grads: &[f64],
        lr: f64,
        scale: impl Fn(usize) -> f64,
    ) -> AdamOutcome {
        assert_eq!(params.len(), grads.len(), "parameter/gradient shape mismatch");
        self.ensure_len(params.len());
        if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
            return AdamOutcome::SkippedNonFinite { index };
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            params[i] -= lr * scale(i) * mhat / (vhat.sqrt() + self.eps);
        }
        AdamOutcome::Applied
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    #[test]
    fn record_forward_values() {
        let mut t = Tape::new();
        let a = t.constant(3.0);
        let b = t.constant(4.0);
        let c = t.mul(a, b);
        assert_eq!(t.value(c), 12.0);

        let z = t.constant(0.0);
        let sp = t.softplus(z);
        assert!((t.value(sp) - 2.0f64.ln()).abs() < 1e-12);

        let ones = [t.constant(1.0), t.constant(1.0), t.constant(1.0)];
        let sm = t.softmax(&ones);
        for v in sm {
            assert!((t.value(v) - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn domain_errors_name_op_and_value() {
        let mut t = Tape::new();
        let neg = t.constant(-2.0);
        let err = t.ln(neg).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("log") && msg.contains("-2"), "{msg}");

        let a = t.constant(1.0);
        let z = t.constant(0.0);
        assert!(t.div(a, z).is_err());
        assert!(t.sqrt(neg).is_err());
    }

    #[test]
    fn backward_square_and_stopgrad() {
        let mut t = Tape::new();
        let x = t.param(0, 3.0);
        let y = t.mul(x, x);
        let g = t.backward(y);
        assert_eq!(g[0], 6.0);

        let mut t = Tape::new();
        let x = t.param(0, 3.0);
        let frozen = t.stop_grad(x);
        let y = t.mul(frozen, x);
        assert_eq!(t.value(y), 9.0);
        let g = t.backward(y);
        assert_eq!(g[0], 3.0);
    }

    /// Random 50-node graphs checked against central differences.
    #[test]
    fn backward_matches_finite_differences() {
        fn build(t: &mut Tape, params: &[f64], seed: u64) -> Var {
            let mut rng = RngStream::new(seed);
            let mut pool: Vec<Var> = params.iter().enumerate().map(|(i, &p)| t.param(i, p)).collect();
            for _ in 0..50 {
                let a = pool[rng.next_usize(pool.len())];
                let b = pool[rng.next_usize(pool.len())];
                let node = match rng.next_usize(8) {
                    0 => t.add(a, b),
                    1 => t.sub(a, b),
                    2 => t.mul(a, b),
                    3 => t.softplus(a),
                    4 => t.sigmoid(a),
                    5 => {
                        let s = t.scale(a, 0.1);
                        t.exp(s)
                    }
                    6 => t.dot_nodes(&[(a, b), (b, b)]),
                    _ => {
                        let sq = t.mul(b, b);
                        let d = t.add_const(sq, 1.0);
                        t.div(a, d).unwrap()
                    }
                };
                pool.push(node);
            }
            let all: Vec<Var> = pool.iter().skip(params.len()).copied().collect();
            let s = t.sum(&all);
            t.scale(s, 1e-2)
        }

        for seed in [11u64, 12, 13] {
            let mut rng = RngStream::new(seed ^ 0xabc);
            let params: Vec<f64> = (0..4).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let mut t = Tape::new();
            let out = build(&mut t, &params, seed);
            let grads = t.backward(out);

            let h = 1e-5;
            for i in 0..params.len() {
                let mut plus = params.clone();
                plus[i] += h;
                let mut minus = params.clone();
                minus[i] -= h;
                let mut tp = Tape::new();
                let op = build(&mut tp, &plus, seed);
                let mut tm = Tape::new();
                let om = build(&mut tm, &minus, seed);
                let fd = (tp.value(op) - tm.value(om)) / (2.0 * h);
                let denom = fd.abs().max(grads[i].abs()).max(1e-8);
                assert!(
                    (fd - grads[i]).abs() / denom < 1e-4,
                    "seed {seed} param {i}: ad {} vs fd {fd}",
                    grads[i]
                );
            }
        }
    }

    #[test]
    fn backward_is_linear() {
        let mut rng = RngStream::new(77);
        for _ in 0..8 {
            let p0 = rng.uniform(-1.0, 1.0);
            let p1 = rng.uniform(-1.0, 1.0);
            let (alpha, beta) = (rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0));

            let build_f = |t: &mut Tape| {
                let x = t.param(0, p0);
                let y = t.param(1, p1);
                let xy = t.mul(x, y);
                t.softplus(xy)
            };
            let build_g = |t: &mut Tape| {
                let x = t.param(0, p0);
                let y = t.param(1, p1);
                let s = t.sub(x, y);
                t.sigmoid(s)
            };

            let mut tf = Tape::new();
            let f = build_f(&mut tf);
            let gf = tf.backward(f);

            let mut tg = Tape::new();
            let g = build_g(&mut tg);
            let gg = tg.backward(g);

            let mut tc = Tape::new();
            let fc = build_f(&mut tc);
            let gc = build_g(&mut tc);
            let fa = tc.scale(fc, alpha);
            let gb = tc.scale(gc, beta);
            let combo = tc.add(fa, gb);
            let gcombo = tc.backward(combo);

            for i in 0..2 {
                let expect = alpha * gf[i] + beta * gg[i];
                let denom = expect.abs().max(1e-12);
                assert!((gcombo[i] - expect).abs() / denom < 1e-9);
            }
        }
    }

    #[test]
    fn adam_basics() {
        // zero gradient leaves parameters untouched
        let mut adam = AdamState::new(2);
        let mut p = [1.0, -2.0];
        assert_eq!(adam.step(&mut p, &[0.0, 0.0], 0.1), AdamOutcome::Applied);
        assert_eq!(p, [1.0, -2.0]);

        // first step with any constant gradient moves by ~lr
        let mut adam = AdamState::new(1);
        let mut p = [0.5];
        adam.step(&mut p, &[3.7], 0.01);
        assert!((p[0] - (0.5 - 0.01)).abs() < 1e-6);

        // non-finite gradient skips the update and reports the slot
        let mut adam = AdamState::new(2);
        let mut p = [1.0, 1.0];
        let out = adam.step(&mut p, &[0.1, f64::NAN], 0.1);
        assert_eq!(out, AdamOutcome::SkippedNonFinite { index: 1 });
        assert_eq!(p, [1.0, 1.0]);
    }

    #[test]
    fn adam_descends_quadratic_bowl() {
        let mut adam = AdamState::new(2);
        let mut p = vec![1.0, 1.0];
        for _ in 0..500 {
            let mut t = Tape::new();
            let x = t.param(0, p[0]);
            let y = t.param(1, p[1]);
            let x2 = t.mul(x, x);
            let y2 = t.mul(y, y);
            let f = t.add(x2, y2);
            let g = t.backward(f);
            adam.step(&mut p, &g, 0.05);
        }
        let norm = (p[0] * p[0] + p[1] * p[1]).sqrt();
        assert!(norm < 1e-3, "|theta| = {norm} after 500 steps");
    }
}
