//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] records one forward pass as an append-only arena of operation
//! nodes; [`Tape::backward`] walks the arena in reverse and accumulates
//! adjoints. Tapes are rebuilt per forward pass and are strictly
//! single-threaded; distinct tapes may live on distinct threads.
//!
//! Broadcasting is deliberately limited to scalar-with-tensor and equal
//! shapes. `log` and `div` clamp their (denominator) inputs at
//! [`NUMERIC_FLOOR`] and count every clamped element on the tape, so callers
//! can assert that a healthy run never clamped.

use crate::error::{Error, Result};
use crate::tensor::{matmul, matvec_transposed, Tensor};

/// Smallest magnitude fed to `ln` or used as a denominator.
pub const NUMERIC_FLOOR: f64 = 1e-300;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    /// Clamp into `[lo, hi]`; adjoints pass through strictly inside the
    /// interval and vanish on the clamped region.
    Clamp(Var, f64, f64),
    MatMul(Var, Var),
    Sum(Var),
    StopGrad(#[allow(dead_code)] Var),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Computation tape: append-only node arena plus a numeric-event counter.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    clamp_events: u64,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    adj: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Adjoint of `v`, if any gradient reached it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.adj[v.0].as_ref()
    }

    /// Adjoint of `v`, or a zero tensor of the given shape.
    pub fn wrt_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        match self.adj[v.0] {
            Some(ref t) => t.clone(),
            None => Tensor::zeros(shape.to_vec()),
        }
    }
}

fn broadcast_shapes(a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    if a.shape() == b.shape() {
        Ok(a.shape().to_vec())
    } else if a.is_scalar() {
        Ok(b.shape().to_vec())
    } else if b.is_scalar() {
        Ok(a.shape().to_vec())
    } else {
        Err(Error::shape(format!(
            "elementwise op needs equal or scalar-broadcast shapes, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )))
    }
}

#[inline]
fn bget(data: &[f64], i: usize) -> f64 {
    if data.len() == 1 {
        data[0]
    } else {
        data[i]
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of clamp events recorded by `log`/`div` during forward passes.
    pub fn clamp_events(&self) -> u64 {
        self.clamp_events
    }

    /// Forward value of a node.
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    /// Registers a trainable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    /// Registers a non-trainable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Constant, value)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        op: fn(Var, Var) -> Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let shape = broadcast_shapes(self.value(a), self.value(b))?;
        let n: usize = shape.iter().product();
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            out.push(f(bget(da, i), bget(db, i)));
        }
        Ok(self.push(op(a, b), Tensor::from_vec(shape, out)?))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul, |x, y| x * y)
    }

    /// Division with the denominator clamped away from zero.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = broadcast_shapes(self.value(a), self.value(b))?;
        let n: usize = shape.iter().product();
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut clamps = 0;
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let denom = bget(db, i);
            let safe = if denom.abs() < NUMERIC_FLOOR {
                clamps += 1;
                if denom.is_sign_negative() {
                    -NUMERIC_FLOOR
                } else {
                    NUMERIC_FLOOR
                }
            } else {
                denom
            };
            out.push(bget(da, i) / safe);
        }
        self.clamp_events += clamps;
        Ok(self.push(Op::Div(a, b), Tensor::from_vec(shape, out)?))
    }

    fn unary(&mut self, a: Var, op: fn(Var) -> Op, f: impl Fn(f64) -> f64) -> Var {
        let out: Vec<f64> = self.value(a).data().iter().map(|&x| f(x)).collect();
        let shape = self.value(a).shape().to_vec();
        self.push(op(a), Tensor::from_vec(shape, out).unwrap())
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, Op::Neg, |x| -x)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh, f64::tanh)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp, f64::exp)
    }

    /// Natural log with the input clamped at [`NUMERIC_FLOOR`]; clamped
    /// elements are counted on the tape.
    pub fn log(&mut self, a: Var) -> Var {
        let mut clamps = 0;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .map(|&x| {
                if x < NUMERIC_FLOOR {
                    clamps += 1;
                    NUMERIC_FLOOR.ln()
                } else {
                    x.ln()
                }
            })
            .collect();
        self.clamp_events += clamps;
        let shape = self.value(a).shape().to_vec();
        self.push(Op::Log(a), Tensor::from_vec(shape, out).unwrap())
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid, |x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        })
    }

    /// Clamp into `[lo, hi]` with pass-through gradient strictly inside.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .map(|&x| x.clamp(lo, hi))
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.push(Op::Clamp(a, lo, hi), Tensor::from_vec(shape, out).unwrap())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = matmul(self.value(a), self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), value))
    }

    /// Sum of all entries, producing a scalar node.
    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(s))
    }

    /// Identity forward; severs adjoint flow on backward.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.push(Op::StopGrad(a), value)
    }

    /// Convenience: `a + c` for a scalar constant `c`.
    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let c = self.scalar(c);
        self.add(a, c).expect("scalar broadcast is always valid")
    }

    /// Convenience: `a * c` for a scalar constant `c`.
    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let c = self.scalar(c);
        self.mul(a, c).expect("scalar broadcast is always valid")
    }

    /// Reverse pass from a scalar loss node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward expects a scalar loss node, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let g = match adj[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(id, &g, &mut adj);
            adj[id] = Some(g);
        }

        let grads = adj
            .into_iter()
            .enumerate()
            .map(|(id, a)| {
                a.map(|data| {
                    Tensor::from_vec(self.nodes[id].value.shape().to_vec(), data).unwrap()
                })
            })
            .collect();
        Ok(Gradients { adj: grads })
    }

    fn accumulate(adj: &mut [Option<Vec<f64>>], target: Var, len: usize, contrib: impl Fn(usize) -> f64) {
        let slot = adj[target.0].get_or_insert_with(|| vec![0.0; len]);
        if slot.len() == 1 && len == 1 {
            slot[0] += contrib(0);
        } else {
            for (i, s) in slot.iter_mut().enumerate() {
                *s += contrib(i);
            }
        }
    }

    /// Adds `g`-weighted contributions into a binary operand, reducing over
    /// the broadcast when the operand is scalar.
    fn accumulate_broadcast(
        adj: &mut [Option<Vec<f64>>],
        target: Var,
        target_len: usize,
        g: &[f64],
        per_element: impl Fn(usize) -> f64,
    ) {
        if target_len == 1 && g.len() > 1 {
            let total: f64 = (0..g.len()).map(|i| g[i] * per_element(i)).sum();
            let slot = adj[target.0].get_or_insert_with(|| vec![0.0; 1]);
            slot[0] += total;
        } else {
            Self::accumulate(adj, target, target_len, |i| g[i] * per_element(i));
        }
    }

    fn propagate(&self, id: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let y = node.value.data();
        match node.op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                let (la, lb) = (self.value(a).len(), self.value(b).len());
                Self::accumulate_broadcast(adj, a, la, g, |_| 1.0);
                Self::accumulate_broadcast(adj, b, lb, g, |_| 1.0);
            }
            Op::Sub(a, b) => {
                let (la, lb) = (self.value(a).len(), self.value(b).len());
                Self::accumulate_broadcast(adj, a, la, g, |_| 1.0);
                Self::accumulate_broadcast(adj, b, lb, g, |_| -1.0);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                let (da, db) = (ta.data().to_vec(), tb.data().to_vec());
                Self::accumulate_broadcast(adj, a, ta.len(), g, |i| bget(&db, i));
                Self::accumulate_broadcast(adj, b, tb.len(), g, |i| bget(&da, i));
            }
            Op::Div(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                let (da, db) = (ta.data().to_vec(), tb.data().to_vec());
                let safe = |i: usize| {
                    let d = bget(&db, i);
                    if d.abs() < NUMERIC_FLOOR {
                        f64::NAN // marker: clamped, gradient vanishes
                    } else {
                        d
                    }
                };
                Self::accumulate_broadcast(adj, a, ta.len(), g, |i| {
                    let d = safe(i);
                    if d.is_nan() {
                        0.0
                    } else {
                        1.0 / d
                    }
                });
                Self::accumulate_broadcast(adj, b, tb.len(), g, |i| {
                    let d = safe(i);
                    if d.is_nan() {
                        0.0
                    } else {
                        -bget(&da, i) / (d * d)
                    }
                });
            }
            Op::Neg(a) => {
                Self::accumulate_broadcast(adj, a, self.value(a).len(), g, |_| -1.0);
            }
            Op::Tanh(a) => {
                let yv = y.to_vec();
                Self::accumulate_broadcast(adj, a, self.value(a).len(), g, |i| 1.0 - yv[i] * yv[i]);
            }
            Op::Exp(a) => {
                let yv = y.to_vec();
                Self::accumulate_broadcast(adj, a, self.value(a).len(), g, |i| yv[i]);
            }
            Op::Log(a) => {
                let xv = self.value(a).data().to_vec();
                Self::accumulate_broadcast(adj, a, self.value(a).len(), g, |i| {
                    if xv[i] < NUMERIC_FLOOR {
                        0.0
                    } else {
                        1.0 / xv[i]
                    }
                });
            }
            Op::Sigmoid(a) => {
                let yv = y.to_vec();
                Self::accumulate_broadcast(adj, a, self.value(a).len(), g, |i| yv[i] * (1.0 - yv[i]));
            }
            Op::Clamp(a, lo, hi) => {
                let xv = self.value(a).data().to_vec();
                Self::accumulate_broadcast(adj, a, self.value(a).len(), g, |i| {
                    if xv[i] > lo && xv[i] < hi {
                        1.0
                    } else {
                        0.0
                    }
                });
            }
            Op::MatMul(a, b) => {
                let ta = self.value(a);
                let tb = self.value(b);
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                match tb.shape() {
                    [_] => {
                        // y = A x, y in R^m
                        let x = tb.data();
                        let a_data = ta.data();
                        Self::accumulate(adj, a, m * k, |idx| {
                            let (i, j) = (idx / k, idx % k);
                            g[i] * x[j]
                        });
                        let atg = matvec_transposed(ta, g);
                        let _ = a_data;
                        Self::accumulate(adj, b, k, |j| atg.data()[j]);
                    }
                    [_, n] => {
                        let n = *n;
                        let a_data = ta.data().to_vec();
                        let b_data = tb.data().to_vec();
                        Self::accumulate(adj, a, m * k, |idx| {
                            let (i, kk) = (idx / k, idx % k);
                            (0..n).map(|j| g[i * n + j] * b_data[kk * n + j]).sum()
                        });
                        Self::accumulate(adj, b, k * n, |idx| {
                            let (kk, j) = (idx / n, idx % n);
                            (0..m).map(|i| a_data[i * k + kk] * g[i * n + j]).sum()
                        });
                    }
                    _ => unreachable!("matmul forward already validated shapes"),
                }
            }
            Op::Sum(a) => {
                Self::accumulate(adj, a, self.value(a).len(), |_| g[0]);
            }
            Op::StopGrad(_) => {}
        }
    }
}

/// Maximum relative error between reverse-mode gradients and central finite
/// differences, over every entry of every parameter.
///
/// `f` must be a deterministic function of its parameter leaves; any sampled
/// quantities must be bound as constants beforehand.
pub fn grad_check<F>(f: F, params: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(Error::contract("grad_check requires step > 0"));
    }

    let eval = |params: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let leaves: Vec<Var> = params.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = f(&mut tape, &leaves)?;
        Ok(tape.value(loss).data()[0])
    };

    let mut tape = Tape::new();
    let leaves: Vec<Var> = params.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &leaves)?;
    let grads = tape.backward(loss)?;

    let mut max_rel = 0.0f64;
    for (pi, param) in params.iter().enumerate() {
        let ad = grads.wrt_or_zeros(leaves[pi], param.shape());
        for j in 0..param.len() {
            let mut plus = params.to_vec();
            plus[pi].data_mut()[j] += step;
            let mut minus = params.to_vec();
            minus[pi].data_mut()[j] -= step;
            let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * step);
            let rel = (ad.data()[j] - fd).abs() / fd.abs().max(1.0);
            max_rel = max_rel.max(rel);
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    #[test]
    fn square_gradient_at_three() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn tanh_gradient_at_zero_is_one() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.0));
        let y = tape.tanh(x);
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[1.0]);
    }

    #[test]
    fn trivial_forward_values() {
        let mut tape = Tape::new();
        let zero = tape.constant(Tensor::scalar(0.0));
        let t = tape.tanh(zero);
        assert_eq!(tape.value(t).data(), &[0.0]);
        let e = tape.exp(zero);
        assert_eq!(tape.value(e).data(), &[1.0]);
    }

    #[test]
    fn sigmoid_matches_direct_formula_on_grid() {
        let mut tape = Tape::new();
        let xs: Vec<f64> = (0..81).map(|i| -10.0 + 0.25 * i as f64).collect();
        let x = tape.constant(Tensor::vector(xs.clone()));
        let s = tape.sigmoid(x);
        for (i, &xi) in xs.iter().enumerate() {
            let want = 1.0 / (1.0 + (-xi).exp());
            let got = tape.value(s).data()[i];
            assert!((got - want).abs() <= 1e-15 * want.max(1.0), "x={xi}");
        }
    }

    #[test]
    fn stop_gradient_blocks_adjoints() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let sg = tape.stop_gradient(x);
        let y = tape.mul(sg, sg).unwrap();
        let grads = tape.backward(y).unwrap();
        assert!(grads.wrt(x).is_none());
        assert_eq!(tape.value(y).data(), &[4.0]);
    }

    #[test]
    fn non_scalar_loss_is_contract_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn log_clamps_and_counts() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 0.0]));
        let y = tape.log(x);
        assert_eq!(tape.clamp_events(), 1);
        assert_eq!(tape.value(y).data()[0], 0.0);
        assert!((tape.value(y).data()[1] - NUMERIC_FLOOR.ln()).abs() < 1e-9);
        // gradient through the clamped element vanishes
        let s = tape.sum(y);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[1.0, 0.0]);
    }

    #[test]
    fn two_layer_mlp_matches_finite_differences() {
        let mut rng = RngStream::seed(42);
        let (d_in, h) = (4, 5);
        let w1 = Tensor::matrix(h, d_in, rng.standard_normal_vec(h * d_in)).unwrap();
        let b1 = Tensor::vector(rng.standard_normal_vec(h));
        let w2 = Tensor::matrix(1, h, rng.standard_normal_vec(h)).unwrap();
        let x = Tensor::vector(rng.standard_normal_vec(d_in));

        let f = |tape: &mut Tape, leaves: &[Var]| -> Result<Var> {
            let input = tape.constant(x.clone());
            let h1 = tape.matmul(leaves[0], input)?;
            let h1 = tape.add(h1, leaves[1])?;
            let h1 = tape.tanh(h1);
            let out = tape.matmul(leaves[2], h1)?;
            Ok(tape.sum(out))
        };
        let err = grad_check(f, &[w1, b1, w2], 1e-5).unwrap();
        assert!(err < 1e-5, "max relative error {err}");
    }

    #[test]
    fn grad_check_quadratic_is_tight() {
        // f(x) = sum(x * x), analytic gradient 2x; central differences are
        // exact for quadratics up to rounding.
        let x = Tensor::vector(vec![0.5, -1.5, 2.0]);
        let f = |tape: &mut Tape, leaves: &[Var]| -> Result<Var> {
            let sq = tape.mul(leaves[0], leaves[0])?;
            Ok(tape.sum(sq))
        };
        let err = grad_check(f, &[x], 1e-4).unwrap();
        assert!(err < 1e-9, "max relative error {err}");
    }

    #[test]
    fn grad_check_constant_function_is_zero() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let f = |tape: &mut Tape, _leaves: &[Var]| -> Result<Var> { Ok(tape.scalar(3.5)) };
        let err = grad_check(f, &[x], 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn grad_check_rejects_nonpositive_step() {
        let x = Tensor::scalar(1.0);
        let f = |tape: &mut Tape, leaves: &[Var]| -> Result<Var> { Ok(tape.sum(leaves[0])) };
        assert!(grad_check(f, &[x], 0.0).is_err());
    }

    #[test]
    fn scalar_broadcast_gradients_reduce() {
        // y = sum(v * s): dv = s, ds = sum(v)
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let s = tape.leaf(Tensor::scalar(2.0));
        let prod = tape.mul(v, s).unwrap();
        let y = tape.sum(prod);
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.wrt(v).unwrap().data(), &[2.0, 2.0, 2.0]);
        assert_eq!(grads.wrt(s).unwrap().data(), &[6.0]);
    }

    #[test]
    fn matmul_matrix_matrix_gradients_match_fd() {
        let mut rng = RngStream::seed(9);
        let a = Tensor::matrix(3, 4, rng.standard_normal_vec(12)).unwrap();
        let b = Tensor::matrix(4, 2, rng.standard_normal_vec(8)).unwrap();
        let f = |tape: &mut Tape, leaves: &[Var]| -> Result<Var> {
            let y = tape.matmul(leaves[0], leaves[1])?;
            let sq = tape.mul(y, y)?;
            Ok(tape.sum(sq))
        };
        let err = grad_check(f, &[a, b], 1e-5).unwrap();
        assert!(err < 1e-7, "max relative error {err}");
    }
}
