//! Scalar reverse-mode automatic differentiation.
//!
//! Model code is written once against the [`Real`] trait and evaluated either
//! with plain `f64` or with [`Var`], which records every operation on a
//! thread-local tape. [`gradient`] and [`jacobian`] run the reverse sweep.
//!
//! The tape is per thread, so independent evaluations may run concurrently on
//! different threads. Nested recording on one thread is rejected.

use std::cell::{Cell, RefCell};
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

/// Scalar field used by every differentiable routine in the crate.
pub trait Real:
    Copy
    + std::fmt::Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
{
    fn cst(v: f64) -> Self;
    fn value(self) -> f64;
    fn sqrt(self) -> Self;

    fn zero() -> Self {
        Self::cst(0.0)
    }
    fn one() -> Self {
        Self::cst(1.0)
    }
    fn square(self) -> Self {
        self * self
    }
}

impl Real for f64 {
    #[inline]
    fn cst(v: f64) -> Self {
        v
    }
    #[inline]
    fn value(self) -> f64 {
        self
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
}

const NONE: u32 = u32::MAX;

#[derive(Clone, Copy)]
struct Node {
    a: u32,
    da: f64,
    b: u32,
    db: f64,
}

thread_local! {
    static TAPE: RefCell<Vec<Node>> = const { RefCell::new(Vec::new()) };
    static RECORDING: Cell<bool> = const { Cell::new(false) };
}

/// A recorded scalar. Constants carry no tape index.
#[derive(Clone, Copy, Debug)]
pub struct Var {
    idx: u32,
    val: f64,
}

impl Var {
    pub fn constant(val: f64) -> Self {
        Var { idx: NONE, val }
    }

    pub fn is_constant(&self) -> bool {
        self.idx == NONE
    }

    #[inline]
    fn push(val: f64, a: u32, da: f64, b: u32, db: f64) -> Var {
        if a == NONE && b == NONE {
            return Var { idx: NONE, val };
        }
        let idx = TAPE.with(|t| {
            let mut t = t.borrow_mut();
            t.push(Node { a, da, b, db });
            (t.len() - 1) as u32
        });
        Var { idx, val }
    }

    #[inline]
    fn unary(val: f64, a: &Var, da: f64) -> Var {
        Var::push(val, a.idx, da, NONE, 0.0)
    }
}

impl Real for Var {
    #[inline]
    fn cst(v: f64) -> Self {
        Var::constant(v)
    }
    #[inline]
    fn value(self) -> f64 {
        self.val
    }
    #[inline]
    fn sqrt(self) -> Self {
        let s = self.val.sqrt();
        Var::unary(s, &self, 0.5 / s)
    }
}

impl Add for Var {
    type Output = Var;
    #[inline]
    fn add(self, o: Var) -> Var {
        Var::push(self.val + o.val, self.idx, 1.0, o.idx, 1.0)
    }
}
impl Sub for Var {
    type Output = Var;
    #[inline]
    fn sub(self, o: Var) -> Var {
        Var::push(self.val - o.val, self.idx, 1.0, o.idx, -1.0)
    }
}
impl Mul for Var {
    type Output = Var;
    #[inline]
    fn mul(self, o: Var) -> Var {
        Var::push(self.val * o.val, self.idx, o.val, o.idx, self.val)
    }
}
impl Div for Var {
    type Output = Var;
    #[inline]
    fn div(self, o: Var) -> Var {
        let inv = 1.0 / o.val;
        let q = self.val * inv;
        Var::push(q, self.idx, inv, o.idx, -q * inv)
    }
}
impl Neg for Var {
    type Output = Var;
    #[inline]
    fn neg(self) -> Var {
        Var::unary(-self.val, &self, -1.0)
    }
}
impl Add<f64> for Var {
    type Output = Var;
    #[inline]
    fn add(self, o: f64) -> Var {
        Var::unary(self.val + o, &self, 1.0)
    }
}
impl Sub<f64> for Var {
    type Output = Var;
    #[inline]
    fn sub(self, o: f64) -> Var {
        Var::unary(self.val - o, &self, 1.0)
    }
}
impl Mul<f64> for Var {
    type Output = Var;
    #[inline]
    fn mul(self, o: f64) -> Var {
        Var::unary(self.val * o, &self, o)
    }
}
impl Div<f64> for Var {
    type Output = Var;
    #[inline]
    fn div(self, o: f64) -> Var {
        Var::unary(self.val / o, &self, 1.0 / o)
    }
}
impl AddAssign for Var {
    fn add_assign(&mut self, o: Var) {
        *self = *self + o;
    }
}
impl SubAssign for Var {
    fn sub_assign(&mut self, o: Var) {
        *self = *self - o;
    }
}
impl MulAssign for Var {
    fn mul_assign(&mut self, o: Var) {
        *self = *self * o;
    }
}

struct Recording;

impl Recording {
    fn start() -> Self {
        RECORDING.with(|r| {
            assert!(!r.get(), "nested autodiff recording on one thread");
            r.set(true);
        });
        TAPE.with(|t| t.borrow_mut().clear());
        Recording
    }
}

impl Drop for Recording {
    fn drop(&mut self) {
        TAPE.with(|t| t.borrow_mut().clear());
        RECORDING.with(|r| r.set(false));
    }
}

fn leaves(x: &[f64]) -> Vec<Var> {
    TAPE.with(|t| {
        let mut t = t.borrow_mut();
        t.reserve(x.len() * 16);
        x.iter()
            .map(|&v| {
                t.push(Node {
                    a: NONE,
                    da: 0.0,
                    b: NONE,
                    db: 0.0,
                });
                Var {
                    idx: (t.len() - 1) as u32,
                    val: v,
                }
            })
            .collect()
    })
}

fn backward(out: &Var, n_inputs: usize, adj: &mut Vec<f64>) -> Vec<f64> {
    let mut g = vec![0.0; n_inputs];
    if out.is_constant() {
        return g;
    }
    TAPE.with(|t| {
        let t = t.borrow();
        let top = out.idx as usize;
        adj.clear();
        adj.resize(top + 1, 0.0);
        adj[top] = 1.0;
        for i in (0..=top).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            let n = t[i];
            if n.a != NONE {
                adj[n.a as usize] += a * n.da;
            }
            if n.b != NONE {
                adj[n.b as usize] += a * n.db;
            }
        }
        let k = n_inputs.min(adj.len());
        g[..k].copy_from_slice(&adj[..k]);
    });
    g
}

/// Value and gradient of a scalar function.
pub fn gradient<F, E>(x: &[f64], f: F) -> Result<(f64, Vec<f64>), E>
where
    F: FnOnce(&[Var]) -> Result<Var, E>,
{
    let _rec = Recording::start();
    let vars = leaves(x);
    let out = f(&vars)?;
    let mut adj = Vec::new();
    let g = backward(&out, x.len(), &mut adj);
    Ok((out.val, g))
}

/// Values and dense Jacobian (one row per output) of a vector function.
pub fn jacobian<F, E>(x: &[f64], f: F) -> Result<(Vec<f64>, Vec<Vec<f64>>), E>
where
    F: FnOnce(&[Var]) -> Result<Vec<Var>, E>,
{
    let _rec = Recording::start();
    let vars = leaves(x);
    let outs = f(&vars)?;
    let mut adj = Vec::new();
    let rows = outs
        .iter()
        .map(|o| backward(o, x.len(), &mut adj))
        .collect();
    Ok((outs.iter().map(|o| o.val).collect(), rows))
}
