//! Differentiable primitives and their backward rules.

use std::sync::Arc;

use super::Var;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ConvGeometry, Tensor};

/// Primitive recorded on a graph node.
#[derive(Clone, Debug)]
pub enum Op<S> {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(S),
    AddScalar(S),
    MatMul {
        ta: bool,
        tb: bool,
    },
    Tanh,
    Sqrt,
    /// Multiplication by a constant 0/1 mask (relu, clamp); the mask is
    /// parent 1 and is never tracked.
    Mask,
    SumAll,
    ExpandScalar {
        shape: Vec<usize>,
    },
    SumRows,
    BroadcastRows {
        rows: usize,
    },
    SumCols,
    BroadcastCols {
        cols: usize,
    },
    Reshape {
        from: Vec<usize>,
    },
    Gather {
        indices: Arc<Vec<usize>>,
        from: Vec<usize>,
    },
    ScatterAdd {
        indices: Arc<Vec<usize>>,
        from: Vec<usize>,
    },
    Im2Col(ConvGeometry),
    Col2Im(ConvGeometry),
}

impl<S> Op<S> {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Neg => "neg",
            Op::Scale(_) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::MatMul { .. } => "matmul",
            Op::Tanh => "tanh",
            Op::Sqrt => "sqrt",
            Op::Mask => "mask",
            Op::SumAll => "sum",
            Op::ExpandScalar { .. } => "expand_scalar",
            Op::SumRows => "sum_rows",
            Op::BroadcastRows { .. } => "broadcast_rows",
            Op::SumCols => "sum_cols",
            Op::BroadcastCols { .. } => "broadcast_cols",
            Op::Reshape { .. } => "reshape",
            Op::Gather { .. } => "gather",
            Op::ScatterAdd { .. } => "scatter_add",
            Op::Im2Col(_) => "im2col",
            Op::Col2Im(_) => "col2im",
        }
    }
}

impl<S: Scalar> Var<S> {
    pub fn add(&self, other: &Self) -> Result<Self> {
        let v = self.value().add(other.value())?;
        Ok(Self::from_op(v, Op::Add, vec![self.clone(), other.clone()]))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        let v = self.value().sub(other.value())?;
        Ok(Self::from_op(v, Op::Sub, vec![self.clone(), other.clone()]))
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        let v = self.value().mul(other.value())?;
        Ok(Self::from_op(v, Op::Mul, vec![self.clone(), other.clone()]))
    }

    pub fn div(&self, other: &Self) -> Result<Self> {
        let v = self.value().zip_map(other.value(), "div", |a, b| a / b)?;
        Ok(Self::from_op(v, Op::Div, vec![self.clone(), other.clone()]))
    }

    pub fn neg(&self) -> Self {
        Self::from_op(self.value().map(|v| -v), Op::Neg, vec![self.clone()])
    }

    pub fn scale(&self, k: S) -> Self {
        Self::from_op(self.value().scale(k), Op::Scale(k), vec![self.clone()])
    }

    pub fn add_scalar(&self, k: S) -> Self {
        Self::from_op(self.value().map(|v| v + k), Op::AddScalar(k), vec![self.clone()])
    }

    /// `op(self)·op(other)` with optional transposes, rank-2 operands only.
    pub fn matmul_t(&self, other: &Self, ta: bool, tb: bool) -> Result<Self> {
        let v = Tensor::matmul(self.value(), other.value(), ta, tb)?;
        Ok(Self::from_op(
            v,
            Op::MatMul { ta, tb },
            vec![self.clone(), other.clone()],
        ))
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        self.matmul_t(other, false, false)
    }

    pub fn tanh(&self) -> Self {
        Self::from_op(self.value().map(|v| v.tanh()), Op::Tanh, vec![self.clone()])
    }

    pub fn sqrt(&self) -> Self {
        Self::from_op(self.value().map(|v| v.sqrt()), Op::Sqrt, vec![self.clone()])
    }

    /// Elementwise product with an untracked mask.
    pub fn mask(&self, mask: Tensor<S>) -> Result<Self> {
        let v = self.value().mul(&mask)?;
        Ok(Self::from_op(v, Op::Mask, vec![self.clone(), Var::constant(mask)]))
    }

    pub fn relu(&self) -> Self {
        let mask = self.value().map(|v| if v > S::zero() { S::one() } else { S::zero() });
        self.mask(mask).expect("mask shares the input shape")
    }

    /// `max(self, lo)` elementwise. The gradient is zero where the bound is
    /// active (including ties).
    pub fn clamp_min(&self, lo: S) -> Self {
        self.clamp(lo, S::infinity())
    }

    /// Elementwise clamp to `[lo, hi]`; values at or beyond a bound get zero
    /// gradient.
    pub fn clamp(&self, lo: S, hi: S) -> Self {
        let x = self.value();
        let inside = x.map(|v| if v > lo && v < hi { S::one() } else { S::zero() });
        let clamped = x.map(|v| v.max(lo).min(hi));
        // clamped = x·inside + bound·(1 − inside)
        let offset = clamped
            .zip_map(&inside, "clamp", |c, m| if m > S::zero() { S::zero() } else { c })
            .expect("same shape");
        let masked = self.mask(inside).expect("same shape");
        if offset.data().iter().all(|v| *v == S::zero()) {
            return masked;
        }
        masked.add(&Var::constant(offset)).expect("same shape")
    }

    /// Elementwise sign with `sign(0) = 0`; never tracked.
    pub fn sign(&self) -> Self {
        Var::constant(sign_tensor(self.value()))
    }

    pub fn square(&self) -> Self {
        self.mul(self).expect("same shape")
    }

    /// Sum of every element, shape `[1]`.
    pub fn sum(&self) -> Self {
        Self::from_op(Tensor::scalar(self.value().sum()), Op::SumAll, vec![self.clone()])
    }

    pub fn mean(&self) -> Self {
        let n = S::of(self.value().numel() as f64);
        self.sum().scale(S::one() / n)
    }

    /// Broadcasts a one-element tensor to `shape`.
    pub fn expand_scalar(&self, shape: &[usize]) -> Result<Self> {
        let v = self.value().item()?;
        Ok(Self::from_op(
            Tensor::full(shape, v),
            Op::ExpandScalar { shape: shape.to_vec() },
            vec![self.clone()],
        ))
    }

    pub fn sum_rows(&self) -> Result<Self> {
        let v = self.value().sum_rows()?;
        Ok(Self::from_op(v, Op::SumRows, vec![self.clone()]))
    }

    pub fn broadcast_rows(&self, rows: usize) -> Result<Self> {
        let v = self.value().broadcast_rows(rows)?;
        Ok(Self::from_op(v, Op::BroadcastRows { rows }, vec![self.clone()]))
    }

    pub fn sum_cols(&self) -> Result<Self> {
        let v = self.value().sum_cols()?;
        Ok(Self::from_op(v, Op::SumCols, vec![self.clone()]))
    }

    pub fn broadcast_cols(&self, cols: usize) -> Result<Self> {
        let v = self.value().broadcast_cols(cols)?;
        Ok(Self::from_op(v, Op::BroadcastCols { cols }, vec![self.clone()]))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if self.shape() == shape {
            return Ok(self.clone());
        }
        let v = self.value().reshape(shape)?;
        Ok(Self::from_op(
            v,
            Op::Reshape {
                from: self.shape().to_vec(),
            },
            vec![self.clone()],
        ))
    }

    /// Flattens every non-leading axis: `[B, ...] -> [B, prod(...)]`.
    pub fn flatten_rows(&self) -> Result<Self> {
        let v = self.value();
        self.reshape(&[v.rows(), v.row_len()])
    }

    pub fn gather(&self, indices: Arc<Vec<usize>>, shape: &[usize]) -> Result<Self> {
        let v = self.value().gather(&indices, shape)?;
        Ok(Self::from_op(
            v,
            Op::Gather {
                indices,
                from: self.shape().to_vec(),
            },
            vec![self.clone()],
        ))
    }

    pub fn scatter_add(&self, indices: Arc<Vec<usize>>, shape: &[usize]) -> Result<Self> {
        let v = self.value().scatter_add(&indices, shape)?;
        Ok(Self::from_op(
            v,
            Op::ScatterAdd {
                indices,
                from: self.shape().to_vec(),
            },
            vec![self.clone()],
        ))
    }

    /// Element `i` of the flattened tensor as a `[1]` tensor.
    pub fn select(&self, i: usize) -> Result<Self> {
        self.gather(Arc::new(vec![i]), &[1])
    }

    pub fn im2col(&self, geom: ConvGeometry) -> Result<Self> {
        let v = self.value().im2col(&geom)?;
        Ok(Self::from_op(v, Op::Im2Col(geom), vec![self.clone()]))
    }

    pub fn col2im(&self, geom: ConvGeometry) -> Result<Self> {
        let v = self.value().col2im(&geom)?;
        Ok(Self::from_op(v, Op::Col2Im(geom), vec![self.clone()]))
    }

    /// `Σ self·other`, shape `[1]`.
    pub fn dot(&self, other: &Self) -> Result<Self> {
        Ok(self.mul(other)?.sum())
    }

    /// Euclidean norm of every element, shape `[1]`.
    pub fn norm(&self) -> Self {
        self.square().sum().sqrt()
    }

    /// Gradient contributions for each parent given the output gradient `g`.
    ///
    /// Written with the primitives above so that, when recording is on, the
    /// returned gradients are themselves differentiable.
    pub(crate) fn backward_rule(&self, g: &Var<S>) -> Result<Vec<Option<Var<S>>>> {
        let p = self.parents();
        let out = match self.op() {
            Op::Leaf => vec![],
            Op::Add => vec![Some(g.clone()), Some(g.clone())],
            Op::Sub => vec![Some(g.clone()), Some(g.neg())],
            Op::Mul => vec![Some(g.mul(&p[1])?), Some(g.mul(&p[0])?)],
            Op::Div => {
                // y = a / b: da = g / b, db = −g·y / b
                let da = g.div(&p[1])?;
                let db = g.mul(self)?.div(&p[1])?.neg();
                vec![Some(da), Some(db)]
            }
            Op::Neg => vec![Some(g.neg())],
            Op::Scale(k) => vec![Some(g.scale(*k))],
            Op::AddScalar(_) => vec![Some(g.clone())],
            Op::MatMul { ta, tb } => {
                let (a, b) = (&p[0], &p[1]);
                let (da, db) = match (ta, tb) {
                    (false, false) => (g.matmul_t(b, false, true)?, a.matmul_t(g, true, false)?),
                    (false, true) => (g.matmul_t(b, false, false)?, g.matmul_t(a, true, false)?),
                    (true, false) => (b.matmul_t(g, false, true)?, a.matmul_t(g, false, false)?),
                    (true, true) => (b.matmul_t(g, true, true)?, g.matmul_t(a, true, true)?),
                };
                vec![Some(da), Some(db)]
            }
            Op::Tanh => {
                // 1 − y²
                let deriv = self.square().neg().add_scalar(S::one());
                vec![Some(g.mul(&deriv)?)]
            }
            Op::Sqrt => vec![Some(g.div(&self.scale(S::of(2.0)))?)],
            Op::Mask => vec![Some(g.mask(p[1].value().clone())?), None],
            Op::SumAll => vec![Some(g.expand_scalar(p[0].shape())?)],
            Op::ExpandScalar { .. } => vec![Some(g.sum())],
            Op::SumRows => vec![Some(g.broadcast_rows(p[0].shape()[0])?)],
            Op::BroadcastRows { .. } => vec![Some(g.sum_rows()?)],
            Op::SumCols => vec![Some(g.broadcast_cols(p[0].shape()[1])?)],
            Op::BroadcastCols { .. } => vec![Some(g.sum_cols()?)],
            Op::Reshape { from } => vec![Some(g.reshape(from)?)],
            Op::Gather { indices, from } => vec![Some(g.scatter_add(Arc::clone(indices), from)?)],
            Op::ScatterAdd { indices, from } => vec![Some(g.gather(Arc::clone(indices), from)?)],
            Op::Im2Col(geom) => vec![Some(g.col2im(*geom)?)],
            Op::Col2Im(geom) => vec![Some(g.im2col(*geom)?)],
        };
        if out.len() != p.len() {
            return Err(Error::invalid(
                "backward",
                format!(
                    "rule for {} produced {} grads for {} parents",
                    self.op().name(),
                    out.len(),
                    p.len()
                ),
            ));
        }
        Ok(out)
    }
}

pub(crate) fn sign_tensor<S: Scalar>(t: &Tensor<S>) -> Tensor<S> {
    t.map(|v| {
        if v > S::zero() {
            S::one()
        } else if v < S::zero() {
            -S::one()
        } else {
            S::zero()
        }
    })
}
