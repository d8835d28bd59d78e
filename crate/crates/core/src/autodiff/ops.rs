//! Forward definitions of the primitive operations.
//!
//! Binary element-wise ops broadcast only in two ways: a single-element
//! operand against anything, or an operand whose shape is a trailing suffix
//! of the other's (e.g. a `[C]` bias against `[N, C]` activations).

use super::kernels::{self, PatchGeometry};
use super::{axis_split, Op, Var, EXP_CLAMP};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::warp;

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let na: usize = a.iter().product();
    let nb: usize = b.iter().product();
    if a == b {
        return Ok(a.to_vec());
    }
    if nb == 1 && (na > 1 || a.len() >= b.len()) {
        return Ok(a.to_vec());
    }
    if na == 1 {
        return Ok(b.to_vec());
    }
    if b.len() < a.len() && a.ends_with(b) {
        return Ok(a.to_vec());
    }
    if a.len() < b.len() && b.ends_with(a) {
        return Ok(b.to_vec());
    }
    Err(Error::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    })
}

impl<'t> Var<'t> {
    fn unary(self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let value = self.value().map(f);
        self.tape.push(value, op, self.requires_grad())
    }

    fn binary(
        self,
        other: Var<'t>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        debug_assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
        let value = {
            let (a, b) = (self.value(), other.value());
            let shape = broadcast_shape(name, a.shape(), b.shape())?;
            let (ad, bd) = (a.data(), b.data());
            let (na, nb) = (ad.len(), bd.len());
            let numel: usize = shape.iter().product();
            let data = if na == numel && nb == numel {
                ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
            } else {
                (0..numel).map(|i| f(ad[i % na], bd[i % nb])).collect()
            };
            Tensor::from_parts(shape, data)
        };
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(value, op, rg))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "div", Op::Div(self.id, other.id), |a, b| a / b)
    }

    pub fn neg(self) -> Var<'t> {
        self.unary(Op::Neg(self.id), |v| -v)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, c), |v| v * c)
    }

    /// Adds a constant to every element.
    pub fn offset(self, c: f64) -> Var<'t> {
        self.unary(Op::Offset(self.id), |v| v + c)
    }

    pub fn square(self) -> Var<'t> {
        self.mul(self).expect("same-shape mul")
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(Op::Tanh(self.id), f64::tanh)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Op::Sigmoid(self.id), kernels::sigmoid)
    }

    /// `exp` of the input clamped to `[-EXP_CLAMP, EXP_CLAMP]`.
    pub fn exp(self) -> Var<'t> {
        self.unary(Op::Exp(self.id), |v| v.clamp(-EXP_CLAMP, EXP_CLAMP).exp())
    }

    pub fn log(self) -> Result<Var<'t>> {
        if let Some(bad) = self.value().data().iter().find(|&&v| v.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater)) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        Ok(self.unary(Op::Log(self.id), f64::ln))
    }

    pub fn sin(self) -> Var<'t> {
        self.unary(Op::Sin(self.id), f64::sin)
    }

    pub fn cos(self) -> Var<'t> {
        self.unary(Op::Cos(self.id), f64::cos)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(self) -> Var<'t> {
        self.unary(Op::Gelu(self.id), kernels::gelu)
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Var<'t> {
        let value = {
            let v = self.value();
            let cols = *v.shape().last().unwrap_or(&1);
            Tensor::from_parts(v.shape().to_vec(), kernels::softmax_rows(v.data(), cols))
        };
        self.tape.push(value, Op::Softmax(self.id), self.requires_grad())
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(self) -> Var<'t> {
        let value = {
            let v = self.value();
            let cols = *v.shape().last().unwrap_or(&1);
            Tensor::from_parts(v.shape().to_vec(), kernels::log_softmax_rows(v.data(), cols))
        };
        self.tape.push(value, Op::LogSoftmax(self.id), self.requires_grad())
    }

    pub fn sum(self) -> Var<'t> {
        let s = self.value().sum();
        self.tape.push(Tensor::scalar(s), Op::Sum(self.id), self.requires_grad())
    }

    pub fn mean(self) -> Var<'t> {
        let m = {
            let v = self.value();
            v.sum() / v.numel() as f64
        };
        self.tape.push(Tensor::scalar(m), Op::Mean(self.id), self.requires_grad())
    }

    /// Mean over the leading axis: `[N, ...] -> [...]`.
    pub fn mean_rows(self) -> Result<Var<'t>> {
        let value = {
            let v = self.value();
            if v.rank() == 0 || v.shape()[0] == 0 {
                return Err(Error::invalid("mean_rows needs a non-empty leading axis"));
            }
            let rows = v.shape()[0];
            let inner = v.numel() / rows;
            let mut acc = vec![0.0; inner];
            for row in v.data().chunks_exact(inner) {
                for (a, x) in acc.iter_mut().zip(row) {
                    *a += x;
                }
            }
            acc.iter_mut().for_each(|a| *a /= rows as f64);
            Tensor::from_parts(v.shape()[1..].to_vec(), acc)
        };
        Ok(self.tape.push(value, Op::MeanRows(self.id), self.requires_grad()))
    }

    /// Euclidean norm of all elements. The gradient at zero is taken as zero.
    pub fn norm(self) -> Var<'t> {
        let n = self.value().data().iter().map(|v| v * v).sum::<f64>().sqrt();
        self.tape.push(Tensor::scalar(n), Op::Norm(self.id), self.requires_grad())
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let value = self.value().clone().reshape(shape)?;
        Ok(self.tape.push(value, Op::Reshape(self.id), self.requires_grad()))
    }

    /// 2-D matrix product.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let (a, b) = (self.value(), other.value());
            let (sa, sb) = (a.shape(), b.shape());
            if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
                return Err(Error::Shape {
                    op: "matmul",
                    lhs: sa.to_vec(),
                    rhs: sb.to_vec(),
                });
            }
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            Tensor::from_parts(vec![m, n], kernels::matmul(a.data(), b.data(), m, k, n))
        };
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(value, Op::MatMul(self.id, other.id), rg))
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let value = {
            let a = self.value();
            if a.rank() != 2 {
                return Err(Error::Shape {
                    op: "transpose",
                    lhs: a.shape().to_vec(),
                    rhs: vec![],
                });
            }
            let (r, c) = (a.shape()[0], a.shape()[1]);
            Tensor::from_parts(vec![c, r], kernels::transpose(a.data(), r, c))
        };
        Ok(self.tape.push(value, Op::Transpose(self.id), self.requires_grad()))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let value = {
            let a = self.value();
            let s = a.shape();
            if axis >= s.len() || start + len > s[axis] {
                return Err(Error::invalid(format!(
                    "narrow axis {axis} [{start}, {}) out of range for shape {s:?}",
                    start + len
                )));
            }
            let (outer, len_in, inner) = axis_split(s, axis);
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let from = (o * len_in + start) * inner;
                data.extend_from_slice(&a.data()[from..from + len * inner]);
            }
            let mut shape = s.to_vec();
            shape[axis] = len;
            Tensor::from_parts(shape, data)
        };
        Ok(self.tape.push(
            value,
            Op::Narrow {
                src: self.id,
                axis,
                start,
            },
            self.requires_grad(),
        ))
    }

    /// Element `i` of a tensor as a rank-0 value.
    pub fn at(self, i: usize) -> Result<Var<'t>> {
        let n = self.value().numel();
        self.reshape(&[n])?.narrow(0, i, 1)?.reshape(&[])
    }

    /// Layer normalisation over the last axis, without affine parameters.
    pub fn layer_norm(self, eps: f64) -> Var<'t> {
        let value = {
            let a = self.value();
            let cols = *a.shape().last().unwrap_or(&1);
            let mut data = vec![0.0; a.numel()];
            for (row, orow) in a.data().chunks_exact(cols).zip(data.chunks_exact_mut(cols)) {
                let n = cols as f64;
                let mean = row.iter().sum::<f64>() / n;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                let inv = 1.0 / (var + eps).sqrt();
                for (o, v) in orow.iter_mut().zip(row) {
                    *o = (v - mean) * inv;
                }
            }
            Tensor::from_parts(a.shape().to_vec(), data)
        };
        self.tape.push(
            value,
            Op::LayerNorm { src: self.id, eps },
            self.requires_grad(),
        )
    }

    /// Gathers `kernel×kernel` patches at `stride` from a `C×H×W` image into a
    /// `[patches, C·kernel²]` matrix.
    pub fn patches(self, kernel: usize, stride: usize) -> Result<Var<'t>> {
        let value = {
            let a = self.value();
            let s = a.shape();
            if s.len() != 3 || kernel == 0 || stride == 0 || s[1] < kernel || s[2] < kernel {
                return Err(Error::invalid(format!(
                    "patches(kernel {kernel}, stride {stride}) on shape {s:?}"
                )));
            }
            let geo = PatchGeometry {
                channels: s[0],
                height: s[1],
                width: s[2],
                kernel,
                stride,
            };
            let mut data = vec![0.0; geo.out_h() * geo.out_w() * geo.row_len()];
            let src = a.data();
            geo.for_each(|o, i| data[o] = src[i]);
            Tensor::from_parts(vec![geo.out_h() * geo.out_w(), geo.row_len()], data)
        };
        Ok(self.tape.push(
            value,
            Op::Patches {
                src: self.id,
                kernel,
                stride,
            },
            self.requires_grad(),
        ))
    }

    /// Bilinear resampling of a `C×H×W` image at an `H'×W'×2` grid of
    /// normalised `(x, y)` coordinates with reflection padding.
    pub fn grid_sample(self, grid: Var<'t>) -> Result<Var<'t>> {
        let value = warp::sample_forward(&self.value(), &grid.value())?;
        let rg = self.requires_grad() || grid.requires_grad();
        Ok(self.tape.push(
            value,
            Op::GridSample {
                image: self.id,
                grid: grid.id,
            },
            rg,
        ))
    }

    /// A copy of this value that blocks gradient flow.
    pub fn detach(self) -> Var<'t> {
        let value = self.to_tensor();
        self.tape.constant(value)
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(vars: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = vars
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let tape = first.tape;
        let value = {
            let values: Vec<_> = vars.iter().map(|v| v.value()).collect();
            let s0 = values[0].shape().to_vec();
            if axis >= s0.len() {
                return Err(Error::invalid(format!("concat axis {axis} for shape {s0:?}")));
            }
            let mut total = 0;
            for v in &values {
                let s = v.shape();
                let same = s.len() == s0.len()
                    && s.iter().zip(&s0).enumerate().all(|(d, (x, y))| d == axis || x == y);
                if !same {
                    return Err(Error::Shape {
                        op: "concat",
                        lhs: s0.clone(),
                        rhs: s.to_vec(),
                    });
                }
                total += s[axis];
            }
            let (outer, _, inner) = axis_split(&s0, axis);
            let mut data = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for v in &values {
                    let len = v.shape()[axis] * inner;
                    data.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
                }
            }
            let mut shape = s0;
            shape[axis] = total;
            Tensor::from_parts(shape, data)
        };
        let rg = vars.iter().any(|v| v.requires_grad());
        Ok(tape.push(
            value,
            Op::Concat {
                srcs: vars.iter().map(|v| v.id).collect(),
                axis,
            },
            rg,
        ))
    }

    /// Stacks rank-0 values into a vector.
    pub fn stack_scalars(vars: &[Var<'t>]) -> Result<Var<'t>> {
        let as_vec: Vec<Var<'t>> = vars
            .iter()
            .map(|v| v.reshape(&[1]))
            .collect::<Result<_>>()?;
        Var::concat(&as_vec, 0)
    }
}
