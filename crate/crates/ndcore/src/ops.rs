//! Forward constructors for every recorded operation.

use crate::error::{NdError, Result};
use crate::tape::{BinaryKind, Op, Tape, UnaryKind, Var};
use crate::tensor::{axis_extents, Tensor};

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(NdError::Shape {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let mut out = vec![0.0; m * n];
        if n == 1 && k > 0 {
            for (o, arow) in out.iter_mut().zip(ad.chunks_exact(k)) {
                *o = arow.iter().zip(bd).map(|(x, y)| x * y).sum();
            }
        } else {
            for i in 0..m {
                let orow = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let a_ip = ad[i * k + p];
                    if a_ip == 0.0 {
                        continue;
                    }
                    let brow = &bd[p * n..(p + 1) * n];
                    orow.iter_mut().zip(brow).for_each(|(o, b)| *o += a_ip * b);
                }
            }
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), rg))
    }

    fn binary(&mut self, kind: BinaryKind, op: &'static str, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = if ta.shape() == tb.shape() || tb.numel() == 1 {
            ta.shape().to_vec()
        } else if ta.numel() == 1 {
            tb.shape().to_vec()
        } else {
            return Err(NdError::Shape {
                op,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        };
        let (ad, bd) = (ta.data(), tb.data());
        let n: usize = shape.iter().product();
        let f = |x: f64, y: f64| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        let data: Vec<f64> = if ad.len() == bd.len() {
            ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
        } else if bd.len() == 1 {
            ad.iter().map(|&x| f(x, bd[0])).collect()
        } else {
            bd.iter().map(|&y| f(ad[0], y)).collect()
        };
        debug_assert_eq!(data.len(), n);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(&shape, data)?, Op::Binary(kind, a, b), rg))
    }

    /// Elementwise sum; either side may be a single-element tensor.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, "add", a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, "sub", a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, "mul", a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, "div", a, b)
    }

    /// `a + c` for a constant `c`.
    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x + c);
        let rg = self.requires_grad(a);
        self.push(value, Op::AddScalar(a), rg)
    }

    /// `c * a` for a constant `c`.
    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x * c);
        let rg = self.requires_grad(a);
        self.push(value, Op::MulScalar(a, c), rg)
    }

    fn unary(&mut self, kind: UnaryKind, a: Var) -> Var {
        let value = self.value(a).map(|x| match kind {
            UnaryKind::Neg => -x,
            UnaryKind::Sigmoid => sigmoid(x),
            UnaryKind::Tanh => x.tanh(),
            UnaryKind::Exp => x.exp(),
            UnaryKind::Log => x.ln(),
            UnaryKind::Abs => x.abs(),
            UnaryKind::Square => x * x,
            UnaryKind::Sqrt => x.sqrt(),
            UnaryKind::Recip => 1.0 / x,
        });
        let rg = self.requires_grad(a);
        self.push(value, Op::Unary(kind, a), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Neg, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Tanh, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Exp, a)
    }

    /// Natural logarithm; every entry must be strictly positive.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&x| !(x > 0.0)) {
            return Err(NdError::Domain {
                op: "log",
                detail: format!("argument {bad} is not positive"),
            });
        }
        Ok(self.unary(UnaryKind::Log, a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Abs, a)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Square, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&x| !(x > 0.0)) {
            return Err(NdError::Domain {
                op: "sqrt",
                detail: format!("argument {bad} is not positive"),
            });
        }
        Ok(self.unary(UnaryKind::Sqrt, a))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Recip, a)
    }

    /// `max(a, floor)` elementwise. Entries at or below the floor get no gradient.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        let value = self.value(a).map(|x| x.max(floor));
        let rg = self.requires_grad(a);
        self.push(value, Op::ClampMin(a, floor), rg)
    }

    fn check_axis(&self, a: Var, axis: Option<usize>) -> Result<()> {
        match axis {
            Some(ax) if ax >= self.shape(a).len() => Err(NdError::Axis {
                axis: ax,
                rank: self.shape(a).len(),
            }),
            _ => Ok(()),
        }
    }

    fn reduced_shape(shape: &[usize], axis: Option<usize>) -> Vec<usize> {
        match axis {
            None => vec![1],
            Some(ax) => {
                let mut s = shape.to_vec();
                s.remove(ax);
                if s.is_empty() {
                    s.push(1);
                }
                s
            }
        }
    }

    fn fold(&self, a: Var, axis: Option<usize>, f: impl Fn(&[f64], usize, usize) -> f64) -> Tensor {
        let t = self.value(a);
        let shape = Self::reduced_shape(t.shape(), axis);
        let data = match axis {
            None => vec![f(t.data(), 0, 1)],
            Some(ax) => {
                let (outer, len, inner) = axis_extents(t.shape(), ax);
                let mut out = Vec::with_capacity(outer * inner);
                for o in 0..outer {
                    for i in 0..inner {
                        out.push(f(&t.data()[o * len * inner + i..], len, inner));
                    }
                }
                out
            }
        };
        Tensor::new(&shape, data).expect("reduced shape is consistent")
    }

    /// Sum over `axis` (dropping it), or over everything when `axis` is `None`.
    pub fn sum(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        self.check_axis(a, axis)?;
        let whole = axis.is_none();
        let value = self.fold(a, axis, |d, len, stride| {
            if whole {
                d.iter().sum()
            } else {
                (0..len).map(|k| d[k * stride]).sum()
            }
        });
        let rg = self.requires_grad(a);
        Ok(self.push(value, Op::Sum(a, axis), rg))
    }

    pub fn mean(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        self.check_axis(a, axis)?;
        let whole = axis.is_none();
        let value = self.fold(a, axis, |d, len, stride| {
            if whole {
                d.iter().sum::<f64>() / d.len() as f64
            } else {
                (0..len).map(|k| d[k * stride]).sum::<f64>() / len as f64
            }
        });
        let rg = self.requires_grad(a);
        Ok(self.push(value, Op::Mean(a, axis), rg))
    }

    /// Maximum over `axis`. The gradient goes to the first maximal entry.
    pub fn max(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        self.check_axis(a, axis)?;
        let t = self.value(a);
        let shape = Self::reduced_shape(t.shape(), axis);
        let d = t.data();
        let first_argmax = |idx: &mut dyn Iterator<Item = usize>| {
            let mut best: Option<usize> = None;
            for i in idx {
                if best.is_none_or(|b| d[i] > d[b]) {
                    best = Some(i);
                }
            }
            best.expect("non-empty reduction")
        };
        let argmax: Vec<usize> = match axis {
            None => vec![first_argmax(&mut (0..d.len()))],
            Some(ax) => {
                let (outer, len, inner) = axis_extents(t.shape(), ax);
                let mut out = Vec::with_capacity(outer * inner);
                for o in 0..outer {
                    for i in 0..inner {
                        out.push(first_argmax(&mut (0..len).map(|k| (o * len + k) * inner + i)));
                    }
                }
                out
            }
        };
        let value = Tensor::new(&shape, argmax.iter().map(|&i| d[i]).collect())?;
        let rg = self.requires_grad(a);
        Ok(self.push(value, Op::Max(a, argmax), rg))
    }

    /// Softmax over all entries, computed with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.data().iter().any(|x| x.is_nan()) {
            return Err(NdError::Numeric { op: "softmax" });
        }
        let m = t.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = t.data().iter().map(|x| (x - m).exp()).collect();
        let z: f64 = e.iter().sum();
        let value = Tensor::new(t.shape(), e.into_iter().map(|x| x / z).collect())?;
        let rg = self.requires_grad(a);
        Ok(self.push(value, Op::Softmax(a), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 {
            return Err(NdError::Shape {
                op: "transpose",
                lhs: t.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let d = t.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        let rg = self.requires_grad(a);
        Ok(self.push(Tensor::new(&[c, r], out)?, Op::Transpose(a), rg))
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshaped(shape)?;
        let rg = self.requires_grad(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Row-major flatten to a rank-1 tensor.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        self.reshape(a, &[n])
    }

    /// Concatenates tensors along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs.first().ok_or(NdError::Shape {
            op: "concat",
            lhs: vec![],
            rhs: vec![],
        })?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(NdError::Axis {
                axis,
                rank: base.len(),
            });
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(NdError::Shape {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_extents(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for v in inputs {
                let len = self.shape(*v)[axis];
                let d = self.value(*v).data();
                data.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let rg = self.any_grad(inputs);
        Ok(self.push(Tensor::new(&shape, data)?, Op::Concat(inputs.to_vec(), axis), rg))
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(NdError::Axis {
                axis,
                rank: shape.len(),
            });
        }
        if len == 0 || start + len > shape[axis] {
            return Err(NdError::Index {
                index: start + len,
                len: shape[axis],
            });
        }
        let (outer, total, inner) = axis_extents(&shape, axis);
        let d = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * total + start) * inner;
            data.extend_from_slice(&d[from..from + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.requires_grad(a);
        Ok(self.push(
            Tensor::new(&out_shape, data)?,
            Op::Slice {
                input: a,
                axis,
                start,
            },
            rg,
        ))
    }

    /// Single entry `index` of a flat view, as a one-element tensor.
    pub fn pick(&mut self, a: Var, index: usize) -> Result<Var> {
        let flat = self.flatten(a)?;
        self.slice(flat, 0, index, 1)
    }
}
