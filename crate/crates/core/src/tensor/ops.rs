use super::{
    broadcast_zip, check_finite, gemm_nt, gemm_tn, matmul_dims, strides, Tensor, Var,
    GUARD_EPS,
};
use crate::error::{Error, Result};

/// Reduction kinds for [`Var::reduce`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
    Max,
}

/// Elementwise operations addressable by kind.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Div,
    Tanh,
    Exp,
    Ln,
    Sqrt,
    Neg,
    Clamp { lo: f64, hi: f64 },
}

impl Elementwise {
    pub fn is_binary(self) -> bool {
        matches!(self, Self::Add | Self::Sub | Self::Mul | Self::Div)
    }
}

/// Sign-preserving magnitude floor for denominators.
fn guard_denominator(d: f64) -> f64 {
    if d.abs() < GUARD_EPS {
        if d < 0.0 {
            -GUARD_EPS
        } else {
            GUARD_EPS
        }
    } else {
        d
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
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

/// `tanh(u) / u`, continuous at 0.
pub(crate) fn tanh_ratio(u: f64) -> f64 {
    if u.abs() < 1e-4 {
        let u2 = u * u;
        1.0 - u2 / 3.0 + 2.0 * u2 * u2 / 15.0
    } else {
        u.tanh() / u
    }
}

fn tanh_ratio_grad(u: f64) -> f64 {
    if u.abs() < 1e-4 {
        -2.0 * u / 3.0 + 8.0 * u * u * u / 15.0
    } else {
        let t = u.tanh();
        ((1.0 - t * t) * u - t) / (u * u)
    }
}

impl<'t> Var<'t> {
    fn binary(
        self,
        other: Var<'t>,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
        grads: impl Fn(&Tensor, &Tensor, &Tensor, &Tensor) -> (Tensor, Tensor) + 'static,
    ) -> Result<Var<'t>> {
        let value = {
            let (a, b) = (self.value(), other.value());
            broadcast_zip(op, &a, &b, f)?
        };
        check_finite(op, &value)?;
        Ok(self
            .tape()
            .custom(&[self, other], value, move |g, inputs, out| {
                let (ga, gb) = grads(g, inputs[0], inputs[1], out);
                vec![
                    Some(ga.sum_to_shape(inputs[0].shape())),
                    Some(gb.sum_to_shape(inputs[1].shape())),
                ]
            }))
    }

    fn unary(
        self,
        op: &'static str,
        f: impl Fn(f64) -> f64,
        // local derivative from (input, output)
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Result<Var<'t>> {
        let value = self.value().map(f);
        check_finite(op, &value)?;
        Ok(self.tape().custom(&[self], value, move |g, inputs, out| {
            let data = g
                .data()
                .iter()
                .zip(inputs[0].data())
                .zip(out.data())
                .map(|((&g, &x), &y)| g * df(x, y))
                .collect();
            vec![Some(Tensor::new(g.shape(), data).expect("same shape"))]
        }))
    }

    /// Dispatches on `op`; binary kinds require `other`.
    pub fn elementwise(self, op: Elementwise, other: Option<Var<'t>>) -> Result<Var<'t>> {
        let rhs = || {
            other.ok_or_else(|| Error::ShapeMismatch {
                op: "elementwise",
                lhs: self.shape(),
                rhs: vec![],
            })
        };
        match op {
            Elementwise::Add => self.add(rhs()?),
            Elementwise::Sub => self.sub(rhs()?),
            Elementwise::Mul => self.mul(rhs()?),
            Elementwise::Div => self.div(rhs()?),
            Elementwise::Tanh => self.tanh(),
            Elementwise::Exp => self.exp(),
            Elementwise::Ln => self.ln(),
            Elementwise::Sqrt => self.sqrt(),
            Elementwise::Neg => self.neg(),
            Elementwise::Clamp { lo, hi } => self.clamp(lo, hi),
        }
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(
            other,
            "add",
            |a, b| a + b,
            |g, _, _, _| (g.clone(), g.clone()),
        )
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(
            other,
            "sub",
            |a, b| a - b,
            |g, _, _, _| (g.clone(), g.map(|v| -v)),
        )
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(
            other,
            "mul",
            |a, b| a * b,
            |g, a, b, _| {
                let ga = broadcast_zip("mul", g, b, |g, b| g * b).expect("broadcast");
                let gb = broadcast_zip("mul", g, a, |g, a| g * a).expect("broadcast");
                (ga, gb)
            },
        )
    }

    /// Division with the denominator magnitude floored at [`GUARD_EPS`].
    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(
            other,
            "div",
            |a, b| a / guard_denominator(b),
            |g, a, b, _| {
                let ga = broadcast_zip("div", g, b, |g, b| g / guard_denominator(b))
                    .expect("broadcast");
                let ab = broadcast_zip("div", a, b, |a, b| {
                    if b.abs() < GUARD_EPS {
                        0.0
                    } else {
                        -a / (b * b)
                    }
                })
                .expect("broadcast");
                let gb = broadcast_zip("div", g, &ab, |g, v| g * v).expect("broadcast");
                (ga, gb)
            },
        )
    }

    pub fn neg(self) -> Result<Var<'t>> {
        self.unary("neg", |x| -x, |_, _| -1.0)
    }

    pub fn scale(self, s: f64) -> Result<Var<'t>> {
        self.unary("scale", move |x| x * s, move |_, _| s)
    }

    pub fn add_scalar(self, s: f64) -> Result<Var<'t>> {
        self.unary("add_scalar", move |x| x + s, |_, _| 1.0)
    }

    pub fn square(self) -> Result<Var<'t>> {
        self.unary("square", |x| x * x, |x, _| 2.0 * x)
    }

    pub fn tanh(self) -> Result<Var<'t>> {
        self.unary("tanh", f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn exp(self) -> Result<Var<'t>> {
        self.unary("exp", f64::exp, |_, y| y)
    }

    /// Natural log with the argument clamped to `[GUARD_EPS, ∞)`.
    pub fn ln(self) -> Result<Var<'t>> {
        self.unary(
            "ln",
            |x| x.max(GUARD_EPS).ln(),
            |x, _| if x < GUARD_EPS { 0.0 } else { 1.0 / x },
        )
    }

    /// Square root with the argument clamped to `[GUARD_EPS, ∞)`.
    pub fn sqrt(self) -> Result<Var<'t>> {
        self.unary(
            "sqrt",
            |x| x.max(GUARD_EPS).sqrt(),
            |x, y| if x < GUARD_EPS { 0.0 } else { 0.5 / y },
        )
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Result<Var<'t>> {
        self.unary(
            "clamp",
            move |x| x.clamp(lo, hi),
            move |x, _| if x < lo || x > hi { 0.0 } else { 1.0 },
        )
    }

    pub fn softplus(self) -> Result<Var<'t>> {
        self.unary("softplus", softplus, |x, _| sigmoid(x))
    }

    /// Inverse hyperbolic tangent; callers keep `|x| < 1`.
    pub fn atanh(self) -> Result<Var<'t>> {
        self.unary("atanh", f64::atanh, |x, _| 1.0 / (1.0 - x * x))
    }

    /// `tanh(x) / x` with its limit 1 at the origin.
    pub fn tanh_ratio(self) -> Result<Var<'t>> {
        self.unary("tanh_ratio", tanh_ratio, |x, _| tanh_ratio_grad(x))
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let value = self.value().matmul(&other.value())?;
        check_finite("matmul", &value)?;
        Ok(self
            .tape()
            .custom(&[self, other], value, |g, inputs, _| {
                let (a, b) = (inputs[0], inputs[1]);
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                let mut ga = vec![0.0; m * k];
                gemm_nt(g.data(), b.data(), &mut ga, m, k, n);
                let mut gb = vec![0.0; k * n];
                gemm_tn(a.data(), g.data(), &mut gb, m, k, n);
                vec![
                    Some(Tensor::new(a.shape(), ga).expect("shape")),
                    Some(Tensor::new(b.shape(), gb).expect("shape")),
                ]
            }))
    }

    /// `self[m×k] · other[k×n] + bias[n]`.
    pub fn linear(self, weight: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
        let (_, _, n) = matmul_dims(&self.shape(), &weight.shape())?;
        if bias.shape() != [n] {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: weight.shape(),
                rhs: bias.shape(),
            });
        }
        self.matmul(weight)?.add(bias)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let value = self.value().reshape(shape)?;
        Ok(self.tape().custom(&[self], value, |g, inputs, _| {
            vec![Some(g.reshape(inputs[0].shape()).expect("shape"))]
        }))
    }

    pub fn permute(self, axes: &[usize]) -> Result<Var<'t>> {
        let value = self.value().permute(axes)?;
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        Ok(self.tape().custom(&[self], value, move |g, _, _| {
            vec![Some(g.permute(&inverse).expect("permutation"))]
        }))
    }

    pub fn flip(self, axis: usize) -> Result<Var<'t>> {
        let value = self.value().flip(axis)?;
        Ok(self.tape().custom(&[self], value, move |g, _, _| {
            vec![Some(g.flip(axis).expect("axis"))]
        }))
    }

    pub fn sum(self, axes: &[usize]) -> Result<Var<'t>> {
        self.reduce(Reduce::Sum, axes)
    }

    pub fn mean(self, axes: &[usize]) -> Result<Var<'t>> {
        self.reduce(Reduce::Mean, axes)
    }

    pub fn max(self, axes: &[usize]) -> Result<Var<'t>> {
        self.reduce(Reduce::Max, axes)
    }

    /// Sum over every element, as a scalar.
    pub fn sum_all(self) -> Result<Var<'t>> {
        let axes: Vec<usize> = (0..self.shape().len()).collect();
        self.sum(&axes)
    }

    pub fn mean_all(self) -> Result<Var<'t>> {
        let axes: Vec<usize> = (0..self.shape().len()).collect();
        self.mean(&axes)
    }

    /// Reduces over `axes`, removing them from the shape.
    pub fn reduce(self, kind: Reduce, axes: &[usize]) -> Result<Var<'t>> {
        let plan = ReducePlan::new(&self.shape(), axes)?;
        let value = plan.forward(kind, &self.value());
        Ok(self.tape().custom(&[self], value, move |g, inputs, out| {
            vec![Some(plan.backward(kind, g, inputs[0], out))]
        }))
    }

    /// Selects rows of a `[R, ...]` tensor; gradients scatter-add back.
    pub fn gather_rows(self, rows: &[usize]) -> Result<Var<'t>> {
        let shape = self.shape();
        let r = *shape.first().ok_or(Error::InvalidAxis { axis: 0, rank: 0 })?;
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::InvalidAxis { axis: bad, rank: r });
        }
        if rows.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "gather_rows",
                lhs: shape,
                rhs: vec![0],
            });
        }
        let width: usize = shape[1..].iter().product();
        let value = {
            let v = self.value();
            let mut data = Vec::with_capacity(rows.len() * width);
            for &i in rows {
                data.extend_from_slice(&v.data()[i * width..(i + 1) * width]);
            }
            let mut out_shape = shape.clone();
            out_shape[0] = rows.len();
            Tensor::new(&out_shape, data)?
        };
        let rows = rows.to_vec();
        Ok(self.tape().custom(&[self], value, move |g, inputs, _| {
            let mut out = vec![0.0; inputs[0].len()];
            for (k, &i) in rows.iter().enumerate() {
                let src = &g.data()[k * width..(k + 1) * width];
                for (d, s) in out[i * width..(i + 1) * width].iter_mut().zip(src) {
                    *d += s;
                }
            }
            vec![Some(Tensor::new(inputs[0].shape(), out).expect("shape"))]
        }))
    }

    /// Euclidean norm over the last axis. Rows with norm ≤ [`GUARD_EPS`]
    /// get subgradient 0: at that size the direction is rounding noise.
    pub fn norm_last(self) -> Result<Var<'t>> {
        let shape = self.shape();
        let n = *shape.last().ok_or(Error::InvalidAxis { axis: 0, rank: 0 })?;
        let value = {
            let v = self.value();
            let data = v
                .data()
                .chunks(n)
                .map(|row| row.iter().map(|x| x * x).sum::<f64>().sqrt())
                .collect();
            Tensor::new(&shape[..shape.len() - 1], data)?
        };
        check_finite("norm", &value)?;
        Ok(self.tape().custom(&[self], value, move |g, inputs, out| {
            let x = inputs[0];
            let mut data = vec![0.0; x.len()];
            for (r, (row, dst)) in x.data().chunks(n).zip(data.chunks_mut(n)).enumerate() {
                let norm = out.data()[r];
                if norm > GUARD_EPS {
                    let scale = g.data()[r] / norm;
                    for (d, &v) in dst.iter_mut().zip(row) {
                        *d = scale * v;
                    }
                }
            }
            vec![Some(Tensor::new(x.shape(), data).expect("shape"))]
        }))
    }
}

#[derive(Clone, Debug)]
struct ReducePlan {
    in_shape: Vec<usize>,
    out_shape: Vec<usize>,
    // for each input axis, stride into the output (0 when reduced)
    out_strides: Vec<usize>,
    count: usize,
}

impl ReducePlan {
    fn new(shape: &[usize], axes: &[usize]) -> Result<Self> {
        let rank = shape.len();
        let mut reduced = vec![false; rank];
        for &a in axes {
            if a >= rank || reduced[a] {
                return Err(Error::InvalidAxis { axis: a, rank });
            }
            reduced[a] = true;
        }
        let out_shape: Vec<usize> = (0..rank)
            .filter(|&d| !reduced[d])
            .map(|d| shape[d])
            .collect();
        let kept_strides = strides(&out_shape);
        let mut out_strides = vec![0; rank];
        let mut k = 0;
        for d in 0..rank {
            if !reduced[d] {
                out_strides[d] = kept_strides[k];
                k += 1;
            }
        }
        let count = axes.iter().map(|&a| shape[a]).product();
        Ok(Self {
            in_shape: shape.to_vec(),
            out_shape,
            out_strides,
            count,
        })
    }

    /// Output offset of every input element, in row-major input order.
    fn offsets(&self) -> Vec<usize> {
        let n: usize = self.in_shape.iter().product();
        let mut index = vec![0usize; self.in_shape.len()];
        let mut offs = Vec::with_capacity(n);
        for _ in 0..n {
            offs.push(index.iter().zip(&self.out_strides).map(|(i, s)| i * s).sum());
            super::increment(&mut index, &self.in_shape);
        }
        offs
    }

    fn forward(&self, kind: Reduce, x: &Tensor) -> Tensor {
        let m: usize = self.out_shape.iter().product();
        let init = if kind == Reduce::Max {
            f64::NEG_INFINITY
        } else {
            0.0
        };
        let mut out = vec![init; m];
        for (&v, off) in x.data().iter().zip(self.offsets()) {
            match kind {
                Reduce::Max => out[off] = out[off].max(v),
                _ => out[off] += v,
            }
        }
        if kind == Reduce::Mean {
            let inv = 1.0 / self.count as f64;
            out.iter_mut().for_each(|v| *v *= inv);
        }
        Tensor::new(&self.out_shape, out).expect("reduce shape")
    }

    fn backward(&self, kind: Reduce, g: &Tensor, x: &Tensor, out: &Tensor) -> Tensor {
        let offs = self.offsets();
        let data = match kind {
            Reduce::Sum => offs.iter().map(|&o| g.data()[o]).collect(),
            Reduce::Mean => {
                let inv = 1.0 / self.count as f64;
                offs.iter().map(|&o| g.data()[o] * inv).collect()
            }
            Reduce::Max => {
                // first maximal element takes the gradient
                let mut taken = vec![false; out.len()];
                offs.iter()
                    .zip(x.data())
                    .map(|(&o, &v)| {
                        if !taken[o] && v == out.data()[o] {
                            taken[o] = true;
                            g.data()[o]
                        } else {
                            0.0
                        }
                    })
                    .collect()
            }
        };
        Tensor::new(&self.in_shape, data).expect("reduce shape")
    }
}
