//! Poincaré-ball geometry on batched row vectors.
//!
//! Every operation accepts either a single point `[n]` or a batch `[B, n]`
//! and treats rows independently. All maps are recorded on the tape, so
//! distances are differentiable end to end.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tensor, Var};

/// Boundary margin: projected points keep `√c‖x‖ ≤ 1 − BALL_EPS`.
pub const BALL_EPS: f64 = 1e-5;

/// Slack on the open-ball precondition of the Möbius operations.
const INSIDE_TOL: f64 = 1e-9;

/// Ball parameter `c > 0`; the manifold is `{x : c‖x‖² < 1}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Curvature(f64);

impl Curvature {
    pub const DEFAULT: Curvature = Curvature(0.1);

    pub fn new(c: f64) -> Result<Self> {
        if c.is_finite() && c > 0.0 {
            Ok(Self(c))
        } else {
            Err(Error::Config(format!("curvature must be positive, got {c}")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn sqrt(self) -> f64 {
        self.0.sqrt()
    }

    /// Largest norm a projected point may have.
    pub fn max_norm(self) -> f64 {
        (1.0 - BALL_EPS) / self.sqrt()
    }
}

impl Default for Curvature {
    fn default() -> Self {
        Self::DEFAULT
    }
}

impl TryFrom<f64> for Curvature {
    type Error = Error;

    fn try_from(c: f64) -> Result<Self> {
        Self::new(c)
    }
}

impl From<Curvature> for f64 {
    fn from(c: Curvature) -> f64 {
        c.0
    }
}

/// Signature of a Möbius addition, so the metric checks can be run against
/// alternative (or deliberately broken) implementations.
pub type MobiusAddFn = for<'t> fn(Var<'t>, Var<'t>, Curvature) -> Result<Var<'t>>;

/// Row-wise squared norms as a broadcastable column (`[B, 1]` or `[1]`).
fn sq_norm_col<'t>(x: Var<'t>) -> Result<Var<'t>> {
    let shape = x.shape();
    let last = shape.len() - 1;
    let s = x.square()?.sum(&[last])?;
    s.reshape(&column_shape(&shape))
}

fn column_shape(shape: &[usize]) -> Vec<usize> {
    let mut col = shape.to_vec();
    *col.last_mut().expect("rank ≥ 1") = 1;
    col
}

fn norm_col<'t>(x: Var<'t>) -> Result<Var<'t>> {
    let shape = x.shape();
    x.norm_last()?.reshape(&column_shape(&shape))
}

fn dot_col<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    let shape = a.shape();
    let last = shape.len() - 1;
    a.mul(b)?.sum(&[last])?.reshape(&column_shape(&shape))
}

fn row_sq_norms(x: &Tensor) -> Vec<f64> {
    let n = *x.shape().last().unwrap_or(&1);
    x.data()
        .chunks(n)
        .map(|r| r.iter().map(|v| v * v).sum())
        .collect()
}

/// Fails with `OutsideBall` when any row has `c‖x‖² ≥ 1 − 1e-9`.
pub fn check_inside(x: &Tensor, c: Curvature) -> Result<()> {
    for s in row_sq_norms(x) {
        let cs = c.value() * s;
        if !(cs < 1.0 - INSIDE_TOL) {
            return Err(Error::OutsideBall(cs));
        }
    }
    Ok(())
}

/// Möbius addition `v ⊕_c w`.
pub fn mobius_add<'t>(v: Var<'t>, w: Var<'t>, c: Curvature) -> Result<Var<'t>> {
    check_inside(&v.value(), c)?;
    check_inside(&w.value(), c)?;
    let cv = c.value();
    let vv = sq_norm_col(v)?;
    let ww = sq_norm_col(w)?;
    let vw = dot_col(v, w)?;
    // 1 + 2c⟨v,w⟩
    let base = vw.scale(2.0 * cv)?.add_scalar(1.0)?;
    let coef_v = base.add(ww.scale(cv)?)?;
    let coef_w = vv.scale(-cv)?.add_scalar(1.0)?;
    let num = coef_v.mul(v)?.add(coef_w.mul(w)?)?;
    let den = base.add(vv.mul(ww)?.scale(cv * cv)?)?;
    project_to_ball(num.div(den)?, c)
}

/// Exponential map at the origin: `tanh(√c‖f‖) · f / (√c‖f‖)`.
pub fn exp_map_0<'t>(f: Var<'t>, c: Curvature) -> Result<Var<'t>> {
    let scale = norm_col(f)?.scale(c.sqrt())?.tanh_ratio()?;
    f.mul(scale)
}

/// Exponential map at `v` in the printed form
/// `v ⊕_c ( tanh(√c‖f‖/2) · f / (√c‖f‖) )`.
///
/// At `v = 0` this is not equal to [`exp_map_0`]: the argument of `tanh` is
/// halved and no conformal factor compensates. The training pipeline uses
/// [`exp_map_0`].
pub fn exp_map_v<'t>(v: Var<'t>, f: Var<'t>, c: Curvature) -> Result<Var<'t>> {
    check_inside(&v.value(), c)?;
    // tanh(u/2)/u = ½·tanh_ratio(u/2)
    let scale = norm_col(f)?
        .scale(0.5 * c.sqrt())?
        .tanh_ratio()?
        .scale(0.5)?;
    mobius_add(v, f.mul(scale)?, c)
}

/// Geodesic distance `(2/√c)·artanh(√c‖−z1 ⊕_c z2‖)`, one value per row.
pub fn distance<'t>(z1: Var<'t>, z2: Var<'t>, c: Curvature) -> Result<Var<'t>> {
    distance_with(z1, z2, c, mobius_add)
}

pub fn distance_with<'t>(
    z1: Var<'t>,
    z2: Var<'t>,
    c: Curvature,
    add: MobiusAddFn,
) -> Result<Var<'t>> {
    let diff = add(z1.neg()?, z2, c)?;
    diff.norm_last()?
        .scale(c.sqrt())?
        .clamp(0.0, 1.0 - BALL_EPS)?
        .atanh()?
        .scale(2.0 / c.sqrt())
}

/// Pulls rows with `√c‖x‖ ≥ 1 − BALL_EPS` back onto that radius.
pub fn project_to_ball<'t>(x: Var<'t>, c: Curvature) -> Result<Var<'t>> {
    let max_norm = c.max_norm();
    let (value, norms) = {
        let xv = x.value();
        if !xv.is_finite() {
            return Err(Error::NonFinite("project_to_ball"));
        }
        let n = *xv.shape().last().ok_or(Error::InvalidAxis { axis: 0, rank: 0 })?;
        let norms: Vec<f64> = row_sq_norms(&xv).into_iter().map(f64::sqrt).collect();
        let mut data = xv.data().to_vec();
        for (row, &norm) in data.chunks_mut(n).zip(&norms) {
            if norm >= max_norm {
                let s = max_norm / norm;
                row.iter_mut().for_each(|v| *v *= s);
            }
        }
        (Tensor::new(xv.shape(), data)?, norms)
    };
    Ok(x.tape().custom(&[x], value, move |g, inputs, _| {
        let x = inputs[0];
        let n = *x.shape().last().expect("rank ≥ 1");
        let mut out = g.data().to_vec();
        for ((row, grow), (dst, &norm)) in x
            .data()
            .chunks(n)
            .zip(g.data().chunks(n))
            .zip(out.chunks_mut(n).zip(&norms))
        {
            if norm >= max_norm {
                // d/dx (r·x/‖x‖) = (r/‖x‖)(I − x̂x̂ᵀ)
                let s = max_norm / norm;
                let radial: f64 = row.iter().zip(grow).map(|(a, b)| a * b).sum::<f64>() / norm;
                for ((d, &xv), &gv) in dst.iter_mut().zip(row).zip(grow) {
                    *d = s * (gv - radial * xv / norm);
                }
            }
        }
        vec![Some(Tensor::new(x.shape(), out).expect("shape"))]
    }))
}
