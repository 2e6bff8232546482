//! Property suites run by `hssh verify`.
//!
//! Each suite compares the library against an independent reference
//! (closed forms, naive loops, finite differences) and reports the worst
//! error it saw next to the tolerance.

use std::fmt;
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::config::RunConfig;
use super::train::{objective, Model, StyleSource};
use super::{stream_rng, Stream};
use crate::error::Result;
use crate::losses::{cls_loss, hmc_loss, project_stage, BatchLabels, HyperbolicEmbeddingSet};
use crate::poincare::{
    distance_with, exp_map_0, exp_map_v, mobius_add, project_to_ball, Curvature, MobiusAddFn,
};
use crate::ssm::{classify, layer_norm, selective_scan, EncoderConfig, StateEmbedding, NUM_STAGES};
use crate::style::{compute_style, extrapolate_range, fit_slope, hallucinate, StyleHallucinator, StyleStats};
use crate::tensor::{BoundParams, Tape, Tensor, Var};

/// One measured property.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub max_err: f64,
    pub tol: f64,
}

impl Check {
    pub fn new(name: impl Into<String>, max_err: f64, tol: f64) -> Self {
        Self {
            name: name.into(),
            max_err,
            tol,
        }
    }

    pub fn passed(&self) -> bool {
        self.max_err <= self.tol
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub checks: Vec<Check>,
    pub seconds: f64,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(Check::passed)
    }

    pub fn max_err(&self) -> f64 {
        self.checks.iter().map(|c| c.max_err).fold(0.0, f64::max)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub suites: Vec<SuiteResult>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(SuiteResult::passed)
    }

    pub fn suite(&self, name: &str) -> Option<&SuiteResult> {
        self.suites.iter().find(|s| s.name == name)
    }
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.suites {
            writeln!(
                f,
                "[{}] {} suite: {} checks, max error {:.3e}, {:.2} s",
                verdict(s.passed()),
                s.name,
                s.checks.len(),
                s.max_err(),
                s.seconds
            )?;
            for c in &s.checks {
                writeln!(
                    f,
                    "    [{}] {:<44} max_err {:.3e}  tol {:.0e}",
                    verdict(c.passed()),
                    c.name,
                    c.max_err,
                    c.tol
                )?;
            }
        }
        write!(f, "{}", if self.passed() { "all suites passed" } else { "verification FAILED" })
    }
}

/// Runs every suite with fixed seeds.
pub fn verify() -> Result<Report> {
    type Suite = fn(u64) -> Result<SuiteResult>;
    let suites: [Suite; 5] = [
        |s| hyperbolic_suite(s, mobius_add),
        gradient_suite,
        scan_suite,
        style_suite,
        loss_suite,
    ];
    let suites = suites
        .par_iter()
        .map(|suite| suite(0))
        .collect::<Result<Vec<_>>>()?;
    Ok(Report { suites })
}

fn timed(name: &'static str, body: impl FnOnce() -> Result<Vec<Check>>) -> Result<SuiteResult> {
    let start = Instant::now();
    let checks = body()?;
    Ok(SuiteResult {
        name,
        checks,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape")
}

/// `rows` points of dimension `dim`, uniform direction, radius up to
/// `frac` of the ball radius.
pub fn ball_points(rng: &mut impl Rng, rows: usize, dim: usize, c: Curvature, frac: f64) -> Tensor {
    let mut data = Vec::with_capacity(rows * dim);
    for _ in 0..rows {
        let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        let r = rng.gen_range(0.0..frac) / c.sqrt();
        data.extend(v.iter().map(|x| x / norm * r));
    }
    Tensor::new(&[rows, dim], data).expect("shape")
}

fn row_norms(t: &Tensor) -> Vec<f64> {
    let n = *t.shape().last().expect("rank ≥ 1");
    t.data()
        .chunks(n)
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

/// Metric axioms, Möbius identities, the small-curvature limit and golden
/// values, all through `add`.
pub fn hyperbolic_suite(seed: u64, add: MobiusAddFn) -> Result<SuiteResult> {
    timed("hyperbolic", || {
        const TRIPLES: usize = 10_000;
        const DIM: usize = 4;
        let mut rng = stream_rng(seed, Stream::Data, 10);
        let mut checks = Vec::new();
        for cv in [0.01, 0.1, 1.0] {
            let c = Curvature::new(cv)?;
            let tape = Tape::new();
            let [x, y, z] = [0, 1, 2].map(|_| tape.constant(ball_points(&mut rng, TRIPLES, DIM, c, 0.9)));
            let d = |a: Var<'_>, b: Var<'_>| distance_with(a, b, c, add).map(|v| v.value().clone());
            let dxx = d(x, x)?;
            let dxy = d(x, y)?;
            let dyx = d(y, x)?;
            let dyz = d(y, z)?;
            let dxz = d(x, z)?;
            let self_err = dxx.data().iter().fold(0f64, |m, v| m.max(v.abs()));
            let sym_err = dxy.max_abs_diff(&dyx);
            let tri = dxz
                .data()
                .iter()
                .zip(dxy.data())
                .zip(dyz.data())
                .map(|((xz, xy), yz)| xz - xy - yz)
                .fold(0f64, f64::max);
            let zero = tape.constant(Tensor::zeros(&[TRIPLES, DIM]));
            let left_id = add(zero, x, c)?.value().max_abs_diff(&x.value());
            let right_id = add(x, zero, c)?.value().max_abs_diff(&x.value());
            let inverse = add(x.neg()?, x, c)?
                .value()
                .data()
                .iter()
                .fold(0f64, |m, v| m.max(v.abs()));
            checks.push(Check::new(format!("d(x,x) = 0, c={cv}"), self_err, 1e-12));
            checks.push(Check::new(format!("symmetry, c={cv}"), sym_err, 1e-9));
            checks.push(Check::new(format!("triangle inequality, c={cv}"), tri, 1e-9));
            checks.push(Check::new(format!("identity 0+x, x+0, c={cv}"), left_id.max(right_id), 1e-12));
            checks.push(Check::new(format!("left inverse (-x)+x, c={cv}"), inverse, 1e-12));
        }
        // Small curvature: d(x, y) → 2‖x − y‖.
        let c = Curvature::new(1e-8)?;
        let tape = Tape::new();
        let x = uniform(&mut rng, &[TRIPLES, DIM], -0.5, 0.5);
        let y = uniform(&mut rng, &[TRIPLES, DIM], -0.5, 0.5);
        let euclid = row_norms(&x.zip_map(&y, |a, b| a - b));
        let d = distance_with(tape.constant(x), tape.constant(y), c, add)?;
        let limit = d
            .value()
            .data()
            .iter()
            .zip(&euclid)
            .filter(|(_, &e)| e > 1e-6)
            .map(|(&d, &e)| (d - 2.0 * e).abs() / (2.0 * e))
            .fold(0f64, f64::max);
        checks.push(Check::new("euclidean limit, c=1e-8 (relative)", limit, 1e-3));
        // Goldens: (0.5,0) ⊕ (0.5,0) = (1/1.025, 0) and d(0, w).
        let c = Curvature::DEFAULT;
        let half = tape.constant(Tensor::from_vec(vec![0.5, 0.0]));
        let sum = add(half, half, c)?.value().clone();
        let golden_sum = (sum.data()[0] - 0.975609).abs().max(sum.data()[1].abs());
        checks.push(Check::new("golden (0.5,0)+(0.5,0) = (0.975609,0)", golden_sum, 1e-4));
        let origin = tape.constant(Tensor::from_vec(vec![0.0, 0.0]));
        let w = tape.constant(Tensor::from_vec(vec![0.3, 0.4]));
        let dist = distance_with(origin, w, c, add)?.item();
        checks.push(Check::new("golden d(0, |w|=0.5) = 1.00845", (dist - 1.00845).abs(), 1e-4));
        Ok(checks)
    })
}

/// Weights for collapsing a tensor output to a scalar.
fn projection(shape: &[usize]) -> Tensor {
    let mut rng = stream_rng(0, Stream::Data, 11);
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(0.5..1.5)).collect()).expect("shape")
}

fn scalarize<'t>(out: Var<'t>) -> Result<Var<'t>> {
    let shape = out.shape();
    if shape.iter().product::<usize>() == 1 {
        return out.sum_all();
    }
    out.mul(out.tape().constant(projection(&shape)))?.sum_all()
}

/// Worst norm-wise relative error `‖g − ĝ‖ / max(‖g‖, ‖ĝ‖, 1e-8)` over the
/// inputs, between reverse-mode gradients `g` and central differences `ĝ`
/// with step `h`. Non-scalar outputs are reduced with fixed positive
/// weights first.
pub fn gradcheck<F>(f: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: for<'t> Fn(&[Var<'t>]) -> Result<Var<'t>>,
{
    Ok(gradcheck_each(f, inputs, h)?.into_iter().fold(0.0, f64::max))
}

/// Per-input errors of [`gradcheck`].
pub fn gradcheck_each<F>(f: F, inputs: &[Tensor], h: f64) -> Result<Vec<f64>>
where
    F: for<'t> Fn(&[Var<'t>]) -> Result<Var<'t>>,
{
    let analytic = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let root = scalarize(f(&vars)?)?;
        let grads = tape.backward(root)?;
        vars.iter()
            .map(|&v| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(v.value().shape())))
            .collect::<Vec<_>>()
    };
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = xs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        Ok(scalarize(f(&vars)?)?.item())
    };
    let mut errors = Vec::with_capacity(inputs.len());
    let mut xs = inputs.to_vec();
    for (i, g) in analytic.iter().enumerate() {
        let mut num = vec![0.0; g.len()];
        for (j, slot) in num.iter_mut().enumerate() {
            let orig = xs[i].data()[j];
            xs[i].data_mut()[j] = orig + h;
            let up = eval(&xs)?;
            xs[i].data_mut()[j] = orig - h;
            let down = eval(&xs)?;
            xs[i].data_mut()[j] = orig;
            *slot = (up - down) / (2.0 * h);
        }
        let diff = g.data().iter().zip(&num).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let na = g.data().iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = num.iter().map(|a| a * a).sum::<f64>().sqrt();
        errors.push(diff / na.max(nn).max(1e-8));
    }
    Ok(errors)
}

type OpFn = for<'t> fn(&[Var<'t>]) -> Result<Var<'t>>;

fn c01() -> Curvature {
    Curvature::DEFAULT
}

/// Per-op and end-to-end finite-difference checks.
pub fn gradient_suite(seed: u64) -> Result<SuiteResult> {
    timed("gradient", || {
        const H: f64 = 1e-5;
        let mut rng = stream_rng(seed, Stream::Data, 12);
        let r = &mut rng;
        let ball = |r: &mut ChaCha8Rng, rows| ball_points(r, rows, 3, c01(), 0.8);
        let cases: Vec<(&str, OpFn, Vec<Tensor>)> = vec![
            ("add (broadcast)", |v| v[0].add(v[1]), vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[4], -1.0, 1.0)]),
            ("sub (broadcast)", |v| v[0].sub(v[1]), vec![uniform(r, &[2, 3, 4], -1.0, 1.0), uniform(r, &[3, 1], -1.0, 1.0)]),
            ("mul (broadcast)", |v| v[0].mul(v[1]), vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[3, 1], -1.0, 1.0)]),
            ("div", |v| v[0].div(v[1]), vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[3, 4], 0.5, 2.0)]),
            ("neg", |v| v[0].neg(), vec![uniform(r, &[5], -1.0, 1.0)]),
            ("scale / add_scalar", |v| v[0].scale(-1.7)?.add_scalar(0.3), vec![uniform(r, &[5], -1.0, 1.0)]),
            ("square", |v| v[0].square(), vec![uniform(r, &[5], -1.0, 1.0)]),
            ("tanh", |v| v[0].tanh(), vec![uniform(r, &[5], -2.0, 2.0)]),
            ("exp", |v| v[0].exp(), vec![uniform(r, &[5], -2.0, 2.0)]),
            ("ln", |v| v[0].ln(), vec![uniform(r, &[5], 0.2, 3.0)]),
            ("sqrt", |v| v[0].sqrt(), vec![uniform(r, &[5], 0.2, 3.0)]),
            ("clamp", |v| v[0].clamp(-0.5, 0.5), vec![Tensor::from_vec(vec![-0.9, -0.2, 0.1, 0.45, 0.8])]),
            ("softplus", |v| v[0].softplus(), vec![uniform(r, &[5], -3.0, 3.0)]),
            ("atanh", |v| v[0].atanh(), vec![uniform(r, &[5], -0.9, 0.9)]),
            ("tanh_ratio", |v| v[0].tanh_ratio(), vec![Tensor::from_vec(vec![-1.5, -0.3, 2e-5, 0.05, 0.7, 2.0])]),
            ("matmul", |v| v[0].matmul(v[1]), vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[4, 2], -1.0, 1.0)]),
            ("linear", |v| v[0].linear(v[1], v[2]), vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[4, 2], -1.0, 1.0), uniform(r, &[2], -1.0, 1.0)]),
            ("reshape / permute", |v| v[0].reshape(&[2, 3, 4])?.permute(&[2, 0, 1])?.square(), vec![uniform(r, &[6, 4], -1.0, 1.0)]),
            ("flip", |v| v[0].flip(1)?.square(), vec![uniform(r, &[2, 3, 2], -1.0, 1.0)]),
            ("sum / mean", |v| v[0].sum(&[1])?.mul(v[0].mean(&[0, 2])?.sum_all()?), vec![uniform(r, &[2, 3, 2], -1.0, 1.0)]),
            ("max", |v| v[0].max(&[1]), vec![Tensor::new(&[2, 3], vec![0.1, 0.9, -0.3, 0.5, -0.2, 0.4]).expect("shape")]),
            ("mean_all", |v| v[0].square()?.mean_all(), vec![uniform(r, &[3, 3], -1.0, 1.0)]),
            ("gather_rows", |v| v[0].gather_rows(&[2, 0, 2])?.square(), vec![uniform(r, &[3, 2], -1.0, 1.0)]),
            ("norm_last", |v| v[0].norm_last(), vec![uniform(r, &[3, 4], -1.0, 1.0)]),
            ("layer_norm", |v| layer_norm(v[0], v[1], v[2]), vec![uniform(r, &[3, 5], -1.0, 1.0), uniform(r, &[5], 0.5, 1.5), uniform(r, &[5], -0.5, 0.5)]),
            (
                "selective_scan",
                |v| selective_scan(v[0], v[1].softplus()?, v[2].exp()?.neg()?, v[3], v[4], v[5]),
                vec![
                    uniform(r, &[2, 5, 3], -1.0, 1.0),
                    uniform(r, &[2, 5, 3], -1.0, 1.0),
                    uniform(r, &[3, 2], -2.0, 0.0),
                    uniform(r, &[2, 5, 2], -1.0, 1.0),
                    uniform(r, &[2, 5, 2], -1.0, 1.0),
                    uniform(r, &[3], -1.0, 1.0),
                ],
            ),
            ("mobius_add", |v| mobius_add(v[0], v[1], c01()), vec![ball(r, 4), ball(r, 4)]),
            ("exp_map_0", |v| exp_map_0(v[0], c01()), vec![uniform(r, &[4, 3], -2.0, 2.0)]),
            ("exp_map_v", |v| exp_map_v(v[0], v[1], c01()), vec![ball(r, 4), uniform(r, &[4, 3], -1.0, 1.0)]),
            ("distance", |v| crate::poincare::distance(v[0], v[1], c01()), vec![ball(r, 4), ball(r, 4)]),
            ("project_to_ball (outside)", |v| project_to_ball(v[0], c01())?.square(), vec![uniform(r, &[3, 3], 3.0, 6.0)]),
            (
                "compute_style",
                |v| {
                    let s = compute_style(StateEmbedding { f: v[0], stage: 1 })?;
                    s.mu.mul(s.sigma)
                },
                vec![uniform(r, &[2, 3, 3, 3], -1.0, 1.0)],
            ),
            (
                "hallucinate",
                |v| {
                    let f = StateEmbedding { f: v[0], stage: 1 };
                    let stats = compute_style(f)?;
                    let tape = v[0].tape();
                    let target = StyleStats {
                        mu: tape.constant(Tensor::new(&[2, 3], vec![0.1, -0.2, 0.3, 0.0, 0.5, -0.4]).expect("shape")),
                        sigma: tape.constant(Tensor::new(&[2, 3], vec![0.7, 1.2, 0.4, 0.9, 1.5, 0.3]).expect("shape")),
                        stage: 1,
                    };
                    Ok(hallucinate(f, &stats, &target)?.f)
                },
                vec![uniform(r, &[2, 3, 3, 3], -1.0, 1.0)],
            ),
            ("cls_loss", |v| cls_loss(v[0], &[0, 3, 1]), vec![uniform(r, &[3, 4], -2.0, 2.0)]),
            ("classify", |v| classify(StateEmbedding { f: v[0], stage: 4 }, v[1], v[2]), vec![uniform(r, &[2, 3, 2, 2], -1.0, 1.0), uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[4], -1.0, 1.0)]),
            ("project_stage", |v| project_stage(StateEmbedding { f: v[0], stage: 1 }, c01()), vec![uniform(r, &[2, 3, 2, 2], -2.0, 2.0)]),
            (
                "hmc_loss",
                |v| {
                    let emb = HyperbolicEmbeddingSet {
                        z: v[..4].to_vec(),
                        z_tilde: v[4..].to_vec(),
                        stages: vec![1, 2, 3, 4],
                    };
                    let labels = BatchLabels {
                        fine: vec![0, 1, 2, 3],
                        coarse: vec![0, 0, 1, 0],
                    };
                    hmc_loss(&emb, &labels, c01())
                },
                (0..8).map(|_| ball(r, 4)).collect(),
            ),
        ];
        let mut checks = cases
            .into_par_iter()
            .map(|(name, f, inputs)| Ok(Check::new(name, gradcheck(f, &inputs, H)?, 1e-4)))
            .collect::<Result<Vec<_>>>()?;
        checks.push(Check::new("total objective, 2-sample batch (all params)", end_to_end_gradient(seed)?, 1e-3));
        Ok(checks)
    })
}

/// Encoder small enough for exhaustive finite differences.
pub fn probe_encoder() -> EncoderConfig {
    EncoderConfig {
        image_size: 8,
        patch_size: 1,
        stage_channels: [2, 4, 8, 16],
        state_dim: 2,
        ..EncoderConfig::default()
    }
}

/// Finite-difference check of the full objective (clean + hallucinated
/// classification + λ·HMC) with respect to every parameter. The sampled
/// styles are recorded once and replayed, so the objective is a fixed
/// function of the parameters.
pub fn end_to_end_gradient(seed: u64) -> Result<f64> {
    let run = RunConfig::default();
    Ok(end_to_end_gradient_each(seed, &run)?.into_iter().map(|(_, e)| e).fold(0.0, f64::max))
}

/// Per-parameter errors of [`end_to_end_gradient`].
pub fn end_to_end_gradient_each(seed: u64, run: &RunConfig) -> Result<Vec<(String, f64)>> {
    let cfg = probe_encoder();
    let mut model = Model::new(cfg.clone(), seed)?;
    let mut rng = stream_rng(seed, Stream::Data, 13);
    // a non-zero head so the classification path reaches the encoder
    let (head, _) = model.encoder.head();
    let shape = model.params.get(head).value.shape().to_vec();
    model.params.get_mut(head).value = uniform(&mut rng, &shape, -0.5, 0.5);
    let images = uniform(&mut rng, &[2, 3, cfg.image_size, cfg.image_size], 0.0, 1.0);
    let labels = BatchLabels {
        fine: vec![1, 2],
        coarse: vec![0, 0],
    };
    let records = {
        let tape = Tape::new();
        let p = model.params.bind(&tape, false);
        let mut hallucinator = StyleHallucinator::new(NUM_STAGES, run.slope_window);
        // two batches' worth of slopes so the sampled range is not a point
        let mut style_rng = stream_rng(seed, Stream::Style, 0);
        let mut source = StyleSource::Sample {
            hallucinator: &mut hallucinator,
            rng: &mut style_rng,
        };
        let shifted = tape.constant(images.map(|v| 0.5 * v + 0.2));
        objective(&model, &p, shifted, &labels, run, &mut source)?;
        objective(&model, &p, tape.constant(images.clone()), &labels, run, &mut source)?.records
    };
    let inputs: Vec<Tensor> = model.params.params().iter().map(|p| p.value.clone()).collect();
    let errors = gradcheck_each(
        |v| {
            let p = BoundParams::from_vars(v.to_vec());
            let x = v[0].tape().constant(images.clone());
            let mut replay = StyleSource::replay(&records);
            Ok(objective(&model, &p, x, &labels, run, &mut replay)?.total)
        },
        &inputs,
        1e-5,
    )?;
    Ok(model.params.params().iter().map(|p| p.name.clone()).zip(errors).collect())
}

/// Naive per-element recurrence: the reference for `selective_scan`.
#[allow(clippy::too_many_arguments)]
pub fn scan_reference(
    (bsz, len, ch, st): (usize, usize, usize, usize),
    x: &[f64],
    delta: &[f64],
    a: &[f64],
    b: &[f64],
    c: &[f64],
    d: &[f64],
) -> Vec<f64> {
    let mut y = vec![0.0; bsz * len * ch];
    for bi in 0..bsz {
        for k in 0..ch {
            let mut h = vec![0.0; st];
            for t in 0..len {
                let tok = (bi * len + t) * ch + k;
                let sel = (bi * len + t) * st;
                let mut acc = 0.0;
                for n in 0..st {
                    h[n] = (delta[tok] * a[k * st + n]).exp() * h[n] + delta[tok] * b[sel + n] * x[tok];
                    acc += c[sel + n] * h[n];
                }
                y[tok] = acc + d[k] * x[tok];
            }
        }
    }
    y
}

pub fn scan_suite(seed: u64) -> Result<SuiteResult> {
    timed("scan", || {
        let mut rng = stream_rng(seed, Stream::Data, 14);
        let mut worst = 0f64;
        for _ in 0..100 {
            let dims = (
                rng.gen_range(1..=3),
                rng.gen_range(1..=64),
                rng.gen_range(1..=6),
                rng.gen_range(1..=8),
            );
            let (bsz, len, ch, st) = dims;
            let x = uniform(&mut rng, &[bsz, len, ch], -2.0, 2.0);
            let delta = uniform(&mut rng, &[bsz, len, ch], 0.01, 2.0);
            let a = uniform(&mut rng, &[ch, st], -3.0, -0.01);
            let b = uniform(&mut rng, &[bsz, len, st], -1.0, 1.0);
            let c = uniform(&mut rng, &[bsz, len, st], -1.0, 1.0);
            let d = uniform(&mut rng, &[ch], -1.0, 1.0);
            let reference = scan_reference(dims, x.data(), delta.data(), a.data(), b.data(), c.data(), d.data());
            let tape = Tape::new();
            let [x, delta, a, b, c, d] = [x, delta, a, b, c, d].map(|t| tape.constant(t));
            let y = selective_scan(x, delta, a, b, c, d)?;
            let err = y
                .value()
                .data()
                .iter()
                .zip(&reference)
                .fold(0f64, |m, (p, q)| m.max((p - q).abs()));
            worst = worst.max(err);
        }
        Ok(vec![Check::new("scan vs sequential recurrence, 100 configs", worst, 1e-10)])
    })
}

/// Slope by solving the 2×2 normal equations of `σ ≈ α + γμ`.
fn normal_equation_slope(mu: &[f64], sigma: &[f64]) -> f64 {
    let n = mu.len() as f64;
    let (sx, sy) = (mu.iter().sum::<f64>(), sigma.iter().sum::<f64>());
    let sxx: f64 = mu.iter().map(|m| m * m).sum();
    let sxy: f64 = mu.iter().zip(sigma).map(|(m, s)| m * s).sum();
    (n * sxy - sx * sy) / (n * sxx - sx * sx)
}

pub fn style_suite(seed: u64) -> Result<SuiteResult> {
    timed("style", || {
        let mut rng = stream_rng(seed, Stream::Data, 15);
        let mut round_trip = 0f64;
        let mut identity = 0f64;
        let mut slope = 0f64;
        for _ in 0..50 {
            let tape = Tape::new();
            let (b, c) = (rng.gen_range(1..=4), rng.gen_range(1..=6));
            let f = StateEmbedding {
                f: tape.constant(uniform(&mut rng, &[b, c, 4, 5], -2.0, 2.0)),
                stage: 1,
            };
            let stats = compute_style(f)?;
            let target = StyleStats {
                mu: tape.constant(uniform(&mut rng, &[b, c], -1.0, 1.0)),
                sigma: tape.constant(uniform(&mut rng, &[b, c], 0.1, 2.0)),
                stage: 1,
            };
            let back = compute_style(hallucinate(f, &stats, &target)?)?;
            round_trip = round_trip
                .max(back.mu.value().max_abs_diff(&target.mu.value()))
                .max(back.sigma.value().max_abs_diff(&target.sigma.value()));
            identity = identity.max(hallucinate(f, &stats, &stats)?.f.value().max_abs_diff(&f.f.value()));
            let mu = uniform(&mut rng, &[8, 16], -1.0, 1.0);
            let sigma = uniform(&mut rng, &[8, 16], 0.0, 2.0);
            let cloud = StyleStats {
                mu: tape.constant(mu.clone()),
                sigma: tape.constant(sigma.clone()),
                stage: 1,
            };
            slope = slope.max((fit_slope(&cloud)? - normal_equation_slope(mu.data(), sigma.data())).abs());
        }
        let ext = |g: &[f64], lo: f64, hi: f64| -> Result<f64> {
            let r = extrapolate_range(g)?;
            Ok((r.gamma_min_ext - lo).abs().max((r.gamma_max_ext - hi).abs()))
        };
        let substitution = ext(&[0.2, 0.6, 0.4], -0.2, 1.0)?
            .max(ext(&[-0.5, 0.5], -1.5, 1.5)?)
            .max(ext(&[0.3, 0.3], 0.3, 0.3)?);
        Ok(vec![
            Check::new("re-extraction round trip", round_trip, 1e-6),
            Check::new("self re-stylization is identity", identity, 1e-10),
            Check::new("fit_slope vs normal equations (8x16)", slope, 1e-10),
            Check::new("extrapolation by substitution", substitution, 1e-12),
        ])
    })
}

fn ref_mobius(v: &[f64], w: &[f64], c: f64) -> Vec<f64> {
    let dot: f64 = v.iter().zip(w).map(|(a, b)| a * b).sum();
    let vv: f64 = v.iter().map(|a| a * a).sum();
    let ww: f64 = w.iter().map(|a| a * a).sum();
    let den = 1.0 + 2.0 * c * dot + c * c * vv * ww;
    v.iter()
        .zip(w)
        .map(|(a, b)| ((1.0 + 2.0 * c * dot + c * ww) * a + (1.0 - c * vv) * b) / den)
        .collect()
}

/// Scalar geodesic distance, independent of the tape implementation.
pub fn ref_distance(x: &[f64], y: &[f64], c: f64) -> f64 {
    let neg: Vec<f64> = x.iter().map(|v| -v).collect();
    let m = ref_mobius(&neg, y, c);
    let norm = m.iter().map(|v| v * v).sum::<f64>().sqrt();
    2.0 / c.sqrt() * (c.sqrt() * norm).atanh()
}

pub fn loss_suite(seed: u64) -> Result<SuiteResult> {
    timed("loss", || {
        let mut rng = stream_rng(seed, Stream::Data, 16);
        let tape = Tape::new();
        let uniform_ce = cls_loss(tape.constant(Tensor::zeros(&[4, 8])), &[0, 3, 5, 7])?.item();
        let logits = uniform(&mut rng, &[5, 8], -3.0, 3.0);
        let labels = [1usize, 0, 7, 4, 4];
        let direct: f64 = logits
            .data()
            .chunks(8)
            .zip(&labels)
            .map(|(row, &y)| {
                let z: f64 = row.iter().map(|v| v.exp()).sum();
                -(row[y].exp() / z).ln()
            })
            .sum::<f64>()
            / labels.len() as f64;
        let ce_err = (cls_loss(tape.constant(logits), &labels)?.item() - direct).abs();
        let c = Curvature::DEFAULT;
        let mut hmc_err = 0f64;
        for _ in 0..20 {
            let dims = [2, 3, 4, 5];
            let z: Vec<Tensor> = dims.iter().map(|&d| ball_points(&mut rng, 4, d, c, 0.9)).collect();
            let zt: Vec<Tensor> = dims.iter().map(|&d| ball_points(&mut rng, 4, d, c, 0.9)).collect();
            let coarse: Vec<usize> = (0..4).map(|_| rng.gen_range(0..2)).collect();
            let labels = BatchLabels {
                fine: vec![0; 4],
                coarse: coarse.clone(),
            };
            let emb = HyperbolicEmbeddingSet {
                z: z.iter().map(|t| tape.constant(t.clone())).collect(),
                z_tilde: zt.iter().map(|t| tape.constant(t.clone())).collect(),
                stages: vec![1, 2, 3, 4],
            };
            let got = hmc_loss(&emb, &labels, c)?.item();
            let row = |t: &Tensor, i: usize| {
                let d = t.shape()[1];
                t.data()[i * d..(i + 1) * d].to_vec()
            };
            let mut consistency = 0.0;
            for (a, b) in z.iter().zip(&zt) {
                consistency += (0..4).map(|i| ref_distance(&row(a, i), &row(b, i), 0.1)).sum::<f64>() / 4.0;
            }
            consistency /= 4.0;
            let mut pair_sum = 0.0;
            let mut pairs = 0;
            for i in 0..4 {
                for j in 0..4 {
                    if i < j && coarse[i] == coarse[j] {
                        pair_sum += ref_distance(&row(&z[3], i), &row(&z[3], j), 0.1);
                        pairs += 1;
                    }
                }
            }
            let pair = if pairs > 0 { pair_sum / pairs as f64 } else { 0.0 };
            hmc_err = hmc_err.max((got - consistency - pair).abs());
        }
        Ok(vec![
            Check::new("uniform logits over 8 classes = ln 8", (uniform_ce - 8f64.ln()).abs(), 1e-9),
            Check::new("cross-entropy vs direct formula", ce_err, 1e-10),
            Check::new("hmc_loss vs brute-force pairs (B=4)", hmc_err, 1e-9),
        ])
    })
}
