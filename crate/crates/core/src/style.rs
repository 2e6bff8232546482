//! Style statistics and state space hallucination.
//!
//! A feature block's style is its per-(sample, channel) spatial mean and
//! deviation. Over a batch these `(μ, σ)` points form a cloud whose
//! least-squares slope `γ` summarizes how contrast co-varies with
//! brightness. Hallucination widens the range of slopes seen recently,
//! draws a new slope from the widened range and re-stylizes the features
//! onto the line through the batch centroid with that slope.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ssm::StateEmbedding;
use crate::tensor::{Tensor, Var};

/// Floor on target deviations and on the deviation used for normalization.
pub const SIGMA_FLOOR: f64 = 1e-3;
/// Added to the spatial variance before the square root.
pub const VAR_EPS: f64 = 1e-12;
/// Number of recent batch slopes kept per stage.
pub const DEFAULT_WINDOW: usize = 16;

const DEGENERATE_DENOM: f64 = 1e-12;

/// Per-(sample, channel) style of one stage, each `[B, C_i]`.
#[derive(Clone, Copy, Debug)]
pub struct StyleStats<'t> {
    pub mu: Var<'t>,
    pub sigma: Var<'t>,
    pub stage: usize,
}

impl<'t> StyleStats<'t> {
    pub fn values(&self) -> (Tensor, Tensor) {
        (self.mu.value().clone(), self.sigma.value().clone())
    }
}

/// Channel-wise spatial mean and deviation of `[B, C, H, W]` features.
pub fn compute_style<'t>(f: StateEmbedding<'t>) -> Result<StyleStats<'t>> {
    let shape = f.f.shape();
    if shape.len() != 4 {
        return Err(Error::ShapeMismatch {
            op: "compute_style",
            lhs: shape,
            rhs: vec![4],
        });
    }
    let (b, c) = (shape[0], shape[1]);
    let mu = f.f.mean(&[2, 3])?;
    let centered = f.f.sub(mu.reshape(&[b, c, 1, 1])?)?;
    let sigma = centered.square()?.mean(&[2, 3])?.add_scalar(VAR_EPS)?.sqrt()?;
    Ok(StyleStats {
        mu,
        sigma,
        stage: f.stage,
    })
}

/// Least-squares slope of σ against μ over every point of the cloud.
pub fn fit_slope_values(mu: &[f64], sigma: &[f64]) -> Result<f64> {
    debug_assert_eq!(mu.len(), sigma.len());
    let n = mu.len() as f64;
    if mu.is_empty() {
        return Err(Error::DegenerateCloud);
    }
    let mu_bar = mu.iter().sum::<f64>() / n;
    let sigma_bar = sigma.iter().sum::<f64>() / n;
    let (mut num, mut den) = (0.0, 0.0);
    for (&m, &s) in mu.iter().zip(sigma) {
        num += (m - mu_bar) * (s - sigma_bar);
        den += (m - mu_bar) * (m - mu_bar);
    }
    if den < DEGENERATE_DENOM {
        return Err(Error::DegenerateCloud);
    }
    Ok(num / den)
}

pub fn fit_slope(stats: &StyleStats<'_>) -> Result<f64> {
    fit_slope_values(stats.mu.value().data(), stats.sigma.value().data())
}

/// Observed slope bounds and their extrapolation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlopeRange {
    pub gamma_min: f64,
    pub gamma_max: f64,
    pub gamma_min_ext: f64,
    pub gamma_max_ext: f64,
}

impl SlopeRange {
    pub fn width(&self) -> f64 {
        self.gamma_max_ext - self.gamma_min_ext
    }
}

/// `min γ̃ = 2·min γ − max γ`, `max γ̃ = 2·max γ − min γ`.
pub fn extrapolate_range(gammas: &[f64]) -> Result<SlopeRange> {
    if gammas.is_empty() {
        return Err(Error::EmptyHistory);
    }
    let gamma_min = gammas.iter().copied().fold(f64::INFINITY, f64::min);
    let gamma_max = gammas.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(SlopeRange {
        gamma_min,
        gamma_max,
        gamma_min_ext: 2.0 * gamma_min - gamma_max,
        gamma_max_ext: 2.0 * gamma_max - gamma_min,
    })
}

/// Sliding window of recent batch slopes.
#[derive(Clone, Debug, PartialEq)]
pub struct SlopeHistory {
    window: usize,
    gammas: VecDeque<f64>,
}

impl SlopeHistory {
    pub fn new(window: usize) -> Self {
        Self {
            window: window.max(1),
            gammas: VecDeque::new(),
        }
    }

    pub fn push(&mut self, gamma: f64) {
        if self.gammas.len() == self.window {
            self.gammas.pop_front();
        }
        self.gammas.push_back(gamma);
    }

    pub fn range(&self) -> Result<SlopeRange> {
        let v: Vec<f64> = self.gammas.iter().copied().collect();
        extrapolate_range(&v)
    }

    pub fn len(&self) -> usize {
        self.gammas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gammas.is_empty()
    }
}

/// Draws `γ̃ ~ U[min γ̃, max γ̃]`.
pub fn draw_slope(range: &SlopeRange, rng: &mut impl Rng) -> f64 {
    if range.width() > 0.0 {
        rng.gen_range(range.gamma_min_ext..range.gamma_max_ext)
    } else {
        range.gamma_min_ext
    }
}

/// Moves every point's σ onto the line of slope `gamma` through the batch
/// centroid, keeping its μ: `σ̃ = max(σ̄ + γ̃(μ − μ̄), SIGMA_FLOOR)`. The
/// result is detached from the tape.
pub fn restyle_on_line<'t>(stats: &StyleStats<'t>, gamma: f64) -> Result<StyleStats<'t>> {
    let (mu, sigma) = stats.values();
    let n = mu.len() as f64;
    let mu_bar = mu.data().iter().sum::<f64>() / n;
    let sigma_bar = sigma.data().iter().sum::<f64>() / n;
    let target_sigma = mu.map(|m| (sigma_bar + gamma * (m - mu_bar)).max(SIGMA_FLOOR));
    let tape = stats.mu.tape();
    Ok(StyleStats {
        mu: tape.constant(mu),
        sigma: tape.constant(target_sigma),
        stage: stats.stage,
    })
}

/// Samples a hallucinated style for `stats` from `range`.
pub fn sample_style<'t>(
    stats: &StyleStats<'t>,
    range: &SlopeRange,
    rng: &mut impl Rng,
) -> Result<StyleStats<'t>> {
    restyle_on_line(stats, draw_slope(range, rng))
}

/// `F̃ = σ̃·(F − μ)/max(σ, SIGMA_FLOOR) + μ̃`, per (sample, channel).
pub fn hallucinate<'t>(
    f: StateEmbedding<'t>,
    stats: &StyleStats<'t>,
    target: &StyleStats<'t>,
) -> Result<StateEmbedding<'t>> {
    let shape = f.f.shape();
    let stat_shape = stats.mu.shape();
    if shape.len() != 4
        || stat_shape != shape[..2]
        || stats.sigma.shape() != stat_shape
        || target.mu.shape() != stat_shape
        || target.sigma.shape() != stat_shape
    {
        return Err(Error::ShapeMismatch {
            op: "hallucinate",
            lhs: shape,
            rhs: target.mu.shape(),
        });
    }
    let col = [shape[0], shape[1], 1, 1];
    let mu = stats.mu.reshape(&col)?;
    let sigma = stats.sigma.clamp(SIGMA_FLOOR, f64::INFINITY)?.reshape(&col)?;
    let out = f
        .f
        .sub(mu)?
        .div(sigma)?
        .mul(target.sigma.reshape(&col)?)?
        .add(target.mu.reshape(&col)?)?;
    Ok(StateEmbedding {
        f: out,
        stage: f.stage,
    })
}

/// Summary of one hallucinated stage, kept for logging and export.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleRecord {
    pub stage: usize,
    /// Slope fitted to the original cloud (`None` when degenerate).
    pub gamma: Option<f64>,
    /// Drawn slope.
    pub gamma_tilde: f64,
    pub range: SlopeRange,
    pub original: (Tensor, Tensor),
    pub hallucinated: (Tensor, Tensor),
}

/// Stateful hallucination across training steps: one slope window per stage.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleHallucinator {
    histories: Vec<SlopeHistory>,
}

impl StyleHallucinator {
    pub fn new(stages: usize, window: usize) -> Self {
        Self {
            histories: (0..stages).map(|_| SlopeHistory::new(window)).collect(),
        }
    }

    pub fn history(&self, stage: usize) -> &SlopeHistory {
        &self.histories[stage - 1]
    }

    /// Fits the batch slope (0 on a degenerate cloud), updates the stage
    /// window, samples a style and re-stylizes `f` onto it.
    pub fn apply<'t>(
        &mut self,
        f: StateEmbedding<'t>,
        rng: &mut impl Rng,
    ) -> Result<(StateEmbedding<'t>, StyleRecord)> {
        let stats = compute_style(f)?;
        let gamma = match fit_slope(&stats) {
            Ok(g) => Some(g),
            Err(Error::DegenerateCloud) => None,
            Err(e) => return Err(e),
        };
        let history = &mut self.histories[f.stage - 1];
        history.push(gamma.unwrap_or(0.0));
        let range = history.range()?;
        let gamma_tilde = draw_slope(&range, rng);
        let target = restyle_on_line(&stats, gamma_tilde)?;
        let out = hallucinate(f, &stats, &target)?;
        let record = StyleRecord {
            stage: f.stage,
            gamma,
            gamma_tilde,
            range,
            original: stats.values(),
            hallucinated: target.values(),
        };
        Ok((out, record))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn embed<'t>(tape: &'t Tape, shape: &[usize], data: Vec<f64>) -> StateEmbedding<'t> {
        StateEmbedding {
            f: tape.constant(Tensor::new(shape, data).unwrap()),
            stage: 1,
        }
    }

    fn random_block<'t>(tape: &'t Tape, seed: u64, shape: &[usize]) -> StateEmbedding<'t> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        embed(tape, shape, data)
    }

    #[test]
    fn constant_block_has_zero_deviation() {
        let tape = Tape::new();
        let s = compute_style(embed(&tape, &[1, 1, 2, 2], vec![3.0; 4])).unwrap();
        assert_eq!(s.mu.value().data(), &[3.0]);
        assert!(s.sigma.value().data()[0] <= VAR_EPS.sqrt() + 1e-15);
    }

    #[test]
    fn alternating_block_has_unit_deviation() {
        let tape = Tape::new();
        let s = compute_style(embed(&tape, &[1, 1, 2, 2], vec![1., -1., 1., -1.])).unwrap();
        assert_eq!(s.mu.value().data(), &[0.0]);
        assert!((s.sigma.value().data()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn exact_line_is_recovered() {
        let mu: Vec<f64> = (0..12).map(|i| i as f64 * 0.1 - 0.4).collect();
        let sigma: Vec<f64> = mu.iter().map(|m| 2.0 * m + 0.3).collect();
        assert!((fit_slope_values(&mu, &sigma).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn equal_means_are_degenerate() {
        let r = fit_slope_values(&[0.5; 6], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        assert!(matches!(r, Err(Error::DegenerateCloud)));
    }

    #[test]
    fn extrapolation_substitution() {
        let r = extrapolate_range(&[0.2, 0.6, 0.4]).unwrap();
        assert!((r.gamma_min_ext + 0.2).abs() < 1e-15);
        assert!((r.gamma_max_ext - 1.0).abs() < 1e-15);
        let r = extrapolate_range(&[0.3, 0.3]).unwrap();
        assert_eq!((r.gamma_min_ext, r.gamma_max_ext), (0.3, 0.3));
        let r = extrapolate_range(&[-0.5, 0.5]).unwrap();
        assert_eq!((r.gamma_min_ext, r.gamma_max_ext), (-1.5, 1.5));
        assert!(matches!(extrapolate_range(&[]), Err(Error::EmptyHistory)));
    }

    #[test]
    fn history_window_slides() {
        let mut h = SlopeHistory::new(2);
        assert!(h.range().is_err());
        h.push(1.0);
        h.push(-1.0);
        h.push(0.5);
        let r = h.range().unwrap();
        assert_eq!((r.gamma_min, r.gamma_max), (-1.0, 0.5));
        assert_eq!(h.len(), 2);
    }

    #[test]
    fn same_slope_on_a_line_keeps_sigma() {
        let tape = Tape::new();
        let mu: Vec<f64> = vec![0.1, 0.5, -0.3, 0.9];
        let sigma: Vec<f64> = mu.iter().map(|m| 0.5 * m + 1.0).collect();
        let stats = StyleStats {
            mu: tape.constant(Tensor::new(&[2, 2], mu).unwrap()),
            sigma: tape.constant(Tensor::new(&[2, 2], sigma.clone()).unwrap()),
            stage: 1,
        };
        let gamma = fit_slope(&stats).unwrap();
        let t = restyle_on_line(&stats, gamma).unwrap();
        for (a, b) in t.sigma.value().data().iter().zip(&sigma) {
            assert!((a - b).abs() < 1e-14);
        }
        let flat = restyle_on_line(&stats, 0.0).unwrap();
        let mean = sigma.iter().sum::<f64>() / 4.0;
        assert!(flat.sigma.value().data().iter().all(|s| (s - mean).abs() < 1e-14));
    }

    #[test]
    fn seeded_sampling_is_deterministic() {
        let tape = Tape::new();
        let stats = compute_style(random_block(&tape, 3, &[2, 4, 3, 3])).unwrap();
        let range = extrapolate_range(&[0.1, 0.4]).unwrap();
        let a = sample_style(&stats, &range, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_style(&stats, &range, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(*a.sigma.value(), *b.sigma.value());
        assert!(a.sigma.value().data().iter().all(|&s| s >= SIGMA_FLOOR));
    }

    #[test]
    fn hallucinating_onto_own_style_is_identity() {
        let tape = Tape::new();
        let f = random_block(&tape, 5, &[2, 3, 4, 4]);
        let stats = compute_style(f).unwrap();
        let out = hallucinate(f, &stats, &stats).unwrap();
        assert!(out.f.value().max_abs_diff(&f.f.value()) < 1e-10);
    }

    #[test]
    fn collapsed_target_gives_constant_features() {
        let tape = Tape::new();
        let f = random_block(&tape, 6, &[1, 2, 3, 3]);
        let stats = compute_style(f).unwrap();
        let target = StyleStats {
            mu: tape.constant(Tensor::full(&[1, 2], 5.0)),
            sigma: tape.constant(Tensor::full(&[1, 2], SIGMA_FLOOR)),
            stage: 1,
        };
        let out = hallucinate(f, &stats, &target).unwrap();
        assert!(out.f.value().data().iter().all(|v| (v - 5.0).abs() < 1e-2));
    }

    #[test]
    fn hallucinate_checks_shapes() {
        let tape = Tape::new();
        let f = random_block(&tape, 7, &[2, 3, 2, 2]);
        let g = random_block(&tape, 8, &[2, 4, 2, 2]);
        let sf = compute_style(f).unwrap();
        let sg = compute_style(g).unwrap();
        assert!(matches!(hallucinate(f, &sf, &sg), Err(Error::ShapeMismatch { .. })));
    }
}
