//! Hyperbolic manifold consistency and classification objectives.

use crate::error::{Error, Result};
use crate::poincare::{distance, exp_map_0, project_to_ball, Curvature};
use crate::ssm::{StateEmbedding, NUM_STAGES};
use crate::tensor::{Tensor, Var};

/// Default weight of the consistency term in the total objective.
pub const DEFAULT_LAMBDA: f64 = 0.5;

/// Fine and coarse labels of a batch, aligned by sample.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BatchLabels {
    pub fine: Vec<usize>,
    pub coarse: Vec<usize>,
}

impl BatchLabels {
    pub fn len(&self) -> usize {
        self.fine.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fine.is_empty()
    }

    /// Unordered distinct pairs sharing a coarse label, lexicographic order.
    pub fn same_coarse_pairs(&self) -> Vec<(usize, usize)> {
        let n = self.coarse.len();
        (0..n)
            .flat_map(|a| (a + 1..n).map(move |b| (a, b)))
            .filter(|&(a, b)| self.coarse[a] == self.coarse[b])
            .collect()
    }
}

/// Ball embeddings per stage before (`z`) and after (`z_tilde`)
/// hallucination. `z[i]` is stage `i + 1`, shape `[B, C_i]`.
#[derive(Clone, Debug)]
pub struct HyperbolicEmbeddingSet<'t> {
    pub z: Vec<Var<'t>>,
    pub z_tilde: Vec<Var<'t>>,
    /// 1-based stages entering the consistency term.
    pub stages: Vec<usize>,
}

/// Spatial mean pool, exponential map at the origin, then projection.
pub fn project_stage<'t>(f: StateEmbedding<'t>, c: Curvature) -> Result<Var<'t>> {
    let pooled = f.f.mean(&[2, 3])?;
    project_to_ball(exp_map_0(pooled, c)?, c)
}

/// Mean over `stages` of the per-sample distance `d(z_b, z̃_b)` averaged
/// over the batch, plus the mean stage-4 distance over same-coarse pairs.
pub fn hmc_loss<'t>(
    emb: &HyperbolicEmbeddingSet<'t>,
    labels: &BatchLabels,
    c: Curvature,
) -> Result<Var<'t>> {
    if labels.is_empty() {
        return Err(Error::EmptySplit);
    }
    if emb.z.len() != NUM_STAGES || emb.z_tilde.len() != NUM_STAGES || emb.stages.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "hmc_loss",
            lhs: vec![emb.z.len(), emb.z_tilde.len()],
            rhs: emb.stages.clone(),
        });
    }
    let tape = emb.z[0].tape();
    let mut consistency = tape.scalar(0.0);
    for &stage in &emb.stages {
        let i = stage
            .checked_sub(1)
            .filter(|&i| i < NUM_STAGES)
            .ok_or(Error::InvalidAxis {
                axis: stage,
                rank: NUM_STAGES,
            })?;
        let d = distance(emb.z[i], emb.z_tilde[i], c)?.mean_all()?;
        consistency = consistency.add(d)?;
    }
    let consistency = consistency.scale(1.0 / emb.stages.len() as f64)?;
    let pairs = labels.same_coarse_pairs();
    if pairs.is_empty() {
        return Ok(consistency);
    }
    let (left, right): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
    let deep = emb.z[NUM_STAGES - 1];
    let pair_term = distance(deep.gather_rows(&left)?, deep.gather_rows(&right)?, c)?.mean_all()?;
    consistency.add(pair_term)
}

/// Mean cross-entropy of `logits` `[B, K]` against `labels`.
pub fn cls_loss<'t>(logits: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[1] < 2 || shape[0] != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "cls_loss",
            lhs: shape,
            rhs: vec![labels.len()],
        });
    }
    let (b, k) = (shape[0], shape[1]);
    let mut onehot = vec![0.0; b * k];
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::LabelOutOfRange {
                label: y,
                classes: k,
            });
        }
        onehot[i * k + y] = 1.0;
    }
    let tape = logits.tape();
    let shift = logits.max(&[1])?.detach().reshape(&[b, 1])?;
    let shifted = logits.sub(shift)?;
    let log_z = shifted.exp()?.sum(&[1])?.ln()?;
    let picked = shifted
        .mul(tape.constant(Tensor::new(&[b, k], onehot)?))?
        .sum(&[1])?;
    log_z.sub(picked)?.mean_all()
}

/// `cls + cls_tilde + λ·hmc`; absent terms are skipped.
pub fn total_loss<'t>(
    cls: Var<'t>,
    cls_tilde: Option<Var<'t>>,
    hmc: Option<Var<'t>>,
    lambda: f64,
) -> Result<Var<'t>> {
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("lambda must be non-negative, got {lambda}")));
    }
    let mut total = cls;
    if let Some(t) = cls_tilde {
        total = total.add(t)?;
    }
    if let Some(h) = hmc {
        total = total.add(h.scale(lambda)?)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    fn c() -> Curvature {
        Curvature::default()
    }

    #[test]
    fn uniform_logits_give_log_k() {
        let tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(&[3, 8]));
        let l = cls_loss(logits, &[0, 4, 7]).unwrap().item();
        assert!((l - 8f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn saturated_softmax_is_nearly_free() {
        let tape = Tape::new();
        let mut data = vec![0.0; 8];
        data[2] = 30.0;
        let logits = tape.constant(Tensor::new(&[1, 8], data).unwrap());
        assert!(cls_loss(logits, &[2]).unwrap().item() < 1e-9);
    }

    #[test]
    fn label_out_of_range() {
        let tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(&[1, 4]));
        assert!(matches!(
            cls_loss(logits, &[4]),
            Err(Error::LabelOutOfRange { label: 4, classes: 4 })
        ));
    }

    #[test]
    fn total_loss_arithmetic() {
        let tape = Tape::new();
        let t = total_loss(tape.scalar(1.0), Some(tape.scalar(1.0)), Some(tape.scalar(2.0)), 0.5)
            .unwrap();
        assert_eq!(t.item(), 3.0);
        let t = total_loss(tape.scalar(1.0), Some(tape.scalar(1.0)), Some(tape.scalar(2.0)), 0.0)
            .unwrap();
        assert_eq!(t.item(), 2.0);
        assert_eq!(DEFAULT_LAMBDA, 0.5);
    }

    fn zero_stage<'t>(tape: &'t Tape, b: usize, c: usize) -> Var<'t> {
        tape.constant(Tensor::zeros(&[b, c]))
    }

    #[test]
    fn zero_features_project_to_origin() {
        let tape = Tape::new();
        let f = StateEmbedding {
            f: tape.constant(Tensor::zeros(&[2, 3, 2, 2])),
            stage: 1,
        };
        let z = project_stage(f, c()).unwrap();
        assert_eq!(z.shape(), vec![2, 3]);
        assert!(z.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hmc_vanishes_without_pairs_and_shift() {
        let tape = Tape::new();
        let z: Vec<Var> = (0..4)
            .map(|i| {
                let data = (0..3 * (i + 2)).map(|k| 0.05 * k as f64).collect();
                tape.constant(Tensor::new(&[3, i + 2], data).unwrap())
            })
            .collect();
        let emb = HyperbolicEmbeddingSet {
            z: z.clone(),
            z_tilde: z,
            stages: vec![1, 2, 3, 4],
        };
        let labels = BatchLabels {
            fine: vec![0, 1, 2],
            coarse: vec![0, 1, 2],
        };
        assert!(hmc_loss(&emb, &labels, c()).unwrap().item().abs() < 1e-12);
    }

    #[test]
    fn hmc_vanishes_for_identical_same_coarse_pair() {
        let tape = Tape::new();
        let z: Vec<Var> = (0..4).map(|_| zero_stage(&tape, 2, 3)).collect();
        let emb = HyperbolicEmbeddingSet {
            z: z.clone(),
            z_tilde: z,
            stages: vec![1, 2, 3, 4],
        };
        let labels = BatchLabels {
            fine: vec![0, 1],
            coarse: vec![0, 0],
        };
        assert_eq!(hmc_loss(&emb, &labels, c()).unwrap().item(), 0.0);
    }

    #[test]
    fn pair_enumeration_is_lexicographic() {
        let labels = BatchLabels {
            fine: vec![0, 1, 2, 3, 4],
            coarse: vec![1, 0, 1, 0, 1],
        };
        assert_eq!(labels.same_coarse_pairs(), vec![(0, 2), (0, 4), (1, 3), (2, 4)]);
    }
}
