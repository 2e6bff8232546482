//! Training loop for the clean and hallucinated branches.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::data::{Dataset, Splits};
use super::eval::evaluate;
use super::{stream_rng, Stream};
use crate::error::{Error, Result};
use crate::losses::{cls_loss, hmc_loss, project_stage, total_loss, BatchLabels, HyperbolicEmbeddingSet};
use crate::ssm::{Encoder, EncoderConfig, StateEmbedding, NUM_STAGES};
use crate::style::{compute_style, fit_slope_values, hallucinate, StyleHallucinator, StyleRecord, StyleStats};
use crate::tensor::{adam_step, AdamState, BoundParams, ParamStore, Tape, Var};

/// Encoder layout plus its parameter values.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub encoder: Encoder,
    pub params: ParamStore,
}

impl Model {
    /// Fresh model initialized from the `Init` stream of `seed`.
    pub fn new(cfg: EncoderConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let encoder = Encoder::new(cfg, &mut params, &mut stream_rng(seed, Stream::Init, 0))?;
        Ok(Self { encoder, params })
    }

    pub fn config(&self) -> &EncoderConfig {
        self.encoder.config()
    }

    /// Clean-path logits `[B, K]`.
    pub fn logits<'t>(&self, p: &BoundParams<'t>, images: Var<'t>) -> Result<Var<'t>> {
        let f = self.encoder.encode(p, images)?;
        self.encoder.classify(p, f[NUM_STAGES - 1])
    }
}

/// Where the hallucinated branch gets its target styles from.
pub enum StyleSource<'a> {
    /// Fit, extrapolate and sample, updating the slope windows.
    Sample {
        hallucinator: &'a mut StyleHallucinator,
        rng: &'a mut ChaCha8Rng,
    },
    /// Reuse previously sampled targets, in stage order. Keeps the
    /// objective a deterministic function of the parameters.
    Replay { records: &'a [StyleRecord], next: usize },
}

impl<'a> StyleSource<'a> {
    pub fn replay(records: &'a [StyleRecord]) -> Self {
        Self::Replay { records, next: 0 }
    }

    fn restyle<'t>(
        &mut self,
        f: StateEmbedding<'t>,
        log: &mut Vec<StyleRecord>,
    ) -> Result<StateEmbedding<'t>> {
        match self {
            Self::Sample { hallucinator, rng } => {
                let (out, record) = hallucinator.apply(f, *rng)?;
                log.push(record);
                Ok(out)
            }
            Self::Replay { records, next } => {
                let record = records.get(*next).ok_or(Error::EmptyHistory)?;
                *next += 1;
                if record.stage != f.stage {
                    return Err(Error::Config(format!(
                        "replayed style is for stage {}, branch is at stage {}",
                        record.stage, f.stage
                    )));
                }
                let stats = compute_style(f)?;
                let tape = f.f.tape();
                let target = StyleStats {
                    mu: tape.constant(record.hallucinated.0.clone()),
                    sigma: tape.constant(record.hallucinated.1.clone()),
                    stage: f.stage,
                };
                let out = hallucinate(f, &stats, &target)?;
                log.push(record.clone());
                Ok(out)
            }
        }
    }
}

/// The terms of one objective evaluation.
#[derive(Clone, Debug)]
pub struct LossTerms<'t> {
    pub total: Var<'t>,
    pub cls: Var<'t>,
    pub cls_tilde: Option<Var<'t>>,
    pub hmc: Option<Var<'t>>,
    /// Styles applied in the hallucinated branch, in stage order.
    pub records: Vec<StyleRecord>,
}

/// `L_cls + L̃_cls + λ·L_HMC` for one batch, honoring the ablation toggles.
///
/// The hallucinated branch starts at the lowest selected stage and re-runs
/// every later stage on the re-stylized features, re-stylizing each
/// selected stage on the way.
pub fn objective<'t>(
    model: &Model,
    p: &BoundParams<'t>,
    images: Var<'t>,
    labels: &BatchLabels,
    run: &RunConfig,
    styles: &mut StyleSource<'_>,
) -> Result<LossTerms<'t>> {
    let enc = &model.encoder;
    let clean = enc.encode(p, images)?;
    let cls = cls_loss(enc.classify(p, clean[NUM_STAGES - 1])?, &labels.fine)?;
    let mut records = Vec::new();
    let branch = if run.enable_ssh {
        let stages = run.stage_set();
        let first = stages[0];
        let mut hook = |f: StateEmbedding<'t>| {
            if stages.contains(&f.stage) {
                styles.restyle(f, &mut records)
            } else {
                Ok(f)
            }
        };
        let start = hook(clean[first - 1])?;
        let mut tilde = clean[..first - 1].to_vec();
        tilde.push(start);
        tilde.extend(enc.resume(p, start, &mut hook)?);
        Some((first, tilde))
    } else {
        None
    };
    let cls_tilde = match &branch {
        Some((_, tilde)) => Some(cls_loss(enc.classify(p, tilde[NUM_STAGES - 1])?, &labels.fine)?),
        None => None,
    };
    let hmc = if run.enable_hmc {
        let c = run.curvature;
        let z = clean
            .iter()
            .map(|&f| project_stage(f, c))
            .collect::<Result<Vec<_>>>()?;
        let z_tilde = match &branch {
            Some((first, tilde)) => tilde
                .iter()
                .enumerate()
                .map(|(i, &f)| if i + 1 < *first { Ok(z[i]) } else { project_stage(f, c) })
                .collect::<Result<Vec<_>>>()?,
            None => z.clone(),
        };
        let emb = HyperbolicEmbeddingSet {
            z,
            z_tilde,
            stages: (1..=NUM_STAGES).collect(),
        };
        Some(hmc_loss(&emb, labels, c)?)
    } else {
        None
    };
    let total = total_loss(cls, cls_tilde, hmc, run.lambda)?;
    Ok(LossTerms {
        total,
        cls,
        cls_tilde,
        hmc,
        records,
    })
}

/// Slope ranges seen during one epoch at one stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSlopes {
    pub stage: usize,
    /// Range of slopes fitted to the original style clouds.
    pub gamma_min: f64,
    pub gamma_max: f64,
    /// Range of slopes re-fitted to the hallucinated style clouds.
    pub hallucinated_min: f64,
    pub hallucinated_max: f64,
}

impl StageSlopes {
    /// Whether the hallucinated range strictly contains the original one.
    pub fn expands(&self) -> bool {
        self.hallucinated_min < self.gamma_min && self.hallucinated_max > self.gamma_max
    }
}

/// One JSONL line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub steps: usize,
    pub train_loss: f64,
    pub cls: f64,
    pub cls_tilde: Option<f64>,
    pub hmc: Option<f64>,
    pub val_acc: Option<f64>,
    pub target_acc: Option<f64>,
    pub slopes: Vec<StageSlopes>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub metrics: Vec<EpochMetrics>,
    /// Total objective of the very first step.
    pub initial_loss: f64,
}

#[derive(Default)]
struct Running {
    steps: usize,
    total: f64,
    cls: f64,
    cls_tilde: f64,
    hmc: f64,
    // per stage: (orig min, orig max, hall min, hall max)
    slopes: Vec<Option<[f64; 4]>>,
}

impl Running {
    fn new() -> Self {
        Self {
            slopes: vec![None; NUM_STAGES],
            ..Self::default()
        }
    }

    fn record(&mut self, r: &StyleRecord) {
        let Some(g) = r.gamma else { return };
        let (mu, sigma) = &r.hallucinated;
        let Ok(h) = fit_slope_values(mu.data(), sigma.data()) else { return };
        let slot = &mut self.slopes[r.stage - 1];
        *slot = Some(match *slot {
            None => [g, g, h, h],
            Some([a, b, c, d]) => [a.min(g), b.max(g), c.min(h), d.max(h)],
        });
    }
}

fn labels_of(data: &Dataset, indices: &[usize]) -> BatchLabels {
    BatchLabels {
        fine: indices.iter().map(|&i| data.samples[i].fine as usize).collect(),
        coarse: indices.iter().map(|&i| data.samples[i].coarse as usize).collect(),
    }
}

fn diverged(epoch: usize, step: usize, batch: &[usize], model: &Model, err: &Error) -> Error {
    let worst = model
        .params
        .params()
        .iter()
        .map(|p| {
            let m = p.value.data().iter().fold(0f64, |m, v| m.max(v.abs()));
            (p.name.as_str(), m)
        })
        .fold(("", 0f64), |acc, x| if !(x.1 <= acc.1) { x } else { acc });
    Error::Diverged {
        epoch,
        step,
        dump: format!(
            "{err}; batch indices {batch:?}; largest |param| {} = {}",
            worst.0, worst.1
        ),
    }
}

/// Trains on `splits.train`, evaluating on `splits.val` (source) and
/// `splits.test` (target). `on_epoch` sees each metrics line as soon as it
/// is complete.
pub fn train(
    run: &RunConfig,
    encoder: &EncoderConfig,
    splits: &Splits,
    mut on_epoch: impl FnMut(&EpochMetrics) -> Result<()>,
) -> Result<TrainOutcome> {
    run.validate()?;
    if splits.train.is_empty() {
        return Err(Error::EmptySplit);
    }
    let mut model = Model::new(encoder.clone(), run.seed)?;
    let mut adam = AdamState::new(model.params.params());
    let mut hallucinator = StyleHallucinator::new(NUM_STAGES, run.slope_window);
    let mut style_rng = stream_rng(run.seed, Stream::Style, 0);
    let mut metrics = Vec::with_capacity(run.epochs);
    let mut initial_loss = f64::NAN;
    let mut order: Vec<usize> = (0..splits.train.len()).collect();
    for epoch in 0..run.epochs {
        order.shuffle(&mut stream_rng(run.seed, Stream::Shuffle, epoch as u64));
        let mut acc = Running::new();
        for (step, batch) in order.chunks(run.batch_size).enumerate() {
            let labels = labels_of(&splits.train, batch);
            let tape = Tape::new();
            let outcome = (|| -> Result<()> {
                let p = model.params.bind(&tape, true);
                let images = tape.constant(splits.train.batch_images(batch));
                let mut styles = StyleSource::Sample {
                    hallucinator: &mut hallucinator,
                    rng: &mut style_rng,
                };
                let terms = objective(&model, &p, images, &labels, run, &mut styles)?;
                let total = terms.total.item();
                if !total.is_finite() {
                    return Err(Error::NonFinite("objective"));
                }
                if acc.steps == 0 && epoch == 0 {
                    initial_loss = total;
                }
                acc.steps += 1;
                acc.total += total;
                acc.cls += terms.cls.item();
                acc.cls_tilde += terms.cls_tilde.map_or(0.0, |v| v.item());
                acc.hmc += terms.hmc.map_or(0.0, |v| v.item());
                terms.records.iter().for_each(|r| acc.record(r));
                let mut grads = tape.backward(terms.total)?;
                model.params.absorb(&p, &mut grads);
                adam_step(model.params.params_mut(), &mut adam, run.lr, run.beta1, run.beta2)?;
                if model.params.params().iter().any(|p| !p.value.is_finite()) {
                    return Err(Error::NonFinite("adam_step"));
                }
                Ok(())
            })();
            if let Err(e) = outcome {
                return Err(match e {
                    Error::NonFinite(_) => diverged(epoch, step, batch, &model, &e),
                    e => e,
                });
            }
        }
        let evaluate_now = (epoch + 1) % run.eval_every == 0 || epoch + 1 == run.epochs;
        let accuracy = |d: &Dataset| -> Result<Option<f64>> {
            if evaluate_now && !d.is_empty() {
                evaluate(&model, d).map(Some)
            } else {
                Ok(None)
            }
        };
        let n = acc.steps as f64;
        let m = EpochMetrics {
            epoch,
            steps: acc.steps,
            train_loss: acc.total / n,
            cls: acc.cls / n,
            cls_tilde: run.enable_ssh.then_some(acc.cls_tilde / n),
            hmc: run.enable_hmc.then_some(acc.hmc / n),
            val_acc: accuracy(&splits.val)?,
            target_acc: accuracy(&splits.test)?,
            slopes: acc
                .slopes
                .iter()
                .enumerate()
                .filter_map(|(i, s)| {
                    s.map(|[a, b, c, d]| StageSlopes {
                        stage: i + 1,
                        gamma_min: a,
                        gamma_max: b,
                        hallucinated_min: c,
                        hallucinated_max: d,
                    })
                })
                .collect(),
        };
        on_epoch(&m)?;
        metrics.push(m);
    }
    Ok(TrainOutcome {
        model,
        metrics,
        initial_loss,
    })
}

/// Renders metrics as JSON lines.
pub fn metrics_jsonl(metrics: &[EpochMetrics]) -> String {
    metrics
        .iter()
        .map(|m| serde_json::to_string(m).expect("metrics serialize") + "\n")
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::data::{generate_dataset, SyntheticConfig};

    fn tiny_encoder() -> EncoderConfig {
        EncoderConfig {
            image_size: 16,
            patch_size: 2,
            stage_channels: [4, 8, 16, 32],
            state_dim: 2,
            ..EncoderConfig::default()
        }
    }

    fn tiny_splits() -> Splits {
        generate_dataset(&SyntheticConfig {
            image_size: 16,
            train_per_class: 2,
            test_per_class: 1,
            ..SyntheticConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn initial_loss_is_two_uniform_cross_entropies() {
        let run = RunConfig {
            epochs: 1,
            batch_size: 8,
            enable_hmc: false,
            ..RunConfig::default()
        };
        let out = train(&run, &tiny_encoder(), &tiny_splits(), |_| Ok(())).unwrap();
        assert!((out.initial_loss - 2.0 * 8f64.ln()).abs() < 0.2, "{}", out.initial_loss);
    }

    #[test]
    fn toggles_remove_terms() {
        let run = RunConfig {
            epochs: 1,
            batch_size: 8,
            eval_every: 5,
            ..RunConfig::default()
        }
        .backbone();
        let out = train(&run, &tiny_encoder(), &tiny_splits(), |_| Ok(())).unwrap();
        let m = &out.metrics[0];
        assert_eq!(m.cls_tilde, None);
        assert_eq!(m.hmc, None);
        assert!(m.slopes.is_empty());
        assert_eq!(m.train_loss, m.cls);
        assert!(m.val_acc.is_some(), "last epoch is always evaluated");
    }
}
