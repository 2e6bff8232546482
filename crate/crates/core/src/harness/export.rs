//! Style-cloud export for scatter plots of (μ, σ) per stage.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::data::Dataset;
use super::train::Model;
use super::{stream_rng, Stream};
use crate::error::{Error, Result};
use crate::ssm::{StateEmbedding, NUM_STAGES};
use crate::style::{compute_style, StyleHallucinator, StyleRecord};
use crate::tensor::{BoundParams, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StyleKind {
    Original,
    Hallucinated,
}

/// One CSV row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleRow {
    pub stage: usize,
    pub batch: usize,
    pub sample: usize,
    pub channel: usize,
    pub mu: f64,
    pub sigma: f64,
    pub kind: StyleKind,
}

fn push_rows(rows: &mut Vec<StyleRow>, stage: usize, batch: usize, kind: StyleKind, (mu, sigma): &(Tensor, Tensor)) {
    let c = mu.shape()[1];
    for (i, (&m, &s)) in mu.data().iter().zip(sigma.data()).enumerate() {
        rows.push(StyleRow {
            stage,
            batch,
            sample: i / c,
            channel: i % c,
            mu: m,
            sigma: s,
            kind,
        });
    }
}

/// Runs the hallucinated branch of one batch, returning its style records.
fn branch_records<'t>(
    model: &Model,
    p: &BoundParams<'t>,
    clean: &[StateEmbedding<'t>],
    stages: &[usize],
    hallucinator: &mut StyleHallucinator,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<StyleRecord>> {
    let mut records = Vec::new();
    let mut hook = |f: StateEmbedding<'t>| {
        if stages.contains(&f.stage) {
            let (out, record) = hallucinator.apply(f, rng)?;
            records.push(record);
            Ok(out)
        } else {
            Ok(f)
        }
    };
    let start = hook(clean[stages[0] - 1])?;
    model.encoder.resume(p, start, &mut hook)?;
    Ok(records)
}

/// Original and (when SSH is enabled) hallucinated style clouds for the
/// first `batches` batches of `data`, taken in dataset order.
///
/// The slope windows are first filled with every exported batch, so each
/// batch samples from the range spanned by the whole export.
pub fn style_export(model: &Model, data: &Dataset, run: &RunConfig, batches: usize) -> Result<Vec<StyleRow>> {
    run.validate()?;
    if data.is_empty() {
        return Err(Error::EmptySplit);
    }
    let indices: Vec<usize> = (0..data.len()).collect();
    let chunks: Vec<&[usize]> = indices.chunks(run.batch_size).take(batches.max(1)).collect();
    let stages = run.stage_set();
    let mut hallucinator = StyleHallucinator::new(NUM_STAGES, run.slope_window.max(chunks.len()));
    let mut rng = stream_rng(run.seed, Stream::Style, 1);
    let mut rows = Vec::new();
    let passes = if run.enable_ssh { [false, true].as_slice() } else { [true].as_slice() };
    for &emit in passes {
        for (b, chunk) in chunks.iter().enumerate() {
            let tape = Tape::new();
            let p = model.params.bind(&tape, false);
            let clean = model.encoder.encode(&p, tape.constant(data.batch_images(chunk)))?;
            let records = if run.enable_ssh {
                branch_records(model, &p, &clean, &stages, &mut hallucinator, &mut rng)?
            } else {
                Vec::new()
            };
            if !emit {
                continue;
            }
            for f in &clean {
                push_rows(&mut rows, f.stage, b, StyleKind::Original, &compute_style(*f)?.values());
            }
            for r in &records {
                push_rows(&mut rows, r.stage, b, StyleKind::Hallucinated, &r.hallucinated);
            }
        }
    }
    Ok(rows)
}

pub fn write_style_csv(rows: &[StyleRow], path: &Path) -> Result<()> {
    let to_err = |e: csv::Error| Error::format(path, e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(to_err)?;
    for r in rows {
        w.serialize(r).map_err(to_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_style_csv(path: &Path) -> Result<Vec<StyleRow>> {
    let to_err = |e: csv::Error| Error::format(path, e.to_string());
    csv::Reader::from_path(path)
        .map_err(to_err)?
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(to_err)
}
