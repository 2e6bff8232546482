use rayon::prelude::*;

use super::data::Dataset;
use super::train::Model;
use crate::error::{Error, Result};
use crate::tensor::Tape;

const EVAL_CHUNK: usize = 64;

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

/// Clean-path predicted class per sample, in dataset order.
pub fn predict(model: &Model, data: &Dataset) -> Result<Vec<usize>> {
    if data.is_empty() {
        return Err(Error::EmptySplit);
    }
    let indices: Vec<usize> = (0..data.len()).collect();
    let chunks: Vec<Vec<usize>> = indices
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| {
            let tape = Tape::new();
            let p = model.params.bind(&tape, false);
            let logits = model.logits(&p, tape.constant(data.batch_images(chunk)))?;
            let value = logits.value();
            let k = value.shape()[1];
            Ok(value.data().chunks(k).map(argmax).collect())
        })
        .collect::<Result<_>>()?;
    Ok(chunks.concat())
}

/// Top-1 accuracy on `data`, without hallucination.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<f64> {
    let pred = predict(model, data)?;
    let hits = pred
        .iter()
        .zip(&data.samples)
        .filter(|(&p, s)| p == s.fine as usize)
        .count();
    Ok(hits as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[0.0; 4]), 0);
    }

    #[test]
    fn empty_split_is_an_error() {
        let model = Model::new(Default::default(), 0).unwrap();
        assert!(matches!(evaluate(&model, &Dataset::default()), Err(Error::EmptySplit)));
    }
}
