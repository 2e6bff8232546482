//! Reverse-mode gradients against central differences computed here.

use hssh::harness::train::Model;
use hssh::harness::verify::{end_to_end_gradient_each, probe_encoder};
use hssh::harness::RunConfig;
use hssh::losses::{hmc_loss, BatchLabels, HyperbolicEmbeddingSet};
use hssh::poincare::{exp_map_0, Curvature};
use hssh::tensor::{BoundParams, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

/// Relative error between an analytic gradient and central differences of
/// `f` around `x`.
fn compare(analytic: &[f64], x: &Tensor, f: impl Fn(&Tensor) -> f64) -> f64 {
    let h = 1e-5;
    let mut probe = x.clone();
    let numeric: Vec<f64> = (0..x.len())
        .map(|i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + h;
            let up = f(&probe);
            probe.data_mut()[i] = orig - h;
            let down = f(&probe);
            probe.data_mut()[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect();
    let diff: f64 = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let scale = numeric.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-8);
    diff / scale
}

#[test]
fn encoder_output_sum_wrt_pixels() {
    let model = Model::new(probe_encoder(), 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let images = random(&mut rng, &[2, 3, 8, 8], 1.0).map(|v| 0.5 + 0.5 * v);
    let f = |x: &Tensor| {
        let tape = Tape::new();
        let p = model.params.bind(&tape, false);
        let out = model.encoder.encode(&p, tape.constant(x.clone())).unwrap();
        out[3].f.sum_all().unwrap().item()
    };
    let tape = Tape::new();
    let p = model.params.bind(&tape, false);
    let x = tape.leaf(images.clone(), true);
    let out = model.encoder.encode(&p, x).unwrap();
    let grads = tape.backward(out[3].f.sum_all().unwrap()).unwrap();
    let err = compare(grads.get(x).unwrap().data(), &images, f);
    assert!(err < 1e-3, "{err}");
}

/// Weighted logit sum with the head weight replaced by `w`.
fn head_objective<'t>(model: &Model, tape: &'t Tape, images: &Tensor, w: Var<'t>) -> Var<'t> {
    let (wid, _) = model.encoder.head();
    let mut vars = model.params.bind(tape, false).vars().to_vec();
    vars[wid.index()] = w;
    let p = BoundParams::from_vars(vars);
    let clean = model.encoder.encode(&p, tape.constant(images.clone())).unwrap();
    let logits = model.encoder.classify(&p, clean[3]).unwrap();
    let k = tape.constant(Tensor::new(&[1, 8], (0..8).map(|i| 1.0 + 0.1 * i as f64).collect()).unwrap());
    logits.mul(k).unwrap().sum_all().unwrap()
}

#[test]
fn logits_wrt_head_weight() {
    let model = Model::new(probe_encoder(), 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let images = random(&mut rng, &[2, 3, 8, 8], 1.0);
    let (wid, _) = model.encoder.head();
    let w0 = random(&mut rng, model.params.get(wid).value.shape(), 0.5);
    let tape = Tape::new();
    let w = tape.leaf(w0.clone(), true);
    let g = tape.backward(head_objective(&model, &tape, &images, w)).unwrap();
    let err = compare(g.get(w).unwrap().data(), &w0, |x| {
        let tape = Tape::new();
        let v = head_objective(&model, &tape, &images, tape.constant(x.clone())).item();
        v
    });
    assert!(err < 1e-4, "{err}");
}

fn hmc_of<'t>(tape: &'t Tape, x: Var<'t>, tilde: &Tensor, labels: &BatchLabels, c: Curvature) -> Var<'t> {
    let z = exp_map_0(x, c).unwrap();
    let zt = exp_map_0(tape.constant(tilde.clone()), c).unwrap();
    let emb = HyperbolicEmbeddingSet {
        z: vec![z; 4],
        z_tilde: vec![zt; 4],
        stages: vec![1, 2, 3, 4],
    };
    hmc_loss(&emb, labels, c).unwrap()
}

#[test]
fn hmc_wrt_pooled_features() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let c = Curvature::new(0.1).unwrap();
    let feats = random(&mut rng, &[4, 5], 1.5);
    let tilde = random(&mut rng, &[4, 5], 1.5);
    let labels = BatchLabels {
        fine: vec![0, 1, 2, 3],
        coarse: vec![0, 0, 1, 0],
    };
    let tape = Tape::new();
    let x = tape.leaf(feats.clone(), true);
    let g = tape.backward(hmc_of(&tape, x, &tilde, &labels, c)).unwrap();
    let err = compare(g.get(x).unwrap().data(), &feats, |f| {
        let tape = Tape::new();
        let v = hmc_of(&tape, tape.constant(f.clone()), &tilde, &labels, c).item();
        v
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn full_objective_under_every_toggle() {
    let base = RunConfig::default();
    let variants = [
        base.clone(),
        RunConfig {
            enable_hmc: false,
            ..base.clone()
        },
        base.clone().backbone(),
        RunConfig {
            stages_hallucinated: vec![1],
            ..base.clone()
        },
        RunConfig {
            stages_hallucinated: vec![2, 4],
            ..base
        },
    ];
    for run in &variants {
        for (name, err) in end_to_end_gradient_each(1, run).unwrap() {
            assert!(err < 1e-3, "{name} under {run:?}: {err}");
        }
    }
}
