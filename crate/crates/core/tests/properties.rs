use hssh::losses::{hmc_loss, BatchLabels, HyperbolicEmbeddingSet};
use hssh::poincare::{distance, exp_map_0, mobius_add, project_to_ball, Curvature};
use hssh::ssm::StateEmbedding;
use hssh::style::{compute_style, fit_slope_values, hallucinate, restyle_on_line, SIGMA_FLOOR};
use hssh::tensor::{Tape, Tensor};
use proptest::prelude::*;

/// Scalar Möbius addition on plain slices.
fn mobius(x: &[f64], y: &[f64], c: f64) -> Vec<f64> {
    let xy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let x2: f64 = x.iter().map(|a| a * a).sum();
    let y2: f64 = y.iter().map(|a| a * a).sum();
    let den = 1.0 + 2.0 * c * xy + c * c * x2 * y2;
    x.iter()
        .zip(y)
        .map(|(a, b)| ((1.0 + 2.0 * c * xy + c * y2) * a + (1.0 - c * x2) * b) / den)
        .collect()
}

fn oracle_distance(x: &[f64], y: &[f64], c: f64) -> f64 {
    let neg: Vec<f64> = x.iter().map(|v| -v).collect();
    let m = mobius(&neg, y, c);
    let n = m.iter().map(|v| v * v).sum::<f64>().sqrt();
    2.0 / c.sqrt() * (c.sqrt() * n).atanh()
}

/// A point strictly inside the ball from an unconstrained direction and a
/// radius fraction.
fn inside(dir: &[f64], frac: f64, c: f64) -> Vec<f64> {
    let n = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-9);
    dir.iter().map(|v| v / n * frac / c.sqrt()).collect()
}

fn dist(x: &[f64], y: &[f64], c: f64) -> f64 {
    let tape = Tape::new();
    let k = Curvature::new(c).unwrap();
    let t = |v: &[f64]| tape.constant(Tensor::new(&[1, v.len()], v.to_vec()).unwrap());
    distance(t(x), t(y), k).unwrap().item()
}

fn point() -> impl Strategy<Value = (Vec<f64>, f64)> {
    (prop::collection::vec(-1.0f64..1.0, 3), 0.0f64..0.85)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn distance_is_a_metric(
        (a, ra) in point(), (b, rb) in point(), (e, re) in point(),
        c in prop::sample::select(vec![0.01, 0.1, 1.0]),
    ) {
        let (x, y, z) = (inside(&a, ra, c), inside(&b, rb, c), inside(&e, re, c));
        let dxy = dist(&x, &y, c);
        prop_assert!(dist(&x, &x, c).abs() <= 1e-12);
        prop_assert!((dxy - dist(&y, &x, c)).abs() <= 1e-9);
        prop_assert!(dxy <= dist(&x, &z, c) + dist(&z, &y, c) + 1e-9);
        let oracle = oracle_distance(&x, &y, c);
        prop_assert!((dxy - oracle).abs() <= 1e-9 * oracle.max(1.0), "{} vs {}", dxy, oracle);
    }

    #[test]
    fn mobius_matches_scalar_oracle((a, ra) in point(), (b, rb) in point()) {
        let c = 0.1;
        let (x, y) = (inside(&a, ra, c), inside(&b, rb, c));
        let tape = Tape::new();
        let t = |v: &[f64]| tape.constant(Tensor::new(&[1, 3], v.to_vec()).unwrap());
        let got = mobius_add(t(&x), t(&y), Curvature::new(c).unwrap()).unwrap();
        let got = got.value().data().to_vec();
        for (g, w) in got.iter().zip(mobius(&x, &y, c)) {
            prop_assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn exp_map_lands_inside(v in prop::collection::vec(-50.0f64..50.0, 5)) {
        let c = Curvature::new(0.1).unwrap();
        let tape = Tape::new();
        let z = project_to_ball(exp_map_0(tape.constant(Tensor::new(&[1, 5], v).unwrap()), c).unwrap(), c).unwrap();
        let n2: f64 = z.value().data().iter().map(|x| x * x).sum();
        prop_assert!(0.1 * n2 < 1.0);
    }

    #[test]
    fn broadcast_add_equals_explicit_tile(
        m in prop::collection::vec(-5.0f64..5.0, 12),
        row in prop::collection::vec(-5.0f64..5.0, 4),
    ) {
        let tape = Tape::new();
        let a = tape.constant(Tensor::new(&[3, 4], m.clone()).unwrap());
        let b = tape.constant(Tensor::new(&[4], row.clone()).unwrap());
        let tiled: Vec<f64> = (0..12).map(|i| m[i] + row[i % 4]).collect();
        let sum = a.add(b).unwrap().value().data().to_vec();
        prop_assert_eq!(sum, tiled);
        let col = tape.constant(Tensor::new(&[3, 1], row[..3].to_vec()).unwrap());
        let tiled: Vec<f64> = (0..12).map(|i| m[i] * row[i / 4]).collect();
        let prod = a.mul(col).unwrap().value().data().to_vec();
        prop_assert_eq!(prod, tiled);
    }

    #[test]
    fn hmc_is_permutation_invariant(
        pts in prop::collection::vec((prop::collection::vec(-1.0f64..1.0, 3), 0.0f64..0.8), 10),
        coarse in prop::collection::vec(0usize..3, 5),
        perm in Just((0..5).collect::<Vec<usize>>()).prop_shuffle(),
    ) {
        let c = 0.1;
        let flat = |rows: &[usize], offset: usize| -> Vec<f64> {
            rows.iter().flat_map(|&r| inside(&pts[r + offset].0, pts[r + offset].1, c)).collect()
        };
        let value = |order: &[usize]| -> f64 {
            let tape = Tape::new();
            let z = tape.constant(Tensor::new(&[5, 3], flat(order, 0)).unwrap());
            let zt = tape.constant(Tensor::new(&[5, 3], flat(order, 5)).unwrap());
            let emb = HyperbolicEmbeddingSet { z: vec![z; 4], z_tilde: vec![zt; 4], stages: vec![1, 2, 3, 4] };
            let labels = BatchLabels {
                fine: order.to_vec(),
                coarse: order.iter().map(|&i| coarse[i]).collect(),
            };
            hmc_loss(&emb, &labels, Curvature::new(c).unwrap()).unwrap().item()
        };
        let id: Vec<usize> = (0..5).collect();
        let (a, b) = (value(&id), value(&perm));
        prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
        prop_assert!(a >= 0.0);
    }

    #[test]
    fn style_invariants(
        data in prop::collection::vec(-3.0f64..3.0, 2 * 3 * 16),
        gamma in -2.0f64..2.0,
    ) {
        let tape = Tape::new();
        let f = StateEmbedding { f: tape.constant(Tensor::new(&[2, 3, 4, 4], data).unwrap()), stage: 1 };
        let stats = compute_style(f).unwrap();
        let (mu, sigma) = stats.values();
        prop_assert!(sigma.data().iter().all(|&s| s >= 0.0));
        let target = restyle_on_line(&stats, gamma).unwrap();
        let (tmu, tsigma) = target.values();
        prop_assert_eq!(tmu.data(), mu.data());
        prop_assert!(tsigma.data().iter().all(|&s| s >= SIGMA_FLOOR));
        if tsigma.data().iter().all(|&s| s > SIGMA_FLOOR) {
            let slope = fit_slope_values(tmu.data(), tsigma.data());
            if let Ok(g) = slope {
                prop_assert!((g - gamma).abs() < 1e-6, "{} vs {}", g, gamma);
            }
        }
        let out = hallucinate(f, &stats, &target).unwrap();
        let (rmu, rsigma) = compute_style(out).unwrap().values();
        let floor_hit = sigma.data().iter().any(|&s| s < SIGMA_FLOOR);
        prop_assert!(rmu.max_abs_diff(&tmu) < 1e-9);
        if !floor_hit {
            for (r, t) in rsigma.data().iter().zip(tsigma.data()) {
                prop_assert!((r - t).abs() < 1e-6 * t.max(1.0));
            }
        }
    }
}
