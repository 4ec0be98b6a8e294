use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::sh::{zonal_convolve, ShCube, ShVector, ZonalKernel};

fn random_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn random_bank(rng: &mut impl Rng, dims: usize, j: usize, n_max: usize) -> CompositeFilterBank {
    let mut bank = CompositeFilterBank::zeros(dims, j, n_max);
    bank.weights = random_vec(rng, bank.weights.len());
    bank
}

/// Direct summation straight from the definition, with explicit loops over
/// every spatial coordinate and tap.
fn naive_conv3(input: &SpatialArray, bank: &CompositeFilterBank, bias: &[f64]) -> Vec<f64> {
    let (m, p, j) = (input.side as i64, input.channels, bank.filter_size as i64);
    let c = j / 2;
    let at = |x: i64, y: i64, z: i64, ch: usize| ((x * m + y) * m + z) as usize * p + ch;
    let mut out = vec![0.0; input.data.len()];
    for x in 0..m {
        for y in 0..m {
            for z in 0..m {
                for ch in 0..p {
                    out[at(x, y, z, ch)] = bias[ch];
                }
                for n in (0..=bank.n_max).step_by(2) {
                    let ni = n as i64;
                    for l in -ni..=ni {
                        for k in -ni..=ni {
                            let w = bank.filter(n, l, k);
                            for tx in 0..j {
                                for ty in 0..j {
                                    for tz in 0..j {
                                        let (ix, iy, iz) = (x + c - tx, y + c - ty, z + c - tz);
                                        if ix < 0 || iy < 0 || iz < 0 || ix >= m || iy >= m || iz >= m {
                                            continue;
                                        }
                                        let tap = ((tx * j + ty) * j + tz) as usize;
                                        out[at(x, y, z, crate::sh::coeff_index(n, l))] +=
                                            w[tap] * input.data[at(ix, iy, iz, crate::sh::coeff_index(n, k))];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[test]
fn composite_conv_matches_direct_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for (m, j, n_max) in [(3, 3, 6), (5, 3, 2), (3, 5, 4), (4, 1, 2)] {
        let p = crate::sh::num_coeffs(n_max).unwrap();
        let input = SpatialArray::new(3, m, p, random_vec(&mut rng, m * m * m * p)).unwrap();
        let bank = random_bank(&mut rng, 3, j, n_max);
        let bias = random_vec(&mut rng, p);
        let fast = composite_conv(&input, &bank, &BiasVector(bias.clone())).unwrap();
        let slow = naive_conv3(&input, &bank, &bias);
        let err = fast.data.iter().zip(&slow).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-12, "M={m} J={j} n_max={n_max}: {err}");
    }
}

#[test]
fn zonal_convolution_is_a_special_case() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let xi = [0.7, -1.3, 0.4, 2.2];
    let mut bank = CompositeFilterBank::zeros(3, 3, 6);
    for n in (0..=6).step_by(2) {
        for l in -(n as i64)..=n as i64 {
            bank.filter_mut(n, l, l)[13] = xi[n / 2];
        }
    }
    let input = SpatialArray::new(3, 3, 28, random_vec(&mut rng, 27 * 28)).unwrap();
    let out = composite_conv(&input, &bank, &BiasVector(vec![0.0; 28])).unwrap();
    let kernel = ZonalKernel::new(xi.to_vec()).unwrap();
    for v in 0..27 {
        let c = ShVector::new(input.data[v * 28..(v + 1) * 28].to_vec(), 6).unwrap();
        let z = zonal_convolve(&c, &kernel).unwrap();
        for ch in 0..28 {
            assert!((out.data[v * 28 + ch] - z.coeffs[ch]).abs() < 1e-12);
        }
    }
}

#[test]
fn composite_conv_is_band_diagonal_and_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let bank = random_bank(&mut rng, 3, 3, 4);
    let bias = BiasVector(random_vec(&mut rng, 15));
    let zero_bias = BiasVector(vec![0.0; 15]);
    let mut input = SpatialArray::new(3, 3, 15, random_vec(&mut rng, 27 * 15)).unwrap();
    // Zero band 2 (channels 1..6) of the input.
    for v in 0..27 {
        for ch in 1..6 {
            input.data[v * 15 + ch] = 0.0;
        }
    }
    let out = composite_conv(&input, &bank, &zero_bias).unwrap();
    for v in 0..27 {
        for ch in 1..6 {
            assert_eq!(out.data[v * 15 + ch], 0.0);
        }
    }

    let c1 = SpatialArray::new(3, 3, 15, random_vec(&mut rng, 27 * 15)).unwrap();
    let c2 = SpatialArray::new(3, 3, 15, random_vec(&mut rng, 27 * 15)).unwrap();
    let a = 1.7;
    let combo = SpatialArray::new(3, 3, 15, c1.data.iter().zip(&c2.data).map(|(x, y)| a * x + y).collect()).unwrap();
    let f = |c: &SpatialArray| composite_conv(c, &bank, &bias).unwrap().data;
    let (fc, f1, f2) = (f(&combo), f(&c1), f(&c2));
    for i in 0..fc.len() {
        let ch = i % 15;
        let lhs = fc[i] - bias.0[ch];
        let rhs = a * (f1[i] - bias.0[ch]) + (f2[i] - bias.0[ch]);
        assert!((lhs - rhs).abs() < 1e-12);
    }
}

fn random_cube(rng: &mut impl Rng, n_max: usize) -> ShCube {
    let p = crate::sh::num_coeffs(n_max).unwrap();
    ShCube::new(1, n_max, random_vec(rng, 27 * p)).unwrap()
}

#[test]
fn zero_parameters_give_one_half() {
    let params = NetworkParams::zeros(&NetworkConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (g, _) = forward(&params, &random_cube(&mut rng, 6)).unwrap();
    assert_eq!(g, 0.5);
}

#[test]
fn forward_rejects_wrong_shape_and_stays_in_unit_interval() {
    let params = init_params(&NetworkConfig::default(), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    assert!(forward(&params, &random_cube(&mut rng, 4)).is_err());
    for _ in 0..20 {
        let g = predict(&params, &random_cube(&mut rng, 6)).unwrap();
        assert!(g > 0.0 && g < 1.0);
    }
}

#[test]
fn forward_is_reproducible() {
    let cfg = NetworkConfig::default();
    let params = init_params(&cfg, 42).unwrap();
    let cube = random_cube(&mut ChaCha8Rng::seed_from_u64(5), 6);
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        forward_with_dropout(&params, &cube, 0.7, &mut rng).unwrap().0
    };
    assert_eq!(run().to_bits(), run().to_bits());
    // keep = 1 is exactly the inference pass.
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let with = forward_with_dropout(&params, &cube, 1.0, &mut rng).unwrap().0;
    assert_eq!(with.to_bits(), predict(&params, &cube).unwrap().to_bits());
}

fn loss_of(params: &NetworkParams, cube: &ShCube, target: f64, mask_seed: Option<u64>) -> f64 {
    let cache = match mask_seed {
        Some(s) => forward_with_dropout(params, cube, 0.7, &mut ChaCha8Rng::seed_from_u64(s)).unwrap().1,
        None => forward(params, cube).unwrap().1,
    };
    let [a, b] = cache.logits;
    let m = a.max(b);
    let lse = m + ((a - m).exp() + (b - m).exp()).ln();
    -(target * (a - lse) + (1.0 - target) * (b - lse))
}

/// Central differences for every parameter at a generic point near the He
/// initialisation; returns the worst relative error.
fn gradient_check(cfg: &NetworkConfig, seed: u64, mask_seed: Option<u64>) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = init_params(cfg, seed).unwrap();
    // Zero biases put dead channels exactly on the ReLU kink; move off it.
    for v in params.values_mut() {
        *v += rng.random_range(-0.05..0.05);
    }
    let cube = random_cube(&mut rng, cfg.n_max);
    let target = (seed % 2) as f64;
    let cache = match mask_seed {
        Some(s) => forward_with_dropout(&params, &cube, 0.7, &mut ChaCha8Rng::seed_from_u64(s)).unwrap().1,
        None => forward(&params, &cube).unwrap().1,
    };
    let analytic = backward(&params, &cache, target).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..params.len() {
        let orig = params.values()[i];
        params.values_mut()[i] = orig + h;
        let up = loss_of(&params, &cube, target, mask_seed);
        params.values_mut()[i] = orig - h;
        let down = loss_of(&params, &cube, target, mask_seed);
        params.values_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic.values[i];
        let scale = a.abs().max(numeric.abs());
        let rel = if scale < 1e-7 { (a - numeric).abs() / 1e-7 } else { (a - numeric).abs() / scale };
        worst = worst.max(rel);
    }
    worst
}

#[test]
fn gradients_match_finite_differences() {
    for wiring in [Layer2Wiring::SharedConv, Layer2Wiring::PerDirectionConv] {
        let cfg = NetworkConfig {
            wiring,
            ..NetworkConfig::with_degree(2)
        };
        for seed in 0..10 {
            let worst = gradient_check(&cfg, seed, None);
            assert!(worst < 1e-4, "{wiring:?} seed {seed}: {worst}");
        }
        let worst = gradient_check(&cfg, 9, Some(123));
        assert!(worst < 1e-4, "{wiring:?} with dropout: {worst}");
    }
}

#[test]
fn gradient_vanishes_at_exact_target() {
    // All-zero parameters except the head bias give γ = target exactly only
    // in the limit; use the fused formula directly instead.
    let params = NetworkParams::zeros(&NetworkConfig::with_degree(2)).unwrap();
    let cube = random_cube(&mut ChaCha8Rng::seed_from_u64(2), 2);
    let (g, cache) = forward(&params, &cube).unwrap();
    assert_eq!(g, 0.5);
    let grad = backward(&params, &cache, 0.5).unwrap();
    assert!(grad.values.iter().all(|&v| v == 0.0));
}

#[test]
fn dead_branch_has_zero_gradient() {
    let cfg = NetworkConfig::with_degree(2);
    let mut params = init_params(&cfg, 5).unwrap();
    // Kill the x-branch pair fusion: large negative bias, zero weights.
    let layout = params.layout().clone();
    let w = layout.block("fuse.x.w").unwrap().range();
    let b = layout.block("fuse.x.b").unwrap().range();
    let vals = params.values_mut();
    vals[w].iter_mut().for_each(|v| *v = 0.0);
    vals[b].iter_mut().for_each(|v| *v = -10.0);
    let cube = random_cube(&mut ChaCha8Rng::seed_from_u64(3), 2);
    let (_, cache) = forward(&params, &cube).unwrap();
    let grad = backward(&params, &cache, 1.0).unwrap();
    for name in ["l1.x.w", "l1.x.b", "l2.x.w", "l3.x.0.w", "l3.x.1.b", "fuse.x.w", "fuse.x.b"] {
        let r = layout.block(name).unwrap().range();
        assert!(grad.values[r].iter().all(|&v| v == 0.0), "{name}");
    }
}

#[test]
fn stale_cache_is_rejected() {
    let cfg = NetworkConfig::with_degree(2);
    let mut params = init_params(&cfg, 1).unwrap();
    let cube = random_cube(&mut ChaCha8Rng::seed_from_u64(1), 2);
    let (_, cache) = forward(&params, &cube).unwrap();
    params.values_mut()[0] += 1.0;
    assert!(matches!(backward(&params, &cache, 1.0), Err(crate::Error::StaleCache { .. })));
}

#[test]
fn parameter_accounting() {
    let single_bank = CompositeFilterBank::weight_len(3, 3, 6);
    let oracle: usize = (0..=6).step_by(2).map(|n| (2 * n + 1) * (2 * n + 1) * 27).sum();
    assert_eq!(single_bank, oracle);
    assert_eq!(single_bank + 28, 7480);
    assert_eq!(CompositeFilterBank::weight_len(3, 1, 0) + 1, 2);

    let shared = param_count(&NetworkConfig::default()).unwrap();
    assert_eq!(shared.total, 42_338);
    assert_eq!(
        shared.per_layer,
        vec![
            ("layer1", 22_440),
            ("layer2", 7_536),
            ("layer3", 5_136),
            ("fusion", 4_788),
            ("merge", 2_380),
            ("head", 58)
        ]
    );
    let per_dir = param_count(&NetworkConfig {
        wiring: Layer2Wiring::PerDirectionConv,
        ..NetworkConfig::default()
    })
    .unwrap();
    assert_eq!(per_dir.total, 49_874);
    assert_eq!(param_count(&NetworkConfig::default()).unwrap(), shared);
}

#[test]
fn init_is_seeded_with_he_variance() {
    let cfg = NetworkConfig::default();
    let a = init_params(&cfg, 1).unwrap();
    let b = init_params(&cfg, 1).unwrap();
    let c = init_params(&cfg, 2).unwrap();
    assert_eq!(a.values(), b.values());
    assert_ne!(a.values(), c.values());
    assert!(a.block_values("l1.x.b").unwrap().iter().all(|&v| v == 0.0));

    // Band-6 part of a 3-D bank: 13·13·27 = 4563 weights with fan-in 13·27;
    // pool the three layer-1 banks for > 10⁴ samples.
    let mut samples = Vec::new();
    for name in ["l1.x.w", "l1.y.w", "l1.z.w"] {
        let w = a.block_values(name).unwrap();
        samples.extend_from_slice(&w[w.len() - 4563..]);
    }
    assert!(samples.len() >= 10_000);
    let var = samples.iter().map(|v| v * v).sum::<f64>() / samples.len() as f64;
    let want = 2.0 / (13.0 * 27.0);
    assert!((var / want - 1.0).abs() < 0.1, "variance {var}, expected {want}");
}
