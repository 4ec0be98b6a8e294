//! Acceptance criteria 1–10. Runs without the libtest harness so each
//! criterion prints exactly one PASS/FAIL line; exits nonzero on any FAIL.

use std::time::{Duration, Instant};

use psic::classify::median_psic_decision;
use psic::dcnn::{
    backward, composite_conv, forward, init_params, param_count, predict, softmax2, BiasVector, CompositeFilterBank, Layer2Wiring,
    NetworkConfig, NetworkParams, SpatialArray,
};
use psic::dti::{fit_tensor, westin_metrics, TensorFit};
use psic::io::{export_psic, pgm_bytes, Subject};
use psic::phantom::{gen_cohort, make_scheme, PhantomSpec};
use psic::pipeline::{evaluate, train_model, EvalOutput, PipelineConfig};
use psic::sh::{
    coeff_index, eval_sh, fit_sh, num_coeffs, render, zonal_convolve, ShCube, ShVector, ZonalKernel,
};
use psic::training::cross_entropy;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

// ---------------------------------------------------------------- criterion 1

fn random_cube(rng: &mut ChaCha8Rng, n_max: usize) -> ShCube {
    let p = num_coeffs(n_max).unwrap();
    ShCube::new(1, n_max, (0..27 * p).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Cross-entropy evaluated from the logits, `softplus(β−α)` for AD and
/// `softplus(α−β)` for CN. Going through `γ` would lose digits in `1 − γ`
/// when the prediction saturates.
fn loss(params: &NetworkParams, cube: &ShCube, target: f64) -> f64 {
    let [a, b] = forward(params, cube).unwrap().1.logits;
    let softplus = |x: f64| x.max(0.0) + (-x.abs()).exp().ln_1p();
    target * softplus(b - a) + (1.0 - target) * softplus(a - b)
}

/// Worst relative error between the analytic gradient and central
/// differences; denominators below 1e-7 fall back to absolute error.
fn worst_gradient_error(cfg: &NetworkConfig, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = init_params(cfg, seed).unwrap();
    // He init leaves biases at 0, which parks dead units exactly on the kink.
    for v in params.values_mut() {
        *v += rng.random_range(-0.05..0.05);
    }
    let cube = random_cube(&mut rng, cfg.n_max);
    let target = (seed % 2) as f64;
    let (_, cache) = forward(&params, &cube).unwrap();
    let analytic = backward(&params, &cache, target).unwrap();
    let gamma = predict(&params, &cube).unwrap();
    assert_eq!(gamma, softmax2(cache.logits[0], cache.logits[1]));
    assert!((loss(&params, &cube, target) - cross_entropy(gamma, target)).abs() < 1e-9);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..params.len() {
        let orig = params.values()[i];
        params.values_mut()[i] = orig + h;
        let up = loss(&params, &cube, target);
        params.values_mut()[i] = orig - h;
        let down = loss(&params, &cube, target);
        params.values_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic.values[i];
        let denom = a.abs().max(numeric.abs()).max(1e-7);
        worst = worst.max((a - numeric).abs() / denom);
    }
    worst
}

fn criterion_1() -> Outcome {
    let t = Instant::now();
    let mut worst: f64 = 0.0;
    let mut runs = 0;
    for wiring in [Layer2Wiring::SharedConv, Layer2Wiring::PerDirectionConv] {
        let cfg = NetworkConfig {
            wiring,
            ..NetworkConfig::with_degree(2)
        };
        let seeds: Vec<u64> = match wiring {
            Layer2Wiring::SharedConv => (1000..1010).collect(),
            Layer2Wiring::PerDirectionConv => vec![2000, 2001],
        };
        for s in seeds {
            worst = worst.max(worst_gradient_error(&cfg, s));
            runs += 1;
        }
    }
    let elapsed = t.elapsed();
    outcome(
        worst < 1e-4 && elapsed < Duration::from_secs(60),
        format!("{runs} seeds (L=1, n_max=2), worst rel. error {worst:.2e} (< 1e-4), {elapsed:.1?} (< 60 s)"),
    )
}

// ---------------------------------------------------------------- criterion 2

/// Gauss–Legendre nodes/weights by Newton iteration on P_n.
fn gl_nodes(n: usize) -> Vec<(f64, f64)> {
    (0..n)
        .map(|i| {
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (mut p0, mut p1) = (1.0, x);
                for k in 2..=n {
                    let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                    p0 = p1;
                    p1 = p2;
                }
                dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
                let dx = p1 / dp;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            (x, 2.0 / ((1.0 - x * x) * dp * dp))
        })
        .collect()
}

fn criterion_2() -> Outcome {
    let scheme = make_scheme(41, 1000.0, 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst_fit: f64 = 0.0;
    for _ in 0..20 {
        let c = ShVector::new((0..28).map(|_| rng.random_range(-1.0..1.0)).collect(), 6).unwrap();
        let back = fit_sh(&render(&c, &scheme), &scheme, 6, 0.0).unwrap();
        let err: f64 = back.coeffs.iter().zip(&c.coeffs).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        worst_fit = worst_fit.max(err / c.norm());
    }

    let nodes = gl_nodes(32);
    let n_phi = 64;
    let mut worst_zonal: f64 = 0.0;
    for _ in 0..5 {
        let c = ShVector::new((0..28).map(|_| rng.random_range(-1.0..1.0)).collect(), 6).unwrap();
        let xi = ZonalKernel::new((0..4).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let conv = zonal_convolve(&c, &xi).unwrap();
        for _ in 0..10 {
            let u = loop {
                let v: [f64; 3] = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
                let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                if n > 0.1 && n <= 1.0 {
                    break v.map(|x| x / n);
                }
            };
            let mut integral = 0.0;
            for &(t, w) in &nodes {
                let s = (1.0 - t * t).sqrt();
                for j in 0..n_phi {
                    let phi = 2.0 * std::f64::consts::PI * j as f64 / n_phi as f64;
                    let v = [s * phi.cos(), s * phi.sin(), t];
                    let dot = u[0] * v[0] + u[1] * v[1] + u[2] * v[2];
                    integral += w * (2.0 * std::f64::consts::PI / n_phi as f64) * xi.profile(dot) * eval_sh(&c, v);
                }
            }
            let got = eval_sh(&conv, u);
            worst_zonal = worst_zonal.max((got - integral).abs() / integral.abs().max(1.0));
        }
    }
    outcome(
        worst_fit <= 1e-10 && worst_zonal <= 1e-6,
        format!("K=41 refit rel. residual {worst_fit:.1e} (≤ 1e-10); zonal vs quadrature {worst_zonal:.1e} (≤ 1e-6)"),
    )
}

// ---------------------------------------------------------------- criterion 3

/// Direct summation over bands, orders and taps for any dimension.
fn naive_conv(input: &SpatialArray, bank: &CompositeFilterBank, bias: &[f64]) -> Vec<f64> {
    let (d, m, p, j) = (input.dims, input.side as i64, input.channels, bank.filter_size as i64);
    let c = j / 2;
    let sites: Vec<Vec<i64>> = (0..m.pow(d as u32))
        .map(|i| (0..d).rev().map(|a| i / m.pow(a as u32) % m).collect())
        .collect();
    let taps: Vec<Vec<i64>> = (0..j.pow(d as u32))
        .map(|i| (0..d).rev().map(|a| i / j.pow(a as u32) % j).collect())
        .collect();
    let flat = |v: &[i64]| v.iter().fold(0i64, |acc, &x| acc * m + x) as usize;
    let mut out = vec![0.0; input.data.len()];
    for x in &sites {
        let o = flat(x) * p;
        out[o..o + p].copy_from_slice(bias);
        for n in (0..=bank.n_max).step_by(2) {
            let ni = n as i64;
            for l in -ni..=ni {
                for k in -ni..=ni {
                    let w = bank.filter(n, l, k);
                    for (ti, t) in taps.iter().enumerate() {
                        let src: Vec<i64> = x.iter().zip(t).map(|(&xa, &ta)| xa + c - ta).collect();
                        if src.iter().any(|&s| s < 0 || s >= m) {
                            continue;
                        }
                        out[o + coeff_index(n, l)] += w[ti] * input.data[flat(&src) * p + coeff_index(n, k)];
                    }
                }
            }
        }
    }
    out
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut worst: f64 = 0.0;
    for (dims, side, n_max) in [(1, 5, 4), (2, 3, 2), (2, 5, 4), (3, 3, 2), (3, 3, 6), (3, 5, 2)] {
        let p = num_coeffs(n_max).unwrap();
        let input = SpatialArray::new(
            dims,
            side,
            p,
            (0..side.pow(dims as u32) * p).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let mut bank = CompositeFilterBank::zeros(dims, 3, n_max);
        bank.weights.iter_mut().for_each(|w| *w = rng.random_range(-1.0..1.0));
        let bias: Vec<f64> = (0..p).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fast = composite_conv(&input, &bank, &BiasVector(bias.clone())).unwrap();
        for (a, b) in fast.data.iter().zip(naive_conv(&input, &bank, &bias)) {
            worst = worst.max((a - b).abs() / b.abs().max(1.0));
        }
    }

    // Zonal special case: w_{n,l}^k = δ_lk ξ_n h(t) is a spatial convolution
    // with h followed by a zonal spherical convolution with ξ.
    let (side, n_max) = (3usize, 4usize);
    let p = num_coeffs(n_max).unwrap();
    let input = SpatialArray::new(3, side, p, (0..27 * p).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let xi = ZonalKernel::new((0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let h: Vec<f64> = (0..27).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut bank = CompositeFilterBank::zeros(3, 3, n_max);
    for n in (0..=n_max).step_by(2) {
        for l in -(n as i64)..=n as i64 {
            let w = bank.filter_mut(n, l, l);
            for (wt, ht) in w.iter_mut().zip(&h) {
                *wt = xi.coeff(n) * ht;
            }
        }
    }
    let got = composite_conv(&input, &bank, &BiasVector(vec![0.0; p])).unwrap();
    let mut worst_zonal: f64 = 0.0;
    for x in 0..3i64 {
        for y in 0..3i64 {
            for z in 0..3i64 {
                let mut acc = vec![0.0; p];
                for (ti, hv) in h.iter().enumerate() {
                    let t = [ti as i64 / 9, ti as i64 / 3 % 3, ti as i64 % 3];
                    let s = [x + 1 - t[0], y + 1 - t[1], z + 1 - t[2]];
                    if s.iter().any(|&v| !(0..3).contains(&v)) {
                        continue;
                    }
                    let o = ((s[0] * 3 + s[1]) * 3 + s[2]) as usize * p;
                    for ch in 0..p {
                        acc[ch] += hv * input.data[o + ch];
                    }
                }
                let expect = zonal_convolve(&ShVector::new(acc, n_max).unwrap(), &xi).unwrap();
                let o = ((x * 3 + y) * 3 + z) as usize * p;
                for ch in 0..p {
                    let e = expect.coeffs[ch];
                    worst_zonal = worst_zonal.max((got.data[o + ch] - e).abs() / e.abs().max(1.0));
                }
            }
        }
    }
    outcome(
        worst <= 1e-12 && worst_zonal <= 1e-12,
        format!("random banks vs direct summation {worst:.1e}; zonal reduction {worst_zonal:.1e} (≤ 1e-12)"),
    )
}

// ---------------------------------------------------------------- criterion 4

fn criterion_4() -> Outcome {
    let shared = NetworkConfig::default();
    let per_dir = NetworkConfig {
        wiring: Layer2Wiring::PerDirectionConv,
        ..NetworkConfig::default()
    };
    let a = param_count(&shared).unwrap();
    let b = param_count(&per_dir).unwrap();
    let deterministic = a == param_count(&shared).unwrap() && b == param_count(&per_dir).unwrap();
    let sums = a.per_layer.iter().map(|l| l.1).sum::<usize>() == a.total
        && b.per_layer.iter().map(|l| l.1).sum::<usize>() == b.total;
    let breakdown: Vec<String> = a.per_layer.iter().map(|(l, n)| format!("{l} {n}")).collect();
    outcome(
        deterministic && sums && a.total == 42_338 && b.total == 49_874 && a.per_layer.len() >= 6,
        format!(
            "shared {} / per-direction {} (documented; published 50,376 unreconciled); breakdown: {}",
            a.total,
            b.total,
            breakdown.join(", ")
        ),
    )
}

// ------------------------------------------------------------- criteria 5–7, 10

/// Fixed before any acceptance run: 30 epochs, batch 64; everything else
/// at the library defaults.
fn acceptance_config() -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.training.epochs = 30;
    cfg.training.batch_size = 64;
    cfg
}

fn run(spec: &PhantomSpec) -> (EvalOutput, Vec<Subject>, Duration) {
    let t = Instant::now();
    let subjects = gen_cohort(spec).unwrap().subjects;
    let out = evaluate(&subjects, &acceptance_config()).unwrap();
    (out, subjects, t.elapsed())
}

fn criterion_5(out: &EvalOutput, elapsed: Duration) -> Outcome {
    let r = &out.report.rois[0];
    let dnn = r.classifier("DNN").unwrap();
    let md = r.classifier("MD").unwrap();
    outcome(
        r.dnn_valid_pa >= 0.95 && dnn.auc >= 0.95 && md.auc >= 0.90 && elapsed <= Duration::from_secs(900),
        format!(
            "scenario (a), 20+20: DNN valid PA {:.3} (≥ 0.95), DNN AUC {:.3} (≥ 0.95), MD LRT AUC {:.3} (≥ 0.90), {:.0?} on {} thread(s) (≤ 15 min)",
            r.dnn_valid_pa,
            dnn.auc,
            md.auc,
            elapsed,
            rayon::current_num_threads()
        ),
    )
}

fn criterion_6(out: &EvalOutput) -> Outcome {
    let r = &out.report.rois[0];
    let dnn = r.classifier("DNN").unwrap().auc;
    let best = r.best_metric_auc();
    outcome(
        dnn - best >= 0.15 && r.md_overlap > 0.9,
        format!(
            "scenario (b): DNN AUC {dnn:.3} vs best single metric {best:.3} (gap ≥ 0.15); MD overlap {:.3} (> 0.9)",
            r.md_overlap
        ),
    )
}

fn criterion_7(out: &EvalOutput) -> Outcome {
    let r = &out.report.rois[0];
    let aucs: Vec<f64> = r.classifiers.iter().map(|c| c.auc).collect();
    let (lo, hi) = aucs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &a| (l.min(a), h.max(a)));
    outcome(
        (0.4..=0.6).contains(&r.dnn_valid_pa) && lo >= 0.3 && hi <= 0.7,
        format!(
            "null cohort: DNN valid PA {:.3} (in [0.4, 0.6]); AUCs of all 10 classifiers in [{lo:.3}, {hi:.3}] (within [0.3, 0.7])",
            r.dnn_valid_pa
        ),
    )
}

fn criterion_10(out: &EvalOutput, subjects: &[Subject]) -> Outcome {
    let mut correct = 0;
    for (_, id, map) in &out.psic {
        let s = subjects.iter().find(|s| &s.id == id).unwrap();
        let values: Vec<f64> = map
            .scores
            .iter()
            .zip(&map.mask.data)
            .filter(|(_, &m)| m != 0)
            .map(|(&v, _)| v)
            .collect();
        let (_, decision) = median_psic_decision(&values).unwrap();
        correct += usize::from(decision == s.label);
    }
    let frac = correct as f64 / out.psic.len() as f64;
    outcome(
        frac >= 0.9,
        format!("scenario (a) held-out PSIC maps: median rule correct for {correct}/{} subjects ({frac:.3} ≥ 0.9)", out.psic.len()),
    )
}

// ---------------------------------------------------------------- criterion 8

fn fa_oracle(l: [f64; 3]) -> f64 {
    let num = (l[0] - l[1]).powi(2) + (l[1] - l[2]).powi(2) + (l[2] - l[0]).powi(2);
    let den = l[0] * l[0] + l[1] * l[1] + l[2] * l[2];
    (0.5 * num / den).sqrt()
}

fn criterion_8() -> Outcome {
    let l = [1.7e-3, 0.3e-3, 0.3e-3];
    let fa = westin_metrics(&TensorFit::from_eigenvalues(l[0], l[1], l[2])).fa;
    let oracle = fa_oracle(l);
    let iso = westin_metrics(&TensorFit::from_eigenvalues(0.7e-3, 0.7e-3, 0.7e-3)).fa;

    let scheme = make_scheme(41, 1000.0, 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let a: [[f64; 3]; 3] = std::array::from_fn(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0)));
        // D = AᵀA·1e-3 + 1e-4·I is symmetric positive definite.
        let d: [[f64; 3]; 3] = std::array::from_fn(|i| {
            std::array::from_fn(|j| {
                1e-3 * (0..3).map(|k| a[k][i] * a[k][j]).sum::<f64>() / 3.0 + if i == j { 1e-4 } else { 0.0 }
            })
        });
        let signal: Vec<f64> = scheme
            .directions()
            .iter()
            .map(|u| {
                let q: f64 = (0..3).map(|i| (0..3).map(|j| u[i] * d[i][j] * u[j]).sum::<f64>()).sum();
                (-1000.0 * q).exp()
            })
            .collect();
        let fit = fit_tensor(&signal, &scheme).unwrap();
        let norm = d.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
        for i in 0..3 {
            for j in 0..3 {
                worst = worst.max((fit.tensor[i][j] - d[i][j]).abs() / norm);
            }
        }
    }
    outcome(
        (fa - 0.799).abs() <= 1e-3 && (fa - oracle).abs() <= 1e-12 && iso == 0.0 && worst <= 1e-12,
        format!("FA(1.7, 0.3, 0.3) = {fa:.6} (oracle {oracle:.6}); isotropic FA = {iso}; noiseless recovery rel. error {worst:.1e} (≤ 1e-12)"),
    )
}

// ---------------------------------------------------------------- criterion 9

struct Artifacts {
    csv: String,
    json: String,
    model: Vec<u8>,
    maps: Vec<Vec<u8>>,
}

fn artifacts(subjects: &[Subject], cfg: &PipelineConfig, dir: &std::path::Path) -> Artifacts {
    let out = evaluate(subjects, cfg).unwrap();
    let (model, _) = train_model(subjects, "wm", cfg).unwrap();
    let mut maps = Vec::new();
    for (_, id, map) in &out.psic {
        let path = dir.join(format!("{id}.dcb"));
        let slices = export_psic(map, &path).unwrap();
        maps.push(std::fs::read(&path).unwrap());
        for s in slices {
            maps.push(std::fs::read(s).unwrap());
        }
        maps.push(pgm_bytes(map, map.dims[2] / 2));
    }
    Artifacts {
        csv: out.report.csv(),
        json: out.report.json(),
        model: model.to_bytes(),
        maps,
    }
}

fn criterion_9() -> Outcome {
    let mut spec = PhantomSpec::scenario_a();
    spec.n_per_class = 6;
    let mut cfg = PipelineConfig {
        folds: 3,
        ..acceptance_config()
    };
    cfg.training.epochs = 2;
    let results: Vec<Artifacts> = [1usize, 8]
        .iter()
        .map(|&threads| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            let dir = tempfile::tempdir().unwrap();
            pool.install(|| {
                let subjects = gen_cohort(&spec).unwrap().subjects;
                artifacts(&subjects, &cfg, dir.path())
            })
        })
        .collect();
    let (a, b) = (&results[0], &results[1]);
    let same_report = a.csv == b.csv && a.json == b.json;
    let same_model = a.model == b.model;
    let same_maps = a.maps == b.maps;
    outcome(
        same_report && same_model && same_maps,
        format!(
            "threads 1 vs 8 (6+6 subjects, 3 folds, 2 epochs): report {}, model {}, PSIC maps ({} files) {}",
            if same_report { "identical" } else { "DIFFER" },
            if same_model { "identical" } else { "DIFFER" },
            a.maps.len(),
            if same_maps { "identical" } else { "DIFFER" }
        ),
    )
}

// ---------------------------------------------------------------------- main

fn main() {
    // `cargo test` passes harness flags such as `--list` or a filter.
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let quick = std::env::var_os("PSIC_ACCEPTANCE_QUICK").is_some();
    let mut results: Vec<(u8, Outcome)> = Vec::new();
    let mut report = |n: u8, o: Outcome| {
        println!("criterion {n:>2}: {} {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, o));
    };
    report(1, criterion_1());
    report(2, criterion_2());
    report(3, criterion_3());
    report(4, criterion_4());
    if quick {
        println!("criteria 5, 6, 7, 10 skipped (PSIC_ACCEPTANCE_QUICK set)");
    } else {
        let (a, subjects_a, elapsed) = run(&PhantomSpec::scenario_a());
        report(5, criterion_5(&a, elapsed));
        let (b, _, _) = run(&PhantomSpec::scenario_b());
        report(6, criterion_6(&b));
        let (null, _, _) = run(&PhantomSpec::null());
        report(7, criterion_7(&null));
        report(8, criterion_8());
        report(9, criterion_9());
        report(10, criterion_10(&a, &subjects_a));
    }
    if quick {
        report(8, criterion_8());
        report(9, criterion_9());
    }
    let failed: Vec<u8> = results.iter().filter(|r| !r.1.pass).map(|r| r.0).collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria passed", results.len());
    } else {
        println!("acceptance: FAILED criteria {failed:?}");
        std::process::exit(1);
    }
}
