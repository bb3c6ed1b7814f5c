//! Acceptance suite. Runs as a plain binary (no libtest harness) so that
//! every criterion prints exactly one PASS/FAIL line; the process exits
//! nonzero if any criterion fails.

use std::time::{Duration, Instant};

use bmlr_core::data::{generate, Dataset, Sample, SyntheticSpec};
use bmlr_core::experiment::{run_train, ExperimentConfig};
use bmlr_core::gradcheck;
use bmlr_core::metrics::modality_ratio;
use bmlr_core::model::{Affine, Architecture, DecisionParams, Encoder, FusionKind, Group, Model, Params};
use bmlr_core::numeric::{AdamConfig, LabelDistribution, Matrix};
use bmlr_core::reshaper::{reshape_batch, reshape_label, reshaping_intensity, reshaping_matrix, ReshapeConfig};
use bmlr_core::trainer::{tpo_step, train, GroupOptimizers, LossMask, MethodKind, TargetRule, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Verdict = Result<String, String>;

/// Concat model whose unimodal logits equal its inputs: identity encoders,
/// identity classifier blocks, zero bias.
fn logit_model(classes: usize) -> Model {
    let enc = Encoder {
        layers: vec![Affine {
            weight: Matrix::identity(classes),
            bias: vec![0.0; classes],
        }],
    };
    Model::from_params(Params {
        encoders: vec![enc.clone(), enc],
        probes: vec![],
        decision: DecisionParams {
            kind: FusionKind::Concat,
            classifier: vec![Matrix::identity(classes), Matrix::identity(classes)],
            bias: vec![0.0; classes],
            film: None,
            gate: None,
        },
    })
    .unwrap()
}

fn random_logits(c: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let scale = 10f64.powf(rng.random_range(-2.0..1.7));
    (0..c).map(|_| scale * rng.random_range(-1.0..1.0)).collect()
}

fn random_cfg(rng: &mut ChaCha8Rng) -> ReshapeConfig {
    let alpha = 10f64.powf(rng.random_range(-2.0..2.0));
    let beta = match rng.random_range(0..10) {
        0 => 0.0,
        1 => 1.0,
        _ => rng.random_range(0.0..1.0),
    };
    ReshapeConfig::new(alpha, beta)
}

fn criterion_1() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let models: Vec<Model> = (2..=6).map(logit_model).collect();
    let mut worst: f64 = 0.0;
    for draw in 0..10_000 {
        let c = rng.random_range(2..=6);
        let inputs = vec![random_logits(c, &mut rng), random_logits(c, &mut rng)];
        let y = rng.random_range(0..c);
        let cfg = random_cfg(&mut rng);
        let trace = models[c - 2].forward([inputs.as_slice()]).map_err(|e| e.to_string())?;
        let dec = reshape_batch(&trace, &[y], &cfg).map_err(|e| e.to_string())?;
        for m in &dec[0].modalities {
            let p = m.label.probs();
            if p.iter().any(|v| *v < 0.0) {
                return Err(format!("draw {draw}: negative entry in {p:?}"));
            }
            worst = worst.max((p.iter().sum::<f64>() - 1.0).abs());
        }
    }
    let elapsed = start.elapsed();
    if worst > 1e-9 {
        return Err(format!("max |sum - 1| = {worst:e}"));
    }
    if elapsed > Duration::from_secs(5) {
        return Err(format!("took {elapsed:?}"));
    }
    Ok(format!("10000 draws, max |sum - 1| = {worst:.1e}, {elapsed:.2?}"))
}

fn criterion_2() -> Verdict {
    let eps_beta = ReshapeConfig::default().eps_beta;
    let mut checked = 0;
    for j in 0..100 {
        let beta = j as f64 / 99.0;
        let beta_eff = if beta == 0.0 { eps_beta } else { beta };
        let upper = 1.0 / beta_eff;
        let grid = (0..100).map(|i| (i + 1) as f64 / 10.0);
        for lambda in grid.chain([1.0, upper, upper * (1.0 + 1e-12), 1.0 + 1e-12]) {
            let xi = ReshapeConfig::new(1.0, beta).intensity(lambda);
            let bare = reshaping_intensity(lambda, beta_eff);
            let inside = 1.0 < lambda && lambda < upper;
            let expected = if inside { 1.0 - 1.0 / lambda } else { 0.0 };
            if (xi > 0.0) != inside || (xi - expected).abs() > 1e-12 || xi != bare {
                return Err(format!("lambda={lambda} beta={beta}: xi={xi}, expected {expected}"));
            }
            if !inside && xi != 0.0 {
                return Err(format!("lambda={lambda} beta={beta}: inactive but xi={xi}"));
            }
            checked += 1;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let models: Vec<Model> = (2..=6).map(logit_model).collect();
    let mut active_samples = 0;
    for draw in 0..10_000 {
        let c = rng.random_range(2..=6);
        let inputs = vec![random_logits(c, &mut rng), random_logits(c, &mut rng)];
        let cfg = random_cfg(&mut rng);
        let trace = models[c - 2].forward([inputs.as_slice()]).map_err(|e| e.to_string())?;
        let dec = &reshape_batch(&trace, &[rng.random_range(0..c)], &cfg).map_err(|e| e.to_string())?[0];
        if dec.active_count() > 1 {
            return Err(format!("draw {draw}: both modalities active"));
        }
        for m in &dec.modalities {
            if m.active != (m.intensity > 0.0) {
                return Err(format!("draw {draw}: active flag disagrees with xi={}", m.intensity));
            }
        }
        active_samples += dec.active_count();
    }
    Ok(format!(
        "{checked} (lambda, beta) points incl. boundaries; 10000 draws, {active_samples} with one active modality, none with two"
    ))
}

fn random_simplex(c: usize, rng: &mut ChaCha8Rng) -> LabelDistribution {
    let raw: Vec<f64> = (0..c).map(|_| -rng.random_range(1e-12f64..1.0).ln()).collect();
    let s: f64 = raw.iter().sum();
    LabelDistribution::new(raw.iter().map(|v| v / s).collect()).unwrap()
}

fn criterion_3() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let c = rng.random_range(2..=8);
        let d = random_simplex(c, &mut rng);
        let y = LabelDistribution::one_hot(rng.random_range(0..c), c);
        let xi = rng.random_range(0.0..1.0);
        let dm = reshaping_matrix(&d);
        let mut m = Matrix::zeros(c, c);
        for r in 0..c {
            for k in 0..c {
                let id = if r == k { 1.0 } else { 0.0 };
                m.set(r, k, xi * dm.get(r, k) + (1.0 - xi) * id);
            }
        }
        let via_matrix = m.matvec(y.probs()).map_err(|e| e.to_string())?;
        let via_mixture = reshape_label(&y, &d, xi).map_err(|e| e.to_string())?;
        for (a, b) in via_matrix.iter().zip(via_mixture.probs()) {
            worst = worst.max((a - b).abs());
        }
    }
    if worst > 1e-12 {
        return Err(format!("max deviation {worst:e}"));
    }
    Ok(format!("1000 cases, max deviation {worst:.1e}"))
}

/// (lambda, xi, temperature, reshaped label) for one modality.
type OracleRow = (f64, f64, f64, Vec<f64>);

/// Straight-line per-sample evaluation of the reshaping rules from raw
/// parameters, one row per modality.
fn oracle(model: &Model, x: &[Vec<f64>], y: usize, alpha: f64, beta: f64) -> Vec<OracleRow> {
    let p = model.params();
    let mut logits = Vec::new();
    for u in 0..2 {
        // encoder: ReLU between layers, linear last layer
        let mut h = x[u].clone();
        let n = p.encoders[u].layers.len();
        for (k, layer) in p.encoders[u].layers.iter().enumerate() {
            let mut out = vec![0.0; layer.weight.rows()];
            for r in 0..layer.weight.rows() {
                let mut acc = layer.bias[r];
                for c in 0..layer.weight.cols() {
                    acc += layer.weight.get(r, c) * h[c];
                }
                out[r] = if k + 1 < n && acc < 0.0 { 0.0 } else { acc };
            }
            h = out;
        }
        // unimodal logits: own classifier block plus half the bias
        let w = &p.decision.classifier[u];
        let l: Vec<f64> = (0..w.rows())
            .map(|r| (0..w.cols()).map(|c| w.get(r, c) * h[c]).sum::<f64>() + p.decision.bias[r] / 2.0)
            .collect();
        logits.push(l);
    }
    let softmax_t = |l: &[f64], t: f64| -> Vec<f64> {
        let mx = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = l.iter().map(|v| ((v - mx) / t).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|v| v / s).collect()
    };
    let conf_a = softmax_t(&logits[0], 1.0)[y];
    let conf_v = softmax_t(&logits[1], 1.0)[y];
    let lam_a = conf_a.max(1e-8) / conf_v.max(1e-8);
    let lambdas = [lam_a, 1.0 / lam_a];
    let b = if beta == 0.0 { 1e-6 } else { beta };
    (0..2)
        .map(|u| {
            let lam = lambdas[u];
            let xi = if lam > 1.0 && lam < 1.0 / b { 1.0 - 1.0 / lam } else { 0.0 };
            let t = (alpha * lambdas[1 - u]).clamp(1e-3, 1e3);
            let d = softmax_t(&logits[1 - u], t);
            let label: Vec<f64> = (0..d.len())
                .map(|k| xi * d[k] + (1.0 - xi) * if k == y { 1.0 } else { 0.0 })
                .collect();
            (lam, xi, t, label)
        })
        .collect()
}

fn criterion_4() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    let mut active = 0;
    for batch_no in 0..50 {
        let c = rng.random_range(2..=5);
        let n = rng.random_range(1..=8);
        let dims = vec![rng.random_range(2..=5), rng.random_range(2..=5)];
        let arch = Architecture {
            input_dims: dims.clone(),
            hidden: vec![rng.random_range(2..=6), rng.random_range(2..=4)],
            classes: c,
            fusion: FusionKind::Concat,
        };
        let mut model = Model::new(&arch, &mut rng).unwrap();
        let gain = rng.random_range(0.5..2.0);
        for b in model.params_mut().blocks_mut() {
            for v in b.data.iter_mut() {
                *v = *v * gain + rng.random_range(-0.2..0.2);
            }
        }
        let inputs: Vec<Vec<Vec<f64>>> = (0..n)
            .map(|_| dims.iter().map(|&d| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect())
            .collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let alpha = rng.random_range(0.2..3.0);
        let beta = rng.random_range(0.0..0.6);
        let cfg = ReshapeConfig::new(alpha, beta);
        let trace = model.forward(inputs.iter().map(|v| v.as_slice())).unwrap();
        let got = reshape_batch(&trace, &labels, &cfg).map_err(|e| e.to_string())?;
        for i in 0..n {
            let want = oracle(&model, &inputs[i], labels[i], alpha, beta);
            for u in 0..2 {
                let g = &got[i].modalities[u];
                let (lam, xi, t, label) = &want[u];
                let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1.0);
                let mut errs = vec![rel(g.lambda, *lam), (g.intensity - xi).abs()];
                errs.extend(g.label.probs().iter().zip(label).map(|(a, b)| (a - b).abs()));
                if g.active {
                    errs.push(rel(g.temperature, *t));
                    active += 1;
                }
                let e = errs.into_iter().fold(0.0, f64::max);
                if e > 1e-10 || g.active != (*xi > 0.0) {
                    return Err(format!("batch {batch_no} sample {i} modality {u}: error {e:e}"));
                }
                worst = worst.max(e);
            }
        }
    }
    Ok(format!("50 batches, {active} active decisions, max deviation {worst:.1e}"))
}

fn criterion_5() -> Verdict {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        let report = gradcheck::gradcheck(seed).map_err(|e| e.to_string())?;
        if !report.passed() {
            let w = report.worst();
            return Err(format!(
                "seed {seed}: {} {} {} {} rel err {:.3e}",
                w.fusion, w.head, w.group, w.worst, w.max_rel_error
            ));
        }
        worst = worst.max(report.max_rel_error());
    }
    let elapsed = start.elapsed();
    if elapsed > Duration::from_secs(30) {
        return Err(format!("took {elapsed:?}"));
    }
    Ok(format!("20 seeds, max rel err {worst:.2e}, {elapsed:.2?}"))
}

fn small_dataset(seed: u64) -> Dataset {
    generate(&SyntheticSpec {
        classes: 4,
        samples_per_class: 30,
        dims: vec![5, 5],
        separations: vec![2.5, 1.0],
        exclusive_fraction: 0.2,
        label_noise: 0.0,
        seed,
    })
    .unwrap()
}

fn criterion_6() -> Verdict {
    let ds = small_dataset(6);
    let train_set = ds.train();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cfg = ReshapeConfig::default();
    for fusion in FusionKind::ALL {
        let arch = Architecture {
            input_dims: ds.dims.clone(),
            hidden: vec![8, 6],
            classes: ds.classes,
            fusion,
        };
        let mut model = Model::new(&arch, &mut rng).unwrap();
        let mut opt = GroupOptimizers::new(&model, AdamConfig::with_lr(1e-2));
        // warm up so every Adam state carries momentum
        for chunk in train_set.chunks(16).take(3) {
            tpo_step(&mut model, &mut opt, chunk, TargetRule::Reshape, &cfg, LossMask::default()).map_err(|e| e.to_string())?;
        }
        let batch: Vec<&Sample> = train_set.iter().skip(48).take(16).copied().collect();
        for (mask, frozen, moved) in [
            (LossMask { fused: false, unimodal: true }, vec![Group::Decision], vec![Group::Modality(0), Group::Modality(1)]),
            (LossMask { fused: true, unimodal: false }, vec![Group::Modality(0), Group::Modality(1)], vec![Group::Decision]),
        ] {
            let mut m = model.clone();
            let mut o = opt.clone();
            tpo_step(&mut m, &mut o, &batch, TargetRule::Reshape, &cfg, mask).map_err(|e| e.to_string())?;
            for g in frozen {
                let before: Vec<u64> = model.params().group_vector(g).iter().map(|v| v.to_bits()).collect();
                let after: Vec<u64> = m.params().group_vector(g).iter().map(|v| v.to_bits()).collect();
                if before != after {
                    return Err(format!("{fusion}: {g} changed with its loss zeroed"));
                }
            }
            for g in moved {
                if m.params().group_vector(g) == model.params().group_vector(g) {
                    return Err(format!("{fusion}: {g} did not move under its own loss"));
                }
            }
        }
    }
    Ok("all fusion heads: excluded groups bit-identical after a masked step".into())
}

fn criterion_7() -> Verdict {
    let rows = [
        (54.12, 31.25, 1.73),
        (49.41, 30.63, 1.61),
        (58.33, 24.47, 2.38),
        (62.22, 66.34, 0.94),
        (52.66, 54.49, 0.97),
        (68.23, 38.80, 1.76),
    ];
    let mut parts = Vec::new();
    for (a, v, printed) in rows {
        let r = modality_ratio(a / 100.0, v / 100.0).ok_or("ratio undefined")?;
        if (r - printed).abs() > 0.005 {
            return Err(format!("{a}/{v} = {r:.4}, table prints {printed}"));
        }
        parts.push(format!("{r:.4}"));
    }
    if modality_ratio(0.5, 0.0).is_some() {
        return Err("zero denominator not flagged".into());
    }
    Ok(format!("ratios {}", parts.join(", ")))
}

struct Summary {
    acc: f64,
    weak: f64,
    ratio: f64,
    imbalance: f64,
}

fn mean_final(method: MethodKind, ds: &Dataset) -> Result<Summary, String> {
    let mut s = Summary { acc: 0.0, weak: 0.0, ratio: 0.0, imbalance: 0.0 };
    for seed in 1..=3 {
        let cfg = TrainConfig {
            method,
            fusion: FusionKind::Concat,
            epochs: 40,
            batch_size: 64,
            lr: 5e-4,
            seed,
            reshape: ReshapeConfig::new(1.0, 0.2),
            hidden: vec![64, 32],
            ..TrainConfig::default()
        };
        let rec = train(&cfg, ds, None).map_err(|e| e.to_string())?.record;
        let last = rec.last().unwrap();
        let ratio = last.ratio.ok_or("weak-modality accuracy is zero")?;
        s.acc += last.accuracy / 3.0;
        s.weak += last.modality_accuracy[1] / 3.0;
        s.ratio += ratio / 3.0;
        s.imbalance += (ratio - 1.0).abs() / 3.0;
    }
    Ok(s)
}

fn criterion_8() -> Verdict {
    let start = Instant::now();
    // 111 per class: a 9:1 split gives 100 train and 11 test per class
    let ds = generate(&SyntheticSpec {
        classes: 6,
        samples_per_class: 111,
        dims: vec![16, 16],
        separations: vec![2.5, 1.0],
        exclusive_fraction: 0.2,
        label_noise: 0.0,
        seed: 0,
    })
    .unwrap();
    let base = mean_final(MethodKind::Baseline, &ds)?;
    let bmlr = mean_final(MethodKind::Bmlr, &ds)?;
    let elapsed = start.elapsed();
    let checks = [
        ("a", base.ratio > 1.2, format!("baseline ratio {:.3} > 1.2", base.ratio)),
        (
            "b",
            bmlr.imbalance < base.imbalance,
            format!("|ratio-1| bmlr {:.3} < baseline {:.3}", bmlr.imbalance, base.imbalance),
        ),
        ("c", bmlr.weak > base.weak, format!("weak acc bmlr {:.4} > baseline {:.4}", bmlr.weak, base.weak)),
        (
            "d",
            bmlr.acc >= base.acc - 0.005,
            format!("acc bmlr {:.4} >= baseline {:.4} - 0.005", bmlr.acc, base.acc),
        ),
        ("time", elapsed < Duration::from_secs(300), format!("{elapsed:.1?} < 300s")),
    ];
    let text = checks
        .iter()
        .map(|(k, ok, msg)| format!("({k}) {} {msg}", if *ok { "ok" } else { "FAILED" }))
        .collect::<Vec<_>>()
        .join("; ");
    if checks.iter().all(|c| c.1) {
        Ok(text)
    } else {
        Err(text)
    }
}

fn same_trajectory(a: &TrainConfig, b: &TrainConfig, ds: &Dataset) -> Result<bool, String> {
    let ra = train(a, ds, None).map_err(|e| e.to_string())?;
    let rb = train(b, ds, None).map_err(|e| e.to_string())?;
    let bits = |m: &Model| -> Vec<u64> {
        m.params().blocks().iter().flat_map(|b| b.data.iter().map(|v| v.to_bits())).collect()
    };
    Ok(ra.record.rows == rb.record.rows && bits(&ra.model) == bits(&rb.model))
}

fn criterion_9() -> Verdict {
    let ds = small_dataset(9);
    for fusion in [FusionKind::Concat, FusionKind::Gated] {
        let base = TrainConfig {
            fusion,
            epochs: 4,
            batch_size: 16,
            lr: 5e-3,
            seed: 3,
            hidden: vec![8, 6],
            ..TrainConfig::default()
        };
        let with = |method, reshape, smoothing| TrainConfig {
            method,
            reshape,
            smoothing,
            ..base.clone()
        };
        let cases = [
            (
                "bmlr beta=1 vs only-tpo",
                with(MethodKind::Bmlr, ReshapeConfig::new(1.0, 1.0), 0.1),
                with(MethodKind::OnlyTpo, ReshapeConfig::new(1.0, 0.2), 0.1),
            ),
            (
                "uniform-reshaping s=0 vs uniform-baseline",
                with(MethodKind::UniformReshaping, ReshapeConfig::default(), 0.0),
                with(MethodKind::UniformBaseline, ReshapeConfig::default(), 0.0),
            ),
            (
                "baseline (1, 0.2) vs (3.7, 0.9)",
                with(MethodKind::Baseline, ReshapeConfig::new(1.0, 0.2), 0.1),
                with(MethodKind::Baseline, ReshapeConfig::new(3.7, 0.9), 0.1),
            ),
            (
                "baseline (1, 0.2) vs (0.1, 0)",
                with(MethodKind::Baseline, ReshapeConfig::new(1.0, 0.2), 0.1),
                with(MethodKind::Baseline, ReshapeConfig::new(0.1, 0.0), 0.1),
            ),
        ];
        for (name, a, b) in cases {
            if !same_trajectory(&a, &b, &ds)? {
                return Err(format!("{fusion}: {name} trajectories differ"));
            }
        }
    }
    Ok("3 degeneracies bit-identical (concat and gated heads)".into())
}

fn criterion_10() -> Verdict {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let spec = SyntheticSpec {
        classes: 4,
        samples_per_class: 30,
        dims: vec![5, 5],
        separations: vec![2.5, 1.0],
        exclusive_fraction: 0.2,
        label_noise: 0.05,
        seed: 10,
    };
    for method in MethodKind::ALL {
        let mut outputs = Vec::new();
        for rep in 0..2 {
            let cfg = ExperimentConfig {
                synthetic: Some(spec.clone()),
                method,
                epochs: 3,
                batch_size: 16,
                lr: 5e-3,
                seed: 42,
                hidden: vec![8, 6],
                out: Some(dir.path().join(format!("{method}-{rep}"))),
                ..ExperimentConfig::default()
            };
            run_train(&cfg, &mut Vec::new()).map_err(|e| e.to_string())?;
            outputs.push(std::fs::read(cfg.out.unwrap().join("metrics.csv")).map_err(|e| e.to_string())?);
        }
        if outputs[0] != outputs[1] {
            return Err(format!("{method}: metrics CSV differs between identical runs"));
        }
    }
    Ok("all 8 methods: byte-identical metrics CSV on rerun".into())
}

fn main() {
    let criteria: [(&str, fn() -> Verdict); 10] = [
        ("simplex validity", criterion_1),
        ("gate law", criterion_2),
        ("matrix/mixture equivalence", criterion_3),
        ("oracle equivalence", criterion_4),
        ("gradient fidelity", criterion_5),
        ("routing exactness", criterion_6),
        ("table ratios", criterion_7),
        ("desk-scale behaviour", criterion_8),
        ("variant degeneracies", criterion_9),
        ("determinism", criterion_10),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        match run() {
            Ok(detail) => println!("criterion {:>2} PASS {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL {name}: {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
