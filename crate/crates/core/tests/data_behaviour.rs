use bmlr_core::data::{generate, SyntheticSpec};
use bmlr_core::trainer::{train, MethodKind, TrainConfig};

fn spec(separations: [f64; 2], per_class: usize, dim: usize, seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        classes: 4,
        samples_per_class: per_class,
        dims: vec![dim, dim],
        separations: separations.to_vec(),
        exclusive_fraction: 0.0,
        label_noise: 0.0,
        seed,
    }
}

fn final_modality_acc(method: MethodKind, s: &SyntheticSpec, hidden: Vec<usize>, seed: u64, epochs: usize) -> Vec<f64> {
    let ds = generate(s).unwrap();
    let cfg = TrainConfig {
        method,
        epochs,
        batch_size: 64,
        lr: 5e-3,
        seed,
        hidden,
        ..TrainConfig::default()
    };
    train(&cfg, &ds, None).unwrap().record.last().unwrap().modality_accuracy.clone()
}

#[test]
fn symmetric_difficulty_gives_balanced_baseline() {
    let mut ratio = 0.0;
    for seed in 1..=3 {
        let s = spec([2.5, 2.5], 300, 8, seed);
        let acc = final_modality_acc(MethodKind::Baseline, &s, vec![16, 8], seed, 20);
        ratio += acc[0] / acc[1] / 3.0;
    }
    assert!((0.9..=1.1).contains(&ratio), "mean ratio {ratio}");
}

#[test]
fn separation_zero_modality_is_at_chance() {
    let s = spec([3.0, 0.0], 1500, 6, 21);
    let acc = final_modality_acc(MethodKind::OnlyTpo, &s, vec![16, 8], 1, 5);
    assert!((acc[1] - 0.25).abs() <= 0.05, "noise-modality accuracy {}", acc[1]);
    assert!(acc[0] > 0.6, "informative modality accuracy {}", acc[0]);
}

#[test]
fn stronger_separation_gives_better_linear_probe() {
    let (mut a, mut v) = (0.0, 0.0);
    for seed in 1..=3 {
        let s = spec([2.5, 1.0], 150, 8, seed + 30);
        // one linear encoder layer: the unimodal heads are linear probes
        let acc = final_modality_acc(MethodKind::OnlyTpo, &s, vec![8], seed, 20);
        a += acc[0] / 3.0;
        v += acc[1] / 3.0;
    }
    assert!(a > v, "probe accuracy a={a} v={v}");
}
