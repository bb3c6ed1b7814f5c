//! Expected behaviour of the desk-scale imbalance experiment.
//!
//! The acceptance experiment scores one dataset on a 66-sample test split,
//! where one sample is worth 1.5 accuracy points. This study trains the same
//! configuration on several independently drawn datasets and scores every
//! model on one large held-out set drawn from the same class means, which
//! estimates the expected effect of each method.
//!
//! Usage: `cargo run --release -p bmlr-core --example imbalance_study -- [dim] [hidden] [datasets]`
//! with defaults `16 64,32 5`.

use bmlr_core::data::{generate, SyntheticSpec};
use bmlr_core::reshaper::ReshapeConfig;
use bmlr_core::trainer::{evaluate, train, MethodKind, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let dim: usize = args.get(1).map_or(16, |s| s.parse().expect("dim"));
    let hidden: Vec<usize> = args
        .get(2)
        .map_or("64,32", String::as_str)
        .split(',')
        .map(|s| s.parse().expect("hidden width"))
        .collect();
    let datasets: u64 = args.get(3).map_or(5, |s| s.parse().expect("dataset count"));
    // Class means depend only on the generator settings when dim >= classes, so datasets
    // with different seeds share them.
    assert!(dim >= 6, "dim must be at least the class count");
    let spec = |seed, per_class| SyntheticSpec {
        classes: 6,
        samples_per_class: per_class,
        dims: vec![dim, dim],
        separations: vec![2.5, 1.0],
        exclusive_fraction: 0.2,
        label_noise: 0.0,
        seed,
    };
    let held_out = generate(&spec(u64::MAX, 1000)).expect("valid spec");
    let held_out: Vec<_> = held_out.samples.iter().collect();

    println!("method,runs,acc,acc_m0,acc_m1,mean_abs_ratio_minus_1");
    for method in [MethodKind::Baseline, MethodKind::Bmlr, MethodKind::OnlyTpo, MethodKind::UniformBaseline] {
        let mut sums = [0.0; 4];
        let mut runs = 0.0;
        for ds_seed in 0..datasets {
            let ds = generate(&spec(ds_seed, 111)).expect("valid spec");
            for seed in 1..=3 {
                let cfg = TrainConfig {
                    method,
                    epochs: 40,
                    batch_size: 64,
                    lr: 5e-4,
                    seed,
                    hidden: hidden.clone(),
                    reshape: ReshapeConfig::new(1.0, 0.2),
                    ..TrainConfig::default()
                };
                let model = train(&cfg, &ds, None).expect("training succeeds").model;
                let e = evaluate(&model, &held_out).expect("non-empty");
                sums[0] += e.accuracy;
                sums[1] += e.modality_accuracy[0];
                sums[2] += e.modality_accuracy[1];
                sums[3] += (e.ratio.expect("weak accuracy above zero") - 1.0).abs();
                runs += 1.0;
            }
        }
        println!(
            "{method},{runs},{:.4},{:.4},{:.4},{:.4}",
            sums[0] / runs,
            sums[1] / runs,
            sums[2] / runs,
            sums[3] / runs
        );
    }
}
