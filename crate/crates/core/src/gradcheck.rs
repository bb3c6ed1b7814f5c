//! Analytic gradients checked against central finite differences.
//!
//! For each fusion head, a small random model and batch are built. Every
//! loss head (the fused loss and each unimodal loss) is checked separately
//! over every parameter group.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{Architecture, ForwardTrace, FusionKind, Group, HeadGrads, Model, Params, Routing};
use crate::numeric::{cross_entropy, finite_diff_grad, relative_error, LabelDistribution};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor for the relative error, so entries that are zero on
/// both sides compare as equal.
pub const ERROR_FLOOR: f64 = 1e-6;
/// Pre-activations closer than this to a ReLU kink cause the batch to be
/// redrawn; finite differences straddling a kink are meaningless.
const KINK_MARGIN: f64 = 1e-3;

const BATCH: usize = 4;
const CLASSES: usize = 3;

/// The backward pass under test.
pub type BackwardFn = fn(&Model, &ForwardTrace, &HeadGrads) -> Result<Params>;

pub fn model_backward(model: &Model, trace: &ForwardTrace, heads: &HeadGrads) -> Result<Params> {
    model.backward(trace, heads, Routing::joint())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Fused,
    Unimodal(usize),
}

impl std::fmt::Display for Head {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Head::Fused => f.write_str("fused"),
            Head::Unimodal(u) => write!(f, "unimodal[{u}]"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub fusion: FusionKind,
    pub modalities: usize,
    pub head: Head,
    pub group: Group,
    pub max_rel_error: f64,
    /// Parameter block and offset of the worst entry in this group.
    pub worst: String,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub seed: u64,
    pub entries: Vec<Entry>,
}

impl Report {
    pub fn worst(&self) -> &Entry {
        self.entries
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
            .expect("report has entries")
    }

    pub fn max_rel_error(&self) -> f64 {
        self.worst().max_rel_error
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < TOLERANCE
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            let _ = writeln!(
                s,
                "{} M={} head={} group={} max_rel_err={:.3e}",
                e.fusion, e.modalities, e.head, e.group, e.max_rel_error
            );
        }
        let w = self.worst();
        let _ = writeln!(
            s,
            "max_rel_err={:.3e} worst={} {} {} {} analytic={:.6e} numeric={:.6e}",
            w.max_rel_error, w.fusion, w.head, w.group, w.worst, w.analytic, w.numeric
        );
        s
    }
}

fn too_close_to_kink(model: &Model, inputs: &[Vec<Vec<f64>>]) -> Result<bool> {
    for sample in inputs {
        for (enc, x) in model.params().encoders.iter().zip(sample) {
            let mut h = x.clone();
            let last = enc.layers.len() - 1;
            for (k, layer) in enc.layers.iter().enumerate() {
                let pre = layer.forward(&h)?;
                if k == last {
                    break;
                }
                if pre.iter().any(|v| v.abs() < KINK_MARGIN) {
                    return Ok(true);
                }
                h = pre.into_iter().map(|v| v.max(0.0)).collect();
            }
        }
    }
    Ok(false)
}

fn random_simplex(rng: &mut ChaCha8Rng) -> LabelDistribution {
    let raw: Vec<f64> = (0..CLASSES).map(|_| rng.random_range(0.05..1.0)).collect();
    let s: f64 = raw.iter().sum();
    LabelDistribution::new(raw.iter().map(|v| v / s).collect()).expect("normalised")
}

fn head_loss(model: &Model, inputs: &[Vec<Vec<f64>>], head: Head, targets: &[LabelDistribution]) -> f64 {
    let n = inputs.len() as f64;
    inputs
        .iter()
        .zip(targets)
        .map(|(x, t)| {
            let s = model.forward_sample(x).expect("shapes fixed");
            let p = match head {
                Head::Fused => &s.probs,
                Head::Unimodal(u) => &s.unimodal_probs[u],
            };
            cross_entropy(t, p).expect("aligned") / n
        })
        .sum()
}

fn block_location(params: &Params, group: Group, index: usize) -> String {
    let mut offset = 0;
    for b in params.blocks().into_iter().filter(|b| b.group == group) {
        if index < offset + b.data.len() {
            return format!("{}[{}]", b.name, index - offset);
        }
        offset += b.data.len();
    }
    format!("{group}[{index}]")
}

fn check_case(
    fusion: FusionKind,
    modalities: usize,
    rng: &mut ChaCha8Rng,
    backward: BackwardFn,
    out: &mut Vec<Entry>,
) -> Result<()> {
    let dim = 4;
    let arch = Architecture {
        input_dims: vec![dim; modalities],
        hidden: vec![5, 4],
        classes: CLASSES,
        fusion,
    };
    let mut model = Model::new(&arch, rng)?;
    // random biases keep the bias paths exercised
    for b in model.params_mut().blocks_mut() {
        if b.name.ends_with("bias") {
            for v in b.data.iter_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
    }
    let mut inputs;
    let mut attempts = 0;
    loop {
        inputs = (0..BATCH)
            .map(|_| {
                (0..modalities)
                    .map(|_| (0..dim).map(|_| rng.random_range(-1.5..1.5)).collect())
                    .collect()
            })
            .collect::<Vec<Vec<Vec<f64>>>>();
        if !too_close_to_kink(&model, &inputs)? {
            break;
        }
        attempts += 1;
        if attempts > 100 {
            return Err(Error::Invalid("could not draw a batch away from ReLU kinks".into()));
        }
    }

    let trace = model.forward(inputs.iter().map(|v| v.as_slice()))?;
    let heads = std::iter::once(Head::Fused).chain((0..modalities).map(Head::Unimodal));
    for head in heads {
        let targets: Vec<LabelDistribution> = (0..BATCH).map(|_| random_simplex(rng)).collect();
        let n = BATCH as f64;
        let delta = |p: &LabelDistribution, t: &LabelDistribution| -> Vec<f64> {
            p.probs().iter().zip(t.probs()).map(|(p, t)| (p - t) / n).collect()
        };
        let grads_for = |u: usize| -> Vec<Vec<f64>> {
            trace
                .samples
                .iter()
                .zip(&targets)
                .map(|(s, t)| match head {
                    Head::Unimodal(h) if h == u => delta(&s.unimodal_probs[u], t),
                    _ => vec![0.0; CLASSES],
                })
                .collect()
        };
        let hg = match head {
            Head::Fused => HeadGrads {
                fused: Some(trace.samples.iter().zip(&targets).map(|(s, t)| delta(&s.probs, t)).collect()),
                unimodal: None,
            },
            Head::Unimodal(_) => HeadGrads {
                fused: None,
                unimodal: Some((0..modalities).map(grads_for).collect()),
            },
        };
        let analytic = backward(&model, &trace, &hg)?;
        let mut probe = model.clone();
        for group in model.params().groups() {
            let point = model.params().group_vector(group);
            let numeric = finite_diff_grad(
                |v| {
                    probe.params_mut().set_group_vector(group, v).expect("same length");
                    head_loss(&probe, &inputs, head, &targets)
                },
                &point,
                STEP,
            )?;
            probe.params_mut().set_group_vector(group, &point)?;
            let an = analytic.group_vector(group);
            let (k, err) = an
                .iter()
                .zip(&numeric)
                .map(|(a, f)| relative_error(*a, *f, ERROR_FLOOR))
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(&b.1))
                .expect("non-empty group");
            out.push(Entry {
                fusion,
                modalities,
                head,
                group,
                max_rel_error: err,
                worst: block_location(model.params(), group, k),
                analytic: an[k],
                numeric: numeric[k],
            });
        }
    }
    Ok(())
}

/// Runs every fusion head with two modalities, plus concat with three.
pub fn gradcheck_with(seed: u64, backward: BackwardFn) -> Result<Report> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    for fusion in FusionKind::ALL {
        check_case(fusion, 2, &mut rng, backward, &mut entries)?;
    }
    check_case(FusionKind::Concat, 3, &mut rng, backward, &mut entries)?;
    Ok(Report { seed, entries })
}

pub fn gradcheck(seed: u64) -> Result<Report> {
    gradcheck_with(seed, model_backward)
}

/// A deliberately wrong backward: the true gradient scaled by 1.01.
pub fn corrupted_backward(model: &Model, trace: &ForwardTrace, heads: &HeadGrads) -> Result<Params> {
    let mut g = model_backward(model, trace, heads)?;
    for b in g.blocks_mut() {
        for v in b.data.iter_mut() {
            *v *= 1.01;
        }
    }
    Ok(g)
}
