//! Training engines.
//!
//! Two step kinds exist. The targeted step routes each modality's unimodal
//! loss into that modality's encoder only and the fused loss into the
//! decision layer only. The joint step sums the fused loss and weighted
//! unimodal losses and updates everything. Each [`MethodKind`] is one of
//! these step kinds plus a rule for building the unimodal targets.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::metrics::{self, MetricsRow};
use crate::model::{Architecture, ForwardTrace, FusionKind, Group, HeadGrads, Model, Routing};
use crate::numeric::{cross_entropy, softmax, AdamConfig, AdamState, LabelDistribution};
use crate::reshaper::{reshape_batch, write_diagnostics, ReshapeConfig, ReshapeDecision};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodKind {
    Baseline,
    UniformBaseline,
    Bmlr,
    OnlyReshape,
    OnlyTpo,
    UniDistill,
    VanillaReshape,
    UniformReshaping,
}

impl MethodKind {
    pub const ALL: [MethodKind; 8] = [
        Self::Baseline,
        Self::UniformBaseline,
        Self::Bmlr,
        Self::OnlyReshape,
        Self::OnlyTpo,
        Self::UniDistill,
        Self::VanillaReshape,
        Self::UniformReshaping,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Baseline => "baseline",
            Self::UniformBaseline => "uniform-baseline",
            Self::Bmlr => "bmlr",
            Self::OnlyReshape => "only-reshape",
            Self::OnlyTpo => "only-tpo",
            Self::UniDistill => "uni-distill",
            Self::VanillaReshape => "vanilla-reshape",
            Self::UniformReshaping => "uniform-reshaping",
        }
    }
}

impl fmt::Display for MethodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for MethodKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: MethodKind,
    pub fusion: FusionKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub reshape: ReshapeConfig,
    /// Unimodal loss weights for the joint objectives. Empty means 1 for
    /// every modality.
    pub uniform_weights: Vec<f64>,
    /// Probability mass spread over non-target classes by uniform reshaping.
    pub smoothing: f64,
    /// Encoder widths; the last entry is the feature dimension.
    pub hidden: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: MethodKind::Bmlr,
            fusion: FusionKind::Concat,
            epochs: 40,
            batch_size: 64,
            lr: 5e-4,
            seed: 1,
            reshape: ReshapeConfig::default(),
            uniform_weights: Vec::new(),
            smoothing: 0.1,
            hidden: vec![64, 32],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, modalities: usize) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", format!("must be positive, got {}", self.lr)));
        }
        self.reshape.validate()?;
        if !self.uniform_weights.is_empty() && self.uniform_weights.len() != modalities {
            return Err(Error::config(
                "uniform_weights",
                format!("expected {modalities} entries, got {}", self.uniform_weights.len()),
            ));
        }
        if self.uniform_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::config("uniform_weights", "must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.smoothing) {
            return Err(Error::config("smoothing", "must lie in [0, 1)"));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::config("hidden", "need at least one positive width"));
        }
        Ok(())
    }

    fn weights(&self, modalities: usize) -> Vec<f64> {
        if self.uniform_weights.is_empty() {
            vec![1.0; modalities]
        } else {
            self.uniform_weights.clone()
        }
    }
}

/// How unimodal targets are built from the current batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TargetRule {
    OneHot,
    /// Gated cross-modal mixture `ξ·d + (1−ξ)·y`.
    Reshape,
    /// The other modality's plain softmax, no gate.
    Distill,
    /// Gated, but the active target is `d` alone.
    VanillaReshape,
    /// `1 − s` on the true class, `s / (C − 1)` on each other class.
    Smooth(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Objective {
    Targeted,
    Joint { weights: Vec<f64> },
}

/// Per-batch step a method resolves to.
#[derive(Debug, Clone, PartialEq)]
pub struct StepPlan {
    pub objective: Objective,
    pub targets: TargetRule,
}

pub fn variant_dispatch(cfg: &TrainConfig, modalities: usize) -> StepPlan {
    use MethodKind::*;
    let joint = |w: Vec<f64>| Objective::Joint { weights: w };
    let weights = cfg.weights(modalities);
    let (objective, targets) = match cfg.method {
        Baseline => (joint(vec![0.0; modalities]), TargetRule::OneHot),
        UniformBaseline => (joint(weights), TargetRule::OneHot),
        Bmlr => (Objective::Targeted, TargetRule::Reshape),
        OnlyReshape => (joint(weights), TargetRule::Reshape),
        OnlyTpo => (Objective::Targeted, TargetRule::OneHot),
        UniDistill => (Objective::Targeted, TargetRule::Distill),
        VanillaReshape => (Objective::Targeted, TargetRule::VanillaReshape),
        UniformReshaping => (joint(weights), TargetRule::Smooth(cfg.smoothing)),
    };
    StepPlan { objective, targets }
}

/// Which losses a targeted step applies. Both on in normal training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossMask {
    pub fused: bool,
    pub unimodal: bool,
}

impl Default for LossMask {
    fn default() -> Self {
        Self {
            fused: true,
            unimodal: true,
        }
    }
}

/// Separate Adam state per parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupOptimizers {
    states: BTreeMap<Group, AdamState>,
}

impl GroupOptimizers {
    pub fn new(model: &Model, config: AdamConfig) -> Self {
        let params = model.params();
        Self {
            states: params
                .groups()
                .into_iter()
                .map(|g| (g, AdamState::new(config, params.group_vector(g).len())))
                .collect(),
        }
    }

    pub fn state(&self, group: Group) -> Option<&AdamState> {
        self.states.get(&group)
    }

    fn apply(&mut self, model: &mut Model, grads: &crate::model::Params, groups: &[Group]) -> Result<()> {
        for &g in groups {
            let state = self.states.get_mut(&g).expect("group registered");
            let mut values = model.params().group_vector(g);
            state.step(&mut values, &grads.group_vector(g))?;
            model.params_mut().set_group_vector(g, &values)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub loss_fused: f64,
    pub loss_modality: Vec<f64>,
    pub reshape_counts: Vec<usize>,
    pub decisions: Vec<ReshapeDecision>,
}

/// Mean cross-entropy of aligned targets and predictions.
pub fn mean_loss(targets: &[LabelDistribution], predicted: &[&LabelDistribution]) -> Result<f64> {
    if targets.is_empty() || targets.len() != predicted.len() {
        return Err(Error::shape("loss batch", targets.len(), predicted.len()));
    }
    let total = targets
        .iter()
        .zip(predicted)
        .map(|(t, p)| cross_entropy(t, p))
        .sum::<Result<f64>>()?;
    Ok(total / targets.len() as f64)
}

pub fn unimodal_loss(reshaped: &[LabelDistribution], probs: &[&LabelDistribution]) -> Result<f64> {
    mean_loss(reshaped, probs)
}

pub fn multimodal_loss(labels: &[usize], probs: &[&LabelDistribution]) -> Result<f64> {
    let c = probs.first().map_or(0, |p| p.len());
    let ys: Vec<_> = labels.iter().map(|&y| LabelDistribution::one_hot(y, c)).collect();
    mean_loss(&ys, probs)
}

fn smooth_label(class: usize, classes: usize, s: f64) -> LabelDistribution {
    if s == 0.0 {
        return LabelDistribution::one_hot(class, classes);
    }
    let off = s / (classes - 1) as f64;
    let mut p = vec![off; classes];
    p[class] = 1.0 - s;
    LabelDistribution::from_mixture(p)
}

/// Unimodal targets `[modality][sample]`, plus the reshaping decisions for
/// the gated rules.
pub fn build_targets(
    trace: &ForwardTrace,
    labels: &[usize],
    rule: TargetRule,
    cfg: &ReshapeConfig,
) -> Result<(Vec<Vec<LabelDistribution>>, Vec<ReshapeDecision>)> {
    let m = trace.samples[0].unimodal_probs.len();
    let c = trace.samples[0].probs.len();
    let per_sample: Vec<Vec<LabelDistribution>>;
    let mut decisions = Vec::new();
    match rule {
        TargetRule::OneHot => {
            per_sample = labels
                .iter()
                .map(|&y| vec![LabelDistribution::one_hot(y, c); m])
                .collect();
        }
        TargetRule::Smooth(s) => {
            per_sample = labels.iter().map(|&y| vec![smooth_label(y, c, s); m]).collect();
        }
        TargetRule::Reshape | TargetRule::VanillaReshape => {
            decisions = reshape_batch(trace, labels, cfg)?;
            per_sample = decisions
                .iter()
                .map(|d| {
                    d.modalities
                        .iter()
                        .map(|md| match (&md.target, rule) {
                            (Some(t), TargetRule::VanillaReshape) => t.clone(),
                            _ => md.label.clone(),
                        })
                        .collect()
                })
                .collect();
        }
        TargetRule::Distill => {
            per_sample = trace
                .samples
                .iter()
                .map(|s| {
                    let own: Vec<LabelDistribution> =
                        s.unimodal_logits.iter().map(|l| softmax(l)).collect::<Result<_>>()?;
                    Ok((0..m)
                        .map(|u| {
                            if m == 2 {
                                own[1 - u].clone()
                            } else {
                                // mean of the other modalities' predictions
                                let mut acc = vec![0.0; c];
                                for (v, p) in own.iter().enumerate().filter(|(v, _)| *v != u) {
                                    let _ = v;
                                    for (a, q) in acc.iter_mut().zip(p.probs()) {
                                        *a += q / (m - 1) as f64;
                                    }
                                }
                                LabelDistribution::from_mixture(acc)
                            }
                        })
                        .collect())
                })
                .collect::<Result<_>>()?;
        }
    }
    // transpose to [modality][sample]
    let targets = (0..m)
        .map(|u| per_sample.iter().map(|row| row[u].clone()).collect())
        .collect();
    Ok((targets, decisions))
}

fn check_finite_loss(values: &[f64]) -> Result<()> {
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::Diverged {
            epoch: 0,
            step: 0,
            detail: format!("non-finite loss {v}"),
        });
    }
    Ok(())
}

struct Prepared {
    trace: ForwardTrace,
    labels: Vec<usize>,
    targets: Vec<Vec<LabelDistribution>>,
    decisions: Vec<ReshapeDecision>,
    loss_fused: f64,
    loss_modality: Vec<f64>,
}

fn prepare(model: &Model, batch: &[&Sample], rule: TargetRule, cfg: &ReshapeConfig) -> Result<Prepared> {
    let trace = model.forward(batch.iter().map(|s| s.inputs.as_slice()))?;
    let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
    // targets are computed from the forward values only; nothing flows back
    // into the modality that produced them
    let (targets, decisions) = build_targets(&trace, &labels, rule, cfg)?;
    let probs: Vec<&LabelDistribution> = trace.samples.iter().map(|s| &s.probs).collect();
    let loss_fused = multimodal_loss(&labels, &probs)?;
    let loss_modality = (0..model.modalities())
        .map(|u| {
            let pu: Vec<_> = trace.samples.iter().map(|s| &s.unimodal_probs[u]).collect();
            unimodal_loss(&targets[u], &pu)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut all = loss_modality.clone();
    all.push(loss_fused);
    check_finite_loss(&all)?;
    Ok(Prepared {
        trace,
        labels,
        targets,
        decisions,
        loss_fused,
        loss_modality,
    })
}

fn fused_head(p: &Prepared) -> Vec<Vec<f64>> {
    let n = p.labels.len() as f64;
    p.trace
        .samples
        .iter()
        .zip(&p.labels)
        .map(|(s, &y)| {
            s.probs
                .probs()
                .iter()
                .enumerate()
                .map(|(k, q)| (q - if k == y { 1.0 } else { 0.0 }) / n)
                .collect()
        })
        .collect()
}

fn unimodal_heads(p: &Prepared, weights: &[f64]) -> Vec<Vec<Vec<f64>>> {
    let n = p.labels.len() as f64;
    weights
        .iter()
        .enumerate()
        .map(|(u, &w)| {
            p.trace
                .samples
                .iter()
                .zip(&p.targets[u])
                .map(|(s, t)| {
                    s.unimodal_probs[u]
                        .probs()
                        .iter()
                        .zip(t.probs())
                        .map(|(q, t)| w * (q - t) / n)
                        .collect()
                })
                .collect()
        })
        .collect()
}

fn metrics_of(p: Prepared, modalities: usize) -> StepMetrics {
    StepMetrics {
        reshape_counts: metrics::reshape_counts(&p.decisions, modalities),
        loss_fused: p.loss_fused,
        loss_modality: p.loss_modality,
        decisions: p.decisions,
    }
}

/// Targeted parameter optimization: each encoder group from its unimodal
/// loss alone, the decision group from the fused loss alone. Groups whose
/// loss is masked out are not stepped.
pub fn tpo_step(
    model: &mut Model,
    opt: &mut GroupOptimizers,
    batch: &[&Sample],
    rule: TargetRule,
    cfg: &ReshapeConfig,
    mask: LossMask,
) -> Result<StepMetrics> {
    let m = model.modalities();
    let prepared = prepare(model, batch, rule, cfg)?;
    let heads = HeadGrads {
        fused: mask.fused.then(|| fused_head(&prepared)),
        unimodal: mask.unimodal.then(|| unimodal_heads(&prepared, &vec![1.0; m])),
    };
    let grads = model.backward(&prepared.trace, &heads, Routing::targeted())?;
    let mut groups = Vec::new();
    if mask.unimodal {
        groups.extend((0..m).map(Group::Modality));
    }
    if mask.fused {
        groups.push(Group::Decision);
    }
    opt.apply(model, &grads, &groups)?;
    Ok(metrics_of(prepared, m))
}

/// `L⁰ + Σ wᵘ Lᵘ` on every parameter.
pub fn joint_step(
    model: &mut Model,
    opt: &mut GroupOptimizers,
    batch: &[&Sample],
    rule: TargetRule,
    weights: &[f64],
    cfg: &ReshapeConfig,
) -> Result<StepMetrics> {
    let m = model.modalities();
    if weights.len() != m {
        return Err(Error::shape("unimodal weights", m, weights.len()));
    }
    let prepared = prepare(model, batch, rule, cfg)?;
    let heads = HeadGrads {
        fused: Some(fused_head(&prepared)),
        unimodal: weights.iter().any(|&w| w != 0.0).then(|| unimodal_heads(&prepared, weights)),
    };
    let grads = model.backward(&prepared.trace, &heads, Routing::joint())?;
    let groups = model.params().groups();
    opt.apply(model, &grads, &groups)?;
    Ok(metrics_of(prepared, m))
}

impl StepPlan {
    pub fn step(
        &self,
        model: &mut Model,
        opt: &mut GroupOptimizers,
        batch: &[&Sample],
        cfg: &ReshapeConfig,
    ) -> Result<StepMetrics> {
        match &self.objective {
            Objective::Targeted => tpo_step(model, opt, batch, self.targets, cfg, LossMask::default()),
            Objective::Joint { weights } => joint_step(model, opt, batch, self.targets, weights, cfg),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub modality_accuracy: Vec<f64>,
    pub ratio: Option<f64>,
    pub loss_fused: f64,
    pub loss_modality: Vec<f64>,
}

pub fn evaluate(model: &Model, samples: &[&Sample]) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::Invalid("cannot evaluate an empty split".into()));
    }
    let trace = model.forward(samples.iter().map(|s| s.inputs.as_slice()))?;
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let probs: Vec<LabelDistribution> = trace.samples.iter().map(|s| s.probs.clone()).collect();
    let accuracy = metrics::accuracy(&probs, &labels)?;
    let mut modality_accuracy = Vec::new();
    let mut loss_modality = Vec::new();
    for u in 0..model.modalities() {
        let pu: Vec<LabelDistribution> = trace.samples.iter().map(|s| s.unimodal_probs[u].clone()).collect();
        modality_accuracy.push(metrics::accuracy(&pu, &labels)?);
        loss_modality.push(multimodal_loss(&labels, &pu.iter().collect::<Vec<_>>())?);
    }
    Ok(Evaluation {
        accuracy,
        ratio: metrics::modality_ratio(modality_accuracy[0], modality_accuracy[1]),
        modality_accuracy,
        loss_fused: multimodal_loss(&labels, &probs.iter().collect::<Vec<_>>())?,
        loss_modality,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub method: MethodKind,
    pub seed: u64,
    pub modalities: usize,
    pub train_size: usize,
    pub rows: Vec<MetricsRow>,
}

impl RunRecord {
    pub fn last(&self) -> Option<&MetricsRow> {
        self.rows.last()
    }

    pub fn to_csv(&self) -> String {
        metrics::to_csv(&self.rows, self.modalities)
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub record: RunRecord,
    pub model: Model,
}

/// Training stopped early; `partial` holds every completed epoch.
#[derive(Debug)]
pub struct TrainAbort {
    pub partial: RunRecord,
    pub error: Error,
}

impl fmt::Display for TrainAbort {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} (after {} completed epochs)", self.error, self.partial.rows.len())
    }
}

impl std::error::Error for TrainAbort {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

pub fn architecture(cfg: &TrainConfig, dataset: &Dataset) -> Architecture {
    Architecture {
        input_dims: dataset.dims.clone(),
        hidden: cfg.hidden.clone(),
        classes: dataset.classes,
        fusion: cfg.fusion,
    }
}

/// Runs the configured method. Deterministic for a fixed config and dataset.
/// When `diagnostics` is given, one CSV row per (epoch, sample, modality) is
/// written for the reshaping decisions.
pub fn train(
    cfg: &TrainConfig,
    dataset: &Dataset,
    mut diagnostics: Option<&mut dyn Write>,
) -> std::result::Result<TrainOutcome, TrainAbort> {
    let m = dataset.modalities();
    let train_set = dataset.train();
    let test_set = dataset.test();
    let mut record = RunRecord {
        method: cfg.method,
        seed: cfg.seed,
        modalities: m,
        train_size: train_set.len(),
        rows: Vec::new(),
    };
    macro_rules! bail {
        ($e:expr) => {
            match $e {
                Ok(v) => v,
                Err(error) => return Err(TrainAbort { partial: record, error }),
            }
        };
    }
    bail!(cfg.validate(m));
    if train_set.is_empty() || test_set.is_empty() {
        bail!(Err(Error::Invalid("dataset needs non-empty train and test splits".into())));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = bail!(Model::new(&architecture(cfg, dataset), &mut rng));
    let mut opt = GroupOptimizers::new(&model, AdamConfig::with_lr(cfg.lr));
    let plan = variant_dispatch(cfg, m);
    if let Some(out) = diagnostics.as_deref_mut() {
        bail!(writeln!(out, "{}", crate::reshaper::DIAGNOSTICS_HEADER).map_err(|e| Error::io("diagnostics", e)));
    }

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_fused = 0.0;
        let mut loss_modality = vec![0.0; m];
        let mut counts = vec![0usize; m];
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| train_set[i]).collect();
            let metrics = match plan.step(&mut model, &mut opt, &batch, &cfg.reshape) {
                Ok(v) => v,
                Err(e) => {
                    let error = match e {
                        Error::Diverged { detail, .. } => Error::Diverged { epoch, step, detail },
                        Error::NonFinite { context, index } => Error::Diverged {
                            epoch,
                            step,
                            detail: format!("non-finite value in {context} at index {index}"),
                        },
                        other => other,
                    };
                    return Err(TrainAbort { partial: record, error });
                }
            };
            let w = batch.len() as f64;
            loss_fused += metrics.loss_fused * w;
            for u in 0..m {
                loss_modality[u] += metrics.loss_modality[u] * w;
                counts[u] += metrics.reshape_counts[u];
            }
            if let Some(out) = diagnostics.as_deref_mut() {
                bail!(write_diagnostics(out, epoch, chunk, &metrics.decisions).map_err(|e| Error::io("diagnostics", e)));
            }
        }
        let n = train_set.len() as f64;
        let eval = bail!(evaluate(&model, &test_set));
        record.rows.push(MetricsRow {
            epoch,
            train_loss_fused: loss_fused / n,
            train_loss_modality: loss_modality.iter().map(|l| l / n).collect(),
            accuracy: eval.accuracy,
            modality_accuracy: eval.modality_accuracy,
            ratio: eval.ratio,
            reshape_counts: counts,
        });
    }
    Ok(TrainOutcome { record, model })
}
