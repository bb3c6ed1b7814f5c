//! Per-sample label-space reshaping.
//!
//! For each sample the true-class confidences of the modalities are compared
//! (`λ`). The more confident modality, when it is not too far ahead
//! (`1 < λ < 1/β`), has its one-hot target mixed with a tempered prediction of
//! the other modality. The weaker modality keeps the original label.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ForwardTrace;
use crate::numeric::{clamp_temperature, tempered_softmax, LabelDistribution, Matrix};

pub const DEFAULT_EPS_BETA: f64 = 1e-6;
pub const DEFAULT_EPS_DIV: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReshapeConfig {
    /// Temperature sensitivity: `T = α · λ_other`.
    pub alpha: f64,
    /// Activation threshold; reshaping needs `λ < 1/β`.
    pub beta: f64,
    /// Stand-in for `β = 0`.
    #[serde(default = "default_eps_beta")]
    pub eps_beta: f64,
    /// Floor on the confidences in the `λ` ratio.
    #[serde(default = "default_eps_div")]
    pub eps_div: f64,
}

fn default_eps_beta() -> f64 {
    DEFAULT_EPS_BETA
}

fn default_eps_div() -> f64 {
    DEFAULT_EPS_DIV
}

impl Default for ReshapeConfig {
    fn default() -> Self {
        Self::new(1.0, 0.2)
    }
}

impl ReshapeConfig {
    pub fn new(alpha: f64, beta: f64) -> Self {
        Self {
            alpha,
            beta,
            eps_beta: DEFAULT_EPS_BETA,
            eps_div: DEFAULT_EPS_DIV,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::config("alpha", format!("must be positive, got {}", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::config("beta", format!("must lie in [0, 1], got {}", self.beta)));
        }
        for (name, v) in [("eps_beta", self.eps_beta), ("eps_div", self.eps_div)] {
            if !(v > 0.0 && v <= 1e-4) {
                return Err(Error::config(name, format!("must lie in (0, 1e-4], got {v}")));
            }
        }
        Ok(())
    }

    pub fn effective_beta(&self) -> f64 {
        if self.beta == 0.0 {
            self.eps_beta
        } else {
            self.beta
        }
    }

    pub fn intensity(&self, lambda: f64) -> f64 {
        reshaping_intensity(lambda, self.effective_beta())
    }
}

/// `λᵃ = yᵀpᵃ / yᵀpᵛ`, both confidences floored at `eps_div`.
/// `λᵛ` is the reciprocal.
pub fn confidence_discrepancy(
    y: &LabelDistribution,
    pa: &LabelDistribution,
    pv: &LabelDistribution,
    eps_div: f64,
) -> Result<f64> {
    let class = y
        .hot_index()
        .ok_or_else(|| Error::Invalid("reshaping needs a one-hot label".into()))?;
    if pa.len() != y.len() || pv.len() != y.len() {
        return Err(Error::shape("confidence discrepancy", y.len(), pa.len().max(pv.len())));
    }
    Ok(lambda_from_confidences(pa.probs()[class], pv.probs()[class], eps_div))
}

fn lambda_from_confidences(own: f64, other: f64, eps_div: f64) -> f64 {
    own.max(eps_div) / other.max(eps_div)
}

/// Tempered prediction of the complementary modality, `T = α · λ_other`.
pub fn distill_target(other_logits: &[f64], alpha: f64, lambda_other: f64) -> Result<LabelDistribution> {
    if alpha.is_nan() || alpha <= 0.0 || lambda_other.is_nan() || lambda_other <= 0.0 {
        return Err(Error::Invalid(format!(
            "alpha ({alpha}) and lambda ({lambda_other}) must be positive"
        )));
    }
    tempered_softmax(other_logits, alpha * lambda_other)
}

/// `D = d · 1ᵀ`
pub fn reshaping_matrix(d: &LabelDistribution) -> Matrix {
    let c = d.len();
    let mut m = Matrix::zeros(c, c);
    for (r, &p) in d.probs().iter().enumerate() {
        for col in 0..c {
            m.set(r, col, p);
        }
    }
    m
}

/// `ξ = 1 − 1/λ` when `1 < λ < 1/β`, else 0. `beta` must already be positive.
pub fn reshaping_intensity(lambda: f64, beta: f64) -> f64 {
    if 1.0 < lambda && lambda < 1.0 / beta {
        1.0 - 1.0 / lambda
    } else {
        0.0
    }
}

/// `ξ·d + (1−ξ)·y`. With `ξ = 0` the label is returned unchanged.
pub fn reshape_label(y: &LabelDistribution, d: &LabelDistribution, xi: f64) -> Result<LabelDistribution> {
    if !(0.0..1.0).contains(&xi) {
        return Err(Error::Invalid(format!("intensity {xi} outside [0, 1)")));
    }
    if y.len() != d.len() {
        return Err(Error::shape("reshape label", y.len(), d.len()));
    }
    if xi == 0.0 {
        return Ok(y.clone());
    }
    Ok(LabelDistribution::from_mixture(
        y.probs()
            .iter()
            .zip(d.probs())
            .map(|(yk, dk)| xi * dk + (1.0 - xi) * yk)
            .collect(),
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModalityDecision {
    pub lambda: f64,
    pub active: bool,
    /// Clamped temperature that the distillation target uses (or would use).
    pub temperature: f64,
    pub intensity: f64,
    /// Cross-modal target, built only when active.
    pub target: Option<LabelDistribution>,
    pub label: LabelDistribution,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReshapeDecision {
    pub class: usize,
    pub modalities: Vec<ModalityDecision>,
}

impl ReshapeDecision {
    pub fn active_count(&self) -> usize {
        self.modalities.iter().filter(|m| m.active).count()
    }
}

/// Strongest and weakest modality by true-class confidence. Ties go to the
/// lowest index on both sides.
pub fn select_trimodal_pair(confidences: &[f64]) -> Result<(usize, usize)> {
    if confidences.len() < 3 {
        return Err(Error::Invalid(format!(
            "strong/weak pairing needs at least three modalities, got {}",
            confidences.len()
        )));
    }
    let mut strong = 0;
    let mut weak = 0;
    for (u, &c) in confidences.iter().enumerate().skip(1) {
        if c > confidences[strong] {
            strong = u;
        }
        if c < confidences[weak] {
            weak = u;
        }
    }
    Ok((strong, weak))
}

/// Reshaped targets for every sample of a traced batch.
///
/// Two modalities use the pairwise rule directly. With three or more, only
/// the strongest/weakest pair is compared and every other modality keeps its
/// one-hot label.
pub fn reshape_batch(trace: &ForwardTrace, labels: &[usize], cfg: &ReshapeConfig) -> Result<Vec<ReshapeDecision>> {
    if trace.len() != labels.len() {
        return Err(Error::shape("reshape batch labels", trace.len(), labels.len()));
    }
    trace
        .samples
        .iter()
        .zip(labels)
        .map(|(s, &class)| {
            let classes = s.probs.len();
            if class >= classes {
                return Err(Error::Invalid(format!("label {class} out of range {classes}")));
            }
            let y = LabelDistribution::one_hot(class, classes);
            let m = s.unimodal_probs.len();
            let conf: Vec<f64> = s.unimodal_probs.iter().map(|p| p.probs()[class]).collect();

            // (λᵘ, index of the partner modality) per modality
            let mut pairing: Vec<(f64, Option<usize>)> = vec![(1.0, None); m];
            if m == 2 {
                let la = lambda_from_confidences(conf[0], conf[1], cfg.eps_div);
                pairing[0] = (la, Some(1));
                pairing[1] = (1.0 / la, Some(0));
            } else {
                let (strong, weak) = select_trimodal_pair(&conf)?;
                if strong != weak {
                    let ls = lambda_from_confidences(conf[strong], conf[weak], cfg.eps_div);
                    pairing[strong] = (ls, Some(weak));
                    pairing[weak] = (1.0 / ls, Some(strong));
                }
            }

            let modalities = (0..m)
                .map(|u| {
                    let (lambda, partner) = pairing[u];
                    let lambda_other = partner.map_or(1.0, |p| pairing[p].0);
                    let temperature = clamp_temperature(cfg.alpha * lambda_other);
                    let intensity = if partner.is_some() { cfg.intensity(lambda) } else { 0.0 };
                    if intensity > 0.0 {
                        let other = partner.expect("active modality has a partner");
                        let d = distill_target(&s.unimodal_logits[other], cfg.alpha, lambda_other)?;
                        let label = reshape_label(&y, &d, intensity)?;
                        Ok(ModalityDecision {
                            lambda,
                            active: true,
                            temperature,
                            intensity,
                            target: Some(d),
                            label,
                        })
                    } else {
                        Ok(ModalityDecision {
                            lambda,
                            active: false,
                            temperature,
                            intensity: 0.0,
                            target: None,
                            label: y.clone(),
                        })
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(ReshapeDecision { class, modalities })
        })
        .collect()
}

pub const DIAGNOSTICS_HEADER: &str = "epoch,sample,modality,lambda,intensity,temperature,active";

/// One CSV row per (sample, modality).
pub fn write_diagnostics<W: Write + ?Sized>(
    out: &mut W,
    epoch: usize,
    sample_ids: &[usize],
    decisions: &[ReshapeDecision],
) -> std::io::Result<()> {
    for (&id, dec) in sample_ids.iter().zip(decisions) {
        for (u, m) in dec.modalities.iter().enumerate() {
            writeln!(
                out,
                "{epoch},{id},{u},{},{},{},{}",
                crate::metrics::fmt_sig6(m.lambda),
                crate::metrics::fmt_sig6(m.intensity),
                crate::metrics::fmt_sig6(m.temperature),
                u8::from(m.active)
            )?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Affine, DecisionParams, Encoder, FusionKind, Model, Params};
    use proptest::prelude::*;

    fn dist(v: &[f64]) -> LabelDistribution {
        LabelDistribution::new(v.to_vec()).unwrap()
    }

    #[test]
    fn confidence_discrepancy_examples() {
        let y = LabelDistribution::one_hot(0, 3);
        let p = dist(&[0.2, 0.5, 0.3]);
        assert_eq!(confidence_discrepancy(&y, &p, &p, 1e-8).unwrap(), 1.0);

        let pa = dist(&[0.6, 0.3, 0.1]);
        let pv = dist(&[0.3, 0.4, 0.3]);
        let l = confidence_discrepancy(&y, &pa, &pv, 1e-8).unwrap();
        assert!((l - 2.0).abs() < 1e-12);

        let pv0 = dist(&[0.0, 0.5, 0.5]);
        let l = confidence_discrepancy(&y, &pa, &pv0, 1e-8).unwrap();
        assert!((l - 0.6 / 1e-8).abs() < 1e-3);
        assert_eq!(reshaping_intensity(l, 0.2), 0.0);

        assert!(confidence_discrepancy(&dist(&[0.5, 0.5, 0.0]), &pa, &pv, 1e-8).is_err());
    }

    #[test]
    fn distill_target_examples() {
        let logits = [0.4, -1.0, 2.5];
        assert_eq!(
            distill_target(&logits, 0.5, 2.0).unwrap(),
            crate::numeric::softmax(&logits).unwrap()
        );

        // T = 2 → softmax([1, 0, 0]) = [e, 1, 1] / (e + 2)
        let e = 1f64.exp();
        let d = distill_target(&[2.0, 0.0, 0.0], 1.0, 2.0).unwrap();
        let expect = [e / (e + 2.0), 1.0 / (e + 2.0), 1.0 / (e + 2.0)];
        for (a, b) in d.probs().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((d.probs()[0] - 0.57612).abs() < 1e-5);
        assert!((d.probs()[1] - 0.21194).abs() < 1e-5);

        for t in [1e-3, 0.7, 50.0] {
            let d = distill_target(&[3.0; 4], t, 1.0).unwrap();
            assert_eq!(d, LabelDistribution::uniform(4));
        }
        assert!(distill_target(&[f64::NAN, 0.0], 1.0, 1.0).is_err());
        assert!(distill_target(&[1.0, 0.0], 0.0, 1.0).is_err());
    }

    #[test]
    fn reshaping_matrix_examples() {
        let d = dist(&[0.5, 0.3, 0.2]);
        let m = reshaping_matrix(&d);
        for c in 0..3 {
            assert_eq!(m.column(c), [0.5, 0.3, 0.2]);
        }
        assert_eq!(m.matvec(&[1.0, 0.0, 0.0]).unwrap(), [0.5, 0.3, 0.2]);
        let q = m.matvec(&[0.2, 0.3, 0.5]).unwrap();
        for (a, b) in q.iter().zip(d.probs()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn reshaping_intensity_examples() {
        assert_eq!(reshaping_intensity(2.0, 0.4), 0.5);
        assert_eq!(reshaping_intensity(1.0, 0.4), 0.0);
        assert_eq!(reshaping_intensity(3.0, 0.4), 0.0);
        assert_eq!(reshaping_intensity(0.5, 0.4), 0.0);
        // upper boundary λ = 1/β is excluded
        assert_eq!(reshaping_intensity(2.0, 0.5), 0.0);

        let cfg = ReshapeConfig::new(1.0, 0.0);
        assert_eq!(cfg.effective_beta(), DEFAULT_EPS_BETA);
        assert_eq!(cfg.intensity(1e5), 1.0 - 1e-5);
        assert_eq!(ReshapeConfig::new(1.0, 1.0).intensity(1.5), 0.0);
    }

    #[test]
    fn reshape_label_examples() {
        let y = LabelDistribution::one_hot(0, 3);
        let d = dist(&[0.5, 0.3, 0.2]);
        assert_eq!(reshape_label(&y, &d, 0.0).unwrap(), y);
        let r = reshape_label(&y, &d, 0.5).unwrap();
        for (a, b) in r.probs().iter().zip([0.75, 0.15, 0.10]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(reshape_label(&y, &d, 1.0).is_err());
    }

    #[test]
    fn trimodal_pair_examples() {
        assert_eq!(select_trimodal_pair(&[0.9, 0.5, 0.2]).unwrap(), (0, 2));
        assert_eq!(select_trimodal_pair(&[0.4, 0.4, 0.4]).unwrap(), (0, 0));
        assert_eq!(select_trimodal_pair(&[0.3, 0.8, 0.3]).unwrap(), (1, 0));
        assert!(select_trimodal_pair(&[0.3, 0.8]).is_err());
    }

    fn identity_model(m: usize) -> Model {
        let enc = Encoder {
            layers: vec![Affine {
                weight: Matrix::identity(3),
                bias: vec![0.0; 3],
            }],
        };
        Model::from_params(Params {
            encoders: vec![enc; m],
            probes: vec![],
            decision: DecisionParams {
                kind: FusionKind::Concat,
                classifier: vec![Matrix::identity(3); m],
                bias: vec![0.0; 3],
                film: None,
                gate: None,
            },
        })
        .unwrap()
    }

    #[test]
    fn identical_heads_never_reshape() {
        let model = identity_model(2);
        let inputs = [vec![vec![1.0, 0.0, 2.0], vec![1.0, 0.0, 2.0]],
            vec![vec![0.0, 3.0, 0.0], vec![0.0, 3.0, 0.0]]];
        let trace = model.forward(inputs.iter().map(|v| v.as_slice())).unwrap();
        let decisions = reshape_batch(&trace, &[2, 0], &ReshapeConfig::default()).unwrap();
        for (dec, class) in decisions.iter().zip([2, 0]) {
            for m in &dec.modalities {
                assert_eq!(m.lambda, 1.0);
                assert!(!m.active);
                assert_eq!(m.label, LabelDistribution::one_hot(class, 3));
            }
        }
    }

    #[test]
    fn hand_batch_two_modalities() {
        let model = identity_model(2);
        // identity blocks, zero bias: unimodal logits equal x; class 0
        // a: [2, 0, 0]/1 → strong; v: [0, 0, 0] → uniform
        let inputs = [vec![vec![2.0, 0.0, 0.0], vec![0.0, 0.0, 0.0]]];
        let trace = model.forward(inputs.iter().map(|v| v.as_slice())).unwrap();
        let e2 = 2f64.exp();
        let pa0 = e2 / (e2 + 2.0);
        let lambda_a = pa0 / (1.0 / 3.0);
        let cfg = ReshapeConfig::new(1.0, 0.2);
        let dec = reshape_batch(&trace, &[0], &cfg).unwrap();
        let a = &dec[0].modalities[0];
        let v = &dec[0].modalities[1];
        assert!((a.lambda - lambda_a).abs() < 1e-12);
        assert!((v.lambda - 1.0 / lambda_a).abs() < 1e-12);
        assert!(a.active && !v.active);
        assert!((a.intensity - (1.0 - 1.0 / lambda_a)).abs() < 1e-12);
        // target from v's uniform logits is uniform at any temperature
        assert_eq!(a.target.as_ref().unwrap(), &LabelDistribution::uniform(3));
        let xi = a.intensity;
        let expect = [xi / 3.0 + 1.0 - xi, xi / 3.0, xi / 3.0];
        for (p, q) in a.label.probs().iter().zip(expect) {
            assert!((p - q).abs() < 1e-12);
        }
        assert_eq!(v.label, LabelDistribution::one_hot(0, 3));
    }

    #[test]
    fn trimodal_batch_keeps_intermediate_one_hot() {
        let model = identity_model(3);
        let inputs = [vec![vec![3.0, 0.0, 0.0], vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 0.0]]];
        let trace = model.forward(inputs.iter().map(|v| v.as_slice())).unwrap();
        let dec = reshape_batch(&trace, &[0], &ReshapeConfig::new(1.0, 0.0)).unwrap();
        let m = &dec[0].modalities;
        assert!(m[0].active);
        assert!(!m[1].active && m[1].lambda == 1.0);
        assert!(!m[2].active);
        assert!((m[0].lambda * m[2].lambda - 1.0).abs() < 1e-12);
        assert_eq!(m[1].label, LabelDistribution::one_hot(0, 3));
    }

    proptest! {
        #[test]
        fn gate_and_monotonicity(l1 in 0.01f64..20.0, l2 in 0.01f64..20.0, beta in 0.01f64..=1.0) {
            let x1 = reshaping_intensity(l1, beta);
            prop_assert_eq!(x1 > 0.0, 1.0 < l1 && l1 < 1.0 / beta);
            let x2 = reshaping_intensity(l2, beta);
            if x1 > 0.0 && x2 > 0.0 && l1 < l2 {
                prop_assert!(x1 < x2);
            }
        }

        #[test]
        fn mutual_exclusivity(ca in 0.0f64..1.0, cv in 0.0f64..1.0, beta in 0.0f64..=1.0) {
            let cfg = ReshapeConfig::new(1.0, beta);
            let la = lambda_from_confidences(ca, cv, cfg.eps_div);
            let active = [cfg.intensity(la) > 0.0, cfg.intensity(1.0 / la) > 0.0];
            prop_assert!(!(active[0] && active[1]));
        }
    }
}
