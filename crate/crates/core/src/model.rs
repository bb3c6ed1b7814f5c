//! Multimodal classifier: one MLP encoder per modality, a fusion decision
//! layer, and per-modality probe logits.
//!
//! Parameters are partitioned into one group per modality (encoder plus its
//! probe head, if any) and a single decision group. `backward` takes a
//! [`Routing`] that says which loss head may write into which group.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{
    affine_backward, affine_forward, relu_backward, relu_forward, sigmoid, softmax,
    LabelDistribution, Matrix,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionKind {
    Concat,
    Sum,
    Film,
    Gated,
}

impl FusionKind {
    pub const ALL: [FusionKind; 4] = [Self::Concat, Self::Sum, Self::Film, Self::Gated];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Concat => "concat",
            Self::Sum => "sum",
            Self::Film => "film",
            Self::Gated => "gated",
        }
    }

    /// Film and gated heads are nonlinear in the features and use probe heads
    /// for the per-modality logits.
    pub fn uses_probes(self) -> bool {
        matches!(self, Self::Film | Self::Gated)
    }
}

impl fmt::Display for FusionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for FusionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown fusion kind `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Affine {
    pub fn zeros(out: usize, inp: usize) -> Self {
        Self {
            weight: Matrix::zeros(out, inp),
            bias: vec![0.0; out],
        }
    }

    fn glorot<R: Rng + ?Sized>(out: usize, inp: usize, rng: &mut R) -> Self {
        Self {
            weight: Matrix::glorot(out, inp, rng),
            bias: vec![0.0; out],
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        affine_forward(x, &self.weight, &self.bias)
    }

    fn zeros_like(&self) -> Self {
        Self::zeros(self.weight.rows(), self.weight.cols())
    }

    fn accumulate(&mut self, upstream: &[f64], input: &[f64]) {
        self.weight.add_outer(upstream, input, 1.0);
        add_into(&mut self.bias, upstream, 1.0);
    }
}

/// Affine layers with ReLU between them; the last layer is linear.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub layers: Vec<Affine>,
}

impl Encoder {
    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.cols()
    }

    pub fn feature_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.rows())
    }

    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.encode_cached(x)?.0)
    }

    fn encode_cached(&self, x: &[f64]) -> Result<(Vec<f64>, EncoderCache)> {
        if x.len() != self.input_dim() {
            return Err(Error::shape("encoder input", self.input_dim(), x.len()));
        }
        let mut cache = EncoderCache {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len()),
        };
        let mut h = x.to_vec();
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let a = layer.forward(&h)?;
            cache.inputs.push(h);
            h = if k < last { relu_forward(&a)? } else { a.clone() };
            cache.pre.push(a);
        }
        Ok((h, cache))
    }

    fn backward_into(&self, dz: &[f64], cache: &EncoderCache, grads: &mut Encoder) -> Result<()> {
        let mut upstream = dz.to_vec();
        for k in (0..self.layers.len()).rev() {
            let g = affine_backward(&upstream, &cache.inputs[k], &self.layers[k].weight)?;
            grads.layers[k].accumulate(&upstream, &cache.inputs[k]);
            if k > 0 {
                upstream = relu_backward(&g.input, &cache.pre[k - 1])?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct EncoderCache {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

/// FiLM conditioning: modality 0 produces a scale and a shift applied to
/// modality 1's features.
#[derive(Debug, Clone, PartialEq)]
pub struct FilmParams {
    pub scale: Affine,
    pub shift: Affine,
}

/// Decision layer Θ.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionParams {
    pub kind: FusionKind,
    /// Concat: one `C × dᵘ` block per modality. Otherwise a single shared block.
    pub classifier: Vec<Matrix>,
    pub bias: Vec<f64>,
    pub film: Option<FilmParams>,
    /// Gated: `d × 2d` affine feeding a sigmoid.
    pub gate: Option<Affine>,
}

/// All trainable parameters. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub encoders: Vec<Encoder>,
    /// One per modality for film/gated fusion, empty otherwise.
    pub probes: Vec<Affine>,
    pub decision: DecisionParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    /// θᵘ: encoder u and its probe head.
    Modality(usize),
    /// Θ: everything in the decision layer.
    Decision,
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Group::Modality(u) => write!(f, "theta[{u}]"),
            Group::Decision => f.write_str("Theta"),
        }
    }
}

pub struct Block<'a> {
    pub name: String,
    pub group: Group,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

pub struct BlockMut<'a> {
    pub name: String,
    pub group: Group,
    pub data: &'a mut [f64],
}

impl Params {
    pub fn modalities(&self) -> usize {
        self.encoders.len()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            encoders: self
                .encoders
                .iter()
                .map(|e| Encoder {
                    layers: e.layers.iter().map(Affine::zeros_like).collect(),
                })
                .collect(),
            probes: self.probes.iter().map(Affine::zeros_like).collect(),
            decision: DecisionParams {
                kind: self.decision.kind,
                classifier: self
                    .decision
                    .classifier
                    .iter()
                    .map(|m| Matrix::zeros(m.rows(), m.cols()))
                    .collect(),
                bias: vec![0.0; self.decision.bias.len()],
                film: self.decision.film.as_ref().map(|f| FilmParams {
                    scale: f.scale.zeros_like(),
                    shift: f.shift.zeros_like(),
                }),
                gate: self.decision.gate.as_ref().map(Affine::zeros_like),
            },
        }
    }

    /// Every parameter block in a fixed order with checkpoint names.
    pub fn blocks(&self) -> Vec<Block<'_>> {
        fn affine<'a>(out: &mut Vec<Block<'a>>, prefix: String, group: Group, a: &'a Affine) {
            out.push(Block {
                name: format!("{prefix}.weight"),
                group,
                shape: vec![a.weight.rows(), a.weight.cols()],
                data: a.weight.data(),
            });
            out.push(Block {
                name: format!("{prefix}.bias"),
                group,
                shape: vec![a.bias.len()],
                data: &a.bias,
            });
        }
        let mut out = Vec::new();
        for (u, enc) in self.encoders.iter().enumerate() {
            for (k, layer) in enc.layers.iter().enumerate() {
                affine(&mut out, format!("encoder{u}.layer{k}"), Group::Modality(u), layer);
            }
        }
        for (u, probe) in self.probes.iter().enumerate() {
            affine(&mut out, format!("probe{u}"), Group::Modality(u), probe);
        }
        let d = &self.decision;
        for (k, m) in d.classifier.iter().enumerate() {
            out.push(Block {
                name: format!("decision.classifier{k}"),
                group: Group::Decision,
                shape: vec![m.rows(), m.cols()],
                data: m.data(),
            });
        }
        out.push(Block {
            name: "decision.bias".into(),
            group: Group::Decision,
            shape: vec![d.bias.len()],
            data: &d.bias,
        });
        if let Some(film) = &d.film {
            affine(&mut out, "decision.film_scale".into(), Group::Decision, &film.scale);
            affine(&mut out, "decision.film_shift".into(), Group::Decision, &film.shift);
        }
        if let Some(gate) = &d.gate {
            affine(&mut out, "decision.gate".into(), Group::Decision, gate);
        }
        out
    }

    /// Mutable view in the same order as [`Params::blocks`].
    pub fn blocks_mut(&mut self) -> Vec<BlockMut<'_>> {
        fn affine<'a>(out: &mut Vec<BlockMut<'a>>, prefix: String, group: Group, a: &'a mut Affine) {
            out.push(BlockMut {
                name: format!("{prefix}.weight"),
                group,
                data: a.weight.data_mut(),
            });
            out.push(BlockMut {
                name: format!("{prefix}.bias"),
                group,
                data: &mut a.bias,
            });
        }
        let mut out = Vec::new();
        for (u, enc) in self.encoders.iter_mut().enumerate() {
            for (k, layer) in enc.layers.iter_mut().enumerate() {
                affine(&mut out, format!("encoder{u}.layer{k}"), Group::Modality(u), layer);
            }
        }
        for (u, probe) in self.probes.iter_mut().enumerate() {
            affine(&mut out, format!("probe{u}"), Group::Modality(u), probe);
        }
        let d = &mut self.decision;
        for (k, m) in d.classifier.iter_mut().enumerate() {
            out.push(BlockMut {
                name: format!("decision.classifier{k}"),
                group: Group::Decision,
                data: m.data_mut(),
            });
        }
        out.push(BlockMut {
            name: "decision.bias".into(),
            group: Group::Decision,
            data: &mut d.bias,
        });
        if let Some(film) = &mut d.film {
            affine(&mut out, "decision.film_scale".into(), Group::Decision, &mut film.scale);
            affine(&mut out, "decision.film_shift".into(), Group::Decision, &mut film.shift);
        }
        if let Some(gate) = &mut d.gate {
            affine(&mut out, "decision.gate".into(), Group::Decision, gate);
        }
        out
    }

    pub fn groups(&self) -> Vec<Group> {
        (0..self.modalities())
            .map(Group::Modality)
            .chain(std::iter::once(Group::Decision))
            .collect()
    }

    /// Concatenation of every block belonging to `group`.
    pub fn group_vector(&self, group: Group) -> Vec<f64> {
        self.blocks()
            .into_iter()
            .filter(|b| b.group == group)
            .flat_map(|b| b.data.iter().copied())
            .collect()
    }

    pub fn set_group_vector(&mut self, group: Group, values: &[f64]) -> Result<()> {
        let expected: usize = self
            .blocks()
            .iter()
            .filter(|b| b.group == group)
            .map(|b| b.data.len())
            .sum();
        if expected != values.len() {
            return Err(Error::shape("group vector", expected, values.len()));
        }
        let mut offset = 0;
        for block in self.blocks_mut().into_iter().filter(|b| b.group == group) {
            let n = block.data.len();
            block.data.copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn all_zero(&self, group: Group) -> bool {
        self.group_vector(group).iter().all(|v| *v == 0.0)
    }
}

/// Layer widths and head choice for a fresh model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dims: Vec<usize>,
    /// Encoder widths after the input; the last entry is the feature size.
    pub hidden: Vec<usize>,
    pub classes: usize,
    pub fusion: FusionKind,
}

/// Which loss head may write gradients into which parameter group.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Routing {
    pub fused_to_decision: bool,
    pub fused_to_modality: bool,
    pub unimodal_to_decision: bool,
    pub unimodal_to_modality: bool,
}

impl Routing {
    /// Every head into every group it depends on.
    pub fn joint() -> Self {
        Self {
            fused_to_decision: true,
            fused_to_modality: true,
            unimodal_to_decision: true,
            unimodal_to_modality: true,
        }
    }

    /// Encoders from their own unimodal losses only, decision layer from the
    /// fused loss only.
    pub fn targeted() -> Self {
        Self {
            fused_to_decision: true,
            fused_to_modality: false,
            unimodal_to_decision: false,
            unimodal_to_modality: true,
        }
    }
}

/// Upstream gradients with respect to each head's logits, per sample.
#[derive(Debug, Clone, Default)]
pub struct HeadGrads {
    /// `[sample][class]` for the fused logits.
    pub fused: Option<Vec<Vec<f64>>>,
    /// `[modality][sample][class]` for the unimodal logits.
    pub unimodal: Option<Vec<Vec<Vec<f64>>>>,
}

#[derive(Debug, Clone, PartialEq)]
enum FusionCache {
    Linear,
    Film { scale: Vec<f64>, mixed: Vec<f64> },
    Gated { gate: Vec<f64>, mixed: Vec<f64> },
}

/// Forward values for one sample plus the activations backward needs.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTrace {
    pub features: Vec<Vec<f64>>,
    pub unimodal_logits: Vec<Vec<f64>>,
    pub unimodal_probs: Vec<LabelDistribution>,
    pub fused_logits: Vec<f64>,
    pub probs: LabelDistribution,
    encoders: Vec<EncoderCache>,
    fusion: FusionCache,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    version: u64,
    pub samples: Vec<SampleTrace>,
}

impl ForwardTrace {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    params: Params,
    classes: usize,
    version: u64,
}

fn add_into(dst: &mut [f64], src: &[f64], scale: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += scale * s;
    }
}

impl Model {
    pub fn new<R: Rng + ?Sized>(arch: &Architecture, rng: &mut R) -> Result<Self> {
        let m = arch.input_dims.len();
        if m < 2 {
            return Err(Error::Invalid(format!("need at least two modalities, got {m}")));
        }
        if arch.hidden.is_empty() || arch.hidden.contains(&0) || arch.input_dims.contains(&0) {
            return Err(Error::Invalid("layer widths must be positive".into()));
        }
        if arch.classes < 2 {
            return Err(Error::Invalid("need at least two classes".into()));
        }
        if arch.fusion.uses_probes() && m != 2 {
            return Err(Error::Invalid(format!(
                "{} fusion is defined for two modalities, got {m}",
                arch.fusion
            )));
        }
        let encoders = arch
            .input_dims
            .iter()
            .map(|&inp| {
                let mut widths = vec![inp];
                widths.extend(&arch.hidden);
                Encoder {
                    layers: widths
                        .windows(2)
                        .map(|w| Affine::glorot(w[1], w[0], rng))
                        .collect(),
                }
            })
            .collect::<Vec<_>>();
        let d = *arch.hidden.last().unwrap();
        let c = arch.classes;
        let classifier = match arch.fusion {
            FusionKind::Concat => (0..m).map(|_| Matrix::glorot(c, d, rng)).collect(),
            _ => vec![Matrix::glorot(c, d, rng)],
        };
        let film = (arch.fusion == FusionKind::Film).then(|| {
            let mut scale = Affine::glorot(d, d, rng);
            scale.bias.fill(1.0);
            FilmParams {
                scale,
                shift: Affine::glorot(d, d, rng),
            }
        });
        let gate = (arch.fusion == FusionKind::Gated).then(|| Affine::glorot(d, 2 * d, rng));
        let probes = if arch.fusion.uses_probes() {
            (0..m).map(|_| Affine::glorot(c, d, rng)).collect()
        } else {
            Vec::new()
        };
        Self::from_params(
            Params {
                encoders,
                probes,
                decision: DecisionParams {
                    kind: arch.fusion,
                    classifier,
                    bias: vec![0.0; c],
                    film,
                    gate,
                },
            },
        )
    }

    /// Validates that every block chains correctly for the fusion kind.
    pub fn from_params(params: Params) -> Result<Self> {
        let m = params.modalities();
        if m < 2 {
            return Err(Error::Invalid("need at least two modalities".into()));
        }
        let d = &params.decision;
        let c = d.bias.len();
        for (u, enc) in params.encoders.iter().enumerate() {
            if enc.layers.is_empty() {
                return Err(Error::Invalid(format!("encoder {u} has no layers")));
            }
            for (k, w) in enc.layers.windows(2).enumerate() {
                if w[1].weight.cols() != w[0].weight.rows() {
                    return Err(Error::shape(
                        "encoder layer chain",
                        format!("encoder{u}.layer{} input {}", k + 1, w[0].weight.rows()),
                        w[1].weight.cols(),
                    ));
                }
            }
            for l in &enc.layers {
                if l.bias.len() != l.weight.rows() {
                    return Err(Error::shape("encoder bias", l.weight.rows(), l.bias.len()));
                }
            }
        }
        let dims: Vec<usize> = params.encoders.iter().map(Encoder::feature_dim).collect();
        let check_block = |mat: &Matrix, cols: usize| -> Result<()> {
            if mat.rows() != c || mat.cols() != cols {
                return Err(Error::shape(
                    "classifier block",
                    format!("{c}x{cols}"),
                    format!("{}x{}", mat.rows(), mat.cols()),
                ));
            }
            Ok(())
        };
        match d.kind {
            FusionKind::Concat => {
                if d.classifier.len() != m {
                    return Err(Error::shape("concat classifier blocks", m, d.classifier.len()));
                }
                for (block, &du) in d.classifier.iter().zip(&dims) {
                    check_block(block, du)?;
                }
            }
            kind => {
                if dims.iter().any(|&du| du != dims[0]) {
                    return Err(Error::Invalid(format!(
                        "{kind} fusion needs equal feature dims, got {dims:?}"
                    )));
                }
                if d.classifier.len() != 1 {
                    return Err(Error::shape("shared classifier blocks", 1, d.classifier.len()));
                }
                check_block(&d.classifier[0], dims[0])?;
            }
        }
        let df = dims[0];
        let square = |a: &Affine, out: usize, inp: usize, what: &'static str| -> Result<()> {
            if a.weight.rows() != out || a.weight.cols() != inp || a.bias.len() != out {
                return Err(Error::shape(what, format!("{out}x{inp}"), format!("{}x{}", a.weight.rows(), a.weight.cols())));
            }
            Ok(())
        };
        match d.kind {
            FusionKind::Film => {
                let film = d.film.as_ref().ok_or_else(|| Error::Invalid("film params missing".into()))?;
                square(&film.scale, df, df, "film scale")?;
                square(&film.shift, df, df, "film shift")?;
            }
            FusionKind::Gated => {
                let gate = d.gate.as_ref().ok_or_else(|| Error::Invalid("gate params missing".into()))?;
                square(gate, df, 2 * df, "gate")?;
            }
            _ => {}
        }
        if d.kind.uses_probes() {
            if m != 2 {
                return Err(Error::Invalid(format!("{} fusion needs two modalities", d.kind)));
            }
            if params.probes.len() != m {
                return Err(Error::shape("probe heads", m, params.probes.len()));
            }
            for (p, &du) in params.probes.iter().zip(&dims) {
                square(p, c, du, "probe head")?;
            }
        } else if !params.probes.is_empty() {
            return Err(Error::Invalid(format!("{} fusion takes no probe heads", d.kind)));
        }
        Ok(Self {
            classes: c,
            params,
            version: 0,
        })
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    /// Any mutable access invalidates outstanding traces.
    pub fn params_mut(&mut self) -> &mut Params {
        self.version += 1;
        &mut self.params
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn modalities(&self) -> usize {
        self.params.modalities()
    }

    pub fn fusion(&self) -> FusionKind {
        self.params.decision.kind
    }

    pub fn input_dims(&self) -> Vec<usize> {
        self.params.encoders.iter().map(Encoder::input_dim).collect()
    }

    pub fn encode(&self, modality: usize, x: &[f64]) -> Result<Vec<f64>> {
        self.encoder(modality)?.encode(x)
    }

    fn encoder(&self, modality: usize) -> Result<&Encoder> {
        self.params
            .encoders
            .get(modality)
            .ok_or_else(|| Error::Invalid(format!("unknown modality {modality}")))
    }

    /// Probe logits for modality `u`: `Wᵘ·zᵘ + b/M` for linear fusions,
    /// the probe head for film/gated.
    pub fn unimodal_logits(&self, z: &[f64], modality: usize) -> Result<Vec<f64>> {
        let m = self.modalities();
        if modality >= m {
            return Err(Error::Invalid(format!("unknown modality {modality}")));
        }
        let d = &self.params.decision;
        match d.kind {
            FusionKind::Concat | FusionKind::Sum => {
                let block = if d.kind == FusionKind::Concat {
                    &d.classifier[modality]
                } else {
                    &d.classifier[0]
                };
                let mut out = block.matvec(z)?;
                add_into(&mut out, &d.bias, 1.0 / m as f64);
                Ok(out)
            }
            FusionKind::Film | FusionKind::Gated => self.params.probes[modality].forward(z),
        }
    }

    fn fuse_cached(&self, features: &[Vec<f64>]) -> Result<(Vec<f64>, FusionCache)> {
        let d = &self.params.decision;
        if features.len() != self.modalities() {
            return Err(Error::shape("fusion inputs", self.modalities(), features.len()));
        }
        match d.kind {
            FusionKind::Concat => {
                let mut out = d.bias.clone();
                for (block, z) in d.classifier.iter().zip(features) {
                    add_into(&mut out, &block.matvec(z)?, 1.0);
                }
                Ok((out, FusionCache::Linear))
            }
            FusionKind::Sum => {
                let mut h = vec![0.0; features[0].len()];
                for z in features {
                    if z.len() != h.len() {
                        return Err(Error::shape("sum fusion", h.len(), z.len()));
                    }
                    add_into(&mut h, z, 1.0);
                }
                Ok((affine_forward(&h, &d.classifier[0], &d.bias)?, FusionCache::Linear))
            }
            FusionKind::Film => {
                let film = d.film.as_ref().expect("validated");
                let scale = film.scale.forward(&features[0])?;
                let shift = film.shift.forward(&features[0])?;
                if features[1].len() != scale.len() {
                    return Err(Error::shape("film fusion", scale.len(), features[1].len()));
                }
                let mixed: Vec<f64> = scale
                    .iter()
                    .zip(&features[1])
                    .zip(&shift)
                    .map(|((g, z), s)| g * z + s)
                    .collect();
                let out = affine_forward(&mixed, &d.classifier[0], &d.bias)?;
                Ok((out, FusionCache::Film { scale, mixed }))
            }
            FusionKind::Gated => {
                let gate_params = d.gate.as_ref().expect("validated");
                let joined = features.concat();
                let gate: Vec<f64> = gate_params.forward(&joined)?.into_iter().map(sigmoid).collect();
                if features[0].len() != gate.len() || features[1].len() != gate.len() {
                    return Err(Error::shape("gated fusion", gate.len(), features[1].len()));
                }
                let mixed: Vec<f64> = gate
                    .iter()
                    .zip(&features[0])
                    .zip(&features[1])
                    .map(|((g, a), v)| g * a + (1.0 - g) * v)
                    .collect();
                let out = affine_forward(&mixed, &d.classifier[0], &d.bias)?;
                Ok((out, FusionCache::Gated { gate, mixed }))
            }
        }
    }

    /// Fused logits for already-encoded features.
    pub fn fuse(&self, features: &[Vec<f64>]) -> Result<Vec<f64>> {
        Ok(self.fuse_cached(features)?.0)
    }

    pub fn forward_sample(&self, inputs: &[Vec<f64>]) -> Result<SampleTrace> {
        if inputs.len() != self.modalities() {
            return Err(Error::shape("modality inputs", self.modalities(), inputs.len()));
        }
        let mut features = Vec::with_capacity(inputs.len());
        let mut encoders = Vec::with_capacity(inputs.len());
        for (enc, x) in self.params.encoders.iter().zip(inputs) {
            let (z, cache) = enc.encode_cached(x)?;
            features.push(z);
            encoders.push(cache);
        }
        let unimodal_logits = (0..self.modalities())
            .map(|u| self.unimodal_logits(&features[u], u))
            .collect::<Result<Vec<_>>>()?;
        let unimodal_probs = unimodal_logits
            .iter()
            .map(|l| softmax(l))
            .collect::<Result<Vec<_>>>()?;
        let (fused_logits, fusion) = self.fuse_cached(&features)?;
        let probs = softmax(&fused_logits)?;
        Ok(SampleTrace {
            features,
            unimodal_logits,
            unimodal_probs,
            fused_logits,
            probs,
            encoders,
            fusion,
        })
    }

    pub fn forward<'a, I>(&self, batch: I) -> Result<ForwardTrace>
    where
        I: IntoIterator<Item = &'a [Vec<f64>]>,
    {
        let samples = batch
            .into_iter()
            .map(|inputs| self.forward_sample(inputs))
            .collect::<Result<Vec<_>>>()?;
        if samples.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        Ok(ForwardTrace {
            version: self.version,
            samples,
        })
    }

    /// Gradients of the heads described by `heads`, written only into the
    /// groups `routing` allows. Excluded groups are exactly zero.
    pub fn backward(&self, trace: &ForwardTrace, heads: &HeadGrads, routing: Routing) -> Result<Params> {
        if trace.version != self.version {
            return Err(Error::StaleTrace {
                trace: trace.version,
                model: self.version,
            });
        }
        let n = trace.len();
        let m = self.modalities();
        let c = self.classes;
        if let Some(f) = &heads.fused {
            if f.len() != n || f.iter().any(|g| g.len() != c) {
                return Err(Error::shape("fused head grads", format!("{n}x{c}"), f.len()));
            }
        }
        if let Some(u) = &heads.unimodal {
            if u.len() != m || u.iter().any(|s| s.len() != n || s.iter().any(|g| g.len() != c)) {
                return Err(Error::shape("unimodal head grads", format!("{m}x{n}x{c}"), u.len()));
            }
        }

        let p = &self.params;
        let d = &p.decision;
        let mut grads = p.zeros_like();
        let inv_m = 1.0 / m as f64;

        for (i, s) in trace.samples.iter().enumerate() {
            let mut dz: Vec<Vec<f64>> = s.features.iter().map(|z| vec![0.0; z.len()]).collect();
            let mut touched = vec![false; m];

            if let Some(fused) = &heads.fused {
                let g0 = &fused[i];
                let to_dec = routing.fused_to_decision;
                let to_mod = routing.fused_to_modality;
                if to_dec {
                    add_into(&mut grads.decision.bias, g0, 1.0);
                }
                match (&s.fusion, d.kind) {
                    (FusionCache::Linear, FusionKind::Concat) => {
                        for u in 0..m {
                            if to_dec {
                                grads.decision.classifier[u].add_outer(g0, &s.features[u], 1.0);
                            }
                            if to_mod {
                                add_into(&mut dz[u], &d.classifier[u].matvec_t(g0)?, 1.0);
                                touched[u] = true;
                            }
                        }
                    }
                    (FusionCache::Linear, FusionKind::Sum) => {
                        if to_dec {
                            let mut h = vec![0.0; s.features[0].len()];
                            for z in &s.features {
                                add_into(&mut h, z, 1.0);
                            }
                            grads.decision.classifier[0].add_outer(g0, &h, 1.0);
                        }
                        if to_mod {
                            let back = d.classifier[0].matvec_t(g0)?;
                            for u in 0..m {
                                add_into(&mut dz[u], &back, 1.0);
                                touched[u] = true;
                            }
                        }
                    }
                    (FusionCache::Film { scale, mixed }, FusionKind::Film) => {
                        let film = d.film.as_ref().expect("validated");
                        let dh = d.classifier[0].matvec_t(g0)?;
                        let dscale: Vec<f64> = dh.iter().zip(&s.features[1]).map(|(a, b)| a * b).collect();
                        if to_dec {
                            grads.decision.classifier[0].add_outer(g0, mixed, 1.0);
                            let gf = grads.decision.film.as_mut().expect("validated");
                            gf.scale.accumulate(&dscale, &s.features[0]);
                            gf.shift.accumulate(&dh, &s.features[0]);
                        }
                        if to_mod {
                            let dz1: Vec<f64> = dh.iter().zip(scale).map(|(a, b)| a * b).collect();
                            add_into(&mut dz[1], &dz1, 1.0);
                            add_into(&mut dz[0], &film.scale.weight.matvec_t(&dscale)?, 1.0);
                            add_into(&mut dz[0], &film.shift.weight.matvec_t(&dh)?, 1.0);
                            touched[0] = true;
                            touched[1] = true;
                        }
                    }
                    (FusionCache::Gated { gate, mixed }, FusionKind::Gated) => {
                        let gate_params = d.gate.as_ref().expect("validated");
                        let dh = d.classifier[0].matvec_t(g0)?;
                        let (za, zv) = (&s.features[0], &s.features[1]);
                        let dpre: Vec<f64> = (0..gate.len())
                            .map(|k| dh[k] * (za[k] - zv[k]) * gate[k] * (1.0 - gate[k]))
                            .collect();
                        if to_dec {
                            grads.decision.classifier[0].add_outer(g0, mixed, 1.0);
                            let joined = s.features.concat();
                            grads.decision.gate.as_mut().expect("validated").accumulate(&dpre, &joined);
                        }
                        if to_mod {
                            let dj = gate_params.weight.matvec_t(&dpre)?;
                            let k = gate.len();
                            for j in 0..k {
                                dz[0][j] += dh[j] * gate[j] + dj[j];
                                dz[1][j] += dh[j] * (1.0 - gate[j]) + dj[k + j];
                            }
                            touched[0] = true;
                            touched[1] = true;
                        }
                    }
                    _ => unreachable!("fusion cache does not match fusion kind"),
                }
            }

            if let Some(unimodal) = &heads.unimodal {
                for u in 0..m {
                    let gu = &unimodal[u][i];
                    match d.kind {
                        FusionKind::Concat | FusionKind::Sum => {
                            let k = if d.kind == FusionKind::Concat { u } else { 0 };
                            if routing.unimodal_to_decision {
                                grads.decision.classifier[k].add_outer(gu, &s.features[u], 1.0);
                                add_into(&mut grads.decision.bias, gu, inv_m);
                            }
                            if routing.unimodal_to_modality {
                                add_into(&mut dz[u], &d.classifier[k].matvec_t(gu)?, 1.0);
                                touched[u] = true;
                            }
                        }
                        FusionKind::Film | FusionKind::Gated => {
                            // probes belong to θᵘ
                            if routing.unimodal_to_modality {
                                grads.probes[u].accumulate(gu, &s.features[u]);
                                add_into(&mut dz[u], &p.probes[u].weight.matvec_t(gu)?, 1.0);
                                touched[u] = true;
                            }
                        }
                    }
                }
            }

            for u in 0..m {
                if touched[u] {
                    p.encoders[u].backward_into(&dz[u], &s.encoders[u], &mut grads.encoders[u])?;
                }
            }
        }
        Ok(grads)
    }
}
