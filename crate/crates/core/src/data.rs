//! Seeded synthetic multimodal datasets and their CSV file format.
//!
//! Every modality is a mixture of unit-variance isotropic Gaussians, one per
//! class. Class means sit on a regular simplex whose edge length is the
//! modality's separation `sᵘ`, so `sᵘ` directly sets how hard the modality is.
//!
//! File format (`BMLR-DATA-1`):
//!
//! ```text
//! BMLR-DATA-1,<classes>,<dim_0>,<dim_1>[,...]
//! <train|test>,<class>,<features of modality 0>,<features of modality 1>...
//! ```
//!
//! Every line, including the last, ends in `\n`; a missing final newline is
//! reported as truncation.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DATA_MAGIC: &str = "BMLR-DATA-1";
/// One in ten samples of every class is held out.
pub const TEST_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub samples_per_class: usize,
    /// Input dimension per modality.
    pub dims: Vec<usize>,
    /// Distance between class means per modality, in noise-std units.
    pub separations: Vec<f64>,
    /// Fraction of samples where one random modality carries no class signal.
    #[serde(default)]
    pub exclusive_fraction: f64,
    #[serde(default)]
    pub label_noise: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config("classes", "must be at least 2"));
        }
        if self.samples_per_class == 0 {
            return Err(Error::config("samples_per_class", "must be positive"));
        }
        if self.dims.len() < 2 {
            return Err(Error::config("dims", "need at least two modalities"));
        }
        if self.dims.contains(&0) {
            return Err(Error::config("dims", "dimensions must be positive"));
        }
        if self.separations.len() != self.dims.len() {
            return Err(Error::config(
                "separations",
                format!("expected {} entries, got {}", self.dims.len(), self.separations.len()),
            ));
        }
        if self.separations.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::config("separations", "must be finite and non-negative"));
        }
        if !(0.0..=1.0).contains(&self.exclusive_fraction) {
            return Err(Error::config("exclusive_fraction", "must lie in [0, 1]"));
        }
        if !(0.0..0.5).contains(&self.label_noise) {
            return Err(Error::config("label_noise", "must lie in [0, 0.5)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub inputs: Vec<Vec<f64>>,
    pub label: usize,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub classes: usize,
    pub dims: Vec<usize>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn modalities(&self) -> usize {
        self.dims.len()
    }

    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    pub fn train(&self) -> Vec<&Sample> {
        self.split(Split::Train)
    }

    pub fn test(&self) -> Vec<&Sample> {
        self.split(Split::Test)
    }
}

/// Class means for one modality: vertices of a regular simplex with edge
/// `separation`. When `dim < classes` the vertices are projected onto a random
/// orthonormal `dim`-frame, which keeps the scale but not exact equidistance.
fn class_means<R: Rng>(classes: usize, dim: usize, separation: f64, rng: &mut R) -> Vec<Vec<f64>> {
    let scale = separation / std::f64::consts::SQRT_2;
    if dim >= classes {
        return (0..classes)
            .map(|k| {
                let mut m = vec![0.0; dim];
                m[k] = scale;
                m
            })
            .collect();
    }
    // Gram-Schmidt on Gaussian rows → dim orthonormal vectors in R^classes
    let mut frame: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while frame.len() < dim {
        let mut v: Vec<f64> = (0..classes).map(|_| rng.sample(StandardNormal)).collect();
        for f in &frame {
            let p: f64 = v.iter().zip(f).map(|(a, b)| a * b).sum();
            for (a, b) in v.iter_mut().zip(f) {
                *a -= p * b;
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-8 {
            frame.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    (0..classes)
        .map(|k| frame.iter().map(|f| scale * f[k]).collect())
        .collect()
}

fn gaussian_around<R: Rng>(mean: &[f64], rng: &mut R) -> Vec<f64> {
    mean.iter()
        .map(|m| m + rng.sample::<f64, _>(StandardNormal))
        .collect()
}

pub fn test_count(samples_per_class: usize) -> usize {
    (samples_per_class as f64 * TEST_FRACTION).round() as usize
}

pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let c = spec.classes;
    let m = spec.dims.len();
    let means: Vec<Vec<Vec<f64>>> = spec
        .dims
        .iter()
        .zip(&spec.separations)
        .map(|(&d, &s)| class_means(c, d, s, &mut rng))
        .collect();
    let n_test = test_count(spec.samples_per_class);

    let mut samples = Vec::with_capacity(c * spec.samples_per_class);
    for k in 0..c {
        for j in 0..spec.samples_per_class {
            let mut inputs: Vec<Vec<f64>> = (0..m).map(|u| gaussian_around(&means[u][k], &mut rng)).collect();
            if rng.random::<f64>() < spec.exclusive_fraction {
                let u = rng.random_range(0..m);
                let other = rng.random_range(0..c);
                inputs[u] = gaussian_around(&means[u][other], &mut rng);
            }
            let mut label = k;
            if spec.label_noise > 0.0 && rng.random::<f64>() < spec.label_noise {
                label = (k + rng.random_range(1..c)) % c;
            }
            let split = if j < n_test { Split::Test } else { Split::Train };
            samples.push(Sample { inputs, label, split });
        }
    }
    Ok(Dataset {
        classes: c,
        dims: spec.dims.clone(),
        samples,
    })
}

pub fn to_csv(dataset: &Dataset) -> String {
    let mut out = String::new();
    out.push_str(DATA_MAGIC);
    write!(out, ",{}", dataset.classes).unwrap();
    for d in &dataset.dims {
        write!(out, ",{d}").unwrap();
    }
    out.push('\n');
    for s in &dataset.samples {
        write!(out, "{},{}", s.split.as_str(), s.label).unwrap();
        for x in s.inputs.iter().flatten() {
            // Display for f64 is the shortest exact round-trip form
            write!(out, ",{x}").unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn save(dataset: &Dataset, path: &Path) -> Result<()> {
    fs::write(path, to_csv(dataset)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text, path)
}

pub fn parse_csv(text: &str, path: &Path) -> Result<Dataset> {
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let lines: Vec<&str> = text.split_terminator('\n').collect();
    let header = lines.first().ok_or_else(|| err(1, "empty file".into()))?;
    let fields: Vec<&str> = header.split(',').collect();
    if fields[0] != DATA_MAGIC {
        return Err(err(1, format!("expected magic `{DATA_MAGIC}`, found `{}`", fields[0])));
    }
    let nums = fields[1..]
        .iter()
        .map(|f| f.trim().parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| err(1, format!("bad header number: {e}")))?;
    if nums.len() < 3 {
        return Err(err(1, format!(
            "header needs class count and at least two modality dims, found {} numbers",
            nums.len()
        )));
    }
    let classes = nums[0];
    let dims = nums[1..].to_vec();
    if classes < 2 || dims.contains(&0) {
        return Err(err(1, "class count must be ≥ 2 and dims positive".into()));
    }
    let width = 2 + dims.iter().sum::<usize>();

    if !text.ends_with('\n') {
        let last_valid = lines.len().saturating_sub(1);
        return Err(err(
            lines.len(),
            format!("truncated record (no trailing newline); last valid record is line {last_valid}"),
        ));
    }

    let mut samples = Vec::with_capacity(lines.len() - 1);
    for (i, line) in lines.iter().enumerate().skip(1) {
        let lineno = i + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != width {
            return Err(err(
                lineno,
                format!(
                    "expected {width} fields, found {}; last valid record is line {}",
                    fields.len(),
                    lineno - 1
                ),
            ));
        }
        let split = match fields[0] {
            "train" => Split::Train,
            "test" => Split::Test,
            other => return Err(err(lineno, format!("field 1: unknown split `{other}`"))),
        };
        let label: usize = fields[1]
            .parse()
            .map_err(|e| err(lineno, format!("field 2: bad class index: {e}")))?;
        if label >= classes {
            return Err(err(lineno, format!("field 2: class {label} out of range {classes}")));
        }
        let mut values = fields[2..].iter().enumerate().map(|(j, f)| {
            f.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| err(lineno, format!("field {}: bad number `{f}`", j + 3)))
        });
        let mut inputs = Vec::with_capacity(dims.len());
        for &d in &dims {
            inputs.push((0..d).map(|_| values.next().expect("width checked")).collect::<Result<Vec<_>>>()?);
        }
        samples.push(Sample { inputs, label, split });
    }
    Ok(Dataset { classes, dims, samples })
}
