//! Synthetic source worlds, severity-graded shifts and the Pure / Mixture test
//! streams built from them.

mod io;

pub use io::{read_dataset, write_csv, write_dataset, DATASET_MAGIC};

use std::f64::consts::PI;
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::batch::Batch;
use crate::seeds::mix_seed;

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("invalid source spec: {0}")]
    Source(String),
    #[error("invalid shift: {0}")]
    Shift(String),
    #[error("invalid scenario `{name}`: {reason}")]
    Scenario { name: String, reason: String },
    #[error("scenario needs {needed} samples per batch, clean set has {available}")]
    InsufficientSamples { needed: usize, available: usize },
    #[error("dataset file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Which distribution a test sample was drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DistTag {
    A,
    B,
}

/// Samples with their hidden labels and distribution tags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledBatch {
    pub x: Batch,
    pub y_hidden: Vec<usize>,
    pub tags: Vec<DistTag>,
}

impl LabeledBatch {
    pub fn new(x: Batch, y_hidden: Vec<usize>, tags: Vec<DistTag>) -> Result<Self, ScenarioError> {
        if y_hidden.len() != x.rows() || tags.len() != x.rows() {
            return Err(ScenarioError::Format(format!(
                "{} rows, {} labels, {} tags",
                x.rows(),
                y_hidden.len(),
                tags.len()
            )));
        }
        Ok(Self { x, y_hidden, tags })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            x: self.x.select_rows(idx),
            y_hidden: idx.iter().map(|&i| self.y_hidden[i]).collect(),
            tags: idx.iter().map(|&i| self.tags[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    Blobs,
    TwoMoons,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SourceSpec {
    pub kind: SourceKind,
    pub num_classes: usize,
    pub dim: usize,
    /// Distance of the default blob centres from the origin.
    pub center_radius: f64,
    /// Per-coordinate standard deviation used when `stds` is absent.
    pub cluster_std: f64,
    /// Explicit class means, one per class.
    pub means: Option<Vec<Vec<f64>>>,
    /// Explicit diagonal standard deviations, one vector per class.
    pub stds: Option<Vec<Vec<f64>>>,
    pub n_train_per_class: usize,
    pub n_test_per_class: usize,
    pub seed: u64,
}

impl Default for SourceSpec {
    fn default() -> Self {
        Self {
            kind: SourceKind::Blobs,
            num_classes: 4,
            dim: 2,
            center_radius: 0.5,
            cluster_std: 0.12,
            means: None,
            stds: None,
            n_train_per_class: 500,
            n_test_per_class: 500,
            seed: 0,
        }
    }
}

impl SourceSpec {
    /// Class means: explicit ones, or centres spread on a circle of
    /// `center_radius` in the first coordinate plane (2-D) / along seeded random
    /// unit directions (higher dimensions).
    pub fn class_means(&self) -> Vec<Vec<f64>> {
        if let Some(m) = &self.means {
            return m.clone();
        }
        let (k, d, r) = (self.num_classes, self.dim, self.center_radius);
        if d == 2 {
            return (0..k)
                .map(|c| {
                    let a = 2.0 * PI * c as f64 / k as f64 + PI / 4.0;
                    vec![r * a.cos(), r * a.sin()]
                })
                .collect();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed, 0xC3));
        (0..k)
            .map(|_| {
                let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                let n = crate::numerics::l2_norm(&v);
                v.into_iter().map(|x| r * x / n).collect()
            })
            .collect()
    }

    fn class_stds(&self) -> Vec<Vec<f64>> {
        self.stds
            .clone()
            .unwrap_or_else(|| vec![vec![self.cluster_std; self.dim]; self.num_classes])
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let err = |m: String| Err(ScenarioError::Source(m));
        if self.num_classes < 2 || self.dim == 0 {
            return err("need num_classes >= 2 and dim >= 1".into());
        }
        match self.kind {
            SourceKind::TwoMoons => {
                if self.num_classes != 2 || self.dim < 2 {
                    return err("two_moons needs 2 classes and dim >= 2".into());
                }
                if !(self.cluster_std >= 0.0) {
                    return err("cluster_std must be >= 0".into());
                }
            }
            SourceKind::Blobs => {
                if self.means.is_none() && self.dim == 1 {
                    return err("default blob centres need dim >= 2".into());
                }
                let means = self.class_means();
                let stds = self.class_stds();
                if means.len() != self.num_classes || stds.len() != self.num_classes {
                    return err("one mean and one std vector per class required".into());
                }
                if means.iter().chain(&stds).any(|v| v.len() != self.dim) {
                    return err("mean/std vectors must have length dim".into());
                }
                if stds.iter().flatten().any(|&s| !(s > 0.0 && s.is_finite())) {
                    return err("degenerate covariance: every std must be > 0".into());
                }
                for i in 0..means.len() {
                    for j in i + 1..means.len() {
                        if means[i] == means[j] {
                            return err(format!("classes {i} and {j} share a mean"));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn draw(&self, per_class: usize, rng: &mut ChaCha8Rng) -> LabeledBatch {
        let d = self.dim;
        let k = self.num_classes;
        let mut data = Vec::with_capacity(per_class * k * d);
        let mut labels = Vec::with_capacity(per_class * k);
        match self.kind {
            SourceKind::Blobs => {
                let means = self.class_means();
                let stds = self.class_stds();
                for c in 0..k {
                    for _ in 0..per_class {
                        for j in 0..d {
                            let e: f64 = rng.sample(StandardNormal);
                            data.push(means[c][j] + stds[c][j] * e);
                        }
                        labels.push(c);
                    }
                }
            }
            SourceKind::TwoMoons => {
                for c in 0..2 {
                    for _ in 0..per_class {
                        let t = PI * rng.random::<f64>();
                        let (mx, my) = if c == 0 {
                            (t.cos(), t.sin())
                        } else {
                            (1.0 - t.cos(), 0.5 - t.sin())
                        };
                        // centre the pair of moons and fit it inside the unit box
                        let base = [0.5 * (mx - 0.5), 0.5 * (my - 0.25)];
                        for j in 0..d {
                            let e: f64 = rng.sample(StandardNormal);
                            let v = if j < 2 { base[j] } else { 0.0 };
                            data.push(v + self.cluster_std * e);
                        }
                        labels.push(c);
                    }
                }
            }
        }
        let n = labels.len();
        LabeledBatch {
            x: Batch::from_vec(n, d, data).expect("source shape"),
            y_hidden: labels,
            tags: vec![DistTag::A; n],
        }
    }
}

/// Training set and clean test set. They come from separate random streams
/// of the same seed, so no test sample is a training sample.
pub fn gen_source(spec: &SourceSpec) -> Result<(LabeledBatch, LabeledBatch), ScenarioError> {
    spec.validate()?;
    let mut train_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    train_rng.set_stream(0);
    let mut test_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    test_rng.set_stream(1);
    Ok((
        spec.draw(spec.n_train_per_class, &mut train_rng),
        spec.draw(spec.n_test_per_class, &mut test_rng),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftKind {
    Rotate,
    Translate,
    GaussianNoise,
    FeatureScale,
    #[serde(rename = "blur_1d")]
    Blur1d,
}

impl ShiftKind {
    pub const ALL: [ShiftKind; 5] = [
        ShiftKind::Rotate,
        ShiftKind::Translate,
        ShiftKind::GaussianNoise,
        ShiftKind::FeatureScale,
        ShiftKind::Blur1d,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShiftKind::Rotate => "rotate",
            ShiftKind::Translate => "translate",
            ShiftKind::GaussianNoise => "gaussian_noise",
            ShiftKind::FeatureScale => "feature_scale",
            ShiftKind::Blur1d => "blur_1d",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    /// Magnitude for severities 1..=5.
    ///
    /// | kind           | unit                      | 1    | 2    | 3    | 4    | 5    |
    /// |----------------|---------------------------|------|------|------|------|------|
    /// | rotate         | degrees                   | 10   | 20   | 30   | 40   | 50   |
    /// | translate      | shift along (1,..,1)/√d   | 0.1  | 0.2  | 0.3  | 0.4  | 0.5  |
    /// | gaussian_noise | noise std                 | 0.05 | 0.1  | 0.15 | 0.2  | 0.25 |
    /// | feature_scale  | multiplicative factor     | 1.2  | 1.4  | 1.6  | 1.8  | 2.0  |
    /// | blur_1d        | blend toward 3-tap mean   | 0.2  | 0.4  | 0.6  | 0.8  | 1.0  |
    pub fn magnitude(self, severity: u8) -> Option<f64> {
        let table: [f64; 5] = match self {
            ShiftKind::Rotate => [10.0, 20.0, 30.0, 40.0, 50.0],
            ShiftKind::Translate => [0.1, 0.2, 0.3, 0.4, 0.5],
            ShiftKind::GaussianNoise => [0.05, 0.1, 0.15, 0.2, 0.25],
            ShiftKind::FeatureScale => [1.2, 1.4, 1.6, 1.8, 2.0],
            ShiftKind::Blur1d => [0.2, 0.4, 0.6, 0.8, 1.0],
        };
        match severity {
            1..=5 => Some(table[severity as usize - 1]),
            _ => None,
        }
    }
}

impl fmt::Display for ShiftKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftSpec {
    pub kind: ShiftKind,
    pub severity: u8,
}

impl ShiftSpec {
    pub fn new(kind: ShiftKind, severity: u8) -> Self {
        Self { kind, severity }
    }

    pub fn label(&self) -> String {
        format!("{}-{}", self.kind, self.severity)
    }
}

/// Applies `shift` to every row. Severity 0 is the identity; severities above
/// 5 are rejected. Only `gaussian_noise` consumes `seed`.
pub fn apply_shift(x: &Batch, shift: &ShiftSpec, seed: u64) -> Result<Batch, ScenarioError> {
    if shift.severity == 0 {
        return Ok(x.clone());
    }
    let m = shift
        .kind
        .magnitude(shift.severity)
        .ok_or_else(|| ScenarioError::Shift(format!("severity {} outside 1..=5", shift.severity)))?;
    let d = x.cols();
    let mut out = x.clone();
    match shift.kind {
        ShiftKind::Rotate => {
            let (s, c) = m.to_radians().sin_cos();
            for r in 0..out.rows() {
                for pair in out.row_mut(r).chunks_exact_mut(2) {
                    let (a, b) = (pair[0], pair[1]);
                    pair[0] = c * a - s * b;
                    pair[1] = s * a + c * b;
                }
            }
        }
        ShiftKind::Translate => {
            let t = m / (d as f64).sqrt();
            out.as_mut_slice().iter_mut().for_each(|v| *v += t);
        }
        ShiftKind::GaussianNoise => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for v in out.as_mut_slice() {
                let e: f64 = rng.sample(StandardNormal);
                *v += m * e;
            }
        }
        ShiftKind::FeatureScale => {
            out.as_mut_slice().iter_mut().for_each(|v| *v *= m);
        }
        ShiftKind::Blur1d => {
            for r in 0..x.rows() {
                let src = x.row(r);
                let dst = out.row_mut(r);
                for j in 0..d {
                    let avg = (src[(j + d - 1) % d] + src[j] + src[(j + 1) % d]) / 3.0;
                    dst[j] = (1.0 - m) * src[j] + m * avg;
                }
            }
        }
    }
    Ok(out)
}

/// Named shift pairs. "Distinct" pairs combine shifts of different families,
/// "similar" pairs two severities of the same family.
pub fn preset_pair(name: &str) -> Option<(ShiftSpec, ShiftSpec)> {
    use ShiftKind::*;
    let pair = match name {
        "distinct_rotate_noise" => (ShiftSpec::new(Rotate, 5), ShiftSpec::new(GaussianNoise, 3)),
        "distinct_noise_rotate" => (ShiftSpec::new(GaussianNoise, 3), ShiftSpec::new(Rotate, 5)),
        "distinct_rotate_translate" => (ShiftSpec::new(Rotate, 5), ShiftSpec::new(Translate, 5)),
        "distinct_translate_scale" => (ShiftSpec::new(Translate, 3), ShiftSpec::new(FeatureScale, 3)),
        "similar_noise" => (ShiftSpec::new(GaussianNoise, 3), ShiftSpec::new(GaussianNoise, 4)),
        "similar_rotate" => (ShiftSpec::new(Rotate, 3), ShiftSpec::new(Rotate, 4)),
        _ => return None,
    };
    Some(pair)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Pure,
    Mixture,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub name: String,
    pub regime: Regime,
    pub dist_a: ShiftSpec,
    #[serde(default)]
    pub dist_b: Option<ShiftSpec>,
    /// Fraction of every batch drawn from `dist_a`.
    #[serde(default = "one")]
    pub ratio: f64,
    pub batch_size: usize,
    pub num_batches: usize,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> f64 {
    1.0
}

impl ScenarioSpec {
    pub fn pure(name: &str, shift: ShiftSpec, batch_size: usize, num_batches: usize) -> Self {
        Self {
            name: name.into(),
            regime: Regime::Pure,
            dist_a: shift,
            dist_b: None,
            ratio: 1.0,
            batch_size,
            num_batches,
            seed: 0,
        }
    }

    pub fn mixture(
        name: &str,
        a: ShiftSpec,
        b: ShiftSpec,
        ratio: f64,
        batch_size: usize,
        num_batches: usize,
    ) -> Self {
        Self {
            name: name.into(),
            regime: Regime::Mixture,
            dist_a: a,
            dist_b: Some(b),
            ratio,
            batch_size,
            num_batches,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let fail = |reason: &str| {
            Err(ScenarioError::Scenario {
                name: self.name.clone(),
                reason: reason.into(),
            })
        };
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1");
        }
        for s in std::iter::once(&self.dist_a).chain(self.dist_b.as_ref()) {
            if !(1..=5).contains(&s.severity) {
                return fail("severity must lie in 1..=5");
            }
        }
        match self.regime {
            Regime::Pure => {
                if self.ratio != 1.0 {
                    return fail("pure regime requires ratio = 1");
                }
                if self.dist_b.is_some() {
                    return fail("pure regime takes no dist_b");
                }
            }
            Regime::Mixture => {
                if self.dist_b.is_none() {
                    return fail("mixture regime requires dist_b");
                }
                if !(self.ratio > 0.0 && self.ratio < 1.0) {
                    return fail("mixture ratio must lie in (0, 1)");
                }
            }
        }
        Ok(())
    }

    /// Rows per batch drawn from `dist_a`: `max(1, round(ratio * batch_size))`
    /// for mixtures, everything for pure streams.
    pub fn count_a(&self) -> usize {
        match self.regime {
            Regime::Pure => self.batch_size,
            Regime::Mixture => ((self.ratio * self.batch_size as f64).round() as usize)
                .clamp(1, self.batch_size),
        }
    }
}

/// Builds the test stream: each batch samples `batch_size` clean rows without
/// replacement, shifts the first `count_a` by `dist_a` and the rest by
/// `dist_b`, then shuffles the rows.
pub fn compose_batches(spec: &ScenarioSpec, clean: &LabeledBatch) -> Result<Vec<LabeledBatch>, ScenarioError> {
    spec.validate()?;
    if spec.batch_size > clean.len() {
        return Err(ScenarioError::InsufficientSamples {
            needed: spec.batch_size,
            available: clean.len(),
        });
    }
    let n_a = spec.count_a();
    (0..spec.num_batches)
        .map(|b| {
            let batch_seed = mix_seed(spec.seed, b as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(batch_seed);
            let picked = rand::seq::index::sample(&mut rng, clean.len(), spec.batch_size).into_vec();
            let base = clean.select(&picked);
            let xa = apply_shift(&base.x.select_rows(&(0..n_a).collect::<Vec<_>>()), &spec.dist_a, mix_seed(batch_seed, 0xA))?;
            let mut parts = vec![xa];
            if n_a < spec.batch_size {
                let b_shift = spec.dist_b.as_ref().expect("validated mixture");
                let rest: Vec<usize> = (n_a..spec.batch_size).collect();
                parts.push(apply_shift(&base.x.select_rows(&rest), b_shift, mix_seed(batch_seed, 0xB))?);
            }
            let x = Batch::vstack(&parts.iter().collect::<Vec<_>>()).expect("same width");
            let tags = (0..spec.batch_size)
                .map(|i| if i < n_a { DistTag::A } else { DistTag::B })
                .collect();
            let composed = LabeledBatch {
                x,
                y_hidden: base.y_hidden,
                tags,
            };
            let mut order: Vec<usize> = (0..spec.batch_size).collect();
            order.shuffle(&mut rng);
            Ok(composed.select(&order))
        })
        .collect()
}
