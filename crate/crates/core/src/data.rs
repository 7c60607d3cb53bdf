//! Seeded synthetic classification data with a channel-collapse attribute.
//!
//! Features are laid out channel-major: `features[ch * positions + pos]`. Each
//! class center has a luminance part (equal across channels, survives the
//! transform) and a chroma part (zero mean across channels, destroyed by the
//! transform). Collapsing channels to their mean is the analogue of converting
//! an image to grayscale.
//!
//! The two skew protocols transform a deterministic quota of each class:
//! "sensitive" transforms 95% of half the classes and 5% of the rest,
//! "minority" transforms 5% of every class.

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::nnet::Matrix;
use crate::rng;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Attribute {
    /// Untouched ("colour").
    Untouched,
    /// Channel-collapsed ("grayscale").
    Transformed,
}

impl Attribute {
    pub fn as_u8(self) -> u8 {
        match self {
            Attribute::Untouched => 0,
            Attribute::Transformed => 1,
        }
    }

    pub fn index(self) -> usize {
        self.as_u8() as usize
    }

    pub fn flipped(self) -> Self {
        match self {
            Attribute::Untouched => Attribute::Transformed,
            Attribute::Transformed => Attribute::Untouched,
        }
    }
}

impl From<Attribute> for u8 {
    fn from(a: Attribute) -> u8 {
        a.as_u8()
    }
}

impl TryFrom<u8> for Attribute {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            0 => Ok(Attribute::Untouched),
            1 => Ok(Attribute::Transformed),
            other => Err(Error::Schema(format!("attribute must be 0 or 1, got {other}"))),
        }
    }
}

fn default_channels() -> usize {
    3
}

fn default_chroma_share() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub samples_per_class: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    pub positions_per_channel: usize,
    /// Scale of the class centers.
    pub center_scale: f64,
    pub noise_std: f64,
    /// Share of center energy in the chroma (channel-varying) part, in [0, 1].
    #[serde(default = "default_chroma_share")]
    pub chroma_share: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: SyntheticSpec = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels < 2 {
            return Err(Error::Config(format!(
                "channels must be >= 2 for a non-trivial transform, got {}",
                self.channels
            )));
        }
        if self.n_classes == 0 || self.samples_per_class == 0 || self.positions_per_channel == 0 {
            return Err(Error::Config(
                "n_classes, samples_per_class and positions_per_channel must be >= 1".into(),
            ));
        }
        if !(self.center_scale.is_finite() && self.center_scale >= 0.0) {
            return Err(Error::Config("center_scale must be finite and >= 0".into()));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::Config("noise_std must be finite and >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.chroma_share) {
            return Err(Error::Config("chroma_share must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn n_features(&self) -> usize {
        self.channels * self.positions_per_channel
    }

    /// Class centers, `[n_classes][n_features]`.
    pub fn centers(&self) -> Vec<Vec<f64>> {
        let (ch, pos) = (self.channels, self.positions_per_channel);
        let lum_w = (1.0 - self.chroma_share).sqrt() * self.center_scale;
        // centered chroma has variance (ch - 1) / ch; rescale to unit
        let chroma_w = self.chroma_share.sqrt() * self.center_scale * (ch as f64 / (ch - 1) as f64).sqrt();
        (0..self.n_classes)
            .map(|c| {
                let mut r = rng::substream(self.seed, "data-generation/centers", c as u64);
                let lum: Vec<f64> = (0..pos).map(|_| r.sample(StandardNormal)).collect();
                let mut chroma: Vec<f64> = (0..ch * pos).map(|_| r.sample(StandardNormal)).collect();
                for p in 0..pos {
                    let mean = (0..ch).map(|k| chroma[k * pos + p]).sum::<f64>() / ch as f64;
                    for k in 0..ch {
                        chroma[k * pos + p] -= mean;
                    }
                }
                (0..ch * pos)
                    .map(|i| lum_w * lum[i % pos] + chroma_w * chroma[i])
                    .collect()
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: u64,
    pub features: Vec<f64>,
    pub label: usize,
    pub attribute: Attribute,
    pub subgroup: Option<u32>,
}

fn gen_samples(spec: &SyntheticSpec, per_class: usize, stream: &str) -> Result<Vec<Sample>> {
    spec.validate()?;
    let centers = spec.centers();
    let mut out = Vec::with_capacity(spec.n_classes * per_class);
    for (c, center) in centers.iter().enumerate() {
        let mut r = rng::substream(spec.seed, stream, c as u64);
        for _ in 0..per_class {
            let features = center
                .iter()
                .map(|&m| {
                    let z: f64 = r.sample(StandardNormal);
                    m + spec.noise_std * z
                })
                .collect();
            out.push(Sample {
                id: out.len() as u64,
                features,
                label: c,
                attribute: Attribute::Untouched,
                subgroup: None,
            });
        }
    }
    Ok(out)
}

/// `samples_per_class` untouched samples per class around the class centers.
pub fn gen_base(spec: &SyntheticSpec) -> Result<Vec<Sample>> {
    gen_samples(spec, spec.samples_per_class, "data-generation/train")
}

/// Independent draws around the same centers, for test sets.
pub fn gen_held_out(spec: &SyntheticSpec, per_class: usize) -> Result<Vec<Sample>> {
    gen_samples(spec, per_class, "data-generation/held-out")
}

/// Replace every channel value at a position by the mean across channels.
pub fn attribute_transform(features: &[f64], channels: usize) -> Result<Vec<f64>> {
    if channels == 0 || !features.len().is_multiple_of(channels) {
        return Err(Error::Usage(format!(
            "feature length {} is not divisible by {channels} channels",
            features.len()
        )));
    }
    let pos = features.len() / channels;
    let mut out = features.to_vec();
    for p in 0..pos {
        let mean = (0..channels).map(|k| features[k * pos + p]).sum::<f64>() / channels as f64;
        for k in 0..channels {
            out[k * pos + p] = mean;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SkewScheme {
    Sensitive,
    Minority,
}

impl std::str::FromStr for SkewScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sensitive" => Ok(SkewScheme::Sensitive),
            "minority" => Ok(SkewScheme::Minority),
            other => Err(Error::Config(format!(
                "unknown skew scheme {other:?} (expected sensitive or minority)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkewPlan {
    pub scheme: SkewScheme,
    /// Transformed fraction per class.
    pub class_fractions: Vec<f64>,
    /// Classes in the heavily transformed half (sensitive scheme only).
    pub skewed_classes: Vec<usize>,
}

impl SkewPlan {
    /// 95% of `skewed_classes` and 5% of the others are transformed.
    pub fn sensitive(n_classes: usize, skewed_classes: Vec<usize>) -> Result<Self> {
        Self::sensitive_with(n_classes, skewed_classes, 0.95, 0.05)
    }

    /// Sensitive scheme with the first half of the classes skewed.
    pub fn sensitive_default(n_classes: usize) -> Result<Self> {
        Self::sensitive(n_classes, (0..n_classes / 2).collect())
    }

    pub fn sensitive_with(n_classes: usize, mut skewed_classes: Vec<usize>, p_skewed: f64, p_other: f64) -> Result<Self> {
        skewed_classes.sort_unstable();
        skewed_classes.dedup();
        if !n_classes.is_multiple_of(2) || skewed_classes.len() * 2 != n_classes {
            return Err(Error::Config(format!(
                "sensitive skew needs exactly half of {n_classes} classes skewed, got {}",
                skewed_classes.len()
            )));
        }
        if let Some(&c) = skewed_classes.iter().find(|&&c| c >= n_classes) {
            return Err(Error::Config(format!("skewed class {c} out of range")));
        }
        let class_fractions = (0..n_classes)
            .map(|c| if skewed_classes.contains(&c) { p_skewed } else { p_other })
            .collect();
        let plan = Self {
            scheme: SkewScheme::Sensitive,
            class_fractions,
            skewed_classes,
        };
        plan.validate(n_classes)?;
        Ok(plan)
    }

    /// 5% of every class is transformed.
    pub fn minority(n_classes: usize) -> Result<Self> {
        Self::minority_with(n_classes, 0.05)
    }

    pub fn minority_with(n_classes: usize, p: f64) -> Result<Self> {
        let plan = Self {
            scheme: SkewScheme::Minority,
            class_fractions: vec![p; n_classes],
            skewed_classes: Vec::new(),
        };
        plan.validate(n_classes)?;
        Ok(plan)
    }

    pub fn for_scheme(scheme: SkewScheme, n_classes: usize) -> Result<Self> {
        match scheme {
            SkewScheme::Sensitive => Self::sensitive_default(n_classes),
            SkewScheme::Minority => Self::minority(n_classes),
        }
    }

    pub fn validate(&self, n_classes: usize) -> Result<()> {
        if self.class_fractions.len() != n_classes {
            return Err(Error::Config(format!(
                "skew plan covers {} classes, dataset has {n_classes}",
                self.class_fractions.len()
            )));
        }
        if let Some(p) = self.class_fractions.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Config(format!("skew fraction {p} outside [0, 1]")));
        }
        Ok(())
    }

    /// Number of samples to transform in a class of `n` samples.
    pub fn quota(&self, class: usize, n: usize) -> usize {
        ((self.class_fractions[class] * n as f64).round() as usize).min(n)
    }
}

/// Transform exactly `quota(class, n_class)` samples of each class, chosen by
/// a seeded shuffle. Samples that are already transformed count towards the
/// quota and are never transformed twice.
pub fn apply_skew(mut samples: Vec<Sample>, plan: &SkewPlan, channels: usize, seed: u64) -> Result<Vec<Sample>> {
    let n_classes = plan.class_fractions.len();
    if let Some(s) = samples.iter().find(|s| s.label >= n_classes) {
        return Err(Error::Config(format!(
            "sample label {} outside the plan's {n_classes} classes",
            s.label
        )));
    }
    for class in 0..n_classes {
        let members: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].label == class).collect();
        let quota = plan.quota(class, members.len());
        let done = members
            .iter()
            .filter(|&&i| samples[i].attribute == Attribute::Transformed)
            .count();
        let mut candidates: Vec<usize> = members
            .into_iter()
            .filter(|&i| samples[i].attribute == Attribute::Untouched)
            .collect();
        candidates.shuffle(&mut rng::substream(seed, "skew", class as u64));
        for &i in candidates.iter().take(quota.saturating_sub(done)) {
            samples[i].features = attribute_transform(&samples[i].features, channels)?;
            samples[i].attribute = Attribute::Transformed;
        }
    }
    Ok(samples)
}

/// Transform every sample (fully transformed test copy).
pub fn transform_all(samples: &[Sample], channels: usize) -> Result<Vec<Sample>> {
    samples
        .iter()
        .map(|s| {
            Ok(Sample {
                features: attribute_transform(&s.features, channels)?,
                attribute: Attribute::Transformed,
                ..s.clone()
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<Sample>,
    pub validation: Vec<Sample>,
    pub warnings: Vec<String>,
}

/// Stratified `train_parts : val_parts` split over (class, attribute) cells.
/// Within each split the input order is preserved.
pub fn split(samples: &[Sample], train_parts: u32, val_parts: u32, seed: u64) -> Result<Split> {
    if samples.is_empty() {
        return Err(Error::Usage("cannot split an empty dataset".into()));
    }
    if train_parts == 0 {
        return Err(Error::Usage("train part of the split ratio must be >= 1".into()));
    }
    let total_parts = (train_parts + val_parts) as usize;
    let mut cells: std::collections::BTreeMap<(usize, Attribute), Vec<usize>> = Default::default();
    for (i, s) in samples.iter().enumerate() {
        cells.entry((s.label, s.attribute)).or_default().push(i);
    }
    // largest-remainder allocation: per-cell shares of the validation total
    let quota = |n: usize| (n * val_parts as usize) as f64 / total_parts as f64;
    let target = quota(samples.len()).round() as usize;
    let cells: Vec<((usize, Attribute), Vec<usize>)> = cells.into_iter().collect();
    let mut n_val: Vec<usize> = cells.iter().map(|(_, idx)| quota(idx.len()).floor() as usize).collect();
    let mut by_remainder: Vec<usize> = (0..cells.len()).collect();
    by_remainder.sort_by(|&a, &b| {
        let ra = quota(cells[a].1.len()).fract();
        let rb = quota(cells[b].1.len()).fract();
        rb.total_cmp(&ra)
    });
    let short = target.saturating_sub(n_val.iter().sum());
    for &k in by_remainder.iter().take(short) {
        n_val[k] += 1;
    }

    let mut in_val = vec![false; samples.len()];
    let mut warnings = Vec::new();
    for (k, ((label, attr), mut idx)) in cells.into_iter().enumerate() {
        if val_parts > 0 && idx.len() < total_parts {
            warnings.push(format!(
                "cell (class {label}, attribute {}) has {} samples, fewer than the {train_parts}:{val_parts} ratio granularity",
                attr.as_u8(),
                idx.len()
            ));
        }
        idx.shuffle(&mut rng::substream(seed, "split", k as u64));
        for &i in idx.iter().take(n_val[k]) {
            in_val[i] = true;
        }
    }
    let (mut train, mut validation) = (Vec::new(), Vec::new());
    for (s, v) in samples.iter().zip(in_val) {
        if v {
            validation.push(s.clone());
        } else {
            train.push(s.clone());
        }
    }
    Ok(Split {
        train,
        validation,
        warnings,
    })
}

/// In-memory dataset matching the CSV file format.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub n_features: usize,
    pub n_classes: usize,
    pub channels: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(n_features: usize, n_classes: usize, channels: usize, samples: Vec<Sample>) -> Result<Self> {
        let ds = Self {
            n_features,
            n_classes,
            channels,
            samples,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || !self.n_features.is_multiple_of(self.channels) {
            return Err(Error::Schema(format!(
                "{} features do not divide into {} channels",
                self.n_features, self.channels
            )));
        }
        for s in &self.samples {
            if s.features.len() != self.n_features {
                return Err(Error::Schema(format!(
                    "sample {} has {} features, expected {}",
                    s.id,
                    s.features.len(),
                    self.n_features
                )));
            }
            if s.label >= self.n_classes {
                return Err(Error::Schema(format!(
                    "sample {} has label {} but only {} classes",
                    s.id, s.label, self.n_classes
                )));
            }
            if s.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::Schema(format!("sample {} has non-finite features", s.id)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn features(&self) -> Matrix {
        let mut data = Vec::with_capacity(self.len() * self.n_features);
        for s in &self.samples {
            data.extend_from_slice(&s.features);
        }
        Matrix::from_vec(self.len(), self.n_features, data).expect("validated shapes")
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn ids(&self) -> Vec<u64> {
        self.samples.iter().map(|s| s.id).collect()
    }

    /// Same feature schema (dimension, classes, channels).
    pub fn check_compatible(&self, other: &Dataset) -> Result<()> {
        if (self.n_features, self.n_classes, self.channels) != (other.n_features, other.n_classes, other.channels) {
            return Err(Error::Schema(format!(
                "dataset schemas differ: {}x{}x{} vs {}x{}x{} (features x classes x channels)",
                self.n_features, self.n_classes, self.channels, other.n_features, other.n_classes, other.channels
            )));
        }
        Ok(())
    }

    /// Samples whose attribute is the rarer one within their own class.
    pub fn in_class_minority(&self) -> Vec<bool> {
        let mut counts = vec![[0usize; 2]; self.n_classes];
        for s in &self.samples {
            counts[s.label][s.attribute.index()] += 1;
        }
        self.samples
            .iter()
            .map(|s| {
                let [u, t] = counts[s.label];
                let own = counts[s.label][s.attribute.index()];
                u != t && own == u.min(t)
            })
            .collect()
    }

    /// Per-class `(untouched, transformed)` counts.
    pub fn attribute_counts(&self) -> Vec<[usize; 2]> {
        let mut counts = vec![[0usize; 2]; self.n_classes];
        for s in &self.samples {
            counts[s.label][s.attribute.index()] += 1;
        }
        counts
    }

    /// Header `n_samples,n_features,n_classes,channels`, then
    /// `sample_id,label,attribute,subgroup,f_0,...,f_{d-1}` per sample.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{},{},{},{}", self.len(), self.n_features, self.n_classes, self.channels)?;
        let mut line = String::new();
        for s in &self.samples {
            use std::fmt::Write as _;
            line.clear();
            let _ = write!(line, "{},{},{},", s.id, s.label, s.attribute.as_u8());
            if let Some(g) = s.subgroup {
                let _ = write!(line, "{g}");
            }
            for f in &s.features {
                let _ = write!(line, ",{f}");
            }
            line.push('\n');
            out.write_all(line.as_bytes())?;
        }
        Ok(())
    }

    pub fn to_csv_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines().enumerate();
        let header = match lines.next() {
            Some((_, line)) => line.map_err(|e| Error::Schema(format!("line 1: {e}")))?,
            None => return Err(Error::Schema("empty dataset file".into())),
        };
        let head: Vec<usize> = header
            .trim_end()
            .split(',')
            .map(|v| v.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Schema(format!("line 1: bad header {header:?}: {e}")))?;
        let [n_samples, n_features, n_classes, channels] = head[..] else {
            return Err(Error::Schema(format!(
                "line 1: header needs 4 fields n_samples,n_features,n_classes,channels, got {header:?}"
            )));
        };
        let mut samples = Vec::with_capacity(n_samples);
        for (idx, line) in lines {
            let lineno = idx + 1;
            let line = line.map_err(|e| Error::Schema(format!("line {lineno}: {e}")))?;
            if line.is_empty() {
                continue;
            }
            let bad = |what: String| Error::Schema(format!("line {lineno}: {what}"));
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 4 + n_features {
                return Err(bad(format!("expected {} fields, got {}", 4 + n_features, fields.len())));
            }
            let id = fields[0].parse::<u64>().map_err(|e| bad(format!("sample_id: {e}")))?;
            let label = fields[1].parse::<usize>().map_err(|e| bad(format!("label: {e}")))?;
            let attr = fields[2].parse::<u8>().map_err(|e| bad(format!("attribute: {e}")))?;
            let attribute = Attribute::try_from(attr).map_err(|e| bad(e.to_string()))?;
            let subgroup = match fields[3] {
                "" => None,
                g => Some(g.parse::<u32>().map_err(|e| bad(format!("subgroup: {e}")))?),
            };
            let features = fields[4..]
                .iter()
                .map(|f| f.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| bad(format!("feature: {e}")))?;
            samples.push(Sample {
                id,
                features,
                label,
                attribute,
                subgroup,
            });
        }
        if samples.len() != n_samples {
            return Err(Error::Schema(format!(
                "header promises {n_samples} samples, file has {}",
                samples.len()
            )));
        }
        Dataset::new(n_features, n_classes, channels, samples)
    }
}

/// Everything one generated experiment needs.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub train: Dataset,
    pub validation: Dataset,
    pub test_untouched: Dataset,
    pub test_transformed: Dataset,
    pub warnings: Vec<String>,
}

/// Generate → skew → 5:1 split, plus untouched and fully transformed copies of
/// a held-out set with `test_per_class` samples per class.
pub fn build_experiment(spec: &SyntheticSpec, plan: &SkewPlan, test_per_class: usize) -> Result<ExperimentData> {
    spec.validate()?;
    plan.validate(spec.n_classes)?;
    let base = gen_base(spec)?;
    let skewed = apply_skew(base, plan, spec.channels, spec.seed)?;
    let parts = split(&skewed, 5, 1, spec.seed)?;
    let held_out = gen_held_out(spec, test_per_class)?;
    let transformed = transform_all(&held_out, spec.channels)?;
    let mk = |samples| Dataset::new(spec.n_features(), spec.n_classes, spec.channels, samples);
    Ok(ExperimentData {
        train: mk(parts.train)?,
        validation: mk(parts.validation)?,
        test_untouched: mk(held_out)?,
        test_transformed: mk(transformed)?,
        warnings: parts.warnings,
    })
}
