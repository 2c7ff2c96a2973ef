//! Embedding datasets: the EPTB file format, a Gaussian-cluster generator and
//! the split of a dataset into an incremental stage schedule.
//!
//! EPTB layout (little-endian, no padding):
//!
//! | offset | type        | field                      |
//! |--------|-------------|----------------------------|
//! | 0      | `[u8; 4]`   | magic `EPTB`               |
//! | 4      | `u32`       | version, always 1          |
//! | 8      | `u32`       | N (rows)                   |
//! | 12     | `u32`       | d_f (feature dim)          |
//! | 16     | `u32`       | num_classes                |
//! | 20     | `f32[N*d_f]`| features, row-major        |
//! | ..     | `u32[N]`    | labels                     |

use std::collections::BTreeMap;
use std::fmt;
use std::io;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{validation, EptError, Result};
use crate::rng::{stream, Stream};

pub const EPTB_MAGIC: [u8; 4] = *b"EPTB";
pub const EPTB_VERSION: u32 = 1;
pub const EPTB_HEADER_LEN: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(pub u32);

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Frozen-backbone features with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDataset {
    features: Vec<f32>,
    labels: Vec<u32>,
    num_classes: u32,
    dim: usize,
}

impl EmbeddingDataset {
    pub fn new(features: Vec<f32>, labels: Vec<u32>, num_classes: u32, dim: usize) -> Result<Self> {
        let ds = Self { features, labels, num_classes, dim };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return validation("feature dimension must be at least 1");
        }
        if self.labels.is_empty() {
            return validation("dataset must contain at least one sample");
        }
        if self.features.len() != self.labels.len() * self.dim {
            return validation(format!(
                "{} feature values do not match {} rows of dimension {}",
                self.features.len(),
                self.labels.len(),
                self.dim
            ));
        }
        if let Some((i, &l)) = self.labels.iter().enumerate().find(|(_, &l)| l >= self.num_classes) {
            return validation(format!("label {l} at row {i} is not below num_classes {}", self.num_classes));
        }
        if let Some(i) = self.features.iter().position(|v| !v.is_finite()) {
            return validation(format!("non-finite feature at row {}, column {}", i / self.dim, i % self.dim));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> u32 {
        self.num_classes
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> ClassId {
        ClassId(self.labels[i])
    }

    pub fn label_histogram(&self) -> Vec<usize> {
        let mut h = vec![0usize; self.num_classes as usize];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let n = u32::try_from(self.len()).map_err(|_| EptError::Validation("too many rows for EPTB".into()))?;
        let d = u32::try_from(self.dim).map_err(|_| EptError::Validation("dimension too large for EPTB".into()))?;
        let mut out = Vec::with_capacity(EPTB_HEADER_LEN + 4 * (self.features.len() + self.labels.len()));
        out.extend_from_slice(&EPTB_MAGIC);
        for v in [EPTB_VERSION, n, d, self.num_classes] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.features {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.labels {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let truncated = || EptError::Io(io::Error::new(io::ErrorKind::UnexpectedEof, "truncated EPTB file"));
        if bytes.len() < 4 {
            return Err(truncated());
        }
        if bytes[..4] != EPTB_MAGIC {
            return Err(EptError::Format(format!("bad magic {:02x?}, expected \"EPTB\"", &bytes[..4])));
        }
        if bytes.len() < EPTB_HEADER_LEN {
            return Err(truncated());
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        let (version, n, d, num_classes) = (word(0), word(1) as usize, word(2) as usize, word(3));
        if version != EPTB_VERSION {
            return Err(EptError::Format(format!("unsupported EPTB version {version}")));
        }
        let expected = n
            .checked_mul(d)
            .and_then(|nd| nd.checked_add(n))
            .and_then(|w| w.checked_mul(4))
            .and_then(|b| b.checked_add(EPTB_HEADER_LEN))
            .ok_or_else(|| EptError::Format("EPTB header sizes overflow".into()))?;
        if bytes.len() < expected {
            return Err(truncated());
        }
        if bytes.len() > expected {
            return Err(EptError::Format(format!("{} trailing bytes after EPTB payload", bytes.len() - expected)));
        }
        let body = &bytes[EPTB_HEADER_LEN..];
        let features = body[..4 * n * d].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let labels = body[4 * n * d..].chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect();
        Self::new(features, labels, num_classes, d)
    }
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingDataset> {
    EmbeddingDataset::from_bytes(&std::fs::read(path)?)
}

pub fn save_embeddings(dataset: &EmbeddingDataset, path: impl AsRef<Path>) -> Result<()> {
    let bytes = dataset.to_bytes()?;
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Parameters of the Gaussian-cluster generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub samples_per_class: usize,
    /// Radius of the sphere the class means are drawn on.
    pub mean_scale: f64,
    pub noise_std: f64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.dim == 0 || self.samples_per_class == 0 {
            return validation("num_classes, dim and samples_per_class must be positive");
        }
        if !(self.mean_scale > 0.0) || !self.mean_scale.is_finite() {
            return validation(format!("mean_scale must be positive, got {}", self.mean_scale));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return validation(format!("noise_std must be non-negative, got {}", self.noise_std));
        }
        Ok(())
    }
}

fn random_unit<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let g: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 1e-12 {
            return g.into_iter().map(|v| v / n).collect();
        }
    }
}

/// Class `c` gets `samples_per_class` rows `mean_c + noise`, with `mean_c`
/// uniform on the sphere of radius `mean_scale`. Rows are class-major.
pub fn generate_synthetic(spec: &SynthSpec, seed: u64) -> Result<EmbeddingDataset> {
    spec.validate()?;
    let mut rng = stream(seed, Stream::Synthetic, 0);
    let means: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|_| random_unit(&mut rng, spec.dim).into_iter().map(|v| v * spec.mean_scale).collect())
        .collect();
    let n = spec.num_classes * spec.samples_per_class;
    let mut features = Vec::with_capacity(n * spec.dim);
    let mut labels = Vec::with_capacity(n);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..spec.samples_per_class {
            for &m in mean {
                let z: f64 = rng.sample(StandardNormal);
                features.push((m + spec.noise_std * z) as f32);
            }
            labels.push(c as u32);
        }
    }
    let num_classes = u32::try_from(spec.num_classes).map_err(|_| EptError::Validation("too many classes".into()))?;
    EmbeddingDataset::new(features, labels, num_classes, spec.dim)
}

/// Per-class test count: a fixed number, or every sample not used as support.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TestCount {
    #[default]
    All,
    Count(usize),
}

impl Serialize for TestCount {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            TestCount::All => s.serialize_str("all"),
            TestCount::Count(n) => s.serialize_u64(*n as u64),
        }
    }
}

impl<'de> Deserialize<'de> for TestCount {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Count(usize),
            Word(String),
        }
        match Raw::deserialize(d)? {
            Raw::Count(n) => Ok(TestCount::Count(n)),
            Raw::Word(w) if w == "all" => Ok(TestCount::All),
            Raw::Word(w) => {
                Err(serde::de::Error::custom(format!("test_per_class must be a count or \"all\", got {w:?}")))
            }
        }
    }
}

/// Shape of the incremental schedule. Defaults follow the CUB-200 setting:
/// 100 base classes followed by ten 10-way 5-shot stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolSpec {
    pub base_classes: usize,
    pub stages: usize,
    pub ways: usize,
    pub shots: usize,
    pub test_per_class: TestCount,
    /// Support samples per base class; `None` uses every non-test sample.
    pub base_support: Option<usize>,
}

impl Default for ProtocolSpec {
    fn default() -> Self {
        Self { base_classes: 100, stages: 10, ways: 10, shots: 5, test_per_class: TestCount::All, base_support: None }
    }
}

impl ProtocolSpec {
    pub fn total_classes(&self) -> usize {
        self.base_classes + self.stages * self.ways
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_classes == 0 {
            return Err(EptError::Protocol("base_classes must be at least 1".into()));
        }
        if self.ways == 0 || self.shots == 0 {
            return Err(EptError::Protocol("ways and shots must be at least 1".into()));
        }
        if self.base_support == Some(0) {
            return Err(EptError::Protocol("base_support must be at least 1".into()));
        }
        if self.test_per_class == TestCount::All && self.base_support.is_none() {
            return Err(EptError::Protocol(
                "test_per_class \"all\" needs base_support to hold out base-class test samples".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub index: usize,
    pub class_set: Vec<ClassId>,
    /// Sorted row indices of this stage's training samples.
    pub support_indices: Vec<usize>,
    /// Sorted row indices of test samples of every class seen up to this stage.
    pub test_indices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub stages: Vec<Stage>,
}

impl StagePlan {
    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    pub fn stage_of(&self, class: ClassId) -> Option<usize> {
        self.stages.iter().position(|s| s.class_set.contains(&class))
    }
}

/// Splits `dataset` into a base stage plus `proto.stages` incremental stages.
///
/// Classes are assigned in id order: `0..base_classes` form the base stage and
/// each following block of `ways` ids forms one incremental stage. Within a
/// class, rows are shuffled with a per-class seeded stream; the trailing
/// `test_per_class` rows are held out for testing and the leading rows are
/// support.
pub fn split_protocol(dataset: &EmbeddingDataset, proto: &ProtocolSpec, seed: u64) -> Result<StagePlan> {
    proto.validate()?;
    let total = proto.total_classes();
    if total > dataset.num_classes() as usize {
        return Err(EptError::Protocol(format!(
            "protocol needs {total} classes but the dataset has {}",
            dataset.num_classes()
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); total];
    for (i, &l) in dataset.labels().iter().enumerate() {
        if (l as usize) < total {
            by_class[l as usize].push(i);
        }
    }

    let mut support: Vec<Vec<usize>> = Vec::with_capacity(total);
    let mut test: Vec<Vec<usize>> = Vec::with_capacity(total);
    for (c, rows) in by_class.iter_mut().enumerate() {
        let is_base = c < proto.base_classes;
        let n = rows.len();
        let mut rng = stream(seed, Stream::Split, c as u64);
        rows.shuffle(&mut rng);
        let want_support = if is_base { proto.base_support } else { Some(proto.shots) };
        let (n_support, n_test) = match (proto.test_per_class, want_support) {
            (TestCount::Count(t), Some(s)) => (s, t),
            (TestCount::Count(t), None) => (n.saturating_sub(t), t),
            (TestCount::All, Some(s)) => (s, n.saturating_sub(s)),
            (TestCount::All, None) => unreachable!("rejected by ProtocolSpec::validate"),
        };
        if n_support == 0 || n_test == 0 || n_support + n_test > n {
            return Err(EptError::Protocol(format!(
                "class {c} has {n} samples, cannot take {n_support} support and {n_test} test"
            )));
        }
        let mut s = rows[..n_support].to_vec();
        let mut t = rows[n - n_test..].to_vec();
        s.sort_unstable();
        t.sort_unstable();
        support.push(s);
        test.push(t);
    }

    let mut stages = Vec::with_capacity(proto.stages + 1);
    let mut seen_tests: Vec<usize> = Vec::new();
    let mut start = 0;
    for index in 0..=proto.stages {
        let width = if index == 0 { proto.base_classes } else { proto.ways };
        let classes: Vec<usize> = (start..start + width).collect();
        start += width;
        let mut support_indices: Vec<usize> = classes.iter().flat_map(|&c| support[c].iter().copied()).collect();
        support_indices.sort_unstable();
        seen_tests.extend(classes.iter().flat_map(|&c| test[c].iter().copied()));
        seen_tests.sort_unstable();
        stages.push(Stage {
            index,
            class_set: classes.iter().map(|&c| ClassId(c as u32)).collect(),
            support_indices,
            test_indices: seen_tests.clone(),
        });
    }
    Ok(StagePlan { stages })
}

/// Shifts the support rows of every incremental-stage class by `shift` along
/// a random unit direction drawn per class. Test rows and base classes are
/// untouched, so few-shot prototypes are biased away from their test data.
pub fn bias_support(dataset: &EmbeddingDataset, plan: &StagePlan, shift: f64, seed: u64) -> Result<EmbeddingDataset> {
    if !(shift >= 0.0) || !shift.is_finite() {
        return validation(format!("support bias must be non-negative, got {shift}"));
    }
    let mut out = dataset.clone();
    if shift == 0.0 {
        return Ok(out);
    }
    let dim = dataset.dim();
    let mut directions: BTreeMap<ClassId, Vec<f64>> = BTreeMap::new();
    for stage in plan.stages.iter().skip(1) {
        for &c in &stage.class_set {
            let mut rng = stream(seed, Stream::SupportBias, c.0 as u64);
            directions.insert(c, random_unit(&mut rng, dim));
        }
        for &row in &stage.support_indices {
            let u = &directions[&dataset.label(row)];
            for (v, &uj) in out.features[row * dim..(row + 1) * dim].iter_mut().zip(u) {
                *v = (*v as f64 + shift * uj) as f32;
            }
        }
    }
    out.validate()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synth(classes: usize, per_class: usize, seed: u64) -> EmbeddingDataset {
        generate_synthetic(
            &SynthSpec { num_classes: classes, dim: 4, samples_per_class: per_class, mean_scale: 5.0, noise_std: 1.0 },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn two_row_file_round_trips_exact_values() {
        let ds = EmbeddingDataset::new(vec![1., 2., 3., 4., 5., 6.], vec![0, 1], 2, 3).unwrap();
        let back = EmbeddingDataset::from_bytes(&ds.to_bytes().unwrap()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back.dim(), 3);
        assert_eq!(back.num_classes(), 2);
        assert_eq!(back.row(0), &[1., 2., 3.]);
        assert_eq!(back.row(1), &[4., 5., 6.]);
        assert_eq!(back.labels(), &[0, 1]);
    }

    #[test]
    fn bad_magic_is_format_error() {
        let mut bytes = EmbeddingDataset::new(vec![0.5], vec![0], 1, 1).unwrap().to_bytes().unwrap();
        bytes[0] = b'X';
        assert!(matches!(EmbeddingDataset::from_bytes(&bytes), Err(EptError::Format(_))));
    }

    #[test]
    fn bad_version_is_format_error() {
        let mut bytes = EmbeddingDataset::new(vec![0.5], vec![0], 1, 1).unwrap().to_bytes().unwrap();
        bytes[4] = 2;
        assert!(matches!(EmbeddingDataset::from_bytes(&bytes), Err(EptError::Format(_))));
    }

    #[test]
    fn truncated_file_is_io_error() {
        let bytes = synth(2, 3, 1).to_bytes().unwrap();
        for cut in [2, 10, bytes.len() - 1] {
            assert!(matches!(EmbeddingDataset::from_bytes(&bytes[..cut]), Err(EptError::Io(_))), "cut {cut}");
        }
    }

    #[test]
    fn label_out_of_range_rejected_on_load() {
        let mut bytes = EmbeddingDataset::new(vec![0.5], vec![0], 1, 1).unwrap().to_bytes().unwrap();
        let n = bytes.len();
        bytes[n - 4] = 1;
        assert!(matches!(EmbeddingDataset::from_bytes(&bytes), Err(EptError::Validation(_))));
    }

    #[test]
    fn non_finite_feature_rejected_on_load() {
        let mut bytes = EmbeddingDataset::new(vec![0.5], vec![0], 1, 1).unwrap().to_bytes().unwrap();
        bytes[20..24].copy_from_slice(&f32::INFINITY.to_le_bytes());
        assert!(matches!(EmbeddingDataset::from_bytes(&bytes), Err(EptError::Validation(_))));
    }

    #[test]
    fn single_sample_file_size() {
        let ds = EmbeddingDataset::new(vec![0.0], vec![0], 1, 1).unwrap();
        assert_eq!(ds.to_bytes().unwrap().len(), EPTB_HEADER_LEN + 4 + 4);
    }

    #[test]
    fn nan_feature_rejected_before_write() {
        let ds = EmbeddingDataset { features: vec![f32::NAN], labels: vec![0], num_classes: 1, dim: 1 };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nan.eptb");
        assert!(matches!(save_embeddings(&ds, &path), Err(EptError::Validation(_))));
        assert!(!path.exists());
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let ds = synth(5, 7, 7);
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.eptb"), dir.path().join("b.eptb"));
        save_embeddings(&ds, &a).unwrap();
        let back = load_embeddings(&a).unwrap();
        assert_eq!(back, ds);
        save_embeddings(&back, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let ds = synth(1, 1, 0);
        let r = save_embeddings(&ds, "/nonexistent-dir/x/y.eptb");
        assert!(matches!(r, Err(EptError::Io(_))));
    }

    #[test]
    fn zero_noise_rows_equal_class_mean() {
        let spec = SynthSpec { num_classes: 2, dim: 5, samples_per_class: 3, mean_scale: 2.0, noise_std: 0.0 };
        let ds = generate_synthetic(&spec, 3).unwrap();
        for c in 0..2 {
            let rows: Vec<&[f32]> = (0..ds.len()).filter(|&i| ds.labels()[i] == c).map(|i| ds.row(i)).collect();
            assert_eq!(rows.len(), 3);
            assert!(rows.iter().all(|r| *r == rows[0]));
            let norm = rows[0].iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            assert!((norm - 2.0).abs() < 1e-5);
        }
    }

    #[test]
    fn generator_is_deterministic() {
        assert_eq!(synth(3, 4, 11), synth(3, 4, 11));
        assert_ne!(synth(3, 4, 11), synth(3, 4, 12));
    }

    #[test]
    fn within_class_std_matches_noise() {
        let spec = SynthSpec { num_classes: 2, dim: 32, samples_per_class: 1000, mean_scale: 10.0, noise_std: 1.0 };
        let ds = generate_synthetic(&spec, 5).unwrap();
        for c in 0..2u32 {
            let rows: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels()[i] == c).collect();
            for j in 0..32 {
                let xs: Vec<f64> = rows.iter().map(|&i| ds.row(i)[j] as f64).collect();
                let mean = xs.iter().sum::<f64>() / xs.len() as f64;
                let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
                assert!((var.sqrt() - 1.0).abs() <= 0.1, "class {c} coord {j}: std {}", var.sqrt());
            }
        }
    }

    #[test]
    fn split_counts_for_small_protocol() {
        let ds = synth(20, 12, 2);
        let proto = ProtocolSpec {
            base_classes: 10,
            stages: 5,
            ways: 2,
            shots: 5,
            test_per_class: TestCount::Count(4),
            base_support: None,
        };
        let plan = split_protocol(&ds, &proto, 9).unwrap();
        let class_counts: Vec<usize> = plan.stages.iter().map(|s| s.class_set.len()).collect();
        assert_eq!(class_counts, vec![10, 2, 2, 2, 2, 2]);
        let test_label_counts: Vec<usize> = plan
            .stages
            .iter()
            .map(|s| s.test_indices.iter().map(|&i| ds.labels()[i]).collect::<std::collections::BTreeSet<_>>().len())
            .collect();
        assert_eq!(test_label_counts, vec![10, 12, 14, 16, 18, 20]);
        assert_eq!(plan.stages[0].support_indices.len(), 10 * 8);
        for s in &plan.stages[1..] {
            assert_eq!(s.support_indices.len(), 2 * 5);
        }
    }

    #[test]
    fn cub_shaped_protocol_has_eleven_stages() {
        let ds = synth(200, 10, 4);
        let proto = ProtocolSpec { test_per_class: TestCount::Count(3), ..ProtocolSpec::default() };
        assert_eq!(split_protocol(&ds, &proto, 0).unwrap().len(), 11);
    }

    #[test]
    fn too_many_classes_is_protocol_error() {
        let ds = synth(20, 12, 2);
        let proto = ProtocolSpec {
            base_classes: 11,
            stages: 5,
            ways: 2,
            shots: 5,
            test_per_class: TestCount::Count(4),
            base_support: None,
        };
        assert!(matches!(split_protocol(&ds, &proto, 0), Err(EptError::Protocol(_))));
    }

    #[test]
    fn too_few_samples_is_protocol_error() {
        let ds = synth(4, 6, 2);
        let proto = ProtocolSpec {
            base_classes: 2,
            stages: 1,
            ways: 2,
            shots: 5,
            test_per_class: TestCount::Count(2),
            base_support: None,
        };
        assert!(matches!(split_protocol(&ds, &proto, 0), Err(EptError::Protocol(_))));
    }

    #[test]
    fn all_test_mode_uses_every_non_support_row() {
        let ds = synth(4, 9, 2);
        let proto = ProtocolSpec {
            base_classes: 2,
            stages: 1,
            ways: 2,
            shots: 3,
            test_per_class: TestCount::All,
            base_support: Some(4),
        };
        let plan = split_protocol(&ds, &proto, 0).unwrap();
        assert_eq!(plan.stages[0].support_indices.len(), 8);
        assert_eq!(plan.stages[1].support_indices.len(), 6);
        assert_eq!(plan.stages[1].test_indices.len(), 2 * 5 + 2 * 6);
        let bad = ProtocolSpec { base_support: None, ..proto };
        assert!(matches!(split_protocol(&ds, &bad, 0), Err(EptError::Protocol(_))));
    }

    #[test]
    fn test_count_json_forms() {
        assert_eq!(serde_json::from_str::<TestCount>("\"all\"").unwrap(), TestCount::All);
        assert_eq!(serde_json::from_str::<TestCount>("50").unwrap(), TestCount::Count(50));
        assert!(serde_json::from_str::<TestCount>("\"most\"").is_err());
        assert_eq!(serde_json::to_string(&TestCount::Count(3)).unwrap(), "3");
    }

    #[test]
    fn support_bias_moves_only_incremental_support() {
        let ds = synth(4, 10, 1);
        let proto = ProtocolSpec {
            base_classes: 2,
            stages: 1,
            ways: 2,
            shots: 3,
            test_per_class: TestCount::Count(4),
            base_support: None,
        };
        let plan = split_protocol(&ds, &proto, 0).unwrap();
        let biased = bias_support(&ds, &plan, 1.5, 0).unwrap();
        let moved: Vec<usize> = (0..ds.len()).filter(|&i| ds.row(i) != biased.row(i)).collect();
        assert_eq!(moved, plan.stages[1].support_indices);
        for &i in &moved {
            let d: f64 = ds.row(i).iter().zip(biased.row(i)).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum();
            assert!((d.sqrt() - 1.5).abs() < 1e-5);
        }
    }
}
