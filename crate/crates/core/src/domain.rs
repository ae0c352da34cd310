//! Domain value types shared by every stage of the pipeline.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;
use crate::synthdata::SyntheticConfig;

/// One (class, attribute) partition of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupSpec {
    pub group_id: u32,
    pub class_id: u32,
    pub attribute_id: u32,
    pub count: usize,
    /// Minority group whose attribute disagrees with the class's majority pattern.
    pub is_spurious: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExternalTag {
    External,
}

/// Where the samples of a manifest came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GeneratorConfig {
    Synthetic(SyntheticConfig),
    External(ExternalTag),
}

impl GeneratorConfig {
    pub fn external() -> Self {
        GeneratorConfig::External(ExternalTag::External)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub name: String,
    pub n_samples: usize,
    pub n_classes: usize,
    pub groups: Vec<GroupSpec>,
    pub generator_config: GeneratorConfig,
    pub seed: u64,
}

impl DatasetManifest {
    pub fn group(&self, group_id: u32) -> Option<&GroupSpec> {
        self.groups.iter().find(|g| g.group_id == group_id)
    }

    pub fn n_attributes(&self) -> usize {
        self.groups
            .iter()
            .map(|g| g.attribute_id as usize + 1)
            .max()
            .unwrap_or(0)
    }

    pub fn spurious_flags(&self) -> BTreeMap<u32, bool> {
        self.groups
            .iter()
            .map(|g| (g.group_id, g.is_spurious))
            .collect()
    }

    /// Pretty JSON with a trailing newline; stable under parse and re-serialize.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            path: "<manifest>".into(),
            line: e.line() as u64,
            message: e.to_string(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fsutil::write_atomic_str(path, &self.to_json())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fsutil::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.into(),
            line: e.line() as u64,
            message: e.to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub sample_id: u64,
    pub features: Vec<f64>,
    pub label: u32,
    pub group: u32,
    pub attribute: u32,
}

/// A manifest together with the samples it describes.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<SampleRecord>,
}

impl Dataset {
    pub fn n_features(&self) -> usize {
        self.samples.first().map_or(0, |s| s.features.len())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Writes `<stem>.csv` and `<stem>.manifest.json` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        write_samples_csv(&dir.join(format!("{stem}.csv")), &self.samples)?;
        self.manifest
            .write(&dir.join(format!("{stem}.manifest.json")))
    }

    pub fn read(dir: &Path, stem: &str) -> Result<Self> {
        let manifest = DatasetManifest::read(&dir.join(format!("{stem}.manifest.json")))?;
        let samples = read_samples_csv(&dir.join(format!("{stem}.csv")))?;
        let data = Dataset { manifest, samples };
        let report = validate_manifest(&data.manifest, &data.samples);
        if !report.is_ok() {
            return Err(Error::Validation(report.to_string()));
        }
        Ok(data)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    EmptySampleSet,
    CountMismatch {
        expected: usize,
        found: usize,
    },
    GroupCountMismatch {
        group_id: u32,
        expected: usize,
        found: usize,
    },
    UnknownGroup {
        sample_id: u64,
        group_id: u32,
    },
    UnknownClass {
        sample_id: u64,
        class_id: u32,
    },
    InconsistentGroup {
        sample_id: u64,
        group_id: u32,
    },
    DimensionMismatch {
        sample_id: u64,
        expected: usize,
        found: usize,
    },
    DuplicateGroupId(u32),
    DuplicateGroupPair {
        class_id: u32,
        attribute_id: u32,
    },
    GroupClassOutOfRange {
        group_id: u32,
        class_id: u32,
    },
    TooFewClasses(usize),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptySampleSet => write!(f, "empty sample set"),
            Violation::CountMismatch { expected, found } => {
                write!(f, "count mismatch: manifest says {expected}, found {found}")
            }
            Violation::GroupCountMismatch {
                group_id,
                expected,
                found,
            } => write!(
                f,
                "group count mismatch: group {group_id} manifest {expected}, found {found}"
            ),
            Violation::UnknownGroup {
                sample_id,
                group_id,
            } => write!(f, "unknown group: sample {sample_id} has group {group_id}"),
            Violation::UnknownClass {
                sample_id,
                class_id,
            } => write!(f, "unknown class: sample {sample_id} has class {class_id}"),
            Violation::InconsistentGroup {
                sample_id,
                group_id,
            } => write!(
                f,
                "inconsistent group: sample {sample_id} label/attribute disagree with group {group_id}"
            ),
            Violation::DimensionMismatch {
                sample_id,
                expected,
                found,
            } => write!(
                f,
                "dimension mismatch: sample {sample_id} has {found} features, expected {expected}"
            ),
            Violation::DuplicateGroupId(g) => write!(f, "duplicate group id {g}"),
            Violation::DuplicateGroupPair {
                class_id,
                attribute_id,
            } => write!(
                f,
                "duplicate group pair (class {class_id}, attribute {attribute_id})"
            ),
            Violation::GroupClassOutOfRange { group_id, class_id } => {
                write!(f, "group {group_id} references class {class_id} out of range")
            }
            Violation::TooFewClasses(k) => write!(f, "n_classes = {k} < 2"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_ok() {
            return write!(f, "ok");
        }
        let parts: Vec<String> = self.violations.iter().map(|v| v.to_string()).collect();
        write!(f, "{}", parts.join("; "))
    }
}

/// Checks a manifest against the samples it claims to describe.
///
/// Violations are returned as data; this never fails.
pub fn validate_manifest(manifest: &DatasetManifest, samples: &[SampleRecord]) -> ValidationReport {
    let mut violations = Vec::new();
    if samples.is_empty() {
        violations.push(Violation::EmptySampleSet);
    }
    if manifest.n_classes < 2 {
        violations.push(Violation::TooFewClasses(manifest.n_classes));
    }
    if manifest.n_samples != samples.len() {
        violations.push(Violation::CountMismatch {
            expected: manifest.n_samples,
            found: samples.len(),
        });
    }

    let n_groups = manifest.groups.len() as u32;
    let mut by_id: BTreeMap<u32, &GroupSpec> = BTreeMap::new();
    let mut pairs = BTreeMap::new();
    for g in &manifest.groups {
        if by_id.insert(g.group_id, g).is_some() {
            violations.push(Violation::DuplicateGroupId(g.group_id));
        }
        if pairs
            .insert((g.class_id, g.attribute_id), g.group_id)
            .is_some()
        {
            violations.push(Violation::DuplicateGroupPair {
                class_id: g.class_id,
                attribute_id: g.attribute_id,
            });
        }
        if g.class_id as usize >= manifest.n_classes {
            violations.push(Violation::GroupClassOutOfRange {
                group_id: g.group_id,
                class_id: g.class_id,
            });
        }
    }

    let dim = samples.first().map_or(0, |s| s.features.len());
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for s in samples {
        if s.features.len() != dim {
            violations.push(Violation::DimensionMismatch {
                sample_id: s.sample_id,
                expected: dim,
                found: s.features.len(),
            });
        }
        if s.label as usize >= manifest.n_classes {
            violations.push(Violation::UnknownClass {
                sample_id: s.sample_id,
                class_id: s.label,
            });
        }
        match by_id.get(&s.group) {
            Some(g) if s.group < n_groups => {
                if g.class_id != s.label || g.attribute_id != s.attribute {
                    violations.push(Violation::InconsistentGroup {
                        sample_id: s.sample_id,
                        group_id: s.group,
                    });
                }
                *counts.entry(s.group).or_default() += 1;
            }
            _ => violations.push(Violation::UnknownGroup {
                sample_id: s.sample_id,
                group_id: s.group,
            }),
        }
    }

    for g in &manifest.groups {
        let found = counts.get(&g.group_id).copied().unwrap_or(0);
        if found != g.count {
            violations.push(Violation::GroupCountMismatch {
                group_id: g.group_id,
                expected: g.count,
                found,
            });
        }
    }

    ValidationReport { violations }
}

/// Seeded PRNG stream: ChaCha20 keyed by `seed`, on the 64-bit stream `stream_id`.
///
/// The key is expanded from `seed` with `rand_core`'s documented PCG32-based
/// `seed_from_u64`, so sequences are identical across platforms.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngStream {
    pub algorithm_id: String,
    pub seed: u64,
    pub stream_id: u64,
}

pub const RNG_ALGORITHM: &str = "chacha20";

fn fnv1a(mut hash: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;

impl RngStream {
    /// Root stream for `(seed, purpose)`.
    pub fn new(seed: u64, purpose: &str) -> Self {
        RngStream {
            algorithm_id: RNG_ALGORITHM.to_string(),
            seed,
            stream_id: fnv1a(FNV_OFFSET, purpose.as_bytes()),
        }
    }

    /// Independent sub-stream tagged by `purpose`.
    pub fn child(&self, purpose: &str) -> Self {
        let h = fnv1a(FNV_OFFSET, &self.stream_id.to_le_bytes());
        RngStream {
            algorithm_id: self.algorithm_id.clone(),
            seed: self.seed,
            stream_id: fnv1a(fnv1a(h, b"/"), purpose.as_bytes()),
        }
    }

    /// Independent sub-stream tagged by `(purpose, index)`.
    pub fn indexed(&self, purpose: &str, index: u64) -> Self {
        let c = self.child(purpose);
        RngStream {
            stream_id: fnv1a(c.stream_id, &index.to_le_bytes()),
            ..c
        }
    }

    pub fn rng(&self) -> ChaCha20Rng {
        assert_eq!(self.algorithm_id, RNG_ALGORITHM, "unsupported PRNG");
        let mut rng = ChaCha20Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id);
        rng
    }
}

pub fn write_samples_csv(path: &Path, samples: &[SampleRecord]) -> Result<()> {
    let dim = samples.first().map_or(0, |s| s.features.len());
    let mut out = String::with_capacity(samples.len() * (dim + 4) * 12);
    out.push_str("sample_id,group_id,class_id,attribute_id");
    for j in 0..dim {
        out.push_str(&format!(",f{j}"));
    }
    out.push('\n');
    for s in samples {
        out.push_str(&format!(
            "{},{},{},{}",
            s.sample_id, s.group, s.label, s.attribute
        ));
        for v in &s.features {
            out.push(',');
            out.push_str(&format!("{v:?}"));
        }
        out.push('\n');
    }
    fsutil::write_atomic_str(path, &out)
}

fn parse_field<T: std::str::FromStr>(
    path: &Path,
    line: u64,
    name: &str,
    raw: Option<&str>,
) -> Result<T> {
    let raw = raw.ok_or_else(|| Error::Parse {
        path: path.into(),
        line,
        message: format!("missing field {name}"),
    })?;
    raw.trim().parse().map_err(|_| Error::Parse {
        path: path.into(),
        line,
        message: format!("bad value {raw:?} for {name}"),
    })
}

pub fn read_samples_csv(path: &Path) -> Result<Vec<SampleRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Parse {
            path: path.into(),
            line: 1,
            message: e.to_string(),
        })?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse {
            path: path.into(),
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let fixed = ["sample_id", "group_id", "class_id", "attribute_id"];
    for (i, name) in fixed.iter().enumerate() {
        if headers.get(i) != Some(name) {
            return Err(Error::Parse {
                path: path.into(),
                line: 1,
                message: format!("expected column {name} at position {i}"),
            });
        }
    }
    for (j, h) in headers.iter().skip(fixed.len()).enumerate() {
        if h != format!("f{j}") {
            return Err(Error::Parse {
                path: path.into(),
                line: 1,
                message: format!("expected feature column f{j}, got {h}"),
            });
        }
    }
    let dim = headers.len() - fixed.len();
    let mut samples = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::Parse {
            path: path.into(),
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let sample_id = parse_field(path, line, "sample_id", rec.get(0))?;
        let group = parse_field(path, line, "group_id", rec.get(1))?;
        let label = parse_field(path, line, "class_id", rec.get(2))?;
        let attribute = parse_field(path, line, "attribute_id", rec.get(3))?;
        let mut features = Vec::with_capacity(dim);
        for j in 0..dim {
            let v: f64 = parse_field(path, line, &format!("f{j}"), rec.get(4 + j))?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    path: path.into(),
                    line,
                    message: format!("non-finite feature f{j}"),
                });
            }
            features.push(v);
        }
        samples.push(SampleRecord {
            sample_id,
            features,
            label,
            group,
            attribute,
        });
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn four_group_manifest(counts: [usize; 4]) -> DatasetManifest {
        let groups = (0..4u32)
            .map(|g| GroupSpec {
                group_id: g,
                class_id: g / 2,
                attribute_id: g % 2,
                count: counts[g as usize],
                is_spurious: (g / 2) != (g % 2),
            })
            .collect();
        DatasetManifest {
            name: "toy".into(),
            n_samples: counts.iter().sum(),
            n_classes: 2,
            groups,
            generator_config: GeneratorConfig::external(),
            seed: 7,
        }
    }

    fn samples_for(counts: [usize; 4]) -> Vec<SampleRecord> {
        let mut out = Vec::new();
        let mut id = 0;
        for g in 0..4u32 {
            for _ in 0..counts[g as usize] {
                out.push(SampleRecord {
                    sample_id: id,
                    features: vec![id as f64, 1.0],
                    label: g / 2,
                    group: g,
                    attribute: g % 2,
                });
                id += 1;
            }
        }
        out
    }

    #[test]
    fn consistent_manifest_is_ok() {
        let m = four_group_manifest([3, 2, 2, 3]);
        let s = samples_for([3, 2, 2, 3]);
        assert!(validate_manifest(&m, &s).is_ok());
    }

    #[test]
    fn missing_record_is_count_mismatch() {
        let m = four_group_manifest([3, 2, 2, 3]);
        let mut s = samples_for([3, 2, 2, 3]);
        s.pop();
        let r = validate_manifest(&m, &s);
        assert!(r.violations.contains(&Violation::CountMismatch {
            expected: 10,
            found: 9
        }));
        assert!(r.to_string().contains("count mismatch"));
    }

    #[test]
    fn out_of_range_group_is_unknown() {
        let m = four_group_manifest([3, 2, 2, 3]);
        let mut s = samples_for([3, 2, 2, 3]);
        s[0].group = 7;
        let r = validate_manifest(&m, &s);
        assert!(r
            .violations
            .iter()
            .any(|v| matches!(v, Violation::UnknownGroup { group_id: 7, .. })));
        assert!(r.to_string().contains("unknown group"));
    }

    #[test]
    fn ragged_features_are_dimension_mismatch() {
        let m = four_group_manifest([3, 2, 2, 3]);
        let mut s = samples_for([3, 2, 2, 3]);
        s[4].features.push(0.0);
        let r = validate_manifest(&m, &s);
        assert!(r
            .violations
            .iter()
            .any(|v| matches!(v, Violation::DimensionMismatch { found: 3, .. })));
    }

    #[test]
    fn manifest_round_trip_is_byte_identical() {
        let m = four_group_manifest([3, 2, 2, 3]);
        let text = m.to_json();
        let back = DatasetManifest::from_json(&text).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_json(), text);
    }

    #[test]
    fn rng_streams_are_reproducible_and_independent() {
        let a = RngStream::new(42, "split");
        let b = RngStream::new(42, "split");
        let c = a.indexed("model", 0);
        let d = a.indexed("model", 1);
        let xs: Vec<u64> = a.rng().random_iter().take(8).collect();
        let ys: Vec<u64> = b.rng().random_iter().take(8).collect();
        assert_eq!(xs, ys);
        let cs: Vec<u64> = c.rng().random_iter().take(8).collect();
        let ds: Vec<u64> = d.rng().random_iter().take(8).collect();
        assert_ne!(cs, ds);
        assert_ne!(cs, xs);
    }

    #[test]
    fn rng_stream_sequence_is_pinned() {
        // Guards against silent changes in the PRNG or seeding scheme.
        let mut rng = RngStream::new(0, "pin").rng();
        let first: u64 = rng.random();
        assert_eq!(first, 3_858_463_916_517_758_302);
    }

    #[test]
    fn samples_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = samples_for([1, 1, 1, 1]);
        s[0].features = vec![0.1 + 0.2, -1e-300];
        let p = dir.path().join("d.csv");
        write_samples_csv(&p, &s).unwrap();
        assert_eq!(read_samples_csv(&p).unwrap(), s);
    }

    #[test]
    fn samples_csv_bad_value_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        std::fs::write(
            &p,
            "sample_id,group_id,class_id,attribute_id,f0\n0,0,0,0,1.0\n1,0,0,0,abc\n",
        )
        .unwrap();
        match read_samples_csv(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
