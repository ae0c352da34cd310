//! Synthetic datasets with a controllable spurious correlation.
//!
//! Features are laid out as `[core | spurious | noise]`. The core block
//! carries the class signal, the spurious block carries the attribute signal,
//! and in the training split the attribute agrees with the class's natural
//! pattern with probability `spur_strength`. Test attributes are drawn
//! independently of the class.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::domain::{
    Dataset, DatasetManifest, GeneratorConfig, GroupSpec, RngStream, SampleRecord,
};
use crate::error::{Error, Result};

fn default_attributes() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub n_classes: usize,
    /// Number of distinct spurious attribute values.
    #[serde(default = "default_attributes")]
    pub n_attributes: usize,
    pub d_core: usize,
    pub d_spur: usize,
    pub d_noise: usize,
    pub core_sep: f64,
    pub spur_sep: f64,
    pub core_std: f64,
    pub spur_std: f64,
    pub noise_std: f64,
    /// Probability that a training sample carries its class's majority attribute.
    pub spur_strength: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_classes: 2,
            n_attributes: 2,
            d_core: 10,
            d_spur: 5,
            d_noise: 5,
            core_sep: 1.0,
            spur_sep: 2.0,
            core_std: 1.0,
            spur_std: 1.0,
            noise_std: 1.0,
            spur_strength: 0.95,
            n_train: 2000,
            n_test: 2000,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let k = self.n_classes;
        if k < 2 {
            return Err(Error::InvalidArgument(format!("n_classes = {k} < 2")));
        }
        if self.n_attributes < 1 {
            return Err(Error::InvalidArgument("n_attributes must be >= 1".into()));
        }
        if self.d_core < 1 || self.d_spur < 1 {
            return Err(Error::InvalidArgument(
                "d_core and d_spur must be >= 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.spur_strength) {
            return Err(Error::InvalidArgument(format!(
                "spur_strength = {} outside [0, 1]",
                self.spur_strength
            )));
        }
        if self.n_train < 2 * k || self.n_test < 2 * k {
            return Err(Error::InvalidArgument(format!(
                "n_train and n_test must be >= 2 * n_classes = {}",
                2 * k
            )));
        }
        for (name, v) in [
            ("core_std", self.core_std),
            ("spur_std", self.spur_std),
            ("noise_std", self.noise_std),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} = {v} must be >= 0")));
            }
        }
        if k > self.d_core {
            return Err(Error::Capacity(format!(
                "{k} classes need {k} one-hot directions but d_core = {}",
                self.d_core
            )));
        }
        if self.n_attributes > self.d_spur {
            return Err(Error::Capacity(format!(
                "{} attributes need as many one-hot directions but d_spur = {}",
                self.n_attributes, self.d_spur
            )));
        }
        Ok(())
    }

    pub fn n_features(&self) -> usize {
        self.d_core + self.d_spur + self.d_noise
    }

    /// Majority attribute of class `y`.
    pub fn pattern(&self, y: u32) -> u32 {
        y % self.n_attributes as u32
    }

    pub fn group_id(&self, y: u32, a: u32) -> u32 {
        y * self.n_attributes as u32 + a
    }
}

/// Train and test splits drawn from one [`SyntheticConfig`].
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSplit {
    pub train: Dataset,
    pub test: Dataset,
}

fn build_manifest(
    name: String,
    cfg: &SyntheticConfig,
    samples: &[SampleRecord],
) -> DatasetManifest {
    let mut counts = vec![0usize; cfg.n_classes * cfg.n_attributes];
    for s in samples {
        counts[s.group as usize] += 1;
    }
    let mut groups = Vec::with_capacity(counts.len());
    for y in 0..cfg.n_classes as u32 {
        for a in 0..cfg.n_attributes as u32 {
            let g = cfg.group_id(y, a);
            groups.push(GroupSpec {
                group_id: g,
                class_id: y,
                attribute_id: a,
                count: counts[g as usize],
                is_spurious: a != cfg.pattern(y),
            });
        }
    }
    DatasetManifest {
        name,
        n_samples: samples.len(),
        n_classes: cfg.n_classes,
        groups,
        generator_config: GeneratorConfig::Synthetic(cfg.clone()),
        seed: cfg.seed,
    }
}

fn draw_samples(
    cfg: &SyntheticConfig,
    n: usize,
    first_id: u64,
    train: bool,
    stream: &RngStream,
) -> Vec<SampleRecord> {
    let mut rng = stream.rng();
    let n_attr = cfg.n_attributes as u32;
    let k = cfg.n_classes as u32;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let y = rng.random_range(0..k);
        let a = if train {
            let majority = cfg.pattern(y);
            if n_attr == 1 || rng.random::<f64>() < cfg.spur_strength {
                majority
            } else {
                // uniform over the other attributes
                let r = rng.random_range(0..n_attr - 1);
                if r >= majority {
                    r + 1
                } else {
                    r
                }
            }
        } else {
            rng.random_range(0..n_attr)
        };
        let mut features = Vec::with_capacity(cfg.n_features());
        for j in 0..cfg.d_core {
            let mean = if j == y as usize { cfg.core_sep } else { 0.0 };
            let z: f64 = StandardNormal.sample(&mut rng);
            features.push(mean + cfg.core_std * z);
        }
        for j in 0..cfg.d_spur {
            let mean = if j == a as usize { cfg.spur_sep } else { 0.0 };
            let z: f64 = StandardNormal.sample(&mut rng);
            features.push(mean + cfg.spur_std * z);
        }
        for _ in 0..cfg.d_noise {
            let z: f64 = StandardNormal.sample(&mut rng);
            features.push(cfg.noise_std * z);
        }
        out.push(SampleRecord {
            sample_id: first_id + i as u64,
            features,
            label: y,
            group: cfg.group_id(y, a),
            attribute: a,
        });
    }
    out
}

/// Draws a train/test pair. Train ids are `0..n_train`, test ids follow.
pub fn generate_spurious_dataset(cfg: &SyntheticConfig) -> Result<SyntheticSplit> {
    cfg.validate()?;
    let root = RngStream::new(cfg.seed, "synthdata");
    let train = draw_samples(cfg, cfg.n_train, 0, true, &root.child("train"));
    let test = draw_samples(
        cfg,
        cfg.n_test,
        cfg.n_train as u64,
        false,
        &root.child("test"),
    );
    let name = format!("synthetic-k{}", cfg.n_classes);
    Ok(SyntheticSplit {
        train: Dataset {
            manifest: build_manifest(format!("{name}-train"), cfg, &train),
            samples: train,
        },
        test: Dataset {
            manifest: build_manifest(format!("{name}-test"), cfg, &test),
            samples: test,
        },
    })
}

/// Contiguous-block class map `c -> c / ceil(K / k_new)`.
pub fn merged_class(class: u32, n_classes: usize, k_new: usize) -> u32 {
    let block = n_classes.div_ceil(k_new) as u32;
    class / block
}

/// Collapses classes in contiguous blocks, keeping features and ids intact.
///
/// A merged group `(c', a)` is non-spurious iff some original class folded
/// into `c'` had `a` as its majority attribute.
pub fn merge_classes(data: &Dataset, k_new: usize) -> Result<Dataset> {
    let k = data.manifest.n_classes;
    if k_new < 2 || k_new > k {
        return Err(Error::InvalidArgument(format!(
            "cannot merge {k} classes into {k_new}"
        )));
    }
    let block = k.div_ceil(k_new);
    let produced = k.div_ceil(block);
    if produced != k_new {
        return Err(Error::InvalidArgument(format!(
            "blocks of {block} turn {k} classes into {produced}, not {k_new}"
        )));
    }
    let n_attr = data.manifest.n_attributes().max(1);
    let map = |c: u32| merged_class(c, k, k_new);

    let natural: BTreeSet<(u32, u32)> = data
        .manifest
        .groups
        .iter()
        .filter(|g| !g.is_spurious)
        .map(|g| (map(g.class_id), g.attribute_id))
        .collect();

    let gid = |c: u32, a: u32| c * n_attr as u32 + a;
    let samples: Vec<SampleRecord> = data
        .samples
        .iter()
        .map(|s| {
            let c = map(s.label);
            SampleRecord {
                sample_id: s.sample_id,
                features: s.features.clone(),
                label: c,
                group: gid(c, s.attribute),
                attribute: s.attribute,
            }
        })
        .collect();

    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for s in &samples {
        *counts.entry(s.group).or_default() += 1;
    }
    let mut groups = Vec::new();
    for c in 0..k_new as u32 {
        for a in 0..n_attr as u32 {
            let g = gid(c, a);
            groups.push(GroupSpec {
                group_id: g,
                class_id: c,
                attribute_id: a,
                count: counts.get(&g).copied().unwrap_or(0),
                is_spurious: !natural.contains(&(c, a)),
            });
        }
    }
    Ok(Dataset {
        manifest: DatasetManifest {
            name: format!("{}-merged{k_new}", data.manifest.name),
            n_samples: samples.len(),
            n_classes: k_new,
            groups,
            generator_config: data.manifest.generator_config.clone(),
            seed: data.manifest.seed,
        },
        samples,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupCount {
    pub group_id: u32,
    pub class_id: u32,
    pub attribute_id: u32,
    pub is_spurious: bool,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupStats {
    pub groups: Vec<GroupCount>,
    pub class_counts: Vec<usize>,
    pub attribute_counts: Vec<usize>,
}

/// Per-group counts plus class and attribute marginals, counted from the samples.
///
/// Every manifest group is listed, including empty ones.
pub fn group_stats(data: &Dataset) -> GroupStats {
    let n_attr = data.manifest.n_attributes();
    let mut by_group: BTreeMap<u32, usize> = BTreeMap::new();
    let mut class_counts = vec![0; data.manifest.n_classes];
    let mut attribute_counts = vec![0; n_attr];
    for s in &data.samples {
        *by_group.entry(s.group).or_default() += 1;
        if let Some(c) = class_counts.get_mut(s.label as usize) {
            *c += 1;
        }
        if let Some(c) = attribute_counts.get_mut(s.attribute as usize) {
            *c += 1;
        }
    }
    let groups = data
        .manifest
        .groups
        .iter()
        .map(|g| GroupCount {
            group_id: g.group_id,
            class_id: g.class_id,
            attribute_id: g.attribute_id,
            is_spurious: g.is_spurious,
            count: by_group.get(&g.group_id).copied().unwrap_or(0),
        })
        .collect();
    GroupStats {
        groups,
        class_counts,
        attribute_counts,
    }
}

/// Plug-in mutual information (nats) between class and attribute.
pub fn label_attribute_mutual_information(data: &Dataset) -> f64 {
    let n = data.samples.len() as f64;
    if n == 0.0 {
        return 0.0;
    }
    let mut joint: BTreeMap<(u32, u32), f64> = BTreeMap::new();
    let mut py: BTreeMap<u32, f64> = BTreeMap::new();
    let mut pa: BTreeMap<u32, f64> = BTreeMap::new();
    for s in &data.samples {
        *joint.entry((s.label, s.attribute)).or_default() += 1.0;
        *py.entry(s.label).or_default() += 1.0;
        *pa.entry(s.attribute).or_default() += 1.0;
    }
    joint
        .iter()
        .map(|(&(y, a), &c)| {
            let p = c / n;
            p * (p / ((py[&y] / n) * (pa[&a] / n))).ln()
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(p: f64, seed: u64) -> SyntheticConfig {
        SyntheticConfig {
            spur_strength: p,
            n_train: 400,
            n_test: 400,
            seed,
            ..SyntheticConfig::default()
        }
    }

    #[test]
    fn full_strength_leaves_spurious_train_groups_empty() {
        let split = generate_spurious_dataset(&small(1.0, 3)).unwrap();
        for s in &split.train.samples {
            assert_eq!(s.attribute, s.label % 2);
        }
        for g in &split.train.manifest.groups {
            if g.is_spurious {
                assert_eq!(g.count, 0);
            }
        }
        // test attributes ignore the class
        assert!(split.test.manifest.groups.iter().all(|g| g.count > 0));
    }

    #[test]
    fn half_strength_gives_equal_groups_chi_square() {
        // chi-square critical value, df = 3, alpha = 0.01
        const CRIT: f64 = 11.344866730144373;
        for seed in 0..10 {
            let cfg = SyntheticConfig {
                spur_strength: 0.5,
                seed,
                ..SyntheticConfig::default()
            };
            let split = generate_spurious_dataset(&cfg).unwrap();
            let expected = cfg.n_train as f64 / 4.0;
            let chi2: f64 = split
                .train
                .manifest
                .groups
                .iter()
                .map(|g| (g.count as f64 - expected).powi(2) / expected)
                .sum();
            assert!(chi2 < CRIT, "seed {seed}: chi2 = {chi2}");
        }
    }

    #[test]
    fn test_split_attribute_is_uncorrelated_with_label() {
        let cfg = SyntheticConfig::default();
        let split = generate_spurious_dataset(&cfg).unwrap();
        let n = split.test.samples.len() as f64;
        let (ys, as_): (Vec<f64>, Vec<f64>) = split
            .test
            .samples
            .iter()
            .map(|s| (s.label as f64, s.attribute as f64))
            .unzip();
        let my = ys.iter().sum::<f64>() / n;
        let ma = as_.iter().sum::<f64>() / n;
        let cov: f64 = ys
            .iter()
            .zip(&as_)
            .map(|(y, a)| (y - my) * (a - ma))
            .sum::<f64>()
            / n;
        let vy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum::<f64>() / n;
        let va: f64 = as_.iter().map(|a| (a - ma).powi(2)).sum::<f64>() / n;
        let r = cov / (vy * va).sqrt();
        // 4 sigma of the null sampling distribution of r
        assert!(r.abs() < 4.0 / n.sqrt(), "r = {r}");
    }

    #[test]
    fn train_mutual_information_exceeds_test() {
        let split = generate_spurious_dataset(&SyntheticConfig::default()).unwrap();
        let mi_train = label_attribute_mutual_information(&split.train);
        let mi_test = label_attribute_mutual_information(&split.test);
        assert!(mi_train > mi_test + 0.1, "{mi_train} vs {mi_test}");
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_spurious_dataset(&small(0.9, 11)).unwrap();
        let b = generate_spurious_dataset(&small(0.9, 11)).unwrap();
        assert_eq!(a, b);
        let c = generate_spurious_dataset(&small(0.9, 12)).unwrap();
        assert_ne!(a.train.samples, c.train.samples);
    }

    #[test]
    fn too_many_classes_for_core_block_is_capacity_error() {
        let cfg = SyntheticConfig {
            n_classes: 12,
            n_train: 100,
            n_test: 100,
            ..SyntheticConfig::default()
        };
        assert!(matches!(
            generate_spurious_dataset(&cfg),
            Err(Error::Capacity(_))
        ));
    }

    #[test]
    fn manifests_validate() {
        let split = generate_spurious_dataset(&small(0.8, 1)).unwrap();
        let r = crate::domain::validate_manifest(&split.train.manifest, &split.train.samples);
        assert!(r.is_ok(), "{r}");
        let r = crate::domain::validate_manifest(&split.test.manifest, &split.test.samples);
        assert!(r.is_ok(), "{r}");
    }

    #[test]
    fn merge_class_map_examples() {
        let m: Vec<u32> = (0..8).map(|c| merged_class(c, 8, 4)).collect();
        assert_eq!(m, vec![0, 0, 1, 1, 2, 2, 3, 3]);
        let id: Vec<u32> = (0..8).map(|c| merged_class(c, 8, 8)).collect();
        assert_eq!(id, (0..8).collect::<Vec<_>>());
        assert_eq!(62usize.div_ceil(4), 16);
        assert_eq!(merged_class(61, 62, 4), 3);
    }

    fn eight_class() -> Dataset {
        let cfg = SyntheticConfig {
            n_classes: 8,
            n_attributes: 8,
            d_spur: 8,
            n_train: 800,
            n_test: 80,
            ..SyntheticConfig::default()
        };
        generate_spurious_dataset(&cfg).unwrap().train
    }

    #[test]
    fn merge_preserves_ids_features_and_count() {
        let data = eight_class();
        let merged = merge_classes(&data, 4).unwrap();
        assert_eq!(merged.samples.len(), data.samples.len());
        for (a, b) in data.samples.iter().zip(&merged.samples) {
            assert_eq!(a.sample_id, b.sample_id);
            assert_eq!(a.features, b.features);
            assert_eq!(b.label, a.label / 2);
        }
        let r = crate::domain::validate_manifest(&merged.manifest, &merged.samples);
        assert!(r.is_ok(), "{r}");
    }

    #[test]
    fn merge_recomputes_spurious_flags_from_folded_classes() {
        let data = eight_class();
        let merged = merge_classes(&data, 2).unwrap();
        for g in &merged.manifest.groups {
            // classes 0..3 carry attributes 0..3 as their majority
            let natural = (g.attribute_id / 4) == g.class_id;
            assert_eq!(g.is_spurious, !natural, "{g:?}");
        }
        let identity = merge_classes(&data, 8).unwrap();
        assert_eq!(identity.samples, data.samples);
        assert_eq!(identity.manifest.groups, data.manifest.groups);
    }

    #[test]
    fn merge_rejects_bad_targets() {
        let data = eight_class();
        assert!(merge_classes(&data, 1).is_err());
        assert!(merge_classes(&data, 9).is_err());
        // blocks of 2 give 4 classes, not 5
        assert!(merge_classes(&data, 5).is_err());
    }

    #[test]
    fn group_stats_counts() {
        // balanced 2x2 dataset of 100
        let mut samples = Vec::new();
        for i in 0..100u64 {
            let g = (i % 4) as u32;
            samples.push(SampleRecord {
                sample_id: i,
                features: vec![0.0],
                label: g / 2,
                group: g,
                attribute: g % 2,
            });
        }
        let cfg = small(0.5, 0);
        let data = Dataset {
            manifest: build_manifest("b".into(), &cfg, &samples),
            samples,
        };
        let st = group_stats(&data);
        assert!(st.groups.iter().all(|g| g.count == 25));
        assert_eq!(st.class_counts, vec![50, 50]);
        assert_eq!(st.attribute_counts, vec![50, 50]);
    }

    #[test]
    fn group_stats_minority_counts_match_binomial() {
        let cfg = SyntheticConfig {
            n_train: 1000,
            ..SyntheticConfig::default()
        };
        let split = generate_spurious_dataset(&cfg).unwrap();
        let st = group_stats(&split.train);
        // each minority group ~ Binomial(1000, 0.025): mean 25, sd ~4.94
        for g in st.groups.iter().filter(|g| g.is_spurious) {
            assert!((g.count as f64 - 25.0).abs() < 3.0 * 4.94, "{g:?}");
        }
    }

    #[test]
    fn group_stats_reports_empty_groups() {
        let split = generate_spurious_dataset(&small(1.0, 0)).unwrap();
        let st = group_stats(&split.train);
        assert_eq!(st.groups.len(), 4);
        assert_eq!(st.groups.iter().filter(|g| g.count == 0).count(), 2);
    }
}
