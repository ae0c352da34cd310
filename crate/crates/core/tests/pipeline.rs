//! Library-level audit pipeline: data, shadows, attack, report.

use std::collections::BTreeMap;

use spaudit_core::analysis::{self, AuditSetup, NamedConfig};
use spaudit_core::attack::AttackSpec;
use spaudit_core::domain::validate_manifest;
use spaudit_core::metrics::{self, CellKey};
use spaudit_core::shadows::{self, Role};
use spaudit_core::synthdata::{self, SyntheticConfig};
use spaudit_core::trainer::{ModelConfig, TrainConfig};

fn small_data() -> SyntheticConfig {
    SyntheticConfig {
        n_train: 300,
        n_test: 100,
        seed: 11,
        ..SyntheticConfig::default()
    }
}

fn setup() -> AuditSetup {
    AuditSetup {
        n_shadows: 6,
        n_targets: 2,
        frac: 0.5,
        stratified: true,
        seed: 4,
    }
}

fn erm() -> NamedConfig {
    NamedConfig {
        label: "erm".into(),
        model: ModelConfig::mlp(&[8]),
        train: TrainConfig::erm(0.1, 1e-2, 10, 32),
    }
}

#[test]
fn reports_survive_a_score_file_round_trip() {
    let split = synthdata::generate_spurious_dataset(&small_data()).unwrap();
    let data = &split.train;
    assert!(validate_manifest(&data.manifest, &data.samples).is_ok());

    let (shadow_plan, target_plan) = analysis::audit_plan(data, &setup()).unwrap();
    let (_, s) = analysis::train_side(&shadow_plan, data, &erm(), Role::Shadow, 4).unwrap();
    let (_, t) = analysis::train_side(&target_plan, data, &erm(), Role::Target, 4).unwrap();
    let set = s.concat(&t).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scores.csv");
    shadows::write_scores(&set, &path).unwrap();
    let reread = shadows::read_scores(&path).unwrap();
    assert_eq!(reread, set);

    let flags = data.manifest.spurious_flags();
    let fprs = [0.01, 0.1];
    let per_target = |set: &shadows::ScoreSet| -> Vec<metrics::TargetReport> {
        analysis::attack_targets(set, AttackSpec::ONLINE)
            .iter()
            .map(|r| metrics::per_group_report(r, &flags, &fprs).unwrap())
            .collect()
    };
    let reports = per_target(&set);
    assert_eq!(reports, per_target(&reread));
    let aggregate = metrics::aggregate_targets(&reports).unwrap();
    assert_eq!(aggregate.n_targets, 2);

    for report in &reports {
        let total = report.cell(CellKey::Total).unwrap();
        let (members, nonmembers) = report
            .cells
            .iter()
            .filter(|c| matches!(c.key, CellKey::Group(_)))
            .fold((0, 0), |(m, n), c| (m + c.n_members, n + c.n_nonmembers));
        assert_eq!((total.n_members, total.n_nonmembers), (members, nonmembers));
    }
}

#[test]
fn merged_classes_keep_every_sample_and_shrink_the_group_set() {
    let cfg = SyntheticConfig {
        n_classes: 8,
        n_attributes: 8,
        d_spur: 8,
        n_train: 800,
        n_test: 100,
        ..SyntheticConfig::default()
    };
    let split = synthdata::generate_spurious_dataset(&cfg).unwrap();
    let merged = synthdata::merge_classes(&split.train, 2).unwrap();
    assert_eq!(merged.len(), split.train.len());
    assert_eq!(merged.manifest.n_classes, 2);
    assert!(validate_manifest(&merged.manifest, &merged.samples).is_ok());

    let mut per_class: BTreeMap<u32, usize> = BTreeMap::new();
    for s in &merged.samples {
        *per_class.entry(s.label).or_default() += 1;
    }
    assert_eq!(per_class.len(), 2);
    assert!(merged.manifest.groups.len() < split.train.manifest.groups.len());
}
