//! End-to-end studies on synthetic data. Each writes a run directory and returns its results.
//!
//! Output is staged in `<out>.partial` and renamed into place only when the whole
//! study succeeds, so a failed run leaves no partial directory behind.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::analysis::{
    self, AttackMatrix, CkaProfile, Complexity, MemorizationReport, NamedConfig, TTest,
};
use crate::attack::AttackResult;
use crate::config::{ExperimentName, ExperimentSpec};
use crate::domain::Dataset;
use crate::error::{Error, Result};
use crate::fsutil;
use crate::metrics::{self, CellKey, GroupPrivacyReport};
use crate::plot;
use crate::shadows::{self, Role, ScoreSet};
use crate::synthdata::{self, SyntheticConfig, SyntheticSplit};
use crate::trainer::{self, Model, TrainConfig};

/// File written last into every run directory; marks a directory as experiment output.
pub const SUMMARY_FILE: &str = "summary.json";

/// Staging directory that is renamed to its final path on [`RunDir::commit`] and removed otherwise.
pub struct RunDir {
    target: PathBuf,
    staging: PathBuf,
    committed: bool,
}

impl RunDir {
    pub fn create(target: &Path) -> Result<Self> {
        if target.exists() && !target.join(SUMMARY_FILE).exists() {
            return Err(Error::InvalidArgument(format!(
                "{} exists and is not an experiment run directory",
                target.display()
            )));
        }
        let mut name = target.file_name().unwrap_or_default().to_os_string();
        name.push(".partial");
        let staging = target.with_file_name(name);
        if staging.exists() {
            fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
        }
        fs::create_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
        Ok(RunDir {
            target: target.to_path_buf(),
            staging,
            committed: false,
        })
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.staging.join(file)
    }

    pub fn write(&self, file: &str, text: &str) -> Result<()> {
        fsutil::write_atomic_str(&self.path(file), text)
    }

    pub fn write_json<T: Serialize>(&self, file: &str, value: &T) -> Result<()> {
        let mut s = serde_json::to_string_pretty(value)
            .map_err(|e| Error::Numeric(format!("cannot serialize {file}: {e}")))?;
        s.push('\n');
        self.write(file, &s)
    }

    pub fn commit(mut self) -> Result<PathBuf> {
        if self.target.exists() {
            fs::remove_dir_all(&self.target).map_err(|e| Error::io(&self.target, e))?;
        }
        fs::rename(&self.staging, &self.target).map_err(|e| Error::io(&self.target, e))?;
        self.committed = true;
        Ok(self.target.clone())
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_dir_all(&self.staging);
        }
    }
}

/// Spurious and non-spurious TPR at one FPR and their ratio.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Disparity {
    pub fpr: f64,
    pub spurious_tpr: f64,
    pub non_spurious_tpr: f64,
    pub spurious_achieved_fpr: f64,
    pub non_spurious_achieved_fpr: f64,
    /// `None` when the non-spurious TPR is zero.
    pub ratio: Option<f64>,
}

impl Disparity {
    fn new(fpr: f64, s: f64, n: f64, s_fpr: f64, n_fpr: f64) -> Self {
        Disparity {
            fpr,
            spurious_tpr: s,
            non_spurious_tpr: n,
            spurious_achieved_fpr: s_fpr,
            non_spurious_achieved_fpr: n_fpr,
            ratio: if n > 0.0 { Some(s / n) } else { None },
        }
    }

    /// Ratio with `+inf` for a zero denominator under a positive numerator.
    pub fn ratio_or_inf(&self) -> f64 {
        match self.ratio {
            Some(r) => r,
            None if self.spurious_tpr > 0.0 => f64::INFINITY,
            None => f64::NAN,
        }
    }
}

fn mean_over(
    report: &GroupPrivacyReport,
    fpr: f64,
    flag: bool,
    pooled: bool,
) -> Result<(f64, f64)> {
    let cells: Vec<_> = report
        .cells
        .iter()
        .filter(|c| {
            let right_kind = if pooled {
                matches!(c.key, CellKey::Spurious(_))
            } else {
                matches!(c.key, CellKey::Group(_))
            };
            right_kind && c.is_spurious == Some(flag)
        })
        .filter_map(|c| c.tpr_at(fpr))
        .collect();
    if cells.is_empty() {
        return Err(Error::Validation(format!(
            "no evaluable {} group at FPR {fpr}",
            if flag { "spurious" } else { "non-spurious" }
        )));
    }
    let n = cells.len() as f64;
    Ok((
        cells.iter().map(|p| p.tpr.mean).sum::<f64>() / n,
        cells.iter().map(|p| p.achieved_fpr.mean).sum::<f64>() / n,
    ))
}

/// Mean over evaluable spurious groups versus mean over evaluable non-spurious groups.
pub fn group_disparity(report: &GroupPrivacyReport, fpr: f64) -> Result<Disparity> {
    let (s, sf) = mean_over(report, fpr, true, false)?;
    let (n, nf) = mean_over(report, fpr, false, false)?;
    Ok(Disparity::new(fpr, s, n, sf, nf))
}

/// Same comparison on the pooled spurious/non-spurious partition report.
pub fn pooled_disparity(partition: &GroupPrivacyReport, fpr: f64) -> Result<Disparity> {
    let (s, sf) = mean_over(partition, fpr, true, true)?;
    let (n, nf) = mean_over(partition, fpr, false, true)?;
    Ok(Disparity::new(fpr, s, n, sf, nf))
}

/// Shadows and targets trained on one split plan, their scores and attack results.
pub struct Audit {
    pub shadow_models: Vec<Model>,
    pub target_models: Vec<Model>,
    pub scores: ScoreSet,
    pub results: Vec<AttackResult>,
    pub per_group: GroupPrivacyReport,
    pub partition: GroupPrivacyReport,
}

fn reports(
    results: &[AttackResult],
    data: &Dataset,
    fprs: &[f64],
) -> Result<(GroupPrivacyReport, GroupPrivacyReport)> {
    let flags = data.manifest.spurious_flags();
    let per_target = results
        .iter()
        .map(|r| metrics::per_group_report(r, &flags, fprs))
        .collect::<Result<Vec<_>>>()?;
    let partition = results
        .iter()
        .map(|r| metrics::spurious_partition_report(r, &flags, fprs))
        .collect::<Result<Vec<_>>>()?;
    Ok((
        metrics::aggregate_targets(&per_target)?,
        metrics::aggregate_targets(&partition)?,
    ))
}

fn named(label: &str, spec: &ExperimentSpec, train: &TrainConfig) -> NamedConfig {
    NamedConfig {
        label: label.to_string(),
        model: spec.model.clone(),
        train: train.clone(),
    }
}

/// Trains shadows under `shadow_cfg` and targets under `target_cfg`, then attacks every target.
pub fn audit(
    data: &Dataset,
    spec: &ExperimentSpec,
    shadow_cfg: &NamedConfig,
    target_cfg: &NamedConfig,
) -> Result<Audit> {
    let setup = spec.audit.setup(spec.seed);
    let (shadow_plan, target_plan) = analysis::audit_plan(data, &setup)?;
    let (shadow_models, shadow_set) =
        analysis::train_side(&shadow_plan, data, shadow_cfg, Role::Shadow, spec.seed)?;
    let (target_models, target_set) =
        analysis::train_side(&target_plan, data, target_cfg, Role::Target, spec.seed)?;
    audit_from_models(
        data,
        spec,
        shadow_models,
        shadow_set,
        target_models,
        target_set,
    )
}

fn audit_from_models(
    data: &Dataset,
    spec: &ExperimentSpec,
    shadow_models: Vec<Model>,
    shadow_set: ScoreSet,
    target_models: Vec<Model>,
    target_set: ScoreSet,
) -> Result<Audit> {
    let scores = shadow_set.concat(&target_set)?;
    let results = analysis::attack_targets(&scores, spec.attack);
    let (per_group, partition) = reports(&results, data, &spec.fprs)?;
    Ok(Audit {
        shadow_models,
        target_models,
        scores,
        results,
        per_group,
        partition,
    })
}

fn write_audit(
    dir: &RunDir,
    prefix: &str,
    audit: &Audit,
    data: &Dataset,
    title: &str,
) -> Result<()> {
    shadows::write_scores(&audit.scores, &dir.path(&format!("{prefix}scores.csv")))?;
    metrics::write_report(
        std::slice::from_ref(&audit.per_group),
        &dir.path(&format!("{prefix}report.json")),
        &dir.path(&format!("{prefix}report.csv")),
    )?;
    metrics::write_report(
        std::slice::from_ref(&audit.partition),
        &dir.path(&format!("{prefix}partition_report.json")),
        &dir.path(&format!("{prefix}partition_report.csv")),
    )?;
    if let Some(first) = audit.results.first() {
        dir.write(
            &format!("{prefix}roc.svg"),
            &plot::group_roc_svg(title, first, &data.manifest.spurious_flags())?,
        )?;
    }
    Ok(())
}

fn generate(cfg: &SyntheticConfig) -> Result<SyntheticSplit> {
    synthdata::generate_spurious_dataset(cfg)
}

#[derive(Debug, Clone, Serialize)]
pub struct DisparityRun {
    pub spur_strength: f64,
    pub group: Disparity,
    pub pooled: Disparity,
}

#[derive(Debug, Clone, Serialize)]
pub struct DisparityOutcome {
    pub main: DisparityRun,
    pub control: DisparityRun,
    #[serde(skip)]
    pub report: GroupPrivacyReport,
    #[serde(skip)]
    pub control_report: GroupPrivacyReport,
}

/// Privacy disparity on the configured data and on a no-correlation control.
pub fn run_disparity(spec: &ExperimentSpec, out: &Path) -> Result<DisparityOutcome> {
    spec.validate(ExperimentName::Disparity)?;
    let dir = RunDir::create(out)?;
    let erm = named("erm", spec, &spec.erm);
    let mut runs = Vec::new();
    for (prefix, p) in [
        ("", spec.data.spur_strength),
        ("control_", spec.control_spur_strength),
    ] {
        let data_cfg = SyntheticConfig {
            spur_strength: p,
            ..spec.data.clone()
        };
        let split = generate(&data_cfg)?;
        split
            .train
            .manifest
            .write(&dir.path(&format!("{prefix}manifest.json")))?;
        let a = audit(&split.train, spec, &erm, &erm)?;
        write_audit(
            &dir,
            prefix,
            &a,
            &split.train,
            &format!("ROC per group, p_maj = {p}"),
        )?;
        let run = DisparityRun {
            spur_strength: p,
            group: group_disparity(&a.per_group, spec.headline_fpr)?,
            pooled: pooled_disparity(&a.partition, spec.headline_fpr)?,
        };
        runs.push((run, a.per_group));
    }
    let (control, control_report) = runs.pop().expect("two runs");
    let (main, report) = runs.pop().expect("two runs");
    let outcome = DisparityOutcome {
        main,
        control,
        report,
        control_report,
    };
    dir.write("spec.toml", &spec.to_toml())?;
    dir.write_json(SUMMARY_FILE, &outcome)?;
    dir.commit()?;
    Ok(outcome)
}

#[derive(Debug, Clone, Serialize)]
pub struct ComplexityRow {
    pub n_classes: usize,
    pub pooled: Disparity,
    /// Feature complexity of each target's embeddings of the training pool.
    pub target_k: Vec<usize>,
    pub mean_k: f64,
    /// CKA between the finest-grained and this dataset's first target, per group of this dataset.
    pub cka_to_finest: CkaProfile,
}

#[derive(Debug, Clone, Serialize)]
pub struct ComplexityOutcome {
    pub tau: f64,
    pub rows: Vec<ComplexityRow>,
}

impl ComplexityOutcome {
    pub fn row(&self, n_classes: usize) -> Option<&ComplexityRow> {
        self.rows.iter().find(|r| r.n_classes == n_classes)
    }
}

/// Audits a many-class dataset and its class-merged variants.
pub fn run_complexity(spec: &ExperimentSpec, out: &Path) -> Result<ComplexityOutcome> {
    spec.validate(ExperimentName::Complexity)?;
    let c = &spec.complexity;
    let dir = RunDir::create(out)?;
    let base_cfg = SyntheticConfig {
        n_classes: c.n_classes,
        n_attributes: c.n_attributes,
        d_core: c.d_core,
        d_spur: c.d_spur,
        ..spec.data.clone()
    };
    let base = generate(&base_cfg)?;
    let erm = named("erm", spec, &spec.erm);
    let mut merge_to = c.merge_to.clone();
    merge_to.sort_unstable_by(|a, b| b.cmp(a));
    merge_to.dedup();
    let mut rows = Vec::new();
    let mut finest: Option<Model> = None;
    for k in merge_to {
        let data = synthdata::merge_classes(&base.train, k)?;
        let prefix = format!("k{k}_");
        data.manifest
            .write(&dir.path(&format!("{prefix}manifest.json")))?;
        let a = audit(&data, spec, &erm, &erm)?;
        write_audit(&dir, &prefix, &a, &data, &format!("ROC per group, K = {k}"))?;
        let mut target_k = Vec::new();
        let mut evr_csv = String::from("target,component,eigenvalue,evr\n");
        for (t, m) in a.target_models.iter().enumerate() {
            let emb = trainer::extract_embeddings(m, &data.samples);
            let cx: Complexity = analysis::feature_complexity(&emb, c.tau)?;
            for (i, (l, e)) in cx.spectrum.iter().zip(&cx.evr).enumerate() {
                evr_csv.push_str(&format!("{t},{},{l:?},{e:?}\n", i + 1));
            }
            target_k.push(cx.k);
        }
        dir.write(&format!("{prefix}evr.csv"), &evr_csv)?;
        let first = a.target_models[0].clone();
        let reference = finest.get_or_insert_with(|| first.clone());
        let cka_to_finest = analysis::group_cka_profile(reference, &first, &data.samples)?;
        let mean_k = target_k.iter().sum::<usize>() as f64 / target_k.len() as f64;
        rows.push(ComplexityRow {
            n_classes: k,
            pooled: pooled_disparity(&a.partition, spec.headline_fpr)?,
            target_k,
            mean_k,
            cka_to_finest,
        });
    }
    let mut table = String::from(
        "n_classes,spurious_tpr,non_spurious_tpr,spurious_achieved_fpr,non_spurious_achieved_fpr,ratio,mean_k\n",
    );
    for r in &rows {
        table.push_str(&format!(
            "{},{:?},{:?},{:?},{:?},{},{:?}\n",
            r.n_classes,
            r.pooled.spurious_tpr,
            r.pooled.non_spurious_tpr,
            r.pooled.spurious_achieved_fpr,
            r.pooled.non_spurious_achieved_fpr,
            r.pooled
                .ratio
                .map_or_else(String::new, |x| format!("{x:?}")),
            r.mean_k
        ));
    }
    dir.write("complexity.csv", &table)?;
    let outcome = ComplexityOutcome { tau: c.tau, rows };
    dir.write("spec.toml", &spec.to_toml())?;
    dir.write_json(SUMMARY_FILE, &outcome)?;
    dir.commit()?;
    Ok(outcome)
}

#[derive(Debug, Clone, Serialize)]
pub struct MethodRow {
    pub method: String,
    pub test_accuracy: f64,
    pub worst_group_accuracy: f64,
    pub group: Disparity,
    pub pooled: Disparity,
    #[serde(skip)]
    pub report: GroupPrivacyReport,
    #[serde(skip)]
    pub models: Vec<Model>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RobustOutcome {
    pub rows: Vec<MethodRow>,
}

impl RobustOutcome {
    pub fn row(&self, label: &str) -> Option<&MethodRow> {
        self.rows.iter().find(|r| r.method == label)
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// ERM shadows attacking ERM, DRO and DFR targets trained on identical splits.
pub fn run_robust(spec: &ExperimentSpec, out: &Path) -> Result<RobustOutcome> {
    spec.validate(ExperimentName::Robust)?;
    let dir = RunDir::create(out)?;
    let split = generate(&spec.data)?;
    let data = &split.train;
    data.manifest.write(&dir.path("manifest.json"))?;
    let setup = spec.audit.setup(spec.seed);
    let (shadow_plan, target_plan) = analysis::audit_plan(data, &setup)?;
    let erm = named("erm", spec, &spec.erm);
    let (shadow_models, shadow_set) =
        analysis::train_side(&shadow_plan, data, &erm, Role::Shadow, spec.seed)?;
    let mut rows = Vec::new();
    let mut reports_all = Vec::new();
    for (label, cfg) in [("erm", &spec.erm), ("dro", &spec.dro), ("dfr", &spec.dfr)] {
        let target_cfg = named(label, spec, cfg);
        let (targets, target_set) =
            analysis::train_side(&target_plan, data, &target_cfg, Role::Target, spec.seed)?;
        let a = audit_from_models(
            data,
            spec,
            shadow_models.clone(),
            shadow_set.clone(),
            targets,
            target_set,
        )?;
        write_audit(
            &dir,
            &format!("{label}_"),
            &a,
            data,
            &format!("ROC per group, {label} targets"),
        )?;
        reports_all.push(a.per_group.clone());
        rows.push(MethodRow {
            method: label.to_string(),
            test_accuracy: mean(
                a.target_models
                    .iter()
                    .map(|m| trainer::accuracy(m, &split.test.samples)),
            ),
            worst_group_accuracy: mean(
                a.target_models
                    .iter()
                    .map(|m| trainer::worst_group_accuracy(m, &split.test.samples)),
            ),
            group: group_disparity(&a.per_group, spec.headline_fpr)?,
            pooled: pooled_disparity(&a.partition, spec.headline_fpr)?,
            report: a.per_group,
            models: a.target_models,
        });
    }
    let mut table = String::from(
        "method,test_accuracy,worst_group_accuracy,spurious_tpr,non_spurious_tpr,pooled_spurious_tpr,pooled_non_spurious_tpr\n",
    );
    for r in &rows {
        table.push_str(&format!(
            "{},{:?},{:?},{:?},{:?},{:?},{:?}\n",
            r.method,
            r.test_accuracy,
            r.worst_group_accuracy,
            r.group.spurious_tpr,
            r.group.non_spurious_tpr,
            r.pooled.spurious_tpr,
            r.pooled.non_spurious_tpr
        ));
    }
    dir.write("methods.csv", &table)?;
    fsutil::write_atomic_str(
        &dir.path("report.csv"),
        &metrics::report_to_csv(&reports_all),
    )?;
    let outcome = RobustOutcome { rows };
    dir.write("spec.toml", &spec.to_toml())?;
    dir.write_json(SUMMARY_FILE, &outcome)?;
    dir.commit()?;
    Ok(outcome)
}

#[derive(Debug, Clone, Serialize)]
pub struct MemorizationOutcome {
    pub spurious_mean_d: f64,
    pub non_spurious_mean_d: f64,
    pub spurious_mean_mem: f64,
    pub non_spurious_mean_mem: f64,
    pub d_test: TTest,
    pub n_excluded: usize,
    #[serde(skip)]
    pub report: MemorizationReport,
}

/// Privacy score and label memorization from ERM shadow models, per group.
pub fn run_memorization(spec: &ExperimentSpec, out: &Path) -> Result<MemorizationOutcome> {
    spec.validate(ExperimentName::Memorization)?;
    let dir = RunDir::create(out)?;
    let split = generate(&spec.data)?;
    let data = &split.train;
    data.manifest.write(&dir.path("manifest.json"))?;
    let setup = spec.audit.setup(spec.seed);
    let (shadow_plan, _) = analysis::audit_plan(data, &setup)?;
    let erm = named("erm", spec, &spec.erm);
    let (_, set) = analysis::train_side(&shadow_plan, data, &erm, Role::Shadow, spec.seed)?;
    shadows::write_scores(&set, &dir.path("scores.csv"))?;
    let outcome = memorization_outcome(&set, data, spec.attack.variance)?;
    dir.write("memorization.csv", &outcome.report.samples_csv())?;
    dir.write("density.csv", &outcome.report.density_csv())?;
    dir.write_json("groups.json", &outcome.report.groups)?;
    dir.write("spec.toml", &spec.to_toml())?;
    dir.write_json(SUMMARY_FILE, &outcome)?;
    dir.commit()?;
    Ok(outcome)
}

pub fn memorization_outcome(
    set: &ScoreSet,
    data: &Dataset,
    mode: crate::attack::VarianceMode,
) -> Result<MemorizationOutcome> {
    let flags = data.manifest.spurious_flags();
    let models = set.indices_with_role(Role::Shadow);
    let report = analysis::memorization_report(set, &models, &flags, mode)?;
    let is_spur = |g: u32| flags.get(&g).copied().unwrap_or(false);
    let spur = report.d_scores_where(is_spur);
    let non = report.d_scores_where(|g| !is_spur(g));
    let mem_of = |flag: bool| {
        mean(
            report
                .samples
                .iter()
                .filter(|s| is_spur(s.group_id) == flag)
                .map(|s| s.mem),
        )
    };
    Ok(MemorizationOutcome {
        spurious_mean_d: mean(spur.iter().copied()),
        non_spurious_mean_d: mean(non.iter().copied()),
        spurious_mean_mem: mem_of(true),
        non_spurious_mean_mem: mem_of(false),
        d_test: analysis::welch_t_test_greater(&spur, &non)?,
        n_excluded: report.excluded.len(),
        report,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct CkaOutcome {
    /// ERM target vs DRO target on the same split and stream, per target.
    pub erm_vs_dro: Vec<CkaProfile>,
    /// ERM target vs an ERM model with a different init seed on the same split.
    pub erm_vs_erm: Vec<CkaProfile>,
    /// Models trained on two unrelated datasets, rows paired by index.
    pub baseline: f64,
    pub mean_erm_vs_dro: f64,
    pub mean_erm_vs_erm: f64,
}

/// Representation similarity between ERM and DRO models, with seed and unrelated-data baselines.
pub fn run_cka_profile(spec: &ExperimentSpec, out: &Path) -> Result<CkaOutcome> {
    spec.validate(ExperimentName::CkaProfile)?;
    let dir = RunDir::create(out)?;
    let split = generate(&spec.data)?;
    let data = &split.train;
    let setup = spec.audit.setup(spec.seed);
    let (_, target_plan) = analysis::audit_plan(data, &setup)?;
    let erm = named("erm", spec, &spec.erm);
    let dro = named("dro", spec, &spec.dro);
    let mut reseeded = erm.clone();
    reseeded.model.seed = erm.model.seed.wrapping_add(1);
    let (erm_models, _) = analysis::train_side(&target_plan, data, &erm, Role::Target, spec.seed)?;
    let (dro_models, _) = analysis::train_side(&target_plan, data, &dro, Role::Target, spec.seed)?;
    let (alt_models, _) =
        analysis::train_side(&target_plan, data, &reseeded, Role::Target, spec.seed)?;
    let eval = &split.test.samples;
    let profile = |a: &[Model], b: &[Model]| {
        a.iter()
            .zip(b)
            .map(|(x, y)| analysis::group_cka_profile(x, y, eval))
            .collect::<Result<Vec<_>>>()
    };
    let erm_vs_dro = profile(&erm_models, &dro_models)?;
    let erm_vs_erm = profile(&erm_models, &alt_models)?;

    let other_cfg = SyntheticConfig {
        seed: spec.data.seed.wrapping_add(1_000_003),
        ..spec.data.clone()
    };
    let other = generate(&other_cfg)?;
    let other_plan = analysis::audit_plan(&other.train, &setup)?.1;
    let (other_models, _) =
        analysis::train_side(&other_plan, &other.train, &erm, Role::Target, spec.seed)?;
    let ea = trainer::extract_embeddings(&erm_models[0], eval);
    let mut eb = trainer::extract_embeddings(&other_models[0], &other.test.samples);
    eb.sample_ids = ea.sample_ids.clone();
    let baseline = analysis::linear_cka(&ea, &eb)?;

    let mut csv = String::from("comparison,target,group,cka\n");
    for (name, profiles) in [("erm_vs_dro", &erm_vs_dro), ("erm_vs_erm", &erm_vs_erm)] {
        for (t, p) in profiles.iter().enumerate() {
            for (g, v) in &p.groups {
                csv.push_str(&format!("{name},{t},g{g},{v:?}\n"));
            }
            csv.push_str(&format!("{name},{t},total,{:?}\n", p.total));
        }
    }
    csv.push_str(&format!("unrelated_data,0,total,{baseline:?}\n"));
    dir.write("cka.csv", &csv)?;
    let outcome = CkaOutcome {
        mean_erm_vs_dro: mean(erm_vs_dro.iter().map(|p| p.total)),
        mean_erm_vs_erm: mean(erm_vs_erm.iter().map(|p| p.total)),
        erm_vs_dro,
        erm_vs_erm,
        baseline,
    };
    dir.write("spec.toml", &spec.to_toml())?;
    dir.write_json(SUMMARY_FILE, &outcome)?;
    dir.commit()?;
    Ok(outcome)
}

#[derive(Debug, Clone, Serialize)]
pub struct MatrixOutcome {
    pub matrix: AttackMatrix,
    pub best_shadow_per_target: Vec<String>,
    pub diagonal_is_best: Vec<Option<bool>>,
}

/// Every configured shadow architecture against every target architecture.
pub fn run_matrix(spec: &ExperimentSpec, out: &Path) -> Result<MatrixOutcome> {
    spec.validate(ExperimentName::Matrix)?;
    let dir = RunDir::create(out)?;
    let split = generate(&spec.data)?;
    let setup = spec.audit.setup(spec.seed);
    let matrix = analysis::cross_config_attack_matrix(
        &spec.matrix,
        &spec.matrix,
        &split.train,
        &setup,
        spec.attack,
        spec.headline_fpr,
    )?;
    dir.write("matrix.csv", &matrix.to_csv())?;
    let outcome = MatrixOutcome {
        best_shadow_per_target: matrix
            .best_shadow_per_target()
            .into_iter()
            .map(|s| matrix.shadow_labels[s].clone())
            .collect(),
        diagonal_is_best: matrix.diagonal_is_best(),
        matrix,
    };
    dir.write("spec.toml", &spec.to_toml())?;
    dir.write_json(SUMMARY_FILE, &outcome)?;
    dir.commit()?;
    Ok(outcome)
}

/// Runs the named study and returns its summary as JSON.
pub fn run_experiment(
    name: ExperimentName,
    spec: &ExperimentSpec,
    out: &Path,
) -> Result<serde_json::Value> {
    let to_json = |v: serde_json::Result<serde_json::Value>| {
        v.map_err(|e| Error::Numeric(format!("summary serialization: {e}")))
    };
    match name {
        ExperimentName::Disparity => to_json(serde_json::to_value(run_disparity(spec, out)?)),
        ExperimentName::Complexity => to_json(serde_json::to_value(run_complexity(spec, out)?)),
        ExperimentName::Robust => to_json(serde_json::to_value(run_robust(spec, out)?)),
        ExperimentName::Memorization => to_json(serde_json::to_value(run_memorization(spec, out)?)),
        ExperimentName::CkaProfile => to_json(serde_json::to_value(run_cka_profile(spec, out)?)),
        ExperimentName::Matrix => to_json(serde_json::to_value(run_matrix(spec, out)?)),
    }
}
