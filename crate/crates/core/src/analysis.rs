//! Memorization scores, density curves, representation similarity and the
//! shadow-by-target configuration matrix.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::attack::{self, AttackResult, AttackSpec, GaussianStats, VarianceMode};
use crate::domain::{Dataset, SampleRecord};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::metrics::{self, Summary};
use crate::shadows::{self, Role, RunOptions, ScoreSet, SplitPlan};
use crate::trainer::{self, Model, ModelConfig, TrainConfig};

/// Row-major embedding matrix, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub sample_ids: Vec<u64>,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl EmbeddingMatrix {
    pub fn new(sample_ids: Vec<u64>, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != sample_ids.len() * dim {
            return Err(Error::InvalidArgument(format!(
                "{} values for {} rows of width {dim}",
                data.len(),
                sample_ids.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite embedding entry in row {}",
                i / dim.max(1)
            )));
        }
        Ok(EmbeddingMatrix {
            sample_ids,
            dim,
            data,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn select(&self, rows: &[usize]) -> EmbeddingMatrix {
        let mut data = Vec::with_capacity(rows.len() * self.dim);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        EmbeddingMatrix {
            sample_ids: rows.iter().map(|&r| self.sample_ids[r]).collect(),
            dim: self.dim,
            data,
        }
    }

    /// Applies a `dim x dim'` linear map `m` (row-major) to every row.
    pub fn transform(&self, m: &[f64], out_dim: usize) -> EmbeddingMatrix {
        assert_eq!(m.len(), self.dim * out_dim);
        let mut data = vec![0.0; self.n_rows() * out_dim];
        for i in 0..self.n_rows() {
            let r = self.row(i);
            for j in 0..out_dim {
                data[i * out_dim + j] = (0..self.dim).map(|k| r[k] * m[k * out_dim + j]).sum();
            }
        }
        EmbeddingMatrix {
            sample_ids: self.sample_ids.clone(),
            dim: out_dim,
            data,
        }
    }

    fn centered(&self) -> DMatrix<f64> {
        let mut m = DMatrix::from_row_slice(self.n_rows(), self.dim, &self.data);
        for mut col in m.column_iter_mut() {
            let mean = col.mean();
            col.add_scalar_mut(-mean);
        }
        m
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("sample_id");
        for j in 0..self.dim {
            out.push_str(&format!(",e{j}"));
        }
        out.push('\n');
        for i in 0..self.n_rows() {
            out.push_str(&self.sample_ids[i].to_string());
            for v in self.row(i) {
                out.push_str(&format!(",{v:?}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fsutil::write_atomic_str(path, &self.to_csv())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fsutil::read_to_string(path)?;
        let perr = |line: usize, message: String| Error::Parse {
            path: path.into(),
            line: line as u64,
            message,
        };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| perr(1, "empty file".into()))?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.first() != Some(&"sample_id") {
            return Err(perr(1, "first column must be sample_id".into()));
        }
        for (j, c) in cols.iter().skip(1).enumerate() {
            if *c != format!("e{j}") {
                return Err(perr(1, format!("expected column e{j}, got {c}")));
            }
        }
        let dim = cols.len() - 1;
        let mut ids = Vec::new();
        let mut data = Vec::new();
        for (k, line) in lines.enumerate() {
            let lineno = k + 2;
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != dim + 1 {
                return Err(perr(lineno, format!("expected {} fields", dim + 1)));
            }
            ids.push(
                fields[0]
                    .parse()
                    .map_err(|_| perr(lineno, format!("bad sample id {:?}", fields[0])))?,
            );
            for f in &fields[1..] {
                data.push(
                    f.parse::<f64>()
                        .map_err(|_| perr(lineno, format!("bad value {f:?}")))?,
                );
            }
        }
        EmbeddingMatrix::new(ids, dim, data)
    }
}

fn check_aligned(a: &EmbeddingMatrix, b: &EmbeddingMatrix) -> Result<()> {
    if a.n_rows() != b.n_rows() {
        return Err(Error::InvalidArgument(format!(
            "row counts differ: {} vs {}",
            a.n_rows(),
            b.n_rows()
        )));
    }
    if a.sample_ids != b.sample_ids {
        return Err(Error::InvalidArgument(
            "embedding rows refer to different samples".into(),
        ));
    }
    Ok(())
}

/// Linear-kernel HSIC, `tr(K_A H K_B H)`, computed as `||A_c^T B_c||_F^2`.
pub fn hsic(a: &EmbeddingMatrix, b: &EmbeddingMatrix) -> Result<f64> {
    check_aligned(a, b)?;
    Ok(hsic_centered(&a.centered(), &b.centered()))
}

fn hsic_centered(ac: &DMatrix<f64>, bc: &DMatrix<f64>) -> f64 {
    (ac.transpose() * bc).norm_squared()
}

pub fn linear_cka(a: &EmbeddingMatrix, b: &EmbeddingMatrix) -> Result<f64> {
    check_aligned(a, b)?;
    let ac = a.centered();
    let bc = b.centered();
    let aa = hsic_centered(&ac, &ac);
    let bb = hsic_centered(&bc, &bc);
    let scale = ac
        .norm_squared()
        .max(bc.norm_squared())
        .max(f64::MIN_POSITIVE);
    if aa <= 1e-24 * scale * scale || bb <= 1e-24 * scale * scale {
        return Err(Error::DegenerateEmbedding(
            "degenerate embedding: zero self-similarity".into(),
        ));
    }
    let ab = hsic_centered(&ac, &bc);
    Ok((ab / (aa * bb).sqrt()).clamp(0.0, 1.0))
}

/// Eigenvalues below this fraction of the largest are treated as zero.
pub const EIGEN_REL_TOL: f64 = 1e-10;

/// Covariance eigenvalues (divisor `n - 1`), descending, small ones zeroed.
pub fn covariance_spectrum(e: &EmbeddingMatrix) -> Result<Vec<f64>> {
    if e.n_rows() < 2 {
        return Err(Error::InvalidArgument(
            "covariance needs at least two rows".into(),
        ));
    }
    let c = e.centered();
    let cov = (c.transpose() * &c) / (e.n_rows() as f64 - 1.0);
    let mut eig: Vec<f64> = SymmetricEigen::new(cov)
        .eigenvalues
        .iter()
        .copied()
        .collect();
    eig.sort_by(|a, b| b.total_cmp(a));
    let max = eig.first().copied().unwrap_or(0.0);
    if !(max > 0.0) {
        return Err(Error::DegenerateEmbedding(
            "degenerate embedding: covariance is zero".into(),
        ));
    }
    for v in &mut eig {
        if *v < EIGEN_REL_TOL * max {
            *v = 0.0;
        }
    }
    Ok(eig)
}

/// Cumulative explained-variance ratios of a descending spectrum; the last entry is exactly 1.
pub fn explained_variance(spectrum: &[f64]) -> Vec<f64> {
    let total: f64 = spectrum.iter().sum();
    let mut acc = 0.0;
    let mut out: Vec<f64> = spectrum
        .iter()
        .map(|v| {
            acc += v;
            (acc / total).min(1.0)
        })
        .collect();
    if let Some(last) = out.last_mut() {
        *last = 1.0;
    }
    out
}

/// Slack absorbing rounding in cumulative sums when comparing against `tau`.
const EVR_SLACK: f64 = 1e-12;

/// Smallest `k` whose cumulative explained variance reaches `tau`.
pub fn components_for(evr: &[f64], tau: f64) -> usize {
    evr.iter()
        .position(|&v| v + EVR_SLACK >= tau)
        .map_or(evr.len(), |i| i + 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Complexity {
    pub tau: f64,
    pub k: usize,
    pub spectrum: Vec<f64>,
    pub evr: Vec<f64>,
}

pub fn feature_complexity(e: &EmbeddingMatrix, tau: f64) -> Result<Complexity> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::InvalidArgument(format!("tau {tau} outside (0, 1]")));
    }
    let spectrum = covariance_spectrum(e)?;
    let evr = explained_variance(&spectrum);
    Ok(Complexity {
        tau,
        k: components_for(&evr, tau),
        spectrum,
        evr,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub enum Bandwidth {
    /// `sigma * n^(-1/5)` with the sample standard deviation.
    #[default]
    Scott,
    Fixed(f64),
}

pub const BANDWIDTH_FLOOR: f64 = 1e-3;
pub const KDE_GRID_POINTS: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityCurve {
    pub x: Vec<f64>,
    pub density: Vec<f64>,
    pub bandwidth: f64,
}

impl DensityCurve {
    /// Trapezoid integral over the grid.
    pub fn integral(&self) -> f64 {
        self.x
            .windows(2)
            .zip(self.density.windows(2))
            .map(|(x, f)| 0.5 * (x[1] - x[0]) * (f[0] + f[1]))
            .sum()
    }
}

/// Gaussian-kernel density on `grid`, or on 512 points over `[min - 3h, max + 3h]`.
pub fn kde_density(values: &[f64], grid: Option<&[f64]>, rule: Bandwidth) -> Result<DensityCurve> {
    if values.len() < 2 {
        return Err(Error::InvalidArgument(
            "density estimation needs at least two values".into(),
        ));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite value in density input".into()));
    }
    let n = values.len() as f64;
    let h = match rule {
        Bandwidth::Scott => {
            let mean = values.iter().sum::<f64>() / n;
            let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
            sd * n.powf(-0.2)
        }
        Bandwidth::Fixed(h) => h,
    }
    .max(BANDWIDTH_FLOOR);
    let x: Vec<f64> = match grid {
        Some(g) => g.to_vec(),
        None => {
            let lo = values.iter().copied().fold(f64::INFINITY, f64::min) - 3.0 * h;
            let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 3.0 * h;
            let step = (hi - lo) / (KDE_GRID_POINTS - 1) as f64;
            (0..KDE_GRID_POINTS).map(|i| lo + step * i as f64).collect()
        }
    };
    let norm = 1.0 / (n * h * (2.0 * std::f64::consts::PI).sqrt());
    let density = x
        .par_iter()
        .map(|&xi| {
            norm * values
                .iter()
                .map(|v| {
                    let z = (xi - v) / h;
                    (-0.5 * z * z).exp()
                })
                .sum::<f64>()
        })
        .collect();
    Ok(DensityCurve {
        x,
        density,
        bandwidth: h,
    })
}

/// `|mu_in - mu_out| / (sigma_in + sigma_out)` per sample; `None` for excluded samples.
pub fn privacy_score_d(stats: &GaussianStats) -> Vec<Option<f64>> {
    stats
        .samples
        .iter()
        .map(|g| g.map(|g| (g.mu_in - g.mu_out).abs() / (g.sigma_in + g.sigma_out)))
        .collect()
}

/// `|P_in(correct) - P_out(correct)|` from one sample's per-model bits; `None` without both sides.
pub fn label_memorization_bits(correct: &[bool], member: &[bool]) -> Option<f64> {
    let (mut n_in, mut c_in, mut n_out, mut c_out) = (0usize, 0usize, 0usize, 0usize);
    for (&c, &m) in correct.iter().zip(member) {
        if m {
            n_in += 1;
            c_in += usize::from(c);
        } else {
            n_out += 1;
            c_out += usize::from(c);
        }
    }
    if n_in == 0 || n_out == 0 {
        return None;
    }
    Some((c_in as f64 / n_in as f64 - c_out as f64 / n_out as f64).abs())
}

/// Label memorization of every sample over the listed models.
pub fn label_memorization(scores: &ScoreSet, models: &[usize]) -> Vec<Option<f64>> {
    (0..scores.n_samples())
        .map(|i| {
            let c: Vec<bool> = models.iter().map(|&k| scores.is_correct(k, i)).collect();
            let m: Vec<bool> = models.iter().map(|&k| scores.is_member(k, i)).collect();
            label_memorization_bits(&c, &m)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMemorization {
    pub sample_id: u64,
    pub group_id: u32,
    pub d_score: f64,
    pub mem: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMemorization {
    pub group_id: u32,
    pub is_spurious: Option<bool>,
    pub n: usize,
    pub mean_d: f64,
    pub mean_mem: f64,
    /// Density of the group's d scores; absent for groups with fewer than two samples.
    pub d_density: Option<DensityCurve>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemorizationReport {
    pub samples: Vec<SampleMemorization>,
    pub excluded: Vec<u64>,
    pub groups: Vec<GroupMemorization>,
}

impl MemorizationReport {
    pub fn d_scores_where(&self, pick: impl Fn(u32) -> bool) -> Vec<f64> {
        self.samples
            .iter()
            .filter(|s| pick(s.group_id))
            .map(|s| s.d_score)
            .collect()
    }

    pub fn samples_csv(&self) -> String {
        let mut out = String::from("sample_id,group_id,d_score,mem\n");
        for s in &self.samples {
            out.push_str(&format!(
                "{},{},{:?},{:?}\n",
                s.sample_id, s.group_id, s.d_score, s.mem
            ));
        }
        out
    }

    pub fn density_csv(&self) -> String {
        let mut out = String::from("group_id,x,density\n");
        for g in &self.groups {
            if let Some(c) = &g.d_density {
                for (x, f) in c.x.iter().zip(&c.density) {
                    out.push_str(&format!("{},{x:?},{f:?}\n", g.group_id));
                }
            }
        }
        out
    }
}

/// Privacy score and label memorization over `shadows`, with per-group summaries.
pub fn memorization_report(
    scores: &ScoreSet,
    shadows: &[usize],
    spurious: &BTreeMap<u32, bool>,
    mode: VarianceMode,
) -> Result<MemorizationReport> {
    let stats = attack::fit_gaussians(scores, shadows, mode);
    let d = privacy_score_d(&stats);
    let mem = label_memorization(scores, shadows);
    let mut samples = Vec::new();
    let mut excluded = Vec::new();
    for i in 0..scores.n_samples() {
        match (d[i], mem[i]) {
            (Some(d), Some(m)) => samples.push(SampleMemorization {
                sample_id: scores.sample_ids[i],
                group_id: scores.groups[i],
                d_score: d,
                mem: m,
            }),
            _ => excluded.push(scores.sample_ids[i]),
        }
    }
    if !excluded.is_empty() {
        log::warn!(
            "{} samples lack IN or OUT shadow models and were excluded",
            excluded.len()
        );
    }
    let mut by_group: BTreeMap<u32, Vec<&SampleMemorization>> = BTreeMap::new();
    for s in &samples {
        by_group.entry(s.group_id).or_default().push(s);
    }
    let mut groups = Vec::with_capacity(by_group.len());
    for (g, rows) in by_group {
        let n = rows.len();
        let ds: Vec<f64> = rows.iter().map(|r| r.d_score).collect();
        let d_density = if n >= 2 {
            Some(kde_density(&ds, None, Bandwidth::Scott)?)
        } else {
            None
        };
        groups.push(GroupMemorization {
            group_id: g,
            is_spurious: spurious.get(&g).copied(),
            n,
            mean_d: ds.iter().sum::<f64>() / n as f64,
            mean_mem: rows.iter().map(|r| r.mem).sum::<f64>() / n as f64,
            d_density,
        });
    }
    Ok(MemorizationReport {
        samples,
        excluded,
        groups,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub df: f64,
    /// One-sided p-value for `mean(a) > mean(b)`.
    pub p_value: f64,
}

/// Welch's unequal-variance t-test, alternative `mean(a) > mean(b)`.
pub fn welch_t_test_greater(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InvalidArgument(
            "t-test needs at least two values per side".into(),
        ));
    }
    let mv = |xs: &[f64]| {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, v, n)
    };
    let (ma, va, na) = mv(a);
    let (mb, vb, nb) = mv(b);
    let se2 = va / na + vb / nb;
    if !(se2 > 0.0) {
        return Err(Error::Numeric("t-test with zero variance".into()));
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / ((va / na).powi(2) / (na - 1.0) + (vb / nb).powi(2) / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Numeric(e.to_string()))?;
    Ok(TTest {
        t,
        df,
        p_value: 1.0 - dist.cdf(t),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CkaProfile {
    pub groups: BTreeMap<u32, f64>,
    pub total: f64,
    pub skipped: Vec<u32>,
}

fn group_rows(samples: &[SampleRecord]) -> BTreeMap<u32, Vec<usize>> {
    let mut out: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        out.entry(s.group).or_default().push(i);
    }
    out
}

/// Per-group and total linear CKA between two models' embeddings of `samples`.
///
/// Groups with fewer than two samples, or on which either embedding is constant, are skipped.
pub fn group_cka_profile(a: &Model, b: &Model, samples: &[SampleRecord]) -> Result<CkaProfile> {
    let ea = trainer::extract_embeddings(a, samples);
    let eb = trainer::extract_embeddings(b, samples);
    embedding_cka_profile(&ea, &eb, samples)
}

/// Same as [`group_cka_profile`] from precomputed embeddings aligned with `samples`.
pub fn embedding_cka_profile(
    ea: &EmbeddingMatrix,
    eb: &EmbeddingMatrix,
    samples: &[SampleRecord],
) -> Result<CkaProfile> {
    if ea.n_rows() != samples.len() {
        return Err(Error::InvalidArgument(
            "embedding rows do not match samples".into(),
        ));
    }
    let total = linear_cka(ea, eb)?;
    let mut groups = BTreeMap::new();
    let mut skipped = Vec::new();
    for (g, rows) in group_rows(samples) {
        if rows.len() < 2 {
            skipped.push(g);
            continue;
        }
        match linear_cka(&ea.select(&rows), &eb.select(&rows)) {
            Ok(v) => {
                groups.insert(g, v);
            }
            Err(Error::DegenerateEmbedding(_)) => skipped.push(g),
            Err(e) => return Err(e),
        }
    }
    if !skipped.is_empty() {
        log::warn!("CKA skipped groups {skipped:?}");
    }
    Ok(CkaProfile {
        groups,
        total,
        skipped,
    })
}

/// A named model plus training recipe, one side of an audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedConfig {
    pub label: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// Shared parameters of shadow/target audits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditSetup {
    pub n_shadows: usize,
    pub n_targets: usize,
    pub frac: f64,
    pub stratified: bool,
    pub seed: u64,
}

/// One plan covering shadows (rows `0..n_shadows`) then targets.
pub fn audit_plan(data: &Dataset, setup: &AuditSetup) -> Result<(SplitPlan, SplitPlan)> {
    let n = setup.n_shadows + setup.n_targets;
    let plan = shadows::plan_splits(data, n, setup.frac, setup.stratified, setup.seed)?;
    Ok((
        plan.select_rows(0..setup.n_shadows),
        plan.select_rows(setup.n_shadows..n),
    ))
}

/// Trains and scores the models of one side of an audit.
pub fn train_side(
    plan: &SplitPlan,
    data: &Dataset,
    cfg: &NamedConfig,
    role: Role,
    seed: u64,
) -> Result<(Vec<Model>, ScoreSet)> {
    let opts = RunOptions { role, seed };
    let models = shadows::train_plan_models(plan, data, &cfg.model, &cfg.train, &opts)?;
    let set = shadows::score_models(&models, plan, data, role, cfg.train.method.as_str());
    Ok((models, set))
}

/// Attacks every target-role model of `set` using all shadow-role models.
pub fn attack_targets(set: &ScoreSet, attack: AttackSpec) -> Vec<AttackResult> {
    set.indices_with_role(Role::Target)
        .into_par_iter()
        .map(|t| attack::run_attack(set, t, attack))
        .collect()
}

/// Total-population TPR at `fpr`, summarized over targets.
pub fn total_tpr(results: &[AttackResult], fpr: f64) -> Result<(Summary, Summary)> {
    let mut tprs = Vec::with_capacity(results.len());
    let mut achieved = Vec::with_capacity(results.len());
    for r in results {
        let (s, m): (Vec<f64>, Vec<bool>) =
            r.entries.iter().map(|e| (e.score, e.is_member)).unzip();
        let p = metrics::tpr_at_fpr(&metrics::roc_curve(&s, &m)?, fpr)?;
        tprs.push(p.tpr);
        achieved.push(p.achieved_fpr);
    }
    let none = || Error::InvalidArgument("no targets to summarize".into());
    Ok((
        Summary::of(&tprs).ok_or_else(none)?,
        Summary::of(&achieved).ok_or_else(none)?,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixCell {
    pub tpr: Summary,
    pub achieved_fpr: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackMatrix {
    pub attack: AttackSpec,
    pub fpr: f64,
    pub shadow_labels: Vec<String>,
    pub target_labels: Vec<String>,
    /// `cells[s][t]`: shadows trained under config `s` attacking targets under config `t`.
    pub cells: Vec<Vec<MatrixCell>>,
}

impl AttackMatrix {
    /// Row index of the best shadow config for each target column.
    pub fn best_shadow_per_target(&self) -> Vec<usize> {
        (0..self.target_labels.len())
            .map(|t| {
                (0..self.shadow_labels.len())
                    .max_by(|&a, &b| {
                        self.cells[a][t]
                            .tpr
                            .mean
                            .total_cmp(&self.cells[b][t].tpr.mean)
                            .then(b.cmp(&a))
                    })
                    .expect("at least one shadow config")
            })
            .collect()
    }

    /// For each target column, whether the matching shadow label is (one of) the best.
    pub fn diagonal_is_best(&self) -> Vec<Option<bool>> {
        self.target_labels
            .iter()
            .enumerate()
            .map(|(t, label)| {
                let s = self.shadow_labels.iter().position(|l| l == label)?;
                let best = (0..self.shadow_labels.len())
                    .map(|r| self.cells[r][t].tpr.mean)
                    .fold(f64::NEG_INFINITY, f64::max);
                Some(self.cells[s][t].tpr.mean >= best)
            })
            .collect()
    }

    /// Mean TPR grid: shadow configs as rows, target configs as columns.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("shadow\\target");
        for t in &self.target_labels {
            out.push(',');
            out.push_str(t);
        }
        out.push('\n');
        for (s, label) in self.shadow_labels.iter().enumerate() {
            out.push_str(label);
            for c in &self.cells[s] {
                out.push_str(&format!(",{:?}", c.tpr.mean));
            }
            out.push('\n');
        }
        out
    }
}

/// Every shadow config against every target config on one fixed split plan.
pub fn cross_config_attack_matrix(
    shadow_cfgs: &[NamedConfig],
    target_cfgs: &[NamedConfig],
    data: &Dataset,
    setup: &AuditSetup,
    attack: AttackSpec,
    fpr: f64,
) -> Result<AttackMatrix> {
    if shadow_cfgs.is_empty() || target_cfgs.is_empty() {
        return Err(Error::InvalidArgument(
            "matrix needs at least one config per side".into(),
        ));
    }
    let (shadow_plan, target_plan) = audit_plan(data, setup)?;
    let shadow_sets = shadow_cfgs
        .iter()
        .map(|c| train_side(&shadow_plan, data, c, Role::Shadow, setup.seed).map(|r| r.1))
        .collect::<Result<Vec<_>>>()?;
    let target_sets = target_cfgs
        .iter()
        .map(|c| train_side(&target_plan, data, c, Role::Target, setup.seed).map(|r| r.1))
        .collect::<Result<Vec<_>>>()?;
    let mut cells = Vec::with_capacity(shadow_sets.len());
    for s in &shadow_sets {
        let mut row = Vec::with_capacity(target_sets.len());
        for t in &target_sets {
            let set = s.clone().concat(t)?;
            let (tpr, achieved_fpr) = total_tpr(&attack_targets(&set, attack), fpr)?;
            row.push(MatrixCell { tpr, achieved_fpr });
        }
        cells.push(row);
    }
    Ok(AttackMatrix {
        attack,
        fpr,
        shadow_labels: shadow_cfgs.iter().map(|c| c.label.clone()).collect(),
        target_labels: target_cfgs.iter().map(|c| c.label.clone()).collect(),
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::SampleGaussian;
    use crate::domain::RngStream;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian_matrix(n: usize, d: usize, seed: u64) -> EmbeddingMatrix {
        let mut rng = RngStream::new(seed, "emb").rng();
        let data = (0..n * d)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        EmbeddingMatrix::new((0..n as u64).collect(), d, data).unwrap()
    }

    /// Random orthogonal matrix via QR of a Gaussian matrix.
    fn orthogonal(d: usize, seed: u64) -> Vec<f64> {
        let g = gaussian_matrix(d, d, seed);
        let q = DMatrix::from_row_slice(d, d, &g.data).qr().q();
        let mut out = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                out[i * d + j] = q[(i, j)];
            }
        }
        out
    }

    /// Direct `tr(K_A H K_B H)` with explicit n x n matrices.
    fn brute_hsic(a: &EmbeddingMatrix, b: &EmbeddingMatrix) -> f64 {
        let n = a.n_rows();
        let gram = |e: &EmbeddingMatrix| {
            let mut k = vec![vec![0.0; n]; n];
            for i in 0..n {
                for j in 0..n {
                    k[i][j] = e.row(i).iter().zip(e.row(j)).map(|(x, y)| x * y).sum();
                }
            }
            k
        };
        let h = |i: usize, j: usize| f64::from(u8::from(i == j)) - 1.0 / n as f64;
        let mul = |x: &Vec<Vec<f64>>, y: &dyn Fn(usize, usize) -> f64| {
            let mut out = vec![vec![0.0; n]; n];
            for i in 0..n {
                for j in 0..n {
                    out[i][j] = (0..n).map(|k| x[i][k] * y(k, j)).sum();
                }
            }
            out
        };
        let ka = gram(a);
        let kb = gram(b);
        let kah = mul(&ka, &h);
        let kbh = mul(&kb, &h);
        (0..n)
            .map(|i| (0..n).map(|k| kah[i][k] * kbh[k][i]).sum::<f64>())
            .sum()
    }

    #[test]
    fn hsic_matches_trace_oracle() {
        for seed in 0..3 {
            let a = gaussian_matrix(50, 8, seed);
            let b = gaussian_matrix(50, 8, seed + 100);
            let fast = hsic(&a, &b).unwrap();
            let slow = brute_hsic(&a, &b);
            assert!(
                (fast - slow).abs() <= 1e-9 * slow.abs().max(1.0),
                "{fast} {slow}"
            );
        }
    }

    #[test]
    fn hsic_of_constant_is_zero_and_self_is_positive() {
        let a = gaussian_matrix(20, 3, 1);
        let c = EmbeddingMatrix::new((0..20).collect(), 2, vec![3.5; 40]).unwrap();
        assert!(hsic(&a, &c).unwrap().abs() < 1e-20);
        assert!(hsic(&a, &a).unwrap() > 0.0);
        assert!(matches!(
            linear_cka(&a, &c),
            Err(Error::DegenerateEmbedding(_))
        ));
        let short = gaussian_matrix(19, 3, 1);
        assert!(hsic(&a, &short).is_err());
    }

    #[test]
    fn cka_identity_and_invariances() {
        let e = gaussian_matrix(200, 6, 3);
        assert!((linear_cka(&e, &e).unwrap() - 1.0).abs() < 1e-9);
        let q = orthogonal(6, 4);
        for c in [0.01, -2.0, 37.0] {
            let scaled: Vec<f64> = q.iter().map(|v| v * c).collect();
            let t = e.transform(&scaled, 6);
            assert!((linear_cka(&e, &t).unwrap() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn independent_embeddings_have_low_cka() {
        let a = gaussian_matrix(2000, 8, 5);
        let b = gaussian_matrix(2000, 8, 6);
        assert!(linear_cka(&a, &b).unwrap() < 0.1);
    }

    proptest! {
        #[test]
        fn cka_is_symmetric(seed in 0u64..1000, d1 in 1usize..6, d2 in 1usize..6) {
            let a = gaussian_matrix(30, d1, seed);
            let b = gaussian_matrix(30, d2, seed + 7);
            let ab = linear_cka(&a, &b).unwrap();
            let ba = linear_cka(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() <= 1e-12);
            prop_assert!((0.0..=1.0).contains(&ab));
        }

        #[test]
        fn complexity_is_monotone_in_tau(seed in 0u64..500, t1 in 0.05f64..1.0, t2 in 0.05f64..1.0) {
            let e = gaussian_matrix(40, 6, seed);
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let k_lo = feature_complexity(&e, lo).unwrap();
            let k_hi = feature_complexity(&e, hi).unwrap();
            prop_assert!(k_lo.k <= k_hi.k);
            prop_assert!(k_hi.evr.windows(2).all(|w| w[0] <= w[1]));
            prop_assert_eq!(*k_hi.evr.last().unwrap(), 1.0);
        }
    }

    #[test]
    fn evr_hand_computed_spectrum() {
        let evr = explained_variance(&[0.4, 0.3, 0.2, 0.1]);
        assert_eq!(components_for(&evr, 0.9), 3);
        assert_eq!(components_for(&evr, 0.95), 4);
        let iso = explained_variance(&[1.0; 10]);
        assert!((iso[8] - 0.9).abs() < 1e-12);
        assert_eq!(components_for(&iso, 0.95), 10);
    }

    #[test]
    fn complexity_of_scaled_axes() {
        // Independent columns with variances (4, 3, 2, 1) give that spectrum up to sampling error.
        let base = gaussian_matrix(20000, 4, 9);
        let scales = [2.0, 3f64.sqrt(), 2f64.sqrt(), 1.0];
        let mut m = vec![0.0; 16];
        for i in 0..4 {
            m[i * 4 + i] = scales[i];
        }
        let e = base.transform(&m, 4);
        assert_eq!(feature_complexity(&e, 0.6).unwrap().k, 2);
        assert_eq!(feature_complexity(&e, 0.99).unwrap().k, 4);
    }

    #[test]
    fn rank_one_embedding_needs_one_component() {
        let mut rng = RngStream::new(2, "rank1").rng();
        let dir = [1.0, -2.0, 0.5, 3.0];
        let mut data = Vec::new();
        for _ in 0..100 {
            let s: f64 = StandardNormal.sample(&mut rng);
            data.extend(dir.iter().map(|d| d * s));
        }
        let e = EmbeddingMatrix::new((0..100).collect(), 4, data).unwrap();
        for tau in [0.1, 0.5, 0.95, 1.0] {
            assert_eq!(feature_complexity(&e, tau).unwrap().k, 1);
        }
    }

    #[test]
    fn full_tau_gives_rank() {
        let base = gaussian_matrix(60, 3, 11);
        // Embed a rank-3 matrix in 5 columns.
        let m = [
            1.0, 0.0, 0.0, 2.0, 1.0, 0.0, 1.0, 0.0, -1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0,
        ];
        let e = base.transform(&m, 5);
        assert_eq!(feature_complexity(&e, 1.0).unwrap().k, 3);
    }

    #[test]
    fn complexity_errors() {
        let z = EmbeddingMatrix::new((0..5).collect(), 2, vec![1.0; 10]).unwrap();
        assert!(matches!(
            feature_complexity(&z, 0.9),
            Err(Error::DegenerateEmbedding(_))
        ));
        let one = gaussian_matrix(1, 3, 0);
        assert!(feature_complexity(&one, 0.9).is_err());
        assert!(feature_complexity(&gaussian_matrix(5, 2, 0), 0.0).is_err());
    }

    #[test]
    fn kde_integrates_to_one() {
        let mut rng = RngStream::new(12, "kde").rng();
        for n in [2, 10, 300] {
            let v: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 10.0 - 3.0).collect();
            let c = kde_density(&v, None, Bandwidth::Scott).unwrap();
            assert!((c.integral() - 1.0).abs() < 0.02, "n={n}: {}", c.integral());
            assert!(c.density.iter().all(|f| *f >= 0.0));
            assert_eq!(c.x.len(), KDE_GRID_POINTS);
        }
    }

    #[test]
    fn kde_recovers_standard_normal() {
        let mut rng = RngStream::new(13, "kde-normal").rng();
        let v: Vec<f64> = (0..5000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let c = kde_density(&v, None, Bandwidth::Scott).unwrap();
        let worst = c
            .x
            .iter()
            .zip(&c.density)
            .map(|(x, f)| (f - (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()).abs())
            .fold(0.0, f64::max);
        assert!(worst < 0.05, "{worst}");
    }

    #[test]
    fn kde_degenerate_input_peaks_at_value() {
        let c = kde_density(&[2.5; 8], None, Bandwidth::Scott).unwrap();
        assert_eq!(c.bandwidth, BANDWIDTH_FLOOR);
        let peak = c
            .density
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert!((c.x[peak] - 2.5).abs() < 2e-5);
        assert!((c.integral() - 1.0).abs() < 0.02);
        assert!(kde_density(&[1.0], None, Bandwidth::Scott).is_err());
    }

    fn stats_of(gs: &[SampleGaussian]) -> GaussianStats {
        GaussianStats {
            samples: gs.iter().copied().map(Some).collect(),
            variance_mode: VarianceMode::PerExample,
            n_shadows: 4,
        }
    }

    #[test]
    fn privacy_score_examples() {
        let g = |mi, si, mo, so| SampleGaussian {
            mu_in: mi,
            sigma_in: si,
            mu_out: mo,
            sigma_out: so,
            n_in: 2,
            n_out: 2,
        };
        let d = privacy_score_d(&stats_of(&[g(0.3, 1.0, 0.3, 2.0), g(1.0, 0.5, 0.0, 0.5)]));
        assert_eq!(d, vec![Some(0.0), Some(1.0)]);
    }

    #[test]
    fn label_memorization_examples() {
        let member = [
            true, true, true, true, true, false, false, false, false, false,
        ];
        assert_eq!(
            label_memorization_bits(
                &[true, true, true, true, true, false, false, false, false, false],
                &member
            ),
            Some(1.0)
        );
        assert_eq!(label_memorization_bits(&[true; 10], &member), Some(0.0));
        // 10 IN models with 8 correct, 10 OUT models with 5 correct.
        let mut correct = vec![true; 8];
        correct.extend([false; 2]);
        correct.extend([true; 5]);
        correct.extend([false; 5]);
        let mut m = vec![true; 10];
        m.extend([false; 10]);
        assert!((label_memorization_bits(&correct, &m).unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(label_memorization_bits(&[true, false], &[true, true]), None);
    }

    #[test]
    fn welch_test_detects_shift() {
        let mut rng = RngStream::new(14, "ttest").rng();
        let a: Vec<f64> = (0..200).map(|_| StandardNormal.sample(&mut rng)).collect();
        let b: Vec<f64> = a.iter().map(|x| x - 0.5).collect();
        let t = welch_t_test_greater(&a, &b).unwrap();
        assert!(t.p_value < 0.001);
        let t = welch_t_test_greater(&b, &a).unwrap();
        assert!(t.p_value > 0.99);
        // Equal-size equal-variance case reduces to df = 2n - 2.
        let t = welch_t_test_greater(&a, &a.iter().map(|x| x + 0.0).collect::<Vec<_>>()).unwrap();
        assert!((t.df - 398.0).abs() < 1e-9);
        assert!((t.p_value - 0.5).abs() < 1e-12);
    }

    #[test]
    fn embedding_csv_round_trip() {
        let e = gaussian_matrix(7, 3, 15);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("emb.csv");
        e.write(&p).unwrap();
        assert_eq!(EmbeddingMatrix::read(&p).unwrap(), e);
        std::fs::write(&p, "sample_id,e0\n1,abc\n").unwrap();
        assert!(matches!(
            EmbeddingMatrix::read(&p),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(EmbeddingMatrix::new(vec![0], 1, vec![f64::NAN]).is_err());
    }
}
