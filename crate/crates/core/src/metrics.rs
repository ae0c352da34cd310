//! ROC curves, low-FPR operating points, and per-group privacy reports.
//!
//! Ties between scores move member and non-member counts in a single step, so
//! the step-integrated AUROC equals the Mann-Whitney statistic with half credit
//! for tied pairs.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attack::{AttackResult, AttackSpec};
use crate::error::{Error, Result};
use crate::fsutil;

#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    /// Unique scores, descending; point `i + 1` classifies `score >= thresholds[i]` as member.
    pub thresholds: Vec<f64>,
    /// Cumulative counts; index 0 is the empty selection.
    pub tp: Vec<usize>,
    pub fp: Vec<usize>,
    pub n_members: usize,
    pub n_nonmembers: usize,
}

impl RocCurve {
    pub fn tpr(&self) -> Vec<f64> {
        self.tp
            .iter()
            .map(|&t| t as f64 / self.n_members as f64)
            .collect()
    }

    pub fn fpr(&self) -> Vec<f64> {
        self.fp
            .iter()
            .map(|&f| f as f64 / self.n_nonmembers as f64)
            .collect()
    }
}

pub fn roc_curve(scores: &[f64], members: &[bool]) -> Result<RocCurve> {
    assert_eq!(scores.len(), members.len());
    let n_members = members.iter().filter(|m| **m).count();
    let n_nonmembers = members.len() - n_members;
    if n_members == 0 || n_nonmembers == 0 {
        return Err(Error::DegenerateRoc(format!(
            "{n_members} members and {n_nonmembers} non-members"
        )));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::Numeric(format!("score {s} is not a number")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut thresholds = Vec::new();
    let mut tp = vec![0];
    let mut fp = vec![0];
    let (mut t, mut f) = (0, 0);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if members[order[i]] {
                t += 1;
            } else {
                f += 1;
            }
            i += 1;
        }
        thresholds.push(s);
        tp.push(t);
        fp.push(f);
    }
    Ok(RocCurve {
        thresholds,
        tp,
        fp,
        n_members,
        n_nonmembers,
    })
}

/// Exact step integral; equals `P(member > non-member) + 0.5 * P(tie)`.
pub fn auroc(curve: &RocCurve) -> f64 {
    let mut twice_area: u128 = 0;
    for w in 1..curve.tp.len() {
        let dfp = (curve.fp[w] - curve.fp[w - 1]) as u128;
        twice_area += dfp * (curve.tp[w] + curve.tp[w - 1]) as u128;
    }
    twice_area as f64 / (2.0 * curve.n_members as f64 * curve.n_nonmembers as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub requested_fpr: f64,
    /// FPR budget actually used: the request, or `1 / n_nonmembers` if smaller.
    pub achieved_fpr: f64,
    pub tpr: f64,
}

/// Best TPR with FPR at most the attainable budget `max(requested, 1 / n_nonmembers)`.
pub fn tpr_at_fpr(curve: &RocCurve, requested_fpr: f64) -> Result<OperatingPoint> {
    if !(requested_fpr > 0.0 && requested_fpr <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "requested FPR {requested_fpr} outside (0, 1]"
        )));
    }
    let n_neg = curve.n_nonmembers as f64;
    let achieved = requested_fpr.max(1.0 / n_neg);
    let budget = fp_budget(achieved, curve.n_nonmembers);
    let best = curve
        .fp
        .iter()
        .zip(&curve.tp)
        .filter(|(&f, _)| f <= budget)
        .map(|(_, &t)| t)
        .max()
        .unwrap_or(0);
    Ok(OperatingPoint {
        requested_fpr,
        achieved_fpr: achieved,
        tpr: best as f64 / curve.n_members as f64,
    })
}

/// Largest false-positive count within an FPR budget.
pub fn fp_budget(fpr: f64, n_nonmembers: usize) -> usize {
    ((fpr * n_nonmembers as f64) + 1e-9).floor() as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "id")]
pub enum CellKey {
    Total,
    Group(u32),
    /// Pool of all spurious (`true`) or all non-spurious (`false`) groups.
    Spurious(bool),
}

impl fmt::Display for CellKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CellKey::Total => f.write_str("total"),
            CellKey::Group(g) => write!(f, "g{g}"),
            CellKey::Spurious(true) => f.write_str("spurious"),
            CellKey::Spurious(false) => f.write_str("non_spurious"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportCell {
    pub key: CellKey,
    pub is_spurious: Option<bool>,
    pub n_members: usize,
    pub n_nonmembers: usize,
    /// `None` when the cell has no members or no non-members.
    pub auroc: Option<f64>,
    pub points: Vec<OperatingPoint>,
}

impl ReportCell {
    pub fn evaluable(&self) -> bool {
        self.auroc.is_some()
    }

    pub fn tpr_at(&self, requested: f64) -> Option<&OperatingPoint> {
        self.points.iter().find(|p| p.requested_fpr == requested)
    }
}

/// One target's privacy numbers, per cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetReport {
    pub target_id: u32,
    pub attack: AttackSpec,
    pub cells: Vec<ReportCell>,
}

impl TargetReport {
    pub fn cell(&self, key: CellKey) -> Option<&ReportCell> {
        self.cells.iter().find(|c| c.key == key)
    }
}

fn evaluate_cell(
    key: CellKey,
    is_spurious: Option<bool>,
    scores: &[f64],
    members: &[bool],
    fprs: &[f64],
) -> Result<ReportCell> {
    let n_members = members.iter().filter(|m| **m).count();
    let n_nonmembers = members.len() - n_members;
    if n_members == 0 || n_nonmembers == 0 {
        return Ok(ReportCell {
            key,
            is_spurious,
            n_members,
            n_nonmembers,
            auroc: None,
            points: Vec::new(),
        });
    }
    let curve = roc_curve(scores, members)?;
    let points = fprs
        .iter()
        .map(|&f| tpr_at_fpr(&curve, f))
        .collect::<Result<Vec<_>>>()?;
    Ok(ReportCell {
        key,
        is_spurious,
        n_members,
        n_nonmembers,
        auroc: Some(auroc(&curve)),
        points,
    })
}

/// Report with one cell per listed group (`spurious` maps group id to flag) plus a total.
pub fn per_group_report(
    result: &AttackResult,
    spurious: &BTreeMap<u32, bool>,
    fprs: &[f64],
) -> Result<TargetReport> {
    let mut groups: BTreeSet<u32> = spurious.keys().copied().collect();
    groups.extend(result.entries.iter().map(|e| e.group_id));
    let mut cells = Vec::with_capacity(groups.len() + 1);
    for g in groups {
        let (s, m): (Vec<f64>, Vec<bool>) = result
            .entries
            .iter()
            .filter(|e| e.group_id == g)
            .map(|e| (e.score, e.is_member))
            .unzip();
        cells.push(evaluate_cell(
            CellKey::Group(g),
            spurious.get(&g).copied(),
            &s,
            &m,
            fprs,
        )?);
    }
    let (s, m): (Vec<f64>, Vec<bool>) = result
        .entries
        .iter()
        .map(|e| (e.score, e.is_member))
        .unzip();
    cells.push(evaluate_cell(CellKey::Total, None, &s, &m, fprs)?);
    Ok(TargetReport {
        target_id: result.target_id,
        attack: result.attack,
        cells,
    })
}

/// Two-cell report pooling spurious groups against non-spurious groups.
pub fn spurious_partition_report(
    result: &AttackResult,
    spurious: &BTreeMap<u32, bool>,
    fprs: &[f64],
) -> Result<TargetReport> {
    let mut cells = Vec::with_capacity(2);
    for flag in [true, false] {
        let (s, m): (Vec<f64>, Vec<bool>) = result
            .entries
            .iter()
            .filter(|e| spurious.get(&e.group_id).copied().unwrap_or(false) == flag)
            .map(|e| (e.score, e.is_member))
            .unzip();
        cells.push(evaluate_cell(
            CellKey::Spurious(flag),
            Some(flag),
            &s,
            &m,
            fprs,
        )?);
    }
    Ok(TargetReport {
        target_id: result.target_id,
        attack: result.attack,
        cells,
    })
}

/// Mean and standard error (`sd / sqrt(n)`, sample sd) over targets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Absent when fewer than two values were aggregated.
    pub se: Option<f64>,
    pub n: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Summary> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let se = if values.len() > 1 {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            Some((var / n).sqrt())
        } else {
            None
        };
        Some(Summary {
            mean,
            se,
            n: values.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatePoint {
    pub requested_fpr: f64,
    pub achieved_fpr: Summary,
    pub tpr: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateCell {
    pub key: CellKey,
    pub is_spurious: Option<bool>,
    pub n_members: Summary,
    pub n_nonmembers: Summary,
    /// `None` when the cell was not evaluable for any target.
    pub auroc: Option<Summary>,
    pub points: Vec<AggregatePoint>,
}

impl AggregateCell {
    pub fn tpr_at(&self, requested: f64) -> Option<&AggregatePoint> {
        self.points.iter().find(|p| p.requested_fpr == requested)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupPrivacyReport {
    pub attack: AttackSpec,
    pub n_targets: usize,
    pub fprs: Vec<f64>,
    pub cells: Vec<AggregateCell>,
}

impl GroupPrivacyReport {
    pub fn cell(&self, key: CellKey) -> Option<&AggregateCell> {
        self.cells.iter().find(|c| c.key == key)
    }

    /// Mean TPR at `fpr`, averaged over the evaluable cells matching `pick`.
    pub fn mean_tpr_where(&self, fpr: f64, pick: impl Fn(&AggregateCell) -> bool) -> Option<f64> {
        let vals: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| pick(c))
            .filter_map(|c| c.tpr_at(fpr).map(|p| p.tpr.mean))
            .collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }
}

/// Averages per-target reports cell by cell; cells not evaluable for a target are skipped.
pub fn aggregate_targets(reports: &[TargetReport]) -> Result<GroupPrivacyReport> {
    let first = reports
        .first()
        .ok_or_else(|| Error::InvalidArgument("no target reports to aggregate".into()))?;
    let keys: Vec<CellKey> = first.cells.iter().map(|c| c.key).collect();
    for r in reports {
        let k: Vec<CellKey> = r.cells.iter().map(|c| c.key).collect();
        if k != keys {
            return Err(Error::Validation(format!(
                "target {} has a different group set",
                r.target_id
            )));
        }
        if r.attack != first.attack {
            return Err(Error::Validation("reports mix attacks".into()));
        }
    }
    let fprs: Vec<f64> = {
        let mut f: Vec<f64> = reports
            .iter()
            .flat_map(|r| r.cells.iter())
            .flat_map(|c| c.points.iter().map(|p| p.requested_fpr))
            .collect();
        f.sort_by(f64::total_cmp);
        f.dedup();
        f
    };
    let mut cells = Vec::with_capacity(keys.len());
    for (ci, &key) in keys.iter().enumerate() {
        let column: Vec<&ReportCell> = reports.iter().map(|r| &r.cells[ci]).collect();
        let counts = |f: fn(&ReportCell) -> usize| {
            let v: Vec<f64> = column.iter().map(|c| f(c) as f64).collect();
            Summary::of(&v).expect("at least one report")
        };
        let evaluable: Vec<&&ReportCell> = column.iter().filter(|c| c.evaluable()).collect();
        let aucs: Vec<f64> = evaluable.iter().filter_map(|c| c.auroc).collect();
        let points = fprs
            .iter()
            .filter_map(|&f| {
                let pts: Vec<&OperatingPoint> =
                    evaluable.iter().filter_map(|c| c.tpr_at(f)).collect();
                let tpr: Vec<f64> = pts.iter().map(|p| p.tpr).collect();
                let ach: Vec<f64> = pts.iter().map(|p| p.achieved_fpr).collect();
                Some(AggregatePoint {
                    requested_fpr: f,
                    achieved_fpr: Summary::of(&ach)?,
                    tpr: Summary::of(&tpr)?,
                })
            })
            .collect();
        cells.push(AggregateCell {
            key,
            is_spurious: column[0].is_spurious,
            n_members: counts(|c| c.n_members),
            n_nonmembers: counts(|c| c.n_nonmembers),
            auroc: Summary::of(&aucs),
            points,
        });
    }
    Ok(GroupPrivacyReport {
        attack: first.attack,
        n_targets: reports.len(),
        fprs,
        cells,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:?}"))
}

pub const REPORT_CSV_HEADER: &str = "group,is_spurious,attack,requested_fpr,achieved_fpr_mean,tpr_mean,tpr_se,n,auroc_mean,auroc_se";

/// One row per (group, attack, fpr).
pub fn report_to_csv(reports: &[GroupPrivacyReport]) -> String {
    let mut out = String::from(REPORT_CSV_HEADER);
    out.push('\n');
    for r in reports {
        for c in &r.cells {
            let spur = c
                .is_spurious
                .map_or_else(String::new, |b| u8::from(b).to_string());
            for p in &c.points {
                out.push_str(&format!(
                    "{},{},{},{:?},{:?},{:?},{},{},{},{}\n",
                    c.key,
                    spur,
                    r.attack,
                    p.requested_fpr,
                    p.achieved_fpr.mean,
                    p.tpr.mean,
                    fmt_opt(p.tpr.se),
                    p.tpr.n,
                    fmt_opt(c.auroc.map(|a| a.mean)),
                    fmt_opt(c.auroc.and_then(|a| a.se)),
                ));
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ReportEntry {
    group: String,
    is_spurious: Option<bool>,
    attack: String,
    fpr: f64,
    achieved_fpr: f64,
    mean: f64,
    se: Option<f64>,
    n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ReportDocument {
    entries: Vec<ReportEntry>,
    auroc: Vec<ReportEntry>,
}

/// Structured report keyed by (group, attack, fpr); AUROC rows use `fpr = 0`.
pub fn report_to_json(reports: &[GroupPrivacyReport]) -> String {
    let mut doc = ReportDocument {
        entries: Vec::new(),
        auroc: Vec::new(),
    };
    for r in reports {
        for c in &r.cells {
            for p in &c.points {
                doc.entries.push(ReportEntry {
                    group: c.key.to_string(),
                    is_spurious: c.is_spurious,
                    attack: r.attack.to_string(),
                    fpr: p.requested_fpr,
                    achieved_fpr: p.achieved_fpr.mean,
                    mean: p.tpr.mean,
                    se: p.tpr.se,
                    n: p.tpr.n,
                });
            }
            if let Some(a) = c.auroc {
                doc.auroc.push(ReportEntry {
                    group: c.key.to_string(),
                    is_spurious: c.is_spurious,
                    attack: r.attack.to_string(),
                    fpr: 0.0,
                    achieved_fpr: 0.0,
                    mean: a.mean,
                    se: a.se,
                    n: a.n,
                });
            }
        }
    }
    let mut s = serde_json::to_string_pretty(&doc).expect("report serializes");
    s.push('\n');
    s
}

pub fn write_report(
    reports: &[GroupPrivacyReport],
    json_path: &Path,
    csv_path: &Path,
) -> Result<()> {
    fsutil::write_atomic_str(json_path, &report_to_json(reports))?;
    fsutil::write_atomic_str(csv_path, &report_to_csv(reports))
}
