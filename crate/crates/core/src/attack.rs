//! Membership scores computed from shadow-model confidences.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;
use crate::shadows::{clamp_prob, ScoreSet};

/// Standard deviations never drop below this.
pub const SIGMA_FLOOR: f64 = 1e-4;

/// `log(p / (1 - p))` of a clamped probability.
pub fn logit_confidence(p: f64) -> f64 {
    let p = clamp_prob(p);
    p.ln() - (-p).ln_1p()
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default,
)]
#[serde(rename_all = "snake_case")]
pub enum VarianceMode {
    #[default]
    PerExample,
    /// One pooled variance per side shared by every sample.
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleGaussian {
    pub mu_in: f64,
    pub sigma_in: f64,
    pub mu_out: f64,
    pub sigma_out: f64,
    pub n_in: usize,
    pub n_out: usize,
}

/// Per-sample IN/OUT Gaussians in logit space. `None` marks excluded samples.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub samples: Vec<Option<SampleGaussian>>,
    pub variance_mode: VarianceMode,
    pub n_shadows: usize,
}

fn mean_var(xs: &[f64]) -> (f64, Option<f64>) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, None);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, Some(var))
}

impl GaussianStats {
    /// Fits from per-sample IN and OUT logit lists.
    pub fn fit(in_phi: &[Vec<f64>], out_phi: &[Vec<f64>], mode: VarianceMode) -> Self {
        assert_eq!(in_phi.len(), out_phi.len());
        let n_shadows = in_phi
            .iter()
            .zip(out_phi)
            .map(|(a, b)| a.len() + b.len())
            .max()
            .unwrap_or(0);
        let mut floored = 0usize;
        let mut raw = Vec::with_capacity(in_phi.len());
        for (ins, outs) in in_phi.iter().zip(out_phi) {
            if ins.is_empty() || outs.is_empty() {
                raw.push(None);
                continue;
            }
            let (mi, vi) = mean_var(ins);
            let (mo, vo) = mean_var(outs);
            if vi.is_none() || vo.is_none() {
                floored += 1;
            }
            raw.push(Some((mi, vi, mo, vo, ins.len(), outs.len())));
        }
        if floored > 0 {
            log::warn!(
                "{floored} samples have fewer than 2 IN or OUT shadows; variance floor applied"
            );
        }

        let pooled =
            |pick: fn(&(f64, Option<f64>, f64, Option<f64>, usize, usize)) -> Option<f64>| {
                let vs: Vec<f64> = raw.iter().flatten().filter_map(pick).collect();
                if vs.is_empty() {
                    None
                } else {
                    Some(vs.iter().sum::<f64>() / vs.len() as f64)
                }
            };
        let (pool_in, pool_out) = match mode {
            VarianceMode::PerExample => (None, None),
            VarianceMode::Fixed => (pooled(|r| r.1), pooled(|r| r.3)),
        };
        let sd = |v: Option<f64>| v.map_or(SIGMA_FLOOR, |v| v.sqrt().max(SIGMA_FLOOR));
        let samples = raw
            .into_iter()
            .map(|r| {
                r.map(|(mi, vi, mo, vo, ni, no)| SampleGaussian {
                    mu_in: mi,
                    sigma_in: sd(match mode {
                        VarianceMode::PerExample => vi,
                        VarianceMode::Fixed => pool_in,
                    }),
                    mu_out: mo,
                    sigma_out: sd(match mode {
                        VarianceMode::PerExample => vo,
                        VarianceMode::Fixed => pool_out,
                    }),
                    n_in: ni,
                    n_out: no,
                })
            })
            .collect();
        GaussianStats {
            samples,
            variance_mode: mode,
            n_shadows,
        }
    }

    pub fn excluded(&self) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.is_none())
            .map(|(i, _)| i)
            .collect()
    }
}

/// Target logits of one model over all samples.
pub fn model_phi(scores: &ScoreSet, model: usize) -> Vec<f64> {
    scores
        .model_row(model)
        .iter()
        .map(|&p| logit_confidence(p))
        .collect()
}

/// Fits per-sample Gaussians from the given shadow models of a score set.
pub fn fit_gaussians(scores: &ScoreSet, shadows: &[usize], mode: VarianceMode) -> GaussianStats {
    let n = scores.n_samples();
    let mut ins = vec![Vec::new(); n];
    let mut outs = vec![Vec::new(); n];
    for &k in shadows {
        for i in 0..n {
            let phi = logit_confidence(scores.confidence(k, i));
            if scores.is_member(k, i) {
                ins[i].push(phi);
            } else {
                outs[i].push(phi);
            }
        }
    }
    let stats = GaussianStats::fit(&ins, &outs, mode);
    let excluded = stats.excluded();
    if !excluded.is_empty() {
        log::warn!(
            "{} samples lack IN or OUT shadows and are excluded",
            excluded.len()
        );
    }
    stats
}

fn log_normal_pdf(x: f64, mu: f64, sigma: f64) -> f64 {
    let z = (x - mu) / sigma;
    -0.5 * z * z - sigma.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

/// Log likelihood ratio of the IN versus OUT hypothesis.
pub fn lira_online_score(g: &SampleGaussian, phi: f64) -> f64 {
    log_normal_pdf(phi, g.mu_in, g.sigma_in) - log_normal_pdf(phi, g.mu_out, g.sigma_out)
}

pub fn std_normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// One-sided OUT test: `Phi((phi - mu_out) / sigma_out)`.
pub fn lira_offline_score(g: &SampleGaussian, phi: f64) -> f64 {
    std_normal_cdf((phi - g.mu_out) / g.sigma_out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    LiraOnline,
    LiraOffline,
    Threshold,
}

/// Attack plus variance mode, e.g. `lira_online` or `lira_offline_fixed`.
/// Serialized as its display name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct AttackSpec {
    pub kind: AttackKind,
    pub variance: VarianceMode,
}

impl From<AttackSpec> for String {
    fn from(a: AttackSpec) -> String {
        a.to_string()
    }
}

impl TryFrom<String> for AttackSpec {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl AttackSpec {
    pub const ONLINE: AttackSpec = AttackSpec {
        kind: AttackKind::LiraOnline,
        variance: VarianceMode::PerExample,
    };
    pub const OFFLINE: AttackSpec = AttackSpec {
        kind: AttackKind::LiraOffline,
        variance: VarianceMode::PerExample,
    };
    pub const THRESHOLD: AttackSpec = AttackSpec {
        kind: AttackKind::Threshold,
        variance: VarianceMode::PerExample,
    };
}

impl fmt::Display for AttackSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let base = match self.kind {
            AttackKind::LiraOnline => "lira_online",
            AttackKind::LiraOffline => "lira_offline",
            AttackKind::Threshold => return f.write_str("threshold"),
        };
        match self.variance {
            VarianceMode::PerExample => f.write_str(base),
            VarianceMode::Fixed => write!(f, "{base}_fixed"),
        }
    }
}

impl FromStr for AttackSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let (base, variance) = match s.strip_suffix("_fixed") {
            Some(b) => (b, VarianceMode::Fixed),
            None => (s, VarianceMode::PerExample),
        };
        let kind = match base {
            "lira_online" | "online" => AttackKind::LiraOnline,
            "lira_offline" | "offline" => AttackKind::LiraOffline,
            "threshold" if variance == VarianceMode::PerExample => AttackKind::Threshold,
            _ => return Err(Error::InvalidArgument(format!("unknown attack {s:?}"))),
        };
        Ok(AttackSpec { kind, variance })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackEntry {
    pub sample_id: u64,
    pub group_id: u32,
    /// Higher means more likely a member.
    pub score: f64,
    pub is_member: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult {
    pub target_id: u32,
    pub attack: AttackSpec,
    pub entries: Vec<AttackEntry>,
    /// Sample ids dropped for lack of IN or OUT shadow scores.
    pub excluded: Vec<u64>,
}

fn assemble(
    scores: &ScoreSet,
    target: usize,
    attack: AttackSpec,
    mut score_of: impl FnMut(usize, f64) -> Option<f64>,
) -> AttackResult {
    let mut entries = Vec::with_capacity(scores.n_samples());
    let mut excluded = Vec::new();
    for (i, phi) in model_phi(scores, target).into_iter().enumerate() {
        match score_of(i, phi) {
            Some(score) => entries.push(AttackEntry {
                sample_id: scores.sample_ids[i],
                group_id: scores.groups[i],
                score,
                is_member: scores.is_member(target, i),
            }),
            None => excluded.push(scores.sample_ids[i]),
        }
    }
    AttackResult {
        target_id: scores.models[target].model_id,
        attack,
        entries,
        excluded,
    }
}

pub fn lira_online(stats: &GaussianStats, scores: &ScoreSet, target: usize) -> AttackResult {
    let attack = AttackSpec {
        kind: AttackKind::LiraOnline,
        variance: stats.variance_mode,
    };
    assemble(scores, target, attack, |i, phi| {
        stats.samples[i].as_ref().map(|g| lira_online_score(g, phi))
    })
}

pub fn lira_offline(stats: &GaussianStats, scores: &ScoreSet, target: usize) -> AttackResult {
    let attack = AttackSpec {
        kind: AttackKind::LiraOffline,
        variance: stats.variance_mode,
    };
    assemble(scores, target, attack, |i, phi| {
        stats.samples[i]
            .as_ref()
            .map(|g| lira_offline_score(g, phi))
    })
}

/// Global-threshold baseline: the target's own logit confidence.
pub fn threshold_attack(scores: &ScoreSet, target: usize) -> AttackResult {
    assemble(scores, target, AttackSpec::THRESHOLD, |_, phi| Some(phi))
}

/// Attacks `target` using every other shadow model in the set.
pub fn run_attack(scores: &ScoreSet, target: usize, attack: AttackSpec) -> AttackResult {
    match attack.kind {
        AttackKind::Threshold => threshold_attack(scores, target),
        AttackKind::LiraOnline => {
            let stats = fit_gaussians(scores, &scores.shadows_for(target), attack.variance);
            lira_online(&stats, scores, target)
        }
        AttackKind::LiraOffline => {
            let stats = fit_gaussians(scores, &scores.shadows_for(target), attack.variance);
            lira_offline(&stats, scores, target)
        }
    }
}

pub const ATTACK_HEADER: &str = "target_id,sample_id,group_id,attack,score,is_member";

pub fn results_to_csv(results: &[AttackResult]) -> String {
    let mut out = String::from(ATTACK_HEADER);
    out.push('\n');
    for r in results {
        for e in &r.entries {
            out.push_str(&format!(
                "{},{},{},{},{:?},{}\n",
                r.target_id,
                e.sample_id,
                e.group_id,
                r.attack,
                e.score,
                u8::from(e.is_member)
            ));
        }
    }
    out
}

pub fn write_results(results: &[AttackResult], path: &Path) -> Result<()> {
    fsutil::write_atomic_str(path, &results_to_csv(results))
}

/// Reads an attack result file; one result per distinct `(target_id, attack)`, in file order.
pub fn read_results(path: &Path) -> Result<Vec<AttackResult>> {
    let text = fsutil::read_to_string(path)?;
    let perr = |line: u64, message: String| Error::Parse {
        path: path.into(),
        line,
        message,
    };
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == ATTACK_HEADER => {}
        _ => return Err(perr(1, format!("expected header {ATTACK_HEADER}"))),
    }
    let mut out: Vec<AttackResult> = Vec::new();
    for (i, line) in lines.enumerate() {
        let lineno = i as u64 + 2;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(perr(
                lineno,
                format!("expected 6 fields, found {}", f.len()),
            ));
        }
        let target_id: u32 = f[0]
            .parse()
            .map_err(|_| perr(lineno, "bad target_id".into()))?;
        let sample_id: u64 = f[1]
            .parse()
            .map_err(|_| perr(lineno, "bad sample_id".into()))?;
        let group_id: u32 = f[2]
            .parse()
            .map_err(|_| perr(lineno, "bad group_id".into()))?;
        let attack: AttackSpec = f[3]
            .parse()
            .map_err(|e: Error| perr(lineno, e.to_string()))?;
        let score: f64 = f[4].parse().map_err(|_| perr(lineno, "bad score".into()))?;
        if !score.is_finite() {
            return Err(perr(lineno, "non-finite score".into()));
        }
        let is_member = match f[5].trim() {
            "1" => true,
            "0" => false,
            _ => return Err(perr(lineno, "bad is_member".into())),
        };
        let entry = AttackEntry {
            sample_id,
            group_id,
            score,
            is_member,
        };
        match out
            .iter_mut()
            .find(|r| r.target_id == target_id && r.attack == attack)
        {
            Some(r) => r.entries.push(entry),
            None => out.push(AttackResult {
                target_id,
                attack,
                entries: vec![entry],
                excluded: Vec::new(),
            }),
        }
    }
    Ok(out)
}
