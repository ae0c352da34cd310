//! Shadow-model bookkeeping: membership plans, model fan-out, score files.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::domain::{Dataset, RngStream, SampleRecord};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::trainer::{self, ModelConfig, TrainConfig, PROB_EPS};

/// Membership bitmaps: `membership[k][i]` is set when sample `i` is in model `k`'s training half.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitPlan {
    pub n_models: usize,
    pub n_samples: usize,
    pub membership: Vec<Vec<bool>>,
    pub stratified: bool,
    pub frac: f64,
    pub seed: u64,
}

impl SplitPlan {
    pub fn in_count(&self, model: usize) -> usize {
        self.membership[model].iter().filter(|b| **b).count()
    }

    /// Samples that are never IN or never OUT across the plan's models.
    pub fn coverage_violations(&self) -> Vec<usize> {
        (0..self.n_samples)
            .filter(|&i| {
                let ins = self.membership.iter().filter(|m| m[i]).count();
                ins == 0 || ins == self.n_models
            })
            .collect()
    }

    /// Sub-plan made of the given model rows, in order.
    pub fn select_rows(&self, rows: std::ops::Range<usize>) -> SplitPlan {
        SplitPlan {
            n_models: rows.len(),
            membership: self.membership[rows].to_vec(),
            ..self.clone()
        }
    }

    /// Reorders sample columns: new column `j` is old column `perm[j]`.
    pub fn permuted(&self, perm: &[usize]) -> SplitPlan {
        SplitPlan {
            membership: self
                .membership
                .iter()
                .map(|row| perm.iter().map(|&j| row[j]).collect())
                .collect(),
            ..self.clone()
        }
    }
}

/// Draws the total IN count: `floor(frac * n)` or one more, with exact expectation.
fn draw_total(frac: f64, n: usize, rng: &mut impl Rng) -> usize {
    let x = frac * n as f64;
    let lo = x.floor();
    let extra = if rng.random::<f64>() < x - lo { 1 } else { 0 };
    (lo as usize + extra).min(n)
}

/// Per-group IN quotas summing to `total`, each within one of both
/// `frac * n_g` and `n_g * total / n`.
fn stratified_quotas(sizes: &[usize], frac: f64, total: usize, rng: &mut impl Rng) -> Vec<usize> {
    let n: usize = sizes.iter().sum();
    let mut lo = Vec::with_capacity(sizes.len());
    let mut hi = Vec::with_capacity(sizes.len());
    for &ng in sizes {
        let x = frac * ng as f64;
        let y = ng as f64 * total as f64 / n as f64;
        let l = x.floor().max(y.floor()) as usize;
        let h = (x.ceil().min(y.ceil()) as usize).min(ng);
        lo.push(l.min(h));
        hi.push(h);
    }
    let mut quotas = lo.clone();
    let assigned: usize = lo.iter().sum();
    let mut eligible: Vec<usize> = (0..sizes.len()).filter(|&g| hi[g] > lo[g]).collect();
    eligible.shuffle(rng);
    let remaining = total.saturating_sub(assigned).min(eligible.len());
    for &g in &eligible[..remaining] {
        quotas[g] += 1;
    }
    quotas
}

/// Builds `n_models` independent membership draws over the dataset's samples.
///
/// Stratified plans draw IN samples per group so each model's IN half keeps
/// the dataset's group proportions.
pub fn plan_splits(
    data: &Dataset,
    n_models: usize,
    frac: f64,
    stratified: bool,
    seed: u64,
) -> Result<SplitPlan> {
    if n_models < 2 {
        return Err(Error::InvalidArgument(format!("n_models = {n_models} < 2")));
    }
    if !(frac > 0.0 && frac < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "frac = {frac} outside (0, 1)"
        )));
    }
    let n = data.samples.len();
    let mut by_group: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, s) in data.samples.iter().enumerate() {
        by_group.entry(s.group).or_default().push(i);
    }
    for g in &data.manifest.groups {
        if g.count == 0 {
            log::warn!("group {} is empty; skipped in split plan", g.group_id);
        }
    }
    let root = RngStream::new(seed, "split");
    let mut membership = Vec::with_capacity(n_models);
    for k in 0..n_models {
        let mut rng = root.indexed("model", k as u64).rng();
        let total = draw_total(frac, n, &mut rng);
        let mut row = vec![false; n];
        if stratified {
            let groups: Vec<&Vec<usize>> = by_group.values().collect();
            let sizes: Vec<usize> = groups.iter().map(|g| g.len()).collect();
            let quotas = stratified_quotas(&sizes, frac, total, &mut rng);
            for (members, &q) in groups.iter().zip(&quotas) {
                let mut pool = (*members).clone();
                let (chosen, _) = pool.partial_shuffle(&mut rng, q);
                for &i in chosen.iter() {
                    row[i] = true;
                }
            }
        } else {
            let mut pool: Vec<usize> = (0..n).collect();
            let (chosen, _) = pool.partial_shuffle(&mut rng, total);
            for &i in chosen.iter() {
                row[i] = true;
            }
        }
        membership.push(row);
    }
    let plan = SplitPlan {
        n_models,
        n_samples: n,
        membership,
        stratified,
        frac,
        seed,
    };
    if n_models >= 4 {
        let bad = plan.coverage_violations();
        if !bad.is_empty() {
            log::warn!(
                "{} samples are never IN or never OUT across {n_models} models",
                bad.len()
            );
        }
    }
    Ok(plan)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Role {
    Shadow,
    Target,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Shadow => "shadow",
            Role::Target => "target",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelInfo {
    pub model_id: u32,
    pub role: Role,
    /// Training method tag (e.g. `erm`); free text for externally supplied scores.
    pub method: String,
}

/// True-class confidences of every model on every sample.
///
/// Matrices are row-major `n_models x n_samples`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    pub models: Vec<ModelInfo>,
    pub sample_ids: Vec<u64>,
    pub groups: Vec<u32>,
    pub classes: Vec<u32>,
    pub confidence: Vec<f64>,
    pub correct: Vec<bool>,
    pub membership: Vec<bool>,
}

impl ScoreSet {
    pub fn n_models(&self) -> usize {
        self.models.len()
    }

    pub fn n_samples(&self) -> usize {
        self.sample_ids.len()
    }

    fn at(&self, model: usize, sample: usize) -> usize {
        model * self.n_samples() + sample
    }

    pub fn confidence(&self, model: usize, sample: usize) -> f64 {
        self.confidence[self.at(model, sample)]
    }

    pub fn is_member(&self, model: usize, sample: usize) -> bool {
        self.membership[self.at(model, sample)]
    }

    pub fn is_correct(&self, model: usize, sample: usize) -> bool {
        self.correct[self.at(model, sample)]
    }

    pub fn model_row(&self, model: usize) -> &[f64] {
        let n = self.n_samples();
        &self.confidence[model * n..(model + 1) * n]
    }

    pub fn membership_row(&self, model: usize) -> &[bool] {
        let n = self.n_samples();
        &self.membership[model * n..(model + 1) * n]
    }

    pub fn indices_with_role(&self, role: Role) -> Vec<usize> {
        (0..self.n_models())
            .filter(|&k| self.models[k].role == role)
            .collect()
    }

    /// Shadow models usable against `target`: every shadow except the target itself.
    pub fn shadows_for(&self, target: usize) -> Vec<usize> {
        (0..self.n_models())
            .filter(|&k| k != target && self.models[k].role == Role::Shadow)
            .collect()
    }

    pub fn model_index(&self, model_id: u32) -> Option<usize> {
        self.models.iter().position(|m| m.model_id == model_id)
    }

    /// Appends `other`'s models; sample metadata must match exactly.
    pub fn concat(mut self, other: &ScoreSet) -> Result<ScoreSet> {
        if self.sample_ids != other.sample_ids
            || self.groups != other.groups
            || self.classes != other.classes
        {
            return Err(Error::Validation(
                "score sets cover different samples".into(),
            ));
        }
        let next = self
            .models
            .iter()
            .map(|m| m.model_id + 1)
            .max()
            .unwrap_or(0);
        for (i, m) in other.models.iter().enumerate() {
            self.models.push(ModelInfo {
                model_id: next + i as u32,
                ..m.clone()
            });
        }
        self.confidence.extend_from_slice(&other.confidence);
        self.correct.extend_from_slice(&other.correct);
        self.membership.extend_from_slice(&other.membership);
        Ok(self)
    }

    /// Keeps only the listed models, in the given order.
    pub fn select_models(&self, models: &[usize]) -> ScoreSet {
        let n = self.n_samples();
        let mut out = ScoreSet {
            models: Vec::with_capacity(models.len()),
            sample_ids: self.sample_ids.clone(),
            groups: self.groups.clone(),
            classes: self.classes.clone(),
            confidence: Vec::with_capacity(models.len() * n),
            correct: Vec::with_capacity(models.len() * n),
            membership: Vec::with_capacity(models.len() * n),
        };
        for &k in models {
            out.models.push(self.models[k].clone());
            out.confidence
                .extend_from_slice(&self.confidence[k * n..(k + 1) * n]);
            out.correct
                .extend_from_slice(&self.correct[k * n..(k + 1) * n]);
            out.membership
                .extend_from_slice(&self.membership[k * n..(k + 1) * n]);
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_samples();
        let cells = self.n_models() * n;
        if self.groups.len() != n
            || self.classes.len() != n
            || self.confidence.len() != cells
            || self.correct.len() != cells
            || self.membership.len() != cells
        {
            return Err(Error::Validation("score set shapes disagree".into()));
        }
        if let Some(p) = self.confidence.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
            return Err(Error::Validation(format!(
                "confidence {p} outside the open unit interval"
            )));
        }
        Ok(())
    }
}

/// Per-model options for [`run_shadows`].
#[derive(Debug, Clone)]
pub struct RunOptions {
    pub role: Role,
    /// Root seed for weight init and batch order; model `k` uses sub-stream `k`.
    pub seed: u64,
}

pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Scores every sample under `model`: clamped true-class probability and correctness.
pub fn score_model(model: &trainer::Model, samples: &[SampleRecord]) -> (Vec<f64>, Vec<bool>) {
    samples
        .iter()
        .map(|s| {
            let p = model.predict_proba(&s.features);
            let correct = trainer::argmax(&p) == s.label;
            (clamp_prob(p[s.label as usize]), correct)
        })
        .unzip()
}

/// Stream used for model `k` of a run; depends only on `(seed, role, k)`.
pub fn model_stream(seed: u64, role: Role, k: usize) -> RngStream {
    RngStream::new(seed, "models").indexed(role.as_str(), k as u64)
}

/// Trains model `k` on its IN half (sorted by sample id) and returns it.
pub fn train_member_model(
    plan: &SplitPlan,
    k: usize,
    data: &Dataset,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    stream: &RngStream,
) -> Result<trainer::Model> {
    let mut members: Vec<SampleRecord> = data
        .samples
        .iter()
        .zip(&plan.membership[k])
        .filter(|(_, m)| **m)
        .map(|(s, _)| s.clone())
        .collect();
    members.sort_by_key(|s| s.sample_id);
    let groups: Vec<u32> = data
        .manifest
        .groups
        .iter()
        .filter(|g| g.count > 0)
        .map(|g| g.group_id)
        .collect();
    let trained = trainer::train(
        model_cfg,
        &members,
        data.manifest.n_classes,
        &groups,
        train_cfg,
        stream,
    )
    .map_err(|e| match e {
        Error::Numeric(m) => Error::Numeric(format!("model {k}: {m}")),
        other => other,
    })?;
    Ok(trained.model)
}

/// Trains one model per plan row and queries each on every sample.
///
/// Any failed model fails the whole run.
pub fn run_shadows(
    plan: &SplitPlan,
    data: &Dataset,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    opts: &RunOptions,
) -> Result<ScoreSet> {
    let models = train_plan_models(plan, data, model_cfg, train_cfg, opts)?;
    Ok(score_models(
        &models,
        plan,
        data,
        opts.role,
        train_cfg.method.as_str(),
    ))
}

pub fn train_plan_models(
    plan: &SplitPlan,
    data: &Dataset,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    opts: &RunOptions,
) -> Result<Vec<trainer::Model>> {
    if plan.n_samples != data.samples.len() {
        return Err(Error::Validation(format!(
            "plan covers {} samples, dataset has {}",
            plan.n_samples,
            data.samples.len()
        )));
    }
    (0..plan.n_models)
        .into_par_iter()
        .map(|k| {
            let stream = model_stream(opts.seed, opts.role, k);
            train_member_model(plan, k, data, model_cfg, train_cfg, &stream)
        })
        .collect()
}

pub fn score_models(
    models: &[trainer::Model],
    plan: &SplitPlan,
    data: &Dataset,
    role: Role,
    method: &str,
) -> ScoreSet {
    let rows: Vec<(Vec<f64>, Vec<bool>)> = models
        .par_iter()
        .map(|m| score_model(m, &data.samples))
        .collect();
    let n = data.samples.len();
    let mut set = ScoreSet {
        models: Vec::with_capacity(models.len()),
        sample_ids: data.samples.iter().map(|s| s.sample_id).collect(),
        groups: data.samples.iter().map(|s| s.group).collect(),
        classes: data.samples.iter().map(|s| s.label).collect(),
        confidence: Vec::with_capacity(models.len() * n),
        correct: Vec::with_capacity(models.len() * n),
        membership: Vec::with_capacity(models.len() * n),
    };
    for (k, (conf, corr)) in rows.into_iter().enumerate() {
        set.models.push(ModelInfo {
            model_id: k as u32,
            role,
            method: method.to_string(),
        });
        set.confidence.extend(conf);
        set.correct.extend(corr);
        set.membership.extend_from_slice(&plan.membership[k]);
    }
    set
}

pub const SCORE_HEADER: [&str; 9] = [
    "model_id",
    "sample_id",
    "role",
    "method",
    "is_member",
    "group_id",
    "class_id",
    "confidence",
    "correct",
];

pub fn scores_to_csv(set: &ScoreSet) -> String {
    let mut out = String::with_capacity(set.confidence.len() * 48);
    out.push_str(&SCORE_HEADER.join(","));
    out.push('\n');
    for (k, m) in set.models.iter().enumerate() {
        for i in 0..set.n_samples() {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{:?},{}\n",
                m.model_id,
                set.sample_ids[i],
                m.role,
                m.method,
                u8::from(set.is_member(k, i)),
                set.groups[i],
                set.classes[i],
                set.confidence(k, i),
                u8::from(set.is_correct(k, i)),
            ));
        }
    }
    out
}

pub fn write_scores(set: &ScoreSet, path: &Path) -> Result<()> {
    set.validate()?;
    fsutil::write_atomic_str(path, &scores_to_csv(set))
}

fn parse_bool(raw: &str) -> Option<bool> {
    match raw.trim() {
        "1" | "true" => Some(true),
        "0" | "false" => Some(false),
        _ => None,
    }
}

/// Parses a score file; rows may come in any order but must form a full model x sample grid.
pub fn read_scores(path: &Path) -> Result<ScoreSet> {
    let text = fsutil::read_to_string(path)?;
    parse_scores(&text, path)
}

pub fn parse_scores(text: &str, path: &Path) -> Result<ScoreSet> {
    let perr = |line: u64, message: String| Error::Parse {
        path: path.into(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| perr(1, e.to_string()))?
        .clone();
    let mut col = [0usize; 9];
    for (slot, name) in SCORE_HEADER.iter().enumerate() {
        col[slot] = headers
            .iter()
            .position(|h| h == *name)
            .ok_or_else(|| perr(1, format!("missing column {name}")))?;
    }

    struct Row {
        model: u32,
        sample: u64,
        member: bool,
        conf: f64,
        correct: bool,
    }
    let mut models: BTreeMap<u32, ModelInfo> = BTreeMap::new();
    let mut samples: Vec<u64> = Vec::new();
    let mut meta: BTreeMap<u64, (u32, u32)> = BTreeMap::new();
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| perr(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        let get = |slot: usize| rec.get(col[slot]).unwrap_or("").trim();
        let num = |slot: usize| -> Result<u64> {
            get(slot)
                .parse()
                .map_err(|_| perr(line, format!("bad {} {:?}", SCORE_HEADER[slot], get(slot))))
        };
        let model = num(0)? as u32;
        let sample = num(1)?;
        let role = match get(2) {
            "shadow" => Role::Shadow,
            "target" => Role::Target,
            other => return Err(perr(line, format!("bad role {other:?}"))),
        };
        let method = get(3).to_string();
        let member = parse_bool(get(4)).ok_or_else(|| perr(line, "bad is_member".into()))?;
        let group = num(5)? as u32;
        let class = num(6)? as u32;
        let conf: f64 = get(7)
            .parse()
            .map_err(|_| perr(line, format!("bad confidence {:?}", get(7))))?;
        if !(conf > 0.0 && conf < 1.0) {
            return Err(Error::Validation(format!(
                "{}: line {line}: confidence {conf} outside (0, 1)",
                path.display()
            )));
        }
        let correct = parse_bool(get(8)).ok_or_else(|| perr(line, "bad correct".into()))?;

        let info = models.entry(model).or_insert_with(|| ModelInfo {
            model_id: model,
            role,
            method: method.clone(),
        });
        if info.role != role || info.method != method {
            return Err(perr(line, format!("model {model} changes role or method")));
        }
        match meta.get(&sample) {
            Some(&(g, c)) if (g, c) != (group, class) => {
                return Err(perr(
                    line,
                    format!("sample {sample} changes group or class"),
                ))
            }
            Some(_) => {}
            None => {
                meta.insert(sample, (group, class));
                samples.push(sample);
            }
        }
        rows.push(Row {
            model,
            sample,
            member,
            conf,
            correct,
        });
    }

    let model_pos: BTreeMap<u32, usize> = models.keys().enumerate().map(|(i, &m)| (m, i)).collect();
    let sample_pos: BTreeMap<u64, usize> =
        samples.iter().enumerate().map(|(i, &s)| (s, i)).collect();
    let n = samples.len();
    let cells = models.len() * n;
    if rows.len() != cells {
        return Err(Error::Validation(format!(
            "{}: expected {} rows for {} models x {n} samples, found {}",
            path.display(),
            cells,
            models.len(),
            rows.len()
        )));
    }
    let mut confidence = vec![f64::NAN; cells];
    let mut correct = vec![false; cells];
    let mut membership = vec![false; cells];
    let mut seen = vec![false; cells];
    for r in rows {
        let idx = model_pos[&r.model] * n + sample_pos[&r.sample];
        if seen[idx] {
            return Err(Error::Validation(format!(
                "duplicate row for model {} sample {}",
                r.model, r.sample
            )));
        }
        seen[idx] = true;
        confidence[idx] = r.conf;
        correct[idx] = r.correct;
        membership[idx] = r.member;
    }
    let set = ScoreSet {
        models: models.into_values().collect(),
        groups: samples.iter().map(|s| meta[s].0).collect(),
        classes: samples.iter().map(|s| meta[s].1).collect(),
        sample_ids: samples,
        confidence,
        correct,
        membership,
    };
    set.validate()?;
    Ok(set)
}
