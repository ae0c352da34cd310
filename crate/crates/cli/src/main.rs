//! `spaudit`: group-aware membership-inference audits on synthetic spurious-correlation data.
//!
//! Exit codes: 0 success, 1 usage or I/O error, 2 data validation error, 3 numeric failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use spaudit_core::analysis::{self, EmbeddingMatrix, NamedConfig};
use spaudit_core::attack::{self, AttackResult, AttackSpec};
use spaudit_core::config::{ExperimentName, ExperimentSpec, RunConfig};
use spaudit_core::domain::{Dataset, DatasetManifest};
use spaudit_core::error::ErrorKind;
use spaudit_core::experiments;
use spaudit_core::fsutil;
use spaudit_core::metrics;
use spaudit_core::plot;
use spaudit_core::shadows::{self, Role, ScoreSet};
use spaudit_core::synthdata;
use spaudit_core::trainer::{self, Arch, Method, Model, ModelConfig};
use spaudit_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(
    name = "spaudit",
    version,
    about = "Per-group membership-inference audits"
)]
struct Cli {
    /// Root seed; overrides the config file (for `synth`, also the data seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for model training (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// TOML config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic train/test dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train shadow (and target) models and write their score file.
    Shadows(ShadowArgs),
    /// Run a membership-inference attack over a score file.
    Attack {
        #[arg(long)]
        scores: PathBuf,
        /// Model ids to attack (default: every target-role model, or leave-one-out if none).
        #[arg(long = "target", value_delimiter = ',')]
        targets: Vec<u32>,
        /// lira_online, lira_offline, threshold; `_fixed` suffix for pooled variance.
        #[arg(long)]
        mode: Option<AttackSpec>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate attack results into per-group reports and ROC plots.
    Report {
        #[arg(long = "results", required = true, num_args = 1..)]
        results: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        fprs: Vec<f64>,
        /// Report each group separately (spurious flags come from --manifest).
        #[arg(long)]
        per_group: bool,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Privacy score and label memorization per sample and per group.
    Mem {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Linear CKA between two embeddings, or between two models on a dataset.
    Cka(CkaArgs),
    /// Number of principal components reaching an explained-variance threshold.
    Complexity {
        #[arg(long)]
        emb: PathBuf,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Shadow-by-target configuration matrix from a directory of model configs.
    Matrix {
        #[arg(long)]
        config_dir: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a scripted study: disparity, complexity, robust, memorization, cka_profile, matrix.
    Exp {
        name: ExperimentName,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
struct ShadowArgs {
    /// Directory written by `synth`.
    #[arg(long)]
    data: PathBuf,
    /// Number of shadow models.
    #[arg(long)]
    n: Option<usize>,
    /// Number of separately trained target models (0 for leave-one-out audits).
    #[arg(long)]
    targets: Option<usize>,
    /// Training method of the target models; shadows always use ERM unless --shadow-method is given.
    #[arg(long)]
    method: Option<Method>,
    #[arg(long)]
    shadow_method: Option<Method>,
    /// `linear` or comma-separated hidden widths such as `32` or `64,64`.
    #[arg(long)]
    arch: Option<String>,
    /// Also write every model as `<models>/<role>_<k>.spml`.
    #[arg(long)]
    models: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct CkaArgs {
    #[arg(long)]
    emb_a: Option<PathBuf>,
    #[arg(long)]
    emb_b: Option<PathBuf>,
    #[arg(long)]
    model_a: Option<PathBuf>,
    #[arg(long)]
    model_b: Option<PathBuf>,
    /// Dataset directory; per-group values are reported when models are given.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: cannot set thread count: {e}");
            return ExitCode::from(1);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Usage => 1,
                ErrorKind::Data => 2,
                ErrorKind::Numeric => 3,
            })
        }
    }
}

fn run_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth { out } => cmd_synth(cli, out),
        Command::Shadows(args) => cmd_shadows(cli, args),
        Command::Attack {
            scores,
            targets,
            mode,
            out,
        } => cmd_attack(cli, scores, targets, *mode, out),
        Command::Report {
            results,
            fprs,
            per_group,
            manifest,
            out,
        } => cmd_report(cli, results, fprs, *per_group, manifest.as_deref(), out),
        Command::Mem {
            scores,
            manifest,
            out,
        } => cmd_mem(cli, scores, manifest.as_deref(), out),
        Command::Cka(args) => cmd_cka(args),
        Command::Complexity { emb, tau, out } => cmd_complexity(cli, emb, *tau, out),
        Command::Matrix {
            config_dir,
            data,
            out,
        } => cmd_matrix(cli, config_dir, data.as_deref(), out),
        Command::Exp { name, out } => cmd_exp(cli, *name, out),
    }
}

const TRAIN_STEM: &str = "train";
const TEST_STEM: &str = "test";

fn cmd_synth(cli: &Cli, out: &Path) -> Result<()> {
    let mut cfg = run_config(cli)?;
    if let Some(s) = cli.seed {
        cfg.data.seed = s;
    }
    let split = synthdata::generate_spurious_dataset(&cfg.data)?;
    split.train.write(out, TRAIN_STEM)?;
    split.test.write(out, TEST_STEM)?;
    info!(
        "wrote {} train and {} test samples to {}",
        split.train.len(),
        split.test.len(),
        out.display()
    );
    Ok(())
}

fn parse_arch(spec: &str) -> Result<ModelConfig> {
    if spec == "linear" {
        return Ok(ModelConfig::linear());
    }
    let widths = spec
        .split(',')
        .map(|w| w.trim().parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| Error::InvalidArgument(format!("bad --arch {spec:?}")))?;
    let cfg = ModelConfig::mlp(&widths);
    cfg.validate()?;
    Ok(cfg)
}

fn with_method(cfg: &RunConfig, method: Method) -> trainer::TrainConfig {
    let base = trainer::TrainConfig {
        method: Method::Erm,
        dro: None,
        dfr: None,
        ..cfg.train.clone()
    };
    match method {
        Method::Erm => base,
        Method::Dro => {
            let d = cfg.train.dro.clone().unwrap_or_else(|| {
                spaudit_core::config::default_dro()
                    .dro
                    .expect("default block present")
            });
            base.with_dro(d.eta, d.adjust_c)
        }
        Method::Dfr => {
            let d = cfg.train.dfr.clone().unwrap_or_else(|| {
                spaudit_core::config::default_dfr()
                    .dfr
                    .expect("default block present")
            });
            base.with_dfr(d.reg, d.lambda, d.subsets)
        }
    }
}

fn cmd_shadows(cli: &Cli, args: &ShadowArgs) -> Result<()> {
    let mut cfg = run_config(cli)?;
    if let Some(a) = &args.arch {
        cfg.model = parse_arch(a)?;
    }
    if let Some(n) = args.n {
        cfg.audit.n_shadows = n;
    }
    if let Some(t) = args.targets {
        cfg.audit.n_targets = t;
    }
    cfg.audit.validate()?;
    let data = Dataset::read(&args.data, TRAIN_STEM)?;
    let shadow_method = args.shadow_method.unwrap_or(Method::Erm);
    let target_method = args.method.unwrap_or(cfg.train.method);
    let label = cfg.model.label();
    let shadow_cfg = NamedConfig {
        label: label.clone(),
        model: cfg.model.clone(),
        train: with_method(&cfg, shadow_method),
    };
    let target_cfg = NamedConfig {
        label,
        model: cfg.model.clone(),
        train: with_method(&cfg, target_method),
    };
    let setup = cfg.audit.setup(cfg.seed);
    let (shadow_plan, target_plan) = if setup.n_targets == 0 {
        let plan = shadows::plan_splits(
            &data,
            setup.n_shadows,
            setup.frac,
            setup.stratified,
            setup.seed,
        )?;
        let empty = plan.select_rows(0..0);
        (plan, empty)
    } else {
        analysis::audit_plan(&data, &setup)?
    };
    let (shadow_models, mut set) =
        analysis::train_side(&shadow_plan, &data, &shadow_cfg, Role::Shadow, cfg.seed)?;
    let mut all: Vec<(Role, usize, Model)> = shadow_models
        .into_iter()
        .enumerate()
        .map(|(k, m)| (Role::Shadow, k, m))
        .collect();
    if target_plan.n_models > 0 {
        let (target_models, target_set) =
            analysis::train_side(&target_plan, &data, &target_cfg, Role::Target, cfg.seed)?;
        set = set.concat(&target_set)?;
        all.extend(
            target_models
                .into_iter()
                .enumerate()
                .map(|(k, m)| (Role::Target, k, m)),
        );
    }
    shadows::write_scores(&set, &args.out)?;
    if let Some(dir) = &args.models {
        for (role, k, m) in &all {
            m.write(&dir.join(format!("{role}_{k}.spml")))?;
        }
    }
    info!(
        "wrote {} models x {} samples",
        set.n_models(),
        set.n_samples()
    );
    Ok(())
}

fn cmd_attack(
    cli: &Cli,
    scores: &Path,
    targets: &[u32],
    mode: Option<AttackSpec>,
    out: &Path,
) -> Result<()> {
    let cfg = run_config(cli)?;
    let attack = mode.unwrap_or(cfg.attack);
    let set = shadows::read_scores(scores)?;
    let indices: Vec<usize> = if targets.is_empty() {
        let t = set.indices_with_role(Role::Target);
        if t.is_empty() {
            (0..set.n_models()).collect()
        } else {
            t
        }
    } else {
        targets
            .iter()
            .map(|id| {
                set.model_index(*id)
                    .ok_or_else(|| Error::InvalidArgument(format!("no model with id {id}")))
            })
            .collect::<Result<_>>()?
    };
    for &t in &indices {
        if set.shadows_for(t).len() < 2 && attack.kind != attack::AttackKind::Threshold {
            return Err(Error::InvalidArgument(format!(
                "target {} has fewer than two shadow models",
                set.models[t].model_id
            )));
        }
    }
    let results: Vec<AttackResult> = indices
        .iter()
        .map(|&t| attack::run_attack(&set, t, attack))
        .collect();
    attack::write_results(&results, out)
}

fn read_manifest(path: Option<&Path>) -> Result<BTreeMap<u32, bool>> {
    Ok(match path {
        Some(p) => DatasetManifest::read(p)?.spurious_flags(),
        None => BTreeMap::new(),
    })
}

fn cmd_report(
    cli: &Cli,
    files: &[PathBuf],
    fprs: &[f64],
    per_group: bool,
    manifest: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let cfg = run_config(cli)?;
    let fprs = if fprs.is_empty() {
        cfg.fprs.clone()
    } else {
        fprs.to_vec()
    };
    let flags = read_manifest(manifest)?;
    let mut by_attack: BTreeMap<AttackSpec, Vec<AttackResult>> = BTreeMap::new();
    for f in files {
        for r in attack::read_results(f)? {
            by_attack.entry(r.attack).or_default().push(r);
        }
    }
    let mut reports = Vec::new();
    for (spec, results) in &by_attack {
        let per_target = results
            .iter()
            .map(|r| {
                if per_group {
                    metrics::per_group_report(r, &flags, &fprs)
                } else {
                    let mut rep = metrics::per_group_report(r, &BTreeMap::new(), &fprs)?;
                    rep.cells.retain(|c| c.key == metrics::CellKey::Total);
                    Ok(rep)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        reports.push(metrics::aggregate_targets(&per_target)?);
        let svg = if per_group {
            plot::group_roc_svg(
                &format!("{spec}: target {} per group", results[0].target_id),
                &results[0],
                &flags,
            )?
        } else {
            plot::target_roc_svg(&format!("{spec}: per target"), results)?
        };
        fsutil::write_atomic_str(&out.join(format!("roc_{spec}.svg")), &svg)?;
    }
    metrics::write_report(&reports, &out.join("report.json"), &out.join("report.csv"))
}

fn cmd_mem(cli: &Cli, scores: &Path, manifest: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = run_config(cli)?;
    let set: ScoreSet = shadows::read_scores(scores)?;
    let flags = read_manifest(manifest)?;
    let models = set.indices_with_role(Role::Shadow);
    let report = analysis::memorization_report(&set, &models, &flags, cfg.attack.variance)?;
    fsutil::write_atomic_str(&out.join("memorization.csv"), &report.samples_csv())?;
    fsutil::write_atomic_str(&out.join("density.csv"), &report.density_csv())?;
    let mut groups = String::from("group_id,is_spurious,n,mean_d,mean_mem\n");
    for g in &report.groups {
        groups.push_str(&format!(
            "{},{},{},{:?},{:?}\n",
            g.group_id,
            g.is_spurious
                .map_or_else(String::new, |b| u8::from(b).to_string()),
            g.n,
            g.mean_d,
            g.mean_mem
        ));
    }
    fsutil::write_atomic_str(&out.join("groups.csv"), &groups)
}

fn cmd_cka(args: &CkaArgs) -> Result<()> {
    let mut csv = String::from("group,cka\n");
    match (&args.emb_a, &args.emb_b, &args.model_a, &args.model_b) {
        (Some(a), Some(b), None, None) => {
            let v = analysis::linear_cka(&EmbeddingMatrix::read(a)?, &EmbeddingMatrix::read(b)?)?;
            csv.push_str(&format!("total,{v:?}\n"));
        }
        (None, None, Some(a), Some(b)) => {
            let dir = args
                .data
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("--data is required with models".into()))?;
            let data = Dataset::read(dir, TRAIN_STEM)?;
            let p = analysis::group_cka_profile(&Model::read(a)?, &Model::read(b)?, &data.samples)?;
            for (g, v) in &p.groups {
                csv.push_str(&format!("g{g},{v:?}\n"));
            }
            csv.push_str(&format!("total,{:?}\n", p.total));
        }
        _ => {
            return Err(Error::InvalidArgument(
                "give either --emb-a and --emb-b, or --model-a, --model-b and --data".into(),
            ))
        }
    }
    fsutil::write_atomic_str(&args.out, &csv)
}

fn cmd_complexity(cli: &Cli, emb: &Path, tau: Option<f64>, out: &Path) -> Result<()> {
    let cfg = run_config(cli)?;
    let tau = tau.unwrap_or(cfg.tau);
    let c = analysis::feature_complexity(&EmbeddingMatrix::read(emb)?, tau)?;
    let mut csv = format!("# tau={tau:?} k={}\ncomponent,eigenvalue,evr\n", c.k);
    for (i, (l, e)) in c.spectrum.iter().zip(&c.evr).enumerate() {
        csv.push_str(&format!("{},{l:?},{e:?}\n", i + 1));
    }
    println!("{}", c.k);
    fsutil::write_atomic_str(out, &csv)
}

fn cmd_matrix(cli: &Cli, config_dir: &Path, data_dir: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = run_config(cli)?;
    let mut files: Vec<PathBuf> = std::fs::read_dir(config_dir)
        .map_err(|e| Error::Io {
            path: config_dir.into(),
            source: e,
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "toml"))
        .collect();
    files.sort();
    let configs = files
        .iter()
        .map(|p| {
            let text = fsutil::read_to_string(p)?;
            let c: NamedConfig = toml::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            c.model.validate()?;
            c.train.validate()?;
            Ok(c)
        })
        .collect::<Result<Vec<_>>>()?;
    if configs.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no .toml configs in {}",
            config_dir.display()
        )));
    }
    let data = match data_dir {
        Some(d) => Dataset::read(d, TRAIN_STEM)?,
        None => synthdata::generate_spurious_dataset(&cfg.data)?.train,
    };
    let fpr = cfg.fprs[0];
    let m = analysis::cross_config_attack_matrix(
        &configs,
        &configs,
        &data,
        &cfg.audit.setup(cfg.seed),
        cfg.attack,
        fpr,
    )?;
    fsutil::write_atomic_str(out, &m.to_csv())?;
    for (t, best) in m.best_shadow_per_target().iter().enumerate() {
        let arch = |c: &NamedConfig| matches!(c.model.arch, Arch::Linear);
        info!(
            "target {} (linear={}): best shadow {}",
            m.target_labels[t],
            arch(&configs[t]),
            m.shadow_labels[*best]
        );
    }
    Ok(())
}

fn cmd_exp(cli: &Cli, name: ExperimentName, out: &Path) -> Result<()> {
    let mut spec = match &cli.config {
        Some(p) => ExperimentSpec::load(p)?,
        None => ExperimentSpec::default(),
    };
    if let Some(s) = cli.seed {
        spec.seed = s;
    }
    let summary = experiments::run_experiment(name, &spec, out)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&summary).expect("summary is valid JSON")
    );
    Ok(())
}
