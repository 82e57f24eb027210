//! Batch experiment steps behind the CLI subcommands. Every artifact is a
//! pure function of the configuration and seed, so two runs with the same
//! arguments write identical bytes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use copilot_core::config::{ConfigError, ExperimentConfig};
use copilot_core::hil::{self, format_stage_table, HilAbort, HilError, HilLog, StageReport, TaskSetup};
use copilot_core::metrics::{self, CollectionTimeReport, MetricsError, ScalingReport};
use copilot_core::policy::{train_base, BcPolicy, PolicyError, PolicyManifest};
use copilot_core::recorder::{read_dataset, read_manifest, write_dataset, Dataset, Manifest, RecorderError};

pub const POLICY_FILE: &str = "policy.json";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TXT: &str = "report.txt";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Hil(#[from] HilError),
    #[error(transparent)]
    Aborted(#[from] HilAbort),
    #[error(transparent)]
    Recorder(#[from] RecorderError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("dataset {path} was recorded for {found}, configuration expects {expected}")]
    DatasetMismatch { path: PathBuf, found: String, expected: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut text = serde_json::to_string_pretty(value).expect("artifact serializes");
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, PipelineError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| PipelineError::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn write_text(path: &Path, text: &str) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, text).map_err(io_err(path))
}

fn check_header(setup: &TaskSetup, d: &Dataset, path: &Path) -> Result<(), PipelineError> {
    let want = setup.header();
    let id = |h: &copilot_core::recorder::DatasetHeader| {
        format!("{}->{} on {}", h.leader_chain, h.follower_chain, h.task_id)
    };
    if id(&want) != id(&d.header) || want.obs_dim != d.header.obs_dim {
        return Err(PipelineError::DatasetMismatch {
            path: path.to_path_buf(),
            found: id(&d.header),
            expected: id(&want),
        });
    }
    Ok(())
}

// ------------------------------------------------------------------ collect

pub struct Collected {
    pub dataset: Dataset,
    pub manifest: Manifest,
}

/// Scripted demonstrations written to `out` as a dataset directory.
pub fn collect(cfg: &ExperimentConfig, episodes: usize, out: &Path) -> Result<Collected, PipelineError> {
    let setup = cfg.setup()?;
    let dataset = hil::collect_demos(&setup, &cfg.expert, episodes, cfg.seed)?;
    let manifest = write_dataset(&dataset, out)?;
    Ok(Collected { dataset, manifest })
}

// -------------------------------------------------------------------- train

/// Path of `target` as seen from `base`; both are made absolute first.
fn relative_to(target: &Path, base: &Path) -> Result<String, PipelineError> {
    let abs = |p: &Path| -> Result<PathBuf, PipelineError> {
        if p.is_absolute() {
            Ok(p.to_path_buf())
        } else {
            let cwd = std::env::current_dir().map_err(io_err(p))?;
            Ok(cwd.join(p))
        }
    };
    let (t, b) = (abs(target)?, abs(base)?);
    let rel = pathdiff::diff_paths(&t, &b).unwrap_or(t);
    Ok(rel.to_string_lossy().replace('\\', "/"))
}

/// Writes `<out>/policy.json` referencing `dataset_dir` relative to `out`.
pub fn save_policy(
    policy: &BcPolicy,
    dataset_dir: &Path,
    dataset_manifest: &Manifest,
    out: &Path,
) -> Result<PolicyManifest, PipelineError> {
    let m = policy.manifest(&relative_to(dataset_dir, out)?, dataset_manifest);
    write_json(&out.join(POLICY_FILE), &m)?;
    Ok(m)
}

/// Loads a policy manifest and rebuilds the policy from its dataset. A
/// relative dataset path is resolved against the manifest's directory.
pub fn load_policy(path: &Path) -> Result<(BcPolicy, Dataset), PipelineError> {
    let m: PolicyManifest = read_json(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let dir = base.join(&m.dataset_path);
    let dataset = read_dataset(&dir)?;
    let manifest = read_manifest(&dir)?;
    let policy = BcPolicy::from_manifest(&m, &dataset, &manifest)?;
    Ok((policy, dataset))
}

pub fn train(cfg: &ExperimentConfig, dataset_dir: &Path, out: &Path) -> Result<(BcPolicy, PolicyManifest), PipelineError> {
    let setup = cfg.setup()?;
    let dataset = read_dataset(dataset_dir)?;
    check_header(&setup, &dataset, dataset_dir)?;
    let manifest = read_manifest(dataset_dir)?;
    let policy = train_base(&dataset, &cfg.bc, &setup.session.chains.follower)?;
    let pm = save_policy(&policy, dataset_dir, &manifest, out)?;
    Ok((policy, pm))
}

// ---------------------------------------------------------------------- hil

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub task: String,
    pub reports: Vec<StageReport>,
}

impl EvalSummary {
    pub fn table(&self) -> String {
        let refs: Vec<&StageReport> = self.reports.iter().collect();
        format_stage_table(&self.task, &refs)
    }
}

pub struct HilArtifacts {
    pub base: BcPolicy,
    pub policy: BcPolicy,
    pub dataset: Dataset,
    pub log: HilLog,
    pub summary: EvalSummary,
}

impl HilArtifacts {
    pub fn base_report(&self) -> &StageReport {
        &self.summary.reports[0]
    }

    pub fn final_report(&self) -> &StageReport {
        &self.summary.reports[1]
    }
}

/// Base demonstrations and policy, either loaded or produced in place.
pub enum HilStart<'a> {
    Fresh,
    From { dataset: &'a Path, policy: &'a Path },
}

/// Base data, clip-based fine-tuning and a base vs. fine-tuned evaluation.
///
/// Layout of `out`: `base/` (only for a fresh start), `dataset/` (base
/// demonstrations and every clip used), `policy.json`, `hil_log.json`,
/// `report.json` and `report.txt`.
pub fn hil(cfg: &ExperimentConfig, start: HilStart, out: &Path) -> Result<HilArtifacts, PipelineError> {
    let setup = cfg.setup()?;
    let (d0, pi0) = match start {
        HilStart::Fresh => {
            let base = out.join("base");
            let c = collect(cfg, cfg.demos, &base.join("dataset"))?;
            let pi0 = train_base(&c.dataset, &cfg.bc, &setup.session.chains.follower)?;
            save_policy(&pi0, &base.join("dataset"), &c.manifest, &base)?;
            (c.dataset, pi0)
        }
        HilStart::From { dataset, policy } => {
            let d0 = read_dataset(dataset)?;
            check_header(&setup, &d0, dataset)?;
            let (pi0, _) = load_policy(policy)?;
            (d0, pi0)
        }
    };
    let run = hil::run_hil(&d0, &pi0, &cfg.expert, &cfg.hil, &setup)?;
    let ds_dir = out.join("dataset");
    let manifest = write_dataset(&run.dataset, &ds_dir)?;
    save_policy(&run.policy, &ds_dir, &manifest, out)?;
    write_json(&out.join("hil_log.json"), &run.log)?;
    let seeds = cfg.hil.eval_seeds();
    let summary = EvalSummary {
        task: setup.task_id().to_string(),
        reports: vec![
            hil::evaluate(&setup, &pi0, &seeds, "base")?,
            hil::evaluate(&setup, &run.policy, &seeds, "hil")?,
        ],
    };
    write_json(&out.join(REPORT_JSON), &summary)?;
    write_text(&out.join(REPORT_TXT), &summary.table())?;
    Ok(HilArtifacts {
        base: pi0,
        policy: run.policy,
        dataset: run.dataset,
        log: run.log,
        summary,
    })
}

// --------------------------------------------------------------------- eval

pub fn eval(cfg: &ExperimentConfig, policy_path: &Path, rollouts: usize, out: &Path) -> Result<EvalSummary, PipelineError> {
    let setup = cfg.setup()?;
    let (policy, dataset) = load_policy(policy_path)?;
    check_header(&setup, &dataset, policy_path)?;
    let seeds = copilot_core::par::seeds(cfg.hil.eval_seed, copilot_core::par::stream::EVAL, rollouts);
    let label = policy_path
        .parent()
        .and_then(|p| p.file_name())
        .map_or_else(|| "policy".to_string(), |n| n.to_string_lossy().into_owned());
    let summary = EvalSummary {
        task: setup.task_id().to_string(),
        reports: vec![hil::evaluate(&setup, &policy, &seeds, &label)?],
    };
    write_json(&out.join(REPORT_JSON), &summary)?;
    write_text(&out.join(REPORT_TXT), &summary.table())?;
    Ok(summary)
}

// ------------------------------------------------------------------ metrics

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub scaling: ScalingReport,
    pub collection: CollectionTimeReport,
}

impl MetricsSummary {
    pub fn table(&self) -> String {
        format!("{}\n{}", self.scaling.table(), self.collection.table())
    }
}

/// Scaling precision trials and the clip vs. full-demonstration time
/// comparison. The comparison reads a `hil` output dataset when given one and
/// otherwise runs the HIL pipeline in memory.
pub fn metrics(cfg: &ExperimentConfig, dataset: Option<&Path>, out: &Path) -> Result<MetricsSummary, PipelineError> {
    let setup = cfg.setup()?;
    let scaling = metrics::scaling_experiment(&setup.session, &cfg.expert, &cfg.scaling)?;
    let d = match dataset {
        Some(p) => read_dataset(p)?,
        None => {
            let d0 = hil::collect_demos(&setup, &cfg.expert, cfg.demos, cfg.seed)?;
            let pi0 = train_base(&d0, &cfg.bc, &setup.session.chains.follower)?;
            hil::run_hil(&d0, &pi0, &cfg.expert, &cfg.hil, &setup)?.dataset
        }
    };
    let collection = metrics::collection_time_report(&d.episodes, &d.clips)?;
    let summary = MetricsSummary { scaling, collection };
    write_json(&out.join("metrics.json"), &summary)?;
    write_text(&out.join("metrics.txt"), &summary.table())?;
    Ok(summary)
}

// ------------------------------------------------------------------- checks

/// One acceptance threshold evaluated on pipeline output.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

pub fn hil_checks(a: &HilArtifacts) -> Vec<Check> {
    let (b, f) = (a.base_report(), a.final_report());
    vec![
        Check {
            name: "total success gain >= 10 points",
            passed: f.total >= b.total + 10.0,
            detail: format!("base {:.1}% -> hil {:.1}%", b.total, f.total),
        },
        Check {
            name: "stage-1 success non-decreasing",
            passed: f.stage1 >= b.stage1,
            detail: format!("base {:.1}% -> hil {:.1}%", b.stage1, f.stage1),
        },
    ]
}

pub fn metrics_checks(m: &MetricsSummary) -> Vec<Check> {
    let ratios = m.scaling.ratios();
    let fmt = ratios
        .iter()
        .map(|(n, r)| format!("{n}={r:.2}"))
        .collect::<Vec<_>>()
        .join(" ");
    vec![
        Check {
            name: "fine scale more precise in every aggregate",
            passed: ratios.iter().all(|(_, r)| *r > 1.0),
            detail: fmt.clone(),
        },
        Check {
            name: "coarse/fine ratio within [2, 8]",
            passed: ratios.iter().all(|(_, r)| (2.0..=8.0).contains(r)),
            detail: fmt,
        },
        Check {
            name: "clips take less time than full demonstrations",
            passed: m.collection.clips_faster(),
            detail: format!(
                "{} trajectories: {:.2} s demos vs {:.2} s clips",
                m.collection.matched, m.collection.base, m.collection.proposed
            ),
        },
    ]
}
