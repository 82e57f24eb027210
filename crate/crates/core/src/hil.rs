//! Clip-based human-in-the-loop fine-tuning and stage-wise evaluation.
//!
//! A deployment runs the policy on the follower while a supervisor watches
//! for failures and for drift off the expert's path. When it fires, the bus
//! switches to teleop and the scripted expert takes over through the leader;
//! the frames of the takeover form one clip. Every `K` clips the policy is
//! fine-tuned on the base demonstrations plus all clips so far and
//! redeployed.

use std::fmt::Write as _;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::copilot::{ControlMode, CopilotError, WorkspaceMap};
use crate::expert::{nominal_path, path_distance, ExpertConfig, ExpertDriver};
use crate::kinematics::JointVector;
use crate::par::{derive_seed, map_seeds, stream};
use crate::policy::{finetune, ActionChunk, BcPolicy, Policy, PolicyError};
use crate::recorder::{
    merge_dataset, Clip, ClipReason, ClipRecorder, Dataset, DatasetHeader, Episode, RecorderError, SCHEMA_VERSION,
};
use crate::session::{observation_dim, Session, SessionConfig, SessionError};
use crate::tasks::{self, object_placed, StageStatus, TaskDescriptor, WorldEvent, WorldState};
use crate::copilot::BusCommands;

#[derive(Debug, Error)]
pub enum HilError {
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error("invalid HIL configuration: {0}")]
    Config(String),
    #[error("only {got} of {wanted} demonstrations succeeded in {attempts} attempts")]
    DemoShortfall { wanted: usize, got: usize, attempts: usize },
}

impl From<PolicyError> for HilError {
    fn from(e: PolicyError) -> Self {
        HilError::Session(e.into())
    }
}

impl From<RecorderError> for HilError {
    fn from(e: RecorderError) -> Self {
        HilError::Session(e.into())
    }
}

impl From<CopilotError> for HilError {
    fn from(e: CopilotError) -> Self {
        HilError::Session(e.into())
    }
}

/// Everything needed to open a session on a task.
#[derive(Debug, Clone)]
pub struct TaskSetup {
    pub session: SessionConfig,
    pub desc: TaskDescriptor,
    pub wm: WorkspaceMap,
}

impl TaskSetup {
    /// Workspace map centred on the task's home position.
    pub fn new(session: SessionConfig, desc: TaskDescriptor, alpha: f64) -> Result<Self, SessionError> {
        desc.validate()?;
        let wm = session.workspace_map(alpha, Vector3::from(desc.home))?;
        Ok(Self { session, desc, wm })
    }

    pub fn open(&self, seed: u64, mode: ControlMode) -> Result<Session<'_>, SessionError> {
        let world = tasks::reset(&self.desc, seed)?;
        Session::new(&self.session, &self.desc, self.wm, world, mode)
    }

    pub fn task_id(&self) -> &'static str {
        self.desc.kind.id()
    }

    pub fn header(&self) -> DatasetHeader {
        let c = &self.session.chains;
        DatasetHeader {
            schema_version: SCHEMA_VERSION,
            leader_chain: c.leader.name.clone(),
            follower_chain: c.follower.name.clone(),
            task_id: self.task_id().to_string(),
            alpha: self.wm.alpha(),
            obs_dim: observation_dim(c.follower.dof(), &self.desc),
            follower_dof: c.follower.dof(),
            record_dt: self.session.record_dt(),
        }
    }
}

/// Executes action chunks open-loop: one chunk step per recording interval,
/// a new query once the chunk is used up.
pub struct PolicyRunner<'p> {
    policy: &'p dyn Policy,
    chunk: Option<ActionChunk>,
    next: usize,
    cmd: Option<(JointVector, f64)>,
}

impl<'p> PolicyRunner<'p> {
    pub fn new(policy: &'p dyn Policy) -> Self {
        Self {
            policy,
            chunk: None,
            next: 0,
            cmd: None,
        }
    }

    pub fn tick(&mut self, s: &mut Session) -> Result<BusCommands, SessionError> {
        if s.is_record_tick() || self.cmd.is_none() {
            let used_up = self.chunk.as_ref().is_none_or(|c| self.next >= c.horizon());
            if used_up {
                self.chunk = Some(self.policy.predict(&s.observe())?);
                self.next = 0;
            }
            let chunk = self.chunk.as_ref().expect("chunk queried above");
            self.cmd = Some(chunk.step(self.next));
            self.next += 1;
        }
        self.hold(s)
    }

    /// Repeats the current command without consulting the policy.
    pub fn hold(&mut self, s: &mut Session) -> Result<BusCommands, SessionError> {
        let (q, g) = self
            .cmd
            .get_or_insert_with(|| (s.bus.follower.q.clone(), s.gripper_cmd));
        let (q, g) = (q.clone(), *g);
        s.step_policy(&q, g)
    }
}

// ---------------------------------------------------------------- supervisor

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    /// Largest tolerated distance from the expert's path (m).
    pub d_int: f64,
    /// Longest tolerated time in one stage (s).
    pub phase_timeout: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            d_int: 0.02,
            phase_timeout: 6.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InterventionReason {
    Failure,
    Deviation,
    Timeout,
}

impl From<InterventionReason> for ClipReason {
    fn from(r: InterventionReason) -> Self {
        match r {
            InterventionReason::Failure => ClipReason::Failure,
            InterventionReason::Deviation => ClipReason::Deviation,
            InterventionReason::Timeout => ClipReason::Timeout,
        }
    }
}

/// What the expert would be doing: its path for this world and how long the
/// current stage has been running.
#[derive(Debug, Clone, Copy)]
pub struct ExpertIntent<'a> {
    pub path: &'a [Vector3<f64>],
    pub phase_elapsed: f64,
}

/// Failure predicate of the latest world step: a held object dropped or let
/// go away from its goal, a closing gripper with nothing inside the slip
/// bound, or a cube about to be put into the wrong container.
pub fn failure_observed(ws: &WorldState, desc: &TaskDescriptor) -> bool {
    ws.events.iter().any(|e| match e {
        WorldEvent::Slipped { .. } | WorldEvent::Missed { .. } => true,
        WorldEvent::Released { object } => !object_placed(ws, desc, *object),
        _ => false,
    }) || tasks::wrong_placement_imminent(ws, desc)
}

/// Scripted stand-in for the operator's decision to take over.
pub fn should_intervene(
    ws: &WorldState,
    desc: &TaskDescriptor,
    ee: &Vector3<f64>,
    intent: &ExpertIntent,
    th: &Thresholds,
) -> Option<InterventionReason> {
    if failure_observed(ws, desc) {
        Some(InterventionReason::Failure)
    } else if path_distance(intent.path, ee) > th.d_int {
        Some(InterventionReason::Deviation)
    } else if intent.phase_elapsed > th.phase_timeout {
        Some(InterventionReason::Timeout)
    } else {
        None
    }
}

// ------------------------------------------------------------------ rollouts

/// Runs the expert alone from a fresh world and records every interval.
pub fn expert_episode(
    setup: &TaskSetup,
    expert: &ExpertConfig,
    seed: u64,
    source: String,
) -> Result<Episode, HilError> {
    let mut s = setup.open(seed, ControlMode::Teleop)?;
    let mut ex = ExpertDriver::new(*expert, derive_seed(seed, stream::EXPERT, 0));
    let mut frames = Vec::new();
    while s.t() < setup.desc.time_limit && !ex.finished() {
        let a = ex.act(&s)?;
        if s.is_record_tick() {
            let snap = s.snapshot();
            let cmds = s.step_teleop(&a.hand, a.gripper)?;
            frames.push(snap.frame(&cmds, a.gripper, None));
        } else {
            s.step_teleop(&a.hand, a.gripper)?;
        }
    }
    Ok(Episode::new(frames, setup.task_id(), s.status(), source)?)
}

/// `n` successful expert demonstrations. Failed attempts are skipped; at
/// most `3n` seeds are tried.
pub fn collect_demos(setup: &TaskSetup, expert: &ExpertConfig, n: usize, seed: u64) -> Result<Dataset, HilError> {
    let mut d = Dataset::new(setup.header());
    let max_attempts = 3 * n.max(1);
    let mut tried = 0;
    while d.episodes.len() < n && tried < max_attempts {
        let batch = (n - d.episodes.len()).min(max_attempts - tried);
        let idx: Vec<u64> = (tried as u64..(tried + batch) as u64).collect();
        let eps = map_seeds(&idx, |i| {
            let s = derive_seed(seed, stream::DEMO, i);
            expert_episode(setup, expert, s, format!("demo:{i}:seed={s}"))
        });
        tried += batch;
        for ep in eps {
            let ep = ep?;
            if ep.outcome.done && d.episodes.len() < n {
                d.episodes.push(ep);
            }
        }
    }
    if d.episodes.len() < n {
        return Err(HilError::DemoShortfall {
            wanted: n,
            got: d.episodes.len(),
            attempts: tried,
        });
    }
    Ok(d)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutLog {
    pub iteration: usize,
    pub seed: u64,
    pub intervention: Option<InterventionReason>,
    pub takeover_t: Option<f64>,
    pub clip_frames: usize,
    pub status: StageStatus,
    pub t_end: f64,
}

/// Longest wait for the arms to come into sync before a takeover (s).
const SYNC_WAIT: f64 = 1.0;

/// One deployment with supervision. A takeover is recorded as a clip in
/// `recorder`'s buffer.
#[allow(clippy::too_many_arguments)]
pub fn hil_rollout(
    setup: &TaskSetup,
    policy: &dyn Policy,
    expert: &ExpertConfig,
    th: &Thresholds,
    seed: u64,
    iteration: usize,
    recorder: &mut ClipRecorder,
) -> Result<RolloutLog, HilError> {
    let desc = &setup.desc;
    let mut s = setup.open(seed, ControlMode::Policy)?;
    let path = nominal_path(&s.world, desc, &s.follower_ee().position);
    let mut runner = PolicyRunner::new(policy);
    let mut stage_start = 0.0;
    let mut latched = false;
    let mut reason = None;
    while s.t() < desc.time_limit {
        runner.tick(&mut s)?;
        let st = s.status();
        if st.done {
            break;
        }
        if st.stage1 && !latched {
            latched = true;
            stage_start = s.t();
        }
        let intent = ExpertIntent {
            path: &path,
            phase_elapsed: s.t() - stage_start,
        };
        reason = should_intervene(&s.world, desc, &s.follower_ee().position, &intent, th);
        if reason.is_some() {
            break;
        }
    }
    let mut log = RolloutLog {
        iteration,
        seed,
        intervention: reason,
        takeover_t: None,
        clip_frames: 0,
        status: s.status(),
        t_end: s.t(),
    };
    let Some(reason) = reason else {
        return Ok(log);
    };

    let wait_until = s.t() + SYNC_WAIT;
    loop {
        match s.switch_mode(ControlMode::Teleop) {
            Ok(()) => break,
            Err(SessionError::Copilot(CopilotError::SwitchRejected { .. })) if s.t() < wait_until => {
                runner.hold(&mut s)?;
            }
            Err(e) => return Err(e.into()),
        }
    }
    let t0 = s.t();
    log.takeover_t = Some(t0);
    recorder.begin(
        setup.task_id(),
        reason.into(),
        setup.wm.alpha(),
        s.mode(),
        t0,
        format!("hil:iter={iteration}:seed={seed}"),
    )?;
    let mut ex = ExpertDriver::new(*expert, derive_seed(seed, stream::EXPERT, 1));
    ex.take_over(&s);
    while s.t() - t0 < desc.time_limit && !ex.finished() {
        let a = ex.act(&s)?;
        if s.is_record_tick() {
            let snap = s.snapshot();
            let cmds = s.step_teleop(&a.hand, a.gripper)?;
            recorder.append(snap.frame(&cmds, a.gripper, None))?;
        } else {
            s.step_teleop(&a.hand, a.gripper)?;
        }
    }
    log.clip_frames = match recorder.end() {
        Ok(c) => c.frames.len(),
        Err(RecorderError::EmptyClip) => 0,
        Err(e) => return Err(e.into()),
    };
    log.status = s.status();
    log.t_end = s.t();
    Ok(log)
}

// ------------------------------------------------------------------ run_hil

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HilConfig {
    /// Clips per fine-tuning round.
    pub k: usize,
    /// Fine-tuning rounds.
    pub n: usize,
    pub thresholds: Thresholds,
    /// Evaluation rollouts.
    pub m: usize,
    /// Deployments allowed per round before giving up on reaching `k` clips.
    pub rollout_budget: usize,
    pub seed: u64,
    pub eval_seed: u64,
}

impl Default for HilConfig {
    fn default() -> Self {
        Self {
            k: 5,
            n: 2,
            thresholds: Thresholds::default(),
            m: 50,
            rollout_budget: 40,
            seed: 7,
            eval_seed: 1000,
        }
    }
}

impl HilConfig {
    pub fn validate(&self) -> Result<(), HilError> {
        for (name, v) in [("k", self.k), ("n", self.n), ("m", self.m), ("rollout_budget", self.rollout_budget)] {
            if v == 0 {
                return Err(HilError::Config(format!("`{name}` must be at least 1")));
            }
        }
        let th = &self.thresholds;
        if !(th.d_int > 0.0) || !(th.phase_timeout > 0.0) {
            return Err(HilError::Config("intervention thresholds must be positive".into()));
        }
        Ok(())
    }

    pub fn eval_seeds(&self) -> Vec<u64> {
        crate::par::seeds(self.eval_seed, stream::EVAL, self.m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneLog {
    pub iteration: usize,
    pub clips: usize,
    pub dataset_frames: usize,
    pub policy_pairs: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HilLog {
    pub rollouts: Vec<RolloutLog>,
    pub finetunes: Vec<FinetuneLog>,
    /// Clips left in the buffer when a round ran out of deployments.
    pub dropped_clips: usize,
    /// Buffer size right after each fine-tune.
    pub buffer_after_finetune: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct HilOutput {
    pub policy: BcPolicy,
    /// Base demonstrations followed by every clip used for fine-tuning.
    pub dataset: Dataset,
    pub clips: Vec<Clip>,
    pub log: HilLog,
}

/// A run that stopped on an error, with everything logged up to that point.
#[derive(Debug, Error)]
#[error("HIL run aborted after {} deployments: {source}", log.rollouts.len())]
pub struct HilAbort {
    pub log: HilLog,
    #[source]
    pub source: HilError,
}

pub fn run_hil(
    d0: &Dataset,
    pi0: &BcPolicy,
    expert: &ExpertConfig,
    cfg: &HilConfig,
    setup: &TaskSetup,
) -> Result<HilOutput, HilAbort> {
    let mut log = HilLog::default();
    match hil_inner(d0, pi0, expert, cfg, setup, &mut log) {
        Ok((policy, dataset, clips)) => Ok(HilOutput {
            policy,
            dataset,
            clips,
            log,
        }),
        Err(source) => Err(HilAbort { log, source }),
    }
}

fn hil_inner(
    d0: &Dataset,
    pi0: &BcPolicy,
    expert: &ExpertConfig,
    cfg: &HilConfig,
    setup: &TaskSetup,
    log: &mut HilLog,
) -> Result<(BcPolicy, Dataset, Vec<Clip>), HilError> {
    hil_loop(d0, pi0, cfg, log, |policy, seed, i, recorder| {
        hil_rollout(setup, policy, expert, &cfg.thresholds, seed, i, recorder)
    })
}

/// The fine-tuning schedule with the deployment supplied by the caller.
/// `deploy(policy, seed, iteration, recorder)` runs one supervised rollout and
/// leaves any takeover clip in the recorder's buffer.
pub fn hil_loop<F>(
    d0: &Dataset,
    pi0: &BcPolicy,
    cfg: &HilConfig,
    log: &mut HilLog,
    mut deploy: F,
) -> Result<(BcPolicy, Dataset, Vec<Clip>), HilError>
where
    F: FnMut(&BcPolicy, u64, usize, &mut ClipRecorder) -> Result<RolloutLog, HilError>,
{
    cfg.validate()?;
    let mut policy = pi0.clone();
    let mut data = d0.clone();
    let mut used = Vec::new();
    let mut recorder = ClipRecorder::new();
    let mut j = 0u64;
    for i in 0..cfg.n {
        let mut deployed = 0;
        while recorder.buffer().len() < cfg.k && deployed < cfg.rollout_budget {
            let seed = derive_seed(cfg.seed, stream::HIL, j);
            j += 1;
            deployed += 1;
            let r = deploy(&policy, seed, i, &mut recorder)?;
            log.rollouts.push(r);
        }
        if recorder.buffer().len() >= cfg.k {
            let clips = recorder.take_buffer();
            data = merge_dataset(&data, &clips);
            policy = finetune(&policy, &data)?;
            log.finetunes.push(FinetuneLog {
                iteration: i,
                clips: clips.len(),
                dataset_frames: data.frame_count(),
                policy_pairs: policy.len(),
            });
            log.buffer_after_finetune.push(recorder.buffer().len());
            used.extend(clips);
        } else {
            log.dropped_clips += recorder.take_buffer().len();
        }
    }
    Ok((policy, data, used))
}

// --------------------------------------------------------------- evaluation

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RolloutScore {
    pub seed: u64,
    pub stage1: bool,
    /// Stage 2 in the rollout itself, or after repositioning if stage 1 failed.
    pub stage2: bool,
    /// Both stages in one uninterrupted rollout.
    pub total: bool,
    pub repositioned: bool,
    /// Simulated time spent, including a repositioned run (s).
    pub duration: f64,
}

/// Runs the policy until the task is done or the time limit.
pub fn run_policy(s: &mut Session, policy: &dyn Policy, limit: f64) -> Result<StageStatus, SessionError> {
    let mut runner = PolicyRunner::new(policy);
    let t0 = s.t();
    while s.t() - t0 < limit {
        runner.tick(s)?;
        if s.status().done {
            break;
        }
    }
    Ok(s.status())
}

pub fn eval_rollout(setup: &TaskSetup, policy: &dyn Policy, seed: u64) -> Result<RolloutScore, HilError> {
    let limit = setup.desc.time_limit;
    let mut s = setup.open(seed, ControlMode::Policy)?;
    let st = run_policy(&mut s, policy, limit)?;
    let mut score = RolloutScore {
        seed,
        stage1: st.stage1,
        stage2: st.stage2,
        total: st.done,
        repositioned: false,
        duration: s.t(),
    };
    if !st.stage1 {
        let mut r = setup.open(seed, ControlMode::Policy)?;
        r.reposition_for_stage2()?;
        let st2 = run_policy(&mut r, policy, limit)?;
        score.stage2 = st2.stage2;
        score.repositioned = true;
        score.duration += r.t();
    }
    Ok(score)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub label: String,
    pub rollouts: Vec<RolloutScore>,
    /// Percentages.
    pub stage1: f64,
    pub stage2: f64,
    pub total: f64,
    /// Simulated time over all rollouts (s).
    pub wall_time: f64,
}

impl StageReport {
    pub fn from_scores(label: &str, rollouts: Vec<RolloutScore>) -> Self {
        let n = rollouts.len().max(1) as f64;
        let pct = |f: fn(&RolloutScore) -> bool| 100.0 * rollouts.iter().filter(|r| f(r)).count() as f64 / n;
        Self {
            label: label.to_string(),
            stage1: pct(|r| r.stage1),
            stage2: pct(|r| r.stage2),
            total: pct(|r| r.total),
            wall_time: rollouts.iter().map(|r| r.duration).sum(),
            rollouts,
        }
    }
}

/// Stage-wise success over `seeds`; rollouts run independently and are
/// reported in seed order.
pub fn evaluate(setup: &TaskSetup, policy: &dyn Policy, seeds: &[u64], label: &str) -> Result<StageReport, HilError> {
    if seeds.is_empty() {
        return Err(HilError::Config("evaluation needs at least one rollout".into()));
    }
    let scores = map_seeds(seeds, |s| eval_rollout(setup, policy, s))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    Ok(StageReport::from_scores(label, scores))
}

/// Aligned `Policy | S1 | S2 | Total` table (percent).
pub fn format_stage_table(task: &str, reports: &[&StageReport]) -> String {
    let w = reports.iter().map(|r| r.label.len()).max().unwrap_or(0).max(6);
    let mut out = String::new();
    let _ = writeln!(out, "{task}");
    let _ = writeln!(out, "{:<w$}  {:>7}  {:>7}  {:>7}  {:>5}", "Policy", "S1 (%)", "S2 (%)", "Total", "n");
    for r in reports {
        let _ = writeln!(
            out,
            "{:<w$}  {:>7.1}  {:>7.1}  {:>7.1}  {:>5}",
            r.label,
            r.stage1,
            r.stage2,
            r.total,
            r.rollouts.len()
        );
    }
    out
}
