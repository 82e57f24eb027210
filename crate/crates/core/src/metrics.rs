//! Alignment precision under workspace scaling, and data collection time.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::copilot::{ControlMode, WorkspaceMap};
use crate::expert::{ExpertConfig, ExpertDriver};
use crate::par::{map_seeds, stream};
use crate::recorder::{Clip, Episode};
use crate::session::{Session, SessionConfig, SessionError};
use crate::tasks::{self, pole_top_rest, TaskDescriptor};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("trajectory needs at least 2 samples, got {0}")]
    TooShort(usize),
    #[error("non-finite sample at index {0}")]
    NonFinite(usize),
    #[error("samples must have strictly increasing timestamps (index {0})")]
    NonMonotonic(usize),
    #[error("transport direction must have a non-zero horizontal component")]
    BadDirection,
    #[error("cannot match {clips} clips against {episodes} episodes")]
    Unmatched { clips: usize, episodes: usize },
    #[error("invalid scaling trial configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Session(#[from] SessionError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectorySample {
    pub t: f64,
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignmentRms {
    pub lateral_rms: f64,
    pub forward_rms: f64,
    pub alignment_start_index: usize,
    /// The transport velocity never changed sign after motion onset; the
    /// final fifth of the samples was used instead.
    pub no_zero_crossing: bool,
}

fn horizontal_unit(d: &Vector3<f64>) -> Option<Vector3<f64>> {
    let h = Vector3::new(d.x, d.y, 0.0);
    let n = h.norm();
    (n > 1e-12 && n.is_finite()).then(|| h / n)
}

/// RMS deviation from `target` during the alignment phase, split into the
/// horizontal component along `direction` (forward) and the horizontal
/// component across it (lateral).
///
/// Motion onset is the first sample whose transport velocity exceeds half
/// its peak; alignment starts at the first sign change after that.
pub fn rms_alignment_metric(
    samples: &[TrajectorySample],
    target: &Vector3<f64>,
    direction: &Vector3<f64>,
) -> Result<AlignmentRms, MetricsError> {
    if samples.len() < 2 {
        return Err(MetricsError::TooShort(samples.len()));
    }
    for (i, s) in samples.iter().enumerate() {
        if !(s.t.is_finite() && s.position.iter().chain(s.velocity.iter()).all(|v| v.is_finite())) {
            return Err(MetricsError::NonFinite(i));
        }
        if i > 0 && s.t <= samples[i - 1].t {
            return Err(MetricsError::NonMonotonic(i));
        }
    }
    let fwd = horizontal_unit(direction).ok_or(MetricsError::BadDirection)?;
    let lat = Vector3::z().cross(&fwd);

    let v: Vec<f64> = samples.iter().map(|s| s.velocity.dot(&fwd)).collect();
    let peak = v.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    let crossing = v.iter().position(|x| peak > 0.0 && x.abs() >= 0.5 * peak).and_then(|onset| {
        let sign = v[onset].signum();
        (onset + 1..v.len()).find(|&i| v[i] * sign <= 0.0)
    });
    let (start, no_zero_crossing) = match crossing {
        Some(i) => (i, false),
        None => (samples.len() - (samples.len() / 5).max(1), true),
    };

    let tail = &samples[start..];
    let n = tail.len() as f64;
    let (mut sl, mut sf) = (0.0, 0.0);
    for s in tail {
        let e = s.position - target;
        sl += e.dot(&lat).powi(2);
        sf += e.dot(&fwd).powi(2);
    }
    Ok(AlignmentRms {
        lateral_rms: (sl / n).sqrt(),
        forward_rms: (sf / n).sqrt(),
        alignment_start_index: start,
        no_zero_crossing,
    })
}

// ------------------------------------------------------------ scaling trial

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScalingConfig {
    pub trials: usize,
    /// Leader-space tremor of the operator (m).
    pub sigma: f64,
    pub alpha_fine: f64,
    pub alpha_coarse: f64,
    /// Start distance from the alignment target (m).
    pub distance: f64,
    /// Time held at the target after the reference arrives (s).
    pub hold: f64,
    pub seed: u64,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        Self {
            trials: 200,
            sigma: 0.002,
            alpha_fine: 0.5,
            alpha_coarse: 2.0,
            distance: 0.05,
            hold: 1.0,
            seed: 11,
        }
    }
}

impl ScalingConfig {
    pub fn validate(&self) -> Result<(), MetricsError> {
        let bad = |m: &str| Err(MetricsError::Config(m.into()));
        if self.trials == 0 {
            return bad("`trials` must be at least 1");
        }
        for (name, v) in [
            ("sigma", self.sigma),
            ("alpha_fine", self.alpha_fine),
            ("alpha_coarse", self.alpha_coarse),
            ("distance", self.distance),
            ("hold", self.hold),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(&format!("`{name}` must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingTrial {
    pub seed: u64,
    pub alpha: f64,
    pub rms: AlignmentRms,
}

/// One insertion alignment: the disk is held above the table at the
/// alignment height, `distance` away from the pole axis in a seeded random
/// direction, and the operator brings it over the pole and holds it there.
pub fn scaling_trial(
    session: &SessionConfig,
    expert: &ExpertConfig,
    cfg: &ScalingConfig,
    alpha: f64,
    seed: u64,
) -> Result<ScalingTrial, MetricsError> {
    let desc = TaskDescriptor::peg_insert();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ws = tasks::reset(&desc, seed).map_err(SessionError::from)?;
    ws = tasks::reposition_for_stage2(&ws, &desc);
    let pole = ws.fixtures[0].pose.position;
    let target = Vector3::new(pole.x, pole.y, pole_top_rest(&desc) + 0.01);
    let theta = rng.random_range(0.0..std::f64::consts::TAU);
    let dir = Vector3::new(theta.cos(), theta.sin(), 0.0);
    let start = target + dir * cfg.distance;
    ws.gripper.pose.position = start;
    ws.objects[0].pose.position = start;

    let wm = WorkspaceMap::new(alpha, session.leader_center()?, target).map_err(SessionError::from)?;
    let mut s = Session::new(session, &desc, wm, ws, ControlMode::Teleop)?;
    let ex_cfg = ExpertConfig { sigma: cfg.sigma, ..*expert };
    let mut ex = ExpertDriver::new(ex_cfg, rng.random());

    let dt = session.dt;
    let mut samples = Vec::new();
    let mut prev = s.follower_ee().position;
    let mut held = 0.0;
    let limit = cfg.distance / ex_cfg.speed + cfg.hold + 1.0;
    while held < cfg.hold && s.t() < limit {
        let hand = ex.track(&s, &target, true)?;
        s.step_teleop(&hand, 0.0)?;
        let p = s.follower_ee().position;
        samples.push(TrajectorySample {
            t: s.t(),
            position: p,
            velocity: (p - prev) / dt,
        });
        prev = p;
        if ex.reference() == Some(target) {
            held += dt;
        }
    }
    // transport runs from start towards the target
    let rms = rms_alignment_metric(&samples, &target, &(-dir))?;
    Ok(ScalingTrial { seed, alpha, rms })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub mean_lateral: f64,
    pub mean_forward: f64,
    pub median_lateral: f64,
    pub median_forward: f64,
    /// Root of the mean squared lateral and forward RMS over all trials.
    pub pooled: f64,
}

impl Aggregates {
    pub fn from_trials(trials: &[ScalingTrial]) -> Self {
        let lat: Vec<f64> = trials.iter().map(|t| t.rms.lateral_rms).collect();
        let fwd: Vec<f64> = trials.iter().map(|t| t.rms.forward_rms).collect();
        let n = trials.len().max(1) as f64;
        let pooled = (trials
            .iter()
            .map(|t| t.rms.lateral_rms.powi(2) + t.rms.forward_rms.powi(2))
            .sum::<f64>()
            / (2.0 * n))
            .sqrt();
        Self {
            mean_lateral: lat.iter().sum::<f64>() / n,
            mean_forward: fwd.iter().sum::<f64>() / n,
            median_lateral: median(lat),
            median_forward: median(fwd),
            pooled,
        }
    }

    pub fn named(&self) -> [(&'static str, f64); 5] {
        [
            ("mean lateral", self.mean_lateral),
            ("mean forward", self.mean_forward),
            ("median lateral", self.median_lateral),
            ("median forward", self.median_forward),
            ("pooled", self.pooled),
        ]
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 0 {
        (v[m - 1] + v[m]) / 2.0
    } else {
        v[m]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub config: ScalingConfig,
    pub fine: Aggregates,
    pub coarse: Aggregates,
    pub flagged: usize,
    pub trials: Vec<ScalingTrial>,
}

impl ScalingReport {
    /// Coarse over fine, per aggregate.
    pub fn ratios(&self) -> Vec<(&'static str, f64)> {
        self.coarse
            .named()
            .iter()
            .zip(self.fine.named())
            .map(|(&(name, c), (_, f))| (name, c / f))
            .collect()
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<16}  {:>12}  {:>12}  {:>7}",
            "RMS (mm)",
            format!("a={}", self.config.alpha_coarse),
            format!("a={}", self.config.alpha_fine),
            "ratio"
        );
        for ((name, c), (_, f)) in self.coarse.named().iter().zip(self.fine.named()) {
            let _ = writeln!(out, "{:<16}  {:>12.3}  {:>12.3}  {:>7.2}", name, c * 1e3, f * 1e3, c / f);
        }
        let _ = writeln!(out, "trials per scale: {}, fallback windows: {}", self.config.trials, self.flagged);
        out
    }
}

/// Runs the same seeded trials at both scales.
pub fn scaling_experiment(
    session: &SessionConfig,
    expert: &ExpertConfig,
    cfg: &ScalingConfig,
) -> Result<ScalingReport, MetricsError> {
    cfg.validate()?;
    let seeds = crate::par::seeds(cfg.seed, stream::SCALING, cfg.trials);
    let run = |alpha: f64| -> Result<Vec<ScalingTrial>, MetricsError> {
        map_seeds(&seeds, |s| scaling_trial(session, expert, cfg, alpha, s))
            .into_iter()
            .collect()
    };
    let fine = run(cfg.alpha_fine)?;
    let coarse = run(cfg.alpha_coarse)?;
    let flagged = fine.iter().chain(&coarse).filter(|t| t.rms.no_zero_crossing).count();
    Ok(ScalingReport {
        config: *cfg,
        fine: Aggregates::from_trials(&fine),
        coarse: Aggregates::from_trials(&coarse),
        flagged,
        trials: fine.into_iter().chain(coarse).collect(),
    })
}

// ---------------------------------------------------------- collection time

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollectionTimeReport {
    /// Number of interventions compared.
    pub matched: usize,
    /// Full demonstrations (s).
    pub base: f64,
    /// Corrective clips (s).
    pub proposed: f64,
    /// Totals keyed by the part of `source` before the first `:`.
    pub by_source: BTreeMap<String, f64>,
}

impl CollectionTimeReport {
    pub fn clips_faster(&self) -> bool {
        self.proposed < self.base
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<28}  {:>9}  {:>9}", "Collection time (s)", "Base", "Proposed");
        let _ = writeln!(
            out,
            "{:<28}  {:>9.2}  {:>9.2}",
            format!("total over {} trajectories", self.matched),
            self.base,
            self.proposed
        );
        out
    }
}

/// Clip time against the time of as many full demonstrations as there are
/// clips, taking the first episodes in order.
pub fn collection_time_report(episodes: &[Episode], clips: &[Clip]) -> Result<CollectionTimeReport, MetricsError> {
    let n = clips.len();
    if episodes.len() < n {
        return Err(MetricsError::Unmatched {
            clips: n,
            episodes: episodes.len(),
        });
    }
    let mut by_source = BTreeMap::new();
    let mut add = |src: &str, w: f64| {
        let key = src.split(':').next().unwrap_or(src).to_string();
        *by_source.entry(key).or_insert(0.0) += w;
    };
    for e in &episodes[..n] {
        add(&e.source, e.wall_time);
    }
    for c in clips {
        add(&c.source, c.wall_time);
    }
    Ok(CollectionTimeReport {
        matched: n,
        base: episodes[..n].iter().map(|e| e.wall_time).sum(),
        proposed: clips.iter().map(|c| c.wall_time).sum(),
        by_source,
    })
}
