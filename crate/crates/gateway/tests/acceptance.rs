//! Acceptance criteria, one PASS/FAIL line each. The lines are written
//! straight to stdout so they show up without `--nocapture`.

use std::collections::BTreeMap;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use copilot_core::arm_sim::{self, DynamicsParams, PdGains};
use copilot_core::config::ExperimentConfig;
use copilot_core::copilot::{
    self, select_gains, ChainPair, ControlMode, CopilotState, GainSchedule, WorkspaceMap, DEFAULT_SWITCH_TOL,
};
use copilot_core::hil::{self, hil_loop, HilConfig, HilLog, RolloutLog};
use copilot_core::kinematics::{
    fixtures, forward_kinematics, inverse_kinematics, inverse_kinematics_position, jacobian, ChainModel, IkParams,
    JointVector,
};
use copilot_core::metrics;
use copilot_core::policy::{train_base, BcConfig, Observation};
use copilot_core::recorder::{
    Channel, ClipReason, ClipRecorder, Dataset, DatasetHeader, Episode, Frame, RecorderError, SCHEMA_VERSION,
};
use copilot_core::tasks::StageStatus;

type Outcome = Result<String, String>;

fn out(line: &str) {
    let mut s = std::io::stdout().lock();
    let _ = writeln!(s, "{line}");
    let _ = s.flush();
}

fn run(name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let t = Instant::now();
    let r = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let secs = t.elapsed().as_secs_f64();
    match &r {
        Ok(d) => out(&format!("PASS  {name}: {d} [{secs:.1} s]")),
        Err(d) => out(&format!("FAIL  {name}: {d} [{secs:.1} s]")),
    }
    r.is_ok()
}

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn interior(chain: &ChainModel, rng: &mut ChaCha8Rng) -> JointVector {
    JointVector::new(
        chain
            .joints
            .iter()
            .map(|j| {
                let (lo, hi) = j.limits;
                let m = 0.1 * (hi - lo);
                rng.random_range(lo + m..hi - m)
            })
            .collect(),
    )
}

// ------------------------------------------------------------- kinematics

fn fk_ik_round_trip() -> Outcome {
    let t = Instant::now();
    let ik = IkParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut detail = Vec::new();
    let mut ok = true;
    for chain in [fixtures::planar2(), fixtures::planar3(), fixtures::spatial6()] {
        let (mut worst_p, mut worst_o, mut failures): (f64, f64, usize) = (0.0, 0.0, 0);
        for _ in 0..1000 {
            let q_star = interior(&chain, &mut rng);
            let target = forward_kinematics(&chain, &q_star).unwrap();
            let seed = chain.clamp(&JointVector::new(
                q_star.iter().map(|v| v + rng.random_range(-0.2..0.2)).collect(),
            ));
            match inverse_kinematics(&chain, &target, &seed, &ik) {
                Ok(sol) => {
                    let got = forward_kinematics(&chain, &sol.q).unwrap();
                    worst_p = worst_p.max((got.position - target.position).norm());
                    worst_o = worst_o.max(got.orientation.angle_to(&target.orientation));
                    if !chain.within_limits(&sol.q, 0.0) {
                        failures += 1;
                    }
                }
                Err(_) => failures += 1,
            }
        }
        let chain_ok = failures == 0 && worst_p < 1e-6 && (chain.name != "spatial6" || worst_o < 1e-6);
        ok &= chain_ok;
        detail.push(format!(
            "{} pos {:.1e} m ori {:.1e} rad fail {}",
            chain.name, worst_p, worst_o, failures
        ));
    }
    let secs = t.elapsed().as_secs_f64();
    verdict(ok && secs < 5.0, format!("{}; {:.2} s", detail.join(", "), secs))
}

fn jacobian_check() -> Outcome {
    let h = 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for name in fixtures::NAMES {
        let chain = fixtures::by_name(name).unwrap();
        for _ in 0..100 {
            let q = interior(&chain, &mut rng);
            let j = jacobian(&chain, &q).unwrap();
            for c in 0..chain.dof() {
                let mut qp = q.clone().into_inner();
                let mut qm = qp.clone();
                qp[c] += h;
                qm[c] -= h;
                let pp = forward_kinematics(&chain, &JointVector::new(qp)).unwrap().position;
                let pm = forward_kinematics(&chain, &JointVector::new(qm)).unwrap().position;
                let fd = (pp - pm) / (2.0 * h);
                for r in 0..3 {
                    worst = worst.max((j[(r, c)] - fd[r]).abs());
                }
            }
        }
    }
    verdict(worst < 1e-5, format!("max |J - FD| = {worst:.2e} over 5 chains x 100 configurations"))
}

// ------------------------------------------------------------------ copilot

fn workspace_map_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let v = |rng: &mut ChaCha8Rng| Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
    let (mut inv, mut disp): (f64, f64) = (0.0, 0.0);
    for _ in 0..10_000 {
        let alpha = 10f64.powf(rng.random_range(-1.0..1.0));
        let wm = WorkspaceMap::new(alpha, v(&mut rng), v(&mut rng)).unwrap();
        let (x, y) = (v(&mut rng), v(&mut rng));
        inv = inv.max((wm.map_follower_to_leader(&wm.map_leader_to_follower(&x)) - x).amax());
        let d = wm.map_leader_to_follower(&x) - wm.map_leader_to_follower(&y) - alpha * (x - y);
        disp = disp.max(d.amax());
    }
    verdict(
        inv < 1e-12 && disp < 1e-12,
        format!("round trip {inv:.1e}, displacement scaling {disp:.1e} over 10^4 draws"),
    )
}

fn bidirectional_sync() -> Outcome {
    let chains = ChainPair {
        leader: fixtures::planar2(),
        follower: fixtures::planar3(),
    };
    let ik = IkParams::default();
    let dt = 0.002;
    let gs = GainSchedule::default_for(2, 3);
    let (lc, fc) = select_gains(&gs, ControlMode::Policy);
    let (ld, fd) = (
        DynamicsParams::default_for(&chains.leader),
        DynamicsParams::default_for(&chains.follower),
    );
    let start = Vector3::new(0.40, -0.10, 0.0);
    let speed = 0.05;
    let travel = 4.0;
    let line = |t: f64| start + Vector3::new(0.0, speed * t.min(travel), 0.0);
    let qf0 = inverse_kinematics_position(&chains.follower, &start, &JointVector::from(&[0.2, -0.8, 0.9][..]), &ik)
        .unwrap()
        .q;
    let c_l = Vector3::new(0.30, 0.05, 0.0);
    let ql0 = inverse_kinematics_position(&chains.leader, &c_l, &JointVector::from(&[0.3, 1.0][..]), &ik)
        .unwrap()
        .q;
    let wm = WorkspaceMap::new(1.0, c_l, start).unwrap();

    let run_until = |switch_at: f64| -> (f64, f64, f64) {
        let mut cs = CopilotState::new(ControlMode::Policy, ql0.clone(), qf0.clone());
        let mut worst_sync: f64 = 0.0;
        let mut worst_align: f64 = 0.0;
        let mut k = 0u64;
        loop {
            let t = k as f64 * dt;
            if t >= switch_at {
                break;
            }
            let q_cmd = inverse_kinematics_position(&chains.follower, &line(t), &cs.last_follower_cmd, &ik)
                .unwrap()
                .q;
            let cmds = copilot::policy_sync_tick(&mut cs, &chains, &wm, &ik, &q_cmd).unwrap();
            cs.leader = arm_sim::step(&chains.leader, &ld, &lc.comp, &lc.gains, &cmds.leader_cmd, &cs.leader, dt, None)
                .unwrap();
            cs.follower =
                arm_sim::step(&chains.follower, &fd, &fc.comp, &fc.gains, &cmds.follower_cmd, &cs.follower, dt, None)
                    .unwrap();
            if t > 1.0 {
                worst_sync = worst_sync.max(cs.sync_error);
                worst_align = worst_align.max(copilot::alignment_error(&cs, &chains, &wm).unwrap());
            }
            k += 1;
        }
        let before = forward_kinematics(&chains.follower, &cs.last_follower_cmd).unwrap().position;
        copilot::switch_mode(&mut cs, ControlMode::Teleop, DEFAULT_SWITCH_TOL).expect("switch accepted");
        let cmds = copilot::teleop_tick(&mut cs, &chains, &wm, &ik).unwrap();
        let after = forward_kinematics(&chains.follower, &cmds.follower_cmd).unwrap().position;
        (worst_sync, worst_align, (after - before).norm())
    };
    let (sync_m, align_m, jump_m) = run_until(2.5);
    let (sync_s, align_s, jump_s) = run_until(travel + 1.0);
    let ok = sync_m.max(sync_s) < 1e-3 && jump_s.max(jump_m) < 1e-3;
    verdict(
        ok,
        format!(
            "sync_error {:.1e} m, leader-follower gap {:.2} mm, command jump {:.1e} mm after the line, {:.1e} mm mid-line",
            sync_m.max(sync_s),
            align_m.max(align_s) * 1e3,
            jump_s * 1e3,
            jump_m * 1e3,
        ),
    )
}

fn gain_rules() -> Outcome {
    let gs = GainSchedule::default_for(3, 4);
    let (pl, _) = select_gains(&gs, ControlMode::Policy);
    let (tl, _) = select_gains(&gs, ControlMode::Teleop);
    let stronger = pl.gains.kp.iter().zip(&tl.gains.kp).all(|(p, t)| p > t);
    let no_friction = !pl.comp.friction_comp_on;
    let g = |kp| PdGains::uniform(3, kp, 1.0);
    let f = || PdGains::uniform(4, 60.0, 3.0);
    let weaker = GainSchedule::new(g(10.0), f(), g(5.0), f(), true).is_err();
    let equal = GainSchedule::new(g(10.0), f(), g(10.0), f(), true).is_err();
    let mut doc = serde_json::to_value(&gs).unwrap();
    doc["policy_leader_friction_comp"] = serde_json::Value::Bool(true);
    let friction_doc = serde_json::from_value::<GainSchedule>(doc).is_err();
    verdict(
        stronger && no_friction && weaker && equal && friction_doc,
        format!(
            "policy kp {:?} > teleop kp {:?}, policy friction comp off; weaker, equal and friction-comp schedules rejected",
            pl.gains.kp[0], tl.gains.kp[0]
        ),
    )
}

// ----------------------------------------------------------- clip semantics

fn header() -> DatasetHeader {
    DatasetHeader {
        schema_version: SCHEMA_VERSION,
        leader_chain: "leader3".into(),
        follower_chain: "scara4".into(),
        task_id: "peg_insert".into(),
        alpha: 1.0,
        obs_dim: 5,
        follower_dof: 4,
        record_dt: 0.02,
    }
}

fn frame(t: f64, channel: Channel, x: f64) -> Frame {
    let mode = match channel {
        Channel::Teleop => ControlMode::Teleop,
        Channel::Policy => ControlMode::Policy,
    };
    let q = JointVector::from(&[x, -0.3, 0.2, 0.05][..]);
    Frame {
        t,
        mode,
        active_channel: channel,
        leader_cmd_q: JointVector::from(&[x, 0.1, 0.7][..]),
        leader_obs_q: JointVector::from(&[x, 0.1, 0.7][..]),
        follower_cmd_q: q.clone(),
        follower_obs_q: q.clone(),
        follower_ee: forward_kinematics(&fixtures::scara4(), &q).unwrap(),
        gripper: 1.0,
        obs: Observation::new(vec![x, -0.3, 0.2, 0.05, x.sin()]),
        inactive_follower_cmd: None,
    }
}

fn clip_semantics() -> Outcome {
    let t0 = Instant::now();
    let scara = fixtures::scara4();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut cases = 0;
    let mut triggers = 0;
    for case in 0..300 {
        let mut d0 = Dataset::new(header());
        for e in 0..rng.random_range(1..4) {
            let n = rng.random_range(2..6);
            let frames = (0..n)
                .map(|i| frame(i as f64 * 0.02, Channel::Teleop, e as f64 + i as f64 * 0.01))
                .collect();
            d0.episodes.push(Episode::new(frames, "peg_insert", StageStatus::default(), format!("demo:{e}")).unwrap());
        }
        let bc = BcConfig {
            k: 1,
            h: rng.random_range(1..4),
            ..BcConfig::default()
        };
        let pi0 = train_base(&d0, &bc, &scara).unwrap();
        let cfg = HilConfig {
            k: rng.random_range(1..4),
            n: rng.random_range(1..4),
            rollout_budget: rng.random_range(1..6),
            seed: case,
            ..HilConfig::default()
        };
        let p_clip: f64 = if case % 10 == 0 { 0.0 } else { rng.random_range(0.2..1.0) };
        let mut log = HilLog::default();
        let mut deploy_rng = ChaCha8Rng::seed_from_u64(case);
        let mut rejected_policy_frames = 0;
        let (policy, merged, used) = hil_loop(&d0, &pi0, &cfg, &mut log, |_, seed, i, rec: &mut ClipRecorder| {
            if deploy_rng.random_bool(p_clip) {
                rec.begin("peg_insert", ClipReason::Failure, 1.0, ControlMode::Teleop, 0.0, format!("s{seed}"))
                    .unwrap();
                for f in 0..deploy_rng.random_range(1..6) {
                    let ch = if deploy_rng.random_bool(0.3) { Channel::Policy } else { Channel::Teleop };
                    match rec.append(frame(0.02 * (f + 1) as f64, ch, deploy_rng.random_range(-1.0..1.0))) {
                        Err(RecorderError::WrongChannel) => rejected_policy_frames += 1,
                        r => r.unwrap(),
                    }
                }
                match rec.end() {
                    Ok(_) | Err(RecorderError::EmptyClip) => {}
                    Err(e) => panic!("{e}"),
                }
            }
            Ok(RolloutLog {
                iteration: i,
                seed,
                intervention: None,
                takeover_t: None,
                clip_frames: 0,
                status: StageStatus::default(),
                t_end: 0.0,
            })
        })
        .unwrap();
        let _ = rejected_policy_frames;
        let pure = used
            .iter()
            .all(|c| c.frames.iter().all(|f| f.active_channel == Channel::Teleop));
        let additive = merged.episodes == d0.episodes
            && merged.clips == used
            && merged.frame_count() == d0.frame_count() + used.iter().map(|c| c.frames.len()).sum::<usize>();
        let exact = log.finetunes.len() == used.len() / cfg.k
            && used.len() % cfg.k == 0
            && log.finetunes.iter().all(|f| f.clips == cfg.k);
        let cleared = log.buffer_after_finetune.iter().all(|&b| b == 0)
            && log.buffer_after_finetune.len() == log.finetunes.len();
        let identity = !used.is_empty() || policy == pi0;
        if !(pure && additive && exact && cleared && identity) {
            return Err(format!(
                "case {case}: purity {pure} additivity {additive} triggers {exact} cleared {cleared} identity {identity}"
            ));
        }
        triggers += log.finetunes.len();
        cases += 1;
    }
    let secs = t0.elapsed().as_secs_f64();
    verdict(
        secs < 10.0,
        format!("{cases} randomized runs, {triggers} fine-tunes, all properties hold; {secs:.2} s"),
    )
}

// --------------------------------------------------------- HIL experiment

struct HilRun {
    base: hil::StageReport,
    tuned: hil::StageReport,
    collection: metrics::CollectionTimeReport,
    secs: f64,
}

fn hil_experiment() -> HilRun {
    let t = Instant::now();
    let cfg = ExperimentConfig::default();
    assert_eq!((cfg.seed, cfg.demos, cfg.hil.k, cfg.hil.n, cfg.hil.m), (7, 20, 5, 2, 50));
    let setup = cfg.setup().unwrap();
    let d0 = hil::collect_demos(&setup, &cfg.expert, cfg.demos, cfg.seed).unwrap();
    let pi0 = train_base(&d0, &cfg.bc, &setup.session.chains.follower).unwrap();
    let run = hil::run_hil(&d0, &pi0, &cfg.expert, &cfg.hil, &setup).unwrap();
    let seeds = cfg.hil.eval_seeds();
    let base = hil::evaluate(&setup, &pi0, &seeds, "base").unwrap();
    let tuned = hil::evaluate(&setup, &run.policy, &seeds, "hil").unwrap();
    let collection = metrics::collection_time_report(&run.dataset.episodes, &run.dataset.clips).unwrap();
    HilRun {
        base,
        tuned,
        collection,
        secs: t.elapsed().as_secs_f64(),
    }
}

fn hil_improvement(r: &HilRun) -> Outcome {
    let (b, f) = (&r.base, &r.tuned);
    let ok = f.total >= b.total + 10.0 && f.stage1 >= b.stage1 && r.secs < 60.0;
    verdict(
        ok,
        format!(
            "total {:.0}% -> {:.0}%, S1 {:.0}% -> {:.0}%, S2 {:.0}% -> {:.0}% over {} seeds; {:.1} s",
            b.total,
            f.total,
            b.stage1,
            f.stage1,
            b.stage2,
            f.stage2,
            b.rollouts.len(),
            r.secs
        ),
    )
}

fn collection_time(r: &HilRun) -> Outcome {
    let c = &r.collection;
    verdict(
        c.matched > 0 && c.clips_faster(),
        format!(
            "{} interventions: clips {:.2} s < demonstrations {:.2} s",
            c.matched, c.proposed, c.base
        ),
    )
}

fn scaling_precision() -> Outcome {
    let cfg = ExperimentConfig::default();
    assert_eq!((cfg.scaling.trials, cfg.scaling.sigma), (200, 0.002));
    assert_eq!((cfg.scaling.alpha_fine, cfg.scaling.alpha_coarse), (0.5, 2.0));
    let rep = metrics::scaling_experiment(&cfg.session().unwrap(), &cfg.expert, &cfg.scaling).unwrap();
    let ratios = rep.ratios();
    let ok = ratios.iter().all(|(_, r)| *r > 1.0 && (2.0..=8.0).contains(r));
    verdict(
        ok,
        ratios
            .iter()
            .map(|(n, r)| format!("{n} {r:.2}"))
            .collect::<Vec<_>>()
            .join(", "),
    )
}

// ------------------------------------------------------------- determinism

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn cli(args: &[&str]) {
    let o = Command::new(env!("CARGO_BIN_EXE_copilot")).args(args).output().unwrap();
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let d = |n: &str| tmp.path().join(n).to_str().unwrap().to_string();
    let mut compared = Vec::new();
    let mut same = |a: &str, b: &str, what: &str| -> Result<(), String> {
        let (fa, fb) = (files(Path::new(a)), files(Path::new(b)));
        if fa.is_empty() || fa != fb {
            return Err(format!("{what} differs between runs"));
        }
        compared.push(format!("{what} ({} files)", fa.len()));
        Ok(())
    };
    for run in ["1", "2"] {
        cli(&["collect", "--task", "peg_insert", "--episodes", "20", "--seed", "7", "--out", &d(&format!("data{run}"))]);
        cli(&["train", "--dataset", &d("data1"), "--seed", "7", "--out", &d(&format!("policy{run}"))]);
        cli(&[
            "eval", "--policy", &format!("{}/policy.json", d("policy1")), "--rollouts", "20", "--seed", "7", "--out",
            &d(&format!("eval{run}")),
        ]);
        cli(&[
            "hil", "--task", "peg_insert", "--k", "5", "--iters", "2", "--seed", "7", "--rollouts", "20", "--out",
            &d(&format!("hil{run}")),
        ]);
    }
    same(&d("data1"), &d("data2"), "collect")?;
    same(&d("policy1"), &d("policy2"), "train")?;
    same(&d("eval1"), &d("eval2"), "eval")?;
    same(&d("hil1"), &d("hil2"), "hil")?;
    Ok(format!("byte-identical: {}", compared.join(", ")))
}

#[test]
fn acceptance() {
    out("");
    let mut ok = true;
    ok &= run("FK/IK round trip", fk_ik_round_trip);
    ok &= run("Jacobian vs finite differences", jacobian_check);
    ok &= run("Workspace map algebra", workspace_map_algebra);
    ok &= run("Bidirectional sync and bumpless switch", bidirectional_sync);
    ok &= run("Gain-schedule rules", gain_rules);
    ok &= run("Clip semantics", clip_semantics);
    let hil_run = catch_unwind(hil_experiment).map_err(|_| "HIL experiment panicked".to_string());
    ok &= run("HIL improvement", || hil_run.as_ref().map_err(Clone::clone).and_then(hil_improvement));
    ok &= run("Scaling precision", scaling_precision);
    ok &= run("Collection time", || hil_run.as_ref().map_err(Clone::clone).and_then(collection_time));
    ok &= run("Determinism", determinism);
    assert!(ok, "acceptance criteria failed; see the lines above");
}
