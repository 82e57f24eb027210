use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use copilot_core::config::ExperimentConfig;
use copilot_core::copilot::ControlMode;
use copilot_core::hil::{collect_demos, hil_loop, run_hil, HilConfig, HilLog, RolloutLog};
use copilot_core::kinematics::{fixtures, forward_kinematics, JointVector};
use copilot_core::policy::{train_base, BcConfig, Observation, Policy};
use copilot_core::recorder::{
    Channel, ClipReason, ClipRecorder, Dataset, DatasetHeader, Episode, Frame, RecorderError, SCHEMA_VERSION,
};
use copilot_core::tasks::StageStatus;

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

fn base_dataset(sizes: &[usize]) -> Dataset {
    let mut d = Dataset::new(header());
    for (e, &n) in sizes.iter().enumerate() {
        let frames = (0..n)
            .map(|i| frame(i as f64 * 0.02, Channel::Teleop, e as f64 + i as f64 * 0.01))
            .collect();
        d.episodes
            .push(Episode::new(frames, "peg_insert", StageStatus::default(), format!("demo:{e}")).unwrap());
    }
    d
}

fn strictly_increasing(frames: &[Frame]) -> bool {
    frames.windows(2).all(|w| w[1].t > w[0].t)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Randomised deployments feed the fine-tuning schedule. Whatever they
    /// do, only teleop frames end up in clips, the base data survives
    /// untouched, and fine-tuning fires once per `k` clips.
    #[test]
    fn clip_schedule(
        sizes in prop::collection::vec(2usize..6, 1..4),
        h in 1usize..4,
        k in 1usize..4,
        n in 1usize..4,
        budget in 1usize..6,
        p_clip in prop::sample::select(vec![0.0, 0.3, 0.7, 1.0]),
        seed in any::<u64>(),
    ) {
        let d0 = base_dataset(&sizes);
        let d0_before = d0.clone();
        let bc = BcConfig { k: 1, h, ..BcConfig::default() };
        let pi0 = train_base(&d0, &bc, &fixtures::scara4()).unwrap();
        let cfg = HilConfig { k, n, rollout_budget: budget, seed, ..HilConfig::default() };
        let mut log = HilLog::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (policy, merged, used) = hil_loop(&d0, &pi0, &cfg, &mut log, |_, s, i, rec: &mut ClipRecorder| {
            if rng.random_bool(p_clip) {
                rec.begin("peg_insert", ClipReason::Failure, 1.0, ControlMode::Teleop, 0.0, format!("s{s}")).unwrap();
                let mut t = 0.0;
                for _ in 0..rng.random_range(1..6) {
                    // occasionally repeat a timestamp, which must be refused
                    if rng.random_bool(0.8) {
                        t += 0.02;
                    }
                    let ch = if rng.random_bool(0.3) { Channel::Policy } else { Channel::Teleop };
                    match rec.append(frame(t, ch, rng.random_range(-1.0..1.0))) {
                        Err(RecorderError::WrongChannel | RecorderError::NonMonotonicTimestamp { .. }) => {}
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
                seed: s,
                intervention: None,
                takeover_t: None,
                clip_frames: 0,
                status: StageStatus::default(),
                t_end: 0.0,
            })
        })
        .unwrap();

        prop_assert!(used.iter().all(|c| c.frames.iter().all(|f| f.active_channel == Channel::Teleop)));
        prop_assert!(used.iter().all(|c| strictly_increasing(&c.frames)));
        prop_assert_eq!(&d0, &d0_before);
        prop_assert_eq!(&merged.episodes, &d0.episodes);
        prop_assert_eq!(&merged.clips, &used);
        prop_assert_eq!(used.len() % k, 0);
        prop_assert_eq!(log.finetunes.len(), used.len() / k);
        prop_assert!(log.finetunes.iter().all(|f| f.clips == k));
        prop_assert_eq!(log.buffer_after_finetune.len(), log.finetunes.len());
        prop_assert!(log.buffer_after_finetune.iter().all(|&b| b == 0));
        if used.is_empty() {
            prop_assert_eq!(&policy, &pi0);
        }
        // base pairs are kept in place
        prop_assert!(policy.len() >= pi0.len());
        for i in 0..pi0.len() {
            prop_assert_eq!(policy.pair(i), pi0.pair(i));
        }
    }

    #[test]
    fn policy_is_deterministic_and_within_limits(
        sizes in prop::collection::vec(2usize..30, 1..4),
        h in 1usize..12,
        k in 1usize..4,
        residual in any::<bool>(),
        query in prop::array::uniform5(-20.0f64..20.0),
    ) {
        let chain = fixtures::scara4();
        let d = base_dataset(&sizes);
        let bc = BcConfig { k, h, residual };
        let a = train_base(&d, &bc, &chain).unwrap();
        let b = train_base(&d, &bc, &chain).unwrap();
        prop_assert_eq!(&a, &b);
        let obs = Observation::new(query.to_vec());
        let chunk = a.predict(&obs).unwrap();
        prop_assert_eq!(&chunk, &b.predict(&obs).unwrap());
        prop_assert_eq!(chunk.horizon(), h);
        for i in 0..chunk.horizon() {
            let (q, g) = chunk.step(i);
            prop_assert!(chain.within_limits(&q, 0.0));
            prop_assert!((0.0..=1.0).contains(&g));
        }
    }
}

/// A real supervised run on a small configuration.
#[test]
fn supervised_run_records_expert_clips() {
    let mut cfg = ExperimentConfig::default();
    cfg.demos = 5;
    cfg.hil.k = 2;
    cfg.hil.n = 1;
    let setup = cfg.setup().unwrap();
    let d0 = collect_demos(&setup, &cfg.expert, cfg.demos, cfg.seed).unwrap();
    let pi0 = train_base(&d0, &cfg.bc, &setup.session.chains.follower).unwrap();
    let run = run_hil(&d0, &pi0, &cfg.expert, &cfg.hil, &setup).unwrap();
    assert_eq!(run.clips.len(), 2);
    assert_eq!(run.log.finetunes.len(), 1);
    for ep in &d0.episodes {
        assert!(strictly_increasing(&ep.frames));
    }
    for clip in &run.clips {
        assert!(clip.frames.iter().all(|f| f.active_channel == Channel::Teleop && f.mode == ControlMode::Teleop));
        assert!(strictly_increasing(&clip.frames));
        let rollout = run
            .log
            .rollouts
            .iter()
            .find(|r| clip.source == format!("hil:iter={}:seed={}", r.iteration, r.seed))
            .expect("clip comes from a logged rollout");
        assert_eq!(rollout.clip_frames, clip.frames.len());
        assert!(clip.wall_time <= rollout.t_end);
    }
    let again = run_hil(&d0, &pi0, &cfg.expert, &cfg.hil, &setup).unwrap();
    assert_eq!(again.policy, run.policy);
    assert_eq!(again.dataset, run.dataset);
    assert_eq!(again.log, run.log);
}
