use nalgebra::{UnitQuaternion, Vector3};
use proptest::prelude::*;

use copilot_core::kinematics::Pose;
use copilot_core::tasks::{advance, check_stage, reset, TaskDescriptor};

fn task() -> impl Strategy<Value = TaskDescriptor> {
    prop::sample::select(vec![TaskDescriptor::peg_insert(), TaskDescriptor::cube_sort()])
}

/// One operator move: go to object `target` (or a fixture when out of
/// range), offset by `dx, dy`, at one of three heights, with a gripper
/// command.
#[derive(Debug, Clone)]
struct Move {
    target: usize,
    dx: f64,
    dy: f64,
    level: usize,
    gripper: f64,
}

fn moves() -> impl Strategy<Value = Vec<Move>> {
    prop::collection::vec(
        (0usize..5, -0.012f64..0.012, -0.012f64..0.012, 0usize..3, prop::sample::select(vec![0.0, 0.3, 1.0])).prop_map(
            |(target, dx, dy, level, gripper)| Move {
                target,
                dx,
                dy,
                level,
                gripper,
            },
        ),
        1..25,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn reset_is_a_function_of_the_seed(d in task(), seed in any::<u64>()) {
        let a = reset(&d, seed).unwrap();
        prop_assert_eq!(&a, &reset(&d, seed).unwrap());
        prop_assert_ne!(a, reset(&d, seed.wrapping_add(1)).unwrap());
    }

    #[test]
    fn held_objects_and_stage_latch(d in task(), seed in 0u64..1000, plan in moves()) {
        let mut ws = reset(&d, seed).unwrap();
        let mut stage1 = false;
        let mut ee = ws.gripper.pose.position;
        for m in plan {
            let goal = match ws.objects.get(m.target) {
                Some(o) => o.pose.position,
                None => ws.fixtures[m.target % ws.fixtures.len()].pose.position,
            };
            let z = [goal.z, d.heights.hover, d.heights.carry][m.level];
            let goal = Vector3::new(goal.x + m.dx, goal.y + m.dy, z);
            for i in 1..=20 {
                let p = ee + (goal - ee) * (i as f64 / 20.0);
                advance(&mut ws, &d, &Pose::new(p, UnitQuaternion::identity()), m.gripper, 0.002);
                let held = ws.objects.iter().filter(|o| o.attached).count();
                prop_assert!(held <= 1);
                prop_assert_eq!(held == 1, ws.gripper.held_object.is_some());
                if let Some(id) = ws.gripper.held_object {
                    prop_assert!(ws.objects[id].attached);
                }
                let s = check_stage(&ws, &d);
                prop_assert!(s.stage1 || !stage1, "stage 1 unlatched");
                stage1 = s.stage1;
            }
            ee = goal;
        }
    }
}
