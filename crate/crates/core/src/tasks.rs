//! Seeded toy manipulation worlds.
//!
//! Two tasks: sorting three coloured cubes into matching containers spread
//! over a wide region, and sliding a disk onto a pole with a millimetre of
//! clearance per side. Objects are kinematic. A grasp closes around the
//! nearest object; small lateral offsets give a clean grasp that centres the
//! object, larger ones a marginal grasp that slips after some transport
//! distance.

use nalgebra::{UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::Pose;

/// Gripper aperture below which the gripper counts as closed.
pub const CLOSED_BELOW: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TaskError {
    #[error("could not place objects without overlap after {attempts} attempts")]
    PlacementFailure { attempts: usize },
    #[error("invalid task descriptor field `{field}`: {reason}")]
    InvalidDescriptor { field: &'static str, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    CubeSort,
    PegInsert,
}

impl TaskKind {
    pub fn id(&self) -> &'static str {
        match self {
            TaskKind::CubeSort => "cube_sort",
            TaskKind::PegInsert => "peg_insert",
        }
    }

    pub fn from_id(s: &str) -> Option<Self> {
        match s {
            "cube_sort" => Some(TaskKind::CubeSort),
            "peg_insert" => Some(TaskKind::PegInsert),
            _ => None,
        }
    }
}

/// Axis-aligned rectangle on the table (m).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Rect {
    pub fn extent(&self) -> [f64; 2] {
        [self.max[0] - self.min[0], self.max[1] - self.min[1]]
    }

    pub fn center(&self) -> [f64; 2] {
        [(self.min[0] + self.max[0]) / 2.0, (self.min[1] + self.max[1]) / 2.0]
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.min[0] && x <= self.max[0] && y >= self.min[1] && y <= self.max[1]
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> [f64; 2] {
        [
            rng.random_range(self.min[0]..=self.max[0]),
            rng.random_range(self.min[1]..=self.max[1]),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraspModel {
    /// Largest lateral offset that still gives a clean grasp (m).
    pub g_tol: f64,
    /// Largest lateral offset that attaches at all (m).
    pub g_slip: f64,
    /// Gripper travel after which a marginal grasp lets go (m).
    pub d_slip: f64,
}

impl Default for GraspModel {
    fn default() -> Self {
        Self {
            g_tol: 0.004,
            g_slip: 0.009,
            d_slip: 0.15,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PegGeometry {
    /// Start of the line the pole is placed on.
    pub pole_start: [f64; 2],
    /// Unit direction of that line.
    pub pole_dir: [f64; 2],
    pub pole_span: f64,
    pub pole_radius: f64,
    pub pole_height: f64,
    pub disk_radius: f64,
    pub disk_thickness: f64,
    /// Lateral misalignment the chamfer on the hole still guides in.
    pub capture_radius: f64,
    /// A disk whose centre is below this height (and on the axis) is inserted.
    pub insert_plane: f64,
}

impl Default for PegGeometry {
    fn default() -> Self {
        Self {
            pole_start: [0.30, 0.12],
            pole_dir: [1.0, 0.0],
            pole_span: 0.03,
            pole_radius: 0.0068,
            pole_height: 0.06,
            disk_radius: 0.025,
            disk_thickness: 0.01,
            capture_radius: 0.003,
            insert_plane: 0.03,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SortGeometry {
    pub cubes: usize,
    pub cube_size: f64,
    pub container_size: f64,
    /// Minimum distance between any two object or container centres.
    pub separation: f64,
}

impl Default for SortGeometry {
    fn default() -> Self {
        Self {
            cubes: 3,
            cube_size: 0.04,
            container_size: 0.08,
            separation: 0.10,
        }
    }
}

/// Pick and place heights of the gripper centre (m).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Heights {
    pub hover: f64,
    pub carry: f64,
}

impl Default for Heights {
    fn default() -> Self {
        Self { hover: 0.06, carry: 0.11 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskDescriptor {
    pub kind: TaskKind,
    /// Where the movable objects (and, for sorting, the containers) are placed.
    pub region: Rect,
    /// Radial clearance between the disk hole and the pole (m).
    #[serde(default = "default_clearance")]
    pub clearance: f64,
    #[serde(default)]
    pub grasp: GraspModel,
    #[serde(default)]
    pub peg: PegGeometry,
    #[serde(default)]
    pub sort: SortGeometry,
    #[serde(default)]
    pub heights: Heights,
    /// Follower end-effector start position.
    pub home: [f64; 3],
    /// Rollout length budget (s).
    pub time_limit: f64,
}

fn default_clearance() -> f64 {
    0.001
}

impl TaskDescriptor {
    pub fn peg_insert() -> Self {
        Self {
            kind: TaskKind::PegInsert,
            region: Rect {
                min: [0.28, -0.17],
                max: [0.36, -0.09],
            },
            clearance: default_clearance(),
            grasp: GraspModel::default(),
            peg: PegGeometry::default(),
            sort: SortGeometry::default(),
            heights: Heights::default(),
            home: [0.32, -0.02, 0.11],
            time_limit: 14.0,
        }
    }

    pub fn cube_sort() -> Self {
        Self {
            kind: TaskKind::CubeSort,
            region: Rect {
                min: [0.15, -0.175],
                max: [0.60, 0.175],
            },
            clearance: default_clearance(),
            grasp: GraspModel::default(),
            peg: PegGeometry::default(),
            sort: SortGeometry::default(),
            heights: Heights::default(),
            home: [0.35, 0.0, 0.11],
            time_limit: 30.0,
        }
    }

    pub fn for_kind(kind: TaskKind) -> Self {
        match kind {
            TaskKind::CubeSort => Self::cube_sort(),
            TaskKind::PegInsert => Self::peg_insert(),
        }
    }

    pub fn validate(&self) -> Result<(), TaskError> {
        let bad = |field, reason: &str| {
            Err(TaskError::InvalidDescriptor {
                field,
                reason: reason.to_string(),
            })
        };
        let [w, h] = self.region.extent();
        if !(w > 0.0 && h > 0.0) {
            return bad("region", "extents must be positive");
        }
        if !(self.clearance > 0.0) {
            return bad("clearance", "must be positive");
        }
        let g = &self.grasp;
        if !(g.g_tol > 0.0 && g.g_tol < g.g_slip && g.d_slip > 0.0) {
            return bad("grasp", "need 0 < g_tol < g_slip and d_slip > 0");
        }
        if !(self.time_limit > 0.0) {
            return bad("time_limit", "must be positive");
        }
        let p = &self.peg;
        let dir_norm = Vector2::new(p.pole_dir[0], p.pole_dir[1]).norm();
        if (dir_norm - 1.0).abs() > 1e-9 {
            return bad("peg.pole_dir", "must be a unit vector");
        }
        if !(p.capture_radius >= self.clearance && p.insert_plane < p.pole_height) {
            return bad("peg", "capture radius below clearance or insert plane above pole top");
        }
        if self.kind == TaskKind::CubeSort && self.sort.cubes == 0 {
            return bad("sort.cubes", "need at least one cube");
        }
        Ok(())
    }

    /// Names of the two evaluation stages.
    pub fn stages(&self) -> [&'static str; 2] {
        match self.kind {
            TaskKind::CubeSort => ["grasp first cube", "all cubes sorted"],
            TaskKind::PegInsert => ["grasp disk", "disk inserted"],
        }
    }

    pub fn object_count(&self) -> usize {
        match self.kind {
            TaskKind::CubeSort => self.sort.cubes,
            TaskKind::PegInsert => 1,
        }
    }

    pub fn goal_count(&self) -> usize {
        self.object_count()
    }

    pub fn object_half_height(&self) -> f64 {
        match self.kind {
            TaskKind::CubeSort => self.sort.cube_size / 2.0,
            TaskKind::PegInsert => self.peg.disk_thickness / 2.0,
        }
    }

    /// Disk hole radius.
    pub fn hole_radius(&self) -> f64 {
        self.peg.pole_radius + self.clearance
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldObject {
    pub id: usize,
    /// Colour class (sorting) or 0.
    pub class: usize,
    pub pose: Pose,
    pub attached: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fixture {
    pub id: usize,
    pub class: usize,
    /// Container centre on the table, or the pole's top centre.
    pub pose: Pose,
    /// Full size along x, y, z (m).
    pub extent: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grip {
    pub object: usize,
    /// Object position minus gripper position at the moment of the grasp.
    pub offset: Vector3<f64>,
    pub clean: bool,
    /// Gripper path length since the grasp (m).
    pub travelled: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GripperState {
    pub pose: Pose,
    /// 1 open, 0 closed.
    pub aperture: f64,
    pub held_object: Option<usize>,
    pub grip: Option<Grip>,
}

impl GripperState {
    pub fn is_closed(&self) -> bool {
        self.aperture < CLOSED_BELOW
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum WorldEvent {
    Grasped { object: usize, offset: f64, clean: bool },
    /// Gripper closed with no object inside `g_slip`; `offset` is the lateral
    /// distance to the nearest object at grasp height (infinite if none).
    Missed { offset: f64 },
    Slipped { object: usize },
    Released { object: usize },
    Threaded,
    Jammed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub objects: Vec<WorldObject>,
    pub fixtures: Vec<Fixture>,
    pub gripper: GripperState,
    pub rng_seed: u64,
    pub t: f64,
    /// Target object has been grasped at some point.
    pub stage1_latched: bool,
    /// Disk is guided by the pole.
    pub threaded: bool,
    /// Events raised by the most recent step.
    pub events: Vec<WorldEvent>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageStatus {
    pub stage1: bool,
    pub stage2: bool,
    pub done: bool,
}

fn table_pose(x: f64, y: f64, z: f64) -> Pose {
    Pose::new(Vector3::new(x, y, z), UnitQuaternion::identity())
}

/// Pole position along its placement line for a seed, in `[0, span]`.
pub fn pole_offset(ws: &WorldState, desc: &TaskDescriptor) -> f64 {
    let p = ws.fixtures[0].pose.position;
    (p.x - desc.peg.pole_start[0]) * desc.peg.pole_dir[0] + (p.y - desc.peg.pole_start[1]) * desc.peg.pole_dir[1]
}

const PLACEMENT_TRIES: usize = 200;
const PLACEMENT_RESTARTS: usize = 200;

pub fn reset(desc: &TaskDescriptor, seed: u64) -> Result<WorldState, TaskError> {
    desc.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (objects, fixtures) = match desc.kind {
        TaskKind::PegInsert => {
            let [x, y] = desc.region.sample(&mut rng);
            let disk = WorldObject {
                id: 0,
                class: 0,
                pose: table_pose(x, y, desc.peg.disk_thickness / 2.0),
                attached: false,
            };
            let s = rng.random_range(0.0..=desc.peg.pole_span);
            let p = &desc.peg;
            let pole = Fixture {
                id: 0,
                class: 0,
                pose: table_pose(
                    p.pole_start[0] + s * p.pole_dir[0],
                    p.pole_start[1] + s * p.pole_dir[1],
                    p.pole_height,
                ),
                extent: [2.0 * p.pole_radius, 2.0 * p.pole_radius, p.pole_height],
            };
            (vec![disk], vec![pole])
        }
        TaskKind::CubeSort => place_sort(desc, &mut rng)?,
    };
    let h = desc.home;
    Ok(WorldState {
        objects,
        fixtures,
        gripper: GripperState {
            pose: table_pose(h[0], h[1], h[2]),
            aperture: 1.0,
            held_object: None,
            grip: None,
        },
        rng_seed: seed,
        t: 0.0,
        stage1_latched: false,
        threaded: false,
        events: Vec::new(),
    })
}

fn place_sort(desc: &TaskDescriptor, rng: &mut ChaCha8Rng) -> Result<(Vec<WorldObject>, Vec<Fixture>), TaskError> {
    let n = desc.sort.cubes;
    let sep2 = desc.sort.separation * desc.sort.separation;
    let mut attempts = 0;
    'restart: for _ in 0..PLACEMENT_RESTARTS {
        let mut pts: Vec<[f64; 2]> = Vec::with_capacity(2 * n);
        for _ in 0..2 * n {
            let mut placed = false;
            for _ in 0..PLACEMENT_TRIES {
                attempts += 1;
                let c = desc.region.sample(rng);
                let clear = pts
                    .iter()
                    .all(|p| (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) >= sep2);
                if clear {
                    pts.push(c);
                    placed = true;
                    break;
                }
            }
            if !placed {
                continue 'restart;
            }
        }
        let half = desc.sort.cube_size / 2.0;
        let cubes = (0..n)
            .map(|i| WorldObject {
                id: i,
                class: i,
                pose: table_pose(pts[i][0], pts[i][1], half),
                attached: false,
            })
            .collect();
        let s = desc.sort.container_size;
        let containers = (0..n)
            .map(|i| Fixture {
                id: i,
                class: i,
                pose: table_pose(pts[n + i][0], pts[n + i][1], 0.0),
                extent: [s, s, 0.01],
            })
            .collect();
        return Ok((cubes, containers));
    }
    Err(TaskError::PlacementFailure { attempts })
}

pub(crate) fn lateral(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    ((a.x - b.x).powi(2) + (a.y - b.y).powi(2)).sqrt()
}

/// Where the pole blocks a disk centred at `p` (not threaded).
fn pole_contact(desc: &TaskDescriptor, ws: &WorldState, p: &Vector3<f64>) -> Option<f64> {
    if desc.kind != TaskKind::PegInsert {
        return None;
    }
    let pole = &ws.fixtures[0].pose.position;
    let d = lateral(p, pole);
    (d < desc.peg.disk_radius + desc.peg.pole_radius).then_some(d)
}

fn rest_height(desc: &TaskDescriptor) -> f64 {
    desc.object_half_height()
}

/// Height at which the disk sits on top of the pole.
pub fn pole_top_rest(desc: &TaskDescriptor) -> f64 {
    desc.peg.pole_height + desc.peg.disk_thickness / 2.0
}

/// Lets a free object fall from its current position. Returns true if a disk
/// slid down the pole.
fn settle(desc: &TaskDescriptor, ws: &mut WorldState, id: usize) -> bool {
    let p = ws.objects[id].pose.position;
    let mut z = rest_height(desc);
    let mut inserted = false;
    if desc.kind == TaskKind::PegInsert {
        let pole = ws.fixtures[0].pose.position;
        if ws.threaded {
            ws.objects[id].pose.position.x = pole.x;
            ws.objects[id].pose.position.y = pole.y;
            inserted = true;
        } else if let Some(d) = pole_contact(desc, ws, &p) {
            if p.z >= pole_top_rest(desc) - 1e-9 && d <= desc.peg.capture_radius {
                ws.objects[id].pose.position.x = pole.x;
                ws.objects[id].pose.position.y = pole.y;
                ws.threaded = true;
                inserted = true;
            } else {
                z = pole_top_rest(desc);
            }
        }
    }
    ws.objects[id].pose.position.z = z;
    inserted
}

/// Functional wrapper over [`advance`].
pub fn step_world(ws: &WorldState, desc: &TaskDescriptor, ee: &Pose, gripper_cmd: f64, dt: f64) -> WorldState {
    let mut next = ws.clone();
    advance(&mut next, desc, ee, gripper_cmd, dt);
    next
}

/// Moves the gripper to `ee`, applies the gripper command and updates held and
/// falling objects.
pub fn advance(ws: &mut WorldState, desc: &TaskDescriptor, ee: &Pose, gripper_cmd: f64, dt: f64) {
    debug_assert!(dt > 0.0);
    ws.events.clear();
    let was_closed = ws.gripper.is_closed();
    let prev = ws.gripper.pose.position;
    ws.gripper.pose = *ee;
    ws.gripper.aperture = gripper_cmd.clamp(0.0, 1.0);
    ws.t += dt;
    let now_closed = ws.gripper.is_closed();
    let moved = (ee.position - prev).norm();

    if was_closed && !now_closed {
        if let Some(grip) = ws.gripper.grip.take() {
            drop_held(ws, grip.object);
            ws.events.push(WorldEvent::Released { object: grip.object });
            settle(desc, ws, grip.object);
        }
    }
    if !was_closed && now_closed {
        try_grasp(ws, desc);
    }
    if ws.gripper.grip.is_some() {
        carry(ws, desc, moved);
    }
}

fn try_grasp(ws: &mut WorldState, desc: &TaskDescriptor) {
    let ee = ws.gripper.pose.position;
    let band = desc.object_half_height() + 0.005;
    let mut best: Option<(usize, f64)> = None;
    for obj in &ws.objects {
        if obj.attached || (obj.pose.position.z - ee.z).abs() > band {
            continue;
        }
        let d = lateral(&obj.pose.position, &ee);
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((obj.id, d));
        }
    }
    let g = &desc.grasp;
    match best {
        Some((id, d)) if d <= g.g_slip => {
            let clean = d <= g.g_tol;
            let offset = if clean {
                ws.objects[id].pose.position.x = ee.x;
                ws.objects[id].pose.position.y = ee.y;
                Vector3::new(0.0, 0.0, ws.objects[id].pose.position.z - ee.z)
            } else {
                ws.objects[id].pose.position - ee
            };
            ws.objects[id].attached = true;
            ws.gripper.held_object = Some(id);
            ws.gripper.grip = Some(Grip {
                object: id,
                offset,
                clean,
                travelled: 0.0,
            });
            if id == 0 {
                ws.stage1_latched = true;
            }
            ws.events.push(WorldEvent::Grasped { object: id, offset: d, clean });
        }
        Some((_, d)) => ws.events.push(WorldEvent::Missed { offset: d }),
        None => ws.events.push(WorldEvent::Missed { offset: f64::INFINITY }),
    }
}

fn carry(ws: &mut WorldState, desc: &TaskDescriptor, moved: f64) {
    let ee = ws.gripper.pose.position;
    let Some(mut grip) = ws.gripper.grip.clone() else {
        return;
    };
    grip.travelled += moved;
    let id = grip.object;
    if !grip.clean && grip.travelled > desc.grasp.d_slip {
        drop_held(ws, id);
        ws.events.push(WorldEvent::Slipped { object: id });
        settle(desc, ws, id);
        return;
    }
    let prev = ws.objects[id].pose.position;
    let mut p = ee + grip.offset;

    if desc.kind == TaskKind::PegInsert {
        let pole = ws.fixtures[0].pose.position;
        let top = pole_top_rest(desc);
        if ws.threaded {
            if p.z >= top {
                ws.threaded = false;
            } else if lateral(&ee, &pole) > desc.peg.disk_radius {
                // wrenched sideways out of the grip; the disk stays on the pole
                drop_held(ws, id);
                ws.events.push(WorldEvent::Slipped { object: id });
                settle(desc, ws, id);
                return;
            } else {
                p.x = pole.x;
                p.y = pole.y;
            }
        }
        if !ws.threaded {
            if let Some(d) = pole_contact(desc, ws, &p) {
                if p.z < top {
                    let crossing = prev.z >= top - 1e-9;
                    if crossing && d <= desc.peg.capture_radius {
                        ws.threaded = true;
                        ws.events.push(WorldEvent::Threaded);
                        p.x = pole.x;
                        p.y = pole.y;
                        grip.offset.x = pole.x - ee.x;
                        grip.offset.y = pole.y - ee.y;
                    } else {
                        if crossing {
                            ws.events.push(WorldEvent::Jammed);
                        }
                        p.z = top;
                    }
                }
            }
        }
    }
    p.z = p.z.max(rest_height(desc));
    ws.objects[id].pose.position = p;
    ws.gripper.grip = Some(grip);
}

fn drop_held(ws: &mut WorldState, id: usize) {
    ws.gripper.grip = None;
    ws.gripper.held_object = None;
    ws.objects[id].attached = false;
}

/// Lateral distance from the disk centre to the pole axis.
pub fn disk_axis_offset(ws: &WorldState) -> f64 {
    lateral(&ws.objects[0].pose.position, &ws.fixtures[0].pose.position)
}

pub fn disk_inserted(ws: &WorldState, desc: &TaskDescriptor) -> bool {
    disk_axis_offset(ws) <= desc.clearance && ws.objects[0].pose.position.z < desc.peg.insert_plane
}

fn in_container(obj: &WorldObject, c: &Fixture) -> bool {
    let p = obj.pose.position;
    let q = c.pose.position;
    (p.x - q.x).abs() <= c.extent[0] / 2.0 && (p.y - q.y).abs() <= c.extent[1] / 2.0
}

/// Index of the container an object currently lies in, if any.
pub fn container_under(ws: &WorldState, obj: &WorldObject) -> Option<usize> {
    ws.fixtures.iter().position(|c| in_container(obj, c))
}

pub fn check_stage(ws: &WorldState, desc: &TaskDescriptor) -> StageStatus {
    match desc.kind {
        TaskKind::PegInsert => {
            let stage2 = disk_inserted(ws, desc);
            StageStatus {
                stage1: ws.stage1_latched,
                stage2,
                done: stage2 && ws.gripper.held_object.is_none(),
            }
        }
        TaskKind::CubeSort => {
            let sorted = ws.objects.iter().all(|o| {
                !o.attached
                    && ws
                        .fixtures
                        .iter()
                        .any(|c| c.class == o.class && in_container(o, c))
            });
            StageStatus {
                stage1: ws.stage1_latched,
                stage2: sorted,
                done: sorted,
            }
        }
    }
}

/// True when a held cube is being lowered over a container of another colour.
pub fn wrong_placement_imminent(ws: &WorldState, desc: &TaskDescriptor) -> bool {
    if desc.kind != TaskKind::CubeSort {
        return false;
    }
    let Some(id) = ws.gripper.held_object else {
        return false;
    };
    let obj = &ws.objects[id];
    let low = ws.gripper.pose.position.z < desc.heights.carry - 0.02;
    low && ws
        .fixtures
        .iter()
        .any(|c| c.class != obj.class && in_container(obj, c))
}

/// Where each object has to end up: container centre or pole top.
pub fn goal_positions(ws: &WorldState, desc: &TaskDescriptor) -> Vec<Vector3<f64>> {
    match desc.kind {
        TaskKind::PegInsert => vec![ws.fixtures[0].pose.position],
        TaskKind::CubeSort => ws
            .objects
            .iter()
            .map(|o| {
                ws.fixtures
                    .iter()
                    .find(|c| c.class == o.class)
                    .map(|c| c.pose.position)
                    .unwrap_or_else(Vector3::zeros)
            })
            .collect(),
    }
}

/// Whether object `id` already sits where it belongs.
pub fn object_placed(ws: &WorldState, desc: &TaskDescriptor, id: usize) -> bool {
    let obj = &ws.objects[id];
    if obj.attached {
        return false;
    }
    match desc.kind {
        TaskKind::PegInsert => disk_inserted(ws, desc),
        TaskKind::CubeSort => ws
            .fixtures
            .iter()
            .any(|c| c.class == obj.class && in_container(obj, c)),
    }
}

/// Canonical post-grasp state used to score the second stage on its own: the
/// target object held cleanly at carry height above where it was placed.
pub fn reposition_for_stage2(ws: &WorldState, desc: &TaskDescriptor) -> WorldState {
    let mut out = ws.clone();
    for o in &mut out.objects {
        o.attached = false;
    }
    let obj = out.objects[0].pose.position;
    let ee = Vector3::new(obj.x, obj.y, desc.heights.carry);
    out.objects[0].pose.position = ee;
    out.objects[0].attached = true;
    out.threaded = false;
    out.gripper = GripperState {
        pose: Pose::from_position(ee),
        aperture: 0.0,
        held_object: Some(0),
        grip: Some(Grip {
            object: 0,
            offset: Vector3::zeros(),
            clean: true,
            travelled: 0.0,
        }),
    };
    out.stage1_latched = true;
    out.events.clear();
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pose(x: f64, y: f64, z: f64) -> Pose {
        table_pose(x, y, z)
    }

    fn peg() -> (TaskDescriptor, WorldState) {
        let d = TaskDescriptor::peg_insert();
        let ws = reset(&d, 3).unwrap();
        (d, ws)
    }

    fn grasp_at(d: &TaskDescriptor, ws: &mut WorldState, offset: f64) {
        let p = ws.objects[0].pose.position;
        advance(ws, d, &pose(p.x + offset, p.y, p.z), 1.0, 0.002);
        advance(ws, d, &pose(p.x + offset, p.y, p.z), 0.0, 0.002);
    }

    #[test]
    fn reset_is_deterministic() {
        for d in [TaskDescriptor::peg_insert(), TaskDescriptor::cube_sort()] {
            assert_eq!(reset(&d, 42).unwrap(), reset(&d, 42).unwrap());
            assert_ne!(reset(&d, 42).unwrap(), reset(&d, 43).unwrap());
        }
    }

    #[test]
    fn sort_region_matches_declared_size() {
        let d = TaskDescriptor::cube_sort();
        let [w, h] = d.region.extent();
        assert!((w - 0.45).abs() < 1e-12 && (h - 0.35).abs() < 1e-12);
    }

    #[test]
    fn clean_grasp_centres_object() {
        let (d, mut ws) = peg();
        grasp_at(&d, &mut ws, 0.002);
        let grip = ws.gripper.grip.as_ref().unwrap();
        assert!(grip.clean);
        assert!(ws.stage1_latched);
        assert!(lateral(&ws.objects[0].pose.position, &ws.gripper.pose.position) < 1e-12);
    }

    #[test]
    fn grasp_outside_slip_bound_misses() {
        let (d, mut ws) = peg();
        grasp_at(&d, &mut ws, d.grasp.g_slip + 1e-4);
        assert!(ws.gripper.held_object.is_none());
        assert!(matches!(ws.events[..], [WorldEvent::Missed { .. }]));
        assert!(!check_stage(&ws, &d).stage1);
    }

    #[test]
    fn marginal_grasp_slips_in_transit() {
        let (d, mut ws) = peg();
        let off = (d.grasp.g_tol + d.grasp.g_slip) / 2.0;
        grasp_at(&d, &mut ws, off);
        assert!(!ws.gripper.grip.as_ref().unwrap().clean);
        let start = ws.gripper.pose.position;
        let mut slipped_at = None;
        for k in 1..=200 {
            let p = start + Vector3::new(0.0, 0.001 * k as f64, 0.0);
            advance(&mut ws, &d, &pose(p.x, p.y, p.z), 0.0, 0.002);
            if ws.events.contains(&WorldEvent::Slipped { object: 0 }) {
                slipped_at = Some(0.001 * k as f64);
                break;
            }
        }
        let s = slipped_at.expect("object never slipped");
        assert!(s > d.grasp.d_slip && s <= d.grasp.d_slip + 0.001 + 1e-12);
        assert!(ws.gripper.held_object.is_none());
        assert!((ws.objects[0].pose.position.z - d.peg.disk_thickness / 2.0).abs() < 1e-12);
    }

    fn lower_onto_pole(d: &TaskDescriptor, ws: &mut WorldState, dx: f64) {
        let pole = ws.fixtures[0].pose.position;
        let x = pole.x + dx;
        // hold the disk cleanly above the pole and descend
        *ws = reposition_for_stage2(ws, d);
        for k in 0..=100 {
            let z = 0.09 - 0.0008 * k as f64;
            advance(ws, d, &pose(x, pole.y, z), 0.0, 0.002);
        }
    }

    #[test]
    fn aligned_descent_threads_and_inserts() {
        let (d, mut ws) = peg();
        lower_onto_pole(&d, &mut ws, 0.002);
        assert!(ws.threaded);
        assert!(check_stage(&ws, &d).stage2);
        assert!(!check_stage(&ws, &d).done);
        let p = ws.gripper.pose;
        advance(&mut ws, &d, &p, 1.0, 0.002);
        assert!(check_stage(&ws, &d).done);
        assert!((ws.objects[0].pose.position.z - d.peg.disk_thickness / 2.0).abs() < 1e-12);
    }

    #[test]
    fn misaligned_descent_jams() {
        let (d, mut ws) = peg();
        lower_onto_pole(&d, &mut ws, 0.006);
        assert!(!ws.threaded);
        assert!((ws.objects[0].pose.position.z - pole_top_rest(&d)).abs() < 1e-12);
        assert!(!check_stage(&ws, &d).stage2);
    }

    #[test]
    fn clearance_predicate() {
        let (d, mut ws) = peg();
        let pole = ws.fixtures[0].pose.position;
        ws.objects[0].pose.position = Vector3::new(pole.x + 0.0009, pole.y, 0.005);
        assert!(check_stage(&ws, &d).stage2);
        ws.objects[0].pose.position = Vector3::new(pole.x + 0.0012, pole.y, 0.005);
        assert!(!check_stage(&ws, &d).stage2);
    }

    #[test]
    fn wrong_container_is_not_done() {
        let d = TaskDescriptor::cube_sort();
        let mut ws = reset(&d, 5).unwrap();
        for i in 0..3 {
            let c = ws.fixtures[i].pose.position;
            ws.objects[i].pose.position = Vector3::new(c.x, c.y, 0.02);
        }
        assert!(check_stage(&ws, &d).done);
        let c = ws.fixtures[1].pose.position;
        ws.objects[0].pose.position = Vector3::new(c.x + 0.01, c.y, 0.02);
        assert!(!check_stage(&ws, &d).done);
    }

    #[test]
    fn never_two_held_objects() {
        let d = TaskDescriptor::cube_sort();
        let mut ws = reset(&d, 9).unwrap();
        let a = ws.objects[0].pose.position;
        advance(&mut ws, &d, &pose(a.x, a.y, a.z), 0.0, 0.002);
        assert_eq!(ws.gripper.held_object, Some(0));
        let b = ws.objects[1].pose.position;
        // still closed: moving over another cube grabs nothing new
        advance(&mut ws, &d, &pose(b.x, b.y, b.z), 0.0, 0.002);
        assert_eq!(ws.objects.iter().filter(|o| o.attached).count(), 1);
    }
}
