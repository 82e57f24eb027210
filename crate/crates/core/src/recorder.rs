//! Synchronized frame recording, the clip lifecycle for takeover segments,
//! and the on-disk dataset format.
//!
//! A dataset directory holds `header.json`, `manifest.json`, and one JSON
//! Lines file per episode (`episodes/NNNNNN.jsonl`) and per clip
//! (`clips/NNNNNN.jsonl`). Each line file starts with a header record
//! followed by one frame per line. The manifest lists frame counts and the
//! SHA-256 of every file.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::copilot::ControlMode;
use crate::kinematics::{JointVector, Pose};
use crate::policy::Observation;
use crate::tasks::StageStatus;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum RecorderError {
    #[error("a clip is already open")]
    ClipAlreadyOpen,
    #[error("no clip is open")]
    NoOpenClip,
    #[error("clips can only be recorded in teleop mode")]
    WrongMode,
    #[error("frame at t={t} does not follow t={last}")]
    NonMonotonicTimestamp { last: f64, t: f64 },
    #[error("policy-channel frames cannot be part of a clip")]
    WrongChannel,
    #[error("clip has no frames; discarded")]
    EmptyClip,
    #[error("episode has no frames")]
    EmptyEpisode,
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("schema version {found} is not supported (expected {expected})")]
    SchemaVersionMismatch { found: u32, expected: u32 },
    #[error("corrupt record in {path} at byte {offset}: {reason}")]
    CorruptRecord { path: PathBuf, offset: u64, reason: String },
    #[error("{path} does not match its manifest entry: {reason}")]
    ManifestMismatch { path: PathBuf, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Teleop,
    Policy,
}

impl From<ControlMode> for Channel {
    fn from(m: ControlMode) -> Self {
        match m {
            ControlMode::Teleop => Channel::Teleop,
            ControlMode::Policy => Channel::Policy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub t: f64,
    pub mode: ControlMode,
    pub active_channel: Channel,
    pub leader_cmd_q: JointVector,
    pub leader_obs_q: JointVector,
    pub follower_cmd_q: JointVector,
    pub follower_obs_q: JointVector,
    pub follower_ee: Pose,
    /// Gripper command, 1 open and 0 closed.
    pub gripper: f64,
    /// Observation the commands were computed from.
    pub obs: Observation,
    /// Follower command of the channel that was not forwarded, when computed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inactive_follower_cmd: Option<JointVector>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClipReason {
    Failure,
    Deviation,
    Timeout,
    Manual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clip {
    pub frames: Vec<Frame>,
    pub task_id: String,
    pub alpha_used: f64,
    pub start_reason: ClipReason,
    /// Time the takeover began (s, session clock).
    pub start_t: f64,
    /// Duration of the takeover (s).
    pub wall_time: f64,
    /// Where the clip came from, e.g. `hil:iter=0:seed=1000`.
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub frames: Vec<Frame>,
    pub task_id: String,
    pub outcome: StageStatus,
    pub wall_time: f64,
    pub source: String,
}

impl Episode {
    pub fn new(frames: Vec<Frame>, task_id: &str, outcome: StageStatus, source: String) -> Result<Self, RecorderError> {
        let (Some(first), Some(last)) = (frames.first(), frames.last()) else {
            return Err(RecorderError::EmptyEpisode);
        };
        check_increasing(&frames)?;
        let wall_time = last.t - first.t;
        Ok(Self {
            frames,
            task_id: task_id.to_string(),
            outcome,
            wall_time,
            source,
        })
    }
}

fn check_increasing(frames: &[Frame]) -> Result<(), RecorderError> {
    for w in frames.windows(2) {
        if !(w[1].t > w[0].t) {
            return Err(RecorderError::NonMonotonicTimestamp { last: w[0].t, t: w[1].t });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub schema_version: u32,
    pub leader_chain: String,
    pub follower_chain: String,
    pub task_id: String,
    pub alpha: f64,
    pub obs_dim: usize,
    pub follower_dof: usize,
    /// Interval between recorded frames (s).
    pub record_dt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub episodes: Vec<Episode>,
    pub clips: Vec<Clip>,
}

impl Dataset {
    pub fn new(header: DatasetHeader) -> Self {
        Self {
            header,
            episodes: Vec::new(),
            clips: Vec::new(),
        }
    }

    pub fn frame_count(&self) -> usize {
        self.episodes.iter().map(|e| e.frames.len()).sum::<usize>()
            + self.clips.iter().map(|c| c.frames.len()).sum::<usize>()
    }

    pub fn is_empty(&self) -> bool {
        self.frame_count() == 0
    }

    /// Frame sequences in dataset order: episodes, then clips.
    pub fn segments(&self) -> impl Iterator<Item = &[Frame]> {
        self.episodes
            .iter()
            .map(|e| e.frames.as_slice())
            .chain(self.clips.iter().map(|c| c.frames.as_slice()))
    }
}

/// D = D0 followed by `clips` in the given (chronological) order. `d0` is
/// left untouched.
pub fn merge_dataset(d0: &Dataset, clips: &[Clip]) -> Dataset {
    let mut out = d0.clone();
    out.clips.extend_from_slice(clips);
    out
}

#[derive(Debug)]
struct OpenClip {
    task_id: String,
    reason: ClipReason,
    alpha: f64,
    start_t: f64,
    source: String,
    frames: Vec<Frame>,
}

/// Owns at most one open clip and the buffer of sealed clips.
#[derive(Debug, Default)]
pub struct ClipRecorder {
    open: Option<OpenClip>,
    buffer: Vec<Clip>,
}

impl ClipRecorder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_open(&self) -> bool {
        self.open.is_some()
    }

    pub fn open_len(&self) -> usize {
        self.open.as_ref().map_or(0, |c| c.frames.len())
    }

    pub fn begin(
        &mut self,
        task_id: &str,
        reason: ClipReason,
        alpha: f64,
        mode: ControlMode,
        t: f64,
        source: String,
    ) -> Result<(), RecorderError> {
        if self.open.is_some() {
            return Err(RecorderError::ClipAlreadyOpen);
        }
        if mode != ControlMode::Teleop {
            return Err(RecorderError::WrongMode);
        }
        self.open = Some(OpenClip {
            task_id: task_id.to_string(),
            reason,
            alpha,
            start_t: t,
            source,
            frames: Vec::new(),
        });
        Ok(())
    }

    pub fn append(&mut self, frame: Frame) -> Result<(), RecorderError> {
        let clip = self.open.as_mut().ok_or(RecorderError::NoOpenClip)?;
        if frame.active_channel != Channel::Teleop {
            return Err(RecorderError::WrongChannel);
        }
        if let Some(last) = clip.frames.last() {
            if !(frame.t > last.t) {
                return Err(RecorderError::NonMonotonicTimestamp { last: last.t, t: frame.t });
            }
        }
        clip.frames.push(frame);
        Ok(())
    }

    /// Seals the open clip into the buffer. An empty clip is discarded.
    pub fn end(&mut self) -> Result<&Clip, RecorderError> {
        let open = self.open.take().ok_or(RecorderError::NoOpenClip)?;
        let Some(last) = open.frames.last() else {
            log::warn!("discarding empty clip ({:?}) started at t={}", open.reason, open.start_t);
            return Err(RecorderError::EmptyClip);
        };
        let wall_time = last.t - open.start_t;
        self.buffer.push(Clip {
            frames: open.frames,
            task_id: open.task_id,
            alpha_used: open.alpha,
            start_reason: open.reason,
            start_t: open.start_t,
            wall_time,
            source: open.source,
        });
        Ok(self.buffer.last().expect("just pushed"))
    }

    pub fn buffer(&self) -> &[Clip] {
        &self.buffer
    }

    pub fn take_buffer(&mut self) -> Vec<Clip> {
        std::mem::take(&mut self.buffer)
    }
}

// ---------------------------------------------------------------------------
// storage

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub file: String,
    pub frames: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub header_sha256: String,
    pub episode_count: usize,
    pub clip_count: usize,
    pub frame_count: usize,
    pub episodes: Vec<FileEntry>,
    pub clips: Vec<FileEntry>,
}

impl Manifest {
    /// Hash over the manifest itself; identifies the dataset content.
    pub fn digest(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("manifest serializes").as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum SegmentMeta {
    Episode {
        outcome: StageStatus,
        wall_time: f64,
        source: String,
    },
    Clip {
        start_reason: ClipReason,
        alpha_used: f64,
        start_t: f64,
        wall_time: f64,
        source: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RecordHeader {
    schema_version: u32,
    leader_chain: String,
    follower_chain: String,
    task_id: String,
    alpha: f64,
    meta: SegmentMeta,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RecorderError + '_ {
    move |source| RecorderError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn to_line<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("records serialize")
}

fn segment_bytes(d: &Dataset, task_id: &str, meta: SegmentMeta, frames: &[Frame]) -> Vec<u8> {
    let header = RecordHeader {
        schema_version: SCHEMA_VERSION,
        leader_chain: d.header.leader_chain.clone(),
        follower_chain: d.header.follower_chain.clone(),
        task_id: task_id.to_string(),
        alpha: d.header.alpha,
        meta,
    };
    let mut out = to_line(&header).into_bytes();
    out.push(b'\n');
    for f in frames {
        out.extend_from_slice(to_line(f).as_bytes());
        out.push(b'\n');
    }
    out
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), RecorderError> {
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(bytes).map_err(io_err(path))?;
    f.sync_all().map_err(io_err(path))
}

/// Writes `d` under `dir` (created if missing) and returns the manifest.
pub fn write_dataset(d: &Dataset, dir: &Path) -> Result<Manifest, RecorderError> {
    for sub in ["episodes", "clips"] {
        let p = dir.join(sub);
        if p.exists() {
            fs::remove_dir_all(&p).map_err(io_err(&p))?;
        }
        fs::create_dir_all(&p).map_err(io_err(&p))?;
    }
    let header_bytes = serde_json::to_vec_pretty(&d.header).expect("header serializes");
    write_file(&dir.join("header.json"), &header_bytes)?;

    let mut episodes = Vec::new();
    for (i, e) in d.episodes.iter().enumerate() {
        let name = format!("episodes/{i:06}.jsonl");
        let meta = SegmentMeta::Episode {
            outcome: e.outcome,
            wall_time: e.wall_time,
            source: e.source.clone(),
        };
        let bytes = segment_bytes(d, &e.task_id, meta, &e.frames);
        write_file(&dir.join(&name), &bytes)?;
        episodes.push(FileEntry {
            file: name,
            frames: e.frames.len(),
            sha256: sha256_hex(&bytes),
        });
    }
    let mut clips = Vec::new();
    for (i, c) in d.clips.iter().enumerate() {
        let name = format!("clips/{i:06}.jsonl");
        let meta = SegmentMeta::Clip {
            start_reason: c.start_reason,
            alpha_used: c.alpha_used,
            start_t: c.start_t,
            wall_time: c.wall_time,
            source: c.source.clone(),
        };
        let bytes = segment_bytes(d, &c.task_id, meta, &c.frames);
        write_file(&dir.join(&name), &bytes)?;
        clips.push(FileEntry {
            file: name,
            frames: c.frames.len(),
            sha256: sha256_hex(&bytes),
        });
    }
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        header_sha256: sha256_hex(&header_bytes),
        episode_count: episodes.len(),
        clip_count: clips.len(),
        frame_count: d.frame_count(),
        episodes,
        clips,
    };
    let bytes = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    write_file(&dir.join("manifest.json"), &bytes)?;
    Ok(manifest)
}

fn check_version(found: u32) -> Result<(), RecorderError> {
    if found != SCHEMA_VERSION {
        return Err(RecorderError::SchemaVersionMismatch {
            found,
            expected: SCHEMA_VERSION,
        });
    }
    Ok(())
}

#[derive(Deserialize)]
struct VersionProbe {
    schema_version: u32,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<(T, Vec<u8>), RecorderError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let probe: VersionProbe = serde_json::from_slice(&bytes).map_err(|e| RecorderError::CorruptRecord {
        path: path.to_path_buf(),
        offset: 0,
        reason: e.to_string(),
    })?;
    check_version(probe.schema_version)?;
    let v = serde_json::from_slice(&bytes).map_err(|e| RecorderError::CorruptRecord {
        path: path.to_path_buf(),
        offset: 0,
        reason: e.to_string(),
    })?;
    Ok((v, bytes))
}

fn read_segment(path: &Path, entry: &FileEntry) -> Result<(RecordHeader, Vec<Frame>), RecorderError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let corrupt = |offset: usize, reason: String| RecorderError::CorruptRecord {
        path: path.to_path_buf(),
        offset: offset as u64,
        reason,
    };
    let mut header: Option<RecordHeader> = None;
    let mut frames = Vec::with_capacity(entry.frames);
    let mut offset = 0usize;
    while offset < bytes.len() {
        let Some(len) = bytes[offset..].iter().position(|&b| b == b'\n') else {
            return Err(corrupt(offset, "record not terminated by a newline".into()));
        };
        let line = &bytes[offset..offset + len];
        match &header {
            None => {
                let probe: VersionProbe =
                    serde_json::from_slice(line).map_err(|e| corrupt(offset, e.to_string()))?;
                check_version(probe.schema_version)?;
                header = Some(serde_json::from_slice(line).map_err(|e| corrupt(offset, e.to_string()))?);
            }
            Some(_) => frames.push(serde_json::from_slice(line).map_err(|e| corrupt(offset, e.to_string()))?),
        }
        offset += len + 1;
    }
    let header = header.ok_or_else(|| corrupt(0, "missing header record".into()))?;
    if frames.len() != entry.frames {
        return Err(corrupt(
            bytes.len(),
            format!("expected {} frames, found {}", entry.frames, frames.len()),
        ));
    }
    let digest = sha256_hex(&bytes);
    if digest != entry.sha256 {
        return Err(RecorderError::ManifestMismatch {
            path: path.to_path_buf(),
            reason: format!("sha256 {digest} != {}", entry.sha256),
        });
    }
    Ok((header, frames))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, RecorderError> {
    Ok(read_json(&dir.join("manifest.json"))?.0)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset, RecorderError> {
    let manifest = read_manifest(dir)?;
    let header_path = dir.join("header.json");
    let (header, header_bytes): (DatasetHeader, _) = read_json(&header_path)?;
    if sha256_hex(&header_bytes) != manifest.header_sha256 {
        return Err(RecorderError::ManifestMismatch {
            path: header_path,
            reason: "header hash differs".into(),
        });
    }
    let mut d = Dataset::new(header);
    for entry in &manifest.episodes {
        let path = dir.join(&entry.file);
        let (rh, frames) = read_segment(&path, entry)?;
        let SegmentMeta::Episode {
            outcome,
            wall_time,
            source,
        } = rh.meta
        else {
            return Err(RecorderError::CorruptRecord {
                path,
                offset: 0,
                reason: "expected an episode header".into(),
            });
        };
        d.episodes.push(Episode {
            frames,
            task_id: rh.task_id,
            outcome,
            wall_time,
            source,
        });
    }
    for entry in &manifest.clips {
        let path = dir.join(&entry.file);
        let (rh, frames) = read_segment(&path, entry)?;
        let SegmentMeta::Clip {
            start_reason,
            alpha_used,
            start_t,
            wall_time,
            source,
        } = rh.meta
        else {
            return Err(RecorderError::CorruptRecord {
                path,
                offset: 0,
                reason: "expected a clip header".into(),
            });
        };
        d.clips.push(Clip {
            frames,
            task_id: rh.task_id,
            alpha_used,
            start_reason,
            start_t,
            wall_time,
            source,
        });
    }
    if d.episodes.len() != manifest.episode_count || d.clips.len() != manifest.clip_count {
        return Err(RecorderError::ManifestMismatch {
            path: dir.join("manifest.json"),
            reason: "entry counts disagree".into(),
        });
    }
    Ok(d)
}
