//! Chunked nearest-neighbour behaviour cloning.
//!
//! Training pairs map the observation at a recorded frame to the next `h`
//! follower commands (joint targets plus gripper). Prediction finds the `k`
//! nearest stored observations under per-dimension standardization and
//! returns their chunk (or the per-step mean for `k > 1`). With `residual`
//! enabled, each retrieved chunk is shifted by the difference between the
//! query's follower joints and the stored pair's follower joints, so the
//! policy replays the neighbour's motion from where the arm actually is.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::{ChainModel, JointVector};
use crate::recorder::{Dataset, Manifest};

/// Dimensions whose spread is below this are left unscaled.
pub const MIN_STD: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PolicyError {
    #[error("dataset has no frames")]
    EmptyDataset,
    #[error("observation has {got} features, policy expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid policy parameter `{field}`: {reason}")]
    InvalidParams { field: &'static str, reason: String },
    #[error("fine-tuning data does not contain the policy's training pairs")]
    NotSuperset,
    #[error("policy manifest does not match dataset: {0}")]
    ManifestMismatch(String),
}

/// Fixed-order feature vector; see `tasks::observe` for the layout.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Observation(Vec<f64>);

impl Observation {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// `h` rows of follower joint targets followed by a gripper command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionChunk {
    pub commands: Vec<Vec<f64>>,
}

impl ActionChunk {
    pub fn horizon(&self) -> usize {
        self.commands.len()
    }

    /// Joint targets and gripper command of step `i`.
    pub fn step(&self, i: usize) -> (JointVector, f64) {
        let row = &self.commands[i];
        let (q, g) = row.split_at(row.len() - 1);
        (JointVector::from(q), g[0])
    }
}

pub trait Policy: Send + Sync {
    fn horizon(&self) -> usize;
    fn predict(&self, obs: &Observation) -> Result<ActionChunk, PolicyError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BcConfig {
    pub k: usize,
    pub h: usize,
    pub residual: bool,
}

impl Default for BcConfig {
    fn default() -> Self {
        Self {
            k: 1,
            h: 10,
            residual: true,
        }
    }
}

impl BcConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.k == 0 {
            return Err(PolicyError::InvalidParams {
                field: "k",
                reason: "must be at least 1".into(),
            });
        }
        if self.h == 0 {
            return Err(PolicyError::InvalidParams {
                field: "h",
                reason: "must be at least 1".into(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaling {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureScaling {
    pub fn fit(rows: &[Observation]) -> Self {
        let d = rows[0].len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r.as_slice()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(r.as_slice()).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd < MIN_STD {
                    1.0
                } else {
                    sd
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn apply_into(&self, obs: &[f64], out: &mut Vec<f64>) {
        out.extend(obs.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s));
    }
}

/// One (observation, next `h` commands) pair per recorded frame; segments
/// are padded at the end by repeating their final command.
pub fn build_pairs(dataset: &Dataset, h: usize) -> Result<Vec<(Observation, ActionChunk)>, PolicyError> {
    if h == 0 {
        return Err(PolicyError::InvalidParams {
            field: "h",
            reason: "must be at least 1".into(),
        });
    }
    if dataset.is_empty() {
        return Err(PolicyError::EmptyDataset);
    }
    let mut pairs = Vec::with_capacity(dataset.frame_count());
    for seg in dataset.segments() {
        for i in 0..seg.len() {
            let commands = (0..h)
                .map(|j| {
                    let f = &seg[(i + j).min(seg.len() - 1)];
                    let mut row = f.follower_cmd_q.as_slice().to_vec();
                    row.push(f.gripper);
                    row
                })
                .collect();
            pairs.push((seg[i].obs.clone(), ActionChunk { commands }));
        }
    }
    Ok(pairs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BcPolicy {
    config: BcConfig,
    scaling: FeatureScaling,
    joint_dims: usize,
    limits: Vec<(f64, f64)>,
    obs: Vec<Observation>,
    chunks: Vec<ActionChunk>,
    /// Standardized observations, row-major.
    feats: Vec<f64>,
}

/// `pi_0 = BC(D0)`.
pub fn train_base(dataset: &Dataset, config: &BcConfig, follower: &ChainModel) -> Result<BcPolicy, PolicyError> {
    config.validate()?;
    let pairs = build_pairs(dataset, config.h)?;
    let obs: Vec<Observation> = pairs.iter().map(|(o, _)| o.clone()).collect();
    let scaling = FeatureScaling::fit(&obs);
    BcPolicy::from_pairs(*config, scaling, follower, pairs)
}

/// Rebuilds `policy` over `merged` with its hyperparameters and feature
/// scaling. `merged` must start with the policy's own training pairs.
pub fn finetune(policy: &BcPolicy, merged: &Dataset) -> Result<BcPolicy, PolicyError> {
    let pairs = build_pairs(merged, policy.config.h)?;
    if pairs.len() < policy.obs.len() || pairs.iter().zip(&policy.obs).any(|((o, _), p)| o != p) {
        return Err(PolicyError::NotSuperset);
    }
    let mut out = BcPolicy {
        obs: Vec::new(),
        chunks: Vec::new(),
        feats: Vec::new(),
        ..policy.clone()
    };
    out.fill(pairs)?;
    Ok(out)
}

impl BcPolicy {
    fn from_pairs(
        config: BcConfig,
        scaling: FeatureScaling,
        follower: &ChainModel,
        pairs: Vec<(Observation, ActionChunk)>,
    ) -> Result<Self, PolicyError> {
        let mut p = Self {
            config,
            scaling,
            joint_dims: follower.dof(),
            limits: follower.joints.iter().map(|j| j.limits).collect(),
            obs: Vec::new(),
            chunks: Vec::new(),
            feats: Vec::new(),
        };
        p.fill(pairs)?;
        Ok(p)
    }

    fn fill(&mut self, pairs: Vec<(Observation, ActionChunk)>) -> Result<(), PolicyError> {
        let d = self.scaling.dim();
        if self.config.residual && d < self.joint_dims {
            return Err(PolicyError::InvalidParams {
                field: "residual",
                reason: format!("needs the {} follower joints at the head of the observation", self.joint_dims),
            });
        }
        self.feats.reserve(pairs.len() * d);
        for (o, c) in pairs {
            if o.len() != d {
                return Err(PolicyError::DimensionMismatch {
                    expected: d,
                    got: o.len(),
                });
            }
            if c.commands.iter().any(|r| r.len() != self.joint_dims + 1) {
                return Err(PolicyError::DimensionMismatch {
                    expected: self.joint_dims + 1,
                    got: c.commands[0].len(),
                });
            }
            self.scaling.apply_into(o.as_slice(), &mut self.feats);
            self.obs.push(o);
            self.chunks.push(c);
        }
        Ok(())
    }

    pub fn config(&self) -> &BcConfig {
        &self.config
    }

    pub fn scaling(&self) -> &FeatureScaling {
        &self.scaling
    }

    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }

    pub fn obs_dim(&self) -> usize {
        self.scaling.dim()
    }

    pub fn pair(&self, i: usize) -> (&Observation, &ActionChunk) {
        (&self.obs[i], &self.chunks[i])
    }

    /// Indices of the `k` nearest stored pairs, nearest first; ties go to
    /// the lower index.
    pub fn neighbours(&self, obs: &Observation) -> Result<Vec<(usize, f64)>, PolicyError> {
        let d = self.scaling.dim();
        if obs.len() != d {
            return Err(PolicyError::DimensionMismatch {
                expected: d,
                got: obs.len(),
            });
        }
        let mut q = Vec::with_capacity(d);
        self.scaling.apply_into(obs.as_slice(), &mut q);
        let k = self.config.k.min(self.obs.len());
        let mut best: Vec<(usize, f64)> = Vec::with_capacity(k + 1);
        for (i, row) in self.feats.chunks_exact(d).enumerate() {
            let dist: f64 = row.iter().zip(&q).map(|(a, b)| (a - b) * (a - b)).sum();
            if best.len() == k && dist >= best[k - 1].1 {
                continue;
            }
            let at = best.partition_point(|&(_, bd)| bd <= dist);
            best.insert(at, (i, dist));
            best.truncate(k);
        }
        Ok(best)
    }

    fn corrected(&self, i: usize, query: &Observation) -> Vec<Vec<f64>> {
        let chunk = &self.chunks[i];
        if !self.config.residual {
            return chunk.commands.clone();
        }
        let n = self.joint_dims;
        let shift: Vec<f64> = (0..n).map(|j| query.as_slice()[j] - self.obs[i].as_slice()[j]).collect();
        chunk
            .commands
            .iter()
            .map(|row| {
                let mut r = row.clone();
                for j in 0..n {
                    r[j] += shift[j];
                }
                r
            })
            .collect()
    }

    fn clamp(&self, rows: &mut [Vec<f64>]) {
        for row in rows {
            for (v, (lo, hi)) in row.iter_mut().zip(&self.limits) {
                *v = v.clamp(*lo, *hi);
            }
            let g = row.last_mut().expect("gripper column");
            *g = g.clamp(0.0, 1.0);
        }
    }
}

impl Policy for BcPolicy {
    fn horizon(&self) -> usize {
        self.config.h
    }

    fn predict(&self, obs: &Observation) -> Result<ActionChunk, PolicyError> {
        let nn = self.neighbours(obs)?;
        let mut rows = self.corrected(nn[0].0, obs);
        if nn.len() > 1 {
            for &(i, _) in &nn[1..] {
                for (acc, r) in rows.iter_mut().zip(self.corrected(i, obs)) {
                    acc.iter_mut().zip(r).for_each(|(a, b)| *a += b);
                }
            }
            let k = nn.len() as f64;
            rows.iter_mut().flatten().for_each(|v| *v /= k);
        }
        self.clamp(&mut rows);
        Ok(ActionChunk { commands: rows })
    }
}

/// Serialized policy: hyperparameters, scaling and a reference to the
/// dataset the pairs are rebuilt from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyManifest {
    pub schema_version: u32,
    pub kind: String,
    pub config: BcConfig,
    pub scaling: FeatureScaling,
    pub joint_dims: usize,
    pub limits: Vec<(f64, f64)>,
    pub pair_count: usize,
    /// Dataset directory, as given when the manifest was written.
    pub dataset_path: String,
    /// Digest of the dataset's manifest.
    pub dataset_digest: String,
}

pub const POLICY_KIND: &str = "knn_chunk_bc";

impl BcPolicy {
    pub fn manifest(&self, dataset_path: &str, dataset_manifest: &Manifest) -> PolicyManifest {
        PolicyManifest {
            schema_version: crate::recorder::SCHEMA_VERSION,
            kind: POLICY_KIND.to_string(),
            config: self.config,
            scaling: self.scaling.clone(),
            joint_dims: self.joint_dims,
            limits: self.limits.clone(),
            pair_count: self.obs.len(),
            dataset_path: dataset_path.to_string(),
            dataset_digest: dataset_manifest.digest(),
        }
    }

    /// Rebuilds a policy from its manifest and the referenced dataset.
    pub fn from_manifest(
        m: &PolicyManifest,
        dataset: &Dataset,
        dataset_manifest: &Manifest,
    ) -> Result<Self, PolicyError> {
        if m.kind != POLICY_KIND {
            return Err(PolicyError::ManifestMismatch(format!("unknown policy kind {}", m.kind)));
        }
        if m.dataset_digest != dataset_manifest.digest() {
            return Err(PolicyError::ManifestMismatch("dataset digest differs".into()));
        }
        m.config.validate()?;
        let pairs = build_pairs(dataset, m.config.h)?;
        if pairs.len() != m.pair_count {
            return Err(PolicyError::ManifestMismatch(format!(
                "expected {} pairs, dataset yields {}",
                m.pair_count,
                pairs.len()
            )));
        }
        let mut p = Self {
            config: m.config,
            scaling: m.scaling.clone(),
            joint_dims: m.joint_dims,
            limits: m.limits.clone(),
            obs: Vec::new(),
            chunks: Vec::new(),
            feats: Vec::new(),
        };
        p.fill(pairs)?;
        Ok(p)
    }
}
