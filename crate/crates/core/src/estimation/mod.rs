//! Social-group estimation behind one interface: ground-truth oracle,
//! stochastic mock with the four error categories, and a remote
//! multimodal-model client.

mod mock;
mod remote;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::perception::Keyframe;
use crate::world::{Activity, SocialGroup, Vec2};

pub use mock::{estimate_mock, ErrorCategory, MockErrorModel, MockEstimator};
pub use remote::{build_request, parse_reply, PendingEstimate, RemoteConfig, RemoteEstimator, PROMPT_V1};

#[derive(Debug, Error)]
pub enum EstimationError {
    #[error("invalid mock error model: {0}")]
    InvalidModel(String),
    #[error("missing remote configuration: {0}")]
    MissingConfig(String),
    #[error("remote request failed: {0}")]
    Transport(String),
    #[error("remote request timed out")]
    Timeout,
    #[error("unparseable reply: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimateSource {
    Oracle,
    Mock,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationEntry {
    pub track_id: u32,
    pub position: Vec2,
    pub velocity: Vec2,
}

/// What the estimator sees: one entry per visible track plus the instruction text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationPayload {
    pub timestamp: f64,
    pub entries: Vec<AnnotationEntry>,
    pub instructions: String,
}

impl AnnotationPayload {
    pub fn from_keyframe(frame: &Keyframe, instructions: &str) -> Self {
        AnnotationPayload {
            timestamp: frame.timestamp,
            entries: frame
                .entries
                .iter()
                .map(|e| AnnotationEntry {
                    track_id: e.track_id,
                    position: e.position,
                    velocity: e.velocity,
                })
                .collect(),
            instructions: instructions.to_string(),
        }
    }

    pub fn ids(&self) -> BTreeSet<u32> {
        self.entries.iter().map(|e| e.track_id).collect()
    }
}

/// Groups over track ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupEstimate {
    pub groups: Vec<SocialGroup>,
    pub source: EstimateSource,
    pub issued_at: f64,
}

impl GroupEstimate {
    pub fn empty(source: EstimateSource, issued_at: f64) -> Self {
        GroupEstimate {
            groups: Vec::new(),
            source,
            issued_at,
        }
    }
}

pub trait GroupEstimator {
    fn source(&self) -> EstimateSource;

    /// `truth` is the ground-truth grouping already expressed in track ids;
    /// only the oracle and the mock look at it.
    fn estimate(&mut self, payload: &AnnotationPayload, truth: &[SocialGroup]) -> Result<GroupEstimate, EstimationError>;
}

/// Drops ids not in `valid`, removes ids already claimed by an earlier group,
/// and drops groups left empty.
pub fn normalize_groups(groups: Vec<SocialGroup>, valid: &BTreeSet<u32>) -> Vec<SocialGroup> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for mut g in groups {
        g.member_ids.retain(|id| valid.contains(id) && !seen.contains(id));
        if g.member_ids.is_empty() {
            continue;
        }
        seen.extend(g.member_ids.iter().copied());
        out.push(g);
    }
    out
}

/// Rewrites pedestrian-id groups into track-id groups. `tracks` pairs each
/// track id with the pedestrian it follows.
pub fn truth_in_track_ids(truth: &[SocialGroup], tracks: &[(u32, Option<u32>)]) -> Vec<SocialGroup> {
    let mut by_ped: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
    for (tid, src) in tracks {
        if let Some(p) = src {
            by_ped.entry(*p).or_default().push(*tid);
        }
    }
    truth
        .iter()
        .map(|g| SocialGroup {
            group_id: g.group_id,
            member_ids: g
                .member_ids
                .iter()
                .flat_map(|p| by_ped.get(p).into_iter().flatten().copied())
                .collect(),
            activity: g.activity,
        })
        .filter(|g| !g.member_ids.is_empty())
        .collect()
}

/// Ground truth restricted to the tracks in the payload.
pub fn estimate_oracle(payload: &AnnotationPayload, truth: &[SocialGroup]) -> GroupEstimate {
    GroupEstimate {
        groups: normalize_groups(truth.to_vec(), &payload.ids()),
        source: EstimateSource::Oracle,
        issued_at: payload.timestamp,
    }
}

#[derive(Debug, Clone, Default)]
pub struct OracleEstimator;

impl GroupEstimator for OracleEstimator {
    fn source(&self) -> EstimateSource {
        EstimateSource::Oracle
    }

    fn estimate(&mut self, payload: &AnnotationPayload, truth: &[SocialGroup]) -> Result<GroupEstimate, EstimationError> {
        Ok(estimate_oracle(payload, truth))
    }
}

/// Label fallback for replies that omit or garble the activity.
pub(crate) fn activity_or_default(label: Option<&str>) -> Activity {
    label.and_then(Activity::from_label).unwrap_or(Activity::Conversation)
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;

    pub fn payload(ids: &[u32]) -> AnnotationPayload {
        AnnotationPayload {
            timestamp: 1.0,
            entries: ids
                .iter()
                .map(|&id| AnnotationEntry {
                    track_id: id,
                    position: Vec2::new(id as f64, 0.0),
                    velocity: Vec2::zeros(),
                })
                .collect(),
            instructions: String::new(),
        }
    }

    pub fn group(id: u32, members: &[u32], activity: Activity) -> SocialGroup {
        SocialGroup::new(id, members.iter().copied(), activity)
    }
}
