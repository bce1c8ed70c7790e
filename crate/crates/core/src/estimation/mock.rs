//! Stochastic estimator reproducing the accurate / miss / extra / error
//! outcome categories of a real multimodal model.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{normalize_groups, AnnotationPayload, EstimateSource, EstimationError, GroupEstimate, GroupEstimator};
use crate::world::SocialGroup;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCategory {
    Accurate,
    Miss,
    Extra,
    Error,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MockErrorModel {
    pub p_accurate: f64,
    pub p_miss: f64,
    pub p_extra: f64,
    pub p_error: f64,
}

impl Default for MockErrorModel {
    fn default() -> Self {
        MockErrorModel {
            p_accurate: 0.73,
            p_miss: 0.09,
            p_extra: 0.09,
            p_error: 0.09,
        }
    }
}

impl MockErrorModel {
    pub const PERFECT: MockErrorModel = MockErrorModel {
        p_accurate: 1.0,
        p_miss: 0.0,
        p_extra: 0.0,
        p_error: 0.0,
    };

    pub fn validate(&self) -> Result<(), EstimationError> {
        let ps = [self.p_accurate, self.p_miss, self.p_extra, self.p_error];
        if ps.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(EstimationError::InvalidModel("probabilities must lie in [0, 1]".into()));
        }
        let sum: f64 = ps.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(EstimationError::InvalidModel(format!("probabilities sum to {sum}, expected 1")));
        }
        Ok(())
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> ErrorCategory {
        let u: f64 = rng.random();
        let mut acc = self.p_accurate;
        if u < acc {
            return ErrorCategory::Accurate;
        }
        acc += self.p_miss;
        if u < acc {
            return ErrorCategory::Miss;
        }
        acc += self.p_extra;
        if u < acc {
            return ErrorCategory::Extra;
        }
        ErrorCategory::Error
    }
}

/// Corrupts each (visible) true group by one sampled category. Returns the
/// estimate and the category drawn per group.
pub fn estimate_mock<R: Rng>(
    payload: &AnnotationPayload,
    truth: &[SocialGroup],
    model: &MockErrorModel,
    rng: &mut R,
) -> (GroupEstimate, Vec<ErrorCategory>) {
    let visible = payload.ids();
    let truth = normalize_groups(truth.to_vec(), &visible);
    let mut next_id = truth.iter().map(|g| g.group_id + 1).max().unwrap_or(0);
    let mut out = Vec::new();
    let mut drawn = Vec::with_capacity(truth.len());
    for g in truth {
        let cat = model.sample(rng);
        drawn.push(cat);
        let members: Vec<u32> = g.member_ids.iter().copied().collect();
        match cat {
            ErrorCategory::Accurate => out.push(g),
            ErrorCategory::Miss => {
                let drop = members[rng.random_range(0..members.len())];
                let mut g = g;
                g.member_ids.remove(&drop);
                out.push(g);
            }
            ErrorCategory::Extra => {
                let others: Vec<u32> = visible.iter().copied().filter(|id| !g.member_ids.contains(id)).collect();
                let mut g = g;
                if let Some(&extra) = others.choose(rng) {
                    g.member_ids.insert(extra);
                }
                out.push(g);
            }
            ErrorCategory::Error => {
                if members.len() < 2 {
                    out.push(g);
                    continue;
                }
                let cut = rng.random_range(1..members.len());
                out.push(SocialGroup::new(g.group_id, members[..cut].iter().copied(), g.activity));
                out.push(SocialGroup::new(next_id, members[cut..].iter().copied(), g.activity));
                next_id += 1;
            }
        }
    }
    (
        GroupEstimate {
            groups: normalize_groups(out, &visible),
            source: EstimateSource::Mock,
            issued_at: payload.timestamp,
        },
        drawn,
    )
}

#[derive(Debug, Clone)]
pub struct MockEstimator {
    model: MockErrorModel,
    rng: ChaCha8Rng,
}

impl MockEstimator {
    pub fn new(model: MockErrorModel, seed: u64) -> Result<Self, EstimationError> {
        model.validate()?;
        Ok(MockEstimator {
            model,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }
}

impl GroupEstimator for MockEstimator {
    fn source(&self) -> EstimateSource {
        EstimateSource::Mock
    }

    fn estimate(&mut self, payload: &AnnotationPayload, truth: &[SocialGroup]) -> Result<GroupEstimate, EstimationError> {
        Ok(estimate_mock(payload, truth, &self.model, &mut self.rng).0)
    }
}

#[cfg(test)]
mod tests {
    use super::super::test_support::*;
    use super::super::estimate_oracle;
    use super::*;
    use crate::world::Activity;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn validation() {
        assert!(MockErrorModel::default().validate().is_ok());
        let bad = MockErrorModel {
            p_accurate: 0.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let neg = MockErrorModel {
            p_accurate: 1.1,
            p_miss: -0.1,
            p_extra: 0.0,
            p_error: 0.0,
        };
        assert!(neg.validate().is_err());
        assert!(MockEstimator::new(bad, 0).is_err());
    }

    #[test]
    fn perfect_model_equals_oracle() {
        let p = payload(&[1, 2, 3, 4, 5]);
        let truth = vec![group(0, &[1, 2, 3], Activity::Queue), group(1, &[4, 5], Activity::Walking)];
        let mut r = rng(1);
        for _ in 0..50 {
            let (m, _) = estimate_mock(&p, &truth, &MockErrorModel::PERFECT, &mut r);
            assert_eq!(m.groups, estimate_oracle(&p, &truth).groups);
        }
    }

    #[test]
    fn forced_miss_yields_two_member_subset() {
        let p = payload(&[1, 2, 3]);
        let truth = vec![group(0, &[1, 2, 3], Activity::Queue)];
        let model = MockErrorModel {
            p_accurate: 0.0,
            p_miss: 1.0,
            p_extra: 0.0,
            p_error: 0.0,
        };
        let mut r = rng(2);
        for _ in 0..50 {
            let (m, cats) = estimate_mock(&p, &truth, &model, &mut r);
            assert_eq!(cats, vec![ErrorCategory::Miss]);
            assert_eq!(m.groups.len(), 1);
            assert_eq!(m.groups[0].member_ids.len(), 2);
            assert!(m.groups[0].member_ids.is_subset(&truth[0].member_ids));
        }
    }

    #[test]
    fn forced_extra_adds_one_outsider_or_noops() {
        let model = MockErrorModel {
            p_accurate: 0.0,
            p_miss: 0.0,
            p_extra: 1.0,
            p_error: 0.0,
        };
        let truth = vec![group(0, &[1, 2], Activity::Conversation)];
        let (m, _) = estimate_mock(&payload(&[1, 2, 7]), &truth, &model, &mut rng(3));
        assert_eq!(m.groups[0].member_ids.iter().copied().collect::<Vec<_>>(), vec![1, 2, 7]);
        let (m, _) = estimate_mock(&payload(&[1, 2]), &truth, &model, &mut rng(3));
        assert_eq!(m.groups, truth);
    }

    #[test]
    fn forced_error_splits_into_two_groups() {
        let model = MockErrorModel {
            p_accurate: 0.0,
            p_miss: 0.0,
            p_extra: 0.0,
            p_error: 1.0,
        };
        let truth = vec![group(3, &[1, 2, 3, 4], Activity::Queue)];
        let mut r = rng(4);
        for _ in 0..50 {
            let (m, _) = estimate_mock(&payload(&[1, 2, 3, 4]), &truth, &model, &mut r);
            assert_eq!(m.groups.len(), 2);
            let union: std::collections::BTreeSet<u32> =
                m.groups.iter().flat_map(|g| g.member_ids.iter().copied()).collect();
            assert_eq!(union, truth[0].member_ids);
            assert_ne!(m.groups[0].group_id, m.groups[1].group_id);
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let p = payload(&[1, 2, 3, 4, 5, 6]);
        let truth = vec![group(0, &[1, 2, 3], Activity::Queue), group(1, &[4, 5, 6], Activity::Walking)];
        let mut a = MockEstimator::new(MockErrorModel::default(), 9).unwrap();
        let mut b = MockEstimator::new(MockErrorModel::default(), 9).unwrap();
        for _ in 0..20 {
            assert_eq!(a.estimate(&p, &truth).unwrap(), b.estimate(&p, &truth).unwrap());
        }
    }
}
