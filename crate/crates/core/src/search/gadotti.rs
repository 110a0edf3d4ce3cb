use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::data::{Schema, TargetRecord};
use crate::error::{Error, Result};
use crate::game::Attack;
use crate::inference::likelihood_ratio_predict;
use crate::qbs::CountingSystem;
use crate::query::{Condition, Predicate, Query};

/// One difference pair `(q1, q2)`: `q2` fixes the target's values on all
/// of the subset but its first attribute and `a_n = v_n`; `q1` adds
/// `first != r_first`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GadottiPair {
    pub subset: Vec<usize>,
    pub v_n: u8,
    pub q1: Query,
    pub q2: Query,
    pub delta: f64,
    pub vote: u8,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GadottiStatus {
    Predicted,
    Abstained,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GadottiOutcome {
    pub status: GadottiStatus,
    pub pairs: Vec<GadottiPair>,
    /// Majority vote of the pairs, ties predicting 1.
    pub prediction: Option<u8>,
}

fn subsets_by_size(attributes: &[usize]) -> Vec<Vec<usize>> {
    let n = attributes.len();
    let mut all: Vec<Vec<usize>> = (1u32..1 << n)
        .map(|mask| {
            (0..n)
                .filter(|i| mask & (1 << i) != 0)
                .map(|i| attributes[i])
                .collect()
        })
        .collect();
    // stable: within a size, subsets keep mask order
    all.sort_by_key(Vec::len);
    all
}

fn unique_on(system: &dyn CountingSystem, target: &TargetRecord, subset: &[usize]) -> bool {
    let data = system.dataset();
    let mut matches = 0;
    for row in 0..data.len() {
        if subset
            .iter()
            .all(|&a| Some(data.value(row, a)) == target.value_of(a))
        {
            matches += 1;
            if matches > 1 {
                return false;
            }
        }
    }
    matches == 1
}

fn build_pair(schema: &Schema, target: &TargetRecord, subset: &[usize], v_n: u8) -> Result<(Query, Query)> {
    let value = |a: usize| {
        target
            .value_of(a)
            .ok_or_else(|| Error::InvalidParameter(format!("target value of attribute {a} unknown")))
    };
    let mut shared: Vec<Condition> = subset[1..]
        .iter()
        .map(|&a| Ok(Condition::new(a, Predicate::Eq(value(a)?))))
        .collect::<Result<_>>()?;
    shared.push(Condition::new(schema.sensitive_index(), Predicate::Eq(f64::from(v_n))));
    let q2 = Query::from_conditions(schema.len(), &shared)?;
    let mut with_neq = shared;
    with_neq.push(Condition::new(subset[0], Predicate::Neq(value(subset[0])?)));
    let q1 = Query::from_conditions(schema.len(), &with_neq)?;
    Ok((q1, q2))
}

/// The differential attack against one protected system. Every attribute
/// subset of the target's known attributes on which the target is unique
/// yields a pair per `v_n`; pairs with a suppressed (zero) answer are
/// dropped and the rest vote through the likelihood-ratio test.
pub fn gadotti_attack(system: &dyn CountingSystem, target: &TargetRecord) -> Result<GadottiOutcome> {
    let schema = system.dataset().schema();
    let mut pairs = Vec::new();
    for subset in subsets_by_size(&target.attributes) {
        if !unique_on(system, target, &subset) {
            continue;
        }
        for v_n in [0u8, 1] {
            let (q1, q2) = build_pair(schema, target, &subset, v_n)?;
            let (r1, r2) = (system.answer(&q1), system.answer(&q2));
            if r1 == 0 || r2 == 0 {
                continue;
            }
            let delta = (r2 - r1) as f64;
            let vote = likelihood_ratio_predict(delta, subset.len(), v_n);
            pairs.push(GadottiPair {
                subset: subset.clone(),
                v_n,
                q1,
                q2,
                delta,
                vote,
            });
        }
    }
    if pairs.is_empty() {
        return Ok(GadottiOutcome {
            status: GadottiStatus::Abstained,
            pairs,
            prediction: None,
        });
    }
    let ones = pairs.iter().filter(|p| p.vote == 1).count();
    let prediction = u8::from(2 * ones >= pairs.len());
    Ok(GadottiOutcome {
        status: GadottiStatus::Predicted,
        pairs,
        prediction: Some(prediction),
    })
}

/// The differential attack as a game strategy; abstentions predict 1 and
/// are counted.
#[derive(Debug)]
pub struct GadottiAttack {
    target: TargetRecord,
    abstentions: AtomicUsize,
}

impl GadottiAttack {
    pub fn new(target: TargetRecord) -> Self {
        GadottiAttack {
            target,
            abstentions: AtomicUsize::new(0),
        }
    }

    pub fn abstentions(&self) -> usize {
        self.abstentions.load(Ordering::Relaxed)
    }
}

impl Attack for GadottiAttack {
    fn predict(&self, system: &dyn CountingSystem) -> u8 {
        match gadotti_attack(system, &self.target).ok().and_then(|o| o.prediction) {
            Some(p) => p,
            None => {
                self.abstentions.fetch_add(1, Ordering::Relaxed);
                1
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::fixtures::small;
    use crate::qbs::{ExactCount, QbsConfig, QbsInstance, Salt};

    #[test]
    fn subsets_enumerated_by_size() {
        let s = subsets_by_size(&[4, 7, 9]);
        assert_eq!(s.len(), 7);
        assert_eq!(s[0], vec![4]);
        assert_eq!(s[3], vec![4, 7]);
        assert_eq!(s[6], vec![4, 7, 9]);
    }

    #[test]
    fn exact_system_pair_reveals_value() {
        // target (a=2, b=7) unique on {a, b}; crowd shares b=7 but not a
        let mut rows: Vec<_> = (0..60).map(|i| (i, (i % 2) as f64, 7.0, (i % 2) as f64)).collect();
        rows.push((999, 2.0, 7.0, 1.0));
        let d = small(&rows);
        let t = TargetRecord::new(d.schema(), 999, vec![1, 2], vec![2.0, 7.0]).unwrap();
        let out = gadotti_attack(&ExactCount::new(d), &t).unwrap();
        assert_eq!(out.status, GadottiStatus::Predicted);
        assert_eq!(out.prediction, Some(1));
        let pair = out.pairs.iter().find(|p| p.subset == vec![1, 2] && p.v_n == 1).unwrap();
        assert_eq!(pair.delta, 1.0);
        assert_eq!(*pair.q1.predicate(1), Predicate::Neq(2.0));
        assert_eq!(*pair.q1.predicate(2), Predicate::Eq(7.0));
        assert!(pair.q2.predicate(1).is_skip());
    }

    #[test]
    fn abstains_without_unique_subset() {
        let rows: Vec<_> = (0..40).map(|i| (i, 1.0, 7.0, (i % 2) as f64)).collect();
        let d = small(&rows);
        let t = TargetRecord::new(d.schema(), 0, vec![1, 2], vec![1.0, 7.0]).unwrap();
        let q = QbsInstance::new(Salt::new(b"s".to_vec()).unwrap(), d, QbsConfig::default());
        let out = gadotti_attack(&q, &t).unwrap();
        assert_eq!(out.status, GadottiStatus::Abstained);
        let attack = GadottiAttack::new(t);
        assert_eq!(attack.predict(&q), 1);
        assert_eq!(attack.abstentions(), 1);
    }
}
