use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::data::{AttributeRole, Schema, TargetRecord};
use crate::error::{Error, Result};
use crate::game::{FitnessEvaluator, GameSetup, MultisetAttack};
use crate::query::{canonical_form, Predicate, Query, QueryMultiset};

/// How strictly a query must follow the difference-query shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Shape {
    /// `=` and `!=` on the target's own values.
    Plain,
    /// Any condition the target satisfies, and any it fails.
    Generalized,
}

/// Role of one non-sensitive condition relative to the target.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Role {
    Selects,
    Excludes,
}

fn condition_role(shape: Shape, predicate: &Predicate, value: f64) -> Option<Role> {
    match shape {
        Shape::Plain => match *predicate {
            Predicate::Eq(v) if v == value => Some(Role::Selects),
            Predicate::Neq(v) if v == value => Some(Role::Excludes),
            _ => None,
        },
        Shape::Generalized => Some(if predicate.matches(value) {
            Role::Selects
        } else {
            Role::Excludes
        }),
    }
}

/// For a query of the right shape, the attribute of its single excluding
/// condition (if any). `None` when the shape does not fit.
fn analyze(shape: Shape, schema: &Schema, target: &TargetRecord, query: &Query) -> Option<Option<usize>> {
    let mut sensitive = false;
    let mut excluded = None;
    for c in query.conditions() {
        match schema.attribute(c.attribute).role {
            AttributeRole::Sensitive => match c.predicate {
                Predicate::Eq(v) | Predicate::Neq(v) if v == 0.0 || v == 1.0 => sensitive = true,
                _ => return None,
            },
            AttributeRole::UserId => return None,
            AttributeRole::Regular => {
                let value = target.value_of(c.attribute)?;
                if condition_role(shape, &c.predicate, value)? == Role::Excludes {
                    if excluded.is_some() {
                        return None;
                    }
                    excluded = Some(c.attribute);
                }
            }
        }
    }
    sensitive.then_some(excluded)
}

fn classify(shape: Shape, multiset: &QueryMultiset, target: &TargetRecord, schema: &Schema) -> Vec<usize> {
    let shapes: Vec<Option<Option<usize>>> = multiset
        .queries
        .iter()
        .map(|q| analyze(shape, schema, target, q))
        .collect();
    // bases: queries with no excluding condition, by canonical form
    let mut bases: HashMap<Vec<u8>, Vec<usize>> = HashMap::new();
    for (p, s) in shapes.iter().enumerate() {
        if *s == Some(None) {
            bases
                .entry(canonical_form(schema, &multiset.queries[p]))
                .or_default()
                .push(p);
        }
    }
    let mut flagged = HashSet::new();
    for (p, s) in shapes.iter().enumerate() {
        if let Some(Some(attribute)) = *s {
            let mut base = multiset.queries[p].clone();
            base.set(attribute, Predicate::Skip);
            if let Some(partners) = bases.get(&canonical_form(schema, &base)) {
                flagged.insert(p);
                flagged.extend(partners.iter().copied());
            }
        }
    }
    let mut flagged: Vec<usize> = flagged.into_iter().collect();
    flagged.sort_unstable();
    flagged
}

/// Positions of difference-like queries: members of a pair `(q1, q2)` where
/// `q2` fixes target values with `=` plus a sensitive condition, and `q1`
/// is `q2` plus one `!=` on a target value. Duplicated queries are flagged
/// at every position.
pub fn classify_difference_like(
    multiset: &QueryMultiset,
    target: &TargetRecord,
    schema: &Schema,
) -> Vec<usize> {
    classify(Shape::Plain, multiset, target, schema)
}

/// Generalized difference-like queries: conditions in `q2` need only select
/// the target, and the extra condition in `q1` need only exclude it.
pub fn classify_generalized_difference_like(
    multiset: &QueryMultiset,
    target: &TargetRecord,
    schema: &Schema,
) -> Vec<usize> {
    classify(Shape::Generalized, multiset, target, schema)
}

/// Flagged query counts: with multiplicity and distinct by canonical form.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsetCounts {
    pub with_multiplicity: usize,
    pub unique: usize,
}

pub fn subset_counts(multiset: &QueryMultiset, positions: &[usize], schema: &Schema) -> SubsetCounts {
    let unique: HashSet<Vec<u8>> = positions
        .iter()
        .map(|&p| canonical_form(schema, &multiset.queries[p]))
        .collect();
    SubsetCounts {
        with_multiplicity: positions.len(),
        unique: unique.len(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    pub subset_accuracy: f64,
    pub full_accuracy: f64,
    /// `subset_accuracy / full_accuracy`.
    pub ratio: f64,
}

/// Accuracy of the attack restricted to `positions`: the model is refit on
/// those queries' fleet answers and the game is replayed with the same
/// seed. The full attack is refit the same way, so the ratio of the whole
/// multiset is exactly 1.
pub fn attribute_accuracy(
    multiset: &QueryMultiset,
    positions: &[usize],
    evaluator: &FitnessEvaluator<'_>,
    game: &GameSetup<'_>,
) -> Result<Attribution> {
    if positions.is_empty() {
        return Err(Error::InvalidParameter(
            "cannot attribute accuracy to an empty query subset".into(),
        ));
    }
    let accuracy = |subset: QueryMultiset| -> Result<f64> {
        let model = evaluator.evaluate(&subset)?.model;
        Ok(game
            .play(&MultisetAttack {
                multiset: subset,
                model,
            })?
            .accuracy)
    };
    let full_accuracy = accuracy(multiset.clone())?;
    let all: Vec<usize> = (0..multiset.len()).collect();
    let subset_accuracy = if positions == all.as_slice() {
        full_accuracy
    } else {
        accuracy(multiset.subset(positions))?
    };
    let ratio = if full_accuracy > 0.0 {
        subset_accuracy / full_accuracy
    } else {
        0.0
    };
    Ok(Attribution {
        subset_accuracy,
        full_accuracy,
        ratio,
    })
}
