#![allow(dead_code)]

use std::sync::Arc;

use qbs_audit::data::{AttributeSchema, Dataset, Schema, TargetRecord};
use qbs_audit::query::{Condition, Predicate, Query, QueryMultiset};
use rand::seq::SliceRandom;
use rand::Rng;

#[derive(Clone, Copy, Debug)]
pub enum Col {
    Cat(usize),
    Ord(usize),
}

/// `uid`, one attribute per `cols` entry, then `sens`.
pub fn schema(cols: &[Col]) -> Arc<Schema> {
    let mut attrs = vec![AttributeSchema::user_id()];
    for (i, c) in cols.iter().enumerate() {
        attrs.push(match *c {
            Col::Cat(k) => AttributeSchema::categorical(format!("c{i}"), (0..k).map(|j| format!("v{j}")).collect()),
            Col::Ord(n) => AttributeSchema::ordinal(format!("o{i}"), (0..n).map(|j| j as f64).collect()),
        });
    }
    attrs.push(AttributeSchema::sensitive("sens", vec!["no".into(), "yes".into()]));
    Arc::new(Schema::new(attrs).unwrap())
}

/// Rows are `(uid, regular values..., sens)`.
pub fn dataset(schema: &Arc<Schema>, rows: &[Vec<f64>]) -> Dataset {
    let columns = (0..schema.len())
        .map(|a| rows.iter().map(|r| r[a]).collect())
        .collect();
    Dataset::new(schema.clone(), columns).unwrap()
}

pub fn domain_size(c: Col) -> usize {
    match c {
        Col::Cat(k) => k,
        Col::Ord(n) => n,
    }
}

pub fn random_rows<R: Rng>(cols: &[Col], n: usize, rng: &mut R) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| {
            let mut row = vec![i as f64 * 3.0 + 1.0];
            row.extend(cols.iter().map(|&c| rng.gen_range(0..domain_size(c)) as f64));
            row.push(f64::from(u8::from(rng.gen_bool(0.5))));
            row
        })
        .collect()
}

/// Any of the six operators with values from the attribute domain.
pub fn random_predicate<R: Rng>(c: Col, rng: &mut R) -> Predicate {
    let d = domain_size(c);
    let v = |rng: &mut R| rng.gen_range(0..d) as f64;
    match rng.gen_range(0..6) {
        0 => Predicate::Skip,
        1 => Predicate::Eq(v(rng)),
        2 => Predicate::Neq(v(rng)),
        3 => {
            let low = v(rng);
            Predicate::Between { low, high: low + rng.gen_range(1..4) as f64 }
        }
        4 => Predicate::In([v(rng), v(rng)]),
        _ => Predicate::NotIn([v(rng), v(rng)]),
    }
}

pub fn random_query<R: Rng>(cols: &[Col], rng: &mut R) -> Query {
    let width = cols.len() + 2;
    let mut conditions: Vec<Condition> = cols
        .iter()
        .enumerate()
        .map(|(i, &c)| Condition::new(i + 1, random_predicate(c, rng)))
        .collect();
    let sens = [Predicate::Skip, Predicate::Eq(0.0), Predicate::Eq(1.0), Predicate::Neq(1.0)];
    conditions.push(Condition::new(width - 1, *sens.choose(rng).unwrap()));
    Query::from_conditions(width, &conditions).unwrap()
}

/// The target known on every regular attribute.
pub fn full_target(schema: &Schema, user_id: u64, values: &[f64]) -> TargetRecord {
    TargetRecord::new(schema, user_id, schema.regular_indices(), values.to_vec()).unwrap()
}

/// Predicates biased towards the target's own value so that difference
/// shapes occur often.
fn target_biased_predicate<R: Rng>(c: Col, value: f64, rng: &mut R) -> Predicate {
    let d = domain_size(c) as f64;
    let other = (value + 1.0) % d;
    match rng.gen_range(0..8) {
        0 | 1 => Predicate::Skip,
        2 | 3 => Predicate::Eq(value),
        4 => Predicate::Neq(value),
        5 => Predicate::Eq(other),
        6 => Predicate::Between { low: value, high: value + 1.0 },
        _ => Predicate::NotIn([value, other]),
    }
}

/// Multisets with frequent difference-shaped pairs: half of the queries
/// are derived from earlier ones by adding or removing one condition.
pub fn pair_rich_multiset<R: Rng>(cols: &[Col], target: &[f64], m: usize, rng: &mut R) -> QueryMultiset {
    let width = cols.len() + 2;
    let sens = [Predicate::Skip, Predicate::Eq(0.0), Predicate::Eq(1.0), Predicate::Neq(1.0), Predicate::Neq(0.0)];
    let mut queries: Vec<Query> = Vec::with_capacity(m);
    while queries.len() < m {
        if !queries.is_empty() && rng.gen_bool(0.5) {
            let mut q = queries.choose(rng).unwrap().clone();
            let a = rng.gen_range(0..cols.len());
            let p = if q.predicate(a + 1).is_skip() {
                target_biased_predicate(cols[a], target[a], rng)
            } else {
                Predicate::Skip
            };
            q.set(a + 1, p);
            queries.push(q);
        } else {
            let mut conditions: Vec<Condition> = cols
                .iter()
                .enumerate()
                .map(|(i, &c)| Condition::new(i + 1, target_biased_predicate(c, target[i], rng)))
                .collect();
            conditions.push(Condition::new(width - 1, *sens.choose(rng).unwrap()));
            queries.push(Query::from_conditions(width, &conditions).unwrap());
        }
    }
    QueryMultiset::new(queries)
}

/// Brute-force difference-like classifier over all ordered pairs. With
/// `generalized` a condition selects the target when its predicate holds
/// on the target value; otherwise only `=`/`!=` on the target value count.
pub fn pair_oracle(multiset: &QueryMultiset, target: &[f64], generalized: bool) -> Vec<usize> {
    let qs = &multiset.queries;
    let sens = qs.first().map_or(0, |q| q.len() - 1);
    // Some(k) = shaped with k excluding conditions at the listed attributes
    let excluding = |q: &Query| -> Option<Vec<usize>> {
        match q.predicate(sens) {
            Predicate::Eq(v) | Predicate::Neq(v) if *v == 0.0 || *v == 1.0 => {}
            _ => return None,
        }
        let mut out = Vec::new();
        for a in 1..sens {
            let t = target[a - 1];
            let p = q.predicate(a);
            if p.is_skip() {
                continue;
            }
            let selects = if generalized {
                p.matches(t)
            } else {
                match *p {
                    Predicate::Eq(v) if v == t => true,
                    Predicate::Neq(v) if v == t => false,
                    _ => return None,
                }
            };
            if !selects {
                out.push(a);
            }
        }
        Some(out)
    };
    let mut flagged = vec![false; qs.len()];
    for i in 0..qs.len() {
        for j in 0..qs.len() {
            if i == j {
                continue;
            }
            let (Some(ei), Some(ej)) = (excluding(&qs[i]), excluding(&qs[j])) else {
                continue;
            };
            if ei.len() != 1 || !ej.is_empty() {
                continue;
            }
            let mut dropped = qs[i].clone();
            dropped.set(ei[0], Predicate::Skip);
            if dropped.predicates() == qs[j].predicates() {
                flagged[i] = true;
                flagged[j] = true;
            }
        }
    }
    (0..qs.len()).filter(|&p| flagged[p]).collect()
}
