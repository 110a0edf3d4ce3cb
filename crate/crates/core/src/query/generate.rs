use rand::seq::SliceRandom;
use rand::Rng;

use super::{Operator, Predicate, Query, QuerySyntax, Axis};
use crate::data::{AttributeRole, Dataset, Schema, TargetRecord};
use crate::error::{Error, Result};

/// Range widths the generator draws from.
pub const RANGE_WIDTHS: [f64; 9] = [0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0, 2.0, 5.0];

/// A value no record holds, used as the second element of generated sets.
pub const SENTINEL: f64 = -1_000_000.0;

/// Value the generator uses for the sensitive attribute's conditions.
pub const SEARCH_SENSITIVE_VALUE: f64 = 1.0;

/// Rounds to the 1e-6 grid used by canonical serialization.
pub fn snap(v: f64) -> f64 {
    let s = (v * 1e6).round() / 1e6;
    if s == 0.0 {
        0.0
    } else {
        s
    }
}

/// Empirical distribution of one auxiliary column.
#[derive(Clone, Debug, PartialEq)]
pub struct ValuePool {
    values: Vec<f64>,
    counts: Vec<usize>,
    total: usize,
}

impl ValuePool {
    pub fn from_column(column: &[f64]) -> Self {
        let mut sorted = column.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mut values = Vec::new();
        let mut counts: Vec<usize> = Vec::new();
        for v in sorted {
            if values.last() == Some(&v) {
                *counts.last_mut().expect("parallel to values") += 1;
            } else {
                values.push(v);
                counts.push(1);
            }
        }
        ValuePool {
            values,
            counts,
            total: column.len(),
        }
    }

    /// A record-weighted draw among values different from `r`.
    pub fn sample_other<R: Rng + ?Sized>(&self, r: f64, rng: &mut R) -> Option<f64> {
        let excluded: usize = self
            .values
            .iter()
            .zip(&self.counts)
            .filter(|(v, _)| **v == r)
            .map(|(_, c)| *c)
            .sum();
        let pool = self.total - excluded;
        if pool == 0 {
            return None;
        }
        let mut k = rng.gen_range(0..pool);
        for (&v, &c) in self.values.iter().zip(&self.counts) {
            if v == r {
                continue;
            }
            if k < c {
                return Some(v);
            }
            k -= c;
        }
        unreachable!("k < pool")
    }
}

/// Grid offsets around `r` for width `w`: the closest point of the form
/// `2kw` or `(2k + 1/2)w`. The first form wins only when strictly closer.
pub fn range_offset(r: f64, w: f64) -> f64 {
    let k1 = (r / (2.0 * w)).round();
    let k2 = ((2.0 * r - w) / (4.0 * w)).round();
    let offset1 = w * 2.0 * k1;
    let offset2 = w * (2.0 * k2 + 0.5);
    if (r - offset1).abs() < (r - offset2).abs() {
        snap(offset1)
    } else {
        snap(offset2)
    }
}

/// Draws a payload for `operator` around the target value `r`.
///
/// Without arbitrary values (axis D1) every payload is built from `r`
/// alone. Otherwise a random grid width and offset are drawn and the
/// payload mixes `r`, the offset, a different auxiliary value or the
/// sentinel depending on the operator.
pub fn random_value_for_operator<R: Rng + ?Sized>(
    operator: Operator,
    syntax: &QuerySyntax,
    r: f64,
    aux: &ValuePool,
    rng: &mut R,
) -> Result<Predicate> {
    if !syntax.has(Axis::D1) {
        return Ok(match operator {
            Operator::Skip => Predicate::Skip,
            Operator::Eq => Predicate::Eq(r),
            Operator::Neq => Predicate::Neq(r),
            Operator::In => Predicate::In([r, r]),
            Operator::NotIn => Predicate::NotIn([r, r]),
            Operator::Between => {
                return Err(Error::Query("ranges require arbitrary values".into()))
            }
        });
    }
    let w = *RANGE_WIDTHS.choose(rng).expect("nonempty");
    let offset = range_offset(r, w);
    let aux_value = |rng: &mut R| {
        aux.sample_other(r, rng).ok_or_else(|| {
            Error::InsufficientData(format!("no auxiliary value differs from {r}"))
        })
    };
    Ok(match operator {
        Operator::Skip => Predicate::Skip,
        Operator::Between => Predicate::Between {
            low: offset,
            high: snap(offset + w),
        },
        Operator::Eq => {
            if rng.gen_bool(0.5) {
                Predicate::Eq(r)
            } else {
                Predicate::Eq(aux_value(rng)?)
            }
        }
        Operator::Neq => Predicate::Neq(if rng.gen_bool(0.5) { r } else { offset }),
        Operator::In | Operator::NotIn => {
            let x = if rng.gen_bool(0.5) {
                aux_value(rng)?
            } else {
                SENTINEL
            };
            if operator == Operator::In {
                Predicate::In([r, x])
            } else {
                Predicate::NotIn([r, x])
            }
        }
    })
}

/// Operator groups sampled by the generator: `{skip}`, `{=, !=}` and the
/// available extended operators. With no extended operator the single
/// group `{skip, =, !=}` is used.
pub fn operator_types(syntax: &QuerySyntax, ordinal: bool) -> Vec<Vec<Operator>> {
    let extended = syntax.extended_operators(ordinal);
    if extended.is_empty() {
        vec![vec![Operator::Skip, Operator::Eq, Operator::Neq]]
    } else {
        vec![
            vec![Operator::Skip],
            vec![Operator::Eq, Operator::Neq],
            extended,
        ]
    }
}

#[derive(Clone, Debug)]
enum Slot {
    Fixed,
    Known {
        ordinal: bool,
        value: f64,
        pool: ValuePool,
    },
    Sensitive,
}

/// Random query generator for one target and auxiliary dataset.
///
/// Attributes the target is not known on (and the user id) are always
/// skipped. Sensitive conditions use the value 1 with `{skip, =, !=}`.
#[derive(Clone, Debug)]
pub struct QueryGenerator {
    slots: Vec<Slot>,
}

impl QueryGenerator {
    pub fn new(schema: &Schema, target: &TargetRecord, aux: &Dataset) -> Result<Self> {
        if aux.schema().len() != schema.len() {
            return Err(Error::Schema(
                "auxiliary dataset must share the query schema".into(),
            ));
        }
        let slots = (0..schema.len())
            .map(|a| {
                let attr = schema.attribute(a);
                match (attr.role, target.value_of(a)) {
                    (AttributeRole::Sensitive, _) => Slot::Sensitive,
                    (AttributeRole::Regular, Some(value)) => Slot::Known {
                        ordinal: attr.is_ordinal(),
                        value,
                        pool: ValuePool::from_column(aux.column(a)),
                    },
                    _ => Slot::Fixed,
                }
            })
            .collect();
        Ok(QueryGenerator { slots })
    }

    pub fn attributes(&self) -> usize {
        self.slots.len()
    }

    /// Attributes the generator may constrain.
    pub fn free_attributes(&self) -> Vec<usize> {
        (0..self.slots.len())
            .filter(|&a| !matches!(self.slots[a], Slot::Fixed))
            .collect()
    }

    pub fn random_operator<R: Rng + ?Sized>(
        &self,
        attribute: usize,
        syntax: &QuerySyntax,
        rng: &mut R,
    ) -> Operator {
        let types = match &self.slots[attribute] {
            Slot::Fixed => return Operator::Skip,
            Slot::Sensitive => operator_types(&QuerySyntax::limited(), false),
            Slot::Known { ordinal, .. } => operator_types(syntax, *ordinal),
        };
        let group = types.choose(rng).expect("nonempty");
        *group.choose(rng).expect("nonempty")
    }

    pub fn random_predicate<R: Rng + ?Sized>(
        &self,
        attribute: usize,
        operator: Operator,
        syntax: &QuerySyntax,
        rng: &mut R,
    ) -> Result<Predicate> {
        match &self.slots[attribute] {
            Slot::Fixed => Ok(Predicate::Skip),
            Slot::Sensitive => Ok(match operator {
                Operator::Eq => Predicate::Eq(SEARCH_SENSITIVE_VALUE),
                Operator::Neq => Predicate::Neq(SEARCH_SENSITIVE_VALUE),
                _ => Predicate::Skip,
            }),
            Slot::Known { value, pool, .. } => {
                random_value_for_operator(operator, syntax, *value, pool, rng)
            }
        }
    }

    /// Redraws the condition on one attribute.
    pub fn random_condition<R: Rng + ?Sized>(
        &self,
        attribute: usize,
        syntax: &QuerySyntax,
        rng: &mut R,
    ) -> Result<Predicate> {
        let op = self.random_operator(attribute, syntax, rng);
        self.random_predicate(attribute, op, syntax, rng)
    }

    pub fn random_query<R: Rng + ?Sized>(&self, syntax: &QuerySyntax, rng: &mut R) -> Result<Query> {
        let mut query = Query::unconditioned(self.slots.len());
        for a in 0..self.slots.len() {
            query.set(a, self.random_condition(a, syntax, rng)?);
        }
        Ok(query)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::fixtures::small;
    use crate::query::is_supported;
    use crate::seed::rng_from_seed;

    #[test]
    fn offsets_follow_grid_arithmetic() {
        assert_eq!(range_offset(12.0, 5.0), 12.5);
        assert_eq!(range_offset(0.0, 1.0), 0.0);
        assert_eq!(range_offset(40.0, 1.0), 40.0);
        // equidistant from 0 and 0.5: the second form wins the tie
        assert_eq!(range_offset(0.25, 1.0), 0.5);
    }

    #[test]
    fn limited_values_are_target_values() {
        let pool = ValuePool::from_column(&[1.0, 2.0]);
        let lim = QuerySyntax::limited();
        let mut rng = rng_from_seed(0);
        for op in [Operator::Eq, Operator::Neq] {
            let p = random_value_for_operator(op, &lim, 7.0, &pool, &mut rng).unwrap();
            assert_eq!(p.values(), vec![7.0]);
        }
    }

    #[test]
    fn neq_value_is_target_or_offset() {
        let pool = ValuePool::from_column(&[1.0, 2.0]);
        let d1 = QuerySyntax::new(&[Axis::D1]).unwrap();
        let mut rng = rng_from_seed(1);
        for _ in 0..200 {
            let p = random_value_for_operator(Operator::Neq, &d1, 7.0, &pool, &mut rng).unwrap();
            let Predicate::Neq(v) = p else { panic!() };
            let offsets: Vec<f64> = RANGE_WIDTHS.iter().map(|&w| range_offset(7.0, w)).collect();
            assert!(v == 7.0 || offsets.contains(&v), "{v}");
        }
    }

    #[test]
    fn set_values_use_aux_or_sentinel() {
        let pool = ValuePool::from_column(&[7.0, 7.0, 3.0]);
        let d1 = QuerySyntax::new(&[Axis::D1, Axis::D3]).unwrap();
        let mut rng = rng_from_seed(2);
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..100 {
            let Predicate::In([r, x]) =
                random_value_for_operator(Operator::In, &d1, 7.0, &pool, &mut rng).unwrap()
            else {
                panic!()
            };
            assert_eq!(r, 7.0);
            seen.insert(x as i64);
        }
        assert_eq!(seen.into_iter().collect::<Vec<_>>(), vec![-1_000_000, 3]);
    }

    #[test]
    fn missing_aux_alternative_is_an_error() {
        let pool = ValuePool::from_column(&[7.0, 7.0]);
        let d1 = QuerySyntax::new(&[Axis::D1]).unwrap();
        let errors = (0..20)
            .filter(|&s| {
                random_value_for_operator(Operator::Eq, &d1, 7.0, &pool, &mut rng_from_seed(s))
                    .is_err()
            })
            .count();
        assert!(errors > 0);
    }

    #[test]
    fn operator_type_sets() {
        let d3 = QuerySyntax::new(&[Axis::D3]).unwrap();
        assert_eq!(
            operator_types(&d3, true),
            vec![
                vec![Operator::Skip],
                vec![Operator::Eq, Operator::Neq],
                vec![Operator::In]
            ]
        );
        assert_eq!(operator_types(&QuerySyntax::limited(), true).len(), 1);
        let d12 = QuerySyntax::new(&[Axis::D1, Axis::D2]).unwrap();
        assert_eq!(operator_types(&d12, false).len(), 1);
    }

    #[test]
    fn generated_queries_are_supported_and_deterministic() {
        let rows: Vec<_> = (0..60)
            .map(|i| (i, (i % 3) as f64, (i % 40) as f64, (i % 2) as f64))
            .collect();
        let d = small(&rows);
        let target = TargetRecord::from_row(&d, 5);
        let generator = QueryGenerator::new(d.schema(), &target, &d).unwrap();
        for syntax in [
            QuerySyntax::limited(),
            QuerySyntax::new(&[Axis::D3]).unwrap(),
            QuerySyntax::full(),
        ] {
            for s in 0..200 {
                let q = generator.random_query(&syntax, &mut rng_from_seed(s)).unwrap();
                assert!(is_supported(&q, &syntax, d.schema(), Some(&target)), "{q:?}");
                assert!(q.predicate(0).is_skip());
                let again = generator.random_query(&syntax, &mut rng_from_seed(s)).unwrap();
                assert_eq!(q, again);
            }
        }
    }
}
