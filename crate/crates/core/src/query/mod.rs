//! COUNT queries with one AND-joined condition slot per attribute.
//!
//! A [`Query`] stores a [`Predicate`] for every attribute of the schema it
//! was built for; [`Predicate::Skip`] means the attribute is unconstrained.
//! [`QuerySyntax`] describes which operators and values a query-based system
//! accepts: the limited syntax plus any of the four extension axes.

mod count;
mod generate;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::{AttributeRole, Dataset, Schema, TargetRecord};
use crate::error::{Error, Result};

pub use count::{count_multisets, log10_biguint};
pub use generate::{
    operator_types, random_value_for_operator, range_offset, snap, QueryGenerator, ValuePool,
    RANGE_WIDTHS, SEARCH_SENSITIVE_VALUE, SENTINEL,
};

/// Field separator inside a serialized condition.
const FIELD_SEP: u8 = 0x1F;
/// Separator between serialized conditions.
const CONDITION_SEP: u8 = 0x1E;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Operator {
    Skip,
    Eq,
    Neq,
    Between,
    In,
    NotIn,
}

impl Operator {
    pub const ALL: [Operator; 6] = [
        Operator::Skip,
        Operator::Eq,
        Operator::Neq,
        Operator::Between,
        Operator::In,
        Operator::NotIn,
    ];

    fn tag(self) -> u8 {
        match self {
            Operator::Skip => b'_',
            Operator::Eq => b'=',
            Operator::Neq => b'!',
            Operator::Between => b'B',
            Operator::In => b'I',
            Operator::NotIn => b'N',
        }
    }
}

/// An operator together with its payload.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Predicate {
    Skip,
    Eq(f64),
    Neq(f64),
    /// Half-open range `low <= v < high`.
    Between { low: f64, high: f64 },
    In([f64; 2]),
    NotIn([f64; 2]),
}

impl Predicate {
    pub fn operator(&self) -> Operator {
        match self {
            Predicate::Skip => Operator::Skip,
            Predicate::Eq(_) => Operator::Eq,
            Predicate::Neq(_) => Operator::Neq,
            Predicate::Between { .. } => Operator::Between,
            Predicate::In(_) => Operator::In,
            Predicate::NotIn(_) => Operator::NotIn,
        }
    }

    pub fn is_skip(&self) -> bool {
        matches!(self, Predicate::Skip)
    }

    #[inline]
    pub fn matches(&self, v: f64) -> bool {
        match *self {
            Predicate::Skip => true,
            Predicate::Eq(x) => v == x,
            Predicate::Neq(x) => v != x,
            Predicate::Between { low, high } => low <= v && v < high,
            Predicate::In([a, b]) => v == a || v == b,
            Predicate::NotIn([a, b]) => v != a && v != b,
        }
    }

    /// Payload values in canonical order (IN sets sorted).
    pub fn values(&self) -> Vec<f64> {
        match *self {
            Predicate::Skip => Vec::new(),
            Predicate::Eq(x) | Predicate::Neq(x) => vec![x],
            Predicate::Between { low, high } => vec![low, high],
            Predicate::In([a, b]) | Predicate::NotIn([a, b]) => {
                let mut set = [a, b];
                set.sort_by(f64::total_cmp);
                set.to_vec()
            }
        }
    }
}

/// A single `attribute operator payload` constraint.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub attribute: usize,
    pub predicate: Predicate,
}

impl Condition {
    pub fn new(attribute: usize, predicate: Predicate) -> Self {
        Condition {
            attribute,
            predicate,
        }
    }
}

/// `SELECT count(*) WHERE c_1 AND ... AND c_n`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Query {
    predicates: Vec<Predicate>,
}

impl Query {
    /// A query with every slot skipped, i.e. a count of all users.
    pub fn unconditioned(attributes: usize) -> Self {
        Query {
            predicates: vec![Predicate::Skip; attributes],
        }
    }

    /// Builds a query from conditions given in any order.
    pub fn from_conditions(attributes: usize, conditions: &[Condition]) -> Result<Self> {
        let mut query = Query::unconditioned(attributes);
        for c in conditions {
            if c.attribute >= attributes {
                return Err(Error::Query(format!(
                    "attribute index {} out of range",
                    c.attribute
                )));
            }
            if !query.predicates[c.attribute].is_skip() {
                return Err(Error::Query(format!(
                    "attribute {} constrained twice",
                    c.attribute
                )));
            }
            query.predicates[c.attribute] = c.predicate;
        }
        Ok(query)
    }

    pub fn len(&self) -> usize {
        self.predicates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predicates.is_empty()
    }

    pub fn predicate(&self, attribute: usize) -> &Predicate {
        &self.predicates[attribute]
    }

    pub fn predicates(&self) -> &[Predicate] {
        &self.predicates
    }

    pub fn set(&mut self, attribute: usize, predicate: Predicate) {
        self.predicates[attribute] = predicate;
    }

    /// Non-skip conditions in attribute order.
    pub fn conditions(&self) -> impl Iterator<Item = Condition> + '_ {
        self.predicates
            .iter()
            .enumerate()
            .filter(|(_, p)| !p.is_skip())
            .map(|(a, p)| Condition::new(a, *p))
    }

    pub fn condition_count(&self) -> usize {
        self.predicates.iter().filter(|p| !p.is_skip()).count()
    }

    /// Whether a record with the given per-attribute values satisfies the query.
    pub fn matches_record(&self, value: impl Fn(usize) -> f64) -> bool {
        self.conditions().all(|c| c.predicate.matches(value(c.attribute)))
    }

    /// SQL-like text for logs and reports, with attribute names from `schema`.
    pub fn to_sql(&self, schema: &Schema) -> String {
        let parts: Vec<String> = self
            .conditions()
            .map(|c| {
                let name = &schema.attribute(c.attribute).name;
                match c.predicate {
                    Predicate::Skip => unreachable!("conditions() filters skips"),
                    Predicate::Eq(x) => format!("{name} EQ {}", num(x)),
                    Predicate::Neq(x) => format!("{name} NEQ {}", num(x)),
                    Predicate::Between { low, high } => {
                        format!("{name} BETWEEN ({},{})", num(low), num(high))
                    }
                    Predicate::In([a, b]) => format!("{name} IN ({},{})", num(a), num(b)),
                    Predicate::NotIn([a, b]) => format!("{name} NOT IN ({},{})", num(a), num(b)),
                }
            })
            .collect();
        if parts.is_empty() {
            "SELECT count(*)".to_string()
        } else {
            format!("SELECT count(*) WHERE {}", parts.join(" AND "))
        }
    }
}

fn num(v: f64) -> String {
    crate::data::format_number(v)
}

/// Fixed-point rendering used for canonical bytes; `-0` prints as `0`.
fn fixed6(v: f64) -> String {
    let s = format!("{v:.6}");
    match s.strip_prefix('-') {
        Some(rest) if rest.bytes().all(|b| b == b'0' || b == b'.') => rest.to_string(),
        _ => s,
    }
}

/// Canonical bytes of one condition: name, tag and payload separated by 0x1F.
pub fn condition_bytes(schema: &Schema, condition: &Condition) -> Vec<u8> {
    let mut out = Vec::with_capacity(32);
    out.extend_from_slice(schema.attribute(condition.attribute).name.as_bytes());
    out.push(FIELD_SEP);
    out.push(condition.predicate.operator().tag());
    for v in condition.predicate.values() {
        out.push(FIELD_SEP);
        out.extend_from_slice(fixed6(v).as_bytes());
    }
    out
}

/// Injective byte encoding of a query's non-skip conditions in attribute
/// order, separated by 0x1E. Used as the noise seed and the cache key.
pub fn canonical_form(schema: &Schema, query: &Query) -> Vec<u8> {
    let mut out = Vec::new();
    for (i, c) in query.conditions().enumerate() {
        if i > 0 {
            out.push(CONDITION_SEP);
        }
        out.extend(condition_bytes(schema, &c));
    }
    out
}

/// Rows of `dataset` satisfying every condition of `query`, ascending.
pub fn matching_rows(dataset: &Dataset, query: &Query) -> Vec<usize> {
    let conditions: Vec<(&[f64], Predicate)> = query
        .conditions()
        .map(|c| (dataset.column(c.attribute), c.predicate))
        .collect();
    (0..dataset.len())
        .filter(|&row| conditions.iter().all(|(col, p)| p.matches(col[row])))
        .collect()
}

/// The userset `Y(D, q)` as sorted user ids.
pub fn evaluate_userset(dataset: &Dataset, query: &Query) -> Vec<u64> {
    let ids = dataset.user_ids();
    let mut users: Vec<u64> = matching_rows(dataset, query)
        .into_iter()
        .map(|r| ids[r])
        .collect();
    users.sort_unstable();
    users
}

/// The four syntax extension axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Axis {
    /// Arbitrary condition values.
    D1,
    /// Ranges on ordinal attributes.
    D2,
    /// Two-element `IN` sets.
    D3,
    /// Two-element `NOT IN` sets.
    D4,
}

impl Axis {
    pub const ALL: [Axis; 4] = [Axis::D1, Axis::D2, Axis::D3, Axis::D4];
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl std::str::FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "D1" => Ok(Axis::D1),
            "D2" => Ok(Axis::D2),
            "D3" => Ok(Axis::D3),
            "D4" => Ok(Axis::D4),
            other => Err(Error::InvalidParameter(format!("unknown syntax axis {other}"))),
        }
    }
}

/// The limited syntax extended along a set of axes. `D2` requires `D1`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<Axis>", into = "Vec<Axis>")]
pub struct QuerySyntax {
    axes: [bool; 4],
}

impl QuerySyntax {
    /// The limited syntax: `{skip, =, !=}` with the target's values.
    pub fn limited() -> Self {
        QuerySyntax::default()
    }

    /// Every axis enabled.
    pub fn full() -> Self {
        QuerySyntax { axes: [true; 4] }
    }

    pub fn new(axes: &[Axis]) -> Result<Self> {
        let mut syntax = QuerySyntax::limited();
        for &axis in axes {
            syntax.axes[axis as usize] = true;
        }
        if syntax.has(Axis::D2) && !syntax.has(Axis::D1) {
            return Err(Error::InvalidParameter(
                "syntax axis D2 requires D1".into(),
            ));
        }
        Ok(syntax)
    }

    pub fn has(&self, axis: Axis) -> bool {
        self.axes[axis as usize]
    }

    pub fn is_limited(&self) -> bool {
        self.axes == [false; 4]
    }

    pub fn axes(&self) -> Vec<Axis> {
        Axis::ALL.into_iter().filter(|a| self.has(*a)).collect()
    }

    pub fn with(&self, axis: Axis) -> Result<Self> {
        let mut axes = self.axes();
        axes.push(axis);
        QuerySyntax::new(&axes)
    }

    /// Extended operators available on an attribute under this syntax.
    pub fn extended_operators(&self, ordinal: bool) -> Vec<Operator> {
        let mut ops = Vec::new();
        if self.has(Axis::D2) && ordinal {
            ops.push(Operator::Between);
        }
        if self.has(Axis::D3) {
            ops.push(Operator::In);
        }
        if self.has(Axis::D4) {
            ops.push(Operator::NotIn);
        }
        ops
    }
}

impl TryFrom<Vec<Axis>> for QuerySyntax {
    type Error = Error;

    fn try_from(axes: Vec<Axis>) -> Result<Self> {
        QuerySyntax::new(&axes)
    }
}

impl From<QuerySyntax> for Vec<Axis> {
    fn from(syntax: QuerySyntax) -> Self {
        syntax.axes()
    }
}

impl fmt::Display for QuerySyntax {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_limited() {
            return write!(f, "lim");
        }
        let names: Vec<String> = self.axes().iter().map(Axis::to_string).collect();
        write!(f, "lim+{}", names.join("+"))
    }
}

/// True iff `w > 0` is `{1, 2, 5} * 10^e` for some integer `e`.
pub fn is_grid_width(w: f64) -> bool {
    if !(w.is_finite() && w > 0.0) {
        return false;
    }
    let e = w.log10().floor();
    let mantissa = w / 10f64.powf(e);
    [1.0, 2.0, 5.0, 10.0]
        .iter()
        .any(|m| (mantissa - m).abs() <= 1e-6 * m)
}

/// True iff `[low, high)` lies on the range grid: grid width and
/// `low = 2kw` or `low = (2k + 1/2)w`.
pub fn is_grid_range(low: f64, high: f64) -> bool {
    let w = high - low;
    if !(low.is_finite() && high.is_finite() && w > 0.0 && is_grid_width(w)) {
        return false;
    }
    // low = (t / 2) w with t ≡ 0 or 1 (mod 4)
    let t = 2.0 * low / w;
    let nearest = t.round();
    if (t - nearest).abs() > 1e-6 * nearest.abs().max(1.0) {
        return false;
    }
    matches!(nearest.rem_euclid(4.0) as i64, 0 | 1)
}

/// Whether `query` is legal under `syntax` for `schema`. When `target` is
/// given, the limited syntax additionally pins non-sensitive values to the
/// target's known values.
pub fn is_supported(
    query: &Query,
    syntax: &QuerySyntax,
    schema: &Schema,
    target: Option<&TargetRecord>,
) -> bool {
    if query.len() != schema.len() {
        return false;
    }
    query.conditions().all(|c| {
        let attr = schema.attribute(c.attribute);
        let value_ok = |v: f64| -> bool {
            if !v.is_finite() {
                return false;
            }
            if syntax.has(Axis::D1) {
                return true;
            }
            match attr.role {
                AttributeRole::Sensitive => v == 0.0 || v == 1.0,
                AttributeRole::Regular => {
                    target.is_none_or(|t| t.value_of(c.attribute) == Some(v))
                }
                AttributeRole::UserId => false,
            }
        };
        if attr.role == AttributeRole::UserId {
            return false;
        }
        match c.predicate {
            Predicate::Skip => true,
            Predicate::Eq(x) | Predicate::Neq(x) => value_ok(x),
            Predicate::Between { low, high } => {
                syntax.has(Axis::D2) && attr.is_ordinal() && is_grid_range(low, high)
            }
            Predicate::In([a, b]) => syntax.has(Axis::D3) && value_ok(a) && value_ok(b),
            Predicate::NotIn([a, b]) => syntax.has(Axis::D4) && value_ok(a) && value_ok(b),
        }
    })
}

/// A multiset of `m` queries; position `j` is feature `j` of the attack model.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct QueryMultiset {
    pub queries: Vec<Query>,
}

impl QueryMultiset {
    pub fn new(queries: Vec<Query>) -> Self {
        QueryMultiset { queries }
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn to_sql(&self, schema: &Schema) -> Vec<String> {
        self.queries.iter().map(|q| q.to_sql(schema)).collect()
    }

    /// The queries at `positions`, in that order.
    pub fn subset(&self, positions: &[usize]) -> QueryMultiset {
        QueryMultiset::new(positions.iter().map(|&p| self.queries[p].clone()).collect())
    }
}
