use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::data::{AttributeRole, Dataset};

/// Minimum number of distinct users holding a shadow-table value.
pub const SHADOW_MIN_USERS: usize = 10;
/// Maximum number of shadow-table values per attribute.
pub const SHADOW_MAX_VALUES: usize = 200;
/// Share of single-user values from which an attribute is isolating.
pub const ISOLATING_RATIO: f64 = 0.8;

/// Defenses added on top of suppression, noise and rounding.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct MitigationConfig {
    /// Forbid `!=` and `IN` on isolating attributes.
    pub isolating_attributes: bool,
    /// Restrict `!=` and `IN` values to the shadow table.
    pub shadow_table: bool,
    /// Perturb queries without conditions.
    pub noise_when_no_conditions: bool,
    /// Seed dynamic noise from (min, max, count) of the userset ids.
    pub stats_dynamic_seed: bool,
}

impl MitigationConfig {
    pub fn all() -> Self {
        MitigationConfig {
            isolating_attributes: true,
            shadow_table: true,
            noise_when_no_conditions: true,
            stats_dynamic_seed: true,
        }
    }
}

/// Per-attribute values permitted in `!=` and `IN` conditions, sorted.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ShadowTable {
    permitted: Vec<Vec<f64>>,
}

impl ShadowTable {
    pub fn permits(&self, attribute: usize, value: f64) -> bool {
        self.permitted
            .get(attribute)
            .is_some_and(|vs| vs.binary_search_by(|v| v.total_cmp(&value)).is_ok())
    }

    pub fn values(&self, attribute: usize) -> &[f64] {
        &self.permitted[attribute]
    }
}

fn value_counts(column: &[f64]) -> Vec<(f64, usize)> {
    let mut counts: HashMap<u64, usize> = HashMap::new();
    for v in column {
        // rows are distinct users, so occurrences count users
        *counts.entry(v.to_bits()).or_default() += 1;
    }
    counts
        .into_iter()
        .map(|(bits, c)| (f64::from_bits(bits), c))
        .collect()
}

/// Values held by at least 10 users, the 200 most frequent per attribute
/// (frequency ties favor the smaller value). The user id has no entries.
pub fn build_shadow_table(dataset: &Dataset) -> ShadowTable {
    let schema = dataset.schema();
    let permitted = (0..schema.len())
        .map(|a| {
            if schema.attribute(a).role == AttributeRole::UserId {
                return Vec::new();
            }
            let mut qualifying: Vec<(f64, usize)> = value_counts(dataset.column(a))
                .into_iter()
                .filter(|(_, c)| *c >= SHADOW_MIN_USERS)
                .collect();
            qualifying.sort_by(|x, y| y.1.cmp(&x.1).then(x.0.total_cmp(&y.0)));
            qualifying.truncate(SHADOW_MAX_VALUES);
            let mut values: Vec<f64> = qualifying.into_iter().map(|(v, _)| v).collect();
            values.sort_by(f64::total_cmp);
            values
        })
        .collect();
    ShadowTable { permitted }
}

/// True iff at least 80% of the attribute's distinct values are held by a
/// single user.
pub fn is_isolating(dataset: &Dataset, attribute: usize) -> bool {
    let counts = value_counts(dataset.column(attribute));
    if counts.is_empty() {
        return false;
    }
    let singletons = counts.iter().filter(|(_, c)| *c == 1).count();
    singletons as f64 >= ISOLATING_RATIO * counts.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::fixtures::small;

    fn with_b(values: &[f64]) -> Dataset {
        let rows: Vec<_> = values
            .iter()
            .enumerate()
            .map(|(i, &b)| (i as u64, 0.0, b, 0.0))
            .collect();
        small(&rows)
    }

    #[test]
    fn isolating_boundaries() {
        let unique: Vec<f64> = (0..20).map(f64::from).collect();
        assert!(is_isolating(&with_b(&unique), 2));
        let binary: Vec<f64> = (0..100).map(|i| f64::from(i % 2)).collect();
        assert!(!is_isolating(&with_b(&binary), 2));
        // 10 distinct values, 8 of them singletons: exactly 0.8
        let mut vals: Vec<f64> = (0..8).map(f64::from).collect();
        vals.extend([50.0, 50.0, 60.0, 60.0]);
        assert!(is_isolating(&with_b(&vals), 2));
        // 7 singletons out of 10: below the boundary
        let mut vals: Vec<f64> = (0..7).map(f64::from).collect();
        vals.extend([50.0, 50.0, 60.0, 60.0, 70.0, 70.0]);
        assert!(!is_isolating(&with_b(&vals), 2));
        assert!(is_isolating(&with_b(&unique), 0));
    }

    #[test]
    fn shadow_table_minimum_users() {
        let mut vals: Vec<f64> = (0..30).map(f64::from).collect();
        vals.extend(std::iter::repeat_n(90.0, 10));
        vals.extend(std::iter::repeat_n(91.0, 9));
        let table = build_shadow_table(&with_b(&vals));
        assert_eq!(table.values(2), &[90.0]);
        assert!(table.permits(2, 90.0));
        assert!(!table.permits(2, 91.0));
        assert!(table.values(0).is_empty());
    }
}
