//! Tabular datasets with integer-encoded categorical attributes.
//!
//! Every dataset carries a synthetic user-id attribute (`uid`, always at
//! index 0 for loaded data) and exactly one binary sensitive attribute.
//! Values are stored column-major as `f64`; categorical codes are small
//! non-negative integers.

mod csv_io;
mod sample;

use std::collections::HashSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub(crate) use csv_io::format_number;
pub use csv_io::{load_csv, load_schema_config, write_csv, ColumnSpec, SchemaConfig, ValueFormat};
pub use sample::{
    check_uniqueness, sample_mia_shadow_dataset, sample_shadow_dataset, split_halves,
    synth_from_marginals, unique_rows, ShadowDataset,
};

/// Name of the synthetic user-id attribute assigned at load.
pub const USER_ID_NAME: &str = "uid";
/// Label given to missing categorical values.
pub const UNKNOWN_LABEL: &str = "Unknown";

/// Ids are stored alongside the `f64` columns, so they must be exactly representable.
const MAX_USER_ID: u64 = 1 << 53;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributeKind {
    Categorical,
    Ordinal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributeRole {
    UserId,
    Regular,
    Sensitive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeSchema {
    pub name: String,
    pub kind: AttributeKind,
    pub role: AttributeRole,
    /// Sorted distinct values. Empty for the user-id attribute, whose values
    /// are unconstrained ids.
    pub domain: Vec<f64>,
    /// Decode table for categorical attributes: `labels[code]`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub labels: Vec<String>,
}

impl AttributeSchema {
    pub fn user_id() -> Self {
        AttributeSchema {
            name: USER_ID_NAME.to_string(),
            kind: AttributeKind::Categorical,
            role: AttributeRole::UserId,
            domain: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn categorical(name: impl Into<String>, labels: Vec<String>) -> Self {
        let domain = (0..labels.len()).map(|c| c as f64).collect();
        AttributeSchema {
            name: name.into(),
            kind: AttributeKind::Categorical,
            role: AttributeRole::Regular,
            domain,
            labels,
        }
    }

    pub fn ordinal(name: impl Into<String>, mut domain: Vec<f64>) -> Self {
        domain.sort_by(f64::total_cmp);
        domain.dedup();
        AttributeSchema {
            name: name.into(),
            kind: AttributeKind::Ordinal,
            role: AttributeRole::Regular,
            domain,
            labels: Vec::new(),
        }
    }

    /// The binary sensitive attribute with domain `{0, 1}`.
    pub fn sensitive(name: impl Into<String>, labels: Vec<String>) -> Self {
        AttributeSchema {
            name: name.into(),
            kind: AttributeKind::Categorical,
            role: AttributeRole::Sensitive,
            domain: vec![0.0, 1.0],
            labels,
        }
    }

    pub fn is_ordinal(&self) -> bool {
        self.kind == AttributeKind::Ordinal
    }

    pub fn contains(&self, value: f64) -> bool {
        self.role == AttributeRole::UserId
            || self.domain.binary_search_by(|d| d.total_cmp(&value)).is_ok()
    }

    /// Categorical code for `label`, if any.
    pub fn encode(&self, label: &str) -> Option<f64> {
        self.labels
            .iter()
            .position(|l| l == label)
            .map(|code| code as f64)
    }

    pub fn decode(&self, code: f64) -> Option<&str> {
        if code < 0.0 || code.fract() != 0.0 {
            return None;
        }
        self.labels.get(code as usize).map(String::as_str)
    }
}

/// Attribute list with exactly one user-id and one sensitive attribute.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<AttributeSchema>", into = "Vec<AttributeSchema>")]
pub struct Schema {
    attributes: Vec<AttributeSchema>,
    user_id: usize,
    sensitive: usize,
}

impl Schema {
    pub fn new(attributes: Vec<AttributeSchema>) -> Result<Self> {
        let ids: Vec<usize> = role_positions(&attributes, AttributeRole::UserId);
        let sens: Vec<usize> = role_positions(&attributes, AttributeRole::Sensitive);
        if ids.len() != 1 {
            return Err(Error::Schema(format!(
                "expected exactly one user-id attribute, found {}",
                ids.len()
            )));
        }
        if sens.len() != 1 {
            return Err(Error::Schema(format!(
                "expected exactly one sensitive attribute, found {}",
                sens.len()
            )));
        }
        let mut names = HashSet::new();
        for attr in &attributes {
            if !names.insert(attr.name.as_str()) {
                return Err(Error::Schema(format!("duplicate attribute {}", attr.name)));
            }
            if attr.kind == AttributeKind::Categorical && attr.role != AttributeRole::UserId {
                let dense = attr
                    .domain
                    .iter()
                    .enumerate()
                    .all(|(i, v)| *v == i as f64);
                if !dense {
                    return Err(Error::Schema(format!(
                        "categorical attribute {} must be encoded as 0, 1, ...",
                        attr.name
                    )));
                }
            }
        }
        let sensitive = &attributes[sens[0]];
        if sensitive.domain != [0.0, 1.0] {
            return Err(Error::Schema(format!(
                "sensitive attribute {} must have domain {{0, 1}}",
                sensitive.name
            )));
        }
        Ok(Schema {
            user_id: ids[0],
            sensitive: sens[0],
            attributes,
        })
    }

    pub fn len(&self) -> usize {
        self.attributes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attributes.is_empty()
    }

    pub fn attributes(&self) -> &[AttributeSchema] {
        &self.attributes
    }

    pub fn attribute(&self, index: usize) -> &AttributeSchema {
        &self.attributes[index]
    }

    pub fn user_id_index(&self) -> usize {
        self.user_id
    }

    pub fn sensitive_index(&self) -> usize {
        self.sensitive
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.attributes.iter().position(|a| a.name == name)
    }

    /// Indices of the regular (non-id, non-sensitive) attributes.
    pub fn regular_indices(&self) -> Vec<usize> {
        role_positions(&self.attributes, AttributeRole::Regular)
    }
}

impl TryFrom<Vec<AttributeSchema>> for Schema {
    type Error = Error;

    fn try_from(attributes: Vec<AttributeSchema>) -> Result<Self> {
        Schema::new(attributes)
    }
}

impl From<Schema> for Vec<AttributeSchema> {
    fn from(schema: Schema) -> Self {
        schema.attributes
    }
}

fn role_positions(attributes: &[AttributeSchema], role: AttributeRole) -> Vec<usize> {
    attributes
        .iter()
        .enumerate()
        .filter(|(_, a)| a.role == role)
        .map(|(i, _)| i)
        .collect()
}

/// An immutable column-major table. `columns[schema.user_id_index()]` holds
/// the user ids as `f64`; [`Dataset::user_ids`] gives them as `u64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    schema: Arc<Schema>,
    ids: Vec<u64>,
    columns: Vec<Vec<f64>>,
}

impl Dataset {
    /// Builds a dataset, checking id uniqueness and domain membership.
    pub fn new(schema: Arc<Schema>, columns: Vec<Vec<f64>>) -> Result<Self> {
        if columns.len() != schema.len() {
            return Err(Error::Schema(format!(
                "expected {} columns, got {}",
                schema.len(),
                columns.len()
            )));
        }
        let rows = columns.first().map_or(0, Vec::len);
        if columns.iter().any(|c| c.len() != rows) {
            return Err(Error::Schema("columns have unequal lengths".into()));
        }
        let mut ids = Vec::with_capacity(rows);
        let mut seen = HashSet::with_capacity(rows);
        for &raw in &columns[schema.user_id_index()] {
            if raw < 0.0 || raw.fract() != 0.0 || raw >= MAX_USER_ID as f64 {
                return Err(Error::Schema(format!("invalid user id {raw}")));
            }
            let id = raw as u64;
            if !seen.insert(id) {
                return Err(Error::Schema(format!("duplicate user id {id}")));
            }
            ids.push(id);
        }
        for (attr, column) in schema.attributes().iter().zip(&columns) {
            if let Some(bad) = column.iter().find(|v| !attr.contains(**v)) {
                return Err(Error::Schema(format!(
                    "value {bad} outside the domain of {}",
                    attr.name
                )));
            }
        }
        Ok(Dataset {
            schema,
            ids,
            columns,
        })
    }

    /// Callers guarantee the invariants checked by [`Dataset::new`].
    pub(crate) fn from_parts_unchecked(
        schema: Arc<Schema>,
        ids: Vec<u64>,
        columns: Vec<Vec<f64>>,
    ) -> Self {
        debug_assert_eq!(columns.len(), schema.len());
        debug_assert!(columns.iter().all(|c| c.len() == ids.len()));
        Dataset {
            schema,
            ids,
            columns,
        }
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn schema_arc(&self) -> &Arc<Schema> {
        &self.schema
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn user_ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn column(&self, attribute: usize) -> &[f64] {
        &self.columns[attribute]
    }

    pub fn value(&self, row: usize, attribute: usize) -> f64 {
        self.columns[attribute][row]
    }

    pub fn row_of_user(&self, user_id: u64) -> Option<usize> {
        self.ids.iter().position(|&id| id == user_id)
    }

    /// The rows at `rows`, in that order.
    pub fn select_rows(&self, rows: &[usize]) -> Dataset {
        let ids = rows.iter().map(|&r| self.ids[r]).collect();
        let columns = self
            .columns
            .iter()
            .map(|c| rows.iter().map(|&r| c[r]).collect())
            .collect();
        Dataset::from_parts_unchecked(self.schema.clone(), ids, columns)
    }

    /// Keeps the user id, the `attributes` (in the given order) and the
    /// sensitive attribute. The result has the id at index 0 and the
    /// sensitive attribute last.
    pub fn project(&self, attributes: &[usize]) -> Result<Dataset> {
        let uid = self.schema.user_id_index();
        let sens = self.schema.sensitive_index();
        for &a in attributes {
            if a >= self.schema.len() || a == uid || a == sens {
                return Err(Error::Schema(format!(
                    "attribute index {a} cannot be projected as a regular attribute"
                )));
            }
        }
        let mut order = Vec::with_capacity(attributes.len() + 2);
        order.push(uid);
        order.extend_from_slice(attributes);
        order.push(sens);
        let schema = Schema::new(
            order
                .iter()
                .map(|&a| self.schema.attribute(a).clone())
                .collect(),
        )?;
        let columns = order.iter().map(|&a| self.columns[a].clone()).collect();
        Ok(Dataset::from_parts_unchecked(
            Arc::new(schema),
            self.ids.clone(),
            columns,
        ))
    }

    /// Replaces the sensitive column.
    pub(crate) fn with_sensitive(mut self, values: Vec<f64>) -> Dataset {
        let sens = self.schema.sensitive_index();
        debug_assert_eq!(values.len(), self.len());
        self.columns[sens] = values;
        self
    }
}

/// What the attacker knows about the target: its id and its values on the
/// known attributes A'.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetRecord {
    pub user_id: u64,
    pub attributes: Vec<usize>,
    pub values: Vec<f64>,
}

impl TargetRecord {
    pub fn new(
        schema: &Schema,
        user_id: u64,
        attributes: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Self> {
        if attributes.len() != values.len() {
            return Err(Error::Schema(
                "target attributes and values differ in length".into(),
            ));
        }
        for &a in &attributes {
            if a >= schema.len() {
                return Err(Error::Schema(format!("target attribute {a} not in schema")));
            }
            if a == schema.sensitive_index() || a == schema.user_id_index() {
                return Err(Error::Schema(format!(
                    "target attribute {} must be a regular attribute",
                    schema.attribute(a).name
                )));
            }
        }
        Ok(TargetRecord {
            user_id,
            attributes,
            values,
        })
    }

    /// The target as known on all regular attributes of `dataset`.
    pub fn from_row(dataset: &Dataset, row: usize) -> Self {
        let attributes = dataset.schema().regular_indices();
        let values = attributes.iter().map(|&a| dataset.value(row, a)).collect();
        TargetRecord {
            user_id: dataset.user_ids()[row],
            attributes,
            values,
        }
    }

    pub fn value_of(&self, attribute: usize) -> Option<f64> {
        self.attributes
            .iter()
            .position(|&a| a == attribute)
            .map(|i| self.values[i])
    }

    pub fn knows(&self, attribute: usize) -> bool {
        self.attributes.contains(&attribute)
    }
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    /// `uid, a (categorical 0..3), b (ordinal), sens` with the given rows.
    pub fn small(rows: &[(u64, f64, f64, f64)]) -> Dataset {
        let schema = Schema::new(vec![
            AttributeSchema::user_id(),
            AttributeSchema::categorical("a", vec!["x".into(), "y".into(), "z".into()]),
            AttributeSchema::ordinal("b", (0..100).map(f64::from).collect()),
            AttributeSchema::sensitive("sens", vec!["no".into(), "yes".into()]),
        ])
        .unwrap();
        let columns = vec![
            rows.iter().map(|r| r.0 as f64).collect(),
            rows.iter().map(|r| r.1).collect(),
            rows.iter().map(|r| r.2).collect(),
            rows.iter().map(|r| r.3).collect(),
        ];
        Dataset::new(Arc::new(schema), columns).unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schema_requires_one_id_and_one_sensitive() {
        let err = Schema::new(vec![AttributeSchema::ordinal("a", vec![1.0])]).unwrap_err();
        assert!(err.to_string().contains("user-id"));
        let err = Schema::new(vec![
            AttributeSchema::user_id(),
            AttributeSchema::ordinal("a", vec![1.0]),
        ])
        .unwrap_err();
        assert!(err.to_string().contains("sensitive"));
    }

    #[test]
    fn sensitive_domain_must_be_binary() {
        let mut sens = AttributeSchema::sensitive("s", vec![]);
        sens.domain = vec![0.0, 1.0, 2.0];
        assert!(Schema::new(vec![AttributeSchema::user_id(), sens]).is_err());
    }

    #[test]
    fn duplicate_ids_rejected() {
        let schema = Arc::new(
            Schema::new(vec![
                AttributeSchema::user_id(),
                AttributeSchema::sensitive("s", vec![]),
            ])
            .unwrap(),
        );
        let err = Dataset::new(schema, vec![vec![1.0, 1.0], vec![0.0, 1.0]]).unwrap_err();
        assert!(err.to_string().contains("duplicate user id"));
    }

    #[test]
    fn out_of_domain_value_rejected() {
        let schema = Arc::new(
            Schema::new(vec![
                AttributeSchema::user_id(),
                AttributeSchema::categorical("c", vec!["a".into()]),
                AttributeSchema::sensitive("s", vec![]),
            ])
            .unwrap(),
        );
        assert!(Dataset::new(schema, vec![vec![0.0], vec![3.0], vec![1.0]]).is_err());
    }

    #[test]
    fn projection_puts_id_first_and_sensitive_last() {
        let d = fixtures::small(&[(0, 1.0, 5.0, 1.0), (1, 2.0, 7.0, 0.0)]);
        let p = d.project(&[2]).unwrap();
        assert_eq!(p.schema().len(), 3);
        assert_eq!(p.schema().attribute(1).name, "b");
        assert_eq!(p.schema().sensitive_index(), 2);
        assert_eq!(p.column(1), &[5.0, 7.0]);
        assert!(d.project(&[3]).is_err());
    }

    #[test]
    fn target_rejects_sensitive_attribute() {
        let d = fixtures::small(&[(0, 1.0, 5.0, 1.0)]);
        assert!(TargetRecord::new(d.schema(), 0, vec![3], vec![1.0]).is_err());
        let t = TargetRecord::from_row(&d, 0);
        assert_eq!(t.attributes, vec![1, 2]);
        assert_eq!(t.value_of(2), Some(5.0));
        assert_eq!(t.value_of(3), None);
    }
}
