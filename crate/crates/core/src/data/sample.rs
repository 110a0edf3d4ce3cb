use std::collections::HashMap;

use rand::seq::{index, SliceRandom};
use rand::Rng;

use super::{Dataset, TargetRecord};
use crate::error::{Error, Result};

/// A sampled dataset with re-drawn sensitive values and the label the
/// attacker must predict for the target.
#[derive(Clone, Debug, PartialEq)]
pub struct ShadowDataset {
    pub dataset: Dataset,
    pub target_label: u8,
}

/// Seeded 50/50 shuffle-split of the row indices `0..rows`.
pub fn split_halves<R: Rng + ?Sized>(rows: usize, rng: &mut R) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..rows).collect();
    order.shuffle(rng);
    let second = order.split_off(rows / 2);
    (order, second)
}

fn require_view(source: &Dataset, target: &TargetRecord) -> Result<()> {
    let regular = source.schema().regular_indices();
    if regular.iter().all(|a| target.knows(*a)) && target.attributes.len() == regular.len() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(
            "project the source onto the target's known attributes before sampling".into(),
        ))
    }
}

/// Draws `count` distinct rows of `source`, never the target's own row.
fn sample_rows<R: Rng + ?Sized>(
    source: &Dataset,
    exclude_user: u64,
    count: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let excluded = source.row_of_user(exclude_user);
    let pool = source.len() - usize::from(excluded.is_some());
    if count > pool {
        return Err(Error::InsufficientData(format!(
            "cannot sample {count} records without replacement from {pool}"
        )));
    }
    Ok(index::sample(rng, pool, count)
        .into_iter()
        .map(|i| match excluded {
            Some(x) if i >= x => i + 1,
            _ => i,
        })
        .collect())
}

/// Samples `z` records (without replacement) from `source`, appends the
/// target's partial record and re-draws every sensitive value from
/// Bernoulli(0.5). `source` must already be projected onto the target's
/// known attributes (see [`Dataset::project`]).
pub fn sample_shadow_dataset<R: Rng + ?Sized>(
    source: &Dataset,
    target: &TargetRecord,
    z: usize,
    rng: &mut R,
) -> Result<ShadowDataset> {
    require_view(source, target)?;
    let rows = sample_rows(source, target.user_id, z, rng)?;
    let mut data = source.select_rows(&rows);
    append_target(&mut data, target, 0.0);
    let sensitive: Vec<f64> = (0..data.len())
        .map(|_| f64::from(u8::from(rng.gen_bool(0.5))))
        .collect();
    let target_label = sensitive[z] as u8;
    Ok(ShadowDataset {
        dataset: data.with_sensitive(sensitive),
        target_label,
    })
}

/// Membership variant: with probability 1/2 the target's full record
/// (including its true sensitive value) is present; otherwise one more
/// record is sampled in its place. Sensitive values are kept as sampled.
/// `target_label` is the membership bit.
pub fn sample_mia_shadow_dataset<R: Rng + ?Sized>(
    source: &Dataset,
    target: &TargetRecord,
    target_sensitive: f64,
    z: usize,
    rng: &mut R,
) -> Result<ShadowDataset> {
    require_view(source, target)?;
    let member = rng.gen_bool(0.5);
    let take = if member { z } else { z + 1 };
    let rows = sample_rows(source, target.user_id, take, rng)?;
    let mut data = source.select_rows(&rows);
    if member {
        append_target(&mut data, target, target_sensitive);
    }
    Ok(ShadowDataset {
        dataset: data,
        target_label: u8::from(member),
    })
}

fn append_target(data: &mut Dataset, target: &TargetRecord, sensitive: f64) {
    let schema = data.schema.clone();
    data.ids.push(target.user_id);
    for (a, column) in data.columns.iter_mut().enumerate() {
        let v = if a == schema.user_id_index() {
            target.user_id as f64
        } else if a == schema.sensitive_index() {
            sensitive
        } else {
            target.value_of(a).unwrap_or(f64::NAN)
        };
        column.push(v);
    }
}

/// True iff no row other than the target's own matches it on every known
/// attribute.
pub fn check_uniqueness(dataset: &Dataset, target: &TargetRecord) -> bool {
    (0..dataset.len()).all(|row| {
        dataset.user_ids()[row] == target.user_id
            || target
                .attributes
                .iter()
                .zip(&target.values)
                .any(|(&a, &v)| dataset.value(row, a) != v)
    })
}

/// Rows whose values on `attributes` appear exactly once in the dataset.
pub fn unique_rows(dataset: &Dataset, attributes: &[usize]) -> Vec<usize> {
    let key = |row: usize| -> Vec<u64> {
        attributes
            .iter()
            .map(|&a| dataset.value(row, a).to_bits())
            .collect()
    };
    let mut counts: HashMap<Vec<u64>, usize> = HashMap::new();
    for row in 0..dataset.len() {
        *counts.entry(key(row)).or_default() += 1;
    }
    (0..dataset.len())
        .filter(|&row| counts[&key(row)] == 1)
        .collect()
}

/// A correlation-free synthetic copy: each attribute is drawn independently
/// from its empirical one-way marginal. Users get fresh ids `0..n`.
pub fn synth_from_marginals<R: Rng + ?Sized>(source: &Dataset, rng: &mut R) -> Dataset {
    let n = source.len();
    let uid = source.schema().user_id_index();
    let ids: Vec<u64> = (0..n as u64).collect();
    let columns = (0..source.schema().len())
        .map(|a| {
            if a == uid {
                ids.iter().map(|&id| id as f64).collect()
            } else {
                let column = source.column(a);
                (0..n).map(|_| column[rng.gen_range(0..n)]).collect()
            }
        })
        .collect();
    Dataset::from_parts_unchecked(source.schema_arc().clone(), ids, columns)
}
