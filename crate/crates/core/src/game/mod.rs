//! Shadow fleets, multiset fitness and the privacy games.
//!
//! A [`Fleet`] holds `f` training and `g` validation systems, each protecting
//! a dataset sampled from one half of the auxiliary data with the target's
//! label re-drawn. A [`FitnessEvaluator`] answers queries across the fleet
//! and scores a multiset by the worse of its train and validation accuracy.

mod play;

use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    sample_mia_shadow_dataset, sample_shadow_dataset, split_halves, Dataset, ShadowDataset,
    TargetRecord,
};
use crate::error::{Error, Result};
use crate::inference::{train_logistic, FeatureMatrix, LogisticModel, TrainConfig};
use crate::qbs::{CountingSystem, Salt, SystemSpec};
use crate::query::{Query, QueryMultiset};
use crate::seed::{derive_seed, rng_for};

type Systems = Vec<Box<dyn CountingSystem>>;

pub use play::{
    game_salt, play_aia_game, play_mia_game, Attack, GameKind, GameMode, GameParams, GameResult,
    GameSetup, MultisetAttack,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitnessParams {
    pub f: usize,
    pub g: usize,
    /// Records sampled per shadow dataset besides the target.
    pub z: usize,
    pub train: TrainConfig,
    pub master_seed: u64,
}

impl FitnessParams {
    fn validate(&self) -> Result<()> {
        if self.f == 0 || self.g == 0 {
            return Err(Error::InvalidParameter(
                "f and g must both be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Protected shadow datasets and the target labels they encode.
pub struct Fleet {
    train: Vec<Box<dyn CountingSystem>>,
    train_labels: Vec<u8>,
    val: Vec<Box<dyn CountingSystem>>,
    val_labels: Vec<u8>,
    /// Row indices of the auxiliary dataset in each half.
    halves: (Vec<usize>, Vec<usize>),
}

impl std::fmt::Debug for Fleet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Fleet")
            .field("train", &self.train.len())
            .field("val", &self.val.len())
            .finish()
    }
}

impl Fleet {
    pub fn len(&self) -> usize {
        self.train.len() + self.val.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn train_labels(&self) -> &[u8] {
        &self.train_labels
    }

    pub fn val_labels(&self) -> &[u8] {
        &self.val_labels
    }

    pub fn train_systems(&self) -> &[Box<dyn CountingSystem>] {
        &self.train
    }

    pub fn val_systems(&self) -> &[Box<dyn CountingSystem>] {
        &self.val
    }

    /// Auxiliary row indices of the train and validation halves.
    pub fn halves(&self) -> (&[usize], &[usize]) {
        (&self.halves.0, &self.halves.1)
    }

    /// All systems, train first.
    pub fn systems(&self) -> impl Iterator<Item = &dyn CountingSystem> + '_ {
        self.train.iter().chain(&self.val).map(|s| s.as_ref())
    }

    /// Fresh answer computations summed over all systems.
    pub fn computations(&self) -> u64 {
        self.systems().map(|s| s.computations()).sum()
    }
}

/// Salt of fleet instance `index` (train instances first).
pub fn fleet_salt(master_seed: u64, index: usize) -> Salt {
    Salt::derive("fleet", master_seed, index as u64)
}

fn build_with<F>(
    aux: &Dataset,
    params: &FitnessParams,
    system: &SystemSpec,
    sample: F,
) -> Result<Fleet>
where
    F: Fn(&Dataset, &mut crate::seed::Rng) -> Result<ShadowDataset> + Sync,
{
    params.validate()?;
    let seed = params.master_seed;
    let (train_rows, val_rows) = split_halves(aux.len(), &mut rng_for(seed, "split", 0));
    let halves = [aux.select_rows(&train_rows), aux.select_rows(&val_rows)];
    let counts = [params.f, params.g];
    let mut built: Vec<(Systems, Vec<u8>)> = Vec::new();
    let mut offset = 0;
    for (half, (source, count)) in halves.iter().zip(counts).enumerate() {
        let shadows: Vec<(Box<dyn CountingSystem>, u8)> = (0..count)
            .into_par_iter()
            .map(|i| {
                let index = offset + i;
                let mut rng = rng_for(seed, "shadow", index as u64);
                let shadow = sample(source, &mut rng).map_err(|e| match e {
                    Error::InsufficientData(m) => Error::InsufficientData(format!(
                        "{} half of the auxiliary data: {m}",
                        ["train", "validation"][half]
                    )),
                    other => other,
                })?;
                let system = system.build(fleet_salt(seed, index), shadow.dataset);
                Ok((system, shadow.target_label))
            })
            .collect::<Result<_>>()?;
        offset += count;
        built.push(shadows.into_iter().unzip());
    }
    let (val, val_labels) = built.pop().expect("two halves");
    let (train, train_labels) = built.pop().expect("two halves");
    Ok(Fleet {
        train,
        train_labels,
        val,
        val_labels,
        halves: (train_rows, val_rows),
    })
}

/// Attribute-inference fleet: the target's sensitive value is re-drawn in
/// every shadow dataset. `aux` must be projected onto the target's known
/// attributes.
pub fn build_fleet(
    aux: &Dataset,
    target: &TargetRecord,
    params: &FitnessParams,
    system: &SystemSpec,
) -> Result<Fleet> {
    build_with(aux, params, system, |source, rng| {
        sample_shadow_dataset(source, target, params.z, rng)
    })
}

/// Membership-inference fleet: the target's full record is present in a
/// shadow dataset with probability 1/2 and the label is the membership bit.
pub fn build_mia_fleet(
    aux: &Dataset,
    target: &TargetRecord,
    target_sensitive: f64,
    params: &FitnessParams,
    system: &SystemSpec,
) -> Result<Fleet> {
    build_with(aux, params, system, |source, rng| {
        sample_mia_shadow_dataset(source, target, target_sensitive, params.z, rng)
    })
}

/// Fitness of one multiset and the model trained to reach it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitnessOutcome {
    /// `min(train_accuracy, val_accuracy)`.
    pub fitness: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub model: LogisticModel,
}

/// Answers of one query on every fleet instance, train first.
pub type AnswerColumn = Vec<f64>;

/// Scores multisets against a fleet, counting the answers it requests.
pub struct FitnessEvaluator<'a> {
    fleet: &'a Fleet,
    train: TrainConfig,
    requests: AtomicU64,
}

impl<'a> FitnessEvaluator<'a> {
    pub fn new(fleet: &'a Fleet, train: TrainConfig) -> Self {
        FitnessEvaluator {
            fleet,
            train,
            requests: AtomicU64::new(0),
        }
    }

    pub fn fleet(&self) -> &Fleet {
        self.fleet
    }

    pub fn train_config(&self) -> &TrainConfig {
        &self.train
    }

    /// Number of per-instance answers requested so far.
    pub fn requests(&self) -> u64 {
        self.requests.load(Ordering::Relaxed)
    }

    pub fn answer_column(&self, query: &Query) -> AnswerColumn {
        self.requests
            .fetch_add(self.fleet.len() as u64, Ordering::Relaxed);
        let systems: Vec<&dyn CountingSystem> = self.fleet.systems().collect();
        systems
            .par_iter()
            .map(|s| s.answer(query) as f64)
            .collect()
    }

    pub fn answer_columns(&self, multiset: &QueryMultiset) -> Vec<AnswerColumn> {
        multiset.queries.iter().map(|q| self.answer_column(q)).collect()
    }

    /// Trains on the train rows of `columns` and scores both halves.
    pub fn evaluate_columns(&self, columns: &[AnswerColumn]) -> Result<FitnessOutcome> {
        let f = self.fleet.train.len();
        let (train_cols, val_cols): (Vec<Vec<f64>>, Vec<Vec<f64>>) = columns
            .iter()
            .map(|c| (c[..f].to_vec(), c[f..].to_vec()))
            .unzip();
        let x_train = FeatureMatrix::from_columns(f, &train_cols)?;
        let x_val = FeatureMatrix::from_columns(self.fleet.val.len(), &val_cols)?;
        let model = train_logistic(&x_train, &self.fleet.train_labels, &self.train)?;
        let train_accuracy = model.accuracy(&x_train, &self.fleet.train_labels);
        let val_accuracy = model.accuracy(&x_val, &self.fleet.val_labels);
        Ok(FitnessOutcome {
            fitness: train_accuracy.min(val_accuracy),
            train_accuracy,
            val_accuracy,
            model,
        })
    }

    /// From-scratch fitness of a multiset.
    pub fn evaluate(&self, multiset: &QueryMultiset) -> Result<FitnessOutcome> {
        self.evaluate_columns(&self.answer_columns(multiset))
    }
}

/// Convenience wrapper: fitness of `multiset` on `fleet`.
pub fn estimate_fitness(
    multiset: &QueryMultiset,
    fleet: &Fleet,
    train: &TrainConfig,
) -> Result<FitnessOutcome> {
    FitnessEvaluator::new(fleet, *train).evaluate(multiset)
}

/// Seed for the game played after a search seeded with `master_seed`.
pub fn game_seed(master_seed: u64) -> u64 {
    derive_seed(master_seed, "game", 0)
}
