use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{sample_mia_shadow_dataset, sample_shadow_dataset, Dataset, TargetRecord};
use crate::error::{Error, Result};
use crate::inference::LogisticModel;
use crate::qbs::{CountingSystem, Salt, SystemSpec};
use crate::query::QueryMultiset;
use crate::seed::rng_for;

/// A rule predicting the target's label from a protected system.
pub trait Attack: Sync {
    fn predict(&self, system: &dyn CountingSystem) -> u8;
}

/// Asks every query of a multiset and combines the answers with a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultisetAttack {
    pub multiset: QueryMultiset,
    pub model: LogisticModel,
}

impl MultisetAttack {
    pub fn answers(&self, system: &dyn CountingSystem) -> Vec<f64> {
        self.multiset
            .queries
            .iter()
            .map(|q| system.answer(q) as f64)
            .collect()
    }
}

impl Attack for MultisetAttack {
    fn predict(&self, system: &dyn CountingSystem) -> u8 {
        self.model.predict(&self.answers(system)).1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GameKind {
    Aia,
    Mia,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GameParams {
    pub kind: GameKind,
    /// Size of each protected dataset, target included.
    pub dataset_size: usize,
    pub repetitions: usize,
}

/// Outcome of `R` repetitions of a game.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GameResult {
    pub accuracy: f64,
    #[serde(rename = "R")]
    pub repetitions: usize,
    #[serde(with = "bitmap", rename = "wins_bitmap")]
    pub wins: Vec<bool>,
    pub seed: u64,
    pub params: GameParams,
}

impl GameResult {
    fn from_wins(wins: Vec<bool>, seed: u64, params: GameParams) -> Self {
        let accuracy = if wins.is_empty() {
            0.0
        } else {
            wins.iter().filter(|w| **w).count() as f64 / wins.len() as f64
        };
        GameResult {
            accuracy,
            repetitions: wins.len(),
            wins,
            seed,
            params,
        }
    }
}

mod bitmap {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(wins: &[bool], s: S) -> Result<S::Ok, S::Error> {
        let text: String = wins.iter().map(|&w| if w { '1' } else { '0' }).collect();
        s.serialize_str(&text)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<bool>, D::Error> {
        let text = String::deserialize(d)?;
        text.chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(serde::de::Error::custom(format!("bad bitmap char {other:?}"))),
            })
            .collect()
    }
}

/// Salt of game repetition `index`.
pub fn game_salt(master_seed: u64, index: usize) -> Salt {
    Salt::derive("game", master_seed, index as u64)
}

fn check(distribution: &Dataset, dataset_size: usize, repetitions: usize) -> Result<()> {
    if repetitions == 0 {
        return Err(Error::InvalidParameter("the game needs R >= 1".into()));
    }
    if dataset_size == 0 {
        return Err(Error::InvalidParameter("protected datasets need at least the target".into()));
    }
    if dataset_size - 1 > distribution.len() {
        return Err(Error::InsufficientData(format!(
            "cannot sample {} records from a distribution of {}",
            dataset_size - 1,
            distribution.len()
        )));
    }
    Ok(())
}

/// Attribute-inference game: each repetition samples `dataset_size - 1`
/// records, adds the target, re-draws every sensitive value, protects the
/// result with a freshly salted system and records whether the attack
/// recovers the target's drawn value.
pub fn play_aia_game(
    attack: &dyn Attack,
    distribution: &Dataset,
    dataset_size: usize,
    target: &TargetRecord,
    repetitions: usize,
    master_seed: u64,
    system: &SystemSpec,
) -> Result<GameResult> {
    check(distribution, dataset_size, repetitions)?;
    let wins = (0..repetitions)
        .into_par_iter()
        .map(|r| {
            let mut rng = rng_for(master_seed, "game", r as u64);
            let shadow = sample_shadow_dataset(distribution, target, dataset_size - 1, &mut rng)?;
            let protected = system.build(game_salt(master_seed, r), shadow.dataset);
            Ok(attack.predict(protected.as_ref()) == shadow.target_label)
        })
        .collect::<Result<Vec<bool>>>()?;
    Ok(GameResult::from_wins(
        wins,
        master_seed,
        GameParams {
            kind: GameKind::Aia,
            dataset_size,
            repetitions,
        },
    ))
}

/// Membership-inference game: the target's full record is included with
/// probability 1/2; sensitive values keep their true values.
#[allow(clippy::too_many_arguments)]
pub fn play_mia_game(
    attack: &dyn Attack,
    distribution: &Dataset,
    dataset_size: usize,
    target: &TargetRecord,
    target_sensitive: f64,
    repetitions: usize,
    master_seed: u64,
    system: &SystemSpec,
) -> Result<GameResult> {
    check(distribution, dataset_size, repetitions)?;
    let wins = (0..repetitions)
        .into_par_iter()
        .map(|r| {
            let mut rng = rng_for(master_seed, "mia-game", r as u64);
            let shadow = sample_mia_shadow_dataset(
                distribution,
                target,
                target_sensitive,
                dataset_size - 1,
                &mut rng,
            )?;
            let protected = system.build(game_salt(master_seed, r), shadow.dataset);
            Ok(attack.predict(protected.as_ref()) == shadow.target_label)
        })
        .collect::<Result<Vec<bool>>>()?;
    Ok(GameResult::from_wins(
        wins,
        master_seed,
        GameParams {
            kind: GameKind::Mia,
            dataset_size,
            repetitions,
        },
    ))
}

/// Which game to play.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GameMode {
    Aia,
    Mia { target_sensitive: f64 },
}

/// Everything a game needs besides the attack.
#[derive(Clone, Copy, Debug)]
pub struct GameSetup<'a> {
    pub mode: GameMode,
    pub distribution: &'a Dataset,
    pub dataset_size: usize,
    pub target: &'a TargetRecord,
    pub repetitions: usize,
    pub master_seed: u64,
    pub system: &'a SystemSpec,
}

impl GameSetup<'_> {
    pub fn play(&self, attack: &dyn Attack) -> Result<GameResult> {
        match self.mode {
            GameMode::Aia => play_aia_game(
                attack,
                self.distribution,
                self.dataset_size,
                self.target,
                self.repetitions,
                self.master_seed,
                self.system,
            ),
            GameMode::Mia { target_sensitive } => play_mia_game(
                attack,
                self.distribution,
                self.dataset_size,
                self.target,
                target_sensitive,
                self.repetitions,
                self.master_seed,
                self.system,
            ),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::fixtures::small;
    use crate::query::{Condition, Predicate, Query};

    struct Constant(u8);

    impl Attack for Constant {
        fn predict(&self, _: &dyn CountingSystem) -> u8 {
            self.0
        }
    }

    fn distribution() -> Dataset {
        let rows: Vec<_> = (0..300)
            .map(|i| (i, (i % 3) as f64, (i % 40) as f64, (i % 2) as f64))
            .collect();
        small(&rows)
    }

    fn target(d: &Dataset) -> TargetRecord {
        TargetRecord::new(d.schema(), 9_999, vec![1, 2], vec![2.0, 77.0]).unwrap()
    }

    fn exact_match_attack() -> MultisetAttack {
        let q = Query::from_conditions(
            4,
            &[
                Condition::new(1, Predicate::Eq(2.0)),
                Condition::new(2, Predicate::Eq(77.0)),
                Condition::new(3, Predicate::Eq(1.0)),
            ],
        )
        .unwrap();
        MultisetAttack {
            multiset: QueryMultiset::new(vec![q]),
            model: LogisticModel {
                weights: vec![10.0],
                bias: -5.0,
                feature_means: vec![0.0],
                feature_stds: vec![1.0],
            },
        }
    }

    #[test]
    fn exact_system_exposes_the_bit() {
        let d = distribution();
        let r = play_aia_game(&exact_match_attack(), &d, 50, &target(&d), 100, 3, &SystemSpec::Exact)
            .unwrap();
        assert_eq!(r.accuracy, 1.0);
    }

    #[test]
    fn exact_system_exposes_membership() {
        let d = distribution();
        let mut attack = exact_match_attack();
        // count the target's record regardless of its sensitive value
        attack.multiset.queries[0].set(3, Predicate::Skip);
        let r = play_mia_game(&attack, &d, 50, &target(&d), 1.0, 100, 3, &SystemSpec::Exact)
            .unwrap();
        assert_eq!(r.accuracy, 1.0);
    }

    #[test]
    fn labels_are_balanced_and_results_reproducible() {
        let d = distribution();
        let t = target(&d);
        let a = play_aia_game(&Constant(1), &d, 20, &t, 1_000, 8, &SystemSpec::Exact).unwrap();
        assert!((0.45..=0.55).contains(&a.accuracy), "{}", a.accuracy);
        let b = play_aia_game(&Constant(1), &d, 20, &t, 1_000, 8, &SystemSpec::Exact).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.repetitions, 1_000);
    }

    #[test]
    fn result_json_round_trip() {
        let d = distribution();
        let r = play_aia_game(&Constant(0), &d, 20, &target(&d), 7, 1, &SystemSpec::Exact).unwrap();
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"wins_bitmap\""));
        assert!(json.contains("\"R\":7"));
        assert_eq!(serde_json::from_str::<GameResult>(&json).unwrap(), r);
    }

    #[test]
    fn zero_repetitions_rejected() {
        let d = distribution();
        assert!(play_aia_game(&Constant(0), &d, 20, &target(&d), 0, 1, &SystemSpec::Exact).is_err());
    }
}
