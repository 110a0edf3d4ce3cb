//! End-to-end attack runs: choose known attributes and targets, search on
//! shadow fleets built from the auxiliary half, play the game on the other.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{
    attribute_accuracy, classify_difference_like, classify_generalized_difference_like,
    subset_counts, wilson_interval, Aggregate, AttackReport, Explainability, Timing, UserReport,
};
use crate::data::{
    load_csv, load_schema_config, split_halves, unique_rows, AttributeKind, Dataset,
    Schema, TargetRecord,
};
use crate::error::{Error, Result};
use crate::game::{
    build_fleet, build_mia_fleet, game_seed, Attack, FitnessEvaluator, FitnessParams, GameKind,
    GameMode, GameSetup, MultisetAttack,
};
use crate::inference::{LogisticModel, Solver, TrainConfig};
use crate::qbs::{MitigationConfig, QbsConfig, SystemSpec};
use crate::query::{Axis, QueryGenerator, QueryMultiset, QuerySyntax};
use crate::search::{
    evolutionary_baseline, local_search, multi_stage_search, stability_metric, EvolutionParams,
    GadottiAttack, SearchParams, STABILITY_WINDOW,
};
use crate::seed::{derive_seed, rng_for};

/// How the known attributes A' are drawn each repetition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributeRule {
    /// `known_attributes` uniformly random regular attributes.
    Random,
    /// Two categorical and `known_attributes - 2` ordinal attributes.
    Mixed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Multi-stage local search over the configured axes.
    Cheetah,
    /// One local search in the syntax given by the configured axes.
    Single,
    Evolutionary,
    Gadotti,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cheetah" => Ok(Method::Cheetah),
            "single" => Ok(Method::Single),
            "evolutionary" => Ok(Method::Evolutionary),
            "gadotti" => Ok(Method::Gadotti),
            other => Err(Error::InvalidParameter(format!("unknown method {other}"))),
        }
    }
}

/// Number of targets per repetition: a count or every unique user.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Users {
    All,
    Count(usize),
}

impl Serialize for Users {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Users::All => s.serialize_str("all"),
            Users::Count(n) => s.serialize_u64(*n as u64),
        }
    }
}

impl<'de> Deserialize<'de> for Users {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Count(usize),
            Word(String),
        }
        match Raw::deserialize(d)? {
            Raw::Count(n) => Ok(Users::Count(n)),
            Raw::Word(w) => w.parse().map_err(serde::de::Error::custom),
        }
    }
}

impl std::str::FromStr for Users {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "all" {
            return Ok(Users::All);
        }
        s.parse()
            .map(Users::Count)
            .map_err(|_| Error::InvalidParameter(format!("users must be a count or \"all\", got {s}")))
    }
}

/// Flat experiment configuration. Defaults are the full-scale settings;
/// [`ExperimentConfig::desk_scale`] shrinks them to minutes of compute.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: Option<PathBuf>,
    pub schema: Option<PathBuf>,
    pub attribute_rule: AttributeRule,
    pub known_attributes: usize,
    pub users: Users,
    pub repetitions: usize,
    pub method: Method,
    pub syntax: Vec<Axis>,
    pub game: GameKind,
    pub isolating_attributes: bool,
    pub shadow_table: bool,
    pub noise_when_no_conditions: bool,
    pub stats_dynamic_seed: bool,
    pub m: usize,
    pub new_per_iter: usize,
    pub iterations: usize,
    pub f: usize,
    pub g: usize,
    /// Records sampled besides the target; protected datasets hold `z + 1`.
    pub z: usize,
    #[serde(rename = "R")]
    pub game_repetitions: usize,
    pub population: usize,
    pub elite: usize,
    pub generations: usize,
    pub mutation_rate: f64,
    pub learning_rate: f64,
    pub train_iterations: usize,
    pub l2_lambda: f64,
    pub solver: Solver,
    /// Also compute difference-like query attributions.
    pub explain: bool,
    pub master_seed: u64,
    pub output_dir: PathBuf,
    pub threads: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        ExperimentConfig {
            dataset: None,
            schema: None,
            attribute_rule: AttributeRule::Random,
            known_attributes: 5,
            users: Users::Count(100),
            repetitions: 5,
            method: Method::Cheetah,
            syntax: Vec::new(),
            game: GameKind::Aia,
            isolating_attributes: false,
            shadow_table: false,
            noise_when_no_conditions: false,
            stats_dynamic_seed: false,
            m: 100,
            new_per_iter: 1,
            iterations: 5_000,
            f: 3_000,
            g: 1_000,
            z: 7_999,
            game_repetitions: 500,
            population: 100,
            elite: 10,
            generations: 200,
            mutation_rate: 0.1,
            learning_rate: train.learning_rate,
            train_iterations: train.iterations,
            l2_lambda: train.l2_lambda,
            solver: train.solver,
            explain: false,
            master_seed: 0,
            output_dir: PathBuf::from("out"),
            threads: None,
        }
    }
}

impl ExperimentConfig {
    /// Desk-scale profile: small fleets, short searches, few users.
    pub fn desk_scale(mut self) -> Self {
        self.m = 20;
        self.iterations = 300;
        self.f = 300;
        self.g = 100;
        self.z = 499;
        self.game_repetitions = 200;
        self.users = Users::Count(5);
        self.repetitions = 2;
        self.population = 20;
        self.elite = 2;
        self.generations = 30;
        self
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.known_attributes == 0 {
            return bad("known_attributes must be at least 1".into());
        }
        if self.repetitions == 0 || self.game_repetitions == 0 {
            return bad("repetitions and R must be at least 1".into());
        }
        if self.attribute_rule == AttributeRule::Mixed && self.known_attributes < 2 {
            return bad("the mixed rule needs at least 2 known attributes".into());
        }
        QuerySyntax::new(&self.syntax)?;
        if self.method != Method::Gadotti {
            self.search_params(0).validate()?;
            if self.f == 0 || self.g == 0 {
                return bad("f and g must be at least 1".into());
            }
        }
        if self.method == Method::Evolutionary && (self.elite == 0 || self.population < self.elite) {
            return bad("need population >= elite >= 1".into());
        }
        if self.method == Method::Gadotti && self.game == GameKind::Mia {
            return bad("the differential attack targets attribute inference only".into());
        }
        Ok(())
    }

    pub fn mitigations(&self) -> MitigationConfig {
        MitigationConfig {
            isolating_attributes: self.isolating_attributes,
            shadow_table: self.shadow_table,
            noise_when_no_conditions: self.noise_when_no_conditions,
            stats_dynamic_seed: self.stats_dynamic_seed,
        }
    }

    pub fn system(&self) -> SystemSpec {
        SystemSpec::diffix(QbsConfig::with_mitigations(self.mitigations()))
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            iterations: self.train_iterations,
            l2_lambda: self.l2_lambda,
            solver: self.solver,
        }
    }

    pub fn fitness_params(&self, seed: u64) -> FitnessParams {
        FitnessParams {
            f: self.f,
            g: self.g,
            z: self.z,
            train: self.train_config(),
            master_seed: seed,
        }
    }

    pub fn search_params(&self, seed: u64) -> SearchParams {
        SearchParams {
            m: self.m,
            new_per_iter: self.new_per_iter,
            iterations: self.iterations,
            axes: self.syntax.clone(),
            master_seed: seed,
        }
    }

    pub fn evolution_params(&self, seed: u64) -> EvolutionParams {
        EvolutionParams {
            m: self.m,
            population: self.population,
            elite: self.elite,
            generations: self.generations,
            mutation_rate: self.mutation_rate,
            master_seed: seed,
        }
    }

    /// Loads the configured CSV with its schema config.
    pub fn load_dataset(&self) -> Result<Dataset> {
        let dataset = self
            .dataset
            .as_ref()
            .ok_or_else(|| Error::InvalidParameter("no dataset configured".into()))?;
        let schema = match &self.schema {
            Some(p) => p.clone(),
            None => dataset.with_extension("schema.json"),
        };
        load_csv(dataset, &load_schema_config(schema)?)
    }
}

/// Draws the known attributes A' (original schema indices, sorted).
pub fn select_known_attributes(
    schema: &Schema,
    rule: AttributeRule,
    count: usize,
    rng: &mut crate::seed::Rng,
) -> Result<Vec<usize>> {
    let regular = schema.regular_indices();
    let pick = |pool: Vec<usize>, k: usize, what: &str, rng: &mut crate::seed::Rng| {
        if pool.len() < k {
            return Err(Error::InvalidParameter(format!(
                "need {k} {what} attributes, the schema has {}",
                pool.len()
            )));
        }
        Ok(pool.choose_multiple(rng, k).copied().collect::<Vec<_>>())
    };
    let mut chosen = match rule {
        AttributeRule::Random => pick(regular, count, "regular", rng)?,
        AttributeRule::Mixed => {
            let (ordinal, categorical): (Vec<usize>, Vec<usize>) = regular
                .into_iter()
                .partition(|&a| schema.attribute(a).kind == AttributeKind::Ordinal);
            let mut c = pick(categorical, 2, "categorical", rng)?;
            c.extend(pick(ordinal, count - 2, "ordinal", rng)?);
            c
        }
    };
    chosen.sort_unstable();
    Ok(chosen)
}

/// One repetition: known attributes, the auxiliary/evaluation split (both
/// projected onto A') and the chosen targets.
#[derive(Clone, Debug)]
pub struct Repetition {
    pub index: usize,
    pub seed: u64,
    /// A' as indices of the original schema.
    pub known: Vec<usize>,
    pub full: Dataset,
    pub aux: Dataset,
    pub eval: Dataset,
    /// Users unique on A' in the full dataset.
    pub unique_users: usize,
    pub users: Vec<u64>,
}

impl Repetition {
    /// The target record of `user_id`, known on every regular attribute of
    /// the projected schema.
    pub fn target(&self, user_id: u64) -> Result<(TargetRecord, f64)> {
        let row = self.full.row_of_user(user_id).ok_or_else(|| {
            Error::InvalidParameter(format!("user {user_id} not in the dataset"))
        })?;
        let sensitive = self.full.value(row, self.full.schema().sensitive_index());
        Ok((TargetRecord::from_row(&self.full, row), sensitive))
    }
}

pub fn prepare_repetition(data: &Dataset, config: &ExperimentConfig, index: usize) -> Result<Repetition> {
    let seed = derive_seed(config.master_seed, "repetition", index as u64);
    let mut rng = rng_for(seed, "attributes", 0);
    let known = select_known_attributes(
        data.schema(),
        config.attribute_rule,
        config.known_attributes,
        &mut rng,
    )?;
    let full = data.project(&known)?;
    let (aux_rows, eval_rows) = split_halves(full.len(), &mut rng_for(seed, "split", 0));
    let aux = full.select_rows(&aux_rows);
    let eval = full.select_rows(&eval_rows);
    let regular = full.schema().regular_indices();
    let unique = unique_rows(&full, &regular);
    let mut rng = rng_for(seed, "users", 0);
    let rows: Vec<usize> = match config.users {
        Users::All => unique.clone(),
        Users::Count(n) if n > unique.len() => {
            return Err(Error::InsufficientData(format!(
                "{n} targets requested, only {} users are unique on the known attributes",
                unique.len()
            )))
        }
        Users::Count(n) => {
            let mut picked: Vec<usize> = index::sample(&mut rng, unique.len(), n)
                .into_iter()
                .map(|i| unique[i])
                .collect();
            picked.sort_unstable();
            picked
        }
    };
    let users = rows.iter().map(|&r| full.user_ids()[r]).collect();
    Ok(Repetition {
        index,
        seed,
        known,
        full,
        aux,
        eval,
        unique_users: unique.len(),
        users,
    })
}

struct Found {
    multiset: QueryMultiset,
    model: LogisticModel,
    fitness: f64,
    trace: Vec<f64>,
    stage_choices: Vec<Axis>,
    best_syntax: QuerySyntax,
    requests: u64,
}

fn search(
    config: &ExperimentConfig,
    generator: &QueryGenerator,
    evaluator: &FitnessEvaluator<'_>,
    seed: u64,
) -> Result<Found> {
    let params = config.search_params(seed);
    let found = match config.method {
        Method::Cheetah => {
            let r = multi_stage_search(generator, &params, evaluator)?;
            let trace = r.stages[r.best_stage].winner().trace.values.clone();
            Found {
                stage_choices: r.stage_choices(),
                multiset: r.best_multiset,
                model: r.best_model,
                fitness: r.best_fitness,
                trace,
                best_syntax: r.best_syntax,
                requests: 0,
            }
        }
        Method::Single => {
            let syntax = QuerySyntax::new(&config.syntax)?;
            let t = local_search(
                generator,
                &syntax,
                None,
                &params,
                evaluator,
                &mut rng_for(seed, "single", 0),
            )?;
            Found {
                multiset: t.best_multiset,
                model: t.best_model,
                fitness: t.best_fitness,
                trace: t.values,
                stage_choices: Vec::new(),
                best_syntax: syntax,
                requests: 0,
            }
        }
        Method::Evolutionary => {
            let r = evolutionary_baseline(generator, &config.evolution_params(seed), evaluator)?;
            Found {
                multiset: r.best_multiset,
                model: r.best_model,
                fitness: r.best_fitness,
                trace: r.best_per_generation,
                stage_choices: Vec::new(),
                best_syntax: QuerySyntax::limited(),
                requests: 0,
            }
        }
        Method::Gadotti => unreachable!("the differential attack does not search"),
    };
    Ok(Found {
        requests: evaluator.requests(),
        ..found
    })
}

/// Runs the configured method against one target and plays the game.
pub fn attack_user(rep: &Repetition, user_id: u64, config: &ExperimentConfig) -> Result<UserReport> {
    let seed = derive_seed(rep.seed, "user", user_id);
    let (target, sensitive) = rep.target(user_id)?;
    let system = config.system();
    let schema = rep.full.schema();
    let mode = match config.game {
        GameKind::Aia => GameMode::Aia,
        GameKind::Mia => GameMode::Mia {
            target_sensitive: sensitive,
        },
    };
    let setup = GameSetup {
        mode,
        distribution: &rep.eval,
        dataset_size: config.z + 1,
        target: &target,
        repetitions: config.game_repetitions,
        master_seed: game_seed(seed),
        system: &system,
    };
    let known_names = rep
        .known
        .iter()
        .map(|&a| schema_name(rep, a))
        .collect::<Vec<_>>();
    let mut report = UserReport {
        repetition: rep.index,
        user_id,
        known_attributes: known_names,
        method: config.method,
        accuracy: 0.0,
        ci: (0.0, 0.0),
        game: None,
        best_fitness: None,
        multiset_sql: Vec::new(),
        multiset: None,
        model: None,
        syntax: None,
        stage_choices: Vec::new(),
        trace: Vec::new(),
        stability: None,
        fleet_requests: 0,
        status: "predicted".into(),
        explain: None,
        timing: Timing::default(),
    };

    if config.method == Method::Gadotti {
        let start = Instant::now();
        let attack = GadottiAttack::new(target.clone());
        let result = setup.play(&attack)?;
        report.timing.game_seconds = start.elapsed().as_secs_f64();
        if attack.abstentions() == result.repetitions {
            report.status = "abstained".into();
        }
        report.accuracy = result.accuracy;
        report.ci = wilson_interval(result.accuracy, result.repetitions);
        report.game = Some(result);
        return Ok(report);
    }

    let start = Instant::now();
    let fitness = config.fitness_params(seed);
    let fleet = match config.game {
        GameKind::Aia => build_fleet(&rep.aux, &target, &fitness, &system)?,
        GameKind::Mia => build_mia_fleet(&rep.aux, &target, sensitive, &fitness, &system)?,
    };
    let evaluator = FitnessEvaluator::new(&fleet, config.train_config());
    let generator = QueryGenerator::new(schema, &target, &rep.aux)?;
    let found = search(config, &generator, &evaluator, derive_seed(seed, "search", 0))?;
    report.timing.search_seconds = start.elapsed().as_secs_f64();

    let start = Instant::now();
    let attack = MultisetAttack {
        multiset: found.multiset.clone(),
        model: found.model.clone(),
    };
    let result = setup.play(&attack as &dyn Attack)?;
    report.timing.game_seconds = start.elapsed().as_secs_f64();

    if config.explain {
        let start = Instant::now();
        let dflq = classify_difference_like(&found.multiset, &target, schema);
        let gdflq = classify_generalized_difference_like(&found.multiset, &target, schema);
        let attribution = |positions: &[usize]| {
            if positions.is_empty() {
                Ok(None)
            } else {
                attribute_accuracy(&found.multiset, positions, &evaluator, &setup).map(Some)
            }
        };
        report.explain = Some(Explainability {
            dflq: subset_counts(&found.multiset, &dflq, schema),
            gdflq: subset_counts(&found.multiset, &gdflq, schema),
            dflq_attribution: attribution(&dflq)?,
            gdflq_attribution: attribution(&gdflq)?,
        });
        report.timing.explain_seconds = start.elapsed().as_secs_f64();
    }

    report.accuracy = result.accuracy;
    report.ci = wilson_interval(result.accuracy, result.repetitions);
    report.game = Some(result);
    report.best_fitness = Some(found.fitness);
    report.multiset_sql = found.multiset.to_sql(schema);
    report.multiset = Some(found.multiset);
    report.model = Some(found.model);
    report.syntax = Some(found.best_syntax);
    report.stage_choices = found.stage_choices;
    report.stability = if found.trace.len() >= STABILITY_WINDOW && config.method != Method::Evolutionary {
        stability_metric(&found.trace).ok()
    } else {
        None
    };
    report.trace = found.trace;
    report.fleet_requests = found.requests;
    Ok(report)
}

fn schema_name(rep: &Repetition, original: usize) -> String {
    let position = rep.known.iter().position(|&a| a == original).expect("known attribute");
    // projected schema: uid, A' in order, sensitive
    rep.full.schema().attribute(position + 1).name.clone()
}

/// Every repetition and target of `config`, targets attacked in parallel.
pub fn run_experiment(data: &Dataset, config: &ExperimentConfig) -> Result<AttackReport> {
    config.validate()?;
    let start = Instant::now();
    let mut users = Vec::new();
    for index in 0..config.repetitions {
        let rep = prepare_repetition(data, config, index)?;
        let reports = rep
            .users
            .par_iter()
            .map(|&u| attack_user(&rep, u, config))
            .collect::<Result<Vec<_>>>()?;
        users.extend(reports);
    }
    let aggregate = Aggregate::from_users(&users);
    Ok(AttackReport {
        config: config.clone(),
        aggregate,
        users,
        timing: Timing {
            total_seconds: start.elapsed().as_secs_f64(),
            ..Timing::default()
        },
    })
}

/// Replays the game of a finished run, e.g. under other mitigations or
/// another seed, with the attack it found.
pub fn replay_user(
    rep: &Repetition,
    user: &UserReport,
    config: &ExperimentConfig,
) -> Result<crate::game::GameResult> {
    let (target, sensitive) = rep.target(user.user_id)?;
    let system = config.system();
    let seed = derive_seed(rep.seed, "user", user.user_id);
    let setup = GameSetup {
        mode: match config.game {
            GameKind::Aia => GameMode::Aia,
            GameKind::Mia => GameMode::Mia {
                target_sensitive: sensitive,
            },
        },
        distribution: &rep.eval,
        dataset_size: config.z + 1,
        target: &target,
        repetitions: config.game_repetitions,
        master_seed: game_seed(seed),
        system: &system,
    };
    match (&user.multiset, &user.model) {
        (Some(multiset), Some(model)) => setup.play(&MultisetAttack {
            multiset: multiset.clone(),
            model: model.clone(),
        }),
        _ if user.method == Method::Gadotti => setup.play(&GadottiAttack::new(target.clone())),
        _ => Err(Error::InvalidParameter(format!(
            "report for user {} holds no attack to replay",
            user.user_id
        ))),
    }
}
