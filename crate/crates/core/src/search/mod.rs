//! Attack discovery: importance-guided local search over query multisets,
//! its multi-stage extension over syntax axes, an evolutionary baseline and
//! the hand-crafted differential attack.

mod evolution;
mod gadotti;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::{AnswerColumn, FitnessEvaluator, FitnessOutcome};
use crate::inference::{query_importance, LogisticModel};
use crate::query::{Axis, QueryGenerator, QueryMultiset, QuerySyntax};
use crate::seed::{derive_seed, rng_for, Rng};

pub use evolution::{evolutionary_baseline, EvolutionParams, EvolutionResult};
pub use gadotti::{gadotti_attack, GadottiAttack, GadottiOutcome, GadottiPair, GadottiStatus};

/// Window of the stability metric.
pub const STABILITY_WINDOW: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchParams {
    /// Multiset size.
    pub m: usize,
    /// Queries replaced per iteration.
    pub new_per_iter: usize,
    /// Iterations of each local search run.
    pub iterations: usize,
    /// Axes the multi-stage search may add to the limited syntax.
    pub axes: Vec<Axis>,
    pub master_seed: u64,
}

impl SearchParams {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::InvalidParameter("m must be at least 1".into()));
        }
        if self.new_per_iter == 0 || self.new_per_iter > self.m {
            return Err(Error::InvalidParameter(format!(
                "new_per_iter must lie in 1..={}, got {}",
                self.m, self.new_per_iter
            )));
        }
        Ok(())
    }
}

/// Fitness of every iteration of one local search run. Entry 0 is the
/// initial multiset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitnessTrace {
    pub values: Vec<f64>,
    /// Fleet answers requested by each iteration (entry 0: initialization).
    pub requests: Vec<u64>,
    pub best_iteration: usize,
    pub best_fitness: f64,
    pub best_multiset: QueryMultiset,
    pub best_model: LogisticModel,
}

impl FitnessTrace {
    /// Running maximum of the trace.
    pub fn best_so_far(&self) -> Vec<f64> {
        self.values
            .iter()
            .scan(f64::NEG_INFINITY, |best, &v| {
                *best = best.max(v);
                Some(*best)
            })
            .collect()
    }
}

/// Positions kept by one search step: the `keep` largest importances, ties
/// resolved toward the lower position. Returned in increasing order.
pub fn retained_positions(importance: &[f64], keep: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..importance.len()).collect();
    order.sort_by(|&a, &b| importance[b].total_cmp(&importance[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = order.into_iter().take(keep).collect();
    kept.sort_unstable();
    kept
}

fn random_multiset(
    generator: &QueryGenerator,
    syntax: &QuerySyntax,
    m: usize,
    rng: &mut Rng,
) -> Result<QueryMultiset> {
    (0..m)
        .map(|_| generator.random_query(syntax, rng))
        .collect::<Result<Vec<_>>>()
        .map(QueryMultiset::new)
}

/// Single-stage local search. Each iteration keeps the `m - new_per_iter`
/// most important queries of the current model, replaces the others with
/// random queries and refits; only the new queries are answered.
pub fn local_search(
    generator: &QueryGenerator,
    syntax: &QuerySyntax,
    start: Option<QueryMultiset>,
    params: &SearchParams,
    evaluator: &FitnessEvaluator<'_>,
    rng: &mut Rng,
) -> Result<FitnessTrace> {
    params.validate()?;
    let mut current = match start {
        Some(s) if s.len() != params.m => {
            return Err(Error::InvalidParameter(format!(
                "start multiset has {} queries, expected {}",
                s.len(),
                params.m
            )))
        }
        Some(s) => s,
        None => random_multiset(generator, syntax, params.m, rng)?,
    };
    let before = evaluator.requests();
    let mut columns: Vec<AnswerColumn> = evaluator.answer_columns(&current);
    let mut outcome: FitnessOutcome = evaluator.evaluate_columns(&columns)?;
    let mut values = vec![outcome.fitness];
    let mut requests = vec![evaluator.requests() - before];
    let mut best = (0, outcome.fitness, current.clone(), outcome.model.clone());
    let keep = params.m - params.new_per_iter;

    for i in 1..=params.iterations {
        let before = evaluator.requests();
        let kept = retained_positions(&query_importance(&outcome.model), keep);
        let mut is_kept = vec![false; params.m];
        for p in kept {
            is_kept[p] = true;
        }
        for p in (0..params.m).filter(|&p| !is_kept[p]) {
            let q = generator.random_query(syntax, rng)?;
            columns[p] = evaluator.answer_column(&q);
            current.queries[p] = q;
        }
        outcome = evaluator.evaluate_columns(&columns)?;
        values.push(outcome.fitness);
        requests.push(evaluator.requests() - before);
        if outcome.fitness > best.1 {
            best = (i, outcome.fitness, current.clone(), outcome.model.clone());
        }
    }
    Ok(FitnessTrace {
        values,
        requests,
        best_iteration: best.0,
        best_fitness: best.1,
        best_multiset: best.2,
        best_model: best.3,
    })
}

/// One local search run of a stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageCandidate {
    /// Axis added for this run; `None` for the initial limited-syntax stage.
    pub axis: Option<Axis>,
    pub syntax: QuerySyntax,
    pub trace: FitnessTrace,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageResult {
    pub candidates: Vec<StageCandidate>,
    /// Index into `candidates` of the stage winner.
    pub chosen: usize,
}

impl StageResult {
    pub fn winner(&self) -> &StageCandidate {
        &self.candidates[self.chosen]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiStageResult {
    pub stages: Vec<StageResult>,
    pub best_stage: usize,
    pub best_fitness: f64,
    pub best_multiset: QueryMultiset,
    pub best_model: LogisticModel,
    pub best_syntax: QuerySyntax,
}

impl MultiStageResult {
    /// Axes chosen by each stage after the first.
    pub fn stage_choices(&self) -> Vec<Axis> {
        self.stages
            .iter()
            .filter_map(|s| s.winner().axis)
            .collect()
    }
}

/// Multi-stage search: stage 0 searches the limited syntax; each later stage
/// runs one local search per unexplored axis, seeded with the previous
/// stage's best multiset, and keeps the best axis. Returns the best
/// multiset over all stages, ties going to the earliest.
pub fn multi_stage_search(
    generator: &QueryGenerator,
    params: &SearchParams,
    evaluator: &FitnessEvaluator<'_>,
) -> Result<MultiStageResult> {
    params.validate()?;
    let seed = params.master_seed;
    let limited = QuerySyntax::limited();
    let mut rng = rng_for(seed, "stage", 0);
    let trace = local_search(generator, &limited, None, params, evaluator, &mut rng)?;
    let mut stages = vec![StageResult {
        candidates: vec![StageCandidate {
            axis: None,
            syntax: limited,
            trace,
        }],
        chosen: 0,
    }];
    let mut explored = limited;
    let mut remaining: Vec<Axis> = Vec::new();
    for &a in &params.axes {
        if !remaining.contains(&a) {
            remaining.push(a);
        }
    }

    loop {
        let eligible: Vec<Axis> = remaining
            .iter()
            .copied()
            .filter(|&a| a != Axis::D2 || explored.has(Axis::D1))
            .collect();
        if eligible.is_empty() {
            break;
        }
        let previous = stages.last().expect("stage 0").winner().trace.best_multiset.clone();
        let stage_index = stages.len() as u64;
        let candidates = eligible
            .iter()
            .map(|&axis| {
                let syntax = explored.with(axis)?;
                let mut rng = rng_for(
                    derive_seed(seed, "stage", stage_index),
                    "axis",
                    axis as u64,
                );
                let trace = local_search(
                    generator,
                    &syntax,
                    Some(previous.clone()),
                    params,
                    evaluator,
                    &mut rng,
                )?;
                Ok(StageCandidate {
                    axis: Some(axis),
                    syntax,
                    trace,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut chosen = 0;
        for (i, c) in candidates.iter().enumerate() {
            if c.trace.best_fitness > candidates[chosen].trace.best_fitness {
                chosen = i;
            }
        }
        let axis = candidates[chosen].axis.expect("later stages add an axis");
        explored = candidates[chosen].syntax;
        remaining.retain(|&a| a != axis);
        stages.push(StageResult { candidates, chosen });
    }

    let mut best_stage = 0;
    for (j, s) in stages.iter().enumerate() {
        if s.winner().trace.best_fitness > stages[best_stage].winner().trace.best_fitness {
            best_stage = j;
        }
    }
    let winner = stages[best_stage].winner();
    Ok(MultiStageResult {
        best_fitness: winner.trace.best_fitness,
        best_multiset: winner.trace.best_multiset.clone(),
        best_model: winner.trace.best_model.clone(),
        best_syntax: winner.syntax,
        best_stage,
        stages,
    })
}

/// Distance between the last fitness value and the mean of the last 100.
pub fn stability_metric(values: &[f64]) -> Result<f64> {
    if values.len() < STABILITY_WINDOW {
        return Err(Error::InvalidParameter(format!(
            "stability needs at least {STABILITY_WINDOW} iterations, got {}",
            values.len()
        )));
    }
    let last = values[values.len() - 1];
    let gap: f64 = values[values.len() - STABILITY_WINDOW..]
        .iter()
        .map(|v| last - v)
        .sum();
    Ok((gap / STABILITY_WINDOW as f64).abs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::fixtures::small;
    use crate::data::{Dataset, TargetRecord};
    use crate::game::{build_fleet, FitnessParams};
    use crate::inference::TrainConfig;
    use crate::qbs::SystemSpec;

    fn aux() -> Dataset {
        let rows: Vec<_> = (0..300)
            .map(|i| (i, (i % 3) as f64, (i % 40) as f64, (i % 2) as f64))
            .collect();
        small(&rows)
    }

    fn setup(system: SystemSpec) -> (QueryGenerator, crate::game::Fleet) {
        let a = aux();
        let t = TargetRecord::new(a.schema(), 7_000, vec![1, 2], vec![2.0, 77.0]).unwrap();
        let params = FitnessParams {
            f: 40,
            g: 20,
            z: 30,
            train: TrainConfig::default(),
            master_seed: 5,
        };
        let fleet = build_fleet(&a, &t, &params, &system).unwrap();
        (QueryGenerator::new(a.schema(), &t, &a).unwrap(), fleet)
    }

    fn params(m: usize, iterations: usize) -> SearchParams {
        SearchParams {
            m,
            new_per_iter: 1,
            iterations,
            axes: vec![],
            master_seed: 9,
        }
    }

    #[test]
    fn retention_matches_sort_oracle() {
        let imp = [0.5, 2.0, 0.5, 3.0, 0.0, 2.0];
        assert_eq!(retained_positions(&imp, 3), vec![1, 3, 5]);
        assert_eq!(retained_positions(&imp, 4), vec![0, 1, 3, 5]);
        assert_eq!(retained_positions(&[0.0; 4], 2), vec![0, 1]);
        assert!(retained_positions(&imp, 0).is_empty());
    }

    #[test]
    fn zero_iterations_returns_initial_multiset() {
        let (gen, fleet) = setup(SystemSpec::default());
        let ev = FitnessEvaluator::new(&fleet, TrainConfig::default());
        let start = QueryMultiset::new(
            (0..4)
                .map(|_| gen.random_query(&QuerySyntax::limited(), &mut rng_for(1, "x", 0)).unwrap())
                .collect(),
        );
        let trace = local_search(
            &gen,
            &QuerySyntax::limited(),
            Some(start.clone()),
            &params(4, 0),
            &ev,
            &mut rng_for(1, "s", 0),
        )
        .unwrap();
        assert_eq!(trace.values.len(), 1);
        assert_eq!(trace.best_multiset, start);
        assert_eq!(trace.best_fitness, ev.evaluate(&start).unwrap().fitness);
    }

    #[test]
    fn search_caches_and_only_answers_new_queries() {
        let (gen, fleet) = setup(SystemSpec::default());
        let ev = FitnessEvaluator::new(&fleet, TrainConfig::default());
        let trace = local_search(
            &gen,
            &QuerySyntax::limited(),
            None,
            &params(5, 30),
            &ev,
            &mut rng_for(2, "s", 0),
        )
        .unwrap();
        assert_eq!(trace.values.len(), 31);
        assert_eq!(trace.requests[0], 5 * 60);
        assert!(trace.requests[1..].iter().all(|&r| r == 60));
        let best = trace.best_so_far();
        assert!(best.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(*best.last().unwrap(), trace.best_fitness);
        assert_eq!(trace.values[trace.best_iteration], trace.best_fitness);
        // cached answers give the same fitness as a fresh evaluation
        let fresh = ev.evaluate(&trace.best_multiset).unwrap();
        assert_eq!(fresh.fitness, trace.best_fitness);
        assert_eq!(fresh.model, trace.best_model);
    }

    #[test]
    fn exact_system_search_finds_the_bit() {
        let (gen, fleet) = setup(SystemSpec::Exact);
        let ev = FitnessEvaluator::new(&fleet, TrainConfig::default());
        let trace = local_search(
            &gen,
            &QuerySyntax::limited(),
            None,
            &params(3, 60),
            &ev,
            &mut rng_for(3, "s", 0),
        )
        .unwrap();
        assert_eq!(trace.best_fitness, 1.0);
    }

    #[test]
    fn multi_stage_without_axes_is_single_stage() {
        let (gen, fleet) = setup(SystemSpec::default());
        let p = params(4, 10);
        let ev = FitnessEvaluator::new(&fleet, TrainConfig::default());
        let multi = multi_stage_search(&gen, &p, &ev).unwrap();
        let single = local_search(
            &gen,
            &QuerySyntax::limited(),
            None,
            &p,
            &ev,
            &mut rng_for(p.master_seed, "stage", 0),
        )
        .unwrap();
        assert_eq!(multi.stages.len(), 1);
        assert_eq!(multi.best_multiset, single.best_multiset);
        assert_eq!(multi.best_fitness, single.best_fitness);

        let mut only_d2 = p.clone();
        only_d2.axes = vec![Axis::D2];
        let r = multi_stage_search(&gen, &only_d2, &ev).unwrap();
        assert_eq!(r.stages.len(), 1);
        assert_eq!(r.best_multiset, single.best_multiset);
    }

    #[test]
    fn multi_stage_explores_axes_in_dependency_order() {
        let (gen, fleet) = setup(SystemSpec::default());
        let mut p = params(4, 5);
        p.axes = vec![Axis::D2, Axis::D1, Axis::D3];
        let ev = FitnessEvaluator::new(&fleet, TrainConfig::default());
        let r = multi_stage_search(&gen, &p, &ev).unwrap();
        assert_eq!(r.stages.len(), 4);
        // stage 1 cannot try D2
        let first: Vec<_> = r.stages[1].candidates.iter().map(|c| c.axis).collect();
        assert!(!first.contains(&Some(Axis::D2)));
        let mut choices = r.stage_choices();
        choices.sort();
        assert_eq!(choices, vec![Axis::D1, Axis::D2, Axis::D3]);
        let initial = r.stages[0].winner().trace.values[0];
        assert!(r.best_fitness >= initial);
        for s in &r.stages {
            assert!(r.best_fitness >= s.winner().trace.values[0]);
        }
    }

    #[test]
    fn stability_definition() {
        assert!(stability_metric(&[0.5; 99]).is_err());
        assert_eq!(stability_metric(&[0.62; 150]).unwrap(), 0.0);
        let mut t = vec![0.7; 99];
        t.push(0.8);
        assert!((stability_metric(&t).unwrap() - 0.099).abs() < 1e-12);
    }
}
