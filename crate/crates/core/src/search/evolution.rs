use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::FitnessEvaluator;
use crate::inference::LogisticModel;
use crate::query::{QueryGenerator, QueryMultiset, QuerySyntax};
use crate::seed::rng_for;

use super::random_multiset;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvolutionParams {
    pub m: usize,
    pub population: usize,
    pub elite: usize,
    pub generations: usize,
    /// Chance of redrawing each attribute's condition in a mutated copy.
    pub mutation_rate: f64,
    pub master_seed: u64,
}

impl EvolutionParams {
    fn validate(&self) -> Result<()> {
        if self.m == 0 || self.elite == 0 || self.population < self.elite {
            return Err(Error::InvalidParameter(format!(
                "need m >= 1 and population >= elite >= 1, got m={} P={} P_e={}",
                self.m, self.population, self.elite
            )));
        }
        if !(0.0..=1.0).contains(&self.mutation_rate) {
            return Err(Error::InvalidParameter("mutation rate must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvolutionResult {
    /// Best fitness of the initial population and of every generation.
    pub best_per_generation: Vec<f64>,
    pub best_fitness: f64,
    pub best_multiset: QueryMultiset,
    pub best_model: LogisticModel,
}

struct Member {
    multiset: QueryMultiset,
    fitness: f64,
    model: LogisticModel,
}

/// Elitist evolutionary search over limited-syntax multisets. Each
/// generation keeps the `elite` fittest members and refills the population
/// with mutated copies of random elites.
pub fn evolutionary_baseline(
    generator: &QueryGenerator,
    params: &EvolutionParams,
    evaluator: &FitnessEvaluator<'_>,
) -> Result<EvolutionResult> {
    params.validate()?;
    let syntax = QuerySyntax::limited();
    let mut rng = rng_for(params.master_seed, "evolution", 0);
    let score = |multiset: QueryMultiset| -> Result<Member> {
        let out = evaluator.evaluate(&multiset)?;
        Ok(Member {
            multiset,
            fitness: out.fitness,
            model: out.model,
        })
    };
    let mut population = (0..params.population)
        .map(|_| score(random_multiset(generator, &syntax, params.m, &mut rng)?))
        .collect::<Result<Vec<_>>>()?;
    let rank = |pop: &mut Vec<Member>| {
        // stable: equal fitness keeps the earlier member first
        pop.sort_by(|a, b| b.fitness.total_cmp(&a.fitness));
    };
    rank(&mut population);
    let mut best_per_generation = vec![population[0].fitness];
    let free = generator.free_attributes();

    for _ in 0..params.generations {
        population.truncate(params.elite);
        let mut children = Vec::with_capacity(params.population - params.elite);
        for _ in params.elite..params.population {
            let parent = &population[rng.gen_range(0..params.elite)];
            let mut child = parent.multiset.clone();
            for query in &mut child.queries {
                for &a in &free {
                    if rng.gen_bool(params.mutation_rate) {
                        query.set(a, generator.random_condition(a, &syntax, &mut rng)?);
                    }
                }
            }
            let slot = *(0..params.m).collect::<Vec<_>>().choose(&mut rng).expect("m >= 1");
            child.queries[slot] = generator.random_query(&syntax, &mut rng)?;
            children.push(child);
        }
        for child in children {
            population.push(score(child)?);
        }
        rank(&mut population);
        best_per_generation.push(population[0].fitness);
    }

    let best = population.swap_remove(0);
    Ok(EvolutionResult {
        best_per_generation,
        best_fitness: best.fitness,
        best_multiset: best.multiset,
        best_model: best.model,
    })
}
