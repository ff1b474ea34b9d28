//! Resource-constrained evolutionary search over sparsity configs, and a
//! random-search baseline.

use std::collections::HashMap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cost::ConstraintChecker;
use crate::error::{Error, Result};
use crate::sparsity::{SparsityConfig, FULL_GRID, MAX_TENTHS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchSettings {
    /// Population size `n`, even.
    pub population: usize,
    /// Elite count `k`.
    pub elites: usize,
    pub generations: usize,
    /// Per-block mutation probability.
    pub mutation_prob: f64,
    pub seed: u64,
    /// Rejection attempts per draw before giving up or falling back.
    pub max_attempts: usize,
    /// Ratios (tenths) that sampling and mutation draw from.
    pub grid: Vec<u8>,
}

impl Default for SearchSettings {
    fn default() -> Self {
        SearchSettings {
            population: 32,
            elites: 8,
            generations: 12,
            mutation_prob: 0.2,
            seed: 0,
            max_attempts: 100,
            grid: FULL_GRID.to_vec(),
        }
    }
}

impl SearchSettings {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.population == 0 || !self.population.is_multiple_of(2) {
            return fail(format!(
                "population {} must be even and positive",
                self.population
            ));
        }
        if self.elites == 0 || self.elites > self.population {
            return fail(format!(
                "elite count {} must lie in 1..={}",
                self.elites, self.population
            ));
        }
        if !(0.0..=1.0).contains(&self.mutation_prob) {
            return fail(format!(
                "mutation probability {} outside [0, 1]",
                self.mutation_prob
            ));
        }
        if self.max_attempts == 0 {
            return fail("max_attempts must be at least 1".into());
        }
        if self.grid.is_empty() || self.grid.iter().any(|&t| t > MAX_TENTHS) {
            return fail(format!(
                "sparsity grid {:?} must be a non-empty subset of 0..=8",
                self.grid
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub config: SparsityConfig,
    pub fitness: Option<f64>,
    /// MACs or milliseconds, as measured by the constraint.
    pub resource: f64,
}

/// Scores a config; higher is better.
pub trait Evaluator {
    fn fitness(&mut self, config: &SparsityConfig) -> Result<f64>;
}

impl<F: FnMut(&SparsityConfig) -> Result<f64>> Evaluator for F {
    fn fitness(&mut self, config: &SparsityConfig) -> Result<f64> {
        self(config)
    }
}

/// Memoizes an evaluator by config.
pub struct CachedEvaluator<E> {
    inner: E,
    cache: HashMap<SparsityConfig, f64>,
}

impl<E: Evaluator> CachedEvaluator<E> {
    pub fn new(inner: E) -> Self {
        CachedEvaluator {
            inner,
            cache: HashMap::new(),
        }
    }

    /// Distinct configs evaluated so far.
    pub fn evaluations(&self) -> usize {
        self.cache.len()
    }

    pub fn contains(&self, config: &SparsityConfig) -> bool {
        self.cache.contains_key(config)
    }

    pub fn fitness(&mut self, config: &SparsityConfig) -> Result<f64> {
        if let Some(&f) = self.cache.get(config) {
            return Ok(f);
        }
        let f = self.inner.fitness(config)?;
        if f.is_nan() {
            return Err(Error::InvalidArgument(format!(
                "fitness of {config} is NaN"
            )));
        }
        self.cache.insert(config.clone(), f);
        Ok(f)
    }
}

/// Draws one admissible config from `grid`, or fails after `max_attempts`.
fn sample_admissible(
    settings: &SearchSettings,
    checker: &mut ConstraintChecker,
    rng: &mut ChaCha8Rng,
) -> Result<Candidate> {
    let depths = checker.config.depths();
    for _ in 0..settings.max_attempts {
        let config = SparsityConfig::sample(&depths, &settings.grid, rng)?;
        let check = checker.check(&config)?;
        if check.pass {
            return Ok(Candidate {
                config,
                fitness: None,
                resource: check.value,
            });
        }
    }
    Err(Error::RejectionExhausted {
        attempts: settings.max_attempts,
    })
}

/// Fails unless the sparsest config (every block at 0.8) fits the budget.
pub fn check_feasible(checker: &mut ConstraintChecker) -> Result<()> {
    let depths = checker.config.depths();
    let sparsest = SparsityConfig::uniform(&depths, MAX_TENTHS)?;
    let check = checker.check(&sparsest)?;
    if !check.pass {
        return Err(Error::Infeasible(format!(
            "even uniform 0.8 sparsity needs {} against a budget of {}",
            check.value,
            checker.constraint.budget()
        )));
    }
    Ok(())
}

/// `n` independent rejection-sampled candidates.
pub fn init_population(
    settings: &SearchSettings,
    checker: &mut ConstraintChecker,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Candidate>> {
    settings.validate()?;
    check_feasible(checker)?;
    (0..settings.population)
        .map(|_| sample_admissible(settings, checker, rng))
        .collect()
}

/// Outcome of a genetic operator; `fallback` marks an exhausted rejection loop.
#[derive(Debug, Clone, PartialEq)]
pub struct Offspring {
    pub candidate: Candidate,
    pub fallback: bool,
}

/// Resamples each block from `grid` with probability `p`, repairs, and
/// retries until the constraint holds. Falls back to the parent.
pub fn mutate(
    parent: &Candidate,
    p: f64,
    grid: &[u8],
    max_attempts: usize,
    rng: &mut ChaCha8Rng,
    checker: &mut ConstraintChecker,
) -> Result<Offspring> {
    let depths = parent.config.depths().to_vec();
    for _ in 0..max_attempts {
        let raw: Vec<u8> = parent
            .config
            .tenths()
            .iter()
            .map(|&t| {
                if rng.gen_bool(p) {
                    grid[rng.gen_range(0..grid.len())]
                } else {
                    t
                }
            })
            .collect();
        let config = SparsityConfig::repair(&depths, &raw)?;
        let check = checker.check(&config)?;
        if check.pass {
            return Ok(Offspring {
                candidate: Candidate {
                    config,
                    fitness: None,
                    resource: check.value,
                },
                fallback: false,
            });
        }
    }
    Ok(Offspring {
        candidate: parent.clone(),
        fallback: true,
    })
}

/// Takes each block from either parent with equal odds, repairs, and retries
/// with fresh coin flips until the constraint holds. Falls back to the
/// fitter parent.
pub fn crossover(
    a: &Candidate,
    b: &Candidate,
    max_attempts: usize,
    rng: &mut ChaCha8Rng,
    checker: &mut ConstraintChecker,
) -> Result<Offspring> {
    if a.config.depths() != b.config.depths() {
        return Err(Error::Sparsity(
            "crossover parents have different layouts".into(),
        ));
    }
    let depths = a.config.depths().to_vec();
    for _ in 0..max_attempts {
        let raw: Vec<u8> = a
            .config
            .tenths()
            .iter()
            .zip(b.config.tenths())
            .map(|(&x, &y)| if rng.gen_bool(0.5) { x } else { y })
            .collect();
        let config = SparsityConfig::repair(&depths, &raw)?;
        let check = checker.check(&config)?;
        if check.pass {
            return Ok(Offspring {
                candidate: Candidate {
                    config,
                    fitness: None,
                    resource: check.value,
                },
                fallback: false,
            });
        }
    }
    let better = if b.fitness.unwrap_or(f64::NEG_INFINITY) > a.fitness.unwrap_or(f64::NEG_INFINITY)
    {
        b
    } else {
        a
    };
    Ok(Offspring {
        candidate: better.clone(),
        fallback: true,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationLog {
    pub generation: usize,
    pub best_fitness: f64,
    pub mean_fitness: f64,
    pub best_ever_fitness: f64,
    /// Resource of this generation's best candidate.
    pub best_resource: f64,
    pub mean_resource: f64,
    pub max_resource: f64,
    pub budget: f64,
    /// Distinct configs evaluated so far.
    pub evaluations: usize,
    /// Operators that exhausted their rejection budget this generation.
    pub fallbacks: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    pub best: Candidate,
    /// One row per bred generation.
    pub log: Vec<GenerationLog>,
    /// Distinct configs evaluated.
    pub evaluations: usize,
    pub fallbacks: usize,
}

fn evaluate_all<E: Evaluator>(pop: &mut [Candidate], eval: &mut CachedEvaluator<E>) -> Result<()> {
    for c in pop.iter_mut() {
        c.fitness = Some(eval.fitness(&c.config)?);
    }
    Ok(())
}

fn fitness(c: &Candidate) -> f64 {
    c.fitness.expect("evaluated")
}

/// Best first; ties go to the smaller resource, then the smaller config.
fn rank(pop: &mut [Candidate]) {
    pop.sort_by(|a, b| {
        fitness(b)
            .total_cmp(&fitness(a))
            .then(a.resource.total_cmp(&b.resource))
            .then(a.config.cmp(&b.config))
    });
}

fn better(a: &Candidate, b: &Candidate) -> bool {
    let mut pair = [a.clone(), b.clone()];
    rank(&mut pair);
    pair[0] == *a
}

/// The first `k` distinct configs of a ranked population. Duplicates would
/// otherwise crowd the elite set and stall the search.
fn distinct_top(pop: &[Candidate], k: usize) -> Vec<Candidate> {
    let mut seen = std::collections::HashSet::new();
    pop.iter()
        .filter(|c| seen.insert(&c.config))
        .take(k)
        .cloned()
        .collect()
}

/// Fails if any candidate breaks the constraint.
fn reverify(pop: &[Candidate], checker: &mut ConstraintChecker) -> Result<()> {
    for c in pop {
        if !checker.check(&c.config)?.pass {
            return Err(Error::Infeasible(format!(
                "candidate {} violates the constraint",
                c.config
            )));
        }
    }
    Ok(())
}

/// Evaluates the initial population, then breeds `generations` times:
/// `n/2` mutations of uniformly chosen elites and `n/2` crossovers of
/// distinct elite pairs. Returns the best candidate ever evaluated.
pub fn evolve<E: Evaluator>(
    settings: &SearchSettings,
    checker: &mut ConstraintChecker,
    evaluator: E,
) -> Result<SearchOutcome> {
    settings.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut eval = CachedEvaluator::new(evaluator);
    let mut pop = init_population(settings, checker, &mut rng)?;
    evaluate_all(&mut pop, &mut eval)?;
    rank(&mut pop);
    let mut best = pop[0].clone();
    let mut log = Vec::with_capacity(settings.generations);
    let mut fallbacks = 0;
    let half = settings.population / 2;
    for generation in 0..settings.generations {
        let elites = distinct_top(&pop, settings.elites);
        let elites = elites.as_slice();
        let k = elites.len();
        let mut next = Vec::with_capacity(settings.population);
        let mut gen_fallbacks = 0;
        // Offspring repeating an already evaluated (or already bred) config
        // are redrawn, up to `max_attempts` times, so every generation
        // spends its evaluations on unexplored configs where possible.
        for slot in 0..2 * half {
            let mut child = None;
            for _ in 0..settings.max_attempts {
                let drawn = if slot < half {
                    let parent = &elites[rng.gen_range(0..k)];
                    mutate(
                        parent,
                        settings.mutation_prob,
                        &settings.grid,
                        settings.max_attempts,
                        &mut rng,
                        checker,
                    )?
                } else {
                    let (i, j) = if k >= 2 {
                        let pair = sample(&mut rng, k, 2);
                        (pair.index(0), pair.index(1))
                    } else {
                        (0, 0)
                    };
                    crossover(
                        &elites[i],
                        &elites[j],
                        settings.max_attempts,
                        &mut rng,
                        checker,
                    )?
                };
                let config = &drawn.candidate.config;
                let novel =
                    !eval.contains(config) && !next.iter().any(|c: &Candidate| &c.config == config);
                child = Some(drawn);
                if novel {
                    break;
                }
            }
            let child = child.expect("max_attempts is at least 1");
            gen_fallbacks += child.fallback as usize;
            next.push(child.candidate);
        }
        evaluate_all(&mut next, &mut eval)?;
        reverify(&next, checker)?;
        rank(&mut next);
        if better(&next[0], &best) {
            best = next[0].clone();
        }
        pop = next;
        fallbacks += gen_fallbacks;
        let n = pop.len() as f64;
        log.push(GenerationLog {
            generation: generation + 1,
            best_fitness: fitness(&pop[0]),
            mean_fitness: pop.iter().map(fitness).sum::<f64>() / n,
            best_ever_fitness: fitness(&best),
            best_resource: pop[0].resource,
            mean_resource: pop.iter().map(|c| c.resource).sum::<f64>() / n,
            max_resource: pop
                .iter()
                .map(|c| c.resource)
                .fold(f64::NEG_INFINITY, f64::max),
            budget: checker.constraint.budget(),
            evaluations: eval.evaluations(),
            fallbacks: gen_fallbacks,
        });
    }
    Ok(SearchOutcome {
        best,
        log,
        evaluations: eval.evaluations(),
        fallbacks,
    })
}

/// Rejection-sampled uniform draws until `budget` distinct configs have been
/// evaluated, or the draws stop finding new ones (`budget × max_attempts`
/// draws in total). Returns the best.
pub fn random_search<E: Evaluator>(
    budget: usize,
    settings: &SearchSettings,
    checker: &mut ConstraintChecker,
    evaluator: E,
) -> Result<SearchOutcome> {
    settings.validate()?;
    if budget == 0 {
        return Err(Error::InvalidArgument(
            "random search needs a budget of at least 1".into(),
        ));
    }
    check_feasible(checker)?;
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut eval = CachedEvaluator::new(evaluator);
    let mut best: Option<Candidate> = None;
    let max_draws = budget.saturating_mul(settings.max_attempts);
    let mut draws = 0;
    while eval.evaluations() < budget && draws < max_draws {
        draws += 1;
        let mut c = sample_admissible(settings, checker, &mut rng)?;
        c.fitness = Some(eval.fitness(&c.config)?);
        if best.as_ref().is_none_or(|b| better(&c, b)) {
            best = Some(c);
        }
    }
    Ok(SearchOutcome {
        best: best.expect("at least one draw"),
        log: Vec::new(),
        evaluations: eval.evaluations(),
        fallbacks: 0,
    })
}

/// Evaluates every admissible config; returns the best.
pub fn exhaustive_search<E: Evaluator>(
    checker: &mut ConstraintChecker,
    evaluator: E,
) -> Result<SearchOutcome> {
    check_feasible(checker)?;
    let mut eval = CachedEvaluator::new(evaluator);
    let mut best: Option<Candidate> = None;
    for config in SparsityConfig::enumerate(&checker.config.depths()) {
        let check = checker.check(&config)?;
        if !check.pass {
            continue;
        }
        let c = Candidate {
            fitness: Some(eval.fitness(&config)?),
            config,
            resource: check.value,
        };
        if best.as_ref().is_none_or(|b| better(&c, b)) {
            best = Some(c);
        }
    }
    Ok(SearchOutcome {
        best: best.expect("uniform 0.8 is admissible"),
        log: Vec::new(),
        evaluations: eval.evaluations(),
        fallbacks: 0,
    })
}

pub fn search_log_csv(log: &[GenerationLog]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in log {
        w.serialize(row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}
