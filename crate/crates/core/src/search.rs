//! Configuration space, random sampling and the elitist genetic search over
//! (sparsity ratios, α).

use std::collections::{HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::magnifier::{ALPHA_MAX, ALPHA_MIN};

/// Quantized search space: every slot picks from `ratio_choices`, α from
/// `alpha_choices`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub ratio_choices: Vec<f64>,
    pub alpha_choices: Vec<f64>,
    pub slots: usize,
}

pub fn default_ratio_choices() -> Vec<f64> {
    (1..=8).map(|i| i as f64 / 10.0).collect()
}

pub fn default_alpha_choices() -> Vec<f64> {
    (0..7).map(|i| 1.0 + 0.5 * i as f64).collect()
}

impl SearchSpace {
    pub fn new(slots: usize) -> Self {
        SearchSpace {
            ratio_choices: default_ratio_choices(),
            alpha_choices: default_alpha_choices(),
            slots,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.slots == 0 || self.ratio_choices.is_empty() || self.alpha_choices.is_empty() {
            return Err(Error::Config("search space needs slots, ratio choices and alpha choices".into()));
        }
        if let Some(r) = self.ratio_choices.iter().find(|r| !(0.0..1.0).contains(*r)) {
            return Err(Error::Config(format!("ratio choice {r} outside [0, 1)")));
        }
        if let Some(a) = self.alpha_choices.iter().find(|a| !(ALPHA_MIN..=ALPHA_MAX).contains(*a)) {
            return Err(Error::Config(format!("alpha choice {a} outside [{ALPHA_MIN}, {ALPHA_MAX}]")));
        }
        Ok(())
    }

    /// Number of distinct configurations (saturating).
    pub fn size(&self) -> u128 {
        (self.ratio_choices.len() as u128)
            .saturating_pow(self.slots as u32)
            .saturating_mul(self.alpha_choices.len() as u128)
    }

    pub fn contains(&self, c: &Config) -> bool {
        c.ratios.len() == self.slots
            && c.ratios.iter().all(|r| self.ratio_choices.contains(r))
            && self.alpha_choices.contains(&c.alpha)
    }

    fn decode(&self, g: &Genome) -> Config {
        Config {
            ratios: g.ratios.iter().map(|&i| self.ratio_choices[i]).collect(),
            alpha: self.alpha_choices[g.alpha],
        }
    }

    fn random_genome(&self, rng: &mut impl Rng) -> Genome {
        Genome {
            ratios: (0..self.slots)
                .map(|_| rng.random_range(0..self.ratio_choices.len()))
                .collect(),
            alpha: rng.random_range(0..self.alpha_choices.len()),
        }
    }
}

/// One point of the space: a ratio per block pair and a magnification factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Config {
    pub ratios: Vec<f64>,
    pub alpha: f64,
}

impl Config {
    pub fn dense(slots: usize, alpha: f64) -> Self {
        Config {
            ratios: vec![0.0; slots],
            alpha,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct Genome {
    ratios: Vec<usize>,
    alpha: usize,
}

/// Uniform independent draw per slot and for α.
pub fn sample_config(space: &SearchSpace, rng: &mut impl Rng) -> Config {
    space.decode(&space.random_genome(rng))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitnessRecord {
    pub config: Config,
    /// Mean validation loss; lower is better. `+inf` marks a failed evaluation.
    pub fitness: f64,
    pub seed: u64,
}

/// One line of the search log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalLogLine {
    pub generation: usize,
    pub config: Config,
    pub fitness: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaParams {
    pub population: usize,
    pub generations: usize,
    pub elite: usize,
    pub tournament: usize,
    pub mutation_rate: f64,
}

impl Default for GaParams {
    fn default() -> Self {
        GaParams {
            population: 16,
            generations: 10,
            elite: 2,
            tournament: 3,
            mutation_rate: 0.2,
        }
    }
}

impl GaParams {
    pub fn validate(&self) -> Result<()> {
        if self.population < 2 || self.tournament == 0 || self.elite > self.population {
            return Err(Error::Config(format!("invalid genetic search parameters {self:?}")));
        }
        if !(0.0..=1.0).contains(&self.mutation_rate) {
            return Err(Error::Config(format!("mutation rate {} outside [0, 1]", self.mutation_rate)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    pub best: FitnessRecord,
    /// Best fitness in the population after each generation (index 0 is the
    /// initial population).
    pub generation_best: Vec<f64>,
    /// Every distinct configuration evaluated, in evaluation order.
    pub log: Vec<EvalLogLine>,
}

/// Elitist genetic search. Each generation keeps the `elite` best members and
/// fills the rest by tournament selection, one-point crossover of the ratio
/// vector (α comes from a randomly chosen parent) and per-gene resampling
/// with probability `mutation_rate`; a child that was already evaluated or
/// already joined the new generation is redrawn a bounded number of times. Each distinct configuration is evaluated once;
/// non-finite fitness counts as `+inf`.
pub fn evolve(
    space: &SearchSpace,
    fitness: &mut dyn FnMut(&Config) -> f64,
    params: &GaParams,
    seed: u64,
) -> Result<SearchOutcome> {
    space.validate()?;
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cache: HashMap<Genome, f64> = HashMap::new();
    let mut log = Vec::new();
    let mut best: Option<(Genome, f64)> = None;

    let mut score = |g: &Genome, generation: usize, log: &mut Vec<EvalLogLine>, best: &mut Option<(Genome, f64)>| -> f64 {
        if let Some(&f) = cache.get(g) {
            return f;
        }
        let config = space.decode(g);
        let mut f = fitness(&config);
        if !f.is_finite() {
            log::warn!("non-finite fitness for {config:?}; treating as +inf");
            f = f64::INFINITY;
        }
        cache.insert(g.clone(), f);
        log.push(EvalLogLine {
            generation,
            config,
            fitness: f,
            seed,
        });
        if best.as_ref().is_none_or(|(_, b)| f < *b) {
            *best = Some((g.clone(), f));
        }
        f
    };

    let mut pop: Vec<Genome> = (0..params.population).map(|_| space.random_genome(&mut rng)).collect();
    let mut fit: Vec<f64> = pop.iter().map(|g| score(g, 0, &mut log, &mut best)).collect();
    let mut generation_best = vec![fit.iter().copied().fold(f64::INFINITY, f64::min)];
    let mut seen: HashSet<Genome> = pop.iter().cloned().collect();

    for generation in 1..=params.generations {
        let mut order: Vec<usize> = (0..pop.len()).collect();
        order.sort_by(|&a, &b| fit[a].total_cmp(&fit[b]).then(a.cmp(&b)));
        let mut next: Vec<Genome> = order[..params.elite].iter().map(|&i| pop[i].clone()).collect();
        while next.len() < params.population {
            let mut child = breed(&pop, &fit, space, params, &mut rng);
            for _ in 1..DUPLICATE_RETRIES {
                if !next.contains(&child) && !seen.contains(&child) {
                    break;
                }
                child = breed(&pop, &fit, space, params, &mut rng);
            }
            next.push(child);
        }
        pop = next;
        seen.extend(pop.iter().cloned());
        fit = pop.iter().map(|g| score(g, generation, &mut log, &mut best)).collect();
        generation_best.push(fit.iter().copied().fold(f64::INFINITY, f64::min));
    }

    let (g, f) = best.expect("population is non-empty");
    Ok(SearchOutcome {
        best: FitnessRecord {
            config: space.decode(&g),
            fitness: f,
            seed,
        },
        generation_best,
        log,
    })
}

/// Offspring already seen are redrawn up to this many times, which keeps
/// the population diverse.
const DUPLICATE_RETRIES: usize = 8;

fn breed(pop: &[Genome], fit: &[f64], space: &SearchSpace, params: &GaParams, rng: &mut impl Rng) -> Genome {
    let a = tournament(fit, params.tournament, rng);
    let b = tournament(fit, params.tournament, rng);
    let mut child = crossover(&pop[a], &pop[b], rng);
    mutate(&mut child, space, params.mutation_rate, rng);
    child
}

fn tournament(fit: &[f64], size: usize, rng: &mut impl Rng) -> usize {
    (0..size)
        .map(|_| rng.random_range(0..fit.len()))
        .min_by(|&a, &b| fit[a].total_cmp(&fit[b]).then(a.cmp(&b)))
        .expect("tournament size is positive")
}

fn crossover(a: &Genome, b: &Genome, rng: &mut impl Rng) -> Genome {
    let n = a.ratios.len();
    let cut = if n > 1 { rng.random_range(1..n) } else { n };
    let mut ratios = a.ratios[..cut].to_vec();
    ratios.extend_from_slice(&b.ratios[cut..]);
    let alpha = if rng.random_bool(0.5) { a.alpha } else { b.alpha };
    Genome { ratios, alpha }
}

fn mutate(g: &mut Genome, space: &SearchSpace, rate: f64, rng: &mut impl Rng) {
    for r in &mut g.ratios {
        if rng.random_bool(rate) {
            *r = rng.random_range(0..space.ratio_choices.len());
        }
    }
    if rng.random_bool(rate) {
        g.alpha = rng.random_range(0..space.alpha_choices.len());
    }
}
