//! Elitist genetic search over learning rate, kernel sizes and pooling.
//!
//! Fitness is the best validation loss on the first CV fold after training
//! from a fresh initialization; lower is fitter.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::TrialSet;
use crate::error::{Error, Result};
use crate::model::{AbsoluteNet, ModelConfig};
use crate::rng::{derive, derived, mix, Rng};
use crate::train::{fit, stratified_folds, FoldSplit, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Genome {
    pub learning_rate: f64,
    pub temporal_kernel: usize,
    pub separable_kernel: usize,
    pub pool_size: usize,
    pub pool_stride: usize,
}

/// Inclusive gene ranges. The learning rate is sampled log-uniformly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Bounds {
    pub learning_rate: (f64, f64),
    pub temporal_kernel: (usize, usize),
    pub separable_kernel: (usize, usize),
    pub pool_size: (usize, usize),
    pub pool_stride: (usize, usize),
}

impl Default for Bounds {
    fn default() -> Self {
        Bounds {
            learning_rate: (1e-5, 1e-2),
            temporal_kernel: (3, 11),
            separable_kernel: (3, 7),
            pool_size: (5, 50),
            pool_stride: (1, 16),
        }
    }
}

impl Bounds {
    fn ints(&self) -> [(usize, usize); 4] {
        [
            self.temporal_kernel,
            self.separable_kernel,
            self.pool_size,
            self.pool_stride,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.learning_rate;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::config("bounds.learning_rate", "need 0 < lo <= hi"));
        }
        if self.ints().iter().any(|&(lo, hi)| lo == 0 || lo > hi) {
            return Err(Error::config("bounds", "integer genes need 1 <= lo <= hi"));
        }
        Ok(())
    }

    pub fn contains(&self, g: &Genome) -> bool {
        let (lo, hi) = self.learning_rate;
        (lo..=hi).contains(&g.learning_rate)
            && self
                .ints()
                .iter()
                .zip(g.ints())
                .all(|(&(lo, hi), v)| (lo..=hi).contains(&v))
    }
}

impl Genome {
    fn ints(&self) -> [usize; 4] {
        [
            self.temporal_kernel,
            self.separable_kernel,
            self.pool_size,
            self.pool_stride,
        ]
    }

    fn with_ints(learning_rate: f64, v: [usize; 4]) -> Self {
        Genome {
            learning_rate,
            temporal_kernel: v[0],
            separable_kernel: v[1],
            pool_size: v[2],
            pool_stride: v[3],
        }
    }

    /// Model and training configs with this genome's genes substituted.
    pub fn apply(&self, model: &ModelConfig, train: &TrainConfig) -> (ModelConfig, TrainConfig) {
        (
            ModelConfig {
                temporal_kernel: self.temporal_kernel,
                separable_kernel: self.separable_kernel,
                pool_size: self.pool_size,
                pool_stride: self.pool_stride,
                ..model.clone()
            },
            TrainConfig {
                learning_rate: self.learning_rate,
                ..train.clone()
            },
        )
    }

    /// The pooling window fits the post-convolution length.
    pub fn feasible(&self, model: &ModelConfig) -> bool {
        self.temporal_kernel <= model.input_samples && self.pool_size <= model.input_samples - self.temporal_kernel + 1
    }

    /// Stable identity used for memoization and per-genome seeds.
    pub fn key(&self) -> u64 {
        self.ints()
            .iter()
            .fold(mix(self.learning_rate.to_bits()), |h, &v| mix(h ^ v as u64))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaConfig {
    pub population: usize,
    pub generations: usize,
    pub mutation_rate: f64,
    pub elite_count: usize,
    /// Training epochs per fitness evaluation.
    pub fitness_epochs: usize,
    pub seed: u64,
    /// Evaluate fitness concurrently on the current rayon pool.
    pub parallel: bool,
    pub bounds: Bounds,
}

impl Default for GaConfig {
    fn default() -> Self {
        GaConfig {
            population: 8,
            generations: 3,
            mutation_rate: 0.1,
            elite_count: 2,
            fitness_epochs: 10,
            seed: 0,
            parallel: false,
            bounds: Bounds::default(),
        }
    }
}

impl GaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.population < 2 {
            return Err(Error::config("population", "need at least 2 genomes"));
        }
        if self.generations == 0 {
            return Err(Error::config("generations", "need at least one generation"));
        }
        if !(0.0..=1.0).contains(&self.mutation_rate) {
            return Err(Error::config("mutation_rate", "must be in [0, 1]"));
        }
        if self.elite_count == 0 || self.elite_count > self.population {
            return Err(Error::config("elite_count", "must be in 1..=population"));
        }
        if self.fitness_epochs == 0 {
            return Err(Error::config("fitness_epochs", "must be positive"));
        }
        self.bounds.validate()
    }
}

const MAX_RESAMPLE: usize = 1000;

fn sample(bounds: &Bounds, rng: &mut Rng) -> Genome {
    let (lo, hi) = bounds.learning_rate;
    let lr = (lo.ln() + rng.random::<f64>() * (hi.ln() - lo.ln()))
        .exp()
        .clamp(lo, hi);
    Genome::with_ints(lr, bounds.ints().map(|(lo, hi)| rng.random_range(lo..=hi)))
}

/// Uniformly sampled genomes (log-uniform learning rate), resampling any
/// whose pooling does not fit the model.
pub fn init_population(config: &GaConfig, model: &ModelConfig, rng: &mut Rng) -> Result<Vec<Genome>> {
    config.validate()?;
    let b = &config.bounds;
    let tk_min = b.temporal_kernel.0;
    if tk_min > model.input_samples || b.pool_size.0 > model.input_samples - tk_min + 1 {
        return Err(Error::config("bounds", "no genome within bounds fits the input length"));
    }
    (0..config.population)
        .map(|_| {
            (0..MAX_RESAMPLE)
                .map(|_| sample(b, rng))
                .find(|g| g.feasible(model))
                .ok_or_else(|| Error::config("bounds", "feasible region too small to sample"))
        })
        .collect()
}

fn crossover(a: &Genome, b: &Genome, rng: &mut Rng) -> Genome {
    let lr = if rng.random::<bool>() {
        a.learning_rate
    } else {
        b.learning_rate
    };
    let (ai, bi) = (a.ints(), b.ints());
    Genome::with_ints(
        lr,
        std::array::from_fn(|i| if rng.random::<bool>() { ai[i] } else { bi[i] }),
    )
}

fn mutate(g: &Genome, config: &GaConfig, rng: &mut Rng) -> Genome {
    let b = &config.bounds;
    let mut lr = g.learning_rate;
    if rng.random::<f64>() < config.mutation_rate {
        let (lo, hi) = (b.learning_rate.0.ln(), b.learning_rate.1.ln());
        let z: f64 = StandardNormal.sample(rng);
        lr = (lr.ln() + 0.1 * (hi - lo) * z)
            .clamp(lo, hi)
            .exp()
            .clamp(b.learning_rate.0, b.learning_rate.1);
    }
    let mut ints = g.ints();
    for (v, (lo, hi)) in ints.iter_mut().zip(b.ints()) {
        if rng.random::<f64>() < config.mutation_rate {
            let step = rng.random_range(-2i64..=2);
            *v = (*v as i64 + step).clamp(lo as i64, hi as i64) as usize;
        }
    }
    Genome::with_ints(lr, ints)
}

/// Indices sorted by fitness, ties by position.
fn ranking(fitness: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..fitness.len()).collect();
    order.sort_by(|&a, &b| fitness[a].total_cmp(&fitness[b]).then(a.cmp(&b)));
    order
}

/// Parent index drawn with weight proportional to `n - rank`.
fn pick_parent(order: &[usize], rng: &mut Rng) -> usize {
    let n = order.len();
    let total = n * (n + 1) / 2;
    let mut ticket = rng.random_range(0..total);
    for (rank, &i) in order.iter().enumerate() {
        let w = n - rank;
        if ticket < w {
            return i;
        }
        ticket -= w;
    }
    unreachable!("ticket within total weight")
}

/// Next generation: elites copied unchanged, then children of rank-weighted
/// parents by uniform crossover and per-gene mutation. Returns the new
/// population and the fittest genome of `population`.
pub fn evolve(
    population: &[Genome],
    fitness: &[f64],
    config: &GaConfig,
    model: &ModelConfig,
    rng: &mut Rng,
) -> Result<(Vec<Genome>, Genome)> {
    config.validate()?;
    if population.len() < 2 || fitness.len() != population.len() {
        return Err(Error::config(
            "population",
            format!("{} genomes with {} fitness values", population.len(), fitness.len()),
        ));
    }
    let order = ranking(fitness);
    let mut next: Vec<Genome> = order.iter().take(config.elite_count).map(|&i| population[i]).collect();
    while next.len() < config.population {
        let child = (0..MAX_RESAMPLE)
            .map(|_| {
                let a = &population[pick_parent(&order, rng)];
                let b = &population[pick_parent(&order, rng)];
                mutate(&crossover(a, b, rng), config, rng)
            })
            .find(|g| g.feasible(model))
            .unwrap_or(population[order[0]]);
        next.push(child);
    }
    Ok((next, population[order[0]]))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaRecord {
    pub generation: usize,
    pub index: usize,
    pub genome: Genome,
    pub fitness: f64,
    /// Seed the fitness evaluation trained with.
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaReport {
    pub log: Vec<GaRecord>,
    pub best: Genome,
    pub best_fitness: f64,
    /// Lowest fitness seen up to and including each generation.
    pub trajectory: Vec<f64>,
    /// Distinct genomes that were actually trained.
    pub evaluations: usize,
}

/// Seed of the fitness run for `genome`; depends on nothing else so that
/// evaluation order and memoization cannot change results.
pub fn genome_seed(seed: u64, genome: &Genome) -> u64 {
    derive(seed, genome.key())
}

/// Runs the search with an arbitrary fitness function `(genome, seed)`.
pub fn search<F>(config: &GaConfig, model: &ModelConfig, fitness: F) -> Result<GaReport>
where
    F: Fn(&Genome, u64) -> f64 + Sync,
{
    config.validate()?;
    let mut rng = derived(config.seed, 0);
    let mut population = init_population(config, model, &mut rng)?;
    let mut memo: HashMap<u64, f64> = HashMap::new();
    let mut log = Vec::new();
    let mut trajectory = Vec::with_capacity(config.generations);
    let mut best: Option<(Genome, f64)> = None;

    for generation in 0..config.generations {
        let mut fresh: Vec<Genome> = Vec::new();
        for g in &population {
            if !memo.contains_key(&g.key()) && !fresh.iter().any(|f| f.key() == g.key()) {
                fresh.push(*g);
            }
        }
        let eval = |g: &Genome| {
            if !g.feasible(model) {
                return f64::INFINITY;
            }
            let f = fitness(g, genome_seed(config.seed, g));
            if f.is_nan() {
                f64::INFINITY
            } else {
                f
            }
        };
        let scores: Vec<f64> = if config.parallel {
            fresh.par_iter().map(eval).collect()
        } else {
            fresh.iter().map(eval).collect()
        };
        for (g, s) in fresh.iter().zip(scores) {
            memo.insert(g.key(), s);
        }
        let fit: Vec<f64> = population.iter().map(|g| memo[&g.key()]).collect();
        for (index, (g, &f)) in population.iter().zip(&fit).enumerate() {
            log.push(GaRecord {
                generation,
                index,
                genome: *g,
                fitness: f,
                seed: genome_seed(config.seed, g),
            });
            if best.is_none_or(|(_, b)| f < b) {
                best = Some((*g, f));
            }
        }
        trajectory.push(best.map_or(f64::INFINITY, |(_, f)| f));
        if generation + 1 < config.generations {
            population = evolve(&population, &fit, config, model, &mut rng)?.0;
        }
    }
    let (best, best_fitness) = best.expect("at least one generation");
    Ok(GaReport {
        log,
        best,
        best_fitness,
        trajectory,
        evaluations: memo.len(),
    })
}

/// Fold used for fitness: the first of the CV split for `train.seed`.
pub fn fitness_split(set: &TrialSet, train: &TrainConfig) -> Result<FoldSplit> {
    Ok(stratified_folds(&set.labels, 5, derive(train.seed, 1))?.swap_remove(0))
}

/// Best validation loss of `genome` trained from scratch on `split`, or
/// infinity if the model cannot be built or training fails.
pub fn fitness(
    genome: &Genome,
    set: &TrialSet,
    split: &FoldSplit,
    model: &ModelConfig,
    train: &TrainConfig,
    epochs: usize,
    seed: u64,
) -> f64 {
    let (model, train) = genome.apply(model, train);
    let run = || -> Result<f64> {
        let mut net = AbsoluteNet::<f32>::build(&model, &mut derived(seed, 0))?;
        let out = fit(
            &mut net,
            set,
            &split.train,
            Some(&split.val),
            epochs,
            &train,
            derive(seed, 1),
        )?;
        Ok(out.report.best_val_loss.unwrap_or(f64::INFINITY))
    };
    run().unwrap_or(f64::INFINITY)
}

/// The search with training fitness on `set`.
pub fn run_ga(set: &TrialSet, model: &ModelConfig, train: &TrainConfig, config: &GaConfig) -> Result<GaReport> {
    let split = fitness_split(set, train)?;
    search(config, model, |g, seed| {
        fitness(g, set, &split, model, train, config.fitness_epochs, seed)
    })
}

pub const GA_CSV_HEADER: &str =
    "generation,index,learning_rate,temporal_kernel,separable_kernel,pool_size,pool_stride,fitness,seed";

pub fn ga_csv(report: &GaReport) -> String {
    let mut out = String::from(GA_CSV_HEADER);
    out.push('\n');
    for r in &report.log {
        let g = &r.genome;
        let _ = writeln!(
            out,
            "{},{},{:e},{},{},{},{},{},{}",
            r.generation,
            r.index,
            g.learning_rate,
            g.temporal_kernel,
            g.separable_kernel,
            g.pool_size,
            g.pool_stride,
            r.fitness,
            r.seed
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::rng::seeded;

    fn model() -> ModelConfig {
        ModelConfig::default()
    }

    /// Smooth bowl around the reference hyperparameters.
    fn bowl(g: &Genome, _seed: u64) -> f64 {
        (g.learning_rate.log10() + 3.05).powi(2)
            + (g.temporal_kernel as f64 - 5.0).powi(2)
            + (g.pool_size as f64 - 25.0).abs() / 10.0
            + g.pool_stride as f64 / 100.0
    }

    #[test]
    fn initial_population_within_bounds() {
        let c = GaConfig::default();
        let pop = init_population(&c, &model(), &mut seeded(1)).unwrap();
        assert_eq!(pop.len(), 8);
        assert!(pop.iter().all(|g| c.bounds.contains(g) && g.feasible(&model())));
    }

    #[test]
    fn collapsed_bounds_give_identical_genomes() {
        let c = GaConfig {
            bounds: Bounds {
                learning_rate: (9e-4, 9e-4),
                temporal_kernel: (5, 5),
                separable_kernel: (3, 3),
                pool_size: (25, 25),
                pool_stride: (8, 8),
            },
            ..Default::default()
        };
        let pop = init_population(&c, &model(), &mut seeded(2)).unwrap();
        assert!(pop.iter().all(|g| *g == pop[0]));
        assert_eq!(pop[0].learning_rate, 9e-4);
    }

    #[test]
    fn empty_feasible_region_is_an_error() {
        let c = GaConfig {
            bounds: Bounds {
                pool_size: (200, 300),
                ..Default::default()
            },
            ..Default::default()
        };
        assert!(init_population(&c, &model(), &mut seeded(0)).is_err());
    }

    #[test]
    fn learning_rate_is_log_uniform() {
        // Chi-square over 10 equal bins in log space; 27.88 is the 0.999
        // quantile with 9 degrees of freedom.
        let b = Bounds::default();
        let mut rng = seeded(3);
        let mut bins = [0usize; 10];
        let n = 1000;
        for _ in 0..n {
            let g = sample(&b, &mut rng);
            let u = (g.learning_rate.ln() - 1e-5f64.ln()) / (1e-2f64.ln() - 1e-5f64.ln());
            bins[((u * 10.0) as usize).min(9)] += 1;
        }
        let expected = n as f64 / 10.0;
        let chi2: f64 = bins.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
        assert!(chi2 < 27.88, "chi2 {chi2} bins {bins:?}");
    }

    #[test]
    fn identical_parents_without_mutation_breed_true() {
        let c = GaConfig {
            mutation_rate: 0.0,
            ..Default::default()
        };
        let g = Genome {
            learning_rate: 3e-4,
            temporal_kernel: 7,
            separable_kernel: 5,
            pool_size: 30,
            pool_stride: 4,
        };
        let (next, best) = evolve(&[g; 6], &[1.0; 6], &c, &model(), &mut seeded(0)).unwrap();
        assert!(next.len() == 8 && next.iter().all(|n| *n == g));
        assert_eq!(best, g);
    }

    #[test]
    fn elites_survive_unchanged() {
        let c = GaConfig {
            mutation_rate: 1.0,
            ..Default::default()
        };
        let mut rng = seeded(5);
        let pop = init_population(&c, &model(), &mut rng).unwrap();
        let fit: Vec<f64> = pop.iter().map(|g| bowl(g, 0)).collect();
        let order = ranking(&fit);
        let (next, best) = evolve(&pop, &fit, &c, &model(), &mut rng).unwrap();
        assert_eq!(best, pop[order[0]]);
        assert_eq!(next[0], pop[order[0]]);
        assert_eq!(next[1], pop[order[1]]);
    }

    #[test]
    fn too_small_population_is_rejected() {
        let c = GaConfig {
            population: 1,
            elite_count: 1,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let g = sample(&Bounds::default(), &mut seeded(0));
        assert!(evolve(&[g], &[0.0], &GaConfig::default(), &model(), &mut seeded(0)).is_err());
    }

    #[test]
    fn infeasible_genome_scores_infinity() {
        let g = Genome {
            learning_rate: 1e-3,
            temporal_kernel: 11,
            separable_kernel: 3,
            pool_size: 50,
            pool_stride: 1,
        };
        let short = ModelConfig {
            input_samples: 40,
            ..Default::default()
        };
        assert!(!g.feasible(&short));
        let set = TrialSet::new(
            28,
            40,
            vec![0.0; 28 * 40 * 10],
            (0..10).map(|i| (i % 2) as u8).collect(),
            crate::data::TrialMeta::plain(28, 10.0),
        )
        .unwrap();
        let split = stratified_folds(&set.labels, 5, 0).unwrap().swap_remove(0);
        let f = fitness(&g, &set, &split, &short, &TrainConfig::default(), 1, 0);
        assert_eq!(f, f64::INFINITY);
    }

    #[test]
    fn parallel_and_serial_logs_match() {
        let serial = GaConfig {
            generations: 4,
            seed: 17,
            ..Default::default()
        };
        let parallel = GaConfig {
            parallel: true,
            ..serial.clone()
        };
        let a = search(&serial, &model(), bowl).unwrap();
        let b = search(&parallel, &model(), bowl).unwrap();
        assert_eq!(ga_csv(&a), ga_csv(&b));
        assert_eq!(ga_csv(&a).lines().next().unwrap(), GA_CSV_HEADER);
        assert_eq!(ga_csv(&a).lines().count(), 1 + 4 * 8);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn search_invariants(seed in any::<u64>(), rate in 0.0f64..=1.0) {
            let c = GaConfig { generations: 4, mutation_rate: rate, seed, ..Default::default() };
            let r = search(&c, &model(), bowl).unwrap();
            prop_assert!(r.log.iter().all(|rec| c.bounds.contains(&rec.genome) && rec.genome.feasible(&model())));
            prop_assert!(r.trajectory.windows(2).all(|w| w[1] <= w[0]));
            // Per-generation minimum is monotone too, because elites carry over.
            let per_gen: Vec<f64> = (0..4)
                .map(|g| r.log.iter().filter(|x| x.generation == g).map(|x| x.fitness).fold(f64::INFINITY, f64::min))
                .collect();
            prop_assert!(per_gen.windows(2).all(|w| w[1] <= w[0]));
            prop_assert_eq!(r.best_fitness, *r.trajectory.last().unwrap());
        }
    }
}
