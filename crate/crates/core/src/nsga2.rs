//! NSGA-II over genome encodings.
//!
//! Genes are choice indices. Variation treats each gene as a real number on
//! `[-0.5, arity - 0.5]`, applies SBX / polynomial mutation, then rounds to
//! the nearest index and clamps.

use std::cmp::Ordering;
use std::collections::HashSet;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::archspace::{sample_random, ArchGenome, ArchPhenotype, SearchSpaceSpec};
use crate::error::{NasError, Result};
use crate::rng;
use crate::tasks::{EvalResult, Evaluator};

/// Model size (minimized) and accuracy (maximized).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveVector {
    pub size_bytes: f64,
    pub accuracy: f64,
}

impl ObjectiveVector {
    pub fn new(size_bytes: f64, accuracy: f64) -> Self {
        Self {
            size_bytes,
            accuracy,
        }
    }

    /// Minimization form `(size, -accuracy)`.
    pub fn canonical(&self) -> [f64; 2] {
        [self.size_bytes, -self.accuracy]
    }

    pub fn is_finite(&self) -> bool {
        self.size_bytes.is_finite() && self.accuracy.is_finite()
    }

    pub fn dominates(&self, other: &Self) -> bool {
        let (a, b) = (self.canonical(), other.canonical());
        a[0] <= b[0] && a[1] <= b[1] && (a[0] < b[0] || a[1] < b[1])
    }
}

impl From<&EvalResult> for ObjectiveVector {
    fn from(r: &EvalResult) -> Self {
        Self::new(r.size_bytes as f64, r.accuracy)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GAConfig {
    pub pop_size: usize,
    pub p_crossover: f64,
    pub eta_crossover: f64,
    /// Per gene.
    pub p_mutation: f64,
    pub eta_mutation: f64,
    pub generations: usize,
    pub seed: u64,
}

impl Default for GAConfig {
    fn default() -> Self {
        Self {
            pop_size: 50,
            p_crossover: 0.9,
            eta_crossover: 15.0,
            p_mutation: 0.02,
            eta_mutation: 20.0,
            generations: 50,
            seed: 0,
        }
    }
}

impl GAConfig {
    pub fn validate(&self) -> Result<()> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if !prob(self.p_crossover) || !prob(self.p_mutation) {
            return Err(NasError::InvalidInput("probabilities must lie in [0, 1]".into()));
        }
        if !(self.eta_crossover > 0.0 && self.eta_mutation > 0.0) {
            return Err(NasError::InvalidInput("eta values must be positive".into()));
        }
        if self.pop_size < 2 || self.pop_size % 2 != 0 {
            return Err(NasError::InvalidInput(format!(
                "pop_size must be even and >= 2, got {}",
                self.pop_size
            )));
        }
        Ok(())
    }
}

fn check_finite(objs: &[ObjectiveVector]) -> Result<()> {
    match objs.iter().position(|o| !o.is_finite()) {
        Some(i) => Err(NasError::NonFinite(format!("objective vector {i}: {:?}", objs[i]))),
        None => Ok(()),
    }
}

/// Fast non-dominated sort. Fronts list indices in ascending order.
pub fn non_dominated_sort(objs: &[ObjectiveVector]) -> Result<Vec<Vec<usize>>> {
    if objs.is_empty() {
        return Err(NasError::InvalidInput("cannot sort an empty population".into()));
    }
    check_finite(objs)?;
    let n = objs.len();
    let mut dominated_by_me: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut count = vec![0usize; n];
    for i in 0..n {
        for j in i + 1..n {
            if objs[i].dominates(&objs[j]) {
                dominated_by_me[i].push(j);
                count[j] += 1;
            } else if objs[j].dominates(&objs[i]) {
                dominated_by_me[j].push(i);
                count[i] += 1;
            }
        }
    }
    let mut fronts = Vec::new();
    let mut current: Vec<usize> = (0..n).filter(|&i| count[i] == 0).collect();
    while !current.is_empty() {
        let mut next = Vec::new();
        for &i in &current {
            for &j in &dominated_by_me[i] {
                count[j] -= 1;
                if count[j] == 0 {
                    next.push(j);
                }
            }
        }
        next.sort_unstable();
        fronts.push(std::mem::replace(&mut current, next));
    }
    Ok(fronts)
}

/// Rank (front number) of every point.
pub fn ranks(fronts: &[Vec<usize>], n: usize) -> Vec<usize> {
    let mut r = vec![0; n];
    for (k, f) in fronts.iter().enumerate() {
        for &i in f {
            r[i] = k;
        }
    }
    r
}

/// Crowding distance of each point of one front, using the canonical
/// objectives normalized by their range within the front.
pub fn crowding_distance(objs: &[ObjectiveVector]) -> Vec<f64> {
    let n = objs.len();
    if n <= 2 {
        return vec![f64::INFINITY; n];
    }
    let canon: Vec<[f64; 2]> = objs.iter().map(|o| o.canonical()).collect();
    let mut dist = vec![0.0; n];
    for m in 0..2 {
        let mut order: Vec<usize> = (0..n).collect();
        // full-vector tie-break keeps the result independent of input order
        order.sort_by(|&a, &b| {
            canon[a][m]
                .total_cmp(&canon[b][m])
                .then(canon[a][1 - m].total_cmp(&canon[b][1 - m]))
        });
        let lo = canon[order[0]][m];
        let hi = canon[order[n - 1]][m];
        dist[order[0]] = f64::INFINITY;
        dist[order[n - 1]] = f64::INFINITY;
        if hi == lo {
            continue;
        }
        for w in order.windows(3) {
            dist[w[1]] += (canon[w[2]][m] - canon[w[0]][m]) / (hi - lo);
        }
    }
    dist
}

/// Crowding distance of every point, computed front by front.
pub fn crowding_all(objs: &[ObjectiveVector], fronts: &[Vec<usize>]) -> Vec<f64> {
    let mut out = vec![0.0; objs.len()];
    for f in fronts {
        let sub: Vec<ObjectiveVector> = f.iter().map(|&i| objs[i]).collect();
        for (&i, d) in f.iter().zip(crowding_distance(&sub)) {
            out[i] = d;
        }
    }
    out
}

/// Orders two candidates by (rank asc, crowding desc, index asc).
pub fn crowded_compare(a: usize, b: usize, rank: &[usize], crowd: &[f64]) -> Ordering {
    rank[a]
        .cmp(&rank[b])
        .then(crowd[b].total_cmp(&crowd[a]))
        .then(a.cmp(&b))
}

/// Size-2 tournament with replacement.
pub fn binary_tournament<R: Rng + ?Sized>(rank: &[usize], crowd: &[f64], rng: &mut R) -> usize {
    let a = rng.random_range(0..rank.len());
    let b = rng.random_range(0..rank.len());
    match crowded_compare(a, b, rank, crowd) {
        Ordering::Greater => b,
        _ => a,
    }
}

fn bounds(space: &SearchSpaceSpec, gene: usize) -> (f64, f64) {
    (-0.5, space.gene_arity(gene) as f64 - 0.5)
}

fn to_index(x: f64, arity: usize) -> usize {
    // f64::round rounds half away from zero
    x.round().clamp(0.0, (arity - 1) as f64) as usize
}

fn sbx_pair<R: Rng + ?Sized>(y1: f64, y2: f64, lo: f64, hi: f64, eta: f64, rng: &mut R) -> (f64, f64) {
    let (a, b) = if y1 <= y2 { (y1, y2) } else { (y2, y1) };
    let u: f64 = rng.random();
    let spread = |beta: f64| {
        let alpha = 2.0 - beta.powf(-(eta + 1.0));
        if u <= 1.0 / alpha {
            (u * alpha).powf(1.0 / (eta + 1.0))
        } else {
            (1.0 / (2.0 - u * alpha)).powf(1.0 / (eta + 1.0))
        }
    };
    let bq = spread(1.0 + 2.0 * (a - lo) / (b - a));
    let c1 = 0.5 * ((a + b) - bq * (b - a));
    let bq = spread(1.0 + 2.0 * (hi - b) / (b - a));
    let c2 = 0.5 * ((a + b) + bq * (b - a));
    (c1.clamp(lo, hi), c2.clamp(lo, hi))
}

/// Bounded SBX on the index encoding. With probability `p_crossover` each
/// gene is recombined with probability 0.5 (children swapped with
/// probability 0.5); otherwise the children are copies of the parents.
pub fn sbx_crossover<R: Rng + ?Sized>(
    a: &ArchGenome,
    b: &ArchGenome,
    space: &SearchSpaceSpec,
    cfg: &GAConfig,
    rng: &mut R,
) -> Result<(ArchGenome, ArchGenome)> {
    let ea = a.encode(space)?;
    let eb = b.encode(space)?;
    if !rng.random_bool(cfg.p_crossover) {
        return Ok((a.clone(), b.clone()));
    }
    let mut ca = ea.clone();
    let mut cb = eb.clone();
    for g in 0..ea.len() {
        if !rng.random_bool(0.5) || ea[g] == eb[g] {
            continue;
        }
        let (lo, hi) = bounds(space, g);
        let (mut c1, mut c2) = sbx_pair(ea[g] as f64, eb[g] as f64, lo, hi, cfg.eta_crossover, rng);
        if rng.random_bool(0.5) {
            std::mem::swap(&mut c1, &mut c2);
        }
        let arity = space.gene_arity(g);
        ca[g] = to_index(c1, arity);
        cb[g] = to_index(c2, arity);
    }
    Ok((ArchGenome::decode(&ca, space)?, ArchGenome::decode(&cb, space)?))
}

/// Polynomial mutation applied independently to each gene with probability
/// `p_mutation`. Also returns how many genes were selected for mutation
/// (a selected gene may round back to its old value).
pub fn polynomial_mutation_counted<R: Rng + ?Sized>(
    genome: &ArchGenome,
    space: &SearchSpaceSpec,
    cfg: &GAConfig,
    rng: &mut R,
) -> Result<(ArchGenome, usize)> {
    let mut e = genome.encode(space)?;
    let mut selected = 0;
    let pow = 1.0 / (cfg.eta_mutation + 1.0);
    for (g, gene) in e.iter_mut().enumerate() {
        if !rng.random_bool(cfg.p_mutation) {
            continue;
        }
        selected += 1;
        let (lo, hi) = bounds(space, g);
        let y = *gene as f64;
        let d1 = (y - lo) / (hi - lo);
        let d2 = (hi - y) / (hi - lo);
        let u: f64 = rng.random();
        let dq = if u < 0.5 {
            let v = 2.0 * u + (1.0 - 2.0 * u) * (1.0 - d1).powf(cfg.eta_mutation + 1.0);
            v.powf(pow) - 1.0
        } else {
            let v = 2.0 * (1.0 - u) + 2.0 * (u - 0.5) * (1.0 - d2).powf(cfg.eta_mutation + 1.0);
            1.0 - v.powf(pow)
        };
        *gene = to_index((y + dq * (hi - lo)).clamp(lo, hi), space.gene_arity(g));
    }
    Ok((ArchGenome::decode(&e, space)?, selected))
}

pub fn polynomial_mutation<R: Rng + ?Sized>(
    genome: &ArchGenome,
    space: &SearchSpaceSpec,
    cfg: &GAConfig,
    rng: &mut R,
) -> Result<ArchGenome> {
    polynomial_mutation_counted(genome, space, cfg, rng).map(|(g, _)| g)
}

/// Indices of the `n` survivors of `objs`: whole fronts in rank order, the
/// last one cut by descending crowding distance (ties to lower index).
pub fn environmental_selection(objs: &[ObjectiveVector], n: usize) -> Result<Vec<usize>> {
    let fronts = non_dominated_sort(objs)?;
    let mut out = Vec::with_capacity(n);
    for f in &fronts {
        if out.len() + f.len() <= n {
            out.extend_from_slice(f);
            continue;
        }
        let sub: Vec<ObjectiveVector> = f.iter().map(|&i| objs[i]).collect();
        let crowd = crowding_distance(&sub);
        let mut order: Vec<usize> = (0..f.len()).collect();
        order.sort_by(|&a, &b| crowd[b].total_cmp(&crowd[a]).then(f[a].cmp(&f[b])));
        out.extend(order.iter().take(n - out.len()).map(|&k| f[k]));
        break;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Individual {
    pub genome: ArchGenome,
    pub objectives: ObjectiveVector,
}

#[derive(Debug, Clone)]
pub struct GAOutcome {
    /// Evaluated random initial population.
    pub initial: Vec<Individual>,
    /// Survivors after the last generation.
    pub population: Vec<Individual>,
    /// Number of objective evaluations performed.
    pub evaluations: usize,
}

/// Makes up to `pop_size` offspring from a ranked population. Offspring whose
/// phenotype already occurs among the parents or earlier offspring are
/// discarded, so the population cannot collapse onto copies of one
/// architecture. Gives up after `MAX_MATINGS_PER_SLOT * pop_size` matings,
/// which only matters when the space is nearly exhausted.
fn make_offspring(
    pop: &[Individual],
    space: &SearchSpaceSpec,
    cfg: &GAConfig,
    rngs: &mut Streams,
) -> Result<Vec<ArchGenome>> {
    let objs: Vec<ObjectiveVector> = pop.iter().map(|p| p.objectives).collect();
    let fronts = non_dominated_sort(&objs)?;
    let rank = ranks(&fronts, pop.len());
    let crowd = crowding_all(&objs, &fronts);
    let mut seen: HashSet<ArchPhenotype> = pop
        .iter()
        .map(|p| p.genome.phenotype(space))
        .collect::<Result<_>>()?;
    let mut children = Vec::with_capacity(cfg.pop_size);
    for _ in 0..MAX_MATINGS_PER_SLOT * cfg.pop_size {
        if children.len() >= cfg.pop_size {
            break;
        }
        let a = binary_tournament(&rank, &crowd, &mut rngs.tournament);
        let b = binary_tournament(&rank, &crowd, &mut rngs.tournament);
        let (c1, c2) = sbx_crossover(&pop[a].genome, &pop[b].genome, space, cfg, &mut rngs.sbx)?;
        for c in [c1, c2] {
            let child = polynomial_mutation(&c, space, cfg, &mut rngs.mutation)?;
            if children.len() < cfg.pop_size && seen.insert(child.phenotype(space)?) {
                children.push(child);
            }
        }
    }
    Ok(children)
}

const MAX_MATINGS_PER_SLOT: usize = 100;

/// `n` random genomes, distinct by phenotype while the space allows it.
fn initial_genomes(space: &SearchSpaceSpec, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<ArchGenome>> {
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0;
    while out.len() < n {
        let g = sample_random(space, rng);
        attempts += 1;
        if seen.insert(g.phenotype(space)?) || attempts > MAX_MATINGS_PER_SLOT * n {
            out.push(g);
        }
    }
    Ok(out)
}

struct Streams {
    init: ChaCha8Rng,
    tournament: ChaCha8Rng,
    sbx: ChaCha8Rng,
    mutation: ChaCha8Rng,
}

impl Streams {
    fn new(seed: u64) -> Self {
        Self {
            init: rng::stream(seed, "init"),
            tournament: rng::stream(seed, "tournament"),
            sbx: rng::stream(seed, "sbx"),
            mutation: rng::stream(seed, "mutation"),
        }
    }
}

/// Generational NSGA-II driven by an arbitrary batch objective function.
/// `objective` receives the generation number (0 = initial population) and
/// must return one vector per genome, in order.
pub fn nsga2_with<F>(space: &SearchSpaceSpec, cfg: &GAConfig, mut objective: F) -> Result<GAOutcome>
where
    F: FnMut(usize, &[ArchGenome]) -> Result<Vec<ObjectiveVector>>,
{
    cfg.validate()?;
    space.validate()?;
    let mut rngs = Streams::new(cfg.seed);
    let mut evaluate = |generation: usize, genomes: Vec<ArchGenome>| -> Result<Vec<Individual>> {
        let objs = objective(generation, &genomes)?;
        if objs.len() != genomes.len() {
            return Err(NasError::InvalidInput(format!(
                "objective returned {} vectors for {} genomes",
                objs.len(),
                genomes.len()
            )));
        }
        check_finite(&objs).map_err(|e| NasError::Evaluation {
            generation,
            source: Box::new(e),
        })?;
        Ok(genomes
            .into_iter()
            .zip(objs)
            .map(|(genome, objectives)| Individual { genome, objectives })
            .collect())
    };

    let init = initial_genomes(space, cfg.pop_size, &mut rngs.init)?;
    let initial = evaluate(0, init)?;
    let mut evaluations = initial.len();
    let mut pop = initial.clone();
    for generation in 1..=cfg.generations {
        let children = make_offspring(&pop, space, cfg, &mut rngs)?;
        if children.is_empty() {
            continue;
        }
        evaluations += children.len();
        pop.extend(evaluate(generation, children)?);
        let objs: Vec<ObjectiveVector> = pop.iter().map(|p| p.objectives).collect();
        let keep = environmental_selection(&objs, cfg.pop_size)?;
        pop = keep.into_iter().map(|i| pop[i].clone()).collect();
    }
    Ok(GAOutcome {
        initial,
        population: pop,
        evaluations,
    })
}

/// NSGA-II with real measurements. Genomes of a generation are measured in
/// parallel and joined in population order.
pub fn nsga2_run<E: Evaluator + ?Sized>(
    space: &SearchSpaceSpec,
    evaluator: &E,
    cfg: &GAConfig,
) -> Result<GAOutcome> {
    nsga2_with(space, cfg, |generation, genomes| {
        genomes
            .par_iter()
            .map(|g| evaluator.measure(g).map(|r| ObjectiveVector::from(&r)))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| NasError::Evaluation {
                generation,
                source: Box::new(e),
            })
    })
}
