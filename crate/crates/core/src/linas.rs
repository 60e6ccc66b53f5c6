//! Predictor-guided search: rounds of real measurements alternating with an
//! inner NSGA-II over (analytic size, predicted accuracy), plus a uniform
//! random-search baseline. Budgets count unique phenotypes.

use std::collections::HashSet;
use std::time::{SystemTime, UNIX_EPOCH};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{hypervolume_2d, hv_reference, pareto_front};
use crate::archspace::{genome_fp16_bytes, sample_random, ArchGenome, ArchPhenotype, SearchSpaceSpec};
use crate::error::{NasError, Result};
use crate::nsga2::{
    crowding_all, non_dominated_sort, nsga2_with, ranks, GAConfig, Individual, ObjectiveVector,
};
use crate::predictor::{featurize, fit, RidgeModel};
use crate::rng;
use crate::tasks::Evaluator;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    /// Real evaluations (unique phenotypes).
    pub budget: usize,
    pub pop_size: usize,
    pub inner_generations: usize,
    pub ga: GAConfig,
    pub seed: u64,
    /// Ridge penalty of the accuracy predictor.
    pub lambda: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            budget: 250,
            pop_size: 50,
            inner_generations: 100,
            ga: GAConfig::default(),
            seed: 0,
            lambda: crate::predictor::DEFAULT_LAMBDA,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pop_size == 0 || self.budget < self.pop_size {
            return Err(NasError::InvalidInput(format!(
                "budget {} must be >= pop_size {} >= 1",
                self.budget, self.pop_size
            )));
        }
        if self.inner_generations == 0 {
            return Err(NasError::InvalidInput("inner_generations must be >= 1".into()));
        }
        self.ga.validate()
    }
}

/// Genome text (`L:s1,...`) in serialized records.
mod genome_text {
    use super::ArchGenome;
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(g: &ArchGenome, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(g)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<ArchGenome, D::Error> {
        String::deserialize(d)?.parse().map_err(D::Error::custom)
    }
}

/// One evaluated architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalRecord {
    #[serde(with = "genome_text")]
    pub genome: ArchGenome,
    pub size_bytes: u64,
    pub accuracy: f64,
    /// False for predictor outputs, which never enter a reported front.
    pub measured: bool,
    pub round: usize,
    /// Position in the history.
    pub index: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub throughput_tok_per_s: Option<f64>,
    /// Wall-clock milliseconds since the Unix epoch; excluded from
    /// reproducibility comparisons.
    #[serde(default)]
    pub timestamp_ms: u64,
}

impl EvalRecord {
    pub fn objectives(&self) -> ObjectiveVector {
        ObjectiveVector::new(self.size_bytes as f64, self.accuracy)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SearchHistory {
    pub id: String,
    pub records: Vec<EvalRecord>,
}

impl SearchHistory {
    pub fn new(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            records: Vec::new(),
        }
    }

    pub fn measured(&self) -> impl Iterator<Item = &EvalRecord> {
        self.records.iter().filter(|r| r.measured)
    }
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Number of distinct phenotypes, saturating at `u64::MAX`.
pub fn phenotype_count(space: &SearchSpaceSpec) -> u64 {
    let k = space.inter_choices.len() as u64;
    space
        .layer_choices
        .iter()
        .map(|&l| k.checked_pow(l as u32).unwrap_or(u64::MAX))
        .fold(0u64, |a, b| a.saturating_add(b))
}

/// Budget bookkeeping shared by all search methods.
struct Tracker<'a, E: ?Sized> {
    space: &'a SearchSpaceSpec,
    evaluator: &'a E,
    seen: HashSet<ArchPhenotype>,
    history: SearchHistory,
    limit: usize,
}

impl<'a, E: Evaluator + ?Sized> Tracker<'a, E> {
    fn new(space: &'a SearchSpaceSpec, evaluator: &'a E, budget: usize, id: String) -> Self {
        let available = phenotype_count(space);
        if (budget as u64) > available {
            log::warn!("budget {budget} exceeds the {available} distinct phenotypes; search will stop early");
        }
        Self {
            space,
            evaluator,
            seen: HashSet::new(),
            history: SearchHistory::new(id),
            limit: budget.min(usize::try_from(available).unwrap_or(usize::MAX)),
        }
    }

    fn remaining(&self) -> usize {
        self.limit - self.seen.len()
    }

    fn is_new(&self, g: &ArchGenome) -> Result<bool> {
        Ok(!self.seen.contains(&g.phenotype(self.space)?))
    }

    /// Uniform random genomes with unseen phenotypes, distinct from `taken`.
    fn random_fill<R: Rng>(&self, taken: &mut Vec<ArchGenome>, n: usize, rng: &mut R) -> Result<()> {
        let mut batch: HashSet<ArchPhenotype> = taken
            .iter()
            .map(|g| g.phenotype(self.space))
            .collect::<Result<_>>()?;
        while taken.len() < n {
            let g = sample_random(self.space, rng);
            let p = g.phenotype(self.space)?;
            if !self.seen.contains(&p) && batch.insert(p) {
                taken.push(g);
            }
        }
        Ok(())
    }

    /// Measures a batch in parallel and appends it in input order.
    fn measure(&mut self, genomes: Vec<ArchGenome>, round: usize) -> Result<()> {
        let results = genomes
            .par_iter()
            .map(|g| self.evaluator.measure(g))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| NasError::Evaluation {
                generation: round,
                source: Box::new(e),
            })?;
        for r in results {
            let p = r.genome.phenotype(self.space)?;
            if !self.seen.insert(p) {
                return Err(NasError::InvalidInput(format!("phenotype of {} measured twice", r.genome)));
            }
            let index = self.history.records.len();
            self.history.records.push(EvalRecord {
                genome: r.genome,
                size_bytes: r.size_bytes,
                accuracy: r.accuracy,
                measured: r.measured,
                round,
                index,
                seed: r.seed,
                throughput_tok_per_s: r.throughput_tok_per_s,
                timestamp_ms: now_ms(),
            });
        }
        Ok(())
    }

    fn log_round(&self, round: usize) -> Result<()> {
        let front = pareto_front(&self.history)?;
        let hv = hypervolume_2d(&front.points, hv_reference(&self.history)?)?;
        log::info!("round={round} measured={} hv={hv}", self.seen.len());
        Ok(())
    }
}

/// Picks up to `n` genomes with phenotypes outside `measured`, unique by
/// phenotype, in (rank, crowding desc, genome text) order over the inner
/// population. The shortfall is filled with random unmeasured genomes.
pub fn select_next_batch<R: Rng>(
    inner: &[Individual],
    measured: &HashSet<ArchPhenotype>,
    n: usize,
    space: &SearchSpaceSpec,
    rng: &mut R,
) -> Result<Vec<ArchGenome>> {
    let mut out = Vec::with_capacity(n);
    let mut taken = HashSet::new();
    if !inner.is_empty() {
        let objs: Vec<ObjectiveVector> = inner.iter().map(|i| i.objectives).collect();
        let fronts = non_dominated_sort(&objs)?;
        let rank = ranks(&fronts, objs.len());
        let crowd = crowding_all(&objs, &fronts);
        let text: Vec<String> = inner.iter().map(|i| i.genome.to_string()).collect();
        let mut order: Vec<usize> = (0..inner.len()).collect();
        order.sort_by(|&a, &b| {
            rank[a]
                .cmp(&rank[b])
                .then(crowd[b].total_cmp(&crowd[a]))
                .then(text[a].cmp(&text[b]))
        });
        for i in order {
            if out.len() == n {
                break;
            }
            let p = inner[i].genome.phenotype(space)?;
            if !measured.contains(&p) && taken.insert(p) {
                out.push(inner[i].genome.clone());
            }
        }
    }
    let available = phenotype_count(space).saturating_sub(measured.len() as u64);
    let n = n.min(usize::try_from(available).unwrap_or(usize::MAX));
    while out.len() < n {
        let g = sample_random(space, rng);
        let p = g.phenotype(space)?;
        if !measured.contains(&p) && taken.insert(p) {
            out.push(g);
        }
    }
    Ok(out)
}

fn predictor_objectives(
    model: &RidgeModel,
    space: &SearchSpaceSpec,
    genomes: &[ArchGenome],
) -> Result<Vec<ObjectiveVector>> {
    genomes
        .iter()
        .map(|g| {
            let x = featurize(g, space)?;
            Ok(ObjectiveVector::new(
                genome_fp16_bytes(g, space)? as f64,
                model.predict_features(&x),
            ))
        })
        .collect()
}

/// LINAS outer loop.
pub fn linas_run<E: Evaluator + ?Sized>(
    space: &SearchSpaceSpec,
    evaluator: &E,
    cfg: &SearchConfig,
) -> Result<SearchHistory> {
    cfg.validate()?;
    space.validate()?;
    let id = format!("linas(seed={}, evaluator={})", cfg.seed, evaluator.id());
    let mut t = Tracker::new(space, evaluator, cfg.budget, id);
    let mut init_rng = rng::stream(cfg.seed, "round0");
    let mut topup_rng = rng::stream(cfg.seed, "topup");

    let mut first = Vec::new();
    t.random_fill(&mut first, cfg.pop_size.min(t.remaining()), &mut init_rng)?;
    t.measure(first, 0)?;
    t.log_round(0)?;

    let mut round = 0;
    while t.remaining() > 0 {
        round += 1;
        let data: Vec<(Vec<f64>, f64)> = t
            .history
            .measured()
            .map(|r| Ok((featurize(&r.genome, space)?, r.accuracy)))
            .collect::<Result<_>>()?;
        let model = fit(&data, cfg.lambda)?;
        let ga = GAConfig {
            generations: cfg.inner_generations,
            seed: rng::substream_seed(cfg.seed, &format!("inner{round}")),
            ..cfg.ga.clone()
        };
        let inner = nsga2_with(space, &ga, |_, gs| predictor_objectives(&model, space, gs))?;
        let n = cfg.pop_size.min(t.remaining());
        let batch = select_next_batch(&inner.population, &t.seen, n, space, &mut topup_rng)?;
        t.measure(batch, round)?;
        t.log_round(round)?;
    }
    Ok(t.history)
}

/// Uniform random search over unique phenotypes.
pub fn random_search<E: Evaluator + ?Sized>(
    space: &SearchSpaceSpec,
    evaluator: &E,
    budget: usize,
    seed: u64,
) -> Result<SearchHistory> {
    if budget == 0 {
        return Err(NasError::InvalidInput("budget must be >= 1".into()));
    }
    space.validate()?;
    let id = format!("random(seed={seed}, evaluator={})", evaluator.id());
    let mut t = Tracker::new(space, evaluator, budget, id);
    let mut rng = rng::stream(seed, "random");
    let mut batch = Vec::new();
    t.random_fill(&mut batch, t.remaining(), &mut rng)?;
    t.measure(batch, 0)?;
    t.log_round(0)?;
    Ok(t.history)
}

/// Standalone NSGA-II with real measurements. Every new phenotype costs one
/// unit of budget; once the budget is spent, unseen phenotypes are skipped
/// by giving them the worst possible objectives. Rounds are generations.
pub fn nsga2_search<E: Evaluator + ?Sized>(
    space: &SearchSpaceSpec,
    evaluator: &E,
    ga: &GAConfig,
    budget: usize,
) -> Result<SearchHistory> {
    if budget == 0 {
        return Err(NasError::InvalidInput("budget must be >= 1".into()));
    }
    let id = format!("nsga2(seed={}, evaluator={})", ga.seed, evaluator.id());
    let mut t = Tracker::new(space, evaluator, budget, id);
    let mut last_round = 0;
    nsga2_with(space, ga, |generation, genomes| {
        let mut fresh = Vec::new();
        let mut batch_seen = HashSet::new();
        for g in genomes {
            let p = g.phenotype(space)?;
            if fresh.len() < t.remaining() && t.is_new(g)? && batch_seen.insert(p) {
                fresh.push(g.clone());
            }
        }
        if !fresh.is_empty() {
            t.measure(fresh, generation)?;
            t.log_round(generation)?;
            last_round = generation;
        }
        let worst = ObjectiveVector::new(f64::MAX, f64::MIN);
        genomes
            .iter()
            .map(|g| {
                let p = g.phenotype(space)?;
                Ok(t
                    .history
                    .records
                    .iter()
                    .find(|r| r.genome.phenotype(space).map(|q| q == p).unwrap_or(false))
                    .map(EvalRecord::objectives)
                    .unwrap_or(worst))
            })
            .collect()
    })?;
    log::debug!("nsga2 search finished after generation {last_round}");
    Ok(t.history)
}
