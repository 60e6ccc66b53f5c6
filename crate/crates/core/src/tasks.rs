//! Desk-scale evaluation: a synthetic copy-task corpus, multiple-choice
//! scoring, throughput timing, and a closed-form surrogate evaluator for
//! exercising the search stack without a trained model.

use std::collections::HashMap;
use std::sync::Mutex;
use std::time::Instant;

use ndarray::{Array2, Array3, ArrayView2};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::archspace::{
    genome_fp16_bytes, model_bytes, ArchGenome, ArchPhenotype, PrecisionPolicy, SearchSpaceSpec,
};
use crate::elastic_net::{forward, SupernetWeights};
use crate::error::{NasError, Result};
use crate::predictor::featurize;
use crate::rng::{self, SplitMix64};

/// Payload symbols are `0..PAYLOAD_SYMBOLS`.
pub const PAYLOAD_SYMBOLS: u32 = 200;
pub const BOS: u32 = 200;
pub const SEP: u32 = 201;
pub const MIN_PAYLOAD: usize = 8;
pub const MAX_PAYLOAD: usize = 24;
pub const NUM_OPTIONS: usize = 4;

/// Token stream of copy records `BOS p_1..p_m SEP p_1..p_m`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub tokens: Vec<u32>,
    /// Offsets of every BOS token, ascending.
    pub record_starts: Vec<usize>,
}

fn random_payload<R: Rng>(rng: &mut R) -> Vec<u32> {
    let m = rng.random_range(MIN_PAYLOAD..=MAX_PAYLOAD);
    (0..m).map(|_| rng.random_range(0..PAYLOAD_SYMBOLS)).collect()
}

/// Generates exactly `n_tokens` tokens of copy records (the last record may
/// be cut short).
pub fn gen_corpus(seed: u64, n_tokens: usize) -> Result<Corpus> {
    if n_tokens < 2 {
        return Err(NasError::InvalidInput("corpus needs at least 2 tokens".into()));
    }
    let mut rng = rng::stream(seed, "corpus");
    let mut tokens = Vec::with_capacity(n_tokens + 2 * MAX_PAYLOAD + 2);
    let mut record_starts = Vec::new();
    while tokens.len() < n_tokens {
        record_starts.push(tokens.len());
        let payload = random_payload(&mut rng);
        tokens.push(BOS);
        tokens.extend_from_slice(&payload);
        tokens.push(SEP);
        tokens.extend_from_slice(&payload);
    }
    tokens.truncate(n_tokens);
    Ok(Corpus {
        tokens,
        record_starts,
    })
}

/// A multiple-choice item: the correct option copies the prompt payload.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MCItem {
    pub prompt: Vec<u32>,
    pub options: Vec<Vec<u32>>,
    pub correct: usize,
}

/// Distractors for one item. All of them corrupt the same 2 to 4 positions,
/// and every option holds a different symbol at each of those positions, so
/// a scorer that ignores the prompt sees the options as exchangeable.
fn distractors<R: Rng>(payload: &[u32], rng: &mut R) -> Vec<Vec<u32>> {
    let count = rng.random_range(2..=4).min(payload.len());
    let mut positions: Vec<usize> = (0..payload.len()).collect();
    positions.shuffle(rng);
    let mut out = vec![payload.to_vec(); NUM_OPTIONS - 1];
    for &p in &positions[..count] {
        let shifts = rand::seq::index::sample(rng, PAYLOAD_SYMBOLS as usize - 1, NUM_OPTIONS - 1);
        for (d, shift) in out.iter_mut().zip(shifts) {
            d[p] = (payload[p] + shift as u32 + 1) % PAYLOAD_SYMBOLS;
        }
    }
    out
}

/// `n_items` items with four pairwise-distinct options; the three distractors
/// differ from the payload in the same 2 to 4 positions.
pub fn gen_mc_suite(seed: u64, n_items: usize) -> Result<Vec<MCItem>> {
    if n_items == 0 {
        return Err(NasError::InvalidInput("suite needs at least one item".into()));
    }
    let mut rng = rng::stream(seed, "mc-suite");
    let mut items = Vec::with_capacity(n_items);
    for _ in 0..n_items {
        let payload = random_payload(&mut rng);
        let mut prompt = Vec::with_capacity(payload.len() + 2);
        prompt.push(BOS);
        prompt.extend_from_slice(&payload);
        prompt.push(SEP);

        let mut options = vec![payload.clone()];
        options.extend(distractors(&payload, &mut rng));
        let correct = rng.random_range(0..NUM_OPTIONS);
        options.swap(0, correct);
        items.push(MCItem {
            prompt,
            options,
            correct,
        });
    }
    Ok(items)
}

/// Anything that maps a token batch to logits.
pub trait LanguageModel: Sync {
    /// `[batch, seq, vocab]`
    fn logits(&self, tokens: ArrayView2<u32>) -> Result<Array3<f32>>;
}

/// A supernet restricted to one phenotype.
pub struct SlicedModel<'a> {
    pub weights: &'a SupernetWeights<f32>,
    pub phenotype: &'a ArchPhenotype,
}

impl LanguageModel for SlicedModel<'_> {
    fn logits(&self, tokens: ArrayView2<u32>) -> Result<Array3<f32>> {
        Ok(forward(self.weights, self.phenotype, tokens)?.logits)
    }
}

const ITEMS_PER_BATCH: usize = 64;

/// Mean per-token log-likelihood of each option given the prompt, per item.
pub fn option_scores<M: LanguageModel + ?Sized>(model: &M, suite: &[MCItem]) -> Result<Vec<Vec<f64>>> {
    let mut scores = Vec::with_capacity(suite.len());
    for chunk in suite.chunks(ITEMS_PER_BATCH) {
        let seqs: Vec<(usize, Vec<u32>)> = chunk
            .iter()
            .flat_map(|item| {
                item.options.iter().map(|opt| {
                    let mut s = item.prompt.clone();
                    s.extend_from_slice(opt);
                    (item.prompt.len(), s)
                })
            })
            .collect();
        let width = seqs.iter().map(|(_, s)| s.len()).max().unwrap();
        // right padding never influences earlier positions under causal masking
        let mut batch = Array2::<u32>::zeros((seqs.len(), width));
        for (mut row, (_, s)) in batch.rows_mut().into_iter().zip(&seqs) {
            for (dst, &t) in row.iter_mut().zip(s) {
                *dst = t;
            }
        }
        let logits = model.logits(batch.view())?;
        let mut per_seq = Vec::with_capacity(seqs.len());
        for (r, (plen, s)) in seqs.iter().enumerate() {
            let mut total = 0.0f64;
            for pos in *plen..s.len() {
                let row = logits.slice(ndarray::s![r, pos - 1, ..]);
                let max = row.iter().fold(f32::NEG_INFINITY, |m, &x| m.max(x)) as f64;
                let lse = max
                    + row
                        .iter()
                        .map(|&x| (x as f64 - max).exp())
                        .sum::<f64>()
                        .ln();
                total += row[s[pos] as usize] as f64 - lse;
            }
            per_seq.push(total / (s.len() - plen) as f64);
        }
        let mut it = per_seq.into_iter();
        for item in chunk {
            scores.push(it.by_ref().take(item.options.len()).collect());
        }
    }
    Ok(scores)
}

/// Fraction of items whose highest-scoring option (ties to the lowest index)
/// is the correct one.
pub fn eval_accuracy<M: LanguageModel + ?Sized>(model: &M, suite: &[MCItem]) -> Result<f64> {
    if suite.is_empty() {
        return Err(NasError::InvalidInput("empty multiple-choice suite".into()));
    }
    let scores = option_scores(model, suite)?;
    let correct = scores
        .iter()
        .zip(suite)
        .filter(|(s, item)| {
            let best = s
                .iter()
                .enumerate()
                .fold(0, |best, (i, &v)| if v > s[best] { i } else { best });
            best == item.correct
        })
        .count();
    Ok(correct as f64 / suite.len() as f64)
}

/// Median tokens/second of a single forward over `reps` timed runs, after
/// `warmup` untimed runs.
pub fn measure_throughput<M: LanguageModel + ?Sized>(
    model: &M,
    vocab: usize,
    batch: usize,
    seq: usize,
    warmup: usize,
    reps: usize,
) -> Result<f64> {
    if reps < 3 {
        return Err(NasError::InvalidInput("throughput needs reps >= 3".into()));
    }
    let mut rng = rng::stream(0, "throughput");
    let tokens = Array2::from_shape_simple_fn((batch, seq), || rng.random_range(0..vocab as u32));
    for _ in 0..warmup {
        model.logits(tokens.view())?;
    }
    let mut rates = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        model.logits(tokens.view())?;
        let secs = start.elapsed().as_secs_f64();
        if secs <= 0.0 {
            return Err(NasError::Measurement(format!("non-positive timing {secs}")));
        }
        rates.push((batch * seq) as f64 / secs);
    }
    rates.sort_by(f64::total_cmp);
    Ok(rates[reps / 2])
}

/// Objectives of one evaluated architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub genome: ArchGenome,
    pub accuracy: f64,
    pub size_bytes: u64,
    pub throughput_tok_per_s: Option<f64>,
    pub measured: bool,
    pub seed: u64,
}

/// Measures architectures. Implementations must be deterministic for a fixed
/// (phenotype, seed).
pub trait Evaluator: Send + Sync {
    fn space(&self) -> &SearchSpaceSpec;
    fn measure(&self, genome: &ArchGenome) -> Result<EvalResult>;
    /// Stable identifier written into run metadata.
    fn id(&self) -> String;
}

/// Noise-free pseudo-accuracy
/// `sigmoid((0.8 sum c_i x_i + 0.3 sum_{i<j} c_ij x_i x_j) / sqrt(n))` over the
/// masked one-hot features `x` of a genome. Coefficients are uniform in
/// [-1, 1), drawn from a SplitMix64 stream: the `n` linear terms first, then
/// the pairs in row-major `(i, j), i < j` order.
#[derive(Debug, Clone)]
pub struct SurrogateEvaluator {
    space: SearchSpaceSpec,
    seed: u64,
    linear: Vec<f64>,
    /// Row-major upper triangle without diagonal.
    pairwise: Vec<f64>,
}

impl SurrogateEvaluator {
    pub fn new(space: SearchSpaceSpec, seed: u64) -> Result<Self> {
        space.validate()?;
        let n = featurize(&space.min_genome(), &space)?.len();
        let mut g = SplitMix64::new(seed);
        let linear = (0..n).map(|_| g.next_signed_unit()).collect();
        let pairwise = (0..n * (n - 1) / 2).map(|_| g.next_signed_unit()).collect();
        Ok(Self {
            space,
            seed,
            linear,
            pairwise,
        })
    }

    pub fn pseudo_accuracy(&self, genome: &ArchGenome) -> Result<f64> {
        let x = featurize(genome, &self.space)?;
        let n = x.len();
        let on: Vec<usize> = (0..n).filter(|&i| x[i] != 0.0).collect();
        let lin: f64 = on.iter().map(|&i| self.linear[i]).sum();
        let mut pair = 0.0;
        for (a, &i) in on.iter().enumerate() {
            // offset of row i in the packed upper triangle
            let row = i * (2 * n - i - 1) / 2;
            for &j in &on[a + 1..] {
                pair += self.pairwise[row + (j - i - 1)];
            }
        }
        let z = (0.8 * lin + 0.3 * pair) / (n as f64).sqrt();
        Ok(1.0 / (1.0 + (-z).exp()))
    }
}

impl Evaluator for SurrogateEvaluator {
    fn space(&self) -> &SearchSpaceSpec {
        &self.space
    }

    fn measure(&self, genome: &ArchGenome) -> Result<EvalResult> {
        Ok(EvalResult {
            genome: genome.clone(),
            accuracy: self.pseudo_accuracy(genome)?,
            size_bytes: genome_fp16_bytes(genome, &self.space)?,
            throughput_tok_per_s: None,
            measured: true,
            seed: self.seed,
        })
    }

    fn id(&self) -> String {
        format!("surrogate(seed={})", self.seed)
    }
}

/// Scores sub-networks of a trained toy supernet on a fixed MC suite.
pub struct ToyEvaluator {
    space: SearchSpaceSpec,
    weights: SupernetWeights<f32>,
    suite: Vec<MCItem>,
    suite_seed: u64,
    policy: PrecisionPolicy,
}

impl ToyEvaluator {
    pub fn new(
        space: SearchSpaceSpec,
        weights: SupernetWeights<f32>,
        suite_seed: u64,
        n_items: usize,
    ) -> Result<Self> {
        space.validate()?;
        weights.check_phenotype(&ArchPhenotype::full(&space.dims, space.max_inter()))?;
        Ok(Self {
            space,
            weights,
            suite: gen_mc_suite(suite_seed, n_items)?,
            suite_seed,
            policy: PrecisionPolicy::Fp16All,
        })
    }

    pub fn weights(&self) -> &SupernetWeights<f32> {
        &self.weights
    }

    pub fn suite(&self) -> &[MCItem] {
        &self.suite
    }
}

impl Evaluator for ToyEvaluator {
    fn space(&self) -> &SearchSpaceSpec {
        &self.space
    }

    fn measure(&self, genome: &ArchGenome) -> Result<EvalResult> {
        let phenotype = genome.phenotype(&self.space)?;
        let model = SlicedModel {
            weights: &self.weights,
            phenotype: &phenotype,
        };
        Ok(EvalResult {
            genome: genome.clone(),
            accuracy: eval_accuracy(&model, &self.suite)?,
            size_bytes: model_bytes(&phenotype, &self.space.dims, self.policy)?.bytes,
            throughput_tok_per_s: None,
            measured: true,
            seed: self.suite_seed,
        })
    }

    fn id(&self) -> String {
        format!("toy(suite_seed={}, items={})", self.suite_seed, self.suite.len())
    }
}

/// Memoizes an evaluator by phenotype.
pub struct CachedEvaluator<E> {
    inner: E,
    cache: Mutex<HashMap<ArchPhenotype, EvalResult>>,
}

impl<E: Evaluator> CachedEvaluator<E> {
    pub fn new(inner: E) -> Self {
        Self {
            inner,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.cache.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl<E: Evaluator> Evaluator for CachedEvaluator<E> {
    fn space(&self) -> &SearchSpaceSpec {
        self.inner.space()
    }

    fn measure(&self, genome: &ArchGenome) -> Result<EvalResult> {
        let phenotype = genome.phenotype(self.inner.space())?;
        if let Some(hit) = self.cache.lock().unwrap().get(&phenotype) {
            return Ok(EvalResult {
                genome: genome.clone(),
                ..hit.clone()
            });
        }
        let result = self.inner.measure(genome)?;
        self.cache
            .lock()
            .unwrap()
            .entry(phenotype)
            .or_insert_with(|| result.clone());
        Ok(result)
    }

    fn id(&self) -> String {
        self.inner.id()
    }
}
