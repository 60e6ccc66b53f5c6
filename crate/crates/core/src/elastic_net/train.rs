//! Alternating supernet / random-subnet training.

use ndarray::{s, Array2, ArrayView, ArrayViewMut, Dimension, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{loss_and_grad, SupernetWeights};
use crate::archspace::{sample_random, ArchPhenotype, SearchSpaceSpec};
use crate::error::{NasError, Result};
use crate::rng;
use crate::tasks::Corpus;

/// Which phenotype is trained on which step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Alternation {
    /// Even steps train the full supernet, odd steps a freshly sampled
    /// sub-network.
    #[default]
    SupernetFirst,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub alternation: Alternation,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 32,
            seq_len: 64,
            learning_rate: 3e-4,
            seed: 0,
            alternation: Alternation::SupernetFirst,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: Some(1.0),
        }
    }
}

impl TrainConfig {
    /// Fine-tuning settings used for the 7B-scale supernet (6 epochs,
    /// learning rate 1e-5, global batch 128). Kept for reference; the toy
    /// defaults are what the trainer runs with.
    pub const LLAMA2_EPOCHS: usize = 6;
    pub const LLAMA2_LEARNING_RATE: f64 = 1e-5;
    pub const LLAMA2_GLOBAL_BATCH: usize = 128;

    pub fn validate(&self) -> Result<()> {
        if self.steps < 2 {
            return Err(NasError::InvalidInput("train steps must be >= 2".into()));
        }
        if self.batch_size == 0 || self.seq_len < 2 {
            return Err(NasError::InvalidInput(
                "batch_size must be >= 1 and seq_len >= 2".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(NasError::InvalidInput("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhenotypeTag {
    Full,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub step: usize,
    pub tag: PhenotypeTag,
    pub phenotype: ArchPhenotype,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub trace: Vec<StepLoss>,
}

impl TrainOutcome {
    /// Losses of the full-supernet steps, in order.
    pub fn full_losses(&self) -> Vec<f64> {
        self.trace
            .iter()
            .filter(|s| s.tag == PhenotypeTag::Full)
            .map(|s| s.loss)
            .collect()
    }
}

/// First and second moment estimates, shaped like the weights.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: SupernetWeights<f32>,
    v: SupernetWeights<f32>,
    t: u64,
}

struct AdamStep {
    lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    bias1: f32,
    bias2: f32,
    grad_scale: f32,
}

fn adam_region<D: Dimension>(
    p: ArrayViewMut<f32, D>,
    g: ArrayView<f32, D>,
    m: ArrayViewMut<f32, D>,
    v: ArrayViewMut<f32, D>,
    h: &AdamStep,
) {
    Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
        let g = g * h.grad_scale;
        *m = h.beta1 * *m + (1.0 - h.beta1) * g;
        *v = h.beta2 * *v + (1.0 - h.beta2) * g * g;
        let mh = *m / h.bias1;
        let vh = *v / h.bias2;
        *p -= h.lr * mh / (vh.sqrt() + h.eps);
    });
}

impl AdamState {
    pub fn new(weights: &SupernetWeights<f32>) -> Self {
        Self {
            m: weights.zeros_like(),
            v: weights.zeros_like(),
            t: 0,
        }
    }

    /// Applies one update restricted to the region `phenotype` slices;
    /// parameters and moments outside it are left untouched.
    pub(crate) fn step(
        &mut self,
        w: &mut SupernetWeights<f32>,
        g: &SupernetWeights<f32>,
        phenotype: &ArchPhenotype,
        cfg: &TrainConfig,
        grad_scale: f32,
    ) {
        self.t += 1;
        let h = AdamStep {
            lr: cfg.learning_rate as f32,
            beta1: cfg.beta1 as f32,
            beta2: cfg.beta2 as f32,
            eps: cfg.adam_eps as f32,
            bias1: 1.0 - (cfg.beta1 as f32).powi(self.t as i32),
            bias2: 1.0 - (cfg.beta2 as f32).powi(self.t as i32),
            grad_scale,
        };
        let (m, v) = (&mut self.m, &mut self.v);
        let whole2 = |p: &mut Array2<f32>, g: &Array2<f32>, m: &mut Array2<f32>, v: &mut Array2<f32>| {
            adam_region(p.view_mut(), g.view(), m.view_mut(), v.view_mut(), &h)
        };
        whole2(&mut w.token_embedding, &g.token_embedding, &mut m.token_embedding, &mut v.token_embedding);
        whole2(
            &mut w.position_embedding,
            &g.position_embedding,
            &mut m.position_embedding,
            &mut v.position_embedding,
        );
        whole2(&mut w.head, &g.head, &mut m.head, &mut v.head);
        adam_region(
            w.final_norm.view_mut(),
            g.final_norm.view(),
            m.final_norm.view_mut(),
            v.final_norm.view_mut(),
            &h,
        );
        for (i, &s) in phenotype.active_inter_sizes.iter().enumerate() {
            let (wl, gl, ml, vl) = (&mut w.layers[i], &g.layers[i], &mut m.layers[i], &mut v.layers[i]);
            adam_region(wl.attn_norm.view_mut(), gl.attn_norm.view(), ml.attn_norm.view_mut(), vl.attn_norm.view_mut(), &h);
            adam_region(wl.mlp_norm.view_mut(), gl.mlp_norm.view(), ml.mlp_norm.view_mut(), vl.mlp_norm.view_mut(), &h);
            whole2(&mut wl.wq, &gl.wq, &mut ml.wq, &mut vl.wq);
            whole2(&mut wl.wk, &gl.wk, &mut ml.wk, &mut vl.wk);
            whole2(&mut wl.wv, &gl.wv, &mut ml.wv, &mut vl.wv);
            whole2(&mut wl.wo, &gl.wo, &mut ml.wo, &mut vl.wo);
            adam_region(
                wl.w_gate.slice_mut(s![.., ..s]),
                gl.w_gate.slice(s![.., ..s]),
                ml.w_gate.slice_mut(s![.., ..s]),
                vl.w_gate.slice_mut(s![.., ..s]),
                &h,
            );
            adam_region(
                wl.w_up.slice_mut(s![.., ..s]),
                gl.w_up.slice(s![.., ..s]),
                ml.w_up.slice_mut(s![.., ..s]),
                vl.w_up.slice_mut(s![.., ..s]),
                &h,
            );
            adam_region(
                wl.w_down.slice_mut(s![..s, ..]),
                gl.w_down.slice(s![..s, ..]),
                ml.w_down.slice_mut(s![..s, ..]),
                vl.w_down.slice_mut(s![..s, ..]),
                &h,
            );
        }
    }
}

fn grad_norm(g: &SupernetWeights<f32>) -> f64 {
    g.tensors()
        .iter()
        .map(|(_, t)| t.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

fn sample_batch<R: Rng>(corpus: &Corpus, cfg: &TrainConfig, rng: &mut R) -> Array2<u32> {
    let limit = corpus.tokens.len() - cfg.seq_len;
    let starts: &[usize] = {
        let n = corpus.record_starts.partition_point(|&s| s <= limit);
        &corpus.record_starts[..n]
    };
    let mut batch = Array2::zeros((cfg.batch_size, cfg.seq_len));
    for mut row in batch.rows_mut() {
        let start = if starts.is_empty() {
            rng.random_range(0..=limit)
        } else {
            starts[rng.random_range(0..starts.len())]
        };
        for (dst, &src) in row.iter_mut().zip(&corpus.tokens[start..start + cfg.seq_len]) {
            *dst = src;
        }
    }
    batch
}

/// Trains `weights` in place, alternating per optimizer step between the
/// full supernet (even steps) and a freshly sampled sub-network (odd steps).
/// Sub-network steps only touch the sliced regions of the shared weights.
/// Batches are windows of `seq_len` tokens starting at record boundaries.
pub fn train_instatune(
    weights: &mut SupernetWeights<f32>,
    space: &SearchSpaceSpec,
    corpus: &Corpus,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    space.validate()?;
    if corpus.tokens.len() < cfg.batch_size * cfg.seq_len {
        return Err(NasError::InvalidInput(format!(
            "corpus of {} tokens shorter than batch x seq = {}",
            corpus.tokens.len(),
            cfg.batch_size * cfg.seq_len
        )));
    }
    let full = ArchPhenotype {
        active_inter_sizes: vec![space.max_inter(); space.dims.max_layers],
    };
    weights.check_phenotype(&full)?;

    let mut batch_rng = rng::stream(cfg.seed, "batches");
    let mut subnet_rng = rng::stream(cfg.seed, "subnet");
    let mut adam = AdamState::new(weights);
    let mut trace = Vec::with_capacity(cfg.steps);
    let mut initial = None;
    let mut above = 0usize;

    for step in 0..cfg.steps {
        let (tag, phenotype) = if step % 2 == 0 {
            (PhenotypeTag::Full, full.clone())
        } else {
            let g = sample_random(space, &mut subnet_rng);
            (PhenotypeTag::Random, g.phenotype(space)?)
        };
        let batch = sample_batch(corpus, cfg, &mut batch_rng);
        let (loss, grads) = loss_and_grad(weights, &phenotype, batch.view())?;

        let initial_loss = *initial.get_or_insert(loss);
        if loss > 10.0 * initial_loss {
            above += 1;
            if above >= 100 {
                return Err(NasError::Divergence {
                    step,
                    loss,
                    initial: initial_loss,
                });
            }
        } else {
            above = 0;
        }

        let scale = match cfg.grad_clip {
            Some(clip) => {
                let norm = grad_norm(&grads);
                if norm > clip {
                    (clip / norm) as f32
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        adam.step(weights, &grads, &phenotype, cfg, scale);

        if step % 100 == 0 {
            log::info!("step={step} tag={tag:?} loss={loss:.4}");
        }
        trace.push(StepLoss {
            step,
            tag,
            phenotype,
            loss,
        });
    }
    weights.check_finite()?;
    Ok(TrainOutcome { trace })
}
