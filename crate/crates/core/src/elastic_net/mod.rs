//! Elastic decoder-only transformer.
//!
//! The supernet holds the largest configuration. A sub-network is selected by
//! an [`ArchPhenotype`]: it runs the first `layer_count` layers, and layer `i`
//! uses the first `s_i` columns of the gate/up projections and the first `s_i`
//! rows of the down projection. Sub-network weights are therefore literal
//! prefix slices of the shared tensors.

mod model;
mod train;

use ndarray::{s, Array1, Array2, ArrayD, ArrayViewD, ArrayViewMutD};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::archspace::{ArchPhenotype, ModelDims};
use crate::error::{NasError, Result};
use crate::rng;

pub use model::{forward, loss, loss_and_grad, ForwardOutput, Real};
pub use train::{
    train_instatune, AdamState, Alternation, PhenotypeTag, StepLoss, TrainConfig, TrainOutcome,
};

pub(crate) const NORM_EPS: f64 = 1e-5;

/// One decoder block. Projections are stored `[in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<F = f32> {
    pub attn_norm: Array1<F>,
    pub wq: Array2<F>,
    pub wk: Array2<F>,
    pub wv: Array2<F>,
    pub wo: Array2<F>,
    pub mlp_norm: Array1<F>,
    /// `[d, S]`
    pub w_gate: Array2<F>,
    /// `[d, S]`
    pub w_up: Array2<F>,
    /// `[S, d]`
    pub w_down: Array2<F>,
}

impl<F: Real> LayerWeights<F> {
    pub fn inter_size(&self) -> usize {
        self.w_gate.ncols()
    }

    fn zeros(d: usize, inter: usize) -> Self {
        Self {
            attn_norm: Array1::zeros(d),
            wq: Array2::zeros((d, d)),
            wk: Array2::zeros((d, d)),
            wv: Array2::zeros((d, d)),
            wo: Array2::zeros((d, d)),
            mlp_norm: Array1::zeros(d),
            w_gate: Array2::zeros((d, inter)),
            w_up: Array2::zeros((d, inter)),
            w_down: Array2::zeros((inter, d)),
        }
    }

    /// Standalone copy of the first `inter` MLP channels.
    fn sliced(&self, inter: usize) -> Self {
        Self {
            w_gate: self.w_gate.slice(s![.., ..inter]).to_owned(),
            w_up: self.w_up.slice(s![.., ..inter]).to_owned(),
            w_down: self.w_down.slice(s![..inter, ..]).to_owned(),
            ..self.clone()
        }
    }
}

/// Weights of an elastic transformer: the full supernet, or a standalone
/// sub-network produced by [`subnet_extract`] (fewer layers, per-layer widths).
#[derive(Debug, Clone, PartialEq)]
pub struct SupernetWeights<F = f32> {
    pub dims: ModelDims,
    /// `[V, d]`
    pub token_embedding: Array2<F>,
    /// `[max_seq_len, d]`
    pub position_embedding: Array2<F>,
    pub layers: Vec<LayerWeights<F>>,
    pub final_norm: Array1<F>,
    /// `[d, V]`
    pub head: Array2<F>,
}

fn randn(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; u1 in (0, 1]
    let u1 = 1.0 - rng.random::<f64>();
    let u2 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn randn_matrix<F: Real>(rng: &mut ChaCha8Rng, shape: (usize, usize), std: f64) -> Array2<F> {
    Array2::from_shape_simple_fn(shape, || F::from_f64(randn(rng) * std).unwrap())
}

impl<F: Real> SupernetWeights<F> {
    /// Zero-filled weights with the supernet layout.
    pub fn zeros(dims: &ModelDims, inter_max: usize) -> Self {
        let d = dims.hidden_dim;
        Self {
            dims: dims.clone(),
            token_embedding: Array2::zeros((dims.vocab_size, d)),
            position_embedding: Array2::zeros((dims.max_seq_len, d)),
            layers: (0..dims.max_layers)
                .map(|_| LayerWeights::zeros(d, inter_max))
                .collect(),
            final_norm: Array1::zeros(d),
            head: Array2::zeros((d, dims.vocab_size)),
        }
    }

    /// Deterministic initialization: Gaussian projections with standard
    /// deviation `1/sqrt(d)` (residual-branch outputs additionally scaled by
    /// `1/sqrt(2 * max_layers)`), unit norm scales.
    pub fn init(dims: &ModelDims, inter_max: usize, seed: u64) -> Result<Self> {
        dims.validate()?;
        if inter_max == 0 {
            return Err(NasError::InvalidInput("inter_max must be >= 1".into()));
        }
        let d = dims.hidden_dim;
        let std = 1.0 / (d as f64).sqrt();
        let residual_std = std / (2.0 * dims.max_layers as f64).sqrt();
        let mut rng = rng::stream(seed, "init");
        let mut w = Self::zeros(dims, inter_max);
        w.token_embedding = randn_matrix(&mut rng, (dims.vocab_size, d), 1.0);
        w.position_embedding = randn_matrix(&mut rng, (dims.max_seq_len, d), std);
        for layer in &mut w.layers {
            layer.attn_norm.fill(F::one());
            layer.mlp_norm.fill(F::one());
            layer.wq = randn_matrix(&mut rng, (d, d), std);
            layer.wk = randn_matrix(&mut rng, (d, d), std);
            layer.wv = randn_matrix(&mut rng, (d, d), std);
            layer.wo = randn_matrix(&mut rng, (d, d), residual_std);
            layer.w_gate = randn_matrix(&mut rng, (d, inter_max), std);
            layer.w_up = randn_matrix(&mut rng, (d, inter_max), std);
            layer.w_down = randn_matrix(&mut rng, (inter_max, d), residual_std);
        }
        w.final_norm.fill(F::one());
        w.head = randn_matrix(&mut rng, (d, dims.vocab_size), std);
        Ok(w)
    }

    /// Phenotype using every layer at its stored width.
    pub fn full_phenotype(&self) -> ArchPhenotype {
        ArchPhenotype {
            active_inter_sizes: self.layers.iter().map(|l| l.inter_size()).collect(),
        }
    }

    /// Checks that `phenotype` can be sliced out of these weights.
    pub fn check_phenotype(&self, phenotype: &ArchPhenotype) -> Result<()> {
        if phenotype.layer_count() > self.layers.len() {
            return Err(NasError::Shape(format!(
                "phenotype has {} layers, weights have {}",
                phenotype.layer_count(),
                self.layers.len()
            )));
        }
        for (i, (&s, layer)) in phenotype
            .active_inter_sizes
            .iter()
            .zip(&self.layers)
            .enumerate()
        {
            if s == 0 || s > layer.inter_size() {
                return Err(NasError::Shape(format!(
                    "layer {} width {} outside 1..={}",
                    i + 1,
                    s,
                    layer.inter_size()
                )));
            }
        }
        Ok(())
    }

    /// Named views over every tensor, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, ArrayViewD<'_, F>)> {
        let mut out = vec![
            ("token_embedding".to_string(), self.token_embedding.view().into_dyn()),
            ("position_embedding".to_string(), self.position_embedding.view().into_dyn()),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let p = |n: &str| format!("layers.{i}.{n}");
            out.push((p("attn_norm"), l.attn_norm.view().into_dyn()));
            out.push((p("wq"), l.wq.view().into_dyn()));
            out.push((p("wk"), l.wk.view().into_dyn()));
            out.push((p("wv"), l.wv.view().into_dyn()));
            out.push((p("wo"), l.wo.view().into_dyn()));
            out.push((p("mlp_norm"), l.mlp_norm.view().into_dyn()));
            out.push((p("w_gate"), l.w_gate.view().into_dyn()));
            out.push((p("w_up"), l.w_up.view().into_dyn()));
            out.push((p("w_down"), l.w_down.view().into_dyn()));
        }
        out.push(("final_norm".to_string(), self.final_norm.view().into_dyn()));
        out.push(("head".to_string(), self.head.view().into_dyn()));
        out
    }

    /// Mutable counterpart of [`tensors`](Self::tensors), same order.
    pub fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, F>)> {
        let mut out = vec![
            ("token_embedding".to_string(), self.token_embedding.view_mut().into_dyn()),
            ("position_embedding".to_string(), self.position_embedding.view_mut().into_dyn()),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            let p = |n: &str| format!("layers.{i}.{n}");
            out.push((p("attn_norm"), l.attn_norm.view_mut().into_dyn()));
            out.push((p("wq"), l.wq.view_mut().into_dyn()));
            out.push((p("wk"), l.wk.view_mut().into_dyn()));
            out.push((p("wv"), l.wv.view_mut().into_dyn()));
            out.push((p("wo"), l.wo.view_mut().into_dyn()));
            out.push((p("mlp_norm"), l.mlp_norm.view_mut().into_dyn()));
            out.push((p("w_gate"), l.w_gate.view_mut().into_dyn()));
            out.push((p("w_up"), l.w_up.view_mut().into_dyn()));
            out.push((p("w_down"), l.w_down.view_mut().into_dyn()));
        }
        out.push(("final_norm".to_string(), self.final_norm.view_mut().into_dyn()));
        out.push(("head".to_string(), self.head.view_mut().into_dyn()));
        out
    }

    /// Rebuilds weights from named tensors (the order of [`tensors`](Self::tensors)).
    pub fn from_tensors(
        dims: &ModelDims,
        inter_sizes: &[usize],
        mut lookup: impl FnMut(&str, &[usize]) -> Result<ArrayD<F>>,
    ) -> Result<Self> {
        let d = dims.hidden_dim;
        let mut get2 = |name: &str, shape: (usize, usize)| -> Result<Array2<F>> {
            lookup(name, &[shape.0, shape.1])?
                .into_dimensionality()
                .map_err(|e| NasError::Format(format!("{name}: {e}")))
        };
        let token_embedding = get2("token_embedding", (dims.vocab_size, d))?;
        let position_embedding = get2("position_embedding", (dims.max_seq_len, d))?;
        let head = get2("head", (d, dims.vocab_size))?;
        let mut layers = Vec::with_capacity(inter_sizes.len());
        for (i, &s) in inter_sizes.iter().enumerate() {
            let p = |n: &str| format!("layers.{i}.{n}");
            layers.push(LayerWeights {
                attn_norm: Array1::zeros(d),
                wq: get2(&p("wq"), (d, d))?,
                wk: get2(&p("wk"), (d, d))?,
                wv: get2(&p("wv"), (d, d))?,
                wo: get2(&p("wo"), (d, d))?,
                mlp_norm: Array1::zeros(d),
                w_gate: get2(&p("w_gate"), (d, s))?,
                w_up: get2(&p("w_up"), (d, s))?,
                w_down: get2(&p("w_down"), (s, d))?,
            });
        }
        drop(get2);
        let mut get1 = |name: &str| -> Result<Array1<F>> {
            lookup(name, &[d])?
                .into_dimensionality()
                .map_err(|e| NasError::Format(format!("{name}: {e}")))
        };
        for (i, layer) in layers.iter_mut().enumerate() {
            layer.attn_norm = get1(&format!("layers.{i}.attn_norm"))?;
            layer.mlp_norm = get1(&format!("layers.{i}.mlp_norm"))?;
        }
        let final_norm = get1("final_norm")?;
        let w = Self {
            dims: dims.clone(),
            token_embedding,
            position_embedding,
            layers,
            final_norm,
            head,
        };
        w.check_finite()?;
        Ok(w)
    }

    /// Total number of stored scalars.
    pub fn element_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Stored scalars excluding the learned positional table, which the
    /// decoder size model does not count.
    pub fn decoder_param_count(&self) -> usize {
        self.element_count() - self.position_embedding.len()
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, t) in self.tensors() {
            if let Some(pos) = t.iter().position(|x| !x.is_finite()) {
                return Err(NasError::NonFinite(format!("{name}[{pos}]")));
            }
        }
        Ok(())
    }

    /// Converts every element to another float type.
    pub fn cast<G: Real>(&self) -> SupernetWeights<G> {
        let c1 = |a: &Array1<F>| a.mapv(|x| G::from_f64(x.to_f64().unwrap()).unwrap());
        let c2 = |a: &Array2<F>| a.mapv(|x| G::from_f64(x.to_f64().unwrap()).unwrap());
        SupernetWeights {
            dims: self.dims.clone(),
            token_embedding: c2(&self.token_embedding),
            position_embedding: c2(&self.position_embedding),
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                    attn_norm: c1(&l.attn_norm),
                    wq: c2(&l.wq),
                    wk: c2(&l.wk),
                    wv: c2(&l.wv),
                    wo: c2(&l.wo),
                    mlp_norm: c1(&l.mlp_norm),
                    w_gate: c2(&l.w_gate),
                    w_up: c2(&l.w_up),
                    w_down: c2(&l.w_down),
                })
                .collect(),
            final_norm: c1(&self.final_norm),
            head: c2(&self.head),
        }
    }

    /// Zero-filled weights with the same shapes (gradient buffers).
    pub fn zeros_like(&self) -> Self {
        let d = self.dims.hidden_dim;
        Self {
            dims: self.dims.clone(),
            token_embedding: Array2::zeros(self.token_embedding.raw_dim()),
            position_embedding: Array2::zeros(self.position_embedding.raw_dim()),
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights::zeros(d, l.inter_size()))
                .collect(),
            final_norm: Array1::zeros(d),
            head: Array2::zeros(self.head.raw_dim()),
        }
    }
}

/// Initializes the supernet for `dims` with MLP width `inter_max`.
pub fn init_supernet(dims: &ModelDims, inter_max: usize, seed: u64) -> Result<SupernetWeights> {
    SupernetWeights::init(dims, inter_max, seed)
}

/// Copies the sliced tensors of `phenotype` into a standalone network whose
/// full phenotype is `phenotype`.
pub fn subnet_extract<F: Real>(
    weights: &SupernetWeights<F>,
    phenotype: &ArchPhenotype,
) -> Result<SupernetWeights<F>> {
    weights.check_phenotype(phenotype)?;
    Ok(SupernetWeights {
        dims: ModelDims {
            max_layers: phenotype.layer_count(),
            ..weights.dims.clone()
        },
        token_embedding: weights.token_embedding.clone(),
        position_embedding: weights.position_embedding.clone(),
        layers: weights
            .layers
            .iter()
            .zip(&phenotype.active_inter_sizes)
            .map(|(l, &s)| l.sliced(s))
            .collect(),
        final_norm: weights.final_norm.clone(),
        head: weights.head.clone(),
    })
}
