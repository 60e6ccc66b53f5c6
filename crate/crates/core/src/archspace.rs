//! Architecture search space: genome encoding, sampling, enumeration, and the
//! exact parameter/byte arithmetic for elastic decoder-only transformers.
//!
//! A genome always carries `max_layers` intermediate-size genes. When the
//! layer count is below `max_layers`, the trailing genes are carried in the
//! genotype but play no part in the built network (the phenotype keeps the
//! first `layer_count` layers).

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NasError, Result};

/// Fixed (non-searchable) model dimensions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub max_layers: usize,
    /// Longest sequence the model accepts. The toy network learns a
    /// positional table of this length; it is not part of the decoder size
    /// model.
    pub max_seq_len: usize,
    #[serde(default)]
    pub tied_embeddings: bool,
}

impl ModelDims {
    pub fn toy() -> Self {
        Self {
            vocab_size: 256,
            hidden_dim: 64,
            num_heads: 4,
            max_layers: 8,
            max_seq_len: 64,
            tied_embeddings: false,
        }
    }

    pub fn llama2_7b() -> Self {
        Self {
            vocab_size: 32000,
            hidden_dim: 4096,
            num_heads: 32,
            max_layers: 32,
            max_seq_len: 4096,
            tied_embeddings: false,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("hidden_dim", self.hidden_dim),
            ("num_heads", self.num_heads),
            ("max_layers", self.max_layers),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(NasError::InvalidSpace(format!("{name} must be >= 1")));
            }
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(NasError::InvalidSpace(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        Ok(())
    }
}

/// The searchable choices plus the dimensions they apply to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSpaceSpec {
    pub dims: ModelDims,
    pub layer_choices: Vec<usize>,
    pub inter_choices: Vec<usize>,
}

impl SearchSpaceSpec {
    /// 3 depths x 2 widths over an 8-layer, d=64 network.
    pub fn toy() -> Self {
        Self {
            dims: ModelDims::toy(),
            layer_choices: vec![4, 6, 8],
            inter_choices: vec![64, 128],
        }
    }

    /// The LLaMA2-7B search space: depth {24, 28, 32}, MLP width {5504, 11008}.
    pub fn llama2_7b() -> Self {
        Self {
            dims: ModelDims::llama2_7b(),
            layer_choices: vec![24, 28, 32],
            inter_choices: vec![5504, 11008],
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "llama2-7b" => Ok(Self::llama2_7b()),
            other => Err(NasError::InvalidSpace(format!(
                "unknown preset '{other}' (expected toy or llama2-7b)"
            ))),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let space: Self = serde_json::from_str(text)?;
        space.validate()?;
        Ok(space)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("search space serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        for (name, list) in [
            ("layer_choices", &self.layer_choices),
            ("inter_choices", &self.inter_choices),
        ] {
            if list.is_empty() {
                return Err(NasError::InvalidSpace(format!("{name} is empty")));
            }
            if list.windows(2).any(|w| w[0] >= w[1]) {
                return Err(NasError::InvalidSpace(format!(
                    "{name} must be sorted ascending and unique"
                )));
            }
            if list[0] == 0 {
                return Err(NasError::InvalidSpace(format!("{name} contains 0")));
            }
        }
        if self.max_layer_choice() != self.dims.max_layers {
            return Err(NasError::InvalidSpace(format!(
                "max layer choice {} != max_layers {}",
                self.max_layer_choice(),
                self.dims.max_layers
            )));
        }
        Ok(())
    }

    pub fn max_layer_choice(&self) -> usize {
        *self.layer_choices.last().expect("validated non-empty")
    }

    pub fn max_inter(&self) -> usize {
        *self.inter_choices.last().expect("validated non-empty")
    }

    /// Number of genes: one layer-count gene plus one width gene per slot.
    pub fn num_genes(&self) -> usize {
        1 + self.dims.max_layers
    }

    /// Number of choices available to gene `position`.
    pub fn gene_arity(&self, position: usize) -> usize {
        if position == 0 {
            self.layer_choices.len()
        } else {
            self.inter_choices.len()
        }
    }

    /// The largest architecture in the space.
    pub fn max_genome(&self) -> ArchGenome {
        ArchGenome {
            layer_count: self.max_layer_choice(),
            inter_sizes: vec![self.max_inter(); self.dims.max_layers],
        }
    }

    /// The smallest architecture in the space.
    pub fn min_genome(&self) -> ArchGenome {
        ArchGenome {
            layer_count: self.layer_choices[0],
            inter_sizes: vec![self.inter_choices[0]; self.dims.max_layers],
        }
    }
}

/// Searchable architecture: a layer count plus one MLP width per slot.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ArchGenome {
    pub layer_count: usize,
    pub inter_sizes: Vec<usize>,
}

/// The network a genome actually builds: widths of the active layers only.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ArchPhenotype {
    pub active_inter_sizes: Vec<usize>,
}

impl ArchPhenotype {
    pub fn layer_count(&self) -> usize {
        self.active_inter_sizes.len()
    }

    pub fn full(dims: &ModelDims, inter: usize) -> Self {
        Self {
            active_inter_sizes: vec![inter; dims.max_layers],
        }
    }
}

impl ArchGenome {
    pub fn validate(&self, space: &SearchSpaceSpec) -> Result<()> {
        if self.inter_sizes.len() != space.dims.max_layers {
            return Err(NasError::InvalidGenome(format!(
                "expected {} intermediate sizes, found {}",
                space.dims.max_layers,
                self.inter_sizes.len()
            )));
        }
        if !space.layer_choices.contains(&self.layer_count) {
            return Err(NasError::InvalidGenome(format!(
                "layer count {} not in {:?}",
                self.layer_count, space.layer_choices
            )));
        }
        if let Some((slot, s)) = self
            .inter_sizes
            .iter()
            .enumerate()
            .find(|(_, s)| !space.inter_choices.contains(s))
        {
            return Err(NasError::InvalidGenome(format!(
                "intermediate size {} in slot {} not in {:?}",
                s,
                slot + 1,
                space.inter_choices
            )));
        }
        Ok(())
    }

    /// Active prefix of the genome.
    pub fn phenotype(&self, space: &SearchSpaceSpec) -> Result<ArchPhenotype> {
        self.validate(space)?;
        Ok(ArchPhenotype {
            active_inter_sizes: self.inter_sizes[..self.layer_count].to_vec(),
        })
    }

    /// Position 0 holds the layer-count index, positions 1..=max_layers the
    /// width indices.
    pub fn encode(&self, space: &SearchSpaceSpec) -> Result<Vec<usize>> {
        self.validate(space)?;
        let mut out = Vec::with_capacity(space.num_genes());
        out.push(index_of(&space.layer_choices, self.layer_count));
        out.extend(
            self.inter_sizes
                .iter()
                .map(|&s| index_of(&space.inter_choices, s)),
        );
        Ok(out)
    }

    pub fn decode(indices: &[usize], space: &SearchSpaceSpec) -> Result<Self> {
        if indices.len() != space.num_genes() {
            return Err(NasError::InvalidGenome(format!(
                "encoding has {} genes, expected {}",
                indices.len(),
                space.num_genes()
            )));
        }
        for (position, &index) in indices.iter().enumerate() {
            let len = space.gene_arity(position);
            if index >= len {
                return Err(NasError::InvalidEncoding {
                    position,
                    index,
                    len,
                });
            }
        }
        Ok(Self {
            layer_count: space.layer_choices[indices[0]],
            inter_sizes: indices[1..]
                .iter()
                .map(|&i| space.inter_choices[i])
                .collect(),
        })
    }

    /// Genome whose active prefix is `phenotype` and whose inactive slots
    /// hold the smallest width.
    pub fn from_phenotype(phenotype: &ArchPhenotype, space: &SearchSpaceSpec) -> Result<Self> {
        let mut inter_sizes = phenotype.active_inter_sizes.clone();
        inter_sizes.resize(space.dims.max_layers, space.inter_choices[0]);
        let genome = Self {
            layer_count: phenotype.layer_count(),
            inter_sizes,
        };
        genome.validate(space)?;
        Ok(genome)
    }
}

fn index_of(choices: &[usize], value: usize) -> usize {
    choices
        .iter()
        .position(|&c| c == value)
        .expect("value validated against choices")
}

impl fmt::Display for ArchGenome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:", self.layer_count)?;
        for (i, s) in self.inter_sizes.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{s}")?;
        }
        Ok(())
    }
}

impl FromStr for ArchGenome {
    type Err = NasError;

    /// Parses `<layer_count>:<s1>,<s2>,...`. Errors report the byte offset of
    /// the offending field.
    fn from_str(text: &str) -> Result<Self> {
        let colon = text.find(':').ok_or_else(|| NasError::GenomeParse {
            position: 0,
            message: "missing ':' after layer count".into(),
        })?;
        let layer_count = parse_count(&text[..colon], 0)?;
        let mut inter_sizes = Vec::new();
        let mut offset = colon + 1;
        for field in text[colon + 1..].split(',') {
            inter_sizes.push(parse_count(field, offset)?);
            offset += field.len() + 1;
        }
        Ok(Self {
            layer_count,
            inter_sizes,
        })
    }
}

fn parse_count(field: &str, position: usize) -> Result<usize> {
    field.parse().map_err(|_| NasError::GenomeParse {
        position,
        message: format!("'{field}' is not a non-negative integer"),
    })
}

/// Genotype count `|layer_choices| * |inter_choices|^max_layers`.
pub fn cardinality(space: &SearchSpaceSpec) -> Result<u64> {
    let widths = space.inter_choices.len() as u64;
    let mut total = space.layer_choices.len() as u64;
    for _ in 0..space.dims.max_layers {
        total = total
            .checked_mul(widths)
            .ok_or(NasError::Overflow("search space cardinality"))?;
    }
    if total > i64::MAX as u64 {
        return Err(NasError::Overflow("search space cardinality"));
    }
    Ok(total)
}

/// Draws every gene independently and uniformly from its choice list.
pub fn sample_random<R: Rng + ?Sized>(space: &SearchSpaceSpec, rng: &mut R) -> ArchGenome {
    let layer_count = space.layer_choices[rng.random_range(0..space.layer_choices.len())];
    let inter_sizes = (0..space.dims.max_layers)
        .map(|_| space.inter_choices[rng.random_range(0..space.inter_choices.len())])
        .collect();
    ArchGenome {
        layer_count,
        inter_sizes,
    }
}

/// Every genome in the space, in lexicographic order of the encoding.
/// Intended for small spaces only.
pub fn enumerate_genomes(space: &SearchSpaceSpec) -> Result<Vec<ArchGenome>> {
    let total = cardinality(space)?;
    if total > 10_000_000 {
        return Err(NasError::InvalidSpace(format!(
            "refusing to enumerate {total} genomes"
        )));
    }
    let arity: Vec<usize> = (0..space.num_genes()).map(|p| space.gene_arity(p)).collect();
    let mut idx = vec![0usize; arity.len()];
    let mut out = Vec::with_capacity(total as usize);
    loop {
        out.push(ArchGenome::decode(&idx, space)?);
        // odometer increment, last gene fastest
        let mut p = idx.len();
        loop {
            if p == 0 {
                return Ok(out);
            }
            p -= 1;
            idx[p] += 1;
            if idx[p] < arity[p] {
                break;
            }
            idx[p] = 0;
        }
    }
}

/// Storage precision policy for size accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PrecisionPolicy {
    /// Every parameter stored at 2 bytes.
    Fp16All,
    /// Decoder linear weights at 1 byte plus a 2-byte scale per output
    /// channel; embeddings, head and norms at 2 bytes.
    Int8Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SizeBreakdown {
    pub embed_params: u64,
    pub head_params: u64,
    pub per_layer_attn_params: Vec<u64>,
    pub per_layer_mlp_params: Vec<u64>,
    pub per_layer_norm_params: Vec<u64>,
    pub final_norm_params: u64,
    pub total_params: u64,
    /// Per-output-channel scales stored alongside INT8 linears (0 for FP16).
    pub scale_count: u64,
    pub bytes: u64,
    /// Binary gigabytes (bytes / 2^30) rounded to one decimal.
    pub display_gb: f64,
}

impl SizeBreakdown {
    pub fn linear_params(&self) -> u64 {
        self.per_layer_attn_params.iter().sum::<u64>()
            + self.per_layer_mlp_params.iter().sum::<u64>()
    }
}

/// Rounds `bytes / 2^30` to one decimal.
pub fn display_gb(bytes: u64) -> f64 {
    let gb = bytes as f64 / (1u64 << 30) as f64;
    (gb * 10.0).round() / 10.0
}

fn checked_sum<I: IntoIterator<Item = u64>>(items: I) -> Result<u64> {
    items.into_iter().try_fold(0u64, |acc, x| {
        acc.checked_add(x).ok_or(NasError::Overflow("parameter count"))
    })
}

fn mul(a: usize, b: usize) -> Result<u64> {
    (a as u64)
        .checked_mul(b as u64)
        .ok_or(NasError::Overflow("parameter count"))
}

/// Full size breakdown of a phenotype under `policy`.
pub fn model_bytes(
    phenotype: &ArchPhenotype,
    dims: &ModelDims,
    policy: PrecisionPolicy,
) -> Result<SizeBreakdown> {
    let d = dims.hidden_dim;
    if let Some(i) = phenotype.active_inter_sizes.iter().position(|&s| s == 0) {
        return Err(NasError::InvalidGenome(format!(
            "intermediate size of layer {} is zero",
            i + 1
        )));
    }
    let embed_params = mul(dims.vocab_size, d)?;
    let head_params = if dims.tied_embeddings { 0 } else { embed_params };
    let attn_one = mul(4 * d, d)?;
    let per_layer_attn_params = vec![attn_one; phenotype.layer_count()];
    let per_layer_mlp_params = phenotype
        .active_inter_sizes
        .iter()
        .map(|&s| mul(3 * d, s))
        .collect::<Result<Vec<_>>>()?;
    let per_layer_norm_params = vec![2 * d as u64; phenotype.layer_count()];
    let final_norm_params = d as u64;

    let total_params = checked_sum(
        [embed_params, head_params, final_norm_params]
            .into_iter()
            .chain(per_layer_attn_params.iter().copied())
            .chain(per_layer_mlp_params.iter().copied())
            .chain(per_layer_norm_params.iter().copied()),
    )?;

    let (scale_count, bytes) = match policy {
        PrecisionPolicy::Fp16All => (
            0,
            total_params
                .checked_mul(2)
                .ok_or(NasError::Overflow("byte count"))?,
        ),
        PrecisionPolicy::Int8Linear => {
            // q, k, v, o and down have d output channels; gate and up have s.
            let scale_count = checked_sum(
                phenotype
                    .active_inter_sizes
                    .iter()
                    .map(|&s| (5 * d + 2 * s) as u64),
            )?;
            let linear = checked_sum(
                per_layer_attn_params
                    .iter()
                    .chain(&per_layer_mlp_params)
                    .copied(),
            )?;
            let rest = total_params - linear;
            let bytes = checked_sum([linear, 2 * scale_count, 2 * rest])?;
            (scale_count, bytes)
        }
    };

    Ok(SizeBreakdown {
        embed_params,
        head_params,
        per_layer_attn_params,
        per_layer_mlp_params,
        per_layer_norm_params,
        final_norm_params,
        total_params,
        scale_count,
        bytes,
        display_gb: display_gb(bytes),
    })
}

/// `2Vd + sum_i (4d^2 + 3 d s_i + 2d) + d` (untied embeddings).
pub fn param_count(phenotype: &ArchPhenotype, dims: &ModelDims) -> Result<u64> {
    Ok(model_bytes(phenotype, dims, PrecisionPolicy::Fp16All)?.total_params)
}

/// FP16 byte size of a genome's phenotype.
pub fn genome_fp16_bytes(genome: &ArchGenome, space: &SearchSpaceSpec) -> Result<u64> {
    let phenotype = genome.phenotype(space)?;
    Ok(model_bytes(&phenotype, &space.dims, PrecisionPolicy::Fp16All)?.bytes)
}
