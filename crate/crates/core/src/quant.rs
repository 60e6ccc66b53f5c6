//! Weight-only INT8 quantization of decoder linears: symmetric, one scale
//! per output channel, round half away from zero.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};

use crate::archspace::{model_bytes, ArchPhenotype, ModelDims, PrecisionPolicy, SizeBreakdown};
use crate::elastic_net::{forward, ForwardOutput, LayerWeights, SupernetWeights};
use crate::error::{NasError, Result};
use crate::tasks::LanguageModel;

/// An `[in, out]` matrix stored as INT8 with one scale per output column.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub values: Array2<i8>,
    pub scales: Array1<f32>,
}

impl QuantizedTensor {
    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn dequantize(&self) -> Array2<f32> {
        let mut out = self.values.mapv(f32::from);
        for (mut col, &s) in out.axis_iter_mut(Axis(1)).zip(&self.scales) {
            col.mapv_inplace(|q| q * s);
        }
        out
    }
}

/// `scale_c = max|w_c| / 127`, `q = round(127 * w / max|w_c|)`.
/// All-zero channels get scale 1.
pub fn quantize_linear(w: ArrayView2<f32>) -> Result<QuantizedTensor> {
    if w.iter().any(|x| !x.is_finite()) {
        return Err(NasError::NonFinite("weight matrix to quantize".into()));
    }
    let mut values = Array2::<i8>::zeros(w.dim());
    let mut scales = Array1::<f32>::zeros(w.ncols());
    Zip::from(values.axis_iter_mut(Axis(1)))
        .and(w.axis_iter(Axis(1)))
        .and(&mut scales)
        .for_each(|mut q, col, s| {
            let max = col.iter().fold(0.0f32, |m, x| m.max(x.abs()));
            if max == 0.0 {
                *s = 1.0;
                return;
            }
            *s = max / 127.0;
            let inv = 127.0 / max as f64;
            Zip::from(&mut q).and(&col).for_each(|q, &x| {
                *q = (x as f64 * inv).round().clamp(-127.0, 127.0) as i8;
            });
        });
    Ok(QuantizedTensor { values, scales })
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLayer {
    pub attn_norm: Array1<f32>,
    pub wq: QuantizedTensor,
    pub wk: QuantizedTensor,
    pub wv: QuantizedTensor,
    pub wo: QuantizedTensor,
    pub mlp_norm: Array1<f32>,
    pub w_gate: QuantizedTensor,
    pub w_up: QuantizedTensor,
    pub w_down: QuantizedTensor,
}

impl QuantizedLayer {
    /// The seven quantized matrices in a fixed order.
    pub fn linears(&self) -> [(&'static str, &QuantizedTensor); 7] {
        [
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("w_gate", &self.w_gate),
            ("w_up", &self.w_up),
            ("w_down", &self.w_down),
        ]
    }
}

/// A standalone sub-network with INT8 decoder linears; embeddings, head and
/// norms stay at full precision.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedSubnet {
    pub dims: ModelDims,
    pub phenotype: ArchPhenotype,
    pub token_embedding: Array2<f32>,
    pub position_embedding: Array2<f32>,
    pub layers: Vec<QuantizedLayer>,
    pub final_norm: Array1<f32>,
    pub head: Array2<f32>,
}

impl QuantizedSubnet {
    pub fn quantized_tensor_count(&self) -> usize {
        self.layers.len() * 7
    }

    /// Full-precision weights with every linear replaced by its dequantized
    /// value.
    pub fn dequantize(&self) -> SupernetWeights<f32> {
        SupernetWeights {
            dims: self.dims.clone(),
            token_embedding: self.token_embedding.clone(),
            position_embedding: self.position_embedding.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                    attn_norm: l.attn_norm.clone(),
                    wq: l.wq.dequantize(),
                    wk: l.wk.dequantize(),
                    wv: l.wv.dequantize(),
                    wo: l.wo.dequantize(),
                    mlp_norm: l.mlp_norm.clone(),
                    w_gate: l.w_gate.dequantize(),
                    w_up: l.w_up.dequantize(),
                    w_down: l.w_down.dequantize(),
                })
                .collect(),
            final_norm: self.final_norm.clone(),
            head: self.head.clone(),
        }
    }
}

/// Quantizes a standalone subnet (see `subnet_extract`) whose shape must
/// match `phenotype` exactly.
pub fn quantize_subnet(subnet: &SupernetWeights<f32>, phenotype: &ArchPhenotype) -> Result<QuantizedSubnet> {
    if &subnet.full_phenotype() != phenotype {
        return Err(NasError::Shape(format!(
            "subnet widths {:?} do not match phenotype {:?}",
            subnet.full_phenotype().active_inter_sizes,
            phenotype.active_inter_sizes
        )));
    }
    let layers = subnet
        .layers
        .iter()
        .map(|l| {
            Ok(QuantizedLayer {
                attn_norm: l.attn_norm.clone(),
                wq: quantize_linear(l.wq.view())?,
                wk: quantize_linear(l.wk.view())?,
                wv: quantize_linear(l.wv.view())?,
                wo: quantize_linear(l.wo.view())?,
                mlp_norm: l.mlp_norm.clone(),
                w_gate: quantize_linear(l.w_gate.view())?,
                w_up: quantize_linear(l.w_up.view())?,
                w_down: quantize_linear(l.w_down.view())?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(QuantizedSubnet {
        dims: subnet.dims.clone(),
        phenotype: phenotype.clone(),
        token_embedding: subnet.token_embedding.clone(),
        position_embedding: subnet.position_embedding.clone(),
        layers,
        final_norm: subnet.final_norm.clone(),
        head: subnet.head.clone(),
    })
}

/// Dequantize-then-multiply forward pass.
pub fn forward_quantized(q: &QuantizedSubnet, tokens: ArrayView2<u32>) -> Result<ForwardOutput<f32>> {
    forward(&q.dequantize(), &q.phenotype, tokens)
}

/// Analytic INT8-linear size.
pub fn quantized_bytes(phenotype: &ArchPhenotype, dims: &ModelDims) -> Result<SizeBreakdown> {
    model_bytes(phenotype, dims, PrecisionPolicy::Int8Linear)
}

/// A quantized subnet ready for repeated evaluation.
pub struct QuantizedModel {
    weights: SupernetWeights<f32>,
    phenotype: ArchPhenotype,
}

impl QuantizedModel {
    pub fn new(q: &QuantizedSubnet) -> Self {
        Self {
            weights: q.dequantize(),
            phenotype: q.phenotype.clone(),
        }
    }
}

impl LanguageModel for QuantizedModel {
    fn logits(&self, tokens: ArrayView2<u32>) -> Result<ndarray::Array3<f32>> {
        Ok(forward(&self.weights, &self.phenotype, tokens)?.logits)
    }
}
