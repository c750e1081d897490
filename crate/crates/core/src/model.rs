//! Network description, plaintext reference inference and the
//! quantization sweep.
//!
//! A model is a chain of linear layers and activation markers. Inputs enter
//! at the codec scale `f`; every dense, conv or pooling layer adds `f` bits of
//! scale and every activation brings values back to scale `f`. Each
//! activation picks its truncation divisor so that the declared input range
//! `[-2^range_log2, 2^range_log2)` fills the `k`-bit table domain.

use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::field::{FieldElement, FieldParams, FixedPointCodec, MERSENNE_61};
use crate::linear::{FieldLinear, LinearKind, LinearLayerSpec, Shape};
use crate::lookup::{
    floor_div, quantized_activation, table_storage_bytes, wrap_to_domain, ActivationFn, QuantSpec, MAX_K,
};

pub const MODEL_FORMAT: &str = "tabula-model";
pub const DATASET_FORMAT: &str = "tabula-dataset";
pub const SCHEMA_VERSION: u64 = 1;

/// Largest fixed-point scale any intermediate value may carry. Leaves 12
/// bits of magnitude below `p/2` for the 61-bit field.
pub const MAX_SCALE_BITS: u32 = 48;

/// Header line of the sweep CSV.
pub const SWEEP_CSV_HEADER: &str = "k,accuracy,table_bytes_per_party,comm_bytes_online";

#[derive(Debug, Error)]
pub enum SchemaError {
    #[error("layer {layer}, field `{field}`: {message}")]
    Layer { layer: usize, field: String, message: String },
    #[error("field `{field}`: {message}")]
    Top { field: String, message: String },
    #[error("invalid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl SchemaError {
    fn layer(layer: usize, field: &str, message: impl Into<String>) -> Self {
        SchemaError::Layer { layer, field: field.into(), message: message.into() }
    }

    fn top(field: &str, message: impl Into<String>) -> Self {
        SchemaError::Top { field: field.into(), message: message.into() }
    }
}

/// An activation marker: which function, its table precision, and the
/// expected magnitude of its inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivationLayer {
    pub function: ActivationFn,
    pub k: u32,
    pub range_log2: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Linear(LinearLayerSpec),
    Activation(ActivationLayer),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub scale_bits: u32,
    pub bound: f64,
    /// Field modulus; small primes are for statistical tests.
    #[serde(default = "default_modulus")]
    pub modulus: u64,
}

fn default_modulus() -> u64 {
    MERSENNE_61
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            scale_bits: FixedPointCodec::DEFAULT_SCALE_BITS,
            bound: FixedPointCodec::DEFAULT_BOUND,
            modulus: MERSENNE_61,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    pub name: String,
    pub codec: CodecConfig,
    pub input_shape: Shape,
    pub num_classes: usize,
    pub layers: Vec<Layer>,
    /// False when loaded from an architecture-only file (no weight blobs).
    pub has_weights: bool,
}

/// What one layer does once shapes and scales are resolved.
#[derive(Debug, Clone, PartialEq)]
pub enum PlanStep {
    Linear(FieldLinear),
    Flatten,
    Activation(QuantSpec),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlannedLayer {
    pub index: usize,
    pub input: Shape,
    pub output: Shape,
    pub input_scale_bits: u32,
    pub output_scale_bits: u32,
    pub step: PlanStep,
}

impl PlannedLayer {
    pub fn kind_name(&self) -> &'static str {
        match &self.step {
            PlanStep::Linear(l) => match l.op {
                crate::linear::FieldOp::Dense { .. } => "dense",
                crate::linear::FieldOp::Conv { .. } => "conv2d",
                crate::linear::FieldOp::AvgPool { .. } => "avgpool",
            },
            PlanStep::Flatten => "flatten",
            PlanStep::Activation(_) => "activation",
        }
    }
}

/// A validated model with shapes, scales and field-encoded weights.
#[derive(Debug, Clone)]
pub struct CompiledModel {
    pub graph: ModelGraph,
    pub codec: FixedPointCodec,
    pub plan: Vec<PlannedLayer>,
}

/// Truncation exponent that maps `[-2^range, 2^range)` at `in_scale` onto
/// the signed `k`-bit domain.
pub fn trunc_bits_for(in_scale: u32, range_log2: u32, k: u32) -> u32 {
    (in_scale + range_log2 + 1).saturating_sub(k)
}

impl ModelGraph {
    pub fn codec(&self) -> Result<FixedPointCodec, SchemaError> {
        let field = FieldParams::new(self.codec.modulus).map_err(|e| SchemaError::top("codec", e.to_string()))?;
        FixedPointCodec::new(field, self.codec.scale_bits, self.codec.bound)
            .map_err(|e| SchemaError::top("codec", e.to_string()))
    }

    pub fn compile(&self) -> Result<CompiledModel, SchemaError> {
        let codec = self.codec()?;
        let f = codec.scale_bits();
        // bits below p/2
        let room = 63 - (codec.field().modulus() / 2).leading_zeros();
        let max_scale = MAX_SCALE_BITS.min(room.saturating_sub(1));
        let mut shape = self.input_shape;
        let mut scale = f;
        let mut plan = Vec::with_capacity(self.layers.len());
        for (index, layer) in self.layers.iter().enumerate() {
            let (input, input_scale) = (shape, scale);
            let step = match layer {
                Layer::Linear(spec) if spec.kind == LinearKind::Flatten => {
                    shape = Shape::vector(shape.len());
                    PlanStep::Flatten
                }
                Layer::Linear(spec) => {
                    let out = spec.kind.output_shape(shape).map_err(|m| SchemaError::layer(index, "type", m))?;
                    scale += f;
                    if scale > max_scale {
                        return Err(SchemaError::layer(
                            index,
                            "type",
                            format!("output scale 2^{scale} exceeds 2^{max_scale}; add an activation earlier"),
                        ));
                    }
                    if let Some(b) = &spec.bias {
                        let limit = (room as f64 - 1.0 - scale as f64).exp2();
                        if let Some(v) = b.iter().find(|v| v.abs() as f64 >= limit) {
                            return Err(SchemaError::layer(index, "bias", format!("{v} too large at scale 2^{scale}")));
                        }
                    }
                    let lowered = if self.has_weights {
                        FieldLinear::lower(spec, shape, input_scale, &codec)
                    } else {
                        let zeros = LinearLayerSpec {
                            kind: spec.kind,
                            weights: vec![0.0; spec.kind.weight_count()],
                            bias: spec.bias.as_ref().map(|_| vec![0.0; spec.kind.bias_count()]),
                        };
                        FieldLinear::lower(&zeros, shape, input_scale, &codec)
                    }
                    .map_err(|e| SchemaError::layer(index, "weights", e.to_string()))?;
                    shape = out;
                    PlanStep::Linear(lowered)
                }
                Layer::Activation(a) => {
                    if !(1..=MAX_K).contains(&a.k) {
                        return Err(SchemaError::layer(index, "k", format!("{} outside 1..={MAX_K}", a.k)));
                    }
                    if (1u64 << a.k) >= codec.field().modulus() {
                        return Err(SchemaError::layer(index, "k", "table larger than the field"));
                    }
                    if input_scale + a.range_log2 + 1 > room {
                        return Err(SchemaError::layer(index, "range_log2", "input range overflows the field"));
                    }
                    let t = trunc_bits_for(input_scale, a.range_log2, a.k);
                    let spec = QuantSpec::new(a.function, a.k, t)
                        .map_err(|e| SchemaError::layer(index, "k", e.to_string()))?
                        .with_input_scale(input_scale);
                    scale = f;
                    PlanStep::Activation(spec)
                }
            };
            plan.push(PlannedLayer {
                index,
                input,
                output: shape,
                input_scale_bits: input_scale,
                output_scale_bits: scale,
                step,
            });
        }
        if !shape.is_flat() || shape.len() != self.num_classes {
            return Err(SchemaError::top(
                "num_classes",
                format!("network output {shape} does not match {} classes", self.num_classes),
            ));
        }
        Ok(CompiledModel { graph: self.clone(), codec, plan })
    }

    /// Same network with every activation set to precision `k`.
    pub fn with_uniform_k(&self, k: u32) -> ModelGraph {
        let mut m = self.clone();
        for l in &mut m.layers {
            if let Layer::Activation(a) = l {
                a.k = k;
            }
        }
        m
    }

    /// Linear layers that run as protocol steps (flatten excluded).
    pub fn linear_layer_count(&self) -> usize {
        self.layers.iter().filter(|l| matches!(l, Layer::Linear(s) if s.kind.is_protocol_step())).count()
    }

    pub fn activation_layer_count(&self) -> usize {
        self.layers.iter().filter(|l| matches!(l, Layer::Activation(_))).count()
    }

    /// SHA-256 of the canonical architecture description. Weights are not
    /// included, so a client holding only the architecture computes the
    /// same value as the server.
    pub fn architecture_hash(&self) -> [u8; 32] {
        let doc = self.to_json_value(false);
        let bytes = serde_json::to_vec(&doc).expect("serializable");
        Sha256::digest(&bytes).into()
    }

    pub fn to_json_value(&self, with_weights: bool) -> Value {
        let layers: Vec<Value> = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Activation(a) => json!({
                    "type": "activation",
                    "function": a.function.name(),
                    "k": a.k,
                    "range_log2": a.range_log2,
                }),
                Layer::Linear(spec) => {
                    let mut obj = match serde_json::to_value(spec.kind).expect("serializable") {
                        Value::Object(m) => m,
                        _ => unreachable!(),
                    };
                    if with_weights && !matches!(spec.kind, LinearKind::AvgPool { .. } | LinearKind::Flatten) {
                        obj.insert("weights".into(), Value::String(encode_f32_blob(&spec.weights)));
                        if let Some(b) = &spec.bias {
                            obj.insert("bias".into(), Value::String(encode_f32_blob(b)));
                        }
                    } else if spec.bias.is_some() {
                        obj.insert("has_bias".into(), Value::Bool(true));
                    }
                    Value::Object(obj)
                }
            })
            .collect();
        json!({
            "format": MODEL_FORMAT,
            "version": SCHEMA_VERSION,
            "name": self.name,
            "codec": { "scale_bits": self.codec.scale_bits, "bound": self.codec.bound, "modulus": self.codec.modulus },
            "input_shape": shape_to_json(self.input_shape),
            "num_classes": self.num_classes,
            "layers": layers,
        })
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&self.to_json_value(self.has_weights)).expect("serializable")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), SchemaError> {
        let path = path.as_ref();
        fs::write(path, self.to_json_string() + "\n")
            .map_err(|source| SchemaError::Io { path: path.display().to_string(), source })
    }

    /// Parses a full model (weights required).
    pub fn from_json_str(s: &str) -> Result<Self, SchemaError> {
        parse_model(&serde_json::from_str(s)?, true)
    }

    /// Parses a model, tolerating missing weight blobs.
    pub fn architecture_from_json_str(s: &str) -> Result<Self, SchemaError> {
        parse_model(&serde_json::from_str(s)?, false)
    }
}

fn shape_to_json(s: Shape) -> Value {
    if s.is_flat() {
        json!([s.c])
    } else {
        json!([s.c, s.h, s.w])
    }
}

fn shape_from_json(v: &Value, field: &str) -> Result<Shape, SchemaError> {
    let dims: Vec<usize> = serde_json::from_value(v.clone())
        .map_err(|_| SchemaError::top(field, "expected an array of positive integers"))?;
    let shape = match dims.as_slice() {
        [n] => Shape::vector(*n),
        [c, h, w] => Shape::image(*c, *h, *w),
        _ => return Err(SchemaError::top(field, "expected [n] or [c, h, w]")),
    };
    if shape.is_empty() {
        return Err(SchemaError::top(field, "empty shape"));
    }
    Ok(shape)
}

pub fn encode_f32_blob(values: &[f32]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    B64.encode(bytes)
}

pub fn decode_f32_blob(s: &str) -> Result<Vec<f32>, String> {
    let bytes = B64.decode(s).map_err(|e| format!("bad base64: {e}"))?;
    if bytes.len() % 4 != 0 {
        return Err(format!("blob of {} bytes is not a float32 array", bytes.len()));
    }
    let vals: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    if let Some(v) = vals.iter().find(|v| !v.is_finite()) {
        return Err(format!("non-finite value {v}"));
    }
    Ok(vals)
}

fn check_header<'a>(doc: &'a Value, format: &str) -> Result<&'a Map<String, Value>, SchemaError> {
    let obj = doc.as_object().ok_or_else(|| SchemaError::top("format", "document is not an object"))?;
    match obj.get("format").and_then(Value::as_str) {
        Some(f) if f == format => {}
        other => return Err(SchemaError::top("format", format!("expected \"{format}\", got {other:?}"))),
    }
    match obj.get("version").and_then(Value::as_u64) {
        Some(SCHEMA_VERSION) => {}
        other => return Err(SchemaError::top("version", format!("unsupported version {other:?}"))),
    }
    Ok(obj)
}

fn get_usize(obj: &Map<String, Value>, layer: usize, field: &str) -> Result<usize, SchemaError> {
    obj.get(field)
        .and_then(Value::as_u64)
        .map(|v| v as usize)
        .ok_or_else(|| SchemaError::layer(layer, field, "missing or not a non-negative integer"))
}

fn get_blob(
    obj: &Map<String, Value>,
    layer: usize,
    field: &str,
    expected: usize,
    bound: f64,
) -> Result<Option<Vec<f32>>, SchemaError> {
    let Some(v) = obj.get(field) else { return Ok(None) };
    let s = v.as_str().ok_or_else(|| SchemaError::layer(layer, field, "expected a base64 string"))?;
    let vals = decode_f32_blob(s).map_err(|m| SchemaError::layer(layer, field, m))?;
    if vals.len() != expected {
        return Err(SchemaError::layer(layer, field, format!("expected {expected} values, got {}", vals.len())));
    }
    if let Some(w) = vals.iter().find(|w| w.abs() as f64 > bound) {
        return Err(SchemaError::layer(layer, field, format!("magnitude {w} exceeds codec bound {bound}")));
    }
    Ok(Some(vals))
}

fn parse_layer(v: &Value, index: usize, require_weights: bool, bound: f64) -> Result<Layer, SchemaError> {
    let obj = v.as_object().ok_or_else(|| SchemaError::layer(index, "type", "layer is not an object"))?;
    let ty = obj.get("type").and_then(Value::as_str).ok_or_else(|| SchemaError::layer(index, "type", "missing"))?;
    let kind = match ty {
        "activation" => {
            let name = obj
                .get("function")
                .and_then(Value::as_str)
                .ok_or_else(|| SchemaError::layer(index, "function", "missing"))?;
            let function = ActivationFn::from_name(name)
                .ok_or_else(|| SchemaError::layer(index, "function", format!("unknown activation `{name}`")))?;
            let k = get_usize(obj, index, "k")? as u32;
            if !(1..=MAX_K).contains(&k) {
                return Err(SchemaError::layer(index, "k", format!("{k} outside 1..={MAX_K}")));
            }
            let range_log2 = get_usize(obj, index, "range_log2")? as u32;
            return Ok(Layer::Activation(ActivationLayer { function, k, range_log2 }));
        }
        "dense" => {
            LinearKind::Dense { inputs: get_usize(obj, index, "inputs")?, outputs: get_usize(obj, index, "outputs")? }
        }
        "conv2d" => LinearKind::Conv2d {
            in_channels: get_usize(obj, index, "in_channels")?,
            out_channels: get_usize(obj, index, "out_channels")?,
            kernel: get_usize(obj, index, "kernel")?,
            stride: get_usize(obj, index, "stride")?,
            padding: get_usize(obj, index, "padding")?,
        },
        "avgpool" => {
            LinearKind::AvgPool { size: get_usize(obj, index, "size")?, stride: get_usize(obj, index, "stride")? }
        }
        "flatten" => LinearKind::Flatten,
        other => return Err(SchemaError::layer(index, "type", format!("unknown layer type `{other}`"))),
    };
    let has_params = matches!(kind, LinearKind::Dense { .. } | LinearKind::Conv2d { .. });
    let (weights, bias) = if has_params {
        let w = get_blob(obj, index, "weights", kind.weight_count(), bound)?;
        let b = get_blob(obj, index, "bias", kind.bias_count(), bound)?;
        match w {
            Some(w) => (w, b),
            None if require_weights => return Err(SchemaError::layer(index, "weights", "missing")),
            None => {
                let has_bias = obj.get("has_bias").and_then(Value::as_bool).unwrap_or(false) || b.is_some();
                (vec![0.0; kind.weight_count()], has_bias.then(|| vec![0.0; kind.bias_count()]))
            }
        }
    } else {
        (Vec::new(), None)
    };
    Ok(Layer::Linear(LinearLayerSpec { kind, weights, bias }))
}

fn parse_model(doc: &Value, require_weights: bool) -> Result<ModelGraph, SchemaError> {
    let obj = check_header(doc, MODEL_FORMAT)?;
    let name = obj.get("name").and_then(Value::as_str).unwrap_or("unnamed").to_string();
    let codec = match obj.get("codec") {
        Some(c) => serde_json::from_value(c.clone()).map_err(|e| SchemaError::top("codec", e.to_string()))?,
        None => CodecConfig::default(),
    };
    let input_shape = shape_from_json(obj.get("input_shape").unwrap_or(&Value::Null), "input_shape")?;
    let num_classes = obj
        .get("num_classes")
        .and_then(Value::as_u64)
        .ok_or_else(|| SchemaError::top("num_classes", "missing or not an integer"))? as usize;
    let layers_v = obj
        .get("layers")
        .and_then(Value::as_array)
        .ok_or_else(|| SchemaError::top("layers", "missing or not an array"))?;
    let CodecConfig { bound, .. } = codec;
    let mut layers = Vec::with_capacity(layers_v.len());
    let mut has_weights = true;
    for (i, l) in layers_v.iter().enumerate() {
        if let Some(o) = l.as_object() {
            if matches!(o.get("type").and_then(Value::as_str), Some("dense" | "conv2d")) && !o.contains_key("weights") {
                has_weights = false;
            }
        }
        layers.push(parse_layer(l, i, require_weights, bound)?);
    }
    let graph = ModelGraph { name, codec, input_shape, num_classes, layers, has_weights };
    graph.compile()?;
    Ok(graph)
}

fn read_text(path: &Path) -> Result<String, SchemaError> {
    fs::read_to_string(path).map_err(|source| SchemaError::Io { path: path.display().to_string(), source })
}

/// Loads and validates a model file, or a built-in model named
/// `builtin:<name>`.
pub fn load_model(path: impl AsRef<Path>) -> Result<ModelGraph, SchemaError> {
    let path = path.as_ref();
    if let Some(name) = path.to_str().and_then(|s| s.strip_prefix("builtin:")) {
        return builtin_model(name);
    }
    ModelGraph::from_json_str(&read_text(path)?)
}

/// Like [`load_model`] but accepts architecture-only files.
pub fn load_architecture(path: impl AsRef<Path>) -> Result<ModelGraph, SchemaError> {
    let path = path.as_ref();
    if let Some(name) = path.to_str().and_then(|s| s.strip_prefix("builtin:")) {
        return builtin_model(name);
    }
    ModelGraph::architecture_from_json_str(&read_text(path)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub input_shape: Shape,
    pub num_classes: usize,
    pub inputs: Vec<Vec<f32>>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn to_json_string(&self) -> String {
        let flat: Vec<f32> = self.inputs.iter().flatten().copied().collect();
        serde_json::to_string_pretty(&json!({
            "format": DATASET_FORMAT,
            "version": SCHEMA_VERSION,
            "input_shape": shape_to_json(self.input_shape),
            "num_classes": self.num_classes,
            "inputs": encode_f32_blob(&flat),
            "labels": self.labels,
        }))
        .expect("serializable")
    }

    pub fn from_json_str(s: &str) -> Result<Self, SchemaError> {
        let doc: Value = serde_json::from_str(s)?;
        let obj = check_header(&doc, DATASET_FORMAT)?;
        let input_shape = shape_from_json(obj.get("input_shape").unwrap_or(&Value::Null), "input_shape")?;
        let num_classes =
            obj.get("num_classes")
                .and_then(Value::as_u64)
                .ok_or_else(|| SchemaError::top("num_classes", "missing or not an integer"))? as usize;
        let labels: Vec<usize> = serde_json::from_value(obj.get("labels").cloned().unwrap_or(Value::Null))
            .map_err(|_| SchemaError::top("labels", "expected an array of class indices"))?;
        if let Some(l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(SchemaError::top("labels", format!("label {l} >= {num_classes} classes")));
        }
        let blob = obj
            .get("inputs")
            .and_then(Value::as_str)
            .ok_or_else(|| SchemaError::top("inputs", "expected a base64 float32 blob"))?;
        let flat = decode_f32_blob(blob).map_err(|m| SchemaError::top("inputs", m))?;
        let n = input_shape.len();
        if flat.len() != n * labels.len() {
            return Err(SchemaError::top(
                "inputs",
                format!("{} values for {} samples of {n}", flat.len(), labels.len()),
            ));
        }
        let inputs = flat.chunks(n).map(<[f32]>::to_vec).collect();
        Ok(Dataset { input_shape, num_classes, inputs, labels })
    }
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset, SchemaError> {
    Dataset::from_json_str(&read_text(path.as_ref())?)
}

/// Double-precision reference forward pass.
pub fn plaintext_infer_float(model: &ModelGraph, input: &[f32]) -> Vec<f64> {
    assert_eq!(input.len(), model.input_shape.len(), "input length");
    let mut x: Vec<f64> = input.iter().map(|&v| v as f64).collect();
    let mut shape = model.input_shape;
    for layer in &model.layers {
        match layer {
            Layer::Activation(a) => x.iter_mut().for_each(|v| *v = a.function.apply(*v)),
            Layer::Linear(spec) => {
                let out = spec.kind.output_shape(shape).expect("validated model");
                x = float_linear(spec, shape, out, &x);
                shape = out;
            }
        }
    }
    x
}

fn float_linear(spec: &LinearLayerSpec, input: Shape, output: Shape, x: &[f64]) -> Vec<f64> {
    let w = |i: usize| spec.weights[i] as f64;
    let mut y = match spec.kind {
        LinearKind::Flatten => return x.to_vec(),
        LinearKind::Dense { inputs, outputs } => {
            (0..outputs).map(|o| (0..inputs).map(|i| w(o * inputs + i) * x[i]).sum()).collect::<Vec<f64>>()
        }
        LinearKind::Conv2d { in_channels, out_channels, kernel, stride, padding } => {
            let mut y = vec![0.0; output.len()];
            for oc in 0..out_channels {
                for oy in 0..output.h {
                    for ox in 0..output.w {
                        let mut acc = 0.0;
                        for ic in 0..in_channels {
                            for ky in 0..kernel {
                                for kx in 0..kernel {
                                    let iy = (oy * stride + ky) as isize - padding as isize;
                                    let ix = (ox * stride + kx) as isize - padding as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < input.h && (ix as usize) < input.w {
                                        acc += w(((oc * in_channels + ic) * kernel + ky) * kernel + kx)
                                            * x[(ic * input.h + iy as usize) * input.w + ix as usize];
                                    }
                                }
                            }
                        }
                        y[(oc * output.h + oy) * output.w + ox] = acc;
                    }
                }
            }
            y
        }
        LinearKind::AvgPool { size, stride } => {
            let mut y = vec![0.0; output.len()];
            let area = (size * size) as f64;
            for c in 0..output.c {
                for oy in 0..output.h {
                    for ox in 0..output.w {
                        let mut acc = 0.0;
                        for ky in 0..size {
                            for kx in 0..size {
                                acc += x[(c * input.h + oy * stride + ky) * input.w + ox * stride + kx];
                            }
                        }
                        y[(c * output.h + oy) * output.w + ox] = acc / area;
                    }
                }
            }
            y
        }
    };
    if let Some(b) = &spec.bias {
        let spatial = output.h * output.w;
        for (i, v) in y.iter_mut().enumerate() {
            *v += b[i / spatial] as f64;
        }
    }
    y
}

/// Variants of the field-exact oracle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleMode {
    /// What the protocol computes with exact truncation: `floor(x/d)`,
    /// wrapped into the signed `k`-bit domain, then the table value.
    #[default]
    Protocol,
    /// Same divisor, no `k`-bit wrap: the unquantized fixed-point network.
    Unbounded,
    /// No truncation at all (`d = 1`): the activation sees the full-scale
    /// integer and re-encodes its result at scale `f`.
    Untruncated,
}

/// Field logits plus the scale needed to read them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantizedLogits {
    pub logits: Vec<FieldElement>,
    pub scale_bits: u32,
}

impl QuantizedLogits {
    pub fn decode(&self, codec: &FixedPointCodec) -> Vec<f64> {
        self.logits.iter().map(|&v| codec.decode_at(v, self.scale_bits)).collect()
    }

    pub fn argmax(&self, field: &FieldParams) -> usize {
        argmax_signed(&self.logits, field)
    }
}

/// Index of the largest centered value; the first one on ties.
pub fn argmax_signed(values: &[FieldElement], field: &FieldParams) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if field.to_signed(*v) > field.to_signed(values[best]) {
            best = i;
        }
    }
    best
}

pub fn argmax_f64(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

impl CompiledModel {
    pub fn field(&self) -> &FieldParams {
        self.codec.field()
    }

    pub fn encode_input(&self, input: &[f32]) -> Result<Vec<FieldElement>, crate::field::FieldError> {
        input.iter().map(|&v| self.codec.encode(v as f64)).collect()
    }

    pub fn output_scale_bits(&self) -> u32 {
        self.plan.last().map_or(self.codec.scale_bits(), |l| l.output_scale_bits)
    }

    /// Total activations per inference, `N_a`.
    pub fn activation_count(&self) -> u64 {
        self.plan.iter().filter(|l| matches!(l.step, PlanStep::Activation(_))).map(|l| l.input.len() as u64).sum()
    }

    /// Per-party table bytes, summed over activation layers.
    pub fn table_storage_bytes(&self) -> u64 {
        self.plan
            .iter()
            .filter_map(|l| match &l.step {
                PlanStep::Activation(q) => Some(table_storage_bytes(q.k, l.input.len() as u64)),
                _ => None,
            })
            .sum()
    }

    /// Online payload bytes, both directions, excluding the handshake:
    /// `8 * in_len` per linear layer, `16` per activation, `8` per logit.
    pub fn online_payload_bytes(&self) -> u64 {
        let linear: u64 =
            self.plan.iter().filter(|l| matches!(l.step, PlanStep::Linear(_))).map(|l| 8 * l.input.len() as u64).sum();
        linear + 16 * self.activation_count() + 8 * self.graph.num_classes as u64
    }

    pub fn linear_rounds(&self) -> u64 {
        self.plan.iter().filter(|l| matches!(l.step, PlanStep::Linear(_))).count() as u64
    }

    pub fn activation_rounds(&self) -> u64 {
        self.plan.iter().filter(|l| matches!(l.step, PlanStep::Activation(_))).count() as u64
    }

    pub fn infer_quantized(
        &self,
        input: &[f32],
        mode: OracleMode,
    ) -> Result<QuantizedLogits, crate::field::FieldError> {
        let field = *self.field();
        let mut x = self.encode_input(input)?;
        for layer in &self.plan {
            match &layer.step {
                PlanStep::Flatten => {}
                PlanStep::Linear(op) => x = op.apply_with_bias(&x, &field),
                PlanStep::Activation(spec) => {
                    x = x.iter().map(|&v| self.activation_value(v, spec, mode)).collect();
                }
            }
        }
        Ok(QuantizedLogits { logits: x, scale_bits: self.output_scale_bits() })
    }

    fn activation_value(&self, v: FieldElement, spec: &QuantSpec, mode: OracleMode) -> FieldElement {
        let xi = self.field().to_signed(v);
        match mode {
            OracleMode::Protocol => {
                quantized_activation(wrap_to_domain(floor_div(xi, spec.divisor()), spec.k), spec, &self.codec)
            }
            OracleMode::Unbounded => quantized_activation(floor_div(xi, spec.divisor()), spec, &self.codec),
            OracleMode::Untruncated => {
                let exact = QuantSpec { trunc_bits: 0, ..*spec };
                quantized_activation(xi, &exact, &self.codec)
            }
        }
    }

    /// Fraction of dataset samples whose oracle argmax equals the label.
    pub fn accuracy(&self, data: &Dataset, mode: OracleMode) -> f64 {
        let field = *self.field();
        let hit = |(x, &y): (&Vec<f32>, &usize)| -> bool {
            self.infer_quantized(x, mode).map(|q| q.argmax(&field) == y).unwrap_or(false)
        };
        #[cfg(feature = "parallel")]
        let correct = {
            use rayon::prelude::*;
            data.inputs.par_iter().zip(data.labels.par_iter()).filter(|&p| hit(p)).count()
        };
        #[cfg(not(feature = "parallel"))]
        let correct = data.inputs.iter().zip(data.labels.iter()).filter(|&p| hit(p)).count();
        if data.is_empty() {
            0.0
        } else {
            correct as f64 / data.len() as f64
        }
    }
}

/// Field-exact oracle of the protocol with exact truncation.
pub fn plaintext_infer_quantized(model: &ModelGraph, input: &[f32]) -> Result<QuantizedLogits, SchemaError> {
    plaintext_infer_quantized_with(model, input, OracleMode::Protocol)
}

pub fn plaintext_infer_quantized_with(
    model: &ModelGraph,
    input: &[f32],
    mode: OracleMode,
) -> Result<QuantizedLogits, SchemaError> {
    let compiled = model.compile()?;
    if input.len() != model.input_shape.len() {
        return Err(SchemaError::top(
            "input",
            format!("expected {} values, got {}", model.input_shape.len(), input.len()),
        ));
    }
    compiled.infer_quantized(input, mode).map_err(|e| SchemaError::top("input", e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRow {
    pub k: u32,
    pub accuracy: f64,
    pub table_bytes_per_party: u64,
    pub comm_bytes_online: u64,
}

/// Accuracy and cost for each uniform activation precision in `k_list`.
pub fn quant_sweep(model: &ModelGraph, data: &Dataset, k_list: &[u32]) -> Result<Vec<SweepRow>, SchemaError> {
    if data.is_empty() {
        return Err(SchemaError::top("inputs", "dataset is empty"));
    }
    if data.input_shape.len() != model.input_shape.len() {
        return Err(SchemaError::top("input_shape", "dataset does not match the model input"));
    }
    k_list
        .iter()
        .map(|&k| {
            let compiled = model.with_uniform_k(k).compile()?;
            Ok(SweepRow {
                k,
                accuracy: compiled.accuracy(data, OracleMode::Protocol),
                table_bytes_per_party: compiled.table_storage_bytes(),
                comm_bytes_online: compiled.online_payload_bytes(),
            })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{},{:.6},{},{}\n", r.k, r.accuracy, r.table_bytes_per_party, r.comm_bytes_online));
    }
    out
}

/// Models constructed in memory, by name.
pub fn builtin_model(name: &str) -> Result<ModelGraph, SchemaError> {
    match name {
        "lenet58k" => Ok(lenet58k(0x1e_4e7)),
        other => Err(SchemaError::top("model", format!("unknown builtin `{other}`"))),
    }
}

/// LeNet-shaped chain with exactly 58,000 ReLUs and random weights:
/// conv 1->32 5x5 (25,088), pool, conv 32->160 3x3 (31,360), pool, pool,
/// dense 1440->1552 (1,552), dense 1552->10. For byte and round accounting.
pub fn lenet58k(seed: u64) -> ModelGraph {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut rand_w = |n: usize, fan_in: usize| -> Vec<f32> {
        let a = (1.0 / fan_in as f64).sqrt() as f32;
        (0..n).map(|_| rng.gen_range(-a..a)).collect()
    };
    let relu = Layer::Activation(ActivationLayer { function: ActivationFn::Relu, k: 4, range_log2: 3 });
    let conv = |cin, cout, kernel, padding, w: Vec<f32>| {
        Layer::Linear(LinearLayerSpec {
            kind: LinearKind::Conv2d { in_channels: cin, out_channels: cout, kernel, stride: 1, padding },
            weights: w,
            bias: Some(vec![0.0; cout]),
        })
    };
    let pool = || {
        Layer::Linear(LinearLayerSpec { kind: LinearKind::AvgPool { size: 2, stride: 2 }, weights: vec![], bias: None })
    };
    let dense = |i, o, w: Vec<f32>| {
        Layer::Linear(LinearLayerSpec {
            kind: LinearKind::Dense { inputs: i, outputs: o },
            weights: w,
            bias: Some(vec![0.0; o]),
        })
    };
    let layers = vec![
        conv(1, 32, 5, 2, rand_w(32 * 25, 25)),
        relu.clone(),
        pool(),
        conv(32, 160, 3, 1, rand_w(160 * 32 * 9, 32 * 9)),
        relu.clone(),
        pool(),
        pool(),
        Layer::Linear(LinearLayerSpec { kind: LinearKind::Flatten, weights: vec![], bias: None }),
        dense(1440, 1552, rand_w(1440 * 1552, 1440)),
        relu,
        dense(1552, 10, rand_w(15520, 1552)),
    ];
    ModelGraph {
        name: "lenet58k".into(),
        codec: CodecConfig::default(),
        input_shape: Shape::image(1, 28, 28),
        num_classes: 10,
        layers,
        has_weights: true,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn dense_layer(inputs: usize, outputs: usize, w: Vec<f32>, b: Option<Vec<f32>>) -> Layer {
        Layer::Linear(LinearLayerSpec { kind: LinearKind::Dense { inputs, outputs }, weights: w, bias: b })
    }

    fn relu(k: u32) -> Layer {
        Layer::Activation(ActivationLayer { function: ActivationFn::Relu, k, range_log2: 3 })
    }

    fn graph(input: usize, classes: usize, layers: Vec<Layer>) -> ModelGraph {
        ModelGraph {
            name: "t".into(),
            codec: CodecConfig::default(),
            input_shape: Shape::vector(input),
            num_classes: classes,
            layers,
            has_weights: true,
        }
    }

    fn minimal() -> ModelGraph {
        graph(2, 2, vec![dense_layer(2, 2, vec![1.0, -0.5, 0.25, 2.0], Some(vec![0.125, -1.0])), relu(8)])
    }

    #[test]
    fn minimal_model_round_trips() {
        let m = minimal();
        let s = m.to_json_string();
        let back = ModelGraph::from_json_str(&s).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_json_string(), s);
    }

    #[test]
    fn shape_inconsistent_chain_is_rejected() {
        let m =
            graph(2, 3, vec![dense_layer(2, 3, vec![0.0; 6], None), relu(8), dense_layer(4, 3, vec![0.0; 12], None)]);
        let err = ModelGraph::from_json_str(&m.to_json_string()).unwrap_err();
        assert!(matches!(&err, SchemaError::Layer { layer: 2, .. }), "{err}");
    }

    #[test]
    fn schema_errors_name_layer_and_field() {
        let mut doc = minimal().to_json_value(true);
        doc["layers"][1]["k"] = json!(17);
        let err = parse_model(&doc, true).unwrap_err();
        assert!(matches!(&err, SchemaError::Layer { layer: 1, field, .. } if field == "k"), "{err}");

        let mut doc = minimal().to_json_value(true);
        doc["layers"][0]["weights"] = json!(encode_f32_blob(&[1.0, 2.0, 3.0]));
        let err = parse_model(&doc, true).unwrap_err();
        assert!(matches!(&err, SchemaError::Layer { layer: 0, field, .. } if field == "weights"), "{err}");

        let mut doc = minimal().to_json_value(true);
        doc["layers"][0]["weights"] = json!(encode_f32_blob(&[1.0, 2.0, 3.0, 1e9]));
        let err = parse_model(&doc, true).unwrap_err();
        assert!(matches!(&err, SchemaError::Layer { layer: 0, field, .. } if field == "weights"), "{err}");

        let mut doc = minimal().to_json_value(true);
        doc["layers"][0]["type"] = json!("lstm");
        assert!(matches!(parse_model(&doc, true).unwrap_err(), SchemaError::Layer { layer: 0, .. }));

        let mut doc = minimal().to_json_value(true);
        doc["version"] = json!(2);
        assert!(matches!(parse_model(&doc, true).unwrap_err(), SchemaError::Top { .. }));
    }

    #[test]
    fn architecture_only_needs_no_weights() {
        let m = minimal();
        let arch = serde_json::to_string(&m.to_json_value(false)).unwrap();
        assert!(ModelGraph::from_json_str(&arch).is_err());
        let a = ModelGraph::architecture_from_json_str(&arch).unwrap();
        assert!(!a.has_weights);
        assert_eq!(a.architecture_hash(), m.architecture_hash());
        let c = a.compile().unwrap();
        assert_eq!(c.plan.len(), 2);
    }

    #[test]
    fn hash_changes_with_architecture() {
        let m = minimal();
        assert_ne!(m.architecture_hash(), m.with_uniform_k(7).architecture_hash());
    }

    #[test]
    fn scales_and_divisors() {
        let m =
            graph(4, 2, vec![dense_layer(4, 3, vec![0.0; 12], None), relu(16), dense_layer(3, 2, vec![0.0; 6], None)]);
        let c = m.compile().unwrap();
        assert_eq!(c.plan[0].output_scale_bits, 24);
        let PlanStep::Activation(q) = c.plan[1].step else { panic!() };
        // in 24 + range 3 + 1 - 16 = 12
        assert_eq!(q.trunc_bits, 12);
        assert_eq!(q.input_scale_bits, Some(24));
        assert_eq!(c.output_scale_bits(), 24);
        assert_eq!(c.activation_count(), 3);
        assert_eq!(c.table_storage_bytes(), (1 << 16) * 3 * 8);
        assert_eq!(c.online_payload_bytes(), 8 * 4 + 8 * 3 + 16 * 3 + 8 * 2);
    }

    #[test]
    fn too_many_linear_layers_without_activation() {
        let m = graph(1, 1, (0..4).map(|_| dense_layer(1, 1, vec![1.0], None)).collect());
        let err = m.compile().unwrap_err();
        assert!(matches!(err, SchemaError::Layer { layer: 3, .. }), "{err}");
    }

    #[test]
    fn identity_layer_float_logits_equal_input() {
        let m = graph(3, 3, vec![dense_layer(3, 3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.], None)]);
        assert_eq!(plaintext_infer_float(&m, &[0.5, -2.0, 3.25]), vec![0.5, -2.0, 3.25]);
    }

    #[test]
    fn relu_of_negative_preactivations_is_zero() {
        let m = graph(2, 2, vec![dense_layer(2, 2, vec![-1., 0., 0., -1.], None), relu(8)]);
        assert_eq!(plaintext_infer_float(&m, &[0.5, 2.0]), vec![0.0, 0.0]);
        let q = plaintext_infer_quantized(&m, &[0.5, 2.0]).unwrap();
        assert!(q.logits.iter().all(|v| *v == FieldElement::ZERO));
    }

    #[test]
    fn single_relu_at_minus_three_is_zero() {
        let m = graph(1, 1, vec![dense_layer(1, 1, vec![1.0], None), relu(8)]);
        // -3 at scale 2^24 truncated by 2^(24+3+1-8) lands on v = -3 * 2^4
        let q = plaintext_infer_quantized(&m, &[-3.0]).unwrap();
        assert_eq!(q.logits, vec![FieldElement::ZERO]);
        let q = plaintext_infer_quantized(&m, &[3.0]).unwrap();
        assert_eq!(q.decode(&FixedPointCodec::default()), vec![3.0]);
    }

    #[test]
    fn wrap_shows_up_only_in_protocol_mode() {
        let m = graph(1, 1, vec![dense_layer(1, 1, vec![1.0], None), relu(8)]);
        // range is [-8, 8); 9 wraps to -7 and the ReLU zeroes it
        let codec = FixedPointCodec::default();
        assert_eq!(plaintext_infer_quantized(&m, &[9.0]).unwrap().decode(&codec), vec![0.0]);
        let unbounded = plaintext_infer_quantized_with(&m, &[9.0], OracleMode::Unbounded).unwrap();
        assert_eq!(unbounded.decode(&codec), vec![9.0]);
    }

    #[test]
    fn lenet_has_58k_activations() {
        let c = lenet58k(1).compile().unwrap();
        assert_eq!(c.activation_count(), 58_000);
        assert_eq!(16 * c.activation_count(), 928_000);
        assert_eq!(c.linear_rounds(), 7);
        assert_eq!(c.activation_rounds(), 3);
    }

    #[test]
    fn dataset_round_trip_and_validation() {
        let d = Dataset {
            input_shape: Shape::vector(2),
            num_classes: 3,
            inputs: vec![vec![0.0, 1.0], vec![0.5, 0.25]],
            labels: vec![2, 0],
        };
        assert_eq!(Dataset::from_json_str(&d.to_json_string()).unwrap(), d);
        let mut bad: Value = serde_json::from_str(&d.to_json_string()).unwrap();
        bad["labels"] = json!([3, 0]);
        assert!(Dataset::from_json_str(&bad.to_string()).is_err());
        let mut bad: Value = serde_json::from_str(&d.to_json_string()).unwrap();
        bad["labels"] = json!([1]);
        assert!(Dataset::from_json_str(&bad.to_string()).is_err());
    }

    #[test]
    fn sweep_storage_doubles_and_csv_header() {
        let m =
            graph(2, 2, vec![dense_layer(2, 3, vec![0.5; 6], None), relu(8), dense_layer(3, 2, vec![0.25; 6], None)]);
        let d =
            Dataset { input_shape: Shape::vector(2), num_classes: 2, inputs: vec![vec![1.0, 0.0]], labels: vec![0] };
        let rows = quant_sweep(&m, &d, &[1, 2, 3, 4]).unwrap();
        for w in rows.windows(2) {
            assert_eq!(w[1].table_bytes_per_party, 2 * w[0].table_bytes_per_party);
        }
        assert_eq!(rows[0].table_bytes_per_party, 2 * 3 * 8);
        let csv = sweep_csv(&rows);
        assert!(csv.starts_with("k,accuracy,table_bytes_per_party,comm_bytes_online\n1,"));
    }

    /// Grid-exact layer: weights are multiples of 2^-6 with row L1 norm <= 1.
    fn grid_layer(rng: &mut ChaCha20Rng, n_in: usize, n_out: usize) -> (Vec<f32>, Vec<f32>) {
        let mut w = vec![0f32; n_in * n_out];
        for row in w.chunks_mut(n_in) {
            let mut budget = 64i32;
            for v in row.iter_mut() {
                let m = rng.gen_range(-4..=4).clamp(-budget, budget);
                budget -= m.abs();
                *v = m as f32 / 64.0;
            }
        }
        let b = (0..n_out).map(|_| rng.gen_range(-32..=32) as f32 / 64.0).collect();
        (w, b)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1_000))]

        /// d = 1 with no wrap agrees with the float path to within 2^-(f-1).
        #[test]
        fn untruncated_oracle_tracks_float(seed in any::<u64>()) {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let (w1, b1) = grid_layer(&mut rng, 8, 6);
            let (w2, b2) = grid_layer(&mut rng, 6, 4);
            let m = graph(8, 4, vec![dense_layer(8, 6, w1, Some(b1)), relu(8), dense_layer(6, 4, w2, Some(b2))]);
            let x: Vec<f32> = (0..8).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            let float = plaintext_infer_float(&m, &x);
            let q = plaintext_infer_quantized_with(&m, &x, OracleMode::Untruncated).unwrap();
            let tol = (-(FixedPointCodec::DEFAULT_SCALE_BITS as f64 - 1.0)).exp2();
            for (a, b) in q.decode(&FixedPointCodec::default()).iter().zip(&float) {
                prop_assert!((a - b).abs() <= tol, "{a} vs {b}");
            }
        }

        /// Linear + ReLU with truncation by 2^f stays within 2^-(f-2) of the
        /// double-precision reference.
        #[test]
        fn fixed_point_drift_is_bounded(seed in any::<u64>(), n_in in 1usize..64, n_out in 1usize..64) {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let (w, b) = grid_layer(&mut rng, n_in, n_out);
            let m = graph(n_in, n_out, vec![dense_layer(n_in, n_out, w, Some(b)), relu(16)]);
            let x: Vec<f32> = (0..n_in).map(|_| rng.gen_range(-2.0f32..2.0)).collect();
            let float = plaintext_infer_float(&m, &x);
            let q = plaintext_infer_quantized(&m, &x).unwrap();
            let tol = (-(FixedPointCodec::DEFAULT_SCALE_BITS as f64 - 2.0)).exp2();
            for (a, b) in q.decode(&FixedPointCodec::default()).iter().zip(&float) {
                prop_assert!((a - b).abs() <= tol, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn oracles_are_deterministic() {
        let m = lenet58k(3);
        let input: Vec<f32> = (0..784).map(|i| (i % 17) as f32 / 17.0).collect();
        let c = m.compile().unwrap();
        let a = c.infer_quantized(&input, OracleMode::Protocol).unwrap();
        let b = c.infer_quantized(&input, OracleMode::Protocol).unwrap();
        assert_eq!(a, b);
        assert_eq!(plaintext_infer_float(&m, &input), plaintext_infer_float(&m, &input));
    }
}
