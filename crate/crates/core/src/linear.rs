//! Linear layers over shares.
//!
//! The dealer hands the client a mask `r_c` and `u = W r_c + r_s`, and the
//! server `r_s`. Online the client sends `[x]_0 + r_c`; the server adds its
//! own share, evaluates `W (x + r_c) + r_s + b` and keeps that as its output
//! share, while the client's output share is `-u`. The two reconstruct to
//! `W x + b` exactly.
//!
//! Convolutions run through im2col lowering on the server after unmasking,
//! so the masked message always has the true input length.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{elements_to_le_bytes, FieldElement, FieldError, FieldParams, FixedPointCodec};
use crate::sharing::{random_element, AdditiveShare, PartyRole};
use crate::transport::{decode_elements, Channel, Tag, TransportError};

#[derive(Debug, Error)]
pub enum LinearError {
    #[error("preprocessing for layer {0} was already used")]
    StalePreproc(u32),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid layer geometry: {0}")]
    Geometry(String),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Transport(#[from] TransportError),
}

/// Tensor shape in CHW order; vectors are `(n, 1, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn vector(n: usize) -> Self {
        Shape { c: n, h: 1, w: 1 }
    }

    pub fn image(c: usize, h: usize, w: usize) -> Self {
        Shape { c, h, w }
    }

    pub fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_flat(&self) -> bool {
        self.h == 1 && self.w == 1
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.is_flat() {
            write!(f, "[{}]", self.c)
        } else {
            write!(f, "[{}, {}, {}]", self.c, self.h, self.w)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LinearKind {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    #[serde(rename = "avgpool")]
    AvgPool {
        size: usize,
        stride: usize,
    },
    Flatten,
}

impl LinearKind {
    pub fn name(&self) -> &'static str {
        match self {
            LinearKind::Dense { .. } => "dense",
            LinearKind::Conv2d { .. } => "conv2d",
            LinearKind::AvgPool { .. } => "avgpool",
            LinearKind::Flatten => "flatten",
        }
    }

    /// Output shape for a given input, checking the standard size formulas.
    pub fn output_shape(&self, input: Shape) -> Result<Shape, String> {
        match *self {
            LinearKind::Dense { inputs, outputs } => {
                if !input.is_flat() {
                    return Err(format!("dense layer needs a flat input, got {input}"));
                }
                if input.len() != inputs {
                    return Err(format!("dense expects {inputs} inputs, got {}", input.len()));
                }
                if outputs == 0 {
                    return Err("dense layer with zero outputs".into());
                }
                Ok(Shape::vector(outputs))
            }
            LinearKind::Conv2d { in_channels, out_channels, kernel, stride, padding } => {
                if input.c != in_channels {
                    return Err(format!("conv2d expects {in_channels} channels, got {}", input.c));
                }
                if kernel == 0 || stride == 0 || out_channels == 0 {
                    return Err("conv2d kernel, stride and channels must be positive".into());
                }
                let oh = conv_out(input.h, kernel, stride, padding)?;
                let ow = conv_out(input.w, kernel, stride, padding)?;
                Ok(Shape::image(out_channels, oh, ow))
            }
            LinearKind::AvgPool { size, stride } => {
                if size == 0 || stride == 0 {
                    return Err("avgpool size and stride must be positive".into());
                }
                let oh = conv_out(input.h, size, stride, 0)?;
                let ow = conv_out(input.w, size, stride, 0)?;
                Ok(Shape::image(input.c, oh, ow))
            }
            LinearKind::Flatten => Ok(Shape::vector(input.len())),
        }
    }

    pub fn weight_count(&self) -> usize {
        match *self {
            LinearKind::Dense { inputs, outputs } => inputs * outputs,
            LinearKind::Conv2d { in_channels, out_channels, kernel, .. } => {
                out_channels * in_channels * kernel * kernel
            }
            LinearKind::AvgPool { .. } | LinearKind::Flatten => 0,
        }
    }

    pub fn bias_count(&self) -> usize {
        match *self {
            LinearKind::Dense { outputs, .. } => outputs,
            LinearKind::Conv2d { out_channels, .. } => out_channels,
            LinearKind::AvgPool { .. } | LinearKind::Flatten => 0,
        }
    }

    /// Whether the layer runs as a protocol step (flatten is a local reshape).
    pub fn is_protocol_step(&self) -> bool {
        !matches!(self, LinearKind::Flatten)
    }
}

fn conv_out(n: usize, k: usize, stride: usize, pad: usize) -> Result<usize, String> {
    if n + 2 * pad < k {
        return Err(format!("window {k} larger than padded extent {}", n + 2 * pad));
    }
    Ok((n + 2 * pad - k) / stride + 1)
}

/// A linear layer as stored in the model: real-valued weights.
///
/// Dense weights are row-major `[outputs][inputs]`; conv weights are
/// `[out_channels][in_channels][kernel][kernel]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayerSpec {
    pub kind: LinearKind,
    pub weights: Vec<f32>,
    pub bias: Option<Vec<f32>>,
}

/// Geometry of a windowed operator over a CHW input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub input: Shape,
    pub output: Shape,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Window {
    /// Input offset for output position `(oy, ox)`, kernel tap `(ky, kx)`
    /// and input channel `c`; `None` inside the zero padding.
    #[inline]
    fn tap(&self, c: usize, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
        let ix = (ox * self.stride + kx) as isize - self.padding as isize;
        if iy < 0 || ix < 0 || iy >= self.input.h as isize || ix >= self.input.w as isize {
            return None;
        }
        Some((c * self.input.h + iy as usize) * self.input.w + ix as usize)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FieldOp {
    /// Row-major `[out][in]`.
    Dense { matrix: Vec<FieldElement> },
    /// Kernel matrix `[out_channels][in_channels * kernel * kernel]`.
    Conv { kernel: Vec<FieldElement>, window: Window },
    /// Every window element carries the same encoded weight `1/size^2`.
    AvgPool { weight: FieldElement, window: Window },
}

/// A linear layer lowered to field arithmetic at a known input scale.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldLinear {
    pub op: FieldOp,
    pub bias: Option<Vec<FieldElement>>,
    pub input: Shape,
    pub output: Shape,
    pub input_scale_bits: u32,
    pub output_scale_bits: u32,
}

impl FieldLinear {
    /// Encodes a layer's weights at the codec scale and its bias at the
    /// output scale `input_scale_bits + f`.
    pub fn lower(
        spec: &LinearLayerSpec,
        input: Shape,
        input_scale_bits: u32,
        codec: &FixedPointCodec,
    ) -> Result<Self, LinearError> {
        let output = spec.kind.output_shape(input).map_err(LinearError::Geometry)?;
        let f = codec.scale_bits();
        let output_scale_bits = input_scale_bits + f;
        let encode_all = |ws: &[f32]| -> Result<Vec<FieldElement>, LinearError> {
            ws.iter().map(|&w| Ok(codec.encode(w as f64)?)).collect()
        };
        let op = match spec.kind {
            LinearKind::Dense { .. } => FieldOp::Dense { matrix: encode_all(&spec.weights)? },
            LinearKind::Conv2d { kernel, stride, padding, .. } => FieldOp::Conv {
                kernel: encode_all(&spec.weights)?,
                window: Window { input, output, kernel, stride, padding },
            },
            LinearKind::AvgPool { size, stride } => FieldOp::AvgPool {
                weight: codec.encode(1.0 / (size * size) as f64)?,
                window: Window { input, output, kernel: size, stride, padding: 0 },
            },
            LinearKind::Flatten => {
                return Err(LinearError::Geometry("flatten has no field lowering".into()));
            }
        };
        if spec.weights.len() != spec.kind.weight_count() {
            return Err(LinearError::DimensionMismatch { expected: spec.kind.weight_count(), got: spec.weights.len() });
        }
        let bias = match &spec.bias {
            Some(b) => {
                if b.len() != spec.kind.bias_count() {
                    return Err(LinearError::DimensionMismatch { expected: spec.kind.bias_count(), got: b.len() });
                }
                let per_channel =
                    b.iter().map(|&v| codec.encode_at(v as f64, output_scale_bits)).collect::<Result<Vec<_>, _>>()?;
                let spatial = output.h * output.w;
                Some(per_channel.iter().flat_map(|&v| std::iter::repeat_n(v, spatial)).collect())
            }
            None => None,
        };
        Ok(FieldLinear { op, bias, input, output, input_scale_bits, output_scale_bits })
    }

    pub fn in_len(&self) -> usize {
        self.input.len()
    }

    pub fn out_len(&self) -> usize {
        self.output.len()
    }

    /// `W x` without bias.
    pub fn apply(&self, x: &[FieldElement], field: &FieldParams) -> Vec<FieldElement> {
        assert_eq!(x.len(), self.in_len(), "input length");
        match &self.op {
            FieldOp::Dense { matrix } => matrix.chunks(self.in_len()).map(|row| field.dot(row, x)).collect(),
            FieldOp::Conv { kernel, window } => {
                let cols = im2col(x, window);
                let positions = window.output.h * window.output.w;
                let k = kernel.len() / window.output.c;
                let mut out = Vec::with_capacity(self.out_len());
                for row in kernel.chunks(k) {
                    out.extend(cols.chunks(k).take(positions).map(|patch| field.dot(row, patch)));
                }
                out
            }
            FieldOp::AvgPool { weight, window } => {
                let mut out = Vec::with_capacity(self.out_len());
                for c in 0..window.output.c {
                    for oy in 0..window.output.h {
                        for ox in 0..window.output.w {
                            let mut acc = FieldElement::ZERO;
                            for ky in 0..window.kernel {
                                for kx in 0..window.kernel {
                                    if let Some(i) = window.tap(c, oy, ox, ky, kx) {
                                        acc = field.add(acc, x[i]);
                                    }
                                }
                            }
                            out.push(field.mul(acc, *weight));
                        }
                    }
                }
                out
            }
        }
    }

    /// `W x + b`.
    pub fn apply_with_bias(&self, x: &[FieldElement], field: &FieldParams) -> Vec<FieldElement> {
        let mut y = self.apply(x, field);
        if let Some(b) = &self.bias {
            for (yi, bi) in y.iter_mut().zip(b) {
                *yi = field.add(*yi, *bi);
            }
        }
        y
    }

    /// The equivalent explicit matrix, row-major `[out_len][in_len]`.
    /// Intended for small layers and for checking the lowering.
    pub fn to_dense_matrix(&self) -> Vec<FieldElement> {
        let (n_in, n_out) = (self.in_len(), self.out_len());
        let mut m = vec![FieldElement::ZERO; n_in * n_out];
        match &self.op {
            FieldOp::Dense { matrix } => m.copy_from_slice(matrix),
            FieldOp::Conv { kernel, window } => {
                let kk = window.kernel * window.kernel;
                let per_out = window.input.c * kk;
                let positions = window.output.h * window.output.w;
                for oc in 0..window.output.c {
                    for oy in 0..window.output.h {
                        for ox in 0..window.output.w {
                            let row = oc * positions + oy * window.output.w + ox;
                            for ic in 0..window.input.c {
                                for ky in 0..window.kernel {
                                    for kx in 0..window.kernel {
                                        if let Some(i) = window.tap(ic, oy, ox, ky, kx) {
                                            m[row * n_in + i] =
                                                kernel[oc * per_out + ic * kk + ky * window.kernel + kx];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            FieldOp::AvgPool { weight, window } => {
                let positions = window.output.h * window.output.w;
                for c in 0..window.output.c {
                    for oy in 0..window.output.h {
                        for ox in 0..window.output.w {
                            let row = c * positions + oy * window.output.w + ox;
                            for ky in 0..window.kernel {
                                for kx in 0..window.kernel {
                                    if let Some(i) = window.tap(c, oy, ox, ky, kx) {
                                        m[row * n_in + i] = *weight;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        m
    }
}

/// Patch matrix laid out position-major: for each output position, the
/// `in_channels * kernel^2` input taps (zero in the padding).
pub fn im2col(x: &[FieldElement], window: &Window) -> Vec<FieldElement> {
    let k = window.input.c * window.kernel * window.kernel;
    let positions = window.output.h * window.output.w;
    let mut cols = Vec::with_capacity(k * positions);
    for oy in 0..window.output.h {
        for ox in 0..window.output.w {
            for c in 0..window.input.c {
                for ky in 0..window.kernel {
                    for kx in 0..window.kernel {
                        cols.push(window.tap(c, oy, ox, ky, kx).map_or(FieldElement::ZERO, |i| x[i]));
                    }
                }
            }
        }
    }
    cols
}

/// Client half of a linear layer's dealer material.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientLinearPreproc {
    pub layer_id: u32,
    pub r_c: Vec<FieldElement>,
    /// `W r_c + r_s`
    pub u: Vec<FieldElement>,
    consumed: bool,
}

/// Server half of a linear layer's dealer material.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServerLinearPreproc {
    pub layer_id: u32,
    pub r_s: Vec<FieldElement>,
    consumed: bool,
}

impl ClientLinearPreproc {
    pub fn new(layer_id: u32, r_c: Vec<FieldElement>, u: Vec<FieldElement>) -> Self {
        ClientLinearPreproc { layer_id, r_c, u, consumed: false }
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }
}

impl ServerLinearPreproc {
    pub fn new(layer_id: u32, r_s: Vec<FieldElement>) -> Self {
        ServerLinearPreproc { layer_id, r_s, consumed: false }
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }
}

pub fn dealer_make_linear_preproc<R: Rng + ?Sized>(
    op: &FieldLinear,
    layer_id: u32,
    field: &FieldParams,
    rng: &mut R,
) -> (ClientLinearPreproc, ServerLinearPreproc) {
    let r_c: Vec<_> = (0..op.in_len()).map(|_| random_element(field, rng)).collect();
    let r_s: Vec<_> = (0..op.out_len()).map(|_| random_element(field, rng)).collect();
    dealer_make_linear_preproc_with(op, layer_id, r_c, r_s, field)
}

/// Dealer material from caller-chosen masks.
pub fn dealer_make_linear_preproc_with(
    op: &FieldLinear,
    layer_id: u32,
    r_c: Vec<FieldElement>,
    r_s: Vec<FieldElement>,
    field: &FieldParams,
) -> (ClientLinearPreproc, ServerLinearPreproc) {
    let w_rc = op.apply(&r_c, field);
    let u = w_rc.iter().zip(&r_s).map(|(a, b)| field.add(*a, *b)).collect();
    (ClientLinearPreproc::new(layer_id, r_c, u), ServerLinearPreproc::new(layer_id, r_s))
}

/// Dealer self-check: `u - r_s = W r_c` elementwise.
pub fn check_linear_preproc(
    op: &FieldLinear,
    client: &ClientLinearPreproc,
    server: &ServerLinearPreproc,
    field: &FieldParams,
) -> bool {
    if client.r_c.len() != op.in_len() || client.u.len() != op.out_len() || server.r_s.len() != op.out_len() {
        return false;
    }
    let w_rc = op.apply(&client.r_c, field);
    client.u.iter().zip(&server.r_s).zip(&w_rc).all(|((u, rs), w)| field.sub(*u, *rs) == *w)
}

/// Client: masks its input share. Returns the message for the server and the
/// client's output share `-u`.
pub fn client_mask_input(
    x_share: &[AdditiveShare],
    pre: &mut ClientLinearPreproc,
    field: &FieldParams,
) -> Result<(Vec<FieldElement>, Vec<AdditiveShare>), LinearError> {
    if pre.consumed {
        return Err(LinearError::StalePreproc(pre.layer_id));
    }
    if x_share.len() != pre.r_c.len() {
        return Err(LinearError::DimensionMismatch { expected: pre.r_c.len(), got: x_share.len() });
    }
    pre.consumed = true;
    let message = x_share.iter().zip(&pre.r_c).map(|(x, r)| field.add(x.value, *r)).collect();
    let out = pre.u.iter().map(|u| AdditiveShare::new(PartyRole::Client, field.neg(*u))).collect();
    Ok((message, out))
}

/// Server: `W ([x]_1 + message) + r_s + b` as its output share.
pub fn server_eval_linear(
    own: &[AdditiveShare],
    message: &[FieldElement],
    op: &FieldLinear,
    pre: &mut ServerLinearPreproc,
    field: &FieldParams,
) -> Result<Vec<AdditiveShare>, LinearError> {
    if pre.consumed {
        return Err(LinearError::StalePreproc(pre.layer_id));
    }
    for got in [own.len(), message.len()] {
        if got != op.in_len() {
            return Err(LinearError::DimensionMismatch { expected: op.in_len(), got });
        }
    }
    if pre.r_s.len() != op.out_len() {
        return Err(LinearError::DimensionMismatch { expected: op.out_len(), got: pre.r_s.len() });
    }
    pre.consumed = true;
    let unmasked: Vec<_> = own.iter().zip(message).map(|(s, m)| field.add(s.value, *m)).collect();
    let y = op.apply_with_bias(&unmasked, field);
    Ok(y.iter().zip(&pre.r_s).map(|(a, r)| AdditiveShare::new(PartyRole::Server, field.add(*a, *r))).collect())
}

/// Client side of one online linear layer (one round).
pub fn client_linear_step(
    x_share: &[AdditiveShare],
    pre: &mut ClientLinearPreproc,
    field: &FieldParams,
    channel: &mut Channel,
) -> Result<Vec<AdditiveShare>, LinearError> {
    let (message, out) = client_mask_input(x_share, pre, field)?;
    channel.send_step(Tag::LinearMaskedInput, &elements_to_le_bytes(&message))?;
    Ok(out)
}

/// Server side of one online linear layer (one round).
pub fn server_linear_step(
    own: &[AdditiveShare],
    op: &FieldLinear,
    pre: &mut ServerLinearPreproc,
    field: &FieldParams,
    channel: &mut Channel,
) -> Result<Vec<AdditiveShare>, LinearError> {
    if pre.consumed {
        return Err(LinearError::StalePreproc(pre.layer_id));
    }
    let message = decode_elements(&channel.recv_step(Tag::LinearMaskedInput)?, field)?;
    server_eval_linear(own, &message, op, pre, field)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sharing::reconstruct;
    use crate::stats::{bucket_residues, chi_square};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn small() -> FieldParams {
        FieldParams::new(8191).unwrap()
    }

    fn dense(rows: usize, cols: usize, w: Vec<f32>, bias: Option<Vec<f32>>) -> LinearLayerSpec {
        LinearLayerSpec { kind: LinearKind::Dense { inputs: cols, outputs: rows }, weights: w, bias }
    }

    fn codec_f0(field: FieldParams) -> FixedPointCodec {
        FixedPointCodec::new(field, 0, 1000.0).unwrap()
    }

    #[test]
    fn output_shapes() {
        let conv = LinearKind::Conv2d { in_channels: 1, out_channels: 2, kernel: 3, stride: 1, padding: 0 };
        assert_eq!(conv.output_shape(Shape::image(1, 4, 4)).unwrap(), Shape::image(2, 2, 2));
        let padded = LinearKind::Conv2d { in_channels: 1, out_channels: 4, kernel: 3, stride: 1, padding: 1 };
        assert_eq!(padded.output_shape(Shape::image(1, 8, 8)).unwrap(), Shape::image(4, 8, 8));
        let strided = LinearKind::Conv2d { in_channels: 3, out_channels: 1, kernel: 3, stride: 2, padding: 1 };
        assert_eq!(strided.output_shape(Shape::image(3, 7, 7)).unwrap(), Shape::image(1, 4, 4));
        let pool = LinearKind::AvgPool { size: 2, stride: 2 };
        assert_eq!(pool.output_shape(Shape::image(5, 7, 7)).unwrap(), Shape::image(5, 3, 3));
        assert!(conv.output_shape(Shape::image(2, 4, 4)).is_err());
        let d = LinearKind::Dense { inputs: 16, outputs: 3 };
        assert!(d.output_shape(Shape::image(1, 4, 4)).is_err());
        assert_eq!(LinearKind::Flatten.output_shape(Shape::image(1, 4, 4)).unwrap(), Shape::vector(16));
    }

    #[test]
    fn worked_dense_example() {
        let f = small();
        let codec = codec_f0(f);
        let op = FieldLinear::lower(&dense(2, 2, vec![1.0, 2.0, 3.0, 4.0], None), Shape::vector(2), 0, &codec).unwrap();
        let (c, s) = dealer_make_linear_preproc_with(&op, 0, vec![f.element(1); 2], vec![f.element(5); 2], &f);
        assert_eq!(c.u, vec![f.element(8), f.element(12)]);
        assert!(check_linear_preproc(&op, &c, &s, &f));
    }

    #[test]
    fn identity_with_zero_server_mask() {
        let f = FieldParams::default();
        let codec = FixedPointCodec::new(f, 0, 1000.0).unwrap();
        let op = FieldLinear::lower(
            &dense(3, 3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.], None),
            Shape::vector(3),
            0,
            &codec,
        )
        .unwrap();
        let r_c = vec![f.element(11), f.element(22), f.element(33)];
        let (c, _) = dealer_make_linear_preproc_with(&op, 0, r_c.clone(), vec![FieldElement::ZERO; 3], &f);
        assert_eq!(c.u, r_c);
    }

    fn run_secure(op: &FieldLinear, x: &[FieldElement], field: &FieldParams, seed: u64) -> Vec<FieldElement> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let (mut c, mut s) = dealer_make_linear_preproc(op, 0, field, &mut rng);
        let (x0, x1): (Vec<_>, Vec<_>) = x.iter().map(|&v| crate::sharing::share(v, field, &mut rng)).unzip();
        let (msg, out0) = client_mask_input(&x0, &mut c, field).unwrap();
        let out1 = server_eval_linear(&x1, &msg, op, &mut s, field).unwrap();
        out0.iter().zip(&out1).map(|(a, b)| reconstruct(*a, *b, field).unwrap()).collect()
    }

    #[test]
    fn secure_dense_matches_plain_matmul() {
        let f = small();
        let codec = codec_f0(f);
        let op = FieldLinear::lower(&dense(2, 2, vec![1.0, 2.0, 3.0, 4.0], None), Shape::vector(2), 0, &codec).unwrap();
        let out = run_secure(&op, &[f.element(10), f.element(20)], &f, 1);
        // [[1,2],[3,4]] (10,20) = (50, 110)
        assert_eq!(out, vec![f.element(50), f.element(110)]);
    }

    #[test]
    fn identity_secure_reconstructs_input() {
        let f = FieldParams::default();
        let codec = FixedPointCodec::new(f, 0, 1000.0).unwrap();
        let op = FieldLinear::lower(&dense(2, 2, vec![1., 0., 0., 1.], None), Shape::vector(2), 0, &codec).unwrap();
        let x = vec![f.element(123), f.from_signed(-77)];
        assert_eq!(run_secure(&op, &x, &f, 2), x);
    }

    #[test]
    fn bias_lands_at_output_scale() {
        let codec = FixedPointCodec::default();
        let f = *codec.field();
        let spec = dense(1, 2, vec![0.5, -0.25], Some(vec![1.5]));
        let op = FieldLinear::lower(&spec, Shape::vector(2), 12, &codec).unwrap();
        assert_eq!(op.output_scale_bits, 24);
        let x = vec![codec.encode(2.0).unwrap(), codec.encode(4.0).unwrap()];
        let y = run_secure(&op, &x, &f, 3);
        // 0.5*2 - 0.25*4 + 1.5 = 1.5 at scale 2^24
        assert_eq!(codec.decode_at(y[0], 24), 1.5);
    }

    #[test]
    fn stale_and_dimension_errors() {
        let f = small();
        let codec = codec_f0(f);
        let op = FieldLinear::lower(&dense(2, 2, vec![1.0, 2.0, 3.0, 4.0], None), Shape::vector(2), 0, &codec).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let (mut c, mut s) = dealer_make_linear_preproc(&op, 7, &f, &mut rng);
        let x0 = vec![AdditiveShare::new(PartyRole::Client, FieldElement::ZERO); 2];
        let x1 = vec![AdditiveShare::new(PartyRole::Server, FieldElement::ZERO); 2];
        assert!(matches!(
            client_mask_input(&x0[..1], &mut c, &f),
            Err(LinearError::DimensionMismatch { expected: 2, got: 1 })
        ));
        let (msg, _) = client_mask_input(&x0, &mut c, &f).unwrap();
        assert!(matches!(client_mask_input(&x0, &mut c, &f), Err(LinearError::StalePreproc(7))));
        assert!(matches!(
            server_eval_linear(&x1, &msg[..1], &op, &mut s, &f),
            Err(LinearError::DimensionMismatch { .. })
        ));
        server_eval_linear(&x1, &msg, &op, &mut s, &f).unwrap();
        assert!(matches!(server_eval_linear(&x1, &msg, &op, &mut s, &f), Err(LinearError::StalePreproc(7))));
    }

    #[test]
    fn corrupted_preproc_fails_check() {
        let f = small();
        let codec = codec_f0(f);
        let op = FieldLinear::lower(&dense(2, 2, vec![1.0, 2.0, 3.0, 4.0], None), Shape::vector(2), 0, &codec).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let (mut c, s) = dealer_make_linear_preproc(&op, 0, &f, &mut rng);
        assert!(check_linear_preproc(&op, &c, &s, &f));
        c.u[1] = f.add(c.u[1], FieldElement::ONE);
        assert!(!check_linear_preproc(&op, &c, &s, &f));
    }

    /// Direct convolution straight from the definition, on integers.
    fn direct_conv(
        x: &[i64],
        w: &[i64],
        cin: usize,
        h: usize,
        wd: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Vec<i64> {
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let mut out = vec![0i64; cout * oh * ow];
        for oc in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0;
                    for ic in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as i64 - pad as i64;
                                let ix = (ox * stride + kx) as i64 - pad as i64;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += x[(ic * h + iy as usize) * wd + ix as usize]
                                        * w[((oc * cin + ic) * k + ky) * k + kx];
                                }
                            }
                        }
                    }
                    out[(oc * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    fn conv_case(cin: usize, h: usize, wd: usize, cout: usize, k: usize, stride: usize, pad: usize, seed: u64) {
        let f = FieldParams::default();
        let codec = FixedPointCodec::new(f, 0, 1000.0).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let w: Vec<i64> = (0..cout * cin * k * k).map(|_| rng.gen_range(-5..=5)).collect();
        let x: Vec<i64> = (0..cin * h * wd).map(|_| rng.gen_range(-50..=50)).collect();
        let spec = LinearLayerSpec {
            kind: LinearKind::Conv2d { in_channels: cin, out_channels: cout, kernel: k, stride, padding: pad },
            weights: w.iter().map(|&v| v as f32).collect(),
            bias: None,
        };
        let op = FieldLinear::lower(&spec, Shape::image(cin, h, wd), 0, &codec).unwrap();
        let xf: Vec<_> = x.iter().map(|&v| f.from_signed(v)).collect();
        let expect: Vec<_> =
            direct_conv(&x, &w, cin, h, wd, cout, k, stride, pad).iter().map(|&v| f.from_signed(v)).collect();
        assert_eq!(op.apply(&xf, &f), expect, "im2col path");
        let m = op.to_dense_matrix();
        let via_matrix: Vec<_> = m.chunks(op.in_len()).map(|row| f.dot(row, &xf)).collect();
        assert_eq!(via_matrix, expect, "explicit lowered matrix");
        assert_eq!(run_secure(&op, &xf, &f, seed), expect, "secure path");
    }

    #[test]
    fn conv_3x3_on_4x4_has_four_outputs() {
        conv_case(1, 4, 4, 1, 3, 1, 0, 10);
        let spec = LinearKind::Conv2d { in_channels: 1, out_channels: 1, kernel: 3, stride: 1, padding: 0 };
        assert_eq!(spec.output_shape(Shape::image(1, 4, 4)).unwrap().len(), 4);
    }

    #[test]
    fn conv_lowering_matches_direct_convolution() {
        conv_case(2, 5, 5, 3, 3, 1, 1, 11);
        conv_case(3, 7, 6, 2, 3, 2, 1, 12);
        conv_case(1, 8, 8, 4, 5, 1, 2, 13);
        conv_case(4, 3, 3, 2, 2, 1, 0, 14);
    }

    #[test]
    fn one_by_one_conv_is_channel_mixing() {
        let f = FieldParams::default();
        let codec = FixedPointCodec::new(f, 0, 1000.0).unwrap();
        // 2 -> 3 channels on 2x2, weights [[1,2],[3,4],[5,6]]
        let w = [1.0f32, 2., 3., 4., 5., 6.];
        let spec = LinearLayerSpec {
            kind: LinearKind::Conv2d { in_channels: 2, out_channels: 3, kernel: 1, stride: 1, padding: 0 },
            weights: w.to_vec(),
            bias: None,
        };
        let op = FieldLinear::lower(&spec, Shape::image(2, 2, 2), 0, &codec).unwrap();
        let x: Vec<_> = (1..=8).map(|v| f.element(v)).collect();
        let y = op.apply(&x, &f);
        for oc in 0..3 {
            for pos in 0..4 {
                let expect = w[oc * 2] as u64 * (1 + pos as u64) + w[oc * 2 + 1] as u64 * (5 + pos as u64);
                assert_eq!(y[oc * 4 + pos].value(), expect);
            }
        }
    }

    #[test]
    fn avgpool_uses_encoded_quarter() {
        let f = FieldParams::default();
        let codec = FixedPointCodec::new(f, 2, 1000.0).unwrap();
        let spec = LinearLayerSpec { kind: LinearKind::AvgPool { size: 2, stride: 2 }, weights: vec![], bias: None };
        let op = FieldLinear::lower(&spec, Shape::image(1, 4, 4), 0, &codec).unwrap();
        let x: Vec<_> = (0..16).map(|v| f.element(v)).collect();
        let y = op.apply(&x, &f);
        // encode(0.25) at f = 2 is 1, so outputs are plain window sums
        let sums = [0 + 1 + 4 + 5, 2 + 3 + 6 + 7, 8 + 9 + 12 + 13, 10 + 11 + 14 + 15];
        assert_eq!(y, sums.iter().map(|&s| f.element(s)).collect::<Vec<_>>());
        let m = op.to_dense_matrix();
        let via_matrix: Vec<_> = m.chunks(16).map(|row| f.dot(row, &x)).collect();
        assert_eq!(via_matrix, y);
        assert_eq!(run_secure(&op, &x, &f, 15), y);
    }

    #[test]
    fn masked_input_is_uniform() {
        let f = small();
        let codec = codec_f0(f);
        let op = FieldLinear::lower(&dense(1, 1, vec![1.0], None), Shape::vector(1), 0, &codec).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(16);
        let x0 = [AdditiveShare::new(PartyRole::Client, f.element(1234))];
        let msgs = (0..100_000).map(|_| {
            let (mut c, _) = dealer_make_linear_preproc(&op, 0, &f, &mut rng);
            client_mask_input(&x0, &mut c, &f).unwrap().0[0].value()
        });
        let (counts, probs) = bucket_residues(msgs, 8191, 64);
        let t = chi_square(&counts, &probs);
        assert!(t.passes(0.01), "{t:?}");
    }

    #[test]
    fn channel_round_trip_costs_one_round() {
        let f = FieldParams::default();
        let codec = FixedPointCodec::new(f, 0, 1000.0).unwrap();
        let op =
            FieldLinear::lower(&dense(2, 3, vec![1., 2., 3., 4., 5., 6.], None), Shape::vector(3), 0, &codec).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(17);
        let (mut c, mut s) = dealer_make_linear_preproc(&op, 0, &f, &mut rng);
        let x = [f.element(1), f.element(2), f.element(3)];
        let (x0, x1): (Vec<_>, Vec<_>) = x.iter().map(|&v| crate::sharing::share(v, &f, &mut rng)).unzip();
        let (mut a, mut b) = Channel::loopback_pair();
        let op2 = op.clone();
        let t = std::thread::spawn(move || {
            let out = server_linear_step(&x1, &op2, &mut s, &f, &mut b).unwrap();
            (out, b.metrics_snapshot())
        });
        let out0 = client_linear_step(&x0, &mut c, &f, &mut a).unwrap();
        let (out1, mb) = t.join().unwrap();
        let y: Vec<_> = out0.iter().zip(&out1).map(|(p, q)| reconstruct(*p, *q, &f).unwrap().value()).collect();
        assert_eq!(y, vec![14, 32]);
        let ma = a.metrics_snapshot();
        assert_eq!((ma.rounds, mb.rounds), (1, 1));
        assert_eq!(ma.payload_bytes_sent, 24);
        assert_eq!(mb.payload_bytes_received, 24);
        assert_eq!(ma.payload_bytes_received + mb.payload_bytes_sent, 0);
    }
}
