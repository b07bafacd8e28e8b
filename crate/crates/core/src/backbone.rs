//! Sequential layered network: forward passes with per-layer activation
//! capture, prefix freezing, last-two-layer reinitialization and weight
//! container import/export.
//!
//! Layers are conv / dense / logits stacks only. Convolutions may carry a
//! trailing 2x2 max pool. All math is f64; the on-disk container truncates
//! to f32.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::{self, ContainerEntry, KIND_CONV, KIND_DENSE, KIND_LOGITS};
use crate::error::{Error, Result};
use crate::tensor::Tensor3;

/// Pretraining provenance of a backbone.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum SourceTag {
    #[serde(rename = "IN")]
    In,
    #[serde(rename = "P2")]
    P2,
    #[serde(untagged)]
    Other(String),
}

impl std::fmt::Display for SourceTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SourceTag::In => write!(f, "IN"),
            SourceTag::P2 => write!(f, "P2"),
            SourceTag::Other(s) => write!(f, "{s}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Conv,
    Dense,
    Logits,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationFn {
    Relu,
    Identity,
    Softmax,
}

/// Convolution geometry. `pool_after` appends a 2x2/stride-2 max pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub pool_after: bool,
}

/// One weight layer.
///
/// Conv weights are laid out `(ky, kx, in_c, out_c)` row-major with
/// `in_dim = in_c`, `out_dim = out_c`. Dense and logits weights are
/// `(in, out)` row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightLayer {
    pub kind: LayerKind,
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub frozen: bool,
    pub activation: ActivationFn,
    pub conv: Option<ConvGeom>,
}

impl WeightLayer {
    pub fn conv(in_c: usize, out_c: usize, geom: ConvGeom) -> Self {
        WeightLayer {
            kind: LayerKind::Conv,
            in_dim: in_c,
            out_dim: out_c,
            weights: vec![0.0; geom.kernel * geom.kernel * in_c * out_c],
            bias: vec![0.0; out_c],
            frozen: false,
            activation: ActivationFn::Relu,
            conv: Some(geom),
        }
    }

    pub fn dense(input: usize, output: usize) -> Self {
        WeightLayer {
            kind: LayerKind::Dense,
            in_dim: input,
            out_dim: output,
            weights: vec![0.0; input * output],
            bias: vec![0.0; output],
            frozen: false,
            activation: ActivationFn::Relu,
            conv: None,
        }
    }

    pub fn logits(input: usize, classes: usize) -> Self {
        WeightLayer {
            kind: LayerKind::Logits,
            in_dim: input,
            out_dim: classes,
            weights: vec![0.0; input * classes],
            bias: vec![0.0; classes],
            frozen: false,
            activation: ActivationFn::Softmax,
            conv: None,
        }
    }

    pub fn n_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    /// Weight tensor dims as stored in the container format.
    pub fn weight_dims(&self) -> Vec<u32> {
        match (&self.kind, &self.conv) {
            (LayerKind::Conv, Some(g)) => vec![
                g.kernel as u32,
                g.kernel as u32,
                self.in_dim as u32,
                self.out_dim as u32,
            ],
            _ => vec![self.in_dim as u32, self.out_dim as u32],
        }
    }

    fn kind_byte(&self) -> u8 {
        match self.kind {
            LayerKind::Conv => KIND_CONV,
            LayerKind::Dense => KIND_DENSE,
            LayerKind::Logits => KIND_LOGITS,
        }
    }

    /// Fan-in scaled zero-mean uniform reinitialization. Samples are drawn
    /// as f32 so a container round trip is lossless.
    pub fn reinit(&mut self, rng: &mut ChaCha8Rng) {
        let fan_in = match (&self.kind, &self.conv) {
            (LayerKind::Conv, Some(g)) => g.kernel * g.kernel * self.in_dim,
            _ => self.in_dim,
        };
        let limit = (3.0 / fan_in as f64).sqrt() as f32;
        for w in &mut self.weights {
            *w = rng.gen_range(-limit..limit) as f64;
        }
        for b in &mut self.bias {
            *b = 0.0;
        }
    }
}

/// Output of one layer: spatial for conv, flat for dense/logits.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerOutput {
    Spatial(Tensor3),
    Flat(Vec<f64>),
}

impl LayerOutput {
    /// Channel count: channels for spatial outputs, width for flat ones.
    pub fn channels(&self) -> usize {
        match self {
            LayerOutput::Spatial(t) => t.c,
            LayerOutput::Flat(v) => v.len(),
        }
    }

    pub fn as_flat(&self) -> Option<&[f64]> {
        match self {
            LayerOutput::Flat(v) => Some(v),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    FreezePrefix,
    ExtractSuffix,
}

/// Maps a layer fraction to a concrete layer count.
///
/// Freezing rounds (half away from zero) over the full weight-layer count.
/// Extraction floors over the count excluding logits, counting back from the
/// last layer before logits. Both results are clamped to at least 1.
pub fn layers_for_fraction(
    total_weight_layers: usize,
    mode: SelectionMode,
    fraction: f64,
) -> Result<usize> {
    if total_weight_layers < 2 {
        return Err(Error::Config(format!(
            "need at least 2 weight layers, got {total_weight_layers}"
        )));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!(
            "fraction must be in (0, 1], got {fraction}"
        )));
    }
    let count = match mode {
        SelectionMode::FreezePrefix => {
            ((fraction * total_weight_layers as f64).round() as usize).min(total_weight_layers)
        }
        SelectionMode::ExtractSuffix => {
            let extractable = total_weight_layers - 1;
            ((fraction * extractable as f64).floor() as usize).min(extractable)
        }
    };
    Ok(count.max(1))
}

/// A resolved layer selection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerSelection {
    pub mode: SelectionMode,
    pub fraction: f64,
    pub resolved_count: usize,
}

impl LayerSelection {
    pub fn new(mode: SelectionMode, fraction: f64, total_weight_layers: usize) -> Result<Self> {
        let resolved_count = layers_for_fraction(total_weight_layers, mode, fraction)?;
        Ok(LayerSelection {
            mode,
            fraction,
            resolved_count,
        })
    }
}

/// Per-layer forward trace kept for backpropagation.
struct LayerTrace {
    input: LayerOutput,
    pre_act: LayerOutput,
    /// Post-activation, pre-pool spatial shape and argmax routing, when the
    /// layer pools.
    pool: Option<((usize, usize, usize), Vec<usize>)>,
    output: LayerOutput,
}

/// Parameter gradients aligned with `LayeredBackbone::layers`.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub dw: Vec<Vec<f64>>,
    pub db: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(b: &LayeredBackbone) -> Self {
        Gradients {
            dw: b.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            db: b.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.dw.iter_mut().chain(self.db.iter_mut()) {
            for v in g.iter_mut() {
                *v *= s;
            }
        }
    }
}

/// An ordered stack of weight layers ending in a logits layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayeredBackbone {
    pub id: String,
    pub layers: Vec<WeightLayer>,
    pub input_shape: (usize, usize, usize),
    pub source_tag: SourceTag,
}

impl LayeredBackbone {
    pub fn weight_layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn n_classes(&self) -> usize {
        self.layers.last().map(|l| l.out_dim).unwrap_or(0)
    }

    /// Structural invariants: at least 3 layers, exactly one logits layer at
    /// the end, and a consistent shape chain from the input.
    pub fn validate(&self) -> Result<()> {
        if self.layers.len() < 3 {
            return Err(Error::Shape(format!(
                "backbone needs >= 3 layers, has {}",
                self.layers.len()
            )));
        }
        let logits_positions: Vec<usize> = self
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.kind == LayerKind::Logits)
            .map(|(i, _)| i)
            .collect();
        if logits_positions != vec![self.layers.len() - 1] {
            return Err(Error::Shape(
                "backbone must end in exactly one logits layer".into(),
            ));
        }
        // Shape chain.
        let mut shape = ChainShape::Spatial(self.input_shape);
        for (i, layer) in self.layers.iter().enumerate() {
            shape = chain_layer(&shape, layer).map_err(|e| {
                Error::Shape(format!("layer {i} ({:?}): {e}", layer.kind))
            })?;
        }
        Ok(())
    }

    /// Returns a copy with the first `layers_for_fraction` layers frozen and
    /// the rest trainable. Parameters are untouched; applying the same
    /// fraction twice is a no-op.
    pub fn freeze_prefix(&self, fraction: f64) -> Result<LayeredBackbone> {
        let n = layers_for_fraction(self.layers.len(), SelectionMode::FreezePrefix, fraction)?;
        let mut out = self.clone();
        for (i, layer) in out.layers.iter_mut().enumerate() {
            layer.frozen = i < n;
        }
        Ok(out)
    }

    /// Resamples the last two layers (one hidden layer plus logits) and
    /// resizes the logits layer to `n_classes` outputs. Earlier layers are
    /// bit-identical to the input.
    pub fn reinit_last_two(&self, n_classes: usize, seed: u64) -> Result<LayeredBackbone> {
        if n_classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {n_classes}"
            )));
        }
        let mut out = self.clone();
        let n = out.layers.len();
        let logits_in = out.layers[n - 1].in_dim;
        out.layers[n - 1] = WeightLayer::logits(logits_in, n_classes);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Deterministic order: penultimate layer first, then logits.
        let penultimate_frozen = out.layers[n - 2].frozen;
        out.layers[n - 2].reinit(&mut rng);
        out.layers[n - 2].frozen = penultimate_frozen;
        out.layers[n - 1].reinit(&mut rng);
        Ok(out)
    }

    // -- forward -----------------------------------------------------------

    fn check_input(&self, image: &Tensor3) -> Result<()> {
        if image.shape() != self.input_shape {
            return Err(Error::Shape(format!(
                "input shape {:?} does not match backbone input {:?}",
                image.shape(),
                self.input_shape
            )));
        }
        Ok(())
    }

    fn forward_traced(&self, image: &Tensor3) -> Result<Vec<LayerTrace>> {
        self.check_input(image)?;
        let mut traces = Vec::with_capacity(self.layers.len());
        let mut current = LayerOutput::Spatial(image.clone());
        for layer in &self.layers {
            let trace = run_layer(layer, current)?;
            current = trace.output.clone();
            traces.push(trace);
        }
        Ok(traces)
    }

    /// Logits for one image.
    pub fn forward(&self, image: &Tensor3) -> Result<Vec<f64>> {
        let traces = self.forward_traced(image)?;
        match &traces.last().unwrap().pre_act {
            LayerOutput::Flat(v) => Ok(v.clone()),
            _ => Err(Error::Shape("logits layer emitted a spatial output".into())),
        }
    }

    /// Softmax class probabilities for one image.
    pub fn predict_probs(&self, image: &Tensor3) -> Result<Vec<f64>> {
        Ok(softmax(&self.forward(image)?))
    }

    /// Activations of the selected suffix layers, deepest first (the last
    /// layer before logits comes first). One forward pass serves all
    /// captures.
    pub fn collect_one(
        &self,
        image: &Tensor3,
        selection: &LayerSelection,
    ) -> Result<Vec<LayerOutput>> {
        if selection.mode != SelectionMode::ExtractSuffix {
            return Err(Error::Config(
                "activation capture requires an extract_suffix selection".into(),
            ));
        }
        let expected =
            layers_for_fraction(self.layers.len(), selection.mode, selection.fraction)?;
        if selection.resolved_count != expected {
            return Err(Error::Config(format!(
                "selection resolved_count {} inconsistent with fraction {} ({} layers)",
                selection.resolved_count,
                selection.fraction,
                self.layers.len()
            )));
        }
        let n = selection.resolved_count;
        let traces = self.forward_traced(image)?;
        let last_before_logits = self.layers.len() - 2;
        let mut captures = Vec::with_capacity(n);
        for k in 0..n {
            captures.push(traces[last_before_logits - k].output.clone());
        }
        Ok(captures)
    }

    /// Batch variant of [`collect_one`](Self::collect_one).
    pub fn forward_collect(
        &self,
        batch: &[Tensor3],
        selection: &LayerSelection,
    ) -> Result<Vec<Vec<LayerOutput>>> {
        batch
            .iter()
            .map(|img| self.collect_one(img, selection))
            .collect()
    }

    // -- training ----------------------------------------------------------

    /// Mean softmax cross-entropy over the batch.
    pub fn loss_on_batch(&self, batch: &[(&Tensor3, usize)]) -> Result<f64> {
        let mut total = 0.0;
        for (image, label) in batch {
            let logits = self.forward(image)?;
            total += cross_entropy(&logits, *label);
        }
        Ok(total / batch.len() as f64)
    }

    /// Mean loss and mean parameter gradients over the batch. Gradients are
    /// produced for every layer; the optimizer decides what to update.
    pub fn loss_and_gradients(&self, batch: &[(&Tensor3, usize)]) -> Result<(f64, Gradients)> {
        if batch.is_empty() {
            return Err(Error::Train("empty batch".into()));
        }
        let mut grads = Gradients::zeros_like(self);
        let mut total_loss = 0.0;
        for (image, label) in batch {
            let traces = self.forward_traced(image)?;
            let logits = match &traces.last().unwrap().pre_act {
                LayerOutput::Flat(v) => v.clone(),
                _ => return Err(Error::Shape("logits layer emitted spatial output".into())),
            };
            total_loss += cross_entropy(&logits, *label);
            // dL/dz at the logits layer for softmax + cross-entropy.
            let probs = softmax(&logits);
            let mut dz: Vec<f64> = probs;
            dz[*label] -= 1.0;
            backward(self, &traces, dz, &mut grads)?;
        }
        let inv = 1.0 / batch.len() as f64;
        grads.scale(inv);
        Ok((total_loss * inv, grads))
    }

    // -- container i/o -----------------------------------------------------

    pub fn export_weights(&self, path: &Path) -> Result<u64> {
        let entries: Vec<ContainerEntry> = self
            .layers
            .iter()
            .map(|l| ContainerEntry {
                kind: l.kind_byte(),
                dims: l.weight_dims(),
                values: l.weights.clone(),
                bias: l.bias.clone(),
            })
            .collect();
        container::write(path, &entries)
    }

    /// Replaces all parameters from a weight container. Layer count, kinds
    /// and shapes must match exactly; the container checksum is recorded in
    /// the backbone id.
    pub fn import_weights(&self, path: &Path) -> Result<LayeredBackbone> {
        let (entries, checksum) = container::read(path)?;
        if entries.len() != self.layers.len() {
            return Err(Error::Import(format!(
                "container has {} layers, backbone has {}",
                entries.len(),
                self.layers.len()
            )));
        }
        let mut out = self.clone();
        for (i, (layer, entry)) in out.layers.iter_mut().zip(entries.into_iter()).enumerate() {
            if entry.kind != layer.kind_byte() {
                return Err(Error::Import(format!(
                    "layer {i}: container kind {} does not match {:?}",
                    entry.kind, layer.kind
                )));
            }
            if entry.dims != layer.weight_dims() {
                return Err(Error::Import(format!(
                    "layer {i}: container dims {:?} do not match {:?}",
                    entry.dims,
                    layer.weight_dims()
                )));
            }
            if entry.bias.len() != layer.bias.len() {
                return Err(Error::Import(format!(
                    "layer {i}: container bias length {} does not match {}",
                    entry.bias.len(),
                    layer.bias.len()
                )));
            }
            layer.weights = entry.values;
            layer.bias = entry.bias;
        }
        let base = out.id.split('#').next().unwrap_or("").to_string();
        out.id = format!("{base}#{checksum:016x}");
        Ok(out)
    }

    // -- constructors ------------------------------------------------------

    /// Desk-scale backbone: two strided conv layers, one hidden dense layer
    /// and logits, ~10k parameters on a 16x16x1 input.
    pub fn toy(seed: u64) -> LayeredBackbone {
        let geom = ConvGeom {
            kernel: 3,
            stride: 2,
            pad: 1,
            pool_after: false,
        };
        let mut layers = vec![
            WeightLayer::conv(1, 8, geom),
            WeightLayer::conv(8, 16, geom),
            WeightLayer::dense(4 * 4 * 16, 32),
            WeightLayer::logits(32, 10),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in &mut layers {
            l.reinit(&mut rng);
        }
        let b = LayeredBackbone {
            id: format!("toy-{seed}"),
            layers,
            input_shape: (16, 16, 1),
            source_tag: SourceTag::Other("toy".into()),
        };
        debug_assert!(b.validate().is_ok());
        b
    }

    /// VGG16 weight-layer descriptor: 13 conv + 3 dense shapes for a
    /// 224x224x3 input and 1000 source classes. Pairs with
    /// [`import_weights`](Self::import_weights). Allocating the full
    /// parameter set takes roughly 1.1 GB; call only when real weights are
    /// about to be imported.
    pub fn vgg16(tag: SourceTag) -> LayeredBackbone {
        let mut layers = Vec::new();
        let mut in_c = 3;
        for (i, &out_c) in VGG16_CONV_CHANNELS.iter().enumerate() {
            let geom = ConvGeom {
                kernel: 3,
                stride: 1,
                pad: 1,
                pool_after: VGG16_POOL_AFTER.contains(&i),
            };
            layers.push(WeightLayer::conv(in_c, out_c, geom));
            in_c = out_c;
        }
        layers.push(WeightLayer::dense(7 * 7 * 512, 4096));
        layers.push(WeightLayer::dense(4096, 4096));
        layers.push(WeightLayer::logits(4096, 1000));
        LayeredBackbone {
            id: format!("vgg16-{tag}"),
            layers,
            input_shape: (224, 224, 3),
            source_tag: tag,
        }
    }
}

const VGG16_CONV_CHANNELS: [usize; 13] =
    [64, 64, 128, 128, 256, 256, 256, 512, 512, 512, 512, 512, 512];
/// Conv indices followed by a 2x2 max pool (0-based within the conv stack).
const VGG16_POOL_AFTER: [usize; 5] = [1, 3, 6, 9, 12];

/// Weight-tensor dims of the 16-layer VGG16 descriptor, cheap to compute.
pub fn vgg16_dims() -> Vec<(LayerKind, Vec<u32>)> {
    let mut dims = Vec::new();
    let mut in_c = 3u32;
    for &out_c in &VGG16_CONV_CHANNELS {
        dims.push((LayerKind::Conv, vec![3, 3, in_c, out_c as u32]));
        in_c = out_c as u32;
    }
    dims.push((LayerKind::Dense, vec![7 * 7 * 512, 4096]));
    dims.push((LayerKind::Dense, vec![4096, 4096]));
    dims.push((LayerKind::Logits, vec![4096, 1000]));
    dims
}

// ---------------------------------------------------------------------------
// layer math
// ---------------------------------------------------------------------------

enum ChainShape {
    Spatial((usize, usize, usize)),
    Flat(usize),
}

fn chain_layer(input: &ChainShape, layer: &WeightLayer) -> std::result::Result<ChainShape, String> {
    match layer.kind {
        LayerKind::Conv => {
            let geom = layer.conv.ok_or("conv layer missing geometry")?;
            let (h, w, c) = match input {
                ChainShape::Spatial(s) => *s,
                ChainShape::Flat(_) => return Err("conv layer cannot follow a flat output".into()),
            };
            if c != layer.in_dim {
                return Err(format!("expects {} input channels, got {c}", layer.in_dim));
            }
            if h + 2 * geom.pad < geom.kernel || w + 2 * geom.pad < geom.kernel {
                return Err("kernel larger than padded input".into());
            }
            let mut oh = (h + 2 * geom.pad - geom.kernel) / geom.stride + 1;
            let mut ow = (w + 2 * geom.pad - geom.kernel) / geom.stride + 1;
            if geom.pool_after {
                oh /= 2;
                ow /= 2;
                if oh == 0 || ow == 0 {
                    return Err("pooled output collapsed to zero".into());
                }
            }
            Ok(ChainShape::Spatial((oh, ow, layer.out_dim)))
        }
        LayerKind::Dense | LayerKind::Logits => {
            let flat = match input {
                ChainShape::Spatial((h, w, c)) => h * w * c,
                ChainShape::Flat(n) => *n,
            };
            if flat != layer.in_dim {
                return Err(format!("expects {} inputs, got {flat}", layer.in_dim));
            }
            Ok(ChainShape::Flat(layer.out_dim))
        }
    }
}

fn apply_activation(fn_: ActivationFn, values: &mut [f64]) {
    match fn_ {
        ActivationFn::Relu => {
            for v in values.iter_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        ActivationFn::Identity | ActivationFn::Softmax => {}
    }
}

fn run_layer(layer: &WeightLayer, input: LayerOutput) -> Result<LayerTrace> {
    match layer.kind {
        LayerKind::Conv => {
            let geom = layer
                .conv
                .ok_or_else(|| Error::Shape("conv layer missing geometry".into()))?;
            let t = match &input {
                LayerOutput::Spatial(t) => t,
                LayerOutput::Flat(_) => {
                    return Err(Error::Shape("conv layer received a flat input".into()))
                }
            };
            if t.c != layer.in_dim {
                return Err(Error::Shape(format!(
                    "conv expects {} channels, got {}",
                    layer.in_dim, t.c
                )));
            }
            let z = conv_forward(t, layer, &geom);
            let mut act = z.clone();
            apply_activation(layer.activation, &mut act.data);
            let (output, pool) = if geom.pool_after {
                let (pooled, argmax) = maxpool2_forward(&act);
                (LayerOutput::Spatial(pooled), Some((act.shape(), argmax)))
            } else {
                (LayerOutput::Spatial(act.clone()), None)
            };
            Ok(LayerTrace {
                input,
                pre_act: LayerOutput::Spatial(z),
                pool,
                output,
            })
        }
        LayerKind::Dense | LayerKind::Logits => {
            let flat: Vec<f64> = match &input {
                LayerOutput::Spatial(t) => t.data.clone(),
                LayerOutput::Flat(v) => v.clone(),
            };
            if flat.len() != layer.in_dim {
                return Err(Error::Shape(format!(
                    "dense expects {} inputs, got {}",
                    layer.in_dim,
                    flat.len()
                )));
            }
            let mut z = layer.bias.clone();
            for (i, &x) in flat.iter().enumerate() {
                if x == 0.0 {
                    continue;
                }
                let row = &layer.weights[i * layer.out_dim..(i + 1) * layer.out_dim];
                for (o, &w) in row.iter().enumerate() {
                    z[o] += w * x;
                }
            }
            let mut act = z.clone();
            apply_activation(layer.activation, &mut act);
            Ok(LayerTrace {
                input,
                pre_act: LayerOutput::Flat(z),
                pool: None,
                output: LayerOutput::Flat(act),
            })
        }
    }
}

fn conv_forward(input: &Tensor3, layer: &WeightLayer, geom: &ConvGeom) -> Tensor3 {
    let oh = (input.h + 2 * geom.pad - geom.kernel) / geom.stride + 1;
    let ow = (input.w + 2 * geom.pad - geom.kernel) / geom.stride + 1;
    let out_c = layer.out_dim;
    let in_c = layer.in_dim;
    let mut out = Tensor3::zeros(oh, ow, out_c);
    for oy in 0..oh {
        for ox in 0..ow {
            let base = (oy * ow + ox) * out_c;
            out.data[base..base + out_c].copy_from_slice(&layer.bias);
            for ky in 0..geom.kernel {
                let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                if iy < 0 || iy >= input.h as isize {
                    continue;
                }
                for kx in 0..geom.kernel {
                    let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                    if ix < 0 || ix >= input.w as isize {
                        continue;
                    }
                    let in_base = (iy as usize * input.w + ix as usize) * in_c;
                    let w_base = (ky * geom.kernel + kx) * in_c * out_c;
                    for ic in 0..in_c {
                        let x = input.data[in_base + ic];
                        if x == 0.0 {
                            continue;
                        }
                        let w_row = &layer.weights[w_base + ic * out_c..w_base + (ic + 1) * out_c];
                        for (oc, &w) in w_row.iter().enumerate() {
                            out.data[base + oc] += w * x;
                        }
                    }
                }
            }
        }
    }
    out
}

/// 2x2 stride-2 max pool; odd trailing rows/cols are dropped. Returns the
/// pooled tensor and, per pooled element, the flat source index of the max.
fn maxpool2_forward(input: &Tensor3) -> (Tensor3, Vec<usize>) {
    let oh = input.h / 2;
    let ow = input.w / 2;
    let mut out = Tensor3::zeros(oh, ow, input.c);
    let mut argmax = vec![0usize; oh * ow * input.c];
    for oy in 0..oh {
        for ox in 0..ow {
            for c in 0..input.c {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let idx = input.idx(oy * 2 + dy, ox * 2 + dx, c);
                        if input.data[idx] > best {
                            best = input.data[idx];
                            best_idx = idx;
                        }
                    }
                }
                let out_idx = out.idx(oy, ox, c);
                out.data[out_idx] = best;
                argmax[out_idx] = best_idx;
            }
        }
    }
    (out, argmax)
}

/// Walks the traces backwards from the logits pre-activation gradient,
/// accumulating parameter gradients.
fn backward(
    b: &LayeredBackbone,
    traces: &[LayerTrace],
    logits_dz: Vec<f64>,
    grads: &mut Gradients,
) -> Result<()> {
    // d(loss)/d(layer output) flowing backwards.
    let mut dout = LayerOutput::Flat(logits_dz);
    for (idx, layer) in b.layers.iter().enumerate().rev() {
        let trace = &traces[idx];
        let is_logits = idx == b.layers.len() - 1;
        dout = backward_layer(layer, trace, dout, is_logits, &mut grads.dw[idx], &mut grads.db[idx])?;
    }
    Ok(())
}

fn backward_layer(
    layer: &WeightLayer,
    trace: &LayerTrace,
    dout: LayerOutput,
    dz_given: bool,
    dw: &mut [f64],
    db: &mut [f64],
) -> Result<LayerOutput> {
    match layer.kind {
        LayerKind::Dense | LayerKind::Logits => {
            let dpost = match dout {
                LayerOutput::Flat(v) => v,
                LayerOutput::Spatial(_) => {
                    return Err(Error::Shape("dense backward got spatial gradient".into()))
                }
            };
            let z = match &trace.pre_act {
                LayerOutput::Flat(v) => v,
                _ => unreachable!("dense pre-activation is flat"),
            };
            // dz_given means dout already is dL/dz (softmax + CE at logits).
            let dz: Vec<f64> = if dz_given {
                dpost
            } else {
                match layer.activation {
                    ActivationFn::Relu => dpost
                        .iter()
                        .zip(z.iter())
                        .map(|(&g, &zv)| if zv > 0.0 { g } else { 0.0 })
                        .collect(),
                    ActivationFn::Identity | ActivationFn::Softmax => dpost,
                }
            };
            let input: Vec<f64> = match &trace.input {
                LayerOutput::Spatial(t) => t.data.clone(),
                LayerOutput::Flat(v) => v.clone(),
            };
            for (o, &g) in dz.iter().enumerate() {
                db[o] += g;
            }
            let mut din = vec![0.0; layer.in_dim];
            for (i, &x) in input.iter().enumerate() {
                let row = &layer.weights[i * layer.out_dim..(i + 1) * layer.out_dim];
                let dw_row = &mut dw[i * layer.out_dim..(i + 1) * layer.out_dim];
                let mut acc = 0.0;
                for (o, &g) in dz.iter().enumerate() {
                    dw_row[o] += x * g;
                    acc += row[o] * g;
                }
                din[i] = acc;
            }
            // Reshape the input gradient to the shape the previous layer emitted.
            match &trace.input {
                LayerOutput::Spatial(t) => Ok(LayerOutput::Spatial(Tensor3 {
                    h: t.h,
                    w: t.w,
                    c: t.c,
                    data: din,
                })),
                LayerOutput::Flat(_) => Ok(LayerOutput::Flat(din)),
            }
        }
        LayerKind::Conv => {
            let geom = layer.conv.unwrap();
            let dout_t = match dout {
                LayerOutput::Spatial(t) => t,
                LayerOutput::Flat(_) => {
                    return Err(Error::Shape("conv backward got flat gradient".into()))
                }
            };
            // Un-pool if the layer pooled.
            let dpost = if let Some((pre_shape, argmax)) = &trace.pool {
                let mut d = Tensor3::zeros(pre_shape.0, pre_shape.1, pre_shape.2);
                for (out_idx, &src_idx) in argmax.iter().enumerate() {
                    d.data[src_idx] += dout_t.data[out_idx];
                }
                d
            } else {
                dout_t
            };
            let z = match &trace.pre_act {
                LayerOutput::Spatial(t) => t,
                _ => unreachable!("conv pre-activation is spatial"),
            };
            let mut dz = dpost;
            if layer.activation == ActivationFn::Relu {
                for (g, &zv) in dz.data.iter_mut().zip(z.data.iter()) {
                    if zv <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            let input = match &trace.input {
                LayerOutput::Spatial(t) => t,
                _ => return Err(Error::Shape("conv layer received a flat input".into())),
            };
            let (in_c, out_c) = (layer.in_dim, layer.out_dim);
            let mut din = Tensor3::zeros(input.h, input.w, input.c);
            for oy in 0..dz.h {
                for ox in 0..dz.w {
                    let g_base = (oy * dz.w + ox) * out_c;
                    for oc in 0..out_c {
                        let g = dz.data[g_base + oc];
                        if g == 0.0 {
                            continue;
                        }
                        db[oc] += g;
                        for ky in 0..geom.kernel {
                            let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                            if iy < 0 || iy >= input.h as isize {
                                continue;
                            }
                            for kx in 0..geom.kernel {
                                let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                                if ix < 0 || ix >= input.w as isize {
                                    continue;
                                }
                                let in_base = (iy as usize * input.w + ix as usize) * in_c;
                                let w_base = (ky * geom.kernel + kx) * in_c * out_c + oc;
                                for ic in 0..in_c {
                                    let x = input.data[in_base + ic];
                                    dw[w_base + ic * out_c] += x * g;
                                    din.data[in_base + ic] += layer.weights[w_base + ic * out_c] * g;
                                }
                            }
                        }
                    }
                }
            }
            Ok(LayerOutput::Spatial(din))
        }
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum: f64 = logits.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
    log_sum - logits[label]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_input(seed: u64) -> Tensor3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Tensor3::zeros(16, 16, 1);
        for v in &mut t.data {
            *v = rng.gen_range(0.0..1.0);
        }
        t
    }

    #[test]
    fn fraction_mappings_match_the_16_layer_descriptor() {
        use SelectionMode::*;
        assert_eq!(layers_for_fraction(16, FreezePrefix, 0.25).unwrap(), 4);
        assert_eq!(layers_for_fraction(16, FreezePrefix, 0.50).unwrap(), 8);
        assert_eq!(layers_for_fraction(16, FreezePrefix, 0.75).unwrap(), 12);
        assert_eq!(layers_for_fraction(16, ExtractSuffix, 0.25).unwrap(), 3);
        assert_eq!(layers_for_fraction(16, ExtractSuffix, 0.50).unwrap(), 7);
        assert_eq!(layers_for_fraction(16, ExtractSuffix, 0.75).unwrap(), 11);
        assert_eq!(layers_for_fraction(16, ExtractSuffix, 1.0).unwrap(), 15);
        assert!(layers_for_fraction(16, FreezePrefix, 0.0).is_err());
        assert!(layers_for_fraction(16, FreezePrefix, 1.5).is_err());
        assert!(layers_for_fraction(1, FreezePrefix, 0.5).is_err());
        // clamped to at least one layer
        assert_eq!(layers_for_fraction(4, ExtractSuffix, 0.25).unwrap(), 1);
    }

    #[test]
    fn toy_backbone_is_valid_and_small() {
        let b = LayeredBackbone::toy(3);
        b.validate().unwrap();
        let params: usize = b.layers.iter().map(|l| l.n_params()).sum();
        assert!(params < 12_000, "toy backbone has {params} params");
        assert_eq!(b.weight_layer_count(), 4);
    }

    #[test]
    fn vgg16_descriptor_shapes() {
        let dims = vgg16_dims();
        assert_eq!(dims.len(), 16);
        assert_eq!(dims[0].1, vec![3, 3, 3, 64]);
        assert_eq!(dims[13].1, vec![25088, 4096]);
        assert_eq!(dims[15].0, LayerKind::Logits);
    }

    #[test]
    fn freeze_prefix_counts_and_idempotence() {
        let b = LayeredBackbone::toy(1);
        let f = b.freeze_prefix(0.5).unwrap();
        let frozen: Vec<bool> = f.layers.iter().map(|l| l.frozen).collect();
        assert_eq!(frozen, vec![true, true, false, false]);
        // parameters untouched
        for (a, c) in b.layers.iter().zip(f.layers.iter()) {
            assert_eq!(a.weights, c.weights);
            assert_eq!(a.bias, c.bias);
        }
        let ff = f.freeze_prefix(0.5).unwrap();
        assert_eq!(f, ff);
    }

    #[test]
    fn reinit_last_two_contract() {
        let b = LayeredBackbone::toy(2);
        let r = b.reinit_last_two(101, 9).unwrap();
        assert_eq!(r.n_classes(), 101);
        for i in 0..2 {
            assert_eq!(b.layers[i].weights, r.layers[i].weights);
            assert_eq!(b.layers[i].bias, r.layers[i].bias);
        }
        assert_ne!(b.layers[2].weights, r.layers[2].weights);
        let r2 = b.reinit_last_two(101, 9).unwrap();
        assert_eq!(r.layers, r2.layers);
        let r3 = b.reinit_last_two(101, 10).unwrap();
        assert_ne!(r.layers[2].weights, r3.layers[2].weights);
        assert!(b.reinit_last_two(1, 0).is_err());
    }

    #[test]
    fn forward_collect_shapes_and_suffix_rule() {
        let b = LayeredBackbone::toy(4);
        let img = toy_input(7);
        let full = LayerSelection::new(SelectionMode::ExtractSuffix, 1.0, 4).unwrap();
        let caps = b.collect_one(&img, &full).unwrap();
        assert_eq!(caps.len(), 3);
        // deepest first: dense 32, conv 16, conv 8
        assert_eq!(caps[0].channels(), 32);
        assert_eq!(caps[1].channels(), 16);
        assert_eq!(caps[2].channels(), 8);

        let one = LayerSelection::new(SelectionMode::ExtractSuffix, 0.25, 4).unwrap();
        let caps = b.collect_one(&img, &one).unwrap();
        assert_eq!(caps.len(), 1);
        assert_eq!(caps[0].channels(), 32);
        assert!(matches!(caps[0], LayerOutput::Flat(_)));
    }

    #[test]
    fn zero_weights_give_zero_activations() {
        let mut b = LayeredBackbone::toy(5);
        for l in &mut b.layers {
            l.weights.iter_mut().for_each(|w| *w = 0.0);
            l.bias.iter_mut().for_each(|v| *v = 0.0);
        }
        let sel = LayerSelection::new(SelectionMode::ExtractSuffix, 1.0, 4).unwrap();
        let caps = b.collect_one(&toy_input(1), &sel).unwrap();
        for cap in caps {
            match cap {
                LayerOutput::Spatial(t) => assert!(t.data.iter().all(|&v| v == 0.0)),
                LayerOutput::Flat(v) => assert!(v.iter().all(|&x| x == 0.0)),
            }
        }
    }

    /// Straight-line reimplementation of the toy forward pass, kept
    /// independent of the layer walker.
    fn straight_line_toy_forward(b: &LayeredBackbone, img: &Tensor3) -> (Tensor3, Tensor3, Vec<f64>) {
        let conv = |input: &Tensor3, l: &WeightLayer| -> Tensor3 {
            let g = l.conv.unwrap();
            let oh = (input.h + 2 * g.pad - g.kernel) / g.stride + 1;
            let ow = (input.w + 2 * g.pad - g.kernel) / g.stride + 1;
            let mut out = Tensor3::zeros(oh, ow, l.out_dim);
            for oy in 0..oh {
                for ox in 0..ow {
                    for oc in 0..l.out_dim {
                        let mut acc = l.bias[oc];
                        for ky in 0..g.kernel {
                            for kx in 0..g.kernel {
                                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if iy < 0 || ix < 0 || iy >= input.h as isize || ix >= input.w as isize {
                                    continue;
                                }
                                for ic in 0..l.in_dim {
                                    let w = l.weights
                                        [((ky * g.kernel + kx) * l.in_dim + ic) * l.out_dim + oc];
                                    acc += w * input.get(iy as usize, ix as usize, ic);
                                }
                            }
                        }
                        out.set(oy, ox, oc, acc.max(0.0));
                    }
                }
            }
            out
        };
        let a1 = conv(img, &b.layers[0]);
        let a2 = conv(&a1, &b.layers[1]);
        let l3 = &b.layers[2];
        let mut a3 = vec![0.0; l3.out_dim];
        for o in 0..l3.out_dim {
            let mut acc = l3.bias[o];
            for (i, &x) in a2.data.iter().enumerate() {
                acc += l3.weights[i * l3.out_dim + o] * x;
            }
            a3[o] = acc.max(0.0);
        }
        (a1, a2, a3)
    }

    #[test]
    fn collected_activations_match_straight_line_forward() {
        let b = LayeredBackbone::toy(6);
        let img = toy_input(13);
        let (a1, a2, a3) = straight_line_toy_forward(&b, &img);
        let sel = LayerSelection::new(SelectionMode::ExtractSuffix, 1.0, 4).unwrap();
        let caps = b.collect_one(&img, &sel).unwrap();
        match (&caps[2], &caps[1], &caps[0]) {
            (LayerOutput::Spatial(c1), LayerOutput::Spatial(c2), LayerOutput::Flat(c3)) => {
                for (x, y) in c1.data.iter().zip(a1.data.iter()) {
                    assert!((x - y).abs() < 1e-12);
                }
                for (x, y) in c2.data.iter().zip(a2.data.iter()) {
                    assert!((x - y).abs() < 1e-12);
                }
                for (x, y) in c3.iter().zip(a3.iter()) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
            other => panic!("unexpected capture kinds: {other:?}"),
        }
    }

    #[test]
    fn container_round_trip_bitwise() {
        let b = LayeredBackbone::toy(8);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.weights");
        b.export_weights(&path).unwrap();
        let fresh = LayeredBackbone::toy(999); // same shape, different params
        let imported = fresh.import_weights(&path).unwrap();
        let img = toy_input(3);
        let a = b.forward(&img).unwrap();
        let c = imported.forward(&img).unwrap();
        assert_eq!(a, c);
        assert!(imported.id.contains('#'));
    }

    #[test]
    fn import_rejects_mismatched_shapes() {
        let b = LayeredBackbone::toy(8);
        let dir = tempfile::tempdir().unwrap();

        // transposed dense matrix
        let mut entries: Vec<ContainerEntry> = b
            .layers
            .iter()
            .map(|l| ContainerEntry {
                kind: l.kind_byte(),
                dims: l.weight_dims(),
                values: l.weights.clone(),
                bias: l.bias.clone(),
            })
            .collect();
        entries[2].dims = vec![32, 256];
        let path = dir.path().join("transposed.weights");
        container::write(&path, &entries).unwrap();
        match b.import_weights(&path) {
            Err(Error::Import(msg)) => assert!(msg.contains("layer 2")),
            other => panic!("expected ImportError, got {other:?}"),
        }

        // wrong layer count
        let path2 = dir.path().join("short.weights");
        let short: Vec<ContainerEntry> = entries[..3].to_vec();
        container::write(&path2, &short).unwrap();
        assert!(matches!(b.import_weights(&path2), Err(Error::Import(_))));
    }

    #[test]
    fn maxpool_layer_forward_and_backward_shapes() {
        // A pooled conv stack exercises the VGG16-style geometry.
        let geom = ConvGeom {
            kernel: 3,
            stride: 1,
            pad: 1,
            pool_after: true,
        };
        let mut layers = vec![
            WeightLayer::conv(1, 4, geom),
            WeightLayer::dense(8 * 8 * 4, 16),
            WeightLayer::logits(16, 3),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for l in &mut layers {
            l.reinit(&mut rng);
        }
        let b = LayeredBackbone {
            id: "pooled".into(),
            layers,
            input_shape: (16, 16, 1),
            source_tag: SourceTag::Other("toy".into()),
        };
        b.validate().unwrap();
        let img = toy_input(40);
        let logits = b.forward(&img).unwrap();
        assert_eq!(logits.len(), 3);
        let (_, grads) = b.loss_and_gradients(&[(&img, 1)]).unwrap();
        assert_eq!(grads.dw[0].len(), b.layers[0].weights.len());
        assert!(grads.dw[0].iter().any(|&g| g != 0.0));
    }

    #[test]
    fn gradients_match_central_finite_differences() {
        let b = LayeredBackbone::toy(17);
        let images: Vec<Tensor3> = (0..4).map(|i| toy_input(100 + i)).collect();
        let batch: Vec<(&Tensor3, usize)> =
            images.iter().enumerate().map(|(i, t)| (t, i % 3)).collect();
        let (_, grads) = b.loss_and_gradients(&batch).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let mut checked = 0;
        while checked < 25 {
            let li = rng.gen_range(0..b.layers.len());
            let wi = rng.gen_range(0..b.layers[li].weights.len());
            let analytic = grads.dw[li][wi];
            let h = 1e-5 * b.layers[li].weights[wi].abs().max(1.0);
            let mut plus = b.clone();
            plus.layers[li].weights[wi] += h;
            let mut minus = b.clone();
            minus.layers[li].weights[wi] -= h;
            let fd = (plus.loss_on_batch(&batch).unwrap() - minus.loss_on_batch(&batch).unwrap())
                / (2.0 * h);
            let denom = analytic.abs().max(fd.abs());
            if denom < 1e-4 {
                continue; // too little signal for a stable relative error
            }
            let rel = (analytic - fd).abs() / denom;
            assert!(
                rel < 1e-5,
                "layer {li} weight {wi}: analytic {analytic}, fd {fd}, rel {rel}"
            );
            checked += 1;
        }
    }

    #[test]
    fn softmax_cross_entropy_consistency() {
        let logits = vec![2.0, -1.0, 0.5];
        let p = softmax(&logits);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let ce = cross_entropy(&logits, 0);
        assert!((ce - (-p[0].ln())).abs() < 1e-12);
    }
}
