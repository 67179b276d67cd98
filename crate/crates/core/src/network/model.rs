//! The two-branch fusion classifier and its manual reverse pass.

use ndarray::{s, Array2, Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{max_pool, max_pool_backward, Activation, Conv2d, ConvCache, DenseGrads, DenseLayer};
use super::ops::{cross_entropy_row, rmsprop_step, softmax_rows};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Fusion,
    LeapOnly,
    ImageOnly,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::LeapOnly, Modality::ImageOnly, Modality::Fusion];

    pub fn as_str(&self) -> &'static str {
        match self {
            Modality::Fusion => "fusion",
            Modality::LeapOnly => "leap_only",
            Modality::ImageOnly => "image_only",
        }
    }

    pub fn uses_leap(&self) -> bool {
        *self != Modality::ImageOnly
    }

    pub fn uses_image(&self) -> bool {
        *self != Modality::LeapOnly
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fusion" => Ok(Modality::Fusion),
            "leap_only" => Ok(Modality::LeapOnly),
            "image_only" => Ok(Modality::ImageOnly),
            other => Err(Error::InvalidConfig {
                key: "modality".into(),
                reason: format!("unknown modality `{other}`"),
            }),
        }
    }
}

/// Layer sizes of a fusion model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub frames: usize,
    pub features: usize,
    pub image_side: usize,
    pub classes: usize,
    /// Time-distributed dense widths of the motion branch.
    pub leap_units: Vec<usize>,
    /// Hidden widths of the fusion head (the class layer is implicit).
    pub head_units: Vec<usize>,
    /// Convolution widths per backbone block; each block ends in a 2x2 pool.
    pub backbone_blocks: Vec<Vec<usize>>,
    /// Width of the dense layer appended to the backbone.
    pub backbone_features: usize,
}

impl Architecture {
    pub fn new(classes: usize, image_side: usize) -> Self {
        Architecture {
            frames: crate::dataset::FRAMES_PER_REPETITION,
            features: crate::features::FRAME_LEN,
            image_side,
            classes,
            leap_units: vec![512, 256, 128],
            head_units: vec![256, 128],
            backbone_blocks: vec![vec![8], vec![16], vec![32]],
            backbone_features: 128,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: &str| {
            Err(Error::InvalidConfig {
                key: key.into(),
                reason: reason.into(),
            })
        };
        if self.classes < 1 {
            return bad("classes", "at least one class is required");
        }
        if self.frames == 0 || self.features == 0 {
            return bad("frames", "motion input must be non-empty");
        }
        if self.leap_units.is_empty() || self.leap_units.contains(&0) {
            return bad("leap_units", "need at least one non-zero layer");
        }
        if self.head_units.contains(&0) || self.backbone_features == 0 {
            return bad("head_units", "layer widths must be non-zero");
        }
        if self.backbone_blocks.is_empty() || self.backbone_blocks.iter().any(|b| b.is_empty() || b.contains(&0)) {
            return bad("backbone_blocks", "every block needs at least one non-zero convolution");
        }
        if self.image_side >> self.backbone_blocks.len() == 0 {
            return bad("image_side", "image is too small for the number of pooling blocks");
        }
        Ok(())
    }

    pub fn leap_output_dim(&self) -> usize {
        self.frames * self.leap_units.last().copied().unwrap_or(0)
    }

    fn pooled_side(&self) -> usize {
        self.image_side >> self.backbone_blocks.len()
    }

    pub fn backbone_flat_dim(&self) -> usize {
        let channels = self.backbone_blocks.last().and_then(|b| b.last()).copied().unwrap_or(0);
        self.pooled_side() * self.pooled_side() * channels
    }

    pub fn fusion_input_dim(&self) -> usize {
        self.leap_output_dim() + self.backbone_features
    }
}

/// Convolutional feature extractor: blocks of 3x3 conv + ReLU, each ending
/// in a 2x2 max pool, then flattening and one dense ReLU layer.
///
/// When `frozen`, only the appended dense layer is trained.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBackbone {
    pub blocks: Vec<Vec<Conv2d>>,
    pub projection: DenseLayer,
    pub frozen: bool,
}

/// Externally supplied backbone weights.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BackboneWeights {
    /// `[block][conv] -> (weights out x 9*in, row-major; bias)`
    pub convs: Vec<Vec<(Vec<f64>, Vec<f64>)>>,
    pub projection: Option<(Vec<f64>, Vec<f64>)>,
}

impl ImageBackbone {
    fn init<R: Rng>(arch: &Architecture, frozen: bool, rng: &mut R) -> Self {
        let mut in_ch = 3;
        let mut blocks = Vec::new();
        for widths in &arch.backbone_blocks {
            let mut convs = Vec::new();
            for &out in widths {
                convs.push(Conv2d::init(in_ch, out, rng));
                in_ch = out;
            }
            blocks.push(convs);
        }
        let projection = DenseLayer::init(
            arch.backbone_flat_dim(),
            arch.backbone_features,
            Activation::Relu,
            0.0,
            rng,
        );
        ImageBackbone {
            blocks,
            projection,
            frozen,
        }
    }

    pub fn load_weights(&mut self, weights: &BackboneWeights) -> Result<()> {
        if weights.convs.len() != self.blocks.len() {
            return Err(Error::ShapeMismatch(format!(
                "backbone has {} blocks, weights have {}",
                self.blocks.len(),
                weights.convs.len()
            )));
        }
        for (block, src) in self.blocks.iter_mut().zip(&weights.convs) {
            if block.len() != src.len() {
                return Err(Error::ShapeMismatch("convolution count differs".into()));
            }
            for (conv, (w, b)) in block.iter_mut().zip(src) {
                copy_into(conv.weights.as_slice_mut().expect("contiguous"), w)?;
                copy_into(conv.bias.as_slice_mut().expect("contiguous"), b)?;
            }
        }
        if let Some((w, b)) = &weights.projection {
            copy_into(self.projection.weights.as_slice_mut().expect("contiguous"), w)?;
            copy_into(self.projection.bias.as_slice_mut().expect("contiguous"), b)?;
        }
        Ok(())
    }
}

fn copy_into(dst: &mut [f64], src: &[f64]) -> Result<()> {
    if dst.len() != src.len() {
        return Err(Error::ShapeMismatch(format!(
            "parameter has {} values, source has {}",
            dst.len(),
            src.len()
        )));
    }
    dst.copy_from_slice(src);
    Ok(())
}

/// Per-parameter RMSprop accumulators, aligned with [`FusionModel::parameters`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RmsPropState {
    pub accum: Vec<Vec<f64>>,
}

/// A stacked mini-batch. Motion frames are `(batch * frames) x features`.
#[derive(Clone, Debug)]
pub struct Batch {
    pub frames: Array2<f64>,
    pub images: Array4<f64>,
    pub len: usize,
}

impl Batch {
    pub fn stack<'a, I>(items: I, frames: usize, features: usize, side: usize) -> Result<Batch>
    where
        I: IntoIterator<Item = (&'a Array2<f64>, &'a Array3<f64>)>,
    {
        let items: Vec<_> = items.into_iter().collect();
        let n = items.len();
        let mut stacked = Array2::zeros((n * frames, features));
        let mut images = Array4::zeros((n, side, side, 3));
        for (i, (f, img)) in items.into_iter().enumerate() {
            if f.dim() != (frames, features) {
                return Err(Error::ShapeMismatch(format!(
                    "motion matrix is {:?}, model expects ({frames}, {features})",
                    f.dim()
                )));
            }
            if img.dim() != (side, side, 3) {
                return Err(Error::ShapeMismatch(format!(
                    "image is {:?}, model expects ({side}, {side}, 3)",
                    img.dim()
                )));
            }
            stacked.slice_mut(s![i * frames..(i + 1) * frames, ..]).assign(f);
            images.slice_mut(s![i, .., .., ..]).assign(img);
        }
        Ok(Batch {
            frames: stacked,
            images,
            len: n,
        })
    }
}

pub enum Pass<'a> {
    /// Dropout active, masks drawn from the given generator.
    Train(&'a mut ChaCha8Rng),
    Infer,
}

struct DenseStackCache {
    inputs: Vec<Array2<f64>>,
    outputs: Vec<Array2<f64>>,
    masks: Vec<Option<Array2<f64>>>,
}

struct BlockCache {
    convs: Vec<ConvCache>,
    pool_argmax: Vec<usize>,
    pool_in_dims: (usize, usize, usize, usize),
}

struct ImageCache {
    blocks: Vec<BlockCache>,
    flat: Array2<f64>,
    features: Array2<f64>,
}

/// Everything the reverse pass needs from one forward pass.
pub struct ForwardCache {
    revision: u64,
    len: usize,
    leap: Option<DenseStackCache>,
    image: Option<ImageCache>,
    head: DenseStackCache,
    probs: Array2<f64>,
}

impl ForwardCache {
    /// Softmax outputs, one row per sample.
    pub fn probs(&self) -> &Array2<f64> {
        &self.probs
    }

    pub fn revision(&self) -> u64 {
        self.revision
    }

    /// Mean cross-entropy over the batch (no penalty term).
    pub fn cross_entropy(&self, targets: &[usize]) -> f64 {
        let total: f64 = self
            .probs
            .axis_iter(Axis(0))
            .zip(targets)
            .map(|(p, &t)| cross_entropy_row(p, t))
            .sum();
        total / self.len as f64
    }
}

/// Gradients aligned with [`FusionModel::parameters`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Vec<f64>>,
}

fn draw_mask(shape: (usize, usize), rate: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let scale = 1.0 / (1.0 - rate);
    Array2::from_shape_simple_fn(shape, || if rng.random::<f64>() >= rate { scale } else { 0.0 })
}

fn dense_stack_forward(
    layers: &[DenseLayer],
    input: Array2<f64>,
    dropout_after: impl Fn(usize) -> bool,
    rate: f64,
    pass: &mut Pass<'_>,
    keep: bool,
) -> (Array2<f64>, Option<DenseStackCache>) {
    let mut cache = DenseStackCache {
        inputs: Vec::new(),
        outputs: Vec::new(),
        masks: Vec::new(),
    };
    let mut x = input;
    for (i, layer) in layers.iter().enumerate() {
        let y = layer.forward(&x);
        let mask = match pass {
            Pass::Train(rng) if rate > 0.0 && dropout_after(i) => Some(draw_mask(y.dim(), rate, rng)),
            _ => None,
        };
        let next = match &mask {
            Some(m) => &y * m,
            None => y.clone(),
        };
        if keep {
            cache.inputs.push(x);
            cache.outputs.push(y);
            cache.masks.push(mask);
        }
        x = next;
    }
    (x, keep.then_some(cache))
}

/// Returns parameter gradients per layer (in order) and the input gradient.
fn dense_stack_backward(
    layers: &[DenseLayer],
    cache: &DenseStackCache,
    grad_out: Array2<f64>,
    need_input_grad: bool,
) -> (Vec<DenseGrads>, Option<Array2<f64>>) {
    let mut grads = Vec::with_capacity(layers.len());
    let mut g = grad_out;
    let mut input_grad = None;
    for i in (0..layers.len()).rev() {
        if let Some(mask) = &cache.masks[i] {
            g *= mask;
        }
        let need = i > 0 || need_input_grad;
        let (pg, gin) = layers[i].backward(&cache.inputs[i], &cache.outputs[i], g, need);
        grads.push(pg);
        match gin {
            Some(next) if i > 0 => g = next,
            other => {
                input_grad = other;
                g = Array2::zeros((0, 0));
            }
        }
    }
    grads.reverse();
    (grads, input_grad)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionModel {
    pub arch: Architecture,
    pub modality: Modality,
    pub dropout_rate: f64,
    pub leap: Vec<DenseLayer>,
    pub backbone: ImageBackbone,
    pub head: Vec<DenseLayer>,
    pub optimizer: RmsPropState,
    revision: u64,
}

impl FusionModel {
    /// Randomly initialised model (He-uniform for ReLU layers, zero biases).
    pub fn new(
        arch: Architecture,
        modality: Modality,
        dropout_rate: f64,
        l2_lambda: f64,
        freeze_backbone: bool,
        seed: u64,
    ) -> Result<Self> {
        arch.validate()?;
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(Error::InvalidConfig {
                key: "dropout_rate".into(),
                reason: "must lie in [0, 1)".into(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut leap = Vec::new();
        let mut width = arch.features;
        for &units in &arch.leap_units {
            leap.push(DenseLayer::init(width, units, Activation::Relu, l2_lambda, &mut rng));
            width = units;
        }
        let backbone = ImageBackbone::init(&arch, freeze_backbone, &mut rng);
        let mut head = Vec::new();
        let mut width = arch.fusion_input_dim();
        for &units in &arch.head_units {
            head.push(DenseLayer::init(width, units, Activation::Relu, 0.0, &mut rng));
            width = units;
        }
        head.push(DenseLayer::init(width, arch.classes, Activation::None, 0.0, &mut rng));
        Ok(FusionModel {
            arch,
            modality,
            dropout_rate,
            leap,
            backbone,
            head,
            optimizer: RmsPropState::default(),
            revision: 0,
        })
    }

    /// Same shapes with every weight and bias set to zero.
    pub fn zeroed(arch: Architecture, modality: Modality, l2_lambda: f64) -> Result<Self> {
        let mut model = FusionModel::new(arch, modality, 0.0, l2_lambda, false, 0)?;
        for p in model.parameters_mut() {
            p.fill(0.0);
        }
        Ok(model)
    }

    pub fn revision(&self) -> u64 {
        self.revision
    }

    /// Marks the parameters as changed; outstanding caches become stale.
    pub fn touch(&mut self) {
        self.revision += 1;
    }

    pub fn parameter_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.leap.len() {
            names.push(format!("leap.{i}.weights"));
            names.push(format!("leap.{i}.bias"));
        }
        for (b, block) in self.backbone.blocks.iter().enumerate() {
            for c in 0..block.len() {
                names.push(format!("backbone.{b}.{c}.weights"));
                names.push(format!("backbone.{b}.{c}.bias"));
            }
        }
        names.push("backbone.projection.weights".into());
        names.push("backbone.projection.bias".into());
        for i in 0..self.head.len() {
            names.push(format!("head.{i}.weights"));
            names.push(format!("head.{i}.bias"));
        }
        names
    }

    pub fn parameters(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for l in &self.leap {
            out.push(l.weights.as_slice().expect("contiguous"));
            out.push(l.bias.as_slice().expect("contiguous"));
        }
        for conv in self.backbone.blocks.iter().flatten() {
            out.push(conv.weights.as_slice().expect("contiguous"));
            out.push(conv.bias.as_slice().expect("contiguous"));
        }
        out.push(self.backbone.projection.weights.as_slice().expect("contiguous"));
        out.push(self.backbone.projection.bias.as_slice().expect("contiguous"));
        for l in &self.head {
            out.push(l.weights.as_slice().expect("contiguous"));
            out.push(l.bias.as_slice().expect("contiguous"));
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for l in &mut self.leap {
            out.push(l.weights.as_slice_mut().expect("contiguous"));
            out.push(l.bias.as_slice_mut().expect("contiguous"));
        }
        for conv in self.backbone.blocks.iter_mut().flatten() {
            out.push(conv.weights.as_slice_mut().expect("contiguous"));
            out.push(conv.bias.as_slice_mut().expect("contiguous"));
        }
        out.push(self.backbone.projection.weights.as_slice_mut().expect("contiguous"));
        out.push(self.backbone.projection.bias.as_slice_mut().expect("contiguous"));
        for l in &mut self.head {
            out.push(l.weights.as_slice_mut().expect("contiguous"));
            out.push(l.bias.as_slice_mut().expect("contiguous"));
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|p| p.len()).sum()
    }

    /// `lambda * sum(w^2)` over the weight matrices of penalised layers.
    pub fn l2_penalty(&self) -> f64 {
        self.leap
            .iter()
            .chain(&self.head)
            .chain(std::iter::once(&self.backbone.projection))
            .map(DenseLayer::l2_penalty)
            .sum()
    }

    fn image_forward(&self, images: &Array4<f64>, keep: bool) -> (Array2<f64>, Option<ImageCache>) {
        let keep_cols = keep && !self.backbone.frozen;
        let mut x = images.clone();
        let mut blocks = Vec::new();
        for block in &self.backbone.blocks {
            let mut convs = Vec::new();
            for conv in block {
                let (y, cache) = conv.forward(&x, keep_cols);
                convs.push(cache);
                x = y;
            }
            let pool_in_dims = x.dim();
            let (pooled, pool_argmax) = max_pool(&x);
            blocks.push(BlockCache {
                convs,
                pool_argmax,
                pool_in_dims,
            });
            x = pooled;
        }
        let n = x.dim().0;
        let flat = x
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((n, self.arch.backbone_flat_dim()))
            .expect("pooled map flattens");
        let features = self.backbone.projection.forward(&flat);
        let cache = keep.then(|| ImageCache {
            blocks,
            flat,
            features: features.clone(),
        });
        (features, cache)
    }

    /// Runs both branches (or the one selected by `modality`) and the head.
    ///
    /// An unused branch contributes a zero block to the concatenation, so
    /// the head has the same shape in every modality.
    pub fn forward_batch(&self, batch: &Batch, mut pass: Pass<'_>) -> Result<ForwardCache> {
        self.check_batch(batch)?;
        let n = batch.len;
        let keep = matches!(pass, Pass::Train(_));
        let rate = self.dropout_rate;
        let leap_dim = self.arch.leap_output_dim();
        let mut concat = Array2::zeros((n, self.arch.fusion_input_dim()));

        let leap = if self.modality.uses_leap() {
            let last = self.leap.len() - 1;
            let (out, cache) =
                dense_stack_forward(&self.leap, batch.frames.clone(), |i| i < last, rate, &mut pass, keep);
            let flat = out
                .into_shape_with_order((n, leap_dim))
                .expect("time-distributed output flattens per sample");
            concat.slice_mut(s![.., ..leap_dim]).assign(&flat);
            cache
        } else {
            None
        };

        let image = if self.modality.uses_image() {
            let (features, cache) = self.image_forward(&batch.images, keep);
            concat.slice_mut(s![.., leap_dim..]).assign(&features);
            cache
        } else {
            None
        };

        let last = self.head.len() - 1;
        let (logits, head) = dense_stack_forward(&self.head, concat, |i| i < last, rate, &mut pass, true);
        let probs = softmax_rows(&logits);
        Ok(ForwardCache {
            revision: self.revision,
            len: n,
            leap,
            image,
            head: head.expect("head cache is always kept"),
            probs,
        })
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        let a = &self.arch;
        if batch.frames.dim() != (batch.len * a.frames, a.features) {
            return Err(Error::ShapeMismatch(format!(
                "motion batch is {:?}, expected ({}, {})",
                batch.frames.dim(),
                batch.len * a.frames,
                a.features
            )));
        }
        if batch.images.dim() != (batch.len, a.image_side, a.image_side, 3) {
            return Err(Error::ShapeMismatch(format!(
                "image batch is {:?}, expected ({}, {}, {}, 3)",
                batch.images.dim(),
                batch.len,
                a.image_side,
                a.image_side
            )));
        }
        if batch.len == 0 {
            return Err(Error::ShapeMismatch("empty batch".into()));
        }
        Ok(())
    }

    /// Gradients of mean cross-entropy plus the L2 penalty.
    ///
    /// The cache must come from a training-mode forward pass at the current
    /// revision; dropout masks drawn there are reused.
    pub fn backward(&self, cache: &ForwardCache, targets: &[usize]) -> Result<Gradients> {
        if cache.revision != self.revision {
            return Err(Error::StaleCache {
                cache: cache.revision,
                model: self.revision,
            });
        }
        if targets.len() != cache.len {
            return Err(Error::ShapeMismatch(format!(
                "{} targets for a batch of {}",
                targets.len(),
                cache.len
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= self.arch.classes) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                classes: self.arch.classes,
            });
        }
        if (self.modality.uses_leap() && cache.leap.is_none()) || (self.modality.uses_image() && cache.image.is_none())
        {
            return Err(Error::ShapeMismatch("cache was produced by an inference pass".into()));
        }

        let n = cache.len;
        let mut g = cache.probs.clone();
        for (mut row, &t) in g.axis_iter_mut(Axis(0)).zip(targets) {
            row[t] -= 1.0;
        }
        g /= n as f64;

        let (head_grads, concat_grad) = dense_stack_backward(&self.head, &cache.head, g, true);
        let concat_grad = concat_grad.expect("input gradient requested");
        let leap_dim = self.arch.leap_output_dim();

        let mut leap_grads: Vec<DenseGrads> = self
            .leap
            .iter()
            .map(|l| DenseGrads {
                weights: Array2::zeros(l.weights.dim()),
                bias: ndarray::Array1::zeros(l.bias.len()),
            })
            .collect();
        if let Some(lc) = &cache.leap {
            let units = *self.arch.leap_units.last().expect("validated");
            let g = concat_grad
                .slice(s![.., ..leap_dim])
                .to_owned()
                .into_shape_with_order((n * self.arch.frames, units))
                .expect("per-frame gradient");
            leap_grads = dense_stack_backward(&self.leap, lc, g, false).0;
        }
        for (grad, layer) in leap_grads.iter_mut().zip(&self.leap) {
            if layer.l2_lambda != 0.0 {
                grad.weights.scaled_add(2.0 * layer.l2_lambda, &layer.weights);
            }
        }

        let mut conv_grads: Vec<DenseGrads> = self
            .backbone
            .blocks
            .iter()
            .flatten()
            .map(|c| DenseGrads {
                weights: Array2::zeros(c.weights.dim()),
                bias: ndarray::Array1::zeros(c.bias.len()),
            })
            .collect();
        let proj = &self.backbone.projection;
        let mut proj_grads = DenseGrads {
            weights: Array2::zeros(proj.weights.dim()),
            bias: ndarray::Array1::zeros(proj.bias.len()),
        };
        if let Some(ic) = &cache.image {
            let g = concat_grad.slice(s![.., leap_dim..]).to_owned();
            let need_flat = !self.backbone.frozen;
            let (pg, flat_grad) = proj.backward(&ic.flat, &ic.features, g, need_flat);
            proj_grads = pg;
            if let Some(flat_grad) = flat_grad {
                conv_grads = self.conv_backward(ic, flat_grad);
            }
        }

        let mut tensors = Vec::new();
        for g in leap_grads {
            tensors.push(g.weights.into_raw_vec_and_offset().0);
            tensors.push(g.bias.into_raw_vec_and_offset().0);
        }
        for g in conv_grads {
            tensors.push(g.weights.into_raw_vec_and_offset().0);
            tensors.push(g.bias.into_raw_vec_and_offset().0);
        }
        tensors.push(proj_grads.weights.into_raw_vec_and_offset().0);
        tensors.push(proj_grads.bias.into_raw_vec_and_offset().0);
        for g in head_grads {
            tensors.push(g.weights.into_raw_vec_and_offset().0);
            tensors.push(g.bias.into_raw_vec_and_offset().0);
        }
        Ok(Gradients { tensors })
    }

    fn conv_backward(&self, ic: &ImageCache, flat_grad: Array2<f64>) -> Vec<DenseGrads> {
        let n = flat_grad.nrows();
        let side = self.arch.image_side >> self.backbone.blocks.len();
        let channels = self
            .backbone
            .blocks
            .last()
            .and_then(|b| b.last())
            .expect("validated")
            .out_channels();
        let mut g = flat_grad
            .into_shape_with_order((n, side, side, channels))
            .expect("flat gradient reshapes to the pooled map");
        let mut per_block: Vec<Vec<DenseGrads>> = Vec::new();
        for (bi, (block, bc)) in self.backbone.blocks.iter().zip(&ic.blocks).enumerate().rev() {
            g = max_pool_backward(&g, &bc.pool_argmax, bc.pool_in_dims);
            let mut grads = Vec::new();
            for (ci, (conv, cc)) in block.iter().zip(&bc.convs).enumerate().rev() {
                let need = bi > 0 || ci > 0;
                let (pg, gin) = conv.backward(cc, &g, need);
                grads.push(pg);
                if let Some(next) = gin {
                    g = next;
                }
            }
            grads.reverse();
            per_block.push(grads);
        }
        per_block.reverse();
        per_block.into_iter().flatten().collect()
    }

    /// Applies one RMSprop step with the given gradients.
    pub fn apply_gradients(&mut self, grads: &Gradients, lr: f64, rho: f64, eps: f64) -> Result<()> {
        let frozen = self.frozen_mask();
        let mut accum = std::mem::take(&mut self.optimizer.accum);
        let params = self.parameters_mut();
        if grads.tensors.len() != params.len() {
            return Err(Error::ShapeMismatch("gradient tensor count differs".into()));
        }
        if accum.len() != params.len() {
            accum = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        for (((param, grad), acc), frozen) in params.into_iter().zip(&grads.tensors).zip(accum.iter_mut()).zip(frozen) {
            if frozen {
                continue;
            }
            if grad.len() != param.len() {
                return Err(Error::ShapeMismatch("gradient tensor size differs".into()));
            }
            rmsprop_step(param, grad, acc, lr, rho, eps);
        }
        self.optimizer.accum = accum;
        self.touch();
        Ok(())
    }

    /// True for tensors excluded from optimisation (frozen convolutions).
    pub fn frozen_mask(&self) -> Vec<bool> {
        let convs = self.backbone.blocks.iter().map(Vec::len).sum::<usize>();
        let mut mask = vec![false; 2 * self.leap.len()];
        mask.extend(std::iter::repeat_n(self.backbone.frozen, 2 * convs));
        mask.extend(std::iter::repeat_n(false, 2 + 2 * self.head.len()));
        mask
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_arch(classes: usize) -> Architecture {
        Architecture {
            frames: 4,
            features: 12,
            image_side: 8,
            classes,
            leap_units: vec![6, 5, 3],
            head_units: vec![7, 4],
            backbone_blocks: vec![vec![2], vec![3], vec![4]],
            backbone_features: 5,
        }
    }

    fn batch(arch: &Architecture, n: usize, seed: u64) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames: Vec<Array2<f64>> = (0..n)
            .map(|_| Array2::from_shape_simple_fn((arch.frames, arch.features), || rng.random()))
            .collect();
        let images: Vec<Array3<f64>> = (0..n)
            .map(|_| Array3::from_shape_simple_fn((arch.image_side, arch.image_side, 3), || rng.random()))
            .collect();
        Batch::stack(frames.iter().zip(&images), arch.frames, arch.features, arch.image_side).unwrap()
    }

    #[test]
    fn dimensions_line_up() {
        let arch = Architecture::new(18, 32);
        assert_eq!(arch.leap_output_dim(), 9344);
        assert_eq!(arch.backbone_flat_dim(), 4 * 4 * 32);
        assert_eq!(arch.fusion_input_dim(), 9344 + 128);
    }

    #[test]
    fn parameter_views_agree() {
        let mut m = FusionModel::new(tiny_arch(3), Modality::Fusion, 0.2, 0.01, false, 1).unwrap();
        let names = m.parameter_names();
        let lens: Vec<usize> = m.parameters().iter().map(|p| p.len()).collect();
        assert_eq!(names.len(), lens.len());
        assert_eq!(m.parameters_mut().len(), lens.len());
        assert_eq!(m.frozen_mask().len(), lens.len());
        let g = m
            .backward(
                &m.forward_batch(&batch(&m.arch, 2, 0), Pass::Train(&mut ChaCha8Rng::seed_from_u64(0)))
                    .unwrap(),
                &[0, 2],
            )
            .unwrap();
        let glens: Vec<usize> = g.tensors.iter().map(Vec::len).collect();
        assert_eq!(glens, lens);
    }

    #[test]
    fn zero_model_is_uniform() {
        let m = FusionModel::zeroed(tiny_arch(3), Modality::Fusion, 0.0).unwrap();
        let c = m.forward_batch(&batch(&m.arch, 3, 4), Pass::Infer).unwrap();
        assert!(c.probs().iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn zero_model_output_bias_gradient() {
        let m = FusionModel::zeroed(tiny_arch(3), Modality::Fusion, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = m.forward_batch(&batch(&m.arch, 1, 4), Pass::Train(&mut rng)).unwrap();
        let g = m.backward(&c, &[1]).unwrap();
        let out_bias = g.tensors.last().unwrap();
        let third = 1.0 / 3.0;
        assert!((out_bias[0] - third).abs() < 1e-15);
        assert!((out_bias[1] - (third - 1.0)).abs() < 1e-15);
        assert!((out_bias[2] - third).abs() < 1e-15);
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut m = FusionModel::new(tiny_arch(3), Modality::Fusion, 0.0, 0.0, false, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = m.forward_batch(&batch(&m.arch, 1, 4), Pass::Train(&mut rng)).unwrap();
        let g = m.backward(&c, &[0]).unwrap();
        m.apply_gradients(&g, 1e-3, 0.9, 1e-7).unwrap();
        assert!(matches!(
            m.backward(&c, &[0]),
            Err(Error::StaleCache { cache: 0, model: 1 })
        ));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let m = FusionModel::new(tiny_arch(3), Modality::Fusion, 0.0, 0.0, false, 1).unwrap();
        let mut wrong = tiny_arch(3);
        wrong.features = 11;
        let b = batch(&wrong, 1, 0);
        assert!(matches!(m.forward_batch(&b, Pass::Infer), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn penalty_only_gradient() {
        // Output layer forces probs[target] = 1 (up to rounding) so the data
        // term vanishes and leap weight gradients reduce to 2 * lambda * w.
        let lambda = 0.3;
        let mut m = FusionModel::new(tiny_arch(2), Modality::LeapOnly, 0.0, lambda, false, 9).unwrap();
        let last = m.head.len() - 1;
        m.head[last].weights.fill(0.0);
        m.head[last].bias = ndarray::array![1000.0, -1000.0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = m.forward_batch(&batch(&m.arch, 2, 3), Pass::Train(&mut rng)).unwrap();
        assert_eq!(c.probs()[[0, 0]], 1.0);
        let g = m.backward(&c, &[0, 0]).unwrap();
        for (i, layer) in m.leap.iter().enumerate() {
            let expected: Vec<f64> = layer.weights.iter().map(|w| 2.0 * lambda * w).collect();
            assert_eq!(g.tensors[2 * i], expected);
        }
    }

    #[test]
    fn frozen_backbone_keeps_convolutions() {
        let mut m = FusionModel::new(tiny_arch(3), Modality::ImageOnly, 0.0, 0.0, true, 2).unwrap();
        let before = m.backbone.blocks.clone();
        let proj_before = m.backbone.projection.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = m.forward_batch(&batch(&m.arch, 2, 5), Pass::Train(&mut rng)).unwrap();
        let g = m.backward(&c, &[0, 1]).unwrap();
        m.apply_gradients(&g, 1e-2, 0.9, 1e-7).unwrap();
        assert_eq!(m.backbone.blocks, before);
        assert_ne!(m.backbone.projection, proj_before);
    }
}
