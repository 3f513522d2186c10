//! Dilated 50-layer residual network with a two-map class head and global
//! normalized L_p pooling.
//!
//! Layout relative to the standard ImageNet backbone:
//!
//! * the classifier (global average pooling + fully connected layer) is gone;
//! * `layer4` keeps two of its three bottleneck blocks;
//! * `layer3` and `layer4` run at stride 1, and the 3×3 convolutions of
//!   `layer4` use dilation 2, so the total output stride is 8
//!   (a 300×300 input gives 38×38 maps);
//! * a 1×1 convolution maps the 2048 backbone channels onto two maps,
//!   channel 0 = crack and channel 1 = non-crack;
//! * each map is pooled to one score with [`lp_pool_forward`].

use std::path::PathBuf;

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::label::CrackLabel;
use crate::lp_pooling::{lp_pool_backward, lp_pool_forward, PoolingSpec};
use crate::nn::{relu_backward, relu_inplace, BatchNorm2d, Conv2d, ConvGeometry, MaxPool2d, Param};
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 2;
pub const OUTPUT_STRIDE: usize = 8;
const EXPANSION: usize = 4;
const HEAD_INIT_STD: f64 = 0.01;

/// `(blocks, planes, stride, dilation)` per residual stage.
const STAGES: [(usize, usize, usize, usize); 4] =
    [(3, 64, 1, 1), (4, 128, 2, 1), (6, 256, 1, 1), (2, 512, 1, 2)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    /// `[height, width]` of the preprocessed input.
    #[serde(default = "default_input")]
    pub input_size: [usize; 2],
    #[serde(default = "default_stride")]
    pub output_stride: usize,
    pub pooling: PoolingSpec,
    #[serde(default)]
    pub pretrained_weights_path: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    /// Divides every backbone channel count. `1` is the standard network and
    /// the only width pretrained weights fit.
    #[serde(default = "default_divisor")]
    pub width_divisor: usize,
}

fn default_classes() -> usize {
    NUM_CLASSES
}
fn default_input() -> [usize; 2] {
    [300, 300]
}
fn default_stride() -> usize {
    OUTPUT_STRIDE
}
fn default_divisor() -> usize {
    1
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_classes: NUM_CLASSES,
            input_size: default_input(),
            output_stride: OUTPUT_STRIDE,
            pooling: PoolingSpec::infinity(),
            pretrained_weights_path: None,
            seed: 0,
            width_divisor: 1,
        }
    }
}

impl ModelConfig {
    pub fn with_pooling(pooling: PoolingSpec) -> Self {
        ModelConfig {
            pooling,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes != NUM_CLASSES {
            return Err(Error::InvalidConfig(format!(
                "num_classes must be {NUM_CLASSES} (crack, non-crack), got {}",
                self.num_classes
            )));
        }
        if self.output_stride != OUTPUT_STRIDE {
            return Err(Error::InvalidConfig(format!(
                "output_stride must be {OUTPUT_STRIDE}, got {}",
                self.output_stride
            )));
        }
        if self.input_size.iter().any(|&s| s < OUTPUT_STRIDE) {
            return Err(Error::InvalidConfig(format!(
                "input_size {:?} is smaller than the output stride",
                self.input_size
            )));
        }
        if !self.width_divisor.is_power_of_two() || self.width_divisor > 64 {
            return Err(Error::InvalidConfig(format!(
                "width_divisor must be a power of two <= 64, got {}",
                self.width_divisor
            )));
        }
        if self.pretrained_weights_path.is_some() && self.width_divisor != 1 {
            return Err(Error::InvalidConfig(
                "pretrained weights require width_divisor = 1".into(),
            ));
        }
        self.pooling.validate()
    }

    /// Spatial size of the activation maps: `ceil(input / 8)` per axis.
    pub fn map_size(&self) -> [usize; 2] {
        self.input_size.map(|s| s.div_ceil(OUTPUT_STRIDE))
    }

    /// Compares everything that determines the tensor layout and forward
    /// function; the weight source and seed are provenance only.
    pub fn architecture_mismatch(&self, other: &ModelConfig) -> Option<String> {
        let mut diffs = Vec::new();
        if self.num_classes != other.num_classes {
            diffs.push(format!("num_classes {} vs {}", self.num_classes, other.num_classes));
        }
        if self.input_size != other.input_size {
            diffs.push(format!("input_size {:?} vs {:?}", self.input_size, other.input_size));
        }
        if self.output_stride != other.output_stride {
            diffs.push(format!(
                "output_stride {} vs {}",
                self.output_stride, other.output_stride
            ));
        }
        if self.width_divisor != other.width_divisor {
            diffs.push(format!(
                "width_divisor {} vs {}",
                self.width_divisor, other.width_divisor
            ));
        }
        if self.pooling != other.pooling {
            diffs.push(format!("pooling p={} vs p={}", self.pooling.p, other.pooling.p));
        }
        (!diffs.is_empty()).then(|| diffs.join(", "))
    }
}

/// Two-channel spatial output of the class head for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMaps {
    pub height: usize,
    pub width: usize,
    /// `[2, height, width]`, channel 0 = crack.
    pub data: Vec<f32>,
}

impl ActivationMaps {
    pub fn channel(&self, label: CrackLabel) -> &[f32] {
        let len = self.height * self.width;
        let c = label.index();
        &self.data[c * len..(c + 1) * len]
    }

    pub fn crack(&self) -> &[f32] {
        self.channel(CrackLabel::Crack)
    }

    pub fn non_crack(&self) -> &[f32] {
        self.channel(CrackLabel::NonCrack)
    }

    pub fn shape(&self) -> [usize; 3] {
        [NUM_CLASSES, self.height, self.width]
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[N, 2, H', W']`
    pub maps: Tensor,
    /// One `[crack, non-crack]` score pair per image.
    pub scores: Vec<[f64; 2]>,
}

impl ForwardOutput {
    pub fn activation_maps(&self, n: usize) -> ActivationMaps {
        ActivationMaps {
            height: self.maps.height(),
            width: self.maps.width(),
            data: self.maps.image(n).to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Classification {
    pub label: CrackLabel,
    /// Softmax over the two scores, `[crack, non-crack]`.
    pub probabilities: [f64; 2],
}

/// Softmax + argmax. Ties resolve to non-crack so that a tie never triggers
/// segmentation.
pub fn classify(scores: [f64; 2]) -> Result<Classification> {
    if let Some((index, &value)) = scores.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite { index, value });
    }
    let probabilities = softmax(scores);
    let label = if scores[0] > scores[1] {
        CrackLabel::Crack
    } else {
        CrackLabel::NonCrack
    };
    Ok(Classification {
        label,
        probabilities,
    })
}

pub(crate) fn softmax(scores: [f64; 2]) -> [f64; 2] {
    let m = scores[0].max(scores[1]);
    let e = scores.map(|s| (s - m).exp());
    let z = e[0] + e[1];
    e.map(|v| v / z)
}

fn pool_maps(maps: &Tensor, spec: &PoolingSpec) -> Result<Vec<[f64; 2]>> {
    let mut scores = Vec::with_capacity(maps.batch());
    for n in 0..maps.batch() {
        let mut s = [0.0; 2];
        for (c, slot) in s.iter_mut().enumerate() {
            let plane: Vec<f64> = maps.plane(n, c).iter().map(|v| *v as f64).collect();
            *slot = lp_pool_forward(&plane, spec)?;
        }
        scores.push(s);
    }
    Ok(scores)
}

#[derive(Debug, Clone)]
struct Bottleneck {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    conv3: Conv2d,
    bn3: BatchNorm2d,
    downsample: Option<(Conv2d, BatchNorm2d)>,
    out: Option<Tensor>,
}

impl Bottleneck {
    fn new(
        inplanes: usize,
        planes: usize,
        stride: usize,
        dilation: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let out = planes * EXPANSION;
        let conv1 = Conv2d::kaiming(inplanes, planes, ConvGeometry::new(1, 1, 0, 1), rng);
        let conv2 = Conv2d::kaiming(
            planes,
            planes,
            ConvGeometry::new(3, stride, dilation, dilation),
            rng,
        );
        let conv3 = Conv2d::kaiming(planes, out, ConvGeometry::new(1, 1, 0, 1), rng);
        let downsample = (stride != 1 || inplanes != out).then(|| {
            (
                Conv2d::kaiming(inplanes, out, ConvGeometry::new(1, stride, 0, 1), rng),
                BatchNorm2d::new(out),
            )
        });
        Bottleneck {
            conv1,
            bn1: BatchNorm2d::new(planes),
            conv2,
            bn2: BatchNorm2d::new(planes),
            conv3,
            bn3: BatchNorm2d::new(out),
            downsample,
            out: None,
        }
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = self.bn1.forward(&self.conv1.forward(x)?);
        relu_inplace(&mut h);
        let mut h = self.bn2.forward(&self.conv2.forward(&h)?);
        relu_inplace(&mut h);
        let mut h = self.bn3.forward(&self.conv3.forward(&h)?);
        match &self.downsample {
            Some((conv, bn)) => h.add_assign(&bn.forward(&conv.forward(x)?)),
            None => h.add_assign(x),
        }
        relu_inplace(&mut h);
        Ok(h)
    }

    fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        let mut h = self.bn1.forward_train(&self.conv1.forward_train(x)?);
        relu_inplace(&mut h);
        let mut h = self.bn2.forward_train(&self.conv2.forward_train(&h)?);
        relu_inplace(&mut h);
        let mut h = self.bn3.forward_train(&self.conv3.forward_train(&h)?);
        match &mut self.downsample {
            Some((conv, bn)) => h.add_assign(&bn.forward_train(&conv.forward_train(x)?)),
            None => h.add_assign(x),
        }
        relu_inplace(&mut h);
        self.out = Some(h.clone());
        Ok(h)
    }

    fn backward(&mut self, mut grad: Tensor) -> Tensor {
        let out = self.out.take().expect("Bottleneck::backward without forward_train");
        relu_backward(&mut grad, &out);
        drop(out);
        let g = self.bn3.backward(&grad);
        let g = self.conv3.backward(&g, true).expect("input grad");
        let g = self.bn2.backward_after_relu(g);
        let g = self.conv2.backward(&g, true).expect("input grad");
        let g = self.bn1.backward_after_relu(g);
        let mut g = self.conv1.backward(&g, true).expect("input grad");
        match &mut self.downsample {
            Some((conv, bn)) => {
                let gd = bn.backward(&grad);
                g.add_assign(&conv.backward(&gd, true).expect("input grad"));
            }
            None => g.add_assign(&grad),
        }
        g
    }
}

/// Named view of one stored tensor (parameters and batch-norm buffers).
pub struct NamedTensor<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f32],
}

pub struct NamedTensorMut<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a mut Vec<f32>,
}

macro_rules! conv_entries {
    ($out:ident, $prefix:expr, $conv:expr, $wrap:ident, $($r:tt)*) => {{
        let conv = $conv;
        $out.push($wrap(format!("{}.weight", $prefix), conv.weight.shape.clone(), $($r)* conv.weight.value));
        if let Some(b) = $($r)* conv.bias {
            $out.push($wrap(format!("{}.bias", $prefix), b.shape.clone(), $($r)* b.value));
        }
    }};
}

macro_rules! bn_entries {
    ($out:ident, $prefix:expr, $bn:expr, $wrap:ident, $($r:tt)*) => {{
        let bn = $bn;
        let c = bn.channels();
        $out.push($wrap(format!("{}.weight", $prefix), vec![c], $($r)* bn.weight.value));
        $out.push($wrap(format!("{}.bias", $prefix), vec![c], $($r)* bn.bias.value));
        $out.push($wrap(format!("{}.running_mean", $prefix), vec![c], $($r)* bn.running_mean));
        $out.push($wrap(format!("{}.running_var", $prefix), vec![c], $($r)* bn.running_var));
    }};
}

macro_rules! model_entries {
    ($self:ident, $out:ident, $wrap:ident, $($r:tt)*) => {{
        conv_entries!($out, "conv1", $($r)* $self.stem_conv, $wrap, $($r)*);
        bn_entries!($out, "bn1", $($r)* $self.stem_bn, $wrap, $($r)*);
        for (s, stage) in ($($r)* $self.stages).into_iter().enumerate() {
            for (b, block) in stage.into_iter().enumerate() {
                let p = format!("layer{}.{}", s + 1, b);
                conv_entries!($out, format!("{p}.conv1"), $($r)* block.conv1, $wrap, $($r)*);
                bn_entries!($out, format!("{p}.bn1"), $($r)* block.bn1, $wrap, $($r)*);
                conv_entries!($out, format!("{p}.conv2"), $($r)* block.conv2, $wrap, $($r)*);
                bn_entries!($out, format!("{p}.bn2"), $($r)* block.bn2, $wrap, $($r)*);
                conv_entries!($out, format!("{p}.conv3"), $($r)* block.conv3, $wrap, $($r)*);
                bn_entries!($out, format!("{p}.bn3"), $($r)* block.bn3, $wrap, $($r)*);
                if let Some((conv, bn)) = $($r)* block.downsample {
                    conv_entries!($out, format!("{p}.downsample.0"), conv, $wrap, $($r)*);
                    bn_entries!($out, format!("{p}.downsample.1"), bn, $wrap, $($r)*);
                }
            }
        }
        conv_entries!($out, HEAD_PREFIX, $($r)* $self.head, $wrap, $($r)*);
    }};
}

pub const HEAD_PREFIX: &str = "head";

/// The crack classifier/segmenter.
#[derive(Debug, Clone)]
pub struct CrackNet {
    config: ModelConfig,
    stem_conv: Conv2d,
    stem_bn: BatchNorm2d,
    stem_pool: MaxPool2d,
    stages: Vec<Vec<Bottleneck>>,
    head: Conv2d,
    maps_cache: Option<Tensor>,
}

impl CrackNet {
    /// Builds the network with seeded random weights, then loads pretrained
    /// backbone weights when the config names a file.
    pub fn new(config: ModelConfig) -> Result<Self> {
        let mut net = Self::random(config)?;
        match net.config.pretrained_weights_path.clone() {
            Some(path) => {
                let bytes = std::fs::read(&path).map_err(|e| Error::WeightMismatch {
                    layer: "<file>".into(),
                    reason: format!("cannot read {}: {e}", path.display()),
                })?;
                crate::checkpoint::load_backbone(&mut net, &bytes)?;
            }
            None => warn!(
                "no pretrained weights configured; backbone is randomly initialized \
                 and results will not be comparable to transfer-learned runs"
            ),
        }
        Ok(net)
    }

    /// Seeded random initialization without touching the filesystem.
    pub fn random(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.width_divisor;
        let stem_width = 64 / d;
        let stem_conv = Conv2d::kaiming(3, stem_width, ConvGeometry::new(7, 2, 3, 1), &mut rng);
        let mut inplanes = stem_width;
        let mut stages = Vec::new();
        for (blocks, planes, stride, dilation) in STAGES {
            let planes = planes / d;
            let mut stage = Vec::new();
            for b in 0..blocks {
                let s = if b == 0 { stride } else { 1 };
                stage.push(Bottleneck::new(inplanes, planes, s, dilation, &mut rng));
                inplanes = planes * EXPANSION;
            }
            stages.push(stage);
        }
        let head = Conv2d::normal(
            inplanes,
            NUM_CLASSES,
            ConvGeometry::new(1, 1, 0, 1),
            HEAD_INIT_STD,
            true,
            &mut rng,
        );
        Ok(CrackNet {
            config,
            stem_conv,
            stem_bn: BatchNorm2d::new(stem_width),
            stem_pool: MaxPool2d::new(3, 2, 1),
            stages,
            head,
            maps_cache: None,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn pooling(&self) -> &PoolingSpec {
        &self.config.pooling
    }

    /// Number of weighted layers along the main path (convolutions in the
    /// stem and bottlenecks plus the head).
    pub fn depth(&self) -> usize {
        1 + self.stages.iter().map(|s| s.len() * 3).sum::<usize>() + 1
    }

    pub fn head(&self) -> &Conv2d {
        &self.head
    }

    pub fn head_mut(&mut self) -> &mut Conv2d {
        &mut self.head
    }

    /// Freezes (or releases) batch-norm running statistics during training.
    pub fn set_bn_frozen(&mut self, frozen: bool) {
        self.stem_bn.frozen = frozen;
        for block in self.stages.iter_mut().flatten() {
            block.bn1.frozen = frozen;
            block.bn2.frozen = frozen;
            block.bn3.frozen = frozen;
            if let Some((_, bn)) = block.downsample.as_mut() {
                bn.frozen = frozen;
            }
        }
    }

    fn check_input(&self, batch: &Tensor) -> Result<()> {
        let [n, c, h, w] = batch.shape();
        let [eh, ew] = self.config.input_size;
        if n == 0 || c != 3 || h != eh || w != ew {
            return Err(Error::ShapeMismatch {
                expected: format!("[N>=1, 3, {eh}, {ew}]"),
                actual: format!("{:?}", batch.shape()),
            });
        }
        Ok(())
    }

    /// Inference pass (running batch-norm statistics, nothing cached).
    pub fn forward(&self, batch: &Tensor) -> Result<ForwardOutput> {
        self.check_input(batch)?;
        let mut h = self.stem_bn.forward(&self.stem_conv.forward(batch)?);
        relu_inplace(&mut h);
        let mut h = self.stem_pool.forward(&h);
        for block in self.stages.iter().flatten() {
            h = block.forward(&h)?;
        }
        let maps = self.head.forward(&h)?;
        let scores = pool_maps(&maps, &self.config.pooling)?;
        Ok(ForwardOutput { maps, scores })
    }

    /// Training pass; caches everything [`CrackNet::backward`] needs.
    pub fn forward_train(&mut self, batch: &Tensor) -> Result<ForwardOutput> {
        self.check_input(batch)?;
        let mut h = self.stem_bn.forward_train(&self.stem_conv.forward_train(batch)?);
        relu_inplace(&mut h);
        let mut h = self.stem_pool.forward_train(&h);
        for block in self.stages.iter_mut().flatten() {
            h = block.forward_train(&h)?;
        }
        let maps = self.head.forward_train(&h)?;
        let scores = pool_maps(&maps, &self.config.pooling)?;
        self.maps_cache = Some(maps.clone());
        Ok(ForwardOutput { maps, scores })
    }

    /// Backpropagates score gradients (one `[d crack, d non-crack]` pair per
    /// image) and accumulates parameter gradients.
    pub fn backward(&mut self, score_grads: &[[f64; 2]]) -> Result<()> {
        let maps = self
            .maps_cache
            .take()
            .expect("CrackNet::backward called without forward_train");
        if score_grads.len() != maps.batch() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} score gradients", maps.batch()),
                actual: format!("{}", score_grads.len()),
            });
        }
        let mut grad = Tensor::zeros(maps.shape());
        for (n, sg) in score_grads.iter().enumerate() {
            for (c, &upstream) in sg.iter().enumerate() {
                let plane: Vec<f64> = maps.plane(n, c).iter().map(|v| *v as f64).collect();
                let g = lp_pool_backward(&plane, &self.config.pooling, upstream)?;
                for (dst, v) in grad.plane_mut(n, c).iter_mut().zip(g) {
                    *dst = v as f32;
                }
            }
        }
        let mut g = self.head.backward(&grad, true).expect("input grad");
        for block in self.stages.iter_mut().flatten().rev() {
            g = block.backward(g);
        }
        let g = self.stem_pool.backward(&g);
        let g = self.stem_bn.backward_after_relu(g);
        self.stem_conv.backward(&g, false);
        Ok(())
    }

    /// Learnable parameters in a fixed order.
    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out: Vec<&mut Param> = Vec::new();
        out.extend(self.stem_conv.params_mut());
        out.extend(self.stem_bn.params_mut());
        for block in self.stages.iter_mut().flatten() {
            out.extend(block.conv1.params_mut());
            out.extend(block.bn1.params_mut());
            out.extend(block.conv2.params_mut());
            out.extend(block.bn2.params_mut());
            out.extend(block.conv3.params_mut());
            out.extend(block.bn3.params_mut());
            if let Some((conv, bn)) = block.downsample.as_mut() {
                out.extend(conv.params_mut());
                out.extend(bn.params_mut());
            }
        }
        out.extend(self.head.params_mut());
        out
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Every stored tensor under torchvision-style names (`layer3.2.bn1.running_var`).
    pub fn named_tensors(&self) -> Vec<NamedTensor<'_>> {
        fn wrap(name: String, shape: Vec<usize>, data: &[f32]) -> NamedTensor<'_> {
            NamedTensor { name, shape, data }
        }
        let mut out = Vec::new();
        model_entries!(self, out, wrap, &);
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<NamedTensorMut<'_>> {
        fn wrap(name: String, shape: Vec<usize>, data: &mut Vec<f32>) -> NamedTensorMut<'_> {
            NamedTensorMut { name, shape, data }
        }
        let mut out = Vec::new();
        model_entries!(self, out, wrap, &mut);
        out
    }

    /// SHA-256 over all backbone tensors (everything except the head).
    pub fn backbone_checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for t in self.named_tensors() {
            if t.name.starts_with(HEAD_PREFIX) {
                continue;
            }
            hasher.update(t.name.as_bytes());
            for v in t.data {
                hasher.update(v.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }
}
