//! Parametric pre-activation P4 ResNet built from valid convolutions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::layers::{
    residual_add, BatchNorm, Layer, LogitHead, Mode, OrientationMaxPool, P4Conv, Param, Relu,
};
use super::tensor::GFeatureMap;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kernel: usize,
    pub stride: usize,
}

impl LayerSpec {
    pub const fn new(kernel: usize, stride: usize) -> Self {
        Self { kernel, stride }
    }
}

/// Receptive field and output stride of a chain of valid convolutions:
/// `rf = 1 + sum_i (k_i - 1) * prod_{j<i} s_j`, `stride = prod_i s_i`.
pub fn receptive_field(chain: &[LayerSpec]) -> (usize, usize) {
    let mut rf = 1;
    let mut jump = 1;
    for layer in chain {
        rf += (layer.kernel - 1) * jump;
        jump *= layer.stride;
    }
    (rf, jump)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StemConfig {
    pub kernel: usize,
    #[serde(default = "one")]
    pub stride: usize,
    pub channels: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub blocks: usize,
    pub channels: usize,
    /// Kernel sizes of the convolutions inside one residual block, e.g.
    /// `[3, 3]` (basic) or `[1, 3, 1]` (bottleneck). All must be odd.
    pub block_kernels: Vec<usize>,
    #[serde(default)]
    pub downsample: Option<LayerSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub stem: StemConfig,
    pub stages: Vec<StageConfig>,
    pub head_channels: usize,
    /// Declared receptive field; must match what the layer chain computes.
    pub receptive_field: usize,
}

impl ModelConfig {
    /// Small layout used for desk-scale experiments: 4x4/2 lifting stem,
    /// one 2x2/2 downsampling, four basic blocks and one bottleneck.
    /// Receptive field 78, output stride 4.
    pub fn desk() -> Self {
        Self {
            stem: StemConfig {
                kernel: 4,
                stride: 2,
                channels: 8,
            },
            stages: vec![
                StageConfig {
                    blocks: 4,
                    channels: 8,
                    block_kernels: vec![3, 3],
                    downsample: Some(LayerSpec::new(2, 2)),
                },
                StageConfig {
                    blocks: 1,
                    channels: 16,
                    block_kernels: vec![1, 3, 1],
                    downsample: None,
                },
            ],
            head_channels: 16,
            receptive_field: 78,
        }
    }

    /// Deep preset: 70 parameterized layers on the main path and a 78 px
    /// receptive field. Seven full-resolution bottlenecks, one 2x2/2
    /// downsampling, fifteen half-resolution bottlenecks. Widths of 16 and 32
    /// are a free choice.
    pub fn paper_like() -> Self {
        Self {
            stem: StemConfig {
                kernel: 3,
                stride: 1,
                channels: 16,
            },
            stages: vec![
                StageConfig {
                    blocks: 7,
                    channels: 16,
                    block_kernels: vec![1, 3, 1],
                    downsample: None,
                },
                StageConfig {
                    blocks: 15,
                    channels: 32,
                    block_kernels: vec![1, 3, 1],
                    downsample: Some(LayerSpec::new(2, 2)),
                },
            ],
            head_channels: 32,
            receptive_field: 78,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" | "paper-like" => Ok(Self::paper_like()),
            other => Err(Error::Config(format!("unknown model preset `{other}`"))),
        }
    }

    /// Main-path convolution chain (head 1x1 layers included).
    pub fn layer_chain(&self) -> Vec<LayerSpec> {
        let mut chain = vec![LayerSpec::new(self.stem.kernel, self.stem.stride)];
        for stage in &self.stages {
            if let Some(d) = stage.downsample {
                chain.push(d);
            }
            for _ in 0..stage.blocks {
                chain.extend(stage.block_kernels.iter().map(|&k| LayerSpec::new(k, 1)));
            }
        }
        chain.push(LayerSpec::new(1, 1));
        chain.push(LayerSpec::new(1, 1));
        chain
    }

    /// Parameterized layers on the main path (projection shortcuts excluded).
    pub fn depth(&self) -> usize {
        self.layer_chain().len()
    }

    pub fn computed_receptive_field(&self) -> (usize, usize) {
        receptive_field(&self.layer_chain())
    }

    pub fn output_stride(&self) -> usize {
        self.computed_receptive_field().1
    }

    /// Input-pixel offset of the window center for map position 0.
    pub fn center_offset(&self) -> usize {
        (self.receptive_field / 2).saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stem.kernel == 0 || self.stem.stride == 0 || self.stem.channels == 0 {
            return Err(Error::Config("stem kernel, stride and channels must be positive".into()));
        }
        if self.head_channels == 0 {
            return Err(Error::Config("head_channels must be positive".into()));
        }
        for (i, stage) in self.stages.iter().enumerate() {
            if stage.channels == 0 || stage.block_kernels.is_empty() && stage.blocks > 0 {
                return Err(Error::Config(format!("stage {i}: empty channels or block kernels")));
            }
            if stage.block_kernels.iter().any(|&k| k == 0 || k % 2 == 0) {
                return Err(Error::Config(format!("stage {i}: block kernels must be odd")));
            }
            if let Some(d) = stage.downsample {
                if d.kernel == 0 || d.stride == 0 {
                    return Err(Error::Config(format!("stage {i}: invalid downsample")));
                }
            }
        }
        let (rf, _) = self.computed_receptive_field();
        if rf != self.receptive_field {
            return Err(Error::Config(format!(
                "declared receptive field {} but layer chain yields {}",
                self.receptive_field, rf
            )));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

struct PreAct {
    bn: BatchNorm,
    relu: Relu,
    conv: P4Conv,
}

impl PreAct {
    fn new(name: &str, cin: usize, cout: usize, kernel: usize, stride: usize) -> Self {
        Self {
            bn: BatchNorm::new(&format!("{name}.bn"), cin),
            relu: Relu::new(),
            conv: P4Conv::group(&format!("{name}.conv"), cin, cout, kernel, stride),
        }
    }

    fn activate(&mut self, x: &GFeatureMap, mode: Mode) -> Result<GFeatureMap> {
        let a = self.bn.forward(x, mode)?;
        self.relu.forward(&a, mode)
    }

    fn activate_backward(&mut self, da: &GFeatureMap) -> Result<GFeatureMap> {
        let d = self.relu.backward(da)?;
        self.bn.backward(&d)
    }

    fn forward(&mut self, x: &GFeatureMap, mode: Mode) -> Result<GFeatureMap> {
        let a = self.activate(x, mode)?;
        self.conv.forward(&a, mode)
    }

    fn backward(&mut self, dy: &GFeatureMap) -> Result<GFeatureMap> {
        let da = self.conv.backward(dy)?;
        self.activate_backward(&da)
    }

    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.bn.visit_params(f);
        self.conv.visit_params(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.bn.visit_params_mut(f);
        self.conv.visit_params_mut(f);
    }
}

/// Pre-activation residual block; the shortcut is center-cropped to the
/// branch output since every convolution is unpadded.
struct Block {
    units: Vec<PreAct>,
    projection: Option<P4Conv>,
    border: usize,
}

impl Block {
    fn new(name: &str, cin: usize, cout: usize, kernels: &[usize]) -> Self {
        let units = kernels
            .iter()
            .enumerate()
            .map(|(u, &k)| {
                let ci = if u == 0 { cin } else { cout };
                PreAct::new(&format!("{name}.unit{u}"), ci, cout, k, 1)
            })
            .collect();
        let projection = (cin != cout).then(|| P4Conv::group(&format!("{name}.proj"), cin, cout, 1, 1));
        let border = kernels.iter().map(|k| k - 1).sum::<usize>() / 2;
        Self {
            units,
            projection,
            border,
        }
    }

    fn forward(&mut self, x: &GFeatureMap, mode: Mode) -> Result<GFeatureMap> {
        let (first, rest) = self.units.split_first_mut().expect("block has units");
        let a = first.activate(x, mode)?;
        let shortcut = match self.projection.as_mut() {
            Some(p) => p.forward(&a, mode)?,
            None => x.clone(),
        };
        let mut h = first.conv.forward(&a, mode)?;
        for unit in rest {
            h = unit.forward(&h, mode)?;
        }
        residual_add(&h, &shortcut)
    }

    fn backward(&mut self, dy: &GFeatureMap) -> Result<GFeatureMap> {
        let dshort = dy.uncrop(self.border);
        let (first, rest) = self.units.split_first_mut().expect("block has units");
        let mut dh = dy.clone();
        for unit in rest.iter_mut().rev() {
            dh = unit.backward(&dh)?;
        }
        let mut da = first.conv.backward(&dh)?;
        match self.projection.as_mut() {
            Some(p) => {
                let dp = p.backward(&dshort)?;
                da.data.iter_mut().zip(&dp.data).for_each(|(a, b)| *a += b);
                first.activate_backward(&da)
            }
            None => {
                let mut dx = first.activate_backward(&da)?;
                dx.data.iter_mut().zip(&dshort.data).for_each(|(a, b)| *a += b);
                Ok(dx)
            }
        }
    }

    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        for u in &self.units {
            u.visit(f);
        }
        if let Some(p) = &self.projection {
            p.visit_params(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for u in &mut self.units {
            u.visit_mut(f);
        }
        if let Some(p) = &mut self.projection {
            p.visit_params_mut(f);
        }
    }
}

struct Stage {
    down: Option<PreAct>,
    blocks: Vec<Block>,
}

/// Rotation-invariant patch classifier. Input is a plain RGB map
/// (`orientations == 1`, three channels); output is two logits per valid
/// window position.
pub struct Model {
    config: ModelConfig,
    stem: P4Conv,
    stages: Vec<Stage>,
    head_act: PreAct,
    head_bn: BatchNorm,
    head_relu: Relu,
    pool: OrientationMaxPool,
    logits: LogitHead,
}

impl Model {
    /// Builds and He-initializes a model.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stem = P4Conv::lifting("stem", 3, config.stem.channels, config.stem.kernel, config.stem.stride);
        stem.init(&mut rng);
        let mut channels = config.stem.channels;
        let mut stages = Vec::new();
        for (i, sc) in config.stages.iter().enumerate() {
            let down = sc.downsample.map(|d| {
                let mut p = PreAct::new(&format!("stage{i}.down"), channels, sc.channels, d.kernel, d.stride);
                p.conv.init(&mut rng);
                p
            });
            if down.is_some() {
                channels = sc.channels;
            }
            let mut blocks = Vec::new();
            for b in 0..sc.blocks {
                let mut block = Block::new(&format!("stage{i}.block{b}"), channels, sc.channels, &sc.block_kernels);
                for u in &mut block.units {
                    u.conv.init(&mut rng);
                }
                if let Some(p) = &mut block.projection {
                    p.init(&mut rng);
                }
                blocks.push(block);
                channels = sc.channels;
            }
            stages.push(Stage { down, blocks });
        }
        let mut head_act = PreAct::new("head.pre", channels, config.head_channels, 1, 1);
        head_act.conv.init(&mut rng);
        let mut logits = LogitHead::new("head.logits", config.head_channels);
        logits.init(&mut rng);
        Ok(Self {
            head_bn: BatchNorm::new("head.bn", config.head_channels),
            head_relu: Relu::new(),
            pool: OrientationMaxPool::new(),
            config,
            stem,
            stages,
            head_act,
            logits,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn receptive_field(&self) -> usize {
        self.config.receptive_field
    }

    pub fn output_stride(&self) -> usize {
        self.config.output_stride()
    }

    /// Batch forward. `x` must have one orientation and three channels.
    pub fn forward(&mut self, x: &GFeatureMap, mode: Mode) -> Result<GFeatureMap> {
        let rf = self.config.receptive_field;
        if x.orientations != 1 || x.channels != 3 {
            return Err(Error::Shape(format!(
                "model input must be 1x3 planes, got {}x{}",
                x.orientations, x.channels
            )));
        }
        if x.height < rf || x.width < rf {
            return Err(Error::Shape(format!(
                "input {}x{} smaller than the {rf}x{rf} receptive field",
                x.height, x.width
            )));
        }
        let mut h = self.stem.forward(x, mode)?;
        for stage in &mut self.stages {
            if let Some(d) = &mut stage.down {
                h = d.forward(&h, mode)?;
            }
            for block in &mut stage.blocks {
                h = block.forward(&h, mode)?;
            }
        }
        h = self.head_act.forward(&h, mode)?;
        h = self.head_bn.forward(&h, mode)?;
        h = self.head_relu.forward(&h, mode)?;
        h = self.pool.forward(&h, mode)?;
        self.logits.forward(&h, mode)
    }

    /// Backpropagates logit gradients; returns the input gradient.
    pub fn backward(&mut self, dlogits: &GFeatureMap) -> Result<GFeatureMap> {
        let d = self.backward_to_stem(dlogits)?;
        self.stem.backward(&d)
    }

    /// Like [`Model::backward`] but skips the input gradient.
    pub fn backward_params(&mut self, dlogits: &GFeatureMap) -> Result<()> {
        let d = self.backward_to_stem(dlogits)?;
        self.stem.backward_params_only(&d)
    }

    fn backward_to_stem(&mut self, dlogits: &GFeatureMap) -> Result<GFeatureMap> {
        let mut d = self.logits.backward(dlogits)?;
        d = self.pool.backward(&d)?;
        d = self.head_relu.backward(&d)?;
        d = self.head_bn.backward(&d)?;
        d = self.head_act.backward(&d)?;
        for stage in self.stages.iter_mut().rev() {
            for block in stage.blocks.iter_mut().rev() {
                d = block.backward(&d)?;
            }
            if let Some(down) = &mut stage.down {
                d = down.backward(&d)?;
            }
        }
        Ok(d)
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.stem.visit_params(f);
        for stage in &self.stages {
            if let Some(d) = &stage.down {
                d.visit(f);
            }
            for b in &stage.blocks {
                b.visit(f);
            }
        }
        self.head_act.visit(f);
        self.head_bn.visit_params(f);
        self.logits.visit_params(f);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.stem.visit_params_mut(f);
        for stage in &mut self.stages {
            if let Some(d) = &mut stage.down {
                d.visit_mut(f);
            }
            for b in &mut stage.blocks {
                b.visit_mut(f);
            }
        }
        self.head_act.visit_mut(f);
        self.head_bn.visit_params_mut(f);
        self.logits.visit_params_mut(f);
    }

    pub fn zero_grad(&mut self) {
        self.visit_params_mut(&mut |p| p.zero_grad());
    }

    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| {
            if p.kind.trainable() {
                n += p.value.len()
            }
        });
        n
    }

    /// Logits for a single `rf x rf` RGB patch (row-major, interleaved u8).
    pub fn forward_patch(&mut self, patch: &[u8]) -> Result<[f32; 2]> {
        let rf = self.config.receptive_field;
        if patch.len() != rf * rf * 3 {
            return Err(Error::Shape(format!(
                "patch has {} bytes, expected {}x{}x3",
                patch.len(),
                rf,
                rf
            )));
        }
        let x = rgb_to_input(&[patch], rf, rf)?;
        let y = self.forward(&x, Mode::Infer)?;
        debug_assert_eq!((y.height, y.width), (1, 1));
        Ok([y.data[0], y.data[1]])
    }

    /// Logits for a batch of patches in eval mode (no caching).
    pub fn forward_patches(&mut self, patches: &[&[u8]]) -> Result<Vec<[f32; 2]>> {
        if patches.is_empty() {
            return Ok(Vec::new());
        }
        let rf = self.config.receptive_field;
        let x = rgb_to_input(patches, rf, rf)?;
        let y = self.forward(&x, Mode::Infer)?;
        Ok((0..patches.len()).map(|b| [y.data[2 * b], y.data[2 * b + 1]]).collect())
    }
}

/// Converts interleaved RGB bytes to a `[batch][1][3][h][w]` input scaled
/// to `[-1, 1]`.
pub fn rgb_to_input(images: &[&[u8]], height: usize, width: usize) -> Result<GFeatureMap> {
    let plane = height * width;
    let mut x = GFeatureMap::zeros(images.len(), 1, 3, height, width);
    for (b, img) in images.iter().enumerate() {
        if img.len() != plane * 3 {
            return Err(Error::Shape(format!(
                "image buffer has {} bytes, expected {}x{}x3",
                img.len(),
                height,
                width
            )));
        }
        let dst = x.sample_mut(b);
        for (i, px) in img.chunks_exact(3).enumerate() {
            for c in 0..3 {
                dst[c * plane + i] = (px[c] as f32 - 127.5) / 127.5;
            }
        }
    }
    Ok(x)
}

/// Two-class softmax probability of the positive class.
pub fn positive_probability(logits: [f32; 2]) -> f32 {
    let m = logits[0].max(logits[1]);
    let e0 = (logits[0] - m).exp();
    let e1 = (logits[1] - m).exp();
    e1 / (e0 + e1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rf_single_and_hand_chain() {
        assert_eq!(receptive_field(&[LayerSpec::new(1, 1)]), (1, 1));
        let chain = [LayerSpec::new(3, 1), LayerSpec::new(2, 2), LayerSpec::new(3, 1)];
        assert_eq!(receptive_field(&chain), (8, 2));
    }

    #[test]
    fn presets_reach_78() {
        assert_eq!(ModelConfig::desk().computed_receptive_field(), (78, 4));
        let paper = ModelConfig::paper_like();
        assert_eq!(paper.computed_receptive_field().0, 78);
        assert_eq!(paper.depth(), 70);
        paper.validate().unwrap();
    }

    #[test]
    fn declared_rf_mismatch_rejected() {
        let mut c = ModelConfig::desk();
        c.receptive_field = 80;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn fresh_model_gives_finite_logits() {
        let mut m = Model::new(ModelConfig::desk(), 0).unwrap();
        let patch: Vec<u8> = (0..78 * 78 * 3).map(|i| (i * 31 % 256) as u8).collect();
        let l = m.forward_patch(&patch).unwrap();
        assert!(l.iter().all(|v| v.is_finite()));
        assert!(m.forward_patch(&patch[..100]).is_err());
    }

    #[test]
    fn softmax_probability() {
        assert!((positive_probability([0.0, 0.0]) - 0.5).abs() < 1e-7);
        assert!(positive_probability([-100.0, 100.0]) > 0.999);
    }
}
