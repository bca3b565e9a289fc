//! P4 layer zoo. Every layer caches what it needs during `forward` and
//! accumulates parameter gradients during `backward`.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::conv::{conv_backward, conv_forward, ConvGeometry};
use super::tensor::{rot_source, GFeatureMap};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, caches kept for backward.
    Train,
    /// Running statistics, caches kept for backward.
    Eval,
    /// Running statistics, nothing cached.
    Infer,
}

impl Mode {
    fn caches(self) -> bool {
        !matches!(self, Mode::Infer)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Kernel,
    NormScale,
    NormShift,
    Bias,
    /// Non-trainable state (batch-norm running statistics).
    Buffer,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::Buffer)
    }

    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Kernel | ParamKind::Bias)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
}

impl Param {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, kind: ParamKind, fill: f32) -> Self {
        let n = shape.iter().product();
        Self {
            name: name.into(),
            shape,
            kind,
            value: vec![fill; n],
            grad: vec![0.0; n],
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

pub trait Layer {
    fn forward(&mut self, x: &GFeatureMap, mode: Mode) -> Result<GFeatureMap>;
    fn backward(&mut self, dy: &GFeatureMap) -> Result<GFeatureMap>;
    fn visit_params(&self, _f: &mut dyn FnMut(&Param)) {}
    fn visit_params_mut(&mut self, _f: &mut dyn FnMut(&mut Param)) {}
}

fn missing_cache(layer: &str) -> Error {
    Error::Usage(format!("{layer}: backward called without a cached forward pass"))
}

fn he_init(param: &mut Param, fan_in: usize, rng: &mut impl Rng) {
    let normal = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt()).expect("finite std");
    for v in param.value.iter_mut() {
        *v = normal.sample(rng);
    }
}

/// Maps every entry of an expanded planar weight matrix to the kernel entry
/// it copies.
fn expansion_map(
    in_orientations: usize,
    out_channels: usize,
    in_channels: usize,
    k: usize,
) -> Vec<usize> {
    let kk = k * k;
    let cols = in_orientations * in_channels * kk;
    let mut map = vec![0usize; 4 * out_channels * cols];
    for r in 0..4 {
        for co in 0..out_channels {
            let row = r * out_channels + co;
            for s in 0..in_orientations {
                let t = if in_orientations == 4 { (s + 4 - r) % 4 } else { 0 };
                for ci in 0..in_channels {
                    for i in 0..k {
                        for j in 0..k {
                            let (si, sj) = rot_source(i, j, k, k, r);
                            let src = (((t * out_channels + co) * in_channels + ci) * k + si) * k + sj;
                            let col = ((s * in_channels + ci) * k + i) * k + j;
                            map[row * cols + col] = src;
                        }
                    }
                }
            }
        }
    }
    map
}

/// Lifting (`in_orientations == 1`) or P4 group (`in_orientations == 4`)
/// convolution. Output always carries four orientations.
///
/// Orientation `r` of the output correlates input orientation `s` with the
/// kernel slice `(s - r) mod 4` rotated by `r` quarter turns.
#[derive(Debug, Clone)]
pub struct P4Conv {
    pub kernel: Param,
    pub in_orientations: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub size: usize,
    pub stride: usize,
    map: Vec<usize>,
    expanded: Vec<f32>,
    cache: Option<GFeatureMap>,
}

impl P4Conv {
    pub fn new(
        name: &str,
        in_orientations: usize,
        in_channels: usize,
        out_channels: usize,
        size: usize,
        stride: usize,
    ) -> Self {
        assert!(in_orientations == 1 || in_orientations == 4);
        assert!(size >= 1 && stride >= 1);
        let kernel = Param::new(
            format!("{name}.kernel"),
            vec![in_orientations, out_channels, in_channels, size, size],
            ParamKind::Kernel,
            0.0,
        );
        let map = expansion_map(in_orientations, out_channels, in_channels, size);
        Self {
            kernel,
            in_orientations,
            in_channels,
            out_channels,
            size,
            stride,
            expanded: vec![0.0; map.len()],
            map,
            cache: None,
        }
    }

    pub fn lifting(name: &str, in_channels: usize, out_channels: usize, size: usize, stride: usize) -> Self {
        Self::new(name, 1, in_channels, out_channels, size, stride)
    }

    pub fn group(name: &str, in_channels: usize, out_channels: usize, size: usize, stride: usize) -> Self {
        Self::new(name, 4, in_channels, out_channels, size, stride)
    }

    pub fn init(&mut self, rng: &mut impl Rng) {
        let fan_in = self.in_orientations * self.in_channels * self.size * self.size;
        he_init(&mut self.kernel, fan_in, rng);
    }

    fn geometry(&self, x: &GFeatureMap) -> Result<ConvGeometry> {
        if x.orientations != self.in_orientations || x.channels != self.in_channels {
            return Err(Error::Shape(format!(
                "{}: expected {}x{} input planes, got {}x{}",
                self.kernel.name, self.in_orientations, self.in_channels, x.orientations, x.channels
            )));
        }
        if x.height < self.size || x.width < self.size {
            return Err(Error::Shape(format!(
                "{}: {}x{} input smaller than {}x{} kernel",
                self.kernel.name, x.height, x.width, self.size, self.size
            )));
        }
        Ok(ConvGeometry {
            in_planes: x.planes(),
            height: x.height,
            width: x.width,
            kernel: self.size,
            stride: self.stride,
        })
    }

    fn expand(&mut self) {
        for (e, &src) in self.expanded.iter_mut().zip(&self.map) {
            *e = self.kernel.value[src];
        }
    }

    /// Parameter gradients only; used for the first layer, whose input
    /// gradient nobody consumes.
    pub fn backward_params_only(&mut self, dy: &GFeatureMap) -> Result<()> {
        self.accumulate(dy, None)
    }

    fn accumulate(&mut self, dy: &GFeatureMap, dx: Option<&mut GFeatureMap>) -> Result<()> {
        let x = self.cache.as_ref().ok_or_else(|| missing_cache(&self.kernel.name))?;
        let g = self.geometry(x)?;
        if dy.shape() != [x.batch, 4, self.out_channels, g.out_height(), g.out_width()] {
            return Err(Error::Shape(format!("{}: upstream gradient shape", self.kernel.name)));
        }
        let mut dexp = vec![0.0f32; self.expanded.len()];
        conv_backward(
            &x.data,
            x.batch,
            &g,
            &self.expanded,
            4 * self.out_channels,
            &dy.data,
            dx.map(|d| d.data.as_mut_slice()),
            &mut dexp,
        );
        for (d, &src) in dexp.iter().zip(&self.map) {
            self.kernel.grad[src] += d;
        }
        Ok(())
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        ((h - self.size) / self.stride + 1, (w - self.size) / self.stride + 1)
    }
}

impl Layer for P4Conv {
    fn forward(&mut self, x: &GFeatureMap, mode: Mode) -> Result<GFeatureMap> {
        let g = self.geometry(x)?;
        self.expand();
        let mut y = GFeatureMap::zeros(x.batch, 4, self.out_channels, g.out_height(), g.out_width());
        conv_forward(&x.data, x.batch, &g, &self.expanded, 4 * self.out_channels, &mut y.data);
        self.cache = mode.caches().then(|| x.clone());
        Ok(y)
    }

    fn backward(&mut self, dy: &GFeatureMap) -> Result<GFeatureMap> {
        let mut dx = self
            .cache
            .as_ref()
            .ok_or_else(|| missing_cache(&self.kernel.name))?
            .zeros_like();
        self.accumulate(dy, Some(&mut dx))?;
        Ok(dx)
    }

    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.kernel);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.kernel);
    }
}

struct NormCache {
    normalized: GFeatureMap,
    inv_std: Vec<f32>,
    batch_stats: bool,
}

/// Batch normalization with statistics pooled over batch, orientation and
/// space for each channel, so that all four orientations share one affine
/// transform.
pub struct BatchNorm {
    pub scale: Param,
    pub shift: Param,
    pub running_mean: Param,
    pub running_var: Param,
    pub momentum: f32,
    pub eps: f32,
    cache: Option<NormCache>,
}

impl BatchNorm {
    pub const EPS: f32 = 1e-5;

    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            scale: Param::new(format!("{name}.scale"), vec![channels], ParamKind::NormScale, 1.0),
            shift: Param::new(format!("{name}.shift"), vec![channels], ParamKind::NormShift, 0.0),
            running_mean: Param::new(format!("{name}.running_mean"), vec![channels], ParamKind::Buffer, 0.0),
            running_var: Param::new(format!("{name}.running_var"), vec![channels], ParamKind::Buffer, 1.0),
            momentum: 0.1,
            eps: Self::EPS,
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.value.len()
    }

    /// Calls `f(channel, range)` for every `[b][o][c]` plane of `x` in a
    /// fixed order.
    fn for_each_plane(x: &GFeatureMap, mut f: impl FnMut(usize, std::ops::Range<usize>)) {
        let plane = x.plane_len();
        for b in 0..x.batch {
            for o in 0..x.orientations {
                for c in 0..x.channels {
                    let base = ((b * x.orientations + o) * x.channels + c) * plane;
                    f(c, base..base + plane);
                }
            }
        }
    }
}

/// Plane sum in f64, accumulated in eight interleaved lanes so the loop
/// vectorizes while the order stays fixed.
fn sum_f64(values: impl Iterator<Item = f64>) -> f64 {
    let mut lanes = [0.0f64; 8];
    for (i, v) in values.enumerate() {
        lanes[i & 7] += v;
    }
    lanes.iter().sum()
}

impl Layer for BatchNorm {
    fn forward(&mut self, x: &GFeatureMap, mode: Mode) -> Result<GFeatureMap> {
        let ch = self.channels();
        if x.channels != ch {
            return Err(Error::Shape(format!(
                "{}: expected {} channels, got {}",
                self.scale.name, ch, x.channels
            )));
        }
        let count = (x.batch * x.orientations * x.plane_len()) as f64;
        let (mean, var): (Vec<f64>, Vec<f64>) = if mode == Mode::Train {
            let mut sum = vec![0.0f64; ch];
            Self::for_each_plane(x, |c, r| sum[c] += sum_f64(x.data[r].iter().map(|&v| v as f64)));
            let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
            let mut sq = vec![0.0f64; ch];
            Self::for_each_plane(x, |c, r| {
                let m = mean[c];
                sq[c] += sum_f64(x.data[r].iter().map(|&v| (v as f64 - m) * (v as f64 - m)));
            });
            let var: Vec<f64> = sq.iter().map(|s| s / count).collect();
            let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            let m = self.momentum;
            for c in 0..ch {
                self.running_mean.value[c] = (1.0 - m) * self.running_mean.value[c] + m * mean[c] as f32;
                self.running_var.value[c] =
                    (1.0 - m) * self.running_var.value[c] + m * (var[c] * unbias) as f32;
            }
            (mean, var)
        } else {
            (
                self.running_mean.value.iter().map(|&v| v as f64).collect(),
                self.running_var.value.iter().map(|&v| v as f64).collect(),
            )
        };
        let inv_std: Vec<f32> = var.iter().map(|v| (1.0 / (v + self.eps as f64).sqrt()) as f32).collect();
        let mean: Vec<f32> = mean.iter().map(|&m| m as f32).collect();
        let mut normalized = x.zeros_like();
        let mut y = x.zeros_like();
        Self::for_each_plane(x, |c, r| {
            let (m, is, a, b) = (mean[c], inv_std[c], self.scale.value[c], self.shift.value[c]);
            for ((n, o), &v) in normalized.data[r.clone()].iter_mut().zip(&mut y.data[r.clone()]).zip(&x.data[r]) {
                *n = (v - m) * is;
                *o = a * *n + b;
            }
        });
        self.cache = mode.caches().then(|| NormCache {
            normalized,
            inv_std,
            batch_stats: mode == Mode::Train,
        });
        Ok(y)
    }

    fn backward(&mut self, dy: &GFeatureMap) -> Result<GFeatureMap> {
        let cache = self.cache.as_ref().ok_or_else(|| missing_cache(&self.scale.name))?;
        let xn = &cache.normalized;
        if !dy.same_shape(xn) {
            return Err(Error::Shape(format!("{}: upstream gradient shape", self.scale.name)));
        }
        let ch = self.channels();
        let count = (xn.batch * xn.orientations * xn.plane_len()) as f64;
        let mut sum_dy = vec![0.0f64; ch];
        let mut sum_dy_xn = vec![0.0f64; ch];
        Self::for_each_plane(xn, |c, r| {
            sum_dy[c] += sum_f64(dy.data[r.clone()].iter().map(|&v| v as f64));
            sum_dy_xn[c] += sum_f64(dy.data[r.clone()].iter().zip(&xn.data[r]).map(|(&g, &n)| (g * n) as f64));
        });
        for c in 0..ch {
            self.shift.grad[c] += sum_dy[c] as f32;
            self.scale.grad[c] += sum_dy_xn[c] as f32;
        }
        let mut dx = dy.zeros_like();
        if cache.batch_stats {
            let mean_dy: Vec<f32> = sum_dy.iter().map(|s| (s / count) as f32).collect();
            let mean_dy_xn: Vec<f32> = sum_dy_xn.iter().map(|s| (s / count) as f32).collect();
            Self::for_each_plane(xn, |c, r| {
                let g = self.scale.value[c] * cache.inv_std[c];
                let (md, mdx) = (mean_dy[c], mean_dy_xn[c]);
                for ((d, &u), &n) in dx.data[r.clone()].iter_mut().zip(&dy.data[r.clone()]).zip(&xn.data[r]) {
                    *d = g * (u - md - n * mdx);
                }
            });
        } else {
            Self::for_each_plane(xn, |c, r| {
                let g = self.scale.value[c] * cache.inv_std[c];
                for (d, &u) in dx.data[r.clone()].iter_mut().zip(&dy.data[r]) {
                    *d = g * u;
                }
            });
        }
        Ok(dx)
    }

    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.scale);
        f(&self.shift);
        f(&self.running_mean);
        f(&self.running_var);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.scale);
        f(&mut self.shift);
        f(&mut self.running_mean);
        f(&mut self.running_var);
    }
}

#[derive(Default)]
pub struct Relu {
    mask: Option<Vec<bool>>,
}

impl Relu {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Layer for Relu {
    fn forward(&mut self, x: &GFeatureMap, mode: Mode) -> Result<GFeatureMap> {
        let mut y = x.clone();
        y.data.iter_mut().for_each(|v| *v = v.max(0.0));
        self.mask = mode.caches().then(|| x.data.iter().map(|&v| v > 0.0).collect());
        Ok(y)
    }

    fn backward(&mut self, dy: &GFeatureMap) -> Result<GFeatureMap> {
        let mask = self.mask.as_ref().ok_or_else(|| missing_cache("relu"))?;
        if mask.len() != dy.data.len() {
            return Err(Error::Shape("relu: upstream gradient shape".into()));
        }
        let mut dx = dy.clone();
        for (d, &m) in dx.data.iter_mut().zip(mask) {
            if !m {
                *d = 0.0;
            }
        }
        Ok(dx)
    }
}

/// Max over the orientation axis; turns equivariant maps into invariant ones.
#[derive(Default)]
pub struct OrientationMaxPool {
    argmax: Option<(Vec<u8>, [usize; 5])>,
}

impl OrientationMaxPool {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Layer for OrientationMaxPool {
    fn forward(&mut self, x: &GFeatureMap, mode: Mode) -> Result<GFeatureMap> {
        let mut y = GFeatureMap::zeros(x.batch, 1, x.channels, x.height, x.width);
        let mut arg = vec![0u8; y.data.len()];
        let inner = x.channels * x.plane_len();
        for b in 0..x.batch {
            for i in 0..inner {
                let mut best = f32::NEG_INFINITY;
                let mut best_o = 0u8;
                for o in 0..x.orientations {
                    let v = x.data[(b * x.orientations + o) * inner + i];
                    if v > best {
                        best = v;
                        best_o = o as u8;
                    }
                }
                y.data[b * inner + i] = best;
                arg[b * inner + i] = best_o;
            }
        }
        self.argmax = mode.caches().then(|| (arg, x.shape()));
        Ok(y)
    }

    fn backward(&mut self, dy: &GFeatureMap) -> Result<GFeatureMap> {
        let (arg, shape) = self.argmax.as_ref().ok_or_else(|| missing_cache("orientation_max_pool"))?;
        let [batch, orientations, channels, h, w] = *shape;
        if dy.shape() != [batch, 1, channels, h, w] {
            return Err(Error::Shape("orientation_max_pool: upstream gradient shape".into()));
        }
        let mut dx = GFeatureMap::zeros(batch, orientations, channels, h, w);
        let inner = channels * h * w;
        for b in 0..batch {
            for i in 0..inner {
                let o = arg[b * inner + i] as usize;
                dx.data[(b * orientations + o) * inner + i] = dy.data[b * inner + i];
            }
        }
        Ok(dx)
    }
}

/// Per-site linear map from orientation-pooled features to two class logits.
pub struct LogitHead {
    pub weight: Param,
    pub bias: Param,
    cache: Option<GFeatureMap>,
}

impl LogitHead {
    pub const CLASSES: usize = 2;

    pub fn new(name: &str, in_channels: usize) -> Self {
        Self {
            weight: Param::new(format!("{name}.weight"), vec![Self::CLASSES, in_channels], ParamKind::Kernel, 0.0),
            bias: Param::new(format!("{name}.bias"), vec![Self::CLASSES], ParamKind::Bias, 0.0),
            cache: None,
        }
    }

    pub fn init(&mut self, rng: &mut impl Rng) {
        let fan_in = self.weight.shape[1];
        let normal = Normal::new(0.0f32, (1.0 / fan_in as f32).sqrt()).expect("finite std");
        for v in self.weight.value.iter_mut() {
            *v = normal.sample(rng);
        }
    }

    fn geometry(&self, x: &GFeatureMap) -> Result<ConvGeometry> {
        if x.orientations != 1 || x.channels != self.weight.shape[1] {
            return Err(Error::Shape(format!(
                "{}: expected 1x{} input planes, got {}x{}",
                self.weight.name, self.weight.shape[1], x.orientations, x.channels
            )));
        }
        Ok(ConvGeometry {
            in_planes: x.channels,
            height: x.height,
            width: x.width,
            kernel: 1,
            stride: 1,
        })
    }
}

impl Layer for LogitHead {
    fn forward(&mut self, x: &GFeatureMap, mode: Mode) -> Result<GFeatureMap> {
        let g = self.geometry(x)?;
        let mut y = GFeatureMap::zeros(x.batch, 1, Self::CLASSES, x.height, x.width);
        conv_forward(&x.data, x.batch, &g, &self.weight.value, Self::CLASSES, &mut y.data);
        let plane = x.plane_len();
        for b in 0..x.batch {
            for k in 0..Self::CLASSES {
                let off = (b * Self::CLASSES + k) * plane;
                y.data[off..off + plane].iter_mut().for_each(|v| *v += self.bias.value[k]);
            }
        }
        self.cache = mode.caches().then(|| x.clone());
        Ok(y)
    }

    fn backward(&mut self, dy: &GFeatureMap) -> Result<GFeatureMap> {
        let x = self.cache.as_ref().ok_or_else(|| missing_cache(&self.weight.name))?;
        let g = self.geometry(x)?;
        if dy.shape() != [x.batch, 1, Self::CLASSES, x.height, x.width] {
            return Err(Error::Shape(format!("{}: upstream gradient shape", self.weight.name)));
        }
        let plane = x.plane_len();
        for b in 0..x.batch {
            for k in 0..Self::CLASSES {
                let off = (b * Self::CLASSES + k) * plane;
                let s: f64 = dy.data[off..off + plane].iter().map(|&v| v as f64).sum();
                self.bias.grad[k] += s as f32;
            }
        }
        let mut dx = x.zeros_like();
        conv_backward(
            &x.data,
            x.batch,
            &g,
            &self.weight.value,
            Self::CLASSES,
            &dy.data,
            Some(&mut dx.data),
            &mut self.weight.grad,
        );
        Ok(dx)
    }

    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Residual sum of a branch with the center crop of its shortcut.
pub fn residual_add(branch: &GFeatureMap, shortcut: &GFeatureMap) -> Result<GFeatureMap> {
    if branch.batch != shortcut.batch
        || branch.orientations != shortcut.orientations
        || branch.channels != shortcut.channels
    {
        return Err(Error::Shape("residual_add: channel layout mismatch".into()));
    }
    let dh = shortcut.height.checked_sub(branch.height);
    let dw = shortcut.width.checked_sub(branch.width);
    let border = match (dh, dw) {
        (Some(dh), Some(dw)) if dh == dw && dh % 2 == 0 => dh / 2,
        _ => {
            return Err(Error::Shape(format!(
                "residual_add: cannot center-align {}x{} shortcut with {}x{} branch",
                shortcut.height, shortcut.width, branch.height, branch.width
            )))
        }
    };
    let mut out = if border == 0 { shortcut.clone() } else { shortcut.crop(border)? };
    for (o, b) in out.data.iter_mut().zip(&branch.data) {
        *o += b;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_map(rng: &mut ChaCha8Rng, shape: [usize; 5]) -> GFeatureMap {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        GFeatureMap::from_vec(shape[0], shape[1], shape[2], shape[3], shape[4], data).unwrap()
    }

    #[test]
    fn identity_lifting_kernel_replicates_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_map(&mut rng, [1, 1, 3, 5, 6]);
        let mut conv = P4Conv::lifting("lift", 3, 3, 1, 1);
        for c in 0..3 {
            conv.kernel.value[c * 3 + c] = 1.0;
        }
        let y = conv.forward(&x, Mode::Infer).unwrap();
        assert_eq!(y.orientations, 4);
        for r in 0..4 {
            for c in 0..3 {
                for i in 0..30 {
                    assert_eq!(y.data[(r * 3 + c) * 30 + i], x.data[c * 30 + i]);
                }
            }
        }
    }

    #[test]
    fn delta_group_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_map(&mut rng, [2, 4, 2, 6, 6]);
        let mut conv = P4Conv::group("g", 2, 2, 3, 1);
        // kernel[s=0][co][ci=co][center] = 1
        for c in 0..2 {
            conv.kernel.value[((c * 2 + c) * 3 + 1) * 3 + 1] = 1.0;
        }
        let y = conv.forward(&x, Mode::Infer).unwrap();
        let expected = x.crop(1).unwrap();
        assert!(y.max_abs_diff(&expected) == 0.0);

        let y2 = conv.forward(&y, Mode::Infer).unwrap();
        let once = x.crop(2).unwrap();
        assert_eq!(y2.max_abs_diff(&once), 0.0);
    }

    #[test]
    fn backward_without_forward_is_usage_error() {
        let mut conv = P4Conv::group("g", 1, 1, 3, 1);
        let dy = GFeatureMap::zeros(1, 4, 1, 2, 2);
        assert!(matches!(conv.backward(&dy), Err(Error::Usage(_))));
        let mut bn = BatchNorm::new("bn", 1);
        assert!(matches!(bn.backward(&dy), Err(Error::Usage(_))));
    }

    #[test]
    fn zero_upstream_gives_zero_param_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_map(&mut rng, [2, 1, 2, 6, 6]);
        let mut conv = P4Conv::lifting("lift", 2, 3, 3, 1);
        conv.init(&mut rng);
        let y = conv.forward(&x, Mode::Train).unwrap();
        conv.backward(&y.zeros_like()).unwrap();
        assert!(conv.kernel.grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn batchnorm_identity_and_constant_paths() {
        // zero-mean unit-variance input passes through unchanged
        let data: Vec<f32> = (0..8).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let x = GFeatureMap::from_vec(2, 1, 1, 2, 2, data).unwrap();
        let mut bn = BatchNorm::new("bn", 1);
        let y = bn.forward(&x, Mode::Train).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-4);

        let c = GFeatureMap::from_vec(1, 4, 1, 2, 2, vec![3.5; 16]).unwrap();
        bn.shift.value[0] = 0.25;
        let y = bn.forward(&c, Mode::Train).unwrap();
        assert!(y.data.iter().all(|&v| (v - 0.25).abs() < 1e-6));
    }

    #[test]
    fn batchnorm_output_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut x = random_map(&mut rng, [4, 4, 2, 5, 5]);
        x.data.iter_mut().for_each(|v| *v = *v * 3.0 + 7.0);
        let mut bn = BatchNorm::new("bn", 2);
        bn.scale.value = vec![0.5, 2.0];
        bn.shift.value = vec![-1.0, 0.3];
        let y = bn.forward(&x, Mode::Train).unwrap();
        for c in 0..2 {
            let mut vals = Vec::new();
            for b in 0..4 {
                for o in 0..4 {
                    for i in 0..25 {
                        vals.push(y.data[((b * 4 + o) * 2 + c) * 25 + i] as f64);
                    }
                }
            }
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
            assert!((mean - bn.shift.value[c] as f64).abs() < 1e-3);
            assert!((std - bn.scale.value[c] as f64).abs() < 1e-3);
        }
    }

    #[test]
    fn relu_clamps_negatives() {
        let x = GFeatureMap::from_vec(1, 1, 1, 1, 3, vec![-2.0, 0.5, -0.1]).unwrap();
        let y = Relu::new().forward(&x, Mode::Infer).unwrap();
        assert_eq!(y.data, vec![0.0, 0.5, 0.0]);
    }

    #[test]
    fn pool_on_orientation_constant_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let one = random_map(&mut rng, [1, 1, 3, 4, 4]);
        let mut data = Vec::new();
        for _ in 0..4 {
            data.extend_from_slice(&one.data);
        }
        let x = GFeatureMap::from_vec(1, 4, 3, 4, 4, data).unwrap();
        let y = OrientationMaxPool::new().forward(&x, Mode::Infer).unwrap();
        assert_eq!(y, one);
    }

    #[test]
    fn residual_add_crops_shortcut() {
        let s = GFeatureMap::from_vec(1, 1, 1, 3, 3, (1..=9).map(|v| v as f32).collect()).unwrap();
        let b = GFeatureMap::from_vec(1, 1, 1, 1, 1, vec![10.0]).unwrap();
        assert_eq!(residual_add(&b, &s).unwrap().data, vec![15.0]);
        let bad = GFeatureMap::zeros(1, 1, 1, 2, 1);
        assert!(residual_add(&bad, &s).is_err());
    }
}
