use crate::error::{Error, Result};

/// Batched orientation-structured feature tensor.
///
/// Layout is `[batch][orientations][channels][height][width]`, row-major.
/// `orientations` is 1 for plain images (and orientation-pooled maps) and 4
/// for P4 feature maps. Flattening `(orientation, channel)` gives the
/// channel index seen by the underlying planar convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct GFeatureMap {
    pub batch: usize,
    pub orientations: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl GFeatureMap {
    pub fn zeros(
        batch: usize,
        orientations: usize,
        channels: usize,
        height: usize,
        width: usize,
    ) -> Self {
        Self {
            batch,
            orientations,
            channels,
            height,
            width,
            data: vec![0.0; batch * orientations * channels * height * width],
        }
    }

    pub fn from_vec(
        batch: usize,
        orientations: usize,
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        let expected = batch * orientations * channels * height * width;
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "buffer of {} values for shape {}x{}x{}x{}x{} ({} expected)",
                data.len(),
                batch,
                orientations,
                channels,
                height,
                width,
                expected
            )));
        }
        Ok(Self {
            batch,
            orientations,
            channels,
            height,
            width,
            data,
        })
    }

    pub fn shape(&self) -> [usize; 5] {
        [
            self.batch,
            self.orientations,
            self.channels,
            self.height,
            self.width,
        ]
    }

    /// Flattened channel count `orientations * channels`.
    pub fn planes(&self) -> usize {
        self.orientations * self.channels
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn sample_len(&self) -> usize {
        self.planes() * self.plane_len()
    }

    pub fn sample(&self, b: usize) -> &[f32] {
        let n = self.sample_len();
        &self.data[b * n..(b + 1) * n]
    }

    pub fn sample_mut(&mut self, b: usize) -> &mut [f32] {
        let n = self.sample_len();
        &mut self.data[b * n..(b + 1) * n]
    }

    #[inline]
    pub fn index(&self, b: usize, o: usize, c: usize, y: usize, x: usize) -> usize {
        (((b * self.orientations + o) * self.channels + c) * self.height + y) * self.width + x
    }

    #[inline]
    pub fn at(&self, b: usize, o: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(b, o, c, y, x)]
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(
            self.batch,
            self.orientations,
            self.channels,
            self.height,
            self.width,
        )
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.shape() == other.shape()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Spatial rotation by `k` quarter turns (counter-clockwise, as
    /// `numpy.rot90`) combined with a cyclic shift of the orientation axis by
    /// `k`. This is the P4 action on feature maps; on plain images
    /// (`orientations == 1`) it reduces to a spatial rotation.
    pub fn rotate(&self, k: usize) -> Self {
        let k = k % 4;
        let (h, w) = (self.height, self.width);
        let (oh, ow) = if k % 2 == 0 { (h, w) } else { (w, h) };
        let mut out = Self::zeros(self.batch, self.orientations, self.channels, oh, ow);
        let no = self.orientations;
        for b in 0..self.batch {
            for o in 0..no {
                let dst_o = if no == 4 { (o + k) % 4 } else { o };
                for c in 0..self.channels {
                    for y in 0..oh {
                        for x in 0..ow {
                            let (sy, sx) = rot_source(y, x, h, w, k);
                            let v = self.at(b, o, c, sy, sx);
                            let idx = out.index(b, dst_o, c, y, x);
                            out.data[idx] = v;
                        }
                    }
                }
            }
        }
        out
    }

    /// Centered spatial crop removing `border` pixels on every side.
    pub fn crop(&self, border: usize) -> Result<Self> {
        if 2 * border >= self.height || 2 * border >= self.width {
            return Err(Error::Shape(format!(
                "cannot crop {} px from a {}x{} map",
                border, self.height, self.width
            )));
        }
        let (oh, ow) = (self.height - 2 * border, self.width - 2 * border);
        let mut out = Self::zeros(self.batch, self.orientations, self.channels, oh, ow);
        let planes = self.batch * self.planes();
        for p in 0..planes {
            let src = &self.data[p * self.plane_len()..(p + 1) * self.plane_len()];
            let dst = &mut out.data[p * oh * ow..(p + 1) * oh * ow];
            for y in 0..oh {
                let row = (y + border) * self.width + border;
                dst[y * ow..(y + 1) * ow].copy_from_slice(&src[row..row + ow]);
            }
        }
        Ok(out)
    }

    /// Adjoint of [`crop`](Self::crop): embeds this map in a zero frame.
    pub fn uncrop(&self, border: usize) -> Self {
        let (oh, ow) = (self.height + 2 * border, self.width + 2 * border);
        let mut out = Self::zeros(self.batch, self.orientations, self.channels, oh, ow);
        let planes = self.batch * self.planes();
        let (h, w) = (self.height, self.width);
        for p in 0..planes {
            let src = &self.data[p * h * w..(p + 1) * h * w];
            let dst = &mut out.data[p * oh * ow..(p + 1) * oh * ow];
            for y in 0..h {
                let row = (y + border) * ow + border;
                dst[row..row + w].copy_from_slice(&src[y * w..(y + 1) * w]);
            }
        }
        out
    }

    pub fn max_abs_diff(&self, other: &Self) -> f32 {
        assert!(self.same_shape(other), "shape mismatch in max_abs_diff");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

/// Source coordinate in an `h x w` image for output pixel `(y, x)` of its
/// rotation by `k` counter-clockwise quarter turns.
#[inline]
pub(crate) fn rot_source(y: usize, x: usize, h: usize, w: usize, k: usize) -> (usize, usize) {
    match k % 4 {
        0 => (y, x),
        1 => (x, w - 1 - y),
        2 => (h - 1 - y, w - 1 - x),
        _ => (h - 1 - x, y),
    }
}
