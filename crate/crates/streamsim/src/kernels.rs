//! Numerical forecasting kernels over rasterized feature grids: Gaussian-blob
//! rasterization, the spatial correlation sampler, softmax-weighted temporal
//! fusion, current-feature differencing, the residual combination rule and
//! peak decoding back into detections.
//!
//! All learned convolutions of the original design are replaced by fixed,
//! seeded 1x1 channel-mixing maps so every algebraic property stays testable
//! without training. All functions are pure.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{BBox, Detection, FrameIndex};

/// Dense real grid of shape `[C, H, W]` tied to a frame index.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
    pub frame_index: FrameIndex,
}

impl FeatureMap {
    pub fn zeros(channels: usize, height: usize, width: usize, frame_index: FrameIndex) -> Self {
        FeatureMap {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
            frame_index,
        }
    }

    #[inline]
    pub fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx(c, y, x)]
    }

    /// Zero-padded read: out-of-bounds coordinates yield 0.
    #[inline]
    pub fn get_padded(&self, c: usize, y: i64, x: i64) -> f64 {
        if y < 0 || x < 0 || y >= self.height as i64 || x >= self.width as i64 {
            0.0
        } else {
            self.get(c, y as usize, x as usize)
        }
    }

    pub fn same_shape(&self, other: &FeatureMap) -> bool {
        self.channels == other.channels
            && self.height == other.height
            && self.width == other.width
    }

    fn check_shape(&self, other: &FeatureMap) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::InvalidInput(format!(
                "feature map shape mismatch: {}x{}x{} vs {}x{}x{}",
                self.channels, self.height, self.width,
                other.channels, other.height, other.width
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &FeatureMap) -> Result<FeatureMap> {
        self.check_shape(other)?;
        let mut out = self.clone();
        for (a, b) in out.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(out)
    }

    pub fn sub(&self, other: &FeatureMap) -> Result<FeatureMap> {
        self.check_shape(other)?;
        let mut out = self.clone();
        for (a, b) in out.data.iter_mut().zip(&other.data) {
            *a -= b;
        }
        Ok(out)
    }
}

/// Correlation volume: one channel per displacement in the
/// `[-R1, R1] x [-R1, R1]` neighborhood, `(2*R1+1)^2` channels total.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrVolume {
    pub radius: usize,
    pub height: usize,
    pub width: usize,
    /// `[(2*radius+1)^2, H, W]`
    pub data: Vec<f64>,
    /// (older frame, newer frame) the volume was computed from
    pub pair: (FrameIndex, FrameIndex),
}

impl CorrVolume {
    pub fn channel_count(&self) -> usize {
        let side = 2 * self.radius + 1;
        side * side
    }

    pub fn zeros(radius: usize, height: usize, width: usize, pair: (FrameIndex, FrameIndex)) -> Self {
        let side = 2 * radius + 1;
        CorrVolume { radius, height, width, data: vec![0.0; side * side * height * width], pair }
    }

    #[inline]
    pub fn idx(&self, ch: usize, y: usize, x: usize) -> usize {
        (ch * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, ch: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx(ch, y, x)]
    }

    /// Channel index of displacement `(dy, dx)`, each in `[-radius, radius]`.
    #[inline]
    pub fn displacement_channel(&self, dy: i64, dx: i64) -> usize {
        let side = (2 * self.radius + 1) as i64;
        ((dy + self.radius as i64) * side + (dx + self.radius as i64)) as usize
    }

    /// Displacement `(dy, dx)` of the largest-valued channel at cell `(y, x)`.
    pub fn argmax_displacement(&self, y: usize, x: usize) -> (i64, i64) {
        let r = self.radius as i64;
        let mut best = f64::NEG_INFINITY;
        let mut arg = (0, 0);
        for dy in -r..=r {
            for dx in -r..=r {
                let v = self.get(self.displacement_channel(dy, dx), y, x);
                if v > best {
                    best = v;
                    arg = (dy, dx);
                }
            }
        }
        arg
    }
}

/// Grid geometry: how detections map onto a `[C, H, W]` raster over the
/// image plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub image_size: (f64, f64),
}

impl GridSpec {
    /// Image-pixel point -> continuous grid coordinates (x, y).
    pub fn to_grid(&self, px: f64, py: f64) -> (f64, f64) {
        (
            px / self.image_size.0 * self.width as f64,
            py / self.image_size.1 * self.height as f64,
        )
    }

    /// Center of grid cell (y, x) in image pixels.
    pub fn cell_center(&self, y: usize, x: usize) -> (f64, f64) {
        (
            (x as f64 + 0.5) / self.width as f64 * self.image_size.0,
            (y as f64 + 0.5) / self.height as f64 * self.image_size.1,
        )
    }
}

/// Rasterize detections into a feature map: a sum of isotropic Gaussian
/// blobs, one per detection, amplitude = confidence, sigma proportional to
/// the box diagonal. Channel 0 is occupancy; channel `1 + class_id` carries a
/// class one-hot copy when it exists.
pub fn rasterize(dets: &[Detection], grid: &GridSpec, frame_index: FrameIndex) -> Result<FeatureMap> {
    if grid.channels == 0 || grid.height == 0 || grid.width == 0 {
        return Err(Error::InvalidConfiguration("grid dims must be positive".into()));
    }
    let mut f = FeatureMap::zeros(grid.channels, grid.height, grid.width, frame_index);
    for d in dets {
        let (cx, cy) = d.bbox.center();
        let (gx, gy) = grid.to_grid(cx, cy);
        let (gw, gh) = (
            d.bbox.width() / grid.image_size.0 * grid.width as f64,
            d.bbox.height() / grid.image_size.1 * grid.height as f64,
        );
        let sigma = (0.35 * (gw * gw + gh * gh).sqrt()).max(0.5);
        let reach = (4.0 * sigma).ceil() as i64;
        let cell_x = gx.floor() as i64;
        let cell_y = gy.floor() as i64;
        for y in (cell_y - reach).max(0)..=(cell_y + reach).min(grid.height as i64 - 1) {
            for x in (cell_x - reach).max(0)..=(cell_x + reach).min(grid.width as i64 - 1) {
                let dx = x as f64 + 0.5 - gx;
                let dy = y as f64 + 0.5 - gy;
                let v = d.confidence * (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                let i0 = f.idx(0, y as usize, x as usize);
                f.data[i0] += v;
                let class_ch = 1 + d.class_id as usize;
                if class_ch < grid.channels {
                    let ic = f.idx(class_ch, y as usize, x as usize);
                    f.data[ic] += v;
                }
            }
        }
    }
    Ok(f)
}

/// Spatial patch correlation between `f_old` and `f_new`.
///
/// The channel for displacement `r1` at cell `x` holds the dot product of the
/// `(2*R2+1)^2` patch of `f_old` at `x` with the patch of `f_new` at `x + r1`,
/// summed over channels and divided by `C * (2*R2+1)^2`. Out-of-bounds reads
/// are zero.
pub fn correlate(f_old: &FeatureMap, f_new: &FeatureMap, r1: usize, r2: usize) -> Result<CorrVolume> {
    f_old.check_shape(f_new)?;
    let (h, w, c) = (f_old.height, f_old.width, f_old.channels);
    let mut vol = CorrVolume::zeros(r1, h, w, (f_old.frame_index, f_new.frame_index));
    let win = (2 * r2 + 1) as f64;
    let norm = c as f64 * win * win;
    let r1i = r1 as i64;
    let r2i = r2 as i64;
    for dy in -r1i..=r1i {
        for dx in -r1i..=r1i {
            let ch = vol.displacement_channel(dy, dx);
            for y in 0..h as i64 {
                for x in 0..w as i64 {
                    let mut acc = 0.0;
                    for c_i in 0..c {
                        for oy in -r2i..=r2i {
                            for ox in -r2i..=r2i {
                                acc += f_old.get_padded(c_i, y + oy, x + ox)
                                    * f_new.get_padded(c_i, y + dy + oy, x + dx + ox);
                            }
                        }
                    }
                    let i = vol.idx(ch, y as usize, x as usize);
                    vol.data[i] = acc / norm;
                }
            }
        }
    }
    Ok(vol)
}

/// Softmax weights over the past-offset values `(p - i)` of the correlation
/// volumes' source frames (every past cue except the newest).
pub fn cue_weights(past: &[FrameIndex], anchor: FrameIndex) -> Vec<f64> {
    let n = past.len().saturating_sub(1);
    let offsets: Vec<f64> = past[..n]
        .iter()
        .map(|p| p.get() as f64 - anchor.get() as f64)
        .collect();
    softmax(&offsets)
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    if xs.is_empty() {
        return Vec::new();
    }
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// Fuse per-pair correlation volumes into one volume per future cue:
/// `F_j = (j - i) * sum_p w_p * vol_p` with `w` the softmax cue weights.
pub fn fuse_correlations(
    vols: &[CorrVolume],
    past: &[FrameIndex],
    future: &[FrameIndex],
    anchor: FrameIndex,
) -> Result<Vec<CorrVolume>> {
    if vols.is_empty() {
        return Err(Error::InvalidInput(
            "fuse_correlations requires at least one correlation volume".into(),
        ));
    }
    if vols.len() + 1 != past.len() {
        return Err(Error::InvalidInput(format!(
            "expected one volume per adjacent past pair: got {} volumes for {} past cues",
            vols.len(),
            past.len()
        )));
    }
    let w = cue_weights(past, anchor);
    let mut base = CorrVolume::zeros(vols[0].radius, vols[0].height, vols[0].width, vols[0].pair);
    for (vol, wi) in vols.iter().zip(&w) {
        if vol.radius != base.radius || vol.height != base.height || vol.width != base.width {
            return Err(Error::InvalidInput("correlation volume shape mismatch".into()));
        }
        for (b, v) in base.data.iter_mut().zip(&vol.data) {
            *b += wi * v;
        }
    }
    let mut out = Vec::with_capacity(future.len());
    for &j in future {
        let scale = j.get() as f64 - anchor.get() as f64;
        let mut v = base.clone();
        for x in v.data.iter_mut() {
            *x *= scale;
        }
        v.pair = (anchor, j);
        out.push(v);
    }
    Ok(out)
}

/// Fixed 1x1 channel-mixing map: `out = W * in + b` applied at every cell.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearMap {
    pub out_channels: usize,
    pub in_channels: usize,
    /// row-major `[out_channels, in_channels]`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LinearMap {
    pub fn identity(channels: usize) -> Self {
        let mut weight = vec![0.0; channels * channels];
        for c in 0..channels {
            weight[c * channels + c] = 1.0;
        }
        LinearMap { out_channels: channels, in_channels: channels, weight, bias: vec![0.0; channels] }
    }

    /// Deterministic random map with weights ~ N(0, scale^2) and zero bias.
    pub fn seeded(out_channels: usize, in_channels: usize, seed: u64, scale: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, scale).unwrap();
        let weight = (0..out_channels * in_channels)
            .map(|_| dist.sample(&mut rng))
            .collect();
        LinearMap { out_channels, in_channels, weight, bias: vec![0.0; out_channels] }
    }

    fn apply_raw(&self, data: &[f64], channels: usize, height: usize, width: usize) -> Result<Vec<f64>> {
        if channels != self.in_channels {
            return Err(Error::InvalidInput(format!(
                "linear map expects {} input channels, got {channels}",
                self.in_channels
            )));
        }
        let hw = height * width;
        let mut out = vec![0.0; self.out_channels * hw];
        for oc in 0..self.out_channels {
            for ic in 0..channels {
                let w = self.weight[oc * channels + ic];
                if w == 0.0 {
                    continue;
                }
                let src = &data[ic * hw..(ic + 1) * hw];
                let dst = &mut out[oc * hw..(oc + 1) * hw];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
            let b = self.bias[oc];
            if b != 0.0 {
                for d in &mut out[oc * hw..(oc + 1) * hw] {
                    *d += b;
                }
            }
        }
        Ok(out)
    }

    pub fn apply(&self, f: &FeatureMap) -> Result<FeatureMap> {
        let data = self.apply_raw(&f.data, f.channels, f.height, f.width)?;
        Ok(FeatureMap {
            channels: self.out_channels,
            height: f.height,
            width: f.width,
            data,
            frame_index: f.frame_index,
        })
    }
}

/// Parameters of the two channel-mixing maps used by [`diff_now`].
#[derive(Debug, Clone, PartialEq)]
pub struct DiffNowParams {
    pub map1: LinearMap,
    pub map2: LinearMap,
}

impl DiffNowParams {
    pub fn identity(channels: usize) -> Self {
        DiffNowParams { map1: LinearMap::identity(channels), map2: LinearMap::identity(channels) }
    }

    pub fn seeded(channels: usize, seed: u64, scale: f64) -> Self {
        DiffNowParams {
            map1: LinearMap::seeded(channels, channels, seed, scale),
            map2: LinearMap::seeded(channels, channels, seed.wrapping_add(1), scale),
        }
    }
}

/// Current-feature enhancement: `Map2(Map1(F_i) - Map1(F_near))`.
pub fn diff_now(f_i: &FeatureMap, f_near: &FeatureMap, p: &DiffNowParams) -> Result<FeatureMap> {
    f_i.check_shape(f_near)?;
    let a = p.map1.apply(f_i)?;
    let b = p.map1.apply(f_near)?;
    let mut out = p.map2.apply(&a.sub(&b)?)?;
    out.frame_index = f_i.frame_index;
    Ok(out)
}

/// Project a correlation volume back to `C` feature channels with a fixed
/// channel-mixing map (the stand-in for the post-concatenation convolutions).
pub fn project_corr(vol: &CorrVolume, map: &LinearMap) -> Result<FeatureMap> {
    let data = map.apply_raw(&vol.data, vol.channel_count(), vol.height, vol.width)?;
    Ok(FeatureMap {
        channels: map.out_channels,
        height: vol.height,
        width: vol.width,
        data,
        frame_index: vol.pair.1,
    })
}

/// Residual combination: `out_j = (F_i + F^D) + corr_j`, one map per future
/// cue, tagged with that cue. With no correlation features every output is
/// `F_i + F^D`.
pub fn combine(
    f_i: &FeatureMap,
    f_d: &FeatureMap,
    corrs: &[FeatureMap],
    future: &[FrameIndex],
) -> Result<Vec<FeatureMap>> {
    if !corrs.is_empty() && corrs.len() != future.len() {
        return Err(Error::InvalidInput(format!(
            "expected {} correlation features, got {}",
            future.len(),
            corrs.len()
        )));
    }
    let base = f_i.add(f_d)?;
    let mut out = Vec::with_capacity(future.len());
    for (n, &j) in future.iter().enumerate() {
        let mut m = if corrs.is_empty() { base.clone() } else { base.add(&corrs[n])? };
        m.frame_index = j;
        out.push(m);
    }
    Ok(out)
}

/// A past box whose size/class a decoded peak inherits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CarriedBox {
    pub center: (f64, f64),
    pub size: (f64, f64),
    pub class_id: u32,
}

impl CarriedBox {
    pub fn from_detection(d: &Detection) -> Self {
        CarriedBox {
            center: d.bbox.center(),
            size: (d.bbox.width(), d.bbox.height()),
            class_id: d.class_id,
        }
    }
}

/// Decode local maxima of channel 0 above `threshold` into detections. Box
/// size and class come from the nearest carried past box; confidence is the
/// peak value clamped to [0, 1].
pub fn decode_peaks(
    f: &FeatureMap,
    threshold: f64,
    carried: &[CarriedBox],
    grid: &GridSpec,
) -> Result<Vec<Detection>> {
    if !(threshold > 0.0) {
        return Err(Error::InvalidInput("threshold must be positive".into()));
    }
    let mut out = Vec::new();
    for y in 0..f.height {
        for x in 0..f.width {
            let v = f.get(0, y, x);
            if v <= threshold {
                continue;
            }
            let mut is_peak = true;
            'nbr: for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dy == 0 && dx == 0 {
                        continue;
                    }
                    if f.get_padded(0, y as i64 + dy, x as i64 + dx) >= v {
                        is_peak = false;
                        break 'nbr;
                    }
                }
            }
            if !is_peak {
                continue;
            }
            let (cx, cy) = grid.cell_center(y, x);
            let (size, class_id) = nearest_carried(carried, cx, cy)
                .map(|c| (c.size, c.class_id))
                .unwrap_or((
                    (
                        grid.image_size.0 / grid.width as f64 * 3.0,
                        grid.image_size.1 / grid.height as f64 * 3.0,
                    ),
                    0,
                ));
            let (cx, cy) = (
                cx.clamp(size.0 / 2.0, grid.image_size.0 - size.0 / 2.0),
                cy.clamp(size.1 / 2.0, grid.image_size.1 - size.1 / 2.0),
            );
            out.push(Detection::new(
                BBox::from_center(cx, cy, size.0, size.1)?,
                class_id,
                v.clamp(0.0, 1.0),
            )?);
        }
    }
    Ok(out)
}

fn nearest_carried(carried: &[CarriedBox], cx: f64, cy: f64) -> Option<&CarriedBox> {
    carried.iter().min_by(|a, b| {
        let da = (a.center.0 - cx).powi(2) + (a.center.1 - cy).powi(2);
        let db = (b.center.0 - cx).powi(2) + (b.center.1 - cy).powi(2);
        da.partial_cmp(&db).unwrap()
    })
}
