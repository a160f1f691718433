//! Synthetic driving-like scenarios: kinematic tracks, exact ground truth and
//! noisy per-frame observations standing in for a real detector's output.
//!
//! Generation and observation are pure, seed-threaded functions, so the same
//! `(config, seed)` always reproduces the same scenario byte for byte.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{BBox, Detection, FrameIndex};

/// One kinematic ground-truth track. Units: pixels, frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackState {
    pub track_id: u32,
    pub class_id: u32,
    pub center: (f64, f64),
    pub size: (f64, f64),
    /// pixels per frame
    pub velocity: (f64, f64),
    /// pixels per frame^2
    pub acceleration: (f64, f64),
    pub spawn: FrameIndex,
    pub despawn: FrameIndex,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub frame_rate: f64,
    pub length: u32,
    pub image_size: (f64, f64),
    pub speed_multiplier: f64,
    pub tracks: Vec<TrackState>,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        if !(self.frame_rate > 0.0) {
            return Err(Error::InvalidConfiguration("frame_rate must be positive".into()));
        }
        if self.length == 0 {
            return Err(Error::InvalidConfiguration("length must be positive".into()));
        }
        if !(self.image_size.0 > 0.0 && self.image_size.1 > 0.0) {
            return Err(Error::InvalidConfiguration("image_size must be positive".into()));
        }
        if !(self.speed_multiplier > 0.0) {
            return Err(Error::InvalidConfiguration("speed_multiplier must be positive".into()));
        }
        for t in &self.tracks {
            if t.spawn >= t.despawn || t.despawn.get() > self.length {
                return Err(Error::InvalidConfiguration(format!(
                    "track {} liveness [{}, {}) outside [0, {})",
                    t.track_id, t.spawn, t.despawn, self.length
                )));
            }
            if !(t.size.0 > 0.0 && t.size.1 > 0.0) {
                return Err(Error::InvalidConfiguration(format!(
                    "track {} has non-positive size",
                    t.track_id
                )));
            }
        }
        Ok(())
    }
}

/// Additive Gaussian noise on center/size plus Bernoulli misses. The default
/// is noiseless: zero sigmas, no misses, confidence pinned to 1.0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObservationNoise {
    pub center_sigma: f64,
    pub size_sigma: f64,
    pub miss_probability: f64,
    /// Confidence is sampled uniformly in [confidence_floor, 1].
    pub confidence_floor: f64,
}

impl ObservationNoise {
    pub fn none() -> Self {
        ObservationNoise {
            center_sigma: 0.0,
            size_sigma: 0.0,
            miss_probability: 0.0,
            confidence_floor: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.center_sigma < 0.0 || self.size_sigma < 0.0 {
            return Err(Error::InvalidConfiguration("noise sigmas must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.miss_probability)
            || !(0.0..=1.0).contains(&self.confidence_floor)
        {
            return Err(Error::InvalidConfiguration(
                "miss_probability and confidence_floor must be in [0,1]".into(),
            ));
        }
        Ok(())
    }
}

impl Default for ObservationNoise {
    fn default() -> Self {
        ObservationNoise::none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub frame_rate: f64,
    pub length: u32,
    pub image_size: (f64, f64),
    pub speed_multiplier: f64,
    pub num_tracks: u32,
    pub num_classes: u32,
    /// |velocity| range per axis, pixels/frame
    pub speed_range: (f64, f64),
    /// box side range, pixels
    pub size_range: (f64, f64),
    /// |acceleration| range per axis, pixels/frame^2
    pub accel_range: (f64, f64),
    /// every track alive on [spawn, despawn); spawn drawn from this range
    pub spawn_range: (u32, u32),
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        // 1920x1200 at 30 FPS: front-camera proportions.
        ScenarioConfig {
            frame_rate: 30.0,
            length: 600,
            image_size: (1920.0, 1200.0),
            speed_multiplier: 1.0,
            num_tracks: 20,
            num_classes: 3,
            speed_range: (2.0, 12.0),
            size_range: (40.0, 160.0),
            accel_range: (0.0, 0.0),
            spawn_range: (0, 0),
        }
    }
}

/// Deterministically generate a scenario from `(config, seed)`.
pub fn generate_scenario(config: &ScenarioConfig, seed: u64) -> Result<Scenario> {
    if config.length == 0 {
        return Err(Error::InvalidConfiguration("length must be positive".into()));
    }
    if !(config.image_size.0 > 0.0 && config.image_size.1 > 0.0) {
        return Err(Error::InvalidConfiguration("image_size must be positive".into()));
    }
    if !(config.frame_rate > 0.0) {
        return Err(Error::InvalidConfiguration("frame_rate must be positive".into()));
    }
    if !(config.speed_multiplier > 0.0) {
        return Err(Error::InvalidConfiguration("speed_multiplier must be positive".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (img_w, img_h) = config.image_size;
    let mut tracks = Vec::with_capacity(config.num_tracks as usize);
    for id in 0..config.num_tracks {
        let w = rng.gen_range(config.size_range.0..=config.size_range.1);
        let h = rng.gen_range(config.size_range.0..=config.size_range.1);
        // keep spawn position away from borders so short tracks stay unclamped
        let cx = rng.gen_range(img_w * 0.2..img_w * 0.8);
        let cy = rng.gen_range(img_h * 0.2..img_h * 0.8);
        let speed = |rng: &mut ChaCha8Rng| {
            let mag = rng.gen_range(config.speed_range.0..=config.speed_range.1);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        };
        let (vx, vy) = (speed(&mut rng), speed(&mut rng));
        let accel = |rng: &mut ChaCha8Rng| {
            if config.accel_range.1 <= 0.0 {
                0.0
            } else {
                rng.gen_range(-config.accel_range.1..=config.accel_range.1)
            }
        };
        let (ax, ay) = (accel(&mut rng), accel(&mut rng));
        let spawn = if config.spawn_range.1 > config.spawn_range.0 {
            rng.gen_range(config.spawn_range.0..config.spawn_range.1)
        } else {
            config.spawn_range.0
        };
        let spawn = spawn.min(config.length - 1);
        tracks.push(TrackState {
            track_id: id,
            class_id: id % config.num_classes.max(1),
            center: (cx, cy),
            size: (w, h),
            velocity: (vx, vy),
            acceleration: (ax, ay),
            spawn: FrameIndex(spawn),
            despawn: FrameIndex(config.length),
        });
    }

    let s = Scenario {
        frame_rate: config.frame_rate,
        length: config.length,
        image_size: config.image_size,
        speed_multiplier: config.speed_multiplier,
        tracks,
    };
    s.validate()?;
    Ok(s)
}

/// Exact kinematic center of a track at frame `j`:
/// `c(j) = c0 + v*m*j + 0.5*a*(m*j)^2` with `m` the speed multiplier.
fn track_center_at(t: &TrackState, j: u32, m: f64) -> (f64, f64) {
    let s = m * j as f64;
    (
        t.center.0 + t.velocity.0 * s + 0.5 * t.acceleration.0 * s * s,
        t.center.1 + t.velocity.1 * s + 0.5 * t.acceleration.1 * s * s,
    )
}

/// Clamp a center so the box stays inside the image plane.
fn clamp_center(c: (f64, f64), size: (f64, f64), img: (f64, f64)) -> (f64, f64) {
    let half_w = (size.0 / 2.0).min(img.0 / 2.0);
    let half_h = (size.1 / 2.0).min(img.1 / 2.0);
    (
        c.0.clamp(half_w, img.0 - half_w),
        c.1.clamp(half_h, img.1 - half_h),
    )
}

/// Ground truth at frame `j`: one `(track_id, class_id, bbox)` per live track.
pub fn ground_truth_at(s: &Scenario, j: FrameIndex) -> Result<Vec<(u32, u32, BBox)>> {
    if j.get() >= s.length {
        return Err(Error::IndexOutOfRange { index: j.get() as i64, len: s.length });
    }
    let mut out = Vec::new();
    for t in &s.tracks {
        if j < t.spawn || j >= t.despawn {
            continue;
        }
        let c = clamp_center(
            track_center_at(t, j.get(), s.speed_multiplier),
            t.size,
            s.image_size,
        );
        let bbox = BBox::from_center(c.0, c.1, t.size.0, t.size.1)?;
        out.push((t.track_id, t.class_id, bbox));
    }
    Ok(out)
}

/// Noisy observation of frame `j`, deterministic in `(s, j, n, seed)`.
pub fn observe(
    s: &Scenario,
    j: FrameIndex,
    n: &ObservationNoise,
    seed: u64,
) -> Result<Vec<Detection>> {
    n.validate()?;
    let gt = ground_truth_at(s, j)?;
    // per-frame stream so observations of different frames are independent
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(j.get() as u64 + 1)));
    let mut out = Vec::new();
    for (_, class_id, bbox) in gt {
        if n.miss_probability > 0.0 && rng.gen_bool(n.miss_probability) {
            continue;
        }
        // noiseless fast path keeps the ground-truth box bit-exact
        if n.center_sigma == 0.0 && n.size_sigma == 0.0 && n.confidence_floor >= 1.0 {
            out.push(Detection::new(bbox, class_id, 1.0)?);
            continue;
        }
        let (mut cx, mut cy) = bbox.center();
        let (mut w, mut h) = (bbox.width(), bbox.height());
        if n.center_sigma > 0.0 {
            let d = Normal::new(0.0, n.center_sigma).unwrap();
            cx += d.sample(&mut rng);
            cy += d.sample(&mut rng);
        }
        if n.size_sigma > 0.0 {
            let d = Normal::new(0.0, n.size_sigma).unwrap();
            w = (w + d.sample(&mut rng)).max(2.0);
            h = (h + d.sample(&mut rng)).max(2.0);
        }
        let confidence = if n.confidence_floor >= 1.0 {
            1.0
        } else {
            rng.gen_range(n.confidence_floor..=1.0)
        };
        let (cx, cy) = clamp_center((cx, cy), (w, h), s.image_size);
        out.push(Detection::new(BBox::from_center(cx, cy, w, h)?, class_id, confidence)?);
    }
    Ok(out)
}
