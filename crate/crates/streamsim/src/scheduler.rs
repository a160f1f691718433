//! Delay-aware scheduling: EMA per-stage delay estimation, the temporal-cue
//! planner (past/future frame-index selection with skip logic), and the three
//! buffers the runtime leans on — historical features, cached correlation
//! volumes, and the output buffer that emits the most temporally adjacent
//! prediction at every frame instant.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::CorrVolume;
use crate::types::{input_timestamp, FrameIndex, FramePrediction, TimeSec};

/// Cue indices are clipped to `[i - CLIP_RADIUS, i + CLIP_RADIUS]`.
pub const CLIP_RADIUS: u32 = 30;

/// Measured per-stage delays of one loop iteration, seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DelayRecord {
    pub frame: FrameIndex,
    /// communication: capture -> availability
    pub d1: f64,
    /// backbone compute
    pub d2b: f64,
    /// neck compute
    pub d2n: f64,
    /// head compute
    pub d2h: f64,
    /// start-up wait (previous iteration still running)
    pub d3: f64,
}

impl DelayRecord {
    pub fn validate(&self) -> Result<()> {
        if [self.d1, self.d2b, self.d2n, self.d2h, self.d3]
            .iter()
            .any(|d| !d.is_finite() || *d < 0.0)
        {
            return Err(Error::InvalidInput(format!(
                "delay components must be finite and non-negative: {self:?}"
            )));
        }
        Ok(())
    }
}

/// EMA state of the estimated per-stage delays, decay fixed at 0.5.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DelayEstimate {
    pub d1_hat: f64,
    pub d2b_hat: f64,
    pub d2n_hat: f64,
    pub d2h_hat: f64,
}

impl DelayEstimate {
    /// Start every stage estimate from the same prior (used before any
    /// measurement exists).
    pub fn with_prior(prior: f64) -> Result<Self> {
        if !prior.is_finite() || prior < 0.0 {
            return Err(Error::InvalidConfiguration(format!(
                "delay prior must be finite and non-negative, got {prior}"
            )));
        }
        Ok(DelayEstimate { d1_hat: prior, d2b_hat: prior, d2n_hat: prior, d2h_hat: prior })
    }
}

/// One EMA step per stage: `new = 0.5 * old + 0.5 * measured`.
pub fn update_estimate(e: &DelayEstimate, r: &DelayRecord) -> Result<DelayEstimate> {
    r.validate()?;
    let step = |old: f64, m: f64| 0.5 * old + 0.5 * m;
    Ok(DelayEstimate {
        d1_hat: step(e.d1_hat, r.d1),
        d2b_hat: step(e.d2b_hat, r.d2b),
        d2n_hat: step(e.d2n_hat, r.d2n),
        d2h_hat: step(e.d2h_hat, r.d2h),
    })
}

/// Estimated delay of the iteration about to run. When the frame is
/// unavailable the backbone term is dropped (buffered features are reused)
/// and the measured communication costs of the skipped frames are added.
pub fn total_delay(e: &DelayEstimate, d3: f64, frame_available: bool, skipped_costs: f64) -> f64 {
    let tail = e.d1_hat + e.d2n_hat + e.d2h_hat + d3;
    if frame_available {
        tail + e.d2b_hat
    } else {
        tail + skipped_costs
    }
}

/// The planner's output: past cue indices C^P (inputs to fuse) and future cue
/// indices C^F (targets to predict), both anchored at the processed frame.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemporalCues {
    pub past: Vec<FrameIndex>,
    pub future: Vec<FrameIndex>,
    pub anchor: FrameIndex,
}

/// Choose cue indices for the iteration anchored at frame `i`.
///
/// Past: the `m_past` largest available indices `<= i`. Future: consecutive
/// indices starting at `j_hat = max(i+1, ceil(k * (t_i + dt_hat)))` — the
/// first frame whose emission the finished output can precede. Both sets are
/// clipped to `[i - 30, i + 30]`.
pub fn plan_cues(
    i: FrameIndex,
    available: &[FrameIndex],
    dt_hat: f64,
    k: f64,
    m_past: usize,
    m_future: usize,
) -> Result<TemporalCues> {
    if !(k > 0.0) {
        return Err(Error::InvalidConfiguration(format!("frame rate must be positive, got {k}")));
    }
    if !dt_hat.is_finite() || dt_hat < 0.0 {
        return Err(Error::InvalidInput(format!("delay estimate must be >= 0, got {dt_hat}")));
    }
    let lo = i.get().saturating_sub(CLIP_RADIUS);
    let mut past: Vec<FrameIndex> = available
        .iter()
        .copied()
        .filter(|&p| p <= i && p.get() >= lo)
        .collect();
    past.sort_unstable();
    past.dedup();
    if past.len() > m_past {
        past.drain(..past.len() - m_past);
    }
    if past.is_empty() {
        return Err(Error::Scheduler(format!(
            "no available past frames at anchor {i}; insert the current frame first"
        )));
    }

    let t_i = input_timestamp(i, k)?.secs();
    // guard against float aliasing when k*(t + dt) lands exactly on an integer
    let raw = (k * (t_i + dt_hat) - 1e-9).ceil() as i64;
    let hi = i.get() as i64 + CLIP_RADIUS as i64;
    let j_hat = raw.max(i.get() as i64 + 1).min(hi);
    let future: Vec<FrameIndex> = (j_hat..j_hat + m_future as i64)
        .filter(|&j| j <= hi)
        .map(|j| FrameIndex(j as u32))
        .collect();

    Ok(TemporalCues { past, future, anchor: i })
}

/// Skip model execution when the time left before the next frame arrives is
/// small relative to the estimated iteration delay: gap < theta * dt_hat.
pub fn should_skip(now: TimeSec, next_arrival: TimeSec, dt_hat: f64, theta: f64) -> bool {
    (next_arrival.secs() - now.secs()) < theta * dt_hat
}

/// Bounded historical buffer keyed by strictly increasing frame index; when
/// full, the earliest entry is evicted (FIFO).
#[derive(Debug, Clone)]
pub struct FeatureBuffer<T> {
    capacity: usize,
    entries: Vec<(FrameIndex, T)>,
}

impl<T> FeatureBuffer<T> {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidConfiguration("buffer capacity must be positive".into()));
        }
        Ok(FeatureBuffer { capacity, entries: Vec::new() })
    }

    /// Insert at a new largest index, returning any evicted indices so the
    /// caller can invalidate dependent correlation-cache entries.
    pub fn insert(&mut self, index: FrameIndex, value: T) -> Result<Vec<FrameIndex>> {
        if let Some((last, _)) = self.entries.last() {
            if index <= *last {
                return Err(Error::InvalidInput(format!(
                    "out-of-order buffer insert: {index} after {last}"
                )));
            }
        }
        self.entries.push((index, value));
        let mut evicted = Vec::new();
        while self.entries.len() > self.capacity {
            evicted.push(self.entries.remove(0).0);
        }
        Ok(evicted)
    }

    pub fn get(&self, index: FrameIndex) -> Option<&T> {
        self.entries.iter().find(|(i, _)| *i == index).map(|(_, v)| v)
    }

    pub fn indices(&self) -> Vec<FrameIndex> {
        self.entries.iter().map(|(i, _)| *i).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Cache of computed correlation volumes keyed by frame pair, with compute
/// counters. Disabling the cache forces a recompute on every request (used to
/// measure what reuse buys).
#[derive(Debug, Clone)]
pub struct CorrBuffer {
    enabled: bool,
    entries: HashMap<(u32, u32), CorrVolume>,
    compute_counts: HashMap<(u32, u32), u32>,
    total_computes: u64,
}

impl CorrBuffer {
    pub fn new(enabled: bool) -> Self {
        CorrBuffer {
            enabled,
            entries: HashMap::new(),
            compute_counts: HashMap::new(),
            total_computes: 0,
        }
    }

    /// Return the cached volume for `pair`, or compute and store it. The
    /// flag reports whether a computation happened.
    pub fn get_or_compute<F>(&mut self, pair: (FrameIndex, FrameIndex), compute: F) -> Result<(CorrVolume, bool)>
    where
        F: FnOnce() -> Result<CorrVolume>,
    {
        let key = (pair.0.get(), pair.1.get());
        if self.enabled {
            if let Some(v) = self.entries.get(&key) {
                return Ok((v.clone(), false));
            }
        }
        let v = compute()?;
        *self.compute_counts.entry(key).or_insert(0) += 1;
        self.total_computes += 1;
        if self.enabled {
            self.entries.insert(key, v.clone());
        }
        Ok((v, true))
    }

    /// Drop cache entries that reference an evicted frame.
    pub fn invalidate(&mut self, evicted: FrameIndex) {
        let e = evicted.get();
        self.entries.retain(|&(a, b), _| a != e && b != e);
    }

    pub fn compute_count(&self, pair: (FrameIndex, FrameIndex)) -> u32 {
        *self.compute_counts.get(&(pair.0.get(), pair.1.get())).unwrap_or(&0)
    }

    pub fn max_pair_compute_count(&self) -> u32 {
        self.compute_counts.values().copied().max().unwrap_or(0)
    }

    pub fn total_computes(&self) -> u64 {
        self.total_computes
    }
}

/// Output buffer: at most one stored prediction per target index, with newer
/// submissions replacing older ones (fresher replaces stale). At each frame
/// instant the entry whose target timestamp is nearest is emitted; entries
/// persist after emission, so the same prediction keeps being emitted until a
/// temporally nearer or fresher one supersedes it.
#[derive(Debug, Clone, Default)]
pub struct OutputBuffer {
    live: BTreeMap<u32, FramePrediction>,
}

impl OutputBuffer {
    pub fn new() -> Self {
        OutputBuffer::default()
    }

    /// Store predictions; each replaces any entry for the same target.
    pub fn submit(&mut self, preds: Vec<FramePrediction>) {
        for p in preds {
            self.live.insert(p.target_index.get(), p);
        }
    }

    /// Emit the stored prediction whose target timestamp is nearest to `t`
    /// (ties break toward the smaller index), stamping `output_at = t`.
    /// Nothing is emitted while every stored target still lies in the
    /// future: the first output happens no earlier than its own instant.
    pub fn dispatch(&mut self, t: TimeSec, k: f64) -> Result<Option<FramePrediction>> {
        if let Some(&first) = self.live.keys().next() {
            if input_timestamp(FrameIndex(first), k)?.secs() > t.secs() + 1e-9 {
                return Ok(None);
            }
        }
        let mut best: Option<(f64, u32)> = None;
        for &j in self.live.keys() {
            let tj = input_timestamp(FrameIndex(j), k)?.secs();
            let dist = (tj - t.secs()).abs();
            // strict < keeps the first (smallest) index on ties
            if best.map_or(true, |(bd, _)| dist < bd) {
                best = Some((dist, j));
            }
        }
        match best {
            None => Ok(None),
            Some((_, j)) => {
                let tj = input_timestamp(FrameIndex(j), k)?.secs();
                if tj <= t.secs() {
                    // once the nearest entry's instant has passed, every
                    // earlier entry is dominated forever
                    self.live = self.live.split_off(&j);
                }
                let mut p = self.live.get(&j).expect("key from live map").clone();
                p.output_at = t;
                Ok(Some(p))
            }
        }
    }

    pub fn live_targets(&self) -> Vec<FrameIndex> {
        self.live.keys().map(|&j| FrameIndex(j)).collect()
    }

    pub fn live_len(&self) -> usize {
        self.live.len()
    }
}
