//! Pluggable detector models: each consumes past observations at the planned
//! past cue indices and emits one prediction per requested future index, with
//! declared nominal stage costs (backbone / neck / head) that the runtime
//! turns into simulated compute delays.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{
    combine, correlate, decode_peaks, diff_now, fuse_correlations, project_corr, rasterize,
    CarriedBox, DiffNowParams, FeatureMap, GridSpec, LinearMap,
};
use crate::scene::{ground_truth_at, Scenario};
use crate::scheduler::CorrBuffer;
use crate::types::{iou, Detection, FrameIndex};

/// Nominal per-stage compute durations, seconds. Metadata, not measurement:
/// the runtime scales and schedules them, keeping simulations deterministic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageCosts {
    pub backbone: f64,
    pub neck: f64,
    pub head: f64,
}

impl StageCosts {
    pub fn validate(&self) -> Result<()> {
        if [self.backbone, self.neck, self.head]
            .iter()
            .any(|c| !c.is_finite() || *c < 0.0)
        {
            return Err(Error::InvalidConfiguration(format!(
                "stage costs must be finite and non-negative: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Observations at the planned past cue indices, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationWindow {
    pub entries: Vec<(FrameIndex, Vec<Detection>)>,
}

impl ObservationWindow {
    pub fn new(entries: Vec<(FrameIndex, Vec<Detection>)>) -> Result<Self> {
        if !entries.windows(2).all(|w| w[0].0 < w[1].0) {
            return Err(Error::InvalidInput("window indices must be strictly increasing".into()));
        }
        Ok(ObservationWindow { entries })
    }

    pub fn newest(&self) -> Result<&(FrameIndex, Vec<Detection>)> {
        self.entries
            .last()
            .ok_or_else(|| Error::Model("empty observation window".into()))
    }
}

/// Model output: detections per future index plus how many correlation
/// volumes the inference actually computed (cache misses).
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceOutput {
    pub predictions: Vec<(FrameIndex, Vec<Detection>)>,
    pub corrs_computed: u32,
}

/// A detector model: past observations in, one prediction per future index
/// out. Implementations may keep private per-run state.
pub trait DetectorModel {
    fn name(&self) -> &str;
    fn stage_costs(&self) -> StageCosts;
    fn infer(
        &mut self,
        window: &ObservationWindow,
        future: &[FrameIndex],
        corrs: &mut CorrBuffer,
    ) -> Result<InferenceOutput>;
}

/// Non-predictive baseline: every future index receives a copy of the newest
/// observation's detections.
pub struct IdentityDetector {
    costs: StageCosts,
}

impl IdentityDetector {
    pub fn new(costs: StageCosts) -> Self {
        IdentityDetector { costs }
    }
}

impl DetectorModel for IdentityDetector {
    fn name(&self) -> &str {
        "identity"
    }

    fn stage_costs(&self) -> StageCosts {
        self.costs
    }

    fn infer(
        &mut self,
        window: &ObservationWindow,
        future: &[FrameIndex],
        _corrs: &mut CorrBuffer,
    ) -> Result<InferenceOutput> {
        let (_, newest) = window.newest()?;
        Ok(InferenceOutput {
            predictions: future.iter().map(|&j| (j, newest.clone())).collect(),
            corrs_computed: 0,
        })
    }
}

/// Constant-velocity extrapolator: greedy IoU association across the window,
/// least-squares line fit per track center, extrapolated to each future
/// index. Size and class are carried from the newest observation.
pub struct CvForecaster {
    costs: StageCosts,
    iou_floor: f64,
}

impl CvForecaster {
    pub fn new(costs: StageCosts) -> Self {
        CvForecaster { costs, iou_floor: 0.3 }
    }
}

/// Least-squares line fit through (j, value) points; returns (intercept,
/// slope). A single point fits a flat line.
fn fit_line(points: &[(f64, f64)]) -> (f64, f64) {
    let n = points.len() as f64;
    if points.len() < 2 {
        return (points.first().map(|p| p.1).unwrap_or(0.0), 0.0);
    }
    let sx: f64 = points.iter().map(|p| p.0).sum();
    let sy: f64 = points.iter().map(|p| p.1).sum();
    let sxx: f64 = points.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = points.iter().map(|p| p.0 * p.1).sum();
    let denom = n * sxx - sx * sx;
    if denom.abs() < 1e-12 {
        return (sy / n, 0.0);
    }
    let slope = (n * sxy - sx * sy) / denom;
    let intercept = (sy - slope * sx) / n;
    (intercept, slope)
}

impl DetectorModel for CvForecaster {
    fn name(&self) -> &str {
        "cv"
    }

    fn stage_costs(&self) -> StageCosts {
        self.costs
    }

    fn infer(
        &mut self,
        window: &ObservationWindow,
        future: &[FrameIndex],
        _corrs: &mut CorrBuffer,
    ) -> Result<InferenceOutput> {
        let (newest_idx, newest) = window.newest()?;
        // one chain per newest detection; walk backwards, greedily matching
        // by highest IoU (same class, floor 0.3) against each older entry
        struct Chain {
            seed: Detection,
            points: Vec<(f64, (f64, f64))>,
            last_box: Detection,
        }
        let mut chains: Vec<Chain> = newest
            .iter()
            .map(|d| Chain {
                seed: *d,
                points: vec![(newest_idx.get() as f64, d.bbox.center())],
                last_box: *d,
            })
            .collect();
        for (idx, dets) in window.entries.iter().rev().skip(1) {
            let mut used = vec![false; dets.len()];
            for chain in chains.iter_mut() {
                let mut best: Option<(f64, usize)> = None;
                for (n, d) in dets.iter().enumerate() {
                    if used[n] || d.class_id != chain.last_box.class_id {
                        continue;
                    }
                    let v = iou(&d.bbox, &chain.last_box.bbox)?;
                    if v >= self.iou_floor && best.map_or(true, |(bv, _)| v > bv) {
                        best = Some((v, n));
                    }
                }
                if let Some((_, n)) = best {
                    used[n] = true;
                    chain.points.push((idx.get() as f64, dets[n].bbox.center()));
                    chain.last_box = dets[n];
                }
            }
        }

        let mut predictions = Vec::with_capacity(future.len());
        for &j in future {
            let mut dets = Vec::with_capacity(chains.len());
            for chain in &chains {
                let xs: Vec<(f64, f64)> = chain.points.iter().map(|(t, c)| (*t, c.0)).collect();
                let ys: Vec<(f64, f64)> = chain.points.iter().map(|(t, c)| (*t, c.1)).collect();
                let (ax, bx) = fit_line(&xs);
                let (ay, by) = fit_line(&ys);
                let t = j.get() as f64;
                let (w, h) = (chain.seed.bbox.width(), chain.seed.bbox.height());
                let bbox = crate::types::BBox::from_center(ax + bx * t, ay + by * t, w, h)?;
                dets.push(Detection::new(bbox, chain.seed.class_id, chain.seed.confidence)?);
            }
            predictions.push((j, dets));
        }
        Ok(InferenceOutput { predictions, corrs_computed: 0 })
    }
}

/// Parameters of the feature-space forecasting pipeline.
#[derive(Debug, Clone)]
pub struct KernelDetectorParams {
    pub grid: GridSpec,
    pub r1: usize,
    pub r2: usize,
    pub diff: DiffNowParams,
    /// projects correlation volumes back to feature channels
    pub projection: LinearMap,
    pub peak_threshold: f64,
}

impl KernelDetectorParams {
    /// Sensible defaults for a given grid: identity differencing plus a
    /// small seeded correlation projection.
    pub fn for_grid(grid: GridSpec, r1: usize, r2: usize, seed: u64) -> Self {
        let side = 2 * r1 + 1;
        KernelDetectorParams {
            grid,
            r1,
            r2,
            diff: DiffNowParams::identity(grid.channels),
            projection: LinearMap::seeded(grid.channels, side * side, seed, 0.02),
            peak_threshold: 0.3,
        }
    }
}

/// Feature-space forecaster: rasterize window entries, correlate adjacent
/// pairs (reusing the shared correlation cache), fuse, difference against the
/// most neighboring feature, combine and decode peaks per future index.
pub struct KernelDetector {
    costs: StageCosts,
    params: KernelDetectorParams,
    /// backbone output cache, private per-run state
    features: HashMap<u32, FeatureMap>,
}

impl KernelDetector {
    pub fn new(costs: StageCosts, params: KernelDetectorParams) -> Self {
        KernelDetector { costs, params, features: HashMap::new() }
    }

    fn feature_for(&mut self, idx: FrameIndex, dets: &[Detection]) -> Result<FeatureMap> {
        if let Some(f) = self.features.get(&idx.get()) {
            return Ok(f.clone());
        }
        let f = rasterize(dets, &self.params.grid, idx)?;
        self.features.insert(idx.get(), f.clone());
        Ok(f)
    }
}

impl DetectorModel for KernelDetector {
    fn name(&self) -> &str {
        "kernel"
    }

    fn stage_costs(&self) -> StageCosts {
        self.costs
    }

    fn infer(
        &mut self,
        window: &ObservationWindow,
        future: &[FrameIndex],
        corrs: &mut CorrBuffer,
    ) -> Result<InferenceOutput> {
        let (anchor, newest) = window.newest()?.clone();
        let feats: Vec<FeatureMap> = window
            .entries
            .iter()
            .map(|(j, dets)| self.feature_for(*j, dets))
            .collect::<Result<_>>()?;
        let past: Vec<FrameIndex> = window.entries.iter().map(|(j, _)| *j).collect();

        let mut computed = 0u32;
        let mut corr_feats = Vec::new();
        if feats.len() >= 2 && !future.is_empty() {
            let mut vols = Vec::with_capacity(feats.len() - 1);
            for pair in feats.windows(2) {
                let key = (pair[0].frame_index, pair[1].frame_index);
                let (vol, was_computed) = corrs.get_or_compute(key, || {
                    correlate(&pair[0], &pair[1], self.params.r1, self.params.r2)
                })?;
                if was_computed {
                    computed += 1;
                }
                vols.push(vol);
            }
            let fused = fuse_correlations(&vols, &past, future, anchor)?;
            corr_feats = fused
                .iter()
                .map(|v| project_corr(v, &self.params.projection))
                .collect::<Result<_>>()?;
        }

        let f_i = feats.last().expect("newest checked non-empty").clone();
        let f_near = if feats.len() >= 2 { feats[feats.len() - 2].clone() } else { f_i.clone() };
        let f_d = diff_now(&f_i, &f_near, &self.params.diff)?;
        let outs = combine(&f_i, &f_d, &corr_feats, future)?;

        let carried: Vec<CarriedBox> = newest.iter().map(CarriedBox::from_detection).collect();
        let mut predictions = Vec::with_capacity(future.len());
        for (out, &j) in outs.iter().zip(future) {
            let dets = decode_peaks(out, self.params.peak_threshold, &carried, &self.params.grid)?;
            predictions.push((j, dets));
        }
        Ok(InferenceOutput { predictions, corrs_computed: computed })
    }
}

/// Perfect oracle: emits exact ground truth for every future index,
/// regardless of the observations. Confidence 1.0.
pub struct OracleDetector {
    costs: StageCosts,
    scenario: Scenario,
}

impl OracleDetector {
    pub fn new(costs: StageCosts, scenario: Scenario) -> Self {
        OracleDetector { costs, scenario }
    }
}

impl DetectorModel for OracleDetector {
    fn name(&self) -> &str {
        "oracle"
    }

    fn stage_costs(&self) -> StageCosts {
        self.costs
    }

    fn infer(
        &mut self,
        window: &ObservationWindow,
        future: &[FrameIndex],
        _corrs: &mut CorrBuffer,
    ) -> Result<InferenceOutput> {
        window.newest()?;
        let mut predictions = Vec::with_capacity(future.len());
        for &j in future {
            // targets past the end carry the final frame's state
            let j_eff = FrameIndex(j.get().min(self.scenario.length - 1));
            let dets = ground_truth_at(&self.scenario, j_eff)?
                .into_iter()
                .map(|(_, class, bbox)| Detection::new(bbox, class, 1.0))
                .collect::<Result<_>>()?;
            predictions.push((j, dets));
        }
        Ok(InferenceOutput { predictions, corrs_computed: 0 })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::TrackState;
    use crate::types::BBox;

    fn costs() -> StageCosts {
        StageCosts { backbone: 0.010, neck: 0.005, head: 0.005 }
    }

    fn det(cx: f64, cy: f64, w: f64, h: f64, class: u32) -> Detection {
        Detection::new(BBox::from_center(cx, cy, w, h).unwrap(), class, 1.0).unwrap()
    }

    fn fi(v: &[u32]) -> Vec<FrameIndex> {
        v.iter().map(|&x| FrameIndex(x)).collect()
    }

    fn linear_scenario(vx: f64) -> Scenario {
        Scenario {
            frame_rate: 30.0,
            length: 100,
            image_size: (1920.0, 1200.0),
            speed_multiplier: 1.0,
            tracks: vec![TrackState {
                track_id: 0,
                class_id: 0,
                center: (300.0, 400.0),
                size: (60.0, 60.0),
                velocity: (vx, 0.0),
                acceleration: (0.0, 0.0),
                spawn: FrameIndex(0),
                despawn: FrameIndex(100),
            }],
        }
    }

    #[test]
    fn identity_copies_newest() {
        let w = ObservationWindow::new(vec![(FrameIndex(5), vec![det(100.0, 100.0, 20.0, 20.0, 1)])])
            .unwrap();
        let mut m = IdentityDetector::new(costs());
        let mut cb = CorrBuffer::new(true);
        let out = m.infer(&w, &fi(&[6, 7]), &mut cb).unwrap();
        assert_eq!(out.predictions.len(), 2);
        for (j, dets) in &out.predictions {
            assert!(j.get() >= 6);
            assert_eq!(dets, &w.entries[0].1);
        }
        assert!(m.infer(&w, &[], &mut cb).unwrap().predictions.is_empty());
        let empty = ObservationWindow::new(vec![]).unwrap();
        assert!(m.infer(&empty, &fi(&[6]), &mut cb).is_err());
    }

    #[test]
    fn identity_error_grows_linearly_with_horizon() {
        let s = linear_scenario(10.0);
        let i = FrameIndex(5);
        let obs = crate::scene::observe(&s, i, &crate::scene::ObservationNoise::none(), 0).unwrap();
        let w = ObservationWindow::new(vec![(i, obs)]).unwrap();
        let mut m = IdentityDetector::new(costs());
        let mut cb = CorrBuffer::new(true);
        let out = m.infer(&w, &fi(&[6, 7, 8]), &mut cb).unwrap();
        for (j, dets) in &out.predictions {
            let gt = ground_truth_at(&s, *j).unwrap();
            let err = (dets[0].bbox.center().0 - gt[0].2.center().0).abs();
            let expect = 10.0 * (j.get() - i.get()) as f64;
            assert!((err - expect).abs() < 1e-9, "horizon {j}");
        }
    }

    #[test]
    fn cv_two_point_extrapolation() {
        // x = 90 at j=4, x = 100 at j=5 -> x = 110 at j=6
        let w = ObservationWindow::new(vec![
            (FrameIndex(4), vec![det(90.0, 200.0, 30.0, 30.0, 0)]),
            (FrameIndex(5), vec![det(100.0, 200.0, 30.0, 30.0, 0)]),
        ])
        .unwrap();
        let mut m = CvForecaster::new(costs());
        let mut cb = CorrBuffer::new(true);
        let out = m.infer(&w, &fi(&[6]), &mut cb).unwrap();
        let c = out.predictions[0].1[0].bbox.center();
        assert!((c.0 - 110.0).abs() < 1e-9);
        assert!((c.1 - 200.0).abs() < 1e-9);
    }

    #[test]
    fn cv_single_frame_is_zero_velocity() {
        let w = ObservationWindow::new(vec![(FrameIndex(5), vec![det(100.0, 200.0, 30.0, 30.0, 0)])])
            .unwrap();
        let mut m = CvForecaster::new(costs());
        let mut cb = CorrBuffer::new(true);
        let out = m.infer(&w, &fi(&[8]), &mut cb).unwrap();
        assert_eq!(out.predictions[0].1[0].bbox.center(), (100.0, 200.0));
    }

    #[test]
    fn cv_exact_on_noiseless_linear_motion() {
        let s = linear_scenario(8.0);
        let noise = crate::scene::ObservationNoise::none();
        for window_len in [2usize, 3, 4] {
            let start = 10u32;
            let entries: Vec<_> = (0..window_len as u32)
                .map(|n| {
                    let j = FrameIndex(start + n);
                    (j, crate::scene::observe(&s, j, &noise, 0).unwrap())
                })
                .collect();
            let w = ObservationWindow::new(entries).unwrap();
            let mut m = CvForecaster::new(costs());
            let mut cb = CorrBuffer::new(true);
            let last = start + window_len as u32 - 1;
            let out = m.infer(&w, &fi(&[last + 1, last + 5, last + 12]), &mut cb).unwrap();
            for (j, dets) in &out.predictions {
                let gt = ground_truth_at(&s, *j).unwrap();
                let (px, py) = dets[0].bbox.center();
                let (gx, gy) = gt[0].2.center();
                assert!((px - gx).abs() < 1e-6 && (py - gy).abs() < 1e-6, "w={window_len} j={j}");
            }
        }
    }

    fn kernel_model() -> KernelDetector {
        let grid = GridSpec { channels: 2, height: 24, width: 24, image_size: (240.0, 240.0) };
        KernelDetector::new(costs(), KernelDetectorParams::for_grid(grid, 3, 1, 42))
    }

    #[test]
    fn kernel_static_scene_keeps_centers() {
        let d = det(125.0, 125.0, 30.0, 30.0, 0);
        let w = ObservationWindow::new(vec![
            (FrameIndex(3), vec![d]),
            (FrameIndex(4), vec![d]),
            (FrameIndex(5), vec![d]),
        ])
        .unwrap();
        let mut m = kernel_model();
        let mut cb = CorrBuffer::new(true);
        let out = m.infer(&w, &fi(&[6, 7]), &mut cb).unwrap();
        for (j, dets) in &out.predictions {
            assert_eq!(dets.len(), 1, "target {j}");
            let (cx, cy) = dets[0].bbox.center();
            assert!((cx - 125.0).abs() <= 5.0 && (cy - 125.0).abs() <= 5.0);
        }
    }

    #[test]
    fn kernel_constant_velocity_within_one_cell() {
        // 10 px per frame = 1 grid cell per frame on a 10 px/cell grid
        let mk = |j: u32| det(65.0 + 10.0 * j as f64, 125.0, 30.0, 30.0, 0);
        let w = ObservationWindow::new(vec![
            (FrameIndex(3), vec![mk(3)]),
            (FrameIndex(4), vec![mk(4)]),
            (FrameIndex(5), vec![mk(5)]),
        ])
        .unwrap();
        let mut m = kernel_model();
        let mut cb = CorrBuffer::new(true);
        let out = m.infer(&w, &fi(&[6]), &mut cb).unwrap();
        let dets = &out.predictions[0].1;
        assert!(!dets.is_empty());
        let truth = 65.0 + 10.0 * 6.0;
        let (cx, _) = dets[0].bbox.center();
        assert!((cx - truth).abs() <= 10.0, "cx = {cx}, truth = {truth}");
    }

    #[test]
    fn kernel_reuses_cached_correlations() {
        let d = det(125.0, 125.0, 30.0, 30.0, 0);
        let w = ObservationWindow::new(vec![(FrameIndex(3), vec![d]), (FrameIndex(4), vec![d])])
            .unwrap();
        let mut m = kernel_model();
        let mut cb = CorrBuffer::new(true);
        let first = m.infer(&w, &fi(&[5]), &mut cb).unwrap();
        assert_eq!(first.corrs_computed, 1);
        let again = m.infer(&w, &fi(&[5, 6]), &mut cb).unwrap();
        assert_eq!(again.corrs_computed, 0);
        assert_eq!(cb.max_pair_compute_count(), 1);
    }

    #[test]
    fn oracle_emits_ground_truth() {
        let s = linear_scenario(10.0);
        let mut m = OracleDetector::new(costs(), s.clone());
        let w = ObservationWindow::new(vec![(FrameIndex(5), vec![])]).unwrap();
        let mut cb = CorrBuffer::new(true);
        let out = m.infer(&w, &fi(&[6, 7]), &mut cb).unwrap();
        for (j, dets) in &out.predictions {
            let gt = ground_truth_at(&s, *j).unwrap();
            assert_eq!(dets.len(), gt.len());
            assert_eq!(dets[0].bbox, gt[0].2);
        }
    }

    #[test]
    fn every_model_tags_one_payload_per_future_index() {
        let s = linear_scenario(5.0);
        let d = det(300.0, 400.0, 60.0, 60.0, 0);
        let w = ObservationWindow::new(vec![(FrameIndex(4), vec![d]), (FrameIndex(5), vec![d])])
            .unwrap();
        let future = fi(&[6, 8, 9]);
        let mut models: Vec<Box<dyn DetectorModel>> = vec![
            Box::new(IdentityDetector::new(costs())),
            Box::new(CvForecaster::new(costs())),
            Box::new(kernel_model()),
            Box::new(OracleDetector::new(costs(), s)),
        ];
        for m in models.iter_mut() {
            let mut cb = CorrBuffer::new(true);
            let out = m.infer(&w, &future, &mut cb).unwrap();
            let tags: Vec<FrameIndex> = out.predictions.iter().map(|(j, _)| *j).collect();
            assert_eq!(tags, future, "model {}", m.name());
        }
    }
}
