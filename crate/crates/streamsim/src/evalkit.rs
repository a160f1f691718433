//! Evaluation engine: streaming pairing of ground-truth frames with the most
//! recent dispatched prediction, COCO-style average precision with IoU and
//! size breakdowns, the streaming-AP report, the delay-sweep summary, and the
//! offline offset metric that scores predictions from frame `i` against
//! ground truth at `i + d`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forecaster::{DetectorModel, ObservationWindow};
use crate::scene::{ground_truth_at, observe, ObservationNoise, Scenario};
use crate::scheduler::CorrBuffer;
use crate::simrt::{Record, RunLog};
use crate::types::{
    input_timestamp, iou, size_class, BBox, Detection, FrameIndex, FramePrediction, SizeClass,
    SizeThresholds,
};

const EPS: f64 = 1e-9;

/// A ground-truth frame and the dispatched prediction scored against it
/// (the one with the largest output time not after the frame's emission).
#[derive(Debug, Clone, PartialEq)]
pub struct PairedFrame {
    pub gt_index: FrameIndex,
    pub prediction: Option<FramePrediction>,
}

/// Metric parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
    pub recall_points: usize,
    pub size_thresholds: SizeThresholds,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_thresholds: (0..10).map(|n| 0.5 + 0.05 * n as f64).collect(),
            recall_points: 101,
            size_thresholds: SizeThresholds::default(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = !self.iou_thresholds.is_empty()
            && self
                .iou_thresholds
                .windows(2)
                .all(|w| w[0] < w[1])
            && self.iou_thresholds.iter().all(|t| (0.0..=1.0).contains(t) && *t > 0.0)
            && self.recall_points >= 2;
        if !ok {
            return Err(Error::InvalidConfiguration(
                "iou thresholds must be strictly increasing in (0,1] and recall_points >= 2".into(),
            ));
        }
        Ok(())
    }
}

/// Scores and coverage statistics of one evaluated run. AP values are
/// percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub delay_factor: f64,
    pub s_ap: f64,
    pub s_ap50: f64,
    pub s_ap75: f64,
    pub s_ap_small: f64,
    pub s_ap_medium: f64,
    pub s_ap_large: f64,
    /// (iou threshold, AP percent)
    pub per_threshold: Vec<(f64, f64)>,
    pub frames_total: u32,
    /// frames before the first dispatched output, excluded from scoring
    pub frames_warmup: u32,
    /// scored frames that had no prediction to pair with (all-miss)
    pub frames_unmatched: u32,
    /// predictions paired with two or more consecutive frames
    pub predictions_reused: u32,
}

/// Pair every ground-truth frame with the dispatched prediction having the
/// largest output time `<= t_j`, or none when no output exists yet.
pub fn pair_predictions(log: &RunLog, length: u32, k: f64) -> Result<Vec<PairedFrame>> {
    if !(k > 0.0) || length == 0 {
        return Err(Error::InvalidInput("length and frame rate must be positive".into()));
    }
    let mut dispatched = log.dispatched();
    dispatched.sort_by(|a, b| a.output_at.secs().partial_cmp(&b.output_at.secs()).unwrap());
    let mut out = Vec::with_capacity(length as usize);
    let mut cursor = 0usize; // dispatched outputs are visited in time order
    let mut current: Option<&FramePrediction> = None;
    for j in 0..length {
        let tj = input_timestamp(FrameIndex(j), k)?.secs();
        while cursor < dispatched.len() && dispatched[cursor].output_at.secs() <= tj + EPS {
            current = Some(&dispatched[cursor]);
            cursor += 1;
        }
        out.push(PairedFrame { gt_index: FrameIndex(j), prediction: current.cloned() });
    }
    Ok(out)
}

/// One detection's contribution to a PR curve: confidence and whether it
/// matched a ground-truth box.
pub type ScoredDetection = (f64, bool);

/// Greedy confidence-descending matching at one IoU threshold. Each ground
/// truth matches at most once; a match needs the same class and IoU >= the
/// threshold. Returns the scored detections and the ground-truth count.
pub fn match_detections(
    preds: &[Detection],
    gts: &[(u32, BBox)],
    iou_t: f64,
) -> Result<(Vec<ScoredDetection>, usize)> {
    if !(0.0 < iou_t && iou_t < 1.0) {
        return Err(Error::InvalidInput(format!("iou threshold must be in (0,1), got {iou_t}")));
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    // stable sort: confidence ties break by detection order
    order.sort_by(|&a, &b| preds[b].confidence.partial_cmp(&preds[a].confidence).unwrap());
    let mut gt_used = vec![false; gts.len()];
    let mut scored = Vec::with_capacity(preds.len());
    for &n in &order {
        let p = &preds[n];
        let mut best: Option<(f64, usize)> = None;
        for (g, (class, bbox)) in gts.iter().enumerate() {
            if gt_used[g] || *class != p.class_id {
                continue;
            }
            let v = iou(&p.bbox, bbox)?;
            if v >= iou_t && best.map_or(true, |(bv, _)| v > bv) {
                best = Some((v, g));
            }
        }
        match best {
            Some((_, g)) => {
                gt_used[g] = true;
                scored.push((p.confidence, true));
            }
            None => scored.push((p.confidence, false)),
        }
    }
    Ok((scored, gts.len()))
}

/// Interpolated average precision over evenly spaced recall levels from a
/// pool of scored detections. `None` when there is no ground truth (the
/// class/threshold cell is excluded from means).
pub fn average_precision(
    scored: &[ScoredDetection],
    num_gt: usize,
    recall_points: usize,
) -> Option<f64> {
    if num_gt == 0 {
        return None;
    }
    let mut ranked: Vec<ScoredDetection> = scored.to_vec();
    ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    // precision/recall after each prefix
    let mut curve = Vec::with_capacity(ranked.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for (_, is_tp) in &ranked {
        if *is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        curve.push((tp as f64 / num_gt as f64, tp as f64 / (tp + fp) as f64));
    }
    // precision envelope: best precision achievable at recall >= r
    let mut env = curve.clone();
    for n in (0..env.len().saturating_sub(1)).rev() {
        env[n].1 = env[n].1.max(env[n + 1].1);
    }
    let mut sum = 0.0;
    for p in 0..recall_points {
        let r = p as f64 / (recall_points - 1) as f64;
        let prec = env
            .iter()
            .find(|(rec, _)| *rec >= r - EPS)
            .map(|(_, p)| *p)
            .unwrap_or(0.0);
        sum += prec;
    }
    Some(sum / recall_points as f64)
}

/// One frame's scoring input: predictions against class-labelled GT boxes.
struct FrameCase {
    preds: Vec<Detection>,
    gts: Vec<(u32, BBox)>,
}

/// Mean AP over thresholds for a set of frame cases, pooling detections per
/// class across frames (percent). `None` if no class had any ground truth.
fn pooled_ap(cases: &[FrameCase], thresholds: &[f64], recall_points: usize) -> Result<Option<f64>> {
    let mut classes: Vec<u32> = cases
        .iter()
        .flat_map(|c| c.gts.iter().map(|(cl, _)| *cl))
        .collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.is_empty() {
        return Ok(None);
    }
    let mut per_threshold = Vec::with_capacity(thresholds.len());
    for &t in thresholds {
        let mut aps = Vec::with_capacity(classes.len());
        for &class in &classes {
            let mut scored = Vec::new();
            let mut gt_count = 0usize;
            for case in cases {
                let preds: Vec<Detection> =
                    case.preds.iter().copied().filter(|p| p.class_id == class).collect();
                let gts: Vec<(u32, BBox)> =
                    case.gts.iter().copied().filter(|(cl, _)| *cl == class).collect();
                let (s, n) = match_detections(&preds, &gts, t)?;
                scored.extend(s);
                gt_count += n;
            }
            if let Some(ap) = average_precision(&scored, gt_count, recall_points) {
                aps.push(ap);
            }
        }
        let ap_t = if aps.is_empty() { 0.0 } else { aps.iter().sum::<f64>() / aps.len() as f64 };
        per_threshold.push(ap_t);
    }
    Ok(Some(100.0 * per_threshold.iter().sum::<f64>() / per_threshold.len() as f64))
}

fn per_threshold_table(
    cases: &[FrameCase],
    thresholds: &[f64],
    recall_points: usize,
) -> Result<Vec<(f64, f64)>> {
    let mut out = Vec::with_capacity(thresholds.len());
    for &t in thresholds {
        let v = pooled_ap(cases, &[t], recall_points)?.unwrap_or(0.0);
        out.push((t, v));
    }
    Ok(out)
}

/// Restrict a frame case to one size class (both GT and predictions).
fn size_filtered(case: &FrameCase, th: &SizeThresholds, class: SizeClass) -> FrameCase {
    FrameCase {
        preds: case
            .preds
            .iter()
            .copied()
            .filter(|p| size_class(&p.bbox, th) == class)
            .collect(),
        gts: case
            .gts
            .iter()
            .copied()
            .filter(|(_, b)| size_class(b, th) == class)
            .collect(),
    }
}

/// Evaluate a run log against its scenario: streaming pairing followed by
/// COCO-style AP with IoU and size breakdowns.
///
/// Frames emitted before the first dispatched output are warm-up and excluded
/// from scoring (counted in the report); later frames without a pairing score
/// as all-miss.
pub fn streaming_ap(log: &RunLog, scenario: &Scenario, cfg: &EvalConfig) -> Result<MetricsReport> {
    cfg.validate()?;
    let (mut method, mut delay_factor) = (String::from("unknown"), 1.0);
    if let Some(Record::Header { detector, length, frame_rate, delay_factor: df, .. }) = log.header()
    {
        if *length != scenario.length || (*frame_rate - scenario.frame_rate).abs() > EPS {
            return Err(Error::InvalidInput(format!(
                "log was produced for length {length} at {frame_rate} FPS, scenario has {} at {}",
                scenario.length, scenario.frame_rate
            )));
        }
        method = detector.clone();
        delay_factor = *df;
    }
    let paired = pair_predictions(log, scenario.length, scenario.frame_rate)?;
    let first_scored = paired.iter().position(|p| p.prediction.is_some());

    let mut cases = Vec::new();
    let mut frames_warmup = 0u32;
    let mut frames_unmatched = 0u32;
    // identity of the underlying submitted prediction: the same stored
    // prediction can be emitted at several instants
    let mut reuse: std::collections::HashMap<(u64, u32), u32> = std::collections::HashMap::new();
    for (n, pf) in paired.iter().enumerate() {
        if first_scored.map_or(true, |f| n < f) {
            frames_warmup += 1;
            continue;
        }
        let gts: Vec<(u32, BBox)> = ground_truth_at(scenario, pf.gt_index)?
            .into_iter()
            .map(|(_, class, bbox)| (class, bbox))
            .collect();
        let preds = match &pf.prediction {
            Some(p) => {
                *reuse
                    .entry((p.created_at.secs().to_bits(), p.target_index.get()))
                    .or_insert(0) += 1;
                p.detections.clone()
            }
            None => {
                frames_unmatched += 1;
                Vec::new()
            }
        };
        cases.push(FrameCase { preds, gts });
    }

    let overall = pooled_ap(&cases, &cfg.iou_thresholds, cfg.recall_points)?.unwrap_or(0.0);
    let ap_at = |t: f64| -> Result<f64> {
        Ok(pooled_ap(&cases, &[t], cfg.recall_points)?.unwrap_or(0.0))
    };
    let by_size = |sc: SizeClass| -> Result<f64> {
        let filtered: Vec<FrameCase> = cases
            .iter()
            .map(|c| size_filtered(c, &cfg.size_thresholds, sc))
            .collect();
        Ok(pooled_ap(&filtered, &cfg.iou_thresholds, cfg.recall_points)?.unwrap_or(0.0))
    };

    Ok(MetricsReport {
        method,
        delay_factor,
        s_ap: overall,
        s_ap50: ap_at(0.50)?,
        s_ap75: ap_at(0.75)?,
        s_ap_small: by_size(SizeClass::Small)?,
        s_ap_medium: by_size(SizeClass::Medium)?,
        s_ap_large: by_size(SizeClass::Large)?,
        per_threshold: per_threshold_table(&cases, &cfg.iou_thresholds, cfg.recall_points)?,
        frames_total: scenario.length,
        frames_warmup,
        frames_unmatched,
        predictions_reused: reuse.values().filter(|&&c| c >= 2).count() as u32,
    })
}

/// Predictions made offline from each frame `i` for target `i + d`, with a
/// full observation window of `window` past frames.
pub fn offline_offset_predictions(
    scenario: &Scenario,
    model: &mut dyn DetectorModel,
    noise: &ObservationNoise,
    window: usize,
    d: u32,
    seed: u64,
) -> Result<Vec<(FrameIndex, Vec<Detection>)>> {
    if d == 0 {
        return Err(Error::InvalidInput("offset d must be >= 1".into()));
    }
    if window == 0 {
        return Err(Error::InvalidInput("window must be >= 1".into()));
    }
    if d >= scenario.length {
        return Err(Error::InvalidInput(format!(
            "offset {d} beyond sequence length {}",
            scenario.length
        )));
    }
    let mut corrs = CorrBuffer::new(true);
    let mut out = Vec::new();
    for i in (window as u32 - 1)..(scenario.length - d) {
        let entries = ((i + 1 - window as u32)..=i)
            .map(|j| Ok((FrameIndex(j), observe(scenario, FrameIndex(j), noise, seed)?)))
            .collect::<Result<Vec<_>>>()?;
        let w = ObservationWindow::new(entries)?;
        let inf = model.infer(&w, &[FrameIndex(i + d)], &mut corrs)?;
        let dets = inf
            .predictions
            .into_iter()
            .next()
            .map(|(_, dets)| dets)
            .unwrap_or_default();
        out.push((FrameIndex(i), dets));
    }
    Ok(out)
}

/// Offline offset metric: the prediction made from frame `i` scored against
/// ground truth at `i + d` over all valid `i` (percent). No delay machinery.
pub fn map_offset(
    preds: &[(FrameIndex, Vec<Detection>)],
    scenario: &Scenario,
    d: u32,
    cfg: &EvalConfig,
) -> Result<f64> {
    cfg.validate()?;
    if d == 0 {
        return Err(Error::InvalidInput("offset d must be >= 1".into()));
    }
    if d >= scenario.length {
        return Err(Error::InvalidInput(format!(
            "offset {d} beyond sequence length {}",
            scenario.length
        )));
    }
    let mut cases = Vec::new();
    for (i, dets) in preds {
        let target = FrameIndex(i.get() + d);
        if target.get() >= scenario.length {
            continue;
        }
        let gts: Vec<(u32, BBox)> = ground_truth_at(scenario, target)?
            .into_iter()
            .map(|(_, class, bbox)| (class, bbox))
            .collect();
        cases.push(FrameCase { preds: dets.clone(), gts });
    }
    Ok(pooled_ap(&cases, &cfg.iou_thresholds, cfg.recall_points)?.unwrap_or(0.0))
}

/// One metrics report per delay factor; all logs must come from the given
/// scenario.
pub fn summarize_sweep(
    logs: &[(f64, u64, RunLog)],
    scenario: &Scenario,
    cfg: &EvalConfig,
) -> Result<Vec<(f64, MetricsReport)>> {
    let mut out = Vec::with_capacity(logs.len());
    for (d, _, log) in logs {
        let report = streaming_ap(log, scenario, cfg)?;
        out.push((*d, report));
    }
    Ok(out)
}
