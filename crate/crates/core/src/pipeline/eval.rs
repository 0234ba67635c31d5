use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::model::{stack_rows, LocModel};
use super::{make_tuples, render_frames};
use crate::error::{Error, Result};
use crate::geometry::{wrap, Pose2};
use crate::seed;
use crate::synthworld::Dataset;

pub const PER_FRAME_HEADER: &str = "frame_id,x,y,yaw,pred_x,pred_y,pred_yaw,e_t,e_y,success";

/// A frame succeeds when both errors are strictly below these bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuccessThresholds {
    pub trans_m: f64,
    pub yaw_deg: f64,
}

impl Default for SuccessThresholds {
    fn default() -> Self {
        SuccessThresholds {
            trans_m: 2.0,
            yaw_deg: 5.0,
        }
    }
}

impl SuccessThresholds {
    pub fn success(&self, e_t: f64, e_y: f64) -> bool {
        e_t < self.trans_m && e_y < self.yaw_deg
    }
}

/// Absolute wrapped yaw difference in degrees, in `[0, 180]`.
pub fn yaw_error_deg(pred: f64, truth: f64) -> f64 {
    wrap(pred - truth).abs().to_degrees()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameResult {
    pub frame_id: u64,
    pub truth: Pose2,
    pub pred: Pose2,
    pub e_t: f64,
    pub e_y: f64,
    pub success: bool,
}

impl FrameResult {
    pub fn new(frame_id: u64, truth: Pose2, pred: Pose2, thr: &SuccessThresholds) -> Self {
        let e_t = truth.translation_distance(&pred);
        let e_y = yaw_error_deg(pred.yaw(), truth.yaw());
        FrameResult {
            frame_id,
            truth,
            pred,
            e_t,
            e_y,
            success: thr.success(e_t, e_y),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub frame_count: usize,
    /// Mean position error, meters.
    pub e_t: f64,
    /// Mean absolute yaw error, degrees.
    pub e_y: f64,
    /// Success rate, percent.
    pub sr: f64,
    pub median_e_t: f64,
    pub median_e_y: f64,
    /// Localized tuples per second of wall-clock inference.
    pub hz: f64,
    pub steps: usize,
    pub thresholds: SuccessThresholds,
    #[serde(skip)]
    pub frames: Vec<FrameResult>,
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Aggregates per-frame results into a report.
pub fn summarize(frames: Vec<FrameResult>, thresholds: SuccessThresholds, hz: f64, steps: usize) -> EvalReport {
    let n = frames.len();
    let mean = |f: fn(&FrameResult) -> f64| {
        if n == 0 {
            f64::NAN
        } else {
            frames.iter().map(f).sum::<f64>() / n as f64
        }
    };
    let succ = frames.iter().filter(|f| f.success).count();
    EvalReport {
        frame_count: n,
        e_t: mean(|f| f.e_t),
        e_y: mean(|f| f.e_y),
        sr: if n == 0 { 0.0 } else { 100.0 * succ as f64 / n as f64 },
        median_e_t: median(frames.iter().map(|f| f.e_t).collect()),
        median_e_y: median(frames.iter().map(|f| f.e_y).collect()),
        hz,
        steps,
        thresholds,
        frames,
    }
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        s.push_str(PER_FRAME_HEADER);
        s.push('\n');
        for f in &self.frames {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                f.frame_id,
                f.truth.x(),
                f.truth.y(),
                f.truth.yaw(),
                f.pred.x(),
                f.pred.y(),
                f.pred.yaw(),
                f.e_t,
                f.e_y,
                u8::from(f.success)
            );
        }
        s
    }

    /// Reads the rows written by [`to_csv`](Self::to_csv).
    pub fn parse_csv(text: &str) -> Result<Vec<FrameResult>> {
        let bad = |line: usize, m: String| Error::format("per_frame.csv", format!("line {line}: {m}"));
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim_end_matches('\r') == PER_FRAME_HEADER => {}
            _ => return Err(bad(1, format!("expected header {PER_FRAME_HEADER:?}"))),
        }
        let mut out = Vec::new();
        for (i, line) in lines.enumerate() {
            let n = i + 2;
            let line = line.trim_end_matches('\r');
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 10 {
                return Err(bad(n, format!("expected 10 fields, got {}", f.len())));
            }
            let frame_id = f[0].parse().map_err(|_| bad(n, format!("bad frame_id {:?}", f[0])))?;
            let mut v = [0.0; 8];
            for (k, s) in f[1..9].iter().enumerate() {
                v[k] = s
                    .parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| bad(n, format!("bad number {s:?}")))?;
            }
            let success = match f[9] {
                "1" => true,
                "0" => false,
                s => return Err(bad(n, format!("success must be 0 or 1, got {s:?}"))),
            };
            let pose = |x, y, yaw| Pose2::try_new(x, y, yaw).map_err(|e| bad(n, e.to_string()));
            out.push(FrameResult {
                frame_id,
                truth: pose(v[0], v[1], v[2])?,
                pred: pose(v[3], v[4], v[5])?,
                e_t: v[6],
                e_y: v[7],
                success,
            });
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub steps: usize,
    pub seed: u64,
    pub tuple_spacing: usize,
    pub thresholds: SuccessThresholds,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            steps: 10,
            seed: 0,
            tuple_spacing: 2,
            thresholds: SuccessThresholds::default(),
        }
    }
}

/// Localizes the last frame of every tuple in `ds`.
///
/// Each frame's descriptor is computed once, as an online system would on
/// arrival; the reported rate covers descriptor and sampling time.
pub fn evaluate(model: &LocModel, ds: &Dataset, opts: &EvalOptions) -> Result<EvalReport> {
    let n = model.config().denoiser.sequence_len;
    let tuples = make_tuples(ds.frames.len(), n, opts.tuple_spacing)?;
    let images = render_frames(&ds.frames, &model.config().bev)?;
    let start = Instant::now();
    let descriptors = images
        .iter()
        .map(|img| model.descriptor(img))
        .collect::<Result<Vec<_>>>()?;
    let mut results = Vec::with_capacity(tuples.len());
    for t in &tuples {
        let rows: Vec<_> = t.indices.iter().map(|&i| descriptors[i].clone()).collect();
        let anchor = &ds.frames[t.anchor()];
        let poses = model.sample(
            &stack_rows(&rows),
            opts.steps,
            seed::derive(opts.seed, &[anchor.frame_id]),
        )?;
        let pred = *poses.last().expect("non-empty tuple");
        results.push(FrameResult::new(anchor.frame_id, anchor.pose, pred, &opts.thresholds));
    }
    let secs = start.elapsed().as_secs_f64().max(1e-9);
    Ok(summarize(
        results,
        opts.thresholds,
        tuples.len() as f64 / secs,
        opts.steps,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn one(truth: Pose2, pred: Pose2) -> EvalReport {
        let thr = SuccessThresholds::default();
        summarize(vec![FrameResult::new(0, truth, pred, &thr)], thr, 0.0, 10)
    }

    #[test]
    fn perfect_predictions() {
        let thr = SuccessThresholds::default();
        let frames: Vec<FrameResult> = (0..5)
            .map(|i| {
                let p = Pose2::new(i as f64, -2.0, 0.1 * i as f64);
                FrameResult::new(i, p, p, &thr)
            })
            .collect();
        let r = summarize(frames, thr, 1.0, 10);
        assert_eq!((r.e_t, r.e_y, r.sr), (0.0, 0.0, 100.0));
    }

    #[test]
    fn three_four_five() {
        let r = one(Pose2::new(1.0, 1.0, 0.0), Pose2::new(4.0, 5.0, 0.0));
        assert!((r.e_t - 5.0).abs() < 1e-12);
        assert_eq!(r.sr, 0.0);
    }

    #[test]
    fn yaw_wraps() {
        let r = one(
            Pose2::new(0.0, 0.0, 179f64.to_radians()),
            Pose2::new(0.0, 0.0, -179f64.to_radians()),
        );
        assert!((r.e_y - 2.0).abs() < 1e-9);
        for theta in [-3.0, -1.0, 0.0, 0.5, 3.1] {
            assert!(yaw_error_deg(theta + 2.0 * PI, theta) < 1e-9);
        }
    }

    #[test]
    fn success_is_strict() {
        let thr = SuccessThresholds::default();
        assert!(!thr.success(2.0, 0.0));
        assert!(!thr.success(0.0, 5.0));
        assert!(thr.success(1.999, 4.999));
        let r = one(Pose2::new(0.0, 0.0, 0.0), Pose2::new(2.0, 0.0, 0.0));
        assert_eq!(r.sr, 0.0);
    }

    #[test]
    fn loosening_never_lowers_sr() {
        let base = SuccessThresholds::default();
        let errs = [(0.5, 1.0), (2.5, 1.0), (1.0, 7.0), (1.9, 4.9), (10.0, 40.0)];
        let sr = |thr: SuccessThresholds| errs.iter().filter(|(t, y)| thr.success(*t, *y)).count();
        let mut last = sr(base);
        for k in 1..10 {
            let thr = SuccessThresholds {
                trans_m: base.trans_m * (1.0 + 0.5 * k as f64),
                yaw_deg: base.yaw_deg * (1.0 + 0.5 * k as f64),
            };
            assert!(sr(thr) >= last);
            last = sr(thr);
        }
    }

    #[test]
    fn medians_and_csv_round_trip() {
        let thr = SuccessThresholds::default();
        let frames: Vec<FrameResult> = [1.0, 3.0, 2.0, 10.0]
            .iter()
            .enumerate()
            .map(|(i, d)| FrameResult::new(i as u64, Pose2::new(0.0, 0.0, 0.0), Pose2::new(*d, 0.0, 0.2), &thr))
            .collect();
        let r = summarize(frames, thr, 0.0, 10);
        assert!((r.median_e_t - 2.5).abs() < 1e-12);
        let back = EvalReport::parse_csv(&r.to_csv()).unwrap();
        assert_eq!(back.len(), 4);
        for (a, b) in back.iter().zip(&r.frames) {
            assert_eq!(a.success, b.success);
            assert_eq!(a.e_t, b.e_t);
            assert_eq!(a.pred.yaw(), b.pred.yaw());
        }
        assert!(EvalReport::parse_csv("nope\n").is_err());
        assert!(EvalReport::parse_csv(&format!("{PER_FRAME_HEADER}\n1,2,3\n")).is_err());
        let json: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(json["frame_count"], 4);
    }
}
