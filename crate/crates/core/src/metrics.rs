//! Frame-level AUC-ROC and equal error rate.
//!
//! Label files are comma-separated with a header:
//!
//! ```text
//! video_id,frame_index,label
//! cam01,0,0
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scoring::FrameScoreSeries;

pub const LABEL_HEADER: &str = "video_id,frame_index,label";

/// Ground truth per (video, frame): 0 normal, 1 anomalous.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledFrames {
    pub labels: BTreeMap<(String, u64), u8>,
}

impl LabeledFrames {
    pub fn new() -> Self {
        Self::default()
    }

    /// Sets a label; an anomalous label is never downgraded to normal.
    pub fn mark(&mut self, video_id: &str, frame_index: u64, label: u8) {
        let e = self.labels.entry((video_id.to_string(), frame_index)).or_insert(0);
        *e = (*e).max(label);
    }

    pub fn get(&self, video_id: &str, frame_index: u64) -> Option<u8> {
        self.labels.get(&(video_id.to_string(), frame_index)).copied()
    }

    pub fn merge(&mut self, other: &LabeledFrames) {
        for ((v, f), &l) in &other.labels {
            self.mark(v, *f, l);
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn anomalous(&self) -> usize {
        self.labels.values().filter(|&&l| l == 1).count()
    }

    pub fn format(&self) -> String {
        let mut out = format!("{LABEL_HEADER}\n");
        for ((v, f), l) in &self.labels {
            writeln!(out, "{v},{f},{l}").unwrap();
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut out = LabeledFrames::new();
        let mut header_seen = false;
        for (i, line) in text.lines().enumerate() {
            let n = i + 1;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let f = crate::io::fields(line);
            if !header_seen {
                if f.join(",") != LABEL_HEADER {
                    return Err(Error::parse(n, format!("expected header `{LABEL_HEADER}`")));
                }
                header_seen = true;
                continue;
            }
            if f.len() != 3 {
                return Err(Error::parse(n, format!("expected 3 fields, found {}", f.len())));
            }
            let frame: u64 = f[1].parse().map_err(|_| Error::parse(n, format!("bad frame index `{}`", f[1])))?;
            let label = match f[2] {
                "0" => 0,
                "1" => 1,
                other => return Err(Error::parse(n, format!("label must be 0 or 1, got `{other}`"))),
            };
            if out.labels.insert((f[0].to_string(), frame), label).is_some() {
                return Err(Error::parse(n, format!("duplicate label for {}@{frame}", f[0])));
            }
        }
        if out.is_empty() {
            return Err(Error::EmptyInput("label file has no records".into()));
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&crate::io::read_to_string(path)?)
    }
}

/// Pairs every scored frame with its label.
pub fn align(scores: &FrameScoreSeries, labels: &LabeledFrames) -> Result<(Vec<f64>, Vec<u8>)> {
    let mut s = Vec::with_capacity(scores.entries.len());
    let mut l = Vec::with_capacity(scores.entries.len());
    for e in &scores.entries {
        let label = labels
            .get(&e.video_id, e.frame_index)
            .ok_or_else(|| Error::Argument(format!("no label for scored frame {}@{}", e.video_id, e.frame_index)))?;
        s.push(e.score);
        l.push(label);
    }
    Ok((s, l))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Frames scoring at least this value are flagged; the first point uses +inf.
    pub threshold: f64,
}

fn class_counts(labels: &[u8]) -> Result<(usize, usize)> {
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::MetricUndefined(format!(
            "need both classes, got {neg} normal and {pos} anomalous frames"
        )));
    }
    Ok((neg, pos))
}

/// ROC from (0,0) to (1,1), one point per distinct score in descending order.
pub fn roc_curve(scores: &[f64], labels: &[u8]) -> Result<Vec<RocPoint>> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Argument("scores must be finite".into()));
    }
    let (neg, pos) = class_counts(labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
            threshold: t,
        });
    }
    Ok(points)
}

/// Trapezoidal area under a curve from [`roc_curve`].
pub fn auc_from_curve(points: &[RocPoint]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) * 0.5)
        .sum()
}

pub fn auc_scores(scores: &[f64], labels: &[u8]) -> Result<f64> {
    Ok(auc_from_curve(&roc_curve(scores, labels)?))
}

/// Crossing of FPR and FNR along a curve, interpolated linearly between
/// adjacent points. Returns `(eer, threshold)`.
pub fn eer_from_curve(points: &[RocPoint]) -> (f64, f64) {
    for w in points.windows(2) {
        let (a, b) = (w[0], w[1]);
        let da = a.fpr - (1.0 - a.tpr);
        let db = b.fpr - (1.0 - b.tpr);
        if da == 0.0 {
            return (a.fpr, a.threshold);
        }
        if da < 0.0 && db >= 0.0 {
            let lambda = -da / (db - da);
            let eer = a.fpr + lambda * (b.fpr - a.fpr);
            let threshold = if a.threshold.is_finite() {
                a.threshold + lambda * (b.threshold - a.threshold)
            } else {
                b.threshold
            };
            return (eer, threshold);
        }
    }
    // the last point is (1, 1) where fpr - fnr = 1, so a crossing exists
    let last = points.last().expect("curve has endpoints");
    (last.fpr, last.threshold)
}

pub fn eer_scores(scores: &[f64], labels: &[u8]) -> Result<(f64, f64)> {
    Ok(eer_from_curve(&roc_curve(scores, labels)?))
}

pub fn auc_roc(scores: &FrameScoreSeries, labels: &LabeledFrames) -> Result<f64> {
    let (s, l) = align(scores, labels)?;
    auc_scores(&s, &l)
}

pub fn eer(scores: &FrameScoreSeries, labels: &LabeledFrames) -> Result<(f64, f64)> {
    let (s, l) = align(scores, labels)?;
    eer_scores(&s, &l)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auc_roc: f64,
    pub eer: f64,
    pub eer_threshold: f64,
    /// False when the curve crosses FPR = FNR below the diagonal (EER > 0.5).
    pub eer_proper: bool,
    pub n_normal: usize,
    pub n_anomalous: usize,
    pub fingerprint: String,
    pub roc_points: Vec<RocPoint>,
}

pub fn evaluate(scores: &FrameScoreSeries, labels: &LabeledFrames, fingerprint: &str) -> Result<EvalReport> {
    let (s, l) = align(scores, labels)?;
    let curve = roc_curve(&s, &l)?;
    let (neg, pos) = class_counts(&l)?;
    let (eer, eer_threshold) = eer_from_curve(&curve);
    Ok(EvalReport {
        auc_roc: auc_from_curve(&curve),
        eer,
        eer_threshold,
        eer_proper: eer <= 0.5,
        n_normal: neg,
        n_anomalous: pos,
        fingerprint: fingerprint.to_string(),
        roc_points: curve,
    })
}

// serde_json writes +inf as null, so the first ROC threshold travels as a string.
mod threshold_text {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn to_text(v: f64) -> String {
        if v.is_infinite() {
            if v > 0.0 { "inf" } else { "-inf" }.to_string()
        } else {
            format!("{v:?}")
        }
    }

    #[derive(Serialize, Deserialize)]
    pub struct Point {
        pub fpr: f64,
        pub tpr: f64,
        pub threshold: String,
    }

    pub fn serialize_points<S: Serializer>(pts: &[super::RocPoint], s: S) -> Result<S::Ok, S::Error> {
        pts.iter()
            .map(|p| Point {
                fpr: p.fpr,
                tpr: p.tpr,
                threshold: to_text(p.threshold),
            })
            .collect::<Vec<_>>()
            .serialize(s)
    }

    pub fn deserialize_points<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<super::RocPoint>, D::Error> {
        Vec::<Point>::deserialize(d)?
            .into_iter()
            .map(|p| {
                Ok(super::RocPoint {
                    fpr: p.fpr,
                    tpr: p.tpr,
                    threshold: p.threshold.parse().map_err(serde::de::Error::custom)?,
                })
            })
            .collect()
    }
}

#[derive(Serialize, Deserialize)]
struct ReportDoc {
    auc_roc: f64,
    eer: f64,
    eer_threshold: f64,
    eer_proper: bool,
    n_normal: usize,
    n_anomalous: usize,
    fingerprint: String,
    #[serde(
        serialize_with = "threshold_text::serialize_points",
        deserialize_with = "threshold_text::deserialize_points"
    )]
    roc_points: Vec<RocPoint>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        let doc = ReportDoc {
            auc_roc: self.auc_roc,
            eer: self.eer,
            eer_threshold: self.eer_threshold,
            eer_proper: self.eer_proper,
            n_normal: self.n_normal,
            n_anomalous: self.n_anomalous,
            fingerprint: self.fingerprint.clone(),
            roc_points: self.roc_points.clone(),
        };
        serde_json::to_string_pretty(&doc).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let d: ReportDoc = serde_json::from_str(text).map_err(|e| Error::Argument(format!("bad report: {e}")))?;
        Ok(EvalReport {
            auc_roc: d.auc_roc,
            eer: d.eer,
            eer_threshold: d.eer_threshold,
            eer_proper: d.eer_proper,
            n_normal: d.n_normal,
            n_anomalous: d.n_anomalous,
            fingerprint: d.fingerprint,
            roc_points: d.roc_points,
        })
    }

    /// `fpr,tpr,threshold` table for plotting.
    pub fn roc_csv(&self) -> String {
        let mut out = String::from("fpr,tpr,threshold\n");
        for p in &self.roc_points {
            writeln!(out, "{:?},{:?},{}", p.fpr, p.tpr, threshold_text::to_text(p.threshold)).unwrap();
        }
        out
    }
}
