//! Per-person window scores, normalization, fusion and frame aggregation.
//!
//! Score-series files are comma-separated with a header:
//!
//! ```text
//! video_id,frame_index,person_id,kind,score
//! cam01,12,0,cs,0.0031
//! cam01,12,-,hs,0.41
//! ```
//!
//! `person_id` is `-` for frame-level series.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{encode_in_chunks, mse_loss, Mode, UetdWeights};
use crate::pose_io::{extract_windows, PoseTrack, PoseWindow};
use crate::tensor::Mat;
use crate::tokenizer::{tokenize, TokenizationScheme};
use crate::Branch;

pub const SCORE_HEADER: &str = "video_id,frame_index,person_id,kind,score";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreKind {
    Cs,
    Fs,
    Hs,
}

impl ScoreKind {
    pub fn name(self) -> &'static str {
        match self {
            ScoreKind::Cs => "cs",
            ScoreKind::Fs => "fs",
            ScoreKind::Hs => "hs",
        }
    }
}

impl std::fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ScoreKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cs" => Ok(ScoreKind::Cs),
            "fs" => Ok(ScoreKind::Fs),
            "hs" => Ok(ScoreKind::Hs),
            _ => Err(Error::Argument(format!("unknown score kind `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreEntry {
    pub video_id: String,
    pub person_id: u64,
    pub frame_index: u64,
    pub score: f64,
}

impl ScoreEntry {
    fn key(&self) -> (String, u64, u64) {
        (self.video_id.clone(), self.person_id, self.frame_index)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreSeries {
    pub kind: ScoreKind,
    pub entries: Vec<ScoreEntry>,
}

impl ScoreSeries {
    pub fn new(kind: ScoreKind) -> Self {
        ScoreSeries {
            kind,
            entries: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Orders entries by (video, person, frame).
    pub fn sort(&mut self) {
        self.entries.sort_by(|a, b| {
            (&a.video_id, a.person_id, a.frame_index).cmp(&(&b.video_id, b.person_id, b.frame_index))
        });
    }
}

/// Value given to frames in a video's range that no window scored.
#[derive(Clone, Copy, Debug, PartialEq)]
#[derive(Default)]
pub enum FillPolicy {
    /// Lowest frame score observed across the run.
    #[default]
    MinObserved,
    Constant(f64),
}


impl std::fmt::Display for FillPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FillPolicy::MinObserved => f.write_str("min"),
            FillPolicy::Constant(v) => write!(f, "{v}"),
        }
    }
}

impl std::str::FromStr for FillPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("min") {
            return Ok(FillPolicy::MinObserved);
        }
        match s.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(FillPolicy::Constant(v)),
            _ => Err(Error::Argument(format!("fill policy must be `min` or a number, got `{s}`"))),
        }
    }
}

impl Serialize for FillPolicy {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for FillPolicy {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameScore {
    pub video_id: String,
    pub frame_index: u64,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameScoreSeries {
    pub kind: ScoreKind,
    /// Sorted by (video, frame), one entry per pair.
    pub entries: Vec<FrameScore>,
    pub fill: FillPolicy,
    /// Number of entries that received the fill value.
    pub filled: usize,
}

/// Inclusive frame range covered by a video's tracks.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoRange {
    pub video_id: String,
    pub first: u64,
    pub last: u64,
}

/// Per-video frame span of a track collection.
pub fn video_ranges(tracks: &[PoseTrack]) -> Vec<VideoRange> {
    let mut spans: BTreeMap<&str, (u64, u64)> = BTreeMap::new();
    for t in tracks {
        let (Some(a), Some(b)) = (t.frames.first(), t.frames.last()) else {
            continue;
        };
        let e = spans.entry(&t.video_id).or_insert((a.frame_index, b.frame_index));
        e.0 = e.0.min(a.frame_index);
        e.1 = e.1.max(b.frame_index);
    }
    spans
        .into_iter()
        .map(|(v, (first, last))| VideoRange {
            video_id: v.to_string(),
            first,
            last,
        })
        .collect()
}

fn block(m: &Mat, size: usize, i: usize) -> &[f64] {
    &m.as_slice()[i * size..(i + 1) * size]
}

fn block_mse(generated: &[f64], target: &[f64]) -> f64 {
    let sum: f64 = generated.iter().zip(target).map(|(g, t)| (g - t) * (g - t)).sum();
    sum / target.len() as f64
}

/// CTD reconstruction error of one window, attributed to its center frame.
pub fn ctd_score(window: &PoseWindow, scheme: TokenizationScheme, weights: &UetdWeights) -> Result<(u64, f64)> {
    let seq = tokenize(window, scheme)?;
    let out = weights.generate(&seq, Branch::Ctd)?;
    Ok((window.center_frame(), mse_loss(&out.tokens, &seq.tokens)?))
}

fn check_pair(prev: &PoseWindow, next: &PoseWindow) -> Result<()> {
    let apart = next.start_frame.checked_sub(prev.start_frame);
    if prev.video_id != next.video_id
        || prev.person_id != next.person_id
        || prev.beta != next.beta
        || apart != Some(prev.beta as u64)
    {
        return Err(Error::Pairing(format!(
            "windows {}/{}@{} and {}/{}@{} are not one window length apart",
            prev.video_id, prev.person_id, prev.start_frame, next.video_id, next.person_id, next.start_frame
        )));
    }
    Ok(())
}

/// FTD prediction error of `next` given `prev`, attributed to `next`'s center frame.
pub fn ftd_score(
    prev: &PoseWindow,
    next: &PoseWindow,
    scheme: TokenizationScheme,
    weights: &UetdWeights,
) -> Result<(u64, f64)> {
    check_pair(prev, next)?;
    let p = tokenize(prev, scheme)?;
    let n = tokenize(next, scheme)?;
    let out = weights.generate(&p, Branch::Ftd)?;
    Ok((next.center_frame(), mse_loss(&out.tokens, &n.tokens)?))
}

/// Raw CS and FS series for a set of tracks.
///
/// Every window (at `stride`) is encoded once; its memory feeds the CTD and
/// the FTD, and the FTD output is compared with the window starting `beta`
/// frames later when that window exists.
pub fn score_tracks(
    weights: &UetdWeights,
    scheme: TokenizationScheme,
    tracks: &[PoseTrack],
    beta: usize,
    stride: usize,
) -> Result<(ScoreSeries, ScoreSeries)> {
    let c = weights.config;
    let mut cs = ScoreSeries::new(ScoreKind::Cs);
    let mut fs = ScoreSeries::new(ScoreKind::Fs);
    for track in tracks {
        let windows = extract_windows(track, beta, stride)?;
        if windows.is_empty() {
            continue;
        }
        let mut data = Vec::with_capacity(windows.len() * c.n_tokens * c.token_dim);
        for w in &windows {
            let seq = tokenize(w, scheme)?;
            if seq.tokens.shape() != (c.n_tokens, c.token_dim) {
                return Err(Error::Shape(format!(
                    "tokens {:?} do not fit a model of {}x{}",
                    seq.tokens.shape(),
                    c.n_tokens,
                    c.token_dim
                )));
            }
            data.extend(seq.tokens.into_vec());
        }
        let tokens = Mat::from_vec(windows.len() * c.n_tokens, c.token_dim, data);
        let memory = encode_in_chunks(weights, &tokens, 256)?;
        let recon = weights.decode_batch(&memory, Branch::Ctd, &mut Mode::Eval)?;
        let pred = weights.decode_batch(&memory, Branch::Ftd, &mut Mode::Eval)?;
        let size = c.n_tokens * c.token_dim;
        let by_start: HashMap<u64, usize> = windows.iter().enumerate().map(|(i, w)| (w.start_frame, i)).collect();
        for (i, w) in windows.iter().enumerate() {
            cs.entries.push(ScoreEntry {
                video_id: w.video_id.clone(),
                person_id: w.person_id,
                frame_index: w.center_frame(),
                score: block_mse(block(&recon, size, i), block(&tokens, size, i)),
            });
            if let Some(&j) = w.start_frame.checked_sub(beta as u64).and_then(|s| by_start.get(&s)) {
                fs.entries.push(ScoreEntry {
                    video_id: w.video_id.clone(),
                    person_id: w.person_id,
                    frame_index: w.center_frame(),
                    score: block_mse(block(&pred, size, j), block(&tokens, size, i)),
                });
            }
        }
    }
    for s in [&mut cs, &mut fs] {
        if let Some(e) = s.entries.iter().find(|e| !e.score.is_finite()) {
            return Err(Error::Diverged(format!(
                "non-finite {} score at {}/{}@{}",
                s.kind, e.video_id, e.person_id, e.frame_index
            )));
        }
        s.sort();
    }
    Ok((cs, fs))
}

fn min_max(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

fn rescale(v: f64, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        ((v - lo) / (hi - lo)).clamp(0.0, 1.0)
    } else {
        0.0
    }
}

/// `(s - min) / (max - min)` over the whole series, or within each video
/// when `per_video` is set. A constant range maps to 0.
pub fn min_max_normalize(series: &ScoreSeries, per_video: bool) -> Result<ScoreSeries> {
    if series.is_empty() {
        return Err(Error::Argument(format!("cannot normalize an empty {} series", series.kind)));
    }
    let mut out = series.clone();
    if per_video {
        let mut ranges: HashMap<&str, (f64, f64)> = HashMap::new();
        for e in &series.entries {
            let r = ranges.entry(&e.video_id).or_insert((f64::INFINITY, f64::NEG_INFINITY));
            *r = (r.0.min(e.score), r.1.max(e.score));
        }
        for e in &mut out.entries {
            let (lo, hi) = ranges[e.video_id.as_str()];
            e.score = rescale(e.score, lo, hi);
        }
    } else {
        let (lo, hi) = min_max(series.entries.iter().map(|e| e.score));
        for e in &mut out.entries {
            e.score = rescale(e.score, lo, hi);
        }
    }
    Ok(out)
}

/// Equal-weight fusion of normalized CS and FS on (video, person, frame).
/// Keys present in only one series keep that series' value.
pub fn hybrid_score(cs: &ScoreSeries, fs: &ScoreSeries) -> Result<ScoreSeries> {
    if cs.kind != ScoreKind::Cs || fs.kind != ScoreKind::Fs {
        return Err(Error::Argument(format!("hybrid needs cs and fs series, got {} and {}", cs.kind, fs.kind)));
    }
    let mut joined: BTreeMap<(String, u64, u64), (Option<f64>, Option<f64>)> = BTreeMap::new();
    for e in &cs.entries {
        joined.entry(e.key()).or_default().0 = Some(e.score);
    }
    for e in &fs.entries {
        joined.entry(e.key()).or_default().1 = Some(e.score);
    }
    let entries = joined
        .into_iter()
        .map(|((video_id, person_id, frame_index), pair)| {
            let score = match pair {
                (Some(c), Some(f)) => 0.5 * c + 0.5 * f,
                (Some(v), None) | (None, Some(v)) => v,
                (None, None) => unreachable!("joined keys come from an input entry"),
            };
            ScoreEntry {
                video_id,
                person_id,
                frame_index,
                score,
            }
        })
        .collect();
    Ok(ScoreSeries {
        kind: ScoreKind::Hs,
        entries,
    })
}

/// Max over persons per (video, frame). Frames inside `ranges` that no
/// person scored get the fill value.
pub fn frame_aggregate(series: &ScoreSeries, ranges: &[VideoRange], fill: FillPolicy) -> Result<FrameScoreSeries> {
    let mut best: BTreeMap<(String, u64), f64> = BTreeMap::new();
    for e in &series.entries {
        best.entry((e.video_id.clone(), e.frame_index))
            .and_modify(|s| *s = s.max(e.score))
            .or_insert(e.score);
    }
    let fill_value = match fill {
        FillPolicy::Constant(v) => v,
        FillPolicy::MinObserved => {
            if best.is_empty() {
                return Err(Error::EmptyInput("no scored frames to aggregate".into()));
            }
            best.values().copied().fold(f64::INFINITY, f64::min)
        }
    };
    let mut filled = 0;
    for r in ranges {
        for frame in r.first..=r.last {
            best.entry((r.video_id.clone(), frame)).or_insert_with(|| {
                filled += 1;
                fill_value
            });
        }
    }
    Ok(FrameScoreSeries {
        kind: series.kind,
        entries: best
            .into_iter()
            .map(|((video_id, frame_index), score)| FrameScore {
                video_id,
                frame_index,
                score,
            })
            .collect(),
        fill,
        filled,
    })
}

pub fn format_score_series(series: &ScoreSeries) -> String {
    let mut out = format!("{SCORE_HEADER}\n");
    for e in &series.entries {
        writeln!(out, "{},{},{},{},{}", e.video_id, e.frame_index, e.person_id, series.kind, e.score).unwrap();
    }
    out
}

pub fn format_frame_scores(series: &FrameScoreSeries) -> String {
    let mut out = format!("{SCORE_HEADER}\n");
    for e in &series.entries {
        writeln!(out, "{},{},-,{},{}", e.video_id, e.frame_index, series.kind, e.score).unwrap();
    }
    out
}

struct ScoreRecord<'a> {
    video_id: &'a str,
    frame_index: u64,
    person: Option<u64>,
    kind: ScoreKind,
    score: f64,
}

fn parse_records(text: &str) -> Result<Vec<ScoreRecord<'_>>> {
    let mut out = Vec::new();
    let mut header_seen = false;
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !header_seen {
            let header: Vec<_> = crate::io::fields(line);
            if header.join(",") != SCORE_HEADER {
                return Err(Error::parse(n, format!("expected header `{SCORE_HEADER}`")));
            }
            header_seen = true;
            continue;
        }
        let f = crate::io::fields(line);
        if f.len() != 5 {
            return Err(Error::parse(n, format!("expected 5 fields, found {}", f.len())));
        }
        let frame_index = f[1].parse().map_err(|_| Error::parse(n, format!("bad frame index `{}`", f[1])))?;
        let person = match f[2] {
            "-" => None,
            p => Some(p.parse().map_err(|_| Error::parse(n, format!("bad person id `{p}`")))?),
        };
        let kind = f[3].parse().map_err(|e: Error| Error::parse(n, e.to_string()))?;
        let score: f64 = f[4].parse().map_err(|_| Error::parse(n, format!("bad score `{}`", f[4])))?;
        if !score.is_finite() {
            return Err(Error::parse(n, "score is not finite"));
        }
        out.push(ScoreRecord {
            video_id: f[0],
            frame_index,
            person,
            kind,
            score,
        });
    }
    if !header_seen {
        return Err(Error::EmptyInput("score file has no header".into()));
    }
    Ok(out)
}

fn single_kind<'a>(records: &[ScoreRecord<'a>]) -> Result<ScoreKind> {
    let kind = records
        .first()
        .map(|r| r.kind)
        .ok_or_else(|| Error::EmptyInput("score file has no records".into()))?;
    if records.iter().any(|r| r.kind != kind) {
        return Err(Error::Argument("score file mixes kinds".into()));
    }
    Ok(kind)
}

pub fn parse_score_series(text: &str) -> Result<ScoreSeries> {
    let records = parse_records(text)?;
    let kind = single_kind(&records)?;
    let entries = records
        .into_iter()
        .map(|r| {
            Ok(ScoreEntry {
                video_id: r.video_id.to_string(),
                person_id: r.person.ok_or_else(|| Error::Argument("frame-level record in a person series".into()))?,
                frame_index: r.frame_index,
                score: r.score,
            })
        })
        .collect::<Result<_>>()?;
    Ok(ScoreSeries { kind, entries })
}

/// Reads a frame-level file. The fill policy is not stored, so the result
/// reports `MinObserved` with `filled = 0`.
pub fn parse_frame_scores(text: &str) -> Result<FrameScoreSeries> {
    let records = parse_records(text)?;
    let kind = single_kind(&records)?;
    let mut seen = std::collections::HashSet::new();
    let mut entries = Vec::with_capacity(records.len());
    for r in records {
        if r.person.is_some() {
            return Err(Error::Argument("person record in a frame-level series".into()));
        }
        if !seen.insert((r.video_id, r.frame_index)) {
            return Err(Error::Argument(format!("duplicate frame {}@{}", r.video_id, r.frame_index)));
        }
        entries.push(FrameScore {
            video_id: r.video_id.to_string(),
            frame_index: r.frame_index,
            score: r.score,
        });
    }
    entries.sort_by(|a, b| (&a.video_id, a.frame_index).cmp(&(&b.video_id, b.frame_index)));
    Ok(FrameScoreSeries {
        kind,
        entries,
        fill: FillPolicy::MinObserved,
        filled: 0,
    })
}

pub fn read_score_series(path: &Path) -> Result<ScoreSeries> {
    parse_score_series(&crate::io::read_to_string(path)?)
}

pub fn read_frame_scores(path: &Path) -> Result<FrameScoreSeries> {
    parse_frame_scores(&crate::io::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn entry(v: &str, p: u64, f: u64, s: f64) -> ScoreEntry {
        ScoreEntry {
            video_id: v.into(),
            person_id: p,
            frame_index: f,
            score: s,
        }
    }

    fn series(kind: ScoreKind, scores: &[f64]) -> ScoreSeries {
        ScoreSeries {
            kind,
            entries: scores.iter().enumerate().map(|(i, &s)| entry("v", 0, i as u64, s)).collect(),
        }
    }

    #[test]
    fn normalize_examples() {
        let n = min_max_normalize(&series(ScoreKind::Cs, &[2.0, 4.0, 6.0]), false).unwrap();
        let got: Vec<f64> = n.entries.iter().map(|e| e.score).collect();
        assert_eq!(got, vec![0.0, 0.5, 1.0]);
        let c = min_max_normalize(&series(ScoreKind::Cs, &[3.0; 4]), false).unwrap();
        assert!(c.entries.iter().all(|e| e.score == 0.0));
        assert!(matches!(
            min_max_normalize(&ScoreSeries::new(ScoreKind::Fs), false),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn per_video_normalization_uses_each_videos_range() {
        let s = ScoreSeries {
            kind: ScoreKind::Cs,
            entries: vec![entry("a", 0, 0, 1.0), entry("a", 0, 1, 3.0), entry("b", 0, 0, 10.0), entry("b", 0, 1, 20.0)],
        };
        let n = min_max_normalize(&s, true).unwrap();
        let got: Vec<f64> = n.entries.iter().map(|e| e.score).collect();
        assert_eq!(got, vec![0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn hybrid_examples() {
        let cs = series(ScoreKind::Cs, &[0.2, 0.7]);
        let mut fs = series(ScoreKind::Fs, &[0.8]);
        let hs = hybrid_score(&cs, &fs).unwrap();
        assert_eq!(hs.kind, ScoreKind::Hs);
        assert!((hs.entries[0].score - 0.5).abs() < 1e-15);
        // frame 1 has no FTD score and falls back to CS
        assert_eq!(hs.entries[1].score, 0.7);
        fs.entries.push(entry("v", 0, 5, 0.3));
        let hs = hybrid_score(&cs, &fs).unwrap();
        assert_eq!(hs.entries.len(), 3);
        assert_eq!(hs.entries[2].score, 0.3);
        assert!(hybrid_score(&fs, &cs).is_err());
    }

    #[test]
    fn aggregate_takes_max_and_fills() {
        let s = ScoreSeries {
            kind: ScoreKind::Hs,
            entries: vec![entry("v", 0, 3, 0.3), entry("v", 1, 3, 0.9), entry("v", 2, 3, 0.5), entry("v", 0, 4, 0.2)],
        };
        let ranges = [VideoRange {
            video_id: "v".into(),
            first: 0,
            last: 5,
        }];
        let f = frame_aggregate(&s, &ranges, FillPolicy::MinObserved).unwrap();
        let got: Vec<(u64, f64)> = f.entries.iter().map(|e| (e.frame_index, e.score)).collect();
        assert_eq!(got, vec![(0, 0.2), (1, 0.2), (2, 0.2), (3, 0.9), (4, 0.2), (5, 0.2)]);
        assert_eq!(f.filled, 4);
        let z = frame_aggregate(&s, &ranges, FillPolicy::Constant(0.0)).unwrap();
        assert_eq!(z.entries[0].score, 0.0);
    }

    #[test]
    fn fill_policy_text() {
        assert_eq!("min".parse::<FillPolicy>().unwrap(), FillPolicy::MinObserved);
        assert_eq!("0.25".parse::<FillPolicy>().unwrap(), FillPolicy::Constant(0.25));
        assert!("nan".parse::<FillPolicy>().is_err());
        assert!("lowest".parse::<FillPolicy>().is_err());
    }

    #[test]
    fn score_files_round_trip() {
        let s = ScoreSeries {
            kind: ScoreKind::Fs,
            entries: vec![entry("cam 1", 4, 12, 0.1 + 0.2), entry("b", 0, 3, 1e-300)],
        };
        assert_eq!(parse_score_series(&format_score_series(&s)).unwrap(), s);
        let f = frame_aggregate(&s, &[], FillPolicy::MinObserved).unwrap();
        let back = parse_frame_scores(&format_frame_scores(&f)).unwrap();
        assert_eq!(back.entries, f.entries);
        assert!(parse_frame_scores(&format_score_series(&s)).is_err());
        assert!(parse_score_series("video_id,frame_index,person_id,kind,score\nv,1,0,cs,inf\n").is_err());
        assert!(matches!(parse_score_series("v,1,0,cs,1\n"), Err(Error::Parse { .. })));
    }

    #[test]
    fn pairing_requires_one_window_gap() {
        let mk = |start| PoseWindow::from_absolute("v", 0, start, 2, 1, vec![0.0; 4]).unwrap();
        assert!(check_pair(&mk(0), &mk(2)).is_ok());
        assert!(matches!(check_pair(&mk(0), &mk(3)), Err(Error::Pairing(_))));
        assert!(matches!(check_pair(&mk(2), &mk(0)), Err(Error::Pairing(_))));
        let mut other = mk(2);
        other.person_id = 1;
        assert!(matches!(check_pair(&mk(0), &other), Err(Error::Pairing(_))));
    }

    fn arb_series() -> impl Strategy<Value = ScoreSeries> {
        prop::collection::vec((0u8..3, 0u64..4, 0u64..20, -50.0f64..50.0), 1..80).prop_map(|raw| {
            let mut map = BTreeMap::new();
            for (v, p, f, s) in raw {
                map.insert((format!("v{v}"), p, f), s);
            }
            ScoreSeries {
                kind: ScoreKind::Cs,
                entries: map.into_iter().map(|((v, p, f), s)| entry(&v, p, f, s)).collect(),
            }
        })
    }

    proptest! {
        #[test]
        fn normalized_scores_in_unit_interval(s in arb_series(), per_video in any::<bool>()) {
            let n = min_max_normalize(&s, per_video).unwrap();
            prop_assert!(n.entries.iter().all(|e| (0.0..=1.0).contains(&e.score)));
        }

        #[test]
        fn increasing_map_preserves_normalized_order(s in arb_series()) {
            let mapped = ScoreSeries {
                kind: s.kind,
                entries: s.entries.iter().map(|e| ScoreEntry { score: e.score.powi(3) + 2.0 * e.score, ..e.clone() }).collect(),
            };
            let a = min_max_normalize(&s, false).unwrap();
            let b = min_max_normalize(&mapped, false).unwrap();
            for i in 0..a.len() {
                for j in 0..a.len() {
                    let (x, y) = (&a.entries, &b.entries);
                    prop_assert_eq!(x[i].score < x[j].score, y[i].score < y[j].score);
                }
            }
        }

        #[test]
        fn hybrid_is_symmetric(s in arb_series(), t in arb_series()) {
            let cs = min_max_normalize(&s, false).unwrap();
            let mut fs = min_max_normalize(&t, false).unwrap();
            fs.kind = ScoreKind::Fs;
            let mut cs_as_fs = cs.clone();
            cs_as_fs.kind = ScoreKind::Fs;
            let mut fs_as_cs = fs.clone();
            fs_as_cs.kind = ScoreKind::Cs;
            let ab = hybrid_score(&cs, &fs).unwrap();
            let ba = hybrid_score(&fs_as_cs, &cs_as_fs).unwrap();
            prop_assert_eq!(ab, ba);
        }

        #[test]
        fn frame_score_is_a_contributing_max(s in arb_series()) {
            let f = frame_aggregate(&s, &[], FillPolicy::MinObserved).unwrap();
            prop_assert_eq!(f.filled, 0);
            for fe in &f.entries {
                let contrib: Vec<f64> = s.entries.iter()
                    .filter(|e| e.video_id == fe.video_id && e.frame_index == fe.frame_index)
                    .map(|e| e.score)
                    .collect();
                prop_assert!(contrib.iter().all(|&c| fe.score >= c));
                prop_assert!(contrib.contains(&fe.score));
            }
        }
    }
}
