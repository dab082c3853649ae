//! Pose-track ingestion, coordinate normalization, and window slicing.
//!
//! # File format
//!
//! ```text
//! #skelvad-poses v1 k=17 space=pixel:1920x1080
//! video_id,frame_index,person_id,x1,y1,c1,...,xk,yk,ck
//! ```
//!
//! The first non-blank line is the header. `space` is either `normalized`
//! or `pixel:<W>x<H>`. Each record carries `3 + 2k` fields (no confidence)
//! or `3 + 3k` fields (with confidence). Confidence values are parsed and
//! discarded. Later lines starting with `#` are comments.
//!
//! Keypoints follow the COCO-17 order in [`COCO17_KEYPOINTS`] when `k = 17`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_KEYPOINTS: usize = 17;

pub const COCO17_KEYPOINTS: [&str; 17] = [
    "nose",
    "left_eye",
    "right_eye",
    "left_ear",
    "right_ear",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
];

const HEADER_TAG: &str = "#skelvad-poses";
const FORMAT_VERSION: &str = "v1";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
}

impl Keypoint {
    pub fn new(x: f64, y: f64) -> Self {
        Keypoint { x, y }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseFrame {
    pub frame_index: u64,
    pub keypoints: Vec<Keypoint>,
}

/// One person's keypoints over a video, sorted by strictly increasing frame index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseTrack {
    pub video_id: String,
    pub person_id: u64,
    pub frames: Vec<PoseFrame>,
}

impl PoseTrack {
    pub fn keypoint_count(&self) -> usize {
        self.frames.first().map_or(0, |f| f.keypoints.len())
    }

    /// Maximal runs of consecutive frame indices, as half-open ranges into `frames`.
    pub fn runs(&self) -> Vec<std::ops::Range<usize>> {
        let mut runs = Vec::new();
        let mut start = 0;
        for i in 1..=self.frames.len() {
            let breaks = i == self.frames.len()
                || self.frames[i].frame_index != self.frames[i - 1].frame_index + 1;
            if breaks {
                if i > start {
                    runs.push(start..i);
                }
                start = i;
            }
        }
        runs
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum CoordinateSpace {
    Normalized,
    Pixel { width: u32, height: u32 },
}

impl std::fmt::Display for CoordinateSpace {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CoordinateSpace::Normalized => f.write_str("normalized"),
            CoordinateSpace::Pixel { width, height } => write!(f, "pixel:{width}x{height}"),
        }
    }
}

impl std::str::FromStr for CoordinateSpace {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        if s == "normalized" {
            return Ok(CoordinateSpace::Normalized);
        }
        let dims = s
            .strip_prefix("pixel:")
            .ok_or_else(|| format!("unknown coordinate space `{s}`"))?;
        let (w, h) = dims
            .split_once('x')
            .ok_or_else(|| format!("pixel space must be `pixel:<W>x<H>`, got `{s}`"))?;
        let width = w.parse().map_err(|_| format!("bad width in `{s}`"))?;
        let height = h.parse().map_err(|_| format!("bad height in `{s}`"))?;
        Ok(CoordinateSpace::Pixel { width, height })
    }
}

/// Header of a pose-track file.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseFileSchema {
    pub keypoints: usize,
    pub space: CoordinateSpace,
}

impl PoseFileSchema {
    pub fn header_line(&self) -> String {
        format!(
            "{HEADER_TAG} {FORMAT_VERSION} k={} space={}",
            self.keypoints, self.space
        )
    }

    fn parse_header(line: &str) -> std::result::Result<Self, String> {
        let mut parts = line.split_whitespace();
        if parts.next() != Some(HEADER_TAG) {
            return Err(format!("missing `{HEADER_TAG}` header"));
        }
        match parts.next() {
            Some(FORMAT_VERSION) => {}
            other => return Err(format!("unsupported format version {other:?}")),
        }
        let mut keypoints = None;
        let mut space = None;
        for part in parts {
            if let Some(v) = part.strip_prefix("k=") {
                keypoints = Some(v.parse::<usize>().map_err(|_| format!("bad k `{v}`"))?);
            } else if let Some(v) = part.strip_prefix("space=") {
                space = Some(v.parse::<CoordinateSpace>()?);
            } else {
                return Err(format!("unknown header field `{part}`"));
            }
        }
        let keypoints = keypoints.ok_or("header lacks k=")?;
        if keypoints == 0 {
            return Err("k must be at least 1".into());
        }
        Ok(PoseFileSchema {
            keypoints,
            space: space.ok_or("header lacks space=")?,
        })
    }
}

/// A record dropped while loading.
#[derive(Clone, Debug, PartialEq)]
pub struct Rejection {
    pub line: usize,
    pub reason: String,
}

#[derive(Clone, Debug)]
pub struct PoseLoad {
    pub schema: PoseFileSchema,
    pub tracks: Vec<PoseTrack>,
    pub rejections: Vec<Rejection>,
}

pub fn load_pose_tracks(path: &Path) -> Result<PoseLoad> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_pose_tracks(BufReader::new(file))
}

pub fn read_pose_tracks<R: BufRead>(reader: R) -> Result<PoseLoad> {
    let mut schema = None;
    let mut rejections = Vec::new();
    let mut grouped: BTreeMap<(String, u64), BTreeMap<u64, Vec<Keypoint>>> = BTreeMap::new();

    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io("<pose stream>", e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let Some(schema) = schema.as_ref() else {
            schema = Some(PoseFileSchema::parse_header(trimmed).map_err(|m| Error::parse(lineno, m))?);
            continue;
        };
        if trimmed.starts_with('#') {
            continue;
        }
        match parse_record(trimmed, schema.keypoints) {
            Ok((video, frame, person, kps)) => {
                let frames = grouped.entry((video, person)).or_default();
                if let std::collections::btree_map::Entry::Vacant(e) = frames.entry(frame) {
                    e.insert(kps);
                } else {
                    rejections.push(Rejection {
                        line: lineno,
                        reason: format!("duplicate frame {frame}"),
                    });
                }
            }
            Err(reason) => rejections.push(Rejection {
                line: lineno,
                reason,
            }),
        }
    }

    let schema = schema.ok_or_else(|| Error::EmptyInput("pose file has no header".into()))?;
    for r in &rejections {
        log::warn!("pose record rejected at line {}: {}", r.line, r.reason);
    }
    if grouped.is_empty() {
        return Err(Error::EmptyInput(format!(
            "no valid pose records ({} rejected)",
            rejections.len()
        )));
    }
    let tracks = grouped
        .into_iter()
        .map(|((video_id, person_id), frames)| PoseTrack {
            video_id,
            person_id,
            frames: frames
                .into_iter()
                .map(|(frame_index, keypoints)| PoseFrame {
                    frame_index,
                    keypoints,
                })
                .collect(),
        })
        .collect();
    Ok(PoseLoad {
        schema,
        tracks,
        rejections,
    })
}

fn parse_record(
    line: &str,
    k: usize,
) -> std::result::Result<(String, u64, u64, Vec<Keypoint>), String> {
    let fields: Vec<&str> = line.split(',').map(str::trim).collect();
    let stride = match fields.len().checked_sub(3) {
        Some(n) if n == 2 * k => 2,
        Some(n) if n == 3 * k => 3,
        _ => {
            return Err(format!(
                "expected {} or {} fields for k={k}, found {}",
                3 + 2 * k,
                3 + 3 * k,
                fields.len()
            ))
        }
    };
    let video = fields[0].to_string();
    if video.is_empty() {
        return Err("empty video_id".into());
    }
    let frame = fields[1]
        .parse::<u64>()
        .map_err(|_| format!("bad frame_index `{}`", fields[1]))?;
    let person = fields[2]
        .parse::<u64>()
        .map_err(|_| format!("bad person_id `{}`", fields[2]))?;
    let mut kps = Vec::with_capacity(k);
    for chunk in fields[3..].chunks_exact(stride) {
        let x: f64 = chunk[0].parse().map_err(|_| format!("bad x `{}`", chunk[0]))?;
        let y: f64 = chunk[1].parse().map_err(|_| format!("bad y `{}`", chunk[1]))?;
        if !x.is_finite() || !y.is_finite() {
            return Err("non-finite coordinate".into());
        }
        if stride == 3 {
            chunk[2]
                .parse::<f64>()
                .map_err(|_| format!("bad confidence `{}`", chunk[2]))?;
        }
        kps.push(Keypoint { x, y });
    }
    Ok((video, frame, person, kps))
}

/// Serializes tracks without confidence fields.
pub fn format_pose_tracks(schema: &PoseFileSchema, tracks: &[PoseTrack]) -> String {
    let mut out = schema.header_line();
    out.push('\n');
    for track in tracks {
        for frame in &track.frames {
            let _ = write!(
                out,
                "{},{},{}",
                track.video_id, frame.frame_index, track.person_id
            );
            for kp in &frame.keypoints {
                let _ = write!(out, ",{},{}", kp.x, kp.y);
            }
            out.push('\n');
        }
    }
    out
}

pub fn write_pose_tracks(path: &Path, schema: &PoseFileSchema, tracks: &[PoseTrack]) -> Result<()> {
    crate::io::write_atomic(path, format_pose_tracks(schema, tracks).as_bytes())
}

#[derive(Clone, Debug)]
pub struct Normalized {
    pub track: PoseTrack,
    /// Number of coordinates clamped into the frame.
    pub clamped: usize,
}

/// Maps pixel coordinates into `[0, 1]` by frame size, clamping out-of-frame values.
pub fn normalize_coordinates(track: &PoseTrack, frame_width: f64, frame_height: f64) -> Result<Normalized> {
    if !(frame_width > 0.0 && frame_height > 0.0) {
        return Err(Error::Argument(format!(
            "frame dimensions must be positive, got {frame_width}x{frame_height}"
        )));
    }
    let mut clamped = 0;
    let mut clamp = |v: f64| {
        if v < 0.0 {
            clamped += 1;
            0.0
        } else if v > 1.0 {
            clamped += 1;
            1.0
        } else {
            v
        }
    };
    let frames = track
        .frames
        .iter()
        .map(|f| PoseFrame {
            frame_index: f.frame_index,
            keypoints: f
                .keypoints
                .iter()
                .map(|kp| Keypoint {
                    x: clamp(kp.x / frame_width),
                    y: clamp(kp.y / frame_height),
                })
                .collect(),
        })
        .collect();
    if clamped > 0 {
        log::warn!(
            "{clamped} coordinates of {}/{} clamped into frame",
            track.video_id,
            track.person_id
        );
    }
    Ok(Normalized {
        track: PoseTrack {
            video_id: track.video_id.clone(),
            person_id: track.person_id,
            frames,
        },
        clamped,
    })
}

/// Brings every track of a load into normalized space according to its header.
pub fn normalize_load(load: &PoseLoad) -> Result<Vec<PoseTrack>> {
    match load.schema.space {
        CoordinateSpace::Normalized => Ok(load.tracks.clone()),
        CoordinateSpace::Pixel { width, height } => load
            .tracks
            .iter()
            .map(|t| normalize_coordinates(t, width as f64, height as f64).map(|n| n.track))
            .collect(),
    }
}

/// A `beta`-frame slice of one track with absolute and relative coordinates.
///
/// Both blocks are flattened as `[frame][keypoint][axis]` with axis 0 = x, 1 = y.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseWindow {
    pub video_id: String,
    pub person_id: u64,
    pub start_frame: u64,
    pub beta: usize,
    pub keypoints: usize,
    pub absolute: Vec<f64>,
    pub relative: Vec<f64>,
}

impl PoseWindow {
    /// Builds a window from an absolute block, deriving the relative block.
    pub fn from_absolute(
        video_id: impl Into<String>,
        person_id: u64,
        start_frame: u64,
        beta: usize,
        keypoints: usize,
        absolute: Vec<f64>,
    ) -> Result<Self> {
        validate_beta(beta)?;
        if keypoints == 0 || absolute.len() != beta * keypoints * 2 {
            return Err(Error::Shape(format!(
                "absolute block has {} values, expected {}x{}x2",
                absolute.len(),
                beta,
                keypoints
            )));
        }
        let relative = relative_pose(&absolute, beta, keypoints);
        Ok(PoseWindow {
            video_id: video_id.into(),
            person_id,
            start_frame,
            beta,
            keypoints,
            absolute,
            relative,
        })
    }

    #[inline]
    pub fn index(&self, frame: usize, keypoint: usize, axis: usize) -> usize {
        (frame * self.keypoints + keypoint) * 2 + axis
    }

    #[inline]
    pub fn abs(&self, frame: usize, keypoint: usize, axis: usize) -> f64 {
        self.absolute[self.index(frame, keypoint, axis)]
    }

    #[inline]
    pub fn rel(&self, frame: usize, keypoint: usize, axis: usize) -> f64 {
        self.relative[self.index(frame, keypoint, axis)]
    }

    /// Frame the window's score is attributed to.
    pub fn center_frame(&self) -> u64 {
        self.start_frame + (self.beta / 2) as u64
    }
}

pub(crate) fn validate_beta(beta: usize) -> Result<()> {
    if beta < 2 || !beta.is_multiple_of(2) {
        return Err(Error::Argument(format!(
            "window length must be even and at least 2, got {beta}"
        )));
    }
    Ok(())
}

/// `out[t] = input[t] - input[0]` over a `[frame][keypoint][axis]` block.
pub fn relative_pose(absolute: &[f64], beta: usize, keypoints: usize) -> Vec<f64> {
    let frame_len = keypoints * 2;
    debug_assert_eq!(absolute.len(), beta * frame_len);
    let first = &absolute[..frame_len.min(absolute.len())];
    absolute
        .chunks_exact(frame_len)
        .flat_map(|frame| frame.iter().zip(first).map(|(v, f0)| v - f0))
        .collect()
}

fn window_at(track: &PoseTrack, first: usize, beta: usize) -> Result<PoseWindow> {
    let k = track.keypoint_count();
    let mut absolute = Vec::with_capacity(beta * k * 2);
    for frame in &track.frames[first..first + beta] {
        if frame.keypoints.len() != k {
            return Err(Error::Shape(format!(
                "frame {} of {}/{} has {} keypoints, expected {k}",
                frame.frame_index,
                track.video_id,
                track.person_id,
                frame.keypoints.len()
            )));
        }
        for kp in &frame.keypoints {
            absolute.push(kp.x);
            absolute.push(kp.y);
        }
    }
    PoseWindow::from_absolute(
        track.video_id.clone(),
        track.person_id,
        track.frames[first].frame_index,
        beta,
        k,
        absolute,
    )
}

fn validate_stride(stride: usize) -> Result<()> {
    if stride == 0 {
        return Err(Error::Argument("stride must be at least 1".into()));
    }
    Ok(())
}

/// Slices a track into gap-free windows; offsets restart at each run of consecutive frames.
pub fn extract_windows(track: &PoseTrack, beta: usize, stride: usize) -> Result<Vec<PoseWindow>> {
    validate_beta(beta)?;
    validate_stride(stride)?;
    let mut windows = Vec::new();
    for run in track.runs() {
        let mut first = run.start;
        while first + beta <= run.end {
            windows.push(window_at(track, first, beta)?);
            first += stride;
        }
    }
    Ok(windows)
}

/// Consecutive non-overlapping `(previous, next)` window pairs, `beta` frames apart.
///
/// `next` windows start `stride` frames apart within each run, beginning at
/// the first start that has a full preceding window.
pub fn extract_window_pairs(
    track: &PoseTrack,
    beta: usize,
    stride: usize,
) -> Result<Vec<(PoseWindow, PoseWindow)>> {
    validate_beta(beta)?;
    validate_stride(stride)?;
    let mut pairs = Vec::new();
    for run in track.runs() {
        let mut first = run.start + beta;
        while first + beta <= run.end {
            pairs.push((window_at(track, first - beta, beta)?, window_at(track, first, beta)?));
            first += stride;
        }
    }
    Ok(pairs)
}
