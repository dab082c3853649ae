//! Deterministic synthetic pose tracks with injected anomalies.
//!
//! Each person walks with a skewed periodic limb swing, a small vertical bob and a
//! slow linear drift, plus bounded uniform jitter. Anomalies replace the
//! motion inside a frame span; after the span the normal motion resumes
//! from wherever the anomaly left the body.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::LabeledFrames;
use crate::pose_io::{Keypoint, PoseFrame, PoseTrack};

/// COCO-17 rest pose in body-height units, origin between the hips, y down.
const TEMPLATE: [(f64, f64); 17] = [
    (0.0, -0.45),
    (0.02, -0.47),
    (-0.02, -0.47),
    (0.04, -0.46),
    (-0.04, -0.46),
    (0.10, -0.32),
    (-0.10, -0.32),
    (0.13, -0.17),
    (-0.13, -0.17),
    (0.14, -0.03),
    (-0.14, -0.03),
    (0.07, 0.0),
    (-0.07, 0.0),
    (0.08, 0.22),
    (-0.08, 0.22),
    (0.08, 0.45),
    (-0.08, 0.45),
];

/// Horizontal swing per keypoint (body-height units) and phase sign. Arms
/// swing against the leg on the same side.
const SWING: [(f64, f64); 17] = [
    (0.0, 0.0),
    (0.0, 0.0),
    (0.0, 0.0),
    (0.0, 0.0),
    (0.0, 0.0),
    (0.0, 0.0),
    (0.0, 0.0),
    (0.04, -1.0),
    (0.04, 1.0),
    (0.08, -1.0),
    (0.08, 1.0),
    (0.0, 0.0),
    (0.0, 0.0),
    (0.06, 1.0),
    (0.06, -1.0),
    (0.10, 1.0),
    (0.10, -1.0),
];

const BOB: f64 = 0.01;
/// Second-harmonic weight of the swing wave. A nonzero value skews the
/// wave so a time-reversed gait differs from any phase shift of it.
const SKEW: f64 = 0.3;
const MAX_SWING: f64 = 0.10;
const HEIGHT_RANGE: (f64, f64) = (0.18, 0.26);
const FREQ_SPREAD: (f64, f64) = (0.8, 1.2);
/// Body-center ranges a drifting walker stays within.
const X_RANGE: (f64, f64) = (0.15, 0.85);
const Y_RANGE: (f64, f64) = (0.3, 0.7);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaitParams {
    /// Mean gait cycles per frame.
    pub stride_frequency: f64,
    /// Multiplier on the limb swing amplitudes.
    pub amplitude: f64,
    /// Largest horizontal drift per frame; vertical drift is at most 30% of it.
    pub drift_velocity: f64,
    /// Half-width of the uniform per-coordinate noise.
    pub jitter: f64,
}

impl Default for GaitParams {
    fn default() -> Self {
        GaitParams {
            stride_frequency: 0.03,
            amplitude: 1.0,
            drift_velocity: 3e-4,
            jitter: 1e-3,
        }
    }
}

impl GaitParams {
    /// Upper bound on any coordinate's per-frame change in a normal track.
    pub fn max_step(&self) -> f64 {
        let w = 2.0 * std::f64::consts::PI * self.stride_frequency * FREQ_SPREAD.1;
        let h = HEIGHT_RANGE.1;
        let swing = w * (1.0 + 2.0 * SKEW) * self.amplitude * MAX_SWING * h;
        let bob = 2.0 * w * BOB * h;
        self.drift_velocity + swing.max(bob) + 2.0 * self.jitter
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    /// Per-frame displacement multiplied by [`VELOCITY_FACTOR`].
    VelocitySpike,
    /// The pose at the span's first frame is held.
    Freeze,
    /// Keypoint identities shuffled independently in every frame.
    JointScramble,
    /// Motion replayed backwards from the span's first frame.
    ReverseMotion,
}

pub const VELOCITY_FACTOR: f64 = 8.0;

impl AnomalyKind {
    pub const ALL: [AnomalyKind; 4] = [
        AnomalyKind::VelocitySpike,
        AnomalyKind::Freeze,
        AnomalyKind::JointScramble,
        AnomalyKind::ReverseMotion,
    ];
}

/// Half-open span `[start, end)` of frame indices on one person.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnomalySpec {
    pub kind: AnomalyKind,
    pub video_id: String,
    pub person_id: u64,
    pub start: u64,
    pub end: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthScenario {
    pub seed: u64,
    pub video_prefix: String,
    pub n_videos: usize,
    pub persons_per_video: usize,
    pub n_frames: usize,
    pub keypoints: usize,
    pub gait: GaitParams,
    pub anomalies: Vec<AnomalySpec>,
}

impl SynthScenario {
    pub fn video_id(&self, video: usize) -> String {
        format!("{}{video:03}", self.video_prefix)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_videos == 0 || self.persons_per_video == 0 || self.n_frames < 2 || self.keypoints == 0 {
            return Err(Error::Config("scenario needs videos, persons, keypoints and at least 2 frames".into()));
        }
        for a in &self.anomalies {
            if a.start > a.end || a.end > self.n_frames as u64 {
                return Err(Error::Config(format!(
                    "anomaly span [{}, {}) outside [0, {})",
                    a.start, a.end, self.n_frames
                )));
            }
            if a.kind == AnomalyKind::ReverseMotion && a.end - a.start > a.start {
                return Err(Error::Config(format!(
                    "reverse span [{}, {}) needs at least as many frames before it",
                    a.start, a.end
                )));
            }
        }
        Ok(())
    }
}

fn template(k: usize, rng: &mut ChaCha8Rng) -> Vec<((f64, f64), (f64, f64))> {
    (0..k)
        .map(|i| {
            if i < TEMPLATE.len() {
                (TEMPLATE[i], SWING[i])
            } else {
                ((rng.gen_range(-0.15..0.15), rng.gen_range(-0.45..0.45)), (0.0, 0.0))
            }
        })
        .collect()
}

/// Start coordinate so the whole drift `travel` stays inside `range` when it fits.
fn start_position(rng: &mut ChaCha8Rng, travel: f64, range: (f64, f64)) -> f64 {
    let lo = range.0 - travel.min(0.0);
    let hi = range.1 - travel.max(0.0);
    if lo < hi {
        rng.gen_range(lo..hi)
    } else {
        0.5 * (range.0 + range.1) - 0.5 * travel
    }
}

fn person_track(scenario: &SynthScenario, video: usize, person: usize) -> PoseTrack {
    let g = scenario.gait;
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    rng.set_stream((video * scenario.persons_per_video + person) as u64);
    let height = rng.gen_range(HEIGHT_RANGE.0..HEIGHT_RANGE.1);
    let freq = g.stride_frequency * rng.gen_range(FREQ_SPREAD.0..FREQ_SPREAD.1);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let vx = g.drift_velocity * rng.gen_range(0.5..1.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let vy = g.drift_velocity * rng.gen_range(-0.3..0.3);
    let span = scenario.n_frames as f64;
    let cx = start_position(&mut rng, vx * span, X_RANGE);
    let cy = start_position(&mut rng, vy * span, Y_RANGE);
    let body = template(scenario.keypoints, &mut rng);
    let frames = (0..scenario.n_frames)
        .map(|t| {
            let tf = t as f64;
            let arg = std::f64::consts::TAU * freq * tf + phase;
            let s = arg.sin() + SKEW * (2.0 * arg).sin();
            let bob = BOB * (2.0 * arg).sin();
            let keypoints = body
                .iter()
                .map(|&((bx, by), (amp, sign))| {
                    let jx = if g.jitter > 0.0 { rng.gen_range(-g.jitter..g.jitter) } else { 0.0 };
                    let jy = if g.jitter > 0.0 { rng.gen_range(-g.jitter..g.jitter) } else { 0.0 };
                    let x = cx + vx * tf + height * (bx + g.amplitude * amp * sign * s) + jx;
                    let y = cy + vy * tf + height * (by + bob) + jy;
                    Keypoint::new(x.clamp(0.0, 1.0), y.clamp(0.0, 1.0))
                })
                .collect();
            PoseFrame {
                frame_index: t as u64,
                keypoints,
            }
        })
        .collect();
    PoseTrack {
        video_id: scenario.video_id(video),
        person_id: person as u64,
        frames,
    }
}

/// Anomaly-free tracks for every (video, person) of a scenario.
pub fn gen_normal_tracks(scenario: &SynthScenario) -> Result<Vec<PoseTrack>> {
    scenario.validate()?;
    let mut out = Vec::with_capacity(scenario.n_videos * scenario.persons_per_video);
    for v in 0..scenario.n_videos {
        for p in 0..scenario.persons_per_video {
            out.push(person_track(scenario, v, p));
        }
    }
    Ok(out)
}

fn centroid(kps: &[Keypoint]) -> (f64, f64) {
    let n = kps.len() as f64;
    let (sx, sy) = kps.iter().fold((0.0, 0.0), |(a, b), k| (a + k.x, b + k.y));
    (sx / n, sy / n)
}

/// Applies `spec` to `track`; `seed` drives the scramble permutations.
/// Labels cover every frame of the track, 1 inside the span.
pub fn inject_anomaly(track: &PoseTrack, spec: &AnomalySpec, seed: u64) -> Result<(PoseTrack, LabeledFrames)> {
    if spec.video_id != track.video_id || spec.person_id != track.person_id {
        return Err(Error::Argument(format!(
            "anomaly for {}/{} applied to track {}/{}",
            spec.video_id, spec.person_id, track.video_id, track.person_id
        )));
    }
    let pos = |frame: u64| track.frames.iter().position(|f| f.frame_index == frame);
    let mut labels = LabeledFrames::new();
    for f in &track.frames {
        labels.mark(&track.video_id, f.frame_index, u8::from(f.frame_index >= spec.start && f.frame_index < spec.end));
    }
    if spec.start == spec.end {
        return Ok((track.clone(), labels));
    }
    let (Some(s), Some(last)) = (pos(spec.start), pos(spec.end - 1)) else {
        return Err(Error::Argument(format!(
            "span [{}, {}) is not inside track {}/{}",
            spec.start, spec.end, track.video_id, track.person_id
        )));
    };
    let e = last + 1;
    if e - s != (spec.end - spec.start) as usize {
        return Err(Error::Argument("anomaly span crosses a gap in the track".into()));
    }
    let orig = &track.frames;
    let mut out = track.clone();
    match spec.kind {
        AnomalyKind::VelocitySpike => {
            for t in s..e {
                let prev = if t == 0 { &orig[0].keypoints } else { &out.frames[t - 1].keypoints }.clone();
                let from = if t == 0 { &orig[0].keypoints } else { &orig[t - 1].keypoints };
                for (j, kp) in out.frames[t].keypoints.iter_mut().enumerate() {
                    kp.x = prev[j].x + VELOCITY_FACTOR * (orig[t].keypoints[j].x - from[j].x);
                    kp.y = prev[j].y + VELOCITY_FACTOR * (orig[t].keypoints[j].y - from[j].y);
                }
            }
        }
        AnomalyKind::Freeze => {
            for t in s..e {
                out.frames[t].keypoints = orig[s].keypoints.clone();
            }
        }
        AnomalyKind::JointScramble => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(spec.person_id.wrapping_mul(0x9e37_79b9) ^ spec.start);
            for t in s..e {
                let mut perm: Vec<usize> = (0..orig[t].keypoints.len()).collect();
                perm.shuffle(&mut rng);
                out.frames[t].keypoints = perm.iter().map(|&j| orig[t].keypoints[j]).collect();
            }
        }
        AnomalyKind::ReverseMotion => {
            if e - s > s {
                return Err(Error::Argument("reverse span needs as many frames before it".into()));
            }
            for t in s..e {
                out.frames[t].keypoints = orig[2 * s - t].keypoints.clone();
            }
        }
    }
    let (ax, ay) = centroid(&out.frames[e - 1].keypoints);
    let (bx, by) = centroid(&orig[e - 1].keypoints);
    let (dx, dy) = (ax - bx, ay - by);
    for t in e..orig.len() {
        for kp in &mut out.frames[t].keypoints {
            kp.x += dx;
            kp.y += dy;
        }
    }
    for f in &mut out.frames[s..] {
        for kp in &mut f.keypoints {
            kp.x = kp.x.clamp(0.0, 1.0);
            kp.y = kp.y.clamp(0.0, 1.0);
        }
    }
    Ok((out, labels))
}

/// Tracks with the scenario's anomalies applied, and per-(video, frame)
/// labels: 1 when any person in the video is inside a span.
pub fn realize(scenario: &SynthScenario) -> Result<(Vec<PoseTrack>, LabeledFrames)> {
    let mut tracks = gen_normal_tracks(scenario)?;
    let mut labels = LabeledFrames::new();
    for t in &tracks {
        for f in &t.frames {
            labels.mark(&t.video_id, f.frame_index, 0);
        }
    }
    for a in &scenario.anomalies {
        let track = tracks
            .iter_mut()
            .find(|t| t.video_id == a.video_id && t.person_id == a.person_id)
            .ok_or_else(|| Error::Config(format!("anomaly targets unknown track {}/{}", a.video_id, a.person_id)))?;
        let (changed, l) = inject_anomaly(track, a, scenario.seed)?;
        *track = changed;
        labels.merge(&l);
    }
    Ok((tracks, labels))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    pub seed: u64,
    pub train_videos: usize,
    pub test_videos: usize,
    pub persons_per_video: usize,
    pub n_frames: usize,
    pub keypoints: usize,
    pub gait: GaitParams,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        BenchmarkSpec {
            seed: 2024,
            train_videos: 20,
            test_videos: 10,
            persons_per_video: 2,
            n_frames: 600,
            keypoints: 17,
            gait: GaitParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Benchmark {
    pub train_scenario: SynthScenario,
    pub test_scenario: SynthScenario,
    pub train: Vec<PoseTrack>,
    pub test: Vec<PoseTrack>,
    pub train_labels: LabeledFrames,
    pub test_labels: LabeledFrames,
}

/// Default-size benchmark for `seed`.
pub fn make_benchmark(seed: u64) -> Result<Benchmark> {
    make_benchmark_with(&BenchmarkSpec {
        seed,
        ..BenchmarkSpec::default()
    })
}

/// Normal-only train videos and test videos with one anomaly each. Span
/// lengths are 7.5-12.5% of the video and the kinds cycle through
/// [`AnomalyKind::ALL`].
pub fn make_benchmark_with(spec: &BenchmarkSpec) -> Result<Benchmark> {
    let n = spec.n_frames;
    if n < 40 {
        return Err(Error::Config(format!("benchmark videos need at least 40 frames, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let train_scenario = SynthScenario {
        seed: rng.gen(),
        video_prefix: "train_".into(),
        n_videos: spec.train_videos,
        persons_per_video: spec.persons_per_video,
        n_frames: n,
        keypoints: spec.keypoints,
        gait: spec.gait,
        anomalies: Vec::new(),
    };
    let mut test_scenario = SynthScenario {
        seed: rng.gen(),
        video_prefix: "test_".into(),
        n_videos: spec.test_videos,
        anomalies: Vec::new(),
        ..train_scenario.clone()
    };
    let min_len = (n as f64 * 0.075).ceil() as usize;
    let max_len = (n as f64 * 0.125).floor() as usize;
    for v in 0..spec.test_videos {
        let len = rng.gen_range(min_len..=max_len);
        let lo = len.max(n / 6);
        let hi = n - len - n / 10;
        let start = rng.gen_range(lo..=hi);
        test_scenario.anomalies.push(AnomalySpec {
            kind: AnomalyKind::ALL[v % AnomalyKind::ALL.len()],
            video_id: test_scenario.video_id(v),
            person_id: (v % spec.persons_per_video) as u64,
            start: start as u64,
            end: (start + len) as u64,
        });
    }
    let (train, train_labels) = realize(&train_scenario)?;
    let (test, test_labels) = realize(&test_scenario)?;
    Ok(Benchmark {
        train_scenario,
        test_scenario,
        train,
        test,
        train_labels,
        test_labels,
    })
}
