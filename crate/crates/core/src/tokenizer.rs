//! Window tokenization schemes and sinusoidal positional encoding.
//!
//! Every scheme is a pure re-indexing of a window's scalars. Each scalar is
//! addressed by `(frame, keypoint, axis, channel)` where channel 0 is the
//! absolute coordinate and channel 1 the relative one. Token layouts:
//!
//! | scheme  | tokens | token layout (outer → inner)                                  |
//! |---------|--------|---------------------------------------------------------------|
//! | ST-PRP  | β      | token `j < β/2` → x of frames `2j, 2j+1`; `j ≥ β/2` → y. Inside: channel, frame parity, keypoint |
//! | T-PRP   | β      | token `t` → frame t. Inside: channel, axis, keypoint          |
//! | KS-PRP  | k      | token `m` → keypoint m. Inside: channel, axis, frame          |
//! | FS-PRP  | 2k     | token `a·k + m` → axis a of keypoint m. Inside: channel, frame |
//!
//! Channel is always outermost inside a token, so disabling relative
//! channels keeps exactly the first half of every token.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pose_io::{validate_beta, PoseWindow};
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchemeKind {
    StPrp,
    TPrp,
    KsPrp,
    FsPrp,
}

impl SchemeKind {
    pub const ALL: [SchemeKind; 4] = [
        SchemeKind::StPrp,
        SchemeKind::TPrp,
        SchemeKind::KsPrp,
        SchemeKind::FsPrp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SchemeKind::StPrp => "st-prp",
            SchemeKind::TPrp => "t-prp",
            SchemeKind::KsPrp => "ks-prp",
            SchemeKind::FsPrp => "fs-prp",
        }
    }
}

impl std::fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for SchemeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SchemeKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s) || k.name().replace('-', "_").eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Argument(format!("unknown tokenization scheme `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenizationScheme {
    pub kind: SchemeKind,
    pub use_relative: bool,
}

impl TokenizationScheme {
    pub fn new(kind: SchemeKind, use_relative: bool) -> Self {
        TokenizationScheme { kind, use_relative }
    }

    fn channels(self) -> usize {
        if self.use_relative {
            2
        } else {
            1
        }
    }

    /// `(n_tokens, token_dim)` for a window of `beta` frames and `k` keypoints.
    pub fn token_shape(self, beta: usize, k: usize) -> (usize, usize) {
        let c = self.channels();
        match self.kind {
            SchemeKind::StPrp => (beta, 2 * c * k),
            SchemeKind::TPrp => (beta, 2 * c * k),
            SchemeKind::KsPrp => (k, 2 * c * beta),
            SchemeKind::FsPrp => (2 * k, c * beta),
        }
    }

    /// Visits every slot in token-major layout order as `(frame, keypoint, axis, channel)`.
    fn for_each_slot(self, beta: usize, k: usize, mut f: impl FnMut(usize, usize, usize, usize)) {
        let channels = self.channels();
        match self.kind {
            SchemeKind::StPrp => {
                let half = beta / 2;
                for token in 0..beta {
                    let axis = usize::from(token >= half);
                    let pair = token % half;
                    for ch in 0..channels {
                        for parity in 0..2 {
                            for kp in 0..k {
                                f(2 * pair + parity, kp, axis, ch);
                            }
                        }
                    }
                }
            }
            SchemeKind::TPrp => {
                for frame in 0..beta {
                    for ch in 0..channels {
                        for axis in 0..2 {
                            for kp in 0..k {
                                f(frame, kp, axis, ch);
                            }
                        }
                    }
                }
            }
            SchemeKind::KsPrp => {
                for kp in 0..k {
                    for ch in 0..channels {
                        for axis in 0..2 {
                            for frame in 0..beta {
                                f(frame, kp, axis, ch);
                            }
                        }
                    }
                }
            }
            SchemeKind::FsPrp => {
                for axis in 0..2 {
                    for kp in 0..k {
                        for ch in 0..channels {
                            for frame in 0..beta {
                                f(frame, kp, axis, ch);
                            }
                        }
                    }
                }
            }
        }
    }
}

impl std::fmt::Display for TokenizationScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.use_relative {
            write!(f, "{}", self.kind)
        } else {
            write!(f, "{} (no relative)", self.kind)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenOrigin {
    pub video_id: String,
    pub person_id: u64,
    pub start_frame: u64,
    pub beta: usize,
    pub keypoints: usize,
}

/// Tokens are the rows of `tokens`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Mat,
    pub scheme: TokenizationScheme,
    pub origin: TokenOrigin,
}

impl TokenSequence {
    pub fn n_tokens(&self) -> usize {
        self.tokens.rows()
    }

    pub fn token_dim(&self) -> usize {
        self.tokens.cols()
    }
}

pub fn tokenize(window: &PoseWindow, scheme: TokenizationScheme) -> Result<TokenSequence> {
    validate_beta(window.beta)?;
    let (beta, k) = (window.beta, window.keypoints);
    let (n, dim) = scheme.token_shape(beta, k);
    let mut data = Vec::with_capacity(n * dim);
    scheme.for_each_slot(beta, k, |frame, kp, axis, ch| {
        let idx = window.index(frame, kp, axis);
        data.push(if ch == 0 {
            window.absolute[idx]
        } else {
            window.relative[idx]
        });
    });
    Ok(TokenSequence {
        tokens: Mat::from_vec(n, dim, data),
        scheme,
        origin: TokenOrigin {
            video_id: window.video_id.clone(),
            person_id: window.person_id,
            start_frame: window.start_frame,
            beta,
            keypoints: k,
        },
    })
}

pub fn tokenize_st_prp(window: &PoseWindow) -> Result<TokenSequence> {
    tokenize(window, TokenizationScheme::new(SchemeKind::StPrp, true))
}

pub fn tokenize_t_prp(window: &PoseWindow) -> Result<TokenSequence> {
    tokenize(window, TokenizationScheme::new(SchemeKind::TPrp, true))
}

pub fn tokenize_ks_prp(window: &PoseWindow) -> Result<TokenSequence> {
    tokenize(window, TokenizationScheme::new(SchemeKind::KsPrp, true))
}

pub fn tokenize_fs_prp(window: &PoseWindow) -> Result<TokenSequence> {
    tokenize(window, TokenizationScheme::new(SchemeKind::FsPrp, true))
}

/// Inverse of [`tokenize`]. Without relative channels the relative block is recomputed.
pub fn detokenize(seq: &TokenSequence) -> Result<PoseWindow> {
    let o = &seq.origin;
    validate_beta(o.beta)?;
    let expect = seq.scheme.token_shape(o.beta, o.keypoints);
    if seq.tokens.shape() != expect {
        return Err(Error::Shape(format!(
            "token matrix is {:?}, scheme {} expects {:?}",
            seq.tokens.shape(),
            seq.scheme,
            expect
        )));
    }
    let len = o.beta * o.keypoints * 2;
    let mut absolute = vec![0.0; len];
    let mut relative = vec![0.0; len];
    let values = seq.tokens.as_slice();
    let mut cursor = 0;
    seq.scheme
        .for_each_slot(o.beta, o.keypoints, |frame, kp, axis, ch| {
            let idx = (frame * o.keypoints + kp) * 2 + axis;
            if ch == 0 {
                absolute[idx] = values[cursor];
            } else {
                relative[idx] = values[cursor];
            }
            cursor += 1;
        });
    let mut window = PoseWindow::from_absolute(
        o.video_id.clone(),
        o.person_id,
        o.start_frame,
        o.beta,
        o.keypoints,
        absolute,
    )?;
    if seq.scheme.use_relative {
        window.relative = relative;
    }
    Ok(window)
}

/// Sinusoidal table: `PE[pos, 2i] = sin(pos / 10000^(2i/dim))`, `PE[pos, 2i+1] = cos(..)`.
pub fn positional_encoding(n_tokens: usize, dim: usize) -> Result<Mat> {
    if !dim.is_multiple_of(2) {
        return Err(Error::Argument(format!(
            "positional encoding needs an even dimension, got {dim}"
        )));
    }
    let mut pe = Mat::zeros(n_tokens, dim);
    for pos in 0..n_tokens {
        let row = pe.row_mut(pos);
        for i in 0..dim / 2 {
            let angle = pos as f64 / 10000f64.powf((2 * i) as f64 / dim as f64);
            row[2 * i] = angle.sin();
            row[2 * i + 1] = angle.cos();
        }
    }
    Ok(pe)
}

/// Element-wise sum with the positional table of matching shape.
pub fn add_positional(tokens: &Mat) -> Result<Mat> {
    let pe = positional_encoding(tokens.rows(), tokens.cols())?;
    let mut out = tokens.clone();
    out.add_assign(&pe);
    Ok(out)
}

/// Deterministic text matrix: a `#` header, then one whitespace-separated row per token.
pub fn format_tokens(seq: &TokenSequence) -> String {
    use std::fmt::Write as _;
    let o = &seq.origin;
    let mut out = format!(
        "# scheme={} relative={} video={} person={} start={} beta={} k={} shape={}x{}\n",
        seq.scheme.kind,
        seq.scheme.use_relative,
        o.video_id,
        o.person_id,
        o.start_frame,
        o.beta,
        o.keypoints,
        seq.n_tokens(),
        seq.token_dim()
    );
    for r in 0..seq.n_tokens() {
        let row = seq.tokens.row(r);
        for (i, v) in row.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            let _ = write!(out, "{v:.9e}");
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn window(beta: usize, k: usize, abs: Vec<f64>) -> PoseWindow {
        PoseWindow::from_absolute("v", 0, 0, beta, k, abs).unwrap()
    }

    #[test]
    fn st_prp_default_shape_and_axis_split() {
        let abs: Vec<f64> = (0..24 * 17 * 2)
            .map(|i| if i % 2 == 0 { 0.25 } else { 0.0 })
            .collect();
        let seq = tokenize_st_prp(&window(24, 17, abs)).unwrap();
        assert_eq!(seq.tokens.shape(), (24, 68));
        // x = 0.25, y = 0: first half holds x only, second half y only
        for j in 0..12 {
            assert!(seq.tokens.row(j)[..34].iter().all(|&v| v == 0.25));
        }
        for j in 12..24 {
            assert!(seq.tokens.row(j).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn st_prp_hand_layout() {
        // k=1, beta=4, x = 0.1..0.4, y = 0
        let abs = vec![0.1, 0.0, 0.2, 0.0, 0.3, 0.0, 0.4, 0.0];
        let seq = tokenize_st_prp(&window(4, 1, abs)).unwrap();
        let t = &seq.tokens;
        let expect0 = [0.1, 0.2, 0.0, 0.1];
        let expect1 = [0.3, 0.4, 0.2, 0.3];
        for i in 0..4 {
            assert_abs_diff_eq!(t.row(0)[i], expect0[i], epsilon = 1e-15);
            assert_abs_diff_eq!(t.row(1)[i], expect1[i], epsilon = 1e-15);
        }
        assert!(t.row(2).iter().chain(t.row(3)).all(|&v| v == 0.0));
    }

    #[test]
    fn t_prp_hand_layout() {
        let seq = tokenize_t_prp(&window(2, 1, vec![1.0, 2.0, 3.0, 5.0])).unwrap();
        assert_eq!(seq.tokens.row(0), &[1.0, 2.0, 0.0, 0.0]);
        assert_eq!(seq.tokens.row(1), &[3.0, 5.0, 2.0, 3.0]);
    }

    #[test]
    fn t_prp_constant_frames() {
        let seq = tokenize_t_prp(&window(4, 2, [0.3, 0.4, 0.5, 0.6].repeat(4))).unwrap();
        for t in 0..4 {
            assert_eq!(&seq.tokens.row(t)[..4], &seq.tokens.row(0)[..4]);
            assert!(seq.tokens.row(t)[4..].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn default_window_dimensions() {
        let w = window(24, 17, vec![0.0; 24 * 17 * 2]);
        assert_eq!(tokenize_t_prp(&w).unwrap().tokens.shape(), (24, 68));
        assert_eq!(tokenize_ks_prp(&w).unwrap().tokens.shape(), (17, 96));
        assert_eq!(tokenize_fs_prp(&w).unwrap().tokens.shape(), (34, 48));
        for kind in SchemeKind::ALL {
            let seq = tokenize(&w, TokenizationScheme::new(kind, true)).unwrap();
            assert!(seq.tokens.as_slice().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn odd_beta_rejected() {
        let w = PoseWindow {
            video_id: "v".into(),
            person_id: 0,
            start_frame: 0,
            beta: 3,
            keypoints: 1,
            absolute: vec![0.0; 6],
            relative: vec![0.0; 6],
        };
        assert!(tokenize_st_prp(&w).is_err());
    }

    #[test]
    fn scheme_names_parse() {
        assert_eq!("st-prp".parse::<SchemeKind>().unwrap(), SchemeKind::StPrp);
        assert_eq!("KS_PRP".parse::<SchemeKind>().unwrap(), SchemeKind::KsPrp);
        assert!("xy".parse::<SchemeKind>().is_err());
    }

    #[test]
    fn positional_table_values() {
        let pe = positional_encoding(5, 6).unwrap();
        for c in 0..6 {
            assert_eq!(pe.get(0, c), if c % 2 == 0 { 0.0 } else { 1.0 });
        }
        assert_abs_diff_eq!(pe.get(1, 0), 0.841_470_984_807_896_5, epsilon = 1e-15);
        // column 2 uses 10000^(2/6)
        assert_abs_diff_eq!(pe.get(3, 2), (3.0 / 10000f64.powf(1.0 / 3.0)).sin(), epsilon = 1e-15);
        assert!(pe.as_slice().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(positional_encoding(4, 5).is_err());
    }

    #[test]
    fn add_positional_behaviour() {
        let zero = Mat::zeros(3, 4);
        let pe = positional_encoding(3, 4).unwrap();
        assert_eq!(add_positional(&zero).unwrap(), pe);
        let twice = add_positional(&add_positional(&zero).unwrap()).unwrap();
        assert_ne!(twice, pe);
        let tok = Mat::from_rows(&[vec![1.0, 2.0], vec![0.5, -0.5]]);
        let out = add_positional(&tok).unwrap();
        assert_eq!(out.row(0), &[1.0, 3.0]);
        assert_abs_diff_eq!(out.get(1, 0), 0.5 + 1f64.sin(), epsilon = 1e-15);
        assert_abs_diff_eq!(out.get(1, 1), -0.5 + 1f64.cos(), epsilon = 1e-15);
    }

    #[test]
    fn token_dump_is_deterministic() {
        let w = window(2, 1, vec![1.0, 2.0, 3.0, 5.0]);
        let a = format_tokens(&tokenize_t_prp(&w).unwrap());
        assert_eq!(a, format_tokens(&tokenize_t_prp(&w).unwrap()));
        assert!(a.starts_with("# scheme=t-prp relative=true"));
        assert_eq!(a.lines().count(), 3);
    }
}
