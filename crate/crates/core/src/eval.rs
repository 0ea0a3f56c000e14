//! Depth-map scoring, mode comparison, CSV reports and 16-bit depth export.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma};
use thiserror::Error;

use crate::fusion::{FusionMode, FusionState};
use crate::geometry::Raster;

/// Relative error counted as correct.
pub const CORRECT_THRESHOLD: f64 = 0.10;
/// Slack on the threshold so that `1.1 · gt` counts as correct in floating
/// point, as it does in exact arithmetic.
const BOUNDARY_SLACK: f64 = 1e-12;

pub const REPORT_HEADER: [&str; 6] = [
    "sequence",
    "keyframe",
    "mode",
    "pct_correct",
    "n_evaluated",
    "median_abs_rel",
];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("no valid ground-truth pixels")]
    NoValidGroundTruth,
    #[error("sequence {sequence}: keyframe sets differ between {a} and {b}")]
    MismatchedKeyframeSets { sequence: String, a: FusionMode, b: FusionMode },
    #[error("i/o error on {path}: {reason}")]
    Io { path: PathBuf, reason: String },
    #[error("report line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

fn rel_error(est: f64, gt: f64) -> f64 {
    if est.is_finite() && est > 0.0 {
        (est - gt).abs() / gt
    } else {
        f64::INFINITY
    }
}

fn is_correct(rel: f64) -> bool {
    rel <= CORRECT_THRESHOLD + BOUNDARY_SLACK
}

fn valid_gt(gt: f64, hole: bool) -> bool {
    !hole && gt > 0.0 && gt.is_finite()
}

fn check_shapes(est: &Raster<f64>, gt: &Raster<f64>, holes: &Raster<bool>) -> Result<(), EvalError> {
    if !est.same_shape(gt) || !gt.same_shape(holes) {
        return Err(EvalError::DimensionMismatch(format!(
            "estimate {}x{}, ground truth {}x{}, holes {}x{}",
            est.width(),
            est.height(),
            gt.width(),
            gt.height(),
            holes.width(),
            holes.height()
        )));
    }
    Ok(())
}

/// Percentage of valid ground-truth pixels whose estimate is within 10%
/// relative error. Non-positive or non-finite estimates count as wrong.
pub fn pct_within_10(est: &Raster<f64>, gt: &Raster<f64>, holes: &Raster<bool>) -> Result<f64, EvalError> {
    Ok(score_depth(est, gt, holes)?.pct_correct)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthScore {
    pub pct_correct: f64,
    pub n_evaluated: usize,
    /// Median of `|est − gt| / gt` over evaluated pixels (∞ for undefined
    /// estimates).
    pub median_abs_rel: f64,
}

pub fn score_depth(est: &Raster<f64>, gt: &Raster<f64>, holes: &Raster<bool>) -> Result<DepthScore, EvalError> {
    check_shapes(est, gt, holes)?;
    let mut rel: Vec<f64> = (0..gt.len())
        .filter(|&i| valid_gt(gt[i], holes[i]))
        .map(|i| rel_error(est[i], gt[i]))
        .collect();
    if rel.is_empty() {
        return Err(EvalError::NoValidGroundTruth);
    }
    let correct = rel.iter().filter(|&&r| is_correct(r)).count();
    let n = rel.len();
    rel.sort_by(f64::total_cmp);
    let median = if n % 2 == 1 {
        rel[n / 2]
    } else {
        0.5 * (rel[n / 2 - 1] + rel[n / 2])
    };
    Ok(DepthScore {
        pct_correct: 100.0 * correct as f64 / n as f64,
        n_evaluated: n,
        median_abs_rel: median,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeyframeScore {
    pub sequence: String,
    pub keyframe: usize,
    pub mode: FusionMode,
    pub pct_correct: f64,
    pub n_evaluated: usize,
    pub median_abs_rel: f64,
}

impl KeyframeScore {
    pub fn new(sequence: &str, keyframe: usize, mode: FusionMode, s: DepthScore) -> Self {
        Self {
            sequence: sequence.to_string(),
            keyframe,
            mode,
            pct_correct: s.pct_correct,
            n_evaluated: s.n_evaluated,
            median_abs_rel: s.median_abs_rel,
        }
    }
}

/// Head-to-head record of two modes over sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct PairwiseWins {
    pub a: FusionMode,
    pub b: FusionMode,
    pub a_wins: usize,
    pub b_wins: usize,
    pub ties: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModeComparison {
    /// Mean pct_correct per sequence and mode.
    pub means: BTreeMap<String, BTreeMap<FusionMode, f64>>,
    /// Full against each other mode present, counted per sequence.
    pub wins: Vec<PairwiseWins>,
}

/// Per-sequence means and win counts. Every mode present for a sequence must
/// have scored the same keyframes.
pub fn compare_modes(scores: &[KeyframeScore]) -> Result<ModeComparison, EvalError> {
    let mut grouped: BTreeMap<&str, BTreeMap<FusionMode, Vec<&KeyframeScore>>> = BTreeMap::new();
    for s in scores {
        grouped
            .entry(&s.sequence)
            .or_default()
            .entry(s.mode)
            .or_default()
            .push(s);
    }
    let mut means = BTreeMap::new();
    for (seq, by_mode) in &grouped {
        let mut reference: Option<(FusionMode, BTreeSet<usize>)> = None;
        for (&mode, list) in by_mode {
            let ids: BTreeSet<usize> = list.iter().map(|s| s.keyframe).collect();
            match &reference {
                None => reference = Some((mode, ids)),
                Some((m0, ids0)) if *ids0 != ids => {
                    return Err(EvalError::MismatchedKeyframeSets {
                        sequence: seq.to_string(),
                        a: *m0,
                        b: mode,
                    })
                }
                Some(_) => {}
            }
        }
        let m: BTreeMap<FusionMode, f64> = by_mode
            .iter()
            .map(|(&mode, list)| (mode, list.iter().map(|s| s.pct_correct).sum::<f64>() / list.len() as f64))
            .collect();
        means.insert(seq.to_string(), m);
    }
    let mut wins = Vec::new();
    for other in [FusionMode::NoPairwise, FusionMode::LeastSquaresScale] {
        let mut w = PairwiseWins {
            a: FusionMode::Full,
            b: other,
            a_wins: 0,
            b_wins: 0,
            ties: 0,
        };
        let mut seen = false;
        for m in means.values() {
            if let (Some(&x), Some(&y)) = (m.get(&FusionMode::Full), m.get(&other)) {
                seen = true;
                match x.total_cmp(&y) {
                    std::cmp::Ordering::Greater => w.a_wins += 1,
                    std::cmp::Ordering::Less => w.b_wins += 1,
                    std::cmp::Ordering::Equal => w.ties += 1,
                }
            }
        }
        if seen {
            wins.push(w);
        }
    }
    Ok(ModeComparison { means, wins })
}

fn mode_rank(m: FusionMode) -> usize {
    FusionMode::ALL.iter().position(|&x| x == m).expect("listed mode")
}

/// Sorts into report order: sequence, keyframe, then mode.
pub fn sort_scores(scores: &mut [KeyframeScore]) {
    scores.sort_by(|a, b| {
        a.sequence
            .cmp(&b.sequence)
            .then(a.keyframe.cmp(&b.keyframe))
            .then(mode_rank(a.mode).cmp(&mode_rank(b.mode)))
    });
}

/// CSV text of the scores in report order. Floats use the shortest
/// representation that parses back to the same value.
pub fn format_report(scores: &[KeyframeScore]) -> String {
    let mut rows = scores.to_vec();
    sort_scores(&mut rows);
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(REPORT_HEADER).expect("in-memory write");
    for s in &rows {
        w.write_record([
            s.sequence.clone(),
            s.keyframe.to_string(),
            s.mode.name().to_string(),
            s.pct_correct.to_string(),
            s.n_evaluated.to_string(),
            s.median_abs_rel.to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}

pub fn write_report(scores: &[KeyframeScore], path: impl AsRef<Path>) -> Result<(), EvalError> {
    let path = path.as_ref();
    std::fs::write(path, format_report(scores)).map_err(|e| EvalError::Io {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

pub fn parse_report(text: &str) -> Result<Vec<KeyframeScore>, EvalError> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header = r.headers().map_err(|e| EvalError::Parse {
        line: 1,
        reason: e.to_string(),
    })?;
    if header.iter().ne(REPORT_HEADER) {
        return Err(EvalError::Parse {
            line: 1,
            reason: format!("unexpected header '{}'", header.iter().collect::<Vec<_>>().join(",")),
        });
    }
    let mut out = Vec::new();
    for (k, rec) in r.records().enumerate() {
        let line = k + 2;
        let err = |reason: String| EvalError::Parse { line, reason };
        let rec = rec.map_err(|e| err(e.to_string()))?;
        if rec.len() != REPORT_HEADER.len() {
            return Err(err(format!("expected 6 fields, found {}", rec.len())));
        }
        let num = |i: usize| rec[i].parse::<f64>().map_err(|_| err(format!("bad number '{}'", &rec[i])));
        let int = |i: usize| rec[i].parse::<usize>().map_err(|_| err(format!("bad count '{}'", &rec[i])));
        out.push(KeyframeScore {
            sequence: rec[0].to_string(),
            keyframe: int(1)?,
            mode: rec[2].parse().map_err(err)?,
            pct_correct: num(3)?,
            n_evaluated: int(4)?,
            median_abs_rel: num(5)?,
        });
    }
    Ok(out)
}

pub fn read_report(path: impl AsRef<Path>) -> Result<Vec<KeyframeScore>, EvalError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| EvalError::Io {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    parse_report(&text)
}

/// Stored 16-bit value for a depth in metres (saturating; non-finite → 0).
pub fn encode_depth(depth: f64, depth_scale: f64) -> u16 {
    let v = (depth * depth_scale).round();
    if v.is_nan() {
        0
    } else {
        v.clamp(0.0, u16::MAX as f64) as u16
    }
}

/// Writes metres as a 16-bit PNG; `holes` (if given) are stored as 0.
pub fn save_depth_png(
    depth: &Raster<f64>,
    holes: Option<&Raster<bool>>,
    path: impl AsRef<Path>,
    depth_scale: f64,
) -> Result<(), EvalError> {
    let path = path.as_ref();
    let data: Vec<u16> = (0..depth.len())
        .map(|i| {
            if holes.is_some_and(|h| h[i]) {
                0
            } else {
                encode_depth(depth[i], depth_scale)
            }
        })
        .collect();
    let img = ImageBuffer::<Luma<u16>, Vec<u16>>::from_vec(depth.width() as u32, depth.height() as u32, data)
        .expect("buffer matches dimensions");
    img.save(path).map_err(|e| EvalError::Io {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Writes the fused depth `exp(log_depth)` as a 16-bit PNG.
pub fn export_depth_image(state: &FusionState, path: impl AsRef<Path>, depth_scale: f64) -> Result<(), EvalError> {
    save_depth_png(&state.depth(), None, path, depth_scale)
}
