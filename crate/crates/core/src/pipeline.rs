//! Frame-by-frame orchestration: stereo against the active keyframe, keyframe
//! decisions, prediction attach on creation and one fusion solve per frame.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{debug, info, warn};
use thiserror::Error;

use crate::config::{ConfigError, PipelineConfig, PredictionSource};
use crate::datasets::{inject_pose_scale, load_sequence, DatasetError, Frame};
use crate::eval::{save_depth_png, score_depth, sort_scores, write_report, DepthScore, EvalError, KeyframeScore};
use crate::fusion::{init_state, optimize, FusionError, FusionState};
use crate::geometry::{CameraIntrinsics, Raster};
use crate::predictions::{focal_adjust, load_predictions, save_predictions, synth_oracle, PredictionError, PredictionSet};
use crate::semidense::{
    estimate_frame_from_poses, should_create_keyframe, texture_mask, update_semidense, SemiDenseMap, StereoError,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("datasets: {0}")]
    Dataset(#[from] DatasetError),
    #[error("predictions: {0}")]
    Prediction(#[from] PredictionError),
    #[error("semidense: {0}")]
    Stereo(#[from] StereoError),
    #[error("eval: {0}")]
    Eval(#[from] EvalError),
    #[error("pipeline: {0}")]
    Invalid(String),
    #[error("pipeline: cannot write {path}: {reason}")]
    Io { path: PathBuf, reason: String },
}

/// Per-keyframe bundle the fusion iterates on.
#[derive(Debug, Clone)]
pub struct Keyframe {
    pub id: usize,
    pub frame: Frame,
    pub semidense: SemiDenseMap,
    pub predictions: PredictionSet,
    pub fusion: FusionState,
    /// Pixels searched by stereo.
    pub mask: Raster<bool>,
    /// Frames after the keyframe itself.
    pub frames: usize,
    /// Frames that contributed at least one stereo observation.
    pub stereo_frames: usize,
}

/// Wall-times of one stage, in milliseconds.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StageTimes(pub Vec<f64>);

impl StageTimes {
    pub fn push(&mut self, ms: f64) {
        self.0.push(ms);
    }

    pub fn count(&self) -> usize {
        self.0.len()
    }

    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        if self.0.is_empty() {
            0.0
        } else {
            self.total() / self.0.len() as f64
        }
    }

    pub fn min(&self) -> f64 {
        self.0.iter().copied().reduce(f64::min).unwrap_or(0.0)
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().reduce(f64::max).unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Timings {
    pub semidense: StageTimes,
    pub optimisation: StageTimes,
    pub prediction: StageTimes,
    pub frame: StageTimes,
}

/// What happened to one frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameOutcome {
    Bootstrap,
    NewKeyframe,
    Fused,
    SolveFailed,
}

/// A keyframe after it stopped being active.
#[derive(Debug, Clone)]
pub struct KeyframeResult {
    pub id: usize,
    pub token: String,
    pub scale: f64,
    pub iteration: usize,
    pub frames: usize,
    pub stereo_frames: usize,
    pub semidense_coverage: f64,
    pub fused: Option<DepthScore>,
    pub prediction_only: Option<DepthScore>,
    /// Semi-dense depths times the fused scale; pixels without stereo count
    /// as wrong.
    pub semidense_only: Option<DepthScore>,
    pub depth: Raster<f64>,
    pub predictions: PredictionSet,
}

fn score_or_none(est: &Raster<f64>, frame: &Frame, what: &str, id: usize) -> Option<DepthScore> {
    match score_depth(est, &frame.gt_depth, &frame.holes) {
        Ok(s) => Some(s),
        Err(e) => {
            warn!("keyframe {id}: cannot score {what}: {e}");
            None
        }
    }
}

impl Keyframe {
    pub fn finish(&self) -> KeyframeResult {
        let depth = self.fusion.depth();
        let pred_depth = self.predictions.depth();
        let s = self.fusion.scale;
        let w = depth.width();
        let semi = Raster::from_fn(w, depth.height(), |x, y| {
            let i = y * w + x;
            if self.semidense.valid[i] {
                s * self.semidense.depth[i]
            } else {
                f64::NAN
            }
        });
        KeyframeResult {
            id: self.id,
            token: self.frame.token.clone(),
            scale: s,
            iteration: self.fusion.iteration,
            frames: self.frames,
            stereo_frames: self.stereo_frames,
            semidense_coverage: self.semidense.coverage(),
            fused: score_or_none(&depth, &self.frame, "fused depth", self.id),
            prediction_only: score_or_none(&pred_depth, &self.frame, "predictions", self.id),
            semidense_only: score_or_none(&semi, &self.frame, "semi-dense depth", self.id),
            depth,
            predictions: self.predictions.clone(),
        }
    }
}

/// Pipeline state: the active keyframe plus everything finished so far.
#[derive(Debug)]
pub struct World {
    pub cfg: PipelineConfig,
    pub k: CameraIntrinsics,
    pub active: Option<Keyframe>,
    pub finished: Vec<KeyframeResult>,
    pub timings: Timings,
    pub frames: usize,
    pub solver_failures: usize,
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

impl World {
    pub fn new(cfg: PipelineConfig, k: CameraIntrinsics) -> Result<Self, PipelineError> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            k,
            active: None,
            finished: Vec::new(),
            timings: Timings::default(),
            frames: 0,
            solver_failures: 0,
        })
    }

    pub fn keyframe_count(&self) -> usize {
        self.finished.len() + usize::from(self.active.is_some())
    }

    fn predictions_for(&self, id: usize, frame: &Frame) -> Result<PredictionSet, PipelineError> {
        let raw = match self.cfg.prediction_source() {
            PredictionSource::Directory(dir) => load_predictions(dir.join(format!("{}.dfpred", frame.token)))?,
            // Pass through the file precision so saved predictions reproduce the run.
            PredictionSource::Oracle(o) => {
                synth_oracle(&frame.gt_depth, Some(&frame.holes), &o.params_for(id, self.k.fx))?.representable()
            }
        };
        if (raw.width(), raw.height()) != (frame.gt_depth.width(), frame.gt_depth.height()) {
            return Err(PipelineError::Invalid(format!(
                "predictions for {} are {}x{}, frames are {}x{}",
                frame.token,
                raw.width(),
                raw.height(),
                frame.gt_depth.width(),
                frame.gt_depth.height()
            )));
        }
        Ok(focal_adjust(&raw, self.k.fx)?)
    }

    fn make_keyframe(&mut self, frame: Frame) -> Result<Keyframe, PipelineError> {
        let id = self.keyframe_count();
        let t = Instant::now();
        let predictions = self.predictions_for(id, &frame)?;
        self.timings.prediction.push(ms_since(t));
        let mask = texture_mask(&frame.intensity, self.cfg.stereo.texture_threshold)?;
        debug!(
            "keyframe {id} at {}: {} textured pixels",
            frame.token,
            mask.values().iter().filter(|m| **m).count()
        );
        Ok(Keyframe {
            id,
            semidense: SemiDenseMap::empty(frame.gt_depth.width(), frame.gt_depth.height()),
            fusion: init_state(&predictions),
            predictions,
            mask,
            frames: 0,
            stereo_frames: 0,
            frame,
        })
    }

    /// Processes one frame (poses already in trajectory units).
    pub fn process_frame(&mut self, frame: Frame) -> Result<FrameOutcome, PipelineError> {
        let start = Instant::now();
        self.frames += 1;
        let Some(mut kf) = self.active.take() else {
            self.active = Some(self.make_keyframe(frame)?);
            self.timings.frame.push(ms_since(start));
            return Ok(FrameOutcome::Bootstrap);
        };

        let t = Instant::now();
        let (obs, stats) = estimate_frame_from_poses(
            &kf.frame.intensity,
            &frame.intensity,
            &kf.frame.pose,
            &frame.pose,
            &self.k,
            &kf.mask,
            &kf.semidense,
            &self.cfg.stereo,
        );
        let upd = update_semidense(&mut kf.semidense, &obs);
        self.timings.semidense.push(ms_since(t));
        kf.frames += 1;
        if stats.valid > 0 {
            kf.stereo_frames += 1;
        }
        debug!(
            "frame {}: searched {} valid {} installed {} fused {} rejected {}",
            frame.token, stats.searched, stats.valid, upd.installed, upd.fused, upd.rejected
        );

        let median = kf.predictions.median_depth();
        if should_create_keyframe(&kf.frame.pose, &frame.pose, median, &kf.semidense, &self.cfg.policy) {
            self.finished.push(kf.finish());
            self.active = Some(self.make_keyframe(frame)?);
            self.timings.frame.push(ms_since(start));
            return Ok(FrameOutcome::NewKeyframe);
        }

        let t = Instant::now();
        let outcome = match optimize(&kf.fusion, &kf.semidense, &kf.predictions, &self.cfg.robust, self.cfg.mode) {
            Ok(state) => {
                kf.fusion = state;
                FrameOutcome::Fused
            }
            Err(e) => {
                warn!("frame {}: fusion failed, keeping previous state: {e}", frame.token);
                self.solver_failures += 1;
                if matches!(e, FusionError::DimensionMismatch(_) | FusionError::InvalidConfig(_)) {
                    self.active = Some(kf);
                    return Err(PipelineError::Invalid(e.to_string()));
                }
                FrameOutcome::SolveFailed
            }
        };
        self.timings.optimisation.push(ms_since(t));
        self.active = Some(kf);
        self.timings.frame.push(ms_since(start));
        Ok(outcome)
    }

    /// Finishes the active keyframe and returns all results.
    pub fn finish(mut self, sequence: &str) -> RunResult {
        if let Some(kf) = self.active.take() {
            self.finished.push(kf.finish());
        }
        let mut scores: Vec<KeyframeScore> = self
            .finished
            .iter()
            .filter_map(|r| r.fused.map(|s| KeyframeScore::new(sequence, r.id, self.cfg.mode, s)))
            .collect();
        sort_scores(&mut scores);
        RunResult {
            sequence: sequence.to_string(),
            cfg: self.cfg,
            keyframes: self.finished,
            scores,
            timings: self.timings,
            frames: self.frames,
            solver_failures: self.solver_failures,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub sequence: String,
    pub cfg: PipelineConfig,
    pub keyframes: Vec<KeyframeResult>,
    pub scores: Vec<KeyframeScore>,
    pub timings: Timings,
    pub frames: usize,
    pub solver_failures: usize,
}

impl RunResult {
    pub fn final_keyframe(&self) -> Option<&KeyframeResult> {
        self.keyframes.last()
    }

    /// Run manifest: config echo, then namespaced run facts.
    pub fn manifest(&self) -> String {
        let mut m = String::from("# depthfuse run manifest\n");
        m.push_str(&self.cfg.to_text());
        let _ = writeln!(m, "run.sequence_name = {}", self.sequence);
        let _ = writeln!(m, "run.frames = {}", self.frames);
        let _ = writeln!(m, "run.keyframes = {}", self.keyframes.len());
        let _ = writeln!(m, "run.solver_failures = {}", self.solver_failures);
        for (name, t) in [
            ("semidense", &self.timings.semidense),
            ("optimisation", &self.timings.optimisation),
            ("prediction", &self.timings.prediction),
            ("frame", &self.timings.frame),
        ] {
            let _ = writeln!(m, "timing.{name}.count = {}", t.count());
            let _ = writeln!(m, "timing.{name}.mean_ms = {:.3}", t.mean());
            let _ = writeln!(m, "timing.{name}.min_ms = {:.3}", t.min());
            let _ = writeln!(m, "timing.{name}.max_ms = {:.3}", t.max());
        }
        let pct = |s: &Option<DepthScore>| s.map_or("nan".to_string(), |s| s.pct_correct.to_string());
        for k in &self.keyframes {
            let p = format!("keyframe.{}", k.id);
            let _ = writeln!(m, "{p}.token = {}", k.token);
            let _ = writeln!(m, "{p}.scale = {}", k.scale);
            let _ = writeln!(m, "{p}.frames = {}", k.frames);
            let _ = writeln!(m, "{p}.stereo_frames = {}", k.stereo_frames);
            let _ = writeln!(m, "{p}.semidense_coverage = {}", k.semidense_coverage);
            let _ = writeln!(m, "{p}.pct_fused = {}", pct(&k.fused));
            let _ = writeln!(m, "{p}.pct_prediction = {}", pct(&k.prediction_only));
            let _ = writeln!(m, "{p}.pct_semidense = {}", pct(&k.semidense_only));
        }
        m
    }

    /// Writes scores.csv, manifest.txt, kf_<id>.png and kf_<id>.dfpred.
    pub fn write_outputs(&self, out: &Path) -> Result<(), PipelineError> {
        let io = |path: &Path, e: &dyn std::fmt::Display| PipelineError::Io {
            path: path.to_path_buf(),
            reason: e.to_string(),
        };
        fs::create_dir_all(out).map_err(|e| io(out, &e))?;
        write_report(&self.scores, out.join("scores.csv"))?;
        let mp = out.join("manifest.txt");
        fs::write(&mp, self.manifest()).map_err(|e| io(&mp, &e))?;
        for k in &self.keyframes {
            save_depth_png(&k.depth, None, out.join(format!("kf_{}.png", k.id)), self.cfg.load.depth_scale)?;
            save_predictions(&k.predictions, out.join(format!("kf_{}.dfpred", k.id)))?;
        }
        Ok(())
    }
}

/// Runs frames in order. Translations are scaled by `cfg.pose_scale` first.
pub fn run_frames(
    cfg: &PipelineConfig,
    frames: &[Frame],
    k: &CameraIntrinsics,
    sequence: &str,
) -> Result<RunResult, PipelineError> {
    if frames.is_empty() {
        return Err(PipelineError::Invalid("no frames to process".into()));
    }
    let n = if cfg.max_frames > 0 { cfg.max_frames.min(frames.len()) } else { frames.len() };
    let frames = inject_pose_scale(&frames[..n], cfg.pose_scale)?;
    let mut world = World::new(cfg.clone(), *k)?;
    for f in frames {
        let outcome = world.process_frame(f)?;
        debug!("frame {}: {outcome:?}", world.frames);
    }
    let r = world.finish(sequence);
    info!(
        "{}: {} frames, {} keyframes, {} failed solves",
        sequence,
        r.frames,
        r.keyframes.len(),
        r.solver_failures
    );
    Ok(r)
}

/// Name used in reports for a sequence directory.
pub fn sequence_name(dir: &Path) -> String {
    dir.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}

/// Loads `cfg.sequence` and runs it. Dataset errors are fatal.
pub fn run_sequence(cfg: &PipelineConfig) -> Result<RunResult, PipelineError> {
    let dir = cfg
        .sequence
        .as_ref()
        .ok_or_else(|| PipelineError::Invalid("no sequence configured".into()))?;
    let (frames, k) = load_sequence(dir, &cfg.load, cfg.tolerance)?;
    if frames.is_empty() {
        return Err(DatasetError::MalformedLine {
            file: dir.display().to_string(),
            line: 0,
            reason: "no associated frames".into(),
        }
        .into());
    }
    run_frames(cfg, &frames, &k, &sequence_name(dir))
}

/// Reads the config echo back from a manifest, skipping namespaced run facts.
pub fn config_from_manifest(text: &str) -> Result<PipelineConfig, ConfigError> {
    let mut cfg = PipelineConfig::default();
    for (_, k, v) in crate::config::parse_pairs(text)? {
        if !k.contains('.') {
            cfg.set(&k, &v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}
