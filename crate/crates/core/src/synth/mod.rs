//! Labelled synthetic cohorts with a planted temporal signal.
//!
//! Each participant gets one conversation video. The participant's face is
//! on screen in segments whose lengths follow `1 + Geometric` with mean
//! `μ_NC` or `μ_MCI`, separated by gaps of at least [`GAP_TOLERANCE`]
//! frames in which the interviewer fills the screen or the participant looks
//! away. Inside a segment the detector occasionally misses one or two frames.
//! A picture-in-picture interviewer face sits outside the region of interest
//! and small bystander faces fall under the minimum area, so selection has
//! something to reject. Expressions drift smoothly and MCI participants get
//! a small `feature_shift` on their mean expression.

mod face;

pub use face::{Expression, Identity, Pose, ProceduralFace, MAX_OFFSET, MAX_TILT};

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Geometric, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocessing::{
    compute_frame_shift, main_face, read_detections, write_detections, BBox, CropSource, CropStorage, DetectionRecord, Face,
    PreprocessConfig, QualityRating, RoiFilter, VideoMeta,
};
use crate::seed;
use crate::temporal::{window_starts, PackingConfig, Segment, GAP_TOLERANCE};
use crate::types::Label;
use crate::Tensor;

pub const FRAME_WIDTH: u32 = 640;
pub const FRAME_HEIGHT: u32 = 360;

/// Region of interest used for generated videos.
pub fn roi() -> RoiFilter {
    RoiFilter::new(BBox::new(160.0, 40.0, 320.0, 300.0), 2500.0).expect("static ROI")
}

/// Preprocessing settings matching the generator's frame layout.
pub fn preprocess_config(spec: &CohortSpec) -> PreprocessConfig {
    PreprocessConfig { fps_target: spec.fps_target, roi: roi() }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortSpec {
    pub n_participants: usize,
    /// Fraction of participants labelled MCI.
    pub class_balance: f64,
    /// Video length in frames at the target rate.
    pub frames_per_video: usize,
    pub mu_nc: f64,
    pub mu_mci: f64,
    /// Offset of the MCI mean expression.
    pub feature_shift: f64,
    /// Fraction of the full parameter range participant faces are drawn from.
    #[serde(default = "full_spread")]
    pub identity_spread: f64,
    /// Sequence size the cohort has to support.
    pub seq_len: usize,
    /// Mean gap between segments; gaps are never shorter than the tolerance.
    pub mean_gap: f64,
    /// Per-frame chance that a 1–2 frame detector miss starts inside a segment.
    pub dropout_rate: f64,
    pub fps_original: f64,
    pub fps_target: f64,
    pub theme: String,
    pub seed: u64,
}

fn full_spread() -> f64 {
    1.0
}

impl Default for CohortSpec {
    fn default() -> Self {
        Self {
            n_participants: 30,
            class_balance: 0.5,
            frames_per_video: 3000,
            mu_nc: 60.0,
            mu_mci: 25.0,
            feature_shift: 0.05,
            identity_spread: 1.0,
            seq_len: 15,
            mean_gap: 10.0,
            dropout_rate: 0.01,
            fps_original: 30.0,
            fps_target: 10.0,
            theme: "synthetic".into(),
            seed: 0,
        }
    }
}

impl CohortSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_participants == 0 || self.frames_per_video == 0 {
            return Err(Error::Config("cohort needs participants and frames".into()));
        }
        if !(self.class_balance > 0.0 && self.class_balance < 1.0) {
            return Err(Error::Config(format!("class balance {} outside (0, 1)", self.class_balance)));
        }
        for (name, mu) in [("NC", self.mu_nc), ("MCI", self.mu_mci)] {
            if !(mu >= self.seq_len as f64) {
                return Err(Error::Config(format!("{name} mean segment length {mu} below sequence size {}", self.seq_len)));
            }
        }
        if !(self.mean_gap >= GAP_TOLERANCE as f64) {
            return Err(Error::Config(format!("mean gap {} below {GAP_TOLERANCE}", self.mean_gap)));
        }
        if !(0.0..0.5).contains(&self.dropout_rate) || !self.feature_shift.is_finite() {
            return Err(Error::Config("dropout rate must lie in [0, 0.5) and the shift be finite".into()));
        }
        if !(self.identity_spread > 0.0 && self.identity_spread <= 1.0) {
            return Err(Error::Config(format!("identity spread {} outside (0, 1]", self.identity_spread)));
        }
        compute_frame_shift(self.fps_original, self.fps_target)?;
        Ok(())
    }

    pub fn n_mci(&self) -> usize {
        ((self.n_participants as f64 * self.class_balance).round() as usize).clamp(1, self.n_participants.saturating_sub(1).max(1))
    }

    fn mu(&self, label: Label) -> f64 {
        match label {
            Label::Nc => self.mu_nc,
            Label::Mci => self.mu_mci,
        }
    }
}

/// One generated video with its ground truth at the target frame rate.
#[derive(Clone, Debug)]
pub struct SyntheticVideo {
    pub meta: VideoMeta,
    pub records: Vec<DetectionRecord>,
    pub planted: Vec<Segment>,
}

#[derive(Clone, Debug)]
pub struct SyntheticParticipant {
    pub participant_id: String,
    pub label: Label,
    pub identity: Identity,
    pub video: SyntheticVideo,
}

#[derive(Clone, Debug)]
pub struct Cohort {
    pub spec: CohortSpec,
    pub participants: Vec<SyntheticParticipant>,
}

impl Cohort {
    pub fn videos(&self) -> impl Iterator<Item = &SyntheticVideo> {
        self.participants.iter().map(|p| &p.video)
    }
}

#[derive(Clone, Copy)]
enum FrameKind {
    Present,
    /// Detector miss inside a segment.
    Missed,
    /// Participant on screen but not facing the camera.
    Away,
    /// Interviewer view; the participant id overlay is hidden.
    Hidden,
}

fn geometric_len<R: Rng + ?Sized>(rng: &mut R, extra_mean: f64) -> usize {
    if extra_mean <= 0.0 {
        return 0;
    }
    Geometric::new(1.0 / (1.0 + extra_mean)).expect("probability in (0, 1]").sample(rng) as usize
}

/// Presence timeline and planted segments for one video.
fn plan_timeline(rng: &mut impl Rng, spec: &CohortSpec, mu: f64) -> (Vec<FrameKind>, Vec<Segment>) {
    let n = spec.frames_per_video;
    let mut kinds = vec![FrameKind::Away; n];
    let mut planted = Vec::new();
    let gap = |rng: &mut dyn rand::RngCore| GAP_TOLERANCE + geometric_len(rng, spec.mean_gap - GAP_TOLERANCE as f64);
    let mut t = rng.random_range(0..=spec.mean_gap as usize);
    let fill_gap = |kinds: &mut [FrameKind], from: usize, to: usize, rng: &mut dyn rand::RngCore| {
        let kind = if rng.random_bool(0.5) { FrameKind::Hidden } else { FrameKind::Away };
        kinds[from..to.min(n)].iter_mut().for_each(|k| *k = kind);
    };
    fill_gap(&mut kinds, 0, t, rng);
    while t < n {
        let span = 1 + geometric_len(rng, mu - 1.0);
        let end = (t + span).min(n) - 1;
        kinds[t..=end].iter_mut().for_each(|k| *k = FrameKind::Present);
        let mut i = t + 1;
        while i < end {
            if rng.random_bool(spec.dropout_rate) {
                let run = if rng.random_bool(0.5) { 2 } else { 1 };
                if i + run <= end {
                    kinds[i..i + run].iter_mut().for_each(|k| *k = FrameKind::Missed);
                }
                i += run + 1;
            } else {
                i += 1;
            }
        }
        let kept = (t..=end).filter(|&i| matches!(kinds[i], FrameKind::Present)).collect();
        planted.push(Segment { start_frame: t, end_frame: end, kept_frames: kept });
        let g = gap(rng);
        fill_gap(&mut kinds, end + 1, end + 1 + g, rng);
        t = end + 1 + g;
    }
    (kinds, planted)
}

/// Mean-reverting random walk of the expression and pose.
struct Dynamics {
    mean: Expression,
    expression: Expression,
    pose: Pose,
}

impl Dynamics {
    fn new(shift: f32) -> Self {
        let mean = Expression { mouth_open: 0.3 + shift, eye_open: 0.65 - shift, brow: shift };
        Self { mean, expression: mean, pose: Pose { tilt: 0.0, dx: 0.0, dy: 0.0 } }
    }

    fn step(&mut self, rng: &mut impl Rng) {
        let noise = Normal::new(0.0f32, 1.0).expect("unit normal");
        let mut walk = |x: f32, m: f32, sigma: f32| x + 0.15 * (m - x) + sigma * noise.sample(rng);
        let e = self.expression;
        self.expression = Expression {
            mouth_open: walk(e.mouth_open, self.mean.mouth_open, 0.08),
            eye_open: walk(e.eye_open, self.mean.eye_open, 0.06),
            brow: walk(e.brow, self.mean.brow, 0.08),
        }
        .clamped();
        let p = self.pose;
        self.pose = Pose { tilt: walk(p.tilt, 0.0, 0.03), dx: walk(p.dx, 0.0, 0.008), dy: walk(p.dy, 0.0, 0.008) }.clamped();
    }
}

fn crop(face: ProceduralFace) -> Option<CropSource> {
    Some(CropSource::Procedural(Arc::new(face)))
}

fn generate_participant(spec: &CohortSpec, index: usize, label: Label) -> SyntheticParticipant {
    let participant_id = format!("P{index:03}");
    let mut rng = seed::rng(spec.seed, &format!("synth/participant/{index}"));
    let identity = Identity::sample_with_spread(&mut rng, spec.identity_spread as f32);
    let interviewer = Identity::sample(&mut rng);
    let bystander = Identity::sample(&mut rng);
    let (kinds, planted) = plan_timeline(&mut rng, spec, spec.mu(label));

    let still = Expression { mouth_open: 0.2, eye_open: 0.7, brow: 0.0 };
    let level = Pose { tilt: 0.0, dx: 0.0, dy: 0.0 };
    let pip = Face { bbox: BBox::new(540.0, 260.0, 80.0, 80.0), crop: crop(ProceduralFace::new(interviewer.clone(), still, level, 80, 80)) };
    let host = Face { bbox: BBox::new(200.0, 40.0, 240.0, 280.0), crop: crop(ProceduralFace::new(interviewer, still, level, 240, 280)) };
    let small = Face { bbox: BBox::new(180.0, 60.0, 40.0, 45.0), crop: crop(ProceduralFace::new(bystander, still, level, 40, 45)) };

    let shift = compute_frame_shift(spec.fps_original, spec.fps_target).expect("validated spec").get();
    let width = 96 + rng.random_range(0..=24u32);
    let height = (width as f32 * 1.15).round() as u32;
    let face_shift = if label == Label::Mci { spec.feature_shift as f32 } else { 0.0 };
    let mut dynamics = Dynamics::new(face_shift);

    let mut records = Vec::with_capacity(kinds.len() * shift);
    for (t, kind) in kinds.iter().enumerate() {
        dynamics.step(&mut rng);
        let faces = match kind {
            FrameKind::Present => {
                let p = dynamics.pose;
                let bbox = BBox::new(
                    (320.0 - width as f32 / 2.0 + p.dx * width as f32).round(),
                    (190.0 - height as f32 / 2.0 + p.dy * height as f32).round(),
                    width as f32,
                    height as f32,
                );
                let face = ProceduralFace::new(identity.clone(), dynamics.expression, p, width, height);
                let mut faces = vec![pip.clone(), Face { bbox, crop: crop(face) }];
                if rng.random_bool(0.1) {
                    faces.push(small.clone());
                }
                faces
            }
            FrameKind::Missed | FrameKind::Away => vec![pip.clone()],
            FrameKind::Hidden => vec![host.clone()],
        };
        let visible = !matches!(kind, FrameKind::Hidden);
        for j in 0..shift {
            records.push(DetectionRecord { frame_index: t * shift + j, participant_id_visible: visible, faces: faces.clone() });
        }
    }

    let meta = VideoMeta {
        video_id: format!("{participant_id}_{}", spec.theme),
        participant_id: participant_id.clone(),
        theme: spec.theme.clone(),
        label,
        fps_original: spec.fps_original,
        frame_width: FRAME_WIDTH,
        frame_height: FRAME_HEIGHT,
        rating: QualityRating::VeryGood,
    };
    SyntheticParticipant { participant_id, label, identity, video: SyntheticVideo { meta, records, planted } }
}

/// Generate a cohort; participants are independent and built in parallel.
pub fn generate_cohort(spec: &CohortSpec) -> Result<Cohort> {
    spec.validate()?;
    let mut labels: Vec<Label> = (0..spec.n_participants).map(|i| if i < spec.n_mci() { Label::Mci } else { Label::Nc }).collect();
    labels.shuffle(&mut seed::rng(spec.seed, "synth/labels"));
    let participants = labels.par_iter().enumerate().map(|(i, &label)| generate_participant(spec, i, label)).collect();
    Ok(Cohort { spec: spec.clone(), participants })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortVideoEntry {
    pub meta: VideoMeta,
    /// Detection file relative to the cohort directory.
    pub detections: PathBuf,
    pub planted: Vec<Segment>,
}

/// `cohort.json`: the spec plus every video's metadata and ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortIndex {
    pub spec: CohortSpec,
    pub videos: Vec<CohortVideoEntry>,
}

impl CohortIndex {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("cohort.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        Ok(serde_json::from_str(&text)?)
    }
}

impl CohortVideoEntry {
    pub fn read_records(&self, cohort_dir: &Path) -> Result<Vec<DetectionRecord>> {
        read_detections(&cohort_dir.join(&self.detections))
    }
}

/// Write `cohort.json` and one detection file (with PNG crops) per video.
pub fn write_cohort(cohort: &Cohort, dir: &Path, storage: CropStorage) -> Result<CohortIndex> {
    fs::create_dir_all(dir)?;
    let mut videos = Vec::with_capacity(cohort.participants.len());
    for v in cohort.videos() {
        let rel = PathBuf::from("videos").join(&v.meta.video_id).join("detections.ndjson");
        fs::create_dir_all(dir.join(&rel).parent().expect("nested path"))?;
        write_detections(&dir.join(&rel), &v.records, storage)?;
        videos.push(CohortVideoEntry { meta: v.meta.clone(), detections: rel, planted: v.planted.clone() });
    }
    let index = CohortIndex { spec: cohort.spec.clone(), videos };
    fs::write(dir.join("cohort.json"), serde_json::to_vec_pretty(&index)?)?;
    Ok(index)
}

/// Face crops for autoencoder training: `per_participant` random present
/// frames from each participant, as `(participant id, [3, 96, 96])`.
pub fn sample_faces(cohort: &Cohort, per_participant: usize, seed_root: u64) -> Result<Vec<(String, Tensor<f32>)>> {
    let roi = roi();
    let shift = compute_frame_shift(cohort.spec.fps_original, cohort.spec.fps_target)?.get();
    let mut out = Vec::new();
    for p in &cohort.participants {
        let mut present: Vec<usize> = p.video.planted.iter().flat_map(|s| s.kept_frames.iter().copied()).collect();
        present.shuffle(&mut seed::rng(seed_root, &format!("synth/faces/{}", p.participant_id)));
        for &t in present.iter().take(per_participant) {
            let face = main_face(&p.video.records[t * shift], &roi)?.ok_or_else(|| Error::Data("planted frame without a face".into()))?;
            out.push((p.participant_id.clone(), face));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub label: Label,
    pub participants: usize,
    pub segments: usize,
    pub mean_segments_per_video: f64,
    pub mean_segment_len: f64,
    pub sequences: usize,
    pub mean_sequences_per_video: f64,
}

/// Per-class counts over the planted ground truth.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CohortSummary {
    pub rows: Vec<ClassSummary>,
}

pub fn describe_cohort(cohort: &Cohort, packing: &PackingConfig) -> CohortSummary {
    let mut groups: BTreeMap<Label, Vec<&SyntheticParticipant>> = BTreeMap::new();
    for p in &cohort.participants {
        groups.entry(p.label).or_default().push(p);
    }
    let rows = groups
        .into_iter()
        .map(|(label, ps)| {
            let n = ps.len() as f64;
            let segs: Vec<&Segment> = ps.iter().flat_map(|p| p.video.planted.iter()).collect();
            let kept: usize = segs.iter().map(|s| s.len()).sum();
            let sequences: usize = segs.iter().map(|s| window_starts(s.len(), packing).count()).sum();
            ClassSummary {
                label,
                participants: ps.len(),
                segments: segs.len(),
                mean_segments_per_video: segs.len() as f64 / n,
                mean_segment_len: if segs.is_empty() { 0.0 } else { kept as f64 / segs.len() as f64 },
                sequences,
                mean_sequences_per_video: sequences as f64 / n,
            }
        })
        .collect();
    CohortSummary { rows }
}

impl CohortSummary {
    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| Class | Participants | Segments | Segments/video | Mean segment length | Sequences | Sequences/video |\n");
        s.push_str("|---|---|---|---|---|---|---|\n");
        for r in &self.rows {
            s.push_str(&format!(
                "| {} | {} | {} | {:.2} | {:.2} | {} | {:.2} |\n",
                r.label, r.participants, r.segments, r.mean_segments_per_video, r.mean_segment_len, r.sequences, r.mean_sequences_per_video
            ));
        }
        s
    }
}
