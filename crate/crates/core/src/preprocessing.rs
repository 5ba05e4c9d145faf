//! Detection records → rate-normalized, quality-gated, main-face-only frame
//! streams.
//!
//! Text and face detectors are external: their output arrives as
//! [`DetectionRecord`]s, one per original frame.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use base64::Engine;
use image::imageops::FilterType;
use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::types::Label;

/// Side length of the face crops fed to the autoencoder.
pub const CROP_SIZE: usize = 96;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f32,
    pub y: f32,
    pub w: f32,
    pub h: f32,
}

impl BBox {
    pub fn new(x: f32, y: f32, w: f32, h: f32) -> Self {
        Self { x, y, w, h }
    }

    pub fn area(&self) -> f32 {
        self.w * self.h
    }

    pub fn center(&self) -> (f32, f32) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn contains_point(&self, px: f32, py: f32) -> bool {
        px >= self.x && px <= self.x + self.w && py >= self.y && py <= self.y + self.h
    }

    pub fn within(&self, width: u32, height: u32) -> bool {
        self.x >= 0.0 && self.y >= 0.0 && self.w > 0.0 && self.h > 0.0 && self.x + self.w <= width as f32 && self.y + self.h <= height as f32
    }
}

impl std::str::FromStr for BBox {
    type Err = Error;

    /// Parses `x,y,w,h`.
    fn from_str(s: &str) -> Result<Self> {
        let v: Vec<f32> = s
            .split(',')
            .map(|t| t.trim().parse::<f32>())
            .collect::<Result<_, _>>()
            .map_err(|_| Error::Config(format!("bounding box {s:?} is not x,y,w,h")))?;
        match v[..] {
            [x, y, w, h] => Ok(BBox::new(x, y, w, h)),
            _ => Err(Error::Config(format!("bounding box {s:?} is not x,y,w,h"))),
        }
    }
}

/// Renders a crop on demand (procedural sources).
pub trait RenderCrop: Send + Sync {
    fn render(&self) -> RgbImage;
}

/// Where a face's pixels come from. Decoding is deferred until the crop is used.
#[derive(Clone)]
pub enum CropSource {
    Pixels(Arc<RgbImage>),
    Png(Arc<[u8]>),
    File(PathBuf),
    Procedural(Arc<dyn RenderCrop>),
}

impl fmt::Debug for CropSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CropSource::Pixels(img) => write!(f, "Pixels({}x{})", img.width(), img.height()),
            CropSource::Png(b) => write!(f, "Png({} bytes)", b.len()),
            CropSource::File(p) => write!(f, "File({})", p.display()),
            CropSource::Procedural(_) => f.write_str("Procedural"),
        }
    }
}

impl CropSource {
    pub fn load(&self) -> Result<RgbImage> {
        Ok(match self {
            CropSource::Pixels(img) => (**img).clone(),
            CropSource::Png(bytes) => image::load_from_memory(bytes)?.to_rgb8(),
            CropSource::File(path) => image::open(path)?.to_rgb8(),
            CropSource::Procedural(r) => r.render(),
        })
    }
}

#[derive(Clone, Debug)]
pub struct Face {
    pub bbox: BBox,
    pub crop: Option<CropSource>,
}

/// Detector output for one original frame.
#[derive(Clone, Debug)]
pub struct DetectionRecord {
    pub frame_index: usize,
    /// Text-detector surrogate: the participant id overlay is on screen.
    pub participant_id_visible: bool,
    pub faces: Vec<Face>,
}

/// Manual video rating; only `VeryGood` and `Good` pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum QualityRating {
    VeryGood = 1,
    Good = 2,
    Ok = 3,
    Poor = 4,
    VeryPoor = 5,
}

impl QualityRating {
    pub const ALL: [QualityRating; 5] = [Self::VeryGood, Self::Good, Self::Ok, Self::Poor, Self::VeryPoor];

    pub fn level(self) -> u8 {
        self as u8
    }
}

impl TryFrom<u8> for QualityRating {
    type Error = Error;
    fn try_from(v: u8) -> Result<Self> {
        Self::ALL.get((v as usize).wrapping_sub(1)).copied().ok_or_else(|| Error::Data(format!("quality level {v} outside 1..=5")))
    }
}

impl From<QualityRating> for u8 {
    fn from(q: QualityRating) -> u8 {
        q.level()
    }
}

pub fn gate_quality(rating: QualityRating) -> bool {
    matches!(rating, QualityRating::VeryGood | QualityRating::Good)
}

/// Area of interest for the participant's face.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiFilter {
    pub region: BBox,
    pub min_face_area: f32,
}

impl RoiFilter {
    pub fn new(region: BBox, min_face_area: f32) -> Result<Self> {
        if !(min_face_area > 0.0) || region.w <= 0.0 || region.h <= 0.0 {
            return Err(Error::Config(format!("invalid ROI {region:?} / min area {min_face_area}")));
        }
        Ok(Self { region, min_face_area })
    }

    pub fn validate_for(&self, width: u32, height: u32) -> Result<()> {
        if !self.region.within(width, height) {
            return Err(Error::Config(format!("ROI {:?} exceeds {width}x{height} frame", self.region)));
        }
        Ok(())
    }

    pub fn admits(&self, face: &BBox) -> bool {
        let (cx, cy) = face.center();
        self.region.contains_point(cx, cy) && face.area() >= self.min_face_area
    }
}

/// Stride between selected original frames; always ≥ 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FrameShift(usize);

impl FrameShift {
    pub fn new(shift: usize) -> Option<Self> {
        (shift >= 1).then_some(Self(shift))
    }

    pub fn get(self) -> usize {
        self.0
    }
}

/// `floor(fps_original / fps_target)`. Upsampling is rejected.
pub fn compute_frame_shift(fps_original: f64, fps_target: f64) -> Result<FrameShift> {
    if !(fps_target > 0.0) || !fps_original.is_finite() || !fps_target.is_finite() {
        return Err(Error::Config(format!("frame rates must be positive, got {fps_original} / {fps_target}")));
    }
    if fps_target > fps_original {
        return Err(Error::Config(format!("target {fps_target} fps exceeds original {fps_original} fps")));
    }
    let shift = (fps_original / fps_target).floor() as usize;
    Ok(FrameShift(shift.max(1)))
}

/// Indices `0, shift, 2·shift, … < frame_count`.
pub fn select_frames(frame_count: usize, shift: FrameShift) -> Vec<usize> {
    (0..frame_count).step_by(shift.0).collect()
}

/// The largest admitted face, when the participant id is on screen.
pub fn select_main_face<'a>(record: &'a DetectionRecord, filter: &RoiFilter) -> Option<&'a Face> {
    if !record.participant_id_visible {
        return None;
    }
    let mut best: Option<&Face> = None;
    for face in record.faces.iter().filter(|f| filter.admits(&f.bbox)) {
        if best.is_none_or(|b| face.bbox.area() > b.bbox.area()) {
            best = Some(face);
        }
    }
    best
}

/// Main face of `record`, resized to `CROP_SIZE²` and scaled to `[0, 1]`,
/// as a `[3, 96, 96]` tensor. `Ok(None)` when there is no main face or it
/// carries no pixels.
pub fn main_face(record: &DetectionRecord, filter: &RoiFilter) -> Result<Option<Tensor<f32>>> {
    match select_main_face(record, filter).and_then(|f| f.crop.as_ref()) {
        Some(src) => Ok(Some(face_tensor(&src.load()?))),
        None => Ok(None),
    }
}

/// Bilinear resize to `CROP_SIZE²`, channel-major, values in `[0, 1]`.
pub fn face_tensor(img: &RgbImage) -> Tensor<f32> {
    let n = CROP_SIZE as u32;
    let resized;
    let img = if img.width() == n && img.height() == n {
        img
    } else {
        resized = image::imageops::resize(img, n, n, FilterType::Triangle);
        &resized
    };
    let hw = CROP_SIZE * CROP_SIZE;
    let mut data = vec![0.0f32; 3 * hw];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * hw + i] = px.0[c] as f32 / 255.0;
        }
    }
    Tensor::new(vec![3, CROP_SIZE, CROP_SIZE], data).expect("crop tensor shape")
}

pub fn presence_mask<F>(frames: &[Option<F>]) -> Vec<bool> {
    frames.iter().map(Option::is_some).collect()
}

/// Per-video metadata that travels with the detection stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoMeta {
    pub video_id: String,
    pub participant_id: String,
    pub theme: String,
    pub label: Label,
    pub fps_original: f64,
    pub frame_width: u32,
    pub frame_height: u32,
    pub rating: QualityRating,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub fps_target: f64,
    pub roi: RoiFilter,
}

/// Selected-frame stream of one accepted video.
#[derive(Clone, Debug)]
pub struct PreprocessedVideo {
    pub meta: VideoMeta,
    /// Original frame index of every selected frame.
    pub source_frames: Vec<usize>,
    /// Main face of every selected frame.
    pub faces: Vec<Option<Face>>,
}

impl PreprocessedVideo {
    pub fn mask(&self) -> Vec<bool> {
        presence_mask(&self.faces)
    }
}

pub fn validate_records(meta: &VideoMeta, records: &[DetectionRecord]) -> Result<()> {
    for pair in records.windows(2) {
        if pair[1].frame_index <= pair[0].frame_index {
            return Err(Error::Data(format!(
                "{}: frame indices not strictly increasing at {}",
                meta.video_id, pair[1].frame_index
            )));
        }
    }
    for r in records {
        if let Some(f) = r.faces.iter().find(|f| !f.bbox.within(meta.frame_width, meta.frame_height)) {
            return Err(Error::Data(format!("{}: frame {} bbox {:?} outside frame", meta.video_id, r.frame_index, f.bbox)));
        }
    }
    Ok(())
}

/// Quality gate, frame selection and main-face filtering for one video.
/// `Ok(None)` when the video is excluded (failed gate or no accepted frame).
pub fn preprocess_video(meta: &VideoMeta, records: &[DetectionRecord], cfg: &PreprocessConfig) -> Result<Option<PreprocessedVideo>> {
    validate_records(meta, records)?;
    if !gate_quality(meta.rating) {
        return Ok(None);
    }
    cfg.roi.validate_for(meta.frame_width, meta.frame_height)?;
    let shift = compute_frame_shift(meta.fps_original, cfg.fps_target)?;
    let frame_count = records.last().map_or(0, |r| r.frame_index + 1);
    let source_frames = select_frames(frame_count, shift);
    let faces: Vec<Option<Face>> = source_frames
        .iter()
        .map(|&idx| {
            records
                .binary_search_by_key(&idx, |r| r.frame_index)
                .ok()
                .and_then(|i| select_main_face(&records[i], &cfg.roi).cloned())
        })
        .collect();
    if faces.iter().all(Option::is_none) {
        return Ok(None);
    }
    Ok(Some(PreprocessedVideo { meta: meta.clone(), source_frames, faces }))
}

#[derive(Serialize, Deserialize)]
struct FaceLine {
    bbox: [f32; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    crop: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    crop_b64: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct RecordLine {
    frame_index: usize,
    participant_id_visible: bool,
    faces: Vec<FaceLine>,
}

/// How crops are stored when writing a detection file.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CropStorage {
    /// PNG files in a `crops/` directory next to the detection file.
    Sidecar,
    /// Base64 PNG inside each JSON line.
    Inline,
}

fn png_bytes(img: &RgbImage) -> Result<Vec<u8>> {
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)?;
    Ok(out.into_inner())
}

/// Write newline-delimited JSON detections to `path`.
pub fn write_detections(path: &Path, records: &[DetectionRecord], storage: CropStorage) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let crop_dir = dir.join("crops");
    if storage == CropStorage::Sidecar && records.iter().any(|r| r.faces.iter().any(|f| f.crop.is_some())) {
        fs::create_dir_all(&crop_dir)?;
    }
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for r in records {
        let mut faces = Vec::with_capacity(r.faces.len());
        for (k, f) in r.faces.iter().enumerate() {
            let mut line = FaceLine { bbox: [f.bbox.x, f.bbox.y, f.bbox.w, f.bbox.h], crop: None, crop_b64: None };
            if let Some(src) = &f.crop {
                let bytes = png_bytes(&src.load()?)?;
                match storage {
                    CropStorage::Inline => line.crop_b64 = Some(base64::engine::general_purpose::STANDARD.encode(&bytes)),
                    CropStorage::Sidecar => {
                        let name = format!("crops/{:06}_{k}.png", r.frame_index);
                        fs::write(dir.join(&name), &bytes)?;
                        line.crop = Some(name);
                    }
                }
            }
            faces.push(line);
        }
        let line = RecordLine { frame_index: r.frame_index, participant_id_visible: r.participant_id_visible, faces };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Read a detection file; sidecar crop paths resolve relative to its directory.
pub fn read_detections(path: &Path) -> Result<Vec<DetectionRecord>> {
    let dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let reader = BufReader::new(fs::File::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?);
    let mut records = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RecordLine =
            serde_json::from_str(&line).map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), n + 1)))?;
        let mut faces = Vec::with_capacity(rec.faces.len());
        for f in rec.faces {
            let crop = match (f.crop, f.crop_b64) {
                (_, Some(b64)) => Some(CropSource::Png(
                    base64::engine::general_purpose::STANDARD
                        .decode(b64)
                        .map_err(|e| Error::Format(format!("{}:{}: bad base64 crop: {e}", path.display(), n + 1)))?
                        .into(),
                )),
                (Some(rel), None) => Some(CropSource::File(dir.join(rel))),
                (None, None) => None,
            };
            faces.push(Face { bbox: BBox::new(f.bbox[0], f.bbox[1], f.bbox[2], f.bbox[3]), crop });
        }
        records.push(DetectionRecord { frame_index: rec.frame_index, participant_id_visible: rec.participant_id_visible, faces });
    }
    Ok(records)
}
