//! Segments, fixed-length sequences and the `(p, M, S)` token indices.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::Label;

/// Consecutive face-absent frames that end a segment.
pub const GAP_TOLERANCE: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub start_frame: usize,
    pub end_frame: usize,
    pub kept_frames: Vec<usize>,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.kept_frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kept_frames.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PackingConfig {
    pub l: usize,
    pub overlap_fraction: f64,
}

impl Default for PackingConfig {
    fn default() -> Self {
        Self { l: 15, overlap_fraction: 0.0 }
    }
}

impl PackingConfig {
    pub fn new(l: usize, overlap_fraction: f64) -> Result<Self> {
        let cfg = Self { l, overlap_fraction };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.l < 2 {
            return Err(Error::Config(format!("sequence size {} must be at least 2", self.l)));
        }
        if !(0.0..1.0).contains(&self.overlap_fraction) {
            return Err(Error::Config(format!("overlap {} outside [0, 1)", self.overlap_fraction)));
        }
        if self.l as f64 - (self.l as f64 * self.overlap_fraction).round() < 1.0 {
            return Err(Error::Config(format!("overlap {} leaves no stride at l={}", self.overlap_fraction, self.l)));
        }
        Ok(())
    }

    /// `l − round(l · overlap)`.
    pub fn stride(&self) -> usize {
        self.l - (self.l as f64 * self.overlap_fraction).round() as usize
    }
}

/// Split a presence mask into segments, bridging gaps shorter than `gap_tolerance`.
pub fn extract_segments(mask: &[bool], gap_tolerance: usize) -> Vec<Segment> {
    let mut segments = Vec::new();
    let mut current: Option<Segment> = None;
    let mut absent = 0usize;
    for (i, &present) in mask.iter().enumerate() {
        if present {
            let seg = current.get_or_insert_with(|| Segment { start_frame: i, end_frame: i, kept_frames: Vec::new() });
            seg.kept_frames.push(i);
            seg.end_frame = i;
            absent = 0;
        } else {
            absent += 1;
            if absent >= gap_tolerance {
                segments.extend(current.take());
            }
        }
    }
    segments.extend(current);
    segments
}

/// Start offsets (into `kept_frames`) of the windows packed from a segment.
pub fn window_starts(kept: usize, cfg: &PackingConfig) -> impl Iterator<Item = usize> {
    let l = cfg.l;
    let upper = if kept >= l { kept - l + 1 } else { 0 };
    (0..upper).step_by(cfg.stride())
}

/// Windows of `l` consecutive kept frames.
pub fn pack_sequences(segment: &Segment, cfg: &PackingConfig) -> Vec<Vec<usize>> {
    window_starts(segment.len(), cfg).map(|s| segment.kept_frames[s..s + cfg.l].to_vec()).collect()
}

/// One window together with the ordinal of the segment it came from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Window {
    pub segment: usize,
    pub frames: Vec<usize>,
}

pub fn pack_video(segments: &[Segment], cfg: &PackingConfig) -> Vec<Window> {
    segments
        .iter()
        .enumerate()
        .flat_map(|(k, seg)| pack_sequences(seg, cfg).into_iter().map(move |frames| Window { segment: k, frames }))
        .collect()
}

/// A window with its sequence ordinal `M` and segment ordinal `S`.
///
/// `S` numbers only segments that contributed at least one window, so it
/// is dense from 0.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexedSequence {
    pub seq_index: usize,
    pub seg_index: usize,
    pub frames: Vec<usize>,
}

impl IndexedSequence {
    /// `(p, M, S)` for the class slot followed by every frame slot.
    pub fn triples(&self) -> Vec<(usize, usize, usize)> {
        (0..=self.frames.len()).map(|p| (p, self.seq_index, self.seg_index)).collect()
    }
}

pub fn index_video(windows: &[Window]) -> Vec<IndexedSequence> {
    let mut out = Vec::with_capacity(windows.len());
    let mut seg_ordinal = 0usize;
    let mut last_segment = None;
    for (m, w) in windows.iter().enumerate() {
        match last_segment {
            Some(prev) if prev == w.segment => {}
            Some(_) => seg_ordinal += 1,
            None => {}
        }
        last_segment = Some(w.segment);
        out.push(IndexedSequence { seq_index: m, seg_index: seg_ordinal, frames: w.frames.clone() });
    }
    out
}

/// Segments and indexed sequences for one presence mask.
pub fn structure_video(mask: &[bool], cfg: &PackingConfig) -> (Vec<Segment>, Vec<IndexedSequence>) {
    let segments = extract_segments(mask, GAP_TOLERANCE);
    let sequences = index_video(&pack_video(&segments, cfg));
    (segments, sequences)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InteractionSummary {
    pub num_segments: usize,
    pub num_sequences: usize,
    pub mean_segment_len: f64,
}

pub fn interaction_summary(segments: &[Segment], num_sequences: usize) -> InteractionSummary {
    let total: usize = segments.iter().map(Segment::len).sum();
    let mean_segment_len = if segments.is_empty() { 0.0 } else { total as f64 / segments.len() as f64 };
    InteractionSummary { num_segments: segments.len(), num_sequences, mean_segment_len }
}

/// One line of the sequence manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceRecord {
    pub video_id: String,
    pub seq_index: usize,
    pub seg_index: usize,
    pub frame_indices: Vec<usize>,
    pub label: Label,
}

pub fn write_manifest(path: &Path, records: &[SequenceRecord]) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<SequenceRecord>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line).map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), n + 1)))?);
        }
    }
    Ok(out)
}
