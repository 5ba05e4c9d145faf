use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use rand::seq::SliceRandom;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cae::{Cae, LatentRecord, LatentStore, LATENT_DIM};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::seed;
use crate::preprocessing::{face_tensor, PreprocessedVideo, VideoMeta};
use crate::temporal::{extract_segments, structure_video, IndexedSequence, PackingConfig, GAP_TOLERANCE};
use crate::types::{video_key, Label};

/// A video reduced to its presence mask and the latents of its face frames.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedVideo {
    pub meta: VideoMeta,
    /// Presence of the main face per selected frame.
    pub mask: Vec<bool>,
    /// Latent per selected-frame index.
    pub latents: BTreeMap<usize, Vec<f32>>,
}

/// A packed sequence with its latents laid out row-major as `l × 128`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSequence {
    pub index: IndexedSequence,
    pub latents: Vec<f32>,
}

impl EncodedVideo {
    pub fn sequences(&self, packing: &PackingConfig) -> Result<Vec<EncodedSequence>> {
        let (_, seqs) = structure_video(&self.mask, packing);
        seqs.into_iter()
            .map(|index| {
                let mut latents = Vec::with_capacity(index.frames.len() * LATENT_DIM);
                for f in &index.frames {
                    let z = self
                        .latents
                        .get(f)
                        .ok_or_else(|| Error::Data(format!("{}: no latent for frame {f}", self.meta.video_id)))?;
                    latents.extend_from_slice(z);
                }
                Ok(EncodedSequence { index, latents })
            })
            .collect()
    }

    /// Rebuild from a latent store keyed by video id and selected-frame index.
    pub fn from_store(meta: VideoMeta, mask: Vec<bool>, store: &LatentStore) -> Self {
        let key = video_key(&meta.video_id);
        let latents = store
            .records()
            .iter()
            .filter(|r| r.video_key == key && mask.get(r.frame_index as usize) == Some(&true))
            .map(|r| (r.frame_index as usize, r.values.clone()))
            .collect();
        Self { meta, mask, latents }
    }

    pub fn latent_records(&self) -> Vec<LatentRecord> {
        let key = video_key(&self.meta.video_id);
        self.latents.iter().map(|(&f, z)| LatentRecord { video_key: key, frame_index: f as u32, values: z.clone() }).collect()
    }
}

/// Selected frames that lie in a segment of at least `min_segment_len` kept
/// frames; no shorter segment can yield a sequence.
pub fn frames_to_encode(mask: &[bool], min_segment_len: usize) -> Vec<usize> {
    extract_segments(mask, GAP_TOLERANCE)
        .into_iter()
        .filter(|s| s.len() >= min_segment_len)
        .flat_map(|s| s.kept_frames)
        .collect()
}

/// Encode the face frames of a preprocessed video.
pub fn encode_video(video: &PreprocessedVideo, cae: &Cae<f32>, min_segment_len: usize, batch: usize) -> Result<EncodedVideo> {
    let mask = video.mask();
    let frames = frames_to_encode(&mask, min_segment_len);
    let mut latents = BTreeMap::new();
    for chunk in frames.chunks(batch.max(1)) {
        let faces = chunk
            .iter()
            .map(|&f| {
                let src = video.faces[f].as_ref().and_then(|face| face.crop.as_ref());
                let src = src.ok_or_else(|| Error::Data(format!("{}: frame {f} has no crop", video.meta.video_id)))?;
                Ok(face_tensor(&src.load()?))
            })
            .collect::<Result<Vec<_>>>()?;
        for (&f, z) in chunk.iter().zip(cae.encode_faces(&faces, batch)?) {
            latents.insert(f, z);
        }
    }
    Ok(EncodedVideo { meta: video.meta.clone(), mask, latents })
}

/// SHA-256 over every video's id, label, theme, mask and latent bits, in id order.
pub fn dataset_hash(videos: &[EncodedVideo]) -> String {
    let mut order: Vec<&EncodedVideo> = videos.iter().collect();
    order.sort_by(|a, b| a.meta.video_id.cmp(&b.meta.video_id));
    let mut h = Sha256::new();
    for v in order {
        for field in [&v.meta.video_id, &v.meta.participant_id, &v.meta.theme] {
            h.update((field.len() as u64).to_le_bytes());
            h.update(field.as_bytes());
        }
        h.update([v.meta.label.class_index() as u8]);
        h.update((v.mask.len() as u64).to_le_bytes());
        h.update(v.mask.iter().map(|&b| b as u8).collect::<Vec<_>>());
        h.update((v.latents.len() as u64).to_le_bytes());
        for (&f, z) in &v.latents {
            h.update((f as u64).to_le_bytes());
            for x in z {
                h.update(x.to_le_bytes());
            }
        }
    }
    hex(&h.finalize())
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// A participant's videos within one theme.
#[derive(Clone, Debug)]
pub struct Participant<'a> {
    pub id: String,
    pub label: Label,
    pub theme: String,
    pub videos: Vec<&'a EncodedVideo>,
}

/// Group one theme's videos by participant; labels must agree per participant.
pub fn group_participants<'a>(videos: &[&'a EncodedVideo]) -> Result<Vec<Participant<'a>>> {
    let mut by_id: BTreeMap<&str, Participant<'a>> = BTreeMap::new();
    let themes: BTreeSet<&str> = videos.iter().map(|v| v.meta.theme.as_str()).collect();
    if themes.len() > 1 {
        return Err(Error::Data(format!("themes are evaluated separately, got {themes:?}")));
    }
    for v in videos {
        let p = by_id.entry(&v.meta.participant_id).or_insert_with(|| Participant {
            id: v.meta.participant_id.clone(),
            label: v.meta.label,
            theme: v.meta.theme.clone(),
            videos: Vec::new(),
        });
        if p.label != v.meta.label {
            return Err(Error::Data(format!("participant {} has conflicting labels", p.id)));
        }
        p.videos.push(v);
    }
    Ok(by_id.into_values().collect())
}

/// Serializable per-video entry of a preprocessing run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessedEntry {
    pub meta: VideoMeta,
    /// Detection file the entry was computed from.
    pub detections: PathBuf,
    pub source_frames: Vec<usize>,
    pub mask: Vec<bool>,
}

impl PreprocessedEntry {
    pub fn new(video: &PreprocessedVideo, detections: PathBuf) -> Self {
        Self { meta: video.meta.clone(), detections, source_frames: video.source_frames.clone(), mask: video.mask() }
    }
}

/// Up to `count` face tensors for autoencoder training, drawn round-robin
/// over participants from shuffled present frames.
pub fn sample_training_faces(videos: &[PreprocessedVideo], count: usize, seed_root: u64) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut pools: BTreeMap<&str, Vec<(usize, usize)>> = BTreeMap::new();
    for (v, video) in videos.iter().enumerate() {
        let pool = pools.entry(&video.meta.participant_id).or_default();
        pool.extend(video.faces.iter().enumerate().filter(|(_, f)| f.is_some()).map(|(i, _)| (v, i)));
    }
    for (pid, pool) in pools.iter_mut() {
        pool.shuffle(&mut seed::rng(seed_root, &format!("faces/{pid}")));
    }
    let mut picks = Vec::new();
    let mut round = 0;
    while picks.len() < count {
        let before = picks.len();
        for (pid, pool) in &pools {
            if let Some(&(v, i)) = pool.get(round) {
                if picks.len() < count {
                    picks.push((*pid, v, i));
                }
            }
        }
        if picks.len() == before {
            break;
        }
        round += 1;
    }
    picks
        .into_iter()
        .map(|(pid, v, i)| {
            let face = videos[v].faces[i].as_ref().expect("present frame");
            let src = face.crop.as_ref().ok_or_else(|| Error::Data(format!("{}: frame {i} has no crop", videos[v].meta.video_id)))?;
            Ok((pid.to_string(), face_tensor(&src.load()?)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocessing::QualityRating;

    pub(crate) fn meta(id: &str, label: Label) -> VideoMeta {
        VideoMeta {
            video_id: id.into(),
            participant_id: id.into(),
            theme: "t".into(),
            label,
            fps_original: 10.0,
            frame_width: 64,
            frame_height: 64,
            rating: QualityRating::Good,
        }
    }

    fn video(id: &str, mask: Vec<bool>) -> EncodedVideo {
        let latents = mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| (i, vec![i as f32; LATENT_DIM])).collect();
        EncodedVideo { meta: meta(id, Label::Nc), mask, latents }
    }

    #[test]
    fn sequences_gather_latents_in_order() {
        let mut mask = vec![true; 7];
        mask[2] = false;
        let v = video("a", mask);
        let seqs = v.sequences(&PackingConfig::new(3, 0.0).unwrap()).unwrap();
        assert_eq!(seqs.len(), 2);
        assert_eq!(seqs[0].index.frames, vec![0, 1, 3]);
        assert_eq!(seqs[0].latents[LATENT_DIM * 2], 3.0);
        assert_eq!(seqs[1].latents[0], 4.0);
        let mut broken = v.clone();
        broken.latents.remove(&3);
        assert!(broken.sequences(&PackingConfig::new(3, 0.0).unwrap()).is_err());
    }

    #[test]
    fn only_long_segments_are_encoded() {
        let mask = [true, true, false, false, false, true, true, true, true];
        assert_eq!(frames_to_encode(&mask, 3), vec![5, 6, 7, 8]);
        assert_eq!(frames_to_encode(&mask, 1).len(), 6);
    }

    #[test]
    fn store_round_trip_and_hash() {
        let a = video("a", vec![true, false, true]);
        let b = video("b", vec![true; 4]);
        let store = LatentStore::new(a.latent_records().into_iter().chain(b.latent_records()).collect());
        let back = EncodedVideo::from_store(a.meta.clone(), a.mask.clone(), &store);
        assert_eq!(back, a);
        let h = dataset_hash(&[a.clone(), b.clone()]);
        assert_eq!(h.len(), 64);
        assert_eq!(h, dataset_hash(&[b.clone(), a.clone()]));
        let mut c = b.clone();
        c.latents.get_mut(&0).unwrap()[5] = 0.5;
        assert_ne!(h, dataset_hash(&[a, c]));
    }

    #[test]
    fn grouping_checks_labels_and_themes() {
        let a = video("a", vec![true]);
        let mut a2 = video("a2", vec![true]);
        a2.meta.participant_id = "a".into();
        assert_eq!(group_participants(&[&a, &a2]).unwrap()[0].videos.len(), 2);
        a2.meta.label = Label::Mci;
        assert!(group_participants(&[&a, &a2]).is_err());
        let mut other = video("b", vec![true]);
        other.meta.theme = "u".into();
        assert!(group_participants(&[&a, &other]).is_err());
    }

    #[test]
    fn training_faces_alternate_participants() {
        use crate::preprocessing::preprocess_video;
        use crate::synth::{generate_cohort, preprocess_config, CohortSpec};
        let spec = CohortSpec { n_participants: 3, frames_per_video: 60, seed: 2, ..CohortSpec::default() };
        let cohort = generate_cohort(&spec).unwrap();
        let pcfg = preprocess_config(&spec);
        let videos: Vec<PreprocessedVideo> =
            cohort.videos().map(|v| preprocess_video(&v.meta, &v.records, &pcfg).unwrap().unwrap()).collect();
        let faces = sample_training_faces(&videos, 7, 4).unwrap();
        assert_eq!(faces.len(), 7);
        let ids: Vec<&str> = faces.iter().map(|f| f.0.as_str()).collect();
        assert_eq!(ids[..3].iter().collect::<std::collections::BTreeSet<_>>().len(), 3);
        assert!(faces.iter().all(|f| f.1.shape() == [3, 96, 96]));
        let again = sample_training_faces(&videos, 7, 4).unwrap();
        assert_eq!(faces, again);
        let present: usize = videos.iter().map(|v| v.faces.iter().flatten().count()).sum();
        assert_eq!(sample_training_faces(&videos, usize::MAX, 4).unwrap().len(), present);
    }
}
