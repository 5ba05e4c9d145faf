use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::dataset::{dataset_hash, group_participants, hex, EncodedSequence, EncodedVideo};
use super::folds::{check_fold_hygiene, make_folds, FoldPlan};
use super::metrics::{classify_video, metrics, Metrics};
use crate::error::{Error, Result};
use crate::report::{MetricKind, ReportTable};
use crate::seed;
use crate::temporal::PackingConfig;
use crate::transformer::{
    predict, train_transformer, LossKind, PositionMode, SequenceInput, TrainReport, Transformer, TransformerConfig, TransformerTrainConfig,
};
use crate::types::Label;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvConfig {
    pub folds: usize,
    pub packing: PackingConfig,
    pub transformer: TransformerConfig,
    /// Training hyperparameters; the seed is replaced per fold.
    pub train: TransformerTrainConfig,
    pub predict_batch: usize,
    pub seed: u64,
}

impl CvConfig {
    pub fn new(seed: u64) -> Self {
        let packing = PackingConfig::default();
        Self {
            folds: 10,
            packing,
            transformer: TransformerConfig::new(packing.l),
            train: TransformerTrainConfig::default(),
            predict_batch: 64,
            seed,
        }
    }

    /// Change the sequence size and the slot table with it.
    pub fn with_seq_len(mut self, l: usize) -> Self {
        self.packing.l = l;
        self.transformer.max_positions = l + 1;
        self
    }

    pub fn with_positions(mut self, positions: PositionMode) -> Self {
        self.transformer.positions = positions;
        self
    }

    pub fn with_loss(mut self, loss: LossKind) -> Self {
        self.train.loss = loss;
        self
    }

    pub fn with_overlap(mut self, overlap_fraction: f64) -> Self {
        self.packing.overlap_fraction = overlap_fraction;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.packing.validate()?;
        self.transformer.validate()?;
        if self.folds < 2 || self.predict_batch == 0 || self.train.batch_size == 0 {
            return Err(Error::Config("folds must be ≥ 2 and batch sizes positive".into()));
        }
        if self.transformer.max_positions < self.packing.l + 1 {
            return Err(Error::Config(format!(
                "slot table of {} rows cannot hold sequences of {}",
                self.transformer.max_positions, self.packing.l
            )));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoPrediction {
    pub video_id: String,
    pub participant_id: String,
    pub fold: usize,
    pub label: Label,
    pub predicted: Label,
    /// Fraction of sequences predicted MCI.
    pub score: f64,
    pub mean_probability: f64,
    /// Segment ordinal of every sequence, in sequence order.
    pub segment_trace: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub train_participants: Vec<String>,
    pub test_participants: Vec<String>,
    pub train_sequences: usize,
    pub beta: f64,
    pub final_loss: Option<f64>,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThemeReport {
    pub theme: String,
    pub plan: FoldPlan,
    pub folds: Vec<FoldReport>,
    pub videos: Vec<VideoPrediction>,
    /// Videos without a single sequence.
    pub excluded_videos: Vec<String>,
    /// Pooled over every fold's held-out videos.
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: CvConfig,
    pub config_hash: String,
    pub dataset_hash: String,
    pub seed: u64,
    pub themes: Vec<ThemeReport>,
}

impl EvalReport {
    pub fn to_json(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec_pretty(self).expect("report serializes");
        out.push(b'\n');
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn theme(&self, name: &str) -> Option<&ThemeReport> {
        self.themes.iter().find(|t| t.theme == name)
    }
}

struct PreparedVideo<'a> {
    video: &'a EncodedVideo,
    sequences: Vec<EncodedSequence>,
}

fn inputs(seqs: &[EncodedSequence]) -> impl Iterator<Item = SequenceInput<'_, f32>> {
    seqs.iter().map(|s| SequenceInput::new(&s.latents[..], s.index.seq_index, s.index.seg_index))
}

fn run_fold(
    theme: &str,
    fold: usize,
    prepared: &[PreparedVideo<'_>],
    plan: &FoldPlan,
    labels: &BTreeMap<String, Label>,
    cfg: &CvConfig,
) -> Result<(FoldReport, Vec<VideoPrediction>)> {
    let test: Vec<&str> = plan.members(fold);
    let train: Vec<&str> = plan.assignments.iter().filter(|(_, &f)| f != fold).map(|(p, _)| p.as_str()).collect();
    check_fold_hygiene(plan, labels, fold, &train, &test)?;

    let in_fold = |v: &PreparedVideo| plan.fold_of(&v.video.meta.participant_id) == Some(fold);
    let mut data = Vec::new();
    for v in prepared.iter().filter(|v| !in_fold(v)) {
        data.extend(inputs(&v.sequences).map(|s| (s, v.video.meta.label)));
    }
    let train_cfg = TransformerTrainConfig { seed: seed::derive(cfg.seed, &format!("cv/{theme}/fold/{fold}")), ..cfg.train.clone() };
    let context = |e| match e {
        Error::Numeric(msg) => Error::Numeric(format!("theme {theme}, fold {fold}: {msg}")),
        other => other,
    };
    let (model, report) = train_transformer(cfg.transformer.clone(), &data, &train_cfg).map_err(context)?;

    let mut predictions = Vec::new();
    for v in prepared.iter().filter(|v| in_fold(v)) {
        let seqs: Vec<SequenceInput<f32>> = inputs(&v.sequences).collect();
        let probs = predict(&model, &seqs, cfg.predict_batch).map_err(context)?;
        let d = classify_video(&probs)?;
        predictions.push(VideoPrediction {
            video_id: v.video.meta.video_id.clone(),
            participant_id: v.video.meta.participant_id.clone(),
            fold,
            label: v.video.meta.label,
            predicted: d.label,
            score: d.score,
            mean_probability: d.mean_probability,
            segment_trace: v.sequences.iter().map(|s| s.index.seg_index).collect(),
        });
    }
    let fold_metrics = video_metrics(&predictions)?;
    let fold_report = FoldReport {
        fold,
        train_participants: train.iter().map(|s| s.to_string()).collect(),
        test_participants: test.iter().map(|s| s.to_string()).collect(),
        train_sequences: data.len(),
        beta: report.beta,
        final_loss: report.epoch_loss.last().copied(),
        metrics: fold_metrics,
    };
    Ok((fold_report, predictions))
}

fn video_metrics(v: &[VideoPrediction]) -> Result<Metrics> {
    let predicted: Vec<Label> = v.iter().map(|p| p.predicted).collect();
    let scores: Vec<f64> = v.iter().map(|p| p.score).collect();
    let labels: Vec<Label> = v.iter().map(|p| p.label).collect();
    metrics(&predicted, &scores, &labels)
}

fn run_theme(theme: &str, videos: &[&EncodedVideo], cfg: &CvConfig) -> Result<ThemeReport> {
    let mut prepared = Vec::with_capacity(videos.len());
    let mut excluded_videos = Vec::new();
    for &video in videos {
        let sequences = video.sequences(&cfg.packing)?;
        if sequences.is_empty() {
            log::warn!("{}: no sequence of {} frames, video excluded", video.meta.video_id, cfg.packing.l);
            excluded_videos.push(video.meta.video_id.clone());
        } else {
            prepared.push(PreparedVideo { video, sequences });
        }
    }
    let usable: Vec<&EncodedVideo> = prepared.iter().map(|p| p.video).collect();
    let participants = group_participants(&usable)?;
    let roster: Vec<(String, Label)> = participants.iter().map(|p| (p.id.clone(), p.label)).collect();
    let labels: BTreeMap<String, Label> = roster.iter().cloned().collect();
    let plan = make_folds(&roster, cfg.folds, seed::derive(cfg.seed, &format!("cv/{theme}")))?;

    let outcomes: Vec<(FoldReport, Vec<VideoPrediction>)> = (0..cfg.folds)
        .into_par_iter()
        .map(|fold| run_fold(theme, fold, &prepared, &plan, &labels, cfg))
        .collect::<Result<_>>()?;
    let mut folds = Vec::with_capacity(outcomes.len());
    let mut pooled = Vec::new();
    for (report, preds) in outcomes {
        folds.push(report);
        pooled.extend(preds);
    }
    let metrics = video_metrics(&pooled)?;
    Ok(ThemeReport { theme: theme.to_string(), plan, folds, videos: pooled, excluded_videos, metrics })
}

/// Participant-level k-fold cross-validation, run separately per theme.
pub fn run_cv(videos: &[EncodedVideo], cfg: &CvConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let mut themes: BTreeMap<&str, Vec<&EncodedVideo>> = BTreeMap::new();
    for v in videos {
        themes.entry(&v.meta.theme).or_default().push(v);
    }
    if themes.is_empty() {
        return Err(Error::Data("no videos to evaluate".into()));
    }
    let themes = themes.into_iter().map(|(t, vs)| run_theme(t, &vs, cfg)).collect::<Result<Vec<_>>>()?;
    Ok(EvalReport { config: cfg.clone(), config_hash: cfg.hash(), dataset_hash: dataset_hash(videos), seed: cfg.seed, themes })
}

/// Train one model on every sequence of every video, outside cross-validation.
pub fn train_all(videos: &[EncodedVideo], cfg: &CvConfig) -> Result<(Transformer<f32>, TrainReport)> {
    cfg.validate()?;
    let mut sequences = Vec::with_capacity(videos.len());
    for v in videos {
        sequences.push((v.meta.label, v.sequences(&cfg.packing)?));
    }
    let data: Vec<(SequenceInput<f32>, Label)> = sequences.iter().flat_map(|(l, s)| inputs(s).map(|x| (x, *l))).collect();
    let train_cfg = TransformerTrainConfig { seed: seed::derive(cfg.seed, "train/all"), ..cfg.train.clone() };
    train_transformer(cfg.transformer.clone(), &data, &train_cfg)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationAxis {
    Seqlen,
    Overlap,
    Loss,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 3] = [Self::Seqlen, Self::Overlap, Self::Loss];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Seqlen => "seqlen",
            Self::Overlap => "overlap",
            Self::Loss => "loss",
        }
    }

    /// Column labels and configurations of the grid around `base`.
    pub fn grid(self, base: &CvConfig) -> Vec<(String, CvConfig)> {
        match self {
            Self::Seqlen => [15, 20, 25].into_iter().map(|l| (l.to_string(), base.clone().with_seq_len(l))).collect(),
            Self::Overlap => [(0, 0.0), (20, 0.2), (40, 0.4)]
                .into_iter()
                .map(|(pct, f)| (format!("{pct}%"), base.clone().with_overlap(f)))
                .collect(),
            Self::Loss => [("weighted BCE", LossKind::Wbce), ("BCE", LossKind::Bce)]
                .into_iter()
                .map(|(name, loss)| (name.to_string(), base.clone().with_loss(loss)))
                .collect(),
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            Self::Seqlen => "sequence size",
            Self::Overlap => "sequence overlapping percentage",
            Self::Loss => "loss function",
        }
    }

    /// Metrics shown per column.
    pub fn shown(self) -> &'static [MetricKind] {
        match self {
            Self::Seqlen => &MetricKind::ALL,
            Self::Overlap | Self::Loss => &[MetricKind::Accuracy],
        }
    }
}

impl std::str::FromStr for AblationAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|a| a.as_str() == s).ok_or_else(|| Error::Config(format!("unknown ablation axis {s:?}")))
    }
}

/// Evaluate the given axes; identical configurations are run once.
pub fn run_ablations(videos: &[EncodedVideo], base: &CvConfig, axes: &[AblationAxis]) -> Result<Vec<(ReportTable, Vec<EvalReport>)>> {
    let mut cache: HashMap<String, EvalReport> = HashMap::new();
    let mut out = Vec::new();
    for &axis in axes {
        let mut reports = Vec::new();
        let mut columns = Vec::new();
        for (label, cfg) in axis.grid(base) {
            let key = cfg.hash();
            let report = match cache.get(&key) {
                Some(r) => r.clone(),
                None => {
                    let r = run_cv(videos, &cfg)?;
                    cache.insert(key, r.clone());
                    r
                }
            };
            columns.push(label);
            reports.push(report);
        }
        let table = ReportTable::from_reports(axis.title(), axis.shown(), &columns, &reports);
        out.push((table, reports));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cae::LATENT_DIM;
    use crate::preprocessing::{QualityRating, VideoMeta};
    use crate::seed;
    use rand::Rng;

    /// Videos whose latents carry a class offset, with `segments` runs of
    /// `seg_len` face frames separated by 4-frame gaps.
    pub(crate) fn toy_videos(n: usize, mci: usize, segments: usize, seg_len: usize, shift: f32, seed_root: u64) -> Vec<EncodedVideo> {
        let mut rng = seed::rng(seed_root, "toy");
        (0..n)
            .map(|i| {
                let label = if i < mci { Label::Mci } else { Label::Nc };
                let mut mask = Vec::new();
                for _ in 0..segments {
                    mask.extend(std::iter::repeat_n(true, seg_len));
                    mask.extend([false; 4]);
                }
                let offset = if label == Label::Mci { shift } else { -shift };
                let latents = mask
                    .iter()
                    .enumerate()
                    .filter(|(_, &m)| m)
                    .map(|(f, _)| (f, (0..LATENT_DIM).map(|_| rng.random_range(-1.0..1.0f32) + offset).collect()))
                    .collect();
                let meta = VideoMeta {
                    video_id: format!("v{i:02}"),
                    participant_id: format!("p{i:02}"),
                    theme: "toy".into(),
                    label,
                    fps_original: 10.0,
                    frame_width: 64,
                    frame_height: 64,
                    rating: QualityRating::Good,
                };
                EncodedVideo { meta, mask, latents }
            })
            .collect()
    }

    pub(crate) fn tiny_config(seed: u64) -> CvConfig {
        let mut cfg = CvConfig::new(seed).with_seq_len(4);
        cfg.folds = 5;
        cfg.transformer.num_layers = 1;
        cfg.transformer.ff_mult = 1;
        cfg.transformer.max_sequences = 16;
        cfg.transformer.max_segments = 16;
        cfg.train.epochs = 4;
        cfg.train.lr = 1e-3;
        cfg.train.batch_size = 8;
        cfg
    }

    #[test]
    fn report_shape_and_hygiene() {
        let videos = toy_videos(10, 5, 2, 8, 0.5, 1);
        let cfg = tiny_config(3);
        let report = run_cv(&videos, &cfg).unwrap();
        assert_eq!(report.themes.len(), 1);
        let t = &report.themes[0];
        assert_eq!(t.folds.len(), 5);
        assert_eq!(t.videos.len(), 10);
        assert_eq!(t.metrics.n, 10);
        for f in &t.folds {
            assert!(f.test_participants.iter().all(|p| !f.train_participants.contains(p)));
            assert_eq!(f.train_participants.len() + f.test_participants.len(), 10);
            // 4 train participants per class, 4 sequences each.
            assert_eq!(f.beta, 1.0);
            assert_eq!(f.train_sequences, 32);
        }
        assert!(t.videos.iter().all(|v| v.segment_trace == vec![0, 0, 1, 1]));
        assert!((0.0..=1.0).contains(&t.metrics.accuracy));
        assert_eq!(report.seed, 3);
        assert_eq!(report.config_hash, cfg.hash());
    }

    #[test]
    fn reports_are_byte_identical() {
        let videos = toy_videos(10, 5, 2, 8, 0.3, 2);
        let cfg = tiny_config(5);
        let a = run_cv(&videos, &cfg).unwrap().to_json();
        let b = run_cv(&videos, &cfg).unwrap().to_json();
        assert_eq!(a, b);
        let c = run_cv(&videos, &tiny_config(6)).unwrap().to_json();
        assert_ne!(a, c);
    }

    #[test]
    fn unit_beta_makes_losses_identical() {
        let videos = toy_videos(10, 5, 2, 8, 0.3, 4);
        let cfg = tiny_config(7);
        let w = run_cv(&videos, &cfg.clone().with_loss(LossKind::Wbce)).unwrap();
        let b = run_cv(&videos, &cfg.with_loss(LossKind::Bce)).unwrap();
        assert!(w.themes[0].folds.iter().all(|f| f.beta == 1.0));
        assert_eq!(w.themes, b.themes);
    }

    #[test]
    fn empty_videos_are_excluded() {
        let mut videos = toy_videos(11, 5, 2, 8, 0.3, 5);
        videos[10].mask = vec![true, true, false, false, false];
        videos[10].latents.retain(|f, _| *f < 2);
        let report = run_cv(&videos, &tiny_config(1)).unwrap();
        assert_eq!(report.themes[0].excluded_videos, vec!["v10".to_string()]);
        assert_eq!(report.themes[0].videos.len(), 10);
    }

    #[test]
    fn invalid_inputs() {
        assert!(run_cv(&[], &tiny_config(0)).is_err());
        let videos = toy_videos(4, 2, 2, 8, 0.3, 5);
        assert!(matches!(run_cv(&videos, &tiny_config(0)), Err(Error::Data(_))));
        let mut cfg = tiny_config(0);
        cfg.transformer.max_positions = 3;
        assert!(matches!(run_cv(&toy_videos(10, 5, 2, 8, 0.3, 5), &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn divergence_aborts_with_fold_context() {
        let mut videos = toy_videos(10, 5, 2, 8, 0.3, 6);
        for z in videos[0].latents.values_mut() {
            z[0] = f32::NAN;
        }
        match run_cv(&videos, &tiny_config(2)) {
            Err(Error::Numeric(msg)) => assert!(msg.contains("fold"), "{msg}"),
            other => panic!("expected a numeric failure, got {other:?}"),
        }
    }

    #[test]
    fn ablation_grid_and_baseline_column() {
        let base = CvConfig::new(0);
        let seq = AblationAxis::Seqlen.grid(&base);
        assert_eq!(seq.iter().map(|c| c.1.packing.l).collect::<Vec<_>>(), vec![15, 20, 25]);
        assert_eq!(seq[2].1.transformer.max_positions, 26);
        let ov = AblationAxis::Overlap.grid(&base);
        assert_eq!(ov.iter().map(|c| c.0.as_str()).collect::<Vec<_>>(), vec!["0%", "20%", "40%"]);
        assert_eq!(ov[0].1, base);
        let loss = AblationAxis::Loss.grid(&base);
        assert_eq!(loss[0].1, base);
        assert_eq!(loss[1].1.train.loss, LossKind::Bce);
    }

    #[test]
    fn overlap_zero_column_reproduces_the_baseline() {
        let videos = toy_videos(10, 5, 1, 12, 0.3, 8);
        let mut base = tiny_config(4);
        base.train.epochs = 2;
        let tables = run_ablations(&videos, &base, &[AblationAxis::Overlap]).unwrap();
        let (table, reports) = &tables[0];
        assert_eq!(table.columns, vec!["0%", "20%", "40%"]);
        assert_eq!(table.rows.len(), 1);
        let fresh = run_cv(&videos, &base).unwrap();
        assert_eq!(reports[0].to_json(), fresh.to_json());
        assert!(reports[2].themes[0].folds[0].train_sequences > reports[0].themes[0].folds[0].train_sequences);
    }
}
