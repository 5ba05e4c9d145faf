use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use mcivid::cae::{train_cae, Cae, CaeConfig, CaeTrainConfig, LatentStore};
use mcivid::harness::{
    dataset_hash, encode_video, run_ablations, run_cv, sample_training_faces, train_all, AblationAxis, CvConfig, EncodedVideo,
    EvalReport, PreprocessedEntry,
};
use mcivid::numerics::Checkpoint;
use mcivid::preprocessing::{preprocess_video, BBox, CropStorage, PreprocessConfig, PreprocessedVideo, RoiFilter};
use mcivid::report::{emit_plots, Artifact, ReportTable, RunManifest};
use mcivid::synth::{describe_cohort, generate_cohort, write_cohort, CohortIndex, CohortSpec};
use mcivid::temporal::{structure_video, write_manifest, PackingConfig, SequenceRecord};
use mcivid::transformer::{LossKind, PositionMode};
use mcivid::{seed, Error};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::args::*;
use crate::Failure;

type CmdResult<T = ()> = Result<T, Failure>;

pub const SEED_ENV: &str = "TS_SEED";
pub const MANIFEST_FILE: &str = "manifest.jsonl";
const VIDEOS_FILE: &str = "videos.json";
const SEQUENCES_FILE: &str = "sequences.jsonl";

/// What a finished command contributes to its manifest.
struct Outcome {
    config: Value,
    dataset_hash: Option<String>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    manifest_dir: PathBuf,
}

/// Output of `preprocess`: the accepted videos and the settings that produced them.
#[derive(Debug, Serialize, Deserialize)]
struct PreprocessedSet {
    cohort_dir: PathBuf,
    config: PreprocessConfig,
    videos: Vec<PreprocessedEntry>,
    excluded: Vec<String>,
}

pub fn resolve_seed(flag: u64) -> CmdResult<u64> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map_err(|_| Failure::Usage(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(flag),
    }
}

pub fn run(cli: Cli) -> CmdResult {
    let seed = resolve_seed(cli.seed)?;
    let started = Instant::now();
    let (name, outcome) = match cli.command {
        Command::Synth(a) => ("synth", synth(a, seed)?),
        Command::Preprocess(a) => ("preprocess", preprocess(a)?),
        Command::TrainCae(a) => ("train-cae", train_cae_cmd(a, seed)?),
        Command::Encode(a) => ("encode", encode(a)?),
        Command::TrainTransformer(a) => ("train-transformer", train_transformer_cmd(a, seed)?),
        Command::Evaluate(a) => ("evaluate", evaluate(a, seed)?),
        Command::Ablate(a) => ("ablate", ablate(a, seed)?),
        Command::Report(a) => ("report", report(a)?),
    };
    let manifest = RunManifest {
        command: name.to_string(),
        config: outcome.config,
        seed,
        dataset_hash: outcome.dataset_hash,
        inputs: outcome.inputs.iter().map(|p| Artifact::of(p)).collect::<Result<_, _>>()?,
        outputs: outcome.outputs.iter().map(|p| Artifact::of(p)).collect::<Result<_, _>>()?,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        duration_secs: started.elapsed().as_secs_f64(),
    };
    manifest.append(&outcome.manifest_dir.join(MANIFEST_FILE))?;
    Ok(())
}

fn require_input(path: &Path) -> CmdResult {
    if path.exists() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("missing input file {}", path.display())))
    }
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("arguments serialize")
}

fn synth(a: SynthArgs, seed: u64) -> CmdResult<Outcome> {
    let spec = CohortSpec {
        n_participants: a.participants,
        class_balance: a.balance,
        frames_per_video: a.frames,
        mu_nc: a.mu_nc,
        mu_mci: a.mu_mci,
        feature_shift: a.feature_shift,
        identity_spread: a.identity_spread,
        mean_gap: a.mean_gap,
        dropout_rate: a.dropout_rate,
        fps_original: a.fps_original,
        fps_target: a.fps_target,
        theme: a.theme.clone(),
        seed,
        ..CohortSpec::default()
    };
    let cohort = generate_cohort(&spec)?;
    let storage = if a.inline_images { CropStorage::Inline } else { CropStorage::Sidecar };
    write_cohort(&cohort, &a.out, storage)?;
    print!("{}", describe_cohort(&cohort, &PackingConfig::new(spec.seq_len, 0.0)?).to_markdown());
    Ok(Outcome {
        config: json!({ "args": to_value(&a), "spec": to_value(&spec) }),
        dataset_hash: None,
        inputs: vec![],
        outputs: vec![a.out.clone()],
        manifest_dir: parent_dir(&a.out),
    })
}

fn preprocess(a: PreprocessArgs) -> CmdResult<Outcome> {
    require_input(&a.input.join("cohort.json"))?;
    let index = CohortIndex::load(&a.input)?;
    let roi = RoiFilter::new(a.roi.parse::<BBox>()?, a.min_face_area)?;
    let config = PreprocessConfig { fps_target: a.fps_target, roi };
    let packing = PackingConfig::new(a.seq_len, a.overlap)?;
    let mut videos = Vec::new();
    let mut excluded = Vec::new();
    let mut sequences = Vec::new();
    for entry in &index.videos {
        let mut meta = entry.meta.clone();
        if let Some(fps) = a.fps_original {
            meta.fps_original = fps;
        }
        let records = entry.read_records(&a.input)?;
        match preprocess_video(&meta, &records, &config)? {
            None => {
                log::warn!("{}: excluded by the quality gate or without an accepted frame", meta.video_id);
                excluded.push(meta.video_id.clone());
            }
            Some(video) => {
                let entry = PreprocessedEntry::new(&video, entry.detections.clone());
                let (_, seqs) = structure_video(&entry.mask, &packing);
                sequences.extend(seqs.into_iter().map(|s| SequenceRecord {
                    video_id: meta.video_id.clone(),
                    seq_index: s.seq_index,
                    seg_index: s.seg_index,
                    frame_indices: s.frames,
                    label: meta.label,
                }));
                videos.push(entry);
            }
        }
    }
    let cohort_dir = fs::canonicalize(&a.input).map_err(Error::from)?;
    let set = PreprocessedSet { cohort_dir, config, videos, excluded };
    fs::create_dir_all(&a.out).map_err(Error::from)?;
    fs::write(a.out.join(VIDEOS_FILE), serde_json::to_vec_pretty(&set).map_err(Error::from)?).map_err(Error::from)?;
    write_manifest(&a.out.join(SEQUENCES_FILE), &sequences)?;
    println!("{} videos accepted, {} excluded, {} sequences of {}", set.videos.len(), set.excluded.len(), sequences.len(), a.seq_len);
    Ok(Outcome {
        config: json!({ "args": to_value(&a), "preprocess": to_value(&config) }),
        dataset_hash: None,
        inputs: vec![a.input.clone()],
        outputs: vec![a.out.clone()],
        manifest_dir: parent_dir(&a.out),
    })
}

fn load_set(dir: &Path) -> CmdResult<PreprocessedSet> {
    let path = dir.join(VIDEOS_FILE);
    require_input(&path)?;
    let text = fs::read_to_string(&path).map_err(Error::from)?;
    serde_json::from_str(&text).map_err(|e| Failure::Pipeline(Error::Format(format!("{}: {e}", path.display()))))
}

/// Replay preprocessing to recover the crops behind a preprocessed set.
fn load_videos(set: &PreprocessedSet) -> CmdResult<Vec<PreprocessedVideo>> {
    let mut out = Vec::with_capacity(set.videos.len());
    for entry in &set.videos {
        let records = mcivid::preprocessing::read_detections(&set.cohort_dir.join(&entry.detections))?;
        let video = preprocess_video(&entry.meta, &records, &set.config)?
            .filter(|v| v.mask() == entry.mask && v.source_frames == entry.source_frames)
            .ok_or_else(|| Error::Data(format!("{}: detections changed since preprocessing", entry.meta.video_id)))?;
        out.push(video);
    }
    Ok(out)
}

fn train_cae_cmd(a: TrainCaeArgs, seed: u64) -> CmdResult<Outcome> {
    let set = load_set(&a.input)?;
    let videos = load_videos(&set)?;
    let faces: Vec<_> = sample_training_faces(&videos, a.faces, seed::derive(seed, "train-cae/faces"))?.into_iter().map(|f| f.1).collect();
    let model = match a.profile {
        Profile::Desk => CaeConfig::desk(),
        Profile::Full => CaeConfig::full(),
    };
    let cfg = CaeTrainConfig { epochs: a.epochs, batch_size: a.batch_size, lr: a.lr, seed: seed::derive(seed, "train-cae") };
    let (cae, report) = train_cae(&faces, model.clone(), &cfg)?;
    cae.to_checkpoint()?.save(&a.out)?;
    if let (Some(first), Some(last)) = (report.epoch_mse.first(), report.epoch_mse.last()) {
        println!("{} faces, reconstruction MSE {first:.5} -> {last:.5}", faces.len());
    }
    Ok(Outcome {
        config: json!({ "args": to_value(&a), "model": to_value(&model), "train": to_value(&cfg), "epoch_mse": report.epoch_mse }),
        dataset_hash: None,
        inputs: vec![a.input.clone()],
        outputs: vec![a.out.clone()],
        manifest_dir: parent_dir(&a.out),
    })
}

fn encode(a: EncodeArgs) -> CmdResult<Outcome> {
    let set = load_set(&a.input)?;
    require_input(&a.cae)?;
    let cae = Cae::<f32>::from_checkpoint(&Checkpoint::load(&a.cae)?)?;
    let videos = load_videos(&set)?;
    let mut encoded = Vec::with_capacity(videos.len());
    for v in &videos {
        encoded.push(encode_video(v, &cae, a.min_segment, a.batch_size)?);
    }
    let store = LatentStore::new(encoded.iter().flat_map(EncodedVideo::latent_records).collect());
    store.save(&a.out)?;
    println!("{} latents from {} videos", store.len(), encoded.len());
    Ok(Outcome {
        config: to_value(&a),
        dataset_hash: Some(dataset_hash(&encoded)),
        inputs: vec![a.input.clone(), a.cae.clone()],
        outputs: vec![a.out.clone()],
        manifest_dir: parent_dir(&a.out),
    })
}

fn load_encoded(d: &EncodedInputs) -> CmdResult<Vec<EncodedVideo>> {
    let set = load_set(&d.input)?;
    require_input(&d.latents)?;
    let store = LatentStore::load(&d.latents)?;
    Ok(set.videos.into_iter().map(|e| EncodedVideo::from_store(e.meta, e.mask, &store)).collect())
}

fn cv_config(m: &ModelArgs, seed: u64) -> CmdResult<CvConfig> {
    let positions = match m.positions {
        Positions::None => PositionMode::None,
        Positions::Seq => PositionMode::Sequence,
        Positions::Seg => PositionMode::Segment,
        Positions::Both => PositionMode::Both,
    };
    let loss = match m.loss {
        Loss::Wbce => LossKind::Wbce,
        Loss::Bce => LossKind::Bce,
    };
    let mut cfg = CvConfig::new(seed).with_seq_len(m.seq_len).with_overlap(m.overlap).with_positions(positions).with_loss(loss);
    cfg.folds = m.folds;
    cfg.transformer.num_layers = m.layers;
    cfg.transformer.num_heads = m.heads;
    cfg.transformer.ff_mult = m.ff_mult;
    cfg.transformer.dropout = m.dropout;
    cfg.train.epochs = m.epochs;
    cfg.train.batch_size = m.batch_size;
    cfg.train.lr = m.lr;
    cfg.validate()?;
    Ok(cfg)
}

fn train_transformer_cmd(a: TrainTransformerArgs, seed: u64) -> CmdResult<Outcome> {
    let cfg = cv_config(&a.model, seed)?;
    let videos = load_encoded(&a.data)?;
    let (model, report) = train_all(&videos, &cfg)?;
    model.to_checkpoint()?.save(&a.out)?;
    if let Some(last) = report.epoch_loss.last() {
        println!("trained {} epochs, final loss {last:.5}, class weight {:.3}", report.epoch_loss.len(), report.beta);
    }
    Ok(Outcome {
        config: json!({ "args": to_value(&a), "resolved": to_value(&cfg), "epoch_loss": report.epoch_loss }),
        dataset_hash: Some(dataset_hash(&videos)),
        inputs: vec![a.data.input.clone(), a.data.latents.clone()],
        outputs: vec![a.out.clone()],
        manifest_dir: parent_dir(&a.out),
    })
}

fn evaluate(a: EvaluateArgs, seed: u64) -> CmdResult<Outcome> {
    let cfg = cv_config(&a.model, seed)?;
    let videos = load_encoded(&a.data)?;
    let report = run_cv(&videos, &cfg)?;
    report.save(&a.out)?;
    print!("{}", ReportTable::positions(std::slice::from_ref(&report)).to_markdown());
    Ok(Outcome {
        config: json!({ "args": to_value(&a), "resolved": to_value(&cfg) }),
        dataset_hash: Some(report.dataset_hash.clone()),
        inputs: vec![a.data.input.clone(), a.data.latents.clone()],
        outputs: vec![a.out.clone()],
        manifest_dir: parent_dir(&a.out),
    })
}

fn ablate(a: AblateArgs, seed: u64) -> CmdResult<Outcome> {
    let base = cv_config(&a.model, seed)?;
    let axis = match a.axis {
        Axis::Seqlen => AblationAxis::Seqlen,
        Axis::Overlap => AblationAxis::Overlap,
        Axis::Loss => AblationAxis::Loss,
    };
    let videos = load_encoded(&a.data)?;
    let (table, reports) = run_ablations(&videos, &base, &[axis])?.into_iter().next().expect("one axis");
    fs::create_dir_all(&a.out).map_err(Error::from)?;
    let mut outputs = Vec::new();
    for (path, text) in [(format!("{}.md", axis.as_str()), table.to_markdown()), (format!("{}.csv", axis.as_str()), table.to_csv())] {
        fs::write(a.out.join(&path), text).map_err(Error::from)?;
        outputs.push(a.out.join(path));
    }
    for (i, r) in reports.iter().enumerate() {
        let path = a.out.join(format!("{}_{i}.json", axis.as_str()));
        r.save(&path)?;
        outputs.push(path);
    }
    print!("{}", table.to_markdown());
    Ok(Outcome {
        config: json!({ "args": to_value(&a), "resolved": to_value(&base) }),
        dataset_hash: Some(dataset_hash(&videos)),
        inputs: vec![a.data.input.clone(), a.data.latents.clone()],
        outputs,
        manifest_dir: parent_dir(&a.out),
    })
}

fn report(a: ReportArgs) -> CmdResult<Outcome> {
    for p in &a.input {
        require_input(p)?;
    }
    let reports = a.input.iter().map(|p| EvalReport::load(p)).collect::<Result<Vec<_>, _>>()?;
    let table = ReportTable::positions(&reports);
    let text = match a.format {
        Format::Md => table.to_markdown(),
        Format::Csv => table.to_csv(),
    };
    let mut outputs = Vec::new();
    match &a.out {
        Some(path) => {
            fs::write(path, &text).map_err(Error::from)?;
            outputs.push(path.clone());
        }
        None => print!("{text}"),
    }
    if let Some(dir) = &a.plots {
        for (i, r) in reports.iter().enumerate() {
            let target = if reports.len() == 1 { dir.clone() } else { dir.join(format!("report_{i}")) };
            outputs.extend(emit_plots(r, &target)?);
        }
    }
    let dataset_hash = reports.first().map(|r| r.dataset_hash.clone());
    let manifest_dir = a.out.as_deref().map(parent_dir).unwrap_or_else(|| parent_dir(&a.input[0]));
    Ok(Outcome { config: to_value(&a), dataset_hash, inputs: a.input.clone(), outputs, manifest_dir })
}
