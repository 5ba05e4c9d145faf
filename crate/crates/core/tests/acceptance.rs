//! Acceptance suite. Every test checks one criterion at its stated tolerance
//! and writes a single `criterion N [PASS|FAIL]` line to standard output.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::OnceLock;
use std::time::Instant;

use mcivid::cae::{cosine_similarity, shape_ladder, train_cae, Cae, CaeConfig, CaeTrainConfig, CaeTrainReport, LatentStore, LATENT_DIM};
use mcivid::harness::{auc, check_fold_hygiene, encode_video, make_folds, run_cv, CvConfig, EncodedVideo, EvalReport};
use mcivid::numerics::loss::{bce, weighted_bce};
use mcivid::numerics::{Checkpoint, Graph};
use mcivid::preprocessing::{compute_frame_shift, preprocess_video, select_frames};
use mcivid::synth::{generate_cohort, preprocess_config, sample_faces, CohortSpec};
use mcivid::temporal::{extract_segments, index_video, pack_sequences, pack_video, PackingConfig};
use mcivid::transformer::{multi_head, attention, LossKind, PositionMode, SequenceInput, Transformer, TransformerConfig};
use mcivid::{seed, Label, Tensor};
use rand::Rng;

fn verdict(n: usize, title: &str, ok: bool, detail: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "criterion {n} [{}] {title}: {detail}", if ok { "PASS" } else { "FAIL" });
    let _ = out.flush();
    assert!(ok, "criterion {n} failed: {detail}");
}

fn random(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-scale..scale))
}

/// Relative error `‖a − b‖ / max(‖a‖, ‖b‖)` per element pair.
fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = a.iter().zip(b).map(|(x, y)| x.powi(2).max(y.powi(2))).sum();
    if den == 0.0 {
        0.0
    } else {
        (num / den).sqrt()
    }
}

/// Central differences of `loss` at every listed coordinate of every tensor.
fn finite_differences(base: &[Tensor<f64>], picks: &[Vec<usize>], h: f64, loss: impl Fn(&[Tensor<f64>]) -> f64) -> Vec<Vec<f64>> {
    picks
        .iter()
        .enumerate()
        .map(|(t, idx)| {
            idx.iter()
                .map(|&i| {
                    let mut plus = base.to_vec();
                    plus[t].data_mut()[i] += h;
                    let mut minus = base.to_vec();
                    minus[t].data_mut()[i] -= h;
                    (loss(&plus) - loss(&minus)) / (2.0 * h)
                })
                .collect()
        })
        .collect()
}

#[test]
fn criterion_1_gradient_correctness() {
    let start = Instant::now();
    let h = 1e-6;

    let mut cfg = TransformerConfig::new(3);
    cfg.num_layers = 1;
    cfg.hidden_dim = 8;
    cfg.num_heads = 2;
    cfg.max_sequences = 6;
    cfg.max_segments = 4;
    cfg.positions = PositionMode::Both;
    let model = Transformer::<f64>::new(cfg, 6).unwrap();
    let mut rng = seed::rng(5, "acceptance/gradcheck");
    let za: Vec<f64> = (0..24).map(|_| rng.random_range(-1.0..1.0)).collect();
    let zb: Vec<f64> = (0..24).map(|_| rng.random_range(-1.0..1.0)).collect();
    let batch = [SequenceInput::new(&za[..], 1, 0), SequenceInput::new(&zb[..], 4, 2)];
    let transformer_loss = |params: &[Tensor<f64>]| -> f64 {
        let mut m = model.clone();
        m.params_mut().values_mut().clone_from_slice(params);
        let mut g = Graph::new();
        let bound = m.params().bind_constant(&mut g);
        let l = m.loss_on_graph(&mut g, &bound, &batch, vec![1.0, 0.0], 1.7).unwrap();
        g.value(l).item().unwrap()
    };
    let mut g = Graph::new();
    let bound = model.params().bind(&mut g);
    let l = model.loss_on_graph(&mut g, &bound, &batch, vec![1.0, 0.0], 1.7).unwrap();
    let analytic = model.params().gradients(&bound, &mut g.backward(l).unwrap());
    let base = model.params().values().to_vec();
    let picks: Vec<Vec<usize>> = base.iter().map(|t| (0..t.numel()).collect()).collect();
    let numeric = finite_differences(&base, &picks, h, transformer_loss);
    let an: Vec<f64> = analytic.iter().flat_map(|t| t.data().to_vec()).collect();
    let transformer_err = relative_error(&an, &numeric.concat());
    let tables_live = [model.class_token_id(), model.slot_table_id(), model.sequence_table_id(), model.segment_table_id()]
        .iter()
        .all(|id| analytic[id.index()].data().iter().any(|&v| v != 0.0));

    let cae = Cae::<f64>::new(CaeConfig::desk(), 11).unwrap();
    let x = Tensor::<f64>::from_fn(vec![2, 3, 96, 96], |_| rng.random::<f64>());
    let cae_loss = |params: &[Tensor<f64>]| -> f64 {
        let mut m = cae.clone();
        m.params_mut().values_mut().clone_from_slice(params);
        let mut g = Graph::new();
        let bound = m.params().bind_constant(&mut g);
        let l = m.loss_on_graph(&mut g, &bound, &x, true).unwrap();
        g.value(l).item().unwrap()
    };
    let mut g = Graph::new();
    let bound = cae.params().bind(&mut g);
    let l = cae.loss_on_graph(&mut g, &bound, &x, true).unwrap();
    let analytic = cae.params().gradients(&bound, &mut g.backward(l).unwrap());
    let base = cae.params().values().to_vec();
    let picks: Vec<Vec<usize>> = base.iter().map(|t| (0..2.min(t.numel())).map(|_| rng.random_range(0..t.numel())).collect()).collect();
    let numeric = finite_differences(&base, &picks, h, cae_loss);
    let an: Vec<f64> = analytic.iter().zip(&picks).flat_map(|(t, idx)| idx.iter().map(|&i| t.data()[i]).collect::<Vec<_>>()).collect();
    let cae_err = relative_error(&an, &numeric.concat());

    let secs = start.elapsed().as_secs_f64();
    let ok = transformer_err < 1e-4 && cae_err < 1e-4 && tables_live && secs < 120.0;
    verdict(
        1,
        "gradient correctness",
        ok,
        &format!("transformer rel err {transformer_err:.2e}, CAE rel err {cae_err:.2e}, all tables receive gradient: {tables_live}, {secs:.1}s"),
    );
}

#[test]
fn criterion_2_shape_fidelity() {
    let start = Instant::now();
    let full = CaeConfig::full();
    let sizes: Vec<usize> = shape_ladder(&full).iter().map(|s| s.size).collect();
    let desk = Cae::<f32>::new(CaeConfig::desk(), 1).unwrap();
    let traced: Vec<usize> = desk.encoder_trace(&Tensor::zeros(vec![1, 3, 96, 96])).unwrap().iter().map(|s| s[2]).collect();
    let latent = desk.encode(&Tensor::zeros(vec![1, 3, 96, 96])).unwrap();
    let head = TransformerConfig::new(15).mlp_head_dims;
    let secs = start.elapsed().as_secs_f64();
    let ok = sizes == [48, 24, 24, 12, 6, 3]
        && traced == sizes
        && full.latent_dim == 128
        && LATENT_DIM == 128
        && latent.shape() == [1, 128]
        && head == [64, 32, 2]
        && secs < 1.0;
    verdict(2, "shape fidelity", ok, &format!("ladder {sizes:?}, traced desk {traced:?}, latent {:?}, head {head:?}, {secs:.2}s", latent.shape()));
}

fn dense_attention(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let d = q[0].len() as f64;
    q.iter()
        .map(|qi| {
            let s: Vec<f64> = k.iter().map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / d.sqrt()).collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            (0..v[0].len()).map(|c| e.iter().zip(v).map(|(w, vj)| w / z * vj[c]).sum()).collect()
        })
        .collect()
}

fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    t.data().chunks(t.shape()[1]).map(<[f64]>::to_vec).collect()
}

fn affine(x: &[Vec<f64>], w: &Tensor<f64>, b: &Tensor<f64>) -> Vec<Vec<f64>> {
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    x.iter().map(|r| (0..dout).map(|o| b.data()[o] + (0..din).map(|i| r[i] * w.data()[i * dout + o]).sum::<f64>()).collect()).collect()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn brute_segments(mask: &[bool]) -> Vec<Vec<usize>> {
    let mut segments: Vec<Vec<usize>> = Vec::new();
    let mut absent_run = usize::MAX;
    for (i, &m) in mask.iter().enumerate() {
        if m {
            if absent_run >= 3 {
                segments.push(Vec::new());
            }
            segments.last_mut().unwrap().push(i);
            absent_run = 0;
        } else {
            absent_run = absent_run.saturating_add(1);
        }
    }
    segments
}

#[test]
fn criterion_3_closed_form_oracles() {
    let start = Instant::now();
    let mut rng = seed::rng(3, "acceptance/oracles");
    let mut attn_err = 0.0f64;
    for _ in 0..200 {
        let (t, heads) = (rng.random_range(1..8), rng.random_range(1..4));
        let d = heads * rng.random_range(1..5);
        let (q, k, v) = (random(&mut rng, &[t, d], 1.0), random(&mut rng, &[t, d], 1.0), random(&mut rng, &[t, d], 1.0));
        let out = attention(&q, &k, &v).unwrap();
        attn_err = attn_err.max(max_abs_diff(out.data(), &dense_attention(&rows(&q), &rows(&k), &rows(&v)).concat()));

        let w: [Tensor<f64>; 8] = std::array::from_fn(|i| if i % 2 == 0 { random(&mut rng, &[d, d], 1.0) } else { random(&mut rng, &[d], 0.5) });
        let out = multi_head(&q, &k, &v, &w, heads).unwrap();
        let (pq, pk, pv) = (affine(&rows(&q), &w[0], &w[1]), affine(&rows(&k), &w[2], &w[3]), affine(&rows(&v), &w[4], &w[5]));
        let dk = d / heads;
        let cols = |m: &[Vec<f64>], h: usize| m.iter().map(|r| r[h * dk..(h + 1) * dk].to_vec()).collect::<Vec<_>>();
        let per_head: Vec<Vec<Vec<f64>>> = (0..heads).map(|h| dense_attention(&cols(&pq, h), &cols(&pk, h), &cols(&pv, h))).collect();
        let concat: Vec<Vec<f64>> = (0..t).map(|r| per_head.iter().flat_map(|o| o[r].clone()).collect()).collect();
        attn_err = attn_err.max(max_abs_diff(out.data(), &affine(&concat, &w[6], &w[7]).concat()));
    }

    let mut bce_err = 0.0f64;
    for _ in 0..1000 {
        let n = rng.random_range(1..40);
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let y: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
        let explicit = -p.iter().zip(&y).map(|(&p, &y)| {
            let p = p.clamp(1e-7, 1.0 - 1e-7);
            y * p.ln() + (1.0 - y) * (1.0 - p).ln()
        }).sum::<f64>() / n as f64;
        bce_err = bce_err.max((weighted_bce(&p, &y, 1.0) - bce(&p, &y)).abs()).max((bce(&p, &y) - explicit).abs());
    }

    let mut auc_mismatches = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..=50);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..6) as f64 / 5.0).collect();
        let labels: Vec<Label> = (0..n).map(|_| if rng.random_bool(0.5) { Label::Mci } else { Label::Nc }).collect();
        let (mut twice_wins, mut pairs) = (0u64, 0u64);
        for i in 0..n {
            for j in 0..n {
                if labels[i] == Label::Mci && labels[j] == Label::Nc {
                    pairs += 1;
                    twice_wins += match scores[i].partial_cmp(&scores[j]).unwrap() {
                        std::cmp::Ordering::Greater => 2,
                        std::cmp::Ordering::Equal => 1,
                        std::cmp::Ordering::Less => 0,
                    };
                }
            }
        }
        let oracle = (pairs > 0).then(|| twice_wins as f64 / (2 * pairs) as f64);
        auc_mismatches += usize::from(auc(&scores, &labels) != oracle);
    }

    let mut structure_mismatches = 0;
    for _ in 0..1000 {
        let fps_target = [5.0, 10.0, 12.5, 15.0][rng.random_range(0..4)];
        let fps_original = fps_target * rng.random_range(1.0..8.0);
        let shift = compute_frame_shift(fps_original, fps_target).unwrap();
        let mut brute_shift = 1;
        while (brute_shift + 1) as f64 * fps_target <= fps_original {
            brute_shift += 1;
        }
        let count = rng.random_range(0..200);
        let selected = select_frames(count, shift);
        let brute_selected: Vec<usize> = (0..count).filter(|i| i % brute_shift == 0).collect();

        let n = rng.random_range(0..120);
        let density = rng.random_range(0.3..0.97);
        let mask: Vec<bool> = (0..n).map(|_| rng.random_bool(density)).collect();
        let segments = extract_segments(&mask, 3);
        let kept: Vec<Vec<usize>> = segments.iter().map(|s| s.kept_frames.clone()).collect();

        let l = rng.random_range(2..8);
        let overlap = [0.0, 0.2, 0.4][rng.random_range(0..3)];
        let cfg = PackingConfig::new(l, overlap).unwrap();
        let stride = l - (l as f64 * overlap).round() as usize;
        let windows: Vec<Vec<Vec<usize>>> = segments.iter().map(|s| pack_sequences(s, &cfg)).collect();
        let brute_windows: Vec<Vec<Vec<usize>>> = kept
            .iter()
            .map(|k| (0..k.len()).step_by(stride).filter(|&s| s + l <= k.len()).map(|s| k[s..s + l].to_vec()).collect())
            .collect();
        let indexed = index_video(&pack_video(&segments, &cfg));
        let mut brute_triples = Vec::new();
        let mut m = 0;
        for (seg, ws) in brute_windows.iter().filter(|ws| !ws.is_empty()).enumerate() {
            for w in ws {
                brute_triples.push((m, seg, w.clone()));
                m += 1;
            }
        }
        let triples: Vec<(usize, usize, Vec<usize>)> = indexed.iter().map(|s| (s.seq_index, s.seg_index, s.frames.clone())).collect();

        let ok = shift.get() == brute_shift
            && selected == brute_selected
            && kept == brute_segments(&mask)
            && windows == brute_windows
            && triples == brute_triples;
        structure_mismatches += usize::from(!ok);
    }

    let secs = start.elapsed().as_secs_f64();
    let ok = attn_err < 1e-10 && bce_err < 1e-12 && auc_mismatches == 0 && structure_mismatches == 0 && secs < 60.0;
    verdict(
        3,
        "closed-form oracles",
        ok,
        &format!(
            "attention max err {attn_err:.1e}, bce max err {bce_err:.1e}, AUC mismatches {auc_mismatches}/1000, \
             frame/segment/packing mismatches {structure_mismatches}/1000, {secs:.1}s"
        ),
    );
}

/// Desk-scale settings shared by the directional criteria.
struct Desk;

impl Desk {
    const FACES_PARTICIPANTS: usize = 20;
    const FACES_PER_PARTICIPANT: usize = 10;
    const CAE_EPOCHS: usize = 32;
    const FRAMES: usize = 1200;
    const FEATURE_SHIFT: f64 = 0.05;
    const IDENTITY_SPREAD: f64 = 0.05;
    const LAYERS: usize = 1;
    const FF_MULT: usize = 2;
    const EPOCHS: usize = 12;
    const LR: f64 = 2e-3;
    const SEEDS: u64 = 10;

    fn cv(seed: u64) -> CvConfig {
        let mut cfg = CvConfig::new(seed);
        cfg.transformer.num_layers = Self::LAYERS;
        cfg.transformer.ff_mult = Self::FF_MULT;
        cfg.train.epochs = Self::EPOCHS;
        cfg.train.lr = Self::LR;
        cfg
    }

    fn cohort(seed: u64, balance: f64) -> Vec<EncodedVideo> {
        let spec = CohortSpec {
            n_participants: 30,
            class_balance: balance,
            frames_per_video: Self::FRAMES,
            feature_shift: Self::FEATURE_SHIFT,
            identity_spread: Self::IDENTITY_SPREAD,
            seed,
            ..CohortSpec::default()
        };
        let cohort = generate_cohort(&spec).unwrap();
        let pcfg = preprocess_config(&spec);
        let cae = &shared_cae().0;
        cohort
            .videos()
            .map(|v| encode_video(&preprocess_video(&v.meta, &v.records, &pcfg).unwrap().unwrap(), cae, 15, 32).unwrap())
            .collect()
    }
}

/// Desk autoencoder trained once on 200 faces and shared by the criteria that need latents.
fn shared_cae() -> &'static (Cae<f32>, CaeTrainReport, Vec<(String, Tensor<f32>)>, f64) {
    static CAE: OnceLock<(Cae<f32>, CaeTrainReport, Vec<(String, Tensor<f32>)>, f64)> = OnceLock::new();
    CAE.get_or_init(|| {
        let start = Instant::now();
        let spec = CohortSpec {
            n_participants: Desk::FACES_PARTICIPANTS,
            frames_per_video: 300,
            identity_spread: Desk::IDENTITY_SPREAD,
            seed: 999,
            ..CohortSpec::default()
        };
        let cohort = generate_cohort(&spec).unwrap();
        let faces = sample_faces(&cohort, Desk::FACES_PER_PARTICIPANT, 1).unwrap();
        let tensors: Vec<Tensor<f32>> = faces.iter().map(|f| f.1.clone()).collect();
        let cfg = CaeTrainConfig { epochs: Desk::CAE_EPOCHS, batch_size: 32, lr: 1e-3, seed: 5 };
        let (cae, report) = train_cae(&tensors, CaeConfig::desk(), &cfg).unwrap();
        (cae, report, faces, start.elapsed().as_secs_f64())
    })
}

fn accuracy(report: &EvalReport) -> f64 {
    report.themes[0].metrics.accuracy
}

#[test]
fn criterion_4_positions_beat_no_position() {
    let start = Instant::now();
    let mut lines = Vec::new();
    let mut wins = 0;
    for s in 0..Desk::SEEDS {
        let videos = Desk::cohort(seed::derive(s, "acceptance/positions"), 0.5);
        let both = accuracy(&run_cv(&videos, &Desk::cv(s)).unwrap());
        let none = accuracy(&run_cv(&videos, &Desk::cv(s).with_positions(PositionMode::None)).unwrap());
        let win = both >= 0.80 && both > none;
        wins += usize::from(win);
        lines.push(format!("{both:.3}/{none:.3}{}", if win { "" } else { "*" }));
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        4,
        "both positions reach 0.80 and beat no position",
        wins >= 7,
        &format!("{wins}/{} seeds (both/none accuracy, * = miss: {}), {:.1} min", Desk::SEEDS, lines.join(" "), secs / 60.0),
    );
}

#[test]
fn criterion_5_weighted_loss_on_imbalanced_cohort() {
    let start = Instant::now();
    let mut lines = Vec::new();
    let mut wins = 0;
    for s in 0..Desk::SEEDS {
        let videos = Desk::cohort(seed::derive(s, "acceptance/imbalance"), 1.0 / 3.0);
        let weighted = accuracy(&run_cv(&videos, &Desk::cv(s)).unwrap());
        let plain = accuracy(&run_cv(&videos, &Desk::cv(s).with_loss(LossKind::Bce)).unwrap());
        wins += usize::from(weighted >= plain);
        lines.push(format!("{weighted:.3}/{plain:.3}"));
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        5,
        "weighted BCE matches or beats BCE at 2:1",
        wins >= 7,
        &format!("{wins}/{} seeds (weighted/plain accuracy: {}), {:.1} min", Desk::SEEDS, lines.join(" "), secs / 60.0),
    );
}

#[test]
fn criterion_6_autoencoder_training_curve() {
    let (cae, report, faces, secs) = shared_cae();
    let (first, last) = (report.epoch_mse[0], *report.epoch_mse.last().unwrap());
    let tensors: Vec<Tensor<f32>> = faces.iter().map(|f| f.1.clone()).collect();
    let latents = cae.encode_faces(&tensors, 32).unwrap();
    let mut by_participant: BTreeMap<&str, Vec<&Vec<f32>>> = BTreeMap::new();
    for ((pid, _), z) in faces.iter().zip(&latents) {
        by_participant.entry(pid).or_default().push(z);
    }
    let mut min_cos = f64::INFINITY;
    let mut pairs = 0;
    for zs in by_participant.values() {
        for i in 0..zs.len() {
            for j in i + 1..zs.len() {
                min_cos = min_cos.min(cosine_similarity(zs[i], zs[j]).unwrap());
                pairs += 1;
            }
        }
    }
    let ok = faces.len() == 200 && report.epoch_mse.len() == 32 && last < 0.5 * first && min_cos > 0.0 && *secs < 600.0;
    verdict(
        6,
        "autoencoder training curve",
        ok,
        &format!(
            "{} faces, MSE epoch 1 {first:.4} -> epoch 32 {last:.4} (ratio {:.3}), min same-participant cosine {min_cos:.3} over {pairs} pairs, {:.1}s",
            faces.len(),
            last / first,
            secs
        ),
    );
}

fn small_encoded_cohort(seed: u64) -> Vec<EncodedVideo> {
    let spec = CohortSpec { n_participants: 12, frames_per_video: 120, seed, ..CohortSpec::default() };
    let cohort = generate_cohort(&spec).unwrap();
    let pcfg = preprocess_config(&spec);
    let cae = Cae::<f32>::new(CaeConfig::desk(), 3).unwrap();
    cohort.videos().map(|v| encode_video(&preprocess_video(&v.meta, &v.records, &pcfg).unwrap().unwrap(), &cae, 15, 32).unwrap()).collect()
}

fn small_cv(seed: u64) -> CvConfig {
    let mut cfg = CvConfig::new(seed);
    cfg.folds = 4;
    cfg.transformer.num_layers = 1;
    cfg.train.epochs = 2;
    cfg
}

#[test]
fn criterion_7_determinism_and_persistence() {
    let dir = tempfile::tempdir().unwrap();
    let videos = small_encoded_cohort(21);
    let again = small_encoded_cohort(21);
    let a = run_cv(&videos, &small_cv(4)).unwrap().to_json();
    let b = run_cv(&again, &small_cv(4)).unwrap().to_json();
    let reports_identical = a == b;

    let cae = Cae::<f32>::new(CaeConfig::desk(), 8).unwrap();
    let path = dir.path().join("cae.ckpt");
    cae.to_checkpoint().unwrap().save(&path).unwrap();
    let cae_back = Cae::<f32>::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
    let cae_exact = cae_back.to_checkpoint().unwrap().to_bytes() == cae.to_checkpoint().unwrap().to_bytes()
        && cae_back.params().values() == cae.params().values();

    let model = Transformer::<f32>::new(TransformerConfig::new(15), 8).unwrap();
    let path = dir.path().join("transformer.ckpt");
    model.to_checkpoint().unwrap().save(&path).unwrap();
    let model_back = Transformer::<f32>::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
    let transformer_exact = model_back.to_checkpoint().unwrap().to_bytes() == model.to_checkpoint().unwrap().to_bytes();

    let store = LatentStore::new(videos.iter().flat_map(EncodedVideo::latent_records).collect());
    let path = dir.path().join("latents.tslf");
    store.save(&path).unwrap();
    let back = LatentStore::load(&path).unwrap();
    let latents_exact = back.records().len() == store.records().len()
        && back.records().iter().zip(store.records()).all(|(x, y)| {
            x.video_key == y.video_key && x.frame_index == y.frame_index && x.values.iter().map(|v| v.to_bits()).eq(y.values.iter().map(|v| v.to_bits()))
        });
    let rebuilt: Vec<EncodedVideo> = videos.iter().map(|v| EncodedVideo::from_store(v.meta.clone(), v.mask.clone(), &back)).collect();
    let rebuilt_identical = run_cv(&rebuilt, &small_cv(4)).unwrap().to_json() == a;

    verdict(
        7,
        "determinism and persistence",
        reports_identical && cae_exact && transformer_exact && latents_exact && rebuilt_identical,
        &format!(
            "reports byte-identical: {reports_identical}, CAE checkpoint bit-exact: {cae_exact}, transformer checkpoint bit-exact: \
             {transformer_exact}, latent store bit-exact: {latents_exact}, report from reloaded latents identical: {rebuilt_identical}"
        ),
    );
}

#[test]
fn criterion_8_fold_hygiene() {
    let mut plans = 0;
    let mut violations = Vec::new();
    let mut rng = seed::rng(8, "acceptance/folds");
    for s in 0..200u64 {
        let n = rng.random_range(20..=60);
        let n_mci = rng.random_range(10..=n - 10);
        let roster: Vec<(String, Label)> =
            (0..n).map(|i| (format!("P{i:03}"), if i < n_mci { Label::Mci } else { Label::Nc })).collect();
        let labels: BTreeMap<String, Label> = roster.iter().cloned().collect();
        let plan = make_folds(&roster, 10, s).unwrap();
        plans += 1;
        for fold in 0..10 {
            let test = plan.members(fold);
            let train: Vec<&str> = plan.assignments.iter().filter(|(_, &f)| f != fold).map(|(p, _)| p.as_str()).collect();
            if let Err(e) = check_fold_hygiene(&plan, &labels, fold, &train, &test) {
                violations.push(e.to_string());
            }
            let classes: std::collections::BTreeSet<Label> = test.iter().map(|p| labels[*p]).collect();
            if classes.len() != 2 || train.iter().any(|p| test.contains(p)) || train.len() + test.len() != n {
                violations.push(format!("seed {s} fold {fold}"));
            }
        }
    }
    let report = run_cv(&small_encoded_cohort(31), &small_cv(2)).unwrap();
    for fold in &report.themes[0].folds {
        if fold.train_participants.iter().any(|p| fold.test_participants.contains(p)) {
            violations.push(format!("report fold {} leaks", fold.fold));
        }
    }
    for v in &report.themes[0].videos {
        if report.themes[0].folds[v.fold].train_participants.contains(&v.participant_id) {
            violations.push(format!("{} scored by a model trained on it", v.video_id));
        }
    }
    verdict(
        8,
        "fold hygiene",
        violations.is_empty(),
        &format!("{plans} fold plans x 10 folds plus one cross-validation report, violations: {violations:?}"),
    );
}
