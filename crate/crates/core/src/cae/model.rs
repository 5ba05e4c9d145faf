use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{init, Bound, Checkpoint, Conv2dSpec, Graph, ParamId, ParamSet, Scalar, Tensor, Var};
use crate::seed;

/// One bottleneck stage: `repeats` blocks of `1×1 → 3×3 → 1×1` convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub repeats: usize,
    pub mid: usize,
    pub out: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaeConfig {
    pub input_size: usize,
    pub stem_channels: usize,
    pub stages: Vec<StageSpec>,
    pub latent_dim: usize,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl CaeConfig {
    /// The 50-layer residual encoder with a 128-d head.
    pub fn full() -> Self {
        let s = |repeats, mid, out| StageSpec { repeats, mid, out };
        Self {
            input_size: 96,
            stem_channels: 64,
            stages: vec![s(3, 64, 256), s(4, 128, 512), s(6, 256, 1024), s(3, 512, 2048)],
            latent_dim: super::LATENT_DIM,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }

    /// Channels ÷ 8 and one block per stage; same spatial ladder.
    pub fn desk() -> Self {
        Self::full().reduced(8)
    }

    pub fn reduced(&self, divisor: usize) -> Self {
        let mut c = self.clone();
        c.stem_channels = (c.stem_channels / divisor).max(1);
        for st in &mut c.stages {
            st.repeats = 1;
            st.mid = (st.mid / divisor).max(1);
            st.out = (st.out / divisor).max(1);
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.len() != 4 || self.stages.iter().any(|s| s.repeats == 0 || s.mid == 0 || s.out == 0) {
            return Err(Error::Config("autoencoder needs four non-empty stages".into()));
        }
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return Err(Error::Config(format!("input size {} must be a multiple of 32", self.input_size)));
        }
        if self.latent_dim == 0 || self.stem_channels == 0 {
            return Err(Error::Config("latent and stem widths must be positive".into()));
        }
        Ok(())
    }

    fn bottom(&self) -> usize {
        self.input_size / 32
    }
}

/// Output geometry of one encoder stage.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LadderStage {
    pub name: &'static str,
    pub channels: usize,
    pub size: usize,
}

fn out_size(n: usize, k: usize, spec: Conv2dSpec) -> usize {
    (n + 2 * spec.pad - k) / spec.stride + 1
}

const STEM: Conv2dSpec = Conv2dSpec { stride: 2, pad: 3 };
const POOL: Conv2dSpec = Conv2dSpec { stride: 2, pad: 1 };
const SAME3: Conv2dSpec = Conv2dSpec { stride: 1, pad: 1 };
const DOWN3: Conv2dSpec = Conv2dSpec { stride: 2, pad: 1 };
const POINT: Conv2dSpec = Conv2dSpec { stride: 1, pad: 0 };

/// Encoder spatial sizes computed from the layer geometry alone.
pub fn shape_ladder(cfg: &CaeConfig) -> Vec<LadderStage> {
    let mut n = out_size(cfg.input_size, 7, STEM);
    let mut ladder = vec![LadderStage { name: "stem", channels: cfg.stem_channels, size: n }];
    n = out_size(n, 3, POOL);
    ladder.push(LadderStage { name: "pool", channels: cfg.stem_channels, size: n });
    for (k, st) in cfg.stages.iter().enumerate() {
        if k > 0 {
            n = out_size(n, 3, DOWN3);
        }
        ladder.push(LadderStage { name: ["stage1", "stage2", "stage3", "stage4"][k], channels: st.out, size: n });
    }
    ladder
}

#[derive(Clone, Debug)]
struct Bn {
    gamma: ParamId,
    beta: ParamId,
    slot: usize,
}

#[derive(Clone, Debug)]
struct ConvBn {
    w: ParamId,
    spec: Conv2dSpec,
    bn: Bn,
}

#[derive(Clone, Debug)]
struct Block {
    a: ConvBn,
    b: ConvBn,
    c: ConvBn,
    proj: Option<ConvBn>,
}

#[derive(Clone, Debug)]
struct Net {
    stem: ConvBn,
    enc: Vec<Vec<Block>>,
    enc_fc: (ParamId, ParamId),
    dec_fc: (ParamId, ParamId),
    dec: Vec<(Vec<Block>, bool)>,
    dec_head: ConvBn,
    out_w: ParamId,
    out_b: ParamId,
}

/// Batch-norm statistics frozen for inference.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub name: String,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

struct Builder<'r, T: Scalar, R: Rng> {
    params: ParamSet<T>,
    running: Vec<RunningStats<T>>,
    rng: &'r mut R,
}

impl<T: Scalar, R: Rng> Builder<'_, T, R> {
    fn conv_bn(&mut self, name: &str, ci: usize, co: usize, k: usize, spec: Conv2dSpec) -> ConvBn {
        let w = self.params.add(format!("{name}.w"), init::conv_weight(self.rng, co, ci, k));
        let gamma = self.params.add(format!("{name}.bn.g"), Tensor::ones(vec![co]));
        let beta = self.params.add(format!("{name}.bn.b"), Tensor::zeros(vec![co]));
        let slot = self.running.len();
        self.running.push(RunningStats { name: format!("{name}.bn"), mean: vec![T::zero(); co], var: vec![T::one(); co] });
        ConvBn { w, spec, bn: Bn { gamma, beta, slot } }
    }

    fn block(&mut self, name: &str, cin: usize, mid: usize, cout: usize, stride: usize) -> Block {
        let a = self.conv_bn(&format!("{name}.a"), cin, mid, 1, POINT);
        let b = self.conv_bn(&format!("{name}.b"), mid, mid, 3, Conv2dSpec { stride, pad: 1 });
        let c = self.conv_bn(&format!("{name}.c"), mid, cout, 1, POINT);
        let proj = (cin != cout || stride != 1).then(|| self.conv_bn(&format!("{name}.proj"), cin, cout, 1, Conv2dSpec { stride, pad: 0 }));
        Block { a, b, c, proj }
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> (ParamId, ParamId) {
        let w = self.params.add(format!("{name}.w"), init::linear_weight(self.rng, fan_in, fan_out));
        let b = self.params.add(format!("{name}.b"), Tensor::zeros(vec![fan_out]));
        (w, b)
    }
}

/// Autoencoder parameters, batch-norm buffers and layer wiring.
#[derive(Clone, Debug)]
pub struct Cae<T: Scalar = f32> {
    config: CaeConfig,
    params: ParamSet<T>,
    running: Vec<RunningStats<T>>,
    net: Net,
}

/// Tape handles produced by one forward pass.
pub(crate) struct Forward {
    pub recon: Var,
    pub bn_out: Vec<(usize, Var)>,
}

struct Pass<'a, T: Scalar> {
    g: &'a mut Graph<T>,
    bound: &'a Bound,
    train: bool,
    bn_out: Vec<(usize, Var)>,
    trace: Option<Vec<Vec<usize>>>,
}

impl<T: Scalar> Cae<T> {
    pub fn new(config: CaeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(seed, "cae.init");
        let mut b = Builder { params: ParamSet::new(), running: Vec::new(), rng: &mut rng };
        let stem = b.conv_bn("enc.stem", 3, config.stem_channels, 7, STEM);
        let mut enc = Vec::new();
        let mut cin = config.stem_channels;
        for (k, st) in config.stages.iter().enumerate() {
            let blocks = (0..st.repeats)
                .map(|r| {
                    let stride = if k > 0 && r == 0 { 2 } else { 1 };
                    b.block(&format!("enc.s{}.{r}", k + 1), if r == 0 { cin } else { st.out }, st.mid, st.out, stride)
                })
                .collect();
            enc.push(blocks);
            cin = st.out;
        }
        let enc_fc = b.linear("enc.fc", cin, config.latent_dim);
        let bottom = config.bottom();
        let dec_fc = b.linear("dec.fc", config.latent_dim, cin * bottom * bottom);
        let mut dec = Vec::new();
        for k in (0..config.stages.len()).rev() {
            let st = config.stages[k];
            let cout = if k == 0 { config.stem_channels } else { config.stages[k - 1].out };
            let blocks = (0..st.repeats)
                .map(|r| {
                    let last = r + 1 == st.repeats;
                    b.block(&format!("dec.s{}.{r}", k + 1), st.out, st.mid, if last { cout } else { st.out }, 1)
                })
                .collect();
            dec.push((blocks, k > 0));
        }
        let dec_head = b.conv_bn("dec.head", config.stem_channels, config.stem_channels, 3, SAME3);
        let out_w = b.params.add("dec.out.w", init::conv_weight(b.rng, 3, config.stem_channels, 3));
        let out_b = b.params.add("dec.out.b", Tensor::zeros(vec![3]));
        let Builder { params, running, .. } = b;
        let net = Net { stem, enc, enc_fc, dec_fc, dec, dec_head, out_w, out_b };
        Ok(Self { config, params, running, net })
    }

    pub fn config(&self) -> &CaeConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn running_stats(&self) -> &[RunningStats<T>] {
        &self.running
    }

    fn bn(&self, p: &mut Pass<T>, x: Var, bn: &Bn) -> Result<Var> {
        let stats = &self.running[bn.slot];
        let running = (!p.train).then_some((&stats.mean[..], &stats.var[..]));
        let y = p.g.batch_norm(x, p.bound.var(bn.gamma), p.bound.var(bn.beta), running, self.config.bn_eps)?;
        if p.train {
            p.bn_out.push((bn.slot, y));
        }
        Ok(y)
    }

    fn conv_bn(&self, p: &mut Pass<T>, x: Var, l: &ConvBn, relu: bool) -> Result<Var> {
        let y = p.g.conv2d(x, p.bound.var(l.w), l.spec)?;
        let y = self.bn(p, y, &l.bn)?;
        Ok(if relu { p.g.relu(y) } else { y })
    }

    fn block(&self, p: &mut Pass<T>, x: Var, blk: &Block) -> Result<Var> {
        let h = self.conv_bn(p, x, &blk.a, true)?;
        let h = self.conv_bn(p, h, &blk.b, true)?;
        let h = self.conv_bn(p, h, &blk.c, false)?;
        let skip = match &blk.proj {
            Some(proj) => self.conv_bn(p, x, proj, false)?,
            None => x,
        };
        let y = p.g.add(h, skip)?;
        Ok(p.g.relu(y))
    }

    fn record(p: &mut Pass<T>, v: Var) {
        if let Some(trace) = p.trace.as_mut() {
            trace.push(p.g.shape(v).to_vec());
        }
    }

    fn linear(p: &mut Pass<T>, x: Var, (w, b): (ParamId, ParamId)) -> Result<Var> {
        let y = p.g.matmul(x, p.bound.var(w))?;
        p.g.add_bias(y, p.bound.var(b))
    }

    fn encode_pass(&self, p: &mut Pass<T>, x: Var) -> Result<Var> {
        let h = self.conv_bn(p, x, &self.net.stem, true)?;
        Self::record(p, h);
        let mut h = p.g.max_pool2d(h, 3, POOL)?;
        Self::record(p, h);
        for stage in &self.net.enc {
            for blk in stage {
                h = self.block(p, h, blk)?;
            }
            Self::record(p, h);
        }
        let h = p.g.global_avg_pool(h)?;
        Self::linear(p, h, self.net.enc_fc)
    }

    fn decode_pass(&self, p: &mut Pass<T>, z: Var) -> Result<Var> {
        let n = p.g.shape(z)[0];
        let bottom = self.config.bottom();
        let c = self.config.stages.last().map(|s| s.out).unwrap_or(0);
        let h = Self::linear(p, z, self.net.dec_fc)?;
        let mut h = p.g.reshape(h, &[n, c, bottom, bottom])?;
        for (blocks, up) in &self.net.dec {
            for blk in blocks {
                h = self.block(p, h, blk)?;
            }
            if *up {
                h = p.g.upsample2(h)?;
            }
        }
        let h = p.g.upsample2(h)?;
        let h = self.conv_bn(p, h, &self.net.dec_head, true)?;
        let h = p.g.upsample2(h)?;
        let h = p.g.conv2d(h, p.bound.var(self.net.out_w), SAME3)?;
        let h = p.g.add_channel_bias(h, p.bound.var(self.net.out_b))?;
        Ok(p.g.sigmoid(h))
    }

    fn check_images(&self, shape: &[usize]) -> Result<()> {
        let s = self.config.input_size;
        if shape.len() != 4 || shape[1..] != [3, s, s] {
            return Err(Error::Shape(format!("expected [N, 3, {s}, {s}] images, got {shape:?}")));
        }
        Ok(())
    }

    fn check_latents(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 2 || shape[1] != self.config.latent_dim {
            return Err(Error::Shape(format!("expected [N, {}] latents, got {shape:?}", self.config.latent_dim)));
        }
        Ok(())
    }

    /// Full autoencoder pass on `x` (`[N, 3, S, S]`) recorded on `g`.
    pub(crate) fn forward(&self, g: &mut Graph<T>, bound: &Bound, x: Var, train: bool) -> Result<Forward> {
        self.check_images(g.shape(x))?;
        let mut p = Pass { g, bound, train, bn_out: Vec::new(), trace: None };
        let latent = self.encode_pass(&mut p, x)?;
        let recon = self.decode_pass(&mut p, latent)?;
        Ok(Forward { recon, bn_out: p.bn_out })
    }

    /// Reconstruction MSE of `images` recorded on `g` with the parameters
    /// bound in `bound`; `train` selects batch statistics.
    pub fn loss_on_graph(&self, g: &mut Graph<T>, bound: &Bound, images: &Tensor<T>, train: bool) -> Result<Var> {
        let x = g.constant(images.clone());
        let f = self.forward(g, bound, x, train)?;
        g.mse(f.recon, images.clone())
    }

    /// Shapes after the stem, pool and each encoder stage.
    pub fn encoder_trace(&self, images: &Tensor<T>) -> Result<Vec<Vec<usize>>> {
        self.check_images(images.shape())?;
        let mut g = Graph::new();
        let bound = self.params.bind_constant(&mut g);
        let x = g.constant(images.clone());
        let mut p = Pass { g: &mut g, bound: &bound, train: false, bn_out: Vec::new(), trace: Some(Vec::new()) };
        self.encode_pass(&mut p, x)?;
        Ok(p.trace.unwrap_or_default())
    }

    /// Inference-mode latents for `[N, 3, S, S]` images.
    pub fn encode(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_images(images.shape())?;
        let mut g = Graph::new();
        let bound = self.params.bind_constant(&mut g);
        let x = g.constant(images.clone());
        let mut p = Pass { g: &mut g, bound: &bound, train: false, bn_out: Vec::new(), trace: None };
        let z = self.encode_pass(&mut p, x)?;
        Ok(g.value(z).clone())
    }

    /// Inference-mode images for `[N, latent]` codes.
    pub fn decode(&self, latents: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_latents(latents.shape())?;
        let mut g = Graph::new();
        let bound = self.params.bind_constant(&mut g);
        let z = g.constant(latents.clone());
        let mut p = Pass { g: &mut g, bound: &bound, train: false, bn_out: Vec::new(), trace: None };
        let y = self.decode_pass(&mut p, z)?;
        Ok(g.value(y).clone())
    }

    /// Encode `[3, S, S]` face tensors in chunks of `batch`.
    pub fn encode_faces(&self, faces: &[Tensor<T>], batch: usize) -> Result<Vec<Vec<T>>> {
        let s = self.config.input_size;
        let mut out = Vec::with_capacity(faces.len());
        for chunk in faces.chunks(batch.max(1)) {
            let mut data = Vec::with_capacity(chunk.len() * 3 * s * s);
            for f in chunk {
                if f.shape() != [3, s, s] {
                    return Err(Error::Shape(format!("face tensor {:?}, expected [3, {s}, {s}]", f.shape())));
                }
                data.extend_from_slice(f.data());
            }
            let z = self.encode(&Tensor::new(vec![chunk.len(), 3, s, s], data)?)?;
            out.extend(z.data().chunks(self.config.latent_dim).map(<[T]>::to_vec));
        }
        Ok(out)
    }

    /// Fold training-mode batch statistics into the running buffers.
    pub(crate) fn update_running(&mut self, g: &Graph<T>, bn_out: &[(usize, Var)]) {
        let m = T::lit(self.config.bn_momentum);
        let keep = T::one() - m;
        for &(slot, v) in bn_out {
            let Some(stats) = g.batch_stats(v) else { continue };
            let unbias = if stats.count > 1 { T::lit(stats.count as f64 / (stats.count - 1) as f64) } else { T::one() };
            let r = &mut self.running[slot];
            for c in 0..r.mean.len() {
                r.mean[c] = keep * r.mean[c] + m * stats.mean[c];
                r.var[c] = keep * r.var[c] + m * stats.var[c] * unbias;
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> Cae<U> {
        let cast_vec = |v: &[T]| v.iter().map(|x| U::lit(x.to_f64().unwrap_or(f64::NAN))).collect();
        Cae {
            config: self.config.clone(),
            params: self.params.cast(),
            running: self.running.iter().map(|r| RunningStats { name: r.name.clone(), mean: cast_vec(&r.mean), var: cast_vec(&r.var) }).collect(),
            net: self.net.clone(),
        }
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let f = self.cast::<f32>();
        let mut tensors = f.params.named();
        for r in &f.running {
            tensors.push((format!("{}.running_mean", r.name), Tensor::new(vec![r.mean.len()], r.mean.clone())?));
            tensors.push((format!("{}.running_var", r.name), Tensor::new(vec![r.var.len()], r.var.clone())?));
        }
        let config = serde_json::to_string(&CheckpointHeader { kind: KIND.into(), config: self.config.clone() })?;
        Ok(Checkpoint::new(config, tensors))
    }
}

const KIND: &str = "cae";

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    kind: String,
    config: CaeConfig,
}

impl Cae<f32> {
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let header: CheckpointHeader = ck.config_json()?;
        if header.kind != KIND {
            return Err(Error::Format(format!("checkpoint holds a {:?} model, not an autoencoder", header.kind)));
        }
        let mut model = Cae::<f32>::new(header.config, 0)?;
        model.params.load_named(&ck.tensors)?;
        for r in &mut model.running {
            for (suffix, dst) in [("running_mean", &mut r.mean), ("running_var", &mut r.var)] {
                let name = format!("{}.{suffix}", r.name);
                let t = ck.tensor(&name).ok_or_else(|| Error::Format(format!("checkpoint is missing {name}")))?;
                if t.numel() != dst.len() {
                    return Err(Error::Format(format!("{name} has {} values, {} expected", t.numel(), dst.len())));
                }
                dst.copy_from_slice(t.data());
            }
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_profile_ladder() {
        let ladder = shape_ladder(&CaeConfig::full());
        let sizes: Vec<usize> = ladder.iter().map(|s| s.size).collect();
        assert_eq!(sizes, vec![48, 24, 24, 12, 6, 3]);
        let channels: Vec<usize> = ladder.iter().map(|s| s.channels).collect();
        assert_eq!(channels, vec![64, 64, 256, 512, 1024, 2048]);
        assert_eq!(shape_ladder(&CaeConfig::desk()).iter().map(|s| s.size).collect::<Vec<_>>(), sizes);
    }

    #[test]
    fn full_profile_parameter_layout() {
        let cfg = CaeConfig::full();
        let blocks: usize = cfg.stages.iter().map(|s| s.repeats).sum();
        assert_eq!(blocks * 3 + 2, 50);
    }

    #[test]
    fn desk_forward_matches_ladder() {
        let cae = Cae::<f32>::new(CaeConfig::desk(), 1).unwrap();
        let x = Tensor::from_fn(vec![2, 3, 96, 96], |i| (i % 7) as f32 / 7.0);
        let trace = cae.encoder_trace(&x).unwrap();
        let expected: Vec<Vec<usize>> = shape_ladder(cae.config()).iter().map(|s| vec![2, s.channels, s.size, s.size]).collect();
        assert_eq!(trace, expected);
        let z = cae.encode(&x).unwrap();
        assert_eq!(z.shape(), &[2, 128]);
        assert!(z.is_finite());
        let y = cae.decode(&z).unwrap();
        assert_eq!(y.shape(), &[2, 3, 96, 96]);
        assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn encode_is_deterministic_and_zero_maps_to_bias() {
        let cae = Cae::<f32>::new(CaeConfig::desk(), 3).unwrap();
        let x = Tensor::from_fn(vec![1, 3, 96, 96], |i| ((i * 31) % 255) as f32 / 255.0);
        assert_eq!(cae.encode(&x).unwrap(), cae.encode(&x).unwrap());
        let z = cae.encode(&Tensor::zeros(vec![1, 3, 96, 96])).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        let img = cae.decode(&Tensor::zeros(vec![1, 128])).unwrap();
        assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn wrong_shapes_rejected() {
        let cae = Cae::<f32>::new(CaeConfig::desk(), 3).unwrap();
        assert!(matches!(cae.encode(&Tensor::zeros(vec![1, 3, 64, 64])), Err(Error::Shape(_))));
        assert!(matches!(cae.decode(&Tensor::zeros(vec![1, 64])), Err(Error::Shape(_))));
        assert!(cae.encode_faces(&[Tensor::zeros(vec![1, 96, 96])], 4).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut cae = Cae::<f32>::new(CaeConfig::desk(), 5).unwrap();
        cae.running[0].mean[0] = 0.25;
        let ck = Checkpoint::read_from(&mut &cae.to_checkpoint().unwrap().to_bytes()[..]).unwrap();
        let back = Cae::from_checkpoint(&ck).unwrap();
        assert_eq!(back.params.values(), cae.params.values());
        assert_eq!(back.running, cae.running);
        let x = Tensor::from_fn(vec![1, 3, 96, 96], |i| (i % 5) as f32 / 5.0);
        assert_eq!(back.encode(&x).unwrap(), cae.encode(&x).unwrap());
    }
}
