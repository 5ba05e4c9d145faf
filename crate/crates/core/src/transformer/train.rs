use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::model::{SequenceInput, Transformer};
use super::TransformerConfig;
use crate::error::{Error, Result};
use crate::numerics::{AdamConfig, AdamState, Graph};
use crate::seed;
use crate::types::Label;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Positive-class weighted cross-entropy with `β = #NC / #MCI`.
    Wbce,
    Bce,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Wbce => "wbce",
            LossKind::Bce => "bce",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wbce" => Ok(LossKind::Wbce),
            "bce" => Ok(LossKind::Bce),
            _ => Err(Error::Config(format!("unknown loss {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub loss: LossKind,
    pub seed: u64,
}

impl Default for TransformerTrainConfig {
    fn default() -> Self {
        Self { epochs: 40, batch_size: 32, lr: 1e-4, loss: LossKind::Wbce, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub beta: f64,
    pub epoch_loss: Vec<f64>,
}

/// `#NC / #MCI` over the training sequences.
pub fn class_weight(labels: impl IntoIterator<Item = Label>) -> Result<f64> {
    let (mut nc, mut mci) = (0usize, 0usize);
    for l in labels {
        match l {
            Label::Nc => nc += 1,
            Label::Mci => mci += 1,
        }
    }
    if mci == 0 || nc == 0 {
        return Err(Error::Data(format!("training sequences need both classes ({nc} NC, {mci} MCI)")));
    }
    Ok(nc as f64 / mci as f64)
}

/// Train a fresh model on labelled sequences with Adam and no early stopping.
pub fn train_transformer(
    config: TransformerConfig,
    data: &[(SequenceInput<'_, f32>, Label)],
    cfg: &TransformerTrainConfig,
) -> Result<(Transformer<f32>, TrainReport)> {
    if data.is_empty() {
        return Err(Error::Data("no training sequences".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let beta = match cfg.loss {
        LossKind::Wbce => class_weight(data.iter().map(|d| d.1))?,
        LossKind::Bce => 1.0,
    };
    let mut model = Transformer::<f32>::new(config, seed::derive(cfg.seed, "transformer.model"))?;
    let mut adam = AdamState::for_params(model.params(), AdamConfig::with_lr(cfg.lr));
    let mut order_rng = seed::rng(cfg.seed, "transformer.shuffle");
    let mut drop_rng = seed::rng(cfg.seed, "transformer.dropout");
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<SequenceInput<f32>> = chunk.iter().map(|&i| data[i].0).collect();
            let labels: Vec<f32> = chunk.iter().map(|&i| data[i].1.target() as f32).collect();
            let mut g = Graph::new();
            let bound = model.params().bind(&mut g);
            let f = model.forward(&mut g, &bound, &batch, Some(&mut drop_rng))?;
            let p = g.narrow(f.probs, 1, 1, 1)?;
            let p = g.reshape(p, &[chunk.len()])?;
            let loss = g.weighted_bce(p, labels, beta as f32)?;
            let value = g.value(loss).item()? as f64;
            if !value.is_finite() {
                return Err(Error::Numeric(format!("transformer loss diverged at epoch {}", epoch + 1)));
            }
            total += value * chunk.len() as f64;
            let mut grads = g.backward(loss)?;
            let grads = model.params().gradients(&bound, &mut grads);
            adam.update(model.params_mut(), &grads)?;
        }
        epoch_loss.push(total / data.len() as f64);
    }
    Ok((model, TrainReport { beta, epoch_loss }))
}

/// Inference-mode MCI probability of every sequence.
pub fn predict(model: &Transformer<f32>, data: &[SequenceInput<'_, f32>], batch_size: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.chunks(batch_size.max(1)) {
        let probs = model.forward_eval(chunk)?;
        for row in probs.data().chunks(2) {
            if !row[1].is_finite() {
                return Err(Error::Numeric("non-finite prediction".into()));
            }
            out.push(row[1] as f64);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn class_weight_is_ratio() {
        let labels = [Label::Nc, Label::Nc, Label::Nc, Label::Mci, Label::Mci];
        assert_eq!(class_weight(labels).unwrap(), 1.5);
        assert!(class_weight([Label::Nc]).is_err());
    }

    #[test]
    fn learns_a_separable_signal() {
        let mut cfg = TransformerConfig::new(4);
        cfg.num_layers = 1;
        cfg.hidden_dim = 16;
        cfg.max_sequences = 8;
        cfg.max_segments = 8;
        let mut rng = seed::rng(1, "data");
        let seqs: Vec<(Vec<f32>, Label)> = (0..64)
            .map(|i| {
                let label = if i % 2 == 0 { Label::Mci } else { Label::Nc };
                let shift = if label == Label::Mci { 0.6 } else { -0.6 };
                ((0..4 * 16).map(|_| rng.random_range(-1.0..1.0f32) + shift).collect(), label)
            })
            .collect();
        let data: Vec<(SequenceInput, Label)> = seqs.iter().map(|(z, l)| (SequenceInput::new(&z[..], 0, 0), *l)).collect();
        let tc = TransformerTrainConfig { epochs: 15, batch_size: 16, lr: 1e-3, loss: LossKind::Wbce, seed: 3 };
        let (model, report) = train_transformer(cfg.clone(), &data, &tc).unwrap();
        assert_eq!(report.beta, 1.0);
        assert!(report.epoch_loss.last().unwrap() < &report.epoch_loss[0]);
        let inputs: Vec<SequenceInput> = data.iter().map(|d| d.0).collect();
        let p = predict(&model, &inputs, 8).unwrap();
        let correct = p.iter().zip(&data).filter(|(p, d)| (**p >= 0.5) == d.1.is_positive()).count();
        assert!(correct >= 60, "{correct}/64");

        let (again, _) = train_transformer(cfg, &data, &tc).unwrap();
        assert_eq!(again.params().values(), model.params().values());
    }
}
