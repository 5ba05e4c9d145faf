use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::model::{Cae, CaeConfig};
use crate::error::{Error, Result};
use crate::numerics::{AdamConfig, AdamState, Graph, Scalar, Tensor};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaeTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for CaeTrainConfig {
    fn default() -> Self {
        Self { epochs: 32, batch_size: 32, lr: 1e-3, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaeTrainReport {
    /// Mean training-mode reconstruction MSE of every epoch.
    pub epoch_mse: Vec<f64>,
}

fn stack<T: Scalar>(faces: &[&Tensor<T>], size: usize) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(faces.len() * 3 * size * size);
    for f in faces {
        if f.shape() != [3, size, size] {
            return Err(Error::Shape(format!("face tensor {:?}, expected [3, {size}, {size}]", f.shape())));
        }
        data.extend_from_slice(f.data());
    }
    Tensor::new(vec![faces.len(), 3, size, size], data)
}

/// Inference-mode MSE between `batch` and its reconstruction.
pub fn reconstruction_loss<T: Scalar>(cae: &Cae<T>, batch: &Tensor<T>) -> Result<f64> {
    let recon = cae.decode(&cae.encode(batch)?)?;
    let n = batch.numel() as f64;
    Ok(batch.data().iter().zip(recon.data()).map(|(a, b)| (*a - *b).to_f64().unwrap_or(f64::NAN).powi(2)).sum::<f64>() / n)
}

/// Fit an autoencoder to `[3, S, S]` face tensors with MSE and Adam.
pub fn train_cae(faces: &[Tensor<f32>], model: CaeConfig, cfg: &CaeTrainConfig) -> Result<(Cae<f32>, CaeTrainReport)> {
    if faces.is_empty() {
        return Err(Error::Data("autoencoder training set is empty".into()));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::Config("epochs and batch size must be positive".into()));
    }
    let size = model.input_size;
    let mut cae = Cae::<f32>::new(model, cfg.seed)?;
    let mut adam = AdamState::for_params(cae.params(), AdamConfig::with_lr(cfg.lr));
    let mut rng = seed::rng(cfg.seed, "cae.shuffle");
    let mut order: Vec<usize> = (0..faces.len()).collect();
    let mut epoch_mse = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0f64;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Tensor<f32>> = chunk.iter().map(|&i| &faces[i]).collect();
            let x = stack(&batch, size)?;
            let mut g = Graph::new();
            let bound = cae.params().bind(&mut g);
            let xv = g.constant(x.clone());
            let fwd = cae.forward(&mut g, &bound, xv, true)?;
            let loss = g.mse(fwd.recon, x)?;
            let value = g.value(loss).item()? as f64;
            if !value.is_finite() {
                return Err(Error::Numeric(format!("autoencoder loss diverged at epoch {}", epoch + 1)));
            }
            total += value * chunk.len() as f64;
            let mut grads = g.backward(loss)?;
            let grads = cae.params().gradients(&bound, &mut grads);
            cae.update_running(&g, &fwd.bn_out);
            adam.update(cae.params_mut(), &grads)?;
        }
        let mse = total / faces.len() as f64;
        log::info!("cae epoch {}/{}: mse {mse:.6}", epoch + 1, cfg.epochs);
        epoch_mse.push(mse);
    }
    Ok((cae, CaeTrainReport { epoch_mse }))
}
