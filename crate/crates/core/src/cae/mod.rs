//! Convolutional autoencoder: a bottleneck-residual encoder from 96×96 faces
//! to 128-d latents and a mirrored decoder back to images.

mod latents;
mod model;
mod train;

pub use latents::{read_latents, write_latents, LatentRecord, LatentStore};
pub use model::{shape_ladder, Cae, CaeConfig, LadderStage, StageSpec};
pub use train::{reconstruction_loss, train_cae, CaeTrainConfig, CaeTrainReport};

use crate::error::{Error, Result};

/// Latent width used throughout the pipeline.
pub const LATENT_DIM: usize = 128;

/// `u·v / (‖u‖‖v‖)`.
pub fn cosine_similarity(u: &[f32], v: &[f32]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Shape(format!("cosine of {} and {} dims", u.len(), v.len())));
    }
    let (mut dot, mut nu, mut nv) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in u.iter().zip(v) {
        let (a, b) = (a as f64, b as f64);
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Numeric("cosine similarity of a zero vector".into()));
    }
    Ok((dot / (nu.sqrt() * nv.sqrt())).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cosine_examples() {
        let u = [0.3f32, -1.2, 4.0];
        assert!((cosine_similarity(&u, &u).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]).is_err());
        assert!(cosine_similarity(&[1.0], &[1.0, 0.0]).is_err());
    }

    proptest! {
        #[test]
        fn cosine_symmetric_and_scale_invariant(
            uv in proptest::collection::vec((-5f32..5.0, -5f32..5.0), 1..64),
            a in 0.01f32..100.0,
            b in 0.01f32..100.0,
        ) {
            let u: Vec<f32> = uv.iter().map(|p| p.0).collect();
            let v: Vec<f32> = uv.iter().map(|p| p.1).collect();
            prop_assume!(u.iter().any(|&x| x.abs() > 1e-3) && v.iter().any(|&x| x.abs() > 1e-3));
            let c = cosine_similarity(&u, &v).unwrap();
            prop_assert!((c - cosine_similarity(&v, &u).unwrap()).abs() < 1e-12);
            let su: Vec<f32> = u.iter().map(|x| x * a).collect();
            let sv: Vec<f32> = v.iter().map(|x| x * b).collect();
            prop_assert!((c - cosine_similarity(&su, &sv).unwrap()).abs() < 1e-6);
            prop_assert!((-1.0..=1.0).contains(&c));
        }
    }
}
