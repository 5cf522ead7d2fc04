//! Deterministic stand-in for a pretrained tile encoder.

use crate::error::{Error, Result};
use crate::rng::{self, derive_seed};
use crate::tensor::{DType, Tensor};

use super::templates::VISIBLE_SLOTS;

pub const NOISE_STD: f64 = 0.1;

/// Fixed random basis vector per (visible slot, value), each drawn from
/// `N(0, 1/D)` so basis vectors have roughly unit norm.
#[derive(Clone, Debug)]
pub struct StubEncoder {
    feature_dim: usize,
    seed: u64,
    noise_std: f64,
    basis: Vec<Vec<Vec<f64>>>,
}

impl StubEncoder {
    pub fn new(feature_dim: usize, seed: u64) -> Result<Self> {
        Self::with_noise(feature_dim, seed, NOISE_STD)
    }

    pub fn with_noise(feature_dim: usize, seed: u64, noise_std: f64) -> Result<Self> {
        if feature_dim < VISIBLE_SLOTS.len() {
            return Err(Error::invalid(format!(
                "feature_dim {feature_dim} is smaller than the {} visible attributes",
                VISIBLE_SLOTS.len()
            )));
        }
        let std = (1.0 / feature_dim as f64).sqrt();
        let basis = VISIBLE_SLOTS
            .iter()
            .map(|slot| {
                (0..slot.values.len())
                    .map(|v| {
                        let mut r = rng::rng_for(seed, &format!("basis/{}/{v}", slot.name));
                        rng::normal_vec(&mut r, feature_dim, std)
                    })
                    .collect()
            })
            .collect();
        Ok(StubEncoder {
            feature_dim,
            seed,
            noise_std,
            basis,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    /// Feature vector of tile `tile_index` of case `case_key`. Only the visible
    /// attribute values enter; the noise stream is keyed by case and tile.
    pub fn encode(&self, visible: &[usize], case_key: &str, tile_index: usize) -> Result<Vec<f64>> {
        if visible.len() != self.basis.len() {
            return Err(Error::invalid("one value per visible attribute expected"));
        }
        let mut r = rng::rng_from(derive_seed(self.seed, &format!("tile/{case_key}/{tile_index}")));
        let mut out = rng::normal_vec(&mut r, self.feature_dim, self.noise_std);
        for (slot, &v) in visible.iter().enumerate() {
            let b = self.basis[slot]
                .get(v)
                .ok_or_else(|| Error::invalid(format!("value {v} out of range for slot {slot}")))?;
            out.iter_mut().zip(b).for_each(|(o, x)| *o += x);
        }
        Ok(out.into_iter().map(|x| x as f32 as f64).collect())
    }

    pub fn encode_bag(&self, visible: &[usize], case_key: &str, n_tiles: usize) -> Result<Tensor> {
        let mut data = Vec::with_capacity(n_tiles * self.feature_dim);
        for t in 0..n_tiles {
            data.extend(self.encode(visible, case_key, t)?);
        }
        Tensor::new(vec![n_tiles, self.feature_dim], DType::Float32, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_case_and_tile() {
        let e = StubEncoder::new(16, 1).unwrap();
        let v = [0, 1, 2, 0, 1, 0];
        assert_eq!(e.encode(&v, "c1", 3).unwrap(), e.encode(&v, "c1", 3).unwrap());
        assert_ne!(e.encode(&v, "c1", 3).unwrap(), e.encode(&v, "c1", 4).unwrap());
    }

    #[test]
    fn too_narrow_is_an_error() {
        assert!(StubEncoder::new(5, 1).is_err());
    }
}
