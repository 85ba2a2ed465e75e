//! Multi-resolution tile coding.
//!
//! A normalized state in `[0,1]^d` is mapped to a sparse binary feature
//! vector. Every tiling at every resolution contributes exactly one active
//! index, plus an optional always-on baseline unit, so the number of active
//! features is constant for all inputs.
//!
//! Index layout is fixed: resolutions in config order, tilings in index
//! order within a resolution, baseline last. Within a tiling the tile
//! coordinate of dimension `d` has stride `R^d`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TileCoderConfig {
    pub num_tilings_per_resolution: usize,
    pub resolutions: Vec<usize>,
    pub state_dims: usize,
    pub include_baseline: bool,
}

impl Default for TileCoderConfig {
    fn default() -> Self {
        TileCoderConfig {
            num_tilings_per_resolution: 5,
            resolutions: vec![3, 5, 8],
            state_dims: 2,
            include_baseline: true,
        }
    }
}

impl TileCoderConfig {
    /// Total feature count in closed form.
    pub fn total_dim(&self) -> usize {
        let tiles: usize =
            self.resolutions.iter().map(|&r| self.num_tilings_per_resolution * r.pow(self.state_dims as u32)).sum();
        tiles + usize::from(self.include_baseline)
    }

    /// Number of active features for any input.
    pub fn num_active(&self) -> usize {
        self.num_tilings_per_resolution * self.resolutions.len() + usize::from(self.include_baseline)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_tilings_per_resolution == 0 {
            return Err(Error::Config("tile coder needs at least one tiling".into()));
        }
        if self.state_dims == 0 {
            return Err(Error::Config("tile coder needs at least one state dimension".into()));
        }
        if self.resolutions.is_empty() && !self.include_baseline {
            return Err(Error::Config("tile coder has no features".into()));
        }
        if self.resolutions.contains(&0) {
            return Err(Error::Config("tile resolutions must be >= 1".into()));
        }
        Ok(())
    }
}

/// The binary feature vector x(s): strictly increasing active indices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SparseFeatures {
    active: Vec<usize>,
    total_dim: usize,
}

impl SparseFeatures {
    /// Builds a feature vector from arbitrary indices (sorted and deduplicated).
    pub fn new(mut active: Vec<usize>, total_dim: usize) -> Result<Self> {
        active.sort_unstable();
        active.dedup();
        if let Some(&last) = active.last() {
            if last >= total_dim {
                return Err(Error::DimensionMismatch { expected: total_dim, got: last + 1 });
            }
        }
        Ok(SparseFeatures { active, total_dim })
    }

    pub fn active_indices(&self) -> &[usize] {
        &self.active
    }

    pub fn total_dim(&self) -> usize {
        self.total_dim
    }

    pub fn len(&self) -> usize {
        self.active.len()
    }

    pub fn is_empty(&self) -> bool {
        self.active.is_empty()
    }

    /// Dense 0/1 expansion.
    pub fn to_dense(&self) -> Vec<f64> {
        let mut dense = vec![0.0; self.total_dim];
        for &i in &self.active {
            dense[i] = 1.0;
        }
        dense
    }
}

#[derive(Clone, Debug)]
pub struct TileCoder {
    config: TileCoderConfig,
    /// First index of each resolution block.
    block_starts: Vec<usize>,
    total_dim: usize,
}

impl TileCoder {
    pub fn new(config: TileCoderConfig) -> Result<Self> {
        config.validate()?;
        let mut block_starts = Vec::with_capacity(config.resolutions.len());
        let mut next = 0;
        for &r in &config.resolutions {
            block_starts.push(next);
            next += config.num_tilings_per_resolution * r.pow(config.state_dims as u32);
        }
        let total_dim = next + usize::from(config.include_baseline);
        debug_assert_eq!(total_dim, config.total_dim());
        Ok(TileCoder { config, block_starts, total_dim })
    }

    pub fn config(&self) -> &TileCoderConfig {
        &self.config
    }

    pub fn total_dim(&self) -> usize {
        self.total_dim
    }

    pub fn num_active(&self) -> usize {
        self.config.num_active()
    }

    /// Encodes a normalized state. Components are clamped to `[0,1]`.
    pub fn encode(&self, state: &[f64]) -> Result<SparseFeatures> {
        let dims = self.config.state_dims;
        if state.len() != dims {
            return Err(Error::DimensionMismatch { expected: dims, got: state.len() });
        }
        let clamped: Vec<f64> = state.iter().map(|&v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) }).collect();

        let n_t = self.config.num_tilings_per_resolution;
        let mut active = Vec::with_capacity(self.num_active());
        for (&res, &start) in self.config.resolutions.iter().zip(&self.block_starts) {
            let tiles_per_tiling = res.pow(dims as u32);
            for tiling in 0..n_t {
                // Grid displaced by -tiling/(n_t*res): shift in tile units is tiling/n_t.
                let shift = tiling as f64 / n_t as f64;
                let mut tile = 0;
                let mut stride = 1;
                for &v in &clamped {
                    let coord = ((v * res as f64 + shift).floor() as usize).min(res - 1);
                    tile += coord * stride;
                    stride *= res;
                }
                active.push(start + tiling * tiles_per_tiling + tile);
            }
        }
        if self.config.include_baseline {
            active.push(self.total_dim - 1);
        }
        Ok(SparseFeatures { active, total_dim: self.total_dim })
    }
}

/// wᵀx(s) for a binary sparse x.
pub fn sparse_dot(weights: &[f64], features: &SparseFeatures) -> Result<f64> {
    if weights.len() != features.total_dim {
        return Err(Error::DimensionMismatch { expected: features.total_dim, got: weights.len() });
    }
    Ok(features.active.iter().map(|&i| weights[i]).sum())
}
