//! Estimator configuration and the on-disk experiment config.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HolonomyError, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WhiteningMode {
    /// Full symmetric inverse square root of the pool covariance.
    Zca,
    /// Featurewise standardization (diagonal).
    Zscore,
    /// Global ZCA for neighbor search, plus per-neighborhood re-whitening of
    /// each edge's clouds (the gauge-drift ablation).
    Local,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Group {
    #[serde(rename = "SO")]
    SpecialOrthogonal,
    #[serde(rename = "O")]
    Orthogonal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NeighborMode {
    /// One k-NN set at the edge midpoint, used for both endpoints.
    Shared,
    /// Independent k-NN sets at each endpoint.
    Separate,
}

/// How the source and target clouds of an edge are formed from its rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CloudMode {
    /// Both clouds are the shared rows minus the midpoint soft center, so
    /// every edge transport is the identity.
    MidpointShared,
    /// Same rows, centered at soft centers anchored at each endpoint.
    EndpointPair,
    /// The shared rows' inputs are carried along the loop motion to each
    /// endpoint and re-evaluated; each cloud is centered with the shared
    /// midpoint weights.
    RowTransport,
}

impl WhiteningMode {
    pub fn as_str(self) -> &'static str {
        match self {
            WhiteningMode::Zca => "zca",
            WhiteningMode::Zscore => "zscore",
            WhiteningMode::Local => "local",
        }
    }
}

impl Group {
    pub fn as_str(self) -> &'static str {
        match self {
            Group::SpecialOrthogonal => "SO",
            Group::Orthogonal => "O",
        }
    }
}

impl NeighborMode {
    pub fn as_str(self) -> &'static str {
        match self {
            NeighborMode::Shared => "shared",
            NeighborMode::Separate => "separate",
        }
    }
}

impl CloudMode {
    pub fn as_str(self) -> &'static str {
        match self {
            CloudMode::MidpointShared => "midpoint-shared",
            CloudMode::EndpointPair => "endpoint-pair",
            CloudMode::RowTransport => "row-transport",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    pub k: usize,
    pub q: usize,
    pub group: Group,
    pub whitening: WhiteningMode,
    pub neighbor_mode: NeighborMode,
    pub centering: CloudMode,
    pub n_pool: usize,
    pub radii: Vec<f64>,
    pub n_points: usize,
    pub seeds: Vec<u64>,
    pub eigen_floor: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            k: 128,
            q: 64,
            group: Group::SpecialOrthogonal,
            whitening: WhiteningMode::Zca,
            neighbor_mode: NeighborMode::Shared,
            centering: CloudMode::RowTransport,
            n_pool: 2048,
            radii: vec![0.01, 0.02, 0.05, 0.10, 0.20],
            n_points: 12,
            seeds: (0..5).collect(),
            eigen_floor: 1e-10,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(HolonomyError::ConfigInvalid(msg));
        if self.k == 0 {
            return bad("k must be positive".into());
        }
        if self.q == 0 {
            return bad("q must be positive".into());
        }
        if self.q > self.k {
            return bad(format!("q = {} exceeds k = {}", self.q, self.k));
        }
        if self.k > self.n_pool {
            return bad(format!("k = {} exceeds n_pool = {}", self.k, self.n_pool));
        }
        if !(self.eigen_floor > 0.0 && self.eigen_floor < 1.0) {
            return bad(format!("eigen_floor {} not in (0, 1)", self.eigen_floor));
        }
        if self.n_points == 0 {
            return bad("n_points must be positive".into());
        }
        if self.radii.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return bad("radii must be finite and non-negative".into());
        }
        Ok(())
    }

    /// Short stable hash of the canonical TOML serialization.
    pub fn hash(&self) -> String {
        let text = toml::to_string(self).expect("config serializes");
        let digest = Sha256::digest(text.as_bytes());
        hex::encode(&digest[..8])
    }
}

/// Which synthetic feature map an experiment uses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MapConfig {
    pub kind: String,
    pub input_dim: usize,
    pub widths: Vec<usize>,
    pub output_dim: usize,
    pub gain: f64,
    pub seed: u64,
}

impl Default for MapConfig {
    fn default() -> Self {
        Self {
            kind: "mlp".into(),
            input_dim: 16,
            widths: vec![64, 32],
            output_dim: 32,
            gain: 1.0,
            seed: 0,
        }
    }
}

/// Top-level experiment file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub estimator: EstimatorConfig,
    #[serde(default)]
    pub map: MapConfig,
    /// Seed of the pool inputs.
    #[serde(default)]
    pub pool_seed: u64,
    /// Number of loops (centers) per seed.
    #[serde(default = "default_loops_per_seed")]
    pub loops_per_seed: usize,
    /// Pool inputs used to fit each loop's PCA plane.
    #[serde(default = "default_plane_neighbors")]
    pub plane_neighbors: usize,
}

fn default_loops_per_seed() -> usize {
    1
}

fn default_plane_neighbors() -> usize {
    512
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            estimator: EstimatorConfig::default(),
            map: MapConfig::default(),
            pool_seed: 0,
            loops_per_seed: 1,
            plane_neighbors: 512,
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| HolonomyError::ConfigInvalid(e.to_string()))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(HolonomyError::ConfigInvalid(format!(
                "schema_version {} unsupported (expected {SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        cfg.estimator.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        hex::encode(&digest[..8])
    }
}
