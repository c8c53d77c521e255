//! Named parameter storage, network configuration, and the binary
//! checkpoint format shared by every model role.

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{RestoreError, Result};

const CKPT_MAGIC: &[u8; 8] = b"RSTRCKP1";

/// Ablation toggles for the base network.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    /// Skip loading pre-trained expert weights when assembling the base net.
    #[serde(default)]
    pub no_expert_init: bool,
    /// Replace the selective-kernel unit with a squeeze-excitation unit.
    #[serde(default)]
    pub use_se_instead_of_sk: bool,
    /// Remove the gate layers on the h-scale features only.
    #[serde(default)]
    pub no_s_gates: bool,
    /// Remove every gate layer.
    #[serde(default)]
    pub no_gates: bool,
    /// Force every attention weight to exactly 1.
    #[serde(default)]
    pub uniform_attention: bool,
    /// Replace each Bi-SGU with channel concat + one convolution.
    #[serde(default)]
    pub concat_instead_of_bisgu: bool,
}

/// Architecture hyper-parameters of the restorer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// Number of experts N.
    pub n_experts: usize,
    /// SK-DuRBs per expert M (even).
    pub m_blocks: usize,
    /// Base channel width C at the half-resolution scale (2C at quarter scale).
    pub channels: usize,
    /// Negative slope of the leaky rectifier.
    pub leaky_slope: f64,
    /// Use one gate convolution for both SGU terms instead of two.
    pub shared_sgu_gate: bool,
    pub ablation: AblationFlags,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            n_experts: 3,
            m_blocks: 6,
            channels: 32,
            leaky_slope: 0.2,
            shared_sgu_gate: false,
            ablation: AblationFlags::default(),
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_experts < 1 {
            return Err(RestoreError::InvalidInput("n_experts must be >= 1".into()));
        }
        if self.m_blocks < 2 || self.m_blocks % 2 != 0 {
            return Err(RestoreError::InvalidInput(
                "m_blocks must be even and >= 2".into(),
            ));
        }
        if self.channels < 4 {
            return Err(RestoreError::InvalidInput("channels must be >= 4".into()));
        }
        Ok(())
    }

    /// Half-resolution width (C) and quarter-resolution width (2C).
    pub fn widths(&self) -> (usize, usize) {
        (self.channels, 2 * self.channels)
    }
}

/// Pseudo-sample generator architecture (clean -> distorted).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    /// First-layer width; deeper layers are 2x and 4x this.
    pub width: usize,
    pub n_resblocks: usize,
    pub leaky_slope: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self { width: 64, n_resblocks: 9, leaky_slope: 0.2 }
    }
}

/// Discriminator architecture (real/fake distorted images).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    /// First-layer width; deeper layers are 2x, 4x, 8x this.
    pub width: usize,
    pub leaky_slope: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self { width: 64, leaky_slope: 0.2 }
    }
}

/// What a checkpoint holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    SingleExpert,
    BaseR,
    ExpandedH,
    Incremental,
    GeneratorG,
    DiscriminatorD,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::SingleExpert => "single_expert",
            Role::BaseR => "base_R",
            Role::ExpandedH => "expanded_H",
            Role::Incremental => "incremental",
            Role::GeneratorG => "generator_G",
            Role::DiscriminatorD => "discriminator_D",
        }
    }
}

/// Architecture description embedded in a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelConfig {
    Network(NetworkConfig),
    Generator(GeneratorConfig),
    Discriminator(DiscriminatorConfig),
}

impl ModelConfig {
    pub fn network(&self) -> Result<&NetworkConfig> {
        match self {
            ModelConfig::Network(c) => Ok(c),
            _ => Err(RestoreError::InvalidCheckpoint(
                "expected a restorer network config".into(),
            )),
        }
    }
}

/// Flat map from unique parameter names to shaped f64 arrays.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    map: BTreeMap<String, ArrayD<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.map.get(name)
    }

    pub fn expect(&self, name: &str) -> &ArrayD<f64> {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter '{name}'"))
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<f64>) {
        let name = name.into();
        assert!(
            self.map.insert(name.clone(), value).is_none(),
            "duplicate parameter '{name}'"
        );
    }

    pub fn set(&mut self, name: &str, value: ArrayD<f64>) {
        let slot = self
            .map
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"));
        assert_eq!(slot.shape(), value.shape(), "shape change for '{name}'");
        *slot = value;
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ArrayD<f64>> {
        self.map.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f64>)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn total_len(&self) -> usize {
        self.map.values().map(|a| a.len()).sum()
    }

    /// Zero both the weights and bias of one layer (`name.w`, `name.b`).
    pub fn zero_layer(&mut self, layer: &str) {
        for suffix in [".w", ".b"] {
            let key = format!("{layer}{suffix}");
            if let Some(a) = self.map.get_mut(&key) {
                a.fill(0.0);
            }
        }
    }

    /// Copy every parameter under `src_prefix` in `other` to `dst_prefix` here.
    /// Fails if a destination name does not already exist with the same shape.
    pub fn copy_prefix(&mut self, other: &ParamStore, src_prefix: &str, dst_prefix: &str) -> Result<usize> {
        let mut n = 0;
        for (name, value) in other.map.iter() {
            if let Some(rest) = name.strip_prefix(src_prefix) {
                let dst = format!("{dst_prefix}{rest}");
                let slot = self.map.get_mut(&dst).ok_or_else(|| {
                    RestoreError::InvalidCheckpoint(format!("no parameter '{dst}' to copy into"))
                })?;
                if slot.shape() != value.shape() {
                    return Err(RestoreError::InvalidCheckpoint(format!(
                        "shape mismatch copying '{name}' -> '{dst}'"
                    )));
                }
                *slot = value.clone();
                n += 1;
            }
        }
        Ok(n)
    }

    /// SHA-256 over the serialized bytes of every parameter whose name
    /// matches the filter, in sorted-name order.
    pub fn hash_filtered<F: Fn(&str) -> bool>(&self, filter: F) -> String {
        let mut hasher = Sha256::new();
        for (name, value) in &self.map {
            if !filter(name) {
                continue;
            }
            hasher.update(name.as_bytes());
            for v in value.iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        hex_string(&hasher.finalize())
    }

    pub fn hash_all(&self) -> String {
        self.hash_filtered(|_| true)
    }

    /// Every value must be finite.
    pub fn validate_finite(&self) -> Result<()> {
        for (name, value) in &self.map {
            if !value.iter().all(|v| v.is_finite()) {
                return Err(RestoreError::Invariant(format!(
                    "non-finite values in parameter '{name}'"
                )));
            }
        }
        Ok(())
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// He-style normal initialization, seeded per parameter name so that
/// initialization is independent of creation order.
pub fn he_normal(shape: &[usize], fan_in: usize, name: &str, seed: u64) -> ArrayD<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name));
    let std = (2.0 / fan_in as f64).sqrt();
    ArrayD::from_shape_fn(IxDyn(shape), |_| {
        // Box-Muller keeps us off rand_distr's ziggurat tables here, so the
        // stream depends only on (seed, name).
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        std * (-2.0 * u1.ln()).sqrt() * u2.cos()
    })
}

pub fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}

/// Header metadata stored alongside the parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointHeader {
    format_version: u32,
    role: Role,
    config: ModelConfig,
    steps: u64,
}

/// A model snapshot: role + architecture config + named parameters.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub role: Role,
    pub config: ModelConfig,
    pub params: ParamStore,
    /// Training steps taken to produce these parameters.
    pub steps: u64,
}

impl Checkpoint {
    pub fn new(role: Role, config: ModelConfig, params: ParamStore) -> Self {
        Self { role, config, params, steps: 0 }
    }

    pub fn require_role(&self, roles: &[Role]) -> Result<()> {
        if roles.contains(&self.role) {
            Ok(())
        } else {
            Err(RestoreError::InvalidCheckpoint(format!(
                "role {} not usable here (expected one of {:?})",
                self.role.as_str(),
                roles.iter().map(|r| r.as_str()).collect::<Vec<_>>()
            )))
        }
    }

    /// Serialize to the versioned binary format. Byte-stable: saving a
    /// loaded checkpoint reproduces the identical file.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = CheckpointHeader {
            format_version: 1,
            role: self.role,
            config: self.config.clone(),
            steps: self.steps,
        };
        let hjson = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&(hjson.len() as u32).to_le_bytes());
        out.extend_from_slice(&hjson);
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for (name, value) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(value.ndim() as u32).to_le_bytes());
            for d in value.shape() {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in value.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = std::io::Cursor::new(bytes);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CKPT_MAGIC {
            return Err(RestoreError::InvalidCheckpoint("bad magic".into()));
        }
        let hlen = read_u32(&mut r)? as usize;
        let mut hbytes = vec![0u8; hlen];
        r.read_exact(&mut hbytes)?;
        let header: CheckpointHeader = serde_json::from_slice(&hbytes)
            .map_err(|e| RestoreError::InvalidCheckpoint(format!("bad header: {e}")))?;
        if header.format_version != 1 {
            return Err(RestoreError::InvalidCheckpoint(format!(
                "unsupported format version {}",
                header.format_version
            )));
        }
        let n = read_u64(&mut r)? as usize;
        let mut params = ParamStore::new();
        for _ in 0..n {
            let nlen = read_u32(&mut r)? as usize;
            let mut nbytes = vec![0u8; nlen];
            r.read_exact(&mut nbytes)?;
            let name = String::from_utf8(nbytes)
                .map_err(|_| RestoreError::InvalidCheckpoint("non-utf8 name".into()))?;
            let ndim = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(read_u64(&mut r)? as usize);
            }
            let len: usize = shape.iter().product();
            let mut data = Vec::with_capacity(len);
            let mut buf = [0u8; 8];
            for _ in 0..len {
                r.read_exact(&mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            params.insert(name, ArrayD::from_shape_vec(IxDyn(&shape), data).unwrap());
        }
        Ok(Self { role: header.role, config: header.config, params, steps: header.steps })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip_is_byte_stable() {
        let mut params = ParamStore::new();
        params.insert("a.w", he_normal(&[2, 3], 3, "a.w", 1));
        params.insert("a.b", ArrayD::zeros(IxDyn(&[2])));
        params.insert("z.w", he_normal(&[4], 4, "z.w", 1));
        let ckpt = Checkpoint::new(
            Role::BaseR,
            ModelConfig::Network(NetworkConfig::default()),
            params,
        );
        let bytes = ckpt.to_bytes();
        let loaded = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(loaded.to_bytes(), bytes);
        assert_eq!(loaded.params, ckpt.params);
        assert_eq!(loaded.role, Role::BaseR);
    }

    #[test]
    fn init_is_independent_of_creation_order() {
        let a1 = he_normal(&[3, 3], 9, "x.w", 7);
        let _ = he_normal(&[5], 5, "other", 7);
        let a2 = he_normal(&[3, 3], 9, "x.w", 7);
        assert_eq!(a1, a2);
    }

    #[test]
    fn hash_changes_with_values() {
        let mut p = ParamStore::new();
        p.insert("m.w", ArrayD::from_elem(IxDyn(&[2]), 1.0));
        let h1 = p.hash_all();
        p.get_mut("m.w").unwrap()[[0]] = 2.0;
        assert_ne!(p.hash_all(), h1);
    }

    #[test]
    fn config_validation_catches_odd_m() {
        let cfg = NetworkConfig { m_blocks: 5, ..NetworkConfig::default() };
        assert!(cfg.validate().is_err());
    }
}
