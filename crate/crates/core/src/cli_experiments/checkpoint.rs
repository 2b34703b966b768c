//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic     8 bytes  "SIMPACKP"
//! version   u32      1
//! config    u64 length + UTF-8 JSON of the experiment config
//! mode      u8       0 = simpa, 1 = maml
//! blocks    u32 count, then per block:
//!             u16 name length + UTF-8 name
//!             u32 ndim + ndim × u64 dims
//!             product(dims) × f64
//! checksum  32 bytes SHA-256 of everything above
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use super::{ExperimentConfig, Mode};
use crate::atomic::write_atomic;
use crate::error::{Error, Result};
use crate::meta_learning::maml::MamlState;
use crate::meta_learning::MetaState;
use crate::networks::{DiscriminatorState, EncoderParams};
use crate::optim::{Optimizer, OptimizerKind};
use crate::stochastic::HyperPosterior;

pub const MAGIC: &[u8; 8] = b"SIMPACKP";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub enum ModelState {
    Simpa(MetaState),
    Maml(MamlState),
}

impl ModelState {
    pub fn iteration(&self) -> u64 {
        match self {
            ModelState::Simpa(s) => s.iteration,
            ModelState::Maml(s) => s.iteration,
        }
    }

    pub fn mode(&self) -> Mode {
        match self {
            ModelState::Simpa(_) => Mode::Simpa,
            ModelState::Maml(_) => Mode::Maml,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub state: ModelState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Block {
    fn vector(name: &str, data: Vec<f64>) -> Self {
        Self { name: name.into(), shape: vec![data.len()], data }
    }
}

fn optimizer_blocks(prefix: &str, o: &Optimizer) -> Vec<Block> {
    let kind = match o.kind {
        OptimizerKind::Adam => 0.0,
        OptimizerKind::Sgd => 1.0,
    };
    vec![
        Block::vector(&format!("{prefix}.settings"), vec![kind, o.lr, o.beta1, o.beta2, o.eps, o.t as f64]),
        Block::vector(&format!("{prefix}.m"), o.m.clone()),
        Block::vector(&format!("{prefix}.v"), o.v.clone()),
    ]
}

fn state_blocks(state: &ModelState) -> Vec<Block> {
    let mut out = Vec::new();
    match state {
        ModelState::Simpa(s) => {
            out.push(Block::vector("hyper.psi", s.hyper.psi.clone()));
            out.push(Block::vector("hyper.scales", vec![s.hyper.sigma_theta, s.hyper.prior_mu0, s.hyper.prior_sigma0]));
            out.push(Block::vector("encoder", s.enc.0.clone()));
            out.push(Block::vector("discriminator", s.disc_meta.0.clone()));
            out.extend(optimizer_blocks("opt.psi", &s.opt_psi));
            out.extend(optimizer_blocks("opt.encoder", &s.opt_enc));
            out.extend(optimizer_blocks("opt.discriminator", &s.opt_disc));
            out.push(Block::vector("iteration", vec![s.iteration as f64]));
        }
        ModelState::Maml(s) => {
            out.push(Block::vector("weights", s.weights.clone()));
            out.extend(optimizer_blocks("opt.weights", &s.opt));
            out.push(Block::vector("iteration", vec![s.iteration as f64]));
        }
    }
    out
}

pub fn encode(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut b = Vec::new();
    b.extend_from_slice(MAGIC);
    b.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = serde_json::to_vec(&ck.config)?;
    b.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
    b.extend_from_slice(&cfg);
    b.push(match ck.state.mode() {
        Mode::Simpa => 0,
        Mode::Maml => 1,
    });
    let blocks = state_blocks(&ck.state);
    b.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
    for blk in &blocks {
        b.extend_from_slice(&(blk.name.len() as u16).to_le_bytes());
        b.extend_from_slice(blk.name.as_bytes());
        b.extend_from_slice(&(blk.shape.len() as u32).to_le_bytes());
        for &d in &blk.shape {
            b.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &blk.data {
            b.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&b);
    b.extend_from_slice(&digest);
    Ok(b)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length overflows usize".into()))
    }
}

/// Header, config and raw blocks, after magic, version and checksum checks.
pub fn decode_blocks(bytes: &[u8]) -> Result<(ExperimentConfig, Mode, Vec<Block>)> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let mut r = Reader { bytes, pos: MAGIC.len() };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}, expected {VERSION}")));
    }
    if bytes.len() < r.pos + DIGEST_LEN {
        return Err(Error::Checkpoint("truncated file".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checkpoint("checksum mismatch (truncated or corrupted file)".into()));
    }
    let mut r = Reader { bytes: body, pos: r.pos };
    let n = r.usize()?;
    let config: ExperimentConfig = serde_json::from_slice(r.take(n)?)?;
    let mode = match r.take(1)?[0] {
        0 => Mode::Simpa,
        1 => Mode::Maml,
        m => return Err(Error::Checkpoint(format!("unknown mode tag {m}"))),
    };
    let count = r.u32()?;
    let mut blocks = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Checkpoint("block name is not UTF-8".into()))?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        let total = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::Checkpoint("block too large".into()))?;
        let raw = r.take(total.checked_mul(8).ok_or_else(|| Error::Checkpoint("block too large".into()))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        blocks.push(Block { name, shape, data });
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", body.len() - r.pos)));
    }
    Ok((config, mode, blocks))
}

struct Blocks(Vec<Block>);

impl Blocks {
    fn get(&mut self, name: &str) -> Result<Vec<f64>> {
        let i = self.0.iter().position(|b| b.name == name).ok_or_else(|| Error::Checkpoint(format!("missing block `{name}`")))?;
        Ok(self.0.swap_remove(i).data)
    }

    fn fixed<const N: usize>(&mut self, name: &str) -> Result<[f64; N]> {
        let v = self.get(name)?;
        v.try_into().map_err(|v: Vec<f64>| Error::Checkpoint(format!("block `{name}` has {} values, expected {N}", v.len())))
    }

    fn optimizer(&mut self, prefix: &str) -> Result<Optimizer> {
        let [kind, lr, beta1, beta2, eps, t] = self.fixed::<6>(&format!("{prefix}.settings"))?;
        let kind = match kind {
            0.0 => OptimizerKind::Adam,
            1.0 => OptimizerKind::Sgd,
            k => return Err(Error::Checkpoint(format!("unknown optimizer kind {k}"))),
        };
        Ok(Optimizer { kind, lr, beta1, beta2, eps, m: self.get(&format!("{prefix}.m"))?, v: self.get(&format!("{prefix}.v"))?, t: t as u64 })
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let (config, mode, blocks) = decode_blocks(bytes)?;
    let mut b = Blocks(blocks);
    let state = match mode {
        Mode::Simpa => {
            let psi = b.get("hyper.psi")?;
            let [sigma_theta, prior_mu0, prior_sigma0] = b.fixed::<3>("hyper.scales")?;
            ModelState::Simpa(MetaState {
                hyper: HyperPosterior { psi, sigma_theta, prior_mu0, prior_sigma0 },
                enc: EncoderParams(b.get("encoder")?),
                disc_meta: DiscriminatorState(b.get("discriminator")?),
                opt_psi: b.optimizer("opt.psi")?,
                opt_enc: b.optimizer("opt.encoder")?,
                opt_disc: b.optimizer("opt.discriminator")?,
                iteration: b.fixed::<1>("iteration")?[0] as u64,
            })
        }
        Mode::Maml => ModelState::Maml(MamlState {
            weights: b.get("weights")?,
            opt: b.optimizer("opt.weights")?,
            iteration: b.fixed::<1>("iteration")?[0] as u64,
        }),
    };
    if let Some(extra) = b.0.first() {
        return Err(Error::Checkpoint(format!("unexpected block `{}`", extra.name)));
    }
    Ok(Checkpoint { config, state })
}

pub fn save(path: &Path, ck: &Checkpoint) -> Result<()> {
    write_atomic(path, &encode(ck)?)
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::meta_learning::maml::MamlState;

    fn small() -> (ExperimentConfig, MetaState) {
        let mut cfg = ExperimentConfig::regression_preset();
        cfg.architecture.latent_dim = 3;
        cfg.architecture.base_hidden = vec![4];
        cfg.architecture.generator_hidden = vec![5];
        cfg.architecture.discriminator_hidden = vec![5];
        cfg.architecture.encoder_hidden = vec![4];
        let env = cfg.environment().unwrap();
        let arch = cfg.architecture_for(&env).unwrap();
        let state = MetaState::init(&arch, &cfg.train).unwrap();
        (cfg, state)
    }

    #[test]
    fn fresh_state_round_trips_bit_identically() {
        let (config, state) = small();
        let ck = Checkpoint { config, state: ModelState::Simpa(state) };
        let bytes = encode(&ck).unwrap();
        assert_eq!(decode(&bytes).unwrap(), ck);
        assert_eq!(encode(&decode(&bytes).unwrap()).unwrap(), bytes);
    }

    #[test]
    fn baseline_state_round_trips() {
        let (config, _) = small();
        let env = config.environment().unwrap();
        let arch = config.architecture_for(&env).unwrap();
        let mut s = MamlState::init(&arch.base, &config.train);
        s.weights[0] = f64::MIN_POSITIVE;
        s.iteration = 7;
        let ck = Checkpoint { config, state: ModelState::Maml(s) };
        assert_eq!(decode(&encode(&ck).unwrap()).unwrap(), ck);
    }

    #[test]
    fn header_corruption_is_reported() {
        let (config, state) = small();
        let bytes = encode(&Checkpoint { config, state: ModelState::Simpa(state) }).unwrap();
        let mut bad = bytes.clone();
        bad[0] ^= 1;
        assert!(matches!(decode(&bad), Err(Error::Checkpoint(m)) if m.contains("magic")));
        let mut bad = bytes.clone();
        bad[8] ^= 1;
        assert!(matches!(decode(&bad), Err(Error::Checkpoint(m)) if m.contains("version")));
        let mut bad = bytes.clone();
        let mid = bad.len() / 2;
        bad[mid] ^= 0x40;
        assert!(matches!(decode(&bad), Err(Error::Checkpoint(m)) if m.contains("checksum")));
        for cut in [4, 12, bytes.len() - 1] {
            assert!(matches!(decode(&bytes[..cut]), Err(Error::Checkpoint(_))));
        }
    }

    #[test]
    fn save_writes_the_whole_file() {
        let dir = tempfile::tempdir().unwrap();
        let (config, state) = small();
        let ck = Checkpoint { config, state: ModelState::Simpa(state) };
        let p = dir.path().join("ck.bin");
        save(&p, &ck).unwrap();
        assert_eq!(load(&p).unwrap(), ck);
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
