//! Binary checkpoint container.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header (config digest, step, seed, label universe, network specs, tensor
//! shapes), the tensors as little-endian `f64` in header order, and a
//! trailing SHA-256 of everything before it.

use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::arch::NetworkSpec;
use crate::label::LabelUniverse;
use crate::nn::Generator;
use crate::optim::Adam;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"STGNCKPT";
const VERSION: u32 = 1;

/// Adam moments and step count for one network.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub step: u64,
    pub m: Vec<ArrayD<f64>>,
    pub v: Vec<ArrayD<f64>>,
}

impl OptState {
    pub fn of(adam: &Adam) -> Self {
        Self { step: adam.step, m: adam.m.clone(), v: adam.v.clone() }
    }

    pub fn restore_into(&self, adam: &mut Adam) -> Result<()> {
        let same = |a: &[ArrayD<f64>], b: &[ArrayD<f64>]| {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.shape() == y.shape())
        };
        if !same(&self.m, &adam.m) || !same(&self.v, &adam.v) {
            return Err(Error::Checkpoint("optimizer state shapes do not match the network".into()));
        }
        adam.step = self.step;
        adam.m = self.m.clone();
        adam.v = self.v.clone();
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    /// Completed steps.
    pub step: u64,
    pub seed: u64,
    pub universe: LabelUniverse,
    pub generator_spec: NetworkSpec,
    pub discriminator_spec: NetworkSpec,
    pub generator: Vec<ArrayD<f64>>,
    pub discriminator: Vec<ArrayD<f64>>,
    pub g_opt: OptState,
    pub d_opt: OptState,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config_hash: String,
    step: u64,
    seed: u64,
    universe: LabelUniverse,
    generator_spec: NetworkSpec,
    discriminator_spec: NetworkSpec,
    g_opt_step: u64,
    d_opt_step: u64,
    /// Shapes of the tensor groups: generator, discriminator, then the
    /// generator's first and second moments and the discriminator's.
    groups: Vec<Vec<Vec<usize>>>,
}

fn shapes(t: &[ArrayD<f64>]) -> Vec<Vec<usize>> {
    t.iter().map(|a| a.shape().to_vec()).collect()
}

impl Checkpoint {
    fn groups(&self) -> [&Vec<ArrayD<f64>>; 6] {
        [
            &self.generator,
            &self.discriminator,
            &self.g_opt.m,
            &self.g_opt.v,
            &self.d_opt.m,
            &self.d_opt.v,
        ]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            config_hash: self.config_hash.clone(),
            step: self.step,
            seed: self.seed,
            universe: self.universe.clone(),
            generator_spec: self.generator_spec.clone(),
            discriminator_spec: self.discriminator_spec.clone(),
            g_opt_step: self.g_opt.step,
            d_opt_step: self.d_opt.step,
            groups: self.groups().iter().map(|g| shapes(g)).collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for group in self.groups() {
            for t in group.iter() {
                for v in t.iter() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_owned());
        if bytes.len() < 8 + 4 + 8 + 32 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("checksum mismatch; the file is truncated or corrupted"));
        }
        let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
        let header_end = 20usize.checked_add(hlen).filter(|&e| e <= body.len()).ok_or_else(|| bad("header length out of range"))?;
        let header: Header = serde_json::from_slice(&body[20..header_end])
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        if header.groups.len() != 6 {
            return Err(bad("expected six tensor groups"));
        }
        let mut data = body[header_end..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let total: usize = header.groups.iter().flatten().map(|s| s.iter().product::<usize>()).sum();
        if (body.len() - header_end) != total * 8 {
            return Err(bad("tensor payload size does not match the header"));
        }
        let mut groups = header.groups.iter().map(|g| {
            g.iter()
                .map(|s| {
                    let n = s.iter().product();
                    ArrayD::from_shape_vec(IxDyn(s), data.by_ref().take(n).collect()).expect("length checked")
                })
                .collect::<Vec<_>>()
        });
        let mut next = || groups.next().expect("six groups");
        let (generator, discriminator) = (next(), next());
        let (gm, gv, dm, dv) = (next(), next(), next(), next());
        Ok(Self {
            config_hash: header.config_hash,
            step: header.step,
            seed: header.seed,
            universe: header.universe,
            generator_spec: header.generator_spec,
            discriminator_spec: header.discriminator_spec,
            generator,
            discriminator,
            g_opt: OptState { step: header.g_opt_step, m: gm, v: gv },
            d_opt: OptState { step: header.d_opt_step, m: dm, v: dv },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        // Write-then-rename so a crash never leaves a half-written checkpoint.
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }

    /// The trained generator alone, for translation.
    pub fn generator(&self) -> Result<Generator> {
        let mut rng = crate::rng::substream(0, "unused", 0);
        let mut g = Generator::materialize(&self.generator_spec, &mut rng)?;
        g.network_mut().set_param_values(self.generator.clone())?;
        Ok(g)
    }
}
