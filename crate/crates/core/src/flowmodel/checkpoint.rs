//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "MVGRPOCK"
//! version    u32      1
//! P          u64      parameter count
//! data_dim   u64
//! cond_dim   u64
//! time_feat  u64
//! activation u8       0 = silu, 1 = tanh
//! n_hidden   u64
//! hidden     u64 x n_hidden
//! values     f64 x P
//! ```
//!
//! The digest is the SHA-256 of the complete file contents, hex encoded.

use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::mlp::{Activation, PolicyParams, VelocityFieldConfig};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"MVGRPOCK";
pub const VERSION: u32 = 1;

pub fn encode(params: &PolicyParams) -> Vec<u8> {
    let cfg = params.config();
    let mut out = Vec::with_capacity(64 + 8 * params.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    out.extend_from_slice(&(cfg.data_dim as u64).to_le_bytes());
    out.extend_from_slice(&(cfg.cond_dim as u64).to_le_bytes());
    out.extend_from_slice(&(cfg.time_features as u64).to_le_bytes());
    out.push(cfg.activation.code());
    out.extend_from_slice(&(cfg.hidden.len() as u64).to_le_bytes());
    for w in &cfg.hidden {
        out.extend_from_slice(&(*w as u64).to_le_bytes());
    }
    for v in params.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Checkpoint(format!("truncated while reading {what}"))),
        }
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn usize(&mut self, what: &str) -> Result<usize> {
        usize::try_from(self.u64(what)?).map_err(|_| Error::Checkpoint(format!("{what} overflows")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<PolicyParams> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic; not a parameter checkpoint".into()));
    }
    let version = u32::from_le_bytes(r.take(4, "version")?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let count = r.usize("parameter count")?;
    let data_dim = r.usize("data_dim")?;
    let cond_dim = r.usize("cond_dim")?;
    let time_features = r.usize("time_features")?;
    let code = r.take(1, "activation")?[0];
    let activation = Activation::from_code(code)
        .ok_or_else(|| Error::Checkpoint(format!("unknown activation code {code}")))?;
    let n_hidden = r.usize("hidden layer count")?;
    if n_hidden > 64 {
        return Err(Error::Checkpoint(format!("implausible hidden layer count {n_hidden}")));
    }
    let hidden = (0..n_hidden)
        .map(|_| r.usize("hidden width"))
        .collect::<Result<Vec<_>>>()?;
    let config = VelocityFieldConfig {
        data_dim,
        cond_dim,
        hidden,
        time_features,
        activation,
    };
    config
        .validate()
        .map_err(|e| Error::Checkpoint(format!("invalid architecture: {e}")))?;
    if config.param_count() != count {
        return Err(Error::Checkpoint(format!(
            "header declares {count} parameters, architecture implies {}",
            config.param_count()
        )));
    }
    let raw = r.take(count.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?, "values")?;
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let values = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    PolicyParams::from_values(config, values).map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes the checkpoint atomically and returns its digest.
pub fn save(params: &PolicyParams, path: &Path) -> Result<String> {
    let bytes = encode(params);
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(digest(&bytes))
}

pub fn load(path: &Path) -> Result<(PolicyParams, String)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let params = decode(&bytes)?;
    Ok((params, digest(&bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};
    use proptest::prelude::*;

    fn cfg() -> VelocityFieldConfig {
        VelocityFieldConfig {
            data_dim: 2,
            cond_dim: 4,
            hidden: vec![3, 5],
            time_features: 2,
            activation: Activation::Tanh,
        }
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(seed in any::<u64>()) {
            let p = PolicyParams::init(cfg(), &mut stream(seed, Purpose::Init, &[])).unwrap();
            let back = decode(&encode(&p)).unwrap();
            prop_assert_eq!(back, p);
        }
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let p = PolicyParams::init(cfg(), &mut stream(1, Purpose::Init, &[])).unwrap();
        let good = encode(&p);

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(decode(&bad_magic), Err(Error::Checkpoint(_))));

        let mut bad_version = good.clone();
        bad_version[8] = 9;
        let err = decode(&bad_version).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");

        assert!(decode(&good[..good.len() - 3]).is_err());

        let mut trailing = good.clone();
        trailing.push(0);
        assert!(decode(&trailing).is_err());
    }

    #[test]
    fn digest_is_stable() {
        let p = PolicyParams::init(cfg(), &mut stream(1, Purpose::Init, &[])).unwrap();
        assert_eq!(digest(&encode(&p)), digest(&encode(&p.clone())));
        assert_eq!(digest(b"").len(), 64);
    }
}
