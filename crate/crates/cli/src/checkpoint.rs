//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic            8 bytes, b"TSNCAv01"
//! fingerprint      u64 length + UTF-8 bytes
//! tensor count     u64
//! per tensor       u64 name length + UTF-8 name,
//!                  u64 rank, u64 extents × rank,
//!                  f32 values × product(extents)
//! optimizer flag   u8 (0 or 1)
//! optimizer table  same layout as the tensor table, when the flag is 1
//! training step    u64
//! ```
//!
//! Round trips are bit-exact; the same container carries feature-extractor
//! weights. The fingerprint is a canonical architecture string rather than
//! an opaque hash so a checkpoint is loadable without out-of-band config
//! and mismatch errors stay readable.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use tsnca_core::nn::UNetConfig;
use tsnca_core::optim::{Adam, AdamConfig};
use tsnca_core::Tensor;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"TSNCAv01";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub fingerprint: String,
    pub tensors: BTreeMap<String, Tensor<f32>>,
    pub optimizer: Option<BTreeMap<String, Tensor<f32>>>,
    pub step: u64,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        write_bytes(&mut buf, self.fingerprint.as_bytes());
        write_table(&mut buf, &self.tensors);
        match &self.optimizer {
            Some(table) => {
                buf.push(1);
                write_table(&mut buf, table);
            }
            None => buf.push(0),
        }
        buf.extend_from_slice(&self.step.to_le_bytes());
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&buf).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .map_err(|e| Error::io(path, e))?
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
        let mut reader = Reader {
            bytes: &bytes,
            pos: 0,
            path,
        };
        let magic = reader.take(8, "magic header")?;
        if magic != MAGIC {
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
            });
        }
        let fingerprint = reader.read_string("fingerprint")?;
        let tensors = read_table(&mut reader, "tensor")?;
        let flag = reader.take(1, "optimizer flag")?[0];
        let optimizer = match flag {
            0 => None,
            1 => Some(read_table(&mut reader, "optimizer tensor")?),
            other => {
                return Err(Error::Other(format!(
                    "checkpoint {} has invalid optimizer flag {}",
                    path.display(),
                    other
                )))
            }
        };
        let step = reader.read_u64("training step")?;
        Ok(Checkpoint {
            fingerprint,
            tensors,
            optimizer,
            step,
        })
    }
}

fn write_bytes(buf: &mut Vec<u8>, bytes: &[u8]) {
    buf.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
    buf.extend_from_slice(bytes);
}

fn write_table(buf: &mut Vec<u8>, table: &BTreeMap<String, Tensor<f32>>) {
    buf.extend_from_slice(&(table.len() as u64).to_le_bytes());
    for (name, tensor) in table {
        write_bytes(buf, name.as_bytes());
        buf.extend_from_slice(&(tensor.shape().len() as u64).to_le_bytes());
        for &extent in tensor.shape() {
            buf.extend_from_slice(&(extent as u64).to_le_bytes());
        }
        for &value in tensor.data() {
            buf.extend_from_slice(&value.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, context: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                context: context.to_string(),
            });
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn read_u64(&mut self, context: &str) -> Result<u64> {
        let bytes = self.take(8, context)?;
        Ok(u64::from_le_bytes(bytes.try_into().expect("8 bytes")))
    }

    fn read_string(&mut self, context: &str) -> Result<String> {
        let len = self.read_u64(context)? as usize;
        let bytes = self.take(len, context)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| {
            Error::Other(format!(
                "checkpoint {} has non-UTF-8 {}",
                self.path.display(),
                context
            ))
        })
    }
}

fn read_table(reader: &mut Reader, kind: &str) -> Result<BTreeMap<String, Tensor<f32>>> {
    let count = reader.read_u64(&format!("{kind} count"))?;
    let mut table = BTreeMap::new();
    for i in 0..count {
        let name = reader.read_string(&format!("{kind} name (entry {i} of {count})"))?;
        let rank = reader.read_u64(&format!("rank of `{name}`"))? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(reader.read_u64(&format!("extents of `{name}`"))? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = reader.take(numel * 4, &format!("values of `{name}`"))?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let tensor = Tensor::new(shape, data)?;
        table.insert(name, tensor);
    }
    Ok(table)
}

/// Which pipeline stage a checkpoint belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Enhancer,
    Restorer,
}

impl Role {
    fn as_str(self) -> &'static str {
        match self {
            Role::Enhancer => "enhancer",
            Role::Restorer => "restorer",
        }
    }
}

/// Parsed checkpoint fingerprint: role, architecture, and (for the
/// enhancer) whether it was trained with H and S in its input.
#[derive(Clone, Debug, PartialEq)]
pub struct StageFingerprint {
    pub role: Role,
    pub config: UNetConfig,
    pub hs_input: bool,
}

impl StageFingerprint {
    pub fn enhancer(config: UNetConfig, hs_input: bool) -> Self {
        StageFingerprint {
            role: Role::Enhancer,
            config,
            hs_input,
        }
    }

    pub fn restorer(config: UNetConfig) -> Self {
        StageFingerprint {
            role: Role::Restorer,
            config,
            hs_input: true,
        }
    }

    pub fn encode(&self) -> String {
        match self.role {
            Role::Enhancer => {
                format!(
                    "enhancer;hs_input={};{}",
                    self.hs_input,
                    self.config.fingerprint()
                )
            }
            Role::Restorer => format!("restorer;{}", self.config.fingerprint()),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let malformed = || Error::MalformedFingerprint(s.to_string());
        if let Some(rest) = s.strip_prefix("enhancer;") {
            let (hs, unet) = rest.split_once(';').ok_or_else(malformed)?;
            let hs_input = match hs {
                "hs_input=true" => true,
                "hs_input=false" => false,
                _ => return Err(malformed()),
            };
            let config = UNetConfig::from_fingerprint(unet).map_err(|_| malformed())?;
            Ok(StageFingerprint {
                role: Role::Enhancer,
                config,
                hs_input,
            })
        } else if let Some(unet) = s.strip_prefix("restorer;") {
            let config = UNetConfig::from_fingerprint(unet).map_err(|_| malformed())?;
            Ok(StageFingerprint {
                role: Role::Restorer,
                config,
                hs_input: true,
            })
        } else {
            Err(malformed())
        }
    }

    /// Parses and checks the role, turning a wrong-architecture load into a
    /// structured error instead of a crash further in.
    pub fn expect(checkpoint: &Checkpoint, role: Role) -> Result<Self> {
        let parsed = Self::parse(&checkpoint.fingerprint)?;
        if parsed.role != role {
            return Err(Error::FingerprintMismatch {
                expected: format!("{} checkpoint", role.as_str()),
                found: checkpoint.fingerprint.clone(),
            });
        }
        Ok(parsed)
    }
}

/// Serializes Adam moments (and hyperparameters) into a named tensor table.
pub fn optimizer_table(adam: &Adam<f32>) -> BTreeMap<String, Tensor<f32>> {
    let mut table = BTreeMap::new();
    let cfg = adam.config();
    table.insert(
        "adam.lr".to_string(),
        Tensor::scalar(cfg.learning_rate as f32),
    );
    table.insert("adam.beta1".to_string(), Tensor::scalar(cfg.beta1 as f32));
    table.insert("adam.beta2".to_string(), Tensor::scalar(cfg.beta2 as f32));
    table.insert(
        "adam.epsilon".to_string(),
        Tensor::scalar(cfg.epsilon as f32),
    );
    for (name, (m, v)) in adam.export_moments() {
        let n = m.len();
        table.insert(
            format!("adam.m.{name}"),
            Tensor::new([n], m).expect("length matches"),
        );
        table.insert(
            format!("adam.v.{name}"),
            Tensor::new([n], v).expect("length matches"),
        );
    }
    table
}

/// Reconstructs Adam state from a checkpoint's optimizer table.
pub fn restore_adam(
    table: &BTreeMap<String, Tensor<f32>>,
    params: &BTreeMap<String, Tensor<f32>>,
    step: u64,
) -> Result<Adam<f32>> {
    let scalar = |key: &str| -> Result<f64> {
        table
            .get(key)
            .map(|t| t.data()[0] as f64)
            .ok_or_else(|| Error::Other(format!("optimizer table is missing `{key}`")))
    };
    let cfg = AdamConfig {
        learning_rate: scalar("adam.lr")?,
        beta1: scalar("adam.beta1")?,
        beta2: scalar("adam.beta2")?,
        epsilon: scalar("adam.epsilon")?,
    };
    let mut adam = Adam::new(cfg, params.iter());
    let mut moments = BTreeMap::new();
    for name in params.keys() {
        let m = table.get(&format!("adam.m.{name}")).ok_or_else(|| {
            Error::Other(format!("optimizer table is missing moments for `{name}`"))
        })?;
        let v = table.get(&format!("adam.v.{name}")).ok_or_else(|| {
            Error::Other(format!("optimizer table is missing moments for `{name}`"))
        })?;
        moments.insert(name.clone(), (m.data().to_vec(), v.data().to_vec()));
    }
    adam.import_moments(step, moments)?;
    Ok(adam)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::TempDir;
    use tsnca_core::rng::SplitMix64;

    fn sample_checkpoint() -> Checkpoint {
        let mut rng = SplitMix64::new(3);
        let mut tensors = BTreeMap::new();
        tensors.insert(
            "enc0.conv0.weight".to_string(),
            Tensor::from_fn([4, 3, 3, 3], |_| (rng.next_f64() as f32 - 0.5) * 2.0),
        );
        tensors.insert("enc0.conv0.bias".to_string(), Tensor::zeros([4]));
        Checkpoint {
            fingerprint:
                "enhancer;hs_input=true;unet(in=3,out=1,base=4,depth=1,ca=false,r=4,act=sigmoid)"
                    .to_string(),
            tensors,
            optimizer: None,
            step: 17,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = TempDir::new("ckpt-roundtrip");
        let path = dir.path().join("model.ckpt");
        let ckpt = sample_checkpoint();
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(ckpt, loaded);
        // Byte-for-byte stability of a rewrite.
        let path2 = dir.path().join("model2.ckpt");
        loaded.save(&path2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn byte_layout_is_pinned() {
        // The on-disk format is an external interface; this golden test
        // locks every field down to the byte.
        let dir = TempDir::new("ckpt-golden");
        let path = dir.path().join("tiny.ckpt");
        let mut tensors = BTreeMap::new();
        tensors.insert(
            "w".to_string(),
            Tensor::new([2], vec![1.0f32, 2.0]).unwrap(),
        );
        let ckpt = Checkpoint {
            fingerprint: "fp".to_string(),
            tensors,
            optimizer: None,
            step: 3,
        };
        ckpt.save(&path).unwrap();

        let mut expected: Vec<u8> = Vec::new();
        expected.extend_from_slice(b"TSNCAv01");
        expected.extend_from_slice(&2u64.to_le_bytes()); // fingerprint length
        expected.extend_from_slice(b"fp");
        expected.extend_from_slice(&1u64.to_le_bytes()); // tensor count
        expected.extend_from_slice(&1u64.to_le_bytes()); // name length
        expected.extend_from_slice(b"w");
        expected.extend_from_slice(&1u64.to_le_bytes()); // rank
        expected.extend_from_slice(&2u64.to_le_bytes()); // extent
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&2.0f32.to_le_bytes());
        expected.push(0); // no optimizer section
        expected.extend_from_slice(&3u64.to_le_bytes()); // training step
        assert_eq!(std::fs::read(&path).unwrap(), expected);
    }

    #[test]
    fn truncated_file_names_the_missing_tensor() {
        let dir = TempDir::new("ckpt-truncate");
        let path = dir.path().join("model.ckpt");
        sample_checkpoint().save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        // Cut inside the last tensor's value block.
        std::fs::write(&path, &bytes[..bytes.len() - 100]).unwrap();
        let err = Checkpoint::load(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("truncated"), "{msg}");
        assert!(msg.contains("enc0.conv0.weight"), "{msg}");
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let dir = TempDir::new("ckpt-magic");
        let path = dir.path().join("model.ckpt");
        std::fs::write(&path, b"NOTMAGIC________").unwrap();
        assert!(matches!(
            Checkpoint::load(&path),
            Err(Error::BadMagic { .. })
        ));
    }

    #[test]
    fn fingerprint_round_trip_and_role_check() {
        let config = UNetConfig::enhancer(8, 3);
        let fp = StageFingerprint::enhancer(config, false);
        let parsed = StageFingerprint::parse(&fp.encode()).unwrap();
        assert_eq!(parsed, fp);

        let restorer = StageFingerprint::restorer(UNetConfig::restorer(8, 3, true));
        let parsed = StageFingerprint::parse(&restorer.encode()).unwrap();
        assert_eq!(parsed.role, Role::Restorer);

        let ckpt = Checkpoint {
            fingerprint: restorer.encode(),
            tensors: BTreeMap::new(),
            optimizer: None,
            step: 0,
        };
        assert!(StageFingerprint::expect(&ckpt, Role::Enhancer).is_err());
        assert!(StageFingerprint::expect(&ckpt, Role::Restorer).is_ok());
    }

    #[test]
    fn optimizer_state_survives_the_container() {
        use tsnca_core::optim::{Adam, AdamConfig};
        let mut params: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
        params.insert("w".to_string(), Tensor::full([3], 1.0));
        let mut adam = Adam::new(AdamConfig::default(), params.iter());
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), vec![0.5f32, -0.25, 0.125]);
        adam.step(&mut params, &grads).unwrap();
        adam.step(&mut params, &grads).unwrap();

        let table = optimizer_table(&adam);
        let restored = restore_adam(&table, &params, adam.step_count()).unwrap();
        assert_eq!(restored.step_count(), 2);
        assert_eq!(optimizer_table(&restored), table);
    }
}
