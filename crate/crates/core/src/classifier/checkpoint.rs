//! Binary checkpoint: `KRL1` magic, version, dimensions, normalization
//! statistics (f64), parameter blobs (little-endian f32), config echo.

use std::collections::HashMap;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::{InputLayout, NetConfig, NetworkParams, RecallNet, RetrievalMode, TrainConfig};
use crate::features::{FeatureMask, NormalizationStats, NUM_FEATURES};

pub const MAGIC: &[u8; 4] = b"KRL1";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

fn malformed(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::Malformed(msg.into())
}

fn put_u32(w: &mut impl Write, v: usize) -> Result<(), CheckpointError> {
    let v = u32::try_from(v).map_err(|_| malformed("dimension exceeds u32"))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32(r: &mut impl Read) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>, CheckpointError> {
    let mut out = Vec::with_capacity(n);
    let mut b = [0u8; 8];
    for _ in 0..n {
        r.read_exact(&mut b)?;
        out.push(f64::from_le_bytes(b));
    }
    Ok(out)
}

fn get_f32s_into(r: &mut impl Read, out: &mut [f64]) -> Result<(), CheckpointError> {
    let mut b = [0u8; 4];
    for x in out.iter_mut() {
        r.read_exact(&mut b)?;
        *x = f32::from_le_bytes(b) as f64;
    }
    Ok(())
}

fn config_echo(net: &RecallNet) -> String {
    let c = &net.config;
    let t = &net.train_config;
    [
        format!("retrieval={}", c.retrieval),
        format!("k={}", c.k),
        format!("use_embeddings={}", c.use_embeddings),
        format!("features={}", c.mask.to_spec()),
        format!("hidden={}", c.hidden),
        format!("learning_rate={:?}", t.learning_rate),
        format!("batch_size={}", t.batch_size),
        format!("epochs={}", t.epochs),
        format!("beta1={:?}", t.beta1),
        format!("beta2={:?}", t.beta2),
        format!("epsilon={:?}", t.epsilon),
        format!("dropout={:?}", t.dropout),
        format!("seed={}", t.seed),
    ]
    .join("\n")
}

fn parse_echo(text: &str) -> Result<(NetConfig, TrainConfig), CheckpointError> {
    let map: HashMap<&str, &str> = text.lines().filter_map(|l| l.split_once('=')).collect();
    fn field<T: std::str::FromStr>(map: &HashMap<&str, &str>, key: &str) -> Result<T, CheckpointError> {
        map.get(key)
            .ok_or_else(|| malformed(format!("config echo lacks {key}")))?
            .parse()
            .map_err(|_| malformed(format!("config echo has a bad {key}")))
    }
    let mask_spec = map.get("features").copied().unwrap_or("");
    let mask = if mask_spec.is_empty() {
        FeatureMask::none()
    } else {
        FeatureMask::parse(mask_spec).map_err(|e| malformed(e.to_string()))?
    };
    let net = NetConfig {
        hidden: field(&map, "hidden")?,
        k: field(&map, "k")?,
        retrieval: map
            .get("retrieval")
            .ok_or_else(|| malformed("config echo lacks retrieval"))?
            .parse::<RetrievalMode>()
            .map_err(malformed)?,
        use_embeddings: field(&map, "use_embeddings")?,
        mask,
    };
    let train = TrainConfig {
        learning_rate: field(&map, "learning_rate")?,
        batch_size: field(&map, "batch_size")?,
        epochs: field(&map, "epochs")?,
        beta1: field(&map, "beta1")?,
        beta2: field(&map, "beta2")?,
        epsilon: field(&map, "epsilon")?,
        dropout: field(&map, "dropout")?,
        seed: field(&map, "seed")?,
    };
    Ok((net, train))
}

impl RecallNet {
    pub fn write_checkpoint(&self, mut w: impl Write) -> Result<(), CheckpointError> {
        w.write_all(MAGIC)?;
        put_u32(&mut w, VERSION as usize)?;
        let l = &self.layout;
        for v in [
            self.params.input_width(),
            self.params.hidden_width(),
            l.embed_dim,
            l.num_features,
            l.k,
            self.norm.mean.len(),
        ] {
            put_u32(&mut w, v)?;
        }
        for v in self.norm.mean.iter().chain(&self.norm.std) {
            w.write_all(&v.to_le_bytes())?;
        }
        for t in self.params.tensors() {
            for &v in t {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        let echo = config_echo(self);
        put_u32(&mut w, echo.len())?;
        w.write_all(echo.as_bytes())?;
        Ok(())
    }

    pub fn read_checkpoint(mut r: impl Read) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = get_u32(&mut r)?;
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let mut dims = [0usize; 6];
        for d in dims.iter_mut() {
            *d = get_u32(&mut r)? as usize;
        }
        let [input, hidden, embed_dim, num_features, k, norm_len] = dims;
        if norm_len != NUM_FEATURES {
            return Err(malformed(format!("expected {NUM_FEATURES} normalization slots, found {norm_len}")));
        }
        let layout = InputLayout { embed_dim, num_features, k };
        if layout.width() != input {
            return Err(malformed("input width does not match layout"));
        }
        let mean = get_f64s(&mut r, norm_len)?;
        let std = get_f64s(&mut r, norm_len)?;
        let mut params = NetworkParams::zeros(input, hidden);
        for t in params.tensors_mut() {
            get_f32s_into(&mut r, t)?;
        }
        let echo_len = get_u32(&mut r)? as usize;
        let mut echo = vec![0u8; echo_len];
        r.read_exact(&mut echo)?;
        let echo = String::from_utf8(echo).map_err(|_| malformed("config echo is not UTF-8"))?;
        let (config, train_config) = parse_echo(&echo)?;
        if config.hidden != hidden || config.layout(embed_dim).num_features != num_features || config.effective_k() != k {
            return Err(malformed("config echo disagrees with dimensions"));
        }
        if !params.is_finite() {
            return Err(malformed("non-finite parameter"));
        }
        Ok(Self {
            config,
            train_config,
            layout,
            norm: NormalizationStats { mean, std },
            params,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_checkpoint(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        Self::read_checkpoint(BufReader::new(File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample_net(config: NetConfig) -> RecallNet {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let layout = config.layout(6);
        let mut params = NetworkParams::init(layout.width(), config.hidden, &mut rng);
        params.b1.mapv_inplace(|_| rng.random_range(-1.0..1.0));
        params.round_to_f32();
        RecallNet {
            train_config: TrainConfig {
                learning_rate: 1.0 / 3.0,
                seed: 77,
                ..Default::default()
            },
            layout,
            norm: NormalizationStats {
                mean: (0..NUM_FEATURES).map(|i| i as f64 / 7.0).collect(),
                std: (0..NUM_FEATURES).map(|i| 1.0 + i as f64 / 3.0).collect(),
            },
            params,
            config,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for config in [
            NetConfig {
                hidden: 5,
                k: 2,
                ..Default::default()
            },
            NetConfig {
                hidden: 3,
                k: 4,
                retrieval: RetrievalMode::None,
                use_embeddings: false,
                mask: FeatureMask::none(),
            },
        ] {
            let net = sample_net(config);
            let mut buf = Vec::new();
            net.write_checkpoint(&mut buf).unwrap();
            assert_eq!(&buf[..4], b"KRL1");
            let back = RecallNet::read_checkpoint(buf.as_slice()).unwrap();
            assert_eq!(back, net);
            let mut again = Vec::new();
            back.write_checkpoint(&mut again).unwrap();
            assert_eq!(again, buf);
        }
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let net = sample_net(NetConfig {
            hidden: 4,
            k: 1,
            ..Default::default()
        });
        let mut buf = Vec::new();
        net.write_checkpoint(&mut buf).unwrap();
        assert!(matches!(RecallNet::read_checkpoint(&b"NOPE"[..]), Err(CheckpointError::BadMagic)));
        assert!(RecallNet::read_checkpoint(&buf[..buf.len() - 3]).is_err());
        let mut bad = buf.clone();
        bad[4] = 9;
        assert!(matches!(
            RecallNet::read_checkpoint(bad.as_slice()),
            Err(CheckpointError::UnsupportedVersion(9))
        ));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.krl");
        let net = sample_net(NetConfig {
            hidden: 4,
            k: 3,
            retrieval: RetrievalMode::PastK,
            ..Default::default()
        });
        net.save(&path).unwrap();
        assert_eq!(RecallNet::load(&path).unwrap(), net);
    }
}
