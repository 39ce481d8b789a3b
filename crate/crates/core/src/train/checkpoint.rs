//! `GNET1` checkpoint format.
//!
//! ```text
//! "GNET1"                                  5-byte magic
//! repeated until EOF, all little-endian:
//!   u32 name length, UTF-8 name
//!   u8 rank, rank x u32 dims
//!   prod(dims) x f64 payload
//! ```
//!
//! Parameters are stored as `l{index}.{kind}.{param}`; a Gabor layer writes
//! `omega`, `theta`, `psi`, `sigma` and `bias`. Adam state is stored as
//! `adam.t`, `adam.config` and `adam.{m,v}.<param name>`, run metadata under
//! `meta.*`, and the per-epoch metrics so far as `metrics.history` with one
//! row of six values per epoch.

use std::path::Path;

use crate::data::{NormStats, SplitSpec};
use crate::error::{CheckpointError, Error, Result};
use crate::optim::{AdamConfig, AdamState, Moments, Optimizer};
use crate::train::metrics::EpochMetrics;
use crate::train::network::{build_network, Network, NetworkSpec};

pub const MAGIC: &[u8; 5] = b"GNET1";

#[derive(Clone, Debug, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl TensorRecord {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        TensorRecord {
            name: name.into(),
            dims,
            data,
        }
    }

    fn scalar(name: &str, value: f64) -> Self {
        Self::new(name, vec![1], vec![value])
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub records: Vec<TensorRecord>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        if self.bytes.len() - self.pos < n {
            return Err(CheckpointError::Truncated(what.to_string()));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&TensorRecord> {
        self.records.iter().find(|r| r.name == name)
    }

    fn require(&self, name: &str) -> Result<&TensorRecord, CheckpointError> {
        self.get(name)
            .ok_or_else(|| CheckpointError::Missing(name.to_string()))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = MAGIC.to_vec();
        let to_u32 = |v: usize, what: &str| {
            u32::try_from(v).map_err(|_| {
                Error::Checkpoint(CheckpointError::Malformed(format!(
                    "{what} {v} exceeds u32"
                )))
            })
        };
        for r in &self.records {
            out.extend(to_u32(r.name.len(), "name length")?.to_le_bytes());
            out.extend(r.name.as_bytes());
            let rank = u8::try_from(r.dims.len()).map_err(|_| {
                Error::Checkpoint(CheckpointError::Malformed(format!("rank of {}", r.name)))
            })?;
            out.push(rank);
            for &d in &r.dims {
                out.extend(to_u32(d, "dimension")?.to_le_bytes());
            }
            for v in &r.data {
                out.extend(v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut r = Reader {
            bytes,
            pos: MAGIC.len(),
        };
        let mut records = Vec::new();
        while r.pos < bytes.len() {
            let name_len = r.u32("record name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "record name")?)
                .map_err(|_| CheckpointError::Malformed("record name is not UTF-8".into()))?
                .to_string();
            let rank = r.take(1, &name)?[0] as usize;
            let dims = (0..rank)
                .map(|_| r.u32(&name).map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let count: usize = dims.iter().product();
            let payload = r.take(count.saturating_mul(8), &name)?;
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            records.push(TensorRecord { name, dims, data });
        }
        Ok(Checkpoint { records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::from_bytes(&bytes)?)
    }
}

/// Run metadata needed to rebuild and evaluate a saved model.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingMeta {
    /// Completed epochs.
    pub epoch: usize,
    pub network: String,
    pub input: [usize; 3],
    /// Network seed; dropout streams derive from it.
    pub seed: u64,
    pub stats: Option<NormStats>,
    pub split: Option<SplitSpec>,
}

fn seed_halves(seed: u64) -> [f64; 2] {
    [(seed >> 32) as f64, (seed & 0xffff_ffff) as f64]
}

fn seed_from_halves(hi: f64, lo: f64) -> u64 {
    ((hi as u64) << 32) | lo as u64
}

pub fn capture(
    network: &Network,
    optimizer: Option<&Optimizer>,
    meta: &TrainingMeta,
) -> Checkpoint {
    let mut records = vec![
        TensorRecord::scalar("meta.epoch", meta.epoch as f64),
        TensorRecord::new(
            "meta.input",
            vec![3],
            meta.input.iter().map(|&d| d as f64).collect(),
        ),
        TensorRecord::new(
            "meta.network",
            vec![meta.network.len()],
            meta.network.bytes().map(f64::from).collect(),
        ),
    ];
    records.push(TensorRecord::new(
        "meta.seed",
        vec![2],
        seed_halves(meta.seed).to_vec(),
    ));
    if let Some(stats) = &meta.stats {
        records.push(TensorRecord::new(
            "meta.norm_mean",
            vec![stats.mean.len()],
            stats.mean.clone(),
        ));
        records.push(TensorRecord::new(
            "meta.norm_std",
            vec![stats.std.len()],
            stats.std.clone(),
        ));
    }
    if let Some(split) = &meta.split {
        let [hi, lo] = seed_halves(split.shuffle_seed);
        records.push(TensorRecord::new(
            "meta.split",
            vec![3],
            vec![split.val_fraction, hi, lo],
        ));
    }
    let names = network.param_names();
    for (name, p) in names.iter().zip(network.params()) {
        records.push(TensorRecord::new(
            name.clone(),
            p.shape.clone(),
            p.value.clone(),
        ));
    }
    if let Some(Optimizer::Adam(state)) = optimizer {
        let c = state.config;
        records.push(TensorRecord::scalar("adam.t", state.t as f64));
        records.push(TensorRecord::new(
            "adam.config",
            vec![4],
            vec![c.lr, c.beta1, c.beta2, c.eps],
        ));
        for ((name, p), mom) in names.iter().zip(network.params()).zip(&state.moments) {
            records.push(TensorRecord::new(
                format!("adam.m.{name}"),
                p.shape.clone(),
                mom.m.clone(),
            ));
            records.push(TensorRecord::new(
                format!("adam.v.{name}"),
                p.shape.clone(),
                mom.v.clone(),
            ));
        }
    }
    Checkpoint { records }
}

fn check_dims(record: &TensorRecord, expected: &[usize]) -> Result<(), CheckpointError> {
    if record.dims != expected {
        return Err(CheckpointError::ShapeMismatch {
            name: record.name.clone(),
            expected: expected.to_vec(),
            found: record.dims.clone(),
        });
    }
    Ok(())
}

pub fn read_meta(ckpt: &Checkpoint) -> Result<TrainingMeta> {
    let scalar = |name: &str| -> Result<f64, CheckpointError> {
        let r = ckpt.require(name)?;
        check_dims(r, &[1])?;
        Ok(r.data[0])
    };
    let input = ckpt.require("meta.input")?;
    check_dims(input, &[3])?;
    let network_bytes: Vec<u8> = ckpt
        .require("meta.network")?
        .data
        .iter()
        .map(|&b| b as u8)
        .collect();
    let network = String::from_utf8(network_bytes)
        .map_err(|_| CheckpointError::Malformed("meta.network is not UTF-8".into()))?;
    let stats = match (ckpt.get("meta.norm_mean"), ckpt.get("meta.norm_std")) {
        (Some(m), Some(s)) => Some(NormStats {
            mean: m.data.clone(),
            std: s.data.clone(),
        }),
        _ => None,
    };
    let seed = ckpt.require("meta.seed")?;
    check_dims(seed, &[2])?;
    let seed = seed_from_halves(seed.data[0], seed.data[1]);
    let split = match ckpt.get("meta.split") {
        Some(r) => {
            check_dims(r, &[3])?;
            Some(SplitSpec {
                val_fraction: r.data[0],
                shuffle_seed: seed_from_halves(r.data[1], r.data[2]),
            })
        }
        None => None,
    };
    Ok(TrainingMeta {
        epoch: scalar("meta.epoch")? as usize,
        network,
        input: [
            input.data[0] as usize,
            input.data[1] as usize,
            input.data[2] as usize,
        ],
        seed,
        stats,
        split,
    })
}

pub fn history_record(rows: &[EpochMetrics]) -> TensorRecord {
    let data = rows
        .iter()
        .flat_map(|r| {
            [
                r.epoch as f64,
                r.train_loss,
                r.train_acc,
                r.val_loss,
                r.val_acc,
                r.wall_seconds,
            ]
        })
        .collect();
    TensorRecord::new("metrics.history", vec![rows.len(), 6], data)
}

/// Metrics rows stored with the checkpoint; empty if none were saved.
pub fn read_history(ckpt: &Checkpoint) -> Result<Vec<EpochMetrics>> {
    let Some(r) = ckpt.get("metrics.history") else {
        return Ok(Vec::new());
    };
    if r.dims.len() != 2 || r.dims[1] != 6 {
        return Err(CheckpointError::ShapeMismatch {
            name: r.name.clone(),
            expected: vec![r.dims.first().copied().unwrap_or(0), 6],
            found: r.dims.clone(),
        }
        .into());
    }
    Ok(r.data
        .chunks_exact(6)
        .map(|v| EpochMetrics {
            epoch: v[0] as usize,
            train_loss: v[1],
            train_acc: v[2],
            val_loss: v[3],
            val_acc: v[4],
            wall_seconds: v[5],
        })
        .collect())
}

/// Copies parameter values into `network`, checking every name and shape.
pub fn restore_network(network: &mut Network, ckpt: &Checkpoint) -> Result<()> {
    let names = network.param_names();
    // Validate everything before touching the model.
    for (name, p) in names.iter().zip(network.params()) {
        check_dims(ckpt.require(name)?, &p.shape)?;
    }
    for (name, p) in names.iter().zip(network.params_mut()) {
        p.value.copy_from_slice(&ckpt.require(name)?.data);
    }
    Ok(())
}

/// Rebuilds Adam state for the parameters of `network`.
pub fn restore_adam(network: &Network, ckpt: &Checkpoint) -> Result<AdamState> {
    let t = ckpt.require("adam.t")?;
    check_dims(t, &[1])?;
    let c = ckpt.require("adam.config")?;
    check_dims(c, &[4])?;
    let config = AdamConfig {
        lr: c.data[0],
        beta1: c.data[1],
        beta2: c.data[2],
        eps: c.data[3],
    };
    let mut moments = Vec::new();
    for (name, p) in network.param_names().iter().zip(network.params()) {
        let m = ckpt.require(&format!("adam.m.{name}"))?;
        let v = ckpt.require(&format!("adam.v.{name}"))?;
        check_dims(m, &p.shape)?;
        check_dims(v, &p.shape)?;
        moments.push(Moments {
            m: m.data.clone(),
            v: v.data.clone(),
        });
    }
    Ok(AdamState {
        config,
        moments,
        t: t.data[0] as u64,
    })
}

/// Builds the saved architecture and loads its parameters.
pub fn network_from_checkpoint(ckpt: &Checkpoint) -> Result<(Network, TrainingMeta)> {
    let meta = read_meta(ckpt)?;
    let spec = NetworkSpec::parse(&meta.network, meta.input, 0, meta.seed)?;
    let mut network = build_network(&spec)?;
    restore_network(&mut network, ckpt)?;
    Ok((network, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_checkpoint() -> Checkpoint {
        let spec = NetworkSpec::parse(
            "gabor_conv(2,3,1,1) relu maxpool(2,2) dense(3) softmax_ce",
            [1, 6, 6],
            3,
            4,
        )
        .unwrap();
        let net = build_network(&spec).unwrap();
        let opt = Optimizer::adam(AdamConfig::default(), &net.params());
        let meta = TrainingMeta {
            epoch: 2,
            network: spec.layer_string(),
            input: spec.input,
            seed: spec.seed,
            stats: Some(NormStats {
                mean: vec![0.5],
                std: vec![0.2],
            }),
            split: Some(SplitSpec {
                val_fraction: 0.3,
                shuffle_seed: u64::MAX - 5,
            }),
        };
        capture(&net, Some(&opt), &meta)
    }

    #[test]
    fn bytes_round_trip() {
        let ckpt = sample_checkpoint();
        let bytes = ckpt.to_bytes().unwrap();
        assert_eq!(&bytes[..5], b"GNET1");
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let meta = read_meta(&back).unwrap();
        assert_eq!(meta.split.unwrap().shuffle_seed, u64::MAX - 5);
        assert_eq!(meta.epoch, 2);
    }

    #[test]
    fn gabor_layer_writes_four_named_tensors() {
        let ckpt = sample_checkpoint();
        for p in ["omega", "theta", "psi", "sigma", "bias"] {
            let r = ckpt.get(&format!("l0.gabor_conv.{p}")).unwrap();
            if p != "bias" {
                assert_eq!(r.dims, vec![2, 1]);
            }
        }
    }

    #[test]
    fn distinct_failure_modes() {
        let bytes = sample_checkpoint().to_bytes().unwrap();
        assert_eq!(
            Checkpoint::from_bytes(b"NOPE1xxxx"),
            Err(CheckpointError::BadMagic)
        );
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
            Err(CheckpointError::Truncated(_))
        ));
        let ckpt = Checkpoint::from_bytes(&bytes).unwrap();
        let other = NetworkSpec::parse(
            "gabor_conv(3,3,1,1) relu maxpool(2,2) dense(3) softmax_ce",
            [1, 6, 6],
            3,
            4,
        )
        .unwrap();
        let mut net = build_network(&other).unwrap();
        let err = restore_network(&mut net, &ckpt).unwrap_err();
        match err {
            Error::Checkpoint(CheckpointError::ShapeMismatch { name, .. }) => {
                assert_eq!(name, "l0.gabor_conv.omega")
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rebuild_from_checkpoint() {
        let ckpt = sample_checkpoint();
        let (net, meta) = network_from_checkpoint(&ckpt).unwrap();
        assert_eq!(meta.input, [1, 6, 6]);
        let again = capture(&net, None, &meta);
        for r in &again.records {
            assert_eq!(Some(r), ckpt.get(&r.name));
        }
        let adam = restore_adam(&net, &ckpt).unwrap();
        assert_eq!(adam.t, 0);
        assert_eq!(adam.moments.len(), net.params().len());
    }
}
