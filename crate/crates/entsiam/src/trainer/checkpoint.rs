//! Versioned, checksummed model snapshots.
//!
//! The container holds the architecture config, the normalization
//! constants the model was trained with, every parameter array with shape
//! metadata, and the batch-norm running statistics — everything needed to
//! reload and reproduce eval-mode outputs bit for bit. All integers and
//! floats are little-endian; the file ends with a SHA-256 of everything
//! before it.

use crate::sdae::{ModelConfig, Pooling, SdaeModel};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"SIAMCKP\0";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt checkpoint {path}: {msg}")]
    Corrupt { path: PathBuf, msg: String },
    #[error("checkpoint version {found} is not supported (expected {supported})")]
    VersionMismatch { found: u32, supported: u32 },
    #[error("checkpoint does not match the model architecture: {0}")]
    ArchMismatch(String),
}

/// A trained model plus the run metadata needed to reuse it coherently.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: SdaeModel,
    /// Normalization constants the images were prepared with.
    pub norm_mean: f64,
    pub norm_std: f64,
    /// Reconstruction weight used during training.
    pub lambda: f64,
    /// Root seed of the producing run.
    pub seed: u64,
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Writer {
            buf: Vec::with_capacity(1 << 20),
        }
    }
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.buf.extend_from_slice(s.as_bytes());
    }
    fn f64s(&mut self, vs: &[f64]) {
        self.u64(vs.len() as u64);
        for &v in vs {
            self.f64(v);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn corrupt(&self, msg: &str) -> CheckpointError {
        CheckpointError::Corrupt {
            path: self.path.to_path_buf(),
            msg: msg.to_string(),
        }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.buf.len() {
            return Err(self.corrupt("truncated"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn str(&mut self) -> Result<String, CheckpointError> {
        let n = self.u64()? as usize;
        if n > self.buf.len() {
            return Err(self.corrupt("string length out of bounds"));
        }
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| self.corrupt("non-utf8 string"))
    }
    fn f64s(&mut self) -> Result<Vec<f64>, CheckpointError> {
        let n = self.u64()? as usize;
        if n.saturating_mul(8) > self.buf.len() {
            return Err(self.corrupt("array length out of bounds"));
        }
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(self.f64()?);
        }
        Ok(out)
    }
}

/// Serialize and atomically write a checkpoint.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    let mut w = Writer::new();
    w.buf.extend_from_slice(MAGIC);
    w.u32(CHECKPOINT_VERSION);
    let cfg = &ckpt.model.cfg;
    w.u64(cfg.input_side as u64);
    w.u64(cfg.channels as u64);
    w.u64(cfg.head_dim as u64);
    w.u8(match cfg.pooling {
        Pooling::Mean => 0,
        Pooling::Sum => 1,
    });
    w.u8(u8::from(cfg.decoder_enabled));
    w.f64(ckpt.norm_mean);
    w.f64(ckpt.norm_std);
    w.f64(ckpt.lambda);
    w.u64(ckpt.seed);

    let params = ckpt.model.params();
    w.u64(params.len() as u64);
    for p in params {
        w.str(&p.name);
        w.u64(p.shape.len() as u64);
        for &d in &p.shape {
            w.u64(d as u64);
        }
        w.f64s(&p.data);
    }
    let stats = ckpt.model.running_stats();
    w.u64(stats.len() as u64);
    for (name, data) in stats {
        w.str(&name);
        w.f64s(data);
    }

    let digest = crate::seeds::digest_bytes(&w.buf);
    w.buf.extend_from_slice(&digest);
    crate::binfeed::write_atomic(path, &w.buf).map_err(|e| match e {
        crate::binfeed::CorpusError::Io { path, source } => CheckpointError::Io { path, source },
        other => CheckpointError::Corrupt {
            path: path.to_path_buf(),
            msg: other.to_string(),
        },
    })
}

/// Read, verify and rebuild a checkpoint.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let buf = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    if buf.len() < MAGIC.len() + 4 + 32 {
        return Err(CheckpointError::Corrupt {
            path: path.to_path_buf(),
            msg: "file too short".into(),
        });
    }
    let (body, tail) = buf.split_at(buf.len() - 32);
    let digest = crate::seeds::digest_bytes(body);
    if digest != tail {
        return Err(CheckpointError::Corrupt {
            path: path.to_path_buf(),
            msg: "checksum mismatch".into(),
        });
    }
    let mut r = Reader {
        buf: body,
        pos: 0,
        path,
    };
    if r.take(8)? != MAGIC {
        return Err(r.corrupt("bad magic"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let input_side = r.u64()? as usize;
    let channels = r.u64()? as usize;
    let head_dim = r.u64()? as usize;
    let pooling = match r.u8()? {
        0 => Pooling::Mean,
        1 => Pooling::Sum,
        other => return Err(r.corrupt(&format!("bad pooling tag {other}"))),
    };
    let decoder_enabled = match r.u8()? {
        0 => false,
        1 => true,
        other => return Err(r.corrupt(&format!("bad decoder tag {other}"))),
    };
    let norm_mean = r.f64()?;
    let norm_std = r.f64()?;
    let lambda = r.f64()?;
    let seed = r.u64()?;

    let cfg = ModelConfig {
        input_side,
        channels,
        head_dim,
        pooling,
        decoder_enabled,
    };
    let mut model = SdaeModel::new(cfg, 0);

    let n_params = r.u64()? as usize;
    if n_params != model.params().len() {
        return Err(CheckpointError::ArchMismatch(format!(
            "expected {} parameters, file has {}",
            model.params().len(),
            n_params
        )));
    }
    for p in model.params_mut() {
        let name = r.str()?;
        if name != p.name {
            return Err(CheckpointError::ArchMismatch(format!(
                "parameter order mismatch: expected `{}`, file has `{name}`",
                p.name
            )));
        }
        let rank = r.u64()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        if shape != p.shape {
            return Err(CheckpointError::ArchMismatch(format!(
                "`{name}`: expected shape {:?}, file has {shape:?}",
                p.shape
            )));
        }
        let data = r.f64s()?;
        if data.len() != p.data.len() {
            return Err(CheckpointError::ArchMismatch(format!(
                "`{name}`: expected {} values, file has {}",
                p.data.len(),
                data.len()
            )));
        }
        p.data = data;
    }
    let n_stats = r.u64()? as usize;
    {
        let expected: Vec<String> = model
            .running_stats()
            .iter()
            .map(|(n, _)| n.clone())
            .collect();
        if n_stats != expected.len() {
            return Err(CheckpointError::ArchMismatch(format!(
                "expected {} stat arrays, file has {n_stats}",
                expected.len()
            )));
        }
        for (slot, want_name) in model.running_stats_mut().into_iter().zip(expected) {
            let name = r.str()?;
            if name != want_name {
                return Err(CheckpointError::ArchMismatch(format!(
                    "stat order mismatch: expected `{want_name}`, file has `{name}`"
                )));
            }
            let data = r.f64s()?;
            if data.len() != slot.len() {
                return Err(CheckpointError::ArchMismatch(format!(
                    "`{name}`: expected {} values, file has {}",
                    slot.len(),
                    data.len()
                )));
            }
            *slot = data;
        }
    }
    if r.pos != body.len() {
        return Err(r.corrupt("trailing bytes after payload"));
    }
    Ok(Checkpoint {
        model,
        norm_mean,
        norm_std,
        lambda,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcore::Tensor4;
    use rand::Rng;

    fn small_checkpoint(seed: u64) -> Checkpoint {
        let cfg = ModelConfig {
            input_side: 9,
            channels: 2,
            head_dim: 4,
            pooling: Pooling::Sum,
            decoder_enabled: true,
        };
        let mut model = SdaeModel::new(cfg, seed);
        // Perturb running stats so they are non-trivial payload.
        for s in model.running_stats_mut() {
            s.iter_mut().enumerate().for_each(|(i, v)| *v += i as f64 * 0.01);
        }
        Checkpoint {
            model,
            norm_mean: 0.52206,
            norm_std: 0.08426,
            lambda: 0.7,
            seed,
        }
    }

    fn probe(model: &SdaeModel) -> Vec<f64> {
        let mut r = crate::seeds::rng(1, &["ckpt-probe"]);
        let mut x = Tensor4::zeros(2, 1, 9, 9);
        x.data.iter_mut().for_each(|v| *v = r.gen_range(-1.0..1.0));
        let z = model.encode_eval(&x).unwrap();
        let recon = model.decode_eval(&z).unwrap();
        let mut out = z.data;
        out.extend(recon.data);
        out
    }

    #[test]
    fn round_trip_reproduces_eval_outputs_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ckpt = small_checkpoint(5);
        save_checkpoint(&path, &ckpt).unwrap();
        let loaded = load_checkpoint(&path).unwrap();

        assert_eq!(loaded.norm_mean, ckpt.norm_mean);
        assert_eq!(loaded.norm_std, ckpt.norm_std);
        assert_eq!(loaded.lambda, ckpt.lambda);
        assert_eq!(loaded.seed, ckpt.seed);
        assert_eq!(loaded.model.cfg, ckpt.model.cfg);
        // Bit-for-bit identical outputs on a fixed probe batch.
        assert_eq!(probe(&ckpt.model), probe(&loaded.model));
        for (a, b) in ckpt.model.params().iter().zip(loaded.model.params()) {
            assert_eq!(a.data, b.data, "{}", a.name);
        }
    }

    #[test]
    fn saved_files_are_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.ckpt");
        let b = dir.path().join("b.ckpt");
        let ckpt = small_checkpoint(6);
        save_checkpoint(&a, &ckpt).unwrap();
        save_checkpoint(&b, &ckpt).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn truncated_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &small_checkpoint(7)).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::Corrupt { .. })
        ));
    }

    #[test]
    fn bit_flips_fail_the_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &small_checkpoint(8)).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path);
        match err {
            Err(CheckpointError::Corrupt { msg, .. }) => assert_eq!(msg, "checksum mismatch"),
            other => panic!("expected checksum failure, got {other:?}"),
        }
    }

    #[test]
    fn unsupported_versions_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &small_checkpoint(9)).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        // Bump the version field and redo the checksum so only the version
        // check can fail.
        bytes[8] = 99;
        let body_len = bytes.len() - 32;
        let digest = crate::seeds::digest_bytes(&bytes[..body_len]);
        bytes[body_len..].copy_from_slice(&digest);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::VersionMismatch { found: 99, .. })
        ));
    }
}
