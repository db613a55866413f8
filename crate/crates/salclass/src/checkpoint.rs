//! Binary checkpoint format: magic "SCNC", format version, named float64
//! tensor records, then trainer state scalars. Round-trips are bitwise
//! exact.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"SCNC";
pub const FORMAT_VERSION: u32 = 1;

/// Trainer scalars persisted alongside the tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainStateScalars {
    pub epoch: u64,
    pub iteration: u64,
    pub best_val_mca: f64,
    pub best_val_mse: f64,
    pub epochs_since_mca_improved: u64,
    pub epochs_since_mse_improved: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    /// Named tensors in a fixed order: model params, running stats,
    /// momentum buffers, best-model params.
    pub tensors: Vec<(String, Tensor)>,
    pub state: TrainStateScalars,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let nb = name.as_bytes();
            buf.extend_from_slice(&(nb.len() as u32).to_le_bytes());
            buf.extend_from_slice(nb);
            buf.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &e in &t.shape {
                buf.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for &v in &t.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let s = &self.state;
        buf.extend_from_slice(&s.epoch.to_le_bytes());
        buf.extend_from_slice(&s.iteration.to_le_bytes());
        buf.extend_from_slice(&s.best_val_mca.to_le_bytes());
        buf.extend_from_slice(&s.best_val_mse.to_le_bytes());
        buf.extend_from_slice(&s.epochs_since_mca_improved.to_le_bytes());
        buf.extend_from_slice(&s.epochs_since_mse_improved.to_le_bytes());
        std::fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut file =
            std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut buf = Vec::new();
        file.read_to_end(&mut buf)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut cur = Cursor { buf: &buf, pos: 0 };

        if cur.bytes(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic, not an SCNC checkpoint".into()));
        }
        let version = cur.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version}"
            )));
        }
        let n_tensors = cur.u32()? as usize;
        let mut tensors = Vec::with_capacity(n_tensors);
        for _ in 0..n_tensors {
            let name_len = cur.u32()? as usize;
            let name = String::from_utf8(cur.bytes(name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let rank = cur.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(cur.u64()? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(cur.f64()?);
            }
            tensors.push((name, Tensor::new(&shape, data)?));
        }
        let state = TrainStateScalars {
            epoch: cur.u64()?,
            iteration: cur.u64()?,
            best_val_mca: cur.f64()?,
            best_val_mse: cur.f64()?,
            epochs_since_mca_improved: cur.u64()?,
            epochs_since_mse_improved: cur.u64()?,
        };
        Ok(Checkpoint { tensors, state })
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }
}

/// Append-only training log:
/// `epoch,iter,lr,loss_total,loss_class,loss_sal,val_mca,val_mse`.
pub struct TrainLog {
    file: std::fs::File,
    path: String,
}

impl TrainLog {
    pub const HEADER: &'static str = "epoch,iter,lr,loss_total,loss_class,loss_sal,val_mca,val_mse";

    pub fn create(path: &Path) -> Result<Self> {
        let mut file =
            std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        writeln!(file, "{}", Self::HEADER).map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(TrainLog {
            file,
            path: path.display().to_string(),
        })
    }

    pub fn append(path: &Path) -> Result<Self> {
        let file = std::fs::OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(TrainLog {
            file,
            path: path.display().to_string(),
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn row(
        &mut self,
        epoch: u64,
        iter: u64,
        lr: f64,
        loss_total: f64,
        loss_class: f64,
        loss_sal: f64,
        val_mca: f64,
        val_mse: f64,
    ) -> Result<()> {
        writeln!(
            self.file,
            "{epoch},{iter},{lr:.10},{loss_total:.10},{loss_class:.10},{loss_sal:.10},{val_mca:.10},{val_mse:.10}"
        )
        .map_err(|e| Error::io(self.path.clone(), e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bitwise_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ckpt = Checkpoint {
            tensors: vec![
                (
                    "a.weight".into(),
                    Tensor::new(&[2, 3], vec![1.5, -0.25, 1e-300, f64::MAX, 0.1 + 0.2, -0.0])
                        .unwrap(),
                ),
                ("b.bias".into(), Tensor::new(&[1], vec![42.0]).unwrap()),
            ],
            state: TrainStateScalars {
                epoch: 7,
                iteration: 1234,
                best_val_mca: 0.875,
                best_val_mse: 0.0123,
                epochs_since_mca_improved: 2,
                epochs_since_mse_improved: 0,
            },
        };
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        for ((na, ta), (nb, tb)) in ckpt.tensors.iter().zip(&back.tensors) {
            assert_eq!(na, nb);
            assert_eq!(ta.shape, tb.shape);
            for (x, y) in ta.data.iter().zip(&tb.data) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        assert_eq!(ckpt.state, back.state);

        // saving again produces byte-identical files
        let path2 = dir.path().join("m2.ckpt");
        back.save(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"NOPE....").unwrap();
        assert!(matches!(
            Checkpoint::load(&path),
            Err(Error::Checkpoint(_))
        ));
    }
}
