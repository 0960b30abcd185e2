use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;

use super::{DistanceCache, EpochMetrics, JointState};
use crate::deformnet::DeformNet;
use crate::error::{Error, Result};
use crate::retrieval::RetrievalSpace;
use crate::tensornet::checkpoint::{self, StoredTensor};

/// Models and joint-loop state as read back from a checkpoint file.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub tensors: Vec<StoredTensor>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Result<&StoredTensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
    }
}

/// Writes both modules, the cached source codes, the distance cache and the
/// next epoch.
pub fn save_checkpoint(path: &Path, net: &DeformNet, space: &RetrievalSpace, state: &JointState) -> Result<()> {
    let mut tensors = checkpoint::collect(&[("deform", &net.store), ("retrieval", &space.store)]);
    for k in 0..space.num_sources() {
        tensors.push(StoredTensor {
            name: format!("retrieval_codes/src{k}"),
            shape: vec![space.dim()],
            value: space.source_code(k)?.to_vec(),
        });
    }
    if let Some(c) = &state.cache {
        tensors.push(StoredTensor {
            name: "cache/d".into(),
            shape: c.d.shape().to_vec(),
            value: c.d.iter().copied().collect(),
        });
        tensors.push(StoredTensor {
            name: "cache/stamp".into(),
            shape: vec![1],
            value: vec![c.stamp as f64],
        });
    }
    tensors.push(StoredTensor {
        name: "state/epoch".into(),
        shape: vec![1],
        value: vec![state.epoch as f64],
    });
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    }
    fs::write(path, checkpoint::encode(&tensors)).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Restores modules built with the same configuration and database, and
/// returns the saved loop state.
pub fn load_checkpoint(path: &Path, net: &mut DeformNet, space: &mut RetrievalSpace) -> Result<JointState> {
    let ck = Checkpoint {
        tensors: checkpoint::load(path)?,
    };
    net.store.load_from("deform/", &ck.tensors)?;
    space.store.load_from("retrieval/", &ck.tensors)?;
    for k in 0..space.num_sources() {
        let t = ck.get(&format!("retrieval_codes/src{k}"))?;
        space.set_source_code(k, t.value.clone())?;
    }
    let cache = match ck.get("cache/d") {
        Ok(t) if t.shape.len() == 2 => Some(DistanceCache {
            d: Array2::from_shape_vec((t.shape[0], t.shape[1]), t.value.clone())
                .map_err(|e| Error::Checkpoint(e.to_string()))?,
            stamp: ck.get("cache/stamp")?.value[0] as usize,
        }),
        Ok(_) => return Err(Error::Checkpoint("cache/d must have rank 2".into())),
        Err(_) => None,
    };
    Ok(JointState {
        epoch: ck.get("state/epoch")?.value[0] as usize,
        cache,
    })
}

/// Metrics CSV, JSON-lines events and checkpoint locations of one run
/// directory. A disabled log records nothing.
pub struct RunLog {
    dir: Option<PathBuf>,
    metrics: Option<csv::Writer<File>>,
    events: Option<BufWriter<File>>,
}

impl RunLog {
    pub fn disabled() -> Self {
        Self {
            dir: None,
            metrics: None,
            events: None,
        }
    }

    pub fn in_dir(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        let open = |name: &str| {
            let p = dir.join(name);
            File::create(&p).map_err(|e| Error::io(p.display().to_string(), e))
        };
        Ok(Self {
            dir: Some(dir.to_path_buf()),
            metrics: Some(csv::Writer::from_writer(open("metrics.csv")?)),
            events: Some(BufWriter::new(open("events.jsonl")?)),
        })
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn checkpoint_path(&self, name: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(name))
    }

    fn err(&self, name: &str, e: impl std::fmt::Display) -> Error {
        let path = self.dir.as_ref().map(|d| d.join(name).display().to_string()).unwrap_or_default();
        Error::io(path, std::io::Error::other(e.to_string()))
    }

    pub fn event(&mut self, value: serde_json::Value) -> Result<()> {
        if let Some(w) = self.events.as_mut() {
            let r = writeln!(w, "{value}").and_then(|_| w.flush());
            r.map_err(|e| self.err("events.jsonl", e))?;
        }
        Ok(())
    }

    pub fn metric(&mut self, m: &EpochMetrics) -> Result<()> {
        if let Some(w) = self.metrics.as_mut() {
            let r = w.serialize(m).map_err(|e| e.to_string()).and_then(|_| w.flush().map_err(|e| e.to_string()));
            r.map_err(|e| self.err("metrics.csv", e))?;
        }
        Ok(())
    }

    pub fn pretrain_history(&mut self, history: &[f64]) -> Result<()> {
        let Some(dir) = &self.dir else { return Ok(()) };
        let path = dir.join("pretrain.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| self.err("pretrain.csv", e))?;
        let mut write = || -> std::result::Result<(), csv::Error> {
            w.write_record(["step", "loss"])?;
            for (i, l) in history.iter().enumerate() {
                w.write_record([i.to_string(), l.to_string()])?;
            }
            w.flush()?;
            Ok(())
        };
        write().map_err(|e| self.err("pretrain.csv", e))
    }
}
