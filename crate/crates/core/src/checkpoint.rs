//! Tensor bundles on disk.
//!
//! A bundle is a directory holding `manifest.txt` and `tensors.bin`. The
//! manifest is plain text, one record per line:
//!
//! ```text
//! # crossseg tensor bundle v1
//! meta <key> <value>
//! tensor <name> <rows>x<cols> f64 offset=<byte offset> trainable=<0|1>
//! ```
//!
//! `tensors.bin` is the concatenation of every tensor's row-major values as
//! little-endian IEEE-754 doubles. Checkpoints add `config.toml` next to the
//! bundle.

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use ndarray::Array2;
use std::fmt::Write as _;
use std::path::Path;

const HEADER: &str = "# crossseg tensor bundle v1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorBundle {
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, Array2<f64>, bool)>,
}

impl TensorBundle {
    pub fn from_store(store: &ParamStore) -> Self {
        let tensors = store.ids().map(|id| (store.name(id).to_string(), store.get(id).clone(), store.is_trainable(id))).collect();
        Self { meta: Vec::new(), tensors }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Array2<f64>) {
        self.tensors.push((name.into(), value, false));
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn tensor(&self, name: &str) -> Option<&Array2<f64>> {
        self.tensors.iter().find(|(n, _, _)| n == name).map(|(_, t, _)| t)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|source| Error::Write { path: dir.into(), source })?;
        let mut manifest = String::new();
        writeln!(manifest, "{HEADER}").unwrap();
        for (k, v) in &self.meta {
            writeln!(manifest, "meta {k} {v}").unwrap();
        }
        let mut blob = Vec::new();
        for (name, t, trainable) in &self.tensors {
            writeln!(manifest, "tensor {name} {}x{} f64 offset={} trainable={}", t.nrows(), t.ncols(), blob.len(), *trainable as u8)
                .unwrap();
            for v in t.iter() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        write_atomic(&dir.join("tensors.bin"), &blob)?;
        write_atomic(&dir.join("manifest.txt"), manifest.as_bytes())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let mpath = dir.join("manifest.txt");
        let text = std::fs::read_to_string(&mpath).map_err(|source| Error::Read { path: mpath.clone(), source })?;
        let bpath = dir.join("tensors.bin");
        let blob = std::fs::read(&bpath).map_err(|source| Error::Read { path: bpath.clone(), source })?;
        let mut lines = text.lines();
        if lines.next() != Some(HEADER) {
            return Err(Error::format(&mpath, "missing bundle header"));
        }
        let mut out = TensorBundle::default();
        for line in lines {
            let mut parts = line.split_whitespace();
            match parts.next() {
                Some("meta") => {
                    let key = parts.next().ok_or_else(|| Error::format(&mpath, "meta without key"))?;
                    let value = line.splitn(3, ' ').nth(2).unwrap_or("");
                    out.meta.push((key.to_string(), value.to_string()));
                }
                Some("tensor") => {
                    let fields: Vec<&str> = parts.collect();
                    let [name, shape, dtype, offset, trainable] = fields[..] else {
                        return Err(Error::format(&mpath, format!("bad tensor line: {line}")));
                    };
                    if dtype != "f64" {
                        return Err(Error::format(&mpath, format!("unsupported dtype {dtype}")));
                    }
                    let (r, c) = shape
                        .split_once('x')
                        .and_then(|(r, c)| Some((r.parse::<usize>().ok()?, c.parse::<usize>().ok()?)))
                        .ok_or_else(|| Error::format(&mpath, format!("bad shape {shape}")))?;
                    let off: usize = offset
                        .strip_prefix("offset=")
                        .and_then(|o| o.parse().ok())
                        .ok_or_else(|| Error::format(&mpath, format!("bad offset {offset}")))?;
                    let end = off + r * c * 8;
                    if end > blob.len() {
                        return Err(Error::format(&bpath, format!("tensor {name} runs past end of blob")));
                    }
                    let vals: Vec<f64> = blob[off..end]
                        .chunks_exact(8)
                        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                        .collect();
                    let t = Array2::from_shape_vec((r, c), vals).expect("shape matches length");
                    out.tensors.push((name.to_string(), t, trainable == "trainable=1"));
                }
                Some(other) if !other.starts_with('#') => {
                    return Err(Error::format(&mpath, format!("unknown record {other}")));
                }
                _ => {}
            }
        }
        Ok(out)
    }

    /// Copy every tensor into the same-named slot of `store`.
    pub fn load_into(&self, store: &mut ParamStore, source: &Path) -> Result<()> {
        for id in store.ids().collect::<Vec<_>>() {
            let name = store.name(id).to_string();
            let t = self.tensor(&name).ok_or_else(|| Error::format(source, format!("missing tensor {name}")))?;
            if t.dim() != store.get(id).dim() {
                return Err(Error::format(source, format!("tensor {name} has shape {:?}, expected {:?}", t.dim(), store.get(id).dim())));
            }
            store.get_mut(id).assign(t);
        }
        Ok(())
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|source| Error::Write { path: parent.into(), source })?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|source| Error::Write { path: tmp.clone(), source })?;
    std::fs::rename(&tmp, path).map_err(|source| Error::Write { path: path.into(), source })
}

/// Head parameters plus the effective configuration.
pub fn save_checkpoint(dir: &Path, store: &ParamStore, config: &RunConfig, meta: &[(&str, String)]) -> Result<()> {
    let mut bundle = TensorBundle::from_store(store);
    bundle.meta.push(("seed".into(), config.seed.to_string()));
    for (k, v) in meta {
        bundle.meta.push((k.to_string(), v.clone()));
    }
    bundle.write(dir)?;
    write_atomic(&dir.join("config.toml"), config.to_toml().as_bytes())
}

pub fn load_checkpoint(dir: &Path) -> Result<(TensorBundle, RunConfig)> {
    let config = RunConfig::load(&dir.join("config.toml"))?;
    Ok((TensorBundle::read(dir)?, config))
}
