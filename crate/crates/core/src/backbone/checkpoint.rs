use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::network::Network;
use crate::error::{Error, Result};
use crate::tensor::{header_len, Tensor};

pub const MANIFEST: &str = "manifest.txt";

fn dims_string(dims: &[usize]) -> String {
    dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

fn file_name(index: usize, name: &str) -> String {
    format!("{index:04}_{name}.strf")
}

impl Network<f32> {
    /// Write every parameter and buffer into `dir`, one tensor file each,
    /// plus a manifest listing name, dims, file and data offset in order.
    pub fn save_checkpoint(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::storage(dir, e))?;
        let mut manifest = String::from("# name\tdims\tfile\toffset\n");
        for (i, p) in self.params().iter().enumerate() {
            let file = file_name(i, &p.spec.name);
            p.value.save(dir.join(&file))?;
            let _ = writeln!(
                manifest,
                "{}\t{}\t{}\t{}",
                p.spec.name,
                dims_string(&p.spec.dims),
                file,
                header_len(p.spec.dims.len())
            );
        }
        let path = dir.join(MANIFEST);
        fs::write(&path, manifest).map_err(|e| Error::storage(path, e))
    }

    /// Load parameters saved by [`Network::save_checkpoint`]. The checkpoint
    /// must list exactly this network's parameters in the same order.
    pub fn load_checkpoint(&mut self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::load(&path, e.to_string()))?;
        let rows: Vec<&str> = text
            .lines()
            .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
            .collect();
        if rows.len() != self.params().len() {
            return Err(Error::load(
                &path,
                format!("{} entries, network has {} parameters", rows.len(), self.params().len()),
            ));
        }
        for (i, row) in rows.iter().enumerate() {
            let cols: Vec<&str> = row.split('\t').collect();
            let [name, dims, file, _offset] = cols[..] else {
                return Err(Error::load(&path, format!("line {}: expected 4 columns", i + 2)));
            };
            let spec = &self.params()[i].spec;
            if name != spec.name || dims != dims_string(&spec.dims) {
                return Err(Error::load(
                    &path,
                    format!("entry {i} is {name} [{dims}], expected {} [{}]", spec.name, dims_string(&spec.dims)),
                ));
            }
            let t = Tensor::<f32>::load(dir.join(file))?;
            if t.dims() != spec.dims.as_slice() {
                return Err(Error::load(dir.join(file), format!("dims {:?} disagree with manifest", t.dims())));
            }
            self.set_param(i, t)?;
        }
        Ok(())
    }
}
