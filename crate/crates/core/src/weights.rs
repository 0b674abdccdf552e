//! The `HCRW` weight archive, full checkpoints and pretrained backbone import.
//!
//! Layout (little-endian): `"HCRW"`, `u32` version, `u32` entry count, then
//! per entry `u32` name length, UTF-8 name, `u32` ndim, `ndim × u32` dims and
//! the raw `f32` values. Convolution kernels are stored `[kh, kw, cin, cout]`.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{Network, Phase, BACKBONE_CONVS};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"HCRW";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ArchiveEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightArchive {
    entries: Vec<ArchiveEntry>,
}

impl WeightArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[ArchiveEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&ArchiveEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(Error::format("HCRW", format!("duplicate entry '{name}'")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::format(
                "HCRW",
                format!("entry '{name}' has shape {shape:?} but {} values", data.len()),
            ));
        }
        self.entries.push(ArchiveEntry { name, shape, data });
        Ok(())
    }

    pub fn push_tensor(&mut self, name: impl Into<String>, t: &Tensor) -> Result<()> {
        self.push(name, t.shape().to_vec(), t.data().to_vec())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let payload: usize = self
            .entries
            .iter()
            .map(|e| 8 + e.name.len() + 4 * e.shape.len() + 4 * e.data.len())
            .sum();
        let mut out = Vec::with_capacity(12 + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for &d in &e.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::format("HCRW", "bad magic"));
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::format("HCRW", format!("unsupported version {version}")));
        }
        let count = r.u32("entry count")?;
        let mut archive = WeightArchive::new();
        for _ in 0..count {
            let name_len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "name")?)
                .map_err(|_| Error::format("HCRW", "entry name is not UTF-8"))?
                .to_owned();
            let ndim = r.u32("ndim")? as usize;
            let mut shape = Vec::with_capacity(ndim.min(8));
            for _ in 0..ndim {
                shape.push(r.u32("dims")? as usize);
            }
            let len = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| Error::format("HCRW", format!("entry '{name}' is too large")))?;
            let data = r
                .take(len, "values")?
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            archive.push(name, shape, data)?;
        }
        if r.pos != bytes.len() {
            return Err(Error::format(
                "HCRW",
                format!("{} trailing bytes", bytes.len() - r.pos),
            ));
        }
        Ok(archive)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
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
            None => Err(Error::format("HCRW", format!("truncated while reading {what}"))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Names of the 18 backbone tensors a pretrained archive must provide.
pub fn pretrained_entry_names() -> Vec<String> {
    BACKBONE_CONVS
        .iter()
        .flat_map(|(name, _, _)| [format!("{name}.weight"), format!("{name}.bias")])
        .collect()
}

fn install(net: &mut Network, archive: &WeightArchive, names: &HashSet<String>) -> Result<()> {
    // Validate everything first so a failed load leaves the network untouched.
    for (name, t) in net.named_parameters() {
        if !names.contains(&name) {
            continue;
        }
        let entry = archive.get(&name).ok_or_else(|| Error::MissingEntry(name.clone()))?;
        if entry.shape != t.shape() {
            return Err(Error::WeightShape {
                name,
                expected: t.shape().to_vec(),
                found: entry.shape.clone(),
            });
        }
    }
    for p in net.parameters_mut() {
        if names.contains(&p.name) {
            let entry = archive.get(&p.name).expect("validated above");
            p.value.data_mut().copy_from_slice(&entry.data);
        }
    }
    Ok(())
}

/// Copy the backbone convolutions (`block1_conv1` to `block4_conv2`) from a
/// pretrained archive and put the network in phase 1. Extra entries are
/// ignored; all other layers keep their current values.
pub fn init_from_pretrained(net: &mut Network, archive: &WeightArchive) -> Result<()> {
    let names: HashSet<String> = pretrained_entry_names().into_iter().collect();
    install(net, archive, &names)?;
    net.set_phase(Phase::One);
    Ok(())
}

/// Every parameter tensor of the network, moving statistics included.
pub fn save_checkpoint(net: &Network) -> Result<WeightArchive> {
    let mut archive = WeightArchive::new();
    for (name, t) in net.named_parameters() {
        archive.push_tensor(name, t)?;
    }
    Ok(archive)
}

/// Strict load: the archive must hold exactly the network's tensors with
/// matching shapes. The phase of `net` is kept.
pub fn load_checkpoint(net: &mut Network, archive: &WeightArchive) -> Result<()> {
    let expected: HashSet<String> = net.named_parameters().into_iter().map(|(n, _)| n).collect();
    if let Some(extra) = archive.entries().iter().find(|e| !expected.contains(&e.name)) {
        return Err(Error::format(
            "HCRW",
            format!("checkpoint has unknown entry '{}'", extra.name),
        ));
    }
    install(net, archive, &expected)
}

/// Shapes of the tensors a pretrained archive must provide, by entry name.
pub fn pretrained_shapes() -> HashMap<String, Vec<usize>> {
    BACKBONE_CONVS
        .iter()
        .flat_map(|&(name, cin, cout)| {
            [
                (format!("{name}.weight"), vec![3, 3, cin, cout]),
                (format!("{name}.bias"), vec![cout]),
            ]
        })
        .collect()
}
