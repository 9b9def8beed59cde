//! Convolution parameters, seeded initialisation and checkpoint files.
//!
//! A checkpoint is a JSON manifest listing `{name, shape, offset}` per
//! parameter (offset in bytes) plus one flat little-endian `f64` blob stored
//! next to it with the extension `.bin`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    /// k×k×Cin×Cout.
    pub kernel: Tensor,
    /// Cout.
    pub bias: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct ConvVars {
    pub kernel: Var,
    pub bias: Var,
}

impl ConvParams {
    /// Kernel drawn from U(−√(6/fan_in), √(6/fan_in)), zero bias.
    pub fn init(rng: &mut ChaCha8Rng, k: usize, cin: usize, cout: usize) -> Self {
        let fan_in = (k * k * cin) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let data = (0..k * k * cin * cout).map(|_| rng.gen_range(-bound..bound)).collect();
        ConvParams {
            kernel: Tensor::from_parts(vec![k, k, cin, cout], data),
            bias: Tensor::zeros(&[cout]),
        }
    }

    pub fn bind(&self, g: &mut Graph) -> ConvVars {
        ConvVars { kernel: g.param(self.kernel.clone()), bias: g.param(self.bias.clone()) }
    }

    pub fn bind_constant(&self, g: &mut Graph) -> ConvVars {
        ConvVars { kernel: g.constant(self.kernel.clone()), bias: g.constant(self.bias.clone()) }
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.shape()[2]
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[3]
    }

    pub fn numel(&self) -> usize {
        self.kernel.numel() + self.bias.numel()
    }
}

impl ConvVars {
    pub fn apply(&self, g: &mut Graph, input: Var, dilation: usize) -> Result<Var> {
        g.conv2d(input, self.kernel, self.bias, dilation)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub blob: String,
    pub params: Vec<ManifestEntry>,
    /// Free-form metadata (training config, loss curve).
    #[serde(default)]
    pub meta: serde_json::Value,
}

fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

/// Writes `params` as manifest + blob. Returns the manifest.
pub fn save_checkpoint(
    path: &Path,
    params: &[(String, &Tensor)],
    meta: serde_json::Value,
) -> Result<Manifest> {
    let blob = blob_path(path);
    let mut bytes = Vec::new();
    let mut entries = Vec::with_capacity(params.len());
    for (name, t) in params {
        entries.push(ManifestEntry { name: name.clone(), shape: t.shape().to_vec(), offset: bytes.len() });
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        blob: blob.file_name().and_then(|s| s.to_str()).unwrap_or_default().to_string(),
        params: entries,
        meta,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(&blob, bytes)?;
    fs::write(path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Reads a checkpoint back into named tensors in manifest order.
pub fn load_checkpoint(path: &Path) -> Result<(Manifest, Vec<(String, Tensor)>)> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(path)?)?;
    let blob = path.with_file_name(&manifest.blob);
    let bytes = fs::read(blob)?;
    let mut out = Vec::with_capacity(manifest.params.len());
    for e in &manifest.params {
        let n: usize = e.shape.iter().product();
        let end = e.offset + 8 * n;
        if end > bytes.len() {
            return Err(Error::Io(format!("blob too short for parameter {}", e.name)));
        }
        let data = bytes[e.offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
    }
    Ok((manifest, out))
}
