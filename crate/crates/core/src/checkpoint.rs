//! Binary checkpoint of a [`CondensedModel`].
//!
//! ```text
//! b"GCNDCKPT"            magic
//! u32 LE                 format version
//! u64 LE                 manifest length in bytes
//! manifest               JSON: architecture, tensor table, config, provenance
//! blob                   every tensor as little-endian f32, in table order
//! [u8; 32]              SHA-256 of all preceding bytes
//! ```

use std::fs;
use std::path::Path;

use gencond_tensor::{Module, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codebook::{ClassEmbeddingTable, Codebook};
use crate::condense::{CondensedModel, ModelArch, Provenance};
use crate::error::{Error, Result};
use crate::nn::{FeatureNet, Generator, Linear};

pub const MAGIC: &[u8; 8] = b"GCNDCKPT";
pub const VERSION: u32 = 1;
const FORMAT: &str = "gencond-condensed";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Element offset into the blob.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub arch: ModelArch,
    pub tensors: Vec<TensorEntry>,
    pub config: serde_json::Value,
    pub provenance: Provenance,
}

const DIGEST_LEN: usize = 32;

fn digest(bytes: &[u8]) -> [u8; DIGEST_LEN] {
    Sha256::digest(bytes).into()
}

fn named_tensors(model: &CondensedModel) -> Vec<(String, &Tensor)> {
    let mut out: Vec<(String, &Tensor)> = model.named_params().into_iter().map(|(n, p)| (n, &p.value)).collect();
    out.extend(model.named_buffers());
    out
}

/// Serializes the model to bytes.
pub fn to_bytes(model: &CondensedModel) -> Result<Vec<u8>> {
    let tensors = named_tensors(model);
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0;
    for (name, t) in &tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype: "f32".into(),
            offset,
        });
        offset += t.numel();
    }
    let manifest = CheckpointManifest {
        format: FORMAT.into(),
        version: VERSION,
        arch: model.arch.clone(),
        tensors: entries,
        config: model.config.clone(),
        provenance: model.provenance.clone(),
    };
    let json = serde_json::to_vec_pretty(&manifest)?;
    let mut out = Vec::with_capacity(28 + json.len() + 4 * offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in &tensors {
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let h = digest(&out);
    out.extend_from_slice(&h);
    Ok(out)
}

pub fn save_checkpoint(model: &CondensedModel, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, to_bytes(model)?)?;
    Ok(())
}

fn take<'b>(bytes: &'b [u8], at: &mut usize, n: usize, field: &str) -> Result<&'b [u8]> {
    let end = at
        .checked_add(n)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::checkpoint(field, "file truncated"))?;
    let s = &bytes[*at..end];
    *at = end;
    Ok(s)
}

/// Empty module graph matching `arch`, to be filled from the blob.
fn skeleton(arch: &ModelArch) -> Result<CondensedModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let feature_dim = arch.feature.feature_dim();
    let latent = arch.generator.latent_dim;
    Ok(CondensedModel {
        arch: arch.clone(),
        codebook: Codebook::new(&mut rng, arch.ipc, latent),
        generator: Generator::new(arch.generator, &mut rng)?,
        embed: ClassEmbeddingTable::new(
            arch.embed_mode,
            Tensor::zeros([arch.num_classes, arch.embed_dim]),
            latent,
            &mut rng,
        ),
        intra_anchor: Linear::new(&mut rng, arch.embed_dim, feature_dim),
        extractor: if arch.has_extractor {
            Some(FeatureNet::new(arch.feature, &mut rng)?)
        } else {
            None
        },
        config: serde_json::Value::Null,
        provenance: Provenance::default(),
    })
}

fn check_arch(arch: &ModelArch) -> Result<()> {
    let bad = |field: &str, reason: String| Err(Error::checkpoint(format!("arch.{field}"), reason));
    if arch.feature.num_classes != arch.num_classes {
        return bad("feature.num_classes", "differs from arch.num_classes".into());
    }
    if arch.feature.image != arch.generator.image {
        return bad("generator.image", "differs from arch.feature.image".into());
    }
    let expect_embed = match arch.embed_mode {
        crate::codebook::EmbedMode::OneHot => arch.num_classes,
        _ => arch.feature.width,
    };
    if arch.embed_dim != expect_embed {
        return bad("embed_dim", format!("expected {expect_embed} for {} mode", arch.embed_mode));
    }
    if arch.ipc == 0 {
        return bad("ipc", "must be positive".into());
    }
    arch.feature
        .validate()
        .or_else(|e| bad("feature", e.to_string()))?;
    arch.generator
        .validate()
        .or_else(|e| bad("generator", e.to_string()))
}

/// Walks the tensor table and blob in lockstep.
struct BlobCursor<'b> {
    bytes: &'b [u8],
    at: usize,
    offset: usize,
    entries: &'b [TensorEntry],
    index: usize,
}

impl BlobCursor<'_> {
    fn fill(&mut self, name: &str, slot: &mut Tensor) -> Result<()> {
        let i = self.index;
        let entry = &self.entries[i];
        if entry.name != name {
            return Err(Error::checkpoint(
                format!("tensors[{i}].name"),
                format!("expected `{name}`, found `{}`", entry.name),
            ));
        }
        if entry.shape != slot.shape() {
            return Err(Error::checkpoint(
                format!("tensors[{i}].shape"),
                format!("`{name}` expected {:?}, found {:?}", slot.shape(), entry.shape),
            ));
        }
        if entry.dtype != "f32" {
            return Err(Error::checkpoint(format!("tensors[{i}].dtype"), format!("unsupported `{}`", entry.dtype)));
        }
        if entry.offset != self.offset {
            return Err(Error::checkpoint(
                format!("tensors[{i}].offset"),
                format!("expected {}, found {}", self.offset, entry.offset),
            ));
        }
        let raw = take(self.bytes, &mut self.at, 4 * slot.numel(), "blob")?;
        for (dst, chunk) in slot.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
            *dst = f32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64;
        }
        self.offset += slot.numel();
        self.index += 1;
        Ok(())
    }
}

/// Parses and validates checkpoint bytes.
pub fn from_bytes(bytes: &[u8]) -> Result<CondensedModel> {
    let mut at = 0;
    if take(bytes, &mut at, 8, "magic")? != MAGIC {
        return Err(Error::checkpoint("magic", "not a condensed-model checkpoint"));
    }
    let version = u32::from_le_bytes(take(bytes, &mut at, 4, "version")?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::checkpoint("version", format!("unsupported version {version}, expected {VERSION}")));
    }
    let len = u64::from_le_bytes(take(bytes, &mut at, 8, "manifest_len")?.try_into().expect("8 bytes"));
    let json = take(bytes, &mut at, len as usize, "manifest")?;
    let manifest: CheckpointManifest =
        serde_json::from_slice(json).map_err(|e| Error::checkpoint("manifest", e.to_string()))?;
    if manifest.format != FORMAT {
        return Err(Error::checkpoint("format", format!("expected `{FORMAT}`, got `{}`", manifest.format)));
    }
    if manifest.version != version {
        return Err(Error::checkpoint("version", "manifest and header disagree"));
    }
    check_arch(&manifest.arch)?;

    let mut model = skeleton(&manifest.arch)?;
    let expected = model.named_params().len() + model.named_buffers().len();
    if expected != manifest.tensors.len() {
        return Err(Error::checkpoint(
            "tensors",
            format!("expected {expected} tensors, found {}", manifest.tensors.len()),
        ));
    }
    let mut cursor = BlobCursor {
        bytes,
        at,
        offset: 0,
        entries: &manifest.tensors,
        index: 0,
    };
    for (name, p) in model.named_params_mut() {
        cursor.fill(&name, &mut p.value)?;
    }
    for (name, t) in model.named_buffers_mut() {
        cursor.fill(&name, t)?;
    }
    let count = cursor.at;
    at = cursor.at;
    let stored = take(bytes, &mut at, DIGEST_LEN, "checksum")?;
    if at != bytes.len() {
        return Err(Error::checkpoint("blob", format!("{} trailing bytes", bytes.len() - at)));
    }
    if digest(&bytes[..count]) != stored {
        return Err(Error::checkpoint("checksum", "content hash mismatch"));
    }
    model.config = manifest.config;
    model.provenance = manifest.provenance;
    Ok(model)
}

pub fn load_checkpoint(path: &Path) -> Result<CondensedModel> {
    let bytes = fs::read(path).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    from_bytes(&bytes)
}

/// Reads only the manifest.
pub fn read_manifest(path: &Path) -> Result<CheckpointManifest> {
    let bytes = fs::read(path)?;
    let mut at = 8 + 4;
    let len = u64::from_le_bytes(take(&bytes, &mut at, 8, "manifest_len")?.try_into().expect("8 bytes"));
    let json = take(&bytes, &mut at, len as usize, "manifest")?;
    serde_json::from_slice(json).map_err(|e| Error::checkpoint("manifest", e.to_string()))
}
