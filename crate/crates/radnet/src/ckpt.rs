//! Single-file checkpoint archives.
//!
//! An archive is a magic tag carrying the major version, a JSON manifest, a
//! list of shape-tagged f64 tensors keyed by canonical parameter path, and
//! a SHA-256 trailer over everything before it. Loading into a built model
//! verifies shape-for-shape agreement and names the first mismatch. Writes
//! go through a temp file and a rename, so a crash never leaves a torn
//! checkpoint behind.

use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::denoise::{DenoiseNet, DenoiseNetConfig};
use crate::dsp::StftConfig;
use crate::error::{Error, Result};
use crate::losses::Stage;
use crate::nn::params::Init;
use crate::nn::{Arr, ParamStore};
use crate::repair::{RepairNet, RepairNetConfig};

/// Leading bytes of every archive; the trailing digit is the major version.
pub const MAGIC: &[u8; 8] = b"RDNCKPT1";

/// Parameter prefix of the first-stage (repairing) network.
pub const REPAIR_PREFIX: &str = "s1.";
/// Parameter prefix of the second-stage (denoising) network.
pub const DENOISE_PREFIX: &str = "s2.";
/// Parameter prefix of discriminator banks; never part of inference files.
pub const DISC_PREFIX: &str = "d.";

/// One stored tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub trainable: bool,
    pub value: Arr,
}

fn ckpt_err(section: &str, detail: impl std::fmt::Display) -> Error {
    Error::Checkpoint(format!("{section}: {detail}"))
}

/// Writes `manifest` and the store's tensors under `prefixes` (every tensor
/// when empty) as one archive, atomically.
pub fn save_archive(
    path: impl AsRef<Path>,
    manifest: &serde_json::Value,
    store: &ParamStore,
    prefixes: &[&str],
) -> Result<()> {
    let keep = |name: &str| prefixes.is_empty() || prefixes.iter().any(|p| name.starts_with(p));
    let records: Vec<TensorRecord> = store
        .iter()
        .filter(|(name, _, _)| keep(name))
        .map(|(name, value, trainable)| TensorRecord {
            name: name.to_owned(),
            trainable,
            value: (**value).clone(),
        })
        .collect();
    save_records(path, manifest, &records)
}

/// Writes `manifest` and arbitrary tensor records as one archive,
/// atomically. [`save_archive`] is the store-backed convenience; this form
/// also carries tensors that are not model parameters, such as optimizer
/// moments.
pub fn save_records(
    path: impl AsRef<Path>,
    manifest: &serde_json::Value,
    records: &[TensorRecord],
) -> Result<()> {
    let path = path.as_ref();
    let mut body = Vec::new();
    body.extend_from_slice(MAGIC);
    let manifest_bytes =
        serde_json::to_vec(manifest).map_err(|e| ckpt_err("manifest", e))?;
    body.extend_from_slice(&(manifest_bytes.len() as u64).to_le_bytes());
    body.extend_from_slice(&manifest_bytes);

    body.extend_from_slice(&(records.len() as u64).to_le_bytes());
    for r in records {
        body.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
        body.extend_from_slice(r.name.as_bytes());
        body.push(r.trainable as u8);
        body.push(r.value.ndim() as u8);
        for &d in r.value.shape() {
            body.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in r.value.iter() {
            body.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&body);
    body.extend_from_slice(&digest);

    let tmp = path.with_extension("ckpt.tmp");
    let io_err = |e: std::io::Error| Error::io(tmp.display().to_string(), e);
    let mut file = std::fs::File::create(&tmp).map_err(io_err)?;
    file.write_all(&body).map_err(io_err)?;
    file.sync_all().map_err(io_err)?;
    drop(file);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Reads an archive back as its manifest and tensor records.
pub fn read_archive(path: impl AsRef<Path>) -> Result<(serde_json::Value, Vec<TensorRecord>)> {
    let path = path.as_ref();
    let mut body = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut body))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    if body.len() < MAGIC.len() + 32 {
        return Err(ckpt_err("magic", "file too short to be a checkpoint"));
    }
    let (payload, trailer) = body.split_at(body.len() - 32);
    if Sha256::digest(payload).as_slice() != trailer {
        return Err(ckpt_err("integrity trailer", "content digest mismatch, file corrupt"));
    }
    let mut r = payload;
    let magic = take(&mut r, MAGIC.len(), "magic")?;
    if magic != MAGIC {
        if magic.starts_with(b"RDNCKPT") {
            return Err(ckpt_err(
                "magic",
                format!("unsupported major version {}", magic[7] as char),
            ));
        }
        return Err(ckpt_err("magic", "not a checkpoint archive"));
    }
    let manifest_len = take_u64(&mut r, "manifest length")? as usize;
    let manifest_bytes = take(&mut r, manifest_len, "manifest")?;
    let manifest =
        serde_json::from_slice(manifest_bytes).map_err(|e| ckpt_err("manifest", e))?;
    let n_tensors = take_u64(&mut r, "tensor count")? as usize;
    let mut tensors = Vec::with_capacity(n_tensors);
    for i in 0..n_tensors {
        let section = format!("tensor {i}");
        let name_len = take_u32(&mut r, &section)? as usize;
        let name = std::str::from_utf8(take(&mut r, name_len, &section)?)
            .map_err(|e| ckpt_err(&section, e))?
            .to_owned();
        let section = format!("tensor {name}");
        let trainable = take(&mut r, 1, &section)?[0] != 0;
        let ndim = take(&mut r, 1, &section)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(take_u64(&mut r, &section)? as usize);
        }
        let len: usize = shape.iter().product();
        let bytes = take(&mut r, len * 8, &section)?;
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let value = Arr::from_shape_vec(ndarray::IxDyn(&shape), data)
            .map_err(|e| ckpt_err(&section, e))?;
        tensors.push(TensorRecord { name, trainable, value });
    }
    if !r.is_empty() {
        return Err(ckpt_err("trailer", format!("{} unexpected trailing bytes", r.len())));
    }
    Ok((manifest, tensors))
}

fn take<'a>(r: &mut &'a [u8], n: usize, section: &str) -> Result<&'a [u8]> {
    if r.len() < n {
        return Err(ckpt_err(section, "truncated"));
    }
    let (head, rest) = r.split_at(n);
    *r = rest;
    Ok(head)
}

fn take_u64(r: &mut &[u8], section: &str) -> Result<u64> {
    Ok(u64::from_le_bytes(take(r, 8, section)?.try_into().expect("8 bytes")))
}

fn take_u32(r: &mut &[u8], section: &str) -> Result<u32> {
    Ok(u32::from_le_bytes(take(r, 4, section)?.try_into().expect("4 bytes")))
}

/// Copies tensors into an existing store, then checks that every store
/// parameter under `required_prefixes` was filled. Shape or name mismatches
/// abort with the first offender.
pub fn load_archive_into(
    tensors: Vec<TensorRecord>,
    store: &mut ParamStore,
    required_prefixes: &[&str],
) -> Result<()> {
    let mut seen = std::collections::BTreeSet::new();
    for t in tensors {
        if !store.contains(&t.name) {
            return Err(ckpt_err(
                &format!("tensor {}", t.name),
                "not a parameter of the built model",
            ));
        }
        seen.insert(t.name.clone());
        store.set_value(&t.name, t.value)?;
    }
    for prefix in required_prefixes {
        for name in store.names(prefix) {
            if !seen.contains(&name) {
                return Err(ckpt_err(&format!("tensor {name}"), "missing from the archive"));
            }
        }
    }
    Ok(())
}

/// Identity card of an inference checkpoint: which stage of the protocol it
/// completed and the configs needed to rebuild its networks.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SystemManifest {
    pub track: u8,
    pub stage: Stage,
    pub stft: StftConfig,
    pub repair: Option<RepairNetConfig>,
    pub denoise: Option<DenoiseNetConfig>,
}

/// A rebuilt system loaded from an inference checkpoint.
pub struct LoadedSystem {
    pub manifest: SystemManifest,
    pub store: ParamStore,
    pub repair: Option<RepairNet>,
    pub denoise: Option<DenoiseNet>,
}

/// Saves the networks' parameters with their manifest. Discriminators are
/// training-only and never included.
pub fn save_system(
    path: impl AsRef<Path>,
    manifest: &SystemManifest,
    store: &ParamStore,
) -> Result<()> {
    let value = serde_json::to_value(manifest).map_err(|e| ckpt_err("manifest", e))?;
    save_archive(path, &value, store, &[REPAIR_PREFIX, DENOISE_PREFIX])
}

/// Rebuilds the networks named by the manifest and fills them from the
/// archive.
pub fn load_system(path: impl AsRef<Path>) -> Result<LoadedSystem> {
    let (manifest, tensors) = read_archive(path)?;
    let manifest: SystemManifest =
        serde_json::from_value(manifest).map_err(|e| ckpt_err("manifest", e))?;
    let mut store = ParamStore::new();
    let mut init = Init::new(0);
    let repair = manifest
        .repair
        .as_ref()
        .map(|cfg| RepairNet::build(&mut store, &mut init, REPAIR_PREFIX, cfg))
        .transpose()?;
    let denoise = manifest
        .denoise
        .as_ref()
        .map(|cfg| DenoiseNet::build(&mut store, &mut init, DENOISE_PREFIX, cfg))
        .transpose()?;
    if repair.is_none() && denoise.is_none() {
        return Err(ckpt_err("manifest", "archive describes no networks"));
    }
    let mut required = Vec::new();
    if repair.is_some() {
        required.push(REPAIR_PREFIX);
    }
    if denoise.is_some() {
        required.push(DENOISE_PREFIX);
    }
    load_archive_into(tensors, &mut store, &required)?;
    Ok(LoadedSystem { manifest, store, repair, denoise })
}
