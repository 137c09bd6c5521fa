//! Checkpoint directories.
//!
//! ```text
//! epoch-0010/
//!   manifest.json          format version, arch, train config, records, hashes
//!   gen_encoder.bin ...    one tensor file per network (params then buffers)
//!   opt_generator.bin      Adam moments
//!   opt_discriminator.bin
//! ```
//!
//! Tensor file layout (little endian): magic `GNMT`, `u32` version, `u32`
//! tensor count, then per tensor `u32` name length, UTF-8 name, `u8` dtype
//! (0 = f32), `u32` ndim, `u64` dims, raw f32 data.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Adam, EpochRecord, Optimizers, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{build_models, ArchConfig, ModelBundle};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"GNMT";
const DTYPE_F32: u8 = 0;
const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub file: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSteps {
    pub generator: u64,
    pub discriminator: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub arch: ArchConfig,
    pub seed: u64,
    pub epoch: usize,
    pub train: TrainConfig,
    pub optimizer_steps: OptimizerSteps,
    pub records: Vec<EpochRecord>,
    pub files: BTreeMap<String, FileEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub bundle: ModelBundle,
    pub optim: Optimizers,
    pub meta: CheckpointMeta,
}

pub fn encode_tensors(tensors: &[(String, &Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.write_u32::<LittleEndian>(FORMAT_VERSION).unwrap();
    out.write_u32::<LittleEndian>(tensors.len() as u32).unwrap();
    for (name, t) in tensors {
        out.write_u32::<LittleEndian>(name.len() as u32).unwrap();
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F32);
        out.write_u32::<LittleEndian>(t.shape().len() as u32).unwrap();
        for &d in t.shape() {
            out.write_u64::<LittleEndian>(d as u64).unwrap();
        }
        for &v in t.data() {
            out.write_f32::<LittleEndian>(v).unwrap();
        }
    }
    out
}

pub fn decode_tensors(bytes: &[u8], what: &str) -> Result<Vec<(String, Tensor)>> {
    let corrupt = |m: String| Error::Corruption(format!("{what}: {m}"));
    let mut r = Cursor::new(bytes);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| corrupt(e.to_string()))?;
    if &magic != MAGIC {
        return Err(corrupt(format!("bad magic {magic:?}")));
    }
    let rd = |r: &mut Cursor<&[u8]>| r.read_u32::<LittleEndian>().map_err(|e| corrupt(e.to_string()));
    let version = rd(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let count = rd(&mut r)? as usize;
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = rd(&mut r)? as usize;
        if len > bytes.len() {
            return Err(corrupt("name length past end of file".into()));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(|e| corrupt(e.to_string()))?;
        let name = String::from_utf8(name).map_err(|e| corrupt(e.to_string()))?;
        let dtype = r.read_u8().map_err(|e| corrupt(e.to_string()))?;
        if dtype != DTYPE_F32 {
            return Err(corrupt(format!("{name}: unsupported dtype {dtype}")));
        }
        let ndim = rd(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            shape.push(r.read_u64::<LittleEndian>().map_err(|e| corrupt(e.to_string()))? as usize);
        }
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = match numel {
            Some(n) if n.saturating_mul(4) <= bytes.len() => n,
            _ => return Err(corrupt(format!("{name}: implausible shape {shape:?}"))),
        };
        let mut data = vec![0f32; numel];
        r.read_f32_into::<LittleEndian>(&mut data)
            .map_err(|e| corrupt(format!("{name}: {e}")))?;
        out.push((name, Tensor::new(shape, data)?));
    }
    if (r.position() as usize) != bytes.len() {
        return Err(corrupt("trailing bytes".into()));
    }
    Ok(out)
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn adam_tensors(opt: &Adam) -> Vec<(String, &Tensor)> {
    let m = opt.m.iter().enumerate().map(|(i, t)| (format!("m.{i}"), t));
    let v = opt.v.iter().enumerate().map(|(i, t)| (format!("v.{i}"), t));
    m.chain(v).collect()
}

pub fn save_checkpoint(
    dir: &Path,
    bundle: &ModelBundle,
    optim: &Optimizers,
    cfg: &TrainConfig,
    records: &[EpochRecord],
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = BTreeMap::new();
    let mut write = |key: &str, bytes: Vec<u8>| -> Result<()> {
        let file = format!("{key}.bin");
        let path = dir.join(&file);
        fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        files.insert(
            key.to_string(),
            FileEntry {
                file,
                sha256: sha256_hex(&bytes),
            },
        );
        Ok(())
    };
    for (name, net) in bundle.networks() {
        write(name, encode_tensors(&net.state()))?;
    }
    write("opt_generator", encode_tensors(&adam_tensors(&optim.generator)))?;
    write("opt_discriminator", encode_tensors(&adam_tensors(&optim.discriminator)))?;
    let meta = CheckpointMeta {
        format_version: FORMAT_VERSION,
        arch: bundle.arch,
        seed: cfg.seed,
        epoch: records.len(),
        train: cfg.clone(),
        optimizer_steps: OptimizerSteps {
            generator: optim.generator.step,
            discriminator: optim.discriminator.step,
        },
        records: records.to_vec(),
        files,
    };
    let path = dir.join(MANIFEST);
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(serde_json::to_string_pretty(&meta)?.as_bytes())
        .map_err(|e| Error::io(&path, e))?;
    Ok(())
}

fn read_verified(dir: &Path, meta: &CheckpointMeta, key: &str) -> Result<Vec<(String, Tensor)>> {
    let entry = meta
        .files
        .get(key)
        .ok_or_else(|| Error::Corruption(format!("manifest lists no file for {key}")))?;
    let path = dir.join(&entry.file);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let actual = sha256_hex(&bytes);
    if actual != entry.sha256 {
        return Err(Error::Corruption(format!(
            "{}: sha256 {actual} does not match manifest {}",
            path.display(),
            entry.sha256
        )));
    }
    decode_tensors(&bytes, &entry.file)
}

fn fill(dst: Vec<&mut Tensor>, src: Vec<(String, Tensor)>, names: &[String], what: &str) -> Result<()> {
    if dst.len() != src.len() {
        return Err(Error::Corruption(format!(
            "{what}: expected {} tensors, file has {}",
            dst.len(),
            src.len()
        )));
    }
    for ((d, (name, s)), expect) in dst.into_iter().zip(src).zip(names) {
        if &name != expect || d.shape() != s.shape() {
            return Err(Error::Corruption(format!(
                "{what}: expected {expect} {:?}, found {name} {:?}",
                d.shape(),
                s.shape()
            )));
        }
        *d = s;
    }
    Ok(())
}

fn fill_adam(opt: &mut Adam, src: Vec<(String, Tensor)>, step: u64, what: &str) -> Result<()> {
    let names: Vec<String> = adam_tensors(opt).into_iter().map(|(n, _)| n).collect();
    let dst: Vec<&mut Tensor> = opt.m.iter_mut().chain(opt.v.iter_mut()).collect();
    fill(dst, src, &names, what)?;
    opt.step = step;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let raw: serde_json::Value = serde_json::from_str(&text)?;
    let version = raw.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let meta: CheckpointMeta = serde_json::from_value(raw)?;
    let mut bundle = build_models(&meta.arch, meta.seed)?;
    for (name, net) in bundle.networks_mut() {
        let names: Vec<String> = net.state().into_iter().map(|(n, _)| n).collect();
        let src = read_verified(dir, &meta, name)?;
        fill(net.state_mut(), src, &names, name)?;
    }
    let mut optim = Optimizers::new(&bundle, &meta.train);
    fill_adam(
        &mut optim.generator,
        read_verified(dir, &meta, "opt_generator")?,
        meta.optimizer_steps.generator,
        "opt_generator",
    )?;
    fill_adam(
        &mut optim.discriminator,
        read_verified(dir, &meta, "opt_discriminator")?,
        meta.optimizer_steps.discriminator,
        "opt_discriminator",
    )?;
    Ok(Checkpoint { bundle, optim, meta })
}

/// Load only the networks, e.g. for scoring.
pub fn load_bundle(dir: &Path) -> Result<(ModelBundle, CheckpointMeta)> {
    let ck = load_checkpoint(dir)?;
    Ok((ck.bundle, ck.meta))
}
