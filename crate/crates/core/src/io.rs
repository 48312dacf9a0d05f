//! Persistence: tensor blobs, key=value manifests, dataset directories,
//! model checkpoints and PGM/PPM image dumps.
//!
//! Blob layout: `I2IT`, u32 LE version (1), u32 LE ndims, ndims × u32 LE
//! dims, then the values as f64 LE in row-major order.

use std::fs;
use std::path::Path;

use crate::autodiff::ParamGroup;
use crate::error::{Error, Result};
use crate::gan::{BackboneKind, BackboneSpec, ModelBundle};
use crate::metrics::fmt_num;
use crate::tensor::Tensor;
use crate::victim::{Dataset, DatasetManifest, DatasetRole, DomainParams, TaskKind, TaskSpec};

pub const MAGIC: &[u8; 4] = b"I2IT";
pub const VERSION: u32 = 1;
pub const DATASET_MANIFEST: &str = "manifest.txt";
pub const CHECKPOINT_MANIFEST: &str = "checkpoint.txt";

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * t.ndim() + 8 * t.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize, field: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.path,
                format!(
                    "truncated at offset {}: {field} needs {n} bytes, {} left",
                    self.pos,
                    self.bytes.len() - self.pos
                ),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }
}

/// Parse a blob; `path` only labels errors.
pub fn decode_tensor(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let mut c = Cursor { bytes, pos: 0, path };
    if c.take(4, "magic")? != MAGIC {
        return Err(Error::format(path, "bad magic at offset 0, expected \"I2IT\""));
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(Error::format(
            path,
            format!("unsupported version {version} at offset 4"),
        ));
    }
    let ndims = c.u32("ndims")? as usize;
    let mut shape = Vec::with_capacity(ndims.min(16));
    for i in 0..ndims {
        shape.push(c.u32(&format!("dim {i}"))? as usize);
    }
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|n| n.checked_mul(8).is_some())
        .ok_or_else(|| Error::format(path, format!("dims {shape:?} overflow")))?;
    let start = c.pos;
    let raw = c.take(8 * count, "values")?;
    let data = raw
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    if c.pos != bytes.len() {
        return Err(Error::format(
            path,
            format!(
                "{} trailing bytes after the values ending at offset {}",
                bytes.len() - c.pos,
                c.pos
            ),
        ));
    }
    Tensor::new(shape, data).map_err(|e| Error::format(path, format!("values at offset {start}: {e}")))
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, encode_tensor(t)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes, path)
}

/// Ordered `key=value` text file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyValues {
    pub entries: Vec<(String, String)>,
}

impl KeyValues {
    pub fn push(&mut self, key: impl Into<String>, value: impl ToString) {
        self.entries.push((key.into(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn render(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut kv = KeyValues::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(path, format!("line {}: expected key=value", i + 1)))?;
            if kv.get(k.trim()).is_some() {
                return Err(Error::format(
                    path,
                    format!("line {}: duplicate key {:?}", i + 1, k.trim()),
                ));
            }
            kv.push(k.trim(), v.trim());
        }
        Ok(kv)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.render()).map_err(|e| Error::io(path, e))
    }

    pub fn require(&self, key: &str, path: &Path) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::format(path, format!("missing field {key:?}")))
    }

    /// Parse field `key` with `FromStr`, naming the field on failure.
    pub fn field<T: std::str::FromStr>(&self, key: &str, path: &Path) -> Result<T> {
        let raw = self.require(key, path)?;
        raw.parse()
            .map_err(|_| Error::format(path, format!("field {key:?}: cannot parse {raw:?}")))
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Write `manifest.txt`, `inputs.i2it` and (when present) `targets.i2it`.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    ensure_dir(dir)?;
    let m = &ds.manifest;
    let mut kv = KeyValues::default();
    kv.push("kind", "dataset");
    kv.push("task", m.task.kind);
    kv.push("image_size", m.task.image_size);
    kv.push("channels", m.task.channels);
    kv.push("role", m.role);
    kv.push("seed", m.seed);
    kv.push("count", m.count);
    kv.push("domain.shift", fmt_num(m.domain.shift));
    kv.push("domain.freq_lo", fmt_num(m.domain.freq_lo));
    kv.push("domain.freq_hi", fmt_num(m.domain.freq_hi));
    kv.push("domain.novel_prob", fmt_num(m.domain.novel_prob));
    kv.push("domain.bg_lo", fmt_num(m.domain.bg_lo));
    kv.push("domain.bg_hi", fmt_num(m.domain.bg_hi));
    let mut blobs = vec!["inputs.i2it"];
    write_tensor(&dir.join("inputs.i2it"), &ds.inputs)?;
    if let Some(t) = &ds.targets {
        write_tensor(&dir.join("targets.i2it"), t)?;
        blobs.push("targets.i2it");
    }
    kv.push("blobs", blobs.join(","));
    kv.write(&dir.join(DATASET_MANIFEST))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join(DATASET_MANIFEST);
    let kv = KeyValues::read(&mpath)?;
    if kv.require("kind", &mpath)? != "dataset" {
        return Err(Error::format(&mpath, "field \"kind\": not a dataset manifest"));
    }
    let task = TaskSpec {
        kind: kv.field::<TaskKind>("task", &mpath)?,
        image_size: kv.field("image_size", &mpath)?,
        channels: kv.field("channels", &mpath)?,
    };
    task.validate().map_err(|e| Error::format(&mpath, e.to_string()))?;
    let domain = DomainParams {
        shift: kv.field("domain.shift", &mpath)?,
        freq_lo: kv.field("domain.freq_lo", &mpath)?,
        freq_hi: kv.field("domain.freq_hi", &mpath)?,
        novel_prob: kv.field("domain.novel_prob", &mpath)?,
        bg_lo: kv.field("domain.bg_lo", &mpath)?,
        bg_hi: kv.field("domain.bg_hi", &mpath)?,
    };
    let manifest = DatasetManifest {
        task,
        domain,
        seed: kv.field("seed", &mpath)?,
        count: kv.field("count", &mpath)?,
        role: kv.field::<DatasetRole>("role", &mpath)?,
    };
    let blobs: Vec<&str> = kv.require("blobs", &mpath)?.split(',').collect();
    if !blobs.contains(&"inputs.i2it") || blobs.iter().any(|b| !["inputs.i2it", "targets.i2it"].contains(b)) {
        return Err(Error::format(
            &mpath,
            format!("field \"blobs\": unexpected list {blobs:?}"),
        ));
    }
    let load = |name: &str| -> Result<Tensor> {
        let path = dir.join(name);
        let t = read_tensor(&path)?;
        if t.ndim() != 4 || t.shape()[0] != manifest.count {
            return Err(Error::format(
                &path,
                format!(
                    "manifest count {} disagrees with blob shape {:?}",
                    manifest.count,
                    t.shape()
                ),
            ));
        }
        Ok(t)
    };
    let inputs = load("inputs.i2it")?;
    let targets = if blobs.contains(&"targets.i2it") {
        Some(load("targets.i2it")?)
    } else {
        None
    };
    Dataset::new(manifest, inputs, targets).map_err(|e| Error::format(&mpath, e.to_string()))
}

fn blob_name(group: &str, param: &str) -> String {
    format!("{group}.{param}.i2it")
}

/// One blob per named parameter plus `checkpoint.txt`.
pub fn save_bundle(bundle: &ModelBundle, dir: &Path) -> Result<()> {
    ensure_dir(dir)?;
    let s = &bundle.spec;
    let mut kv = KeyValues::default();
    kv.push("kind", "checkpoint");
    kv.push("backbone", s.kind);
    kv.push("base_channels", s.base_channels);
    kv.push("depth", s.depth);
    kv.push("image_channels", s.image_channels);
    kv.push("image_size", s.image_size);
    let names: Vec<&str> = bundle.groups().map(|g| g.name.as_str()).collect();
    kv.push("groups", names.join(","));
    for g in bundle.groups() {
        let params: Vec<&str> = g.params.iter().map(|(n, _)| n.as_str()).collect();
        kv.push(format!("group.{}", g.name), params.join(","));
        for (n, t) in &g.params {
            write_tensor(&dir.join(blob_name(&g.name, n)), t)?;
        }
    }
    kv.write(&dir.join(CHECKPOINT_MANIFEST))
}

/// Load a checkpoint, checking every name and shape against the declared backbone.
pub fn load_bundle(dir: &Path) -> Result<ModelBundle> {
    let mpath = dir.join(CHECKPOINT_MANIFEST);
    let kv = KeyValues::read(&mpath)?;
    if kv.require("kind", &mpath)? != "checkpoint" {
        return Err(Error::format(&mpath, "field \"kind\": not a checkpoint manifest"));
    }
    let spec = BackboneSpec {
        kind: kv.field::<BackboneKind>("backbone", &mpath)?,
        base_channels: kv.field("base_channels", &mpath)?,
        depth: kv.field("depth", &mpath)?,
        image_channels: kv.field("image_channels", &mpath)?,
        image_size: kv.field("image_size", &mpath)?,
    };
    let template = ModelBundle::build(spec, 0).map_err(|e| Error::format(&mpath, e.to_string()))?;
    let expected: Vec<&str> = template.groups().map(|g| g.name.as_str()).collect();
    if kv.require("groups", &mpath)? != expected.join(",") {
        return Err(Error::format(
            &mpath,
            format!("field \"groups\": expected {}", expected.join(",")),
        ));
    }
    let load_group = |tg: &ParamGroup| -> Result<ParamGroup> {
        let key = format!("group.{}", tg.name);
        let listed = kv.require(&key, &mpath)?;
        let want: Vec<&str> = tg.params.iter().map(|(n, _)| n.as_str()).collect();
        if listed != want.join(",") {
            return Err(Error::format(
                &mpath,
                format!("field {key:?}: expected {}", want.join(",")),
            ));
        }
        let params = tg
            .params
            .iter()
            .map(|(n, t)| {
                let path = dir.join(blob_name(&tg.name, n));
                let v = read_tensor(&path)?;
                if v.shape() != t.shape() {
                    return Err(Error::format(
                        &path,
                        format!("shape {:?}, backbone expects {:?}", v.shape(), t.shape()),
                    ));
                }
                Ok((n.clone(), v))
            })
            .collect::<Result<_>>()?;
        ParamGroup::new(tg.name.clone(), params)
    };
    let generators = template.generators.iter().map(load_group).collect::<Result<_>>()?;
    let discriminators = template.discriminators.iter().map(load_group).collect::<Result<_>>()?;
    ModelBundle::from_groups(spec, generators, discriminators)
}

fn to_byte(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// Encode `[C,H,W]` images (C = 1 or 3, values in [-1,1]) side by side as PGM (P5) or PPM (P6).
pub fn encode_pnm(panels: &[Tensor]) -> Result<Vec<u8>> {
    let first = panels
        .first()
        .ok_or_else(|| Error::Contract("no images to export".into()))?;
    if first.ndim() != 3 || !matches!(first.shape()[0], 1 | 3) {
        return Err(Error::dim(
            "encode_pnm",
            format!("expected [1|3,H,W], got {:?}", first.shape()),
        ));
    }
    for p in panels {
        first.expect_same_shape(p, "encode_pnm")?;
    }
    let (c, h, w) = (first.shape()[0], first.shape()[1], first.shape()[2]);
    let magic = if c == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {h}\n255\n", w * panels.len()).into_bytes();
    for i in 0..h {
        for p in panels {
            for j in 0..w {
                for ch in 0..c {
                    out.push(to_byte(p.data()[(ch * h + i) * w + j]));
                }
            }
        }
    }
    Ok(out)
}

pub fn write_pnm(path: &Path, panels: &[Tensor]) -> Result<()> {
    fs::write(path, encode_pnm(panels)?).map_err(|e| Error::io(path, e))
}

/// Write a text artifact, creating parent directories.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}
