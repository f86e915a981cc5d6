//! File formats for templates, datasets, projections and cascade models.
//!
//! Templates (`CTPL`) and datasets (`CDST`) are little-endian binary.
//! Models are `key = value` text. Projections are a text header terminated
//! by a line `end`, followed by little-endian `f64` mean and row-major basis.
//! Floats in text are written in shortest round-trip form, so parsing gives
//! back the same bits. Every writer goes through a temporary file and a
//! rename.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::cascade::{l2_norm, CascadeModel, StagePlan, Template};
use crate::error::{Error, Result};
use crate::lda::{LabeledDataset, LdaProjection};

pub const TEMPLATE_MAGIC: &[u8; 4] = b"CTPL";
pub const TEMPLATE_VERSION: u16 = 1;
pub const DATASET_MAGIC: &[u8; 4] = b"CDST";
pub const DATASET_VERSION: u16 = 1;
pub const MODEL_FORMAT: &str = "cascade-model";
pub const MODEL_VERSION: u32 = 1;
pub const PROJECTION_FORMAT: &str = "lda-projection";
pub const PROJECTION_VERSION: u32 = 1;
/// Norm tolerance for stored 32-bit rows.
pub const STORED_NORM_TOLERANCE: f64 = 1e-5;

/// Free-form provenance written as `meta.<key> = <value>` lines.
pub type Meta = BTreeMap<String, String>;

/// Writes `bytes` to a sibling temp file, syncs it, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("not a file path: {}", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp: PathBuf = path.with_file_name(tmp_name);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], what: &'static str) -> Self {
        Self { buf, pos: 0, what }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::SizeMismatch(format!(
                "{} truncated at byte {}: need {n} more, have {}",
                self.what,
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        self.array().map(u16::from_le_bytes)
    }

    fn u32(&mut self) -> Result<u32> {
        self.array().map(u32::from_le_bytes)
    }

    fn u64(&mut self) -> Result<u64> {
        self.array().map(u64::from_le_bytes)
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::Format(format!("{} id is not valid UTF-8", self.what)))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    /// Checks the rest of the buffer is exactly `count` items of `width`
    /// bytes and returns it.
    fn payload(&mut self, count: u64, width: u64) -> Result<&'a [u8]> {
        let expected = count
            .checked_mul(width)
            .filter(|&n| n <= usize::MAX as u64)
            .ok_or_else(|| Error::SizeMismatch(format!("{} payload size overflows", self.what)))?;
        let have = self.remaining() as u64;
        if have != expected {
            return Err(Error::SizeMismatch(format!(
                "{} payload is {have} bytes, header implies {expected}",
                self.what
            )));
        }
        self.take(expected as usize)
    }
}

fn push_string(out: &mut Vec<u8>, s: &str) -> Result<()> {
    let len = u32::try_from(s.len())
        .map_err(|_| Error::InvalidArgument("id longer than 4 GiB".into()))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

fn read_magic(r: &mut Reader, magic: &[u8; 4], version: u16) -> Result<()> {
    let found = r.array::<4>()?;
    if &found != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&found),
            String::from_utf8_lossy(magic)
        )));
    }
    let v = r.u16()?;
    if v != version {
        return Err(Error::Version {
            found: v.into(),
            expected: version.into(),
        });
    }
    Ok(())
}

fn u32_dim(dim: usize) -> Result<u32> {
    u32::try_from(dim).map_err(|_| Error::InvalidArgument(format!("dimension {dim} too large")))
}

/// Serializes templates. An empty list is stored with dimension 0.
pub fn encode_templates(templates: &[Template]) -> Result<Vec<u8>> {
    let dim = templates.first().map_or(0, Template::dim);
    if let Some(t) = templates.iter().find(|t| t.dim() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            actual: t.dim(),
        });
    }
    let ids: usize = templates.iter().map(|t| 4 + t.id().len()).sum();
    let mut out = Vec::with_capacity(18 + ids + templates.len() * dim * 4);
    out.extend_from_slice(TEMPLATE_MAGIC);
    out.extend_from_slice(&TEMPLATE_VERSION.to_le_bytes());
    out.extend_from_slice(&u32_dim(dim)?.to_le_bytes());
    out.extend_from_slice(&(templates.len() as u64).to_le_bytes());
    for t in templates {
        push_string(&mut out, t.id())?;
    }
    for t in templates {
        for v in t.features() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_templates(bytes: &[u8]) -> Result<Vec<Template>> {
    let mut r = Reader::new(bytes, "template file");
    read_magic(&mut r, TEMPLATE_MAGIC, TEMPLATE_VERSION)?;
    let dim = r.u32()? as usize;
    let count = r.u64()?;
    if count > 0 && dim == 0 {
        return Err(Error::Format("templates with dimension 0".into()));
    }
    // Each id costs at least four bytes, which bounds any honest count.
    if count > (r.remaining() / 4) as u64 {
        return Err(Error::SizeMismatch(format!(
            "template file declares {count} ids but has {} bytes left",
            r.remaining()
        )));
    }
    let ids = (0..count).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
    let payload = r.payload(count, dim as u64 * 4)?;
    let mut out = Vec::with_capacity(ids.len());
    for (index, (id, row)) in ids.into_iter().zip(payload.chunks_exact(dim.max(1) * 4)).enumerate() {
        let features: Vec<f32> = row
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("chunk of 4")))
            .collect();
        let norm = l2_norm(&features);
        if !((norm - 1.0).abs() <= STORED_NORM_TOLERANCE) {
            return Err(Error::NormViolation { index, norm });
        }
        out.push(Template::from_parts(id, features));
    }
    Ok(out)
}

/// Writes templates atomically and returns the number of bytes written.
pub fn write_templates(path: impl AsRef<Path>, templates: &[Template]) -> Result<u64> {
    let bytes = encode_templates(templates)?;
    write_atomic(path.as_ref(), &bytes)?;
    Ok(bytes.len() as u64)
}

pub fn read_templates(path: impl AsRef<Path>) -> Result<Vec<Template>> {
    decode_templates(&fs::read(path)?)
}

/// Serializes a labeled raw dataset: header, optional seed, label table and
/// little-endian `f64` rows.
pub fn encode_dataset(data: &LabeledDataset) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(32 + data.values().len() * 8);
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&u32_dim(data.dim())?.to_le_bytes());
    out.extend_from_slice(&(data.len() as u64).to_le_bytes());
    match data.seed() {
        Some(seed) => {
            out.push(1);
            out.extend_from_slice(&seed.to_le_bytes());
        }
        None => {
            out.push(0);
            out.extend_from_slice(&0u64.to_le_bytes());
        }
    }
    for label in data.labels() {
        push_string(&mut out, label)?;
    }
    for v in data.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<LabeledDataset> {
    let mut r = Reader::new(bytes, "dataset file");
    read_magic(&mut r, DATASET_MAGIC, DATASET_VERSION)?;
    let dim = r.u32()? as usize;
    let count = r.u64()?;
    let seed = match (r.u8()?, r.u64()?) {
        (0, _) => None,
        (1, s) => Some(s),
        (flag, _) => return Err(Error::Format(format!("bad seed flag {flag}"))),
    };
    if count > (r.remaining() / 4) as u64 {
        return Err(Error::SizeMismatch(format!(
            "dataset declares {count} labels but has {} bytes left",
            r.remaining()
        )));
    }
    let labels = (0..count).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
    let values = r
        .payload(count, dim as u64 * 8)?
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("chunk of 8")))
        .collect();
    let data = LabeledDataset::new(dim, values, labels)?;
    Ok(match seed {
        Some(s) => data.with_seed(s),
        None => data,
    })
}

pub fn write_dataset(path: impl AsRef<Path>, data: &LabeledDataset) -> Result<u64> {
    let bytes = encode_dataset(data)?;
    write_atomic(path.as_ref(), &bytes)?;
    Ok(bytes.len() as u64)
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    decode_dataset(&fs::read(path)?)
}

fn join<T: std::fmt::Display>(values: &[T]) -> String {
    values.iter().map(ToString::to_string).collect::<Vec<_>>().join(" ")
}

fn write_meta(out: &mut String, meta: &Meta) -> Result<()> {
    for (k, v) in meta {
        let key_ok = !k.is_empty()
            && k.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'));
        if !key_ok || v.contains(['\n', '\r']) {
            return Err(Error::InvalidArgument(format!("unwritable metadata entry {k:?}")));
        }
        out.push_str(&format!("meta.{k} = {v}\n"));
    }
    Ok(())
}

/// Parsed `key = value` lines. Blank lines and `#` comments are skipped,
/// `meta.*` keys are split off.
struct KeyValues {
    fields: BTreeMap<String, String>,
    meta: Meta,
}

impl KeyValues {
    fn parse<'a>(lines: impl Iterator<Item = &'a str>) -> Result<Self> {
        let mut fields = BTreeMap::new();
        let mut meta = Meta::new();
        for (n, line) in lines.enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("line {}: expected key = value", n + 1)))?;
            let (k, v) = (k.trim(), v.trim().to_string());
            let dup = match k.strip_prefix("meta.") {
                Some(mk) => meta.insert(mk.to_string(), v).is_some(),
                None => fields.insert(k.to_string(), v).is_some(),
            };
            if dup {
                return Err(Error::Format(format!("duplicate key {k:?}")));
            }
        }
        Ok(Self { fields, meta })
    }

    fn take(&mut self, key: &str) -> Result<String> {
        self.fields
            .remove(key)
            .ok_or_else(|| Error::Format(format!("missing field {key:?}")))
    }

    fn parse_one<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        let v = self.take(key)?;
        v.parse()
            .map_err(|_| Error::Format(format!("field {key:?}: cannot parse {v:?}")))
    }

    fn parse_list<T: std::str::FromStr>(&mut self, key: &str) -> Result<Vec<T>> {
        let v = self.take(key)?;
        v.split_whitespace()
            .map(|s| {
                s.parse()
                    .map_err(|_| Error::Format(format!("field {key:?}: cannot parse {s:?}")))
            })
            .collect()
    }

    fn expect_header(&mut self, format: &str, version: u32) -> Result<()> {
        let f = self.take("format")?;
        if f != format {
            return Err(Error::Format(format!("format is {f:?}, expected {format:?}")));
        }
        let v: u32 = self.parse_one("version")?;
        if v != version {
            return Err(Error::Version {
                found: v,
                expected: version,
            });
        }
        Ok(())
    }

    fn finish(self) -> Result<Meta> {
        match self.fields.keys().next() {
            Some(k) => Err(Error::Format(format!("unknown field {k:?}"))),
            None => Ok(self.meta),
        }
    }
}

pub fn encode_model(model: &CascadeModel, meta: &Meta) -> Result<String> {
    let mut out = format!(
        "format = {MODEL_FORMAT}\nversion = {MODEL_VERSION}\nd = {}\nsn = {}\nboundaries = {}\nthresholds = {}\ntarget_vrs = {}\ntrain_count = {}\n",
        model.dim(),
        model.stage_count(),
        join(model.plan().boundaries()),
        join(model.thresholds()),
        join(model.target_vrs()),
        model.train_count(),
    );
    write_meta(&mut out, meta)?;
    Ok(out)
}

pub fn decode_model(text: &str) -> Result<(CascadeModel, Meta)> {
    let mut kv = KeyValues::parse(text.lines())?;
    kv.expect_header(MODEL_FORMAT, MODEL_VERSION)?;
    let d: usize = kv.parse_one("d")?;
    let sn: usize = kv.parse_one("sn")?;
    let boundaries: Vec<usize> = kv.parse_list("boundaries")?;
    let thresholds = kv.parse_list("thresholds")?;
    let target_vrs = kv.parse_list("target_vrs")?;
    let train_count = kv.parse_one("train_count")?;
    let meta = kv.finish()?;
    if boundaries.len() != sn {
        return Err(Error::Format(format!(
            "sn = {sn} but {} boundaries",
            boundaries.len()
        )));
    }
    let plan = StagePlan::new(boundaries)?;
    if plan.dim() != d {
        return Err(Error::Format(format!("d = {d} but last boundary is {}", plan.dim())));
    }
    Ok((CascadeModel::new(plan, thresholds, target_vrs, train_count)?, meta))
}

pub fn write_model(path: impl AsRef<Path>, model: &CascadeModel, meta: &Meta) -> Result<()> {
    write_atomic(path.as_ref(), encode_model(model, meta)?.as_bytes())
}

pub fn read_model(path: impl AsRef<Path>) -> Result<(CascadeModel, Meta)> {
    let text = String::from_utf8(fs::read(path)?)
        .map_err(|_| Error::Format("model file is not UTF-8".into()))?;
    decode_model(&text)
}

const HEADER_END: &[u8] = b"end\n";

pub fn encode_projection(p: &LdaProjection, meta: &Meta) -> Result<Vec<u8>> {
    let mut header = format!(
        "format = {PROJECTION_FORMAT}\nversion = {PROJECTION_VERSION}\nd_raw = {}\nd_out = {}\neigenvalues = {}\n",
        p.d_raw(),
        p.d_out(),
        join(p.eigenvalues()),
    );
    write_meta(&mut header, meta)?;
    let mut out = header.into_bytes();
    out.extend_from_slice(HEADER_END);
    for v in p.mean().iter().chain(&p.basis_row_major()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_projection(bytes: &[u8]) -> Result<(LdaProjection, Meta)> {
    let mut lines = Vec::new();
    let mut pos = 0;
    loop {
        let rest = &bytes[pos..];
        let len = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format("projection header has no end line".into()))?;
        let line = std::str::from_utf8(&rest[..len])
            .map_err(|_| Error::Format("projection header is not UTF-8".into()))?;
        pos += len + 1;
        if line == "end" {
            break;
        }
        lines.push(line);
    }
    let mut kv = KeyValues::parse(lines.into_iter())?;
    kv.expect_header(PROJECTION_FORMAT, PROJECTION_VERSION)?;
    let d_raw: usize = kv.parse_one("d_raw")?;
    let d_out: usize = kv.parse_one("d_out")?;
    let eigenvalues: Vec<f64> = kv.parse_list("eigenvalues")?;
    let meta = kv.finish()?;
    if eigenvalues.len() != d_out {
        return Err(Error::Format(format!(
            "d_out = {d_out} but {} eigenvalues",
            eigenvalues.len()
        )));
    }
    let mut r = Reader::new(&bytes[pos..], "projection payload");
    let count = (d_raw as u64)
        .checked_mul(d_out as u64 + 1)
        .ok_or_else(|| Error::SizeMismatch("projection size overflows".into()))?;
    let values: Vec<f64> = r
        .payload(count, 8)?
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("chunk of 8")))
        .collect();
    let (mean, basis) = values.split_at(d_raw);
    Ok((LdaProjection::from_parts(mean.to_vec(), basis, eigenvalues)?, meta))
}

pub fn write_projection(path: impl AsRef<Path>, p: &LdaProjection, meta: &Meta) -> Result<()> {
    write_atomic(path.as_ref(), &encode_projection(p, meta)?)
}

pub fn read_projection(path: impl AsRef<Path>) -> Result<(LdaProjection, Meta)> {
    decode_projection(&fs::read(path)?)
}
