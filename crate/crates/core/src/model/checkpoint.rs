//! The `IVYC` checkpoint container and the policy checkpoint stored in it.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "IVYC" | u32 version | u32 header_len | header (key=value lines)
//! u32 section_count
//! per section: u16 name_len | name | u8 kind | u64 payload_len | payload
//! ```
//!
//! Kind 0 is an f32 blob whose payload starts with `u8 ndim` and `ndim` u32
//! extents; kind 1 is raw bytes; kind 2 is UTF-8 text.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::transformer::{DecoderModel, ModelConfig};
use super::vocab::Vocabulary;
use crate::adapt::{AdapterSet, Codebook, CodebookKind, LoraAdapter, QuantizedTensor};
use crate::error::{Error, Result};
use crate::numcore::{AdamWConfig, AdamWState, Tensor};

pub const MAGIC: &[u8; 4] = b"IVYC";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum SectionData {
    F32 { shape: Vec<usize>, data: Vec<f32> },
    Bytes(Vec<u8>),
    Text(String),
}

impl SectionData {
    fn kind(&self) -> u8 {
        match self {
            SectionData::F32 { .. } => 0,
            SectionData::Bytes(_) => 1,
            SectionData::Text(_) => 2,
        }
    }

    fn payload(&self) -> Vec<u8> {
        match self {
            SectionData::F32 { shape, data } => {
                let mut out = Vec::with_capacity(1 + 4 * shape.len() + 4 * data.len());
                out.push(shape.len() as u8);
                for &d in shape {
                    out.extend((d as u32).to_le_bytes());
                }
                for v in data {
                    out.extend(v.to_le_bytes());
                }
                out
            }
            SectionData::Bytes(b) => b.clone(),
            SectionData::Text(s) => s.as_bytes().to_vec(),
        }
    }

    /// Bytes of the payload as written to disk.
    pub fn payload_len(&self) -> usize {
        match self {
            SectionData::F32 { shape, data } => 1 + 4 * shape.len() + 4 * data.len(),
            SectionData::Bytes(b) => b.len(),
            SectionData::Text(s) => s.len(),
        }
    }
}

/// Ordered named sections behind a key-value header.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub header: BTreeMap<String, String>,
    pub sections: Vec<(String, SectionData)>,
}

pub fn kv_text(kv: &BTreeMap<String, String>) -> String {
    kv.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| Error::Corruption(format!("malformed key-value line `{l}`")))
        })
        .collect()
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Corruption("checkpoint is truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn utf8(bytes: &[u8], what: &str) -> Result<String> {
    String::from_utf8(bytes.to_vec()).map_err(|_| Error::Corruption(format!("{what} is not UTF-8")))
}

impl Container {
    pub fn push(&mut self, name: impl Into<String>, data: SectionData) {
        self.sections.push((name.into(), data));
    }

    pub fn get(&self, name: &str) -> Option<&SectionData> {
        self.sections.iter().find(|(n, _)| n == name).map(|(_, d)| d)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend(MAGIC);
        out.extend(FORMAT_VERSION.to_le_bytes());
        let header = kv_text(&self.header);
        out.extend((header.len() as u32).to_le_bytes());
        out.extend(header.as_bytes());
        out.extend((self.sections.len() as u32).to_le_bytes());
        for (name, data) in &self.sections {
            out.extend((name.len() as u16).to_le_bytes());
            out.extend(name.as_bytes());
            out.push(data.kind());
            let payload = data.payload();
            out.extend((payload.len() as u64).to_le_bytes());
            out.extend(payload);
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut c = Cursor { buf, pos: 0 };
        if c.take(4)? != MAGIC {
            return Err(Error::Corruption("missing IVYC magic bytes".into()));
        }
        let version = c.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Corruption(format!("unsupported format version {version}")));
        }
        let hlen = c.u32()? as usize;
        let header = parse_kv(&utf8(c.take(hlen)?, "header")?)?;
        let count = c.u32()?;
        let mut sections = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let nlen = c.u16()? as usize;
            let name = utf8(c.take(nlen)?, "section name")?;
            let kind = c.u8()?;
            let plen = c.u64()? as usize;
            let payload = c.take(plen)?;
            let data = match kind {
                0 => {
                    let mut p = Cursor { buf: payload, pos: 0 };
                    let ndim = p.u8()? as usize;
                    let shape = (0..ndim).map(|_| p.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
                    let rest = &payload[p.pos..];
                    if rest.len() % 4 != 0 || rest.len() / 4 != shape.iter().product::<usize>() {
                        return Err(Error::Corruption(format!(
                            "section `{name}` payload does not match shape {shape:?}"
                        )));
                    }
                    let data = rest
                        .chunks_exact(4)
                        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                        .collect();
                    SectionData::F32 { shape, data }
                }
                1 => SectionData::Bytes(payload.to_vec()),
                2 => SectionData::Text(utf8(payload, "text section")?),
                k => return Err(Error::Corruption(format!("section `{name}` has unknown kind {k}"))),
            };
            sections.push((name, data));
        }
        if c.pos != buf.len() {
            return Err(Error::Corruption("trailing bytes after the last section".into()));
        }
        Ok(Container { header, sections })
    }

    /// Writes through a temporary sibling file and a rename, so readers
    /// never observe a partial checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }
}

fn f32_section(t: &Tensor<f32>) -> SectionData {
    SectionData::F32 {
        shape: t.shape().to_vec(),
        data: t.data().to_vec(),
    }
}

fn tensor_of(c: &Container, name: &str) -> Result<Tensor<f32>> {
    match c.get(name) {
        Some(SectionData::F32 { shape, data }) => Tensor::from_vec(shape.clone(), data.clone())
            .map_err(|e| Error::Corruption(format!("section `{name}`: {e}"))),
        Some(_) => Err(Error::Corruption(format!("section `{name}` is not a float blob"))),
        None => Err(Error::Corruption(format!("missing section `{name}`"))),
    }
}

fn text_of<'a>(c: &'a Container, name: &str) -> Result<&'a str> {
    match c.get(name) {
        Some(SectionData::Text(s)) => Ok(s),
        _ => Err(Error::Corruption(format!("missing text section `{name}`"))),
    }
}

fn parse_field<V: std::str::FromStr>(kv: &BTreeMap<String, String>, key: &str, ctx: &str) -> Result<V> {
    kv.get(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Corruption(format!("{ctx}: missing or invalid `{key}`")))
}

/// Everything needed to resume or deploy a policy.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyCheckpoint {
    pub model: DecoderModel<f32>,
    pub vocab: Vocabulary,
    pub optimizer: Option<AdamWState<f32>>,
    pub metadata: BTreeMap<String, String>,
}

impl PolicyCheckpoint {
    pub fn new(model: DecoderModel<f32>, vocab: Vocabulary) -> Self {
        PolicyCheckpoint {
            model,
            vocab,
            optimizer: None,
            metadata: BTreeMap::new(),
        }
    }

    pub fn to_container(&self) -> Container {
        let m = &self.model;
        let mut c = Container {
            header: m.config().to_kv(),
            sections: Vec::new(),
        };
        c.header.insert("lora_rank".into(), m.adapters().rank.to_string());
        c.header.insert("lora_alpha".into(), m.adapters().alpha.to_string());

        c.push("vocab", SectionData::Text(serde_json::to_string(self.vocab.units()).expect("strings")));
        c.push("meta", SectionData::Text(kv_text(&self.metadata)));
        for (name, t) in m.params() {
            c.push(name.clone(), f32_section(t));
        }
        let trainable: Vec<&str> = m
            .params()
            .iter()
            .filter(|(_, t)| t.requires_grad)
            .map(|(n, _)| n.as_str())
            .collect();
        c.push("trainable", SectionData::Text(trainable.join("\n")));

        for (name, q) in m.quantized() {
            let shape: Vec<String> = q.shape().iter().map(usize::to_string).collect();
            let mut meta = BTreeMap::new();
            meta.insert("shape".to_string(), shape.join("x"));
            meta.insert("block_size".to_string(), q.block_size().to_string());
            meta.insert(
                "kind".to_string(),
                q.codebook().kind().map_or("custom", CodebookKind::as_str).to_string(),
            );
            c.push(format!("quant/{name}/codes"), SectionData::Bytes(q.packed_codes().to_vec()));
            c.push(
                format!("quant/{name}/scales"),
                SectionData::F32 {
                    shape: vec![q.scales().len()],
                    data: q.scales().to_vec(),
                },
            );
            c.push(
                format!("quant/{name}/codebook"),
                SectionData::F32 {
                    shape: vec![q.codebook().len()],
                    data: q.codebook().values().to_vec(),
                },
            );
            c.push(format!("quant/{name}/meta"), SectionData::Text(kv_text(&meta)));
        }

        for a in m.adapters().iter() {
            c.push(a.a_name(), f32_section(&a.a));
            c.push(a.b_name(), f32_section(&a.b));
            c.push(
                format!("lora/{}/meta", a.target),
                SectionData::Text(format!("alpha={}\nenabled={}\n", a.alpha, a.enabled)),
            );
        }

        if let Some(opt) = &self.optimizer {
            c.header.insert("optim_step".into(), opt.step.to_string());
            c.push("optim/config", SectionData::Text(serde_json::to_string(&opt.config).expect("plain struct")));
            for (name, mom) in opt.moments() {
                let shape = vec![mom.m.len()];
                c.push(format!("optim/m/{name}"), SectionData::F32 { shape: shape.clone(), data: mom.m.clone() });
                c.push(format!("optim/v/{name}"), SectionData::F32 { shape, data: mom.v.clone() });
            }
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let config = ModelConfig::from_kv(&c.header)?;
        let units: Vec<String> = serde_json::from_str(text_of(c, "vocab")?)
            .map_err(|e| Error::Corruption(format!("vocabulary section: {e}")))?;
        let vocab = Vocabulary::from_units(units)?;
        if vocab.len() != config.vocab_size {
            return Err(Error::Corruption(format!(
                "vocabulary has {} units, model expects {}",
                vocab.len(),
                config.vocab_size
            )));
        }
        let metadata = parse_kv(text_of(c, "meta")?)?;
        let trainable: Vec<&str> = text_of(c, "trainable")?.lines().filter(|l| !l.is_empty()).collect();

        let mut params = BTreeMap::new();
        let mut quantized = BTreeMap::new();
        let mut adapters = AdapterSet::default();
        adapters.rank = parse_field(&c.header, "lora_rank", "header")?;
        adapters.alpha = parse_field(&c.header, "lora_alpha", "header")?;
        let mut opt_moments = BTreeMap::new();

        for (name, data) in &c.sections {
            if let Some(rest) = name.strip_prefix("quant/") {
                let Some(target) = rest.strip_suffix("/meta") else { continue };
                let meta = match data {
                    SectionData::Text(s) => parse_kv(s)?,
                    _ => return Err(Error::Corruption(format!("`{name}` is not text"))),
                };
                let shape = meta
                    .get("shape")
                    .ok_or_else(|| Error::Corruption(format!("`{name}` lacks shape")))?
                    .split('x')
                    .map(|d| d.parse::<usize>().map_err(|_| Error::Corruption(format!("`{name}` has a bad shape"))))
                    .collect::<Result<Vec<_>>>()?;
                let block_size: usize = parse_field(&meta, "block_size", name)?;
                let levels = tensor_of(c, &format!("quant/{target}/codebook"))?.into_data();
                let codebook = match meta.get("kind").map(String::as_str) {
                    Some("custom") | None => Codebook::custom(levels)?,
                    Some(k) => {
                        let built = crate::adapt::build_codebook(CodebookKind::parse(k)?);
                        if built.values() != levels.as_slice() {
                            return Err(Error::Corruption(format!("codebook of `{target}` does not match kind {k}")));
                        }
                        built
                    }
                };
                let codes = match c.get(&format!("quant/{target}/codes")) {
                    Some(SectionData::Bytes(b)) => b.clone(),
                    _ => return Err(Error::Corruption(format!("missing codes for `{target}`"))),
                };
                let scales = tensor_of(c, &format!("quant/{target}/scales"))?.into_data();
                let q = QuantizedTensor::from_parts(shape, block_size, codes, scales, codebook)?;
                crate::adapt::dequantize::<f32>(&q)?;
                quantized.insert(target.to_string(), q);
            } else if let Some(rest) = name.strip_prefix("lora/") {
                let Some(target) = rest.strip_suffix("/meta") else { continue };
                let meta = parse_kv(text_of(c, name)?)?;
                let a = tensor_of(c, &format!("lora/{target}/A"))?.with_grad(true);
                let b = tensor_of(c, &format!("lora/{target}/B"))?.with_grad(true);
                if a.shape().len() != 2 || b.shape().len() != 2 || b.shape()[1] != a.shape()[0] {
                    return Err(Error::Corruption(format!("adapter `{target}` has inconsistent shapes")));
                }
                adapters.insert(LoraAdapter {
                    target: target.to_string(),
                    rank: a.shape()[0],
                    a,
                    b,
                    alpha: parse_field(&meta, "alpha", name)?,
                    enabled: parse_field(&meta, "enabled", name)?,
                })?;
            } else if let Some(rest) = name.strip_prefix("optim/") {
                if let Some(p) = rest.strip_prefix("m/") {
                    let m = tensor_of(c, name)?.into_data();
                    let v = tensor_of(c, &format!("optim/v/{p}"))?.into_data();
                    if m.len() != v.len() || v.iter().any(|&x| x < 0.0) {
                        return Err(Error::Corruption(format!("optimizer moments of `{p}` are invalid")));
                    }
                    opt_moments.insert(p.to_string(), (m, v));
                }
            } else if let SectionData::F32 { .. } = data {
                let t = tensor_of(c, name)?.with_grad(trainable.contains(&name.as_str()));
                params.insert(name.clone(), t);
            }
        }

        let optimizer = match c.get("optim/config") {
            Some(SectionData::Text(s)) => {
                let cfg: AdamWConfig = serde_json::from_str(s)
                    .map_err(|e| Error::Corruption(format!("optimizer config: {e}")))?;
                let mut st = AdamWState::new(cfg);
                st.step = parse_field(&c.header, "optim_step", "header")?;
                for (name, (m, v)) in opt_moments {
                    st.insert_moments(&name, m, v);
                }
                Some(st)
            }
            _ => None,
        };
        let model = DecoderModel::from_parts(config, params, quantized, adapters)?;
        Ok(PolicyCheckpoint {
            model,
            vocab,
            optimizer,
            metadata,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}
