//! Trained model and its binary file.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "CTXR"  u32 format version
//! schema      u32 schema version, u32 n_base + names, u32 K + attribute names
//!             (each name is u16 length + UTF-8 bytes)
//! mask        u8 use_context, u8 lexical, u8 semantic
//! bm25        f64 k1, f64 b
//! normalizer  u32 dim, dim × f64 mean, dim × f64 std
//! arch        u32 p, u32 L, u32 n_hidden, n_hidden × u32 width, u8 activation
//! params      cross (W, b)…, hidden (W, b)…, head (W, b); row-major f32
//! metadata    u32 length + UTF-8 key=value lines
//! ```

use std::path::Path;

use crate::dcn::{Activation, Architecture, Dcn, Dense};
use crate::error::{Error, Result};
use crate::features::{AblationMask, FeatureSchema, FeatureVector, Normalizer, BASE_FEATURES, SCHEMA_VERSION};
use crate::lexical::Bm25Params;

pub const MODEL_MAGIC: &[u8; 4] = b"CTXR";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub schema: FeatureSchema,
    pub mask: AblationMask,
    pub bm25: Bm25Params,
    pub normalizer: Normalizer,
    pub net: Dcn,
    /// Training configuration echo, `key=value` per line.
    pub metadata: String,
}

impl Model {
    /// Score for a raw (unnormalized) feature vector.
    pub fn score(&self, raw: &FeatureVector) -> Result<f64> {
        let x = self.normalizer.apply(raw)?;
        self.net.score(x.as_slice())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(MODEL_MAGIC);
        w.u32(FORMAT_VERSION);

        w.u32(SCHEMA_VERSION);
        w.u32(BASE_FEATURES.len() as u32);
        for name in BASE_FEATURES {
            w.name(name);
        }
        w.u32(self.schema.context_attrs().len() as u32);
        for a in self.schema.context_attrs() {
            w.name(a);
        }

        w.u8(self.mask.use_context() as u8);
        w.u8(self.mask.use_lexical_context() as u8);
        w.u8(self.mask.use_semantic_context() as u8);
        w.f64(self.bm25.k1());
        w.f64(self.bm25.b());

        w.u32(self.normalizer.dim() as u32);
        self.normalizer.mean().iter().for_each(|&v| w.f64(v));
        self.normalizer.std().iter().for_each(|&v| w.f64(v));

        let arch = self.net.architecture();
        w.u32(arch.input_dim as u32);
        w.u32(arch.cross_layers as u32);
        w.u32(arch.hidden_widths.len() as u32);
        arch.hidden_widths.iter().for_each(|&h| w.u32(h as u32));
        w.u8(arch.activation.code());

        for t in self.net.tensors() {
            t.iter().for_each(|&v| w.f32(v as f32));
        }

        w.u32(self.metadata.len() as u32);
        w.bytes(self.metadata.as_bytes());
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MODEL_MAGIC {
            return Err(Error::UnrecognizedFormat("not a CTXR model file".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::UnrecognizedFormat(format!("unsupported model format version {version}")));
        }

        let schema_version = r.u32()?;
        let n_base = r.u32()? as usize;
        let base: Vec<String> = (0..n_base).map(|_| r.name()).collect::<Result<_>>()?;
        if schema_version != SCHEMA_VERSION || base != BASE_FEATURES {
            return Err(Error::SchemaMismatch(format!(
                "model base features (version {schema_version}) {base:?} differ from this build's {BASE_FEATURES:?}"
            )));
        }
        let k = r.u32()? as usize;
        let attrs: Vec<String> = (0..k).map(|_| r.name()).collect::<Result<_>>()?;
        let schema = FeatureSchema::new(attrs);

        let (c, l, s) = (r.u8()?, r.u8()?, r.u8()?);
        let mask = AblationMask::new(c != 0, l != 0, s != 0);
        let (k1, b) = (r.f64()?, r.f64()?);
        let bm25 = Bm25Params::new(k1, b)?;

        let dim = r.u32()? as usize;
        let mean = (0..dim).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let std = (0..dim).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let normalizer = Normalizer::from_parts(mean, std)?;

        let input_dim = r.u32()? as usize;
        let cross_layers = r.u32()? as usize;
        let n_hidden = r.u32()? as usize;
        let hidden_widths = (0..n_hidden).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let activation = Activation::from_code(r.u8()?)
            .ok_or_else(|| Error::UnrecognizedFormat("unknown activation code".into()))?;
        let arch = Architecture {
            input_dim,
            cross_layers,
            hidden_widths,
            activation,
        };
        if input_dim != schema.total_dim() || dim != input_dim {
            return Err(Error::SchemaMismatch(format!(
                "schema implies {} features, normalizer has {dim}, network expects {input_dim}",
                schema.total_dim()
            )));
        }

        let mut dense = |inputs: usize, outputs: usize| -> Result<Dense> {
            let weight = (0..inputs * outputs).map(|_| r.f32().map(f64::from)).collect::<Result<_>>()?;
            let bias = (0..outputs).map(|_| r.f32().map(f64::from)).collect::<Result<_>>()?;
            Ok(Dense {
                inputs,
                outputs,
                weight,
                bias,
            })
        };
        let cross = (0..cross_layers)
            .map(|_| dense(input_dim, input_dim))
            .collect::<Result<Vec<_>>>()?;
        let mut hidden = Vec::with_capacity(n_hidden);
        let mut fan_in = input_dim;
        for &wdt in &arch.hidden_widths {
            hidden.push(dense(fan_in, wdt)?);
            fan_in = wdt;
        }
        let head = dense(fan_in, 1)?;
        let net = Dcn::from_parts(arch, cross, hidden, head)?;

        let meta_len = r.u32()? as usize;
        let metadata = std::str::from_utf8(r.take(meta_len)?)
            .map_err(|e| Error::UnrecognizedFormat(format!("metadata is not UTF-8: {e}")))?
            .to_string();
        if r.pos != bytes.len() {
            return Err(Error::UnrecognizedFormat(format!(
                "{} trailing bytes in model file",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            schema,
            mask,
            bm25,
            normalizer,
            net,
            metadata,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.bytes(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }
    fn name(&mut self, s: &str) {
        self.bytes(&(s.len() as u16).to_le_bytes());
        self.bytes(s.as_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        match self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()) {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Truncated(format!("model file ends at byte {}", self.bytes.len()))),
        }
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn name(&mut self) -> Result<String> {
        let len = u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")) as usize;
        std::str::from_utf8(self.take(len)?)
            .map(str::to_string)
            .map_err(|e| Error::UnrecognizedFormat(format!("name is not UTF-8: {e}")))
    }
}
