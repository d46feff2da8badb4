//! Dense vectors for queries, documents and context values.
//!
//! Vectors come from an EMB1 file when one is supplied. Anything missing from
//! the file is encoded on the fly by [`hash_embed`], a seeded bag-of-tokens
//! projection that stands in for a sentence encoder.
//!
//! EMB1 layout, little-endian: `b"EMB1"`, `u32` dim, `u32` count, then `count`
//! records of `u16` id length, UTF-8 id bytes and `dim` `f32` components.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::lexical::tokenize;

pub const EMB1_MAGIC: &[u8; 4] = b"EMB1";
pub const DEFAULT_DIM: usize = 64;

/// Id under which a context attribute value is stored.
pub fn context_key(attr: &str, value: &str) -> String {
    format!("ctx::{attr}::{value}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    ids: Vec<String>,
    vectors: Vec<Vec<f32>>,
    index: HashMap<String, usize>,
}

impl EmbeddingStore {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("embedding dimension must be positive"));
        }
        Ok(Self {
            dim,
            ids: Vec::new(),
            vectors: Vec::new(),
            index: HashMap::new(),
        })
    }

    pub fn insert(&mut self, id: impl Into<String>, vector: Vec<f32>) -> Result<()> {
        let id = id.into();
        if vector.len() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                actual: vector.len(),
            });
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite component in vector `{id}`")));
        }
        if id.len() > u16::MAX as usize {
            return Err(Error::invalid(format!("id longer than {} bytes", u16::MAX)));
        }
        if self.index.contains_key(&id) {
            return Err(Error::DuplicateId {
                kind: "embedding",
                id,
            });
        }
        self.index.insert(id.clone(), self.ids.len());
        self.ids.push(id);
        self.vectors.push(vector);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.index.get(id).map(|&i| self.vectors[i].as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.ids
            .iter()
            .zip(&self.vectors)
            .map(|(id, v)| (id.as_str(), v.as_slice()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.len() * (2 + 16 + 4 * self.dim));
        out.extend_from_slice(EMB1_MAGIC);
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        for (id, v) in self.iter() {
            out.extend_from_slice(&(id.len() as u16).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        let magic = r.take(4).map_err(|_| Error::UnrecognizedFormat("file shorter than the EMB1 header".into()))?;
        if magic != EMB1_MAGIC {
            return Err(Error::UnrecognizedFormat(format!("bad magic {magic:?}, expected EMB1")));
        }
        let dim = r.u32()? as usize;
        let count = r.u32()? as usize;
        let mut store = EmbeddingStore::new(dim)?;
        for i in 0..count {
            let id_len = r.u16().map_err(|_| truncated(i, count))? as usize;
            let id_bytes = r.take(id_len).map_err(|_| truncated(i, count))?;
            let id = std::str::from_utf8(id_bytes)
                .map_err(|e| Error::UnrecognizedFormat(format!("record {i}: id is not UTF-8: {e}")))?
                .to_string();
            let payload = r.take(4 * dim).map_err(|_| truncated(i, count))?;
            let v = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            store.insert(id, v)?;
        }
        if r.pos != bytes.len() {
            return Err(Error::UnrecognizedFormat(format!(
                "{} trailing bytes after {count} records; header dim {dim} disagrees with the records",
                bytes.len() - r.pos
            )));
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}

fn truncated(record: usize, count: usize) -> Error {
    Error::Truncated(format!("header declares {count} records, record {record} is incomplete"))
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Truncated(format!(
                "needed {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ))),
        }
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingStore> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    EmbeddingStore::from_bytes(&bytes)
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Unit-norm ±1/√dim vector for one token.
fn token_vector(token: &str, dim: usize, seed: u64) -> Vec<f64> {
    let mut seed_state = seed;
    let mut state = fnv1a(token.as_bytes()) ^ splitmix64(&mut seed_state);
    let scale = 1.0 / (dim as f64).sqrt();
    let mut out = Vec::with_capacity(dim);
    let mut bits = 0u64;
    for i in 0..dim {
        if i % 64 == 0 {
            bits = splitmix64(&mut state);
        }
        out.push(if bits & 1 == 1 { scale } else { -scale });
        bits >>= 1;
    }
    out
}

/// Seeded bag-of-tokens encoder: average of per-token sign vectors, L2-normalized.
/// Text without tokens encodes to the zero vector.
pub fn hash_embed(text: &str, dim: usize, seed: u64) -> Vec<f64> {
    assert!(dim >= 2, "hash_embed needs dim >= 2");
    let tokens = tokenize(text);
    if tokens.is_empty() {
        return vec![0.0; dim];
    }
    let vectors: Vec<Vec<f64>> = tokens.iter().map(|t| token_vector(t, dim, seed)).collect();
    let mut pooled = avg_pool(&vectors).expect("equal dims, non-empty");
    normalize(&mut pooled);
    pooled
}

/// Scales to unit L2 norm; zero vectors are left alone.
pub fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

/// Component-wise mean.
pub fn avg_pool(vectors: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = vectors
        .first()
        .ok_or_else(|| Error::invalid("cannot pool an empty list of vectors"))?;
    let dim = first.len();
    let mut acc = vec![0.0; dim];
    for v in vectors {
        if v.len() != dim {
            return Err(Error::DimMismatch {
                expected: dim,
                actual: v.len(),
            });
        }
        for (a, x) in acc.iter_mut().zip(v) {
            *a += x;
        }
    }
    let n = vectors.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

/// Cosine similarity; 0 when either side has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// Resolves vectors by id from an optional store, falling back to [`hash_embed`].
#[derive(Debug, Clone)]
pub struct Embedder {
    store: Option<EmbeddingStore>,
    dim: usize,
    seed: u64,
}

impl Embedder {
    /// Hash fallback only.
    pub fn hashed(dim: usize, seed: u64) -> Result<Self> {
        if dim < 2 {
            return Err(Error::invalid("fallback embedding dimension must be at least 2"));
        }
        Ok(Self {
            store: None,
            dim,
            seed,
        })
    }

    /// A store plus hash fallback at the store's dimension.
    pub fn with_store(store: EmbeddingStore, seed: u64) -> Result<Self> {
        let dim = store.dim();
        if dim < 2 {
            return Err(Error::invalid("embedding dimension must be at least 2"));
        }
        Ok(Self {
            store: Some(store),
            dim,
            seed,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn store(&self) -> Option<&EmbeddingStore> {
        self.store.as_ref()
    }

    pub fn vector(&self, id: &str, text: &str) -> Vec<f64> {
        if let Some(v) = self.store.as_ref().and_then(|s| s.get(id)) {
            return v.iter().map(|&x| x as f64).collect();
        }
        if self.store.is_some() {
            log::debug!("no stored vector for `{id}`, using hash fallback");
        }
        hash_embed(text, self.dim, self.seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    #[test]
    fn pooling_examples() {
        assert_eq!(avg_pool(&[vec![1.0, 3.0], vec![3.0, 5.0]]).unwrap(), vec![2.0, 4.0]);
        assert_eq!(avg_pool(&[vec![0.5, -2.0]]).unwrap(), vec![0.5, -2.0]);
        assert_eq!(avg_pool(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap(), vec![0.0, 0.0]);
        assert!(avg_pool(&[]).is_err());
        assert!(avg_pool(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine(&[1.0, 1.0], &[1.0, 0.0]).unwrap() - 0.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
        assert!(cosine(&[1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn hash_embed_degenerate_and_deterministic() {
        assert!(hash_embed("", 16, 0).iter().all(|&x| x == 0.0));
        assert!(hash_embed("!!! ---", 16, 0).iter().all(|&x| x == 0.0));
        assert_eq!(hash_embed("seattle engineer", 64, 3), hash_embed("seattle engineer", 64, 3));
        assert_ne!(hash_embed("seattle", 64, 3), hash_embed("seattle", 64, 4));
        assert!((norm(&hash_embed("seattle", 64, 0)) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hash_embed_pools_single_tokens() {
        let a = hash_embed("engineer", 64, 9);
        let b = hash_embed("seattle", 64, 9);
        let mut expected = avg_pool(&[a, b]).unwrap();
        let n = norm(&expected);
        expected.iter_mut().for_each(|x| *x /= n);
        let got = hash_embed("engineer seattle", 64, 9);
        for (g, e) in got.iter().zip(&expected) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn store_round_trip_and_corruption() {
        let mut s = EmbeddingStore::new(3).unwrap();
        s.insert("a", vec![1.0, -0.5, 0.25]).unwrap();
        s.insert("ctx::geo::seattle", vec![0.0, f32::MIN_POSITIVE, 3.5e-7]).unwrap();
        let bytes = s.to_bytes();
        assert_eq!(EmbeddingStore::from_bytes(&bytes).unwrap(), s);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        let err = EmbeddingStore::from_bytes(&bad).unwrap_err();
        assert!(err.to_string().contains("unrecognized format"));

        // header claims three records, only two present
        let mut short = bytes.clone();
        short[8..12].copy_from_slice(&3u32.to_le_bytes());
        assert!(matches!(EmbeddingStore::from_bytes(&short), Err(Error::Truncated(_))));

        assert!(matches!(
            EmbeddingStore::from_bytes(&bytes[..bytes.len() - 2]),
            Err(Error::Truncated(_))
        ));

        // dim in header smaller than the records: parses garbage then trailing bytes remain
        let mut wrong_dim = bytes.clone();
        wrong_dim[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(EmbeddingStore::from_bytes(&wrong_dim).is_err());
    }

    #[test]
    fn store_rejects_duplicates_and_ragged() {
        let mut s = EmbeddingStore::new(2).unwrap();
        s.insert("a", vec![1.0, 0.0]).unwrap();
        assert!(matches!(s.insert("a", vec![0.0, 1.0]), Err(Error::DimMismatch { .. }) | Err(Error::DuplicateId { .. })));
        assert!(matches!(s.insert("b", vec![0.0]), Err(Error::DimMismatch { .. })));

        let mut bytes = Vec::new();
        bytes.extend_from_slice(EMB1_MAGIC);
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        for _ in 0..2 {
            bytes.extend_from_slice(&1u16.to_le_bytes());
            bytes.push(b'x');
            bytes.extend_from_slice(&1.0f32.to_le_bytes());
        }
        assert!(matches!(EmbeddingStore::from_bytes(&bytes), Err(Error::DuplicateId { .. })));
    }

    #[test]
    fn embedder_prefers_store() {
        let mut s = EmbeddingStore::new(4).unwrap();
        s.insert("d1", vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let e = Embedder::with_store(s, 0).unwrap();
        assert_eq!(e.vector("d1", "whatever"), vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(e.vector("d2", "seattle"), hash_embed("seattle", 4, 0));
    }

    proptest! {
        #[test]
        fn cosine_symmetric_scale_invariant_bounded(
            a in proptest::collection::vec(-10.0f64..10.0, 4),
            b in proptest::collection::vec(-10.0f64..10.0, 4),
            alpha in 0.01f64..100.0,
        ) {
            let ab = cosine(&a, &b).unwrap();
            prop_assert_eq!(ab, cosine(&b, &a).unwrap());
            let scaled: Vec<f64> = a.iter().map(|x| x * alpha).collect();
            prop_assert!((cosine(&scaled, &b).unwrap() - ab).abs() < 1e-9);
            prop_assert!((-1.0..=1.0).contains(&ab));
        }

        #[test]
        fn hash_embed_norm_zero_or_one(text in "\\PC{0,30}", seed in any::<u64>()) {
            let n = norm(&hash_embed(&text, 32, seed));
            prop_assert!(n == 0.0 || (n - 1.0).abs() < 1e-9);
        }

        #[test]
        fn store_bytes_round_trip(vals in proptest::collection::vec(proptest::num::f32::NORMAL, 0..24)) {
            let mut s = EmbeddingStore::new(3).unwrap();
            for (i, chunk) in vals.chunks_exact(3).enumerate() {
                s.insert(format!("id{i}"), chunk.to_vec()).unwrap();
            }
            let back = EmbeddingStore::from_bytes(&s.to_bytes()).unwrap();
            for ((_, x), (_, y)) in s.iter().zip(back.iter()) {
                prop_assert_eq!(
                    x.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                    y.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
                );
            }
        }
    }
}
