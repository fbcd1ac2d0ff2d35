//! Frozen sentence embeddings: the hashed character 3-gram toy embedder,
//! embedding tables and their on-disk formats.
//!
//! Binary vector file layout (little-endian):
//!
//! ```text
//! "NFV1" | dim: u32 | count: u64 | count × (id_len: u16 | id bytes | dim × f32)
//! ```
//!
//! A plain-text fallback with one `id<TAB>v1 v2 ... vd` record per line is
//! also accepted on load.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const VECTOR_MAGIC: &[u8; 4] = b"NFV1";

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// FNV-1a over the seed's little-endian bytes followed by `data`.
pub fn fnv1a64_seeded(data: &[u8], seed: u64) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in seed.to_le_bytes().iter().chain(data) {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Divides by the Euclidean norm; vectors with norm ≤ 1e-12 pass through.
pub fn l2_normalize(v: &[f64]) -> Vec<f64> {
    let mut out = v.to_vec();
    l2_normalize_in_place(&mut out);
    out
}

pub fn l2_normalize_in_place(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 1e-12 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

/// Hashed character 3-gram embedding.
///
/// The lower-cased text is read as a ring: position `i` contributes the
/// gram `c[i] c[i+1] c[i+2]` with indices taken modulo the length, so a
/// text of `n` characters yields exactly `n` grams and periodic strings map
/// onto proportional count vectors. Grams are hashed with seeded FNV-1a
/// into `dim` buckets, counted, and L2-normalized. Blank text embeds to the
/// zero vector.
pub fn embed_text(text: &str, dim: usize, seed: u64) -> Vec<f64> {
    assert!(dim >= 2, "embedding dimension must be at least 2");
    let mut v = vec![0.0; dim];
    if text.trim().is_empty() {
        return v;
    }
    let chars: Vec<char> = text.to_lowercase().chars().collect();
    let n = chars.len();
    let mut gram = String::with_capacity(12);
    for i in 0..n {
        gram.clear();
        for j in 0..3 {
            gram.push(chars[(i + j) % n]);
        }
        let bucket = fnv1a64_seeded(gram.as_bytes(), seed) % dim as u64;
        v[bucket as usize] += 1.0;
    }
    l2_normalize_in_place(&mut v);
    v
}

/// Identifier → unit-norm vector map with a fixed dimensionality.
/// Iteration follows insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    ids: Vec<String>,
    positions: HashMap<String, usize>,
    data: Vec<f64>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self {
            dim,
            ids: Vec::new(),
            positions: HashMap::new(),
            data: Vec::new(),
        }
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

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    /// Stores `v` after L2 normalization.
    pub fn insert(&mut self, id: impl Into<String>, v: &[f64]) -> Result<()> {
        let id = id.into();
        if v.len() != self.dim {
            return Err(Error::Format(format!(
                "vector for {id:?} has length {}, table dimension is {}",
                v.len(),
                self.dim
            )));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Format(format!("vector for {id:?} has a non-finite entry")));
        }
        if self.positions.contains_key(&id) {
            return Err(Error::Format(format!("duplicate vector id {id:?}")));
        }
        self.positions.insert(id.clone(), self.ids.len());
        self.ids.push(id);
        let start = self.data.len();
        self.data.extend_from_slice(v);
        l2_normalize_in_place(&mut self.data[start..]);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.positions
            .get(id)
            .map(|&i| &self.data[i * self.dim..(i + 1) * self.dim])
    }

    pub fn require(&self, id: &str) -> Result<&[f64]> {
        self.get(id)
            .ok_or_else(|| Error::Argument(format!("no embedding for id {id:?}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.ids
            .iter()
            .zip(self.data.chunks_exact(self.dim))
            .map(|(id, v)| (id.as_str(), v))
    }

    /// Appends every entry of `other`; ids must not collide.
    pub fn merge(&mut self, other: &EmbeddingTable) -> Result<()> {
        if other.dim != self.dim {
            return Err(Error::Format(format!(
                "cannot merge tables of dimension {} and {}",
                self.dim, other.dim
            )));
        }
        for (id, v) in other.iter() {
            self.insert(id, v)?;
        }
        Ok(())
    }

    /// Loads the binary format, or the text fallback when the magic bytes
    /// are absent.
    pub fn load(path: &Path, expected_dim: Option<usize>) -> Result<Self> {
        let mut bytes = Vec::new();
        File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let table = if bytes.starts_with(VECTOR_MAGIC) {
            Self::decode_binary(&bytes)?
        } else {
            Self::parse_text(path, &bytes, expected_dim)?
        };
        if let Some(d) = expected_dim {
            if d != table.dim {
                return Err(Error::Format(format!(
                    "expected dimension {d}, file has {}",
                    table.dim
                )));
            }
        }
        Ok(table)
    }

    fn decode_binary(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.take(4)?;
        let dim = r.u32()? as usize;
        let count = r.u64()?;
        if dim == 0 {
            return Err(Error::Format("vector file declares dimension 0".into()));
        }
        let mut table = Self::new(dim);
        let mut v = vec![0.0; dim];
        for _ in 0..count {
            let len = r.u16()? as usize;
            let id = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("vector id is not valid UTF-8".into()))?
                .to_string();
            for x in v.iter_mut() {
                *x = f64::from(r.f32()?);
            }
            table.insert(id, &v)?;
        }
        if !r.is_empty() {
            return Err(Error::Format("trailing bytes after last vector record".into()));
        }
        Ok(table)
    }

    fn parse_text(path: &Path, bytes: &[u8], expected_dim: Option<usize>) -> Result<Self> {
        let mut table: Option<Self> = expected_dim.map(Self::new);
        for (i, line) in BufReader::new(bytes).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let (id, rest) = line.split_once('\t').ok_or_else(|| {
                Error::Format(format!("line {}: expected id<TAB>values", i + 1))
            })?;
            let values = rest
                .split_whitespace()
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))?;
            if values.is_empty() {
                return Err(Error::Format(format!("line {}: empty vector", i + 1)));
            }
            let t = table.get_or_insert_with(|| Self::new(values.len()));
            t.insert(id, &values)
                .map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))?;
        }
        table.ok_or_else(|| Error::Format("empty text vector file; dimension unknown".into()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_binary(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    fn write_binary<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(VECTOR_MAGIC)?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        for (id, v) in self.iter() {
            write_id(w, id)?;
            for &x in v {
                w.write_all(&(x as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }
}

pub(crate) fn write_id<W: Write>(w: &mut W, id: &str) -> std::io::Result<()> {
    let len = u16::try_from(id.len()).map_err(|_| {
        std::io::Error::new(std::io::ErrorKind::InvalidInput, format!("id longer than 65535 bytes: {id:.32}…"))
    })?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(id.as_bytes())
}

/// Cursor over a byte buffer; every read past the end is a format error.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!("truncated file: needed {n} bytes at offset {}", self.pos))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.array::<1>()?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        self.array().map(u16::from_le_bytes)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        self.array().map(u32::from_le_bytes)
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        self.array().map(u64::from_le_bytes)
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        let x = f32::from_le_bytes(self.array()?);
        if x.is_finite() {
            Ok(x)
        } else {
            Err(Error::Format("non-finite value in vector data".into()))
        }
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        let x = f64::from_le_bytes(self.array()?);
        if x.is_finite() {
            Ok(x)
        } else {
            Err(Error::Format("non-finite value in checkpoint".into()))
        }
    }

    pub(crate) fn is_empty(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

/// The embedding tables a pipeline needs.
///
/// `retrieval` embeds queries for neighbourhood search. The head reads its
/// inputs from `head`, falling back to `retrieval` when no separate table is
/// given. `pairs`, when present, supplies precomputed query–neighbour
/// interaction vectors keyed by [`Tables::pair_key`].
#[derive(Debug, Clone)]
pub struct Tables {
    pub retrieval: EmbeddingTable,
    pub head: Option<EmbeddingTable>,
    pub pairs: Option<EmbeddingTable>,
}

impl Tables {
    pub fn new(retrieval: EmbeddingTable) -> Self {
        Self {
            retrieval,
            head: None,
            pairs: None,
        }
    }

    pub fn head(&self) -> &EmbeddingTable {
        self.head.as_ref().unwrap_or(&self.retrieval)
    }

    pub fn pair_key(query_id: &str, neighbour_id: &str) -> String {
        format!("{query_id}\u{1}{neighbour_id}")
    }
}
