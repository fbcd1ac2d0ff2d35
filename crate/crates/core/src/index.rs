//! Exact cosine top-k retrieval over the labelled source corpus.
//!
//! Rows are stored unit-norm in `f32`, row-major, so scoring a query is a
//! dense matrix–vector product. Ranking is by descending score, ties broken
//! by ascending id.
//!
//! Index file layout (little-endian):
//!
//! ```text
//! "NFI1" | version: u32 = 1 | dim: u32 | count: u64
//! count × (id_len: u16 | id bytes | label: u8 (0 neutral, 1 flagged) | dim × f32)
//! ```

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashMap};
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::dataset::{BinaryLabel, Dataset};
use crate::embed::{write_id, ByteReader, EmbeddingTable};
use crate::error::{Error, Result};
use crate::par::{self, Execution};

pub const INDEX_MAGIC: &[u8; 4] = b"NFI1";
pub const INDEX_VERSION: u32 = 1;

/// Rows scored together in the inner loop.
const ROW_BLOCK: usize = 4;
/// Above this many rows a single query is scanned in parallel chunks.
const PARALLEL_SCAN_ROWS: usize = 1 << 15;
const SCAN_CHUNK: usize = 1 << 13;

#[derive(Debug, Clone, PartialEq)]
pub struct Hit {
    pub id: String,
    pub score: f64,
    pub label: BinaryLabel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Neighbourhood {
    pub query_id: String,
    pub hits: Vec<Hit>,
}

impl Neighbourhood {
    pub fn len(&self) -> usize {
        self.hits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hits.is_empty()
    }

    pub fn labels(&self) -> Vec<BinaryLabel> {
        self.hits.iter().map(|h| h.label).collect()
    }

    /// The first `k` hits as a new neighbourhood.
    pub fn truncated(&self, k: usize) -> Neighbourhood {
        Neighbourhood {
            query_id: self.query_id.clone(),
            hits: self.hits[..k.min(self.hits.len())].to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Index {
    dim: usize,
    ids: Vec<String>,
    labels: Vec<BinaryLabel>,
    rows: Vec<f32>,
    positions: HashMap<String, usize>,
}

/// Candidate ordered by retrieval preference: higher score first, then
/// smaller id.
#[derive(Clone, Copy)]
struct Candidate<'a> {
    score: f64,
    id: &'a str,
    row: usize,
}

impl PartialEq for Candidate<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Candidate<'_> {}
impl PartialOrd for Candidate<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Candidate<'_> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then_with(|| other.id.cmp(self.id))
    }
}

/// Keeps the `k` best candidates seen so far.
struct TopK<'a> {
    k: usize,
    heap: BinaryHeap<Reverse<Candidate<'a>>>,
}

impl<'a> TopK<'a> {
    fn new(k: usize) -> Self {
        Self {
            k,
            heap: BinaryHeap::with_capacity(k + 1),
        }
    }

    #[inline]
    fn offer(&mut self, c: Candidate<'a>) {
        if self.heap.len() < self.k {
            self.heap.push(Reverse(c));
        } else if let Some(Reverse(worst)) = self.heap.peek() {
            if c > *worst {
                self.heap.pop();
                self.heap.push(Reverse(c));
            }
        }
    }

    fn into_sorted(self) -> Vec<Candidate<'a>> {
        let mut v: Vec<_> = self.heap.into_iter().map(|Reverse(c)| c).collect();
        v.sort_by(|a, b| b.cmp(a));
        v
    }
}

impl Index {
    /// One row per example, in dataset order, taken from `table`.
    pub fn build(dataset: &Dataset, table: &EmbeddingTable) -> Result<Self> {
        let mut ids = Vec::with_capacity(dataset.len());
        let mut labels = Vec::with_capacity(dataset.len());
        let mut rows = Vec::with_capacity(dataset.len() * table.dim());
        for ex in dataset.examples() {
            let v = table
                .get(&ex.id)
                .ok_or_else(|| Error::Validation(format!("cannot index {:?}: no embedding", ex.id)))?;
            ids.push(ex.id.clone());
            labels.push(ex.label);
            rows.extend(v.iter().map(|&x| x as f32));
        }
        Self::from_parts(table.dim(), ids, labels, rows)
    }

    /// Rows are re-normalized in `f64` and stored as `f32`.
    pub fn from_parts(dim: usize, ids: Vec<String>, labels: Vec<BinaryLabel>, rows: Vec<f32>) -> Result<Self> {
        Self::assemble(dim, ids, labels, rows, true)
    }

    /// Saved rows are already unit length; normalizing again could move the
    /// last bit of some coordinates and break exact reproducibility.
    fn assemble(dim: usize, ids: Vec<String>, labels: Vec<BinaryLabel>, mut rows: Vec<f32>, normalize: bool) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Argument("index dimension must be positive".into()));
        }
        if ids.len() != labels.len() || rows.len() != ids.len() * dim {
            return Err(Error::Argument(format!(
                "inconsistent index parts: {} ids, {} labels, {} values for dim {dim}",
                ids.len(),
                labels.len(),
                rows.len()
            )));
        }
        let mut positions = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if positions.insert(id.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate index id {id:?}")));
            }
        }
        for row in rows.chunks_exact_mut(dim).filter(|_| normalize) {
            let norm = row.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt();
            if norm > 1e-12 {
                row.iter_mut().for_each(|x| *x = (f64::from(*x) / norm) as f32);
            }
        }
        Ok(Self {
            dim,
            ids,
            labels,
            rows,
            positions,
        })
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

    pub fn labels(&self) -> &[BinaryLabel] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.positions.get(id).copied()
    }

    pub fn label_of(&self, id: &str) -> Option<BinaryLabel> {
        self.position(id).map(|i| self.labels[i])
    }

    /// The `k` rows with the highest cosine to `v`, skipping `exclude_id`.
    pub fn query_topk(
        &self,
        query_id: &str,
        v: &[f64],
        k: usize,
        exclude_id: Option<&str>,
    ) -> Result<Neighbourhood> {
        self.query_topk_with(query_id, v, k, exclude_id, Execution::Sequential)
    }

    pub fn query_topk_with(
        &self,
        query_id: &str,
        v: &[f64],
        k: usize,
        exclude_id: Option<&str>,
        exec: Execution,
    ) -> Result<Neighbourhood> {
        if v.len() != self.dim {
            return Err(Error::Argument(format!(
                "query {query_id:?} has dimension {}, index has {}",
                v.len(),
                self.dim
            )));
        }
        if k == 0 {
            return Err(Error::Argument("k must be positive".into()));
        }
        let excluded = exclude_id.and_then(|id| self.position(id));
        let available = self.len() - usize::from(excluded.is_some());
        if k > available {
            return Err(Error::Argument(format!(
                "k = {k} exceeds the {available} retrievable rows"
            )));
        }
        let q = crate::embed::l2_normalize(v);

        let best = if exec.is_parallel() && self.len() >= PARALLEL_SCAN_ROWS {
            let n_chunks = self.len().div_ceil(SCAN_CHUNK);
            let partial = par::map_range(exec, n_chunks, |c| {
                let start = c * SCAN_CHUNK;
                let end = (start + SCAN_CHUNK).min(self.len());
                self.scan(&q, k, excluded, start..end).into_sorted()
            });
            let mut top = TopK::new(k);
            partial.into_iter().flatten().for_each(|c| top.offer(c));
            top.into_sorted()
        } else {
            self.scan(&q, k, excluded, 0..self.len()).into_sorted()
        };

        Ok(Neighbourhood {
            query_id: query_id.to_string(),
            hits: best
                .into_iter()
                .map(|c| Hit {
                    id: c.id.to_string(),
                    score: c.score,
                    label: self.labels[c.row],
                })
                .collect(),
        })
    }

    /// Blocked scan of `range`: `ROW_BLOCK` rows share each pass over the
    /// query. Each row's dot product is still summed in coordinate order.
    fn scan(&self, q: &[f64], k: usize, excluded: Option<usize>, range: std::ops::Range<usize>) -> TopK<'_> {
        let d = self.dim;
        let mut top = TopK::new(k);
        let mut offer = |row: usize, score: f64| {
            if Some(row) != excluded {
                top.offer(Candidate {
                    score,
                    id: &self.ids[row],
                    row,
                });
            }
        };
        let mut row = range.start;
        while row + ROW_BLOCK <= range.end {
            let block = &self.rows[row * d..(row + ROW_BLOCK) * d];
            let (r0, rest) = block.split_at(d);
            let (r1, rest) = rest.split_at(d);
            let (r2, r3) = rest.split_at(d);
            let mut acc = [0.0f64; ROW_BLOCK];
            for j in 0..d {
                let qj = q[j];
                acc[0] += qj * f64::from(r0[j]);
                acc[1] += qj * f64::from(r1[j]);
                acc[2] += qj * f64::from(r2[j]);
                acc[3] += qj * f64::from(r3[j]);
            }
            for (i, &s) in acc.iter().enumerate() {
                offer(row + i, s);
            }
            row += ROW_BLOCK;
        }
        for r in row..range.end {
            let s = self.row(r)
                .iter()
                .zip(q)
                .fold(0.0f64, |acc, (&x, &qj)| acc + qj * f64::from(x));
            offer(r, s);
        }
        top
    }

    /// Retrieves neighbourhoods for many queries. With `exclude_self`, each
    /// query's own id is removed from its neighbourhood.
    pub fn query_batch(
        &self,
        queries: &[(&str, &[f64])],
        k: usize,
        exclude_self: bool,
        exec: Execution,
    ) -> Result<Vec<Neighbourhood>> {
        par::try_map(exec, queries, |&(id, v)| {
            self.query_topk(id, v, k, exclude_self.then_some(id))
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to memory cannot fail");
        out
    }

    fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(INDEX_MAGIC)?;
        w.write_all(&INDEX_VERSION.to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        for (i, id) in self.ids.iter().enumerate() {
            write_id(w, id)?;
            w.write_all(&[u8::from(self.labels[i].is_flagged())])?;
            for &x in self.row(i) {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != INDEX_MAGIC {
            return Err(Error::Format("not an index file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != INDEX_VERSION {
            return Err(Error::Format(format!("unsupported index version {version}")));
        }
        let dim = r.u32()? as usize;
        let count = r.u64()? as usize;
        // Guards the allocations below against a corrupt header.
        if count.saturating_mul(dim.saturating_mul(4) + 3) > bytes.len() {
            return Err(Error::Format("truncated file: header count exceeds data".into()));
        }
        let mut ids = Vec::with_capacity(count);
        let mut labels = Vec::with_capacity(count);
        let mut rows = Vec::with_capacity(count * dim);
        for _ in 0..count {
            let len = r.u16()? as usize;
            let id = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("index id is not valid UTF-8".into()))?;
            ids.push(id.to_string());
            labels.push(match r.u8()? {
                0 => BinaryLabel::Neutral,
                1 => BinaryLabel::Flagged,
                b => return Err(Error::Format(format!("invalid label byte {b}"))),
            });
            for _ in 0..dim {
                rows.push(r.f32()?);
            }
        }
        if !r.is_empty() {
            return Err(Error::Format("trailing bytes after last index record".into()));
        }
        Self::assemble(dim, ids, labels, rows, false)
    }
}
