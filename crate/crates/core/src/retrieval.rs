//! Exact cosine k-nearest-neighbour search over pooled slide embeddings.
//!
//! The index is a flat scan: every query computes all `N` similarities in
//! `f64`, then ranks by similarity descending with ties broken by ascending
//! id. It persists as a binary matrix (`WSIX`, version 1, `N`, `d`, then
//! `N·d` little-endian `f32`) plus a JSON table of ids and categories.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binfmt::{self, Reader, Writer};
use crate::error::{Error, Result};

const INDEX_MAGIC: &[u8; 4] = b"WSIX";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub id: String,
    pub similarity: f64,
    pub category: String,
}

fn norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt()
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum()
}

/// `a·b / (‖a‖‖b‖)`, clamped to `[-1, 1]`.
pub fn cosine(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            id: "cosine operand".into(),
            expected: a.len(),
            found: b.len(),
        });
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Anything that can answer k-nearest-neighbour queries over training records.
pub trait NeighborSource: Sync {
    fn knn(&self, query: &[f32], k: usize, exclude: Option<&str>) -> Result<Vec<Neighbor>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIndex {
    ids: Vec<String>,
    categories: Vec<String>,
    d: usize,
    /// Unit rows kept in f64 so re-normalisation adds no f32 rounding.
    embeddings: Vec<f64>,
    norms: Vec<f64>,
    position: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct TableEntry {
    id: String,
    category: String,
}

impl RetrievalIndex {
    /// Builds an index from `(id, embedding, category)` triples, preserving
    /// input order. Embeddings are re-normalised to unit length.
    pub fn build<I>(records: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, Vec<f32>, String)>,
    {
        Self::build_inner(records, true)
    }

    fn build_inner<I>(records: I, renormalize: bool) -> Result<Self>
    where
        I: IntoIterator<Item = (String, Vec<f32>, String)>,
    {
        let mut ids = Vec::new();
        let mut categories = Vec::new();
        let mut embeddings = Vec::new();
        let mut position = HashMap::new();
        let mut d = None;
        for (id, embedding, category) in records {
            let expected = *d.get_or_insert(embedding.len());
            if embedding.len() != expected || expected == 0 {
                return Err(Error::DimensionMismatch {
                    id,
                    expected,
                    found: embedding.len(),
                });
            }
            if embedding.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteValue {
                    row: ids.len(),
                    col: embedding.iter().position(|v| !v.is_finite()).unwrap_or(0),
                });
            }
            let n = norm(&embedding);
            if n == 0.0 {
                return Err(Error::ZeroVector);
            }
            if position.insert(id.clone(), ids.len()).is_some() {
                return Err(Error::DuplicateId(id));
            }
            let scale = if renormalize { n } else { 1.0 };
            embeddings.extend(embedding.iter().map(|&v| f64::from(v) / scale));
            ids.push(id);
            categories.push(category);
        }
        let d = d.ok_or(Error::EmptyInput)?;
        let norms = embeddings
            .chunks_exact(d)
            .map(|row: &[f64]| row.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        Ok(Self {
            ids,
            categories,
            d,
            embeddings,
            norms,
            position,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn contains(&self, id: &str) -> bool {
        self.position.contains_key(id)
    }

    pub fn category(&self, id: &str) -> Option<&str> {
        self.position.get(id).map(|&i| self.categories[i].as_str())
    }

    pub fn embedding(&self, i: usize) -> &[f64] {
        &self.embeddings[i * self.d..(i + 1) * self.d]
    }

    pub fn embedding_of(&self, id: &str) -> Option<&[f64]> {
        self.position.get(id).map(|&i| self.embedding(i))
    }

    /// The `min(k, N')` most similar records, where `N'` excludes `exclude`.
    pub fn knn(&self, query: &[f32], k: usize, exclude: Option<&str>) -> Result<Vec<Neighbor>> {
        if self.is_empty() {
            return Err(Error::EmptyIndex);
        }
        if k == 0 {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        if query.len() != self.d {
            return Err(Error::DimensionMismatch {
                id: "query".into(),
                expected: self.d,
                found: query.len(),
            });
        }
        let qn = norm(query);
        if qn == 0.0 || !qn.is_finite() {
            return Err(Error::ZeroVector);
        }
        let skip = exclude.and_then(|id| self.position.get(id).copied());
        let mut scored: Vec<(f64, usize)> = (0..self.len())
            .filter(|&i| Some(i) != skip)
            .map(|i| {
                let sim = query
                    .iter()
                    .zip(self.embedding(i))
                    .map(|(&q, &e)| f64::from(q) * e)
                    .sum::<f64>()
                    / (qn * self.norms[i]);
                (sim.clamp(-1.0, 1.0), i)
            })
            .collect();
        let rank = |a: &(f64, usize), b: &(f64, usize)| {
            b.0.total_cmp(&a.0)
                .then_with(|| self.ids[a.1].cmp(&self.ids[b.1]))
        };
        let k = k.min(scored.len());
        if k == 0 {
            return Ok(Vec::new());
        }
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, rank);
            scored.truncate(k);
        }
        scored.sort_unstable_by(rank);
        Ok(scored
            .into_iter()
            .map(|(similarity, i)| Neighbor {
                id: self.ids[i].clone(),
                similarity,
                category: self.categories[i].clone(),
            })
            .collect())
    }

    pub fn encode_matrix(&self) -> Result<Vec<u8>> {
        let mut w = Writer::new(INDEX_MAGIC);
        w.u32(binfmt::to_u32(self.len(), "index size")?);
        w.u32(binfmt::to_u32(self.d, "embedding dimension")?);
        let rows: Vec<f32> = self.embeddings.iter().map(|&v| v as f32).collect();
        w.f32s(&rows);
        Ok(w.buf)
    }

    pub fn encode_table(&self) -> Result<Vec<u8>> {
        let table: Vec<TableEntry> = self
            .ids
            .iter()
            .zip(&self.categories)
            .map(|(id, category)| TableEntry {
                id: id.clone(),
                category: category.clone(),
            })
            .collect();
        let mut json = serde_json::to_vec_pretty(&table)?;
        json.push(b'\n');
        Ok(json)
    }

    pub fn save(&self, matrix_path: &Path, table_path: &Path) -> Result<()> {
        binfmt::write_atomic(matrix_path, &self.encode_matrix()?)?;
        binfmt::write_atomic(table_path, &self.encode_table()?)
    }

    pub fn load(matrix_path: &Path, table_path: &Path) -> Result<Self> {
        let bytes = binfmt::read_file(matrix_path)?;
        let what = matrix_path.display().to_string();
        let mut r = Reader::new(&bytes, &what);
        r.header(INDEX_MAGIC)?;
        let n = r.u32()? as usize;
        let d = r.u32()? as usize;
        let data = r.f32s(n.saturating_mul(d))?;
        if r.remaining() != 0 {
            return Err(Error::TruncatedFile(format!("{what}: trailing bytes")));
        }
        let table: Vec<TableEntry> = serde_json::from_slice(&binfmt::read_file(table_path)?)?;
        if table.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "index matrix has {n} rows but table has {} entries",
                table.len()
            )));
        }
        if d == 0 {
            return Err(Error::EmptyInput);
        }
        // Stored rows are already unit length; keep their exact values so a
        // load/save cycle reproduces the file byte for byte.
        Self::build_inner(
            table
                .into_iter()
                .zip(data.chunks_exact(d))
                .map(|(e, row)| (e.id, row.to_vec(), e.category)),
            false,
        )
    }
}

impl NeighborSource for RetrievalIndex {
    fn knn(&self, query: &[f32], k: usize, exclude: Option<&str>) -> Result<Vec<Neighbor>> {
        RetrievalIndex::knn(self, query, k, exclude)
    }
}

/// Most frequent category. Count ties go to the category holding the single
/// most similar neighbour; remaining exact ties resolve by smaller id, then
/// by category name, so the result never depends on list order.
pub fn majority_category(neighbors: &[Neighbor]) -> Result<String> {
    if neighbors.is_empty() {
        return Err(Error::EmptyInput);
    }
    // category -> (count, best similarity, id holding it)
    let mut tally: BTreeMap<&str, (usize, f64, &str)> = BTreeMap::new();
    for n in neighbors {
        let entry = tally
            .entry(n.category.as_str())
            .or_insert((0, f64::NEG_INFINITY, n.id.as_str()));
        entry.0 += 1;
        if n.similarity > entry.1 || (n.similarity == entry.1 && n.id.as_str() < entry.2) {
            entry.1 = n.similarity;
            entry.2 = n.id.as_str();
        }
    }
    let (category, _) = tally
        .into_iter()
        .max_by(|(ca, a), (cb, b)| {
            a.0.cmp(&b.0)
                .then_with(|| a.1.total_cmp(&b.1))
                .then_with(|| b.2.cmp(a.2))
                .then_with(|| cb.cmp(ca))
        })
        .expect("non-empty");
    Ok(category.to_string())
}
