//! Index maps and sparse nonnegative count matrices.

use std::collections::HashMap;
use std::io::{Read, Write};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ordered bijection between opaque string ids and dense indices.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Index {
    ids: Vec<String>,
    lookup: HashMap<String, usize>,
}

impl Index {
    /// Keeps the given order. Fails on duplicate ids.
    pub fn from_ordered<I, S>(ids: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut index = Index::default();
        for id in ids {
            let id = id.into();
            if index.lookup.contains_key(&id) {
                return Err(Error::Parse(format!("duplicate id {id:?}")));
            }
            index.push_new(id);
        }
        Ok(index)
    }

    /// Sorts and deduplicates.
    pub fn from_unsorted<I, S>(ids: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut ids: Vec<String> = ids.into_iter().map(Into::into).collect();
        ids.sort();
        ids.dedup();
        Index::from(ids)
    }

    fn push_new(&mut self, id: String) -> usize {
        let i = self.ids.len();
        self.lookup.insert(id.clone(), i);
        self.ids.push(id);
        i
    }

    pub fn get(&self, id: &str) -> Option<usize> {
        self.lookup.get(id).copied()
    }

    pub fn id(&self, i: usize) -> &str {
        &self.ids[i]
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Sub-index over the given positions, in the given order.
    pub fn select(&self, positions: &[usize]) -> Index {
        Index::from(positions.iter().map(|&i| self.ids[i].clone()).collect::<Vec<_>>())
    }
}

impl From<Vec<String>> for Index {
    /// Assumes `ids` are unique; the last occurrence wins the lookup otherwise.
    fn from(ids: Vec<String>) -> Self {
        let lookup = ids.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        Index { ids, lookup }
    }
}

impl From<Index> for Vec<String> {
    fn from(index: Index) -> Self {
        index.ids
    }
}

/// Row-major sparse matrix of nonnegative integer counts.
///
/// Each row stores `(column, count)` pairs sorted by column with no zeros.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SparseCountMatrix {
    n_rows: usize,
    n_cols: usize,
    rows: Vec<Vec<(usize, u64)>>,
}

impl SparseCountMatrix {
    pub fn zeros(n_rows: usize, n_cols: usize) -> Self {
        SparseCountMatrix {
            n_rows,
            n_cols,
            rows: vec![Vec::new(); n_rows],
        }
    }

    /// Builds a matrix from `(row, col, count)` triplets, summing duplicates.
    pub fn from_triplets<I>(n_rows: usize, n_cols: usize, triplets: I) -> Result<Self>
    where
        I: IntoIterator<Item = (usize, usize, u64)>,
    {
        let mut rows: Vec<Vec<(usize, u64)>> = vec![Vec::new(); n_rows];
        for (r, c, v) in triplets {
            if r >= n_rows || c >= n_cols {
                return Err(Error::Shape(format!(
                    "entry ({r}, {c}) outside {n_rows}x{n_cols}"
                )));
            }
            if v > 0 {
                rows[r].push((c, v));
            }
        }
        for row in &mut rows {
            row.sort_unstable_by_key(|&(c, _)| c);
            row.dedup_by(|next, kept| {
                if next.0 == kept.0 {
                    kept.1 += next.1;
                    true
                } else {
                    false
                }
            });
        }
        Ok(SparseCountMatrix {
            n_rows,
            n_cols,
            rows,
        })
    }

    /// From a dense row-major table of counts.
    pub fn from_dense_rows(n_cols: usize, dense: &[Vec<u64>]) -> Result<Self> {
        let triplets = dense.iter().enumerate().flat_map(|(r, row)| {
            row.iter().enumerate().map(move |(c, &v)| (r, c, v))
        });
        if let Some(bad) = dense.iter().find(|row| row.len() != n_cols) {
            return Err(Error::Shape(format!(
                "row of length {} in matrix with {n_cols} columns",
                bad.len()
            )));
        }
        Self::from_triplets(dense.len(), n_cols, triplets)
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn row(&self, r: usize) -> &[(usize, u64)] {
        &self.rows[r]
    }

    pub fn get(&self, r: usize, c: usize) -> u64 {
        match self.rows[r].binary_search_by_key(&c, |&(col, _)| col) {
            Ok(pos) => self.rows[r][pos].1,
            Err(_) => 0,
        }
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    /// Sum of all entries.
    pub fn total(&self) -> u64 {
        self.rows.iter().flatten().map(|&(_, v)| v).sum()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.rows
            .iter()
            .map(|row| row.iter().map(|&(_, v)| v).sum())
            .collect()
    }

    /// Number of rows with a nonzero entry in each column.
    pub fn document_frequency(&self) -> Vec<usize> {
        let mut df = vec![0usize; self.n_cols];
        for row in &self.rows {
            for &(c, _) in row {
                df[c] += 1;
            }
        }
        df
    }

    /// Triplets in row-major order.
    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, u64)> + '_ {
        self.rows
            .iter()
            .enumerate()
            .flat_map(|(r, row)| row.iter().map(move |&(c, v)| (r, c, v)))
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.n_rows, self.n_cols));
        for (r, c, v) in self.triplets() {
            out[[r, c]] = v as f64;
        }
        out
    }

    /// New matrix made of the given rows, in order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        SparseCountMatrix {
            n_rows: rows.len(),
            n_cols: self.n_cols,
            rows: rows.iter().map(|&r| self.rows[r].clone()).collect(),
        }
    }

    /// Writes `row_id,col_id,value` triplet CSV with a header.
    pub fn write_triplets_csv<W: Write>(
        &self,
        writer: W,
        row_ids: &Index,
        col_ids: &Index,
    ) -> Result<()> {
        if row_ids.len() != self.n_rows || col_ids.len() != self.n_cols {
            return Err(Error::Shape(format!(
                "index sizes {}x{} do not match matrix {}x{}",
                row_ids.len(),
                col_ids.len(),
                self.n_rows,
                self.n_cols
            )));
        }
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["row_id", "col_id", "value"])?;
        for (r, c, v) in self.triplets() {
            w.write_record([row_ids.id(r), col_ids.id(c), &v.to_string()])?;
        }
        w.flush().map_err(|e| Error::io("<triplets>", e))?;
        Ok(())
    }

    /// Reads triplet CSV against known row and column indices.
    pub fn read_triplets_csv<R: Read>(reader: R, row_ids: &Index, col_ids: &Index) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let mut triplets = Vec::new();
        for (line, record) in rdr.records().enumerate() {
            let record = record?;
            let field = |i: usize| record.get(i).unwrap_or("");
            let r = row_ids
                .get(field(0))
                .ok_or_else(|| Error::Parse(format!("line {}: unknown row id {:?}", line + 2, field(0))))?;
            let c = col_ids
                .get(field(1))
                .ok_or_else(|| Error::Parse(format!("line {}: unknown col id {:?}", line + 2, field(1))))?;
            let v: u64 = field(2)
                .parse()
                .map_err(|_| Error::Parse(format!("line {}: bad count {:?}", line + 2, field(2))))?;
            triplets.push((r, c, v));
        }
        Self::from_triplets(row_ids.len(), col_ids.len(), triplets)
    }
}
