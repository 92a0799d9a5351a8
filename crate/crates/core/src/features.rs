//! TF-IDF weighting of visit counts and projection onto tower classes.

use std::io::Write;

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::par;
use crate::sparse::{Index, SparseCountMatrix};

/// Dense weighted user x tower matrix over the retained tower columns.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedVisits {
    pub values: Array2<f64>,
    /// Source column of each retained column.
    pub columns: Vec<usize>,
    /// Column count of the matrix the weights were computed from.
    pub source_cols: usize,
}

impl WeightedVisits {
    /// Wraps an already weighted dense matrix with every column retained.
    pub fn from_dense(values: Array2<f64>) -> Self {
        let cols = values.ncols();
        WeightedVisits {
            values,
            columns: (0..cols).collect(),
            source_cols: cols,
        }
    }
}

/// `w_ij * ln(n / df_j)`, where `df_j` counts users with `w_ij > 0`.
/// Columns nobody visited are dropped.
pub fn tfidf(visits: &SparseCountMatrix) -> Result<WeightedVisits> {
    let n = visits.n_rows();
    if n == 0 {
        return Err(Error::Empty("tf-idf needs at least one user".into()));
    }
    let df = visits.document_frequency();
    let columns: Vec<usize> = (0..visits.n_cols()).filter(|&j| df[j] > 0).collect();
    let mut position = vec![usize::MAX; visits.n_cols()];
    for (k, &j) in columns.iter().enumerate() {
        position[j] = k;
    }
    let idf: Vec<f64> = df
        .iter()
        .map(|&d| if d > 0 { (n as f64 / d as f64).ln() } else { 0.0 })
        .collect();
    let rows = par::map_range(n, |i| {
        let mut row = vec![0.0; columns.len()];
        for &(j, w) in visits.row(i) {
            row[position[j]] = w as f64 * idf[j];
        }
        row
    });
    let values = Array2::from_shape_vec((n, columns.len()), rows.into_iter().flatten().collect())
        .expect("row lengths match");
    Ok(WeightedVisits {
        values,
        columns,
        source_cols: visits.n_cols(),
    })
}

/// `M = W_weighted C`, using the rows of `classes` that correspond to the
/// retained columns. `classes` must have one row per source column.
pub fn mobility_matrix(weighted: &WeightedVisits, classes: ArrayView2<f64>) -> Result<Array2<f64>> {
    if classes.nrows() != weighted.source_cols {
        return Err(Error::Shape(format!(
            "weighted visits are {}x{} (from {} towers) but tower classes are {}x{}",
            weighted.values.nrows(),
            weighted.values.ncols(),
            weighted.source_cols,
            classes.nrows(),
            classes.ncols()
        )));
    }
    let d = classes.ncols();
    let n = weighted.values.nrows();
    let rows = par::map_range(n, |i| {
        let mut out = vec![0.0; d];
        for (k, &j) in weighted.columns.iter().enumerate() {
            let w = weighted.values[[i, k]];
            if w != 0.0 {
                for (c, o) in out.iter_mut().enumerate() {
                    *o += w * classes[[j, c]];
                }
            }
        }
        out
    });
    Ok(Array2::from_shape_vec((n, d), rows.into_iter().flatten().collect()).expect("row lengths match"))
}

/// Dense CSV with a leading id column: `<id_header>,<prefix>0..<prefix>{d-1}`.
pub fn write_dense_csv<W: Write>(
    writer: W,
    id_header: &str,
    prefix: &str,
    ids: &Index,
    values: ArrayView2<f64>,
) -> Result<()> {
    if ids.len() != values.nrows() {
        return Err(Error::Shape(format!("{} ids for {} rows", ids.len(), values.nrows())));
    }
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec![id_header.to_string()];
    header.extend((0..values.ncols()).map(|c| format!("{prefix}{c}")));
    w.write_record(&header)?;
    for (i, row) in values.outer_iter().enumerate() {
        let mut rec = vec![ids.id(i).to_string()];
        rec.extend(row.iter().map(|v| format!("{v:?}")));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<dense csv>", e))?;
    Ok(())
}

/// Reads a dense CSV written by [`write_dense_csv`].
pub fn read_dense_csv<R: std::io::Read>(reader: R) -> Result<(Index, Array2<f64>)> {
    let mut rdr = csv::Reader::from_reader(reader);
    let width = rdr.headers()?.len().saturating_sub(1);
    let mut ids = Vec::new();
    let mut flat = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != width + 1 {
            return Err(Error::Parse(format!("line {}: expected {} fields", line + 2, width + 1)));
        }
        ids.push(rec[0].to_string());
        for f in rec.iter().skip(1) {
            flat.push(
                f.parse::<f64>()
                    .map_err(|_| Error::Parse(format!("line {}: bad number {f:?}", line + 2)))?,
            );
        }
    }
    let values = Array2::from_shape_vec((ids.len(), width), flat).map_err(|e| Error::Shape(e.to_string()))?;
    Ok((Index::from_ordered(ids)?, values))
}
