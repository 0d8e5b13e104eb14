//! Class embeddings and the class-similarity matrix used for fusion.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::numerics::{dot, norm, Matrix};
use crate::{Error, Result};

/// Immutable set of named classes with one semantic embedding per class.
///
/// Row `i` of the embedding matrix belongs to class index `i`; this ordering is
/// used everywhere downstream.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassCatalog {
    names: Vec<String>,
    embeddings: Matrix,
    unit: Matrix,
}

impl ClassCatalog {
    pub fn new(names: Vec<String>, embeddings: Matrix) -> Result<Self> {
        if names.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "catalog needs at least 2 classes, got {}",
                names.len()
            )));
        }
        if embeddings.rows() != names.len() || embeddings.cols() == 0 {
            return Err(Error::InvalidArgument(format!(
                "{} class names but embedding matrix is {}x{}",
                names.len(),
                embeddings.rows(),
                embeddings.cols()
            )));
        }
        let mut seen = HashSet::new();
        for n in &names {
            if !seen.insert(n.as_str()) {
                return Err(Error::DuplicateClass(n.clone()));
            }
        }
        if !embeddings.is_finite() {
            return Err(Error::InvalidArgument("embeddings contain non-finite values".into()));
        }
        let mut unit = embeddings.clone();
        for (i, name) in names.iter().enumerate() {
            let n = norm(unit.row(i));
            if n == 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "class `{name}` has a zero-norm embedding"
                )));
            }
            for v in unit.row_mut(i) {
                *v /= n;
            }
        }
        Ok(ClassCatalog {
            names,
            embeddings,
            unit,
        })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn embedding_dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }

    /// Embeddings scaled to unit norm, row per class.
    pub fn unit_embeddings(&self) -> &Matrix {
        &self.unit
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Reads the embeddings CSV: header `name,e0,...,e{d-1}`, one row per class.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(path)
            .map_err(|e| Error::load(path, e.to_string()))?;
        let header = reader.headers().map_err(|e| Error::load(path, e.to_string()))?.clone();
        if header.get(0) != Some("name") || header.len() < 2 {
            return Err(Error::load(path, "header must be `name,e0,e1,...`"));
        }
        let dim = header.len() - 1;
        let mut names = Vec::new();
        let mut data = Vec::new();
        let mut seen = HashSet::new();
        for (line, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| Error::load(path, e.to_string()))?;
            let row_no = line + 2;
            if rec.len() != dim + 1 {
                return Err(Error::load(
                    path,
                    format!("row {row_no} has {} fields, expected {}", rec.len(), dim + 1),
                ));
            }
            let name = rec[0].to_string();
            if !seen.insert(name.clone()) {
                return Err(Error::DuplicateClass(name));
            }
            for field in rec.iter().skip(1) {
                let v: f64 = field
                    .trim()
                    .parse()
                    .map_err(|_| Error::load(path, format!("row {row_no}: cannot parse `{field}`")))?;
                data.push(v);
            }
            names.push(name);
        }
        let embeddings = Matrix::from_vec(names.len(), dim, data)?;
        ClassCatalog::new(names, embeddings).map_err(|e| match e {
            Error::DuplicateClass(_) => e,
            other => Error::load(path, other.to_string()),
        })
    }

    /// Writes the embeddings CSV. Floats use shortest round-trip formatting, so
    /// a reload is bit-identical.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut line = String::from("name");
        for j in 0..self.embedding_dim() {
            line.push_str(&format!(",e{j}"));
        }
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
        for (name, row) in self.names.iter().zip(self.embeddings.row_iter()) {
            if name.contains([',', '"', '\n']) {
                return Err(Error::InvalidArgument(format!(
                    "class name `{name}` cannot be written to CSV"
                )));
            }
            let mut line = name.clone();
            for v in row {
                line.push_str(&format!(",{v}"));
            }
            writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Which rows of a pruned similarity matrix keep their top-k entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PruneScope {
    /// Every class row is pruned to its top-k.
    #[default]
    All,
    /// Rows of classes the modality saw during training are pruned to top-k;
    /// all other rows are zeroed.
    SeenOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    values: Matrix,
    pruned_k: Option<usize>,
}

impl SimilarityMatrix {
    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn pruned_k(&self) -> Option<usize> {
        self.pruned_k
    }

    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.rows() == 0
    }

    /// Wraps an arbitrary square matrix, e.g. one built by hand in a test.
    pub fn from_matrix(values: Matrix, pruned_k: Option<usize>) -> Result<Self> {
        if values.rows() != values.cols() {
            return Err(Error::InvalidArgument(format!(
                "similarity matrix must be square, got {}x{}",
                values.rows(),
                values.cols()
            )));
        }
        Ok(SimilarityMatrix { values, pruned_k })
    }

    /// Zeroes every row whose index is not in `keep`.
    pub fn restrict_rows(&self, keep: &[usize]) -> SimilarityMatrix {
        let mut values = self.values.clone();
        for r in 0..values.rows() {
            if !keep.contains(&r) {
                values.row_mut(r).fill(0.0);
            }
        }
        SimilarityMatrix {
            values,
            pruned_k: self.pruned_k,
        }
    }

    /// Divides every row by the sum of its absolute entries (zero rows stay zero).
    pub fn row_normalized(&self) -> SimilarityMatrix {
        let mut values = self.values.clone();
        for r in 0..values.rows() {
            let row = values.row_mut(r);
            let total: f64 = row.iter().map(|v| v.abs()).sum();
            if total > 0.0 {
                for v in row {
                    *v /= total;
                }
            }
        }
        SimilarityMatrix {
            values,
            pruned_k: self.pruned_k,
        }
    }
}

/// Pairwise cosine similarity between all class embeddings.
pub fn class_similarity(catalog: &ClassCatalog) -> SimilarityMatrix {
    let unit = catalog.unit_embeddings();
    let n = catalog.len();
    let mut values = Matrix::zeros(n, n);
    for i in 0..n {
        values.set(i, i, 1.0);
        for j in (i + 1)..n {
            let s = dot(unit.row(i), unit.row(j)).clamp(-1.0, 1.0);
            values.set(i, j, s);
            values.set(j, i, s);
        }
    }
    SimilarityMatrix { values, pruned_k: None }
}

/// Keeps the `k` largest entries of every row (ties go to the lower column
/// index) and zeroes the rest.
pub fn prune_topk(s: &SimilarityMatrix, k: usize) -> Result<SimilarityMatrix> {
    let n = s.len();
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!("top-k must be in 1..={n}, got {k}")));
    }
    if s.pruned_k.is_some() {
        return Err(Error::InvalidArgument("similarity matrix is already pruned".into()));
    }
    let mut values = Matrix::zeros(n, n);
    let mut order: Vec<usize> = Vec::with_capacity(n);
    for r in 0..n {
        let row = s.values.row(r);
        order.clear();
        order.extend(0..n);
        // stable sort keeps ascending index order among equal values
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
        for &c in &order[..k] {
            values.set(r, c, row[c]);
        }
    }
    Ok(SimilarityMatrix {
        values,
        pruned_k: Some(k),
    })
}
