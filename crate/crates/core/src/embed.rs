//! Dense representations: the `CREM1` embedding file format, a row-major
//! embedding matrix, cosine similarity, and a deterministic toy encoder.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::binio::{self, expect_magic, fnv1a};
use crate::corpus::Tokenizer;
use crate::error::{Error, Result};
use crate::scalar::{self, Scalar};

pub const EMBEDDING_MAGIC: &[u8; 5] = b"CREM1";

/// Row-per-document dense vectors of a fixed dimension, with cached norms.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix<T> {
    dim: usize,
    data: Vec<T>,
    norms: Vec<f64>,
}

impl<T: Scalar> EmbeddingMatrix<T> {
    /// Build from flat row-major data. Rejects non-finite entries.
    pub fn from_flat(dim: usize, data: Vec<T>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("embedding dimension must be >= 1"));
        }
        if !data.len().is_multiple_of(dim) {
            return Err(Error::DimensionMismatch { expected: dim, got: data.len() % dim });
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        let norms = data.chunks_exact(dim).map(scalar::norm).collect();
        Ok(Self { dim, data, norms })
    }

    pub fn from_rows(dim: usize, rows: impl IntoIterator<Item = Vec<T>>) -> Result<Self> {
        let mut data = Vec::new();
        for row in rows {
            if row.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: row.len() });
            }
            data.extend(row);
        }
        Self::from_flat(dim, data)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        self.norms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.norms.is_empty()
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn norm(&self, i: usize) -> f64 {
        self.norms[i]
    }

    pub fn norms(&self) -> &[f64] {
        &self.norms
    }

    pub fn as_flat(&self) -> &[T] {
        &self.data
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = &[T]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn cast<U: Scalar>(&self) -> EmbeddingMatrix<U> {
        let data: Vec<U> = self.data.iter().map(|x| U::narrow(x.widen())).collect();
        let norms = data.chunks_exact(self.dim).map(scalar::norm).collect();
        EmbeddingMatrix { dim: self.dim, data, norms }
    }
}

impl EmbeddingMatrix<f32> {
    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(EMBEDDING_MAGIC)?;
        binio::write_u32(w, self.rows() as u32)?;
        binio::write_u32(w, self.dim as u32)?;
        for &x in &self.data {
            binio::write_f32(w, x)?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        self.write_to(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
    }
}

/// Load a `CREM1` file: magic, u32 rows, u32 dim, then rows*dim f32 LE values.
///
/// `expected_rows` pins the row count (e.g. to the collection size); pass
/// `None` to accept whatever the header declares.
pub fn load_embeddings(path: impl AsRef<Path>, expected_rows: Option<usize>) -> Result<EmbeddingMatrix<f32>> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(f);
    let io = |e| Error::io(path, e);
    expect_magic(&mut r, EMBEDDING_MAGIC).map_err(io)?;
    let rows = binio::read_u32(&mut r).map_err(io)? as usize;
    let dim = binio::read_u32(&mut r).map_err(io)? as usize;
    if let Some(expected) = expected_rows {
        if rows != expected {
            return Err(Error::DimensionMismatch { expected, got: rows });
        }
    }
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(io)?;
    if bytes.len() != rows * dim * 4 {
        return Err(Error::Format(format!(
            "{}: header declares {rows}x{dim} floats, payload has {} bytes",
            path.display(),
            bytes.len()
        )));
    }
    let data = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    EmbeddingMatrix::from_flat(dim, data)
}

/// Convert a TSV of `id<TAB>v1 v2 ... vD` (values separated by tabs or
/// spaces) into an embedding matrix plus the ids in row order.
pub fn read_embeddings_tsv(path: impl AsRef<Path>) -> Result<(Vec<String>, EmbeddingMatrix<f32>)> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut ids = Vec::new();
    let mut data = Vec::new();
    let mut dim = None;
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let mut fields = line.split_whitespace();
        let Some(id) = fields.next() else { continue };
        let row: Vec<f32> = fields
            .map(|s| s.parse::<f32>())
            .collect::<Result<_, _>>()
            .map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
        match dim {
            None => dim = Some(row.len()),
            Some(d) if d != row.len() => {
                return Err(Error::parse(path, i + 1, format!("expected {d} values, found {}", row.len())))
            }
            _ => {}
        }
        ids.push(id.to_string());
        data.extend(row);
    }
    let dim = dim.ok_or(Error::EmptyCollection)?;
    Ok((ids, EmbeddingMatrix::from_flat(dim, data)?))
}

/// Cosine similarity; 0 when either vector has zero norm.
pub fn cosine<T: Scalar>(u: &[T], v: &[T]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch { expected: u.len(), got: v.len() });
    }
    Ok(cosine_with_norms(u, v, scalar::norm(u), scalar::norm(v)))
}

#[inline]
pub(crate) fn cosine_with_norms<T: Scalar>(u: &[T], v: &[T], nu: f64, nv: f64) -> f64 {
    if nu == 0.0 || nv == 0.0 {
        return 0.0;
    }
    scalar::dot(u, v) / (nu * nv)
}

/// Pseudo-random unit vector for a token, fixed by `(token, dim, seed)`.
pub fn token_vector(token: &str, dim: usize, seed: u64) -> Vec<f64> {
    let mut key = Vec::with_capacity(token.len() + 8);
    key.extend_from_slice(&seed.to_le_bytes());
    key.extend_from_slice(token.as_bytes());
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(&key));
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

/// Deterministic random-projection encoder: the L2-normalized sum of
/// per-token unit vectors. Empty text maps to the zero vector.
pub fn toy_encode<T: Scalar>(text: &str, dim: usize, seed: u64) -> Vec<T> {
    toy_encode_tokens(&Tokenizer::default().tokenize(text), dim, seed)
}

pub fn toy_encode_tokens<T: Scalar, S: AsRef<str>>(tokens: &[S], dim: usize, seed: u64) -> Vec<T> {
    assert!(dim >= 1, "toy_encode requires dim >= 1");
    let mut acc = vec![0.0f64; dim];
    for t in tokens {
        for (a, x) in acc.iter_mut().zip(token_vector(t.as_ref(), dim, seed)) {
            *a += x;
        }
    }
    let n = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        acc.iter_mut().for_each(|x| *x /= n);
    }
    acc.into_iter().map(T::narrow).collect()
}
