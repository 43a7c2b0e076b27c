//! Language embedding tables.
//!
//! File layout, whitespace separated:
//!
//! ```text
//! N_V D_V
//! v[0][0] v[0][1] … v[0][D_V-1]
//! …
//! v[N_V-1][0] …
//! ```
//!
//! Any whitespace may separate values; one row per line is conventional.

use std::fmt::Write as _;
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Matrix;

/// Rows of the synthetic table standing in for the tokens "stay" and "still".
pub const SYNTHETIC_STAY_STILL: [usize; 2] = [0, 1];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum VocabSource {
    Synthetic { seed: u64, rows: usize, dim: usize },
    File { hash: String },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    pub matrix: Matrix,
    /// Rows averaged to initialise the immobility embedding.
    pub stay_still_rows: Vec<usize>,
    pub source: VocabSource,
}

impl Vocabulary {
    /// Seeded Gaussian table with rows of roughly unit norm.
    pub fn synthetic(seed: u64, rows: usize, dim: usize) -> Result<Self> {
        if rows < 2 || dim == 0 {
            return Err(Error::invalid(format!("vocabulary {rows} x {dim} is too small")));
        }
        let mut rng = crate::derive_rng(seed, &["vocabulary"]);
        let normal = Normal::new(0.0, 1.0 / (dim as f64).sqrt()).expect("finite");
        let data = (0..rows * dim).map(|_| normal.sample(&mut rng)).collect();
        let v = Self {
            matrix: Matrix::from_vec(rows, dim, data),
            stay_still_rows: SYNTHETIC_STAY_STILL.to_vec(),
            source: VocabSource::Synthetic { seed, rows, dim },
        };
        v.validate()?;
        Ok(v)
    }

    pub fn from_matrix(matrix: Matrix, stay_still_rows: Vec<usize>) -> Result<Self> {
        let v = Self {
            source: VocabSource::File {
                hash: crate::content_hash(&matrix),
            },
            matrix,
            stay_still_rows,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn rows(&self) -> usize {
        self.matrix.rows()
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn validate(&self) -> Result<()> {
        if !self.matrix.is_finite() {
            return Err(Error::invalid("vocabulary has non-finite values"));
        }
        if let Some(r) = (0..self.rows()).find(|&r| self.matrix.row(r).iter().all(|&x| x == 0.0)) {
            return Err(Error::invalid(format!("vocabulary row {r} is all zero")));
        }
        if self.stay_still_rows.is_empty() || self.stay_still_rows.iter().any(|&r| r >= self.rows()) {
            return Err(Error::invalid("stay/still rows missing or out of range"));
        }
        Ok(())
    }

    /// Mean of the stay/still rows.
    pub fn stay_still(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        for &r in &self.stay_still_rows {
            for (o, x) in out.iter_mut().zip(self.matrix.row(r)) {
                *o += x / self.stay_still_rows.len() as f64;
            }
        }
        out
    }

    pub fn hash(&self) -> String {
        crate::content_hash(&self.matrix)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{} {}\n", self.rows(), self.dim());
        for row in self.matrix.iter_rows() {
            let line: Vec<String> = row.iter().map(|x| format!("{x:?}")).collect();
            writeln!(s, "{}", line.join(" ")).expect("string write");
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn parse(text: &str, path: &Path, stay_still_rows: Vec<usize>) -> Result<Self> {
        let err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut tokens = text
            .lines()
            .enumerate()
            .flat_map(|(i, l)| l.split_whitespace().map(move |t| (i + 1, t)));
        let mut header = |what: &str| -> Result<usize> {
            let (line, t) = tokens
                .next()
                .ok_or_else(|| err(1, format!("missing {what} in header")))?;
            t.parse()
                .map_err(|_| err(line, format!("{what} {t:?} is not an integer")))
        };
        let rows = header("N_V")?;
        let dim = header("D_V")?;
        let mut data = Vec::with_capacity(rows * dim);
        for (line, t) in tokens {
            let x: f64 = t
                .parse()
                .map_err(|_| err(line, format!("value {t:?} is not a number")))?;
            data.push(x);
        }
        if data.len() != rows * dim {
            return Err(err(
                text.lines().count(),
                format!("expected {} values, found {}", rows * dim, data.len()),
            ));
        }
        Self::from_matrix(Matrix::from_vec(rows, dim, data), stay_still_rows)
    }

    pub fn load(path: &Path, stay_still_rows: Vec<usize>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?, path, stay_still_rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_seeded() {
        let a = Vocabulary::synthetic(4, 16, 8).unwrap();
        let b = Vocabulary::synthetic(4, 16, 8).unwrap();
        let c = Vocabulary::synthetic(5, 16, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.matrix, c.matrix);
    }

    #[test]
    fn text_round_trip_is_exact() {
        let a = Vocabulary::synthetic(1, 5, 3).unwrap();
        let b = Vocabulary::parse(&a.to_text(), Path::new("v.txt"), vec![0, 1]).unwrap();
        assert_eq!(a.matrix, b.matrix);
        assert!(matches!(b.source, VocabSource::File { .. }));
    }

    #[test]
    fn rejects_zero_row_and_short_body() {
        let zero = "2 2\n0 0\n1 1\n";
        assert!(Vocabulary::parse(zero, Path::new("v"), vec![1]).is_err());
        let short = "2 2\n1 0\n1\n";
        let err = Vocabulary::parse(short, Path::new("v"), vec![0]).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
    }

    #[test]
    fn stay_still_is_row_mean() {
        let v = Vocabulary::parse("3 2\n1 2\n3 4\n9 9\n", Path::new("v"), vec![0, 1]).unwrap();
        assert_eq!(v.stay_still(), vec![2.0, 3.0]);
    }
}
