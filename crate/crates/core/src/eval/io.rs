//! Embedding and pair-protocol files.
//!
//! Embedding file: magic `LVEM`, `u32` version, `u32` count, `u32` dim, then
//! `count×dim` little-endian `f32`, then `count` `u32` labels.

use std::path::Path;

use super::metrics::VerificationPair;
use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const EMBEDDING_MAGIC: &[u8; 4] = b"LVEM";
pub const EMBEDDING_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Embeddings {
    pub dim: usize,
    /// Row-major `count×dim`.
    pub values: Vec<f32>,
    pub labels: Vec<u32>,
}

impl Embeddings {
    pub fn from_tensor(features: &Tensor, labels: &[usize]) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::Shape {
                op: "embeddings",
                lhs: features.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let labels = labels
            .iter()
            .map(|&y| u32::try_from(y).map_err(|_| Error::Format(format!("label {y} does not fit u32"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Embeddings {
            dim: features.cols(),
            values: features.data().iter().map(|&v| v as f32).collect(),
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::matrix(self.len(), self.dim, self.values.iter().map(|&v| v as f64).collect())
    }

    pub fn labels_usize(&self) -> Vec<usize> {
        self.labels.iter().map(|&y| y as usize).collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(EMBEDDING_MAGIC);
        w.u32(EMBEDDING_VERSION);
        w.u32(self.len() as u32);
        w.u32(self.dim as u32);
        for &v in &self.values {
            w.f32(v);
        }
        for &y in &self.labels {
            w.u32(y);
        }
        w.into_inner()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != EMBEDDING_MAGIC {
            return Err(Error::Format("not an embedding file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != EMBEDDING_VERSION {
            return Err(Error::Format(format!("unsupported embedding version {version}")));
        }
        let count = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let n = count
            .checked_mul(dim)
            .filter(|&n| n.checked_mul(4).is_some_and(|b| b <= bytes.len()))
            .ok_or_else(|| Error::Format("embedding size exceeds file".into()))?;
        let values = (0..n).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
        let labels = (0..count).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        r.finish("embeddings")?;
        Ok(Embeddings { dim, values, labels })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

pub fn parse_pairs(text: &str) -> Result<Vec<VerificationPair>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || (n == 0 && line.starts_with("id_a")) {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let bad = || Error::Format(format!("pairs line {}: `{line}`", n + 1));
        let [a, b, m] = fields.as_slice() else {
            return Err(bad());
        };
        let is_match = match *m {
            "1" | "true" => true,
            "0" | "false" => false,
            _ => return Err(bad()),
        };
        out.push(VerificationPair {
            a: a.parse().map_err(|_| bad())?,
            b: b.parse().map_err(|_| bad())?,
            is_match,
        });
    }
    Ok(out)
}

pub fn pairs_to_csv(pairs: &[VerificationPair]) -> String {
    let mut out = String::from("id_a,id_b,is_match\n");
    for p in pairs {
        out.push_str(&format!("{},{},{}\n", p.a, p.b, p.is_match as u8));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embedding_round_trip() {
        let t = Tensor::from_rows(&[[0.25, -1.5], [3.0, 1e-3]]).unwrap();
        let e = Embeddings::from_tensor(&t, &[4, 7]).unwrap();
        let bytes = e.encode();
        assert_eq!(&bytes[..4], b"LVEM");
        assert_eq!(bytes.len(), 16 + 2 * 2 * 4 + 2 * 4);
        let back = Embeddings::decode(&bytes).unwrap();
        assert_eq!(back, e);
        assert!(Embeddings::decode(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn pairs_round_trip() {
        let pairs = vec![
            VerificationPair {
                a: 0,
                b: 3,
                is_match: true,
            },
            VerificationPair {
                a: 2,
                b: 1,
                is_match: false,
            },
        ];
        assert_eq!(parse_pairs(&pairs_to_csv(&pairs)).unwrap(), pairs);
        assert!(parse_pairs("1,2").is_err());
        assert!(parse_pairs("1,2,maybe").is_err());
    }
}
