//! Pretrained-embedding text files: a `count dim` header line, then one
//! `token v1 … v_dim` row per vector.

use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::Vocab;
use crate::{CoreError, Result};

#[derive(Clone, Debug)]
pub struct PretrainedEmbeddings {
    /// |vocab| × dim, row-major, indexed by vocab id.
    pub matrix: Vec<f64>,
    pub dim: usize,
    /// Fraction of vocab ids whose row came from the file.
    pub coverage: f64,
}

/// Load vectors for every vocab token found in the file. Missing tokens and
/// the reserved ids get N(0, 0.02) rows drawn from `seed`, in id order.
/// Covered rows are exactly the parsed file values.
pub fn load_pretrained_embeddings(path: &Path, vocab: &Vocab, seed: u64) -> Result<PretrainedEmbeddings> {
    let file = std::fs::File::open(path)
        .map_err(|e| CoreError::io(format!("cannot open embeddings {}", path.display()), e))?;
    let display = path.display().to_string();
    let mut lines = BufReader::new(file).lines().enumerate();

    let (_, header) = lines.next().ok_or_else(|| CoreError::DataFormat {
        path: display.clone(),
        line: 1,
        msg: "empty file, expected `count dim` header".into(),
    })?;
    let header = header.map_err(|e| CoreError::io("reading embeddings header".to_string(), e))?;
    let mut parts = header.split_whitespace();
    let (declared, dim) = match (
        parts.next().and_then(|s| s.parse::<usize>().ok()),
        parts.next().and_then(|s| s.parse::<usize>().ok()),
        parts.next(),
    ) {
        (Some(count), Some(dim), None) if dim > 0 => (count, dim),
        _ => {
            return Err(CoreError::DataFormat {
                path: display,
                line: 1,
                msg: format!("malformed header {header:?}, expected two integers `count dim`"),
            })
        }
    };

    let mut covered: Vec<Option<Vec<f64>>> = vec![None; vocab.len()];
    let mut rows = 0usize;
    for (idx, line) in lines {
        let line_no = idx + 1;
        let line = line.map_err(|e| CoreError::io("reading embeddings row".to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        rows += 1;
        let mut fields = line.split_whitespace();
        let token = fields.next().expect("non-empty line has a first field");
        let values: Vec<f64> = fields
            .map(|f| {
                f.parse::<f64>().map_err(|e| CoreError::DataFormat {
                    path: display.clone(),
                    line: line_no,
                    msg: format!("bad number {f:?}: {e}"),
                })
            })
            .collect::<Result<_>>()?;
        if values.len() != dim {
            return Err(CoreError::DataFormat {
                path: display.clone(),
                line: line_no,
                msg: format!("row has {} values, header declares {dim}", values.len()),
            });
        }
        if let Some(id) = vocab.id(token) {
            // reserved ids keep their random init even if the file has them
            if !Vocab::is_reserved(id) && covered[id].is_none() {
                covered[id] = Some(values);
            }
        }
    }
    if rows != declared {
        log::warn!(
            "{display}: header declares {declared} rows but the file has {rows}; continuing"
        );
    }

    let hits = covered.iter().filter(|c| c.is_some()).count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0, 0.02).expect("valid std");
    let mut matrix = Vec::with_capacity(vocab.len() * dim);
    for row in covered {
        match row {
            Some(values) => matrix.extend_from_slice(&values),
            None => matrix.extend((0..dim).map(|_| dist.sample(&mut rng))),
        }
    }
    Ok(PretrainedEmbeddings {
        matrix,
        dim,
        coverage: hits as f64 / vocab.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_vocab, Example};
    use std::io::Write;

    fn vocab_over(text: &str) -> Vocab {
        build_vocab(&[Example { text: text.into(), label: 0 }], 1).unwrap()
    }

    #[test]
    fn header_parses_count_then_dim() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "365076 300").unwrap();
        for i in 0..2 {
            let vals: Vec<String> = (0..300).map(|j| format!("{}.0", i + j)).collect();
            writeln!(f, "t{i} {}", vals.join(" ")).unwrap();
        }
        let vocab = vocab_over("ab");
        let emb = load_pretrained_embeddings(f.path(), &vocab, 0).unwrap();
        assert_eq!(emb.dim, 300);
        assert_eq!(emb.matrix.len(), vocab.len() * 300);
    }

    #[test]
    fn no_overlap_means_zero_coverage_and_random_rows() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "2 4").unwrap();
        writeln!(f, "x 1 2 3 4").unwrap();
        writeln!(f, "y 5 6 7 8").unwrap();
        let vocab = vocab_over("ab");
        let emb = load_pretrained_embeddings(f.path(), &vocab, 3).unwrap();
        assert_eq!(emb.coverage, 0.0);
        assert!(emb.matrix.iter().any(|&v| v != 0.0));
        // same seed reproduces the random fill bitwise
        let emb2 = load_pretrained_embeddings(f.path(), &vocab, 3).unwrap();
        assert_eq!(emb.matrix, emb2.matrix);
    }

    #[test]
    fn partial_coverage_copies_rows_exactly() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "2 3").unwrap();
        writeln!(f, "a 0.125 -2.5 7.75").unwrap();
        writeln!(f, "b 1.5 0.0625 -3.25").unwrap();
        let vocab = vocab_over("ab"); // 4 reserved + a + b = 6 entries
        let emb = load_pretrained_embeddings(f.path(), &vocab, 1).unwrap();
        assert!((emb.coverage - 2.0 / 6.0).abs() < 1e-15);
        let a = vocab.id("a").unwrap();
        assert_eq!(&emb.matrix[a * 3..a * 3 + 3], &[0.125, -2.5, 7.75]);
        let b = vocab.id("b").unwrap();
        assert_eq!(&emb.matrix[b * 3..b * 3 + 3], &[1.5, 0.0625, -3.25]);
    }

    #[test]
    fn reserved_tokens_never_take_file_rows() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "1 2").unwrap();
        writeln!(f, "[PAD] 9.0 9.0").unwrap();
        let vocab = vocab_over("a");
        let emb = load_pretrained_embeddings(f.path(), &vocab, 5).unwrap();
        assert_eq!(emb.coverage, 0.0);
        assert_ne!(&emb.matrix[0..2], &[9.0, 9.0]);
    }

    #[test]
    fn malformed_header_is_an_error() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "not a header").unwrap();
        let vocab = vocab_over("a");
        let err = load_pretrained_embeddings(f.path(), &vocab, 0).unwrap_err().to_string();
        assert!(err.contains("header"), "{err}");
    }

    #[test]
    fn wrong_column_count_reports_the_row() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "2 3").unwrap();
        writeln!(f, "a 1 2 3").unwrap();
        writeln!(f, "b 1 2").unwrap();
        let vocab = vocab_over("ab");
        let err = load_pretrained_embeddings(f.path(), &vocab, 0).unwrap_err().to_string();
        assert!(err.contains(":3:"), "{err}");
    }
}
