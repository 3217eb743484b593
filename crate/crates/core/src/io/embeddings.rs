//! Word-embedding text files (`token v1 v2 ... vD` per line).
//!
//! A primitive name is looked up as a whole token first. Failing that, it is
//! split on `_` and embedded as the mean of its token vectors, which is how
//! multi-word names such as `dress_shoes` are handled. An optional
//! `count dim` header line (word2vec text format) is skipped.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::embed::PrimitiveTable;
use crate::error::{Error, Result};
use crate::space::Vocabulary;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MissingPolicy {
    #[default]
    Error,
    /// Missing primitives get `N(0, 1/D)` rows drawn from this seed, in
    /// vocabulary order (states, then objects).
    RandomInit { seed: u64 },
}

struct EmbeddingFile<'a> {
    dim: usize,
    // token -> (line number, remaining fields)
    rows: HashMap<&'a str, (usize, &'a str)>,
}

fn index_file<'a>(text: &'a str, path: &Path) -> Result<EmbeddingFile<'a>> {
    let mut dim = None;
    let mut rows = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let mut fields = line.split_whitespace();
        let Some(token) = fields.next() else { continue };
        let rest = line[line.find(token).expect("token is in line") + token.len()..].trim();
        let width = rest.split_whitespace().count();
        if i == 0 && width == 1 && token.parse::<usize>().is_ok() && rest.parse::<usize>().is_ok() {
            continue;
        }
        if width == 0 {
            return Err(Error::parse(path, format!("line {line_no}"), format!("token `{token}` has no values")));
        }
        match dim {
            None => dim = Some(width),
            Some(d) if d != width => {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    actual: width,
                }
                .context(format!("{}: line {line_no}", path.display())));
            }
            _ => {}
        }
        if rows.insert(token, (line_no, rest)).is_some() {
            return Err(Error::parse(path, format!("line {line_no}"), format!("duplicate token `{token}`")));
        }
    }
    let dim = dim.ok_or_else(|| Error::parse(path, "line 1", "no embedding records"))?;
    Ok(EmbeddingFile { dim, rows })
}

impl EmbeddingFile<'_> {
    fn vector(&self, token: &str, path: &Path) -> Result<Option<Array1<f64>>> {
        let Some(&(line_no, rest)) = self.rows.get(token) else {
            return Ok(None);
        };
        let values = rest
            .split_whitespace()
            .enumerate()
            .map(|(j, f)| {
                f.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::parse(path, format!("line {line_no}, field {}", j + 2), format!("bad value `{f}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Some(Array1::from(values)))
    }

    /// Whole-token match, else the mean over `_`-separated tokens.
    fn lookup(&self, name: &str, path: &Path) -> Result<std::result::Result<Array1<f64>, String>> {
        if let Some(v) = self.vector(name, path)? {
            return Ok(Ok(v));
        }
        let parts: Vec<&str> = name.split('_').filter(|t| !t.is_empty()).collect();
        if parts.len() < 2 {
            return Ok(Err(name.to_owned()));
        }
        let mut sum = Array1::zeros(self.dim);
        for part in &parts {
            match self.vector(part, path)? {
                Some(v) => sum += &v,
                None => return Ok(Err((*part).to_owned())),
            }
        }
        Ok(Ok(sum / parts.len() as f64))
    }
}

pub fn load_embeddings(path: impl AsRef<Path>, vocab: &Vocabulary, policy: MissingPolicy) -> Result<PrimitiveTable> {
    let path = path.as_ref();
    parse_embeddings(&super::read_text(path)?, path, vocab, policy)
}

pub fn parse_embeddings(text: &str, path: &Path, vocab: &Vocabulary, policy: MissingPolicy) -> Result<PrimitiveTable> {
    let file = index_file(text, path)?;
    let dim = file.dim;
    let mut random = match policy {
        MissingPolicy::Error => None,
        MissingPolicy::RandomInit { seed } => Some((
            ChaCha8Rng::seed_from_u64(seed),
            Normal::new(0.0, 1.0 / (dim as f64).sqrt()).expect("positive scale"),
        )),
    };
    let mut table = |names: &[String]| -> Result<Array2<f64>> {
        let mut out = Array2::zeros((names.len(), dim));
        for (i, name) in names.iter().enumerate() {
            let row = match (file.lookup(name, path)?, random.as_mut()) {
                (Ok(v), _) => v,
                (Err(_), Some((rng, dist))) => Array1::from_shape_simple_fn(dim, || dist.sample(rng)),
                (Err(token), None) => {
                    return Err(Error::MissingToken(token).context(format!("{}: primitive `{name}`", path.display())))
                }
            };
            out.row_mut(i).assign(&row);
        }
        Ok(out)
    };
    let states = table(vocab.states())?;
    let objects = table(vocab.objects())?;
    PrimitiveTable::new(states, objects).map_err(|e| e.context(path.display().to_string()))
}

/// Text with one line per token; floats use the shortest representation that
/// reads back to the same value.
pub fn embeddings_to_string<'a>(rows: impl IntoIterator<Item = (&'a str, ArrayView1<'a, f64>)>) -> String {
    let mut out = String::new();
    for (token, v) in rows {
        out.push_str(token);
        for x in v {
            write!(out, " {x}").expect("writing to a string");
        }
        out.push('\n');
    }
    out
}

pub fn save_embeddings<'a>(path: impl AsRef<Path>, rows: impl IntoIterator<Item = (&'a str, ArrayView1<'a, f64>)>) -> Result<()> {
    super::write_atomic(path.as_ref(), embeddings_to_string(rows).as_bytes())
}
