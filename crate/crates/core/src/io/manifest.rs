//! JSON dataset manifests.
//!
//! A manifest lists the vocabulary, the seen pairs, the target pairs (closed
//! world only), and one record per sample pointing into a feature store.
//! Primitive names are normalised on load: trimmed, lowercased, and inner
//! whitespace replaced by `_`, so `"Dress Shoes"` and `"dress_shoes"` name the
//! same object.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::space::{CompositionSpace, Dataset, Pair, Sample, Split, Vocabulary, WorldMode};

pub const FORMAT: &str = "compcos-manifest";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum ModeTag {
    Open,
    Closed,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestDoc {
    format: String,
    version: u32,
    mode: ModeTag,
    states: Vec<String>,
    objects: Vec<String>,
    seen_pairs: Vec<(String, String)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    target_pairs: Option<Vec<(String, String)>>,
    samples: Vec<SampleDoc>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleDoc {
    feature_row: usize,
    state: String,
    object: String,
    split: Split,
}

pub fn normalize_name(name: &str) -> String {
    name.split_whitespace().collect::<Vec<_>>().join("_").to_lowercase()
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<(CompositionSpace, Dataset)> {
    let path = path.as_ref();
    parse_manifest(&super::read_text(path)?, path)
}

/// Parses manifest text; `path` is only used in error messages.
pub fn parse_manifest(text: &str, path: &Path) -> Result<(CompositionSpace, Dataset)> {
    let doc: ManifestDoc = serde_json::from_str(text).map_err(|e| {
        Error::parse(path, format!("line {}, column {}", e.line(), e.column()), e.to_string())
    })?;
    if doc.format != FORMAT {
        return Err(Error::parse(path, "field `format`", format!("expected \"{FORMAT}\", found {:?}", doc.format)));
    }
    if doc.version != VERSION {
        return Err(Error::Version {
            found: doc.version,
            expected: VERSION,
        });
    }
    let in_file = |e: Error| e.context(path.display().to_string());

    let vocab = Vocabulary::new(
        doc.states.iter().map(|s| normalize_name(s)),
        doc.objects.iter().map(|o| normalize_name(o)),
    )
    .map_err(in_file)?;
    let resolve = |s: &str, o: &str| -> Result<Pair> {
        Ok(Pair::new(
            vocab.state_index(&normalize_name(s))?,
            vocab.object_index(&normalize_name(o))?,
        ))
    };
    let resolve_all = |pairs: &[(String, String)]| -> Result<Vec<Pair>> {
        pairs.iter().map(|(s, o)| resolve(s, o)).collect()
    };

    let seen = resolve_all(&doc.seen_pairs).map_err(|e| in_file(e.context("seen_pairs")))?;
    let mode = match (doc.mode, &doc.target_pairs) {
        (ModeTag::Open, None) => WorldMode::OpenWorld,
        (ModeTag::Open, Some(_)) => {
            return Err(Error::parse(path, "field `target_pairs`", "only allowed with mode \"closed\""));
        }
        (ModeTag::Closed, _) => WorldMode::ClosedWorld,
    };
    let target = match &doc.target_pairs {
        Some(t) => Some(resolve_all(t).map_err(|e| in_file(e.context("target_pairs")))?),
        None => None,
    };

    let samples = doc
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            Ok(Sample {
                feature_row: s.feature_row,
                pair: resolve(&s.state, &s.object).map_err(|e| in_file(e.context(format!("sample {i}"))))?,
                split: s.split,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let space = CompositionSpace::from_indices(vocab, seen, target, mode).map_err(in_file)?;
    let dataset = Dataset::new(samples);
    let violations = dataset.validate(&space, usize::MAX);
    if let Some(v) = violations.first() {
        return Err(in_file(Error::Validation(format!(
            "{} violation(s), first: {v}",
            violations.len()
        ))));
    }
    Ok((space, dataset))
}

/// Canonical manifest text: pretty JSON with a trailing newline, pairs in
/// space order, samples in dataset order.
pub fn manifest_to_string(space: &CompositionSpace, dataset: &Dataset) -> Result<String> {
    let vocab = space.vocab();
    let names = |p: &Pair| -> Result<(String, String)> {
        let s = vocab.states().get(p.state).ok_or(Error::IndexOutOfRange {
            index: p.state,
            len: vocab.n_states(),
        })?;
        let o = vocab.objects().get(p.object).ok_or(Error::IndexOutOfRange {
            index: p.object,
            len: vocab.n_objects(),
        })?;
        Ok((s.clone(), o.clone()))
    };
    let doc = ManifestDoc {
        format: FORMAT.into(),
        version: VERSION,
        mode: match space.mode() {
            WorldMode::OpenWorld => ModeTag::Open,
            WorldMode::ClosedWorld => ModeTag::Closed,
        },
        states: vocab.states().to_vec(),
        objects: vocab.objects().to_vec(),
        seen_pairs: space.seen_pairs().map(|p| names(&p)).collect::<Result<_>>()?,
        target_pairs: match space.mode() {
            WorldMode::OpenWorld => None,
            WorldMode::ClosedWorld => Some(space.target().iter().map(names).collect::<Result<_>>()?),
        },
        samples: dataset
            .samples
            .iter()
            .map(|s| {
                let (state, object) = names(&s.pair)?;
                Ok(SampleDoc {
                    feature_row: s.feature_row,
                    state,
                    object,
                    split: s.split,
                })
            })
            .collect::<Result<_>>()?,
    };
    let mut text = serde_json::to_string_pretty(&doc).map_err(|e| Error::Validation(e.to_string()))?;
    text.push('\n');
    Ok(text)
}

pub fn save_manifest(path: impl AsRef<Path>, space: &CompositionSpace, dataset: &Dataset) -> Result<()> {
    super::write_atomic(path.as_ref(), manifest_to_string(space, dataset)?.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
  "format": "compcos-manifest",
  "version": 1,
  "mode": "open",
  "states": [
    "wet",
    "dry"
  ],
  "objects": [
    "cat",
    "dress_shoes"
  ],
  "seen_pairs": [
    [
      "wet",
      "cat"
    ],
    [
      "dry",
      "dress_shoes"
    ]
  ],
  "samples": [
    {
      "feature_row": 0,
      "state": "wet",
      "object": "cat",
      "split": "train"
    },
    {
      "feature_row": 1,
      "state": "wet",
      "object": "dress_shoes",
      "split": "test"
    }
  ]
}
"#;

    fn p() -> &'static Path {
        Path::new("m.json")
    }

    #[test]
    fn minimal_round_trip_is_byte_identical() {
        let (space, data) = parse_manifest(MINIMAL, p()).unwrap();
        assert_eq!(space.len(), 4);
        assert_eq!(data.samples.len(), 2);
        assert_eq!(manifest_to_string(&space, &data).unwrap(), MINIMAL);
    }

    #[test]
    fn names_are_normalised() {
        let text = MINIMAL.replace("\"dress_shoes\"\n  ]", "\"Dress  Shoes \"\n  ]");
        let (space, _) = parse_manifest(&text, p()).unwrap();
        assert_eq!(space.vocab().objects()[1], "dress_shoes");
        assert_eq!(normalize_name(" Ancient  Building"), "ancient_building");
    }

    #[test]
    fn train_sample_on_unseen_pair_is_reported() {
        let text = MINIMAL.replace("\"split\": \"test\"", "\"split\": \"train\"");
        let err = parse_manifest(&text, p()).unwrap_err().to_string();
        assert!(err.contains("sample 1: train-label-unseen"), "{err}");
    }

    #[test]
    fn syntax_errors_carry_a_line() {
        let text = &MINIMAL[..MINIMAL.len() / 2];
        match parse_manifest(text, p()) {
            Err(Error::Parse { position, .. }) => assert!(position.starts_with("line ")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_sample_primitive() {
        let text = MINIMAL.replace("\"object\": \"cat\"", "\"object\": \"dog\"");
        let err = parse_manifest(&text, p()).unwrap_err().to_string();
        assert!(err.contains("sample 0") && err.contains("dog"), "{err}");
    }

    #[test]
    fn version_mismatch() {
        let text = MINIMAL.replace("\"version\": 1", "\"version\": 2");
        assert!(matches!(parse_manifest(&text, p()), Err(Error::Version { found: 2, .. })));
    }

    #[test]
    fn closed_manifest_keeps_its_target() {
        let text = MINIMAL
            .replace("\"mode\": \"open\"", "\"mode\": \"closed\"")
            .replace(
                "  \"samples\"",
                "  \"target_pairs\": [\n    [\n      \"wet\",\n      \"cat\"\n    ],\n    [\n      \"wet\",\n      \"dress_shoes\"\n    ],\n    [\n      \"dry\",\n      \"dress_shoes\"\n    ]\n  ],\n  \"samples\"",
            );
        let (space, data) = parse_manifest(&text, p()).unwrap();
        assert_eq!(space.mode(), WorldMode::ClosedWorld);
        assert_eq!(space.len(), 3);
        assert_eq!(manifest_to_string(&space, &data).unwrap(), text);
    }
}
