//! Feasibility ranking reports and JSON report output.
//!
//! The ranking is a TSV sorted by feasibility, highest first (ties in target
//! order), preceded by `#` comment lines naming the mixing rule and epoch:
//!
//! ```text
//! # mixing avg
//! # epoch 12
//! state  object  seen  rho  rho_state  rho_obj
//! wet    cat     1     1    0.93       NA
//! ```
//! Floats are written in shortest round-trip form and `NA` marks a branch
//! with empty support.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::feasibility::{FeasibilityTable, Mixing};
use crate::space::CompositionSpace;

const HEADER: &str = "state\tobject\tseen\trho\trho_state\trho_obj";

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_owned(), |x| x.to_string())
}

pub fn feasibility_report(feas: &FeasibilityTable, space: &CompositionSpace) -> Result<String> {
    if feas.len() != space.len() {
        return Err(Error::LengthMismatch {
            expected: space.len(),
            actual: feas.len(),
        });
    }
    let mut order: Vec<usize> = (0..feas.len()).collect();
    order.sort_by(|&a, &b| feas.rho[b].total_cmp(&feas.rho[a]).then(a.cmp(&b)));
    let mut out = format!("# mixing {}\n# epoch {}\n{HEADER}\n", feas.mixing, feas.epoch_tag);
    for i in order {
        let (s, o) = space.composition_names(i)?;
        writeln!(
            out,
            "{s}\t{o}\t{}\t{}\t{}\t{}",
            u8::from(space.is_seen(i)),
            feas.rho[i],
            fmt_opt(feas.rho_state[i]),
            fmt_opt(feas.rho_obj[i])
        )
        .expect("writing to a string");
    }
    Ok(out)
}

pub fn save_feasibility_report(path: impl AsRef<Path>, feas: &FeasibilityTable, space: &CompositionSpace) -> Result<()> {
    super::write_atomic(path.as_ref(), feasibility_report(feas, space)?.as_bytes())
}

/// Reads a ranking back into a table indexed by `space`. Every target
/// composition must be listed exactly once; the seen column must agree with
/// the space.
pub fn parse_feasibility_report(text: &str, path: &Path, space: &CompositionSpace) -> Result<FeasibilityTable> {
    let err = |line: usize, msg: String| Error::parse(path, format!("line {line}"), msg);
    let mut mixing = Mixing::default();
    let mut epoch_tag = 0;
    let mut rho = vec![None; space.len()];
    let mut rho_state = vec![None; space.len()];
    let mut rho_obj = vec![None; space.len()];
    let mut header_seen = false;
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if let Some(comment) = line.strip_prefix('#') {
            let mut kv = comment.split_whitespace();
            match (kv.next(), kv.next()) {
                (Some("mixing"), Some(v)) => mixing = v.parse().map_err(|e: Error| err(line_no, e.to_string()))?,
                (Some("epoch"), Some(v)) => {
                    epoch_tag = v.parse().map_err(|_| err(line_no, format!("bad epoch `{v}`")))?
                }
                _ => {}
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        if !header_seen {
            if line != HEADER {
                return Err(err(line_no, "missing column header".into()));
            }
            header_seen = true;
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [s, o, seen, r, rs, ro] = fields[..] else {
            return Err(err(line_no, format!("expected 6 fields, found {}", fields.len())));
        };
        let idx = space
            .composition_index(s, o)
            .map_err(|e| err(line_no, e.to_string()))?;
        let num = |f: &str| -> Result<f64> {
            f.parse::<f64>()
                .ok()
                .filter(|v| (-1.0..=1.0).contains(v))
                .ok_or_else(|| err(line_no, format!("bad feasibility value `{f}`")))
        };
        let opt = |f: &str| -> Result<Option<f64>> { if f == "NA" { Ok(None) } else { num(f).map(Some) } };
        if (seen == "1") != space.is_seen(idx) || !(seen == "0" || seen == "1") {
            return Err(err(line_no, format!("seen flag `{seen}` disagrees with the manifest")));
        }
        if rho[idx].replace(num(r)?).is_some() {
            return Err(err(line_no, format!("({s}, {o}) listed twice")));
        }
        rho_state[idx] = opt(rs)?;
        rho_obj[idx] = opt(ro)?;
    }
    if let Some(missing) = rho.iter().position(Option::is_none) {
        let (s, o) = space.composition_names(missing)?;
        return Err(Error::parse(path, "end of file", format!("({s}, {o}) not listed")));
    }
    Ok(FeasibilityTable {
        rho: rho.into_iter().map(|r| r.expect("checked above")).collect(),
        rho_state,
        rho_obj,
        mixing,
        epoch_tag,
    })
}

pub fn load_feasibility_report(path: impl AsRef<Path>, space: &CompositionSpace) -> Result<FeasibilityTable> {
    let path = path.as_ref();
    parse_feasibility_report(&super::read_text(path)?, path, space)
}

/// Pretty JSON with a trailing newline.
pub fn json_string<T: Serialize>(value: &T) -> Result<String> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Validation(e.to_string()))?;
    text.push('\n');
    Ok(text)
}

pub fn save_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    super::write_atomic(path.as_ref(), json_string(value)?.as_bytes())
}
