//! `CZSK` checkpoints: the feature-store container idea with a section table.
//!
//! ```text
//! magic "CZSK" | version u32 | n_sections u32
//! n_sections x { name_len u32 | name utf-8 | rows u64 | cols u64 | dtype u32 | offset u64 }
//! section data, in table order
//! ```
//! `dtype` 1 is little-endian `f64`, 2 is little-endian `u64`; offsets are
//! absolute. Vectors are stored as `1 x len` sections.

use std::path::Path;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::binary::{checked_size, Reader};
use crate::embed::{ModelParams, PrimitiveTable, VisualEmbedder, TENSOR_NAMES};
use crate::error::{Error, Result};
use crate::optim::AdamState;
use crate::train::TrainState;

pub const MAGIC: &[u8; 4] = b"CZSK";
pub const VERSION: u32 = 1;
const DTYPE_F64: u32 = 1;
const DTYPE_U64: u32 = 2;

/// Training state plus the parameters selected on validation.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub state: TrainState,
    pub best: Option<ModelParams>,
    pub best_epoch: Option<usize>,
}

impl Checkpoint {
    /// Parameters to evaluate: the selected ones if present.
    pub fn params(&self) -> &ModelParams {
        self.best.as_ref().unwrap_or(&self.state.params)
    }
}

enum Data {
    F64(Vec<f64>),
    U64(Vec<u64>),
}

struct Section {
    name: String,
    rows: usize,
    cols: usize,
    data: Data,
}

fn shapes(params: &ModelParams) -> [(usize, usize); 9] {
    let v = &params.visual;
    let row = |n: usize| (1, n);
    [
        v.w1.dim(),
        row(v.b1.len()),
        row(v.ln_gain.len()),
        row(v.ln_shift.len()),
        v.w2.dim(),
        row(v.b2.len()),
        params.primitives.states.dim(),
        params.primitives.objects.dim(),
        params.projector.dim(),
    ]
}

fn param_sections(prefix: &str, params: &ModelParams, out: &mut Vec<Section>) {
    for ((name, t), (rows, cols)) in TENSOR_NAMES.iter().zip(params.tensors()).zip(shapes(params)) {
        out.push(Section {
            name: format!("{prefix}{name}"),
            rows,
            cols,
            data: Data::F64(t.to_vec()),
        });
    }
    out.push(Section {
        name: format!("{prefix}scalars"),
        rows: 1,
        cols: 2,
        data: Data::F64(vec![params.temperature, params.visual.dropout]),
    });
}

pub fn checkpoint_to_bytes(ckpt: &Checkpoint) -> Vec<u8> {
    let state = &ckpt.state;
    let mut sections = Vec::new();
    param_sections("", &state.params, &mut sections);
    for (kind, moments) in [("first", &state.adam.first), ("second", &state.adam.second)] {
        for ((name, m), (rows, cols)) in TENSOR_NAMES.iter().zip(moments).zip(shapes(&state.params)) {
            sections.push(Section {
                name: format!("adam.{kind}.{name}"),
                rows,
                cols,
                data: Data::F64(m.clone()),
            });
        }
    }
    if let Some(best) = &ckpt.best {
        param_sections("best.", best, &mut sections);
    }
    let seed = state.rng.get_seed();
    let word_pos = state.rng.get_word_pos();
    let mut meta = vec![
        state.epoch as u64,
        state.adam.step,
        ckpt.best_epoch.map_or(u64::MAX, |e| e as u64),
        state.rng.get_stream(),
        word_pos as u64,
        (word_pos >> 64) as u64,
    ];
    meta.extend(seed.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes"))));
    sections.push(Section {
        name: "meta".into(),
        rows: 1,
        cols: meta.len(),
        data: Data::U64(meta),
    });

    let table_len: usize = sections.iter().map(|s| 4 + s.name.len() + 8 + 8 + 4 + 8).sum();
    let mut offset = (12 + table_len) as u64;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(sections.len() as u32).to_le_bytes());
    for s in &sections {
        out.extend_from_slice(&(s.name.len() as u32).to_le_bytes());
        out.extend_from_slice(s.name.as_bytes());
        out.extend_from_slice(&(s.rows as u64).to_le_bytes());
        out.extend_from_slice(&(s.cols as u64).to_le_bytes());
        let dtype = match s.data {
            Data::F64(_) => DTYPE_F64,
            Data::U64(_) => DTYPE_U64,
        };
        out.extend_from_slice(&dtype.to_le_bytes());
        out.extend_from_slice(&offset.to_le_bytes());
        offset += (s.rows * s.cols * 8) as u64;
    }
    for s in &sections {
        match &s.data {
            Data::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Data::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
    out
}

struct Table<'a> {
    sections: Vec<Section>,
    path: &'a Path,
}

impl Table<'_> {
    fn take(&mut self, name: &str) -> Result<Section> {
        let i = self
            .sections
            .iter()
            .position(|s| s.name == name)
            .ok_or_else(|| Error::parse(self.path, format!("section `{name}`"), "missing"))?;
        Ok(self.sections.swap_remove(i))
    }

    fn f64s(&mut self, name: &str) -> Result<(usize, usize, Vec<f64>)> {
        let s = self.take(name)?;
        match s.data {
            Data::F64(v) => Ok((s.rows, s.cols, v)),
            Data::U64(_) => Err(Error::parse(self.path, format!("section `{name}`"), "expected f64 data")),
        }
    }

    fn matrix(&mut self, name: &str) -> Result<Array2<f64>> {
        let (rows, cols, v) = self.f64s(name)?;
        Ok(Array2::from_shape_vec((rows, cols), v).expect("section sizes are checked on read"))
    }

    fn vector(&mut self, name: &str) -> Result<Array1<f64>> {
        Ok(Array1::from(self.f64s(name)?.2))
    }

    fn params(&mut self, prefix: &str) -> Result<ModelParams> {
        let n = |t: &str| format!("{prefix}{t}");
        let (_, _, scalars) = self.f64s(&n("scalars"))?;
        let &[temperature, dropout] = scalars.as_slice() else {
            return Err(Error::parse(self.path, format!("section `{}`", n("scalars")), "expected 2 values"));
        };
        let visual = VisualEmbedder {
            w1: self.matrix(&n("visual.w1"))?,
            b1: self.vector(&n("visual.b1"))?,
            ln_gain: self.vector(&n("visual.ln_gain"))?,
            ln_shift: self.vector(&n("visual.ln_shift"))?,
            w2: self.matrix(&n("visual.w2"))?,
            b2: self.vector(&n("visual.b2"))?,
            dropout,
        };
        let primitives = PrimitiveTable::new(
            self.matrix(&n("primitives.states"))?,
            self.matrix(&n("primitives.objects"))?,
        )?;
        let params = ModelParams {
            visual,
            primitives,
            projector: self.matrix(&n("projector"))?,
            temperature,
        };
        params.check()?;
        Ok(params)
    }
}

pub fn checkpoint_from_bytes(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes, path);
    r.magic(MAGIC)?;
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    let n = r.u32("section count")? as usize;
    let mut entries = Vec::new();
    for _ in 0..n {
        let len = r.u32("section name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "section name")?)
            .map_err(|_| r.error("section name is not utf-8"))?
            .to_owned();
        let rows = r.count("section rows")?;
        let cols = r.count("section cols")?;
        let dtype = r.u32("section dtype")?;
        let offset = r.count("section offset")?;
        if dtype != DTYPE_F64 && dtype != DTYPE_U64 {
            return Err(r.error(format!("section `{name}`: unsupported dtype {dtype}")));
        }
        entries.push((name, rows, cols, dtype, offset));
    }
    let mut sections = Vec::with_capacity(n);
    let mut end = r.pos();
    for (name, rows, cols, dtype, offset) in entries {
        let size = checked_size(&r, rows, cols, 8)?;
        r.seek(offset)?;
        let raw = r.take(size, &format!("section `{name}`"))?;
        end = end.max(r.pos());
        let words = raw.chunks_exact(8).map(|c| c.try_into().expect("8 bytes"));
        let data = if dtype == DTYPE_F64 {
            Data::F64(words.map(f64::from_le_bytes).collect())
        } else {
            Data::U64(words.map(u64::from_le_bytes).collect())
        };
        sections.push(Section { name, rows, cols, data });
    }
    r.seek(end)?;
    r.expect_end()?;

    let mut table = Table { sections, path };
    let in_file = |e: Error| e.context(path.display().to_string());
    let params = table.params("").map_err(in_file)?;
    let best = if table.sections.iter().any(|s| s.name.starts_with("best.")) {
        Some(table.params("best.").map_err(in_file)?)
    } else {
        None
    };
    let mut moments = |kind: &str| -> Result<Vec<Vec<f64>>> {
        TENSOR_NAMES
            .iter()
            .zip(params.tensors())
            .map(|(name, t)| {
                let (_, _, v) = table.f64s(&format!("adam.{kind}.{name}"))?;
                if v.len() != t.len() {
                    return Err(Error::ShapeMismatch(format!("adam.{kind}.{name}")));
                }
                Ok(v)
            })
            .collect()
    };
    let first = moments("first").map_err(in_file)?;
    let second = moments("second").map_err(in_file)?;
    let meta = match table.take("meta")?.data {
        Data::U64(v) if v.len() == 10 => v,
        _ => return Err(Error::parse(path, "section `meta`", "expected 10 u64 values")),
    };

    let mut seed = [0u8; 32];
    for (chunk, word) in seed.chunks_exact_mut(8).zip(&meta[6..10]) {
        chunk.copy_from_slice(&word.to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(meta[3]);
    rng.set_word_pos(meta[4] as u128 | (meta[5] as u128) << 64);
    Ok(Checkpoint {
        state: TrainState {
            params,
            adam: AdamState {
                step: meta[1],
                first,
                second,
            },
            epoch: meta[0] as usize,
            feasibility: None,
            rng,
        },
        best,
        best_epoch: (meta[2] != u64::MAX).then_some(meta[2] as usize),
    })
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    super::write_atomic(path.as_ref(), &checkpoint_to_bytes(ckpt))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    checkpoint_from_bytes(&super::read_bytes(path)?, path)
}
