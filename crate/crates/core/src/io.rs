//! Problem files, result reports and label images.
//!
//! Text problems are JSON documents:
//!
//! ```json
//! {"version": 1, "height": 1, "width": 2, "labels": 2, "strides": [1],
//!  "pairwise_mode": "tied", "scalar": "f64",
//!  "unary": [0, 1, 0, 0],
//!  "pairwise": {"h1": [0, 0, 0, 2], "v1": [0, 0, 0, 0]}}
//! ```
//!
//! `unary` is vertex-major, label-minor. Tied pairwise tables are keyed by
//! direction and stride (`h1`, `v1`, `h2`, ...), each an `L×L` row-major matrix
//! indexed `[source label][target label]`; tables for an axis too short for the
//! stride may be omitted. Dense pairwise data is one flat
//! array of `L×L` tables in canonical edge order. `scalar` is optional.
//!
//! Binary problems start with the magic `DDCR` and a little-endian `u32`
//! version, followed by `u32` fields `height, width, labels, stride_count,
//! strides..., pairwise_mode (0 tied, 1 dense), scalar_bytes (4 or 8)` and then
//! the unary and pairwise arrays as little-endian IEEE-754 values in the same
//! orders as the text format.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::model::{check_potentials, GridSpec, Labeling, Pairwise, Potentials};
use crate::scalar::{Scalar, ScalarWidth};
use crate::solver::{SolveConfig, SolveResult, Timings};

pub const FORMAT_VERSION: u32 = 1;
pub const MAGIC: &[u8; 4] = b"DDCR";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FileKind {
    Text,
    Binary,
}

impl FileKind {
    /// `.bin`/`.ddcr` extensions select binary, everything else text.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("bin") | Some("ddcr") => FileKind::Binary,
            _ => FileKind::Text,
        }
    }
}

fn format_err(path: &str, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_string(),
        message: message.into(),
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TextProblem {
    version: u32,
    height: usize,
    width: usize,
    labels: usize,
    strides: Vec<usize>,
    pairwise_mode: PairwiseMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scalar: Option<String>,
    unary: Vec<f64>,
    pairwise: Value,
}

#[derive(Serialize, Deserialize, Clone, Copy, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
enum PairwiseMode {
    Tied,
    Dense,
}

fn width_name(w: ScalarWidth) -> &'static str {
    match w {
        ScalarWidth::F32 => "f32",
        ScalarWidth::F64 => "f64",
    }
}

/// Serializes potentials as a text problem document.
pub fn to_text<T: Scalar>(p: &Potentials<T>) -> String {
    let g = &p.grid;
    let ll = g.num_labels * g.num_labels;
    let as_f64 = |v: &[T]| v.iter().map(|x| x.as_f64()).collect::<Vec<_>>();
    let (mode, pairwise) = match &p.pairwise {
        Pairwise::Tied(data) => {
            let mut map = serde_json::Map::new();
            for slot in 0..g.num_slots() {
                map.insert(
                    g.slot_key(slot),
                    serde_json::to_value(as_f64(&data[slot * ll..(slot + 1) * ll])).unwrap(),
                );
            }
            (PairwiseMode::Tied, Value::Object(map))
        }
        Pairwise::Dense(data) => (
            PairwiseMode::Dense,
            serde_json::to_value(as_f64(data)).unwrap(),
        ),
    };
    let doc = TextProblem {
        version: FORMAT_VERSION,
        height: g.height,
        width: g.width,
        labels: g.num_labels,
        strides: g.strides.clone(),
        pairwise_mode: mode,
        scalar: Some(width_name(T::WIDTH).to_string()),
        unary: as_f64(&p.unary),
        pairwise,
    };
    let mut s = serde_json::to_string_pretty(&doc).unwrap();
    s.push('\n');
    s
}

fn number_array(v: &Value, path: &str) -> Result<Vec<f64>> {
    let arr = v
        .as_array()
        .ok_or_else(|| format_err(path, "expected an array of numbers"))?;
    arr.iter()
        .enumerate()
        .map(|(k, x)| {
            x.as_f64()
                .ok_or_else(|| format_err(&format!("{path}[{k}]"), "expected a number"))
        })
        .collect()
}

/// Parses and validates a text problem. `origin` prefixes error paths.
pub fn from_text<T: Scalar>(text: &str, origin: &str) -> Result<Potentials<T>> {
    let doc: TextProblem = serde_json::from_str(text).map_err(|e| {
        format_err(
            origin,
            format!("line {} column {}: {}", e.line(), e.column(), e),
        )
    })?;
    if doc.version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(doc.version));
    }
    if let Some(s) = &doc.scalar {
        if s != "f32" && s != "f64" {
            return Err(format_err(
                &format!("{origin}: scalar"),
                format!("expected \"f32\" or \"f64\", found {s:?}"),
            ));
        }
    }
    let grid = GridSpec::new(doc.height, doc.width, doc.labels, &doc.strides);
    grid.validate()?;
    let ll = grid.num_labels * grid.num_labels;
    let cast = |v: Vec<f64>| v.into_iter().map(T::of).collect::<Vec<T>>();
    let pairwise = match doc.pairwise_mode {
        PairwiseMode::Dense => {
            Pairwise::Dense(cast(number_array(&doc.pairwise, &format!("{origin}: pairwise"))?))
        }
        PairwiseMode::Tied => {
            let map = doc.pairwise.as_object().ok_or_else(|| {
                format_err(
                    &format!("{origin}: pairwise"),
                    "expected an object keyed by direction and stride",
                )
            })?;
            let mut data = Vec::with_capacity(grid.num_slots() * ll);
            for slot in 0..grid.num_slots() {
                let key = grid.slot_key(slot);
                let path = format!("{origin}: pairwise.{key}");
                let stride = grid.strides[slot / 2];
                let extent = if slot % 2 == 0 { grid.width } else { grid.height };
                let table = match map.get(&key) {
                    Some(v) => number_array(v, &path)?,
                    // No edges run along this axis at this stride.
                    None if extent <= stride => vec![0.0; ll],
                    None => return Err(format_err(&path, "missing table")),
                };
                if table.len() != ll {
                    return Err(format_err(
                        &path,
                        format!("expected {ll} entries, found {}", table.len()),
                    ));
                }
                data.extend(cast(table));
            }
            if let Some(extra) = map.keys().find(|k| !(0..grid.num_slots()).any(|s| grid.slot_key(s) == **k)) {
                return Err(format_err(
                    &format!("{origin}: pairwise.{extra}"),
                    "no such direction and stride in this grid",
                ));
            }
            Pairwise::Tied(data)
        }
    };
    let p = Potentials {
        grid,
        unary: cast(doc.unary),
        pairwise,
    };
    check_potentials(&p)?;
    Ok(p)
}

/// Serializes potentials in the binary container.
pub fn to_binary<T: Scalar>(p: &Potentials<T>) -> Vec<u8> {
    let g = &p.grid;
    let mut out = Vec::with_capacity(
        32 + 4 * g.strides.len() + (p.unary.len() + p.pairwise.data().len()) * T::WIDTH.bytes(),
    );
    out.extend_from_slice(MAGIC);
    let put = |x: u32, out: &mut Vec<u8>| out.extend_from_slice(&x.to_le_bytes());
    put(FORMAT_VERSION, &mut out);
    put(g.height as u32, &mut out);
    put(g.width as u32, &mut out);
    put(g.num_labels as u32, &mut out);
    put(g.strides.len() as u32, &mut out);
    for &s in &g.strides {
        put(s as u32, &mut out);
    }
    put(u32::from(!p.pairwise.is_tied()), &mut out);
    put(T::WIDTH.bytes() as u32, &mut out);
    for &x in p.unary.iter().chain(p.pairwise.data()) {
        x.write_le(&mut out);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a str,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(format_err(
                self.origin,
                format!("byte offset {}: truncated while reading {what}", self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn fail(&self, at: usize, message: String) -> Error {
        format_err(self.origin, format!("byte offset {at}: {message}"))
    }
}

/// Parses and validates a binary problem. Stored values of the other width are
/// converted through `f64`.
pub fn from_binary<T: Scalar>(bytes: &[u8], origin: &str) -> Result<Potentials<T>> {
    let mut r = Reader {
        bytes,
        pos: 0,
        origin,
    };
    if r.take(4, "magic")? != MAGIC {
        return Err(r.fail(0, "missing DDCR magic".into()));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let height = r.u32("height")? as usize;
    let width = r.u32("width")? as usize;
    let labels = r.u32("labels")? as usize;
    let at = r.pos;
    let count = r.u32("stride count")? as usize;
    if count > 64 {
        return Err(r.fail(at, format!("implausible stride count {count}")));
    }
    let strides = (0..count)
        .map(|_| r.u32("strides").map(|s| s as usize))
        .collect::<Result<Vec<_>>>()?;
    let at = r.pos;
    let tied = match r.u32("pairwise mode")? {
        0 => true,
        1 => false,
        m => return Err(r.fail(at, format!("unknown pairwise mode {m}"))),
    };
    let at = r.pos;
    let width_bytes = r.u32("scalar width")?;
    if width_bytes != 4 && width_bytes != 8 {
        return Err(r.fail(at, format!("unknown scalar width {width_bytes}")));
    }
    let grid = GridSpec::new(height, width, labels, &strides);
    grid.validate()?;
    let ll = labels * labels;
    let nu = grid.num_vertices() * labels;
    let np = if tied { grid.num_slots() } else { grid.num_edges() } * ll;
    let w = width_bytes as usize;
    let read_array = |r: &mut Reader<'_>, n: usize, what: &str| -> Result<Vec<T>> {
        let b = r.take(n * w, what)?;
        Ok(b.chunks_exact(w)
            .map(|c| {
                if w == T::WIDTH.bytes() {
                    T::read_le(c)
                } else if w == 8 {
                    T::of(f64::read_le(c))
                } else {
                    T::of(f32::read_le(c) as f64)
                }
            })
            .collect())
    };
    let unary = read_array(&mut r, nu, "unary")?;
    let data = read_array(&mut r, np, "pairwise")?;
    if r.pos != bytes.len() {
        return Err(r.fail(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let p = Potentials {
        grid,
        unary,
        pairwise: if tied {
            Pairwise::Tied(data)
        } else {
            Pairwise::Dense(data)
        },
    };
    check_potentials(&p)?;
    Ok(p)
}

/// Loads a problem file, detecting the binary container by its magic.
pub fn load_problem<T: Scalar>(path: &Path) -> Result<Potentials<T>> {
    let bytes = fs::read(path)?;
    let origin = path.display().to_string();
    if bytes.starts_with(MAGIC) {
        from_binary(&bytes, &origin)
    } else {
        let text = std::str::from_utf8(&bytes)
            .map_err(|e| format_err(&origin, format!("byte offset {}: not UTF-8", e.valid_up_to())))?;
        from_text(text, &origin)
    }
}

pub fn save_problem<T: Scalar>(p: &Potentials<T>, path: &Path, kind: FileKind) -> Result<()> {
    match kind {
        FileKind::Text => fs::write(path, to_text(p))?,
        FileKind::Binary => fs::write(path, to_binary(p))?,
    }
    Ok(())
}

/// Gray level of each label: `⌊255·l/(L−1)⌋`, all black when `L = 1`.
pub fn gray_level(label: usize, num_labels: usize) -> u8 {
    if num_labels <= 1 {
        0
    } else {
        (255 * label / (num_labels - 1)) as u8
    }
}

/// Binary (P5) portable graymap of a labeling.
pub fn label_image(grid: &GridSpec, x: &Labeling) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", grid.width, grid.height).into_bytes();
    out.extend(x.labels.iter().map(|&l| gray_level(l, grid.num_labels)));
    out
}

pub fn write_label_image(grid: &GridSpec, x: &Labeling, path: &Path) -> Result<()> {
    fs::write(path, label_image(grid, x))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub mode: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    pub max_iters: usize,
    pub agree_tol: f64,
    pub dual_tol: f64,
    pub scalar: String,
    pub workers: Option<usize>,
    /// Problem file, or a description of the generator call.
    pub source: String,
}

impl ConfigEcho {
    pub fn new<T: Scalar>(cfg: &SolveConfig<T>, workers: Option<usize>, source: String) -> Self {
        Self {
            mode: if cfg.mode.gamma().is_some() { "smoothed" } else { "max" }.into(),
            gamma: cfg.mode.gamma().map(|g| g.as_f64()),
            max_iters: cfg.max_iters,
            agree_tol: cfg.agree_tol,
            dual_tol: cfg.dual_tol,
            scalar: width_name(T::WIDTH).into(),
            workers,
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub marginals_s: f64,
    pub update_s: f64,
    pub decode_s: f64,
}

impl From<Timings> for TimingReport {
    fn from(t: Timings) -> Self {
        Self {
            marginals_s: t.marginals_s,
            update_s: t.update_s,
            decode_s: t.decode_s,
        }
    }
}

/// Machine-readable outcome of a solve. Scalars are widened to `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultReport {
    pub config: ConfigEcho,
    pub height: usize,
    pub width: usize,
    pub labels: usize,
    pub iterations: usize,
    pub converged: bool,
    pub primal_energy: f64,
    pub dual_bound: f64,
    pub duality_gap: f64,
    pub labeling: Vec<usize>,
    pub dual_trace: Vec<f64>,
    pub agreement_trace: Vec<f64>,
    pub timings: TimingReport,
}

impl ResultReport {
    pub fn new<T: Scalar>(config: ConfigEcho, grid: &GridSpec, r: &SolveResult<T>) -> Self {
        Self {
            config,
            height: grid.height,
            width: grid.width,
            labels: grid.num_labels,
            iterations: r.iterations,
            converged: r.converged,
            primal_energy: r.primal_energy.as_f64(),
            dual_bound: r.dual_bound.as_f64(),
            duality_gap: r.duality_gap.as_f64(),
            labeling: r.labeling.labels.clone(),
            dual_trace: r.dual_trace.iter().map(|x| x.as_f64()).collect(),
            agreement_trace: r.agreement_trace.clone(),
            timings: r.timings.into(),
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).unwrap();
        s.push('\n');
        s
    }

    /// The report with timings zeroed, for comparing runs.
    pub fn without_timings(&self) -> Self {
        Self {
            timings: TimingReport {
                marginals_s: 0.0,
                update_s: 0.0,
                decode_s: 0.0,
            },
            ..self.clone()
        }
    }
}

/// Tied tables keyed as in the text format, for callers assembling instances.
pub fn tied_tables<T: Scalar>(p: &Potentials<T>) -> Option<BTreeMap<String, Vec<T>>> {
    let Pairwise::Tied(data) = &p.pairwise else {
        return None;
    };
    let g = &p.grid;
    let ll = g.num_labels * g.num_labels;
    Some(
        (0..g.num_slots())
            .map(|s| (g.slot_key(s), data[s * ll..(s + 1) * ll].to_vec()))
            .collect(),
    )
}
