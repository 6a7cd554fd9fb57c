//! File formats for datasets, fitted models and landmark shapes.
//!
//! Datasets and models are JSON. Matrices are nested row arrays; real entries
//! are plain numbers and complex entries are `[re, im]` pairs. Floats are
//! written in shortest round-trip form, so save/load is exact.

use std::path::Path;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifold::{orthonormality_defect, orthonormalize, GrassmannPoint, Tolerances};
use crate::nested::{Dataset, NestedMap};
use crate::scalar::{Field, Scalar};
use crate::shape::KAds;

/// Largest orthonormality defect repaired on load.
pub const REPAIRABLE_DEFECT: f64 = 1e-6;

/// A dataset whose field is decided by the file.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyDataset {
    Real(Dataset<f64>),
    Complex(Dataset<Complex64>),
}

impl AnyDataset {
    pub fn field(&self) -> Field {
        match self {
            AnyDataset::Real(_) => Field::Real,
            AnyDataset::Complex(_) => Field::Complex,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            AnyDataset::Real(d) => d.len(),
            AnyDataset::Complex(d) => d.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn labels(&self) -> Option<&[i64]> {
        match self {
            AnyDataset::Real(d) => d.labels(),
            AnyDataset::Complex(d) => d.labels(),
        }
    }
}

impl From<Dataset<f64>> for AnyDataset {
    fn from(d: Dataset<f64>) -> Self {
        AnyDataset::Real(d)
    }
}

impl From<Dataset<Complex64>> for AnyDataset {
    fn from(d: Dataset<Complex64>) -> Self {
        AnyDataset::Complex(d)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum AnyMap {
    Real(NestedMap<f64>),
    Complex(NestedMap<Complex64>),
}

impl AnyMap {
    pub fn field(&self) -> Field {
        match self {
            AnyMap::Real(_) => Field::Real,
            AnyMap::Complex(_) => Field::Complex,
        }
    }

    /// `(n, m, p)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        match self {
            AnyMap::Real(m) => (m.n(), m.m(), m.p()),
            AnyMap::Complex(m) => (m.n(), m.m(), m.p()),
        }
    }
}

impl From<NestedMap<f64>> for AnyMap {
    fn from(m: NestedMap<f64>) -> Self {
        AnyMap::Real(m)
    }
}

impl From<NestedMap<Complex64>> for AnyMap {
    fn from(m: NestedMap<Complex64>) -> Self {
        AnyMap::Complex(m)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelMetadata {
    pub loss: Option<f64>,
    pub seed: Option<u64>,
    pub tool_version: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelFile {
    pub map: AnyMap,
    pub metadata: ModelMetadata,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum Entry {
    Real(f64),
    Complex([f64; 2]),
}

type Rows = Vec<Vec<Entry>>;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDataset {
    field: Field,
    n: usize,
    p: usize,
    count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    labels: Option<Vec<i64>>,
    points: Vec<Rows>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Dims {
    n: usize,
    m: usize,
    p: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    dims: Dims,
    field: Field,
    a: Rows,
    b: Rows,
    metadata: ModelMetadata,
}

fn to_rows<T: Scalar>(m: &DMatrix<T>) -> Rows {
    m.row_iter()
        .map(|row| {
            row.iter()
                .map(|&v| match T::FIELD {
                    Field::Real => Entry::Real(v.real()),
                    Field::Complex => Entry::Complex([v.real(), v.imaginary()]),
                })
                .collect()
        })
        .collect()
}

fn from_rows<T: Scalar>(rows: &Rows, shape: (usize, usize), what: &str) -> Result<DMatrix<T>> {
    if rows.len() != shape.0 {
        return Err(Error::Format(format!("{what}: expected {} rows, found {}", shape.0, rows.len())));
    }
    let mut m = DMatrix::zeros(shape.0, shape.1);
    for (i, row) in rows.iter().enumerate() {
        if row.len() != shape.1 {
            return Err(Error::Format(format!(
                "{what}, row {i}: expected {} entries, found {}",
                shape.1,
                row.len()
            )));
        }
        for (j, entry) in row.iter().enumerate() {
            let (re, im) = match (T::FIELD, *entry) {
                (Field::Real, Entry::Real(x)) => (x, 0.0),
                (Field::Complex, Entry::Complex([re, im])) => (re, im),
                (Field::Real, Entry::Complex(_)) => {
                    return Err(Error::Format(format!("{what}, row {i}, column {j}: complex entry in a real file")))
                }
                (Field::Complex, Entry::Real(_)) => {
                    return Err(Error::Format(format!("{what}, row {i}, column {j}: expected an [re, im] pair")))
                }
            };
            if !(re.is_finite() && im.is_finite()) {
                return Err(Error::Format(format!("{what}, row {i}, column {j}: non-finite entry")));
            }
            m[(i, j)] = T::from_parts(re, im).expect("field checked above");
        }
    }
    Ok(m)
}

fn json_error(kind: &str, e: serde_json::Error) -> Error {
    Error::Format(format!("{kind} file, line {} column {}: {e}", e.line(), e.column()))
}

/// Accept a stored basis as is, repair small drift, reject anything else.
fn load_basis<T: Scalar>(basis: DMatrix<T>, what: &str) -> Result<GrassmannPoint<T>> {
    let defect = orthonormality_defect(&basis);
    if defect <= Tolerances::default().orthonormal {
        GrassmannPoint::from_orthonormal(basis, Tolerances::default().orthonormal)
    } else if defect <= REPAIRABLE_DEFECT {
        orthonormalize(&basis).map_err(|e| Error::Format(format!("{what}: {e}")))
    } else {
        Err(Error::Format(format!("{what}: basis is not orthonormal (defect {defect:e})")))
    }
}

fn dataset_from_raw<T: Scalar>(raw: &RawDataset) -> Result<Dataset<T>> {
    let points = raw
        .points
        .iter()
        .enumerate()
        .map(|(i, rows)| {
            let what = format!("record {i}");
            load_basis(from_rows::<T>(rows, (raw.n, raw.p), &what)?, &what)
        })
        .collect::<Result<Vec<_>>>()?;
    let data = Dataset::new(points)?;
    match &raw.labels {
        Some(labels) => data.with_labels(labels.clone()).map_err(|e| Error::Format(e.to_string())),
        None => Ok(data),
    }
}

pub fn parse_dataset(text: &str) -> Result<AnyDataset> {
    let raw: RawDataset = serde_json::from_str(text).map_err(|e| json_error("dataset", e))?;
    if raw.p == 0 || raw.p > raw.n {
        return Err(Error::Format(format!("header: need 1 <= p <= n, got n={}, p={}", raw.n, raw.p)));
    }
    if raw.count != raw.points.len() {
        return Err(Error::Format(format!(
            "header: count is {} but {} records are present",
            raw.count,
            raw.points.len()
        )));
    }
    Ok(match raw.field {
        Field::Real => AnyDataset::Real(dataset_from_raw(&raw)?),
        Field::Complex => AnyDataset::Complex(dataset_from_raw(&raw)?),
    })
}

fn raw_dataset<T: Scalar>(data: &Dataset<T>, n: usize, p: usize) -> RawDataset {
    RawDataset {
        field: T::FIELD,
        n,
        p,
        count: data.len(),
        labels: data.labels().map(<[i64]>::to_vec),
        points: data.points().iter().map(|x| to_rows(x.basis())).collect(),
    }
}

/// Serialize a dataset. An empty dataset needs explicit `(n, p)`, so it is rejected.
pub fn dataset_to_string(data: &AnyDataset) -> Result<String> {
    let raw = match data {
        AnyDataset::Real(d) if !d.is_empty() => raw_dataset(d, d.n(), d.p()),
        AnyDataset::Complex(d) if !d.is_empty() => raw_dataset(d, d.n(), d.p()),
        _ => return Err(Error::Format("cannot write an empty dataset".into())),
    };
    serde_json::to_string(&raw).map_err(|e| Error::Format(e.to_string()))
}

fn map_from_raw<T: Scalar>(raw: &RawModel) -> Result<NestedMap<T>> {
    let a = from_rows::<T>(&raw.a, (raw.dims.n, raw.dims.m), "A")?;
    let b = from_rows::<T>(&raw.b, (raw.dims.n, raw.dims.p), "B")?;
    NestedMap::new(a, b).map_err(|e| Error::Format(format!("model: {e}")))
}

pub fn parse_model(text: &str) -> Result<ModelFile> {
    let raw: RawModel = serde_json::from_str(text).map_err(|e| json_error("model", e))?;
    let Dims { n, m, p } = raw.dims;
    if !(1 <= p && p <= m && m <= n) {
        return Err(Error::Format(format!("dims: need 1 <= p <= m <= n, got n={n}, m={m}, p={p}")));
    }
    let map = match raw.field {
        Field::Real => AnyMap::Real(map_from_raw(&raw)?),
        Field::Complex => AnyMap::Complex(map_from_raw(&raw)?),
    };
    Ok(ModelFile { map, metadata: raw.metadata })
}

pub fn model_to_string(model: &ModelFile) -> Result<String> {
    let (n, m, p) = model.map.dims();
    let (a, b) = match &model.map {
        AnyMap::Real(map) => (to_rows(map.a()), to_rows(map.b())),
        AnyMap::Complex(map) => (to_rows(map.a()), to_rows(map.b())),
    };
    let raw = RawModel {
        dims: Dims { n, m, p },
        field: model.map.field(),
        a,
        b,
        metadata: model.metadata.clone(),
    };
    serde_json::to_string_pretty(&raw).map_err(|e| Error::Format(e.to_string()))
}

/// Shapes read from a landmark file. Labels are present for all shapes or none.
#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkSet {
    pub shapes: Vec<KAds>,
    pub labels: Option<Vec<i64>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawShapes {
    shapes: Vec<RawShape>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawShape {
    #[serde(default)]
    label: Option<i64>,
    points: Vec<[f64; 2]>,
}

/// Parse landmarks.
///
/// Input starting with `{` is JSON: `{"shapes": [{"label": 0, "points": [[x, y], ...]}]}`.
/// Anything else is text with one shape per line: an optional integer label
/// followed by whitespace-separated `x,y` pairs. Blank lines and `#` comments
/// are skipped.
pub fn parse_landmarks(text: &str) -> Result<LandmarkSet> {
    let records: Vec<(String, Option<i64>, Vec<[f64; 2]>)> = if text.trim_start().starts_with('{') {
        let raw: RawShapes = serde_json::from_str(text).map_err(|e| json_error("landmark", e))?;
        raw.shapes
            .into_iter()
            .enumerate()
            .map(|(i, s)| (format!("shape {i}"), s.label, s.points))
            .collect()
    } else {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let content = line.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let what = format!("line {}", i + 1);
            let (label, points) = parse_landmark_line(content).map_err(|e| Error::Format(format!("{what}: {e}")))?;
            records.push((what, label, points));
        }
        records
    };
    let Some(first) = records.first() else {
        return Err(Error::Format("landmark file contains no shapes".into()));
    };
    let k = first.2.len();
    let labeled = first.1.is_some();
    let mut shapes = Vec::with_capacity(records.len());
    let mut labels = Vec::with_capacity(records.len());
    for (what, label, points) in records {
        if points.len() != k {
            return Err(Error::Format(format!("{what}: expected {k} landmarks, found {}", points.len())));
        }
        match (labeled, label) {
            (true, Some(l)) => labels.push(l),
            (false, None) => {}
            _ => return Err(Error::Format(format!("{what}: labels must be given for all shapes or none"))),
        }
        shapes.push(KAds::new(points).map_err(|e| Error::Format(format!("{what}: {e}")))?);
    }
    Ok(LandmarkSet { shapes, labels: labeled.then_some(labels) })
}

fn parse_landmark_line(content: &str) -> std::result::Result<(Option<i64>, Vec<[f64; 2]>), String> {
    let mut tokens = content.split_whitespace().peekable();
    let label = match tokens.peek() {
        Some(t) if !t.contains(',') => {
            let t = tokens.next().expect("peeked");
            Some(t.parse::<i64>().map_err(|_| format!("invalid label {t:?}"))?)
        }
        _ => None,
    };
    let points = tokens
        .enumerate()
        .map(|(j, t)| {
            let (x, y) = t.split_once(',').ok_or_else(|| format!("landmark {j}: expected x,y, found {t:?}"))?;
            let parse = |s: &str| {
                s.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| format!("landmark {j}: invalid coordinate {s:?}"))
            };
            Ok([parse(x)?, parse(y)?])
        })
        .collect::<std::result::Result<Vec<_>, String>>()?;
    Ok((label, points))
}

/// Text form accepted by [`parse_landmarks`].
pub fn landmarks_to_string(set: &LandmarkSet) -> String {
    let mut out = String::new();
    for (i, shape) in set.shapes.iter().enumerate() {
        if let Some(labels) = &set.labels {
            out.push_str(&labels[i].to_string());
            out.push(' ');
        }
        let pairs: Vec<String> = shape.points().iter().map(|[x, y]| format!("{x:?},{y:?}")).collect();
        out.push_str(&pairs.join(" "));
        out.push('\n');
    }
    out
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

pub fn read_dataset(path: &Path) -> Result<AnyDataset> {
    parse_dataset(&read(path)?)
}

pub fn write_dataset(path: &Path, data: &AnyDataset) -> Result<()> {
    write(path, &dataset_to_string(data)?)
}

pub fn read_model(path: &Path) -> Result<ModelFile> {
    parse_model(&read(path)?)
}

pub fn write_model(path: &Path, model: &ModelFile) -> Result<()> {
    write(path, &model_to_string(model)?)
}

pub fn read_landmarks(path: &Path) -> Result<LandmarkSet> {
    parse_landmarks(&read(path)?)
}

pub fn write_landmarks(path: &Path, set: &LandmarkSet) -> Result<()> {
    write(path, &landmarks_to_string(set))
}
