//! CSV ingestion/export and the binary dataset cache.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, Labels};
use crate::diffcore::io::Reader;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelKind {
    /// Integer class labels; the class count is inferred when not given.
    Class { classes: Option<usize> },
    Real,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub label_column: String,
    pub label_kind: LabelKind,
    /// Column holding sample ids; ids default to the row order.
    pub id_column: Option<String>,
}

impl CsvSchema {
    pub fn classes(label_column: &str) -> Self {
        CsvSchema {
            label_column: label_column.into(),
            label_kind: LabelKind::Class { classes: None },
            id_column: None,
        }
    }

    pub fn real(label_column: &str) -> Self {
        CsvSchema {
            label_column: label_column.into(),
            label_kind: LabelKind::Real,
            id_column: None,
        }
    }
}

/// Read a numeric CSV with a header row. Every column other than the label
/// and id columns is a feature, in header order.
pub fn ingest_csv(path: &Path, schema: &CsvSchema) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers = rdr.headers()?.clone();
    let find = |name: &str| headers.iter().position(|h| h.trim() == name);
    let label_col = find(&schema.label_column)
        .ok_or_else(|| Error::Schema(format!("missing label column '{}'", schema.label_column)))?;
    let id_col = match &schema.id_column {
        Some(name) => Some(find(name).ok_or_else(|| Error::Schema(format!("missing id column '{name}'")))?),
        None => None,
    };
    let feature_cols: Vec<usize> = (0..headers.len())
        .filter(|&c| c != label_col && Some(c) != id_col)
        .collect();
    if feature_cols.is_empty() {
        return Err(Error::Schema("no feature columns".into()));
    }

    let mut x = Vec::new();
    let mut raw_labels = Vec::new();
    let mut ids = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(row + 2);
        if rec.len() != headers.len() {
            return Err(Error::Parse {
                line,
                message: format!("expected {} fields, found {}", headers.len(), rec.len()),
            });
        }
        let num = |c: usize| -> Result<f64> {
            let cell = rec[c].trim();
            cell.parse::<f64>().map_err(|_| Error::Parse {
                line,
                message: format!("row {row}: non-numeric value '{cell}' in column '{}'", &headers[c]),
            })
        };
        for &c in &feature_cols {
            x.push(num(c)?);
        }
        raw_labels.push((line, rec[label_col].trim().to_string()));
        ids.push(match id_col {
            Some(c) => rec[c].trim().parse::<u64>().map_err(|_| Error::Parse {
                line,
                message: format!("row {row}: invalid id '{}'", rec[c].trim()),
            })?,
            None => row as u64,
        });
    }

    let labels = match schema.label_kind {
        LabelKind::Real => Labels::Values(
            raw_labels
                .iter()
                .map(|(line, s)| {
                    s.parse::<f64>().map_err(|_| Error::Parse {
                        line: *line,
                        message: format!("non-numeric label '{s}'"),
                    })
                })
                .collect::<Result<_>>()?,
        ),
        LabelKind::Class { classes } => {
            let labels: Vec<usize> = raw_labels
                .iter()
                .map(|(line, s)| {
                    s.parse::<usize>().map_err(|_| Error::Parse {
                        line: *line,
                        message: format!("invalid class label '{s}'"),
                    })
                })
                .collect::<Result<_>>()?;
            let classes = classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
            Labels::Classes { labels, classes }
        }
    };
    Dataset::new(feature_cols.len(), x, labels, ids)
}

/// Write `id,x0..x{d-1},label`. Floats use the shortest representation that
/// parses back to the identical value.
pub fn export_csv(data: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["id".to_string()];
    header.extend((0..data.dim()).map(|j| format!("x{j}")));
    header.push("label".into());
    w.write_record(&header)?;
    for i in 0..data.len() {
        let mut rec = Vec::with_capacity(data.dim() + 2);
        rec.push(data.ids()[i].to_string());
        rec.extend(data.row(i).iter().map(|v| format!("{v:?}")));
        rec.push(match data.labels() {
            Labels::Classes { labels, .. } => labels[i].to_string(),
            Labels::Values(v) => format!("{:?}", v[i]),
        });
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Schema matching the layout written by [`export_csv`].
pub fn export_schema(data: &Dataset) -> CsvSchema {
    CsvSchema {
        label_column: "label".into(),
        label_kind: match data.labels() {
            Labels::Classes { classes, .. } => LabelKind::Class { classes: Some(*classes) },
            Labels::Values(_) => LabelKind::Real,
        },
        id_column: Some("id".into()),
    }
}

pub const CACHE_MAGIC: &[u8; 8] = b"PBDATA\0\0";
pub const CACHE_VERSION: u32 = 1;

/// Binary cache: magic, u32 version, u8 label kind (0 class, 1 real), u64 class
/// count, u64 dim, u64 n, then n u64 ids, n*dim f64 features, n labels
/// (u64 classes or f64 values), all little-endian.
pub fn encode_dataset(data: &Dataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(48 + 8 * data.len() * (data.dim() + 2));
    out.extend_from_slice(CACHE_MAGIC);
    out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    let (kind, classes) = match data.labels() {
        Labels::Classes { classes, .. } => (0u8, *classes as u64),
        Labels::Values(_) => (1u8, 0),
    };
    out.push(kind);
    out.extend_from_slice(&classes.to_le_bytes());
    out.extend_from_slice(&(data.dim() as u64).to_le_bytes());
    out.extend_from_slice(&(data.len() as u64).to_le_bytes());
    for id in data.ids() {
        out.extend_from_slice(&id.to_le_bytes());
    }
    for v in data.raw() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    match data.labels() {
        Labels::Classes { labels, .. } => labels
            .iter()
            .for_each(|&c| out.extend_from_slice(&(c as u64).to_le_bytes())),
        Labels::Values(v) => v.iter().for_each(|y| out.extend_from_slice(&y.to_le_bytes())),
    }
    out
}

pub fn decode_dataset(bytes: &[u8]) -> std::result::Result<Dataset, String> {
    let mut r = Reader::new(bytes);
    if r.take(8)? != CACHE_MAGIC {
        return Err("bad magic".into());
    }
    let version = r.u32()?;
    if version != CACHE_VERSION {
        return Err(format!("unsupported cache version {version}"));
    }
    let kind = r.u8()?;
    let classes = r.usize()?;
    let dim = r.usize()?;
    let n = r.usize()?;
    let ids = (0..n).map(|_| r.u64()).collect::<std::result::Result<Vec<_>, _>>()?;
    let x = r.f64s(n.checked_mul(dim).ok_or("size overflow")?)?;
    let labels = match kind {
        0 => Labels::Classes {
            labels: (0..n).map(|_| r.usize()).collect::<std::result::Result<_, _>>()?,
            classes,
        },
        1 => Labels::Values(r.f64s(n)?),
        k => return Err(format!("unknown label kind {k}")),
    };
    r.finish()?;
    Dataset::new(dim, x, labels, ids).map_err(|e| e.to_string())
}

pub fn write_cache(data: &Dataset, path: &Path) -> Result<()> {
    fs::write(path, encode_dataset(data))?;
    Ok(())
}

pub fn read_cache(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    decode_dataset(&bytes).map_err(|message| Error::Format {
        path: path.to_path_buf(),
        message,
    })
}
