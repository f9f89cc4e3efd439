//! CSV formats of the persisted phase artifacts.
//!
//! All files are UTF-8 with a header row, LF line endings and RFC-4180
//! quoting. Multi-valued cells join their values with [`LIST_DELIMITER`].

use serde::{Deserialize, Serialize};

use crate::analytics::SaturationPoint;

pub const CODE_TABLE_HEADER: [&str; 3] = ["code_name", "description", "quote"];
pub const SNAPSHOT_HEADER: [&str; 5] = ["name", "description", "quotes", "member_count", "merge_explanations"];
pub const SATURATION_HEADER: [&str; 3] = ["step", "total", "unique"];
pub const THEMES_HEADER: [&str; 5] = ["theme_name", "description", "code_name", "code_description", "assigned_pass"];

pub const LIST_DELIMITER: &str = " ||| ";
pub const SATURATION_FILE: &str = "saturation_series.csv";
pub const THEMES_FILE: &str = "themes.csv";
pub const THEMES_JSON_FILE: &str = "themes.json";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ArtifactError {
    #[error("unexpected header: found `{found}`, expected `{expected}`")]
    BadHeader { found: String, expected: String },
    #[error("malformed row {row}: {detail}")]
    BadRow { row: usize, detail: String },
    #[error("csv: {0}")]
    Csv(String),
}

impl From<csv::Error> for ArtifactError {
    fn from(e: csv::Error) -> Self {
        ArtifactError::Csv(e.to_string())
    }
}

pub fn code_table_filename(stem: &str) -> String {
    format!("{stem}_codes.csv")
}

pub fn snapshot_filename(step: u32) -> String {
    format!("unique_codebook_{step:03}.csv")
}

/// Step index of a `unique_codebook_NNN.csv` file name.
pub fn parse_snapshot_filename(name: &str) -> Option<u32> {
    let digits = name.strip_prefix("unique_codebook_")?.strip_suffix(".csv")?;
    if digits.len() < 3 || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeRow {
    pub code_name: String,
    pub description: String,
    pub quote: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnapshotRow {
    pub name: String,
    pub description: String,
    pub quotes: Vec<String>,
    pub member_count: usize,
    pub merge_explanations: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssignedPass {
    FirstPass,
    SecondPass,
}

impl AssignedPass {
    pub fn as_str(self) -> &'static str {
        match self {
            AssignedPass::FirstPass => "first_pass",
            AssignedPass::SecondPass => "second_pass",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThemeRow {
    pub theme_name: String,
    pub description: String,
    pub code_name: String,
    pub code_description: String,
    pub assigned_pass: AssignedPass,
}

fn writer() -> csv::Writer<Vec<u8>> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new())
}

fn finish(w: csv::Writer<Vec<u8>>) -> Vec<u8> {
    w.into_inner().expect("writing to memory cannot fail")
}

fn write_all<const N: usize>(header: [&str; N], rows: impl Iterator<Item = [String; N]>) -> Vec<u8> {
    let mut w = writer();
    w.write_record(header).expect("in-memory write");
    for row in rows {
        w.write_record(&row).expect("in-memory write");
    }
    finish(w)
}

fn read_all<const N: usize>(bytes: &[u8], header: [&str; N]) -> Result<Vec<[String; N]>, ArtifactError> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(bytes);
    let found = r.headers()?.clone();
    if found.iter().ne(header.iter().copied()) {
        return Err(ArtifactError::BadHeader {
            found: found.iter().collect::<Vec<_>>().join(","),
            expected: header.join(","),
        });
    }
    let mut out = Vec::new();
    for (i, record) in r.records().enumerate() {
        let record = record?;
        if record.len() != N {
            return Err(ArtifactError::BadRow {
                row: i + 1,
                detail: format!("expected {N} fields, found {}", record.len()),
            });
        }
        out.push(std::array::from_fn(|k| record[k].to_string()));
    }
    Ok(out)
}

fn join(values: &[String]) -> String {
    values.join(LIST_DELIMITER)
}

fn split(cell: &str) -> Vec<String> {
    if cell.is_empty() {
        Vec::new()
    } else {
        cell.split(LIST_DELIMITER).map(str::to_string).collect()
    }
}

fn number<T: std::str::FromStr>(cell: &str, row: usize, column: &str) -> Result<T, ArtifactError> {
    cell.parse().map_err(|_| ArtifactError::BadRow {
        row,
        detail: format!("{column} is not a non-negative integer: `{cell}`"),
    })
}

pub fn write_code_table(rows: &[CodeRow]) -> Vec<u8> {
    write_all(
        CODE_TABLE_HEADER,
        rows.iter()
            .map(|r| [r.code_name.clone(), r.description.clone(), r.quote.clone()]),
    )
}

pub fn read_code_table(bytes: &[u8]) -> Result<Vec<CodeRow>, ArtifactError> {
    Ok(read_all(bytes, CODE_TABLE_HEADER)?
        .into_iter()
        .map(|[code_name, description, quote]| CodeRow {
            code_name,
            description,
            quote,
        })
        .collect())
}

pub fn write_snapshot(rows: &[SnapshotRow]) -> Vec<u8> {
    write_all(
        SNAPSHOT_HEADER,
        rows.iter().map(|r| {
            [
                r.name.clone(),
                r.description.clone(),
                join(&r.quotes),
                r.member_count.to_string(),
                join(&r.merge_explanations),
            ]
        }),
    )
}

pub fn read_snapshot(bytes: &[u8]) -> Result<Vec<SnapshotRow>, ArtifactError> {
    read_all(bytes, SNAPSHOT_HEADER)?
        .into_iter()
        .enumerate()
        .map(|(i, [name, description, quotes, member_count, explanations])| {
            Ok(SnapshotRow {
                name,
                description,
                quotes: split(&quotes),
                member_count: number(&member_count, i + 1, "member_count")?,
                merge_explanations: split(&explanations),
            })
        })
        .collect()
}

pub fn write_saturation(points: &[SaturationPoint]) -> Vec<u8> {
    write_all(
        SATURATION_HEADER,
        points.iter().map(|p| {
            [
                p.step.to_string(),
                p.cumulative_total.to_string(),
                p.cumulative_unique.to_string(),
            ]
        }),
    )
}

pub fn read_saturation(bytes: &[u8]) -> Result<Vec<SaturationPoint>, ArtifactError> {
    read_all(bytes, SATURATION_HEADER)?
        .into_iter()
        .enumerate()
        .map(|(i, [step, total, unique])| {
            let point = SaturationPoint {
                step: number(&step, i + 1, "step")?,
                cumulative_total: number(&total, i + 1, "total")?,
                cumulative_unique: number(&unique, i + 1, "unique")?,
            };
            if point.cumulative_unique > point.cumulative_total {
                return Err(ArtifactError::BadRow {
                    row: i + 1,
                    detail: "unique exceeds total".into(),
                });
            }
            Ok(point)
        })
        .collect()
}

pub fn write_themes(rows: &[ThemeRow]) -> Vec<u8> {
    write_all(
        THEMES_HEADER,
        rows.iter().map(|r| {
            [
                r.theme_name.clone(),
                r.description.clone(),
                r.code_name.clone(),
                r.code_description.clone(),
                r.assigned_pass.as_str().to_string(),
            ]
        }),
    )
}

pub fn read_themes(bytes: &[u8]) -> Result<Vec<ThemeRow>, ArtifactError> {
    read_all(bytes, THEMES_HEADER)?
        .into_iter()
        .enumerate()
        .map(|(i, [theme_name, description, code_name, code_description, pass])| {
            let assigned_pass = match pass.as_str() {
                "first_pass" => AssignedPass::FirstPass,
                "second_pass" => AssignedPass::SecondPass,
                other => {
                    return Err(ArtifactError::BadRow {
                        row: i + 1,
                        detail: format!("unknown assigned_pass `{other}`"),
                    })
                }
            };
            Ok(ThemeRow {
                theme_name,
                description,
                code_name,
                code_description,
                assigned_pass,
            })
        })
        .collect()
}
