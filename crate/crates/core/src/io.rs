//! File formats: JSON for structured artifacts, CSV for matrices, pitch tracks and paired
//! samples. Every write goes through a temporary file in the target directory and is renamed
//! into place, so a failed command never leaves a partial output behind.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::auxiliary::PairedSamples;
use crate::codec::{CodecFile, CodecModel, FeatureMatrix};
use crate::diffusion::{bayes_oracle_denoiser, BayesOracle, Condition, Denoiser, GridShape, TabularDenoiser, TokenGrid, WeightedGrid};
use crate::error::{Error, Result};
use crate::metrics::PitchTrack;
use crate::schedules::{Layout, Schedule, ScheduleFile};

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

fn format_err(path: &Path, message: impl std::fmt::Display) -> Error {
    Error::Format {
        path: path.display().to_string(),
        message: message.to_string(),
    }
}

/// Replace `path` with `bytes` via a same-directory temporary file and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| io_err(path, e))?;
    tmp.write_all(bytes).map_err(|e| io_err(path, e))?;
    tmp.flush().map_err(|e| io_err(path, e))?;
    tmp.persist(path).map_err(|e| io_err(path, e.error))?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| format_err(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| format_err(path, e))?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

/// A batch of token grids with optional labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenFile {
    #[serde(rename = "K")]
    pub num_classes: usize,
    #[serde(rename = "N_q")]
    pub num_layers: usize,
    #[serde(rename = "L")]
    pub frames: usize,
    #[serde(default)]
    pub layout: Layout,
    /// `grids[n][q][l]`.
    pub grids: Vec<Vec<Vec<u32>>>,
    /// One label per grid (`null` for unlabeled); may be omitted entirely.
    #[serde(default)]
    pub labels: Vec<Condition>,
}

impl TokenFile {
    pub fn from_grids(grids: &[TokenGrid], labels: &[Condition]) -> Result<Self> {
        let Some(first) = grids.first() else {
            return Err(Error::Argument("no grids to write".into()));
        };
        let shape = first.shape();
        if grids.iter().any(|g| g.shape() != shape) {
            return Err(Error::Argument("grids in one token file must share a shape".into()));
        }
        if !labels.is_empty() && labels.len() != grids.len() {
            return Err(Error::Argument("need one label per grid".into()));
        }
        Ok(Self {
            num_classes: shape.num_classes,
            num_layers: shape.num_layers,
            frames: shape.frames,
            layout: shape.layout,
            grids: grids.iter().map(TokenGrid::to_layers).collect(),
            labels: labels.to_vec(),
        })
    }

    pub fn shape(&self) -> Result<GridShape> {
        GridShape::new(self.num_classes, self.num_layers, self.frames, self.layout)
    }

    /// Grids paired with their labels (null when the file has none).
    pub fn to_grids(&self) -> Result<Vec<(TokenGrid, Condition)>> {
        let shape = self.shape()?;
        if !self.labels.is_empty() && self.labels.len() != self.grids.len() {
            return Err(Error::Argument(format!(
                "{} labels for {} grids",
                self.labels.len(),
                self.grids.len()
            )));
        }
        self.grids
            .iter()
            .enumerate()
            .map(|(n, layers)| {
                let grid = TokenGrid::from_layers(self.num_classes, self.layout, layers)
                    .map_err(|e| Error::Argument(format!("grid {n}: {e}")))?;
                if grid.shape() != shape {
                    return Err(Error::Argument(format!("grid {n} is not {}x{}", self.num_layers, self.frames)));
                }
                Ok((grid, self.labels.get(n).copied().unwrap_or_default()))
            })
            .collect()
    }
}

pub fn read_tokens(path: &Path) -> Result<TokenFile> {
    read_json(path)
}

/// Serialized denoiser with the schedule it was built for.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DenoiserFile {
    Tabular {
        schedule: ScheduleFile,
        model: TabularDenoiser,
    },
    Bayes {
        schedule: ScheduleFile,
        shape: GridShape,
        support: Vec<WeightedGrid>,
    },
}

/// A loaded denoiser of either kind.
#[derive(Debug, Clone)]
pub enum AnyDenoiser {
    Tabular(TabularDenoiser),
    Bayes(BayesOracle),
}

impl AnyDenoiser {
    pub fn shape(&self) -> GridShape {
        match self {
            AnyDenoiser::Tabular(m) => m.shape(),
            AnyDenoiser::Bayes(m) => m.shape(),
        }
    }
}

impl Denoiser for AnyDenoiser {
    fn predict(&self, x_t: &TokenGrid, t: usize, cond: Condition) -> Result<Vec<Vec<f64>>> {
        match self {
            AnyDenoiser::Tabular(m) => m.predict(x_t, t, cond),
            AnyDenoiser::Bayes(m) => m.predict(x_t, t, cond),
        }
    }
}

impl DenoiserFile {
    pub fn tabular(model: TabularDenoiser, schedule: &Schedule) -> Self {
        DenoiserFile::Tabular {
            schedule: ScheduleFile::describe(schedule),
            model,
        }
    }

    pub fn bayes(oracle: &BayesOracle) -> Self {
        DenoiserFile::Bayes {
            schedule: ScheduleFile::describe(oracle.schedule()),
            shape: oracle.shape(),
            support: oracle.support().to_vec(),
        }
    }

    /// Validate and instantiate the model together with its schedule.
    pub fn load(self) -> Result<(AnyDenoiser, Schedule)> {
        match self {
            DenoiserFile::Tabular { schedule, model } => {
                let schedule = schedule.build()?;
                model.validate()?;
                let s = model.shape();
                if model.steps() != schedule.steps() {
                    return Err(Error::Argument(format!(
                        "model has {} steps but its schedule has {}",
                        model.steps(),
                        schedule.steps()
                    )));
                }
                schedule.check_shape(s.num_classes, s.num_layers, s.frames, s.layout)?;
                Ok((AnyDenoiser::Tabular(model), schedule))
            }
            DenoiserFile::Bayes { schedule, shape, support } => {
                let schedule = schedule.build()?;
                let oracle = bayes_oracle_denoiser(shape, support, &schedule)?;
                Ok((AnyDenoiser::Bayes(oracle), schedule))
            }
        }
    }
}

pub fn read_denoiser(path: &Path) -> Result<(AnyDenoiser, Schedule)> {
    let file: DenoiserFile = read_json(path)?;
    file.load().map_err(|e| format_err(path, e))
}

pub fn read_schedule(path: &Path) -> Result<Schedule> {
    let file: ScheduleFile = read_json(path)?;
    file.build().map_err(|e| format_err(path, e))
}

pub fn read_codec(path: &Path) -> Result<CodecModel> {
    let file: CodecFile = read_json(path)?;
    CodecModel::try_from(file).map_err(|e| format_err(path, e))
}

pub fn write_codec(path: &Path, model: &CodecModel) -> Result<()> {
    write_json(path, &CodecFile::from(model))
}

fn csv_records(path: &Path) -> Result<Vec<csv::StringRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| format_err(path, e))?;
    reader
        .records()
        .map(|r| r.map_err(|e| format_err(path, e)))
        .collect()
}

fn parse_row(path: &Path, line: usize, record: &csv::StringRecord) -> Result<Vec<f64>> {
    record
        .iter()
        .map(|field| {
            field
                .parse::<f64>()
                .map_err(|_| format_err(path, format!("row {line}: `{field}` is not a number")))
        })
        .collect()
}

/// Numeric CSV, one row per line. A first row that does not parse as numbers is taken as a
/// header and skipped.
pub fn read_matrix(path: &Path) -> Result<Vec<Vec<f64>>> {
    let records = csv_records(path)?;
    let mut rows = Vec::with_capacity(records.len());
    for (i, rec) in records.iter().enumerate() {
        match parse_row(path, i + 1, rec) {
            Ok(row) => rows.push(row),
            Err(_) if i == 0 => continue,
            Err(e) => return Err(e),
        }
    }
    if rows.is_empty() {
        return Err(format_err(path, "no numeric rows"));
    }
    if rows.iter().any(|r| r.len() != rows[0].len()) {
        return Err(format_err(path, "rows have different lengths"));
    }
    Ok(rows)
}

fn matrix_csv(rows: &[Vec<f64>]) -> Result<Vec<u8>> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    for row in rows {
        writer
            .write_record(row.iter().map(f64::to_string))
            .map_err(|e| Error::Argument(e.to_string()))?;
    }
    writer.into_inner().map_err(|e| Error::Argument(e.to_string()))
}

pub fn write_matrix(path: &Path, rows: &[Vec<f64>]) -> Result<()> {
    write_atomic(path, &matrix_csv(rows)?)
}

pub fn read_features(path: &Path) -> Result<FeatureMatrix> {
    FeatureMatrix::from_rows(&read_matrix(path)?).map_err(|e| format_err(path, e))
}

#[derive(Debug, Deserialize, Serialize)]
struct PitchRow {
    frame: usize,
    f0: f64,
    voiced: String,
}

fn parse_voiced(v: &str) -> Option<bool> {
    match v.to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" => Some(true),
        "0" | "false" | "no" => Some(false),
        _ => None,
    }
}

/// Pitch track CSV with header `frame,f0,voiced`; rows must list frames `0..N` in order.
pub fn read_pitch(path: &Path) -> Result<PitchTrack> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| format_err(path, e))?;
    let (mut f0, mut voiced) = (Vec::new(), Vec::new());
    for (i, row) in reader.deserialize::<PitchRow>().enumerate() {
        let row = row.map_err(|e| format_err(path, e))?;
        if row.frame != i {
            return Err(format_err(path, format!("expected frame {i}, found {}", row.frame)));
        }
        let v = parse_voiced(&row.voiced)
            .ok_or_else(|| format_err(path, format!("frame {i}: voiced must be 0/1, got `{}`", row.voiced)))?;
        f0.push(row.f0);
        voiced.push(v);
    }
    PitchTrack::new(f0, voiced).map_err(|e| format_err(path, e))
}

pub fn write_pitch(path: &Path, track: &PitchTrack) -> Result<()> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    for (i, (&f0, &v)) in track.f0().iter().zip(track.voiced()).enumerate() {
        writer
            .serialize(PitchRow {
                frame: i,
                f0,
                voiced: if v { "1".into() } else { "0".into() },
            })
            .map_err(|e| Error::Argument(e.to_string()))?;
    }
    let bytes = writer.into_inner().map_err(|e| Error::Argument(e.to_string()))?;
    write_atomic(path, &bytes)
}

/// Paired samples CSV: a header whose column names start with `x` or `y` assigns each
/// column to one side.
pub fn read_paired(path: &Path) -> Result<PairedSamples> {
    let records = csv_records(path)?;
    let Some((header, body)) = records.split_first() else {
        return Err(format_err(path, "empty file"));
    };
    let side: Vec<char> = header
        .iter()
        .map(|name| match name.chars().next() {
            Some(c @ ('x' | 'X' | 'y' | 'Y')) => Ok(c.to_ascii_lowercase()),
            _ => Err(format_err(path, format!("column `{name}` must be named x... or y..."))),
        })
        .collect::<Result<_>>()?;
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for (i, rec) in body.iter().enumerate() {
        let row = parse_row(path, i + 2, rec)?;
        if row.len() != side.len() {
            return Err(format_err(path, format!("row {} has {} fields, header has {}", i + 2, row.len(), side.len())));
        }
        xs.push(row.iter().zip(&side).filter(|(_, s)| **s == 'x').map(|(v, _)| *v).collect());
        ys.push(row.iter().zip(&side).filter(|(_, s)| **s == 'y').map(|(v, _)| *v).collect());
    }
    PairedSamples::new(xs, ys).map_err(|e| format_err(path, e))
}

pub fn write_paired(path: &Path, samples: &PairedSamples) -> Result<()> {
    let mut rows = Vec::with_capacity(samples.len() + 1);
    let mut header: Vec<String> = (0..samples.x_dim()).map(|i| format!("x{i}")).collect();
    header.extend((0..samples.y_dim()).map(|i| format!("y{i}")));
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer.write_record(&header).map_err(|e| Error::Argument(e.to_string()))?;
    for (x, y) in samples.x.iter().zip(&samples.y) {
        rows.clear();
        rows.extend(x.iter().chain(y).map(f64::to_string));
        writer.write_record(&rows).map_err(|e| Error::Argument(e.to_string()))?;
    }
    let bytes = writer.into_inner().map_err(|e| Error::Argument(e.to_string()))?;
    write_atomic(path, &bytes)
}
