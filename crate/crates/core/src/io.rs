//! Dataset CSV and calibration JSON formats.
//!
//! Datasets are CSV with the header `t,mx,my,mz,wx,wy,wz` optionally
//! followed by `roll,pitch,heading`. Units are seconds, milligauss, rad/s
//! and degrees. Numbers are written in the shortest form that parses back to
//! the same `f64`, so a read/write round trip is exact.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{Mat3, SpdMat3, Vec3};
use crate::model::{CalibrationResult, ExcitationWarning, SensorSample};
use crate::sim::{Attitude, SimulatedDataset, TruthParams};
use crate::solver::ConvergenceIndices;

pub const SENSOR_COLUMNS: [&str; 7] = ["t", "mx", "my", "mz", "wx", "wy", "wz"];
pub const ATTITUDE_COLUMNS: [&str; 3] = ["roll", "pitch", "heading"];
pub const CALIBRATION_SCHEMA_VERSION: u32 = 1;
pub const REPORT_SCHEMA_VERSION: u32 = 1;
/// Tolerance on `det(A) − 1` accepted when loading a calibration file.
pub const CALIBRATION_DET_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<SensorSample>,
    pub attitude: Option<Vec<Attitude>>,
}

impl From<&SimulatedDataset> for Dataset {
    fn from(ds: &SimulatedDataset) -> Self {
        Dataset {
            samples: ds.samples.clone(),
            attitude: Some(ds.truth_attitude.clone()),
        }
    }
}

impl Dataset {
    pub fn mags(&self) -> Vec<Vec3> {
        self.samples.iter().map(|s| s.mag).collect()
    }
}

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidConfig(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.{}.tmp", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line() as u64,
        message: e.to_string(),
    })
}

/// Serializes a dataset to CSV bytes.
pub fn dataset_to_csv(samples: &[SensorSample], attitude: Option<&[Attitude]>) -> Result<Vec<u8>> {
    if let Some(att) = attitude {
        if att.len() != samples.len() {
            return Err(Error::LengthMismatch {
                left: samples.len(),
                right: att.len(),
            });
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<&str> = SENSOR_COLUMNS.to_vec();
    if attitude.is_some() {
        header.extend(ATTITUDE_COLUMNS);
    }
    w.write_record(&header)?;
    let mut row = Vec::with_capacity(header.len());
    for (i, s) in samples.iter().enumerate() {
        row.clear();
        row.push(s.t);
        row.extend(s.mag.iter());
        row.extend(s.gyro.iter());
        if let Some(att) = attitude {
            row.extend([att[i].roll, att[i].pitch, att[i].heading]);
        }
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.into_inner().map_err(|e| Error::io("<memory>", e.into_error()))
}

pub fn write_dataset(path: &Path, samples: &[SensorSample], attitude: Option<&[Attitude]>) -> Result<()> {
    write_atomic(path, &dataset_to_csv(samples, attitude)?)
}

/// Writes a simulated run with its attitude columns.
pub fn write_simulated(path: &Path, ds: &SimulatedDataset) -> Result<()> {
    write_dataset(path, &ds.samples, Some(&ds.truth_attitude))
}

fn column_index(header: &csv::StringRecord, path: &Path, name: &'static str) -> Result<usize> {
    header
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| Error::MissingColumn {
            path: path.to_path_buf(),
            column: name,
        })
}

/// Parses dataset CSV. Columns are located by name; the attitude columns
/// are used only when all three are present.
pub fn parse_dataset(path: &Path, bytes: &[u8]) -> Result<Dataset> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes);
    let header = r.headers()?.clone();
    let sensor: Vec<usize> = SENSOR_COLUMNS
        .iter()
        .map(|c| column_index(&header, path, c))
        .collect::<Result<_>>()?;
    let attitude: Option<Vec<usize>> = ATTITUDE_COLUMNS
        .iter()
        .map(|c| column_index(&header, path, c).ok())
        .collect();

    let mut samples = Vec::new();
    let mut att = attitude.as_ref().map(|_| Vec::new());
    for record in r.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            Error::Parse {
                path: path.to_path_buf(),
                line,
                message: e.to_string(),
            }
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |i: usize| -> Result<f64> {
            let raw = record.get(i).unwrap_or("").trim();
            let v: f64 = raw.parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("column `{}`: cannot parse `{raw}` as a number", &header[i]),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line,
                    message: format!("column `{}`: non-finite value", &header[i]),
                });
            }
            Ok(v)
        };
        let t = field(sensor[0])?;
        if let Some(prev) = samples.last().map(|s: &SensorSample| s.t) {
            if t <= prev {
                return Err(Error::NonMonotoneTime {
                    path: path.to_path_buf(),
                    row: line,
                    t,
                });
            }
        }
        let mag = Vec3::new(field(sensor[1])?, field(sensor[2])?, field(sensor[3])?);
        let gyro = Vec3::new(field(sensor[4])?, field(sensor[5])?, field(sensor[6])?);
        samples.push(SensorSample::new(t, mag, gyro));
        if let (Some(idx), Some(out)) = (&attitude, &mut att) {
            out.push(Attitude {
                roll: field(idx[0])?,
                pitch: field(idx[1])?,
                heading: field(idx[2])?,
            });
        }
    }
    Ok(Dataset { samples, attitude: att })
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(path, &bytes)
}

/// `<dataset>.truth.json`, written next to simulated datasets.
pub fn truth_sidecar_path(dataset: &Path) -> PathBuf {
    let mut s = dataset.as_os_str().to_owned();
    s.push(".truth.json");
    PathBuf::from(s)
}

/// Truth parameters from `explicit` if given, else from the dataset's
/// sidecar when one exists.
pub fn load_truth(dataset: &Path, explicit: Option<&Path>) -> Result<Option<TruthParams>> {
    match explicit {
        Some(p) => read_json(p).map(Some),
        None => {
            let side = truth_sidecar_path(dataset);
            if side.exists() {
                read_json(&side).map(Some)
            } else {
                Ok(None)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub cost: f64,
    pub iterations: usize,
    pub converged: bool,
    #[serde(default)]
    pub convergence: Option<ConvergenceIndices>,
    #[serde(default)]
    pub excitation: Option<ExcitationWarning>,
}

/// A calibration at rest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationFile {
    pub schema_version: u32,
    pub method: String,
    /// Row-major `A`, unit determinant.
    pub soft_iron: [[f64; 3]; 3],
    /// `A m_b`, milligauss.
    pub hard_iron: [f64; 3],
    /// `m_b`, milligauss.
    pub pseudo_hard_iron: [f64; 3],
    /// rad/s; null for magnetometer-only methods.
    pub gyro_bias: Option<[f64; 3]>,
    pub diagnostics: Diagnostics,
}

fn rows(m: &Mat3) -> [[f64; 3]; 3] {
    std::array::from_fn(|i| std::array::from_fn(|j| m[(i, j)]))
}

impl CalibrationFile {
    pub fn new(method: &str, result: &CalibrationResult, convergence: Option<ConvergenceIndices>) -> Self {
        CalibrationFile {
            schema_version: CALIBRATION_SCHEMA_VERSION,
            method: method.to_string(),
            soft_iron: rows(result.soft_iron.matrix()),
            hard_iron: result.hard_iron.into(),
            pseudo_hard_iron: result.pseudo_hard_iron.into(),
            gyro_bias: result.gyro_bias.map(Into::into),
            diagnostics: Diagnostics {
                cost: result.final_cost,
                iterations: result.iterations,
                converged: result.converged,
                convergence,
                excitation: result.excitation.clone(),
            },
        }
    }

    /// Rebuilds the calibration, checking the schema and `det(A) = 1`.
    pub fn to_result(&self) -> Result<CalibrationResult> {
        if self.schema_version != CALIBRATION_SCHEMA_VERSION {
            return Err(Error::InvalidConfig(format!(
                "unsupported calibration schema version {}",
                self.schema_version
            )));
        }
        let a = SpdMat3::new(Mat3::from_fn(|i, j| self.soft_iron[i][j]))?;
        let det = a.det();
        if (det - 1.0).abs() > CALIBRATION_DET_TOLERANCE {
            return Err(Error::DeterminantOutOfTolerance {
                det,
                tolerance: CALIBRATION_DET_TOLERANCE,
            });
        }
        Ok(CalibrationResult {
            inverse_soft_iron: a.inverse(),
            soft_iron: a,
            hard_iron: self.hard_iron.into(),
            pseudo_hard_iron: self.pseudo_hard_iron.into(),
            gyro_bias: self.gyro_bias.map(Into::into),
            final_cost: self.diagnostics.cost,
            iterations: self.diagnostics.iterations,
            converged: self.diagnostics.converged,
            excitation: self.diagnostics.excitation.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{generate, preset, Preset};

    const THREE_ROWS: &str = "t,mx,my,mz,wx,wy,wz\n\
        0,1.5,2,3,0.1,0.2,0.3\n\
        0.1,-4,5e2,6,0,-0.25,1e-3\n\
        0.2,7,8,9.125,0.4,0.5,0.6\n";

    #[test]
    fn reads_three_rows_exactly() {
        let ds = parse_dataset(Path::new("x.csv"), THREE_ROWS.as_bytes()).unwrap();
        assert_eq!(ds.samples.len(), 3);
        assert!(ds.attitude.is_none());
        assert_eq!(ds.samples[1].t, 0.1);
        assert_eq!(ds.samples[1].mag, Vec3::new(-4.0, 500.0, 6.0));
        assert_eq!(ds.samples[1].gyro, Vec3::new(0.0, -0.25, 1e-3));
        assert_eq!(ds.samples[2].mag.z, 9.125);
    }

    #[test]
    fn columns_are_found_by_name() {
        let text = "wz,wy,wx,mz,my,mx,t\n3,2,1,6,5,4,0\n";
        let ds = parse_dataset(Path::new("x.csv"), text.as_bytes()).unwrap();
        assert_eq!(ds.samples[0].mag, Vec3::new(4.0, 5.0, 6.0));
        assert_eq!(ds.samples[0].gyro, Vec3::new(1.0, 2.0, 3.0));
    }

    #[test]
    fn rejects_decreasing_time() {
        let text = "t,mx,my,mz,wx,wy,wz\n0,1,2,3,4,5,6\n1,1,2,3,4,5,6\n0.5,1,2,3,4,5,6\n";
        match parse_dataset(Path::new("x.csv"), text.as_bytes()) {
            Err(Error::NonMonotoneTime { row, t, .. }) => {
                assert_eq!(row, 4);
                assert_eq!(t, 0.5);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn malformed_row_reports_line() {
        let text = "t,mx,my,mz,wx,wy,wz\n0,1,2,3,4,5,6\n1,1,x,3,4,5,6\n";
        match parse_dataset(Path::new("x.csv"), text.as_bytes()) {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, 3);
                assert!(message.contains("my"));
            }
            other => panic!("{other:?}"),
        }
        let short = "t,mx,my,mz,wx,wy,wz\n0,1,2,3,4,5,6\n1,1,2\n";
        assert!(matches!(
            parse_dataset(Path::new("x.csv"), short.as_bytes()),
            Err(Error::Parse { line: 3, .. })
        ));
    }

    #[test]
    fn missing_column() {
        let text = "t,mx,my,mz,wx,wy\n0,1,2,3,4,5\n";
        assert!(matches!(
            parse_dataset(Path::new("x.csv"), text.as_bytes()),
            Err(Error::MissingColumn { column: "wz", .. })
        ));
    }

    #[test]
    fn simulated_round_trip_is_exact() {
        let ds = generate(&preset(Preset::Lam).with_seed(11)).unwrap();
        let bytes = dataset_to_csv(&ds.samples, Some(&ds.truth_attitude)).unwrap();
        let text = std::str::from_utf8(&bytes).unwrap();
        assert!(text.starts_with("t,mx,my,mz,wx,wy,wz,roll,pitch,heading\n"));
        assert_eq!(text.lines().count(), 6001);
        let back = parse_dataset(Path::new("x.csv"), &bytes).unwrap();
        assert_eq!(back.samples, ds.samples);
        assert_eq!(back.attitude.as_deref(), Some(&ds.truth_attitude[..]));
        let again = dataset_to_csv(&back.samples, back.attitude.as_deref()).unwrap();
        assert_eq!(again, bytes);
    }

    #[test]
    fn calibration_file_round_trip() {
        let r = CalibrationResult::from_soft_hard(
            &TruthParams::reference().soft_iron(),
            &Vec3::new(1.0, -2.0, 3.5),
            Some(Vec3::new(0.004, -0.005, 0.002)),
        )
        .unwrap();
        let f = CalibrationFile::new("bfg", &r, None);
        let json = serde_json::to_string(&f).unwrap();
        let back: CalibrationFile = serde_json::from_str(&json).unwrap();
        assert_eq!(back, f);
        let r2 = back.to_result().unwrap();
        assert_eq!(r2.soft_iron, r.soft_iron);
        assert_eq!(r2.pseudo_hard_iron, r.pseudo_hard_iron);

        let mut bad = f.clone();
        bad.soft_iron[0][0] *= 1.01;
        assert!(matches!(bad.to_result(), Err(Error::DeterminantOutOfTolerance { .. })));
    }

    #[test]
    fn sidecar_path() {
        assert_eq!(
            truth_sidecar_path(Path::new("/a/b/wam.csv")),
            PathBuf::from("/a/b/wam.csv.truth.json")
        );
    }
}
