//! PIMA-schema ingestion, zero imputation, feature engineering and robust scaling.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// CSV header names of the eight clinical inputs, in record order.
pub const FEATURE_COLUMNS: [&str; 8] = [
    "Pregnancies",
    "Glucose",
    "BloodPressure",
    "SkinThickness",
    "Insulin",
    "BMI",
    "DiabetesPedigreeFunction",
    "Age",
];

pub const OUTCOME_COLUMN: &str = "Outcome";

/// Names of the scaled model inputs: the eight clinical fields followed by
/// the three engineered interactions.
pub const FEATURE_NAMES: [&str; 11] = [
    "pregnancies",
    "glucose",
    "blood_pressure",
    "skin_thickness",
    "insulin",
    "bmi",
    "pedigree",
    "age",
    "glucose_x_bmi",
    "glucose_per_pressure",
    "bmi_squared",
];

pub const N_RAW_FEATURES: usize = 8;
pub const N_FEATURES: usize = 11;

/// Fixed replacement values for zeros in the physiological fields.
pub const MEDIAN_GLUCOSE: f64 = 120.9;
pub const MEDIAN_BLOOD_PRESSURE: f64 = 69.1;
pub const MEDIAN_SKIN_THICKNESS: f64 = 20.5;
pub const MEDIAN_INSULIN: f64 = 79.8;
pub const MEDIAN_BMI: f64 = 32.0;

/// The nine PIMA columns (eight features then outcome).
pub fn pima_schema() -> Vec<&'static str> {
    let mut schema = FEATURE_COLUMNS.to_vec();
    schema.push(OUTCOME_COLUMN);
    schema
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawRecord {
    pub pregnancies: f64,
    pub glucose: f64,
    pub blood_pressure: f64,
    pub skin_thickness: f64,
    pub insulin: f64,
    pub bmi: f64,
    pub pedigree: f64,
    pub age: f64,
    pub outcome: u8,
}

impl RawRecord {
    pub fn features(&self) -> [f64; N_RAW_FEATURES] {
        [
            self.pregnancies,
            self.glucose,
            self.blood_pressure,
            self.skin_thickness,
            self.insulin,
            self.bmi,
            self.pedigree,
            self.age,
        ]
    }

    pub fn from_features(f: [f64; N_RAW_FEATURES], outcome: u8) -> Self {
        RawRecord {
            pregnancies: f[0],
            glucose: f[1],
            blood_pressure: f[2],
            skin_thickness: f[3],
            insulin: f[4],
            bmi: f[5],
            pedigree: f[6],
            age: f[7],
            outcome,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Original,
    Synthetic,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Original => "original",
            Provenance::Synthetic => "synthetic",
        }
    }
}

/// Records with their provenance flags, one flag per record.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub records: Vec<RawRecord>,
    pub provenance: Vec<Provenance>,
}

impl Dataset {
    pub fn original(records: Vec<RawRecord>) -> Self {
        let provenance = vec![Provenance::Original; records.len()];
        Dataset { records, provenance }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.records.iter().map(|r| r.outcome).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            records: indices.iter().map(|&i| self.records[i]).collect(),
            provenance: indices.iter().map(|&i| self.provenance[i]).collect(),
        }
    }

    /// Write the records as CSV with a trailing `provenance` column.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut writer = csv::Writer::from_path(path)?;
        let mut header: Vec<&str> = pima_schema();
        header.push("provenance");
        writer.write_record(&header)?;
        for (record, provenance) in self.records.iter().zip(&self.provenance) {
            let mut cells: Vec<String> = record.features().iter().map(|v| v.to_string()).collect();
            cells.push(record.outcome.to_string());
            cells.push(provenance.as_str().to_string());
            writer.write_record(&cells)?;
        }
        writer.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// A CSV file held as raw text cells, so scored output can echo the input verbatim.
#[derive(Clone, Debug)]
pub struct CsvTable {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn read(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(file);
        let headers = reader.headers()?.iter().map(str::to_string).collect();
        let mut rows = Vec::new();
        for record in reader.records() {
            let record = record?;
            if record.iter().all(str::is_empty) {
                continue;
            }
            rows.push(record.iter().map(str::to_string).collect());
        }
        Ok(CsvTable { headers, rows })
    }

    fn column(&self, name: &str) -> Option<usize> {
        self.headers.iter().position(|h| h.eq_ignore_ascii_case(name))
    }

    /// Parse rows against `schema` (eight feature column names followed by the
    /// outcome column name). When `require_outcome` is false a missing outcome
    /// column is tolerated and every record gets outcome 0.
    pub fn parse_records(&self, schema: &[&str], require_outcome: bool) -> Result<Vec<RawRecord>> {
        if schema.len() != N_RAW_FEATURES + 1 {
            return Err(Error::Parameter(format!(
                "schema must name {} columns, got {}",
                N_RAW_FEATURES + 1,
                schema.len()
            )));
        }
        let mut feature_idx = [0usize; N_RAW_FEATURES];
        for (slot, name) in feature_idx.iter_mut().zip(schema) {
            *slot = self
                .column(name)
                .ok_or_else(|| Error::MissingColumn(name.to_string()))?;
        }
        let outcome_name = schema[N_RAW_FEATURES];
        let outcome_idx = match self.column(outcome_name) {
            Some(i) => Some(i),
            None if require_outcome => return Err(Error::MissingColumn(outcome_name.to_string())),
            None => None,
        };

        self.rows
            .iter()
            .enumerate()
            .map(|(r, cells)| {
                let row = r + 1;
                let cell = |idx: usize, name: &str| -> Result<f64> {
                    let text = cells.get(idx).map(String::as_str).unwrap_or("");
                    let value: f64 = text.parse().map_err(|_| Error::Parse {
                        row,
                        column: name.to_string(),
                        message: format!("`{text}` is not a number"),
                    })?;
                    if !value.is_finite() {
                        return Err(Error::Parse {
                            row,
                            column: name.to_string(),
                            message: format!("`{text}` is not finite"),
                        });
                    }
                    Ok(value)
                };
                let mut features = [0.0; N_RAW_FEATURES];
                for (k, (&idx, name)) in feature_idx.iter().zip(schema).enumerate() {
                    features[k] = cell(idx, name)?;
                }
                let outcome = match outcome_idx {
                    Some(idx) => {
                        let v = cell(idx, outcome_name)?;
                        if v == 0.0 {
                            0
                        } else if v == 1.0 {
                            1
                        } else {
                            return Err(Error::Parse {
                                row,
                                column: outcome_name.to_string(),
                                message: format!("outcome must be 0 or 1, got {v}"),
                            });
                        }
                    }
                    None => 0,
                };
                Ok(RawRecord::from_features(features, outcome))
            })
            .collect()
    }
}

/// Load a labelled PIMA-schema CSV. Header matching is case-insensitive and
/// row order is preserved.
pub fn load_csv(path: &Path, schema: &[&str]) -> Result<Vec<RawRecord>> {
    CsvTable::read(path)?.parse_records(schema, true)
}

/// Replace zeros in glucose, blood pressure, skin thickness, insulin and BMI
/// by the fixed medians. Zero pregnancies are left alone.
pub fn impute_zeros(records: &[RawRecord]) -> Vec<RawRecord> {
    fn fill(v: f64, median: f64) -> f64 {
        if v == 0.0 {
            median
        } else {
            v
        }
    }
    records
        .iter()
        .map(|r| RawRecord {
            glucose: fill(r.glucose, MEDIAN_GLUCOSE),
            blood_pressure: fill(r.blood_pressure, MEDIAN_BLOOD_PRESSURE),
            skin_thickness: fill(r.skin_thickness, MEDIAN_SKIN_THICKNESS),
            insulin: fill(r.insulin, MEDIAN_INSULIN),
            bmi: fill(r.bmi, MEDIAN_BMI),
            ..*r
        })
        .collect()
}

/// Build the n×11 unscaled feature matrix: the eight raw fields, then
/// glucose×BMI, glucose/blood pressure and BMI².
pub fn engineer_features(records: &[RawRecord]) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((records.len(), N_FEATURES));
    for (i, (r, mut row)) in records.iter().zip(out.rows_mut()).enumerate() {
        if r.blood_pressure == 0.0 {
            return Err(Error::Numeric(format!(
                "glucose/blood_pressure divides by zero at row {i}; impute zeros before engineering"
            )));
        }
        for (k, v) in r.features().into_iter().enumerate() {
            row[k] = v;
        }
        row[8] = r.glucose * r.bmi;
        row[9] = r.glucose / r.blood_pressure;
        row[10] = r.bmi * r.bmi;
    }
    Ok(out)
}

/// Quantile by linear interpolation between order statistics of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Per-column median and interquartile range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalerStats {
    pub median: Vec<f64>,
    pub iqr: Vec<f64>,
}

impl ScalerStats {
    pub fn width(&self) -> usize {
        self.median.len()
    }

    fn check_width(&self, rows: &ArrayView2<f64>) -> Result<()> {
        if rows.ncols() != self.width() {
            return Err(Error::Shape(format!(
                "scaler fitted on {} columns, got {}",
                self.width(),
                rows.ncols()
            )));
        }
        Ok(())
    }

    pub fn apply(&self, rows: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_width(&rows)?;
        let mut out = rows.to_owned();
        for (j, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
            let (m, s) = (self.median[j], self.iqr[j]);
            col.mapv_inplace(|v| (v - m) / s);
        }
        Ok(out)
    }

    pub fn invert(&self, scaled: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_width(&scaled)?;
        let mut out = scaled.to_owned();
        for (j, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
            let (m, s) = (self.median[j], self.iqr[j]);
            col.mapv_inplace(|v| v * s + m);
        }
        Ok(out)
    }
}

/// Fit a robust scaler. A zero IQR is replaced by 1.0.
pub fn fit_robust_scaler(rows: ArrayView2<f64>) -> Result<ScalerStats> {
    if rows.nrows() < 2 {
        return Err(Error::InsufficientData(format!(
            "robust scaler needs at least 2 rows, got {}",
            rows.nrows()
        )));
    }
    let mut median = Vec::with_capacity(rows.ncols());
    let mut iqr = Vec::with_capacity(rows.ncols());
    for col in rows.axis_iter(Axis(1)) {
        let mut sorted = col.to_vec();
        sorted.sort_by(f64::total_cmp);
        median.push(quantile_sorted(&sorted, 0.5));
        let spread = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
        iqr.push(if spread == 0.0 { 1.0 } else { spread });
    }
    Ok(ScalerStats { median, iqr })
}

/// Scaled model inputs with labels, names and provenance.
#[derive(Clone, Debug)]
pub struct FeatureMatrix {
    pub values: Array2<f64>,
    pub labels: Vec<u8>,
    pub feature_names: Vec<String>,
    pub provenance: Vec<Provenance>,
    pub scaler_stats: ScalerStats,
}

impl FeatureMatrix {
    /// Impute, engineer and scale a dataset. When `stats` is `None` the scaler
    /// is fitted on this dataset.
    pub fn prepare(dataset: &Dataset, stats: Option<&ScalerStats>) -> Result<Self> {
        let raw = engineer_features(&impute_zeros(&dataset.records))?;
        let scaler_stats = match stats {
            Some(s) => s.clone(),
            None => fit_robust_scaler(raw.view())?,
        };
        let values = scaler_stats.apply(raw.view())?;
        Ok(FeatureMatrix {
            values,
            labels: dataset.labels(),
            feature_names: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
            provenance: dataset.provenance.clone(),
            scaler_stats,
        })
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}
