//! CSV ingestion and output.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::data::LocatedDataset;
use crate::error::{Result, SpatialError};

/// Which columns play which role. Every other column is a covariate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CsvLayout {
    pub coords: Vec<String>,
    pub response: Option<String>,
    /// Optional identifier column (kept as text).
    pub id: Option<String>,
}

impl CsvLayout {
    pub fn new(coords: &[&str], response: Option<&str>) -> Self {
        CsvLayout {
            coords: coords.iter().map(|s| s.to_string()).collect(),
            response: response.map(str::to_string),
            id: None,
        }
    }
}

pub fn load_csv(path: &Path, layout: &CsvLayout) -> Result<LocatedDataset> {
    let file = std::fs::File::open(path)?;
    read_csv(file, layout)
}

pub fn read_csv<R: Read>(reader: R, layout: &CsvLayout) -> Result<LocatedDataset> {
    if layout.coords.is_empty() {
        return Err(SpatialError::param("at least one coordinate column is required"));
    }
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header.iter().all(|h| h.is_empty()) {
        return Err(SpatialError::Data("file is empty".into()));
    }
    let find = |name: &str| -> Result<usize> {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| SpatialError::MissingColumn(name.to_string()))
    };
    let coord_idx: Vec<usize> = layout.coords.iter().map(|c| find(c)).collect::<Result<_>>()?;
    let response_idx = layout.response.as_deref().map(find).transpose()?;
    let id_idx = layout.id.as_deref().map(find).transpose()?;
    let covariate_idx: Vec<usize> = (0..header.len())
        .filter(|i| !coord_idx.contains(i) && Some(*i) != response_idx && Some(*i) != id_idx)
        .collect();

    let mut ids = Vec::new();
    let mut coords = Vec::new();
    let mut x = Vec::new();
    let mut z = Vec::new();
    for (row, record) in rdr.records().enumerate() {
        let record = record?;
        let row = row + 1;
        let cell = |i: usize| -> Result<f64> {
            let raw = record.get(i).unwrap_or("");
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| SpatialError::NonNumeric {
                    row,
                    column: header[i].clone(),
                    value: raw.to_string(),
                })
        };
        ids.push(match id_idx {
            Some(i) => record.get(i).unwrap_or("").to_string(),
            None => (row - 1).to_string(),
        });
        for &i in &coord_idx {
            coords.push(cell(i)?);
        }
        for &i in &covariate_idx {
            x.push(cell(i)?);
        }
        if let Some(i) = response_idx {
            z.push(cell(i)?);
        }
    }
    let n = ids.len();
    if n == 0 {
        return Err(SpatialError::Data("file has no data rows".into()));
    }
    let ds = LocatedDataset {
        ids,
        coords: DMatrix::from_row_slice(n, coord_idx.len(), &coords),
        x: DMatrix::from_row_slice(n, covariate_idx.len(), &x),
        z: response_idx.map(|_| DVector::from_vec(z)),
        coord_names: layout.coords.clone(),
        covariate_names: covariate_idx.iter().map(|&i| header[i].clone()).collect(),
        response_name: layout.response.clone(),
    };
    ds.validate()?;
    Ok(ds)
}

/// Writes coordinates, covariates and (if present) the response. Values use
/// the shortest representation that parses back to the same `f64`.
pub fn write_csv<W: Write>(ds: &LocatedDataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<&str> = ds.coord_names.iter().map(String::as_str).collect();
    header.extend(ds.covariate_names.iter().map(String::as_str));
    if let (Some(name), Some(_)) = (&ds.response_name, &ds.z) {
        header.push(name);
    }
    w.write_record(&header)?;
    for i in 0..ds.n() {
        let mut row: Vec<String> = ds.coords.row(i).iter().map(|v| v.to_string()).collect();
        row.extend(ds.x.row(i).iter().map(|v| v.to_string()));
        if let Some(z) = &ds.z {
            row.push(z[i].to_string());
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_csv(ds: &LocatedDataset, path: &Path) -> Result<()> {
    write_csv(ds, std::fs::File::create(path)?)
}

/// `id,prediction` rows in input order.
pub fn write_predictions<W: Write>(ids: &[String], predictions: &[f64], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["id", "prediction"])?;
    for (id, p) in ids.iter().zip(predictions) {
        w.write_record([id.as_str(), &p.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
