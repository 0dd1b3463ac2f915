//! Reading and writing measures as JSON (`{"weights": [...], "points": [[...], ...]}`)
//! or CSV (`w,x1,..,xd`). Floats are written in shortest round-trip form.

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, UotError};
use crate::measures::DiscreteMeasure;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Json,
    Csv,
}

impl Format {
    /// Guess from the file extension; JSON unless it ends in `.csv`.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => Self::Csv,
            _ => Self::Json,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct MeasureFile {
    weights: Vec<f64>,
    points: Vec<Vec<f64>>,
}

pub fn measure_from_json(text: &str) -> Result<DiscreteMeasure> {
    let m: MeasureFile = serde_json::from_str(text)?;
    DiscreteMeasure::new(m.weights, m.points)
}

pub fn measure_to_json(m: &DiscreteMeasure) -> Result<String> {
    let file = MeasureFile { weights: m.weights().to_vec(), points: m.points().map(|p| p.to_vec()).collect() };
    Ok(serde_json::to_string(&file)?)
}

pub fn measure_from_csv<R: Read>(reader: R) -> Result<DiscreteMeasure> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.get(0).map(str::trim) != Some("w") {
        return Err(UotError::Parse("CSV measures need a header `w,x1,..,xd`".into()));
    }
    let dim = headers.len() - 1;
    let mut weights = Vec::new();
    let mut points = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let mut vals = Vec::with_capacity(rec.len());
        for field in rec.iter() {
            let v: f64 =
                field.parse().map_err(|_| UotError::Parse(format!("row {}: `{field}` is not a number", line + 1)))?;
            vals.push(v);
        }
        if vals.len() != dim + 1 {
            return Err(UotError::Parse(format!("row {}: expected {} columns", line + 1, dim + 1)));
        }
        weights.push(vals[0]);
        points.push(vals[1..].to_vec());
    }
    if weights.is_empty() {
        return Ok(DiscreteMeasure::null(dim));
    }
    DiscreteMeasure::new(weights, points)
}

pub fn measure_to_csv<W: Write>(m: &DiscreteMeasure, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec!["w".to_string()];
    header.extend((1..=m.dim()).map(|k| format!("x{k}")));
    wtr.write_record(&header)?;
    for (w, p) in m.weights().iter().zip(m.points()) {
        let mut row = vec![fmt_f64(*w)];
        row.extend(p.iter().map(|x| fmt_f64(*x)));
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Shortest decimal that parses back to the same `f64`.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

pub fn read_measure(path: &Path) -> Result<DiscreteMeasure> {
    let file = File::open(path)?;
    match Format::from_path(path) {
        Format::Csv => measure_from_csv(BufReader::new(file)),
        Format::Json => {
            let mut text = String::new();
            BufReader::new(file).read_to_string(&mut text)?;
            measure_from_json(&text)
        }
    }
}

pub fn write_measure(path: &Path, m: &DiscreteMeasure) -> Result<()> {
    match Format::from_path(path) {
        Format::Csv => measure_to_csv(m, File::create(path)?),
        Format::Json => {
            let mut f = File::create(path)?;
            f.write_all(measure_to_json(m)?.as_bytes())?;
            f.write_all(b"\n")?;
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn awkward() -> DiscreteMeasure {
        DiscreteMeasure::new(
            vec![0.1 + 0.2, 1.0 / 3.0, 5e-324],
            vec![vec![std::f64::consts::PI, -0.0], vec![1e300, 2.5e-10], vec![0.7, 0.7]],
        )
        .unwrap()
    }

    #[test]
    fn json_roundtrip_is_exact() {
        let m = awkward();
        let back = measure_from_json(&measure_to_json(&m).unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn csv_roundtrip_is_exact() {
        let m = awkward();
        let mut buf = Vec::new();
        measure_to_csv(&m, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("w,x1,x2\n"));
        assert_eq!(measure_from_csv(&buf[..]).unwrap(), m);
    }

    #[test]
    fn json_strips_zero_atoms_and_rejects_negatives() {
        let m = measure_from_json(r#"{"weights":[1,0,2],"points":[[0],[1],[2]]}"#).unwrap();
        assert_eq!(m.weights(), &[1.0, 2.0]);
        assert!(measure_from_json(r#"{"weights":[-1],"points":[[0]]}"#).is_err());
        assert!(measure_from_json(r#"{"weights":[1]"#).is_err());
    }

    #[test]
    fn csv_rejects_bad_rows() {
        assert!(measure_from_csv("w,x1\n1,abc\n".as_bytes()).is_err());
        assert!(measure_from_csv("w,x1\n1,2,3\n".as_bytes()).is_err());
        assert!(measure_from_csv("a,b\n1,2\n".as_bytes()).is_err());
    }

    #[test]
    fn files_by_extension() {
        let dir = tempfile::tempdir().unwrap();
        let m = awkward();
        for name in ["m.json", "m.csv"] {
            let p = dir.path().join(name);
            write_measure(&p, &m).unwrap();
            assert_eq!(read_measure(&p).unwrap(), m);
        }
    }
}
