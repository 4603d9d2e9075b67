//! On-disk formats: raw tensors with a JSON sidecar, 8-bit PGM renders and
//! metric CSVs.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorHeader {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub order: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(n, data.len(), "tensor data"));
        }
        Ok(Self { shape, data })
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }
}

/// `<payload>.json`.
pub fn sidecar_path(payload: &Path) -> PathBuf {
    let mut name = payload.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

/// Writes little-endian f64 values to `path` and the header to its sidecar.
pub fn write_tensor(path: &Path, tensor: &Tensor) -> Result<()> {
    let n: usize = tensor.shape.iter().product();
    if n != tensor.data.len() {
        return Err(Error::dim(n, tensor.data.len(), "tensor data"));
    }
    let mut bytes = Vec::with_capacity(8 * n);
    for v in &tensor.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    let header = TensorHeader {
        shape: tensor.shape.clone(),
        dtype: "f64".into(),
        order: "row-major".into(),
    };
    fs::write(sidecar_path(path), serde_json::to_vec_pretty(&header)?)?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let header: TensorHeader = serde_json::from_slice(&fs::read(sidecar_path(path))?)?;
    if header.dtype != "f64" || header.order != "row-major" {
        return Err(Error::CorruptTensor(format!(
            "unsupported layout dtype={} order={}",
            header.dtype, header.order
        )));
    }
    let bytes = fs::read(path)?;
    let n: usize = header.shape.iter().product();
    if bytes.len() != 8 * n {
        return Err(Error::CorruptTensor(format!(
            "{}: payload has {} bytes, shape {:?} needs {}",
            path.display(),
            bytes.len(),
            header.shape,
            8 * n
        )));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok(Tensor {
        shape: header.shape,
        data,
    })
}

/// Maps `v` to `round(255 * clamp(v, 0, 1))`, halves rounding up.
pub fn pgm_byte(v: f64) -> u8 {
    let c = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    (255.0 * c + 0.5).floor() as u8
}

pub fn encode_pgm(image: &[f64], height: usize, width: usize) -> Result<Vec<u8>> {
    if image.len() != height * width {
        return Err(Error::dim(height * width, image.len(), "pgm image"));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(image.iter().map(|&v| pgm_byte(v)));
    Ok(out)
}

pub fn write_pgm(path: &Path, image: &[f64], height: usize, width: usize) -> Result<()> {
    let bytes = encode_pgm(image, height, width)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

/// One metric value with its provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub experiment: String,
    pub metric: String,
    pub value: f64,
    pub seed: u64,
    pub config_hash: String,
}

pub fn encode_csv(rows: &[CsvRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if rows.is_empty() {
        w.write_record(["experiment", "metric", "value", "seed", "config_hash"])
            .map_err(csv_err)?;
    }
    for row in rows {
        w.serialize(row).map_err(csv_err)?;
    }
    w.into_inner()
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
}

pub fn write_csv(path: &Path, rows: &[CsvRow]) -> Result<()> {
    fs::write(path, encode_csv(rows)?)?;
    Ok(())
}

/// `iteration,loss` lines for an optimizer trace.
pub fn write_trace_csv(path: &Path, trace: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["iteration", "loss"]).map_err(csv_err)?;
    for (i, v) in trace.iter().enumerate() {
        w.write_record([i.to_string(), v.to_string()])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Io(std::io::Error::other(format!("{other:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.f64");
        let data = vec![
            1.5,
            -0.0,
            f64::MIN_POSITIVE,
            1e300,
            std::f64::consts::PI,
            -7.25,
        ];
        let t = Tensor::new(vec![2, 3], data.clone()).unwrap();
        write_tensor(&path, &t).unwrap();
        assert_eq!(fs::metadata(&path).unwrap().len(), 48);
        let back = read_tensor(&path).unwrap();
        assert_eq!(back.shape, vec![2, 3]);
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.data), bits(&data));
    }

    #[test]
    fn truncated_payload_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.f64");
        write_tensor(&path, &Tensor::vector(vec![1.0, 2.0, 3.0])).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..20]).unwrap();
        assert!(matches!(read_tensor(&path), Err(Error::CorruptTensor(_))));
    }

    #[test]
    fn pgm_bytes() {
        let zeros = encode_pgm(&[0.0; 16], 4, 4).unwrap();
        let header = b"P5\n4 4\n255\n";
        assert_eq!(&zeros[..header.len()], header);
        assert_eq!(&zeros[header.len()..], &[0u8; 16]);
        assert_eq!(pgm_byte(0.5), 128);
        assert_eq!(pgm_byte(1.5), 255);
        assert_eq!(pgm_byte(-3.0), 0);
        assert!(encode_pgm(&[0.0; 3], 2, 2).is_err());
    }

    #[test]
    fn csv_has_header_and_provenance() {
        let rows = vec![CsvRow {
            experiment: "e".into(),
            metric: "m".into(),
            value: 0.25,
            seed: 3,
            config_hash: "abc".into(),
        }];
        let text = String::from_utf8(encode_csv(&rows).unwrap()).unwrap();
        assert_eq!(
            text,
            "experiment,metric,value,seed,config_hash\ne,m,0.25,3,abc\n"
        );
    }
}
