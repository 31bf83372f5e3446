//! Serialization of pairwise matrices: CSV with ids in the header, and a
//! binary cache with magic `RGPIMAT1` holding the dimension as a
//! little-endian u64 followed by row-major little-endian doubles.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::posterior::SquareMat;

const MAGIC: &[u8; 8] = b"RGPIMAT1";

pub fn write_matrix_csv(ids: &[String], m: &SquareMat, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    let mut header = vec!["id".to_string()];
    header.extend_from_slice(ids);
    w.write_record(&header)?;
    for i in 0..m.n() {
        let mut row = vec![ids[i].clone()];
        for j in 0..m.n() {
            row.push(format!("{:.6e}", m.get(i, j)));
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_matrix_csv(path: impl AsRef<Path>) -> Result<(Vec<String>, SquareMat)> {
    let mut r = csv::Reader::from_path(path.as_ref())?;
    let ids: Vec<String> = r.headers()?.iter().skip(1).map(|s| s.to_string()).collect();
    let n = ids.len();
    let mut m = SquareMat::zeros(n);
    for (i, record) in r.records().enumerate() {
        let record = record?;
        for j in 0..n {
            let raw = record.get(j + 1).ok_or_else(|| Error::Parse {
                row: i + 2,
                field: format!("col{}", j + 1),
                message: "matrix row too short".into(),
            })?;
            let value: f64 = raw.parse().map_err(|_| Error::Parse {
                row: i + 2,
                field: format!("col{}", j + 1),
                message: format!("cannot parse `{raw}`"),
            })?;
            m.set(i, j, value);
        }
    }
    Ok((ids, m))
}

pub fn write_matrix_binary(m: &SquareMat, path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::fs::File::create(path.as_ref())?;
    f.write_all(MAGIC)?;
    f.write_all(&(m.n() as u64).to_le_bytes())?;
    let mut buf = Vec::with_capacity(m.raw().len() * 8);
    for v in m.raw() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_matrix_binary(path: impl AsRef<Path>) -> Result<SquareMat> {
    let mut f = std::fs::File::open(path.as_ref())?;
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::domain(format!(
            "bad matrix cache magic {:?}",
            &magic
        )));
    }
    let mut nbuf = [0u8; 8];
    f.read_exact(&mut nbuf)?;
    let n = u64::from_le_bytes(nbuf) as usize;
    let mut data = vec![0.0f64; n * n];
    let mut buf = vec![0u8; n * n * 8];
    f.read_exact(&mut buf)?;
    for (i, chunk) in buf.chunks_exact(8).enumerate() {
        data[i] = f64::from_le_bytes(chunk.try_into().unwrap());
    }
    Ok(SquareMat::from_raw(n, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> (Vec<String>, SquareMat) {
        let ids: Vec<String> = (0..4).map(|i| format!("u{i}")).collect();
        let mut m = SquareMat::zeros(4);
        for i in 0..4 {
            for j in 0..4 {
                m.set(i, j, (i * 7 + j) as f64 / 11.0);
            }
        }
        (ids, m)
    }

    #[test]
    fn binary_round_trip_is_exact() {
        let (_, m) = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pi.bin");
        write_matrix_binary(&m, &path).unwrap();
        let back = read_matrix_binary(&path).unwrap();
        assert_eq!(m, back);
        // magic check
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..8], b"RGPIMAT1");
    }

    #[test]
    fn csv_round_trip_within_format_precision() {
        let (ids, m) = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pi.csv");
        write_matrix_csv(&ids, &m, &path).unwrap();
        let (ids2, back) = read_matrix_csv(&path).unwrap();
        assert_eq!(ids, ids2);
        for i in 0..4 {
            for j in 0..4 {
                assert!((m.get(i, j) - back.get(i, j)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn rejects_wrong_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        std::fs::write(&path, b"NOTMAGIC\x00\x00").unwrap();
        assert!(read_matrix_binary(&path).is_err());
    }
}
