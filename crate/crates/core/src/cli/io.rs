//! Matrix files and CSV tables.
//!
//! Matrix files are little-endian: the 6-byte magic `LRMAT1`, the row and
//! column counts as `u64`, then the entries as `f64` in column-major order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::adaptivity::CorrectionRecord;
use crate::error::{Error, Result};
use crate::localglobal::Splitting;
use crate::nonlinear::SolveHistory;

pub const MAGIC: &[u8; 6] = b"LRMAT1";

pub fn write_matrix_to<W: Write>(mut w: W, m: &DMatrix<f64>) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(m.nrows() as u64).to_le_bytes())?;
    w.write_all(&(m.ncols() as u64).to_le_bytes())?;
    for v in m.as_slice() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_matrix_from<R: Read>(mut r: R) -> Result<DMatrix<f64>> {
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("file too short for a header".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let mut word = [0u8; 8];
    let mut next_u64 = |r: &mut R| -> Result<u64> {
        r.read_exact(&mut word)
            .map_err(|_| Error::Format("truncated header".into()))?;
        Ok(u64::from_le_bytes(word))
    };
    let rows = next_u64(&mut r)? as usize;
    let cols = next_u64(&mut r)? as usize;
    let len = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::Format(format!("{rows} x {cols} overflows")))?;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != 8 * len {
        return Err(Error::Format(format!(
            "{rows} x {cols} matrix needs {} data bytes, found {}",
            8 * len,
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok(DMatrix::from_vec(rows, cols, data))
}

pub fn write_matrix(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    write_matrix_to(BufWriter::new(File::create(path)?), m)
}

pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let file = File::open(path)
        .map_err(|e| Error::Format(format!("cannot open {}: {e}", path.display())))?;
    read_matrix_from(BufReader::new(file))
}

/// One row per matrix row; the header names the columns.
pub fn write_matrix_csv(path: &Path, m: &DMatrix<f64>, header: &[String]) -> Result<()> {
    if header.len() != m.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "{} header fields for {} columns",
            header.len(),
            m.ncols()
        )));
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for i in 0..m.nrows() {
        w.write_record(m.row(i).iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadDeflectionRow {
    pub increment: usize,
    pub deflection: f64,
    pub load_factor: f64,
}

/// Per-increment solver metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub increment: usize,
    pub load_factor: f64,
    pub max_damage: f64,
    pub newton_iters: usize,
    pub control_bar: Option<usize>,
    pub control_switches: usize,
    pub secant_fallbacks: usize,
    pub reduced_residual: f64,
    pub full_residual: f64,
    pub n_c: usize,
    pub n_f: usize,
    pub linear_solves: usize,
    pub cg_iterations: usize,
    pub direct_solves: usize,
    pub corrections: usize,
}

/// One condensed linear solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CgRow {
    pub increment: usize,
    pub newton_iter: usize,
    pub n_c: usize,
    pub n_f: usize,
    pub iterations: usize,
    pub unaugmented_iterations: Option<usize>,
    pub direct: bool,
    pub final_residual: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplittingRow {
    pub increment: usize,
    pub dof: usize,
}

pub fn load_deflection_rows(h: &SolveHistory) -> Vec<LoadDeflectionRow> {
    h.increments
        .iter()
        .map(|r| LoadDeflectionRow {
            increment: r.index,
            deflection: r.deflection,
            load_factor: r.load_factor,
        })
        .collect()
}

pub fn metrics_rows(h: &SolveHistory, corrections: &[CorrectionRecord]) -> Vec<MetricsRow> {
    h.increments
        .iter()
        .map(|r| {
            let m = &r.metrics;
            MetricsRow {
                increment: r.index,
                load_factor: r.load_factor,
                max_damage: r.damage.max_damage(),
                newton_iters: m.newton_iters,
                control_bar: m.control_bar,
                control_switches: m.control_switches,
                secant_fallbacks: m.secant_fallbacks,
                reduced_residual: m.reduced_residual,
                full_residual: m.full_residual,
                n_c: m.n_c,
                n_f: m.n_f,
                linear_solves: m.linear_solves.len(),
                cg_iterations: m.linear_solves.iter().map(|s| s.iterations).sum(),
                direct_solves: m.linear_solves.iter().filter(|s| s.direct).count(),
                corrections: corrections
                    .iter()
                    .filter(|c| c.increment == r.index)
                    .count(),
            }
        })
        .collect()
}

pub fn cg_rows(h: &SolveHistory) -> Vec<CgRow> {
    h.increments
        .iter()
        .flat_map(|r| {
            r.metrics.linear_solves.iter().map(|s| CgRow {
                increment: r.index,
                newton_iter: s.newton_iter,
                n_c: s.n_c,
                n_f: s.n_f,
                iterations: s.iterations,
                unaugmented_iterations: s.unaugmented_iterations,
                direct: s.direct,
                final_residual: s.residual_history.last().copied(),
            })
        })
        .collect()
}

pub fn splitting_rows(splittings: &[Splitting]) -> Vec<SplittingRow> {
    splittings
        .iter()
        .enumerate()
        .flat_map(|(increment, s)| {
            s.fully_resolved
                .iter()
                .map(move |&dof| SplittingRow { increment, dof })
        })
        .collect()
}

/// Writes `rows` with a header row, even when there are none.
pub fn write_table<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_table<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

pub const LOADDEFL_HEADER: &[&str] = &["increment", "deflection", "load_factor"];
pub const METRICS_HEADER: &[&str] = &[
    "increment",
    "load_factor",
    "max_damage",
    "newton_iters",
    "control_bar",
    "control_switches",
    "secant_fallbacks",
    "reduced_residual",
    "full_residual",
    "n_c",
    "n_f",
    "linear_solves",
    "cg_iterations",
    "direct_solves",
    "corrections",
];
pub const CG_HEADER: &[&str] = &[
    "increment",
    "newton_iter",
    "n_c",
    "n_f",
    "iterations",
    "unaugmented_iterations",
    "direct",
    "final_residual",
];
pub const CORRECTIONS_HEADER: &[&str] = &[
    "increment",
    "newton_iter",
    "reduced_residual",
    "full_residual_before",
    "full_residual_after",
    "krylov_iterations",
    "coupling",
    "n_c_after",
];
pub const SPLITTING_HEADER: &[&str] = &["increment", "dof"];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_round_trip_is_bit_exact() {
        let m = DMatrix::from_fn(5, 3, |i, j| {
            ((i * 7 + j) as f64).sin() * 1e-300_f64.powf((j as f64) / 3.0)
        });
        let mut m = m;
        m[(0, 0)] = -0.0;
        m[(1, 1)] = f64::MIN_POSITIVE / 3.0;
        let mut buf = Vec::new();
        write_matrix_to(&mut buf, &m).unwrap();
        assert_eq!(buf.len(), 6 + 16 + 8 * 15);
        assert_eq!(&buf[..6], b"LRMAT1");
        assert_eq!(u64::from_le_bytes(buf[6..14].try_into().unwrap()), 5);
        // column-major: second entry is row 1 of column 0
        assert_eq!(
            f64::from_le_bytes(buf[30..38].try_into().unwrap()),
            m[(1, 0)]
        );
        let back = read_matrix_from(buf.as_slice()).unwrap();
        assert_eq!(back.shape(), (5, 3));
        for (a, b) in m.iter().zip(back.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn empty_matrix_round_trip() {
        let mut buf = Vec::new();
        write_matrix_to(&mut buf, &DMatrix::zeros(4, 0)).unwrap();
        assert_eq!(read_matrix_from(buf.as_slice()).unwrap().shape(), (4, 0));
    }

    #[test]
    fn malformed_files() {
        assert!(read_matrix_from(&b"LRMAT"[..]).is_err());
        assert!(read_matrix_from(&b"LRMAT2\0\0\0\0\0\0\0\0\0\0\0\0\0\0\0\0"[..]).is_err());
        let mut buf = Vec::new();
        write_matrix_to(&mut buf, &DMatrix::from_element(2, 2, 1.0)).unwrap();
        buf.pop();
        assert!(matches!(
            read_matrix_from(buf.as_slice()),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn tables_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cg.csv");
        let rows = vec![
            CgRow {
                increment: 0,
                newton_iter: 1,
                n_c: 3,
                n_f: 12,
                iterations: 7,
                unaugmented_iterations: None,
                direct: false,
                final_residual: Some(0.1 + 0.2),
            },
            CgRow {
                increment: 1,
                newton_iter: 0,
                n_c: 4,
                n_f: 0,
                iterations: 0,
                unaugmented_iterations: Some(9),
                direct: true,
                final_residual: None,
            },
        ];
        write_table(&path, CG_HEADER, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("increment,newton_iter,n_c,n_f,iterations,unaugmented_iterations,direct,final_residual\n"));
        assert_eq!(read_table::<CgRow>(&path).unwrap(), rows);

        let empty = dir.path().join("corrections.csv");
        write_table::<CorrectionRecord>(&empty, CORRECTIONS_HEADER, &[]).unwrap();
        assert!(read_table::<CorrectionRecord>(&empty).unwrap().is_empty());
    }

    #[test]
    fn csv_export_has_one_line_per_row() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.5, -3.0, 4.0]);
        write_matrix_csv(&path, &m, &["a".into(), "b".into()]).unwrap();
        assert_eq!(
            std::fs::read_to_string(&path).unwrap(),
            "a,b\n1,2.5\n-3,4\n"
        );
        assert!(write_matrix_csv(&path, &m, &["a".into()]).is_err());
    }
}
