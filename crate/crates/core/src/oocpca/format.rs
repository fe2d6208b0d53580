//! Binary matrix format: a 16-byte header with the row and column counts as
//! little-endian `i64`, then `m * n` little-endian `f64` in row-major order.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;

pub const HEADER_BYTES: u64 = 16;

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Header-described matrix on disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OnDiskMatrix {
    path: PathBuf,
    m: usize,
    n: usize,
}

impl OnDiskMatrix {
    /// Reads and validates the header against the file size.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut header = [0u8; HEADER_BYTES as usize];
        f.read_exact(&mut header)
            .map_err(|_| format_err(path, "file shorter than the 16-byte header"))?;
        let m = i64::from_le_bytes(header[..8].try_into().unwrap());
        let n = i64::from_le_bytes(header[8..].try_into().unwrap());
        if m < 0 || n < 0 {
            return Err(format_err(path, format!("negative dimensions {m} x {n}")));
        }
        let (m, n) = (m as usize, n as usize);
        let expected = (m as u64)
            .checked_mul(n as u64)
            .and_then(|c| c.checked_mul(8))
            .and_then(|b| b.checked_add(HEADER_BYTES))
            .ok_or_else(|| format_err(path, "dimensions overflow"))?;
        let actual = f.metadata().map_err(|e| Error::io(path, e))?.len();
        if actual != expected {
            return Err(format_err(
                path,
                format!("{m} x {n} header needs {expected} bytes, file has {actual}"),
            ));
        }
        Ok(Self {
            path: path.to_path_buf(),
            m,
            n,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn nrows(&self) -> usize {
        self.m
    }

    pub fn ncols(&self) -> usize {
        self.n
    }
}

pub fn write_header<W: Write>(w: &mut W, m: usize, n: usize) -> std::io::Result<()> {
    w.write_all(&(m as i64).to_le_bytes())?;
    w.write_all(&(n as i64).to_le_bytes())
}

/// Serializes `a` in the binary format.
pub fn write_binary<W: Write>(w: W, a: &DenseMatrix<f64>) -> std::io::Result<()> {
    let mut w = BufWriter::new(w);
    write_header(&mut w, a.nrows(), a.ncols())?;
    for x in a.as_slice() {
        w.write_all(&x.to_le_bytes())?;
    }
    w.flush()
}

pub fn write_binary_file(path: impl AsRef<Path>, a: &DenseMatrix<f64>) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_binary(f, a).map_err(|e| Error::io(path, e))
}

/// Loads a whole binary matrix into memory.
pub fn read_binary_file(path: impl AsRef<Path>) -> Result<DenseMatrix<f64>> {
    let meta = OnDiskMatrix::open(&path)?;
    let path = path.as_ref();
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    r.seek(SeekFrom::Start(HEADER_BYTES)).map_err(|e| Error::io(path, e))?;
    let mut values = Vec::with_capacity(meta.m * meta.n);
    let mut buf = [0u8; 8];
    for _ in 0..meta.m * meta.n {
        r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
        values.push(f64::from_le_bytes(buf));
    }
    DenseMatrix::new(meta.m, meta.n, values)
}

fn parse_record(path: &Path, line: usize, record: &csv::StringRecord) -> Result<Vec<f64>> {
    record
        .iter()
        .enumerate()
        .map(|(c, field)| {
            field.trim().parse::<f64>().map_err(|_| {
                format_err(path, format!("line {line}, column {}: cannot parse {field:?}", c + 1))
            })
        })
        .collect()
}

fn csv_reader<R: Read>(r: R, has_header: bool) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(false)
        .from_reader(r)
}

/// Reads a numeric CSV (rows are points/samples) into memory.
pub fn read_csv(path: impl AsRef<Path>, has_header: bool) -> Result<DenseMatrix<f64>> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv_from(BufReader::new(f), has_header, path)
}

pub fn read_csv_from<R: BufRead>(r: R, has_header: bool, path: &Path) -> Result<DenseMatrix<f64>> {
    let mut reader = csv_reader(r, has_header);
    let mut values = Vec::new();
    let mut n = None;
    let mut m = 0;
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| format_err(path, e.to_string()))?;
        let row = parse_record(path, i + 1, &rec)?;
        match n {
            None => n = Some(row.len()),
            Some(n) if n != row.len() => {
                return Err(format_err(path, format!("row {} has {} fields, expected {n}", i + 1, row.len())))
            }
            _ => {}
        }
        values.extend(row);
        m += 1;
    }
    let n = n.ok_or_else(|| format_err(path, "no data rows"))?;
    DenseMatrix::new(m, n, values)
}

/// Converts a numeric CSV to the binary format one row at a time.
/// Returns `(m, n)`.
pub fn csv_to_binary(
    csv_path: impl AsRef<Path>,
    bin_path: impl AsRef<Path>,
    has_header: bool,
) -> Result<(usize, usize)> {
    let (csv_path, bin_path) = (csv_path.as_ref(), bin_path.as_ref());
    let f = File::open(csv_path).map_err(|e| Error::io(csv_path, e))?;
    let mut reader = csv_reader(BufReader::new(f), has_header);
    let out = File::create(bin_path).map_err(|e| Error::io(bin_path, e))?;
    let mut w = BufWriter::new(out);
    let io = |e| Error::io(bin_path, e);
    // placeholder header, patched once the row count is known
    write_header(&mut w, 0, 0).map_err(io)?;
    let mut n = None;
    let mut m = 0usize;
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| format_err(csv_path, e.to_string()))?;
        let row = parse_record(csv_path, i + 1, &rec)?;
        if *n.get_or_insert(row.len()) != row.len() {
            return Err(format_err(csv_path, format!("row {} has {} fields", i + 1, row.len())));
        }
        for x in row {
            w.write_all(&x.to_le_bytes()).map_err(io)?;
        }
        m += 1;
    }
    let n = n.ok_or_else(|| format_err(csv_path, "no data rows"))?;
    let mut f = w.into_inner().map_err(|e| Error::io(bin_path, e.into_error()))?;
    f.seek(SeekFrom::Start(0)).map_err(io)?;
    write_header(&mut f, m, n).map_err(io)?;
    f.flush().map_err(io)?;
    Ok((m, n))
}

/// Writes `a` as CSV with full round-trip precision.
pub fn write_csv<W: Write>(w: W, a: &DenseMatrix<f64>, header: Option<&[String]>) -> std::io::Result<()> {
    let mut w = BufWriter::new(w);
    if let Some(h) = header {
        writeln!(w, "{}", h.join(","))?;
    }
    for row in a.rows_iter() {
        let mut first = true;
        for x in row {
            if !first {
                w.write_all(b",")?;
            }
            first = false;
            write!(w, "{x:?}")?;
        }
        w.write_all(b"\n")?;
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    #[test]
    fn header_layout_is_bit_exact() {
        let a = DenseMatrix::new(2, 3, vec![1.0, -2.0, 0.5, 3.25, 0.0, 1e-300]).unwrap();
        let mut buf = Vec::new();
        write_binary(&mut buf, &a).unwrap();
        assert_eq!(buf.len(), 16 + 6 * 8);
        assert_eq!(&buf[..8], &2i64.to_le_bytes());
        assert_eq!(&buf[8..16], &3i64.to_le_bytes());
        assert_eq!(&buf[16..24], &1.0f64.to_le_bytes());
        assert_eq!(&buf[16 + 5 * 8..], &1e-300f64.to_le_bytes());
    }

    #[test]
    fn binary_round_trip_and_size_check() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.bin");
        let a = DenseMatrix::from_fn(7, 4, |i, j| (i * 10 + j) as f64 * 0.1);
        write_binary_file(&p, &a).unwrap();
        let meta = OnDiskMatrix::open(&p).unwrap();
        assert_eq!((meta.nrows(), meta.ncols()), (7, 4));
        assert_eq!(read_binary_file(&p).unwrap(), a);

        let mut bytes = std::fs::read(&p).unwrap();
        bytes.pop();
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(OnDiskMatrix::open(&p), Err(Error::Format { .. })));
        assert!(matches!(OnDiskMatrix::open(dir.path().join("missing.bin")), Err(Error::Io { .. })));
    }

    #[test]
    fn csv_parsing() {
        let text = "a,b\n1,2.5\n-3e2, 4\n";
        let a = read_csv_from(Cursor::new(text), true, Path::new("mem")).unwrap();
        assert_eq!(a.as_slice(), &[1.0, 2.5, -300.0, 4.0]);
        assert!(read_csv_from(Cursor::new(text), false, Path::new("mem")).is_err());
        assert!(read_csv_from(Cursor::new("1,2\n3\n"), false, Path::new("mem")).is_err());
    }

    #[test]
    fn csv_to_binary_matches_in_memory() {
        let dir = tempfile::tempdir().unwrap();
        let csv_path = dir.path().join("a.csv");
        let a = DenseMatrix::from_fn(5, 3, |i, j| (i as f64 - 2.0) / (j as f64 + 3.0));
        write_csv(File::create(&csv_path).unwrap(), &a, None).unwrap();
        let bin = dir.path().join("a.bin");
        assert_eq!(csv_to_binary(&csv_path, &bin, false).unwrap(), (5, 3));
        assert_eq!(read_binary_file(&bin).unwrap(), a);
    }
}
