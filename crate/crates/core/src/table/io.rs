//! Table readers and writers: delimiter-separated text (RFC 4180 quoting,
//! header row required) and a compact columnar binary format.
//!
//! Binary layout, all integers little-endian:
//!
//! ```text
//! magic "FLTB" | version u32 | n_cols u32 | n_rows u64
//! per column: name_len u32 | name utf-8 | n_rows cells
//! cell: tag u8 (0 null, 1 f64, 2 utf-8 string, 3 bytes) | payload
//!       f64 payload: 8 bytes; string/bytes payload: len u32 | data
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Cell, Column, MultimodalTable};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"FLTB";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct CsvOptions {
    pub delimiter: u8,
    /// Root for relative image paths; defaults to the file's directory.
    pub image_root: Option<std::path::PathBuf>,
}

impl Default for CsvOptions {
    fn default() -> Self {
        CsvOptions {
            delimiter: b',',
            image_root: None,
        }
    }
}

/// Reads a delimited file. Empty fields become `Cell::Null`; everything else
/// is kept as text and parsed lazily by the consumers.
pub fn read_csv(path: impl AsRef<Path>, options: &CsvOptions) -> Result<MultimodalTable> {
    let path = path.as_ref();
    let file = File::open(path)?;
    let table = read_csv_from(file, options.delimiter)?;
    let root = options
        .image_root
        .clone()
        .or_else(|| path.parent().map(Path::to_path_buf));
    Ok(match root {
        Some(r) => table.with_image_root(r),
        None => table,
    })
}

pub(crate) fn read_csv_from<R: Read>(reader: R, delimiter: u8) -> Result<MultimodalTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(true)
        .from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if headers.is_empty() {
        return Err(Error::InvalidTable("missing header row".into()));
    }
    let mut values: Vec<Vec<Cell>> = vec![Vec::new(); headers.len()];
    for record in rdr.records() {
        let record = record?;
        for (i, field) in record.iter().enumerate() {
            values[i].push(if field.is_empty() {
                Cell::Null
            } else {
                Cell::Text(field.to_string())
            });
        }
    }
    MultimodalTable::new(
        headers
            .into_iter()
            .zip(values)
            .map(|(name, values)| Column { name, values })
            .collect(),
    )
}

pub fn write_csv(table: &MultimodalTable, path: impl AsRef<Path>, delimiter: u8) -> Result<()> {
    let file = File::create(path)?;
    write_csv_to(table, file, delimiter)
}

pub(crate) fn write_csv_to<W: Write>(
    table: &MultimodalTable,
    writer: W,
    delimiter: u8,
) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .delimiter(delimiter)
        .from_writer(writer);
    w.write_record(table.column_names())?;
    for r in 0..table.n_rows() {
        w.write_record(table.columns().iter().map(|c| c.values[r].to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_binary(table: &MultimodalTable, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(table.n_cols() as u32).to_le_bytes())?;
    w.write_all(&(table.n_rows() as u64).to_le_bytes())?;
    for col in table.columns() {
        write_blob(&mut w, col.name.as_bytes())?;
        for cell in &col.values {
            match cell {
                Cell::Null => w.write_all(&[0])?,
                Cell::Number(x) => {
                    w.write_all(&[1])?;
                    w.write_all(&x.to_le_bytes())?;
                }
                Cell::Text(s) => {
                    w.write_all(&[2])?;
                    write_blob(&mut w, s.as_bytes())?;
                }
                Cell::Bytes(b) => {
                    w.write_all(&[3])?;
                    write_blob(&mut w, b)?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn write_blob<W: Write>(w: &mut W, data: &[u8]) -> Result<()> {
    let len = u32::try_from(data.len())
        .map_err(|_| Error::InvalidTable("cell larger than 4 GiB".into()))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(data)?;
    Ok(())
}

pub fn read_binary(path: impl AsRef<Path>) -> Result<MultimodalTable> {
    let path = path.as_ref();
    let mut r = BufReader::new(File::open(path)?);
    let bad = |why: &str| Error::InvalidTable(format!("{}: {why}", path.display()));
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("not a columnar table file"));
    }
    if read_u32(&mut r)? != VERSION {
        return Err(bad("unsupported version"));
    }
    let n_cols = read_u32(&mut r)? as usize;
    let n_rows = read_u64(&mut r)? as usize;
    let mut columns = Vec::with_capacity(n_cols);
    for _ in 0..n_cols {
        let name =
            String::from_utf8(read_blob(&mut r)?).map_err(|_| bad("column name is not utf-8"))?;
        let mut values = Vec::with_capacity(n_rows);
        for _ in 0..n_rows {
            let mut tag = [0u8; 1];
            r.read_exact(&mut tag)?;
            values.push(match tag[0] {
                0 => Cell::Null,
                1 => {
                    let mut b = [0u8; 8];
                    r.read_exact(&mut b)?;
                    Cell::Number(f64::from_le_bytes(b))
                }
                2 => Cell::Text(
                    String::from_utf8(read_blob(&mut r)?).map_err(|_| bad("cell is not utf-8"))?,
                ),
                3 => Cell::Bytes(read_blob(&mut r)?),
                _ => return Err(bad("unknown cell tag")),
            });
        }
        columns.push(Column { name, values });
    }
    let table = MultimodalTable::new(columns)?;
    Ok(match path.parent() {
        Some(p) => table.with_image_root(p),
        None => table,
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_blob<R: Read>(r: &mut R) -> Result<Vec<u8>> {
    let len = read_u32(r)? as usize;
    let mut data = vec![0u8; len];
    r.read_exact(&mut data)?;
    Ok(data)
}

/// Loads a table, choosing the reader by file extension: `.fltb` is the
/// binary format, `.tsv` is tab-delimited, anything else is comma-delimited.
pub fn load_table(path: impl AsRef<Path>) -> Result<MultimodalTable> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()) {
        Some("fltb") => read_binary(path),
        Some("tsv") => read_csv(
            path,
            &CsvOptions {
                delimiter: b'\t',
                ..CsvOptions::default()
            },
        ),
        _ => read_csv(path, &CsvOptions::default()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_quoting_and_nulls() {
        let data = "a,b\n\"x, y\",1\n,\"he said \"\"hi\"\"\"\n";
        let t = read_csv_from(data.as_bytes(), b',').unwrap();
        assert_eq!(t.cell("a", 0), Some(&Cell::from("x, y")));
        assert_eq!(t.cell("a", 1), Some(&Cell::Null));
        assert_eq!(t.cell("b", 1), Some(&Cell::from("he said \"hi\"")));
        let mut out = Vec::new();
        write_csv_to(&t, &mut out, b',').unwrap();
        let back = read_csv_from(out.as_slice(), b',').unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn binary_round_trip() {
        let t = MultimodalTable::new(vec![
            Column::new("n", vec![Cell::Number(1.5), Cell::Null]),
            Column::new("s", vec![Cell::from("hé"), Cell::Bytes(vec![0, 255])]),
        ])
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.fltb");
        write_binary(&t, &p).unwrap();
        let back = read_binary(&p).unwrap();
        assert_eq!(back.columns(), t.columns());
    }
}
