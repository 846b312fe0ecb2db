//! Matrix file formats used by every CLI subcommand.
//!
//! Text: first line `p n` (ASCII decimals), then `p` lines of `n`
//! space-separated floats. Binary: magic `EOWS`, `u32` LE version (= 1),
//! `u64` LE `p`, `u64` LE `n`, then `p*n` little-endian `f64` row-major.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{input_err, EowsError, Result};
use crate::matcore::Mat;

const MAGIC: &[u8; 4] = b"EOWS";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Text,
    Binary,
}

/// Pick a format from a file extension: `.txt` means text, anything else binary.
pub fn format_for_path(path: &Path) -> Format {
    match path.extension().and_then(|e| e.to_str()) {
        Some("txt") => Format::Text,
        _ => Format::Binary,
    }
}

pub fn write_matrix(path: &Path, m: &Mat, format: Format) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    match format {
        Format::Text => write_text(&mut w, m),
        Format::Binary => write_binary(&mut w, m),
    }
}

/// Read a matrix, sniffing the binary magic and falling back to text.
pub fn read_matrix(path: &Path) -> Result<Mat> {
    let mut file = File::open(path)?;
    let mut head = [0u8; 4];
    let got = file.read(&mut head)?;
    drop(file);
    if got == 4 && &head == MAGIC {
        read_binary(&mut BufReader::new(File::open(path)?))
    } else {
        read_text(&mut BufReader::new(File::open(path)?))
    }
}

pub fn write_text(w: &mut impl Write, m: &Mat) -> Result<()> {
    writeln!(w, "{} {}", m.rows(), m.cols())?;
    for i in 0..m.rows() {
        let row = m.row(i);
        let mut line = String::new();
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                line.push(' ');
            }
            // `{}` on f64 prints the shortest digits that round-trip.
            line.push_str(&format!("{v}"));
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn read_text(r: &mut impl BufRead) -> Result<Mat> {
    let mut header = String::new();
    r.read_line(&mut header)?;
    let dims: Vec<&str> = header.split_whitespace().collect();
    if dims.len() != 2 {
        return input_err("text matrix: header must be 'p n'");
    }
    let p: usize = dims[0].parse().map_err(|_| EowsError::Input("bad row count".into()))?;
    let n: usize = dims[1].parse().map_err(|_| EowsError::Input("bad col count".into()))?;
    if p == 0 || n == 0 {
        return input_err("text matrix: dimensions must be >= 1");
    }
    let mut data = Vec::with_capacity(p * n);
    let mut line = String::new();
    for i in 0..p {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return input_err(format!("text matrix: expected {p} rows, got {i}"));
        }
        let mut count = 0;
        for tok in line.split_whitespace() {
            let v: f64 = tok
                .parse()
                .map_err(|_| EowsError::Input(format!("bad float '{tok}' in row {i}")))?;
            data.push(v);
            count += 1;
        }
        if count != n {
            return input_err(format!("text matrix: row {i} has {count} entries, expected {n}"));
        }
    }
    Ok(Mat::from_vec(p, n, data))
}

pub fn write_binary(w: &mut impl Write, m: &Mat) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(m.rows() as u64).to_le_bytes())?;
    w.write_all(&(m.cols() as u64).to_le_bytes())?;
    for v in m.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_binary(r: &mut impl Read) -> Result<Mat> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return input_err("binary matrix: bad magic");
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != VERSION {
        return input_err(format!("binary matrix: unsupported version {version}"));
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let p = u64::from_le_bytes(b8) as usize;
    r.read_exact(&mut b8)?;
    let n = u64::from_le_bytes(b8) as usize;
    if p == 0 || n == 0 {
        return input_err("binary matrix: dimensions must be >= 1");
    }
    let total = p
        .checked_mul(n)
        .ok_or_else(|| EowsError::Input("binary matrix: dimension overflow".into()))?;
    let mut data = Vec::with_capacity(total);
    for _ in 0..total {
        r.read_exact(&mut b8)?;
        data.push(f64::from_le_bytes(b8));
    }
    Ok(Mat::from_vec(p, n, data))
}
