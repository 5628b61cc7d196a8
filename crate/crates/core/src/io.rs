//! Persistence: a versioned little-endian binary format for [`HMatrix`] and
//! JSON for [`BuildReport`].
//!
//! Binary layout: magic `HMTOLHM\0`, `u32` version, `u64` N, `f64` eta,
//! `u64` block count, N `u64` permutation entries, then per block the
//! cluster ids and ranges (`u64` each), an admissibility byte, a kind byte
//! (0 dense, 1 low-rank) and the payload in column-major order: the dense
//! entries, or `u64` rank followed by U and V.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::DMatrix;

use crate::cluster::{Block, BlockPartition};
use crate::error::{Error, Result};
use crate::hmatrix::{BlockData, BuildReport, HMatrix};
use crate::lra::LowRankFactors;

pub const MAGIC: &[u8; 8] = b"HMTOLHM\0";
pub const FORMAT_VERSION: u32 = 1;

const KIND_DENSE: u8 = 0;
const KIND_LOWRANK: u8 = 1;

pub fn write_hmatrix<W: Write>(h: &HMatrix, mut w: W) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
    w.write_u64::<LittleEndian>(h.dim() as u64)?;
    w.write_f64::<LittleEndian>(h.partition().eta())?;
    w.write_u64::<LittleEndian>(h.partition().len() as u64)?;
    for &p in h.perm() {
        w.write_u64::<LittleEndian>(p as u64)?;
    }
    for (b, data) in h.blocks() {
        for x in [
            b.row_cluster,
            b.col_cluster,
            b.row_start,
            b.row_end,
            b.col_start,
            b.col_end,
        ] {
            w.write_u64::<LittleEndian>(x as u64)?;
        }
        w.write_u8(u8::from(b.admissible))?;
        match data {
            BlockData::Dense(d) => {
                w.write_u8(KIND_DENSE)?;
                write_f64s(&mut w, d.as_slice())?;
            }
            BlockData::LowRank(f) => {
                w.write_u8(KIND_LOWRANK)?;
                w.write_u64::<LittleEndian>(f.rank() as u64)?;
                write_f64s(&mut w, f.u().as_slice())?;
                write_f64s(&mut w, f.v().as_slice())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_hmatrix<R: Read>(mut r: R) -> Result<HMatrix> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not an H-matrix file".into()));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported format version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let n = read_len(&mut r)?;
    let eta = r.read_f64::<LittleEndian>()?;
    let n_blocks = read_len(&mut r)?;
    let mut perm = Vec::with_capacity(n.min(1 << 24));
    for _ in 0..n {
        perm.push(read_len(&mut r)?);
    }
    let mut blocks = Vec::with_capacity(n_blocks.min(1 << 24));
    let mut data = Vec::with_capacity(n_blocks.min(1 << 24));
    for _ in 0..n_blocks {
        let mut f = [0usize; 6];
        for x in &mut f {
            *x = read_len(&mut r)?;
        }
        let [row_cluster, col_cluster, row_start, row_end, col_start, col_end] = f;
        if row_start >= row_end || col_start >= col_end || row_end > n || col_end > n {
            return Err(Error::Format(format!(
                "block range {row_start}..{row_end} x {col_start}..{col_end} invalid for N = {n}"
            )));
        }
        let admissible = match r.read_u8()? {
            0 => false,
            1 => true,
            x => return Err(Error::Format(format!("bad admissibility flag {x}"))),
        };
        let b = Block {
            row_cluster,
            col_cluster,
            row_start,
            row_end,
            col_start,
            col_end,
            admissible,
        };
        let (m, k) = (b.rows(), b.cols());
        let d = match r.read_u8()? {
            KIND_DENSE => BlockData::Dense(DMatrix::from_vec(m, k, read_f64s(&mut r, m * k)?)),
            KIND_LOWRANK => {
                let rank = read_len(&mut r)?;
                if rank > m.min(k) {
                    return Err(Error::Format(format!("rank {rank} exceeds block size {m}x{k}")));
                }
                let u = DMatrix::from_vec(m, rank, read_f64s(&mut r, m * rank)?);
                let v = DMatrix::from_vec(k, rank, read_f64s(&mut r, k * rank)?);
                BlockData::LowRank(LowRankFactors::new(u, v)?)
            }
            x => return Err(Error::Format(format!("bad block kind {x}"))),
        };
        blocks.push(b);
        data.push(d);
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after last block".into()));
    }
    let partition = BlockPartition::from_blocks(blocks, n, eta)?;
    HMatrix::from_parts(partition, data, perm)
}

pub fn save_hmatrix(h: &HMatrix, path: impl AsRef<Path>) -> Result<()> {
    write_hmatrix(h, BufWriter::new(File::create(path)?))
}

pub fn load_hmatrix(path: impl AsRef<Path>) -> Result<HMatrix> {
    read_hmatrix(BufReader::new(File::open(path)?))
}

pub fn write_report<W: Write>(report: &BuildReport, mut w: W) -> Result<()> {
    serde_json::to_writer_pretty(&mut w, report)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn save_report(report: &BuildReport, path: impl AsRef<Path>) -> Result<()> {
    write_report(report, BufWriter::new(File::create(path)?))
}

pub fn load_report(path: impl AsRef<Path>) -> Result<BuildReport> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

fn read_len<R: Read>(r: &mut R) -> Result<usize> {
    let x = r.read_u64::<LittleEndian>()?;
    usize::try_from(x).map_err(|_| Error::Format(format!("length {x} does not fit in usize")))
}

fn write_f64s<W: Write>(w: &mut W, xs: &[f64]) -> Result<()> {
    for &x in xs {
        w.write_f64::<LittleEndian>(x)?;
    }
    Ok(())
}

fn read_f64s<R: Read>(r: &mut R, len: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0; len];
    r.read_f64_into::<LittleEndian>(&mut out)?;
    Ok(out)
}
