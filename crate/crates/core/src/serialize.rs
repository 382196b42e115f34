//! Binary cache format for assembled H-matrices.
//!
//! Everything is little-endian.
//!
//! ```text
//! header   magic "HMAT" | version u32 = 1 | scalar bytes u8 (4 or 8) | 3 zero bytes
//!          N u64 | structure hash u64 | block count u64
//! table    per block, in block-id order:
//!          kind u8 (0 inner, 1 far, 2 near) | 7 zero bytes | rows u64 | cols u64 | rank u64
//! payload  per block, in block-id order:
//!          near: rows*cols scalars, row-major
//!          far:  left factor rows*rank scalars, then right factor cols*rank
//!                scalars, both row-major
//!          inner: nothing
//! ```
//!
//! The structure itself is not stored: a file is read against a rebuilt
//! block-cluster tree and rejected unless the structure hash matches.

use std::io::{Read, Write};
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::cluster::{BlockClusterTree, BlockKind};
use crate::error::{HmError, Result};
use crate::hmatrix::{BlockData, HMatrix};
use crate::lowrank::LowRank;
use crate::scalar::Real;

pub const MAGIC: &[u8; 4] = b"HMAT";
pub const VERSION: u32 = 1;

const KIND_INNER: u8 = 0;
const KIND_FAR: u8 = 1;
const KIND_NEAR: u8 = 2;

fn put_u64<W: Write>(w: &mut W, x: u64) -> Result<()> {
    w.write_all(&x.to_le_bytes())?;
    Ok(())
}

fn put_matrix<T: Real, W: Write>(w: &mut W, m: &DMatrix<T>) -> Result<()> {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            let x = m[(i, j)].as_f64();
            if T::BYTES == 4 {
                w.write_all(&(x as f32).to_le_bytes())?;
            } else {
                w.write_all(&x.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn write_hmatrix<T: Real, W: Write>(h: &HMatrix<T>, mut w: W) -> Result<()> {
    let tree = &h.tree;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[T::BYTES, 0, 0, 0])?;
    put_u64(&mut w, h.size() as u64)?;
    put_u64(&mut w, tree.structure_hash())?;
    put_u64(&mut w, tree.len() as u64)?;
    for (b, data) in h.blocks.iter().enumerate() {
        let (m, n) = tree.shape(b);
        let (kind, rank) = match data {
            BlockData::Inner => (KIND_INNER, 0),
            BlockData::Far(lr) => (KIND_FAR, lr.rank()),
            BlockData::Near(_) => (KIND_NEAR, 0),
        };
        w.write_all(&[kind, 0, 0, 0, 0, 0, 0, 0])?;
        put_u64(&mut w, m as u64)?;
        put_u64(&mut w, n as u64)?;
        put_u64(&mut w, rank as u64)?;
    }
    for data in &h.blocks {
        match data {
            BlockData::Inner => {}
            BlockData::Near(d) => put_matrix(&mut w, d)?,
            BlockData::Far(lr) => {
                put_matrix(&mut w, &lr.left)?;
                put_matrix(&mut w, &lr.right)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

struct Reader<R: Read> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const K: usize>(&mut self, what: &str) -> Result<[u8; K]> {
        let mut buf = [0u8; K];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| HmError::Format(format!("truncated input reading {what}: {e}")))?;
        Ok(buf)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes::<8>(what)?))
    }

    fn matrix<T: Real>(&mut self, rows: usize, cols: usize, width: u8) -> Result<DMatrix<T>> {
        let mut m = DMatrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                let x = if width == 4 {
                    f32::from_le_bytes(self.bytes::<4>("payload")?) as f64
                } else {
                    f64::from_le_bytes(self.bytes::<8>("payload")?)
                };
                m[(i, j)] = T::of(x);
            }
        }
        Ok(m)
    }
}

/// Reads a matrix written by [`write_hmatrix`] onto the structure `tree`.
pub fn read_hmatrix<T: Real, R: Read>(r: R, tree: Arc<BlockClusterTree>) -> Result<HMatrix<T>> {
    let mut rd = Reader { inner: r };
    if &rd.bytes::<4>("magic")? != MAGIC {
        return Err(HmError::Format("not an H-matrix file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(rd.bytes::<4>("version")?);
    if version != VERSION {
        return Err(HmError::Format(format!("unsupported version {version}")));
    }
    let width = rd.bytes::<4>("scalar width")?[0];
    if width != T::BYTES {
        return Err(HmError::Format(format!(
            "file stores {width}-byte scalars, reader expects {}",
            T::BYTES
        )));
    }
    let n = rd.u64("N")? as usize;
    let hash = rd.u64("structure hash")?;
    let count = rd.u64("block count")? as usize;
    if n != tree.size() || hash != tree.structure_hash() || count != tree.len() {
        return Err(HmError::TreeMismatch);
    }
    let mut table = Vec::with_capacity(count);
    for b in 0..count {
        let kind = rd.bytes::<8>("block kind")?[0];
        let rows = rd.u64("rows")? as usize;
        let cols = rd.u64("cols")? as usize;
        let rank = rd.u64("rank")? as usize;
        let expected = match tree.block(b).kind {
            BlockKind::Inner => KIND_INNER,
            BlockKind::FarLeaf => KIND_FAR,
            BlockKind::NearLeaf => KIND_NEAR,
        };
        if kind != expected || (rows, cols) != tree.shape(b) || rank > rows + cols {
            return Err(HmError::Format(format!("block table entry {b} does not match the structure")));
        }
        table.push((kind, rows, cols, rank));
    }
    let mut parts = Vec::new();
    for (b, &(kind, rows, cols, rank)) in table.iter().enumerate() {
        match kind {
            KIND_NEAR => parts.push((b, BlockData::Near(rd.matrix(rows, cols, width)?), false)),
            KIND_FAR => {
                let left = rd.matrix(rows, rank, width)?;
                let right = rd.matrix(cols, rank, width)?;
                parts.push((b, BlockData::Far(LowRank { left, right }), false));
            }
            _ => {}
        }
    }
    let mut trailing = [0u8; 1];
    if rd.inner.read(&mut trailing)? != 0 {
        return Err(HmError::Format("trailing bytes after payload".into()));
    }
    HMatrix::from_parts(tree, parts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::{build_block_cluster_tree, build_cluster_tree};
    use crate::geometry::{build_sphere_mesh, KernelKind};
    use crate::hmatrix::assemble_hmatrix;
    use crate::hmatrix::tests::kernel_setup;
    use crate::lowrank::TruncationPolicy;

    #[test]
    fn round_trip_f64() {
        let (h, _) = kernel_setup(2, 6, KernelKind::Exponential, TruncationPolicy::EpsRank(1e-8));
        let mut buf = Vec::new();
        write_hmatrix(&h, &mut buf).unwrap();
        assert_eq!(&buf[..4], MAGIC);
        let back: HMatrix<f64> = read_hmatrix(&buf[..], h.tree.clone()).unwrap();
        assert_eq!(back.blocks, h.blocks);
    }

    #[test]
    fn layout_size_is_predictable() {
        let (h, _) = kernel_setup(1, 4, KernelKind::Exponential, TruncationPolicy::FixedRank(2));
        let mut buf = Vec::new();
        write_hmatrix(&h, &mut buf).unwrap();
        let header = 4 + 4 + 4 + 3 * 8;
        let table = 32 * h.tree.len();
        assert_eq!(buf.len(), header + table + 8 * h.storage());
    }

    #[test]
    fn round_trip_f32() {
        let panels = build_sphere_mesh(2).unwrap();
        let ct = Arc::new(build_cluster_tree(&panels, 6).unwrap());
        let bct = Arc::new(build_block_cluster_tree(ct, 1.0).unwrap());
        let h = assemble_hmatrix::<f32>(KernelKind::Exponential, &panels, bct.clone(), TruncationPolicy::FixedRank(4))
            .unwrap();
        let mut buf = Vec::new();
        write_hmatrix(&h, &mut buf).unwrap();
        let back: HMatrix<f32> = read_hmatrix(&buf[..], bct.clone()).unwrap();
        assert_eq!(back.blocks, h.blocks);
        assert!(matches!(read_hmatrix::<f64, _>(&buf[..], bct), Err(HmError::Format(_))));
    }

    #[test]
    fn rejects_bad_input() {
        let (h, _) = kernel_setup(2, 6, KernelKind::Exponential, TruncationPolicy::FixedRank(3));
        let mut buf = Vec::new();
        write_hmatrix(&h, &mut buf).unwrap();

        let (other, _) = kernel_setup(2, 12, KernelKind::Exponential, TruncationPolicy::FixedRank(3));
        assert!(matches!(read_hmatrix::<f64, _>(&buf[..], other.tree.clone()), Err(HmError::TreeMismatch)));

        let cut = &buf[..buf.len() - 3];
        assert!(matches!(read_hmatrix::<f64, _>(cut, h.tree.clone()), Err(HmError::Format(_))));

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_hmatrix::<f64, _>(&bad[..], h.tree.clone()), Err(HmError::Format(_))));

        let mut long = buf.clone();
        long.push(0);
        assert!(matches!(read_hmatrix::<f64, _>(&long[..], h.tree.clone()), Err(HmError::Format(_))));
    }
}
