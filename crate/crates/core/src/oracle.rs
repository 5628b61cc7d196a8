//! Entry-wise access to an implicit square matrix.

use nalgebra::DMatrix;

use crate::geometry::{Kernel, PointCloud};

/// A square matrix whose entries are computed on demand.
///
/// Implementations must be safe to call concurrently; assembly and error
/// sweeps evaluate blocks from several threads.
pub trait EntryOracle: Sync {
    fn dim(&self) -> usize;

    /// Entry `(i, j)`; callers guarantee both indices are below [`dim`](Self::dim).
    fn entry(&self, i: usize, j: usize) -> f64;

    fn column_into(&self, j: usize, out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.entry(i, j);
        }
    }
}

/// The kernel matrix `B_ij = K(‖x_i − x_j‖)` of a point cloud.
#[derive(Debug, Clone, Copy)]
pub struct KernelMatrix<'a> {
    cloud: &'a PointCloud,
    kernel: Kernel,
}

impl<'a> KernelMatrix<'a> {
    pub fn new(cloud: &'a PointCloud, kernel: Kernel) -> Self {
        KernelMatrix { cloud, kernel }
    }

    pub fn cloud(&self) -> &'a PointCloud {
        self.cloud
    }

    pub fn kernel(&self) -> Kernel {
        self.kernel
    }
}

impl EntryOracle for KernelMatrix<'_> {
    fn dim(&self) -> usize {
        self.cloud.len()
    }

    #[inline]
    fn entry(&self, i: usize, j: usize) -> f64 {
        self.kernel.eval_sq(self.cloud.dist_sq(i, j))
    }
}

impl EntryOracle for DMatrix<f64> {
    fn dim(&self) -> usize {
        assert_eq!(self.nrows(), self.ncols(), "entry oracle must be square");
        self.nrows()
    }

    fn entry(&self, i: usize, j: usize) -> f64 {
        self[(i, j)]
    }
}

impl<O: EntryOracle + ?Sized> EntryOracle for &O {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn entry(&self, i: usize, j: usize) -> f64 {
        (**self).entry(i, j)
    }

    fn column_into(&self, j: usize, out: &mut [f64]) {
        (**self).column_into(j, out)
    }
}

/// Materializes the full matrix. Only sensible for small dimensions.
pub fn to_dense<O: EntryOracle + ?Sized>(oracle: &O) -> DMatrix<f64> {
    let n = oracle.dim();
    DMatrix::from_fn(n, n, |i, j| oracle.entry(i, j))
}
