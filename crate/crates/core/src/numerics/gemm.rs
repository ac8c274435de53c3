//! Strided single-precision matrix multiply.
//!
//! Output rows are split into fixed-size chunks that may run on the rayon
//! pool. Chunk boundaries never depend on the thread count, and every output
//! element is reduced in the same order within its chunk, so results are
//! bitwise identical to a sequential run.

use rayon::prelude::*;

const ROW_CHUNK: usize = 256;
const PAR_MIN_WORK: usize = 1 << 20;

/// Borrowed strided matrix view.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    data: &'a [f32],
    rows: usize,
    cols: usize,
    rs: isize,
    cs: isize,
}

impl<'a> MatRef<'a> {
    /// Row-major `rows × cols` view.
    pub(crate) fn new(data: &'a [f32], rows: usize, cols: usize) -> Self {
        assert!(data.len() >= rows * cols, "matrix view exceeds buffer");
        MatRef {
            data,
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
        }
    }

    /// Transposed view; no data movement.
    pub(crate) fn t(self) -> Self {
        MatRef {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }
}

/// `c = a · b` (or `c += a · b` when `accumulate`), `c` row-major `a.rows × b.cols`.
pub(crate) fn gemm(a: MatRef<'_>, b: MatRef<'_>, c: &mut [f32], accumulate: bool) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(k, b.rows, "gemm inner dimensions differ");
    assert_eq!(c.len(), m * n, "gemm output buffer has wrong length");
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }

    let run = |row0: usize, rows: usize, out: &mut [f32]| {
        // SAFETY: the views were bounds-checked at construction; `row0 + rows <= m`
        // so every address touched through the strides lies inside `a.data`,
        // `b.data`, and `out` (which holds exactly `rows × n` values).
        unsafe {
            let a_ptr = a.data.as_ptr().offset(row0 as isize * a.rs);
            matrixmultiply::sgemm(
                rows,
                k,
                n,
                1.0,
                a_ptr,
                a.rs,
                a.cs,
                b.data.as_ptr(),
                b.rs,
                b.cs,
                beta,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    };

    if m > ROW_CHUNK && m * n * k >= PAR_MIN_WORK {
        if rayon::current_num_threads() == 1 {
            for (ci, out) in c.chunks_mut(ROW_CHUNK * n).enumerate() {
                run(ci * ROW_CHUNK, out.len() / n, out);
            }
            return;
        }
        c.par_chunks_mut(ROW_CHUNK * n)
            .enumerate()
            .for_each(|(ci, out)| run(ci * ROW_CHUNK, out.len() / n, out));
    } else {
        run(0, m, c);
    }
}
