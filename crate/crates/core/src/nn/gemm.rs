/// Row-major strided view description for [`sgemm`].
#[derive(Clone, Copy, Debug)]
pub(crate) struct Strides {
    pub row: usize,
    pub col: usize,
}

impl Strides {
    pub fn row_major(cols: usize) -> Self {
        Strides { row: cols, col: 1 }
    }

    pub fn transposed(cols_of_stored: usize) -> Self {
        Strides {
            row: 1,
            col: cols_of_stored,
        }
    }
}

fn extent(rows: usize, cols: usize, s: Strides) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * s.row + (cols - 1) * s.col + 1
    }
}

/// `c = a · b + beta · c` with `a: m×k`, `b: k×n`, `c: m×n` row-major contiguous.
#[allow(clippy::too_many_arguments)]
pub(crate) fn sgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    sa: Strides,
    b: &[f32],
    sb: Strides,
    beta: f32,
    c: &mut [f32],
) {
    assert!(a.len() >= extent(m, k, sa), "lhs too short");
    assert!(b.len() >= extent(k, n, sb), "rhs too short");
    assert!(c.len() >= m * n, "output too short");
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: extents are checked above and `c` does not alias `a` or `b`
    // (distinct borrows).
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.row as isize,
            sa.col as isize,
            b.as_ptr(),
            sb.row as isize,
            sb.col as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
