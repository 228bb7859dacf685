//! Bilinear sampling with zero padding.
//!
//! Coordinates are continuous `(row, col)` positions in node units: the
//! integer coordinate `(i, j)` sits exactly on node `[i, j]`. Neighbours that
//! fall outside the grid contribute nothing.

use super::Real;

/// One in-bounds neighbour of a sample location.
#[derive(Clone, Copy, Debug)]
pub struct Corner<T> {
    /// Flat node index `row * cols + col`.
    pub node: usize,
    pub weight: T,
    /// d weight / d row
    pub d_row: T,
    /// d weight / d col
    pub d_col: T,
}

/// The (up to four) in-bounds corners of `(row, col)` on a `rows x cols` grid.
/// Non-finite coordinates yield no corners.
#[inline]
pub fn bilinear_corners<T: Real>(rows: usize, cols: usize, row: T, col: T) -> ([Corner<T>; 4], usize) {
    let empty = Corner { node: 0, weight: T::zero(), d_row: T::zero(), d_col: T::zero() };
    let mut out = [empty; 4];
    let mut n = 0;
    if !row.is_finite() || !col.is_finite() {
        return (out, 0);
    }
    let r0f = row.floor();
    let c0f = col.floor();
    // Far out of range: skip before converting to integers.
    let lim = T::lit(1e9);
    if r0f < T::lit(-2.0) || c0f < T::lit(-2.0) || r0f > lim || c0f > lim {
        return (out, 0);
    }
    let fr = row - r0f;
    let fc = col - c0f;
    let r0 = r0f.to_i64().unwrap_or(-2);
    let c0 = c0f.to_i64().unwrap_or(-2);
    let one = T::one();
    let cand = [
        (r0, c0, (one - fr) * (one - fc), -(one - fc), -(one - fr)),
        (r0, c0 + 1, (one - fr) * fc, -fc, one - fr),
        (r0 + 1, c0, fr * (one - fc), one - fc, -fr),
        (r0 + 1, c0 + 1, fr * fc, fc, fr),
    ];
    for (r, c, w, dr, dc) in cand {
        if r >= 0 && c >= 0 && (r as usize) < rows && (c as usize) < cols {
            out[n] = Corner { node: r as usize * cols + c as usize, weight: w, d_row: dr, d_col: dc };
            n += 1;
        }
    }
    (out, n)
}

/// Samples a `[rows, cols, channels]` buffer at one location into `out`.
pub fn sample_bilinear<T: Real>(plane: &[T], rows: usize, cols: usize, row: T, col: T, out: &mut [T]) {
    let ch = out.len();
    out.iter_mut().for_each(|o| *o = T::zero());
    let (corners, n) = bilinear_corners(rows, cols, row, col);
    for c in &corners[..n] {
        let src = &plane[c.node * ch..(c.node + 1) * ch];
        for (o, &v) in out.iter_mut().zip(src) {
            *o = *o + c.weight * v;
        }
    }
}
