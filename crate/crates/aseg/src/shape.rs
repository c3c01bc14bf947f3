//! Rank-4 tensor shapes in NCHW order.

use std::fmt;

/// Extents of a rank-4 tensor: batch, channels, height, width.
///
/// Lower-rank data is carried with unit extents, e.g. a `[C, d]` projection
/// matrix is stored as `1x1xCxd` and a per-channel bias as `1xCx1x1`.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape(pub [usize; 4]);

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape([n, c, h, w])
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.0[0]
    }

    #[inline]
    pub fn c(&self) -> usize {
        self.0[1]
    }

    #[inline]
    pub fn h(&self) -> usize {
        self.0[2]
    }

    #[inline]
    pub fn w(&self) -> usize {
        self.0[3]
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Flat offset of element `(n, c, h, w)` in row-major NCHW order.
    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        debug_assert!(n < self.n() && c < self.c() && h < self.h() && w < self.w());
        ((n * self.c() + c) * self.h() + h) * self.w() + w
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.0[0], self.0[1], self.0[2], self.0[3])
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl From<[usize; 4]> for Shape {
    fn from(e: [usize; 4]) -> Self {
        Shape(e)
    }
}
