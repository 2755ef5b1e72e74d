//! Right-angle rotations and horizontal flips: the eight symmetries of the
//! square.

use rand::Rng;

/// A row-major f32 image.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl Grid {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Self {
        assert_eq!(pixels.len(), height * width, "pixel buffer must be height×width");
        Self {
            height,
            width,
            pixels,
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.width + col]
    }

    /// Mirror left↔right.
    pub fn hflip(&self) -> Self {
        let mut out = self.pixels.clone();
        for row in out.chunks_mut(self.width) {
            row.reverse();
        }
        Self::new(self.height, self.width, out)
    }

    /// Quarter turn clockwise; an `h×w` grid becomes `w×h`.
    pub fn rot90(&self) -> Self {
        let (h, w) = (self.height, self.width);
        let mut out = Vec::with_capacity(h * w);
        for r in 0..w {
            for c in 0..h {
                out.push(self.get(h - 1 - c, r));
            }
        }
        Self::new(w, h, out)
    }
}

/// `flip` is applied first, then `quarter_turns` clockwise rotations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dihedral {
    pub quarter_turns: u8,
    pub flip: bool,
}

impl Dihedral {
    pub const IDENTITY: Dihedral = Dihedral {
        quarter_turns: 0,
        flip: false,
    };

    pub fn all() -> impl Iterator<Item = Dihedral> {
        (0..8u8).map(Self::from_code)
    }

    /// `code` in `0..8`: bit 2 selects the flip, the low bits the rotation.
    pub fn from_code(code: u8) -> Self {
        Self {
            quarter_turns: code % 4,
            flip: code >= 4,
        }
    }

    /// Uniform over the eight symmetries.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self::from_code(rng.gen_range(0..8))
    }

    pub fn inverse(self) -> Self {
        if self.flip {
            self
        } else {
            Self {
                quarter_turns: (4 - self.quarter_turns) % 4,
                flip: false,
            }
        }
    }

    pub fn apply(self, grid: &Grid) -> Grid {
        let mut g = if self.flip { grid.hflip() } else { grid.clone() };
        for _ in 0..self.quarter_turns {
            g = g.rot90();
        }
        g
    }
}
