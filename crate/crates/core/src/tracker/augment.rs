use crate::grid::Grid;
use crate::rng::Rng;
use crate::scalar::Scalar;

/// Photometric and geometric variations of the first-frame patch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Augmentation {
    Identity,
    /// Degrees, counter-clockwise about the patch centre.
    Rotate(f64),
    /// 3×3 box blur.
    Blur,
    /// Zeroes one colour channel.
    ChannelDropout(usize),
    /// Shift in patch pixels.
    Translate(f64, f64),
    FlipHorizontal,
    /// Multiplies intensities, clamped to `[0, 1]`.
    Brightness(f64),
}

pub const MAX_ROTATION_DEG: f64 = 15.0;
pub const MAX_TRANSLATION: f64 = 0.1;
pub const MAX_BRIGHTNESS: f64 = 0.1;

/// The identity followed by `n - 1` augmentations cycling through the six
/// kinds with random magnitudes.
pub fn schedule(n: usize, extent: usize, rng: &mut Rng) -> Vec<Augmentation> {
    let e = extent as f64;
    (0..n)
        .map(|k| match k {
            0 => Augmentation::Identity,
            _ => match (k - 1) % 6 {
                0 => Augmentation::Rotate(rng.uniform_in(-MAX_ROTATION_DEG, MAX_ROTATION_DEG)),
                1 => Augmentation::Blur,
                2 => Augmentation::ChannelDropout(rng.below(3)),
                3 => Augmentation::Translate(
                    rng.uniform_in(-MAX_TRANSLATION, MAX_TRANSLATION) * e,
                    rng.uniform_in(-MAX_TRANSLATION, MAX_TRANSLATION) * e,
                ),
                4 => Augmentation::FlipHorizontal,
                _ => Augmentation::Brightness(1.0 + rng.uniform_in(-MAX_BRIGHTNESS, MAX_BRIGHTNESS)),
            },
        })
        .collect()
}

/// Bilinear read with clamped (edge-replicated) indices at continuous
/// position `(x, y)`.
fn sample<T: Scalar>(p: &Grid<T>, c: usize, x: f64, y: f64) -> T {
    let (h, w) = (p.dim(1), p.dim(2));
    let (u, v) = (x - 0.5, y - 0.5);
    let (x0, y0) = (u.floor(), v.floor());
    let (a, b) = (T::of(u - x0), T::of(v - y0));
    let cl = |i: f64, n: usize| (i.max(0.0) as usize).min(n - 1);
    let (xa, xb, ya, yb) = (cl(x0, w), cl(x0 + 1.0, w), cl(y0, h), cl(y0 + 1.0, h));
    let one = T::one();
    (one - b) * ((one - a) * p.at3(c, ya, xa) + a * p.at3(c, ya, xb)) + b * ((one - a) * p.at3(c, yb, xa) + a * p.at3(c, yb, xb))
}

/// Output pixel at `q` reads the input at `inverse(q)`.
fn warp<T: Scalar>(p: &Grid<T>, inverse: impl Fn(f64, f64) -> (f64, f64)) -> Grid<T> {
    let (ch, h, w) = (p.dim(0), p.dim(1), p.dim(2));
    let mut out = Grid::zeros(p.shape());
    for i in 0..h {
        for j in 0..w {
            let (x, y) = inverse(j as f64 + 0.5, i as f64 + 0.5);
            for c in 0..ch {
                *out.at3_mut(c, i, j) = sample(p, c, x, y);
            }
        }
    }
    out
}

impl Augmentation {
    pub fn apply<T: Scalar>(&self, p: &Grid<T>) -> Grid<T> {
        let (h, w) = (p.dim(1), p.dim(2));
        let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
        match *self {
            Augmentation::Identity => p.clone(),
            Augmentation::Rotate(deg) => {
                let (s, c) = deg.to_radians().sin_cos();
                // Inverse rotation.
                warp(p, |x, y| {
                    let (dx, dy) = (x - cx, y - cy);
                    (cx + c * dx + s * dy, cy - s * dx + c * dy)
                })
            }
            Augmentation::Translate(tx, ty) => warp(p, |x, y| (x - tx, y - ty)),
            Augmentation::FlipHorizontal => {
                let mut out = p.clone();
                for c in 0..p.dim(0) {
                    for i in 0..h {
                        for j in 0..w {
                            *out.at3_mut(c, i, j) = p.at3(c, i, w - 1 - j);
                        }
                    }
                }
                out
            }
            Augmentation::Blur => {
                let mut out = Grid::zeros(p.shape());
                let ninth = T::one() / T::of(9.0);
                for c in 0..p.dim(0) {
                    for i in 0..h {
                        for j in 0..w {
                            let mut acc = T::zero();
                            for di in [-1isize, 0, 1] {
                                for dj in [-1isize, 0, 1] {
                                    let ii = (i as isize + di).clamp(0, h as isize - 1) as usize;
                                    let jj = (j as isize + dj).clamp(0, w as isize - 1) as usize;
                                    acc += p.at3(c, ii, jj);
                                }
                            }
                            *out.at3_mut(c, i, j) = acc * ninth;
                        }
                    }
                }
                out
            }
            Augmentation::ChannelDropout(ch) => {
                let mut out = p.clone();
                out.plane_mut(ch).iter_mut().for_each(|v| *v = T::zero());
                out
            }
            Augmentation::Brightness(g) => p.map(|v| (v * T::of(g)).max(T::zero()).min(T::one())),
        }
    }

    /// Where a patch point ends up after the augmentation.
    pub fn map_point(&self, x: f64, y: f64, extent: usize) -> (f64, f64) {
        let c = extent as f64 / 2.0;
        match *self {
            Augmentation::Rotate(deg) => {
                let (s, co) = deg.to_radians().sin_cos();
                let (dx, dy) = (x - c, y - c);
                (c + co * dx - s * dy, c + s * dx + co * dy)
            }
            Augmentation::Translate(tx, ty) => (x + tx, y + ty),
            Augmentation::FlipHorizontal => (extent as f64 - x, y),
            _ => (x, y),
        }
    }
}
