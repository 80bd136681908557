use crate::bbox::BoundingBox;
use crate::grid::Grid;
use crate::scalar::Scalar;
use crate::sequence::Image;

/// Affine map between patch and frame coordinates: frame point
/// `(ox + px·scale, oy + py·scale)` corresponds to patch point `(px, py)`.
/// Both use continuous coordinates in which pixel `i` spans `[i, i + 1)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropGeometry {
    pub ox: f64,
    pub oy: f64,
    /// Frame pixels per patch pixel.
    pub scale: f64,
    pub extent: usize,
}

impl CropGeometry {
    /// Square window of side `search_scale·√(w·h)` centred on the box.
    pub fn around(b: &BoundingBox, extent: usize, search_scale: f64) -> Self {
        let side = search_scale * (b.w * b.h).sqrt();
        let (cx, cy) = b.center();
        CropGeometry {
            ox: cx - side / 2.0,
            oy: cy - side / 2.0,
            scale: side / extent as f64,
            extent,
        }
    }

    pub fn to_frame(&self, px: f64, py: f64) -> (f64, f64) {
        (self.ox + px * self.scale, self.oy + py * self.scale)
    }

    pub fn to_patch(&self, fx: f64, fy: f64) -> (f64, f64) {
        ((fx - self.ox) / self.scale, (fy - self.oy) / self.scale)
    }

    pub fn box_to_frame(&self, b: &BoundingBox) -> BoundingBox {
        let (x, y) = self.to_frame(b.x, b.y);
        BoundingBox {
            x,
            y,
            w: b.w * self.scale,
            h: b.h * self.scale,
        }
    }

    pub fn box_to_patch(&self, b: &BoundingBox) -> BoundingBox {
        let (x, y) = self.to_patch(b.x, b.y);
        BoundingBox {
            x,
            y,
            w: b.w / self.scale,
            h: b.h / self.scale,
        }
    }
}

/// Bilinear sample of channel `c` at continuous frame position `(fx, fy)`;
/// indices outside the frame are clamped, which replicates the edge.
#[inline]
fn sample(frame: &Image, fx: f64, fy: f64, c: usize) -> f64 {
    let (u, v) = (fx - 0.5, fy - 0.5);
    let (x0, y0) = (u.floor(), v.floor());
    let (a, b) = (u - x0, v - y0);
    let clamp = |i: f64, n: usize| (i.max(0.0) as usize).min(n - 1);
    let (xa, xb) = (clamp(x0, frame.width), clamp(x0 + 1.0, frame.width));
    let (ya, yb) = (clamp(y0, frame.height), clamp(y0 + 1.0, frame.height));
    let p = |x: usize, y: usize| frame.get(x, y, c) as f64;
    (1.0 - b) * ((1.0 - a) * p(xa, ya) + a * p(xb, ya)) + b * ((1.0 - a) * p(xa, yb) + a * p(xb, yb))
}

/// Resamples the window of `geom` into a `3 × E × E` patch with values in
/// `[0, 1]`.
pub fn crop_with<T: Scalar>(frame: &Image, geom: &CropGeometry) -> Grid<T> {
    let e = geom.extent;
    let mut out = Grid::zeros(&[3, e, e]);
    let d = out.data_mut();
    for i in 0..e {
        for j in 0..e {
            let (fx, fy) = geom.to_frame(j as f64 + 0.5, i as f64 + 0.5);
            for c in 0..3 {
                d[(c * e + i) * e + j] = T::of(sample(frame, fx, fy, c) / 255.0);
            }
        }
    }
    out
}

/// Crops the search region around `b`.
pub fn crop_roi<T: Scalar>(frame: &Image, b: &BoundingBox, extent: usize, search_scale: f64) -> (Grid<T>, CropGeometry) {
    let geom = CropGeometry::around(b, extent, search_scale);
    (crop_with(frame, &geom), geom)
}

/// `3 × clip_len × E × E` clip of `frames` (oldest first, key frame last),
/// all cropped with the same window. Missing leading slots repeat the
/// earliest patch.
pub fn assemble_clip<T: Scalar>(frames: &[&Image], geom: &CropGeometry, clip_len: usize) -> Grid<T> {
    let e = geom.extent;
    let plane = e * e;
    let recent = &frames[frames.len().saturating_sub(clip_len)..];
    let patches: Vec<Grid<T>> = recent.iter().map(|f| crop_with(f, geom)).collect();
    let pad = clip_len - patches.len();
    let mut out = Grid::zeros(&[3, clip_len, e, e]);
    let d = out.data_mut();
    for slot in 0..clip_len {
        let src = &patches[slot.saturating_sub(pad)];
        for c in 0..3 {
            d[(c * clip_len + slot) * plane..][..plane].copy_from_slice(src.plane(c));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(w: usize, h: usize) -> Image {
        Image::from_fn(w, h, |x, y| [(x * 3 % 256) as u8, (y * 5 % 256) as u8, ((x + y) % 256) as u8])
    }

    #[test]
    fn geometry_round_trip() {
        let g = CropGeometry::around(&BoundingBox::new(13.3, 7.1, 21.0, 9.5).unwrap(), 96, 5.0);
        for &(x, y) in &[(0.0, 0.0), (13.7, 88.2), (-40.0, 300.5)] {
            let (fx, fy) = g.to_frame(x, y);
            let (px, py) = g.to_patch(fx, fy);
            assert!((px - x).abs() < 1e-9 && (py - y).abs() < 1e-9);
        }
        let b = BoundingBox::new(3.0, 4.0, 5.0, 6.0).unwrap();
        let r = g.box_to_patch(&g.box_to_frame(&b));
        assert!(r.as_array().iter().zip(b.as_array()).all(|(a, b)| (a - b).abs() < 1e-9));
    }

    #[test]
    fn integer_aligned_crop_copies_pixels() {
        // Box centred so that the window is exactly pixels 20..44 at scale 1.
        let img = ramp(80, 60);
        let b = BoundingBox::from_center(32.0, 30.0, 8.0, 8.0);
        let (p, g) = crop_roi::<f64>(&img, &b, 24, 3.0);
        assert_eq!((g.ox, g.oy, g.scale), (20.0, 18.0, 1.0));
        for i in 0..24 {
            for j in 0..24 {
                for c in 0..3 {
                    assert_eq!(p.at3(c, i, j), img.get(20 + j, 18 + i, c) as f64 / 255.0);
                }
            }
        }
    }

    #[test]
    fn clip_padding_repeats_earliest() {
        let frames: Vec<Image> = (0..3).map(|k| Image::from_fn(40, 40, |x, _| [(x + 50 * k) as u8; 3])).collect();
        let g = CropGeometry::around(&BoundingBox::from_center(20.0, 20.0, 4.0, 4.0), 16, 4.0);
        let refs: Vec<&Image> = frames.iter().collect();
        let clip = assemble_clip::<f64>(&refs, &g, 4);
        let slot = |s: usize| -> Vec<f64> { clip.data()[s * 256..(s + 1) * 256].to_vec() };
        let patch = |k: usize| crop_with::<f64>(&frames[k], &g).plane(0).to_vec();
        assert_eq!(slot(0), patch(0));
        assert_eq!(slot(1), patch(0));
        assert_eq!(slot(2), patch(1));
        assert_eq!(slot(3), patch(2));
    }
}
