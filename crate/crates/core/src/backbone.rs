//! Frozen toy feature extractors for the spatial (2D) and temporal (3D)
//! streams.
//!
//! Both streams are plain stacks of `conv + ReLU` stages. Stage 0 keeps the
//! resolution, every later stage halves it, and the two taps sit after the
//! stages whose cumulative downsampling equals the configured factors. The
//! temporal stream additionally halves its frame axis with 2-tap, stride-2
//! temporal kernels until one frame remains, so both taps of both streams
//! have identical `c × h × w` shapes.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::ops::{conv2d, conv3d, ConvKernel};
use crate::rng::Rng;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BackboneMode {
    Spatial,
    Temporal,
}

impl fmt::Display for BackboneMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackboneMode::Spatial => "spatial",
            BackboneMode::Temporal => "temporal",
        })
    }
}

impl FromStr for BackboneMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spatial" => Ok(BackboneMode::Spatial),
            "temporal" => Ok(BackboneMode::Temporal),
            _ => Err(Error::InvalidArgument(format!("unknown backbone mode `{s}`"))),
        }
    }
}

/// Shallow and deep feature maps of one stream, each `c × h × w`.
#[derive(Clone, Debug, PartialEq)]
pub struct Taps<T> {
    pub shallow: Grid<T>,
    pub deep: Grid<T>,
}

impl<T: Scalar> Taps<T> {
    pub fn zeros_like(other: &Taps<T>) -> Self {
        Taps {
            shallow: Grid::zeros(other.shallow.shape()),
            deep: Grid::zeros(other.deep.shape()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams<T> {
    pub mode: BackboneMode,
    /// Every stage is followed by a ReLU.
    pub stages: Vec<ConvKernel<T>>,
    /// Stage indices whose outputs are the shallow and deep taps.
    pub tap_points: (usize, usize),
    pub downsample_factors: (usize, usize),
    pub channels: usize,
    /// Frames per clip; 1 for the spatial stream.
    pub clip_len: usize,
}

fn log2_exact(v: usize) -> Option<usize> {
    (v.is_power_of_two()).then(|| v.trailing_zeros() as usize)
}

/// Number of halvings `n -> ceil(n / 2)` until one frame remains.
fn temporal_reductions(mut n: usize) -> usize {
    let mut k = 0;
    while n > 1 {
        n = n.div_ceil(2);
        k += 1;
    }
    k
}

pub const INPUT_MEAN: f64 = 0.5;
pub const INPUT_STD: f64 = 0.25;

/// Builds a frozen random backbone.
///
/// Weights are drawn from `N(0, 1/fan_in)`, biases are zero. `patch_extent`
/// is only used to validate the downsampling factors.
pub fn make_toy_backbone<T: Scalar>(
    seed: u64,
    mode: BackboneMode,
    channels: usize,
    downsample_factors: (usize, usize),
    patch_extent: usize,
    clip_len: usize,
) -> Result<BackboneParams<T>> {
    let (ds, dd) = downsample_factors;
    let (ls, ld) = match (log2_exact(ds), log2_exact(dd)) {
        (Some(a), Some(b)) if a < b => (a, b),
        _ => {
            return Err(Error::InvalidArgument(format!(
                "downsample factors must be powers of two with shallow < deep, got ({ds}, {dd})"
            )))
        }
    };
    if patch_extent % dd != 0 {
        return Err(Error::InvalidArgument(format!(
            "patch extent {patch_extent} is not divisible by downsample factor {dd}"
        )));
    }
    if channels == 0 {
        return Err(Error::InvalidArgument("backbone needs at least one channel".into()));
    }
    let clip_len = match mode {
        BackboneMode::Spatial => 1,
        BackboneMode::Temporal => {
            if clip_len == 0 {
                return Err(Error::InvalidArgument("clip length must be positive".into()));
            }
            if temporal_reductions(clip_len) > ls + 1 {
                return Err(Error::InvalidArgument(format!(
                    "clip of {clip_len} frames cannot be reduced to one frame before the shallow tap"
                )));
            }
            clip_len
        }
    };

    let mut rng = Rng::new(seed);
    let mut stages = Vec::with_capacity(ld + 1);
    let mut frames = clip_len;
    for s in 0..=ld {
        let cin = if s == 0 { 3 } else { channels };
        let sp_stride = if s == 0 { 1 } else { 2 };
        let kernel = match mode {
            BackboneMode::Spatial => {
                let fan_in = cin * 9;
                let w = Grid::randn(&[channels, cin, 3, 3], 1.0 / (fan_in as f64).sqrt(), &mut rng);
                ConvKernel::new(
                    w,
                    Some(Grid::zeros(&[channels])),
                    vec![sp_stride, sp_stride],
                    vec![(1, 1), (1, 1)],
                )?
            }
            BackboneMode::Temporal => {
                let (kt, st, pad_front) = if frames > 1 { (2, 2, frames % 2) } else { (1, 1, 0) };
                frames = if frames > 1 { frames.div_ceil(2) } else { 1 };
                let fan_in = cin * kt * 9;
                let w = Grid::randn(&[channels, cin, kt, 3, 3], 1.0 / (fan_in as f64).sqrt(), &mut rng);
                ConvKernel::new(
                    w,
                    Some(Grid::zeros(&[channels])),
                    vec![st, sp_stride, sp_stride],
                    vec![(pad_front, 0), (1, 1), (1, 1)],
                )?
            }
        };
        stages.push(kernel);
    }
    Ok(BackboneParams {
        mode,
        stages,
        tap_points: (ls, ld),
        downsample_factors,
        channels,
        clip_len,
    })
}

fn relu_in_place<T: Scalar>(g: &mut Grid<T>) {
    for v in g.data_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

impl<T: Scalar> BackboneParams<T> {
    fn check_extent(&self, h: usize, w: usize) -> Result<()> {
        let dd = self.downsample_factors.1;
        if h % dd != 0 {
            return Err(Error::shape("backbone", "height", h.next_multiple_of(dd), h));
        }
        if w % dd != 0 {
            return Err(Error::shape("backbone", "width", w.next_multiple_of(dd), w));
        }
        Ok(())
    }

    /// Features of a single `3 × h × w` patch with values in `[0, 1]`.
    pub fn extract_spatial(&self, patch: &Grid<T>) -> Result<Taps<T>> {
        if self.mode != BackboneMode::Spatial {
            return Err(Error::InvalidArgument("extract_spatial needs a spatial backbone".into()));
        }
        if patch.rank() != 3 {
            return Err(Error::shape("extract_spatial", "rank", 3, patch.rank()));
        }
        if patch.dim(0) != 3 {
            return Err(Error::shape("extract_spatial", "channels", 3, patch.dim(0)));
        }
        self.check_extent(patch.dim(1), patch.dim(2))?;
        self.run(patch.clone(), conv2d, |g| Ok(g))
    }

    /// Features of a `3 × f × h × w` clip; the frame axis is reduced to one
    /// and dropped.
    pub fn extract_temporal(&self, clip: &Grid<T>) -> Result<Taps<T>> {
        if self.mode != BackboneMode::Temporal {
            return Err(Error::InvalidArgument("extract_temporal needs a temporal backbone".into()));
        }
        if clip.rank() != 4 {
            return Err(Error::shape("extract_temporal", "rank", 4, clip.rank()));
        }
        if clip.dim(0) != 3 {
            return Err(Error::shape("extract_temporal", "channels", 3, clip.dim(0)));
        }
        if clip.dim(1) != self.clip_len {
            return Err(Error::shape("extract_temporal", "frames", self.clip_len, clip.dim(1)));
        }
        self.check_extent(clip.dim(2), clip.dim(3))?;
        self.run(clip.clone(), conv3d, |g: Grid<T>| {
            let s = g.shape().to_vec();
            if s[1] != 1 {
                return Err(Error::shape("extract_temporal", "tap frames", 1, s[1]));
            }
            g.reshape(&[s[0], s[2], s[3]])
        })
    }

    fn run(
        &self,
        mut x: Grid<T>,
        conv: fn(&Grid<T>, &ConvKernel<T>) -> Result<Grid<T>>,
        squeeze: impl Fn(Grid<T>) -> Result<Grid<T>>,
    ) -> Result<Taps<T>> {
        // Pixels in [0, 1] are centred so that random filters respond to
        // structure rather than mean brightness.
        x = x.map(|v| (v - T::of(INPUT_MEAN)) / T::of(INPUT_STD));
        let mut shallow = None;
        for (s, k) in self.stages.iter().enumerate() {
            x = conv(&x, k)?;
            relu_in_place(&mut x);
            if s == self.tap_points.0 {
                shallow = Some(squeeze(x.clone())?);
            }
            if s == self.tap_points.1 {
                break;
            }
        }
        Ok(Taps {
            shallow: shallow.expect("shallow tap precedes deep tap"),
            deep: squeeze(x)?,
        })
    }
}
