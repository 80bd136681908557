//! Feature aggregation: stream fusion, adaptive weighted pooling and local
//! cross-channel attention.
//!
//! ```text
//! X_S   = fuse(X_2D, X_3D)                  (sum, or 1x1 conv over [X_2D | X_3D])
//! W     = A * sigmoid(conv3x3(X_S))
//! X_AWP = GAP(W ⊙ X_S)
//! W_C   = sigmoid(conv1d_k(X_AWP) + b)
//! X_FAM = X_S ⊗ W_C                         (channel weight broadcast over h × w)
//! ```

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::ops::{
    conv1d_cross_channel, conv1d_cross_channel_vjp, conv2d, conv2d_vjp, global_average_pool,
    global_average_pool_vjp, ConvKernel,
};
use crate::rng::Rng;
use crate::scalar::{sigmoid, Scalar};

pub const DEFAULT_ATTENTION_KERNEL: usize = 5;
pub const DEFAULT_AMPLIFICATION: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FusionMode {
    Sum,
    Concat,
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionMode::Sum => "sum",
            FusionMode::Concat => "concat",
        })
    }
}

impl FromStr for FusionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(FusionMode::Sum),
            "concat" => Ok(FusionMode::Concat),
            _ => Err(Error::InvalidArgument(format!("unknown fusion mode `{s}`"))),
        }
    }
}

/// Pooling used ahead of the channel attention.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Pooling {
    #[default]
    Awp,
    Gap,
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pooling::Awp => "awp",
            Pooling::Gap => "gap",
        })
    }
}

impl FromStr for Pooling {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "awp" => Ok(Pooling::Awp),
            "gap" => Ok(Pooling::Gap),
            _ => Err(Error::InvalidArgument(format!("unknown pooling `{s}`"))),
        }
    }
}

/// Ablation switches applied on top of a trained module.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FamSwitches {
    pub attention: bool,
    pub pooling: Pooling,
}

impl Default for FamSwitches {
    fn default() -> Self {
        FamSwitches {
            attention: true,
            pooling: Pooling::Awp,
        }
    }
}

/// Which backbone streams are evaluated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum StreamMode {
    Spatial,
    Temporal,
    #[default]
    Both,
}

impl StreamMode {
    pub fn uses_spatial(self) -> bool {
        self != StreamMode::Temporal
    }

    pub fn uses_temporal(self) -> bool {
        self != StreamMode::Spatial
    }

    /// Picks the module input for this mode; the stream(s) it needs must be
    /// present.
    pub fn input<'a, T>(self, x2d: Option<&'a Grid<T>>, x3d: Option<&'a Grid<T>>) -> Result<StreamInput<'a, T>> {
        let missing = |which: &str| Error::InvalidArgument(format!("stream mode `{self}` needs the {which} stream"));
        Ok(match self {
            StreamMode::Spatial => StreamInput::SpatialOnly(x2d.ok_or_else(|| missing("spatial"))?),
            StreamMode::Temporal => StreamInput::TemporalOnly(x3d.ok_or_else(|| missing("temporal"))?),
            StreamMode::Both => StreamInput::Both(x2d.ok_or_else(|| missing("spatial"))?, x3d.ok_or_else(|| missing("temporal"))?),
        })
    }
}

impl fmt::Display for StreamMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StreamMode::Spatial => "spatial",
            StreamMode::Temporal => "temporal",
            StreamMode::Both => "both",
        })
    }
}

impl FromStr for StreamMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spatial" => Ok(StreamMode::Spatial),
            "temporal" => Ok(StreamMode::Temporal),
            "both" => Ok(StreamMode::Both),
            _ => Err(Error::InvalidArgument(format!("unknown stream mode `{s}`"))),
        }
    }
}

/// Which streams feed the module. A missing stream makes fusion a
/// pass-through of the other one.
#[derive(Clone, Copy, Debug)]
pub enum StreamInput<'a, T> {
    Both(&'a Grid<T>, &'a Grid<T>),
    SpatialOnly(&'a Grid<T>),
    TemporalOnly(&'a Grid<T>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct FamParams<T> {
    pub mode: FusionMode,
    /// `c × 2c × 1 × 1`, concat mode only. The 2D stream occupies the first
    /// channel block.
    pub fusion_conv: Option<ConvKernel<T>>,
    /// `c × c × 3 × 3`, padding 1.
    pub awp_conv: ConvKernel<T>,
    pub amplification: T,
    pub attn_kernel: Grid<T>,
    pub attn_bias: T,
}

impl<T: Scalar> FamParams<T> {
    /// Fresh parameters: He-initialized convolutions, zero biases,
    /// amplification 2 and a delta attention kernel.
    pub fn init(mode: FusionMode, channels: usize, rng: &mut Rng) -> Result<Self> {
        Self::init_with_kernel(mode, channels, DEFAULT_ATTENTION_KERNEL, rng)
    }

    pub fn init_with_kernel(mode: FusionMode, channels: usize, k: usize, rng: &mut Rng) -> Result<Self> {
        if k % 2 == 0 {
            return Err(Error::InvalidArgument(format!("attention kernel size must be odd, got {k}")));
        }
        let fusion_conv = match mode {
            FusionMode::Sum => None,
            FusionMode::Concat => {
                let fan_in = 2 * channels;
                Some(ConvKernel::with_padding(
                    Grid::randn(&[channels, 2 * channels, 1, 1], (2.0 / fan_in as f64).sqrt(), rng),
                    Some(Grid::zeros(&[channels])),
                    0,
                )?)
            }
        };
        let fan_in = channels * 9;
        let awp_conv = ConvKernel::with_padding(
            Grid::randn(&[channels, channels, 3, 3], (2.0 / fan_in as f64).sqrt(), rng),
            Some(Grid::zeros(&[channels])),
            1,
        )?;
        let mut attn_kernel = Grid::zeros(&[k]);
        attn_kernel.data_mut()[k / 2] = T::one();
        Ok(FamParams {
            mode,
            fusion_conv,
            awp_conv,
            amplification: T::of(DEFAULT_AMPLIFICATION),
            attn_kernel,
            attn_bias: T::zero(),
        })
    }

    pub fn channels(&self) -> usize {
        self.awp_conv.out_channels()
    }

    /// Trainable values in a fixed order: fusion conv (weights, bias) when
    /// present, AWP conv (weights, bias), attention kernel, attention bias.
    /// The amplification is a fixed hyper-parameter and is not included.
    pub fn to_flat(&self) -> Vec<T> {
        let mut v = Vec::new();
        if let Some(k) = &self.fusion_conv {
            push_kernel(&mut v, k);
        }
        push_kernel(&mut v, &self.awp_conv);
        v.extend_from_slice(self.attn_kernel.data());
        v.push(self.attn_bias);
        v
    }

    pub fn set_flat(&mut self, flat: &[T]) {
        let mut off = 0;
        if let Some(k) = &mut self.fusion_conv {
            off = read_kernel(flat, off, k);
        }
        off = read_kernel(flat, off, &mut self.awp_conv);
        let n = self.attn_kernel.len();
        self.attn_kernel.data_mut().copy_from_slice(&flat[off..off + n]);
        self.attn_bias = flat[off + n];
        debug_assert_eq!(off + n + 1, flat.len());
    }
}

fn push_kernel<T: Scalar>(v: &mut Vec<T>, k: &ConvKernel<T>) {
    v.extend_from_slice(k.weights.data());
    if let Some(b) = &k.bias {
        v.extend_from_slice(b.data());
    }
}

fn read_kernel<T: Scalar>(flat: &[T], mut off: usize, k: &mut ConvKernel<T>) -> usize {
    let n = k.weights.len();
    k.weights.data_mut().copy_from_slice(&flat[off..off + n]);
    off += n;
    if let Some(b) = &mut k.bias {
        let n = b.len();
        b.data_mut().copy_from_slice(&flat[off..off + n]);
        off += n;
    }
    off
}

/// Stacks two `c × h × w` maps along channels.
fn stack_channels<T: Scalar>(a: &Grid<T>, b: &Grid<T>) -> Grid<T> {
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Grid::from_vec(&[a.dim(0) + b.dim(0), a.dim(1), a.dim(2)], data).expect("stacked shape")
}

fn check_map<T: Scalar>(x: &Grid<T>, channels: usize) -> Result<()> {
    if x.rank() != 3 {
        return Err(Error::shape("fam", "rank", 3, x.rank()));
    }
    if x.dim(0) != channels {
        return Err(Error::shape("fam", "channels", channels, x.dim(0)));
    }
    Ok(())
}

/// Fuses the two streams into `X_S`.
pub fn fuse<T: Scalar>(x2d: &Grid<T>, x3d: &Grid<T>, params: &FamParams<T>) -> Result<Grid<T>> {
    x2d.check_same_shape(x3d, "fuse")?;
    check_map(x2d, params.channels())?;
    match params.mode {
        FusionMode::Sum => Ok(x2d + x3d),
        FusionMode::Concat => {
            let k = params
                .fusion_conv
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("concat fusion requires a fusion conv".into()))?;
            conv2d(&stack_channels(x2d, x3d), k)
        }
    }
}

fn fuse_input<T: Scalar>(input: StreamInput<'_, T>, params: &FamParams<T>) -> Result<Grid<T>> {
    match input {
        StreamInput::Both(a, b) => fuse(a, b, params),
        StreamInput::SpatialOnly(x) | StreamInput::TemporalOnly(x) => {
            check_map(x, params.channels())?;
            Ok(x.clone())
        }
    }
}

/// Spatial weighting mask `W = A * sigmoid(conv(X_S))` and its pre-activation.
fn awp_mask<T: Scalar>(xs: &Grid<T>, params: &FamParams<T>) -> Result<(Grid<T>, Grid<T>)> {
    let z = conv2d(xs, &params.awp_conv)?;
    let a = params.amplification;
    let w = z.map(|v| a * sigmoid(v));
    Ok((z, w))
}

/// Adaptive weighted pooling `GAP(W ⊙ X_S)`.
pub fn awp<T: Scalar>(xs: &Grid<T>, params: &FamParams<T>) -> Result<Grid<T>> {
    check_map(xs, params.channels())?;
    let (_, w) = awp_mask(xs, params)?;
    global_average_pool(&w.zip_map(xs, |a, b| a * b))
}

/// `W_C = sigmoid(conv1d(pooled) + bias)`.
pub fn channel_attention<T: Scalar>(pooled: &Grid<T>, params: &FamParams<T>) -> Result<Grid<T>> {
    if pooled.len() != params.channels() {
        return Err(Error::shape("channel_attention", "channels", params.channels(), pooled.len()));
    }
    let a = conv1d_cross_channel(pooled, &params.attn_kernel)?;
    Ok(a.map(|v| sigmoid(v + params.attn_bias)))
}

fn reweight<T: Scalar>(xs: &Grid<T>, wc: &Grid<T>) -> Grid<T> {
    let mut out = xs.clone();
    for c in 0..xs.dim(0) {
        let s = wc.data()[c];
        out.plane_mut(c).iter_mut().for_each(|v| *v *= s);
    }
    out
}

/// Intermediates of one forward pass, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct FamTrace<T> {
    pub switches: FamSwitches,
    pub fused: Grid<T>,
    /// AWP conv output before the amplified sigmoid (AWP pooling only).
    pub awp_pre: Option<Grid<T>>,
    pub awp_mask: Option<Grid<T>>,
    pub pooled: Option<Grid<T>>,
    pub attention: Option<Grid<T>>,
    pub output: Grid<T>,
}

/// `X_FAM` with all components enabled and both streams present.
pub fn fam_forward<T: Scalar>(x2d: &Grid<T>, x3d: &Grid<T>, params: &FamParams<T>) -> Result<Grid<T>> {
    Ok(fam_forward_with(StreamInput::Both(x2d, x3d), params, FamSwitches::default())?.output)
}

pub fn fam_forward_with<T: Scalar>(
    input: StreamInput<'_, T>,
    params: &FamParams<T>,
    switches: FamSwitches,
) -> Result<FamTrace<T>> {
    let fused = fuse_input(input, params)?;
    if !switches.attention {
        return Ok(FamTrace {
            switches,
            output: fused.clone(),
            fused,
            awp_pre: None,
            awp_mask: None,
            pooled: None,
            attention: None,
        });
    }
    let (awp_pre, mask, pooled) = match switches.pooling {
        Pooling::Awp => {
            let (z, w) = awp_mask(&fused, params)?;
            let pooled = global_average_pool(&w.zip_map(&fused, |a, b| a * b))?;
            (Some(z), Some(w), pooled)
        }
        Pooling::Gap => (None, None, global_average_pool(&fused)?),
    };
    let wc = channel_attention(&pooled, params)?;
    let output = reweight(&fused, &wc);
    Ok(FamTrace {
        switches,
        fused,
        awp_pre,
        awp_mask: mask,
        pooled: Some(pooled),
        attention: Some(wc),
        output,
    })
}

/// Gradients of a scalar loss with respect to the module inputs and
/// parameters.
#[derive(Clone, Debug)]
pub struct FamGrads<T> {
    /// `None` for a stream that was not fed.
    pub x2d: Option<Grid<T>>,
    pub x3d: Option<Grid<T>>,
    pub fusion_weights: Option<Grid<T>>,
    pub fusion_bias: Option<Grid<T>>,
    pub awp_weights: Grid<T>,
    pub awp_bias: Grid<T>,
    pub amplification: T,
    pub attn_kernel: Grid<T>,
    pub attn_bias: T,
}

impl<T: Scalar> FamGrads<T> {
    /// Parameter gradients in the order of [`FamParams::to_flat`].
    pub fn to_flat(&self) -> Vec<T> {
        let mut v = Vec::new();
        if let (Some(w), Some(b)) = (&self.fusion_weights, &self.fusion_bias) {
            v.extend_from_slice(w.data());
            v.extend_from_slice(b.data());
        }
        v.extend_from_slice(self.awp_weights.data());
        v.extend_from_slice(self.awp_bias.data());
        v.extend_from_slice(self.attn_kernel.data());
        v.push(self.attn_bias);
        v
    }
}

/// Reverse pass through [`fam_forward_with`] given its trace.
pub fn fam_backward_traced<T: Scalar>(
    input: StreamInput<'_, T>,
    params: &FamParams<T>,
    trace: &FamTrace<T>,
    upstream: &Grid<T>,
) -> Result<FamGrads<T>> {
    upstream.check_same_shape(&trace.output, "fam_backward")?;
    let c = params.channels();
    let xs = &trace.fused;
    let mut d_xs;
    let mut awp_weights = Grid::zeros(params.awp_conv.weights.shape());
    let mut awp_bias = Grid::zeros(&[c]);
    let mut d_amp = T::zero();
    let mut attn_kernel = Grid::zeros(params.attn_kernel.shape());
    let mut attn_bias = T::zero();

    if let (Some(wc), Some(pooled)) = (&trace.attention, &trace.pooled) {
        // X_FAM = X_S ⊗ W_C
        d_xs = reweight(upstream, wc);
        let d_wc: Vec<T> = (0..c)
            .map(|ch| upstream.plane(ch).iter().zip(xs.plane(ch)).map(|(&g, &x)| g * x).sum())
            .collect();
        // W_C = sigmoid(a)
        let d_a = Grid::vector(
            d_wc.iter()
                .zip(wc.data())
                .map(|(&g, &s)| g * s * (T::one() - s))
                .collect(),
        );
        attn_bias = d_a.sum();
        let (d_pooled, d_k) = conv1d_cross_channel_vjp(pooled, &params.attn_kernel, &d_a)?;
        attn_kernel = d_k;
        match trace.switches.pooling {
            Pooling::Gap => {
                d_xs.axpy(T::one(), &global_average_pool_vjp(xs, &d_pooled)?);
            }
            Pooling::Awp => {
                let mask = trace.awp_mask.as_ref().expect("awp trace");
                let pre = trace.awp_pre.as_ref().expect("awp trace");
                let d_tilde = global_average_pool_vjp(xs, &d_pooled)?;
                d_xs.axpy(T::one(), &d_tilde.zip_map(mask, |g, w| g * w));
                let d_mask = d_tilde.zip_map(xs, |g, x| g * x);
                let a = params.amplification;
                d_amp = d_mask.zip_map(pre, |g, z| g * sigmoid(z)).sum();
                let d_pre = d_mask.zip_map(pre, |g, z| {
                    let s = sigmoid(z);
                    g * a * s * (T::one() - s)
                });
                let g = conv2d_vjp(xs, &params.awp_conv, &d_pre)?;
                d_xs.axpy(T::one(), &g.input);
                awp_weights = g.weights;
                awp_bias = g.bias.unwrap_or_else(|| Grid::zeros(&[c]));
            }
        }
    } else {
        d_xs = upstream.clone();
    }

    let (mut x2d, mut x3d, mut fusion_weights, mut fusion_bias) = (None, None, None, None);
    match input {
        StreamInput::SpatialOnly(_) => x2d = Some(d_xs),
        StreamInput::TemporalOnly(_) => x3d = Some(d_xs),
        StreamInput::Both(a, b) => match params.mode {
            FusionMode::Sum => {
                x2d = Some(d_xs.clone());
                x3d = Some(d_xs);
            }
            FusionMode::Concat => {
                let k = params.fusion_conv.as_ref().expect("checked in forward");
                let g = conv2d_vjp(&stack_channels(a, b), k, &d_xs)?;
                let n = a.len();
                x2d = Some(Grid::from_vec(a.shape(), g.input.data()[..n].to_vec())?);
                x3d = Some(Grid::from_vec(b.shape(), g.input.data()[n..].to_vec())?);
                fusion_weights = Some(g.weights);
                fusion_bias = g.bias;
            }
        },
    }
    Ok(FamGrads {
        x2d,
        x3d,
        fusion_weights,
        fusion_bias,
        awp_weights,
        awp_bias,
        amplification: d_amp,
        attn_kernel,
        attn_bias,
    })
}

/// Gradients of `<upstream, X_FAM>` for the full module with both streams.
pub fn fam_backward<T: Scalar>(
    x2d: &Grid<T>,
    x3d: &Grid<T>,
    params: &FamParams<T>,
    upstream: &Grid<T>,
) -> Result<FamGrads<T>> {
    let input = StreamInput::Both(x2d, x3d);
    let trace = fam_forward_with(input, params, FamSwitches::default())?;
    fam_backward_traced(input, params, &trace, upstream)
}
