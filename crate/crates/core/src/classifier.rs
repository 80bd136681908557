//! Online target classifier: a two-layer fully convolutional filter fit by
//! Gauss-Newton with conjugate-gradient inner solves over a weighted sample
//! memory.
//!
//! The filter is `f(x; w) = phi2(w2 * phi1(w1 * x))` with a `1×1` channel
//! reduction `w1` and a `4×4` spatial kernel `w2`. The objective is
//!
//! ```text
//! L(w) = Σ_j γ_j ‖f(x_j; w) − y_j‖² + λ1 ‖w1‖² + λ2 ‖w2‖²
//! ```

use std::fmt;

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::ops::{conv2d, conv2d_vjp, ConvKernel};
use crate::rng::Rng;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Identity,
    LeakyRelu(f64),
}

impl Activation {
    #[inline]
    fn apply<T: Scalar>(self, v: T) -> T {
        match self {
            Activation::Identity => v,
            Activation::LeakyRelu(s) => {
                if v >= T::zero() {
                    v
                } else {
                    T::of(s) * v
                }
            }
        }
    }

    #[inline]
    fn derivative<T: Scalar>(self, v: T) -> T {
        match self {
            Activation::Identity => T::one(),
            Activation::LeakyRelu(s) => {
                if v >= T::zero() {
                    T::one()
                } else {
                    T::of(s)
                }
            }
        }
    }
}

/// Which filter layers an optimization run may change.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Which {
    Both,
    W2Only,
}

impl fmt::Display for Which {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Which::Both => "both",
            Which::W2Only => "w2-only",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierConfig {
    pub hidden_channels: usize,
    pub kernel_size: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub phi1: Activation,
    pub phi2: Activation,
    pub capacity: usize,
    pub learning_rate: f64,
    pub sigma_factor: f64,
    /// Gauss-Newton × CG iterations for the first-frame fit.
    pub init_budget: (usize, usize),
    /// Gauss-Newton × CG iterations for scheduled updates.
    pub update_budget: (usize, usize),
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            hidden_channels: 64,
            kernel_size: 4,
            lambda1: 1e-2,
            lambda2: 1e-2,
            phi1: Activation::Identity,
            phi2: Activation::Identity,
            capacity: 50,
            learning_rate: 0.01,
            sigma_factor: 0.25,
            init_budget: (6, 30),
            update_budget: (1, 5),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample<T> {
    pub x: Grid<T>,
    pub y: Grid<T>,
    pub weight: T,
    /// First-frame samples are never evicted.
    pub initial: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierState<T> {
    pub config: ClassifierConfig,
    /// `hidden × c × 1 × 1`, no bias.
    pub w1: ConvKernel<T>,
    /// `1 × hidden × k × k`, no bias, padded to keep the spatial extent.
    pub w2: ConvKernel<T>,
    pub memory: Vec<Sample<T>>,
}

/// Padding that keeps the extent for a kernel of size `k`; even kernels pad
/// one more cell after than before.
fn same_padding(k: usize) -> (usize, usize) {
    ((k - 1) / 2, k / 2)
}

/// Position and size of the feature grid relative to the patch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeatureGeometry {
    pub height: usize,
    pub width: usize,
    /// Patch pixels per feature cell.
    pub stride: f64,
}

impl FeatureGeometry {
    /// Patch coordinate of the center of cell `(row, col)` (fractional cells allowed).
    pub fn cell_to_patch(&self, row: f64, col: f64) -> (f64, f64) {
        ((col + 0.5) * self.stride, (row + 0.5) * self.stride)
    }

    /// Cell coordinates `(row, col)` of a patch point.
    pub fn patch_to_cell(&self, x: f64, y: f64) -> (f64, f64) {
        (y / self.stride - 0.5, x / self.stride - 0.5)
    }
}

/// Gaussian label centred on the target, with `σ = sigma_factor·√(w·h)`
/// measured in feature cells.
///
/// `center` and `size` are in patch pixels.
pub fn make_label_map<T: Scalar>(
    center: (f64, f64),
    size: (f64, f64),
    geom: &FeatureGeometry,
    sigma_factor: f64,
) -> Result<Grid<T>> {
    let (w, h) = (size.0 / geom.stride, size.1 / geom.stride);
    if !(w > 0.0 && h > 0.0 && w.is_finite() && h.is_finite()) {
        return Err(Error::InvalidArgument(format!("degenerate target size {w}×{h}")));
    }
    let extent_x = geom.width as f64 * geom.stride;
    let extent_y = geom.height as f64 * geom.stride;
    if !(0.0..extent_x).contains(&center.0) || !(0.0..extent_y).contains(&center.1) {
        return Err(Error::InvalidArgument(format!(
            "target center ({}, {}) outside the {extent_x}×{extent_y} patch",
            center.0, center.1
        )));
    }
    let sigma = sigma_factor * (w * h).sqrt();
    let (cr, cc) = geom.patch_to_cell(center.0, center.1);
    let denom = 2.0 * sigma * sigma;
    Ok(Grid::from_fn(&[1, geom.height, geom.width], |i| {
        let (r, c) = ((i / geom.width) as f64, (i % geom.width) as f64);
        T::of((-((r - cr).powi(2) + (c - cc).powi(2)) / denom).exp())
    }))
}

/// Peak of a response map.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Peak {
    pub row: usize,
    pub col: usize,
    /// Sub-cell offsets in `[-0.5, 0.5]`.
    pub row_offset: f64,
    pub col_offset: f64,
    pub score: f64,
}

impl Peak {
    pub fn position(&self) -> (f64, f64) {
        (self.row as f64 + self.row_offset, self.col as f64 + self.col_offset)
    }
}

/// Vertex of the parabola through `(−1, a), (0, b), (1, c)`, clamped to ±0.5.
fn parabola_offset(a: f64, b: f64, c: f64) -> f64 {
    let denom = 2.0 * (a - 2.0 * b + c);
    if denom >= 0.0 {
        // Not a strict maximum along this axis.
        return 0.0;
    }
    ((a - c) / denom).clamp(-0.5, 0.5)
}

/// Arg-max cell (ties to the smallest `(row, col)`) with quadratic sub-cell
/// refinement. Missing neighbours at the border leave that axis unrefined.
pub fn locate_peak<T: Scalar>(response: &Grid<T>) -> Peak {
    let (h, w) = (response.dim(response.rank() - 2), response.dim(response.rank() - 1));
    let d = response.data();
    let mut best = 0;
    for (i, &v) in d.iter().enumerate().take(h * w) {
        if v > d[best] {
            best = i;
        }
    }
    let (row, col) = (best / w, best % w);
    let at = |r: usize, c: usize| d[r * w + c].as_f64();
    let b = at(row, col);
    let col_offset = if col > 0 && col + 1 < w {
        parabola_offset(at(row, col - 1), b, at(row, col + 1))
    } else {
        0.0
    };
    let row_offset = if row > 0 && row + 1 < h {
        parabola_offset(at(row - 1, col), b, at(row + 1, col))
    } else {
        0.0
    };
    Peak {
        row,
        col,
        row_offset,
        col_offset,
        score: b,
    }
}

/// Forward intermediates at one linearization point.
struct Linearization<T> {
    z: Grid<T>,
    a: Grid<T>,
    s: Grid<T>,
}

impl<T: Scalar> ClassifierState<T> {
    /// New filter for `channels`-channel features: `w1` random with
    /// `N(0, 1/channels)` entries, `w2` zero, empty memory.
    pub fn new(channels: usize, config: ClassifierConfig, rng: &mut Rng) -> Result<Self> {
        if config.kernel_size == 0 || config.hidden_channels == 0 {
            return Err(Error::InvalidArgument("classifier geometry must be positive".into()));
        }
        let w1 = ConvKernel::with_padding(
            Grid::randn(&[config.hidden_channels, channels, 1, 1], 1.0 / (channels as f64).sqrt(), rng),
            None,
            0,
        )?;
        let k = config.kernel_size;
        let pad = same_padding(k);
        let w2 = ConvKernel::new(
            Grid::zeros(&[1, config.hidden_channels, k, k]),
            None,
            vec![1, 1],
            vec![pad, pad],
        )?;
        Ok(ClassifierState {
            config,
            w1,
            w2,
            memory: Vec::new(),
        })
    }

    pub fn channels(&self) -> usize {
        self.w1.in_channels()
    }

    fn linearize(&self, x: &Grid<T>) -> Result<Linearization<T>> {
        if x.rank() != 3 || x.dim(0) != self.channels() {
            return Err(Error::shape("classifier_forward", "channels", self.channels(), x.dim(0)));
        }
        let z = conv2d(x, &self.w1)?;
        let phi1 = self.config.phi1;
        let a = z.map(|v| phi1.apply(v));
        let s = conv2d(&a, &self.w2)?;
        Ok(Linearization { z, a, s })
    }

    /// Response map `1 × h × w`.
    pub fn forward(&self, x: &Grid<T>) -> Result<Grid<T>> {
        let phi2 = self.config.phi2;
        Ok(self.linearize(x)?.s.map(|v| phi2.apply(v)))
    }

    pub fn objective(&self) -> Result<T> {
        if self.memory.is_empty() {
            return Err(Error::InvalidArgument("objective of an empty sample memory".into()));
        }
        let mut loss = T::zero();
        for s in &self.memory {
            let f = self.forward(&s.x)?;
            loss += s.weight * f.zip_map(&s.y, |a, b| (a - b) * (a - b)).sum();
        }
        Ok(loss + self.regularization())
    }

    fn regularization(&self) -> T {
        T::of(self.config.lambda1) * self.w1.weights.norm_sq() + T::of(self.config.lambda2) * self.w2.weights.norm_sq()
    }

    /// Replaces the memory with equally weighted, non-evictable samples.
    pub fn init_memory(&mut self, samples: Vec<(Grid<T>, Grid<T>)>) -> Result<()> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("initial memory needs at least one sample".into()));
        }
        let w = T::one() / T::of_usize(samples.len());
        self.memory = samples
            .into_iter()
            .map(|(x, y)| Sample {
                x,
                y,
                weight: w,
                initial: true,
            })
            .collect();
        Ok(())
    }

    /// Adds a sample with weight `η`, decays the others by `1 − η` and
    /// renormalizes. A sample added to an empty memory gets weight 1 and is
    /// treated as an initial sample. Over capacity, the lowest-weight
    /// non-initial sample (oldest on ties) is evicted.
    pub fn memory_update(&mut self, x: Grid<T>, y: Grid<T>, eta: f64) -> Result<()> {
        if let Some(first) = self.memory.first() {
            x.check_same_shape(&first.x, "memory_update")?;
            y.check_same_shape(&first.y, "memory_update")?;
        }
        if self.memory.is_empty() {
            self.memory.push(Sample {
                x,
                y,
                weight: T::one(),
                initial: true,
            });
            return Ok(());
        }
        let eta = T::of(eta);
        for s in &mut self.memory {
            s.weight *= T::one() - eta;
        }
        self.memory.push(Sample {
            x,
            y,
            weight: eta,
            initial: false,
        });
        if self.memory.len() > self.config.capacity {
            let victim = self
                .memory
                .iter()
                .enumerate()
                .filter(|(_, s)| !s.initial)
                .fold(None::<(usize, T)>, |best, (i, s)| match best {
                    Some((_, w)) if w <= s.weight => best,
                    _ => Some((i, s.weight)),
                });
            if let Some((i, _)) = victim {
                self.memory.remove(i);
            }
        }
        let total: T = self.memory.iter().map(|s| s.weight).sum();
        for s in &mut self.memory {
            s.weight /= total;
        }
        Ok(())
    }

    fn n_active(&self, which: Which) -> (usize, usize) {
        let n1 = match which {
            Which::Both => self.w1.weights.len(),
            Which::W2Only => 0,
        };
        (n1, self.w2.weights.len())
    }

    fn active_params(&self, which: Which) -> Vec<T> {
        let mut v = Vec::new();
        if which == Which::Both {
            v.extend_from_slice(self.w1.weights.data());
        }
        v.extend_from_slice(self.w2.weights.data());
        v
    }

    fn set_active_params(&mut self, which: Which, v: &[T]) {
        let (n1, _) = self.n_active(which);
        if which == Which::Both {
            self.w1.weights.data_mut().copy_from_slice(&v[..n1]);
        }
        self.w2.weights.data_mut().copy_from_slice(&v[n1..]);
    }

    /// `J v` for one sample at a linearization point.
    fn jvp(&self, x: &Grid<T>, lin: &Linearization<T>, which: Which, v: &[T]) -> Result<Grid<T>> {
        let (n1, _) = self.n_active(which);
        let v2 = ConvKernel::new(
            Grid::from_vec(self.w2.weights.shape(), v[n1..].to_vec())?,
            None,
            self.w2.stride.clone(),
            self.w2.padding.clone(),
        )?;
        let mut ds = conv2d(&lin.a, &v2)?;
        if which == Which::Both {
            let v1 = ConvKernel::new(
                Grid::from_vec(self.w1.weights.shape(), v[..n1].to_vec())?,
                None,
                self.w1.stride.clone(),
                self.w1.padding.clone(),
            )?;
            let phi1 = self.config.phi1;
            let da = conv2d(x, &v1)?.zip_map(&lin.z, |d, z| d * phi1.derivative(z));
            ds.axpy(T::one(), &conv2d(&da, &self.w2)?);
        }
        let phi2 = self.config.phi2;
        Ok(ds.zip_map(&lin.s, |d, s| d * phi2.derivative(s)))
    }

    /// `Jᵀ u` for one sample, accumulated into `out` with factor `scale`.
    fn vjp_into(
        &self,
        x: &Grid<T>,
        lin: &Linearization<T>,
        which: Which,
        u: &Grid<T>,
        scale: T,
        out: &mut [T],
    ) -> Result<()> {
        let (n1, _) = self.n_active(which);
        let phi2 = self.config.phi2;
        let ds = u.zip_map(&lin.s, |g, s| g * phi2.derivative(s));
        let g2 = conv2d_vjp(&lin.a, &self.w2, &ds)?;
        for (o, &g) in out[n1..].iter_mut().zip(g2.weights.data()) {
            *o += scale * g;
        }
        if which == Which::Both {
            let phi1 = self.config.phi1;
            let dz = g2.input.zip_map(&lin.z, |g, z| g * phi1.derivative(z));
            let g1 = conv2d_vjp(x, &self.w1, &dz)?;
            for (o, &g) in out[..n1].iter_mut().zip(g1.weights.data()) {
                *o += scale * g;
            }
        }
        Ok(())
    }

    fn lambdas(&self, which: Which) -> Vec<T> {
        let (n1, n2) = self.n_active(which);
        let mut l = vec![T::of(self.config.lambda1); n1];
        l.extend(std::iter::repeat_n(T::of(self.config.lambda2), n2));
        l
    }

    /// Runs `n_gn` Gauss-Newton steps with `n_cg` CG iterations each and
    /// returns the loss trace (initial loss followed by the loss after every
    /// step). A step that would raise the loss is halved until it does not;
    /// after 30 halvings it is dropped, so the trace never increases.
    pub fn optimize(&mut self, n_gn: usize, n_cg: usize, which: Which) -> Result<Vec<f64>> {
        if self.memory.is_empty() {
            return Err(Error::InvalidArgument("optimize with an empty sample memory".into()));
        }
        let mut loss = self.objective()?;
        let mut trace = vec![loss.as_f64()];
        if !loss.is_finite() {
            return Err(Error::SolverNonFinite { step: 0, trace });
        }
        for step in 1..=n_gn {
            let lins = self
                .memory
                .iter()
                .map(|s| self.linearize(&s.x))
                .collect::<Result<Vec<_>>>()?;
            let w = self.active_params(which);
            let lambdas = self.lambdas(which);

            // b = −(Jᵀ Γ r + Λ w)
            let mut b: Vec<T> = w.iter().zip(&lambdas).map(|(&w, &l)| -(l * w)).collect();
            for (s, lin) in self.memory.iter().zip(&lins) {
                let phi2 = self.config.phi2;
                let r = lin.s.zip_map(&s.y, |sv, y| phi2.apply(sv) - y);
                self.vjp_into(&s.x, lin, which, &r, -s.weight, &mut b)?;
            }

            let apply = |p: &[T]| -> Result<Vec<T>> {
                let mut out: Vec<T> = p.iter().zip(&lambdas).map(|(&p, &l)| l * p).collect();
                for (s, lin) in self.memory.iter().zip(&lins) {
                    let jp = self.jvp(&s.x, lin, which, p)?;
                    self.vjp_into(&s.x, lin, which, &jp, s.weight, &mut out)?;
                }
                Ok(out)
            };
            let delta = conjugate_gradient(apply, &b, n_cg)?;

            let mut t = T::one();
            let mut accepted = false;
            for _ in 0..30 {
                let cand: Vec<T> = w.iter().zip(&delta).map(|(&w, &d)| w + t * d).collect();
                self.set_active_params(which, &cand);
                let new_loss = self.objective()?;
                if new_loss.is_finite() && new_loss <= loss {
                    loss = new_loss;
                    accepted = true;
                    break;
                }
                t *= T::of(0.5);
            }
            if !accepted {
                self.set_active_params(which, &w);
            }
            trace.push(loss.as_f64());
            if !loss.is_finite() {
                return Err(Error::SolverNonFinite { step, trace });
            }
        }
        Ok(trace)
    }
}

/// Plain CG on a symmetric positive definite operator, starting from zero.
pub fn conjugate_gradient<T: Scalar>(
    apply: impl Fn(&[T]) -> Result<Vec<T>>,
    b: &[T],
    iterations: usize,
) -> Result<Vec<T>> {
    let dot = |a: &[T], b: &[T]| a.iter().zip(b).map(|(&x, &y)| x * y).sum::<T>();
    let mut x = vec![T::zero(); b.len()];
    let mut r = b.to_vec();
    let mut p = r.clone();
    let mut rs = dot(&r, &r);
    let tiny = T::min_positive_value();
    for _ in 0..iterations {
        if rs <= tiny {
            break;
        }
        let ap = apply(&p)?;
        let pap = dot(&p, &ap);
        if !(pap > T::zero()) {
            break;
        }
        let alpha = rs / pap;
        for i in 0..x.len() {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rs_new = dot(&r, &r);
        let beta = rs_new / rs;
        for i in 0..p.len() {
            p[i] = r[i] + beta * p[i];
        }
        rs = rs_new;
    }
    Ok(x)
}
