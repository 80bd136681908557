use crate::bbox::BoundingBox;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::ops::{bilinear_box_pool, bilinear_box_pool_vjp, dense, dense_vjp};
use crate::rng::Rng;
use crate::scalar::{sigmoid, Scalar};

/// Sample grid per axis of the box pooling.
pub const POOL_GRID: usize = 3;

/// Where the two tap maps sit relative to the patch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeadGeometry {
    pub patch_extent: f64,
    /// Patch pixels per cell of the shallow and deep maps.
    pub strides: (f64, f64),
}

/// Small IoU regressor: box-pooled features of both taps plus normalized
/// box coordinates, a ReLU hidden layer and a sigmoid output.
#[derive(Clone, Debug, PartialEq)]
pub struct IouHeadParams<T> {
    /// `hidden × inputs`
    pub w1: Grid<T>,
    pub b1: Grid<T>,
    /// `1 × hidden`
    pub w2: Grid<T>,
    pub b2: Grid<T>,
}

/// Intermediates of a head evaluation.
#[derive(Clone, Debug)]
pub struct IouHeadTrace<T> {
    boxes: (Grid<T>, Grid<T>),
    input: Grid<T>,
    hidden_pre: Grid<T>,
    hidden: Grid<T>,
    logit: T,
    pub output: T,
}

#[derive(Clone, Debug)]
pub struct HeadGrads<T> {
    pub w1: Grid<T>,
    pub b1: Grid<T>,
    pub w2: Grid<T>,
    pub b2: Grid<T>,
    pub shallow: Grid<T>,
    pub deep: Grid<T>,
    /// With respect to `(x, y, w, h)` in patch pixels.
    pub bbox: [T; 4],
}

impl<T: Scalar> HeadGrads<T> {
    /// Parameter gradients in the order of [`IouHeadParams::to_flat`].
    pub fn params_flat(&self) -> Vec<T> {
        [&self.w1, &self.b1, &self.w2, &self.b2]
            .iter()
            .flat_map(|g| g.data().iter().copied())
            .collect()
    }
}

impl<T: Scalar> IouHeadParams<T> {
    pub fn input_len(shallow_channels: usize, deep_channels: usize) -> usize {
        (shallow_channels + deep_channels) * POOL_GRID * POOL_GRID + 4
    }

    /// He-initialized hidden layer, small output layer, zero biases.
    pub fn init(shallow_channels: usize, deep_channels: usize, hidden: usize, rng: &mut Rng) -> Self {
        let n = Self::input_len(shallow_channels, deep_channels);
        IouHeadParams {
            w1: Grid::randn(&[hidden, n], (2.0 / n as f64).sqrt(), rng),
            b1: Grid::zeros(&[hidden]),
            w2: Grid::randn(&[1, hidden], 0.1 / (hidden as f64).sqrt(), rng),
            b2: Grid::zeros(&[1]),
        }
    }

    pub fn zeros(shallow_channels: usize, deep_channels: usize, hidden: usize) -> Self {
        let n = Self::input_len(shallow_channels, deep_channels);
        IouHeadParams {
            w1: Grid::zeros(&[hidden, n]),
            b1: Grid::zeros(&[hidden]),
            w2: Grid::zeros(&[1, hidden]),
            b2: Grid::zeros(&[1]),
        }
    }

    pub fn to_flat(&self) -> Vec<T> {
        [&self.w1, &self.b1, &self.w2, &self.b2]
            .iter()
            .flat_map(|g| g.data().iter().copied())
            .collect()
    }

    pub fn set_flat(&mut self, flat: &[T]) {
        let mut off = 0;
        for g in [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2] {
            let n = g.len();
            g.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }

    /// Predicted IoU of `bbox` (patch pixels) given the two FAM maps.
    pub fn predict(&self, shallow: &Grid<T>, deep: &Grid<T>, bbox: &BoundingBox, geom: &HeadGeometry) -> Result<f64> {
        let b = bbox.as_array().map(T::of);
        Ok(self.forward(shallow, deep, b, geom)?.output.as_f64())
    }

    pub fn forward(&self, shallow: &Grid<T>, deep: &Grid<T>, bbox: [T; 4], geom: &HeadGeometry) -> Result<IouHeadTrace<T>> {
        let e = T::of(geom.patch_extent);
        let [x, y, w, h] = bbox;
        if !(x < e && y < e && x + w > T::zero() && y + h > T::zero()) || w <= T::zero() || h <= T::zero() {
            return Err(Error::InvalidArgument(format!(
                "box ({x}, {y}, {w}, {h}) does not intersect the {} px patch",
                geom.patch_extent
            )));
        }
        let to_cells = |s: f64| Grid::vector(bbox.iter().map(|&v| v / T::of(s)).collect());
        let boxes = (to_cells(geom.strides.0), to_cells(geom.strides.1));
        let ps = bilinear_box_pool(shallow, &boxes.0, POOL_GRID)?;
        let pd = bilinear_box_pool(deep, &boxes.1, POOL_GRID)?;
        let mut input = Vec::with_capacity(ps.len() + pd.len() + 4);
        input.extend_from_slice(ps.data());
        input.extend_from_slice(pd.data());
        input.extend(bbox.iter().map(|&v| v / e));
        let input = Grid::vector(input);
        let hidden_pre = dense(&input, &self.w1, &self.b1)?;
        let hidden = hidden_pre.map(|v| v.max(T::zero()));
        let logit = dense(&hidden, &self.w2, &self.b2)?.data()[0];
        Ok(IouHeadTrace {
            boxes,
            input,
            hidden_pre,
            hidden,
            logit,
            output: sigmoid(logit),
        })
    }

    /// Gradients of `upstream · output`.
    pub fn backward(
        &self,
        shallow: &Grid<T>,
        deep: &Grid<T>,
        geom: &HeadGeometry,
        trace: &IouHeadTrace<T>,
        upstream: T,
    ) -> Result<HeadGrads<T>> {
        let s = sigmoid(trace.logit);
        let d_logit = Grid::scalar(upstream * s * (T::one() - s));
        let (d_hidden, w2, b2) = dense_vjp(&trace.hidden, &self.w2, &self.b2, &d_logit)?;
        let d_pre = d_hidden.zip_map(&trace.hidden_pre, |g, v| if v > T::zero() { g } else { T::zero() });
        let (d_input, w1, b1) = dense_vjp(&trace.input, &self.w1, &self.b1, &d_pre)?;

        let ns = shallow.dim(0) * POOL_GRID * POOL_GRID;
        let nd = deep.dim(0) * POOL_GRID * POOL_GRID;
        let di = d_input.data();
        let gs = Grid::from_vec(&[shallow.dim(0), POOL_GRID, POOL_GRID], di[..ns].to_vec())?;
        let gd = Grid::from_vec(&[deep.dim(0), POOL_GRID, POOL_GRID], di[ns..ns + nd].to_vec())?;
        let (d_shallow, db_s) = bilinear_box_pool_vjp(shallow, &trace.boxes.0, POOL_GRID, &gs)?;
        let (d_deep, db_d) = bilinear_box_pool_vjp(deep, &trace.boxes.1, POOL_GRID, &gd)?;
        let e = T::of(geom.patch_extent);
        let (ss, sd) = (T::of(geom.strides.0), T::of(geom.strides.1));
        let mut bbox = [T::zero(); 4];
        for (k, b) in bbox.iter_mut().enumerate() {
            *b = db_s.data()[k] / ss + db_d.data()[k] / sd + di[ns + nd + k] / e;
        }
        Ok(HeadGrads {
            w1,
            b1,
            w2,
            b2,
            shallow: d_shallow,
            deep: d_deep,
            bbox,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_check, DEFAULT_EPS};

    const GEOM: HeadGeometry = HeadGeometry {
        patch_extent: 32.0,
        strides: (4.0, 8.0),
    };

    fn maps(rng: &mut Rng) -> (Grid<f64>, Grid<f64>) {
        (Grid::randn(&[3, 8, 8], 1.0, rng), Grid::randn(&[3, 4, 4], 1.0, rng))
    }

    #[test]
    fn zero_weights_give_one_half() {
        let mut rng = Rng::new(1);
        let (s, d) = maps(&mut rng);
        let head = IouHeadParams::<f64>::zeros(3, 3, 8);
        let b = BoundingBox::new(5.0, 6.0, 10.0, 12.0).unwrap();
        assert_eq!(head.predict(&s, &d, &b, &GEOM).unwrap(), 0.5);
    }

    #[test]
    fn output_in_open_unit_interval() {
        let mut rng = Rng::new(2);
        let (s, d) = maps(&mut rng);
        let head = IouHeadParams::<f64>::init(3, 3, 8, &mut rng);
        for _ in 0..50 {
            let b = BoundingBox::new(rng.uniform_in(-5.0, 25.0), rng.uniform_in(-5.0, 25.0), 8.0, 9.0).unwrap();
            let p = head.predict(&s, &d, &b, &GEOM).unwrap();
            assert!(p > 0.0 && p < 1.0);
        }
    }

    #[test]
    fn box_outside_patch_rejected() {
        let mut rng = Rng::new(3);
        let (s, d) = maps(&mut rng);
        let head = IouHeadParams::<f64>::init(3, 3, 8, &mut rng);
        let b = BoundingBox::new(40.0, 2.0, 5.0, 5.0).unwrap();
        assert!(head.predict(&s, &d, &b, &GEOM).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = Rng::new(4);
        for _ in 0..5 {
            let (s, d) = maps(&mut rng);
            let mut head = IouHeadParams::<f64>::init(3, 3, 8, &mut rng);
            let flat: Vec<f64> = head.to_flat().iter().map(|_| 0.5 * rng.normal()).collect();
            head.set_flat(&flat);
            let bx = [rng.uniform_in(2.0, 10.0), rng.uniform_in(2.0, 10.0), rng.uniform_in(6.0, 18.0), rng.uniform_in(6.0, 18.0)];
            let tr = head.forward(&s, &d, bx, &GEOM).unwrap();
            let g = head.backward(&s, &d, &GEOM, &tr, 1.0).unwrap();

            let np = flat.len();
            let mut point = flat.clone();
            point.extend_from_slice(s.data());
            point.extend_from_slice(d.data());
            point.extend_from_slice(&bx);
            let mut analytic = g.params_flat();
            analytic.extend_from_slice(g.shallow.data());
            analytic.extend_from_slice(g.deep.data());
            analytic.extend_from_slice(&g.bbox);
            let (ns, nd) = (s.len(), d.len());
            let f = |p: &[f64]| {
                let mut h = head.clone();
                h.set_flat(&p[..np]);
                let s2 = Grid::from_vec(s.shape(), p[np..np + ns].to_vec()).unwrap();
                let d2 = Grid::from_vec(d.shape(), p[np + ns..np + ns + nd].to_vec()).unwrap();
                let b: [f64; 4] = p[np + ns + nd..].try_into().unwrap();
                h.forward(&s2, &d2, b, &GEOM).unwrap().output
            };
            let err = finite_diff_check(f, &analytic, &point, DEFAULT_EPS).unwrap();
            assert!(err < 1e-6, "{err}");
        }
    }
}
