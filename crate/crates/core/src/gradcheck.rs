//! Central finite-difference gradient checking.

use crate::error::{Error, Result};
use crate::estimator::{HeadGeometry, IouHeadParams};
use crate::fam::{fam_backward_traced, fam_forward_with, FamParams, FamSwitches, FusionMode, StreamInput};
use crate::grid::Grid;
use crate::ops::Op;
use crate::rng::Rng;
use crate::scalar::Scalar;

/// Hook applied to an analytic gradient before it is compared. The
/// self-test uses it to prove that a broken backward pass is caught.
pub type Tamper<'a, T> = &'a dyn Fn(&mut [T]);

fn untouched<T>(_: &mut [T]) {}

/// Default step of the five-point stencil in double precision. Large
/// enough that rounding in `f` stays far below the tolerance, small enough
/// that the `O(eps^4)` truncation term is negligible.
pub const DEFAULT_EPS: f64 = 1e-3;

pub const REL_ERR_FLOOR: f64 = 1e-6;

/// Relative error between an analytic and a numeric derivative.
///
/// The denominator is floored at [`REL_ERR_FLOOR`] so exactly-zero
/// derivatives compare in absolute terms.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares `grad` against the fourth-order central difference
/// `(-f(p+2h) + 8 f(p+h) - 8 f(p-h) + f(p-2h)) / 12h` along every coordinate
/// and returns the largest relative error.
pub fn finite_diff_check<T: Scalar>(f: impl Fn(&[T]) -> T, grad: &[T], point: &[T], eps: T) -> Result<f64> {
    if grad.len() != point.len() {
        return Err(Error::shape("finite_diff_check", "gradient", point.len(), grad.len()));
    }
    let mut p = point.to_vec();
    let mut worst = 0.0f64;
    for i in 0..p.len() {
        let x0 = p[i];
        let mut at = |k: f64| {
            p[i] = x0 + eps * T::of(k);
            f(&p)
        };
        let (fp2, fp, fm, fm2) = (at(2.0), at(1.0), at(-1.0), at(-2.0));
        p[i] = x0;
        let numeric = (fm2 - fp2 + T::of(8.0) * (fp - fm)) / (T::of(12.0) * eps);
        if !numeric.is_finite() {
            return Err(Error::NonFinite {
                what: "finite difference".into(),
                index: i,
            });
        }
        if !grad[i].is_finite() {
            return Err(Error::NonFinite {
                what: "analytic gradient".into(),
                index: i,
            });
        }
        worst = worst.max(relative_error(grad[i].as_f64(), numeric.as_f64()));
    }
    Ok(worst)
}

/// Flattens several grids into one parameter vector.
pub fn flatten<T: Scalar>(grids: &[&Grid<T>]) -> Vec<T> {
    grids.iter().flat_map(|g| g.data().iter().copied()).collect()
}

/// Inverse of [`flatten`] given template shapes.
pub fn unflatten<T: Scalar>(flat: &[T], templates: &[&Grid<T>]) -> Vec<Grid<T>> {
    let mut off = 0;
    templates
        .iter()
        .map(|t| {
            let n = t.len();
            let g = Grid::from_vec(t.shape(), flat[off..off + n].to_vec()).expect("template shape");
            off += n;
            g
        })
        .collect()
}

/// Checks `op.vjp` against finite differences of the scalar
/// `<r, op(inputs)>` for a random projection `r`.
pub fn check_op<T: Scalar>(op: &Op<T>, inputs: &[Grid<T>], rng: &mut Rng, eps: T) -> Result<f64> {
    check_op_with(op, inputs, rng, eps, &untouched)
}

/// [`check_op`] with a hook on the analytic gradient.
pub fn check_op_with<T: Scalar>(op: &Op<T>, inputs: &[Grid<T>], rng: &mut Rng, eps: T, tamper: Tamper<T>) -> Result<f64> {
    let refs: Vec<&Grid<T>> = inputs.iter().collect();
    let out = op.forward(&refs)?;
    let proj = Grid::<T>::randn(out.shape(), 1.0, rng);
    let grads = op.vjp(&refs, &proj)?;
    let mut analytic = flatten(&grads.iter().collect::<Vec<_>>());
    tamper(&mut analytic);
    let point = flatten(&refs);
    let f = |flat: &[T]| {
        let gs = unflatten(flat, &refs);
        let rs: Vec<&Grid<T>> = gs.iter().collect();
        op.forward(&rs).expect("shapes fixed").dot(&proj)
    };
    finite_diff_check(f, &analytic, &point, eps)
}

/// Random inputs of representative shapes for each op, used by the gradient
/// suites. Box-pool boxes land strictly inside the map.
pub fn random_op_instance(op: &Op<f64>, rng: &mut Rng) -> Vec<Grid<f64>> {
    match op {
        Op::Conv1d => vec![Grid::randn(&[8], 1.0, rng), Grid::randn(&[5], 1.0, rng)],
        Op::Conv2d { .. } => vec![
            Grid::randn(&[2, 5, 5], 1.0, rng),
            Grid::randn(&[3, 2, 3, 3], 0.5, rng),
            Grid::randn(&[3], 0.5, rng),
        ],
        Op::Conv3d { .. } => vec![
            Grid::randn(&[2, 4, 5, 5], 1.0, rng),
            Grid::randn(&[2, 2, 3, 3, 3], 0.5, rng),
            Grid::randn(&[2], 0.5, rng),
        ],
        Op::Sigmoid | Op::ScalarScale(_) => vec![Grid::randn(&[3, 4], 1.5, rng)],
        Op::ElementwiseMul | Op::ElementwiseAdd => vec![Grid::randn(&[3, 4], 1.0, rng), Grid::randn(&[3, 4], 1.0, rng)],
        Op::GlobalAveragePool => vec![Grid::randn(&[4, 5, 6], 1.0, rng)],
        Op::BilinearBoxPool { .. } => {
            let w = rng.uniform_in(1.5, 4.0);
            let h = rng.uniform_in(1.5, 4.0);
            let x = rng.uniform_in(0.2, 7.8 - w);
            let y = rng.uniform_in(0.2, 7.8 - h);
            vec![Grid::randn(&[3, 8, 8], 1.0, rng), Grid::vector(vec![x, y, w, h])]
        }
        Op::Dense => vec![
            Grid::randn(&[6], 1.0, rng),
            Grid::randn(&[4, 6], 0.5, rng),
            Grid::randn(&[4], 0.5, rng),
        ],
    }
}

/// Full FAM forward/backward against finite differences, over both
/// streams, every parameter and the amplification. Parameters are drawn
/// at random rather than taken from the (partly zero) initialization.
pub fn check_fam(mode: FusionMode, switches: FamSwitches, rng: &mut Rng, tamper: Tamper<f64>) -> Result<f64> {
    let c = 4;
    let mut p = FamParams::init(mode, c, rng)?;
    let flat: Vec<f64> = p.to_flat().iter().map(|_| 0.3 * rng.normal()).collect();
    p.set_flat(&flat);
    let a = Grid::randn(&[c, 6, 6], 1.0, rng);
    let b = Grid::randn(&[c, 6, 6], 1.0, rng);
    let up = Grid::randn(&[c, 6, 6], 1.0, rng);
    let trace = fam_forward_with(StreamInput::Both(&a, &b), &p, switches)?;
    let g = fam_backward_traced(StreamInput::Both(&a, &b), &p, &trace, &up)?;

    let mut point = a.data().to_vec();
    point.extend_from_slice(b.data());
    point.extend(p.to_flat());
    point.push(p.amplification);
    let missing = || Error::Validation("FAM backward returned no input gradient".into());
    let mut analytic = g.x2d.clone().ok_or_else(missing)?.into_vec();
    analytic.extend(g.x3d.clone().ok_or_else(missing)?.into_vec());
    analytic.extend(g.to_flat());
    analytic.push(g.amplification);
    tamper(&mut analytic);

    let n = a.len();
    let np = p.to_flat().len();
    let f = |flat: &[f64]| {
        let x2 = Grid::from_vec(a.shape(), flat[..n].to_vec()).expect("fixed shape");
        let x3 = Grid::from_vec(b.shape(), flat[n..2 * n].to_vec()).expect("fixed shape");
        let mut q = p.clone();
        q.set_flat(&flat[2 * n..2 * n + np]);
        q.amplification = flat[2 * n + np];
        fam_forward_with(StreamInput::Both(&x2, &x3), &q, switches)
            .map(|t| t.output.dot(&up))
            .unwrap_or(f64::NAN)
    };
    finite_diff_check(f, &analytic, &point, DEFAULT_EPS)
}

/// IoU head against finite differences in its parameters, both tap maps
/// and the box.
pub fn check_iou_head(rng: &mut Rng, tamper: Tamper<f64>) -> Result<f64> {
    let geom = HeadGeometry {
        patch_extent: 32.0,
        strides: (4.0, 8.0),
    };
    let s = Grid::randn(&[3, 8, 8], 1.0, rng);
    let d = Grid::randn(&[3, 4, 4], 1.0, rng);
    let mut head = IouHeadParams::<f64>::init(3, 3, 8, rng);
    let flat: Vec<f64> = head.to_flat().iter().map(|_| 0.5 * rng.normal()).collect();
    head.set_flat(&flat);
    let bx = [
        rng.uniform_in(2.0, 10.0),
        rng.uniform_in(2.0, 10.0),
        rng.uniform_in(6.0, 18.0),
        rng.uniform_in(6.0, 18.0),
    ];
    let tr = head.forward(&s, &d, bx, &geom)?;
    let g = head.backward(&s, &d, &geom, &tr, 1.0)?;

    let np = flat.len();
    let mut point = flat;
    point.extend_from_slice(s.data());
    point.extend_from_slice(d.data());
    point.extend_from_slice(&bx);
    let mut analytic = g.params_flat();
    analytic.extend_from_slice(g.shallow.data());
    analytic.extend_from_slice(g.deep.data());
    analytic.extend_from_slice(&g.bbox);
    tamper(&mut analytic);
    let (ns, nd) = (s.len(), d.len());
    let f = |p: &[f64]| {
        let mut h = head.clone();
        h.set_flat(&p[..np]);
        let s2 = Grid::from_vec(s.shape(), p[np..np + ns].to_vec()).expect("fixed shape");
        let d2 = Grid::from_vec(d.shape(), p[np + ns..np + ns + nd].to_vec()).expect("fixed shape");
        let b: [f64; 4] = p[np + ns + nd..].try_into().expect("four coordinates");
        h.forward(&s2, &d2, b, &geom).map(|t| t.output).unwrap_or(f64::NAN)
    };
    finite_diff_check(f, &analytic, &point, DEFAULT_EPS)
}

/// One representative op per tag.
pub fn representative_ops() -> Vec<Op<f64>> {
    vec![
        Op::Conv1d,
        Op::Conv2d {
            stride: vec![2, 1],
            padding: vec![(1, 1), (1, 2)],
        },
        Op::Conv3d {
            stride: vec![2, 1, 2],
            padding: vec![(1, 1), (1, 1), (0, 1)],
        },
        Op::Sigmoid,
        Op::ElementwiseMul,
        Op::ElementwiseAdd,
        Op::ScalarScale(-1.7),
        Op::GlobalAveragePool,
        Op::BilinearBoxPool { grid: 3 },
        Op::Dense,
    ]
}
