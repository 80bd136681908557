//! Operators against direct loop implementations.

use proptest::prelude::*;

use strack::grid::Grid;
use strack::ops::{conv1d_cross_channel, conv2d, conv3d, dense, global_average_pool, ConvKernel};
use strack::rng::Rng;

const TOL: f64 = 1e-12;

/// Reads `x[c][idx...]` with zero outside the grid; `idx` may be negative.
fn at(x: &Grid<f64>, c: usize, idx: &[isize]) -> f64 {
    let sp = &x.shape()[1..];
    let mut flat = c;
    for (a, &i) in idx.iter().enumerate() {
        if i < 0 || i as usize >= sp[a] {
            return 0.0;
        }
        flat = flat * sp[a] + i as usize;
    }
    x.data()[flat]
}

fn naive_conv2d(x: &Grid<f64>, k: &ConvKernel<f64>) -> Grid<f64> {
    let (co, ci, kh, kw) = (k.weights.dim(0), k.weights.dim(1), k.weights.dim(2), k.weights.dim(3));
    let (h, w) = (x.dim(1), x.dim(2));
    let (sh, sw) = (k.stride[0], k.stride[1]);
    let ((t, b), (l, r)) = (k.padding[0], k.padding[1]);
    let oh = (h + t + b - kh) / sh + 1;
    let ow = (w + l + r - kw) / sw + 1;
    let mut out = Grid::zeros(&[co, oh, ow]);
    for o in 0..co {
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = k.bias.as_ref().map_or(0.0, |b| b.data()[o]);
                for c in 0..ci {
                    for u in 0..kh {
                        for v in 0..kw {
                            let wv = k.weights.data()[((o * ci + c) * kh + u) * kw + v];
                            let yi = (i * sh + u) as isize - t as isize;
                            let xj = (j * sw + v) as isize - l as isize;
                            acc += wv * at(x, c, &[yi, xj]);
                        }
                    }
                }
                out.data_mut()[(o * oh + i) * ow + j] = acc;
            }
        }
    }
    out
}

fn naive_conv3d(x: &Grid<f64>, k: &ConvKernel<f64>) -> Grid<f64> {
    let s = k.weights.shape().to_vec();
    let (co, ci, kd, kh, kw) = (s[0], s[1], s[2], s[3], s[4]);
    let (d, h, w) = (x.dim(1), x.dim(2), x.dim(3));
    let st = &k.stride;
    let p = &k.padding;
    let od = (d + p[0].0 + p[0].1 - kd) / st[0] + 1;
    let oh = (h + p[1].0 + p[1].1 - kh) / st[1] + 1;
    let ow = (w + p[2].0 + p[2].1 - kw) / st[2] + 1;
    let mut out = Grid::zeros(&[co, od, oh, ow]);
    for o in 0..co {
        for a in 0..od {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = k.bias.as_ref().map_or(0.0, |b| b.data()[o]);
                    for c in 0..ci {
                        for t in 0..kd {
                            for u in 0..kh {
                                for v in 0..kw {
                                    let wv = k.weights.data()[(((o * ci + c) * kd + t) * kh + u) * kw + v];
                                    let idx = [
                                        (a * st[0] + t) as isize - p[0].0 as isize,
                                        (i * st[1] + u) as isize - p[1].0 as isize,
                                        (j * st[2] + v) as isize - p[2].0 as isize,
                                    ];
                                    acc += wv * at(x, c, &idx);
                                }
                            }
                        }
                    }
                    out.data_mut()[((o * od + a) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    out
}

fn kernel(shape: &[usize], stride: Vec<usize>, padding: Vec<(usize, usize)>, bias: bool, rng: &mut Rng) -> ConvKernel<f64> {
    let b = bias.then(|| Grid::randn(&[shape[0]], 1.0, rng));
    ConvKernel::new(Grid::randn(shape, 1.0, rng), b, stride, padding).unwrap()
}

#[test]
fn conv2d_matches_loops() {
    let mut rng = Rng::new(1);
    let cases: [(&[usize], &[usize], Vec<usize>, Vec<(usize, usize)>); 4] = [
        (&[3, 9, 11], &[4, 3, 3, 3], vec![1, 1], vec![(1, 1), (1, 1)]),
        (&[2, 10, 10], &[5, 2, 3, 3], vec![2, 2], vec![(1, 1), (1, 1)]),
        (&[1, 7, 8], &[2, 1, 4, 2], vec![1, 3], vec![(1, 2), (0, 1)]),
        (&[4, 5, 6], &[3, 4, 1, 1], vec![1, 1], vec![(0, 0), (0, 0)]),
    ];
    for (i, (xs, ks, stride, pad)) in cases.into_iter().enumerate() {
        let x = Grid::randn(xs, 1.0, &mut rng);
        let k = kernel(ks, stride, pad, i % 2 == 0, &mut rng);
        let got = conv2d(&x, &k).unwrap();
        let want = naive_conv2d(&x, &k);
        assert_eq!(got.shape(), want.shape(), "case {i}");
        assert!(got.max_abs_diff(&want) < TOL, "case {i}: {}", got.max_abs_diff(&want));
    }
}

#[test]
fn conv3d_matches_loops() {
    let mut rng = Rng::new(2);
    let cases: [(&[usize], &[usize], Vec<usize>, Vec<(usize, usize)>); 3] = [
        (&[3, 4, 8, 8], &[4, 3, 2, 3, 3], vec![2, 1, 1], vec![(0, 0), (1, 1), (1, 1)]),
        (&[2, 4, 9, 7], &[3, 2, 3, 3, 3], vec![1, 2, 2], vec![(1, 1), (1, 1), (1, 1)]),
        (&[1, 2, 5, 5], &[2, 1, 2, 2, 2], vec![1, 1, 1], vec![(0, 1), (0, 1), (1, 0)]),
    ];
    for (i, (xs, ks, stride, pad)) in cases.into_iter().enumerate() {
        let x = Grid::randn(xs, 1.0, &mut rng);
        let k = kernel(ks, stride, pad, i != 1, &mut rng);
        let got = conv3d(&x, &k).unwrap();
        let want = naive_conv3d(&x, &k);
        assert_eq!(got.shape(), want.shape(), "case {i}");
        assert!(got.max_abs_diff(&want) < TOL, "case {i}: {}", got.max_abs_diff(&want));
    }
}

#[test]
fn cross_channel_conv_is_zero_padded_correlation() {
    // Kernel [1, 2, 3] centred: out[i] = x[i-1] + 2 x[i] + 3 x[i+1].
    let x = Grid::vector(vec![1.0, -2.0, 4.0, 0.5]);
    let k = Grid::vector(vec![1.0, 2.0, 3.0]);
    let got = conv1d_cross_channel(&x, &k).unwrap();
    assert_eq!(got.data(), &[2.0 - 6.0, 1.0 - 4.0 + 12.0, -2.0 + 8.0 + 1.5, 4.0 + 1.0]);
}

#[test]
fn dense_and_gap_match_loops() {
    let mut rng = Rng::new(3);
    let x: Grid<f64> = Grid::randn(&[7], 1.0, &mut rng);
    let w = Grid::randn(&[4, 7], 1.0, &mut rng);
    let b = Grid::randn(&[4], 1.0, &mut rng);
    let y = dense(&x, &w, &b).unwrap();
    for o in 0..4 {
        let want: f64 = b.data()[o] + (0..7).map(|i| w.data()[o * 7 + i] * x.data()[i]).sum::<f64>();
        assert!((y.data()[o] - want).abs() < TOL);
    }
    let m: Grid<f64> = Grid::randn(&[3, 4, 5], 1.0, &mut rng);
    let g = global_average_pool(&m).unwrap();
    for c in 0..3 {
        let want = m.plane(c).iter().sum::<f64>() / 20.0;
        assert!((g.data()[c] - want).abs() < TOL);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn conv2d_random_geometry(
        seed in any::<u64>(), ci in 1usize..4, co in 1usize..4,
        h in 3usize..9, w in 3usize..9, kh in 1usize..4, kw in 1usize..4,
        sh in 1usize..3, sw in 1usize..3, pt in 0usize..2, pb in 0usize..2,
    ) {
        let mut rng = Rng::new(seed);
        let x = Grid::randn(&[ci, h, w], 1.0, &mut rng);
        let k = kernel(&[co, ci, kh, kw], vec![sh, sw], vec![(pt, pb), (pb, pt)], seed % 2 == 0, &mut rng);
        let got = conv2d(&x, &k).unwrap();
        let want = naive_conv2d(&x, &k);
        prop_assert_eq!(got.shape(), want.shape());
        prop_assert!(got.max_abs_diff(&want) < TOL);
    }

    #[test]
    fn cross_channel_conv_random(seed in any::<u64>(), n in 1usize..12, r in 0usize..3) {
        let mut rng = Rng::new(seed);
        let x: Grid<f64> = Grid::randn(&[n], 1.0, &mut rng);
        let k = Grid::randn(&[2 * r + 1], 1.0, &mut rng);
        let got = conv1d_cross_channel(&x, &k).unwrap();
        for i in 0..n {
            let mut want = 0.0f64;
            for t in 0..2 * r + 1 {
                let j = i as isize + t as isize - r as isize;
                if j >= 0 && (j as usize) < n {
                    want += k.data()[t] * x.data()[j as usize];
                }
            }
            prop_assert!((got.data()[i] - want).abs() < TOL);
        }
    }
}
