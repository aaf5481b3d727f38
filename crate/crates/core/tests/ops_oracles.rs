//! Brute-force oracles for the causal and flexible convolution primitives.

use flexitok::autograd::Graph;
use flexitok::ops::{
    adaptive_field_conv, causal_conv3d, flexible_depth_to_space, flexible_downsample, interpolate_kernel, BaseKernel,
    FieldAxis, ScalePair,
};
use flexitok::tensor::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Direct zero-padded convolution with leading temporal padding `pad_t`.
fn direct_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: (usize, usize), pad_t: usize, pad_s: usize) -> Tensor<f64> {
    let (b, ci, t, h, wd) = x.dims5().unwrap();
    let (co, _, kt, ks, _) = w.dims5().unwrap();
    let to = (t + pad_t - kt) / stride.0 + 1;
    let ho = (h + 2 * pad_s - ks) / stride.1 + 1;
    let wo = (wd + 2 * pad_s - ks) / stride.1 + 1;
    Tensor::from_fn(&[b, co, to, ho, wo], |i| {
        let mut acc = 0.0;
        for c in 0..ci {
            for dt in 0..kt {
                for dh in 0..ks {
                    for dw in 0..ks {
                        let ti = (i[2] * stride.0 + dt) as isize - pad_t as isize;
                        let hi = (i[3] * stride.1 + dh) as isize - pad_s as isize;
                        let wi = (i[4] * stride.1 + dw) as isize - pad_s as isize;
                        if ti < 0 || hi < 0 || wi < 0 || ti >= t as isize || hi >= h as isize || wi >= wd as isize {
                            continue;
                        }
                        acc += w.get(&[i[1], c, dt, dh, dw]) * x.get(&[i[0], c, ti as usize, hi as usize, wi as usize]);
                    }
                }
            }
        }
        acc
    })
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Weight of input tap `i` in output tap `j` by exact sub-cell refinement:
/// both axes are split into `lcm(n_in, n_out)` equal sub-cells, input mass is
/// spread evenly over its sub-cells and collected by the output cell.
fn refine_weight(n_in: usize, n_out: usize, j: usize, i: usize) -> f64 {
    let l = n_in / gcd(n_in, n_out) * n_out;
    let (per_in, per_out) = (l / n_in, l / n_out);
    let shared = (i * per_in..(i + 1) * per_in).filter(|s| s / per_out == j).count();
    shared as f64 / per_in as f64
}

fn value(g: &Graph<f64>, v: flexitok::autograd::Var) -> Tensor<f64> {
    g.value(v).clone()
}

#[test]
fn adaptive_field_conv_matches_slice_then_scale_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let w = Tensor::<f64>::randn(&[4, 4, 3, 3, 3], 0.5, &mut rng);
    let bias = Tensor::<f64>::randn(&[4], 0.5, &mut rng);
    let active = [0usize, 2];

    // Input side: encoder head over 2 of 4 fields.
    let x = Tensor::<f64>::randn(&[1, 2, 5, 8, 8], 1.0, &mut rng);
    let w_slice = Tensor::from_fn(&[4, 2, 3, 3, 3], |i| w.get(&[i[0], active[i[1]], i[2], i[3], i[4]]));
    let oracle = direct_conv(&x, &w_slice, (1, 1), 2, 1);
    let oracle = Tensor::from_fn(oracle.shape(), |i| (oracle.get(i) + bias.get(&[i[1]])) * 2f64.sqrt());
    let mut g = Graph::new();
    let (xv, wv, bv) = (g.constant(x), g.constant(w.clone()), g.constant(bias.clone()));
    let y = adaptive_field_conv(&mut g, xv, wv, Some(bv), &active, FieldAxis::Input).unwrap();
    assert!(value(&g, y).max_abs_diff(&oracle) <= 1e-6);

    // Output side: decoder head emitting 2 of 4 fields.
    let x = Tensor::<f64>::randn(&[1, 4, 5, 8, 8], 1.0, &mut rng);
    let w_slice = Tensor::from_fn(&[2, 4, 3, 3, 3], |i| w.get(&[active[i[0]], i[1], i[2], i[3], i[4]]));
    let oracle = direct_conv(&x, &w_slice, (1, 1), 2, 1);
    let oracle = Tensor::from_fn(oracle.shape(), |i| (oracle.get(i) + bias.get(&[active[i[1]]])) * 2f64.sqrt());
    let mut g = Graph::new();
    let (xv, wv, bv) = (g.constant(x), g.constant(w), g.constant(bias));
    let y = adaptive_field_conv(&mut g, xv, wv, Some(bv), &active, FieldAxis::Output).unwrap();
    assert!(value(&g, y).max_abs_diff(&oracle) <= 1e-6);
}

#[test]
fn adaptive_field_conv_with_all_fields_is_plain_conv_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::<f32>::randn(&[2, 3, 5, 8, 8], 1.0, &mut rng);
    let w = Tensor::<f32>::randn(&[6, 3, 3, 3, 3], 0.5, &mut rng);
    let mut g = Graph::new();
    let (xv, wv) = (g.constant(x), g.constant(w));
    let a = adaptive_field_conv(&mut g, xv, wv, None, &[0, 1, 2], FieldAxis::Input).unwrap();
    let p = causal_conv3d(&mut g, xv, wv, None).unwrap();
    assert!(g.value(a).bit_eq(g.value(p)));
}

#[test]
fn interpolate_kernel_identity_at_base_scale() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w = Tensor::<f64>::randn(&[2, 3, 3, 4, 4], 1.0, &mut rng);
    let mut g = Graph::new();
    let wv = g.constant(w.clone());
    let base = BaseKernel { weight: wv, bias: None, max_scale: ScalePair { t: 2, s: 4 } };
    let k = interpolate_kernel(&mut g, &base, ScalePair { t: 2, s: 4 }).unwrap();
    assert!(g.value(k).bit_eq(&w));
}

#[test]
fn interpolate_kernel_matches_dense_resampling_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let w = Tensor::<f64>::randn(&[2, 3, 3, 4, 4], 1.0, &mut rng);
    for target in [ScalePair { t: 1, s: 2 }, ScalePair { t: 2, s: 2 }, ScalePair { t: 1, s: 4 }] {
        let (kt, ks) = target.kernel_size();
        // Dense matrix over all (t, h, w) taps.
        let dense = Tensor::from_fn(&[kt * ks * ks, 3 * 4 * 4], |ix| {
            let (jt, jh, jw) = (ix[0] / (ks * ks), ix[0] / ks % ks, ix[0] % ks);
            let (it, ih, iw) = (ix[1] / 16, ix[1] / 4 % 4, ix[1] % 4);
            refine_weight(3, kt, jt, it) * refine_weight(4, ks, jh, ih) * refine_weight(4, ks, jw, iw)
        });
        let oracle = Tensor::from_fn(&[2, 3, kt, ks, ks], |i| {
            let j = (i[2] * ks + i[3]) * ks + i[4];
            (0..48).map(|src| dense.get(&[j, src]) * w.get(&[i[0], i[1], src / 16, src / 4 % 4, src % 4])).sum()
        });
        let mut g = Graph::new();
        let wv = g.constant(w.clone());
        let base = BaseKernel { weight: wv, bias: None, max_scale: ScalePair { t: 2, s: 4 } };
        let k = interpolate_kernel(&mut g, &base, target).unwrap();
        assert!(g.value(k).max_abs_diff(&oracle) <= 1e-6, "target {target}");
        // Total mass along every resampled axis is preserved.
        assert!((g.value(k).sum() - w.sum()).abs() < 1e-9);
    }
}

#[test]
fn interpolate_kernel_collapses_temporal_axis_preserving_mass() {
    let w = Tensor::<f64>::from_fn(&[1, 1, 3, 4, 4], |i| (i[2] * 16 + i[3] * 4 + i[4]) as f64);
    let mut g = Graph::new();
    let wv = g.constant(w.clone());
    let base = BaseKernel { weight: wv, bias: None, max_scale: ScalePair { t: 2, s: 4 } };
    let k = interpolate_kernel(&mut g, &base, ScalePair { t: 1, s: 2 }).unwrap();
    let k = g.value(k);
    assert_eq!(k.shape(), &[1, 1, 1, 2, 2]);
    // Temporal taps are summed; each output pixel gathers a 2x2 input block.
    for (oy, ox) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
        let want: f64 = (0..3)
            .flat_map(|t| (0..2).flat_map(move |dy| (0..2).map(move |dx| (t, 2 * oy + dy, 2 * ox + dx))))
            .map(|(t, y, x)| w.get(&[0, 0, t, y, x]))
            .sum();
        assert!((k.get(&[0, 0, 0, oy, ox]) - want).abs() < 1e-12);
    }
}

fn flexible_scales(depth: usize) -> Vec<ScalePair> {
    if depth == 0 {
        vec![ScalePair { t: 1, s: 2 }]
    } else {
        [(1, 2), (1, 4), (2, 2), (2, 4)].iter().map(|&(t, s)| ScalePair { t, s }).collect()
    }
}

fn base_scale(depth: usize) -> ScalePair {
    if depth == 0 {
        ScalePair { t: 1, s: 2 }
    } else {
        ScalePair { t: 2, s: 4 }
    }
}

#[test]
fn flexible_downsample_shapes_for_every_flexible_scale() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for depth in 0..3 {
        let base = base_scale(depth);
        let (kt, ks) = base.kernel_size();
        let w = Tensor::<f64>::randn(&[3, 2, kt, ks, ks], 0.3, &mut rng);
        for scale in flexible_scales(depth) {
            let x = Tensor::<f64>::randn(&[1, 2, 9, 16, 16], 1.0, &mut rng);
            let mut g = Graph::new();
            let (xv, wv) = (g.constant(x), g.constant(w.clone()));
            let bk = BaseKernel { weight: wv, bias: None, max_scale: base };
            let y = flexible_downsample(&mut g, xv, &bk, scale).unwrap();
            assert_eq!(g.shape(y), &[1, 3, 1 + 8 / scale.t, 16 / scale.s, 16 / scale.s], "scale {scale}");
        }
    }
}

#[test]
fn flexible_downsample_documented_examples() {
    let cases = [((1, 2), [9, 8, 8]), ((2, 2), [5, 8, 8]), ((2, 4), [5, 4, 4])];
    for ((t, s), want) in cases {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 9, 16, 16]));
        let w = g.constant(Tensor::zeros(&[1, 1, 3, 4, 4]));
        let bk = BaseKernel { weight: w, bias: None, max_scale: ScalePair { t: 2, s: 4 } };
        let y = flexible_downsample(&mut g, x, &bk, ScalePair { t, s }).unwrap();
        assert_eq!(&g.shape(y)[2..], &want);
    }
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros(&[1, 1, 8, 16, 16]));
    let w = g.constant(Tensor::zeros(&[1, 1, 3, 4, 4]));
    let bk = BaseKernel { weight: w, bias: None, max_scale: ScalePair { t: 2, s: 4 } };
    let err = flexible_downsample(&mut g, x, &bk, ScalePair { t: 2, s: 2 }).unwrap_err();
    assert!(err.to_string().contains("T=8"), "{err}");
}

#[test]
fn flexible_downsample_matches_direct_strided_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let w = Tensor::<f64>::randn(&[3, 2, 3, 4, 4], 0.3, &mut rng);
    let x = Tensor::<f64>::randn(&[1, 2, 9, 8, 8], 1.0, &mut rng);
    let scale = ScalePair { t: 2, s: 2 };
    let mut g = Graph::new();
    let (xv, wv) = (g.constant(x.clone()), g.constant(w));
    let bk = BaseKernel { weight: wv, bias: None, max_scale: ScalePair { t: 2, s: 4 } };
    let k = interpolate_kernel(&mut g, &bk, scale).unwrap();
    let kernel = g.value(k).clone();
    let y = flexible_downsample(&mut g, xv, &bk, scale).unwrap();
    let oracle = direct_conv(&x, &kernel, (2, 2), 2, 0);
    assert!(g.value(y).max_abs_diff(&oracle) < 1e-12);
}

/// Base expansion conv, base rearrangement, keep every eta-th pixel from 0,
/// then discard the first s_t - 1 frames.
fn full_then_subsample(z: &Tensor<f64>, w: &Tensor<f64>, base: ScalePair, scale: ScalePair) -> Tensor<f64> {
    let y = direct_conv(z, w, (1, 1), 2, 1);
    let (b, cx, t, h, wd) = y.dims5().unwrap();
    let block = base.t * base.s * base.s;
    let c = cx / block;
    let full = Tensor::from_fn(&[b, c, t * base.t, h * base.s, wd * base.s], |i| {
        let (dt, dy, dx) = (i[2] % base.t, i[3] % base.s, i[4] % base.s);
        y.get(&[i[0], i[1] * block + (dt * base.s + dy) * base.s + dx, i[2] / base.t, i[3] / base.s, i[4] / base.s])
    });
    let (et, es) = (base.t / scale.t, base.s / scale.s);
    let sub = Tensor::from_fn(&[b, c, t * scale.t, h * scale.s, wd * scale.s], |i| {
        full.get(&[i[0], i[1], i[2] * et, i[3] * es, i[4] * es])
    });
    sub.narrow(2, scale.t - 1, t * scale.t - (scale.t - 1)).unwrap()
}

#[test]
fn subsampled_d2s_kernel_equals_full_path_for_every_eta() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for depth in 0..3 {
        let base = base_scale(depth);
        let c = 2;
        let w = Tensor::<f64>::randn(&[c * base.t * base.s * base.s, 3, 3, 3, 3], 0.3, &mut rng);
        let z = Tensor::<f64>::randn(&[1, 3, 3, 4, 4], 1.0, &mut rng);
        for scale in flexible_scales(depth) {
            let oracle = full_then_subsample(&z, &w, base, scale);
            let mut g = Graph::new();
            let (zv, wv) = (g.constant(z.clone()), g.constant(w.clone()));
            let bk = BaseKernel { weight: wv, bias: None, max_scale: base };
            let y = flexible_depth_to_space(&mut g, zv, &bk, scale).unwrap();
            assert_eq!(g.shape(y), oracle.shape());
            assert!(g.value(y).max_abs_diff(&oracle) <= 1e-6, "depth {depth} scale {scale}");
        }
    }
}

#[test]
fn depth_to_space_documented_shapes_and_round_trip() {
    let base = ScalePair { t: 2, s: 4 };
    for (scale, input, want) in [
        (ScalePair { t: 1, s: 2 }, [9, 8, 8], [9, 16, 16]),
        (ScalePair { t: 2, s: 2 }, [5, 8, 8], [9, 16, 16]),
    ] {
        let mut g = Graph::<f32>::new();
        let z = g.constant(Tensor::zeros(&[1, 2, input[0], input[1], input[2]]));
        let w = g.constant(Tensor::zeros(&[2 * 32, 2, 3, 3, 3]));
        let bk = BaseKernel { weight: w, bias: None, max_scale: base };
        let y = flexible_depth_to_space(&mut g, z, &bk, scale).unwrap();
        assert_eq!(&g.shape(y)[2..], &want);
    }
    // downsample then upsample at matching scales restores the shape
    for scale in flexible_scales(1) {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 9, 16, 16]));
        let wd = g.constant(Tensor::zeros(&[2, 2, 3, 4, 4]));
        let wu = g.constant(Tensor::zeros(&[2 * 32, 2, 3, 3, 3]));
        let y = flexible_downsample(&mut g, x, &BaseKernel { weight: wd, bias: None, max_scale: base }, scale).unwrap();
        let r = flexible_depth_to_space(&mut g, y, &BaseKernel { weight: wu, bias: None, max_scale: base }, scale).unwrap();
        assert_eq!(g.shape(r), &[1, 2, 9, 16, 16]);
    }
}

fn perturb_after(x: &Tensor<f64>, frame: usize, delta: f64) -> Tensor<f64> {
    Tensor::from_fn(x.shape(), |i| x.get(i) + if i[2] > frame { delta } else { 0.0 })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn causal_ops_ignore_future_frames(seed in 0u64..1000, frame in 0usize..8, delta in -5.0f64..5.0, si in 0usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::<f64>::randn(&[1, 2, 9, 8, 8], 1.0, &mut rng);
        let xp = perturb_after(&x, frame, delta);
        let wc = Tensor::<f64>::randn(&[3, 2, 3, 3, 3], 0.3, &mut rng);
        let wd = Tensor::<f64>::randn(&[3, 2, 3, 4, 4], 0.3, &mut rng);
        let wu = Tensor::<f64>::randn(&[2 * 32, 2, 3, 3, 3], 0.3, &mut rng);
        let scale = flexible_scales(1)[si];
        let base = ScalePair { t: 2, s: 4 };
        let run = |input: &Tensor<f64>| {
            let mut g = Graph::new();
            let xv = g.constant(input.clone());
            let (wcv, wdv, wuv) = (g.constant(wc.clone()), g.constant(wd.clone()), g.constant(wu.clone()));
            let c = causal_conv3d(&mut g, xv, wcv, None).unwrap();
            let d = flexible_downsample(&mut g, xv, &BaseKernel { weight: wdv, bias: None, max_scale: base }, scale).unwrap();
            let u = flexible_depth_to_space(&mut g, xv, &BaseKernel { weight: wuv, bias: None, max_scale: base }, scale).unwrap();
            (g.value(c).clone(), g.value(d).clone(), g.value(u).clone())
        };
        let (c0, d0, u0) = run(&x);
        let (c1, d1, u1) = run(&xp);
        // stride-1 conv: frames <= frame unchanged
        prop_assert!(c0.narrow(2, 0, frame + 1).unwrap().bit_eq(&c1.narrow(2, 0, frame + 1).unwrap()));
        // downsample: latent tau depends on inputs <= tau * s_t
        let keep = frame / scale.t + 1;
        prop_assert!(d0.narrow(2, 0, keep).unwrap().bit_eq(&d1.narrow(2, 0, keep).unwrap()));
        // depth-to-space: output frame o maps to input (o + s_t - 1) / s_t
        let keep_u = (frame + 1) * scale.t - (scale.t - 1);
        prop_assert!(u0.narrow(2, 0, keep_u).unwrap().bit_eq(&u1.narrow(2, 0, keep_u).unwrap()));
    }
}
