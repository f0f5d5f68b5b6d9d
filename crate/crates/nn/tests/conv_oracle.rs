use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stylestego_nn::{Graph, Tensor};

/// Direct nested-loop convolution with zero padding.
fn reference_conv(x: &Tensor, w: &Tensor, b: &[f64], stride: usize, pad: usize) -> Tensor {
    let (h, wd, cin) = x.hwc().unwrap();
    let (k, cout) = (w.shape()[0], w.shape()[3]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros(&[oh, ow, cout]);
    for oy in 0..oh {
        for ox in 0..ow {
            for co in 0..cout {
                let mut s = b[co];
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                            continue;
                        }
                        for ci in 0..cin {
                            let wv = w.data()[((ky * k + kx) * cin + ci) * cout + co];
                            s += wv * x.at3(iy as usize, ix as usize, ci);
                        }
                    }
                }
                out.data_mut()[(oy * ow + ox) * cout + co] = s;
            }
        }
    }
    out
}

#[test]
fn conv_matches_nested_loop_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cases = [(5, 5, 3, 1, 5, 1), (8, 8, 3, 4, 3, 1), (8, 8, 3, 2, 3, 2), (7, 6, 2, 3, 5, 2), (8, 8, 3, 8, 1, 1)];
    for &(h, w, cin, cout, k, stride) in &cases {
        for _ in 0..5 {
            let x = Tensor::uniform(&[h, w, cin], -1.0, 1.0, &mut rng);
            let kern = Tensor::uniform(&[k, k, cin, cout], -1.0, 1.0, &mut rng);
            let bias = Tensor::uniform(&[cout], -1.0, 1.0, &mut rng);
            let pad = k / 2;
            let mut g = Graph::new();
            let (xv, kv, bv) = (g.input(x.clone()), g.input(kern.clone()), g.input(bias.clone()));
            let y = g.conv2d(xv, kv, Some(bv), stride, pad).unwrap();
            let expected = reference_conv(&x, &kern, bias.data(), stride, pad);
            assert_eq!(g.shape(y), expected.shape());
            for (a, b) in g.value(y).data().iter().zip(expected.data()) {
                assert!((a - b).abs() <= 1e-10, "{a} vs {b}");
            }
        }
    }
}

#[test]
fn zero_sum_kernel_annihilates_constant_input() {
    let mut g = Graph::new();
    let x = g.input(Tensor::full(&[6, 6, 3], 0.37));
    let mut kern = Tensor::from_fn(&[3, 3, 3, 2], |i| ((i * 7919) % 13) as f64 - 6.0);
    // Zero-sum per output channel.
    for co in 0..2 {
        let mean = kern.data().iter().skip(co).step_by(2).sum::<f64>() / 27.0;
        kern.data_mut().iter_mut().skip(co).step_by(2).for_each(|v| *v -= mean);
    }
    let w = g.input(kern);
    let y = g.conv2d(x, w, None, 1, 0).unwrap();
    assert!(g.value(y).max_abs() < 1e-12);
}

#[test]
fn output_size_formula() {
    let mut g = Graph::new();
    for (h, stride, expect) in [(9, 1, 9), (9, 2, 5), (16, 2, 8), (1, 2, 1)] {
        let x = g.input(Tensor::zeros(&[h, h, 1]));
        let w = g.input(Tensor::zeros(&[3, 3, 1, 1]));
        let y = g.conv2d(x, w, None, stride, 1).unwrap();
        assert_eq!(g.shape(y)[0], expect, "h={h} stride={stride}");
    }
}

#[test]
fn even_kernel_rejected() {
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(&[4, 4, 1]));
    let w = g.input(Tensor::zeros(&[2, 2, 1, 1]));
    assert!(g.conv2d(x, w, None, 1, 1).is_err());
}
