use stylestego_nn::Tensor;

/// Direct windowed SSIM: every 11x11 window weighted by the 2-D Gaussian,
/// statistics summed in place, no separability.
pub fn ssim_oracle(a: &Tensor, b: &Tensor) -> f64 {
    let (h, w, c) = a.hwc().unwrap();
    let n = 11;
    let mut win = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            win[i * n + j] = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
        }
    }
    let z: f64 = win.iter().sum();
    win.iter_mut().for_each(|v| *v /= z);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let px = |t: &Tensor, y: usize, x: usize, ch: usize| (t.data()[(y * w + x) * c + ch] + 1.0) / 2.0;
    let mut per_channel = 0.0;
    for ch in 0..c {
        let mut acc = 0.0;
        let mut count = 0;
        for y0 in 0..=h - n {
            for x0 in 0..=w - n {
                let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..n {
                    for j in 0..n {
                        let k = win[i * n + j];
                        let (u, v) = (px(a, y0 + i, x0 + j, ch), px(b, y0 + i, x0 + j, ch));
                        mx += k * u;
                        my += k * v;
                        xx += k * u * u;
                        yy += k * v * v;
                        xy += k * u * v;
                    }
                }
                let (vx, vy, cov) = (xx - mx * mx, yy - my * my, xy - mx * my);
                acc += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        per_channel += acc / count as f64;
    }
    per_channel / c as f64
}
