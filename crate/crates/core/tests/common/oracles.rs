//! Literal, loop-based reference implementations used as oracles.

use fcnet::metrics::{SSIM_SIGMA, SSIM_WINDOW};
use fcnet::ops::bilinear_resize;
use fcnet::Tensor;

/// Guided upsampling of `low` (`(1, c, lh, lw)`) with `guide`
/// (`(1, 3, h, w)`), solving each window's regularized least-squares fit
/// `min sum (a I + b - p)^2 + eps a^2` through its 2x2 normal equations.
pub fn guided_reference(low: &Tensor<f64>, guide: &Tensor<f64>, r: usize, eps: f64) -> Tensor<f64> {
    let (_, c, lh, lw) = low.dims4().unwrap();
    let (_, gc, h, w) = guide.dims4().unwrap();
    let gray =
        Tensor::from_fn4([1, 1, h, w], |_, _, y, x| (0..gc).map(|ch| guide.at4(0, ch, y, x)).sum::<f64>() / gc as f64);
    let gray_low = bilinear_resize(&gray, lh, lw).unwrap();
    let window = |cy: usize, cx: usize| {
        let ys = cy.saturating_sub(r)..(cy + r + 1).min(lh);
        let xs = cx.saturating_sub(r)..(cx + r + 1).min(lw);
        ys.flat_map(move |y| xs.clone().map(move |x| (y, x)))
    };
    let mut a = vec![0.0; c * lh * lw];
    let mut b = vec![0.0; c * lh * lw];
    for ch in 0..c {
        for cy in 0..lh {
            for cx in 0..lw {
                let (mut n, mut si, mut sii, mut sp, mut sip) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for (y, x) in window(cy, cx) {
                    let i = gray_low.at4(0, 0, y, x);
                    let p = low.at4(0, ch, y, x);
                    n += 1.0;
                    si += i;
                    sii += i * i;
                    sp += p;
                    sip += i * p;
                }
                // [sii + n eps, si; si, n] [a; b] = [sip; sp]
                let det = (sii + n * eps) * n - si * si;
                let k = (ch * lh + cy) * lw + cx;
                a[k] = (sip * n - si * sp) / det;
                b[k] = ((sii + n * eps) * sp - si * sip) / det;
            }
        }
    }
    let average = |coef: &[f64]| {
        Tensor::from_fn4([1, c, lh, lw], |_, ch, y, x| {
            let (mut s, mut n) = (0.0, 0.0);
            for (wy, wx) in window(y, x) {
                s += coef[(ch * lh + wy) * lw + wx];
                n += 1.0;
            }
            s / n
        })
    };
    let a_full = bilinear_resize(&average(&a), h, w).unwrap();
    let b_full = bilinear_resize(&average(&b), h, w).unwrap();
    Tensor::from_fn4([1, c, h, w], |_, ch, y, x| {
        a_full.at4(0, ch, y, x) * gray.at4(0, 0, y, x) + b_full.at4(0, ch, y, x)
    })
}

/// `(1/M) sum_j sum_{h in N(j)} (|O_h - O_j| - |G_h - G_j|)^2` over a grid of
/// `size x size` regions with 4-connected neighbours, by explicit loops.
pub fn spatial_reference(o: &Tensor<f64>, g: &Tensor<f64>, size: usize) -> f64 {
    let (_, c, h, w) = o.dims4().unwrap();
    let (rh, rw) = (h.div_ceil(size), w.div_ceil(size));
    let region = |t: &Tensor<f64>, ry: usize, rx: usize| {
        let (mut s, mut count) = (0.0, 0);
        for y in ry * size..((ry + 1) * size).min(h) {
            for x in rx * size..((rx + 1) * size).min(w) {
                s += (0..c).map(|ch| t.at4(0, ch, y, x)).sum::<f64>() / c as f64;
                count += 1;
            }
        }
        s / count as f64
    };
    let mut total = 0.0;
    for jy in 0..rh as i64 {
        for jx in 0..rw as i64 {
            for (dy, dx) in [(-1, 0), (1, 0), (0, -1), (0, 1)] {
                let (ny, nx) = (jy + dy, jx + dx);
                if ny < 0 || nx < 0 || ny >= rh as i64 || nx >= rw as i64 {
                    continue;
                }
                let at = |t: &Tensor<f64>, y: i64, x: i64| region(t, y as usize, x as usize);
                let d_o = (at(o, ny, nx) - at(o, jy, jx)).abs();
                let d_g = (at(g, ny, nx) - at(g, jy, jx)).abs();
                total += (d_o - d_g).powi(2);
            }
        }
    }
    total / (rh * rw) as f64
}

/// SSIM by direct evaluation of the windowed statistics at every valid
/// window position, per channel, averaged.
pub fn ssim_reference(x: &Tensor<f64>, y: &Tensor<f64>) -> f64 {
    let (_, c, h, w) = x.dims4().unwrap();
    let k = SSIM_WINDOW;
    let half = (k as f64 - 1.0) / 2.0;
    let mut win = vec![vec![0.0; k]; k];
    let mut norm = 0.0;
    for (i, row) in win.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let r2 = (i as f64 - half).powi(2) + (j as f64 - half).powi(2);
            *v = (-r2 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            norm += *v;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut per_channel = 0.0;
    for ch in 0..c {
        let (mut acc, mut count) = (0.0, 0);
        for y0 in 0..=h - k {
            for x0 in 0..=w - k {
                let stat = |f: &dyn Fn(f64, f64) -> f64| {
                    let mut s = 0.0;
                    for (i, row) in win.iter().enumerate() {
                        for (j, wt) in row.iter().enumerate() {
                            s += wt / norm * f(x.at4(0, ch, y0 + i, x0 + j), y.at4(0, ch, y0 + i, x0 + j));
                        }
                    }
                    s
                };
                let (mx, my) = (stat(&|a, _| a), stat(&|_, b| b));
                let vx = stat(&|a, _| (a - mx).powi(2));
                let vy = stat(&|_, b| (b - my).powi(2));
                let cxy = stat(&|a, b| (a - mx) * (b - my));
                acc += (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        per_channel += acc / count as f64;
    }
    per_channel / c as f64
}
