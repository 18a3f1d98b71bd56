//! SSIM with an 11x11 Gaussian window (sigma 1.5, k1 = 0.01, k2 = 0.03) and
//! its analytic gradient with respect to the first image.
//!
//! Windows are renormalized over the in-bounds taps, so SSIM is defined at
//! every pixel (and for images smaller than the window). Because the
//! in-bounds region is a rectangle, the renormalization factor stays
//! separable, which keeps both the blur and its adjoint two 1-D passes.

use crate::grid::{Grid, ScalarImage};

pub const WINDOW: usize = 11;
pub const SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn kernel() -> [f64; WINDOW] {
    let mut k = [0.0; WINDOW];
    let half = (WINDOW / 2) as isize;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as isize - half;
        *v = (-(d * d) as f64 / (2.0 * SIGMA * SIGMA)).exp();
    }
    k
}

/// Separable Gaussian blur with per-position renormalization at borders.
fn blur(img: &ScalarImage) -> ScalarImage {
    let k = kernel();
    let half = WINDOW / 2;
    let w = img.width;
    let h = img.height;

    let mut tmp = Grid::filled(w, h, 0.0f64);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            let mut z = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                let xx = x as isize + i as isize - half as isize;
                if xx < 0 || xx >= w as isize {
                    continue;
                }
                acc += kv * img.get(xx as usize, y);
                z += kv;
            }
            tmp.set(x, y, acc / z);
        }
    }
    let mut out = Grid::filled(w, h, 0.0f64);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            let mut z = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                let yy = y as isize + i as isize - half as isize;
                if yy < 0 || yy >= h as isize {
                    continue;
                }
                acc += kv * tmp.get(x, yy as usize);
                z += kv;
            }
            out.set(x, y, acc / z);
        }
    }
    out
}

/// Adjoint of [`blur`]: divide by the per-position normalizer at the source
/// index, then run the plain (symmetric) convolution.
fn blur_adjoint(g: &ScalarImage) -> ScalarImage {
    let k = kernel();
    let half = WINDOW / 2;
    let w = g.width;
    let h = g.height;

    let zx: Vec<f64> = (0..w)
        .map(|x| {
            k.iter()
                .enumerate()
                .filter(|(i, _)| {
                    let xx = x as isize + *i as isize - half as isize;
                    xx >= 0 && xx < w as isize
                })
                .map(|(_, &kv)| kv)
                .sum()
        })
        .collect();
    let zy: Vec<f64> = (0..h)
        .map(|y| {
            k.iter()
                .enumerate()
                .filter(|(i, _)| {
                    let yy = y as isize + *i as isize - half as isize;
                    yy >= 0 && yy < h as isize
                })
                .map(|(_, &kv)| kv)
                .sum()
        })
        .collect();

    // Vertical adjoint first (reverse of blur's pass order).
    let mut tmp = Grid::filled(w, h, 0.0f64);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                let yy = y as isize + i as isize - half as isize;
                if yy < 0 || yy >= h as isize {
                    continue;
                }
                acc += kv * g.get(x, yy as usize) / zy[yy as usize];
            }
            tmp.set(x, y, acc);
        }
    }
    let mut out = Grid::filled(w, h, 0.0f64);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                let xx = x as isize + i as isize - half as isize;
                if xx < 0 || xx >= w as isize {
                    continue;
                }
                acc += kv * tmp.get(xx as usize, y) / zx[xx as usize];
            }
            out.set(x, y, acc);
        }
    }
    out
}

fn elementwise(a: &ScalarImage, b: &ScalarImage, f: impl Fn(f64, f64) -> f64) -> ScalarImage {
    Grid {
        width: a.width,
        height: a.height,
        data: a.data.iter().zip(&b.data).map(|(x, y)| f(*x, *y)).collect(),
    }
}

/// Mean SSIM between two single-channel images in [0, 1].
pub fn ssim(x: &ScalarImage, y: &ScalarImage) -> f64 {
    ssim_impl(x, y, None)
}

/// Mean SSIM plus d(mean SSIM)/dx.
pub fn ssim_with_grad(x: &ScalarImage, y: &ScalarImage) -> (f64, ScalarImage) {
    let mut grad = Grid::filled(x.width, x.height, 0.0f64);
    let v = ssim_impl(x, y, Some(&mut grad));
    (v, grad)
}

fn ssim_impl(x: &ScalarImage, y: &ScalarImage, grad_out: Option<&mut ScalarImage>) -> f64 {
    assert!(x.same_shape(y), "ssim inputs must share dimensions");
    let n = x.data.len() as f64;

    let mu_x = blur(x);
    let mu_y = blur(y);
    let xx = blur(&elementwise(x, x, |a, b| a * b));
    let yy = blur(&elementwise(y, y, |a, b| a * b));
    let xy = blur(&elementwise(x, y, |a, b| a * b));

    let mut total = 0.0;
    let mut d_mu = Grid::filled(x.width, x.height, 0.0f64);
    let mut d_xx = Grid::filled(x.width, x.height, 0.0f64);
    let mut d_xy = Grid::filled(x.width, x.height, 0.0f64);
    let want_grad = grad_out.is_some();

    for i in 0..x.data.len() {
        let a = mu_x.data[i];
        let b = mu_y.data[i];
        let vx = xx.data[i] - a * a;
        let vy = yy.data[i] - b * b;
        let cxy = xy.data[i] - a * b;

        let n1 = 2.0 * a * b + C1;
        let n2 = 2.0 * cxy + C2;
        let d1 = a * a + b * b + C1;
        let d2 = vx + vy + C2;
        let num = n1 * n2;
        let den = d1 * d2;
        let s = num / den;
        total += s;

        if want_grad {
            // Only the first image varies: s depends on a = mu_x through n1,
            // n2 (via cxy) and d1, d2 (via vx); on xx through vx; on xy
            // through cxy.
            let inv_den = 1.0 / den;
            // ds/da holding the blurred fields fixed elsewhere:
            // dn1/da = 2b, dn2/da = -2b (cxy = xy - a b),
            // dd1/da = 2a, dd2/da = -2a (vx = xx - a^2).
            let ds_da = ((2.0 * b * n2 - 2.0 * b * n1) * den
                - num * (2.0 * a * d2 - 2.0 * a * d1))
                * inv_den
                * inv_den;
            let ds_dxx = -num * d1 * inv_den * inv_den;
            let ds_dxy = 2.0 * n1 * inv_den;
            d_mu.data[i] = ds_da / n;
            d_xx.data[i] = ds_dxx / n;
            d_xy.data[i] = ds_dxy / n;
        }
    }

    if let Some(grad) = grad_out {
        let g_mu = blur_adjoint(&d_mu);
        let g_xx = blur_adjoint(&d_xx);
        let g_xy = blur_adjoint(&d_xy);
        for i in 0..grad.data.len() {
            grad.data[i] = g_mu.data[i] + 2.0 * x.data[i] * g_xx.data[i] + y.data[i] * g_xy.data[i];
        }
    }
    total / n
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn image(w: usize, h: usize, f: impl Fn(usize, usize) -> f64) -> ScalarImage {
        Grid::from_fn(w, h, f)
    }

    #[test]
    fn identical_images_have_unit_ssim() {
        let x = image(16, 12, |i, j| ((i * 7 + j * 3) % 11) as f64 / 11.0);
        assert_eq!(ssim(&x, &x), 1.0);
    }

    #[test]
    fn ssim_is_symmetric() {
        let x = image(14, 14, |i, j| ((i * 5 + j) % 9) as f64 / 9.0);
        let y = image(14, 14, |i, j| ((i + j * 4) % 7) as f64 / 7.0);
        assert_relative_eq!(ssim(&x, &y), ssim(&y, &x), epsilon = 1e-12);
    }

    #[test]
    fn constant_images_match_closed_form() {
        // For constants all variances vanish: SSIM = (2 v1 v2 + C1) / (v1^2 + v2^2 + C1).
        let x = image(13, 9, |_, _| 0.3);
        let y = image(13, 9, |_, _| 0.7);
        let expected = (2.0 * 0.3 * 0.7 + C1) / (0.3 * 0.3 + 0.7 * 0.7 + C1);
        assert_relative_eq!(ssim(&x, &y), expected, epsilon = 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let x = image(9, 8, |i, j| 0.2 + 0.6 * ((i as f64 * 0.7).sin() * (j as f64 * 0.5).cos()).abs());
        let y = image(9, 8, |i, j| ((i * 3 + j * 5) % 13) as f64 / 13.0);
        let (_, grad) = ssim_with_grad(&x, &y);
        let h = 1e-6;
        for &i in &[0usize, 7, 20, 41, 63, 71] {
            let mut xp = x.clone();
            xp.data[i] += h;
            let mut xm = x.clone();
            xm.data[i] -= h;
            let fd = (ssim(&xp, &y) - ssim(&xm, &y)) / (2.0 * h);
            assert_relative_eq!(grad.data[i], fd, epsilon = 1e-7, max_relative = 1e-5);
        }
    }
}
