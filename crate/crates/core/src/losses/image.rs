//! Image-space losses and metrics, each with its gradient w.r.t. the first
//! image where the training loop needs one.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::imaging::Image;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const PSNR_CAP: f64 = 100.0;

pub fn l2_image(a: &Image, b: &Image) -> Result<f64> {
    a.same_shape(b)?;
    let sum: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / a.data.len().max(1) as f64)
}

pub fn l2_image_grad(a: &Image, b: &Image) -> Result<(f64, Image)> {
    let loss = l2_image(a, b)?;
    let n = a.data.len().max(1) as f64;
    let data = a.data.iter().zip(&b.data).map(|(x, y)| 2.0 * (x - y) / n).collect();
    Ok((loss, Image { data, ..*a }))
}

/// PSNR in dB for images in [0, 1], capped at [`PSNR_CAP`] when the MSE is
/// below 1e-10.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let mse = l2_image(a, b)?;
    if mse < 1e-10 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    for (i, t) in w.iter_mut().enumerate() {
        let d = i as f64 - half;
        *t = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|t| t / s)
}

/// Valid-mode separable correlation of a `w`×`h` plane with the window.
fn filter_valid(plane: &[f64], w: usize, h: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w + 1 - SSIM_WINDOW;
    let oh = h + 1 - SSIM_WINDOW;
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|k| taps[k] * plane[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|k| taps[k] * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: scatters an output-sized map back to the
/// input plane.
fn filter_valid_adjoint(g: &[f64], w: usize, h: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w + 1 - SSIM_WINDOW;
    let oh = h + 1 - SSIM_WINDOW;
    let mut rows = vec![0.0; h * ow];
    for y in 0..oh {
        for x in 0..ow {
            for k in 0..SSIM_WINDOW {
                rows[(y + k) * ow + x] += taps[k] * g[y * ow + x];
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..ow {
            for k in 0..SSIM_WINDOW {
                out[y * w + x + k] += taps[k] * rows[y * ow + x];
            }
        }
    }
    out
}

fn check_ssim_size(a: &Image, b: &Image) -> Result<()> {
    a.same_shape(b)?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(Error::Dimension(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {}x{}",
            a.width, a.height
        )));
    }
    Ok(())
}

struct SsimChannel {
    sum: f64,
    grad: Option<Vec<f64>>,
}

fn ssim_channel(x: &[f64], y: &[f64], w: usize, h: usize, want_grad: bool) -> SsimChannel {
    let taps = gaussian_taps();
    let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(a, b)| a * b).collect() };
    let mx = filter_valid(x, w, h, &taps);
    let my = filter_valid(y, w, h, &taps);
    let exx = filter_valid(&prod(x, x), w, h, &taps);
    let eyy = filter_valid(&prod(y, y), w, h, &taps);
    let exy = filter_valid(&prod(x, y), w, h, &taps);
    let n = mx.len();
    let mut sum = 0.0;
    // dS_i/dx_q = w_iq (P_i + Q_i ((y_q - uy_i) - (x_q - ux_i) R_i)), arranged
    // so that every factor is exactly zero when x == y
    let (mut p, mut q, mut qr, mut qc) = if want_grad {
        (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n])
    } else {
        (Vec::new(), Vec::new(), Vec::new(), Vec::new())
    };
    for i in 0..n {
        let (ux, uy) = (mx[i], my[i]);
        let sxx = exx[i] - ux * ux;
        let syy = eyy[i] - uy * uy;
        let sxy = exy[i] - ux * uy;
        let a1 = 2.0 * ux * uy + SSIM_C1;
        let a2 = 2.0 * sxy + SSIM_C2;
        let b1 = ux * ux + uy * uy + SSIM_C1;
        let b2 = sxx + syy + SSIM_C2;
        let s = a1 * a2 / (b1 * b2);
        sum += s;
        if want_grad {
            let r = a2 / b2;
            p[i] = 2.0 * a2 / (b1 * b2) * (uy - ux * (a1 / b1));
            q[i] = 2.0 * a1 / (b1 * b2);
            qr[i] = q[i] * r;
            qc[i] = q[i] * (uy - ux * r);
        }
    }
    let grad = want_grad.then(|| {
        let gp = filter_valid_adjoint(&p, w, h, &taps);
        let gq = filter_valid_adjoint(&q, w, h, &taps);
        let gqr = filter_valid_adjoint(&qr, w, h, &taps);
        let gqc = filter_valid_adjoint(&qc, w, h, &taps);
        (0..w * h)
            .map(|k| gp[k] + (y[k] * gq[k] - x[k] * gqr[k]) - gqc[k])
            .collect()
    });
    SsimChannel { sum, grad }
}

fn ssim_impl(a: &Image, b: &Image, want_grad: bool) -> Result<(f64, Option<Image>)> {
    check_ssim_size(a, b)?;
    let (w, h) = (a.width, a.height);
    let per: Vec<SsimChannel> = (0..3)
        .into_par_iter()
        .map(|c| ssim_channel(&a.channel(c), &b.channel(c), w, h, want_grad))
        .collect();
    let count = 3 * (w + 1 - SSIM_WINDOW) * (h + 1 - SSIM_WINDOW);
    let value = per.iter().map(|c| c.sum).sum::<f64>() / count as f64;
    let grad = want_grad.then(|| {
        let mut img = Image::new(w, h);
        for (c, ch) in per.iter().enumerate() {
            for (q, g) in ch.grad.as_ref().unwrap().iter().enumerate() {
                img.data[3 * q + c] = g / count as f64;
            }
        }
        img
    });
    Ok((value, grad))
}

/// Mean SSIM over valid 11×11 Gaussian windows (σ = 1.5) and channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    Ok(ssim_impl(a, b, false)?.0)
}

/// SSIM and its gradient w.r.t. `a`.
pub fn ssim_grad(a: &Image, b: &Image) -> Result<(f64, Image)> {
    let (v, g) = ssim_impl(a, b, true)?;
    Ok((v, g.unwrap()))
}

const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

fn clamp_index(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Per-pixel `(gx, gy)` of one channel with replicated borders.
fn sobel_plane(img: &Image, c: usize) -> Vec<(f64, f64)> {
    let (w, h) = (img.width, img.height);
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let mut p = [[0.0; 3]; 3];
            for (dy, row) in p.iter_mut().enumerate() {
                let yy = clamp_index(y as isize + dy as isize - 1, h);
                for (dx, v) in row.iter_mut().enumerate() {
                    let xx = clamp_index(x as isize + dx as isize - 1, w);
                    *v = img.data[3 * (yy * w + xx) + c];
                }
            }
            // differences first, so flat regions give exactly zero
            let gx = (p[0][2] - p[0][0]) + 2.0 * (p[1][2] - p[1][0]) + (p[2][2] - p[2][0]);
            let gy = (p[2][0] - p[0][0]) + 2.0 * (p[2][1] - p[0][1]) + (p[2][2] - p[0][2]);
            out.push((gx, gy));
        }
    }
    out
}

/// Per-channel Sobel gradient magnitude, laid out like an image.
pub fn sobel_magnitude(img: &Image) -> Image {
    let mut out = Image::new(img.width, img.height);
    for c in 0..3 {
        for (q, (gx, gy)) in sobel_plane(img, c).into_iter().enumerate() {
            out.data[3 * q + c] = gx.hypot(gy);
        }
    }
    out
}

/// Mean squared difference between the Sobel magnitude maps of two images.
pub fn sobel_loss(a: &Image, b: &Image) -> Result<f64> {
    a.same_shape(b)?;
    l2_image(&sobel_magnitude(a), &sobel_magnitude(b))
}

/// Sobel loss and its gradient w.r.t. `a`. Where a magnitude is zero the
/// zero subgradient is used.
pub fn sobel_loss_grad(a: &Image, b: &Image) -> Result<(f64, Image)> {
    a.same_shape(b)?;
    let (w, h) = (a.width, a.height);
    let mag_b = sobel_magnitude(b);
    let n = a.data.len().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = Image::new(w, h);
    for c in 0..3 {
        let plane = sobel_plane(a, c);
        for (q, (gx, gy)) in plane.into_iter().enumerate() {
            let m = gx.hypot(gy);
            let d = m - mag_b.data[3 * q + c];
            loss += d * d;
            if m == 0.0 {
                continue;
            }
            let dm = 2.0 * d / n;
            let (dgx, dgy) = (dm * gx / m, dm * gy / m);
            let (x, y) = (q % w, q / w);
            for dy in 0..3 {
                let yy = clamp_index(y as isize + dy as isize - 1, h);
                for dx in 0..3 {
                    let xx = clamp_index(x as isize + dx as isize - 1, w);
                    grad.data[3 * (yy * w + xx) + c] += dgx * SOBEL_X[dy][dx] + dgy * SOBEL_Y[dy][dx];
                }
            }
        }
    }
    Ok((loss / n, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(w: usize, h: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_data(w, h, (0..w * h * 3).map(|_| rng.random()).collect()).unwrap()
    }

    #[test]
    fn l2_examples() {
        let a = random_image(5, 4, 1);
        assert_eq!(l2_image(&a, &a).unwrap(), 0.0);
        let z = Image::new(5, 4);
        let o = Image::filled(5, 4, [1.0; 3]);
        assert_eq!(l2_image(&z, &o).unwrap(), 1.0);
        assert!(l2_image(&z, &Image::new(4, 4)).is_err());
    }

    #[test]
    fn psnr_examples() {
        let a = random_image(8, 8, 2);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let z = Image::new(10, 10);
        let b = Image::filled(10, 10, [0.1; 3]);
        assert!((psnr(&z, &b).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn ssim_examples() {
        let a = random_image(16, 14, 3);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let neg = Image {
            data: a.data.iter().map(|v| 1.0 - v).collect(),
            ..a
        };
        assert!(ssim(&a, &neg).unwrap() < 0.0);
        assert!(ssim(&Image::new(10, 20), &Image::new(10, 20)).is_err());
    }

    #[test]
    fn sobel_flat_fields_are_zero() {
        let a = Image::filled(6, 6, [0.2; 3]);
        let b = Image::filled(6, 6, [0.9; 3]);
        assert_eq!(sobel_loss(&a, &b).unwrap(), 0.0);
    }

    fn check_grad(f: impl Fn(&Image) -> f64, grad: &Image, a: &Image) {
        let h = 1e-6;
        for i in (0..a.data.len()).step_by(7) {
            let mut p = a.clone();
            let mut m = a.clone();
            p.data[i] += h;
            m.data[i] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            assert!(
                (fd - grad.data[i]).abs() < 1e-6 * fd.abs().max(1e-3),
                "entry {i}: {fd} vs {}",
                grad.data[i]
            );
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let a = random_image(13, 12, 4);
        let b = random_image(13, 12, 5);
        let (_, g) = l2_image_grad(&a, &b).unwrap();
        check_grad(|x| l2_image(x, &b).unwrap(), &g, &a);
        let (_, g) = ssim_grad(&a, &b).unwrap();
        check_grad(|x| ssim(x, &b).unwrap(), &g, &a);
        let (_, g) = sobel_loss_grad(&a, &b).unwrap();
        check_grad(|x| sobel_loss(x, &b).unwrap(), &g, &a);
    }
}
