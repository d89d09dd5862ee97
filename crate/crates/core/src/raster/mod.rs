//! Tile-parallel front-to-back alpha compositing of screen-space Gaussians
//! and its analytic backward pass.
//!
//! Splats are sorted once by depth (ties keep input order), binned into
//! square tiles, and every tile composites its pixels independently. A
//! pixel's result never depends on the tiling, so tiled and single-tile
//! renders agree bit for bit.

mod project;

pub use project::{
    project_all, project_gaussian, project_gaussian_backward, Grad2D, GradWorld, Projected2D,
    Projection, COV_BLUR, NEAR_PLANE,
};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::imaging::Image;

pub const ALPHA_MAX: f64 = 0.99;
/// Compositing stops once transmittance drops below this.
pub const T_MIN: f64 = 1e-4;
/// Contributions below this alpha are skipped; also bounds each splat's
/// screen extent.
pub const ALPHA_EPS: f64 = 1e-7;
pub const DEFAULT_TILE: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub enum Background {
    Color([f64; 3]),
    Image(Image),
}

impl Background {
    fn at(&self, pixel: usize) -> [f64; 3] {
        match self {
            Background::Color(c) => *c,
            Background::Image(img) => {
                let i = 3 * pixel;
                [img.data[i], img.data[i + 1], img.data[i + 2]]
            }
        }
    }

    fn check(&self, width: usize, height: usize) -> Result<()> {
        match self {
            Background::Image(img) if img.width != width || img.height != height => {
                Err(Error::Dimension(format!(
                    "background is {}x{}, target is {width}x{height}",
                    img.width, img.height
                )))
            }
            _ => Ok(()),
        }
    }
}

/// Per-splat data needed to evaluate its weight at a pixel.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Prepared {
    mx: f64,
    my: f64,
    /// Inverse covariance `(a, b, c)` for `[[a, b], [b, c]]`.
    conic: [f64; 3],
    opacity: f64,
    /// Exponent below which `opacity·exp(power)` falls under [`ALPHA_EPS`].
    power_min: f64,
    color: [f64; 3],
    /// Inclusive pixel rectangle `x0, x1, y0, y1`.
    rect: [i64; 4],
}

impl Prepared {
    fn new(s: &Projected2D, width: usize, height: usize) -> Option<Self> {
        let [xx, xy, yy] = s.cov;
        let det = xx * yy - xy * xy;
        if !(det > 0.0 && xx > 0.0 && det.is_finite()) {
            return None;
        }
        let conic = [yy / det, -xy / det, xx / det];
        let mut rect = [0, -1, 0, -1];
        if s.opacity > ALPHA_EPS {
            // beyond this Mahalanobis radius opacity·G < ALPHA_EPS
            let m_max = 2.0 * (s.opacity / ALPHA_EPS).ln();
            let (rx, ry) = ((m_max * xx).sqrt(), (m_max * yy).sqrt());
            rect = [
                ((s.mean[0] - rx - 0.5).ceil() as i64).max(0),
                ((s.mean[0] + rx - 0.5).floor() as i64).min(width as i64 - 1),
                ((s.mean[1] - ry - 0.5).ceil() as i64).max(0),
                ((s.mean[1] + ry - 0.5).floor() as i64).min(height as i64 - 1),
            ];
        }
        Some(Self {
            mx: s.mean[0],
            my: s.mean[1],
            conic,
            opacity: s.opacity,
            power_min: (ALPHA_EPS / s.opacity).ln(),
            color: s.color,
            rect,
        })
    }

    fn is_empty(&self) -> bool {
        self.rect[0] > self.rect[1] || self.rect[2] > self.rect[3]
    }

    #[inline]
    fn covers(&self, x: i64, y: i64) -> bool {
        x >= self.rect[0] && x <= self.rect[1] && y >= self.rect[2] && y <= self.rect[3]
    }

    /// `(alpha, gaussian weight)` at pixel `(x, y)`; alpha is already
    /// clamped. `None` when alpha would be below [`ALPHA_EPS`].
    #[inline]
    fn weight(&self, x: i64, y: i64) -> Option<(f64, f64)> {
        let dx = x as f64 + 0.5 - self.mx;
        let dy = y as f64 + 0.5 - self.my;
        let [a, b, c] = self.conic;
        let power = -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy;
        if power < self.power_min {
            return None;
        }
        let g = power.exp();
        let alpha = (self.opacity * g).min(ALPHA_MAX);
        (alpha >= ALPHA_EPS).then_some((alpha, g))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RasterConfig {
    pub tile_size: usize,
}

impl Default for RasterConfig {
    fn default() -> Self {
        Self {
            tile_size: DEFAULT_TILE,
        }
    }
}

/// Everything the backward pass needs from a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardState {
    num_splats: usize,
    width: usize,
    height: usize,
    tile_size: usize,
    tiles_x: usize,
    prepared: Vec<Option<Prepared>>,
    /// Per tile, splat indices in global depth order.
    bins: Vec<Vec<u32>>,
}

impl ForwardState {
    pub fn num_splats(&self) -> usize {
        self.num_splats
    }
}

#[derive(Clone, Debug)]
pub struct RenderOutput {
    pub image: Image,
    /// Accumulated `Σ T_i α_i` per pixel.
    pub alpha: Vec<f64>,
    /// Transmittance left after compositing per pixel.
    pub transmittance: Vec<f64>,
    /// Splats skipped because their covariance was not invertible.
    pub skipped: usize,
    pub state: ForwardState,
}

fn prepare(splats: &[Projected2D], width: usize, height: usize, tile: usize) -> ForwardState {
    let prepared: Vec<Option<Prepared>> = splats
        .par_iter()
        .map(|s| Prepared::new(s, width, height))
        .collect();
    let mut order: Vec<u32> = (0..splats.len() as u32).collect();
    order.sort_by(|&a, &b| splats[a as usize].depth.total_cmp(&splats[b as usize].depth));
    let tiles_x = width.div_ceil(tile);
    let tiles_y = height.div_ceil(tile);
    let mut bins = vec![Vec::new(); tiles_x * tiles_y];
    for &i in &order {
        let Some(p) = &prepared[i as usize] else {
            continue;
        };
        if p.is_empty() {
            continue;
        }
        let (tx0, tx1) = (p.rect[0] as usize / tile, p.rect[1] as usize / tile);
        let (ty0, ty1) = (p.rect[2] as usize / tile, p.rect[3] as usize / tile);
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                bins[ty * tiles_x + tx].push(i);
            }
        }
    }
    ForwardState {
        num_splats: splats.len(),
        width,
        height,
        tile_size: tile,
        tiles_x,
        prepared,
        bins,
    }
}

impl ForwardState {
    fn tile_pixels(&self, t: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let (tx, ty) = (t % self.tiles_x, t / self.tiles_x);
        let s = self.tile_size;
        (
            tx * s..((tx + 1) * s).min(self.width),
            ty * s..((ty + 1) * s).min(self.height),
        )
    }

    fn tile_splats(&self, t: usize) -> Vec<(u32, Prepared)> {
        self.bins[t]
            .iter()
            .map(|&i| (i, self.prepared[i as usize].unwrap()))
            .collect()
    }
}

struct PixelResult {
    color: [f64; 3],
    alpha: f64,
    transmittance: f64,
}

/// Front-to-back compositing of one pixel; `visit` sees each contributing
/// splat's list position, alpha, gaussian weight and the transmittance in
/// front of it.
#[inline]
fn composite_pixel(
    x: i64,
    y: i64,
    list: &[(u32, Prepared)],
    mut visit: impl FnMut(usize, f64, f64, f64),
) -> PixelResult {
    let mut color = [0.0; 3];
    let mut alpha_sum = 0.0;
    let mut t = 1.0;
    for (k, (_, p)) in list.iter().enumerate() {
        if !p.covers(x, y) {
            continue;
        }
        let Some((alpha, g)) = p.weight(x, y) else {
            continue;
        };
        visit(k, alpha, g, t);
        let w = t * alpha;
        for c in 0..3 {
            color[c] += w * p.color[c];
        }
        alpha_sum += w;
        t *= 1.0 - alpha;
        if t < T_MIN {
            break;
        }
    }
    PixelResult {
        color,
        alpha: alpha_sum,
        transmittance: t,
    }
}

/// Forward compositing of one tile, splat by splat over per-pixel
/// accumulators. Every pixel sees the same splats in the same order and the
/// same arithmetic as [`composite_pixel`], so the results are identical.
fn composite_tile(state: &ForwardState, t: usize) -> Vec<(usize, PixelResult)> {
    let (xs, ys) = state.tile_pixels(t);
    let (x0, y0) = (xs.start as i64, ys.start as i64);
    let (x1, y1) = (xs.end as i64 - 1, ys.end as i64 - 1);
    let tw = xs.len();
    let n = tw * ys.len();
    let mut px: Vec<PixelResult> = (0..n)
        .map(|_| PixelResult {
            color: [0.0; 3],
            alpha: 0.0,
            transmittance: 1.0,
        })
        .collect();
    let mut live = n;
    for &i in &state.bins[t] {
        let p = state.prepared[i as usize].as_ref().unwrap();
        for y in p.rect[2].max(y0)..=p.rect[3].min(y1) {
            let row = (y - y0) as usize * tw;
            for x in p.rect[0].max(x0)..=p.rect[1].min(x1) {
                let r = &mut px[row + (x - x0) as usize];
                if r.transmittance < T_MIN {
                    continue;
                }
                let Some((alpha, _)) = p.weight(x, y) else {
                    continue;
                };
                let w = r.transmittance * alpha;
                for c in 0..3 {
                    r.color[c] += w * p.color[c];
                }
                r.alpha += w;
                r.transmittance *= 1.0 - alpha;
                if r.transmittance < T_MIN {
                    live -= 1;
                }
            }
        }
        if live == 0 {
            break;
        }
    }
    let width = state.width;
    px.into_iter()
        .enumerate()
        .map(|(k, r)| ((ys.start + k / tw) * width + xs.start + k % tw, r))
        .collect()
}

/// Composites `splats` front to back over `background`.
pub fn rasterize(
    splats: &[Projected2D],
    width: usize,
    height: usize,
    background: &Background,
    cfg: &RasterConfig,
) -> Result<RenderOutput> {
    if width == 0 || height == 0 || cfg.tile_size == 0 {
        return Err(Error::Config("render target and tiles must be nonempty".into()));
    }
    background.check(width, height)?;
    let state = prepare(splats, width, height, cfg.tile_size);
    let skipped = state.prepared.iter().filter(|p| p.is_none()).count();

    let tiles: Vec<Vec<(usize, PixelResult)>> = (0..state.bins.len())
        .into_par_iter()
        .map(|t| composite_tile(&state, t))
        .collect();

    let mut image = Image::new(width, height);
    let mut alpha = vec![0.0; width * height];
    let mut transmittance = vec![1.0; width * height];
    for (i, r) in tiles.into_iter().flatten() {
        let bg = background.at(i);
        for c in 0..3 {
            image.data[3 * i + c] = r.color[c] + r.transmittance * bg[c];
        }
        alpha[i] = r.alpha;
        transmittance[i] = r.transmittance;
    }
    Ok(RenderOutput {
        image,
        alpha,
        transmittance,
        skipped,
        state,
    })
}

/// Pulls `d_image` (dL/d rendered RGB) back onto every projected splat.
///
/// Per-tile partial gradients are summed in tile order, so results are
/// reproducible bit for bit.
pub fn rasterize_backward(
    splats: &[Projected2D],
    state: &ForwardState,
    background: &Background,
    d_image: &Image,
) -> Result<Vec<Grad2D>> {
    if splats.len() != state.num_splats {
        return Err(Error::Contract(format!(
            "forward state holds {} splats, backward got {}",
            state.num_splats,
            splats.len()
        )));
    }
    if d_image.width != state.width || d_image.height != state.height {
        return Err(Error::Contract(format!(
            "forward state is {}x{}, image gradient is {}x{}",
            state.width, state.height, d_image.width, d_image.height
        )));
    }
    for (s, p) in splats.iter().zip(&state.prepared) {
        if let Some(p) = p {
            if p.mx != s.mean[0] || p.my != s.mean[1] || p.opacity != s.opacity {
                return Err(Error::Contract("splats changed since the forward pass".into()));
            }
        }
    }
    background.check(state.width, state.height)?;
    let width = state.width;

    let partials: Vec<Vec<(u32, Grad2D)>> = (0..state.bins.len())
        .into_par_iter()
        .map(|t| {
            let list = state.tile_splats(t);
            let mut grads = vec![Grad2D::default(); list.len()];
            let (xs, ys) = state.tile_pixels(t);
            // (list position, alpha, gaussian, transmittance in front)
            let mut hits: Vec<(usize, f64, f64, f64)> = Vec::new();
            for y in ys {
                for x in xs.clone() {
                    let i = y * width + x;
                    let dc = [d_image.data[3 * i], d_image.data[3 * i + 1], d_image.data[3 * i + 2]];
                    if dc == [0.0; 3] {
                        continue;
                    }
                    hits.clear();
                    composite_pixel(x as i64, y as i64, &list, |k, a, g, tr| {
                        hits.push((k, a, g, tr))
                    });
                    // color behind the current splat, starting from the background
                    let mut behind = background.at(i);
                    for &(k, alpha, g, tr) in hits.iter().rev() {
                        let p = &list[k].1;
                        let gr = &mut grads[k];
                        let mut d_alpha = 0.0;
                        for c in 0..3 {
                            gr.color[c] += dc[c] * tr * alpha;
                            d_alpha += dc[c] * tr * (p.color[c] - behind[c]);
                            behind[c] = alpha * p.color[c] + (1.0 - alpha) * behind[c];
                        }
                        if p.opacity * g >= ALPHA_MAX {
                            continue;
                        }
                        gr.opacity += d_alpha * g;
                        let d_power = d_alpha * p.opacity * g;
                        let dx = x as f64 + 0.5 - p.mx;
                        let dy = y as f64 + 0.5 - p.my;
                        let [a, b, c] = p.conic;
                        gr.mean[0] += d_power * (a * dx + b * dy);
                        gr.mean[1] += d_power * (b * dx + c * dy);
                        // accumulate dL/dconic in the cov slots for now
                        gr.cov[0] += -0.5 * dx * dx * d_power;
                        gr.cov[1] += -dx * dy * d_power;
                        gr.cov[2] += -0.5 * dy * dy * d_power;
                    }
                }
            }
            list.iter().map(|(i, _)| *i).zip(grads).collect()
        })
        .collect();

    let mut out = vec![Grad2D::default(); splats.len()];
    for tile in partials {
        for (i, g) in tile {
            let o = &mut out[i as usize];
            o.mean[0] += g.mean[0];
            o.mean[1] += g.mean[1];
            for c in 0..3 {
                o.color[c] += g.color[c];
                o.cov[c] += g.cov[c];
            }
            o.opacity += g.opacity;
        }
    }
    // conic gradient -> covariance gradient: dΣ = -Σ⁻¹ G Σ⁻¹
    for (o, p) in out.iter_mut().zip(&state.prepared) {
        let Some(p) = p else { continue };
        let [a, b, c] = p.conic;
        let inv = nalgebra::Matrix2::new(a, b, b, c);
        let g = nalgebra::Matrix2::new(o.cov[0], 0.5 * o.cov[1], 0.5 * o.cov[1], o.cov[2]);
        let d = -(inv * g * inv);
        o.cov = [d[(0, 0)], d[(0, 1)] + d[(1, 0)], d[(1, 1)]];
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn splat(mean: [f64; 2], cov: [f64; 3], depth: f64, color: [f64; 3], opacity: f64) -> Projected2D {
        Projected2D {
            mean,
            cov,
            depth,
            color,
            opacity,
        }
    }

    #[test]
    fn no_splats_gives_background() {
        let bg = [0.2, 0.4, 0.6];
        let out = rasterize(&[], 7, 5, &Background::Color(bg), &RasterConfig::default()).unwrap();
        for px in out.image.data.chunks(3) {
            assert_eq!(px, bg);
        }
        assert!(out.alpha.iter().all(|a| *a == 0.0));
    }

    #[test]
    fn single_splat_at_pixel_center() {
        let s = splat([2.5, 2.5], [4.0, 0.0, 4.0], 1.0, [1.0, 0.0, 0.5], 0.8);
        let bg = [0.0, 1.0, 0.0];
        let out = rasterize(&[s], 5, 5, &Background::Color(bg), &RasterConfig::default()).unwrap();
        let px = out.image.pixel(2, 2);
        let a = 0.8;
        for c in 0..3 {
            assert!((px[c] - (a * s.color[c] + (1.0 - a) * bg[c])).abs() < 1e-15);
        }
        let s = Projected2D { opacity: 1.0, ..s };
        let out = rasterize(&[s], 5, 5, &Background::Color(bg), &RasterConfig::default()).unwrap();
        assert!((out.alpha[12] - ALPHA_MAX).abs() < 1e-15);
    }

    #[test]
    fn singular_covariance_is_skipped() {
        let s = splat([2.5, 2.5], [1.0, 1.0, 1.0], 1.0, [1.0; 3], 0.8);
        let out = rasterize(&[s], 5, 5, &Background::Color([0.0; 3]), &RasterConfig::default()).unwrap();
        assert_eq!(out.skipped, 1);
        assert!(out.image.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zero_image_gradient_gives_zero() {
        let s = splat([2.5, 2.5], [4.0, 0.5, 3.0], 1.0, [1.0, 0.0, 0.5], 0.8);
        let bg = Background::Color([0.1; 3]);
        let out = rasterize(&[s], 5, 5, &bg, &RasterConfig::default()).unwrap();
        let g = rasterize_backward(&[s], &out.state, &bg, &Image::new(5, 5)).unwrap();
        assert_eq!(g[0], Grad2D::default());
    }

    #[test]
    fn mismatched_state_is_a_contract_error() {
        let s = splat([2.5, 2.5], [4.0, 0.5, 3.0], 1.0, [1.0, 0.0, 0.5], 0.8);
        let bg = Background::Color([0.1; 3]);
        let out = rasterize(&[s], 5, 5, &bg, &RasterConfig::default()).unwrap();
        let r = rasterize_backward(&[s, s], &out.state, &bg, &Image::new(5, 5));
        assert!(matches!(r, Err(Error::Contract(_))));
        let r = rasterize_backward(&[s], &out.state, &bg, &Image::new(4, 5));
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn tiles_match_single_tile_bitwise() {
        let splats: Vec<Projected2D> = (0..40)
            .map(|i| {
                let f = i as f64;
                splat(
                    [(f * 7.3) % 37.0, (f * 3.1) % 29.0],
                    [2.0 + (f * 0.7) % 9.0, ((f * 0.37).sin()) * 1.5, 3.0 + (f * 1.3) % 7.0],
                    1.0 + (f * 0.61) % 3.0,
                    [(f * 0.1) % 1.0, (f * 0.23) % 1.0, (f * 0.41) % 1.0],
                    0.2 + (f * 0.13) % 0.79,
                )
            })
            .collect();
        let bg = Background::Color([0.3, 0.2, 0.1]);
        let tiled = rasterize(&splats, 37, 29, &bg, &RasterConfig { tile_size: 16 }).unwrap();
        let single = rasterize(&splats, 37, 29, &bg, &RasterConfig { tile_size: 64 }).unwrap();
        assert_eq!(tiled.image, single.image);
        assert_eq!(tiled.alpha, single.alpha);
    }
}
