//! Image, regularization and fitting losses with per-term breakdowns.

mod image;
mod knn;

pub use self::image::{
    l2_image, l2_image_grad, psnr, sobel_loss, sobel_loss_grad, sobel_magnitude, ssim, ssim_grad,
    PSNR_CAP, SSIM_C1, SSIM_C2, SSIM_SIGMA, SSIM_WINDOW,
};
pub use knn::{knn_regularizer, knn_regularizer_grad, nearest_neighbors, KnnGrad, DEFAULT_K};
pub use crate::fitting::fitting_loss;

use serde_json::{json, Map, Value};

use crate::binding::WorldGaussian;
use crate::error::Result;
use crate::imaging::Image;
use crate::types::LossWeights;

/// One weighted term. `value` is `None` when the term was not computed,
/// either because it is unavailable or because its weight is zero and it
/// could not be evaluated on these inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Term {
    pub name: &'static str,
    pub weight: f64,
    pub value: Option<f64>,
    pub contribution: f64,
    pub available: bool,
}

impl Term {
    pub fn new(name: &'static str, weight: f64, value: f64) -> Self {
        Self {
            name,
            weight,
            value: Some(value),
            contribution: weight * value,
            available: true,
        }
    }

    pub fn skipped(name: &'static str, weight: f64) -> Self {
        Self {
            name,
            weight,
            value: None,
            contribution: 0.0,
            available: true,
        }
    }

    pub fn unavailable(name: &'static str, weight: f64) -> Self {
        Self {
            available: false,
            ..Self::skipped(name, weight)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Breakdown {
    pub total: f64,
    pub terms: Vec<Term>,
}

impl Breakdown {
    pub fn from_terms(terms: Vec<Term>) -> Self {
        Self {
            total: terms.iter().map(|t| t.contribution).sum(),
            terms,
        }
    }

    pub fn term(&self, name: &str) -> Option<&Term> {
        self.terms.iter().find(|t| t.name == name)
    }

    pub fn contribution(&self, name: &str) -> f64 {
        self.term(name).map_or(0.0, |t| t.contribution)
    }

    /// `{"total": .., "<term>": {"value", "weight", "contribution"}}`, with
    /// unavailable terms rendered as the string `"unavailable"`.
    pub fn to_json(&self) -> Value {
        let mut m = Map::new();
        m.insert("total".into(), json!(self.total));
        for t in &self.terms {
            let v = if t.available {
                json!({"value": t.value, "weight": t.weight, "contribution": t.contribution})
            } else {
                json!("unavailable")
            };
            m.insert(t.name.into(), v);
        }
        Value::Object(m)
    }
}

/// Splat-training objective: weighted L2, 1 − SSIM, Sobel and KNN terms.
/// The perceptual slot is always reported as unavailable.
pub fn total_gaussian_loss(
    rendered: &Image,
    truth: &Image,
    gaussians: &[WorldGaussian],
    w: &LossWeights,
    k: usize,
) -> Result<Breakdown> {
    w.validate()?;
    rendered.same_shape(truth)?;
    let mut terms = image_terms(rendered, truth, w)?;
    terms.push(if w.w_knn > 0.0 {
        Term::new("knn", w.w_knn, knn_regularizer(gaussians, k)?)
    } else {
        Term::skipped("knn", w.w_knn)
    });
    terms.push(Term::unavailable("lpips", w.w_lpips));
    Ok(Breakdown::from_terms(terms))
}

fn image_terms(rendered: &Image, truth: &Image, w: &LossWeights) -> Result<Vec<Term>> {
    let mut terms = vec![Term::new("l2", w.w_l2, l2_image(rendered, truth)?)];
    terms.push(if w.w_ssim > 0.0 {
        Term::new("ssim", w.w_ssim, 1.0 - ssim(rendered, truth)?)
    } else {
        Term::skipped("ssim", w.w_ssim)
    });
    terms.push(if w.w_sobel > 0.0 {
        Term::new("sobel", w.w_sobel, sobel_loss(rendered, truth)?)
    } else {
        Term::skipped("sobel", w.w_sobel)
    });
    Ok(terms)
}

/// Image terms of [`total_gaussian_loss`] and their gradient w.r.t. the
/// rendered image.
pub fn image_loss_grad(rendered: &Image, truth: &Image, w: &LossWeights) -> Result<(Vec<Term>, Image)> {
    rendered.same_shape(truth)?;
    let mut grad = Image::new(rendered.width, rendered.height);
    let mut terms = Vec::new();
    let mut add = |g: &Image, scale: f64| {
        for (a, b) in grad.data.iter_mut().zip(&g.data) {
            *a += scale * b;
        }
    };
    let (l2, g) = l2_image_grad(rendered, truth)?;
    add(&g, w.w_l2);
    terms.push(Term::new("l2", w.w_l2, l2));
    if w.w_ssim > 0.0 {
        let (s, g) = ssim_grad(rendered, truth)?;
        add(&g, -w.w_ssim);
        terms.push(Term::new("ssim", w.w_ssim, 1.0 - s));
    } else {
        terms.push(Term::skipped("ssim", w.w_ssim));
    }
    if w.w_sobel > 0.0 {
        let (s, g) = sobel_loss_grad(rendered, truth)?;
        add(&g, w.w_sobel);
        terms.push(Term::new("sobel", w.w_sobel, s));
    } else {
        terms.push(Term::skipped("sobel", w.w_sobel));
    }
    Ok((terms, grad))
}
