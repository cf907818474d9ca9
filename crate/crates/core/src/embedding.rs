//! Per-pixel feature map and product-state embedding.
//!
//! A pixel intensity `x ∈ [0, 1]` is lifted to the unit vector with components
//! `v_s(x) = sqrt(C(d-1, s-1)) · cos(πx/2)^(d-s) · sin(πx/2)^(s-1)` for
//! `s = 1..=d`. An image becomes a grid of such vectors with no coupling
//! between sites.

use std::f64::consts::FRAC_PI_2;

use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum EmbeddingError {
    #[error("physical dimension must be at least 2, got {0}")]
    Dimension(usize),
    #[error("pixel value {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("pixel ({row}, {col}) has value {value} outside [0, 1]")]
    PixelOutOfRange { row: usize, col: usize, value: f64 },
    #[error("image has {len} pixels, expected {height}x{width}")]
    ImageSize { height: usize, width: usize, len: usize },
}

/// Feature map of a fixed physical dimension `d` with the binomial prefactors
/// precomputed.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    d: usize,
    prefactors: Vec<f64>,
}

fn binomial(n: u64, k: u64) -> u64 {
    let k = k.min(n - k);
    (0..k).fold(1u64, |acc, i| acc * (n - i) / (i + 1))
}

impl FeatureMap {
    pub fn new(d: usize) -> Result<Self, EmbeddingError> {
        if d < 2 {
            return Err(EmbeddingError::Dimension(d));
        }
        let n = (d - 1) as u64;
        let prefactors = (0..d as u64).map(|k| (binomial(n, k) as f64).sqrt()).collect();
        Ok(FeatureMap { d, prefactors })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    /// Writes the `d` components for `x` into `out`.
    pub fn map_into(&self, x: f64, out: &mut [f64]) -> Result<(), EmbeddingError> {
        if !(0.0..=1.0).contains(&x) {
            return Err(EmbeddingError::OutOfRange(x));
        }
        let d = self.d;
        let (c, s) = quarter_turn(x);
        if d == 2 {
            out[0] = c;
            out[1] = s;
            return Ok(());
        }
        for (k, slot) in out[..d].iter_mut().enumerate() {
            *slot = self.prefactors[k] * c.powi((d - 1 - k) as i32) * s.powi(k as i32);
        }
        Ok(())
    }

    pub fn map(&self, x: f64) -> Result<Vec<f64>, EmbeddingError> {
        let mut v = vec![0.0; self.d];
        self.map_into(x, &mut v)?;
        Ok(v)
    }
}

/// `(cos(πx/2), sin(πx/2))`, exact at the endpoints so that `x = 1` maps to
/// an exact basis vector (`cos(π/2)` evaluates to 6e-17 otherwise).
fn quarter_turn(x: f64) -> (f64, f64) {
    if x == 1.0 {
        (0.0, 1.0)
    } else {
        let angle = FRAC_PI_2 * x;
        (angle.cos(), angle.sin())
    }
}

pub fn feature_map(x: f64, d: usize) -> Result<Vec<f64>, EmbeddingError> {
    FeatureMap::new(d)?.map(x)
}

/// Grid of unit-norm site vectors, stored as a `height × width × d` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ProductState {
    sites: Tensor,
}

impl ProductState {
    pub fn height(&self) -> usize {
        self.sites.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.sites.shape()[1]
    }

    pub fn site_dim(&self) -> usize {
        self.sites.shape()[2]
    }

    pub fn site(&self, row: usize, col: usize) -> &[f64] {
        let d = self.site_dim();
        let start = (row * self.width() + col) * d;
        &self.sites.data()[start..start + d]
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.sites
    }

    pub fn into_tensor(self) -> Tensor {
        self.sites
    }
}

/// Embeds a row-major `height × width` image with pixels in `[0, 1]`.
pub fn embed_image(
    pixels: &[f64],
    height: usize,
    width: usize,
    map: &FeatureMap,
) -> Result<ProductState, EmbeddingError> {
    if pixels.len() != height * width || pixels.is_empty() {
        return Err(EmbeddingError::ImageSize { height, width, len: pixels.len() });
    }
    let d = map.dim();
    let mut data = vec![0.0; pixels.len() * d];
    for (k, (&x, out)) in pixels.iter().zip(data.chunks_exact_mut(d)).enumerate() {
        map.map_into(x, out).map_err(|_| EmbeddingError::PixelOutOfRange {
            row: k / width,
            col: k % width,
            value: x,
        })?;
    }
    let sites = Tensor::from_vec(vec![height, width, d], data).expect("sized above");
    Ok(ProductState { sites })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_are_one_hot() {
        assert_eq!(feature_map(0.0, 4).unwrap(), vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(feature_map(1.0, 4).unwrap(), vec![0.0, 0.0, 0.0, 1.0]);
        assert_eq!(feature_map(1.0, 2).unwrap(), vec![0.0, 1.0]);
    }

    #[test]
    fn midpoint_d3() {
        // independent evaluation: cos²(π/4) = 1/2, sqrt(2)·cos·sin = 1/sqrt(2)
        let v = feature_map(0.5, 3).unwrap();
        let expected = [0.5, 0.70710678118654752, 0.5];
        for (a, b) in v.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15, "{v:?}");
        }
    }

    #[test]
    fn d2_is_cos_sin() {
        for x in [0.0, 0.1, 0.37, 0.5, 0.99] {
            let v = feature_map(x, 2).unwrap();
            assert_eq!(v, vec![(FRAC_PI_2 * x).cos(), (FRAC_PI_2 * x).sin()]);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        assert_eq!(feature_map(1.01, 2), Err(EmbeddingError::OutOfRange(1.01)));
        assert_eq!(feature_map(-0.5, 2), Err(EmbeddingError::OutOfRange(-0.5)));
        assert!(matches!(feature_map(f64::NAN, 2), Err(EmbeddingError::OutOfRange(_))));
        assert_eq!(FeatureMap::new(1), Err(EmbeddingError::Dimension(1)));
    }

    #[test]
    fn binomials() {
        assert_eq!(binomial(5, 2), 10);
        assert_eq!(binomial(4, 0), 1);
        assert_eq!(binomial(4, 4), 1);
        assert_eq!(binomial(10, 3), 120);
    }

    #[test]
    fn embed_reports_pixel_coordinates() {
        let map = FeatureMap::new(2).unwrap();
        let mut px = vec![0.0; 6];
        px[4] = 2.0;
        assert_eq!(
            embed_image(&px, 2, 3, &map),
            Err(EmbeddingError::PixelOutOfRange { row: 1, col: 1, value: 2.0 })
        );
        assert!(matches!(embed_image(&px, 4, 3, &map), Err(EmbeddingError::ImageSize { .. })));
    }

    #[test]
    fn single_bright_pixel() {
        let map = FeatureMap::new(2).unwrap();
        let mut px = vec![0.0; 32 * 32];
        px[0] = 1.0;
        let state = embed_image(&px, 32, 32, &map).unwrap();
        assert_eq!(state.site(0, 0), &[0.0, 1.0]);
        for r in 0..32 {
            for c in 0..32 {
                if (r, c) != (0, 0) {
                    assert_eq!(state.site(r, c), &[1.0, 0.0]);
                }
            }
        }
    }
}
