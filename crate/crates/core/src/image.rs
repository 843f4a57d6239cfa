use serde::{Deserialize, Serialize};

use crate::error::{CurateError, Result};
use crate::tensor::Tensor;

/// RGB image with values in `[0, 1]`, stored channel-major (`3×H×W`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(CurateError::Dimension("image sides must be positive".into()));
        }
        if data.len() != 3 * height * width {
            return Err(CurateError::Dimension(format!(
                "{} values for a 3×{height}×{width} image",
                data.len()
            )));
        }
        if let Some(index) = data.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(CurateError::Range(format!(
                "pixel value {} at {index} outside [0, 1]",
                data[index]
            )));
        }
        Ok(Image { height, width, data })
    }

    /// Builds an image from arbitrary values, clamping each into `[0, 1]`.
    pub fn clamped(height: usize, width: usize, mut data: Vec<f64>) -> Result<Self> {
        for v in &mut data {
            if !v.is_finite() {
                return Err(CurateError::NonFinite { index: 0 });
            }
            *v = v.clamp(0.0, 1.0);
        }
        Image::new(height, width, data)
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Result<Self> {
        let data = rgb.iter().flat_map(|&c| std::iter::repeat_n(c, height * width)).collect();
        Image::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let hw = self.height * self.width;
        &self.data[c * hw..(c + 1) * hw]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}

/// Stacks equally sized images into a `B×3×H×W` tensor.
pub fn images_to_tensor(images: &[Image]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| CurateError::EmptyInput("no images to stack".into()))?;
    let (h, w) = (first.height, first.width);
    if let Some(bad) = images.iter().position(|im| (im.height, im.width) != (h, w)) {
        return Err(CurateError::Dimension(format!(
            "image {bad} is {}×{}, expected {h}×{w}",
            images[bad].height, images[bad].width
        )));
    }
    let data = images.iter().flat_map(|im| im.data.iter().copied()).collect();
    Tensor::new(vec![images.len(), 3, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation() {
        assert!(Image::new(1, 1, vec![0.0, 0.5, 1.0]).is_ok());
        assert!(matches!(Image::new(1, 1, vec![0.0, 0.5, 1.5]), Err(CurateError::Range(_))));
        assert!(Image::new(1, 2, vec![0.0; 3]).is_err());
        let c = Image::clamped(1, 1, vec![-1.0, 0.25, 3.0]).unwrap();
        assert_eq!(c.data(), &[0.0, 0.25, 1.0]);
    }

    #[test]
    fn stacking() {
        let a = Image::filled(2, 2, [0.1, 0.2, 0.3]).unwrap();
        let t = images_to_tensor(&[a.clone(), a]).unwrap();
        assert_eq!(t.shape(), &[2, 3, 2, 2]);
        assert_eq!(t.data()[4], 0.2);
        let b = Image::filled(1, 2, [0.0; 3]).unwrap();
        assert!(images_to_tensor(&[Image::filled(2, 2, [0.0; 3]).unwrap(), b]).is_err());
        assert!(images_to_tensor(&[]).is_err());
    }
}
