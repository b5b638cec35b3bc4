//! Unit-range RGB images, pyramids and 8-bit PNG input/output.

use std::path::Path;

use image::{DynamicImage, RgbImage};

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::{Real, Shape, Tensor};

/// An RGB image with finite values in `[0, 1]`, stored channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor(Tensor<f32>);

impl ImageTensor {
    /// Wraps a 3-channel tensor, rejecting non-finite or out-of-range values.
    pub fn new(t: Tensor<f32>) -> Result<Self> {
        if t.channels() != 3 {
            return Err(Error::Format(format!("expected 3 channels, got {}", t.channels())));
        }
        if let Some(v) = t.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Numeric(format!("image value {v} outside [0, 1]")));
        }
        Ok(Self(t))
    }

    /// Clamps every value into `[0, 1]` (non-finite values become 0).
    pub fn from_clamped<T: Real>(t: &Tensor<T>) -> Result<Self> {
        let t: Tensor<f32> = t.cast();
        Self::new(t.map(|v| if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 }))
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Result<Self> {
        Self::new(Tensor::from_fn(Shape::new(3, height, width), |c, _, _| rgb[c]))
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.0
    }

    /// Quantizes to 8 bits with round-to-nearest.
    pub fn to_rgb8(&self) -> RgbImage {
        let (h, w) = (self.height(), self.width());
        RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = |c| (self.0.at(c, y as usize, x as usize) * 255.0).round() as u8;
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        to_unit_range(&image::open(path)?)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_rgb8().save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }
}

/// Converts an 8-bit RGB image to unit range (`v / 255`).
pub fn to_unit_range(raw: &DynamicImage) -> Result<ImageTensor> {
    let rgb = match raw {
        DynamicImage::ImageRgb8(img) => img,
        other => {
            return Err(Error::Format(format!(
                "expected 8-bit RGB, got {:?} ({} channels)",
                other.color(),
                other.color().channel_count()
            )))
        }
    };
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let t = Tensor::from_fn(Shape::new(3, h, w), |c, y, x| {
        rgb.get_pixel(x as u32, y as u32).0[c] as f32 / 255.0
    });
    ImageTensor::new(t)
}

/// Halves resolution with 2x2 average pooling.
pub fn downsample2x(img: &ImageTensor) -> Result<ImageTensor> {
    // Averaging keeps values in [0, 1].
    Ok(ImageTensor(kernels::downsample2x(&img.0)?))
}

/// Doubles resolution with bilinear interpolation (half-pixel centres).
pub fn upsample2x<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    kernels::upsample2x(t)
}

/// Multi-resolution stack; level 0 is full resolution, each later level is
/// half the size of the previous one.
#[derive(Clone, Debug, PartialEq)]
pub struct Pyramid {
    levels: Vec<ImageTensor>,
}

impl Pyramid {
    pub fn levels(&self) -> &[ImageTensor] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn level(&self, i: usize) -> &ImageTensor {
        &self.levels[i]
    }
}

pub fn build_pyramid(img: &ImageTensor, levels: usize) -> Result<Pyramid> {
    check_pyramid_dims(img.tensor().shape(), levels)?;
    let mut out = Vec::with_capacity(levels);
    out.push(img.clone());
    for _ in 1..levels {
        let next = downsample2x(out.last().expect("non-empty"))?;
        out.push(next);
    }
    Ok(Pyramid { levels: out })
}

pub(crate) fn check_pyramid_dims(shape: Shape, levels: usize) -> Result<()> {
    if levels == 0 {
        return Err(Error::Config("a pyramid needs at least one level".into()));
    }
    let f = 1usize << (levels - 1);
    if shape.height == 0 || shape.width == 0 || shape.height % f != 0 || shape.width % f != 0 {
        return Err(Error::Dimension(format!(
            "{}x{} is not divisible by {f} ({levels} pyramid levels)",
            shape.height, shape.width
        )));
    }
    Ok(())
}
