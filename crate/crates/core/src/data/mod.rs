//! Annotation ingestion, sample validation and the two-crop augmentation.

mod annotations;
mod crop;
pub mod synthetic;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use annotations::{load_image, load_sample, parse_annotations, SampleDescriptor};
pub use crop::{flip_points, sample_crop_pair, transform_points, CropPair, CropParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum WeatherTag {
    Clear,
    Haze,
    Rain,
    Snow,
    #[default]
    Unknown,
}

impl WeatherTag {
    pub const ALL: [WeatherTag; 5] = [
        WeatherTag::Clear,
        WeatherTag::Haze,
        WeatherTag::Rain,
        WeatherTag::Snow,
        WeatherTag::Unknown,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            WeatherTag::Clear => "clear",
            WeatherTag::Haze => "haze",
            WeatherTag::Rain => "rain",
            WeatherTag::Snow => "snow",
            WeatherTag::Unknown => "unknown",
        }
    }

    pub fn is_adverse(self) -> bool {
        matches!(self, WeatherTag::Haze | WeatherTag::Rain | WeatherTag::Snow)
    }
}

impl fmt::Display for WeatherTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for WeatherTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "clear" => Ok(WeatherTag::Clear),
            "haze" => Ok(WeatherTag::Haze),
            "rain" => Ok(WeatherTag::Rain),
            "snow" => Ok(WeatherTag::Snow),
            "unknown" | "" => Ok(WeatherTag::Unknown),
            other => Err(Error::Validation(format!("unknown weather tag {other:?}"))),
        }
    }
}

/// Head position in continuous pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }
}

/// Per-channel standardization applied before the backbone.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Normalization {
    pub const IDENTITY: Normalization = Normalization {
        mean: [0.0; 3],
        std: [1.0; 3],
    };

    /// ImageNet channel statistics, matching ImageNet-pretrained backbones.
    pub const IMAGENET: Normalization = Normalization {
        mean: [0.485, 0.456, 0.406],
        std: [0.229, 0.224, 0.225],
    };

    /// `[3,H,W]` image in `[0,1]` → standardized copy.
    pub fn apply<T: Scalar>(&self, image: &Tensor<T>) -> Tensor<T> {
        let plane = image.shape()[1] * image.shape()[2];
        let mut out = image.clone();
        for (c, ch) in out.data_mut().chunks_mut(plane).enumerate() {
            let m = T::lit(self.mean[c]);
            let inv = T::lit(1.0 / self.std[c]);
            for v in ch {
                *v = (*v - m) * inv;
            }
        }
        out
    }
}

/// An image (channel-first `[3,H,W]`, values in `[0,1]`) with its head annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct CrowdSample<T> {
    pub image_id: String,
    pub image: Tensor<T>,
    pub points: Vec<Point>,
    pub weather: WeatherTag,
}

impl<T: Scalar> CrowdSample<T> {
    /// Validated constructor: image must be `[3,H,W]` and every point inside it.
    pub fn new(
        image_id: impl Into<String>,
        image: Tensor<T>,
        points: Vec<Point>,
        weather: WeatherTag,
    ) -> Result<Self> {
        let image_id = image_id.into();
        let s = image.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::Validation(format!(
                "{image_id}: image must be [3,H,W], got {s:?}"
            )));
        }
        validate_points(&image_id, &points, s[2] as f64, s[1] as f64)?;
        Ok(CrowdSample {
            image_id,
            image,
            points,
            weather,
        })
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    /// Upscales (bilinear, aspect preserved) so the shorter side is at least
    /// `crop_size`; annotations are scaled with the image.
    pub fn resize_guard(self, crop_size: usize) -> Self {
        let (h, w) = (self.height(), self.width());
        let short = h.min(w);
        if short >= crop_size {
            return self;
        }
        let scale = crop_size as f64 / short as f64;
        let nh = if h == short { crop_size } else { ((h as f64) * scale).ceil() as usize };
        let nw = if w == short { crop_size } else { ((w as f64) * scale).ceil() as usize };
        let (sx, sy) = (nw as f64 / w as f64, nh as f64 / h as f64);
        let image = resize_bilinear(&self.image, nh, nw);
        let points = self
            .points
            .iter()
            .map(|p| Point::new(p.x * sx, p.y * sy))
            .collect();
        CrowdSample {
            image,
            points,
            ..self
        }
    }
}

pub(crate) fn validate_points(id: &str, points: &[Point], width: f64, height: f64) -> Result<()> {
    for (i, p) in points.iter().enumerate() {
        let ok = p.x.is_finite()
            && p.y.is_finite()
            && p.x >= 0.0
            && p.y >= 0.0
            && p.x < width
            && p.y < height;
        if !ok {
            return Err(Error::Validation(format!(
                "{id}: point {i} ({}, {}) outside image bounds {width}×{height}",
                p.x, p.y
            )));
        }
    }
    Ok(())
}

/// Half-pixel-centered bilinear resampling of a `[C,H,W]` tensor.
pub fn resize_bilinear<T: Scalar>(image: &Tensor<T>, out_h: usize, out_w: usize) -> Tensor<T> {
    let s = image.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let (fy, fx) = (h as f64 / out_h as f64, w as f64 / out_w as f64);
    let src = |len: usize, f: f64, i: usize| {
        let pos = ((i as f64 + 0.5) * f - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = pos.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, T::lit(pos - i0 as f64))
    };
    let rows: Vec<_> = (0..out_h).map(|i| src(h, fy, i)).collect();
    let cols: Vec<_> = (0..out_w).map(|j| src(w, fx, j)).collect();
    let d = image.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let base = ch * h * w;
        for &(y0, y1, ty) in &rows {
            for &(x0, x1, tx) in &cols {
                let a = d[base + y0 * w + x0];
                let b = d[base + y0 * w + x1];
                let cc = d[base + y1 * w + x0];
                let dd = d[base + y1 * w + x1];
                let top = a + (b - a) * tx;
                let bot = cc + (dd - cc) * tx;
                out.push(top + (bot - top) * ty);
            }
        }
    }
    Tensor::from_vec(&[c, out_h, out_w], out).expect("resize shape")
}
