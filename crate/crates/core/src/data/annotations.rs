use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use super::{validate_points, CrowdSample, Point, WeatherTag};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One annotation line; the image itself is decoded lazily by [`load_sample`].
#[derive(Clone, Debug, PartialEq)]
pub struct SampleDescriptor {
    pub image_id: String,
    pub image_path: PathBuf,
    pub points: Vec<Point>,
    pub weather: WeatherTag,
    /// 1-based line in the annotation file.
    pub line: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Line {
    image: String,
    points: Vec<[f64; 2]>,
    #[serde(default)]
    weather: Option<String>,
    #[serde(default)]
    width: Option<u32>,
    #[serde(default)]
    height: Option<u32>,
}

/// Reads a JSON-lines annotation file. Blank lines are skipped; image paths
/// resolve relative to the file's directory.
pub fn parse_annotations(path: impl AsRef<Path>) -> Result<Vec<SampleDescriptor>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new(""));
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let parsed: Line = serde_json::from_str(raw).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message: e.to_string(),
        })?;
        let weather = match parsed.weather.as_deref() {
            None => WeatherTag::Unknown,
            Some(s) => s.parse().unwrap_or_else(|_| {
                log::warn!("{}:{line_no}: unrecognized weather tag {s:?}, using unknown", path.display());
                WeatherTag::Unknown
            }),
        };
        let points: Vec<Point> = parsed.points.iter().map(|&[x, y]| Point::new(x, y)).collect();
        let (w, h) = (
            parsed.width.map_or(f64::INFINITY, f64::from),
            parsed.height.map_or(f64::INFINITY, f64::from),
        );
        validate_points(&parsed.image, &points, w, h).map_err(|e| match e {
            Error::Validation(m) => Error::Validation(format!("{}:{line_no}: {m}", path.display())),
            other => other,
        })?;
        out.push(SampleDescriptor {
            image_path: base.join(&parsed.image),
            image_id: parsed.image,
            points,
            weather,
            line: line_no,
        });
    }
    Ok(out)
}

/// Decodes an image file into a `[3,H,W]` tensor with values in `[0,1]`.
pub fn load_image<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory(&bytes).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let rgb = img.to_rgb32f();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let raw = rgb.as_raw();
    let mut data = vec![T::zero(); 3 * h * w];
    for (i, px) in raw.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = T::lit(f64::from(px[c]));
        }
    }
    Tensor::from_vec(&[3, h, w], data)
}

/// Loads the image behind a descriptor, validates annotations against its
/// real size and applies the resize guard for `crop_size`.
pub fn load_sample<T: Scalar>(desc: &SampleDescriptor, crop_size: usize) -> Result<CrowdSample<T>> {
    let image = load_image(&desc.image_path)?;
    let sample = CrowdSample::new(desc.image_id.clone(), image, desc.points.clone(), desc.weather)?;
    Ok(sample.resize_guard(crop_size))
}
