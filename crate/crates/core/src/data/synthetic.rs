//! Procedurally generated crowd scenes for smoke tests and demos.
//!
//! Each head is a small bright blob; weather is simulated with a global
//! veil (haze), diagonal streaks (rain) or faint specks (snow).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{CrowdSample, Point, WeatherTag};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct SceneSpec {
    pub size: usize,
    pub min_points: usize,
    pub max_points: usize,
    /// Blob radius (standard deviation) in pixels.
    pub blob_sigma: f64,
}

impl SceneSpec {
    pub fn new(size: usize, min_points: usize, max_points: usize) -> Self {
        SceneSpec {
            size,
            min_points,
            max_points,
            blob_sigma: 2.0,
        }
    }
}

const CYCLE: [WeatherTag; 4] = [
    WeatherTag::Clear,
    WeatherTag::Haze,
    WeatherTag::Rain,
    WeatherTag::Snow,
];

/// `count` scenes, weather tags cycling clear → haze → rain → snow.
pub fn planted_crowd<T: Scalar>(count: usize, spec: &SceneSpec, seed: u64) -> Vec<CrowdSample<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| scene(format!("synthetic_{i:04}"), CYCLE[i % 4], spec, &mut rng))
        .collect()
}

fn scene<T: Scalar>(id: String, weather: WeatherTag, spec: &SceneSpec, rng: &mut ChaCha8Rng) -> CrowdSample<T> {
    let n = spec.size;
    let margin = 2.0 * spec.blob_sigma;
    let count = rng.random_range(spec.min_points..=spec.max_points);
    let points: Vec<Point> = (0..count)
        .map(|_| {
            Point::new(
                rng.random_range(margin..n as f64 - margin),
                rng.random_range(margin..n as f64 - margin),
            )
        })
        .collect();
    let mut img = vec![0.0f64; 3 * n * n];
    for px in img.iter_mut() {
        *px = 0.15 + 0.05 * rng.random::<f64>();
    }
    let two_s2 = 2.0 * spec.blob_sigma * spec.blob_sigma;
    let reach = (3.0 * spec.blob_sigma).ceil() as isize;
    for p in &points {
        let (cx, cy) = (p.x.floor() as isize, p.y.floor() as isize);
        for dy in -reach..=reach {
            for dx in -reach..=reach {
                let (x, y) = (cx + dx, cy + dy);
                if x < 0 || y < 0 || x >= n as isize || y >= n as isize {
                    continue;
                }
                let (fx, fy) = (x as f64 + 0.5 - p.x, y as f64 + 0.5 - p.y);
                let a = (-(fx * fx + fy * fy) / two_s2).exp();
                let i = y as usize * n + x as usize;
                img[i] += 0.8 * a;
                img[n * n + i] += 0.5 * a;
                img[2 * n * n + i] += 0.3 * a;
            }
        }
    }
    match weather {
        WeatherTag::Haze => {
            for v in img.iter_mut() {
                *v = 0.55 * *v + 0.4;
            }
        }
        WeatherTag::Rain => {
            let phase = rng.random_range(0..7);
            for y in 0..n {
                for x in 0..n {
                    if (x + y + phase) % 7 == 0 {
                        for c in 0..3 {
                            img[c * n * n + y * n + x] += 0.15;
                        }
                    }
                }
            }
        }
        WeatherTag::Snow => {
            for _ in 0..(n * n / 40) {
                let i = rng.random_range(0..n * n);
                for c in 0..3 {
                    img[c * n * n + i] += 0.25;
                }
            }
        }
        WeatherTag::Clear | WeatherTag::Unknown => {}
    }
    let data = img.into_iter().map(|v| T::lit(v.clamp(0.0, 1.0))).collect();
    let image = Tensor::from_vec(&[3, n, n], data).expect("scene shape");
    CrowdSample::new(id, image, points, weather).expect("planted points lie inside the scene")
}

/// Writes PNG images plus an `annotations.jsonl` into `dir`; returns the annotation path.
pub fn write_dataset(dir: impl AsRef<Path>, count: usize, spec: &SceneSpec, seed: u64) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let scenes = planted_crowd::<f32>(count, spec, seed);
    let ann_path = dir.join("annotations.jsonl");
    let mut ann = fs::File::create(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
    for s in &scenes {
        let file = format!("{}.png", s.image_id);
        let path = dir.join(&file);
        save_png(&s.image, &path)?;
        let pts: Vec<[f64; 2]> = s.points.iter().map(|p| [p.x, p.y]).collect();
        let line = serde_json::json!({ "image": file, "points": pts, "weather": s.weather.as_str() });
        writeln!(ann, "{line}").map_err(|e| Error::io(&ann_path, e))?;
    }
    Ok(ann_path)
}

/// Saves a `[3,H,W]` tensor in `[0,1]` as an 8-bit PNG.
pub fn save_png<T: Scalar>(image: &Tensor<T>, path: &Path) -> Result<()> {
    let s = image.shape();
    let (h, w) = (s[1], s[2]);
    let d = image.data();
    let buf = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        let q = |c: usize| (d[c * h * w + i].as_f64().clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([q(0), q(1), q(2)])
    });
    buf.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_sample, parse_annotations};

    #[test]
    fn scenes_are_reproducible_and_valid() {
        let spec = SceneSpec::new(64, 5, 30);
        let a = planted_crowd::<f64>(8, &spec, 42);
        let b = planted_crowd::<f64>(8, &spec, 42);
        assert_eq!(a, b);
        for (i, s) in a.iter().enumerate() {
            assert!((5..=30).contains(&s.points.len()));
            assert_eq!(s.weather, CYCLE[i % 4]);
            assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn written_dataset_loads_back() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SceneSpec::new(32, 1, 4);
        let ann = write_dataset(dir.path(), 3, &spec, 7).unwrap();
        let descs = parse_annotations(&ann).unwrap();
        assert_eq!(descs.len(), 3);
        let original = planted_crowd::<f32>(3, &spec, 7);
        for (d, o) in descs.iter().zip(&original) {
            let s: CrowdSample<f32> = load_sample(d, 32).unwrap();
            assert_eq!(s.points, o.points);
            assert_eq!(s.weather, o.weather);
            assert!(s.image.max_abs_diff(&o.image) <= 0.5 / 255.0 + 1e-6);
        }
    }
}
