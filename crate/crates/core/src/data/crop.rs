use rand::Rng;

use super::{CrowdSample, Point};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropParams {
    pub crop_size: usize,
    /// Lower end of the overlap-factor distribution; 1.0 forces identical regions.
    pub overlap_min: f64,
    /// Probability of horizontally flipping the anchor.
    pub flip_prob: f64,
}

impl CropParams {
    pub fn new(crop_size: usize) -> Self {
        CropParams {
            crop_size,
            overlap_min: 0.5,
            flip_prob: 0.5,
        }
    }
}

/// Anchor crop (counting input) and an overlapping positive crop.
#[derive(Clone, Debug)]
pub struct CropPair<T> {
    pub anchor: CrowdSample<T>,
    pub positive: CrowdSample<T>,
    /// Intersection area of the two regions divided by the crop area.
    pub overlap_factor: f64,
    /// `(x, y)` of the anchor region in the source image.
    pub anchor_origin: (usize, usize),
    pub positive_origin: (usize, usize),
    pub flipped: bool,
}

/// Maps image-space points into a crop. Points outside `[0, crop_size)²`
/// are dropped; `x′ = crop_size − x` when flipped.
pub fn transform_points(
    points: &[Point],
    origin: (f64, f64),
    crop_size: usize,
    flipped: bool,
) -> Vec<Point> {
    let size = crop_size as f64;
    points
        .iter()
        .filter_map(|p| {
            let (x, y) = (p.x - origin.0, p.y - origin.1);
            if x < 0.0 || y < 0.0 || x >= size || y >= size {
                return None;
            }
            Some(Point::new(if flipped { size - x } else { x }, y))
        })
        .collect()
}

/// Horizontal mirror of continuous coordinates, `x′ = width − x`.
pub fn flip_points(points: &[Point], width: f64) -> Vec<Point> {
    points.iter().map(|p| Point::new(width - p.x, p.y)).collect()
}

fn crop_image<T: Scalar>(image: &Tensor<T>, x0: usize, y0: usize, size: usize, flip: bool) -> Tensor<T> {
    let s = image.shape();
    let (h, w) = (s[1], s[2]);
    debug_assert!(x0 + size <= w && y0 + size <= h);
    let d = image.data();
    let mut out = Vec::with_capacity(3 * size * size);
    for c in 0..3 {
        for r in 0..size {
            let start = (c * h + y0 + r) * w + x0;
            let row = &d[start..start + size];
            if flip {
                out.extend(row.iter().rev());
            } else {
                out.extend_from_slice(row);
            }
        }
    }
    Tensor::from_vec(&[3, size, size], out).expect("crop shape")
}

/// Draws the anchor/positive crop pair.
///
/// Random draws, in order: anchor x, anchor y, flip, overlap factor, shift
/// axis, shift direction. The positive is displaced from the anchor by
/// `s = floor((1-u)·crop)` pixels along one axis, so its overlap factor is
/// `(crop - s)/crop`. When the drawn axis and direction leave the image, the
/// other direction and then the other axis are tried; if none fits, the shift
/// is clamped to the largest available room, which only raises the overlap.
pub fn sample_crop_pair<T: Scalar, R: Rng + ?Sized>(
    sample: &CrowdSample<T>,
    params: &CropParams,
    rng: &mut R,
) -> Result<CropPair<T>> {
    let crop = params.crop_size;
    let (h, w) = (sample.height(), sample.width());
    if crop == 0 || crop > h.min(w) {
        return Err(Error::Precondition(format!(
            "{}: crop size {crop} exceeds image {w}×{h}; apply the resize guard first",
            sample.image_id
        )));
    }
    if !(0.0..=1.0).contains(&params.overlap_min) {
        return Err(Error::Config(format!(
            "overlap_min must lie in [0,1], got {}",
            params.overlap_min
        )));
    }
    let ax = rng.random_range(0..=w - crop);
    let ay = rng.random_range(0..=h - crop);
    let flipped = rng.random::<f64>() < params.flip_prob;
    let u = if params.overlap_min >= 1.0 {
        1.0
    } else {
        rng.random_range(params.overlap_min..=1.0)
    };
    let horizontal = rng.random_bool(0.5);
    let forward = rng.random_bool(0.5);

    let mut shift = ((1.0 - u) * crop as f64).floor() as usize;
    let room = |hz: bool, fw: bool| -> usize {
        match (hz, fw) {
            (true, true) => w - crop - ax,
            (true, false) => ax,
            (false, true) => h - crop - ay,
            (false, false) => ay,
        }
    };
    let options = [
        (horizontal, forward),
        (horizontal, !forward),
        (!horizontal, forward),
        (!horizontal, !forward),
    ];
    let (hz, fw) = match options.iter().find(|&&(hz, fw)| room(hz, fw) >= shift) {
        Some(&o) => o,
        None => {
            let best = *options
                .iter()
                .max_by_key(|&&(hz, fw)| room(hz, fw))
                .expect("non-empty");
            shift = room(best.0, best.1);
            best
        }
    };
    let (px, py) = match (hz, fw) {
        (true, true) => (ax + shift, ay),
        (true, false) => (ax - shift, ay),
        (false, true) => (ax, ay + shift),
        (false, false) => (ax, ay - shift),
    };
    let overlap_factor = (crop - shift) as f64 / crop as f64;

    let anchor = CrowdSample {
        image_id: sample.image_id.clone(),
        image: crop_image(&sample.image, ax, ay, crop, flipped),
        points: transform_points(&sample.points, (ax as f64, ay as f64), crop, flipped),
        weather: sample.weather,
    };
    let positive = CrowdSample {
        image_id: sample.image_id.clone(),
        image: crop_image(&sample.image, px, py, crop, false),
        points: transform_points(&sample.points, (px as f64, py as f64), crop, false),
        weather: sample.weather,
    };
    Ok(CropPair {
        anchor,
        positive,
        overlap_factor,
        anchor_origin: (ax, ay),
        positive_origin: (px, py),
        flipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::WeatherTag;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample(h: usize, w: usize, points: Vec<Point>) -> CrowdSample<f64> {
        let img = Tensor::from_fn(&[3, h, w], |i| (i % 251) as f64 / 251.0);
        CrowdSample::new("s", img, points, WeatherTag::Rain).unwrap()
    }

    #[test]
    fn boundary_filter() {
        let pts = [Point::new(0.0, 0.0), Point::new(600.0, 600.0)];
        assert_eq!(transform_points(&pts, (0.0, 0.0), 512, false), vec![Point::new(0.0, 0.0)]);
        assert!(transform_points(&[], (3.0, 4.0), 512, true).is_empty());
    }

    #[test]
    fn origin_subtraction_and_flip() {
        let p = [Point::new(100.0, 100.0)];
        assert_eq!(transform_points(&p, (50.0, 50.0), 512, false), vec![Point::new(50.0, 50.0)]);
        let local = [Point::new(50.0, 7.0)];
        assert_eq!(transform_points(&local, (0.0, 0.0), 512, true), vec![Point::new(462.0, 7.0)]);
    }

    #[test]
    fn brute_force_membership() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let pts: Vec<Point> = (0..20)
            .map(|_| Point::new(rng.random_range(0.0..1024.0), rng.random_range(0.0..1024.0)))
            .collect();
        let (ox, oy) = (rng.random_range(0..512) as f64, rng.random_range(0..512) as f64);
        let got = transform_points(&pts, (ox, oy), 512, false);
        let mut want = Vec::new();
        for p in &pts {
            let inside_x = p.x >= ox && p.x < ox + 512.0;
            let inside_y = p.y >= oy && p.y < oy + 512.0;
            if inside_x && inside_y {
                want.push(Point::new(p.x - ox, p.y - oy));
            }
        }
        assert_eq!(got, want);
    }

    #[test]
    fn full_overlap_without_flip_gives_identical_regions() {
        let s = sample(40, 50, vec![Point::new(10.0, 10.0)]);
        let params = CropParams {
            crop_size: 32,
            overlap_min: 1.0,
            flip_prob: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pair = sample_crop_pair(&s, &params, &mut rng).unwrap();
        assert_eq!(pair.overlap_factor, 1.0);
        assert_eq!(pair.anchor_origin, pair.positive_origin);
        assert_eq!(pair.anchor.image, pair.positive.image);
        assert!(!pair.flipped);
    }

    #[test]
    fn oversized_crop_is_a_precondition_error() {
        let s = sample(20, 40, vec![]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let err = sample_crop_pair(&s, &CropParams::new(21), &mut rng).unwrap_err();
        assert!(matches!(err, Error::Precondition(_)));
    }

    #[test]
    fn flipped_crop_mirrors_pixels() {
        let s = sample(16, 16, vec![]);
        let params = CropParams {
            crop_size: 16,
            overlap_min: 1.0,
            flip_prob: 1.0,
        };
        let pair = sample_crop_pair(&s, &params, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(pair.flipped);
        for c in 0..3 {
            for r in 0..16 {
                for x in 0..16 {
                    assert_eq!(pair.anchor.image.at3(c, r, x), s.image.at3(c, r, 15 - x));
                }
            }
        }
    }

    fn region_overlap(a: (usize, usize), b: (usize, usize), size: usize) -> f64 {
        let ix = (a.0 + size).min(b.0 + size).saturating_sub(a.0.max(b.0));
        let iy = (a.1 + size).min(b.1 + size).saturating_sub(a.1.max(b.1));
        (ix * iy) as f64 / (size * size) as f64
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn crop_pair_invariants(
            seed in any::<u64>(),
            h in 32usize..80,
            w in 32usize..80,
            crop in 8usize..33,
            n in 0usize..25,
        ) {
            let mut prng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
            let pts: Vec<Point> = (0..n)
                .map(|_| Point::new(prng.random_range(0.0..w as f64), prng.random_range(0.0..h as f64)))
                .collect();
            let s = sample(h, w, pts.clone());
            let params = CropParams::new(crop);
            let pair = sample_crop_pair(&s, &params, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let again = sample_crop_pair(&s, &params, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            prop_assert_eq!(&pair.anchor, &again.anchor);
            prop_assert_eq!(&pair.positive, &again.positive);

            prop_assert_eq!(pair.anchor.image.shape(), &[3, crop, crop]);
            prop_assert_eq!(pair.positive.image.shape(), &[3, crop, crop]);
            prop_assert!(pair.overlap_factor >= params.overlap_min && pair.overlap_factor <= 1.0);
            let measured = region_overlap(pair.anchor_origin, pair.positive_origin, crop);
            prop_assert!((measured - pair.overlap_factor).abs() < 1e-12);

            prop_assert!(pair.anchor.points.len() <= pts.len());
            let (ox, oy) = (pair.anchor_origin.0 as f64, pair.anchor_origin.1 as f64);
            for p in &pair.anchor.points {
                let lx = if pair.flipped { crop as f64 - p.x } else { p.x };
                let back = Point::new(lx + ox, p.y + oy);
                prop_assert!(pts.iter().any(|q| (q.x - back.x).abs() < 1e-9 && (q.y - back.y).abs() < 1e-9));
            }

            let mirrored = flip_points(&flip_points(&pts, w as f64), w as f64);
            for (a, b) in mirrored.iter().zip(&pts) {
                prop_assert!((a.x - b.x).abs() < 1e-9 && a.y == b.y);
            }
        }
    }
}
