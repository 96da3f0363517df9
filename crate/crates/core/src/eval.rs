//! Counting metrics, whole-image inference, density export and the
//! weather-query nearest-neighbour probe.
//!
//! Note on naming: `mse` is the root of the mean squared count error, as is
//! customary in the crowd-counting literature.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{load_image, parse_annotations, CrowdSample, WeatherTag};
use crate::error::{Error, Result};
use crate::losses::cosine_similarity;
use crate::model::{DensityMap, Model};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DENSITY_MAGIC: &[u8; 8] = b"AWCCDMAP";

/// `(mean |gt − pred|, sqrt(mean (gt − pred)²))`.
pub fn mae_mse(gts: &[f64], preds: &[f64]) -> Result<(f64, f64)> {
    if gts.len() != preds.len() {
        return Err(Error::Dimension(format!(
            "{} ground-truth counts vs {} predictions",
            gts.len(),
            preds.len()
        )));
    }
    if gts.is_empty() {
        return Err(Error::Validation("cannot compute metrics over zero images".into()));
    }
    let q = gts.len() as f64;
    let (mut abs, mut sq) = (0.0, 0.0);
    for (g, p) in gts.iter().zip(preds) {
        abs += (g - p).abs();
        sq += (g - p) * (g - p);
    }
    Ok((abs / q, (sq / q).sqrt()))
}

/// Zero-pads `[3,H,W]` on the right and bottom to multiples of `stride`.
pub fn pad_to_stride<T: Scalar>(image: &Tensor<T>, stride: usize) -> Tensor<T> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let (ph, pw) = (h.div_ceil(stride) * stride, w.div_ceil(stride) * stride);
    if (ph, pw) == (h, w) {
        return image.clone();
    }
    let mut out = Tensor::zeros(&[3, ph, pw]);
    let src = image.data();
    let dst = out.data_mut();
    for c in 0..3 {
        for r in 0..h {
            let s = (c * h + r) * w;
            let d = (c * ph + r) * pw;
            dst[d..d + w].copy_from_slice(&src[s..s + w]);
        }
    }
    out
}

/// Count and density of an arbitrary-size `[3,H,W]` image in `[0,1]`. The
/// image is standardized, then zero-padded to the output stride; padded
/// cells contribute to the count.
pub fn infer_count<T: Scalar>(
    model: &Model<T>,
    image: &Tensor<T>,
    label: Option<WeatherTag>,
) -> Result<(f64, DensityMap<T>)> {
    let cfg = model.config();
    if image.shape().len() != 3 || image.shape()[0] != 3 {
        return Err(Error::Dimension(format!("image must be [3,H,W], got {:?}", image.shape())));
    }
    let x = pad_to_stride(&cfg.normalization.apply(image), cfg.output_stride);
    let out = model.forward_labeled(&x, label)?;
    Ok((out.density.count().as_f64(), out.density))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub mse: f64,
    /// Number of images.
    pub q: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageResult {
    pub image_id: String,
    pub gt: f64,
    pub pred: f64,
    pub weather: WeatherTag,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_subset: BTreeMap<String, Metrics>,
    pub overall: Metrics,
    pub per_image: Vec<ImageResult>,
}

/// Subset name of a weather tag under weather grouping.
pub fn subset_of(tag: WeatherTag) -> &'static str {
    match tag {
        WeatherTag::Clear => "clear",
        WeatherTag::Haze | WeatherTag::Rain | WeatherTag::Snow => "adverse",
        WeatherTag::Unknown => "unknown",
    }
}

fn metrics(rows: &[&ImageResult]) -> Result<Metrics> {
    let gts: Vec<f64> = rows.iter().map(|r| r.gt).collect();
    let preds: Vec<f64> = rows.iter().map(|r| r.pred).collect();
    let (mae, mse) = mae_mse(&gts, &preds)?;
    Ok(Metrics {
        mae,
        mse,
        q: rows.len(),
    })
}

/// Aggregates per-image results; with `by_weather` the report also holds
/// clear / adverse / unknown subsets (only those that occur).
pub fn summarize(per_image: Vec<ImageResult>, by_weather: bool) -> Result<EvalReport> {
    let all: Vec<&ImageResult> = per_image.iter().collect();
    let overall = metrics(&all)?;
    let mut per_subset = BTreeMap::new();
    if by_weather {
        let mut groups: BTreeMap<&str, Vec<&ImageResult>> = BTreeMap::new();
        for r in &per_image {
            groups.entry(subset_of(r.weather)).or_default().push(r);
        }
        if let Some(u) = groups.get("unknown") {
            log::warn!("{} image(s) without a weather tag grouped under \"unknown\"", u.len());
        }
        for (name, rows) in groups {
            per_subset.insert(name.to_string(), metrics(&rows)?);
        }
    }
    Ok(EvalReport {
        per_subset,
        overall,
        per_image,
    })
}

/// Runs `predict` over `samples` in order and summarizes.
pub fn evaluate_with<T: Scalar>(
    samples: impl IntoIterator<Item = Result<CrowdSample<T>>>,
    by_weather: bool,
    mut predict: impl FnMut(&CrowdSample<T>) -> Result<f64>,
) -> Result<EvalReport> {
    let mut rows = Vec::new();
    for s in samples {
        let s = s?;
        rows.push(ImageResult {
            pred: predict(&s)?,
            gt: s.points.len() as f64,
            image_id: s.image_id,
            weather: s.weather,
        });
    }
    if rows.is_empty() {
        return Err(Error::Validation("evaluation set contains no images".into()));
    }
    summarize(rows, by_weather)
}

/// Whole-image samples (no resize guard) from an annotation file.
pub fn load_eval_samples<T: Scalar>(
    annotations: impl AsRef<Path>,
) -> Result<impl Iterator<Item = Result<CrowdSample<T>>>> {
    let descs = parse_annotations(annotations)?;
    Ok(descs.into_iter().map(|d| {
        let image = load_image::<T>(&d.image_path)?;
        CrowdSample::new(d.image_id, image, d.points, d.weather)
    }))
}

/// Evaluates `model` on every image of an annotation file.
pub fn evaluate_dataset<T: Scalar>(
    model: &Model<T>,
    annotations: impl AsRef<Path>,
    by_weather: bool,
) -> Result<EvalReport> {
    evaluate_with(load_eval_samples::<T>(annotations)?, by_weather, |s| {
        Ok(infer_count(model, &s.image, Some(s.weather))?.0)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GalleryEntry {
    pub image_id: String,
    pub vector: Vec<f64>,
    pub weather: Option<WeatherTag>,
}

/// Flattened weather queries of a set of images.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct QueryGallery {
    entries: Vec<GalleryEntry>,
}

impl QueryGallery {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, image_id: impl Into<String>, vector: Vec<f64>, weather: Option<WeatherTag>) -> Result<()> {
        if let Some(first) = self.entries.first() {
            if first.vector.len() != vector.len() {
                return Err(Error::Dimension(format!(
                    "gallery vectors have length {}, got {}",
                    first.vector.len(),
                    vector.len()
                )));
            }
        }
        self.entries.push(GalleryEntry {
            image_id: image_id.into(),
            vector,
            weather,
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[GalleryEntry] {
        &self.entries
    }

    pub fn position(&self, image_id: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.image_id == image_id)
    }
}

/// Runs the weather branch over every sample.
pub fn build_gallery<T: Scalar>(
    model: &Model<T>,
    samples: impl IntoIterator<Item = Result<CrowdSample<T>>>,
) -> Result<QueryGallery> {
    let cfg = model.config();
    let mut g = QueryGallery::new();
    for s in samples {
        let s = s?;
        let x = pad_to_stride(&cfg.normalization.apply(&s.image), cfg.output_stride);
        let q = model.weather_queries(&x, Some(s.weather))?;
        let tag = (s.weather != WeatherTag::Unknown).then_some(s.weather);
        g.push(s.image_id, q.flattened().iter().map(|v| v.as_f64()).collect(), tag)?;
    }
    Ok(g)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub image_id: String,
    pub distance: f64,
    pub weather: Option<WeatherTag>,
}

/// `1 − φ(a, b)`.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    Ok(1.0 - cosine_similarity(a, b)?)
}

/// The `k` entries closest to `query_id` in cosine distance, ascending; the
/// query entry itself is excluded and ties keep gallery order.
pub fn probe_weather_neighbors(gallery: &QueryGallery, query_id: &str, k: usize) -> Result<Vec<Neighbor>> {
    let qi = gallery
        .position(query_id)
        .ok_or_else(|| Error::Validation(format!("query id {query_id:?} is not in the gallery")))?;
    if k == 0 || k >= gallery.len() {
        return Err(Error::Validation(format!(
            "k = {k} must be between 1 and {} (gallery size minus the query)",
            gallery.len().saturating_sub(1)
        )));
    }
    let q = &gallery.entries[qi].vector;
    let mut scored = Vec::with_capacity(gallery.len() - 1);
    for (i, e) in gallery.entries.iter().enumerate() {
        if i != qi {
            scored.push((cosine_distance(q, &e.vector)?, i));
        }
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(scored
        .into_iter()
        .take(k)
        .map(|(distance, i)| Neighbor {
            image_id: gallery.entries[i].image_id.clone(),
            distance,
            weather: gallery.entries[i].weather,
        })
        .collect())
}

fn density_bytes<T: Scalar>(density: &DensityMap<T>) -> Result<Vec<u8>> {
    let (rows, cols) = (density.rows(), density.cols());
    if rows == 0 || cols == 0 {
        return Err(Error::Validation("cannot export an empty density grid".into()));
    }
    let mut out = Vec::with_capacity(16 + 4 * rows * cols);
    out.extend_from_slice(DENSITY_MAGIC);
    out.extend_from_slice(&(rows as u32).to_le_bytes());
    out.extend_from_slice(&(cols as u32).to_le_bytes());
    for v in density.grid.data() {
        out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    Ok(out)
}

/// Writes the grid as magic, u32 rows, u32 cols, then row-major f32 values.
pub fn export_density<T: Scalar>(density: &DensityMap<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = density_bytes(density)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_density(path: impl AsRef<Path>) -> Result<DensityMap<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..8] != DENSITY_MAGIC {
        return Err(Error::Corrupt(format!("{}: not a density file", path.display())));
    }
    let rows = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let cols = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let payload = &bytes[16..];
    if rows == 0 || cols == 0 || payload.len() != 4 * rows * cols {
        return Err(Error::Corrupt(format!(
            "{}: header says {rows}×{cols}, payload has {} bytes",
            path.display(),
            payload.len()
        )));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    DensityMap::new(rows, cols, values)
}

/// Piecewise-linear dark-blue → cyan → yellow → red ramp on `t ∈ [0,1]`.
fn colormap(t: f64) -> [u8; 3] {
    const STOPS: [(f64, [f64; 3]); 5] = [
        (0.0, [0.0, 0.0, 0.2]),
        (0.25, [0.0, 0.3, 0.9]),
        (0.5, [0.0, 0.9, 0.9]),
        (0.75, [1.0, 0.9, 0.0]),
        (1.0, [0.9, 0.1, 0.0]),
    ];
    let t = t.clamp(0.0, 1.0);
    let i = STOPS.iter().rposition(|s| s.0 <= t).unwrap_or(0).min(STOPS.len() - 2);
    let (t0, a) = STOPS[i];
    let (t1, b) = STOPS[i + 1];
    let f = (t - t0) / (t1 - t0);
    let mut px = [0u8; 3];
    for c in 0..3 {
        px[c] = ((a[c] + f * (b[c] - a[c])) * 255.0).round() as u8;
    }
    px
}

/// Colour PNG of the grid, each cell drawn as a `scale × scale` block and
/// normalized to the grid maximum.
pub fn render_density<T: Scalar>(density: &DensityMap<T>, path: impl AsRef<Path>, scale: usize) -> Result<()> {
    let path = path.as_ref();
    let (rows, cols) = (density.rows(), density.cols());
    if rows == 0 || cols == 0 {
        return Err(Error::Validation("cannot render an empty density grid".into()));
    }
    let scale = scale.max(1);
    let max = density.grid.data().iter().map(|v| v.as_f64()).fold(0.0, f64::max);
    let img = image::RgbImage::from_fn((cols * scale) as u32, (rows * scale) as u32, |x, y| {
        let v = density.grid.at2(y as usize / scale, x as usize / scale).as_f64();
        image::Rgb(colormap(if max > 0.0 { v / max } else { 0.0 }))
    });
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn metric_examples() {
        let (mae, mse) = mae_mse(&[10.0, 20.0], &[12.0, 17.0]).unwrap();
        assert_eq!(mae, 2.5);
        assert!((mse - 6.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(mae_mse(&[3.0, 4.0], &[3.0, 4.0]).unwrap(), (0.0, 0.0));
        assert_eq!(mae_mse(&[100.0], &[87.0]).unwrap(), (13.0, 13.0));
        assert!(matches!(mae_mse(&[], &[]), Err(Error::Validation(_))));
        assert!(matches!(mae_mse(&[1.0], &[1.0, 2.0]), Err(Error::Dimension(_))));
    }

    fn row(id: &str, gt: f64, pred: f64, weather: WeatherTag) -> ImageResult {
        ImageResult {
            image_id: id.into(),
            gt,
            pred,
            weather,
        }
    }

    #[test]
    fn grouping_by_weather() {
        use WeatherTag::*;
        let rep = summarize(
            vec![
                row("a", 10.0, 12.0, Clear),
                row("b", 20.0, 17.0, Clear),
                row("c", 5.0, 5.0, Haze),
                row("d", 8.0, 4.0, Rain),
            ],
            true,
        )
        .unwrap();
        assert_eq!(rep.overall.q, 4);
        assert_eq!(rep.per_subset["clear"].q, 2);
        assert_eq!(rep.per_subset["adverse"].q, 2);
        assert!(!rep.per_subset.contains_key("unknown"));
        assert_eq!(rep.per_subset["clear"].mae, 2.5);
        assert_eq!(rep.per_subset["adverse"].mae, 2.0);
        assert_eq!(rep.overall.mae, 9.0 / 4.0);
        assert!((rep.overall.mse - (29.0f64 / 4.0).sqrt()).abs() < 1e-12);
        assert!(summarize(vec![], false).is_err());
    }

    #[test]
    fn padding_arithmetic() {
        let m = Model::<f32>::new(ModelConfig::tiny(), 0).unwrap();
        let img = Tensor::full(&[3, 500, 500], 0.5f32);
        let (count, d) = infer_count(&m, &img, None).unwrap();
        assert_eq!((d.rows(), d.cols()), (63, 63));
        let sum: f64 = d.grid.data().iter().map(|&v| v as f64).sum();
        assert!((count - sum).abs() <= 1e-5 * sum.abs().max(1.0), "{count} vs {sum}");
        let p = pad_to_stride(&Tensor::full(&[3, 5, 3], 1.0f64), 4);
        assert_eq!(p.shape(), &[3, 8, 4]);
        assert_eq!(p.sum(), 45.0);
    }

    #[test]
    fn zero_image_zero_offset_model_counts_zero() {
        let mut m = Model::<f64>::new(ModelConfig::tiny(), 1).unwrap();
        m.zero_offsets();
        for size in [(64, 64), (50, 70)] {
            let (count, _) = infer_count(&m, &Tensor::zeros(&[3, size.0, size.1]), None).unwrap();
            assert_eq!(count, 0.0);
        }
    }

    fn gallery_of(vectors: &[Vec<f64>]) -> QueryGallery {
        let mut g = QueryGallery::new();
        for (i, v) in vectors.iter().enumerate() {
            g.push(format!("img{i}"), v.clone(), None).unwrap();
        }
        g
    }

    fn random_gallery(seed: u64, n: usize, dim: usize) -> QueryGallery {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vs: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        gallery_of(&vs)
    }

    #[test]
    fn probe_finds_duplicates_and_guards_k() {
        let mut g = random_gallery(2, 12, 6);
        let dup = g.entries[5].vector.clone();
        g.entries[9].vector = dup;
        let n = probe_weather_neighbors(&g, "img5", 1).unwrap();
        assert_eq!(n[0].image_id, "img9");
        assert!(n[0].distance.abs() < 1e-12);
        assert!(matches!(probe_weather_neighbors(&g, "img5", 12), Err(Error::Validation(_))));
        assert!(probe_weather_neighbors(&g, "missing", 1).is_err());
    }

    #[test]
    fn probe_matches_full_scan() {
        let g = random_gallery(3, 50, 16);
        let got = probe_weather_neighbors(&g, "img7", 4).unwrap();
        let q = &g.entries[7].vector;
        let mut all: Vec<(f64, String)> = Vec::new();
        for e in g.entries() {
            if e.image_id == "img7" {
                continue;
            }
            let mut dot = 0.0;
            let mut qq = 0.0;
            let mut ee = 0.0;
            for i in 0..q.len() {
                dot += q[i] * e.vector[i];
                qq += q[i] * q[i];
                ee += e.vector[i] * e.vector[i];
            }
            all.push((1.0 - dot / (qq.sqrt() * ee.sqrt()), e.image_id.clone()));
        }
        all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        for (n, (d, id)) in got.iter().zip(&all) {
            assert_eq!(&n.image_id, id);
            assert!((n.distance - d).abs() < 1e-9);
        }
    }

    #[test]
    fn density_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.bin");
        let d = DensityMap::new(2, 2, vec![0.0f32, 1.0, 2.0, 3.0]).unwrap();
        export_density(&d, &p).unwrap();
        assert_eq!(fs::metadata(&p).unwrap().len(), 16 + 16);
        assert_eq!(read_density(&p).unwrap(), d);
        let empty = DensityMap::<f32>::new(0, 3, vec![]).unwrap();
        assert!(matches!(export_density(&empty, &p), Err(Error::Validation(_))));

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let big = DensityMap::new(64, 64, (0..4096).map(|_| rng.random::<f32>()).collect()).unwrap();
        export_density(&big, &p).unwrap();
        let back = read_density(&p).unwrap();
        assert!(big.grid.data().iter().zip(back.grid.data()).all(|(a, b)| a.to_bits() == b.to_bits()));

        let png = dir.path().join("d.png");
        render_density(&big, &png, 4).unwrap();
        let img = image::open(&png).unwrap();
        assert_eq!((img.width(), img.height()), (256, 256));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn mae_never_exceeds_mse(pairs in prop::collection::vec((0.0f64..500.0, 0.0f64..500.0), 1..40)) {
            let (g, p): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let (mae, mse) = mae_mse(&g, &p).unwrap();
            prop_assert!(mae <= mse + 1e-12);
        }

        #[test]
        fn subsets_partition_the_absolute_error(
            rows in prop::collection::vec((0.0f64..100.0, 0.0f64..100.0, 0usize..5), 1..30),
        ) {
            let per_image: Vec<ImageResult> = rows
                .iter()
                .enumerate()
                .map(|(i, &(g, p, t))| row(&format!("i{i}"), g, p, WeatherTag::ALL[t]))
                .collect();
            let rep = summarize(per_image, true).unwrap();
            let total: f64 = rep.per_subset.values().map(|m| m.mae * m.q as f64).sum();
            prop_assert!((total - rep.overall.mae * rep.overall.q as f64).abs() < 1e-9);
            prop_assert_eq!(rep.per_subset.values().map(|m| m.q).sum::<usize>(), rep.overall.q);
        }

        #[test]
        fn probe_distance_is_symmetric(seed in any::<u64>()) {
            let g = random_gallery(seed, 6, 8);
            for a in g.entries() {
                prop_assert!(cosine_distance(&a.vector, &a.vector).unwrap().abs() < 1e-12);
                for b in g.entries() {
                    let ab = cosine_distance(&a.vector, &b.vector).unwrap();
                    let ba = cosine_distance(&b.vector, &a.vector).unwrap();
                    prop_assert!((ab - ba).abs() < 1e-9);
                }
            }
            let n = probe_weather_neighbors(&g, "img0", 5).unwrap();
            prop_assert!(n.iter().all(|x| x.image_id != "img0"));
            prop_assert!(n.windows(2).all(|w| w[0].distance <= w[1].distance));
        }
    }
}
