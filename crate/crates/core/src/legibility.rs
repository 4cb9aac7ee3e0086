//! Legibility tables and class activation maps.
//!
//! A legibility table groups evaluated images by some attribute of where
//! they were taken and reports accuracy and confidence per group. A class
//! activation map projects the head weights of one class back onto the last
//! feature maps, `M_c(x, y) = sum_k w_{c,k} F_k(x, y)`.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use image::{GrayImage, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::corpus::DatasetManifest;
use crate::error::{Error, Result};
use crate::nnet::{topk_hit, EvalResult, Model, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupKey {
    Segment,
    Program,
    Hall,
    Floor,
    Pitch,
}

impl GroupKey {
    pub const ALL: [GroupKey; 5] = [
        GroupKey::Segment,
        GroupKey::Program,
        GroupKey::Hall,
        GroupKey::Floor,
        GroupKey::Pitch,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            GroupKey::Segment => "segment",
            GroupKey::Program => "program",
            GroupKey::Hall => "hall",
            GroupKey::Floor => "floor",
            GroupKey::Pitch => "pitch",
        }
    }
}

impl fmt::Display for GroupKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GroupKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GroupKey::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown grouping key '{s}'")))
    }
}

/// Group label with numeric values ordered numerically.
#[derive(Clone, Debug, PartialEq, PartialOrd)]
pub enum GroupValue {
    Number(f64),
    Text(String),
}

impl fmt::Display for GroupValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GroupValue::Number(v) => write!(f, "{v}"),
            GroupValue::Text(s) => f.write_str(s),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LegibilityRow {
    pub group: GroupValue,
    pub count: usize,
    pub top1_pct: f64,
    pub top5_pct: f64,
    pub mean_confidence_pct: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LegibilityTable {
    pub key: GroupKey,
    pub rows: Vec<LegibilityRow>,
}

impl LegibilityTable {
    pub fn total(&self) -> usize {
        self.rows.iter().map(|r| r.count).sum()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([self.key.as_str(), "count", "top1_pct", "top5_pct", "mean_confidence_pct"])?;
        for r in &self.rows {
            w.write_record([
                r.group.to_string(),
                r.count.to_string(),
                r.top1_pct.to_string(),
                r.top5_pct.to_string(),
                r.mean_confidence_pct.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn group_of(manifest: &DatasetManifest, path: &str, index: &HashMap<&str, usize>, key: GroupKey) -> Option<GroupValue> {
    let entry = &manifest.entries[*index.get(path)?];
    let seg = manifest.segments.get(entry.segment_id);
    match key {
        GroupKey::Segment => Some(GroupValue::Number(entry.segment_id as f64)),
        GroupKey::Pitch => Some(GroupValue::Number(entry.pitch)),
        GroupKey::Floor => seg.map(|s| GroupValue::Number(s.floor as f64)),
        GroupKey::Program => seg.map(|s| GroupValue::Text(s.program.as_str().to_string())),
        GroupKey::Hall => seg.and_then(|s| s.hall.clone()).map(GroupValue::Text),
    }
}

/// Groups an evaluation by an attribute looked up through the manifest.
pub fn legibility_by(eval: &EvalResult, manifest: &DatasetManifest, key: GroupKey) -> Result<LegibilityTable> {
    let index: HashMap<&str, usize> = manifest
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| (e.image_path.as_str(), i))
        .collect();
    let k5 = eval.num_classes.min(5);
    let mut groups: Vec<(GroupValue, [f64; 4])> = Vec::new();
    let mut missing = Vec::new();
    for p in &eval.predictions {
        let Some(g) = group_of(manifest, &p.path, &index, key) else {
            missing.push(p.path.clone());
            continue;
        };
        let slot = match groups.iter().position(|(v, _)| *v == g) {
            Some(i) => i,
            None => {
                groups.push((g, [0.0; 4]));
                groups.len() - 1
            }
        };
        let acc = &mut groups[slot].1;
        acc[0] += 1.0;
        acc[1] += topk_hit(&p.probs, p.label, 1) as u8 as f64;
        acc[2] += topk_hit(&p.probs, p.label, k5) as u8 as f64;
        acc[3] += p.conf_true();
    }
    if !missing.is_empty() {
        return Err(Error::Input(format!(
            "{} image(s) lack '{key}' metadata: {}",
            missing.len(),
            missing.join(", ")
        )));
    }
    groups.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal));
    let rows = groups
        .into_iter()
        .map(|(group, [n, h1, h5, conf])| LegibilityRow {
            group,
            count: n as usize,
            top1_pct: 100.0 * h1 / n,
            top5_pct: 100.0 * h5 / n,
            mean_confidence_pct: 100.0 * conf / n,
        })
        .collect();
    Ok(LegibilityTable { key, rows })
}

/// Row-major grid of reals.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Heatmap {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), width * height);
        Self { width, height, data }
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Normalized values as 8-bit grayscale.
    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([(self.get(x as usize, y as usize).clamp(0.0, 1.0) * 255.0).round() as u8])
        })
    }
}

/// `raw[y][x] = sum_k head[class][k] * F_k(x, y)` for a row-major
/// `S x K` head matrix.
pub fn cam(features: &Tensor<f64>, head: &[f64], class: usize) -> Result<Heatmap> {
    let k = features.channels;
    if k == 0 || head.len() % k != 0 {
        return Err(Error::Input(format!(
            "head of length {} does not match {k} feature maps",
            head.len()
        )));
    }
    if class >= head.len() / k {
        return Err(Error::Input(format!("class {class} out of range for {} classes", head.len() / k)));
    }
    let row = &head[class * k..(class + 1) * k];
    let n = features.height * features.width;
    let mut data = vec![0.0; n];
    for (j, w) in row.iter().enumerate() {
        for (d, f) in data.iter_mut().zip(features.plane(j)) {
            *d += w * f;
        }
    }
    Ok(Heatmap::new(features.width, features.height, data))
}

/// Bilinear upsampling with aligned corners, then min-max normalization.
/// A constant map normalizes to zeros.
pub fn upsample_cam(raw: &Heatmap, width: usize, height: usize) -> Heatmap {
    let coord = |i: usize, out: usize, src: usize| {
        if out <= 1 || src <= 1 {
            0.0
        } else {
            i as f64 * (src - 1) as f64 / (out - 1) as f64
        }
    };
    let mut data = Vec::with_capacity(width * height);
    for y in 0..height {
        let sy = coord(y, height, raw.height);
        let y0 = (sy.floor() as usize).min(raw.height - 1);
        let y1 = (y0 + 1).min(raw.height - 1);
        let ty = sy - y0 as f64;
        for x in 0..width {
            let sx = coord(x, width, raw.width);
            let x0 = (sx.floor() as usize).min(raw.width - 1);
            let x1 = (x0 + 1).min(raw.width - 1);
            let tx = sx - x0 as f64;
            let top = raw.get(x0, y0) * (1.0 - tx) + raw.get(x1, y0) * tx;
            let bot = raw.get(x0, y1) * (1.0 - tx) + raw.get(x1, y1) * tx;
            data.push(top * (1.0 - ty) + bot * ty);
        }
    }
    let lo = data.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    for v in &mut data {
        *v = if span > 0.0 { ((*v - lo) / span).clamp(0.0, 1.0) } else { 0.0 };
    }
    Heatmap::new(width, height, data)
}

/// Name of the overlay colormap, for output metadata.
pub const COLORMAP: &str = "viridis";

const VIRIDIS: [[f64; 3]; 11] = [
    [68.0, 1.0, 84.0],
    [72.0, 36.0, 117.0],
    [65.0, 68.0, 135.0],
    [53.0, 95.0, 141.0],
    [42.0, 120.0, 142.0],
    [33.0, 145.0, 140.0],
    [34.0, 168.0, 132.0],
    [68.0, 191.0, 112.0],
    [122.0, 209.0, 81.0],
    [189.0, 223.0, 38.0],
    [253.0, 231.0, 37.0],
];

/// Colormap lookup for `v` in `[0, 1]`, linear between table entries.
pub fn colormap(v: f64) -> [f64; 3] {
    let t = v.clamp(0.0, 1.0) * (VIRIDIS.len() - 1) as f64;
    let i = (t.floor() as usize).min(VIRIDIS.len() - 2);
    let f = t - i as f64;
    let (a, b) = (VIRIDIS[i], VIRIDIS[i + 1]);
    [0, 1, 2].map(|c| a[c] + (b[c] - a[c]) * f)
}

/// `(1 - alpha) * image + alpha * colormap(heatmap)`, rounded per channel.
pub fn overlay(heatmap: &Heatmap, image: &RgbImage, alpha: f64) -> Result<RgbImage> {
    if heatmap.width != image.width() as usize || heatmap.height != image.height() as usize {
        return Err(Error::Dimension(format!(
            "heatmap {}x{} vs image {}x{}",
            heatmap.width,
            heatmap.height,
            image.width(),
            image.height()
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha {alpha} outside [0, 1]")));
    }
    Ok(RgbImage::from_fn(image.width(), image.height(), |x, y| {
        let px = image.get_pixel(x, y).0;
        let c = colormap(heatmap.get(x as usize, y as usize));
        Rgb([0, 1, 2].map(|i| ((1.0 - alpha) * px[i] as f64 + alpha * c[i]).round().clamp(0.0, 255.0) as u8))
    }))
}

/// Which class a CAM explains.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CamTarget {
    #[default]
    Predicted,
    TrueLabel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CamHeatmap {
    pub image_path: String,
    pub class: usize,
    pub raw: Heatmap,
    pub upsampled: Heatmap,
}

/// Runs the model on `image` and builds the CAM for the chosen class,
/// upsampled to the image size.
pub fn image_cam<T: Scalar>(
    model: &Model<T>,
    image_path: &str,
    image: &RgbImage,
    label: usize,
    target: CamTarget,
) -> Result<CamHeatmap> {
    let n = model.config().input_size;
    let input = if image.width() as usize == n && image.height() as usize == n {
        Tensor::<T>::from_rgb(image)
    } else {
        let r = image::imageops::resize(image, n as u32, n as u32, image::imageops::FilterType::Triangle);
        Tensor::<T>::from_rgb(&r)
    };
    let out = model.forward(&input)?;
    let class = match target {
        CamTarget::Predicted => crate::nnet::argmax(&out.probs),
        CamTarget::TrueLabel => label,
    };
    let head: Vec<f64> = model.head_weight.iter().map(|v| v.as_f64()).collect();
    let raw = cam(&out.features, &head, class)?;
    let upsampled = upsample_cam(&raw, image.width() as usize, image.height() as usize);
    Ok(CamHeatmap {
        image_path: image_path.to_string(),
        class,
        raw,
        upsampled,
    })
}

/// Writes `<stem>_cam.png` (grayscale) and `<stem>_overlay.png` under `dir`.
pub fn export_cam(dir: &Path, stem: &str, heat: &CamHeatmap, image: &RgbImage, alpha: f64) -> Result<()> {
    let gray = dir.join(format!("{stem}_cam.png"));
    heat.upsampled.to_gray().save(&gray)?;
    let comp = dir.join(format!("{stem}_overlay.png"));
    overlay(&heat.upsampled, image, alpha)?.save(&comp)?;
    Ok(())
}

/// Downsamples by averaging the source pixels that fall in each output cell.
pub fn block_average(map: &Heatmap, out_w: usize, out_h: usize) -> Heatmap {
    let mut sums = vec![0.0; out_w * out_h];
    let mut counts = vec![0usize; out_w * out_h];
    for y in 0..map.height {
        let by = y * out_h / map.height;
        for x in 0..map.width {
            let bx = x * out_w / map.width;
            sums[by * out_w + bx] += map.get(x, y);
            counts[by * out_w + bx] += 1;
        }
    }
    let data = sums.iter().zip(&counts).map(|(s, &c)| s / c.max(1) as f64).collect();
    Heatmap::new(out_w, out_h, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{AnnotatedImage, Program, SegmentTable, SpatialSegment};
    use crate::nnet::Prediction;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn square(x: f64) -> Vec<[f64; 2]> {
        vec![[x, 0.0], [x + 1.0, 0.0], [x + 1.0, 1.0], [x, 1.0]]
    }

    fn fixture() -> (EvalResult, DatasetManifest) {
        let segs = vec![
            SpatialSegment {
                id: 0,
                name: "a".into(),
                program: Program::Commercial,
                floor: 0,
                hall: Some("north".into()),
                polygon: square(0.0),
            },
            SpatialSegment {
                id: 1,
                name: "b".into(),
                program: Program::Waiting,
                floor: 1,
                hall: None,
                polygon: square(2.0),
            },
        ];
        let table = SegmentTable::new(segs).unwrap();
        let entries: Vec<_> = (0..4)
            .map(|i| AnnotatedImage {
                image_path: format!("img{i}.png"),
                segment_id: (i / 2) as u32,
                yaw: 0.0,
                pitch: if i % 2 == 0 { 0.0 } else { 30.0 },
                split: None,
                pano_id: "p".into(),
            })
            .collect();
        let manifest = DatasetManifest::new(entries, table).unwrap();
        // One correct and one wrong image per segment.
        let preds = vec![
            Prediction { path: "img0.png".into(), label: 0, probs: vec![0.9, 0.1] },
            Prediction { path: "img1.png".into(), label: 0, probs: vec![0.4, 0.6] },
            Prediction { path: "img2.png".into(), label: 1, probs: vec![0.2, 0.8] },
            Prediction { path: "img3.png".into(), label: 1, probs: vec![0.7, 0.3] },
        ];
        (EvalResult::from_predictions(2, preds).unwrap(), manifest)
    }

    #[test]
    fn program_groups_count_by_hand() {
        let (eval, manifest) = fixture();
        let t = legibility_by(&eval, &manifest, GroupKey::Program).unwrap();
        assert_eq!(t.rows.len(), 2);
        for r in &t.rows {
            assert_eq!(r.count, 2);
            assert_eq!(r.top1_pct, 50.0);
        }
        assert_eq!(t.total(), 4);
        let seg0 = &legibility_by(&eval, &manifest, GroupKey::Segment).unwrap().rows[0];
        assert!((seg0.mean_confidence_pct - 65.0).abs() < 1e-12);
    }

    #[test]
    fn missing_hall_is_reported() {
        let (eval, manifest) = fixture();
        match legibility_by(&eval, &manifest, GroupKey::Hall) {
            Err(Error::Input(msg)) => assert!(msg.contains("img2.png") && msg.contains("img3.png")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn numeric_groups_sort_numerically() {
        let (eval, manifest) = fixture();
        let t = legibility_by(&eval, &manifest, GroupKey::Pitch).unwrap();
        assert_eq!(t.rows[0].group, GroupValue::Number(0.0));
        assert_eq!(t.rows[1].group, GroupValue::Number(30.0));
        assert_eq!(t.rows[0].top1_pct, 100.0);
        assert_eq!(t.rows[1].top1_pct, 0.0);
    }

    #[test]
    fn cam_examples() {
        let f = Tensor::from_vec(1, 2, 3, vec![1.0; 6]);
        let m = cam(&f, &[0.0, 2.5], 1).unwrap();
        assert!(m.data.iter().all(|v| *v == 2.5));
        let z = cam(&f, &[0.0, 2.5], 0).unwrap();
        assert!(z.data.iter().all(|v| *v == 0.0));
        assert!(cam(&f, &[1.0, 2.0], 2).is_err());
        let f2 = Tensor::from_vec(2, 1, 1, vec![1.0, 1.0]);
        assert!(cam(&f2, &[1.0, 2.0, 3.0], 0).is_err());
    }

    #[test]
    fn cam_is_linear_in_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = Tensor::from_vec(3, 4, 4, (0..48).map(|_| rng.random_range(-1.0..1.0)).collect());
        let w: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w2: Vec<f64> = w.iter().map(|v| 2.0 * v).collect();
        let a = cam(&f, &w, 1).unwrap();
        let b = cam(&f, &w2, 1).unwrap();
        for (p, q) in a.data.iter().zip(&b.data) {
            assert_eq!(2.0 * p, *q);
        }
    }

    #[test]
    fn upsample_examples() {
        let one = Heatmap::new(1, 1, vec![3.0]);
        assert!(upsample_cam(&one, 5, 5).data.iter().all(|v| *v == 0.0));
        let m = Heatmap::new(2, 2, vec![0.0, 0.0, 0.0, 1.0]);
        let up = upsample_cam(&m, 4, 4);
        assert_eq!(up.get(3, 3), 1.0);
        assert_eq!(up.get(0, 0), 0.0);
        let (mx, arg) = up
            .data
            .iter()
            .enumerate()
            .fold((f64::MIN, 0), |(b, bi), (i, v)| if *v > b { (*v, i) } else { (b, bi) });
        assert_eq!((mx, arg), (1.0, 15));
        assert!(up.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn upsample_round_trip_on_smooth_map() {
        let raw = Heatmap::new(
            8,
            8,
            (0..64)
                .map(|i| {
                    let (x, y) = ((i % 8) as f64 / 7.0, (i / 8) as f64 / 7.0);
                    (x * 2.0).sin() + y * y
                })
                .collect(),
        );
        let up = upsample_cam(&raw, 64, 64);
        let down = block_average(&up, 8, 8);
        let norm = upsample_cam(&raw, 8, 8);
        let err: f64 = down.data.iter().zip(&norm.data).map(|(a, b)| (a - b).abs()).sum::<f64>() / 64.0;
        assert!(err < 0.1, "{err}");
    }

    #[test]
    fn overlay_blends() {
        let img = RgbImage::from_fn(2, 2, |x, y| Rgb([(x * 100) as u8, (y * 100) as u8, 50]));
        let h = Heatmap::new(2, 2, vec![0.0, 0.5, 1.0, 0.25]);
        assert_eq!(overlay(&h, &img, 0.0).unwrap(), img);
        let pure = overlay(&h, &img, 1.0).unwrap();
        assert_eq!(pure.get_pixel(0, 0).0, [68, 1, 84]);
        assert_eq!(pure.get_pixel(0, 1).0, [253, 231, 37]);
        let half = overlay(&h, &img, 0.5).unwrap();
        // pixel (1, 0): image (100, 0, 50), colormap(0.5) = (33, 145, 140)
        assert_eq!(half.get_pixel(1, 0).0, [67, 73, 95]);
        // pixel (1, 1): colormap(0.25) halfway between (65,68,135) and (53,95,141)
        assert_eq!(half.get_pixel(1, 1).0, [80, 91, 94]);
        assert!(overlay(&Heatmap::new(1, 1, vec![0.0]), &img, 0.5).is_err());
    }
}
