//! Synthetic segmentation scenes, augmentation, on-disk layout and mean IoU.
//!
//! Scenes are a noisy background (class 0) with one to five rectangles,
//! circles or triangles drawn on top. Every object class has its own colour
//! distribution, so labels follow from pixel colours plus shape context.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::seed::rng_for;
use crate::tensor::Tensor;

/// Label value excluded from losses and metrics.
pub const IGNORE_LABEL: u8 = 255;

/// Per-pixel class map in row-major order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        LabelMap { height, width, data: vec![value; height * width] }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    /// Nearest-neighbour subsampling by `stride`, sampling the cell centre.
    pub fn downsample(&self, stride: usize) -> LabelMap {
        let (h, w) = (self.height / stride, self.width / stride);
        let off = stride / 2;
        let data = (0..h)
            .flat_map(|y| (0..w).map(move |x| (y, x)))
            .map(|(y, x)| self.get(y * stride + off, x * stride + off))
            .collect();
        LabelMap { height: h, width: w, data }
    }
}

/// One image `(1, 3, H, W)` in `[0, 1]` with its label map.
#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    pub image: Tensor,
    pub labels: LabelMap,
}

impl SegSample {
    pub fn new(image: Tensor, labels: LabelMap) -> Result<Self> {
        let [n, c, h, w] = image.shape;
        if n != 1 || c != 3 || h != labels.height || w != labels.width {
            return Err(Error::ShapeMismatch(format!(
                "image {:?} with labels {}x{}",
                image.shape, labels.height, labels.width
            )));
        }
        Ok(SegSample { image, labels })
    }

    pub fn height(&self) -> usize {
        self.labels.height
    }

    pub fn width(&self) -> usize {
        self.labels.width
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
}

impl SceneConfig {
    pub fn new(height: usize, width: usize, num_classes: usize) -> Self {
        SceneConfig { height, width, num_classes, min_shapes: 1, max_shapes: 5 }
    }

    fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > 255 {
            return Err(Error::BadConfig(format!("num_classes {} outside [2, 255]", self.num_classes)));
        }
        if self.height < 32 || self.width < 32 {
            return Err(Error::BadConfig(format!("scene {}x{} smaller than 32x32", self.height, self.width)));
        }
        if self.min_shapes > self.max_shapes {
            return Err(Error::BadConfig("min_shapes > max_shapes".into()));
        }
        Ok(())
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Mean colour of `class`; background is mid grey, objects get evenly spaced hues.
pub fn class_color(class: usize, num_classes: usize) -> [f64; 3] {
    if class == 0 {
        return [0.45, 0.45, 0.45];
    }
    hsv_to_rgb((class - 1) as f64 / (num_classes - 1) as f64, 0.85, 0.9)
}

enum Shape {
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
    Circle { cy: f64, cx: f64, r: f64 },
    Triangle { pts: [(f64, f64); 3] },
}

impl Shape {
    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Rect { y0, x0, y1, x1 } => y >= y0 && y < y1 && x >= x0 && x < x1,
            Shape::Circle { cy, cx, r } => (y - cy).powi(2) + (x - cx).powi(2) <= r * r,
            Shape::Triangle { pts } => {
                let edge = |(ay, ax): (f64, f64), (by, bx): (f64, f64)| (bx - ax) * (y - ay) - (by - ay) * (x - ax);
                let d = [edge(pts[0], pts[1]), edge(pts[1], pts[2]), edge(pts[2], pts[0])];
                d.iter().all(|&v| v >= 0.0) || d.iter().all(|&v| v <= 0.0)
            }
        }
    }
}

/// Deterministic toy scene with the default one to five shapes.
pub fn generate_toy_scene(seed: u64, height: usize, width: usize, num_classes: usize) -> Result<SegSample> {
    generate_scene(seed, &SceneConfig::new(height, width, num_classes))
}

pub fn generate_scene(seed: u64, cfg: &SceneConfig) -> Result<SegSample> {
    cfg.validate()?;
    let mut rng = rng_for(seed, "scene", 0);
    let (h, w) = (cfg.height, cfg.width);
    let mut labels = LabelMap::filled(h, w, 0);
    let mut base = vec![[0.0f64; 3]; h * w];
    let jitter =
        |rng: &mut rand_chacha::ChaCha8Rng, c: [f64; 3]| c.map(|v| (v + rng.gen_range(-0.08..0.08)).clamp(0.0, 1.0));
    let bg = jitter(&mut rng, class_color(0, cfg.num_classes));
    base.iter_mut().for_each(|p| *p = bg);

    let count = rng.gen_range(cfg.min_shapes..=cfg.max_shapes);
    let side = h.min(w) as f64;
    for _ in 0..count {
        let class = rng.gen_range(1..cfg.num_classes);
        let color = jitter(&mut rng, class_color(class, cfg.num_classes));
        let size = rng.gen_range(side / 6.0..side / 2.5);
        let cy = rng.gen_range(0.0..h as f64);
        let cx = rng.gen_range(0.0..w as f64);
        let shape = match rng.gen_range(0..3) {
            0 => {
                let aspect = rng.gen_range(0.6..1.6);
                let (hh, hw) = (size * aspect / 2.0, size / aspect / 2.0);
                Shape::Rect { y0: cy - hh, x0: cx - hw, y1: cy + hh, x1: cx + hw }
            }
            1 => Shape::Circle { cy, cx, r: size / 2.0 },
            _ => {
                let rot = rng.gen_range(0.0..std::f64::consts::TAU);
                let pts = [0.0, 1.0, 2.0].map(|i: f64| {
                    let a = rot + i * std::f64::consts::TAU / 3.0;
                    (cy + size * 0.6 * a.sin(), cx + size * 0.6 * a.cos())
                });
                Shape::Triangle { pts }
            }
        };
        for y in 0..h {
            for x in 0..w {
                if shape.contains(y as f64 + 0.5, x as f64 + 0.5) {
                    labels.data[y * w + x] = class as u8;
                    base[y * w + x] = color;
                }
            }
        }
    }

    let mut image = Tensor::zeros([1, 3, h, w]);
    for (p, color) in base.iter().enumerate() {
        for (ch, &v) in color.iter().enumerate() {
            let noisy = (v + rng.gen_range(-0.06..0.06)).clamp(0.0, 1.0);
            // Stored on the 8-bit grid so images survive PPM export bit-exactly.
            image.data[ch * h * w + p] = (noisy * 255.0).round() / 255.0;
        }
    }
    SegSample::new(image, labels)
}

/// Augmentations applied identically to image and labels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Augment {
    /// Horizontal mirror.
    Reflect,
    /// Nearest-neighbour resize.
    Resize { height: usize, width: usize },
    /// Crop at a seed-chosen offset.
    RandomCrop { height: usize, width: usize },
}

fn remap(sample: &SegSample, oh: usize, ow: usize, src: impl Fn(usize, usize) -> (usize, usize)) -> SegSample {
    let (h, w) = (sample.height(), sample.width());
    let mut image = Tensor::zeros([1, 3, oh, ow]);
    let mut labels = LabelMap::filled(oh, ow, 0);
    for y in 0..oh {
        for x in 0..ow {
            let (sy, sx) = src(y, x);
            labels.data[y * ow + x] = sample.labels.get(sy, sx);
            for ch in 0..3 {
                image.data[(ch * oh + y) * ow + x] = sample.image.data[(ch * h + sy) * w + sx];
            }
        }
    }
    SegSample { image, labels }
}

pub fn augment(sample: &SegSample, seed: u64, mode: Augment) -> Result<SegSample> {
    let (h, w) = (sample.height(), sample.width());
    match mode {
        Augment::Reflect => Ok(remap(sample, h, w, |y, x| (y, w - 1 - x))),
        Augment::Resize { height, width } => {
            if height == 0 || width == 0 {
                return Err(Error::BadConfig("resize to empty image".into()));
            }
            Ok(remap(sample, height, width, |y, x| (y * h / height, x * w / width)))
        }
        Augment::RandomCrop { height, width } => {
            if height == 0 || width == 0 || height > h || width > w {
                return Err(Error::BadCrop(format!("crop {height}x{width} from {h}x{w}")));
            }
            let mut rng = rng_for(seed, "crop", 0);
            let oy = rng.gen_range(0..=h - height);
            let ox = rng.gen_range(0..=w - width);
            Ok(remap(sample, height, width, |y, x| (y + oy, x + ox)))
        }
    }
}

/// `C × C` pixel counts, rows are ground truth and columns predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix { num_classes, counts: vec![0; num_classes * num_classes] }
    }

    pub fn from_counts(num_classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != num_classes * num_classes {
            return Err(Error::ShapeMismatch(format!("{} counts for {num_classes} classes", counts.len())));
        }
        Ok(ConfusionMatrix { num_classes, counts })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// IoU per class; `None` where the class is absent from both truth and prediction.
    pub fn class_iou(&self) -> Vec<Option<f64>> {
        let c = self.num_classes;
        (0..c)
            .map(|k| {
                let tp = self.get(k, k);
                let row: u64 = (0..c).map(|j| self.get(k, j)).sum();
                let col: u64 = (0..c).map(|i| self.get(i, k)).sum();
                let denom = row + col - tp;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect()
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("truth\\pred");
        for j in 0..self.num_classes {
            s.push_str(&format!("\t{j}"));
        }
        s.push('\n');
        for i in 0..self.num_classes {
            s.push_str(&i.to_string());
            for j in 0..self.num_classes {
                s.push_str(&format!("\t{}", self.get(i, j)));
            }
            s.push('\n');
        }
        s
    }
}

/// Adds `pred` vs `truth` pixel counts to `cm`, skipping ignore-label pixels.
pub fn accumulate_confusion(pred: &LabelMap, truth: &LabelMap, cm: &mut ConfusionMatrix) -> Result<()> {
    if pred.height != truth.height || pred.width != truth.width {
        return Err(Error::ShapeMismatch(format!(
            "prediction {}x{} vs truth {}x{}",
            pred.height, pred.width, truth.height, truth.width
        )));
    }
    let c = cm.num_classes;
    for (&p, &t) in pred.data.iter().zip(&truth.data) {
        if t == IGNORE_LABEL {
            continue;
        }
        let (t, p) = (t as usize, p as usize);
        if t >= c || p >= c {
            return Err(Error::BadLabels(format!("label {t}/{p} outside {c} classes")));
        }
        cm.counts[t * c + p] += 1;
    }
    Ok(())
}

/// Mean over classes of `TP / (TP + FP + FN)`; absent classes are skipped.
pub fn mean_iou(cm: &ConfusionMatrix) -> Result<f64> {
    let ious: Vec<f64> = cm.class_iou().into_iter().flatten().collect();
    if ious.is_empty() {
        return Err(Error::EmptyMatrix);
    }
    Ok(ious.iter().sum::<f64>() / ious.len() as f64)
}

fn read_token(input: &mut impl BufRead) -> Result<String> {
    let mut token = String::new();
    loop {
        let mut byte = [0u8; 1];
        input.read_exact(&mut byte)?;
        let ch = byte[0] as char;
        if ch == '#' && token.is_empty() {
            let mut line = String::new();
            input.read_line(&mut line)?;
            continue;
        }
        if ch.is_ascii_whitespace() {
            if token.is_empty() {
                continue;
            }
            return Ok(token);
        }
        token.push(ch);
    }
}

fn read_netpbm(path: &Path, magic: &str) -> Result<(usize, usize, Vec<u8>)> {
    let mut input = BufReader::new(fs::File::open(path)?);
    let found = read_token(&mut input)?;
    if found != magic {
        return Err(Error::Format(format!("{}: expected {magic}, found {found}", path.display())));
    }
    let parse = |t: String| t.parse::<usize>().map_err(|e| Error::Format(format!("{}: {e}", path.display())));
    let width = parse(read_token(&mut input)?)?;
    let height = parse(read_token(&mut input)?)?;
    let maxval = parse(read_token(&mut input)?)?;
    if maxval != 255 {
        return Err(Error::Format(format!("{}: only 8-bit maxval supported", path.display())));
    }
    let channels = if magic == "P6" { 3 } else { 1 };
    let mut data = vec![0u8; width * height * channels];
    input.read_exact(&mut data)?;
    Ok((height, width, data))
}

/// Writes an image `(1, 3, H, W)` as binary PPM (P6).
pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let [_, _, h, w] = image.shape;
    let mut out = Vec::with_capacity(h * w * 3 + 20);
    write!(out, "P6\n{w} {h}\n255\n")?;
    for p in 0..h * w {
        for ch in 0..3 {
            out.push((image.data[ch * h * w + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let (h, w, data) = read_netpbm(path, "P6")?;
    let mut image = Tensor::zeros([1, 3, h, w]);
    for p in 0..h * w {
        for ch in 0..3 {
            image.data[ch * h * w + p] = data[p * 3 + ch] as f64 / 255.0;
        }
    }
    Ok(image)
}

/// Writes a label map as binary PGM (P5).
pub fn write_pgm(path: &Path, labels: &LabelMap) -> Result<()> {
    let mut out = Vec::with_capacity(labels.data.len() + 20);
    write!(out, "P5\n{} {}\n255\n", labels.width, labels.height)?;
    out.extend_from_slice(&labels.data);
    fs::write(path, out)?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<LabelMap> {
    let (height, width, data) = read_netpbm(path, "P5")?;
    Ok(LabelMap { height, width, data })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(Error::BadConfig(format!("unknown split {other:?}"))),
        }
    }
}

/// Train and validation samples of one toy dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub num_classes: usize,
    pub train: Vec<SegSample>,
    pub val: Vec<SegSample>,
}

impl Dataset {
    /// Generates `n_train + n_val` scenes from one data seed.
    pub fn generate(seed: u64, n_train: usize, n_val: usize, cfg: &SceneConfig) -> Result<Self> {
        let scene = |i: usize| generate_scene(crate::seed::sub_seed(seed, "sample", i as u64), cfg);
        Ok(Dataset {
            num_classes: cfg.num_classes,
            train: (0..n_train).map(scene).collect::<Result<_>>()?,
            val: (n_train..n_train + n_val).map(scene).collect::<Result<_>>()?,
        })
    }

    pub fn split(&self, split: Split) -> &[SegSample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
        }
    }

    /// Fraction of labelled pixels per class over the training split.
    pub fn class_frequencies(&self) -> Vec<f64> {
        let mut counts = vec![0u64; self.num_classes];
        for s in &self.train {
            for &l in &s.labels.data {
                if (l as usize) < self.num_classes {
                    counts[l as usize] += 1;
                }
            }
        }
        let total = counts.iter().sum::<u64>().max(1) as f64;
        counts.iter().map(|&c| c as f64 / total).collect()
    }

    /// Writes `images/NNNN.ppm`, `labels/NNNN.pgm` and `manifest.tsv`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("images"))?;
        fs::create_dir_all(dir.join("labels"))?;
        let mut manifest = format!("id\tsplit\tclasses={}\n", self.num_classes);
        let all = self.train.iter().map(|s| (s, Split::Train)).chain(self.val.iter().map(|s| (s, Split::Val)));
        for (i, (sample, split)) in all.enumerate() {
            write_ppm(&dir.join(format!("images/{i:04}.ppm")), &sample.image)?;
            write_pgm(&dir.join(format!("labels/{i:04}.pgm")), &sample.labels)?;
            manifest.push_str(&format!("{i:04}\t{}\n", split.as_str()));
        }
        fs::write(dir.join("manifest.tsv"), manifest)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = fs::read_to_string(dir.join("manifest.tsv"))?;
        let mut lines = manifest.lines();
        let header = lines.next().ok_or_else(|| Error::Format("empty manifest".into()))?;
        let num_classes = header
            .split('\t')
            .find_map(|f| f.strip_prefix("classes="))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Format(format!("manifest header lacks classes=: {header:?}")))?;
        let mut ds = Dataset { num_classes, train: Vec::new(), val: Vec::new() };
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let (id, split) =
                line.split_once('\t').ok_or_else(|| Error::Format(format!("bad manifest line {line:?}")))?;
            let sample = SegSample::new(
                read_ppm(&dir.join(format!("images/{id}.ppm")))?,
                read_pgm(&dir.join(format!("labels/{id}.pgm")))?,
            )?;
            match Split::parse(split.trim())? {
                Split::Train => ds.train.push(sample),
                Split::Val => ds.val.push(sample),
            }
        }
        Ok(ds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenes_are_deterministic() {
        let a = generate_toy_scene(5, 64, 64, 5).unwrap();
        let b = generate_toy_scene(5, 64, 64, 5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_toy_scene(6, 64, 64, 5).unwrap());
        assert!(a.image.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn zero_shapes_gives_background() {
        let cfg = SceneConfig { min_shapes: 0, max_shapes: 0, ..SceneConfig::new(32, 32, 2) };
        let s = generate_scene(1, &cfg).unwrap();
        assert!(s.labels.data.iter().all(|&l| l == 0));
    }

    #[test]
    fn bad_scene_config() {
        assert!(matches!(generate_toy_scene(0, 64, 64, 1), Err(Error::BadConfig(_))));
        assert!(matches!(generate_toy_scene(0, 16, 64, 3), Err(Error::BadConfig(_))));
    }

    #[test]
    fn every_class_is_common_across_seeds() {
        let mut seen = [0usize; 5];
        for seed in 0..1000 {
            let s = generate_toy_scene(seed, 32, 32, 5).unwrap();
            for (c, n) in seen.iter_mut().enumerate() {
                if s.labels.data.contains(&(c as u8)) {
                    *n += 1;
                }
            }
        }
        for (c, &n) in seen.iter().enumerate() {
            assert!(n >= 50, "class {c} appears in only {n} / 1000 samples");
        }
    }

    #[test]
    fn augment_examples() {
        let s = generate_toy_scene(3, 48, 40, 4).unwrap();
        let r = augment(&s, 0, Augment::Reflect).unwrap();
        assert_ne!(r, s);
        assert_eq!(augment(&r, 0, Augment::Reflect).unwrap(), s);
        assert_eq!(augment(&s, 0, Augment::Resize { height: 48, width: 40 }).unwrap(), s);

        let c = augment(&s, 17, Augment::RandomCrop { height: 32, width: 24 }).unwrap();
        let mut rng = rng_for(17, "crop", 0);
        let oy = rng.gen_range(0..=16);
        let ox = rng.gen_range(0..=16);
        for y in 0..32 {
            for x in 0..24 {
                assert_eq!(c.labels.get(y, x), s.labels.get(y + oy, x + ox));
                for ch in 0..3 {
                    assert_eq!(c.image.at(0, ch, y, x), s.image.at(0, ch, y + oy, x + ox));
                }
            }
        }
        assert!(matches!(augment(&s, 0, Augment::RandomCrop { height: 64, width: 8 }), Err(Error::BadCrop(_))));
    }

    #[test]
    fn augment_keeps_label_alphabet() {
        let s = generate_toy_scene(8, 64, 64, 5).unwrap();
        let alphabet = |m: &LabelMap| {
            let mut v = m.data.clone();
            v.sort_unstable();
            v.dedup();
            v
        };
        for mode in [
            Augment::Reflect,
            Augment::Resize { height: 80, width: 50 },
            Augment::Resize { height: 33, width: 35 },
            Augment::RandomCrop { height: 40, width: 40 },
        ] {
            let a = augment(&s, 4, mode).unwrap();
            assert!(alphabet(&a.labels).iter().all(|l| alphabet(&s.labels).contains(l)));
        }
    }

    fn map(h: usize, w: usize, v: Vec<u8>) -> LabelMap {
        LabelMap { height: h, width: w, data: v }
    }

    #[test]
    fn confusion_examples() {
        let truth = map(2, 2, vec![0, 1, 1, 2]);
        let mut cm = ConfusionMatrix::new(3);
        accumulate_confusion(&truth, &truth, &mut cm).unwrap();
        assert_eq!(cm.get(0, 0) + cm.get(1, 1) + cm.get(2, 2), 4);
        assert_eq!(cm.total(), 4);

        let mut cm2 = cm.clone();
        accumulate_confusion(&truth, &map(2, 2, vec![IGNORE_LABEL; 4]), &mut cm2).unwrap();
        assert_eq!(cm2, cm);

        // Hand count on a 3x3 map.
        let truth = map(3, 3, vec![0, 0, 1, 1, 1, 2, 2, 2, 2]);
        let pred = map(3, 3, vec![0, 1, 1, 1, 2, 2, 2, 0, 2]);
        let mut cm = ConfusionMatrix::new(3);
        accumulate_confusion(&pred, &truth, &mut cm).unwrap();
        let expect = [[1, 1, 0], [0, 2, 1], [1, 0, 3]];
        for (t, row) in expect.iter().enumerate() {
            for (p, &v) in row.iter().enumerate() {
                assert_eq!(cm.get(t, p), v, "cell {t},{p}");
            }
        }
        assert!(accumulate_confusion(&pred, &map(1, 9, truth.data.clone()), &mut cm).is_err());
    }

    #[test]
    fn mean_iou_examples() {
        let cm = ConfusionMatrix::from_counts(2, vec![2, 2, 0, 4]).unwrap();
        assert!((mean_iou(&cm).unwrap() - 7.0 / 12.0).abs() < 1e-15);

        let perfect = ConfusionMatrix::from_counts(3, vec![5, 0, 0, 0, 2, 0, 0, 0, 9]).unwrap();
        assert_eq!(mean_iou(&perfect).unwrap(), 1.0);

        let absent = ConfusionMatrix::from_counts(3, vec![3, 1, 0, 1, 3, 0, 0, 0, 0]).unwrap();
        assert_eq!(absent.class_iou()[2], None);
        assert!((mean_iou(&absent).unwrap() - 0.6).abs() < 1e-15);

        assert!(matches!(mean_iou(&ConfusionMatrix::new(4)), Err(Error::EmptyMatrix)));
    }

    #[test]
    fn mean_iou_is_permutation_equivariant_and_additive() {
        let mut rng = rng_for(2, "cm", 0);
        let c = 4;
        let truth = map(8, 8, (0..64).map(|_| rng.gen_range(0..c as u8)).collect());
        let pred = map(8, 8, (0..64).map(|_| rng.gen_range(0..c as u8)).collect());
        let mut whole = ConfusionMatrix::new(c);
        accumulate_confusion(&pred, &truth, &mut whole).unwrap();

        let mut halves = ConfusionMatrix::new(c);
        for rows in [0..4usize, 4..8] {
            let cut = |m: &LabelMap| map(4, 8, m.data[rows.start * 8..rows.end * 8].to_vec());
            accumulate_confusion(&cut(&pred), &cut(&truth), &mut halves).unwrap();
        }
        assert_eq!(halves, whole);

        let perm = [2u8, 0, 3, 1];
        let relabel = |m: &LabelMap| map(8, 8, m.data.iter().map(|&l| perm[l as usize]).collect());
        let mut permuted = ConfusionMatrix::new(c);
        accumulate_confusion(&relabel(&pred), &relabel(&truth), &mut permuted).unwrap();
        assert!((mean_iou(&permuted).unwrap() - mean_iou(&whole).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn dataset_roundtrips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset::generate(1, 3, 2, &SceneConfig::new(32, 40, 3)).unwrap();
        ds.save(dir.path()).unwrap();
        assert_eq!(Dataset::load(dir.path()).unwrap(), ds);
        let manifest = fs::read_to_string(dir.path().join("manifest.tsv")).unwrap();
        assert!(manifest.contains("0003\tval"));
    }

    #[test]
    fn label_downsample_takes_cell_centres() {
        let m = map(4, 4, (0..16).collect());
        assert_eq!(m.downsample(2).data, vec![5, 7, 13, 15]);
        assert_eq!(m.downsample(1), m);
    }
}
