//! Dataset loading, one-class filtering, preprocessing and a synthetic shapes set.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DgadError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DatasetName {
    MnistLike,
    CifarLike,
    Folder,
    #[default]
    SyntheticShapes,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    #[default]
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Rectangle,
    Ellipse,
}

impl Shape {
    pub fn class_id(self) -> u32 {
        match self {
            Shape::Rectangle => 0,
            Shape::Ellipse => 1,
        }
    }

    pub fn from_class(class: u32) -> Result<Shape> {
        match class {
            0 => Ok(Shape::Rectangle),
            1 => Ok(Shape::Ellipse),
            c => Err(DgadError::Dataset(format!(
                "synthetic shapes have classes 0 and 1, got {c}"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub name: DatasetName,
    pub root: PathBuf,
    pub image_size: usize,
    /// Output channels; `None` keeps the native channel count.
    pub channels: Option<usize>,
    pub normal_class: u32,
    /// FOLDER only: selects the normal class by directory name, overriding `normal_class`.
    pub normal_class_name: Option<String>,
    pub split: Split,
    /// Synthetic shapes: images per class and split.
    pub synthetic_count: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            name: DatasetName::SyntheticShapes,
            root: PathBuf::new(),
            image_size: 32,
            channels: None,
            normal_class: 0,
            normal_class_name: None,
            split: Split::Train,
            synthetic_count: 2000,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `(C, H, W)` with values in `[-1, 1]`.
    pub image: Tensor<f32>,
    pub class: u32,
    pub sample_id: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub class_names: Vec<String>,
    /// Normal class index in the numbering of `class_names`.
    pub normal_class: u32,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// 0 for normal samples, 1 for anomalies.
    pub fn anomaly_labels(&self) -> Vec<u8> {
        self.samples
            .iter()
            .map(|s| u8::from(s.class != self.normal_class))
            .collect()
    }

    pub fn images(&self) -> Result<Tensor<f32>> {
        stack_images(&self.samples)
    }
}

/// Stack sample images into an `(N, C, H, W)` batch.
pub fn stack_images(samples: &[Sample]) -> Result<Tensor<f32>> {
    if samples.is_empty() {
        return Err(DgadError::Dataset("no samples to stack".into()));
    }
    let imgs: Vec<Tensor<f32>> = samples.iter().map(|s| s.image.clone()).collect();
    Tensor::stack(&imgs)
}

/// Decoded 8-bit image, interleaved `H x W x C`.
#[derive(Clone, Debug, PartialEq)]
pub struct RawImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl RawImage {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(DgadError::InvalidArgument("image has a zero dimension".into()));
        }
        if channels != 1 && channels != 3 {
            return Err(DgadError::InvalidArgument(format!(
                "unsupported channel count {channels}"
            )));
        }
        if pixels.len() != width * height * channels {
            return Err(DgadError::InvalidArgument(format!(
                "{} pixel bytes for a {width}x{height}x{channels} image",
                pixels.len()
            )));
        }
        Ok(RawImage {
            width,
            height,
            channels,
            pixels,
        })
    }

    /// Planar `(C, H, W)` values in `[0, 1]` converted to `channels` channels.
    fn planar(&self, channels: usize) -> Vec<Vec<f32>> {
        let (hw, c) = (self.width * self.height, self.channels);
        let plane = |k: usize| -> Vec<f32> { (0..hw).map(|i| self.pixels[i * c + k] as f32 / 255.0).collect() };
        match (c, channels) {
            (1, 1) | (3, 3) => (0..c).map(plane).collect(),
            (1, 3) => {
                let p = plane(0);
                vec![p.clone(), p.clone(), p]
            }
            _ => {
                let (r, g, b) = (plane(0), plane(1), plane(2));
                vec![(0..hw).map(|i| 0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i]).collect()]
            }
        }
    }
}

/// Bilinear sample of `plane` (h x w) at continuous pixel-center coordinates, clamped at borders.
fn bilinear(plane: &[f32], h: usize, w: usize, y: f64, x: f64) -> f32 {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = ((y - y0 as f64) as f32, (x - x0 as f64) as f32);
    let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
    let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
    top * (1.0 - fy) + bot * fy
}

/// Center-crop by `1/zoom` and resize every plane to `size x size`.
fn resample(planes: &[Vec<f32>], h: usize, w: usize, size: usize, zoom: f64) -> Vec<f32> {
    let (ch, cw) = (h as f64 / zoom, w as f64 / zoom);
    let (oy, ox) = ((h as f64 - ch) / 2.0, (w as f64 - cw) / 2.0);
    let mut out = Vec::with_capacity(planes.len() * size * size);
    for p in planes {
        for i in 0..size {
            let y = oy + (i as f64 + 0.5) * ch / size as f64 - 0.5;
            for j in 0..size {
                let x = ox + (j as f64 + 0.5) * cw / size as f64 - 0.5;
                out.push(bilinear(p, h, w, y, x));
            }
        }
    }
    out
}

/// Resize to `target_size` (bilinear) and map `[0, 255]` onto `[-1, 1]`. With `augment`,
/// a random zoom in `[1.0, 1.2]` with center crop is applied before resizing.
pub fn preprocess(
    image: &RawImage,
    target_size: usize,
    channels: usize,
    augment: Option<&mut dyn RngCore>,
) -> Result<Tensor<f32>> {
    if image.width == 0 || image.height == 0 || target_size == 0 {
        return Err(DgadError::InvalidArgument("zero-dimension image".into()));
    }
    if channels != 1 && channels != 3 {
        return Err(DgadError::InvalidArgument(format!(
            "unsupported channel count {channels}"
        )));
    }
    let zoom = match augment {
        Some(rng) => rng.gen_range(1.0..=1.2),
        None => 1.0,
    };
    let planes = image.planar(channels);
    let data = resample(&planes, image.height, image.width, target_size, zoom)
        .into_iter()
        .map(|v| (2.0 * v - 1.0).clamp(-1.0, 1.0))
        .collect();
    Tensor::new(&[channels, target_size, target_size], data)
}

/// Zoom a preprocessed `(C, H, W)` image by `scale` about its center, keeping its size.
pub fn random_zoom(image: &Tensor<f32>, scale: f64) -> Result<Tensor<f32>> {
    let [c, h, w]: [usize; 3] = image
        .shape()
        .try_into()
        .map_err(|_| DgadError::Shape(format!("expected (C, H, W), got {:?}", image.shape())))?;
    if h != w || h == 0 {
        return Err(DgadError::Shape(format!("expected a square image, got {h}x{w}")));
    }
    if !(scale >= 1.0 && scale.is_finite()) {
        return Err(DgadError::InvalidArgument(format!(
            "zoom scale must be >= 1, got {scale}"
        )));
    }
    let planes: Vec<Vec<f32>> = image.data().chunks(h * w).map(|p| p.to_vec()).collect();
    Tensor::new(&[c, h, w], resample(&planes, h, w, h, scale))
}

pub fn load_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    if spec.image_size == 0 {
        return Err(DgadError::Config("image_size must be positive".into()));
    }
    match spec.name {
        DatasetName::SyntheticShapes => load_synthetic(spec),
        DatasetName::MnistLike => load_mnist(spec),
        DatasetName::CifarLike => load_cifar(spec),
        DatasetName::Folder => load_folder(spec),
    }
}

fn one_class(spec: &DatasetSpec, class_names: Vec<String>, samples: Vec<Sample>, normal: u32) -> Result<Dataset> {
    if normal as usize >= class_names.len() {
        return Err(DgadError::Dataset(format!(
            "unknown class {normal}; the dataset has {} classes",
            class_names.len()
        )));
    }
    let samples: Vec<Sample> = match spec.split {
        Split::Train => samples.into_iter().filter(|s| s.class == normal).collect(),
        Split::Test => samples,
    };
    if samples.is_empty() {
        return Err(DgadError::Dataset(format!(
            "no {:?} samples for class {normal} under {}",
            spec.split,
            spec.root.display()
        )));
    }
    Ok(Dataset {
        samples,
        class_names,
        normal_class: normal,
    })
}

fn split_tag(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Test => "test",
    }
}

fn load_synthetic(spec: &DatasetSpec) -> Result<Dataset> {
    let normal = Shape::from_class(spec.normal_class)?;
    let n = spec.synthetic_count.max(1);
    let size = spec.image_size;
    let split_seed = match spec.split {
        Split::Train => spec.seed,
        Split::Test => spec.seed ^ 0xA5A5_A5A5_0000_0001,
    };
    let mut samples = match spec.split {
        Split::Train => synthetic_shapes(n, size, normal, split_seed),
        Split::Test => {
            let mut s = synthetic_shapes(n, size, Shape::Rectangle, split_seed);
            s.extend(synthetic_shapes(n, size, Shape::Ellipse, split_seed ^ 0xE11));
            s
        }
    };
    let tag = split_tag(spec.split);
    for s in &mut samples {
        s.sample_id = format!("{tag}/{}", s.sample_id);
        if let Some(c) = spec.channels {
            s.image = convert_channels(&s.image, c)?;
        }
    }
    one_class(
        spec,
        vec!["rectangle".into(), "ellipse".into()],
        samples,
        spec.normal_class,
    )
}

fn convert_channels(image: &Tensor<f32>, channels: usize) -> Result<Tensor<f32>> {
    let c = image.shape()[0];
    match (c, channels) {
        (a, b) if a == b => Ok(image.clone()),
        (1, 3) => Tensor::stack(&[image.clone(), image.clone(), image.clone()])
            .and_then(|t| t.reshape(&[3, image.shape()[1], image.shape()[2]])),
        _ => Err(DgadError::Config(format!("cannot convert {c} channels to {channels}"))),
    }
}

/// Range of the per-image mean intensity (in `[-1, 1]` units) the shape renderer targets.
pub const SYNTHETIC_MEAN_BAND: (f64, f64) = (-0.97, -0.4);

/// Filled, shaded, anisotropic shapes on dark backgrounds.
///
/// Every shape is lit from its own top side and is about twice as wide as tall.
/// Rectangles have a canonical pose: horizontal and centred in the upper-left part of
/// the frame, so rotations and quadrant swaps of them are recognisable. Ellipses are
/// rotated by a uniform random angle and placed anywhere in the frame.
pub fn synthetic_shapes(n: usize, image_size: usize, class: Shape, seed: u64) -> Vec<Sample> {
    const SUPER: usize = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = image_size as f64;
    let tag = match class {
        Shape::Rectangle => "rect",
        Shape::Ellipse => "ellipse",
    };
    (0..n)
        .map(|i| {
            let bg: f64 = rng.gen_range(0.0..0.08);
            let gray: f64 = rng.gen_range(0.55..0.95);
            let half_w = rng.gen_range(0.20..0.30) * s;
            let half_h = rng.gen_range(0.09..0.14) * s;
            let (mut cx, mut cy) = (rng.gen_range(0.30..0.45) * s, rng.gen_range(0.28..0.40) * s);
            let mut angle = 0.0;
            if class == Shape::Ellipse {
                angle = rng.gen_range(0.0..std::f64::consts::TAU);
                cx = rng.gen_range(half_h..s - half_h);
                cy = rng.gen_range(half_h..s - half_h);
            }
            let (sin, cos) = f64::sin_cos(angle);
            let mut data = Vec::with_capacity(image_size * image_size);
            for y in 0..image_size {
                for x in 0..image_size {
                    let mut acc = 0.0;
                    for sy in 0..SUPER {
                        for sx in 0..SUPER {
                            let py = y as f64 + (sy as f64 + 0.5) / SUPER as f64 - cy;
                            let px = x as f64 + (sx as f64 + 0.5) / SUPER as f64 - cx;
                            let u = (px * cos + py * sin) / half_w;
                            let v = (py * cos - px * sin) / half_h;
                            let inside = match class {
                                Shape::Rectangle => u.abs() <= 1.0 && v.abs() <= 1.0,
                                Shape::Ellipse => u * u + v * v <= 1.0,
                            };
                            acc += if inside {
                                gray * (1.0 - 0.3 * (v + 1.0) / 2.0)
                            } else {
                                bg
                            };
                        }
                    }
                    let val = acc / (SUPER * SUPER) as f64;
                    data.push((2.0 * val.clamp(0.0, 1.0) - 1.0) as f32);
                }
            }
            Sample {
                image: Tensor::new(&[1, image_size, image_size], data).expect("sized buffer"),
                class: class.class_id(),
                sample_id: format!("{tag}-{i:06}"),
            }
        })
        .collect()
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    if !path.is_file() {
        return Err(DgadError::Dataset(format!("missing file {}", path.display())));
    }
    fs::read(path).map_err(|e| DgadError::io(path, e))
}

fn first_existing(root: &Path, names: &[&str]) -> PathBuf {
    names
        .iter()
        .map(|n| root.join(n))
        .find(|p| p.is_file())
        .unwrap_or_else(|| root.join(names[0]))
}

fn be_u32(b: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(b[at..at + 4].try_into().unwrap())
}

/// Parse an IDX file with unsigned-byte payload; returns dims and data.
fn parse_idx(bytes: &[u8], path: &Path) -> Result<(Vec<usize>, Vec<u8>)> {
    let bad = |why: &str| DgadError::Dataset(format!("{}: {why}", path.display()));
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 || bytes[2] != 0x08 {
        return Err(bad("not an unsigned-byte IDX file"));
    }
    let rank = bytes[3] as usize;
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(bad("truncated header"));
    }
    let dims: Vec<usize> = (0..rank).map(|i| be_u32(bytes, 4 + 4 * i) as usize).collect();
    let count: usize = dims.iter().product();
    if bytes.len() != header + count {
        return Err(bad("payload size does not match header"));
    }
    Ok((dims, bytes[header..].to_vec()))
}

fn load_mnist(spec: &DatasetSpec) -> Result<Dataset> {
    let prefix = match spec.split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let img_path = first_existing(
        &spec.root,
        &[
            &format!("{prefix}-images-idx3-ubyte"),
            &format!("{prefix}-images.idx3-ubyte"),
        ],
    );
    let lbl_path = first_existing(
        &spec.root,
        &[
            &format!("{prefix}-labels-idx1-ubyte"),
            &format!("{prefix}-labels.idx1-ubyte"),
        ],
    );
    let (idims, pixels) = parse_idx(&read_file(&img_path)?, &img_path)?;
    let (ldims, labels) = parse_idx(&read_file(&lbl_path)?, &lbl_path)?;
    if idims.len() != 3 || ldims.len() != 1 || idims[0] != ldims[0] {
        return Err(DgadError::Dataset(format!(
            "inconsistent MNIST files {} and {}",
            img_path.display(),
            lbl_path.display()
        )));
    }
    let (n, h, w) = (idims[0], idims[1], idims[2]);
    let channels = spec.channels.unwrap_or(1);
    let tag = split_tag(spec.split);
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let class = labels[i] as u32;
        if spec.split == Split::Train && class != spec.normal_class {
            continue;
        }
        let raw = RawImage::new(w, h, 1, pixels[i * h * w..(i + 1) * h * w].to_vec())?;
        samples.push(Sample {
            image: preprocess(&raw, spec.image_size, channels, None)?,
            class,
            sample_id: format!("{tag}/{i:06}"),
        });
    }
    one_class(
        spec,
        (0..10).map(|d| d.to_string()).collect(),
        samples,
        spec.normal_class,
    )
}

pub const CIFAR10_CLASSES: [&str; 10] = [
    "airplane",
    "automobile",
    "bird",
    "cat",
    "deer",
    "dog",
    "frog",
    "horse",
    "ship",
    "truck",
];

fn load_cifar(spec: &DatasetSpec) -> Result<Dataset> {
    let root = if spec.root.join("cifar-10-batches-bin").is_dir() {
        spec.root.join("cifar-10-batches-bin")
    } else {
        spec.root.clone()
    };
    let files: Vec<String> = match spec.split {
        Split::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
        Split::Test => vec!["test_batch.bin".into()],
    };
    const RECORD: usize = 1 + 3 * 32 * 32;
    let channels = spec.channels.unwrap_or(3);
    let tag = split_tag(spec.split);
    let mut samples = Vec::new();
    let mut index = 0usize;
    for f in files {
        let path = root.join(&f);
        let bytes = read_file(&path)?;
        if bytes.len() % RECORD != 0 {
            return Err(DgadError::Dataset(format!("{}: truncated CIFAR batch", path.display())));
        }
        for rec in bytes.chunks_exact(RECORD) {
            let class = rec[0] as u32;
            if class >= 10 {
                return Err(DgadError::Dataset(format!(
                    "{}: label {class} out of range",
                    path.display()
                )));
            }
            let id = index;
            index += 1;
            if spec.split == Split::Train && class != spec.normal_class {
                continue;
            }
            // planar RGB on disk; RawImage is interleaved
            let plane = &rec[1..];
            let pixels = (0..1024)
                .flat_map(|p| [plane[p], plane[1024 + p], plane[2048 + p]])
                .collect();
            let raw = RawImage::new(32, 32, 3, pixels)?;
            samples.push(Sample {
                image: preprocess(&raw, spec.image_size, channels, None)?,
                class,
                sample_id: format!("{tag}/{id:06}"),
            });
        }
    }
    one_class(
        spec,
        CIFAR10_CLASSES.iter().map(|s| s.to_string()).collect(),
        samples,
        spec.normal_class,
    )
}

const IMAGE_EXTENSIONS: [&str; 6] = ["png", "bmp", "jpg", "jpeg", "tif", "tiff"];

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| DgadError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    v.sort();
    Ok(v)
}

/// `root/<class>/<images>`; when `root/train` and `root/test` exist they hold the two splits.
fn load_folder(spec: &DatasetSpec) -> Result<Dataset> {
    let split_dir = spec.root.join(split_tag(spec.split));
    let dir = if spec.root.join("train").is_dir() && spec.root.join("test").is_dir() {
        split_dir
    } else {
        spec.root.clone()
    };
    if !dir.is_dir() {
        return Err(DgadError::Dataset(format!("missing directory {}", dir.display())));
    }
    let class_dirs: Vec<PathBuf> = sorted_entries(&dir)?.into_iter().filter(|p| p.is_dir()).collect();
    let class_names: Vec<String> = class_dirs
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    let normal = match &spec.normal_class_name {
        Some(name) => class_names
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| DgadError::Dataset(format!("unknown class `{name}` in {}", dir.display())))?
            as u32,
        None => spec.normal_class,
    };
    let channels = spec.channels.unwrap_or(3);
    let mut samples = Vec::new();
    for (class, cdir) in class_dirs.iter().enumerate() {
        if spec.split == Split::Train && class as u32 != normal {
            continue;
        }
        for path in sorted_entries(cdir)? {
            let ext = path
                .extension()
                .map(|e| e.to_string_lossy().to_ascii_lowercase())
                .unwrap_or_default();
            if !path.is_file() || !IMAGE_EXTENSIONS.contains(&ext.as_str()) {
                continue;
            }
            let img = image::open(&path).map_err(|e| DgadError::Image {
                path: path.clone(),
                source: e,
            })?;
            let raw = if channels == 1 {
                let g = img.to_luma8();
                RawImage::new(g.width() as usize, g.height() as usize, 1, g.into_raw())?
            } else {
                let c = img.to_rgb8();
                RawImage::new(c.width() as usize, c.height() as usize, 3, c.into_raw())?
            };
            samples.push(Sample {
                image: preprocess(&raw, spec.image_size, channels, None)?,
                class: class as u32,
                sample_id: format!("{}/{}", class_names[class], path.file_name().unwrap().to_string_lossy()),
            });
        }
    }
    one_class(spec, class_names, samples, normal)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preprocess_shape_and_endpoints() {
        let mut px = vec![0u8; 28 * 28];
        px[0] = 255;
        let raw = RawImage::new(28, 28, 1, px).unwrap();
        let t = preprocess(&raw, 32, 1, None).unwrap();
        assert_eq!(t.shape(), &[1, 32, 32]);
        assert!(t.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(t, preprocess(&raw, 32, 1, None).unwrap());
        let same = preprocess(&raw, 28, 1, None).unwrap();
        assert_eq!(same.data()[0], 1.0);
        assert_eq!(same.data()[1], -1.0);
    }

    #[test]
    fn preprocess_rejects_empty() {
        let raw = RawImage {
            width: 0,
            height: 4,
            channels: 1,
            pixels: vec![],
        };
        assert!(preprocess(&raw, 32, 1, None).is_err());
        assert!(RawImage::new(0, 4, 1, vec![]).is_err());
    }

    #[test]
    fn augmented_preprocess_stays_in_range() {
        let px: Vec<u8> = (0..64 * 48 * 3).map(|i| (i * 7 % 256) as u8).collect();
        let raw = RawImage::new(64, 48, 3, px).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = preprocess(&raw, 16, 3, Some(&mut rng)).unwrap();
        assert_eq!(t.shape(), &[3, 16, 16]);
        assert!(t.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn zoom_of_one_is_identity() {
        let img = Tensor::from_fn(&[2, 8, 8], |i| (i as f32 / 64.0) - 1.0);
        let z = random_zoom(&img, 1.0).unwrap();
        for (a, b) in z.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!(random_zoom(&img, 0.5).is_err());
    }

    #[test]
    fn synthetic_is_deterministic() {
        assert_eq!(
            synthetic_shapes(5, 16, Shape::Rectangle, 3),
            synthetic_shapes(5, 16, Shape::Rectangle, 3)
        );
        assert_ne!(
            synthetic_shapes(5, 16, Shape::Rectangle, 3),
            synthetic_shapes(5, 16, Shape::Rectangle, 4)
        );
    }

    #[test]
    fn synthetic_train_and_test_splits() {
        let spec = DatasetSpec {
            synthetic_count: 10,
            ..Default::default()
        };
        let train = load_dataset(&spec).unwrap();
        assert_eq!(train.len(), 10);
        assert!(train.samples.iter().all(|s| s.class == 0));
        let test = load_dataset(&DatasetSpec {
            split: Split::Test,
            ..spec.clone()
        })
        .unwrap();
        assert_eq!(test.len(), 20);
        assert_eq!(test.anomaly_labels().iter().filter(|&&l| l == 1).count(), 10);
        assert_ne!(train.samples[0].image, test.samples[0].image);
        assert!(load_dataset(&DatasetSpec {
            normal_class: 7,
            ..spec
        })
        .is_err());
    }

    #[test]
    fn missing_files_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        for name in [DatasetName::MnistLike, DatasetName::CifarLike, DatasetName::Folder] {
            let err = load_dataset(&DatasetSpec {
                name,
                root: dir.path().join("nowhere"),
                ..Default::default()
            })
            .unwrap_err();
            assert!(err.to_string().contains("missing"), "{err}");
        }
    }
}
