//! In-memory image datasets: synthetic shapes, IDX digits and CIFAR-10 binary batches.

use karat_core::{KaratError, Result, Tensor};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::path::Path;

/// Images stored `H×W×C` with values roughly in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(images: Vec<Tensor>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(KaratError::dim(format!("{} images but {} labels", images.len(), labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(KaratError::config(format!("label {bad} outside {classes} classes")));
        }
        if let Some(first) = images.first() {
            if images.iter().any(|im| im.shape() != first.shape()) {
                return Err(KaratError::dim("images differ in shape"));
            }
        }
        Ok(Self { images, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// `(H, W, C)` of the stored images.
    pub fn image_shape(&self) -> Option<(usize, usize, usize)> {
        self.images.first().map(|im| (im.shape()[0], im.shape()[1], im.shape()[2]))
    }

    /// First `n` samples.
    pub fn take(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self { images: self.images[..n].to_vec(), labels: self.labels[..n].to_vec(), classes: self.classes }
    }
}

/// Shapes placed in one of `classes` vertical strips; the label is the strip index.
///
/// Every image is `size×size×1`. Nearly all foreground mass sits inside the
/// labelled strip, so per-strip pixel sums separate the classes linearly.
pub fn synthetic_shapes(n: usize, classes: usize, size: usize, seed: u64) -> Result<Dataset> {
    if classes == 0 || size / classes < 3 {
        return Err(KaratError::config(format!("cannot fit {classes} strips into width {size}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.05).expect("valid std");
    let strip = size / classes;
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % classes;
        let mut img = Tensor::zeros(&[size, size, 1]);
        for v in img.data_mut() {
            *v = noise.sample(&mut rng);
        }
        let radius = rng.gen_range(1..=((strip - 1) / 2).min(size / 4).max(1));
        let x0 = label * strip;
        let cx = rng.gen_range(x0 + radius..=x0 + strip - 1 - radius);
        let cy = rng.gen_range(radius..size - radius);
        let intensity = rng.gen_range(0.6..1.0);
        let kind = rng.gen_range(0..3);
        for y in 0..size {
            for x in x0..x0 + strip {
                let (dx, dy) = (x as i64 - cx as i64, y as i64 - cy as i64);
                let r = radius as i64;
                let inside = match kind {
                    0 => dx.abs() <= r && dy.abs() <= r,
                    1 => (dx.abs() <= r && dy == 0) || (dy.abs() <= r && dx == 0),
                    _ => dx * dx + dy * dy <= r * r,
                };
                if inside {
                    img.data_mut()[y * size + x] += intensity;
                }
            }
        }
        images.push(img);
        labels.push(label);
    }
    Dataset::new(images, labels, classes)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| KaratError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| KaratError::format(offset as u64, "truncated IDX header"))
}

/// Parses an unsigned-byte IDX file into its dimensions and payload.
pub fn parse_idx(bytes: &[u8]) -> Result<(Vec<usize>, &[u8])> {
    if bytes.len() < 4 {
        return Err(KaratError::format(0, "truncated IDX magic"));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(KaratError::format(0, "IDX magic must start with two zero bytes"));
    }
    if bytes[2] != 0x08 {
        return Err(KaratError::format(2, format!("unsupported IDX element type 0x{:02x}", bytes[2])));
    }
    let ndim = bytes[3] as usize;
    let mut dims = Vec::with_capacity(ndim);
    for k in 0..ndim {
        dims.push(be_u32(bytes, 4 + 4 * k)? as usize);
    }
    let start = 4 + 4 * ndim;
    let need: usize = dims.iter().product();
    let have = bytes.len() - start;
    if have < need {
        return Err(KaratError::format(bytes.len() as u64, format!("IDX payload holds {have} bytes, header promises {need}")));
    }
    if have > need {
        return Err(KaratError::format((start + need) as u64, "trailing bytes after IDX payload"));
    }
    Ok((dims, &bytes[start..]))
}

/// Grayscale digits: an `n×H×W` image file and an `n` label file.
pub fn load_idx(images: &Path, labels: &Path, classes: usize) -> Result<Dataset> {
    let ib = read_file(images)?;
    let lb = read_file(labels)?;
    let (idims, ipix) = parse_idx(&ib)?;
    let (ldims, lraw) = parse_idx(&lb)?;
    if idims.len() != 3 {
        return Err(KaratError::format(3, format!("image file has {} dimensions, expected 3", idims.len())));
    }
    if ldims.len() != 1 {
        return Err(KaratError::format(3, format!("label file has {} dimensions, expected 1", ldims.len())));
    }
    if idims[0] != ldims[0] {
        return Err(KaratError::format(4, format!("{} images but {} labels", idims[0], ldims[0])));
    }
    let (h, w) = (idims[1], idims[2]);
    let header = 4 + 4 * ldims.len();
    let mut out_labels = Vec::with_capacity(ldims[0]);
    for (i, &l) in lraw.iter().enumerate() {
        if l as usize >= classes {
            return Err(KaratError::format((header + i) as u64, format!("label {l} outside {classes} classes")));
        }
        out_labels.push(l as usize);
    }
    let images = ipix
        .chunks_exact(h * w)
        .map(|c| Tensor::new(vec![h, w, 1], c.iter().map(|&b| b as f64 / 255.0).collect()).expect("chunk size"))
        .collect();
    Dataset::new(images, out_labels, classes)
}

pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Decodes CIFAR-10 binary batch bytes (label byte then planar R, G, B).
pub fn parse_cifar10(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() % CIFAR_RECORD != 0 {
        let whole = bytes.len() - bytes.len() % CIFAR_RECORD;
        return Err(KaratError::format(whole as u64, "truncated CIFAR-10 record"));
    }
    let mut images = Vec::with_capacity(bytes.len() / CIFAR_RECORD);
    let mut labels = Vec::with_capacity(images.capacity());
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(KaratError::format((r * CIFAR_RECORD) as u64, format!("label {} outside 10 classes", rec[0])));
        }
        labels.push(rec[0] as usize);
        let mut data = vec![0.0; 3 * 1024];
        for c in 0..3 {
            for p in 0..1024 {
                data[p * 3 + c] = rec[1 + c * 1024 + p] as f64 / 255.0;
            }
        }
        images.push(Tensor::new(vec![32, 32, 3], data).expect("fixed size"));
    }
    Dataset::new(images, labels, 10)
}

pub fn load_cifar10(paths: &[impl AsRef<Path>]) -> Result<Dataset> {
    let mut all = Dataset { images: Vec::new(), labels: Vec::new(), classes: 10 };
    for p in paths {
        let d = parse_cifar10(&read_file(p.as_ref())?).map_err(|e| match e {
            KaratError::Format { offset, message } => {
                KaratError::format(offset, format!("{}: {message}", p.as_ref().display()))
            }
            other => other,
        })?;
        all.images.extend(d.images);
        all.labels.extend(d.labels);
    }
    Ok(all)
}

/// Training-time augmentation: random horizontal flip and zero-padded random crop.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Augment {
    pub flip: bool,
    pub crop_pad: usize,
}

impl Augment {
    pub fn is_identity(&self) -> bool {
        !self.flip && self.crop_pad == 0
    }

    pub fn apply<R: Rng + ?Sized>(&self, img: &Tensor, rng: &mut R) -> Tensor {
        if self.is_identity() {
            return img.clone();
        }
        let (h, w, c) = (img.shape()[0], img.shape()[1], img.shape()[2]);
        let flip = self.flip && rng.gen_bool(0.5);
        let pad = self.crop_pad as i64;
        let (oy, ox) = if pad > 0 { (rng.gen_range(-pad..=pad), rng.gen_range(-pad..=pad)) } else { (0, 0) };
        let mut out = Tensor::zeros(img.shape());
        let src = img.data();
        let dst = out.data_mut();
        for y in 0..h {
            for x in 0..w {
                let sy = y as i64 + oy;
                let sx0 = x as i64 + ox;
                if sy < 0 || sy >= h as i64 || sx0 < 0 || sx0 >= w as i64 {
                    continue;
                }
                let sx = if flip { w as i64 - 1 - sx0 } else { sx0 };
                let s = (sy as usize * w + sx as usize) * c;
                let d = (y * w + x) * c;
                dst[d..d + c].copy_from_slice(&src[s..s + c]);
            }
        }
        out
    }
}
