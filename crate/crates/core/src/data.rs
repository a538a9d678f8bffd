//! Labeled image datasets: class-per-folder loading, stratified splitting
//! and a synthetic generator.
//!
//! Images are `[H, W, C]` tensors scaled to `[0, 1]`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub samples: Vec<Sample>,
    pub class_names: Vec<String>,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }
}

/// 8-bit interleaved RGB pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

/// Decodes a binary PPM (`P6`, maxval 255). Comments (`#` to end of line)
/// are allowed in the header; exactly one whitespace byte separates the
/// header from the raster.
pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage> {
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Decode("truncated PPM header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token()?;
    if magic != "P6" {
        return Err(Error::Decode(format!("expected PPM magic P6, found {magic:?}")));
    }
    let mut num = |what: &str| -> Result<usize> {
        let t = token()?;
        t.parse()
            .map_err(|_| Error::Decode(format!("bad PPM {what} {t:?}")))
    };
    let width = num("width")?;
    let height = num("height")?;
    let maxval = num("maxval")?;
    if maxval != 255 {
        return Err(Error::Decode(format!("unsupported PPM maxval {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(Error::Decode("PPM has zero extent".into()));
    }
    // single whitespace byte after maxval
    let start = pos + 1;
    let len = width * height * 3;
    if bytes.len() < start + len {
        return Err(Error::Decode(format!(
            "PPM raster truncated: need {len} bytes, have {}",
            bytes.len().saturating_sub(start)
        )));
    }
    Ok(RgbImage {
        width,
        height,
        pixels: bytes[start..start + len].to_vec(),
    })
}

/// Encodes RGB pixels as a binary PPM.
pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

/// Decodes an 8-bit PNG, converting grayscale and alpha variants to RGB.
pub fn decode_png(bytes: &[u8]) -> Result<RgbImage> {
    let mut decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Decode(format!("png: {e}")))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Decode("png: image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Decode(format!("png: {e}")))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let raw = &buf[..info.buffer_size()];
    let pixels = match info.color_type {
        png::ColorType::Rgb => raw.to_vec(),
        png::ColorType::Rgba => raw.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        png::ColorType::Grayscale => raw.iter().flat_map(|&g| [g, g, g]).collect(),
        png::ColorType::GrayscaleAlpha => raw.chunks_exact(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
        png::ColorType::Indexed => {
            return Err(Error::Decode("png: palette was not expanded".into()));
        }
    };
    Ok(RgbImage {
        width: w,
        height: h,
        pixels,
    })
}

/// Nearest-neighbor resize to `size × size`, scaled to `[0, 1]`, with one
/// channel (mean of RGB) or three.
pub fn to_tensor(img: &RgbImage, size: usize, channels: usize) -> Result<Tensor> {
    if channels != 1 && channels != 3 {
        return Err(Error::Config(format!("channels must be 1 or 3, got {channels}")));
    }
    let mut data = Vec::with_capacity(size * size * channels);
    for y in 0..size {
        let sy = y * img.height / size;
        for x in 0..size {
            let sx = x * img.width / size;
            let p = &img.pixels[(sy * img.width + sx) * 3..][..3];
            if channels == 3 {
                data.extend(p.iter().map(|&v| v as f64 / 255.0));
            } else {
                let sum: u32 = p.iter().map(|&v| v as u32).sum();
                data.push(sum as f64 / 765.0);
            }
        }
    }
    Tensor::new(vec![size, size, channels], data)
}

fn decode_file(path: &Path) -> Result<RgbImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase);
    match ext.as_deref() {
        Some("ppm") => decode_ppm(&bytes),
        Some("png") => decode_png(&bytes),
        _ => Err(Error::Decode(format!("unsupported extension on {}", path.display()))),
    }
}

/// Result of [`load_folder_dataset`]: the dataset and the files that could
/// not be decoded.
#[derive(Debug)]
pub struct FolderLoad {
    pub dataset: LabeledDataset,
    pub skipped: Vec<PathBuf>,
}

/// Loads `root/<class>/<image>.{png,ppm}`. Class names are the sorted
/// subdirectory names; files are read in lexicographic order. Undecodable
/// files are skipped with a warning; a class left with no images is an
/// error.
pub fn load_folder_dataset(root: impl AsRef<Path>, size: usize, channels: usize) -> Result<FolderLoad> {
    let root = root.as_ref();
    if !root.is_dir() {
        return Err(Error::Config(format!("dataset root {} is not a directory", root.display())));
    }
    let mut class_dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    class_dirs.sort();
    if class_dirs.len() < 2 {
        return Err(Error::Config(format!(
            "dataset root {} needs at least 2 class folders, found {}",
            root.display(),
            class_dirs.len()
        )));
    }

    let mut samples = Vec::new();
    let mut class_names = Vec::new();
    let mut skipped = Vec::new();
    for (label, dir) in class_dirs.iter().enumerate() {
        let name = dir.file_name().unwrap().to_string_lossy().into_owned();
        let mut files: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        let mut count = 0;
        for f in files {
            match decode_file(&f).and_then(|img| to_tensor(&img, size, channels)) {
                Ok(image) => {
                    samples.push(Sample { image, label });
                    count += 1;
                }
                Err(e) => {
                    log::warn!("skipping {}: {e}", f.display());
                    skipped.push(f);
                }
            }
        }
        if count == 0 {
            return Err(Error::Config(format!("class folder {name} has no decodable images")));
        }
        class_names.push(name);
    }
    Ok(FolderLoad {
        dataset: LabeledDataset {
            samples,
            class_names,
        },
        skipped,
    })
}

/// Stratified split: within each class, a seeded shuffle followed by
/// `floor(ratio · count)` samples to train and the rest to test.
pub fn split(ds: &LabeledDataset, ratio: f64, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("split ratio must lie in (0, 1), got {ratio}")));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes()];
    for (i, s) in ds.samples.iter().enumerate() {
        by_class[s.label].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (label, mut idx) in by_class.into_iter().enumerate() {
        if idx.len() < 2 {
            return Err(Error::Config(format!(
                "class {} has {} samples; stratified split needs at least 2",
                ds.class_names[label],
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        // the nudge keeps exact products such as 0.29 * 100 from flooring low
        let n_train = ((ratio * idx.len() as f64) + 1e-9).floor() as usize;
        train.extend(idx[..n_train].iter().map(|&i| ds.samples[i].clone()));
        test.extend(idx[n_train..].iter().map(|&i| ds.samples[i].clone()));
    }
    let mk = |samples| LabeledDataset {
        samples,
        class_names: ds.class_names.clone(),
    };
    Ok((mk(train), mk(test)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub per_class: usize,
    pub image_size: usize,
    pub channels: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_classes: 4,
            per_class: 50,
            image_size: 16,
            channels: 1,
            noise: 0.1,
            seed: 0,
        }
    }
}

const SYNTH_BACKGROUND: f64 = 0.2;
const SYNTH_FOREGROUND: f64 = 0.8;

/// Class `k` brightens the `k`-th cell of a `g × g` grid of regions, where
/// `g = ceil(sqrt(num_classes))`; with four classes each class owns one
/// quadrant. Seeded uniform noise in `[-noise, noise]` is added and the
/// result clamped to `[0, 1]`.
pub fn synth_dataset(spec: &SynthSpec) -> Result<LabeledDataset> {
    if spec.num_classes < 2 {
        return Err(Error::Config("synthetic dataset needs at least 2 classes".into()));
    }
    let grid = (spec.num_classes as f64).sqrt().ceil() as usize;
    if spec.image_size < grid || spec.per_class == 0 || spec.channels == 0 {
        return Err(Error::Config(format!(
            "synthetic images of size {} cannot host {} class regions",
            spec.image_size, spec.num_classes
        )));
    }
    let s = spec.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut samples = Vec::with_capacity(spec.num_classes * spec.per_class);
    for label in 0..spec.num_classes {
        let (cy, cx) = (label / grid, label % grid);
        let base: Vec<f64> = (0..s * s)
            .flat_map(|i| {
                let (y, x) = (i / s, i % s);
                let lit = y * grid / s == cy && x * grid / s == cx;
                let v = if lit { SYNTH_FOREGROUND } else { SYNTH_BACKGROUND };
                std::iter::repeat_n(v, spec.channels)
            })
            .collect();
        for _ in 0..spec.per_class {
            let data = base
                .iter()
                .map(|&v| {
                    if spec.noise > 0.0 {
                        (v + rng.gen_range(-spec.noise..=spec.noise)).clamp(0.0, 1.0)
                    } else {
                        v
                    }
                })
                .collect();
            samples.push(Sample {
                image: Tensor::new(vec![s, s, spec.channels], data)?,
                label,
            });
        }
    }
    Ok(LabeledDataset {
        samples,
        class_names: (0..spec.num_classes).map(|k| format!("class{k}")).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_ppm(path: &Path, w: usize, h: usize, fill: u8) {
        let img = RgbImage {
            width: w,
            height: h,
            pixels: vec![fill; w * h * 3],
        };
        fs::write(path, encode_ppm(&img)).unwrap();
    }

    #[test]
    fn white_pixel_scales_to_one() {
        let img = decode_ppm(b"P6\n1 1\n255\n\xff\xff\xff").unwrap();
        assert_eq!(to_tensor(&img, 1, 3).unwrap().data(), &[1.0, 1.0, 1.0]);
        assert_eq!(to_tensor(&img, 1, 1).unwrap().data(), &[1.0]);
    }

    #[test]
    fn hand_built_ppm_decodes_exactly() {
        // 2x2: red, green / blue, (10, 20, 30); header has a comment
        let mut bytes = b"P6 # tiny\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 0, 0, 255, 0, 0, 0, 255, 10, 20, 30]);
        let img = decode_ppm(&bytes).unwrap();
        assert_eq!((img.width, img.height), (2, 2));
        let t = to_tensor(&img, 2, 3).unwrap();
        assert_eq!(t.shape(), &[2, 2, 3]);
        let expected: Vec<f64> = [255, 0, 0, 0, 255, 0, 0, 0, 255, 10, 20, 30]
            .iter()
            .map(|&b| b as f64 / 255.0)
            .collect();
        assert_eq!(t.data(), &expected[..]);
    }

    #[test]
    fn ppm_errors() {
        assert!(decode_ppm(b"P3\n1 1\n255\n000").is_err());
        assert!(decode_ppm(b"P6\n2 2\n255\n\x00\x00").is_err());
        assert!(decode_ppm(b"P6\n1 1\n65535\n\x00\x00\x00\x00\x00\x00").is_err());
    }

    #[test]
    fn nearest_neighbor_resize() {
        // 2x1 black/white upscaled to 4x4: left half black, right half white
        let img = RgbImage {
            width: 2,
            height: 1,
            pixels: vec![0, 0, 0, 255, 255, 255],
        };
        let t = to_tensor(&img, 4, 1).unwrap();
        for y in 0..4 {
            assert_eq!(&t.data()[y * 4..y * 4 + 4], &[0.0, 0.0, 1.0, 1.0]);
        }
    }

    #[test]
    fn png_decodes_to_the_same_tensor_as_ppm() {
        let pixels: Vec<u8> = (0..4 * 3 * 3).map(|i| (i * 7) as u8).collect();
        let mut buf = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut buf, 4, 3);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            enc.write_header().unwrap().write_image_data(&pixels).unwrap();
        }
        let from_png = decode_png(&buf).unwrap();
        let from_ppm = decode_ppm(&encode_ppm(&RgbImage {
            width: 4,
            height: 3,
            pixels,
        }))
        .unwrap();
        assert_eq!(from_png, from_ppm);
    }

    #[test]
    fn folder_loading_counts_and_order() {
        let dir = tempfile::tempdir().unwrap();
        let b = dir.path().join("beta");
        let a = dir.path().join("alpha");
        fs::create_dir(&a).unwrap();
        fs::create_dir(&b).unwrap();
        for i in 0..3 {
            write_ppm(&a.join(format!("{i}.ppm")), 2, 2, 255);
        }
        for i in 0..2 {
            write_ppm(&b.join(format!("{i}.ppm")), 3, 3, 0);
        }
        fs::write(b.join("junk.ppm"), b"not an image").unwrap();

        let load = load_folder_dataset(dir.path(), 4, 1).unwrap();
        let ds = &load.dataset;
        assert_eq!(ds.len(), 5);
        assert_eq!(ds.class_names, vec!["alpha", "beta"]);
        assert_eq!(ds.class_counts(), vec![3, 2]);
        assert_eq!(load.skipped.len(), 1);
        assert!(ds.samples[..3].iter().all(|s| s.label == 0 && s.image.data()[0] == 1.0));
        assert_eq!(load_folder_dataset(dir.path(), 4, 1).unwrap().dataset, *ds);
    }

    #[test]
    fn empty_class_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("a")).unwrap();
        fs::create_dir(dir.path().join("b")).unwrap();
        write_ppm(&dir.path().join("a/x.ppm"), 1, 1, 3);
        assert!(load_folder_dataset(dir.path(), 2, 1).is_err());
        assert!(load_folder_dataset(dir.path().join("missing"), 2, 1).is_err());
    }

    fn counting_dataset(counts: &[usize]) -> LabeledDataset {
        let mut samples = Vec::new();
        for (label, &n) in counts.iter().enumerate() {
            for i in 0..n {
                samples.push(Sample {
                    image: Tensor::scalar((label * 100_000 + i) as f64),
                    label,
                });
            }
        }
        LabeledDataset {
            samples,
            class_names: (0..counts.len()).map(|k| k.to_string()).collect(),
        }
    }

    #[test]
    fn split_follows_floor_rule() {
        let ds = counting_dataset(&[155, 98]);
        let (train, test) = split(&ds, 0.8, 1).unwrap();
        assert_eq!(train.class_counts(), vec![124, 78]);
        assert_eq!(test.class_counts(), vec![31, 20]);

        let ds = counting_dataset(&[2, 2]);
        let (train, test) = split(&ds, 0.5, 1).unwrap();
        assert_eq!(train.class_counts(), vec![1, 1]);
        assert_eq!(test.class_counts(), vec![1, 1]);

        assert!(split(&counting_dataset(&[1, 4]), 0.8, 0).is_err());
        assert!(split(&ds, 1.0, 0).is_err());
    }

    #[test]
    fn synthetic_dataset_properties() {
        let spec = SynthSpec::default();
        let a = synth_dataset(&spec).unwrap();
        assert_eq!(a, synth_dataset(&spec).unwrap());
        assert_eq!(a.class_counts(), vec![50; 4]);
        assert!(a.samples.iter().all(|s| s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v))));

        let clean = synth_dataset(&SynthSpec { noise: 0.0, ..spec.clone() }).unwrap();
        for s in &clean.samples {
            assert_eq!(s.image, clean.samples[s.label * 50].image);
        }
        // class 1 lights the top-right quadrant
        let img = &clean.samples[50].image;
        assert_eq!(img.at(&[0, 15, 0]), SYNTH_FOREGROUND);
        assert_eq!(img.at(&[0, 0, 0]), SYNTH_BACKGROUND);
        assert!(synth_dataset(&SynthSpec { num_classes: 1, ..spec }).is_err());
    }

    #[test]
    fn nearest_centroid_separates_synthetic_classes() {
        let ds = synth_dataset(&SynthSpec::default()).unwrap();
        let dim = 16 * 16;
        let mut centroids = vec![vec![0.0; dim]; 4];
        for s in &ds.samples {
            for (c, &v) in centroids[s.label].iter_mut().zip(s.image.data()) {
                *c += v / 50.0;
            }
        }
        let correct = ds
            .samples
            .iter()
            .filter(|s| {
                let dist = |c: &Vec<f64>| -> f64 {
                    c.iter().zip(s.image.data()).map(|(a, b)| (a - b) * (a - b)).sum()
                };
                let best = (0..4)
                    .min_by(|&i, &j| dist(&centroids[i]).partial_cmp(&dist(&centroids[j])).unwrap())
                    .unwrap();
                best == s.label
            })
            .count();
        assert_eq!(correct, 200);
    }
}
