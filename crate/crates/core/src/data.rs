//! Labelled image datasets: PNG directory loading, normalization, splits,
//! batching, augmentation, and the synthetic oriented-grating generator.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{DynamicImage, GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor4;

/// Per-channel normalization statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub images: Tensor4,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    /// Set once the images have been normalized.
    pub stats: Option<NormStats>,
}

impl LabeledDataset {
    pub fn new(images: Tensor4, labels: Vec<usize>, class_names: Vec<String>) -> Result<Self> {
        if images.n() == 0 {
            return Err(Error::Data("dataset is empty".into()));
        }
        if labels.len() != images.n() {
            return Err(Error::Data(format!(
                "{} labels for {} images",
                labels.len(),
                images.n()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(Error::Data(format!(
                "label {bad} out of range for {} classes",
                class_names.len()
            )));
        }
        Ok(LabeledDataset {
            images,
            labels,
            class_names,
            stats: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// `(c, h, w)` of one image.
    pub fn sample_shape(&self) -> [usize; 3] {
        let [_, c, h, w] = self.images.shape();
        [c, h, w]
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            images: self.images.select(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_names: self.class_names.clone(),
            stats: self.stats.clone(),
        }
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    entries.sort();
    Ok(entries)
}

fn decode_png(path: &Path, image_size: usize, channels: usize) -> Result<Vec<f64>> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let size = image_size as u32;
    let resize = |img: DynamicImage| {
        if img.width() == size && img.height() == size {
            img
        } else {
            img.resize_exact(size, size, FilterType::Triangle)
        }
    };
    let img = resize(img);
    let plane = image_size * image_size;
    let mut out = vec![0.0; channels * plane];
    if channels == 1 {
        for (i, p) in img.to_luma8().pixels().enumerate() {
            out[i] = p.0[0] as f64 / 255.0;
        }
    } else {
        for (i, p) in img.to_rgb8().pixels().enumerate() {
            for c in 0..3 {
                out[c * plane + i] = p.0[c] as f64 / 255.0;
            }
        }
    }
    Ok(out)
}

/// Loads `root/<class>/*.png`. Classes are sorted by directory name and files
/// by name within each class; images are resized bilinearly to
/// `image_size x image_size` and scaled to `[0, 1]`.
pub fn load_image_dir(root: &Path, image_size: usize, channels: usize) -> Result<LabeledDataset> {
    if channels != 1 && channels != 3 {
        return Err(Error::InvalidArgument(format!(
            "channels must be 1 or 3, got {channels}"
        )));
    }
    if image_size == 0 {
        return Err(Error::InvalidArgument("image size must be positive".into()));
    }
    let mut class_names = Vec::new();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for class_dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
        let label = class_names.len();
        let files: Vec<_> = sorted_entries(&class_dir)?
            .into_iter()
            .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
            .collect();
        if files.is_empty() {
            return Err(Error::Data(format!(
                "class directory {} holds no PNG images",
                class_dir.display()
            )));
        }
        for file in files {
            data.extend(decode_png(&file, image_size, channels)?);
            labels.push(label);
        }
        class_names.push(
            class_dir
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
        );
    }
    if labels.is_empty() {
        return Err(Error::Data(format!(
            "{} contains no class directories",
            root.display()
        )));
    }
    let images = Tensor4::from_vec([labels.len(), channels, image_size, image_size], data)?;
    LabeledDataset::new(images, labels, class_names)
}

/// Writes the dataset as 8-bit PNGs in the `root/<class>/NNNNN.png` layout
/// that [`load_image_dir`] reads. Values are clamped to `[0, 1]`.
pub fn write_image_dir(ds: &LabeledDataset, root: &Path) -> Result<()> {
    let [c, h, w] = ds.sample_shape();
    if c != 1 && c != 3 {
        return Err(Error::InvalidArgument(format!(
            "cannot write {c}-channel images"
        )));
    }
    for name in &ds.class_names {
        let dir = root.join(name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let to_u8 = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let mut counters = vec![0usize; ds.num_classes()];
    for (i, &label) in ds.labels.iter().enumerate() {
        let sample = ds.images.sample(i);
        let path = root
            .join(&ds.class_names[label])
            .join(format!("{:05}.png", counters[label]));
        counters[label] += 1;
        let result = if c == 1 {
            let img: GrayImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
                Luma([to_u8(sample[y as usize * w + x as usize])])
            });
            img.save(&path)
        } else {
            let plane = h * w;
            let img: RgbImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
                let at = y as usize * w + x as usize;
                Rgb([
                    to_u8(sample[at]),
                    to_u8(sample[plane + at]),
                    to_u8(sample[2 * plane + at]),
                ])
            });
            img.save(&path)
        };
        result.map_err(|e| Error::Image {
            path: path.clone(),
            message: e.to_string(),
        })?;
    }
    Ok(())
}

/// Population mean and standard deviation of each channel.
pub fn fit_stats(images: &Tensor4) -> NormStats {
    let [n, c, h, w] = images.shape();
    let plane = h * w;
    let count = (n * plane) as f64;
    let mut mean = vec![0.0; c];
    let mut std = vec![0.0; c];
    for ch in 0..c {
        let values =
            || (0..n).flat_map(move |i| images.sample(i)[ch * plane..(ch + 1) * plane].iter());
        let m = values().sum::<f64>() / count;
        let var = values().map(|v| (v - m) * (v - m)).sum::<f64>() / count;
        mean[ch] = m;
        std[ch] = var.sqrt();
    }
    NormStats { mean, std }
}

/// Standardizes each channel. With `stats_from` the supplied statistics are
/// applied instead of fitting new ones, which is how validation data is
/// treated.
pub fn normalize(ds: &LabeledDataset, stats_from: Option<&NormStats>) -> Result<LabeledDataset> {
    let stats = match stats_from {
        Some(s) => s.clone(),
        None => fit_stats(&ds.images),
    };
    let [n, c, h, w] = ds.images.shape();
    if stats.mean.len() != c || stats.std.len() != c {
        return Err(Error::Shape(format!(
            "normalization stats for {} channels applied to {c}",
            stats.mean.len()
        )));
    }
    if let Some(ch) = (0..c).find(|&ch| {
        let std = stats.std[ch];
        std.is_nan() || std <= 1e-12 * (1.0 + stats.mean[ch].abs())
    }) {
        return Err(Error::Data(format!(
            "channel {ch} has zero variance and cannot be normalized"
        )));
    }
    let plane = h * w;
    let mut images = ds.images.clone();
    for i in 0..n {
        let sample = images.sample_mut(i);
        for ch in 0..c {
            for v in &mut sample[ch * plane..(ch + 1) * plane] {
                *v = (*v - stats.mean[ch]) / stats.std[ch];
            }
        }
    }
    Ok(LabeledDataset {
        images,
        labels: ds.labels.clone(),
        class_names: ds.class_names.clone(),
        stats: Some(stats),
    })
}

/// Per image: horizontal flip with probability `flip_prob`, then zero-pad by
/// `crop_padding` and take a random window of the original size.
pub fn augment(
    batch: &Tensor4,
    flip_prob: f64,
    crop_padding: usize,
    rng: &mut ChaCha8Rng,
) -> Tensor4 {
    let [n, c, h, w] = batch.shape();
    let mut out = Tensor4::zeros(batch.shape());
    let pad = crop_padding as isize;
    for i in 0..n {
        let flip = rng.random::<f64>() < flip_prob;
        let (dy, dx) = if crop_padding > 0 {
            (
                rng.random_range(0..=2 * crop_padding) as isize - pad,
                rng.random_range(0..=2 * crop_padding) as isize - pad,
            )
        } else {
            (0, 0)
        };
        for ch in 0..c {
            for y in 0..h {
                let sy = y as isize + dy;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for x in 0..w {
                    let sx = x as isize + dx;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let col = if flip {
                        w - 1 - sx as usize
                    } else {
                        sx as usize
                    };
                    out.set(i, ch, y, x, batch.get(i, ch, sy as usize, col));
                }
            }
        }
    }
    out
}

/// Single-channel sinusoidal gratings, one orientation per class
/// (`θ_j = j·π/classes`), with random frequency in `[0.3, 1.2)` rad/pixel,
/// random phase, and clipped Gaussian pixel noise. Samples are class-major.
pub fn gen_texture_dataset(
    n_per_class: usize,
    image_size: usize,
    classes: usize,
    noise_std: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if !(2..=8).contains(&classes) {
        return Err(Error::InvalidArgument(format!(
            "texture generator supports 2..=8 classes, got {classes}"
        )));
    }
    if n_per_class == 0 || image_size == 0 {
        return Err(Error::InvalidArgument(
            "per-class count and image size must be positive".into(),
        ));
    }
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "noise std must be finite and non-negative, got {noise_std}"
        )));
    }
    let mut rng = rng::stream(seed, &[]);
    let noise = Normal::new(0.0, noise_std).expect("validated std");
    let plane = image_size * image_size;
    let mut data = Vec::with_capacity(classes * n_per_class * plane);
    let mut labels = Vec::with_capacity(classes * n_per_class);
    for class in 0..classes {
        let theta = class as f64 * PI / classes as f64;
        let (sin_t, cos_t) = theta.sin_cos();
        for _ in 0..n_per_class {
            let phase = rng.random_range(0.0..2.0 * PI);
            let omega = rng.random_range(0.3..1.2);
            for y in 0..image_size {
                for x in 0..image_size {
                    let u = x as f64 * cos_t + y as f64 * sin_t;
                    let mut v = 0.5 + 0.5 * (omega * u + phase).cos();
                    if noise_std > 0.0 {
                        v += noise.sample(&mut rng);
                    }
                    data.push(v.clamp(0.0, 1.0));
                }
            }
            labels.push(class);
        }
    }
    let names = (0..classes)
        .map(|j| {
            let degrees = (180.0 * j as f64 / classes as f64).round() as u32;
            format!("{j:02}_theta{degrees:03}")
        })
        .collect();
    let images = Tensor4::from_vec([labels.len(), 1, image_size, image_size], data)?;
    LabeledDataset::new(images, labels, names)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitSpec {
    pub val_fraction: f64,
    pub shuffle_seed: u64,
}

/// Shuffles indices with the seed and assigns the first
/// `floor(N * val_fraction)` of them to validation. Both halves keep the
/// shuffled order sorted back into ascending index order.
pub fn split(ds: &LabeledDataset, spec: &SplitSpec) -> Result<(LabeledDataset, LabeledDataset)> {
    let (train, val) = split_indices(ds.len(), spec)?;
    Ok((ds.subset(&train), ds.subset(&val)))
}

pub fn split_indices(n: usize, spec: &SplitSpec) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(spec.val_fraction > 0.0 && spec.val_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "val_fraction must lie in (0, 1), got {}",
            spec.val_fraction
        )));
    }
    let n_val = (n as f64 * spec.val_fraction).floor() as usize;
    if n_val == 0 || n_val == n {
        return Err(Error::Data(format!(
            "val_fraction {} leaves an empty split of {n} samples",
            spec.val_fraction
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(spec.shuffle_seed, &[rng::TAG_SPLIT]));
    let mut val = order[..n_val].to_vec();
    let mut train = order[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    Ok((train, val))
}

/// Visit order of one epoch: a permutation derived from `(seed, epoch)`.
pub fn epoch_order(n: usize, shuffle_seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(
        shuffle_seed,
        &[rng::TAG_SHUFFLE, epoch as u64],
    ));
    order
}

pub struct Batch {
    pub images: Tensor4,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

/// Mini-batches over one epoch; the final partial batch is kept.
pub struct Batches<'a> {
    ds: &'a LabeledDataset,
    order: Vec<usize>,
    batch_size: usize,
    cursor: usize,
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let indices = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        Some(Batch {
            images: self.ds.images.select(&indices),
            labels: indices.iter().map(|&i| self.ds.labels[i]).collect(),
            indices,
        })
    }
}

pub fn batches(
    ds: &LabeledDataset,
    batch_size: usize,
    shuffle_seed: u64,
    epoch: usize,
) -> Result<Batches<'_>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument(
            "batch size must be at least 1".into(),
        ));
    }
    Ok(Batches {
        ds,
        order: epoch_order(ds.len(), shuffle_seed, epoch),
        batch_size,
        cursor: 0,
    })
}

/// In-order batches with no shuffling, for evaluation.
pub fn sequential_batches(ds: &LabeledDataset, batch_size: usize) -> Result<Batches<'_>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument(
            "batch size must be at least 1".into(),
        ));
    }
    Ok(Batches {
        ds,
        order: (0..ds.len()).collect(),
        batch_size,
        cursor: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tiny(n: usize) -> LabeledDataset {
        let images =
            Tensor4::from_vec([n, 1, 2, 2], (0..4 * n).map(|v| v as f64).collect()).unwrap();
        LabeledDataset::new(
            images,
            (0..n).map(|i| i % 2).collect(),
            vec!["a".into(), "b".into()],
        )
        .unwrap()
    }

    #[test]
    fn dataset_validation() {
        let images = Tensor4::zeros([2, 1, 2, 2]);
        assert!(LabeledDataset::new(images.clone(), vec![0], vec!["a".into()]).is_err());
        assert!(LabeledDataset::new(images.clone(), vec![0, 1], vec!["a".into()]).is_err());
        assert!(LabeledDataset::new(Tensor4::zeros([0, 1, 2, 2]), vec![], vec![]).is_err());
    }

    #[test]
    fn normalize_channel_to_unit_scale() {
        // Mean 0.5, population std 0.25.
        let images = Tensor4::from_vec([1, 1, 2, 2], vec![0.25, 0.75, 0.25, 0.75]).unwrap();
        let ds = LabeledDataset::new(images, vec![0], vec!["a".into()]).unwrap();
        let stats = fit_stats(&ds.images);
        assert!((stats.mean[0] - 0.5).abs() < 1e-15);
        assert!((stats.std[0] - 0.25).abs() < 1e-15);
        let norm = normalize(&ds, None).unwrap();
        let refit = fit_stats(&norm.images);
        assert!(refit.mean[0].abs() < 1e-10);
        assert!((refit.std[0] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn normalize_with_supplied_stats() {
        let ds = tiny(4);
        let stats = NormStats {
            mean: vec![1.0],
            std: vec![2.0],
        };
        let norm = normalize(&ds, Some(&stats)).unwrap();
        assert_eq!(norm.images.data()[3], (3.0 - 1.0) / 2.0);
        assert_eq!(norm.stats, Some(stats));
    }

    #[test]
    fn constant_channel_is_rejected() {
        let images = Tensor4::filled([3, 1, 2, 2], 0.4);
        let ds = LabeledDataset::new(images, vec![0, 0, 0], vec!["a".into()]).unwrap();
        assert!(matches!(normalize(&ds, None), Err(Error::Data(_))));
    }

    #[test]
    fn split_counts_and_partition() {
        let ds = tiny(10);
        let spec = SplitSpec {
            val_fraction: 0.3,
            shuffle_seed: 4,
        };
        let (train, val) = split_indices(10, &spec).unwrap();
        assert_eq!((train.len(), val.len()), (7, 3));
        let mut all: Vec<_> = train.iter().chain(&val).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        let (t, v) = split(&ds, &spec).unwrap();
        assert_eq!((t.len(), v.len()), (7, 3));
        for bad in [0.0, 1.0, -0.2, 1.5] {
            let spec = SplitSpec {
                val_fraction: bad,
                shuffle_seed: 0,
            };
            assert!(split(&ds, &spec).is_err());
        }
    }

    #[test]
    fn batch_sizes_keep_partial_tail() {
        let ds = tiny(10);
        let sizes: Vec<_> = batches(&ds, 4, 1, 0)
            .unwrap()
            .map(|b| b.labels.len())
            .collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        assert!(batches(&ds, 0, 1, 0).is_err());
    }

    #[test]
    fn batch_order_depends_only_on_seed_and_epoch() {
        let ds = tiny(20);
        let order = |seed, epoch| -> Vec<usize> {
            batches(&ds, 3, seed, epoch)
                .unwrap()
                .flat_map(|b| b.indices)
                .collect()
        };
        assert_eq!(order(5, 2), order(5, 2));
        assert_ne!(order(5, 2), order(5, 3));
        let mut sorted = order(5, 2);
        sorted.sort_unstable();
        assert_eq!(sorted, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn augment_identity_and_flip() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = Tensor4::from_vec([2, 1, 2, 3], (0..12).map(|v| v as f64).collect()).unwrap();
        assert_eq!(augment(&batch, 0.0, 0, &mut rng), batch);
        let flipped = augment(&batch, 1.0, 0, &mut rng);
        assert_eq!(&flipped.data()[..6], &[2.0, 1.0, 0.0, 5.0, 4.0, 3.0]);
    }

    #[test]
    fn augment_is_seeded_and_shape_preserving() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch = Tensor4::from_vec(
            [4, 2, 5, 5],
            (0..200).map(|_| rng.random_range(0.1..0.9)).collect(),
        )
        .unwrap();
        let a = augment(&batch, 0.5, 2, &mut ChaCha8Rng::seed_from_u64(9));
        let b = augment(&batch, 0.5, 2, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        assert_eq!(a.shape(), batch.shape());
        assert!(a
            .data()
            .iter()
            .all(|&v| v == 0.0 || (0.1..0.9).contains(&v)));
    }

    #[test]
    fn texture_generator_contract() {
        let ds = gen_texture_dataset(5, 12, 2, 0.0, 1).unwrap();
        assert_eq!(ds.len(), 10);
        assert_eq!(ds.labels.iter().filter(|&&l| l == 0).count(), 5);
        assert!(ds.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
        // θ = 0: no dependence on y, so every row of a class-0 image is equal.
        let img = ds.images.sample(0);
        for y in 1..12 {
            assert_eq!(&img[y * 12..(y + 1) * 12], &img[..12]);
        }
        assert_eq!(gen_texture_dataset(5, 12, 2, 0.0, 1).unwrap(), ds);
        assert_ne!(gen_texture_dataset(5, 12, 2, 0.0, 2).unwrap(), ds);
        assert!(gen_texture_dataset(5, 12, 9, 0.0, 1).is_err());
        assert!(gen_texture_dataset(5, 12, 1, 0.0, 1).is_err());
    }
}
