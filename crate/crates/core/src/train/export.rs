use std::path::Path;

use image::{GrayImage, Luma};

use crate::error::{Error, Result};
use crate::tensor::Tensor4;
use crate::train::network::Network;

const SEPARATOR: u8 = 255;

/// Grid layout for `count` tiles: the most square exact factorization when
/// it is no more than twice as wide as tall, otherwise a `ceil(sqrt)` grid.
pub fn grid_dims(count: usize) -> (usize, usize) {
    if count == 0 {
        return (0, 0);
    }
    let root = (count as f64).sqrt();
    let rows = (1..=root.floor() as usize)
        .rev()
        .find(|r| count.is_multiple_of(*r))
        .unwrap_or(1);
    let cols = count / rows;
    if cols <= 2 * rows {
        return (rows, cols);
    }
    let cols = root.ceil() as usize;
    (count.div_ceil(cols), cols)
}

/// Maps one slice to `[0, 255]` by its own min and max. A constant slice
/// becomes mid-gray 128.
pub fn normalize_slice(values: &[f64]) -> Vec<u8> {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max <= min {
        return vec![128; values.len()];
    }
    values
        .iter()
        .map(|v| ((v - min) / (max - min) * 255.0).round() as u8)
        .collect()
}

/// Tiles every `(out, in)` kernel slice into one grayscale image with
/// 1-pixel separators, each pixel enlarged `scale` times.
pub fn render_filter_grid(kernels: &Tensor4, scale: usize) -> (GrayImage, usize, usize) {
    let [c_out, c_in, k, _] = kernels.shape();
    let count = c_out * c_in;
    let (rows, cols) = grid_dims(count);
    let scale = scale.max(1);
    let tile = k * scale;
    let width = cols * (tile + 1) + 1;
    let height = rows * (tile + 1) + 1;
    let mut img = GrayImage::from_pixel(width as u32, height as u32, Luma([SEPARATOR]));
    let area = k * k;
    for s in 0..count {
        let pixels = normalize_slice(&kernels.data()[s * area..(s + 1) * area]);
        let (gr, gc) = (s / cols, s % cols);
        let (oy, ox) = (gr * (tile + 1) + 1, gc * (tile + 1) + 1);
        for y in 0..tile {
            for x in 0..tile {
                let v = pixels[(y / scale) * k + x / scale];
                img.put_pixel((ox + x) as u32, (oy + y) as u32, Luma([v]));
            }
        }
    }
    (img, rows, cols)
}

/// Reads tile `index` back out of a grid produced by [`render_filter_grid`].
pub fn extract_tile(img: &GrayImage, k: usize, scale: usize, cols: usize, index: usize) -> Vec<u8> {
    let tile = k * scale;
    let (oy, ox) = (
        (index / cols) * (tile + 1) + 1,
        (index % cols) * (tile + 1) + 1,
    );
    let mut out = Vec::with_capacity(k * k);
    for r in 0..k {
        for c in 0..k {
            out.push(
                img.get_pixel((ox + c * scale) as u32, (oy + r * scale) as u32)
                    .0[0],
            );
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FilterGrid {
    pub rows: usize,
    pub cols: usize,
    pub kernel: usize,
    pub slices: usize,
}

/// Writes the first layer's kernels as an 8-bit grayscale PNG grid.
pub fn export_filters(network: &Network, path: &Path, scale: usize) -> Result<FilterGrid> {
    let kernels = network.first_kernels().ok_or_else(|| {
        Error::InvalidArgument("first parameterized layer is not a conv or gabor_conv layer".into())
    })?;
    let (img, rows, cols) = render_filter_grid(&kernels, scale);
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(FilterGrid {
        rows,
        cols,
        kernel: kernels.h(),
        slices: kernels.n() * kernels.c(),
    })
}
