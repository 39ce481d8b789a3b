//! Browser bindings: synthesize a single Gabor kernel, render the 40-entry
//! initialization bank, and measure how a kernel responds to gratings.

use std::f64::consts::PI;

use wasm_bindgen::prelude::*;

use gabornet::gabor::{build_filter_bank, make_kernel, GaborParams};
use gabornet::tensor::{conv2d_forward, ConvGeometry, Tensor4};
use gabornet::train::export::{normalize_slice, render_filter_grid};

/// Grayscale image as RGBA bytes, ready for `ImageData`.
#[wasm_bindgen]
pub struct Picture {
    width: u32,
    height: u32,
    rgba: Vec<u8>,
}

#[wasm_bindgen]
impl Picture {
    #[wasm_bindgen(getter)]
    pub fn width(&self) -> u32 {
        self.width
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn rgba(&self) -> Vec<u8> {
        self.rgba.clone()
    }
}

impl Picture {
    fn from_gray(width: usize, height: usize, gray: &[u8]) -> Self {
        let rgba = gray.iter().flat_map(|&g| [g, g, g, 255]).collect();
        Picture {
            width: width as u32,
            height: height as u32,
            rgba,
        }
    }
}

fn params(omega: f64, theta: f64, psi: f64, sigma: f64) -> Result<GaborParams, String> {
    let p = GaborParams::new(omega, theta, psi, sigma);
    if p.is_valid() {
        Ok(p)
    } else {
        Err(format!(
            "omega and sigma must be at least 1e-3, got {omega} and {sigma}"
        ))
    }
}

pub fn kernel_values(
    omega: f64,
    theta: f64,
    psi: f64,
    sigma: f64,
    k: usize,
) -> Result<Vec<f64>, String> {
    make_kernel(&params(omega, theta, psi, sigma)?, k).map_err(|e| e.to_string())
}

/// Raw `k×k` kernel values, row-major.
#[wasm_bindgen(js_name = gaborKernel)]
pub fn gabor_kernel(
    omega: f64,
    theta: f64,
    psi: f64,
    sigma: f64,
    k: usize,
) -> Result<Vec<f64>, JsError> {
    kernel_values(omega, theta, psi, sigma, k).map_err(|e| JsError::new(&e))
}

/// The kernel min-max scaled to gray and magnified `scale` times.
#[wasm_bindgen(js_name = kernelPicture)]
pub fn kernel_picture(
    omega: f64,
    theta: f64,
    psi: f64,
    sigma: f64,
    k: usize,
    scale: usize,
) -> Result<Picture, JsError> {
    let values = kernel_values(omega, theta, psi, sigma, k).map_err(|e| JsError::new(&e))?;
    let gray = normalize_slice(&values);
    let scale = scale.max(1);
    let side = k * scale;
    let mut out = Vec::with_capacity(side * side);
    for y in 0..side {
        for x in 0..side {
            out.push(gray[(y / scale) * k + x / scale]);
        }
    }
    Ok(Picture::from_gray(side, side, &out))
}

pub fn bank_tensor(k: usize, psi: f64) -> Result<Tensor4, String> {
    let bank = build_filter_bank();
    let mut data = Vec::with_capacity(bank.len() * k * k);
    for e in bank.entries() {
        data.extend(kernel_values(e.omega, e.theta, psi, PI / e.omega, k)?);
    }
    Tensor4::from_vec([bank.len(), 1, k, k], data).map_err(|e| e.to_string())
}

/// All 40 bank filters (5 frequencies by 8 orientations, `σ = π/ω`) with a
/// shared phase, tiled like the exported filter grids.
#[wasm_bindgen(js_name = bankPicture)]
pub fn bank_picture(k: usize, psi: f64, scale: usize) -> Result<Picture, JsError> {
    let kernels = bank_tensor(k, psi).map_err(|e| JsError::new(&e))?;
    let (img, _, _) = render_filter_grid(&kernels, scale);
    Ok(Picture::from_gray(
        img.width() as usize,
        img.height() as usize,
        img.as_raw(),
    ))
}

/// Sinusoidal grating in `[-1, 1]` whose wave vector points along `theta`.
pub fn grating(size: usize, omega: f64, theta: f64) -> Vec<f64> {
    let (s, c) = theta.sin_cos();
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            out.push((omega * (x as f64 * c + y as f64 * s)).cos());
        }
    }
    out
}

/// Valid cross-correlation of a `size×size` image with one kernel.
pub fn response_map(
    image: &[f64],
    size: usize,
    kernel: &[f64],
    k: usize,
) -> Result<Vec<f64>, String> {
    let input = Tensor4::from_vec([1, 1, size, size], image.to_vec()).map_err(|e| e.to_string())?;
    let kernels = Tensor4::from_vec([1, 1, k, k], kernel.to_vec()).map_err(|e| e.to_string())?;
    let geom = ConvGeometry::new(k, 1, 0).map_err(|e| e.to_string())?;
    conv2d_forward(&input, &kernels, &[0.0], &geom)
        .map(Tensor4::into_data)
        .map_err(|e| e.to_string())
}

/// Response of the kernel to a grating of the given frequency and
/// orientation; the left half shows the grating, the right half the response.
#[wasm_bindgen(js_name = responsePicture)]
#[allow(clippy::too_many_arguments)]
pub fn response_picture(
    omega: f64,
    theta: f64,
    psi: f64,
    sigma: f64,
    k: usize,
    grating_omega: f64,
    grating_theta: f64,
    size: usize,
) -> Result<Picture, JsError> {
    let err = |e: String| JsError::new(&e);
    if size < k {
        return Err(err(format!(
            "image size {size} is smaller than the kernel {k}"
        )));
    }
    let kernel = kernel_values(omega, theta, psi, sigma, k).map_err(err)?;
    let image = grating(size, grating_omega, grating_theta);
    let response = response_map(&image, size, &kernel, k).map_err(err)?;
    let side = size - k + 1;
    let pad = (size - side) / 2;
    let left = normalize_slice(&image);
    let right = normalize_slice(&response);
    let width = 2 * size + 4;
    let mut gray = vec![255u8; width * size];
    for y in 0..size {
        for x in 0..size {
            gray[y * width + x] = left[y * size + x];
        }
    }
    for y in 0..side {
        for x in 0..side {
            gray[(y + pad) * width + size + 4 + pad + x] = right[y * side + x];
        }
    }
    Ok(Picture::from_gray(width, size, &gray))
}

/// Root-mean-square response to gratings at `steps` orientations evenly
/// spread over `[0, π)`.
pub fn tuning_values(
    p: &GaborParams,
    k: usize,
    grating_omega: f64,
    size: usize,
    steps: usize,
) -> Result<Vec<f64>, String> {
    let kernel = make_kernel(p, k).map_err(|e| e.to_string())?;
    (0..steps)
        .map(|i| {
            let theta = PI * i as f64 / steps as f64;
            let r = response_map(&grating(size, grating_omega, theta), size, &kernel, k)?;
            Ok((r.iter().map(|v| v * v).sum::<f64>() / r.len() as f64).sqrt())
        })
        .collect()
}

/// Orientation tuning curve of the kernel at the grating frequency.
#[wasm_bindgen(js_name = orientationTuning)]
#[allow(clippy::too_many_arguments)]
pub fn orientation_tuning(
    omega: f64,
    theta: f64,
    psi: f64,
    sigma: f64,
    k: usize,
    grating_omega: f64,
    size: usize,
    steps: usize,
) -> Result<Vec<f64>, JsError> {
    let p = params(omega, theta, psi, sigma).map_err(|e| JsError::new(&e))?;
    if size < k || steps == 0 {
        return Err(JsError::new("need size >= k and at least one step"));
    }
    tuning_values(&p, k, grating_omega, size, steps).map_err(|e| JsError::new(&e))
}
