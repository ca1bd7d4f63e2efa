//! Gabor filter bank features.
//!
//! Each image is convolved with every kernel of a bank to produce edge maps;
//! the magnitudes of each map are histogrammed and the per-filter histograms
//! are concatenated into one feature vector. All kernels have their DC
//! component removed so constant regions produce zero response.

use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::ImagePatch;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaborParams {
    /// Wavelength λ of the cosine carrier, in pixels.
    pub wavelength_px: f64,
    /// Orientation θ of the carrier, in radians.
    pub orientation_rad: f64,
    /// Gaussian envelope σ, in pixels.
    pub sigma_px: f64,
    /// Spatial aspect ratio γ.
    pub aspect: f64,
    /// Phase offset ψ, in radians.
    pub phase_rad: f64,
    /// Kernel half-width h; the kernel is (2h+1) × (2h+1).
    pub half_width: usize,
}

impl GaborParams {
    fn validate(&self) -> Result<()> {
        let finite = self.wavelength_px.is_finite()
            && self.orientation_rad.is_finite()
            && self.sigma_px.is_finite()
            && self.aspect.is_finite()
            && self.phase_rad.is_finite();
        if !finite {
            return Err(Error::InvalidArgument(
                "gabor parameter is not finite".to_string(),
            ));
        }
        if !(self.wavelength_px > 0.0 && self.sigma_px > 0.0 && self.aspect > 0.0) {
            return Err(Error::InvalidArgument(
                "gabor wavelength, sigma and aspect must be > 0".to_string(),
            ));
        }
        if self.half_width < 1 {
            return Err(Error::InvalidArgument(
                "gabor half_width must be >= 1".to_string(),
            ));
        }
        Ok(())
    }
}

/// An ordered bank of zero-mean Gabor kernels. Kernel order is the canonical
/// feature-block order.
#[derive(Debug, Clone)]
pub struct GaborBank {
    pub kernels: Vec<Array2<f64>>,
    pub params: Vec<GaborParams>,
}

impl GaborBank {
    pub fn len(&self) -> usize {
        self.kernels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kernels.is_empty()
    }
}

/// Concatenated per-filter activation histograms.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub filters: usize,
    pub bins: usize,
}

impl FeatureVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Histogram block for filter `i`.
    pub fn block(&self, i: usize) -> &[f64] {
        &self.values[i * self.bins..(i + 1) * self.bins]
    }
}

/// Sample one Gabor kernel on the integer grid [-h, h]² and remove its mean.
fn gabor_kernel(p: &GaborParams) -> Array2<f64> {
    let h = p.half_width as isize;
    let n = (2 * h + 1) as usize;
    let (sin_t, cos_t) = p.orientation_rad.sin_cos();
    let two_sigma_sq = 2.0 * p.sigma_px * p.sigma_px;
    let gamma_sq = p.aspect * p.aspect;
    let omega = 2.0 * std::f64::consts::PI / p.wavelength_px;

    let mut kernel = Array2::zeros((n, n));
    for y in -h..=h {
        for x in -h..=h {
            let (xf, yf) = (x as f64, y as f64);
            let xr = xf * cos_t + yf * sin_t;
            let yr = -xf * sin_t + yf * cos_t;
            let envelope = (-(xr * xr + gamma_sq * yr * yr) / two_sigma_sq).exp();
            let carrier = (omega * xr + p.phase_rad).cos();
            kernel[[(y + h) as usize, (x + h) as usize]] = envelope * carrier;
        }
    }
    let mean = kernel.sum() / (n * n) as f64;
    kernel.mapv_inplace(|v| v - mean);
    kernel
}

/// Build a bank from an ordered parameter list.
pub fn build_gabor_bank(param_list: &[GaborParams]) -> Result<GaborBank> {
    if param_list.is_empty() {
        return Err(Error::EmptyInput("gabor parameter list".to_string()));
    }
    for p in param_list {
        p.validate()?;
    }
    let kernels = param_list.iter().map(gabor_kernel).collect();
    Ok(GaborBank {
        kernels,
        params: param_list.to_vec(),
    })
}

/// Default bank: wavelengths {4, 8} px (outer) × orientations
/// {0, π/4, π/2, 3π/4} (inner), σ = 0.56 λ, γ = 0.5, ψ = 0, h = ⌈2σ⌉ + 1.
pub fn default_bank_params() -> Vec<GaborParams> {
    let mut params = Vec::new();
    for &wavelength in &[4.0f64, 8.0] {
        for k in 0..4 {
            let sigma = 0.56 * wavelength;
            params.push(GaborParams {
                wavelength_px: wavelength,
                orientation_rad: k as f64 * std::f64::consts::FRAC_PI_4,
                sigma_px: sigma,
                aspect: 0.5,
                phase_rad: 0.0,
                half_width: (2.0 * sigma).ceil() as usize + 1,
            });
        }
    }
    params
}

/// Default number of histogram bins per filter.
pub const DEFAULT_BINS: usize = 32;

fn reflect_index(mut t: isize, n: isize) -> usize {
    // Mirror about pixel centers without repeating the edge sample.
    loop {
        if t < 0 {
            t = -t;
        } else if t >= n {
            t = 2 * (n - 1) - t;
        } else {
            return t as usize;
        }
    }
}

/// Same-size 2-D cross-correlation with mirrored boundary padding.
pub fn edge_map(image: &ImagePatch, kernel: &Array2<f64>) -> Result<Array2<f64>> {
    let (img_h, img_w) = image.pixels.dim();
    let (k_h, k_w) = kernel.dim();
    if k_h >= img_h || k_w >= img_w {
        return Err(Error::ShapeMismatch(format!(
            "kernel {k_h}x{k_w} must be smaller than image {img_h}x{img_w}"
        )));
    }
    let (h_y, h_x) = ((k_h / 2) as isize, (k_w / 2) as isize);
    let src = &image.pixels;
    let mut out = Array2::zeros((img_h, img_w));
    for i in 0..img_h {
        for j in 0..img_w {
            let mut acc = 0.0;
            for ky in 0..k_h {
                let yy = reflect_index(i as isize + ky as isize - h_y, img_h as isize);
                for kx in 0..k_w {
                    let xx = reflect_index(j as isize + kx as isize - h_x, img_w as isize);
                    acc += src[[yy, xx]] * kernel[[ky, kx]];
                }
            }
            out[[i, j]] = acc;
        }
    }
    Ok(out)
}

/// Histogram of response magnitudes, max-normalized to [0, 1], `bins`
/// equal-width bins with the top edge falling in the last bin, counts
/// normalized to sum 1. An all-zero response puts all mass in bin 0.
pub fn activation_histogram(response: &Array2<f64>, bins: usize) -> Result<Vec<f64>> {
    if bins < 2 {
        return Err(Error::InvalidArgument(format!(
            "histogram needs at least 2 bins, got {bins}"
        )));
    }
    if response.is_empty() {
        return Err(Error::EmptyInput("histogram response".to_string()));
    }
    let max_mag = response.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    let mut hist = vec![0.0; bins];
    if max_mag == 0.0 {
        hist[0] = 1.0;
        return Ok(hist);
    }
    for &v in response.iter() {
        let scaled = v.abs() / max_mag;
        let bin = ((scaled * bins as f64) as usize).min(bins - 1);
        hist[bin] += 1.0;
    }
    let total = response.len() as f64;
    for h in &mut hist {
        *h /= total;
    }
    Ok(hist)
}

/// Concatenate the activation histograms of all bank filters, in bank order.
pub fn feature_vector(image: &ImagePatch, bank: &GaborBank, bins: usize) -> Result<FeatureVector> {
    if bank.is_empty() {
        return Err(Error::EmptyInput("gabor bank".to_string()));
    }
    let mut values = Vec::with_capacity(bank.len() * bins);
    for kernel in &bank.kernels {
        let response = edge_map(image, kernel)?;
        values.extend(activation_histogram(&response, bins)?);
    }
    Ok(FeatureVector {
        values,
        filters: bank.len(),
        bins,
    })
}

/// Feature extraction over a corpus: a deterministic parallel map. Output
/// order follows input order regardless of worker count.
pub fn feature_vectors(
    patches: &[(u64, ImagePatch)],
    bank: &GaborBank,
    bins: usize,
) -> Result<Vec<(u64, FeatureVector)>> {
    patches
        .par_iter()
        .map(|(id, patch)| feature_vector(patch, bank, bins).map(|fv| (*id, fv)))
        .collect()
}

/// JSON sidecar describing how a feature cache was produced. A cache is only
/// valid for readers requesting the identical configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureCacheHeader {
    pub bank: Vec<GaborParams>,
    pub bins: usize,
}

/// Sidecar path for a feature cache CSV: same stem, `.json`.
pub fn cache_header_path(cache_path: &Path) -> PathBuf {
    cache_path.with_extension("json")
}

/// Write a feature cache: CSV `id,f_0,...,f_{FB-1}` plus the JSON header.
pub fn write_feature_cache(
    path: &Path,
    header: &FeatureCacheHeader,
    rows: &[(u64, FeatureVector)],
) -> Result<()> {
    let width = header.bank.len() * header.bins;
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut head = String::from("id");
    for i in 0..width {
        head.push_str(&format!(",f_{i}"));
    }
    writeln!(w, "{head}").map_err(|e| Error::io(path, e))?;
    for (id, fv) in rows {
        if fv.values.len() != width {
            return Err(Error::LengthMismatch {
                left: fv.values.len(),
                right: width,
            });
        }
        write!(w, "{id}").map_err(|e| Error::io(path, e))?;
        for v in &fv.values {
            write!(w, ",{v}").map_err(|e| Error::io(path, e))?;
        }
        writeln!(w).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;

    let header_path = cache_header_path(path);
    let json = serde_json::to_string_pretty(header).expect("header serializes");
    std::fs::write(&header_path, json).map_err(|e| Error::io(&header_path, e))?;
    Ok(())
}

/// Read a feature cache, verifying the header matches `expected` exactly.
pub fn read_feature_cache(
    path: &Path,
    expected: &FeatureCacheHeader,
) -> Result<Vec<(u64, FeatureVector)>> {
    let header_path = cache_header_path(path);
    let text = std::fs::read_to_string(&header_path).map_err(|e| Error::io(&header_path, e))?;
    let found: FeatureCacheHeader =
        serde_json::from_str(&text).map_err(|e| Error::CacheMismatch {
            path: header_path.clone(),
            message: format!("unreadable header: {e}"),
        })?;
    if &found != expected {
        return Err(Error::CacheMismatch {
            path: path.to_path_buf(),
            message: "cache was built with different bank parameters or bin count".to_string(),
        });
    }

    let width = expected.bank.len() * expected.bins;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Csv {
            path: path.to_path_buf(),
            source: e,
        })?;
    let mut rows = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row.map_err(|e| Error::Csv {
            path: path.to_path_buf(),
            source: e,
        })?;
        if row.len() != width + 1 {
            return Err(Error::CacheMismatch {
                path: path.to_path_buf(),
                message: format!("row {} has {} fields, expected {}", i + 2, row.len(), width + 1),
            });
        }
        let id: u64 = row[0].parse().map_err(|_| Error::CacheMismatch {
            path: path.to_path_buf(),
            message: format!("row {}: bad id `{}`", i + 2, &row[0]),
        })?;
        let mut values = Vec::with_capacity(width);
        for f in row.iter().skip(1) {
            let v: f64 = f.parse().map_err(|_| Error::CacheMismatch {
                path: path.to_path_buf(),
                message: format!("row {}: bad value `{f}`", i + 2),
            })?;
            values.push(v);
        }
        rows.push((
            id,
            FeatureVector {
                values,
                filters: expected.bank.len(),
                bins: expected.bins,
            },
        ));
    }
    Ok(rows)
}
