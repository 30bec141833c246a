//! Patch extraction, overlap-averaging reassembly and coupled HR/LR patch
//! construction.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::image::ImagePlane;
use crate::resample::{downsample, resize_bicubic};

/// Column-stacked patches (column-major: column `i` is `data[i*dim..(i+1)*dim]`).
#[derive(Debug, Clone, PartialEq)]
pub struct PatchMatrix {
    dim: usize,
    data: Vec<f64>,
    coords: Vec<(usize, usize)>,
    patch_size: usize,
    stride: usize,
}

impl PatchMatrix {
    pub fn new(
        dim: usize,
        data: Vec<f64>,
        coords: Vec<(usize, usize)>,
        patch_size: usize,
        stride: usize,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Dimension("patch dimension must be positive".into()));
        }
        if data.len() != dim * coords.len() {
            return Err(Error::Dimension(format!(
                "{} values cannot hold {} columns of length {}",
                data.len(),
                coords.len(),
                dim
            )));
        }
        Ok(Self {
            dim,
            data,
            coords,
            patch_size,
            stride,
        })
    }

    /// Columns without image provenance (synthetic data); coords are all (0, 0).
    pub fn from_columns(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(Error::Dimension(format!(
                "{} values do not split into columns of {}",
                data.len(),
                dim
            )));
        }
        let count = data.len() / dim;
        Self::new(dim, data, vec![(0, 0); count], 0, 0)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn coords(&self) -> &[(usize, usize)] {
        &self.coords
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn column(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn column_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn columns(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    /// Columns at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> PatchMatrix {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        let mut coords = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.column(i));
            coords.push(self.coords[i]);
        }
        PatchMatrix {
            dim: self.dim,
            data,
            coords,
            patch_size: self.patch_size,
            stride: self.stride,
        }
    }

    /// Contiguous range of columns.
    pub fn slice(&self, range: std::ops::Range<usize>) -> PatchMatrix {
        PatchMatrix {
            dim: self.dim,
            data: self.data[range.start * self.dim..range.end * self.dim].to_vec(),
            coords: self.coords[range].to_vec(),
            patch_size: self.patch_size,
            stride: self.stride,
        }
    }

    /// Uniform subsample without replacement; keeps everything when `max >= count`.
    pub fn subsample<R: Rng + ?Sized>(&self, max: usize, rng: &mut R) -> PatchMatrix {
        if max >= self.count() {
            return self.clone();
        }
        let mut idx = sample(rng, self.count(), max).into_vec();
        idx.sort_unstable();
        self.select(&idx)
    }

    /// Appends the columns of `other`.
    pub fn extend(&mut self, other: &PatchMatrix) -> Result<()> {
        if other.dim != self.dim {
            return Err(Error::Dimension(format!(
                "cannot append {}-row patches to {}-row patches",
                other.dim, self.dim
            )));
        }
        self.data.extend_from_slice(&other.data);
        self.coords.extend_from_slice(&other.coords);
        Ok(())
    }

    /// Rows `rows` of every column (e.g. the LR or HR half of coupled patches).
    pub fn rows(&self, rows: std::ops::Range<usize>) -> PatchMatrix {
        let dim = rows.len();
        let mut data = Vec::with_capacity(dim * self.count());
        for col in self.columns() {
            data.extend_from_slice(&col[rows.clone()]);
        }
        PatchMatrix {
            dim,
            data,
            coords: self.coords.clone(),
            patch_size: self.patch_size,
            stride: self.stride,
        }
    }

    /// Subtracts each column's mean and returns the means.
    pub fn center_columns(&mut self) -> Vec<f64> {
        let dim = self.dim;
        self.data
            .chunks_exact_mut(dim)
            .map(|col| {
                let mean = col.iter().sum::<f64>() / dim as f64;
                col.iter_mut().for_each(|v| *v -= mean);
                mean
            })
            .collect()
    }
}

/// Top-left offsets along one axis: the regular grid plus, if the grid stops
/// short, one extra offset flush with the far edge.
pub fn grid_offsets(len: usize, patch_size: usize, stride: usize) -> Vec<usize> {
    let last = len - patch_size;
    let mut offsets: Vec<usize> = (0..=last).step_by(stride).collect();
    if *offsets.last().expect("at least offset 0") != last {
        offsets.push(last);
    }
    offsets
}

fn check_patch_geometry(plane: &ImagePlane, patch_size: usize, stride: usize) -> Result<()> {
    if patch_size == 0 || stride == 0 {
        return Err(Error::InvalidParameter("patch size and stride must be positive".into()));
    }
    if patch_size > plane.width().min(plane.height()) {
        return Err(Error::InvalidParameter(format!(
            "patch size {} exceeds image {}x{}",
            patch_size,
            plane.width(),
            plane.height()
        )));
    }
    Ok(())
}

fn copy_patch(plane: &ImagePlane, row: usize, col: usize, patch_size: usize, out: &mut Vec<f64>) {
    let w = plane.width();
    for r in row..row + patch_size {
        out.extend_from_slice(&plane.data()[r * w + col..r * w + col + patch_size]);
    }
}

/// Single-scale patches, raveled row-major, uncentered.
pub fn extract_patches(plane: &ImagePlane, patch_size: usize, stride: usize) -> Result<PatchMatrix> {
    check_patch_geometry(plane, patch_size, stride)?;
    let rows = grid_offsets(plane.height(), patch_size, stride);
    let cols = grid_offsets(plane.width(), patch_size, stride);
    let dim = patch_size * patch_size;
    let mut data = Vec::with_capacity(dim * rows.len() * cols.len());
    let mut coords = Vec::with_capacity(rows.len() * cols.len());
    for &r in &rows {
        for &c in &cols {
            copy_patch(plane, r, c, patch_size, &mut data);
            coords.push((r, c));
        }
    }
    PatchMatrix::new(dim, data, coords, patch_size, stride)
}

/// Pixel-wise mean of all overlapping patches; clamps only at the end.
/// The mean is accumulated incrementally, so agreeing patches reproduce
/// their common value exactly.
pub fn reassemble(patches: &PatchMatrix, width: usize, height: usize) -> Result<ImagePlane> {
    let ps = patches.patch_size();
    if ps * ps != patches.dim() {
        return Err(Error::Dimension(format!(
            "patch dim {} is not patch_size^2 = {}",
            patches.dim(),
            ps * ps
        )));
    }
    let mut mean = vec![0.0; width * height];
    let mut hits = vec![0u32; width * height];
    for (col, &(r0, c0)) in patches.columns().zip(patches.coords()) {
        if r0 + ps > height || c0 + ps > width {
            return Err(Error::Dimension(format!(
                "patch at ({r0}, {c0}) does not fit in {width}x{height}"
            )));
        }
        for dr in 0..ps {
            let base = (r0 + dr) * width + c0;
            for dc in 0..ps {
                let j = base + dc;
                hits[j] += 1;
                mean[j] += (col[dr * ps + dc] - mean[j]) / hits[j] as f64;
            }
        }
    }
    if let Some(idx) = hits.iter().position(|&n| n == 0) {
        return Err(Error::UncoveredPixel {
            row: idx / width,
            col: idx % width,
        });
    }
    Ok(ImagePlane::new(width, height, mean)?.clamped())
}

/// The interpolated LR companion of an HR plane: downsample then bicubic
/// upscale back to the HR grid.
pub fn interpolated_lr(hr: &ImagePlane, ratio: usize) -> Result<ImagePlane> {
    let small = downsample(hr, ratio)?;
    resize_bicubic(&small, hr.width(), hr.height())
}

/// Coupled training columns `(x_lr; x_hr)` from co-located patches, both
/// halves centered on the LR patch mean.
pub fn build_coupled_patches(hr: &ImagePlane, ratio: usize, patch_size: usize, stride: usize) -> Result<PatchMatrix> {
    check_patch_geometry(hr, patch_size, stride)?;
    let lr = interpolated_lr(hr, ratio)?;
    let lr_patches = extract_patches(&lr, patch_size, stride)?;
    let hr_patches = extract_patches(hr, patch_size, stride)?;
    let p = patch_size * patch_size;
    let mut data = Vec::with_capacity(2 * p * lr_patches.count());
    for (l, h) in lr_patches.columns().zip(hr_patches.columns()) {
        let mean = l.iter().sum::<f64>() / p as f64;
        data.extend(l.iter().map(|v| v - mean));
        data.extend(h.iter().map(|v| v - mean));
    }
    PatchMatrix::new(2 * p, data, lr_patches.coords().to_vec(), patch_size, stride)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(w: usize, h: usize) -> ImagePlane {
        ImagePlane::from_fn(w, h, |r, c| ((r * 7 + c * 3) % 256) as f64)
    }

    #[test]
    fn whole_image_patch() {
        let p = ramp(6, 6);
        let m = extract_patches(&p, 6, 3).unwrap();
        assert_eq!(m.count(), 1);
        assert_eq!(m.column(0), p.data());
    }

    #[test]
    fn non_overlapping_tiles() {
        let p = ramp(16, 16);
        let m = extract_patches(&p, 8, 8).unwrap();
        assert_eq!(m.count(), 4);
        assert_eq!(m.coords(), &[(0, 0), (0, 8), (8, 0), (8, 8)]);
        assert_eq!(reassemble(&m, 16, 16).unwrap(), p);
    }

    #[test]
    fn grid_count_matches_formula() {
        let p = ImagePlane::filled(100, 100, 3.0);
        let m = extract_patches(&p, 8, 4).unwrap();
        assert_eq!(m.count(), 24 * 24);
    }

    #[test]
    fn edge_offset_added_when_grid_falls_short() {
        assert_eq!(grid_offsets(11, 8, 2), vec![0, 2, 3]);
        assert_eq!(grid_offsets(12, 8, 2), vec![0, 2, 4]);
    }

    #[test]
    fn overlap_mean() {
        let a = vec![10.0; 4];
        let b = vec![20.0; 4];
        let m = PatchMatrix::new(4, [a, b].concat(), vec![(0, 0), (0, 0)], 2, 1).unwrap();
        let out = reassemble(&m, 2, 2).unwrap();
        assert!(out.data().iter().all(|&v| v == 15.0));
    }

    #[test]
    fn uncovered_pixel_is_named() {
        let m = PatchMatrix::new(4, vec![1.0; 4], vec![(0, 0)], 2, 2).unwrap();
        match reassemble(&m, 3, 2) {
            Err(Error::UncoveredPixel { row: 0, col: 2 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn coupled_shape_and_constant_zero() {
        let hr = ImagePlane::filled(8, 8, 77.0);
        let m = build_coupled_patches(&hr, 2, 8, 1).unwrap();
        assert_eq!(m.count(), 1);
        assert_eq!(m.dim(), 128);
        assert!(m.column(0).iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn coupled_halves_share_center() {
        let hr = ImagePlane::from_fn(16, 16, |r, c| (r * 13 + c * 5) as f64);
        let m = build_coupled_patches(&hr, 2, 4, 3).unwrap();
        let lr = interpolated_lr(&hr, 2).unwrap();
        let lr_p = extract_patches(&lr, 4, 3).unwrap();
        let hr_p = extract_patches(&hr, 4, 3).unwrap();
        for i in 0..m.count() {
            let mean = lr_p.column(i).iter().sum::<f64>() / 16.0;
            let col = m.column(i);
            for j in 0..16 {
                assert_eq!(col[j], lr_p.column(i)[j] - mean);
                assert_eq!(col[16 + j], hr_p.column(i)[j] - mean);
            }
            assert!(col[..16].iter().sum::<f64>().abs() < 1e-9);
        }
    }

    #[test]
    fn patch_larger_than_image_rejected() {
        assert!(extract_patches(&ImagePlane::filled(4, 4, 0.0), 5, 1).is_err());
    }
}
