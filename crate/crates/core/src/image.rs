//! Image planes, YCbCr conversion and file IO.
//!
//! All super-resolution and scoring happens on the luma plane; the chroma
//! planes only ride along so a colour image can be written back out.

use std::path::Path;

use image::{DynamicImage, GrayImage, ImageBuffer, Rgb, RgbImage};

use crate::error::{Error, Result};

/// A single channel of real-valued intensities, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePlane {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl ImagePlane {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Dimension(format!(
                "plane data has {} values, expected {}x{} = {}",
                data.len(),
                width,
                height,
                width * height
            )));
        }
        if width == 0 || height == 0 {
            return Err(Error::Dimension("plane must be non-empty".into()));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        assert!(width > 0 && height > 0, "plane must be non-empty");
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(width > 0 && height > 0, "plane must be non-empty");
        let mut data = Vec::with_capacity(width * height);
        for row in 0..height {
            for col in 0..width {
                data.push(f(row, col));
            }
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.width + col] = value;
    }

    pub fn same_shape(&self, other: &ImagePlane) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn clamp_to_range(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 255.0);
        }
    }

    pub fn clamped(mut self) -> Self {
        self.clamp_to_range();
        self
    }

    /// Top-left `width x height` window.
    pub fn crop(&self, width: usize, height: usize) -> Result<ImagePlane> {
        if width > self.width || height > self.height || width == 0 || height == 0 {
            return Err(Error::Dimension(format!(
                "cannot crop {}x{} plane to {}x{}",
                self.width, self.height, width, height
            )));
        }
        Ok(ImagePlane::from_fn(width, height, |r, c| self.get(r, c)))
    }

    /// Drops trailing rows/columns so both dimensions divide `ratio`.
    pub fn crop_to_multiple(&self, ratio: usize) -> Result<ImagePlane> {
        let (w, h) = cropped_dims(self.width, self.height, ratio)?;
        if w == self.width && h == self.height {
            return Ok(self.clone());
        }
        self.crop(w, h)
    }
}

fn cropped_dims(width: usize, height: usize, ratio: usize) -> Result<(usize, usize)> {
    if ratio == 0 {
        return Err(Error::InvalidParameter("ratio must be positive".into()));
    }
    let w = width - width % ratio;
    let h = height - height % ratio;
    if w == 0 || h == 0 {
        return Err(Error::Dimension(format!(
            "{width}x{height} image is smaller than ratio {ratio}"
        )));
    }
    Ok((w, h))
}

/// Luma plus two chroma planes sharing one shape.
#[derive(Debug, Clone, PartialEq)]
pub struct YCbCrImage {
    pub y: ImagePlane,
    pub cb: ImagePlane,
    pub cr: ImagePlane,
}

impl YCbCrImage {
    pub fn new(y: ImagePlane, cb: ImagePlane, cr: ImagePlane) -> Result<Self> {
        if !y.same_shape(&cb) || !y.same_shape(&cr) {
            return Err(Error::Dimension("YCbCr planes differ in shape".into()));
        }
        Ok(Self { y, cb, cr })
    }

    /// Grayscale image: chroma fixed at the neutral value 128.
    pub fn from_luma(y: ImagePlane) -> Self {
        let cb = ImagePlane::filled(y.width(), y.height(), 128.0);
        let cr = cb.clone();
        Self { y, cb, cr }
    }

    pub fn width(&self) -> usize {
        self.y.width()
    }

    pub fn height(&self) -> usize {
        self.y.height()
    }

    pub fn crop_to_multiple(&self, ratio: usize) -> Result<Self> {
        Ok(Self {
            y: self.y.crop_to_multiple(ratio)?,
            cb: self.cb.crop_to_multiple(ratio)?,
            cr: self.cr.crop_to_multiple(ratio)?,
        })
    }

    pub fn is_neutral_chroma(&self) -> bool {
        self.cb.data().iter().all(|&v| v == 128.0) && self.cr.data().iter().all(|&v| v == 128.0)
    }
}

const RGB_TO_YCBCR: [[f64; 3]; 3] = [
    [0.299, 0.587, 0.114],
    [-0.168736, -0.331264, 0.5],
    [0.5, -0.418688, -0.081312],
];

pub fn rgb_to_ycbcr(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let m = &RGB_TO_YCBCR;
    (
        m[0][0] * r + m[0][1] * g + m[0][2] * b,
        128.0 + m[1][0] * r + m[1][1] * g + m[1][2] * b,
        128.0 + m[2][0] * r + m[2][1] * g + m[2][2] * b,
    )
}

fn invert3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let cof = |r0: usize, r1: usize, c0: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
    let det = m[0][0] * cof(1, 2, 1, 2) - m[0][1] * cof(1, 2, 0, 2) + m[0][2] * cof(1, 2, 0, 1);
    let adj = [
        [cof(1, 2, 1, 2), -cof(0, 2, 1, 2), cof(0, 1, 1, 2)],
        [-cof(1, 2, 0, 2), cof(0, 2, 0, 2), -cof(0, 1, 0, 2)],
        [cof(1, 2, 0, 1), -cof(0, 2, 0, 1), cof(0, 1, 0, 1)],
    ];
    let mut out = [[0.0; 3]; 3];
    for (r, row) in adj.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            out[r][c] = v / det;
        }
    }
    out
}

/// Exact algebraic inverse of [`rgb_to_ycbcr`]; no rounding.
pub fn ycbcr_to_rgb(y: f64, cb: f64, cr: f64) -> (f64, f64, f64) {
    let inv = invert3(&RGB_TO_YCBCR);
    let v = [y, cb - 128.0, cr - 128.0];
    let row = |r: usize| inv[r][0] * v[0] + inv[r][1] * v[1] + inv[r][2] * v[2];
    (row(0), row(1), row(2))
}

/// Final pixel quantization: round half up, then clamp.
pub fn quantize(v: f64) -> u8 {
    (v + 0.5).floor().clamp(0.0, 255.0) as u8
}

pub fn load_image(path: impl AsRef<Path>) -> Result<YCbCrImage> {
    let path = path.as_ref();
    let decoded = image::open(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    from_dynamic(decoded, path)
}

fn from_dynamic(img: DynamicImage, path: &Path) -> Result<YCbCrImage> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        DynamicImage::ImageLuma8(buf) => {
            let y = ImagePlane::new(w, h, buf.into_raw().into_iter().map(f64::from).collect())?;
            Ok(YCbCrImage::from_luma(y))
        }
        DynamicImage::ImageLumaA8(_) => {
            let buf = img.to_luma8();
            let y = ImagePlane::new(w, h, buf.into_raw().into_iter().map(f64::from).collect())?;
            Ok(YCbCrImage::from_luma(y))
        }
        DynamicImage::ImageRgb8(_) | DynamicImage::ImageRgba8(_) => {
            let rgb = img.to_rgb8();
            let mut ys = Vec::with_capacity(w * h);
            let mut cbs = Vec::with_capacity(w * h);
            let mut crs = Vec::with_capacity(w * h);
            for p in rgb.pixels() {
                let (y, cb, cr) = rgb_to_ycbcr(p[0] as f64, p[1] as f64, p[2] as f64);
                ys.push(y);
                cbs.push(cb);
                crs.push(cr);
            }
            YCbCrImage::new(
                ImagePlane::new(w, h, ys)?,
                ImagePlane::new(w, h, cbs)?,
                ImagePlane::new(w, h, crs)?,
            )
        }
        other => Err(Error::UnsupportedFormat {
            path: path.to_path_buf(),
            format: format!("{:?}", other.color()),
        }),
    }
}

fn is_pgm(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| e.eq_ignore_ascii_case("pgm"))
        .unwrap_or(false)
}

/// Writes PNG/BMP as RGB and PGM as the luma plane alone.
pub fn save_image(img: &YCbCrImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (w, h) = (img.width() as u32, img.height() as u32);
    let encode_err = |e: image::ImageError| Error::Encode {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    if is_pgm(path) {
        return save_plane(&img.y, path);
    }
    let mut buf: RgbImage = ImageBuffer::new(w, h);
    for (idx, px) in buf.pixels_mut().enumerate() {
        let (r, g, b) = ycbcr_to_rgb(img.y.data()[idx], img.cb.data()[idx], img.cr.data()[idx]);
        *px = Rgb([quantize(r), quantize(g), quantize(b)]);
    }
    buf.save(path).map_err(encode_err)
}

pub fn save_plane(plane: &ImagePlane, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let raw: Vec<u8> = plane.data().iter().map(|&v| quantize(v)).collect();
    let buf =
        GrayImage::from_raw(plane.width() as u32, plane.height() as u32, raw).expect("buffer length matches plane");
    buf.save(path).map_err(|e| Error::Encode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}
