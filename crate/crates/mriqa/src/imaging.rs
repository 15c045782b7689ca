//! Pixel-level substrate: 8-bit sRGB images, PNG I/O, paired random crops,
//! flips and block mean-absolute-error.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Interleaved 8-bit sRGB raster, row-major, always 3 channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

pub const CHANNELS: usize = 3;

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Size(format!("empty image {width}x{height}")));
        }
        if data.len() != width * height * CHANNELS {
            return Err(Error::DimensionMismatch(format!(
                "image data length {} != {width}x{height}x3",
                data.len()
            )));
        }
        Ok(Image {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * CHANNELS);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Image {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let o = (y * self.width + x) * CHANNELS;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let o = (y * self.width + x) * CHANNELS;
        self.data[o..o + 3].copy_from_slice(&rgb);
    }

    /// Copy the `w x h` rectangle at `(x, y)` out of this image.
    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<Image> {
        if x + w > self.width || y + h > self.height {
            return Err(Error::Size(format!(
                "crop {w}x{h}@({x},{y}) exceeds {}x{}",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(w * h * CHANNELS);
        for row in y..y + h {
            let start = (row * self.width + x) * CHANNELS;
            data.extend_from_slice(&self.data[start..start + w * CHANNELS]);
        }
        Image::new(w, h, data)
    }

    /// Normalized floating view (sample / 255).
    pub fn to_float(&self) -> FloatBlock {
        FloatBlock {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| v as f64 / 255.0).collect(),
        }
    }
}

/// A crop taken from a larger image; remembers where it came from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Patch {
    pub image: Image,
    /// (x, y) offset of this patch in the source image.
    pub origin: (usize, usize),
}

impl Patch {
    pub fn width(&self) -> usize {
        self.image.width
    }
    pub fn height(&self) -> usize {
        self.image.height
    }
}

/// 64-bit float view with samples in [0, 1], same layout as [`Image`].
#[derive(Clone, Debug, PartialEq)]
pub struct FloatBlock {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl FloatBlock {
    pub fn to_image(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
                .collect(),
        }
    }
}

/// Decode an 8-bit PNG. RGB is taken as-is, RGBA drops alpha, grayscale is
/// replicated to 3 channels; palette images are expanded. 16-bit files are
/// rejected.
pub fn load_png(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(file);
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Format(format!(
            "{}: only 8-bit PNG is supported, got {:?}",
            path.display(),
            info.bit_depth
        )));
    }
    buf.truncate(info.buffer_size());
    let (w, h) = (info.width as usize, info.height as usize);
    let data = match info.color_type {
        png::ColorType::Rgb => buf,
        png::ColorType::Rgba => buf
            .chunks_exact(4)
            .flat_map(|p| [p[0], p[1], p[2]])
            .collect(),
        png::ColorType::Grayscale => buf.iter().flat_map(|&v| [v, v, v]).collect(),
        png::ColorType::GrayscaleAlpha => buf
            .chunks_exact(2)
            .flat_map(|p| [p[0], p[0], p[0]])
            .collect(),
        other => {
            return Err(Error::Format(format!(
                "{}: unsupported color type {other:?}",
                path.display()
            )))
        }
    };
    Image::new(w, h, data)
}

/// Encode as 8-bit RGB PNG. Exact inverse of [`load_png`] for any [`Image`].
pub fn save_png(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), img.width as u32, img.height as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder
        .write_header()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    writer
        .write_image_data(&img.data)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    Ok(())
}

/// Encode a single-channel 8-bit grayscale PNG (mask sidecars).
pub fn save_gray_png(data: &[u8], width: usize, height: usize, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if data.len() != width * height {
        return Err(Error::DimensionMismatch(format!(
            "gray data length {} != {width}x{height}",
            data.len()
        )));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder
        .write_header()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    writer
        .write_image_data(data)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    Ok(())
}

/// Crop the same `wp x hp` window out of a distorted/reference pair. The
/// origin is drawn uniformly over valid positions (x first, then y) and shared
/// by both patches so downstream per-position comparison stays meaningful.
pub fn random_crop_pair(
    dist: &Image,
    reference: &Image,
    wp: usize,
    hp: usize,
    rng: &mut Rng,
) -> Result<(Patch, Patch)> {
    if dist.width != reference.width || dist.height != reference.height {
        return Err(Error::DimensionMismatch(format!(
            "distorted {}x{} vs reference {}x{}",
            dist.width, dist.height, reference.width, reference.height
        )));
    }
    if wp == 0 || hp == 0 || wp % 64 != 0 || hp % 64 != 0 {
        return Err(Error::Size(format!(
            "crop {wp}x{hp} must be positive multiples of 64"
        )));
    }
    if wp > dist.width || hp > dist.height {
        return Err(Error::Size(format!(
            "crop {wp}x{hp} exceeds image {}x{}",
            dist.width, dist.height
        )));
    }
    let x = rng.gen_range((dist.width - wp + 1) as u64) as usize;
    let y = rng.gen_range((dist.height - hp + 1) as u64) as usize;
    let a = Patch {
        image: dist.crop(x, y, wp, hp)?,
        origin: (x, y),
    };
    let b = Patch {
        image: reference.crop(x, y, wp, hp)?,
        origin: (x, y),
    };
    Ok((a, b))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlipAxis {
    Horizontal,
    Vertical,
}

/// Mirrored copy; an involution.
pub fn flip(img: &Image, axis: FlipAxis) -> Image {
    let mut out = img.clone();
    match axis {
        FlipAxis::Horizontal => {
            for y in 0..img.height {
                for x in 0..img.width {
                    out.set_pixel(x, y, img.pixel(img.width - 1 - x, y));
                }
            }
        }
        FlipAxis::Vertical => {
            for y in 0..img.height {
                for x in 0..img.width {
                    out.set_pixel(x, y, img.pixel(x, img.height - 1 - y));
                }
            }
        }
    }
    out
}

/// Mean absolute error over all samples of two equally shaped blocks.
pub fn block_mae(a: &FloatBlock, b: &FloatBlock) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::DimensionMismatch(format!(
            "block {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    let n = a.data.len();
    let sum: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| (x - y).abs())
        .sum();
    Ok(sum / n as f64)
}

/// Grow an image to at least `min_w x min_h` by reflecting rows/columns at the
/// right and bottom edges (no artificial constant borders). Identity when the
/// image is already large enough.
pub fn reflect_pad_to(img: &Image, min_w: usize, min_h: usize) -> Image {
    if img.width >= min_w && img.height >= min_h {
        return img.clone();
    }
    let w = img.width.max(min_w);
    let h = img.height.max(min_h);
    let mut out = Image::filled(w, h, [0, 0, 0]);
    for y in 0..h {
        let sy = mirror_index(y, img.height);
        for x in 0..w {
            let sx = mirror_index(x, img.width);
            out.set_pixel(x, y, img.pixel(sx, sy));
        }
    }
    out
}

/// Reflect `i` into `0..n` without repeating the edge sample (n > 1), i.e.
/// 0,1,...,n-1,n-2,n-3,...
fn mirror_index(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

/// Bilinear resize (half-pixel centers). Used by the pipeline variant that
/// replaces grid sampling with a plain resize to the input size.
pub fn resize_bilinear(img: &Image, out_w: usize, out_h: usize) -> Image {
    let mut out = Image::filled(out_w, out_h, [0, 0, 0]);
    let sx = img.width as f64 / out_w as f64;
    let sy = img.height as f64 / out_h as f64;
    for y in 0..out_h {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (img.height - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(img.height - 1);
        let wy = fy - y0 as f64;
        for x in 0..out_w {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (img.width - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(img.width - 1);
            let wx = fx - x0 as f64;
            let mut rgb = [0u8; 3];
            for c in 0..3 {
                let p00 = img.pixel(x0, y0)[c] as f64;
                let p10 = img.pixel(x1, y0)[c] as f64;
                let p01 = img.pixel(x0, y1)[c] as f64;
                let p11 = img.pixel(x1, y1)[c] as f64;
                let top = p00 + wx * (p10 - p00);
                let bot = p01 + wx * (p11 - p01);
                rgb[c] = (top + wy * (bot - top)).round().clamp(0.0, 255.0) as u8;
            }
            out.set_pixel(x, y, rgb);
        }
    }
    out
}
