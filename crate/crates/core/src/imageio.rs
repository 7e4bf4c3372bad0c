//! Binary PGM (P5) I/O and conversions between 8-bit images and unit-range
//! tensors.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("unsupported format: magic `{0}` (only binary P5 PGM is supported)")]
    UnsupportedFormat(String),
    #[error("unsupported maxval {0} (only 255 is supported)")]
    UnsupportedMaxval(u32),
    #[error("malformed PGM header: {0}")]
    MalformedHeader(String),
    #[error("truncated pixel data: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("expected a (1, 1, h, w) tensor, got {0:?}")]
    BadShape([usize; 4]),
    #[error("value {0} outside [0, 255] and clipping disabled")]
    OutOfRange(f64),
    #[error("image {width}x{height} has {len} pixels")]
    PixelCount {
        width: usize,
        height: usize,
        len: usize,
    },
    #[error("no images found in {0}")]
    EmptyDirectory(PathBuf),
    #[cfg(feature = "png")]
    #[error("{path}: {message}")]
    Decode { path: PathBuf, message: String },
}

/// 8-bit grayscale image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self, ImageError> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(ImageError::PixelCount {
                width,
                height,
                len: pixels.len(),
            });
        }
        Ok(GrayImage {
            width,
            height,
            pixels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }
}

/// Canonical encoding: `P5\n<w> <h>\n255\n` followed by the raw bytes.
pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderReader<'_> {
    /// Skip whitespace and `#` comments (which run to end of line).
    fn skip_separators(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' || c == b'\r' {
                        break;
                    }
                }
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<u32, ImageError> {
        self.skip_separators();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        let digits = std::str::from_utf8(&self.bytes[start..self.pos]).expect("ascii digits");
        digits
            .parse()
            .map_err(|_| ImageError::MalformedHeader(format!("missing or invalid {what}")))
    }
}

pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage, ImageError> {
    let magic = &bytes[..bytes.len().min(2)];
    if magic != b"P5" {
        return Err(ImageError::UnsupportedFormat(
            String::from_utf8_lossy(magic).into_owned(),
        ));
    }
    let mut r = HeaderReader { bytes, pos: 2 };
    if !r.bytes.get(2).is_some_and(|b| b.is_ascii_whitespace() || *b == b'#') {
        return Err(ImageError::MalformedHeader("no separator after magic".into()));
    }
    let width = r.number("width")? as usize;
    let height = r.number("height")? as usize;
    let maxval = r.number("maxval")?;
    if maxval != 255 {
        return Err(ImageError::UnsupportedMaxval(maxval));
    }
    // Exactly one whitespace byte separates maxval from the raster.
    if !r.bytes.get(r.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(ImageError::MalformedHeader("no separator after maxval".into()));
    }
    let data = &bytes[r.pos + 1..];
    let expected = width * height;
    if data.len() < expected {
        return Err(ImageError::Truncated {
            expected,
            found: data.len(),
        });
    }
    GrayImage::new(width, height, data[..expected].to_vec())
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<GrayImage, ImageError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| ImageError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_pgm(&bytes)
}

pub fn write_pgm(img: &GrayImage, path: impl AsRef<Path>) -> Result<(), ImageError> {
    let path = path.as_ref();
    fs::write(path, encode_pgm(img)).map_err(|source| ImageError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Read a grayscale image by extension. PGM is always supported; other
/// formats need the `png` feature and are converted with [`rgb_to_luma`].
pub fn read_image(path: impl AsRef<Path>) -> Result<GrayImage, ImageError> {
    let path = path.as_ref();
    if is_pgm(path) {
        return read_pgm(path);
    }
    #[cfg(feature = "png")]
    {
        let decoded = image::open(path).map_err(|e| ImageError::Decode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let rgb = decoded.to_rgb8();
        let pixels = rgb.pixels().map(|p| rgb_to_luma(p[0], p[1], p[2])).collect();
        GrayImage::new(rgb.width() as usize, rgb.height() as usize, pixels)
    }
    #[cfg(not(feature = "png"))]
    {
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
        Err(ImageError::UnsupportedFormat(ext.to_string()))
    }
}

fn is_pgm(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("pgm"))
}

fn is_supported(path: &Path) -> bool {
    if is_pgm(path) {
        return true;
    }
    #[cfg(feature = "png")]
    {
        path.extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "bmp" | "jpg" | "jpeg" | "tif" | "tiff"))
    }
    #[cfg(not(feature = "png"))]
    false
}

/// Image files of a directory, sorted lexicographically by file name.
pub fn list_images(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>, ImageError> {
    let dir = dir.as_ref();
    let io_err = |source| ImageError::Io {
        path: dir.to_path_buf(),
        source,
    };
    let mut paths = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err)? {
        let path = entry.map_err(io_err)?.path();
        if path.is_file() && is_supported(&path) {
            paths.push(path);
        }
    }
    if paths.is_empty() {
        return Err(ImageError::EmptyDirectory(dir.to_path_buf()));
    }
    paths.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    Ok(paths)
}

/// `(1, 1, h, w)` tensor with pixel values divided by 255.
pub fn to_unit<T: Scalar>(img: &GrayImage) -> Tensor<T> {
    let inv = T::of(1.0 / 255.0);
    let data = img.pixels.iter().map(|&p| T::of(p as f64) * inv).collect();
    Tensor::from_vec([1, 1, img.height, img.width], data).expect("pixel count matches")
}

/// Scale a `(1, 1, h, w)` unit-range tensor to bytes, rounding half away
/// from zero. Out-of-range values are clipped when `clip` is set and
/// rejected otherwise.
pub fn from_unit<T: Scalar>(t: &Tensor<T>, clip: bool) -> Result<GrayImage, ImageError> {
    let [n, c, h, w] = t.shape();
    if n != 1 || c != 1 || h == 0 || w == 0 {
        return Err(ImageError::BadShape(t.shape()));
    }
    let pixels = t
        .data()
        .iter()
        .map(|v| {
            let s = (v.as_f64() * 255.0).round();
            if (0.0..=255.0).contains(&s) {
                Ok(s as u8)
            } else if clip {
                // NaN maps to 0.
                Ok(s.clamp(0.0, 255.0) as u8)
            } else {
                Err(ImageError::OutOfRange(s))
            }
        })
        .collect::<Result<Vec<u8>, _>>()?;
    GrayImage::new(w, h, pixels)
}

/// BT.601 luma `0.299 r + 0.587 g + 0.114 b`, rounded half away from zero.
pub fn rgb_to_luma(r: u8, g: u8, b: u8) -> u8 {
    let milli = 299 * r as u32 + 587 * g as u32 + 114 * b as u32;
    ((milli + 500) / 1000) as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_header() {
        let img = GrayImage::new(3, 2, vec![0, 1, 2, 253, 254, 255]).unwrap();
        let bytes = encode_pgm(&img);
        assert_eq!(&bytes[..11], b"P5\n3 2\n255\n");
        assert_eq!(bytes.len(), 11 + 6);
        assert_eq!(decode_pgm(&bytes).unwrap(), img);
    }

    #[test]
    fn header_comments_and_whitespace() {
        let mut bytes = b"P5 # made by hand\n#another\n 2\t\n1 # c\n255\n".to_vec();
        bytes.extend_from_slice(&[7, 9]);
        let img = decode_pgm(&bytes).unwrap();
        assert_eq!((img.width(), img.height()), (2, 1));
        assert_eq!(img.pixels(), &[7, 9]);
        // A raster byte that looks like whitespace is still data.
        let mut bytes = b"P5\n1 1\n255\n".to_vec();
        bytes.push(b'\n');
        assert_eq!(decode_pgm(&bytes).unwrap().pixels(), &[b'\n']);
    }

    #[test]
    fn format_errors() {
        let ascii = b"P2\n2 2\n255\n0 1 2 3\n";
        match decode_pgm(ascii) {
            Err(ImageError::UnsupportedFormat(m)) => assert_eq!(m, "P2"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            decode_pgm(b"P5\n1 1\n65535\n\0\0"),
            Err(ImageError::UnsupportedMaxval(65535))
        ));
        assert!(matches!(
            decode_pgm(b"P5\n4 4\n255\n\0\0\0"),
            Err(ImageError::Truncated { expected: 16, found: 3 })
        ));
        assert!(matches!(decode_pgm(b"P5\nx 4\n255\n"), Err(ImageError::MalformedHeader(_))));
        assert!(matches!(decode_pgm(b""), Err(ImageError::UnsupportedFormat(_))));
    }

    #[test]
    fn unit_conversions() {
        let img = GrayImage::new(3, 1, vec![0, 128, 255]).unwrap();
        let t: Tensor<f32> = to_unit(&img);
        assert_eq!(t.shape(), [1, 1, 1, 3]);
        assert_eq!(t.data()[2], 1.0);
        assert_eq!(from_unit(&t, true).unwrap(), img);

        let t = Tensor::from_vec([1, 1, 1, 4], vec![1.2f64, -0.1, 0.5 / 255.0, 1.5 / 255.0]).unwrap();
        assert_eq!(from_unit(&t, true).unwrap().pixels(), &[255, 0, 1, 2]);
        assert!(matches!(from_unit(&t, false), Err(ImageError::OutOfRange(_))));
        assert!(matches!(
            from_unit(&Tensor::<f32>::zeros([2, 1, 2, 2]), true),
            Err(ImageError::BadShape(_))
        ));
    }

    #[test]
    fn luma() {
        assert_eq!(rgb_to_luma(255, 255, 255), 255);
        assert_eq!(rgb_to_luma(255, 0, 0), 76);
        assert_eq!(rgb_to_luma(0, 0, 0), 0);
        assert_eq!(rgb_to_luma(0, 255, 0), 150);
        assert_eq!(rgb_to_luma(0, 0, 255), 29);
    }
}
