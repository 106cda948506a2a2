//! Images and Netpbm (PGM/PPM) encoding.
//!
//! Reading accepts P2/P5 (grey) and P3/P6 (colour) with any maxval up to
//! 65535. Writing always emits binary 8-bit files; a stored sample is
//! `round(255 * v)` and reads back as `sample / 255`.

use crate::error::{Error, Result};

/// Dense `H x W x C` image, row-major with interleaved channels, entries in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Shape(format!(
                "image dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        let expected = height
            .checked_mul(width)
            .and_then(|n| n.checked_mul(channels))
            .ok_or_else(|| Error::Shape("image dimensions overflow".into()))?;
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "{height}x{width}x{channels} image needs {expected} values, got {}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument(format!(
                "pixel value {} at index {pos} outside [0, 1]",
                data[pos]
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Rounds every value to the nearest 8-bit level.
    pub fn quantized(&self) -> Image {
        Image {
            data: self.data.iter().map(|&v| to_u8(v) as f64 / 255.0).collect(),
            ..self.clone()
        }
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Decoded Netpbm raster with raw integer samples.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pnm {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub maxval: u16,
    pub samples: Vec<u16>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Encoding {
    Ascii,
    Binary,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_whitespace_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' || c == b'\r' {
                        break;
                    }
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<u32> {
        self.skip_whitespace_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::Format(format!("expected {what} at byte {start}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format(format!("{what} out of range")))
    }
}

pub fn decode_pnm(bytes: &[u8]) -> Result<Pnm> {
    let (channels, encoding) = match bytes.get(..2) {
        Some(b"P2") => (1, Encoding::Ascii),
        Some(b"P5") => (1, Encoding::Binary),
        Some(b"P3") => (3, Encoding::Ascii),
        Some(b"P6") => (3, Encoding::Binary),
        _ => return Err(Error::Format("not a PGM/PPM file (expected P2, P3, P5 or P6)".into())),
    };
    let mut cur = Cursor { bytes, pos: 2 };
    let width = cur.number("width")? as usize;
    let height = cur.number("height")? as usize;
    let maxval = cur.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::Format("zero image dimension".into()));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(Error::Format(format!("maxval {maxval} outside 1..=65535")));
    }
    let maxval = maxval as u16;
    let count = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| Error::Format("image dimensions overflow".into()))?;

    let samples = match encoding {
        Encoding::Binary => {
            // Exactly one whitespace byte separates the header from the raster.
            if !cur.bytes.get(cur.pos).is_some_and(u8::is_ascii_whitespace) {
                return Err(Error::Format("missing whitespace after header".into()));
            }
            cur.pos += 1;
            let width_bytes = if maxval > 255 { 2 } else { 1 };
            let raster = &bytes[cur.pos..];
            let needed = count
                .checked_mul(width_bytes)
                .ok_or_else(|| Error::Format("image dimensions overflow".into()))?;
            if raster.len() != needed {
                return Err(Error::Format(format!(
                    "raster has {} bytes, expected {needed}",
                    raster.len()
                )));
            }
            if width_bytes == 1 {
                raster.iter().map(|&b| b as u16).collect::<Vec<_>>()
            } else {
                raster
                    .chunks_exact(2)
                    .map(|c| u16::from_be_bytes([c[0], c[1]]))
                    .collect()
            }
        }
        Encoding::Ascii => {
            // Every sample needs at least two bytes ("0 ").
            if count > (bytes.len() - cur.pos) / 2 + 1 {
                return Err(Error::Format("raster truncated".into()));
            }
            let mut samples = Vec::with_capacity(count);
            for _ in 0..count {
                let v = cur.number("sample")?;
                samples.push(u16::try_from(v).map_err(|_| {
                    Error::Format(format!("sample {v} exceeds 65535"))
                })?);
            }
            cur.skip_whitespace_and_comments();
            if cur.pos != bytes.len() {
                return Err(Error::Format("trailing data after raster".into()));
            }
            samples
        }
    };
    if let Some(bad) = samples.iter().find(|&&s| s > maxval) {
        return Err(Error::Format(format!("sample {bad} exceeds maxval {maxval}")));
    }
    Ok(Pnm {
        width,
        height,
        channels,
        maxval,
        samples,
    })
}

/// Binary P5/P6 encoding; samples wider than 8 bits are written big-endian.
pub fn encode_pnm(pnm: &Pnm) -> Result<Vec<u8>> {
    let magic = match pnm.channels {
        1 => "P5",
        3 => "P6",
        c => return Err(Error::Format(format!("Netpbm supports 1 or 3 channels, not {c}"))),
    };
    if pnm.samples.len() != pnm.width * pnm.height * pnm.channels || pnm.maxval == 0 {
        return Err(Error::Format("raster does not match header".into()));
    }
    let mut out = format!("{magic}\n{} {}\n{}\n", pnm.width, pnm.height, pnm.maxval).into_bytes();
    for &s in &pnm.samples {
        if s > pnm.maxval {
            return Err(Error::Format(format!("sample {s} exceeds maxval")));
        }
        if pnm.maxval > 255 {
            out.extend_from_slice(&s.to_be_bytes());
        } else {
            out.push(s as u8);
        }
    }
    Ok(out)
}

pub fn decode_image(bytes: &[u8]) -> Result<Image> {
    let pnm = decode_pnm(bytes)?;
    let scale = pnm.maxval as f64;
    let data = pnm.samples.iter().map(|&s| s as f64 / scale).collect();
    Image::new(pnm.height, pnm.width, pnm.channels, data)
}

pub fn encode_image(image: &Image) -> Result<Vec<u8>> {
    encode_pnm(&Pnm {
        width: image.width,
        height: image.height,
        channels: image.channels,
        maxval: 255,
        samples: image.data.iter().map(|&v| to_u8(v) as u16).collect(),
    })
}

pub fn read_image(path: &std::path::Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes)
}

pub fn write_image(path: &std::path::Path, image: &Image) -> Result<()> {
    std::fs::write(path, encode_image(image)?).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ascii_pgm_with_comments() {
        let text = b"P2\n# a comment\n3 2\n# another\n10\n0 5 10\n10 5 0\n";
        let img = decode_image(text).unwrap();
        assert_eq!(img.shape(), [2, 3, 1]);
        assert_eq!(img.data(), &[0.0, 0.5, 1.0, 1.0, 0.5, 0.0]);
    }

    #[test]
    fn binary_ppm_layout() {
        let img = Image::new(1, 2, 3, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let bytes = encode_image(&img).unwrap();
        assert_eq!(&bytes[..11], b"P6\n2 1\n255\n");
        assert_eq!(&bytes[11..], &[255, 0, 0, 0, 0, 255]);
        assert_eq!(decode_image(&bytes).unwrap(), img);
    }

    #[test]
    fn sixteen_bit_samples() {
        let pnm = Pnm {
            width: 2,
            height: 1,
            channels: 1,
            maxval: 1000,
            samples: vec![999, 3],
        };
        let bytes = encode_pnm(&pnm).unwrap();
        assert_eq!(decode_pnm(&bytes).unwrap(), pnm);
    }

    #[test]
    fn malformed_inputs() {
        assert!(decode_pnm(b"").is_err());
        assert!(decode_pnm(b"P7\n1 1\n255\n\0").is_err());
        assert!(decode_pnm(b"P5\n1 1\n255\n").is_err());
        assert!(decode_pnm(b"P5\n1 1\n255\n\0\0").is_err());
        assert!(decode_pnm(b"P5\n0 1\n255\n").is_err());
        assert!(decode_pnm(b"P5\n1 1\n0\n\0").is_err());
        assert!(decode_pnm(b"P5\n1 1\n70000\n\0\0").is_err());
        assert!(decode_pnm(b"P2\n2 1\n3\n1 4\n").is_err());
        assert!(decode_pnm(b"P2\n2 1\n3\n1\n").is_err());
        assert!(decode_pnm(b"P2\n99999999 99999999\n3\n1\n").is_err());
    }

    #[test]
    fn rejects_out_of_range_pixels() {
        assert!(Image::new(1, 1, 1, vec![1.5]).is_err());
        assert!(Image::new(1, 1, 1, vec![f64::NAN]).is_err());
        assert!(Image::new(1, 2, 1, vec![0.5]).is_err());
    }

    proptest! {
        #[test]
        fn dump_reloads_to_quantized_image(
            values in proptest::collection::vec(0.0f64..=1.0, 12),
            colour in any::<bool>(),
        ) {
            let (h, w, c) = if colour { (2, 2, 3) } else { (3, 4, 1) };
            let img = Image::new(h, w, c, values).unwrap();
            let reloaded = decode_image(&encode_image(&img).unwrap()).unwrap();
            prop_assert_eq!(reloaded, img.quantized());
        }
    }
}
