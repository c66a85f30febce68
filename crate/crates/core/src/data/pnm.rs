//! Binary and ASCII PGM/PPM decoding, binary PGM encoding.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// A decoded frame with samples scaled to `[0, 1]`, interleaved by channel.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    /// Converts between grayscale and RGB. Luma uses the Rec. 601 weights.
    pub fn with_channels(self, channels: usize) -> Result<Image> {
        let data = match (self.channels, channels) {
            (a, b) if a == b => return Ok(self),
            (1, 3) => self.data.iter().flat_map(|&v| [v, v, v]).collect(),
            (3, 1) => self
                .data
                .chunks_exact(3)
                .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
                .collect(),
            (a, b) => return Err(Error::Data(format!("cannot convert {a}-channel frame to {b} channels"))),
        };
        Ok(Image {
            channels,
            data,
            ..self
        })
    }

    /// Bilinear resize with half-pixel centres; identity when the size is unchanged.
    pub fn resize(&self, height: usize, width: usize) -> Image {
        if (height, width) == (self.height, self.width) {
            return self.clone();
        }
        let c = self.channels;
        let coord = |dst: usize, out: usize, inp: usize| {
            let s = ((dst as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(inp - 1);
            (lo, hi, s - lo as f64)
        };
        let mut data = Vec::with_capacity(height * width * c);
        for y in 0..height {
            let (y0, y1, fy) = coord(y, height, self.height);
            for x in 0..width {
                let (x0, x1, fx) = coord(x, width, self.width);
                for ch in 0..c {
                    let at = |r: usize, q: usize| self.data[(r * self.width + q) * c + ch] as f64;
                    let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                    let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                    data.push((top * (1.0 - fy) + bottom * fy) as f32);
                }
            }
        }
        Image {
            height,
            width,
            channels: c,
            data,
        }
    }
}

pub fn read_pnm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pnm(&bytes).map_err(|msg| Error::format(path, msg))
}

fn decode_pnm(bytes: &[u8]) -> std::result::Result<Image, String> {
    let mut pos = 0;
    let mut token = || -> std::result::Result<String, String> {
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
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token()?;
    let (channels, binary) = match magic.as_str() {
        "P2" => (1, false),
        "P3" => (3, false),
        "P5" => (1, true),
        "P6" => (3, true),
        m => return Err(format!("unsupported magic {m:?}")),
    };
    let mut num = |what: &str| -> std::result::Result<usize, String> {
        token()?.parse().map_err(|_| format!("bad {what}"))
    };
    let width = num("width")?;
    let height = num("height")?;
    let maxval = num("maxval")?;
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(format!("bad header {width}x{height} maxval {maxval}"));
    }
    let n = width * height * channels;
    let scale = 1.0 / maxval as f32;
    let data: Vec<f32> = if binary {
        let body = &bytes[(pos + 1).min(bytes.len())..];
        let wide = maxval > 255;
        let need = n * if wide { 2 } else { 1 };
        if body.len() < need {
            return Err(format!("truncated pixel data: {} of {need} bytes", body.len()));
        }
        if wide {
            body[..need]
                .chunks_exact(2)
                .map(|b| u16::from_be_bytes([b[0], b[1]]) as f32 * scale)
                .collect()
        } else {
            body[..n].iter().map(|&b| b as f32 * scale).collect()
        }
    } else {
        let text = String::from_utf8_lossy(&bytes[pos..]);
        let vals: Vec<f32> = text
            .split_ascii_whitespace()
            .take(n)
            .map(|t| t.parse::<u32>().map(|v| v as f32 * scale))
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| "bad ascii sample".to_string())?;
        if vals.len() < n {
            return Err(format!("truncated pixel data: {} of {n} samples", vals.len()));
        }
        vals
    };
    Ok(Image {
        height,
        width,
        channels,
        data: data.into_iter().map(|v| v.min(1.0)).collect(),
    })
}

/// 8-bit binary PGM (one channel) or PPM (three channels).
pub fn encode_pnm(img: &Image) -> Vec<u8> {
    let magic = if img.channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}
