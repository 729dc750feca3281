//! Binary PPM (P6) / PGM (P5) rasters and the pixel operations used by augmentation.

use std::io::{BufRead, Write};

use crate::error::{ensure, Error, Result};
use crate::tensor::{Real, Tensor};

/// Interleaved `height x width x channels` image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn pixel(&self, u: usize, v: usize) -> &[f32] {
        let i = (v * self.width + u) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn pixel_mut(&mut self, u: usize, v: usize) -> &mut [f32] {
        let i = (v * self.width + u) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    /// Planar `[3, H, W]` tensor; grey images are replicated.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let (w, h, c) = (self.width, self.height, self.channels);
        Tensor::from_fn(&[3, h, w], |i| {
            let (ch, rest) = (i / (h * w), i % (h * w));
            T::from_f64(self.data[rest * c + ch.min(c - 1)] as f64)
        })
    }

    pub fn crop(&self, u0: usize, v0: usize, width: usize, height: usize) -> Result<Image> {
        ensure!(width > 0 && height > 0, Contract, "empty crop {width}x{height}");
        ensure!(
            u0 + width <= self.width && v0 + height <= self.height,
            Contract,
            "crop ({u0},{v0}) {width}x{height} exceeds {}x{}",
            self.width,
            self.height
        );
        let mut out = Image::new(width, height, self.channels);
        let row = width * self.channels;
        for v in 0..height {
            let src = ((v0 + v) * self.width + u0) * self.channels;
            out.data[v * row..(v + 1) * row].copy_from_slice(&self.data[src..src + row]);
        }
        Ok(out)
    }

    /// Bilinear resize where output pixel `u` samples source position `u / sx`.
    pub fn resize(&self, width: usize, height: usize) -> Result<Image> {
        ensure!(width > 0 && height > 0, Contract, "empty resize target {width}x{height}");
        if (width, height) == (self.width, self.height) {
            return Ok(self.clone());
        }
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        let mut out = Image::new(width, height, self.channels);
        let lerp_coord = |p: f64, n: usize| {
            let p = p.clamp(0.0, (n - 1) as f64);
            let i0 = p.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, (p - i0 as f64) as f32)
        };
        for v in 0..height {
            let (v0, v1, fv) = lerp_coord(v as f64 / sy, self.height);
            for u in 0..width {
                let (u0, u1, fu) = lerp_coord(u as f64 / sx, self.width);
                for c in 0..self.channels {
                    let a = self.pixel(u0, v0)[c] * (1.0 - fu) + self.pixel(u1, v0)[c] * fu;
                    let b = self.pixel(u0, v1)[c] * (1.0 - fu) + self.pixel(u1, v1)[c] * fu;
                    out.pixel_mut(u, v)[c] = a * (1.0 - fv) + b * fv;
                }
            }
        }
        Ok(out)
    }

    pub fn flip_horizontal(&self) -> Image {
        let mut out = self.clone();
        for v in 0..self.height {
            for u in 0..self.width {
                out.pixel_mut(self.width - 1 - u, v).copy_from_slice(self.pixel(u, v));
            }
        }
        out
    }
}

fn header_token<R: BufRead>(r: &mut R) -> Result<String> {
    let mut tok = String::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            break;
        }
        let b = byte[0];
        if b == b'#' && tok.is_empty() {
            let mut skip = Vec::new();
            r.read_until(b'\n', &mut skip)?;
            continue;
        }
        if b.is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            break;
        }
        tok.push(b as char);
    }
    if tok.is_empty() {
        return Err(Error::Parse {
            line: 0,
            msg: "truncated PNM header".into(),
        });
    }
    Ok(tok)
}

fn header_number<R: BufRead>(r: &mut R, what: &str) -> Result<usize> {
    let tok = header_token(r)?;
    tok.parse().map_err(|_| Error::Parse {
        line: 0,
        msg: format!("bad PNM {what} {tok:?}"),
    })
}

/// Reads a binary PGM or PPM with 8-bit samples.
pub fn read_pnm<R: BufRead>(mut r: R) -> Result<Image> {
    let magic = header_token(&mut r)?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => {
            return Err(Error::Parse {
                line: 0,
                msg: format!("unsupported PNM magic {other:?} (expected P5 or P6)"),
            })
        }
    };
    let width = header_number(&mut r, "width")?;
    let height = header_number(&mut r, "height")?;
    let maxval = header_number(&mut r, "maxval")?;
    if !(1..=255).contains(&maxval) {
        return Err(Error::Parse {
            line: 0,
            msg: format!("only 8-bit PNM is supported, maxval {maxval}"),
        });
    }
    let mut raw = vec![0u8; width * height * channels];
    r.read_exact(&mut raw)?;
    let maxval = maxval as f32;
    Ok(Image {
        width,
        height,
        channels,
        data: raw.iter().map(|&b| b as f32 / maxval).collect(),
    })
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes P6 for 3-channel images and P5 for 1-channel ones.
pub fn write_pnm<W: Write>(mut w: W, img: &Image) -> Result<()> {
    let magic = match img.channels {
        1 => "P5",
        3 => "P6",
        c => return Err(Error::Contract(format!("cannot write a {c}-channel image as PNM"))),
    };
    write!(w, "{magic}\n{} {}\n255\n", img.width, img.height)?;
    let bytes: Vec<u8> = img.data.iter().map(|&v| quantize(v)).collect();
    w.write_all(&bytes)?;
    Ok(())
}

pub fn load_pnm(path: &std::path::Path) -> Result<Image> {
    let f = std::fs::File::open(path)?;
    read_pnm(std::io::BufReader::new(f))
}

pub fn save_pnm(path: &std::path::Path, img: &Image) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_pnm(&mut w, img)?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(w: usize, h: usize, c: usize) -> Image {
        let mut img = Image::new(w, h, c);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = ((i * 37) % 256) as f32 / 255.0;
        }
        img
    }

    #[test]
    fn pnm_round_trip() {
        for c in [1, 3] {
            let img = ramp(5, 3, c);
            let mut buf = Vec::new();
            write_pnm(&mut buf, &img).unwrap();
            let back = read_pnm(&buf[..]).unwrap();
            assert_eq!(back, img);
        }
    }

    #[test]
    fn header_comments_and_errors() {
        let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend([0u8, 255]);
        let img = read_pnm(&bytes[..]).unwrap();
        assert_eq!(img.data, vec![0.0, 1.0]);
        assert!(read_pnm(&b"P3\n1 1\n255\n0 0 0"[..]).is_err());
        assert!(read_pnm(&b"P5\n2 2\n255\n\x00"[..]).is_err());
    }

    #[test]
    fn crop_resize_flip() {
        let img = ramp(6, 4, 3);
        let c = img.crop(1, 1, 3, 2).unwrap();
        assert_eq!(c.pixel(0, 0), img.pixel(1, 1));
        assert!(img.crop(4, 0, 3, 1).is_err());
        assert_eq!(img.resize(6, 4).unwrap(), img);
        let up = img.resize(12, 8).unwrap();
        assert_eq!(up.pixel(2, 2), img.pixel(1, 1));
        assert_eq!(img.flip_horizontal().flip_horizontal(), img);
        assert_eq!(img.flip_horizontal().pixel(0, 0), img.pixel(5, 0));
        let t: Tensor<f64> = img.to_tensor();
        assert_eq!(t.shape(), &[3, 4, 6]);
        assert_eq!(t.at(&[2, 1, 3]), img.pixel(3, 1)[2] as f64);
    }
}
