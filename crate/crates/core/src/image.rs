//! Linear float images and PFM (portable float map) input/output.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};

use crate::{Error, Result, Rgb};

/// Row-major RGB image, row 0 at the top, linear radiometric values.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRgb {
    width: usize,
    height: usize,
    data: Vec<Rgb>,
}

impl ImageRgb {
    pub fn new(width: usize, height: usize) -> ImageRgb {
        ImageRgb { width, height, data: vec![Rgb::zeros(); width * height] }
    }

    pub fn filled(width: usize, height: usize, value: Rgb) -> ImageRgb {
        ImageRgb { width, height, data: vec![value; width * height] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> Rgb {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: Rgb) {
        self.data[y * self.width + x] = v;
    }

    pub fn pixels(&self) -> &[Rgb] {
        &self.data
    }

    pub fn pixels_mut(&mut self) -> &mut [Rgb] {
        &mut self.data
    }

    /// Mutable view of one row (used to hand tiles their own output strips).
    pub fn row_mut(&mut self, y: usize) -> &mut [Rgb] {
        &mut self.data[y * self.width..(y + 1) * self.width]
    }

    pub fn map(&self, f: impl Fn(Rgb) -> Rgb) -> ImageRgb {
        ImageRgb { width: self.width, height: self.height, data: self.data.iter().map(|&p| f(p)).collect() }
    }

    pub fn zip_map(&self, other: &ImageRgb, f: impl Fn(Rgb, Rgb) -> Rgb) -> ImageRgb {
        assert_eq!((self.width, self.height), (other.width, other.height));
        ImageRgb {
            width: self.width,
            height: self.height,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &ImageRgb) -> f64 {
        assert_eq!((self.width, self.height), (other.width, other.height));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs().max())
            .fold(0.0, f64::max)
    }

    pub fn mean_abs_diff(&self, other: &ImageRgb) -> f64 {
        assert_eq!((self.width, self.height), (other.width, other.height));
        let n = (self.data.len() * 3) as f64;
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs().sum()).sum::<f64>() / n
    }
}

/// Row-major scalar image (alpha / weight maps).
#[derive(Clone, Debug, PartialEq)]
pub struct ImageGray {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl ImageGray {
    pub fn new(width: usize, height: usize) -> ImageGray {
        ImageGray { width, height, data: vec![0.0; width * height] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn pixels(&self) -> &[f64] {
        &self.data
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

/// Writes a color PFM: `PF`, little-endian (scale −1.0), rows bottom-to-top.
pub fn write_pfm(path: &Path, img: &ImageRgb) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "PF\n{} {}\n-1.0\n", img.width(), img.height())?;
    let mut row = vec![0u8; img.width() * 12];
    for y in (0..img.height()).rev() {
        for x in 0..img.width() {
            let p = img.get(x, y);
            LittleEndian::write_f32(&mut row[x * 12..], p.x as f32);
            LittleEndian::write_f32(&mut row[x * 12 + 4..], p.y as f32);
            LittleEndian::write_f32(&mut row[x * 12 + 8..], p.z as f32);
        }
        w.write_all(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn read_token(r: &mut impl BufRead, path: &Path) -> Result<String> {
    let mut tok = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            return Err(Error::format(path.display().to_string(), "truncated header"));
        }
        if byte[0].is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            break;
        }
        tok.push(byte[0]);
    }
    String::from_utf8(tok).map_err(|_| Error::format(path.display().to_string(), "non-ASCII header"))
}

/// Reads a color (`PF`) or grayscale (`Pf`) PFM into an RGB image.
pub fn read_pfm(path: &Path) -> Result<ImageRgb> {
    let mut r = BufReader::new(File::open(path)?);
    let p = path.display().to_string();
    let magic = read_token(&mut r, path)?;
    let channels = match magic.as_str() {
        "PF" => 3,
        "Pf" => 1,
        other => return Err(Error::format(p, format!("bad magic {other:?}, expected PF/Pf"))),
    };
    let width: usize = read_token(&mut r, path)?
        .parse()
        .map_err(|_| Error::format(&p, "bad width"))?;
    let height: usize = read_token(&mut r, path)?
        .parse()
        .map_err(|_| Error::format(&p, "bad height"))?;
    let scale: f64 = read_token(&mut r, path)?
        .parse()
        .map_err(|_| Error::format(&p, "bad scale"))?;
    if width == 0 || height == 0 || width * height > 1 << 28 {
        return Err(Error::format(p, format!("unreasonable dimensions {width}x{height}")));
    }
    let little_endian = scale < 0.0;
    let mag = scale.abs();
    let mut buf = vec![0u8; width * height * channels * 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::format(&p, "truncated pixel data"))?;
    let mut img = ImageRgb::new(width, height);
    for row in 0..height {
        let y = height - 1 - row; // PFM stores bottom-to-top
        for x in 0..width {
            let base = (row * width + x) * channels * 4;
            let read_f = |off: usize| -> f64 {
                let bytes = &buf[base + off * 4..base + off * 4 + 4];
                let v = if little_endian {
                    LittleEndian::read_f32(bytes)
                } else {
                    byteorder::BigEndian::read_f32(bytes)
                };
                v as f64 * mag
            };
            let px = if channels == 3 {
                Rgb::new(read_f(0), read_f(1), read_f(2))
            } else {
                Rgb::repeat(read_f(0))
            };
            img.set(x, y, px);
        }
    }
    Ok(img)
}
