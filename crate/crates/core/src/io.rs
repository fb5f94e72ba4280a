//! Image file writers: PFM for lossless HDR output, binary PPM (P6) for
//! tonemapped previews.

use crate::math::Rgb;
use crate::render::Image;
use std::io::{self, Write};
use std::path::Path;

/// Little-endian PFM, bottom-up scanlines, scale -1.0.
pub fn write_pfm(path: &Path, image: &Image) -> io::Result<()> {
    let mut out = Vec::with_capacity(image.pixels.len() * 12 + 32);
    out.extend_from_slice(format!("PF\n{} {}\n-1.0\n", image.width, image.height).as_bytes());
    for row in (0..image.height).rev() {
        for col in 0..image.width {
            let p = image.pixels[row * image.width + col];
            for c in [p.x, p.y, p.z] {
                out.extend_from_slice(&(c as f32).to_le_bytes());
            }
        }
    }
    std::fs::write(path, out)
}

/// Reads back a PFM written by `write_pfm` (test support).
pub fn read_pfm(path: &Path) -> io::Result<Image> {
    let data = std::fs::read(path)?;
    let header_end = data
        .iter()
        .enumerate()
        .filter(|(_, &b)| b == b'\n')
        .nth(2)
        .map(|(i, _)| i + 1)
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidData, "truncated PFM header"))?;
    let header = std::str::from_utf8(&data[..header_end])
        .map_err(|_| io::Error::new(io::ErrorKind::InvalidData, "non-utf8 PFM header"))?;
    let mut lines = header.lines();
    if lines.next() != Some("PF") {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "not a color PFM"));
    }
    let dims: Vec<usize> = lines
        .next()
        .unwrap_or("")
        .split_whitespace()
        .filter_map(|t| t.parse().ok())
        .collect();
    if dims.len() != 2 {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "bad PFM dimensions"));
    }
    let (width, height) = (dims[0], dims[1]);
    let body = &data[header_end..];
    if body.len() != width * height * 12 {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "bad PFM payload size"));
    }
    let mut pixels = vec![Rgb::ZERO; width * height];
    let mut at = 0;
    for row in (0..height).rev() {
        for col in 0..width {
            let mut v = [0.0f64; 3];
            for slot in v.iter_mut() {
                let bytes: [u8; 4] = body[at..at + 4].try_into().unwrap();
                *slot = f32::from_le_bytes(bytes) as f64;
                at += 4;
            }
            pixels[row * width + col] = Rgb::new(v[0], v[1], v[2]);
        }
    }
    Ok(Image { width, height, pixels })
}

fn tonemap(c: f64) -> u8 {
    let mapped = (c.max(0.0) / (1.0 + c.max(0.0))).powf(1.0 / 2.2);
    (mapped * 255.0 + 0.5).min(255.0) as u8
}

/// Binary PPM preview: Reinhard c/(1+c) then gamma 1/2.2.
pub fn write_ppm(path: &Path, image: &Image) -> io::Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = io::BufWriter::new(file);
    write!(w, "P6\n{} {}\n255\n", image.width, image.height)?;
    let mut buf = Vec::with_capacity(image.pixels.len() * 3);
    for p in &image.pixels {
        buf.extend_from_slice(&[tonemap(p.x), tonemap(p.y), tonemap(p.z)]);
    }
    w.write_all(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pfm_round_trip() {
        let image = Image {
            width: 3,
            height: 2,
            pixels: vec![
                Rgb::new(0.1, 0.2, 0.3),
                Rgb::new(1.5, 0.0, 2.25),
                Rgb::new(0.5, 0.5, 0.5),
                Rgb::new(0.0, 0.0, 0.0),
                Rgb::new(10.0, 0.25, 0.125),
                Rgb::new(0.75, 0.5, 1.0),
            ],
        };
        let dir = std::env::temp_dir().join("candela_io_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("test.pfm");
        write_pfm(&path, &image).unwrap();
        let back = read_pfm(&path).unwrap();
        assert_eq!(back.width, 3);
        assert_eq!(back.height, 2);
        for (a, b) in image.pixels.iter().zip(&back.pixels) {
            // f32 precision round trip
            assert!((*a - *b).norm() < 1e-6);
        }
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn ppm_header_and_size() {
        let image = Image { width: 4, height: 2, pixels: vec![Rgb::splat(0.5); 8] };
        let dir = std::env::temp_dir().join("candela_io_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("test.ppm");
        write_ppm(&path, &image).unwrap();
        let data = std::fs::read(&path).unwrap();
        assert!(data.starts_with(b"P6\n4 2\n255\n"));
        assert_eq!(data.len(), b"P6\n4 2\n255\n".len() + 24);
        std::fs::remove_file(&path).ok();
    }
}
