use std::path::Path;

use crate::detect::BBox;
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const RAW_MAGIC: &[u8; 8] = b"DGSI0001";

fn bad(path: &Path, msg: impl Into<String>) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// Load a binary PPM (`P6`, maxval 255) or a raw `DGSI0001` tensor as
/// `(1, 3, H, W)` RGB in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode_image(&bytes, path)
}

/// [`load_image`] on bytes already in memory; `path` is used in errors.
pub fn decode_image(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    if bytes.starts_with(RAW_MAGIC) {
        decode_raw(bytes, path)
    } else if bytes.starts_with(b"P6") {
        decode_ppm(bytes, path)
    } else {
        Err(bad(path, "unsupported format (expected P6 PPM or DGSI0001)"))
    }
}

/// Header fields of a PPM: whitespace-separated tokens with `#` comments.
fn ppm_header(bytes: &[u8], path: &Path) -> Result<([usize; 3], usize)> {
    let mut pos = 2;
    let mut vals = [0usize; 3];
    for v in &mut vals {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(bad(path, "truncated PPM header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *v = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad(path, "malformed PPM header"))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => Ok((vals, pos + 1)),
        _ => Err(bad(path, "malformed PPM header")),
    }
}

fn decode_ppm(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    let ([w, h, maxval], start) = ppm_header(bytes, path)?;
    if maxval != 255 {
        return Err(bad(path, format!("unsupported PPM maxval {maxval} (only 255)")));
    }
    if w == 0 || h == 0 {
        return Err(bad(path, "empty image"));
    }
    let plane = w * h;
    let payload = bytes
        .get(start..start + 3 * plane)
        .ok_or_else(|| bad(path, format!("truncated payload: need {} bytes", 3 * plane)))?;
    let mut data = vec![0.0f32; 3 * plane];
    for (i, px) in payload.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = px[c] as f32 / 255.0;
        }
    }
    Tensor::new(Shape::new(1, 3, h, w), data)
}

fn decode_raw(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    let header = 8 + 4 * 8;
    if bytes.len() < header {
        return Err(bad(path, "truncated DGSI0001 header"));
    }
    let dims: [usize; 4] = std::array::from_fn(|i| {
        let b = &bytes[8 + 8 * i..16 + 8 * i];
        u64::from_le_bytes(b.try_into().expect("8 bytes")) as usize
    });
    let shape = Shape::from_dims(dims);
    if shape.n != 1 || shape.c != 3 {
        return Err(bad(path, format!("expected a (1, 3, H, W) tensor, got {shape}")));
    }
    let need = shape.numel().checked_mul(4).and_then(|n| n.checked_add(header));
    if need != Some(bytes.len()) {
        return Err(bad(path, "truncated or oversized DGSI0001 payload"));
    }
    let data = bytes[header..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    Tensor::new(shape, data)
}

/// `DGSI0001`, four little-endian `u64` dims, then little-endian `f32`.
pub fn encode_raw(img: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(40 + 4 * img.len());
    out.extend_from_slice(RAW_MAGIC);
    for d in img.shape().dims() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in img.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Binary PPM of a `(1, 3, H, W)` tensor, values clamped to `[0, 1]` and
/// rounded to 8 bits.
pub fn encode_ppm(img: &Tensor<f32>) -> Result<Vec<u8>> {
    let s = img.shape();
    if s.n != 1 || s.c != 3 {
        return Err(Error::shape("encode_ppm", "(1, 3, H, W)", s));
    }
    let mut out = format!("P6\n{} {}\n255\n", s.w, s.h).into_bytes();
    let plane = s.plane();
    for i in 0..plane {
        for c in 0..3 {
            out.push((img.data()[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn save_ppm(img: &Tensor<f32>, path: &Path) -> Result<()> {
    std::fs::write(path, encode_ppm(img)?).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn save_raw(img: &Tensor<f32>, path: &Path) -> Result<()> {
    std::fs::write(path, encode_raw(img)).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Draw the outline of `b` (pixel coordinates) `thickness` pixels wide,
/// inside the box and clipped to the image.
pub fn draw_box(img: &mut Tensor<f32>, b: &BBox, color: [f32; 3], thickness: usize) {
    let s = img.shape();
    if s.c != 3 || s.w == 0 || s.h == 0 {
        return;
    }
    let clamp = |v: f64, n: usize| (v.round().max(0.0) as usize).min(n);
    let (x1, x2) = (clamp(b.x1, s.w), clamp(b.x2, s.w));
    let (y1, y2) = (clamp(b.y1, s.h), clamp(b.y2, s.h));
    if x2 <= x1 || y2 <= y1 {
        return;
    }
    let t = thickness.max(1);
    let data = img.data_mut();
    for n in 0..s.n {
        for y in y1..y2 {
            for x in x1..x2 {
                let edge = y < y1 + t || y + t >= y2 || x < x1 + t || x + t >= x2;
                if edge {
                    for (c, &v) in color.iter().enumerate() {
                        data[((n * 3 + c) * s.h + y) * s.w + x] = v;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(s: &str) -> &Path {
        Path::new(s)
    }

    #[test]
    fn white_ppm_is_ones() {
        let mut bytes = b"P6\n# comment\n2 2\n255\n".to_vec();
        bytes.extend([255u8; 12]);
        let t = decode_image(&bytes, p("w.ppm")).unwrap();
        assert_eq!(t.shape(), Shape::new(1, 3, 2, 2));
        assert!(t.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn ppm_is_rgb_planar() {
        let mut bytes = b"P6 2 1 255\n".to_vec();
        bytes.extend([255, 0, 0, 0, 0, 255]);
        let t = decode_image(&bytes, p("rb.ppm")).unwrap();
        assert_eq!(t.data(), &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(encode_ppm(&t).unwrap()[11..], [255, 0, 0, 0, 0, 255]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut deep = b"P6\n2 2\n65535\n".to_vec();
        deep.extend([0u8; 24]);
        let e = decode_image(&deep, p("d.ppm")).unwrap_err();
        assert!(e.to_string().contains("maxval 65535"), "{e}");
        let mut short = b"P6\n2 2\n255\n".to_vec();
        short.extend([0u8; 11]);
        assert!(decode_image(&short, p("s.ppm")).unwrap_err().to_string().contains("truncated"));
        assert!(decode_image(b"GIF89a", p("x.gif")).unwrap_err().to_string().contains("unsupported"));
        let raw = encode_raw(&Tensor::zeros(Shape::new(1, 3, 2, 2)));
        assert!(decode_image(&raw[..raw.len() - 1], p("r.dgsi")).is_err());
    }

    #[test]
    fn outline_is_two_pixels_wide() {
        let mut t = Tensor::zeros(Shape::new(1, 3, 8, 8));
        draw_box(&mut t, &BBox::new(1.0, 1.0, 7.0, 7.0), [1.0, 0.5, 0.0], 2);
        let red = t.plane(0, 0);
        let row = |y: usize| red[y * 8..y * 8 + 8].to_vec();
        assert_eq!(row(0), [0.0; 8]);
        assert_eq!(row(1), [0., 1., 1., 1., 1., 1., 1., 0.]);
        assert_eq!(row(3), [0., 1., 1., 0., 0., 1., 1., 0.]);
        assert_eq!(row(6), row(1));
        assert_eq!(t.plane(0, 1)[9], 0.5);
    }

    #[test]
    fn raw_round_trip_is_bitwise() {
        let t = Tensor::from_fn(Shape::new(1, 3, 3, 5), |i| (i as f32).sin() * 1e3);
        let back = decode_image(&encode_raw(&t), p("r.dgsi")).unwrap();
        assert!(back.bitwise_eq(&t));
    }
}
