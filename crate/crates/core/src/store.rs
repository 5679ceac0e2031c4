//! On-disk formats: 8-bit PNG for viewable images and the bit-exact `MPTF`
//! raw tensor format for intermediate results.
//!
//! `MPTF` layout, all little-endian:
//!
//! | bytes        | content                     |
//! |--------------|-----------------------------|
//! | 4            | magic `b"MPTF"`             |
//! | 4            | `u32` version (= 1)         |
//! | 4            | `u32` ndim                  |
//! | 8 × ndim     | `u64` dims                  |
//! | 4 × product  | `f32` payload, row-major    |

use std::fs;
use std::path::Path;

use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::{ImageTensor, Tensor};

pub const MPTF_MAGIC: &[u8; 4] = b"MPTF";
pub const MPTF_VERSION: u32 = 1;

/// Serializes a tensor to `MPTF` bytes.
pub fn encode_raw(tensor: &Tensor) -> Vec<u8> {
    let dims = tensor.dims();
    let mut out = Vec::with_capacity(12 + 8 * dims.len() + 4 * tensor.len());
    out.extend_from_slice(MPTF_MAGIC);
    out.extend_from_slice(&MPTF_VERSION.to_le_bytes());
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in tensor.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parses `MPTF` bytes. Rejects trailing bytes and non-finite payload values.
pub fn decode_raw(bytes: &[u8]) -> Result<Tensor> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != MPTF_MAGIC {
        return Err(Error::Format("bad magic, expected \"MPTF\"".into()));
    }
    let version = cur.u32()?;
    if version != MPTF_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let ndim = cur.u32()? as usize;
    if ndim == 0 {
        return Err(Error::Format("tensor has no dimensions".into()));
    }
    let mut dims = Vec::with_capacity(ndim.min(64));
    let mut count: u64 = 1;
    for _ in 0..ndim {
        let d = cur.u64()?;
        if d == 0 {
            return Err(Error::Format("zero-sized dimension".into()));
        }
        count = count
            .checked_mul(d)
            .ok_or_else(|| Error::Format("dimension product overflows".into()))?;
        dims.push(usize::try_from(d).map_err(|_| Error::Format("dimension overflows".into()))?);
    }
    let payload_len = count
        .checked_mul(4)
        .ok_or_else(|| Error::Format("payload size overflows".into()))?;
    let remaining = (bytes.len() - cur.pos) as u64;
    if remaining < payload_len {
        return Err(Error::Format(format!(
            "truncated payload: need {payload_len} bytes, found {remaining}"
        )));
    }
    if remaining > payload_len {
        return Err(Error::Format(format!(
            "{} trailing bytes after payload",
            remaining - payload_len
        )));
    }
    let data: Vec<f32> = cur.bytes[cur.pos..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let tensor = Tensor::new(dims, data).map_err(|e| Error::Format(e.to_string()))?;
    tensor.check_finite()?;
    Ok(tensor)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("truncated header".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }
}

pub fn save_raw(path: impl AsRef<Path>, tensor: &Tensor) -> Result<()> {
    let path = path.as_ref();
    tensor.check_finite()?;
    fs::write(path, encode_raw(tensor)).map_err(|e| Error::io(path, e))
}

pub fn load_raw(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_raw(&bytes)
}

fn quantize(v: f32) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Encodes an image as 8-bit PNG bytes (grayscale for one channel, RGB for three).
pub fn encode_png(image: &ImageTensor) -> Result<Vec<u8>> {
    let (h, w) = (image.height() as u32, image.width() as u32);
    let bytes: Vec<u8> = image.as_tensor().data().iter().map(|&v| quantize(v)).collect();
    let dynamic = match image.channels() {
        1 => DynamicImage::ImageLuma8(GrayImage::from_raw(w, h, bytes).ok_or_else(|| Error::shape("png buffer size"))?),
        3 => DynamicImage::ImageRgb8(RgbImage::from_raw(w, h, bytes).ok_or_else(|| Error::shape("png buffer size"))?),
        c => return Err(Error::Unsupported(format!("{c}-channel image"))),
    };
    let mut out = std::io::Cursor::new(Vec::new());
    dynamic
        .write_to(&mut out, ImageFormat::Png)
        .map_err(|e| Error::Decode(e.to_string()))?;
    Ok(out.into_inner())
}

/// Decodes an 8-bit grayscale or RGB PNG, mapping byte `b` to `b / 255`.
pub fn decode_png(bytes: &[u8]) -> Result<ImageTensor> {
    let dynamic =
        image::load_from_memory_with_format(bytes, ImageFormat::Png).map_err(|e| Error::Decode(e.to_string()))?;
    let (w, h) = (dynamic.width() as usize, dynamic.height() as usize);
    let (channels, raw) = match dynamic {
        DynamicImage::ImageLuma8(img) => (1, img.into_raw()),
        DynamicImage::ImageRgb8(img) => (3, img.into_raw()),
        other => {
            return Err(Error::Unsupported(format!(
                "only 8-bit grayscale or RGB PNG is supported, got {:?}",
                other.color()
            )))
        }
    };
    let data = raw.iter().map(|&b| b as f32 / 255.0).collect();
    ImageTensor::new(Tensor::new(vec![h, w, channels], data)?)
}

pub fn save_png(path: impl AsRef<Path>, image: &ImageTensor) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_png(image)?).map_err(|e| Error::io(path, e))
}

pub fn load_png(path: impl AsRef<Path>) -> Result<ImageTensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_png(&bytes)
}

/// Loads an image from either a `.png` file or an `MPTF` tensor of shape `[H, W, C]`.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageTensor> {
    let path = path.as_ref();
    let is_png = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("png"));
    if is_png {
        load_png(path)
    } else {
        ImageTensor::new(load_raw(path)?)
    }
}

/// Renders a signed field as a grayscale diverging map: `0.5` at zero,
/// `0` and `1` at `-max|D|` and `+max|D|`.
pub fn diverging_image(field: &Tensor) -> Result<ImageTensor> {
    let scale = field.max_abs();
    let mapped = if scale > 0.0 {
        field.map(|v| (0.5 + 0.5 * v / scale).clamp(0.0, 1.0))
    } else {
        field.map(|_| 0.5)
    };
    ImageTensor::new(mapped)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn raw_round_trip_is_bit_exact() {
        let t = Tensor::new(vec![3], vec![1.0, -2.5, 3.25]).unwrap();
        let back = decode_raw(&encode_raw(&t)).unwrap();
        assert_eq!(back.dims(), t.dims());
        let bits = |x: &Tensor| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&t));
    }

    #[test]
    fn raw_header_layout() {
        let t = Tensor::new(vec![1, 2], vec![0.5, 1.0]).unwrap();
        let bytes = encode_raw(&t);
        assert_eq!(&bytes[..4], b"MPTF");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..20], &1u64.to_le_bytes());
        assert_eq!(&bytes[20..28], &2u64.to_le_bytes());
        assert_eq!(&bytes[28..32], &0.5f32.to_le_bytes());
        assert_eq!(bytes.len(), 36);
    }

    #[test]
    fn raw_rejects_malformed_input() {
        let good = encode_raw(&Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(decode_raw(&bad_magic), Err(Error::Format(_))));

        assert!(matches!(decode_raw(&good[..good.len() - 1]), Err(Error::Format(_))));
        assert!(matches!(decode_raw(&good[..10]), Err(Error::Format(_))));

        let mut trailing = good.clone();
        trailing.push(0);
        assert!(matches!(decode_raw(&trailing), Err(Error::Format(_))));

        // ndim = 0
        let mut empty = Vec::new();
        empty.extend_from_slice(b"MPTF");
        empty.extend_from_slice(&1u32.to_le_bytes());
        empty.extend_from_slice(&0u32.to_le_bytes());
        assert!(matches!(decode_raw(&empty), Err(Error::Format(_))));

        // dims whose product overflows u64
        let mut huge = Vec::new();
        huge.extend_from_slice(b"MPTF");
        huge.extend_from_slice(&1u32.to_le_bytes());
        huge.extend_from_slice(&2u32.to_le_bytes());
        huge.extend_from_slice(&u64::MAX.to_le_bytes());
        huge.extend_from_slice(&3u64.to_le_bytes());
        assert!(matches!(decode_raw(&huge), Err(Error::Format(_))));

        let mut nan = good.clone();
        let n = nan.len();
        nan[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode_raw(&nan), Err(Error::Numerical(_))));
    }

    #[test]
    fn empty_dims_tensor_cannot_be_built() {
        assert!(Tensor::new(vec![], vec![]).is_err());
    }

    #[test]
    fn hundred_random_tensors_round_trip() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let dims: Vec<usize> = (0..rng.random_range(1..4)).map(|_| rng.random_range(1..6)).collect();
            let n: usize = dims.iter().product();
            let data: Vec<f32> = (0..n).map(|_| rng.random_range(-1e6f32..1e6)).collect();
            let t = Tensor::new(dims, data).unwrap();
            let bytes = encode_raw(&t);
            let back = decode_raw(&bytes).unwrap();
            assert_eq!(encode_raw(&back), bytes);
            assert_eq!(back, t);
        }
    }

    proptest! {
        #[test]
        fn raw_round_trip_any_finite(values in proptest::collection::vec(
            any::<f32>().prop_filter("finite", |v| v.is_finite()), 1..64)) {
            let t = Tensor::new(vec![values.len()], values).unwrap();
            let back = decode_raw(&encode_raw(&t)).unwrap();
            let bits = |x: &Tensor| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&back), bits(&t));
        }
    }

    #[test]
    fn png_half_gray_quantizes_to_128() {
        let img = ImageTensor::new(Tensor::filled(vec![8, 8, 3], 0.5).unwrap()).unwrap();
        let back = decode_png(&encode_png(&img).unwrap()).unwrap();
        assert!(back.as_tensor().data().iter().all(|&v| v == 128.0 / 255.0));
    }

    #[test]
    fn png_zeros_round_trip() {
        let img = ImageTensor::new(Tensor::zeros(vec![8, 9, 1]).unwrap()).unwrap();
        let back = decode_png(&encode_png(&img).unwrap()).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn png_quantization_error_bounded_over_all_levels() {
        // Every representable level k/255 survives exactly; every value in between
        // lands within half a quantization step.
        let mut values = Vec::new();
        for k in 0..256 {
            values.push(k as f32 / 255.0);
            values.push(((k as f32 + 0.49) / 255.0).min(1.0));
        }
        values.resize(64 * 8, 0.0);
        let t = Tensor::new(vec![64, 8, 1], values.clone()).unwrap();
        let img = ImageTensor::new(t).unwrap();
        let back = decode_png(&encode_png(&img).unwrap()).unwrap();
        for (a, b) in values.iter().zip(back.as_tensor().data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-7, "{a} vs {b}");
        }
        for k in 0..256 {
            assert_eq!(back.as_tensor().data()[2 * k], k as f32 / 255.0);
        }
    }

    #[test]
    fn png_second_save_is_byte_identical() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f32> = (0..16 * 16 * 3).map(|_| rng.random::<f32>()).collect();
        let img = ImageTensor::new(Tensor::new(vec![16, 16, 3], data).unwrap()).unwrap();
        let once = encode_png(&img).unwrap();
        let reloaded = decode_png(&once).unwrap();
        for (a, b) in img.as_tensor().data().iter().zip(reloaded.as_tensor().data()) {
            assert!((a - b).abs() <= 1.0 / 255.0);
        }
        let twice = encode_png(&reloaded).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn png_rejects_garbage_and_rgba() {
        assert!(matches!(decode_png(b"not a png"), Err(Error::Decode(_))));
        let rgba = image::RgbaImage::new(8, 8);
        let mut buf = std::io::Cursor::new(Vec::new());
        DynamicImage::ImageRgba8(rgba)
            .write_to(&mut buf, ImageFormat::Png)
            .unwrap();
        assert!(matches!(decode_png(buf.get_ref()), Err(Error::Unsupported(_))));
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::new(vec![2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        save_raw(dir.path().join("t.mptf"), &t).unwrap();
        assert_eq!(load_raw(dir.path().join("t.mptf")).unwrap(), t);
        assert!(matches!(
            load_raw(dir.path().join("missing.mptf")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn diverging_map_centres_zero() {
        let d = Tensor::new(vec![8, 8, 1], {
            let mut v = vec![0.0; 64];
            v[0] = 2.0;
            v[1] = -2.0;
            v
        })
        .unwrap();
        let img = diverging_image(&d).unwrap();
        let data = img.as_tensor().data();
        assert_eq!(data[0], 1.0);
        assert_eq!(data[1], 0.0);
        assert_eq!(data[2], 0.5);
    }
}
