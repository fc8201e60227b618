//! 8-bit RGB image files to and from [`ImageTensor`].

use std::path::Path;

use image::{ImageBuffer, Rgb, RgbImage};
use ragan_tensor::Scalar;

use crate::domain::{denormalize_image, normalize_image, ImageTensor, IMAGE_SIZE};
use crate::error::{RaganError, Result};

/// Decodes any supported file to a `3 × H × W` tensor of `[0, 255]` values.
pub fn load_raw<T: Scalar>(path: &Path) -> Result<ImageTensor<T>> {
    let img = image::open(path)
        .map_err(|e| RaganError::Image(format!("{}: {e}", path.display())))?
        .to_rgb8();
    Ok(from_rgb8(&img))
}

pub fn load_normalized<T: Scalar>(path: &Path) -> Result<ImageTensor<T>> {
    normalize_image(&load_raw(path)?)
}

/// Normalized `3 × 256 × 256` model input; other sizes are resized bilinearly.
pub fn load_face<T: Scalar>(path: &Path) -> Result<ImageTensor<T>> {
    let x = load_normalized(path)?;
    if x.height() == IMAGE_SIZE && x.width() == IMAGE_SIZE {
        return Ok(x);
    }
    let data = ragan_tensor::kernels::resize_bilinear(
        x.data(),
        3,
        x.height(),
        x.width(),
        IMAGE_SIZE,
        IMAGE_SIZE,
    );
    ImageTensor::new(3, IMAGE_SIZE, IMAGE_SIZE, data)
}

pub fn from_rgb8<T: Scalar>(img: &RgbImage) -> ImageTensor<T> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![T::zero(); 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = T::from_f64_lossy(px[c] as f64);
        }
    }
    ImageTensor::new(3, h, w, data).expect("decoded image has positive size")
}

/// Rounds `[-1, 1]` values back to 8-bit pixels, clamping out-of-range input.
pub fn to_rgb8<T: Scalar>(x: &ImageTensor<T>) -> Result<RgbImage> {
    if x.channels() != 3 {
        return Err(RaganError::Validation(format!(
            "cannot encode {} channels as RGB",
            x.channels()
        )));
    }
    let raw = denormalize_image(x);
    let (h, w) = (x.height(), x.width());
    Ok(ImageBuffer::from_fn(w as u32, h as u32, |px, py| {
        let at = |c: usize| {
            let v = raw.at(c, py as usize, px as usize).to_f64_lossy();
            v.round().clamp(0.0, 255.0) as u8
        };
        Rgb([at(0), at(1), at(2)])
    }))
}

pub fn save_png<T: Scalar>(path: &Path, x: &ImageTensor<T>) -> Result<()> {
    let img = to_rgb8(x)?;
    let mut bytes = Vec::new();
    img.write_to(
        &mut std::io::Cursor::new(&mut bytes),
        image::ImageOutputFormat::Png,
    )
    .map_err(|e| RaganError::Image(format!("{}: {e}", path.display())))?;
    crate::weights::write_atomic(path, &bytes)
}

/// Tiles equally sized images left to right, top to bottom.
pub fn contact_sheet<T: Scalar>(
    tiles: &[ImageTensor<T>],
    columns: usize,
) -> Result<ImageTensor<T>> {
    let first = tiles
        .first()
        .ok_or_else(|| RaganError::Validation("no tiles".into()))?;
    let (c, h, w) = (first.channels(), first.height(), first.width());
    if tiles
        .iter()
        .any(|t| (t.channels(), t.height(), t.width()) != (c, h, w))
    {
        return Err(RaganError::Shape(
            "contact sheet tiles differ in size".into(),
        ));
    }
    let cols = columns.clamp(1, tiles.len());
    let rows = tiles.len().div_ceil(cols);
    let (sh, sw) = (rows * h, cols * w);
    let mut data = vec![-T::one(); c * sh * sw];
    for (k, t) in tiles.iter().enumerate() {
        let (oy, ox) = ((k / cols) * h, (k % cols) * w);
        for ch in 0..c {
            for y in 0..h {
                let dst = (ch * sh + oy + y) * sw + ox;
                data[dst..dst + w].copy_from_slice(&t.plane(ch)[y * w..(y + 1) * w]);
            }
        }
    }
    ImageTensor::new(c, sh, sw, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_exact_on_pixel_grid() {
        let dir = tempfile::tempdir().unwrap();
        let raw =
            ImageTensor::<f32>::new(3, 2, 3, (0..18).map(|i| (i * 14) as f32).collect()).unwrap();
        let x = normalize_image(&raw).unwrap();
        let path = dir.path().join("a.png");
        save_png(&path, &x).unwrap();
        assert_eq!(load_raw::<f32>(&path).unwrap(), raw);
    }

    #[test]
    fn contact_sheet_layout() {
        let a = ImageTensor::<f32>::filled(3, 2, 2, 0.5).unwrap();
        let b = ImageTensor::<f32>::filled(3, 2, 2, -0.5).unwrap();
        let s = contact_sheet(&[a.clone(), b.clone(), a], 2).unwrap();
        assert_eq!((s.height(), s.width()), (4, 4));
        assert_eq!(s.at(0, 0, 0), 0.5);
        assert_eq!(s.at(0, 0, 2), -0.5);
        assert_eq!(s.at(0, 2, 0), 0.5);
        assert_eq!(s.at(0, 3, 3), -1.0);
    }
}
