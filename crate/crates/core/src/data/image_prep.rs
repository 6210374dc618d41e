//! Image preprocessing: bilinear resize to 260x260, center crop to 250x250,
//! [0,1] scaling, and per-channel standardization with training-split
//! statistics. The resize uses half-pixel centers and is pinned by a golden
//! test; identical input bytes always produce identical tensors.

use std::path::Path;

use image::DynamicImage;

use super::DataError;

pub const RESIZE_HW: usize = 260;
pub const CROP_HW: usize = 250;

/// Channels-first image in [0,1] after resize and crop, before standardization.
#[derive(Debug, Clone, PartialEq)]
pub struct CanonicalImage {
    pub channels: usize,
    pub hw: usize,
    pub data: Vec<f64>,
}

/// Standardized network-ready image, channels-first 250x250.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub channels: usize,
    pub hw: usize,
    pub data: Vec<f64>,
}

/// Per-channel mean/std of the training images, in [0,1] units.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Channel spread below this counts as degenerate and passes through
/// unscaled; summation noise over a 250x250 constant image lands around
/// 1e-13, well under it.
pub const DEGENERATE_STD: f64 = 1e-12;

/// Bilinear resampling with half-pixel centers, channels-first layout.
pub fn bilinear_resize(
    src: &[f64],
    channels: usize,
    src_h: usize,
    src_w: usize,
    dst_h: usize,
    dst_w: usize,
) -> Vec<f64> {
    let mut dst = vec![0.0; channels * dst_h * dst_w];
    let sy_scale = src_h as f64 / dst_h as f64;
    let sx_scale = src_w as f64 / dst_w as f64;
    for c in 0..channels {
        let sp = &src[c * src_h * src_w..(c + 1) * src_h * src_w];
        let dp = &mut dst[c * dst_h * dst_w..(c + 1) * dst_h * dst_w];
        for dy in 0..dst_h {
            let sy = ((dy as f64 + 0.5) * sy_scale - 0.5).clamp(0.0, (src_h - 1) as f64);
            let y0 = sy.floor() as usize;
            let y1 = (y0 + 1).min(src_h - 1);
            let fy = sy - y0 as f64;
            for dx in 0..dst_w {
                let sx = ((dx as f64 + 0.5) * sx_scale - 0.5).clamp(0.0, (src_w - 1) as f64);
                let x0 = sx.floor() as usize;
                let x1 = (x0 + 1).min(src_w - 1);
                let fx = sx - x0 as f64;
                // lerp as a + f*(b - a): exact when neighbors are equal, so
                // constant inputs stay bit-constant.
                let lerp = |a: f64, b: f64, f: f64| a + f * (b - a);
                let top = lerp(sp[y0 * src_w + x0], sp[y0 * src_w + x1], fx);
                let bot = lerp(sp[y1 * src_w + x0], sp[y1 * src_w + x1], fx);
                dp[dy * dst_w + dx] = lerp(top, bot, fy);
            }
        }
    }
    dst
}

/// Central crop of a square channels-first image.
pub fn center_crop(src: &[f64], channels: usize, src_hw: usize, crop_hw: usize) -> Vec<f64> {
    assert!(crop_hw <= src_hw);
    let off = (src_hw - crop_hw) / 2;
    let mut out = vec![0.0; channels * crop_hw * crop_hw];
    for c in 0..channels {
        let sp = &src[c * src_hw * src_hw..(c + 1) * src_hw * src_hw];
        let dp = &mut out[c * crop_hw * crop_hw..(c + 1) * crop_hw * crop_hw];
        for y in 0..crop_hw {
            let srow = &sp[(y + off) * src_hw + off..(y + off) * src_hw + off + crop_hw];
            dp[y * crop_hw..(y + 1) * crop_hw].copy_from_slice(srow);
        }
    }
    out
}

fn decode_pixels(img: &DynamicImage) -> Result<(usize, usize, usize, Vec<f64>), DataError> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w == 0 || h == 0 {
        return Err(DataError::UnsupportedImage { reason: "empty image".into() });
    }
    match img {
        DynamicImage::ImageLuma8(buf) => {
            let data: Vec<f64> = buf.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
            Ok((1, h, w, data))
        }
        DynamicImage::ImageRgb8(buf) => {
            // HWC u8 to CHW f64.
            let raw = buf.as_raw();
            let mut data = vec![0.0; 3 * h * w];
            for (i, px) in raw.chunks_exact(3).enumerate() {
                for c in 0..3 {
                    data[c * h * w + i] = px[c] as f64 / 255.0;
                }
            }
            Ok((3, h, w, data))
        }
        other => Err(DataError::UnsupportedImage {
            reason: format!("{:?} color type; expected 8-bit luma or rgb", other.color()),
        }),
    }
}

/// Resize to 260x260 and center crop to 250x250, values scaled to [0,1].
pub fn to_canonical(img: &DynamicImage) -> Result<CanonicalImage, DataError> {
    let (channels, h, w, data) = decode_pixels(img)?;
    let resized = bilinear_resize(&data, channels, h, w, RESIZE_HW, RESIZE_HW);
    let cropped = center_crop(&resized, channels, RESIZE_HW, CROP_HW);
    Ok(CanonicalImage { channels, hw: CROP_HW, data: cropped })
}

/// Per-channel population statistics over canonical training images.
pub fn compute_image_stats<'a, I>(images: I) -> Result<ImageStats, DataError>
where
    I: IntoIterator<Item = &'a CanonicalImage>,
{
    let images: Vec<&CanonicalImage> = images.into_iter().collect();
    let first = images.first().ok_or(DataError::EmptyDataset)?;
    let channels = first.channels;
    let mut count = 0usize;
    let mut sum = vec![0.0f64; channels];
    for img in &images {
        assert_eq!(img.channels, channels, "mixed channel counts in one dataset");
        let area = img.hw * img.hw;
        for c in 0..channels {
            sum[c] += img.data[c * area..(c + 1) * area].iter().sum::<f64>();
        }
        count += area;
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
    let mut var = vec![0.0f64; channels];
    for img in &images {
        let area = img.hw * img.hw;
        for c in 0..channels {
            var[c] += img.data[c * area..(c + 1) * area]
                .iter()
                .map(|v| (v - mean[c]) * (v - mean[c]))
                .sum::<f64>();
        }
    }
    let std: Vec<f64> = var.iter().map(|v| (v / count as f64).sqrt()).collect();
    Ok(ImageStats { mean, std })
}

/// Standardizes a canonical image: `(v - mean_c) / std_c`, with degenerate
/// channels passing through centered only.
pub fn standardize(img: &CanonicalImage, stats: &ImageStats) -> ImageSample {
    assert_eq!(img.channels, stats.mean.len());
    let area = img.hw * img.hw;
    let mut data = img.data.clone();
    for c in 0..img.channels {
        let m = stats.mean[c];
        let s = if stats.std[c] > DEGENERATE_STD { stats.std[c] } else { 1.0 };
        for v in &mut data[c * area..(c + 1) * area] {
            *v = (*v - m) / s;
        }
    }
    ImageSample { channels: img.channels, hw: img.hw, data }
}

/// Full preprocessing: resize, crop, scale, standardize.
pub fn preprocess_image(img: &DynamicImage, stats: &ImageStats) -> Result<ImageSample, DataError> {
    Ok(standardize(&to_canonical(img)?, stats))
}

/// Adaptive average pooling of a standardized image down to `size x size`,
/// used to produce the network input tensor.
pub fn pool_to_square(sample: &ImageSample, size: usize) -> Vec<f64> {
    let hw = sample.hw;
    assert!(size >= 1 && size <= hw);
    let area = hw * hw;
    let mut out = vec![0.0; sample.channels * size * size];
    for c in 0..sample.channels {
        let sp = &sample.data[c * area..(c + 1) * area];
        for oy in 0..size {
            let y0 = oy * hw / size;
            let y1 = (oy + 1) * hw / size;
            for ox in 0..size {
                let x0 = ox * hw / size;
                let x1 = (ox + 1) * hw / size;
                let mut acc = 0.0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        acc += sp[y * hw + x];
                    }
                }
                out[(c * size + oy) * size + ox] = acc / ((y1 - y0) * (x1 - x0)) as f64;
            }
        }
    }
    out
}

/// Opens an image file, resolving `image_ref` relative to the dataset root.
pub fn open_image(root: &Path, image_ref: &str) -> Result<DynamicImage, DataError> {
    let path = root.join(image_ref);
    image::open(&path).map_err(|e| DataError::UnsupportedImage {
        reason: format!("{}: {e}", path.display()),
    })
}
