//! Image resampling with the half-pixel-center convention.

use super::{DataError, GrayImage};

fn src_coord(dst: usize, scale: f64) -> f64 {
    (dst as f64 + 0.5) * scale - 0.5
}

/// Bilinear interpolation; source pixels sit at half-integer centers
/// (align-corners false).
pub fn resize_bilinear(img: &GrayImage, out_h: usize, out_w: usize) -> Result<GrayImage, DataError> {
    if out_h == 0 || out_w == 0 {
        return Err(DataError::EmptyResize);
    }
    if out_h == img.h && out_w == img.w {
        return Ok(img.clone());
    }
    let (sy, sx) = (img.h as f64 / out_h as f64, img.w as f64 / out_w as f64);
    let mut data = vec![0.0f32; out_h * out_w];
    for oy in 0..out_h {
        let y = src_coord(oy, sy).clamp(0.0, (img.h - 1) as f64);
        let y0 = (y.floor() as usize).min(img.h - 1);
        let y1 = (y0 + 1).min(img.h - 1);
        let fy = y - y0 as f64;
        for ox in 0..out_w {
            let x = src_coord(ox, sx).clamp(0.0, (img.w - 1) as f64);
            let x0 = (x.floor() as usize).min(img.w - 1);
            let x1 = (x0 + 1).min(img.w - 1);
            let fx = x - x0 as f64;
            let p = |yy: usize, xx: usize| f64::from(img.data[yy * img.w + xx]);
            let top = (1.0 - fx) * p(y0, x0) + fx * p(y0, x1);
            let bottom = (1.0 - fx) * p(y1, x0) + fx * p(y1, x1);
            data[oy * out_w + ox] = ((1.0 - fy) * top + fy * bottom) as f32;
        }
    }
    Ok(GrayImage {
        w: out_w,
        h: out_h,
        data,
    })
}

/// Nearest-neighbor resampling; keeps masks binary.
pub fn resize_nearest(img: &GrayImage, out_h: usize, out_w: usize) -> Result<GrayImage, DataError> {
    if out_h == 0 || out_w == 0 {
        return Err(DataError::EmptyResize);
    }
    let (sy, sx) = (img.h as f64 / out_h as f64, img.w as f64 / out_w as f64);
    let mut data = vec![0.0f32; out_h * out_w];
    for oy in 0..out_h {
        let y = src_coord(oy, sy).round().clamp(0.0, (img.h - 1) as f64) as usize;
        for ox in 0..out_w {
            let x = src_coord(ox, sx).round().clamp(0.0, (img.w - 1) as f64) as usize;
            data[oy * out_w + ox] = img.data[y * img.w + x];
        }
    }
    Ok(GrayImage {
        w: out_w,
        h: out_h,
        data,
    })
}
