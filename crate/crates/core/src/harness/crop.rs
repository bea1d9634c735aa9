//! Square crops around a box, resampled bilinearly with clamp-to-edge.

use crate::head::BoxN;
use crate::tensor::Tensor;
use crate::tokenizer::CHANNELS;

/// Search and template regions span this multiple of `sqrt(w·h)`.
pub const CROP_FACTOR: f32 = 2.0;

/// A square window in frame pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropWindow {
    pub x0: f32,
    pub y0: f32,
    pub side: f32,
}

impl CropWindow {
    /// Centred on `b`, side `factor·sqrt(w·h)` pixels (at least 4).
    pub fn around(b: &BoxN, frame: (usize, usize), factor: f32) -> CropWindow {
        let (fh, fw) = (frame.0 as f32, frame.1 as f32);
        let side = (factor * (b.w * fw * b.h * fh).sqrt()).max(4.0);
        CropWindow { x0: b.cx * fw - side / 2.0, y0: b.cy * fh - side / 2.0, side }
    }

    /// Express a frame-normalised box in crop-normalised coordinates.
    pub fn box_to_crop(&self, b: &BoxN, frame: (usize, usize)) -> BoxN {
        let (fh, fw) = (frame.0 as f32, frame.1 as f32);
        BoxN {
            cx: (b.cx * fw - self.x0) / self.side,
            cy: (b.cy * fh - self.y0) / self.side,
            w: b.w * fw / self.side,
            h: b.h * fh / self.side,
        }
    }

    /// Inverse of [`CropWindow::box_to_crop`].
    pub fn box_to_frame(&self, b: &BoxN, frame: (usize, usize)) -> BoxN {
        let (fh, fw) = (frame.0 as f32, frame.1 as f32);
        BoxN {
            cx: (self.x0 + b.cx * self.side) / fw,
            cy: (self.y0 + b.cy * self.side) / fh,
            w: b.w * self.side / fw,
            h: b.h * self.side / fh,
        }
    }
}

/// Resample `win` of a `[3×H×W]` frame to `[3×out×out]`. Pixels outside the
/// frame take the nearest edge value.
pub fn crop_resize(frame: &Tensor, win: &CropWindow, out: usize) -> Tensor {
    let (h, w) = (frame.shape()[1], frame.shape()[2]);
    let src = frame.data();
    let step = win.side / out as f32;
    let axis = |origin: f32, limit: usize| -> Vec<(usize, usize, f32)> {
        (0..out)
            .map(|i| {
                let p = (origin + (i as f32 + 0.5) * step - 0.5).clamp(0.0, (limit - 1) as f32);
                let lo = p.floor() as usize;
                let hi = (lo + 1).min(limit - 1);
                (lo, hi, p - lo as f32)
            })
            .collect()
    };
    let xs = axis(win.x0, w);
    let ys = axis(win.y0, h);
    let mut dst = Vec::with_capacity(CHANNELS * out * out);
    for c in 0..CHANNELS {
        let plane = &src[c * h * w..(c + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                dst.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Tensor::new([CHANNELS, out, out], dst).expect("crop buffer matches its shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_round_trip() {
        let b = BoxN { cx: 0.3, cy: 0.6, w: 0.2, h: 0.1 };
        let win = CropWindow::around(&b, (128, 128), CROP_FACTOR);
        let c = win.box_to_crop(&b, (128, 128));
        assert!((c.cx - 0.5).abs() < 1e-6 && (c.cy - 0.5).abs() < 1e-6);
        let back = win.box_to_frame(&c, (128, 128));
        assert!(back.iou(&b) > 1.0 - 1e-5);
    }

    #[test]
    fn identity_crop_reproduces_frame() {
        let data: Vec<f32> = (0..3 * 8 * 8).map(|v| v as f32).collect();
        let f = Tensor::new([3, 8, 8], data).unwrap();
        let win = CropWindow { x0: 0.0, y0: 0.0, side: 8.0 };
        assert_eq!(crop_resize(&f, &win, 8), f);
    }

    #[test]
    fn outside_pixels_clamp_to_edge() {
        let f = Tensor::filled([3, 4, 4], 0.7);
        let win = CropWindow { x0: -10.0, y0: -10.0, side: 6.0 };
        assert!(crop_resize(&f, &win, 5).data().iter().all(|&v| (v - 0.7).abs() < 1e-6));
    }
}
