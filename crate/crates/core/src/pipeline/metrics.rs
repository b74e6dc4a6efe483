//! Frame-quality and alignment metrics.

use serde::{Deserialize, Serialize};

use crate::env::{Frame, GRID, PLANE_LEN};

/// PSNR reported for identical frames.
pub const PSNR_CAP_DB: f64 = 99.0;
pub const SSIM_WINDOW: usize = 8;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VideoQuality {
    pub mse: f64,
    pub psnr_db: f64,
    pub ssim: f64,
}

pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "mse operands differ in length");
    if a.is_empty() {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}

/// `10 log10(1 / mse)` for unit-range pixels, capped for exact matches.
pub fn psnr_db(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP_DB
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
    }
}

/// Per-pixel mean over the three planes.
pub fn luminance(frame: &Frame) -> Vec<f64> {
    (0..PLANE_LEN)
        .map(|i| (frame.data[i] + frame.data[PLANE_LEN + i] + frame.data[2 * PLANE_LEN + i]) / 3.0)
        .collect()
}

/// Mean SSIM over every 8x8 window (stride 1) of two 16x16 images, using
/// population statistics inside each window.
pub fn ssim_image(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), PLANE_LEN);
    assert_eq!(y.len(), PLANE_LEN);
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let span = GRID - SSIM_WINDOW + 1;
    let mut total = 0.0;
    for i0 in 0..span {
        for j0 in 0..span {
            let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in i0..i0 + SSIM_WINDOW {
                for j in j0..j0 + SSIM_WINDOW {
                    let (a, b) = (x[i * GRID + j], y[i * GRID + j]);
                    sx += a;
                    sy += b;
                    sxx += a * a;
                    syy += b * b;
                    sxy += a * b;
                }
            }
            let (mx, my) = (sx / n, sy / n);
            let vx = (sxx / n - mx * mx).max(0.0);
            let vy = (syy / n - my * my).max(0.0);
            let cxy = sxy / n - mx * my;
            total += ((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
        }
    }
    total / (span * span) as f64
}

pub fn ssim(a: &Frame, b: &Frame) -> f64 {
    ssim_image(&luminance(a), &luminance(b))
}

/// Aggregates predicted/true frame pairs: pixel MSE over everything, PSNR of
/// that MSE, SSIM averaged per frame.
pub fn video_quality<'a>(pairs: impl IntoIterator<Item = (&'a Frame, &'a Frame)>) -> VideoQuality {
    let (mut se, mut px, mut ss, mut n) = (0.0, 0usize, 0.0, 0usize);
    for (p, t) in pairs {
        se += mse(&p.data, &t.data) * p.data.len() as f64;
        px += p.data.len();
        ss += ssim(p, t);
        n += 1;
    }
    if n == 0 {
        return VideoQuality::default();
    }
    let m = se / px as f64;
    VideoQuality {
        mse: m,
        psnr_db: psnr_db(m),
        ssim: ss / n as f64,
    }
}

/// Percentage of positions where `judged` agrees with `truth`.
pub fn agreement_pct(judged: &[bool], truth: &[bool]) -> f64 {
    assert_eq!(judged.len(), truth.len());
    if truth.is_empty() {
        return 0.0;
    }
    let hits = judged.iter().zip(truth).filter(|(a, b)| a == b).count();
    100.0 * hits as f64 / truth.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn frame(f: impl Fn(usize) -> f64) -> Frame {
        Frame::from_data((0..crate::env::FRAME_LEN).map(f).collect()).unwrap()
    }

    #[test]
    fn identical_frames() {
        let a = frame(|i| (i % 13) as f64 / 13.0);
        let q = video_quality([(&a, &a)]);
        assert_eq!(q.mse, 0.0);
        assert_eq!(q.psnr_db, PSNR_CAP_DB);
        assert!((q.ssim - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_against_one() {
        let (z, o) = (frame(|_| 0.0), frame(|_| 1.0));
        let q = video_quality([(&z, &o)]);
        assert_eq!(q.mse, 1.0);
        assert_eq!(q.psnr_db, 0.0);
    }

    #[test]
    fn constant_shift_matches_closed_form() {
        // Same variance and covariance in every window, so only the luminance
        // term survives: (2 mu (mu + d) + C1) / (mu^2 + (mu + d)^2 + C1),
        // averaged over the windows' means.
        let a = frame(|i| 0.2 + 0.5 * ((i % PLANE_LEN) % GRID) as f64 / GRID as f64);
        let b = frame(|i| a.data[i] + 0.1);
        let la = luminance(&a);
        let n = GRID - SSIM_WINDOW + 1;
        let mut expected = 0.0;
        for wy in 0..n {
            for wx in 0..n {
                let mut mu = 0.0;
                for y in wy..wy + SSIM_WINDOW {
                    for x in wx..wx + SSIM_WINDOW {
                        mu += la[y * GRID + x];
                    }
                }
                mu /= (SSIM_WINDOW * SSIM_WINDOW) as f64;
                let m2 = mu + 0.1;
                expected += (2.0 * mu * m2 + SSIM_C1) / (mu * mu + m2 * m2 + SSIM_C1);
            }
        }
        expected /= (n * n) as f64;
        assert!((ssim(&a, &b) - expected).abs() < 1e-12, "{} vs {expected}", ssim(&a, &b));
    }

    #[test]
    fn agreement_of_constant_judges_is_class_fraction() {
        let truth = [true, false, false, true, false];
        assert_eq!(agreement_pct(&[true; 5], &truth), 40.0);
        assert_eq!(agreement_pct(&[false; 5], &truth), 60.0);
    }

    proptest! {
        #[test]
        fn psnr_mse_relation(mse in 1e-9f64..10.0) {
            prop_assert!((psnr_db(mse) - (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)).abs() <= 1e-9);
        }

        #[test]
        fn ssim_self_and_symmetry(a in prop::collection::vec(0.0f64..1.0, crate::env::FRAME_LEN),
                                  b in prop::collection::vec(0.0f64..1.0, crate::env::FRAME_LEN)) {
            let (a, b) = (Frame::from_data(a).unwrap(), Frame::from_data(b).unwrap());
            prop_assert!((ssim(&a, &a) - 1.0).abs() <= 1e-12);
            prop_assert!((ssim(&a, &b) - ssim(&b, &a)).abs() <= 1e-12);
            let s = ssim(&a, &b);
            prop_assert!((-1.0..=1.0).contains(&s));
        }
    }
}
