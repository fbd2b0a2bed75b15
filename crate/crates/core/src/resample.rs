//! Bilinear resampling with half-pixel centres (`align_corners = false`).
//!
//! Output pixel `i` samples source coordinate `(i + 0.5) * in / out - 0.5`,
//! clamped to the valid range. No antialiasing is applied on downscale.

use crate::tensor::Element;

/// Source taps for one output coordinate: two indices and the weight of the
/// second one.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

fn taps(in_len: usize, out_len: usize) -> Vec<Tap> {
    let ratio = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|i| {
            let src = ((i as f64 + 0.5) * ratio - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            let frac = if lo == hi { 0.0 } else { src - lo as f64 };
            Tap { lo, hi, frac }
        })
        .collect()
}

/// Resizes one row-major `in_h x in_w` plane to `out_h x out_w`.
///
/// # Panics
///
/// If `src.len() != in_h * in_w` or any extent is zero.
pub fn resize_plane<F: Element>(
    src: &[F],
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<F> {
    assert!(
        in_h > 0 && in_w > 0 && out_h > 0 && out_w > 0,
        "empty plane"
    );
    assert_eq!(src.len(), in_h * in_w, "plane length");
    if in_h == out_h && in_w == out_w {
        return src.to_vec();
    }
    let rows = taps(in_h, out_h);
    let cols = taps(in_w, out_w);
    let mut out = Vec::with_capacity(out_h * out_w);
    for r in &rows {
        let wy = F::from_f64(r.frac);
        let top = &src[r.lo * in_w..(r.lo + 1) * in_w];
        let bottom = &src[r.hi * in_w..(r.hi + 1) * in_w];
        for c in &cols {
            let wx = F::from_f64(c.frac);
            // lerp form keeps constant regions exactly constant
            let upper = top[c.lo] + (top[c.hi] - top[c.lo]) * wx;
            let lower = bottom[c.lo] + (bottom[c.hi] - bottom[c.lo]) * wx;
            out.push(upper + (lower - upper) * wy);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_size_is_a_copy() {
        let src: Vec<f32> = (0..12).map(|i| i as f32).collect();
        assert_eq!(resize_plane(&src, 3, 4, 3, 4), src);
    }

    #[test]
    fn halving_averages_pixel_pairs() {
        // 2:1 downscale samples exactly between source pixels 2i and 2i+1.
        let src: Vec<f64> = (0..16).map(|i| (i * i) as f64).collect();
        let out = resize_plane(&src, 4, 4, 2, 2);
        let at = |r: usize, c: usize| src[r * 4 + c];
        for (i, &v) in out.iter().enumerate() {
            let (r, c) = (2 * (i / 2), 2 * (i % 2));
            let expected = (at(r, c) + at(r, c + 1) + at(r + 1, c) + at(r + 1, c + 1)) / 4.0;
            assert!((v - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn single_pixel_expands_to_constant() {
        let out = resize_plane(&[0.25f32], 1, 1, 5, 3);
        assert!(out.iter().all(|&v| v == 0.25));
    }
}
