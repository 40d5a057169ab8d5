//! Half-pixel-centred linear interpolation taps (the `align_corners = false`
//! convention). Shared by image resizing, the attention pyramid's upsampling
//! and heatmap upsampling so all three agree on pixel geometry.

/// One output sample: blend of `lo` and `hi` with weight `frac` on `hi`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub frac: f64,
}

pub fn linear_taps(in_len: usize, out_len: usize) -> Vec<Tap> {
    assert!(in_len > 0 && out_len > 0, "interpolation over an empty axis");
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|dst| {
            let src = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            let frac = if hi == lo { 0.0 } else { src - lo as f64 };
            Tap { lo, hi, frac }
        })
        .collect()
}

/// Dense `out_len x in_len` interpolation matrix, row-major.
pub fn linear_matrix(in_len: usize, out_len: usize) -> Vec<f64> {
    let mut m = vec![0.0; out_len * in_len];
    for (row, tap) in linear_taps(in_len, out_len).into_iter().enumerate() {
        m[row * in_len + tap.lo] += 1.0 - tap.frac;
        m[row * in_len + tap.hi] += tap.frac;
    }
    m
}

/// Bilinear resize of a single-channel `h x w` grid.
pub fn resize_grid(grid: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    assert_eq!(grid.len(), h * w);
    let ty = linear_taps(h, out_h);
    let tx = linear_taps(w, out_w);
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in &ty {
        for x in &tx {
            let a = grid[y.lo * w + x.lo] * (1.0 - x.frac) + grid[y.lo * w + x.hi] * x.frac;
            let b = grid[y.hi * w + x.lo] * (1.0 - x.frac) + grid[y.hi * w + x.hi] * x.frac;
            out.push(a * (1.0 - y.frac) + b * y.frac);
        }
    }
    out
}
