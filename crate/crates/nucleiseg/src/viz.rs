//! Color rendering of instance label maps: one deterministic color per
//! label (golden-ratio hue stepping) with an optional boundary overlay.

use crate::postprocess::InstanceMap;

const GOLDEN_RATIO_CONJUGATE: f64 = 0.618_033_988_749_894_9;

/// HSV → RGB with s = 0.75, v = 0.95.
fn hue_to_rgb(hue: f64) -> [u8; 3] {
    let (s, v) = (0.75, 0.95);
    let h6 = (hue.fract() * 6.0).rem_euclid(6.0);
    let f = h6.fract();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    let (r, g, b) = match h6 as u32 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [r, g, b].map(|x| (x * 255.0).round() as u8)
}

/// Color for one label id; background (0) is black.
pub fn label_color(label: u32) -> [u8; 3] {
    if label == 0 {
        return [0, 0, 0];
    }
    hue_to_rgb(f64::from(label) * GOLDEN_RATIO_CONJUGATE)
}

/// Renders the label map as interleaved RGB rows. With `boundaries`,
/// pixels whose 4-neighbor carries a different label are drawn white.
pub fn render(m: &InstanceMap, boundaries: bool) -> Vec<u8> {
    let (h, w) = (m.h, m.w);
    let mut out = vec![0u8; 3 * h * w];
    for r in 0..h {
        for c in 0..w {
            let label = m.labels[r * w + c];
            let mut px = label_color(label);
            if boundaries && label != 0 {
                let differs = [(0isize, 1isize), (1, 0), (0, -1), (-1, 0)].iter().any(|&(dr, dc)| {
                    let (nr, nc) = (r as isize + dr, c as isize + dc);
                    nr >= 0
                        && nc >= 0
                        && (nr as usize) < h
                        && (nc as usize) < w
                        && m.labels[nr as usize * w + nc as usize] != label
                });
                if differs {
                    px = [255, 255, 255];
                }
            }
            out[(r * w + c) * 3..(r * w + c) * 3 + 3].copy_from_slice(&px);
        }
    }
    out
}
