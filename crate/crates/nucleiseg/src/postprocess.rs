//! Instance recovery from a foreground mask and a contour map.
//!
//! Seeds are the connected components of mask⊙(1−edge). Each seed then
//! grows outward, one 3×3 dilation per seed per round in ascending id
//! order, claiming still-unlabeled foreground pixels until the mask is
//! fully covered. Growth claims every foreground pixel, so no foreground
//! is lost to the contour subtraction. Foreground components that contain
//! no seed at all (everything eaten by the edge) would stall the loop;
//! they become fresh instances of their own once a round claims nothing.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMap {
    pub h: usize,
    pub w: usize,
    /// 0 or 1 per pixel, row-major.
    pub data: Vec<u8>,
}

impl BinaryMap {
    pub fn new(h: usize, w: usize, data: Vec<u8>) -> BinaryMap {
        assert_eq!(data.len(), h * w);
        debug_assert!(data.iter().all(|&v| v <= 1));
        BinaryMap { h, w, data }
    }

    pub fn zeros(h: usize, w: usize) -> BinaryMap {
        BinaryMap::new(h, w, vec![0; h * w])
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InstanceMap {
    pub h: usize,
    pub w: usize,
    /// 0 = background, k >= 1 = instance id, row-major.
    pub labels: Vec<u32>,
}

impl InstanceMap {
    pub fn new(h: usize, w: usize, labels: Vec<u32>) -> InstanceMap {
        assert_eq!(labels.len(), h * w);
        InstanceMap { h, w, labels }
    }

    pub fn num_instances(&self) -> usize {
        self.labels.iter().copied().max().unwrap_or(0) as usize
    }

    pub fn foreground(&self) -> BinaryMap {
        BinaryMap::new(
            self.h,
            self.w,
            self.labels.iter().map(|&l| u8::from(l > 0)).collect(),
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComponentStats {
    pub pixel_count: usize,
    /// (min_row, min_col, max_row, max_col), inclusive.
    pub bbox: (usize, usize, usize, usize),
    pub centroid: (f64, f64),
}

pub fn binarize(prob: &[f64], h: usize, w: usize, threshold: f64) -> BinaryMap {
    assert_eq!(prob.len(), h * w);
    BinaryMap::new(h, w, prob.iter().map(|&p| u8::from(p >= threshold)).collect())
}

const NEIGHBORS8: [(isize, isize); 8] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

/// 8-connected component labeling; ids are assigned in row-major
/// first-encounter order starting from 1.
pub fn connected_components(b: &BinaryMap) -> (InstanceMap, Vec<ComponentStats>) {
    let (h, w) = (b.h, b.w);
    let mut labels = vec![0u32; h * w];
    let mut stats = Vec::new();
    let mut stack = Vec::new();
    let mut next = 1u32;
    for start in 0..h * w {
        if b.data[start] == 0 || labels[start] != 0 {
            continue;
        }
        let id = next;
        next += 1;
        labels[start] = id;
        stack.push(start);
        let (mut count, mut sum_r, mut sum_c) = (0usize, 0usize, 0usize);
        let (mut r0, mut c0, mut r1, mut c1) = (usize::MAX, usize::MAX, 0, 0);
        while let Some(p) = stack.pop() {
            let (r, c) = (p / w, p % w);
            count += 1;
            sum_r += r;
            sum_c += c;
            r0 = r0.min(r);
            c0 = c0.min(c);
            r1 = r1.max(r);
            c1 = c1.max(c);
            for (dr, dc) in NEIGHBORS8 {
                let (nr, nc) = (r as isize + dr, c as isize + dc);
                if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                    continue;
                }
                let q = nr as usize * w + nc as usize;
                if b.data[q] != 0 && labels[q] == 0 {
                    labels[q] = id;
                    stack.push(q);
                }
            }
        }
        stats.push(ComponentStats {
            pixel_count: count,
            bbox: (r0, c0, r1, c1),
            centroid: (sum_r as f64 / count as f64, sum_c as f64 / count as f64),
        });
    }
    (InstanceMap::new(h, w, labels), stats)
}

/// One 3×3 (8-neighborhood) erosion; out-of-bounds counts as background.
pub fn erode(b: &BinaryMap) -> BinaryMap {
    let (h, w) = (b.h, b.w);
    let mut out = vec![0u8; h * w];
    for r in 0..h {
        for c in 0..w {
            if b.data[r * w + c] == 0 {
                continue;
            }
            let mut keep = r > 0 && c > 0 && r + 1 < h && c + 1 < w;
            if keep {
                for (dr, dc) in NEIGHBORS8 {
                    let q = ((r as isize + dr) as usize) * w + (c as isize + dc) as usize;
                    if b.data[q] == 0 {
                        keep = false;
                        break;
                    }
                }
            }
            out[r * w + c] = u8::from(keep);
        }
    }
    BinaryMap::new(h, w, out)
}

/// One 3×3 (8-neighborhood) dilation.
pub fn dilate(b: &BinaryMap) -> BinaryMap {
    let (h, w) = (b.h, b.w);
    let mut out = b.data.clone();
    for r in 0..h {
        for c in 0..w {
            if b.data[r * w + c] == 0 {
                continue;
            }
            for (dr, dc) in NEIGHBORS8 {
                let (nr, nc) = (r as isize + dr, c as isize + dc);
                if nr >= 0 && nc >= 0 && (nr as usize) < h && (nc as usize) < w {
                    out[nr as usize * w + nc as usize] = 1;
                }
            }
        }
    }
    BinaryMap::new(h, w, out)
}

pub fn is_mask_fully_covered(objects: &InstanceMap, mask: &BinaryMap) -> bool {
    objects
        .labels
        .iter()
        .zip(&mask.data)
        .all(|(&l, &m)| m == 0 || l != 0)
}

/// Splits the foreground into instances guided by the contour map.
pub fn instance_segment(mask: &BinaryMap, edge: &BinaryMap, erosion_iters: usize) -> Result<InstanceMap> {
    if mask.h != edge.h || mask.w != edge.w {
        return Err(Error::Dimension(format!(
            "instance_segment: mask {}×{} vs edge {}×{}",
            mask.h, mask.w, edge.h, edge.w
        )));
    }
    let (h, w) = (mask.h, mask.w);
    let mut seed_map = BinaryMap::new(
        h,
        w,
        mask.data
            .iter()
            .zip(&edge.data)
            .map(|(&m, &e)| m & (1 - e))
            .collect(),
    );
    for _ in 0..erosion_iters {
        seed_map = erode(&seed_map);
    }
    let (mut objects, _) = connected_components(&seed_map);
    let num = objects.num_instances() as u32;

    while !is_mask_fully_covered(&objects, mask) {
        let mut claimed_this_round = 0usize;
        for id in 1..=num {
            // one dilation of instance `id`, claiming unlabeled foreground
            let mut claims = Vec::new();
            for r in 0..h {
                for c in 0..w {
                    let p = r * w + c;
                    if mask.data[p] == 0 || objects.labels[p] != 0 {
                        continue;
                    }
                    for (dr, dc) in NEIGHBORS8 {
                        let (nr, nc) = (r as isize + dr, c as isize + dc);
                        if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                            continue;
                        }
                        if objects.labels[nr as usize * w + nc as usize] == id {
                            claims.push(p);
                            break;
                        }
                    }
                }
            }
            claimed_this_round += claims.len();
            for p in claims {
                objects.labels[p] = id;
            }
        }
        if claimed_this_round == 0 {
            // seedless foreground components: promote each to an instance
            let leftover = BinaryMap::new(
                h,
                w,
                mask.data
                    .iter()
                    .zip(&objects.labels)
                    .map(|(&m, &l)| u8::from(m != 0 && l == 0))
                    .collect(),
            );
            let (extra, _) = connected_components(&leftover);
            for (dst, &e) in objects.labels.iter_mut().zip(&extra.labels) {
                if e != 0 {
                    *dst = num + e;
                }
            }
            break;
        }
    }
    Ok(objects)
}
