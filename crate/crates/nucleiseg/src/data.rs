//! Dataset handling: PNG I/O, ground-truth derivation (foreground mask plus
//! a thickened contour band), augmentation, tiling, and a seeded synthetic
//! nucleus generator for small-scale experiments.
//!
//! Directory layout: `images/<id>.png` (8-bit RGB) next to `labels/<id>.png`
//! (16-bit grayscale, pixel value = instance id, 0 = background).

use std::fs;
use std::path::Path;

use image::{ImageBuffer, Luma, Rgb};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::postprocess::{dilate, BinaryMap, InstanceMap};
use crate::tensor::Tensor;

/// One image with its instance annotation. The image is stored
/// channel-major (3×H×W), values in [0,1].
#[derive(Clone)]
pub struct Sample {
    pub id: String,
    pub h: usize,
    pub w: usize,
    pub image: Vec<f64>,
    pub instances: InstanceMap,
}

impl Sample {
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(&[1, 3, self.h, self.w], self.image.clone())
    }
}

pub struct LabelPair {
    pub mask_gt: BinaryMap,
    pub edge_gt: BinaryMap,
}

/// Foreground mask plus contour band. A boundary pixel is a foreground
/// pixel with an 8-neighbor of a different label; pixels beyond the image
/// border count as background. The band is the boundary set dilated
/// `edge_width` times and may extend over background.
pub fn derive_targets(instances: &InstanceMap, edge_width: usize) -> Result<LabelPair> {
    if edge_width == 0 {
        return Err(Error::Usage("derive_targets: edge_width must be >= 1".into()));
    }
    let (h, w) = (instances.h, instances.w);
    let mut mask = vec![0u8; h * w];
    let mut boundary = vec![0u8; h * w];
    for r in 0..h {
        for c in 0..w {
            let label = instances.labels[r * w + c];
            if label == 0 {
                continue;
            }
            mask[r * w + c] = 1;
            let mut on_boundary = false;
            'probe: for dr in -1isize..=1 {
                for dc in -1isize..=1 {
                    if dr == 0 && dc == 0 {
                        continue;
                    }
                    let (nr, nc) = (r as isize + dr, c as isize + dc);
                    let neighbor = if nr >= 0 && nc >= 0 && (nr as usize) < h && (nc as usize) < w {
                        instances.labels[nr as usize * w + nc as usize]
                    } else {
                        0
                    };
                    if neighbor != label {
                        on_boundary = true;
                        break 'probe;
                    }
                }
            }
            boundary[r * w + c] = u8::from(on_boundary);
        }
    }
    let mut edge = BinaryMap::new(h, w, boundary);
    for _ in 0..edge_width {
        edge = dilate(&edge);
    }
    Ok(LabelPair {
        mask_gt: BinaryMap::new(h, w, mask),
        edge_gt: edge,
    })
}

impl LabelPair {
    pub fn mask_tensor(&self) -> Tensor {
        let (h, w) = (self.mask_gt.h, self.mask_gt.w);
        Tensor::from_vec(&[1, 1, h, w], self.mask_gt.data.iter().map(|&v| f64::from(v)).collect())
    }

    pub fn edge_tensor(&self) -> Tensor {
        let (h, w) = (self.edge_gt.h, self.edge_gt.w);
        Tensor::from_vec(&[1, 1, h, w], self.edge_gt.data.iter().map(|&v| f64::from(v)).collect())
    }
}

/// Independent RNG stream for one sample id, so concurrent loading cannot
/// change the draw order.
pub fn sample_rng(seed: u64, id: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(id.as_bytes());
    ChaCha8Rng::from_seed(hasher.finalize().into())
}

fn flip_h(_h: usize, w: usize, r: usize, c: usize) -> usize {
    r * w + (w - 1 - c)
}

fn flip_v(h: usize, w: usize, r: usize, c: usize) -> usize {
    (h - 1 - r) * w + c
}

fn remap(s: &Sample, out_h: usize, out_w: usize, source: impl Fn(usize, usize) -> usize) -> Sample {
    let plane = s.h * s.w;
    let mut image = vec![0.0; 3 * out_h * out_w];
    let mut labels = vec![0u32; out_h * out_w];
    for r in 0..out_h {
        for c in 0..out_w {
            let src = source(r, c);
            for ch in 0..3 {
                image[ch * out_h * out_w + r * out_w + c] = s.image[ch * plane + src];
            }
            labels[r * out_w + c] = s.instances.labels[src];
        }
    }
    Sample {
        id: s.id.clone(),
        h: out_h,
        w: out_w,
        image,
        instances: InstanceMap::new(out_h, out_w, labels),
    }
}

/// Random flips (p = 0.5 each) and a right-angle rotation, applied
/// identically to image and labels.
pub fn augment(s: &Sample, rng: &mut ChaCha8Rng) -> Sample {
    let hflip = rng.gen_bool(0.5);
    let vflip = rng.gen_bool(0.5);
    let quarter_turns = rng.gen_range(0u8..4);
    let (h, w) = (s.h, s.w);
    let mut out = remap(s, h, w, |r, c| {
        let mut idx = r * w + c;
        if hflip {
            idx = flip_h(h, w, r, c);
        }
        if vflip {
            let (rr, cc) = (idx / w, idx % w);
            idx = flip_v(h, w, rr, cc);
        }
        idx
    });
    for _ in 0..quarter_turns {
        // 90° counter-clockwise: out(r, c) = in(c, H_out - 1 - r) on a W×H grid
        let (ih, iw) = (out.h, out.w);
        out = remap(&out, iw, ih, |r, c| c * iw + (iw - 1 - r));
    }
    out
}

/// Free-angle rotation about the image center: nearest-neighbor for labels,
/// reflected image samples where the source falls outside the frame.
pub fn rotate_free(s: &Sample, angle_deg: f64) -> Sample {
    let (h, w) = (s.h, s.w);
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let reflect = |v: f64, n: usize| -> usize {
        let n = n as f64;
        let mut v = v;
        while v < 0.0 || v > n - 1.0 {
            if v < 0.0 {
                v = -v;
            }
            if v > n - 1.0 {
                v = 2.0 * (n - 1.0) - v;
            }
        }
        v.round() as usize
    };
    let plane = h * w;
    let mut image = vec![0.0; 3 * plane];
    let mut labels = vec![0u32; plane];
    for r in 0..h {
        for c in 0..w {
            let (dy, dx) = (r as f64 - cy, c as f64 - cx);
            let sy = cy + dy * cos - dx * sin;
            let sx = cx + dy * sin + dx * cos;
            let (ir, ic) = (reflect(sy, h), reflect(sx, w));
            for ch in 0..3 {
                image[ch * plane + r * w + c] = s.image[ch * plane + ir * w + ic];
            }
            // labels: only true in-frame sources, no reflected instances
            let (ry, rx) = (sy.round(), sx.round());
            if ry >= 0.0 && rx >= 0.0 && ry < h as f64 && rx < w as f64 {
                labels[r * w + c] = s.instances.labels[ry as usize * w + rx as usize];
            }
        }
    }
    Sample {
        id: s.id.clone(),
        h,
        w,
        image,
        instances: InstanceMap::new(h, w, labels),
    }
}

/// Relabels an instance map so ids are 1..=k in first-encounter order.
fn compact_labels(m: InstanceMap) -> InstanceMap {
    let mut next = 0u32;
    let mut map = std::collections::HashMap::new();
    let labels = m
        .labels
        .iter()
        .map(|&l| {
            if l == 0 {
                0
            } else {
                *map.entry(l).or_insert_with(|| {
                    next += 1;
                    next
                })
            }
        })
        .collect();
    InstanceMap::new(m.h, m.w, labels)
}

/// Overlapping `size`×`size` crops at the given stride; remainder tiles are
/// anchored to the image border so the whole image is covered.
pub fn tile(s: &Sample, size: usize, stride: usize) -> Result<Vec<Sample>> {
    if size == 0 || stride == 0 || size > s.h || size > s.w {
        return Err(Error::Usage(format!(
            "tile: size {size} / stride {stride} invalid for a {}×{} image",
            s.h, s.w
        )));
    }
    let anchors = |extent: usize| {
        let mut out = Vec::new();
        let mut at = 0;
        loop {
            out.push(at.min(extent - size));
            if at + size >= extent {
                break;
            }
            at += stride;
        }
        out.dedup();
        out
    };
    let mut tiles = Vec::new();
    for &r0 in &anchors(s.h) {
        for &c0 in &anchors(s.w) {
            let mut t = remap(s, size, size, |r, c| (r0 + r) * s.w + (c0 + c));
            t.id = format!("{}_r{r0}c{c0}", s.id);
            t.instances = compact_labels(t.instances);
            tiles.push(t);
        }
    }
    Ok(tiles)
}

/// Seeded synthetic nuclei: shaded elliptical blobs over a smooth
/// background with uniform pixel noise. `density` scales the number of
/// candidate nuclei (≈ density · size²/1000); `overlap` in [0,1] is the
/// largest allowed fraction of a new nucleus already covered by earlier
/// ones (candidates beyond it are re-drawn a few times, then dropped).
/// Later nuclei occlude earlier ones in the label map.
pub fn synth_generate(
    n_images: usize,
    size: usize,
    density: f64,
    overlap: f64,
    seed: u64,
) -> Result<Vec<Sample>> {
    if size < 8 {
        return Err(Error::Usage(format!("synth_generate: size {size} too small")));
    }
    if !(0.0..=1.0).contains(&overlap) || density < 0.0 {
        return Err(Error::Usage("synth_generate: density >= 0, overlap in [0,1]".into()));
    }
    let mut out = Vec::with_capacity(n_images);
    for i in 0..n_images {
        let id = format!("synth_{i:04}");
        let mut rng = sample_rng(seed, &id);
        out.push(synth_one(id, size, density, overlap, &mut rng));
    }
    Ok(out)
}

fn synth_one(id: String, size: usize, density: f64, overlap: f64, rng: &mut ChaCha8Rng) -> Sample {
    let plane = size * size;
    let n_nuclei = (density * plane as f64 / 1000.0).round() as usize;
    let mut labels = vec![0u32; plane];
    let mut height = vec![0.0f64; plane]; // per-pixel nucleus shading factor
    let mut placed = 0u32;
    for _ in 0..n_nuclei {
        for _attempt in 0..20 {
            let cy = rng.gen_range(0.0..size as f64);
            let cx = rng.gen_range(0.0..size as f64);
            let a = rng.gen_range(size as f64 / 16.0..size as f64 / 8.0).max(2.0);
            let b = rng.gen_range(size as f64 / 16.0..size as f64 / 8.0).max(2.0);
            let (sin, cos) = rng.gen_range(0.0..std::f64::consts::PI).sin_cos();
            let mut pixels = Vec::new();
            let mut covered = 0usize;
            let reach = a.max(b).ceil() as isize + 1;
            for dr in -reach..=reach {
                for dc in -reach..=reach {
                    let (r, c) = (cy.round() as isize + dr, cx.round() as isize + dc);
                    if r < 0 || c < 0 || r >= size as isize || c >= size as isize {
                        continue;
                    }
                    let (dy, dx) = (r as f64 - cy, c as f64 - cx);
                    let u = (dy * cos + dx * sin) / a;
                    let v = (-dy * sin + dx * cos) / b;
                    let rr = u * u + v * v;
                    if rr <= 1.0 {
                        let idx = r as usize * size + c as usize;
                        if labels[idx] != 0 {
                            covered += 1;
                        }
                        pixels.push((idx, rr));
                    }
                }
            }
            if pixels.is_empty() || covered as f64 > overlap * pixels.len() as f64 {
                continue;
            }
            placed += 1;
            for &(idx, rr) in &pixels {
                labels[idx] = placed;
                height[idx] = 1.0 - 0.35 * rr;
            }
            break;
        }
    }
    // smooth background shading plus a faint diagonal gradient
    let base = rng.gen_range(0.10..0.25);
    let slope_r = rng.gen_range(-0.08..0.08);
    let slope_c = rng.gen_range(-0.08..0.08);
    let tint = [
        rng.gen_range(0.85..1.0),
        rng.gen_range(0.85..1.0),
        rng.gen_range(0.85..1.0),
    ];
    let nucleus_level = rng.gen_range(0.55..0.85);
    let mut image = vec![0.0; 3 * plane];
    for r in 0..size {
        for c in 0..size {
            let idx = r * size + c;
            let bg = base + slope_r * r as f64 / size as f64 + slope_c * c as f64 / size as f64;
            let value = bg + height[idx] * (nucleus_level - bg);
            for ch in 0..3 {
                let noisy = value * tint[ch] + rng.gen_range(-0.02..0.02);
                image[ch * plane + idx] = noisy.clamp(0.0, 1.0);
            }
        }
    }
    Sample {
        id,
        h: size,
        w: size,
        image,
        instances: InstanceMap::new(size, size, labels),
    }
}

// ---- PNG I/O ----

pub fn save_image_png(s: &Sample, path: &Path) -> Result<()> {
    let plane = s.h * s.w;
    let buf = ImageBuffer::from_fn(s.w as u32, s.h as u32, |x, y| {
        let idx = y as usize * s.w + x as usize;
        Rgb([0, 1, 2].map(|ch| (s.image[ch * plane + idx] * 255.0).round().clamp(0.0, 255.0) as u8))
    });
    buf.save(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

pub fn save_instances_png(m: &InstanceMap, path: &Path) -> Result<()> {
    if let Some(&max) = m.labels.iter().max() {
        if max > u32::from(u16::MAX) {
            return Err(Error::Data(format!("label {max} exceeds 16-bit PNG range")));
        }
    }
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(m.w as u32, m.h as u32, |x, y| {
        Luma([m.labels[y as usize * m.w + x as usize] as u16])
    });
    buf.save(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// 16-bit grayscale probability map, value = round(p · 65535).
pub fn save_prob_png(prob: &[f64], h: usize, w: usize, path: &Path) -> Result<()> {
    if prob.len() != h * w {
        return Err(Error::Dimension(format!(
            "probability map has {} values, expected {h}×{w}",
            prob.len()
        )));
    }
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Luma([(prob[y as usize * w + x as usize].clamp(0.0, 1.0) * 65535.0).round() as u16])
    });
    buf.save(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

pub fn load_image_png(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = h * w;
    let mut data = vec![0.0; 3 * plane];
    for (x, y, px) in img.enumerate_pixels() {
        let idx = y as usize * w + x as usize;
        for ch in 0..3 {
            data[ch * plane + idx] = f64::from(px.0[ch]) / 255.0;
        }
    }
    Ok((h, w, data))
}

pub fn load_instances_png(path: &Path) -> Result<InstanceMap> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .to_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let labels = img.pixels().map(|p| u32::from(p.0[0])).collect();
    Ok(InstanceMap::new(h, w, labels))
}

pub fn load_prob_png(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .to_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.pixels().map(|p| f64::from(p.0[0]) / 65535.0).collect();
    Ok((h, w, data))
}

pub fn save_dataset(samples: &[Sample], dir: &Path) -> Result<()> {
    let images = dir.join("images");
    let labels = dir.join("labels");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    fs::create_dir_all(&labels).map_err(|e| Error::io(&labels, e))?;
    for s in samples {
        save_image_png(s, &images.join(format!("{}.png", s.id)))?;
        save_instances_png(&s.instances, &labels.join(format!("{}.png", s.id)))?;
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let images = dir.join("images");
    let mut ids = Vec::new();
    for entry in fs::read_dir(&images).map_err(|e| Error::io(&images, e))? {
        let entry = entry.map_err(|e| Error::io(&images, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(stem) = name.strip_suffix(".png") {
            ids.push(stem.to_string());
        }
    }
    ids.sort();
    if ids.is_empty() {
        return Err(Error::Data(format!("no PNG images under {}", images.display())));
    }
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let (h, w, image) = load_image_png(&images.join(format!("{id}.png")))?;
        let instances = load_instances_png(&dir.join("labels").join(format!("{id}.png")))?;
        if instances.h != h || instances.w != w {
            return Err(Error::Data(format!(
                "sample {id}: image is {h}×{w} but labels are {}×{}",
                instances.h, instances.w
            )));
        }
        out.push(Sample {
            id,
            h,
            w,
            image,
            instances,
        });
    }
    Ok(out)
}
