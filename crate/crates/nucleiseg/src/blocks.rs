//! Building blocks of the segmentation network: the residual U-block
//! (a small U-shaped encoder-decoder wrapped in a residual sum) and the
//! context fusion block that merges the six side-output maps.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, Linear, ParamSet};
use crate::tensor::{concat_channels, PoolMode, Tensor};

/// 3×3 conv + per-channel batch norm + ReLU, the unit every block level
/// is made of.
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBnRelu {
    pub fn new(rng: &mut ChaCha8Rng, cin: usize, cout: usize, dilation: usize) -> ConvBnRelu {
        ConvBnRelu {
            conv: Conv2d::new(rng, cin, cout, 3, 1, dilation, dilation),
            bn: BatchNorm2d::new(cout),
        }
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        Ok(self.bn.forward(&self.conv.forward(x)?, train)?.relu())
    }

    pub fn collect(&self, prefix: &str, set: &mut ParamSet) {
        self.conv.collect(&format!("{prefix}.conv"), set);
        self.bn.collect(&format!("{prefix}.bn"), set);
    }
}

/// Residual U-block of height `n`: an input convolution to `c_out` followed
/// by an internal U-shaped encoder-decoder at width `c_mid`, with the two
/// paths summed. The dilated variant keeps full resolution at every level
/// and doubles the dilation rate instead of pooling.
pub struct RsuBlock {
    pub height: usize,
    pub dilated: bool,
    conv_in: ConvBnRelu,
    enc: Vec<ConvBnRelu>,
    bottom: ConvBnRelu,
    dec: Vec<ConvBnRelu>,
}

impl RsuBlock {
    pub fn new(
        rng: &mut ChaCha8Rng,
        height: usize,
        c_in: usize,
        c_mid: usize,
        c_out: usize,
        dilated: bool,
    ) -> Result<RsuBlock> {
        if height < 2 {
            return Err(Error::Config(format!("rsu height must be >= 2, got {height}")));
        }
        let n = height;
        let dil = |level: usize| if dilated { 1 << level } else { 1 };
        let conv_in = ConvBnRelu::new(rng, c_in, c_out, 1);
        let mut enc = Vec::with_capacity(n - 1);
        enc.push(ConvBnRelu::new(rng, c_out, c_mid, dil(0)));
        for i in 1..n - 1 {
            enc.push(ConvBnRelu::new(rng, c_mid, c_mid, dil(i)));
        }
        let bottom = ConvBnRelu::new(rng, c_mid, c_mid, if dilated { 1 << (n - 1) } else { 2 });
        let mut dec = Vec::with_capacity(n - 1);
        dec.push(ConvBnRelu::new(rng, 2 * c_mid, c_out, dil(0)));
        for i in 1..n - 1 {
            dec.push(ConvBnRelu::new(rng, 2 * c_mid, c_mid, dil(i)));
        }
        Ok(RsuBlock {
            height,
            dilated,
            conv_in,
            enc,
            bottom,
            dec,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let n = self.height;
        let (h, w) = (x.shape()[2], x.shape()[3]);
        if !self.dilated {
            let need = 1usize << (n - 1);
            if h < need || w < need {
                return Err(Error::Config(format!(
                    "rsu of height {n} needs spatial size >= {need}, got {h}×{w}"
                )));
            }
        }
        let fx = self.conv_in.forward(x, train)?;
        let mut feats = Vec::with_capacity(n - 1);
        let mut cur = fx.clone();
        for (i, conv) in self.enc.iter().enumerate() {
            if i > 0 && !self.dilated {
                cur = cur.maxpool2d(2, 2)?;
            }
            cur = conv.forward(&cur, train)?;
            feats.push(cur.clone());
        }
        let mut up = self.bottom.forward(&cur, train)?;
        for i in (0..n - 1).rev() {
            let cat = concat_channels(&[up, feats[i].clone()])?;
            up = self.dec[i].forward(&cat, train)?;
            if i > 0 && !self.dilated {
                let target = feats[i - 1].shape();
                up = up.upsample_bilinear(target[2], target[3])?;
            }
        }
        fx.add(&up)
    }

    pub fn collect(&self, prefix: &str, set: &mut ParamSet) {
        self.conv_in.collect(&format!("{prefix}.conv_in"), set);
        for (i, e) in self.enc.iter().enumerate() {
            e.collect(&format!("{prefix}.enc{i}"), set);
        }
        self.bottom.collect(&format!("{prefix}.bottom"), set);
        for (i, d) in self.dec.iter().enumerate() {
            d.collect(&format!("{prefix}.dec{i}"), set);
        }
    }

    /// Parameter handles of the internal U only (everything but the input
    /// convolution); used by the residual-path tests.
    #[cfg(test)]
    fn internal_params(&self) -> ParamSet {
        let mut set = ParamSet::default();
        for (i, e) in self.enc.iter().enumerate() {
            e.collect(&format!("enc{i}"), &mut set);
        }
        self.bottom.collect("bottom", &mut set);
        for (i, d) in self.dec.iter().enumerate() {
            d.collect(&format!("dec{i}"), &mut set);
        }
        set
    }
}

pub const CF_SIDE_COUNT: usize = 6;

/// Context fusion: resizes the six single-channel side maps to the target
/// resolution, stacks them, reweights the six channels with squeeze-style
/// weights from global avg+max pooling, and projects to one channel with a
/// 3×3 convolution. Output is pre-sigmoid logits.
pub struct CfBlock {
    fc1: Linear,
    fc2: Linear,
    out_conv: Conv2d,
}

impl CfBlock {
    pub fn new(rng: &mut ChaCha8Rng) -> CfBlock {
        let c = CF_SIDE_COUNT;
        CfBlock {
            fc1: Linear::new(rng, c, c),
            fc2: Linear::new(rng, c, c),
            out_conv: Conv2d::new(rng, c, 1, 3, 1, 1, 1),
        }
    }

    pub fn forward(&self, sides: &[Tensor], out_h: usize, out_w: usize) -> Result<Tensor> {
        self.forward_mode(sides, out_h, out_w, true)
    }

    /// `weighted = false` drops the squeeze reweighting and fuses the plain
    /// concatenation (ablation mode only).
    pub fn forward_mode(
        &self,
        sides: &[Tensor],
        out_h: usize,
        out_w: usize,
        weighted: bool,
    ) -> Result<Tensor> {
        if sides.len() != CF_SIDE_COUNT {
            return Err(Error::Config(format!(
                "context fusion expects {CF_SIDE_COUNT} side maps, got {}",
                sides.len()
            )));
        }
        let mut resized = Vec::with_capacity(CF_SIDE_COUNT);
        for s in sides {
            resized.push(s.upsample_bilinear(out_h, out_w)?);
        }
        let stacked = concat_channels(&resized)?;
        let fused = if weighted {
            let n = stacked.shape()[0];
            let c = CF_SIDE_COUNT;
            let avg = stacked.global_pool(PoolMode::Avg)?.reshape(&[n, c])?;
            let max = stacked.global_pool(PoolMode::Max)?.reshape(&[n, c])?;
            let avg_path = self.fc2.forward(&self.fc1.forward(&avg)?.relu())?;
            let max_path = self.fc2.forward(&self.fc1.forward(&max)?.relu())?;
            let weights = avg_path.add(&max_path)?.sigmoid().reshape(&[n, c, 1, 1])?;
            stacked.mul_broadcast(&weights)?
        } else {
            stacked
        };
        self.out_conv.forward(&fused)
    }

    pub fn collect(&self, prefix: &str, set: &mut ParamSet) {
        self.fc1.collect(&format!("{prefix}.fc1"), set);
        self.fc2.collect(&format!("{prefix}.fc2"), set);
        self.out_conv.collect(&format!("{prefix}.out_conv"), set);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_check;
    use crate::tensor::slice_channels;
    use rand::{Rng, SeedableRng};

    fn rand_input(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        Tensor::param(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn rsu_residual_identity_with_zeroed_internal_u() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rsu = RsuBlock::new(&mut rng, 4, 3, 4, 8, false).unwrap();
        for (_, p) in &rsu.internal_params().params {
            p.set_data(&vec![0.0; p.numel()]);
        }
        let x = rand_input(&[1, 3, 16, 16], 2);
        let y = rsu.forward(&x, true).unwrap();
        let fx = rsu.conv_in.forward(&x, true).unwrap();
        assert_eq!(*y.data(), *fx.data());
    }

    #[test]
    fn rsu_shape_contract_height_7() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rsu = RsuBlock::new(&mut rng, 7, 3, 4, 8, false).unwrap();
        let x = rand_input(&[1, 3, 64, 64], 4);
        let y = rsu.forward(&x, true).unwrap();
        assert_eq!(y.shape(), &[1, 8, 64, 64]);
    }

    #[test]
    fn rsu_spatial_preserved_odd_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rsu = RsuBlock::new(&mut rng, 3, 2, 3, 5, false).unwrap();
        for &(h, w) in &[(7usize, 9usize), (4, 11), (5, 5)] {
            let x = rand_input(&[1, 2, h, w], 6);
            let y = rsu.forward(&x, true).unwrap();
            assert_eq!(y.shape(), &[1, 5, h, w]);
        }
    }

    #[test]
    fn rsu_dilated_keeps_resolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let rsu = RsuBlock::new(&mut rng, 4, 4, 4, 8, true).unwrap();
        let x = rand_input(&[1, 4, 6, 6], 8);
        let y = rsu.forward(&x, true).unwrap();
        assert_eq!(y.shape(), &[1, 8, 6, 6]);
    }

    #[test]
    fn rsu_too_small_input_is_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rsu = RsuBlock::new(&mut rng, 6, 2, 3, 4, false).unwrap();
        let x = rand_input(&[1, 2, 8, 8], 10);
        let err = rsu.forward(&x, true).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let msg = err.to_string();
        assert!(msg.contains('6') && msg.contains('8'), "message was: {msg}");
    }

    #[test]
    fn rsu_height_below_two_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        assert!(RsuBlock::new(&mut rng, 1, 2, 3, 4, false).is_err());
    }

    #[test]
    fn rsu_micro_finite_diff() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let rsu = RsuBlock::new(&mut rng, 3, 2, 3, 4, false).unwrap();
        let x = rand_input(&[1, 2, 8, 8], 14);
        // eval mode: fixed normalization statistics keep the map smooth
        let err = finite_diff_check(|x| rsu.forward(x, false).unwrap().sigmoid().sum(), &x, 1e-5, 1);
        assert!(err < 1e-4, "rsu rel err {err}");
    }

    #[test]
    fn rsu_train_mode_finite_diff() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let rsu = RsuBlock::new(&mut rng, 3, 2, 3, 4, false).unwrap();
        let x = rand_input(&[1, 2, 8, 8], 16);
        let weights = Tensor::from_vec(&[1, 4, 8, 8], (0..256).map(|i| ((i % 5) as f64) - 2.0).collect());
        let err = finite_diff_check(
            |x| rsu.forward(x, true).unwrap().mul(&weights).unwrap().sum(),
            &x,
            1e-5,
            2,
        );
        assert!(err < 1e-4, "rsu train-mode rel err {err}");
    }

    fn constant_sides(c: f64, n: usize) -> Vec<Tensor> {
        (0..CF_SIDE_COUNT)
            .map(|i| Tensor::full(&[n, 1, 4 + i, 4 + i], c))
            .collect()
    }

    #[test]
    fn cf_symmetric_constant_fusion() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let cf = CfBlock::new(&mut rng);
        let mut set = ParamSet::default();
        cf.collect("cf", &mut set);
        for (name, p) in &set.params {
            if name.contains("fc") {
                // saturate the squeeze output so every channel weight is 1
                if name.ends_with("fc2.bias") {
                    p.set_data(&vec![1e3; p.numel()]);
                } else {
                    p.set_data(&vec![0.0; p.numel()]);
                }
            } else if name.ends_with("out_conv.weight") {
                // center tap 1/6 per channel: averages the six maps
                let mut w = vec![0.0; p.numel()];
                for c in 0..CF_SIDE_COUNT {
                    w[c * 9 + 4] = 1.0 / 6.0;
                }
                p.set_data(&w);
            } else {
                p.set_data(&vec![0.0; p.numel()]);
            }
        }
        let out = cf.forward(&constant_sides(0.7, 1), 8, 8).unwrap();
        assert_eq!(out.shape(), &[1, 1, 8, 8]);
        assert!(out.data().iter().all(|&v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn cf_weight_permutation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let cf = CfBlock::new(&mut rng);
        let sides: Vec<Tensor> = (0..CF_SIDE_COUNT)
            .map(|i| rand_input(&[1, 1, 6, 6], 20 + i as u64))
            .collect();
        let base = cf.forward(&sides, 6, 6).unwrap();

        // swap sides 0 and 1 together with the matching fc1 columns,
        // fc2 rows, fc2 bias entries, and out-conv channel slices
        let mut swapped = sides.clone();
        swapped.swap(0, 1);
        let cf2 = CfBlock::new(&mut rng);
        let c = CF_SIDE_COUNT;
        let perm = |i: usize| match i {
            0 => 1,
            1 => 0,
            other => other,
        };
        let src_fc1 = cf.fc1.weight.data().clone();
        let mut w = vec![0.0; c * c];
        for r in 0..c {
            for i in 0..c {
                w[r * c + i] = src_fc1[r * c + perm(i)];
            }
        }
        cf2.fc1.weight.set_data(&w);
        cf2.fc1.bias.set_data(&cf.fc1.bias.data());
        let src_fc2 = cf.fc2.weight.data().clone();
        let mut w = vec![0.0; c * c];
        for r in 0..c {
            for i in 0..c {
                w[r * c + i] = src_fc2[perm(r) * c + i];
            }
        }
        cf2.fc2.weight.set_data(&w);
        let src_b2 = cf.fc2.bias.data().clone();
        let b: Vec<f64> = (0..c).map(|r| src_b2[perm(r)]).collect();
        cf2.fc2.bias.set_data(&b);
        let src_conv = cf.out_conv.weight.data().clone();
        let mut w = vec![0.0; c * 9];
        for ch in 0..c {
            w[ch * 9..(ch + 1) * 9].copy_from_slice(&src_conv[perm(ch) * 9..(perm(ch) + 1) * 9]);
        }
        cf2.out_conv.weight.set_data(&w);
        cf2.out_conv.bias.set_data(&cf.out_conv.bias.data());

        let permuted = cf2.forward(&swapped, 6, 6).unwrap();
        for (a, b) in base.data().iter().zip(permuted.data().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn cf_every_side_matters() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let cf = CfBlock::new(&mut rng);
        let sides: Vec<Tensor> = (0..CF_SIDE_COUNT)
            .map(|i| rand_input(&[1, 1, 8, 8], 30 + i as u64))
            .collect();
        let base = cf.forward(&sides, 8, 8).unwrap().data().clone();
        for k in 0..CF_SIDE_COUNT {
            let mut bumped = sides.clone();
            let mut vals = bumped[k].data().clone();
            vals[10] += 0.5;
            bumped[k] = Tensor::from_vec(&[1, 1, 8, 8], vals);
            let out = cf.forward(&bumped, 8, 8).unwrap();
            assert!(
                out.data().iter().zip(&base).any(|(a, b)| (a - b).abs() > 1e-9),
                "side {k} had no influence"
            );
        }
    }

    #[test]
    fn cf_wrong_side_count_is_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let cf = CfBlock::new(&mut rng);
        let sides = vec![Tensor::zeros(&[1, 1, 4, 4]); 5];
        assert!(matches!(cf.forward(&sides, 4, 4), Err(Error::Config(_))));
    }

    #[test]
    fn cf_finite_diff() {
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let cf = CfBlock::new(&mut rng);
        let packed = rand_input(&[1, 6, 8, 8], 28);
        let err = finite_diff_check(
            |packed| {
                let sides: Vec<Tensor> = (0..CF_SIDE_COUNT)
                    .map(|i| slice_channels(packed, i, i + 1).unwrap())
                    .collect();
                cf.forward(&sides, 8, 8).unwrap().sigmoid().sum()
            },
            &packed,
            1e-5,
            3,
        );
        assert!(err < 1e-4, "cf rel err {err}");
    }
}
