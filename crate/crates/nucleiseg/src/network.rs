//! Full model assembly: a six-stage residual-U-block encoder shared by two
//! five-stage decoder branches (foreground mask and contour), with
//! attention-gated skip connections, six side outputs per branch, and a
//! context fusion block per branch producing the fused probability maps.
//!
//! The deepest encoder output enters its decoder through channel attention
//! alone; every shallower skip goes through the hybrid channel+spatial
//! module.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::attention::{Cbam, ChannelAttention};
use crate::blocks::{CfBlock, RsuBlock};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ParamSet};
use crate::tensor::{concat_channels, Tensor};

pub const STAGES: usize = 6;
/// Spatial downscale factor over the whole encoder (5 poolings).
pub const DIVISOR: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub in_channels: usize,
    pub enc_out: [usize; STAGES],
    pub enc_mid: [usize; STAGES],
    pub heights: [usize; STAGES],
    pub dilated: [bool; STAGES],
    pub attention_reduction: usize,
    pub spatial_kernel: usize,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> NetworkConfig {
        NetworkConfig {
            in_channels: 3,
            enc_out: [16, 32, 64, 128, 128, 128],
            enc_mid: [8, 16, 32, 64, 64, 64],
            heights: [7, 6, 5, 4, 4, 4],
            dilated: [false, false, false, false, true, true],
            attention_reduction: 4,
            spatial_kernel: 7,
            seed: 0,
        }
    }
}

impl NetworkConfig {
    /// Small configuration for tests and quick end-to-end runs.
    pub fn micro(seed: u64) -> NetworkConfig {
        NetworkConfig {
            in_channels: 3,
            enc_out: [4, 4, 8, 8, 8, 8],
            enc_mid: [2, 2, 4, 4, 4, 4],
            heights: [3, 3, 3, 2, 2, 2],
            dilated: [false, false, false, false, true, true],
            attention_reduction: 4,
            spatial_kernel: 7,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be >= 1".into()));
        }
        if self.enc_out.iter().chain(&self.enc_mid).any(|&c| c == 0) {
            return Err(Error::Config("channel counts must be >= 1".into()));
        }
        if self.heights.iter().any(|&h| h < 2) {
            return Err(Error::Config(format!(
                "rsu heights must be >= 2, got {:?}",
                self.heights
            )));
        }
        if self.attention_reduction == 0 {
            return Err(Error::Config("attention_reduction must be >= 1".into()));
        }
        if self.spatial_kernel % 2 == 0 {
            return Err(Error::Config("spatial_kernel must be odd".into()));
        }
        Ok(())
    }

    /// Canonical key=value form; hashed into the checkpoint digest.
    pub fn canonical(&self) -> String {
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let flags = |v: &[bool]| v.iter().map(|x| u8::from(*x).to_string()).collect::<Vec<_>>().join(",");
        format!(
            "in_channels={}\nenc_out={}\nenc_mid={}\nheights={}\ndilated={}\nattention_reduction={}\nspatial_kernel={}\nseed={}\n",
            self.in_channels,
            list(&self.enc_out),
            list(&self.enc_mid),
            list(&self.heights),
            flags(&self.dilated),
            self.attention_reduction,
            self.spatial_kernel,
            self.seed,
        )
    }

    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.canonical().as_bytes());
        h.finalize().into()
    }
}

/// Attention applied to one encoder output before it joins a decoder.
pub enum SkipAttention {
    Hybrid(Cbam),
    ChannelOnly(ChannelAttention),
}

impl SkipAttention {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            SkipAttention::Hybrid(cbam) => cbam.forward(x),
            SkipAttention::ChannelOnly(ca) => x.mul_broadcast(&ca.forward(x)?),
        }
    }

    fn collect(&self, prefix: &str, set: &mut ParamSet) {
        match self {
            SkipAttention::Hybrid(cbam) => cbam.collect(prefix, set),
            SkipAttention::ChannelOnly(ca) => ca.collect(prefix, set),
        }
    }
}

/// One decoder branch: five RSU stages, one attention module per encoder
/// output, six side convolutions, one fusion block.
pub struct Branch {
    dec: Vec<RsuBlock>,
    skip_att: Vec<SkipAttention>,
    side_convs: Vec<Conv2d>,
    cf: CfBlock,
}

impl Branch {
    fn new(rng: &mut ChaCha8Rng, cfg: &NetworkConfig) -> Result<Branch> {
        let mut skip_att = Vec::with_capacity(STAGES);
        for (stage, &c) in cfg.enc_out.iter().enumerate() {
            skip_att.push(if stage == STAGES - 1 {
                SkipAttention::ChannelOnly(ChannelAttention::new(rng, c, cfg.attention_reduction))
            } else {
                SkipAttention::Hybrid(Cbam::new(rng, c, cfg.attention_reduction, cfg.spatial_kernel))
            });
        }
        // decoder stage l fuses the (attended) encoder-l skip with the
        // upsampled deeper features
        let mut dec = Vec::with_capacity(STAGES - 1);
        for l in 0..STAGES - 1 {
            let deeper = if l == STAGES - 2 { cfg.enc_out[STAGES - 1] } else { cfg.enc_out[l + 1] };
            dec.push(RsuBlock::new(
                rng,
                cfg.heights[l],
                cfg.enc_out[l] + deeper,
                cfg.enc_mid[l],
                cfg.enc_out[l],
                cfg.dilated[l],
            )?);
        }
        let mut side_convs = Vec::with_capacity(STAGES);
        for l in 0..STAGES - 1 {
            side_convs.push(Conv2d::new(rng, cfg.enc_out[l], 1, 3, 1, 1, 1));
        }
        side_convs.push(Conv2d::new(rng, cfg.enc_out[STAGES - 1], 1, 3, 1, 1, 1));
        Ok(Branch {
            dec,
            skip_att,
            side_convs,
            cf: CfBlock::new(rng),
        })
    }

    /// Returns (fused probability map, six side probability maps), all at
    /// the input resolution.
    fn forward(
        &self,
        enc_feats: &[Tensor],
        out_h: usize,
        out_w: usize,
        train: bool,
    ) -> Result<(Tensor, Vec<Tensor>)> {
        let deepest = &enc_feats[STAGES - 1];
        let mut cur = self.skip_att[STAGES - 1].forward(deepest)?;
        let mut stage_outputs = vec![deepest.clone()];
        for l in (0..STAGES - 1).rev() {
            let skip = self.skip_att[l].forward(&enc_feats[l])?;
            let target = enc_feats[l].shape();
            cur = cur.upsample_bilinear(target[2], target[3])?;
            cur = self.dec[l].forward(&concat_channels(&[cur, skip])?, train)?;
            stage_outputs.push(cur.clone());
        }
        // side order: decoder top … decoder bottom, then the deepest encoder stage
        stage_outputs.reverse();
        let mut sides = Vec::with_capacity(STAGES);
        for (l, feat) in stage_outputs.iter().enumerate() {
            let logit = self.side_convs[l].forward(feat)?;
            sides.push(logit.sigmoid().upsample_bilinear(out_h, out_w)?);
        }
        let fused = self.cf.forward(&sides, out_h, out_w)?.sigmoid();
        Ok((fused, sides))
    }

    fn collect(&self, prefix: &str, set: &mut ParamSet) {
        for (l, a) in self.skip_att.iter().enumerate() {
            a.collect(&format!("{prefix}.att{l}"), set);
        }
        for (l, d) in self.dec.iter().enumerate() {
            d.collect(&format!("{prefix}.dec{l}"), set);
        }
        for (l, s) in self.side_convs.iter().enumerate() {
            s.collect(&format!("{prefix}.side{l}"), set);
        }
        self.cf.collect(&format!("{prefix}.cf"), set);
    }
}

#[derive(Debug)]
pub struct NetworkOutput {
    pub s_mask: Tensor,
    pub s_edge: Tensor,
    pub mask_sides: Vec<Tensor>,
    pub edge_sides: Vec<Tensor>,
}

pub struct Network {
    pub config: NetworkConfig,
    enc: Vec<RsuBlock>,
    mask_branch: Branch,
    edge_branch: Branch,
}

impl Network {
    pub fn build(config: NetworkConfig) -> Result<Network> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut enc = Vec::with_capacity(STAGES);
        let mut cin = config.in_channels;
        for s in 0..STAGES {
            enc.push(RsuBlock::new(
                &mut rng,
                config.heights[s],
                cin,
                config.enc_mid[s],
                config.enc_out[s],
                config.dilated[s],
            )?);
            cin = config.enc_out[s];
        }
        let mask_branch = Branch::new(&mut rng, &config)?;
        let edge_branch = Branch::new(&mut rng, &config)?;
        Ok(Network {
            config,
            enc,
            mask_branch,
            edge_branch,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<NetworkOutput> {
        let shape = x.shape().to_vec();
        if shape.len() != 4 || shape[1] != self.config.in_channels {
            return Err(Error::Dimension(format!(
                "forward: expected N×{}×H×W input, got {:?}",
                self.config.in_channels, shape
            )));
        }
        let (h, w) = (shape[2], shape[3]);
        if h % DIVISOR != 0 || w % DIVISOR != 0 || h == 0 || w == 0 {
            return Err(Error::Dimension(format!(
                "forward: spatial size {h}×{w} must be a positive multiple of {DIVISOR}"
            )));
        }
        let mut feats = Vec::with_capacity(STAGES);
        let mut cur = x.clone();
        for (s, block) in self.enc.iter().enumerate() {
            if s > 0 {
                cur = cur.maxpool2d(2, 2)?;
            }
            cur = block.forward(&cur, train)?;
            feats.push(cur.clone());
        }
        let (s_mask, mask_sides) = self.mask_branch.forward(&feats, h, w, train)?;
        let (s_edge, edge_sides) = self.edge_branch.forward(&feats, h, w, train)?;
        Ok(NetworkOutput {
            s_mask,
            s_edge,
            mask_sides,
            edge_sides,
        })
    }

    /// All named parameters and batch-norm buffers in a fixed order.
    pub fn param_set(&self) -> ParamSet {
        let mut set = ParamSet::default();
        for (s, e) in self.enc.iter().enumerate() {
            e.collect(&format!("enc{s}"), &mut set);
        }
        self.mask_branch.collect("mask", &mut set);
        self.edge_branch.collect("edge", &mut set);
        set
    }

    pub fn param_count(&self) -> usize {
        self.param_set().params.iter().map(|(_, p)| p.numel()).sum()
    }

    pub fn zero_grads(&self) {
        for (_, p) in self.param_set().params {
            p.zero_grad();
        }
    }

    /// Attention module guarding encoder stage `stage` (0-based) on the
    /// mask branch; the deepest stage is channel-only by construction.
    pub fn skip_attention(&self, stage: usize) -> &SkipAttention {
        &self.mask_branch.skip_att[stage]
    }

    pub fn edge_branch_params(&self) -> ParamSet {
        let mut set = ParamSet::default();
        self.edge_branch.collect("edge", &mut set);
        set
    }
}

// ---- checkpoint format ----
//
// Bytes, little-endian:
//   magic  "NSEGCKPT"                     8
//   format version u32                    4
//   config digest (sha-256)              32
//   config canonical text: u32 len + bytes
//   blob count u32, then per blob:
//     u32 name len, name bytes, u64 value count, f64 values
// Blobs are all parameters then all buffers, in `param_set` order.
// An optional trailer (`trainer` module) may follow; loaders here stop
// at the blob count.

const MAGIC: &[u8; 8] = b"NSEGCKPT";
const VERSION: u32 = 1;

pub fn save_checkpoint(net: &Network, path: &Path, trailer: Option<&[u8]>) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&net.config.digest());
    let canon = net.config.canonical();
    buf.extend_from_slice(&(canon.len() as u32).to_le_bytes());
    buf.extend_from_slice(canon.as_bytes());
    let set = net.param_set();
    let blob_count = set.params.len() + set.buffers.len();
    buf.extend_from_slice(&(blob_count as u32).to_le_bytes());
    let mut write_blob = |name: &str, values: &[f64]| {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(values.len() as u64).to_le_bytes());
        for v in values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    };
    for (name, p) in &set.params {
        write_blob(name, &p.data());
    }
    for (name, b) in &set.buffers {
        write_blob(name, &b.borrow());
    }
    if let Some(t) = trailer {
        buf.extend_from_slice(t);
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Data("checkpoint truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Loads parameters and buffers into `net`. The stored config digest must
/// match the network's. Returns trailer bytes, if any.
pub fn load_checkpoint(net: &Network, path: &Path) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { buf: &bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Data(format!("{}: not a checkpoint file", path.display())));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Data(format!(
            "unsupported checkpoint version {version}, expected {VERSION}"
        )));
    }
    let digest: [u8; 32] = r.take(32)?.try_into().unwrap();
    if digest != net.config.digest() {
        return Err(Error::Config(
            "checkpoint was written for a different network configuration".into(),
        ));
    }
    let canon_len = r.u32()? as usize;
    r.take(canon_len)?;
    let blob_count = r.u32()? as usize;
    let set = net.param_set();
    if blob_count != set.params.len() + set.buffers.len() {
        return Err(Error::Data(format!(
            "checkpoint holds {blob_count} blobs, network expects {}",
            set.params.len() + set.buffers.len()
        )));
    }
    let read_blob = |r: &mut Reader, expect_name: &str, expect_len: usize| -> Result<Vec<f64>> {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Data("checkpoint blob name is not utf-8".into()))?;
        if name != expect_name {
            return Err(Error::Data(format!(
                "checkpoint blob order mismatch: found {name}, expected {expect_name}"
            )));
        }
        let count = r.u64()? as usize;
        if count != expect_len {
            return Err(Error::Data(format!(
                "blob {name}: {count} values, expected {expect_len}"
            )));
        }
        let mut values = Vec::with_capacity(count);
        for _ in 0..count {
            values.push(f64::from_le_bytes(r.take(8)?.try_into().unwrap()));
        }
        Ok(values)
    };
    for (name, p) in &set.params {
        let values = read_blob(&mut r, name, p.numel())?;
        p.set_data(&values);
    }
    for (name, b) in &set.buffers {
        let len = b.borrow().len();
        let values = read_blob(&mut r, name, len)?;
        b.borrow_mut().copy_from_slice(&values);
    }
    Ok(bytes[r.pos..].to_vec())
}
