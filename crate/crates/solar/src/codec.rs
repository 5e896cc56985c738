//! Bit-exact serialization: a binary range coder for the BTC sign
//! streams (static Bernoulli model, 16-bit quantized probability),
//! adaptive bitwise coding of quantized I-frame anchors, raw f32 network
//! payloads, and the framing that ties it all into one streamable file.
//!
//! Everything is little-endian. Each frame payload carries a CRC32.

use crate::autodiff::{Linear, Mlp, Tensor};
use crate::btc::{BtcNet, BtcPair, SymbolCounts, POSENC_DIM};
use crate::model::AnchorSet;
use crate::render::Camera;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SOLR";
pub const VERSION: u16 = 1;

const TOP: u32 = 1 << 24;

/// Quantize a probability to 16-bit fixed point in [1, 65535].
pub fn quantize_p16(p: f64) -> u16 {
    ((p * 65536.0).round() as i64).clamp(1, 65535) as u16
}

/// LZMA-style binary range encoder. `p16/65536` is the probability of
/// coding a `true` bit.
pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    pending: u64,
    first: bool,
    out: Vec<u8>,
}

impl RangeEncoder {
    pub fn new() -> Self {
        RangeEncoder {
            low: 0,
            range: u32::MAX,
            cache: 0,
            pending: 0,
            first: true,
            out: Vec::new(),
        }
    }

    fn shift_low(&mut self) {
        if self.low < 0xFF00_0000 || self.low > 0xFFFF_FFFF {
            let carry = (self.low >> 32) as u8;
            if !self.first {
                self.out.push(self.cache.wrapping_add(carry));
            }
            while self.pending > 0 {
                self.out.push(0xFFu8.wrapping_add(carry));
                self.pending -= 1;
            }
            self.cache = (self.low >> 24) as u8;
            self.first = false;
        } else {
            self.pending += 1;
        }
        self.low = (self.low << 8) & 0xFFFF_FFFF;
    }

    pub fn encode_bit(&mut self, p16: u16, bit: bool) {
        let bound = (self.range >> 16) * p16 as u32;
        if bit {
            self.range = bound;
        } else {
            self.low += bound as u64;
            self.range -= bound;
        }
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        self.out
    }
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

/// Decoder mirroring [`RangeEncoder`]; reads past the end as zero bytes
/// (the encoder's flush guarantees the symbols themselves resolve first).
pub struct RangeDecoder<'a> {
    code: u32,
    range: u32,
    data: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        let mut d = RangeDecoder { code: 0, range: u32::MAX, data, pos: 0 };
        for _ in 0..4 {
            d.code = (d.code << 8) | d.next_byte() as u32;
        }
        d
    }

    fn next_byte(&mut self) -> u8 {
        let b = self.data.get(self.pos).copied().unwrap_or(0);
        self.pos += 1;
        b
    }

    pub fn decode_bit(&mut self, p16: u16) -> bool {
        let bound = (self.range >> 16) * p16 as u32;
        let bit = self.code < bound;
        if bit {
            self.range = bound;
        } else {
            self.code -= bound;
            self.range -= bound;
        }
        while self.range < TOP {
            self.range <<= 8;
            self.code = (self.code << 8) | self.next_byte() as u32;
        }
        bit
    }
}

/// Coded size of a ±1 sign stream under the static model.
pub fn encode_signs(bits: &[bool], p16: u16) -> Vec<u8> {
    let mut enc = RangeEncoder::new();
    for &b in bits {
        enc.encode_bit(p16, b);
    }
    enc.finish()
}

pub fn decode_signs(data: &[u8], count: usize, p16: u16) -> Vec<bool> {
    let mut dec = RangeDecoder::new(data);
    (0..count).map(|_| dec.decode_bit(p16)).collect()
}

/// Adaptive order-0 bit model for the I-frame integer planes.
#[derive(Debug, Clone, Copy)]
pub struct AdaptiveBit {
    p16: u16,
}

impl AdaptiveBit {
    pub fn new() -> Self {
        AdaptiveBit { p16: 1 << 15 }
    }

    pub fn encode(&mut self, enc: &mut RangeEncoder, bit: bool) {
        enc.encode_bit(self.p16, bit);
        self.update(bit);
    }

    pub fn decode(&mut self, dec: &mut RangeDecoder) -> bool {
        let bit = dec.decode_bit(self.p16);
        self.update(bit);
        bit
    }

    fn update(&mut self, bit: bool) {
        if bit {
            self.p16 += (65536 - self.p16 as u32) as u16 >> 5;
        } else {
            self.p16 -= self.p16 >> 5;
        }
        self.p16 = self.p16.clamp(1, 65535);
    }
}

impl Default for AdaptiveBit {
    fn default() -> Self {
        Self::new()
    }
}

// ---------- byte-level helpers ----------

pub struct ByteWriter {
    pub buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new() -> Self {
        ByteWriter { buf: Vec::new() }
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    pub fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn bytes(&mut self, v: &[u8]) {
        self.buf.extend_from_slice(v);
    }
}

impl Default for ByteWriter {
    fn default() -> Self {
        Self::new()
    }
}

pub struct ByteReader<'a> {
    data: &'a [u8],
    pos: usize,
    /// frame index used in truncation errors
    pub frame: u32,
}

impl<'a> ByteReader<'a> {
    pub fn new(data: &'a [u8], frame: u32) -> Self {
        ByteReader { data, pos: 0, frame }
    }

    pub fn remaining(&self) -> usize {
        self.data.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Truncated(self.frame));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        self.take(n)
    }
}

fn write_mlp(w: &mut ByteWriter, mlp: &Mlp) {
    for l in &mlp.layers {
        for &v in &l.w.data {
            w.f32(v as f32);
        }
        for &v in &l.b.data {
            w.f32(v as f32);
        }
    }
}

fn read_mlp(r: &mut ByteReader, sizes: &[usize]) -> Result<Mlp> {
    let mut layers = Vec::new();
    for win in sizes.windows(2) {
        let (fan_in, fan_out) = (win[0], win[1]);
        let mut wdata = Vec::with_capacity(fan_in * fan_out);
        for _ in 0..fan_in * fan_out {
            wdata.push(r.f32()? as f64);
        }
        let mut bdata = Vec::with_capacity(fan_out);
        for _ in 0..fan_out {
            bdata.push(r.f32()? as f64);
        }
        layers.push(Linear {
            w: Tensor::new(vec![fan_out, fan_in], wdata),
            b: Tensor::new(vec![fan_out], bdata),
        });
    }
    Ok(Mlp { layers })
}

/// The wire form of an MLP is its f32 rounding; both sides carry this.
pub fn mlp_to_wire(mlp: &Mlp) -> Mlp {
    let mut m = mlp.clone();
    m.round_f32();
    m
}

// ---------- stream header ----------

/// Global sequence parameters; everything a decoder needs besides the
/// frame records themselves.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamConfig {
    pub n_anchors: u32,
    pub d_feat: u16,
    pub k: u16,
    pub h_g: u16,
    pub h_m: u16,
    pub h_b: u16,
    pub n_frames: u32,
    pub s_base: f64,
    pub eps_m: f64,
    pub eps_d: f64,
    pub gamma_max: f64,
    pub lambda_e: f64,
    pub lambda_s: f64,
    pub lambda_ssim: f64,
    pub enable_aad: bool,
    pub enable_ladar: bool,
    pub background: [f64; 3],
    pub cameras: Vec<Camera>,
}

impl StreamConfig {
    pub fn ng_sizes(&self) -> Vec<usize> {
        let d = self.d_feat as usize;
        let h = self.h_g as usize;
        vec![d + 3, h, h, self.k as usize * crate::model::ATTRS_PER_GAUSSIAN]
    }

    pub fn nm_sizes(&self) -> Vec<usize> {
        vec![self.d_feat as usize + 3, self.h_m as usize, 1]
    }

    pub fn btc_x_sizes(&self) -> Vec<usize> {
        vec![POSENC_DIM, self.h_b as usize, 5]
    }

    pub fn btc_f_sizes(&self) -> Vec<usize> {
        vec![POSENC_DIM, self.h_b as usize, self.d_feat as usize]
    }

    fn write(&self, w: &mut ByteWriter) {
        w.u32(self.n_anchors);
        w.u16(self.d_feat);
        w.u16(self.k);
        w.u16(self.h_g);
        w.u16(self.h_m);
        w.u16(self.h_b);
        w.u32(self.n_frames);
        for v in [
            self.s_base,
            self.eps_m,
            self.eps_d,
            self.gamma_max,
            self.lambda_e,
            self.lambda_s,
            self.lambda_ssim,
        ] {
            w.f64(v);
        }
        w.u8(u8::from(self.enable_aad) | (u8::from(self.enable_ladar) << 1));
        for &v in &self.background {
            w.f64(v);
        }
        w.u16(self.cameras.len() as u16);
        for c in &self.cameras {
            w.f64(c.fx);
            w.f64(c.fy);
            w.f64(c.cx);
            w.f64(c.cy);
            for row in &c.rot {
                for &v in row {
                    w.f64(v);
                }
            }
            for &v in &c.trans {
                w.f64(v);
            }
            w.u16(c.width as u16);
            w.u16(c.height as u16);
            for &v in &c.view_dir {
                w.f64(v);
            }
        }
    }

    fn read(r: &mut ByteReader) -> Result<Self> {
        let n_anchors = r.u32()?;
        let d_feat = r.u16()?;
        let k = r.u16()?;
        let h_g = r.u16()?;
        let h_m = r.u16()?;
        let h_b = r.u16()?;
        let n_frames = r.u32()?;
        let mut vals = [0.0f64; 7];
        for v in &mut vals {
            *v = r.f64()?;
        }
        let flags = r.u8()?;
        let mut background = [0.0; 3];
        for v in &mut background {
            *v = r.f64()?;
        }
        let n_cams = r.u16()? as usize;
        let mut cameras = Vec::with_capacity(n_cams);
        for _ in 0..n_cams {
            let fx = r.f64()?;
            let fy = r.f64()?;
            let cx = r.f64()?;
            let cy = r.f64()?;
            let mut rot = [[0.0; 3]; 3];
            for row in &mut rot {
                for v in row {
                    *v = r.f64()?;
                }
            }
            let mut trans = [0.0; 3];
            for v in &mut trans {
                *v = r.f64()?;
            }
            let width = r.u16()? as usize;
            let height = r.u16()? as usize;
            let mut view_dir = [0.0; 3];
            for v in &mut view_dir {
                *v = r.f64()?;
            }
            cameras.push(Camera { fx, fy, cx, cy, rot, trans, width, height, view_dir });
        }
        Ok(StreamConfig {
            n_anchors,
            d_feat,
            k,
            h_g,
            h_m,
            h_b,
            n_frames,
            s_base: vals[0],
            eps_m: vals[1],
            eps_d: vals[2],
            gamma_max: vals[3],
            lambda_e: vals[4],
            lambda_s: vals[5],
            lambda_ssim: vals[6],
            enable_aad: flags & 1 != 0,
            enable_ladar: flags & 2 != 0,
            background,
            cameras,
        })
    }
}

// ---------- frame records ----------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameKind {
    I,
    P,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub frame_index: u32,
    pub kind: FrameKind,
    pub payload: Vec<u8>,
}

impl FrameRecord {
    pub fn byte_size(&self) -> usize {
        // index + kind + length + crc + payload
        4 + 1 + 4 + 4 + self.payload.len()
    }
}

// ---------- I-frame quantization ----------

const X_BITS: u32 = 16;
const F_BITS: u32 = 12;

struct QuantPlane {
    min: f64,
    max: f64,
    bits: u32,
    values: Vec<u32>,
}

fn quantize_plane(vals: &[f64], min: f64, max: f64, bits: u32) -> QuantPlane {
    let levels = (1u32 << bits) - 1;
    let values = if max > min {
        let step = (max - min) / levels as f64;
        vals.iter()
            .map(|&v| (((v - min) / step).round() as i64).clamp(0, levels as i64) as u32)
            .collect()
    } else {
        vec![0; vals.len()]
    };
    QuantPlane { min, max, bits, values }
}

fn reconstruct_plane(p: &QuantPlane) -> Vec<f64> {
    let levels = (1u32 << p.bits) - 1;
    if p.max > p.min {
        let step = (p.max - p.min) / levels as f64;
        p.values.iter().map(|&q| p.min + q as f64 * step).collect()
    } else {
        vec![p.min; p.values.len()]
    }
}

fn code_planes(planes: &[&QuantPlane]) -> Vec<u8> {
    let mut enc = RangeEncoder::new();
    for p in planes {
        let mut ctx = vec![AdaptiveBit::new(); p.bits as usize];
        for &q in &p.values {
            for bit in (0..p.bits).rev() {
                ctx[bit as usize].encode(&mut enc, (q >> bit) & 1 == 1);
            }
        }
    }
    enc.finish()
}

fn decode_planes(data: &[u8], shapes: &[(usize, u32)]) -> Vec<Vec<u32>> {
    let mut dec = RangeDecoder::new(data);
    let mut out = Vec::with_capacity(shapes.len());
    for &(count, bits) in shapes {
        let mut ctx = vec![AdaptiveBit::new(); bits as usize];
        let mut vals = Vec::with_capacity(count);
        for _ in 0..count {
            let mut q = 0u32;
            for bit in (0..bits).rev() {
                if ctx[bit as usize].decode(&mut dec) {
                    q |= 1 << bit;
                }
            }
            vals.push(q);
        }
        out.push(vals);
    }
    out
}

/// Everything a decoder recovers from an I-frame.
#[derive(Debug, Clone, PartialEq)]
pub struct IframePayload {
    pub anchors: AnchorSet,
    pub ng: Mlp,
    pub nm: Mlp,
}

/// Serialize the I-frame. Returns the record together with the quantized
/// anchor set the encoder must adopt (closed-loop coding): a decoder
/// reproduces exactly this set.
pub fn encode_iframe(
    anchors: &AnchorSet,
    ng: &Mlp,
    nm: &Mlp,
    frame_index: u32,
) -> (FrameRecord, IframePayload) {
    let n = anchors.count();
    let d = anchors.feat_dim();

    // per-axis position planes over the scene bounding box
    let mut x_planes = Vec::with_capacity(3);
    for axis in 0..3 {
        let vals: Vec<f64> = (0..n).map(|a| anchors.x.data[a * 3 + axis]).collect();
        let min = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        x_planes.push(quantize_plane(&vals, min, max, X_BITS));
    }
    let f_min = anchors.f.data.iter().cloned().fold(f64::INFINITY, f64::min);
    let f_max = anchors.f.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let f_plane = quantize_plane(&anchors.f.data, f_min, f_max, F_BITS);
    let l_min = anchors.l.data.iter().cloned().fold(f64::INFINITY, f64::min);
    let l_max = anchors.l.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let l_plane = quantize_plane(&anchors.l.data, l_min, l_max, F_BITS);

    let mut w = ByteWriter::new();
    for p in &x_planes {
        w.f64(p.min);
        w.f64(p.max);
    }
    w.f64(f_plane.min);
    w.f64(f_plane.max);
    w.f64(l_plane.min);
    w.f64(l_plane.max);
    let coded = code_planes(&[&x_planes[0], &x_planes[1], &x_planes[2], &f_plane, &l_plane]);
    w.u32(coded.len() as u32);
    w.bytes(&coded);
    let ng_wire = mlp_to_wire(ng);
    let nm_wire = mlp_to_wire(nm);
    write_mlp(&mut w, &ng_wire);
    write_mlp(&mut w, &nm_wire);

    // the adopted (reconstructed) anchors
    let mut x_data = vec![0.0; n * 3];
    for (axis, p) in x_planes.iter().enumerate() {
        for (a, v) in reconstruct_plane(p).into_iter().enumerate() {
            x_data[a * 3 + axis] = v;
        }
    }
    let adopted = AnchorSet {
        x: Tensor::new(vec![n, 3], x_data),
        f: Tensor::new(vec![n, d], reconstruct_plane(&f_plane)),
        l: Tensor::new(vec![n, 3], reconstruct_plane(&l_plane)),
    };
    (
        FrameRecord { frame_index, kind: FrameKind::I, payload: w.buf },
        IframePayload { anchors: adopted, ng: ng_wire, nm: nm_wire },
    )
}

pub fn parse_iframe(record: &FrameRecord, cfg: &StreamConfig) -> Result<IframePayload> {
    let mut r = ByteReader::new(&record.payload, record.frame_index);
    let n = cfg.n_anchors as usize;
    let d = cfg.d_feat as usize;
    let mut x_ranges = [(0.0f64, 0.0f64); 3];
    for v in &mut x_ranges {
        *v = (r.f64()?, r.f64()?);
    }
    let f_range = (r.f64()?, r.f64()?);
    let l_range = (r.f64()?, r.f64()?);
    let coded_len = r.u32()? as usize;
    let coded = r.bytes(coded_len)?;
    let planes = decode_planes(
        coded,
        &[(n, X_BITS), (n, X_BITS), (n, X_BITS), (n * d, F_BITS), (n * 3, F_BITS)],
    );
    let mut x_data = vec![0.0; n * 3];
    for axis in 0..3 {
        let p = QuantPlane {
            min: x_ranges[axis].0,
            max: x_ranges[axis].1,
            bits: X_BITS,
            values: planes[axis].clone(),
        };
        for (a, v) in reconstruct_plane(&p).into_iter().enumerate() {
            x_data[a * 3 + axis] = v;
        }
    }
    let f_p = QuantPlane { min: f_range.0, max: f_range.1, bits: F_BITS, values: planes[3].clone() };
    let l_p = QuantPlane { min: l_range.0, max: l_range.1, bits: F_BITS, values: planes[4].clone() };
    let anchors = AnchorSet {
        x: Tensor::new(vec![n, 3], x_data),
        f: Tensor::new(vec![n, d], reconstruct_plane(&f_p)),
        l: Tensor::new(vec![n, 3], reconstruct_plane(&l_p)),
    };
    let ng = read_mlp(&mut r, &cfg.ng_sizes())?;
    let nm = read_mlp(&mut r, &cfg.nm_sizes())?;
    Ok(IframePayload { anchors, ng, nm })
}

// ---------- P-frames ----------

/// Everything a decoder recovers from a P-frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PframePayload {
    pub p16: u16,
    pub pair: BtcPair,
    pub nm: Mlp,
    pub recal_ng: Option<Mlp>,
}

fn write_btc_aux(w: &mut ByteWriter, net: &BtcNet) {
    for l in &net.layers {
        w.f32(l.scale as f32);
        for &b in &l.b.data {
            w.f32(b as f32);
        }
    }
}

fn read_btc_aux(r: &mut ByteReader, sizes: &[usize]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let mut scales = Vec::new();
    let mut biases = Vec::new();
    for win in sizes.windows(2) {
        scales.push(r.f32()? as f64);
        let mut b = Vec::with_capacity(win[1]);
        for _ in 0..win[1] {
            b.push(r.f32()? as f64);
        }
        biases.push(b);
    }
    Ok((scales, biases))
}

/// Serialize a P-frame. `pair` should already be the wire-quantized pair
/// (±1 latents, f32 scales/biases). Both sign vectors share one coded
/// stream to keep the coder flush overhead within the rate contract.
pub fn encode_pframe(
    pair: &BtcPair,
    counts: &SymbolCounts,
    nm: &Mlp,
    recal_ng: Option<&Mlp>,
    frame_index: u32,
) -> FrameRecord {
    let p16 = quantize_p16(counts.p_plus());
    let mut signs = pair.net_x.sign_bits();
    signs.extend(pair.net_f.sign_bits());
    let coded = encode_signs(&signs, p16);

    let mut w = ByteWriter::new();
    w.u16(p16);
    w.u8(if recal_ng.is_some() { 1 } else { 0 });
    w.u32(coded.len() as u32);
    w.bytes(&coded);
    write_btc_aux(&mut w, &pair.net_x);
    write_btc_aux(&mut w, &pair.net_f);
    write_mlp(&mut w, &mlp_to_wire(nm));
    if let Some(ng) = recal_ng {
        write_mlp(&mut w, &mlp_to_wire(ng));
    }
    FrameRecord { frame_index, kind: FrameKind::P, payload: w.buf }
}

pub fn parse_pframe(record: &FrameRecord, cfg: &StreamConfig) -> Result<PframePayload> {
    let mut r = ByteReader::new(&record.payload, record.frame_index);
    let p16 = r.u16()?;
    let flags = r.u8()?;
    let coded_len = r.u32()? as usize;
    let coded = r.bytes(coded_len)?;
    let x_sizes = cfg.btc_x_sizes();
    let f_sizes = cfg.btc_f_sizes();
    let nx: usize = x_sizes.windows(2).map(|w| w[0] * w[1]).sum();
    let nf: usize = f_sizes.windows(2).map(|w| w[0] * w[1]).sum();
    let signs = decode_signs(coded, nx + nf, p16);
    let (sx, sf) = signs.split_at(nx);
    let (scales_x, biases_x) = read_btc_aux(&mut r, &x_sizes)?;
    let (scales_f, biases_f) = read_btc_aux(&mut r, &f_sizes)?;
    let pair = BtcPair {
        net_x: BtcNet::from_wire(&x_sizes, sx, &scales_x, &biases_x),
        net_f: BtcNet::from_wire(&f_sizes, sf, &scales_f, &biases_f),
    };
    let nm = read_mlp(&mut r, &cfg.nm_sizes())?;
    let recal_ng = if flags & 1 != 0 {
        Some(read_mlp(&mut r, &cfg.ng_sizes())?)
    } else {
        None
    };
    Ok(PframePayload { p16, pair, nm, recal_ng })
}

/// Total serialized bytes of a record (header + payload).
pub fn measure_rate(record: &FrameRecord) -> usize {
    record.byte_size()
}

/// Actual coded bits of the sign section minus the hard rate under the
/// header's quantized probability. Contract: within [0, 80] bits
/// (one coder flush of 5 bytes ≤ 40 bits of true overhead, plus slack).
pub fn estimate_gap(record: &FrameRecord, counts: &SymbolCounts) -> Result<f64> {
    if record.kind != FrameKind::P {
        return Err(Error::Msg("estimate_gap expects a P-frame".into()));
    }
    let mut r = ByteReader::new(&record.payload, record.frame_index);
    let p16 = r.u16()?;
    let _flags = r.u8()?;
    let coded_len = r.u32()? as usize;
    let p = p16 as f64 / 65536.0;
    let hard = crate::btc::hard_rate(counts, p);
    Ok(coded_len as f64 * 8.0 - hard)
}

// ---------- whole-stream framing ----------

pub fn write_stream(cfg: &StreamConfig, frames: &[FrameRecord]) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.bytes(MAGIC);
    w.u16(VERSION);
    cfg.write(&mut w);
    for f in frames {
        w.u32(f.frame_index);
        w.u8(match f.kind {
            FrameKind::I => 0,
            FrameKind::P => 1,
        });
        w.u32(f.payload.len() as u32);
        w.u32(crc32fast::hash(&f.payload));
        w.bytes(&f.payload);
    }
    w.buf
}

pub struct StreamReader<'a> {
    r: ByteReader<'a>,
    pub config: StreamConfig,
    next_index: u32,
}

impl<'a> StreamReader<'a> {
    pub fn new(data: &'a [u8]) -> Result<Self> {
        let mut r = ByteReader::new(data, 0);
        if r.bytes(4)? != MAGIC {
            return Err(Error::Bitstream("bad magic".into()));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::Version(version));
        }
        let config = StreamConfig::read(&mut r)?;
        Ok(StreamReader { r, config, next_index: 0 })
    }

    /// Read the next frame record, verifying CRC and ordering.
    pub fn next_frame(&mut self) -> Result<Option<FrameRecord>> {
        if self.r.remaining() == 0 {
            return Ok(None);
        }
        self.r.frame = self.next_index;
        let frame_index = self.r.u32()?;
        if frame_index != self.next_index {
            return Err(Error::OutOfOrder { expected: self.next_index, got: frame_index });
        }
        let kind = match self.r.u8()? {
            0 => FrameKind::I,
            1 => FrameKind::P,
            k => return Err(Error::Bitstream(format!("unknown frame kind {k}"))),
        };
        let len = self.r.u32()? as usize;
        let crc = self.r.u32()?;
        let payload = self.r.bytes(len)?.to_vec();
        if crc32fast::hash(&payload) != crc {
            return Err(Error::CrcMismatch(frame_index));
        }
        self.next_index += 1;
        Ok(Some(FrameRecord { frame_index, kind, payload }))
    }
}
