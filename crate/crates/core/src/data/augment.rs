//! Training augmentations. Geometric ops move image and mask together (the
//! mask with nearest-neighbour sampling); brightness touches the image only.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, Sample};
use crate::rng::SeedTree;
use crate::tensor::Tensor;

pub const SCALES: [f64; 5] = [0.5, 0.75, 1.0, 1.25, 1.5];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentOps {
    pub hflip: bool,
    pub vflip: bool,
    /// Rotation by a random multiple of 90° (180° only for non-square inputs).
    pub rotate: bool,
    /// Rescale by a random factor from [`SCALES`], then crop or pad back.
    pub scale: bool,
    /// Additive brightness jitter amplitude; 0 disables it.
    pub brightness: f32,
}

impl Default for AugmentOps {
    fn default() -> Self {
        AugmentOps {
            hflip: true,
            vflip: true,
            rotate: true,
            scale: true,
            brightness: 0.1,
        }
    }
}

impl AugmentOps {
    pub fn none() -> Self {
        AugmentOps {
            hflip: false,
            vflip: false,
            rotate: false,
            scale: false,
            brightness: 0.0,
        }
    }
}

fn remap<E: Copy>(
    data: &[E],
    c: usize,
    oh: usize,
    ow: usize,
    src: impl Fn(usize, usize) -> usize,
) -> Vec<E> {
    let plane = data.len() / c.max(1);
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                out.push(data[ch * plane + src(y, x)]);
            }
        }
    }
    out
}

pub fn hflip_planes<E: Copy>(data: &[E], c: usize, h: usize, w: usize) -> Vec<E> {
    remap(data, c, h, w, |y, x| y * w + (w - 1 - x))
}

pub fn vflip_planes<E: Copy>(data: &[E], c: usize, h: usize, w: usize) -> Vec<E> {
    remap(data, c, h, w, |y, x| (h - 1 - y) * w + x)
}

/// Clockwise quarter turn; the result is `w × h`.
pub fn rot90_planes<E: Copy>(data: &[E], c: usize, h: usize, w: usize) -> Vec<E> {
    remap(data, c, w, h, |y, x| (h - 1 - x) * w + y)
}

fn map_sample(
    s: &Sample,
    f: impl Fn(&[f32], usize) -> Vec<f32>,
    g: impl Fn(&[u8]) -> Vec<u8>,
    h: usize,
    w: usize,
) -> Sample {
    let image = Tensor::from_vec(&[3, h, w], f(s.image.data(), 3)).expect("geometry preserved");
    Sample {
        image,
        mask: g(&s.mask),
    }
}

pub fn hflip(s: &Sample) -> Sample {
    let (h, w) = (s.height(), s.width());
    map_sample(
        s,
        |d, c| hflip_planes(d, c, h, w),
        |m| hflip_planes(m, 1, h, w),
        h,
        w,
    )
}

pub fn vflip(s: &Sample) -> Sample {
    let (h, w) = (s.height(), s.width());
    map_sample(
        s,
        |d, c| vflip_planes(d, c, h, w),
        |m| vflip_planes(m, 1, h, w),
        h,
        w,
    )
}

pub fn rot90(s: &Sample, quarter_turns: usize) -> Sample {
    let mut out = s.clone();
    for _ in 0..quarter_turns % 4 {
        let (h, w) = (out.height(), out.width());
        out = map_sample(
            &out,
            |d, c| rot90_planes(d, c, h, w),
            |m| rot90_planes(m, 1, h, w),
            w,
            h,
        );
    }
    out
}

pub fn brightness(s: &Sample, delta: f32) -> Sample {
    Sample {
        image: s.image.map(|v| (v + delta).clamp(0.0, 1.0)),
        mask: s.mask.clone(),
    }
}

fn half_pixel(dst: usize, scale: f64, len: usize) -> (usize, usize, f32) {
    let src = ((dst as f64 + 0.5) / scale - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(len - 1);
    let i1 = (i0 + 1).min(len - 1);
    (i0, i1, (src - i0 as f64).min(1.0) as f32)
}

/// Resizes by `scale` (bilinear image, nearest mask) and crops or pads back
/// to the original size. Crops start at `(oy, ox)`; padding goes
/// bottom/right with zeros and `ignore`.
pub fn rescale(s: &Sample, scale: f64, offset: (usize, usize), ignore: u8) -> Sample {
    let (h, w) = (s.height(), s.width());
    let (sh, sw) = (
        ((h as f64) * scale).round() as usize,
        ((w as f64) * scale).round() as usize,
    );
    let (sh, sw) = (sh.max(1), sw.max(1));
    let (oy, ox) = offset;
    let src = s.image.data();
    let mut image = vec![0f32; 3 * h * w];
    let mut mask = vec![ignore; h * w];
    for y in 0..h {
        let ty = y + oy;
        if ty >= sh {
            continue;
        }
        let (y0, y1, fy) = half_pixel(ty, scale, h);
        let my = ((ty as f64 + 0.5) / scale).floor().min((h - 1) as f64) as usize;
        for x in 0..w {
            let tx = x + ox;
            if tx >= sw {
                continue;
            }
            let (x0, x1, fx) = half_pixel(tx, scale, w);
            for c in 0..3 {
                let p = |yy: usize, xx: usize| src[(c * h + yy) * w + xx];
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bot = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                image[(c * h + y) * w + x] = top * (1.0 - fy) + bot * fy;
            }
            let mx = ((tx as f64 + 0.5) / scale).floor().min((w - 1) as f64) as usize;
            mask[y * w + x] = s.mask[my * w + mx];
        }
    }
    Sample {
        image: Tensor::from_vec(&[3, h, w], image).expect("shape matches"),
        mask,
    }
}

/// Random augmentation of `sample`, a pure function of `(seed, index, ops)`.
pub fn augment(
    sample: &Sample,
    seed: u64,
    index: usize,
    ops: &AugmentOps,
    ignore: u8,
) -> Result<Sample, DataError> {
    if !(ops.brightness >= 0.0 && ops.brightness.is_finite()) {
        return Err(DataError::Invalid(
            "brightness amplitude must be finite and >= 0".into(),
        ));
    }
    let mut rng = SeedTree::new(seed)
        .split("augment")
        .stream(&format!("sample{index}"));
    let mut s = sample.clone();
    if ops.hflip && rng.gen_bool(0.5) {
        s = hflip(&s);
    }
    if ops.vflip && rng.gen_bool(0.5) {
        s = vflip(&s);
    }
    if ops.rotate {
        let turns = rng.gen_range(0..4usize);
        let turns = if s.height() == s.width() {
            turns
        } else {
            turns & 2
        };
        s = rot90(&s, turns);
    }
    if ops.scale {
        let scale = SCALES[rng.gen_range(0..SCALES.len())];
        let (h, w) = (s.height(), s.width());
        let sh = ((h as f64) * scale).round() as usize;
        let sw = ((w as f64) * scale).round() as usize;
        let oy = if sh > h { rng.gen_range(0..=sh - h) } else { 0 };
        let ox = if sw > w { rng.gen_range(0..=sw - w) } else { 0 };
        if scale != 1.0 {
            s = rescale(&s, scale, (oy, ox), ignore);
        }
    }
    if ops.brightness > 0.0 {
        let delta = rng.gen_range(-ops.brightness..=ops.brightness);
        s = brightness(&s, delta);
    }
    Ok(s)
}
