//! Pad to a multiple of the tile size (bottom/right) and cut a
//! non-overlapping row-major grid of square tiles.

use serde::{Deserialize, Serialize};

use super::{DataError, Sample};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TileSpec {
    pub tile: usize,
    pub image_pad: f32,
    pub mask_pad: u8,
}

impl Default for TileSpec {
    fn default() -> Self {
        TileSpec {
            tile: 1024,
            image_pad: 0.0,
            mask_pad: 255,
        }
    }
}

impl TileSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.tile < 32 || !self.tile.is_multiple_of(32) {
            return Err(DataError::Invalid(format!(
                "tile size {} must be at least 32 and divisible by 32",
                self.tile
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileLayout {
    pub height: usize,
    pub width: usize,
    pub tile: usize,
    pub rows: usize,
    pub cols: usize,
}

impl TileLayout {
    pub fn new(height: usize, width: usize, tile: usize) -> Self {
        TileLayout {
            height,
            width,
            tile,
            rows: height.div_ceil(tile),
            cols: width.div_ceil(tile),
        }
    }

    pub fn padded_height(&self) -> usize {
        self.rows * self.tile
    }

    pub fn padded_width(&self) -> usize {
        self.cols * self.tile
    }

    pub fn num_tiles(&self) -> usize {
        self.rows * self.cols
    }

    /// Top-left corner of tile `i` on the padded canvas.
    pub fn origin(&self, i: usize) -> (usize, usize) {
        ((i / self.cols) * self.tile, (i % self.cols) * self.tile)
    }
}

/// Cuts `channels` planes of `layout.height × layout.width` values into
/// tiles of `channels × tile × tile`, filling out-of-image cells with `pad`.
pub fn tile_planes<E: Copy>(
    data: &[E],
    channels: usize,
    layout: &TileLayout,
    pad: E,
) -> Vec<Vec<E>> {
    let (h, w, t) = (layout.height, layout.width, layout.tile);
    (0..layout.num_tiles())
        .map(|i| {
            let (y0, x0) = layout.origin(i);
            let mut out = Vec::with_capacity(channels * t * t);
            for c in 0..channels {
                for y in y0..y0 + t {
                    for x in x0..x0 + t {
                        out.push(if y < h && x < w {
                            data[(c * h + y) * w + x]
                        } else {
                            pad
                        });
                    }
                }
            }
            out
        })
        .collect()
}

/// Inverse of [`tile_planes`]: reassembles and crops the padding.
pub fn untile_planes<E: Copy>(
    tiles: &[Vec<E>],
    channels: usize,
    layout: &TileLayout,
) -> Result<Vec<E>, DataError> {
    let (h, w, t) = (layout.height, layout.width, layout.tile);
    if tiles.len() != layout.num_tiles() {
        return Err(DataError::Invalid(format!(
            "layout needs {} tiles, got {}",
            layout.num_tiles(),
            tiles.len()
        )));
    }
    if let Some(bad) = tiles.iter().find(|tl| tl.len() != channels * t * t) {
        return Err(DataError::Invalid(format!(
            "tile holds {} values, expected {}",
            bad.len(),
            channels * t * t
        )));
    }
    let mut out = Vec::with_capacity(channels * h * w);
    for c in 0..channels {
        for y in 0..h {
            for x in 0..w {
                let i = (y / t) * layout.cols + x / t;
                out.push(tiles[i][(c * t + y % t) * t + x % t]);
            }
        }
    }
    Ok(out)
}

/// Tiles a `[C, H, W]` tensor.
pub fn tile_tensor<T: Scalar>(
    x: &Tensor<T>,
    tile: usize,
    pad: T,
) -> Result<(Vec<Tensor<T>>, TileLayout), DataError> {
    let (c, h, w) = match x.shape() {
        &[c, h, w] => (c, h, w),
        s => return Err(DataError::Invalid(format!("expected [C, H, W], got {s:?}"))),
    };
    let layout = TileLayout::new(h, w, tile);
    let tiles = tile_planes(x.data(), c, &layout, pad)
        .into_iter()
        .map(|d| Tensor::from_vec(&[c, tile, tile], d))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((tiles, layout))
}

/// Reassembles `[C, t, t]` tiles into `[C, H, W]`.
pub fn untile_tensor<T: Scalar>(
    tiles: &[Tensor<T>],
    layout: &TileLayout,
) -> Result<Tensor<T>, DataError> {
    let c = tiles.first().map_or(0, |t| t.shape()[0]);
    let planes: Vec<Vec<T>> = tiles.iter().map(|t| t.data().to_vec()).collect();
    let data = untile_planes(&planes, c, layout)?;
    Ok(Tensor::from_vec(&[c, layout.height, layout.width], data)?)
}

pub fn pad_and_tile(
    sample: &Sample,
    spec: &TileSpec,
) -> Result<(Vec<Sample>, TileLayout), DataError> {
    spec.validate()?;
    let (images, layout) = tile_tensor(&sample.image, spec.tile, spec.image_pad)?;
    let masks = tile_planes(&sample.mask, 1, &layout, spec.mask_pad);
    let tiles = images
        .into_iter()
        .zip(masks)
        .map(|(image, mask)| Sample::new(image, mask))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((tiles, layout))
}

pub fn untile(tiles: &[Sample], layout: &TileLayout) -> Result<Sample, DataError> {
    let images: Vec<Tensor<f32>> = tiles.iter().map(|s| s.image.clone()).collect();
    let masks: Vec<Vec<u8>> = tiles.iter().map(|s| s.mask.clone()).collect();
    Sample::new(
        untile_tensor(&images, layout)?,
        untile_planes(&masks, 1, layout)?,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_arithmetic() {
        let l = TileLayout::new(2500, 2000, 1024);
        assert_eq!(
            (l.padded_height(), l.padded_width(), l.rows, l.cols),
            (3072, 2048, 3, 2)
        );
        assert_eq!(l.num_tiles(), 6);
        assert_eq!(l.origin(5), (2048, 1024));
    }

    #[test]
    fn round_trip_with_padding() {
        let image = Tensor::from_fn(&[3, 40, 70], |i| (i % 251) as f32 / 251.0);
        let mask: Vec<u8> = (0..40 * 70).map(|i| (i % 5) as u8).collect();
        let s = Sample::new(image, mask).unwrap();
        let (tiles, layout) = pad_and_tile(
            &s,
            &TileSpec {
                tile: 32,
                ..TileSpec::default()
            },
        )
        .unwrap();
        assert_eq!(tiles.len(), 6);
        assert_eq!(tiles[5].mask[31 * 32 + 31], 255);
        assert_eq!(tiles[5].image.data()[32 * 32 - 1], 0.0);
        assert_eq!(untile(&tiles, &layout).unwrap(), s);
    }

    #[test]
    fn rejects_bad_tile() {
        assert!(TileSpec {
            tile: 48,
            ..TileSpec::default()
        }
        .validate()
        .is_err());
        assert!(TileSpec {
            tile: 16,
            ..TileSpec::default()
        }
        .validate()
        .is_err());
    }
}
