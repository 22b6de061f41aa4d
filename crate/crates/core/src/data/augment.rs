use rand::Rng;

use super::{ImageTensor, SamplePair};
use crate::error::{Error, Result};

/// One paired geometric transform: optional flips, then `rot90` quarter
/// turns clockwise, then a `crop × crop` window at `(top, left)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AugmentParams {
    pub hflip: bool,
    pub vflip: bool,
    pub rot90: u8,
    pub top: usize,
    pub left: usize,
}

impl AugmentParams {
    pub fn sample<R: Rng>(height: usize, width: usize, crop: usize, rng: &mut R) -> Result<Self> {
        check_size(height, width, crop)?;
        let hflip = rng.random_bool(0.5);
        let vflip = rng.random_bool(0.5);
        let rot90 = rng.random_range(0..4u8);
        let (h, w) = if rot90 % 2 == 1 {
            (width, height)
        } else {
            (height, width)
        };
        let top = rng.random_range(0..=h - crop);
        let left = rng.random_range(0..=w - crop);
        Ok(AugmentParams {
            hflip,
            vflip,
            rot90,
            top,
            left,
        })
    }

    fn apply(&self, img: &ImageTensor, crop: usize) -> Result<ImageTensor> {
        let mut out = if self.hflip {
            img.flip_horizontal()
        } else {
            img.clone()
        };
        if self.vflip {
            out = out.flip_vertical();
        }
        for _ in 0..self.rot90 % 4 {
            out = out.rotate90();
        }
        out.crop(self.top, self.left, crop, crop)
    }
}

fn check_size(height: usize, width: usize, crop: usize) -> Result<()> {
    if height < crop || width < crop {
        return Err(Error::Size(format!(
            "{height}x{width} image is smaller than crop {crop}"
        )));
    }
    Ok(())
}

/// Applies the same transform to both images of the pair.
pub fn augment_with(pair: &SamplePair, crop: usize, params: AugmentParams) -> Result<SamplePair> {
    let (h, w, _) = pair.degraded.shape();
    check_size(h, w, crop)?;
    Ok(SamplePair {
        id: pair.id.clone(),
        degraded: params.apply(&pair.degraded, crop)?,
        clean: params.apply(&pair.clean, crop)?,
        task: pair.task,
        domain: pair.domain,
    })
}

/// Random flips, quarter-turn rotation and crop, shared by both images.
pub fn augment<R: Rng>(pair: &SamplePair, crop: usize, rng: &mut R) -> Result<SamplePair> {
    let (h, w, _) = pair.degraded.shape();
    let params = AugmentParams::sample(h, w, crop, rng)?;
    augment_with(pair, crop, params)
}
