//! Images, degradation tasks, datasets and batching.

mod augment;
mod batch;
mod folder;
mod synth;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use augment::{augment, augment_with, AugmentParams};
pub use batch::{make_balanced_batches, BalancedBatches, BatchPlan};
pub use folder::{
    load_folder_dataset, load_task_split, sample_seed, synthesize_split, write_split, SidecarEntry,
    Split,
};
pub use synth::{
    generate_clean, sample_spec, synthesize_degradation, DegradationParams, DegradationSpec,
    HazeRanges, LowlightRanges, NoiseRanges, Perturbation, PerturbationRanges, RainRanges, Range,
    RegimeConfig, TaskRegimes, UnderwaterRanges,
};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Noise,
    Haze,
    Rain,
    Lowlight,
    Underwater,
}

impl Task {
    pub const ALL: [Task; 5] = [
        Task::Noise,
        Task::Haze,
        Task::Rain,
        Task::Lowlight,
        Task::Underwater,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Noise => "noise",
            Task::Haze => "haze",
            Task::Rain => "rain",
            Task::Lowlight => "lowlight",
            Task::Underwater => "underwater",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown task {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            _ => Err(Error::Config(format!("unknown domain {s:?}"))),
        }
    }
}

/// An `H × W × C` image with interleaved channels and values in `[0, 1]`.
#[derive(Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl fmt::Debug for ImageTensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "ImageTensor({}x{}x{})",
            self.height, self.width, self.channels
        )
    }
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{height}x{width}x{channels} image needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if let Some(v) = data
            .iter()
            .find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0)
        {
            return Err(Error::ParamRange(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(ImageTensor {
            height,
            width,
            channels,
            data,
        })
    }

    /// Builds an image, clamping every value into `[0, 1]`.
    pub fn from_clamped(height: usize, width: usize, channels: usize, mut data: Vec<f64>) -> Self {
        assert_eq!(data.len(), height * width * channels);
        for v in &mut data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        ImageTensor {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self::from_clamped(
            height,
            width,
            channels,
            vec![value; height * width * channels],
        )
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub(crate) fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [f64] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    pub fn map_clamped(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_clamped(
            self.height,
            self.width,
            self.channels,
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    /// `[C, H, W]` planar copy.
    pub fn to_chw(&self) -> Vec<f64> {
        let hw = self.height * self.width;
        let mut out = vec![0.0; hw * self.channels];
        for p in 0..hw {
            for c in 0..self.channels {
                out[c * hw + p] = self.data[p * self.channels + c];
            }
        }
        out
    }

    /// From planar `[C, H, W]` values, clamped to `[0, 1]`.
    pub fn from_chw(height: usize, width: usize, channels: usize, chw: &[f64]) -> Self {
        let hw = height * width;
        assert_eq!(chw.len(), hw * channels);
        let mut data = vec![0.0; hw * channels];
        for c in 0..channels {
            for p in 0..hw {
                data[p * channels + c] = chw[c * hw + p];
            }
        }
        Self::from_clamped(height, width, channels, data)
    }

    /// Top-left corner `(top, left)`, size `h × w`.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Self> {
        if top + h > self.height || left + w > self.width {
            return Err(Error::Size(format!(
                "crop {h}x{w} at ({top},{left}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(h * w * self.channels);
        for y in top..top + h {
            let start = (y * self.width + left) * self.channels;
            data.extend_from_slice(&self.data[start..start + w * self.channels]);
        }
        Ok(ImageTensor {
            height: h,
            width: w,
            channels: self.channels,
            data,
        })
    }

    pub fn flip_horizontal(&self) -> Self {
        self.remap(self.height, self.width, |y, x| (y, self.width - 1 - x))
    }

    pub fn flip_vertical(&self) -> Self {
        self.remap(self.height, self.width, |y, x| (self.height - 1 - y, x))
    }

    /// Rotation by 90° clockwise.
    pub fn rotate90(&self) -> Self {
        // output (y, x) takes input (H-1-x, y)
        self.remap(self.width, self.height, |y, x| (self.height - 1 - x, y))
    }

    fn remap(&self, h: usize, w: usize, src: impl Fn(usize, usize) -> (usize, usize)) -> Self {
        let c = self.channels;
        let mut data = Vec::with_capacity(h * w * c);
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = src(y, x);
                let i = (sy * self.width + sx) * c;
                data.extend_from_slice(&self.data[i..i + c]);
            }
        }
        ImageTensor {
            height: h,
            width: w,
            channels: c,
            data,
        }
    }

    /// Nearest-neighbour resize, used for evaluation-resolution overrides.
    pub fn resize_nearest(&self, h: usize, w: usize) -> Self {
        let (sh, sw) = (self.height, self.width);
        self.remap(h, w, |y, x| (y * sh / h, x * sw / w))
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        assert_eq!(self.channels, 3);
        let bytes = self
            .data
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer size")
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let data = img.as_raw().iter().map(|&b| b as f64 / 255.0).collect();
        ImageTensor {
            height: img.height() as usize,
            width: img.width() as usize,
            channels: 3,
            data,
        }
    }
}

/// A degraded/clean image pair with its labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    pub id: String,
    pub degraded: ImageTensor,
    pub clean: ImageTensor,
    pub task: Task,
    pub domain: Domain,
}

impl SamplePair {
    pub fn new(
        id: impl Into<String>,
        degraded: ImageTensor,
        clean: ImageTensor,
        task: Task,
        domain: Domain,
    ) -> Result<Self> {
        if degraded.shape() != clean.shape() {
            return Err(Error::Shape(format!(
                "degraded {:?} vs clean {:?}",
                degraded.shape(),
                clean.shape()
            )));
        }
        Ok(SamplePair {
            id: id.into(),
            degraded,
            clean,
            task,
            domain,
        })
    }
}

/// Stacks images into an `[N, C, H, W]` tensor.
pub fn stack_images<'a>(images: impl IntoIterator<Item = &'a ImageTensor>) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut shape: Option<(usize, usize, usize)> = None;
    let mut n = 0;
    for img in images {
        match shape {
            None => shape = Some(img.shape()),
            Some(s) if s != img.shape() => {
                return Err(Error::Shape(format!(
                    "cannot stack {:?} with {:?}",
                    s,
                    img.shape()
                )))
            }
            _ => {}
        }
        data.extend(img.to_chw());
        n += 1;
    }
    let (h, w, c) = shape.ok_or_else(|| Error::Shape("empty image batch".into()))?;
    Tensor::new(&[n, c, h, w], data)
}

/// Splits an `[N, C, H, W]` tensor into clamped images.
pub fn unstack_images(t: &Tensor) -> Vec<ImageTensor> {
    let (n, c, h, w) = t.dims4();
    t.data()
        .chunks(c * h * w)
        .take(n)
        .map(|chw| ImageTensor::from_chw(h, w, c, chw))
        .collect()
}
