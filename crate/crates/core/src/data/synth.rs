//! Procedural clean scenes and physics-inspired degradation generators with
//! separate source and target parameter regimes.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Domain, ImageTensor, Task};
use crate::error::{Error, Result};

/// Closed interval `[lo, hi]`, written as a two-element array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Range { lo, hi }
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }

    pub fn overlaps(&self, other: &Range) -> bool {
        self.lo <= other.hi && other.lo <= self.hi
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        if self.hi > self.lo {
            rng.random_range(self.lo..=self.hi)
        } else {
            self.lo
        }
    }

    fn check(&self, name: &str, min: f64, max: f64) -> Result<()> {
        if !(self.lo.is_finite() && self.hi.is_finite())
            || self.lo > self.hi
            || self.lo < min
            || self.hi > max
        {
            return Err(Error::Config(format!(
                "range {name} = [{}, {}] must be ordered within [{min}, {max}]",
                self.lo, self.hi
            )));
        }
        Ok(())
    }
}

impl From<[f64; 2]> for Range {
    fn from(v: [f64; 2]) -> Self {
        Range::new(v[0], v[1])
    }
}

impl From<Range> for [f64; 2] {
    fn from(r: Range) -> Self {
        [r.lo, r.hi]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum DegradationParams {
    /// Additive Gaussian noise.
    Noise { sigma: f64 },
    /// Scattering composition `t·x + (1 − t)·A`.
    Haze { transmission: f64, airlight: f64 },
    /// Bright oriented streaks; `density` is streaks per pixel, angle from
    /// vertical in degrees.
    Rain {
        density: f64,
        angle_deg: f64,
        intensity: f64,
    },
    /// `gain · x^gamma`.
    Lowlight { gamma: f64, gain: f64 },
    /// Per-channel attenuation plus a green-blue veiling cast.
    Underwater { attenuation: [f64; 3], cast: f64 },
}

impl DegradationParams {
    pub fn task(&self) -> Task {
        match self {
            DegradationParams::Noise { .. } => Task::Noise,
            DegradationParams::Haze { .. } => Task::Haze,
            DegradationParams::Rain { .. } => Task::Rain,
            DegradationParams::Lowlight { .. } => Task::Lowlight,
            DegradationParams::Underwater { .. } => Task::Underwater,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ParamRange(m));
        match *self {
            DegradationParams::Noise { sigma } if !(sigma >= 0.0 && sigma.is_finite()) => {
                bad(format!("noise sigma {sigma} must be >= 0"))
            }
            DegradationParams::Haze {
                transmission,
                airlight,
            } if !(transmission > 0.0 && transmission <= 1.0)
                || !(0.0..=1.0).contains(&airlight) =>
            {
                bad(format!(
                    "haze t={transmission} must be in (0,1], A={airlight} in [0,1]"
                ))
            }
            DegradationParams::Rain {
                density,
                angle_deg,
                intensity,
            } if !(0.0..=1.0).contains(&density)
                || !(0.0..=1.0).contains(&intensity)
                || !angle_deg.is_finite() =>
            {
                bad(format!(
                    "rain density={density}, intensity={intensity} must be in [0,1]"
                ))
            }
            DegradationParams::Lowlight { gamma, gain }
                if !(gamma > 0.0 && gamma.is_finite()) || !(gain >= 0.0 && gain.is_finite()) =>
            {
                bad(format!(
                    "lowlight gamma={gamma} must be > 0, gain={gain} >= 0"
                ))
            }
            DegradationParams::Underwater { attenuation, cast }
                if attenuation.iter().any(|a| !(0.0..=1.0).contains(a))
                    || !(0.0..=1.0).contains(&cast) =>
            {
                bad(format!(
                    "underwater attenuation {attenuation:?} and cast {cast} must be in [0,1]"
                ))
            }
            _ => Ok(()),
        }
    }
}

/// Global contrast/colour shift applied on top of target-domain
/// degradations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub contrast: f64,
    pub offset: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationSpec {
    pub params: DegradationParams,
    pub domain: Domain,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perturbation: Option<Perturbation>,
}

impl DegradationSpec {
    pub fn source(params: DegradationParams) -> Self {
        DegradationSpec {
            params,
            domain: Domain::Source,
            perturbation: None,
        }
    }

    pub fn task(&self) -> Task {
        self.params.task()
    }
}

/// Green-blue veil colour for the underwater cast.
const WATER_VEIL: [f64; 3] = [0.05, 0.55, 0.65];

/// Applies `spec` to `clean`. Deterministic given the state of `rng`; the
/// output is clamped to `[0, 1]` after every stage.
pub fn synthesize_degradation<R: Rng>(
    clean: &ImageTensor,
    spec: &DegradationSpec,
    rng: &mut R,
) -> Result<ImageTensor> {
    spec.params.validate()?;
    if clean.channels() != 3 {
        return Err(Error::Shape(format!(
            "expected 3 channels, got {}",
            clean.channels()
        )));
    }
    let (h, w, c) = clean.shape();
    let mut out = match spec.params {
        DegradationParams::Noise { sigma } => {
            if sigma == 0.0 {
                clean.clone()
            } else {
                let normal =
                    Normal::new(0.0, sigma).map_err(|e| Error::ParamRange(e.to_string()))?;
                let data = clean
                    .data()
                    .iter()
                    .map(|&v| v + normal.sample(rng))
                    .collect();
                ImageTensor::from_clamped(h, w, c, data)
            }
        }
        DegradationParams::Haze {
            transmission,
            airlight,
        } => clean.map_clamped(|v| transmission * v + (1.0 - transmission) * airlight),
        DegradationParams::Lowlight { gamma, gain } => clean.map_clamped(|v| gain * v.powf(gamma)),
        DegradationParams::Underwater { attenuation, cast } => {
            let data = clean
                .data()
                .chunks(3)
                .flat_map(|px| {
                    (0..3).map(move |ch| {
                        attenuation[ch] * px[ch] + (1.0 - attenuation[ch]) * cast * WATER_VEIL[ch]
                    })
                })
                .collect();
            ImageTensor::from_clamped(h, w, c, data)
        }
        DegradationParams::Rain {
            density,
            angle_deg,
            intensity,
        } => {
            let mask = rain_mask(h, w, density, angle_deg, rng);
            let mut img = clean.clone();
            for y in 0..h {
                for x in 0..w {
                    let m = intensity * mask[y * w + x];
                    for v in img.pixel_mut(y, x) {
                        *v = (*v * (1.0 - m) + m).clamp(0.0, 1.0);
                    }
                }
            }
            img
        }
    };
    if let Some(p) = spec.perturbation {
        let data = out
            .data()
            .chunks(3)
            .flat_map(|px| (0..3).map(move |ch| p.contrast * (px[ch] - 0.5) + 0.5 + p.offset[ch]))
            .collect();
        out = ImageTensor::from_clamped(h, w, c, data);
    }
    Ok(out)
}

/// Binary streak mask: `round(density·H·W)` line segments of length
/// `max(3, H/6)` at `angle_deg` from vertical with ±5° jitter.
fn rain_mask<R: Rng>(h: usize, w: usize, density: f64, angle_deg: f64, rng: &mut R) -> Vec<f64> {
    let mut mask = vec![0.0; h * w];
    let count = (density * (h * w) as f64).round() as usize;
    let len = (h / 6).max(3);
    for _ in 0..count {
        let theta = (angle_deg + rng.random_range(-5.0..=5.0)).to_radians();
        let (dx, dy) = (theta.sin(), theta.cos());
        let x0 = rng.random_range(0.0..w as f64);
        let y0 = rng.random_range(0.0..h as f64);
        for t in 0..len {
            let x = (x0 + dx * t as f64).floor();
            let y = (y0 + dy * t as f64).floor();
            if x >= 0.0 && y >= 0.0 && (x as usize) < w && (y as usize) < h {
                mask[y as usize * w + x as usize] = 1.0;
            }
        }
    }
    mask
}

/// A random smooth scene: two-colour gradient, soft shapes and a faint
/// sinusoidal texture.
pub fn generate_clean<R: Rng>(height: usize, width: usize, rng: &mut R) -> ImageTensor {
    let c0: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.2..0.8));
    let c1: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.2..0.8));
    let dir = rng.random_range(0.0..std::f64::consts::TAU);
    let (ux, uy) = (dir.cos(), dir.sin());
    struct Shape {
        cx: f64,
        cy: f64,
        r: f64,
        round: bool,
        color: [f64; 3],
    }
    let n_shapes = rng.random_range(3..=6);
    let shapes: Vec<Shape> = (0..n_shapes)
        .map(|_| Shape {
            cx: rng.random_range(0.0..1.0),
            cy: rng.random_range(0.0..1.0),
            r: rng.random_range(0.08..0.3),
            round: rng.random_bool(0.5),
            color: std::array::from_fn(|_| rng.random_range(0.05..0.95)),
        })
        .collect();
    let freq = rng.random_range(2.0..6.0);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let mut data = Vec::with_capacity(height * width * 3);
    for y in 0..height {
        for x in 0..width {
            let fx = (x as f64 + 0.5) / width as f64;
            let fy = (y as f64 + 0.5) / height as f64;
            let t = ((fx - 0.5) * ux + (fy - 0.5) * uy + 0.5).clamp(0.0, 1.0);
            let mut px: [f64; 3] = std::array::from_fn(|ch| c0[ch] * (1.0 - t) + c1[ch] * t);
            for s in &shapes {
                let d = if s.round {
                    ((fx - s.cx).powi(2) + (fy - s.cy).powi(2)).sqrt()
                } else {
                    (fx - s.cx).abs().max((fy - s.cy).abs())
                };
                // soft edge over ~2% of the image
                let a = ((s.r - d) / 0.02).clamp(0.0, 1.0);
                for ch in 0..3 {
                    px[ch] = px[ch] * (1.0 - a) + s.color[ch] * a;
                }
            }
            let tex = 0.03 * (freq * std::f64::consts::TAU * (fx + 0.5 * fy) + phase).sin();
            data.extend(px.iter().map(|v| v + tex));
        }
    }
    ImageTensor::from_clamped(height, width, 3, data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseRanges {
    pub sigma: Range,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HazeRanges {
    pub transmission: Range,
    pub airlight: Range,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RainRanges {
    pub density: Range,
    pub angle_deg: Range,
    pub intensity: Range,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LowlightRanges {
    pub gamma: Range,
    pub gain: Range,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnderwaterRanges {
    pub attenuation_r: Range,
    pub attenuation_g: Range,
    pub attenuation_b: Range,
    pub cast: Range,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskRegimes<T> {
    pub source: T,
    pub target: T,
}

impl<T> TaskRegimes<T> {
    fn get(&self, domain: Domain) -> &T {
        match domain {
            Domain::Source => &self.source,
            Domain::Target => &self.target,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationRanges {
    pub contrast: Range,
    pub offset: Range,
}

/// Parameter ranges per task and domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegimeConfig {
    pub noise: TaskRegimes<NoiseRanges>,
    pub haze: TaskRegimes<HazeRanges>,
    pub rain: TaskRegimes<RainRanges>,
    pub lowlight: TaskRegimes<LowlightRanges>,
    pub underwater: TaskRegimes<UnderwaterRanges>,
    /// Applied to target-domain samples only.
    pub target_perturbation: PerturbationRanges,
}

impl Default for RegimeConfig {
    fn default() -> Self {
        let r = Range::new;
        RegimeConfig {
            noise: TaskRegimes {
                source: NoiseRanges {
                    sigma: r(0.02, 0.08),
                },
                target: NoiseRanges {
                    sigma: r(0.10, 0.18),
                },
            },
            haze: TaskRegimes {
                source: HazeRanges {
                    transmission: r(0.55, 0.8),
                    airlight: r(0.7, 0.85),
                },
                target: HazeRanges {
                    transmission: r(0.3, 0.5),
                    airlight: r(0.85, 1.0),
                },
            },
            rain: TaskRegimes {
                source: RainRanges {
                    density: r(0.004, 0.008),
                    angle_deg: r(-15.0, 15.0),
                    intensity: r(0.3, 0.5),
                },
                target: RainRanges {
                    density: r(0.010, 0.016),
                    angle_deg: r(20.0, 35.0),
                    intensity: r(0.5, 0.7),
                },
            },
            lowlight: TaskRegimes {
                source: LowlightRanges {
                    gamma: r(1.5, 2.0),
                    gain: r(0.5, 0.7),
                },
                target: LowlightRanges {
                    gamma: r(2.2, 3.0),
                    gain: r(0.3, 0.45),
                },
            },
            underwater: TaskRegimes {
                source: UnderwaterRanges {
                    attenuation_r: r(0.5, 0.7),
                    attenuation_g: r(0.8, 0.95),
                    attenuation_b: r(0.85, 1.0),
                    cast: r(0.2, 0.4),
                },
                target: UnderwaterRanges {
                    attenuation_r: r(0.25, 0.45),
                    attenuation_g: r(0.7, 0.85),
                    attenuation_b: r(0.75, 0.9),
                    cast: r(0.45, 0.65),
                },
            },
            target_perturbation: PerturbationRanges {
                contrast: r(0.85, 0.95),
                offset: r(-0.03, 0.03),
            },
        }
    }
}

impl RegimeConfig {
    /// The range of each task's defining parameter, `(source, target)`.
    pub fn primary_ranges(&self, task: Task) -> (Range, Range) {
        match task {
            Task::Noise => (self.noise.source.sigma, self.noise.target.sigma),
            Task::Haze => (self.haze.source.transmission, self.haze.target.transmission),
            Task::Rain => (self.rain.source.density, self.rain.target.density),
            Task::Lowlight => (self.lowlight.source.gamma, self.lowlight.target.gamma),
            Task::Underwater => (
                self.underwater.source.attenuation_r,
                self.underwater.target.attenuation_r,
            ),
        }
    }

    /// Checks every range against the parameter invariants; with
    /// `strict_shift`, also requires disjoint source/target primary ranges.
    pub fn validate(&self, strict_shift: bool) -> Result<()> {
        for (d, name) in [(Domain::Source, "source"), (Domain::Target, "target")] {
            self.noise
                .get(d)
                .sigma
                .check(&format!("noise.{name}.sigma"), 0.0, 1.0)?;
            let hz = self.haze.get(d);
            hz.transmission
                .check(&format!("haze.{name}.transmission"), 1e-6, 1.0)?;
            hz.airlight
                .check(&format!("haze.{name}.airlight"), 0.0, 1.0)?;
            let rn = self.rain.get(d);
            rn.density
                .check(&format!("rain.{name}.density"), 0.0, 1.0)?;
            rn.angle_deg
                .check(&format!("rain.{name}.angle_deg"), -90.0, 90.0)?;
            rn.intensity
                .check(&format!("rain.{name}.intensity"), 0.0, 1.0)?;
            let ll = self.lowlight.get(d);
            ll.gamma
                .check(&format!("lowlight.{name}.gamma"), 1e-6, 10.0)?;
            ll.gain.check(&format!("lowlight.{name}.gain"), 0.0, 10.0)?;
            let uw = self.underwater.get(d);
            uw.attenuation_r
                .check(&format!("underwater.{name}.attenuation_r"), 0.0, 1.0)?;
            uw.attenuation_g
                .check(&format!("underwater.{name}.attenuation_g"), 0.0, 1.0)?;
            uw.attenuation_b
                .check(&format!("underwater.{name}.attenuation_b"), 0.0, 1.0)?;
            uw.cast
                .check(&format!("underwater.{name}.cast"), 0.0, 1.0)?;
        }
        self.target_perturbation
            .contrast
            .check("target_perturbation.contrast", 0.0, 2.0)?;
        self.target_perturbation
            .offset
            .check("target_perturbation.offset", -0.5, 0.5)?;
        if strict_shift {
            for task in Task::ALL {
                let (s, t) = self.primary_ranges(task);
                if s.overlaps(&t) {
                    return Err(Error::Config(format!(
                        "strict shift: {task} source range [{}, {}] overlaps target [{}, {}]",
                        s.lo, s.hi, t.lo, t.hi
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Draws a degradation spec for `task` from the `domain` regime.
pub fn sample_spec<R: Rng>(
    task: Task,
    domain: Domain,
    regimes: &RegimeConfig,
    rng: &mut R,
) -> DegradationSpec {
    let params = match task {
        Task::Noise => DegradationParams::Noise {
            sigma: regimes.noise.get(domain).sigma.sample(rng),
        },
        Task::Haze => {
            let r = regimes.haze.get(domain);
            DegradationParams::Haze {
                transmission: r.transmission.sample(rng),
                airlight: r.airlight.sample(rng),
            }
        }
        Task::Rain => {
            let r = regimes.rain.get(domain);
            DegradationParams::Rain {
                density: r.density.sample(rng),
                angle_deg: r.angle_deg.sample(rng),
                intensity: r.intensity.sample(rng),
            }
        }
        Task::Lowlight => {
            let r = regimes.lowlight.get(domain);
            DegradationParams::Lowlight {
                gamma: r.gamma.sample(rng),
                gain: r.gain.sample(rng),
            }
        }
        Task::Underwater => {
            let r = regimes.underwater.get(domain);
            DegradationParams::Underwater {
                attenuation: [
                    r.attenuation_r.sample(rng),
                    r.attenuation_g.sample(rng),
                    r.attenuation_b.sample(rng),
                ],
                cast: r.cast.sample(rng),
            }
        }
    };
    let perturbation = match domain {
        Domain::Source => None,
        Domain::Target => {
            let p = &regimes.target_perturbation;
            Some(Perturbation {
                contrast: p.contrast.sample(rng),
                offset: std::array::from_fn(|_| p.offset.sample(rng)),
            })
        }
    };
    DegradationSpec {
        params,
        domain,
        perturbation,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn constant(v: f64) -> ImageTensor {
        ImageTensor::filled(8, 8, 3, v)
    }

    fn scene(seed: u64) -> ImageTensor {
        generate_clean(16, 16, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn zero_noise_is_identity() {
        let img = scene(1);
        let spec = DegradationSpec::source(DegradationParams::Noise { sigma: 0.0 });
        let out = synthesize_degradation(&img, &spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn unit_lowlight_is_identity() {
        let img = scene(2);
        let spec = DegradationSpec::source(DegradationParams::Lowlight {
            gamma: 1.0,
            gain: 1.0,
        });
        let out = synthesize_degradation(&img, &spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn haze_hand_value() {
        let spec = DegradationSpec::source(DegradationParams::Haze {
            transmission: 0.5,
            airlight: 1.0,
        });
        let out = synthesize_degradation(&constant(0.2), &spec, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        for &v in out.data() {
            assert!((v - 0.6).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_params_rejected() {
        let bad = [
            DegradationParams::Noise { sigma: -0.1 },
            DegradationParams::Haze {
                transmission: 0.0,
                airlight: 0.5,
            },
            DegradationParams::Haze {
                transmission: 0.5,
                airlight: 1.5,
            },
            DegradationParams::Lowlight {
                gamma: 0.0,
                gain: 1.0,
            },
            DegradationParams::Underwater {
                attenuation: [0.5, 1.2, 0.5],
                cast: 0.1,
            },
        ];
        for p in bad {
            let err = synthesize_degradation(
                &constant(0.5),
                &DegradationSpec::source(p),
                &mut ChaCha8Rng::seed_from_u64(0),
            );
            assert!(matches!(err, Err(Error::ParamRange(_))));
        }
    }

    #[test]
    fn rain_adds_streaks() {
        let img = constant(0.3);
        let spec = DegradationSpec::source(DegradationParams::Rain {
            density: 0.01,
            angle_deg: 10.0,
            intensity: 0.5,
        });
        let out = synthesize_degradation(&img, &spec, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let brighter = out.data().iter().filter(|&&v| v > 0.3 + 1e-9).count();
        assert!(brighter > 0);
    }

    #[test]
    fn defaults_are_strictly_shifted() {
        RegimeConfig::default().validate(true).unwrap();
        let mut cfg = RegimeConfig::default();
        cfg.noise.target.sigma = Range::new(0.05, 0.12);
        assert!(cfg.validate(false).is_ok());
        assert!(matches!(cfg.validate(true), Err(Error::Config(_))));
    }

    #[test]
    fn regimes_stay_in_their_ranges() {
        let cfg = RegimeConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for task in Task::ALL {
            let (src, tgt) = cfg.primary_ranges(task);
            assert!(!src.overlaps(&tgt));
            for _ in 0..1000 {
                for (domain, range) in [(Domain::Source, src), (Domain::Target, tgt)] {
                    let spec = sample_spec(task, domain, &cfg, &mut rng);
                    spec.params.validate().unwrap();
                    let v = match spec.params {
                        DegradationParams::Noise { sigma } => sigma,
                        DegradationParams::Haze { transmission, .. } => transmission,
                        DegradationParams::Rain { density, .. } => density,
                        DegradationParams::Lowlight { gamma, .. } => gamma,
                        DegradationParams::Underwater { attenuation, .. } => attenuation[0],
                    };
                    assert!(range.contains(v), "{task} {domain}: {v} not in {range:?}");
                    assert_eq!(spec.perturbation.is_some(), domain == Domain::Target);
                }
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn synthesis_is_deterministic_and_in_range(seed in any::<u64>(), task_idx in 0usize..5, target in any::<bool>()) {
            let task = Task::ALL[task_idx];
            let domain = if target { Domain::Target } else { Domain::Source };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let clean = generate_clean(12, 10, &mut rng);
            let spec = sample_spec(task, domain, &RegimeConfig::default(), &mut rng);
            let a = synthesize_degradation(&clean, &spec, &mut ChaCha8Rng::seed_from_u64(seed ^ 1)).unwrap();
            let b = synthesize_degradation(&clean, &spec, &mut ChaCha8Rng::seed_from_u64(seed ^ 1)).unwrap();
            prop_assert_eq!(a.shape(), clean.shape());
            prop_assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
            prop_assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert!(clean.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
