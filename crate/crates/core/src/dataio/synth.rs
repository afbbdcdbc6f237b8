//! Synthetic membrane images: Voronoi tessellations whose cell borders are
//! the membrane class.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::Sample;
use crate::error::{Error, Result};
use crate::image::{ClassMap, GrayImage};
use crate::rng;

/// Generator parameterisation; the two families stand in for distinct
/// datasets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Family {
    A,
    B,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::A => "a",
            Family::B => "b",
        }
    }
}

impl std::str::FromStr for Family {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "a" => Ok(Family::A),
            "b" => Ok(Family::B),
            other => Err(format!("unknown family {other:?} (expected a or b)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub size: usize,
    pub family: Family,
    /// Chebyshev radius, in pixels, within which a region border marks a
    /// pixel as membrane.
    pub membrane_thickness: usize,
    /// Cell centres per pixel of image area.
    pub cell_density: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SynthConfig {
    pub fn new(family: Family, size: usize, seed: u64) -> Self {
        let (cell_density, noise_sigma) = match family {
            Family::A => (0.0025, 0.08),
            Family::B => (0.0035, 0.12),
        };
        SynthConfig {
            size,
            family,
            membrane_thickness: 1,
            cell_density,
            noise_sigma,
            seed,
        }
    }

    fn centres(&self) -> usize {
        (self.cell_density * (self.size * self.size) as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.size == 0 {
            return Err(Error::Config("synthetic size must be positive".into()));
        }
        if self.membrane_thickness == 0 {
            return Err(Error::Config("membrane_thickness must be at least 1".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config("noise_sigma must be non-negative".into()));
        }
        if !(self.cell_density > 0.0) || self.centres() == 0 {
            return Err(Error::Config(format!(
                "cell_density {} yields no cell centres on a {}x{} image",
                self.cell_density, self.size, self.size
            )));
        }
        Ok(())
    }
}

struct Style {
    membrane: f64,
    interior: (f64, f64),
    /// Bright non-membrane speckles per image.
    speckles: usize,
}

fn style(family: Family) -> Style {
    match family {
        Family::A => Style {
            membrane: 0.85,
            interior: (0.20, 0.40),
            speckles: 0,
        },
        Family::B => Style {
            membrane: 0.75,
            interior: (0.25, 0.45),
            speckles: 4,
        },
    }
}

/// Generates `count` samples with ids `<family>_<index>`; sample `i` only
/// depends on `(cfg, i)`.
pub fn generate_synthetic(cfg: &SynthConfig, count: usize) -> Result<Vec<Sample>> {
    cfg.validate()?;
    let idx: Vec<usize> = (0..count).collect();
    Ok(crate::par::map(&idx, |&i| generate_one(cfg, i)))
}

fn generate_one(cfg: &SynthConfig, index: usize) -> Sample {
    let n = cfg.size;
    let st = style(cfg.family);
    let mut r = rng::stream(cfg.seed, &format!("synth.{}", cfg.family.name()), index as u64);

    let centres: Vec<(f64, f64)> = (0..cfg.centres())
        .map(|_| (r.gen_range(0.0..n as f64), r.gen_range(0.0..n as f64)))
        .collect();
    let mut region = vec![0usize; n * n];
    for y in 0..n {
        for x in 0..n {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let mut best = (f64::INFINITY, 0);
            for (k, &(cy, cx)) in centres.iter().enumerate() {
                let d = (py - cy).powi(2) + (px - cx).powi(2);
                if d < best.0 {
                    best = (d, k);
                }
            }
            region[y * n + x] = best.1;
        }
    }

    let t = cfg.membrane_thickness as isize;
    let mut labels = vec![0u8; n * n];
    for y in 0..n {
        for x in 0..n {
            let me = region[y * n + x];
            'scan: for dy in -t..=t {
                for dx in -t..=t {
                    let (yy, xx) = (y as isize + dy, x as isize + dx);
                    if yy < 0 || xx < 0 || yy >= n as isize || xx >= n as isize {
                        continue;
                    }
                    if region[yy as usize * n + xx as usize] != me {
                        labels[y * n + x] = 1;
                        break 'scan;
                    }
                }
            }
        }
    }

    let shades: Vec<f64> = (0..centres.len())
        .map(|_| r.gen_range(st.interior.0..st.interior.1))
        .collect();
    let mut raw: Vec<f64> = (0..n * n)
        .map(|i| if labels[i] == 1 { st.membrane } else { shades[region[i]] })
        .collect();
    for _ in 0..st.speckles {
        let (sy, sx) = (r.gen_range(0..n), r.gen_range(0..n));
        if labels[sy * n + sx] == 0 {
            raw[sy * n + sx] = st.membrane;
        }
    }

    // 3x3 binomial blur with edge clamping.
    let k = [1.0, 2.0, 1.0];
    let clamp = |v: isize| v.clamp(0, n as isize - 1) as usize;
    let mut blurred = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            let mut acc = 0.0;
            for (i, wy) in k.iter().enumerate() {
                for (j, wx) in k.iter().enumerate() {
                    let yy = clamp(y as isize + i as isize - 1);
                    let xx = clamp(x as isize + j as isize - 1);
                    acc += wy * wx * raw[yy * n + xx];
                }
            }
            blurred[y * n + x] = acc / 16.0;
        }
    }
    if cfg.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, cfg.noise_sigma).expect("valid sigma");
        for v in blurred.iter_mut() {
            *v += noise.sample(&mut r);
        }
    }
    for v in blurred.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }

    Sample {
        image: GrayImage::new(n, n, blurred).expect("square image"),
        label: ClassMap::new(n, n, labels).expect("square labels"),
        id: format!("{}_{index:03}", cfg.family.name()),
    }
}
