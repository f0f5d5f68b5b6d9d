//! Learnable bank of 32 high-pass 5x5x3 filters seeded from SRM residual kernels.
//!
//! The base kernels live in `data/srm_kernels.txt`. Each one is rotated through
//! four right angles and spread evenly over the colour channels, so every
//! initial filter sums to zero and ignores flat image regions.

use rand::Rng;
use stylestego_nn::{Graph, Module, Parameter, Tensor, Var};

use crate::error::{Result, StegoError};

pub const KERNEL_SIZE: usize = 5;
pub const BANK_SIZE: usize = 32;
pub const ROTATIONS: usize = 4;
const CHANNELS: usize = 3;

/// Coefficient table shipped with the crate.
pub const SRM_TABLE: &str = include_str!("../data/srm_kernels.txt");

/// Coefficients are snapped to multiples of 2^-20, which `f32` represents
/// exactly, so a zero-sum kernel stays zero-sum after storage.
fn snap(v: f64) -> f64 {
    const GRID: f64 = (1u32 << 20) as f64;
    (v * GRID).round() / GRID
}

/// One 5x5 base kernel from the coefficient table, already divided by its divisor.
#[derive(Clone, Debug, PartialEq)]
pub struct BaseKernel {
    pub name: String,
    pub grid: [[f64; KERNEL_SIZE]; KERNEL_SIZE],
}

impl BaseKernel {
    /// Quarter turn counter-clockwise about the centre cell.
    pub fn rotated(&self) -> BaseKernel {
        let mut grid = [[0.0; KERNEL_SIZE]; KERNEL_SIZE];
        for (r, row) in grid.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = self.grid[c][KERNEL_SIZE - 1 - r];
            }
        }
        BaseKernel { name: self.name.clone(), grid }
    }

    pub fn sum(&self) -> f64 {
        self.grid.iter().flatten().sum()
    }
}

/// Parses the plain-text kernel table format documented in the data file.
pub fn parse_kernel_table(text: &str) -> Result<Vec<BaseKernel>> {
    let bad = |msg: String| StegoError::Config(format!("kernel table: {msg}"));
    let mut kernels = Vec::new();
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#'));
    while let Some(header) = lines.next() {
        let rest = header.strip_prefix('[').ok_or_else(|| bad(format!("expected `[name]`, got `{header}`")))?;
        let (name, tail) = rest.split_once(']').ok_or_else(|| bad(format!("unterminated name in `{header}`")))?;
        let divisor = match tail.trim() {
            "" => 1.0,
            t => t
                .strip_prefix("divisor=")
                .and_then(|d| d.parse::<f64>().ok())
                .filter(|d| *d != 0.0)
                .ok_or_else(|| bad(format!("bad divisor in `{header}`")))?,
        };
        let mut grid = [[0.0; KERNEL_SIZE]; KERNEL_SIZE];
        for row in grid.iter_mut() {
            let line = lines.next().ok_or_else(|| bad(format!("kernel `{name}` is truncated")))?;
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|v| v.parse::<f64>().map_err(|_| bad(format!("bad coefficient `{v}` in `{name}`"))))
                .collect::<Result<_>>()?;
            if vals.len() != KERNEL_SIZE {
                return Err(bad(format!("kernel `{name}` row has {} values, expected {KERNEL_SIZE}", vals.len())));
            }
            for (dst, v) in row.iter_mut().zip(vals) {
                *dst = v / divisor;
            }
        }
        let k = BaseKernel { name: name.to_string(), grid };
        if k.sum().abs() > 1e-12 {
            return Err(bad(format!("kernel `{name}` sums to {} instead of 0", k.sum())));
        }
        kernels.push(k);
    }
    Ok(kernels)
}

/// All rotations of every base kernel, in table order.
pub fn expand_rotations(base: &[BaseKernel]) -> Vec<BaseKernel> {
    base.iter()
        .flat_map(|k| {
            std::iter::successors(Some(k.clone()), |k| Some(k.rotated())).take(ROTATIONS)
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct FilterBank {
    /// `[5, 5, 3, 32]` kernels.
    pub kernels: Parameter,
}

impl FilterBank {
    /// Bank initialised from the shipped SRM table.
    pub fn srm(name: &str) -> Result<Self> {
        Self::from_table(name, SRM_TABLE)
    }

    pub fn from_table(name: &str, table: &str) -> Result<Self> {
        let planar = expand_rotations(&parse_kernel_table(table)?);
        if planar.len() != BANK_SIZE {
            return Err(StegoError::Config(format!(
                "kernel table expands to {} filters, the bank needs exactly {BANK_SIZE}",
                planar.len()
            )));
        }
        let mut t = Tensor::zeros(&[KERNEL_SIZE, KERNEL_SIZE, CHANNELS, BANK_SIZE]);
        let at = |ky: usize, kx: usize, c: usize, o: usize| ((ky * KERNEL_SIZE + kx) * CHANNELS + c) * BANK_SIZE + o;
        for (o, k) in planar.iter().enumerate() {
            for c in 0..CHANNELS {
                let mut total = 0.0;
                for ky in 0..KERNEL_SIZE {
                    for kx in 0..KERNEL_SIZE {
                        let v = snap(k.grid[ky][kx] / CHANNELS as f64);
                        t.data_mut()[at(ky, kx, c, o)] = v;
                        total += v;
                    }
                }
                // Snapped values are exact multiples of the grid step, so moving
                // the residual onto the centre tap zeroes each channel's sum.
                let centre = KERNEL_SIZE / 2;
                t.data_mut()[at(centre, centre, c, o)] -= total;
            }
        }
        Ok(Self { kernels: Parameter::new(format!("{name}.kernels"), t) })
    }

    /// Bank with random kernels, for ablations without the residual prior.
    pub fn random<R: Rng + ?Sized>(name: &str, rng: &mut R) -> Self {
        let std = (2.0 / (KERNEL_SIZE * KERNEL_SIZE * CHANNELS) as f64).sqrt();
        let t = Tensor::randn(&[KERNEL_SIZE, KERNEL_SIZE, CHANNELS, BANK_SIZE], std, rng);
        Self { kernels: Parameter::new(format!("{name}.kernels"), t) }
    }

    pub fn frozen(&self) -> bool {
        self.kernels.frozen
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.kernels.frozen = frozen;
    }

    /// Sum of the coefficients of filter `o`.
    pub fn kernel_sum(&self, o: usize) -> f64 {
        self.kernels.value.data().iter().skip(o).step_by(BANK_SIZE).sum()
    }

    /// Stride-1 residual map `[h, w, 32]` of an `[h, w, 3]` image. Borders are
    /// replicated so flat images give an exactly zero response everywhere.
    pub fn extract_texture(&self, g: &mut Graph, img: Var) -> Result<Var> {
        match g.shape(img) {
            [_, _, CHANNELS] => {}
            s => {
                return Err(StegoError::Shape(format!(
                    "filter bank expects a 3-channel image, got shape {s:?}"
                )))
            }
        }
        let padded = g.pad_replicate(img, KERNEL_SIZE / 2)?;
        let w = g.param(&self.kernels);
        Ok(g.conv2d(padded, w, None, 1, 0)?)
    }
}

impl Module for FilterBank {
    fn params(&self) -> Vec<&Parameter> {
        vec![&self.kernels]
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.kernels]
    }
}
