//! Affine perturbations of single images.
//!
//! The warp is inverse mapped about the image centre `((w-1)/2, (h-1)/2)`:
//! each output pixel looks up its source location and samples it
//! bilinearly, reading zero outside the image. Angles are in degrees with
//! positive rotation counter-clockwise on screen; shear is along x.
//! Translations are fractions of the side length, rounded half-up to whole
//! pixels.

use std::fmt;
use std::str::FromStr;

use crate::rng::Rng;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AffineKind {
    Rotation,
    Scaling,
    Translation,
    Shear,
}

impl AffineKind {
    pub fn name(self) -> &'static str {
        match self {
            AffineKind::Rotation => "rotation",
            AffineKind::Scaling => "scaling",
            AffineKind::Translation => "translation",
            AffineKind::Shear => "shear",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AffineSpec {
    /// Degrees.
    Rotation(f64),
    /// Scale factor about the centre.
    Scaling(f64),
    /// (horizontal, vertical) fractions of the side length.
    Translation(f64, f64),
    /// Degrees of x-shear.
    Shear(f64),
}

impl AffineSpec {
    pub fn identity() -> Self {
        AffineSpec::Rotation(0.0)
    }

    /// The twelve perturbations of the invariance table.
    pub fn default_grid() -> Vec<AffineSpec> {
        use AffineSpec::*;
        vec![
            Rotation(5.0),
            Rotation(10.0),
            Rotation(15.0),
            Scaling(0.5),
            Scaling(0.8),
            Scaling(1.1),
            Translation(0.0, 0.1),
            Translation(0.1, 0.0),
            Translation(0.1, 0.1),
            Shear(5.0),
            Shear(10.0),
            Shear(15.0),
        ]
    }

    pub fn kind(&self) -> AffineKind {
        match self {
            AffineSpec::Rotation(_) => AffineKind::Rotation,
            AffineSpec::Scaling(_) => AffineKind::Scaling,
            AffineSpec::Translation(..) => AffineKind::Translation,
            AffineSpec::Shear(_) => AffineKind::Shear,
        }
    }

    /// Magnitude as written in reports: `5`, `0.8`, `0:0.1`.
    pub fn magnitude_label(&self) -> String {
        match *self {
            AffineSpec::Rotation(v) | AffineSpec::Scaling(v) | AffineSpec::Shear(v) => format!("{v}"),
            AffineSpec::Translation(x, y) => format!("{x}:{y}"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            AffineSpec::Scaling(s) if !(s > 0.0 && s.is_finite()) => {
                Err(Error::config(format!("scale factor must be positive, got {s}")))
            }
            AffineSpec::Translation(x, y) if !(x.abs() < 1.0 && y.abs() < 1.0) => {
                Err(Error::config(format!("translation fractions must be below 1, got ({x}, {y})")))
            }
            AffineSpec::Rotation(a) | AffineSpec::Shear(a) if !a.is_finite() => {
                Err(Error::config("non-finite angle"))
            }
            AffineSpec::Shear(a) if a.abs() >= 90.0 => Err(Error::config(format!("shear of {a} degrees"))),
            _ => Ok(()),
        }
    }

    /// Random draw within `[-magnitude, +magnitude]` for angles and
    /// translations. Scaling has no symmetric range and is returned as is.
    pub fn sample(&self, rng: &mut Rng) -> AffineSpec {
        let mut sym = |m: f64| (2.0 * rng.uniform() - 1.0) * m;
        match *self {
            AffineSpec::Rotation(a) => AffineSpec::Rotation(sym(a)),
            AffineSpec::Shear(a) => AffineSpec::Shear(sym(a)),
            AffineSpec::Translation(x, y) => {
                let tx = sym(x);
                AffineSpec::Translation(tx, sym(y))
            }
            s @ AffineSpec::Scaling(_) => s,
        }
    }

    /// Pixel shift for a translation on a `rows x cols` image.
    pub fn pixel_shift(&self, rows: usize, cols: usize) -> (f64, f64) {
        match *self {
            AffineSpec::Translation(fx, fy) => (round_half_up(fx * cols as f64), round_half_up(fy * rows as f64)),
            _ => (0.0, 0.0),
        }
    }
}

fn round_half_up(v: f64) -> f64 {
    (v + 0.5).floor()
}

impl fmt::Display for AffineSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.kind().name(), self.magnitude_label())
    }
}

impl FromStr for AffineSpec {
    type Err = Error;

    /// `rotation:5`, `scaling:0.8`, `translation:0.1:0`, `shear:10`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let num = |t: &str| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| Error::config(format!("bad number {t:?} in transform {s:?}")))
        };
        let spec = match parts.as_slice() {
            ["rotation", a] => AffineSpec::Rotation(num(a)?),
            ["scaling", v] => AffineSpec::Scaling(num(v)?),
            ["translation", x, y] => AffineSpec::Translation(num(x)?, num(y)?),
            ["shear", a] => AffineSpec::Shear(num(a)?),
            _ => return Err(Error::config(format!("cannot parse transform {s:?}"))),
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Warps a row-major `rows x cols` image.
pub fn affine_transform(img: &[f64], rows: usize, cols: usize, spec: &AffineSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    if img.len() != rows * cols {
        return Err(Error::shape(format!("image of {} values is not {rows}x{cols}", img.len())));
    }
    // inverse linear map, row-major 2x2 acting on (x, y)
    let inv = match *spec {
        AffineSpec::Rotation(deg) => {
            let (s, c) = deg.to_radians().sin_cos();
            // forward [c s; -s c] is orthogonal
            [c, -s, s, c]
        }
        AffineSpec::Scaling(k) => [1.0 / k, 0.0, 0.0, 1.0 / k],
        AffineSpec::Translation(..) => [1.0, 0.0, 0.0, 1.0],
        AffineSpec::Shear(deg) => [1.0, -deg.to_radians().tan(), 0.0, 1.0],
    };
    let (tx, ty) = spec.pixel_shift(rows, cols);
    let cx = (cols as f64 - 1.0) / 2.0;
    let cy = (rows as f64 - 1.0) / 2.0;
    let at = |x: isize, y: isize| -> f64 {
        if x < 0 || y < 0 || x >= cols as isize || y >= rows as isize {
            0.0
        } else {
            img[y as usize * cols + x as usize]
        }
    };
    let mut out = vec![0.0; rows * cols];
    for oy in 0..rows {
        for ox in 0..cols {
            let dx = ox as f64 - cx - tx;
            let dy = oy as f64 - cy - ty;
            let sx = inv[0] * dx + inv[1] * dy + cx;
            let sy = inv[2] * dx + inv[3] * dy + cy;
            let x0 = sx.floor();
            let y0 = sy.floor();
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            let v = (1.0 - fx) * (1.0 - fy) * at(x0, y0)
                + fx * (1.0 - fy) * at(x0 + 1, y0)
                + (1.0 - fx) * fy * at(x0, y0 + 1)
                + fx * fy * at(x0 + 1, y0 + 1);
            out[oy * cols + ox] = v.clamp(0.0, 1.0);
        }
    }
    Ok(out)
}
