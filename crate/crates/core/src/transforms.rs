//! Differentiable image transformations.
//!
//! Every transform maps a `B×C×H×W` batch with pixels in `[0, 1]` to a batch
//! of the same shape, clamped back into `[0, 1]`. Geometric and filtering
//! transforms are fixed sparse linear maps, so gradients flow through them
//! exactly; gamma and brightness are pixelwise.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, Mutex, OnceLock};

use serde::{Deserialize, Serialize};

use crate::autodiff::{LinearMap, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum TransformSpec {
    HFlip,
    /// Central crop of `1/factor` of each side, resampled back to full size.
    Zoom(f64),
    Gamma(f64),
    /// Translation in pixels; positive `dx` moves content right, positive
    /// `dy` moves it down.
    Shift { dx: f64, dy: f64 },
    Contrast(f64),
    Grayscale,
    /// Uniform `1×w` horizontal box filter.
    HBlur(usize),
    Brightness(f64),
}

pub const DEFAULT_ZOOM: f64 = 1.05;
pub const KD_ZOOM: f64 = 1.03;
pub const DEFAULT_GAMMA: f64 = 0.6;
pub const DEFAULT_SHIFT: (f64, f64) = (0.5, 0.5);

impl TransformSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid(msg));
        match *self {
            TransformSpec::Zoom(f) if !(f > 1.0 && f.is_finite()) => {
                bad(format!("zoom factor must be > 1, got {f}"))
            }
            TransformSpec::Gamma(g) if !(g > 0.0 && g.is_finite()) => {
                bad(format!("gamma must be > 0, got {g}"))
            }
            TransformSpec::Contrast(f) if !(f > 0.0 && f.is_finite()) => {
                bad(format!("contrast factor must be > 0, got {f}"))
            }
            TransformSpec::HBlur(w) if w < 3 || w % 2 == 0 => {
                bad(format!("blur width must be odd and ≥ 3, got {w}"))
            }
            TransformSpec::Brightness(b) if !b.is_finite() => bad(format!("brightness {b}")),
            TransformSpec::Shift { dx, dy } if !(dx.is_finite() && dy.is_finite()) => {
                bad(format!("shift ({dx}, {dy})"))
            }
            _ => Ok(()),
        }
    }

    /// Applies the transform to a `B×C×H×W` batch on the tape.
    pub fn apply_var(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        self.validate()?;
        let shape = tape.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(Error::invalid(format!(
                "transforms expect a B×C×H×W batch, got {shape:?}"
            )));
        }
        let (c, h, w) = (shape[1], shape[2], shape[3]);
        let y = match *self {
            TransformSpec::Gamma(g) => tape.pow_scalar(x, g)?,
            TransformSpec::Brightness(b) => tape.add_scalar(x, b)?,
            TransformSpec::Contrast(f) => {
                let flat = tape.reshape(x, &[shape[0], c, h * w])?;
                let mean = tape.mean_axis(flat, 2)?;
                let scaled = tape.mul_scalar(flat, f)?;
                let offset = tape.mul_scalar(mean, 1.0 - f)?;
                let y = tape.add(scaled, offset)?;
                tape.reshape(y, &shape)?
            }
            _ => {
                let map = self.cached_map(c, h, w)?;
                tape.linear_map(x, map)?
            }
        };
        tape.clamp(y, 0.0, 1.0)
    }

    /// Applies the transform to one `C×H×W` image or a `B×C×H×W` batch.
    pub fn apply(&self, image: &Tensor) -> Result<Tensor> {
        let shape = image.shape().to_vec();
        let batched = match shape.len() {
            3 => image.clone().reshape(&[1, shape[0], shape[1], shape[2]])?,
            4 => image.clone(),
            _ => return Err(Error::invalid(format!("expected an image, got shape {shape:?}"))),
        };
        let mut tape = Tape::new();
        let x = tape.constant(batched);
        let y = self.apply_var(&mut tape, x)?;
        tape.tensor(y).with_requires_grad(false).reshape(&shape)
    }

    /// True for transforms that are linear in pixel values before clamping.
    pub fn is_linear(&self) -> bool {
        !matches!(self, TransformSpec::Gamma(_) | TransformSpec::Brightness(_))
    }

    fn cached_map(&self, c: usize, h: usize, w: usize) -> Result<Arc<LinearMap>> {
        static CACHE: OnceLock<Mutex<HashMap<String, Arc<LinearMap>>>> = OnceLock::new();
        let key = format!("{self}@{c}x{h}x{w}");
        let cache = CACHE.get_or_init(Default::default);
        if let Some(m) = cache.lock().expect("transform cache poisoned").get(&key) {
            return Ok(m.clone());
        }
        let map = Arc::new(self.build_map(c, h, w)?);
        cache
            .lock()
            .expect("transform cache poisoned")
            .insert(key, map.clone());
        Ok(map)
    }

    fn build_map(&self, c: usize, h: usize, w: usize) -> Result<LinearMap> {
        let shape = [c, h, w];
        let idx = |ch: usize, i: usize, j: usize| (ch * h + i) * w + j;
        let mut rows: Vec<Vec<(usize, f64)>> = Vec::with_capacity(c * h * w);
        match *self {
            TransformSpec::HFlip => {
                for ch in 0..c {
                    for i in 0..h {
                        for j in 0..w {
                            rows.push(vec![(idx(ch, i, w - 1 - j), 1.0)]);
                        }
                    }
                }
            }
            TransformSpec::Zoom(f) => {
                let (hc, wc) = (h as f64 / 2.0, w as f64 / 2.0);
                for ch in 0..c {
                    for i in 0..h {
                        let sy = (i as f64 + 0.5 - hc) / f + hc - 0.5;
                        for j in 0..w {
                            let sx = (j as f64 + 0.5 - wc) / f + wc - 0.5;
                            rows.push(bilinear(ch, sy, sx, h, w));
                        }
                    }
                }
            }
            TransformSpec::Shift { dx, dy } => {
                if dx.abs() >= w as f64 || dy.abs() >= h as f64 {
                    return Err(Error::invalid(format!(
                        "shift ({dx}, {dy}) out of range for a {h}x{w} image"
                    )));
                }
                for ch in 0..c {
                    for i in 0..h {
                        for j in 0..w {
                            rows.push(bilinear(ch, i as f64 - dy, j as f64 - dx, h, w));
                        }
                    }
                }
            }
            TransformSpec::HBlur(width) => {
                let r = (width / 2) as isize;
                let wt = 1.0 / width as f64;
                for ch in 0..c {
                    for i in 0..h {
                        for j in 0..w {
                            rows.push(
                                (-r..=r)
                                    .map(|d| {
                                        let jj = (j as isize + d).clamp(0, w as isize - 1) as usize;
                                        (idx(ch, i, jj), wt)
                                    })
                                    .collect(),
                            );
                        }
                    }
                }
            }
            TransformSpec::Grayscale => {
                let wt = 1.0 / c as f64;
                for _ in 0..c {
                    for i in 0..h {
                        for j in 0..w {
                            rows.push((0..c).map(|cc| (idx(cc, i, j), wt)).collect());
                        }
                    }
                }
            }
            _ => unreachable!("pixelwise transforms have no linear map"),
        }
        LinearMap::from_rows(&shape, &shape, rows)
    }
}

/// Bilinear sample of channel `ch` at fractional `(y, x)`, replicating the
/// edge for out-of-range coordinates.
fn bilinear(ch: usize, y: f64, x: f64, h: usize, w: usize) -> Vec<(usize, f64)> {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let at = |i: usize, j: usize| (ch * h + i) * w + j;
    let mut terms = Vec::with_capacity(4);
    for (i, wy) in [(y0, 1.0 - fy), (y1, fy)] {
        for (j, wx) in [(x0, 1.0 - fx), (x1, fx)] {
            let wgt = wy * wx;
            if wgt != 0.0 {
                terms.push((at(i, j), wgt));
            }
        }
    }
    if terms.is_empty() {
        terms.push((at(y0, x0), 1.0));
    }
    terms
}

impl fmt::Display for TransformSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TransformSpec::HFlip => write!(f, "hflip"),
            TransformSpec::Zoom(z) => write!(f, "zoom:{z}"),
            TransformSpec::Gamma(g) => write!(f, "gamma:{g}"),
            TransformSpec::Shift { dx, dy } => write!(f, "shift:{dx},{dy}"),
            TransformSpec::Contrast(c) => write!(f, "contrast:{c}"),
            TransformSpec::Grayscale => write!(f, "gray"),
            TransformSpec::HBlur(w) => write!(f, "hblur:{w}"),
            TransformSpec::Brightness(b) => write!(f, "brightness:{b}"),
        }
    }
}

impl FromStr for TransformSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n.trim(), Some(a.trim())),
            None => (s, None),
        };
        let num = |a: Option<&str>| -> Result<f64> {
            let a = a.ok_or_else(|| Error::invalid(format!("transform '{s}' needs a parameter")))?;
            a.parse::<f64>()
                .map_err(|_| Error::invalid(format!("bad number '{a}' in transform '{s}'")))
        };
        let spec = match name {
            "hflip" => TransformSpec::HFlip,
            "gray" | "grayscale" => TransformSpec::Grayscale,
            "zoom" => TransformSpec::Zoom(num(arg)?),
            "gamma" => TransformSpec::Gamma(num(arg)?),
            "contrast" => TransformSpec::Contrast(num(arg)?),
            "brightness" => TransformSpec::Brightness(num(arg)?),
            "hblur" => {
                let w = num(arg)?;
                if w.fract() != 0.0 || w < 0.0 {
                    return Err(Error::invalid(format!("blur width must be an integer, got {w}")));
                }
                TransformSpec::HBlur(w as usize)
            }
            "shift" => {
                let a = arg.ok_or_else(|| Error::invalid("shift needs dx,dy"))?;
                let (dx, dy) = a
                    .split_once(',')
                    .ok_or_else(|| Error::invalid(format!("shift needs dx,dy, got '{a}'")))?;
                TransformSpec::Shift {
                    dx: num(Some(dx))?,
                    dy: num(Some(dy))?,
                }
            }
            other => return Err(Error::invalid(format!("unknown transform '{other}'"))),
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl From<TransformSpec> for String {
    fn from(t: TransformSpec) -> String {
        t.to_string()
    }
}

impl TryFrom<String> for TransformSpec {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// Parses a comma-separated transform list such as
/// `hflip,shift:0.5,0.5,gamma:0.6`. A bare number following a one-argument
/// `shift:` token is taken as its second coordinate.
pub fn parse_transform_list(s: &str) -> Result<Vec<TransformSpec>> {
    let mut tokens: Vec<String> = Vec::new();
    for tok in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        if let Some(last) = tokens.last_mut() {
            let pending_shift = last.starts_with("shift:") && !last.contains(',');
            if pending_shift && tok.parse::<f64>().is_ok() {
                last.push(',');
                last.push_str(tok);
                continue;
            }
        }
        tokens.push(tok.to_string());
    }
    if tokens.is_empty() {
        return Err(Error::invalid("empty transform list"));
    }
    tokens.iter().map(|t| t.parse()).collect()
}

/// The five transforms used by the learned natural-error detector.
pub fn default_mlp_transforms() -> Vec<TransformSpec> {
    vec![
        TransformSpec::HFlip,
        TransformSpec::Gamma(DEFAULT_GAMMA),
        TransformSpec::Contrast(1.2),
        TransformSpec::Grayscale,
        TransformSpec::HBlur(3),
    ]
}
