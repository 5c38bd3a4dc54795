//! SSIM and RMSE over whole images or restricted to a masked region.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{check_same_shape, InpaintMask, MsiCube, RGB_BANDS};
use crate::error::{Error, Result};
use crate::filter;

pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const SSIM_SIGMA: f64 = 1.5;
/// Half-width of the 11x11 SSIM window.
pub const SSIM_RADIUS: usize = 5;
pub const DYNAMIC_RANGE: f64 = 1.0;

/// Which bands a report covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelScope {
    All13,
    Rgb3,
}

impl fmt::Display for ChannelScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ChannelScope::All13 => "all13",
            ChannelScope::Rgb3 => "rgb3",
        })
    }
}

impl FromStr for ChannelScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all13" => Ok(ChannelScope::All13),
            "rgb3" => Ok(ChannelScope::Rgb3),
            other => Err(Error::InvalidValue(format!("unknown channel scope {other:?}"))),
        }
    }
}

/// Whole-image and masked-region quality of one output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub sample_id: String,
    pub method: String,
    pub scope: ChannelScope,
    pub ssim_whole: f64,
    pub ssim_mask: f64,
    pub rmse_whole: f64,
    pub rmse_mask: f64,
}

fn check_region(region: Option<&InpaintMask>, h: usize, w: usize) -> Result<()> {
    if let Some(r) = region {
        r.check_dim(h, w)?;
        if r.is_empty() {
            return Err(Error::EmptyRegion);
        }
    }
    Ok(())
}

/// Local SSIM map of one channel pair (Gaussian window, mirrored borders).
pub fn ssim_map(x: ndarray::ArrayView2<'_, f64>, y: ndarray::ArrayView2<'_, f64>) -> Array2<f64> {
    let taps = filter::gaussian_kernel(SSIM_SIGMA, SSIM_RADIUS);
    let c1 = (SSIM_K1 * DYNAMIC_RANGE).powi(2);
    let c2 = (SSIM_K2 * DYNAMIC_RANGE).powi(2);
    let mu_x = filter::separable(x, &taps);
    let mu_y = filter::separable(y, &taps);
    let xx = filter::separable((&x * &x).view(), &taps);
    let yy = filter::separable((&y * &y).view(), &taps);
    let xy = filter::separable((&x * &y).view(), &taps);
    let mut map = Array2::zeros(x.dim());
    ndarray::Zip::from(&mut map)
        .and(&mu_x)
        .and(&mu_y)
        .and(&xx)
        .and(&yy)
        .and(&xy)
        .for_each(|m, &mx, &my, &sxx, &syy, &sxy| {
            let vx = sxx - mx * mx;
            let vy = syy - my * my;
            let cov = sxy - mx * my;
            *m = ((2.0 * (mx * my) + c1) * (2.0 * cov + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
        });
    map
}

/// Mean SSIM: map averaged over all pixels or over `region` pixels, then over channels.
pub fn ssim(
    x: ArrayView3<'_, f64>,
    y: ArrayView3<'_, f64>,
    region: Option<&InpaintMask>,
) -> Result<f64> {
    check_same_shape(x, y)?;
    let (c, h, w) = x.dim();
    check_region(region, h, w)?;
    if c == 0 {
        return Err(Error::Precondition("ssim needs at least one channel".into()));
    }
    let mut total = 0.0;
    for (xc, yc) in x.axis_iter(Axis(0)).zip(y.axis_iter(Axis(0))) {
        let map = ssim_map(xc, yc);
        total += match region {
            None => map.mean().expect("non-empty"),
            Some(r) => {
                let (sum, n) = map
                    .iter()
                    .zip(r.values().iter())
                    .filter(|(_, &m)| m)
                    .fold((0.0, 0usize), |(s, n), (v, _)| (s + v, n + 1));
                sum / n as f64
            }
        };
    }
    Ok(total / c as f64)
}

/// Root of the mean squared difference over the selected pixels of every channel.
pub fn rmse(
    x: ArrayView3<'_, f64>,
    y: ArrayView3<'_, f64>,
    region: Option<&InpaintMask>,
) -> Result<f64> {
    check_same_shape(x, y)?;
    let (c, h, w) = x.dim();
    check_region(region, h, w)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for (xc, yc) in x.axis_iter(Axis(0)).zip(y.axis_iter(Axis(0))) {
        for ((a, b), idx) in xc.iter().zip(yc.iter()).zip(0..h * w) {
            if region.is_none_or(|r| r.is_missing(idx / w, idx % w)) {
                sum += (a - b) * (a - b);
                n += 1;
            }
        }
    }
    if n == 0 || c == 0 {
        return Err(Error::EmptyRegion);
    }
    Ok((sum / n as f64).sqrt())
}

fn scoped(cube: &MsiCube, scope: ChannelScope) -> ndarray::Array3<f64> {
    match scope {
        ChannelScope::All13 => cube.values().to_owned(),
        ChannelScope::Rgb3 => cube.values().select(Axis(0), &RGB_BANDS),
    }
}

/// All four metrics for one output on the given bands.
///
/// With an empty mask the "mask" metrics fall back to their whole-image values.
pub fn evaluate_sample(
    output: &MsiCube,
    truth: &MsiCube,
    mask: &InpaintMask,
    scope: ChannelScope,
    sample_id: &str,
    method: &str,
) -> Result<EvalReport> {
    check_same_shape(output.values(), truth.values())?;
    mask.check_dim(truth.height(), truth.width())?;
    let out = scoped(output, scope);
    let gt = scoped(truth, scope);
    let ssim_whole = ssim(out.view(), gt.view(), None)?;
    let rmse_whole = rmse(out.view(), gt.view(), None)?;
    let (ssim_mask, rmse_mask) = if mask.is_empty() {
        (ssim_whole, rmse_whole)
    } else {
        (
            ssim(out.view(), gt.view(), Some(mask))?,
            rmse(out.view(), gt.view(), Some(mask))?,
        )
    };
    Ok(EvalReport {
        sample_id: sample_id.to_string(),
        method: method.to_string(),
        scope,
        ssim_whole,
        ssim_mask,
        rmse_whole,
        rmse_mask,
    })
}
