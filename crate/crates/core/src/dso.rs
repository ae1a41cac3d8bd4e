//! Dual-statistic synergy operator.
//!
//! Each channel is summarized by its spatial mean `mu` and its peak-to-mean
//! difference `d = max − mu`. The operator combines them as
//! `phi = (d + 1)(mu + 1) − 1 = mu·d + mu + d`, which is increasing in both
//! arguments for `mu > −1, d > −1` and has a unit mixed second derivative.
//!
//! The `(mu, d)` plane is split by the fixed line `d = mu` into a
//! sparse-salient half (`d > mu`) and a uniform-broad half (`d < mu`). A
//! relative band around that line, split by a `phi` threshold, separates
//! strong mixed responses from weak background ones.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{reduce_spatial, reduce_spatial_backward, Reduce};
use crate::scalar::Scalar;
use crate::tensor::Tensor4;

/// `mu·d + mu + d`.
///
/// Evaluated in expanded form: `phi(mu, 0) == mu` and `phi(0, d) == d` hold
/// exactly, which the `+ 1 ... − 1` of the factored form loses to rounding.
#[inline]
pub fn dso_apply<T: Scalar>(mu: T, d: T) -> T {
    mu * d + mu + d
}

/// Factored form `(d + 1)(mu + 1) − 1`; algebraically identical to [`dso_apply`].
#[inline]
pub fn dso_apply_factored<T: Scalar>(mu: T, d: T) -> T {
    (d + T::one()) * (mu + T::one()) - T::one()
}

/// Partial derivatives `(∂phi/∂mu, ∂phi/∂d) = (d + 1, mu + 1)`.
#[inline]
pub fn dso_grad<T: Scalar>(mu: T, d: T) -> (T, T) {
    (d + T::one(), mu + T::one())
}

/// Per-(batch, channel) statistics, each of shape `(B, C, 1, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats<T> {
    pub mu: Tensor4<T>,
    pub m: Tensor4<T>,
    pub d: Tensor4<T>,
    pub phi: Tensor4<T>,
}

pub fn channel_stats<T: Scalar>(x: &Tensor4<T>) -> ChannelStats<T> {
    let mu = reduce_spatial(Reduce::Mean, x);
    let m = reduce_spatial(Reduce::Max, x);
    let d = m.sub(&mu).expect("same pooled shape");
    let phi = mu.zip_map(&d, "dso", dso_apply).expect("same pooled shape");
    ChannelStats { mu, m, d, phi }
}

impl<T: Scalar> ChannelStats<T> {
    pub fn rows(&self) -> impl Iterator<Item = StatRow<T>> + '_ {
        let dims = self.mu.dims();
        (0..dims.b).flat_map(move |b| {
            (0..dims.c).map(move |c| StatRow {
                batch: b,
                channel: c,
                mu: self.mu.get(b, c, 0, 0),
                m: self.m.get(b, c, 0, 0),
                d: self.d.get(b, c, 0, 0),
                phi: self.phi.get(b, c, 0, 0),
            })
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StatRow<T> {
    pub batch: usize,
    pub channel: usize,
    pub mu: T,
    pub m: T,
    pub d: T,
    pub phi: T,
}

/// Which per-channel statistic drives the gates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateStatistic {
    Mean,
    Max,
    #[default]
    Dso,
}

impl GateStatistic {
    pub fn name(self) -> &'static str {
        match self {
            GateStatistic::Mean => "mean",
            GateStatistic::Max => "max",
            GateStatistic::Dso => "dso",
        }
    }

    /// The `(B, C, 1, 1)` gate input for feature map `x`.
    pub fn forward<T: Scalar>(self, x: &Tensor4<T>) -> Tensor4<T> {
        match self {
            GateStatistic::Mean => reduce_spatial(Reduce::Mean, x),
            GateStatistic::Max => reduce_spatial(Reduce::Max, x),
            GateStatistic::Dso => channel_stats(x).phi,
        }
    }

    /// Gradient with respect to `x` given the gradient of the gate input.
    pub fn backward<T: Scalar>(self, x: &Tensor4<T>, grad_y: &Tensor4<T>) -> Result<Tensor4<T>> {
        match self {
            GateStatistic::Mean => reduce_spatial_backward(Reduce::Mean, x, grad_y),
            GateStatistic::Max => reduce_spatial_backward(Reduce::Max, x, grad_y),
            GateStatistic::Dso => {
                let mu = reduce_spatial(Reduce::Mean, x);
                let m = reduce_spatial(Reduce::Max, x);
                let d = m.sub(&mu)?;
                // phi depends on m only through d, and on mu directly and through d.
                let mut g_mu = grad_y.clone();
                let mut g_m = grad_y.clone();
                for i in 0..grad_y.len() {
                    let (dmu, dd) = dso_grad(mu.data()[i], d.data()[i]);
                    let g = grad_y.data()[i];
                    g_m.data_mut()[i] = g * dd;
                    g_mu.data_mut()[i] = g * dmu - g * dd;
                }
                let mut gx = reduce_spatial_backward(Reduce::Mean, x, &g_mu)?;
                gx.add_assign(&reduce_spatial_backward(Reduce::Max, x, &g_m)?)?;
                Ok(gx)
            }
        }
    }
}

impl fmt::Display for GateStatistic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GateStatistic {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(GateStatistic::Mean),
            "max" => Ok(GateStatistic::Max),
            "dso" => Ok(GateStatistic::Dso),
            other => Err(Error::Config(format!("unknown operator '{other}' (mean|max|dso)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Region {
    Small,
    Large,
    Mixed,
    Background,
}

impl Region {
    pub const ALL: [Region; 4] = [Region::Background, Region::Small, Region::Large, Region::Mixed];

    pub fn name(self) -> &'static str {
        match self {
            Region::Small => "small",
            Region::Large => "large",
            Region::Mixed => "mixed",
            Region::Background => "background",
        }
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Tunable stand-ins for the soft region boundaries.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegionConfig {
    /// Relative half-width of the band around `d = mu`, in `(0, 1)`.
    pub band_ratio: f64,
    /// `phi` level separating mixed (above) from background (at or below).
    pub phi_threshold: f64,
}

impl Default for RegionConfig {
    fn default() -> Self {
        RegionConfig { band_ratio: 0.2, phi_threshold: 1.0 }
    }
}

impl RegionConfig {
    pub fn new(band_ratio: f64, phi_threshold: f64) -> Result<Self> {
        if !(band_ratio > 0.0 && band_ratio < 1.0) {
            return Err(Error::Config(format!("band ratio {band_ratio} outside (0, 1)")));
        }
        if !phi_threshold.is_finite() {
            return Err(Error::Config(format!("phi threshold {phi_threshold} is not finite")));
        }
        Ok(RegionConfig { band_ratio, phi_threshold })
    }

    pub fn classify<T: Scalar>(&self, mu: T, d: T, phi: T) -> Region {
        let (mu, d, phi) = (mu.to_f64_lossy(), d.to_f64_lossy(), phi.to_f64_lossy());
        if (d - mu).abs() <= self.band_ratio * (d + mu.abs() + 1e-12) {
            if phi > self.phi_threshold {
                Region::Mixed
            } else {
                Region::Background
            }
        } else if d > mu {
            Region::Small
        } else {
            Region::Large
        }
    }
}

/// Region label for every (batch, channel), row-major.
pub fn classify_regions<T: Scalar>(stats: &ChannelStats<T>, cfg: &RegionConfig) -> Vec<Region> {
    stats.rows().map(|r| cfg.classify(r.mu, r.d, r.phi)).collect()
}

/// Inclusive uniform sampling range `min..=max` with `steps` points.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridRange {
    pub min: f64,
    pub max: f64,
    pub steps: usize,
}

impl GridRange {
    pub fn new(min: f64, max: f64, steps: usize) -> Result<Self> {
        if !(min.is_finite() && max.is_finite()) {
            return Err(Error::Domain(format!("range {min}:{max} is not finite")));
        }
        if min >= max {
            return Err(Error::Domain(format!("degenerate or reversed range {min}:{max}")));
        }
        if steps < 2 {
            return Err(Error::Domain(format!("range needs at least 2 steps, got {steps}")));
        }
        Ok(GridRange { min, max, steps })
    }

    pub fn value(&self, i: usize) -> f64 {
        if i + 1 == self.steps {
            self.max
        } else {
            self.min + (self.max - self.min) * i as f64 / (self.steps - 1) as f64
        }
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.steps).map(|i| self.value(i))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurfacePoint {
    pub mu: f64,
    pub d: f64,
    pub phi: f64,
    pub label: Region,
}

/// Samples the operator over a `mu × d` grid (mu outer, d inner).
pub fn surface_grid(mu: GridRange, d: GridRange, cfg: &RegionConfig) -> Result<Vec<SurfacePoint>> {
    let mu = GridRange::new(mu.min, mu.max, mu.steps)?;
    let d = GridRange::new(d.min, d.max, d.steps)?;
    let mut out = Vec::with_capacity(mu.steps * d.steps);
    for m in mu.values() {
        for dv in d.values() {
            let phi = dso_apply(m, dv);
            out.push(SurfacePoint { mu: m, d: dv, phi, label: cfg.classify(m, dv, phi) });
        }
    }
    Ok(out)
}

/// Writes `mu,d,phi,label` CSV.
pub fn write_surface_csv(points: &[SurfacePoint], mut out: impl Write) -> Result<()> {
    writeln!(out, "mu,d,phi,label")?;
    for p in points {
        writeln!(out, "{},{},{},{}", p.mu, p.d, p.phi, p.label)?;
    }
    Ok(())
}
