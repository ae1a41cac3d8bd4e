//! Channel gate (DSG) and depth-group gate (MSG).
//!
//! Both gates read the same `(B, C, 1, 1)` channel statistic `y`.
//!
//! * DSG projects `y` to one logit per concatenated channel, squashes it with
//!   a sigmoid and multiplies the concatenated feature map by the result.
//! * MSG projects `y` three ways into `G` group logits, a noise scale and a
//!   temperature `T = alpha·sigmoid(·) + beta`, then takes a softmax over the
//!   groups of `(logits + noise) / T`. Each path is scaled by its group weight.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::layers::Conv;
use crate::ops::{
    scale_channels, scale_channels_backward, sigmoid, softmax_backward, softmax_over_channels, softplus,
};
use crate::scalar::Scalar;
use crate::tensor::{prefixed, prefixed_mut, Dims, Parameterized, Tensor4};

pub const DEFAULT_ALPHA: f64 = 1.9;
pub const DEFAULT_BETA: f64 = 0.1;
pub const DEFAULT_GROUPS: usize = 3;

/// Width of the concatenated map: `⌊C/2⌋·(2 + n)`.
pub fn concat_width(channels: usize, bottlenecks: usize) -> usize {
    channels / 2 * (2 + bottlenecks)
}

/// Learnable projection of the channel gate.
#[derive(Clone, Debug, PartialEq)]
pub struct DsgParams<T> {
    /// `(C′, C, 1, 1)` weight and `(C′, 1, 1, 1)` bias.
    pub proj: Conv<T>,
}

impl<T: Scalar> DsgParams<T> {
    /// Checks that `proj` maps `channels` to `⌊C/2⌋·(2 + bottlenecks)`.
    pub fn new(channels: usize, bottlenecks: usize, proj: Conv<T>) -> Result<Self> {
        let expected = concat_width(channels, bottlenecks);
        if proj.kernel() != 1 || proj.c_in() != channels || proj.c_out() != expected {
            return Err(Error::Config(format!(
                "DSG projection {} does not match C={channels}, n={bottlenecks} (expected ({expected}, {channels}, 1, 1))",
                proj.weight.dims()
            )));
        }
        Ok(DsgParams { proj })
    }

    pub fn zeros(channels: usize, bottlenecks: usize) -> Self {
        Self::new(channels, bottlenecks, Conv::zeros(channels, concat_width(channels, bottlenecks), 1))
            .expect("consistent by construction")
    }

    pub fn channels(&self) -> usize {
        self.proj.c_in()
    }

    pub fn out_channels(&self) -> usize {
        self.proj.c_out()
    }
}

impl<T: Scalar> Parameterized<T> for DsgParams<T> {
    fn named(&self) -> Vec<(String, &Tensor4<T>)> {
        self.proj.named()
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor4<T>)> {
        self.proj.named_mut()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DsgOutput<T> {
    pub x_out: Tensor4<T>,
    /// Gate values, `(B, C′, 1, 1)`, all in `(0, 1)`.
    pub w: Tensor4<T>,
}

pub fn dsg_forward<T: Scalar>(y: &Tensor4<T>, x_cat: &Tensor4<T>, p: &DsgParams<T>) -> Result<DsgOutput<T>> {
    if x_cat.dims().c != p.out_channels() || x_cat.dims().b != y.dims().b {
        return Err(Error::shape("dsg_forward", x_cat.dims(), y.dims().with_channels(p.out_channels())));
    }
    let z = p.proj.forward(y)?;
    let w = z.map(sigmoid);
    let x_out = scale_channels(x_cat, &w)?;
    Ok(DsgOutput { x_out, w })
}

/// Gradients of the channel gate: `(grad_y, grad_x_cat, grad_params)`.
pub fn dsg_backward<T: Scalar>(
    y: &Tensor4<T>,
    x_cat: &Tensor4<T>,
    p: &DsgParams<T>,
    out: &DsgOutput<T>,
    grad_x_out: &Tensor4<T>,
) -> Result<(Tensor4<T>, Tensor4<T>, DsgParams<T>)> {
    let (g_cat, g_w) = scale_channels_backward(x_cat, &out.w, grad_x_out)?;
    let g_z = g_w.zip_map(&out.w, "dsg_backward", |g, w| g * w * (T::one() - w))?;
    let (g_y, g_proj) = p.proj.backward(y, &g_z)?;
    Ok((g_y, g_cat, DsgParams { proj: g_proj }))
}

/// What is added to the group logits before temperature scaling.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LogitOffset {
    /// `softplus(z_scale) ⊙ ε`.
    #[default]
    Noise,
    /// The raw scale logits `z_scale`, ignoring the noise pathway.
    RawScale,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MsgParams<T> {
    pub gate: Conv<T>,
    pub scale: Conv<T>,
    pub temp: Conv<T>,
    pub alpha: T,
    pub beta: T,
    pub offset: LogitOffset,
}

impl<T: Scalar> MsgParams<T> {
    pub fn new(gate: Conv<T>, scale: Conv<T>, temp: Conv<T>, alpha: T, beta: T) -> Result<Self> {
        if !(alpha > T::zero()) || !(beta > T::zero()) {
            return Err(Error::Config(format!("alpha={alpha} and beta={beta} must both be positive")));
        }
        let (c, g) = (gate.c_in(), gate.c_out());
        for (name, conv) in [("gate", &gate), ("scale", &scale), ("temp", &temp)] {
            if conv.kernel() != 1 || conv.c_in() != c || conv.c_out() != g {
                return Err(Error::Config(format!(
                    "MSG {name} projection {} does not match ({g}, {c}, 1, 1)",
                    conv.weight.dims()
                )));
            }
        }
        if g < 2 {
            return Err(Error::Config(format!("MSG needs at least 2 groups, got {g}")));
        }
        Ok(MsgParams { gate, scale, temp, alpha, beta, offset: LogitOffset::Noise })
    }

    pub fn zeros(channels: usize, groups: usize, alpha: T, beta: T) -> Result<Self> {
        let z = || Conv::zeros(channels, groups, 1);
        Self::new(z(), z(), z(), alpha, beta)
    }

    pub fn groups(&self) -> usize {
        self.gate.c_out()
    }

    pub fn channels(&self) -> usize {
        self.gate.c_in()
    }

    pub fn with_offset(mut self, offset: LogitOffset) -> Self {
        self.offset = offset;
        self
    }

    /// Same shape and constants, zero tensors; used to hold gradients.
    pub fn zeros_like(&self) -> Self {
        MsgParams {
            gate: self.gate.zeros_like(),
            scale: self.scale.zeros_like(),
            temp: self.temp.zeros_like(),
            ..*self
        }
    }
}

impl<T: Scalar> Parameterized<T> for MsgParams<T> {
    fn named(&self) -> Vec<(String, &Tensor4<T>)> {
        prefixed("gate", self.gate.named())
            .chain(prefixed("scale", self.scale.named()))
            .chain(prefixed("temp", self.temp.named()))
            .collect()
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor4<T>)> {
        prefixed_mut("gate", self.gate.named_mut())
            .chain(prefixed_mut("scale", self.scale.named_mut()))
            .chain(prefixed_mut("temp", self.temp.named_mut()))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Seeded source of the standard-normal draws used by the MSG noise pathway.
///
/// In eval mode every draw is zero and the generator is not advanced. One
/// source per training worker; it is not meant to be shared between threads.
#[derive(Clone, Debug)]
pub struct NoiseSource {
    rng: ChaCha8Rng,
    mode: Mode,
}

impl NoiseSource {
    pub fn new(seed: u64, mode: Mode) -> Self {
        NoiseSource { rng: ChaCha8Rng::seed_from_u64(seed), mode }
    }

    pub fn eval() -> Self {
        Self::new(0, Mode::Eval)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn draw<T: Scalar>(&mut self, dims: Dims) -> Tensor4<T> {
        match self.mode {
            Mode::Eval => Tensor4::zeros(dims),
            Mode::Train => Tensor4::from_fn(dims, |_, _, _, _| {
                let v: f64 = StandardNormal.sample(&mut self.rng);
                T::c(v)
            }),
        }
    }
}

/// Ordered partition of path indices into depth groups.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupMap {
    groups: Vec<Vec<usize>>,
    of_path: Vec<usize>,
}

impl GroupMap {
    /// Validates that `groups` covers `0..paths` exactly once.
    pub fn new(groups: Vec<Vec<usize>>, paths: usize) -> Result<Self> {
        let mut of_path = vec![usize::MAX; paths];
        for (g, members) in groups.iter().enumerate() {
            if members.is_empty() {
                return Err(Error::Config(format!("group {g} is empty")));
            }
            for &p in members {
                match of_path.get_mut(p) {
                    None => return Err(Error::Config(format!("group {g} names path {p} of {paths}"))),
                    Some(slot) if *slot != usize::MAX => {
                        return Err(Error::Config(format!("path {p} assigned to groups {} and {g}", *slot)))
                    }
                    Some(slot) => *slot = g,
                }
            }
        }
        if let Some(p) = of_path.iter().position(|&g| g == usize::MAX) {
            return Err(Error::Config(format!("path {p} belongs to no group")));
        }
        Ok(GroupMap { groups, of_path })
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn paths(&self) -> usize {
        self.of_path.len()
    }

    pub fn group_of(&self, path: usize) -> usize {
        self.of_path[path]
    }
}

/// Splits the `n + 2` depth-ordered paths into `groups` contiguous runs whose
/// sizes differ by at most one, larger runs first.
pub fn group_assign(bottlenecks: usize, groups: usize) -> Result<GroupMap> {
    let paths = bottlenecks + 2;
    if bottlenecks == 0 {
        return Err(Error::Config("at least one bottleneck is required".into()));
    }
    if groups < 2 || groups > paths {
        return Err(Error::Config(format!("{groups} groups cannot partition {paths} paths")));
    }
    let (base, extra) = (paths / groups, paths % groups);
    let mut out = Vec::with_capacity(groups);
    let mut next = 0;
    for g in 0..groups {
        let size = base + usize::from(g < extra);
        out.push((next..next + size).collect());
        next += size;
    }
    GroupMap::new(out, paths)
}

/// Intermediate values of one MSG evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct MsgOutput<T> {
    pub paths: Vec<Tensor4<T>>,
    /// Group weights `(B, G, 1, 1)`; each batch row lies on the simplex.
    pub w_msg: Tensor4<T>,
    pub z_msg: Tensor4<T>,
    pub z_scale: Tensor4<T>,
    pub eps: Tensor4<T>,
    /// Pre-sigmoid temperature logits.
    pub z_temp: Tensor4<T>,
    pub temp: Tensor4<T>,
    /// Numerator of the softmax argument, before division by `temp`.
    pub combined: Tensor4<T>,
}

fn check_paths<T: Scalar>(y: &Tensor4<T>, paths: &[Tensor4<T>], groups: &GroupMap, p: &MsgParams<T>) -> Result<()> {
    if groups.len() != p.groups() {
        return Err(Error::Config(format!(
            "group map has {} groups, MSG parameters {}",
            groups.len(),
            p.groups()
        )));
    }
    if groups.paths() != paths.len() {
        return Err(Error::Config(format!(
            "group map covers {} paths, {} supplied",
            groups.paths(),
            paths.len()
        )));
    }
    if let Some(first) = paths.first() {
        for t in paths {
            if t.dims() != first.dims() || t.dims().b != y.dims().b {
                return Err(Error::shape("msg_forward", first.dims(), t.dims()));
            }
        }
    }
    Ok(())
}

pub fn msg_forward<T: Scalar>(
    y: &Tensor4<T>,
    paths: &[Tensor4<T>],
    p: &MsgParams<T>,
    groups: &GroupMap,
    noise: &mut NoiseSource,
) -> Result<MsgOutput<T>> {
    check_paths(y, paths, groups, p)?;
    let z_msg = p.gate.forward(y)?;
    let z_scale = p.scale.forward(y)?;
    let eps = noise.draw::<T>(z_msg.dims());
    let z_temp = p.temp.forward(y)?;
    let temp = z_temp.map(|v| p.alpha * sigmoid(v) + p.beta);
    let combined = match p.offset {
        LogitOffset::Noise => {
            let z_noise = z_scale.map(softplus).mul(&eps)?;
            z_msg.add(&z_noise)?
        }
        LogitOffset::RawScale => z_msg.add(&z_scale)?,
    };
    let w_msg = softmax_over_channels(&combined, &temp)?;
    let scaled = paths
        .iter()
        .enumerate()
        .map(|(i, path)| {
            let g = groups.group_of(i);
            let d = path.dims();
            let gate = Tensor4::from_fn(d.pooled(), |b, _, _, _| w_msg.get(b, g, 0, 0));
            scale_channels(path, &gate)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MsgOutput { paths: scaled, w_msg, z_msg, z_scale, eps, z_temp, temp, combined })
}

/// Gradients of the group gate: `(grad_y, grad_paths, grad_params)`.
pub fn msg_backward<T: Scalar>(
    y: &Tensor4<T>,
    paths: &[Tensor4<T>],
    p: &MsgParams<T>,
    groups: &GroupMap,
    out: &MsgOutput<T>,
    grad_paths_out: &[Tensor4<T>],
) -> Result<(Tensor4<T>, Vec<Tensor4<T>>, MsgParams<T>)> {
    check_paths(y, paths, groups, p)?;
    if grad_paths_out.len() != paths.len() {
        return Err(Error::Config("gradient count does not match path count".into()));
    }
    let wd = out.w_msg.dims();
    let mut g_w = Tensor4::zeros(wd);
    let mut g_paths = Vec::with_capacity(paths.len());
    for (i, (path, g)) in paths.iter().zip(grad_paths_out).enumerate() {
        let grp = groups.group_of(i);
        let d = path.dims();
        let gate = Tensor4::from_fn(d.pooled(), |b, _, _, _| out.w_msg.get(b, grp, 0, 0));
        let (gx, gg) = scale_channels_backward(path, &gate, g)?;
        for b in 0..d.b {
            let mut acc = T::zero();
            for c in 0..d.c {
                acc += gg.get(b, c, 0, 0);
            }
            let prev = g_w.get(b, grp, 0, 0);
            g_w.set(b, grp, 0, 0, prev + acc);
        }
        g_paths.push(gx);
    }
    let (g_combined, g_temp) = softmax_backward(&out.combined, &out.temp, &out.w_msg, &g_w)?;
    let g_scale = match p.offset {
        LogitOffset::Noise => {
            let mut g = g_combined.mul(&out.eps)?;
            for (gv, &z) in g.data_mut().iter_mut().zip(out.z_scale.data()) {
                *gv *= sigmoid(z);
            }
            g
        }
        LogitOffset::RawScale => g_combined.clone(),
    };
    let g_zt = g_temp.zip_map(&out.z_temp, "msg_backward", |g, z| {
        let s = sigmoid(z);
        g * p.alpha * s * (T::one() - s)
    })?;
    let (mut g_y, g_gate) = p.gate.backward(y, &g_combined)?;
    let (gy_scale, g_scale_p) = p.scale.backward(y, &g_scale)?;
    let (gy_temp, g_temp_p) = p.temp.backward(y, &g_zt)?;
    g_y.add_assign(&gy_scale)?;
    g_y.add_assign(&gy_temp)?;
    let grads = MsgParams { gate: g_gate, scale: g_scale_p, temp: g_temp_p, ..*p };
    Ok((g_y, g_paths, grads))
}

/// Parameters added by each gate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AddedParams {
    pub dsg: usize,
    pub msg: usize,
}

/// DSG adds a `C → C′` projection with bias; MSG three `C → G` projections with bias.
pub fn added_param_count(channels: usize, bottlenecks: usize, groups: usize) -> AddedParams {
    let c_prime = concat_width(channels, bottlenecks);
    AddedParams {
        dsg: c_prime * channels + c_prime,
        msg: 3 * (groups * channels + groups),
    }
}
