//! C2F block with optional DSG and MSG gating.
//!
//! ```text
//! x ─ conv1(1×1) ─ act ─ t ─┬─ split ─ p0, p1 ─ B1 ─ p2 ─ … ─ Bn ─ p(n+1)
//!                           │                 │
//!                           └─ stat(t) = y ───┼─ MSG: scale each path by its group weight
//!                                             │
//!                            concat(p0..p(n+1)) = x_cat ─ DSG(y) ─ conv2(1×1) ─ act
//! ```
//!
//! With both gates disabled the block is the plain C2F layout.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dso::GateStatistic;
use crate::error::{Error, Result};
use crate::gating::{
    added_param_count, dsg_backward, dsg_forward, group_assign, msg_backward, msg_forward, DsgOutput,
    DsgParams, GroupMap, LogitOffset, MsgOutput, MsgParams, NoiseSource, DEFAULT_ALPHA, DEFAULT_BETA,
    DEFAULT_GROUPS,
};
use crate::layers::Conv;
use crate::ops::{activation, activation_backward, concat_channels, split_channels, Activation};
use crate::scalar::Scalar;
use crate::tensor::{prefixed, prefixed_mut, Parameterized, Tensor4};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct C2fDsConfig {
    pub c_in: usize,
    pub c_out: usize,
    /// Bottleneck count, at least one.
    pub n: usize,
    /// Hidden width is `⌊c_out · expansion⌋` per path.
    pub expansion: f64,
    pub use_dsg: bool,
    pub use_msg: bool,
    pub groups: usize,
    pub shortcut: bool,
    pub activation: Activation,
    pub alpha: f64,
    pub beta: f64,
    /// Statistic feeding both gates.
    pub statistic: GateStatistic,
    pub offset: LogitOffset,
}

impl Default for C2fDsConfig {
    fn default() -> Self {
        C2fDsConfig {
            c_in: 8,
            c_out: 8,
            n: 2,
            expansion: 0.5,
            use_dsg: true,
            use_msg: true,
            groups: DEFAULT_GROUPS,
            shortcut: true,
            activation: Activation::Silu,
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            statistic: GateStatistic::Dso,
            offset: LogitOffset::Noise,
        }
    }
}

impl C2fDsConfig {
    pub fn new(c_in: usize, c_out: usize, n: usize) -> Self {
        C2fDsConfig { c_in, c_out, n, ..Default::default() }
    }

    pub fn baseline(mut self) -> Self {
        self.use_dsg = false;
        self.use_msg = false;
        self
    }

    /// Per-path width `h`.
    pub fn hidden(&self) -> usize {
        (self.c_out as f64 * self.expansion).floor() as usize
    }

    /// Width `C = 2h` of the post-conv1 map.
    pub fn channels(&self) -> usize {
        2 * self.hidden()
    }

    pub fn paths(&self) -> usize {
        self.n + 2
    }

    /// Width `C′ = h·(2 + n)` of the concatenated map.
    pub fn concat_width(&self) -> usize {
        self.hidden() * self.paths()
    }

    pub fn validate(&self) -> Result<()> {
        if self.c_in == 0 || self.c_out == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.n == 0 {
            return Err(Error::Config("at least one bottleneck is required".into()));
        }
        if !(self.expansion > 0.0) || self.hidden() == 0 {
            return Err(Error::Config(format!(
                "expansion {} gives zero hidden width for c_out={}",
                self.expansion, self.c_out
            )));
        }
        if self.use_msg {
            if self.groups < 2 || self.groups > self.paths() {
                return Err(Error::Config(format!(
                    "{} groups outside 2..={} for n={}",
                    self.groups,
                    self.paths(),
                    self.n
                )));
            }
            if !(self.alpha > 0.0 && self.beta > 0.0) {
                return Err(Error::Config(format!("alpha={} beta={} must be positive", self.alpha, self.beta)));
            }
        }
        Ok(())
    }

    pub fn group_map(&self) -> Result<GroupMap> {
        group_assign(self.n, self.groups)
    }
}

/// Two chained 3×3 convolutions `h → h`.
#[derive(Clone, Debug, PartialEq)]
pub struct BottleneckParams<T> {
    pub conv_a: Conv<T>,
    pub conv_b: Conv<T>,
}

impl<T: Scalar> BottleneckParams<T> {
    pub fn zeros(h: usize) -> Self {
        BottleneckParams { conv_a: Conv::zeros(h, h, 3), conv_b: Conv::zeros(h, h, 3) }
    }

    pub fn uniform<R: Rng + ?Sized>(h: usize, rng: &mut R) -> Self {
        BottleneckParams { conv_a: Conv::uniform(h, h, 3, rng), conv_b: Conv::uniform(h, h, 3, rng) }
    }
}

impl<T: Scalar> Parameterized<T> for BottleneckParams<T> {
    fn named(&self) -> Vec<(String, &Tensor4<T>)> {
        prefixed("conv_a", self.conv_a.named()).chain(prefixed("conv_b", self.conv_b.named())).collect()
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor4<T>)> {
        prefixed_mut("conv_a", self.conv_a.named_mut())
            .chain(prefixed_mut("conv_b", self.conv_b.named_mut()))
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct BottleneckTrace<T> {
    pub pre_a: Tensor4<T>,
    pub act_a: Tensor4<T>,
    pub pre_b: Tensor4<T>,
    pub out: Tensor4<T>,
}

pub fn bottleneck_forward_traced<T: Scalar>(
    x: &Tensor4<T>,
    p: &BottleneckParams<T>,
    shortcut: bool,
    act: Activation,
) -> Result<BottleneckTrace<T>> {
    let pre_a = p.conv_a.forward(x)?;
    let act_a = activation(act, &pre_a)?;
    let pre_b = p.conv_b.forward(&act_a)?;
    let f = activation(act, &pre_b)?;
    let out = if shortcut { x.add(&f)? } else { f };
    Ok(BottleneckTrace { pre_a, act_a, pre_b, out })
}

/// `x + act(conv_b(act(conv_a(x))))`, or without the residual term.
pub fn bottleneck_forward<T: Scalar>(
    x: &Tensor4<T>,
    p: &BottleneckParams<T>,
    shortcut: bool,
    act: Activation,
) -> Result<Tensor4<T>> {
    Ok(bottleneck_forward_traced(x, p, shortcut, act)?.out)
}

pub fn bottleneck_backward<T: Scalar>(
    x: &Tensor4<T>,
    p: &BottleneckParams<T>,
    shortcut: bool,
    act: Activation,
    trace: &BottleneckTrace<T>,
    grad_out: &Tensor4<T>,
) -> Result<(Tensor4<T>, BottleneckParams<T>)> {
    let g_pre_b = activation_backward(act, &trace.pre_b, grad_out)?;
    let (g_act_a, g_conv_b) = p.conv_b.backward(&trace.act_a, &g_pre_b)?;
    let g_pre_a = activation_backward(act, &trace.pre_a, &g_act_a)?;
    let (mut gx, g_conv_a) = p.conv_a.backward(x, &g_pre_a)?;
    if shortcut {
        gx.add_assign(grad_out)?;
    }
    Ok((gx, BottleneckParams { conv_a: g_conv_a, conv_b: g_conv_b }))
}

/// All learnable tensors of one block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<T> {
    pub conv1: Conv<T>,
    pub bottlenecks: Vec<BottleneckParams<T>>,
    pub dsg: Option<DsgParams<T>>,
    pub msg: Option<MsgParams<T>>,
    pub conv2: Conv<T>,
}

impl<T: Scalar> BlockParams<T> {
    pub fn zeros(cfg: &C2fDsConfig) -> Result<Self> {
        cfg.validate()?;
        let (h, c) = (cfg.hidden(), cfg.channels());
        Ok(BlockParams {
            conv1: Conv::zeros(cfg.c_in, c, 1),
            bottlenecks: (0..cfg.n).map(|_| BottleneckParams::zeros(h)).collect(),
            dsg: cfg.use_dsg.then(|| DsgParams::zeros(c, cfg.n)),
            msg: if cfg.use_msg {
                Some(MsgParams::zeros(c, cfg.groups, T::c(cfg.alpha), T::c(cfg.beta))?.with_offset(cfg.offset))
            } else {
                None
            },
            conv2: Conv::zeros(cfg.concat_width(), cfg.c_out, 1),
        })
    }

    /// Uniform `±1/√fan_in` initialization for every tensor.
    pub fn init<R: Rng + ?Sized>(cfg: &C2fDsConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (h, c) = (cfg.hidden(), cfg.channels());
        let conv1 = Conv::uniform(cfg.c_in, c, 1, rng);
        let bottlenecks = (0..cfg.n).map(|_| BottleneckParams::uniform(h, rng)).collect();
        let dsg = if cfg.use_dsg {
            Some(DsgParams::new(c, cfg.n, Conv::uniform(c, cfg.concat_width(), 1, rng))?)
        } else {
            None
        };
        let msg = if cfg.use_msg {
            let g = cfg.groups;
            let gate = Conv::uniform(c, g, 1, rng);
            let scale = Conv::uniform(c, g, 1, rng);
            let temp = Conv::uniform(c, g, 1, rng);
            Some(MsgParams::new(gate, scale, temp, T::c(cfg.alpha), T::c(cfg.beta))?.with_offset(cfg.offset))
        } else {
            None
        };
        let conv2 = Conv::uniform(cfg.concat_width(), cfg.c_out, 1, rng);
        Ok(BlockParams { conv1, bottlenecks, dsg, msg, conv2 })
    }

    /// Checks every tensor against the shapes `cfg` implies.
    pub fn check(&self, cfg: &C2fDsConfig) -> Result<()> {
        let reference = BlockParams::<T>::zeros(cfg)?;
        let mine = self.named();
        let want = reference.named();
        if mine.len() != want.len() {
            return Err(Error::Config(format!(
                "block has {} parameter tensors, config implies {}",
                mine.len(),
                want.len()
            )));
        }
        for ((n1, t1), (n2, t2)) in mine.iter().zip(&want) {
            if n1 != n2 || t1.dims() != t2.dims() {
                return Err(Error::Config(format!("parameter {n1} {} vs expected {n2} {}", t1.dims(), t2.dims())));
            }
        }
        if let (Some(msg), true) = (&self.msg, cfg.use_msg) {
            if msg.alpha != T::c(cfg.alpha) || msg.beta != T::c(cfg.beta) || msg.offset != cfg.offset {
                return Err(Error::Config("MSG constants differ from the configuration".into()));
            }
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        BlockParams {
            conv1: self.conv1.zeros_like(),
            bottlenecks: self
                .bottlenecks
                .iter()
                .map(|b| BottleneckParams { conv_a: b.conv_a.zeros_like(), conv_b: b.conv_b.zeros_like() })
                .collect(),
            dsg: self.dsg.as_ref().map(|d| DsgParams { proj: d.proj.zeros_like() }),
            msg: self.msg.as_ref().map(MsgParams::zeros_like),
            conv2: self.conv2.zeros_like(),
        }
    }
}

impl<T: Scalar> Parameterized<T> for BlockParams<T> {
    fn named(&self) -> Vec<(String, &Tensor4<T>)> {
        let mut out: Vec<_> = prefixed("conv1", self.conv1.named()).collect();
        for (i, b) in self.bottlenecks.iter().enumerate() {
            out.extend(prefixed(&format!("bottleneck{i}"), b.named()));
        }
        if let Some(d) = &self.dsg {
            out.extend(prefixed("dsg", d.named()));
        }
        if let Some(m) = &self.msg {
            out.extend(prefixed("msg", m.named()));
        }
        out.extend(prefixed("conv2", self.conv2.named()));
        out
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor4<T>)> {
        let mut out: Vec<_> = prefixed_mut("conv1", self.conv1.named_mut()).collect();
        for (i, b) in self.bottlenecks.iter_mut().enumerate() {
            out.extend(prefixed_mut(&format!("bottleneck{i}"), b.named_mut()));
        }
        if let Some(d) = &mut self.dsg {
            out.extend(prefixed_mut("dsg", d.named_mut()));
        }
        if let Some(m) = &mut self.msg {
            out.extend(prefixed_mut("msg", m.named_mut()));
        }
        out.extend(prefixed_mut("conv2", self.conv2.named_mut()));
        out
    }
}

/// Every intermediate needed by [`c2f_backward`].
#[derive(Clone, Debug)]
pub struct C2fTrace<T> {
    pub x: Tensor4<T>,
    pub pre1: Tensor4<T>,
    pub t: Tensor4<T>,
    pub y: Option<Tensor4<T>>,
    /// Ungated paths `p0 .. p(n+1)`.
    pub paths: Vec<Tensor4<T>>,
    pub bottlenecks: Vec<BottleneckTrace<T>>,
    pub msg: Option<MsgOutput<T>>,
    pub x_cat: Tensor4<T>,
    pub dsg: Option<DsgOutput<T>>,
    pub pre2: Tensor4<T>,
    pub out: Tensor4<T>,
}

impl<T: Scalar> C2fTrace<T> {
    /// Input of conv2: `x_cat` after the channel gate, if any.
    pub fn gated(&self) -> &Tensor4<T> {
        self.dsg.as_ref().map_or(&self.x_cat, |d| &d.x_out)
    }
}

fn check_gates<T: Scalar>(params: &BlockParams<T>, cfg: &C2fDsConfig) -> Result<()> {
    if params.dsg.is_some() != cfg.use_dsg || params.msg.is_some() != cfg.use_msg {
        return Err(Error::Config("gate parameters do not match the use_dsg/use_msg flags".into()));
    }
    if params.bottlenecks.len() != cfg.n {
        return Err(Error::Config(format!(
            "{} bottleneck parameter sets for n={}",
            params.bottlenecks.len(),
            cfg.n
        )));
    }
    Ok(())
}

pub fn c2f_forward_traced<T: Scalar>(
    x: &Tensor4<T>,
    params: &BlockParams<T>,
    cfg: &C2fDsConfig,
    noise: &mut NoiseSource,
) -> Result<C2fTrace<T>> {
    cfg.validate()?;
    check_gates(params, cfg)?;
    let act = cfg.activation;
    let h = cfg.hidden();
    let pre1 = params.conv1.forward(x)?;
    let t = activation(act, &pre1)?;
    let y = (cfg.use_dsg || cfg.use_msg).then(|| cfg.statistic.forward(&t));

    let mut paths = split_channels(&t, &[h, h])?;
    let mut traces = Vec::with_capacity(cfg.n);
    for bp in &params.bottlenecks {
        let tr = bottleneck_forward_traced(paths.last().expect("two split halves"), bp, cfg.shortcut, act)?;
        paths.push(tr.out.clone());
        traces.push(tr);
    }

    let msg = match (&params.msg, &y) {
        (Some(mp), Some(y)) => Some(msg_forward(y, &paths, mp, &cfg.group_map()?, noise)?),
        _ => None,
    };
    let to_cat: Vec<&Tensor4<T>> = match &msg {
        Some(m) => m.paths.iter().collect(),
        None => paths.iter().collect(),
    };
    let x_cat = concat_channels(&to_cat)?;
    let dsg = match (&params.dsg, &y) {
        (Some(dp), Some(y)) => Some(dsg_forward(y, &x_cat, dp)?),
        _ => None,
    };
    let gated = dsg.as_ref().map_or(&x_cat, |d| &d.x_out);
    let pre2 = params.conv2.forward(gated)?;
    let out = activation(act, &pre2)?;
    Ok(C2fTrace {
        x: x.clone(),
        pre1,
        t,
        y,
        paths,
        bottlenecks: traces,
        msg,
        x_cat,
        dsg,
        pre2,
        out,
    })
}

pub fn c2f_forward<T: Scalar>(
    x: &Tensor4<T>,
    params: &BlockParams<T>,
    cfg: &C2fDsConfig,
    noise: &mut NoiseSource,
) -> Result<Tensor4<T>> {
    Ok(c2f_forward_traced(x, params, cfg, noise)?.out)
}

/// Plain C2F evaluation that ignores any gate parameters.
pub fn baseline_c2f_forward<T: Scalar>(x: &Tensor4<T>, params: &BlockParams<T>, cfg: &C2fDsConfig) -> Result<Tensor4<T>> {
    let act = cfg.activation;
    let h = cfg.hidden();
    let t = activation(act, &params.conv1.forward(x)?)?;
    let mut paths = split_channels(&t, &[h, h])?;
    for bp in &params.bottlenecks {
        let next = bottleneck_forward(&paths[paths.len() - 1], bp, cfg.shortcut, act)?;
        paths.push(next);
    }
    let refs: Vec<&Tensor4<T>> = paths.iter().collect();
    activation(act, &params.conv2.forward(&concat_channels(&refs)?)?)
}

/// Backpropagates `grad_out` through the block. Returns `(grad_x, grad_params)`.
pub fn c2f_backward<T: Scalar>(
    params: &BlockParams<T>,
    cfg: &C2fDsConfig,
    trace: &C2fTrace<T>,
    grad_out: &Tensor4<T>,
) -> Result<(Tensor4<T>, BlockParams<T>)> {
    check_gates(params, cfg)?;
    let act = cfg.activation;
    let h = cfg.hidden();
    let mut grads = params.zeros_like();

    let g_pre2 = activation_backward(act, &trace.pre2, grad_out)?;
    let (g_gated, g_conv2) = params.conv2.backward(trace.gated(), &g_pre2)?;
    grads.conv2 = g_conv2;

    let mut g_y: Option<Tensor4<T>> = None;
    let mut accumulate_y = |g: Tensor4<T>| -> Result<()> {
        match &mut g_y {
            Some(acc) => acc.add_assign(&g),
            None => {
                g_y = Some(g);
                Ok(())
            }
        }
    };

    let g_cat = match (&params.dsg, &trace.dsg, &trace.y) {
        (Some(dp), Some(out), Some(y)) => {
            let (gy, gcat, gp) = dsg_backward(y, &trace.x_cat, dp, out, &g_gated)?;
            accumulate_y(gy)?;
            grads.dsg = Some(gp);
            gcat
        }
        _ => g_gated,
    };

    let sizes = vec![h; cfg.paths()];
    let mut g_paths = split_channels(&g_cat, &sizes)?;
    if let (Some(mp), Some(out), Some(y)) = (&params.msg, &trace.msg, &trace.y) {
        let (gy, gp_in, gp) = msg_backward(y, &trace.paths, mp, &cfg.group_map()?, out, &g_paths)?;
        accumulate_y(gy)?;
        grads.msg = Some(gp);
        g_paths = gp_in;
    }

    // path k+1 = bottleneck k (path k), for k = 1..=n
    for k in (0..cfg.n).rev() {
        let (gx, gp) = bottleneck_backward(
            &trace.paths[k + 1],
            &params.bottlenecks[k],
            cfg.shortcut,
            act,
            &trace.bottlenecks[k],
            &g_paths[k + 2],
        )?;
        g_paths[k + 1].add_assign(&gx)?;
        grads.bottlenecks[k] = gp;
    }

    let mut g_t = concat_channels(&[&g_paths[0], &g_paths[1]])?;
    if let Some(gy) = &g_y {
        g_t.add_assign(&cfg.statistic.backward(&trace.t, gy)?)?;
    }
    let g_pre1 = activation_backward(act, &trace.pre1, &g_t)?;
    let (gx, g_conv1) = params.conv1.backward(&trace.x, &g_pre1)?;
    grads.conv1 = g_conv1;
    Ok((gx, grads))
}

/// Parameter totals by component.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BlockParamCount {
    pub conv1: usize,
    pub bottlenecks: usize,
    pub dsg: usize,
    pub msg: usize,
    pub conv2: usize,
    pub total: usize,
}

pub fn block_param_count(cfg: &C2fDsConfig) -> Result<BlockParamCount> {
    cfg.validate()?;
    let (h, c) = (cfg.hidden(), cfg.channels());
    let added = added_param_count(c, cfg.n, cfg.groups);
    let mut count = BlockParamCount {
        conv1: cfg.c_in * c + c,
        bottlenecks: cfg.n * 2 * (h * h * 9 + h),
        dsg: if cfg.use_dsg { added.dsg } else { 0 },
        msg: if cfg.use_msg { added.msg } else { 0 },
        conv2: cfg.concat_width() * cfg.c_out + cfg.c_out,
        total: 0,
    };
    count.total = count.conv1 + count.bottlenecks + count.dsg + count.msg + count.conv2;
    Ok(count)
}
