//! Finite-difference sweep over every differentiable operation.
//!
//! Each case builds a scalar objective `L = Σ out ⊙ probe` with a random
//! probe, so the analytical gradient is the backward pass seeded with the
//! probe. Inputs are drawn from `[0.1, 2.0]`.
//!
//! Central differences are only a valid reference where the objective is
//! smooth across the stencil. A draw is kept only if the differences at `h`
//! and `h/2` agree to a quarter of the tolerance; otherwise it is redrawn, up
//! to [`MAX_REDRAWS`] times. This screens out argmax ties inside the stencil
//! and sharply saturated softmaxes without ever consulting the analytical
//! gradient. The number of redraws is reported per case.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::c2f::{
    bottleneck_backward, bottleneck_forward_traced, c2f_backward, c2f_forward_traced, BlockParams,
    BottleneckParams, C2fDsConfig,
};
use crate::dso::GateStatistic;
use crate::error::{Error, Result};
use crate::gating::{dsg_backward, dsg_forward, group_assign, msg_backward, msg_forward, DsgParams, LogitOffset, MsgParams, NoiseSource};
use crate::gradcheck::{central_differences, compare, GradReport};
use crate::layers::Conv;
use crate::ops::{
    activation, activation_backward, concat_channels, conv_same, conv_same_backward, reduce_spatial,
    reduce_spatial_backward, scale_channels, scale_channels_backward, softmax_backward, softmax_over_channels,
    split_channels, Activation, Reduce,
};
use crate::tensor::{flatten_params, unflatten_params, Dims, Parameterized, Tensor4};

pub const INPUT_LO: f64 = 0.1;
pub const INPUT_HI: f64 = 2.0;
pub const MAX_REDRAWS: usize = 16;

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub name: String,
    pub report: GradReport<f64>,
    /// Draws discarded because the finite-difference reference was unstable.
    pub redraws: usize,
}

type T64 = Tensor4<f64>;

fn random(dims: Dims, rng: &mut ChaCha8Rng) -> T64 {
    Tensor4::from_fn(dims, |_, _, _, _| rng.random_range(INPUT_LO..=INPUT_HI))
}

fn probe(dims: Dims, rng: &mut ChaCha8Rng) -> T64 {
    Tensor4::from_fn(dims, |_, _, _, _| rng.random_range(-1.0..=1.0))
}

fn flatten(ts: &[T64]) -> Vec<f64> {
    ts.iter().flat_map(|t| t.data().iter().copied()).collect()
}

fn unflatten(like: &[T64], flat: &[f64]) -> Vec<T64> {
    let mut i = 0;
    like.iter()
        .map(|t| {
            let n = t.len();
            let out = Tensor4::new(t.dims(), flat[i..i + n].to_vec()).expect("same dims");
            i += n;
            out
        })
        .collect()
}

/// Reference gradient at `point`, and whether halving the step leaves it
/// unchanged to within `tol / 4`.
fn reference(mut f: impl FnMut(&[f64]) -> Result<f64>, point: &[f64], step: f64, tol: f64) -> Result<(Vec<f64>, bool)> {
    let coarse = central_differences(&mut f, point, step)?;
    let fine = central_differences(&mut f, point, step / 2.0)?;
    let stable = compare(&fine, &coarse, tol / 4.0).pass;
    Ok((coarse, stable))
}

/// Checks `backward` against central differences of `Σ forward(inputs) ⊙ probe`,
/// where `draw` yields `(inputs, probe)`.
#[allow(clippy::too_many_arguments)]
pub fn check_op(
    name: impl Into<String>,
    rng: &mut ChaCha8Rng,
    draw: impl Fn(&mut ChaCha8Rng) -> (Vec<T64>, T64),
    forward: impl Fn(&[T64]) -> Result<T64>,
    backward: impl Fn(&[T64], &T64) -> Result<Vec<T64>>,
    step: f64,
    tolerance: f64,
) -> Result<CaseResult> {
    let mut redraws = 0;
    loop {
        let (inputs, probe) = draw(rng);
        let point = flatten(&inputs);
        let (numerical, stable) =
            reference(|p: &[f64]| forward(&unflatten(&inputs, p))?.dot(&probe), &point, step, tolerance)?;
        if stable || redraws == MAX_REDRAWS {
            let analytical = flatten(&backward(&inputs, &probe)?);
            if analytical.len() != point.len() {
                return Err(Error::Domain(format!(
                    "check_op: {} inputs but {} gradient entries",
                    point.len(),
                    analytical.len()
                )));
            }
            let report = compare(&analytical, &numerical, tolerance);
            return Ok(CaseResult { name: name.into(), report, redraws });
        }
        redraws += 1;
    }
}

fn bias_vec(t: &T64) -> Vec<f64> {
    t.data().to_vec()
}

/// One pass over every primitive with fresh random shapes and values.
pub fn primitive_cases(rng: &mut ChaCha8Rng, step: f64, tol: f64) -> Result<Vec<CaseResult>> {
    let mut out = Vec::new();
    let b = rng.random_range(1..=2);
    let cin = rng.random_range(1..=3);
    let cout = rng.random_range(1..=3);
    let (h, w) = (rng.random_range(2..=4), rng.random_range(2..=4));
    let xd = Dims::new(b, cin, h, w);

    for k in [1usize, 3] {
        let name = if k == 1 { "pointwise_conv" } else { "conv3x3_same" };
        out.push(check_op(
            name,
            rng,
            |r| {
                let inputs = vec![random(xd, r), random(Dims::new(cout, cin, k, k), r), random(Dims::new(cout, 1, 1, 1), r)];
                (inputs, probe(xd.with_channels(cout), r))
            },
            |t| conv_same(&t[0], &t[1], &bias_vec(&t[2])),
            |t, g| {
                let r = conv_same_backward(&t[0], &t[1], g)?;
                Ok(vec![r.x, r.weight, Tensor4::vector(r.bias)?])
            },
            step,
            tol,
        )?);
    }

    for kind in [Activation::Sigmoid, Activation::Softplus, Activation::Silu] {
        out.push(check_op(
            format!("activation/{kind}"),
            rng,
            |r| (vec![random(xd, r)], probe(xd, r)),
            |t| activation(kind, &t[0]),
            |t, g| Ok(vec![activation_backward(kind, &t[0], g)?]),
            step,
            tol,
        )?);
    }

    for (kind, name) in [(Reduce::Mean, "reduce_spatial/mean"), (Reduce::Max, "reduce_spatial/max")] {
        out.push(check_op(
            name,
            rng,
            |r| (vec![random(xd, r)], probe(xd.pooled(), r)),
            |t| Ok(reduce_spatial(kind, &t[0])),
            |t, g| Ok(vec![reduce_spatial_backward(kind, &t[0], g)?]),
            step,
            tol,
        )?);
    }

    let groups = rng.random_range(2..=4);
    let sd = Dims::new(b, groups, 1, 1);
    out.push(check_op(
        "softmax_over_channels",
        rng,
        |r| (vec![random(sd, r), random(sd, r)], probe(sd, r)),
        |t| softmax_over_channels(&t[0], &t[1]),
        |t, g| {
            let w = softmax_over_channels(&t[0], &t[1])?;
            let (gz, gt) = softmax_backward(&t[0], &t[1], &w, g)?;
            Ok(vec![gz, gt])
        },
        step,
        tol,
    )?);

    let other = xd.with_channels(cout);
    out.push(check_op(
        "concat_channels",
        rng,
        |r| (vec![random(xd, r), random(other, r)], probe(xd.with_channels(cin + cout), r)),
        |t| concat_channels(&[&t[0], &t[1]]),
        |_, g| split_channels(g, &[cin, cout]),
        step,
        tol,
    )?);

    out.push(check_op(
        "scale_channels",
        rng,
        |r| (vec![random(xd, r), random(xd.pooled(), r)], probe(xd, r)),
        |t| scale_channels(&t[0], &t[1]),
        |t, g| {
            let (gx, gg) = scale_channels_backward(&t[0], &t[1], g)?;
            Ok(vec![gx, gg])
        },
        step,
        tol,
    )?);

    for stat in [GateStatistic::Mean, GateStatistic::Max, GateStatistic::Dso] {
        out.push(check_op(
            format!("statistic/{stat}"),
            rng,
            |r| (vec![random(xd, r)], probe(xd.pooled(), r)),
            |t| Ok(stat.forward(&t[0])),
            |t, g| Ok(vec![stat.backward(&t[0], g)?]),
            step,
            tol,
        )?);
    }
    Ok(out)
}

/// DSG, eval-mode MSG and bottleneck cases for one random configuration.
pub fn gate_cases(rng: &mut ChaCha8Rng, step: f64, tol: f64) -> Result<Vec<CaseResult>> {
    let mut out = Vec::new();
    let b = rng.random_range(1..=2);
    let half = rng.random_range(1..=2);
    let c = 2 * half;
    let n = rng.random_range(1..=3);
    let (h, w) = (rng.random_range(2..=4), rng.random_range(2..=4));
    let cp = half * (2 + n);
    let yd = Dims::new(b, c, 1, 1);
    let cat = Dims::new(b, cp, h, w);

    let dsg_params = |t: &[T64]| DsgParams::new(c, n, Conv::from_parts(t[2].clone(), t[3].clone())?);
    out.push(check_op(
        "dsg_forward",
        rng,
        |r| {
            let inputs = vec![
                random(yd, r),
                random(cat, r),
                random(Dims::new(cp, c, 1, 1), r).scale(0.25),
                random(Dims::new(cp, 1, 1, 1), r).scale(0.25),
            ];
            (inputs, probe(cat, r))
        },
        |t| Ok(dsg_forward(&t[0], &t[1], &dsg_params(t)?)?.x_out),
        |t, g| {
            let p = dsg_params(t)?;
            let o = dsg_forward(&t[0], &t[1], &p)?;
            let (gy, gx, gp) = dsg_backward(&t[0], &t[1], &p, &o, g)?;
            Ok(vec![gy, gx, gp.proj.weight, gp.proj.bias])
        },
        step,
        tol,
    )?);

    let groups = rng.random_range(2..=n + 2);
    let gmap = group_assign(n, groups)?;
    let offset = if rng.random_bool(0.5) { LogitOffset::Noise } else { LogitOffset::RawScale };
    let pd = Dims::new(b, half, h, w);
    let wd = Dims::new(groups, c, 1, 1);
    let bd = Dims::new(groups, 1, 1, 1);
    let np = n + 2;
    let msg_params = |t: &[T64]| -> Result<MsgParams<f64>> {
        let k = 1 + np;
        let conv = |i: usize| Conv::from_parts(t[k + 2 * i].clone(), t[k + 2 * i + 1].clone());
        Ok(MsgParams::new(conv(0)?, conv(1)?, conv(2)?, 1.9, 0.1)?.with_offset(offset))
    };
    out.push(check_op(
        format!("msg_forward/eval/{groups}-groups/{offset:?}"),
        rng,
        |r| {
            let mut inputs = vec![random(yd, r)];
            for _ in 0..np {
                inputs.push(random(pd, r));
            }
            for _ in 0..3 {
                // keep logits moderate so the softmax is not saturated
                inputs.push(random(wd, r).scale(0.25));
                inputs.push(random(bd, r).scale(0.25));
            }
            (inputs, probe(pd.with_channels(half * np), r))
        },
        |t| {
            let o = msg_forward(&t[0], &t[1..1 + np], &msg_params(t)?, &gmap, &mut NoiseSource::eval())?;
            concat_channels(&o.paths.iter().collect::<Vec<_>>())
        },
        |t, g| {
            let p = msg_params(t)?;
            let o = msg_forward(&t[0], &t[1..1 + np], &p, &gmap, &mut NoiseSource::eval())?;
            let gp = split_channels(g, &vec![half; np])?;
            let (gy, gpaths, gparams) = msg_backward(&t[0], &t[1..1 + np], &p, &gmap, &o, &gp)?;
            let mut v = vec![gy];
            v.extend(gpaths);
            v.extend(gparams.named().into_iter().map(|(_, t)| t.clone()));
            Ok(v)
        },
        step,
        tol,
    )?);

    let shortcut = rng.random_bool(0.5);
    let xd = Dims::new(b, half, h, w);
    let bp = BottleneckParams::<f64>::uniform(half, rng);
    let rebuild = |t: &[T64]| {
        let mut p = bp.clone();
        for ((_, slot), v) in p.named_mut().into_iter().zip(&t[1..]) {
            *slot = v.clone();
        }
        p
    };
    out.push(check_op(
        format!("bottleneck/shortcut={shortcut}"),
        rng,
        |r| {
            let mut inputs = vec![random(xd, r)];
            inputs.extend(bp.named().into_iter().map(|(_, t)| t.clone()));
            (inputs, probe(xd, r))
        },
        |t| Ok(bottleneck_forward_traced(&t[0], &rebuild(t), shortcut, Activation::Silu)?.out),
        |t, g| {
            let p = rebuild(t);
            let tr = bottleneck_forward_traced(&t[0], &p, shortcut, Activation::Silu)?;
            let (gx, gp) = bottleneck_backward(&t[0], &p, shortcut, Activation::Silu, &tr, g)?;
            let mut v = vec![gx];
            v.extend(gp.named().into_iter().map(|(_, t)| t.clone()));
            Ok(v)
        },
        step,
        tol,
    )?);
    Ok(out)
}

/// Random C2F-DS configuration with both gates on.
pub fn random_block_config(rng: &mut ChaCha8Rng) -> C2fDsConfig {
    let n = rng.random_range(1..=3);
    C2fDsConfig {
        c_in: rng.random_range(1..=4),
        c_out: 2 * rng.random_range(1..=2),
        n,
        groups: rng.random_range(2..=n + 2),
        shortcut: rng.random_bool(0.5),
        offset: if rng.random_bool(0.5) { LogitOffset::Noise } else { LogitOffset::RawScale },
        ..C2fDsConfig::default()
    }
}

/// Full block, gates on, eval mode: gradients for every parameter and the input.
pub fn block_case(rng: &mut ChaCha8Rng, cfg: &C2fDsConfig, step: f64, tol: f64) -> Result<CaseResult> {
    let b = rng.random_range(1..=2);
    let (h, w) = (rng.random_range(2..=5), rng.random_range(2..=5));
    let xd = Dims::new(b, cfg.c_in, h, w);
    let name = format!(
        "c2f_ds/c_in={},c_out={},n={},G={},shortcut={},{:?}",
        cfg.c_in, cfg.c_out, cfg.n, cfg.groups, cfg.shortcut, cfg.offset
    );
    let mut redraws = 0;
    loop {
        let x = random(xd, rng);
        let params = BlockParams::<f64>::init(cfg, rng)?;
        let pr = probe(xd.with_channels(cfg.c_out), rng);
        let mut point = flatten_params(&params);
        point.extend_from_slice(x.data());
        let n_params = point.len() - x.len();
        let objective = |p: &[f64]| {
            let mut q = params.clone();
            unflatten_params(&mut q, &p[..n_params]);
            let xi = Tensor4::new(xd, p[n_params..].to_vec())?;
            c2f_forward_traced(&xi, &q, cfg, &mut NoiseSource::eval())?.out.dot(&pr)
        };
        let (numerical, stable) = reference(objective, &point, step, tol)?;
        if stable || redraws == MAX_REDRAWS {
            let trace = c2f_forward_traced(&x, &params, cfg, &mut NoiseSource::eval())?;
            let (gx, gp) = c2f_backward(&params, cfg, &trace, &pr)?;
            let mut analytical = flatten_params(&gp);
            analytical.extend_from_slice(gx.data());
            let report = compare(&analytical, &numerical, tol);
            return Ok(CaseResult { name, report, redraws });
        }
        redraws += 1;
    }
}

/// The whole sweep: `configs` rounds of primitives, gates and full blocks.
pub fn gradient_suite(seed: u64, configs: usize, step: f64, tol: f64) -> Result<Vec<CaseResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for _ in 0..configs {
        out.extend(primitive_cases(&mut rng, step, tol)?);
        out.extend(gate_cases(&mut rng, step, tol)?);
        let cfg = random_block_config(&mut rng);
        out.push(block_case(&mut rng, &cfg, step, tol)?);
    }
    Ok(out)
}
