//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dsgate::c2f::{baseline_c2f_forward, block_param_count, c2f_forward, BlockParams, C2fDsConfig};
use dsgate::checks::gradient_suite;
use dsgate::data::{gen_dataset, raw_region, validation_seed, Class};
use dsgate::dso::{channel_stats, dso_apply, dso_apply_factored, dso_grad, Region, RegionConfig};
use dsgate::gating::{
    added_param_count, concat_width, dsg_forward, group_assign, msg_forward, DsgParams, Mode, MsgParams, NoiseSource,
};
use dsgate::gradcheck::grad_check;
use dsgate::layers::Conv;
use dsgate::tensor::{Dims, Parameterized};
use dsgate::train::{train, ToyConfig, TrainConfig};
use dsgate::Tensor64;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    ensure(elapsed < limit, || format!("took {elapsed:.2?}, limit {limit:?}"))
}

fn random(dims: Dims, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor64 {
    Tensor64::from_fn(dims, |_, _, _, _| rng.random_range(lo..=hi))
}

fn operator_exactness() -> Outcome {
    let start = Instant::now();
    for (mu, d, want) in [(0.0, 0.0, 0.0), (1.0, 1.0, 3.0), (2.5, 0.0, 2.5), (0.0, 1.75, 1.75)] {
        let got = dso_apply(mu, d);
        ensure(got == want, || format!("phi({mu}, {d}) = {got}, want {want}"))?;
    }
    for i in 0..=200 {
        let v = i as f64 * 0.37;
        ensure(dso_apply(v, 0.0) == v && dso_apply(0.0, v) == v, || format!("identity axes fail at {v}"))?;
    }
    let mut worst = 0.0f64;
    for i in 0..61 {
        for j in 0..61 {
            let (mu, d) = (3.0 * i as f64 / 60.0, 3.0 * j as f64 / 60.0);
            worst = worst.max((dso_apply(mu, d) - dso_apply_factored(mu, d)).abs());
        }
    }
    ensure(worst <= 1e-12, || format!("factored vs expanded differ by {worst:e}"))?;
    within(start.elapsed(), Duration::from_secs(1))?;
    Ok(format!("61x61 grid max |diff| {worst:e}"))
}

fn derivative_suite() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let (mu, d) = (rng.random_range(0.0..=10.0), rng.random_range(0.0..=10.0));
        let (gm, gd) = dso_grad(mu, d);
        ensure(gm == d + 1.0 && gd == mu + 1.0, || format!("closed form differs at ({mu}, {d})"))?;
        let r = grad_check(|p: &[f64]| Ok(dso_apply(p[0], p[1])), &[mu, d], &[gm, gd], 1e-4, 1e-6)
            .map_err(|e| e.to_string())?;
        ensure(r.pass, || format!("finite differences disagree at ({mu}, {d}): {r:?}"))?;
        worst = worst.max(r.max_rel_err);
        let (a, b) = (rng.random_range(0.01..=2.0), rng.random_range(0.01..=2.0));
        let mixed = dso_apply(mu + a, d + b) - dso_apply(mu + a, d) - dso_apply(mu, d + b) + dso_apply(mu, d);
        ensure(mixed > 0.0, || format!("no synergy at ({mu}, {d}) step ({a}, {b}): {mixed}"))?;
    }
    within(start.elapsed(), Duration::from_secs(1))?;
    Ok(format!("1000 points, worst rel err {worst:e}"))
}

fn gradient_checks() -> Outcome {
    let start = Instant::now();
    let configs = 20;
    let cases = gradient_suite(17, configs, 1e-4, 1e-5).map_err(|e| e.to_string())?;
    let failed: Vec<String> = cases
        .iter()
        .filter(|c| !c.report.pass)
        .map(|c| format!("{} ({:e})", c.name, c.report.max_rel_err))
        .collect();
    ensure(failed.is_empty(), || format!("failed: {}", failed.join(", ")))?;
    ensure(cases.iter().any(|c| c.name.starts_with("c2f_ds/")), || "no full-block case ran".into())?;
    within(start.elapsed(), Duration::from_secs(60))?;
    let worst = cases.iter().map(|c| c.report.max_rel_err).fold(0.0, f64::max);
    let redraws: usize = cases.iter().map(|c| c.redraws).sum();
    Ok(format!("{} cases over {configs} configs, worst {worst:e}, {redraws} redraws", cases.len()))
}

fn statistic_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for i in 0..10_000 {
        let dims = Dims::new(rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(1..=6), rng.random_range(1..=6));
        let x = if i % 10 == 0 {
            Tensor64::full(dims, rng.random_range(-2.0..=2.0))
        } else {
            random(dims, -2.0, 2.0, &mut rng)
        };
        let d = channel_stats(&x).d;
        ensure(d.data().iter().all(|&v| v >= 0.0), || format!("negative d on tensor {i}"))?;
    }
    // dyadic values on power-of-two planes keep every sum exact
    for i in 0..1000 {
        let side = [1, 2, 4, 8];
        let dims = Dims::new(1, rng.random_range(1..=3), side[rng.random_range(0..4)], side[rng.random_range(0..4)]);
        let x = Tensor64::from_fn(dims, |_, _, _, _| rng.random_range(-128i32..=128) as f64 / 64.0);
        let c = rng.random_range(-16i32..=16) as f64 / 8.0;
        let (a, b) = (channel_stats(&x), channel_stats(&x.map(|v| v + c)));
        ensure(a.d.bit_eq(&b.d), || format!("shift {c} changed d on tensor {i}"))?;
        ensure(a.mu.map(|v| v + c).bit_eq(&b.mu), || format!("shift {c} did not shift mu on tensor {i}"))?;
    }
    Ok("d >= 0 on 10000 tensors; 1000 exact shift cases".into())
}

fn msg_contracts() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut t_range = (f64::INFINITY, f64::NEG_INFINITY);
    for trial in 0..200 {
        let c = 2 * rng.random_range(1..=4);
        let n = rng.random_range(1..=4);
        let groups = rng.random_range(2..=n + 2);
        let b = rng.random_range(1..=3);
        let p = MsgParams::new(
            Conv::uniform(c, groups, 1, &mut rng),
            Conv::uniform(c, groups, 1, &mut rng),
            Conv::uniform(c, groups, 1, &mut rng),
            1.9,
            0.1,
        )
        .map_err(|e| e.to_string())?;
        let gmap = group_assign(n, groups).map_err(|e| e.to_string())?;
        let y = random(Dims::new(b, c, 1, 1), 0.0, 5.0, &mut rng);
        let paths: Vec<Tensor64> = (0..n + 2).map(|_| random(Dims::new(b, c / 2, 3, 3), -1.0, 1.0, &mut rng)).collect();
        for mode in [Mode::Train, Mode::Eval] {
            let mut noise = NoiseSource::new(trial, mode);
            let o = msg_forward(&y, &paths, &p, &gmap, &mut noise).map_err(|e| e.to_string())?;
            for bi in 0..b {
                let row: Vec<f64> = (0..groups).map(|g| o.w_msg.get(bi, g, 0, 0)).collect();
                let sum: f64 = row.iter().sum();
                ensure(row.iter().all(|&w| w >= 0.0) && (sum - 1.0).abs() <= 1e-12, || {
                    format!("weights {row:?} leave the simplex")
                })?;
            }
            for &t in o.temp.data() {
                ensure(t > 0.1 && t < 2.0, || format!("temperature {t} outside (0.1, 2.0)"))?;
                t_range = (t_range.0.min(t), t_range.1.max(t));
            }
            let again = msg_forward(&y, &paths, &p, &gmap, &mut NoiseSource::new(trial, mode)).map_err(|e| e.to_string())?;
            ensure(again.w_msg.bit_eq(&o.w_msg), || "same seed gave different weights".into())?;
        }
    }
    let p = MsgParams::<f64>::zeros(8, 3, 1.9, 0.1).map_err(|e| e.to_string())?;
    let gmap = group_assign(2, 3).map_err(|e| e.to_string())?;
    let y = random(Dims::new(2, 8, 1, 1), 0.0, 3.0, &mut rng);
    let paths: Vec<Tensor64> = (0..4).map(|_| random(Dims::new(2, 4, 2, 2), -1.0, 1.0, &mut rng)).collect();
    let o = msg_forward(&y, &paths, &p, &gmap, &mut NoiseSource::eval()).map_err(|e| e.to_string())?;
    ensure(o.w_msg.data().iter().all(|&w| w == 1.0 / 3.0), || format!("zero-parameter weights {:?}", o.w_msg.data()))?;
    Ok(format!("T observed in [{:.4}, {:.4}]", t_range.0, t_range.1))
}

fn dsg_contracts() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..200 {
        let c = 2 * rng.random_range(1..=4);
        let n = rng.random_range(1..=4);
        let b = rng.random_range(1..=3);
        let cp = concat_width(c, n);
        let p = DsgParams::new(c, n, Conv::uniform(c, cp, 1, &mut rng)).map_err(|e| e.to_string())?;
        let y = random(Dims::new(b, c, 1, 1), 0.0, 5.0, &mut rng);
        let x = random(Dims::new(b, cp, 3, 3), -3.0, 3.0, &mut rng);
        let o = dsg_forward(&y, &x, &p).map_err(|e| e.to_string())?;
        ensure(o.w.data().iter().all(|&w| w > 0.0 && w < 1.0), || "gate outside (0, 1)".into())?;
        ensure(o.x_out.data().iter().zip(x.data()).all(|(a, b)| a.abs() <= b.abs()), || "gating amplified a feature".into())?;
        let z = dsg_forward(&y, &x, &DsgParams::zeros(c, n)).map_err(|e| e.to_string())?;
        ensure(z.x_out.bit_eq(&x.scale(0.5)), || "zero parameters did not halve x_cat".into())?;
    }
    for (c, n) in [(8, 1), (8, 2), (64, 2), (64, 4)] {
        let cp = (c / 2) * (2 + n);
        ensure(DsgParams::<f64>::new(c, n, Conv::zeros(c, cp, 1)).is_ok(), || format!("({c}, {n}) rejected C'={cp}"))?;
        for wrong in [cp - 1, cp + 1] {
            ensure(DsgParams::<f64>::new(c, n, Conv::zeros(c, wrong, 1)).is_err(), || format!("({c}, {n}) accepted {wrong}"))?;
        }
    }
    Ok("200 random gates; C' enforced for 4 shapes".into())
}

fn flag_off_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for i in 0..50 {
        let cfg = C2fDsConfig {
            shortcut: rng.random_bool(0.5),
            ..C2fDsConfig::new(rng.random_range(1..=6), 2 * rng.random_range(1..=4), rng.random_range(1..=3))
        }
        .baseline();
        let params = BlockParams::<f64>::init(&cfg, &mut rng).map_err(|e| e.to_string())?;
        let x = random(Dims::new(rng.random_range(1..=2), cfg.c_in, rng.random_range(1..=6), rng.random_range(1..=6)), -2.0, 2.0, &mut rng);
        let gated = c2f_forward(&x, &params, &cfg, &mut NoiseSource::new(i, Mode::Train)).map_err(|e| e.to_string())?;
        let base = baseline_c2f_forward(&x, &params, &cfg).map_err(|e| e.to_string())?;
        ensure(gated.bit_eq(&base), || format!("pair {i} differs"))?;
    }
    Ok("50 pairs bitwise equal".into())
}

fn tensor_count(p: &impl Parameterized<f64>) -> usize {
    p.named().iter().map(|(_, t)| t.len()).sum()
}

fn parameter_accounting() -> Outcome {
    let hand = added_param_count(64, 2, 3);
    ensure(hand.dsg == 8320 && hand.msg == 585, || format!("hand values {hand:?}"))?;
    let mut configs = 0;
    for c_out in [2, 4, 8, 16, 64] {
        for n in 1..=4 {
            for groups in 2..=n + 2 {
                let cfg = C2fDsConfig { groups, ..C2fDsConfig::new(8, c_out, n) };
                let on = BlockParams::<f64>::zeros(&cfg).map_err(|e| e.to_string())?;
                let off = BlockParams::<f64>::zeros(&cfg.clone().baseline()).map_err(|e| e.to_string())?;
                let added = added_param_count(cfg.channels(), n, groups);
                let dsg = on.dsg.as_ref().map(tensor_count).unwrap_or(0);
                let msg = on.msg.as_ref().map(tensor_count).unwrap_or(0);
                ensure(dsg == added.dsg && msg == added.msg, || format!("{cfg:?}: enumerated ({dsg}, {msg}) vs {added:?}"))?;
                ensure(tensor_count(&on) - tensor_count(&off) == added.dsg + added.msg, || format!("{cfg:?}: totals differ"))?;
                let counted = block_param_count(&cfg).map_err(|e| e.to_string())?;
                ensure(counted.total == tensor_count(&on), || format!("{cfg:?}: block count {}", counted.total))?;
                configs += 1;
            }
        }
    }
    Ok(format!("{configs} configs; dsg(64,2)=8320 msg(64,3)=585"))
}

fn toy_training() -> Outcome {
    let seed = 7;
    let data = gen_dataset::<f64>(seed, 2048).map_err(|e| e.to_string())?;
    let val = gen_dataset::<f64>(validation_seed(seed), 512).map_err(|e| e.to_string())?;
    let tc = TrainConfig { seed, ..TrainConfig::default() };
    let start = Instant::now();
    let out = train(&ToyConfig::default(), &data, &val, &tc).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let (first, last) = (out.metrics.initial(), out.metrics.last());
    let summary = format!(
        "{} epochs in {elapsed:.1?}, loss {:.4} -> {:.4}, val acc {:.3}",
        last.epoch, first.loss, last.loss, last.val_acc
    );
    let grads = out.first_step.ok_or("no optimizer step ran")?;
    for name in ["block.dsg.weight", "block.msg.gate.weight"] {
        let g = grads.get(name).ok_or_else(|| format!("no gradient named {name}"))?;
        ensure(g.max_abs() > 1e-8, || format!("{name} gradient is dead ({:e}); {summary}", g.max_abs()))?;
    }
    within(elapsed, Duration::from_secs(300)).map_err(|e| format!("{e}; {summary}"))?;
    ensure(last.loss <= 0.5 * first.loss, || format!("loss did not halve; {summary}"))?;
    ensure(last.val_acc >= 0.80, || format!("validation accuracy below 0.80; {summary}"))?;
    Ok(summary)
}

fn taxonomy_separation() -> Outcome {
    let samples = gen_dataset::<f64>(10, 4000).map_err(|e| e.to_string())?;
    let cfg = RegionConfig::default();
    let rate = |class: Class, region: Region| {
        let of_class: Vec<_> = samples.iter().filter(|s| s.label == class).collect();
        let hits = of_class.iter().filter(|s| raw_region(s, &cfg) == region).count();
        (hits as f64 / of_class.len() as f64, of_class.len())
    };
    let (small, n_small) = rate(Class::Small, Region::Small);
    let (bg, n_bg) = rate(Class::Background, Region::Background);
    let summary = format!("small {small:.3} of {n_small}, background {bg:.3} of {n_bg}");
    ensure(n_small >= 1000 && n_bg >= 1000, || format!("too few samples; {summary}"))?;
    ensure(small >= 0.95 && bg >= 0.95, || summary.clone())?;
    Ok(summary)
}

fn run_cli(args: &[&str]) -> Result<String, String> {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = dsgate_cli::run(std::iter::once("dsgate").chain(args.iter().copied()), &mut out, &mut err);
    if code != 0 {
        return Err(format!("exit {code}: {}", String::from_utf8_lossy(&err)));
    }
    String::from_utf8(out).map_err(|e| e.to_string())
}

fn ablation_machinery() -> Outcome {
    let small = ["--samples", "128", "--val-samples", "64", "--epochs", "2"];
    let mut rows = 0;
    for (axis, values) in [("groups", "2,3,4"), ("alpha", "0.9,1.9,2.9,3.9,4.9"), ("operator", "mean,max,dso")] {
        let mut args = vec!["ablate", "--axis", axis, "--values", values];
        args.extend(small);
        let first = run_cli(&args)?;
        let second = run_cli(&args)?;
        ensure(first == second, || format!("{axis} ablation is not deterministic"))?;
        let mut lines = first.lines();
        ensure(lines.next() == Some("axis,value,final_loss,val_acc,t_min,t_max,t_in_bounds"), || format!("{axis}: bad header"))?;
        let body: Vec<&str> = lines.collect();
        let wanted: Vec<&str> = values.split(',').collect();
        ensure(body.len() == wanted.len(), || format!("{axis}: {} rows for {} values", body.len(), wanted.len()))?;
        for (line, value) in body.iter().zip(&wanted) {
            let f: Vec<&str> = line.split(',').collect();
            ensure(f.len() == 7 && f[0] == axis && f[1] == *value, || format!("malformed row '{line}'"))?;
            let acc: f64 = f[3].parse().map_err(|_| format!("bad accuracy in '{line}'"))?;
            ensure((0.0..=1.0).contains(&acc) && f[2].parse::<f64>().is_ok(), || format!("bad numbers in '{line}'"))?;
            ensure(f[6] == "true", || format!("temperature left its bounds in '{line}'"))?;
        }
        rows += body.len();
    }
    Ok(format!("3 axes, {rows} rows, reruns byte-identical (reduced size)"))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("operator exactness", operator_exactness),
        ("operator derivatives and synergy", derivative_suite),
        ("finite-difference gradient checks", gradient_checks),
        ("statistic invariants", statistic_invariants),
        ("multi-path gate contracts", msg_contracts),
        ("decision-space gate contracts", dsg_contracts),
        ("flag-off equivalence", flag_off_equivalence),
        ("parameter accounting", parameter_accounting),
        ("toy training gate", toy_training),
        ("taxonomy separation", taxonomy_separation),
        ("ablation machinery", ablation_machinery),
    ];
    let mut failures = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(detail) => println!("[PASS] {:>2} {name}: {detail}", i + 1),
            Err(detail) => {
                failures += 1;
                println!("[FAIL] {:>2} {name}: {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failures} failed", criteria.len() - failures);
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
