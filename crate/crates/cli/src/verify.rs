//! Self-check suites behind `ssnn verify`. Each check prints one line,
//! `check=<name> status=<PASS|FAIL> measured=<value> tol=<value>`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ssnn_core::autodiff::{gradcheck, Tape, ValueId};
use ssnn_core::eventdata::{self, Event, EventStream};
use ssnn_core::kernels::LifParams;
use ssnn_core::temporal::{self, average_timestep, overhead_count, StagePlan, TemporalTransformer};
use ssnn_core::Tensor;

use crate::CliError;

pub struct Check {
    pub name: String,
    pub measured: f64,
    pub tol: f64,
    pub pass: bool,
}

impl Check {
    fn within(name: &str, measured: f64, tol: f64) -> Self {
        Self {
            name: name.into(),
            measured,
            tol,
            pass: measured <= tol,
        }
    }

    fn line(&self) -> String {
        format!(
            "check={} status={} measured={:e} tol={:e}",
            self.name,
            if self.pass { "PASS" } else { "FAIL" },
            self.measured,
            self.tol
        )
    }
}

type Suite = fn() -> Result<Vec<Check>, CliError>;

pub const SUITES: &[(&str, Suite)] = &[
    ("formulas", formulas),
    ("conservation", conservation),
    ("gradcheck", gradchecks),
    ("oracle", oracle),
    ("golden", golden),
];

pub fn run_suite(id: &str) -> Result<(), CliError> {
    let suite = SUITES
        .iter()
        .find(|(n, _)| *n == id)
        .map(|(_, f)| *f)
        .ok_or_else(|| {
            let names: Vec<&str> = SUITES.iter().map(|(n, _)| *n).collect();
            CliError::Config(format!("unknown suite `{id}` (expected one of {})", names.join(", ")))
        })?;
    let checks = suite()?;
    let mut failed = Vec::new();
    for c in &checks {
        println!("{}", c.line());
        if !c.pass {
            failed.push(c.name.clone());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Verify(failed.join(", ")))
    }
}

fn formulas() -> Result<Vec<Check>, CliError> {
    let a = average_timestep(&StagePlan::new(&[2, 2, 2, 2], &[8, 6, 4, 2])?)?;
    let b = average_timestep(&StagePlan::new(&[5, 4, 4, 4], &[8, 6, 4, 1])?)?;
    let w = overhead_count(&StagePlan::new(&[2, 2, 2, 2], &[8, 6, 4, 2])?);
    Ok(vec![
        Check::within("average_timestep_8642", (a - 5.0).abs(), 0.0),
        Check::within("average_timestep_8641_resnet", (b - 4.94).abs(), 0.005),
        Check::within("w_add_8642", (w as f64 - 80.0).abs(), 0.0),
    ])
}

fn random_pair<F: ssnn_core::Scalar>(rng: &mut ChaCha8Rng) -> (Tensor<F>, TemporalTransformer<F>) {
    let t1 = rng.random_range(2..=10);
    let t2 = rng.random_range(1..t1);
    let n = rng.random_range(1..=3);
    let c = rng.random_range(1..=3);
    let hw = rng.random_range(1..=3);
    let o = Tensor::from_fn(&[t1, n, c, hw, hw], |_| F::c(rng.random::<f64>()));
    let w = Tensor::from_fn(&[t2, t1], |_| F::c(rng.random_range(-3.0..3.0)));
    (o, TemporalTransformer { weight: w })
}

fn conservation_error<F: ssnn_core::Scalar>(pairs: usize, seed: u64) -> Result<(f64, f64), CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut err, mut dsum) = (0.0f64, 0.0f64);
    for _ in 0..pairs {
        let (o, tt) = random_pair::<F>(&mut rng);
        let avg = temporal::temporal_descriptor(&o)?;
        let d = temporal::temporal_score(&avg, &tt)?;
        let i2 = temporal::reassign(&o, &d)?;
        let n = o.shape()[1];
        for s in 0..n {
            let total: f64 = (0..d.shape()[0]).map(|t| d.data()[t * n + s].to_f64().unwrap()).sum();
            dsum = dsum.max((total - 1.0).abs());
        }
        let (so, si) = (o.outer_stride(), i2.outer_stride());
        for e in 0..so {
            let a: f64 = (0..o.shape()[0]).map(|t| o.data()[t * so + e].to_f64().unwrap()).sum();
            let b: f64 = (0..i2.shape()[0]).map(|t| i2.data()[t * si + e].to_f64().unwrap()).sum();
            err = err.max((a - b).abs());
        }
    }
    Ok((err, dsum))
}

fn conservation() -> Result<Vec<Check>, CliError> {
    let (e32, d32) = conservation_error::<f32>(100, 1)?;
    let (e64, d64) = conservation_error::<f64>(100, 2)?;
    Ok(vec![
        Check::within("conservation_f32", e32, 1e-5),
        Check::within("conservation_f64", e64, 1e-12),
        Check::within("score_sum_f32", d32, 1e-6),
        Check::within("score_sum_f64", d64, 1e-6),
    ])
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn gradchecks() -> Result<Vec<Check>, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut checks = Vec::new();
    let mut run = |name: &str, inputs: Vec<Tensor<f64>>, build: &dyn Fn(&mut Tape<f64>, &[ValueId]) -> ssnn_core::Result<ValueId>| -> Result<(), CliError> {
        let r = gradcheck::check(&inputs, 1e-5, |t, ids| build(t, ids))?;
        checks.push(Check::within(name, r.max_rel_err(), 1e-4));
        Ok(())
    };
    let c = rand_tensor(&mut rng, &[2, 2, 3, 5, 5]);
    run("conv2d", vec![rand_tensor(&mut rng, &[2, 2, 2, 5, 5]), rand_tensor(&mut rng, &[3, 2, 3, 3])], &|t, ids| {
        let y = t.conv2d(ids[0], ids[1], None, 1, 1)?;
        t.dot_const(y, c.clone())
    })?;
    let cl = rand_tensor(&mut rng, &[2, 3, 4]);
    run("linear", vec![rand_tensor(&mut rng, &[2, 3, 5]), rand_tensor(&mut rng, &[4, 5]), rand_tensor(&mut rng, &[4])], &|t, ids| {
        let y = t.linear(ids[0], ids[1], Some(ids[2]))?;
        t.dot_const(y, cl.clone())
    })?;
    let cp = rand_tensor(&mut rng, &[1, 2, 2, 2, 2]);
    run("avgpool", vec![rand_tensor(&mut rng, &[1, 2, 2, 4, 4])], &|t, ids| {
        let y = t.avgpool2d(ids[0], 2, 2)?;
        t.dot_const(y, cp.clone())
    })?;
    let cb = rand_tensor(&mut rng, &[2, 3, 3, 2, 2]);
    run("batchnorm", vec![rand_tensor(&mut rng, &[2, 3, 3, 2, 2]), rand_tensor(&mut rng, &[3]), rand_tensor(&mut rng, &[3])], &|t, ids| {
        let (y, _) = t.batchnorm(ids[0], ids[1], ids[2], None)?;
        t.dot_const(y, cb.clone())
    })?;
    let cs = rand_tensor(&mut rng, &[4, 3]);
    run("softmax", vec![rand_tensor(&mut rng, &[4, 3])], &|t, ids| {
        let y = t.softmax(ids[0], 0)?;
        t.dot_const(y, cs.clone())
    })?;
    run("ce_loss", vec![rand_tensor(&mut rng, &[3, 4, 5])], &|t, ids| {
        let d = t.mean_time(ids[0])?;
        t.cross_entropy(d, &[0, 3, 1, 4])
    })?;
    let ct = rand_tensor(&mut rng, &[3, 2, 2, 2, 2]);
    run("temporal_transformer", vec![rand_tensor(&mut rng, &[5, 2, 2, 2, 2]), rand_tensor(&mut rng, &[3, 5])], &|t, ids| {
        let y = temporal::transform_on_tape(t, ids[0], ids[1])?;
        t.dot_const(y, ct.clone())
    })?;
    Ok(checks)
}

/// Hand-unrolled BPTT for `I_t = w . x_t`, one LIF neuron, `y_t = v s_t + b`,
/// `L = 1/2 sum_t (y_t - r_t)^2`.
pub fn micro_bptt(x: &[[f64; 2]; 3], w: [f64; 2], v: f64, b: f64, r: [f64; 3]) -> ([f64; 2], f64, f64, f64) {
    let (leak, theta, a) = (0.5, 1.0, 1.0);
    let sg = |h: f64| if (h - theta).abs() < a / 2.0 { 1.0 / a } else { 0.0 };
    let (mut u, mut hs, mut ss) = (0.0, [0.0; 3], [0.0; 3]);
    for t in 0..3 {
        let h = leak * u + w[0] * x[t][0] + w[1] * x[t][1];
        let s = if h >= theta { 1.0 } else { 0.0 };
        u = h - s * theta;
        hs[t] = h;
        ss[t] = s;
    }
    let e: Vec<f64> = (0..3).map(|t| v * ss[t] + b - r[t]).collect();
    let loss = 0.5 * e.iter().map(|e| e * e).sum::<f64>();
    let gv: f64 = (0..3).map(|t| e[t] * ss[t]).sum();
    let gb: f64 = e.iter().sum();
    // dL/dH_t = dL/dS_t sg(H_t) + dL/dU_t (1 - theta sg(H_t)); dL/dU_{t-1} = leak dL/dH_t
    let (mut gu, mut gw) = (0.0, [0.0; 2]);
    for t in (0..3).rev() {
        let gs = e[t] * v;
        let gh = gs * sg(hs[t]) + gu * (1.0 - theta * sg(hs[t]));
        gw[0] += gh * x[t][0];
        gw[1] += gh * x[t][1];
        gu = leak * gh;
    }
    (gw, gv, gb, loss)
}

/// The same network on the tape; returns `(dw, dv, db, loss)`.
pub fn micro_tape(x: &[[f64; 2]; 3], w: [f64; 2], v: f64, b: f64, r: [f64; 3]) -> ssnn_core::Result<([f64; 2], f64, f64, f64)> {
    let mut tape = Tape::<f64>::new();
    let xs: Vec<f64> = x.iter().flatten().copied().collect();
    let xi = tape.constant(Tensor::from_f64(&[3, 1, 2], &xs)?);
    let wi = tape.leaf(Tensor::from_f64(&[1, 2], &w)?);
    let vi = tape.leaf(Tensor::from_f64(&[1, 1], &[v])?);
    let bi = tape.leaf(Tensor::from_f64(&[1], &[b])?);
    let ri = tape.constant(Tensor::from_f64(&[3, 1, 1], &r)?);
    let i = tape.linear(xi, wi, None)?;
    let s = tape.lif(
        i,
        LifParams {
            tau: 2.0,
            theta: 1.0,
            surrogate_a: 1.0,
            detach_reset: false,
        },
    )?;
    let y = tape.linear(s, vi, Some(bi))?;
    let e = tape.add_scaled(y, ri, 1.0, -1.0)?;
    let sq = tape.mul(e, e)?;
    let sum = tape.sum(sq)?;
    let loss = tape.scale(sum, 0.5)?;
    let g = tape.backward(loss)?;
    let gw = g.get_or_zeros(wi, &[1, 2]);
    Ok((
        [gw.data()[0], gw.data()[1]],
        g.get_or_zeros(vi, &[1, 1]).data()[0],
        g.get_or_zeros(bi, &[1]).data()[0],
        tape.value(loss).item(),
    ))
}

fn oracle() -> Result<Vec<Check>, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let x: [[f64; 2]; 3] = std::array::from_fn(|_| [rng.random_range(0.0..1.5), rng.random_range(0.0..1.5)]);
        let w = [rng.random_range(-0.5..1.5), rng.random_range(-0.5..1.5)];
        let (v, b) = (rng.random_range(-1.0..1.0), rng.random_range(-0.5..0.5));
        let r = [rng.random(), rng.random(), rng.random()];
        let (hw, hv, hb, hl) = micro_bptt(&x, w, v, b, r);
        let (tw, tv, tb, tl) = micro_tape(&x, w, v, b, r)?;
        for (p, q) in [(hw[0], tw[0]), (hw[1], tw[1]), (hv, tv), (hb, tb), (hl, tl)] {
            worst = worst.max((p - q).abs());
        }
    }
    Ok(vec![Check::within("micro_bptt", worst, 1e-10)])
}

fn golden() -> Result<Vec<Check>, CliError> {
    let mut bytes = b"EVST".to_vec();
    for v in [1u32, 2, 2] {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes.extend_from_slice(&1u64.to_le_bytes());
    bytes.extend_from_slice(&[0, 0, 0, 0, 0, 0, 0, 0, 1]);
    let parsed = eventdata::parse_evt(&bytes)?;
    let golden_ok = parsed.events == [Event { t_us: 0, x: 0, y: 0, p: 1 }] && eventdata::serialize(&parsed) == bytes;

    let ev = |t_us, x, p| Event { t_us, x, y: 0, p };
    let s = EventStream::new(2, 1, vec![ev(0, 0, 1), ev(5_000, 0, 1), ev(12_000, 1, 0)])?;
    let f = eventdata::integrate_frames(&s, 10.0, 2)?.frames;
    let bin_ok = f.data() == [0.0, 0.0, 2.0, 0.0, 0.0, 1.0, 0.0, 0.0];

    let labels: Vec<usize> = (0..100).map(|i| i % 2).collect();
    let (tr, te) = eventdata::split(&labels, 0.1, 3)?;
    let split_ok = tr.len() == 90 && te.len() == 10 && tr.iter().all(|i| !te.contains(i));

    let flag = |ok: bool| if ok { 0.0 } else { 1.0 };
    Ok(vec![
        Check::within("evst_golden", flag(golden_ok), 0.0),
        Check::within("binning_example", flag(bin_ok), 0.0),
        Check::within("split_9_1", flag(split_ok), 0.0),
    ])
}
