//! Acceptance criteria, one line each.
//!
//! Criteria 6 to 9 and 11 train the whole pipeline twice and take about an
//! hour on one core. They run when `LATFLOW_ACCEPTANCE_FULL=1`; otherwise
//! they report SKIP. `LATFLOW_ACCEPTANCE_DIR` keeps the run artifacts.
//! Failures exit non-zero only under `LATFLOW_ACCEPTANCE_STRICT=1`.

mod common;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use latflow::metrics::{ncc, nmse, psnr, ssim3d, welch_t, MetricKind, MetricReport, Region, SsimConfig};
use latflow::pipeline::{bench, evaluate_dir, sample_split, Ablation, SampleOptions, Stage, Synthesizer};
use latflow::rng::{stream, tag};
use latflow::schedulers::{DdpmSchedule, rf_interpolate, rf_sample, rf_target_velocity, rflow_loss, RFlowSchedule, TimestepDist};
use latflow::synthdata::{write_dataset, PhantomSpec, Split};
use latflow::tensor::{grad_check, ops, BoundParams, Parameters, Tape, Tensor, Var};
use latflow::train::{train_ddpm, train_rflow, train_vae, AdamW, AdamWConfig, ModelKind, RunConfig};
use latflow::vae::{kl_normal, reparameterize_with, GaussianPosterior, Vae, VaeConfig};
use latflow::velocity_net::{UNet, UNetConfig};
use latflow::Result;

enum Verdict {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn check(cond: bool, detail: String) -> Result<Verdict> {
    Ok(if cond { Verdict::Pass(detail) } else { Verdict::Fail(detail) })
}

fn run(id: usize, name: &str, limit_s: f64, f: impl FnOnce() -> Result<Verdict>) -> bool {
    let clock = Instant::now();
    let verdict = f().unwrap_or_else(|e| Verdict::Fail(format!("error: {e}")));
    let secs = clock.elapsed().as_secs_f64();
    let (word, detail, ok) = match verdict {
        Verdict::Pass(d) if secs <= limit_s => ("PASS", d, true),
        Verdict::Pass(d) => ("FAIL", format!("{d}; took {secs:.1}s, limit {limit_s:.0}s"), false),
        Verdict::Fail(d) => ("FAIL", d, false),
        Verdict::Skip(d) => ("SKIP", d, true),
    };
    println!("criterion {id:>2} {word} {name}: {detail} [{secs:.1}s]");
    ok
}

fn path_identities() -> Result<Verdict> {
    let mut rng = stream(11, &[]);
    let z0 = Tensor::randn([3, 4, 4, 4], 1.0, &mut rng);
    let z1 = Tensor::randn([3, 4, 4, 4], 1.0, &mut rng);
    let e0 = rf_interpolate(&z0, &z1, 0.0)?.max_abs_diff(&z0)?;
    let e1 = rf_interpolate(&z0, &z1, 1.0)?.max_abs_diff(&z1)?;
    let h = 1e-5;
    let mut dv: f64 = 0.0;
    for t in [0.1, 0.37, 0.5, 0.82] {
        let fd = rf_interpolate(&z0, &z1, t + h)?
            .zip_map(&rf_interpolate(&z0, &z1, t - h)?, |a, b| (a - b) / (2.0 * h))?;
        dv = dv.max(rf_target_velocity(&z0, &z1, t)?.max_abs_diff(&fd)?);
    }
    check(
        e0 <= 1e-15 && e1 <= 1e-15 && dv < 1e-8,
        format!("endpoint errors {e0:.1e}, {e1:.1e}; velocity vs central difference {dv:.1e}"),
    )
}

fn oracle_sampler() -> Result<Verdict> {
    let mut rng = stream(12, &[]);
    let z0 = Tensor::randn([2, 4, 4, 4, 4], 1.0, &mut rng);
    let z1 = Tensor::randn([2, 4, 4, 4, 4], 1.0, &mut rng);
    let v = z1.zip_map(&z0, |a, b| a - b)?;
    let field = |_: &Tensor, _: f64| Ok(v.clone());
    let mut worst: f64 = 0.0;
    let mut nfe_ok = true;
    for k in [1, 10, 200] {
        let (out, nfe) = rf_sample(&field, &z1, k)?;
        nfe_ok &= nfe == k;
        worst = worst.max(out.max_abs_diff(&z0)?);
    }
    check(worst < 1e-10 && nfe_ok, format!("max recovery error {worst:.1e} over K in 1, 10, 200"))
}

fn tiny_unet_loss_check() -> Result<(usize, f64, bool)> {
    let net = UNet::new(UNetConfig::tiny(1))?;
    let mut params = net.init_params(&mut stream(13, &[]))?;
    // Zero-initialized tensors would hide gradient paths.
    for (name, t) in params.iter_mut() {
        if t.data().iter().all(|&x| x == 0.0) {
            *t = Tensor::randn(t.shape().to_vec(), 0.1, &mut stream(tag(name), &[]));
            t.set_requires_grad(true);
        }
    }
    let mut rng = stream(14, &[]);
    let z0 = Tensor::randn([2, 1, 8, 8, 8], 1.0, &mut rng);
    let cond = Tensor::randn([2, 2, 8, 8, 8], 1.0, &mut rng);
    let sched = RFlowSchedule::default();
    let f = |tape: &Tape, p: &BoundParams| -> Result<Var> {
        let net_fn = |zt: &Var, ts: &[f64]| {
            let c = tape.constant(cond.clone());
            net.forward(p, &ops::concat_channels(&[zt, &c])?, ts)
        };
        rflow_loss(tape, net_fn, &z0, &sched, &mut stream(15, &[]))
    };
    let report = grad_check(f, &params, common::GRAD_H, common::GRAD_TOL)?;
    Ok((report.checked, report.max_rel_error, report.passed()))
}

fn gradient_integrity() -> Result<Verdict> {
    let prims = common::primitive_checks(7);
    let bad: Vec<&str> = prims.iter().filter(|(_, r)| !r.passed()).map(|(n, _)| *n).collect();
    let prim_err = prims.iter().map(|(_, r)| r.max_rel_error).fold(0.0, f64::max);
    let (checked, net_err, net_ok) = tiny_unet_loss_check()?;
    check(
        bad.is_empty() && net_ok,
        format!(
            "{} primitives, max rel error {prim_err:.1e}{}; tiny U-Net rflow loss {checked} elements, max rel error {net_err:.1e}",
            prims.len(),
            if bad.is_empty() { String::new() } else { format!(" (failed: {})", bad.join(", ")) },
        ),
    )
}

fn metric_oracles() -> Result<Verdict> {
    let cfg = SsimConfig::default();
    let mut worst: f64 = 0.0;
    for i in 0..20 {
        let r = common::random_volume([8, 8, 8], 100 + i);
        let x = common::perturbed(&r, 200 + i, 0.1 + 0.02 * i as f64);
        worst = worst
            .max((nmse(&x, &r)? - common::naive_nmse(&x, &r)).abs())
            .max((psnr(&x, &r, 2.0)? - common::naive_psnr(&x, &r, 2.0)).abs())
            .max((ncc(&x, &r)? - common::naive_ncc(&x, &r)).abs())
            .max((ssim3d(&x, &r, &cfg)? - common::naive_ssim(&x, &r, 2.0)).abs());
    }
    let mut welch: f64 = 0.0;
    for (a, b, t, dof, p) in common::WELCH_REFERENCE {
        let w = welch_t(a, b)?;
        welch = welch.max((w.t - t).abs()).max((w.dof - dof).abs()).max((w.p - p).abs());
    }
    check(
        worst < 1e-10 && welch < 1e-6,
        format!("max metric deviation {worst:.1e} on 20 pairs; max Welch deviation {welch:.1e}"),
    )
}

/// Two-layer velocity field on `(z, t)` for scalar data.
struct Toy;

impl Toy {
    const HIDDEN: usize = 64;

    fn init() -> Parameters {
        let mut rng = stream(21, &[tag("toy-init")]);
        let mut p = Parameters::new();
        let h = Self::HIDDEN;
        p.insert("wz", Tensor::randn([1, h], 1.0, &mut rng)).unwrap();
        p.insert("wt", Tensor::randn([1, h], 1.0, &mut rng)).unwrap();
        p.insert("b1", Tensor::randn([h], 0.5, &mut rng)).unwrap();
        p.insert("w2", Tensor::randn([h, 1], (1.0 / h as f64).sqrt(), &mut rng)).unwrap();
        p.insert("b2", Tensor::zeros([1])).unwrap();
        p
    }

    fn forward(p: &BoundParams, z: &Var, ts: &[f64]) -> Result<Var> {
        let t = z.tape().constant(Tensor::new([ts.len(), 1], ts.to_vec())?);
        let pre = ops::add(&ops::linear(z, p.get("wz")?, Some(p.get("b1")?))?, &ops::linear(&t, p.get("wt")?, None)?)?;
        ops::linear(&ops::silu(&pre), p.get("w2")?, Some(p.get("b2")?))
    }
}

fn toy_transport() -> Result<(f64, f64, String)> {
    let mut params = Toy::init();
    let mut opt = AdamW::new(AdamWConfig { lr: 3e-3, weight_decay: 0.0, ..AdamWConfig::default() });
    let sched = RFlowSchedule { timestep_dist: TimestepDist::Uniform, ..RFlowSchedule::default() };
    let batch = 256;
    for step in 0..3000u64 {
        if step == 2000 {
            opt.config.lr = 1e-3;
        }
        let mut rng = stream(22, &[tag("toy-step"), step]);
        let z0 = Tensor::randn([batch, 1], 0.5, &mut rng).map(|x| x + 3.0);
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let loss = rflow_loss(&tape, |zt, ts| Toy::forward(&bound, zt, ts), &z0, &sched, &mut rng)?;
        loss.backward()?;
        params.zero_grad();
        params.absorb_grads(&bound)?;
        opt.step(&mut params)?;
    }
    let n = 2000;
    let z1 = Tensor::randn([n, 1], 1.0, &mut stream(23, &[tag("toy-sample")]));
    let field = |z: &Tensor, t: f64| -> Result<Tensor> {
        let tape = Tape::new();
        let bound = params.bind_frozen(&tape);
        Ok(Toy::forward(&bound, &tape.constant(z.clone()), &vec![t; n])?.to_tensor())
    };
    let (out, _) = rf_sample(&field, &z1, 200)?;
    let xs = out.data();
    let mean = xs.iter().sum::<f64>() / n as f64;
    let std = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    let mut csv = String::from("index,value\n");
    for (i, x) in xs.iter().enumerate() {
        csv.push_str(&format!("{i},{x}\n"));
    }
    Ok((mean, std, csv))
}

fn vae_properties() -> Result<Verdict> {
    // Closed-form KL against a Monte-Carlo estimate of E_q[ln q - ln p].
    let mut rng = stream(31, &[]);
    let mu = Tensor::randn([6], 0.6, &mut rng);
    let logvar = Tensor::randn([6], 0.4, &mut rng).map(|x| x - 0.3);
    let post = GaussianPosterior::new(mu.clone(), logvar.clone())?;
    let tape = Tape::new();
    let closed = kl_normal(&tape.constant(mu.clone()), &tape.constant(logvar.clone()))?.item().unwrap_or(f64::NAN);
    let draws = 100_000;
    let mut acc = 0.0;
    for _ in 0..draws {
        let z = post.sample(&mut rng);
        for ((&zi, &m), &lv) in z.data().iter().zip(mu.data()).zip(logvar.data()) {
            let log_q = -0.5 * ((zi - m).powi(2) / lv.exp() + lv);
            let log_p = -0.5 * zi * zi;
            acc += log_q - log_p;
        }
    }
    let mc = acc / draws as f64;
    let kl_rel = (mc - closed).abs() / closed;
    let kl_ok = kl_rel < 0.02 && (closed - post.kl()).abs() < 1e-12;

    // Standard-normal reparameterization statistics and the zero-sigma case.
    let n = 100_000;
    let eps = Tensor::randn([n], 1.0, &mut stream(32, &[]));
    let z = reparameterize_with(&Tensor::zeros([n]), &Tensor::zeros([n]), &eps)?;
    let m = z.data().iter().sum::<f64>() / n as f64;
    let var = z.data().iter().map(|x| (x - m).powi(2)).sum::<f64>() / n as f64;
    let pinned = reparameterize_with(&mu, &Tensor::full([6], -1e4), &Tensor::randn([6], 1.0, &mut rng))?;
    let rep_ok = m.abs() < 0.02 && (0.98..=1.02).contains(&var) && pinned == mu;

    // Latent geometry is a quarter of the input along every axis.
    let vae = Vae::new(VaeConfig::default())?;
    let params = vae.init_params(&mut stream(33, &[]))?;
    let mut geo_ok = true;
    for ext in [[16, 16, 16], [8, 12, 16], [4, 8, 20]] {
        let x = Tensor::randn([1, 1, ext[0], ext[1], ext[2]], 0.3, &mut rng);
        let p = vae.encode(&params, &x)?;
        let want = [1, 4, ext[0] / 4, ext[1] / 4, ext[2] / 4];
        geo_ok &= p.mu.shape() == want && p.logvar.shape() == want;
        geo_ok &= vae.decode(&params, &p.mu)?.shape() == x.shape();
        geo_ok &= vae.config.latent_extents(ext)? == [ext[0] / 4, ext[1] / 4, ext[2] / 4];
    }
    geo_ok &= vae.config.latent_extents([16, 10, 16]).is_err();

    check(
        kl_ok && rep_ok && geo_ok,
        format!(
            "KL closed {closed:.4} vs Monte-Carlo {mc:.4} ({:.2}%); reparameterized mean {m:.4}, var {var:.4}; geometry {}",
            100.0 * kl_rel,
            if geo_ok { "exact" } else { "mismatch" }
        ),
    )
}

/// Everything criteria 6 to 9 and 11 need from one pipeline run.
struct PipelineRun {
    rflow: BTreeMap<Ablation, MetricReport>,
    ddpm: MetricReport,
    denoise_ratio: f64,
    nfe: (usize, usize),
    /// Deterministic CSV outputs keyed by name.
    csvs: BTreeMap<String, String>,
    seconds: f64,
}

fn config(name: &str, root: &Path) -> Result<RunConfig> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut cfg = RunConfig::load(&dir.join(name))?;
    cfg.manifest = root.join("data/manifest.json");
    cfg.out_dir = root.join(name.trim_end_matches(".toml"));
    if cfg.vae_checkpoint.is_some() {
        cfg.vae_checkpoint = Some(root.join("vae/final.ckpt"));
        cfg.latent_cache = Some(root.join("latents"));
    }
    Ok(cfg)
}

fn pipeline(root: &Path, seed: u64) -> Result<PipelineRun> {
    let clock = Instant::now();
    let spec = PhantomSpec { seed, ..PhantomSpec::default() };
    let manifest = write_dataset(&spec, &root.join("data"), (200, 25, 25), false)?;
    train_vae(&config("vae.toml", root)?)?;
    let rf = train_rflow(&config("rflow.toml", root)?)?;
    let dd = train_ddpm(&config("ddpm.toml", root)?)?;

    let mut csvs = BTreeMap::new();
    let synth = Synthesizer::load(&rf.final_checkpoint, None)?;
    let mut rflow = BTreeMap::new();
    for ablation in Ablation::ALL {
        let out = root.join("pred").join(format!("rflow_{}", ablation.as_str()));
        let opts = SampleOptions { seed, steps: Some(200), ablation };
        sample_split(&synth, &manifest, Split::Test, &opts, &out)?;
        let report = evaluate_dir(&out, &manifest, Split::Test, false, ablation.as_str())?;
        csvs.insert(format!("rflow_{}", ablation.as_str()), report.to_csv()?);
        rflow.insert(ablation, report);
    }
    let base = Synthesizer::load(&dd.final_checkpoint, None)?;
    let out = root.join("pred/ddpm");
    sample_split(&base, &manifest, Split::Test, &SampleOptions { seed, ..SampleOptions::default() }, &out)?;
    let ddpm = evaluate_dir(&out, &manifest, Split::Test, false, "ddpm")?;
    csvs.insert("ddpm".into(), ddpm.to_csv()?);
    let seconds = clock.elapsed().as_secs_f64();

    let sched = DdpmSchedule::linear(1000, 1e-4, 0.02)?;
    let report = bench(
        &synth.vae,
        &synth.vae_params,
        &synth.unet,
        &synth.params,
        spec.extents,
        &[(ModelKind::Rflow, 200), (ModelKind::Ddpm, 1000)],
        &sched,
        3,
    )?;
    let r = report.find(Stage::Denoise, "rflow", 200).map_or((f64::NAN, 0), |b| (b.wall_seconds, b.nfe));
    let d = report.find(Stage::Denoise, "ddpm", 1000).map_or((f64::NAN, 0), |b| (b.wall_seconds, b.nfe));
    csvs.insert("bench_nfe".into(), format!("sampler,nfe\nrflow,{}\nddpm,{}\n", r.1, d.1));
    Ok(PipelineRun { rflow, ddpm, denoise_ratio: d.0 / r.0, nfe: (r.1, d.1), csvs, seconds })
}

fn workdir(label: &str) -> (PathBuf, Option<tempfile::TempDir>) {
    match std::env::var_os("LATFLOW_ACCEPTANCE_DIR") {
        Some(dir) => {
            let p = PathBuf::from(dir).join(label);
            let _ = std::fs::remove_dir_all(&p);
            (p, None)
        }
        None => {
            let t = tempfile::tempdir().expect("temporary directory");
            (t.path().to_path_buf(), Some(t))
        }
    }
}

fn nmse_of(r: &MetricReport) -> f64 {
    r.mean(MetricKind::Nmse, Region::Whole)
}

fn main() {
    let full = std::env::var("LATFLOW_ACCEPTANCE_FULL").is_ok_and(|v| v == "1");
    let mut ok = true;
    ok &= run(1, "scheduler identities", 1.0, path_identities);
    ok &= run(2, "oracle sampler exactness", 1.0, oracle_sampler);
    ok &= run(3, "gradient integrity", 120.0, gradient_integrity);
    ok &= run(4, "metric oracles", 30.0, metric_oracles);
    let mut toy_csv = None;
    ok &= run(5, "toy transport", 300.0, || {
        let (mean, std, csv) = toy_transport()?;
        toy_csv = Some(csv);
        check(
            (2.8..=3.2).contains(&mean) && (0.35..=0.70).contains(&std),
            format!("2000 samples: mean {mean:.4}, std {std:.4}"),
        )
    });

    let skip = || Ok(Verdict::Skip("set LATFLOW_ACCEPTANCE_FULL=1 to run the full pipeline".into()));
    let first = if full {
        let (dir, _keep) = workdir("run-a");
        let r = pipeline(&dir, 7);
        Some(r)
    } else {
        None
    };
    match &first {
        Some(Ok(p)) => {
            let both = &p.rflow[&Ablation::Both];
            let ssim = both.mean(MetricKind::Ssim, Region::Whole);
            let e = nmse_of(both);
            ok &= run(6, "end-to-end synthesis", 3600.0, || {
                check(
                    ssim > 0.85 && e < 0.10 && p.seconds < 3600.0,
                    format!("test SSIM {ssim:.4}, NMSE {e:.4}, pipeline {:.0}s", p.seconds),
                )
            });
            ok &= run(7, "ablation ordering", f64::INFINITY, || {
                let [b, t, f] = [Ablation::Both, Ablation::T1wOnly, Ablation::FlairOnly].map(|a| nmse_of(&p.rflow[&a]));
                let w = welch_t(
                    &p.rflow[&Ablation::Both].values(MetricKind::Nmse, Region::Whole),
                    &p.rflow[&Ablation::FlairOnly].values(MetricKind::Nmse, Region::Whole),
                )?;
                check(
                    b < t && t < f && w.p < 0.05,
                    format!("NMSE both {b:.4}, t1w-only {t:.4}, flair-only {f:.4}; both vs flair-only p {:.2e}", w.p),
                )
            });
            ok &= run(8, "baseline ordering", f64::INFINITY, || {
                let d = nmse_of(&p.ddpm);
                check(e <= d, format!("NMSE rflow-200 {e:.4}, ddpm-1000 {d:.4}"))
            });
            ok &= run(9, "step-count timing", f64::INFINITY, || {
                check(
                    (4.0..=6.0).contains(&p.denoise_ratio) && p.nfe == (200, 1000),
                    format!("denoise wall ratio {:.2}; NFE rflow {}, ddpm {}", p.denoise_ratio, p.nfe.0, p.nfe.1),
                )
            });
        }
        Some(Err(e)) => {
            let msg = format!("pipeline error: {e}");
            for (id, name) in [(6, "end-to-end synthesis"), (7, "ablation ordering"), (8, "baseline ordering"), (9, "step-count timing")] {
                ok &= run(id, name, f64::INFINITY, || Ok(Verdict::Fail(msg.clone())));
            }
        }
        None => {
            for (id, name) in [(6, "end-to-end synthesis"), (7, "ablation ordering"), (8, "baseline ordering"), (9, "step-count timing")] {
                ok &= run(id, name, f64::INFINITY, skip);
            }
        }
    }

    ok &= run(10, "autoencoder properties", 120.0, vae_properties);

    match first {
        Some(Ok(a)) => {
            ok &= run(11, "determinism", f64::INFINITY, || {
                let (_, _, toy_again) = toy_transport()?;
                let (dir, _keep) = workdir("run-b");
                let b = pipeline(&dir, 7)?;
                let mut diff: Vec<String> = a
                    .csvs
                    .iter()
                    .filter(|(k, v)| b.csvs.get(*k) != Some(v))
                    .map(|(k, _)| k.clone())
                    .collect();
                if toy_csv.as_deref() != Some(toy_again.as_str()) {
                    diff.push("toy".into());
                }
                check(
                    diff.is_empty(),
                    if diff.is_empty() {
                        format!("{} metric CSVs bit-identical across two runs", a.csvs.len() + 1)
                    } else {
                        format!("differing: {}", diff.join(", "))
                    },
                )
            });
        }
        Some(Err(_)) => ok &= run(11, "determinism", f64::INFINITY, || Ok(Verdict::Fail("pipeline did not complete".into()))),
        None => ok &= run(11, "determinism", f64::INFINITY, skip),
    }

    let strict = std::env::var("LATFLOW_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    println!("acceptance: {}", if ok { "all criteria pass or skip" } else { "some criteria FAIL" });
    if !ok && strict {
        std::process::exit(1);
    }
}
