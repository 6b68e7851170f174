use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;

use super::data::{cache_latents, latent_of, load_training_volumes, CaseLatents, LatentSet};
use super::{
    read_csv, write_csv, AdamW, Checkpoint, LatentMode, LossRow, ModelCard, ModelKind, RunConfig, ValRow,
};
use crate::error::{Error, Result};
use crate::rng::{stream, tag};
use crate::schedulers::{ddpm_loss, rflow_loss, DdpmSchedule, RFlowSchedule, SchedulerConfig};
use crate::synthdata::{Manifest, Split};
use crate::tensor::{ops, BoundParams, Parameters, Tape, Tensor, Var};
use crate::vae::{Role, Vae};
use crate::velocity_net::{ConditioningLatents, UNet};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub losses: Vec<LossRow>,
    pub val: Vec<ValRow>,
    pub steps: usize,
    pub latent_scale: Option<f64>,
}

struct Run<'a> {
    cfg: &'a RunConfig,
    card: ModelCard,
    latent_scale: Option<f64>,
    items: usize,
}

impl Run<'_> {
    fn execute<F, V>(self, init: Parameters, mut loss_fn: F, mut val_fn: V) -> Result<TrainOutcome>
    where
        F: FnMut(&Tape, &BoundParams, &[usize], usize, usize) -> Result<Var>,
        V: FnMut(&Parameters) -> Result<f64>,
    {
        let cfg = self.cfg;
        let out = &cfg.out_dir;
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let loss_path = out.join("loss.csv");
        let val_path = out.join("val.csv");
        let (mut params, mut opt, start, mut rows, mut vals) = match &cfg.resume {
            Some(path) => {
                let ck = Checkpoint::load(path, Some(cfg.optimizer))?;
                if ck.card.kind != self.card.kind {
                    return Err(Error::CheckpointMismatch(format!(
                        "resuming a {:?} run from a {:?} checkpoint",
                        self.card.kind, ck.card.kind
                    )));
                }
                init.check_compatible(&ck.params)?;
                let opt = ck
                    .optimizer
                    .ok_or_else(|| Error::CheckpointMismatch("checkpoint has no optimizer state".into()))?;
                let step = ck.step as usize;
                let rows: Vec<LossRow> = read_csv(&loss_path).unwrap_or_default();
                let vals: Vec<ValRow> = read_csv(&val_path).unwrap_or_default();
                (
                    ck.params,
                    opt,
                    step,
                    rows.into_iter().filter(|r| r.step <= step).collect(),
                    vals.into_iter().filter(|r| r.step <= step).collect(),
                )
            }
            None => (init, AdamW::new(cfg.optimizer), 0, Vec::new(), Vec::new()),
        };
        let (per_epoch, total) = cfg.schedule(self.items);
        let batch = cfg.batch_size.min(self.items);
        let wall0 = rows.last().map_or(0, |r| r.wall_ms);
        let clock = Instant::now();
        let mut order: Vec<usize> = Vec::new();
        let mut order_epoch = usize::MAX;

        let save = |params: &Parameters, opt: &AdamW, step: usize, path: &Path, rows: &[LossRow], vals: &[ValRow]| {
            Checkpoint {
                card: self.card.clone(),
                params: params.clone(),
                step: step as u64,
                optimizer: Some(opt.clone()),
                latent_scale: self.latent_scale,
            }
            .save(path)?;
            write_csv(&loss_path, rows)?;
            if cfg.val_every > 0 {
                write_csv(&val_path, vals)?;
            }
            Ok::<_, Error>(())
        };

        for s in start..total {
            let epoch = s / per_epoch;
            if epoch != order_epoch {
                order = (0..self.items).collect();
                order.shuffle(&mut stream(cfg.seed, &[tag("order"), epoch as u64]));
                order_epoch = epoch;
            }
            let pos = s % per_epoch;
            let tape = Tape::new();
            let bound = params.bind(&tape);
            let loss = loss_fn(&tape, &bound, &order[pos * batch..(pos + 1) * batch], epoch, s)?;
            let value = loss.item().ok_or_else(|| Error::NotScalar(loss.shape()))?;
            if !value.is_finite() {
                return Err(Error::ConfigInvalid(format!("loss diverged at step {}", s + 1)));
            }
            loss.backward()?;
            params.zero_grad();
            params.absorb_grads(&bound)?;
            opt.config.lr = cfg.lr_schedule.at(cfg.optimizer.lr, s, total);
            opt.step(&mut params)?;
            let step = s + 1;
            rows.push(LossRow {
                step,
                epoch,
                loss: value,
                wall_ms: wall0 + clock.elapsed().as_millis() as u64,
            });
            if cfg.val_every > 0 && step % cfg.val_every == 0 {
                vals.push(ValRow { step, loss: val_fn(&params)? });
            }
            if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
                let p = out.join("ckpt").join(format!("step-{step:06}.ckpt"));
                save(&params, &opt, step, &p, &rows, &vals)?;
            }
        }
        let final_checkpoint = out.join("final.ckpt");
        save(&params, &opt, total.max(start), &final_checkpoint, &rows, &vals)?;
        Ok(TrainOutcome {
            final_checkpoint,
            losses: rows,
            val: vals,
            steps: total.max(start),
            latent_scale: self.latent_scale,
        })
    }
}

/// Trains the autoencoder on every training volume of all three sequences.
pub fn train_vae(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let manifest = Manifest::load(&cfg.manifest)?;
    let vae = Vae::new(cfg.vae)?;
    let as_tensors = |split| -> Result<Vec<Tensor>> {
        let cases = load_training_volumes(&manifest, split)?;
        Ok(cases
            .iter()
            .flat_map(|c| [&c.t1w, &c.flair, &c.t1c].map(|v| v.to_tensor()))
            .collect())
    };
    let train = as_tensors(Split::Train)?;
    let [_, _, d, h, w] = train[0].shape() else {
        return Err(Error::ShapeMismatch("volumes must be 3-D".into()));
    };
    vae.config.latent_extents([*d, *h, *w])?;
    let val = if cfg.val_every > 0 { as_tensors(Split::Val)? } else { Vec::new() };
    let init = vae.init_params(&mut stream(cfg.seed, &[tag("vae-init")]))?;
    let beta = cfg.vae.beta_kl;
    let run = Run {
        cfg,
        card: ModelCard {
            kind: ModelKind::Vae,
            vae: cfg.vae,
            unet: None,
            scheduler: None,
            vae_checkpoint: None,
            seed: cfg.seed,
        },
        latent_scale: None,
        items: train.len(),
    };
    let stack = |vols: &[Tensor], idx: &[usize]| Tensor::stack_batch(&idx.iter().map(|&i| &vols[i]).collect::<Vec<_>>());
    run.execute(
        init,
        |tape, bound, idx, _, s| {
            let x = stack(&train, idx)?;
            vae.elbo_loss(tape, bound, &x, beta, &mut stream(cfg.seed, &[tag("vae-step"), s as u64]))
        },
        |params| {
            let idx: Vec<usize> = (0..val.len()).collect();
            let mut total = 0.0;
            for (k, chunk) in idx.chunks(cfg.batch_size).enumerate() {
                let tape = Tape::new();
                let bound = params.bind_frozen(&tape);
                let x = stack(&val, chunk)?;
                let l = vae.elbo_loss(&tape, &bound, &x, beta, &mut stream(cfg.seed, &[tag("val"), k as u64]))?;
                total += l.item().unwrap_or(f64::NAN) * chunk.len() as f64;
            }
            Ok(total / val.len().max(1) as f64)
        },
    )
}

/// Rectified-flow training of the velocity network on cached latents.
pub fn train_rflow(cfg: &RunConfig) -> Result<TrainOutcome> {
    let SchedulerConfig::Rflow(sched) = cfg.scheduler else {
        return Err(Error::ConfigInvalid("train_rflow needs an rflow scheduler".into()));
    };
    train_latent(cfg, ModelKind::Rflow, Objective::Rflow(sched))
}

/// Epsilon-prediction DDPM baseline on the same network and data. A config
/// whose scheduler is rflow falls back to the default linear DDPM schedule.
pub fn train_ddpm(cfg: &RunConfig) -> Result<TrainOutcome> {
    let mut cfg = cfg.clone();
    if let SchedulerConfig::Rflow(_) = cfg.scheduler {
        cfg.scheduler = SchedulerConfig::default_ddpm();
    }
    let SchedulerConfig::Ddpm { train_timesteps, beta_start, beta_end } = cfg.scheduler else {
        unreachable!()
    };
    let sched = DdpmSchedule::linear(train_timesteps, beta_start, beta_end)?;
    train_latent(&cfg, ModelKind::Ddpm, Objective::Ddpm(sched))
}

enum Objective {
    Rflow(RFlowSchedule),
    Ddpm(DdpmSchedule),
}

impl Objective {
    fn loss<R: Rng>(
        &self,
        tape: &Tape,
        unet: &UNet,
        bound: &BoundParams,
        z0: &Tensor,
        cond: Tensor,
        rng: &mut R,
    ) -> Result<Var> {
        let net = |zt: &Var, ts: &[f64]| {
            let c = tape.constant(cond);
            unet.forward(bound, &ops::concat_channels(&[zt, &c])?, ts)
        };
        match self {
            Objective::Rflow(s) => rflow_loss(tape, net, z0, s, rng),
            Objective::Ddpm(s) => ddpm_loss(tape, net, z0, s, rng),
        }
    }
}

/// Loads the autoencoder named by `path` and checks its weights.
pub fn load_vae(path: &Path) -> Result<(Vae, Checkpoint)> {
    let ck = Checkpoint::load(path, None)?;
    if ck.card.kind != ModelKind::Vae {
        return Err(Error::CheckpointMismatch(format!("{} is not an autoencoder checkpoint", path.display())));
    }
    let vae = Vae::new(ck.card.vae)?;
    ck.expect_params(&vae.init_params(&mut stream(0, &[]))?)?;
    Ok((vae, ck))
}

/// Latent batches: target and stacked conditions, scaled.
pub(crate) struct LatentBatcher<'a> {
    pub cases: &'a [CaseLatents],
    pub scale: f64,
    pub seed: u64,
    pub mode: LatentMode,
}

impl LatentBatcher<'_> {
    fn draw(&self, c: &CaseLatents, role: Role, epoch: Option<usize>) -> Tensor {
        match (self.mode, epoch) {
            (LatentMode::Sample, Some(e)) => {
                let mut rng = stream(self.seed, &[tag("latent"), e as u64, c.index as u64, tag(role.as_str())]);
                latent_of(c.get(role), self.scale, Some(&mut rng))
            }
            _ => latent_of(c.get(role), self.scale, None),
        }
    }

    /// `(z0, cond)` for `idx`; `epoch = None` uses posterior means.
    pub fn batch(&self, idx: &[usize], epoch: Option<usize>, masks: &[(bool, bool)]) -> Result<(Tensor, Tensor)> {
        let mut z0 = Vec::with_capacity(idx.len());
        let mut cond = Vec::with_capacity(idx.len());
        for (k, &i) in idx.iter().enumerate() {
            let c = &self.cases[i];
            z0.push(self.draw(c, Role::T1c, epoch));
            let (mt, mf) = masks.get(k).copied().unwrap_or((false, false));
            let cl = ConditioningLatents::new(self.draw(c, Role::T1w, epoch), self.draw(c, Role::Flair, epoch))?;
            cond.push(cl.masked(mt, mf).stacked()?);
        }
        Ok((
            Tensor::stack_batch(&z0.iter().collect::<Vec<_>>())?,
            Tensor::stack_batch(&cond.iter().collect::<Vec<_>>())?,
        ))
    }
}

pub(crate) fn check_unet(unet: &UNet, vae: &Vae, extents: &[usize]) -> Result<()> {
    let l = vae.config.latent_channels;
    let c = &unet.config;
    if c.in_channels != 3 * l || c.out_channels != l {
        return Err(Error::ConfigInvalid(format!(
            "network expects {} -> {} channels but latents have {l} (input needs {})",
            c.in_channels,
            c.out_channels,
            3 * l
        )));
    }
    c.check_extents(extents)
}

fn train_latent(cfg: &RunConfig, kind: ModelKind, objective: Objective) -> Result<TrainOutcome> {
    cfg.validate()?;
    let vae_path = cfg
        .vae_checkpoint
        .as_ref()
        .ok_or_else(|| Error::ConfigInvalid("vae_checkpoint is required for latent training".into()))?;
    let (vae, vck) = load_vae(vae_path)?;
    let manifest = Manifest::load(&cfg.manifest)?;
    let cache = cfg.latent_cache.clone().unwrap_or_else(|| cfg.out_dir.join("latents"));
    let entries = manifest.split(Split::Train);
    if entries.is_empty() {
        return Err(Error::DataMissing("no training cases in manifest".into()));
    }
    let train = cache_latents(&vae, &vck.params, &manifest, &entries, &cache)?;
    let scale = train.unit_scale()?;
    let val = if cfg.val_every > 0 {
        cache_latents(&vae, &vck.params, &manifest, &manifest.split(Split::Val), &cache)?
    } else {
        LatentSet { cases: Vec::new() }
    };
    let unet = UNet::new(cfg.unet.clone())?;
    check_unet(&unet, &vae, &train.cases[0].t1c.mu.shape()[2..])?;
    let init = unet.init_params(&mut stream(cfg.seed, &[tag("unet-init")]))?;
    let batcher = LatentBatcher { cases: &train.cases, scale, seed: cfg.seed, mode: cfg.latents };
    let val_batcher = LatentBatcher { cases: &val.cases, scale, seed: cfg.seed, mode: LatentMode::Mean };
    let run = Run {
        cfg,
        card: ModelCard {
            kind,
            vae: vae.config,
            unet: Some(cfg.unet.clone()),
            scheduler: Some(cfg.scheduler),
            vae_checkpoint: Some(std::fs::canonicalize(vae_path).unwrap_or_else(|_| vae_path.clone())),
            seed: cfg.seed,
        },
        latent_scale: Some(scale),
        items: train.cases.len(),
    };
    let p = cfg.cond_dropout;
    run.execute(
        init,
        |tape, bound, idx, epoch, s| {
            let masks: Vec<(bool, bool)> = if p > 0.0 {
                let mut r = stream(cfg.seed, &[tag("cond-drop"), s as u64]);
                idx.iter().map(|_| (r.random_bool(p), r.random_bool(p))).collect()
            } else {
                Vec::new()
            };
            let (z0, cond) = batcher.batch(idx, Some(epoch), &masks)?;
            objective.loss(tape, &unet, bound, &z0, cond, &mut stream(cfg.seed, &[tag("loss"), s as u64]))
        },
        |params| {
            let idx: Vec<usize> = (0..val.cases.len()).collect();
            let mut total = 0.0;
            for (k, chunk) in idx.chunks(cfg.batch_size).enumerate() {
                let tape = Tape::new();
                let bound = params.bind_frozen(&tape);
                let (z0, cond) = val_batcher.batch(chunk, None, &[])?;
                let mut rng = stream(cfg.seed, &[tag("val"), k as u64]);
                let l = objective.loss(&tape, &unet, &bound, &z0, cond, &mut rng)?;
                total += l.item().unwrap_or(f64::NAN) * chunk.len() as f64;
            }
            Ok(total / val.cases.len().max(1) as f64)
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{write_dataset, PhantomSpec};
    use crate::velocity_net::UNetConfig;

    fn fixture(dir: &Path) -> RunConfig {
        let spec = PhantomSpec { extents: [8; 3], lesion_radius: (1.0, 1.5), seed: 5, ..Default::default() };
        write_dataset(&spec, &dir.join("data"), (8, 2, 2), false).unwrap();
        let mut cfg = RunConfig {
            seed: 9,
            epochs: 100,
            max_steps: Some(30),
            batch_size: 4,
            manifest: dir.join("data/manifest.json"),
            out_dir: dir.join("vae"),
            unet: UNetConfig::tiny(4),
            ..Default::default()
        };
        cfg.optimizer.lr = 3e-3;
        cfg.optimizer.weight_decay = 0.0;
        cfg
    }

    fn losses(rows: &[LossRow]) -> Vec<(usize, usize, u64)> {
        rows.iter().map(|r| (r.step, r.epoch, r.loss.to_bits())).collect()
    }

    fn head_tail(rows: &[LossRow], k: usize) -> (f64, f64) {
        let mean = |r: &[LossRow]| r.iter().map(|x| x.loss).sum::<f64>() / r.len() as f64;
        (mean(&rows[..k]), mean(&rows[rows.len() - k..]))
    }

    #[test]
    fn vae_smoke_determinism_and_resume() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = fixture(dir.path());
        let a = train_vae(&cfg).unwrap();
        assert_eq!(a.steps, 30);
        let (first, last) = head_tail(&a.losses, 5);
        assert!(last < first, "{first} -> {last}");

        let b = train_vae(&RunConfig { out_dir: dir.path().join("vae2"), ..cfg.clone() }).unwrap();
        assert_eq!(losses(&a.losses), losses(&b.losses));

        // interrupted at 12, resumed to 30
        let part = RunConfig { out_dir: dir.path().join("vae3"), checkpoint_every: 12, ..cfg.clone() };
        train_vae(&RunConfig { max_steps: Some(12), ..part.clone() }).unwrap();
        let resumed = train_vae(&RunConfig {
            resume: Some(part.out_dir.join("ckpt/step-000012.ckpt")),
            ..part.clone()
        })
        .unwrap();
        assert_eq!(losses(&resumed.losses), losses(&a.losses));
        let pa = Checkpoint::load(&a.final_checkpoint, None).unwrap().params;
        let pr = Checkpoint::load(&resumed.final_checkpoint, None).unwrap().params;
        assert_eq!(pa, pr);
        let log: Vec<LossRow> = read_csv(&part.out_dir.join("loss.csv")).unwrap();
        assert_eq!(losses(&log), losses(&a.losses));
    }

    #[test]
    fn latent_training_smoke_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = fixture(dir.path());
        cfg.max_steps = Some(10);
        let vae = train_vae(&cfg).unwrap();
        let run = |name: &str, sched: SchedulerConfig| {
            let mut c = cfg.clone();
            c.out_dir = dir.path().join(name);
            c.vae_checkpoint = Some(vae.final_checkpoint.clone());
            c.latent_cache = Some(dir.path().join("cache"));
            c.max_steps = Some(50);
            c.val_every = 25;
            c.scheduler = sched;
            c
        };
        let rf = train_rflow(&run("rf", SchedulerConfig::default())).unwrap();
        let (first, last) = head_tail(&rf.losses, 10);
        assert!(last < first, "{first} -> {last}");
        assert_eq!(rf.val.len(), 2);
        assert!(rf.latent_scale.unwrap() > 0.0);
        let again = train_rflow(&run("rf2", SchedulerConfig::default())).unwrap();
        assert_eq!(losses(&rf.losses), losses(&again.losses));

        let dd = train_ddpm(&run("dd", SchedulerConfig::default())).unwrap();
        let card = Checkpoint::load(&dd.final_checkpoint, None).unwrap().card;
        assert_eq!(card.kind, ModelKind::Ddpm);
        assert!(matches!(card.scheduler, Some(SchedulerConfig::Ddpm { .. })));
        assert!(matches!(
            train_rflow(&run("bad", SchedulerConfig::default_ddpm())),
            Err(Error::ConfigInvalid(_))
        ));
        let mut missing = run("nov", SchedulerConfig::default());
        missing.vae_checkpoint = None;
        assert!(matches!(train_rflow(&missing), Err(Error::ConfigInvalid(_))));
        missing.vae_checkpoint = Some(rf.final_checkpoint.clone());
        assert!(matches!(train_rflow(&missing), Err(Error::CheckpointMismatch(_))));
    }

    #[test]
    fn missing_manifest_is_data_missing() {
        let cfg = RunConfig { manifest: PathBuf::from("/nonexistent/manifest.json"), ..Default::default() };
        assert!(matches!(train_vae(&cfg), Err(Error::DataMissing(_))));
    }

    #[test]
    fn batch_gradient_is_mean_of_item_gradients() {
        let unet = UNet::new(UNetConfig::tiny(4)).unwrap();
        let params = unet.init_params(&mut stream(1, &[])).unwrap();
        // non-zero head so the loss reaches every parameter
        let mut params = params;
        for (n, t) in params.iter_mut() {
            if n.starts_with("out.conv") {
                t.data_mut().iter_mut().enumerate().for_each(|(i, x)| *x = 0.01 * ((i % 7) as f64 - 3.0));
            }
        }
        let mut rng = stream(2, &[]);
        let x = Tensor::randn([3, 12, 2, 2, 2], 1.0, &mut rng);
        let target = Tensor::randn([3, 4, 2, 2, 2], 1.0, &mut rng);
        let times = [0.2, 0.5, 0.9];
        let grads = |x: &Tensor, target: &Tensor, ts: &[f64]| {
            let tape = Tape::new();
            let bound = params.bind(&tape);
            let out = unet.forward(&bound, &tape.constant(x.clone()), ts).unwrap();
            ops::mse_loss(&out, &tape.constant(target.clone())).unwrap().backward().unwrap();
            let mut p = params.clone();
            p.zero_grad();
            p.absorb_grads(&bound).unwrap();
            p
        };
        let whole = grads(&x, &target, &times);
        let parts: Vec<Parameters> = (0..3)
            .map(|b| grads(&x.batch_item(b).unwrap(), &target.batch_item(b).unwrap(), &times[b..=b]))
            .collect();
        for (name, t) in whole.iter() {
            let g = t.grad().unwrap();
            for (i, gi) in g.iter().enumerate() {
                let mean = parts.iter().map(|p| p.get(name).unwrap().grad().unwrap()[i]).sum::<f64>() / 3.0;
                assert!((gi - mean).abs() < 1e-10, "{name}[{i}]: {gi} vs {mean}");
            }
        }
    }
}
