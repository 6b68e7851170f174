use std::path::Path;

use latflow::schedulers::SchedulerConfig;
use latflow::train::RunConfig;

fn load(name: &str) -> RunConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    RunConfig::load(&path).unwrap()
}

#[test]
fn shipped_configs_parse_and_agree() {
    let (vae, rf, dd) = (load("vae.toml"), load("rflow.toml"), load("ddpm.toml"));
    assert!(matches!(rf.scheduler, SchedulerConfig::Rflow(s) if s.steps == 200));
    assert!(matches!(dd.scheduler, SchedulerConfig::Ddpm { train_timesteps: 1000, .. }));
    assert_eq!(rf.max_steps, Some(3000));
    assert_eq!((rf.max_steps, rf.unet.clone(), rf.batch_size), (dd.max_steps, dd.unet.clone(), dd.batch_size));
    assert_eq!(rf.manifest, vae.manifest);
    assert_eq!(rf.vae_checkpoint.as_deref(), Some(vae.out_dir.join("final.ckpt").as_path()));
}
