mod common;

use std::fs;

use chansim::config::Config;
use chansim::error::Error;
use chansim::features::SpectrogramFrame;
use chansim::losses::weighted_total;
use chansim::nn::ParamStore;
use chansim::trainer::{lr_at, read_metrics, train, train_step, TargetItem, TrainData, TrainState};

use common::{make_corpus, tiny_config, tiny_encoder, train_data};

fn snapshot(store: &ParamStore<f32>) -> Vec<(String, Vec<f32>)> {
    store.named_tensors().map(|(n, t)| (n.to_string(), t.data().to_vec())).collect()
}

struct Fixture {
    _dir: tempfile::TempDir,
    cfg: Config,
    data: TrainData,
    encoder: chansim::encoder::EncoderModel,
    root: std::path::PathBuf,
}

fn fixture(n: usize) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let manifest = make_corpus(dir.path(), &cfg);
    let encoder = tiny_encoder(8);
    let data = train_data(&manifest, &cfg, &encoder, n);
    let root = dir.path().to_path_buf();
    Fixture {
        _dir: dir,
        cfg,
        data,
        encoder,
        root,
    }
}

fn batch(data: &TrainData) -> (Vec<&SpectrogramFrame>, Vec<TargetItem<'_>>) {
    let src = data.source_frames.iter().take(2).collect();
    let tgt = (0..2)
        .map(|i| TargetItem {
            frame: &data.target_frames[i],
            embedding: &data.target_embeddings[data.target_utt_of_frame[i]].vec,
        })
        .collect();
    (src, tgt)
}

#[test]
fn zero_learning_rate_leaves_every_parameter_unchanged() {
    let f = fixture(2);
    let mut state = TrainState::new(&f.cfg, 8, f.cfg.features.layout).unwrap();
    let before = [snapshot(&state.models.g.store), snapshot(&state.models.d.store), snapshot(&state.models.proj.store)];
    let (src, tgt) = batch(&f.data);
    let m = train_step(&mut state, &src, &tgt, &f.encoder, &f.cfg.train, 0.0).unwrap();
    assert!(m.losses.total.is_finite());
    let after = [snapshot(&state.models.g.store), snapshot(&state.models.d.store), snapshot(&state.models.proj.store)];
    assert_eq!(before, after);
}

#[test]
fn a_step_updates_every_network_and_never_the_encoder() {
    let f = fixture(2);
    let mut state = TrainState::new(&f.cfg, 8, f.cfg.features.layout).unwrap();
    let g0 = snapshot(&state.models.g.store);
    let d0 = snapshot(&state.models.d.store);
    let p0 = snapshot(&state.models.proj.store);
    let e0 = snapshot(&f.encoder.store);
    let (src, tgt) = batch(&f.data);
    train_step(&mut state, &src, &tgt, &f.encoder, &f.cfg.train, 1e-3).unwrap();
    assert_ne!(g0, snapshot(&state.models.g.store));
    assert_ne!(d0, snapshot(&state.models.d.store));
    assert_ne!(p0, snapshot(&state.models.proj.store));
    assert_eq!(e0, snapshot(&f.encoder.store));
}

#[test]
fn discriminator_update_touches_only_the_discriminator() {
    let f = fixture(2);
    let mut state = TrainState::new(&f.cfg, 8, f.cfg.features.layout).unwrap();
    let g0 = snapshot(&state.models.g.store);
    let p0 = snapshot(&state.models.proj.store);
    let d0 = snapshot(&state.models.d.store);
    let (src, _) = batch(&f.data);
    let layout = f.cfg.features.layout;
    let real = chansim::features::batch_tensor::<f32>(&src, layout);
    let fake = real.map(|v| -v);
    let chansim::trainer::GanBundle { d, .. } = &mut state.models;
    chansim::trainer::discriminator_update(d, &mut state.opt_d, &real, &fake, 1e-3).unwrap();
    assert_eq!(g0, snapshot(&state.models.g.store));
    assert_eq!(p0, snapshot(&state.models.proj.store));
    assert_ne!(d0, snapshot(&state.models.d.store));
}

#[test]
fn identical_seeds_give_identical_runs() {
    let f = fixture(4);
    let a = train(&f.cfg, &f.data, &f.encoder, &f.root.join("a"), None).unwrap();
    let b = train(&f.cfg, &f.data, &f.encoder, &f.root.join("b"), None).unwrap();
    assert_eq!(fs::read(&a.metrics_path).unwrap(), fs::read(&b.metrics_path).unwrap());
    assert_eq!(fs::read(&a.generator_path).unwrap(), fs::read(&b.generator_path).unwrap());
    let losses = |s: &TrainState| s.metrics.iter().map(|m| m.losses).collect::<Vec<_>>();
    assert_eq!(losses(&a.state), losses(&b.state));

    let mut other = f.cfg.clone();
    other.train.seed = 1;
    let c = train(&other, &f.data, &f.encoder, &f.root.join("c"), None).unwrap();
    assert_ne!(losses(&a.state), losses(&c.state));
}

#[test]
fn one_epoch_smoke_run_writes_its_artifacts() {
    let f = fixture(4);
    let out = f.root.join("run");
    let e0 = snapshot(&f.encoder.store);
    let res = train(&f.cfg, &f.data, &f.encoder, &out, None).unwrap();
    assert_eq!(res.checkpoints.len(), 1);
    assert!(res.checkpoints[0].is_file());
    for name in ["generator.ckpt", "discriminator.ckpt", "projection.ckpt", "metrics.csv"] {
        assert!(out.join(name).is_file(), "{name} missing");
    }
    let rows = read_metrics(&res.metrics_path).unwrap();
    let steps = f.data.steps_per_epoch(f.cfg.train.batch_size);
    assert!(!rows.is_empty());
    assert_eq!(rows.len(), steps);
    assert_eq!(rows.len(), res.state.step);
    for (i, (step, v)) in rows.iter().enumerate() {
        assert_eq!(*step, i);
        assert_eq!(weighted_total(v[1], v[2], v[3], v[4], f.cfg.train.lambda_ch), v[5]);
    }
    assert_eq!(e0, snapshot(&f.encoder.store));
}

#[test]
fn resuming_reproduces_the_uninterrupted_run() {
    let f = fixture(4);
    let mut cfg = f.cfg.clone();
    cfg.train.epochs = 4;
    cfg.train.checkpoint_every = 2;
    let full = train(&cfg, &f.data, &f.encoder, &f.root.join("full"), None).unwrap();
    assert_eq!(full.checkpoints.len(), 2);

    let mid = TrainState::load(&full.checkpoints[0]).unwrap();
    assert_eq!(mid.epoch, 2);
    let resumed = train(&cfg, &f.data, &f.encoder, &f.root.join("resumed"), Some(mid)).unwrap();
    assert_eq!(snapshot(&full.state.models.g.store), snapshot(&resumed.state.models.g.store));
    assert_eq!(snapshot(&full.state.models.d.store), snapshot(&resumed.state.models.d.store));
    assert_eq!(snapshot(&full.state.models.proj.store), snapshot(&resumed.state.models.proj.store));
    assert_eq!(fs::read(&full.metrics_path).unwrap(), fs::read(&resumed.metrics_path).unwrap());
}

#[test]
fn checkpoint_round_trip_preserves_state() {
    let f = fixture(2);
    let mut state = TrainState::new(&f.cfg, 8, f.cfg.features.layout).unwrap();
    let (src, tgt) = batch(&f.data);
    train_step(&mut state, &src, &tgt, &f.encoder, &f.cfg.train, 1e-3).unwrap();
    let path = f.root.join("state.ckpt");
    state.to_checkpoint("h").save(&path).unwrap();
    let back = TrainState::load(&path).unwrap();
    assert_eq!(back.step, state.step);
    assert_eq!(back.metrics, state.metrics);
    assert_eq!(snapshot(&back.models.g.store), snapshot(&state.models.g.store));
    assert_eq!(back.opt_g.step, state.opt_g.step);
    let moments = |s: &TrainState| s.opt_g.m.iter().map(|m| m.as_ref().map(|t| t.data().to_vec())).collect::<Vec<_>>();
    assert_eq!(moments(&back), moments(&state));
}

#[test]
fn a_non_finite_loss_aborts_with_a_dump() {
    let f = fixture(2);
    let mut state = TrainState::new(&f.cfg, 8, f.cfg.features.layout).unwrap();
    let id = state.models.g.store.ids().last().unwrap();
    state.models.g.store.get_mut(id).data_mut().fill(f32::NAN);
    let out = f.root.join("nan");
    let err = train(&f.cfg, &f.data, &f.encoder, &out, Some(state)).unwrap_err();
    match err {
        Error::Numeric { component, .. } => assert!(!component.is_empty()),
        other => panic!("expected a numeric error, got {other}"),
    }
    let dump = fs::read_to_string(out.join("nan_dump.json")).unwrap();
    assert!(dump.contains("\"step\": 0"));
}

#[test]
fn learning_rate_decays_linearly_over_the_second_half() {
    let mut c = Config::default().train;
    c.epochs = 10;
    assert_eq!(lr_at(&c, 0), c.lr);
    assert_eq!(lr_at(&c, 4), c.lr);
    assert_eq!(lr_at(&c, 5), c.lr);
    assert!((lr_at(&c, 9) - c.lr * 0.2).abs() < 1e-15);
    c.lr_decay = false;
    assert_eq!(lr_at(&c, 9), c.lr);
}
