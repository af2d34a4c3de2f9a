#![allow(dead_code)]

use std::path::{Path, PathBuf};

use chansim::config::Config;
use chansim::corpus::{gen_clean, load_manifest, manifest_dir, preset_profiles, synth_corpus};
use chansim::encoder::{EncoderArchMeta, EncoderModel};
use chansim::features::{load_record_frames, Layout, LogMel};
use chansim::trainer::TrainData;

/// Miniature widths so a step on full 129×128 frames takes well under a second.
pub fn tiny_config() -> Config {
    let mut c = Config::default();
    c.corpus.n_clean = 10;
    c.corpus.n_speakers = 3;
    c.corpus.held_out_fraction = 0.2;
    c.corpus.n_per_domain = 4;
    c.corpus.profiles = preset_profiles()
        .into_iter()
        .filter(|p| p.name == "clean" || p.name == "webcam-ish")
        .collect();
    c.gan.widths = vec![4, 8, 8];
    c.gan.n_res_blocks = 2;
    c.gan.disc_widths = vec![4, 8, 8, 8];
    c.gan.proj_dim = 8;
    c.train.n_patches = 16;
    c.train.batch_size = 2;
    c.train.epochs = 1;
    c.train.checkpoint_every = 1;
    c
}

pub fn tiny_encoder(d_c: usize) -> EncoderModel {
    EncoderModel::new(
        EncoderArchMeta {
            stage_channels: vec![4, 8],
            d_c,
            labels: vec!["a".into(), "b".into()],
            layout: Layout::TimeMel,
        },
        7,
    )
    .unwrap()
}

/// Clean corpus plus its two-channel rendering. Returns the channel manifest.
pub fn make_corpus(dir: &Path, cfg: &Config) -> PathBuf {
    let clean = gen_clean(&cfg.corpus.clean_spec(), &dir.join("clean")).unwrap();
    let records = load_manifest(&clean).unwrap();
    synth_corpus(&records, &manifest_dir(&clean), &cfg.corpus.profiles, &dir.join("corpus")).unwrap()
}

/// `n` utterances of each channel, without any split.
pub fn train_data(manifest: &Path, cfg: &Config, encoder: &EncoderModel, n: usize) -> TrainData {
    let records = load_manifest(manifest).unwrap();
    let pick = |label: &str| -> Vec<_> { records.iter().filter(|r| r.channel_label == label).take(n).cloned().collect() };
    let mel = LogMel::new(&cfg.features).unwrap();
    let dir = manifest_dir(manifest);
    let src = load_record_frames(&pick(&cfg.corpus.source_channel), &dir, &mel).unwrap();
    let tgt = load_record_frames(&pick(&cfg.corpus.target_channel), &dir, &mel).unwrap();
    TrainData::new(src, tgt, encoder).unwrap()
}
