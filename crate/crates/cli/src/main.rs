use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use chansim::analysis::{analyze_embeddings, emit_report, silhouette, ProjectionMethod};
use chansim::config::Config;
use chansim::corpus::{gen_clean, load_manifest, manifest_dir, synth_corpus};
use chansim::encoder::{pretrain_encoder, write_encoder_metrics, EncoderData, EncoderModel};
use chansim::features::{featurize_manifest, load_spectrogram, LogMel};
use chansim::gan::Generator;
use chansim::simulate::{evaluate_simulation, simulate_dataset};
use chansim::trainer::{train, TrainData, TrainState};

#[derive(Parser)]
#[command(name = "chansim", version, about = "Channel-conditioned spectrogram simulation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Pca,
    UmapLike,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a synthetic clean corpus from the [corpus] section.
    GenClean {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Pass clean utterances through every channel profile of a config.
    SynthCorpus {
        #[arg(long)]
        clean: PathBuf,
        /// Config file whose [corpus] profiles are applied.
        #[arg(long)]
        profiles: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Replaces the noise seed of profile i with N + i.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Cache log-mel spectrograms of a manifest as portable arrays.
    Featurize {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Pretrain the channel encoder by channel classification.
    PretrainEncoder {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint path; encoder_metrics.csv is written beside it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the generator, discriminator and projection heads.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Corpus manifest holding both domains.
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Convert every source utterance toward a randomly drawn target utterance.
    Simulate {
        #[arg(long)]
        generator: PathBuf,
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Project per-frame channel embeddings to 2D.
    AnalyzeEmbeddings {
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        per_channel: usize,
        #[arg(long, value_enum, default_value = "pca")]
        method: Method,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Summarize a run directory into report/.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    match path {
        Some(p) => Ok(Config::load(p)?),
        None => Ok(Config::default()),
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenClean { config, out, seed } => {
            let cfg = load_config(config.as_deref())?;
            let mut spec = cfg.corpus.clean_spec();
            if let Some(s) = seed {
                spec.seed = s;
            }
            let path = gen_clean(&spec, &out)?;
            println!("{}", path.display());
        }
        Cmd::SynthCorpus { clean, profiles, out, seed } => {
            let cfg = Config::load(&profiles)?;
            let mut bank = cfg.corpus.profiles.clone();
            if bank.len() < 2 {
                bail!("{}: need at least two channel profiles", profiles.display());
            }
            if let Some(s) = seed {
                for (i, p) in bank.iter_mut().enumerate() {
                    p.seed = s.wrapping_add(i as u64);
                }
            }
            let records = load_manifest(&clean)?;
            let path = synth_corpus(&records, &manifest_dir(&clean), &bank, &out)?;
            println!("{}", path.display());
        }
        Cmd::Featurize { manifest, out, config } => {
            let cfg = load_config(config.as_deref())?;
            let path = featurize_manifest(&manifest, &out, &LogMel::new(&cfg.features)?)?;
            println!("{}", path.display());
        }
        Cmd::PretrainEncoder { corpus, config, out } => {
            let cfg = Config::load(&config)?;
            let records = load_manifest(&corpus)?;
            let data = EncoderData::load(&records, &manifest_dir(&corpus), &cfg)?;
            let (model, log) = pretrain_encoder(&data, &cfg.encoder, cfg.features.layout)?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            }
            model.save(&out, &cfg.hash())?;
            let metrics = out.with_file_name(chansim::analysis::ENCODER_LOG);
            write_encoder_metrics(&metrics, &log)?;
            if let Some(last) = log.last() {
                info!("final val_acc {:.4} val_loss {:.4}", last.val_acc, last.val_loss);
            }
            println!("{}", out.display());
        }
        Cmd::Train { config, encoder, out, resume, corpus } => {
            let cfg = Config::load(&config)?;
            let enc = EncoderModel::load(&encoder)?;
            let data = TrainData::from_manifest(&cfg, &corpus, &enc)?;
            let state = resume.as_deref().map(TrainState::load).transpose()?;
            let outcome = train(&cfg, &data, &enc, &out, state)?;
            info!("trained {} steps", outcome.state.step);
            println!("{}", outcome.generator_path.display());
        }
        Cmd::Simulate { generator, encoder, source, target, out, seed, config } => {
            let cfg = load_config(config.as_deref())?;
            let g = Generator::load(&generator)?;
            let enc = EncoderModel::load(&encoder)?;
            let mel = LogMel::new(&cfg.features)?;
            let manifest = simulate_dataset(&g, &enc, &mel, &source, &target, &out, seed)?;

            let load = |m: &Path| -> Result<Vec<_>> {
                let dir = manifest_dir(m);
                load_manifest(m)?
                    .iter()
                    .map(|r| load_spectrogram(r, &dir, &mel).map_err(Into::into))
                    .collect()
            };
            let (sources, sims, targets) = (load(&source)?, load(&manifest)?, load(&target)?);
            if sources.len() >= 2 {
                let eval = evaluate_simulation(&enc, &sources, &sims, &targets)?;
                info!("transfer ratio {:.3}, content {:.3} vs {:.3}", eval.transfer_ratio, eval.content_corr_paired, eval.content_corr_unrelated);
                write_json(&out.join("metrics.json"), &eval)?;
            }
            println!("{}", manifest.display());
        }
        Cmd::AnalyzeEmbeddings { encoder, corpus, out, per_channel, method, config } => {
            let cfg = load_config(config.as_deref())?;
            let enc = EncoderModel::load(&encoder)?;
            let records = load_manifest(&corpus)?;
            let method = match method {
                Method::Pca => ProjectionMethod::Pca,
                Method::UmapLike => ProjectionMethod::UmapLike,
            };
            let mel = LogMel::new(&cfg.features)?;
            let points = analyze_embeddings(&enc, &records, &manifest_dir(&corpus), &mel, per_channel, method)?;
            write_json(&out.join("projection.json"), &points)?;
            match silhouette(&points) {
                Ok(s) => println!("silhouette {s:.4}"),
                Err(e) => info!("silhouette skipped: {e}"),
            }
        }
        Cmd::Report { run } => {
            let dir = emit_report(&run)?;
            println!("{}", dir.display());
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    run(Cli::parse().cmd)
}
