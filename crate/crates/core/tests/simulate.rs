mod common;

use std::collections::HashMap;

use chansim::corpus::{load_manifest, manifest_dir, validate_records, write_manifest, RecordKind};
use chansim::features::{frame, load_spectrogram, LogMel, Spectrogram, N_MELS};
use chansim::gan::{Generator, GeneratorArch};
use chansim::simulate::{
    assign_targets, content_correlation, content_preservation, convert_utterance, simulate_dataset, sim_channel_label,
    sim_utt_id,
};

use common::{make_corpus, tiny_config, tiny_encoder};

fn tiny_generator(d_c: usize) -> Generator {
    let cfg = tiny_config();
    Generator::new(GeneratorArch::from_config(&cfg.gan, d_c, cfg.features.layout), 0.02, 3).unwrap()
}

fn ramp(t: usize, phase: f32) -> Spectrogram {
    let v = (0..t * N_MELS)
        .map(|i| (((i / N_MELS) as f32 * 0.37 + phase).sin() * 0.5 + (i % N_MELS) as f32 * 1e-3).clamp(-1.0, 1.0))
        .collect();
    Spectrogram::new(v, t, 0.01, "u").unwrap()
}

#[test]
fn conversion_keeps_the_frame_count() {
    let g = tiny_generator(8);
    let enc = tiny_encoder(8);
    let src = ramp(387, 0.0);
    let tgt = frame(&ramp(200, 1.0));
    let out = convert_utterance(&g, &enc, &src, &tgt).unwrap();
    assert_eq!(out.n_frames, 387);
    assert_eq!(out.values.len(), 387 * N_MELS);
    let again = convert_utterance(&g, &enc, &src, &tgt).unwrap();
    assert_eq!(out.values, again.values);
    assert!(convert_utterance(&g, &enc, &src, &[]).is_err());
}

#[test]
fn target_assignment_is_seeded_and_uniform() {
    let a = assign_targets(1000, 5, 9).unwrap();
    assert_eq!(a, assign_targets(1000, 5, 9).unwrap());
    assert_ne!(a, assign_targets(1000, 5, 10).unwrap());
    let mut counts = [0usize; 5];
    for &i in &a {
        counts[i] += 1;
    }
    assert!(counts.iter().all(|&c| (150..250).contains(&c)), "{counts:?}");
    assert!(assign_targets(3, 0, 0).is_err());
}

#[test]
fn simulated_dataset_inherits_transcripts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let manifest = make_corpus(dir.path(), &cfg);
    let records = load_manifest(&manifest).unwrap();
    let base = manifest_dir(&manifest);
    let split = |label: &str, name: &str| {
        let mut rs: Vec<_> = records.iter().filter(|r| r.channel_label == label).cloned().collect();
        for r in &mut rs {
            r.audio_ref = base.join(&r.audio_ref).to_string_lossy().into_owned();
        }
        let p = dir.path().join(name);
        write_manifest(&p, &rs).unwrap();
        p
    };
    let src_path = split("clean", "src.jsonl");
    let tgt_path = split("webcam-ish", "tgt.jsonl");

    let g = tiny_generator(8);
    let enc = tiny_encoder(8);
    let mel = LogMel::new(&cfg.features).unwrap();
    let out = simulate_dataset(&g, &enc, &mel, &src_path, &tgt_path, &dir.path().join("sim"), 5).unwrap();
    let sims = load_manifest(&out).unwrap();
    validate_records(&sims).unwrap();
    let sources = load_manifest(&src_path).unwrap();
    let targets = load_manifest(&tgt_path).unwrap();
    assert_eq!(sims.len(), sources.len());

    let by_id: HashMap<_, _> = targets.iter().map(|t| (t.utt_id.clone(), t)).collect();
    let assignment = assign_targets(sources.len(), targets.len(), 5).unwrap();
    for ((sim, src), ti) in sims.iter().zip(&sources).zip(assignment) {
        assert_eq!(sim.utt_id, sim_utt_id(&src.utt_id));
        assert_eq!(sim.transcript, src.transcript);
        assert_eq!(sim.set_id, src.set_id);
        assert_eq!(sim.kind, RecordKind::Spectrogram);
        assert_eq!(sim.source_utt.as_deref(), Some(src.utt_id.as_str()));
        let tgt = by_id[sim.target_utt.as_deref().unwrap()];
        assert_eq!(tgt.utt_id, targets[ti].utt_id);
        assert_eq!(sim.channel_label, sim_channel_label(&tgt.channel_label));

        let a = load_spectrogram(src, &manifest_dir(&src_path), &mel).unwrap();
        let b = load_spectrogram(sim, &manifest_dir(&out), &mel).unwrap();
        assert_eq!(a.n_frames, b.n_frames);
    }

    let empty = dir.path().join("empty.jsonl");
    write_manifest(&empty, &[]).unwrap();
    assert!(simulate_dataset(&g, &enc, &mel, &src_path, &empty, &dir.path().join("sim2"), 5).is_err());
}

#[test]
fn correlation_oracle() {
    let a = ramp(50, 0.0);
    assert!((content_correlation(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    let neg = Spectrogram::new(a.values.iter().map(|v| -v).collect(), 50, 0.01, "n").unwrap();
    assert!((content_correlation(&a, &neg).unwrap() + 1.0).abs() < 1e-12);
    // An affine map of every bin keeps correlation at one.
    let aff = Spectrogram::new(a.values.iter().map(|v| 0.3 * v - 0.2).collect(), 50, 0.01, "f").unwrap();
    assert!((content_correlation(&a, &aff).unwrap() - 1.0).abs() < 1e-6);

    let flat = Spectrogram::new(vec![0.5; 50 * N_MELS], 50, 0.01, "c").unwrap();
    assert!(content_correlation(&a, &flat).is_err());

    let srcs = vec![ramp(60, 0.0), ramp(60, 2.0), ramp(60, 4.0)];
    let (paired, unrelated) = content_preservation(&srcs, &srcs).unwrap();
    assert!((paired - 1.0).abs() < 1e-12);
    assert!(unrelated < paired);
}
