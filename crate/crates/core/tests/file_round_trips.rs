use hyfuse_core::data::{
    generate_synthetic, load_entities, load_sequence_corpus, load_triples, save_sequence_corpus, save_triples,
    synthetic_link, synthetic_ner, synthetic_re, ImageTensor, SequenceTask, SyntheticSpec, SyntheticTask,
};
use hyfuse_core::encoders::ModelConfig;
use hyfuse_core::model::{HybridModel, TaskHead};
use hyfuse_core::training_eval::{load_checkpoint, save_checkpoint};
use hyfuse_core::Error;

#[test]
fn generated_link_directory_loads_back() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec::default();
    let written = generate_synthetic(SyntheticTask::Link, 9, &spec, dir.path()).unwrap();
    assert!(written.iter().all(|p| p.exists()));

    let synth = synthetic_link(9, &spec).unwrap();
    let triples = load_triples(&dir.path().join("train.tsv")).unwrap();
    assert_eq!(triples.to_tsv(), synth.triples.to_tsv());

    let entities = load_entities(&dir.path().join("entities.tsv"), dir.path(), &spec.image).unwrap();
    assert_eq!(entities.len(), spec.entities);
    for (i, imgs) in synth.images.iter().enumerate() {
        let got = &entities.get(i).images;
        assert_eq!(got.len(), imgs.len());
        for (a, b) in got.iter().zip(imgs) {
            // stored as f32
            let diff = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(diff < 1e-6, "image {i} differs by {diff}");
        }
    }
}

#[test]
fn triples_and_corpora_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec::default();
    let triples = synthetic_link(1, &spec).unwrap().triples;
    let path = dir.path().join("t.tsv");
    save_triples(&triples, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let loaded = load_triples(&path).unwrap();
    assert_eq!(loaded.to_tsv(), triples.to_tsv());
    save_triples(&loaded, &path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);

    for (task, corpus) in [
        (SequenceTask::Re, synthetic_re(2, &spec).unwrap()),
        (SequenceTask::Ner, synthetic_ner(3, &spec).unwrap()),
    ] {
        let path = dir.path().join("c.tsv");
        save_sequence_corpus(&corpus, &path).unwrap();
        assert_eq!(load_sequence_corpus(&path, task, true).unwrap(), corpus);
    }
}

#[test]
fn image_file_round_trip_and_bad_magic() {
    let dir = tempfile::tempdir().unwrap();
    let img = ImageTensor::from_vec(2, 3, 1, vec![0.5, -1.0, 0.25, 2.0, 0.0, 1.5]).unwrap();
    let path = dir.path().join("x.mkgi");
    img.save(&path).unwrap();
    assert_eq!(ImageTensor::load(&path).unwrap(), img);
    std::fs::write(&path, b"NOPE\0\0\0\0").unwrap();
    assert!(matches!(ImageTensor::load(&path), Err(Error::Format(_))));
}

#[test]
fn checkpoint_restores_identical_model() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ModelConfig {
        d: 8,
        heads: 2,
        d_m: 16,
        ..ModelConfig::default()
    };
    let a = HybridModel::new(cfg.clone(), 30, 5, TaskHead::Link, 1).unwrap();
    let mut b = HybridModel::new(cfg, 30, 5, TaskHead::Link, 2).unwrap();
    assert_ne!(a.store, b.store);
    let path = dir.path().join("m.mkgc");
    save_checkpoint(&a.store, &path).unwrap();
    load_checkpoint(&mut b.store, &path).unwrap();
    assert_eq!(a.store, b.store);

    let mut other = HybridModel::new(ModelConfig::default(), 30, 5, TaskHead::Link, 1).unwrap();
    assert!(load_checkpoint(&mut other.store, &path).is_err());
}

#[test]
fn missing_files_are_io_errors() {
    let dir = tempfile::tempdir().unwrap();
    let absent = dir.path().join("absent.tsv");
    assert!(matches!(load_triples(&absent), Err(Error::Io { .. })));
    let spec = SyntheticSpec::default().image;
    assert!(matches!(load_entities(&absent, dir.path(), &spec), Err(Error::Io { .. })));
}
