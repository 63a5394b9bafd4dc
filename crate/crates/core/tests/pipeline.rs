use gaitmorph::gaitdata::{generate_dataset, load_dataset, normalize, save_dataset, GeneratorConfig};
use gaitmorph::transport::apply_transport_morph_with;
use gaitmorph::{
    apply_transport_morph, compute_fgd, learn_transport_maps, train_model, Embedder, Error, FitConfig, GaitModel,
    ModelConfig, MorphMode, SkeletonSequence, TrainConfig, TransportMapSet, VariationLabel,
};

fn small_model(data: &[SkeletonSequence], steps: u64) -> GaitModel {
    let cfg = ModelConfig {
        frames: 16,
        enc_channels: vec![8],
        dec_channels: vec![8],
        n_latent: 8,
        n_code: 4,
        ..Default::default()
    };
    let fit = FitConfig { steps, batch_size: 4, codebook_size: 8, seed: 0 };
    train_model(&cfg, &TrainConfig::default(), &fit, data, |_, _| {}).unwrap()
}

fn dataset() -> Vec<SkeletonSequence> {
    let gen = GeneratorConfig {
        subjects: 3,
        walks_per_variation: 2,
        variations: vec![VariationLabel::normal(0.0), VariationLabel::normal(90.0)],
        frames: 16,
        ..Default::default()
    };
    generate_dataset(&gen).unwrap().sequences.iter().map(|s| normalize(s).unwrap()).collect()
}

#[test]
fn checkpoint_and_maps_round_trip_through_files() {
    let data = dataset();
    let model = small_model(&data, 10);
    let dir = tempfile::tempdir().unwrap();

    let ckpt = dir.path().join("m.ckpt");
    model.save(&ckpt).unwrap();
    let loaded = GaitModel::load(&ckpt).unwrap();
    assert_eq!(loaded.to_bytes(), model.to_bytes());
    assert_eq!(loaded.reconstruct(&data[0]).unwrap(), model.reconstruct(&data[0]).unwrap());

    let (src, tgt) = (VariationLabel::normal(90.0), VariationLabel::normal(0.0));
    let pick = |l: &VariationLabel| data.iter().filter(|s| s.variation.matches(l)).collect::<Vec<_>>();
    let maps = learn_transport_maps(&model, &pick(&src), &pick(&tgt)).unwrap();
    let path = dir.path().join("maps.bin");
    maps.save(&path).unwrap();
    assert_eq!(TransportMapSet::load(&path).unwrap().to_bytes(), maps.to_bytes());

    let morphed = apply_transport_morph(&model, &maps, pick(&src)[0]).unwrap();
    assert!(morphed.variation.matches(&tgt));
    assert_eq!(morphed.num_frames(), 16);
}

#[test]
fn identity_maps_reproduce_reconstruction() {
    let data = dataset();
    let model = small_model(&data, 5);
    let maps = TransportMapSet::identity(&model, data[0].variation.clone());
    for seq in &data {
        let out = apply_transport_morph(&model, &maps, seq).unwrap();
        assert_eq!(out.frames, model.reconstruct(seq).unwrap().frames);
    }
    let sampled = apply_transport_morph_with(&model, &maps, &data[0], MorphMode::Sample { seed: 3 }).unwrap();
    assert_eq!(sampled.frames, model.reconstruct(&data[0]).unwrap().frames);
}

#[test]
fn maps_reject_a_different_codebook() {
    let data = dataset();
    let model = small_model(&data, 3);
    let other = {
        let cb = gaitmorph::Codebook::new(&model.codebook.embeddings * 1.5).unwrap();
        GaitModel::new(model.net.clone(), cb).unwrap()
    };
    let maps = TransportMapSet::identity(&model, data[0].variation.clone());
    assert!(matches!(apply_transport_morph(&other, &maps, &data[0]), Err(Error::StaleMap { .. })));
}

#[test]
fn fgd_separates_variations_more_than_subsets() {
    let data = dataset();
    let model = small_model(&data, 20);
    let embedder = Embedder::new(&model);
    let (a, b): (Vec<_>, Vec<_>) = data.iter().partition(|s| s.variation.viewpoint_deg == 0.0);
    let across = compute_fgd(&embedder, &a, &b).unwrap();
    let within = compute_fgd(&embedder, &a, &a).unwrap();
    assert!(within.abs() < 1e-9);
    assert!(across > within);
}

#[test]
fn dataset_file_round_trip_is_exact() {
    let ds = generate_dataset(&GeneratorConfig { subjects: 2, walks_per_variation: 1, frames: 16, ..Default::default() })
        .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    save_dataset(&ds, &path).unwrap();
    assert_eq!(load_dataset(&path).unwrap(), ds);
}
