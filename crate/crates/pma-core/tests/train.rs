use pma_core::config::RunConfig;
use pma_core::data::generate_dataset;
use pma_core::model::OrderingMode;
use pma_core::train::{
    build_model, evaluate, featurize, load_model, save_model, train, train_model, train_prepared,
};
use pma_core::{Error, Tensor};

fn small_cfg(model_seed: u64) -> RunConfig {
    RunConfig {
        l: 2,
        m: 8,
        d_tok: 16,
        s_state: 8,
        s_prompt: 8,
        k: 3,
        adapter_depth: 1,
        head_hidden: 16,
        ordering: OrderingMode::Learned,
        gate_prompt_enabled: true,
        reorder_enabled: true,
        heads: 4,
        k_patch: 8,
        train_clouds: 12,
        test_clouds: 8,
        points: 64,
        sigma: 0.02,
        dataset_seed: 5,
        epochs: 2,
        batch_size: 4,
        lr: 1e-3,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        model_seed,
    }
}

#[test]
fn zero_epochs_is_evaluation_only() {
    let mut cfg = small_cfg(1);
    cfg.epochs = 0;
    let outcome = train(&cfg).unwrap();
    assert_eq!(outcome.metrics.epochs.len(), 1);
    assert_eq!(outcome.metrics.epochs[0].epoch, 0);

    // No parameter moved: the trained model still matches a fresh build.
    let fresh = build_model(&cfg).unwrap();
    for (a, b) in outcome
        .model
        .trainable_params()
        .iter()
        .zip(fresh.trainable_params())
    {
        assert!(a.value().bit_eq(&b.value()), "{} moved", a.name());
    }
}

#[test]
fn train_loss_drops_after_training_majority_of_seeds() {
    let mut drops = 0;
    for seed in [1, 2, 3] {
        let mut cfg = small_cfg(seed);
        cfg.epochs = 3;
        cfg.train_clouds = 24;
        cfg.lr = 5e-3;
        let outcome = train(&cfg).unwrap();
        let rows = &outcome.metrics.epochs;
        assert_eq!(rows.len(), 4);
        if rows[3].train_loss < rows[0].train_loss {
            drops += 1;
        }
    }
    assert!(drops >= 2, "loss dropped for only {drops}/3 seeds");
}

#[test]
fn frozen_backbone_bitwise_unchanged_after_steps() {
    // 12 clouds with batch 4 over 2 epochs = 6 optimizer steps.
    let cfg = small_cfg(2);
    let data = generate_dataset(&cfg).unwrap();
    let model = build_model(&cfg).unwrap();
    let frozen_before: Vec<Tensor> = model.frozen_params().iter().map(|p| p.value()).collect();
    let trainable_before: Vec<Tensor> =
        model.trainable_params().iter().map(|p| p.value()).collect();

    let feats_train = featurize(&model, &data.train.clouds).unwrap();
    let feats_test = featurize(&model, &data.test.clouds).unwrap();
    train_prepared(&cfg, &model, &data, &feats_train, &feats_test).unwrap();

    for (p, before) in model.frozen_params().iter().zip(&frozen_before) {
        assert!(p.value().bit_eq(before), "{} changed", p.name());
    }
    let moved = model
        .trainable_params()
        .iter()
        .zip(&trainable_before)
        .filter(|(p, before)| !p.value().bit_eq(before))
        .count();
    assert!(moved > 0, "no trainable parameter moved");
    // Every group moved somewhere: cls, generator, adapter, head.
    for prefix in ["backbone.cls", "g2pg.", "adapter0.", "head."] {
        let group_moved = model
            .trainable_params()
            .iter()
            .zip(&trainable_before)
            .any(|(p, before)| p.name().starts_with(prefix) && !p.value().bit_eq(before));
        assert!(group_moved, "group {prefix} never moved");
    }
}

#[test]
fn training_is_bitwise_deterministic() {
    let cfg = small_cfg(3);
    let a = train(&cfg).unwrap();
    let b = train(&cfg).unwrap();
    assert_eq!(a.metrics.to_csv(), b.metrics.to_csv());
    for (x, y) in a
        .model
        .trainable_params()
        .iter()
        .zip(b.model.trainable_params())
    {
        assert!(x.value().bit_eq(&y.value()), "{} differs", x.name());
    }
}

#[test]
fn metrics_rows_and_ranges() {
    let cfg = small_cfg(4);
    let outcome = train(&cfg).unwrap();
    let m = &outcome.metrics;
    assert_eq!(m.epochs.len(), cfg.epochs + 1);
    for (i, row) in m.epochs.iter().enumerate() {
        assert_eq!(row.epoch, i);
        assert!(row.train_loss.is_finite());
        assert!((0.0..=1.0).contains(&row.train_acc));
        assert!((0.0..=1.0).contains(&row.test_acc));
    }
    assert!(m.wall_seconds > 0.0);
    assert_eq!(m.trainable_params, 3841);

    let csv = m.to_csv();
    assert!(csv.starts_with("epoch,train_loss,train_acc,test_acc\n"));
    assert_eq!(csv.lines().count(), cfg.epochs + 2);
}

#[test]
fn save_load_round_trip_preserves_model() {
    let cfg = small_cfg(5);
    let data = generate_dataset(&cfg).unwrap();
    let outcome = train_model(&cfg, &data).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    save_model(&path, &cfg, &outcome.model).unwrap();
    let (loaded_cfg, loaded) = load_model(&path).unwrap();
    assert_eq!(loaded_cfg, cfg);

    for (a, b) in outcome
        .model
        .trainable_params()
        .iter()
        .zip(loaded.trainable_params())
    {
        assert_eq!(a.name(), b.name());
        assert!(a.value().bit_eq(&b.value()), "{} differs", a.name());
    }

    let feats = featurize(&loaded, &data.test.clouds).unwrap();
    let (_, acc_loaded) = evaluate(&loaded, &feats, &data.test.labels).unwrap();
    assert_eq!(acc_loaded, outcome.metrics.final_test_accuracy());
}

#[test]
fn load_rejects_mangled_model_files() {
    let cfg = small_cfg(6);
    let model = build_model(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    save_model(&path, &cfg, &model).unwrap();

    let text = std::fs::read_to_string(&path).unwrap();
    let renamed = text.replace("head.out.bias", "head.out.bozo");
    std::fs::write(&path, renamed).unwrap();
    assert!(matches!(load_model(&path), Err(Error::Data(_))));

    let reshaped = text.replace("\"shape\":[16]", "\"shape\":[17]");
    std::fs::write(&path, reshaped).unwrap();
    assert!(matches!(load_model(&path), Err(Error::Data(_))));

    std::fs::write(&path, &text[..text.len() / 2]).unwrap();
    assert!(matches!(load_model(&path), Err(Error::Data(_))));

    assert!(matches!(
        load_model(&dir.path().join("missing.json")),
        Err(Error::Data(_))
    ));
}

#[test]
fn config_errors_surface_before_training() {
    let mut cfg = small_cfg(7);
    cfg.m = cfg.points + 1;
    assert!(matches!(train(&cfg), Err(Error::Config(_))));

    let mut cfg = small_cfg(7);
    cfg.s_prompt = 4;
    assert!(matches!(train(&cfg), Err(Error::Config(_))));
}

#[test]
fn non_finite_loss_is_reported() {
    // A runaway learning rate overflows the parameters after the first
    // optimizer step, so a later forward pass goes non-finite.
    let mut cfg = small_cfg(8);
    cfg.lr = 1e200;
    match train(&cfg) {
        Err(Error::NonFinite(_)) => {}
        Err(e) => panic!("expected a non-finite report, got {e}"),
        Ok(_) => panic!("training succeeded despite the overflow"),
    }
}
