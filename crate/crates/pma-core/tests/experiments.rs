use pma_core::backbone::backbone_forward;
use pma_core::config::RunConfig;
use pma_core::data::generate_dataset;
use pma_core::experiments::{
    ablate, ablate_csv, layer_probe, order_bench, order_bench_csv, probe_csv, train_probe_head,
};
use pma_core::geometry::PointSet;
use pma_core::model::OrderingMode;
use pma_core::train::build_model;
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
fn probe_emits_one_row_per_stage() {
    let cfg = small_cfg(1);
    let rows = layer_probe(&cfg).unwrap();
    assert_eq!(rows.len(), cfg.l + 1);
    for (n, row) in rows.iter().enumerate() {
        assert_eq!(row.label, n.to_string());
        assert!((0.0..=1.0).contains(&row.accuracy));
    }
    let csv = probe_csv(&rows);
    assert!(csv.starts_with("n,accuracy\n"));
    assert_eq!(csv.lines().count(), cfg.l + 2);
}

#[test]
fn probe_rerun_reproduces_the_csv() {
    let cfg = small_cfg(2);
    let a = probe_csv(&layer_probe(&cfg).unwrap());
    let b = probe_csv(&layer_probe(&cfg).unwrap());
    assert_eq!(a, b);
}

#[test]
fn probe_final_stage_matches_a_plain_linear_probe() {
    // The n = L probe row must coincide with independently pooling the final
    // transformer tokens and training the same head on them.
    let cfg = small_cfg(3);
    let rows = layer_probe(&cfg).unwrap();
    let data = generate_dataset(&cfg).unwrap();
    let model = build_model(&cfg).unwrap();

    let pool_last = |clouds: &[PointSet]| -> Vec<Tensor> {
        clouds
            .iter()
            .map(|ps| {
                let harvest = backbone_forward(ps, &model.backbone).unwrap();
                let t = harvest.tokens.last().unwrap();
                let (m, d) = (t.rows(), t.cols());
                let mut out = vec![0.0; 2 * d];
                for c in 0..d {
                    let mut mx = f64::NEG_INFINITY;
                    let mut sum = 0.0;
                    for r in 0..m {
                        let v = t.data()[r * d + c];
                        mx = mx.max(v);
                        sum += v;
                    }
                    out[c] = mx;
                    out[d + c] = sum / m as f64;
                }
                Tensor::new(vec![1, 2 * d], out).unwrap()
            })
            .collect()
    };

    let feats_train = pool_last(&data.train.clouds);
    let feats_test = pool_last(&data.test.clouds);
    let acc = train_probe_head(
        &cfg,
        &feats_train,
        &data.train.labels,
        &feats_test,
        &data.test.labels,
    )
    .unwrap();
    assert_eq!(acc, rows[cfg.l].accuracy);
}

#[test]
fn ablate_emits_the_four_toggle_rows() {
    let cfg = small_cfg(4);
    let rows = ablate(&cfg).unwrap();
    let labels: Vec<&str> = rows.iter().map(|r| r.label.as_str()).collect();
    assert_eq!(
        labels,
        ["none", "adapter", "adapter+prompt", "adapter+prompt+reorder"]
    );
    for row in &rows {
        assert!((0.0..=1.0).contains(&row.accuracy));
    }
    let csv = ablate_csv(&rows);
    assert!(csv.starts_with("config,accuracy\n"));
    assert_eq!(csv.lines().count(), 5);
    assert_eq!(csv, ablate_csv(&ablate(&cfg).unwrap()));
}

#[test]
fn order_bench_emits_the_six_ordering_rows() {
    let cfg = small_cfg(5);
    let rows = order_bench(&cfg).unwrap();
    let labels: Vec<&str> = rows.iter().map(|r| r.label.as_str()).collect();
    assert_eq!(labels, ["x", "y", "z", "hilbert", "morton", "learned"]);
    for row in &rows {
        assert!((0.0..=1.0).contains(&row.accuracy));
    }
    let csv = order_bench_csv(&rows);
    assert!(csv.starts_with("ordering,accuracy\n"));
    assert_eq!(csv.lines().count(), 7);
    assert_eq!(csv, order_bench_csv(&order_bench(&cfg).unwrap()));
}

#[test]
fn experiments_reject_invalid_configs() {
    let mut cfg = small_cfg(6);
    cfg.k = 0;
    assert!(matches!(layer_probe(&cfg), Err(Error::Config(_))));
    assert!(matches!(ablate(&cfg), Err(Error::Config(_))));
    assert!(matches!(order_bench(&cfg), Err(Error::Config(_))));
}

#[test]
fn order_bench_requires_prompt_capacity_for_the_learned_row() {
    // The learned row is validated before any static row trains.
    let mut cfg = small_cfg(7);
    cfg.ordering = OrderingMode::X;
    cfg.s_prompt = cfg.m - 1;
    assert!(matches!(order_bench(&cfg), Err(Error::Config(_))));
}
