use dqrm_core::data::Batch;
use dqrm_core::model::gradcheck::GradCheckConfig;
use dqrm_core::model::{Dlrm, ModelConfig, KAGGLE_TABLE_ROWS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn scaled_kaggle() -> ModelConfig {
    let mut cfg = ModelConfig::kaggle();
    cfg.table_rows = KAGGLE_TABLE_ROWS.iter().map(|&r| r.min(100)).collect();
    cfg.embed_dim = 8;
    *cfg.bottom_arch.last_mut().unwrap() = 8;
    cfg.emb_bits = 32;
    cfg.mlp_bits = 32;
    cfg
}

/// Bags of one to three indices, so pooling sums are exercised.
fn multi_hot_batch(cfg: &ModelConfig, n: usize, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices = vec![Vec::new(); cfg.num_tables()];
    let mut offsets = vec![vec![0]; cfg.num_tables()];
    for _ in 0..n {
        for (t, &rows) in cfg.table_rows.iter().enumerate() {
            for _ in 0..rng.random_range(1..=3) {
                indices[t].push(rng.random_range(0..rows as u32));
            }
            offsets[t].push(indices[t].len());
        }
    }
    Batch {
        dense_features: cfg.dense_in,
        dense: (0..n * cfg.dense_in).map(|_| rng.random_range(0.0..4.0)).collect(),
        indices,
        offsets,
        labels: (0..n).map(|_| f32::from(rng.random_range(0..2u8))).collect(),
    }
}

#[test]
fn kaggle_shape_matches_central_differences() {
    let cfg = scaled_kaggle();
    cfg.validate().unwrap();
    assert_eq!(cfg.top_input_dim(), 8 + 27 * 26 / 2);
    let model = Dlrm::<f64>::new(cfg.clone(), 12).unwrap();
    let batch = multi_hot_batch(&cfg, 8, 3);
    let report = model.check_gradients(&batch, &GradCheckConfig::default()).unwrap();
    assert!(report.checked >= 500, "{report:?}");
    assert!(report.skipped_kinks * 10 < report.checked, "{report:?}");
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn trained_model_still_matches() {
    let mut cfg = scaled_kaggle();
    cfg.bottom_arch = vec![13, 32, 8];
    cfg.top_arch = vec![16, 1];
    let mut model = Dlrm::<f64>::new(cfg.clone(), 4).unwrap();
    for it in 0..20 {
        model.train_step(&multi_hot_batch(&cfg, 16, 100 + it), it).unwrap();
    }
    let cfg_check = GradCheckConfig {
        seed: 9,
        ..GradCheckConfig::default()
    };
    let report = model.check_gradients(&multi_hot_batch(&cfg, 8, 7), &cfg_check).unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}
