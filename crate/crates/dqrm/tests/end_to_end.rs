use dqrm::config::RunConfig;
use dqrm::format::decode_model;
use dqrm::log::{parse_record, LogRecord};
use dqrm::train::{evaluate_frozen, evaluate_model, load_dataset, run_training};
use dqrm_core::comm::EcMode;

fn small() -> RunConfig {
    RunConfig::parse(
        "table_rows = 80,40,20,10\nembed_dim = 4\nbottom_mlp = 13-16-4\ntop_mlp = 8-1\n\
         samples = 1600\nbatch_size = 32\nepochs = 2\nupdate_period = 4\n",
    )
    .unwrap()
}

fn records(log: &[u8]) -> Vec<LogRecord> {
    std::str::from_utf8(log)
        .unwrap()
        .lines()
        .map(|l| parse_record(l).unwrap())
        .collect()
}

fn train_records(log: &[u8]) -> Vec<(u64, u64, bool, u64)> {
    records(log)
        .into_iter()
        .filter_map(|r| match r {
            LogRecord::Train {
                iteration,
                comm,
                scale_update,
                ..
            } => Some((iteration, scale_update.tables, scale_update.mlp, comm.total)),
            _ => None,
        })
        .collect()
}

#[test]
fn scales_refresh_on_period_boundaries() {
    let cfg = small();
    let data = load_dataset(&cfg).unwrap();
    let out = run_training(&cfg, &data).unwrap();
    let train = train_records(&out.log);
    assert_eq!(train.len(), 2 * 1280 / 32);
    for (it, tables, mlp, comm) in train {
        let due = it % 4 == 0;
        assert_eq!(tables, if due { 4 } else { 0 }, "iteration {it}");
        assert_eq!(mlp, due);
        assert_eq!(comm, 0);
    }
}

#[test]
fn pretraining_defers_quantization() {
    let mut cfg = small();
    cfg.pretrain_epochs = 1;
    cfg.epochs = 1;
    let data = load_dataset(&cfg).unwrap();
    let out = run_training(&cfg, &data).unwrap();
    let train = train_records(&out.log);
    let per_epoch = 1280 / 32;
    assert!(train[..per_epoch].iter().all(|r| r.1 == 0 && !r.2));
    assert_eq!((train[per_epoch].1, train[per_epoch].2), (4, true));
}

#[test]
fn exported_model_scores_like_the_trained_one() {
    let cfg = small();
    let data = load_dataset(&cfg).unwrap();
    let out = run_training(&cfg, &data).unwrap();
    let decoded = decode_model(&out.model_bytes).unwrap();
    let frozen = evaluate_frozen(&decoded, &data.test).unwrap();
    assert_eq!(Some(frozen), out.final_test);
    let train = match records(&out.log).pop() {
        Some(LogRecord::Summary { train_acc, .. }) => train_acc,
        other => panic!("{other:?}"),
    };
    assert_eq!(train, out.final_train.accuracy);
    assert!(evaluate_model(
        &dqrm_core::model::Dlrm::new(cfg.model_config(), 99).unwrap(),
        &data.test
    )
    .is_ok());
}

#[test]
fn quantized_gradients_report_bytes() {
    let mut cfg = small();
    cfg.nodes = 4;
    cfg.grad_bits = 8;
    cfg.ec = EcMode::All;
    let data = load_dataset(&cfg).unwrap();
    let replicas = run_training(&cfg, &data).unwrap();
    cfg.simulated = true;
    let sim = run_training(&cfg, &data).unwrap();
    let a = train_records(&replicas.log);
    let b = train_records(&sim.log);
    assert!(a.iter().all(|r| r.3 > 0));
    assert_eq!(a.len(), b.len());
    assert!(replicas.final_test.unwrap().accuracy > 0.5);
    assert!(sim.final_test.unwrap().accuracy > 0.5);
}

#[test]
fn too_little_data_is_a_config_error() {
    let mut cfg = small();
    cfg.samples = 20;
    cfg.test_fraction = 0.0;
    let data = load_dataset(&cfg).unwrap();
    assert!(matches!(run_training(&cfg, &data), Err(dqrm::Error::Config(_))));
}
