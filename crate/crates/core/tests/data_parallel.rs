use dqrm_core::comm::{DataParallel, DpConfig, EcMode, SimulatedDp};
use dqrm_core::data::{generate_synthetic, make_batches, Batch, SynthSpec};
use dqrm_core::model::{Dlrm, ModelConfig};
use dqrm_core::quantizer::Granularity;

fn config(bits: u32) -> ModelConfig {
    ModelConfig {
        dense_in: 4,
        table_rows: vec![50, 20, 80, 9],
        embed_dim: 4,
        bottom_arch: vec![4, 16, 4],
        top_arch: vec![10, 8, 1],
        emb_bits: bits,
        mlp_bits: bits,
        mlp_granularity: Granularity::PerChannel,
        update_period: 5,
        learning_rate: 0.1,
        quantize_activations: false,
        pretrain_epochs: 0,
    }
}

fn batches(cfg: &ModelConfig, n: usize, batch: usize, seed: u64) -> Vec<Batch> {
    let spec = SynthSpec {
        num_samples: n,
        table_rows: cfg.table_rows.clone(),
        dense_features: cfg.dense_in,
        zipf_skew: 1.1,
        label_noise: 0.1,
        seed,
    };
    let samples = generate_synthetic(spec).unwrap().map(|r| r.to_sample());
    make_batches(samples, batch, true).collect()
}

fn dp(nodes: usize, grad_bits: u32, ec_mode: EcMode, sparse_emb: bool) -> DpConfig {
    DpConfig {
        nodes,
        grad_bits,
        ec_mode,
        sparse_emb,
        index_bytes: 8,
    }
}

#[test]
fn one_node_fp32_is_single_node_training() {
    let cfg = config(4);
    let mut single = Dlrm::<f32>::new(cfg.clone(), 3).unwrap();
    let mut par = DataParallel::new(single.clone(), dp(1, 32, EcMode::None, true)).unwrap();
    for (it, b) in batches(&cfg, 640, 32, 1).iter().enumerate() {
        let a = single.train_step(b, it as u64).unwrap();
        let r = par.step(b, it as u64).unwrap();
        assert_eq!(a.loss.to_bits(), r.loss.to_bits());
    }
    assert_eq!(single.checksum(), par.model().checksum());
}

#[test]
fn fp32_dp_tracks_big_batch_sgd() {
    let cfg = config(32);
    let data = batches(&cfg, 3200, 32, 2);
    let mut single = Dlrm::<f32>::new(cfg.clone(), 5).unwrap();
    for (it, b) in data.iter().enumerate() {
        single.train_step(b, it as u64).unwrap();
    }
    for nodes in [2, 4, 8] {
        let mut par = DataParallel::new(
            Dlrm::<f32>::new(cfg.clone(), 5).unwrap(),
            dp(nodes, 32, EcMode::None, true),
        )
        .unwrap();
        for (it, b) in data.iter().enumerate() {
            par.step(b, it as u64).unwrap();
        }
        let dist = par.model().relative_distance(&single);
        assert!(dist < 1e-5, "nodes={nodes} dist={dist}");
    }
}

#[test]
fn sparse_toggle_is_lossless() {
    for bits in [32, 4] {
        let cfg = config(bits);
        let data = batches(&cfg, 960, 24, 3);
        let model = Dlrm::<f32>::new(cfg.clone(), 8).unwrap();
        let mut on = DataParallel::new(model.clone(), dp(3, 32, EcMode::None, true)).unwrap();
        let mut off = DataParallel::new(model, dp(3, 32, EcMode::None, false)).unwrap();
        for (it, b) in data.iter().enumerate() {
            let a = on.step(b, it as u64).unwrap();
            let c = off.step(b, it as u64).unwrap();
            assert_eq!(a.loss.to_bits(), c.loss.to_bits());
            assert!(a.comm.total() < c.comm.total());
        }
        assert_eq!(on.model().checksum(), off.model().checksum());
    }
}

#[test]
fn simulated_dp_matches_replicas_in_fp32() {
    for sparse in [true, false] {
        let cfg = config(4);
        let data = batches(&cfg, 960, 32, 4);
        let model = Dlrm::<f32>::new(cfg.clone(), 9).unwrap();
        let mut par = DataParallel::new(model.clone(), dp(4, 32, EcMode::None, sparse)).unwrap();
        let mut sim = SimulatedDp::new(model, dp(4, 32, EcMode::None, sparse)).unwrap();
        for (it, b) in data.iter().enumerate() {
            let a = par.step(b, it as u64).unwrap();
            let s = sim.step(b).unwrap();
            assert_eq!(a.loss.to_bits(), s.loss.to_bits());
            assert_eq!(a.comm, s.comm);
        }
        assert_eq!(par.model().checksum(), sim.model().checksum());
        assert_eq!(sim.buffer_clears(), data.len() as u64);
        assert_eq!(sim.updates(), data.len() as u64);
    }
}

#[test]
fn simulated_dp_updates_once_per_group() {
    let cfg = config(32);
    let data = batches(&cfg, 64, 8, 5);
    let model = Dlrm::<f32>::new(cfg.clone(), 1).unwrap();
    let mut sim = SimulatedDp::new(model.clone(), dp(4, 8, EcMode::Mlp, true)).unwrap();
    for (k, b) in data.iter().take(7).enumerate() {
        let r = sim.microbatch(b).unwrap();
        assert_eq!(r.is_some(), k == 3);
        if k < 3 {
            assert_eq!(sim.model().checksum(), model.checksum());
        }
    }
    assert_eq!(sim.updates(), 1);
    assert_eq!(sim.buffer_clears(), 2);
    assert!(sim.step(&data[0]).is_err(), "step mid-group must fail");
}

#[test]
fn int8_gradients_never_clip_and_stay_close() {
    let cfg = config(32);
    let data = batches(&cfg, 3200, 32, 6);
    let model = Dlrm::<f32>::new(cfg.clone(), 2).unwrap();
    let mut fp = DataParallel::new(model.clone(), dp(4, 32, EcMode::None, true)).unwrap();
    let mut q = DataParallel::new(model, dp(4, 8, EcMode::Mlp, true)).unwrap();
    for (it, b) in data.iter().enumerate() {
        fp.step(b, it as u64).unwrap();
        let r = q.step(b, it as u64).unwrap();
        assert_eq!(r.clipped, 0);
    }
    let dist = q.model().relative_distance(fp.model());
    assert!(dist > 0.0 && dist < 0.05, "dist={dist}");
}

#[test]
fn error_feedback_telescopes() {
    let cfg = config(4);
    let data = batches(&cfg, 6400, 16, 7);
    let mut par = DataParallel::new(Dlrm::<f32>::new(cfg.clone(), 4).unwrap(), dp(2, 8, EcMode::Mlp, true)).unwrap();
    par.set_trace(true);
    let sizes: Vec<usize> = par.model().mlp_tensors().iter().map(|t| t.len()).collect();
    let mut raw: Vec<Vec<Vec<f64>>> = (0..2).map(|_| sizes.iter().map(|&n| vec![0.0; n]).collect()).collect();
    let mut sent = raw.clone();
    for (it, b) in data.iter().enumerate() {
        let r = par.step(b, it as u64).unwrap();
        assert_eq!(r.clipped, 0);
        assert_eq!(r.ec_trace.len(), 2 * sizes.len());
        for e in &r.ec_trace {
            for i in 0..e.raw.len() {
                raw[e.node][e.tensor][i] += f64::from(e.raw[i]);
                sent[e.node][e.tensor][i] += f64::from(e.transmitted[i]);
            }
        }
    }
    for (node, buf) in par.error_buffers().iter().enumerate() {
        for (k, t) in buf.mlp.iter().enumerate() {
            for (i, &e) in t.iter().enumerate() {
                let lhs = sent[node][k][i] + f64::from(e);
                assert!((lhs - raw[node][k][i]).abs() < 1e-6, "node {node} tensor {k} elem {i}");
            }
        }
    }
}

#[test]
fn ec_all_with_sparse_tables_trains() {
    let cfg = config(4);
    let data = batches(&cfg, 1280, 32, 8);
    let mut par = DataParallel::new(Dlrm::<f32>::new(cfg.clone(), 4).unwrap(), dp(4, 8, EcMode::All, true)).unwrap();
    let mut epoch_loss = Vec::new();
    for epoch in 0..3 {
        let mut sum = 0.0;
        for (it, b) in data.iter().enumerate() {
            sum += par.step(b, (epoch * data.len() + it) as u64).unwrap().loss;
        }
        epoch_loss.push(sum / data.len() as f32);
    }
    assert!(epoch_loss[2] < epoch_loss[0], "{epoch_loss:?}");
    assert!(par.error_buffers()[0]
        .tables
        .iter()
        .any(|t| t.iter().any(|&v| v != 0.0)));
}

#[test]
fn comm_record_counts_wire_bytes() {
    let cfg = config(32);
    // every sample in shard r uses row r in every table: one unique row per node and table
    let b = batches(&cfg, 8, 8, 9).remove(0);
    let mut b = b;
    for t in 0..cfg.num_tables() {
        for (k, idx) in b.indices[t].iter_mut().enumerate() {
            *idx = (k / 4) as u32;
        }
    }
    let mlp = cfg.mlp_parameter_count() as u64;
    let tensors = 2 * (cfg.bottom_shapes().len() + cfg.top_shapes().len()) as u64;
    let tables = cfg.num_tables() as u64;
    let d = cfg.embed_dim as u64;
    let model = Dlrm::<f32>::new(cfg.clone(), 0).unwrap();

    let r = DataParallel::new(model.clone(), dp(2, 32, EcMode::None, true))
        .unwrap()
        .step(&b, 0)
        .unwrap();
    assert_eq!(r.comm.dense_grad_bytes, 2 * 4 * mlp);
    assert_eq!(r.comm.sparse_index_bytes, 2 * tables * 8);
    assert_eq!(r.comm.sparse_value_bytes, 2 * tables * 4 * d);
    assert_eq!(r.comm.scale_bytes, 0);

    let r = DataParallel::new(model.clone(), dp(2, 8, EcMode::None, true))
        .unwrap()
        .step(&b, 0)
        .unwrap();
    assert_eq!(r.comm.dense_grad_bytes, 2 * mlp);
    assert_eq!(r.comm.sparse_value_bytes, 2 * tables * d);
    assert_eq!(r.comm.scale_bytes, 2 * 4 * (tensors + tables));

    let rows: u64 = cfg.table_rows.iter().map(|&r| r as u64).sum();
    let r = DataParallel::new(model, dp(2, 16, EcMode::None, false))
        .unwrap()
        .step(&b, 0)
        .unwrap();
    assert_eq!(r.comm.dense_grad_bytes, 2 * 2 * (mlp + rows * d));
    assert_eq!(r.comm.sparse_index_bytes, 0);
}

#[test]
fn uneven_batch_is_rejected() {
    let cfg = config(32);
    let b = batches(&cfg, 10, 10, 1).remove(0);
    let mut par = DataParallel::new(Dlrm::<f32>::new(cfg, 0).unwrap(), dp(4, 32, EcMode::None, true)).unwrap();
    assert!(par.step(&b, 0).is_err());
}
