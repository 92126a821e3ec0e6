use fedmoe_core::autodiff::Tape;
use fedmoe_core::config::ExperimentConfig;
use fedmoe_core::experiment::{load_checkpoint_into, prepare, run_experiment};
use fedmoe_core::federation::{
    aggregate, assign_sparsity, evaluate_global, local_train, run_round, Capability, ServerState,
    SparsityPolicy,
};
use fedmoe_core::metrics::evaluate_accuracy;
use fedmoe_core::{Checkpoint, Tensor};

fn small() -> ExperimentConfig {
    ExperimentConfig::from_text(
        "backbone.width = 16
backbone.heads = 2
backbone.seq_len = 4
backbone.ffn_width = 32
adapter.experts = 4
adapter.expert_rank = 2
data.input_dim = 8
data.samples = 200
data.partition = iid
federation.batch_size = 16
federation.lr = 0.01
federation.rounds = 2
seed.run = 11
seed.data = 12
seed.frozen = 13
",
    )
    .unwrap()
}

#[test]
fn local_training_reduces_batch_loss() {
    let mut cfg = small();
    cfg.set("data.separation", "10").unwrap();
    let mut setup = prepare(&cfg).unwrap();
    let rc = cfg.round_config();
    let client = &mut setup.clients[0];
    let (x, y) = client.shard.batch(&(0..client.shard.len()).collect::<Vec<_>>());
    let loss_of = |params: &[Tensor]| {
        let mut m = setup.template.clone();
        m.load_parameters(params).unwrap();
        let mut tape = Tape::new();
        let pass = m.forward(&mut tape, &x, false).unwrap();
        let ce = tape.cross_entropy(pass.logits, &y).unwrap();
        tape.value(ce).data()[0]
    };
    let before = loss_of(&client.params);
    let fp = setup.template.frozen_fingerprint();
    local_train(client, &setup.template, &rc.train, 1).unwrap();
    let after = loss_of(&client.params);
    assert!(after < before, "{after} !< {before}");
    assert_eq!(setup.template.frozen_fingerprint(), fp);
}

#[test]
fn zero_learning_rate_is_a_fixed_point() {
    let mut cfg = small();
    cfg.set("federation.lr", "0").unwrap();
    let mut setup = prepare(&cfg).unwrap();
    let rc = cfg.round_config();
    let mut server = ServerState::new(setup.template.export_parameters());
    let init = server.global.clone();
    let r1 = run_round(&mut server, &mut setup.clients, &setup.template, &rc, &setup.test).unwrap();
    assert_eq!(server.global, init);
    let r2 = run_round(&mut server, &mut setup.clients, &setup.template, &rc, &setup.test).unwrap();
    assert_eq!(server.global, init);
    assert_eq!(r1.accuracy, r2.accuracy);
}

#[test]
fn heterogeneous_k_round_aggregates_and_loads_everywhere() {
    let mut cfg = small();
    cfg.apply_text("sparsity.policy = capability\nsparsity.k_high = 4\nsparsity.k_low = 1\nsparsity.capabilities = high,low,high,low\n")
        .unwrap();
    let mut setup = prepare(&cfg).unwrap();
    assert_eq!(setup.clients.iter().map(|c| c.k).collect::<Vec<_>>(), vec![4, 1, 4, 1]);
    let rc = cfg.round_config();
    let mut server = ServerState::new(setup.template.export_parameters());
    let report = run_round(&mut server, &mut setup.clients, &setup.template, &rc, &setup.test).unwrap();
    assert_eq!(report.eval_k, 4);
    for c in &setup.clients {
        let mut model = setup.template.clone();
        model.set_k(c.k).unwrap();
        model.load_parameters(&server.global).unwrap();
        assert_eq!(model.export_parameters(), server.global);
    }
}

#[test]
fn capability_assignment_follows_the_map() {
    let mut setup = prepare(&small()).unwrap();
    setup.clients[2].capability = Capability::Low;
    assign_sparsity(&mut setup.clients, SparsityPolicy::CapabilityMap { high: 3, low: 1 }, 4).unwrap();
    assert_eq!(setup.clients.iter().map(|c| c.k).collect::<Vec<_>>(), vec![3, 3, 1, 3]);
}

#[test]
fn single_client_round_is_centralized_training() {
    let mut cfg = small();
    cfg.set("federation.clients", "1").unwrap();
    let mut fed = prepare(&cfg).unwrap();
    let mut solo = prepare(&cfg).unwrap();
    let rc = cfg.round_config();
    let mut server = ServerState::new(fed.template.export_parameters());
    run_round(&mut server, &mut fed.clients, &fed.template, &rc, &fed.test).unwrap();
    local_train(&mut solo.clients[0], &solo.template, &rc.train, 1).unwrap();
    assert_eq!(server.global, solo.clients[0].params);
}

#[test]
fn rounds_replay_bit_identically() {
    let cfg = small();
    let run = |parallel: bool| {
        let mut c = cfg.clone();
        c.parallel = parallel;
        let mut setup = prepare(&c).unwrap();
        let rc = c.round_config();
        let mut server = ServerState::new(setup.template.export_parameters());
        let reports: Vec<_> = (0..2)
            .map(|_| run_round(&mut server, &mut setup.clients, &setup.template, &rc, &setup.test).unwrap())
            .collect();
        (reports, server.global)
    };
    let a = run(true);
    assert_eq!(a, run(true));
    assert_eq!(a, run(false));
}

#[test]
fn backbone_adapter_gradient_matches_finite_differences() {
    let cfg = small();
    let setup = prepare(&cfg).unwrap();
    let mut model = setup.template.clone();
    // move off the zero init so every parameter receives a gradient
    let mut params = model.export_parameters();
    for (i, p) in params.iter_mut().enumerate() {
        for (j, v) in p.data_mut().iter_mut().enumerate() {
            *v = 0.1 * (((i * 31 + j * 17) % 13) as f64 / 13.0 - 0.5);
        }
    }
    model.load_parameters(&params).unwrap();
    let (x, y) = setup.test.batch(&[0, 1, 2]);
    let loss = |m: &fedmoe_core::Backbone| {
        let mut tape = Tape::new();
        let pass = m.forward(&mut tape, &x, false).unwrap();
        let ce = tape.cross_entropy(pass.logits, &y).unwrap();
        (tape, pass, ce)
    };
    let (tape, pass, ce) = loss(&model);
    let grads = tape.backward(ce).unwrap();
    model.zero_grad();
    model.accumulate_gradients(&pass.bindings, &grads).unwrap();
    let analytic: Vec<Vec<f64>> = model.parameters().iter().map(|t| t.grad().unwrap().to_vec()).collect();
    let h = 1e-5;
    // entries of layer 0's router and of expert 0's up-projection
    for (pi, ei) in [(8usize, 5usize), (8, 40), (1, 3), (1, 20)] {
        let mut plus = params.clone();
        plus[pi].data_mut()[ei] += h;
        let mut minus = params.clone();
        minus[pi].data_mut()[ei] -= h;
        let eval = |p: &[Tensor]| {
            let mut m = model.clone();
            m.load_parameters(p).unwrap();
            let (t, _, ce) = loss(&m);
            t.value(ce).data()[0]
        };
        let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
        let a = analytic[pi][ei];
        let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-8);
        assert!(rel < 1e-4, "param {pi}[{ei}]: fd {fd} analytic {a}");
    }
}

#[test]
fn accuracy_is_order_invariant_and_binary_on_one_item() {
    let setup = prepare(&small()).unwrap();
    let ev = evaluate_accuracy(&setup.template, &setup.test, 7).unwrap();
    let mut rev: Vec<usize> = (0..setup.test.len()).collect();
    rev.reverse();
    let reversed = setup.test.subset(&rev).unwrap();
    let ev2 = evaluate_accuracy(&setup.template, &reversed, 13).unwrap();
    assert_eq!(ev.accuracy, ev2.accuracy);
    let one = setup.test.subset(&[0]).unwrap();
    let a = evaluate_accuracy(&setup.template, &one, 1).unwrap().accuracy;
    assert!(a == 0.0 || a == 1.0);
    let tokens = (setup.test.len() * 4) as u64;
    for row in ev.load.counts() {
        assert_eq!(row.iter().sum::<u64>(), tokens * 2);
    }
}

#[test]
fn separable_data_is_learned() {
    let mut cfg = small();
    cfg.apply_text("data.separation = 50\ndata.samples = 400\nfederation.rounds = 4\nfederation.local_epochs = 2\nfederation.lr = 0.02\n")
        .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = run_experiment(&cfg, dir.path()).unwrap();
    let acc = out.final_accuracy().unwrap();
    assert!(acc > 0.9, "accuracy {acc}");
}

#[test]
fn zero_rounds_checkpoint_is_the_initialization() {
    let mut cfg = small();
    cfg.set("federation.rounds", "0").unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = run_experiment(&cfg, dir.path()).unwrap();
    assert!(out.reports.is_empty());
    let init = prepare(&cfg).unwrap().template.export_parameters();
    let ck = Checkpoint::load(&dir.path().join("checkpoint.bin")).unwrap();
    assert_eq!(ck.tensors.len(), init.len());
    for (a, b) in ck.tensors.iter().zip(&init) {
        assert_eq!((a.shape(), a.data()), (b.shape(), b.data()));
    }
    let metrics = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1);
}

#[test]
fn experiment_artifacts_are_complete_and_replayable() {
    let cfg = small();
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let out = run_experiment(&cfg, d1.path()).unwrap();
    let replay = ExperimentConfig::from_file(&d1.path().join("config.txt")).unwrap();
    run_experiment(&replay, d2.path()).unwrap();
    let read = |d: &tempfile::TempDir, f: &str| std::fs::read(d.path().join(f)).unwrap();
    for f in ["metrics.csv", "heatmap_round_01.csv", "heatmap_round_02.csv", "routing_probs_round_02.csv", "checkpoint.bin", "partition.csv"] {
        assert_eq!(read(&d1, f), read(&d2, f), "{f}");
    }
    let metrics = String::from_utf8(read(&d1, "metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], "round,client_id,task_loss,aux_loss,accuracy,mean_util_kl");
    assert_eq!(lines.len(), 1 + 2 * 5);
    assert!(lines[5].starts_with("1,global,"));
    let meta = String::from_utf8(read(&d1, "metadata.txt")).unwrap();
    for key in ["seed.run = 11", "seed.data = 12", "seed.frozen = 13", "run.eval_k = 2", "federation.decay_mode = l2"] {
        assert!(meta.contains(key), "{key}");
    }
    assert!(meta.contains(&format!("run.frozen_fingerprint = {}", out.frozen_fingerprint)));
    let model = load_checkpoint_into(&cfg, &d1.path().join("checkpoint.bin")).unwrap();
    assert_eq!(model.export_parameters(), out.final_params);
    let fresh = prepare(&cfg).unwrap();
    assert_eq!(fresh.template.frozen_fingerprint(), out.frozen_fingerprint);
}

#[test]
fn global_evaluation_uses_requested_k() {
    let setup = prepare(&small()).unwrap();
    let params = setup.template.export_parameters();
    let ev = evaluate_global(&setup.template, &params, 3, &setup.test, 64).unwrap();
    let tokens = (setup.test.len() * 4) as u64;
    assert!(ev.load.counts().iter().all(|r| r.iter().sum::<u64>() == tokens * 3));
}

#[test]
fn aggregation_of_client_uploads_keeps_shapes() {
    let setup = prepare(&small()).unwrap();
    let uploads: Vec<_> = setup.clients.iter().map(|c| (c.params.clone(), c.shard.len())).collect();
    let global = aggregate(&uploads).unwrap();
    assert_eq!(global, setup.clients[0].params);
}
