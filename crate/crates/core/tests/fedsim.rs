use fedpia::data::{gen_synthetic, Dataset, SyntheticSpec, TaskKind};
use fedpia::fedsim::{
    aggregate, run_experiment, AdapterInit, ClientData, ExperimentConfig, Federation, Method,
    Scenario, Upload,
};
use fedpia::model::ParamSet;
use fedpia::verify::{metrics_bitwise_equal, smoke_config};

fn tiny(clients: usize) -> ExperimentConfig {
    let mut cfg = smoke_config();
    cfg.clients = clients;
    cfg
}

#[test]
fn experiments_are_deterministic() {
    let mut cfg = tiny(3);
    cfg.data.scenario = Scenario::TaskHeterogeneous;
    cfg.model.adapter_init = AdapterInit::PerClient;
    for method in [Method::Fedpia, Method::FedavgAdapters, Method::FullFinetune] {
        let a = run_experiment(&cfg, method, 7).unwrap();
        let b = run_experiment(&cfg, method, 7).unwrap();
        assert!(metrics_bitwise_equal(&a.rounds, &b.rounds), "{method:?}");
        assert_eq!(a.final_global, b.final_global);
    }
}

#[test]
fn different_seeds_differ() {
    let cfg = tiny(3);
    let a = run_experiment(&cfg, Method::Fedpia, 1).unwrap();
    let b = run_experiment(&cfg, Method::Fedpia, 2).unwrap();
    assert!(!metrics_bitwise_equal(&a.rounds, &b.rounds));
}

#[test]
fn backbone_is_never_touched_by_adapter_methods() {
    let cfg = tiny(3);
    for method in [Method::Fedpia, Method::FedavgAdapters, Method::LocalOnly, Method::ClassifierOnly] {
        let mut fed = Federation::new(&cfg, method, 5).unwrap();
        let initial = fed.backbone.clone();
        for _ in 0..cfg.rounds {
            fed.run_round().unwrap();
        }
        assert_eq!(fed.backbone, initial, "{method:?}");
        for c in &fed.clients {
            assert_eq!(c.backbone.layers, initial.layers, "{method:?}");
        }
    }
    let mut fed = Federation::new(&cfg, Method::FullFinetune, 5).unwrap();
    let initial = fed.backbone.clone();
    fed.run_round().unwrap();
    assert_ne!(fed.backbone.layers, initial.layers);
}

#[test]
fn classifier_only_keeps_adapters() {
    let cfg = tiny(2);
    let mut fed = Federation::new(&cfg, Method::ClassifierOnly, 1).unwrap();
    let adapters: Vec<_> = fed.clients.iter().map(|c| c.adapters.clone()).collect();
    let heads: Vec<_> = fed.clients.iter().map(|c| c.head.clone()).collect();
    fed.run_round().unwrap();
    for (k, c) in fed.clients.iter().enumerate() {
        assert_eq!(c.adapters, adapters[k]);
        assert_ne!(c.head, heads[k]);
    }
}

#[test]
fn single_client_fedpia_is_local_training() {
    let cfg = tiny(1);
    let fused = run_experiment(&cfg, Method::Fedpia, 4).unwrap();
    let local = run_experiment(&cfg, Method::LocalOnly, 4).unwrap();
    for (a, b) in fused.rounds.iter().zip(&local.rounds) {
        for (x, y) in a.clients.iter().zip(&b.clients) {
            assert!((x.loss_at_round_start - y.loss_at_round_start).abs() < 1e-12);
            assert!((x.loss_at_round_end - y.loss_at_round_end).abs() < 1e-12);
            assert!((x.accuracy - y.accuracy).abs() < 1e-12);
        }
    }
}

#[test]
fn ablation_reduces_to_fedavg_bitwise() {
    for init in [AdapterInit::Shared, AdapterInit::PerClient] {
        let mut cfg = tiny(3);
        cfg.model.adapter_init = init;
        cfg.data.scenario = Scenario::TaskHeterogeneous;
        let baseline = run_experiment(&cfg, Method::FedavgAdapters, 2).unwrap();
        cfg.server_pia_on = false;
        cfg.client_pia_on = false;
        cfg.fusion.lambda_merge = 0.0;
        let reduced = run_experiment(&cfg, Method::Fedpia, 2).unwrap();
        assert!(metrics_bitwise_equal(&baseline.rounds, &reduced.rounds), "{init:?}");
    }
}

#[test]
fn round_metrics_are_contiguous_and_finite() {
    let cfg = tiny(3);
    let out = run_experiment(&cfg, Method::Fedpia, 0).unwrap();
    for (i, r) in out.rounds.iter().enumerate() {
        assert_eq!(r.round, i + 1);
        assert_eq!(r.clients.len(), 3);
        for c in &r.clients {
            assert!(c.loss_at_round_start.is_finite() && c.loss_at_round_end.is_finite());
            assert!((0.0..=1.0).contains(&c.accuracy) && (0.0..=1.0).contains(&c.macro_f1));
        }
    }
}

fn iid_clients(k: usize, n: usize) -> Vec<ClientData> {
    let ds = gen_synthetic(&SyntheticSpec {
        seed: 12,
        n_samples: 2 * k * n,
        dim: 16,
        num_classes: 3,
        kind: TaskKind::Single,
        margin: 2.0,
        clusters_per_class: 1,
    })
    .unwrap();
    let part = |i: usize| -> Dataset { ds.subset(&(i * n..(i + 1) * n).collect::<Vec<_>>()) };
    (0..k)
        .map(|i| ClientData {
            train: part(2 * i),
            test: part(2 * i + 1),
        })
        .collect()
}

#[test]
fn homogeneous_clients_fuse_like_fedavg() {
    // Equal sizes and γ = 0 make the fused mean and FedAvg the same weighting,
    // so any gap would come from non-identity alignments.
    let mut cfg = tiny(4);
    cfg.rounds = 1;
    cfg.fusion.gamma = 0.0;
    let mut fused = Federation::with_data(&cfg, Method::Fedpia, 3, iid_clients(4, 50)).unwrap();
    let mut plain = Federation::with_data(&cfg, Method::FedavgAdapters, 3, iid_clients(4, 50)).unwrap();
    fused.run_round().unwrap();
    plain.run_round().unwrap();
    assert!(fused.global.max_abs_diff(&plain.global) < 1e-6);
}

#[test]
fn server_sees_only_adapter_uploads() {
    let cfg = tiny(2);
    let fed = Federation::new(&cfg, Method::Fedpia, 0).unwrap();
    let uploads: Vec<Upload> = fed
        .clients
        .iter()
        .map(|c| Upload {
            client: c.id,
            adapters: c.adapters.clone(),
            num_samples: c.train.len(),
        })
        .collect();
    // An upload carries exactly the adapter parameters and nothing else.
    for (u, c) in uploads.iter().zip(&fed.clients) {
        assert_eq!(u.adapters.num_params(), c.adapters.num_params());
        assert_ne!(u.adapters.num_params(), c.adapters.num_params() + c.head.num_params());
    }
    let global = aggregate(Method::Fedpia, &uploads, &cfg).unwrap().unwrap();
    assert!(global.same_shape(&fed.global));
    assert!(aggregate(Method::LocalOnly, &uploads, &cfg).unwrap().is_none());
}

#[test]
fn heads_stay_private_and_sized_per_client() {
    let mut cfg = tiny(4);
    cfg.data.num_classes = 6;
    cfg.data.min_classes = 2;
    let fed = Federation::new(&cfg, Method::Fedpia, 8).unwrap();
    let sizes: Vec<usize> = fed.clients.iter().map(|c| c.num_classes()).collect();
    assert!(sizes.iter().all(|&c| (2..=6).contains(&c)));
    let mut fed = fed;
    let before: Vec<_> = fed.clients.iter().map(|c| c.head.clone()).collect();
    fed.run_round().unwrap();
    for (c, h) in fed.clients.iter().zip(&before) {
        assert_eq!(c.head.w.shape(), h.w.shape());
    }
}

#[test]
fn dataset_fraction_shrinks_training_sets() {
    let mut cfg = tiny(3);
    let full = Federation::new(&cfg, Method::Fedpia, 1).unwrap();
    cfg.dataset_fraction = 0.4;
    let cut = Federation::new(&cfg, Method::Fedpia, 1).unwrap();
    for (a, b) in full.clients.iter().zip(&cut.clients) {
        assert_eq!(b.train.len(), ((a.train.len() as f64) * 0.4).ceil() as usize);
        assert_eq!(a.test, b.test);
    }
}
