mod common;

use polarseg::diffcore::{read_checkpoint, Graph, ParamStore};
use polarseg::network::{level_name, Network};
use polarseg::training::{
    generate_dataset, generate_scene, prepare_samples, scene_loss, train, Sample, Sgd, TrainOutputs,
};
use polarseg::Error;
use rand::Rng;

fn toy_samples(cfg: &polarseg::config::RunConfig, count: usize) -> Vec<Sample> {
    let scenes = generate_dataset(cfg.seed, count, &cfg.data).unwrap();
    prepare_samples(&scenes, &cfg.model, &cfg.train).unwrap()
}

fn positive_sample(cfg: &polarseg::config::RunConfig) -> Sample {
    (0..)
        .map(|s| generate_scene(1000 + s, &cfg.data).unwrap())
        .map(|scene| prepare_samples(&[scene], &cfg.model, &cfg.train).unwrap().remove(0))
        .find(|s| s.targets.num_positives() > 0)
        .unwrap()
}

fn short_run(seed: u64) -> polarseg::config::RunConfig {
    let mut cfg = common::toy_config(seed);
    cfg.train.steps = 6;
    cfg.train.batch_size = 2;
    cfg.train.warmup_steps = 2;
    cfg.train.log_every = 1;
    cfg
}

#[test]
fn training_is_reproducible() {
    let cfg = short_run(4);
    let samples = toy_samples(&cfg, 5);
    let run = || {
        let (_, store) = Network::build(&cfg.model, cfg.seed).unwrap();
        train(&cfg, store, &samples, None).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.log, b.log);
    for ((_, p), (_, q)) in a.store.iter().zip(b.store.iter()) {
        assert_eq!(p.tensor.values(), q.tensor.values(), "{}", p.name);
    }
    assert_eq!(a.log.len(), 6);
}

#[test]
fn training_writes_log_and_checkpoints() {
    let mut cfg = short_run(2);
    cfg.train.checkpoint_every = 3;
    let samples = toy_samples(&cfg, 3);
    let dir = tempfile::tempdir().unwrap();
    let out = TrainOutputs { dir: dir.path().to_path_buf() };
    let (_, store) = Network::build(&cfg.model, cfg.seed).unwrap();
    let outcome = train(&cfg, store, &samples, Some(&out)).unwrap();
    let log = std::fs::read_to_string(out.log_path()).unwrap();
    assert_eq!(log.lines().count(), outcome.log.len());
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["step", "cls", "cnt", "coarse", "fine", "hbb", "total"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
    }
    assert!(out.periodic_checkpoint(3).exists());
    assert!(out.periodic_checkpoint(6).exists());
    let entries = read_checkpoint(&out.final_checkpoint()).unwrap();
    assert_eq!(entries.len(), outcome.store.len());
}

#[test]
fn divergence_is_reported_with_last_good_checkpoint() {
    let mut cfg = short_run(1);
    cfg.train.lr = 1e6;
    cfg.train.warmup_steps = 0;
    cfg.train.grad_clip = 0.0;
    cfg.train.steps = 50;
    let samples = toy_samples(&cfg, 3);
    let dir = tempfile::tempdir().unwrap();
    let out = TrainOutputs { dir: dir.path().to_path_buf() };
    let (_, store) = Network::build(&cfg.model, cfg.seed).unwrap();
    match train(&cfg, store, &samples, Some(&out)) {
        Err(Error::Divergence { step, .. }) => assert!(step > 0),
        other => panic!("expected divergence, got {:?}", other.map(|o| o.log.len())),
    }
    assert!(out.last_good_checkpoint().exists());
}

#[test]
fn fine_loss_equals_coarse_loss_at_initialisation() {
    let cfg = common::toy_config(6);
    let (net, store) = Network::build(&cfg.model, cfg.seed).unwrap();
    let sample = positive_sample(&cfg);
    let mut g = Graph::new();
    let (_, v) = scene_loss(&mut g, &net, &store, &sample, &cfg.train).unwrap();
    assert!(v.coarse > 0.0);
    assert_eq!(v.fine, v.coarse);
}

#[test]
fn implicit_coarse_drops_only_the_coarse_term() {
    let mut cfg = common::toy_config(8);
    let (net, store) = Network::build(&cfg.model, cfg.seed).unwrap();
    let sample = positive_sample(&cfg);
    let mut g = Graph::new();
    let (_, explicit) = scene_loss(&mut g, &net, &store, &sample, &cfg.train).unwrap();
    cfg.train.implicit_coarse = true;
    let mut g = Graph::new();
    let (loss, implicit) = scene_loss(&mut g, &net, &store, &sample, &cfg.train).unwrap();
    assert_eq!(implicit.coarse, explicit.coarse, "still reported");
    let diff = explicit.total - implicit.total;
    assert!((diff - cfg.train.loss.alpha * explicit.coarse).abs() < 1e-12);
    // The coarse head is still trained through the refined radii.
    let grads = g.backward(loss).unwrap();
    let id = store.id("reg_head.radii.bias").unwrap();
    assert!(grads.param(id).unwrap().iter().any(|&v| v != 0.0));
}

fn perturbed_fine(store: &mut ParamStore, seed: u64) {
    let mut r = common::rng(seed);
    for name in ["fine.regressor.weight", "fine.regressor.bias"] {
        let id = store.id(name).unwrap();
        for v in store.get_mut(id).tensor.values_mut() {
            *v = r.gen_range(-0.2..0.2);
        }
    }
}

#[test]
fn detaching_sampling_coordinates_changes_coarse_gradient() {
    let mut cfg = common::toy_config(9);
    cfg.model.hbb_enabled = false;
    cfg.train.implicit_coarse = true;
    let (_, mut store) = Network::build(&cfg.model, cfg.seed).unwrap();
    perturbed_fine(&mut store, 9);
    let sample = positive_sample(&cfg);
    let grad_of = |detach: bool, name: &str| {
        let mut model = cfg.model.clone();
        model.detach_sampling_coords = detach;
        let net = Network::bind(&model, &store).unwrap();
        let mut g = Graph::new();
        let (loss, _) = scene_loss(&mut g, &net, &store, &sample, &cfg.train).unwrap();
        let grads = g.backward(loss).unwrap();
        grads.param(store.id(name).unwrap()).unwrap().to_vec()
    };
    let attached = grad_of(false, "reg_head.radii.weight");
    let detached = grad_of(true, "reg_head.radii.weight");
    let delta: f64 = attached.iter().zip(&detached).map(|(a, b)| (a - b).abs()).sum();
    assert!(delta > 1e-9, "coordinate path carries no gradient");
    // The regressor sees the same sampled features either way.
    assert_eq!(grad_of(false, "fine.regressor.weight"), grad_of(true, "fine.regressor.weight"));
}

#[test]
fn descent_on_a_single_free_scalar() {
    let cfg = common::toy_config(12);
    let (net, mut store) = Network::build(&cfg.model, cfg.seed).unwrap();
    let sample = positive_sample(&cfg);
    let level = sample.targets.levels.iter().find(|l| !l.positives.is_empty()).unwrap();
    let free = store.id(&format!("scales.coarse_{}", level_name(level.stride))).unwrap();
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        store.set_trainable(id, id == free);
    }
    let loss_at = |store: &ParamStore| {
        let mut g = Graph::new();
        scene_loss(&mut g, &net, store, &sample, &cfg.train).unwrap().1.total
    };
    let start = loss_at(&store);
    let frozen: Vec<Vec<f64>> = store.iter().map(|(_, p)| p.tensor.values().to_vec()).collect();
    let mut opt = Sgd::new(&store, 0.0, 0.0);
    let mut prev = start;
    for _ in 0..10 {
        store.zero_grads();
        let mut g = Graph::new();
        let (loss, _) = scene_loss(&mut g, &net, &store, &sample, &cfg.train).unwrap();
        g.backward(loss).unwrap().accumulate_into(&mut store, 1.0);
        opt.step(&mut store, 1e-3, 0.0);
        let now = loss_at(&store);
        assert!(now <= prev + 1e-12, "{now} > {prev}");
        prev = now;
    }
    assert!(prev < start);
    for ((id, p), before) in store.iter().zip(&frozen) {
        if id != free {
            assert_eq!(p.tensor.values(), &before[..], "{} moved", p.name);
        }
    }
}
