use nmn_core::datatools::{make_synthetic_pair, Dataset, SynthSpec};
use nmn_core::pipeline::{prepare, Prepared};
use nmn_core::training::{initial_params, run_training, LogEntry, Phase, TrainConfig, Trainer};

fn small_dataset(seed: u64) -> Dataset {
    let mut spec = SynthSpec::new(40, 4.0, seed);
    spec.feature_dim = 12;
    spec.feature_noise = 0.05;
    make_synthetic_pair(&spec).unwrap().into_dataset()
}

fn cheap_config() -> TrainConfig {
    let mut c = TrainConfig::default();
    c.neighbor_dim = 6;
    c.t = 5;
    c.k = 3;
    c.pretrain_max_epochs = Some(2);
    c
}

fn setup(config: &TrainConfig) -> (Dataset, Prepared) {
    let ds = small_dataset(3);
    let prepared = prepare(&ds, config).unwrap();
    (ds, prepared)
}

#[test]
fn ws_rounds_land_on_interval_multiples() {
    let mut config = cheap_config();
    config.max_epochs = 100;
    let (_ds, p) = setup(&config);
    let out = run_training(&config, &p.merged, &p.train_nodes).unwrap();
    let main: Vec<&LogEntry> = out.log.iter().filter(|e| e.phase == Phase::Main).collect();
    assert_eq!(main.len(), 100);
    let ws: Vec<usize> = main.iter().filter(|e| e.ws_round).map(|e| e.epoch).collect();
    assert_eq!(ws, vec![50, 100]);
    assert!(main.iter().all(|e| e.ws_round == e.ws_loss.is_some()));
    assert!(out.log.iter().filter(|e| e.phase == Phase::Pretrain).all(|e| !e.ws_round));
}

#[test]
fn ws_round_touches_only_the_sampler() {
    let config = cheap_config();
    let (_ds, p) = setup(&config);
    let params = initial_params(&config, &p.merged);
    let mut trainer = Trainer::new(config, &p.merged, &p.train_nodes, params).unwrap();
    trainer.main_epoch(1).unwrap();
    let before = trainer.params.clone();
    trainer.ws_round(1).unwrap();
    let mut changed = Vec::new();
    for ((name, a), (_, b)) in before.named_arrays().into_iter().zip(trainer.params.named_arrays()) {
        let same = a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits());
        if !same {
            changed.push(name);
        }
    }
    assert_eq!(changed, vec!["w_s".to_string()]);
}

#[test]
fn five_epoch_runs_are_bitwise_reproducible() {
    let mut config = cheap_config();
    config.max_epochs = 5;
    config.seed = 17;
    let run = || {
        let (_ds, p) = setup(&config);
        run_training(&config, &p.merged, &p.train_nodes).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.log, b.log);
    for ((na, xa), (nb, xb)) in a.params.named_arrays().into_iter().zip(b.params.named_arrays()) {
        assert_eq!(na, nb);
        assert!(xa.iter().zip(xb.iter()).all(|(x, y)| x.to_bits() == y.to_bits()), "{na} differs");
    }
}

#[test]
fn zero_epochs_returns_initial_parameters() {
    let mut config = cheap_config();
    config.max_epochs = 0;
    let (_ds, p) = setup(&config);
    let out = run_training(&config, &p.merged, &p.train_nodes).unwrap();
    assert!(out.log.is_empty());
    assert_eq!(out.params, initial_params(&config, &p.merged));
}

#[test]
fn matching_loss_decreases_with_training() {
    let mut config = cheap_config();
    config.max_epochs = 30;
    config.lr = 0.01;
    let (_ds, p) = setup(&config);
    let out = run_training(&config, &p.merged, &p.train_nodes).unwrap();
    let main: Vec<f64> = out.log.iter().filter(|e| e.phase == Phase::Main).map(|e| e.loss).collect();
    assert!(main.last().unwrap() < main.first().unwrap(), "{main:?}");
}

#[test]
fn trainer_rejects_bad_inputs() {
    let config = cheap_config();
    let (_ds, p) = setup(&config);
    let params = initial_params(&config, &p.merged);
    assert!(Trainer::new(config.clone(), &p.merged, &[], params.clone()).is_err());
    let mut bad = config.clone();
    bad.ws_interval = 0;
    assert!(Trainer::new(bad, &p.merged, &p.train_nodes, params).is_err());
    let mut narrow = config;
    narrow.num_layers = 1;
    let wrong = nmn_core::model::ModelParams::init(5, 1, 3, 0.1, 0);
    assert!(Trainer::new(narrow, &p.merged, &p.train_nodes, wrong).is_err());
}
