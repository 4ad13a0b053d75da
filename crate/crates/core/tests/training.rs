use std::path::Path;

use indexmap::IndexMap;

use auxq::auxiliary::AuxiliarySpec;
use auxq::config::{ExperimentConfig, Method};
use auxq::data::{Pipeline, Splits};
use auxq::layers::Mode;
use auxq::net::Network;
use auxq::optim::{LrSchedule, Optimizer, OptimizerConfig};
use auxq::param::ParamStore;
use auxq::quant::{self, eval};
use auxq::train::{self, Trainer};
use auxq::{Error, Tensor};

fn blobs() -> (ExperimentConfig, Splits) {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let cfg = ExperimentConfig::load(&dir.join("blobs.json")).unwrap();
    let splits = cfg.dataset.load(&dir).unwrap();
    (cfg, splits)
}

fn batch(splits: &Splits, cfg: &ExperimentConfig, from: usize) -> (Tensor<f64>, Vec<usize>) {
    let idx: Vec<usize> = (from..from + 16).collect();
    Pipeline::from_spec(&cfg.dataset).eval_batch(&splits.train, &idx)
}

fn params_equal(a: &Network<f64>, b: &Network<f64>) -> bool {
    a.params().iter().all(|p| p.master.bit_eq(b.params().master(&p.name)))
        && a.buffers().iter().all(|(k, v)| v.bit_eq(&b.buffers()[k]))
}

#[test]
fn separable_blobs_are_learned_in_two_epochs() {
    let (cfg, splits) = blobs();
    let t = train::pretrain::<f64>(&cfg, &splits).unwrap();
    let last = t.rows().iter().rev().find(|r| r.split == auxq::metrics::Split::Train).unwrap();
    assert_eq!(last.epoch, 2);
    assert!(last.top1 >= 0.99, "train top-1 {}", last.top1);
}

#[test]
fn zero_epochs_leave_the_initialization() {
    let (mut cfg, splits) = blobs();
    cfg.pretrain.as_mut().unwrap().epochs = 0;
    let t = train::pretrain::<f64>(&cfg, &splits).unwrap();
    assert!(t.rows().is_empty());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.ckpt");
    t.save(&path).unwrap();
    let loaded = train::load_network::<f64>(&path).unwrap();
    let init = Network::<f64>::build(loaded.spec(), cfg.train.seed).unwrap();
    assert!(params_equal(&loaded, &init));
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let (cfg, splits) = blobs();
    let a = train::pretrain::<f64>(&cfg, &splits).unwrap();
    let b = train::pretrain::<f64>(&cfg, &splits).unwrap();
    assert!(params_equal(a.network(), b.network()));
    let mut other = cfg.clone();
    other.train.seed += 1;
    let c = train::pretrain::<f64>(&other, &splits).unwrap();
    assert!(!params_equal(a.network(), c.network()));
}

#[test]
fn auxi_with_zero_lr_changes_no_parameter() {
    let (mut cfg, splits) = blobs();
    cfg.train.method = Method::Auxi;
    cfg.train.stage.lr = LrSchedule::constant(0.0);
    let init = Network::<f64>::build(&cfg.network, 1).unwrap();
    let t = train::finetune(init.clone(), &cfg, cfg.auxiliary.as_ref(), &splits).unwrap();
    assert_eq!(t.rows().len(), 2 * cfg.train.stage.epochs);
    for p in init.params().iter() {
        assert!(p.master.bit_eq(t.network().params().master(&p.name)), "{} moved", p.name);
    }
}

#[test]
fn single_adam_step_matches_closed_form() {
    let (b1, b2, eps, lr) = (0.9, 0.999, 1e-8, 0.01);
    let w0 = [0.5, -1.5, 2.0];
    let g = [[0.3, -0.2, 1e-3], [-0.1, 0.4, 2.0]];
    let mut store = ParamStore::<f64>::new();
    store.insert("w", Tensor::from_f64(&[3], &w0).unwrap());
    let mut opt = Optimizer::new(OptimizerConfig::Adam { beta1: b1, beta2: b2, eps }).unwrap();
    let (mut m, mut v, mut w) = ([0.0; 3], [0.0; 3], w0);
    for (t, gt) in g.iter().enumerate() {
        let grads: IndexMap<String, Tensor<f64>> = [("w".to_string(), Tensor::from_f64(&[3], gt).unwrap())].into();
        opt.step(&mut store, &grads, lr).unwrap();
        let t = (t + 1) as i32;
        for i in 0..3 {
            m[i] = b1 * m[i] + (1.0 - b1) * gt[i];
            v[i] = b2 * v[i] + (1.0 - b2) * gt[i] * gt[i];
            let mh = m[i] / (1.0 - b1.powi(t));
            let vh = v[i] / (1.0 - b2.powi(t));
            w[i] -= lr * mh / (vh.sqrt() + eps);
        }
        for (got, want) in store.master("w").data().iter().zip(&w) {
            assert!((got - want).abs() < 1e-12, "step {t}: {got} vs {want}");
        }
    }
}

#[test]
fn random_network_scores_chance_on_balanced_classes() {
    let (mut cfg, _) = blobs();
    let n = 2000;
    cfg.dataset.source = auxq::data::Source::Synthetic {
        synth: auxq::data::SynthKind::Blobs,
        n,
        classes: 10,
        seed: 5,
        size: 8,
        n_test: Some(n),
    };
    cfg.network.num_classes = 10;
    let splits = cfg.dataset.load(Path::new(".")).unwrap();
    let p = Pipeline::from_spec(&cfg.dataset);
    let sigma = (0.1f64 * 0.9 / n as f64).sqrt();
    for seed in 0..3 {
        let net = Network::<f64>::build(&cfg.network, seed).unwrap();
        let e = train::evaluate(&net, &splits.test, &p, 256).unwrap();
        assert!((e.top1 - 0.1).abs() <= 3.0 * sigma, "seed {seed}: top-1 {}", e.top1);
        assert!(e.top5.unwrap() >= e.top1);
        let again = train::evaluate(&net, &splits.test, &p, 100).unwrap();
        assert_eq!(e.top1, again.top1);
        assert_eq!(e.top5, again.top5);
        assert!((e.loss - again.loss).abs() < 1e-12);
        let same = train::evaluate(&net, &splits.test, &p, 256).unwrap();
        assert_eq!(e.loss.to_bits(), same.loss.to_bits());
    }
}

#[test]
fn empty_split_is_usage_error() {
    let (cfg, splits) = blobs();
    let net = Network::<f64>::build(&cfg.network, 1).unwrap();
    let empty = splits.test.clone().truncate(0);
    let err = train::evaluate(&net, &empty, &Pipeline::from_spec(&cfg.dataset), 8).unwrap_err();
    assert!(matches!(err, Error::Usage(_)));
}

#[test]
fn checkpoint_round_trip_reproduces_the_next_step() {
    let (mut cfg, splits) = blobs();
    cfg.train.method = Method::Auxi;
    cfg.train.stage.epochs = 3;
    let init = Network::<f64>::build(&cfg.network, 1).unwrap();
    let mut t = Trainer::finetune(init, &cfg, cfg.auxiliary.as_ref()).unwrap();
    t.train_epoch(&splits.train).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.ckpt");
    t.save(&path).unwrap();
    let mut back = Trainer::<f64>::load(&path).unwrap();
    assert_eq!(back.epoch(), t.epoch());
    assert_eq!(back.global_step(), t.global_step());

    let (x, y) = batch(&splits, &cfg, 0);
    let a = t.step(&x, &y, 1e-3).unwrap();
    let b = back.step(&x, &y, 1e-3).unwrap();
    assert_eq!(a.loss.to_bits(), b.loss.to_bits());
    assert!(params_equal(t.network(), back.network()));
    let ra = t.train_epoch(&splits.train).unwrap();
    let rb = back.train_epoch(&splits.train).unwrap();
    assert!(ra.same_result(&rb));
    assert!(params_equal(t.network(), back.network()));
    for p in t.auxiliary().unwrap().params().iter() {
        assert!(p.master.bit_eq(back.auxiliary().unwrap().params().master(&p.name)), "{}", p.name);
    }
}

#[test]
fn masters_are_never_quantized_in_place() {
    let (mut cfg, splits) = blobs();
    cfg.train.method = Method::Auxi;
    let init = Network::<f64>::build(&cfg.network, 1).unwrap();
    let mut t = Trainer::finetune(init, &cfg, cfg.auxiliary.as_ref()).unwrap();
    for i in 0..5 {
        let (x, y) = batch(&splits, &cfg, 16 * i);
        t.step(&x, &y, 1e-2).unwrap();
    }
    let mut net = t.network().clone();
    let mut g = quant::ste_graph();
    let xv = g.constant(batch(&splits, &cfg, 0).0);
    let out = net.forward(&mut g, xv, Mode::Train).unwrap();
    for tr in &out.trace {
        let master = t.network().params().master(&format!("{}.weight", tr.layer));
        let want = eval::weight_scheme(master, tr.weight_scheme).unwrap();
        assert!(g.value(tr.weight).bit_eq(&want), "{}", tr.layer);
        if !tr.weight_scheme.is_full() {
            assert!(!want.bit_eq(master), "{} master holds quantized values", tr.layer);
        }
    }
}

#[test]
fn lr_column_follows_the_schedule() {
    let (mut cfg, splits) = blobs();
    cfg.train.stage.epochs = 4;
    cfg.train.stage.lr = LrSchedule { initial: 2e-3, milestones: vec![1, 3] };
    let init = Network::<f64>::build(&cfg.network, 1).unwrap();
    let t = train::finetune(init, &cfg, None, &splits).unwrap();
    let want = [2e-3, 2e-4, 2e-4, 2e-5];
    for r in t.rows() {
        let w = want[r.epoch - 1];
        assert!((r.lr - w).abs() <= 1e-15 * w, "epoch {} {:?}: {} vs {w}", r.epoch, r.split, r.lr);
        assert_eq!(r.lr, cfg.train.stage.lr.lr_at(r.epoch - 1));
    }
    assert!(auxq::metrics::check_rows(t.rows()).is_empty());
}

#[test]
fn non_finite_weights_abort_with_divergence() {
    let (cfg, splits) = blobs();
    let init = Network::<f64>::build(&cfg.network, 1).unwrap();
    let mut t = Trainer::finetune(init, &cfg, None).unwrap();
    t.network_mut().params_mut().get_mut("blocks.1.conv1.weight").unwrap().master.data_mut()[0] = f64::NAN;
    let before = t.network().buffers().clone();
    let (x, y) = batch(&splits, &cfg, 0);
    let err = t.step(&x, &y, 1e-3).unwrap_err();
    assert!(matches!(err, Error::Diverged { epoch: 1, step: 1, .. }), "{err}");
    assert_eq!(t.global_step(), 0);
    for (k, v) in &before {
        assert!(v.bit_eq(&t.network().buffers()[k]), "{k} changed by a failed step");
    }
}

#[test]
fn finetune_rejects_inconsistent_requests() {
    let (mut cfg, _) = blobs();
    let init = Network::<f64>::build(&cfg.network, 1).unwrap();
    let aux = cfg.auxiliary.clone().unwrap();

    cfg.train.method = Method::Auxi;
    assert!(matches!(Trainer::finetune(init.clone(), &cfg, None), Err(Error::Validation(_))));
    cfg.train.method = Method::Baseline;
    assert!(matches!(Trainer::finetune(init.clone(), &cfg, Some(&aux)), Err(Error::Validation(_))));

    let bad_aux = AuxiliarySpec { adaptors: aux.adaptors[..2].to_vec(), width: 8 };
    cfg.train.method = Method::Auxi;
    assert!(matches!(Trainer::finetune(init.clone(), &cfg, Some(&bad_aux)), Err(Error::Validation(_))));

    let mut other = cfg.clone();
    other.network.num_classes = 7;
    assert!(matches!(Trainer::finetune(init.clone(), &other, Some(&aux)), Err(Error::Validation(_))));

    let mut quantized = init.clone();
    quantized.set_policy(quant::PrecisionPolicy::uniform(2)).unwrap();
    cfg.train.method = Method::Kd;
    assert!(matches!(Trainer::finetune(quantized, &cfg, None), Err(Error::Validation(_))));
}

#[test]
fn methods_see_the_same_batches_under_one_seed() {
    let (mut cfg, splits) = blobs();
    cfg.train.stage.epochs = 1;
    cfg.train.stage.lr = LrSchedule::constant(0.0);
    let init = Network::<f64>::build(&cfg.network, 1).unwrap();
    let base = train::finetune(init.clone(), &cfg, None, &splits).unwrap();
    cfg.train.method = Method::Kd;
    cfg.train.kd.beta = 0.0;
    let kd = train::finetune(init, &cfg, None, &splits).unwrap();
    assert!(base.rows()[0].same_result(&kd.rows()[0]));
}

#[test]
fn single_method_comparison_has_one_cell_per_seed() {
    let (mut cfg, splits) = blobs();
    cfg.train.stage.epochs = 1;
    let table = train::run_comparison::<f64>(&cfg, &splits, &[Method::Baseline], &[1, 2, 3], 1).unwrap();
    assert_eq!(table.cells.len(), 3);
    assert!(table.cells.iter().all(|c| c.ok && c.rows.len() == 2));
    assert_eq!(table.to_csv().lines().count(), 4);
    let s = table.summary_for(Method::Baseline).unwrap();
    assert_eq!((s.runs, s.failed), (3, 0));
    assert!(s.min_top1.unwrap() <= s.mean_top1.unwrap() && s.mean_top1.unwrap() <= s.max_top1.unwrap());
}

#[test]
fn failing_cell_is_recorded_and_the_grid_continues() {
    let (mut cfg, splits) = blobs();
    cfg.train.stage.epochs = 1;
    cfg.train.head_weights = Some(vec![1.0]);
    let table =
        train::run_comparison::<f64>(&cfg, &splits, &[Method::Baseline, Method::AdditionalLoss], &[1], 1).unwrap();
    assert!(table.cell(Method::Baseline, 1).unwrap().ok);
    let bad = table.cell(Method::AdditionalLoss, 1).unwrap();
    assert!(!bad.ok && bad.error.as_deref().unwrap().contains("head weights"));
}
