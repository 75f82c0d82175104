//! End-to-end checks of the training harness: tasks, fine-tuning,
//! checkpoints and reproducibility.

use guilomo::bilevel::{run_search, split_dataset, NoObserver, OptimizerMode, SearchObserver, SearchSnapshot, StepMetrics};
use guilomo::harness::pipeline::{self, task_data};
use guilomo::harness::{
    evaluate, finetune, generate_task, load_final, load_search, save_search, AllocationSource, Example, RunConfig,
    TaskFamily, TaskSpec, ToyTransformer, ToyTransformerConfig,
};
use guilomo::{Error, Result};

fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model = ToyTransformerConfig {
        layers: 2,
        d_model: 16,
        d_ff: 32,
        heads: 2,
        vocab: 12,
        max_seq: 8,
        ..ToyTransformerConfig::default()
    };
    cfg.task = TaskSpec {
        train_size: 64,
        eval_size: 32,
        ..TaskSpec::default()
    };
    cfg.bilevel.steps = Some(6);
    cfg.bilevel.batch_size = 8;
    cfg.bilevel.e_max = 4;
    cfg.bilevel.r_max = 4;
    cfg.finetune.epochs = 2;
    cfg.finetune.batch_size = 8;
    cfg.allocation = AllocationSource::Uniform { experts: 2, rank: 2 };
    cfg
}

fn fresh_model(cfg: &RunConfig) -> ToyTransformer<f64> {
    let plan = pipeline::resolve_plan(cfg, None).unwrap();
    ToyTransformer::from_plan(&cfg.model, &plan, &cfg.moe_settings(), cfg.moe.c_b, cfg.bilevel.seed).unwrap()
}

fn search_model(cfg: &RunConfig) -> ToyTransformer<f64> {
    ToyTransformer::for_search(&cfg.model, &cfg.moe_settings(), cfg.moe.c_b, cfg.bilevel.seed).unwrap()
}

#[test]
fn copy_task_reaches_high_accuracy() {
    for seed in 0..3 {
        let mut cfg = RunConfig::default();
        cfg.task = TaskSpec {
            family: TaskFamily::Copy,
            k: 4,
            seed,
            ..TaskSpec::default()
        };
        cfg.bilevel.seed = seed;
        cfg.allocation = AllocationSource::Uniform { experts: 2, rank: 4 };
        cfg.finetune.epochs = 30;
        cfg.finetune.stop_at_accuracy = Some(0.95);
        let plan = pipeline::resolve_plan(&cfg, None).unwrap();
        let run = pipeline::train::<f64>(&cfg, &plan, None, None).unwrap();
        let acc = run.report.final_accuracy();
        assert!(acc >= 0.95, "seed {seed}: copy accuracy {acc} after {} epochs", run.report.epochs.len());
    }
}

#[test]
fn zero_learning_rate_leaves_everything_unchanged() {
    let mut cfg = tiny_config();
    cfg.finetune.lr = 0.0;
    let mut model = fresh_model(&cfg);
    let before = model.clone();
    let (train, eval) = task_data(&cfg).unwrap();
    let report = finetune(&mut model, &train, &eval, &cfg.finetune, 0).unwrap();
    assert_eq!(model, before);
    for e in &report.epochs {
        assert_eq!(e.eval_sft, report.initial.sft);
        assert_eq!(e.eval_accuracy, report.initial.accuracy);
    }
}

#[test]
fn frozen_weights_survive_training_and_search() {
    let cfg = tiny_config();
    let (train, eval) = task_data(&cfg).unwrap();
    let base = ToyTransformer::<f64>::base(&cfg.model, cfg.moe.c_b).unwrap().base_hash();

    let mut model = fresh_model(&cfg);
    assert_eq!(model.base_hash(), base);
    finetune(&mut model, &train, &eval, &cfg.finetune, 0).unwrap();
    assert_eq!(model.base_hash(), base);

    let mut model = search_model(&cfg);
    let split = split_dataset(&train, cfg.bilevel.seed).unwrap();
    run_search(&mut model, &split, &cfg.bilevel, 6, &mut NoObserver, None).unwrap();
    assert_eq!(model.base_hash(), base);
}

#[test]
fn zero_output_head_gives_uniform_loss() {
    let cfg = tiny_config();
    let mut model = fresh_model(&cfg);
    model.lm_head.value.fill(0.0);
    let (_, eval) = task_data(&cfg).unwrap();
    let m = evaluate(&model, &eval, 8).unwrap();
    let expected = (cfg.model.vocab as f64).ln();
    assert!((m.sft - expected).abs() < 1e-12, "{} vs {expected}", m.sft);
}

fn assert_uniform_labels(spec: &TaskSpec, vocab: usize, max_seq: usize, classes: usize) {
    let (train, _) = generate_task(spec, vocab, max_seq).unwrap();
    let mut counts = vec![0usize; vocab];
    for ex in &train {
        counts[ex.targets[0]] += 1;
    }
    let n = train.len() as f64;
    let p = 1.0 / classes as f64;
    let sigma = (n * p * (1.0 - p)).sqrt();
    for (label, &c) in counts.iter().enumerate().take(classes) {
        assert!((c as f64 - n * p).abs() <= 3.0 * sigma, "{:?} label {label}: {c} of {n}", spec.family);
    }
    assert!(counts[classes..].iter().all(|&c| c == 0), "{:?}: labels outside range", spec.family);
}

#[test]
fn task_labels_are_uniform() {
    let sum = TaskSpec {
        family: TaskFamily::ModularSum,
        k: 3,
        train_size: 10_000,
        eval_size: 1,
        seed: 3,
        modulus: Some(10),
        swaps: None,
    };
    assert_uniform_labels(&sum, 32, 32, 10);
    let tracking = TaskSpec {
        family: TaskFamily::ObjectTracking,
        k: 5,
        modulus: None,
        ..sum
    };
    assert_uniform_labels(&tracking, 32, 32, 5);
}

#[test]
fn empty_answer_span_is_rejected() {
    let cfg = tiny_config();
    let model = fresh_model(&cfg);
    let ex = Example {
        tokens: vec![1, 2, 3, 11],
        answer_positions: vec![],
        targets: vec![],
    };
    assert!(matches!(model.loss(&[&ex]), Err(Error::InvalidArgument(_))));
}

#[test]
fn huge_learning_rate_aborts() {
    // The normed, frozen output head bounds the logits, so a blow-up shows
    // up as non-finite activations before the loss can reach 10x.
    let mut cfg = tiny_config();
    cfg.finetune.lr = 1e4;
    cfg.finetune.epochs = 5;
    let mut model = fresh_model(&cfg);
    let (train, eval) = task_data(&cfg).unwrap();
    let err = finetune(&mut model, &train, &eval, &cfg.finetune, 0).unwrap_err();
    assert!(matches!(err, Error::Diverged(_) | Error::NonFinite(_)), "{err}");
}

struct SnapshotAt {
    step: usize,
    taken: Option<SearchSnapshot<f64>>,
}

impl SearchObserver<f64> for SnapshotAt {
    fn on_step(&mut self, m: &StepMetrics, snapshot: &dyn Fn() -> SearchSnapshot<f64>) -> Result<()> {
        if m.step + 1 == self.step {
            self.taken = Some(snapshot());
        }
        Ok(())
    }
}

#[test]
fn interrupted_search_resumes_bit_exactly() {
    let cfg = tiny_config();
    let (train, _) = task_data(&cfg).unwrap();
    let split = split_dataset(&train, cfg.bilevel.seed).unwrap();
    let total = 6;

    let mut full = search_model(&cfg);
    let mut observer = SnapshotAt { step: 3, taken: None };
    let full_out = run_search(&mut full, &split, &cfg.bilevel, total, &mut observer, None).unwrap();
    let snap = observer.taken.expect("snapshot at step 3");

    let dir = tempfile::tempdir().unwrap();
    let mut partial = search_model(&cfg);
    snap.restore(&mut partial).unwrap();
    save_search(dir.path(), &cfg, &partial, &snap, total, None).unwrap();
    let loaded = load_search::<f64>(dir.path()).unwrap();
    assert_eq!(loaded.snapshot, snap);
    assert_eq!(loaded.manifest.config, cfg);

    let mut resumed = loaded.model;
    let resumed_out = run_search(&mut resumed, &split, &cfg.bilevel, total, &mut NoObserver, Some(&loaded.snapshot)).unwrap();
    assert_eq!(resumed, full);
    assert_eq!(resumed_out.pi_star, full_out.pi_star);
    assert_eq!(resumed_out.model_opt, full_out.model_opt);
    assert_eq!(resumed_out.gsv_opt, full_out.gsv_opt);
}

#[test]
fn pipeline_search_checkpoint_round_trips() {
    let cfg = tiny_config();
    let out = tempfile::tempdir().unwrap();
    let run = pipeline::search::<f64>(&cfg, out.path(), None).unwrap();
    let loaded = load_search::<f64>(&pipeline::search_checkpoint_dir(out.path())).unwrap();
    assert_eq!(loaded.model, run.checkpoint.model);
    assert_eq!(loaded.snapshot, run.checkpoint.snapshot);
    assert_eq!(loaded.pi_star, run.checkpoint.pi_star);
    assert_eq!(pipeline::allocate::<f64>(&pipeline::search_checkpoint_dir(out.path())).unwrap(), run.plan);
}

#[test]
fn final_checkpoint_reproduces_eval_metrics() {
    let cfg = tiny_config();
    let out = tempfile::tempdir().unwrap();
    let plan = pipeline::resolve_plan(&cfg, None).unwrap();
    let run = pipeline::train::<f64>(&cfg, &plan, None, Some(out.path())).unwrap();
    let (manifest, model) = load_final::<f64>(&pipeline::final_checkpoint_dir(out.path())).unwrap();
    assert_eq!(manifest.config, cfg);
    assert_eq!(model, run.model);
    assert_eq!(
        pipeline::evaluate_model(&cfg, &model).unwrap(),
        pipeline::evaluate_model(&cfg, &run.model).unwrap()
    );
}

#[test]
fn plain_sgd_pipeline_is_deterministic() {
    let mut cfg = tiny_config();
    cfg.bilevel.optimizer_mode = OptimizerMode::PlainSgd;
    cfg.finetune.optimizer_mode = OptimizerMode::PlainSgd;
    cfg.allocation = AllocationSource::Guilomo;
    let once = || {
        let out = tempfile::tempdir().unwrap();
        let searched = pipeline::search::<f64>(&cfg, out.path(), None).unwrap();
        let run = pipeline::train(&cfg, &searched.plan, Some(&searched.checkpoint), None).unwrap();
        (searched.plan, run.report)
    };
    assert_eq!(once(), once());
}
