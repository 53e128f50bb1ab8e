use karat_core::attention::KaratConfig;
use karat_core::checkpoint::Checkpoint;
use karat_core::vit::{AttentionKind, Vit, VitConfig};
use karat_core::{KaratError, Tensor};
use karat_harness::data::{synthetic_shapes, Augment, Dataset};
use karat_harness::train::*;
use karat_harness::transfer::{attention_transfer_train, transfer_forward};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_cfg() -> VitConfig {
    VitConfig::new(8, 1, 4, 16, 2, 2, 2)
}

fn quick(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig { epochs, warmup_epochs: 1, batch_size: 16, seed, eval_every: 1, ..TrainConfig::default() }
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    for bad in [
        TrainConfig { base_lr: 0.0, ..TrainConfig::default() },
        TrainConfig { warmup_epochs: 20, ..TrainConfig::default() },
        TrainConfig { batch_size: 0, ..TrainConfig::default() },
        TrainConfig { label_smoothing: 1.0, ..TrainConfig::default() },
    ] {
        assert!(matches!(bad.validate(), Err(KaratError::Config(_))));
    }
}

#[test]
fn smoothed_targets_sum_to_one() {
    let t = smoothed_target(2, 4, 0.1);
    assert_eq!(t, vec![0.025, 0.025, 0.925, 0.025]);
}

#[test]
fn runs_are_byte_identical_across_thread_counts() {
    let data = synthetic_shapes(48, 2, 8, 1).unwrap();
    let cfg = TrainConfig { augment: Augment { flip: true, crop_pad: 1 }, ..quick(2, 7) };
    let run = |threads: usize| {
        let dir = tempfile::tempdir().unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        let art = pool
            .install(|| train(Vit::new(small_cfg(), 3).unwrap(), &cfg, &data, None, Some(dir.path())))
            .unwrap();
        let metrics = std::fs::read(art.metrics_path.as_ref().unwrap()).unwrap();
        let ckpts: Vec<Vec<u8>> = art.checkpoints.iter().map(|p| std::fs::read(p).unwrap()).collect();
        (metrics, ckpts, dir)
    };
    let (m1, c1, _d1) = run(1);
    let (m2, c2, _d2) = run(4);
    assert_eq!(m1, m2);
    assert_eq!(c1, c2);
    assert_eq!(c1.len(), 2);
}

#[test]
fn artifacts_layout() {
    let data = synthetic_shapes(32, 2, 8, 2).unwrap();
    let test = synthetic_shapes(16, 2, 8, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { eval_every: 2, ..quick(3, 1) };
    let art = train(Vit::new(small_cfg(), 0).unwrap(), &cfg, &data, Some(&test), Some(dir.path())).unwrap();
    let text = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "epoch,step,lr,train_loss,top1,top5");
    assert_eq!(lines.len(), 4);
    assert!(lines[1].ends_with(",,"));
    let epochs: Vec<usize> = art.metrics.iter().map(|r| r.epoch).collect();
    assert_eq!(epochs, vec![1, 2, 3]);
    assert!(art.metrics.iter().all(|r| r.train_loss.is_finite()));
    assert!(dir.path().join("epoch_003.ckpt").exists());
    let best = Checkpoint::load(art.best.unwrap()).unwrap();
    assert_eq!(best.len(), art.model.params.len());
    assert_eq!(art.grad_norms.len(), 3 * 2);
}

#[test]
fn non_finite_parameters_abort_with_step() {
    let data = synthetic_shapes(16, 2, 8, 2).unwrap();
    let mut model = Vit::new(small_cfg(), 0).unwrap();
    let i = model.params.index_of("head/b").unwrap();
    model.params.get_mut(i).data_mut()[0] = f64::NAN;
    match train(model, &quick(2, 0), &data, None, None) {
        Err(KaratError::Numeric(m)) => assert!(m.contains("step 0"), "{m}"),
        other => panic!("{:?}", other.map(|_| ())),
    }
}

fn constant_model(classes: usize) -> Vit {
    let mut m = Vit::new(VitConfig::new(8, 1, 4, 16, 2, 1, classes), 0).unwrap();
    for name in ["head/w", "head/b"] {
        let i = m.params.index_of(name).unwrap();
        let z = Tensor::zeros(m.params.get(i).shape());
        *m.params.get_mut(i) = z;
    }
    m
}

fn balanced(n: usize, classes: usize) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
    let images = (0..n).map(|_| Tensor::randn(&[8, 8, 1], 1.0, &mut rng)).collect();
    Dataset::new(images, (0..n).map(|i| i % classes).collect(), classes).unwrap()
}

#[test]
fn constant_predictor_scores_chance() {
    let r = evaluate(&constant_model(10), &balanced(100, 10)).unwrap();
    assert_eq!(r.top1, 0.10);
    assert_eq!(r.top5, 0.50);
}

/// Recounts accuracy from an explicit confusion matrix built from raw logits.
#[test]
fn evaluation_matches_confusion_oracle() {
    let mut model = Vit::new(VitConfig::new(8, 1, 4, 16, 2, 1, 7), 5).unwrap();
    let i = model.params.index_of("head/w").unwrap();
    let w = Tensor::randn(model.params.get(i).shape(), 1.0, &mut ChaCha8Rng::seed_from_u64(1));
    *model.params.get_mut(i) = w;
    let data = balanced(100, 7);
    let r = evaluate(&model, &data).unwrap();

    let mut confusion = vec![vec![0usize; 7]; 7];
    let mut hits5 = 0;
    for (img, &label) in data.images.iter().zip(&data.labels) {
        let z = model.forward(img).unwrap().into_data();
        let mut idx: Vec<usize> = (0..7).collect();
        idx.sort_by(|&a, &b| z[b].total_cmp(&z[a]).then(a.cmp(&b)));
        confusion[label][idx[0]] += 1;
        hits5 += idx[..5].contains(&label) as usize;
    }
    let diag: usize = (0..7).map(|k| confusion[k][k]).sum();
    assert_eq!(r.top1, diag as f64 / 100.0);
    assert_eq!(r.top5, hits5 as f64 / 100.0);
    assert!(r.top5 >= r.top1);
}

#[test]
fn checkpoint_geometry_mismatch() {
    let ckpt = Vit::new(small_cfg(), 0).unwrap().to_checkpoint();
    let other = VitConfig::new(8, 1, 4, 8, 2, 2, 2);
    let data = balanced(4, 2);
    assert!(matches!(evaluate_checkpoint(&ckpt, &other, &data), Err(KaratError::Config(_))));
    assert!(evaluate_checkpoint(&ckpt, &small_cfg(), &data).is_ok());
}

#[test]
fn self_transfer_reproduces_forward() {
    let mut model = Vit::new(small_cfg(), 9).unwrap();
    let i = model.params.index_of("blocks/0/attn/q/w").unwrap();
    let q = Tensor::randn(model.params.get(i).shape(), 0.5, &mut ChaCha8Rng::seed_from_u64(2));
    *model.params.get_mut(i) = q;
    let student = model.clone();
    for s in 0..5 {
        let img = Tensor::randn(&[8, 8, 1], 1.0, &mut ChaCha8Rng::seed_from_u64(s));
        let a = model.forward(&img).unwrap();
        let b = transfer_forward(&model, &student, &img).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }
}

#[test]
fn transfer_freezes_queries_and_keys() {
    let data = synthetic_shapes(160, 2, 8, 4).unwrap();
    let teacher = Vit::new(small_cfg(), 1).unwrap();
    let cfg = TrainConfig { warmup_epochs: 0, ..quick(1, 11) };
    let art = attention_transfer_train(&teacher, small_cfg(), &cfg, &data, None, None).unwrap();
    assert_eq!(art.grad_norms.len(), 10);
    let fresh = Vit::new(small_cfg(), cfg.seed).unwrap();
    let mut moved = false;
    for i in 0..fresh.params.len() {
        let same = fresh.params.get(i).data().iter().zip(art.model.params.get(i).data()).all(|(a, b)| a.to_bits() == b.to_bits());
        if fresh.is_query_key_param(i) {
            assert!(same, "{}", fresh.params.name(i));
        } else if fresh.params.name(i).contains("/attn/v/w") {
            moved |= !same;
        }
    }
    assert!(moved);
}

#[test]
fn transfer_geometry_mismatch() {
    let teacher = Vit::new(small_cfg(), 1).unwrap();
    let data = synthetic_shapes(16, 2, 8, 4).unwrap();
    let deeper = VitConfig::new(8, 1, 4, 16, 2, 3, 2);
    assert!(matches!(
        attention_transfer_train(&teacher, deeper, &quick(2, 0), &data, None, None),
        Err(KaratError::Config(_))
    ));
}

/// A student guided by a trained KArAt teacher's attention learns at least as
/// well as the same student trained from scratch.
#[test]
fn karat_teacher_helps_student() {
    let data = synthetic_shapes(128, 2, 8, 6).unwrap();
    let kcfg = small_cfg().with_attention(AttentionKind::Karat(KaratConfig::fourier(3, 2)));
    let cfg = quick(4, 2);
    let teacher = train(Vit::new(kcfg, 3).unwrap(), &cfg, &data, None, None).unwrap().model;
    let guided = attention_transfer_train(&teacher, small_cfg(), &cfg, &data, None, None).unwrap();
    let scratch = train(Vit::new(small_cfg(), cfg.seed).unwrap(), &cfg, &data, None, None).unwrap();
    let guided_acc = guided.metrics.last().unwrap().top1.unwrap();
    let scratch_acc = evaluate(&scratch.model, &data).unwrap().top1;
    assert!(guided_acc >= scratch_acc, "{guided_acc} < {scratch_acc}");
}
