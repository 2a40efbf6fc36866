use super::*;
use crate::bbox::BBox;
use crate::blur::{make_kernel, BlurKernel};
use crate::config::{LossWeights, RunConfig, TrainConfig, ViTConfig};
use crate::deem::{resolve_exit, ExitRule};
use crate::harness::{generate_sequence, SequenceSpec};
use crate::image::Image;
use crate::model::Model;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny_cfg() -> ViTConfig {
    ViTConfig {
        depth: 4,
        embed_dim: 16,
        num_heads: 2,
        template_side: 16,
        search_side: 32,
        enforced_blocks: 1,
        ..Default::default()
    }
}

fn tiny_run() -> RunConfig {
    RunConfig {
        model: tiny_cfg(),
        loss: LossWeights::default(),
        train: TrainConfig {
            batch_size: 2,
            warmup_steps: 0,
            ..Default::default()
        },
    }
}

fn frames(seed: u64, n: usize) -> crate::harness::Sequence {
    let spec = SequenceSpec {
        length: n,
        seed,
        ..Default::default()
    };
    generate_sequence(&spec).unwrap().into_sequence("s")
}

fn batch(cfg: &ViTConfig, seed: u64, n: usize) -> Vec<TrainSample> {
    let seq = frames(seed, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_batch(&[seq], cfg, &TrainConfig::default(), n, &mut rng).unwrap()
}

#[test]
fn samples_match_config_and_contain_target() {
    let cfg = tiny_cfg();
    for s in batch(&cfg, 3, 6) {
        assert_eq!((s.template.height(), s.template.width()), (16, 16));
        assert_eq!((s.search.height(), s.search.width()), (32, 32));
        assert!(s.target.gt_box.is_valid_normalized());
        assert!([3, 5, 7].contains(&s.blur_kernel.length()));
    }
    let mut train = TrainConfig {
        blur_prob: 0.0,
        ..Default::default()
    };
    let seq = frames(3, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let b = sample_batch(&[seq.clone()], &cfg, &train, 4, &mut rng).unwrap();
    assert!(b.iter().all(|s| s.blur_kernel.is_identity()));
    train.search_shift = 0.0;
    train.search_scale_jitter = 0.0;
    let s = make_sample(&cfg, &train, &seq.frames[0], &seq.boxes[0], &seq.frames[1], &seq.boxes[1], &mut rng).unwrap();
    assert!((s.target.gt_box.cx - 0.5).abs() < 1e-12 && (s.target.gt_box.cy - 0.5).abs() < 1e-12);
}

#[test]
fn zero_learning_rate_steps_repeat_exactly() {
    let mut run = tiny_run();
    run.train.lr = 0.0;
    run.train.weight_decay = 0.0;
    let mut model = Model::new(run.model.clone(), 1).unwrap();
    let b = batch(&run.model, 9, 2);
    let opt = AdamW::new(0.0, 0.0);
    let mut state = OptState::default();
    let opts = StepOptions::from_train(&run.train, 0);
    let r1 = train_step(&b, &mut model, &run.loss, &opt, &mut state, opts, 0.0).unwrap();
    let r2 = train_step(&b, &mut model, &run.loss, &opt, &mut state, opts, 0.0).unwrap();
    assert_eq!(r1.losses, r2.losses);
    assert_eq!(r1.overall, r2.overall);
    assert!(train_step(&[], &mut model, &run.loss, &opt, &mut state, opts, 0.0).is_err());
}

#[test]
fn identity_blur_contributes_nothing() {
    let run = tiny_run();
    let model = Model::new(run.model.clone(), 2).unwrap();
    let mut b = batch(&run.model, 4, 1).remove(0);
    b.blur_kernel = BlurKernel::identity();
    let w = LossWeights { blur: 0.0, ..Default::default() };
    let opts = StepOptions { deem: true, warmup: false, mbrv: true };
    let mut s = crate::numerics::Session::training(&model.params);
    let f = sample_forward(&mut s, &model.cfg, &w, &b, opts).unwrap();
    let v = f.terms.values(&s);
    assert_eq!(v.blur, 0.0);
    assert_eq!(s.item(f.loss), v.total(&w).unwrap());

    // a real blur moves the features
    b.blur_kernel = make_kernel(7, 0.3).unwrap();
    let mut s = crate::numerics::Session::training(&model.params);
    let f = sample_forward(&mut s, &model.cfg, &w, &b, opts).unwrap();
    assert!(f.terms.values(&s).blur > 0.0);
}

#[test]
fn exit_options_shape_the_loss() {
    let run = tiny_run();
    let model = Model::new(run.model.clone(), 5).unwrap();
    let b = batch(&run.model, 6, 1).remove(0);
    let w = LossWeights::default();
    let forward = |opts| {
        let mut s = crate::numerics::Session::training(&model.params);
        let f = sample_forward(&mut s, &model.cfg, &w, &b, opts).unwrap();
        (f.exit_layer, f.terms.values(&s))
    };
    let (l_off, v_off) = forward(StepOptions { deem: false, warmup: false, mbrv: false });
    assert_eq!(l_off, 4);
    assert_eq!(v_off.sparsity, 0.0);
    assert_eq!(v_off.blur, 0.0);
    let (l_warm, v_warm) = forward(StepOptions { deem: true, warmup: true, mbrv: false });
    assert_eq!(l_warm, 4);
    assert!(v_warm.sparsity > 0.0);
    assert_eq!(v_warm.cls, v_off.cls);

    // dynamic exit agrees with the rule applied to the gate scores
    let (l_dyn, _) = forward(StepOptions { deem: true, warmup: false, mbrv: false });
    let mut s = crate::numerics::Session::inference(&model.params);
    let (trace, blocks, _) = lazy_forward(&mut s, &model.cfg, &b.template, &b.search, ExitMode::Dynamic).unwrap();
    assert_eq!(l_dyn, trace.exit_layer);
    assert_eq!(blocks, trace.exit_layer);
    let again = resolve_exit(&ExitRule::from(&model.cfg), |l| trace.score_at(l).unwrap());
    assert_eq!(again, trace);
}

#[test]
fn batch_gradient_is_mean_of_sample_gradients() {
    let run = tiny_run();
    let b = batch(&run.model, 12, 2);
    let sgd_like = AdamW {
        lr: 1.0,
        beta1: 0.0,
        beta2: 0.0,
        eps: 0.0,
        weight_decay: 0.0,
    };
    // with beta1 = beta2 = 0 and eps = 0 each entry moves by -sign(g)
    let opts = StepOptions { deem: true, warmup: true, mbrv: true };
    let mut m = Model::new(run.model.clone(), 3).unwrap();
    let before = m.params.clone();
    train_step(&b, &mut m, &run.loss, &sgd_like, &mut OptState::default(), opts, 0.0).unwrap();
    let mut expected = std::collections::BTreeMap::<String, Vec<f64>>::new();
    for sample in &b {
        let mut s = crate::numerics::Session::training(&before);
        let f = sample_forward(&mut s, &run.model, &run.loss, sample, opts).unwrap();
        s.backward(f.loss).unwrap();
        for (name, g) in s.param_grads() {
            let e = expected.entry(name).or_insert_with(|| vec![0.0; g.len()]);
            e.iter_mut().zip(&g).for_each(|(a, b)| *a += b / 2.0);
        }
    }
    for (name, g) in &expected {
        let (p0, p1) = (before.get(name).unwrap().data(), m.params.get(name).unwrap().data());
        for i in 0..g.len() {
            if g[i].abs() > 1e-12 {
                assert!((p1[i] - p0[i] + g[i].signum()).abs() < 1e-9, "{name}[{i}]");
            }
        }
    }
}

#[test]
fn tracker_init_crops() {
    let cfg = tiny_cfg();
    let mut frame = Image::filled(3, 64, 64, 0.0);
    for y in 0..64 {
        for x in 0..64 {
            frame.set(0, y, x, x as f64 / 63.0);
        }
    }
    let centered = track_init(&cfg, &frame, &BBox::new(32.0, 32.0, 8.0, 8.0)).unwrap();
    let t = centered.template_crop();
    // symmetric horizontal ramp around the center column
    let row = 8;
    assert!((t.get(0, row, 7) + t.get(0, row, 8) - 2.0 * 31.5 / 63.0).abs() < 1e-9);
    let corner = track_init(&cfg, &frame, &BBox::new(2.0, 2.0, 8.0, 8.0)).unwrap();
    let mean = frame.channel_means()[0];
    assert!((corner.template_crop().get(0, 0, 0) - mean).abs() < 1e-12);
    assert_eq!(track_init(&cfg, &frame, &BBox::new(32.0, 32.0, 8.0, 8.0)).unwrap(), centered);
    assert!(track_init(&cfg, &frame, &BBox::new(32.0, 32.0, 0.0, 8.0)).is_err());
    assert_eq!(centered.window().shape(), &[4, 4]);
}

#[test]
fn tracking_is_lazy_and_counts_match_estimate() {
    let cfg = tiny_cfg();
    let model = Model::new(cfg.clone(), 7).unwrap();
    let seq = frames(21, 6);
    let breakdown = FlopsBreakdown::new(&cfg);
    for mode in [ExitMode::Dynamic, ExitMode::FullDepth] {
        let run = track_sequence(&model, &seq.frames, &seq.boxes[0], mode).unwrap();
        assert_eq!(run.boxes.len(), seq.len());
        for d in &run.diags {
            assert_eq!(d.blocks_executed, d.exit_layer);
            assert_eq!(d.macs, breakdown.total(d.exit_layer, d.trace.examined()));
            if mode == ExitMode::Dynamic {
                assert_eq!(d.macs, flops_estimate(&cfg, d.exit_layer).unwrap());
            } else {
                assert_eq!(d.exit_layer, cfg.depth);
            }
        }
        for b in &run.boxes {
            assert!(b.cx >= 0.0 && b.cx <= 128.0 && b.w >= MIN_BOX_SIDE);
        }
    }
}

#[test]
fn unreachable_threshold_runs_full_depth() {
    let mut cfg = tiny_cfg();
    cfg.exit_slack = 1e-12;
    cfg.exit_weight = 1e-6;
    let model = Model::new(cfg.clone(), 8).unwrap();
    let seq = frames(2, 4);
    let run = track_sequence(&model, &seq.frames, &seq.boxes[0], ExitMode::Dynamic).unwrap();
    assert!(run.diags.iter().all(|d| d.exit_layer == cfg.depth && d.trace.examined() == cfg.depth - 1));
}

#[test]
fn concurrent_tracking_matches_serial() {
    let model = Model::new(tiny_cfg(), 9).unwrap();
    let (a, b) = (frames(30, 6), frames(31, 6));
    let serial = [&a, &b].map(|s| track_sequence(&model, &s.frames, &s.boxes[0], ExitMode::Dynamic).unwrap());
    let parallel = std::thread::scope(|scope| {
        let ha = scope.spawn(|| track_sequence(&model, &a.frames, &a.boxes[0], ExitMode::Dynamic).unwrap());
        let hb = scope.spawn(|| track_sequence(&model, &b.frames, &b.boxes[0], ExitMode::Dynamic).unwrap());
        [ha.join().unwrap(), hb.join().unwrap()]
    });
    assert_eq!(serial, parallel);
}

#[test]
fn loss_log_format() {
    let mut buf = Vec::new();
    let mut log = LossLog::new(&mut buf).unwrap();
    log.record(&StepReport {
        step: 1,
        losses: Default::default(),
        overall: 2.5,
        mean_exit_layer: 3.0,
    })
    .unwrap();
    drop(log);
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "step,L_cls,L_iou,L_L1,L_br,L_spar,L_overall,mean_L_e");
    let row: Vec<f64> = lines.next().unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert_eq!(row, vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 2.5, 3.0]);
}

#[test]
fn trainer_is_deterministic() {
    let seqs = vec![frames(40, 8), frames(41, 8)];
    let mut run = tiny_run();
    run.train.steps = 4;
    run.train.warmup_steps = 2;
    let trace = || {
        let mut t = Trainer::new(&run).unwrap();
        t.fit(&seqs, |_, _| Ok(())).unwrap()
    };
    assert_eq!(trace(), trace());
}
