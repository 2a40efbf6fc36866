use super::*;
use crate::config::{RunConfig, TrainConfig, ViTConfig};
use crate::error::Error;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn still_spec() -> SequenceSpec {
    SequenceSpec {
        length: 6,
        velocity: Some([0.0, 0.0]),
        size_rate: Some([0.0, 0.0]),
        seed: 3,
        ..Default::default()
    }
}

#[test]
fn still_object_keeps_its_box() {
    let s = generate_sequence(&still_spec()).unwrap();
    assert!(s.gt_boxes.iter().all(|b| *b == s.gt_boxes[0]));
    assert!(s.blur_schedule.iter().all(Option::is_none));
    assert_eq!(s.frames.len(), 6);
}

#[test]
fn constant_velocity_advances_exactly() {
    let spec = SequenceSpec {
        start_center: Some([30.0, 60.0]),
        start_size: Some([12.0, 12.0]),
        velocity: Some([2.0, 0.0]),
        size_rate: Some([0.0, 0.0]),
        length: 20,
        ..still_spec()
    };
    let s = generate_sequence(&spec).unwrap();
    for (k, b) in s.gt_boxes.iter().enumerate() {
        assert_eq!((b.cx, b.cy), (30.0 + 2.0 * k as f64, 60.0));
    }
}

#[test]
fn boxes_follow_the_motion_law_with_bounces() {
    for seed in 0..10 {
        let spec = SequenceSpec {
            length: 120,
            max_speed: 6.0,
            max_size_rate: 0.05,
            seed,
            ..Default::default()
        };
        let s = generate_sequence(&spec).unwrap();
        let b0 = s.gt_boxes[0];
        let (mut center, mut size, mut law) = ([b0.cx, b0.cy], [b0.w, b0.h], s.motion);
        for (t, gt) in s.gt_boxes.iter().enumerate().skip(1) {
            for a in 0..2 {
                // size: multiplicative, reversing instead of leaving [min, max]
                let next = size[a] * (1.0 + law.size_rate[a]);
                if (spec.min_side..=spec.max_side).contains(&next) {
                    size[a] = next;
                } else {
                    law.size_rate[a] = -law.size_rate[a];
                }
            }
            for a in 0..2 {
                // center: reflected at the walls
                let (lo, hi) = (size[a] / 2.0, 128.0 - size[a] / 2.0);
                let mut next = center[a] + law.velocity[a];
                if next < lo || next > hi {
                    let wall = if next < lo { lo } else { hi };
                    next = 2.0 * wall - next;
                    law.velocity[a] = -law.velocity[a];
                }
                center[a] = next.clamp(lo, hi);
            }
            assert_eq!(BBox::new(center[0], center[1], size[0], size[1]), *gt, "seed {seed} frame {t}");
            let (x0, y0, x1, y1) = gt.corners();
            assert!(x0 >= 0.0 && y0 >= 0.0 && x1 <= 128.0 && y1 <= 128.0);
            assert!(gt.w >= spec.min_side && gt.w <= spec.max_side);
        }
    }
}

#[test]
fn generation_is_deterministic_and_twins_share_content() {
    let spec = SequenceSpec {
        length: 8,
        distractors: 2,
        object: ObjectKind::Disc,
        ..Default::default()
    };
    assert_eq!(generate_sequence(&spec).unwrap(), generate_sequence(&spec).unwrap());
    let clean = generate_sequence(&spec).unwrap();
    let blurred = generate_sequence(&SequenceSpec { blur_prob: 1.0, ..spec.clone() }).unwrap();
    assert_eq!(clean.gt_boxes, blurred.gt_boxes);
    for (k, (c, b)) in clean.frames.iter().zip(&blurred.frames).enumerate() {
        let kernel = blurred.blur_schedule[k].as_ref().unwrap();
        assert_eq!(crate::blur::apply_blur(c, kernel), *b);
    }
    let other = generate_sequence(&SequenceSpec { seed: 1, ..spec }).unwrap();
    assert_ne!(other.frames[0], clean.frames[0]);
}

#[test]
fn oversized_object_is_rejected() {
    let spec = SequenceSpec {
        start_size: Some([40.0, 40.0]),
        start_center: Some([10.0, 10.0]),
        ..Default::default()
    };
    assert!(matches!(generate_sequence(&spec), Err(Error::Config(_))));
    let spec = SequenceSpec {
        max_side: 200.0,
        ..Default::default()
    };
    assert!(generate_sequence(&spec).is_err());
}

#[test]
fn sequence_dir_round_trip_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let seq = generate_sequence(&SequenceSpec { length: 3, ..still_spec() }).unwrap().into_sequence("a");
    write_sequence_dir(dir.path(), &seq).unwrap();
    let back = load_sequence_dir(dir.path()).unwrap();
    assert_eq!(back.len(), 3);
    for (a, b) in back.boxes.iter().zip(&seq.boxes) {
        assert!((a.cx - b.cx).abs() < 1e-9 && (a.w - b.w).abs() < 1e-9);
    }

    let gt = dir.path().join(GROUNDTRUTH_FILE);
    std::fs::write(&gt, "10,20,30,40\n10\t20\t30\t40\n10 20 30 40\n").unwrap();
    let boxes = read_groundtruth(&gt).unwrap();
    assert!(boxes.iter().all(|b| b.to_array() == [25.0, 40.0, 30.0, 40.0]));

    std::fs::write(&gt, "10,20,30,40\n10,20,30,40\n").unwrap();
    match load_sequence_dir(dir.path()) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("expected a parse error, got {other:?}"),
    }
    std::fs::write(&gt, "10,20,30,40\n1,2,x,4\n").unwrap();
    match read_groundtruth(&gt) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
        other => panic!("expected a parse error, got {other:?}"),
    }
}

#[test]
fn prediction_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pred.txt");
    let boxes = vec![BBox::new(1.5, 2.25, 3.0, 4.0), BBox::new(10.0, 20.0, 5.0, 6.125)];
    write_predictions(&path, &boxes).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.lines().next().unwrap().starts_with("0,1.5,2.25,3,4"));
    assert_eq!(read_predictions(&path).unwrap(), boxes);
}

#[test]
fn evaluate_examples() {
    let gt: Vec<BBox> = (0..10).map(|i| BBox::new(20.0 + i as f64, 30.0, 10.0, 12.0)).collect();
    let r = evaluate(&gt, &gt).unwrap();
    assert_eq!((r.precision_at_20, r.success_auc), (1.0, 1.0));

    let shifted: Vec<BBox> = gt.iter().map(|b| BBox::new(b.cx + 15.0, b.cy + 20.0, b.w, b.h)).collect();
    let r = evaluate(&shifted, &gt).unwrap();
    assert_eq!(r.precision_at_20, 0.0);
    assert!(r.precision_curve[..25].iter().all(|&v| v == 0.0));
    assert!(r.precision_curve[25..].iter().all(|&v| v == 1.0));

    let gt2 = [BBox::new(10.0, 10.0, 4.0, 4.0), BBox::new(10.0, 10.0, 4.0, 4.0)];
    let pred2 = [gt2[0], BBox::new(50.0, 50.0, 4.0, 4.0)];
    let r = evaluate(&pred2, &gt2).unwrap();
    assert_eq!(r.success_curve[0], 1.0);
    assert!(r.success_curve[1..].iter().all(|&v| v == 0.5));
    let brute = (0..51).map(|i| if i == 0 { 1.0 } else { 0.5 }).sum::<f64>() / 51.0;
    assert!((r.success_auc - brute).abs() < 1e-9);

    assert!(evaluate(&pred2[..1], &gt2).is_err());
    assert!(evaluate(&[], &[]).is_err());
}

fn random_box<R: Rng>(rng: &mut R) -> BBox {
    BBox::new(rng.gen_range(0.0..100.0), rng.gen_range(0.0..100.0), rng.gen_range(2.0..30.0), rng.gen_range(2.0..30.0))
}

#[test]
fn evaluate_is_order_equivariant_with_monotone_curves() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let n = rng.gen_range(1..40);
        let gt: Vec<BBox> = (0..n).map(|_| random_box(&mut rng)).collect();
        let pred: Vec<BBox> = gt
            .iter()
            .map(|g| BBox::new(g.cx + rng.gen_range(-30.0..30.0), g.cy + rng.gen_range(-30.0..30.0), g.w, g.h * rng.gen_range(0.5..1.5)))
            .collect();
        let r = evaluate(&pred, &gt).unwrap();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let p2: Vec<BBox> = order.iter().map(|&i| pred[i]).collect();
        let g2: Vec<BBox> = order.iter().map(|&i| gt[i]).collect();
        assert_eq!(evaluate(&p2, &g2).unwrap(), r);
        assert!(r.precision_curve.windows(2).all(|w| w[0] <= w[1]));
        assert!(r.success_curve.windows(2).all(|w| w[0] >= w[1]));
        assert!(r.precision_curve.iter().chain(&r.success_curve).all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(r.precision_at_20, r.precision_curve[20]);
    }
}

#[test]
fn metric_csv_and_curve_png() {
    let gt = vec![BBox::new(10.0, 10.0, 4.0, 4.0); 3];
    let r = evaluate(&gt, &gt).unwrap();
    let mut buf = Vec::new();
    r.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("metric,threshold,value\nprecision_at_20,20,1\nsuccess_auc,,1\n"));
    assert_eq!(text.lines().count(), 5 + PRECISION_THRESHOLDS + SUCCESS_THRESHOLDS);
    let dir = tempfile::tempdir().unwrap();
    let png = dir.path().join("curve.png");
    save_curve_png(&png, &r.success_curve).unwrap();
    assert!(std::fs::metadata(png).unwrap().len() > 0);
}

fn small_grid(cells: Vec<CellSpec>) -> GridSpec {
    GridSpec {
        base: RunConfig {
            model: ViTConfig {
                depth: 3,
                embed_dim: 16,
                num_heads: 2,
                template_side: 16,
                search_side: 32,
                enforced_blocks: 1,
                ..Default::default()
            },
            train: TrainConfig {
                steps: 2,
                batch_size: 1,
                warmup_steps: 1,
                ..Default::default()
            },
            ..Default::default()
        },
        data: DataSpec {
            sequence: SequenceSpec {
                length: 5,
                ..Default::default()
            },
            train_sequences: 2,
            test_sequences: 1,
            probe_stride: 2,
            ..Default::default()
        },
        cells,
    }
}

fn cell(name: &str, deem: bool) -> CellSpec {
    CellSpec {
        name: name.into(),
        mbrv: true,
        deem,
        rho: None,
        gamma: None,
        tau: None,
        n_enf: None,
        seed: 4,
    }
}

#[test]
fn single_cell_grid_equals_one_run() {
    let spec = small_grid(vec![cell("only", true)]);
    let dir = tempfile::tempdir().unwrap();
    let rows = ablation_grid(&spec, Some(dir.path())).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].error, None);
    let data = spec.data.generate().unwrap();
    let (_, scores, final_loss) = run_cell(&spec.base, &spec.cells[0], &data, 2, None).unwrap();
    assert_eq!(rows[0].precision_at_20, scores.precision_at_20);
    assert_eq!(rows[0].template_mse, scores.template_mse);
    assert_eq!(rows[0].final_loss, final_loss);
    assert!(dir.path().join("only.ckpt").exists());
    let log = std::fs::read_to_string(dir.path().join("only_loss.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);
}

#[test]
fn grid_cells_are_independent_and_report_errors() {
    let mut bad = cell("bad", true);
    bad.n_enf = Some(7);
    let spec = small_grid(vec![cell("off", false), bad, cell("on", true)]);
    let rows = ablation_grid(&spec, None).unwrap();
    assert_eq!(rows[0].mean_exit_layer, 3.0);
    assert!(rows[1].error.is_some() && rows[1].precision_at_20.is_nan());
    assert_eq!(rows[2].error, None);
    let alone = ablation_grid(&small_grid(vec![cell("on", true)]), None).unwrap();
    let strip = |r: &CellResult| (r.precision_at_20, r.success_auc, r.mean_flops, r.template_mse, r.final_loss);
    assert_eq!(strip(&alone[0]), strip(&rows[2]));

    let mut buf = Vec::new();
    write_grid_csv(&mut buf, &rows).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert!(text.lines().next().unwrap().starts_with("name,mbrv,deem"));
}

#[test]
fn grid_spec_parses_from_toml() {
    let spec = GridSpec::from_toml_str(
        r#"
        [base.model]
        depth = 4
        [[cells]]
        name = "a"
        mbrv = true
        deem = false
        rho = 0.0
        seed = 1
        "#,
    )
    .unwrap();
    assert_eq!(spec.base.model.depth, 4);
    assert_eq!(spec.cells[0].rho, Some(0.0));
    let run = spec.cells[0].apply(&spec.base).unwrap();
    assert_eq!(run.loss.blur, 0.0);
    assert_eq!(run.train.seed, 1);
    assert!(GridSpec::from_toml_str("[[cells]]\nname = 3").is_err());
}

#[test]
fn bench_reports_both_modes() {
    let model = crate::model::Model::new(small_grid(vec![]).base.model, 1).unwrap();
    let seq = generate_sequence(&SequenceSpec { length: 4, ..Default::default() }).unwrap().into_sequence("b");
    let r = bench(&model, &seq, 2).unwrap();
    assert_eq!(r.frames.len(), 3);
    assert_eq!(r.mean_blocks_full, 3.0);
    for f in &r.frames {
        assert_eq!(f.macs, f.flops_estimate);
    }
    let mut buf = Vec::new();
    r.write_frames_csv(&mut buf, 3, 1).unwrap();
    assert!(String::from_utf8(buf).unwrap().starts_with("frame,L_e,flops_estimate,macs,latency_dynamic_s,latency_full_s,score_2,score_3\n"));
    assert!(bench(&model, &seq, 0).is_err());
}
