//! Acceptance suite: one test per criterion, each printing a pass line once
//! every assertion in it holds (run with `--nocapture` to see them).
//!
//! Oracles here are deliberately independent of the library code they check:
//! IoU is re-derived by counting grid cells, blur by direct convolution, and
//! the golden-fixture confusion counts by exhaustive maximum matching.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use trapkit::bench::{benchmark, AdapterConfig};
use trapkit::dataset::{
    load_detections, load_manifest, write_manifest, AnnotatedImage, BoundingBox, Dataset,
    Detection, DetectionMap, DetectionRecord, Provenance,
};
use trapkit::disturbance::{
    box_blur, synthesize_testset, DisturbanceSpec, Effect, RasterImage,
};
use trapkit::metrics::{
    average_precision, confusion_counts, default_confidence_sweep, evaluate, iou,
    match_detections, ImagePairs,
};
use trapkit::report::{read_eval_csv, render_bar_chart, ModelSeries, PLOT_HEIGHT};
use trapkit::rng::SplitMix64;
use trapkit::trapsim::{log_csv_string, run_simulation, Mode, TrapConfig};

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn trapkit_bin() -> &'static str {
    env!("CARGO_BIN_EXE_trapkit")
}

fn boxed(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> BoundingBox {
    BoundingBox::new(x_min, y_min, x_max, y_max).unwrap()
}

/// IoU oracle: rasterize both half-open integer-coordinate boxes on the unit
/// grid and count cells.
fn cell_count_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inside = |bb: &BoundingBox, x: i64, y: i64| {
        (x as f64) >= bb.x_min()
            && (x as f64) < bb.x_max()
            && (y as f64) >= bb.y_min()
            && (y as f64) < bb.y_max()
    };
    let (mut inter, mut union) = (0u64, 0u64);
    for x in a.x_min().min(b.x_min()) as i64..a.x_max().max(b.x_max()) as i64 {
        for y in a.y_min().min(b.y_min()) as i64..a.y_max().max(b.y_max()) as i64 {
            let in_a = inside(a, x, y);
            let in_b = inside(b, x, y);
            inter += u64::from(in_a && in_b);
            union += u64::from(in_a || in_b);
        }
    }
    inter as f64 / union as f64
}

fn random_int_box(rng: &mut SplitMix64, extent: u64) -> BoundingBox {
    loop {
        let (x1, x2) = (rng.next_below(extent), rng.next_below(extent));
        let (y1, y2) = (rng.next_below(extent), rng.next_below(extent));
        if x1 != x2 && y1 != y2 {
            return boxed(
                x1.min(x2) as f64,
                y1.min(y2) as f64,
                x1.max(x2) as f64,
                y1.max(y2) as f64,
            );
        }
    }
}

#[test]
fn criterion_01_iou_matches_rasterization_oracle() {
    let started = Instant::now();
    let mut rng = SplitMix64::new(0xACCE5501);
    for case in 0..1000 {
        let a = random_int_box(&mut rng, 64);
        let b = random_int_box(&mut rng, 64);
        let analytic = iou(&a, &b);
        let counted = cell_count_iou(&a, &b);
        assert!(
            (analytic - counted).abs() < 1e-9,
            "case {case}: analytic {analytic} vs rasterized {counted} for {a:?} / {b:?}"
        );
    }
    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(1), "oracle took {elapsed:?}");
    println!("acceptance criterion 1 (iou rasterization oracle, 1000 cases): PASS");
}

#[test]
fn criterion_02_matching_conservation_and_threshold_monotonicity() {
    let mut rng = SplitMix64::new(0xACCE5502);
    for case in 0..500 {
        let n_gt = rng.next_below(7) as usize;
        let n_det = rng.next_below(7) as usize;
        let gt: Vec<BoundingBox> = (0..n_gt).map(|_| random_int_box(&mut rng, 32)).collect();
        let dets: Vec<Detection> = (0..n_det)
            .map(|_| {
                Detection::new(
                    random_int_box(&mut rng, 32),
                    rng.next_below(101) as f64 / 100.0,
                )
                .unwrap()
            })
            .collect();
        let mut previous_tp = usize::MAX;
        for threshold in [0.25, 0.5, 0.75] {
            let counts = confusion_counts(&match_detections(&gt, &dets, threshold).unwrap());
            assert_eq!(
                counts.true_positives + counts.false_positives,
                dets.len(),
                "case {case} at {threshold}"
            );
            assert_eq!(
                counts.true_positives + counts.false_negatives,
                gt.len(),
                "case {case} at {threshold}"
            );
            assert!(counts.true_positives <= previous_tp, "tp rose at {threshold}");
            previous_tp = counts.true_positives;
        }
    }
    println!("acceptance criterion 2 (matching conservation, 500 cases): PASS");
}

#[test]
fn criterion_03_perfect_detector_fixed_point() {
    let images: Vec<AnnotatedImage> = (0..4)
        .map(|i| {
            let offset = f64::from(i) * 30.0;
            AnnotatedImage {
                image_id: format!("img_{i}"),
                file_path: format!("img_{i}.png"),
                width: 640,
                height: 480,
                boxes: vec![
                    boxed(10.0 + offset, 10.0, 40.0 + offset, 60.0),
                    boxed(200.0, 100.0 + offset, 260.0, 170.0 + offset),
                ],
            }
        })
        .collect();
    let mut detections = DetectionMap::new();
    for img in &images {
        detections.insert(
            img.image_id.clone(),
            DetectionRecord {
                image_id: img.image_id.clone(),
                detections: img
                    .boxes
                    .iter()
                    .map(|b| Detection::new(*b, 1.0).unwrap())
                    .collect(),
            },
        );
    }
    let dataset = Dataset {
        name: "perfect".into(),
        provenance: Provenance::Original,
        images,
    };
    let reports = evaluate(&dataset, &detections, &[0.25, 0.5, 0.75]).unwrap();
    for r in &reports {
        assert_eq!(r.precision, Some(1.0), "precision at {}", r.iou_threshold);
        assert_eq!(r.recall, Some(1.0), "recall at {}", r.iou_threshold);
        assert_eq!(r.f1, Some(1.0), "f1 at {}", r.iou_threshold);
        assert_eq!(r.ap, Some(1.0), "ap at {}", r.iou_threshold);
        assert_eq!(r.mean_iou, Some(1.0), "mean_iou at {}", r.iou_threshold);
    }
    println!("acceptance criterion 3 (perfect-detector fixed point): PASS");
}

/// Exhaustive maximum one-to-one matching: the largest number of (gt, det)
/// pairs with IoU >= threshold, found by trying every assignment.
fn max_matching_tp(gt: &[BoundingBox], dets: &[Detection], threshold: f64) -> usize {
    fn recurse(
        det_idx: usize,
        gt_used: &mut Vec<bool>,
        gt: &[BoundingBox],
        dets: &[Detection],
        threshold: f64,
    ) -> usize {
        if det_idx == dets.len() {
            return 0;
        }
        // Leave this detection unmatched.
        let mut best = recurse(det_idx + 1, gt_used, gt, dets, threshold);
        for g in 0..gt.len() {
            if !gt_used[g] && cell_count_iou(&gt[g], &dets[det_idx].bbox) >= threshold {
                gt_used[g] = true;
                best = best.max(1 + recurse(det_idx + 1, gt_used, gt, dets, threshold));
                gt_used[g] = false;
            }
        }
        best
    }
    recurse(0, &mut vec![false; gt.len()], gt, dets, threshold)
}

#[test]
fn criterion_04_golden_fixture_matches_hand_counting_oracle() {
    let root = repo_root();
    let dataset = load_manifest(&root.join("fixtures/golden/manifest.json")).unwrap();
    let detections = load_detections(&root.join("fixtures/golden/detections.jsonl")).unwrap();

    // Independent count: exhaustive maximum matching per image, pooled.
    let (mut tp, mut n_det, mut n_gt) = (0usize, 0usize, 0usize);
    for img in &dataset.images {
        let dets = detections
            .get(&img.image_id)
            .map(|r| r.detections.clone())
            .unwrap_or_default();
        tp += max_matching_tp(&img.boxes, &dets, 0.5);
        n_det += dets.len();
        n_gt += img.boxes.len();
    }
    assert_eq!((tp, n_det - tp, n_gt - tp), (7, 2, 3), "oracle counts");

    let reports = evaluate(&dataset, &detections, &[0.5]).unwrap();
    let r = &reports[0];
    assert_eq!(
        (r.counts.true_positives, r.counts.false_positives, r.counts.false_negatives),
        (7, 2, 3)
    );
    assert!((r.precision.unwrap() - 0.777778).abs() < 1e-6, "precision {:?}", r.precision);
    assert!((r.recall.unwrap() - 0.700000).abs() < 1e-6, "recall {:?}", r.recall);
    assert!((r.f1.unwrap() - 0.736842).abs() < 1e-6, "f1 {:?}", r.f1);
    println!("acceptance criterion 4 (golden mini-dataset): PASS");
}

#[test]
fn criterion_05_ap_sweep_semantics() {
    // One gt box; a matching detection at 0.6 and a disjoint one at 0.2.
    let gt = [boxed(0.0, 0.0, 10.0, 10.0)];
    let dets = [
        Detection::new(boxed(0.0, 0.0, 10.0, 10.0), 0.6).unwrap(),
        Detection::new(boxed(50.0, 50.0, 60.0, 60.0), 0.2).unwrap(),
    ];
    let images: ImagePairs<'_> = vec![(&gt[..], &dets[..])];
    let ap = average_precision(&images, 0.5, &[0.0, 0.5, 1.0]).unwrap().unwrap();
    assert!((ap - 0.75).abs() < 1e-9, "three-cutoff AP {ap}");

    // Perfect detector at confidence 1.0: exactly 1.0 under the full sweep.
    let perfect = [Detection::new(gt[0], 1.0).unwrap()];
    let images: ImagePairs<'_> = vec![(&gt[..], &perfect[..])];
    let ap = average_precision(&images, 0.5, &default_confidence_sweep()).unwrap();
    assert_eq!(ap, Some(1.0));
    println!("acceptance criterion 5 (AP sweep semantics): PASS");
}

fn gradient_image(w: u32, h: u32, tint: u8) -> RasterImage {
    let mut img = RasterImage::filled(w, h, [0, 0, 0]);
    for y in 0..h {
        for x in 0..w {
            img.set_pixel(x, y, [(x * 5 % 256) as u8, (y * 7 % 256) as u8, tint]);
        }
    }
    img
}

/// Build an on-disk original dataset of `n` small images.
fn build_dataset(root: &Path, n: usize) -> Dataset {
    std::fs::create_dir_all(root).unwrap();
    let mut images = Vec::with_capacity(n);
    for i in 0..n {
        let image_id = format!("img_{i:03}");
        let file = format!("{image_id}.png");
        gradient_image(64, 48, (i % 256) as u8)
            .save_png(&root.join(&file))
            .unwrap();
        images.push(AnnotatedImage {
            image_id,
            file_path: file,
            width: 64,
            height: 48,
            boxes: vec![boxed(8.0, 8.0, 24.0, 24.0)],
        });
    }
    let dataset = Dataset {
        name: "original".into(),
        provenance: Provenance::Original,
        images,
    };
    write_manifest(&dataset, &root.join("manifest.json")).unwrap();
    dataset
}

#[test]
fn criterion_06_blur_oracle_and_effect_determinism() {
    // 3x3 blur of a single impulse, checked against direct convolution.
    let mut impulse = RasterImage::filled(9, 9, [0, 0, 0]);
    impulse.set_pixel(4, 4, [255, 255, 255]);
    let blurred = box_blur(&impulse, 3).unwrap();
    for y in 0..9i64 {
        for x in 0..9i64 {
            let mut sum = 0u64;
            for dy in -1..=1i64 {
                for dx in -1..=1i64 {
                    let sx = (x + dx).clamp(0, 8) as u32;
                    let sy = (y + dy).clamp(0, 8) as u32;
                    sum += u64::from(impulse.pixel(sx, sy)[0]);
                }
            }
            let expected = ((2 * sum + 9) / 18).min(255) as u8; // round half up
            assert_eq!(
                blurred.pixel(x as u32, y as u32),
                [expected; 3],
                "direct convolution disagrees at ({x}, {y})"
            );
        }
    }

    // 30x30 blur of a constant image is the identity.
    let constant = RasterImage::filled(64, 48, [91, 140, 77]);
    assert_eq!(box_blur(&constant, 30).unwrap(), constant);

    // Synthesizing every effect twice with one seed gives identical bytes.
    let dir = tempfile::tempdir().unwrap();
    let dataset = build_dataset(&dir.path().join("src"), 3);
    for effect in Effect::ALL {
        let spec = DisturbanceSpec::default_for(effect, 2024);
        let out_a = dir.path().join(format!("{effect}_a"));
        let out_b = dir.path().join(format!("{effect}_b"));
        let synth_a =
            synthesize_testset(&dataset, &dir.path().join("src"), &spec, &out_a).unwrap();
        let synth_b =
            synthesize_testset(&dataset, &dir.path().join("src"), &spec, &out_b).unwrap();
        assert_eq!(synth_a.images.len(), 3);
        for (img_a, img_b) in synth_a.images.iter().zip(&synth_b.images) {
            let bytes_a = std::fs::read(out_a.join(&img_a.file_path)).unwrap();
            let bytes_b = std::fs::read(out_b.join(&img_b.file_path)).unwrap();
            assert_eq!(bytes_a, bytes_b, "{effect}: bytes differ for {}", img_a.image_id);
        }
    }
    println!("acceptance criterion 6 (blur oracle + effect determinism): PASS");
}

#[test]
fn criterion_07_testset_arithmetic_250_images() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = build_dataset(&dir.path().join("src"), 50);
    assert_eq!(dataset.images.len(), 50);

    let mut total = dataset.images.len();
    for effect in Effect::ALL {
        let spec = DisturbanceSpec::default_for(effect, 7);
        let out = dir.path().join(format!("testset_{effect}"));
        let synthesized =
            synthesize_testset(&dataset, &dir.path().join("src"), &spec, &out).unwrap();
        assert_eq!(synthesized.images.len(), 50, "{effect}");
        assert_eq!(synthesized.provenance, effect.provenance());
        // Annotations carry over verbatim.
        for (orig, synth) in dataset.images.iter().zip(&synthesized.images) {
            assert_eq!(orig.boxes, synth.boxes);
        }
        let written = std::fs::read_dir(&out)
            .unwrap()
            .filter(|e| {
                e.as_ref().unwrap().path().extension().is_some_and(|ext| ext == "png")
            })
            .count();
        assert_eq!(written, 50, "{effect} PNG count");
        total += synthesized.images.len();
    }
    assert_eq!(total, 250);
    println!("acceptance criterion 7 (testset arithmetic, 250 images): PASS");
}

#[test]
fn criterion_08_bench_harness_timing() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = build_dataset(&dir.path().join("imgs"), 50);
    let images_root = dir.path().join("imgs");

    // 200 ms mock adapter over 50 images, no warmup.
    let cfg = AdapterConfig::new(vec![
        trapkit_bin().to_string(),
        "mock-adapter".into(),
        "--latency-ms".into(),
        "200".into(),
        "--model".into(),
        "mock-200ms".into(),
    ]);
    let run = benchmark(&dataset, &images_root, &cfg, 0, "local").unwrap();
    assert!(run.report.failure.is_none());
    assert_eq!(run.report.image_count, 50);
    assert_eq!(run.detections.len(), 50);
    let fps = run.report.mean_fps;
    assert!(
        (4.5..=5.0).contains(&fps),
        "mean_fps {fps} outside [4.5, 5.0]"
    );
    // mean_fps * measured seconds == measured image count.
    let measured_seconds: f64 = run.report.per_image_ms.iter().sum::<f64>() / 1e3;
    assert!((fps * measured_seconds - 50.0).abs() < 1e-9);

    // No-op adapter: per-image harness overhead below 5 ms.
    let cfg = AdapterConfig::new(vec![
        trapkit_bin().to_string(),
        "mock-adapter".into(),
        "--model".into(),
        "noop".into(),
    ]);
    let run = benchmark(&dataset, &images_root, &cfg, 0, "local").unwrap();
    let mean_ms =
        run.report.per_image_ms.iter().sum::<f64>() / run.report.per_image_ms.len() as f64;
    assert!(mean_ms < 5.0, "harness overhead {mean_ms} ms");
    println!("acceptance criterion 8 (bench harness timing): PASS");
}

#[test]
fn criterion_09_simulator_invariants_over_default_run() {
    let started = Instant::now();
    let cfg = TrapConfig::default();
    let run = run_simulation(&cfg, 72.0, 42, None).unwrap();

    // Row count: floor(72 h * 60 / 10 min) = 432.
    assert_eq!(run.log.len(), 432);

    // Gating: every entry into detecting happened at or above the cutoff.
    let detections: Vec<_> = run.events.iter().filter(|e| e.to == Mode::Detecting).collect();
    assert!(!detections.is_empty(), "default run should detect");
    for event in &detections {
        assert!(
            event.battery_v >= cfg.detection_cutoff_v,
            "detection at {} V, cutoff {}",
            event.battery_v,
            cfg.detection_cutoff_v
        );
    }

    // Charging cutoff: no charge gain in steps starting at or above it.
    let cutoff_steps = run
        .steps
        .iter()
        .filter(|s| s.battery_v_start >= cfg.charge_cutoff_v)
        .count();
    assert!(cutoff_steps > 0, "default run should hit the charge cutoff");
    for step in &run.steps {
        if step.battery_v_start >= cfg.charge_cutoff_v {
            assert!(
                step.charge_end_mah <= step.charge_start_mah,
                "charge rose above cutoff at {}",
                step.at
            );
        }
    }

    // Determinism: identical logs for identical seeds.
    let again = run_simulation(&cfg, 72.0, 42, None).unwrap();
    assert_eq!(log_csv_string(&run.log), log_csv_string(&again.log));

    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(1), "simulation took {elapsed:?}");
    println!("acceptance criterion 9 (simulator invariants, 72 h): PASS");
}

/// Extract the `height` attribute of the bar for (model, metric, threshold).
fn bar_height<'a>(svg: &'a str, model: &str, metric: &str, threshold: &str) -> &'a str {
    let needle = format!(
        "data-model=\"{model}\" data-metric=\"{metric}\" data-threshold=\"{threshold}\""
    );
    let start = svg
        .find(&needle)
        .unwrap_or_else(|| panic!("no bar for {model}/{metric}@{threshold}"));
    let rect = &svg[start..svg[start..].find("/>").map(|e| start + e).unwrap()];
    let h = rect.find("height=\"").expect("height attribute") + "height=\"".len();
    &rect[h..h + rect[h..].find('"').unwrap()]
}

#[test]
fn criterion_10_report_overlay_heights_match_reference_values() {
    let root = repo_root();
    let mut series = Vec::new();
    for model in ["yolov4-tiny", "ssd-mobilenetv2"] {
        let path = root.join(format!("reference/eval_normal/{model}.csv"));
        series.push(ModelSeries {
            model: model.to_string(),
            rows: read_eval_csv(&path).unwrap(),
        });
    }
    let svg = render_bar_chart(&series, "Evaluation results on normal testset").unwrap();

    let expectations = [
        ("yolov4-tiny", "mean_iou", "0.25", 0.834),
        ("yolov4-tiny", "mean_iou", "0.50", 0.834),
        ("yolov4-tiny", "mean_iou", "0.75", 0.857),
        ("yolov4-tiny", "f1", "0.75", 0.847),
        ("ssd-mobilenetv2", "f1", "0.25", 0.969),
        ("ssd-mobilenetv2", "f1", "0.50", 0.969),
        ("ssd-mobilenetv2", "ap", "0.75", 0.69),
        ("ssd-mobilenetv2", "mean_iou", "0.75", 0.847),
    ];
    for (model, metric, threshold, value) in expectations {
        let got = bar_height(&svg, model, metric, threshold);
        let expected = format!("{:.4}", value * PLOT_HEIGHT);
        assert_eq!(
            got, expected,
            "bar height for {model}/{metric}@{threshold} (value {value})"
        );
    }
    // Values the source never reported render as hatched markers, not bars.
    let needle = "data-model=\"yolov4-tiny\" data-metric=\"ap\" data-threshold=\"0.75\" data-value=\"undefined\"";
    assert!(svg.contains(needle), "undefined AP bar should be a hatched marker");
    println!("acceptance criterion 10 (report overlay heights): PASS");
}
