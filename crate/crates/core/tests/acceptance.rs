//! Acceptance suite. Each test covers one release criterion and prints a
//! single PASS/FAIL line (run with `--nocapture` to see them live).

use std::panic::{catch_unwind, resume_unwind, UnwindSafe};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pairdet::anchors::{
    assign_labels, generate_anchors, sample_top_likelihood, AnchorConfig, AnchorLabel,
};
use pairdet::autodiff::{Graph, Tensor};
use pairdet::cli::predict_manifest;
use pairdet::dataset::Manifest;
use pairdet::geometry::{iou, nms, BBox};
use pairdet::losses::{
    fast_rcnn_total_loss, rpn_positive_loss, rpn_total_loss, similarity_loss_value,
    top_likelihood_loss, top_likelihood_loss_value, LossWeights, RpnPositiveTerms,
    SimilarityPairs,
};
use pairdet::metrics::{
    average_precision, classify_patients, roc_auc, sens_spec_acc, ConfusionCounts,
};
use pairdet::model::{BackboneConfig, Checkpoint, Detection, Detector, ModelConfig};
use pairdet::pipeline::{train, train_step, TrainConfig};
use pairdet::synthdata::{generate_dataset, SynthConfig};

fn criterion(name: &str, f: impl FnOnce() + UnwindSafe) {
    match catch_unwind(f) {
        Ok(()) => println!("acceptance: {name}: PASS"),
        Err(e) => {
            println!("acceptance: {name}: FAIL");
            resume_unwind(e);
        }
    }
}

// ---------- shared helpers ----------

fn finite_diff(input: &Tensor, eval: impl Fn(&Tensor) -> f64) -> Vec<f64> {
    let h = 1e-6;
    (0..input.len())
        .map(|i| {
            let mut plus = input.clone();
            plus.data_mut()[i] += h;
            let mut minus = input.clone();
            minus.data_mut()[i] -= h;
            (eval(&plus) - eval(&minus)) / (2.0 * h)
        })
        .collect()
}

fn assert_rel(analytic: &[f64], numeric: &[f64], tol: f64, what: &str) {
    assert_eq!(analytic.len(), numeric.len());
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        let denom = a.abs().max(n.abs()).max(1e-3);
        assert!(
            (a - n).abs() / denom < tol,
            "{what}[{i}]: analytic {a} vs numeric {n}"
        );
    }
}

fn random_box(rng: &mut ChaCha8Rng, span: f64) -> BBox {
    let x0 = rng.gen_range(0.0..span);
    let y0 = rng.gen_range(0.0..span);
    BBox::new(
        x0,
        y0,
        x0 + rng.gen_range(1.0..span / 2.0),
        y0 + rng.gen_range(1.0..span / 2.0),
    )
    .unwrap()
}

// ---------- criterion 1: analytic gradients ----------

#[test]
fn gradients_match_central_finite_differences() {
    criterion("loss gradients vs central finite differences", || {
        let tol = 1e-4;
        let mut rng = ChaCha8Rng::seed_from_u64(101);

        // binary cross entropy over probability vectors
        for _ in 0..100 {
            let n = rng.gen_range(1..20);
            let t = Tensor::new(
                vec![n],
                (0..n).map(|_| rng.gen_range(0.02..0.98)).collect(),
            );
            let labels: Vec<f64> = (0..n)
                .map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 })
                .collect();
            let mut g = Graph::new();
            let p = g.leaf(t.clone());
            let l = g.bce_mean(p, labels.clone());
            let grads = g.backward(l);
            let numeric = finite_diff(&t, |t| {
                let mut g = Graph::new();
                let p = g.leaf(t.clone());
                let l = g.bce_mean(p, labels.clone());
                g.value(l).item()
            });
            assert_rel(grads.get(p).unwrap().data(), &numeric, tol, "bce");
        }

        // top likelihood loss over dense score vectors
        for _ in 0..100 {
            let n = rng.gen_range(260..500);
            let t = Tensor::new(
                vec![n],
                (0..n).map(|_| rng.gen_range(0.05..0.95)).collect(),
            );
            let mut g = Graph::new();
            let s = g.leaf(t.clone());
            let l = top_likelihood_loss(&mut g, s).unwrap();
            let grads = g.backward(l);
            let numeric = finite_diff(&t, |t| top_likelihood_loss_value(t.data()).unwrap());
            assert_rel(grads.get(s).unwrap().data(), &numeric, tol, "tlloss");
        }

        // similarity loss over paired positive vectors
        for _ in 0..100 {
            let k = rng.gen_range(1..6);
            let d = rng.gen_range(2..5);
            let mk = |rng: &mut ChaCha8Rng| {
                Tensor::new(
                    vec![k, d],
                    (0..k * d).map(|_| rng.gen_range(0.05..1.0)).collect(),
                )
            };
            let (x1, x2) = (mk(&mut rng), mk(&mut rng));
            let eval = |a: &Tensor, b: &Tensor| {
                let mut g = Graph::new();
                let (av, bv) = (g.leaf(a.clone()), g.leaf(b.clone()));
                let l = g.cosine_pairs_mean(av, bv);
                g.value(l).item()
            };
            let mut g = Graph::new();
            let (av, bv) = (g.leaf(x1.clone()), g.leaf(x2.clone()));
            let l = g.cosine_pairs_mean(av, bv);
            let grads = g.backward(l);
            assert_rel(
                grads.get(av).unwrap().data(),
                &finite_diff(&x1, |t| eval(t, &x2)),
                tol,
                "simloss x1",
            );
            assert_rel(
                grads.get(bv).unwrap().data(),
                &finite_diff(&x2, |t| eval(&x1, t)),
                tol,
                "simloss x2",
            );
        }

        // detection-head classification: softmax then cross entropy
        for _ in 0..100 {
            let (n, c) = (rng.gen_range(1..8), rng.gen_range(2..5));
            let t = Tensor::new(
                vec![n, c],
                (0..n * c).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            );
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
            let eval = |t: &Tensor| {
                let mut g = Graph::new();
                let x = g.leaf(t.clone());
                let p = g.softmax_rows(x);
                let l = g.cross_entropy_rows(p, labels.clone());
                g.value(l).item()
            };
            let mut g = Graph::new();
            let x = g.leaf(t.clone());
            let p = g.softmax_rows(x);
            let l = g.cross_entropy_rows(p, labels.clone());
            let grads = g.backward(l);
            assert_rel(grads.get(x).unwrap().data(), &finite_diff(&t, eval), tol, "clsloss");
        }

        // box regression: smooth L1, sampled away from the |d| = 1 kinks
        for _ in 0..100 {
            let n = rng.gen_range(1..10) * 4;
            let mut pred = Vec::with_capacity(n);
            let mut target = Vec::with_capacity(n);
            for _ in 0..n {
                let t = rng.gen_range(-2.0..2.0);
                let mut d = rng.gen_range(-3.0..3.0f64);
                while (d.abs() - 1.0).abs() < 1e-3 {
                    d = rng.gen_range(-3.0..3.0);
                }
                target.push(t);
                pred.push(t + d);
            }
            let t = Tensor::new(vec![n / 4, 4], pred);
            let eval = |t: &Tensor| {
                let mut g = Graph::new();
                let x = g.leaf(t.clone());
                let l = g.smooth_l1_sum(x, target.clone());
                g.value(l).item()
            };
            let mut g = Graph::new();
            let x = g.leaf(t.clone());
            let l = g.smooth_l1_sum(x, target.clone());
            let grads = g.backward(l);
            assert_rel(grads.get(x).unwrap().data(), &finite_diff(&t, eval), tol, "regloss");
        }
    });
}

// ---------- criterion 2: brute-force oracles ----------

#[test]
fn geometry_and_metric_oracles() {
    criterion("geometry/metric implementations vs brute-force oracles", || {
        let mut rng = ChaCha8Rng::seed_from_u64(202);

        // IoU vs unit-cell counting on integer boxes (1000 instances)
        for _ in 0..1000 {
            let int_box = |rng: &mut ChaCha8Rng| {
                let x0 = rng.gen_range(0..25i64);
                let y0 = rng.gen_range(0..25i64);
                let b = BBox::new(
                    x0 as f64,
                    y0 as f64,
                    (x0 + rng.gen_range(0..12)) as f64,
                    (y0 + rng.gen_range(0..12)) as f64,
                )
                .unwrap();
                b
            };
            let (a, b) = (int_box(&mut rng), int_box(&mut rng));
            let mut inter = 0u64;
            let mut union = 0u64;
            for x in 0..40i64 {
                for y in 0..40i64 {
                    let in_a = (x as f64) >= a.x_min
                        && ((x + 1) as f64) <= a.x_max
                        && (y as f64) >= a.y_min
                        && ((y + 1) as f64) <= a.y_max;
                    let in_b = (x as f64) >= b.x_min
                        && ((x + 1) as f64) <= b.x_max
                        && (y as f64) >= b.y_min
                        && ((y + 1) as f64) <= b.y_max;
                    inter += (in_a && in_b) as u64;
                    union += (in_a || in_b) as u64;
                }
            }
            let want = if union == 0 {
                0.0
            } else {
                inter as f64 / union as f64
            };
            assert!((iou(&a, &b) - want).abs() < 1e-12, "iou {a:?} {b:?}");
        }

        // NMS vs a quadratic greedy oracle (300 instances)
        for _ in 0..300 {
            let n = rng.gen_range(1..60);
            let boxes: Vec<BBox> = (0..n).map(|_| random_box(&mut rng, 40.0)).collect();
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let threshold = rng.gen_range(0.1..0.8);
            let got = nms(&boxes, &scores, threshold).unwrap();

            let mut alive: Vec<usize> = (0..n).collect();
            let mut want = Vec::new();
            while !alive.is_empty() {
                let &best = alive
                    .iter()
                    .min_by(|&&i, &&j| {
                        scores[j].partial_cmp(&scores[i]).unwrap().then(i.cmp(&j))
                    })
                    .unwrap();
                want.push(best);
                alive.retain(|&i| i != best && iou(&boxes[i], &boxes[best]) <= threshold);
            }
            assert_eq!(got, want);
        }

        // top-256 selection vs a full-sort oracle (300 instances)
        for _ in 0..300 {
            let n = rng.gen_range(1..600);
            // coarse quantization forces plenty of ties
            let scores: Vec<f64> = (0..n)
                .map(|_| (rng.gen_range(0.0..1.0f64) * 20.0).round() / 20.0)
                .collect();
            let got = sample_top_likelihood(&scores);
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&i, &j| scores[j].partial_cmp(&scores[i]).unwrap().then(i.cmp(&j)));
            order.truncate(256);
            assert_eq!(got, order);
        }

        // anchor label assignment vs a direct restatement of the rule
        // (100 instances x ~144 anchors)
        for _ in 0..100 {
            let cfg = AnchorConfig {
                scales: vec![8.0, 16.0],
                aspect_ratios: vec![0.5, 1.0],
                stride: 8,
            };
            let anchors = generate_anchors(48, &cfg).unwrap();
            let gt: Vec<BBox> = (0..rng.gen_range(0..4))
                .map(|_| random_box(&mut rng, 40.0))
                .collect();
            let got = assign_labels(&anchors, &gt);

            for (ai, a) in anchors.iter().enumerate() {
                let max: f64 = gt.iter().map(|g| iou(a, g)).fold(0.0, f64::max);
                let is_argmax = gt.iter().any(|g| {
                    let best: f64 = anchors.iter().map(|x| iou(x, g)).fold(0.0, f64::max);
                    best > 0.0 && iou(a, g) == best
                });
                let want = if gt.is_empty() {
                    AnchorLabel::Negative
                } else if is_argmax || max > 0.7 {
                    AnchorLabel::Positive
                } else if max < 0.3 {
                    AnchorLabel::Negative
                } else {
                    AnchorLabel::Ignore
                };
                assert_eq!(got[ai], want, "anchor {ai}");
            }
        }

        // average precision vs an envelope-form oracle (200 instances)
        for _ in 0..200 {
            let images = rng.gen_range(1..6);
            let gts: Vec<Vec<BBox>> = (0..images)
                .map(|_| {
                    (0..rng.gen_range(0..4))
                        .map(|_| random_box(&mut rng, 50.0))
                        .collect()
                })
                .collect();
            let dets: Vec<Vec<Detection>> = gts
                .iter()
                .map(|gt| {
                    let mut d = Vec::new();
                    for b in gt {
                        if rng.gen_bool(0.8) {
                            // jittered copy of the ground truth
                            let dx = rng.gen_range(-2.0..2.0);
                            let dy = rng.gen_range(-2.0..2.0);
                            d.push(Detection {
                                bbox: BBox::new(
                                    b.x_min + dx,
                                    b.y_min + dy,
                                    b.x_max + dx,
                                    b.y_max + dy,
                                )
                                .unwrap(),
                                score: rng.gen_range(0.0..1.0),
                                class_id: 1,
                            });
                        }
                    }
                    for _ in 0..rng.gen_range(0..4) {
                        d.push(Detection {
                            bbox: random_box(&mut rng, 50.0),
                            score: rng.gen_range(0.0..1.0),
                            class_id: 1,
                        });
                    }
                    d
                })
                .collect();
            let total_gt: usize = gts.iter().map(Vec::len).sum();
            let total_det: usize = dets.iter().map(Vec::len).sum();
            if total_gt == 0 || total_det == 0 {
                continue;
            }
            let got = average_precision(&dets, &gts, 0.5).unwrap();
            assert!(!got.degenerate);

            // oracle: classify each ranked detection, then sum the
            // right-max precision envelope at every true positive
            let mut flat: Vec<(usize, &Detection)> = Vec::new();
            for (img, ds) in dets.iter().enumerate() {
                for d in ds {
                    flat.push((img, d));
                }
            }
            flat.sort_by(|a, b| b.1.score.partial_cmp(&a.1.score).unwrap());
            let mut matched: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
            let mut tps = Vec::new();
            for (img, d) in flat {
                let pick = gts[img]
                    .iter()
                    .enumerate()
                    .filter(|(gi, g)| !matched[img][*gi] && iou(&d.bbox, g) >= 0.5)
                    .max_by(|a, b| {
                        iou(&d.bbox, a.1).partial_cmp(&iou(&d.bbox, b.1)).unwrap()
                    })
                    .map(|(gi, _)| gi);
                match pick {
                    Some(gi) => {
                        matched[img][gi] = true;
                        tps.push(true);
                    }
                    None => tps.push(false),
                }
            }
            let mut prec = Vec::with_capacity(tps.len());
            let mut tp = 0usize;
            for (i, &t) in tps.iter().enumerate() {
                tp += t as usize;
                prec.push(tp as f64 / (i + 1) as f64);
            }
            let mut envelope = prec.clone();
            for i in (0..envelope.len().saturating_sub(1)).rev() {
                envelope[i] = envelope[i].max(envelope[i + 1]);
            }
            let want: f64 = tps
                .iter()
                .enumerate()
                .filter(|(_, &t)| t)
                .map(|(i, _)| envelope[i] / total_gt as f64)
                .sum();
            assert!((got.ap - want).abs() < 1e-12, "ap {} vs {}", got.ap, want);
        }

        // AUC vs the Mann-Whitney statistic, ties counted half
        // (1000 instances)
        for _ in 0..1000 {
            let n = rng.gen_range(4..60);
            let scores: Vec<f64> = (0..n)
                .map(|_| (rng.gen_range(0.0..1.0f64) * 10.0).round() / 10.0)
                .collect();
            let labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
            let pos = labels.iter().filter(|&&l| l).count();
            if pos == 0 || pos == n {
                continue;
            }
            let (_, auc) = roc_auc(&scores, &labels).unwrap();
            let mut stat = 0.0;
            for i in 0..n {
                if !labels[i] {
                    continue;
                }
                for j in 0..n {
                    if labels[j] {
                        continue;
                    }
                    stat += if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
            let want = stat / (pos * (n - pos)) as f64;
            assert!((auc - want).abs() < 1e-9, "auc {auc} vs {want}");
        }
    });
}

// ---------- criterion 3: composition and ablation exactness ----------

fn desk_train_config() -> TrainConfig {
    TrainConfig {
        image_side: 64,
        iterations: 2000,
        base_lr: 1e-3,
        lr_decay_period: 1500,
        anchors: AnchorConfig {
            scales: vec![12.0, 18.0, 26.0],
            aspect_ratios: vec![0.5, 1.0, 2.0],
            stride: 8,
        },
        model: ModelConfig {
            backbone: BackboneConfig {
                in_channels: 1,
                widths: vec![8, 16, 16],
            },
            rpn_channels: 16,
            head_hidden: 32,
            roi_pool: 2,
            num_classes: 2,
            anchors_per_location: 9,
        },
        proposal_top_n: 64,
        head_batch: 32,
        checkpoint_every: 2000,
        log_every: 100,
        ..Default::default()
    }
}

#[test]
fn composite_losses_and_ablation_equivalence() {
    criterion("composite losses decompose; zero weights reproduce the annotated-only run", || {
        let mut rng = ChaCha8Rng::seed_from_u64(303);

        // composite RPN loss decomposes into its weighted terms
        for _ in 0..200 {
            let w = LossWeights {
                lambda1: rng.gen_range(0.0..2.0),
                lambda2: rng.gen_range(0.0..2.0),
                ..Default::default()
            };
            let n = 32;
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..0.95)).collect();
            let labels: Vec<f64> = (0..n)
                .map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 })
                .collect();
            let p = rng.gen_range(1..6);
            let deltas: Vec<f64> = (0..4 * p).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let targets: Vec<f64> = (0..4 * p).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let neg: Vec<f64> = (0..300).map(|_| rng.gen_range(0.05..0.95)).collect();

            let mut g = Graph::new();
            let sv = g.leaf(Tensor::new(vec![n], scores));
            let dv = g.leaf(Tensor::new(vec![p, 4], deltas));
            let terms = RpnPositiveTerms {
                sampled_scores: sv,
                sampled_labels: labels,
                positive_deltas: Some(dv),
                positive_targets: targets,
                location_count: 16,
            };
            let pos = rpn_positive_loss(&mut g, &terms, w.lambda1);
            let nv = g.leaf(Tensor::new(vec![300], neg.clone()));
            let tll = top_likelihood_loss(&mut g, nv).unwrap();
            let total = rpn_total_loss(&mut g, &pos, tll, &w);
            let want = g.value(pos.cls).item()
                + w.lambda1 * g.value(pos.reg).item()
                + w.lambda2 * top_likelihood_loss_value(&neg).unwrap();
            assert!((g.value(total).item() - want).abs() < 1e-9);
        }

        // composite detection-head loss decomposes into its weighted terms
        for _ in 0..200 {
            let w = LossWeights {
                lambda3: rng.gen_range(0.0..2.0),
                lambda4: rng.gen_range(0.0..2.0),
                ..Default::default()
            };
            let (c, r) = (rng.gen_range(0.0..3.0), rng.gen_range(0.0..3.0));
            let pairs = SimilarityPairs {
                x1: vec![vec![0.3, 0.7], vec![0.9, 0.1]],
                x2: vec![
                    {
                        let a = rng.gen_range(0.01..0.99);
                        vec![a, 1.0 - a]
                    },
                    {
                        let a = rng.gen_range(0.01..0.99);
                        vec![a, 1.0 - a]
                    },
                ],
            };
            let s = similarity_loss_value(&pairs).unwrap();
            let mut g = Graph::new();
            let cv = g.constant_scalar(c);
            let rv = g.constant_scalar(r);
            let sv = g.constant_scalar(s);
            let total = fast_rcnn_total_loss(&mut g, cv, rv, sv, &w);
            assert!((g.value(total).item() - (c + w.lambda3 * r + w.lambda4 * s)).abs() < 1e-9);
        }

        // zeroing both unannotated-image weights reproduces the
        // annotated-only trajectory over 100 steps
        let dir = tempfile::tempdir().unwrap();
        let data = generate_dataset(
            &SynthConfig {
                train_positives: 8,
                train_negatives: 8,
                test_positives: 2,
                test_negatives: 2,
                decoys_per_negative: (1, 2),
                ..Default::default()
            },
            dir.path(),
        )
        .unwrap();
        let manifest = Manifest::load(&data.train_manifest).unwrap();
        let pos_images: Vec<_> = manifest
            .positives()
            .iter()
            .map(|r| {
                (
                    pairdet::dataset::load_image(&pairdet::dataset::image_path(
                        &data.train_manifest,
                        r,
                    ))
                    .unwrap(),
                    r.boxes.clone(),
                )
            })
            .collect();
        let neg_images: Vec<_> = manifest
            .negatives()
            .iter()
            .map(|r| {
                pairdet::dataset::load_image(&pairdet::dataset::image_path(
                    &data.train_manifest,
                    r,
                ))
                .unwrap()
            })
            .collect();

        let mut cfg = desk_train_config();
        cfg.weights.lambda2 = 0.0;
        cfg.weights.lambda4 = 0.0;
        let mut paired = Detector::new(cfg.model.clone(), 9);
        let mut solo = Detector::new(cfg.model.clone(), 9);
        for it in 0..100u64 {
            let (img, gt) = &pos_images[it as usize % pos_images.len()];
            let neg = &neg_images[it as usize % neg_images.len()];
            let a = train_step(&mut paired, &cfg, img, gt, Some(neg), it).unwrap();
            let b = train_step(&mut solo, &cfg, img, gt, None, it).unwrap();
            assert!((a.total - b.total).abs() <= 1e-6, "step {it} diverged");
        }
        for name in paired.params.names().map(String::from).collect::<Vec<_>>() {
            let a = paired.params.get(&name).unwrap();
            let b = solo.params.get(&name).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() <= 1e-6, "parameter {name} diverged");
            }
        }
    });
}

// ---------- criterion 4: default shapes and schedule ----------

#[test]
fn default_shapes_and_learning_rate_schedule() {
    criterion("default anchor field and learning-rate schedule", || {
        let anchors = generate_anchors(512, &AnchorConfig::default()).unwrap();
        assert_eq!(anchors.len(), 15_360);

        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(0), 1e-4);
        assert!((cfg.lr_at(9_000) - 1e-5).abs() / 1e-5 < 1e-12);
        assert!((cfg.lr_at(18_000) - 1e-6).abs() / 1e-6 < 1e-12);
    });
}

// ---------- criterion 5: end-to-end ablation direction ----------

struct RunOutcome {
    specificity: f64,
    auc: f64,
}

fn run_config(
    name: &str,
    cfg: &TrainConfig,
    train_manifest: &Path,
    test_manifest: &Path,
    out_root: &Path,
) -> RunOutcome {
    let out = out_root.join(format!("{name}-{}", cfg.seed));
    let trained = train(cfg, train_manifest, &out, None).unwrap();
    let checkpoint = Checkpoint::load(&trained.checkpoint).unwrap();
    let manifest = Manifest::load(test_manifest).unwrap();
    let detections = predict_manifest(&checkpoint, test_manifest, &manifest).unwrap();
    let report = pairdet::metrics::evaluate_detections(&manifest.records, &detections).unwrap();
    let outcome = RunOutcome {
        specificity: report.specificity.expect("test split has negative patients"),
        auc: report.auc,
    };
    println!(
        "  {name} seed {}: specificity {:.3}, auc {:.3}, map {:.3}",
        cfg.seed, outcome.specificity, outcome.auc, report.map
    );
    outcome
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    values[values.len() / 2]
}

#[test]
fn training_on_unannotated_images_improves_specificity() {
    criterion("unannotated stream lifts specificity; similarity keeps AUC", || {
        let dir = tempfile::tempdir().unwrap();
        let data = generate_dataset(
            &SynthConfig {
                train_positives: 100,
                train_negatives: 100,
                test_positives: 25,
                test_negatives: 25,
                decoys_per_negative: (1, 2),
                seed: 42,
                ..Default::default()
            },
            dir.path().join("data").as_path(),
        )
        .unwrap();
        let runs = dir.path().join("runs");

        let mut spec_gain = Vec::new();
        let mut auc_tl = Vec::new();
        let mut auc_full = Vec::new();
        for seed in [1u64, 2, 3] {
            let mut base = desk_train_config();
            base.seed = seed;
            base.weights.lambda2 = 0.0;
            base.weights.lambda4 = 0.0;
            let mut tl = desk_train_config();
            tl.seed = seed;
            tl.weights.lambda4 = 0.0;
            let mut full = desk_train_config();
            full.seed = seed;

            let b = run_config("baseline", &base, &data.train_manifest, &data.test_manifest, &runs);
            let t = run_config("tlloss", &tl, &data.train_manifest, &data.test_manifest, &runs);
            let f = run_config("full", &full, &data.train_manifest, &data.test_manifest, &runs);
            spec_gain.push(t.specificity - b.specificity);
            auc_tl.push(t.auc);
            auc_full.push(f.auc);
        }
        let gain = median(&mut spec_gain);
        let auc_t = median(&mut auc_tl);
        let auc_f = median(&mut auc_full);
        println!(
            "  median specificity gain {gain:.3}, median auc tlloss {auc_t:.3} vs full {auc_f:.3}"
        );
        assert!(
            gain >= 0.15,
            "median specificity gain {gain:.3} below 0.15"
        );
        assert!(
            auc_f >= auc_t,
            "similarity term hurt AUC: {auc_f:.3} < {auc_t:.3}"
        );
    });
}

// ---------- criterion 6: confusion arithmetic ----------

#[test]
fn confusion_metrics_exact_arithmetic() {
    criterion("patient-level confusion metric arithmetic", || {
        let c = ConfusionCounts {
            tp: 29,
            fn_: 2,
            tn: 40,
            fp: 9,
        };
        let (sens, spec, acc) = sens_spec_acc(&c);
        assert_eq!(sens.unwrap(), 29.0 / 31.0);
        assert_eq!(spec.unwrap(), 40.0 / 49.0);
        assert_eq!(acc.unwrap(), 0.8625);

        // the same counts reconstructed through the classification path
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..29 {
            scores.push(0.9);
            labels.push(true);
        }
        for _ in 0..2 {
            scores.push(0.2);
            labels.push(true);
        }
        for _ in 0..40 {
            scores.push(0.1);
            labels.push(false);
        }
        for _ in 0..9 {
            scores.push(0.8);
            labels.push(false);
        }
        let rebuilt = classify_patients(&scores, &labels, 0.5).unwrap();
        assert_eq!(rebuilt, c);
        assert_eq!(sens_spec_acc(&rebuilt).2.unwrap(), 0.8625);
    });
}
