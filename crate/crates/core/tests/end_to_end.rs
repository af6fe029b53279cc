use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sgrel::cgs::count_predicates;
use sgrel::config::RunConfig;
use sgrel::ingest::{EmbeddingTable, ZeroShotIndex};
use sgrel::ir::info_weights;
use sgrel::jfl::{forward, train, RelationModel, TrainConfig};
use sgrel::metrics::{evaluate, EvalConfig, RankedPrediction, RankedTriple, Subtask};
use sgrel::pipeline::{ablation, load_inputs, standard_variants, Inputs};
use sgrel::synth::{generate, write_synth, SynthConfig};
use sgrel::{
    BoundingBox, Dataset, LabelKind, LabelSpace, LabelSpaces, ObjectInstance, SceneGraphAnnotation,
    Split, Triple,
};

fn spaces(c_obj: usize, c_pred: usize) -> LabelSpaces {
    LabelSpaces {
        object: LabelSpace::new(
            LabelKind::Object,
            (0..c_obj).map(|i| format!("o{i}")).collect(),
        )
        .unwrap(),
        predicate: LabelSpace::new(
            LabelKind::Predicate,
            (0..c_pred).map(|i| format!("p{i}")).collect(),
        )
        .unwrap(),
    }
}

fn small_inputs(images: usize, seed: u64) -> Inputs {
    let d = generate(&SynthConfig {
        images,
        seed,
        ..SynthConfig::default()
    })
    .unwrap();
    Inputs {
        train: d.train,
        val: d.val,
        test: d.test,
        objects: d.objects,
        predicates: d.predicates,
    }
}

fn toy_annotation(
    r: &mut ChaCha8Rng,
    d_roi: usize,
    c_obj: usize,
    c_pred: usize,
) -> SceneGraphAnnotation {
    let n = 5;
    let objects = (0..n)
        .map(|i| {
            let x = r.random_range(0.0..60.0);
            let y = r.random_range(0.0..60.0);
            ObjectInstance {
                object_id: i as u32,
                label: r.random_range(0..c_obj),
                bbox: BoundingBox::new(
                    x,
                    y,
                    x + r.random_range(4.0..30.0),
                    y + r.random_range(4.0..30.0),
                ),
                feature: (0..d_roi).map(|_| r.random_range(-1.0..1.0)).collect(),
            }
        })
        .collect();
    let triples = (0..n as u32)
        .map(|s| Triple {
            subj: s,
            pred: r.random_range(0..c_pred),
            obj: (s + 1) % n as u32,
        })
        .collect();
    SceneGraphAnnotation {
        image_id: "toy".into(),
        width: 100.0,
        height: 100.0,
        objects,
        triples,
    }
}

#[test]
fn forward_matches_straight_line_reference() {
    let (d_roi, d_emb, c_obj, c_pred) = (6, 4, 3, 5);
    let mut r = ChaCha8Rng::seed_from_u64(42);
    let model = RelationModel::init(
        d_roi,
        d_emb,
        c_pred,
        &mut sgrel::rng::substream(42, sgrel::rng::INIT),
    );
    let table: Vec<Vec<f64>> = (0..c_obj)
        .map(|_| (0..d_emb).map(|_| r.random_range(-1.0..1.0)).collect())
        .collect();
    let emb = EmbeddingTable::new(LabelKind::Object, d_emb, table.clone()).unwrap();
    let a = toy_annotation(&mut r, d_roi, c_obj, c_pred);
    let f = forward(&model, &a, &emb).unwrap();

    let unit = |v: Vec<f64>| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect::<Vec<_>>()
    };
    let n = a.objects.len();
    let proj: Vec<Vec<f64>> = a
        .objects
        .iter()
        .map(|o| {
            unit(
                (0..d_emb)
                    .map(|k| {
                        (0..d_roi)
                            .map(|i| o.feature[i] * model.w_proj[(i, k)])
                            .sum()
                    })
                    .collect(),
            )
        })
        .collect();
    let labels: Vec<Vec<f64>> = a
        .objects
        .iter()
        .map(|o| unit(table[o.label].clone()))
        .collect();
    let sim = |i: usize, j: usize| (0..d_emb).map(|k| proj[i][k] * labels[j][k]).sum::<f64>();
    let mut r2e = 0.0;
    let mut e2r = 0.0;
    for i in 0..n {
        r2e += -(sim(i, i).exp() / (0..n).map(|j| sim(i, j).exp()).sum::<f64>()).ln();
        e2r += -(sim(i, i).exp() / (0..n).map(|j| sim(j, i).exp()).sum::<f64>()).ln();
    }
    let l_c = 0.5 * (r2e / n as f64 + e2r / n as f64);
    assert!(
        (f.contrastive.total - l_c).abs() < 1e-10,
        "{} vs {l_c}",
        f.contrastive.total
    );

    for (k, t) in a.triples.iter().enumerate() {
        let x = model.pair_input(
            a.object(t.subj).unwrap(),
            a.object(t.obj).unwrap(),
            a.width,
            a.height,
        );
        let logits: Vec<f64> = (0..c_pred)
            .map(|j| {
                model.b_cls[j]
                    + (0..x.len())
                        .map(|i| x[i] * model.w_cls[(i, j)])
                        .sum::<f64>()
            })
            .collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        for (j, l) in logits.iter().enumerate() {
            assert!((f.batch.probs[(k, j)] - l.exp() / z).abs() < 1e-10);
        }
    }
}

#[test]
fn contrastive_term_decreases_with_training() {
    let inputs = small_inputs(200, 3);
    let weights = vec![1.0; inputs.train.spaces.predicate.len()];
    let model = RelationModel::init(
        inputs.train.d_roi,
        inputs.objects.dim,
        weights.len(),
        &mut sgrel::rng::substream(3, sgrel::rng::INIT),
    );
    let cfg = TrainConfig {
        iterations: 500,
        lr: 0.05,
        eval_every: 0,
        ..TrainConfig::default()
    };
    let out = train(model, &inputs.train, None, &inputs.objects, &weights, &cfg).unwrap();
    let mean = |s: &[sgrel::jfl::LossRecord]| s.iter().map(|r| r.l_c).sum::<f64>() / s.len() as f64;
    let (head, tail) = (
        mean(&out.history[..50]),
        mean(&out.history[out.history.len() - 50..]),
    );
    assert!(tail < head, "L_c went from {head} to {tail}");
}

/// Four images with four triples each; the ranked list carries every triple,
/// half of them with the wrong predicate.
#[test]
fn half_corrupted_oracle_recalls_half() {
    let sp = spaces(3, 4);
    let annotations: Vec<SceneGraphAnnotation> = (0..4)
        .map(|k| SceneGraphAnnotation {
            image_id: format!("i{k}"),
            width: 100.0,
            height: 100.0,
            objects: (0..4)
                .map(|i| ObjectInstance {
                    object_id: i,
                    label: (i as usize + k) % 3,
                    bbox: BoundingBox::new(i as f64 * 20.0, 0.0, i as f64 * 20.0 + 10.0, 10.0),
                    feature: vec![0.0],
                })
                .collect(),
            triples: (0..4)
                .map(|i| Triple {
                    subj: i,
                    pred: (i as usize + k) % 4,
                    obj: (i + 1) % 4,
                })
                .collect(),
        })
        .collect();
    let test = Dataset {
        split: Split::Test,
        annotations,
        spaces: sp,
        d_roi: 1,
    };
    let preds: Vec<RankedPrediction> = test
        .annotations
        .iter()
        .map(|a| RankedPrediction {
            image_id: a.image_id.clone(),
            entries: a
                .triples
                .iter()
                .enumerate()
                .map(|(n, t)| {
                    let (s, o) = (a.object(t.subj).unwrap(), a.object(t.obj).unwrap());
                    RankedTriple {
                        subj_id: s.object_id,
                        subj_label: s.label,
                        subj_box: s.bbox,
                        pred: if n % 2 == 0 { t.pred } else { (t.pred + 1) % 4 },
                        obj_id: o.object_id,
                        obj_label: o.label,
                        obj_box: o.bbox,
                        score: 1.0 - n as f64 * 0.1,
                    }
                })
                .collect(),
        })
        .collect();
    let info = info_weights(&count_predicates(&test)).unwrap();
    for subtask in [Subtask::PredCls, Subtask::SgCls, Subtask::SgGen] {
        let rep = evaluate(
            &preds,
            &test,
            &ZeroShotIndex::default(),
            &info,
            &EvalConfig {
                ks: vec![1000],
                subtask,
            },
        )
        .unwrap();
        assert_eq!(rep.per_k[0].recall, Some(0.5), "{subtask}");
    }
}

/// Jittered boxes above the IoU threshold match in SGGen exactly as ids do in
/// PredCls; boxes shifted well below it match nothing.
#[test]
fn box_protocol_agrees_with_id_protocol_under_small_jitter() {
    let mut data = generate(&SynthConfig {
        images: 200,
        seed: 5,
        ..SynthConfig::default()
    })
    .unwrap();
    // Disjoint boxes so no other pair can overlap a ground-truth pair.
    for a in &mut data.test.annotations {
        a.width = 40.0 * a.objects.len() as f64;
        for (i, o) in a.objects.iter_mut().enumerate() {
            o.bbox = BoundingBox::new(40.0 * i as f64, 0.0, 40.0 * i as f64 + 20.0, 20.0);
        }
    }
    let inputs = Inputs {
        train: data.train,
        val: data.val,
        test: data.test,
        objects: data.objects,
        predicates: data.predicates,
    };
    let info = inputs.info().unwrap();
    let zs = inputs.zero_shot().unwrap();
    let preds = sgrel::synth::oracle_predictions(&inputs.test, &data.map);
    let shift = |b: BoundingBox, dx: f64| BoundingBox::new(b.x1 + dx, b.y1, b.x2 + dx, b.y2);
    let moved = |dx_frac: f64| -> Vec<RankedPrediction> {
        preds
            .iter()
            .map(|p| RankedPrediction {
                image_id: p.image_id.clone(),
                entries: p
                    .entries
                    .iter()
                    .map(|e| RankedTriple {
                        subj_box: shift(e.subj_box, dx_frac * e.subj_box.width()),
                        obj_box: shift(e.obj_box, dx_frac * e.obj_box.width()),
                        ..e.clone()
                    })
                    .collect(),
            })
            .collect()
    };
    let eval = |p: &[RankedPrediction], subtask| {
        evaluate(
            p,
            &inputs.test,
            &zs,
            &info,
            &EvalConfig {
                ks: vec![20, 50, 100],
                subtask,
            },
        )
        .unwrap()
    };
    let ids = eval(&preds, Subtask::PredCls);
    let jitter = eval(&moved(0.05), Subtask::SgGen);
    for (a, b) in ids.per_k.iter().zip(&jitter.per_k) {
        assert_eq!(a.recall, b.recall);
        assert_eq!(a.mean_recall, b.mean_recall);
    }
    let far = eval(&moved(0.9), Subtask::SgGen);
    assert_eq!(far.per_k[2].recall, Some(0.0));
}

#[test]
fn files_round_trip_into_the_same_ablation() {
    let dir = tempfile::tempdir().unwrap();
    let synth = SynthConfig {
        images: 150,
        seed: 8,
        ..SynthConfig::default()
    };
    let data = generate(&synth).unwrap();
    write_synth(dir.path(), &data).unwrap();

    let cfg = RunConfig {
        data: Some(dir.path().to_path_buf()),
        iterations: 60,
        eval_every: 20,
        lr: 0.05,
        ..RunConfig::default()
    };
    let loaded = load_inputs(&cfg).unwrap();
    assert_eq!(loaded.train.annotations, data.train.annotations);
    assert_eq!(loaded.test.annotations, data.test.annotations);
    assert_eq!(loaded.predicates.vectors, data.predicates.vectors);

    let direct = Inputs {
        train: data.train,
        val: data.val,
        test: data.test,
        objects: data.objects,
        predicates: data.predicates,
    };
    let a = serde_json::to_string(&ablation(&loaded, &cfg, &standard_variants(), None).unwrap())
        .unwrap();
    let b = serde_json::to_string(&ablation(&direct, &cfg, &standard_variants(), None).unwrap())
        .unwrap();
    assert_eq!(a, b);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn loss_history_is_a_function_of_the_seed(seed in 0u64..1000, batch in 1usize..6) {
        let inputs = small_inputs(60, seed);
        let weights = vec![1.0; inputs.train.spaces.predicate.len()];
        let run = || {
            let model = RelationModel::init(
                inputs.train.d_roi,
                inputs.objects.dim,
                weights.len(),
                &mut sgrel::rng::substream(seed, sgrel::rng::INIT),
            );
            let cfg = TrainConfig { iterations: 40, batch_size: batch, seed, eval_every: 10, ..TrainConfig::default() };
            train(model, &inputs.train, Some(&inputs.val), &inputs.objects, &weights, &cfg).unwrap()
        };
        let (a, b) = (run(), run());
        prop_assert_eq!(&a.history, &b.history);
        prop_assert_eq!(&a.model, &b.model);
        prop_assert!(a.history.iter().all(|r| r.l_c.is_finite() && r.l_iw >= 0.0));
    }
}
