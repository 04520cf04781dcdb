use geocd_core::confidence::Route;
use geocd_core::dataset::{NormStats, ScenePair};
use geocd_core::model::{FcnConfig, FcnModel};
use geocd_core::pipeline::{confidence_entries, infer_scenes, run_pipeline};
use geocd_core::synth::{synthesize, StylePool, SynthConfig};
use geocd_core::train::{train_on, TrainConfig};
use geocd_core::unsup::unsupervised_change_map;

fn fixture() -> (Vec<ScenePair>, FcnModel, NormStats) {
    let scenes = synthesize(&SynthConfig {
        train_scenes: 2,
        test_scenes: 5,
        test_pool: StylePool::Graded { from: 0.0, to: 1.0 },
        height: 32,
        width: 32,
        seed: 3,
        ..SynthConfig::default()
    })
    .unwrap();
    let (train, test): (Vec<_>, Vec<_>) = scenes.into_iter().partition(|s| s.scene_id.starts_with("train"));
    let refs: Vec<&ScenePair> = train.iter().collect();
    let cfg = FcnConfig {
        base_channels: 4,
        depth: 2,
        seed: 3,
        ..FcnConfig::new(refs[0].bands(), 2)
    };
    let (report, model) = train_on(
        &refs,
        cfg,
        TrainConfig {
            epochs: 3,
            patch_size: 16,
            batch_size: 4,
            patches_per_scene_per_epoch: 4,
            seed: 3,
            ..TrainConfig::default()
        },
    )
    .unwrap();
    (test, model, report.norm_stats)
}

#[test]
fn routing_contracts() {
    let (test, model, stats) = fixture();
    let scenes: Vec<&ScenePair> = test.iter().collect();
    let inferred = infer_scenes(&model, &scenes, &stats).unwrap();

    // tau = 0: everything supervised, maps identical to plain inference
    let run = run_pipeline(&model, &scenes, &stats, 0.0, false).unwrap();
    assert!(run.outcomes.iter().all(|o| o.route == Route::Supervised));
    for (o, i) in run.outcomes.iter().zip(&inferred) {
        assert_eq!(o.map, i.map);
    }

    // tau = 1 with distinct betas: only the arg-max scene stays supervised
    let run = run_pipeline(&model, &scenes, &stats, 1.0, false).unwrap();
    let top = run.entries.iter().max_by(|a, b| a.beta.total_cmp(&b.beta)).unwrap();
    for (e, o) in run.entries.iter().zip(&run.outcomes) {
        let want = if e.scene_id == top.scene_id {
            Route::Supervised
        } else {
            Route::Unsupervised
        };
        assert_eq!(e.route, want);
        assert_eq!(o.route, e.route);
    }

    // shipped maps agree with the route taken
    let run = run_pipeline(&model, &scenes, &stats, 0.5, false).unwrap();
    for ((o, s), i) in run.outcomes.iter().zip(&scenes).zip(&inferred) {
        match o.route {
            Route::Supervised => assert_eq!(o.map, i.map),
            Route::Unsupervised => {
                assert_eq!(o.map, unsupervised_change_map(&s.pre, &s.post, &stats).unwrap());
                assert_eq!(o.unsupervised.as_ref(), Some(&o.map));
            }
        }
    }

    // an operator-declared diverse training set skips routing
    let run = run_pipeline(&model, &scenes, &stats, 1.0, true).unwrap();
    assert!(run
        .outcomes
        .iter()
        .all(|o| o.route == Route::Supervised && o.unsupervised.is_none()));

    // out-of-range tau
    assert!(run_pipeline(&model, &scenes, &stats, 1.5, false).is_err());
}

#[test]
fn single_scene_is_degenerate_and_fully_confident() {
    let (test, model, stats) = fixture();
    let one = [&test[0]];
    let inferred = infer_scenes(&model, &one, &stats).unwrap();
    let entries = confidence_entries(&one, &inferred, 0.5).unwrap();
    assert_eq!(entries.len(), 1);
    assert_eq!(entries[0].beta_norm, 1.0);
    assert!(entries[0].degenerate);
    assert_eq!(entries[0].route, Route::Supervised);
}

#[test]
fn empty_test_set_is_an_error() {
    let (_, model, stats) = fixture();
    assert!(confidence_entries(&[], &[], 0.5).is_err());
    assert!(run_pipeline(&model, &[], &stats, 0.5, false).is_err());
}
