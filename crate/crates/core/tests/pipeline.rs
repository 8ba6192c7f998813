use hloc::geometry::{pose_error, Vec2};
use hloc::global_index::GlobalIndex;
use hloc::map::{DescriptorMatrix, KeyframeId};
use hloc::matching::QueryFrame;
use hloc::pipeline::{LocalizationResult, Localizer, Mode, PipelineParams};
use hloc::synth::{generate_world, SynthConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config() -> SynthConfig {
    SynthConfig {
        num_places: 4,
        keyframes_per_place: 8,
        landmarks_per_place: 600,
        num_queries: 24,
        aliasing_pairs: vec![(0, 1)],
        ..SynthConfig::default()
    }
}

/// Everything but the wall-clock timings.
fn comparable(r: &LocalizationResult) -> impl PartialEq + std::fmt::Debug + '_ {
    (
        r.query_id,
        r.pose,
        &r.inliers,
        r.places_retrieved,
        r.places_evaluated,
        &r.priors,
        &r.attempts,
        &r.error,
    )
}

#[test]
fn keyframe_localizes_against_its_own_map() {
    let (map, _) = generate_world(&config()).unwrap();
    let index = GlobalIndex::build(&map, 16).unwrap();
    let loc = Localizer::new(&map, &index).unwrap();
    for kf in [0, 9, 17, 30] {
        let q = QueryFrame::from_keyframe(&map, KeyframeId(kf), kf).unwrap();
        let r = loc.localize(&q, &PipelineParams::default()).unwrap();
        assert_eq!(r.priors[0], KeyframeId(kf));
        let truth = map.keyframe(KeyframeId(kf)).unwrap().pose;
        let e = pose_error(&r.pose.expect("localized"), &truth);
        assert!(e.position_m < 0.1 && e.angle_deg < 1.0, "{e:?}");
        assert!(r.num_inliers >= PipelineParams::default().ransac.min_inliers);
    }
}

#[test]
fn random_query_fails_after_trying_every_place() {
    let (map, queries) = generate_world(&config()).unwrap();
    let index = GlobalIndex::build(&map, 16).unwrap();
    let loc = Localizer::new(&map, &index).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut q = queries.queries[0].clone();
    let n = q.keypoints.len();
    q.keypoints = (0..n)
        .map(|_| Vec2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0)))
        .collect();
    let rows: Vec<Vec<f32>> = (0..n)
        .map(|_| (0..map.local_dim()).map(|_| rng.random_range(-1.0f32..1.0)).collect())
        .collect();
    q.local_descriptors = DescriptorMatrix::from_rows(map.local_dim(), &rows).unwrap();
    let r = loc.localize(&q, &PipelineParams::default()).unwrap();
    assert!(r.pose.is_none());
    assert!(r.places_retrieved >= 1);
    assert_eq!(r.places_evaluated, r.places_retrieved);
    assert_eq!(r.attempts.len(), r.places_retrieved);
    assert!(r.attempts.iter().all(|a| !a.localized));
}

#[test]
fn later_places_are_never_matched() {
    let (map, queries) = generate_world(&config()).unwrap();
    let index = GlobalIndex::build(&map, 16).unwrap();
    let results = Localizer::new(&map, &index)
        .unwrap()
        .localize_batch(&queries.queries, &PipelineParams::default())
        .unwrap();
    for r in &results {
        assert_eq!(r.attempts.len(), r.places_evaluated);
        assert!(r.places_evaluated <= r.places_retrieved);
        let ranks: Vec<usize> = r.attempts.iter().map(|a| a.rank).collect();
        assert_eq!(ranks, (0..r.places_evaluated).collect::<Vec<_>>());
        if r.is_localized() {
            assert!(r.attempts.last().unwrap().localized);
            assert!(r.attempts[..r.attempts.len() - 1].iter().all(|a| !a.localized));
        }
    }
}

#[test]
fn single_place_hierarchical_equals_direct() {
    let cfg = SynthConfig {
        num_places: 1,
        aliasing_pairs: Vec::new(),
        ..config()
    };
    let (map, queries) = generate_world(&cfg).unwrap();
    let index = GlobalIndex::build(&map, 4).unwrap();
    let loc = Localizer::new(&map, &index).unwrap();
    let mut params = PipelineParams {
        num_priors: map.num_keyframes(),
        ..PipelineParams::default()
    };
    params.matching.epsilon = 0.0;
    let hier = loc.localize_batch(&queries.queries, &params).unwrap();
    params.mode = Mode::Direct;
    let direct = loc.localize_batch(&queries.queries, &params).unwrap();
    let mut localized = 0;
    for (h, d) in hier.iter().zip(&direct) {
        assert_eq!(h.inliers, d.inliers);
        assert_eq!(h.pose, d.pose);
        localized += h.is_localized() as usize;
    }
    assert!(localized > queries.queries.len() / 2);
}

#[test]
fn batch_is_independent_of_thread_count() {
    let (map, queries) = generate_world(&config()).unwrap();
    let index = GlobalIndex::build(&map, 16).unwrap();
    let loc = Localizer::new(&map, &index).unwrap();
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| loc.localize_batch(&queries.queries, &PipelineParams::default()).unwrap())
    };
    let (one, three) = (run(1), run(3));
    assert_eq!(one.len(), queries.queries.len());
    for (a, b) in one.iter().zip(&three) {
        assert_eq!(comparable(a), comparable(b));
    }
    let ids: Vec<u64> = one.iter().map(|r| r.query_id).collect();
    let expected: Vec<u64> = queries.queries.iter().map(|q| q.id).collect();
    assert_eq!(ids, expected);
}

#[test]
fn malformed_query_in_batch_yields_failed_record() {
    let (map, queries) = generate_world(&config()).unwrap();
    let index = GlobalIndex::build(&map, 16).unwrap();
    let mut batch = queries.queries[..3].to_vec();
    batch[1].global_descriptor.pop();
    let results = Localizer::new(&map, &index)
        .unwrap()
        .localize_batch(&batch, &PipelineParams::default())
        .unwrap();
    assert!(results[1].error.is_some() && results[1].pose.is_none());
    assert!(results[0].error.is_none() && results[2].error.is_none());
}

#[test]
fn invalid_parameters_are_rejected() {
    let (map, queries) = generate_world(&config()).unwrap();
    let index = GlobalIndex::build(&map, 16).unwrap();
    let loc = Localizer::new(&map, &index).unwrap();
    let params = PipelineParams {
        num_priors: 0,
        ..PipelineParams::default()
    };
    assert!(loc.localize(&queries.queries[0], &params).is_err());
    assert!(loc.localize_batch(&queries.queries, &params).is_err());
    let other = GlobalIndex::build(&generate_world(&SynthConfig { num_places: 2, ..config() }).unwrap().0, 8).unwrap();
    assert!(Localizer::new(&map, &other).is_err());
}
