use tas_core::data::labels::count_runs;
use tas_core::data::synthetic::nearest_centroid_accuracy;
use tas_core::data::{generate_synthetic, make_folds, ClassMap, Dataset, GeneratorConfig};

#[test]
fn default_corpus_is_learnable_by_nearest_centroid() {
    let cfg = GeneratorConfig::default();
    let corpus = generate_synthetic(&cfg).unwrap();
    assert_eq!(corpus.videos.len(), 99);
    let acc = nearest_centroid_accuracy(&corpus.videos, &corpus.centroids);
    assert!(acc >= 95.0, "nearest-centroid accuracy {acc:.2}");

    let frames: usize = corpus.videos.iter().map(|v| v.len()).sum();
    let mean_t = frames as f64 / 99.0;
    assert!((450.0..550.0).contains(&mean_t), "mean length {mean_t}");
    let segs: usize = corpus.videos.iter().map(|v| count_runs(&v.labels)).sum();
    let mean_segs = segs as f64 / 99.0;
    assert!((15.5..18.5).contains(&mean_segs), "mean segments {mean_segs}");
}

#[test]
fn empirical_self_transition_matches_config() {
    let cfg = GeneratorConfig {
        videos: 100,
        seed: 7,
        ..Default::default()
    };
    let corpus = generate_synthetic(&cfg).unwrap();
    let (mut same, mut pairs) = (0usize, 0usize);
    for v in &corpus.videos {
        same += v.labels.windows(2).filter(|w| w[0] == w[1]).count();
        pairs += v.len() - 1;
    }
    let empirical = same as f64 / pairs as f64;
    let target = cfg.self_transition();
    assert!((empirical - target).abs() <= 0.02 * target, "{empirical} vs {target}");
}

#[test]
fn dataset_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = GeneratorConfig {
        videos: 8,
        ..Default::default()
    };
    let corpus = generate_synthetic(&cfg).unwrap();
    let ds = Dataset::create(dir.path(), ClassMap::workflow(15)).unwrap();
    for v in &corpus.videos {
        ds.save_video(v).unwrap();
    }
    let ids: Vec<String> = corpus.videos.iter().map(|v| v.id.clone()).collect();
    ds.write_folds(&make_folds(&ids, 4, 3).unwrap()).unwrap();

    let reopened = Dataset::open(dir.path()).unwrap();
    assert_eq!(reopened.classes, ClassMap::workflow(15));
    assert_eq!(reopened.video_ids().unwrap(), ids);
    assert_eq!(reopened.fold_count(), 4);
    for v in &corpus.videos {
        assert_eq!(&reopened.load_video(&v.id, cfg.fps).unwrap(), v);
    }
    let fold = reopened.read_fold(1).unwrap();
    assert_eq!(fold.test.len(), 2);
    assert_eq!(fold.train.len(), 6);

    let gt = std::fs::read_to_string(reopened.gt_path("video_000")).unwrap();
    assert_eq!(gt.lines().count(), corpus.videos[0].len());
    assert_eq!(gt.lines().next(), Some("checking_scene_safety"));
}

#[test]
fn missing_dataset_is_an_io_error_naming_the_path() {
    let err = Dataset::open("/nonexistent/tas").unwrap_err().to_string();
    assert!(err.contains("/nonexistent/tas/mapping.txt"), "{err}");
}
