use std::collections::BTreeSet;
use std::fs;

use reftrack::bbox::BBox;
use reftrack::dataset::{
    compute_stats, parse_predictions, predictions_to_string, read_benchmark, write_benchmark,
    video_from_scene, Benchmark, EntityRecord, PredRow, Video,
};
use reftrack::promptlang::{combine, filter_by_support, parse, scene_atoms, Prompt, PromptPolicy, ReferralMap};
use reftrack::scenesim::{build_world, project, Category, GroundTruth, GtEntry, WorldConfig};
use reftrack::Error;

fn toy_video(frames: usize) -> Video {
    let entry = |id, x| GtEntry {
        id,
        bbox: BBox::new(x, 10.0, 12.5, 7.25),
        category: Category::Car,
    };
    let gt = GroundTruth {
        image_size: (64, 48),
        frames: (0..frames)
            .map(|t| vec![entry(1, 1.0 + t as f64 / 3.0), entry(2, 30.0)])
            .collect(),
    };
    let mut referral = ReferralMap::empty(frames);
    for t in 0..frames / 2 {
        referral.frames[t] = BTreeSet::from([1, 2]);
    }
    let predicate = parse("the black cars").unwrap();
    Video {
        name: "toy".into(),
        palette: vec!["black".into(), "white".into()],
        entities: vec![
            EntityRecord {
                id: 1,
                category: Category::Car,
                color: "black".into(),
            },
            EntityRecord {
                id: 2,
                category: Category::Car,
                color: "black".into(),
            },
        ],
        gt,
        prompts: vec![Prompt {
            id: "0001".into(),
            text: "the black cars".into(),
            predicate,
            support: 2,
        }],
        referrals: vec![referral],
    }
}

#[test]
fn toy_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let bench = Benchmark {
        videos: vec![toy_video(3)],
    };
    write_benchmark(dir.path(), &bench).unwrap();
    let back = read_benchmark(dir.path()).unwrap();
    assert_eq!(back, bench);
    let gt = fs::read_to_string(dir.path().join("toy/gt.txt")).unwrap();
    assert_eq!(gt.lines().next().unwrap(), "1,1,1,10,12.5,7.25,1,1,-1");
    let exp = fs::read_to_string(dir.path().join("toy/expression/0001")).unwrap();
    assert_eq!(exp, "the black cars\n1: 1,2\n");
}

#[test]
fn generated_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = WorldConfig {
        seed: 9,
        num_frames: 60,
        ..WorldConfig::default()
    };
    let scene = build_world(&cfg).unwrap();
    let gt = project(&scene);
    let policy = PromptPolicy {
        max_prompts: Some(40),
        ..PromptPolicy::default()
    };
    let trees = combine(&scene_atoms(&scene), &policy, 1);
    let prompts = filter_by_support(&trees, &scene, &gt, 2).unwrap();
    assert!(!prompts.is_empty());
    let video = video_from_scene("v0", &scene, &gt, prompts).unwrap();
    let bench = Benchmark { videos: vec![video] };
    write_benchmark(dir.path(), &bench).unwrap();
    assert_eq!(read_benchmark(dir.path()).unwrap(), bench);
}

#[test]
fn dangling_referral_rejected_before_writing() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = toy_video(3);
    v.referrals[0].frames[0].insert(7);
    let err = write_benchmark(dir.path(), &Benchmark { videos: vec![v] }).unwrap_err();
    assert!(matches!(err, Error::Validation(_)));
    assert!(!dir.path().join("toy").exists());
}

#[test]
fn empty_prompt_list_is_valid() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = toy_video(2);
    v.prompts.clear();
    v.referrals.clear();
    let bench = Benchmark { videos: vec![v] };
    write_benchmark(dir.path(), &bench).unwrap();
    assert_eq!(fs::read_dir(dir.path().join("toy/expression")).unwrap().count(), 0);
    assert_eq!(read_benchmark(dir.path()).unwrap(), bench);
}

#[test]
fn truncated_gt_line_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    write_benchmark(dir.path(), &Benchmark { videos: vec![toy_video(3)] }).unwrap();
    let path = dir.path().join("toy/gt.txt");
    let mut text = fs::read_to_string(&path).unwrap();
    text.push_str("3,1,5,5\n");
    fs::write(&path, text).unwrap();
    match read_benchmark(dir.path()).unwrap_err() {
        Error::Format { line, path: p, .. } => {
            assert_eq!(line, 7);
            assert!(p.ends_with("gt.txt"));
        }
        e => panic!("{e}"),
    }
}

#[test]
fn malformed_number_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    write_benchmark(dir.path(), &Benchmark { videos: vec![toy_video(2)] }).unwrap();
    let path = dir.path().join("toy/gt.txt");
    let text = fs::read_to_string(&path).unwrap().replacen("12.5", "12.x", 2);
    fs::write(&path, text).unwrap();
    let err = read_benchmark(dir.path()).unwrap_err();
    assert!(matches!(err, Error::Format { line: 1, .. }), "{err}");
}

#[test]
fn dangling_id_on_read_names_prompt_and_frame() {
    let dir = tempfile::tempdir().unwrap();
    write_benchmark(dir.path(), &Benchmark { videos: vec![toy_video(3)] }).unwrap();
    fs::write(dir.path().join("toy/expression/0001"), "the black cars\n2: 99\n").unwrap();
    let msg = read_benchmark(dir.path()).unwrap_err().to_string();
    assert!(msg.contains("0001") && msg.contains("frame 2") && msg.contains("99"), "{msg}");
}

#[test]
fn missing_gt_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(read_benchmark(dir.path()).unwrap_err().is_io());
}

#[test]
fn stats_on_constructed_benchmarks() {
    // one prompt, one instance, every frame
    let mut v = toy_video(4);
    v.referrals[0] = ReferralMap {
        frames: vec![BTreeSet::from([1]); 4],
    };
    v.prompts[0].support = 1;
    let s = compute_stats(&Benchmark { videos: vec![v] });
    assert_eq!(s.instances_per_prompt, 1.0);
    assert_eq!(s.temporal_ratio, 1.0);

    // ids {1,2} on half the frames
    let s = compute_stats(&Benchmark {
        videos: vec![toy_video(4)],
    });
    assert_eq!(s.instances_per_prompt, 2.0);
    assert_eq!(s.temporal_ratio, 0.5);
    assert_eq!(s.frames, 4);
    assert_eq!(s.boxes, 8);
    assert_eq!(s.duration_hist.mass(), 2);
    assert_eq!(s.word_freq["black"], 1);
}

#[test]
fn stats_ignore_ordering_and_histograms_hold_mass() {
    let cfg = WorldConfig {
        seed: 2,
        num_frames: 80,
        ..WorldConfig::default()
    };
    let mut videos = Vec::new();
    for k in 0..2 {
        let scene = build_world(&WorldConfig { seed: k, ..cfg.clone() }).unwrap();
        let gt = project(&scene);
        let trees = combine(&scene_atoms(&scene), &PromptPolicy { max_prompts: Some(30), ..PromptPolicy::default() }, k);
        let prompts = filter_by_support(&trees, &scene, &gt, 1).unwrap();
        videos.push(video_from_scene(&format!("v{k}"), &scene, &gt, prompts).unwrap());
    }
    let a = compute_stats(&Benchmark { videos: videos.clone() });
    let mut shuffled = videos;
    shuffled.reverse();
    for v in shuffled.iter_mut() {
        v.prompts.reverse();
        v.referrals.reverse();
    }
    let b = compute_stats(&Benchmark { videos: shuffled });
    assert_eq!(a, b);
    let inst_mass: usize = a.instances_hist.iter().map(|(k, n)| k * n).sum();
    assert_eq!(inst_mass, a.duration_hist.mass());
    assert_eq!(a.instances_hist.values().sum::<usize>(), a.prompts);
    assert_eq!(a.temporal_ratio_hist.mass(), a.prompts);
}

#[test]
fn prediction_rows_round_trip() {
    let rows = vec![
        PredRow {
            frame: 0,
            id: 4,
            bbox: BBox::new(1.5, 2.0, 3.0, 4.25),
            score: 0.8,
        },
        PredRow {
            frame: 9,
            id: 1,
            bbox: BBox::new(0.0, 0.0, 1.0, 1.0),
            score: -0.25,
        },
    ];
    let text = predictions_to_string(&rows);
    assert_eq!(text.lines().next().unwrap(), "1,4,1.5,2,3,4.25,0.8");
    let p = std::path::Path::new("pred.txt");
    assert_eq!(parse_predictions(p, &text).unwrap(), rows);
    let ten = parse_predictions(p, "2,3,1,1,5,5,1,1,-1,0.5\n").unwrap();
    assert_eq!(ten[0].frame, 1);
    assert_eq!(ten[0].score, 0.5);
    assert!(matches!(
        parse_predictions(p, "1,1,1,1,5,5\n"),
        Err(Error::Format { line: 1, .. })
    ));
    assert!(parse_predictions(p, "0,1,1,1,5,5,0.5\n").is_err());
}
