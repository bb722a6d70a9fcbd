use std::collections::BTreeSet;

use proptest::prelude::*;
use reftrack::promptlang::{
    combine, filter_by_support, parse, render, resolve, scene_atoms, Axis, AttributeAtom,
    PredicateTree, PromptPolicy, ReferralMap,
};
use reftrack::scenesim::{
    build_world, project, Category, Entity, MotionEvent, MotionKind, Pose, Scene, Trajectory,
    WorldConfig,
};

const COLORS: [&str; 4] = ["black", "grey", "red", "white"];

fn vocab(axis: Axis) -> Vec<&'static str> {
    match axis {
        Axis::Color => COLORS.to_vec(),
        a => a.vocabulary().to_vec(),
    }
}

/// Build a tree from per-axis value choices (empty = axis unused).
fn tree_from(choice: &[Vec<usize>; 4]) -> Option<PredicateTree> {
    let mut children = Vec::new();
    for (axis, picks) in Axis::ALL.into_iter().zip(choice) {
        let v = vocab(axis);
        let atoms: Vec<AttributeAtom> = picks
            .iter()
            .map(|&i| AttributeAtom::new(axis, v[i % v.len()]).unwrap())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        match atoms.len() {
            0 => {}
            1 => children.push(PredicateTree::atom(atoms[0].clone())),
            _ => children.push(PredicateTree::or(atoms).unwrap()),
        }
    }
    match children.len() {
        0 => None,
        1 => children.pop(),
        _ => Some(PredicateTree::and(children).unwrap()),
    }
}

fn arb_tree() -> impl Strategy<Value = PredicateTree> {
    let slot = || prop::collection::vec(0usize..8, 0..=3);
    (slot(), slot(), slot(), slot())
        .prop_filter_map("empty tree", |(a, b, c, d)| tree_from(&[a, b, c, d]))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn parse_render_round_trip(p in arb_tree()) {
        let text = render(&p);
        prop_assert_eq!(parse(&text).unwrap(), p);
    }
}

fn scene(seed: u64) -> (Scene, reftrack::scenesim::GroundTruth) {
    let cfg = WorldConfig {
        seed,
        num_frames: 120,
        ..WorldConfig::default()
    };
    let s = build_world(&cfg).unwrap();
    let gt = project(&s);
    (s, gt)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn resolve_laws(seed in 0u64..500, i in 0usize..64, j in 0usize..64) {
        let (s, gt) = scene(seed);
        let atoms = scene_atoms(&s);
        prop_assume!(atoms.len() >= 2);
        let a = &atoms[i % atoms.len()];
        let b = &atoms[j % atoms.len()];
        let ra = resolve(&PredicateTree::atom(a.clone()), &s, &gt).unwrap();
        let rb = resolve(&PredicateTree::atom(b.clone()), &s, &gt).unwrap();
        if a.axis() != b.axis() {
            let and = PredicateTree::and(vec![PredicateTree::atom(a.clone()), PredicateTree::atom(b.clone())]).unwrap();
            prop_assert_eq!(resolve(&and, &s, &gt).unwrap(), ra.intersect(&rb));
        } else if a != b {
            let or = PredicateTree::or(vec![a.clone(), b.clone()]).unwrap();
            prop_assert_eq!(resolve(&or, &s, &gt).unwrap(), ra.union(&rb));
        }
        for (t, ids) in ra.frames.iter().enumerate() {
            let visible: BTreeSet<u32> = gt.visible_ids(t).collect();
            prop_assert!(ids.is_subset(&visible));
        }
    }

    #[test]
    fn support_filter_is_antitone(seed in 0u64..500, k in 1usize..6) {
        let (s, gt) = scene(seed);
        let policy = PromptPolicy { max_prompts: Some(150), ..PromptPolicy::default() };
        let trees = combine(&scene_atoms(&s), &policy, seed);
        let lo: BTreeSet<String> = filter_by_support(&trees, &s, &gt, k).unwrap().into_iter().map(|p| p.text).collect();
        let hi: BTreeSet<String> = filter_by_support(&trees, &s, &gt, k + 1).unwrap().into_iter().map(|p| p.text).collect();
        prop_assert!(hi.is_subset(&lo));
    }
}

/// Static toy scene: `n` entities all visible on every frame, with the given
/// attributes and events.
fn toy(entities: Vec<(Category, &str)>, events: Vec<MotionEvent>, frames: usize) -> Scene {
    let config = WorldConfig {
        num_frames: frames,
        color_palette: vec!["black".into(), "white".into()],
        ..WorldConfig::default()
    };
    let entities: Vec<Entity> = entities
        .into_iter()
        .enumerate()
        .map(|(i, (category, color))| Entity {
            id: i as u32 + 1,
            category,
            color: color.into(),
            size: (4.0, 2.0),
        })
        .collect();
    let trajectories = entities
        .iter()
        .map(|e| Trajectory {
            entity_id: e.id,
            first_frame: 0,
            poses: vec![
                Pose {
                    x: -20.0 + 8.0 * e.id as f64,
                    y: 0.0,
                    heading: 0.0,
                };
                frames
            ],
        })
        .collect();
    Scene {
        config,
        entities,
        events,
        trajectories,
    }
}

#[test]
fn black_turning_car_example() {
    let ev = |id, kind, s, e| MotionEvent {
        entity_id: id,
        kind,
        frame_interval: (s, e),
    };
    let s = toy(
        vec![
            (Category::Car, "white"),
            (Category::Car, "black"),
            (Category::Car, "black"),
        ],
        vec![
            ev(1, MotionKind::TurningLeft, 0, 29),
            ev(2, MotionKind::TurningRight, 10, 20),
            ev(3, MotionKind::TurningLeft, 10, 20),
        ],
        30,
    );
    let gt = project(&s);
    let p = parse("the black vehicles which are turning left").unwrap();
    let r = resolve(&p, &s, &gt).unwrap();
    // brute-force scan of the events
    for t in 0..30 {
        let want: BTreeSet<u32> = s
            .events
            .iter()
            .filter(|e| e.kind == MotionKind::TurningLeft && e.contains(t))
            .map(|e| e.entity_id)
            .filter(|id| s.entity(*id).unwrap().color == "black")
            .collect();
        assert_eq!(r.frames[t], want);
        assert_eq!(!want.is_empty(), (10..=20).contains(&t));
    }
    assert_eq!(r.frames[15], BTreeSet::from([3]));
}

#[test]
fn or_of_colors_is_union_of_visible() {
    let s = toy(
        vec![(Category::Car, "white"), (Category::Bus, "black")],
        Vec::new(),
        5,
    );
    let gt = project(&s);
    let p = parse("the black or white vehicles").unwrap();
    let r = resolve(&p, &s, &gt).unwrap();
    assert!(r.frames.iter().all(|f| *f == BTreeSet::from([1, 2])));
    let bad = parse("the red vehicles").unwrap();
    assert!(resolve(&bad, &s, &gt).is_err());
}

#[test]
fn support_counts_distinct_instances() {
    let s = toy(
        vec![
            (Category::Car, "black"),
            (Category::Car, "black"),
            (Category::Car, "black"),
            (Category::Car, "white"),
        ],
        Vec::new(),
        4,
    );
    let gt = project(&s);
    let black = parse("the black vehicles").unwrap();
    let nothing = parse("the buses").unwrap();
    let out = filter_by_support(&[black.clone(), nothing.clone()], &s, &gt, 2).unwrap();
    assert_eq!(out.len(), 1);
    assert_eq!(out[0].support, 3);
    assert_eq!(out[0].text, "the black vehicles");
    assert!(filter_by_support(&[nothing], &s, &gt, 1).unwrap().is_empty());
}

/// Independent count of valid trees: every nonempty subset of atoms, grouped
/// by axis, is one tree when no axis group exceeds the Or width.
fn brute_force_count(atoms: &[AttributeAtom], width: usize) -> usize {
    let n = atoms.len();
    let mut trees = BTreeSet::new();
    for mask in 1u32..(1 << n) {
        let chosen: Vec<&AttributeAtom> = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| &atoms[i]).collect();
        let ok = Axis::ALL
            .iter()
            .all(|ax| chosen.iter().filter(|a| a.axis() == *ax).count() <= width);
        if ok {
            trees.insert(mask);
        }
    }
    trees.len()
}

#[test]
fn exhaustive_count_matches_enumeration() {
    let atoms = vec![
        AttributeAtom::color("black").unwrap(),
        AttributeAtom::color("white").unwrap(),
        AttributeAtom::motion(MotionKind::Moving),
        AttributeAtom::motion(MotionKind::Parked),
    ];
    let all = combine(&atoms, &PromptPolicy::default(), 0);
    // 4 atoms + 2 Ors + 3x3 - 1 ... i.e. (1+2+1)^2 - 1
    assert_eq!(all.len(), 15);
    assert_eq!(all.len(), brute_force_count(&atoms, 2));
    let distinct: BTreeSet<String> = all.iter().map(render).collect();
    assert_eq!(distinct.len(), all.len());

    let mut atoms5 = atoms.clone();
    atoms5.push(AttributeAtom::motion(MotionKind::TurningLeft));
    atoms5.push(AttributeAtom::category(Category::Car));
    let all = combine(&atoms5, &PromptPolicy::default(), 0);
    assert_eq!(all.len(), brute_force_count(&atoms5, 2));
}

#[test]
fn single_axis_yields_atoms_and_ors_only() {
    let atoms: Vec<AttributeAtom> = ["black", "white", "red"]
        .iter()
        .map(|c| AttributeAtom::color(c).unwrap())
        .collect();
    let all = combine(&atoms, &PromptPolicy::default(), 0);
    assert!(all
        .iter()
        .all(|t| matches!(t, PredicateTree::Atom(_) | PredicateTree::Or(_))));
    assert_eq!(all.len(), 3 + 3);
}

#[test]
fn seeded_sample_is_deterministic() {
    let (s, _) = scene(4);
    let policy = PromptPolicy {
        max_prompts: Some(10),
        ..PromptPolicy::default()
    };
    let a = combine(&scene_atoms(&s), &policy, 9);
    let b = combine(&scene_atoms(&s), &policy, 9);
    assert_eq!(a, b);
    assert_eq!(a.len(), 10);
}

#[test]
fn empty_referral_map_helpers() {
    let m = ReferralMap::empty(3);
    assert_eq!(m.referred_frames(), 0);
    assert!(m.instances().is_empty());
}
