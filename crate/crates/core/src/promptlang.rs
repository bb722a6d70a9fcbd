//! Attribute atoms, AND/OR predicate trees, their canonical English form and
//! resolution against a scene.
//!
//! Trees have depth at most two: an `And` over distinct axes whose children
//! are atoms or single-axis `Or`s. All constructors canonicalize (children
//! of `And` ordered by axis, of `Or` by vocabulary order), so structural
//! equality is equality up to commutativity.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenesim::{Category, GroundTruth, MotionKind, Scene};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Category,
    Color,
    Motion,
    Orientation,
}

impl Axis {
    pub const ALL: [Axis; 4] = [Axis::Category, Axis::Color, Axis::Motion, Axis::Orientation];

    pub fn name(self) -> &'static str {
        match self {
            Axis::Category => "category",
            Axis::Color => "color",
            Axis::Motion => "motion",
            Axis::Orientation => "orientation",
        }
    }

    /// Closed vocabulary of the axis; colors are open (any plain word).
    pub fn vocabulary(self) -> &'static [&'static str] {
        match self {
            Axis::Category => &["car", "bus", "truck", "pedestrian"],
            Axis::Color => &[],
            Axis::Motion => &["moving", "parked", "turning_left", "turning_right", "going_straight"],
            Axis::Orientation => &["counter_direction", "lateral"],
        }
    }
}

const RESERVED: &[&str] = &["the", "or", "and", "which", "are", "vehicles"];

fn category_plural(v: &str) -> &'static str {
    match v {
        "car" => "cars",
        "bus" => "buses",
        "truck" => "trucks",
        _ => "pedestrians",
    }
}

fn phrase(axis: Axis, v: &str) -> &'static str {
    match (axis, v) {
        (Axis::Motion, "moving") => "moving",
        (Axis::Motion, "parked") => "parked",
        (Axis::Motion, "turning_left") => "turning left",
        (Axis::Motion, "turning_right") => "turning right",
        (Axis::Motion, "going_straight") => "going straight",
        (Axis::Orientation, "counter_direction") => "in the counter direction",
        (Axis::Orientation, "lateral") => "lateral",
        _ => unreachable!("validated atom"),
    }
}

/// Whether `s` may serve as a color word.
pub fn is_color_word(s: &str) -> bool {
    !s.is_empty()
        && s.chars().all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '-')
        && !RESERVED.contains(&s)
        && !Axis::Category.vocabulary().iter().any(|c| *c == s || category_plural(c) == s)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AttributeAtom {
    axis: Axis,
    value: String,
}

impl AttributeAtom {
    pub fn new(axis: Axis, value: impl Into<String>) -> Result<Self> {
        let value = value.into();
        let ok = match axis {
            Axis::Color => is_color_word(&value),
            _ => axis.vocabulary().contains(&value.as_str()),
        };
        if !ok {
            return Err(Error::Validation(format!(
                "`{value}` is not in the {} vocabulary",
                axis.name()
            )));
        }
        Ok(Self { axis, value })
    }

    pub fn category(c: Category) -> Self {
        Self {
            axis: Axis::Category,
            value: c.name().to_string(),
        }
    }

    pub fn motion(k: MotionKind) -> Self {
        let axis = match k {
            MotionKind::CounterDirection | MotionKind::Lateral => Axis::Orientation,
            _ => Axis::Motion,
        };
        Self {
            axis,
            value: k.name().to_string(),
        }
    }

    pub fn color(c: &str) -> Result<Self> {
        Self::new(Axis::Color, c)
    }

    pub fn axis(&self) -> Axis {
        self.axis
    }

    pub fn value(&self) -> &str {
        &self.value
    }

    /// Sort key: axis, then vocabulary position (colors alphabetically).
    fn key(&self) -> (Axis, usize, &str) {
        let pos = self
            .axis
            .vocabulary()
            .iter()
            .position(|v| *v == self.value)
            .unwrap_or(0);
        (self.axis, pos, &self.value)
    }
}

impl PartialOrd for AttributeAtom {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for AttributeAtom {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.key().cmp(&other.key())
    }
}

impl fmt::Display for AttributeAtom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}={}", self.axis.name(), self.value)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PredicateTree {
    Atom(AttributeAtom),
    /// Two or more atoms of one axis.
    Or(Vec<AttributeAtom>),
    /// Two or more atoms or `Or`s over pairwise distinct axes.
    And(Vec<PredicateTree>),
}

impl PredicateTree {
    pub fn atom(a: AttributeAtom) -> Self {
        PredicateTree::Atom(a)
    }

    pub fn or(atoms: Vec<AttributeAtom>) -> Result<Self> {
        let mut atoms = atoms;
        atoms.sort();
        atoms.dedup();
        if atoms.len() < 2 {
            return Err(Error::Validation("Or needs at least two distinct children".into()));
        }
        if atoms.iter().any(|a| a.axis != atoms[0].axis) {
            return Err(Error::Validation("Or children must share one axis".into()));
        }
        Ok(PredicateTree::Or(atoms))
    }

    pub fn and(children: Vec<PredicateTree>) -> Result<Self> {
        let mut children = children;
        if children.len() < 2 {
            return Err(Error::Validation("And needs at least two children".into()));
        }
        let mut axes = BTreeSet::new();
        for c in &children {
            let axis = c
                .axis()
                .ok_or_else(|| Error::Validation("And cannot nest another And".into()))?;
            if !axes.insert(axis) {
                return Err(Error::Validation(format!(
                    "And children must have distinct axes ({} repeated)",
                    axis.name()
                )));
            }
        }
        children.sort_by_key(|c| c.axis());
        Ok(PredicateTree::And(children))
    }

    /// Axis of an atom or `Or`; `None` for `And`.
    pub fn axis(&self) -> Option<Axis> {
        match self {
            PredicateTree::Atom(a) => Some(a.axis),
            PredicateTree::Or(v) => v.first().map(|a| a.axis),
            PredicateTree::And(_) => None,
        }
    }

    /// Check the structural invariants and canonical ordering.
    pub fn validate(&self) -> Result<()> {
        let rebuilt = match self {
            PredicateTree::Atom(a) => PredicateTree::Atom(AttributeAtom::new(a.axis, a.value.clone())?),
            PredicateTree::Or(v) => PredicateTree::or(v.clone())?,
            PredicateTree::And(v) => {
                for c in v {
                    c.validate()?;
                }
                PredicateTree::and(v.clone())?
            }
        };
        if &rebuilt != self {
            return Err(Error::Validation("tree is not in canonical order".into()));
        }
        Ok(())
    }

    /// Atoms grouped per axis.
    fn slots(&self) -> BTreeMap<Axis, Vec<&AttributeAtom>> {
        let mut out: BTreeMap<Axis, Vec<&AttributeAtom>> = BTreeMap::new();
        match self {
            PredicateTree::Atom(a) => out.entry(a.axis).or_default().push(a),
            PredicateTree::Or(v) => out.entry(v[0].axis).or_default().extend(v),
            PredicateTree::And(cs) => {
                for c in cs {
                    for (k, v) in c.slots() {
                        out.entry(k).or_default().extend(v);
                    }
                }
            }
        }
        out
    }

    pub fn atoms(&self) -> Vec<&AttributeAtom> {
        self.slots().into_values().flatten().collect()
    }
}

impl fmt::Display for PredicateTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&render(self))
    }
}

/// Canonical English rendering:
/// `the [colors] <categories|vehicles> [which are <motions> [and <orientations>]]`.
pub fn render(p: &PredicateTree) -> String {
    let slots = p.slots();
    let join = |axis: Axis, f: &dyn Fn(&str) -> String| -> Option<String> {
        slots
            .get(&axis)
            .map(|v| v.iter().map(|a| f(&a.value)).collect::<Vec<_>>().join(" or "))
    };
    let mut words = vec!["the".to_string()];
    if let Some(c) = join(Axis::Color, &|v| v.to_string()) {
        words.push(c);
    }
    words.push(
        join(Axis::Category, &|v| category_plural(v).to_string()).unwrap_or_else(|| "vehicles".into()),
    );
    let motion = join(Axis::Motion, &|v| phrase(Axis::Motion, v).to_string());
    let orient = join(Axis::Orientation, &|v| phrase(Axis::Orientation, v).to_string());
    match (motion, orient) {
        (Some(m), Some(o)) => words.push(format!("which are {m} and {o}")),
        (Some(m), None) => words.push(format!("which are {m}")),
        (None, Some(o)) => words.push(format!("which are {o}")),
        (None, None) => {}
    }
    words.join(" ")
}

struct Cursor<'a> {
    text: &'a str,
    tokens: Vec<(usize, &'a str)>,
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(text: &'a str) -> Self {
        let mut tokens = Vec::new();
        let mut start = 0;
        for (i, c) in text.char_indices() {
            if c == ' ' {
                tokens.push((start, &text[start..i]));
                start = i + 1;
            }
        }
        tokens.push((start, &text[start..]));
        Self { text, tokens, pos: 0 }
    }

    fn offset(&self) -> usize {
        self.tokens.get(self.pos).map_or(self.text.len(), |t| t.0)
    }

    fn peek(&self) -> Option<&'a str> {
        self.tokens.get(self.pos).map(|t| t.1)
    }

    fn error(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            position: self.offset(),
            message: message.into(),
        }
    }

    fn expect(&mut self, word: &str) -> Result<()> {
        match self.peek() {
            Some(w) if w == word => {
                self.pos += 1;
                Ok(())
            }
            Some(w) => Err(self.error(format!("expected `{word}`, found `{w}`"))),
            None => Err(self.error(format!("expected `{word}`, found end of text"))),
        }
    }

    /// Match a multi-word phrase at the cursor.
    fn try_phrase(&mut self, phrase: &str) -> bool {
        let words: Vec<&str> = phrase.split(' ').collect();
        let ok = words
            .iter()
            .enumerate()
            .all(|(k, w)| self.tokens.get(self.pos + k).is_some_and(|t| t.1 == *w));
        if ok {
            self.pos += words.len();
        }
        ok
    }

    fn at_end(&self) -> bool {
        self.pos >= self.tokens.len()
    }
}

fn category_from_plural(w: &str) -> Option<&'static str> {
    Axis::Category
        .vocabulary()
        .iter()
        .find(|c| category_plural(c) == w)
        .copied()
}

fn clause_atom(cur: &mut Cursor<'_>, axes: &[Axis]) -> Option<AttributeAtom> {
    for &axis in axes {
        for v in axis.vocabulary() {
            if cur.try_phrase(phrase(axis, v)) {
                return Some(AttributeAtom {
                    axis,
                    value: v.to_string(),
                });
            }
        }
    }
    None
}

fn slot(mut atoms: Vec<AttributeAtom>) -> Result<PredicateTree> {
    if atoms.len() == 1 {
        Ok(PredicateTree::Atom(atoms.pop().unwrap()))
    } else {
        PredicateTree::or(atoms)
    }
}

/// Parse canonical text back into a tree. Anything that is not exactly the
/// canonical rendering of some tree is rejected with the byte offset of the
/// first problem.
pub fn parse(text: &str) -> Result<PredicateTree> {
    if text.is_empty() {
        return Err(Error::Parse {
            position: 0,
            message: "empty prompt".into(),
        });
    }
    let mut cur = Cursor::new(text);
    cur.expect("the")?;
    let mut colors = Vec::new();
    let mut categories = Vec::new();
    loop {
        let Some(w) = cur.peek() else {
            return Err(cur.error("expected a color or category, found end of text"));
        };
        if w == "vehicles" || category_from_plural(w).is_some() {
            break;
        }
        if !is_color_word(w) {
            return Err(cur.error(format!("`{w}` is not a color word")));
        }
        colors.push(AttributeAtom {
            axis: Axis::Color,
            value: w.to_string(),
        });
        cur.pos += 1;
        if cur.peek() == Some("or") {
            cur.pos += 1;
        }
    }
    if cur.peek() == Some("vehicles") {
        cur.pos += 1;
    } else {
        loop {
            let w = cur.peek().unwrap_or("");
            let Some(c) = category_from_plural(w) else {
                return Err(cur.error(format!("expected a category, found `{w}`")));
            };
            categories.push(AttributeAtom {
                axis: Axis::Category,
                value: c.to_string(),
            });
            cur.pos += 1;
            if cur.peek() == Some("or") {
                cur.pos += 1;
            } else {
                break;
            }
        }
    }
    let mut motions = Vec::new();
    let mut orients = Vec::new();
    if !cur.at_end() {
        cur.expect("which")?;
        cur.expect("are")?;
        let mut allowed: &[Axis] = &[Axis::Motion, Axis::Orientation];
        loop {
            let Some(a) = clause_atom(&mut cur, allowed) else {
                return Err(cur.error("expected a motion or orientation phrase"));
            };
            let axis = a.axis;
            if axis == Axis::Motion {
                motions.push(a);
            } else {
                orients.push(a);
            }
            match cur.peek() {
                None => break,
                Some("or") => {
                    cur.pos += 1;
                    allowed = if axis == Axis::Motion { &[Axis::Motion] } else { &[Axis::Orientation] };
                }
                Some("and") if axis == Axis::Motion => {
                    cur.pos += 1;
                    allowed = &[Axis::Orientation];
                }
                Some(w) => return Err(cur.error(format!("unexpected `{w}`"))),
            }
        }
    }
    let mut children = Vec::new();
    for atoms in [categories, colors, motions, orients] {
        if !atoms.is_empty() {
            children.push(slot(atoms).map_err(|e| Error::Parse {
                position: 0,
                message: e.to_string(),
            })?);
        }
    }
    let tree = match children.len() {
        0 => {
            return Err(Error::Parse {
                position: text.len(),
                message: "prompt names no attribute".into(),
            })
        }
        1 => children.pop().unwrap(),
        _ => PredicateTree::and(children)?,
    };
    let canonical = render(&tree);
    if canonical != text {
        let position = canonical
            .bytes()
            .zip(text.bytes())
            .position(|(a, b)| a != b)
            .unwrap_or(canonical.len().min(text.len()));
        return Err(Error::Parse {
            position,
            message: format!("not in canonical form (expected `{canonical}`)"),
        });
    }
    Ok(tree)
}

/// Per-frame sets of referred entity ids (frames 0-based).
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ReferralMap {
    pub frames: Vec<BTreeSet<u32>>,
}

impl ReferralMap {
    pub fn empty(num_frames: usize) -> Self {
        Self {
            frames: vec![BTreeSet::new(); num_frames],
        }
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    /// Distinct ids referred on any frame.
    pub fn instances(&self) -> BTreeSet<u32> {
        self.frames.iter().flatten().copied().collect()
    }

    pub fn referred_frames(&self) -> usize {
        self.frames.iter().filter(|f| !f.is_empty()).count()
    }

    pub fn intersect(&self, other: &Self) -> Self {
        Self {
            frames: self
                .frames
                .iter()
                .zip(&other.frames)
                .map(|(a, b)| a.intersection(b).copied().collect())
                .collect(),
        }
    }

    pub fn union(&self, other: &Self) -> Self {
        Self {
            frames: self
                .frames
                .iter()
                .zip(&other.frames)
                .map(|(a, b)| a.union(b).copied().collect())
                .collect(),
        }
    }
}

fn resolve_atom(a: &AttributeAtom, scene: &Scene, gt: &GroundTruth) -> ReferralMap {
    let mut out = ReferralMap::empty(gt.num_frames());
    match a.axis {
        Axis::Category | Axis::Color => {
            let ids: BTreeSet<u32> = scene
                .entities
                .iter()
                .filter(|e| match a.axis {
                    Axis::Category => e.category.name() == a.value,
                    _ => e.color == a.value,
                })
                .map(|e| e.id)
                .collect();
            for (t, frame) in gt.frames.iter().enumerate() {
                out.frames[t] = frame.iter().map(|e| e.id).filter(|id| ids.contains(id)).collect();
            }
        }
        Axis::Motion | Axis::Orientation => {
            let visible: Vec<BTreeSet<u32>> = gt
                .frames
                .iter()
                .map(|f| f.iter().map(|e| e.id).collect())
                .collect();
            for ev in scene.events.iter().filter(|e| e.kind.name() == a.value) {
                let (s, e) = ev.frame_interval;
                for t in s..=e.min(gt.num_frames().saturating_sub(1)) {
                    if visible[t].contains(&ev.entity_id) {
                        out.frames[t].insert(ev.entity_id);
                    }
                }
            }
        }
    }
    out
}

/// Check that a tree only uses values available in `scene`.
pub fn check_against_scene(p: &PredicateTree, scene: &Scene) -> Result<()> {
    p.validate()?;
    for a in p.atoms() {
        if a.axis == Axis::Color && scene.config.color_index(&a.value).is_none() {
            return Err(Error::Validation(format!("color `{}` is not in the palette", a.value)));
        }
    }
    Ok(())
}

/// Per-frame referred ids: static atoms hold whenever the entity is visible,
/// motion and orientation atoms only inside a matching event interval.
pub fn resolve(p: &PredicateTree, scene: &Scene, gt: &GroundTruth) -> Result<ReferralMap> {
    check_against_scene(p, scene)?;
    Ok(resolve_unchecked(p, scene, gt))
}

fn resolve_unchecked(p: &PredicateTree, scene: &Scene, gt: &GroundTruth) -> ReferralMap {
    match p {
        PredicateTree::Atom(a) => resolve_atom(a, scene, gt),
        PredicateTree::Or(v) => v
            .iter()
            .map(|a| resolve_atom(a, scene, gt))
            .reduce(|x, y| x.union(&y))
            .unwrap_or_else(|| ReferralMap::empty(gt.num_frames())),
        PredicateTree::And(cs) => cs
            .iter()
            .map(|c| resolve_unchecked(c, scene, gt))
            .reduce(|x, y| x.intersect(&y))
            .unwrap_or_else(|| ReferralMap::empty(gt.num_frames())),
    }
}

/// Which trees [`combine`] may produce.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptPolicy {
    pub allow_or: bool,
    pub allow_and: bool,
    /// Largest `Or`; 2 by default.
    pub max_or_width: usize,
    /// Sample this many trees; `None` keeps the exhaustive list.
    pub max_prompts: Option<usize>,
    /// Minimum number of distinct referred instances (K).
    pub support_threshold: usize,
    /// Optional per-axis whitelist of values; an axis mapped to an empty
    /// list is excluded.
    pub values: BTreeMap<Axis, Vec<String>>,
}

impl Default for PromptPolicy {
    fn default() -> Self {
        Self {
            allow_or: true,
            allow_and: true,
            max_or_width: 2,
            max_prompts: None,
            support_threshold: 2,
            values: BTreeMap::new(),
        }
    }
}

impl PromptPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.support_threshold < 1 {
            return Err(Error::config("support_threshold", "must be at least 1"));
        }
        if self.allow_or && self.max_or_width < 2 {
            return Err(Error::config("max_or_width", "must be at least 2 when Or is allowed"));
        }
        Ok(())
    }

    pub fn admits(&self, a: &AttributeAtom) -> bool {
        self.values
            .get(&a.axis)
            .is_none_or(|vs| vs.iter().any(|v| *v == a.value))
    }
}

/// Every atom that some entity or event of the scene exhibits.
pub fn scene_atoms(scene: &Scene) -> Vec<AttributeAtom> {
    let mut out = BTreeSet::new();
    for e in &scene.entities {
        out.insert(AttributeAtom::category(e.category));
        if let Ok(c) = AttributeAtom::color(&e.color) {
            out.insert(c);
        }
    }
    for ev in &scene.events {
        out.insert(AttributeAtom::motion(ev.kind));
    }
    out.into_iter().collect()
}

fn subsets<T: Clone>(items: &[T], min: usize, max: usize) -> Vec<Vec<T>> {
    let mut out = Vec::new();
    let n = items.len();
    for mask in 1u64..(1u64 << n) {
        let k = mask.count_ones() as usize;
        if k >= min && k <= max {
            out.push((0..n).filter(|i| mask >> i & 1 == 1).map(|i| items[i].clone()).collect());
        }
    }
    out.sort_by_key(|s: &Vec<T>| s.len());
    out
}

/// All valid trees over `atoms` allowed by `policy`, in a fixed order, or a
/// seeded sample of them when `policy.max_prompts` is set.
pub fn combine(atoms: &[AttributeAtom], policy: &PromptPolicy, seed: u64) -> Vec<PredicateTree> {
    let mut by_axis: BTreeMap<Axis, Vec<AttributeAtom>> = BTreeMap::new();
    for a in atoms.iter().filter(|a| policy.admits(a)) {
        let v = by_axis.entry(a.axis).or_default();
        if !v.contains(a) {
            v.push(a.clone());
        }
    }
    // options per axis: nothing, one atom, or an Or of 2..=width atoms
    let mut per_axis: Vec<Vec<Option<PredicateTree>>> = Vec::new();
    for v in by_axis.values_mut() {
        v.sort();
        let mut opts = vec![None];
        opts.extend(v.iter().cloned().map(|a| Some(PredicateTree::Atom(a))));
        if policy.allow_or {
            for s in subsets(v, 2, policy.max_or_width.min(v.len())) {
                opts.push(Some(PredicateTree::or(s).expect("distinct same-axis atoms")));
            }
        }
        per_axis.push(opts);
    }
    let mut out = Vec::new();
    let mut idx = vec![0usize; per_axis.len()];
    loop {
        let chosen: Vec<PredicateTree> = idx
            .iter()
            .zip(&per_axis)
            .filter_map(|(&i, o)| o[i].clone())
            .collect();
        match chosen.len() {
            0 => {}
            1 => out.extend(chosen),
            _ if policy.allow_and => out.push(PredicateTree::and(chosen).expect("distinct axes")),
            _ => {}
        }
        // odometer increment
        let mut k = 0;
        while k < idx.len() {
            idx[k] += 1;
            if idx[k] < per_axis[k].len() {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
        if k == idx.len() {
            break;
        }
    }
    if let Some(n) = policy.max_prompts {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        out.shuffle(&mut rng);
        out.truncate(n);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub id: String,
    pub text: String,
    pub predicate: PredicateTree,
    /// Distinct instances referred over the whole video.
    pub support: usize,
}

pub fn prompt_id(k: usize) -> String {
    format!("{:04}", k + 1)
}

/// Keep trees referring at least `k` distinct instances, numbered in input order.
pub fn filter_by_support(
    trees: &[PredicateTree],
    scene: &Scene,
    gt: &GroundTruth,
    k: usize,
) -> Result<Vec<Prompt>> {
    if k < 1 {
        return Err(Error::config("support_threshold", "must be at least 1"));
    }
    let mut out = Vec::new();
    for t in trees {
        let support = resolve(t, scene, gt)?.instances().len();
        if support >= k {
            out.push(Prompt {
                id: prompt_id(out.len()),
                text: render(t),
                predicate: t.clone(),
                support,
            });
        }
    }
    Ok(out)
}
