//! Seeded procedural intersection scenes.
//!
//! Entities drive lane polylines through a four-way intersection (or stay
//! parked at the curb), a fixed affine camera maps their footprints to pixel
//! boxes, and every frame is rasterized into a coarse feature grid.
//! Everything is a pure function of the configuration and its seed.

use std::collections::BTreeMap;
use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Car,
    Bus,
    Truck,
    Pedestrian,
}

impl Category {
    pub const ALL: [Category; 4] = [Category::Car, Category::Bus, Category::Truck, Category::Pedestrian];

    pub fn name(self) -> &'static str {
        match self {
            Category::Car => "car",
            Category::Bus => "bus",
            Category::Truck => "truck",
            Category::Pedestrian => "pedestrian",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }

    /// 1-based code used in the category column of `gt.txt`.
    pub fn code(self) -> u32 {
        self as u32 + 1
    }

    pub fn from_code(code: u32) -> Option<Self> {
        Self::ALL.get(code.checked_sub(1)? as usize).copied()
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Nominal footprint (length, width) in world units.
    fn nominal_size(self) -> (f64, f64) {
        match self {
            Category::Car => (4.5, 2.0),
            Category::Bus => (10.0, 2.6),
            Category::Truck => (7.0, 2.5),
            Category::Pedestrian => (0.8, 0.8),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionKind {
    Moving,
    Parked,
    TurningLeft,
    TurningRight,
    GoingStraight,
    CounterDirection,
    Lateral,
}

impl MotionKind {
    pub const ALL: [MotionKind; 7] = [
        MotionKind::Moving,
        MotionKind::Parked,
        MotionKind::TurningLeft,
        MotionKind::TurningRight,
        MotionKind::GoingStraight,
        MotionKind::CounterDirection,
        MotionKind::Lateral,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MotionKind::Moving => "moving",
            MotionKind::Parked => "parked",
            MotionKind::TurningLeft => "turning_left",
            MotionKind::TurningRight => "turning_right",
            MotionKind::GoingStraight => "going_straight",
            MotionKind::CounterDirection => "counter_direction",
            MotionKind::Lateral => "lateral",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

/// Named lane polyline in world units (y up).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaneConfig {
    pub name: String,
    pub points: Vec<[f64; 2]>,
}

/// World → image map: `u = w/2 + scale (x − cx)`, `v = h/2 − scale (y − cy)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraConfig {
    pub scale: f64,
    pub center: [f64; 2],
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self {
            scale: 4.0,
            center: [0.0, 0.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub seed: u64,
    pub num_frames: usize,
    /// (width, height) in pixels.
    pub image_size: (u32, u32),
    pub entity_count_range: (usize, usize),
    pub category_weights: BTreeMap<Category, f64>,
    pub color_palette: Vec<String>,
    /// World units per frame.
    pub speed_range: (f64, f64),
    /// Behaviour mix. `parked` entities never move; `turning_left`,
    /// `turning_right` and `going_straight` pick a route of that shape;
    /// `moving` picks any route.
    pub event_rates: BTreeMap<MotionKind, f64>,
    /// Probability that a driving vehicle waits at the stop line.
    pub stop_probability: f64,
    /// Range of stop-line waits, in frames.
    pub stop_frames: (usize, usize),
    /// Half side of the square intersection box centred on the origin.
    pub intersection_half_size: f64,
    pub camera: CameraConfig,
    /// Lane polylines; empty means the built-in four-way layout.
    pub lane_layout: Vec<LaneConfig>,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_frames: 200,
            image_size: (320, 240),
            entity_count_range: (10, 14),
            category_weights: BTreeMap::from([
                (Category::Car, 0.7),
                (Category::Bus, 0.1),
                (Category::Truck, 0.15),
                (Category::Pedestrian, 0.05),
            ]),
            color_palette: vec!["black".into(), "white".into(), "grey".into(), "red".into()],
            speed_range: (0.4, 0.9),
            event_rates: BTreeMap::from([
                (MotionKind::Parked, 0.25),
                (MotionKind::TurningLeft, 0.25),
                (MotionKind::TurningRight, 0.25),
                (MotionKind::GoingStraight, 0.25),
            ]),
            stop_probability: 0.3,
            stop_frames: (10, 40),
            intersection_half_size: 8.0,
            camera: CameraConfig::default(),
            lane_layout: Vec::new(),
        }
    }
}

fn check_weights<K: std::fmt::Debug>(field: &str, w: &BTreeMap<K, f64>) -> Result<()> {
    if w.is_empty() {
        return Err(Error::config(field, "must not be empty"));
    }
    if let Some((k, v)) = w.iter().find(|(_, v)| !(**v >= 0.0) || !v.is_finite()) {
        return Err(Error::config(field, format!("weight for {k:?} is {v}")));
    }
    let s: f64 = w.values().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::config(field, format!("weights sum to {s}, expected 1")));
    }
    Ok(())
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_frames < 1 {
            return Err(Error::config("num_frames", "must be at least 1"));
        }
        if self.image_size.0 == 0 || self.image_size.1 == 0 {
            return Err(Error::config("image_size", "dimensions must be positive"));
        }
        if self.entity_count_range.0 > self.entity_count_range.1 {
            return Err(Error::config("entity_count_range", "min exceeds max"));
        }
        if !(self.speed_range.0 > 0.0 && self.speed_range.0 <= self.speed_range.1) {
            return Err(Error::config("speed_range", "need 0 < min <= max"));
        }
        if self.stop_frames.0 > self.stop_frames.1 {
            return Err(Error::config("stop_frames", "min exceeds max"));
        }
        if !(0.0..=1.0).contains(&self.stop_probability) {
            return Err(Error::config("stop_probability", "must lie in [0, 1]"));
        }
        check_weights("category_weights", &self.category_weights)?;
        check_weights("event_rates", &self.event_rates)?;
        if let Some(k) = self.event_rates.keys().find(|k| {
            matches!(k, MotionKind::CounterDirection | MotionKind::Lateral)
        }) {
            return Err(Error::config(
                "event_rates",
                format!("`{}` is derived from heading and cannot be sampled", k.name()),
            ));
        }
        if self.color_palette.is_empty() {
            return Err(Error::config("color_palette", "must not be empty"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for c in &self.color_palette {
            if c.is_empty() || c.contains(char::is_whitespace) || !seen.insert(c) {
                return Err(Error::config("color_palette", format!("bad or duplicate color `{c}`")));
            }
        }
        if !(self.camera.scale > 0.0) {
            return Err(Error::config("camera.scale", "must be positive"));
        }
        if !(self.intersection_half_size > 2.0) {
            return Err(Error::config("intersection_half_size", "must exceed the lane offset (2)"));
        }
        for lane in &self.lane_layout {
            if lane.points.len() < 2 {
                return Err(Error::config(
                    "lane_layout",
                    format!("lane `{}` needs at least two points", lane.name),
                ));
            }
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::config("world", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s)
    }

    pub fn lanes(&self) -> Vec<LaneConfig> {
        if self.lane_layout.is_empty() {
            default_lanes(self.intersection_half_size, 60.0)
        } else {
            self.lane_layout.clone()
        }
    }

    pub fn color_index(&self, color: &str) -> Option<usize> {
        self.color_palette.iter().position(|c| c == color)
    }
}

const LANE_OFFSET: f64 = 2.0;
const CURB_OFFSET: f64 = 3.5;
const SIDEWALK_OFFSET: f64 = 6.5;

/// Right-hand four-way intersection: for each of the four approaches a
/// straight, a left-turn and a right-turn lane, `reach` units long on each side.
pub fn default_lanes(half: f64, reach: f64) -> Vec<LaneConfig> {
    let mut lanes = Vec::new();
    let dirs = [("east", 0.0), ("north", FRAC_PI_2), ("west", PI), ("south", -FRAC_PI_2)];
    for (name, theta) in dirs {
        let rot = |x: f64, y: f64| -> [f64; 2] {
            let (s, c) = theta.sin_cos();
            [c * x - s * y, s * x + c * y]
        };
        // local frame: heading +x, right-hand lane at y = -LANE_OFFSET
        let y0 = -LANE_OFFSET;
        lanes.push(LaneConfig {
            name: format!("{name}_straight"),
            points: vec![rot(-reach, y0), rot(-half, y0), rot(half, y0), rot(reach, y0)],
        });
        // right turn: centre (-half, -half), radius half - offset
        let r = half - LANE_OFFSET;
        let mut pts = vec![rot(-reach, y0)];
        for k in 0..=30 {
            let a = FRAC_PI_2 - FRAC_PI_2 * k as f64 / 30.0;
            pts.push(rot(-half + r * a.cos(), -half + r * a.sin()));
        }
        pts.push(rot(-LANE_OFFSET, -reach));
        lanes.push(LaneConfig {
            name: format!("{name}_right"),
            points: pts,
        });
        // left turn: centre (-half, half), radius half + offset, exit heading +y at x = +offset
        let r = half + LANE_OFFSET;
        let mut pts = vec![rot(-reach, y0)];
        for k in 0..=30 {
            let a = -FRAC_PI_2 + FRAC_PI_2 * k as f64 / 30.0;
            pts.push(rot(-half + r * a.cos(), half + r * a.sin()));
        }
        pts.push(rot(LANE_OFFSET, reach));
        lanes.push(LaneConfig {
            name: format!("{name}_left"),
            points: pts,
        });
    }
    lanes
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum RouteShape {
    Straight,
    Left,
    Right,
}

#[derive(Debug, Clone)]
struct Route {
    points: Vec<[f64; 2]>,
    cum: Vec<f64>,
    shape: RouteShape,
    /// Arc-length range over which the heading changes.
    turn: Option<(f64, f64)>,
}

fn wrap_angle(a: f64) -> f64 {
    let mut a = a % (2.0 * PI);
    if a > PI {
        a -= 2.0 * PI;
    } else if a <= -PI {
        a += 2.0 * PI;
    }
    a
}

impl Route {
    fn new(points: Vec<[f64; 2]>) -> Self {
        let mut cum = vec![0.0];
        for w in points.windows(2) {
            let d = ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt();
            cum.push(cum.last().unwrap() + d);
        }
        let headings: Vec<f64> = points
            .windows(2)
            .map(|w| (w[1][1] - w[0][1]).atan2(w[1][0] - w[0][0]))
            .collect();
        let total = wrap_angle(headings[headings.len() - 1] - headings[0]);
        let shape = if total > FRAC_PI_4 {
            RouteShape::Left
        } else if total < -FRAC_PI_4 {
            RouteShape::Right
        } else {
            RouteShape::Straight
        };
        let first = headings[0];
        let last = headings[headings.len() - 1];
        let turn = if shape == RouteShape::Straight {
            None
        } else {
            let start = headings.iter().position(|h| wrap_angle(h - first).abs() > 1e-6);
            let end = headings.iter().rposition(|h| wrap_angle(h - last).abs() > 1e-6);
            match (start, end) {
                (Some(s), Some(e)) => Some((cum[s], cum[e + 1])),
                _ => None,
            }
        };
        Self {
            points,
            cum,
            shape,
            turn,
        }
    }

    fn length(&self) -> f64 {
        *self.cum.last().unwrap()
    }

    /// Position and heading at arc length `s` (clamped to the route).
    fn pose(&self, s: f64) -> Pose {
        let s = s.clamp(0.0, self.length());
        let k = match self.cum.iter().position(|&c| c > s) {
            Some(0) => 0,
            Some(k) => k - 1,
            None => self.points.len() - 2,
        };
        let k = k.min(self.points.len() - 2);
        let (a, b) = (self.points[k], self.points[k + 1]);
        let seg = self.cum[k + 1] - self.cum[k];
        let t = if seg > 0.0 { (s - self.cum[k]) / seg } else { 0.0 };
        Pose {
            x: a[0] + t * (b[0] - a[0]),
            y: a[1] + t * (b[1] - a[1]),
            heading: (b[1] - a[1]).atan2(b[0] - a[0]),
        }
    }

    /// Arc length at which the route first enters the intersection box.
    fn entry_length(&self, half: f64) -> f64 {
        let mut s = 0.0;
        while s < self.length() {
            let p = self.pose(s);
            if p.x.abs() <= half && p.y.abs() <= half {
                return s;
            }
            s += 0.25;
        }
        self.length()
    }
}

/// Ground-plane position and heading (radians, counter-clockwise from +x).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    pub id: u32,
    pub category: Category,
    pub color: String,
    /// (length, width) in world units.
    pub size: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionEvent {
    pub entity_id: u32,
    pub kind: MotionKind,
    /// Inclusive `[start, end]`, 0-based frames.
    pub frame_interval: (usize, usize),
}

impl MotionEvent {
    pub fn contains(&self, frame: usize) -> bool {
        self.frame_interval.0 <= frame && frame <= self.frame_interval.1
    }
}

/// Poses of one entity on the consecutive frames `first_frame..`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub entity_id: u32,
    pub first_frame: usize,
    pub poses: Vec<Pose>,
}

impl Trajectory {
    pub fn pose_at(&self, frame: usize) -> Option<&Pose> {
        frame
            .checked_sub(self.first_frame)
            .and_then(|k| self.poses.get(k))
    }

    pub fn last_frame(&self) -> usize {
        self.first_frame + self.poses.len() - 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub config: WorldConfig,
    pub entities: Vec<Entity>,
    pub events: Vec<MotionEvent>,
    pub trajectories: Vec<Trajectory>,
}

impl Scene {
    pub fn num_frames(&self) -> usize {
        self.config.num_frames
    }

    pub fn entity(&self, id: u32) -> Option<&Entity> {
        self.entities.iter().find(|e| e.id == id)
    }

    pub fn events_of(&self, id: u32) -> impl Iterator<Item = &MotionEvent> {
        self.events.iter().filter(move |e| e.entity_id == id)
    }
}

fn sample_weighted<K: Copy, R: Rng>(w: &BTreeMap<K, f64>, rng: &mut R) -> K {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = *w.keys().next().expect("non-empty weights");
    for (k, v) in w {
        if *v <= 0.0 {
            continue;
        }
        acc += v;
        last = *k;
        if u < acc {
            return *k;
        }
    }
    last
}

/// Footprint pixel box before clipping.
fn footprint_box(cfg: &WorldConfig, pose: &Pose, size: (f64, f64)) -> BBox {
    let (l, w) = size;
    let (s, c) = pose.heading.sin_cos();
    let ex = 0.5 * (c.abs() * l + s.abs() * w);
    let ey = 0.5 * (s.abs() * l + c.abs() * w);
    let (u, v) = world_to_image(cfg, pose.x, pose.y);
    let k = cfg.camera.scale;
    BBox::new(u - ex * k, v - ey * k, 2.0 * ex * k, 2.0 * ey * k)
}

pub fn world_to_image(cfg: &WorldConfig, x: f64, y: f64) -> (f64, f64) {
    let (w, h) = (cfg.image_size.0 as f64, cfg.image_size.1 as f64);
    let k = cfg.camera.scale;
    (
        0.5 * w + k * (x - cfg.camera.center[0]),
        0.5 * h - k * (y - cfg.camera.center[1]),
    )
}

/// Plan for one entity: where it is on each frame it exists.
struct Plan {
    first_frame: usize,
    poses: Vec<Pose>,
    /// Arc-length progress per frame (`None` for curb-parked entities).
    progress: Option<Vec<f64>>,
    route: Option<usize>,
}

fn plan_driving<R: Rng>(
    cfg: &WorldConfig,
    route: &Route,
    speed: f64,
    half: f64,
    rng: &mut R,
) -> (i64, Vec<f64>) {
    let stop = if rng.random::<f64>() < cfg.stop_probability {
        Some(rng.random_range(cfg.stop_frames.0..=cfg.stop_frames.1))
    } else {
        None
    };
    let stop_at = (route.entry_length(half) - 1.0).max(0.0);
    // progress for each step from the route start
    let mut s = 0.0;
    let mut prog = vec![0.0];
    let mut stopped = false;
    while s < route.length() {
        if let (Some(wait), false) = (stop, stopped) {
            if s + speed >= stop_at {
                s = stop_at;
                prog.push(s);
                for _ in 0..wait {
                    prog.push(s);
                }
                stopped = true;
                continue;
            }
        }
        s = (s + speed).min(route.length());
        prog.push(s);
    }
    let total = prog.len() as i64;
    // start anywhere from half-way through a crossing before frame 0 to the last frame
    let offset = rng.random_range(-(total / 2)..cfg.num_frames as i64);
    (offset, prog)
}

/// Build a scene: entities, their trajectories and motion events.
pub fn build_world(config: &WorldConfig) -> Result<Scene> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let half = config.intersection_half_size;
    let routes: Vec<Route> = config.lanes().into_iter().map(|l| Route::new(l.points)).collect();
    let n = rng.random_range(config.entity_count_range.0..=config.entity_count_range.1);
    let t_max = config.num_frames;

    let mut entities = Vec::new();
    let mut plans: Vec<Plan> = Vec::new();
    for idx in 0..n {
        let category = sample_weighted(&config.category_weights, &mut rng);
        let color = config.color_palette[rng.random_range(0..config.color_palette.len())].clone();
        let (l0, w0) = category.nominal_size();
        let jitter = rng.random_range(0.9..1.1);
        let size = (l0 * jitter, w0 * jitter);
        let mut behaviour = sample_weighted(&config.event_rates, &mut rng);
        if category == Category::Pedestrian && behaviour != MotionKind::Parked {
            behaviour = MotionKind::GoingStraight;
        }
        let pick_route = |shape: Option<RouteShape>, rng: &mut ChaCha8Rng| -> usize {
            let candidates: Vec<usize> = (0..routes.len())
                .filter(|&i| shape.is_none_or(|s| routes[i].shape == s))
                .collect();
            let pool = if candidates.is_empty() {
                (0..routes.len()).collect()
            } else {
                candidates
            };
            pool[rng.random_range(0..pool.len())]
        };
        let entity = Entity {
            id: idx as u32 + 1,
            category,
            color,
            size,
        };

        let mut placed = None;
        for _attempt in 0..50 {
            let plan = if behaviour == MotionKind::Parked {
                let r = pick_route(None, &mut rng);
                let route = &routes[r];
                let s = rng.random_range(0.0..(route.entry_length(half) - 8.0).max(1.0));
                let mut p = route.pose(s);
                let (sn, cs) = p.heading.sin_cos();
                let off = if category == Category::Pedestrian { SIDEWALK_OFFSET } else { CURB_OFFSET };
                p.x += sn * off;
                p.y -= cs * off;
                Plan {
                    first_frame: 0,
                    poses: vec![p; t_max],
                    progress: None,
                    route: Some(r),
                }
            } else {
                let shape = match behaviour {
                    MotionKind::TurningLeft => Some(RouteShape::Left),
                    MotionKind::TurningRight => Some(RouteShape::Right),
                    MotionKind::GoingStraight => Some(RouteShape::Straight),
                    _ => None,
                };
                let r = pick_route(shape, &mut rng);
                let mut speed = rng.random_range(config.speed_range.0..=config.speed_range.1);
                if category == Category::Pedestrian {
                    speed *= 0.3;
                }
                let (offset, prog) = plan_driving(config, &routes[r], speed, half, &mut rng);
                let start = offset.max(0) as usize;
                let end = ((offset + prog.len() as i64 - 1).min(t_max as i64 - 1)) as usize;
                if start > end {
                    continue;
                }
                let slice: Vec<f64> = (start..=end)
                    .map(|t| prog[(t as i64 - offset) as usize])
                    .collect();
                let route = &routes[r];
                let sidewalk = category == Category::Pedestrian;
                let poses = slice
                    .iter()
                    .map(|&s| {
                        let mut p = route.pose(s);
                        if sidewalk {
                            let (sn, cs) = p.heading.sin_cos();
                            p.x += sn * (SIDEWALK_OFFSET - LANE_OFFSET);
                            p.y -= cs * (SIDEWALK_OFFSET - LANE_OFFSET);
                        }
                        p
                    })
                    .collect();
                Plan {
                    first_frame: start,
                    poses,
                    progress: Some(slice),
                    route: Some(r),
                }
            };
            // spawn overlap rule: at the first frame, IoU with everyone present <= 0.3
            let t0 = plan.first_frame;
            let b0 = footprint_box(config, &plan.poses[0], size);
            let clash = plans.iter().zip(&entities).any(|(p, e): (&Plan, &Entity)| {
                t0.checked_sub(p.first_frame)
                    .and_then(|k| p.poses.get(k))
                    .is_some_and(|q| footprint_box(config, q, e.size).iou(&b0) > 0.3)
            });
            if !clash {
                placed = Some(plan);
                break;
            }
        }
        if let Some(plan) = placed {
            plans.push(plan);
            entities.push(entity);
        }
    }
    // ids stay dense and 1-based even if an entity could not be placed
    for (i, e) in entities.iter_mut().enumerate() {
        e.id = i as u32 + 1;
    }

    let mut events = Vec::new();
    let mut trajectories = Vec::new();
    for (e, plan) in entities.iter().zip(&plans) {
        let route = plan.route.map(|r| &routes[r]);
        events.extend(derive_events(e.id, plan, route, half));
        trajectories.push(Trajectory {
            entity_id: e.id,
            first_frame: plan.first_frame,
            poses: plan.poses.clone(),
        });
    }
    Ok(Scene {
        config: config.clone(),
        entities,
        events,
        trajectories,
    })
}

/// Collapse per-frame labels into maximal runs.
fn runs(entity_id: u32, kind: MotionKind, first: usize, flags: &[bool], out: &mut Vec<MotionEvent>) {
    let mut start = None;
    for (k, &f) in flags.iter().chain(std::iter::once(&false)).enumerate() {
        match (f, start) {
            (true, None) => start = Some(k),
            (false, Some(s)) => {
                out.push(MotionEvent {
                    entity_id,
                    kind,
                    frame_interval: (first + s, first + k - 1),
                });
                start = None;
            }
            _ => {}
        }
    }
}

fn derive_events(id: u32, plan: &Plan, route: Option<&Route>, half: f64) -> Vec<MotionEvent> {
    let n = plan.poses.len();
    let mut out = Vec::new();
    // stationary iff the step into the next frame does not move (last frame copies the previous step)
    let moving: Vec<bool> = match &plan.progress {
        None => vec![false; n],
        Some(p) => (0..n)
            .map(|k| {
                if n == 1 {
                    true
                } else if k + 1 < n {
                    p[k + 1] > p[k]
                } else {
                    p[k] > p[k - 1]
                }
            })
            .collect(),
    };
    let parked: Vec<bool> = moving.iter().map(|m| !m).collect();
    runs(id, MotionKind::Moving, plan.first_frame, &moving, &mut out);
    runs(id, MotionKind::Parked, plan.first_frame, &parked, &mut out);

    if let (Some(route), Some(prog)) = (route, &plan.progress) {
        let in_turn: Vec<bool> = prog
            .iter()
            .zip(&moving)
            .map(|(&s, &m)| m && route.turn.is_some_and(|(a, b)| s >= a && s <= b))
            .collect();
        match route.shape {
            RouteShape::Left => runs(id, MotionKind::TurningLeft, plan.first_frame, &in_turn, &mut out),
            RouteShape::Right => runs(id, MotionKind::TurningRight, plan.first_frame, &in_turn, &mut out),
            RouteShape::Straight => {
                let inside: Vec<bool> = plan
                    .poses
                    .iter()
                    .zip(&moving)
                    .map(|(p, &m)| m && p.x.abs() <= half && p.y.abs() <= half)
                    .collect();
                runs(id, MotionKind::GoingStraight, plan.first_frame, &inside, &mut out);
            }
        }
    }

    // orientation relative to a camera looking up the image: heading towards
    // world −y faces the camera, headings along ±x are lateral
    let toward: Vec<bool> = plan
        .poses
        .iter()
        .map(|p| wrap_angle(p.heading + FRAC_PI_2).abs() < FRAC_PI_4)
        .collect();
    let lateral: Vec<bool> = plan
        .poses
        .iter()
        .map(|p| {
            let h = wrap_angle(p.heading);
            h.abs() < FRAC_PI_4 || (PI - h.abs()) < FRAC_PI_4
        })
        .collect();
    runs(id, MotionKind::CounterDirection, plan.first_frame, &toward, &mut out);
    runs(id, MotionKind::Lateral, plan.first_frame, &lateral, &mut out);
    out
}

/// One visible object on one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtEntry {
    pub id: u32,
    pub bbox: BBox,
    pub category: Category,
}

/// Per-frame visible boxes. Objects that are outside the image, or whose
/// clipped box keeps less than a quarter of its area, are omitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub image_size: (u32, u32),
    pub frames: Vec<Vec<GtEntry>>,
}

impl GroundTruth {
    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn visible_ids(&self, frame: usize) -> impl Iterator<Item = u32> + '_ {
        self.frames[frame].iter().map(|e| e.id)
    }

    pub fn entry(&self, frame: usize, id: u32) -> Option<&GtEntry> {
        self.frames.get(frame)?.iter().find(|e| e.id == id)
    }

    pub fn box_count(&self) -> usize {
        self.frames.iter().map(Vec::len).sum()
    }
}

pub const MIN_VISIBLE_FRACTION: f64 = 0.25;

/// Map every entity footprint through the camera.
pub fn project(scene: &Scene) -> GroundTruth {
    let cfg = &scene.config;
    let (w, h) = (cfg.image_size.0 as f64, cfg.image_size.1 as f64);
    let mut frames = vec![Vec::new(); cfg.num_frames];
    for (e, tr) in scene.entities.iter().zip(&scene.trajectories) {
        for (k, pose) in tr.poses.iter().enumerate() {
            let full = footprint_box(cfg, pose, e.size);
            let Some(clipped) = full.clip(w, h) else { continue };
            if clipped.area() < MIN_VISIBLE_FRACTION * full.area() {
                continue;
            }
            frames[tr.first_frame + k].push(GtEntry {
                id: e.id,
                bbox: clipped,
                category: e.category,
            });
        }
    }
    GroundTruth {
        image_size: cfg.image_size,
        frames,
    }
}

/// Geometry and channel layout of the feature grid.
///
/// Channels per cell: occupancy, category one-hot (4), color one-hot
/// (palette size), velocity (vx, vy) in cells per frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub grid_w: usize,
    pub grid_h: usize,
    pub image_w: f64,
    pub image_h: f64,
    pub num_colors: usize,
}

impl GridSpec {
    pub fn channels(&self) -> usize {
        1 + Category::ALL.len() + self.num_colors + 2
    }

    pub fn cells(&self) -> usize {
        self.grid_w * self.grid_h
    }

    pub fn cell_size(&self) -> (f64, f64) {
        (self.image_w / self.grid_w as f64, self.image_h / self.grid_h as f64)
    }

    /// Normalized centre of cell `c` (row-major).
    pub fn cell_center(&self, c: usize) -> (f64, f64) {
        let (gx, gy) = (c % self.grid_w, c / self.grid_w);
        (
            (gx as f64 + 0.5) / self.grid_w as f64,
            (gy as f64 + 0.5) / self.grid_h as f64,
        )
    }
}

/// Per-entity attributes the rasterizer needs: category and palette index.
pub type AttributeTable = BTreeMap<u32, (Category, usize)>;

pub fn attribute_table(scene: &Scene) -> AttributeTable {
    scene
        .entities
        .iter()
        .map(|e| {
            let c = scene.config.color_index(&e.color).unwrap_or(0);
            (e.id, (e.category, c))
        })
        .collect()
}

/// Rasterize one frame into a `cells × channels` row-major buffer.
///
/// Each box adds its overlap with a cell, as a fraction of the cell area.
/// Attribute blocks carry the same weights, renormalized when boxes pile up
/// beyond full coverage; velocity is the backward difference of box centres
/// against `prev` (zero when the object was not visible there).
pub fn rasterize(
    frame: &[GtEntry],
    prev: Option<&[GtEntry]>,
    attrs: &AttributeTable,
    spec: &GridSpec,
) -> Vec<f64> {
    let ch = spec.channels();
    let nc = Category::ALL.len();
    let mut out = vec![0.0; spec.cells() * ch];
    let (cw, chh) = spec.cell_size();
    let cell_area = cw * chh;
    for e in frame {
        let (cat, color) = attrs.get(&e.id).copied().unwrap_or((e.category, 0));
        let vel = prev
            .and_then(|p| p.iter().find(|q| q.id == e.id))
            .map(|q| {
                let (x0, y0) = q.bbox.center();
                let (x1, y1) = e.bbox.center();
                ((x1 - x0) / cw, (y1 - y0) / chh)
            })
            .unwrap_or((0.0, 0.0));
        let gx0 = ((e.bbox.x / cw).floor().max(0.0) as usize).min(spec.grid_w - 1);
        let gx1 = ((e.bbox.right() / cw).ceil().max(0.0) as usize).min(spec.grid_w);
        let gy0 = ((e.bbox.y / chh).floor().max(0.0) as usize).min(spec.grid_h - 1);
        let gy1 = ((e.bbox.bottom() / chh).ceil().max(0.0) as usize).min(spec.grid_h);
        for gy in gy0..gy1 {
            for gx in gx0..gx1 {
                let cell = BBox::new(gx as f64 * cw, gy as f64 * chh, cw, chh);
                let frac = cell.intersection_area(&e.bbox) / cell_area;
                if frac <= 0.0 {
                    continue;
                }
                let base = (gy * spec.grid_w + gx) * ch;
                out[base] += frac;
                out[base + 1 + cat.index()] += frac;
                if color < spec.num_colors {
                    out[base + 1 + nc + color] += frac;
                }
                out[base + ch - 2] += frac * vel.0;
                out[base + ch - 1] += frac * vel.1;
            }
        }
    }
    for cell in out.chunks_mut(ch) {
        let total = cell[0];
        if total > 1.0 {
            for v in cell[1..].iter_mut() {
                *v /= total;
            }
            cell[0] = 1.0;
        }
    }
    out
}

/// Rasterize every frame of a ground truth.
pub fn rasterize_all(gt: &GroundTruth, attrs: &AttributeTable, spec: &GridSpec) -> Vec<Vec<f64>> {
    (0..gt.num_frames())
        .map(|t| {
            let prev = t.checked_sub(1).map(|p| gt.frames[p].as_slice());
            rasterize(&gt.frames[t], prev, attrs, spec)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(gw: usize, gh: usize, w: f64, h: f64) -> GridSpec {
        GridSpec {
            grid_w: gw,
            grid_h: gh,
            image_w: w,
            image_h: h,
            num_colors: 2,
        }
    }

    fn entry(id: u32, b: BBox) -> GtEntry {
        GtEntry {
            id,
            bbox: b,
            category: Category::Car,
        }
    }

    #[test]
    fn box_covering_one_cell() {
        let s = spec(4, 4, 40.0, 40.0);
        let grid = rasterize(&[entry(1, BBox::new(10.0, 20.0, 10.0, 10.0))], None, &AttributeTable::new(), &s);
        let ch = s.channels();
        for c in 0..s.cells() {
            let occ = grid[c * ch];
            if c == 2 * 4 + 1 {
                assert_eq!(occ, 1.0);
            } else {
                assert_eq!(occ, 0.0);
            }
        }
    }

    #[test]
    fn empty_frame_is_all_zero() {
        let s = spec(3, 2, 30.0, 20.0);
        assert!(rasterize(&[], None, &AttributeTable::new(), &s).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn box_split_over_two_cells() {
        // 10 px cells; box 10x5 straddles cells (0,0) and (1,0) equally
        let s = spec(2, 2, 20.0, 20.0);
        let b = BBox::new(5.0, 2.0, 10.0, 5.0);
        let grid = rasterize(&[entry(1, b)], None, &AttributeTable::new(), &s);
        let ch = s.channels();
        let (a, c) = (grid[0], grid[ch]);
        assert_eq!(a, c);
        assert!((a + c - b.area() / 100.0).abs() < 1e-15);
    }

    #[test]
    fn velocity_is_backward_difference() {
        let s = spec(2, 1, 20.0, 10.0);
        let prev = [entry(1, BBox::new(0.0, 0.0, 10.0, 10.0))];
        let cur = [entry(1, BBox::new(5.0, 0.0, 10.0, 10.0))];
        let g0 = rasterize(&prev, None, &AttributeTable::new(), &s);
        let g1 = rasterize(&cur, Some(&prev), &AttributeTable::new(), &s);
        let ch = s.channels();
        assert_eq!(g0[ch - 2], 0.0);
        // half the box in each cell, moving half a cell per frame
        assert!((g1[ch - 2] - 0.5 * 0.5).abs() < 1e-15);
        assert!((g1[2 * ch - 2] - 0.5 * 0.5).abs() < 1e-15);
    }

    #[test]
    fn stacked_boxes_keep_blocks_normalized() {
        let s = spec(1, 1, 10.0, 10.0);
        let b = BBox::new(0.0, 0.0, 10.0, 10.0);
        let grid = rasterize(&[entry(1, b), entry(2, b)], None, &AttributeTable::new(), &s);
        assert_eq!(grid[0], 1.0);
        let cat: f64 = grid[1..5].iter().sum();
        assert!((cat - 1.0).abs() < 1e-15);
    }

    #[test]
    fn route_shapes_of_default_layout() {
        let lanes = default_lanes(8.0, 60.0);
        assert_eq!(lanes.len(), 12);
        let shapes: Vec<RouteShape> = lanes.into_iter().map(|l| Route::new(l.points).shape).collect();
        assert_eq!(shapes.iter().filter(|s| **s == RouteShape::Left).count(), 4);
        assert_eq!(shapes.iter().filter(|s| **s == RouteShape::Right).count(), 4);
    }
}
