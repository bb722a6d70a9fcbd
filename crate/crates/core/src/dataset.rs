//! On-disk benchmark layout, prediction files and dataset statistics.
//!
//! ```text
//! root/
//!   <video>/
//!     seqinfo.ini        [Sequence] name, seqLength, imWidth, imHeight, colors
//!     gt.txt             frame,id,x,y,w,h,1,category_code,-1   (frame 1-based)
//!     entities.txt       id,category,color
//!     expression/<id>    line 1: prompt text; then "frame: id,id,..." per referred frame
//! ```
//!
//! Frames are 0-based in memory and 1-based on disk.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::promptlang::{parse, Prompt, ReferralMap};
use crate::scenesim::{AttributeTable, Category, GroundTruth, GtEntry, Scene};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityRecord {
    pub id: u32,
    pub category: Category,
    pub color: String,
}

/// One video of a benchmark with its prompts.
#[derive(Debug, Clone, PartialEq)]
pub struct Video {
    pub name: String,
    pub palette: Vec<String>,
    pub entities: Vec<EntityRecord>,
    pub gt: GroundTruth,
    pub prompts: Vec<Prompt>,
    /// Parallel to `prompts`.
    pub referrals: Vec<ReferralMap>,
}

impl Video {
    pub fn from_scene(
        name: impl Into<String>,
        scene: &Scene,
        gt: GroundTruth,
        prompts: Vec<Prompt>,
        referrals: Vec<ReferralMap>,
    ) -> Self {
        Self {
            name: name.into(),
            palette: scene.config.color_palette.clone(),
            entities: scene
                .entities
                .iter()
                .map(|e| EntityRecord {
                    id: e.id,
                    category: e.category,
                    color: e.color.clone(),
                })
                .collect(),
            gt,
            prompts,
            referrals,
        }
    }

    pub fn num_frames(&self) -> usize {
        self.gt.num_frames()
    }

    /// Category and palette index per entity, as the rasterizer wants them.
    pub fn attributes(&self) -> AttributeTable {
        self.entities
            .iter()
            .map(|e| {
                let c = self.palette.iter().position(|p| *p == e.color).unwrap_or(0);
                (e.id, (e.category, c))
            })
            .collect()
    }

    pub fn prompt(&self, id: &str) -> Option<(&Prompt, &ReferralMap)> {
        self.prompts
            .iter()
            .position(|p| p.id == id)
            .map(|k| (&self.prompts[k], &self.referrals[k]))
    }

    /// Referral consistency: every referred id is visible on its frame.
    pub fn validate(&self) -> Result<()> {
        if self.prompts.len() != self.referrals.len() {
            return Err(Error::Validation(format!(
                "video {}: {} prompts but {} referral maps",
                self.name,
                self.prompts.len(),
                self.referrals.len()
            )));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::Validation(format!("bad video name `{}`", self.name)));
        }
        let ids: BTreeSet<u32> = self.entities.iter().map(|e| e.id).collect();
        for (t, frame) in self.gt.frames.iter().enumerate() {
            let mut seen = BTreeSet::new();
            for e in frame {
                if !ids.contains(&e.id) || !seen.insert(e.id) {
                    return Err(Error::Validation(format!(
                        "video {}: frame {t}: unknown or duplicate id {}",
                        self.name, e.id
                    )));
                }
                if !(e.bbox.w > 0.0 && e.bbox.h > 0.0) {
                    return Err(Error::Validation(format!(
                        "video {}: frame {t}: id {} has an empty box",
                        self.name, e.id
                    )));
                }
            }
        }
        for (p, r) in self.prompts.iter().zip(&self.referrals) {
            if p.id.is_empty() || p.id.contains(['/', '\\']) || p.text.contains('\n') {
                return Err(Error::Validation(format!("bad prompt id or text `{}`", p.id)));
            }
            if r.num_frames() != self.num_frames() {
                return Err(Error::Validation(format!(
                    "prompt {}: referral map covers {} of {} frames",
                    p.id,
                    r.num_frames(),
                    self.num_frames()
                )));
            }
            for (t, ids) in r.frames.iter().enumerate() {
                for id in ids {
                    if self.gt.entry(t, *id).is_none() {
                        return Err(Error::Validation(format!(
                            "video {}, prompt {}, frame {}: referred id {id} is not in the ground truth",
                            self.name,
                            p.id,
                            t + 1
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Benchmark {
    pub videos: Vec<Video>,
}

impl Benchmark {
    pub fn video(&self, name: &str) -> Option<&Video> {
        self.videos.iter().find(|v| v.name == name)
    }

    pub fn prompt_count(&self) -> usize {
        self.videos.iter().map(|v| v.prompts.len()).sum()
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn gt_to_string(gt: &GroundTruth) -> String {
    let mut s = String::new();
    for (t, frame) in gt.frames.iter().enumerate() {
        let mut rows: Vec<&GtEntry> = frame.iter().collect();
        rows.sort_by_key(|e| e.id);
        for e in rows {
            let b = e.bbox;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},1,{},-1",
                t + 1,
                e.id,
                b.x,
                b.y,
                b.w,
                b.h,
                e.category.code()
            );
        }
    }
    s
}

fn expression_to_string(p: &Prompt, r: &ReferralMap) -> String {
    let mut s = format!("{}\n", p.text);
    for (t, ids) in r.frames.iter().enumerate() {
        if !ids.is_empty() {
            let list: Vec<String> = ids.iter().map(u32::to_string).collect();
            let _ = writeln!(s, "{}: {}", t + 1, list.join(","));
        }
    }
    s
}

/// Write one video folder under `root`, validating first.
pub fn write_video(root: &Path, video: &Video) -> Result<PathBuf> {
    video.validate()?;
    let dir = root.join(&video.name);
    create_dir(&dir.join("expression"))?;
    let (w, h) = video.gt.image_size;
    write_file(
        &dir.join("seqinfo.ini"),
        &format!(
            "[Sequence]\nname={}\nseqLength={}\nimWidth={w}\nimHeight={h}\ncolors={}\n",
            video.name,
            video.num_frames(),
            video.palette.join(",")
        ),
    )?;
    write_file(&dir.join("gt.txt"), &gt_to_string(&video.gt))?;
    let mut ents = String::new();
    for e in &video.entities {
        let _ = writeln!(ents, "{},{},{}", e.id, e.category.name(), e.color);
    }
    write_file(&dir.join("entities.txt"), &ents)?;
    for (p, r) in video.prompts.iter().zip(&video.referrals) {
        write_file(&dir.join("expression").join(&p.id), &expression_to_string(p, r))?;
    }
    Ok(dir)
}

/// Write every video; all are validated before anything touches the disk.
pub fn write_benchmark(root: &Path, bench: &Benchmark) -> Result<()> {
    for v in &bench.videos {
        v.validate()?;
    }
    let mut names = BTreeSet::new();
    for v in &bench.videos {
        if !names.insert(&v.name) {
            return Err(Error::Validation(format!("duplicate video name `{}`", v.name)));
        }
    }
    create_dir(root)?;
    for v in &bench.videos {
        write_video(root, v)?;
    }
    Ok(())
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_num<T: std::str::FromStr>(path: &Path, line: usize, field: &str, what: &str) -> Result<T> {
    field
        .trim()
        .parse()
        .map_err(|_| Error::format(path, line, format!("malformed {what} `{field}`")))
}

fn parse_box(path: &Path, line: usize, f: &[&str]) -> Result<BBox> {
    let b = BBox::new(
        parse_num(path, line, f[0], "x")?,
        parse_num(path, line, f[1], "y")?,
        parse_num(path, line, f[2], "w")?,
        parse_num(path, line, f[3], "h")?,
    );
    if ![b.x, b.y, b.w, b.h].iter().all(|v| v.is_finite()) || b.w <= 0.0 || b.h <= 0.0 {
        return Err(Error::format(path, line, "box must be finite with positive size"));
    }
    Ok(b)
}

struct SeqInfo {
    name: String,
    len: usize,
    size: (u32, u32),
    colors: Vec<String>,
}

fn read_seqinfo(path: &Path) -> Result<SeqInfo> {
    let text = read_to_string(path)?;
    let mut kv = BTreeMap::new();
    for (k, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('[') || line.starts_with(';') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::format(path, k + 1, "expected key=value"))?;
        kv.insert(key.trim().to_string(), (k + 1, value.trim().to_string()));
    }
    let get = |key: &str| {
        kv.get(key)
            .ok_or_else(|| Error::format(path, 0, format!("missing key `{key}`")))
    };
    let num = |key: &str| -> Result<u64> {
        let (line, v) = get(key)?;
        parse_num(path, *line, v, key)
    };
    let colors = kv
        .get("colors")
        .map(|(_, v)| v.split(',').filter(|c| !c.is_empty()).map(String::from).collect())
        .unwrap_or_default();
    Ok(SeqInfo {
        name: get("name")?.1.clone(),
        len: num("seqLength")? as usize,
        size: (num("imWidth")? as u32, num("imHeight")? as u32),
        colors,
    })
}

/// Parse `gt.txt` contents for a video of `num_frames` frames.
pub fn parse_gt(path: &Path, text: &str, num_frames: usize, size: (u32, u32)) -> Result<GroundTruth> {
    let mut frames: Vec<Vec<GtEntry>> = vec![Vec::new(); num_frames];
    for (k, line) in text.lines().enumerate() {
        let ln = k + 1;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 {
            return Err(Error::format(path, ln, format!("expected 9 fields, found {}", f.len())));
        }
        let frame: usize = parse_num(path, ln, f[0], "frame")?;
        if frame < 1 || frame > num_frames {
            return Err(Error::format(path, ln, format!("frame {frame} outside 1..={num_frames}")));
        }
        let id: u32 = parse_num(path, ln, f[1], "id")?;
        let bbox = parse_box(path, ln, &f[2..6])?;
        let code: u32 = parse_num(path, ln, f[7], "category")?;
        let category = Category::from_code(code)
            .ok_or_else(|| Error::format(path, ln, format!("unknown category code {code}")))?;
        let entries = &mut frames[frame - 1];
        if entries.iter().any(|e| e.id == id) {
            return Err(Error::format(path, ln, format!("id {id} repeated in frame {frame}")));
        }
        entries.push(GtEntry { id, bbox, category });
    }
    Ok(GroundTruth {
        image_size: size,
        frames,
    })
}

fn read_entities(path: &Path) -> Result<Vec<EntityRecord>> {
    let text = read_to_string(path)?;
    let mut out = Vec::new();
    for (k, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 3 {
            return Err(Error::format(path, k + 1, "expected id,category,color"));
        }
        out.push(EntityRecord {
            id: parse_num(path, k + 1, f[0], "id")?,
            category: Category::from_name(f[1])
                .ok_or_else(|| Error::format(path, k + 1, format!("unknown category `{}`", f[1])))?,
            color: f[2].to_string(),
        });
    }
    Ok(out)
}

fn read_expression(path: &Path, id: &str, num_frames: usize) -> Result<(Prompt, ReferralMap)> {
    let text = read_to_string(path)?;
    let mut lines = text.lines();
    let prompt_text = lines
        .next()
        .ok_or_else(|| Error::format(path, 1, "missing prompt text"))?;
    let predicate = parse(prompt_text).map_err(|e| Error::format(path, 1, e.to_string()))?;
    let mut map = ReferralMap::empty(num_frames);
    for (k, line) in lines.enumerate() {
        let ln = k + 2;
        if line.trim().is_empty() {
            continue;
        }
        let (frame, ids) = line
            .split_once(':')
            .ok_or_else(|| Error::format(path, ln, "expected `frame: id,id,...`"))?;
        let frame: usize = parse_num(path, ln, frame, "frame")?;
        if frame < 1 || frame > num_frames {
            return Err(Error::format(path, ln, format!("frame {frame} outside 1..={num_frames}")));
        }
        for id in ids.split(',') {
            map.frames[frame - 1].insert(parse_num(path, ln, id, "id")?);
        }
    }
    let prompt = Prompt {
        id: id.to_string(),
        text: prompt_text.to_string(),
        support: map.instances().len(),
        predicate,
    };
    Ok((prompt, map))
}

/// Read one video folder.
pub fn read_video(dir: &Path) -> Result<Video> {
    let gt_path = dir.join("gt.txt");
    let info = read_seqinfo(&dir.join("seqinfo.ini"))?;
    let gt = parse_gt(&gt_path, &read_to_string(&gt_path)?, info.len, info.size)?;
    let entities = read_entities(&dir.join("entities.txt"))?;
    let exp_dir = dir.join("expression");
    let mut ids = Vec::new();
    if exp_dir.is_dir() {
        for entry in fs::read_dir(&exp_dir).map_err(|e| Error::io(&exp_dir, e))? {
            let entry = entry.map_err(|e| Error::io(&exp_dir, e))?;
            ids.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    ids.sort();
    let mut prompts = Vec::new();
    let mut referrals = Vec::new();
    for id in ids {
        let path = exp_dir.join(&id);
        let (p, r) = read_expression(&path, &id, info.len)?;
        for (t, set) in r.frames.iter().enumerate() {
            if let Some(bad) = set.iter().find(|i| gt.entry(t, **i).is_none()) {
                return Err(Error::Validation(format!(
                    "{}: prompt {id}, frame {}: dangling referred id {bad}",
                    path.display(),
                    t + 1
                )));
            }
        }
        prompts.push(p);
        referrals.push(r);
    }
    let video = Video {
        name: info.name,
        palette: info.colors,
        entities,
        gt,
        prompts,
        referrals,
    };
    video.validate()?;
    Ok(video)
}

/// Read every video folder (any subdirectory holding a `gt.txt`), sorted by name.
pub fn read_benchmark(root: &Path) -> Result<Benchmark> {
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let p = entry.path();
        if p.is_dir() && p.join("gt.txt").is_file() {
            dirs.push(p);
        }
    }
    if dirs.is_empty() {
        return Err(Error::io(
            root.join("gt.txt"),
            std::io::Error::new(std::io::ErrorKind::NotFound, "no video folder with a gt.txt"),
        ));
    }
    dirs.sort();
    let videos = dirs.iter().map(|d| read_video(d)).collect::<Result<Vec<_>>>()?;
    Ok(Benchmark { videos })
}

/// Build a [`Video`] straight from a scene (no disk round trip).
pub fn video_from_scene(
    name: &str,
    scene: &Scene,
    gt: &GroundTruth,
    prompts: Vec<Prompt>,
) -> Result<Video> {
    let referrals = prompts
        .iter()
        .map(|p| crate::promptlang::resolve(&p.predicate, scene, gt))
        .collect::<Result<Vec<_>>>()?;
    Ok(Video::from_scene(name, scene, gt.clone(), prompts, referrals))
}

/// One predicted box: `frame` is 0-based in memory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredRow {
    pub frame: usize,
    pub id: u32,
    pub bbox: BBox,
    pub score: f64,
}

pub fn predictions_to_string(rows: &[PredRow]) -> String {
    let mut s = String::new();
    for r in rows {
        let b = r.bbox;
        let _ = writeln!(s, "{},{},{},{},{},{},{}", r.frame + 1, r.id, b.x, b.y, b.w, b.h, r.score);
    }
    s
}

pub fn write_predictions(path: &Path, rows: &[PredRow]) -> Result<()> {
    if let Some(dir) = path.parent() {
        create_dir(dir)?;
    }
    write_file(path, &predictions_to_string(rows))
}

/// Parse prediction rows: `frame,id,x,y,w,h,score`, or the ten-column form
/// `frame,id,x,y,w,h,1,category,-1,score`.
pub fn parse_predictions(path: &Path, text: &str) -> Result<Vec<PredRow>> {
    let mut out = Vec::new();
    for (k, line) in text.lines().enumerate() {
        let ln = k + 1;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        let score_col = match f.len() {
            7 => 6,
            10 => 9,
            n => return Err(Error::format(path, ln, format!("expected 7 or 10 fields, found {n}"))),
        };
        let frame: usize = parse_num(path, ln, f[0], "frame")?;
        if frame < 1 {
            return Err(Error::format(path, ln, "frames are 1-based"));
        }
        let score: f64 = parse_num(path, ln, f[score_col], "score")?;
        if !score.is_finite() {
            return Err(Error::format(path, ln, "score must be finite"));
        }
        out.push(PredRow {
            frame: frame - 1,
            id: parse_num(path, ln, f[1], "id")?,
            bbox: parse_box(path, ln, &f[2..6])?,
            score,
        });
    }
    Ok(out)
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredRow>> {
    parse_predictions(path, &read_to_string(path)?)
}

/// Prediction file of one prompt under a predictions root.
pub fn prediction_path(pred_root: &Path, video: &str, prompt_id: &str) -> PathBuf {
    pred_root.join(video).join(format!("{prompt_id}.txt"))
}

/// Fixed-width histogram over `[0, bins * width)`; the last bin absorbs overflow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bin_width: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn new(bin_width: f64, bins: usize) -> Self {
        Self {
            bin_width,
            counts: vec![0; bins],
        }
    }

    pub fn add(&mut self, v: f64) {
        let k = ((v / self.bin_width).floor().max(0.0) as usize).min(self.counts.len() - 1);
        self.counts[k] += 1;
    }

    pub fn mass(&self) -> usize {
        self.counts.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub videos: usize,
    pub frames: usize,
    pub prompts: usize,
    pub boxes: usize,
    pub instances_per_prompt: f64,
    /// Distinct referred instances per prompt → number of prompts.
    pub instances_hist: BTreeMap<usize, usize>,
    pub temporal_ratio: f64,
    /// Ten bins over [0, 1].
    pub temporal_ratio_hist: Histogram,
    /// Referred frames per (prompt, instance) pair, bins of 25 frames.
    pub duration_hist: Histogram,
    pub word_freq: BTreeMap<String, usize>,
}

const STOP_WORDS: &[&str] = &["the", "which", "are", "and", "or", "in"];

pub fn compute_stats(bench: &Benchmark) -> DatasetStats {
    let mut s = DatasetStats {
        videos: bench.videos.len(),
        frames: 0,
        prompts: 0,
        boxes: 0,
        instances_per_prompt: 0.0,
        instances_hist: BTreeMap::new(),
        temporal_ratio: 0.0,
        temporal_ratio_hist: Histogram::new(0.1, 10),
        duration_hist: Histogram::new(25.0, 12),
        word_freq: BTreeMap::new(),
    };
    let mut inst_total = 0usize;
    let mut ratio_total = 0.0;
    for v in &bench.videos {
        s.frames += v.num_frames();
        s.boxes += v.gt.box_count();
        for (p, r) in v.prompts.iter().zip(&v.referrals) {
            s.prompts += 1;
            let ids = r.instances();
            inst_total += ids.len();
            *s.instances_hist.entry(ids.len()).or_default() += 1;
            let ratio = r.referred_frames() as f64 / v.num_frames().max(1) as f64;
            ratio_total += ratio;
            s.temporal_ratio_hist.add(ratio);
            for id in ids {
                let d = r.frames.iter().filter(|f| f.contains(&id)).count();
                s.duration_hist.add(d as f64);
            }
            for w in p.text.split(' ').filter(|w| !STOP_WORDS.contains(w)) {
                *s.word_freq.entry(w.to_string()).or_default() += 1;
            }
        }
    }
    if s.prompts > 0 {
        s.instances_per_prompt = inst_total as f64 / s.prompts as f64;
        s.temporal_ratio = ratio_total / s.prompts as f64;
    }
    s
}

impl DatasetStats {
    /// Human-readable summary table.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:>7} {:>8} {:>8} {:>9} {:>14} {:>15}",
            "videos", "frames", "prompts", "boxes", "inst/prompt", "temporal ratio"
        );
        let _ = writeln!(
            s,
            "{:>7} {:>8} {:>8} {:>9} {:>14.2} {:>15.3}",
            self.videos, self.frames, self.prompts, self.boxes, self.instances_per_prompt, self.temporal_ratio
        );
        let _ = writeln!(s, "\ninstances per prompt:");
        for (k, n) in &self.instances_hist {
            let _ = writeln!(s, "  {k:>4}: {n}");
        }
        let _ = writeln!(s, "temporal ratio per expression:");
        for (k, n) in self.temporal_ratio_hist.counts.iter().enumerate() {
            let lo = k as f64 * self.temporal_ratio_hist.bin_width;
            let _ = writeln!(s, "  [{lo:.1}, {:.1}): {n}", lo + self.temporal_ratio_hist.bin_width);
        }
        let _ = writeln!(s, "referred duration per instance (frames):");
        for (k, n) in self.duration_hist.counts.iter().enumerate() {
            let lo = k as f64 * self.duration_hist.bin_width;
            let _ = writeln!(s, "  [{lo:.0}, {:.0}): {n}", lo + self.duration_hist.bin_width);
        }
        let _ = writeln!(s, "word frequency:");
        let mut words: Vec<(&String, &usize)> = self.word_freq.iter().collect();
        words.sort_by(|a, b| b.1.cmp(a.1).then(a.0.cmp(b.0)));
        for (w, n) in words {
            let _ = writeln!(s, "  {w:<12} {n}");
        }
        s
    }
}
