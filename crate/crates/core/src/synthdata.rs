//! Synthetic scenes whose label maps obey simple geometric and semantic
//! priors (solid, straight-edged shapes; parts that only occur attached to
//! their parent), plus PGM/PPM label and image I/O.

use std::collections::VecDeque;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grids::{ImageGrid, LabelGrid};
use crate::seed::{domain, rng_for, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Rectangle,
    Circle,
    LPolygon,
}

/// How a dependent class is placed relative to its parent object.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Attachment {
    /// A root object placed freely, never overlapping other roots.
    Free,
    /// A strip sitting on the parent's top edge, one lattice cell wider on
    /// each side (a roof).
    Cap { parent: u16 },
    /// A narrow column rising from the parent's top edge and extending above
    /// any cap (a chimney).
    Stack { parent: u16 },
}

impl Attachment {
    pub fn parent(&self) -> Option<u16> {
        match *self {
            Attachment::Free => None,
            Attachment::Cap { parent } | Attachment::Stack { parent } => Some(parent),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassSpec {
    pub name: String,
    /// Shapes a root object may take; dependents are always rectangles.
    pub shapes: Vec<ShapeKind>,
    pub attachment: Attachment,
    /// Probability that a dependent is drawn given its parent.
    pub probability: f64,
    pub color: [f32; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    /// Class 0 is background; `classes[0]` describes it.
    pub classes: Vec<ClassSpec>,
    /// Inclusive range for the number of root objects.
    pub object_count: (usize, usize),
    /// Inclusive range for the side length (or diameter) of root objects.
    pub object_size: (usize, usize),
    /// Standard deviation of per-pixel colour noise.
    pub noise_level: f64,
    /// Grid that object corners and extents snap to (1 = free placement).
    pub lattice: usize,
}

impl SceneSpec {
    /// 64x64 scenes with houses, roofs and chimneys.
    pub fn houses() -> Self {
        let class = |name: &str, shapes: Vec<ShapeKind>, attachment, probability, color| ClassSpec {
            name: name.into(),
            shapes,
            attachment,
            probability,
            color,
        };
        Self {
            height: 64,
            width: 64,
            classes: vec![
                class("background", vec![], Attachment::Free, 0.0, [0.55, 0.7, 0.45]),
                class(
                    "house",
                    vec![ShapeKind::Rectangle, ShapeKind::LPolygon],
                    Attachment::Free,
                    1.0,
                    [0.8, 0.75, 0.6],
                ),
                class("roof", vec![], Attachment::Cap { parent: 1 }, 0.85, [0.65, 0.2, 0.15]),
                class("chimney", vec![], Attachment::Stack { parent: 1 }, 0.5, [0.35, 0.3, 0.3]),
            ],
            object_count: (1, 3),
            object_size: (12, 24),
            noise_level: 0.08,
            lattice: 4,
        }
    }

    /// Look up a named preset.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" | "houses" => Ok(Self::houses()),
            other => Err(Error::Config(format!("unknown scene spec {other:?}"))),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// `(class, requires)` pairs implied by the attachments.
    pub fn rules(&self) -> Vec<(u16, u16)> {
        self.classes
            .iter()
            .enumerate()
            .filter_map(|(c, spec)| spec.attachment.parent().map(|p| (c as u16, p)))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.num_classes();
        if k < 2 {
            return Err(Error::Config("a scene needs at least 2 classes".into()));
        }
        if k > 255 {
            return Err(Error::Config("at most 255 classes fit an 8-bit label file".into()));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("empty scene".into()));
        }
        if self.object_count.0 > self.object_count.1 || self.object_size.0 > self.object_size.1 {
            return Err(Error::Config("inverted range".into()));
        }
        if self.lattice == 0 {
            return Err(Error::Config("lattice must be positive".into()));
        }
        if self.object_count.1 > 0 && self.object_size.0 < 3 * self.lattice {
            return Err(Error::Config("objects must span at least 3 lattice cells".into()));
        }
        for (c, spec) in self.classes.iter().enumerate().skip(1) {
            match spec.attachment {
                Attachment::Free => {
                    if spec.shapes.is_empty() {
                        return Err(Error::Config(format!("class {c} has no shapes")));
                    }
                }
                Attachment::Cap { parent } | Attachment::Stack { parent } => {
                    // Parents come earlier, so the rule graph is acyclic and
                    // the paint order is also the occlusion order.
                    if parent == 0 || parent as usize >= c {
                        return Err(Error::Config(format!(
                            "class {c} must depend on an earlier non-background class"
                        )));
                    }
                    if self.classes[parent as usize].attachment != Attachment::Free {
                        return Err(Error::Config(format!("class {c} depends on a dependent class")));
                    }
                }
            }
            if !(0.0..=1.0).contains(&spec.probability) {
                return Err(Error::Config(format!("class {c} probability out of [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub image: ImageGrid,
    pub labels: LabelGrid,
}

/// Axis-aligned inclusive-exclusive box.
#[derive(Clone, Copy, Debug)]
struct Rect {
    y0: i64,
    x0: i64,
    y1: i64,
    x1: i64,
}

impl Rect {
    fn overlaps_with_margin(&self, other: &Rect, margin: i64) -> bool {
        self.y0 < other.y1 + margin
            && other.y0 < self.y1 + margin
            && self.x0 < other.x1 + margin
            && other.x0 < self.x1 + margin
    }

    fn union(&self, other: &Rect) -> Rect {
        Rect {
            y0: self.y0.min(other.y0),
            x0: self.x0.min(other.x0),
            y1: self.y1.max(other.y1),
            x1: self.x1.max(other.x1),
        }
    }
}

#[derive(Clone, Debug)]
enum Shape {
    Rect(Rect),
    Circle { cy: f64, cx: f64, r: f64 },
    /// A rectangle with its bottom-left or bottom-right quadrant removed.
    L { outer: Rect, cut: Rect },
}

impl Shape {
    fn contains(&self, y: i64, x: i64) -> bool {
        let inside = |r: &Rect| y >= r.y0 && y < r.y1 && x >= r.x0 && x < r.x1;
        match self {
            Shape::Rect(r) => inside(r),
            Shape::Circle { cy, cx, r } => {
                let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                dy * dy + dx * dx <= r * r
            }
            Shape::L { outer, cut } => inside(outer) && !inside(cut),
        }
    }

    fn bounds(&self) -> Rect {
        match self {
            Shape::Rect(r) | Shape::L { outer: r, .. } => *r,
            Shape::Circle { cy, cx, r } => Rect {
                y0: (cy - r).floor() as i64,
                x0: (cx - r).floor() as i64,
                y1: (cy + r).ceil() as i64,
                x1: (cx + r).ceil() as i64,
            },
        }
    }
}

const PLACEMENT_ATTEMPTS: usize = 200;

struct Group {
    bounds: Rect,
    parts: Vec<(u16, Shape)>,
}

fn root_shape(kind: ShapeKind, y0: i64, x0: i64, h: i64, w: i64, l: i64, rng: &mut Rng) -> Shape {
    let outer = Rect { y0, x0, y1: y0 + h, x1: x0 + w };
    match kind {
        ShapeKind::Rectangle => Shape::Rect(outer),
        ShapeKind::Circle => {
            let d = h.min(w) as f64;
            Shape::Circle {
                cy: y0 as f64 + d / 2.0,
                cx: x0 as f64 + d / 2.0,
                r: d / 2.0,
            }
        }
        ShapeKind::LPolygon => {
            // Remove a bottom corner so the top edge stays straight.
            let ch = l * rng.random_range((h / l / 3).max(1)..=(h / l / 2).max(1));
            let cw = l * rng.random_range((w / l / 3).max(1)..=(w / l / 2).max(1));
            let cut = if rng.random_bool(0.5) {
                Rect { y0: y0 + h - ch, x0, y1: y0 + h, x1: x0 + cw }
            } else {
                Rect { y0: y0 + h - ch, x0: x0 + w - cw, y1: y0 + h, x1: x0 + w }
            };
            Shape::L { outer, cut }
        }
    }
}

fn build_group(spec: &SceneSpec, class: u16, rng: &mut Rng) -> Group {
    let cs = &spec.classes[class as usize];
    let l = spec.lattice as i64;
    // Sizes and positions in lattice cells.
    let (lo, hi) = (spec.object_size.0 as i64 / l, (spec.object_size.1 as i64 / l).max(1));
    let (rows, cols) = (spec.height as i64 / l, spec.width as i64 / l);
    let kind = cs.shapes[rng.random_range(0..cs.shapes.len())];
    let w = rng.random_range(lo..=hi);
    let h = if kind == ShapeKind::Circle { w } else { rng.random_range(lo..=hi) };
    let y0 = rng.random_range(0..=(rows - h).max(0));
    let x0 = rng.random_range(0..=(cols - w).max(0));
    let root = root_shape(kind, y0 * l, x0 * l, h * l, w * l, l, rng);
    let top = root.bounds();
    let mut parts = vec![(class, root)];
    let mut cap_height = 0;
    for (c, dep) in spec.classes.iter().enumerate() {
        if dep.attachment.parent() != Some(class) || !rng.random_bool(dep.probability) {
            continue;
        }
        let shape = match dep.attachment {
            Attachment::Cap { .. } => {
                cap_height = l * rng.random_range(1..=(h / 3).max(1));
                let overhang = l.max(1);
                Rect { y0: top.y0 - cap_height, x0: top.x0 - overhang, y1: top.y0, x1: top.x1 + overhang }
            }
            Attachment::Stack { .. } => {
                // Narrow, and one cell taller than any cap so it reaches the
                // parent's top edge and still sticks out above.
                let cw = l * rng.random_range(1..=(w / 5).max(1));
                let extra = l * rng.random_range(1..=2);
                let cx = top.x0 + l * rng.random_range(1..=((top.x1 - top.x0 - cw) / l - 1).max(1));
                Rect { y0: top.y0 - cap_height - extra, x0: cx, y1: top.y0, x1: cx + cw }
            }
            Attachment::Free => unreachable!("dependents have a parent"),
        };
        parts.push((c as u16, Shape::Rect(shape)));
    }
    let bounds = parts.iter().fold(top, |acc, (_, s)| acc.union(&s.bounds()));
    Group { bounds, parts }
}

fn paint(spec: &SceneSpec, groups: &[Group], rng: &mut Rng) -> SamplePair {
    let (hh, ww) = (spec.height, spec.width);
    let mut labels = vec![0u16; hh * ww];
    // Occlusion order: class order within each group, groups back to front.
    for g in groups {
        let mut parts: Vec<&(u16, Shape)> = g.parts.iter().collect();
        parts.sort_by_key(|(c, _)| *c);
        for (c, shape) in parts {
            let b = shape.bounds();
            for y in b.y0.max(0)..b.y1.min(hh as i64) {
                for x in b.x0.max(0)..b.x1.min(ww as i64) {
                    if shape.contains(y, x) {
                        labels[y as usize * ww + x as usize] = *c;
                    }
                }
            }
        }
    }
    let mut pixels = Vec::with_capacity(hh * ww * 3);
    for &l in &labels {
        let color = spec.classes[l as usize].color;
        for ch in color {
            let n: f64 = StandardNormal.sample(rng);
            pixels.push((ch as f64 + spec.noise_level * n).clamp(0.0, 1.0) as f32);
        }
    }
    SamplePair {
        image: ImageGrid::new(hh, ww, pixels).expect("pixels clamped to [0, 1]"),
        labels: LabelGrid::new(hh, ww, spec.num_classes(), labels).expect("painted classes in range"),
    }
}

/// Generate one scene. Fails with a placement error when a root object
/// cannot be placed without overlapping the others.
pub fn gen_scene(spec: &SceneSpec, rng: &mut Rng) -> Result<SamplePair> {
    spec.validate()?;
    let roots: Vec<u16> = (1..spec.num_classes() as u16)
        .filter(|&c| spec.classes[c as usize].attachment == Attachment::Free)
        .collect();
    let (lo, hi) = spec.object_count;
    let count = rng.random_range(lo..=hi);
    if count > 0 && roots.is_empty() {
        return Err(Error::Placement("no class can be placed freely".into()));
    }
    let mut groups: Vec<Group> = Vec::with_capacity(count);
    for _ in 0..count {
        let class = roots[rng.random_range(0..roots.len())];
        let mut placed = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let g = build_group(spec, class, rng);
            let b = g.bounds;
            let in_frame = b.y0 >= 0 && b.x0 >= 0 && b.y1 <= spec.height as i64 && b.x1 <= spec.width as i64;
            if in_frame && groups.iter().all(|o| !o.bounds.overlaps_with_margin(&b, 1)) {
                groups.push(g);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Placement(format!(
                "could not place a {} after {PLACEMENT_ATTEMPTS} attempts",
                spec.classes[class as usize].name
            )));
        }
    }
    let pair = paint(spec, &groups, rng);
    check_scene(spec, &pair.labels)?;
    Ok(pair)
}

/// Label components of `labels` (4-connectivity), each as a list of pixel
/// indices, paired with their class.
pub fn components(labels: &LabelGrid) -> Vec<(u16, Vec<usize>)> {
    let (h, w) = (labels.height(), labels.width());
    let vals = labels.values();
    let mut seen = vec![false; vals.len()];
    let mut out = Vec::new();
    for start in 0..vals.len() {
        if seen[start] {
            continue;
        }
        let class = vals[start];
        let mut comp = Vec::new();
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(p) = queue.pop_front() {
            comp.push(p);
            let (y, x) = (p / w, p % w);
            let mut visit = |q: usize| {
                if !seen[q] && vals[q] == class {
                    seen[q] = true;
                    queue.push_back(q);
                }
            };
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
        }
        out.push((class, comp));
    }
    out
}

/// Whether a set of pixels has a hole: some pixel outside it that cannot
/// reach the image border (or the outside) without crossing it.
pub fn has_hole(height: usize, width: usize, member: &[bool]) -> bool {
    let mut reached = vec![false; member.len()];
    let mut queue = VecDeque::new();
    for p in 0..member.len() {
        let (y, x) = (p / width, p % width);
        let border = y == 0 || x == 0 || y + 1 == height || x + 1 == width;
        if border && !member[p] {
            reached[p] = true;
            queue.push_back(p);
        }
    }
    while let Some(p) = queue.pop_front() {
        let (y, x) = (p / width, p % width);
        let mut nbrs = Vec::with_capacity(4);
        if y > 0 {
            nbrs.push(p - width);
        }
        if y + 1 < height {
            nbrs.push(p + width);
        }
        if x > 0 {
            nbrs.push(p - 1);
        }
        if x + 1 < width {
            nbrs.push(p + 1);
        }
        for q in nbrs {
            if !reached[q] && !member[q] {
                reached[q] = true;
                queue.push_back(q);
            }
        }
    }
    member.iter().zip(&reached).any(|(&m, &r)| !m && !r)
}

/// Verify the structural priors of a generated label map: non-background
/// components have no holes, rectangle-only classes form rectangles, and
/// every dependent component touches a component of its parent class.
pub fn check_scene(spec: &SceneSpec, labels: &LabelGrid) -> Result<()> {
    let (h, w) = (labels.height(), labels.width());
    let vals = labels.values();
    for (class, comp) in components(labels) {
        if class == 0 {
            continue;
        }
        let cs = &spec.classes[class as usize];
        let mut member = vec![false; vals.len()];
        for &p in &comp {
            member[p] = true;
        }
        if has_hole(h, w, &member) {
            return Err(Error::Placement(format!("{} component has a hole", cs.name)));
        }
        let rect_only = cs.attachment != Attachment::Free || cs.shapes.iter().all(|&s| s == ShapeKind::Rectangle);
        if rect_only {
            let (mut y0, mut x0, mut y1, mut x1) = (usize::MAX, usize::MAX, 0, 0);
            for &p in &comp {
                y0 = y0.min(p / w);
                x0 = x0.min(p % w);
                y1 = y1.max(p / w);
                x1 = x1.max(p % w);
            }
            if (y1 - y0 + 1) * (x1 - x0 + 1) != comp.len() {
                return Err(Error::Placement(format!("{} component is not a rectangle", cs.name)));
            }
        }
        if let Some(parent) = cs.attachment.parent() {
            let touches = comp.iter().any(|&p| {
                let (y, x) = (p / w, p % w);
                (y > 0 && vals[p - w] == parent)
                    || (y + 1 < h && vals[p + w] == parent)
                    || (x > 0 && vals[p - 1] == parent)
                    || (x + 1 < w && vals[p + 1] == parent)
            });
            if !touches {
                return Err(Error::Placement(format!(
                    "{} component does not touch a {}",
                    cs.name, spec.classes[parent as usize].name
                )));
            }
        }
    }
    Ok(())
}

const MAX_SCENE_RETRIES: usize = 64;

/// Scene `index` of a dataset drawn from `seed`. Placement failures are
/// retried on the same per-sample stream, so the result depends only on
/// `(spec, seed, index)`.
pub fn gen_indexed(spec: &SceneSpec, seed: u64, index: u64) -> Result<SamplePair> {
    let mut rng = rng_for(seed, domain::SCENE, index);
    let mut last = None;
    for _ in 0..MAX_SCENE_RETRIES {
        match gen_scene(spec, &mut rng) {
            Ok(pair) => return Ok(pair),
            Err(e @ Error::Placement(_)) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

/// Generate `count` scenes starting at dataset index `first`, in parallel.
pub fn gen_many(spec: &SceneSpec, seed: u64, first: u64, count: usize) -> Result<Vec<SamplePair>> {
    (0..count as u64)
        .into_par_iter()
        .map(|i| gen_indexed(spec, seed, first + i))
        .collect()
}

fn read_header(bytes: &[u8], expect: &[u8; 2]) -> Result<(usize, usize, usize)> {
    if bytes.len() < 2 || &bytes[..2] != expect {
        return Err(Error::Format(format!(
            "expected {} header",
            String::from_utf8_lossy(expect)
        )));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(Error::Truncated("header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("malformed header field".into()))?;
    }
    // Exactly one whitespace byte separates the header from the raster.
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(Error::Format("missing raster separator".into()));
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(Error::Format(format!("unsupported bit depth (maxval {maxval})")));
    }
    Ok((w, h, pos + 1))
}

fn raster<'a>(bytes: &'a [u8], start: usize, len: usize) -> Result<&'a [u8]> {
    let data = &bytes[start..];
    if data.len() < len {
        return Err(Error::Truncated(format!("raster has {} of {len} bytes", data.len())));
    }
    if data.len() > len {
        return Err(Error::Format("trailing bytes after raster".into()));
    }
    Ok(data)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Encode a label map as binary PGM with pixel value = class id.
pub fn encode_labels(labels: &LabelGrid) -> Result<Vec<u8>> {
    if labels.num_classes() > 255 {
        return Err(Error::Format(format!(
            "{} classes do not fit an 8-bit label file",
            labels.num_classes()
        )));
    }
    if labels.contains_mask() {
        return Err(Error::InvalidArgument("label file cannot store MASK".into()));
    }
    let mut out = format!("P5\n{} {}\n255\n", labels.width(), labels.height()).into_bytes();
    out.extend(labels.values().iter().map(|&v| v as u8));
    Ok(out)
}

pub fn decode_labels(bytes: &[u8], num_classes: usize) -> Result<LabelGrid> {
    let (w, h, start) = read_header(bytes, b"P5")?;
    let data = raster(bytes, start, w * h)?;
    LabelGrid::new(h, w, num_classes, data.iter().map(|&b| b as u16).collect())
}

pub fn save_labels(labels: &LabelGrid, path: &Path) -> Result<()> {
    write_bytes(path, &encode_labels(labels)?)
}

pub fn load_labels(path: &Path, num_classes: usize) -> Result<LabelGrid> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_labels(&bytes, num_classes)
}

pub fn encode_image(image: &ImageGrid) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend(image.values().iter().map(|&v| (v * 255.0).round() as u8));
    out
}

pub fn decode_image(bytes: &[u8]) -> Result<ImageGrid> {
    let (w, h, start) = read_header(bytes, b"P6")?;
    let data = raster(bytes, start, w * h * 3)?;
    ImageGrid::new(h, w, data.iter().map(|&b| b as f32 / 255.0).collect())
}

pub fn save_image(image: &ImageGrid, path: &Path) -> Result<()> {
    write_bytes(path, &encode_image(image))
}

pub fn load_image(path: &Path) -> Result<ImageGrid> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes)
}

/// One manifest row: image and label paths, relative to the manifest.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub labels: PathBuf,
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = Vec::new();
    for e in entries {
        writeln!(out, "{}\t{}", e.image.display(), e.labels.display()).expect("write to Vec");
    }
    write_bytes(path, &out)
}

/// Read a manifest, resolving its relative paths against its directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            let (img, lab) = line
                .split_once('\t')
                .ok_or_else(|| Error::Format(format!("{}: line {} lacks a tab", path.display(), i + 1)))?;
            Ok(ManifestEntry {
                image: base.join(img),
                labels: base.join(lab),
            })
        })
        .collect()
}

/// Sizes of the two dataset splits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitSizes {
    pub train: usize,
    pub eval: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self { train: 2000, eval: 200 }
    }
}

/// Write a dataset directory: `train/`, `eval/` sample files and the
/// `train.tsv` / `eval.tsv` manifests. Eval scenes continue the index
/// sequence after the training scenes.
pub fn write_dataset(spec: &SceneSpec, seed: u64, sizes: SplitSizes, out: &Path) -> Result<()> {
    let mut first = 0u64;
    for (split, count) in [("train", sizes.train), ("eval", sizes.eval)] {
        let pairs = gen_many(spec, seed, first, count)?;
        let mut entries = Vec::with_capacity(count);
        for (i, pair) in pairs.iter().enumerate() {
            let image = PathBuf::from(split).join(format!("{i:05}.ppm"));
            let labels = PathBuf::from(split).join(format!("{i:05}.pgm"));
            save_image(&pair.image, &out.join(&image))?;
            save_labels(&pair.labels, &out.join(&labels))?;
            entries.push(ManifestEntry { image, labels });
        }
        write_manifest(&out.join(format!("{split}.tsv")), &entries)?;
        first += count as u64;
    }
    Ok(())
}

/// Load every sample listed in a manifest.
pub fn load_split(manifest: &Path, num_classes: usize) -> Result<Vec<SamplePair>> {
    read_manifest(manifest)?
        .iter()
        .map(|e| {
            Ok(SamplePair {
                image: load_image(&e.image)?,
                labels: load_labels(&e.labels, num_classes)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn zero_objects_gives_background() {
        let spec = SceneSpec { object_count: (0, 0), ..SceneSpec::houses() };
        let pair = gen_scene(&spec, &mut Rng::seed_from_u64(1)).unwrap();
        assert!(pair.labels.values().iter().all(|&v| v == 0));
    }

    #[test]
    fn same_seed_same_scene() {
        let spec = SceneSpec::houses();
        assert_eq!(gen_indexed(&spec, 7, 3).unwrap(), gen_indexed(&spec, 7, 3).unwrap());
        assert_ne!(gen_indexed(&spec, 7, 3).unwrap(), gen_indexed(&spec, 7, 4).unwrap());
    }

    #[test]
    fn impossible_placement_is_reported() {
        let spec = SceneSpec {
            height: 16,
            width: 16,
            object_count: (5, 5),
            object_size: (12, 12),
            lattice: 1,
            ..SceneSpec::houses()
        };
        let err = gen_scene(&spec, &mut Rng::seed_from_u64(2)).unwrap_err();
        assert!(matches!(err, Error::Placement(_)));
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut spec = SceneSpec::houses();
        spec.classes.truncate(1);
        assert!(spec.validate().is_err());
        let mut spec = SceneSpec::houses();
        spec.classes[1].attachment = Attachment::Cap { parent: 2 };
        assert!(spec.validate().is_err());
        assert!(SceneSpec::preset("nope").is_err());
    }

    #[test]
    fn rules_follow_attachments() {
        assert_eq!(SceneSpec::houses().rules(), vec![(2, 1), (3, 1)]);
    }

    #[test]
    fn hole_detection() {
        // 3x3 ring around the centre pixel.
        let mut m = vec![false; 25];
        for y in 1..4 {
            for x in 1..4 {
                m[y * 5 + x] = !(y == 2 && x == 2);
            }
        }
        assert!(has_hole(5, 5, &m));
        m[12] = true;
        assert!(!has_hole(5, 5, &m));
    }

    #[test]
    fn label_bytes_roundtrip_and_limits() {
        let labels = LabelGrid::new(2, 3, 4, vec![0, 1, 2, 3, 0, 1]).unwrap();
        let bytes = encode_labels(&labels).unwrap();
        assert_eq!(&bytes[..11], b"P5\n3 2\n255\n");
        assert_eq!(decode_labels(&bytes, 4).unwrap(), labels);
        assert!(matches!(decode_labels(&bytes[..bytes.len() - 1], 4), Err(Error::Truncated(_))));
        let wide = b"P5\n1 1\n65535\n\0\0";
        assert!(matches!(decode_labels(wide, 4), Err(Error::Format(_))));
        let big = LabelGrid::filled(1, 1, 256, 0).unwrap();
        assert!(encode_labels(&big).is_err());
    }

    #[test]
    fn header_comments_are_skipped() {
        let bytes = b"P5\n# made by hand\n2 1\n255\n\x01\x00";
        let l = decode_labels(bytes, 2).unwrap();
        assert_eq!(l.values(), &[1, 0]);
    }

    #[test]
    fn image_quantization() {
        let img = ImageGrid::new(1, 2, vec![0.5; 6]).unwrap();
        let back = decode_image(&encode_image(&img)).unwrap();
        assert!(back.values().iter().all(|&v| (v - 128.0 / 255.0).abs() < 1e-7));
        let bw = ImageGrid::new(1, 2, vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(decode_image(&encode_image(&bw)).unwrap(), bw);
    }
}
