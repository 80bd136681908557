//! Image sequences on disk, results files and the synthetic sequence
//! generator.
//!
//! Layout: `<seq>/frames/0001.ppm …` (binary P6, maxval 255) and
//! `<seq>/groundtruth.txt` with one `x,y,w,h` line per frame.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::bbox::BoundingBox;
use crate::error::{Error, Result};

/// 8-bit RGB image, row-major, channels interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Image {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Image { width, height, data }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * 3 + c]
    }

    pub fn is_empty(&self) -> bool {
        self.width == 0 || self.height == 0
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_ppm(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |msg: &str| Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            msg: msg.to_string(),
        };
        let mut pos = 0;
        let mut token = || -> Option<String> {
            loop {
                while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                    pos += 1;
                }
                if pos < bytes.len() && bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                    continue;
                }
                break;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            (pos > start).then(|| String::from_utf8_lossy(&bytes[start..pos]).into_owned())
        };
        if token().as_deref() != Some("P6") {
            return Err(bad("not a binary PPM (P6)"));
        }
        let mut num = |what: &str| -> Result<usize> {
            token()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| bad(&format!("bad {what} in PPM header")))
        };
        let width = num("width")?;
        let height = num("height")?;
        if num("maxval")? != 255 {
            return Err(bad("only maxval 255 is supported"));
        }
        // Exactly one whitespace byte separates the header from the raster.
        let start = pos + 1;
        let n = width * height * 3;
        if bytes.len() < start + n {
            return Err(bad(&format!("raster truncated: expected {n} bytes")));
        }
        Ok(Image {
            width,
            height,
            data: bytes[start..start + n].to_vec(),
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Image::from_ppm(&bytes, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_ppm()).map_err(|e| Error::io(path, e))
    }
}

/// Formats a box as a results / ground-truth line (without newline).
pub fn format_box(b: &BoundingBox) -> String {
    format!("{:.6},{:.6},{:.6},{:.6}", b.x, b.y, b.w, b.h)
}

fn parse_box_line(line: &str, path: &Path, line_no: usize) -> Result<BoundingBox> {
    let err = |msg: String| Error::Parse {
        path: path.to_path_buf(),
        line: line_no,
        msg,
    };
    let vals: Vec<&str> = line.trim().split(',').map(str::trim).collect();
    if vals.len() != 4 {
        return Err(err(format!("expected 4 comma-separated values, got {}", vals.len())));
    }
    let mut v = [0.0; 4];
    for (slot, s) in v.iter_mut().zip(&vals) {
        *slot = s.parse().map_err(|_| err(format!("not a number: `{s}`")))?;
    }
    BoundingBox::new(v[0], v[1], v[2], v[3]).map_err(|e| err(e.to_string()))
}

/// Parses a box-per-line file. Line numbers in errors are 1-based.
pub fn parse_boxes(text: &str, path: &Path) -> Result<Vec<BoundingBox>> {
    if text.is_empty() {
        return Ok(Vec::new());
    }
    let body = text.strip_suffix('\n').unwrap_or(text);
    body.split('\n')
        .enumerate()
        .map(|(i, line)| parse_box_line(line, path, i + 1))
        .collect()
}

pub fn write_results(path: &Path, boxes: &[BoundingBox]) -> Result<()> {
    let mut out = String::new();
    for b in boxes {
        out.push_str(&format_box(b));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_results(path: &Path) -> Result<Vec<BoundingBox>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_boxes(&text, path)
}

/// Frames and ground truth of one sequence.
#[derive(Clone, Debug)]
pub struct Sequence {
    pub frames: Vec<Image>,
    /// One box per frame, or only the initialization box.
    pub ground_truth: Vec<BoundingBox>,
}

impl Sequence {
    /// True when every frame has a ground-truth box.
    pub fn is_annotated(&self) -> bool {
        self.ground_truth.len() == self.frames.len()
    }
}

pub fn frame_path(dir: &Path, index: usize) -> PathBuf {
    dir.join("frames").join(format!("{:04}.ppm", index + 1))
}

pub fn read_ground_truth(dir: &Path) -> Result<Vec<BoundingBox>> {
    read_results(&dir.join("groundtruth.txt"))
}

/// Reads `frames/0001.ppm …` (numbered contiguously from 1) and
/// `groundtruth.txt`, which must have one line per frame.
pub fn read_sequence(dir: &Path) -> Result<Sequence> {
    let frames_dir = dir.join("frames");
    let mut indices = Vec::new();
    let entries = fs::read_dir(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(&frames_dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(stem) = name.strip_suffix(".ppm") {
            if let Ok(i) = stem.parse::<usize>() {
                indices.push(i);
            }
        }
    }
    indices.sort_unstable();
    for (k, &i) in indices.iter().enumerate() {
        if i != k + 1 {
            return Err(Error::Validation(format!(
                "missing frame {} in {}",
                frame_path(dir, k).display(),
                frames_dir.display()
            )));
        }
    }
    if indices.is_empty() {
        return Err(Error::Validation(format!("no frames in {}", frames_dir.display())));
    }
    let ground_truth = read_ground_truth(dir)?;
    // A single box is the initialization box of an unannotated sequence.
    if ground_truth.len() != indices.len() && ground_truth.len() != 1 {
        return Err(Error::Validation(format!(
            "{} frames but {} ground-truth boxes in {}",
            indices.len(),
            ground_truth.len(),
            dir.display()
        )));
    }
    let frames = (0..indices.len())
        .map(|i| Image::read(&frame_path(dir, i)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Sequence { frames, ground_truth })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Motion {
    /// Pixels per frame.
    ConstantVelocity { vx: f64, vy: f64 },
    /// Offset `amplitude · sin(2π t / period)` on each axis.
    Sinusoidal { ax: f64, ay: f64, period: f64 },
    /// Static between jumps; every `period` frames the target moves by
    /// `magnitude` pixels, cycling through +x, +y, −x, −y.
    Jump { period: usize, magnitude: f64 },
}

impl Motion {
    /// Offset of the target's top-left corner at frame `t` (0-based).
    pub fn offset(&self, t: usize) -> (f64, f64) {
        match *self {
            Motion::ConstantVelocity { vx, vy } => (vx * t as f64, vy * t as f64),
            Motion::Sinusoidal { ax, ay, period } => {
                let s = (2.0 * PI * t as f64 / period).sin();
                (ax * s, ay * s)
            }
            Motion::Jump { period, magnitude } => {
                const DIRS: [(f64, f64); 4] = [(1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0)];
                let jumps = t / period;
                let (mut x, mut y) = (0.0, 0.0);
                for k in 0..jumps {
                    let (dx, dy) = DIRS[k % 4];
                    x += dx * magnitude;
                    y += dy * magnitude;
                }
                (x, y)
            }
        }
    }
}

impl fmt::Display for Motion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Motion::ConstantVelocity { vx, vy } => write!(f, "constant-velocity {vx},{vy}"),
            Motion::Sinusoidal { ax, ay, period } => write!(f, "sinusoidal {ax},{ay},{period}"),
            Motion::Jump { period, magnitude } => write!(f, "jump {period},{magnitude}"),
        }
    }
}

fn parse_reals(s: &str, n: usize, what: &str) -> std::result::Result<Vec<f64>, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| format!("{what}: not a number `{}`", t.trim())))
        .collect::<std::result::Result<_, _>>()?;
    if v.len() != n {
        return Err(format!("{what}: expected {n} values, got {}", v.len()));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(format!("{what}: values must be finite"));
    }
    Ok(v)
}

impl FromStr for Motion {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (kind, args) = s.trim().split_once(char::is_whitespace).unwrap_or((s.trim(), ""));
        match kind {
            "constant-velocity" => {
                let v = parse_reals(args, 2, "constant-velocity")?;
                Ok(Motion::ConstantVelocity { vx: v[0], vy: v[1] })
            }
            "sinusoidal" => {
                let v = parse_reals(args, 3, "sinusoidal")?;
                if v[2] <= 0.0 {
                    return Err("sinusoidal: period must be positive".into());
                }
                Ok(Motion::Sinusoidal { ax: v[0], ay: v[1], period: v[2] })
            }
            "jump" => {
                let v = parse_reals(args, 2, "jump")?;
                if v[0] < 1.0 || v[0].fract() != 0.0 {
                    return Err("jump: period must be a positive integer".into());
                }
                Ok(Motion::Jump {
                    period: v[0] as usize,
                    magnitude: v[1],
                })
            }
            _ => Err(format!("unknown motion model `{kind}`")),
        }
    }
}

/// Description of a synthetic sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceSpec {
    pub frames: usize,
    /// `(width, height)` in pixels.
    pub extent: (usize, usize),
    pub target: BoundingBox,
    pub texture_seed: u64,
    pub motion: Motion,
    pub distractors: usize,
    /// Brightness multiplier at the first and last frame, linear in between.
    pub illumination_ramp: (f64, f64),
    pub background: u64,
}

const SPEC_KEYS: [&str; 8] = [
    "frames",
    "extent",
    "target",
    "texture_seed",
    "motion",
    "distractors",
    "illumination_ramp",
    "background",
];

impl SequenceSpec {
    /// Ground-truth box at frame `t`, before serialization.
    pub fn box_at(&self, t: usize) -> BoundingBox {
        let (dx, dy) = self.motion.offset(t);
        self.target.translated(dx, dy)
    }

    /// Every frame's target must stay at least 1 px inside the frame.
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(Error::Validation("a sequence needs at least one frame".into()));
        }
        if self.extent.0 < 8 || self.extent.1 < 8 {
            return Err(Error::Validation(format!("frame extent {:?} is too small", self.extent)));
        }
        self.target.validate().map_err(|e| Error::Validation(e.to_string()))?;
        let (a, b) = self.illumination_ramp;
        if !(a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite()) {
            return Err(Error::Validation("illumination multipliers must be positive".into()));
        }
        let (w, h) = (self.extent.0 as f64, self.extent.1 as f64);
        for t in 0..self.frames {
            let b = self.box_at(t);
            if b.x < 1.0 || b.y < 1.0 || b.right() > w - 1.0 || b.bottom() > h - 1.0 {
                return Err(Error::Validation(format!(
                    "target leaves the {}×{} frame at frame {}: {b}",
                    self.extent.0,
                    self.extent.1,
                    t + 1
                )));
            }
        }
        Ok(())
    }

    pub fn to_spec_string(&self) -> String {
        let t = &self.target;
        format!(
            "frames = {}\nextent = {},{}\ntarget = {},{},{},{}\ntexture_seed = {}\nmotion = {}\ndistractors = {}\nillumination_ramp = {},{}\nbackground = {}\n",
            self.frames,
            self.extent.0,
            self.extent.1,
            t.x,
            t.y,
            t.w,
            t.h,
            self.texture_seed,
            self.motion,
            self.distractors,
            self.illumination_ramp.0,
            self.illumination_ramp.1,
            self.background
        )
    }

    /// Parses `key = value` lines. `#` starts a comment. `frames`, `extent`,
    /// `target` and `motion` are required; unknown or repeated keys are
    /// rejected.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut seen: Vec<(&str, usize, String)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let err = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg,
            };
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| err("expected `key = value`".into()))?;
            let k = k.trim();
            let key = SPEC_KEYS
                .iter()
                .find(|&&s| s == k)
                .ok_or_else(|| err(format!("unknown key `{k}`")))?;
            if seen.iter().any(|(s, _, _)| s == key) {
                return Err(err(format!("duplicate key `{k}`")));
            }
            seen.push((key, i + 1, v.trim().to_string()));
        }
        let get = |key: &str| seen.iter().find(|(k, _, _)| *k == key);
        let field = |key: &str| -> Result<(usize, String)> {
            get(key)
                .map(|(_, l, v)| (*l, v.clone()))
                .ok_or_else(|| Error::Validation(format!("{}: missing key `{key}`", path.display())))
        };
        let perr = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let uint = |line: usize, v: &str| v.parse::<u64>().map_err(|_| perr(line, format!("not a non-negative integer: `{v}`")));

        let (l, v) = field("frames")?;
        let frames = uint(l, &v)? as usize;
        let (l, v) = field("extent")?;
        let e = parse_reals(&v, 2, "extent").map_err(|m| perr(l, m))?;
        if e.iter().any(|x| *x < 0.0 || x.fract() != 0.0) {
            return Err(perr(l, "extent must be whole pixels".into()));
        }
        let (l, v) = field("target")?;
        let t = parse_reals(&v, 4, "target").map_err(|m| perr(l, m))?;
        let (l, v) = field("motion")?;
        let motion = v.parse::<Motion>().map_err(|m| perr(l, m))?;
        let texture_seed = match get("texture_seed") {
            Some((_, l, v)) => uint(*l, v)?,
            None => 1,
        };
        let distractors = match get("distractors") {
            Some((_, l, v)) => uint(*l, v)? as usize,
            None => 0,
        };
        let illumination_ramp = match get("illumination_ramp") {
            Some((_, l, v)) => {
                let r = parse_reals(v, 2, "illumination_ramp").map_err(|m| perr(*l, m))?;
                (r[0], r[1])
            }
            None => (1.0, 1.0),
        };
        let background = match get("background") {
            Some((_, l, v)) => uint(*l, v)?,
            None => 0,
        };
        Ok(SequenceSpec {
            frames,
            extent: (e[0] as usize, e[1] as usize),
            target: BoundingBox {
                x: t[0],
                y: t[1],
                w: t[2],
                h: t[3],
            },
            texture_seed,
            motion,
            distractors,
            illumination_ramp,
            background,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        SequenceSpec::parse(&text, path)
    }
}

/// Stateless 64-bit mix (the SplitMix64 finalizer) used for textures.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn hash3(seed: u64, a: i64, b: i64) -> u64 {
    mix(mix(mix(seed) ^ a as u64) ^ (b as u64).rotate_left(32))
}

fn unit(h: u64) -> f64 {
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Checkerboard of two seeded colours with per-pixel noise, in texture
/// coordinates relative to the object's top-left corner.
#[derive(Clone, Copy, Debug)]
struct Texture {
    seed: u64,
    colors: [[f64; 3]; 2],
    cell: f64,
}

impl Texture {
    fn new(seed: u64) -> Self {
        let c = |k: u64| -> [f64; 3] { [0, 1, 2].map(|ch| unit(hash3(seed, k as i64, ch))) };
        let mut colors = [c(1), c(2)];
        // Keep the two squares clearly apart in brightness.
        for ch in 0..3 {
            colors[0][ch] = 0.55 + 0.45 * colors[0][ch];
            colors[1][ch] = 0.35 * colors[1][ch];
        }
        Texture {
            seed,
            colors,
            cell: 3.0 + (hash3(seed, 7, 7) % 4) as f64,
        }
    }

    fn at(&self, u: f64, v: f64) -> [f64; 3] {
        let (i, j) = ((u / self.cell).floor() as i64, (v / self.cell).floor() as i64);
        let base = self.colors[((i + j).rem_euclid(2)) as usize];
        let n = unit(hash3(self.seed ^ 0x5151, u.floor() as i64, v.floor() as i64)) - 0.5;
        base.map(|b| b + 0.15 * n)
    }
}

/// Smooth-ish background: value noise on a coarse lattice plus fine noise.
fn background_at(seed: u64, x: usize, y: usize) -> [f64; 3] {
    const CELL: f64 = 16.0;
    let (fx, fy) = (x as f64 / CELL, y as f64 / CELL);
    let (ix, iy) = (fx.floor() as i64, fy.floor() as i64);
    let (tx, ty) = (fx - fx.floor(), fy - fy.floor());
    let lattice = |a: i64, b: i64, ch: i64| unit(hash3(seed.wrapping_add(ch as u64), a, b));
    let fine = unit(hash3(seed ^ 0xabcd, x as i64, y as i64)) - 0.5;
    [0, 1, 2].map(|ch| {
        let v00 = lattice(ix, iy, ch);
        let v10 = lattice(ix + 1, iy, ch);
        let v01 = lattice(ix, iy + 1, ch);
        let v11 = lattice(ix + 1, iy + 1, ch);
        let v = (1.0 - ty) * ((1.0 - tx) * v00 + tx * v10) + ty * ((1.0 - tx) * v01 + tx * v11);
        0.25 + 0.4 * v + 0.1 * fine
    })
}

/// A distractor: same texture family, independent seed, bouncing at a
/// constant velocity.
#[derive(Clone, Copy, Debug)]
struct Distractor {
    texture: Texture,
    start: (f64, f64),
    size: (f64, f64),
    velocity: (f64, f64),
}

impl Distractor {
    fn position(&self, t: usize, extent: (usize, usize)) -> (f64, f64) {
        let bounce = |p0: f64, v: f64, lo: f64, hi: f64| {
            let span = (hi - lo).max(1e-9);
            let p = (p0 - lo + v * t as f64).rem_euclid(2.0 * span);
            lo + if p <= span { p } else { 2.0 * span - p }
        };
        (
            bounce(self.start.0, self.velocity.0, 0.0, extent.0 as f64 - self.size.0),
            bounce(self.start.1, self.velocity.1, 0.0, extent.1 as f64 - self.size.1),
        )
    }
}

fn quantize(b: &BoundingBox) -> BoundingBox {
    let q = |v: f64| format!("{v:.6}").parse::<f64>().expect("formatted real");
    BoundingBox {
        x: q(b.x),
        y: q(b.y),
        w: q(b.w),
        h: q(b.h),
    }
}

/// Renders the sequence in memory. The returned ground truth is exactly what
/// [`read_results`] recovers from the written file.
pub fn render(spec: &SequenceSpec, seed: u64) -> Result<Sequence> {
    spec.validate()?;
    let (w, h) = spec.extent;
    let target_tex = Texture::new(mix(spec.texture_seed ^ mix(seed)));
    let distractors: Vec<Distractor> = (0..spec.distractors)
        .map(|k| {
            let s = mix(seed ^ mix(spec.texture_seed.wrapping_add(1000 + k as u64)));
            let r = |i: i64| unit(hash3(s, i, 0));
            let size = (spec.target.w, spec.target.h);
            Distractor {
                texture: Texture::new(s),
                start: (r(1) * (w as f64 - size.0), r(2) * (h as f64 - size.1)),
                size,
                velocity: ((r(3) - 0.5) * 4.0, (r(4) - 0.5) * 4.0),
            }
        })
        .collect();
    let bg_seed = mix(spec.background ^ mix(seed.wrapping_add(17)));
    let background: Vec<[f64; 3]> = (0..w * h).map(|i| background_at(bg_seed, i % w, i / w)).collect();

    let mut frames = Vec::with_capacity(spec.frames);
    let mut truth = Vec::with_capacity(spec.frames);
    for t in 0..spec.frames {
        let gt = quantize(&spec.box_at(t));
        let gain = if spec.frames > 1 {
            let a = t as f64 / (spec.frames - 1) as f64;
            spec.illumination_ramp.0 + a * (spec.illumination_ramp.1 - spec.illumination_ramp.0)
        } else {
            spec.illumination_ramp.0
        };
        let objects: Vec<(BoundingBox, Texture)> = distractors
            .iter()
            .map(|d| {
                let (x, y) = d.position(t, spec.extent);
                (
                    BoundingBox {
                        x,
                        y,
                        w: d.size.0,
                        h: d.size.1,
                    },
                    d.texture,
                )
            })
            .chain(std::iter::once((gt, target_tex)))
            .collect();
        let img = Image::from_fn(w, h, |x, y| {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut c = background[y * w + x];
            // Later objects (the target last) are drawn on top.
            for (b, tex) in &objects {
                if px >= b.x && px < b.right() && py >= b.y && py < b.bottom() {
                    c = tex.at(px - b.x, py - b.y);
                }
            }
            c.map(|v| (v * gain * 255.0).round().clamp(0.0, 255.0) as u8)
        });
        frames.push(img);
        truth.push(gt);
    }
    Ok(Sequence {
        frames,
        ground_truth: truth,
    })
}

/// Renders and writes the sequence to `dir` (created if needed).
pub fn generate(spec: &SequenceSpec, seed: u64, dir: &Path) -> Result<Vec<BoundingBox>> {
    let seq = render(spec, seed)?;
    let frames_dir = dir.join("frames");
    fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
    for (i, f) in seq.frames.iter().enumerate() {
        f.write(&frame_path(dir, i))?;
    }
    let gt_path = dir.join("groundtruth.txt");
    write_results(&gt_path, &seq.ground_truth)?;
    let spec_path = dir.join("spec.txt");
    let mut f = fs::File::create(&spec_path).map_err(|e| Error::io(&spec_path, e))?;
    f.write_all(spec.to_spec_string().as_bytes())
        .map_err(|e| Error::io(&spec_path, e))?;
    Ok(seq.ground_truth)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(motion: Motion) -> SequenceSpec {
        SequenceSpec {
            frames: 12,
            extent: (120, 100),
            target: BoundingBox::new(10.0, 10.0, 20.0, 16.0).unwrap(),
            texture_seed: 3,
            motion,
            distractors: 1,
            illumination_ramp: (0.9, 1.1),
            background: 5,
        }
    }

    #[test]
    fn ppm_round_trip() {
        let img = Image::from_fn(5, 3, |x, y| [x as u8, y as u8, (x * y) as u8]);
        let back = Image::from_ppm(&img.to_ppm(), Path::new("mem")).unwrap();
        assert_eq!(back, img);
        let with_comment = b"P6\n# hi\n1 1\n255\n\x01\x02\x03";
        assert_eq!(Image::from_ppm(with_comment, Path::new("mem")).unwrap().data, vec![1, 2, 3]);
        assert!(Image::from_ppm(b"P6\n2 2\n255\n\x00", Path::new("mem")).is_err());
    }

    #[test]
    fn box_line_format() {
        let b = BoundingBox::new(1.0, 2.0, 3.0, 4.0).unwrap();
        assert_eq!(format_box(&b), "1.000000,2.000000,3.000000,4.000000");
        let p = parse_boxes("10.5,20,30,40\n", Path::new("gt")).unwrap();
        assert_eq!(p, vec![BoundingBox::new(10.5, 20.0, 30.0, 40.0).unwrap()]);
        assert!(parse_boxes("", Path::new("gt")).unwrap().is_empty());
    }

    #[test]
    fn malformed_line_is_named() {
        match parse_boxes("1,2,3,4\n1,2,3\n", Path::new("gt")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn kinematics() {
        let s = spec(Motion::ConstantVelocity { vx: 2.0, vy: 1.0 });
        for t in 0..12 {
            assert_eq!(s.box_at(t).x, 10.0 + 2.0 * t as f64);
            assert_eq!(s.box_at(t).y, 10.0 + t as f64);
        }
        let mut j = spec(Motion::Jump { period: 5, magnitude: 15.0 });
        j.target = BoundingBox::new(30.0, 30.0, 20.0, 16.0).unwrap();
        for t in 1..12 {
            let d = j.box_at(t).center_distance(&j.box_at(t - 1));
            let expected = if t % 5 == 0 { 15.0 } else { 0.0 };
            assert_eq!(d, expected, "frame {t}");
        }
    }

    #[test]
    fn exiting_target_rejected() {
        let s = spec(Motion::ConstantVelocity { vx: 20.0, vy: 0.0 });
        assert!(matches!(s.validate(), Err(Error::Validation(_))));
    }

    #[test]
    fn render_is_deterministic_and_seed_dependent() {
        let s = spec(Motion::Sinusoidal { ax: 5.0, ay: 3.0, period: 7.0 });
        let a = render(&s, 1).unwrap();
        let b = render(&s, 1).unwrap();
        let c = render(&s, 2).unwrap();
        assert_eq!(a.frames, b.frames);
        assert_ne!(a.frames, c.frames);
        assert_eq!(a.ground_truth, c.ground_truth);
    }

    #[test]
    fn spec_text_round_trip() {
        let s = spec(Motion::Jump { period: 4, magnitude: 12.5 });
        let back = SequenceSpec::parse(&s.to_spec_string(), Path::new("spec")).unwrap();
        assert_eq!(back, s);
        let err = SequenceSpec::parse("frames = 3\ncolour = red\n", Path::new("spec")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }

    proptest! {
        #[test]
        fn results_text_round_trips(v in proptest::collection::vec((-1e4..1e4f64, -1e4..1e4f64, 0.001..1e3f64, 0.001..1e3f64), 0..20)) {
            let boxes: Vec<BoundingBox> = v.iter().map(|&(x, y, w, h)| quantize(&BoundingBox { x, y, w, h })).collect();
            let text: String = boxes.iter().map(|b| format_box(b) + "\n").collect();
            let back = parse_boxes(&text, Path::new("mem")).unwrap();
            prop_assert_eq!(back, boxes);
        }
    }
}
