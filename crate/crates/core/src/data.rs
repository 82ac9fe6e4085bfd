//! Synthetic moving-sprite sequences and all frame/sequence file I/O.
//!
//! Sprites are rasterized with hard integer edges and advance by integer
//! velocities, so regenerating a dataset from its config and seed is
//! bit-identical across machines. Sequence files use the little-endian
//! `SEQ1` layout: magic, u32 T/C/H/W, raw f32 frames, u64 seed, u32 config
//! hash.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::{key_str, CounterRng};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"SEQ1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpriteKinds {
    Rectangle,
    Disc,
    Both,
}

impl std::str::FromStr for SpriteKinds {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rect" => Ok(SpriteKinds::Rectangle),
            "disc" => Ok(SpriteKinds::Disc),
            "both" => Ok(SpriteKinds::Both),
            other => Err(Error::InvalidArgument(format!("unknown sprite kind '{other}'"))),
        }
    }
}

impl std::fmt::Display for SpriteKinds {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SpriteKinds::Rectangle => "rect",
            SpriteKinds::Disc => "disc",
            SpriteKinds::Both => "both",
        })
    }
}

/// Generator settings for one sprite world.
#[derive(Clone, Debug)]
pub struct SpriteWorldConfig {
    pub frame_h: usize,
    pub frame_w: usize,
    pub channels: usize,
    pub sprites_min: usize,
    pub sprites_max: usize,
    pub kinds: SpriteKinds,
    /// Integer speeds in pixels per frame.
    pub speed_min: i64,
    pub speed_max: i64,
    /// Probability per sprite per frame of picking a fresh direction.
    pub dir_switch_prob: f64,
    pub bounce: bool,
    /// When set, every sprite's direction branches into one of two fixed
    /// alternatives at `branch_step`.
    pub bimodal: bool,
    pub branch_step: usize,
    pub seq_len: usize,
    pub seed: u64,
}

impl SpriteWorldConfig {
    pub fn default_world(seed: u64) -> Self {
        SpriteWorldConfig {
            frame_h: 64,
            frame_w: 64,
            channels: 1,
            sprites_min: 2,
            sprites_max: 3,
            kinds: SpriteKinds::Both,
            speed_min: 1,
            speed_max: 2,
            dir_switch_prob: 0.0,
            bounce: true,
            bimodal: false,
            branch_step: 5,
            seq_len: 20,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frame_h < 8 || self.frame_w < 8 {
            return Err(Error::InvalidArgument("frames must be at least 8x8".into()));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::InvalidArgument(format!("channels must be 1 or 3, got {}", self.channels)));
        }
        if self.sprites_min == 0 || self.sprites_min > self.sprites_max {
            return Err(Error::InvalidArgument("sprite count range must satisfy 1 <= min <= max".into()));
        }
        if self.speed_min < 0 || self.speed_min > self.speed_max {
            return Err(Error::InvalidArgument("speed range must satisfy 0 <= min <= max".into()));
        }
        let limit = (self.frame_h.min(self.frame_w) / 4) as i64;
        if self.speed_max >= limit {
            return Err(Error::InvalidArgument(format!(
                "speed_max {} too fast for trackable motion (must be < {limit})",
                self.speed_max
            )));
        }
        if self.seq_len < 2 {
            return Err(Error::InvalidArgument("seq_len must be >= 2".into()));
        }
        if !(0.0..=1.0).contains(&self.dir_switch_prob) {
            return Err(Error::InvalidArgument("dir_switch_prob must be in [0,1]".into()));
        }
        Ok(())
    }

    /// Stable hash over the generator-relevant fields, stored in sequence
    /// files so a dataset can be matched to its config.
    pub fn hash(&self) -> u32 {
        let s = format!(
            "{}x{}x{} n{}..{} {} v{}..{} p{} b{} bi{} bs{} T{} s{}",
            self.frame_h,
            self.frame_w,
            self.channels,
            self.sprites_min,
            self.sprites_max,
            self.kinds,
            self.speed_min,
            self.speed_max,
            self.dir_switch_prob,
            self.bounce,
            self.bimodal,
            self.branch_step,
            self.seq_len,
            self.seed
        );
        (key_str(&s) & 0xFFFF_FFFF) as u32
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpriteShape {
    Rect { w: i64, h: i64 },
    Disc { r: i64 },
}

/// One moving sprite: integer geometry, integer velocity, per-channel color.
#[derive(Clone, Copy, Debug)]
pub struct Sprite {
    pub shape: SpriteShape,
    /// Top-left corner of the bounding box.
    pub x: i64,
    pub y: i64,
    pub vx: i64,
    pub vy: i64,
    pub color: [f32; 3],
}

impl Sprite {
    fn bbox(&self) -> (i64, i64, i64, i64) {
        match self.shape {
            SpriteShape::Rect { w, h } => (self.x, self.y, w, h),
            SpriteShape::Disc { r } => (self.x, self.y, 2 * r + 1, 2 * r + 1),
        }
    }
}

fn overlaps(a: &Sprite, b: &Sprite) -> bool {
    let (ax, ay, aw, ah) = a.bbox();
    let (bx, by, bw, bh) = b.bbox();
    ax < bx + bw && bx < ax + aw && ay < by + bh && by < ay + ah
}

const DIRECTIONS: [(i64, i64); 8] = [(1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1), (-1, 1), (-1, -1)];

/// A full sequence of frames in `[0,1]` plus its generation identity.
#[derive(Clone, Debug)]
pub struct Sequence {
    /// `[T,C,H,W]`
    pub frames: Tensor<f32>,
    pub seed: u64,
    pub config_hash: u32,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.frames.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// One frame as `[C,H,W]`.
    pub fn frame(&self, t: usize) -> Tensor<f32> {
        let (c, h, w) = (self.frames.dim(1), self.frames.dim(2), self.frames.dim(3));
        let plane = c * h * w;
        Tensor::new(vec![c, h, w], self.frames.data()[t * plane..(t + 1) * plane].to_vec()).expect("frame slice")
    }
}

fn build_sprites(config: &SpriteWorldConfig, sequence_seed: u64) -> Result<Vec<Sprite>> {
    let keyed = |purpose: &str| CounterRng::keyed(&[config.seed, sequence_seed, key_str(purpose)]);
    let mut count_rng = keyed("count");
    let mut kind_rng = keyed("kind");
    let mut size_rng = keyed("size");
    let mut place_rng = keyed("place");
    let mut vel_rng = keyed("vel");
    let mut color_rng = keyed("color");

    let n = count_rng.range_i64(config.sprites_min as i64, config.sprites_max as i64) as usize;
    let (h, w) = (config.frame_h as i64, config.frame_w as i64);
    let mut sprites: Vec<Sprite> = Vec::with_capacity(n);
    for _ in 0..n {
        let want_rect = match config.kinds {
            SpriteKinds::Rectangle => true,
            SpriteKinds::Disc => false,
            SpriteKinds::Both => kind_rng.chance(0.5),
        };
        let shape = if want_rect {
            SpriteShape::Rect {
                w: size_rng.range_i64((w / 8).max(2), (w / 4).max(3)),
                h: size_rng.range_i64((h / 8).max(2), (h / 4).max(3)),
            }
        } else {
            SpriteShape::Disc { r: size_rng.range_i64((h / 10).max(2), (h / 6).max(3)) }
        };
        let color = if config.channels == 1 {
            let g = (64 + color_rng.below(192)) as f32 / 255.0;
            [g, g, g]
        } else {
            [
                (64 + color_rng.below(192)) as f32 / 255.0,
                (64 + color_rng.below(192)) as f32 / 255.0,
                (64 + color_rng.below(192)) as f32 / 255.0,
            ]
        };
        let (dvx, dvy) = DIRECTIONS[vel_rng.below(8)];
        let speed = vel_rng.range_i64(config.speed_min, config.speed_max);

        let mut placed = None;
        for _ in 0..100 {
            let (bw, bh) = match shape {
                SpriteShape::Rect { w, h } => (w, h),
                SpriteShape::Disc { r } => (2 * r + 1, 2 * r + 1),
            };
            let candidate = Sprite {
                shape,
                x: place_rng.range_i64(0, (w - bw).max(0)),
                y: place_rng.range_i64(0, (h - bh).max(0)),
                vx: dvx * speed,
                vy: dvy * speed,
                color,
            };
            if sprites.iter().all(|s| !overlaps(s, &candidate)) {
                placed = Some(candidate);
                break;
            }
        }
        sprites.push(placed.ok_or_else(|| {
            Error::InvalidArgument("sprite placement infeasible after 100 retries".into())
        })?);
    }
    Ok(sprites)
}

fn rasterize(config: &SpriteWorldConfig, sprites: &[Sprite], out: &mut [f32]) {
    let (h, w, c) = (config.frame_h as i64, config.frame_w as i64, config.channels);
    let plane = (h * w) as usize;
    // Painter's order: later sprites occlude earlier ones.
    for s in sprites {
        match s.shape {
            SpriteShape::Rect { w: sw, h: sh } => {
                for y in s.y.max(0)..(s.y + sh).min(h) {
                    for x in s.x.max(0)..(s.x + sw).min(w) {
                        let p = (y * w + x) as usize;
                        for ci in 0..c {
                            out[ci * plane + p] = s.color[ci];
                        }
                    }
                }
            }
            SpriteShape::Disc { r } => {
                let (cx, cy) = (s.x + r, s.y + r);
                for y in (cy - r).max(0)..=(cy + r).min(h - 1) {
                    for x in (cx - r).max(0)..=(cx + r).min(w - 1) {
                        let (dx, dy) = (x - cx, y - cy);
                        if dx * dx + dy * dy <= r * r {
                            let p = (y * w + x) as usize;
                            for ci in 0..c {
                                out[ci * plane + p] = s.color[ci];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn rotate90(vx: i64, vy: i64, clockwise: bool) -> (i64, i64) {
    if clockwise {
        (-vy, vx)
    } else {
        (vy, -vx)
    }
}

/// Advances and rasterizes a given sprite set. `forced_branch` overrides the
/// seeded bimodal direction choice; tests use it to realize both futures of
/// one prefix.
pub fn simulate_sprites(
    config: &SpriteWorldConfig,
    mut sprites: Vec<Sprite>,
    sequence_seed: u64,
    forced_branch: Option<bool>,
) -> Result<Sequence> {
    config.validate()?;
    let keyed = |purpose: &str| CounterRng::keyed(&[config.seed, sequence_seed, key_str(purpose)]);
    let mut switch_rng = keyed("switch");
    let mut branch_rng = keyed("branch");
    let branch_clockwise = forced_branch.unwrap_or_else(|| branch_rng.chance(0.5));

    let (t_len, c) = (config.seq_len, config.channels);
    let (h, w) = (config.frame_h as i64, config.frame_w as i64);
    let plane = (h * w) as usize;
    let mut data = vec![0.0f32; t_len * c * plane];

    for t in 0..t_len {
        rasterize(config, &sprites, &mut data[t * c * plane..(t + 1) * c * plane]);
        // Advance to the next frame's state.
        for s in sprites.iter_mut() {
            if config.bimodal && t == config.branch_step {
                let (vx, vy) = rotate90(s.vx, s.vy, branch_clockwise);
                s.vx = vx;
                s.vy = vy;
            }
            if config.dir_switch_prob > 0.0 && switch_rng.chance(config.dir_switch_prob) {
                let speed = s.vx.abs().max(s.vy.abs()).max(1);
                let (dx, dy) = DIRECTIONS[switch_rng.below(8)];
                s.vx = dx * speed;
                s.vy = dy * speed;
            }
            let (_, _, bw, bh) = s.bbox();
            if config.bounce {
                if s.x + s.vx < 0 || s.x + s.vx + bw > w {
                    s.vx = -s.vx;
                }
                if s.y + s.vy < 0 || s.y + s.vy + bh > h {
                    s.vy = -s.vy;
                }
            }
            s.x += s.vx;
            s.y += s.vy;
        }
    }
    Ok(Sequence {
        frames: Tensor::new(vec![t_len, c, config.frame_h, config.frame_w], data)?,
        seed: sequence_seed,
        config_hash: config.hash(),
    })
}

/// Deterministic sequence generation: a pure function of (config, seed).
pub fn generate_sequence(config: &SpriteWorldConfig, sequence_seed: u64) -> Result<Sequence> {
    generate_sequence_branched(config, sequence_seed, None)
}

/// Like [`generate_sequence`] but with the bimodal branch direction forced.
pub fn generate_sequence_branched(
    config: &SpriteWorldConfig,
    sequence_seed: u64,
    forced_branch: Option<bool>,
) -> Result<Sequence> {
    config.validate()?;
    let sprites = build_sprites(config, sequence_seed)?;
    simulate_sprites(config, sprites, sequence_seed, forced_branch)
}

// ── Sequence file I/O ───────────────────────────────────────────────

pub fn write_sequence(seq: &Sequence, path: &Path) -> Result<()> {
    let f = &seq.frames;
    if f.rank() != 4 {
        return Err(Error::ShapeMismatch("sequence frames must be [T,C,H,W]".into()));
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(MAGIC)?;
    for d in 0..4 {
        out.write_all(&(f.dim(d) as u32).to_le_bytes())?;
    }
    for v in f.data() {
        out.write_all(&v.to_le_bytes())?;
    }
    out.write_all(&seq.seed.to_le_bytes())?;
    out.write_all(&seq.config_hash.to_le_bytes())?;
    out.flush()?;
    Ok(())
}

pub fn read_sequence(path: &Path) -> Result<Sequence> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut f, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("not a sequence file (bad magic {magic:?})")));
    }
    let t = read_u32(&mut f, "frame count")? as usize;
    let c = read_u32(&mut f, "channels")? as usize;
    let h = read_u32(&mut f, "height")? as usize;
    let w = read_u32(&mut f, "width")? as usize;
    if t == 0 {
        return Err(Error::Format("sequence must contain at least one frame".into()));
    }
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::Format(format!("bad sequence dimensions {t}x{c}x{h}x{w}")));
    }
    let numel = t * c * h * w;
    let mut data = Vec::with_capacity(numel);
    let mut buf = [0u8; 4];
    for _ in 0..numel {
        read_exact(&mut f, &mut buf, "frame data")?;
        data.push(f32::from_le_bytes(buf));
    }
    let mut seed_buf = [0u8; 8];
    read_exact(&mut f, &mut seed_buf, "seed")?;
    read_exact(&mut f, &mut buf, "config hash")?;
    Ok(Sequence {
        frames: Tensor::new(vec![t, c, h, w], data)?,
        seed: u64::from_le_bytes(seed_buf),
        config_hash: u32::from_le_bytes(buf),
    })
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Format(format!("unexpected end of sequence file reading {what}")))
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf, what)?;
    Ok(u32::from_le_bytes(buf))
}

// ── Image export ────────────────────────────────────────────────────

fn to_byte(v: f32) -> (u8, bool) {
    let clamped = v.clamp(0.0, 1.0);
    let warned = clamped != v;
    ((clamped * 255.0 + 0.5).floor() as u8, warned)
}

/// Writes a `[1,H,W]` frame as binary PGM or a `[3,H,W]` frame as binary
/// PPM, maxval 255, rounding half-up. Returns the number of out-of-range
/// values that had to be clamped.
pub fn export_pgm(frame: &Tensor<f32>, path: &Path) -> Result<usize> {
    if frame.rank() != 3 || (frame.dim(0) != 1 && frame.dim(0) != 3) {
        return Err(Error::ShapeMismatch(format!(
            "export expects [1,H,W] or [3,H,W], got {:?}",
            frame.shape()
        )));
    }
    let (c, h, w) = (frame.dim(0), frame.dim(1), frame.dim(2));
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut warnings = 0usize;
    if c == 1 {
        write!(out, "P5\n{w} {h}\n255\n")?;
        for &v in frame.data() {
            let (b, warned) = to_byte(v);
            warnings += warned as usize;
            out.write_all(&[b])?;
        }
    } else {
        write!(out, "P6\n{w} {h}\n255\n")?;
        let plane = h * w;
        for p in 0..plane {
            for ch in 0..3 {
                let (b, warned) = to_byte(frame.data()[ch * plane + p]);
                warnings += warned as usize;
                out.write_all(&[b])?;
            }
        }
    }
    out.flush()?;
    Ok(warnings)
}

/// Joins frames horizontally into one tiled image and exports it.
pub fn export_strip(frames: &[Tensor<f32>], path: &Path) -> Result<usize> {
    if frames.is_empty() {
        return Err(Error::InvalidArgument("empty strip".into()));
    }
    let (c, h, w) = (frames[0].dim(0), frames[0].dim(1), frames[0].dim(2));
    let n = frames.len();
    let mut data = vec![0.0f32; c * h * w * n];
    for (i, f) in frames.iter().enumerate() {
        if f.shape() != frames[0].shape() {
            return Err(Error::ShapeMismatch("strip frames must share one shape".into()));
        }
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    data[(ci * h + y) * (w * n) + i * w + x] = f.data()[(ci * h + y) * w + x];
                }
            }
        }
    }
    export_pgm(&Tensor::new(vec![c, h, w * n], data)?, path)
}

// ── Dataset manifest ────────────────────────────────────────────────

/// One `split<TAB>filename` line per sequence.
pub fn write_manifest(dir: &Path, entries: &[(String, String)]) -> Result<()> {
    let mut out = String::new();
    for (split, name) in entries {
        out.push_str(split);
        out.push('\t');
        out.push_str(name);
        out.push('\n');
    }
    std::fs::write(dir.join("manifest.txt"), out)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(dir.join("manifest.txt"))
        .map_err(|_| Error::Format(format!("no manifest.txt in {}", dir.display())))?;
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (split, name) = line
            .split_once('\t')
            .ok_or_else(|| Error::Format(format!("manifest line {} is not 'split<TAB>file'", i + 1)))?;
        entries.push((split.to_string(), name.to_string()));
    }
    Ok(entries)
}
