//! Procedural stand-in for a captured station.
//!
//! Every segment is a rectangular room with its own palette, wall stripe
//! pattern, floor and ceiling tiling, and up to three coloured "signage"
//! panels. Panoramas are rendered along a walk that visits each room in
//! turn; optional transition captures between rooms fall outside every
//! footprint. Pairs listed in `confusable_pairs` have the second room's
//! appearance pulled towards the first by `ambiguity` (1.0 makes them
//! indistinguishable).

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Program, SegmentTable, SpatialSegment, Trajectory, TrajectoryPose};
use crate::error::{Error, Result};
use crate::projection::EquirectPanorama;

const ROOM_W: f64 = 10.0;
const ROOM_H: f64 = 8.0;
const GAP: f64 = 2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    /// Number of segments (rooms).
    pub segments: usize,
    pub panos_per_segment: usize,
    /// Panorama width in pixels; height is half of it.
    pub pano_width: u32,
    pub floors: usize,
    pub ambiguity: f64,
    pub confusable_pairs: Vec<[u32; 2]>,
    /// Emit one capture between consecutive rooms, outside all footprints.
    pub transition_panos: bool,
    /// Amplitude of uniform per-pixel noise, in 8-bit levels.
    pub noise: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            segments: 12,
            panos_per_segment: 9,
            pano_width: 256,
            floors: 1,
            ambiguity: 0.0,
            confusable_pairs: vec![[0, 1]],
            transition_panos: true,
            noise: 6.0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.segments < 2 {
            return Err(Error::Config("synthetic station needs at least 2 segments".into()));
        }
        if self.panos_per_segment < 4 {
            return Err(Error::Config("need at least 4 panoramas per segment".into()));
        }
        if self.pano_width < 8 || self.pano_width % 2 != 0 {
            return Err(Error::Config("pano_width must be even and at least 8".into()));
        }
        if self.floors == 0 || self.floors > self.segments {
            return Err(Error::Config("floors must be in 1..=segments".into()));
        }
        if !(0.0..=1.0).contains(&self.ambiguity) {
            return Err(Error::Config("ambiguity must lie in [0, 1]".into()));
        }
        for &[a, b] in &self.confusable_pairs {
            if a == b || a as usize >= self.segments || b as usize >= self.segments {
                return Err(Error::Config(format!("invalid confusable pair ({a}, {b})")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Glyph {
    lon: f64,
    lat: f64,
    half_w: f64,
    half_h: f64,
    color: [f64; 3],
}

/// Appearance parameters of one room.
#[derive(Clone, Debug, PartialEq)]
pub struct RoomStyle {
    wall: [f64; 3],
    floor: [f64; 3],
    ceiling: [f64; 3],
    stripe_freq: f64,
    stripe_angle: f64,
    stripe_amp: f64,
    tile_deg: f64,
    glyphs: Vec<Glyph>,
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [(r + m) * 255.0, (g + m) * 255.0, (b + m) * 255.0]
}

fn lerp3(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

impl RoomStyle {
    fn random(index: usize, count: usize, rng: &mut ChaCha8Rng) -> Self {
        let hue = index as f64 * 360.0 / count as f64 + rng.random_range(-4.0..4.0);
        let n_glyphs = rng.random_range(0..=3);
        let glyphs = (0..n_glyphs)
            .map(|_| Glyph {
                lon: rng.random_range(0.0..360.0),
                lat: rng.random_range(-10.0..25.0),
                half_w: rng.random_range(6.0..14.0),
                half_h: rng.random_range(4.0..9.0),
                color: hsv(hue + 180.0 + rng.random_range(-40.0..40.0), 0.8, 0.95),
            })
            .collect();
        Self {
            wall: hsv(hue, rng.random_range(0.55..0.8), rng.random_range(0.6..0.85)),
            floor: hsv(hue + 25.0, 0.35, rng.random_range(0.3..0.45)),
            ceiling: hsv(hue - 25.0, 0.25, rng.random_range(0.8..0.95)),
            stripe_freq: rng.random_range(3..=12) as f64,
            stripe_angle: [0.0f64, 45.0, 90.0][rng.random_range(0..3)].to_radians(),
            stripe_amp: rng.random_range(0.12..0.3),
            tile_deg: rng.random_range(6.0..16.0),
            glyphs,
        }
    }

    fn blended_towards(&self, other: &RoomStyle, t: f64) -> RoomStyle {
        let mix = |a: f64, b: f64| a + (b - a) * t;
        RoomStyle {
            wall: lerp3(self.wall, other.wall, t),
            floor: lerp3(self.floor, other.floor, t),
            ceiling: lerp3(self.ceiling, other.ceiling, t),
            stripe_freq: mix(self.stripe_freq, other.stripe_freq),
            stripe_angle: mix(self.stripe_angle, other.stripe_angle),
            stripe_amp: mix(self.stripe_amp, other.stripe_amp),
            tile_deg: mix(self.tile_deg, other.tile_deg),
            glyphs: if t >= 0.5 { other.glyphs.clone() } else { self.glyphs.clone() },
        }
    }

    fn transition() -> Self {
        Self {
            wall: [128.0; 3],
            floor: [90.0; 3],
            ceiling: [200.0; 3],
            stripe_freq: 0.0,
            stripe_angle: 0.0,
            stripe_amp: 0.0,
            tile_deg: 10.0,
            glyphs: Vec::new(),
        }
    }

    /// Color seen along (lon, lat) in room coordinates.
    fn shade(&self, lon: f64, lat: f64) -> [f64; 3] {
        for g in &self.glyphs {
            let dlon = (lon - g.lon + 180.0).rem_euclid(360.0) - 180.0;
            if dlon.abs() <= g.half_w && (lat - g.lat).abs() <= g.half_h {
                return g.color;
            }
        }
        let checker = |period: f64| {
            let k = (lon / period).floor() as i64 + (lat / period).floor() as i64;
            if k.rem_euclid(2) == 0 {
                1.0
            } else {
                0.85
            }
        };
        if lat > 40.0 {
            let f = checker(self.tile_deg);
            self.ceiling.map(|c| c * f)
        } else if lat < -40.0 {
            let f = checker(self.tile_deg * 0.7);
            self.floor.map(|c| c * f)
        } else {
            let phase = self.stripe_angle.cos() * lon / 360.0 + self.stripe_angle.sin() * lat / 90.0;
            let s = (std::f64::consts::TAU * self.stripe_freq * phase).sin();
            let f = 1.0 - self.stripe_amp + self.stripe_amp * s;
            self.wall.map(|c| c * f)
        }
    }
}

/// A generated station: panoramas in capture order, the walk, and the
/// segment table.
#[derive(Clone, Debug)]
pub struct SynthStation {
    pub panoramas: Vec<EquirectPanorama>,
    pub trajectory: Trajectory,
    pub segments: SegmentTable,
}

fn room_rect(index_on_floor: usize, count_on_floor: usize) -> (f64, f64, usize) {
    let cols = (count_on_floor as f64).sqrt().ceil() as usize;
    let col = index_on_floor % cols;
    let row = index_on_floor / cols;
    (col as f64 * (ROOM_W + GAP), row as f64 * (ROOM_H + GAP), row)
}

fn render(style: &RoomStyle, width: u32, heading: f64, brightness: f64, noise: f64, rng: &mut ChaCha8Rng) -> RgbImage {
    let height = width / 2;
    RgbImage::from_fn(width, height, |x, y| {
        let lon = (x as f64 + 0.5) / width as f64 * 360.0 - 180.0;
        let lat = 90.0 - (y as f64 + 0.5) / height as f64 * 180.0;
        let c = style.shade((lon + heading).rem_euclid(360.0), lat);
        let mut px = [0u8; 3];
        for ch in 0..3 {
            let n = if noise > 0.0 { rng.random_range(-noise..=noise) } else { 0.0 };
            px[ch] = (c[ch] * brightness + n).round().clamp(0.0, 255.0) as u8;
        }
        Rgb(px)
    })
}

/// Generates the station deterministically from `seed`.
pub fn synth_station(spec: &SynthSpec, seed: u64) -> Result<SynthStation> {
    spec.validate()?;
    let s = spec.segments;
    let mut style_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut styles: Vec<RoomStyle> = (0..s).map(|i| RoomStyle::random(i, s, &mut style_rng)).collect();
    for &[a, b] in &spec.confusable_pairs {
        styles[b as usize] = styles[b as usize].blended_towards(&styles[a as usize], spec.ambiguity);
    }

    let floor_of = |i: usize| (i * spec.floors / s) as i32;
    let mut segments = Vec::with_capacity(s);
    let mut rects = Vec::with_capacity(s);
    for i in 0..s {
        let floor = floor_of(i);
        let on_floor: Vec<usize> = (0..s).filter(|&j| floor_of(j) == floor).collect();
        let k = on_floor.iter().position(|&j| j == i).unwrap();
        let (x0, y0, row) = room_rect(k, on_floor.len());
        rects.push((x0, y0, floor));
        segments.push(SpatialSegment {
            id: i as u32,
            name: format!("room-{i:02}"),
            program: Program::ALL[i % 3],
            floor,
            hall: Some(format!("hall-{}-{}", floor, row + 1)),
            polygon: vec![[x0, y0], [x0 + ROOM_W, y0], [x0 + ROOM_W, y0 + ROOM_H], [x0, y0 + ROOM_H]],
        });
    }
    let table = SegmentTable::new(segments)?;

    let mut walk_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5EED_0001));
    let mut pixel_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5EED_0002));
    let mut poses = Vec::new();
    let mut panoramas = Vec::new();
    let mut t = 0.0;
    let mut capture = |pose: TrajectoryPose, style: &RoomStyle, walk_rng: &mut ChaCha8Rng| -> Result<()> {
        let heading = walk_rng.random_range(0.0..360.0);
        let brightness = walk_rng.random_range(0.9..1.1);
        let img = render(style, spec.pano_width, heading, brightness, spec.noise, &mut pixel_rng);
        let id = format!("pano_{:05}", panoramas.len());
        // Camera clock runs a quarter second behind the pose clock.
        panoramas.push(EquirectPanorama::new(id, img, Some(pose.timestamp + 0.25))?);
        poses.push(pose);
        Ok(())
    };
    for (i, style) in styles.iter().enumerate() {
        let (x0, y0, floor) = rects[i];
        for _ in 0..spec.panos_per_segment {
            let pose = TrajectoryPose {
                timestamp: t,
                x: walk_rng.random_range(x0 + 1.0..x0 + ROOM_W - 1.0),
                y: walk_rng.random_range(y0 + 1.0..y0 + ROOM_H - 1.0),
                floor,
            };
            capture(pose, style, &mut walk_rng)?;
            t += 1.0;
        }
        if spec.transition_panos && i + 1 < s {
            let pose = TrajectoryPose {
                timestamp: t,
                x: x0 - GAP / 2.0,
                y: y0 + ROOM_H / 2.0,
                floor,
            };
            capture(pose, &RoomStyle::transition(), &mut walk_rng)?;
            t += 1.0;
        }
    }
    Ok(SynthStation {
        panoramas,
        trajectory: Trajectory::new(poses)?,
        segments: table,
    })
}
