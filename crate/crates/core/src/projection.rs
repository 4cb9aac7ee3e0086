//! Equirectangular panorama resampling.
//!
//! A panorama maps longitude linearly to columns and latitude linearly to
//! rows: longitude 0 sits at `x = width / 2`, longitude grows to the right and
//! wraps at the image edges; latitude +90 is the top row. Perspective views
//! are produced in two stages: every output pixel is turned into a ray
//! through a pinhole camera oriented by (yaw, pitch), the ray is converted
//! to polar coordinates, and the panorama is sampled bilinearly there.
//!
//! World frame: `x` points at longitude 0 on the horizon, `y` at longitude
//! +90 and `z` straight up.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default output side length of a perspective crop.
pub const DEFAULT_CROP_SIZE: u32 = 224;
/// Default horizontal and vertical field of view of a crop, in degrees.
pub const DEFAULT_FOV: f64 = 90.0;

/// A full 360 x 180 degree spherical image.
#[derive(Clone, Debug, PartialEq)]
pub struct EquirectPanorama {
    id: String,
    timestamp: Option<f64>,
    image: RgbImage,
}

impl EquirectPanorama {
    pub fn new(id: impl Into<String>, image: RgbImage, timestamp: Option<f64>) -> Result<Self> {
        let (w, h) = image.dimensions();
        if w < 2 || h < 1 {
            return Err(Error::Dimension(format!(
                "panorama must be at least 2x1 pixels, got {w}x{h}"
            )));
        }
        if w != 2 * h {
            return Err(Error::Dimension(format!(
                "equirectangular panorama must be 2:1, got {w}x{h}"
            )));
        }
        Ok(Self {
            id: id.into(),
            timestamp,
            image,
        })
    }

    /// Reads a PNG or JPEG panorama from disk.
    pub fn load(path: &Path, id: impl Into<String>, timestamp: Option<f64>) -> Result<Self> {
        let image = image::open(path)?.to_rgb8();
        Self::new(id, image, timestamp)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn timestamp(&self) -> Option<f64> {
        self.timestamp
    }

    pub fn image(&self) -> &RgbImage {
        &self.image
    }

    pub fn width(&self) -> u32 {
        self.image.width()
    }

    pub fn height(&self) -> u32 {
        self.image.height()
    }

    /// Returns the panorama with its columns rotated so that
    /// `out[x] = self[(x + shift) mod width]`. Cropping the result at yaw
    /// `t` looks at the same scene as cropping `self` at
    /// `t + shift * 360 / width`.
    pub fn rotate_columns(&self, shift: i64) -> Self {
        let (w, h) = self.image.dimensions();
        let image = RgbImage::from_fn(w, h, |x, y| {
            let src = (x as i64 + shift).rem_euclid(w as i64) as u32;
            *self.image.get_pixel(src, y)
        });
        Self {
            id: self.id.clone(),
            timestamp: self.timestamp,
            image,
        }
    }

    /// Bilinear sample at a longitude/latitude in degrees. Longitude wraps,
    /// latitude is clamped to the poles.
    pub fn sample(&self, lon_deg: f64, lat_deg: f64) -> [f64; 3] {
        let w = self.image.width() as i64;
        let h = self.image.height() as i64;
        let x = (lon_deg / 360.0 + 0.5) * w as f64 - 0.5;
        let y = (0.5 - lat_deg / 180.0) * h as f64 - 0.5;
        let x0 = x.floor();
        let y0 = y.floor();
        let tx = x - x0;
        let ty = y - y0;
        let x0 = x0 as i64;
        let y0 = y0 as i64;
        let col = |c: i64| c.rem_euclid(w) as u32;
        let row = |r: i64| r.clamp(0, h - 1) as u32;
        let px = |c: i64, r: i64| self.image.get_pixel(col(c), row(r)).0;
        let p00 = px(x0, y0);
        let p10 = px(x0 + 1, y0);
        let p01 = px(x0, y0 + 1);
        let p11 = px(x0 + 1, y0 + 1);
        let mut out = [0.0; 3];
        for (ch, o) in out.iter_mut().enumerate() {
            let top = p00[ch] as f64 * (1.0 - tx) + p10[ch] as f64 * tx;
            let bottom = p01[ch] as f64 * (1.0 - tx) + p11[ch] as f64 * tx;
            *o = top * (1.0 - ty) + bottom * ty;
        }
        out
    }
}

/// Parameters of one perspective crop.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropSpec {
    /// Heading in degrees, `[0, 360)`.
    pub yaw: f64,
    /// Elevation in degrees, `[-90, 90]`.
    pub pitch: f64,
    /// Field of view in degrees, `(0, 180)`.
    pub fov: f64,
    /// Side length of the square output.
    pub out_size: u32,
}

impl CropSpec {
    /// Builds a spec, wrapping the yaw into `[0, 360)`.
    pub fn new(yaw: f64, pitch: f64, fov: f64, out_size: u32) -> Result<Self> {
        let spec = Self {
            yaw: yaw.rem_euclid(360.0),
            pitch,
            fov,
            out_size,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.yaw.is_finite() || !(0.0..360.0).contains(&self.yaw) {
            return Err(Error::Config(format!("yaw {} outside [0, 360)", self.yaw)));
        }
        if !(-90.0..=90.0).contains(&self.pitch) {
            return Err(Error::Config(format!("pitch {} outside [-90, 90]", self.pitch)));
        }
        if !(self.fov > 0.0 && self.fov < 180.0) {
            return Err(Error::Config(format!("fov {} outside (0, 180)", self.fov)));
        }
        if self.out_size == 0 {
            return Err(Error::Config("out_size must be positive".into()));
        }
        Ok(())
    }
}

/// Orthonormal camera frame for a (yaw, pitch) heading.
#[derive(Clone, Copy, Debug)]
struct CameraFrame {
    forward: [f64; 3],
    right: [f64; 3],
    up: [f64; 3],
}

impl CameraFrame {
    fn new(yaw_deg: f64, pitch_deg: f64) -> Self {
        let (sy, cy) = yaw_deg.to_radians().sin_cos();
        let (sp, cp) = pitch_deg.to_radians().sin_cos();
        Self {
            forward: [cp * cy, cp * sy, sp],
            right: [-sy, cy, 0.0],
            up: [-sp * cy, -sp * sy, cp],
        }
    }

    /// Ray through image-plane offset (`u` right, `v` up) at focal length `f`.
    fn ray(&self, u: f64, v: f64, f: f64) -> [f64; 3] {
        let mut d = [0.0; 3];
        for (i, di) in d.iter_mut().enumerate() {
            *di = f * self.forward[i] + u * self.right[i] + v * self.up[i];
        }
        d
    }
}

/// Longitude and latitude (degrees) of a direction vector.
pub fn direction_to_lonlat(d: [f64; 3]) -> (f64, f64) {
    let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    let lon = d[1].atan2(d[0]).to_degrees();
    let lat = (d[2] / norm).clamp(-1.0, 1.0).asin().to_degrees();
    (lon, lat)
}

/// Unit direction vector of a longitude/latitude pair (degrees).
pub fn lonlat_to_direction(lon_deg: f64, lat_deg: f64) -> [f64; 3] {
    let (sl, cl) = lon_deg.to_radians().sin_cos();
    let (sp, cp) = lat_deg.to_radians().sin_cos();
    [cp * cl, cp * sl, sp]
}

/// Renders a pinhole view of the panorama.
pub fn crop_perspective(pano: &EquirectPanorama, spec: &CropSpec) -> Result<RgbImage> {
    if pano.width() < 2 || pano.height() < 1 {
        return Err(Error::Dimension(format!(
            "degenerate panorama {}x{}",
            pano.width(),
            pano.height()
        )));
    }
    spec.validate()?;
    let n = spec.out_size;
    let half = n as f64 / 2.0;
    let focal = half / (spec.fov.to_radians() / 2.0).tan();
    let frame = CameraFrame::new(spec.yaw, spec.pitch);
    let mut out = RgbImage::new(n, n);
    for (i, j, px) in out.enumerate_pixels_mut() {
        let u = i as f64 + 0.5 - half;
        let v = half - (j as f64 + 0.5);
        let (lon, lat) = direction_to_lonlat(frame.ray(u, v, focal));
        let s = pano.sample(lon, lat);
        *px = Rgb([quantize(s[0]), quantize(s[1]), quantize(s[2])]);
    }
    Ok(out)
}

fn quantize(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// One face of a cube map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CubeFace {
    Front,
    Back,
    Left,
    Right,
    Up,
    Down,
}

impl CubeFace {
    pub const ALL: [CubeFace; 6] = [
        CubeFace::Front,
        CubeFace::Back,
        CubeFace::Left,
        CubeFace::Right,
        CubeFace::Up,
        CubeFace::Down,
    ];

    /// Heading of the face center as (yaw, pitch) in degrees.
    pub fn heading(self) -> (f64, f64) {
        match self {
            CubeFace::Front => (0.0, 0.0),
            CubeFace::Right => (90.0, 0.0),
            CubeFace::Back => (180.0, 0.0),
            CubeFace::Left => (270.0, 0.0),
            CubeFace::Up => (0.0, 90.0),
            CubeFace::Down => (0.0, -90.0),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CubeFace::Front => "front",
            CubeFace::Back => "back",
            CubeFace::Left => "left",
            CubeFace::Right => "right",
            CubeFace::Up => "up",
            CubeFace::Down => "down",
        }
    }
}

/// Six 90-degree views sharing one side length.
#[derive(Clone, Debug)]
pub struct CubeFaces {
    face_size: u32,
    faces: [RgbImage; 6],
}

impl CubeFaces {
    pub fn face_size(&self) -> u32 {
        self.face_size
    }

    pub fn face(&self, face: CubeFace) -> &RgbImage {
        let idx = CubeFace::ALL.iter().position(|f| *f == face).unwrap();
        &self.faces[idx]
    }

    pub fn iter(&self) -> impl Iterator<Item = (CubeFace, &RgbImage)> {
        CubeFace::ALL.iter().copied().zip(self.faces.iter())
    }
}

/// Re-renders the panorama as a cube map. Each face is the 90-degree
/// perspective view along its axis.
pub fn equirect_to_cube(pano: &EquirectPanorama, face_size: u32) -> Result<CubeFaces> {
    if face_size == 0 {
        return Err(Error::Config("face_size must be positive".into()));
    }
    let render = |face: CubeFace| {
        let (yaw, pitch) = face.heading();
        crop_perspective(pano, &CropSpec::new(yaw, pitch, 90.0, face_size)?)
    };
    let faces = [
        render(CubeFace::Front)?,
        render(CubeFace::Back)?,
        render(CubeFace::Left)?,
        render(CubeFace::Right)?,
        render(CubeFace::Up)?,
        render(CubeFace::Down)?,
    ];
    Ok(CubeFaces { face_size, faces })
}

/// Named crop layouts.
///
/// `A16` is eight headings 45 degrees apart at pitches 0 and 15; `B24` is
/// the same eight headings at pitches -30, 0 and +30.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum CropPreset {
    #[serde(rename = "A")]
    A16,
    #[default]
    #[serde(rename = "B")]
    B24,
}

impl CropPreset {
    pub fn pitches(self) -> &'static [f64] {
        match self {
            CropPreset::A16 => &[0.0, 15.0],
            CropPreset::B24 => &[-30.0, 0.0, 30.0],
        }
    }

    pub fn yaws() -> impl Iterator<Item = f64> {
        (0..8).map(|k| k as f64 * 45.0)
    }

    pub fn len(self) -> usize {
        8 * self.pitches().len()
    }

    pub fn is_empty(self) -> bool {
        false
    }

    pub fn specs(self, out_size: u32) -> Result<Vec<CropSpec>> {
        let mut specs = Vec::with_capacity(self.len());
        for &pitch in self.pitches() {
            for yaw in Self::yaws() {
                specs.push(CropSpec::new(yaw, pitch, DEFAULT_FOV, out_size)?);
            }
        }
        Ok(specs)
    }
}

impl FromStr for CropPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "A" | "A16" => Ok(CropPreset::A16),
            "B" | "B24" => Ok(CropPreset::B24),
            other => Err(Error::Config(format!("unknown crop preset '{other}'"))),
        }
    }
}

impl fmt::Display for CropPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CropPreset::A16 => "A",
            CropPreset::B24 => "B",
        })
    }
}

/// Cuts the preset's crops out of a panorama, in preset order (pitch-major).
pub fn standard_crop_set(
    pano: &EquirectPanorama,
    preset: CropPreset,
    out_size: u32,
) -> Result<Vec<(CropSpec, RgbImage)>> {
    preset
        .specs(out_size)?
        .into_iter()
        .map(|spec| Ok((spec, crop_perspective(pano, &spec)?)))
        .collect()
}

/// One row of the crop batch manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropRecord {
    pub pano_id: String,
    pub yaw: f64,
    pub pitch: f64,
    pub fov: f64,
    pub out_path: String,
}

pub fn write_crop_manifest(path: &Path, records: &[CropRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_crop_manifest(path: &Path) -> Result<Vec<CropRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| Ok(row?)).collect()
}
