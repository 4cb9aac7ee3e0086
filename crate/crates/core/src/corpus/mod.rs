//! Spatial segments, geo-tagging of crops, and dataset assembly.
//!
//! Crops are tagged by looking up the trajectory pose nearest in time to
//! their source panorama and locating that pose inside a segment footprint
//! on the same floor. Crops whose pose lies outside every footprint are
//! dropped. The resulting manifest can then be capped per segment and split
//! into stratified train/test sets.

mod augment;
pub mod geometry;
mod synth;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use geometry::Point;

pub use augment::{apply_augment, augment, sample_augment, AugmentParams, MAX_AREA, MIN_AREA};
pub use synth::{synth_station, RoomStyle, SynthSpec, SynthStation};

/// Functional category of a segment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Program {
    Commercial,
    Waiting,
    Corridor,
}

impl Program {
    pub const ALL: [Program; 3] = [Program::Commercial, Program::Waiting, Program::Corridor];

    pub fn as_str(self) -> &'static str {
        match self {
            Program::Commercial => "commercial",
            Program::Waiting => "waiting",
            Program::Corridor => "corridor",
        }
    }
}

impl fmt::Display for Program {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpatialSegment {
    pub id: u32,
    pub name: String,
    pub program: Program,
    pub floor: i32,
    #[serde(default)]
    pub hall: Option<String>,
    /// Footprint vertices in station-plan meters.
    pub polygon: Vec<Point>,
}

impl SpatialSegment {
    pub fn area(&self) -> f64 {
        geometry::signed_area(&self.polygon).abs()
    }

    pub fn centroid(&self) -> Point {
        geometry::centroid(&self.polygon)
    }
}

/// Validated set of segments: unique ids, simple footprints, and no two
/// footprints on the same floor overlapping.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentTable {
    segments: Vec<SpatialSegment>,
    bboxes: Vec<(Point, Point)>,
}

impl SegmentTable {
    pub fn new(mut segments: Vec<SpatialSegment>) -> Result<Self> {
        segments.sort_by_key(|s| s.id);
        for w in segments.windows(2) {
            if w[0].id == w[1].id {
                return Err(Error::Config(format!("duplicate segment id {}", w[0].id)));
            }
        }
        for s in &segments {
            if !geometry::is_simple(&s.polygon) {
                return Err(Error::Config(format!(
                    "segment {} footprint is not a simple polygon with positive area",
                    s.id
                )));
            }
        }
        for (i, a) in segments.iter().enumerate() {
            for b in &segments[i + 1..] {
                if a.floor == b.floor && geometry::interiors_overlap(&a.polygon, &b.polygon) {
                    return Err(Error::Config(format!(
                        "segments {} and {} overlap on floor {}",
                        a.id, b.id, a.floor
                    )));
                }
            }
        }
        let bboxes = segments.iter().map(|s| geometry::bbox(&s.polygon)).collect();
        Ok(Self { segments, bboxes })
    }

    pub fn segments(&self) -> &[SpatialSegment] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn get(&self, id: u32) -> Option<&SpatialSegment> {
        self.segments
            .binary_search_by_key(&id, |s| s.id)
            .ok()
            .map(|i| &self.segments[i])
    }

    pub fn ids(&self) -> Vec<u32> {
        self.segments.iter().map(|s| s.id).collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::new(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.segments)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPose {
    pub timestamp: f64,
    pub x: f64,
    pub y: f64,
    pub floor: i32,
}

/// Locates the pose in a segment footprint on the same floor.
pub fn assign_segment(pose: &TrajectoryPose, table: &SegmentTable) -> Option<u32> {
    let p = [pose.x, pose.y];
    table
        .segments
        .iter()
        .zip(&table.bboxes)
        .filter(|(s, (lo, hi))| {
            s.floor == pose.floor && p[0] >= lo[0] && p[0] <= hi[0] && p[1] >= lo[1] && p[1] <= hi[1]
        })
        .find(|(s, _)| geometry::contains(&s.polygon, p))
        .map(|(s, _)| s.id)
}

/// Non-empty pose sequence with strictly increasing timestamps.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    poses: Vec<TrajectoryPose>,
}

impl Trajectory {
    pub fn new(poses: Vec<TrajectoryPose>) -> Result<Self> {
        if poses.is_empty() {
            return Err(Error::Input("trajectory is empty".into()));
        }
        for w in poses.windows(2) {
            if w[1].timestamp.partial_cmp(&w[0].timestamp) != Some(std::cmp::Ordering::Greater) {
                return Err(Error::Input(format!(
                    "trajectory timestamps not strictly increasing at t={}",
                    w[1].timestamp
                )));
            }
        }
        Ok(Self { poses })
    }

    pub fn poses(&self) -> &[TrajectoryPose] {
        &self.poses
    }

    /// Pose nearest in time; ties go to the earlier pose.
    pub fn nearest(&self, t: f64) -> &TrajectoryPose {
        let idx = self.poses.partition_point(|p| p.timestamp < t);
        if idx == 0 {
            return &self.poses[0];
        }
        if idx == self.poses.len() {
            return &self.poses[idx - 1];
        }
        let before = &self.poses[idx - 1];
        let after = &self.poses[idx];
        if after.timestamp - t < t - before.timestamp {
            after
        } else {
            before
        }
    }

    /// Reads `timestamp,x,y,floor` CSV.
    pub fn load(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let poses = r.deserialize().collect::<std::result::Result<Vec<_>, _>>()?;
        Self::new(poses)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for p in &self.poses {
            w.serialize(p)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Input(format!("unknown split '{other}'"))),
        }
    }
}

/// A crop waiting to be geo-tagged.
#[derive(Clone, Debug, PartialEq)]
pub struct CropEntry {
    pub image_path: String,
    pub pano_id: String,
    pub timestamp: f64,
    pub yaw: f64,
    pub pitch: f64,
}

/// One manifest row: `image_path,segment_id,yaw,pitch,split,pano_id`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedImage {
    pub image_path: String,
    pub segment_id: u32,
    pub yaw: f64,
    pub pitch: f64,
    pub split: Option<Split>,
    pub pano_id: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<AnnotatedImage>,
    pub segments: SegmentTable,
    /// Crops discarded because their pose fell outside every footprint.
    pub dropped: usize,
}

impl DatasetManifest {
    pub fn new(entries: Vec<AnnotatedImage>, segments: SegmentTable) -> Result<Self> {
        let m = Self {
            entries,
            segments,
            dropped: 0,
        };
        m.validate()?;
        Ok(m)
    }

    /// Image count per segment id, including segments with zero images.
    pub fn counts(&self) -> BTreeMap<u32, usize> {
        let mut counts: BTreeMap<u32, usize> = self.segments.ids().into_iter().map(|id| (id, 0)).collect();
        for e in &self.entries {
            *counts.entry(e.segment_id).or_default() += 1;
        }
        counts
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Checks segment references, and that any segment with training
    /// images also has test images once splits are assigned.
    pub fn validate(&self) -> Result<()> {
        let mut train = BTreeSet::new();
        let mut test = BTreeSet::new();
        for e in &self.entries {
            if self.segments.get(e.segment_id).is_none() {
                return Err(Error::Input(format!(
                    "{} references unknown segment {}",
                    e.image_path, e.segment_id
                )));
            }
            match e.split {
                Some(Split::Train) => {
                    train.insert(e.segment_id);
                }
                Some(Split::Test) => {
                    test.insert(e.segment_id);
                }
                None => {}
            }
        }
        if !test.is_empty() {
            if let Some(seg) = train.difference(&test).next() {
                return Err(Error::Input(format!(
                    "segment {seg} has training images but no test images"
                )));
            }
        }
        Ok(())
    }

    pub fn filter(&self, split: Split) -> DatasetManifest {
        DatasetManifest {
            entries: self.entries.iter().filter(|e| e.split == Some(split)).cloned().collect(),
            segments: self.segments.clone(),
            dropped: 0,
        }
    }

    /// Concatenates two manifests over the same segment table.
    pub fn merged(&self, other: &DatasetManifest) -> DatasetManifest {
        let mut entries = self.entries.clone();
        entries.extend(other.entries.iter().cloned());
        DatasetManifest {
            entries,
            segments: self.segments.clone(),
            dropped: self.dropped + other.dropped,
        }
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for e in &self.entries {
            w.serialize(e)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load_csv(path: &Path, segments: SegmentTable) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let entries = r.deserialize().collect::<std::result::Result<Vec<_>, _>>()?;
        Self::new(entries, segments)
    }

    /// Entries grouped per segment in canonical (image path) order.
    fn by_segment(&self) -> BTreeMap<u32, Vec<&AnnotatedImage>> {
        let mut groups: BTreeMap<u32, Vec<&AnnotatedImage>> = BTreeMap::new();
        for e in &self.entries {
            groups.entry(e.segment_id).or_default().push(e);
        }
        for g in groups.values_mut() {
            g.sort_by(|a, b| a.image_path.cmp(&b.image_path));
        }
        groups
    }
}

/// Geo-tags crops through the trajectory. Crops landing in no segment are
/// dropped and counted.
pub fn annotate(
    crops: &[CropEntry],
    trajectory: &[TrajectoryPose],
    segments: &SegmentTable,
) -> Result<DatasetManifest> {
    let trajectory = Trajectory::new(trajectory.to_vec())?;
    let mut entries = Vec::with_capacity(crops.len());
    let mut dropped = 0;
    for crop in crops {
        let pose = trajectory.nearest(crop.timestamp);
        match assign_segment(pose, segments) {
            Some(segment_id) => entries.push(AnnotatedImage {
                image_path: crop.image_path.clone(),
                segment_id,
                yaw: crop.yaw,
                pitch: crop.pitch,
                split: None,
                pano_id: crop.pano_id.clone(),
            }),
            None => dropped += 1,
        }
    }
    let mut m = DatasetManifest::new(entries, segments.clone())?;
    m.dropped = dropped;
    Ok(m)
}

fn segment_rng(seed: u64, segment: u32, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ salt ^ (u64::from(segment) << 32).wrapping_mul(0x9E37_79B9))
}

/// Caps every segment at `cap` entries by seeded uniform subsampling
/// without replacement. Segments already within the cap are untouched.
pub fn balance(manifest: &DatasetManifest, cap: usize, seed: u64) -> Result<DatasetManifest> {
    balance_with(manifest, |_| cap, seed)
}

/// Like [`balance`] with a per-segment cap, e.g. proportional to area.
pub fn balance_with(
    manifest: &DatasetManifest,
    cap_for: impl Fn(&SpatialSegment) -> usize,
    seed: u64,
) -> Result<DatasetManifest> {
    let mut keep: BTreeSet<&str> = BTreeSet::new();
    for (seg, group) in manifest.by_segment() {
        let cap = manifest.segments.get(seg).map(&cap_for).unwrap_or(usize::MAX);
        if cap == 0 {
            return Err(Error::Config(format!("cap for segment {seg} must be at least 1")));
        }
        if group.len() <= cap {
            keep.extend(group.iter().map(|e| e.image_path.as_str()));
            continue;
        }
        let mut idx: Vec<usize> = (0..group.len()).collect();
        idx.shuffle(&mut segment_rng(seed, seg, 0xBA1A_4CE0));
        keep.extend(idx[..cap].iter().map(|&i| group[i].image_path.as_str()));
    }
    let entries = manifest
        .entries
        .iter()
        .filter(|e| keep.contains(e.image_path.as_str()))
        .cloned()
        .collect();
    Ok(DatasetManifest {
        entries,
        segments: manifest.segments.clone(),
        dropped: manifest.dropped,
    })
}

/// Per-segment cap proportional to footprint area, at least `min_cap`.
pub fn area_proportional_cap(images_per_m2: f64, min_cap: usize) -> impl Fn(&SpatialSegment) -> usize {
    move |s| ((s.area() * images_per_m2).round() as usize).max(min_cap)
}

/// Stratified split. Each segment sends `round(test_fraction * n)` images
/// (at least one, at most `n - 1`) to the test set.
pub fn split(
    manifest: &DatasetManifest,
    test_fraction: f64,
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config(format!(
            "test_fraction {test_fraction} outside (0, 1)"
        )));
    }
    let mut assignment: HashMap<&str, Split> = HashMap::new();
    for (seg, group) in manifest.by_segment() {
        let n = group.len();
        if n < 2 {
            return Err(Error::Split { segment: seg, count: n });
        }
        let n_test = ((test_fraction * n as f64).round() as usize).clamp(1, n - 1);
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut segment_rng(seed, seg, 0x5B11_7000));
        for (rank, &i) in idx.iter().enumerate() {
            let s = if rank < n_test { Split::Test } else { Split::Train };
            assignment.insert(group[i].image_path.as_str(), s);
        }
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for e in &manifest.entries {
        let s = assignment[e.image_path.as_str()];
        let mut e = e.clone();
        e.split = Some(s);
        match s {
            Split::Train => train.push(e),
            Split::Test => test.push(e),
        }
    }
    let wrap = |entries| DatasetManifest {
        entries,
        segments: manifest.segments.clone(),
        dropped: 0,
    };
    Ok((wrap(train), wrap(test)))
}
