//! Question pool: one same-space question per confusable segment pair.
//!
//! For segment A and its most similar partner B, a question shows a
//! panorama of A, a control crop of A, and three shuffled choices: another
//! crop of A, a crop of B and a crop of some other segment C.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use legible_core::similarity::{best_partner, top_pairs, SegmentAffinity};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, SurveyError};

/// Feature categories a participant can attach to a click.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Property {
    Object,
    Material,
    Color,
    Light,
    Geometry,
    Texture,
    Other,
}

impl Property {
    pub const ALL: [Property; 7] = [
        Property::Object,
        Property::Material,
        Property::Color,
        Property::Light,
        Property::Geometry,
        Property::Texture,
        Property::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Property::Object => "object",
            Property::Material => "material",
            Property::Color => "color",
            Property::Light => "light",
            Property::Geometry => "geometry",
            Property::Texture => "texture",
            Property::Other => "other",
        }
    }
}

impl fmt::Display for Property {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Property {
    type Err = SurveyError;

    fn from_str(s: &str) -> Result<Self> {
        Property::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| SurveyError::invalid("property", format!("unknown property '{s}'")))
    }
}

/// What a choice image stands for. Never sent to participants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    /// Another image of the panorama's segment.
    ImageA1,
    /// Image of the segment the model finds most similar.
    ImageB,
    /// Image of an unrelated segment.
    ImageC,
}

impl Role {
    pub const ALL: [Role; 3] = [Role::ImageA1, Role::ImageB, Role::ImageC];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::ImageA1 => "image_a_1",
            Role::ImageB => "image_b",
            Role::ImageC => "image_c",
        }
    }
}

/// An image file with its pixel dimensions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MediaRef {
    pub path: PathBuf,
    pub width: u32,
    pub height: u32,
}

impl MediaRef {
    /// Reads the dimensions from the file header.
    pub fn probe(path: &Path) -> Result<Self> {
        let (width, height) = image::image_dimensions(path)
            .map_err(|e| SurveyError::Config(format!("cannot read {}: {e}", path.display())))?;
        Ok(Self {
            path: path.to_path_buf(),
            width,
            height,
        })
    }

    /// Opaque, stable identifier derived from the path.
    pub fn id(&self) -> String {
        let digest = Sha256::digest(self.path.to_string_lossy().as_bytes());
        format!("img-{}", &hex::encode(digest)[..16])
    }
}

/// Crops and panoramas available for one segment.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SegmentMedia {
    pub crops: Vec<MediaRef>,
    pub panoramas: Vec<MediaRef>,
}

pub type Catalog = BTreeMap<u32, SegmentMedia>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Choice {
    pub image: MediaRef,
    pub role: Role,
    pub segment: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurveyQuestion {
    pub id: String,
    pub segment_a: u32,
    pub segment_b: u32,
    pub segment_c: u32,
    /// Affinity between A and B.
    pub affinity: f64,
    pub panorama: MediaRef,
    /// `image_a_0`: the reference crop shown above the choices.
    pub control: MediaRef,
    /// In display order.
    pub choices: [Choice; 3],
}

impl SurveyQuestion {
    pub fn choice_by_image(&self, image_id: &str) -> Option<&Choice> {
        self.choices.iter().find(|c| c.image.id() == image_id)
    }

    pub fn choice_by_role(&self, role: Role) -> &Choice {
        self.choices.iter().find(|c| c.role == role).expect("every role present")
    }

    /// Positions of `image_a_1`, `image_b`, `image_c` in display order.
    pub fn display_order(&self) -> [usize; 3] {
        Role::ALL.map(|r| self.choices.iter().position(|c| c.role == r).unwrap())
    }
}

/// Builds up to `pool_size` questions from the affinity ranking. Pairs are
/// taken in `top_pairs` order; a pair yields a question for each member
/// whose best partner is the other member, so `image_b` always comes from
/// A's most similar segment. Segments with fewer than two crops or no
/// panorama cannot play A and are skipped with a warning.
pub fn build_question_pool(
    affinity: &SegmentAffinity,
    catalog: &Catalog,
    pool_size: usize,
    seed: u64,
) -> Result<Vec<SurveyQuestion>> {
    let s = affinity.ids.len();
    if s < 3 {
        return Err(SurveyError::Config(format!("a question needs three segments, got {s}")));
    }
    let p = &affinity.p;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool = Vec::new();
    let media = |i: usize| catalog.get(&affinity.ids[i]);
    for (i, j, value) in top_pairs(p, s * (s - 1) / 2) {
        for (a, b) in [(i, j), (j, i)] {
            if pool.len() >= pool_size {
                return Ok(pool);
            }
            if best_partner(p, a) != Some(b) {
                continue;
            }
            let (id_a, id_b) = (affinity.ids[a], affinity.ids[b]);
            let Some(ma) = media(a).filter(|m| m.crops.len() >= 2 && !m.panoramas.is_empty()) else {
                log::warn!("segment={id_a} skipped: needs two crops and a panorama");
                continue;
            };
            let Some(mb) = media(b).filter(|m| !m.crops.is_empty()) else {
                log::warn!("segment={id_b} skipped: no crops");
                continue;
            };
            let others: Vec<usize> = (0..s)
                .filter(|&c| c != a && c != b && media(c).is_some_and(|m| !m.crops.is_empty()))
                .collect();
            let Some(&c) = others.choose(&mut rng) else {
                log::warn!("pair={id_a},{id_b} skipped: no third segment with crops");
                continue;
            };
            let id_c = affinity.ids[c];
            let picks: Vec<&MediaRef> = ma.crops.choose_multiple(&mut rng, 2).collect();
            let panorama = ma.panoramas.choose(&mut rng).unwrap().clone();
            let image_b = mb.crops.choose(&mut rng).unwrap().clone();
            let image_c = media(c).unwrap().crops.choose(&mut rng).unwrap().clone();
            let mut choices = [
                Choice {
                    image: picks[1].clone(),
                    role: Role::ImageA1,
                    segment: id_a,
                },
                Choice {
                    image: image_b,
                    role: Role::ImageB,
                    segment: id_b,
                },
                Choice {
                    image: image_c,
                    role: Role::ImageC,
                    segment: id_c,
                },
            ];
            choices.shuffle(&mut rng);
            pool.push(SurveyQuestion {
                id: format!("q{:03}", pool.len()),
                segment_a: id_a,
                segment_b: id_b,
                segment_c: id_c,
                affinity: value,
                panorama,
                control: picks[0].clone(),
                choices,
            });
        }
    }
    Ok(pool)
}
