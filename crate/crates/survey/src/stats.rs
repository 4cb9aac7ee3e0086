//! Aggregates over stored responses and the attention-overlap score η.
//!
//! η compares where a participant clicked with where the model looked. Let
//! `U` be the union of disks of radius `r` around the clicks and `P` the
//! model heatmap scaled to unit mass. Then
//!
//! ```text
//! η = sum_{U} P / (sum of the |U| largest values of P)
//! ```
//!
//! so η = 1 when the clicked area holds as much mass as any region of the
//! same pixel count could.

use std::collections::{BTreeMap, HashMap};

use legible_core::legibility::Heatmap;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SurveyError};
use crate::question::{Property, Role};
use crate::store::{StoredResponse, CLICKS_PER_RESPONSE};

pub const DEFAULT_RADIUS: f64 = 10.0;
pub const HISTOGRAM_BIN: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BotFilter {
    pub min_dwell_ms: u64,
    pub max_per_participant: usize,
}

impl Default for BotFilter {
    fn default() -> Self {
        Self {
            min_dwell_ms: 2000,
            max_per_participant: 20,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    TooFast,
    TooManyResponses,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct FilterOutcome {
    pub kept: Vec<StoredResponse>,
    pub rejected: Vec<(u64, RejectReason)>,
}

/// Drops answers given faster than the dwell threshold and every answer of
/// a participant with more responses than allowed.
pub fn filter_bots(responses: &[StoredResponse], filter: &BotFilter) -> FilterOutcome {
    let mut per: HashMap<&str, usize> = HashMap::new();
    for r in responses {
        *per.entry(r.participant.as_str()).or_default() += 1;
    }
    let mut out = FilterOutcome::default();
    for r in responses {
        if per[r.participant.as_str()] > filter.max_per_participant {
            out.rejected.push((r.id, RejectReason::TooManyResponses));
        } else if r.dwell_ms < filter.min_dwell_ms {
            out.rejected.push((r.id, RejectReason::TooFast));
        } else {
            out.kept.push(r.clone());
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoleShare {
    pub role: Role,
    pub count: usize,
    pub percent: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChoiceStats {
    pub total: usize,
    /// `image_a_1`, `image_b`, `image_c` in that order.
    pub roles: Vec<RoleShare>,
}

fn percent(count: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * count as f64 / total as f64
    }
}

pub fn aggregate_choices(responses: &[StoredResponse]) -> ChoiceStats {
    aggregate_counts(Role::ALL.map(|role| responses.iter().filter(|r| r.chosen_role == role).count()))
}

/// Shares from raw per-role counts.
pub fn aggregate_counts(counts: [usize; 3]) -> ChoiceStats {
    let total = counts.iter().sum();
    ChoiceStats {
        total,
        roles: Role::ALL
            .iter()
            .zip(counts)
            .map(|(&role, count)| RoleShare {
                role,
                count,
                percent: percent(count, total),
            })
            .collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropertyTally {
    /// Click rank (first, second, third) -> property -> count.
    pub counts: Vec<BTreeMap<Property, usize>>,
    pub percents: Vec<BTreeMap<Property, f64>>,
}

pub fn property_tally(responses: &[StoredResponse]) -> PropertyTally {
    let mut counts: Vec<BTreeMap<Property, usize>> =
        (0..CLICKS_PER_RESPONSE).map(|_| Property::ALL.iter().map(|p| (*p, 0)).collect()).collect();
    for r in responses {
        for (rank, c) in r.clicks.iter().enumerate().take(CLICKS_PER_RESPONSE) {
            *counts[rank].get_mut(&c.property).unwrap() += 1;
        }
    }
    let percents = counts
        .iter()
        .map(|col| {
            let total: usize = col.values().sum();
            col.iter().map(|(p, c)| (*p, percent(*c, total))).collect()
        })
        .collect();
    PropertyTally { counts, percents }
}

/// Denominator of η.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EtaDenominator {
    /// Largest mass any region of `|U|` pixels could capture.
    #[default]
    BestEqualArea,
    /// Total heatmap mass, so η is the captured fraction.
    TotalMass,
}

/// Pixels whose centre lies within `radius` of any click.
pub fn click_region(width: usize, height: usize, clicks: &[(f64, f64)], radius: f64) -> Vec<bool> {
    let r2 = radius * radius;
    let mut mask = vec![false; width * height];
    for &(cx, cy) in clicks {
        let x0 = ((cx - radius).floor().max(0.0)) as usize;
        let y0 = ((cy - radius).floor().max(0.0)) as usize;
        let x1 = ((cx + radius).ceil().max(0.0) as usize).min(width);
        let y1 = ((cy + radius).ceil().max(0.0) as usize).min(height);
        for y in y0..y1 {
            for x in x0..x1 {
                let dx = x as f64 + 0.5 - cx;
                let dy = y as f64 + 0.5 - cy;
                if dx * dx + dy * dy <= r2 {
                    mask[y * width + x] = true;
                }
            }
        }
    }
    mask
}

/// Attention overlap of `clicks` with `heatmap`. The heatmap is scaled to
/// unit mass first; an all-zero heatmap counts as uniform.
pub fn eta(heatmap: &Heatmap, clicks: &[(f64, f64)], radius: f64, denominator: EtaDenominator) -> Result<f64> {
    if !(radius >= 1.0 && radius.is_finite()) {
        return Err(SurveyError::Config(format!("click radius must be at least 1 pixel, got {radius}")));
    }
    if heatmap.data.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(SurveyError::invalid("heatmap", "values must be finite and non-negative"));
    }
    let (w, h) = (heatmap.width as f64, heatmap.height as f64);
    for (i, &(x, y)) in clicks.iter().enumerate() {
        if !(x.is_finite() && y.is_finite() && (0.0..w).contains(&x) && (0.0..h).contains(&y)) {
            return Err(SurveyError::invalid(format!("clicks[{i}]"), format!("({x}, {y}) outside the image")));
        }
    }
    if clicks.is_empty() {
        return Err(SurveyError::invalid("clicks", "at least one click is required"));
    }
    let mass: f64 = heatmap.data.iter().sum();
    let p: Vec<f64> = if mass > 0.0 {
        heatmap.data.iter().map(|v| v / mass).collect()
    } else {
        vec![1.0 / heatmap.data.len() as f64; heatmap.data.len()]
    };
    let mask = click_region(heatmap.width, heatmap.height, clicks, radius);
    let area = mask.iter().filter(|m| **m).count();
    let captured: f64 = p.iter().zip(&mask).filter(|(_, m)| **m).map(|(v, _)| v).sum();
    let denom: f64 = match denominator {
        EtaDenominator::TotalMass => p.iter().sum::<f64>(),
        EtaDenominator::BestEqualArea => {
            let mut sorted = p.clone();
            sorted.sort_by(|a, b| b.total_cmp(a));
            sorted[..area].iter().sum()
        }
    };
    Ok(if denom > 0.0 { (captured / denom).clamp(0.0, 1.0) } else { 1.0 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EtaResult {
    /// `(response id, η)` for every response that had a heatmap.
    pub values: Vec<(u64, f64)>,
    pub skipped: Vec<u64>,
    pub max: f64,
    pub min: f64,
    pub mean: f64,
    pub median: f64,
    /// Counts per bin `[k * 0.05, (k + 1) * 0.05)`; the last bin includes 1.
    pub histogram: Vec<usize>,
}

impl EtaResult {
    pub fn from_values(values: Vec<(u64, f64)>, skipped: Vec<u64>) -> Self {
        let bins = (1.0 / HISTOGRAM_BIN).round() as usize;
        let mut histogram = vec![0; bins];
        let mut v: Vec<f64> = values.iter().map(|(_, e)| *e).collect();
        for e in &v {
            histogram[((e * bins as f64) as usize).min(bins - 1)] += 1;
        }
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let (max, min, mean, median) = if n == 0 {
            (f64::NAN, f64::NAN, f64::NAN, f64::NAN)
        } else {
            let median = if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 };
            (v[n - 1], v[0], v.iter().sum::<f64>() / n as f64, median)
        };
        Self {
            values,
            skipped,
            max,
            min,
            mean,
            median,
            histogram,
        }
    }
}

/// η for each response against the heatmap of its control image (keyed by
/// image id). Responses without a heatmap are skipped with a warning.
pub fn eta_distribution(
    responses: &[StoredResponse],
    heatmaps: &HashMap<String, Heatmap>,
    radius: f64,
    denominator: EtaDenominator,
) -> Result<EtaResult> {
    let mut values = Vec::new();
    let mut skipped = Vec::new();
    for r in responses {
        let Some(map) = heatmaps.get(&r.image_a_0) else {
            log::warn!("response={} control={} has no heatmap; skipped", r.id, r.image_a_0);
            skipped.push(r.id);
            continue;
        };
        let clicks: Vec<(f64, f64)> = r.clicks.iter().map(|c| (c.x, c.y)).collect();
        values.push((r.id, eta(map, &clicks, radius, denominator)?));
    }
    Ok(EtaResult::from_values(values, skipped))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::Click;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn response(id: u64, participant: &str, role: Role, dwell: u64, props: [Property; 3]) -> StoredResponse {
        StoredResponse {
            id,
            token: format!("t{id}"),
            participant: participant.into(),
            question_id: "q000".into(),
            segment_a: 0,
            image_a_0: "ctrl".into(),
            image_a_1: "a1".into(),
            image_b: "b".into(),
            image_c: "c".into(),
            chosen_image: "x".into(),
            chosen_segment: 0,
            chosen_role: role,
            clicks: props.iter().map(|&property| Click { x: 5.0, y: 5.0, property }).collect(),
            dwell_ms: dwell,
            timestamp: 0.0,
        }
    }

    const OBJ3: [Property; 3] = [Property::Object; 3];

    #[test]
    fn bot_filter() {
        let mut rs = vec![
            response(1, "human", Role::ImageA1, 5000, OBJ3),
            response(2, "human", Role::ImageB, 500, OBJ3),
        ];
        rs.extend((0..21).map(|i| response(10 + i, "bot", Role::ImageC, 9000, OBJ3)));
        let out = filter_bots(&rs, &BotFilter::default());
        assert_eq!(out.kept.iter().map(|r| r.id).collect::<Vec<_>>(), vec![1]);
        assert!(out.rejected.contains(&(2, RejectReason::TooFast)));
        assert_eq!(out.rejected.iter().filter(|r| r.1 == RejectReason::TooManyResponses).count(), 21);
    }

    #[test]
    fn bot_filter_separates_labelled_mix() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut rs = Vec::new();
        let mut is_bot = HashMap::new();
        for i in 0..400u64 {
            let bot = rng.random_bool(0.2);
            let dwell = if bot { rng.random_range(50..1999) } else { rng.random_range(2000..60_000) };
            is_bot.insert(i, bot);
            rs.push(response(i, &format!("p{}", i % 97), Role::ImageA1, dwell, OBJ3));
        }
        let out = filter_bots(&rs, &BotFilter::default());
        assert!(out.kept.iter().all(|r| !is_bot[&r.id]));
        assert!(out.rejected.iter().all(|(id, _)| is_bot[id]));
    }

    #[test]
    fn choice_shares() {
        let all_a: Vec<_> = (0..10).map(|i| response(i, "p", Role::ImageA1, 3000, OBJ3)).collect();
        let s = aggregate_choices(&all_a);
        assert_eq!(s.roles.iter().map(|r| r.percent).collect::<Vec<_>>(), vec![100.0, 0.0, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rs: Vec<_> = (0..333)
            .map(|i| response(i, "p", Role::ALL[rng.random_range(0..3)], 3000, OBJ3))
            .collect();
        let s = aggregate_choices(&rs);
        for share in &s.roles {
            assert_eq!(share.count, rs.iter().filter(|r| r.chosen_role == share.role).count());
        }
        assert_eq!(s.total, 333);
        assert!((s.roles.iter().map(|r| r.percent).sum::<f64>() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn reference_selection_counts() {
        // 2187 / 1484 / 344 selections reported as 54.5% / 37.0% / 8.5%.
        let s = aggregate_counts([2187, 1484, 344]);
        assert_eq!(s.total, 4015);
        for (share, reported) in s.roles.iter().zip([54.5, 37.0, 8.5]) {
            assert!((share.percent - reported).abs() < 0.1, "{} vs {reported}", share.percent);
        }
    }

    #[test]
    fn property_columns() {
        let all_obj: Vec<_> = (0..4).map(|i| response(i, "p", Role::ImageA1, 3000, OBJ3)).collect();
        let t = property_tally(&all_obj);
        for col in &t.percents {
            assert_eq!(col[&Property::Object], 100.0);
        }
        // First-choice shares of 41.5 / 15.3 / 13.9 / 15.5 / 10.5 / 3.3 percent.
        let firsts = [
            (Property::Object, 415),
            (Property::Material, 153),
            (Property::Color, 139),
            (Property::Light, 155),
            (Property::Geometry, 105),
            (Property::Other, 33),
        ];
        let mut rs = Vec::new();
        for (p, n) in firsts {
            for _ in 0..n {
                rs.push(response(rs.len() as u64, "p", Role::ImageA1, 3000, [p, Property::Light, Property::Other]));
            }
        }
        let t = property_tally(&rs);
        let first = &t.percents[0];
        assert!((first[&Property::Object] - 41.5).abs() < 1e-9);
        let top = first.iter().max_by(|a, b| a.1.total_cmp(b.1)).unwrap();
        assert_eq!(*top.0, Property::Object);
        for col in &t.percents {
            assert!((col.values().sum::<f64>() - 100.0).abs() < 1e-9);
        }
        assert_eq!(t.counts[1][&Property::Light], 1000);
    }

    /// Straightforward pixel enumeration.
    fn brute_eta(h: &Heatmap, clicks: &[(f64, f64)], r: f64) -> f64 {
        let total: f64 = h.data.iter().sum();
        let p: Vec<f64> = h.data.iter().map(|v| v / total).collect();
        let mut inside = Vec::new();
        let mut captured = 0.0;
        for y in 0..h.height {
            for x in 0..h.width {
                let hit = clicks
                    .iter()
                    .any(|(cx, cy)| ((x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2)).sqrt() <= r);
                if hit {
                    captured += p[y * h.width + x];
                    inside.push(());
                }
            }
        }
        let mut sorted = p.clone();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        captured / sorted.iter().take(inside.len()).sum::<f64>()
    }

    fn random_case(rng: &mut ChaCha8Rng) -> (Heatmap, Vec<(f64, f64)>, f64) {
        let (w, h) = (rng.random_range(8..48), rng.random_range(8..48));
        let data = (0..w * h).map(|_| rng.random::<f64>().powi(3)).collect();
        let clicks = (0..3)
            .map(|_| (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64)))
            .collect();
        (Heatmap::new(w, h, data), clicks, rng.random_range(1.0..12.0))
    }

    #[test]
    fn eta_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let (h, c, r) = random_case(&mut rng);
            let e = eta(&h, &c, r, EtaDenominator::BestEqualArea).unwrap();
            assert!((e - brute_eta(&h, &c, r)).abs() < 1e-12);
        }
    }

    #[test]
    fn eta_special_cases() {
        let uniform = Heatmap::new(30, 20, vec![0.5; 600]);
        let e = eta(&uniform, &[(3.0, 4.0), (29.9, 19.9), (15.0, 10.0)], 10.0, EtaDenominator::BestEqualArea).unwrap();
        assert!((e - 1.0).abs() < 1e-12);
        let zero = Heatmap::new(30, 20, vec![0.0; 600]);
        assert!((eta(&zero, &[(1.0, 1.0)], 3.0, EtaDenominator::BestEqualArea).unwrap() - 1.0).abs() < 1e-12);
        // All mass inside one clicked disk.
        let mut peaked = vec![0.0; 600];
        peaked[10 * 30 + 10] = 1.0;
        peaked[10 * 30 + 11] = 0.5;
        let peak = Heatmap::new(30, 20, peaked);
        assert_eq!(eta(&peak, &[(10.5, 10.5), (25.0, 2.0), (2.0, 18.0)], 5.0, EtaDenominator::BestEqualArea).unwrap(), 1.0);
        assert_eq!(eta(&peak, &[(10.5, 10.5)], 5.0, EtaDenominator::TotalMass).unwrap(), 1.0);
        assert_eq!(eta(&peak, &[(25.0, 2.0)], 5.0, EtaDenominator::TotalMass).unwrap(), 0.0);
        assert!(eta(&peak, &[(30.0, 1.0)], 5.0, EtaDenominator::BestEqualArea).is_err());
        assert!(eta(&peak, &[(1.0, 1.0)], 0.5, EtaDenominator::BestEqualArea).is_err());
    }

    #[test]
    fn larger_radius_can_lower_eta_but_never_captured_mass() {
        // A plateau exactly covering the small disk scores 1; widening the
        // disk adds empty pixels while the best equal-area region picks up
        // the distant secondary mass.
        let mut data = vec![0.0; 40 * 40];
        for (x, y) in [(20, 20), (19, 20), (21, 20), (20, 19), (20, 21)] {
            data[y * 40 + x] = 1.0;
        }
        for (x, y) in [(30, 30), (31, 30), (30, 31)] {
            data[y * 40 + x] = 0.2;
        }
        let h = Heatmap::new(40, 40, data);
        let c = [(20.5, 20.5)];
        let small = eta(&h, &c, 1.0, EtaDenominator::BestEqualArea).unwrap();
        let large = eta(&h, &c, 6.0, EtaDenominator::BestEqualArea).unwrap();
        assert_eq!(small, 1.0);
        assert!(large < small);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let (h, c, _) = random_case(&mut rng);
            let mut prev = 0.0;
            for r in [1.0, 2.0, 4.0, 8.0, 16.0] {
                let captured = eta(&h, &c, r, EtaDenominator::TotalMass).unwrap();
                assert!(captured >= prev - 1e-15);
                prev = captured;
            }
        }
    }

    #[test]
    fn distribution_summary() {
        let one = EtaResult::from_values(vec![(1, 0.7)], vec![]);
        assert_eq!((one.max, one.min, one.mean, one.median), (0.7, 0.7, 0.7, 0.7));
        assert_eq!(one.histogram.len(), 20);
        assert_eq!(one.histogram[14], 1);
        let vals = vec![(1, 0.2), (2, 0.9), (3, 0.5), (4, 1.0)];
        let r = EtaResult::from_values(vals.clone(), vec![]);
        assert_eq!(r.median, 0.7);
        assert_eq!(r.mean, (0.2 + 0.9 + 0.5 + 1.0) / 4.0);
        assert_eq!((r.histogram[18], r.histogram[19]), (1, 1));
        assert_eq!(r.histogram.iter().sum::<usize>(), 4);

        let mut maps = HashMap::new();
        maps.insert("ctrl".to_string(), Heatmap::new(16, 16, vec![1.0; 256]));
        let mut rs = vec![response(1, "p", Role::ImageA1, 3000, OBJ3)];
        let mut other = response(2, "p", Role::ImageB, 3000, OBJ3);
        other.image_a_0 = "missing".into();
        rs.push(other);
        let d = eta_distribution(&rs, &maps, 10.0, EtaDenominator::BestEqualArea).unwrap();
        assert_eq!(d.values.len(), 1);
        assert_eq!(d.skipped, vec![2]);
    }

    proptest::proptest! {
        #[test]
        fn eta_stays_in_unit_interval(
            w in 2usize..24, h in 2usize..24,
            seed in 0u64..1_000_000,
            r in 1.0f64..30.0,
            total in proptest::bool::ANY,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f64> = (0..w * h).map(|_| if rng.random_bool(0.3) { 0.0 } else { rng.random::<f64>() * 1e3 }).collect();
            let clicks: Vec<(f64, f64)> = (0..3).map(|_| (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64))).collect();
            let d = if total { EtaDenominator::TotalMass } else { EtaDenominator::BestEqualArea };
            let e = eta(&Heatmap::new(w, h, data), &clicks, r, d).unwrap();
            proptest::prop_assert!((0.0..=1.0).contains(&e));
        }
    }
}
