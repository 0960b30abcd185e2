//! Procedural part-based shape families with planted deformation targets.

mod io;

pub use io::{load_database, load_targets, save_database, save_targets, SCHEMA};

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{mirror, sample_surface, Aabb, PointCloud, Vec3};
use crate::partmodel::{apply_deformation, DeformationParams, Part, SourceShape, DEFAULT_TAU};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Chair,
    Table,
    Cabinet,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Chair => "chair",
            Family::Table => "table",
            Family::Cabinet => "cabinet",
        }
    }

    /// Inclusive part-count range the family can produce.
    pub fn part_range(self) -> (usize, usize) {
        match self {
            Family::Chair => (4, 8),
            Family::Table => (3, 6),
            Family::Cabinet => (2, 8),
        }
    }

    fn role_keys(self) -> &'static [&'static str] {
        match self {
            Family::Chair => &[
                "seat_width", "seat_depth", "seat_height", "seat_thickness", "back_height",
                "back_thickness", "leg_thickness", "panel_thickness", "arm_height",
                "arm_thickness", "headrest_height", "headrest_width_frac",
            ],
            Family::Table => &[
                "top_width", "top_depth", "height", "top_thickness", "leg_thickness",
                "panel_thickness", "shelf_thickness", "shelf_depth_frac",
            ],
            Family::Cabinet => &[
                "body_width", "body_height", "body_depth", "base_height", "leg_thickness",
                "plinth_inset", "top_thickness", "top_overhang", "door_thickness",
            ],
        }
    }
}

/// Shape-generation parameters. `ranges` overrides the default
/// `[min, max]` interval of any named part dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenSpec {
    /// Shape `i` uses `families[i % len]`.
    pub families: Vec<Family>,
    /// Optional overall part-count bounds, intersected with each family's.
    pub min_parts: Option<usize>,
    pub max_parts: Option<usize>,
    pub ranges: BTreeMap<String, [f64; 2]>,
    pub points_per_shape: usize,
    pub tau: f64,
    pub seed: u64,
}

impl Default for GenSpec {
    fn default() -> Self {
        Self {
            families: vec![Family::Chair, Family::Table, Family::Cabinet],
            min_parts: None,
            max_parts: None,
            ranges: BTreeMap::new(),
            points_per_shape: 2048,
            tau: DEFAULT_TAU,
            seed: 0,
        }
    }
}

const MAX_ATTEMPTS: usize = 200;

impl GenSpec {
    pub fn validate(&self) -> Result<()> {
        if self.families.is_empty() {
            return Err(Error::InvalidConfig("no shape families".into()));
        }
        if self.points_per_shape < 32 || self.points_per_shape % 2 != 0 {
            return Err(Error::InvalidConfig(
                "points_per_shape must be even and at least 32".into(),
            ));
        }
        for (k, [lo, hi]) in &self.ranges {
            if !self.families.iter().any(|f| f.role_keys().contains(&k.as_str())) {
                return Err(Error::InvalidConfig(format!("unknown dimension range `{k}`")));
            }
            if !(lo > &0.0 && lo <= hi) {
                return Err(Error::InvalidConfig(format!("range `{k}` must satisfy 0 < min <= max")));
            }
        }
        for &f in &self.families {
            let (lo, hi) = self.part_bounds(f);
            if lo > hi {
                return Err(Error::InvalidConfig(format!(
                    "part-count range excludes every {} layout",
                    f.name()
                )));
            }
        }
        Ok(())
    }

    fn part_bounds(&self, f: Family) -> (usize, usize) {
        let (lo, hi) = f.part_range();
        (lo.max(self.min_parts.unwrap_or(0)), hi.min(self.max_parts.unwrap_or(usize::MAX)))
    }
}

/// A placed box: centred on the mirror plane, or the `x > 0` member of a
/// mirror pair.
#[derive(Clone, Copy)]
enum Unit {
    Center(Aabb),
    Pair(Aabb),
}

struct Dims<'a> {
    rng: &'a mut ChaCha8Rng,
    ranges: &'a BTreeMap<String, [f64; 2]>,
}

impl Dims<'_> {
    fn get(&mut self, key: &str, lo: f64, hi: f64) -> f64 {
        let [lo, hi] = self.ranges.get(key).copied().unwrap_or([lo, hi]);
        if lo == hi {
            lo
        } else {
            self.rng.gen_range(lo..hi)
        }
    }

    fn chance(&mut self, p: f64) -> bool {
        self.rng.gen_bool(p)
    }
}

fn bx(center: Vec3, dims: Vec3) -> Aabb {
    Aabb { center, dims }
}

fn chair_layout(d: &mut Dims) -> Vec<Unit> {
    let w = d.get("seat_width", 0.4, 0.6);
    let dep = d.get("seat_depth", 0.4, 0.6);
    let h = d.get("seat_height", 0.4, 0.5);
    let ts = d.get("seat_thickness", 0.06, 0.1);
    let hb = d.get("back_height", 0.3, 0.6);
    let tb = d.get("back_thickness", 0.06, 0.1);
    let legs = d.chance(0.7);
    let arms = d.chance(0.4);
    let headrest = d.chance(0.3) && !(legs && arms);
    let top = h + ts / 2.0;
    let bottom = h - ts / 2.0;
    let back_z = -dep / 2.0 + tb / 2.0;
    let mut units = vec![
        Unit::Center(bx([0.0, h, 0.0], [w, ts, dep])),
        Unit::Center(bx([0.0, top + hb / 2.0, back_z], [w, hb, tb])),
    ];
    if legs {
        let tl = d.get("leg_thickness", 0.04, 0.07);
        for z in [-1.0, 1.0] {
            units.push(Unit::Pair(bx(
                [w / 2.0 - tl / 2.0, bottom / 2.0, z * (dep / 2.0 - tl / 2.0)],
                [tl, bottom, tl],
            )));
        }
    } else {
        let tp = d.get("panel_thickness", 0.04, 0.07);
        units.push(Unit::Pair(bx([w / 2.0 - tp / 2.0, bottom / 2.0, 0.0], [tp, bottom, dep])));
    }
    if arms {
        let ha = d.get("arm_height", 0.12, 0.25);
        let ta = d.get("arm_thickness", 0.05, 0.08);
        units.push(Unit::Pair(bx(
            [w / 2.0 - ta / 2.0, top + ha / 2.0, tb / 2.0],
            [ta, ha, dep - tb],
        )));
    }
    if headrest {
        let hh = d.get("headrest_height", 0.08, 0.15);
        let wf = d.get("headrest_width_frac", 0.4, 0.8);
        units.push(Unit::Center(bx([0.0, top + hb + hh / 2.0, back_z], [w * wf, hh, tb])));
    }
    units
}

fn table_layout(d: &mut Dims) -> Vec<Unit> {
    let w = d.get("top_width", 0.8, 1.4);
    let dep = d.get("top_depth", 0.5, 0.9);
    let height = d.get("height", 0.6, 0.8);
    let tt = d.get("top_thickness", 0.04, 0.08);
    let legs = d.chance(0.7);
    let shelf = d.chance(0.4);
    let leg_h = height - tt;
    let mut units = vec![Unit::Center(bx([0.0, height - tt / 2.0, 0.0], [w, tt, dep]))];
    let tsh = d.get("shelf_thickness", 0.03, 0.06);
    if legs {
        let tl = d.get("leg_thickness", 0.05, 0.1);
        for z in [-1.0, 1.0] {
            units.push(Unit::Pair(bx(
                [w / 2.0 - tl / 2.0, leg_h / 2.0, z * (dep / 2.0 - tl / 2.0)],
                [tl, leg_h, tl],
            )));
        }
        if shelf {
            // corners sit within half a shelf thickness of the legs' inner edges
            units.push(Unit::Center(bx([0.0, leg_h / 2.0, 0.0], [w - 2.0 * tl, tsh, dep - 2.0 * tl])));
        }
    } else {
        let tp = d.get("panel_thickness", 0.04, 0.08);
        units.push(Unit::Pair(bx([w / 2.0 - tp / 2.0, leg_h / 2.0, 0.0], [tp, leg_h, dep])));
        if shelf {
            let f = d.get("shelf_depth_frac", 0.6, 0.95);
            units.push(Unit::Center(bx([0.0, leg_h / 2.0, 0.0], [w - 2.0 * tp, tsh, dep * f])));
        }
    }
    units
}

fn cabinet_layout(d: &mut Dims) -> Vec<Unit> {
    let w = d.get("body_width", 0.5, 1.0);
    let h = d.get("body_height", 0.6, 1.2);
    let dep = d.get("body_depth", 0.35, 0.6);
    let base = d.rng.gen_range(0..3);
    let base_h = if base == 0 { 0.0 } else { d.get("base_height", 0.05, 0.15) };
    let yc = base_h + h / 2.0;
    let mut units = vec![Unit::Center(bx([0.0, yc, 0.0], [w, h, dep]))];
    match base {
        1 => {
            let tl = d.get("leg_thickness", 0.04, 0.07);
            for z in [-1.0, 1.0] {
                units.push(Unit::Pair(bx(
                    [w / 2.0 - tl / 2.0, base_h / 2.0, z * (dep / 2.0 - tl / 2.0)],
                    [tl, base_h, tl],
                )));
            }
        }
        2 => {
            let inset = d.get("plinth_inset", 0.02, 0.05);
            units.push(Unit::Center(bx(
                [0.0, base_h / 2.0, 0.0],
                [w - 2.0 * inset, base_h, dep - 2.0 * inset],
            )));
        }
        _ => {}
    }
    if d.chance(0.5) {
        let tt = d.get("top_thickness", 0.03, 0.05);
        let o = d.get("top_overhang", 0.005, 0.04);
        units.push(Unit::Center(bx(
            [0.0, base_h + h + tt / 2.0, 0.0],
            [w + 2.0 * o, tt, dep + 2.0 * o],
        )));
    }
    if d.chance(0.6) {
        let td = d.get("door_thickness", 0.02, 0.04);
        units.push(Unit::Pair(bx([w / 4.0, yc, dep / 2.0 + td / 2.0], [w / 2.0, h, td])));
    }
    units
}

fn mirror_box(b: &Aabb) -> Aabb {
    bx(mirror(&b.center), b.dims)
}

fn part_count(units: &[Unit]) -> usize {
    units
        .iter()
        .map(|u| match u {
            Unit::Center(_) => 1,
            Unit::Pair(_) => 2,
        })
        .sum()
}

/// Splits `n` points over units by surface area so that centred parts get
/// an even count and mirror pairs equal counts.
fn allocate(units: &[Unit], n: usize) -> Vec<usize> {
    let areas: Vec<f64> = units
        .iter()
        .map(|u| match u {
            Unit::Center(b) => b.surface_area(),
            Unit::Pair(b) => 2.0 * b.surface_area(),
        })
        .collect();
    let total: f64 = areas.iter().sum();
    // counts are per unit and always even: 2m for a centre part, m + m for a pair
    let mut counts: Vec<usize> = areas
        .iter()
        .map(|a| (2 * ((n as f64 * a / total / 2.0).round() as usize)).max(2))
        .collect();
    let largest = (0..units.len())
        .max_by(|&a, &b| areas[a].total_cmp(&areas[b]).then(b.cmp(&a)))
        .unwrap();
    let sum: usize = counts.iter().sum();
    if sum > n {
        counts[largest] -= sum - n;
    } else {
        counts[largest] += n - sum;
    }
    counts
}

fn build_shape(name: String, units: &[Unit], n_points: usize, tau: f64, rng: &mut ChaCha8Rng) -> Result<SourceShape> {
    let counts = allocate(units, n_points);
    let mut parts = Vec::new();
    for (u, &count) in units.iter().zip(&counts) {
        match u {
            Unit::Center(b) => {
                let half = sample_surface(&b.to_mesh(), count / 2, rng)?.into_points();
                let mut pts = half.clone();
                pts.extend(half.iter().map(mirror));
                parts.push(Part::new(parts.len(), *b, PointCloud::new(pts)?)?);
            }
            Unit::Pair(b) => {
                let left = mirror_box(b);
                let pts = sample_surface(&left.to_mesh(), count / 2, rng)?.into_points();
                let mirrored: Vec<Vec3> = pts.iter().map(mirror).collect();
                parts.push(Part::new(parts.len(), left, PointCloud::new(pts)?)?);
                parts.push(Part::new(parts.len(), *b, PointCloud::new(mirrored)?)?);
            }
        }
    }
    SourceShape::new(name, parts, tau)
}

/// True when the contact graph links every part.
pub fn is_connected(shape: &SourceShape) -> bool {
    let n = shape.part_count();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for c in &shape.constraint.contacts {
        let (a, b) = (find(&mut parent, c.parts.0), find(&mut parent, c.parts.1));
        parent[a] = b;
    }
    let root = find(&mut parent, 0);
    (0..n).all(|i| find(&mut parent, i) == root)
}

fn generate_one(spec: &GenSpec, index: usize) -> Result<SourceShape> {
    let family = spec.families[index % spec.families.len()];
    let (lo, hi) = spec.part_bounds(family);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    for _ in 0..MAX_ATTEMPTS {
        let mut dims = Dims {
            rng: &mut rng,
            ranges: &spec.ranges,
        };
        let units = match family {
            Family::Chair => chair_layout(&mut dims),
            Family::Table => table_layout(&mut dims),
            Family::Cabinet => cabinet_layout(&mut dims),
        };
        let count = part_count(&units);
        if count < lo || count > hi {
            continue;
        }
        let name = format!("{}-{index:04}", family.name());
        let shape = build_shape(name, &units, spec.points_per_shape, spec.tau, &mut rng)?;
        if is_connected(&shape) {
            return Ok(shape);
        }
    }
    Err(Error::InvalidConfig(format!(
        "no connected {} layout within {lo}..={hi} parts after {MAX_ATTEMPTS} attempts",
        family.name()
    )))
}

/// Generates `n` shapes; shape `i` depends only on `(spec, i)`.
pub fn generate_database(spec: &GenSpec, n: usize) -> Result<Vec<SourceShape>> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::EmptyDatabase);
    }
    (0..n).into_par_iter().map(|i| generate_one(spec, i)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Provenance {
    Planted {
        source: usize,
        offset: DeformationParams,
        noise_sigma: f64,
    },
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetRecord {
    pub cloud: PointCloud,
    pub provenance: Provenance,
}

impl TargetRecord {
    pub fn source(&self) -> Option<usize> {
        match self.provenance {
            Provenance::Planted { source, .. } => Some(source),
            Provenance::External => None,
        }
    }
}

/// A random feasible offset with max-norm in `(0.3, 1] · scale`, shrunk
/// until every deformed extent keeps at least half its default size.
pub fn random_feasible_offset(shape: &SourceShape, scale: f64, alpha: f64, rng: &mut ChaCha8Rng) -> DeformationParams {
    if scale == 0.0 {
        return DeformationParams::zeros(shape.part_count());
    }
    let raw: Vec<f64> = (0..shape.param_count()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let p = shape.constraint.project(&raw);
    let m = p.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let magnitude = scale * rng.gen_range(0.3..=1.0);
    let mut off: Vec<f64> = if m > 0.0 {
        p.iter().map(|v| v * magnitude / m).collect()
    } else {
        p
    };
    loop {
        let ok = off.chunks_exact(6).zip(shape.default_params.0.chunks_exact(6)).all(|(o, d)| {
            (3..6).all(|a| d[a] + alpha * o[a] >= 0.5 * d[a])
        });
        if ok {
            return DeformationParams(off);
        }
        off.iter_mut().for_each(|v| *v *= 0.5);
    }
}

/// Targets made from random sources deformed by random feasible offsets,
/// plus isotropic Gaussian noise.
pub fn generate_targets(
    db: &[SourceShape],
    n_targets: usize,
    offset_scale: f64,
    noise_sigma: f64,
    alpha: f64,
    seed: u64,
) -> Result<Vec<TargetRecord>> {
    if db.is_empty() {
        return Err(Error::EmptyDatabase);
    }
    if !(offset_scale >= 0.0) || !(noise_sigma >= 0.0) {
        return Err(Error::InvalidConfig("offset_scale and noise_sigma must be >= 0".into()));
    }
    (0..n_targets)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let source = rng.gen_range(0..db.len());
            let shape = &db[source];
            let offset = random_feasible_offset(shape, offset_scale, alpha, &mut rng);
            let mut pts = apply_deformation(shape, &offset, alpha)?.into_points();
            if noise_sigma > 0.0 {
                let noise = Normal::new(0.0, noise_sigma).expect("valid sigma");
                for p in &mut pts {
                    for c in p.iter_mut() {
                        *c += noise.sample(&mut rng);
                    }
                }
            }
            Ok(TargetRecord {
                cloud: PointCloud::new(pts)?,
                provenance: Provenance::Planted {
                    source,
                    offset,
                    noise_sigma,
                },
            })
        })
        .collect()
}

/// Deterministic shuffled split into (train, test) index lists.
pub fn split(n: usize, train_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((n as f64) * train_fraction).round() as usize;
    let test = idx.split_off(n_train.min(n));
    (idx, test)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::chamfer;
    use crate::partmodel::symmetry_loss;

    fn spec(points: usize) -> GenSpec {
        GenSpec {
            points_per_shape: points,
            seed: 11,
            ..Default::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_database(&spec(256), 1).unwrap();
        let b = generate_database(&spec(256), 1).unwrap();
        assert_eq!(a[0].default_cloud(), b[0].default_cloud());
        assert_eq!(a[0].default_params, b[0].default_params);
    }

    #[test]
    fn shapes_are_connected_symmetric_and_sized() {
        let db = generate_database(&spec(256), 60).unwrap();
        for s in &db {
            let fam = if s.name.starts_with("chair") {
                Family::Chair
            } else if s.name.starts_with("table") {
                Family::Table
            } else {
                Family::Cabinet
            };
            let (lo, hi) = fam.part_range();
            assert!((lo..=hi).contains(&s.part_count()), "{}: {} parts", s.name, s.part_count());
            assert!(is_connected(s));
            assert!(s.constraint.contacts.len() + 1 >= s.part_count());
            assert_eq!(s.default_cloud().len(), 256);
            assert!(symmetry_loss(s.default_cloud()) < 1e-12, "{}", s.name);
        }
        for i in 0..db.len() {
            for j in i + 1..db.len() {
                assert_ne!(db[i].default_params, db[j].default_params);
            }
        }
    }

    #[test]
    fn part_count_bounds_are_honoured() {
        let s = GenSpec {
            families: vec![Family::Chair],
            min_parts: Some(7),
            ..spec(128)
        };
        for shape in generate_database(&s, 10).unwrap() {
            assert!(shape.part_count() >= 7);
        }
        let bad = GenSpec {
            families: vec![Family::Table],
            min_parts: Some(7),
            ..spec(128)
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn unknown_range_key_is_rejected() {
        let mut s = spec(128);
        s.ranges.insert("wing_span".into(), [0.1, 0.2]);
        assert!(matches!(s.validate(), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn zero_offset_zero_noise_target_is_the_source() {
        let db = generate_database(&spec(256), 3).unwrap();
        let t = generate_targets(&db, 4, 0.0, 0.0, 0.1, 5).unwrap();
        for r in &t {
            let s = &db[r.source().unwrap()];
            assert_eq!(&r.cloud, s.default_cloud());
            assert_eq!(chamfer(&r.cloud, s.default_cloud()), 0.0);
        }
    }

    #[test]
    fn planted_offsets_are_feasible_and_exact() {
        let db = generate_database(&spec(256), 6).unwrap();
        let t = generate_targets(&db, 12, 1.0, 0.0, 0.1, 2).unwrap();
        for r in &t {
            let Provenance::Planted { source, offset, .. } = &r.provenance else {
                panic!("planted expected")
            };
            let s = &db[*source];
            assert!(s.constraint.residual(&offset.0).iter().all(|v| v.abs() < 1e-8));
            let fit = apply_deformation(s, offset, 0.1).unwrap();
            assert!(chamfer(&fit, &r.cloud) < 1e-8);
        }
    }

    #[test]
    fn split_is_eighty_twenty() {
        let (train, test) = split(200, 0.8, 3);
        assert_eq!((train.len(), test.len()), (160, 40));
        let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
        all.sort();
        assert_eq!(all, (0..200).collect::<Vec<_>>());
        assert_eq!(split(200, 0.8, 3), (train, test));
    }
}
