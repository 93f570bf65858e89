//! Volumetric Dice, Surface Dice, surface extraction and mm-space
//! distance machinery, hierarchical evaluation classes, and the
//! surface-loss penalty.

use serde::{Deserialize, Serialize};

use crate::annotations::{realize_composite, CaseAnnotation, CompositeSelector};
use crate::error::{Error, Result};
use crate::volgrid::{BinaryMask, LabelVolume};

/// Hierarchical evaluation classes. Membership is nested:
/// Tumor ⊆ Masses ⊆ KidneyAndMasses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum HecId {
    KidneyAndMasses,
    Masses,
    Tumor,
}

impl HecId {
    pub const ALL: [HecId; 3] = [HecId::KidneyAndMasses, HecId::Masses, HecId::Tumor];

    /// Label codes belonging to this HEC.
    pub fn member_codes(self) -> &'static [u8] {
        match self {
            HecId::KidneyAndMasses => &[1, 2, 3],
            HecId::Masses => &[2, 3],
            HecId::Tumor => &[2],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            HecId::KidneyAndMasses => "kidney_and_masses",
            HecId::Masses => "masses",
            HecId::Tumor => "tumor",
        }
    }

    pub fn from_name(name: &str) -> Result<HecId> {
        match name {
            "kidney_and_masses" => Ok(HecId::KidneyAndMasses),
            "masses" => Ok(HecId::Masses),
            "tumor" => Ok(HecId::Tumor),
            other => Err(Error::Data(format!("unknown HEC name {other:?}"))),
        }
    }
}

/// Surface Dice tolerance (mm) per HEC.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurfaceDiceConfig {
    pub kidney_and_masses: f64,
    pub masses: f64,
    pub tumor: f64,
}

impl Default for SurfaceDiceConfig {
    fn default() -> Self {
        SurfaceDiceConfig {
            kidney_and_masses: 1.0,
            masses: 1.0,
            tumor: 1.0,
        }
    }
}

impl SurfaceDiceConfig {
    pub fn tolerance(&self, hec: HecId) -> f64 {
        match hec {
            HecId::KidneyAndMasses => self.kidney_and_masses,
            HecId::Masses => self.masses,
            HecId::Tumor => self.tumor,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for hec in HecId::ALL {
            if !(self.tolerance(hec) > 0.0) {
                return Err(Error::Config(format!(
                    "surface dice tolerance for {} must be > 0",
                    hec.name()
                )));
            }
        }
        Ok(())
    }
}

/// Normalization of the surface-loss sum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SurfaceLossConfig {
    /// C = |FP ∪ FN|, making the loss a mean distance over misclassified
    /// voxels (scale-free across case sizes).
    MeanOverMisclassified,
    /// Fixed constant C > 0.
    FixedConstant(f64),
}

/// One metric measurement: (team, case, HEC, composite sample).
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRecord {
    pub team_id: String,
    pub case_id: String,
    pub composite_idx: usize,
    pub hec: HecId,
    pub dice: f64,
    pub surface_dice: f64,
}

/// Binary membership mask of a HEC over a label volume.
pub fn hec_mask(v: &LabelVolume, hec: HecId) -> BinaryMask {
    BinaryMask::from_labels(v, hec.member_codes())
}

/// Volumetric Sørensen-Dice: 2|A∩B| / (|A|+|B|). Both empty -> 1.0.
pub fn dice(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if !a.geometry().compatible(b.geometry()) {
        return Err(Error::Geometry(
            "dice operands are on different grids".to_string(),
        ));
    }
    let mut inter = 0usize;
    let mut total = 0usize;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        inter += (x && y) as usize;
        total += x as usize + y as usize;
    }
    if total == 0 {
        Ok(1.0)
    } else {
        Ok(2.0 * inter as f64 / total as f64)
    }
}

/// The boundary of a mask as area-weighted face elements: one element per
/// exposed voxel face, positioned at the face center in mm. The volume
/// border counts as outside, so a mask touching the border still has a
/// closed surface.
#[derive(Debug, Clone)]
pub struct SurfaceElementSet {
    pub points: Vec<[f64; 3]>,
    pub areas: Vec<f64>,
}

impl SurfaceElementSet {
    pub fn total_area(&self) -> f64 {
        self.areas.iter().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Extracts the exposed-face surface of a mask.
pub fn extract_surface(m: &BinaryMask) -> SurfaceElementSet {
    let g = m.geometry();
    let [nx, ny, nz] = g.dims;
    let [sx, sy, sz] = g.spacing_mm;
    // face area per axis: product of the two spanning spacings
    let face_area = [sy * sz, sx * sz, sx * sy];
    let mut points = Vec::new();
    let mut areas = Vec::new();
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                if !m.get(i, j, k) {
                    continue;
                }
                let center = [
                    (i as f64 + 0.5) * sx,
                    (j as f64 + 0.5) * sy,
                    (k as f64 + 0.5) * sz,
                ];
                let neighbors: [(i64, i64, i64, usize, f64); 6] = [
                    (-1, 0, 0, 0, -0.5 * sx),
                    (1, 0, 0, 0, 0.5 * sx),
                    (0, -1, 0, 1, -0.5 * sy),
                    (0, 1, 0, 1, 0.5 * sy),
                    (0, 0, -1, 2, -0.5 * sz),
                    (0, 0, 1, 2, 0.5 * sz),
                ];
                for (di, dj, dk, axis, offset) in neighbors {
                    let ni = i as i64 + di;
                    let nj = j as i64 + dj;
                    let nk = k as i64 + dk;
                    let outside = ni < 0
                        || nj < 0
                        || nk < 0
                        || ni >= nx as i64
                        || nj >= ny as i64
                        || nk >= nz as i64
                        || !m.get(ni as usize, nj as usize, nk as usize);
                    if outside {
                        let mut p = center;
                        p[axis] += offset;
                        points.push(p);
                        areas.push(face_area[axis]);
                    }
                }
            }
        }
    }
    SurfaceElementSet { points, areas }
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Regular-grid bucketing of a point set for within-tolerance and
/// nearest-distance queries. Exact: queries fall back to scanning every
/// candidate bucket the geometry admits.
pub struct PointGrid {
    cell: f64,
    min: [f64; 3],
    n: [usize; 3],
    buckets: Vec<Vec<u32>>,
    points: Vec<[f64; 3]>,
}

impl PointGrid {
    pub fn build(points: Vec<[f64; 3]>, cell: f64) -> PointGrid {
        assert!(cell > 0.0);
        if points.is_empty() {
            return PointGrid {
                cell,
                min: [0.0; 3],
                n: [1, 1, 1],
                buckets: vec![Vec::new()],
                points,
            };
        }
        let mut min = [f64::INFINITY; 3];
        let mut max = [f64::NEG_INFINITY; 3];
        for p in &points {
            for a in 0..3 {
                min[a] = min[a].min(p[a]);
                max[a] = max[a].max(p[a]);
            }
        }
        let mut n = [1usize; 3];
        for a in 0..3 {
            n[a] = (((max[a] - min[a]) / cell).floor() as usize + 1).max(1);
        }
        let mut buckets = vec![Vec::new(); n[0] * n[1] * n[2]];
        for (idx, p) in points.iter().enumerate() {
            let c = Self::cell_of(p, &min, cell, &n);
            buckets[(c[2] * n[1] + c[1]) * n[0] + c[0]].push(idx as u32);
        }
        PointGrid {
            cell,
            min,
            n,
            buckets,
            points,
        }
    }

    fn cell_of(p: &[f64; 3], min: &[f64; 3], cell: f64, n: &[usize; 3]) -> [usize; 3] {
        let mut c = [0usize; 3];
        for a in 0..3 {
            let raw = ((p[a] - min[a]) / cell).floor();
            c[a] = (raw.max(0.0) as usize).min(n[a] - 1);
        }
        c
    }

    /// Lattice coordinate of `p` (may lie outside the stored range).
    fn lattice_of(&self, p: &[f64; 3]) -> [i64; 3] {
        let mut c = [0i64; 3];
        for a in 0..3 {
            c[a] = ((p[a] - self.min[a]) / self.cell).floor() as i64;
        }
        c
    }

    fn bucket(&self, cx: i64, cy: i64, cz: i64) -> Option<&[u32]> {
        if cx < 0 || cy < 0 || cz < 0 {
            return None;
        }
        let (cx, cy, cz) = (cx as usize, cy as usize, cz as usize);
        if cx >= self.n[0] || cy >= self.n[1] || cz >= self.n[2] {
            return None;
        }
        Some(&self.buckets[(cz * self.n[1] + cy) * self.n[0] + cx])
    }

    /// True iff some stored point lies within `tol` of `p`.
    pub fn any_within(&self, p: &[f64; 3], tol: f64) -> bool {
        if self.points.is_empty() {
            return false;
        }
        let lo = self.lattice_of(&[p[0] - tol, p[1] - tol, p[2] - tol]);
        let hi = self.lattice_of(&[p[0] + tol, p[1] + tol, p[2] + tol]);
        let t2 = tol * tol;
        for cz in lo[2]..=hi[2] {
            for cy in lo[1]..=hi[1] {
                for cx in lo[0]..=hi[0] {
                    if let Some(bucket) = self.bucket(cx, cy, cz) {
                        if bucket.iter().any(|&i| dist2(&self.points[i as usize], p) <= t2) {
                            return true;
                        }
                    }
                }
            }
        }
        false
    }

    /// Euclidean distance from `p` to the nearest stored point.
    /// Infinity when the set is empty.
    pub fn nearest_distance(&self, p: &[f64; 3]) -> f64 {
        if self.points.is_empty() {
            return f64::INFINITY;
        }
        let c = self.lattice_of(p);
        let mut best = f64::INFINITY;
        // max shell needed to cover the whole grid from any lattice cell
        let span = (0..3)
            .map(|a| {
                let lo = (c[a]).unsigned_abs() as usize;
                let hi = (self.n[a] as i64 - 1 - c[a]).unsigned_abs() as usize;
                lo.max(hi)
            })
            .max()
            .unwrap();
        for shell in 0..=span as i64 {
            // a point in a cell at Chebyshev lattice distance >= `shell` is
            // at least (shell - 1) * cell away from p
            if shell > 0 {
                let bound = ((shell - 1) as f64) * self.cell;
                if best <= bound * bound {
                    break;
                }
            }
            self.scan_shell(&c, shell, p, &mut best);
        }
        best.sqrt()
    }

    fn scan_shell(&self, c: &[i64; 3], shell: i64, p: &[f64; 3], best2: &mut f64) {
        let scan = |this: &Self, cx: i64, cy: i64, cz: i64, best2: &mut f64| {
            if let Some(bucket) = this.bucket(cx, cy, cz) {
                for &i in bucket {
                    let d2 = dist2(&this.points[i as usize], p);
                    if d2 < *best2 {
                        *best2 = d2;
                    }
                }
            }
        };
        if shell == 0 {
            scan(self, c[0], c[1], c[2], best2);
            return;
        }
        for dz in -shell..=shell {
            for dy in -shell..=shell {
                for dx in -shell..=shell {
                    if dx.abs().max(dy.abs()).max(dz.abs()) != shell {
                        continue;
                    }
                    scan(self, c[0] + dx, c[1] + dy, c[2] + dz, best2);
                }
            }
        }
    }
}

/// Surface Dice at tolerance `tol` (mm): the fraction of the combined
/// boundary area lying within `tol` of the other mask's boundary.
/// Both surfaces empty -> 1.0; exactly one empty -> 0.0.
pub fn surface_dice(pred: &BinaryMask, gt: &BinaryMask, tol: f64) -> Result<f64> {
    if !pred.geometry().compatible(gt.geometry()) {
        return Err(Error::Geometry(
            "surface_dice operands are on different grids".to_string(),
        ));
    }
    if !(tol > 0.0) {
        return Err(Error::Config(format!("tolerance {tol} must be > 0")));
    }
    let sp = extract_surface(pred);
    let sg = extract_surface(gt);
    match (sp.is_empty(), sg.is_empty()) {
        (true, true) => return Ok(1.0),
        (true, false) | (false, true) => return Ok(0.0),
        _ => {}
    }
    let grid_p = PointGrid::build(sp.points.clone(), tol);
    let grid_g = PointGrid::build(sg.points.clone(), tol);
    let mut close = 0.0;
    for (p, &a) in sp.points.iter().zip(&sp.areas) {
        if grid_g.any_within(p, tol) {
            close += a;
        }
    }
    for (p, &a) in sg.points.iter().zip(&sg.areas) {
        if grid_p.any_within(p, tol) {
            close += a;
        }
    }
    Ok(close / (sp.total_area() + sg.total_area()))
}

/// Surface-loss penalty: the sum over misclassified voxels (FP ∪ FN) of
/// the mm distance from the voxel center to the nearest ground-truth
/// surface point, scaled by 1/C.
pub fn surface_loss(pred: &BinaryMask, gt: &BinaryMask, cfg: SurfaceLossConfig) -> Result<f64> {
    if !pred.geometry().compatible(gt.geometry()) {
        return Err(Error::Geometry(
            "surface_loss operands are on different grids".to_string(),
        ));
    }
    if gt.is_empty() {
        return Err(Error::EmptySurface);
    }
    if let SurfaceLossConfig::FixedConstant(c) = cfg {
        if !(c > 0.0) {
            return Err(Error::Config(format!("surface loss constant {c} must be > 0")));
        }
    }
    let surface = extract_surface(gt);
    let g = pred.geometry();
    let cell = (g.spacing_mm[0] + g.spacing_mm[1] + g.spacing_mm[2]) / 3.0;
    let grid = PointGrid::build(surface.points, cell);
    let mut sum = 0.0;
    let mut misclassified = 0usize;
    for (idx, (&p, &t)) in pred.data().iter().zip(gt.data()).enumerate() {
        if p == t {
            continue;
        }
        misclassified += 1;
        let (i, j, k) = g.delinearize(idx);
        let center = g.voxel_center_mm(i, j, k).expect("index in range");
        sum += grid.nearest_distance(&center);
    }
    let c = match cfg {
        SurfaceLossConfig::MeanOverMisclassified => {
            if misclassified == 0 {
                return Ok(0.0);
            }
            misclassified as f64
        }
        SurfaceLossConfig::FixedConstant(c) => c,
    };
    Ok(sum / c)
}

/// Scores one prediction against sampled composite ground truths: one
/// record per (selector, HEC), ordered by (selector index, HEC).
pub fn evaluate_case(
    team_id: &str,
    pred: &LabelVolume,
    case: &CaseAnnotation,
    selectors: &[CompositeSelector],
    cfg: &SurfaceDiceConfig,
) -> Result<Vec<MetricRecord>> {
    if !pred.geometry().compatible(&case.geometry) {
        return Err(Error::Geometry(format!(
            "prediction grid {:?} does not match case {} reference {:?}",
            pred.geometry(),
            case.case_id,
            case.geometry
        )));
    }
    let mut records = Vec::with_capacity(selectors.len() * HecId::ALL.len());
    for (composite_idx, selector) in selectors.iter().enumerate() {
        let gt = realize_composite(case, selector)?;
        for hec in HecId::ALL {
            let pm = hec_mask(pred, hec);
            let gm = hec_mask(&gt, hec);
            records.push(MetricRecord {
                team_id: team_id.to_string(),
                case_id: case.case_id.clone(),
                composite_idx,
                hec,
                dice: dice(&pm, &gm)?,
                surface_dice: surface_dice(&pm, &gm, cfg.tolerance(hec))?,
            });
        }
    }
    Ok(records)
}
