//! Per-case multi-annotation model: ROI instances carrying R independent
//! delineations, composite ground-truth enumeration and sampling, majority
//! aggregation, and inter-annotator agreement.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::strata::CaseCovariates;
use crate::volgrid::{self, BinaryMask, ClassCode, Geometry, LabelVolume};

/// One anatomical object annotated independently R times.
#[derive(Debug, Clone)]
pub struct RoiInstance {
    pub instance_id: String,
    pub class: ClassCode,
    pub delineations: Vec<BinaryMask>,
}

/// A case's full annotation: N ROI instances on a shared reference grid.
#[derive(Debug, Clone)]
pub struct CaseAnnotation {
    pub case_id: String,
    pub geometry: Geometry,
    pub rois: Vec<RoiInstance>,
    pub covariates: Option<CaseCovariates>,
}

/// A choice of one delineation index per ROI, identifying one of the
/// R^N composite ground truths.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CompositeSelector {
    pub choices: Vec<usize>,
}

/// Sampling parameters for composite ground truths. The per-case stream
/// is derived from (master_seed, case_id), so results do not depend on
/// case evaluation order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, Deserialize)]
pub struct SamplingPlan {
    pub master_seed: u64,
    pub samples_per_case: usize,
}

impl Default for SamplingPlan {
    fn default() -> Self {
        SamplingPlan {
            master_seed: 0,
            samples_per_case: 10,
        }
    }
}

impl CaseAnnotation {
    pub fn validate(&self) -> Result<()> {
        if self.rois.is_empty() {
            return Err(Error::Annotation(format!(
                "case {} has no ROI instances",
                self.case_id
            )));
        }
        let mut seen = HashSet::new();
        for roi in &self.rois {
            if !seen.insert(roi.instance_id.as_str()) {
                return Err(Error::Annotation(format!(
                    "case {}: duplicate instance_id {:?}",
                    self.case_id, roi.instance_id
                )));
            }
            if roi.class == ClassCode::Background {
                return Err(Error::Annotation(format!(
                    "case {}: ROI {:?} has background class",
                    self.case_id, roi.instance_id
                )));
            }
            if roi.delineations.is_empty() {
                return Err(Error::Annotation(format!(
                    "case {}: ROI {:?} has no delineations",
                    self.case_id, roi.instance_id
                )));
            }
            for d in &roi.delineations {
                if !d.geometry().compatible(&self.geometry) {
                    return Err(Error::Geometry(format!(
                        "case {}: ROI {:?} delineation grid {:?} does not match reference {:?}",
                        self.case_id,
                        roi.instance_id,
                        d.geometry(),
                        self.geometry
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn selector_valid(&self, s: &CompositeSelector) -> bool {
        s.choices.len() == self.rois.len()
            && s.choices
                .iter()
                .zip(self.rois.iter())
                .all(|(&c, roi)| c < roi.delineations.len())
    }
}

/// Number of composite ground truths (R^N), saturating at 2^63-1.
pub fn composite_count(c: &CaseAnnotation) -> u64 {
    const CAP: u64 = i64::MAX as u64;
    let mut total: u64 = 1;
    for roi in &c.rois {
        let r = roi.delineations.len() as u64;
        total = match total.checked_mul(r) {
            Some(t) if t <= CAP => t,
            _ => return CAP,
        };
    }
    total
}

/// All selectors in lexicographic order (first ROI most significant).
/// Only callable when the count is small enough to enumerate.
pub fn enumerate_composites(c: &CaseAnnotation) -> Vec<CompositeSelector> {
    let radices: Vec<usize> = c.rois.iter().map(|r| r.delineations.len()).collect();
    let total = composite_count(c) as usize;
    let mut out = Vec::with_capacity(total);
    let mut choices = vec![0usize; radices.len()];
    loop {
        out.push(CompositeSelector {
            choices: choices.clone(),
        });
        // increment least-significant (last) digit
        let mut pos = radices.len();
        loop {
            if pos == 0 {
                return out;
            }
            pos -= 1;
            choices[pos] += 1;
            if choices[pos] < radices[pos] {
                break;
            }
            choices[pos] = 0;
        }
    }
}

/// Paint priority: later classes overwrite earlier on overlap, so tumor
/// overrides cyst overrides kidney.
const PAINT_ORDER: [ClassCode; 3] = [ClassCode::Kidney, ClassCode::Cyst, ClassCode::Tumor];

fn paint_rois(
    c: &CaseAnnotation,
    mask_for: impl Fn(usize, &RoiInstance) -> Result<BinaryMask>,
) -> Result<LabelVolume> {
    let mut labels = vec![0u8; c.geometry.voxel_count()];
    for class in PAINT_ORDER {
        for (idx, roi) in c.rois.iter().enumerate().filter(|(_, r)| r.class == class) {
            let mask = mask_for(idx, roi)?;
            if !mask.geometry().compatible(&c.geometry) {
                return Err(Error::Geometry(format!(
                    "case {}: ROI {:?} mask grid does not match reference",
                    c.case_id, roi.instance_id
                )));
            }
            for (l, &inside) in labels.iter_mut().zip(mask.data()) {
                if inside {
                    *l = class.code();
                }
            }
        }
    }
    LabelVolume::new(c.geometry, labels)
}

/// Realizes one composite ground truth from a delineation choice per ROI.
pub fn realize_composite(c: &CaseAnnotation, s: &CompositeSelector) -> Result<LabelVolume> {
    if !c.selector_valid(s) {
        return Err(Error::Annotation(format!(
            "selector {:?} invalid for case {} ({} ROIs)",
            s.choices,
            c.case_id,
            c.rois.len()
        )));
    }
    paint_rois(c, |idx, roi| Ok(roi.delineations[s.choices[idx]].clone()))
}

/// Stable 64-bit stream id for (master_seed, case_id). FNV-1a, fixed
/// here so sampled composites are reproducible across versions.
pub fn case_stream_seed(master_seed: u64, case_id: &str) -> u64 {
    const OFFSET: u64 = 0xcbf29ce484222325;
    const PRIME: u64 = 0x100000001b3;
    let mut h = OFFSET;
    for b in master_seed.to_le_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(PRIME);
    }
    for b in case_id.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(PRIME);
    }
    h
}

/// Draws min(K, R^N) selectors uniformly without replacement. Exhaustive
/// (lexicographic) when K covers the whole space.
pub fn sample_composites(c: &CaseAnnotation, plan: &SamplingPlan) -> Vec<CompositeSelector> {
    let total = composite_count(c);
    let k = plan.samples_per_case as u64;
    if k >= total {
        return enumerate_composites(c);
    }
    let radices: Vec<usize> = c.rois.iter().map(|r| r.delineations.len()).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(case_stream_seed(plan.master_seed, &c.case_id));
    let mut seen: HashSet<Vec<usize>> = HashSet::with_capacity(plan.samples_per_case);
    let mut out = Vec::with_capacity(plan.samples_per_case);
    while out.len() < plan.samples_per_case {
        let choices: Vec<usize> = radices.iter().map(|&r| rng.gen_range(0..r)).collect();
        if seen.insert(choices.clone()) {
            out.push(CompositeSelector { choices });
        }
    }
    out
}

/// Majority vote per ROI (strict > R/2), merged like a composite.
/// Defined only for odd R; even R has no tie rule and is rejected.
pub fn majority_aggregate(c: &CaseAnnotation) -> Result<LabelVolume> {
    for roi in &c.rois {
        if roi.delineations.len() % 2 == 0 {
            return Err(Error::Annotation(format!(
                "case {}: ROI {:?} has an even number of delineations ({}); majority vote is ambiguous",
                c.case_id,
                roi.instance_id,
                roi.delineations.len()
            )));
        }
    }
    paint_rois(c, |_, roi| {
        let r = roi.delineations.len();
        let n = c.geometry.voxel_count();
        let mut votes = vec![0u16; n];
        for d in &roi.delineations {
            for (v, &inside) in votes.iter_mut().zip(d.data()) {
                if inside {
                    *v += 1;
                }
            }
        }
        let data = votes.iter().map(|&v| (v as usize) * 2 > r).collect();
        BinaryMask::new(c.geometry, data)
    })
}

/// Mean pairwise volumetric Dice between delineation indices of a class.
/// All ROIs of the class are merged per delineation index first.
pub fn interannotator_agreement(c: &CaseAnnotation, class: ClassCode) -> Result<f64> {
    let rois: Vec<&RoiInstance> = c.rois.iter().filter(|r| r.class == class).collect();
    if rois.is_empty() {
        return Err(Error::AbsentClass(class.code(), c.case_id.clone()));
    }
    let r = rois.iter().map(|roi| roi.delineations.len()).min().unwrap();
    if r < 2 {
        return Err(Error::Annotation(format!(
            "case {}: need at least 2 delineations per ROI for agreement",
            c.case_id
        )));
    }
    let n = c.geometry.voxel_count();
    let merged: Vec<BinaryMask> = (0..r)
        .map(|idx| {
            let mut data = vec![false; n];
            for roi in &rois {
                for (m, &inside) in data.iter_mut().zip(roi.delineations[idx].data()) {
                    *m |= inside;
                }
            }
            BinaryMask::new(c.geometry, data).expect("length preserved")
        })
        .collect();
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for a in 0..r {
        for b in (a + 1)..r {
            sum += crate::metrics::dice(&merged[a], &merged[b])?;
            pairs += 1;
        }
    }
    Ok(sum / pairs as f64)
}

// --- case manifest loading -------------------------------------------------

#[derive(Debug, Deserialize)]
struct RoiManifest {
    instance_id: String,
    class: u8,
    delineations: Vec<String>,
}

#[derive(Debug, Deserialize)]
struct CaseManifest {
    case_id: String,
    reference: String,
    rois: Vec<RoiManifest>,
    #[serde(default)]
    covariates: Option<CaseCovariates>,
}

fn read_mask(path: &Path, reference: &Geometry) -> Result<BinaryMask> {
    let v = volgrid::read_volume(path)?;
    if !v.geometry().compatible(reference) {
        return Err(Error::Geometry(format!(
            "delineation {} grid {:?} does not match case reference {:?}",
            path.display(),
            v.geometry(),
            reference
        )));
    }
    if v.labels().iter().any(|&c| c > 1) {
        return Err(Error::Volume(format!(
            "delineation {} is not binary (labels must be 0 or 1)",
            path.display()
        )));
    }
    let data = v.labels().iter().map(|&c| c == 1).collect();
    BinaryMask::new(*v.geometry(), data)
}

/// Loads a case manifest and all volumes it references. Paths in the
/// manifest are relative to the manifest file.
pub fn load_case_manifest(path: impl AsRef<Path>) -> Result<CaseAnnotation> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: CaseManifest = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    let dir = path.parent().unwrap_or_else(|| Path::new(""));
    let reference = volgrid::read_volume(dir.join(&manifest.reference))?;
    let geometry = *reference.geometry();
    let rois = manifest
        .rois
        .iter()
        .map(|roi| {
            let class = ClassCode::from_u8(roi.class)?;
            let delineations = roi
                .delineations
                .iter()
                .map(|d| read_mask(&dir.join(d), &geometry))
                .collect::<Result<Vec<_>>>()?;
            Ok(RoiInstance {
                instance_id: roi.instance_id.clone(),
                class,
                delineations,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let case = CaseAnnotation {
        case_id: manifest.case_id,
        geometry,
        rois,
        covariates: manifest.covariates,
    };
    case.validate()?;
    Ok(case)
}
