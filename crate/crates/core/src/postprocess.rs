//! Connected-component cleanup of prediction volumes: per-class size
//! thresholds and the lesion-kidney contact rule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volgrid::{BinaryMask, ClassCode, LabelVolume};

/// Voxel adjacency used for component labeling. Serialized as the
/// neighbor count (6 or 26).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connectivity {
    Six,
    TwentySix,
}

impl Serialize for Connectivity {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_u8(match self {
            Connectivity::Six => 6,
            Connectivity::TwentySix => 26,
        })
    }
}

impl<'de> Deserialize<'de> for Connectivity {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match u8::deserialize(d)? {
            6 => Ok(Connectivity::Six),
            26 => Ok(Connectivity::TwentySix),
            other => Err(serde::de::Error::custom(format!(
                "connectivity must be 6 or 26, got {other}"
            ))),
        }
    }
}

impl Connectivity {
    fn offsets(self) -> &'static [(i64, i64, i64)] {
        const SIX: [(i64, i64, i64); 6] = [
            (-1, 0, 0),
            (1, 0, 0),
            (0, -1, 0),
            (0, 1, 0),
            (0, 0, -1),
            (0, 0, 1),
        ];
        const TWENTY_SIX: [(i64, i64, i64); 26] = {
            let mut out = [(0i64, 0i64, 0i64); 26];
            let mut n = 0;
            let mut dz = -1i64;
            while dz <= 1 {
                let mut dy = -1i64;
                while dy <= 1 {
                    let mut dx = -1i64;
                    while dx <= 1 {
                        if dx != 0 || dy != 0 || dz != 0 {
                            out[n] = (dx, dy, dz);
                            n += 1;
                        }
                        dx += 1;
                    }
                    dy += 1;
                }
                dz += 1;
            }
            out
        };
        match self {
            Connectivity::Six => &SIX,
            Connectivity::TwentySix => &TWENTY_SIX,
        }
    }
}

/// Component size thresholds and contact rule, with the published
/// first-place defaults.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinVoxels {
    pub kidney: usize,
    pub tumor: usize,
    pub cyst: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PostprocessRules {
    pub min_voxels: MinVoxels,
    pub require_lesion_kidney_contact: bool,
    pub connectivity: Connectivity,
}

impl Default for PostprocessRules {
    fn default() -> Self {
        PostprocessRules {
            min_voxels: MinVoxels {
                kidney: 20_000,
                tumor: 200,
                cyst: 50,
            },
            require_lesion_kidney_contact: true,
            connectivity: Connectivity::TwentySix,
        }
    }
}

impl PostprocessRules {
    fn threshold(&self, class: ClassCode) -> Result<usize> {
        match class {
            ClassCode::Kidney => Ok(self.min_voxels.kidney),
            ClassCode::Tumor => Ok(self.min_voxels.tumor),
            ClassCode::Cyst => Ok(self.min_voxels.cyst),
            ClassCode::Background => Err(Error::Config(
                "background has no size threshold".to_string(),
            )),
        }
    }
}

/// One maximal connected set of foreground voxels.
#[derive(Debug, Clone)]
pub struct Component {
    /// Linear voxel indices, ascending.
    pub voxels: Vec<usize>,
}

impl Component {
    pub fn size(&self) -> usize {
        self.voxels.len()
    }
}

/// Partitions the mask foreground into maximal connected components,
/// ordered by descending size then smallest linear index.
pub fn connected_components(m: &BinaryMask, connectivity: Connectivity) -> Vec<Component> {
    let g = m.geometry();
    let [nx, ny, nz] = g.dims;
    let offsets = connectivity.offsets();
    let mut visited = vec![false; g.voxel_count()];
    let mut components = Vec::new();
    for start in 0..g.voxel_count() {
        if !m.data()[start] || visited[start] {
            continue;
        }
        let mut voxels = Vec::new();
        let mut stack = vec![start];
        visited[start] = true;
        while let Some(idx) = stack.pop() {
            voxels.push(idx);
            let (i, j, k) = g.delinearize(idx);
            for &(di, dj, dk) in offsets {
                let ni = i as i64 + di;
                let nj = j as i64 + dj;
                let nk = k as i64 + dk;
                if ni < 0 || nj < 0 || nk < 0 {
                    continue;
                }
                let (ni, nj, nk) = (ni as usize, nj as usize, nk as usize);
                if ni >= nx || nj >= ny || nk >= nz {
                    continue;
                }
                let nidx = g.linear_index(ni, nj, nk);
                if m.data()[nidx] && !visited[nidx] {
                    visited[nidx] = true;
                    stack.push(nidx);
                }
            }
        }
        voxels.sort_unstable();
        components.push(Component { voxels });
    }
    components.sort_by(|a, b| {
        b.size()
            .cmp(&a.size())
            .then_with(|| a.voxels[0].cmp(&b.voxels[0]))
    });
    components
}

/// Applies the cleanup heuristics. Order is fixed: per-class size filter
/// with the kidney class first, then the lesion contact check against
/// surviving kidney voxels. Never adds foreground and never changes a
/// voxel's class except to background.
pub fn apply_rules(pred: &LabelVolume, rules: &PostprocessRules) -> Result<LabelVolume> {
    let g = *pred.geometry();
    let mut labels = pred.labels().to_vec();

    for class in [ClassCode::Kidney, ClassCode::Tumor, ClassCode::Cyst] {
        let threshold = rules.threshold(class)?;
        if threshold == 0 {
            continue;
        }
        let mask = BinaryMask::from_labels(pred, &[class.code()]);
        for component in connected_components(&mask, rules.connectivity) {
            if component.size() < threshold {
                for &idx in &component.voxels {
                    labels[idx] = 0;
                }
            }
        }
    }

    if rules.require_lesion_kidney_contact {
        let kidney: Vec<bool> = labels.iter().map(|&c| c == ClassCode::Kidney.code()).collect();
        let [nx, ny, nz] = g.dims;
        let touches_kidney = |idx: usize| -> bool {
            let (i, j, k) = g.delinearize(idx);
            for &(di, dj, dk) in Connectivity::TwentySix.offsets() {
                let ni = i as i64 + di;
                let nj = j as i64 + dj;
                let nk = k as i64 + dk;
                if ni < 0 || nj < 0 || nk < 0 {
                    continue;
                }
                let (ni, nj, nk) = (ni as usize, nj as usize, nk as usize);
                if ni >= nx || nj >= ny || nk >= nz {
                    continue;
                }
                if kidney[g.linear_index(ni, nj, nk)] {
                    return true;
                }
            }
            false
        };
        for class in [ClassCode::Tumor, ClassCode::Cyst] {
            let data = labels.iter().map(|&c| c == class.code()).collect();
            let mask = BinaryMask::new(g, data)?;
            for component in connected_components(&mask, rules.connectivity) {
                if !component.voxels.iter().any(|&idx| touches_kidney(idx)) {
                    for &idx in &component.voxels {
                        labels[idx] = 0;
                    }
                }
            }
        }
    }

    LabelVolume::new(g, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volgrid::Geometry;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn geom(dims: [usize; 3]) -> Geometry {
        Geometry::new(dims, [1.0, 1.0, 1.0]).unwrap()
    }

    fn mask(g: Geometry, voxels: &[usize]) -> BinaryMask {
        let mut data = vec![false; g.voxel_count()];
        for &v in voxels {
            data[v] = true;
        }
        BinaryMask::new(g, data).unwrap()
    }

    #[test]
    fn diagonal_voxels_connectivity() {
        let g = geom([3, 3, 1]);
        let m = mask(g, &[g.linear_index(0, 0, 0), g.linear_index(1, 1, 0)]);
        assert_eq!(connected_components(&m, Connectivity::TwentySix).len(), 1);
        assert_eq!(connected_components(&m, Connectivity::Six).len(), 2);
    }

    #[test]
    fn empty_mask_has_no_components() {
        let g = geom([3, 3, 3]);
        assert!(connected_components(&BinaryMask::empty(g), Connectivity::TwentySix).is_empty());
    }

    #[test]
    fn components_ordered_by_size_then_index() {
        let g = geom([10, 1, 1]);
        // component {5,6,7} (size 3) before {0} and {2} (size 1, by index)
        let m = mask(g, &[0, 2, 5, 6, 7]);
        let comps = connected_components(&m, Connectivity::Six);
        assert_eq!(comps.len(), 3);
        assert_eq!(comps[0].voxels, vec![5, 6, 7]);
        assert_eq!(comps[1].voxels, vec![0]);
        assert_eq!(comps[2].voxels, vec![2]);
    }

    /// Builds a 20^3 volume with a large kidney blob and a tumor blob of
    /// `tumor_size` voxels, optionally touching the kidney.
    fn kidney_tumor_volume(tumor_size: usize, touching: bool) -> LabelVolume {
        let g = geom([20, 20, 20]);
        let mut labels = vec![0u8; g.voxel_count()];
        // kidney: 8x8x8 block at (2..10)^3 = 512 voxels
        for k in 2..10 {
            for j in 2..10 {
                for i in 2..10 {
                    labels[g.linear_index(i, j, k)] = 1;
                }
            }
        }
        // tumor: flat slab; touching places it adjacent to the kidney block
        let (i0, j0, k0) = if touching { (10, 2, 2) } else { (14, 2, 2) };
        let mut placed = 0;
        'outer: for k in k0..20 {
            for j in j0..(j0 + 5) {
                for i in i0..(i0 + 5) {
                    if placed == tumor_size {
                        break 'outer;
                    }
                    labels[g.linear_index(i, j, k)] = 2;
                    placed += 1;
                }
            }
        }
        assert_eq!(placed, tumor_size);
        LabelVolume::new(g, labels).unwrap()
    }

    fn count_class(v: &LabelVolume, code: u8) -> usize {
        v.labels().iter().filter(|&&c| c == code).count()
    }

    #[test]
    fn small_tumor_component_removed() {
        let rules = PostprocessRules {
            min_voxels: MinVoxels {
                kidney: 100,
                ..PostprocessRules::default().min_voxels
            },
            ..PostprocessRules::default()
        };
        let v = kidney_tumor_volume(150, true);
        let out = apply_rules(&v, &rules).unwrap();
        assert_eq!(count_class(&out, 2), 0, "150 < 200 threshold");
        assert_eq!(count_class(&out, 1), 512);
    }

    #[test]
    fn large_touching_tumor_kept() {
        let rules = PostprocessRules {
            min_voxels: MinVoxels {
                kidney: 100,
                ..PostprocessRules::default().min_voxels
            },
            ..PostprocessRules::default()
        };
        let v = kidney_tumor_volume(250, true);
        let out = apply_rules(&v, &rules).unwrap();
        assert_eq!(count_class(&out, 2), 250);
    }

    #[test]
    fn large_detached_tumor_removed_by_contact_rule() {
        let rules = PostprocessRules {
            min_voxels: MinVoxels {
                kidney: 100,
                ..PostprocessRules::default().min_voxels
            },
            ..PostprocessRules::default()
        };
        let v = kidney_tumor_volume(250, false);
        let out = apply_rules(&v, &rules).unwrap();
        assert_eq!(count_class(&out, 2), 0);

        // same volume with the contact rule off keeps it
        let lax = PostprocessRules {
            require_lesion_kidney_contact: false,
            ..rules
        };
        let out = apply_rules(&v, &lax).unwrap();
        assert_eq!(count_class(&out, 2), 250);
    }

    #[test]
    fn lesion_attached_to_subthreshold_kidney_is_removed() {
        // kidney filtering happens before the contact check, so a lesion
        // touching only a removed kidney fragment loses its anchor
        let g = geom([10, 3, 3]);
        let mut labels = vec![0u8; g.voxel_count()];
        labels[g.linear_index(1, 1, 1)] = 1; // 1-voxel kidney fragment
        labels[g.linear_index(2, 1, 1)] = 2; // tumor touching it
        let v = LabelVolume::new(g, labels).unwrap();
        let rules = PostprocessRules {
            min_voxels: MinVoxels { kidney: 5, tumor: 1, cyst: 1 },
            require_lesion_kidney_contact: true,
            connectivity: Connectivity::TwentySix,
        };
        let out = apply_rules(&v, &rules).unwrap();
        assert!(out.labels().iter().all(|&c| c == 0));
    }

    #[test]
    fn all_background_is_unchanged() {
        let g = geom([5, 5, 5]);
        let v = LabelVolume::background(g);
        let out = apply_rules(&v, &PostprocessRules::default()).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn neutral_rules_are_identity() {
        let g = geom([4, 4, 4]);
        let mut labels = vec![0u8; g.voxel_count()];
        labels[0] = 1;
        labels[10] = 2;
        labels[20] = 3;
        let v = LabelVolume::new(g, labels).unwrap();
        let rules = PostprocessRules {
            min_voxels: MinVoxels { kidney: 0, tumor: 0, cyst: 0 },
            require_lesion_kidney_contact: false,
            connectivity: Connectivity::TwentySix,
        };
        assert_eq!(apply_rules(&v, &rules).unwrap(), v);
    }

    fn random_volume(g: Geometry, seed: u64) -> LabelVolume {
        let mut state = seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1);
        let labels = (0..g.voxel_count())
            .map(|_| {
                state = state
                    .wrapping_mul(6364136223846793005)
                    .wrapping_add(1442695040888963407);
                ((state >> 33) % 4) as u8
            })
            .collect();
        LabelVolume::new(g, labels).unwrap()
    }

    /// Recursive flood fill, the oracle for component partitioning.
    fn flood_fill_oracle(m: &BinaryMask, connectivity: Connectivity) -> Vec<Vec<usize>> {
        let g = m.geometry();
        let mut seen = vec![false; g.voxel_count()];
        let mut out = Vec::new();
        fn grow(
            m: &BinaryMask,
            connectivity: Connectivity,
            seen: &mut [bool],
            acc: &mut Vec<usize>,
            idx: usize,
        ) {
            seen[idx] = true;
            acc.push(idx);
            let g = m.geometry();
            let (i, j, k) = g.delinearize(idx);
            for &(di, dj, dk) in connectivity.offsets() {
                let (ni, nj, nk) = (i as i64 + di, j as i64 + dj, k as i64 + dk);
                if ni < 0 || nj < 0 || nk < 0 {
                    continue;
                }
                let (ni, nj, nk) = (ni as usize, nj as usize, nk as usize);
                if !g.contains(ni, nj, nk) {
                    continue;
                }
                let n = g.linear_index(ni, nj, nk);
                if m.data()[n] && !seen[n] {
                    grow(m, connectivity, seen, acc, n);
                }
            }
        }
        for idx in 0..g.voxel_count() {
            if m.data()[idx] && !seen[idx] {
                let mut acc = Vec::new();
                grow(m, connectivity, &mut seen, &mut acc, idx);
                acc.sort_unstable();
                out.push(acc);
            }
        }
        out
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(50))]

        #[test]
        fn apply_rules_is_idempotent_and_shrinking(seed in any::<u64>()) {
            let g = geom([8, 8, 8]);
            let v = random_volume(g, seed);
            let rules = PostprocessRules {
                min_voxels: MinVoxels { kidney: 10, tumor: 5, cyst: 3 },
                require_lesion_kidney_contact: true,
                connectivity: Connectivity::TwentySix,
            };
            let once = apply_rules(&v, &rules).unwrap();
            let twice = apply_rules(&once, &rules).unwrap();
            prop_assert_eq!(&once, &twice);
            for (&a, &b) in v.labels().iter().zip(once.labels()) {
                prop_assert!(b == a || b == 0);
            }
        }

        #[test]
        fn components_match_flood_fill_oracle(
            seed in any::<u64>(),
            six in any::<bool>(),
        ) {
            let g = geom([6, 6, 6]);
            let v = random_volume(g, seed);
            let m = BinaryMask::from_labels(&v, &[1]);
            let conn = if six { Connectivity::Six } else { Connectivity::TwentySix };
            let got = connected_components(&m, conn);
            let expected = flood_fill_oracle(&m, conn);
            let got_sets: HashSet<Vec<usize>> =
                got.iter().map(|c| c.voxels.clone()).collect();
            let exp_sets: HashSet<Vec<usize>> = expected.into_iter().collect();
            prop_assert_eq!(got_sets, exp_sets);
            // partition: disjoint and covering
            let mut all: Vec<usize> = got.iter().flat_map(|c| c.voxels.clone()).collect();
            all.sort_unstable();
            let fg: Vec<usize> = (0..g.voxel_count()).filter(|&i| m.data()[i]).collect();
            prop_assert_eq!(all, fg);
        }
    }
}
