//! Label-volume data model, voxel geometry, and bit-exact file I/O.
//!
//! Volumes are stored on disk as a two-file pair: a JSON header describing
//! dims, spacing and the class map, and a raw little-endian file of dense
//! label codes with the i (x) index varying fastest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative per-axis tolerance when comparing voxel spacings.
pub const SPACING_REL_TOL: f64 = 1e-6;

/// Segmentation class codes. The mapping is fixed and recorded in every
/// volume header.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum ClassCode {
    Background = 0,
    Kidney = 1,
    Tumor = 2,
    Cyst = 3,
}

impl ClassCode {
    pub const ALL: [ClassCode; 4] = [
        ClassCode::Background,
        ClassCode::Kidney,
        ClassCode::Tumor,
        ClassCode::Cyst,
    ];

    pub fn from_u8(code: u8) -> Result<ClassCode> {
        match code {
            0 => Ok(ClassCode::Background),
            1 => Ok(ClassCode::Kidney),
            2 => Ok(ClassCode::Tumor),
            3 => Ok(ClassCode::Cyst),
            other => Err(Error::Volume(format!(
                "label code {other} outside the declared class set {{0,1,2,3}}"
            ))),
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassCode::Background => "background",
            ClassCode::Kidney => "kidney",
            ClassCode::Tumor => "tumor",
            ClassCode::Cyst => "cyst",
        }
    }

    pub fn from_name(name: &str) -> Result<ClassCode> {
        match name {
            "background" => Ok(ClassCode::Background),
            "kidney" => Ok(ClassCode::Kidney),
            "tumor" => Ok(ClassCode::Tumor),
            "cyst" => Ok(ClassCode::Cyst),
            other => Err(Error::Config(format!("unknown class name {other:?}"))),
        }
    }
}

/// Grid geometry shared by all volume kinds: voxel counts and physical
/// spacing in millimeters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
}

impl Geometry {
    pub fn new(dims: [usize; 3], spacing_mm: [f64; 3]) -> Result<Geometry> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Volume(format!("dims {dims:?} must all be >= 1")));
        }
        if spacing_mm.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Volume(format!(
                "spacing {spacing_mm:?} must all be > 0"
            )));
        }
        Ok(Geometry { dims, spacing_mm })
    }

    pub fn voxel_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    /// Linear index with i fastest: (k*ny + j)*nx + i.
    #[inline]
    pub fn linear_index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.dims[1] + j) * self.dims[0] + i
    }

    /// Inverse of [`linear_index`](Self::linear_index).
    #[inline]
    pub fn delinearize(&self, idx: usize) -> (usize, usize, usize) {
        let i = idx % self.dims[0];
        let j = (idx / self.dims[0]) % self.dims[1];
        let k = idx / (self.dims[0] * self.dims[1]);
        (i, j, k)
    }

    #[inline]
    pub fn contains(&self, i: usize, j: usize, k: usize) -> bool {
        i < self.dims[0] && j < self.dims[1] && k < self.dims[2]
    }

    /// Physical position of a voxel center in millimeters.
    pub fn voxel_center_mm(&self, i: usize, j: usize, k: usize) -> Result<[f64; 3]> {
        if !self.contains(i, j, k) {
            return Err(Error::IndexOutOfRange {
                i,
                j,
                k,
                nx: self.dims[0],
                ny: self.dims[1],
                nz: self.dims[2],
            });
        }
        Ok([
            (i as f64 + 0.5) * self.spacing_mm[0],
            (j as f64 + 0.5) * self.spacing_mm[1],
            (k as f64 + 0.5) * self.spacing_mm[2],
        ])
    }

    /// True iff dims are equal and spacings agree within a relative
    /// tolerance of [`SPACING_REL_TOL`] per axis.
    pub fn compatible(&self, other: &Geometry) -> bool {
        if self.dims != other.dims {
            return false;
        }
        self.spacing_mm
            .iter()
            .zip(other.spacing_mm.iter())
            .all(|(&a, &b)| {
                let scale = a.abs().max(b.abs());
                (a - b).abs() <= SPACING_REL_TOL * scale
            })
    }
}

/// A dense 3D grid of class labels with physical voxel spacing.
/// Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    geometry: Geometry,
    labels: Vec<u8>,
}

impl LabelVolume {
    pub fn new(geometry: Geometry, labels: Vec<u8>) -> Result<LabelVolume> {
        if labels.len() != geometry.voxel_count() {
            return Err(Error::Volume(format!(
                "label buffer length {} does not match dims {:?} ({} voxels)",
                labels.len(),
                geometry.dims,
                geometry.voxel_count()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&c| c > 3) {
            return Err(Error::Volume(format!(
                "label code {bad} outside the declared class set {{0,1,2,3}}"
            )));
        }
        Ok(LabelVolume { geometry, labels })
    }

    pub fn background(geometry: Geometry) -> LabelVolume {
        let n = geometry.voxel_count();
        LabelVolume {
            geometry,
            labels: vec![0u8; n],
        }
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    #[inline]
    pub fn label_at(&self, i: usize, j: usize, k: usize) -> u8 {
        self.labels[self.geometry.linear_index(i, j, k)]
    }

    /// Consumes the volume, handing the label buffer to a transform that
    /// must preserve its length and class set.
    pub fn map_labels(self, f: impl FnOnce(&mut Vec<u8>)) -> Result<LabelVolume> {
        let mut labels = self.labels;
        f(&mut labels);
        LabelVolume::new(self.geometry, labels)
    }
}

/// A binary mask on the same grid model as [`LabelVolume`].
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    geometry: Geometry,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(geometry: Geometry, data: Vec<bool>) -> Result<BinaryMask> {
        if data.len() != geometry.voxel_count() {
            return Err(Error::Volume(format!(
                "mask buffer length {} does not match dims {:?}",
                data.len(),
                geometry.dims
            )));
        }
        Ok(BinaryMask { geometry, data })
    }

    pub fn empty(geometry: Geometry) -> BinaryMask {
        let n = geometry.voxel_count();
        BinaryMask {
            geometry,
            data: vec![false; n],
        }
    }

    /// Mask of all voxels of the volume whose label is in `codes`.
    pub fn from_labels(v: &LabelVolume, codes: &[u8]) -> BinaryMask {
        let data = v.labels().iter().map(|c| codes.contains(c)).collect();
        BinaryMask {
            geometry: *v.geometry(),
            data,
        }
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> bool {
        self.data[self.geometry.linear_index(i, j, k)]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }
}

/// A per-voxel counter grid, used for prediction-sum heatmaps. Serialized
/// with dtype "u16".
#[derive(Debug, Clone, PartialEq)]
pub struct CountVolume {
    pub geometry: Geometry,
    pub counts: Vec<u16>,
}

fn class_map() -> BTreeMap<String, String> {
    ClassCode::ALL
        .iter()
        .map(|c| (c.code().to_string(), c.name().to_string()))
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct VolumeHeader {
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    dtype: String,
    index_order: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    classes: Option<BTreeMap<String, String>>,
    raw_file: String,
}

fn raw_path_for(header_path: &Path, raw_file: &str) -> PathBuf {
    match header_path.parent() {
        Some(dir) => dir.join(raw_file),
        None => PathBuf::from(raw_file),
    }
}

fn default_raw_name(header_path: &Path) -> String {
    let stem = header_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "volume".to_string());
    format!("{stem}.raw")
}

fn read_header(path: &Path) -> Result<VolumeHeader> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let header: VolumeHeader =
        serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
    if header.index_order != "i_fastest" {
        return Err(Error::Volume(format!(
            "unsupported index_order {:?} in {}",
            header.index_order,
            path.display()
        )));
    }
    Ok(header)
}

/// Reads a label volume from a header file and its raw-data companion.
pub fn read_volume(path: impl AsRef<Path>) -> Result<LabelVolume> {
    let path = path.as_ref();
    let header = read_header(path)?;
    if header.dtype != "u8" {
        return Err(Error::Volume(format!(
            "expected dtype \"u8\" in {}, found {:?}",
            path.display(),
            header.dtype
        )));
    }
    let geometry = Geometry::new(header.dims, header.spacing_mm)?;
    let raw_path = raw_path_for(path, &header.raw_file);
    let bytes = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    if bytes.len() != geometry.voxel_count() {
        return Err(Error::Volume(format!(
            "raw file {} holds {} bytes but header {} declares dims {:?} ({} voxels)",
            raw_path.display(),
            bytes.len(),
            path.display(),
            geometry.dims,
            geometry.voxel_count()
        )));
    }
    LabelVolume::new(geometry, bytes)
}

fn write_header_and_raw(path: &Path, header: &VolumeHeader, raw: &[u8]) -> Result<()> {
    let mut text = serde_json::to_string_pretty(header).expect("header serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    let raw_path = raw_path_for(path, &header.raw_file);
    fs::write(&raw_path, raw).map_err(|e| Error::io(&raw_path, e))?;
    Ok(())
}

/// Writes a label volume as a header + raw pair readable by
/// [`read_volume`]. Byte-for-byte deterministic for equal inputs.
pub fn write_volume(v: &LabelVolume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let header = VolumeHeader {
        dims: v.geometry().dims,
        spacing_mm: v.geometry().spacing_mm,
        dtype: "u8".to_string(),
        index_order: "i_fastest".to_string(),
        classes: Some(class_map()),
        raw_file: default_raw_name(path),
    };
    write_header_and_raw(path, &header, v.labels())
}

/// Reads a u16 count volume (heatmap) pair.
pub fn read_count_volume(path: impl AsRef<Path>) -> Result<CountVolume> {
    let path = path.as_ref();
    let header = read_header(path)?;
    if header.dtype != "u16" {
        return Err(Error::Volume(format!(
            "expected dtype \"u16\" in {}, found {:?}",
            path.display(),
            header.dtype
        )));
    }
    let geometry = Geometry::new(header.dims, header.spacing_mm)?;
    let raw_path = raw_path_for(path, &header.raw_file);
    let bytes = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    if bytes.len() != geometry.voxel_count() * 2 {
        return Err(Error::Volume(format!(
            "raw file {} holds {} bytes, expected {}",
            raw_path.display(),
            bytes.len(),
            geometry.voxel_count() * 2
        )));
    }
    let counts = bytes
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();
    Ok(CountVolume { geometry, counts })
}

/// Writes a u16 count volume (heatmap) as a header + raw pair,
/// little-endian.
pub fn write_count_volume(v: &CountVolume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let header = VolumeHeader {
        dims: v.geometry.dims,
        spacing_mm: v.geometry.spacing_mm,
        dtype: "u16".to_string(),
        index_order: "i_fastest".to_string(),
        classes: None,
        raw_file: default_raw_name(path),
    };
    let mut raw = Vec::with_capacity(v.counts.len() * 2);
    for c in &v.counts {
        raw.extend_from_slice(&c.to_le_bytes());
    }
    write_header_and_raw(path, &header, &raw)
}

/// True iff two volumes share dims and spacing within tolerance.
pub fn geometry_compatible(a: &LabelVolume, b: &LabelVolume) -> bool {
    a.geometry().compatible(b.geometry())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use tempfile::tempdir;

    fn geom(dims: [usize; 3], spacing: [f64; 3]) -> Geometry {
        Geometry::new(dims, spacing).unwrap()
    }

    #[test]
    fn read_decodes_declared_layout() {
        let dir = tempdir().unwrap();
        let hdr = dir.path().join("v.json");
        fs::write(
            &hdr,
            r#"{"dims":[2,2,1],"spacing_mm":[1.0,1.0,1.0],"dtype":"u8","index_order":"i_fastest","classes":{"0":"background","1":"kidney","2":"tumor","3":"cyst"},"raw_file":"v.raw"}"#,
        )
        .unwrap();
        fs::write(dir.path().join("v.raw"), [0u8, 1, 2, 3]).unwrap();
        let v = read_volume(&hdr).unwrap();
        assert_eq!(v.geometry().dims, [2, 2, 1]);
        assert_eq!(v.labels(), &[0, 1, 2, 3]);
    }

    #[test]
    fn read_rejects_size_mismatch() {
        let dir = tempdir().unwrap();
        let hdr = dir.path().join("v.json");
        fs::write(
            &hdr,
            r#"{"dims":[2,2,2],"spacing_mm":[1.0,1.0,1.0],"dtype":"u8","index_order":"i_fastest","raw_file":"v.raw"}"#,
        )
        .unwrap();
        fs::write(dir.path().join("v.raw"), [0u8, 1, 2, 3]).unwrap();
        assert!(matches!(read_volume(&hdr), Err(Error::Volume(_))));
    }

    #[test]
    fn read_rejects_unknown_class_code() {
        let dir = tempdir().unwrap();
        let hdr = dir.path().join("v.json");
        fs::write(
            &hdr,
            r#"{"dims":[2,1,1],"spacing_mm":[1.0,1.0,1.0],"dtype":"u8","index_order":"i_fastest","raw_file":"v.raw"}"#,
        )
        .unwrap();
        fs::write(dir.path().join("v.raw"), [0u8, 9]).unwrap();
        assert!(matches!(read_volume(&hdr), Err(Error::Volume(_))));
    }

    #[test]
    fn read_rejects_nonpositive_spacing() {
        let dir = tempdir().unwrap();
        let hdr = dir.path().join("v.json");
        fs::write(
            &hdr,
            r#"{"dims":[1,1,1],"spacing_mm":[1.0,0.0,1.0],"dtype":"u8","index_order":"i_fastest","raw_file":"v.raw"}"#,
        )
        .unwrap();
        fs::write(dir.path().join("v.raw"), [0u8]).unwrap();
        assert!(read_volume(&hdr).is_err());
    }

    #[test]
    fn write_all_zero_volume_raw_bytes() {
        let dir = tempdir().unwrap();
        let v = LabelVolume::background(geom([3, 3, 3], [1.0, 1.0, 1.0]));
        write_volume(&v, dir.path().join("z.json")).unwrap();
        let raw = fs::read(dir.path().join("z.raw")).unwrap();
        assert_eq!(raw, vec![0u8; 27]);
    }

    #[test]
    fn write_is_deterministic() {
        let dir = tempdir().unwrap();
        let v = LabelVolume::new(
            geom([2, 1, 1], [1.0, 2.0, 3.0]),
            vec![1, 2],
        )
        .unwrap();
        write_volume(&v, dir.path().join("a.json")).unwrap();
        write_volume(&v, dir.path().join("b.json")).unwrap();
        let ha = fs::read_to_string(dir.path().join("a.json")).unwrap();
        let hb = fs::read_to_string(dir.path().join("b.json")).unwrap();
        assert_eq!(
            ha.replace("a.raw", "r.raw"),
            hb.replace("b.raw", "r.raw")
        );
        assert_eq!(
            fs::read(dir.path().join("a.raw")).unwrap(),
            fs::read(dir.path().join("b.raw")).unwrap()
        );
    }

    #[test]
    fn geometry_compatible_tolerance() {
        let a = LabelVolume::background(geom([2, 2, 2], [1.0, 1.0, 1.0]));
        let b = LabelVolume::background(geom([2, 2, 2], [1.0000000001, 1.0, 1.0]));
        let c = LabelVolume::background(geom([2, 2, 3], [1.0, 1.0, 1.0]));
        let d = LabelVolume::background(geom([2, 2, 2], [1.1, 1.0, 1.0]));
        assert!(geometry_compatible(&a, &a));
        assert!(geometry_compatible(&a, &b));
        assert!(!geometry_compatible(&a, &c));
        assert!(!geometry_compatible(&a, &d));
    }

    #[test]
    fn voxel_center_positions() {
        let g = geom([4, 4, 4], [1.0, 1.0, 1.0]);
        assert_eq!(g.voxel_center_mm(0, 0, 0).unwrap(), [0.5, 0.5, 0.5]);

        let g = geom([4, 4, 4], [0.78, 0.78, 0.78]);
        let c = g.voxel_center_mm(1, 0, 0).unwrap();
        assert!((c[0] - 1.17).abs() < 1e-12);
        assert!((c[1] - 0.39).abs() < 1e-12);
        assert!((c[2] - 0.39).abs() < 1e-12);

        assert!(g.voxel_center_mm(4, 0, 0).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip_is_identity(
            nx in 1usize..8, ny in 1usize..8, nz in 1usize..8,
            sx in 0.1f64..5.0, sy in 0.1f64..5.0, sz in 0.1f64..5.0,
            seed in any::<u64>(),
        ) {
            let g = geom([nx, ny, nz], [sx, sy, sz]);
            let mut state = seed;
            let labels: Vec<u8> = (0..g.voxel_count()).map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((state >> 33) % 4) as u8
            }).collect();
            let v = LabelVolume::new(g, labels).unwrap();
            let dir = tempdir().unwrap();
            let p = dir.path().join("v.json");
            write_volume(&v, &p).unwrap();
            let back = read_volume(&p).unwrap();
            prop_assert_eq!(back, v);
        }

        #[test]
        fn linear_index_roundtrips(
            nx in 1usize..10, ny in 1usize..10, nz in 1usize..10,
            i in 0usize..10, j in 0usize..10, k in 0usize..10,
        ) {
            let (i, j, k) = (i % nx, j % ny, k % nz);
            let g = geom([nx, ny, nz], [1.0, 1.0, 1.0]);
            prop_assert_eq!(g.delinearize(g.linear_index(i, j, k)), (i, j, k));
        }
    }
}
