//! Deterministic synthetic datasets in the on-disk layout the engine
//! consumes: case manifests with R=3 delineations per ROI, plus per-team
//! prediction volumes of controllable quality. Everything derives from
//! `DatasetSpec::seed`, so a fixed spec regenerates identical bytes.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use segrank_core::annotations::case_stream_seed;
use segrank_core::volgrid::{write_volume, BinaryMask, ClassCode, Geometry, LabelVolume};
use segrank_core::{Error, Result};

#[derive(Debug, Clone)]
pub struct DatasetSpec {
    pub seed: u64,
    pub cases: usize,
    /// (team id, corruption rate in [0, 1]); 0 submits an uncorrupted
    /// composite.
    pub teams: Vec<(String, f64)>,
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub with_covariates: bool,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            seed: 20210901,
            cases: 10,
            teams: vec![
                ("team_apex".to_string(), 0.0),
                ("team_brook".to_string(), 0.05),
                ("team_cedar".to_string(), 0.15),
                ("team_dune".to_string(), 0.35),
            ],
            dims: [16, 16, 12],
            spacing_mm: [0.9, 0.9, 1.6],
            with_covariates: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GeneratedDataset {
    pub dataset_root: PathBuf,
    pub predictions_root: PathBuf,
    pub case_ids: Vec<String>,
}

struct Blob {
    class: ClassCode,
    instance_id: String,
    center: [f64; 3],
    radii: [f64; 3],
}

fn ellipsoid_mask(g: Geometry, center: [f64; 3], radii: [f64; 3]) -> BinaryMask {
    let [nx, ny, nz] = g.dims;
    let mut data = vec![false; g.voxel_count()];
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let d = [(i, 0), (j, 1), (k, 2)]
                    .iter()
                    .map(|&(v, ax)| {
                        let t = (v as f64 - center[ax]) / radii[ax];
                        t * t
                    })
                    .sum::<f64>();
                if d <= 1.0 {
                    data[g.linear_index(i, j, k)] = true;
                }
            }
        }
    }
    BinaryMask::new(g, data).expect("mask matches geometry")
}

fn paint(labels: &mut [u8], mask: &BinaryMask, code: u8) {
    for (l, &m) in labels.iter_mut().zip(mask.data()) {
        if m {
            *l = code;
        }
    }
}

fn case_blobs(rng: &mut ChaCha12Rng, dims: [usize; 3]) -> Vec<Blob> {
    let center = |rng: &mut ChaCha12Rng, lo: f64, hi: f64, dims: [usize; 3]| {
        [
            rng.gen_range(lo * dims[0] as f64..hi * dims[0] as f64),
            rng.gen_range(lo * dims[1] as f64..hi * dims[1] as f64),
            rng.gen_range(lo * dims[2] as f64..hi * dims[2] as f64),
        ]
    };
    let kidney_center = center(rng, 0.35, 0.6, dims);
    let kidney_radii = [
        rng.gen_range(3.0..4.5),
        rng.gen_range(3.0..4.5),
        rng.gen_range(2.5..3.5),
    ];
    // lesions sit inside or at the edge of the kidney so the composite
    // is anatomically plausible (tumor/cyst override kidney)
    let nudge = |rng: &mut ChaCha12Rng, c: [f64; 3], spread: f64| {
        [
            c[0] + rng.gen_range(-spread..spread),
            c[1] + rng.gen_range(-spread..spread),
            c[2] + rng.gen_range(-spread..spread),
        ]
    };
    let tumor_center = nudge(rng, kidney_center, 2.0);
    let tumor_radii = [
        rng.gen_range(1.4..2.4),
        rng.gen_range(1.4..2.4),
        rng.gen_range(1.2..2.0),
    ];
    let cyst_center = nudge(rng, kidney_center, 2.5);
    let cyst_radii = [
        rng.gen_range(1.0..1.6),
        rng.gen_range(1.0..1.6),
        rng.gen_range(1.0..1.4),
    ];
    vec![
        Blob {
            class: ClassCode::Kidney,
            instance_id: "kidney_left".to_string(),
            center: kidney_center,
            radii: kidney_radii,
        },
        Blob {
            class: ClassCode::Tumor,
            instance_id: "tumor_1".to_string(),
            center: tumor_center,
            radii: tumor_radii,
        },
        Blob {
            class: ClassCode::Cyst,
            instance_id: "cyst_1".to_string(),
            center: cyst_center,
            radii: cyst_radii,
        },
    ]
}

/// One annotator's reading: the base blob with jittered radii.
fn delineation(g: Geometry, blob: &Blob, rng: &mut ChaCha12Rng) -> BinaryMask {
    let scale = rng.gen_range(0.85..1.15);
    let radii = [
        blob.radii[0] * scale,
        blob.radii[1] * scale,
        blob.radii[2] * scale,
    ];
    ellipsoid_mask(g, blob.center, radii)
}

fn binary_volume(mask: &BinaryMask) -> LabelVolume {
    let labels = mask.data().iter().map(|&b| b as u8).collect();
    LabelVolume::new(*mask.geometry(), labels).expect("binary labels")
}

fn composite_volume(g: Geometry, blobs: &[Blob], delineations: &[Vec<BinaryMask>], pick: usize) -> LabelVolume {
    let mut labels = vec![0u8; g.voxel_count()];
    // paint order: kidney, cyst, tumor (later classes override)
    for class in [ClassCode::Kidney, ClassCode::Cyst, ClassCode::Tumor] {
        for (blob, dels) in blobs.iter().zip(delineations) {
            if blob.class == class {
                paint(&mut labels, &dels[pick], class.code());
            }
        }
    }
    LabelVolume::new(g, labels).expect("composite labels")
}

fn corrupt(v: &LabelVolume, rate: f64, rng: &mut ChaCha12Rng) -> LabelVolume {
    if rate <= 0.0 {
        return v.clone();
    }
    let g = *v.geometry();
    let mut labels = v.labels().to_vec();
    for idx in 0..labels.len() {
        if labels[idx] != 0 {
            if rng.gen_bool(rate) {
                labels[idx] = 0; // dropout -> false negatives
            }
        } else if rng.gen_bool(rate * 0.02) {
            labels[idx] = rng.gen_range(1..=3); // speckle -> false positives
        }
    }
    LabelVolume::new(g, labels).expect("corrupted labels")
}

fn covariates_json(rng: &mut ChaCha12Rng) -> String {
    format!(
        r#"{{"tumor_size_cm":{:.2},"clear_cell":{},"female":{},"non_caucasian":{}}}"#,
        rng.gen_range(1.0..10.0),
        rng.gen_bool(0.5) as u8,
        rng.gen_bool(0.5) as u8,
        rng.gen_bool(0.35) as u8
    )
}

/// Writes the full dataset below `root`: `root/data` holds case
/// manifests and volumes, `root/preds/<team>` the predictions.
pub fn generate(root: &Path, spec: &DatasetSpec) -> Result<GeneratedDataset> {
    let data = root.join("data");
    let preds = root.join("preds");
    let io = |path: &Path, e: std::io::Error| Error::io(path, e);
    fs::create_dir_all(&data).map_err(|e| io(&data, e))?;
    let g = Geometry::new(spec.dims, spec.spacing_mm)?;

    let mut case_ids = Vec::with_capacity(spec.cases);
    for case_no in 0..spec.cases {
        let case_id = format!("case_{case_no:05}");
        let mut rng =
            ChaCha12Rng::seed_from_u64(case_stream_seed(spec.seed, &format!("gen/{case_id}")));
        let blobs = case_blobs(&mut rng, spec.dims);
        let delineations: Vec<Vec<BinaryMask>> = blobs
            .iter()
            .map(|b| (0..3).map(|_| delineation(g, b, &mut rng)).collect())
            .collect();

        let case_dir = data.join(&case_id);
        fs::create_dir_all(&case_dir).map_err(|e| io(&case_dir, e))?;
        let reference = composite_volume(g, &blobs, &delineations, 0);
        write_volume(&reference, case_dir.join("reference.json"))?;

        let mut roi_entries = Vec::new();
        for (blob, dels) in blobs.iter().zip(&delineations) {
            let mut paths = Vec::new();
            for (r, mask) in dels.iter().enumerate() {
                let name = format!("{}_{r}.json", blob.instance_id);
                write_volume(&binary_volume(mask), case_dir.join(&name))?;
                paths.push(format!("\"{case_id}/{name}\""));
            }
            roi_entries.push(format!(
                r#"{{"instance_id":"{}","class":{},"delineations":[{}]}}"#,
                blob.instance_id,
                blob.class.code(),
                paths.join(",")
            ));
        }
        let covariates = if spec.with_covariates {
            format!(",\"covariates\":{}", covariates_json(&mut rng))
        } else {
            String::new()
        };
        let manifest = format!(
            "{{\"case_id\":\"{case_id}\",\"reference\":\"{case_id}/reference.json\",\"rois\":[{}]{}}}\n",
            roi_entries.join(","),
            covariates
        );
        let manifest_path = data.join(format!("{case_id}.json"));
        fs::write(&manifest_path, manifest).map_err(|e| io(&manifest_path, e))?;

        for (team, rate) in &spec.teams {
            let mut team_rng = ChaCha12Rng::seed_from_u64(case_stream_seed(
                spec.seed,
                &format!("pred/{team}/{case_id}"),
            ));
            // each team predicts from its own annotator's view of the case
            let pick = team_rng.gen_range(0..3);
            let base = composite_volume(g, &blobs, &delineations, pick);
            let pred = corrupt(&base, *rate, &mut team_rng);
            let team_dir = preds.join(team);
            fs::create_dir_all(&team_dir).map_err(|e| io(&team_dir, e))?;
            write_volume(&pred, team_dir.join(format!("{case_id}.json")))?;
        }
        case_ids.push(case_id);
    }
    Ok(GeneratedDataset {
        dataset_root: data,
        predictions_root: preds,
        case_ids,
    })
}

/// A ready-to-use run config for a generated dataset, with a reduced
/// bootstrap count so tests stay fast.
pub fn write_config(
    path: &Path,
    dataset: &GeneratedDataset,
    output_dir: &Path,
    seed: u64,
    samples_per_case: usize,
    bootstrap_samples: usize,
) -> Result<()> {
    let text = format!(
        r#"{{
  "dataset_root": {:?},
  "predictions_root": {:?},
  "output_dir": {:?},
  "sampling": {{"master_seed": {seed}, "samples_per_case": {samples_per_case}}},
  "stats": {{"bootstrap_samples": {bootstrap_samples}, "alpha": 0.05, "significance_metric": "tumor_dice"}}
}}
"#,
        dataset.dataset_root.display().to_string(),
        dataset.predictions_root.display().to_string(),
        output_dir.display().to_string(),
    );
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
