//! Dataset and submission discovery: which cases exist, which teams
//! submitted a complete set of predictions.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::engine::config::RunConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct CaseRef {
    pub case_id: String,
    pub manifest_path: PathBuf,
}

#[derive(Debug, Clone)]
pub struct Discovery {
    /// Sorted by case id.
    pub cases: Vec<CaseRef>,
    /// Sorted team ids with a prediction for every case.
    pub teams: Vec<String>,
    /// Human-readable notes about excluded teams.
    pub warnings: Vec<String>,
}

#[derive(Deserialize)]
struct CaseIdOnly {
    case_id: String,
}

/// Expected location of one team's prediction for one case.
pub fn prediction_path(config: &RunConfig, team: &str, case_id: &str) -> PathBuf {
    config
        .predictions_root
        .join(team)
        .join(format!("{case_id}.json"))
}

/// Case manifests (*.json) directly under `root`, sorted by case id.
pub fn list_cases(root: &Path) -> Result<Vec<CaseRef>> {
    let mut cases = Vec::new();
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let path = entry.path();
        if !path.is_file() || path.extension().map(|e| e != "json").unwrap_or(true) {
            continue;
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let head: CaseIdOnly = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.clone(),
            source: e,
        })?;
        cases.push(CaseRef {
            case_id: head.case_id,
            manifest_path: path,
        });
    }
    cases.sort_by(|a, b| a.case_id.cmp(&b.case_id));
    for pair in cases.windows(2) {
        if pair[0].case_id == pair[1].case_id {
            return Err(Error::Data(format!(
                "duplicate case id {} ({} and {})",
                pair[0].case_id,
                pair[0].manifest_path.display(),
                pair[1].manifest_path.display()
            )));
        }
    }
    if cases.is_empty() {
        return Err(Error::Config(format!(
            "no case manifests (*.json) found in {}",
            root.display()
        )));
    }
    Ok(cases)
}

/// Scans the dataset and prediction roots. Teams missing any case are
/// excluded with a warning; teams outside the filter are skipped
/// silently. At least one complete team must remain.
pub fn discover(config: &RunConfig) -> Result<Discovery> {
    let cases = list_cases(&config.dataset_root)?;

    let mut teams = Vec::new();
    let mut warnings = Vec::new();
    let entries =
        fs::read_dir(&config.predictions_root).map_err(|e| Error::io(&config.predictions_root, e))?;
    let mut candidates: Vec<String> = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(&config.predictions_root, e))?;
        if entry.path().is_dir() {
            candidates.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    candidates.sort();
    for team in candidates {
        if !config.teams.admits(&team) {
            continue;
        }
        let missing: Vec<&str> = cases
            .iter()
            .filter(|c| !prediction_path(config, &team, &c.case_id).is_file())
            .map(|c| c.case_id.as_str())
            .collect();
        if missing.is_empty() {
            teams.push(team);
        } else {
            warnings.push(format!(
                "excluding team {team}: missing predictions for {}",
                missing.join(", ")
            ));
        }
    }
    if teams.is_empty() {
        return Err(Error::Config(format!(
            "no team in {} has a complete set of predictions",
            config.predictions_root.display()
        )));
    }
    Ok(Discovery {
        cases,
        teams,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn write_case(dir: &Path, id: &str) {
        fs::write(
            dir.join(format!("{id}.json")),
            format!(r#"{{"case_id":"{id}","reference":"{id}_ref.json","rois":[]}}"#),
        )
        .unwrap();
    }

    fn setup(case_ids: &[&str], teams: &[(&str, &[&str])]) -> (tempfile::TempDir, RunConfig) {
        let dir = tempdir().unwrap();
        let data = dir.path().join("data");
        let preds = dir.path().join("preds");
        fs::create_dir(&data).unwrap();
        fs::create_dir(&preds).unwrap();
        for id in case_ids {
            write_case(&data, id);
        }
        for (team, covered) in teams {
            let tdir = preds.join(team);
            fs::create_dir(&tdir).unwrap();
            for id in *covered {
                fs::write(tdir.join(format!("{id}.json")), "{}").unwrap();
            }
        }
        let config = RunConfig {
            dataset_root: data,
            predictions_root: preds,
            output_dir: dir.path().join("out"),
            sampling: Default::default(),
            surface_dice: Default::default(),
            postprocess: Default::default(),
            stats: Default::default(),
            teams: Default::default(),
            workers: 0,
            heatmap: None,
            strata_top_n: 5,
        };
        (dir, config)
    }

    #[test]
    fn complete_teams_kept_incomplete_warned() {
        let (_dir, config) = setup(
            &["case_00001", "case_00002"],
            &[
                ("alpha", &["case_00001", "case_00002"][..]),
                ("beta", &["case_00001"][..]),
            ],
        );
        let d = discover(&config).unwrap();
        assert_eq!(
            d.cases.iter().map(|c| c.case_id.as_str()).collect::<Vec<_>>(),
            vec!["case_00001", "case_00002"]
        );
        assert_eq!(d.teams, vec!["alpha"]);
        assert_eq!(d.warnings.len(), 1);
        assert!(d.warnings[0].contains("beta"));
        assert!(d.warnings[0].contains("case_00002"));
    }

    #[test]
    fn filters_apply_before_completeness() {
        let (_dir, mut config) = setup(
            &["case_00001"],
            &[("alpha", &["case_00001"][..]), ("beta", &["case_00001"][..])],
        );
        config.teams.deny = vec!["alpha".to_string()];
        let d = discover(&config).unwrap();
        assert_eq!(d.teams, vec!["beta"]);
        assert!(d.warnings.is_empty());
    }

    #[test]
    fn empty_dataset_is_config_error() {
        let (_dir, mut config) = setup(&["case_00001"], &[("alpha", &["case_00001"][..])]);
        let empty = config.dataset_root.parent().unwrap().join("empty");
        fs::create_dir(&empty).unwrap();
        config.dataset_root = empty;
        assert!(matches!(discover(&config), Err(Error::Config(_))));
    }

    #[test]
    fn all_teams_incomplete_is_config_error() {
        let (_dir, config) = setup(&["case_00001", "case_00002"], &[("alpha", &["case_00001"][..])]);
        assert!(matches!(discover(&config), Err(Error::Config(_))));
    }
}
