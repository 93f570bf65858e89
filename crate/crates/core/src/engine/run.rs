//! The end-to-end pipeline and the incremental per-stage entry points
//! that rerun one step from saved intermediates.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Deserialize;

use crate::annotations::{
    self, case_stream_seed, load_case_manifest, sample_composites, CaseAnnotation,
    CompositeSelector,
};
use crate::engine::config::RunConfig;
use crate::engine::discover::{self, discover, prediction_path, CaseRef, Discovery};
use crate::engine::manifest::{
    self, dataset_fingerprint, load_run_manifest, write_run_manifest, RunManifest,
};
use crate::engine::report::{self, write_atomic};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_case, MetricRecord};
use crate::postprocess::apply_rules;
use crate::ranking::{
    aggregate_scores, bootstrap_ranking, pairwise_significance, rank_then_aggregate,
    LeaderboardRow, TeamCaseScore, MIN_SIGNIFICANCE_CASES,
};
use crate::strata::{cluster_cases, ols_regress, prediction_heatmap, CaseCovariates};
use crate::volgrid::{read_volume, write_count_volume, write_volume, ClassCode, LabelVolume};

/// Left behind under the output directory whenever a run aborts before
/// all results are in place.
pub const PARTIAL_MARKER: &str = ".partial";

/// Seed-stream label for the bootstrap resampler, kept distinct from
/// the per-case composite-sampling streams.
const BOOTSTRAP_STREAM: &str = "\u{0}bootstrap";

fn run_in_pool<T: Send>(workers: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    if workers == 0 {
        return f();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    pool.install(f)
}

struct LoadedCase {
    case: CaseAnnotation,
    selectors: Vec<CompositeSelector>,
}

fn load_cases(config: &RunConfig, refs: &[CaseRef]) -> Result<Vec<LoadedCase>> {
    refs.par_iter()
        .map(|r| {
            let case = load_case_manifest(&r.manifest_path)?;
            if case.case_id != r.case_id {
                return Err(Error::Data(format!(
                    "manifest {} declares case_id {}, expected {}",
                    r.manifest_path.display(),
                    case.case_id,
                    r.case_id
                )));
            }
            let selectors = sample_composites(&case, &config.sampling);
            Ok(LoadedCase { case, selectors })
        })
        .collect()
}

fn read_prediction(config: &RunConfig, team: &str, case_id: &str) -> Result<LabelVolume> {
    let path = prediction_path(config, team, case_id);
    let pred = read_volume(&path)?;
    if config.postprocess.enabled {
        apply_rules(&pred, &config.postprocess.rules)
    } else {
        Ok(pred)
    }
}

fn evaluate_all(
    config: &RunConfig,
    teams: &[String],
    cases: &[LoadedCase],
) -> Result<Vec<MetricRecord>> {
    let units: Vec<(&String, &LoadedCase)> = teams
        .iter()
        .flat_map(|t| cases.iter().map(move |c| (t, c)))
        .collect();
    let nested: Vec<Vec<MetricRecord>> = units
        .par_iter()
        .map(|(team, loaded)| {
            let pred = read_prediction(config, team, &loaded.case.case_id)?;
            evaluate_case(
                team,
                &pred,
                &loaded.case,
                &loaded.selectors,
                &config.surface_dice,
            )
        })
        .collect::<Result<_>>()?;
    Ok(nested.into_iter().flatten().collect())
}

fn strata_fit(
    scores: &[TeamCaseScore],
    covariates: &[(String, CaseCovariates)],
    teams: &[String],
) -> Result<crate::strata::RegressionResult> {
    let mut y = Vec::with_capacity(covariates.len());
    let mut x = Vec::with_capacity(covariates.len());
    for (case_id, cov) in covariates {
        cov.validate()?;
        let mut sum = 0.0;
        for team in teams {
            let s = scores
                .iter()
                .find(|s| &s.team_id == team && &s.case_id == case_id)
                .ok_or_else(|| {
                    Error::Data(format!("no score for team {team}, case {case_id}"))
                })?;
            sum += s.tumor_dice;
        }
        y.push(sum / teams.len() as f64);
        x.push(cov.predictor_row());
    }
    ols_regress(&CaseCovariates::PREDICTOR_NAMES, &x, &y)
}

/// Per-case feature vectors (tumor dice per team, teams sorted) for the
/// case dendrogram.
fn cluster_inputs(scores: &[TeamCaseScore]) -> (Vec<String>, Vec<Vec<f64>>) {
    use std::collections::BTreeMap;
    let mut by_case: BTreeMap<&str, BTreeMap<&str, f64>> = BTreeMap::new();
    for s in scores {
        by_case
            .entry(s.case_id.as_str())
            .or_default()
            .insert(s.team_id.as_str(), s.tumor_dice);
    }
    let case_ids: Vec<String> = by_case.keys().map(|s| s.to_string()).collect();
    let features = by_case
        .values()
        .map(|per_team| per_team.values().copied().collect())
        .collect();
    (case_ids, features)
}

fn heatmap_path(output_dir: &Path, case_id: &str, class: ClassCode) -> PathBuf {
    output_dir.join(format!("heatmap_{case_id}_{}.json", class.name()))
}

fn write_heatmap(
    config: &RunConfig,
    teams: &[String],
    case_id: &str,
    class: ClassCode,
) -> Result<PathBuf> {
    let preds: Vec<LabelVolume> = teams
        .iter()
        .map(|t| read_prediction(config, t, case_id))
        .collect::<Result<_>>()?;
    let refs: Vec<&LabelVolume> = preds.iter().collect();
    let heat = prediction_heatmap(&refs, class)?;
    let path = heatmap_path(&config.output_dir, case_id, class);
    write_count_volume(&heat, &path)?;
    Ok(path)
}

/// The full pipeline: discovery, evaluation, ranking, bootstrap,
/// significance, strata/cluster analysis, optional heatmaps, manifest.
/// Returns warnings (excluded teams, skipped optional stages).
pub fn run_evaluation(config: &RunConfig, workers: usize) -> Result<Vec<String>> {
    config.validate()?;
    let discovery = discover(config)?;
    let mut warnings = discovery.warnings.clone();

    fs::create_dir_all(&config.output_dir).map_err(|e| Error::io(&config.output_dir, e))?;
    let marker = config.output_dir.join(PARTIAL_MARKER);
    fs::write(&marker, b"run in progress or aborted\n").map_err(|e| Error::io(&marker, e))?;

    run_in_pool(workers, || {
        run_stages(config, &discovery, &mut warnings)
    })?;

    fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))?;
    Ok(warnings)
}

fn run_stages(
    config: &RunConfig,
    discovery: &Discovery,
    warnings: &mut Vec<String>,
) -> Result<()> {
    let started = manifest::unix_now();
    let fingerprint = dataset_fingerprint(&discovery.cases)?;
    let cases = load_cases(config, &discovery.cases)?;
    let out = &config.output_dir;

    let records = evaluate_all(config, &discovery.teams, &cases)?;
    write_atomic(
        &out.join(report::METRICS_FILE),
        report::metrics_csv(&records).as_bytes(),
    )?;

    let scores = aggregate_scores(&records)?;
    let leaderboard = rank_then_aggregate(&scores)?;
    write_atomic(
        &out.join(report::LEADERBOARD_FILE),
        report::leaderboard_csv(&leaderboard).as_bytes(),
    )?;

    let seed = case_stream_seed(config.sampling.master_seed, BOOTSTRAP_STREAM);
    let bootstrap = bootstrap_ranking(&scores, config.stats.bootstrap_samples, seed)?;
    write_atomic(
        &out.join(report::BOOTSTRAP_FILE),
        report::bootstrap_json(&bootstrap).as_bytes(),
    )?;

    if discovery.teams.len() >= 2 && discovery.cases.len() >= MIN_SIGNIFICANCE_CASES {
        let sig = pairwise_significance(
            &scores,
            config.stats.alpha,
            config.stats.significance_metric,
        )?;
        write_atomic(
            &out.join(report::SIGNIFICANCE_FILE),
            report::significance_csv(&sig).as_bytes(),
        )?;
    } else {
        warnings.push(format!(
            "skipping significance tests: need >= 2 teams and >= {MIN_SIGNIFICANCE_CASES} cases"
        ));
    }

    let covariates: Vec<(String, CaseCovariates)> = cases
        .iter()
        .filter_map(|c| c.case.covariates.map(|cov| (c.case.case_id.clone(), cov)))
        .collect();
    if covariates.len() == cases.len() {
        let top: Vec<String> = leaderboard
            .iter()
            .take(config.strata_top_n)
            .map(|r| r.team_id.clone())
            .collect();
        match strata_fit(&scores, &covariates, &top) {
            Ok(fit) => write_atomic(
                &out.join(report::STRATA_FILE),
                report::strata_csv(&fit).as_bytes(),
            )?,
            Err(e) => warnings.push(format!("skipping strata regression: {e}")),
        }
    } else if !covariates.is_empty() {
        warnings.push(format!(
            "skipping strata regression: covariates on {} of {} cases",
            covariates.len(),
            cases.len()
        ));
    }

    let (case_ids, features) = cluster_inputs(&scores);
    let tree = cluster_cases(&case_ids, &features)?;
    write_atomic(
        &out.join(report::DENDROGRAM_FILE),
        tree.to_newick().as_bytes(),
    )?;

    if let Some(heatmap) = &config.heatmap {
        let wanted: Vec<&str> = match &heatmap.cases {
            Some(ids) => ids.iter().map(String::as_str).collect(),
            None => discovery.cases.iter().map(|c| c.case_id.as_str()).collect(),
        };
        for case_id in wanted {
            if !discovery.cases.iter().any(|c| c.case_id == case_id) {
                return Err(Error::Config(format!("heatmap case {case_id} not in dataset")));
            }
            for class_name in &heatmap.classes {
                let class = ClassCode::from_name(class_name)?;
                write_heatmap(config, &discovery.teams, case_id, class)?;
            }
        }
    }

    let run_manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        master_seed: config.sampling.master_seed,
        dataset_fingerprint: fingerprint,
        case_ids: discovery.cases.iter().map(|c| c.case_id.clone()).collect(),
        teams: discovery.teams.clone(),
        started_unix: started,
        finished_unix: manifest::unix_now(),
        config: config.clone(),
    };
    write_run_manifest(out, &run_manifest)
}

/// Saved metrics for the incremental stages, with a staleness check:
/// when a run manifest exists, the dataset must still hash to the
/// fingerprint recorded at evaluation time.
fn read_saved_metrics(config: &RunConfig) -> Result<Vec<MetricRecord>> {
    if let Some(m) = load_run_manifest(&config.output_dir)? {
        let cases = discover::list_cases(&config.dataset_root)?;
        let current = dataset_fingerprint(&cases)?;
        if current != m.dataset_fingerprint {
            return Err(Error::Data(format!(
                "stale intermediates in {}: dataset fingerprint changed since evaluation (rerun `evaluate`)",
                config.output_dir.display()
            )));
        }
    }
    let path = config.output_dir.join(report::METRICS_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    report::parse_metrics_csv(&text)
}

fn saved_scores(config: &RunConfig) -> Result<Vec<TeamCaseScore>> {
    aggregate_scores(&read_saved_metrics(config)?)
}

pub fn stage_rank(config: &RunConfig) -> Result<Vec<LeaderboardRow>> {
    let leaderboard = rank_then_aggregate(&saved_scores(config)?)?;
    write_atomic(
        &config.output_dir.join(report::LEADERBOARD_FILE),
        report::leaderboard_csv(&leaderboard).as_bytes(),
    )?;
    Ok(leaderboard)
}

pub fn stage_bootstrap(config: &RunConfig) -> Result<()> {
    let seed = case_stream_seed(config.sampling.master_seed, BOOTSTRAP_STREAM);
    let result = bootstrap_ranking(
        &saved_scores(config)?,
        config.stats.bootstrap_samples,
        seed,
    )?;
    write_atomic(
        &config.output_dir.join(report::BOOTSTRAP_FILE),
        report::bootstrap_json(&result).as_bytes(),
    )
}

pub fn stage_significance(config: &RunConfig) -> Result<()> {
    let sig = pairwise_significance(
        &saved_scores(config)?,
        config.stats.alpha,
        config.stats.significance_metric,
    )?;
    write_atomic(
        &config.output_dir.join(report::SIGNIFICANCE_FILE),
        report::significance_csv(&sig).as_bytes(),
    )
}

#[derive(Deserialize)]
struct CovariatesOnly {
    case_id: String,
    #[serde(default)]
    covariates: Option<CaseCovariates>,
}

/// Case covariates parsed straight from the manifests, without loading
/// any volume data.
fn load_covariates(config: &RunConfig) -> Result<Vec<(String, CaseCovariates)>> {
    let mut out = Vec::new();
    for case in discover::list_cases(&config.dataset_root)? {
        let text = fs::read_to_string(&case.manifest_path)
            .map_err(|e| Error::io(&case.manifest_path, e))?;
        let parsed: CovariatesOnly =
            serde_json::from_str(&text).map_err(|e| Error::Json {
                path: case.manifest_path.clone(),
                source: e,
            })?;
        let cov = parsed.covariates.ok_or_else(|| {
            Error::Data(format!("case {} has no covariates", parsed.case_id))
        })?;
        out.push((parsed.case_id, cov));
    }
    Ok(out)
}

/// Strata regression from saved metrics. `teams` selects the subset to
/// average; `None` takes the configured top-N of the leaderboard.
pub fn stage_strata(
    config: &RunConfig,
    teams: Option<&[String]>,
) -> Result<crate::strata::RegressionResult> {
    let scores = saved_scores(config)?;
    let covariates = load_covariates(config)?;
    let selected: Vec<String> = match teams {
        Some(list) if !list.is_empty() => list.to_vec(),
        _ => rank_then_aggregate(&scores)?
            .iter()
            .take(config.strata_top_n)
            .map(|r| r.team_id.clone())
            .collect(),
    };
    let fit = strata_fit(&scores, &covariates, &selected)?;
    write_atomic(
        &config.output_dir.join(report::STRATA_FILE),
        report::strata_csv(&fit).as_bytes(),
    )?;
    Ok(fit)
}

pub fn stage_cluster(config: &RunConfig) -> Result<String> {
    let (case_ids, features) = cluster_inputs(&saved_scores(config)?);
    let tree = cluster_cases(&case_ids, &features)?;
    let newick = tree.to_newick();
    write_atomic(
        &config.output_dir.join(report::DENDROGRAM_FILE),
        newick.as_bytes(),
    )?;
    Ok(newick)
}

pub fn stage_postprocess(config: &RunConfig, input: &Path, output: &Path) -> Result<()> {
    let pred = read_volume(input)?;
    let cleaned = apply_rules(&pred, &config.postprocess.rules)?;
    if let Some(dir) = output.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_volume(&cleaned, output)
}

fn find_case(config: &RunConfig, case_id: &str) -> Result<CaseRef> {
    discover::list_cases(&config.dataset_root)?
        .into_iter()
        .find(|c| c.case_id == case_id)
        .ok_or_else(|| Error::Data(format!("case {case_id} not found in dataset")))
}

/// JSON description of the composite selectors drawn for one case.
pub fn stage_sample(config: &RunConfig, case_id: &str) -> Result<String> {
    let case = load_case_manifest(&find_case(config, case_id)?.manifest_path)?;
    let selectors = sample_composites(&case, &config.sampling);
    let total = annotations::composite_count(&case);
    let rows = selectors
        .iter()
        .map(|s| {
            format!(
                "[{}]",
                s.choices
                    .iter()
                    .map(usize::to_string)
                    .collect::<Vec<_>>()
                    .join(",")
            )
        })
        .collect::<Vec<_>>()
        .join(",\n    ");
    Ok(format!(
        "{{\n  \"case_id\": \"{}\",\n  \"master_seed\": {},\n  \"composite_count\": {},\n  \"selectors\": [\n    {}\n  ]\n}}\n",
        case.case_id, config.sampling.master_seed, total, rows
    ))
}

pub fn stage_agreement(config: &RunConfig, case_id: &str, class_name: &str) -> Result<f64> {
    let class = ClassCode::from_name(class_name)?;
    let case = load_case_manifest(&find_case(config, case_id)?.manifest_path)?;
    annotations::interannotator_agreement(&case, class)
}

pub fn stage_heatmap(config: &RunConfig, case_id: &str, class_name: &str) -> Result<PathBuf> {
    let class = ClassCode::from_name(class_name)?;
    find_case(config, case_id)?;
    let discovery = discover(config)?;
    fs::create_dir_all(&config.output_dir).map_err(|e| Error::io(&config.output_dir, e))?;
    write_heatmap(config, &discovery.teams, case_id, class)
}
