//! Leaderboard aggregation (rank-then-aggregate with the tumor-Dice
//! tiebreak), bootstrap ranking stability, and pairwise significance
//! with Holm-Bonferroni correction.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::metrics::{HecId, MetricRecord};
use crate::stats;

/// Per-(team, case) aggregate: composite-and-HEC means of the two
/// metrics, plus the composite-mean tumor Dice used for tiebreaks.
#[derive(Debug, Clone, PartialEq)]
pub struct TeamCaseScore {
    pub team_id: String,
    pub case_id: String,
    pub mean_dice: f64,
    pub mean_surface_dice: f64,
    pub tumor_dice: f64,
}

/// One final leaderboard entry.
#[derive(Debug, Clone, PartialEq)]
pub struct LeaderboardRow {
    pub team_id: String,
    pub agg_dice: f64,
    pub agg_surface_dice: f64,
    pub rank_dice: f64,
    pub rank_surface_dice: f64,
    pub mean_rank: f64,
    pub final_rank: usize,
    pub tiebreak_tumor_dice: f64,
}

/// Bootstrap resampling result. `rank_frequency[t][r]` is the fraction
/// of samples in which team `t` (in `teams` order) held final rank r+1.
#[derive(Debug, Clone)]
pub struct BootstrapResult {
    pub teams: Vec<String>,
    pub samples: usize,
    pub rank_frequency: Vec<Vec<f64>>,
    /// Per sample, per team: (agg_dice, agg_surface_dice).
    pub aggregates: Vec<Vec<(f64, f64)>>,
}

/// Which per-case score the pairwise test compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricSelector {
    TumorDice,
    MeanDice,
    MeanSurfaceDice,
}

impl MetricSelector {
    fn pick(self, s: &TeamCaseScore) -> f64 {
        match self {
            MetricSelector::TumorDice => s.tumor_dice,
            MetricSelector::MeanDice => s.mean_dice,
            MetricSelector::MeanSurfaceDice => s.mean_surface_dice,
        }
    }
}

/// Pairwise one-sided test results over all ordered team pairs.
/// `raw_p[i][j]` is the p-value for "team i better than team j";
/// the diagonal is absent.
#[derive(Debug, Clone)]
pub struct SignificanceMatrix {
    pub teams: Vec<String>,
    pub alpha: f64,
    pub raw_p: Vec<Vec<Option<f64>>>,
    pub rejected: Vec<Vec<bool>>,
}

/// Collapses metric records to one row per (team, case): mean over
/// composites of the mean over the 3 HECs per metric, and the
/// composite-mean Tumor-HEC dice. Fails listing any missing
/// (team, case) coverage.
pub fn aggregate_scores(records: &[MetricRecord]) -> Result<Vec<TeamCaseScore>> {
    let teams: BTreeSet<&str> = records.iter().map(|r| r.team_id.as_str()).collect();
    let cases: BTreeSet<&str> = records.iter().map(|r| r.case_id.as_str()).collect();
    if teams.is_empty() {
        return Err(Error::Data("no metric records to aggregate".to_string()));
    }

    // (team, case) -> composite -> [record per HEC]
    let mut grouped: BTreeMap<(&str, &str), BTreeMap<usize, Vec<&MetricRecord>>> = BTreeMap::new();
    for r in records {
        grouped
            .entry((r.team_id.as_str(), r.case_id.as_str()))
            .or_default()
            .entry(r.composite_idx)
            .or_default()
            .push(r);
    }

    let mut gaps = Vec::new();
    for &team in &teams {
        for &case in &cases {
            if !grouped.contains_key(&(team, case)) {
                gaps.push(format!("({team}, {case})"));
            }
        }
    }
    if !gaps.is_empty() {
        return Err(Error::Data(format!(
            "incomplete metric records; missing (team, case) pairs: {}",
            gaps.join(", ")
        )));
    }

    let mut out = Vec::with_capacity(grouped.len());
    for ((team, case), composites) in &grouped {
        let mut dice_sum = 0.0;
        let mut surface_sum = 0.0;
        let mut tumor_sum = 0.0;
        for (composite_idx, recs) in composites {
            if recs.len() != HecId::ALL.len() {
                return Err(Error::Data(format!(
                    "team {team}, case {case}, composite {composite_idx}: expected {} HEC records, found {}",
                    HecId::ALL.len(),
                    recs.len()
                )));
            }
            dice_sum += recs.iter().map(|r| r.dice).sum::<f64>() / recs.len() as f64;
            surface_sum += recs.iter().map(|r| r.surface_dice).sum::<f64>() / recs.len() as f64;
            let tumor = recs
                .iter()
                .find(|r| r.hec == HecId::Tumor)
                .ok_or_else(|| {
                    Error::Data(format!(
                        "team {team}, case {case}, composite {composite_idx}: no Tumor HEC record"
                    ))
                })?;
            tumor_sum += tumor.dice;
        }
        let k = composites.len() as f64;
        out.push(TeamCaseScore {
            team_id: team.to_string(),
            case_id: case.to_string(),
            mean_dice: dice_sum / k,
            mean_surface_dice: surface_sum / k,
            tumor_dice: tumor_sum / k,
        });
    }
    Ok(out)
}

/// 1-based descending average ranks (highest value gets rank 1).
fn rank_descending(values: &[f64]) -> Vec<f64> {
    let negated: Vec<f64> = values.iter().map(|v| -v).collect();
    stats::average_ranks(&negated)
}

struct TeamAggregate {
    team_id: String,
    agg_dice: f64,
    agg_surface_dice: f64,
    tumor_dice: f64,
}

fn team_aggregates(scores: &[TeamCaseScore]) -> Vec<TeamAggregate> {
    let mut by_team: BTreeMap<&str, Vec<&TeamCaseScore>> = BTreeMap::new();
    for s in scores {
        by_team.entry(s.team_id.as_str()).or_default().push(s);
    }
    by_team
        .into_iter()
        .map(|(team, rows)| {
            let n = rows.len() as f64;
            TeamAggregate {
                team_id: team.to_string(),
                agg_dice: rows.iter().map(|r| r.mean_dice).sum::<f64>() / n,
                agg_surface_dice: rows.iter().map(|r| r.mean_surface_dice).sum::<f64>() / n,
                tumor_dice: rows.iter().map(|r| r.tumor_dice).sum::<f64>() / n,
            }
        })
        .collect()
}

/// Final leaderboard: rank each metric descending (average ranks on
/// ties), order by mean rank, break ties by descending mean tumor dice,
/// then by team id. Output is sorted by final rank.
pub fn rank_then_aggregate(scores: &[TeamCaseScore]) -> Result<Vec<LeaderboardRow>> {
    let aggregates = team_aggregates(scores);
    if aggregates.is_empty() {
        return Err(Error::Data("no team scores to rank".to_string()));
    }
    let dice_values: Vec<f64> = aggregates.iter().map(|a| a.agg_dice).collect();
    let surface_values: Vec<f64> = aggregates.iter().map(|a| a.agg_surface_dice).collect();
    let rank_dice = rank_descending(&dice_values);
    let rank_surface = rank_descending(&surface_values);

    let mut rows: Vec<LeaderboardRow> = aggregates
        .iter()
        .zip(rank_dice.iter().zip(&rank_surface))
        .map(|(a, (&rd, &rs))| LeaderboardRow {
            team_id: a.team_id.clone(),
            agg_dice: a.agg_dice,
            agg_surface_dice: a.agg_surface_dice,
            rank_dice: rd,
            rank_surface_dice: rs,
            mean_rank: (rd + rs) / 2.0,
            final_rank: 0,
            tiebreak_tumor_dice: a.tumor_dice,
        })
        .collect();

    rows.sort_by(|a, b| {
        a.mean_rank
            .total_cmp(&b.mean_rank)
            .then_with(|| b.tiebreak_tumor_dice.total_cmp(&a.tiebreak_tumor_dice))
            .then_with(|| a.team_id.cmp(&b.team_id))
    });
    for (pos, row) in rows.iter_mut().enumerate() {
        row.final_rank = pos + 1;
    }
    Ok(rows)
}

/// Bootstrap ranking stability: B resamples of the case set with
/// replacement (the same resample applied to all teams), a full
/// rank-then-aggregate per resample. Deterministic for a fixed seed.
pub fn bootstrap_ranking(
    scores: &[TeamCaseScore],
    b: usize,
    seed: u64,
) -> Result<BootstrapResult> {
    if b == 0 {
        return Err(Error::Config("bootstrap needs B >= 1".to_string()));
    }
    let teams: Vec<String> = scores
        .iter()
        .map(|s| s.team_id.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let cases: Vec<String> = scores
        .iter()
        .map(|s| s.case_id.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let t = teams.len();
    let n = cases.len();
    if t == 0 || n == 0 {
        return Err(Error::Data("no scores to bootstrap".to_string()));
    }
    let team_index: BTreeMap<&str, usize> = teams
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    // score lookup by (team, case)
    let mut lookup: BTreeMap<(&str, &str), &TeamCaseScore> = BTreeMap::new();
    for s in scores {
        lookup.insert((s.team_id.as_str(), s.case_id.as_str()), s);
    }

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut frequency = vec![vec![0usize; t]; t];
    let mut aggregates = Vec::with_capacity(b);
    for _ in 0..b {
        let resample: Vec<&str> = (0..n).map(|_| cases[rng.gen_range(0..n)].as_str()).collect();
        let mut sample_scores = Vec::with_capacity(t * n);
        for team in &teams {
            for case in &resample {
                let s = lookup.get(&(team.as_str(), *case)).ok_or_else(|| {
                    Error::Data(format!("missing score for team {team}, case {case}"))
                })?;
                sample_scores.push((*s).clone());
            }
        }
        let leaderboard = rank_then_aggregate(&sample_scores)?;
        let mut per_team = vec![(0.0, 0.0); t];
        for row in &leaderboard {
            let ti = team_index[row.team_id.as_str()];
            frequency[ti][row.final_rank - 1] += 1;
            per_team[ti] = (row.agg_dice, row.agg_surface_dice);
        }
        aggregates.push(per_team);
    }
    let rank_frequency = frequency
        .into_iter()
        .map(|row| row.into_iter().map(|c| c as f64 / b as f64).collect())
        .collect();
    Ok(BootstrapResult {
        teams,
        samples: b,
        rank_frequency,
        aggregates,
    })
}

/// Minimum case count for the paired test to be able to reach p < 0.05.
pub const MIN_SIGNIFICANCE_CASES: usize = 6;

/// One-sided paired Wilcoxon signed-rank tests over all ordered team
/// pairs on the selected per-case score, with Holm step-down decisions
/// over the T(T-1) hypotheses.
pub fn pairwise_significance(
    scores: &[TeamCaseScore],
    alpha: f64,
    selector: MetricSelector,
) -> Result<SignificanceMatrix> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!("alpha {alpha} must be in (0, 1)")));
    }
    let teams: Vec<String> = scores
        .iter()
        .map(|s| s.team_id.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let cases: Vec<String> = scores
        .iter()
        .map(|s| s.case_id.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let t = teams.len();
    if t < 2 {
        return Err(Error::Data("pairwise tests need at least 2 teams".to_string()));
    }
    if cases.len() < MIN_SIGNIFICANCE_CASES {
        return Err(Error::Data(format!(
            "pairwise tests need at least {MIN_SIGNIFICANCE_CASES} cases, found {}",
            cases.len()
        )));
    }
    let mut lookup: BTreeMap<(&str, &str), f64> = BTreeMap::new();
    for s in scores {
        lookup.insert((s.team_id.as_str(), s.case_id.as_str()), selector.pick(s));
    }
    let value = |team: &str, case: &str| -> Result<f64> {
        lookup
            .get(&(team, case))
            .copied()
            .ok_or_else(|| Error::Data(format!("missing score for team {team}, case {case}")))
    };

    let mut raw_p = vec![vec![None; t]; t];
    let mut flat = Vec::with_capacity(t * (t - 1));
    for i in 0..t {
        for j in 0..t {
            if i == j {
                continue;
            }
            let diffs: Vec<f64> = cases
                .iter()
                .map(|c| Ok(value(&teams[i], c)? - value(&teams[j], c)?))
                .collect::<Result<_>>()?;
            let p = stats::wilcoxon_signed_rank_one_sided(&diffs);
            raw_p[i][j] = Some(p);
            flat.push((i, j, p));
        }
    }
    let decisions = stats::holm_decisions(
        &flat.iter().map(|&(_, _, p)| p).collect::<Vec<_>>(),
        alpha,
    );
    let mut rejected = vec![vec![false; t]; t];
    for (&(i, j, _), &d) in flat.iter().zip(&decisions) {
        rejected[i][j] = d;
    }
    Ok(SignificanceMatrix {
        teams,
        alpha,
        raw_p,
        rejected,
    })
}
