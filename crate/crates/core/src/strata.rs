//! Hidden-strata analysis: multivariate linear regression of performance
//! on case covariates, hierarchical clustering of cases by per-team score
//! vectors, and prediction-sum heatmaps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::t_two_sided_p;
use crate::volgrid::{ClassCode, CountVolume, LabelVolume};

/// Per-case demographic and tumor covariates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CaseCovariates {
    pub tumor_size_cm: f64,
    pub clear_cell: u8,
    pub female: u8,
    pub non_caucasian: u8,
}

impl CaseCovariates {
    pub fn validate(&self) -> Result<()> {
        if !(self.tumor_size_cm > 0.0) {
            return Err(Error::Data(format!(
                "tumor_size_cm {} must be > 0",
                self.tumor_size_cm
            )));
        }
        for (name, v) in [
            ("clear_cell", self.clear_cell),
            ("female", self.female),
            ("non_caucasian", self.non_caucasian),
        ] {
            if v > 1 {
                return Err(Error::Data(format!("{name} must be 0 or 1, got {v}")));
            }
        }
        Ok(())
    }

    /// Canonical report column order.
    pub const PREDICTOR_NAMES: [&'static str; 4] = [
        "tumor_size_cm",
        "clear_cell",
        "female",
        "non_caucasian",
    ];

    pub fn predictor_row(&self) -> Vec<f64> {
        vec![
            self.tumor_size_cm,
            self.clear_cell as f64,
            self.female as f64,
            self.non_caucasian as f64,
        ]
    }
}

/// OLS fit with classical (homoskedastic) standard errors and two-sided
/// t-test p-values. The intercept is the last entry.
#[derive(Debug, Clone)]
pub struct RegressionResult {
    pub names: Vec<String>,
    pub coefficients: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub p_values: Vec<f64>,
    pub n: usize,
    pub predictors: usize,
}

/// Solves A x = b by Gaussian elimination with partial pivoting.
/// `names` label the columns for the singularity error.
fn solve_linear(mut a: Vec<Vec<f64>>, mut b: Vec<f64>, names: &[String]) -> Result<Vec<f64>> {
    let n = b.len();
    let scale: Vec<f64> = (0..n)
        .map(|i| a[i].iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300))
        .collect();
    let mut perm: Vec<usize> = (0..n).collect();
    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&r1, &r2| {
                (a[r1][col].abs() / scale[perm[r1]])
                    .total_cmp(&(a[r2][col].abs() / scale[perm[r2]]))
            })
            .unwrap();
        a.swap(col, pivot_row);
        b.swap(col, pivot_row);
        perm.swap(col, pivot_row);
        let pivot = a[col][col];
        if pivot.abs() < 1e-10 * scale[perm[col]] {
            return Err(Error::Stats(format!(
                "design matrix is rank-deficient; column {:?} is collinear with the others",
                names.get(col).map(String::as_str).unwrap_or("?")
            )));
        }
        for row in (col + 1)..n {
            let factor = a[row][col] / pivot;
            if factor == 0.0 {
                continue;
            }
            for k in col..n {
                a[row][k] -= factor * a[col][k];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for col in (0..n).rev() {
        let mut v = b[col];
        for k in (col + 1)..n {
            v -= a[col][k] * x[k];
        }
        x[col] = v / a[col][col];
    }
    Ok(x)
}

/// Inverts a symmetric positive-definite matrix column by column.
fn invert(a: &[Vec<f64>], names: &[String]) -> Result<Vec<Vec<f64>>> {
    let n = a.len();
    let mut inv = vec![vec![0.0; n]; n];
    for col in 0..n {
        let mut e = vec![0.0; n];
        e[col] = 1.0;
        let x = solve_linear(a.to_vec(), e, names)?;
        for row in 0..n {
            inv[row][col] = x[row];
        }
    }
    Ok(inv)
}

/// Ordinary least squares of `y` on predictor rows `x` plus an intercept.
/// `predictor_names` label the columns of `x` (the intercept is added
/// internally and reported last).
pub fn ols_regress(
    predictor_names: &[&str],
    x: &[Vec<f64>],
    y: &[f64],
) -> Result<RegressionResult> {
    let n = y.len();
    let p = predictor_names.len();
    if x.len() != n {
        return Err(Error::Stats(format!(
            "design has {} rows but y has {n}",
            x.len()
        )));
    }
    if x.iter().any(|row| row.len() != p) {
        return Err(Error::Stats("ragged design matrix".to_string()));
    }
    if n <= p + 1 {
        return Err(Error::Stats(format!(
            "need n > p + 1 observations (n = {n}, p = {p})"
        )));
    }
    let names: Vec<String> = predictor_names
        .iter()
        .map(|s| s.to_string())
        .chain(std::iter::once("intercept".to_string()))
        .collect();
    let cols = p + 1;
    // design with intercept appended
    let design: Vec<Vec<f64>> = x
        .iter()
        .map(|row| row.iter().copied().chain(std::iter::once(1.0)).collect())
        .collect();
    let mut xtx = vec![vec![0.0; cols]; cols];
    let mut xty = vec![0.0; cols];
    for (row, &yi) in design.iter().zip(y) {
        for a in 0..cols {
            xty[a] += row[a] * yi;
            for b in 0..cols {
                xtx[a][b] += row[a] * row[b];
            }
        }
    }
    let coefficients = solve_linear(xtx.clone(), xty, &names)?;
    let rss: f64 = design
        .iter()
        .zip(y)
        .map(|(row, &yi)| {
            let fit: f64 = row.iter().zip(&coefficients).map(|(a, b)| a * b).sum();
            (yi - fit) * (yi - fit)
        })
        .sum();
    let df = (n - cols) as f64;
    let sigma2 = rss / df;
    let xtx_inv = invert(&xtx, &names)?;
    let mut std_errors = Vec::with_capacity(cols);
    let mut p_values = Vec::with_capacity(cols);
    for i in 0..cols {
        let se = (sigma2 * xtx_inv[i][i]).max(0.0).sqrt();
        std_errors.push(se);
        let p_value = if se == 0.0 {
            if coefficients[i] == 0.0 {
                1.0
            } else {
                0.0
            }
        } else {
            t_two_sided_p(coefficients[i] / se, df)?
        };
        p_values.push(p_value);
    }
    Ok(RegressionResult {
        names,
        coefficients,
        std_errors,
        p_values,
        n,
        predictors: p,
    })
}

/// One merge step of the agglomerative clustering: the two children are
/// either leaves (case indices) or earlier merges.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ClusterNode {
    Leaf(usize),
    Merge(usize),
}

#[derive(Debug, Clone)]
pub struct ClusterMerge {
    pub left: ClusterNode,
    pub right: ClusterNode,
    pub height: f64,
    pub size: usize,
}

/// Stepwise dendrogram over cases.
#[derive(Debug, Clone)]
pub struct ClusterTree {
    pub case_ids: Vec<String>,
    pub merges: Vec<ClusterMerge>,
    /// Left-to-right leaf order for rendering.
    pub leaf_order: Vec<usize>,
}

impl ClusterTree {
    /// Newick text with branch lengths derived from merge heights.
    pub fn to_newick(&self) -> String {
        if self.merges.is_empty() {
            return format!("{};", self.case_ids.first().map(String::as_str).unwrap_or(""));
        }
        let root = self.merges.len() - 1;
        let mut text = String::new();
        self.write_newick(ClusterNode::Merge(root), self.merges[root].height, &mut text);
        text.push(';');
        text
    }

    fn node_height(&self, node: ClusterNode) -> f64 {
        match node {
            ClusterNode::Leaf(_) => 0.0,
            ClusterNode::Merge(m) => self.merges[m].height,
        }
    }

    fn write_newick(&self, node: ClusterNode, parent_height: f64, out: &mut String) {
        match node {
            ClusterNode::Leaf(i) => {
                out.push_str(&self.case_ids[i]);
                out.push_str(&format!(":{:.6}", parent_height));
            }
            ClusterNode::Merge(m) => {
                let merge = &self.merges[m];
                out.push('(');
                self.write_newick(merge.left, merge.height - self.node_height(merge.left), out);
                out.push(',');
                self.write_newick(merge.right, merge.height - self.node_height(merge.right), out);
                out.push(')');
                out.push_str(&format!(":{:.6}", parent_height - merge.height));
            }
        }
    }
}

/// Agglomerative clustering of cases with Euclidean distance and average
/// linkage. Ties on merge distance break on the smallest involved
/// case_id pair, so the tree is independent of input order.
pub fn cluster_cases(case_ids: &[String], features: &[Vec<f64>]) -> Result<ClusterTree> {
    let n = case_ids.len();
    if n == 0 {
        return Err(Error::Data("no cases to cluster".to_string()));
    }
    if features.len() != n {
        return Err(Error::Data(format!(
            "{} feature rows for {n} cases",
            features.len()
        )));
    }
    let width = features[0].len();
    if features.iter().any(|f| f.len() != width) {
        return Err(Error::Data("ragged feature matrix".to_string()));
    }

    // sort leaves by case_id so the documented tie-break is input-order
    // independent
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| case_ids[a].cmp(&case_ids[b]));
    let sorted_ids: Vec<String> = order.iter().map(|&i| case_ids[i].clone()).collect();
    let sorted_features: Vec<&Vec<f64>> = order.iter().map(|&i| &features[i]).collect();

    struct Active {
        node: ClusterNode,
        size: usize,
        /// smallest case_id in the cluster, for tie-breaking
        key: String,
    }

    let mut dist = vec![vec![0.0f64; n]; n];
    for a in 0..n {
        for b in (a + 1)..n {
            let d: f64 = sorted_features[a]
                .iter()
                .zip(sorted_features[b])
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            dist[a][b] = d;
            dist[b][a] = d;
        }
    }
    let mut active: Vec<Option<Active>> = (0..n)
        .map(|i| {
            Some(Active {
                node: ClusterNode::Leaf(i),
                size: 1,
                key: sorted_ids[i].clone(),
            })
        })
        .collect();
    let mut merges: Vec<ClusterMerge> = Vec::with_capacity(n.saturating_sub(1));

    for _ in 1..n {
        // find minimal pairwise distance; ties -> smallest (key_a, key_b)
        let mut best: Option<(usize, usize)> = None;
        for a in 0..n {
            if active[a].is_none() {
                continue;
            }
            for b in (a + 1)..n {
                if active[b].is_none() {
                    continue;
                }
                let key_pair = |x: usize, y: usize| -> (&str, &str) {
                    let kx = active[x].as_ref().unwrap().key.as_str();
                    let ky = active[y].as_ref().unwrap().key.as_str();
                    if kx <= ky {
                        (kx, ky)
                    } else {
                        (ky, kx)
                    }
                };
                let better = match best {
                    None => true,
                    Some((ba, bb)) => {
                        let d = dist[a][b];
                        let bd = dist[ba][bb];
                        if d != bd {
                            d < bd
                        } else {
                            key_pair(a, b) < key_pair(ba, bb)
                        }
                    }
                };
                if better {
                    best = Some((a, b));
                }
            }
        }
        let (a, b) = best.expect("at least two active clusters");
        let height = dist[a][b];
        let (ca, cb) = (active[a].take().unwrap(), active[b].take().unwrap());
        let merged_size = ca.size + cb.size;
        merges.push(ClusterMerge {
            left: ca.node,
            right: cb.node,
            height,
            size: merged_size,
        });
        // average-linkage update against every other active cluster
        for other in 0..n {
            if other == a || other == b || active[other].is_none() {
                continue;
            }
            let d = (ca.size as f64 * dist[a][other] + cb.size as f64 * dist[b][other])
                / merged_size as f64;
            dist[a][other] = d;
            dist[other][a] = d;
        }
        active[a] = Some(Active {
            node: ClusterNode::Merge(merges.len() - 1),
            size: merged_size,
            key: ca.key.min(cb.key),
        });
    }

    // left-to-right leaf order by in-order traversal of the final tree
    let mut leaf_order = Vec::with_capacity(n);
    if let Some(last) = merges.len().checked_sub(1) {
        collect_leaves(&merges, ClusterNode::Merge(last), &mut leaf_order);
    } else {
        leaf_order.push(0);
    }

    Ok(ClusterTree {
        case_ids: sorted_ids,
        merges,
        leaf_order,
    })
}

fn collect_leaves(merges: &[ClusterMerge], node: ClusterNode, out: &mut Vec<usize>) {
    match node {
        ClusterNode::Leaf(i) => out.push(i),
        ClusterNode::Merge(m) => {
            collect_leaves(merges, merges[m].left, out);
            collect_leaves(merges, merges[m].right, out);
        }
    }
}

/// Per-voxel count of teams whose prediction assigns `class`.
pub fn prediction_heatmap(preds: &[&LabelVolume], class: ClassCode) -> Result<CountVolume> {
    let Some(first) = preds.first() else {
        return Err(Error::Data("heatmap needs at least one prediction".to_string()));
    };
    let geometry = *first.geometry();
    if preds.len() > u16::MAX as usize {
        return Err(Error::Data("too many predictions for a u16 heatmap".to_string()));
    }
    let mut counts = vec![0u16; geometry.voxel_count()];
    for pred in preds {
        if !pred.geometry().compatible(&geometry) {
            return Err(Error::Geometry(
                "heatmap predictions are on different grids".to_string(),
            ));
        }
        for (c, &label) in counts.iter_mut().zip(pred.labels()) {
            if label == class.code() {
                *c += 1;
            }
        }
    }
    Ok(CountVolume { geometry, counts })
}
