//! On-disk formats for pipeline outputs.
//!
//! Every writer is deterministic: fixed column orders, no timestamps,
//! floats printed with Rust's shortest round-trip formatting. Writers
//! return the file name relative to the output directory so stages can
//! record what they produced in the manifest.

use anyhow::{anyhow, bail, Context, Result};
use dml_core::data::FoldAssignment;
use dml_core::nuisance::{NuisanceEstimates, PropensitySummaryRow};
use dml_core::scores::EffectRow;
use dml_core::scores::ScoreSet;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Formats a float the way every artifact does.
pub fn fmt(v: f64) -> String {
    format!("{v}")
}

fn parse_f64(field: &str, what: &str) -> Result<f64> {
    field
        .parse()
        .with_context(|| format!("cannot parse {what} value '{field}'"))
}

fn write_text(dir: &Path, name: &str, text: &str) -> Result<String> {
    std::fs::write(dir.join(name), text)
        .with_context(|| format!("cannot write '{}'", dir.join(name).display()))?;
    Ok(name.to_string())
}

pub fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<String> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(dir, name, &text)
}

fn write_csv(dir: &Path, name: &str, header: &[String], rows: &[Vec<String>]) -> Result<String> {
    let path = dir.join(name);
    let mut writer = csv::Writer::from_path(&path)
        .with_context(|| format!("cannot write '{}'", path.display()))?;
    writer.write_record(header)?;
    for row in rows {
        writer.write_record(row)?;
    }
    writer.flush()?;
    Ok(name.to_string())
}

fn open_csv(path: &Path, run_first: &str) -> Result<csv::Reader<std::fs::File>> {
    if !path.exists() {
        bail!(
            "required file '{}' not found; run `dml {run_first}` first",
            path.display()
        );
    }
    csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .with_context(|| format!("cannot read '{}'", path.display()))
}

/// Maps an arbitrary label or column name to a file-name-safe fragment.
pub fn fragment(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect()
}

pub fn label_fragment(label: i64) -> String {
    if label < 0 {
        format!("m{}", -(label as i128))
    } else {
        label.to_string()
    }
}

pub fn write_effect_table(dir: &Path, name: &str, rows: &[EffectRow]) -> Result<String> {
    let header: Vec<String> = [
        "estimand", "arm", "versus", "point", "se", "t_stat", "p_value", "n",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.estimand.clone(),
                r.arms.first().map(|a| a.to_string()).unwrap_or_default(),
                r.arms.get(1).map(|a| a.to_string()).unwrap_or_default(),
                fmt(r.point),
                fmt(r.se),
                fmt(r.t),
                fmt(r.p),
                r.n.to_string(),
            ]
        })
        .collect();
    write_csv(dir, name, &header, &body)
}

pub fn write_folds(dir: &Path, folds: &FoldAssignment) -> Result<String> {
    write_json(dir, "folds.json", folds)
}

pub fn read_folds(dir: &Path) -> Result<FoldAssignment> {
    let path = dir.join("folds.json");
    if !path.exists() {
        bail!(
            "required file '{}' not found; run `dml fit-nuisance` first",
            path.display()
        );
    }
    let text = std::fs::read_to_string(&path)?;
    serde_json::from_str(&text).with_context(|| format!("cannot parse '{}'", path.display()))
}

pub fn write_nuisance(dir: &Path, nu: &NuisanceEstimates) -> Result<String> {
    let arms = nu.mu_hat.ncols();
    let mut header: Vec<String> = (0..arms).map(|w| format!("mu_{w}")).collect();
    header.extend((0..arms).map(|w| format!("e_{w}")));
    header.push("fold".into());
    header.push("trimmed".into());
    let rows: Vec<Vec<String>> = (0..nu.mu_hat.nrows())
        .map(|i| {
            let mut row: Vec<String> = (0..arms).map(|w| fmt(nu.mu_hat[[i, w]])).collect();
            row.extend((0..arms).map(|w| fmt(nu.e_hat[[i, w]])));
            row.push(nu.fold[i].to_string());
            row.push(if nu.trimmed[i] { "1" } else { "0" }.to_string());
            row
        })
        .collect();
    write_csv(dir, "nuisance.csv", &header, &rows)
}

pub fn read_nuisance(dir: &Path, num_arms: usize) -> Result<NuisanceEstimates> {
    let path = dir.join("nuisance.csv");
    let mut reader = open_csv(&path, "fit-nuisance")?;
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let expected = 2 * num_arms + 2;
    if headers.len() != expected {
        bail!(
            "'{}' has {} columns, expected {expected} for {num_arms} arms",
            path.display(),
            headers.len()
        );
    }
    let mut mu = Vec::new();
    let mut e = Vec::new();
    let mut fold = Vec::new();
    let mut trimmed = Vec::new();
    for record in reader.records() {
        let record = record?;
        for w in 0..num_arms {
            mu.push(parse_f64(&record[w], "mu_hat")?);
        }
        for w in 0..num_arms {
            e.push(parse_f64(&record[num_arms + w], "e_hat")?);
        }
        fold.push(
            record[2 * num_arms]
                .parse::<usize>()
                .context("fold column")?,
        );
        trimmed.push(&record[2 * num_arms + 1] == "1");
    }
    let n = fold.len();
    Ok(NuisanceEstimates {
        mu_hat: Array2::from_shape_vec((n, num_arms), mu).expect("rectangular csv"),
        e_hat: Array2::from_shape_vec((n, num_arms), e).expect("rectangular csv"),
        fold,
        trimmed,
    })
}

pub fn write_propensity_summary(dir: &Path, rows: &[PropensitySummaryRow]) -> Result<String> {
    let header: Vec<String> = [
        "arm", "mean", "sd", "min", "q01", "q25", "q50", "q75", "q99", "max",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.arm.to_string(),
                fmt(r.mean),
                fmt(r.sd),
                fmt(r.min),
                fmt(r.q01),
                fmt(r.q25),
                fmt(r.q50),
                fmt(r.q75),
                fmt(r.q99),
                fmt(r.max),
            ]
        })
        .collect();
    write_csv(dir, "propensity_summary.csv", &header, &body)
}

pub fn write_scores(dir: &Path, scores: &ScoreSet) -> Result<String> {
    let arms = scores.gamma.ncols();
    let header: Vec<String> = (0..arms).map(|w| format!("gamma_{w}")).collect();
    let rows: Vec<Vec<String>> = (0..scores.gamma.nrows())
        .map(|i| (0..arms).map(|w| fmt(scores.gamma[[i, w]])).collect())
        .collect();
    write_csv(dir, "scores.csv", &header, &rows)
}

pub fn read_scores(dir: &Path) -> Result<ScoreSet> {
    let path = dir.join("scores.csv");
    let mut reader = open_csv(&path, "effects")?;
    let arms = reader.headers()?.len();
    if arms == 0 {
        bail!("'{}' has no columns", path.display());
    }
    let mut gamma = Vec::new();
    let mut n = 0;
    for record in reader.records() {
        let record = record?;
        for w in 0..arms {
            gamma.push(parse_f64(&record[w], "score")?);
        }
        n += 1;
    }
    Ok(ScoreSet {
        gamma: Array2::from_shape_vec((n, arms), gamma).expect("rectangular csv"),
    })
}

/// Plot-ready effect curve: one row per grid point.
pub fn write_curve(
    dir: &Path,
    name: &str,
    grid: &[f64],
    tau_hat: &[f64],
    se: &[f64],
) -> Result<String> {
    let header = vec!["z".to_string(), "tau_hat".to_string(), "se".to_string()];
    let rows: Vec<Vec<String>> = grid
        .iter()
        .zip(tau_hat)
        .zip(se)
        .map(|((&g, &t), &s)| vec![fmt(g), fmt(t), fmt(s)])
        .collect();
    write_csv(dir, name, &header, &rows)
}

pub fn write_iate(
    dir: &Path,
    name: &str,
    tau_hat: &[f64],
    fold: Option<&[usize]>,
    fallback: &[bool],
) -> Result<String> {
    let header: Vec<String> = ["row", "tau_hat", "fold", "fallback"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let rows: Vec<Vec<String>> = tau_hat
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            vec![
                i.to_string(),
                fmt(t),
                fold.map(|f| f[i].to_string()).unwrap_or_default(),
                if fallback[i] { "1" } else { "0" }.to_string(),
            ]
        })
        .collect();
    write_csv(dir, name, &header, &rows)
}

pub fn write_classification(
    dir: &Path,
    name: &str,
    rows: &[dml_core::hetero::iate::ClassificationRow],
) -> Result<String> {
    let header: Vec<String> = [
        "covariate",
        "bottom_mean",
        "top_mean",
        "difference",
        "zero_variance",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.covariate.clone(),
                fmt(r.bottom_mean),
                fmt(r.top_mean),
                fmt(r.difference),
                if r.zero_variance { "1" } else { "0" }.to_string(),
            ]
        })
        .collect();
    write_csv(dir, name, &header, &body)
}

pub struct PolicyValueRow {
    pub depth: usize,
    pub value: f64,
    pub se: f64,
    pub n: usize,
    /// One share per arm, ordered by arm code.
    pub shares: Vec<f64>,
}

pub fn write_policy_values(
    dir: &Path,
    rows: &[PolicyValueRow],
    arm_labels: &[i64],
) -> Result<String> {
    let mut header: Vec<String> = ["depth", "value", "se", "n"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(arm_labels.iter().map(|l| format!("share_{l}")));
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut row = vec![
                r.depth.to_string(),
                fmt(r.value),
                fmt(r.se),
                r.n.to_string(),
            ];
            row.extend(r.shares.iter().map(|&s| fmt(s)));
            row
        })
        .collect();
    write_csv(dir, "policy_values.csv", &header, &body)
}

pub struct PolicyCvRow {
    pub depth: usize,
    pub arm_label: i64,
    pub est: dml_core::scores::EffectEstimate,
}

pub fn write_policy_cv(dir: &Path, rows: &[PolicyCvRow]) -> Result<String> {
    let header: Vec<String> = ["depth", "arm", "point", "se", "t_stat", "p_value", "n"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.depth.to_string(),
                r.arm_label.to_string(),
                fmt(r.est.point),
                fmt(r.est.se),
                fmt(r.est.t_stat),
                fmt(r.est.p_value),
                r.est.n.to_string(),
            ]
        })
        .collect();
    write_csv(dir, "policy_cv.csv", &header, &body)
}

pub fn write_policy_agreement(dir: &Path, rows: &[(usize, f64)]) -> Result<String> {
    let header = vec!["depth".to_string(), "agreement".to_string()];
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|&(d, a)| vec![d.to_string(), fmt(a)])
        .collect();
    write_csv(dir, "policy_agreement.csv", &header, &body)
}

/// Dataset-level summary written at the end of the effects stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub n: usize,
    pub num_arms: usize,
    pub arm_labels: Vec<i64>,
    pub arm_counts: Vec<usize>,
    /// Rows flagged by the propensity trim threshold (kept in all
    /// estimators, reported here).
    pub n_trimmed: usize,
    /// Mean doubly robust score per arm; equals the APO estimates.
    pub score_means: Vec<f64>,
}

/// Generating truth for synthetic designs, reduced to what consumers of
/// the run need to benchmark against.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthSummary {
    pub apo: Vec<f64>,
    /// ate[w][v] = apo[w] - apo[v].
    pub ate: Vec<Vec<f64>>,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub files: Vec<String>,
}

/// Run manifest: which stages completed and what they wrote. `complete`
/// is true once every stage the config asks for has run; a failed stage
/// leaves `complete` false and its error message behind.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub complete: bool,
    pub stages: Vec<StageRecord>,
    pub files: Vec<String>,
    pub error: Option<String>,
}

pub const MANIFEST_NAME: &str = "MANIFEST.json";

/// Canonical stage order; manifests list stages this way no matter which
/// subcommand ran them.
pub const STAGE_ORDER: &[&str] = &[
    "data", "folds", "nuisance", "scores", "effects", "gate", "iate", "policy",
];

impl Manifest {
    pub fn load(dir: &Path) -> Result<Manifest> {
        let path = dir.join(MANIFEST_NAME);
        if !path.exists() {
            return Ok(Manifest::default());
        }
        let text = std::fs::read_to_string(&path)?;
        serde_json::from_str(&text).with_context(|| format!("cannot parse '{}'", path.display()))
    }

    /// Records a completed stage, replacing any earlier run of it.
    pub fn record(&mut self, name: &str, files: Vec<String>) {
        self.stages.retain(|s| s.name != name);
        self.stages.push(StageRecord {
            name: name.to_string(),
            files,
        });
        self.stages.sort_by_key(|s| {
            STAGE_ORDER
                .iter()
                .position(|&o| o == s.name)
                .unwrap_or(STAGE_ORDER.len())
        });
        self.files = self
            .stages
            .iter()
            .flat_map(|s| s.files.iter().cloned())
            .collect();
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_json(dir, MANIFEST_NAME, self)?;
        Ok(())
    }
}

/// Resolves a path under the output directory, failing with a pointer to
/// the subcommand that produces it.
pub fn required_path(dir: &Path, name: &str, run_first: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    if !path.exists() {
        return Err(anyhow!(
            "required file '{}' not found; run `dml {run_first}` first",
            path.display()
        ));
    }
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn nuisance_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let nu = NuisanceEstimates {
            mu_hat: array![[0.1, 0.2], [1.0 / 3.0, -4.5e-7]],
            e_hat: array![[0.25, 0.75], [0.6, 0.4]],
            fold: vec![0, 3],
            trimmed: vec![false, true],
        };
        write_nuisance(dir.path(), &nu).unwrap();
        let back = read_nuisance(dir.path(), 2).unwrap();
        assert_eq!(back.mu_hat, nu.mu_hat);
        assert_eq!(back.e_hat, nu.e_hat);
        assert_eq!(back.fold, nu.fold);
        assert_eq!(back.trimmed, nu.trimmed);
    }

    #[test]
    fn scores_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let scores = ScoreSet {
            gamma: array![[1.5, -2.25, 1e-12], [0.0, 7.0, -0.1]],
        };
        write_scores(dir.path(), &scores).unwrap();
        let back = read_scores(dir.path()).unwrap();
        assert_eq!(back.gamma, scores.gamma);
    }

    #[test]
    fn missing_inputs_point_at_the_producing_subcommand() {
        let dir = tempfile::tempdir().unwrap();
        let err = read_scores(dir.path()).unwrap_err().to_string();
        assert!(err.contains("run `dml effects` first"), "{err}");
        let err = read_folds(dir.path()).unwrap_err().to_string();
        assert!(err.contains("run `dml fit-nuisance` first"), "{err}");
    }

    #[test]
    fn manifest_orders_stages_canonically_and_replaces_reruns() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = Manifest::default();
        m.record("policy", vec!["policy_values.csv".into()]);
        m.record("data", vec!["dataset.csv".into(), "schema.json".into()]);
        m.record("policy", vec!["policy_cv.csv".into()]);
        assert_eq!(m.stages[0].name, "data");
        assert_eq!(m.stages[1].name, "policy");
        assert_eq!(m.stages[1].files, vec!["policy_cv.csv"]);
        assert_eq!(m.files, vec!["dataset.csv", "schema.json", "policy_cv.csv"]);
        m.save(dir.path()).unwrap();
        let back = Manifest::load(dir.path()).unwrap();
        assert_eq!(back.files, m.files);
        assert!(!back.complete);
    }

    #[test]
    fn fragments_are_file_name_safe() {
        assert_eq!(fragment("x1"), "x1");
        assert_eq!(fragment("log(wage)/hr"), "log_wage__hr");
        assert_eq!(label_fragment(-3), "m3");
        assert_eq!(label_fragment(2), "2");
    }
}
