//! Flat key = value run configuration.
//!
//! A config file is plain text: one `key = value` pair per line, `#`
//! starts a comment line, blank lines are skipped. Later pairs override
//! earlier ones, which is also how command-line `--set key=value`
//! overrides are applied.

use anyhow::{anyhow, bail, Context, Result};
use dml_core::data::ColumnSchema;
use dml_core::hetero::iate::Learner;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq)]
pub enum InputSource {
    Csv(PathBuf),
    Synthetic {
        design: String,
        n: usize,
        effect: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateMethod {
    Ols,
    Kernel,
    Series,
}

impl GateMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            GateMethod::Ols => "ols",
            GateMethod::Kernel => "kernel",
            GateMethod::Series => "series",
        }
    }

    fn parse(token: &str) -> Result<GateMethod> {
        match token {
            "ols" => Ok(GateMethod::Ols),
            "kernel" => Ok(GateMethod::Kernel),
            "series" => Ok(GateMethod::Series),
            other => bail!("unknown gate method '{other}' (expected ols, kernel or series)"),
        }
    }
}

/// One group-effect request: a method plus the moderator columns it runs
/// on. An empty column list means every heterogeneity column.
#[derive(Debug, Clone, PartialEq)]
pub struct GateSpec {
    pub method: GateMethod,
    pub columns: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub input: InputSource,
    /// Column roles; only meaningful for CSV input.
    pub schema: Option<ColumnSchema>,
    pub folds: usize,
    pub trees: usize,
    pub min_leaf: usize,
    pub propensity_min_leaf: usize,
    pub tune: bool,
    /// Contrast pairs by treatment label; None compares every arm to the
    /// lowest label.
    pub contrasts: Option<Vec<(i64, i64)>>,
    pub gates: Vec<GateSpec>,
    pub iate_learners: Vec<Learner>,
    pub iate_trees: usize,
    pub policy_depths: Vec<usize>,
    /// Heterogeneity columns the policy trees may split on; None = all.
    pub policy_features: Option<Vec<String>>,
    pub trim: Option<f64>,
    /// Evaluation points for kernel and series effect curves.
    pub curve_points: usize,
    pub seed: u64,
    pub out: PathBuf,
}

const KNOWN_KEYS: &[&str] = &[
    "input",
    "synthetic",
    "synthetic_n",
    "synthetic_effect",
    "outcome",
    "treatment",
    "confounders",
    "heterogeneity",
    "folds",
    "trees",
    "min_leaf",
    "propensity_min_leaf",
    "tune",
    "contrasts",
    "gate",
    "iate",
    "iate_trees",
    "policy_depths",
    "policy_features",
    "trim",
    "curve_points",
    "seed",
    "out",
];

/// Splits config text into ordered key/value pairs.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("line {}: expected 'key = value', got '{line}'", lineno + 1))?;
        pairs.push((key.trim().to_string(), value.trim().to_string()));
    }
    Ok(pairs)
}

fn split_list(value: &str) -> Vec<String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

fn parse_gates(value: &str) -> Result<Vec<GateSpec>> {
    let mut specs = Vec::new();
    for entry in value.split(';').map(str::trim).filter(|s| !s.is_empty()) {
        let (method, columns) = match entry.split_once(':') {
            Some((m, cols)) => (GateMethod::parse(m.trim())?, split_list(cols)),
            None => (GateMethod::parse(entry)?, Vec::new()),
        };
        specs.push(GateSpec { method, columns });
    }
    Ok(specs)
}

fn parse_learners(value: &str) -> Result<Vec<Learner>> {
    split_list(value)
        .iter()
        .map(|token| match token.as_str() {
            "dr" | "dr_crossfit" => Ok(Learner::DrCrossfit),
            "ndr" | "ndr_crossfit" => Ok(Learner::NdrCrossfit),
            "dr_full" => Ok(Learner::DrFull),
            "ndr_full" => Ok(Learner::NdrFull),
            other => bail!("unknown iate learner '{other}' (expected dr, ndr, dr_full, ndr_full)"),
        })
        .collect()
}

fn parse_contrasts(value: &str) -> Result<Vec<(i64, i64)>> {
    split_list(value)
        .iter()
        .map(|token| {
            let (w, v) = token
                .split_once(':')
                .ok_or_else(|| anyhow!("contrast '{token}' must look like 'treated:control'"))?;
            let w: i64 = w.trim().parse().context("contrast arm label")?;
            let v: i64 = v.trim().parse().context("contrast arm label")?;
            if w == v {
                bail!("contrast '{token}' compares an arm to itself");
            }
            Ok((w, v))
        })
        .collect()
}

/// Builds a validated config from ordered pairs; later pairs win.
pub fn build_config(pairs: &[(String, String)]) -> Result<RunConfig> {
    for (key, _) in pairs {
        if !KNOWN_KEYS.contains(&key.as_str()) {
            bail!("unknown config key '{key}'");
        }
    }
    let get = |key: &str| -> Option<&str> {
        pairs
            .iter()
            .rev()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    };
    let parse_num = |key: &str, default: u64| -> Result<u64> {
        match get(key) {
            Some(v) => v
                .parse()
                .with_context(|| format!("config key '{key}' = '{v}'")),
            None => Ok(default),
        }
    };

    let input = match (get("input"), get("synthetic")) {
        (Some(path), None) => InputSource::Csv(PathBuf::from(path)),
        (None, Some(design)) => {
            let design = design.to_string();
            if !matches!(
                design.as_str(),
                "three_arm" | "thin_overlap" | "constant_effect" | "policy_region"
            ) {
                bail!(
                    "unknown synthetic design '{design}' (expected three_arm, thin_overlap, \
                     constant_effect or policy_region)"
                );
            }
            let n = parse_num("synthetic_n", 2_000)? as usize;
            let effect = match get("synthetic_effect") {
                Some(v) => v.parse().context("config key 'synthetic_effect'")?,
                None => 0.0,
            };
            InputSource::Synthetic { design, n, effect }
        }
        (Some(_), Some(_)) => bail!("config sets both 'input' and 'synthetic'; pick one"),
        (None, None) => bail!("config must set either 'input' (CSV path) or 'synthetic' (design)"),
    };

    let schema = if matches!(input, InputSource::Csv(_)) {
        let outcome = get("outcome")
            .ok_or_else(|| anyhow!("CSV input needs an 'outcome' column"))?
            .to_string();
        let treatment = get("treatment")
            .ok_or_else(|| anyhow!("CSV input needs a 'treatment' column"))?
            .to_string();
        let confounders = split_list(
            get("confounders").ok_or_else(|| anyhow!("CSV input needs 'confounders' columns"))?,
        );
        if confounders.is_empty() {
            bail!("'confounders' lists no columns");
        }
        let heterogeneity = get("heterogeneity").map(split_list).unwrap_or_default();
        Some(ColumnSchema {
            outcome,
            treatment,
            confounders,
            heterogeneity,
        })
    } else {
        for key in ["outcome", "treatment", "confounders", "heterogeneity"] {
            if get(key).is_some() {
                bail!("'{key}' only applies to CSV input, not synthetic designs");
            }
        }
        None
    };

    let folds = parse_num("folds", 5)? as usize;
    if folds < 2 {
        bail!("folds must be at least 2, got {folds}");
    }
    let trees = parse_num("trees", 500)? as usize;
    if trees == 0 {
        bail!("trees must be positive");
    }
    let min_leaf = parse_num("min_leaf", 5)? as usize;
    let propensity_min_leaf = parse_num("propensity_min_leaf", 10)? as usize;
    if min_leaf == 0 || propensity_min_leaf == 0 {
        bail!("leaf sizes must be positive");
    }
    let tune = match get("tune") {
        Some("true") => true,
        Some("false") | None => false,
        Some(other) => bail!("'tune' must be true or false, got '{other}'"),
    };
    let contrasts = get("contrasts").map(parse_contrasts).transpose()?;
    if let Some(pairs) = &contrasts {
        if pairs.is_empty() {
            bail!("'contrasts' lists no pairs; omit the key for the default");
        }
    }
    let gates = match get("gate") {
        Some(v) => parse_gates(v)?,
        None => vec![GateSpec {
            method: GateMethod::Ols,
            columns: Vec::new(),
        }],
    };
    let iate_learners = match get("iate") {
        Some(v) => parse_learners(v)?,
        None => vec![Learner::DrCrossfit, Learner::NdrCrossfit],
    };
    let iate_trees = parse_num("iate_trees", trees as u64)? as usize;
    if iate_trees == 0 {
        bail!("iate_trees must be positive");
    }
    let policy_depths = match get("policy_depths") {
        Some(v) => {
            let mut depths: Vec<usize> = split_list(v)
                .iter()
                .map(|d| d.parse().with_context(|| format!("policy depth '{d}'")))
                .collect::<Result<_>>()?;
            depths.sort_unstable();
            depths.dedup();
            if depths.iter().any(|&d| !(1..=3).contains(&d)) {
                bail!("policy depths must lie in 1..=3");
            }
            depths
        }
        None => vec![1, 2, 3],
    };
    let policy_features = get("policy_features").map(|v| split_list(v));
    if let Some(cols) = &policy_features {
        if cols.is_empty() {
            bail!("'policy_features' lists no columns; omit the key for all");
        }
    }
    let trim = get("trim")
        .map(|v| -> Result<f64> {
            let t: f64 = v.parse().context("config key 'trim'")?;
            if !(t > 0.0 && t < 0.5) {
                bail!("trim threshold must lie in (0, 0.5), got {t}");
            }
            Ok(t)
        })
        .transpose()?;
    let curve_points = parse_num("curve_points", 25)? as usize;
    if curve_points < 2 {
        bail!("curve_points must be at least 2");
    }
    let seed = parse_num("seed", 42)?;
    let out = PathBuf::from(get("out").unwrap_or("dml_out"));

    Ok(RunConfig {
        input,
        schema,
        folds,
        trees,
        min_leaf,
        propensity_min_leaf,
        tune,
        contrasts,
        gates,
        iate_learners,
        iate_trees,
        policy_depths,
        policy_features,
        trim,
        curve_points,
        seed,
        out,
    })
}

/// Reads a config file and applies overrides in order (later wins).
pub fn load_config(path: &Path, overrides: &[(String, String)]) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read config file '{}'", path.display()))?;
    let mut pairs = parse_pairs(&text)?;
    pairs.extend_from_slice(overrides);
    build_config(&pairs)
}

/// Parses a repeated `--set key=value` override.
pub fn parse_override(raw: &str) -> Result<(String, String)> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| anyhow!("--set expects key=value, got '{raw}'"))?;
    Ok((key.trim().to_string(), value.trim().to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(text: &str) -> Result<RunConfig> {
        build_config(&parse_pairs(text).unwrap())
    }

    #[test]
    fn defaults_fill_in_around_a_minimal_synthetic_config() {
        let c = cfg("synthetic = three_arm\nout = results").unwrap();
        assert_eq!(
            c.input,
            InputSource::Synthetic {
                design: "three_arm".into(),
                n: 2_000,
                effect: 0.0
            }
        );
        assert_eq!(c.folds, 5);
        assert_eq!(c.trees, 500);
        assert_eq!(c.policy_depths, vec![1, 2, 3]);
        assert_eq!(
            c.iate_learners,
            vec![Learner::DrCrossfit, Learner::NdrCrossfit]
        );
        assert_eq!(c.gates.len(), 1);
        assert!(c.contrasts.is_none());
        assert_eq!(c.seed, 42);
        assert_eq!(c.out, PathBuf::from("results"));
    }

    #[test]
    fn comments_blanks_and_overrides_are_handled() {
        let text = "# demo\n\nsynthetic = three_arm\nseed = 1\n seed = 9 \n";
        let pairs = parse_pairs(text).unwrap();
        assert_eq!(pairs.len(), 3);
        let c = build_config(&pairs).unwrap();
        assert_eq!(c.seed, 9, "later pairs win");
    }

    #[test]
    fn csv_input_requires_column_roles() {
        assert!(cfg("input = data.csv").is_err());
        let c = cfg(
            "input = data.csv\noutcome = y\ntreatment = w\nconfounders = a, b\nheterogeneity = a",
        )
        .unwrap();
        let schema = c.schema.unwrap();
        assert_eq!(schema.confounders, vec!["a", "b"]);
        assert_eq!(schema.heterogeneity, vec!["a"]);
    }

    #[test]
    fn gate_iate_and_policy_lists_parse_and_can_be_emptied() {
        let c = cfg(
            "synthetic = three_arm\ngate = ols:x1,x2; kernel:x1\niate = dr, ndr_full\n\
             policy_depths = 2,1,2",
        )
        .unwrap();
        assert_eq!(c.gates.len(), 2);
        assert_eq!(c.gates[0].method, GateMethod::Ols);
        assert_eq!(c.gates[0].columns, vec!["x1", "x2"]);
        assert_eq!(c.gates[1].method, GateMethod::Kernel);
        assert_eq!(c.iate_learners, vec![Learner::DrCrossfit, Learner::NdrFull]);
        assert_eq!(c.policy_depths, vec![1, 2]);

        let empty = cfg("synthetic = three_arm\ngate =\niate =\npolicy_depths =").unwrap();
        assert!(empty.gates.is_empty());
        assert!(empty.iate_learners.is_empty());
        assert!(empty.policy_depths.is_empty());
    }

    #[test]
    fn bad_keys_and_values_are_rejected() {
        assert!(cfg("synthetic = three_arm\nbanana = 1").is_err());
        assert!(cfg("synthetic = seven_arm").is_err());
        assert!(cfg("synthetic = three_arm\npolicy_depths = 4").is_err());
        assert!(cfg("synthetic = three_arm\ncontrasts = 1:1").is_err());
        assert!(cfg("synthetic = three_arm\ntrim = 0.7").is_err());
        assert!(cfg("synthetic = three_arm\ngate = loess:x1").is_err());
        assert!(cfg("synthetic = three_arm\ninput = also.csv").is_err());
        assert!(cfg("synthetic = three_arm\noutcome = y").is_err());
        assert!(parse_pairs("just words").is_err());
    }

    #[test]
    fn contrasts_parse_as_label_pairs() {
        let c = cfg("synthetic = three_arm\ncontrasts = 1:0, 2:0, 2:1").unwrap();
        assert_eq!(c.contrasts, Some(vec![(1, 0), (2, 0), (2, 1)]));
    }
}
