//! Stage orchestration shared by `dml run` and the per-stage subcommands.
//!
//! Every stage reads plain inputs, writes its artifacts into the output
//! directory, and records the file names in the manifest. Subcommands
//! rebuild their inputs from the artifacts of earlier stages, so a chain
//! of subcommands produces byte-identical output to one `dml run`.

use crate::artifacts::{
    self, fragment, label_fragment, required_path, Manifest, PolicyCvRow, PolicyValueRow,
    RunSummary, TruthSummary,
};
use crate::config::{GateMethod, InputSource, RunConfig};
use anyhow::{anyhow, bail, Context, Result};
use dml_core::data::{
    assign_folds, load_csv, save_csv, schema_of, select_columns, ColumnSchema, Dataset,
    FoldAssignment,
};
use dml_core::diagnostics::{run_battery, DiagnosticsBattery};
use dml_core::forest::ForestParams;
use dml_core::hetero::gate::{default_grid, gate_kernel, gate_ols, gate_series};
use dml_core::hetero::iate::{
    classification_analysis, dr_learner_crossfit, dr_learner_full, ndr_learner_crossfit,
    ndr_learner_full, IateParams, IateResult, Learner,
};
use dml_core::nuisance::{crossfit, propensity_summary, NuisanceEstimates, NuisanceParams};
use dml_core::policy::{cross_validate_policy, evaluate_policy, search_exact};
use dml_core::scores::{apo_scores, ate_scores, atet_scores, mean_effect, EffectRow, ScoreSet};
use dml_core::stats::mix_seed;
use dml_core::synth::{generate_synthetic, SyntheticSpec};
use ndarray::Array2;
use std::path::Path;

pub fn design_spec(design: &str, n: usize, effect: f64) -> Result<SyntheticSpec> {
    Ok(match design {
        "three_arm" => SyntheticSpec::default_three_arm(n),
        "thin_overlap" => SyntheticSpec::binary_thin_overlap(n),
        "constant_effect" => SyntheticSpec::binary_constant_effect(n, effect),
        "policy_region" => SyntheticSpec::known_policy_region(n),
        other => bail!(
            "unknown synthetic design '{other}' (expected three_arm, thin_overlap, \
             constant_effect or policy_region)"
        ),
    })
}

/// Stage names a config implies, in canonical order.
pub fn expected_stages(cfg: &RunConfig) -> Vec<&'static str> {
    let mut stages = vec!["data", "folds", "nuisance", "scores", "effects"];
    if !cfg.gates.is_empty() {
        stages.push("gate");
    }
    if !cfg.iate_learners.is_empty() {
        stages.push("iate");
    }
    if !cfg.policy_depths.is_empty() {
        stages.push("policy");
    }
    stages
}

/// Runs stages one at a time and keeps the manifest current. A stage
/// failure is written into the manifest before the error propagates.
pub struct StageRunner {
    out: std::path::PathBuf,
    manifest: Manifest,
    expected: Vec<&'static str>,
}

impl StageRunner {
    /// `fresh` discards any manifest left by earlier commands; the
    /// subcommands accumulate into the existing one instead.
    pub fn new(cfg: &RunConfig, fresh: bool) -> Result<StageRunner> {
        std::fs::create_dir_all(&cfg.out)
            .with_context(|| format!("cannot create output directory '{}'", cfg.out.display()))?;
        let manifest = if fresh {
            Manifest::default()
        } else {
            Manifest::load(&cfg.out)?
        };
        Ok(StageRunner {
            out: cfg.out.clone(),
            manifest,
            expected: expected_stages(cfg),
        })
    }

    pub fn stage<T>(
        &mut self,
        name: &'static str,
        f: impl FnOnce(&mut Vec<String>) -> Result<T>,
    ) -> Result<T> {
        let mut files = Vec::new();
        match f(&mut files) {
            Ok(value) => {
                self.manifest.record(name, files);
                Ok(value)
            }
            Err(err) => {
                self.manifest.error = Some(format!("{name}: {err:#}"));
                self.manifest.complete = false;
                let _ = self.manifest.save(&self.out);
                Err(err)
            }
        }
    }

    pub fn finish(mut self) -> Result<Manifest> {
        self.manifest.error = None;
        self.manifest.complete = self
            .expected
            .iter()
            .all(|name| self.manifest.stages.iter().any(|s| &s.name == name));
        self.manifest.save(&self.out)?;
        Ok(self.manifest)
    }
}

/// Treatment labels of each configured contrast resolved to arm codes.
/// Without explicit contrasts every arm is compared to the lowest label.
pub fn resolve_contrasts(cfg: &RunConfig, ds: &Dataset) -> Result<Vec<(usize, usize)>> {
    let code_of = |label: i64| {
        ds.arm_labels
            .iter()
            .position(|&l| l == label)
            .ok_or_else(|| {
                anyhow!(
                    "treatment label {label} not present in the data (labels: {:?})",
                    ds.arm_labels
                )
            })
    };
    match &cfg.contrasts {
        Some(pairs) => pairs
            .iter()
            .map(|&(w, v)| Ok((code_of(w)?, code_of(v)?)))
            .collect(),
        None => Ok((1..ds.num_arms).map(|w| (w, 0)).collect()),
    }
}

fn resolve_columns(requested: &[String], available: &[String], what: &str) -> Result<Vec<usize>> {
    if requested.is_empty() {
        return Ok((0..available.len()).collect());
    }
    requested
        .iter()
        .map(|name| {
            available.iter().position(|a| a == name).ok_or_else(|| {
                anyhow!("{what} column '{name}' is not a heterogeneity column (available: {available:?})")
            })
        })
        .collect()
}

fn outcome_params(cfg: &RunConfig, trees: usize) -> ForestParams {
    ForestParams::default()
        .with_num_trees(trees)
        .with_min_leaf(cfg.min_leaf)
}

fn propensity_params(cfg: &RunConfig, trees: usize) -> ForestParams {
    ForestParams::propensity_default()
        .with_num_trees(trees)
        .with_min_leaf(cfg.propensity_min_leaf)
}

pub fn stage_data(cfg: &RunConfig, files: &mut Vec<String>) -> Result<Dataset> {
    let ds = match &cfg.input {
        InputSource::Csv(path) => {
            let schema = cfg.schema.as_ref().expect("validated with csv input");
            let ds =
                load_csv(path, schema).with_context(|| format!("loading '{}'", path.display()))?;
            files.push(artifacts::write_json(
                &cfg.out,
                "schema.json",
                &schema_of(&ds),
            )?);
            ds
        }
        InputSource::Synthetic { design, n, effect } => {
            let spec = design_spec(design, *n, *effect)?;
            let (ds, truth) = generate_synthetic(&spec, cfg.seed)?;
            save_csv(&ds, cfg.out.join("dataset.csv"))?;
            files.push("dataset.csv".to_string());
            files.push(artifacts::write_json(
                &cfg.out,
                "schema.json",
                &schema_of(&ds),
            )?);
            let reduced = TruthSummary {
                apo: truth.apo.clone(),
                ate: truth.ate.clone(),
                seed: truth.seed,
            };
            files.push(artifacts::write_json(
                &cfg.out,
                "ground_truth.json",
                &reduced,
            )?);
            ds
        }
    };
    println!(
        "[data] {} rows, {} arms (labels {:?})",
        ds.n(),
        ds.num_arms,
        ds.arm_labels
    );
    Ok(ds)
}

/// Reopens the dataset a previous command materialized.
pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    match &cfg.input {
        InputSource::Csv(path) => {
            let schema = cfg.schema.as_ref().expect("validated with csv input");
            Ok(load_csv(path, schema).with_context(|| format!("loading '{}'", path.display()))?)
        }
        InputSource::Synthetic { .. } => {
            let schema_path = required_path(&cfg.out, "schema.json", "fit-nuisance")?;
            let data_path = required_path(&cfg.out, "dataset.csv", "fit-nuisance")?;
            let schema: ColumnSchema =
                serde_json::from_str(&std::fs::read_to_string(&schema_path)?)
                    .with_context(|| format!("cannot parse '{}'", schema_path.display()))?;
            Ok(load_csv(&data_path, &schema)?)
        }
    }
}

pub fn stage_folds(
    cfg: &RunConfig,
    ds: &Dataset,
    files: &mut Vec<String>,
) -> Result<FoldAssignment> {
    let folds = assign_folds(ds, cfg.folds, cfg.seed)?;
    files.push(artifacts::write_folds(&cfg.out, &folds)?);
    println!("[folds] {} folds, stratified by arm", folds.num_folds);
    Ok(folds)
}

pub fn stage_nuisance(
    cfg: &RunConfig,
    ds: &Dataset,
    folds: &FoldAssignment,
    files: &mut Vec<String>,
) -> Result<NuisanceEstimates> {
    let params = NuisanceParams {
        outcome: outcome_params(cfg, cfg.trees).with_seed(mix_seed(cfg.seed, &[10])),
        propensity: propensity_params(cfg, cfg.trees).with_seed(mix_seed(cfg.seed, &[11])),
        tune: cfg.tune,
    };
    let nu = crossfit(ds, folds, &params, cfg.trim)?;
    files.push(artifacts::write_nuisance(&cfg.out, &nu)?);
    files.push(artifacts::write_propensity_summary(
        &cfg.out,
        &propensity_summary(&nu.e_hat.view()),
    )?);
    let n_trimmed = nu.trimmed.iter().filter(|&&t| t).count();
    println!(
        "[nuisance] {} trees per forest{}, {} rows flagged by trim",
        cfg.trees,
        if cfg.tune { " (tuned)" } else { "" },
        n_trimmed
    );
    Ok(nu)
}

pub fn stage_scores(
    cfg: &RunConfig,
    ds: &Dataset,
    nu: &NuisanceEstimates,
    files: &mut Vec<String>,
) -> Result<ScoreSet> {
    let scores = apo_scores(ds, nu)?;
    files.push(artifacts::write_scores(&cfg.out, &scores)?);
    println!(
        "[scores] doubly robust score matrix {}x{}",
        scores.gamma.nrows(),
        scores.gamma.ncols()
    );
    Ok(scores)
}

pub fn stage_effects(
    cfg: &RunConfig,
    ds: &Dataset,
    nu: &NuisanceEstimates,
    scores: &ScoreSet,
    files: &mut Vec<String>,
) -> Result<()> {
    let contrasts = resolve_contrasts(cfg, ds)?;

    let mut apo_rows = Vec::new();
    for arm in 0..ds.num_arms {
        let est = mean_effect(&scores.gamma.column(arm).to_vec())?;
        apo_rows.push(EffectRow::new("apo", vec![ds.arm_labels[arm]], &est));
    }
    files.push(artifacts::write_effect_table(
        &cfg.out, "apo.csv", &apo_rows,
    )?);

    let mut ate_rows = Vec::new();
    let mut atet_rows = Vec::new();
    for &(w, v) in &contrasts {
        let labels = vec![ds.arm_labels[w], ds.arm_labels[v]];
        let delta = ate_scores(scores, w, v)?;
        let est = mean_effect(&delta.delta.to_vec())?;
        println!(
            "[effects] ate {} vs {}: {:.4} (se {:.4}, p {:.3})",
            labels[0], labels[1], est.point, est.se, est.p_value
        );
        ate_rows.push(EffectRow::new("ate", labels.clone(), &est));
        let theta = atet_scores(ds, nu, w, v)?;
        let est = mean_effect(&theta.theta.to_vec())?;
        atet_rows.push(EffectRow::new("atet", labels, &est));
    }
    files.push(artifacts::write_effect_table(
        &cfg.out, "ate.csv", &ate_rows,
    )?);
    files.push(artifacts::write_effect_table(
        &cfg.out, "atet.csv", &atet_rows,
    )?);

    let summary = RunSummary {
        n: ds.n(),
        num_arms: ds.num_arms,
        arm_labels: ds.arm_labels.clone(),
        arm_counts: ds.arm_counts.clone(),
        n_trimmed: nu.trimmed.iter().filter(|&&t| t).count(),
        score_means: apo_rows.iter().map(|r| r.point).collect(),
    };
    files.push(artifacts::write_json(
        &cfg.out,
        "diagnostics_summary.json",
        &summary,
    )?);
    Ok(())
}

pub fn stage_gate(
    cfg: &RunConfig,
    ds: &Dataset,
    scores: &ScoreSet,
    files: &mut Vec<String>,
) -> Result<()> {
    let contrasts = resolve_contrasts(cfg, ds)?;
    for (si, spec) in cfg.gates.iter().enumerate() {
        let cols = resolve_columns(&spec.columns, &ds.z_names, "gate")?;
        if cols.is_empty() {
            bail!("gate {si} has no heterogeneity columns to work with");
        }
        for &(w, v) in &contrasts {
            let delta = ate_scores(scores, w, v)?;
            let pair = format!(
                "{}_vs_{}",
                label_fragment(ds.arm_labels[w]),
                label_fragment(ds.arm_labels[v])
            );
            match spec.method {
                GateMethod::Ols => {
                    let z_sub = select_columns(&ds.z.view(), &cols);
                    let names: Vec<String> = cols.iter().map(|&c| ds.z_names[c].clone()).collect();
                    let table = gate_ols(&delta, z_sub.view(), &names)?;
                    let name = format!("gate{si}_ols_{pair}.json");
                    files.push(artifacts::write_json(&cfg.out, &name, &table)?);
                }
                GateMethod::Kernel | GateMethod::Series => {
                    for &c in &cols {
                        let zc = ds.z.column(c).to_vec();
                        let grid = default_grid(&zc, cfg.curve_points)?;
                        let curve = match spec.method {
                            GateMethod::Kernel => gate_kernel(&delta, &zc, &grid)?,
                            _ => gate_series(&delta, &zc, &grid)?,
                        };
                        let name = format!(
                            "gate{si}_{}_{pair}_{}.csv",
                            spec.method.as_str(),
                            fragment(&ds.z_names[c])
                        );
                        files.push(artifacts::write_curve(
                            &cfg.out,
                            &name,
                            &curve.grid,
                            &curve.tau_hat,
                            &curve.se,
                        )?);
                    }
                }
            }
        }
    }
    println!("[gate] {} group-effect requests written", cfg.gates.len());
    Ok(())
}

fn iate_params(cfg: &RunConfig) -> IateParams {
    IateParams {
        outcome: outcome_params(cfg, cfg.iate_trees),
        propensity: propensity_params(cfg, cfg.iate_trees),
        final_stage: outcome_params(cfg, cfg.iate_trees).with_seed(mix_seed(cfg.seed, &[31])),
        seed: mix_seed(cfg.seed, &[30]),
    }
}

/// True when the configured learners need the stage-3 nuisance estimates
/// (the crossfit variants refit their own on internal folds).
pub fn iate_needs_nuisance(cfg: &RunConfig) -> bool {
    cfg.iate_learners
        .iter()
        .any(|l| matches!(l, Learner::DrFull | Learner::NdrFull))
}

pub fn stage_iate(
    cfg: &RunConfig,
    ds: &Dataset,
    nu: Option<&NuisanceEstimates>,
    files: &mut Vec<String>,
) -> Result<()> {
    let contrasts = resolve_contrasts(cfg, ds)?;
    let params = iate_params(cfg);
    let full_nu = |learner: Learner| {
        nu.ok_or_else(|| anyhow!("learner {} needs nuisance estimates", learner.as_str()))
    };
    for &(w, v) in &contrasts {
        let pair = format!(
            "{}_vs_{}",
            label_fragment(ds.arm_labels[w]),
            label_fragment(ds.arm_labels[v])
        );
        let mut first_tau: Option<Vec<f64>> = None;
        for &learner in &cfg.iate_learners {
            let result: IateResult = match learner {
                Learner::DrCrossfit => dr_learner_crossfit(ds, w, v, &params)?,
                Learner::NdrCrossfit => ndr_learner_crossfit(ds, w, v, &params)?,
                Learner::DrFull => {
                    dr_learner_full(ds, full_nu(learner)?, w, v, &params.final_stage)?
                }
                Learner::NdrFull => {
                    ndr_learner_full(ds, full_nu(learner)?, w, v, &params.final_stage)?
                }
            };
            let name = format!("iate_{}_{pair}.csv", learner.as_str());
            files.push(artifacts::write_iate(
                &cfg.out,
                &name,
                &result.tau_hat,
                result.fold.as_deref(),
                &result.fallback,
            )?);
            if first_tau.is_none() {
                first_tau = Some(result.tau_hat);
            }
        }
        if let Some(tau) = first_tau {
            let rows = classification_analysis(&tau, ds.x.view(), &ds.x_names)?;
            let name = format!("classification_{pair}.csv");
            files.push(artifacts::write_classification(&cfg.out, &name, &rows)?);
        }
    }
    println!(
        "[iate] {} learner(s) x {} contrast(s)",
        cfg.iate_learners.len(),
        contrasts.len()
    );
    Ok(())
}

pub fn stage_policy(
    cfg: &RunConfig,
    ds: &Dataset,
    scores: &ScoreSet,
    folds: &FoldAssignment,
    files: &mut Vec<String>,
) -> Result<()> {
    let cols = match &cfg.policy_features {
        Some(names) => resolve_columns(names, &ds.z_names, "policy")?,
        None => (0..ds.z_names.len()).collect(),
    };
    let z: Array2<f64> = select_columns(&ds.z.view(), &cols);
    let names: Vec<String> = cols.iter().map(|&c| ds.z_names[c].clone()).collect();

    let mut value_rows = Vec::new();
    let mut cv_rows = Vec::new();
    let mut agreement_rows = Vec::new();
    for &depth in &cfg.policy_depths {
        let tree = search_exact(scores, z.view(), depth)?;
        files.push(artifacts::write_json(
            &cfg.out,
            &format!("policy_tree_depth{depth}.json"),
            &tree,
        )?);
        let txt_name = format!("policy_tree_depth{depth}.txt");
        std::fs::write(cfg.out.join(&txt_name), tree.to_text(&names))?;
        files.push(txt_name);

        let value = evaluate_policy(scores, z.view(), &tree)?;
        println!(
            "[policy] depth {depth}: value {:.4} (se {:.4})",
            value.value, value.se
        );
        value_rows.push(PolicyValueRow {
            depth,
            value: value.value,
            se: value.se,
            n: value.n,
            shares: value.shares,
        });

        let cv = cross_validate_policy(ds, scores, z.view(), depth, folds)?;
        for (arm, est) in cv.per_arm.iter().enumerate() {
            cv_rows.push(PolicyCvRow {
                depth,
                arm_label: ds.arm_labels[arm],
                est: est.clone(),
            });
        }
        let full_assign = tree.assign_all(z.view())?;
        let agree = cv
            .assignments
            .iter()
            .zip(&full_assign)
            .filter(|(a, b)| a == b)
            .count() as f64
            / ds.n() as f64;
        agreement_rows.push((depth, agree));
    }
    files.push(artifacts::write_policy_values(
        &cfg.out,
        &value_rows,
        &ds.arm_labels,
    )?);
    files.push(artifacts::write_policy_cv(&cfg.out, &cv_rows)?);
    files.push(artifacts::write_policy_agreement(
        &cfg.out,
        &agreement_rows,
    )?);
    Ok(())
}

pub fn run_pipeline(cfg: &RunConfig) -> Result<Manifest> {
    let mut runner = StageRunner::new(cfg, true)?;
    let ds = runner.stage("data", |files| stage_data(cfg, files))?;
    let folds = runner.stage("folds", |files| stage_folds(cfg, &ds, files))?;
    let nu = runner.stage("nuisance", |files| stage_nuisance(cfg, &ds, &folds, files))?;
    let scores = runner.stage("scores", |files| stage_scores(cfg, &ds, &nu, files))?;
    runner.stage("effects", |files| {
        stage_effects(cfg, &ds, &nu, &scores, files)
    })?;
    if !cfg.gates.is_empty() {
        runner.stage("gate", |files| stage_gate(cfg, &ds, &scores, files))?;
    }
    if !cfg.iate_learners.is_empty() {
        runner.stage("iate", |files| stage_iate(cfg, &ds, Some(&nu), files))?;
    }
    if !cfg.policy_depths.is_empty() {
        runner.stage("policy", |files| {
            stage_policy(cfg, &ds, &scores, &folds, files)
        })?;
    }
    runner.finish()
}

pub fn run_fit_nuisance(cfg: &RunConfig) -> Result<Manifest> {
    let mut runner = StageRunner::new(cfg, false)?;
    let ds = runner.stage("data", |files| stage_data(cfg, files))?;
    let folds = runner.stage("folds", |files| stage_folds(cfg, &ds, files))?;
    runner.stage("nuisance", |files| stage_nuisance(cfg, &ds, &folds, files))?;
    runner.finish()
}

pub fn run_effects(cfg: &RunConfig) -> Result<Manifest> {
    let mut runner = StageRunner::new(cfg, false)?;
    let ds = load_dataset(cfg)?;
    let nu = artifacts::read_nuisance(&cfg.out, ds.num_arms)?;
    let scores = runner.stage("scores", |files| stage_scores(cfg, &ds, &nu, files))?;
    runner.stage("effects", |files| {
        stage_effects(cfg, &ds, &nu, &scores, files)
    })?;
    runner.finish()
}

pub fn run_gate(cfg: &RunConfig) -> Result<Manifest> {
    if cfg.gates.is_empty() {
        bail!("config requests no gates; set the 'gate' key");
    }
    let mut runner = StageRunner::new(cfg, false)?;
    let ds = load_dataset(cfg)?;
    let scores = artifacts::read_scores(&cfg.out)?;
    runner.stage("gate", |files| stage_gate(cfg, &ds, &scores, files))?;
    runner.finish()
}

pub fn run_iate(cfg: &RunConfig) -> Result<Manifest> {
    if cfg.iate_learners.is_empty() {
        bail!("config requests no effect learners; set the 'iate' key");
    }
    let mut runner = StageRunner::new(cfg, false)?;
    let ds = load_dataset(cfg)?;
    let nu = if iate_needs_nuisance(cfg) {
        Some(artifacts::read_nuisance(&cfg.out, ds.num_arms)?)
    } else {
        None
    };
    runner.stage("iate", |files| stage_iate(cfg, &ds, nu.as_ref(), files))?;
    runner.finish()
}

pub fn run_policy(cfg: &RunConfig) -> Result<Manifest> {
    if cfg.policy_depths.is_empty() {
        bail!("config requests no policy depths; set the 'policy_depths' key");
    }
    let mut runner = StageRunner::new(cfg, false)?;
    let ds = load_dataset(cfg)?;
    let scores = artifacts::read_scores(&cfg.out)?;
    let folds = artifacts::read_folds(&cfg.out)?;
    runner.stage("policy", |files| {
        stage_policy(cfg, &ds, &scores, &folds, files)
    })?;
    runner.finish()
}

pub fn run_synth(
    design: &str,
    n: usize,
    effect: f64,
    seed: u64,
    out: &Path,
    truth_out: Option<&Path>,
) -> Result<()> {
    let spec = design_spec(design, n, effect)?;
    let (ds, truth) = generate_synthetic(&spec, seed)?;
    save_csv(&ds, out)?;
    println!(
        "wrote {} rows, {} arms to {}",
        ds.n(),
        ds.num_arms,
        out.display()
    );
    if let Some(path) = truth_out {
        let reduced = TruthSummary {
            apo: truth.apo.clone(),
            ate: truth.ate.clone(),
            seed: truth.seed,
        };
        let mut text = serde_json::to_string_pretty(&reduced)?;
        text.push('\n');
        std::fs::write(path, text)?;
        println!("wrote generating truth to {}", path.display());
    }
    Ok(())
}

fn check_mark(pass: bool) -> &'static str {
    if pass {
        "pass"
    } else {
        "FAIL"
    }
}

/// Runs the estimator audit on a synthetic design and reports one line
/// per check. Returns the battery so callers can decide the exit code.
pub fn run_verify(
    design: &str,
    n_mc: usize,
    seed: u64,
    out: Option<&Path>,
) -> Result<DiagnosticsBattery> {
    let spec = design_spec(design, 2_000, 0.0)?;
    let battery = run_battery(&spec, n_mc, seed)?;
    for o in &battery.orthogonality {
        println!(
            "[orthogonality] arm {} derivative {:+.3e} vs 4*mc_se {:.3e}: {}",
            o.arm,
            o.derivative,
            4.0 * o.mc_se,
            check_mark(o.pass)
        );
    }
    for b in &battery.identification {
        println!(
            "[identification] {} arm {} bias {:+.3e} vs 4*mc_se {:.3e}: {}",
            b.scenario,
            b.arm,
            b.bias,
            4.0 * b.mc_se,
            check_mark(b.pass)
        );
    }
    let nc = &battery.negative_control;
    println!(
        "[negative-control] {} with {} bias {:+.3e}: {}",
        nc.score,
        nc.scenario,
        nc.bias,
        if nc.pass {
            "NOT DETECTED (expected a failure)"
        } else {
            "detected as expected"
        }
    );
    let ipw = &battery.ipw_derivative;
    println!(
        "[ipw-derivative] numeric {:+.4} analytic {:+.4}: {}",
        ipw.numeric,
        ipw.analytic,
        check_mark(ipw.pass)
    );
    println!("overall: {}", check_mark(battery.all_pass));
    if let Some(path) = out {
        let mut text = serde_json::to_string_pretty(&battery)?;
        text.push('\n');
        std::fs::write(path, text)?;
    }
    Ok(battery)
}
