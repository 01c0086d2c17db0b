//! Operational shell: CSV ingestion, preprocessing, synthetic dataset
//! generators, the experiment runners behind the CLI subcommands, and the
//! flat key-value config format.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::forest::{fit_forest, gram, gram_cross, Forest, KernelTag};
use crate::igb::{igb_flow, Loss};
use crate::importance::{run_benchmark, ScenarioId};
use crate::kpca::{
    bundle_from_matrix, kpca_fit, kpca_project, linear_gram, linear_probe, rbf_gram, silhouette,
    ProbeTask,
};
use crate::rkhs::effective_sample_size;
use crate::trees::{Dataset, GrowConfig, Strategy};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColumnKind {
    Numeric,
    Categorical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Classify,
    Regress,
}

/// Declared layout of a CSV: per-column kinds, the target column, and the
/// prediction task.
#[derive(Debug, Clone)]
pub struct TableSpec {
    pub columns: Vec<(String, ColumnKind)>,
    pub target: String,
    pub task: Task,
}

impl TableSpec {
    pub fn validate(&self) -> Result<()> {
        if !self.columns.iter().any(|(name, _)| name == &self.target) {
            return Err(Error::InvalidConfig(format!(
                "target column '{}' not declared",
                self.target
            )));
        }
        if self.columns.len() < 2 {
            return Err(Error::InvalidConfig(
                "need at least one feature column besides the target".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Missing,
    Num(f64),
    Cat(String),
}

#[derive(Debug, Clone)]
pub struct RawTable {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

/// Parse a headered CSV against a TableSpec. Empty or unparseable numeric
/// cells become missing markers; a row with the wrong column count is an
/// error naming its line.
pub fn load_csv<P: AsRef<Path>>(path: P, spec: &TableSpec) -> Result<RawTable> {
    spec.validate()?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path.as_ref())?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::MalformedCsv {
            line: 1,
            message: e.to_string(),
        })?
        .iter()
        .map(|s| s.to_string())
        .collect();
    for (name, _) in &spec.columns {
        if !headers.contains(name) {
            return Err(Error::InvalidConfig(format!(
                "declared column '{name}' absent from CSV header"
            )));
        }
    }
    let kind_of: BTreeMap<&str, ColumnKind> = spec
        .columns
        .iter()
        .map(|(n, k)| (n.as_str(), *k))
        .collect();
    let mut rows = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let line = idx + 2; // header is line 1
        let record = record.map_err(|e| Error::MalformedCsv {
            line,
            message: e.to_string(),
        })?;
        if record.len() != headers.len() {
            return Err(Error::MalformedCsv {
                line,
                message: format!(
                    "expected {} columns, found {}",
                    headers.len(),
                    record.len()
                ),
            });
        }
        let mut row = Vec::with_capacity(headers.len());
        for (h, field) in headers.iter().zip(record.iter()) {
            let cell = match kind_of.get(h.as_str()) {
                Some(ColumnKind::Numeric) | None => {
                    let t = field.trim();
                    if t.is_empty() {
                        Cell::Missing
                    } else {
                        match t.parse::<f64>() {
                            Ok(v) if v.is_finite() => Cell::Num(v),
                            _ => Cell::Missing,
                        }
                    }
                }
                Some(ColumnKind::Categorical) => {
                    if field.trim().is_empty() {
                        Cell::Missing
                    } else {
                        Cell::Cat(field.trim().to_string())
                    }
                }
            };
            row.push(cell);
        }
        rows.push(row);
    }
    Ok(RawTable { headers, rows })
}

#[derive(Debug, Clone)]
pub enum ColumnState {
    Numeric {
        name: String,
        mean: f64,
        sd: f64,
        min: f64,
        max: f64,
    },
    Categorical {
        name: String,
        mode: String,
        categories: Vec<String>,
    },
}

/// Preprocessing statistics fitted on the train split only.
#[derive(Debug, Clone)]
pub struct PreprocessState {
    pub columns: Vec<ColumnState>,
    pub target_labels: Vec<String>,
}

fn column_index(headers: &[String], name: &str) -> usize {
    headers.iter().position(|h| h == name).expect("validated")
}

/// Fit imputation/encoding/scaling on the train table, apply to both splits.
/// Numeric columns: mean-impute, standardize, then min-max into [0,1] with
/// train statistics (test clipped). Categorical: mode-impute, one-hot with
/// train categories (unseen test categories become an all-zero block).
pub fn preprocess_fit_transform(
    train: &RawTable,
    test: &RawTable,
    spec: &TableSpec,
) -> Result<(Dataset, Dataset, PreprocessState)> {
    spec.validate()?;
    if train.rows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut states = Vec::new();
    for (name, kind) in &spec.columns {
        if name == &spec.target {
            continue;
        }
        let ci = column_index(&train.headers, name);
        match kind {
            ColumnKind::Numeric => {
                let values: Vec<f64> = train
                    .rows
                    .iter()
                    .filter_map(|r| match &r[ci] {
                        Cell::Num(v) => Some(*v),
                        _ => None,
                    })
                    .collect();
                if values.is_empty() {
                    eprintln!("warning: column '{name}' is all-missing on train; dropped");
                    continue;
                }
                let mean = values.iter().sum::<f64>() / values.len() as f64;
                let var = values.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>()
                    / values.len() as f64;
                let sd = var.sqrt();
                let z = |v: f64| if sd > 0.0 { (v - mean) / sd } else { 0.0 };
                let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
                for &v in &values {
                    lo = lo.min(z(v));
                    hi = hi.max(z(v));
                }
                states.push(ColumnState::Numeric {
                    name: name.clone(),
                    mean,
                    sd,
                    min: lo,
                    max: hi,
                });
            }
            ColumnKind::Categorical => {
                let mut counts: BTreeMap<String, usize> = BTreeMap::new();
                for r in &train.rows {
                    if let Cell::Cat(s) = &r[ci] {
                        *counts.entry(s.clone()).or_insert(0) += 1;
                    }
                }
                if counts.is_empty() {
                    eprintln!("warning: column '{name}' is all-missing on train; dropped");
                    continue;
                }
                let mode = counts
                    .iter()
                    .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
                    .unwrap()
                    .0
                    .clone();
                let categories: Vec<String> = counts.keys().cloned().collect();
                states.push(ColumnState::Categorical {
                    name: name.clone(),
                    mode,
                    categories,
                });
            }
        }
    }
    // Target extraction.
    let ti = column_index(&train.headers, &spec.target);
    let mut target_labels: Vec<String> = Vec::new();
    if spec.task == Task::Classify {
        let mut set = std::collections::BTreeSet::new();
        for r in &train.rows {
            match &r[ti] {
                Cell::Cat(s) => {
                    set.insert(s.clone());
                }
                Cell::Num(v) => {
                    set.insert(format!("{v}"));
                }
                Cell::Missing => {
                    return Err(Error::InvalidConfig("missing target label".into()))
                }
            }
        }
        target_labels = set.into_iter().collect();
    }
    let state = PreprocessState {
        columns: states,
        target_labels,
    };
    let train_ds = apply_preprocess(train, spec, &state, false)?;
    let test_ds = apply_preprocess(test, spec, &state, true)?;
    Ok((train_ds, test_ds, state))
}

fn apply_preprocess(
    table: &RawTable,
    spec: &TableSpec,
    state: &PreprocessState,
    clip: bool,
) -> Result<Dataset> {
    let ti = column_index(&table.headers, &spec.target);
    let mut x = Vec::with_capacity(table.rows.len());
    let mut y = Vec::with_capacity(table.rows.len());
    for r in &table.rows {
        let mut row = Vec::new();
        for col in &state.columns {
            match col {
                ColumnState::Numeric {
                    name,
                    mean,
                    sd,
                    min,
                    max,
                } => {
                    let ci = column_index(&table.headers, name);
                    let v = match &r[ci] {
                        Cell::Num(v) => *v,
                        _ => *mean,
                    };
                    let z = if *sd > 0.0 { (v - mean) / sd } else { 0.0 };
                    let span = max - min;
                    let u = if span > 0.0 { (z - min) / span } else { 0.0 };
                    row.push(if clip { u.clamp(0.0, 1.0) } else { u });
                }
                ColumnState::Categorical {
                    name,
                    mode,
                    categories,
                } => {
                    let ci = column_index(&table.headers, name);
                    let value = match &r[ci] {
                        Cell::Cat(s) => s.clone(),
                        _ => mode.clone(),
                    };
                    for c in categories {
                        row.push(if c == &value { 1.0 } else { 0.0 });
                    }
                }
            }
        }
        x.push(row);
        let target = match (&r[ti], spec.task) {
            (Cell::Num(v), Task::Regress) => *v,
            (Cell::Num(v), Task::Classify) => {
                let label = format!("{v}");
                state
                    .target_labels
                    .iter()
                    .position(|l| l == &label)
                    .map(|i| i as f64)
                    .ok_or_else(|| Error::InvalidConfig(format!("unseen label '{label}'")))?
            }
            (Cell::Cat(s), Task::Classify) => state
                .target_labels
                .iter()
                .position(|l| l == s)
                .map(|i| i as f64)
                .ok_or_else(|| Error::InvalidConfig(format!("unseen label '{s}'")))?,
            (Cell::Cat(s), Task::Regress) => {
                return Err(Error::InvalidConfig(format!(
                    "non-numeric target '{s}' for regression"
                )))
            }
            (Cell::Missing, _) => {
                return Err(Error::InvalidConfig("missing target value".into()))
            }
        };
        y.push(target);
    }
    Dataset::new(x, y)
}

/// Two concentric circles with radial noise, labels 0 (inner) / 1 (outer).
/// Coordinates are already inside [0,1].
pub fn concentric_circles(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let radius = if label == 0 { 0.18 } else { 0.42 };
        let theta = rng.gen_range(0.0..std::f64::consts::TAU);
        let noise: f64 = rng.sample::<f64, _>(StandardNormal) * 0.02;
        let r = radius + noise;
        x.push(vec![
            (0.5 + r * theta.cos()).clamp(0.0, 1.0),
            (0.5 + r * theta.sin()).clamp(0.0, 1.0),
        ]);
        y.push(label as f64);
    }
    (x, y)
}

/// Two interleaving half-moons, labels 0/1, inside [0,1].
pub fn two_moons(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let t = rng.gen_range(0.0..std::f64::consts::PI);
        let (mut a, mut b) = if label == 0 {
            (t.cos(), t.sin())
        } else {
            (1.0 - t.cos(), 0.5 - t.sin())
        };
        a += rng.sample::<f64, _>(StandardNormal) * 0.08;
        b += rng.sample::<f64, _>(StandardNormal) * 0.08;
        // Map from roughly [-1.3, 2.3] x [-1.1, 1.1] into the unit square.
        x.push(vec![
            ((a + 1.3) / 3.6).clamp(0.0, 1.0),
            ((b + 1.1) / 2.2).clamp(0.0, 1.0),
        ]);
        y.push(label as f64);
    }
    (x, y)
}

/// Regression surface: linear trend plus a sine bump, 3 features.
pub fn linear_sine(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let row: Vec<f64> = (0..3).map(|_| rng.gen()).collect();
        let noise: f64 = rng.sample::<f64, _>(StandardNormal) * 0.1;
        y.push(2.0 * row[0] + (std::f64::consts::TAU * row[1]).sin() + noise);
        x.push(row);
    }
    (x, y)
}

/// Flat `key = value` config files; `#` starts a comment.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (i, raw_line) in text.lines().enumerate() {
        let line = raw_line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::InvalidConfig(format!(
                "config line {}: expected key = value, got '{line}'",
                i + 1
            )));
        };
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

pub fn load_config<P: AsRef<Path>>(path: P) -> Result<BTreeMap<String, String>> {
    parse_config(&std::fs::read_to_string(path)?)
}

fn cfg_get<'a>(cfg: &'a BTreeMap<String, String>, key: &str, default: &'a str) -> &'a str {
    cfg.get(key).map(String::as_str).unwrap_or(default)
}

fn cfg_parse<T: std::str::FromStr>(
    cfg: &BTreeMap<String, String>,
    key: &str,
    default: T,
    errors: &mut Vec<String>,
) -> T {
    match cfg.get(key) {
        None => default,
        Some(v) => v.parse().unwrap_or_else(|_| {
            errors.push(format!("key '{key}': cannot parse '{v}'"));
            default
        }),
    }
}

fn strategy_from(name: &str) -> Result<Strategy> {
    match name {
        "uniform" => Ok(Strategy::Uniform),
        "extra_trees" => Ok(Strategy::ExtraTrees),
        "softmax" => Ok(Strategy::Softmax),
        "breiman_greedy" => Ok(Strategy::BreimanGreedy),
        other => Err(Error::InvalidConfig(format!("unknown strategy '{other}'"))),
    }
}

fn generated_dataset(
    cfg: &BTreeMap<String, String>,
    n: usize,
    seed: u64,
) -> Result<(Vec<Vec<f64>>, Vec<f64>, Task)> {
    match cfg_get(cfg, "generator", "") {
        "circles" => {
            let (x, y) = concentric_circles(n, seed);
            Ok((x, y, Task::Classify))
        }
        "moons" => {
            let (x, y) = two_moons(n, seed);
            Ok((x, y, Task::Classify))
        }
        "linsine" => {
            let (x, y) = linear_sine(n, seed);
            Ok((x, y, Task::Regress))
        }
        "" => Err(Error::InvalidConfig(
            "missing 'generator' (circles|moons|linsine) and no 'dataset' path".into(),
        )),
        other => Err(Error::InvalidConfig(format!("unknown generator '{other}'"))),
    }
}

fn split_70_30(
    x: &[Vec<f64>],
    y: &[f64],
    seed: u64,
) -> (Vec<Vec<f64>>, Vec<f64>, Vec<Vec<f64>>, Vec<f64>) {
    let n = x.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5357_1337);
    order.shuffle(&mut rng);
    let n_train = (n as f64 * 0.7).round() as usize;
    let take = |idx: &[usize]| -> (Vec<Vec<f64>>, Vec<f64>) {
        (
            idx.iter().map(|&i| x[i].clone()).collect(),
            idx.iter().map(|&i| y[i]).collect(),
        )
    };
    let (xtr, ytr) = take(&order[..n_train]);
    let (xte, yte) = take(&order[n_train..]);
    (xtr, ytr, xte, yte)
}

fn forest_variant(name: &str, p: usize, seed: u64) -> Result<GrowConfig> {
    let mut cfg = match name {
        "et" => GrowConfig::new(Strategy::ExtraTrees, p),
        "et5" => {
            let mut c = GrowConfig::new(Strategy::ExtraTrees, p);
            c.min_samples_leaf = 5;
            c
        }
        "breiman" => {
            let mut c = GrowConfig::new(Strategy::BreimanGreedy, p);
            c.bootstrap_for_partition = true;
            c
        }
        other => {
            return Err(Error::InvalidConfig(format!(
                "unknown forest variant '{other}' (et|et5|breiman)"
            )))
        }
    };
    cfg.seed = seed;
    Ok(cfg)
}

fn out_dir(base: &Path, experiment: &str, seed: u64) -> Result<PathBuf> {
    let dir = base.join(experiment).join(seed.to_string());
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn fmt(v: f64) -> String {
    format!("{v:.10}")
}

/// Embedding comparison: for each kernel in {linear, rbf, k0, kP} x forest
/// variant, fit kernel PCA on the train split, project the test split, and
/// evaluate silhouette and a linear probe. Writes scores.csv, table.csv,
/// and summary.json under out/kpca/<seed>/.
pub fn run_kpca_experiment(
    cfg: &BTreeMap<String, String>,
    seed: u64,
    out_base: &Path,
) -> Result<()> {
    let mut errors = Vec::new();
    let n: usize = cfg_parse(cfg, "n", 600, &mut errors);
    let q: usize = cfg_parse(cfg, "components", 2, &mut errors);
    let m: usize = cfg_parse(cfg, "m", 200, &mut errors);
    let kernels: Vec<String> = cfg_get(cfg, "kernels", "linear,rbf,k0,kP")
        .split(',')
        .map(|s| s.trim().to_string())
        .collect();
    let variants: Vec<String> = cfg_get(cfg, "forests", "et")
        .split(',')
        .map(|s| s.trim().to_string())
        .collect();
    for k in &kernels {
        if !["linear", "rbf", "k0", "kP"].contains(&k.as_str()) {
            errors.push(format!("unknown kernel '{k}'"));
        }
    }
    if cfg.get("dataset").is_none() && cfg.get("generator").is_none() {
        errors.push("need either 'dataset' or 'generator'".into());
    }
    if !errors.is_empty() {
        return Err(Error::InvalidConfig(errors.join("; ")));
    }

    let (x, y, task) = if let Some(path) = cfg.get("dataset") {
        let task = match cfg_get(cfg, "task", "classify") {
            "classify" => Task::Classify,
            "regress" => Task::Regress,
            other => return Err(Error::InvalidConfig(format!("unknown task '{other}'"))),
        };
        let (ds, t) = load_dataset_csv(path, cfg, task)?;
        (ds, y_from(&t), task)
    } else {
        let (x, y, task) = generated_dataset(cfg, n, seed)?;
        (x, y, task)
    };
    let (xtr, ytr, xte, yte) = split_70_30(&x, &y, seed);
    let train = Dataset::new(xtr, ytr.clone())?;
    let p = train.p();

    let dir = out_dir(out_base, "kpca", seed)?;
    let mut scores_csv = String::from("kernel,forest,split,component_1,component_2,label\n");
    let mut table_csv =
        String::from("kernel,forest,silhouette,probe_metric,relative_improvement,n_eff_pct\n");
    let mut summary_rows = Vec::new();
    let mut baseline_mse: Option<f64> = None;

    let mut grid: Vec<(String, String)> = Vec::new();
    for k in &kernels {
        if k == "linear" || k == "rbf" {
            grid.push((k.clone(), "-".to_string()));
        } else {
            for v in &variants {
                grid.push((k.clone(), v.clone()));
            }
        }
    }
    // Linear first so its MSE can serve as the RI baseline.
    grid.sort_by_key(|(k, _)| match k.as_str() {
        "linear" => 0,
        "rbf" => 1,
        "k0" => 2,
        _ => 3,
    });

    for (kernel, variant) in &grid {
        let (k_train, k_cross, n_eff_pct) = match kernel.as_str() {
            "linear" => (
                linear_gram(train.rows(), train.rows()),
                linear_gram(&xte, train.rows()),
                f64::NAN,
            ),
            "rbf" => {
                let gamma = 1.0 / p as f64;
                (
                    rbf_gram(train.rows(), train.rows(), gamma),
                    rbf_gram(&xte, train.rows(), gamma),
                    f64::NAN,
                )
            }
            tag_name => {
                let tag = if tag_name == "k0" { KernelTag::K0 } else { KernelTag::KP };
                let fcfg = forest_variant(variant, p, seed ^ 0xF0F0)?;
                let forest = fit_forest(&train, train.targets(), &fcfg, m)?;
                let g = gram(&forest, train.rows(), tag, train.n());
                let cross = gram_cross(&forest, &xte, train.rows(), tag, train.n());
                let (_, global) = effective_sample_size(&forest, &train);
                (g.matrix, cross, 100.0 * global / train.n() as f64)
            }
        };
        let bundle = bundle_from_matrix(k_train, train.rows(), KernelTag::K0);
        let model = kpca_fit(&bundle, q)?;
        let test_scores = kpca_project(&model, &k_cross)?;
        let labels: Vec<usize> = yte.iter().map(|&v| v as usize).collect();
        let sil = if task == Task::Classify {
            silhouette(&test_scores, &labels)?
        } else {
            f64::NAN
        };
        let probe = match task {
            Task::Classify => linear_probe(
                &model.train_scores,
                &ytr,
                &test_scores,
                &yte,
                ProbeTask::Classify,
                None,
            )?,
            Task::Regress => {
                let r = linear_probe(
                    &model.train_scores,
                    &ytr,
                    &test_scores,
                    &yte,
                    ProbeTask::Regress,
                    baseline_mse,
                )?;
                if kernel == "linear" {
                    baseline_mse = Some(r.metric);
                }
                r
            }
        };
        for (i, label) in yte.iter().enumerate() {
            let c2 = if test_scores.ncols() > 1 {
                test_scores[(i, 1)]
            } else {
                0.0
            };
            scores_csv.push_str(&format!(
                "{kernel},{variant},test,{},{},{label}\n",
                fmt(test_scores[(i, 0)]),
                fmt(c2)
            ));
        }
        let ri = probe
            .relative_improvement
            .map(fmt)
            .unwrap_or_else(|| "".into());
        table_csv.push_str(&format!(
            "{kernel},{variant},{},{},{ri},{}\n",
            fmt(sil),
            fmt(probe.metric),
            fmt(n_eff_pct)
        ));
        summary_rows.push(serde_json::json!({
            "kernel": kernel,
            "forest": variant,
            "silhouette": if sil.is_nan() { None } else { Some(sil) },
            "probe_metric": probe.metric,
            "relative_improvement": probe.relative_improvement,
            "n_eff_pct": if n_eff_pct.is_nan() { None } else { Some(n_eff_pct) },
        }));
    }

    std::fs::write(dir.join("scores.csv"), scores_csv)?;
    std::fs::write(dir.join("table.csv"), table_csv)?;
    let summary = serde_json::json!({
        "experiment": "kpca",
        "seed": seed,
        "n": x.len(),
        "components": q,
        "rows": summary_rows,
    });
    let mut f = std::fs::File::create(dir.join("summary.json"))?;
    writeln!(f, "{}", serde_json::to_string_pretty(&summary).map_err(|e| Error::Serialization(e.to_string()))?)?;
    Ok(())
}

fn load_dataset_csv(
    path: &str,
    cfg: &BTreeMap<String, String>,
    task: Task,
) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let target = cfg
        .get("target")
        .ok_or_else(|| Error::InvalidConfig("dataset path given but no 'target' column".into()))?;
    // All columns numeric unless listed in 'categorical'.
    let cats: Vec<String> = cfg
        .get("categorical")
        .map(|s| s.split(',').map(|c| c.trim().to_string()).collect())
        .unwrap_or_default();
    let header_line = std::io::BufRead::lines(std::io::BufReader::new(std::fs::File::open(path)?))
        .next()
        .ok_or_else(|| Error::MalformedCsv {
            line: 1,
            message: "empty file".into(),
        })??;
    let columns: Vec<(String, ColumnKind)> = header_line
        .split(',')
        .map(|h| {
            let name = h.trim().to_string();
            let kind = if cats.contains(&name) || (task == Task::Classify && &name == target) {
                ColumnKind::Categorical
            } else {
                ColumnKind::Numeric
            };
            (name, kind)
        })
        .collect();
    let spec = TableSpec {
        columns,
        target: target.clone(),
        task,
    };
    let table = load_csv(path, &spec)?;
    // Fit preprocessing on the full file here; the 70/30 split happens
    // downstream on the already-encoded features, so this path is only for
    // quick looks at external data, not the leakage-free protocol.
    let (ds, _, _) = preprocess_fit_transform(&table, &table, &spec)?;
    Ok((ds.rows().to_vec(), ds.targets().to_vec()))
}

fn y_from(t: &[f64]) -> Vec<f64> {
    t.to_vec()
}

/// Importance benchmark table across scenarios. Writes table.csv and
/// summary.json under out/gvi-bench/<seed>/.
pub fn run_gvi_benchmark(
    cfg: &BTreeMap<String, String>,
    seed: u64,
    out_base: &Path,
) -> Result<()> {
    let mut errors = Vec::new();
    let n: usize = cfg_parse(cfg, "n", 500, &mut errors);
    let m: usize = cfg_parse(cfg, "m", 500, &mut errors);
    let replicates: usize = cfg_parse(cfg, "replicates", 20, &mut errors);
    let scenarios: Vec<ScenarioId> = match cfg.get("scenarios") {
        None => ScenarioId::ALL.to_vec(),
        Some(list) => {
            let mut out = Vec::new();
            for s in list.split(',') {
                match ScenarioId::parse(s.trim()) {
                    Ok(id) => out.push(id),
                    Err(e) => errors.push(e.to_string()),
                }
            }
            out
        }
    };
    if !errors.is_empty() {
        return Err(Error::InvalidConfig(errors.join("; ")));
    }
    let rows = run_benchmark(&scenarios, n, m, replicates, seed)?;
    let dir = out_dir(out_base, "gvi-bench", seed)?;
    // Wall-clock timings go to stderr only so the written files stay
    // byte-identical across reruns with the same seed.
    let mut csv = String::from("scenario,method,precision_k,separation,spearman_vs_mda\n");
    let mut summary_rows = Vec::new();
    for r in &rows {
        eprintln!(
            "{} {}: {:.4}s per replicate",
            r.scenario.as_str(),
            r.method.as_str(),
            r.time_s
        );
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            r.scenario.as_str(),
            r.method.as_str(),
            fmt(r.precision_k),
            fmt(r.separation),
            fmt(r.spearman_vs_mda)
        ));
        summary_rows.push(serde_json::json!({
            "scenario": r.scenario.as_str(),
            "method": r.method.as_str(),
            "precision_k": r.precision_k,
            "separation": r.separation,
            "spearman_vs_mda": r.spearman_vs_mda,
        }));
    }
    std::fs::write(dir.join("table.csv"), csv)?;
    let summary = serde_json::json!({
        "experiment": "gvi-bench",
        "seed": seed,
        "n": n, "m": m, "replicates": replicates,
        "rows": summary_rows,
    });
    std::fs::write(
        dir.join("summary.json"),
        serde_json::to_string_pretty(&summary).map_err(|e| Error::Serialization(e.to_string()))? + "\n",
    )?;
    Ok(())
}

/// Build (or generate) a dataset for the gram/neff/igb subcommands.
pub fn dataset_from_config(
    cfg: &BTreeMap<String, String>,
    seed: u64,
) -> Result<Dataset> {
    let mut errors = Vec::new();
    let n: usize = cfg_parse(cfg, "n", 200, &mut errors);
    if !errors.is_empty() {
        return Err(Error::InvalidConfig(errors.join("; ")));
    }
    let (x, y, _) = generated_dataset(cfg, n, seed)?;
    Dataset::new(x, y)
}

pub fn forest_from_config(
    cfg: &BTreeMap<String, String>,
    data: &Dataset,
    seed: u64,
) -> Result<Forest> {
    let mut errors = Vec::new();
    let m: usize = cfg_parse(cfg, "m", 100, &mut errors);
    let strategy = strategy_from(cfg_get(cfg, "strategy", "extra_trees"))?;
    let mut gcfg = GrowConfig::new(strategy, data.p());
    gcfg.max_depth = cfg_parse(cfg, "depth", gcfg.max_depth, &mut errors);
    gcfg.k_candidates = cfg_parse(cfg, "k", gcfg.k_candidates, &mut errors);
    gcfg.beta = cfg_parse(cfg, "beta", gcfg.beta, &mut errors);
    gcfg.min_samples_leaf = cfg_parse(cfg, "min_samples_leaf", gcfg.min_samples_leaf, &mut errors);
    gcfg.seed = seed;
    if !errors.is_empty() {
        return Err(Error::InvalidConfig(errors.join("; ")));
    }
    fit_forest(data, data.targets(), &gcfg, m)
}

/// `gram` subcommand: Gram matrix of the configured kernel over the
/// training points, as CSV with a provenance header.
pub fn run_gram(cfg: &BTreeMap<String, String>, seed: u64, out_base: &Path) -> Result<()> {
    let data = dataset_from_config(cfg, seed)?;
    let forest = forest_from_config(cfg, &data, seed)?;
    let tag = match cfg_get(cfg, "kernel", "kP") {
        "k0" => KernelTag::K0,
        "kP" => KernelTag::KP,
        other => return Err(Error::InvalidConfig(format!("unknown kernel '{other}'"))),
    };
    let bundle = gram(&forest, data.rows(), tag, data.n());
    let dir = out_dir(out_base, "gram", seed)?;
    let file = std::fs::File::create(dir.join("gram.csv"))?;
    let mut w = std::io::BufWriter::new(file);
    crate::forest::write_gram_csv(&mut w, &bundle, seed, forest.m())?;
    Ok(())
}

/// `neff` subcommand: effective sample sizes as a JSON record.
pub fn run_neff(cfg: &BTreeMap<String, String>, seed: u64, out_base: &Path) -> Result<()> {
    let data = dataset_from_config(cfg, seed)?;
    let forest = forest_from_config(cfg, &data, seed)?;
    let (per_point, global) = effective_sample_size(&forest, &data);
    let dir = out_dir(out_base, "neff", seed)?;
    let summary = serde_json::json!({
        "experiment": "neff",
        "seed": seed,
        "n": data.n(),
        "n_eff": global,
        "n_eff_pct": 100.0 * global / data.n() as f64,
        "per_point": per_point,
    });
    std::fs::write(
        dir.join("summary.json"),
        serde_json::to_string_pretty(&summary).map_err(|e| Error::Serialization(e.to_string()))? + "\n",
    )?;
    Ok(())
}

/// `igb-trace` subcommand: per-step CSV of the Euler flow.
pub fn run_igb_trace(cfg: &BTreeMap<String, String>, seed: u64, out_base: &Path) -> Result<()> {
    let mut errors = Vec::new();
    let lambda: f64 = cfg_parse(cfg, "lambda", 0.01, &mut errors);
    let t_end: f64 = cfg_parse(cfg, "t_end", 1.0, &mut errors);
    let m_per_step: usize = cfg_parse(cfg, "m_per_step", 50, &mut errors);
    let depth: usize = cfg_parse(cfg, "depth", 4, &mut errors);
    let beta: f64 = cfg_parse(cfg, "beta", 1.0, &mut errors);
    let k: usize = cfg_parse(cfg, "k", 10, &mut errors);
    let loss = match cfg_get(cfg, "loss", "squared") {
        "squared" => Loss::Squared,
        "logistic" => Loss::Logistic,
        other => {
            errors.push(format!("unknown loss '{other}'"));
            Loss::Squared
        }
    };
    if !errors.is_empty() {
        return Err(Error::InvalidConfig(errors.join("; ")));
    }
    let data = dataset_from_config(cfg, seed)?;
    let mut gcfg = GrowConfig::new(Strategy::Softmax, data.p());
    gcfg.max_depth = depth;
    gcfg.beta = beta;
    gcfg.k_candidates = k;
    let trace = igb_flow(
        loss,
        &data,
        data.targets(),
        &gcfg,
        lambda,
        t_end,
        m_per_step,
        seed,
    )?;
    let dir = out_dir(out_base, "igb-trace", seed)?;
    let mut csv = String::from("t,risk,step_norm,f_min,f_max\n");
    for i in 0..trace.times.len() {
        let step_norm = if i == 0 {
            0.0
        } else {
            trace.f_values[i]
                .iter()
                .zip(&trace.f_values[i - 1])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
                / lambda
        };
        let (fmin, fmax) = trace.f_values[i]
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
                (a.min(v), b.max(v))
            });
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            fmt(trace.times[i]),
            fmt(trace.risks[i]),
            fmt(step_norm),
            fmt(fmin),
            fmt(fmax)
        ));
    }
    std::fs::write(dir.join("trace.csv"), csv)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec_numeric() -> TableSpec {
        TableSpec {
            columns: vec![
                ("a".into(), ColumnKind::Numeric),
                ("b".into(), ColumnKind::Numeric),
                ("y".into(), ColumnKind::Numeric),
            ],
            target: "y".into(),
            task: Task::Regress,
        }
    }

    fn write_tmp(content: &str) -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        std::fs::write(&path, content).unwrap();
        (dir, path)
    }

    #[test]
    fn load_csv_well_formed() {
        let (_d, path) = write_tmp("a,b,y\n1,2,3\n4,5,6\n7,8,9\n");
        let table = load_csv(&path, &spec_numeric()).unwrap();
        assert_eq!(table.rows.len(), 3);
        assert_eq!(table.rows[1][0], Cell::Num(4.0));
    }

    #[test]
    fn load_csv_missing_cell_marked() {
        let (_d, path) = write_tmp("a,b,y\n1,,3\n4,zzz,6\n");
        let table = load_csv(&path, &spec_numeric()).unwrap();
        assert_eq!(table.rows[0][1], Cell::Missing);
        assert_eq!(table.rows[1][1], Cell::Missing);
    }

    #[test]
    fn load_csv_extra_column_errors_with_line() {
        let (_d, path) = write_tmp("a,b,y\n1,2,3\n4,5,6,7\n");
        let err = load_csv(&path, &spec_numeric()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 3"), "got: {msg}");
    }

    #[test]
    fn preprocess_minmax_numeric() {
        let (_d, path) = write_tmp("a,b,y\n2,0,1\n4,1,2\n3,0.5,3\n");
        let spec = spec_numeric();
        let table = load_csv(&path, &spec).unwrap();
        let (train, _, _) = preprocess_fit_transform(&table, &table, &spec).unwrap();
        // Column a spans [2,4]: 2 -> 0, 4 -> 1, 3 -> 0.5.
        assert!((train.row(0)[0] - 0.0).abs() < 1e-12);
        assert!((train.row(1)[0] - 1.0).abs() < 1e-12);
        assert!((train.row(2)[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn preprocess_one_hot_and_unseen_category() {
        let spec = TableSpec {
            columns: vec![
                ("c".into(), ColumnKind::Categorical),
                ("y".into(), ColumnKind::Numeric),
            ],
            target: "y".into(),
            task: Task::Regress,
        };
        let (_d1, train_path) = write_tmp("c,y\na,1\nb,2\na,3\n");
        let (_d2, test_path) = write_tmp("c,y\nb,4\nz,5\n");
        let train = load_csv(&train_path, &spec).unwrap();
        let test = load_csv(&test_path, &spec).unwrap();
        let (tr, te, _) = preprocess_fit_transform(&train, &test, &spec).unwrap();
        assert_eq!(tr.p(), 2);
        assert_eq!(tr.row(0), &[1.0, 0.0]);
        assert_eq!(te.row(0), &[0.0, 1.0]);
        // Unseen category -> all-zero block.
        assert_eq!(te.row(1), &[0.0, 0.0]);
    }

    #[test]
    fn preprocess_mean_imputation() {
        let (_d, path) = write_tmp("a,b,y\n1,0,1\n,1,2\n3,0,3\n");
        let spec = spec_numeric();
        let table = load_csv(&path, &spec).unwrap();
        let (tr, _, _) = preprocess_fit_transform(&table, &table, &spec).unwrap();
        // Missing a imputed by mean 2, which maps to the middle of [1,3].
        assert!((tr.row(1)[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn config_parser_basics() {
        let cfg = parse_config("a = 1\n# comment\nb=two # trailing\n\n").unwrap();
        assert_eq!(cfg["a"], "1");
        assert_eq!(cfg["b"], "two");
        assert!(parse_config("not a pair\n").is_err());
    }

    #[test]
    fn generators_stay_in_unit_square() {
        for (x, _) in [
            concentric_circles(500, 1),
            two_moons(500, 2),
            linear_sine(500, 3),
        ] {
            for row in x {
                for v in row {
                    assert!((0.0..=1.0).contains(&v));
                }
            }
        }
    }

    #[test]
    fn kpca_experiment_smoke_and_determinism() {
        let mut cfg = BTreeMap::new();
        cfg.insert("generator".to_string(), "circles".to_string());
        cfg.insert("n".to_string(), "120".to_string());
        cfg.insert("m".to_string(), "40".to_string());
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        run_kpca_experiment(&cfg, 7, d1.path()).unwrap();
        run_kpca_experiment(&cfg, 7, d2.path()).unwrap();
        for name in ["scores.csv", "table.csv", "summary.json"] {
            let a = std::fs::read(d1.path().join("kpca/7").join(name)).unwrap();
            let b = std::fs::read(d2.path().join("kpca/7").join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between identical runs");
        }
        let table = std::fs::read_to_string(d1.path().join("kpca/7/table.csv")).unwrap();
        for kernel in ["linear", "rbf", "k0", "kP"] {
            assert!(table.contains(kernel), "missing {kernel} row");
        }
    }

    #[test]
    fn kpca_experiment_validation_errors() {
        let cfg = BTreeMap::new();
        let d = tempfile::tempdir().unwrap();
        let err = run_kpca_experiment(&cfg, 1, d.path()).unwrap_err();
        assert!(err.to_string().contains("generator"));
    }

    #[test]
    fn no_test_leakage_canary() {
        // Perturbing the test rows must leave every fitted artifact
        // byte-identical; only test-side evaluations may move.
        let (x, y) = concentric_circles(100, 5);
        let (xtr, ytr, mut xte, _) = split_70_30(&x, &y, 5);
        let train = Dataset::new(xtr, ytr).unwrap();
        let k = linear_gram(train.rows(), train.rows());
        let b = bundle_from_matrix(k, train.rows(), KernelTag::K0);
        let before = kpca_fit(&b, 2).unwrap();
        for r in xte.iter_mut() {
            r[0] = (r[0] + 0.31).rem_euclid(1.0);
        }
        let after = kpca_fit(&b, 2).unwrap();
        assert_eq!(
            before.train_scores.as_slice(),
            after.train_scores.as_slice()
        );
        assert_eq!(before.eigenvalues, after.eigenvalues);
    }

    #[test]
    fn gram_and_neff_outputs() {
        let mut cfg = BTreeMap::new();
        cfg.insert("generator".to_string(), "linsine".to_string());
        cfg.insert("n".to_string(), "50".to_string());
        cfg.insert("m".to_string(), "20".to_string());
        let d = tempfile::tempdir().unwrap();
        run_gram(&cfg, 3, d.path()).unwrap();
        let gram_text = std::fs::read_to_string(d.path().join("gram/3/gram.csv")).unwrap();
        assert!(gram_text.starts_with("# kernel=kP seed=3 M=20\n"));
        run_neff(&cfg, 3, d.path()).unwrap();
        let neff: serde_json::Value = serde_json::from_str(
            &std::fs::read_to_string(d.path().join("neff/3/summary.json")).unwrap(),
        )
        .unwrap();
        let v = neff["n_eff"].as_f64().unwrap();
        assert!((1.0..=50.0).contains(&v));
    }

    #[test]
    fn igb_trace_output() {
        let mut cfg = BTreeMap::new();
        cfg.insert("generator".to_string(), "linsine".to_string());
        cfg.insert("n".to_string(), "40".to_string());
        cfg.insert("lambda".to_string(), "0.1".to_string());
        cfg.insert("t_end".to_string(), "0.3".to_string());
        cfg.insert("m_per_step".to_string(), "10".to_string());
        let d = tempfile::tempdir().unwrap();
        run_igb_trace(&cfg, 9, d.path()).unwrap();
        let text = std::fs::read_to_string(d.path().join("igb-trace/9/trace.csv")).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "t,risk,step_norm,f_min,f_max");
        assert_eq!(lines.len(), 1 + 1 + 3); // header + init + 3 steps
    }
}
