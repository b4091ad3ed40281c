//! Regression learners: least squares, random forest and gradient-boosted
//! trees, with impurity importance and partial dependence.

mod tree;

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
pub use tree::Tree;
use tree::{Design, TreeParams};

/// Version tag written into serialized models.
pub const MODEL_FMT: u32 = 1;

/// Row-major feature matrix with targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    features: Vec<f64>,
    n_features: usize,
    targets: Vec<f64>,
    feature_names: Vec<String>,
}

impl Dataset {
    pub fn new(rows: &[Vec<f64>], targets: Vec<f64>, feature_names: Vec<String>) -> Result<Self> {
        let n_features = feature_names.len();
        let mut features = Vec::with_capacity(rows.len() * n_features);
        for row in rows {
            if row.len() != n_features {
                return Err(Error::Shape { expected: n_features, got: row.len() });
            }
            features.extend_from_slice(row);
        }
        Self::from_flat(features, n_features, targets, feature_names)
    }

    pub fn from_flat(features: Vec<f64>, n_features: usize, targets: Vec<f64>, feature_names: Vec<String>) -> Result<Self> {
        if feature_names.len() != n_features {
            return Err(Error::Shape { expected: n_features, got: feature_names.len() });
        }
        if features.len() != targets.len() * n_features {
            return Err(Error::Shape { expected: targets.len() * n_features, got: features.len() });
        }
        if features.iter().chain(&targets).any(|v| !v.is_finite()) {
            return Err(Error::domain("dataset contains non-finite values"));
        }
        Ok(Self { features, n_features, targets, feature_names })
    }

    pub fn n_samples(&self) -> usize {
        self.targets.len()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    /// Copy with columns reordered: new column `j` is old column `perm[j]`.
    pub fn permute_columns(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.n_features {
            return Err(Error::Shape { expected: self.n_features, got: perm.len() });
        }
        let mut features = Vec::with_capacity(self.features.len());
        for i in 0..self.n_samples() {
            let row = self.row(i);
            features.extend(perm.iter().map(|&p| row[p]));
        }
        let names = perm.iter().map(|&p| self.feature_names[p].clone()).collect();
        Self::from_flat(features, self.n_features, self.targets.clone(), names)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Linear,
    Forest,
    Gbdt,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Linear => "linear",
            ModelKind::Forest => "forest",
            ModelKind::Gbdt => "gbdt",
        }
    }
}

impl core::str::FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ModelKind::Linear),
            "forest" => Ok(ModelKind::Forest),
            "gbdt" => Ok(ModelKind::Gbdt),
            other => Err(Error::Config(alloc::format!("unknown model kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    /// Features tried per split; `None` means `ceil(sqrt(n_features))`.
    pub feature_subsample: Option<usize>,
    pub bootstrap: bool,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self { n_trees: 100, max_depth: 8, min_leaf: 5, feature_subsample: None, bootstrap: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GbdtConfig {
    pub n_rounds: usize,
    pub learning_rate: f64,
    pub max_depth: usize,
    pub min_leaf: usize,
}

impl Default for GbdtConfig {
    fn default() -> Self {
        Self { n_rounds: 200, learning_rate: 0.05, max_depth: 3, min_leaf: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearnerConfig {
    pub forest: ForestConfig,
    pub gbdt: GbdtConfig,
    pub seed: u64,
}

impl LearnerConfig {
    pub fn validate(&self) -> Result<()> {
        let f = &self.forest;
        let g = &self.gbdt;
        if f.n_trees == 0 || f.max_depth == 0 || f.min_leaf == 0 || f.feature_subsample == Some(0) {
            return Err(Error::Config("forest counts must be at least 1".into()));
        }
        if g.n_rounds == 0 || g.max_depth == 0 || g.min_leaf == 0 {
            return Err(Error::Config("gbdt counts must be at least 1".into()));
        }
        if !(g.learning_rate > 0.0 && g.learning_rate <= 1.0) {
            return Err(Error::Config(alloc::format!("gbdt.learning_rate must lie in (0,1], got {}", g.learning_rate)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelParams {
    Linear { intercept: f64, coefficients: Vec<f64> },
    Forest { config: ForestConfig, trees: Vec<Tree>, importance: Vec<f64> },
    Gbdt { config: GbdtConfig, init: f64, trees: Vec<Tree>, importance: Vec<f64>, train_loss: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionModel {
    pub model_fmt: u32,
    pub feature_names: Vec<String>,
    /// Predictions are clamped into this range when set.
    #[serde(default)]
    pub clamp: Option<(f64, f64)>,
    pub params: ModelParams,
}

impl RegressionModel {
    pub fn kind(&self) -> ModelKind {
        match self.params {
            ModelParams::Linear { .. } => ModelKind::Linear,
            ModelParams::Forest { .. } => ModelKind::Forest,
            ModelParams::Gbdt { .. } => ModelKind::Gbdt,
        }
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    fn raw_row(&self, row: &[f64]) -> f64 {
        match &self.params {
            ModelParams::Linear { intercept, coefficients } => intercept + crate::numeric::dot(coefficients, row),
            ModelParams::Forest { trees, .. } => trees.iter().map(|t| t.predict_row(row)).sum::<f64>() / trees.len() as f64,
            ModelParams::Gbdt { config, init, trees, .. } => {
                init + trees.iter().map(|t| config.learning_rate * t.predict_row(row)).sum::<f64>()
            }
        }
    }

    pub fn predict_row(&self, row: &[f64]) -> Result<f64> {
        if row.len() != self.n_features() {
            return Err(Error::Shape { expected: self.n_features(), got: row.len() });
        }
        let raw = self.raw_row(row);
        Ok(match self.clamp {
            Some((lo, hi)) => raw.clamp(lo, hi),
            None => raw,
        })
    }

    /// Predictions for a row-major matrix with `n_cols` columns.
    pub fn predict(&self, features: &[f64], n_cols: usize) -> Result<Vec<f64>> {
        if n_cols != self.n_features() {
            return Err(Error::Shape { expected: self.n_features(), got: n_cols });
        }
        if features.is_empty() {
            return Ok(Vec::new());
        }
        if features.len() % n_cols != 0 {
            return Err(Error::Shape { expected: n_cols, got: features.len() % n_cols });
        }
        features.chunks_exact(n_cols).map(|row| self.predict_row(row)).collect()
    }

    pub fn predict_dataset(&self, data: &Dataset) -> Result<Vec<f64>> {
        self.predict(data.features(), data.n_features())
    }

    /// Normalized squared-error reduction per feature (uniform if no split
    /// reduced the error).
    pub fn feature_importance(&self) -> Result<Vec<f64>> {
        let raw = match &self.params {
            ModelParams::Linear { .. } => return Err(Error::UnsupportedKind("linear")),
            ModelParams::Forest { importance, .. } | ModelParams::Gbdt { importance, .. } => importance,
        };
        let total: f64 = raw.iter().sum();
        if total > 0.0 {
            Ok(raw.iter().map(|v| v / total).collect())
        } else {
            Ok(vec![1.0 / raw.len() as f64; raw.len()])
        }
    }

    /// Per-round training mean squared error of a boosted model.
    pub fn train_loss(&self) -> Option<&[f64]> {
        match &self.params {
            ModelParams::Gbdt { train_loss, .. } => Some(train_loss),
            _ => None,
        }
    }
}

pub fn fit(kind: ModelKind, data: &Dataset, config: &LearnerConfig) -> Result<RegressionModel> {
    config.validate()?;
    if data.n_samples() == 0 {
        return Err(Error::domain("cannot fit on an empty dataset"));
    }
    let params = match kind {
        ModelKind::Linear => fit_linear(data)?,
        ModelKind::Forest => fit_forest(data, &config.forest, config.seed)?,
        ModelKind::Gbdt => fit_gbdt(data, &config.gbdt)?,
    };
    Ok(RegressionModel { model_fmt: MODEL_FMT, feature_names: data.feature_names.clone(), clamp: None, params })
}

/// Least squares with intercept. Columns are centred and scaled before the
/// normal equations are solved; a small ridge is added if they are singular.
fn fit_linear(data: &Dataset) -> Result<ModelParams> {
    let n = data.n_samples();
    let p = data.n_features();
    if n < 2 {
        return Err(Error::domain("linear regression needs at least two samples"));
    }
    let mut means = vec![0.0; p];
    let mut scales = vec![0.0; p];
    for j in 0..p {
        let col: Vec<f64> = (0..n).map(|i| data.row(i)[j]).collect();
        means[j] = crate::numeric::mean(&col);
        let sd = libm::sqrt(crate::numeric::variance(&col));
        scales[j] = if sd > 0.0 { sd } else { 1.0 };
    }
    let y_mean = crate::numeric::mean(data.targets());
    let mut design = Vec::with_capacity(n * p);
    for i in 0..n {
        let row = data.row(i);
        design.extend((0..p).map(|j| (row[j] - means[j]) / scales[j]));
    }
    let centred: Vec<f64> = data.targets().iter().map(|y| y - y_mean).collect();
    let beta = if p == 0 {
        Vec::new()
    } else {
        crate::numeric::least_squares(&design, n, p, &centred, 1e-8).ok_or(Error::SingularDesign)?
    };
    let coefficients: Vec<f64> = beta.iter().zip(&scales).map(|(b, s)| b / s).collect();
    let intercept = y_mean - coefficients.iter().zip(&means).map(|(c, m)| c * m).sum::<f64>();
    if !intercept.is_finite() || coefficients.iter().any(|c| !c.is_finite()) {
        return Err(Error::SingularDesign);
    }
    Ok(ModelParams::Linear { intercept, coefficients })
}

fn check_tree_rows(data: &Dataset, min_leaf: usize) -> Result<()> {
    if data.n_samples() < min_leaf {
        return Err(Error::domain(alloc::format!(
            "tree learners need at least min_leaf = {min_leaf} samples, got {}",
            data.n_samples()
        )));
    }
    Ok(())
}

fn fit_forest(data: &Dataset, cfg: &ForestConfig, seed: u64) -> Result<ModelParams> {
    use rand::Rng;
    check_tree_rows(data, cfg.min_leaf)?;
    let n = data.n_samples();
    let p = data.n_features();
    let max_features = Some(cfg.feature_subsample.unwrap_or_else(|| ceil_sqrt(p)));
    let params = TreeParams { max_depth: cfg.max_depth, min_leaf: cfg.min_leaf, max_features };
    let design = Design { x: data.features(), n_features: p };
    let sorted = tree::presort(&design);
    let mut importance = vec![0.0; p];
    let mut trees = Vec::with_capacity(cfg.n_trees);
    for t in 0..cfg.n_trees {
        let mut rng = rng::stream(seed, t as u64);
        let rows: Vec<usize> = if cfg.bootstrap { (0..n).map(|_| rng.random_range(0..n)).collect() } else { (0..n).collect() };
        trees.push(tree::grow(&design, &sorted, data.targets(), &rows, &params, &mut rng, &mut importance));
    }
    Ok(ModelParams::Forest { config: cfg.clone(), trees, importance })
}

fn ceil_sqrt(p: usize) -> usize {
    let mut k = 1;
    while k * k < p {
        k += 1;
    }
    k
}

fn fit_gbdt(data: &Dataset, cfg: &GbdtConfig) -> Result<ModelParams> {
    check_tree_rows(data, cfg.min_leaf)?;
    let n = data.n_samples();
    let p = data.n_features();
    let y = data.targets();
    let init = crate::numeric::mean(y);
    let mut fitted = vec![init; n];
    let mut residual = vec![0.0; n];
    let params = TreeParams { max_depth: cfg.max_depth, min_leaf: cfg.min_leaf, max_features: None };
    let design = Design { x: data.features(), n_features: p };
    let sorted = tree::presort(&design);
    let all: Vec<usize> = (0..n).collect();
    let mut importance = vec![0.0; p];
    let mut trees = Vec::with_capacity(cfg.n_rounds);
    let mut train_loss = Vec::with_capacity(cfg.n_rounds);
    // Boosting draws no randomness; the generator only satisfies the interface.
    let mut rng = rng::stream(0, 0);
    for _ in 0..cfg.n_rounds {
        for i in 0..n {
            residual[i] = y[i] - fitted[i];
        }
        let tree = tree::grow(&design, &sorted, &residual, &all, &params, &mut rng, &mut importance);
        for i in 0..n {
            fitted[i] += cfg.learning_rate * tree.predict_row(data.row(i));
        }
        trees.push(tree);
        train_loss.push(y.iter().zip(&fitted).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n as f64);
    }
    Ok(ModelParams::Gbdt { config: cfg.clone(), init, trees, importance, train_loss })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartialDependence {
    pub feature: usize,
    pub grid: Vec<f64>,
    pub curve: Vec<f64>,
}

/// Mean prediction over the rows of `data` with `feature` forced to each
/// grid value.
pub fn partial_dependence(model: &RegressionModel, data: &Dataset, feature: usize, grid: &[f64]) -> Result<PartialDependence> {
    if feature >= data.n_features() {
        return Err(Error::Index { index: feature, len: data.n_features() });
    }
    if grid.is_empty() {
        return Err(Error::domain("partial dependence grid is empty"));
    }
    if data.n_samples() == 0 {
        return Err(Error::domain("partial dependence needs at least one row"));
    }
    let mut row = vec![0.0; data.n_features()];
    let mut curve = Vec::with_capacity(grid.len());
    for &g in grid {
        let mut acc = 0.0;
        for i in 0..data.n_samples() {
            row.copy_from_slice(data.row(i));
            row[feature] = g;
            acc += model.predict_row(&row)?;
        }
        curve.push(acc / data.n_samples() as f64);
    }
    Ok(PartialDependence { feature, grid: grid.to_vec(), curve })
}

/// Evenly spaced grid over the observed range of one feature.
pub fn even_grid(data: &Dataset, feature: usize, points: usize) -> Result<Vec<f64>> {
    if feature >= data.n_features() {
        return Err(Error::Index { index: feature, len: data.n_features() });
    }
    let (lo, hi) = (0..data.n_samples())
        .map(|i| data.row(i)[feature])
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return Err(Error::domain("cannot build a grid over an empty dataset"));
    }
    let points = points.max(1);
    if points == 1 || lo == hi {
        return Ok(vec![lo]);
    }
    Ok((0..points).map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64).collect())
}

/// Regressor of placebo p-values on effect features. Predictions are clamped
/// to `[0, 1]`; the affectedness score of a cell is `1 - prediction`.
pub fn fit_affect_probability(kind: ModelKind, data: &Dataset, config: &LearnerConfig) -> Result<RegressionModel> {
    if data.targets().iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::domain("p-values must lie in [0,1]"));
    }
    let mut model = fit(kind, data, config)?;
    model.clamp = Some((0.0, 1.0));
    Ok(model)
}
