//! Command implementations: each CLI verb runs one pipeline stage against the
//! artifact directory, reading what earlier stages wrote and refusing to
//! proceed when a prerequisite is missing or its digest does not match the
//! manifest.

use crate::config::{parse_method, ExperimentConfig};
use crate::CliError;
use selexp::amortize::{amortizer_arch, train_amortized_diag, AmortizedExplainer};
use selexp::artifact::{digest_file, load_json, save_json, ModelFile, SCHEMA_VERSION};
use selexp::attribution::{
    exact_shap_unguarded, MaskingSpec, MethodSpec,
};
use selexp::cache::{ExplanationCache, ExplanationRecord};
use selexp::combine::{fit_bin_table, fit_selective, BinTable, FitData, SelectiveConfig, SelectiveExplainer};
use selexp::data::{split_dataset, Dataset, DatasetSplit, FeatureVector, SplitPart, TargetClass};
use selexp::eval::{
    coverage_curve_report, estimator_ablation_report, mse, perturbation_report,
    recourse_comparison_report, spearman, time_sharing_report, worst_case_report, BootstrapSpec,
    EvalReport, PerturbationReference,
};
use selexp::mlp::{fit_classifier, regression_mse, Activation, MlpSpec};
use selexp::model::CountedModel;
use selexp::rng::RngSpec;
use selexp::uncertainty::{
    coverage_for_budget, MetricFitSpec, MetricKind, SelectionPolicy, Threshold, UncertaintyMetric,
};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// Stable stream id for a pipeline stage, so stages draw independent
/// randomness from the one experiment seed.
fn stream(tag: &str) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.as_bytes() {
        hash ^= *b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Row ids, standardized features, and explanation targets of a split part.
type PartRows = (Vec<u64>, Vec<FeatureVector>, Vec<TargetClass>);

/// Advisory lock: no two commands may write the same artifact directory
/// concurrently.
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(dir: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir)
            .map_err(|e| CliError::config(format!("cannot create {}: {e}", dir.display())))?;
        let path = dir.join(".lock");
        match std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::config(
                format!(
                    "lock file {} exists; another command is writing this directory (delete it if stale)",
                    path.display()
                ),
            )),
            Err(e) => Err(CliError::config(format!("cannot take lock: {e}"))),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Everything a command needs: the parsed config with CLI overrides applied,
/// the raw dataset, and the deterministic split.
pub struct Workspace {
    pub config: ExperimentConfig,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub force: bool,
    pub dataset: Dataset,
    pub split: DatasetSplit,
}

impl Workspace {
    pub fn load(
        config_path: &Path,
        seed_override: Option<u64>,
        out_override: Option<PathBuf>,
        force: bool,
    ) -> Result<Self, CliError> {
        let config = ExperimentConfig::load(config_path)?;
        let out_dir = out_override.unwrap_or_else(|| config.output.dir.clone());
        let seed = seed_override.unwrap_or(config.split.seed);
        let dataset = Dataset::from_csv(&config.dataset.path, &config.dataset.label_column)
            .map_err(|e| CliError::config(format!("dataset {}: {e}", config.dataset.path.display())))?;
        let f = config.split.fractions;
        let split = split_dataset(dataset.len(), (f[0], f[1], f[2]), RngSpec::new(seed, stream("split")))?;
        Ok(Self {
            config,
            out_dir,
            seed,
            force,
            dataset,
            split,
        })
    }

    pub fn model_path(&self) -> PathBuf {
        self.out_dir.join("model.json")
    }

    pub fn amortizer_path(&self) -> PathBuf {
        self.out_dir.join("amortizer.json")
    }

    pub fn metric_path(&self) -> PathBuf {
        self.out_dir.join("metric.json")
    }

    pub fn policy_path(&self) -> PathBuf {
        self.out_dir.join("policy.json")
    }

    pub fn bins_path(&self) -> PathBuf {
        self.out_dir.join("bins.json")
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.out_dir.join("manifest.json")
    }

    pub fn cache_path(&self, method: &str, part: SplitPart) -> PathBuf {
        self.out_dir.join(format!("explanations-{method}-{part}.jsonl"))
    }

    fn load_model(&self) -> Result<ModelFile, CliError> {
        let path = self.model_path();
        if !path.exists() {
            return Err(CliError::missing(format!(
                "model file {} not found; run `selexp train-model` first",
                path.display()
            )));
        }
        ModelFile::load(&path).map_err(CliError::from)
    }

    fn load_cache(&self, method: &str, part: SplitPart) -> Result<ExplanationCache, CliError> {
        let path = self.cache_path(method, part);
        if !path.exists() {
            return Err(CliError::missing(format!(
                "explanation cache {} not found; run `selexp gen-explanations --method {method} --split {part}`",
                path.display()
            )));
        }
        ExplanationCache::read_jsonl(&path).map_err(CliError::from)
    }

    /// Global row ids, standardized rows, and per-row explanation targets for
    /// one split part. The target class defaults to the model's own
    /// prediction; the raw net is used so targets cost no audited inferences.
    fn part_rows(
        &self,
        model: &ModelFile,
        part: SplitPart,
    ) -> Result<PartRows, CliError> {
        let ids: Vec<u64> = self.split.part(part).iter().map(|&i| i as u64).collect();
        let mut features = Vec::with_capacity(ids.len());
        let mut targets = Vec::with_capacity(ids.len());
        for &i in self.split.part(part) {
            let (x, _) = self.dataset.row(i);
            let z = model.standardizer.apply(x)?;
            targets.push(TargetClass(selexp::model::argmax(
                &model.net.predict_proba(z.values()),
            )));
            features.push(z);
        }
        Ok((ids, features, targets))
    }

    /// Gold labels of one split part (used only where the protocol asks for
    /// them explicitly).
    fn part_labels(&self, part: SplitPart) -> Vec<TargetClass> {
        self.split
            .part(part)
            .iter()
            .map(|&i| self.dataset.labels[i])
            .collect()
    }

    fn model_arch(&self, d: usize, num_classes: usize) -> MlpSpec {
        let hidden = if self.config.model.hidden.is_empty() {
            vec![3 * d]
        } else {
            self.config.model.hidden.clone()
        };
        let mut widths = vec![d];
        widths.extend(hidden);
        widths.push(num_classes);
        MlpSpec {
            layer_widths: widths,
            activation: Activation::Tanh,
            epochs: self.config.model.epochs,
            batch_size: self.config.model.batch_size,
            learning_rate: self.config.model.learning_rate,
            seed: RngSpec::new(self.seed, stream("train-model")),
        }
    }

    fn amortizer_spec(&self, d: usize, num_classes: usize) -> MlpSpec {
        let mut arch = amortizer_arch(d, num_classes, RngSpec::new(self.seed, stream("amortizer")));
        if !self.config.amortizer.net.hidden.is_empty() {
            let mut widths = vec![d + num_classes];
            widths.extend(self.config.amortizer.net.hidden.clone());
            widths.push(d);
            arch.layer_widths = widths;
        }
        arch.epochs = self.config.amortizer.net.epochs;
        arch.batch_size = self.config.amortizer.net.batch_size;
        arch.learning_rate = self.config.amortizer.net.learning_rate;
        arch
    }

    fn metric_spec(&self, d: usize) -> MlpSpec {
        let hidden = if self.config.metric.net.hidden.is_empty() {
            vec![3 * d]
        } else {
            self.config.metric.net.hidden.clone()
        };
        let mut widths = vec![d];
        widths.extend(hidden);
        widths.push(1);
        MlpSpec {
            layer_widths: widths,
            activation: Activation::Tanh,
            epochs: self.config.metric.net.epochs,
            batch_size: self.config.metric.net.batch_size,
            learning_rate: self.config.metric.net.learning_rate,
            seed: RngSpec::new(self.seed, stream("metric")),
        }
    }

    /// Coverage from the config: explicit, or derived from the inference
    /// budget against the recourse method's cost.
    fn resolve_alpha(&self, d: usize) -> Result<f64, CliError> {
        if let Some(alpha) = self.config.selective.alpha {
            return Ok(alpha);
        }
        let budget = self.config.selective.n_budget.expect("validated");
        let n = self.config.mc_method()?.cost(d);
        Ok(coverage_for_budget(n, budget)?)
    }
}

// ---------------------------------------------------------------------------
// Artifact file shells around the library types.

#[derive(Debug, Serialize, Deserialize)]
pub struct AmortizerFile {
    pub schema_version: u32,
    pub explainer: AmortizedExplainer,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MetricFile {
    pub schema_version: u32,
    pub metric: UncertaintyMetric,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PolicyFile {
    pub schema_version: u32,
    pub metric_kind: MetricKind,
    pub alpha: f64,
    pub threshold: Threshold,
    pub metric_digest: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct BinsFile {
    pub schema_version: u32,
    pub bins: BinTable,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ArtifactRef {
    pub path: String,
    pub digest: String,
}

/// Ties one fitted selective explainer to the exact artifact bytes it was
/// built from. The `metadata` block is informational and excluded from
/// byte-identity comparisons.
#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub d: usize,
    pub num_classes: usize,
    pub mask: String,
    pub alpha: f64,
    pub num_bins: usize,
    pub mc_method: String,
    pub reference_method: String,
    pub metric_kind: MetricKind,
    pub artifacts: BTreeMap<String, ArtifactRef>,
    pub metadata: ManifestMeta,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ManifestMeta {
    pub generated_unix_ms: u64,
}

fn now_ms() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

fn check_schema(found: u32, what: &str) -> Result<(), CliError> {
    if found != SCHEMA_VERSION {
        return Err(CliError::missing(format!(
            "{what}: unsupported schema version {found} (supported {SCHEMA_VERSION})"
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Commands.

pub fn cmd_train_model(ws: &Workspace) -> Result<(), CliError> {
    let _lock = OutputLock::acquire(&ws.out_dir)?;
    let d = ws.dataset.dim();
    let num_classes = ws.dataset.num_classes;

    let standardizer = selexp::data::Standardizer::fit(&ws.dataset, &ws.split.train)?;
    let mut train_x = Vec::new();
    let mut train_y = Vec::new();
    for &i in &ws.split.train {
        let (x, y) = ws.dataset.row(i);
        train_x.push(standardizer.apply(x)?);
        train_y.push(y);
    }
    let spec = ws.model_arch(d, num_classes);
    let (net, diag) = fit_classifier(&spec, &train_x, &train_y)?;

    let mut file = ModelFile::new(net, standardizer, num_classes);
    // Held-out accuracy, computed before wrapping in the counter so audit
    // counts start at zero for explainers.
    let mut correct = 0usize;
    for &i in &ws.split.test {
        let (x, y) = ws.dataset.row(i);
        let z = file.standardizer.apply(x)?;
        let p = file.net.predict_proba(z.values());
        if selexp::model::argmax(&p) == y.index() {
            correct += 1;
        }
    }
    let accuracy = if ws.split.test.is_empty() {
        f64::NAN
    } else {
        correct as f64 / ws.split.test.len() as f64
    };
    if accuracy.is_finite() {
        file.test_accuracy = Some(accuracy);
    }
    file.save(&ws.model_path())?;
    outln!(
        "trained model: d={d} classes={num_classes} train_rows={} final_loss={:.6}",
        ws.split.train.len(),
        diag.epoch_losses.last().copied().unwrap_or(f64::NAN)
    );
    if accuracy.is_finite() {
        outln!("test accuracy: {accuracy:.4}");
    } else {
        outln!("test accuracy: n/a (empty test split)");
    }
    outln!("wrote {}", ws.model_path().display());
    Ok(())
}

pub fn cmd_gen_explanations(ws: &Workspace, method_name: &str, part: SplitPart) -> Result<(), CliError> {
    let method = parse_method(method_name)?;
    let _lock = OutputLock::acquire(&ws.out_dir)?;
    let model_file = ws.load_model()?;
    let model = model_file.counted_model();
    let d = model.input_dim();
    if let MethodSpec::Exact = method {
        if d > selexp::attribution::EXACT_GUARD && !ws.force {
            return Err(CliError::from(selexp::Error::ExactGuard {
                d,
                guard: selexp::attribution::EXACT_GUARD,
            }));
        }
    }
    let mask = MaskingSpec::zeros(d);
    let (ids, features, classes) = ws.part_rows(&model_file, part)?;

    let cache_path = ws.cache_path(&method.name(), part);
    let existing = if cache_path.exists() {
        ExplanationCache::read_jsonl(&cache_path)?
    } else {
        ExplanationCache::new()
    };

    let base = RngSpec::new(ws.seed, stream(&format!("explain/{}", method.name())));
    let mut records = Vec::new();
    let before = model.inference_count();
    let mut skipped = 0usize;
    for ((id, x), y) in ids.iter().zip(&features).zip(&classes) {
        if existing.get(*id, &method.name(), ws.seed).is_some() {
            skipped += 1;
            continue;
        }
        let rng = base.substream(*id);
        let att = match method {
            MethodSpec::Exact if ws.force => exact_shap_unguarded(&model, x, *y, &mask)?,
            _ => method.explain(&model, x, *y, &mask, rng)?,
        }
        .with_input_id(*id);
        records.push(ExplanationRecord::from_attribution(&att, &method.name(), ws.seed));
    }
    let written = ExplanationCache::append_jsonl_idempotent(&cache_path, &records)?;
    outln!(
        "method={} split={part} rows={} written={written} skipped={skipped}",
        method.name(),
        ids.len()
    );
    outln!("total inferences: {}", model.inference_count() - before);
    outln!("wrote {}", cache_path.display());
    Ok(())
}

pub fn cmd_train_amortized(ws: &Workspace) -> Result<(), CliError> {
    let _lock = OutputLock::acquire(&ws.out_dir)?;
    let model_file = ws.load_model()?;
    let d = model_file.net.input_dim();
    let num_classes = model_file.num_classes;
    let train_method = ws.config.train_method()?;
    let (ids, features, classes) = ws.part_rows(&model_file, SplitPart::Train)?;
    let cache = ws.load_cache(&train_method.name(), SplitPart::Train)?;
    let targets = cache.scores_for(&ids, &train_method.name())?;

    let arch = ws.amortizer_spec(d, num_classes);
    let (explainer, _) = train_amortized_diag(
        &features,
        &classes,
        num_classes,
        &targets,
        &train_method.name(),
        &arch,
        RngSpec::new(ws.seed, stream("amortizer")),
    )?;
    let inputs: Vec<Vec<f64>> = features
        .iter()
        .zip(&classes)
        .map(|(x, y)| {
            let mut v = x.values().to_vec();
            for c in 0..num_classes {
                v.push(if c == y.index() { 1.0 } else { 0.0 });
            }
            v
        })
        .collect();
    let train_mse = regression_mse(explainer.net(), &inputs, &targets);
    save_json(
        &ws.amortizer_path(),
        &AmortizerFile {
            schema_version: SCHEMA_VERSION,
            explainer,
        },
    )?;
    outln!(
        "trained amortizer on {} rows (targets {}); train mse {train_mse:.6}",
        ids.len(),
        train_method.name()
    );
    outln!("wrote {}", ws.amortizer_path().display());
    Ok(())
}

pub fn cmd_fit_selective(ws: &Workspace) -> Result<(), CliError> {
    let _lock = OutputLock::acquire(&ws.out_dir)?;
    let model_file = ws.load_model()?;
    let d = model_file.net.input_dim();
    let num_classes = model_file.num_classes;

    let amortizer_path = ws.amortizer_path();
    if !amortizer_path.exists() {
        return Err(CliError::missing(format!(
            "amortizer {} not found; run `selexp train-amortized` first",
            amortizer_path.display()
        )));
    }
    let amortizer_file: AmortizerFile = load_json(&amortizer_path)?;
    check_schema(amortizer_file.schema_version, "amortizer")?;

    let metric_target = ws.config.metric_target_method()?;
    let mc_method = ws.config.mc_method()?;
    let reference_method = ws.config.reference_method()?;

    let (train_ids, train_features, train_classes) = ws.part_rows(&model_file, SplitPart::Train)?;
    let (cal_ids, cal_features, cal_classes) = ws.part_rows(&model_file, SplitPart::Cal)?;
    let train_targets = ws
        .load_cache(&metric_target.name(), SplitPart::Train)?
        .scores_for(&train_ids, &metric_target.name())?;
    let cal_mc = ws
        .load_cache(&mc_method.name(), SplitPart::Cal)?
        .scores_for(&cal_ids, &mc_method.name())?;
    let cal_reference = ws
        .load_cache(&reference_method.name(), SplitPart::Cal)?
        .scores_for(&cal_ids, &reference_method.name())?;

    let alpha = ws.resolve_alpha(d)?;
    let metric_kind = ws.config.metric_kind()?;
    let amortizer_arch_spec = ws.amortizer_spec(d, num_classes);
    let metric_arch = ws.metric_spec(d);
    let metric_fit = match metric_kind {
        MetricKind::Deep => MetricFitSpec::Deep {
            members: ws.config.metric.ensemble_size,
            arch: &amortizer_arch_spec,
        },
        MetricKind::Learned => MetricFitSpec::Learned { arch: &metric_arch },
    };

    let data = FitData {
        train_features: &train_features,
        train_classes: &train_classes,
        train_mc_targets: &train_targets,
        cal_features: &cal_features,
        cal_classes: &cal_classes,
        cal_mc: &cal_mc,
        cal_reference: &cal_reference,
        num_classes,
    };
    let config = SelectiveConfig {
        alpha,
        num_bins: ws.config.selective.bins,
        min_bin_count: ws.config.selective.min_bin_count,
        mc_method,
    };
    let se = fit_selective(
        amortizer_file.explainer,
        &metric_fit,
        &data,
        &config,
        MaskingSpec::zeros(d),
        RngSpec::new(ws.seed, stream("fit-selective")),
    )?;

    save_json(
        &ws.metric_path(),
        &MetricFile {
            schema_version: SCHEMA_VERSION,
            metric: se.policy.metric.clone(),
        },
    )?;
    let metric_digest = digest_file(&ws.metric_path())?;
    save_json(
        &ws.policy_path(),
        &PolicyFile {
            schema_version: SCHEMA_VERSION,
            metric_kind,
            alpha,
            threshold: se.policy.threshold,
            metric_digest: metric_digest.clone(),
        },
    )?;
    save_json(
        &ws.bins_path(),
        &BinsFile {
            schema_version: SCHEMA_VERSION,
            bins: se.bins.clone(),
        },
    )?;

    let mut artifacts = BTreeMap::new();
    for (name, path) in [
        ("model", ws.model_path()),
        ("amortizer", ws.amortizer_path()),
        ("metric", ws.metric_path()),
        ("policy", ws.policy_path()),
        ("bins", ws.bins_path()),
    ] {
        artifacts.insert(
            name.to_string(),
            ArtifactRef {
                path: path
                    .file_name()
                    .map(|f| f.to_string_lossy().into_owned())
                    .unwrap_or_default(),
                digest: digest_file(&path)?,
            },
        );
    }
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        d,
        num_classes,
        mask: "zeros".into(),
        alpha,
        num_bins: ws.config.selective.bins,
        mc_method: mc_method.name(),
        reference_method: reference_method.name(),
        metric_kind,
        artifacts,
        metadata: ManifestMeta {
            generated_unix_ms: now_ms(),
        },
    };
    save_json(&ws.manifest_path(), &manifest)?;

    let threshold_str = match se.policy.threshold {
        Threshold::CoverNone => "cover-none".to_string(),
        Threshold::Value(t) => format!("{t:.6}"),
    };
    outln!(
        "fitted selective explainer: alpha={alpha:.4} threshold={threshold_str} bins={}",
        se.bins.num_bins()
    );
    outln!("lambdas: {:?}", se.bins.lambdas);
    outln!("bin counts: {:?}", se.bins.counts);
    outln!("wrote {}", ws.manifest_path().display());
    Ok(())
}

/// Load and digest-check every artifact the manifest references, then
/// reassemble the runtime selective explainer.
pub fn load_selective(
    ws: &Workspace,
    manifest_path: &Path,
) -> Result<(ModelFile, CountedModel, SelectiveExplainer, Manifest), CliError> {
    if !manifest_path.exists() {
        return Err(CliError::missing(format!(
            "manifest {} not found; run `selexp fit-selective` first",
            manifest_path.display()
        )));
    }
    let manifest: Manifest = load_json(manifest_path)?;
    check_schema(manifest.schema_version, "manifest")?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let mut paths = BTreeMap::new();
    for (name, art) in &manifest.artifacts {
        let path = dir.join(&art.path);
        if !path.exists() {
            return Err(CliError::missing(format!(
                "artifact `{name}` at {} not found",
                path.display()
            )));
        }
        let digest = digest_file(&path)?;
        if digest != art.digest {
            return Err(CliError::missing(format!(
                "artifact `{name}` at {}: digest {digest} does not match manifest digest {}",
                path.display(),
                art.digest
            )));
        }
        paths.insert(name.clone(), path);
    }
    let get = |name: &str| -> Result<&PathBuf, CliError> {
        paths
            .get(name)
            .ok_or_else(|| CliError::missing(format!("manifest lacks artifact `{name}`")))
    };

    let model_file = ModelFile::load(get("model")?)?;
    if model_file.net.input_dim() != manifest.d {
        return Err(CliError::config(format!(
            "manifest d={} does not match model input dim {}",
            manifest.d,
            model_file.net.input_dim()
        )));
    }
    if ws.dataset.dim() != manifest.d {
        return Err(CliError::config(format!(
            "dataset dimension {} does not match manifest d={}",
            ws.dataset.dim(),
            manifest.d
        )));
    }
    let amortizer_file: AmortizerFile = load_json(get("amortizer")?)?;
    check_schema(amortizer_file.schema_version, "amortizer")?;
    let metric_file: MetricFile = load_json(get("metric")?)?;
    check_schema(metric_file.schema_version, "metric")?;
    let policy_file: PolicyFile = load_json(get("policy")?)?;
    check_schema(policy_file.schema_version, "policy")?;
    let bins_file: BinsFile = load_json(get("bins")?)?;
    check_schema(bins_file.schema_version, "bins")?;

    let metric_digest = digest_file(get("metric")?)?;
    if policy_file.metric_digest != metric_digest {
        return Err(CliError::missing(format!(
            "policy references metric digest {} but metric file has {metric_digest}",
            policy_file.metric_digest
        )));
    }

    let (cal_ids, cal_features, cal_classes) = ws.part_rows(&model_file, SplitPart::Cal)?;
    let _ = cal_ids;
    let cal_scores = metric_file.metric.score_batch(&cal_features, &cal_classes)?;

    let se = SelectiveExplainer {
        amortizer: amortizer_file.explainer,
        mc_method: parse_method(&manifest.mc_method)?,
        policy: SelectionPolicy {
            metric: metric_file.metric,
            threshold: policy_file.threshold,
            alpha: policy_file.alpha,
        },
        bins: bins_file.bins,
        mask: MaskingSpec::zeros(manifest.d),
        cal_scores,
    };
    let model = model_file.counted_model();
    Ok((model_file, model, se, manifest))
}

#[derive(Debug, Serialize, Deserialize)]
struct AttributionRow {
    input_id: u64,
    target: usize,
    covered: bool,
    scores: Vec<f64>,
    inference_cost: u64,
    seed: u64,
}

pub fn cmd_explain(ws: &Workspace, part: SplitPart, manifest_path: &Path) -> Result<(), CliError> {
    let _lock = OutputLock::acquire(&ws.out_dir)?;
    let (model_file, model, se, _manifest) = load_selective(ws, manifest_path)?;
    let (ids, features, classes) = ws.part_rows(&model_file, part)?;
    let base = RngSpec::new(ws.seed, stream("selective"));

    let mut lines = String::new();
    let mut covered_count = 0usize;
    let mut total_cost = 0u64;
    for ((id, x), y) in ids.iter().zip(&features).zip(&classes) {
        let (att, covered) = se.explain_with_flag(&model, x, *y, base.substream(*id))?;
        covered_count += covered as usize;
        total_cost += att.inference_cost;
        let row = AttributionRow {
            input_id: *id,
            target: y.index(),
            covered,
            scores: att.scores,
            inference_cost: att.inference_cost,
            seed: ws.seed,
        };
        lines.push_str(&serde_json::to_string(&row).map_err(selexp::Error::from)?);
        lines.push('\n');
    }
    let out_path = ws.out_dir.join(format!("attributions-{part}.jsonl"));
    std::fs::write(&out_path, lines).map_err(selexp::Error::from)?;

    let n = ids.len().max(1);
    outln!(
        "explained {} rows: covered fraction {:.4}, mean black-box cost {:.4}",
        ids.len(),
        covered_count as f64 / n as f64,
        total_cost as f64 / n as f64
    );
    outln!(
        "audit: model counter delta {} equals summed costs {}",
        model.inference_count(),
        total_cost
    );
    outln!("wrote {}", out_path.display());
    Ok(())
}

pub const PROTOCOLS: [&str; 6] = [
    "coverage",
    "recourse",
    "quantiles",
    "perturbation",
    "timeshare",
    "ablation",
];

pub fn cmd_evaluate(ws: &Workspace, protocol: &str, manifest_path: &Path) -> Result<(), CliError> {
    if !PROTOCOLS.contains(&protocol) {
        return Err(CliError::config(format!(
            "unknown protocol `{protocol}`; valid protocols: {}",
            PROTOCOLS.join(", ")
        )));
    }
    let _lock = OutputLock::acquire(&ws.out_dir)?;
    let (model_file, model, se, manifest) = load_selective(ws, manifest_path)?;
    let (test_ids, test_features, test_classes) = ws.part_rows(&model_file, SplitPart::Test)?;

    let reference_method = ws.config.eval_reference_method()?;
    let reference = ws
        .load_cache(&reference_method.name(), SplitPart::Test)?
        .scores_for(&test_ids, &reference_method.name())?;

    let bootstrap = BootstrapSpec {
        resamples: ws.config.evaluate.bootstrap_resamples,
        seed: RngSpec::new(ws.seed, stream("bootstrap")),
    };
    let eval_rng = RngSpec::new(ws.seed, stream(&format!("eval/{protocol}")));

    // Amortized per-point quality against the reference, shared by several
    // protocols.
    let amor_scores: Vec<Vec<f64>> = test_features
        .iter()
        .zip(&test_classes)
        .map(|(x, y)| se.amortizer.predict_scores(x, *y))
        .collect::<selexp::Result<_>>()?;
    let amor_mse: Vec<f64> = amor_scores
        .iter()
        .zip(&reference)
        .map(|(a, r)| mse(a, r))
        .collect::<selexp::Result<_>>()?;
    let amor_spearman: Vec<Option<f64>> = amor_scores
        .iter()
        .zip(&reference)
        .map(|(a, r)| spearman(a, r))
        .collect::<selexp::Result<_>>()?;

    let report: EvalReport = match protocol {
        "coverage" => {
            let scores = se
                .policy
                .metric
                .score_batch(&test_features, &test_classes)?;
            coverage_curve_report(
                &format!("{:?}", manifest.metric_kind).to_lowercase(),
                &scores,
                &amor_mse,
                &amor_spearman,
                &ws.config.evaluate.alpha_grid,
                &bootstrap,
            )?
        }
        "recourse" => recourse_comparison_report(
            &se,
            &model,
            &test_features,
            &test_classes,
            &reference,
            &ws.config.evaluate.recourse_grid,
            eval_rng,
            &bootstrap,
        )?,
        "quantiles" => {
            let mut methods = vec![("amortized".to_string(), amor_mse.clone(), amor_spearman.clone())];
            for fraction in &ws.config.evaluate.quantile_recourse_fractions {
                let se_alpha = se.with_alpha(1.0 - fraction)?;
                let mut errs = Vec::with_capacity(test_features.len());
                let mut sps = Vec::with_capacity(test_features.len());
                for ((id, x), (y, r)) in test_ids
                    .iter()
                    .zip(&test_features)
                    .zip(test_classes.iter().zip(&reference))
                {
                    let att = se_alpha.explain_selective(&model, x, *y, eval_rng.substream(*id))?;
                    errs.push(mse(&att.scores, r)?);
                    sps.push(spearman(&att.scores, r)?);
                }
                methods.push((format!("selective-r{fraction:.2}"), errs, sps));
            }
            worst_case_report(&methods, &ws.config.evaluate.quantile_grid, &bootstrap)?
        }
        "perturbation" => {
            let selective_scores: Vec<Vec<f64>> = test_ids
                .iter()
                .zip(&test_features)
                .zip(&test_classes)
                .map(|((id, x), y)| {
                    Ok(se
                        .explain_selective(&model, x, *y, eval_rng.substream(*id))?
                        .scores)
                })
                .collect::<selexp::Result<_>>()?;
            let mut random_rng = eval_rng.substream(u64::MAX).rng();
            let random_scores: Vec<Vec<f64>> = test_features
                .iter()
                .map(|x| {
                    (0..x.dim())
                        .map(|_| selexp::rng::standard_normal(&mut random_rng))
                        .collect()
                })
                .collect();
            let methods = vec![
                ("amortized".to_string(), amor_scores.clone()),
                ("selective".to_string(), selective_scores),
                (reference_method.name(), reference.clone()),
                ("random".to_string(), random_scores),
            ];
            let gold_labels = ws.part_labels(SplitPart::Test);
            perturbation_report(
                &model,
                &methods,
                &test_features,
                &gold_labels,
                &se.mask,
                &ws.config.evaluate.removal_grid,
                if ws.config.evaluate.perturbation_gold_labels {
                    PerturbationReference::GoldLabels
                } else {
                    PerturbationReference::OriginalPredictions
                },
                &bootstrap,
            )?
        }
        "timeshare" => {
            let d = manifest.d;
            let mut ladder_costs = Vec::new();
            let mut ladder_scores = Vec::new();
            for &m in &ws.config.evaluate.svs_ladder {
                let method = MethodSpec::Svs { permutations: m };
                let scores = ws
                    .load_cache(&method.name(), SplitPart::Test)?
                    .scores_for(&test_ids, &method.name())?;
                ladder_costs.push(method.cost(d));
                ladder_scores.push(scores);
            }
            time_sharing_report(
                &se,
                &model,
                &test_features,
                &test_classes,
                &reference,
                &ladder_costs,
                &ladder_scores,
                eval_rng,
                &bootstrap,
            )?
        }
        "ablation" => {
            let (cal_ids, cal_features, cal_classes) = ws.part_rows(&model_file, SplitPart::Cal)?;
            let cal_reference = ws
                .load_cache(&manifest.reference_method, SplitPart::Cal)?
                .scores_for(&cal_ids, &manifest.reference_method)?;
            let amor_on_cal: Vec<Vec<f64>> = cal_features
                .iter()
                .zip(&cal_classes)
                .map(|(x, y)| se.amortizer.predict_scores(x, *y))
                .collect::<selexp::Result<_>>()?;
            let mut variants = Vec::new();
            for name in &ws.config.evaluate.ablation_methods {
                let method = parse_method(name)?;
                let cal_mc = ws
                    .load_cache(&method.name(), SplitPart::Cal)?
                    .scores_for(&cal_ids, &method.name())?;
                let bins = fit_bin_table(
                    &se.cal_scores,
                    &amor_on_cal,
                    &cal_mc,
                    &cal_reference,
                    ws.config.selective.bins,
                    ws.config.selective.min_bin_count,
                )?;
                let mut variant = se.clone();
                variant.mc_method = method;
                variant.bins = bins;
                variants.push((method.name(), variant));
            }
            estimator_ablation_report(
                &variants,
                &model,
                &test_features,
                &test_classes,
                &reference,
                &ws.config.evaluate.recourse_grid,
                eval_rng,
                &bootstrap,
            )?
        }
        _ => unreachable!("protocol validated above"),
    };

    let json_path = ws.out_dir.join(format!("report-{protocol}.json"));
    let csv_path = ws.out_dir.join(format!("report-{protocol}.csv"));
    report.write_json(&json_path)?;
    report.write_csv(&csv_path)?;
    outln!("protocol {protocol}: {} curves", report.curves.len());
    outln!("wrote {}", json_path.display());
    outln!("wrote {}", csv_path.display());
    Ok(())
}
