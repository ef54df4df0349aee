//! Few-shot one-class domain adaptation protocol: error rates, target
//! pools, per-cell training and evaluation, and the cross-domain grid.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, Variant};
use crate::datagen::{build_corpus, Class, Corpus, ManifestRow, Split, GENERATOR_FILE, MANIFEST_FILE};
use crate::error::{Error, Result};
use crate::netcore::{train, EpochLog, LabeledImage, Model, TargetPool, TrainConfig};
use crate::rng::{sha256_hex, substream};
use crate::tensorcore::Checkpoint;

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const CACHE_ENV: &str = "FREQSHIFT_CACHE";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub n_attack: usize,
    pub n_bonafide: usize,
    pub attack_errors: usize,
    pub bonafide_errors: usize,
}

/// Error rates at a fixed threshold. A rate whose class is absent is `None`
/// (serialized as `null`), and so is the HTER then.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub apcer: Option<f64>,
    pub bpcer: Option<f64>,
    pub hter: Option<f64>,
    pub counts: Counts,
    pub threshold: f64,
}

/// Scores are attack probabilities; `score >= threshold` predicts attack,
/// so ties count as attack.
pub fn compute_metrics(scores: &[f64], labels: &[Class], threshold: f64) -> Result<EvalReport> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if !threshold.is_finite() || scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("scores and threshold must not be NaN".into()));
    }
    let mut c = Counts {
        n_attack: 0,
        n_bonafide: 0,
        attack_errors: 0,
        bonafide_errors: 0,
    };
    for (&s, &l) in scores.iter().zip(labels) {
        let says_attack = s >= threshold;
        match l {
            Class::Attack => {
                c.n_attack += 1;
                c.attack_errors += usize::from(!says_attack);
            }
            Class::Bonafide => {
                c.n_bonafide += 1;
                c.bonafide_errors += usize::from(says_attack);
            }
        }
    }
    let rate = |e: usize, n: usize| (n > 0).then(|| e as f64 / n as f64);
    let apcer = rate(c.attack_errors, c.n_attack);
    let bpcer = rate(c.bonafide_errors, c.n_bonafide);
    let hter = apcer.zip(bpcer).map(|(a, b)| (a + b) / 2.0);
    Ok(EvalReport {
        apcer,
        bpcer,
        hter,
        counts: c,
        threshold,
    })
}

/// The persisted few-shot target pool.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolManifest {
    pub domain: String,
    pub n_t: usize,
    pub seed: u64,
    /// Corpus-relative image paths.
    pub paths: Vec<String>,
}

/// Seeded uniform draw of `n_t` bonafide images from the TRAIN partition
/// of `domain`.
pub fn build_foda_pool(corpus: &Corpus, domain: &str, n_t: usize, seed: u64) -> Result<PoolManifest> {
    let candidates: Vec<&ManifestRow> = corpus
        .partition(domain, Split::Train)
        .into_iter()
        .filter(|r| r.class().ok() == Some(Class::Bonafide))
        .collect();
    if n_t == 0 || candidates.len() < n_t {
        return Err(Error::InvalidArgument(format!(
            "domain {domain} has {} bonafide training images, pool needs {n_t}",
            candidates.len()
        )));
    }
    let mut rng = substream(seed, &format!("pool/{domain}"));
    let mut paths: Vec<String> = candidates
        .choose_multiple(&mut rng, n_t)
        .map(|r| r.path.clone())
        .collect();
    paths.sort();
    Ok(PoolManifest {
        domain: domain.into(),
        n_t,
        seed,
        paths,
    })
}

impl PoolManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn load_images(&self, corpus: &Corpus) -> Result<TargetPool> {
        let members = self
            .paths
            .iter()
            .map(|p| {
                let row = corpus
                    .rows
                    .iter()
                    .find(|r| &r.path == p)
                    .ok_or_else(|| Error::InvalidInput(format!("pool image {p} not in corpus manifest")))?;
                Ok((p.clone(), corpus.load(row)?))
            })
            .collect::<Result<_>>()?;
        Ok(TargetPool { members })
    }
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(v).expect("serializable") + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn labeled(corpus: &Corpus, rows: &[&ManifestRow]) -> Result<Vec<LabeledImage>> {
    rows.iter()
        .map(|r| {
            Ok(LabeledImage {
                id: r.path.clone(),
                image: corpus.load(r)?,
                label: r.class()?.label(),
            })
        })
        .collect()
}

/// Which images touched a trained checkpoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lineage {
    pub train_domain: String,
    pub target_domain: Option<String>,
    /// Every training-partition image (training and validation).
    pub training_images: Vec<String>,
    /// Pool members drawn into at least one mixed batch.
    pub targets_used: Vec<String>,
    pub pool: Option<PoolManifest>,
}

/// One training run: what to train and on which data.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainJob {
    pub variant: Variant,
    pub train_domain: String,
    /// Target domain for mixing variants; ignored (and absent) otherwise.
    pub target_domain: Option<String>,
    pub seed: u64,
}

#[derive(Serialize)]
struct CacheKey<'a> {
    corpus: &'a str,
    model: &'a crate::netcore::ModelConfig,
    train: &'a TrainConfig,
    train_domain: &'a str,
    pool: Option<(&'a str, usize, u64)>,
}

impl TrainJob {
    pub fn new(variant: Variant, train_domain: &str, target_domain: Option<&str>, seed: u64) -> Self {
        Self {
            variant,
            train_domain: train_domain.into(),
            target_domain: if variant.uses_fmm() {
                target_domain.map(String::from)
            } else {
                None
            },
            seed,
        }
    }

    /// SHA-256 of the canonical JSON of everything that determines the
    /// trained weights. `corpus_id` identifies the data.
    pub fn cache_key(&self, cfg: &RunConfig, corpus_id: &str) -> String {
        let model = cfg.model_for(self.variant);
        let train = cfg.train_for(self.variant, self.seed);
        let key = CacheKey {
            corpus: corpus_id,
            model: &model,
            train: &train,
            train_domain: &self.train_domain,
            pool: self
                .target_domain
                .as_deref()
                .map(|d| (d, cfg.grid.n_target, cfg.grid.pool_seed)),
        };
        sha256_hex(serde_json::to_string(&key).expect("key serializes").as_bytes())
    }
}

/// Identity of a corpus: hash of its manifest and generator record.
pub fn corpus_id(corpus: &Corpus) -> Result<String> {
    let mut bytes = Vec::new();
    for f in [MANIFEST_FILE, GENERATOR_FILE] {
        let p = corpus.root.join(f);
        bytes.extend(fs::read(&p).map_err(|e| Error::io(&p, e))?);
    }
    Ok(sha256_hex(&bytes))
}

pub const FINAL_CKPT: &str = "final.ckpt";
pub const BEST_CKPT: &str = "best.ckpt";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const LINEAGE_FILE: &str = "lineage.json";
pub const POOL_FILE: &str = "pool.json";
const DONE_FILE: &str = "DONE";
/// Wall-clock training time of a cached job (not part of its outputs).
pub const TIMING_FILE: &str = "timing.json";

fn write_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
    for row in log {
        w.serialize(row).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Trains one job on the corpus and writes `final.ckpt`, `best.ckpt`,
/// `train_log.csv`, `lineage.json` (and `pool.json` for mixing variants)
/// into `out`.
pub fn train_job(cfg: &RunConfig, corpus: &Corpus, job: &TrainJob, out: &Path) -> Result<Lineage> {
    cfg.validate()?;
    if !corpus.domains().contains(&job.train_domain) {
        return Err(Error::InvalidArgument(format!(
            "domain {} not in corpus",
            job.train_domain
        )));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let rows = corpus.partition(&job.train_domain, Split::Train);
    let data = labeled(corpus, &rows)?;
    let mut tcfg = cfg.train_for(job.variant, job.seed);
    let pool_manifest = match (&job.target_domain, job.variant.uses_fmm()) {
        (Some(t), true) => {
            if *t == job.train_domain {
                return Err(Error::InvalidArgument("target domain equals training domain".into()));
            }
            let pool = build_foda_pool(corpus, t, cfg.grid.n_target, cfg.grid.pool_seed)?;
            let pool_path = out.join(POOL_FILE);
            pool.save(&pool_path)?;
            tcfg.target_pool_path = Some(PathBuf::from(POOL_FILE));
            Some(pool)
        }
        (None, true) => {
            return Err(Error::InvalidArgument(format!(
                "variant {} needs a target domain",
                job.variant.as_str()
            )))
        }
        _ => None,
    };
    let pool = pool_manifest.as_ref().map(|p| p.load_images(corpus)).transpose()?;
    let model = Model::new(cfg.model_for(job.variant), job.seed)?;
    let outcome = train(model, &data, pool.as_ref(), &tcfg)?;

    let meta = serde_json::json!({
        "variant": job.variant,
        "train_domain": job.train_domain,
        "target_domain": job.target_domain,
        "train": tcfg,
        "pipeline_hash": outcome.pipeline_hash,
    });
    let mut best_meta = meta.clone();
    best_meta["epoch"] = outcome.best_epoch.into();
    let mut final_meta = meta;
    final_meta["epoch"] = outcome.log.len().into();
    outcome
        .final_model
        .to_checkpoint(job.seed, outcome.steps, final_meta)
        .save(out.join(FINAL_CKPT))?;
    outcome
        .best_model
        .to_checkpoint(job.seed, outcome.steps, best_meta)
        .save(out.join(BEST_CKPT))?;
    write_log(&out.join(TRAIN_LOG), &outcome.log)?;
    let lineage = Lineage {
        train_domain: job.train_domain.clone(),
        target_domain: job.target_domain.clone(),
        training_images: rows.iter().map(|r| r.path.clone()).collect(),
        targets_used: outcome.targets_used.into_iter().collect(),
        pool: pool_manifest,
    };
    write_json(&out.join(LINEAGE_FILE), &lineage)?;
    Ok(lineage)
}

/// Scores every TEST-partition image of `domain`.
pub fn evaluate(model: &Model, corpus: &Corpus, domain: &str, threshold: f64) -> Result<EvalReport> {
    let rows = corpus.partition(domain, Split::Test);
    if rows.is_empty() {
        return Err(Error::InvalidArgument(format!("no test images for domain {domain:?}")));
    }
    let mut scores = Vec::with_capacity(rows.len());
    let mut labels = Vec::with_capacity(rows.len());
    for chunk in rows.chunks(64) {
        let images = chunk.iter().map(|r| corpus.load(r)).collect::<Result<Vec<_>>>()?;
        scores.extend(model.predict(&images)?);
        for r in chunk {
            labels.push(r.class()?);
        }
    }
    compute_metrics(&scores, &labels, threshold)
}

pub fn evaluate_checkpoint(path: &Path, corpus: &Corpus, domain: &str, threshold: f64) -> Result<EvalReport> {
    let model = Model::from_checkpoint(&Checkpoint::load(path)?)?;
    evaluate(&model, corpus, domain, threshold)
}

/// Result of the few-shot audit for one checkpoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineageAudit {
    pub target_domain: Option<String>,
    /// Distinct target-domain images among everything that influenced the
    /// weights.
    pub target_images: BTreeSet<String>,
    pub limit: usize,
    pub ok: bool,
}

/// Counts distinct images of the target domain that influenced a
/// checkpoint, resolving every path against the corpus manifest.
pub fn audit_lineage(lineage: &Lineage, corpus: &Corpus, limit: usize) -> Result<LineageAudit> {
    let by_path: BTreeMap<&str, &ManifestRow> = corpus.rows.iter().map(|r| (r.path.as_str(), r)).collect();
    let mut target_images = BTreeSet::new();
    let target = lineage.target_domain.as_deref();
    let mut seen: Vec<&String> = lineage.training_images.iter().chain(&lineage.targets_used).collect();
    if let Some(p) = &lineage.pool {
        seen.extend(&p.paths);
    }
    for path in seen {
        let row = by_path
            .get(path.as_str())
            .ok_or_else(|| Error::InvalidInput(format!("lineage image {path} not in manifest")))?;
        if Some(row.domain.as_str()) == target {
            target_images.insert(path.clone());
        }
    }
    let ok = target_images.len() <= limit;
    Ok(LineageAudit {
        target_domain: lineage.target_domain.clone(),
        target_images,
        limit,
        ok,
    })
}

/// One evaluation of the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub variant: Variant,
    pub train_domain: String,
    pub test_domain: String,
    pub seed: u64,
}

impl Cell {
    pub fn is_cross(&self) -> bool {
        self.train_domain != self.test_domain
    }

    pub fn job(&self) -> TrainJob {
        TrainJob::new(self.variant, &self.train_domain, Some(&self.test_domain), self.seed)
    }

    pub fn report_name(&self) -> String {
        format!(
            "{}_{}_to_{}_s{}.json",
            self.variant.as_str(),
            self.train_domain,
            self.test_domain,
            self.seed
        )
    }
}

/// Every cell of the experiment: cross-domain cells for all variants and,
/// when enabled, intra-domain cells for the non-mixing variants.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentGrid {
    pub domains: Vec<String>,
    pub cells: Vec<Cell>,
}

impl ExperimentGrid {
    pub fn from_config(cfg: &RunConfig) -> Self {
        let domains: Vec<String> = cfg.domains.iter().map(|d| d.name.clone()).collect();
        let mut cells = Vec::new();
        for &variant in &cfg.grid.variants {
            for tr in &domains {
                for te in &domains {
                    let intra = tr == te;
                    if intra && (!cfg.grid.intra || variant.uses_fmm()) {
                        continue;
                    }
                    for &seed in &cfg.grid.seeds {
                        cells.push(Cell {
                            variant,
                            train_domain: tr.clone(),
                            test_domain: te.clone(),
                            seed,
                        });
                    }
                }
            }
        }
        Self { domains, cells }
    }

    pub fn cross_pairs(&self) -> Vec<(String, String)> {
        let mut pairs = Vec::new();
        for a in &self.domains {
            for b in &self.domains {
                if a != b {
                    pairs.push((a.clone(), b.clone()));
                }
            }
        }
        pairs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub cell: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridOutcome {
    /// Seed-averaged cross-domain HTER in percent, per variant and pair
    /// (`None` when a cell failed or a rate was undefined).
    pub cross: BTreeMap<Variant, Vec<Option<f64>>>,
    pub pairs: Vec<(String, String)>,
    /// Seed-averaged intra-domain HTER in percent per variant and domain.
    pub intra: BTreeMap<Variant, Vec<Option<f64>>>,
    pub domains: Vec<String>,
    pub reports: BTreeMap<String, EvalReport>,
    pub audits: Vec<LineageAudit>,
    pub failures: Vec<CellFailure>,
    /// Training runs actually executed (not served from the cache).
    pub trained: usize,
    /// Recorded training time per distinct job, when available.
    pub train_seconds: BTreeMap<String, f64>,
}

impl GridOutcome {
    pub fn cross_average(&self, v: Variant) -> Option<f64> {
        mean_opt(self.cross.get(&v)?)
    }

    pub fn intra_hter(&self, v: Variant) -> Option<&[Option<f64>]> {
        self.intra.get(&v).map(Vec::as_slice)
    }
}

fn mean_opt(xs: &[Option<f64>]) -> Option<f64> {
    let v: Option<Vec<f64>> = xs.iter().copied().collect();
    let v = v?;
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Resolves the cache directory: `FREQSHIFT_CACHE` if set, else
/// `<out>/cache`.
pub fn cache_dir(out: &Path) -> PathBuf {
    match std::env::var_os(CACHE_ENV) {
        Some(p) if !p.is_empty() => PathBuf::from(p),
        _ => out.join("cache"),
    }
}

/// Opens the corpus under `dir`, generating it first when absent. An
/// existing corpus must have been generated from the same settings.
pub fn ensure_corpus(cfg: &RunConfig, dir: &Path) -> Result<Corpus> {
    let manifest = dir.join(MANIFEST_FILE);
    if !manifest.exists() {
        build_corpus(&cfg.domains, &cfg.corpus, &cfg.content, dir, false)?;
    } else {
        let want = serde_json::json!({
            "corpus": cfg.corpus,
            "content": cfg.content,
            "domains": cfg.domains,
        });
        let have: serde_json::Value = read_json(&dir.join(GENERATOR_FILE))?;
        if have != want {
            return Err(Error::InvalidInput(format!(
                "{} was generated with different settings",
                dir.display()
            )));
        }
    }
    Corpus::open(dir)
}

fn run_cached(cfg: &RunConfig, corpus: &Corpus, cid: &str, job: &TrainJob, cache: &Path) -> Result<(PathBuf, bool)> {
    let dir = cache.join(job.cache_key(cfg, cid));
    if dir.join(DONE_FILE).exists() {
        return Ok((dir, false));
    }
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let start = Instant::now();
    train_job(cfg, corpus, job, &dir)?;
    write_json(&dir.join("job.json"), job)?;
    write_json(
        &dir.join(TIMING_FILE),
        &serde_json::json!({ "train_seconds": start.elapsed().as_secs_f64() }),
    )?;
    fs::write(dir.join(DONE_FILE), b"").map_err(|e| Error::io(&dir, e))?;
    Ok((dir, true))
}

/// Trains (or fetches from cache) every distinct job of the grid on `jobs`
/// worker threads, evaluates every cell, and writes `results.csv`,
/// `intra_results.csv`, per-cell reports under `reports/`, the lineage
/// audit and any failures under `out`.
pub fn run_grid(cfg: &RunConfig, corpus: &Corpus, out: &Path, jobs: usize) -> Result<GridOutcome> {
    cfg.validate()?;
    let grid = ExperimentGrid::from_config(cfg);
    let cid = corpus_id(corpus)?;
    let cache = cache_dir(out);
    let reports_dir = out.join("reports");
    fs::create_dir_all(&reports_dir).map_err(|e| Error::io(&reports_dir, e))?;
    fs::create_dir_all(&cache).map_err(|e| Error::io(&cache, e))?;

    let mut distinct: BTreeMap<String, TrainJob> = BTreeMap::new();
    for c in &grid.cells {
        let job = c.job();
        distinct.entry(job.cache_key(cfg, &cid)).or_insert(job);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    let work: Vec<(String, TrainJob)> = distinct.into_iter().collect();
    let trained: Vec<(String, Result<(PathBuf, bool)>)> = pool.install(|| {
        work.par_iter()
            .map(|(k, job)| (k.clone(), run_cached(cfg, corpus, &cid, job, &cache)))
            .collect()
    });
    let mut dirs: BTreeMap<String, std::result::Result<PathBuf, String>> = BTreeMap::new();
    let mut n_trained = 0;
    for (k, r) in trained {
        dirs.insert(
            k,
            r.map(|(d, fresh)| {
                n_trained += usize::from(fresh);
                d
            })
            .map_err(|e| e.to_string()),
        );
    }

    let evals: Vec<(Cell, std::result::Result<EvalReport, String>)> = pool.install(|| {
        grid.cells
            .par_iter()
            .map(|c| {
                let key = c.job().cache_key(cfg, &cid);
                let r = match &dirs[&key] {
                    Ok(dir) => evaluate_checkpoint(&dir.join(BEST_CKPT), corpus, &c.test_domain, cfg.grid.threshold)
                        .map_err(|e| e.to_string()),
                    Err(e) => Err(format!("training failed: {e}")),
                };
                (c.clone(), r)
            })
            .collect()
    });

    let mut reports = BTreeMap::new();
    let mut failures = Vec::new();
    for (c, r) in evals {
        match r {
            Ok(rep) => {
                write_json(&reports_dir.join(c.report_name()), &rep)?;
                reports.insert(c.report_name(), rep);
            }
            Err(e) => failures.push(CellFailure {
                cell: c.report_name(),
                error: e,
            }),
        }
    }

    let mut audits = Vec::new();
    let mut train_seconds = BTreeMap::new();
    for (key, dir) in &dirs {
        let Ok(dir) = dir else { continue };
        if let Ok(t) = read_json::<serde_json::Value>(&dir.join(TIMING_FILE)) {
            if let Some(s) = t["train_seconds"].as_f64() {
                train_seconds.insert(key.clone(), s);
            }
        }
        let lineage: Lineage = read_json(&dir.join(LINEAGE_FILE))?;
        if lineage.target_domain.is_some() {
            let audit = audit_lineage(&lineage, corpus, cfg.grid.n_target)?;
            if !audit.ok {
                failures.push(CellFailure {
                    cell: key.clone(),
                    error: format!("{} target images influenced the checkpoint", audit.target_images.len()),
                });
            }
            audits.push(audit);
        }
    }
    write_json(&out.join("lineage_audit.json"), &audits)?;

    let hter_of = |v: Variant, tr: &str, te: &str| -> Option<f64> {
        let xs: Vec<Option<f64>> = cfg
            .grid
            .seeds
            .iter()
            .map(|&seed| {
                let c = Cell {
                    variant: v,
                    train_domain: tr.into(),
                    test_domain: te.into(),
                    seed,
                };
                reports.get(&c.report_name()).and_then(|r| r.hter).map(|h| 100.0 * h)
            })
            .collect();
        mean_opt(&xs)
    };
    let pairs = grid.cross_pairs();
    let mut cross = BTreeMap::new();
    let mut intra = BTreeMap::new();
    for &v in &cfg.grid.variants {
        cross.insert(v, pairs.iter().map(|(a, b)| hter_of(v, a, b)).collect::<Vec<_>>());
        if cfg.grid.intra && !v.uses_fmm() {
            intra.insert(v, grid.domains.iter().map(|d| hter_of(v, d, d)).collect::<Vec<_>>());
        }
    }
    let outcome = GridOutcome {
        cross,
        pairs,
        intra,
        domains: grid.domains.clone(),
        reports,
        audits,
        failures,
        trained: n_trained,
        train_seconds,
    };
    write_tables(&outcome, out)?;
    write_json(&out.join("failures.json"), &outcome.failures)?;
    Ok(outcome)
}

fn fmt_pct(x: Option<f64>) -> String {
    x.map_or_else(|| "NA".into(), |v| format!("{v:.2}"))
}

fn write_tables(o: &GridOutcome, out: &Path) -> Result<()> {
    let table = |path: PathBuf, cols: Vec<String>, rows: &BTreeMap<Variant, Vec<Option<f64>>>| -> Result<()> {
        let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Format(e.to_string()))?;
        let mut header = vec!["variant".to_string()];
        header.extend(cols);
        header.push("average".into());
        w.write_record(&header).map_err(|e| Error::Format(e.to_string()))?;
        for v in Variant::ALL {
            let Some(vals) = rows.get(&v) else { continue };
            let mut rec = vec![v.as_str().to_string()];
            rec.extend(vals.iter().map(|x| fmt_pct(*x)));
            rec.push(fmt_pct(mean_opt(vals)));
            w.write_record(&rec).map_err(|e| Error::Format(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))
    };
    table(
        out.join("results.csv"),
        o.pairs.iter().map(|(a, b)| format!("{a}->{b}")).collect(),
        &o.cross,
    )?;
    if !o.intra.is_empty() {
        table(out.join("intra_results.csv"), o.domains.clone(), &o.intra)?;
    }
    Ok(())
}
