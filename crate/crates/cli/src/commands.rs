//! Subcommand implementations. Each returns an [`Outcome`] or an error;
//! `main` maps them to exit codes 0 (ok), 2 (no explanation found) and 1.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use cemmaf_core::bundle::MANIFEST_FILE;
use cemmaf_core::fixture::{train_fixture, FixtureConfig};
use cemmaf_core::image::{read_image, write_image};
use cemmaf_core::metrics::{aggregate_report, ExplanationRecord, MetricRow};
use cemmaf_core::pn::{solve_pn, PnOutcome};
use cemmaf_core::pp::{solve_pp, PpOutcome};
use cemmaf_core::segmentation::{decode_label_map, encode_label_map};
use cemmaf_core::{apply_mask, argmax, grid_segment, Image, MaskVector, ModelBundle, SuperpixelPartition};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::rankings::{group_by_method, read_rankings};
use crate::report::{
    pn_rounds, pp_metrics, pp_rounds, ExplanationReport, PnFound, PnSection, PpFound, PpSection,
    Status, Timings, REPORT_FORMAT, REPORT_VERSION,
};

pub const CEM_MAF_METHOD: &str = "cem-maf";
pub const EVAL_FILE: &str = "eval.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Ok,
    NotFound,
}

impl Outcome {
    pub fn exit_code(self) -> u8 {
        match self {
            Outcome::Ok => 0,
            Outcome::NotFound => 2,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct SolveArgs {
    pub bundle: PathBuf,
    pub images: Vec<PathBuf>,
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub timings: bool,
    pub labels: Option<PathBuf>,
}

#[derive(Clone, Debug, Default)]
pub struct EvalArgs {
    pub reports: PathBuf,
    pub bundle: PathBuf,
    pub rankings: Vec<PathBuf>,
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalTable {
    pub bundle_hash: String,
    pub rows: Vec<MetricRow>,
}

/// `--image` paths plus every `.pgm`/`.ppm` in `--images`, sorted by name.
pub fn collect_images(single: &[PathBuf], dir: Option<&Path>) -> CliResult<Vec<PathBuf>> {
    let mut paths = single.to_vec();
    if let Some(dir) = dir {
        let mut found = Vec::new();
        for entry in std::fs::read_dir(dir).map_err(|e| CliError::io(dir, e))? {
            let path = entry.map_err(|e| CliError::io(dir, e))?.path();
            let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
            if path.is_file() && matches!(ext, "pgm" | "ppm" | "pnm") && !is_generated(&path) {
                found.push(path);
            }
        }
        found.sort();
        paths.extend(found);
    }
    if paths.is_empty() {
        return Err(CliError::Usage("no input images given".into()));
    }
    Ok(paths)
}

fn is_generated(path: &Path) -> bool {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
    [".pn.", ".pp.", ".labels."].iter().any(|tag| name.contains(tag))
}

fn image_id(path: &Path) -> CliResult<String> {
    path.file_stem()
        .and_then(|s| s.to_str())
        .map(str::to_string)
        .ok_or_else(|| CliError::Usage(format!("{}: cannot derive an image id", path.display())))
}

fn image_ext(image: &Image) -> &'static str {
    if image.channels() == 1 {
        "pgm"
    } else {
        "ppm"
    }
}

fn path_text(path: &Path) -> String {
    path.to_string_lossy().replace('\\', "/")
}

/// SHA-256 over the manifest and every weight file it references.
pub fn bundle_hash(dir: &Path) -> CliResult<String> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| CliError::io(&manifest_path, e))?;
    let manifest = cemmaf_core::bundle::parse_manifest(&text)?;
    let mut files = vec![MANIFEST_FILE.to_string(), manifest.classifier.file, manifest.decoder.file];
    files.extend(manifest.encoder.map(|e| e.file));
    files.extend(manifest.attributes.into_iter().map(|a| a.file));
    let mut hasher = Sha256::new();
    for name in files {
        let path = dir.join(&name);
        let bytes = std::fs::read(&path).map_err(|e| CliError::io(&path, e))?;
        hasher.update(name.as_bytes());
        hasher.update([0u8]);
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(&bytes);
    }
    Ok(hex::encode(hasher.finalize()))
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn run_config(args: &SolveArgs) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn check_unique_ids(paths: &[PathBuf]) -> CliResult<Vec<String>> {
    let mut seen = BTreeMap::new();
    paths
        .iter()
        .map(|p| {
            let id = image_id(p)?;
            if let Some(prev) = seen.insert(id.clone(), p) {
                return Err(CliError::Usage(format!(
                    "{} and {} share the image id {id:?}",
                    prev.display(),
                    p.display()
                )));
            }
            Ok(id)
        })
        .collect()
}

/// Runs `f` over the inputs, in parallel when `jobs` allows, preserving order.
fn run_batch<T, F>(jobs: Option<usize>, n: usize, f: F) -> CliResult<Vec<CliResult<T>>>
where
    T: Send,
    F: Fn(usize) -> CliResult<T> + Sync + Send,
{
    let jobs = jobs.unwrap_or(1);
    if jobs == 0 {
        return Err(CliError::Usage("--jobs must be at least 1".into()));
    }
    if jobs == 1 {
        return Ok((0..n).map(f).collect());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(|| (0..n).into_par_iter().map(f).collect()))
}

/// Writes the successful results in input order; the first failure wins.
fn finish<T>(
    results: Vec<CliResult<T>>,
    mut write: impl FnMut(T) -> CliResult<Outcome>,
) -> CliResult<Outcome> {
    let mut outcome = Outcome::Ok;
    let mut first_err = None;
    for r in results {
        match r.and_then(&mut write) {
            Ok(Outcome::NotFound) => outcome = Outcome::NotFound,
            Ok(Outcome::Ok) => {}
            Err(e) => {
                log::error!("{e}");
                first_err.get_or_insert(e);
            }
        }
    }
    match first_err {
        Some(e) => Err(e),
        None => Ok(outcome),
    }
}

fn base_report(
    bundle: &ModelBundle,
    hash: &str,
    cfg: &RunConfig,
    id: &str,
    input: &Path,
    t0: usize,
) -> ExplanationReport {
    ExplanationReport {
        format: REPORT_FORMAT.into(),
        version: REPORT_VERSION,
        image_id: id.to_string(),
        input: path_text(input),
        t0,
        t0_name: bundle.class_names()[t0].clone(),
        class_names: bundle.class_names().to_vec(),
        bundle_hash: hash.to_string(),
        config: cfg.clone(),
        pn: None,
        pp: None,
        metrics: None,
        timings: None,
    }
}

struct PnJob {
    report: ExplanationReport,
    dump: Option<(String, Image)>,
}

pub fn cmd_pn(args: &SolveArgs) -> CliResult<Outcome> {
    let cfg = run_config(args)?;
    let bundle = ModelBundle::load(&args.bundle)?;
    let hash = bundle_hash(&args.bundle)?;
    let ids = check_unique_ids(&args.images)?;
    ensure_dir(&args.out)?;
    let hp = cfg.pn_params();

    let results = run_batch(args.jobs, args.images.len(), |i| {
        let (path, id) = (&args.images[i], &ids[i]);
        let x0 = read_image(path)?;
        let start = Instant::now();
        let outcome = solve_pn(&bundle, &x0, &hp)?;
        let elapsed = start.elapsed().as_secs_f64();
        let t0 = outcome.log().t0;
        let mut report = base_report(&bundle, &hash, &cfg, id, path, t0);
        let mut dump = None;
        let result = match &outcome {
            PnOutcome::Found(r) => {
                let file = format!("{id}.pn.{}", image_ext(&r.image));
                let quantized = r.image.quantized();
                let dump_predicted = bundle.predict(&quantized)?;
                dump = Some((file.clone(), r.image.clone()));
                Some(PnFound {
                    predicted: r.predicted,
                    predicted_name: bundle.class_names()[r.predicted].clone(),
                    scores: r.scores.clone(),
                    margin: r.margin,
                    z: r.z.clone(),
                    latent_distance: r.latent_distance(),
                    terms: r.terms,
                    objective: r.objective,
                    c: r.c,
                    iterate: r.iterate,
                    attributes: r.attributes.clone(),
                    explanation: r.added().map(|a| format!("+{}", a.name)).collect(),
                    violations: r.violations().map(|a| a.name.clone()).collect(),
                    image: file,
                    dump_predicted,
                })
            }
            PnOutcome::NotFound(_) => None,
        };
        report.pn = Some(PnSection {
            status: if result.is_some() { Status::Found } else { Status::NotFound },
            z_x0: outcome.log().z_x0.clone(),
            c_schedule: outcome.log().c_schedule(),
            rounds: pn_rounds(&outcome),
            result,
        });
        if args.timings {
            report.timings = Some(Timings { solve_seconds: elapsed });
        }
        Ok(PnJob { report, dump })
    })?;

    finish(results, |job| {
        if let Some((file, image)) = &job.dump {
            write_image(&args.out.join(file), image)?;
        }
        job.report.write(&args.out.join(format!("{}.pn.json", job.report.image_id)))?;
        let pn = job.report.pn.as_ref().expect("pn section is always set");
        match &pn.result {
            Some(r) => {
                log::info!("{}: PN {} ({})", job.report.image_id, r.predicted_name, r.explanation.join(" "));
                Ok(Outcome::Ok)
            }
            None => {
                log::warn!("{}: no pertinent negative found", job.report.image_id);
                Ok(Outcome::NotFound)
            }
        }
    })
}

fn partition_for(args: &SolveArgs, cfg: &RunConfig, image: &Image) -> CliResult<SuperpixelPartition> {
    match &args.labels {
        Some(path) => {
            let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
            Ok(decode_label_map(&bytes)?)
        }
        None => Ok(grid_segment(image.height(), image.width(), cfg.n_superpixels)?),
    }
}

fn mask_image(partition: &SuperpixelPartition, mask: &MaskVector) -> CliResult<Image> {
    let data = partition.labels().iter().map(|&l| mask.values()[l]).collect();
    Ok(Image::new(partition.height(), partition.width(), 1, data)?)
}

struct PpJob {
    report: ExplanationReport,
    labels: Vec<u8>,
    dumps: Vec<(String, Image)>,
}

pub fn cmd_pp(args: &SolveArgs) -> CliResult<Outcome> {
    let cfg = run_config(args)?;
    let bundle = ModelBundle::load(&args.bundle)?;
    let hash = bundle_hash(&args.bundle)?;
    let ids = check_unique_ids(&args.images)?;
    ensure_dir(&args.out)?;
    let hp = cfg.pp_params();

    let results = run_batch(args.jobs, args.images.len(), |i| {
        let (path, id) = (&args.images[i], &ids[i]);
        let x0 = read_image(path)?;
        let partition = partition_for(args, &cfg, &x0)?;
        let start = Instant::now();
        let outcome = solve_pp(&bundle, &x0, &partition, &hp)?;
        let elapsed = start.elapsed().as_secs_f64();
        let t0 = match &outcome {
            PpOutcome::Found(r) => r.t0,
            PpOutcome::NotFound { t0, .. } => *t0,
        };
        let mut report = base_report(&bundle, &hash, &cfg, id, path, t0);
        let labels_file = format!("{id}.labels.pgm");
        let mut dumps = Vec::new();
        let (result, c_schedule) = match &outcome {
            PpOutcome::Found(r) => {
                let file = format!("{id}.pp.{}", image_ext(&r.image));
                let mask_file = format!("{id}.pp.mask.pgm");
                let dump_predicted = bundle.predict(&r.image.quantized())?;
                dumps.push((file.clone(), r.image.clone()));
                dumps.push((mask_file.clone(), mask_image(&partition, &r.mask)?));
                let found = PpFound {
                    selected: r.selected.clone(),
                    predicted: r.predicted,
                    predicted_name: bundle.class_names()[r.predicted].clone(),
                    scores: r.scores.clone(),
                    margin: r.margin,
                    score_trace: r.score_trace.clone(),
                    ranking: r.ranking.clone(),
                    relaxed_mask: r.relaxed_mask.clone(),
                    fallback: r.fallback,
                    terms: r.terms,
                    objective: r.objective,
                    c: r.c,
                    iterate: r.iterate,
                    image: file,
                    mask: mask_file,
                    dump_predicted,
                };
                (Some(found), r.c_schedule())
            }
            PpOutcome::NotFound { rounds, .. } => (None, rounds.iter().map(|r| r.c).collect()),
        };
        report.metrics = pp_metrics(result.as_ref(), t0);
        report.pp = Some(PpSection {
            status: if result.is_some() { Status::Found } else { Status::NotFound },
            n_superpixels: partition.count(),
            labels: labels_file,
            c_schedule,
            rounds: pp_rounds(&outcome),
            result,
        });
        if args.timings {
            report.timings = Some(Timings { solve_seconds: elapsed });
        }
        Ok(PpJob {
            report,
            labels: encode_label_map(&partition)?,
            dumps,
        })
    })?;

    finish(results, |job| {
        let pp = job.report.pp.as_ref().expect("pp section is always set");
        let labels_path = args.out.join(&pp.labels);
        std::fs::write(&labels_path, &job.labels).map_err(|e| CliError::io(&labels_path, e))?;
        for (file, image) in &job.dumps {
            write_image(&args.out.join(file), image)?;
        }
        job.report.write(&args.out.join(format!("{}.pp.json", job.report.image_id)))?;
        match &pp.result {
            Some(r) => {
                log::info!("{}: PP with {} superpixels", job.report.image_id, r.selected.len());
                Ok(Outcome::Ok)
            }
            None => {
                log::warn!("{}: no pertinent positive found", job.report.image_id);
                Ok(Outcome::NotFound)
            }
        }
    })
}

/// Adds superpixels in `order` to the background image until the class is `t0`.
fn greedy_record(
    bundle: &ModelBundle,
    x0: &Image,
    partition: &SuperpixelPartition,
    order: &[usize],
    t0: usize,
    background: f64,
) -> CliResult<ExplanationRecord> {
    let n = partition.count();
    if let Some(&bad) = order.iter().find(|&&id| id >= n) {
        return Err(CliError::Usage(format!("superpixel id {bad} out of range (count {n})")));
    }
    let mut binary = vec![0.0; n];
    let mut image = apply_mask(x0, partition, &MaskVector::zeros(n), background)?;
    let mut predicted = bundle.predict(&image)?;
    let mut trace = Vec::new();
    for &id in order {
        if predicted == t0 {
            break;
        }
        if binary[id] == 1.0 {
            return Err(CliError::Usage(format!("superpixel id {id} repeated in ranking")));
        }
        binary[id] = 1.0;
        image = apply_mask(x0, partition, &MaskVector::new(binary.clone())?, background)?;
        let scores = bundle.classify(&image)?;
        predicted = argmax(&scores);
        trace.push(scores[t0]);
    }
    Ok(ExplanationRecord {
        n_selected: trace.len(),
        predicted,
        t0,
        score_trace: trace,
    })
}

pub fn cmd_eval(args: &EvalArgs) -> CliResult<EvalTable> {
    let bundle = ModelBundle::load(&args.bundle)?;
    let hash = bundle_hash(&args.bundle)?;

    let mut paths = Vec::new();
    for entry in std::fs::read_dir(&args.reports).map_err(|e| CliError::io(&args.reports, e))? {
        let path = entry.map_err(|e| CliError::io(&args.reports, e))?.path();
        if path.to_string_lossy().ends_with(".pp.json") {
            paths.push(path);
        }
    }
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Usage(format!(
            "{}: no pertinent-positive reports found",
            args.reports.display()
        )));
    }

    let mut reports = BTreeMap::new();
    let mut records = Vec::new();
    for path in &paths {
        let report = ExplanationReport::read(path)?;
        if report.bundle_hash != hash {
            return Err(CliError::Usage(format!(
                "{}: produced with a different bundle ({})",
                path.display(),
                report.bundle_hash
            )));
        }
        let pp = report
            .pp
            .as_ref()
            .ok_or_else(|| CliError::Usage(format!("{}: report has no PP section", path.display())))?;
        match &pp.result {
            Some(r) => records.push(ExplanationRecord {
                n_selected: r.selected.len(),
                predicted: r.predicted,
                t0: report.t0,
                score_trace: r.score_trace.clone(),
            }),
            None => log::warn!("{}: no PP result, excluded from the table", path.display()),
        }
        reports.insert(report.image_id.clone(), report);
    }
    if records.is_empty() {
        return Err(CliError::Usage("no report contains a PP result".into()));
    }
    let mut methods = vec![(CEM_MAF_METHOD.to_string(), records)];

    let mut entries = Vec::new();
    for path in &args.rankings {
        entries.extend(read_rankings(path)?);
    }
    for (method, group) in group_by_method(&entries) {
        if method == CEM_MAF_METHOD {
            return Err(CliError::Usage(format!("ranking method name {method:?} is reserved")));
        }
        let mut batch = Vec::with_capacity(group.len());
        for entry in group {
            let report = reports.get(&entry.image_id).ok_or_else(|| {
                CliError::Usage(format!("ranking for unknown image {:?}", entry.image_id))
            })?;
            let pp = report.pp.as_ref().expect("checked above");
            let x0 = read_image(Path::new(&report.input))?;
            let labels_path = args.reports.join(&pp.labels);
            let bytes = std::fs::read(&labels_path).map_err(|e| CliError::io(&labels_path, e))?;
            let partition = decode_label_map(&bytes)?;
            batch.push(greedy_record(
                &bundle,
                &x0,
                &partition,
                &entry.order,
                report.t0,
                report.config.background,
            )?);
        }
        methods.push((method, batch));
    }

    let table = EvalTable {
        bundle_hash: hash,
        rows: aggregate_report(&methods)?,
    };
    ensure_dir(&args.out)?;
    let path = args.out.join(EVAL_FILE);
    let mut text = serde_json::to_string_pretty(&table).map_err(|e| CliError::json(&path, e))?;
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
    Ok(table)
}

pub fn format_table(table: &EvalTable) -> String {
    let mut out = format!("{:<16} {:>5} {:>10} {:>8} {:>8}\n", "method", "n", "# PP Feat", "PP Acc", "PP Corr");
    for row in &table.rows {
        let corr = row.pp_corr.map_or_else(|| "n/a".to_string(), |c| format!("{c:.3}"));
        out.push_str(&format!(
            "{:<16} {:>5} {:>10.2} {:>8.1} {:>8}\n",
            row.method, row.n_examples, row.pp_feat, row.pp_acc, corr
        ));
    }
    out
}

pub fn cmd_fixtures(spec: Option<&Path>, seed: u64, out: &Path) -> CliResult<()> {
    let cfg = match spec {
        None => FixtureConfig::default(),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            FixtureConfig::parse(&text)?
        }
    };
    let set = train_fixture(&cfg, seed)?;
    set.write(out)?;
    log::info!(
        "wrote {} fixture images (train accuracy {:.3})",
        set.images.len(),
        set.manifest.train_accuracy
    );
    Ok(())
}

pub fn cmd_segment(args: &SolveArgs) -> CliResult<()> {
    let cfg = run_config(args)?;
    let ids = check_unique_ids(&args.images)?;
    ensure_dir(&args.out)?;
    for (path, id) in args.images.iter().zip(&ids) {
        let image = read_image(path)?;
        let partition = grid_segment(image.height(), image.width(), cfg.n_superpixels)?;
        let out = args.out.join(format!("{id}.labels.pgm"));
        std::fs::write(&out, encode_label_map(&partition)?).map_err(|e| CliError::io(&out, e))?;
        log::info!("{id}: {} superpixels", partition.count());
    }
    Ok(())
}
