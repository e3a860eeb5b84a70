//! Command implementations. Each command is a function of the run config,
//! its input paths and an output directory, and never touches its inputs.
//!
//! Output layout:
//!
//! ```text
//! corpus/    config.toml  resolved.toml  counts.txt
//!            unlabeled-n{N}.manifest  labeled.manifest
//!            slides/{id}.png  slides/{id}_mask.png
//!            patches/unlabeled-n{N}/*.png  patches/labeled/*.png
//! pretrain/  config.toml  resolved.toml  trace.csv
//!            checkpoints/epoch-0005.ckpt ...  final.ckpt
//! lineval/   config.toml  resolved.toml  report.txt  report.csv
//!            report-{pct}.txt  classifiers-{pct}.json
//! map/       {slide}_map.png  {slide}_truth.png  {slide}_accuracy.txt  legend.txt
//! ablation/  corpus/  n{N}-{variant}/{pretrain,lineval}/  ablation.csv  ablation.txt
//! ```

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nearbypatch::corpus::{self, Manifest, Split};
use nearbypatch::lineval::{self, fmt_percent, EvalReport};
use nearbypatch::losses::LossVariant;
use nearbypatch::model::{self, checkpoint, LinearClassifier, Network};
use nearbypatch::seed;
use nearbypatch::trainer::{self, TraceRow, TrainError};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::render;

/// Images encoded per forward pass during feature extraction.
const FEATURE_BATCH: usize = 64;

/// Where the frozen encoder comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum EncoderSource {
    Checkpoint(PathBuf),
    /// Untrained encoder with the same initialization pretraining starts from.
    RandomInit,
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::data(dir.display(), e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| CliError::data(path.display(), e))
}

/// Writes the config file verbatim plus the effective values after seed and
/// flag overrides.
fn echo_config(out: &Path, cfg: &RunConfig, raw: &str) -> Result<(), CliError> {
    write_file(&out.join("config.toml"), raw)?;
    let resolved = toml::to_string(cfg).map_err(|e| CliError::Config(e.to_string()))?;
    write_file(&out.join("resolved.toml"), resolved)
}

pub fn unlabeled_manifest_path(corpus_dir: &Path, nearby: usize) -> PathBuf {
    corpus_dir.join(format!("unlabeled-n{nearby}.manifest"))
}

pub fn labeled_manifest_path(corpus_dir: &Path) -> PathBuf {
    corpus_dir.join("labeled.manifest")
}

fn unlabeled_patch_dir(corpus_dir: &Path, nearby: usize) -> PathBuf {
    corpus_dir.join("patches").join(format!("unlabeled-n{nearby}"))
}

fn labeled_patch_dir(corpus_dir: &Path) -> PathBuf {
    corpus_dir.join("patches").join("labeled")
}

/// Generates slides, manifests and patch files. Returns the counts table.
pub fn generate_corpus(cfg: &RunConfig, raw: &str, out: &Path) -> Result<String, CliError> {
    cfg.corpus.validate()?;
    create_dir(out)?;
    echo_config(out, cfg, raw)?;
    let built = corpus::build_corpus(&cfg.corpus)?;

    let slide_dir = out.join("slides");
    create_dir(&slide_dir)?;
    for slide in &built.slides {
        corpus::save_slide(&slide_dir, slide)?;
    }
    let mut table = String::from("set\tslides\tcenter\tnearby\ttotal\n");
    for (&n, manifest) in &built.unlabeled {
        corpus::write_manifest(manifest, &unlabeled_manifest_path(out, n))?;
        corpus::write_patches(&unlabeled_patch_dir(out, n), manifest, &built.slides)?;
        let centers = manifest.groups().len();
        let total = manifest.records.len();
        let _ = writeln!(
            table,
            "unlabeled N={n}\t{}\t{centers}\t{}\t{total}",
            cfg.corpus.unlabeled_slides,
            total - centers
        );
    }
    corpus::write_manifest(&built.labeled, &labeled_manifest_path(out))?;
    corpus::write_patches(&labeled_patch_dir(out), &built.labeled, &built.slides)?;
    for (split, slides) in [(Split::Train, cfg.corpus.train_slides), (Split::Test, cfg.corpus.test_slides)] {
        let count = built.labeled.count(split);
        let _ = writeln!(table, "{split}\t{slides}\t{count}\t0\t{count}");
    }
    let mut per_class = String::from("\nclass\ttrain\ttest\n");
    for c in 0..cfg.corpus.classes {
        let count = |s| built.labeled.records.iter().filter(|r| r.split == s && r.label == Some(c)).count();
        let _ = writeln!(per_class, "{}\t{}\t{}", render::class_name(c), count(Split::Train), count(Split::Test));
    }
    table.push_str(&per_class);
    write_file(&out.join("counts.txt"), &table)?;
    Ok(table)
}

fn read_manifest(path: &Path) -> Result<Manifest, CliError> {
    if !path.exists() {
        return Err(CliError::Data(format!("manifest {} not found (run generate-corpus first)", path.display())));
    }
    Ok(corpus::read_manifest(path)?)
}

/// Initialization seed of the network, shared by pretraining and the
/// random-init baseline.
pub fn init_seed(cfg: &RunConfig) -> u64 {
    seed::derive(cfg.trainer.seed, &[seed::hash_str("network-init")])
}

#[derive(Debug, Clone)]
pub struct PretrainOutput {
    pub trace: Vec<TraceRow>,
    pub final_checkpoint: PathBuf,
}

pub fn write_trace(path: &Path, trace: &[TraceRow]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::data(path.display(), e))?;
    for row in trace {
        w.serialize(row).map_err(|e| CliError::data(path.display(), e))?;
    }
    w.flush().map_err(|e| CliError::data(path.display(), e))
}

/// Pretrains on the unlabeled set matching `trainer.nearby`.
pub fn pretrain(cfg: &RunConfig, raw: &str, corpus_dir: &Path, out: &Path) -> Result<PretrainOutput, CliError> {
    cfg.trainer.validate()?;
    cfg.model.validate()?;
    let n = cfg.trainer.nearby;
    let manifest = read_manifest(&unlabeled_manifest_path(corpus_dir, n))?;
    if manifest.header.nearby != n {
        return Err(CliError::Config(format!(
            "manifest has N={}, trainer expects N={n}",
            manifest.header.nearby
        )));
    }
    let groups = corpus::load_groups(&manifest, &unlabeled_patch_dir(corpus_dir, n))?;
    create_dir(out)?;
    echo_config(out, cfg, raw)?;
    let ckpt_dir = out.join("checkpoints");
    create_dir(&ckpt_dir)?;

    let mut net = Network::<f32>::new(&cfg.model, init_seed(cfg))?;
    let meta = |epoch: usize| {
        serde_json::json!({
            "epoch": epoch,
            "nearby": n,
            "variant": cfg.trainer.variant.to_string(),
            "seed": cfg.trainer.seed,
        })
    };
    let trace = trainer::pretrain(&groups, &mut net, &cfg.trainer, &cfg.augment, &cfg.eval, |epoch, net| {
        let path = ckpt_dir.join(format!("epoch-{epoch:04}.ckpt"));
        checkpoint::save_checkpoint(&path, net, &meta(epoch)).map_err(|e| TrainError::Checkpoint(e.to_string()))
    })?;
    write_trace(&out.join("trace.csv"), &trace)?;
    let final_checkpoint = out.join("final.ckpt");
    checkpoint::save_checkpoint(&final_checkpoint, &net, &meta(cfg.trainer.epochs))?;
    Ok(PretrainOutput { trace, final_checkpoint })
}

/// Loads the encoder and a stable description of where it came from.
fn load_encoder(cfg: &RunConfig, source: &EncoderSource) -> Result<(Network<f32>, String), CliError> {
    match source {
        EncoderSource::Checkpoint(path) => {
            let bytes = std::fs::read(path).map_err(|e| CliError::data(path.display(), e))?;
            let (net, _) = checkpoint::checkpoint_from_bytes::<f32>(&bytes)?;
            let name = path.file_name().map_or_else(String::new, |f| f.to_string_lossy().into_owned());
            // Content hash rather than the full path, so reports do not depend
            // on where the run directory lives.
            let hash = bytes.iter().fold(0xCBF2_9CE4_8422_2325u64, |h, &b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01B3));
            Ok((net, format!("{name} (fnv1a {hash:016x})")))
        }
        EncoderSource::RandomInit => {
            let net = Network::<f32>::new(&cfg.model, init_seed(cfg))?;
            Ok((net, format!("random-init (seed {})", cfg.trainer.seed)))
        }
    }
}

fn labeled_features(
    cfg: &RunConfig,
    net: &Network<f32>,
    corpus_dir: &Path,
    split: Split,
) -> Result<(ndarray::Array2<f64>, Vec<usize>), CliError> {
    let manifest = read_manifest(&labeled_manifest_path(corpus_dir))?;
    let (patches, labels) = corpus::load_labeled(&manifest, &labeled_patch_dir(corpus_dir), split)?;
    if patches.is_empty() {
        return Err(CliError::Data(format!("labeled manifest has no {split} records")));
    }
    let x = lineval::extract_features(net, &patches, &cfg.eval, FEATURE_BATCH)?;
    Ok((x, labels))
}

fn pct_tag(fraction: f64) -> String {
    fmt_percent(fraction).replace('.', "_")
}

/// Runs the linear protocol at every configured label fraction.
pub fn lineval(
    cfg: &RunConfig,
    raw: &str,
    corpus_dir: &Path,
    source: &EncoderSource,
    out: &Path,
) -> Result<Vec<EvalReport>, CliError> {
    cfg.lineval.validate()?;
    let (net, described) = load_encoder(cfg, source)?;
    let (train_x, train_y) = labeled_features(cfg, &net, corpus_dir, Split::Train)?;
    let (test_x, test_y) = labeled_features(cfg, &net, corpus_dir, Split::Test)?;
    let classes = usize::from(cfg.corpus.classes);
    if let Some(&bad) = train_y.iter().chain(&test_y).find(|&&y| y >= classes) {
        return Err(CliError::Data(format!("label {bad} >= classes {classes}")));
    }
    create_dir(out)?;
    echo_config(out, cfg, raw)?;

    let mut reports = Vec::new();
    let mut summary = format!("encoder: {described}\n\nlabels\tmacro_f1\tbalanced_accuracy\ttrain_samples\n");
    let csv_path = out.join("report.csv");
    let mut csv = csv::Writer::from_path(&csv_path).map_err(|e| CliError::data(csv_path.display(), e))?;
    csv.write_record(["fraction", "macro_f1", "balanced_accuracy", "train_samples"])
        .map_err(|e| CliError::data(csv_path.display(), e))?;
    for &fraction in &cfg.lineval.label_fractions {
        let (mut report, probes) = lineval::run_protocol(
            train_x.view(),
            &train_y,
            test_x.view(),
            &test_y,
            classes,
            fraction,
            &cfg.lineval,
        )?;
        report.meta.checkpoint = described.clone();
        let tag = pct_tag(fraction);
        write_file(&out.join(format!("report-{tag}.txt")), report.to_text())?;
        let json = serde_json::to_string_pretty(&probes).map_err(|e| CliError::Data(e.to_string()))?;
        write_file(&out.join(format!("classifiers-{tag}.json")), json)?;
        let _ = writeln!(
            summary,
            "{}%\t{:.2}\t{:.2}\t{}",
            fmt_percent(fraction),
            100.0 * report.macro_f1,
            100.0 * report.balanced_accuracy,
            report.meta.train_samples
        );
        csv.write_record([
            fraction.to_string(),
            format!("{:.4}", 100.0 * report.macro_f1),
            format!("{:.4}", 100.0 * report.balanced_accuracy),
            report.meta.train_samples.to_string(),
        ])
        .map_err(|e| CliError::data(csv_path.display(), e))?;
        log::info!(
            "{}% labels: macro F1 {:.2}, balanced accuracy {:.2}",
            fmt_percent(fraction),
            100.0 * report.macro_f1,
            100.0 * report.balanced_accuracy
        );
        reports.push(report);
    }
    csv.flush().map_err(|e| CliError::data(csv_path.display(), e))?;
    write_file(&out.join("report.txt"), summary)?;
    Ok(reports)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapOutput {
    pub grid: (u32, u32),
    /// Fraction of slide pixels whose tile prediction matches the mask.
    pub pixel_accuracy: f64,
    /// Fraction of tiles whose prediction matches the tile's majority class.
    pub tile_accuracy: f64,
}

/// Majority vote over fold models; ties go to the lowest class id.
pub fn vote(predictions: &[Vec<usize>], classes: usize) -> Vec<usize> {
    let n = predictions.first().map_or(0, Vec::len);
    (0..n)
        .map(|i| {
            let mut counts = vec![0usize; classes];
            for p in predictions {
                counts[p[i]] += 1;
            }
            let votes: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
            model::argmax(&votes)
        })
        .collect()
}

/// Classifies every grid tile of a slide and renders the prediction next to
/// the ground truth.
pub fn render_map(
    cfg: &RunConfig,
    corpus_dir: &Path,
    source: &EncoderSource,
    classifiers: &Path,
    slide_id: &str,
    out: &Path,
) -> Result<MapOutput, CliError> {
    let classes = cfg.corpus.classes;
    if usize::from(classes) > render::MAX_CLASSES {
        return Err(CliError::Config(format!("palette covers {} classes, config has {classes}", render::MAX_CLASSES)));
    }
    let (net, _) = load_encoder(cfg, source)?;
    let text = std::fs::read_to_string(classifiers).map_err(|e| CliError::data(classifiers.display(), e))?;
    let probes: Vec<LinearClassifier> =
        serde_json::from_str(&text).map_err(|e| CliError::data(classifiers.display(), e))?;
    if probes.is_empty() {
        return Err(CliError::Data(format!("{}: no classifiers", classifiers.display())));
    }
    let slide = corpus::load_slide(&corpus_dir.join("slides"), slide_id)?;
    let s = cfg.corpus.patch_size;
    let (gw, gh) = (slide.width / s, slide.height / s);
    let mut tiles = Vec::new();
    let mut truth = Vec::new();
    for ty in 0..gh {
        for tx in 0..gw {
            tiles.push(slide.crop(tx * s, ty * s, s));
            truth.push(corpus::majority_label(&slide, tx * s, ty * s, s));
        }
    }
    let h = lineval::extract_features(&net, &tiles, &cfg.eval, FEATURE_BATCH)?;
    let mut predictions = Vec::new();
    for p in &probes {
        if p.weight.nrows() != h.ncols() || p.classes() != usize::from(classes) {
            return Err(CliError::Data(format!(
                "classifier is {}x{}, features have {} dims and the corpus {classes} classes",
                p.weight.nrows(),
                p.classes(),
                h.ncols()
            )));
        }
        predictions.push(p.predict(h.view())?);
    }
    let tile_class: Vec<u8> = vote(&predictions, usize::from(classes)).into_iter().map(|c| c as u8).collect();

    let matching_pixels = (0..slide.height)
        .flat_map(|y| (0..slide.width).map(move |x| (x, y)))
        .filter(|&(x, y)| tile_class[((y / s) * gw + x / s) as usize] == slide.class_at(x, y))
        .count();
    let pixel_accuracy = matching_pixels as f64 / f64::from(slide.width * slide.height);
    let tile_accuracy =
        tile_class.iter().zip(&truth).filter(|(a, b)| a == b).count() as f64 / tile_class.len() as f64;

    create_dir(out)?;
    let save = |img: image::RgbImage, name: String| {
        let path = out.join(name);
        img.save(&path).map_err(|e| CliError::data(path.display(), e))
    };
    save(render::paint(&tile_class, gw, gh), format!("{slide_id}_map.png"))?;
    save(render::paint(&slide.mask, slide.width, slide.height), format!("{slide_id}_truth.png"))?;
    write_file(&out.join("legend.txt"), render::legend(classes))?;
    write_file(
        &out.join(format!("{slide_id}_accuracy.txt")),
        format!(
            "slide\t{slide_id}\ngrid\t{gw}x{gh}\npixel_accuracy\t{:.4}\ntile_accuracy\t{:.4}\n",
            100.0 * pixel_accuracy,
            100.0 * tile_accuracy
        ),
    )?;
    Ok(MapOutput { grid: (gw, gh), pixel_accuracy, tile_accuracy })
}

/// One row of the ablation table: `None` marks a failed cell.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub nearby: usize,
    pub variant: LossVariant,
    /// `(fraction, macro F1, balanced accuracy)` per fraction.
    pub cells: Option<Vec<(f64, f64, f64)>>,
}

fn ablation_cell(
    cfg: &RunConfig,
    raw: &str,
    corpus_dir: &Path,
    dir: &Path,
) -> Result<Vec<(f64, f64, f64)>, CliError> {
    let trained = pretrain(cfg, raw, corpus_dir, &dir.join("pretrain"))?;
    let reports = lineval(cfg, raw, corpus_dir, &EncoderSource::Checkpoint(trained.final_checkpoint), &dir.join("lineval"))?;
    Ok(reports.iter().map(|r| (r.meta.fraction, r.macro_f1, r.balanced_accuracy)).collect())
}

/// Pretrains and evaluates every grid cell. Cells run `jobs` at a time; a
/// failed cell is logged and marked in the table.
pub fn ablate(cfg: &RunConfig, raw: &str, out: &Path, jobs: usize) -> Result<Vec<AblationRow>, CliError> {
    cfg.ablation.validate()?;
    let grid = &cfg.ablation;
    create_dir(out)?;
    echo_config(out, cfg, raw)?;

    let corpus_dir = out.join("corpus");
    let wanted: BTreeSet<usize> = grid.nearby.iter().copied().collect();
    let have_all = labeled_manifest_path(&corpus_dir).exists()
        && wanted.iter().all(|&n| unlabeled_manifest_path(&corpus_dir, n).exists());
    if !have_all {
        let mut corpus_cfg = cfg.clone();
        corpus_cfg.corpus.nearby_values = wanted.iter().copied().collect();
        generate_corpus(&corpus_cfg, raw, &corpus_dir)?;
    }

    let cells: Vec<(usize, LossVariant)> =
        grid.nearby.iter().flat_map(|&n| grid.variants.iter().map(move |&v| (n, v))).collect();
    let run = |&(n, variant): &(usize, LossVariant)| {
        let mut cell_cfg = cfg.clone();
        cell_cfg.trainer.nearby = n;
        cell_cfg.trainer.variant = variant;
        cell_cfg.lineval.label_fractions = grid.fractions.clone();
        let dir = out.join(format!("n{n}-{variant}"));
        let result = ablation_cell(&cell_cfg, raw, &corpus_dir, &dir);
        if let Err(e) = &result {
            log::error!("ablation cell N={n} {variant} failed: {e}");
        }
        AblationRow { nearby: n, variant, cells: result.ok() }
    };
    let mut rows = Vec::with_capacity(cells.len());
    for chunk in cells.chunks(jobs.max(1)) {
        if chunk.len() == 1 {
            rows.push(run(&chunk[0]));
            continue;
        }
        let done: Vec<AblationRow> = std::thread::scope(|scope| {
            let handles: Vec<_> = chunk.iter().map(|c| scope.spawn(|| run(c))).collect();
            handles.into_iter().map(|h| h.join().expect("ablation worker panicked")).collect()
        });
        rows.extend(done);
    }

    let (csv_text, table) = ablation_tables(&rows, &grid.fractions);
    write_file(&out.join("ablation.csv"), csv_text)?;
    write_file(&out.join("ablation.txt"), table)?;
    Ok(rows)
}

/// Renders the ablation rows as CSV and as an aligned text table.
pub fn ablation_tables(rows: &[AblationRow], fractions: &[f64]) -> (String, String) {
    let mut header = vec!["nearby".to_string(), "variant".to_string()];
    for &f in fractions {
        header.push(format!("f1_{}", fmt_percent(f)));
        header.push(format!("ba_{}", fmt_percent(f)));
    }
    let mut lines = vec![header];
    for row in rows {
        let mut line = vec![row.nearby.to_string(), row.variant.to_string()];
        for &f in fractions {
            let cell = row.cells.as_ref().and_then(|c| c.iter().find(|(cf, _, _)| (cf - f).abs() < 1e-12));
            match cell {
                Some(&(_, f1, ba)) => {
                    line.push(format!("{:.2}", 100.0 * f1));
                    line.push(format!("{:.2}", 100.0 * ba));
                }
                None => {
                    line.push("failed".into());
                    line.push("failed".into());
                }
            }
        }
        lines.push(line);
    }
    let csv_text: String = lines.iter().map(|l| l.join(",") + "\n").collect();
    let table: String = lines
        .iter()
        .map(|l| l.iter().map(|c| format!("{c:>9}")).collect::<Vec<_>>().join(" ") + "\n")
        .collect();
    (csv_text, table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vote_breaks_ties_low() {
        let preds = vec![vec![2, 1, 0], vec![1, 1, 3], vec![2, 0, 4], vec![1, 0, 5]];
        assert_eq!(vote(&preds, 6), vec![1, 0, 0]);
    }

    #[test]
    fn ablation_table_shape() {
        let rows = vec![
            AblationRow { nearby: 0, variant: LossVariant::Dcl, cells: Some(vec![(1.0, 0.5, 0.25)]) },
            AblationRow { nearby: 4, variant: LossVariant::Dcl, cells: None },
        ];
        let (csv, _) = ablation_tables(&rows, &[1.0]);
        assert_eq!(csv, "nearby,variant,f1_100,ba_100\n0,dcl,50.00,25.00\n4,dcl,failed,failed\n");
    }
}
