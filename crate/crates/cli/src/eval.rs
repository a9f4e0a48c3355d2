use std::path::Path;

use radiosynth_core::metrics::{
    centroid_distance, embedding_csv, fid_from_features, image_inception_score, pr_csv, pr_curve, roc_csv, roc_curve,
    tsne_2d, FeatureEmbedder, MetricReport, ScoredLabel, ToyClassHead, ToyEmbedder, Truth, TsneConfig,
};
use radiosynth_core::ImageGrid;

use crate::config::PipelineConfig;
use crate::error::{CliError, CliResult};
use crate::io::{load_corpus, write_text};
use crate::record::{require_file, DirLock, InputSet, RunRecord};

fn corpus(dir: &Path) -> CliResult<(Vec<std::path::PathBuf>, Vec<ImageGrid<f64>>)> {
    Ok(load_corpus::<f64>(dir)?.into_iter().unzip())
}

fn finish(cmd: &str, cfg: &PipelineConfig, inputs: &[std::path::PathBuf], output: &Path, report: &MetricReport) -> CliResult<()> {
    write_text(&output.join("report.json"), &report.to_json())?;
    let mut rec = RunRecord::new(cmd, cfg, InputSet::hash(inputs)?);
    rec.extra = serde_json::to_value(report).map_err(|e| CliError::Data(e.to_string()))?;
    rec.write(output)
}

/// FID between two image directories under the toy embedder.
pub fn cmd_eval_fid(cfg: &PipelineConfig, a: &Path, b: &Path, output: &Path) -> CliResult<MetricReport> {
    let (pa, ia) = corpus(a)?;
    let (pb, ib) = corpus(b)?;
    if ia.len() < 2 || ib.len() < 2 {
        return Err(CliError::Config("FID needs at least two images per set".into()));
    }
    let _lock = DirLock::acquire(output)?;
    let emb = ToyEmbedder::<f64>::new(cfg.embedder_seed);
    let value = fid_from_features(&emb.embed_all(&ia)?, &emb.embed_all(&ib)?)?;
    let report = MetricReport {
        metric: "fid".into(),
        value,
        std: 0.0,
        n: ia.len().min(ib.len()),
        embedder_id: emb.id(),
        seed: cfg.embedder_seed,
    };
    finish("eval-fid", cfg, &[pa, pb].concat(), output, &report)?;
    Ok(report)
}

/// Inception Score (mean and split std) under the toy class head.
pub fn cmd_eval_is(cfg: &PipelineConfig, images: &Path, output: &Path) -> CliResult<MetricReport> {
    let (paths, imgs) = corpus(images)?;
    if imgs.len() < cfg.is_splits {
        return Err(CliError::Config(format!("{} images cannot fill {} splits", imgs.len(), cfg.is_splits)));
    }
    let _lock = DirLock::acquire(output)?;
    let head = ToyClassHead::<f64>::new(cfg.embedder_seed);
    let (value, std) = image_inception_score(&head, &imgs, cfg.is_splits)?;
    let report = MetricReport {
        metric: "is".into(),
        value,
        std,
        n: imgs.len(),
        embedder_id: radiosynth_core::metrics::ClassHead::id(&head),
        seed: cfg.embedder_seed,
    };
    finish("eval-is", cfg, &paths, output, &report)?;
    Ok(report)
}

/// Joint 2-D t-SNE of two sets; `embedding.csv` labels rows by set and the
/// report value is the distance between the set centroids.
pub fn cmd_eval_tsne(cfg: &PipelineConfig, a: &Path, b: &Path, output: &Path) -> CliResult<MetricReport> {
    let (pa, ia) = corpus(a)?;
    let (pb, ib) = corpus(b)?;
    let _lock = DirLock::acquire(output)?;
    let emb = ToyEmbedder::<f64>::new(cfg.embedder_seed);
    let mut feats = emb.embed_all(&ia)?;
    feats.extend(emb.embed_all(&ib)?);
    let mut rec = RunRecord::new("eval-tsne", cfg, InputSet::hash(&[pa.clone(), pb.clone()].concat())?);
    let tcfg = TsneConfig {
        perplexity: cfg.tsne_perplexity,
        iterations: cfg.tsne_iterations,
        seed: rec.seed("tsne", cfg.seed),
        ..TsneConfig::default()
    };
    let points = tsne_2d(&feats, &tcfg).map_err(|e| match e {
        radiosynth_core::Error::Argument(m) => CliError::Config(m),
        other => other.into(),
    })?;
    let (pa_pts, pb_pts) = points.split_at(ia.len());
    let label = |p: &Path| p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "set".into());
    let labels: Vec<String> = std::iter::repeat_n(label(a), ia.len()).chain(std::iter::repeat_n(label(b), ib.len())).collect();
    write_text(&output.join("embedding.csv"), &embedding_csv(&points, &labels))?;
    let report = MetricReport {
        metric: "tsne-centroid-distance".into(),
        value: centroid_distance(pa_pts, pb_pts)?,
        std: 0.0,
        n: points.len(),
        embedder_id: emb.id(),
        seed: tcfg.seed,
    };
    write_text(&output.join("report.json"), &report.to_json())?;
    rec.extra = serde_json::to_value(&report).map_err(|e| CliError::Data(e.to_string()))?;
    rec.write(output)?;
    Ok(report)
}

/// `score,label` rows (label `real` or `fake`) with an optional header.
pub fn read_scores(path: &Path) -> CliResult<Vec<ScoredLabel<f64>>> {
    require_file(path, "scores")?;
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (n == 0 && line.starts_with("score")) {
            continue;
        }
        let bad = || CliError::Data(format!("{} line {}: expected `score,label`", path.display(), n + 1));
        let (s, l) = line.split_once(',').ok_or_else(bad)?;
        let score: f64 = s.trim().parse().map_err(|_| bad())?;
        let label: Truth = l.trim().parse().map_err(|_| bad())?;
        out.push(ScoredLabel::new(score, label).map_err(|e| CliError::Data(e.to_string()))?);
    }
    Ok(out)
}

/// ROC and PR curves of scored labels; the report value is the AUC.
pub fn cmd_eval_roc(cfg: &PipelineConfig, scores: &Path, output: &Path) -> CliResult<MetricReport> {
    let items = read_scores(scores)?;
    let _lock = DirLock::acquire(output)?;
    let roc = roc_curve(&items)?;
    let pr = pr_curve(&items)?;
    write_text(&output.join("roc.csv"), &roc_csv(&roc))?;
    write_text(&output.join("pr.csv"), &pr_csv(&pr))?;
    let report = MetricReport { metric: "auc".into(), value: roc.auc, std: 0.0, n: items.len(), embedder_id: String::new(), seed: cfg.seed };
    write_text(&output.join("report.json"), &report.to_json())?;
    let mut rec = RunRecord::new("eval-roc", cfg, InputSet::hash(&[scores.to_path_buf()])?);
    rec.extra = serde_json::json!({ "auc": roc.auc, "average_precision": pr.average_precision, "n": items.len() });
    rec.write(output)?;
    Ok(report)
}
