use std::collections::HashMap;
use std::path::Path;

use radiosynth_core::grid::decode_png;

use crate::config::PipelineConfig;
use crate::error::{CliError, CliResult};
use crate::io::{fit, mkdir, save, stem, write_text};
use crate::record::{file_sha256, list_files, require_dir, sha256_hex, DirLock, InputSet, RunRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PrepareSummary {
    pub processed: usize,
    pub skipped: usize,
}

/// `name x y w h` per line; `name` is the file name or stem.
fn parse_rects(text: &str) -> CliResult<HashMap<String, [usize; 4]>> {
    let mut out = HashMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        let nums: Option<Vec<usize>> = parts.get(1..).map(|p| p.iter().filter_map(|v| v.parse().ok()).collect());
        match nums {
            Some(v) if parts.len() == 5 && v.len() == 4 => {
                out.insert(parts[0].to_string(), [v[0], v[1], v[2], v[3]]);
            }
            _ => return Err(CliError::Config(format!("rects line {}: expected `name x y w h`", n + 1))),
        }
    }
    Ok(out)
}

/// Optional crop, grayscale, Lanczos to the HR and LR target sizes. Files
/// that fail to decode or crop are skipped and listed in the manifest.
pub fn cmd_prepare(cfg: &PipelineConfig, input: &Path, output: &Path, rects: Option<&Path>) -> CliResult<PrepareSummary> {
    require_dir(input, "input")?;
    let files = list_files(input, &[])?;
    if files.is_empty() {
        return Err(CliError::Config(format!("input directory {} is empty", input.display())));
    }
    let rects = match rects {
        Some(p) => parse_rects(
            &std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("cannot read rects {}: {e}", p.display())))?,
        )?,
        None => HashMap::new(),
    };
    let (hr_res, lr_res) = (cfg.hr_resolution()?, cfg.lr_resolution()?);
    let _lock = DirLock::acquire(output)?;
    let (hr_dir, lr_dir) = (output.join("hr"), output.join("lr"));
    mkdir(&hr_dir)?;
    mkdir(&lr_dir)?;

    let mut manifest = String::from("id,status,source_sha256,hr_sha256,lr_sha256,note\n");
    let mut summary = PrepareSummary { processed: 0, skipped: 0 };
    for path in &files {
        let id = stem(path);
        let bytes = std::fs::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        let source = sha256_hex(&bytes);
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let result = decode_png::<f64>(&bytes).and_then(|g| {
            let g = g.to_grayscale();
            match rects.get(&name).or_else(|| rects.get(&id)) {
                Some(&[x, y, w, h]) => g.crop(x, y, w, h),
                None => Ok(g),
            }
        });
        match result {
            Ok(g) => {
                let hr = fit(&g, hr_res)?;
                let lr = fit(&hr, lr_res)?;
                let (hp, lp) = (hr_dir.join(format!("{id}.png")), lr_dir.join(format!("{id}.png")));
                save(&hr, &hp)?;
                save(&lr, &lp)?;
                manifest.push_str(&format!("{id},ok,{source},{},{},\n", file_sha256(&hp)?, file_sha256(&lp)?));
                summary.processed += 1;
            }
            Err(e) => {
                let note = e.to_string().replace([',', '\n'], ";");
                manifest.push_str(&format!("{id},skipped,{source},,,{note}\n"));
                summary.skipped += 1;
            }
        }
    }
    write_text(&output.join("manifest.csv"), &manifest)?;
    let mut rec = RunRecord::new("prepare", cfg, InputSet::hash(&files)?);
    rec.extra = serde_json::json!({ "processed": summary.processed, "skipped": summary.skipped });
    rec.write(output)?;
    if summary.processed == 0 {
        return Err(CliError::Data(format!("none of the {} input files could be decoded", files.len())));
    }
    Ok(summary)
}
