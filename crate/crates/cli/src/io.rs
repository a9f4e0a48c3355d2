use std::path::{Path, PathBuf};

use radiosynth_core::grid::{load_png, resize_lanczos, save_png, BitDepth, DEFAULT_LOBES};
use radiosynth_core::nn::Checkpoint;
use radiosynth_core::{ImageGrid, Resolution, Scalar};

use crate::error::{CliError, CliResult};
use crate::record::list_files;

pub fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Grayscale PNGs of a directory, in name order.
pub fn load_corpus<T: Scalar>(dir: &Path) -> CliResult<Vec<(PathBuf, ImageGrid<T>)>> {
    let files = list_files(dir, &["png"])?;
    if files.is_empty() {
        return Err(CliError::Config(format!("no PNG images in {}", dir.display())));
    }
    files
        .into_iter()
        .map(|p| {
            let g = load_png::<T>(&p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
            Ok((p, g.to_grayscale()))
        })
        .collect()
}

pub fn fit<T: Scalar>(g: &ImageGrid<T>, target: Resolution) -> CliResult<ImageGrid<T>> {
    if g.resolution() == target {
        Ok(g.clone())
    } else {
        Ok(resize_lanczos(g, target, DEFAULT_LOBES)?)
    }
}

pub fn save<T: Scalar>(g: &ImageGrid<T>, path: &Path) -> CliResult<()> {
    save_png(g, path, BitDepth::Eight).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn mkdir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("cannot create {}: {e}", dir.display())))
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    crate::record::write_atomic(path, text.as_bytes())
}

pub fn load_checkpoint(path: &Path) -> CliResult<Checkpoint<f32>> {
    crate::record::require_file(path, "checkpoint")?;
    Ok(Checkpoint::load(path)?)
}
