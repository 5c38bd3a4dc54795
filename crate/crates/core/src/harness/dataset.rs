use std::path::{Path, PathBuf};

use ndarray::{Array3, Ix2, Ix3};

use crate::data::load_tensor;
use crate::data::{InpaintMask, MsiCube, ScenePair};
use crate::error::{Error, Result};
use crate::preprocess::{normalize_raw, saturation_check, RawCube, Saturation};

pub const CURRENT_FILE: &str = "s2.npy";
pub const HISTORICAL_FILE: &str = "s2_historical.npy";
pub const MASK_FILE: &str = "mask.npy";

/// A `sample_*` directory of the dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleEntry {
    pub id: String,
    pub dir: PathBuf,
}

/// Sample directories under `dir`, sorted by name.
pub fn list_samples(dir: &Path) -> Result<Vec<SampleEntry>> {
    if !dir.is_dir() {
        return Err(Error::Config(format!(
            "dataset directory {} does not exist",
            dir.display()
        )));
    }
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        if name.starts_with("sample_") && path.is_dir() {
            out.push(SampleEntry {
                id: name.to_string(),
                dir: path.clone(),
            });
        }
    }
    out.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(out)
}

/// A loaded, normalized sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub scene: ScenePair,
    /// The sample's own `mask.npy`, if present.
    pub mask: Option<InpaintMask>,
}

/// Outcome of reading one sample directory.
#[derive(Debug, Clone, PartialEq)]
pub enum Loaded {
    Ready(Sample),
    /// Pre-clip mean above the saturation threshold; excluded from analysis.
    Saturated,
}

fn load_cube(path: &Path, dn_scale: f64) -> Result<(MsiCube, Saturation)> {
    let raw: Array3<f64> = load_tensor(path)?
        .into_dimensionality::<Ix3>()
        .map_err(|e| Error::InvalidValue(format!("{}: {e}", path.display())))?;
    let raw = RawCube::new(raw)?;
    let verdict = saturation_check(raw.scaled(dn_scale)?.view());
    Ok((normalize_raw(&raw, dn_scale)?, verdict))
}

/// Reads a 2-D (or `[1, H, W]`) 0/1 mask file.
pub fn load_mask(path: &Path) -> Result<InpaintMask> {
    let arr = load_tensor(path)?;
    let arr = match arr.ndim() {
        3 if arr.shape()[0] == 1 => arr.index_axis_move(ndarray::Axis(0), 0),
        _ => arr,
    };
    let arr = arr
        .into_dimensionality::<Ix2>()
        .map_err(|e| Error::InvalidValue(format!("{}: {e}", path.display())))?;
    InpaintMask::from_binary(arr.view())
}

/// Loads current and historical cubes (raw DN divided by `dn_scale` and
/// clipped) plus the optional mask. Saturation is judged on the current cube.
pub fn load_sample(entry: &SampleEntry, dn_scale: f64) -> Result<Loaded> {
    let (current, verdict) = load_cube(&entry.dir.join(CURRENT_FILE), dn_scale)?;
    if verdict == Saturation::Reject {
        return Ok(Loaded::Saturated);
    }
    let (historical, _) = load_cube(&entry.dir.join(HISTORICAL_FILE), dn_scale)?;
    let scene = ScenePair::new(current, historical)?;
    let mask_path = entry.dir.join(MASK_FILE);
    let mask = if mask_path.exists() {
        let mask = load_mask(&mask_path)?;
        let (h, w) = scene.dim();
        mask.check_dim(h, w)?;
        Some(mask)
    } else {
        None
    };
    Ok(Loaded::Ready(Sample {
        id: entry.id.clone(),
        scene,
        mask,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::save_tensor;
    use crate::synth::write_dataset;

    #[test]
    fn lists_sorted_sample_dirs_only() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), 3, 16, 16, 5).unwrap();
        std::fs::create_dir(dir.path().join("other")).unwrap();
        std::fs::write(dir.path().join("sample_file"), b"x").unwrap();
        let ids: Vec<_> = list_samples(dir.path()).unwrap().into_iter().map(|e| e.id).collect();
        assert_eq!(ids, ["sample_000", "sample_001", "sample_002"]);
    }

    #[test]
    fn missing_dataset_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(list_samples(&dir.path().join("nope")), Err(Error::Config(_))));
    }

    #[test]
    fn loads_synthetic_sample_and_optional_mask() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), 1, 16, 16, 5).unwrap();
        let entry = &list_samples(dir.path()).unwrap()[0];
        let Loaded::Ready(s) = load_sample(entry, 10_000.0).unwrap() else {
            panic!("synthetic sample must not be saturated");
        };
        assert_eq!(s.scene.dim(), (16, 16));
        assert!(s.mask.is_none());

        let mut m = ndarray::Array2::<f64>::zeros((16, 16));
        m[[3, 4]] = 1.0;
        save_tensor(m.into_dyn().view(), entry.dir.join(MASK_FILE)).unwrap();
        let Loaded::Ready(s) = load_sample(entry, 10_000.0).unwrap() else {
            panic!();
        };
        let mask = s.mask.unwrap();
        assert_eq!(mask.count(), 1);
        assert!(mask.is_missing(3, 4));
    }

    #[test]
    fn saturated_sample_is_flagged() {
        let dir = tempfile::tempdir().unwrap();
        let sample = dir.path().join("sample_000");
        std::fs::create_dir(&sample).unwrap();
        let hot = ndarray::Array3::<f64>::from_elem((13, 8, 8), 9_500.0).into_dyn();
        save_tensor(hot.view(), sample.join(CURRENT_FILE)).unwrap();
        save_tensor(hot.view(), sample.join(HISTORICAL_FILE)).unwrap();
        let entry = &list_samples(dir.path()).unwrap()[0];
        assert_eq!(load_sample(entry, 10_000.0).unwrap(), Loaded::Saturated);
    }
}
