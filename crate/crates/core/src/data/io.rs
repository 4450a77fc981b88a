//! On-disk case layout: `<case_id>/{TMax,TTP,DWI,penumbra,core}.(nii|nii.gz|rawf32)`.
//!
//! `rawf32` volumes are flat little-endian `f32` in C order (D, H, W) with a
//! JSON sidecar `<name>.json` holding `{"shape":[D,H,W],"spacing":[sz,sy,sx]}`.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array3, Ix3};
use nifti::{IntoNdArray, NiftiObject, ReaderOptions};
use serde::{Deserialize, Serialize};

use super::{Case, Modality, Volume};
use crate::error::{Error, Result};

/// Environment variable naming the default data root.
pub const DATA_ROOT_ENV: &str = "STROKESEG_DATA_ROOT";

const EXTENSIONS: [&str; 3] = ["nii", "nii.gz", "rawf32"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawSidecar {
    pub shape: [usize; 3],
    #[serde(default = "unit_spacing")]
    pub spacing: [f32; 3],
}

fn unit_spacing() -> [f32; 3] {
    [1.0; 3]
}

fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn read_rawf32(path: &Path) -> Result<Volume> {
    let sidecar_file = sidecar_path(path);
    let sidecar: RawSidecar = serde_json::from_slice(
        &fs::read(&sidecar_file).map_err(|e| Error::unreadable(&sidecar_file, e))?,
    )
    .map_err(|e| Error::unreadable(&sidecar_file, e))?;
    let bytes = fs::read(path).map_err(|e| Error::unreadable(path, e))?;
    let expected = sidecar.shape.iter().product::<usize>() * 4;
    if bytes.len() != expected {
        return Err(Error::unreadable(
            path,
            format!(
                "{} bytes on disk, sidecar shape {:?} needs {expected}",
                bytes.len(),
                sidecar.shape
            ),
        ));
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let data =
        Array3::from_shape_vec(sidecar.shape, values).map_err(|e| Error::unreadable(path, e))?;
    Volume::with_spacing(data, sidecar.spacing).map_err(|e| Error::unreadable(path, e))
}

/// Writes `path` (`.rawf32`) and its JSON sidecar.
pub fn write_rawf32(path: &Path, volume: &Volume) -> Result<()> {
    let mut bytes = Vec::with_capacity(volume.data.len() * 4);
    for v in volume.data.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    let sidecar = RawSidecar {
        shape: volume.shape(),
        spacing: volume.spacing,
    };
    fs::write(
        sidecar_path(path),
        serde_json::to_vec(&sidecar).expect("sidecar serializes"),
    )?;
    Ok(())
}

/// Reads a NIfTI-1 volume, reordering the file's (x, y, z) axes to (D, H, W).
pub fn read_nifti(path: &Path) -> Result<Volume> {
    let obj = ReaderOptions::new()
        .read_file(path)
        .map_err(|e| Error::unreadable(path, e))?;
    let pixdim = obj.header().pixdim;
    let data = obj
        .into_volume()
        .into_ndarray::<f32>()
        .map_err(|e| Error::unreadable(path, e))?;
    let data = match data.ndim() {
        3 => data,
        4 if data.shape()[3] == 1 => data.index_axis_move(ndarray::Axis(3), 0),
        _ => {
            return Err(Error::unreadable(
                path,
                format!("expected a 3-D volume, found shape {:?}", data.shape()),
            ))
        }
    };
    let data = data
        .into_dimensionality::<Ix3>()
        .map_err(|e| Error::unreadable(path, e))?
        .permuted_axes([2, 1, 0])
        .as_standard_layout()
        .into_owned();
    let spacing = [pixdim[3], pixdim[2], pixdim[1]].map(|s| if s > 0.0 { s } else { 1.0 });
    Volume::with_spacing(data, spacing).map_err(|e| Error::unreadable(path, e))
}

fn read_volume(path: &Path) -> Result<Volume> {
    if path.extension().is_some_and(|e| e == "rawf32") {
        read_rawf32(path)
    } else {
        read_nifti(path)
    }
}

fn find_volume(dir: &Path, name: &str) -> Option<PathBuf> {
    EXTENSIONS
        .iter()
        .map(|ext| dir.join(format!("{name}.{ext}")))
        .find(|p| p.is_file())
}

/// Loads one case directory. The case id is the directory name.
pub fn load_case(case_dir: &Path) -> Result<Case> {
    let load = |name: &str| -> Result<Volume> {
        let path = find_volume(case_dir, name)
            .ok_or_else(|| Error::MissingModality(format!("{name} in {}", case_dir.display())))?;
        read_volume(&path)
    };
    let modalities = [
        load(Modality::TMax.name())?,
        load(Modality::Ttp.name())?,
        load(Modality::Dwi.name())?,
    ];
    let penumbra = load("penumbra")?;
    let core = load("core")?;
    let case_id = case_dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    Case::new(case_id, modalities, penumbra, core)
}

/// Writes a case in the rawf32 layout under `dir/<case_id>/`.
pub fn write_case(dir: &Path, case: &Case) -> Result<PathBuf> {
    let case_dir = dir.join(&case.case_id);
    fs::create_dir_all(&case_dir)?;
    for m in Modality::ALL {
        write_rawf32(
            &case_dir.join(format!("{}.rawf32", m.name())),
            case.modality(m),
        )?;
    }
    write_rawf32(&case_dir.join("penumbra.rawf32"), &case.penumbra_mask)?;
    write_rawf32(&case_dir.join("core.rawf32"), &case.core_mask)?;
    Ok(case_dir)
}

/// Reads a manifest: one case id per line, blank lines and `#` comments skipped.
pub fn read_manifest(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::unreadable(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect())
}

pub fn write_manifest(path: &Path, ids: &[String]) -> Result<()> {
    let mut text = String::new();
    for id in ids {
        text.push_str(id);
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

/// Case ids resolved against a data root.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub root: PathBuf,
    pub case_ids: Vec<String>,
}

impl Dataset {
    /// Opens a manifest. Without an explicit root, `STROKESEG_DATA_ROOT` is
    /// consulted, then the manifest's own directory.
    pub fn from_manifest(manifest: &Path, root: Option<&Path>) -> Result<Self> {
        let case_ids = read_manifest(manifest)?;
        let root = match root {
            Some(r) => r.to_path_buf(),
            None => match std::env::var_os(DATA_ROOT_ENV) {
                Some(r) => PathBuf::from(r),
                None => manifest
                    .parent()
                    .map(Path::to_path_buf)
                    .unwrap_or_else(|| PathBuf::from(".")),
            },
        };
        Ok(Dataset { root, case_ids })
    }

    pub fn case_dir(&self, id: &str) -> PathBuf {
        self.root.join(id)
    }

    pub fn load(&self, id: &str) -> Result<Case> {
        load_case(&self.case_dir(id))
    }

    pub fn load_all(&self, ids: &[String]) -> Result<Vec<Case>> {
        ids.iter().map(|id| self.load(id)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn volume(shape: (usize, usize, usize)) -> Volume {
        Volume::new(Array3::from_shape_fn(shape, |(z, y, x)| {
            (z + y * 2 + x) as f32
        }))
        .unwrap()
    }

    fn write_dir(dir: &Path, names: &[&str], shape: (usize, usize, usize)) {
        for n in names {
            write_rawf32(&dir.join(format!("{n}.rawf32")), &volume(shape)).unwrap();
        }
    }

    #[test]
    fn loads_well_formed_case() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("case_a");
        fs::create_dir(&dir).unwrap();
        write_dir(
            &dir,
            &["TMax", "TTP", "DWI", "penumbra", "core"],
            (2, 96, 96),
        );
        let case = load_case(&dir).unwrap();
        assert_eq!(case.case_id, "case_a");
        assert_eq!(case.shape(), [2, 96, 96]);
        assert!(case
            .penumbra_mask
            .data
            .iter()
            .all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn missing_dwi_is_named() {
        let tmp = tempfile::tempdir().unwrap();
        write_dir(tmp.path(), &["TMax", "TTP", "penumbra", "core"], (2, 8, 8));
        match load_case(tmp.path()) {
            Err(Error::MissingModality(m)) => assert!(m.starts_with("DWI in "), "{m}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn mismatched_mask_shape_is_reported() {
        let tmp = tempfile::tempdir().unwrap();
        write_dir(tmp.path(), &["TMax", "TTP", "DWI", "core"], (2, 96, 64));
        write_dir(tmp.path(), &["penumbra"], (2, 96, 96));
        assert!(matches!(
            load_case(tmp.path()),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn truncated_raw_file_is_unreadable() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("x.rawf32");
        write_rawf32(&path, &volume((1, 2, 2))).unwrap();
        fs::write(&path, [0u8; 7]).unwrap();
        assert!(matches!(
            read_rawf32(&path),
            Err(Error::UnreadableFile { .. })
        ));
    }

    #[test]
    fn nifti_axes_are_reversed() {
        let tmp = tempfile::tempdir().unwrap();
        // (x, y, z) = (4, 3, 2) on disk
        let xyz =
            ndarray::Array3::from_shape_fn((4, 3, 2), |(x, y, z)| (100 * z + 10 * y + x) as f32);
        let path = tmp.path().join("DWI.nii.gz");
        nifti::writer::WriterOptions::new(&path)
            .write_nifti(&xyz)
            .unwrap();
        let v = read_nifti(&path).unwrap();
        assert_eq!(v.shape(), [2, 3, 4]);
        assert_eq!(v.data[[1, 2, 3]], 123.0);
    }

    #[test]
    fn manifest_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("manifest.txt");
        let ids = vec!["a".to_string(), "b".to_string()];
        write_manifest(&path, &ids).unwrap();
        let ds = Dataset::from_manifest(&path, Some(tmp.path())).unwrap();
        assert_eq!(ds.case_ids, ids);
        assert_eq!(ds.case_dir("a"), tmp.path().join("a"));
    }
}
