use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::format::{load_matrix, save_matrix, MatrixFormat};
use super::{validation, ZslDataset};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Standard (SS) or proposed (PS) class split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    #[serde(rename = "SS")]
    Ss,
    #[serde(rename = "PS")]
    Ps,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Ss => "SS",
            Split::Ps => "PS",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dims {
    pub d: usize,
    pub r: usize,
    #[serde(rename = "Ks")]
    pub ks: usize,
    #[serde(rename = "Kt")]
    pub kt: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockRef {
    /// Relative paths resolve against the manifest's directory.
    pub path: PathBuf,
    pub format: MatrixFormat,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Blocks {
    pub source_features: BlockRef,
    pub source_labels: BlockRef,
    pub target_features: BlockRef,
    pub target_labels: BlockRef,
    pub source_attributes: BlockRef,
    pub target_attributes: BlockRef,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassNames {
    pub source: Vec<String>,
    pub target: Vec<String>,
}

/// JSON description of a dataset on disk.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub name: String,
    pub split: Split,
    pub dims: Dims,
    pub blocks: Blocks,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_names: Option<ClassNames>,
}

impl DatasetManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

fn labels_from(m: &Matrix, block: &str) -> Result<Vec<usize>> {
    if m.cols() != 1 && m.rows() > 0 {
        return Err(validation(block, "1 column", m.cols()));
    }
    m.data()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 && v < u32::MAX as f64 {
                Ok(v as usize)
            } else {
                Err(validation(block, "non-negative integer labels", v))
            }
        })
        .collect()
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Loads and validates the dataset described by the manifest at `path`.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<ZslDataset> {
    let path = path.as_ref();
    let manifest = DatasetManifest::load(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let load = |b: &BlockRef| load_matrix(resolve(base, &b.path), b.format);
    let blocks = &manifest.blocks;
    let dims = manifest.dims;

    let xs = load(&blocks.source_features)?;
    let ys = load(&blocks.source_labels)?;
    let xt = load(&blocks.target_features)?;
    let yt = load(&blocks.target_labels)?;
    let a_s = load(&blocks.source_attributes)?;
    let a_t = load(&blocks.target_attributes)?;

    for (block, m, rows, cols) in [
        ("source_features", &xs, None, dims.d),
        ("target_features", &xt, None, dims.d),
        ("source_attributes", &a_s, Some(dims.ks), dims.r),
        ("target_attributes", &a_t, Some(dims.kt), dims.r),
    ] {
        if m.cols() != cols {
            return Err(validation(block, format!("{cols} columns (declared)"), m.cols()));
        }
        if let Some(rows) = rows {
            if m.rows() != rows {
                return Err(validation(block, format!("{rows} rows (declared)"), m.rows()));
            }
        }
    }
    let ys = labels_from(&ys, "source_labels")?;
    let yt = labels_from(&yt, "target_labels")?;
    let mut ds = ZslDataset::new(manifest.name.clone(), manifest.split, xs, ys, xt, yt, a_s, a_t)?;
    if let Some(names) = manifest.class_names {
        ds = ds.with_class_names(names.source, names.target)?;
    }
    log::info!("{}", ds.summary());
    Ok(ds)
}

/// Writes all six blocks into `dir` and returns the manifest describing them.
/// Target labels are written as the evaluation truth block.
pub fn save_dataset(ds: &ZslDataset, dir: impl AsRef<Path>, format: MatrixFormat) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let ext = match format {
        MatrixFormat::Csv => "csv",
        MatrixFormat::Mtxb => "mtxb",
    };
    let labels = |y: &[usize]| Matrix::column_vector(y.iter().map(|&v| v as f64).collect());
    let parts: [(&str, Matrix); 6] = [
        ("source_features", ds.source_features.clone()),
        ("source_labels", labels(&ds.source_labels)),
        ("target_features", ds.target_features.clone()),
        ("target_labels", labels(ds.target_labels())),
        ("source_attributes", ds.source_attributes.clone()),
        ("target_attributes", ds.target_attributes.clone()),
    ];
    let mut refs = Vec::with_capacity(6);
    for (name, m) in &parts {
        let file = format!("{name}.{ext}");
        save_matrix(m, dir.join(&file), format)?;
        refs.push(BlockRef {
            path: PathBuf::from(file),
            format,
        });
    }
    let mut it = refs.into_iter();
    let mut next = || it.next().expect("six blocks");
    Ok(DatasetManifest {
        name: ds.name.clone(),
        split: ds.split,
        dims: Dims {
            d: ds.feature_dim(),
            r: ds.attribute_dim(),
            ks: ds.num_source_classes(),
            kt: ds.num_target_classes(),
        },
        blocks: Blocks {
            source_features: next(),
            source_labels: next(),
            target_features: next(),
            target_labels: next(),
            source_attributes: next(),
            target_attributes: next(),
        },
        class_names: Some(ClassNames {
            source: ds.source_classes.clone(),
            target: ds.target_classes.clone(),
        }),
    })
}
