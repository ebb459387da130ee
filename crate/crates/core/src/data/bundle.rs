use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::matrix::{FeatureMatrix, WeightMatrix};
use super::tensor::{load_tensor, save_tensor, save_values};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OodKind {
    Near,
    Far,
}

impl OodKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OodKind::Near => "near",
            OodKind::Far => "far",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OodSet {
    pub name: String,
    pub kind: OodKind,
    pub features: FeatureMatrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    pub id_train: FeatureMatrix,
    pub id_val: Option<FeatureMatrix>,
    pub id_test: FeatureMatrix,
    pub ood_sets: Vec<OodSet>,
}

impl DatasetBundle {
    pub fn new(
        id_train: FeatureMatrix,
        id_val: Option<FeatureMatrix>,
        id_test: FeatureMatrix,
        ood_sets: Vec<OodSet>,
    ) -> Result<Self> {
        let k = id_train.n_features();
        id_test.expect_features(k, "id_test features vs id_train")?;
        if let Some(v) = &id_val {
            v.expect_features(k, "id_val features vs id_train")?;
        }
        for s in &ood_sets {
            s.features.expect_features(k, "ood set features vs id_train")?;
        }
        Ok(Self {
            id_train,
            id_val,
            id_test,
            ood_sets,
        })
    }

    pub fn n_features(&self) -> usize {
        self.id_train.n_features()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Features,
    Weights,
    Bias,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tag {
    IdTrain,
    IdVal,
    IdTest,
    Ood,
}

/// `<name>.meta.json` sidecar next to each tensor file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorMeta {
    pub role: Role,
    pub dataset: String,
    pub tag: Tag,
    pub near: bool,
}

pub fn write_meta(path: &Path, meta: &TensorMeta) -> Result<()> {
    let text = serde_json::to_string_pretty(meta).expect("meta serializes");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_meta(path: &Path) -> Result<TensorMeta> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_owned(),
        source,
    })
}

fn write_entry(dir: &Path, stem: &str, m: &impl AsRef<super::Matrix>, meta: TensorMeta) -> Result<()> {
    save_tensor(dir.join(format!("{stem}.wpft")), m)?;
    write_meta(&dir.join(format!("{stem}.meta.json")), &meta)
}

/// Writes a bundle (and optionally the classifier head) as WPFT files plus sidecars.
pub fn save_bundle(dir: &Path, bundle: &DatasetBundle, head: Option<&WeightMatrix>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = |role, dataset: &str, tag, near| TensorMeta {
        role,
        dataset: dataset.to_owned(),
        tag,
        near,
    };
    write_entry(dir, "id_train", &bundle.id_train, meta(Role::Features, "id", Tag::IdTrain, false))?;
    if let Some(v) = &bundle.id_val {
        write_entry(dir, "id_val", v, meta(Role::Features, "id", Tag::IdVal, false))?;
    }
    write_entry(dir, "id_test", &bundle.id_test, meta(Role::Features, "id", Tag::IdTest, false))?;
    for s in &bundle.ood_sets {
        write_entry(
            dir,
            &format!("ood_{}", s.name),
            &s.features,
            meta(Role::Features, &s.name, Tag::Ood, s.kind == OodKind::Near),
        )?;
    }
    if let Some(w) = head {
        write_entry(dir, "weights", w, meta(Role::Weights, "classifier", Tag::IdTrain, false))?;
        let c = w.n_classes();
        save_values(dir.join("bias.wpft"), 1, c, w.bias().to_vec())?;
        write_meta(
            &dir.join("bias.meta.json"),
            &meta(Role::Bias, "classifier", Tag::IdTrain, false),
        )?;
    }
    Ok(())
}

/// Reads every `*.meta.json` in `dir` (sorted by file name) and assembles the bundle.
pub fn load_bundle(dir: &Path) -> Result<(DatasetBundle, Option<WeightMatrix>)> {
    let mut metas: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.to_string_lossy().ends_with(".meta.json"))
        .collect();
    metas.sort();

    let (mut train, mut val, mut test) = (None, None, None);
    let (mut weights, mut bias) = (None, None);
    let mut ood = Vec::new();
    for meta_path in metas {
        let meta = read_meta(&meta_path)?;
        let name = meta_path.file_name().unwrap().to_string_lossy();
        let stem = name.trim_end_matches(".meta.json");
        let m = load_tensor(dir.join(format!("{stem}.wpft")))?;
        match (meta.role, meta.tag) {
            (Role::Weights, _) => weights = Some(m),
            (Role::Bias, _) => bias = Some(m),
            (Role::Features, Tag::IdTrain) => train = Some(FeatureMatrix::from(m)),
            (Role::Features, Tag::IdVal) => val = Some(FeatureMatrix::from(m)),
            (Role::Features, Tag::IdTest) => test = Some(FeatureMatrix::from(m)),
            (Role::Features, Tag::Ood) => ood.push(OodSet {
                name: meta.dataset,
                kind: if meta.near { OodKind::Near } else { OodKind::Far },
                features: FeatureMatrix::from(m),
            }),
        }
    }
    let missing = |what: &str| Error::MissingData(format!("{}: no {what} tensor", dir.display()));
    let bundle = DatasetBundle::new(
        train.ok_or_else(|| missing("id_train"))?,
        val,
        test.ok_or_else(|| missing("id_test"))?,
        ood,
    )?;
    let head = match weights {
        None => None,
        Some(w) => Some(match bias {
            Some(b) => WeightMatrix::with_bias(w, b.into_vec())?,
            None => WeightMatrix::new(w)?,
        }),
    };
    Ok((bundle, head))
}

/// Loads a head from a weights file and an optional 1×C bias file.
pub fn load_head(weights: &Path, bias: Option<&Path>) -> Result<WeightMatrix> {
    let w = load_tensor(weights)?;
    match bias {
        Some(b) => WeightMatrix::with_bias(w, load_tensor(b)?.into_vec()),
        None => WeightMatrix::new(w),
    }
}
