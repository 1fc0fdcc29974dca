//! Prediction bundles: one image's network outputs plus ground truth,
//! described by a `bundle.manifest` key=value file.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array3, Axis};
use thiserror::Error;

use super::format::{read_tensor, write_tensor, Tensor, TensorError};
use crate::spatial::{OffsetField, OffsetKind};
use crate::{ClassId, InstanceId};

pub const MANIFEST_NAME: &str = "bundle.manifest";

#[derive(Debug, Error)]
pub enum BundleError {
    #[error("i/o error in {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("no {MANIFEST_NAME} in {0}")]
    MissingManifest(PathBuf),
    #[error("tensor {path}: {source}")]
    Tensor {
        path: PathBuf,
        #[source]
        source: TensorError,
    },
    #[error("missing component: {0}")]
    MissingComponent(String),
    #[error("ambiguous component: {0} given more than once")]
    Ambiguous(String),
    #[error("manifest line {line}: {message}")]
    InvalidManifest { line: usize, message: String },
    #[error("shape mismatch: {a} has shape {a_shape:?} but {b} has shape {b_shape:?}")]
    ShapeMismatch {
        a: String,
        a_shape: Vec<usize>,
        b: String,
        b_shape: Vec<usize>,
    },
    #[error("invariant violation: {0}")]
    InvariantViolation(String),
}

/// Semantic head output.
#[derive(Debug, Clone, PartialEq)]
pub enum SemanticPrediction {
    /// Raw logits, H×W×C.
    Logits(Array3<f64>),
    /// Raw evidential head outputs before `softplus(.) + 1`, H×W×C.
    Dirichlet(Array3<f64>),
}

impl SemanticPrediction {
    pub fn values(&self) -> &Array3<f64> {
        match self {
            SemanticPrediction::Logits(v) | SemanticPrediction::Dirichlet(v) => v,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            SemanticPrediction::Logits(_) => "logits",
            SemanticPrediction::Dirichlet(_) => "dirichlet",
        }
    }
}

/// One image's predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionBundle {
    pub semantic: SemanticPrediction,
    /// Softmax temperature applied to logits; ignored for Dirichlet outputs.
    pub temperature: f64,
    /// H×W center heatmap in `[0, 1]`.
    pub center_heatmap: Array2<f64>,
    /// Offsets in pixels, `(dx, dy)`: pixel position + offset = center.
    pub offsets: OffsetField,
    pub thing_ids: BTreeSet<ClassId>,
    pub ignore_label: ClassId,
}

impl PredictionBundle {
    pub fn height(&self) -> usize {
        self.center_heatmap.nrows()
    }

    pub fn width(&self) -> usize {
        self.center_heatmap.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.semantic.values().len_of(Axis(2))
    }

    /// Check every cross-tensor and value invariant.
    pub fn validate(&self) -> Result<(), BundleError> {
        let (h, w) = self.center_heatmap.dim();
        let sem = self.semantic.values();
        if sem.dim().0 != h || sem.dim().1 != w {
            return Err(BundleError::ShapeMismatch {
                a: "heatmap".into(),
                a_shape: vec![h, w],
                b: "semantic".into(),
                b_shape: sem.shape().to_vec(),
            });
        }
        let (oh, ow) = self.offsets.dim();
        if (oh, ow) != (h, w) {
            return Err(BundleError::ShapeMismatch {
                a: "heatmap".into(),
                a_shape: vec![h, w],
                b: "offsets".into(),
                b_shape: self.offsets.shape(),
            });
        }
        if self.num_classes() == 0 {
            return Err(BundleError::InvariantViolation("semantic has zero classes".into()));
        }
        if sem.iter().any(|v| !v.is_finite()) {
            return Err(BundleError::InvariantViolation("non-finite semantic value".into()));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(BundleError::InvariantViolation(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if let Some(v) = self.center_heatmap.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(BundleError::InvariantViolation(format!("heatmap value {v} outside [0, 1]")));
        }
        self.offsets
            .validate()
            .map_err(|e| BundleError::InvariantViolation(e.to_string()))?;
        let c = self.num_classes() as ClassId;
        if let Some(t) = self.thing_ids.iter().find(|&&t| t >= c) {
            return Err(BundleError::InvariantViolation(format!(
                "thing id {t} outside [0, {c})"
            )));
        }
        Ok(())
    }
}

/// Ground-truth panoptic labels.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    class_id: Array2<ClassId>,
    instance_id: Array2<InstanceId>,
}

impl GroundTruth {
    pub fn new(class_id: Array2<ClassId>, instance_id: Array2<InstanceId>) -> Result<Self, BundleError> {
        if class_id.dim() != instance_id.dim() {
            return Err(BundleError::ShapeMismatch {
                a: "gt class".into(),
                a_shape: class_id.shape().to_vec(),
                b: "gt instance".into(),
                b_shape: instance_id.shape().to_vec(),
            });
        }
        Ok(Self { class_id, instance_id })
    }

    pub fn dim(&self) -> (usize, usize) {
        self.class_id.dim()
    }

    /// Semantic view: per-pixel class ids.
    pub fn semantic(&self) -> &Array2<ClassId> {
        &self.class_id
    }

    pub fn instances(&self) -> &Array2<InstanceId> {
        &self.instance_id
    }

    pub fn validate(
        &self,
        num_classes: usize,
        thing_ids: &BTreeSet<ClassId>,
        ignore_label: ClassId,
    ) -> Result<(), BundleError> {
        for ((&c, &inst), idx) in self.class_id.iter().zip(self.instance_id.iter()).zip(0..) {
            if c == ignore_label {
                continue;
            }
            if c as usize >= num_classes {
                return Err(BundleError::InvariantViolation(format!(
                    "gt class {c} at pixel {idx} outside [0, {num_classes})"
                )));
            }
            let thing = thing_ids.contains(&c);
            if thing && inst == 0 {
                return Err(BundleError::InvariantViolation(format!(
                    "gt thing pixel {idx} (class {c}) has instance id 0"
                )));
            }
            if !thing && inst != 0 {
                return Err(BundleError::InvariantViolation(format!(
                    "gt stuff pixel {idx} (class {c}) has instance id {inst}"
                )));
            }
        }
        Ok(())
    }

    /// Pixels whose gt class is a thing class.
    pub fn thing_mask(&self, thing_ids: &BTreeSet<ClassId>) -> Array2<bool> {
        self.class_id.mapv(|c| thing_ids.contains(&c))
    }

    /// Center of mass `(y, x)` of every thing instance, keyed by `(class, instance)`.
    pub fn instance_centers(&self, thing_ids: &BTreeSet<ClassId>) -> BTreeMap<(ClassId, InstanceId), (f64, f64)> {
        let mut acc: BTreeMap<(ClassId, InstanceId), (f64, f64, f64)> = BTreeMap::new();
        for ((y, x), &c) in self.class_id.indexed_iter() {
            if !thing_ids.contains(&c) {
                continue;
            }
            let e = acc.entry((c, self.instance_id[[y, x]])).or_insert((0.0, 0.0, 0.0));
            e.0 += y as f64;
            e.1 += x as f64;
            e.2 += 1.0;
        }
        acc.into_iter()
            .map(|(k, (sy, sx, n))| (k, (sy / n, sx / n)))
            .collect()
    }

    /// Ground-truth offsets `(dx, dy)` from each thing pixel to its
    /// instance's center of mass; zero elsewhere.
    pub fn offsets(&self, thing_ids: &BTreeSet<ClassId>) -> Array3<f64> {
        let centers = self.instance_centers(thing_ids);
        let (h, w) = self.dim();
        let mut out = Array3::zeros((h, w, 2));
        for ((y, x), &c) in self.class_id.indexed_iter() {
            if let Some(&(cy, cx)) = centers.get(&(c, self.instance_id[[y, x]])) {
                out[[y, x, 0]] = cx - x as f64;
                out[[y, x, 1]] = cy - y as f64;
            }
        }
        out
    }

    fn to_tensor(&self) -> Tensor {
        let (h, w) = self.dim();
        let mut data = Vec::with_capacity(h * w * 2);
        for (&c, &i) in self.class_id.iter().zip(self.instance_id.iter()) {
            data.push(c as i32);
            data.push(i as i32);
        }
        Tensor::new(vec![h, w, 2], super::TensorData::I32(data)).expect("consistent shape")
    }

    fn from_tensor(t: &Tensor) -> Result<Self, String> {
        let arr = t.to_i64_array().map_err(|e| e.to_string())?;
        if arr.ndim() != 3 || arr.shape()[2] != 2 {
            return Err(format!("gt_panoptic must be H×W×2, got {:?}", arr.shape()));
        }
        if let Some(v) = arr.iter().find(|&&v| v < 0 || v > i64::from(u32::MAX)) {
            return Err(format!("gt_panoptic value {v} is negative"));
        }
        let arr = arr.into_dimensionality::<ndarray::Ix3>().expect("rank checked");
        let class_id = arr.slice(s![.., .., 0]).mapv(|v| v as ClassId);
        let instance_id = arr.slice(s![.., .., 1]).mapv(|v| v as InstanceId);
        Ok(Self { class_id, instance_id })
    }
}

#[derive(Debug, Default)]
struct Manifest {
    entries: BTreeMap<String, String>,
}

const MANIFEST_KEYS: &[&str] = &[
    "semantic_kind",
    "semantic",
    "heatmap",
    "offsets_kind",
    "offsets",
    "gt_panoptic",
    "thing_ids",
    "ignore_label",
    "temperature",
];

impl Manifest {
    fn parse(text: &str) -> Result<Self, BundleError> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| BundleError::InvalidManifest {
                line: n + 1,
                message: format!("expected key=value, got {line:?}"),
            })?;
            let key = key.trim();
            if !MANIFEST_KEYS.contains(&key) {
                return Err(BundleError::InvalidManifest {
                    line: n + 1,
                    message: format!("unknown key {key:?}"),
                });
            }
            if entries.insert(key.to_string(), value.trim().to_string()).is_some() {
                return Err(BundleError::Ambiguous(key.to_string()));
            }
        }
        Ok(Self { entries })
    }

    fn get(&self, key: &str) -> Result<&str, BundleError> {
        self.entries
            .get(key)
            .map(String::as_str)
            .filter(|v| !v.is_empty())
            .ok_or_else(|| BundleError::MissingComponent(key.to_string()))
    }

    fn invalid(key: &str, message: impl Into<String>) -> BundleError {
        BundleError::InvariantViolation(format!("{key}: {}", message.into()))
    }
}

fn read_component(dir: &Path, file: &str) -> Result<Tensor, BundleError> {
    let path = dir.join(file);
    if !path.exists() {
        return Err(BundleError::MissingComponent(path.display().to_string()));
    }
    read_tensor(&path).map_err(|source| BundleError::Tensor { path, source })
}

fn shape_err(a: &str, a_shape: &[usize], b: &str, b_shape: &[usize]) -> BundleError {
    BundleError::ShapeMismatch {
        a: a.into(),
        a_shape: a_shape.to_vec(),
        b: b.into(),
        b_shape: b_shape.to_vec(),
    }
}

/// Load and validate a bundle directory.
pub fn load_bundle(dir: impl AsRef<Path>) -> Result<(PredictionBundle, GroundTruth), BundleError> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST_NAME);
    if !manifest_path.is_file() {
        return Err(BundleError::MissingManifest(dir.to_path_buf()));
    }
    let text = fs::read_to_string(&manifest_path).map_err(|source| BundleError::Io {
        path: manifest_path.clone(),
        source,
    })?;
    let m = Manifest::parse(&text)?;

    let semantic_kind = m.get("semantic_kind")?;
    let tensor_err = |key: &str, e: TensorError| Manifest::invalid(key, e.to_string());
    let semantic_values = read_component(dir, m.get("semantic")?)?
        .to_array3_f64()
        .map_err(|e| tensor_err("semantic", e))?;
    let semantic = match semantic_kind {
        "logits" => SemanticPrediction::Logits(semantic_values),
        "dirichlet" => SemanticPrediction::Dirichlet(semantic_values),
        k if k.contains(',') => return Err(BundleError::Ambiguous(format!("semantic_kind ({k})"))),
        other => return Err(Manifest::invalid("semantic_kind", format!("unknown kind {other:?}"))),
    };

    let heatmap_t = read_component(dir, m.get("heatmap")?)?;
    let center_heatmap = heatmap_t.to_array2_f64().map_err(|e| tensor_err("heatmap", e))?;
    let (h, w) = center_heatmap.dim();

    let offsets_kind = match m.get("offsets_kind")? {
        "point" => OffsetKind::Point,
        "gaussian" => OffsetKind::Gaussian,
        "samples" => OffsetKind::Samples,
        k if k.contains(',') => return Err(BundleError::Ambiguous(format!("offsets_kind ({k})"))),
        other => return Err(Manifest::invalid("offsets_kind", format!("unknown kind {other:?}"))),
    };
    let offsets_t = read_component(dir, m.get("offsets")?)?;
    let oshape = offsets_t.shape().to_vec();
    if oshape.len() < 2 || oshape[0] != h || oshape[1] != w {
        return Err(shape_err("heatmap", &[h, w], "offsets", &oshape));
    }
    let offsets = OffsetField::from_tensor(offsets_kind, &offsets_t).map_err(|e| Manifest::invalid("offsets", e.to_string()))?;

    let sshape = semantic.values().shape().to_vec();
    if sshape[0] != h || sshape[1] != w {
        return Err(shape_err("heatmap", &[h, w], "semantic", &sshape));
    }

    let gt_t = read_component(dir, m.get("gt_panoptic")?)?;
    let gshape = gt_t.shape().to_vec();
    if gshape.len() != 3 || gshape[0] != h || gshape[1] != w {
        return Err(shape_err("heatmap", &[h, w], "gt_panoptic", &gshape));
    }
    let gt = GroundTruth::from_tensor(&gt_t).map_err(|e| Manifest::invalid("gt_panoptic", e))?;

    let thing_ids = parse_thing_ids(m.get("thing_ids").unwrap_or(""))?;
    let ignore_label = m
        .get("ignore_label")?
        .parse::<ClassId>()
        .map_err(|e| Manifest::invalid("ignore_label", e.to_string()))?;
    let temperature = match m.entries.get("temperature").map(|s| s.as_str()) {
        None | Some("") => 1.0,
        Some(t) => t.parse::<f64>().map_err(|e| Manifest::invalid("temperature", e.to_string()))?,
    };

    let bundle = PredictionBundle {
        semantic,
        temperature,
        center_heatmap,
        offsets,
        thing_ids,
        ignore_label,
    };
    bundle.validate()?;
    gt.validate(bundle.num_classes(), &bundle.thing_ids, bundle.ignore_label)?;
    Ok((bundle, gt))
}

fn parse_thing_ids(s: &str) -> Result<BTreeSet<ClassId>, BundleError> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<ClassId>().map_err(|e| Manifest::invalid("thing_ids", format!("{t:?}: {e}"))))
        .collect()
}

/// Write a bundle directory (tensors as f64, gt as i32) with its manifest.
pub fn save_bundle(dir: impl AsRef<Path>, bundle: &PredictionBundle, gt: &GroundTruth) -> Result<(), BundleError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|source| BundleError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let write = |name: &str, t: &Tensor| {
        let path = dir.join(name);
        write_tensor(t, &path).map_err(|source| BundleError::Tensor { path, source })
    };
    let conv = |r: Result<Tensor, TensorError>| r.map_err(|e| BundleError::InvariantViolation(e.to_string()));
    write("semantic.ppdl", &conv(Tensor::from_f64(bundle.semantic.values()))?)?;
    write("heatmap.ppdl", &conv(Tensor::from_f64(&bundle.center_heatmap))?)?;
    write("offsets.ppdl", &bundle.offsets.to_tensor())?;
    write("gt_panoptic.ppdl", &gt.to_tensor())?;
    let things: Vec<String> = bundle.thing_ids.iter().map(|t| t.to_string()).collect();
    let manifest = format!(
        "semantic_kind={}\nsemantic=semantic.ppdl\nheatmap=heatmap.ppdl\noffsets_kind={}\noffsets=offsets.ppdl\ngt_panoptic=gt_panoptic.ppdl\nthing_ids={}\nignore_label={}\ntemperature={}\n",
        bundle.semantic.kind_name(),
        bundle.offsets.kind().name(),
        things.join(","),
        bundle.ignore_label,
        bundle.temperature,
    );
    let path = dir.join(MANIFEST_NAME);
    fs::write(&path, manifest).map_err(|source| BundleError::Io { path, source })
}
