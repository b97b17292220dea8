//! Python bindings: tensors and the differentiable ops, partitions, metrics,
//! the model, feature files and the self-test.

use std::fs;
use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use voxbox::io::{read_feature_file, FeatureFile, FeatureLevel};
use voxbox::loss::{binarize_logits, dice_ce_loss, LossConfig, OverlapCounts};
use voxbox::model::{Model, ModelConfig};
use voxbox::nn::{conv3d, conv_transpose3d, instance_norm3d, interp_trilinear, ConvSpec};
use voxbox::train::{cv_split as core_cv_split, lr_at as core_lr_at, predict_logits};

create_exception!(voxbox_py, VoxboxError, PyException);

fn err(e: voxbox::Error) -> PyErr {
    VoxboxError::new_err(e.to_string())
}

type Core = voxbox::Tensor<f64>;

#[pyclass(name = "Tensor", module = "voxbox_py", frozen, from_py_object)]
#[derive(Clone)]
pub struct PyTensor {
    inner: Core,
}

impl From<Core> for PyTensor {
    fn from(inner: Core) -> Self {
        PyTensor { inner }
    }
}

#[pymethods]
impl PyTensor {
    #[new]
    #[pyo3(signature = (data, shape, requires_grad = false))]
    fn new(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> PyResult<Self> {
        let t = if requires_grad {
            Core::parameter(data, &shape)
        } else {
            Core::new(data, &shape)
        };
        Ok(t.map_err(err)?.into())
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    #[getter]
    fn data(&self) -> Vec<f64> {
        self.inner.to_vec()
    }

    #[getter]
    fn requires_grad(&self) -> bool {
        self.inner.requires_grad()
    }

    /// Accumulated gradient, or `None` before any backward pass reached it.
    #[getter]
    fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad()
    }

    fn zero_grad(&self) {
        self.inner.zero_grad();
    }

    fn numel(&self) -> usize {
        self.inner.numel()
    }

    fn item(&self) -> f64 {
        self.inner.item()
    }

    fn __len__(&self) -> usize {
        self.inner.shape()[0]
    }

    fn __repr__(&self) -> String {
        format!(
            "Tensor(shape={:?}, requires_grad={})",
            self.inner.shape(),
            self.inner.requires_grad()
        )
    }
}

#[pyclass(name = "Partition", module = "voxbox_py", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct PyPartition {
    inner: voxbox::Partition,
}

#[pymethods]
impl PyPartition {
    /// Split `volume` into `cubes` equal sub-cubes (1, 8, 27, ...).
    #[new]
    fn new(volume: [usize; 3], cubes: usize) -> PyResult<Self> {
        Ok(PyPartition {
            inner: voxbox::Partition::from_cube_count(volume, cubes).map_err(err)?,
        })
    }

    #[staticmethod]
    fn with_cube(volume: [usize; 3], cube: [usize; 3]) -> PyResult<Self> {
        Ok(PyPartition {
            inner: voxbox::Partition::new(volume, cube).map_err(err)?,
        })
    }

    #[getter]
    fn volume_extents(&self) -> [usize; 3] {
        self.inner.volume_extents()
    }

    #[getter]
    fn cube_extents(&self) -> [usize; 3] {
        self.inner.cube_extents()
    }

    #[getter]
    fn offsets(&self) -> Vec<[usize; 3]> {
        self.inner.offsets().to_vec()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

fn spec(x: &Core, w: &Core, stride: [usize; 3], padding: [usize; 3], transposed: bool) -> PyResult<ConvSpec> {
    let ws = w.shape();
    if ws.len() != 5 || x.rank() != 5 {
        return Err(VoxboxError::new_err("conv inputs must be 5-D"));
    }
    let (cin, cout) = if transposed { (ws[0], ws[1]) } else { (ws[1], ws[0]) };
    Ok(ConvSpec::new(cin, cout, [ws[2], ws[3], ws[4]])
        .with_stride(stride)
        .with_padding(padding))
}

/// Recording context for differentiable ops. A suspended tape computes
/// values only.
#[pyclass(name = "Tape", module = "voxbox_py", unsendable)]
pub struct PyTape {
    inner: voxbox::Tape<f64>,
}

#[pymethods]
impl PyTape {
    #[new]
    #[pyo3(signature = (recording = true))]
    fn new(recording: bool) -> Self {
        PyTape {
            inner: if recording {
                voxbox::Tape::new()
            } else {
                voxbox::Tape::suspended()
            },
        }
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn recorded_bytes(&self) -> usize {
        self.inner.recorded_bytes()
    }

    #[getter]
    fn peak_bytes(&self) -> usize {
        self.inner.meter().peak_bytes()
    }

    #[pyo3(signature = (x, w, b, stride = [1, 1, 1], padding = [0, 0, 0]))]
    fn conv3d(
        &self,
        x: &PyTensor,
        w: &PyTensor,
        b: &PyTensor,
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> PyResult<PyTensor> {
        let s = spec(&x.inner, &w.inner, stride, padding, false)?;
        Ok(conv3d(&self.inner, &x.inner, &w.inner, &b.inner, &s)
            .map_err(err)?
            .into())
    }

    #[pyo3(signature = (x, w, b, stride = [1, 1, 1], padding = [0, 0, 0]))]
    fn conv_transpose3d(
        &self,
        x: &PyTensor,
        w: &PyTensor,
        b: &PyTensor,
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> PyResult<PyTensor> {
        let s = spec(&x.inner, &w.inner, stride, padding, true)?;
        Ok(conv_transpose3d(&self.inner, &x.inner, &w.inner, &b.inner, &s)
            .map_err(err)?
            .into())
    }

    fn interp_trilinear(&self, x: &PyTensor, extents: [usize; 3]) -> PyResult<PyTensor> {
        Ok(interp_trilinear(&self.inner, &x.inner, extents).map_err(err)?.into())
    }

    #[pyo3(signature = (x, gamma, beta, eps = 1e-5))]
    fn instance_norm3d(&self, x: &PyTensor, gamma: &PyTensor, beta: &PyTensor, eps: f64) -> PyResult<PyTensor> {
        Ok(instance_norm3d(&self.inner, &x.inner, &gamma.inner, &beta.inner, eps)
            .map_err(err)?
            .into())
    }

    fn add(&self, a: &PyTensor, b: &PyTensor) -> PyResult<PyTensor> {
        Ok(self.inner.add(&a.inner, &b.inner).map_err(err)?.into())
    }

    fn mul(&self, a: &PyTensor, b: &PyTensor) -> PyResult<PyTensor> {
        Ok(self.inner.mul(&a.inner, &b.inner).map_err(err)?.into())
    }

    fn relu(&self, x: &PyTensor) -> PyTensor {
        self.inner.relu(&x.inner).into()
    }

    fn sigmoid(&self, x: &PyTensor) -> PyTensor {
        self.inner.sigmoid(&x.inner).into()
    }

    fn sum(&self, x: &PyTensor) -> PyTensor {
        self.inner.sum(&x.inner).into()
    }

    fn slice(&self, x: &PyTensor, offsets: Vec<usize>, extents: Vec<usize>) -> PyResult<PyTensor> {
        Ok(self.inner.slice_view(&x.inner, &offsets, &extents).map_err(err)?.into())
    }

    fn assemble(&self, blocks: Vec<PyTensor>, partition: &PyPartition) -> PyResult<PyTensor> {
        let blocks: Vec<Core> = blocks.into_iter().map(|b| b.inner).collect();
        Ok(self.inner.assemble(&blocks, &partition.inner).map_err(err)?.into())
    }

    fn disassemble(&self, x: &PyTensor, partition: &PyPartition) -> PyResult<Vec<PyTensor>> {
        let parts = self.inner.disassemble(&x.inner, &partition.inner).map_err(err)?;
        Ok(parts.into_iter().map(PyTensor::from).collect())
    }

    #[pyo3(signature = (logits, target, lambda_dice = 1.0, lambda_ce = 1.0, smooth = 1e-5))]
    fn dice_ce_loss(
        &self,
        logits: &PyTensor,
        target: &PyTensor,
        lambda_dice: f64,
        lambda_ce: f64,
        smooth: f64,
    ) -> PyResult<PyTensor> {
        let cfg = LossConfig {
            lambda_dice,
            lambda_ce,
            smooth,
        };
        cfg.validate().map_err(err)?;
        Ok(dice_ce_loss(&self.inner, &logits.inner, &target.inner, &cfg)
            .map_err(err)?
            .into())
    }

    /// Back-propagate from `root`; `seed` defaults to ones.
    #[pyo3(signature = (root, seed = None))]
    fn backward(&self, root: &PyTensor, seed: Option<&PyTensor>) -> PyResult<()> {
        let seed = match seed {
            Some(s) => s.inner.clone(),
            None => Core::full(root.inner.shape(), 1.0),
        };
        self.inner.backward(&root.inner, &seed).map_err(err)
    }

    fn clear(&self) {
        self.inner.clear();
    }
}

#[pyclass(name = "Model", module = "voxbox_py", unsendable)]
pub struct PyModel {
    inner: Model<f64>,
}

#[pymethods]
impl PyModel {
    /// Build from the JSON `model` section of a run configuration.
    #[new]
    fn new(config_json: &str) -> PyResult<Self> {
        let cfg: ModelConfig = serde_json::from_str(config_json).map_err(|e| VoxboxError::new_err(e.to_string()))?;
        Ok(PyModel {
            inner: Model::new(&cfg).map_err(err)?,
        })
    }

    /// Small toy-encoder model for experiments.
    #[staticmethod]
    #[pyo3(signature = (native_size = 8, patch_size = 4, d_emb = 4, width = 2))]
    fn toy(native_size: usize, patch_size: usize, d_emb: usize, width: usize) -> PyResult<Self> {
        Ok(PyModel {
            inner: Model::new(&ModelConfig::toy(native_size, patch_size, d_emb, width)).map_err(err)?,
        })
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.inner.parameter_count()
    }

    fn parameter_names(&self) -> Vec<String> {
        self.inner.parameters().into_iter().map(|(n, _)| n).collect()
    }

    /// Logits for a `(1, 1, d, h, w)` image, assembled over `cubes` sub-cubes.
    #[pyo3(signature = (image, cubes = 1, subject = "subject"))]
    fn predict_logits(&self, image: &PyTensor, cubes: usize, subject: &str) -> PyResult<PyTensor> {
        let s = image.inner.shape();
        if s.len() != 5 {
            return Err(VoxboxError::new_err(format!("image must be (1,1,D,H,W), got {s:?}")));
        }
        let p = voxbox::Partition::from_cube_count([s[2], s[3], s[4]], cubes).map_err(err)?;
        Ok(predict_logits(&self.inner, &image.inner, subject, &p)
            .map_err(err)?
            .into())
    }

    #[pyo3(signature = (image, cubes = 1, subject = "subject"))]
    fn predict_mask(&self, image: &PyTensor, cubes: usize, subject: &str) -> PyResult<Vec<bool>> {
        let logits = self.predict_logits(image, cubes, subject)?;
        Ok(binarize_logits(logits.inner.data()))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    fn load(&mut self, path: PathBuf) -> PyResult<()> {
        self.inner.load(&path).map_err(err)
    }
}

/// Contents of a VXF1 encoder feature file.
#[pyclass(name = "FeatureFile", module = "voxbox_py", frozen, get_all)]
pub struct PyFeatureFile {
    subject_id: String,
    encoder_tag: String,
    /// `((d_emb, depth, grid_h, grid_w), values)` per level, shallowest first.
    levels: Vec<([usize; 4], Vec<f32>)>,
    checksum: u64,
}

#[pyfunction]
fn read_features(path: PathBuf) -> PyResult<PyFeatureFile> {
    let f = read_feature_file(&path).map_err(err)?;
    Ok(PyFeatureFile {
        subject_id: f.subject_id,
        encoder_tag: f.encoder_tag,
        levels: f.levels.into_iter().map(|l| (l.extents, l.data)).collect(),
        checksum: f.checksum,
    })
}

/// Write a VXF1 file; returns the stored checksum.
#[pyfunction]
fn write_features(
    path: PathBuf,
    subject_id: &str,
    encoder_tag: &str,
    levels: Vec<([usize; 4], Vec<f32>)>,
) -> PyResult<u64> {
    let mut out = Vec::with_capacity(levels.len());
    for (extents, data) in levels {
        if extents.iter().product::<usize>() != data.len() {
            return Err(VoxboxError::new_err(format!(
                "level extents {extents:?} do not match {} values",
                data.len()
            )));
        }
        out.push(FeatureLevel { extents, data });
    }
    let bytes = FeatureFile {
        subject_id: subject_id.to_string(),
        encoder_tag: encoder_tag.to_string(),
        levels: out,
        checksum: 0,
    }
    .encode();
    fs::write(&path, &bytes).map_err(|e| err(e.into()))?;
    Ok(u64::from_le_bytes(
        bytes[bytes.len() - 8..].try_into().expect("eight bytes"),
    ))
}

/// `(dsc, iou, vol_error_pct)`; the last is `None` for an empty ground truth.
#[pyfunction]
fn overlap_metrics(pred: Vec<bool>, gt: Vec<bool>) -> PyResult<(f64, f64, Option<f64>)> {
    let c = OverlapCounts::new(&pred, &gt).map_err(err)?;
    Ok((c.dsc(), c.iou(), c.vol_error_pct()))
}

#[pyfunction]
fn lr_at(epoch: usize, base: f64, warmup: usize, epochs: usize) -> f64 {
    core_lr_at(epoch, base, warmup, epochs)
}

#[pyfunction]
#[pyo3(signature = (n, fold, k = 5, seed = 0))]
fn cv_split(n: usize, fold: usize, k: usize, seed: u64) -> PyResult<(Vec<usize>, Vec<usize>)> {
    core_cv_split(n, fold, k, seed).map_err(err)
}

/// `(suite, name, passed, detail)` for each built-in check.
#[pyfunction]
fn selftest() -> PyResult<Vec<(String, String, bool, String)>> {
    let checks = voxbox::selftest::run().map_err(err)?;
    Ok(checks
        .into_iter()
        .map(|c| (c.suite.to_string(), c.name, c.passed, c.detail))
        .collect())
}

#[pymodule]
pub fn voxbox_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("VoxboxError", m.py().get_type::<VoxboxError>())?;
    m.add_class::<PyTensor>()?;
    m.add_class::<PyPartition>()?;
    m.add_class::<PyTape>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyFeatureFile>()?;
    m.add_function(wrap_pyfunction!(read_features, m)?)?;
    m.add_function(wrap_pyfunction!(write_features, m)?)?;
    m.add_function(wrap_pyfunction!(overlap_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(lr_at, m)?)?;
    m.add_function(wrap_pyfunction!(cv_split, m)?)?;
    m.add_function(wrap_pyfunction!(selftest, m)?)?;
    Ok(())
}
