//! Python bindings for instarec.

use std::path::PathBuf;

use image::{GrayImage, RgbImage};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

use instarec::baselines::{self, HistogramMetric, KeypointConfig};
use instarec::dataset::{self, PoseLabel};
use instarec::evalkit::{self, BoxNoiseParams};
use instarec::network::{self, ArchConfig};
use instarec::{augment, cli, pipeline, seed, synth, Error};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn metric(name: &str) -> PyResult<HistogramMetric> {
    name.parse().map_err(to_py)
}

/// One observation of an object instance.
#[pyclass(name = "ImageSample", module = "instarec_py", from_py_object)]
#[derive(Clone)]
pub struct PyImageSample {
    inner: dataset::ImageSample,
}

#[pymethods]
impl PyImageSample {
    #[new]
    #[pyo3(signature = (pixels, width, height, instance_id, elevation_deg, azimuth_deg, mask=None, category="".to_string(), category_id=0, textured=false))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        pixels: Vec<u8>,
        width: u32,
        height: u32,
        instance_id: u32,
        elevation_deg: f64,
        azimuth_deg: f64,
        mask: Option<Vec<u8>>,
        category: String,
        category_id: u32,
        textured: bool,
    ) -> PyResult<Self> {
        let pixels = RgbImage::from_raw(width, height, pixels)
            .ok_or_else(|| PyValueError::new_err("pixel buffer must hold width*height*3 bytes"))?;
        let mask = match mask {
            Some(m) => Some(
                GrayImage::from_raw(width, height, m)
                    .ok_or_else(|| PyValueError::new_err("mask must hold width*height bytes"))?,
            ),
            None => None,
        };
        let inner = dataset::ImageSample {
            pixels,
            mask,
            pose: PoseLabel::new(elevation_deg, azimuth_deg).map_err(to_py)?,
            instance_id,
            category_id,
            category,
            textured,
        };
        inner.validate().map_err(to_py)?;
        Ok(Self { inner })
    }

    #[getter]
    fn instance_id(&self) -> u32 {
        self.inner.instance_id
    }

    #[getter]
    fn category(&self) -> &str {
        &self.inner.category
    }

    #[getter]
    fn textured(&self) -> bool {
        self.inner.textured
    }

    #[getter]
    fn elevation_deg(&self) -> f64 {
        self.inner.pose.elevation_deg
    }

    #[getter]
    fn azimuth_deg(&self) -> f64 {
        self.inner.pose.azimuth_deg
    }

    /// `(width, height)`.
    #[getter]
    fn size(&self) -> (u32, u32) {
        self.inner.dimensions()
    }

    /// Row-major RGB bytes.
    fn pixels<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, self.inner.pixels.as_raw())
    }

    fn mask<'py>(&self, py: Python<'py>) -> Option<Bound<'py, PyBytes>> {
        self.inner
            .mask
            .as_ref()
            .map(|m| PyBytes::new(py, m.as_raw()))
    }

    fn __repr__(&self) -> String {
        format!(
            "ImageSample(instance_id={}, elevation_deg={}, azimuth_deg={}, size={:?})",
            self.inner.instance_id,
            self.inner.pose.elevation_deg,
            self.inner.pose.azimuth_deg,
            self.inner.dimensions()
        )
    }
}

fn unwrap_samples(samples: &[PyImageSample]) -> Vec<dataset::ImageSample> {
    samples.iter().map(|s| s.inner.clone()).collect()
}

fn wrap_samples(samples: Vec<dataset::ImageSample>) -> Vec<PyImageSample> {
    samples
        .into_iter()
        .map(|inner| PyImageSample { inner })
        .collect()
}

#[pyfunction]
fn load_dataset(root: PathBuf) -> PyResult<Vec<PyImageSample>> {
    dataset::load_dataset(&root)
        .map(wrap_samples)
        .map_err(to_py)
}

#[pyfunction]
fn save_dataset(root: PathBuf, samples: Vec<PyImageSample>) -> PyResult<()> {
    dataset::save_dataset(&root, &unwrap_samples(&samples)).map_err(to_py)
}

/// Render the synthetic corpus into `out`. `config_json` overrides defaults.
#[pyfunction]
#[pyo3(signature = (out, seed=0, config_json=None))]
fn synthesize(out: PathBuf, seed: u64, config_json: Option<&str>) -> PyResult<()> {
    let cfg: synth::SynthConfig = match config_json {
        Some(s) => serde_json::from_str(s).map_err(|e| PyValueError::new_err(e.to_string()))?,
        None => synth::SynthConfig::default(),
    };
    let ds = synth::synthesize(&cfg, seed).map_err(to_py)?;
    synth::write_synth(&ds, &out).map_err(to_py)
}

/// Returns `(gallery, queries, num_classes)`.
#[pyfunction]
#[pyo3(signature = (samples, train_elevation=30.0, test_elevation=45.0))]
fn one_shot_split(
    samples: Vec<PyImageSample>,
    train_elevation: f64,
    test_elevation: f64,
) -> PyResult<(Vec<PyImageSample>, Vec<PyImageSample>, usize)> {
    let split =
        dataset::make_one_shot_split(&unwrap_samples(&samples), train_elevation, test_elevation)
            .map_err(to_py)?;
    Ok((
        wrap_samples(split.train),
        wrap_samples(split.test),
        split.num_classes,
    ))
}

/// A convolutional classifier with f32 parameters.
#[pyclass(name = "Network", module = "instarec_py")]
pub struct PyNetwork {
    inner: network::Network<f32>,
}

#[pymethods]
impl PyNetwork {
    /// The default architecture with `num_classes` outputs.
    #[staticmethod]
    #[pyo3(signature = (num_classes, seed=0))]
    fn default_arch(num_classes: usize, seed: u64) -> PyResult<Self> {
        let inner = ArchConfig::default()
            .build(num_classes, &mut seed::rng(seed))
            .map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = network::load_checkpoint(&path, None).map_err(to_py)?;
        Ok(Self { inner: ck.network })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        network::save_checkpoint(&path, &self.inner, None).map_err(to_py)
    }

    #[getter]
    fn architecture(&self) -> String {
        self.inner.architecture()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    fn layer_names(&self) -> Vec<String> {
        self.inner
            .layer_names()
            .into_iter()
            .map(String::from)
            .collect()
    }

    fn frozen_layers(&self) -> Vec<String> {
        self.inner
            .frozen_layers()
            .into_iter()
            .map(String::from)
            .collect()
    }

    fn set_freeze(&mut self, layers: Vec<String>) -> PyResult<()> {
        self.inner.set_freeze(&layers).map_err(to_py)
    }

    fn checksum(&self) -> u64 {
        self.inner.body_checksum()
    }

    fn predict(&self, py: Python<'_>, samples: Vec<PyImageSample>) -> PyResult<Vec<u32>> {
        let s = unwrap_samples(&samples);
        py.detach(|| pipeline::predict(&self.inner, &s))
            .map_err(to_py)
    }

    fn accuracy(&self, py: Python<'_>, samples: Vec<PyImageSample>) -> PyResult<f64> {
        let s = unwrap_samples(&samples);
        py.detach(|| pipeline::accuracy(&self.inner, &s))
            .map_err(to_py)
    }

    #[pyo3(signature = (samples, layer="fc7"))]
    fn embed(
        &self,
        py: Python<'_>,
        samples: Vec<PyImageSample>,
        layer: &str,
    ) -> PyResult<Vec<Vec<f32>>> {
        let s = unwrap_samples(&samples);
        py.detach(|| pipeline::embed(&self.inner, &s, layer))
            .map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!("Network({})", self.inner.architecture())
    }
}

#[pyclass(name = "HistogramClassifier", module = "instarec_py")]
pub struct PyHistogramClassifier {
    inner: baselines::HistogramClassifier,
}

#[pymethods]
impl PyHistogramClassifier {
    #[new]
    #[pyo3(signature = (gallery, metric="intersection"))]
    fn new(gallery: Vec<PyImageSample>, metric: &str) -> PyResult<Self> {
        let inner =
            baselines::HistogramClassifier::new(&unwrap_samples(&gallery), self::metric(metric)?)
                .map_err(to_py)?;
        Ok(Self { inner })
    }

    fn classify(&self, query: &PyImageSample) -> PyResult<u32> {
        self.inner.classify(&query.inner).map_err(to_py)
    }
}

#[pyclass(name = "KeypointClassifier", module = "instarec_py")]
pub struct PyKeypointClassifier {
    inner: baselines::KeypointClassifier,
}

#[pymethods]
impl PyKeypointClassifier {
    #[new]
    #[pyo3(signature = (gallery, ratio=0.6, use_ransac=false, seed=0))]
    fn new(gallery: Vec<PyImageSample>, ratio: f64, use_ransac: bool, seed: u64) -> PyResult<Self> {
        let config = KeypointConfig {
            ratio,
            use_ransac,
            seed,
            ..KeypointConfig::default()
        };
        let inner =
            baselines::KeypointClassifier::new(&unwrap_samples(&gallery), config).map_err(to_py)?;
        Ok(Self { inner })
    }

    fn classify(&self, query: &PyImageSample) -> PyResult<u32> {
        self.inner.classify(&query.inner).map_err(to_py)
    }
}

/// Normalized hue-saturation histogram of the masked pixels.
#[pyfunction]
fn hs_histogram(sample: &PyImageSample) -> PyResult<Vec<f64>> {
    baselines::compute_hs_histogram(&sample.inner)
        .map(|h| h.bins().to_vec())
        .map_err(to_py)
}

/// Similarity of two samples' histograms; larger means more alike.
#[pyfunction]
#[pyo3(signature = (a, b, metric="intersection"))]
fn histogram_similarity(a: &PyImageSample, b: &PyImageSample, metric: &str) -> PyResult<f64> {
    let m = self::metric(metric)?;
    let ha = baselines::compute_hs_histogram(&a.inner).map_err(to_py)?;
    let hb = baselines::compute_hs_histogram(&b.inner).map_err(to_py)?;
    baselines::compare_histograms(&ha, &hb, m)
        .map(|raw| m.similarity(raw))
        .map_err(to_py)
}

#[pyfunction]
fn knn_classify(query: Vec<f32>, gallery: Vec<Vec<f32>>, labels: Vec<u32>) -> PyResult<u32> {
    if gallery.len() != labels.len() {
        return Err(PyValueError::new_err("gallery and labels differ in length"));
    }
    let g: Vec<(Vec<f32>, u32)> = gallery.into_iter().zip(labels).collect();
    baselines::knn_classify(&query, &g).map_err(to_py)
}

/// Least-squares homography from point correspondences, as a 3x3 matrix.
#[pyfunction]
fn fit_homography(src: Vec<(f64, f64)>, dst: Vec<(f64, f64)>) -> PyResult<[[f64; 3]; 3]> {
    augment::Homography::fit(&src, &dst)
        .map(|h| h.matrix())
        .map_err(to_py)
}

/// `count` draws of `(s, dx, dy)` at noise level `n`.
#[pyfunction]
#[pyo3(signature = (n, count=1, seed=0))]
fn sample_box_noise(n: f64, count: usize, seed: u64) -> PyResult<Vec<(f64, f64, f64)>> {
    let p = BoxNoiseParams::new(n);
    let mut rng = seed::rng(seed);
    (0..count)
        .map(|_| {
            evalkit::sample_box_noise(&p, &mut rng)
                .map(|b| (b.s, b.dx, b.dy))
                .map_err(to_py)
        })
        .collect()
}

/// Run the command-line tool in-process and return its exit code.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> i32 {
    let mut argv = vec!["instarec".to_string()];
    argv.extend(args);
    py.detach(|| cli::run_from_args(argv))
}

#[pymodule]
fn instarec_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyImageSample>()?;
    m.add_class::<PyNetwork>()?;
    m.add_class::<PyHistogramClassifier>()?;
    m.add_class::<PyKeypointClassifier>()?;
    m.add_function(wrap_pyfunction!(load_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(save_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    m.add_function(wrap_pyfunction!(one_shot_split, m)?)?;
    m.add_function(wrap_pyfunction!(hs_histogram, m)?)?;
    m.add_function(wrap_pyfunction!(histogram_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(knn_classify, m)?)?;
    m.add_function(wrap_pyfunction!(fit_homography, m)?)?;
    m.add_function(wrap_pyfunction!(sample_box_noise, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
