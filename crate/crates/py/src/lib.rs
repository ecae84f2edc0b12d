//! Python bindings over the core lab: schedule algebra, data synthesis,
//! metrics, network forwards and checkpoint loading. Tensors cross the
//! boundary as `(shape, flat_data)` tuples of plain Python lists.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use tadsr_core::degrade;
use tadsr_core::losses;
use tadsr_core::metrics;
use tadsr_core::nets;
use tadsr_core::params::ParamStore;
use tadsr_core::schedule;
use tadsr_core::tensor::Tensor;

type PyTensor = (Vec<usize>, Vec<f32>);

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_tensor(t: &PyTensor) -> PyResult<Tensor> {
    Tensor::from_vec(&t.0, t.1.clone()).map_err(err)
}

fn from_tensor(t: Tensor) -> PyTensor {
    (t.shape().to_vec(), t.into_data())
}

/// Variance-preserving noise schedule.
#[pyclass(name = "Schedule")]
struct PySchedule {
    inner: schedule::NoiseSchedule,
}

#[pymethods]
impl PySchedule {
    #[new]
    fn new(timesteps: usize, beta_start: f64, beta_end: f64) -> PyResult<Self> {
        Ok(PySchedule {
            inner: schedule::make_schedule(timesteps, beta_start, beta_end).map_err(err)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn alpha(&self, t: usize) -> PyResult<f64> {
        self.inner
            .alpha
            .get(t)
            .copied()
            .ok_or_else(|| err(format!("t={t} out of range")))
    }

    fn beta(&self, t: usize) -> PyResult<f64> {
        self.inner
            .beta
            .get(t)
            .copied()
            .ok_or_else(|| err(format!("t={t} out of range")))
    }

    fn add_noise(&self, z0: PyTensor, t: usize, eps: PyTensor) -> PyResult<PyTensor> {
        let out = schedule::add_noise(&to_tensor(&z0)?, t, &to_tensor(&eps)?, &self.inner)
            .map_err(err)?;
        Ok(from_tensor(out))
    }

    fn x0_from_eps(&self, z_t: PyTensor, t: usize, eps_hat: PyTensor) -> PyResult<PyTensor> {
        let out = schedule::x0_from_eps(&to_tensor(&z_t)?, t, &to_tensor(&eps_hat)?, &self.inner)
            .map_err(err)?;
        Ok(from_tensor(out))
    }

    fn eps_from_x0(&self, z_t: PyTensor, t: usize, x0_hat: PyTensor) -> PyResult<PyTensor> {
        let out = schedule::eps_from_x0(&to_tensor(&z_t)?, t, &to_tensor(&x0_hat)?, &self.inner)
            .map_err(err)?;
        Ok(from_tensor(out))
    }
}

/// Map a student timestep to the distillation timestep.
#[pyfunction]
#[pyo3(signature = (t_s, lam=0.4, gamma=100.0, t_min=20, t_max=980))]
fn map_timestep(t_s: usize, lam: f64, gamma: f64, t_min: usize, t_max: usize) -> PyResult<usize> {
    let m = schedule::TimestepMap {
        lam,
        gamma,
        t_min,
        t_max,
    };
    schedule::map_timestep(t_s, &m).map_err(err)
}

/// (sigma, kernel_size) of the blur schedule at a conditioning timestep.
#[pyfunction]
fn blur_sigma_for_t(t_s: usize) -> (f64, usize) {
    schedule::blur_sigma_for_t(t_s)
}

/// Deterministic procedural HQ image.
#[pyfunction]
fn gen_hq(seed: u64, size: usize) -> PyResult<PyTensor> {
    Ok(from_tensor(degrade::gen_hq(seed, size).map_err(err)?))
}

/// Degrade an HQ image with the default two-order pipeline; returns
/// (lq, applied_params_json).
#[pyfunction]
fn degrade_default(hq: PyTensor, seed: u64) -> PyResult<(PyTensor, String)> {
    let pair = degrade::degrade(&to_tensor(&hq)?, &degrade::DegradationConfig::default(), seed)
        .map_err(err)?;
    let applied = serde_json::to_string(&pair.applied).map_err(err)?;
    Ok((from_tensor(pair.lq), applied))
}

#[pyfunction]
fn psnr(a: PyTensor, b: PyTensor) -> PyResult<f64> {
    metrics::psnr(&to_tensor(&a)?, &to_tensor(&b)?).map_err(err)
}

#[pyfunction]
fn ssim(a: PyTensor, b: PyTensor) -> PyResult<f64> {
    metrics::ssim(&to_tensor(&a)?, &to_tensor(&b)?).map_err(err)
}

#[pyfunction]
fn hf_energy(x: PyTensor) -> PyResult<f64> {
    Ok(metrics::hf_energy(&to_tensor(&x)?))
}

#[pyfunction]
fn spearman(xs: Vec<f64>, ys: Vec<f64>) -> PyResult<f64> {
    if xs.len() != ys.len() {
        return Err(err("length mismatch"));
    }
    Ok(metrics::spearman(&xs, &ys))
}

/// Named parameter store holding all four networks.
#[pyclass(name = "ParamStore")]
struct PyParamStore {
    inner: ParamStore,
}

#[pymethods]
impl PyParamStore {
    /// Fresh initialization. `preset` is "default" or "tiny".
    #[new]
    #[pyo3(signature = (seed, preset="default"))]
    fn new(seed: u64, preset: &str) -> PyResult<Self> {
        let arch = match preset {
            "default" => nets::Arch::default(),
            "tiny" => nets::Arch::tiny(),
            other => return Err(err(format!("unknown preset '{other}'"))),
        };
        Ok(PyParamStore {
            inner: nets::init_params(&arch, seed).map_err(err)?,
        })
    }

    /// Load a checkpoint directory.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let (store, _, _) =
            tadsr_core::params::load_checkpoint(std::path::Path::new(path)).map_err(err)?;
        Ok(PyParamStore { inner: store })
    }

    fn param_count(&self) -> usize {
        self.inner.param_count("")
    }

    fn names(&self) -> Vec<String> {
        self.inner.names().map(|s| s.to_string()).collect()
    }

    fn content_hash(&self) -> String {
        self.inner.content_hash("")
    }

    /// Attach fresh LoRA factors (A random, B zero) for a role prefix such
    /// as "stu.adapt." or "phi.adapt.".
    fn init_adapters(&mut self, adapter_prefix: &str, seed: u64) -> PyResult<()> {
        nets::init_adapters(&mut self.inner, "teacher.", adapter_prefix, seed).map_err(err)
    }

    fn tae_encode(&self, x: PyTensor, t_s: usize) -> PyResult<PyTensor> {
        Ok(from_tensor(
            nets::tae_encode(&to_tensor(&x)?, t_s, &self.inner).map_err(err)?,
        ))
    }

    #[pyo3(signature = (z, t, adapters=None))]
    fn unet_forward(&self, z: PyTensor, t: usize, adapters: Option<&str>) -> PyResult<PyTensor> {
        let ad = adapters.map(|p| nets::AdapterRef {
            prefix: p,
            scale: self.inner.meta().lora_scale(),
        });
        Ok(from_tensor(
            nets::unet_forward(&to_tensor(&z)?, t, &self.inner, "teacher.", ad).map_err(err)?,
        ))
    }

    fn vae_decode(&self, z: PyTensor) -> PyResult<PyTensor> {
        Ok(from_tensor(
            nets::vae_decode(&to_tensor(&z)?, &self.inner).map_err(err)?,
        ))
    }

    /// One-step 4x restoration of an LQ image at a conditioning timestep.
    fn student_forward(&self, lq: PyTensor, t_s: usize) -> PyResult<PyTensor> {
        Ok(from_tensor(
            nets::student_forward(&to_tensor(&lq)?, t_s, &self.inner).map_err(err)?,
        ))
    }

    /// The score-distillation residual at timestep t (teacher minus critic).
    fn vsd_gradient(&self, z_hat: PyTensor, t: usize, eps: PyTensor) -> PyResult<PyTensor> {
        let sched = schedule::make_schedule(1000, 1e-4, 0.02).map_err(err)?;
        let map = schedule::TimestepMap::default();
        let ctx = losses::VsdContext::new(&self.inner, &sched, &map, losses::Omega::Unit);
        Ok(from_tensor(
            losses::vsd_gradient(&to_tensor(&z_hat)?, t, &to_tensor(&eps)?, &ctx).map_err(err)?,
        ))
    }
}

/// Run the fast invariant suite; returns (name, pass, detail) triples.
#[pyfunction]
fn selftest() -> Vec<(String, bool, String)> {
    tadsr_core::selftest::run_all()
        .into_iter()
        .map(|r| (r.name.to_string(), r.pass, r.detail))
        .collect()
}

#[pymodule]
fn tadsr_lab(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySchedule>()?;
    m.add_class::<PyParamStore>()?;
    m.add_function(wrap_pyfunction!(map_timestep, m)?)?;
    m.add_function(wrap_pyfunction!(blur_sigma_for_t, m)?)?;
    m.add_function(wrap_pyfunction!(gen_hq, m)?)?;
    m.add_function(wrap_pyfunction!(degrade_default, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(hf_energy, m)?)?;
    m.add_function(wrap_pyfunction!(spearman, m)?)?;
    m.add_function(wrap_pyfunction!(selftest, m)?)?;
    Ok(())
}
