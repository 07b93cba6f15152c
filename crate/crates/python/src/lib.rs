//! Python bindings. Matrices cross the boundary as lists of row lists.

use attngrad_core as core;
use core::hardness::{self, HardInstance as CoreHard};
use core::{AttentionInstance, GradientResult, Matrix};
use pyo3::create_exception;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

create_exception!(attngrad, AttnGradError, PyValueError);

fn err(e: core::Error) -> PyErr {
    AttnGradError::new_err(e.to_string())
}

fn to_matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    Matrix::from_rows(&rows).map_err(err)
}

fn to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

/// A bounded attention-loss instance.
#[pyclass(name = "Instance", module = "attngrad", frozen)]
struct Instance {
    inner: AttentionInstance,
}

#[pymethods]
impl Instance {
    #[new]
    #[pyo3(signature = (a1, a2, a3, e, x, y, bound))]
    fn new(
        a1: Vec<Vec<f64>>,
        a2: Vec<Vec<f64>>,
        a3: Vec<Vec<f64>>,
        e: Vec<Vec<f64>>,
        x: Vec<Vec<f64>>,
        y: Vec<Vec<f64>>,
        bound: f64,
    ) -> PyResult<Self> {
        let inner = AttentionInstance::new(
            to_matrix(a1)?,
            to_matrix(a2)?,
            to_matrix(a3)?,
            to_matrix(e)?,
            to_matrix(x)?,
            to_matrix(y)?,
            bound,
        )
        .map_err(err)?;
        Ok(Self { inner })
    }

    /// Uniform entries rescaled to the bound; `E` is the forward output plus noise.
    #[staticmethod]
    #[pyo3(signature = (n, d, bound, seed=0, noise_sigma=core::sample::DEFAULT_NOISE_SIGMA))]
    fn random(n: usize, d: usize, bound: f64, seed: u64, noise_sigma: f64) -> PyResult<Self> {
        let inner = core::sample::random_instance(n, d, bound, seed, noise_sigma).map_err(err)?;
        Ok(Self { inner })
    }

    /// Reads a directory written by `attngrad gen`.
    #[staticmethod]
    fn load(dir: &str) -> PyResult<Self> {
        let (inner, _) = core::io::load_instance(dir).map_err(err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn d(&self) -> usize {
        self.inner.d()
    }

    #[getter]
    fn bound(&self) -> f64 {
        self.inner.bound()
    }

    #[getter]
    fn x(&self) -> Vec<Vec<f64>> {
        to_rows(self.inner.x())
    }

    #[getter]
    fn e(&self) -> Vec<Vec<f64>> {
        to_rows(self.inner.e())
    }

    /// The attention output `D⁻¹ exp(A1 X A2ᵀ / d) A3 Y`.
    fn forward(&self) -> PyResult<Vec<Vec<f64>>> {
        core::forward::forward(&self.inner).map(|m| to_rows(&m)).map_err(err)
    }

    fn loss(&self) -> PyResult<f64> {
        core::forward::loss(&self.inner).map(|(l, _)| l).map_err(err)
    }

    /// A copy with `E` replaced.
    fn with_e(&self, e: Vec<Vec<f64>>) -> PyResult<Self> {
        Ok(Self { inner: self.inner.with_e(to_matrix(e)?).map_err(err)? })
    }

    fn __repr__(&self) -> String {
        format!("Instance(n={}, d={}, bound={})", self.inner.n(), self.inner.d(), self.inner.bound())
    }
}

fn gradient_dict<'py>(py: Python<'py>, r: &GradientResult) -> PyResult<Bound<'py, PyDict>> {
    let out = PyDict::new(py);
    out.set_item("g", r.g.as_slice().to_vec())?;
    out.set_item("G", to_rows(&r.grad))?;
    out.set_item("method", r.method.as_str())?;
    out.set_item("elapsed_seconds", r.elapsed_seconds)?;
    if let Some(f) = &r.fast {
        let fast = PyDict::new(py);
        fast.set_item("degree", f.degree)?;
        fast.set_item("k1", f.k1)?;
        fast.set_item("k2", f.k2)?;
        fast.set_item("k3", f.k3)?;
        fast.set_item("k4", f.k4)?;
        fast.set_item("eps_prime", f.eps_prime)?;
        out.set_item("fast", fast)?;
    }
    Ok(out)
}

/// Exact gradient `dL/dX` as a dict with `g` (row-major vec) and `G`.
#[pyfunction]
fn gradient_exact<'py>(py: Python<'py>, inst: &Instance) -> PyResult<Bound<'py, PyDict>> {
    let r = py.detach(|| core::gradient_exact(&inst.inner)).map_err(err)?;
    gradient_dict(py, &r)
}

/// Low-rank approximate gradient; `fast` holds the degree and factor ranks.
#[pyfunction]
#[pyo3(signature = (inst, eps=1e-4))]
fn gradient_fast<'py>(py: Python<'py>, inst: &Instance, eps: f64) -> PyResult<Bound<'py, PyDict>> {
    let r = py.detach(|| core::gradient_fast(&inst.inner, eps)).map_err(err)?;
    gradient_dict(py, &r)
}

#[pyfunction]
#[pyo3(signature = (inst, step=core::verify::DEFAULT_FD_STEP))]
fn finite_diff_gradient<'py>(py: Python<'py>, inst: &Instance, step: f64) -> PyResult<Bound<'py, PyDict>> {
    let r = py.detach(|| core::verify::finite_diff_gradient(&inst.inner, step)).map_err(err)?;
    gradient_dict(py, &r)
}

#[pyfunction]
fn brute_kron_gradient<'py>(py: Python<'py>, inst: &Instance) -> PyResult<Bound<'py, PyDict>> {
    let r = py.detach(|| core::verify::brute_kron_gradient(&inst.inner)).map_err(err)?;
    gradient_dict(py, &r)
}

/// A structured hardness-lab instance.
#[pyclass(name = "HardInstance", module = "attngrad", frozen)]
struct HardInstance {
    inner: CoreHard,
}

#[pymethods]
impl HardInstance {
    #[new]
    fn new(a: Vec<Vec<f64>>, v_bin: Vec<Vec<f64>>, bound: f64) -> PyResult<Self> {
        Ok(Self { inner: CoreHard::new(to_matrix(a)?, to_matrix(v_bin)?, bound).map_err(err)? })
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn d(&self) -> usize {
        self.inner.d()
    }

    #[getter]
    fn bound(&self) -> f64 {
        self.inner.bound()
    }

    #[getter]
    fn a(&self) -> Vec<Vec<f64>> {
        to_rows(self.inner.a())
    }

    #[getter]
    fn v_bin(&self) -> Vec<Vec<f64>> {
        to_rows(self.inner.v_bin())
    }
}

#[pyfunction]
#[pyo3(signature = (n, d, bound, frac_b=0.5, seed=0))]
fn gen_hard_instance(n: usize, d: usize, bound: f64, frac_b: f64, seed: u64) -> PyResult<HardInstance> {
    Ok(HardInstance { inner: hardness::gen_hard_instance(n, d, bound, frac_b, seed).map_err(err)? })
}

#[pyfunction]
fn f_lambda(hi: &HardInstance, lam: f64) -> PyResult<f64> {
    hardness::f_lambda(&hi.inner, lam).map_err(err)
}

/// `(f′(λ), f″(λ))`.
#[pyfunction]
fn f_lambda_derivative(hi: &HardInstance, lam: f64) -> PyResult<(f64, f64)> {
    hardness::f_lambda_derivative(&hi.inner, lam).map_err(err)
}

#[pyfunction]
fn riemann_reduction<'py>(py: Python<'py>, hi: &HardInstance, m: usize) -> PyResult<Bound<'py, PyDict>> {
    let r = py.detach(|| hardness::riemann_reduction(&hi.inner, m)).map_err(err)?;
    let out = PyDict::new(py);
    out.set_item("lambda_grid", r.lambda_grid)?;
    out.set_item("f_values", r.f_values)?;
    out.set_item("fprime_values", r.fprime_values)?;
    out.set_item("t_m", r.t_m)?;
    out.set_item("f1_minus_f0", r.f1_minus_f0)?;
    out.set_item("bound_b", r.bound_b)?;
    out.set_item("m", r.m)?;
    out.set_item("passed", r.passed)?;
    Ok(out)
}

/// `f′(λ)` recovered as `2 d · trace(dL/dX)` at `X = λ d I`.
#[pyfunction]
fn gradient_to_forward(q: Vec<Vec<f64>>, k: Vec<Vec<f64>>, v: Vec<Vec<f64>>, lam: f64) -> PyResult<f64> {
    hardness::gradient_to_forward(&to_matrix(q)?, &to_matrix(k)?, &to_matrix(v)?, lam).map_err(err)
}

#[pymodule]
#[pyo3(name = "attngrad")]
fn attngrad_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", core::TOOL_VERSION)?;
    m.add("AttnGradError", m.py().get_type::<AttnGradError>())?;
    m.add_class::<Instance>()?;
    m.add_class::<HardInstance>()?;
    m.add_function(wrap_pyfunction!(gradient_exact, m)?)?;
    m.add_function(wrap_pyfunction!(gradient_fast, m)?)?;
    m.add_function(wrap_pyfunction!(finite_diff_gradient, m)?)?;
    m.add_function(wrap_pyfunction!(brute_kron_gradient, m)?)?;
    m.add_function(wrap_pyfunction!(gen_hard_instance, m)?)?;
    m.add_function(wrap_pyfunction!(f_lambda, m)?)?;
    m.add_function(wrap_pyfunction!(f_lambda_derivative, m)?)?;
    m.add_function(wrap_pyfunction!(riemann_reduction, m)?)?;
    m.add_function(wrap_pyfunction!(gradient_to_forward, m)?)?;
    Ok(())
}
