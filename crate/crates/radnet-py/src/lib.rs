use pyo3::prelude::*;

#[pymodule]
fn radnet_py(_m: &Bound<'_, PyModule>) -> PyResult<()> {
    Ok(())
}
