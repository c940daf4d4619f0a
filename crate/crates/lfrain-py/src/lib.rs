use pyo3::prelude::*;
#[pymodule]
fn lfrain_py(_m: &Bound<'_, PyModule>) -> PyResult<()> { Ok(()) }
