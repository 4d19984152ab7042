use pyo3::prelude::*;
use pyo3::types::PyModule;

fn with_module<F: FnOnce(&Bound<'_, PyModule>)>(f: F) {
    Python::attach(|py| {
        let m = PyModule::new(py, "psbma").unwrap();
        psbma_py::register(&m).unwrap();
        f(&m);
    });
}

#[test]
fn conversions_and_labels() {
    with_module(|m| {
        let d: f64 = m.getattr("convert").unwrap().call1((0.5, "CORRELATION_R", "COHEN_D")).unwrap().extract().unwrap();
        assert!((d - 1.0 / 0.75f64.sqrt()).abs() < 1e-12);
        let label: String = m.getattr("evidence_label").unwrap().call1((3.0,)).unwrap().extract().unwrap();
        assert_eq!(label, "moderate");
        let bin: String = m.getattr("kbin").unwrap().call1((300,)).unwrap().extract().unwrap();
        assert_eq!(bin, ">=300");
        assert!(m.getattr("convert").unwrap().call1((1.5, "CORRELATION_R", "COHEN_D")).is_err());
    });
}

#[test]
fn analysis_round_trip() {
    with_module(|m| {
        let a = m.getattr("analyze").unwrap().call1((vec![0.3, 0.5, 0.1, 0.4], vec![0.1, 0.2, 0.15, 0.12])).unwrap();
        let p: f64 = a.getattr("post_effect_adj").unwrap().extract().unwrap();
        assert!((0.0..=1.0).contains(&p));
        let (mean, lo, hi): (f64, f64, f64) = a.getattr("mu_conditional").unwrap().extract().unwrap();
        assert!(lo < mean && mean < hi);
        let measures = a.call_method0("measures").unwrap();
        let n: usize = measures.get_item("n_estimates").unwrap().extract().unwrap();
        assert_eq!(n, 4);
    });
}
