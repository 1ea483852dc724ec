use pyo3::prelude::*;
use pyo3::types::PyDict;

fn with_module(code: &str) {
    Python::initialize();
    Python::attach(|py| {
        let module = pyo3::wrap_pymodule!(orthocl::orthocl)(py);
        let globals = PyDict::new(py);
        globals.set_item("orthocl", module).unwrap();
        let code = std::ffi::CString::new(code).unwrap();
        py.run(&code, Some(&globals), None).unwrap();
    });
}

#[test]
fn metrics_through_python() {
    with_module(
        "pm = orthocl.PerfMatrix.from_rows([[80.0, 10.0], [60.0, 90.0]])\n\
         assert pm.last() == 75.0\n\
         assert pm.bwt() == -20.0\n\
         assert pm.summary()['n'] == 2\n",
    );
}

#[test]
fn run_and_compare_through_python() {
    with_module(
        "cfg = orthocl.Config.parse('''\n\
seed = 2\n\
[stream]\n\
kind = \"rotated-gaussians\"\n\
tasks = 2\n\
samples_per_task = 120\n\
[model]\n\
kind = \"linear-softmax\"\n\
input_dim = 8\n\
output_dim = 4\n\
''')\n\
r = orthocl.run(cfg)\n\
assert r.metric_block() == orthocl.run(cfg).metric_block()\n\
a, b = orthocl.compare(cfg, ['hifgo-full', 'hifgo-proxy'])\n\
assert a.metric_block() == b.metric_block()\n\
try:\n    orthocl.compare(cfg, ['seq-ft'])\n    raise AssertionError('one strategy accepted')\nexcept ValueError:\n    pass\n",
    );
}

#[test]
fn toy_through_python() {
    with_module(
        "out = orthocl.toy()\n\
         assert out['identity']['relative_error'] <= 1e-8\n\
         ex = dict(out['excess'])\n\
         assert ex['hifgo-proxy'][0] < ex['seq-ft'][0]\n",
    );
}
