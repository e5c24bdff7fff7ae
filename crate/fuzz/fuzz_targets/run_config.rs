#![no_main]

use libfuzzer_sys::fuzz_target;
use spde_amplitude::config::{Experiment, RunConfig, Task};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(cfg) = RunConfig::parse(text) else {
        return;
    };
    if let Ok(out) = cfg.to_toml() {
        let back = RunConfig::parse(&out).expect("serialized config parses");
        assert_eq!(back, cfg);
    }
    for task in [Task::Coeffs, Task::Simulate]
        .into_iter()
        .chain(Experiment::ALL.into_iter().map(Task::Experiment))
    {
        if let Ok(r) = cfg.resolve(task) {
            assert_eq!(r.resolve(task).expect("resolved config resolves"), r);
        }
    }
});
