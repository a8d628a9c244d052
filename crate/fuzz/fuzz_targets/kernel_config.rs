#![no_main]

use libfuzzer_sys::fuzz_target;
use stgp::kernels::{SpatialKernelSpec, TemporalKernelSpec};

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = TemporalKernelSpec::from_config_str(text);
        let _ = SpatialKernelSpec::from_config_str(text);
    }
});
