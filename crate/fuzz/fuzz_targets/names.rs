#![no_main]

use std::str::FromStr;

use apg_core::experiments::builtin_env;
use apg_core::Algorithm;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(name) = std::str::from_utf8(data) else { return };
    if let Ok(algo) = Algorithm::from_str(name) {
        assert_eq!(algo.name(), name);
    }
    if let Ok(env) = builtin_env(name) {
        assert_eq!(env.name, name);
    }
});
