#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(manifest) = apg_core::trace::parse_manifest(text) {
        let json = serde_json::to_string(&manifest).unwrap();
        assert_eq!(apg_core::trace::parse_manifest(&json).unwrap(), manifest);
    }
});
