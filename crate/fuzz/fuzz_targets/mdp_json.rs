#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(mdp) = apg_core::load_mdp(text) else { return };
    // Anything accepted must survive a round trip unchanged.
    let json = serde_json::to_string(&mdp.to_spec()).unwrap();
    let back = apg_core::load_mdp(&json).expect("re-parse of a validated MDP");
    assert_eq!(back.to_spec(), mdp.to_spec());
});
