#![no_main]

use fedgraph::fed::wire::GradientUpdate;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(u) = GradientUpdate::decode(data) {
        // ciphertext magnitudes may carry leading zeros, so compare values
        let again = GradientUpdate::decode(&u.encode()).expect("reencoded update parses");
        assert_eq!(again, u);
    }
});
