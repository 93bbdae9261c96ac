#![no_main]

use fedgraph::secagg::{decode_ciphertexts, encode_ciphertexts, read_ciphertext};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = read_ciphertext(data);
    if let Ok(cs) = decode_ciphertexts(data) {
        let again = decode_ciphertexts(&encode_ciphertexts(&cs)).expect("reencoded ciphertexts parse");
        assert_eq!(again, cs);
    }
});
