#![no_main]

use fedgraph::gat::ModelParams;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(p) = ModelParams::from_checkpoint(data) {
        let again = ModelParams::from_checkpoint(&p.to_checkpoint()).expect("reencoded checkpoint parses");
        assert_eq!(again.flatten().len(), p.flatten().len());
    }
});
