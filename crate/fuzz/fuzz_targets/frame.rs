#![no_main]

use fedgraph::fed::wire::Frame;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok((frame, used)) = Frame::decode_prefix(data) {
        assert!(used <= data.len());
        assert_eq!(frame.encode(), &data[..used]);
    }
    let _ = Frame::decode(data);
});
