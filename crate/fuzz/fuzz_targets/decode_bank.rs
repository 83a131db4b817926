#![no_main]

use libfuzzer_sys::fuzz_target;
use oodprompt::collection::bank::decode_payload;

fuzz_target!(|data: &[u8]| {
    // any accepted payload must have a consistent shape
    if let Ok(raw) = decode_payload(data) {
        assert_eq!(raw.values.len(), raw.rows * raw.dim);
    }
});
