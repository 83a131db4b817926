#![no_main]

use libfuzzer_sys::fuzz_target;
use oodprompt::collection::EmbeddingBank;

// First byte splits the input into payload and manifest text.
fuzz_target!(|data: &[u8]| {
    let Some((&split, rest)) = data.split_first() else {
        return;
    };
    let at = (split as usize * rest.len()) / 255;
    let (bank, manifest) = rest.split_at(at);
    let Ok(manifest) = std::str::from_utf8(manifest) else {
        return;
    };
    if let Ok(b) = EmbeddingBank::decode(bank, manifest) {
        let again = EmbeddingBank::decode(&b.encode(), &b.encode_manifest()).expect("re-encoded bank decodes");
        assert_eq!(again, b);
    }
});
