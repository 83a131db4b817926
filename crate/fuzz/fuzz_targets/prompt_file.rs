#![no_main]

use libfuzzer_sys::fuzz_target;
use oodprompt::prompts::PromptFile;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(file) = PromptFile::from_json(text) {
        let back = PromptFile::from_json(&file.to_json()).expect("round trip");
        assert_eq!(back, file);
    }
});
