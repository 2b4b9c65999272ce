#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    iwnet_serve::fuzzing::http_request(data);
});
