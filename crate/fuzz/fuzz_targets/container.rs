#![no_main]

use libfuzzer_sys::fuzz_target;
use sesa_core::tensor::{read_container, write_container};

fuzz_target!(|data: &[u8]| {
    if let Ok(named) = read_container(data) {
        let mut buf = Vec::new();
        write_container(&mut buf, &named).unwrap();
        let again = read_container(&buf).unwrap();
        assert_eq!(named.len(), again.len());
        for ((na, ta), (nb, tb)) in named.iter().zip(&again) {
            assert_eq!(na, nb);
            assert!(ta.bit_eq(tb));
        }
    }
});
