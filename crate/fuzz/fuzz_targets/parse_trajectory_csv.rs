#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(table) = qndsim::io::read_trajectory_csv(data) {
        let _ = table.dt();
        let _ = table.to_record();
    }
});
