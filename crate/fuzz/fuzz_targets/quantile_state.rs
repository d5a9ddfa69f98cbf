#![no_main]
use libfuzzer_sys::fuzz_target;
use muskat_core::transport1d::{wasserstein2_quantiles, QuantileState};

// Bytes are read as little-endian f64 positions.
fuzz_target!(|data: &[u8]| {
    let xs: Vec<f64> = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if let Ok(q) = QuantileState::new(xs) {
        let _ = wasserstein2_quantiles(&q, &q);
        let _ = q.second_moment();
    }
});
