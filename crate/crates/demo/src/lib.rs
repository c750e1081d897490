//! Browser bindings for three small views of the protocol. Each function
//! returns a JSON string the page draws on a canvas. The two parties run
//! in-line here: the demo calls the same dealer, truncation and table code
//! as a real session but skips the channel.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

use tabula::field::{FieldParams, FixedPointCodec};
use tabula::lookup::{
    dealer_make_table, domain, floor_div, secure_truncate_local, table_storage_bytes, wrap_to_domain, ActivationFn,
    PlainTable, QuantSpec,
};
use tabula::runtime::PublishedFigures;
use tabula::sharing::{reconstruct, share, AdditiveShare};

#[derive(Serialize)]
struct LookupView {
    k: u32,
    function: &'static str,
    input: i64,
    /// Secret offset, shown here only because the demo plays both roles.
    offset: u64,
    opened: u64,
    slot: usize,
    /// Plain table in slot order: entry `i` holds F(v) for the `v` with
    /// `(s + v) mod 2^k == i`.
    slot_inputs: Vec<i64>,
    slot_outputs: Vec<f64>,
    client_entries: Vec<u64>,
    server_entries: Vec<u64>,
    output: f64,
    expected: f64,
}

/// One masked lookup of `x`, wrapped into the k-bit domain.
#[wasm_bindgen]
pub fn lookup_demo(x: i32, k: u32, function: &str, seed: u64) -> Result<String, JsError> {
    lookup_json(x, k, function, seed).map_err(|e| JsError::new(&e))
}

fn lookup_json(x: i32, k: u32, function: &str, seed: u64) -> Result<String, String> {
    if !(1..=8).contains(&k) {
        return Err("k must be between 1 and 8 in the demo".into());
    }
    let f = ActivationFn::from_name(function).ok_or_else(|| format!("unknown function `{function}`"))?;
    // two fractional bits keep the small domains in a visible range
    let codec = FixedPointCodec::new(FieldParams::mersenne61(), 2, 1e6).map_err(|e| e.to_string())?;
    let field = *codec.field();
    let spec = QuantSpec::new(f, k, 0).map_err(|e| e.to_string())?;
    let plain = PlainTable::new(spec, &codec).map_err(|e| e.to_string())?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let (tc, ts) = dealer_make_table(&plain, &field, 0, &mut rng);

    let v = wrap_to_domain(x as i64, k);
    let (xc, xs) = share(field.from_signed(v), &field, &mut rng);
    // each party adds its mask share and both halves are opened
    let opened = field.add(field.add(xc.value, tc.mask_share.value), field.add(xs.value, ts.mask_share.value));
    let out = reconstruct(
        AdditiveShare::new(xc.owner, tc.select(opened)),
        AdditiveShare::new(xs.owner, ts.select(opened)),
        &field,
    )
    .map_err(|e| e.to_string())?;

    let offset = field.add(tc.mask_share.value, ts.mask_share.value).value();
    let mask = (1u64 << k) - 1;
    let mut slot_inputs = vec![0; 1 << k];
    for v in domain(k) {
        slot_inputs[((offset as i64 + v) as u64 & mask) as usize] = v;
    }
    let view = LookupView {
        k,
        function: f.name(),
        input: v,
        offset,
        opened: opened.value(),
        slot: (opened.value() & mask) as usize,
        slot_outputs: slot_inputs.iter().map(|&v| codec.decode(plain.get(v))).collect(),
        slot_inputs,
        client_entries: tc.entries.iter().map(|e| e.value()).collect(),
        server_entries: ts.entries.iter().map(|e| e.value()).collect(),
        output: codec.decode(out),
        expected: codec.decode(plain.get(v)),
    };
    Ok(serde_json::to_string(&view).expect("serializable"))
}

#[derive(Serialize)]
struct TruncationView {
    x: i64,
    divisor: u64,
    modulus: u64,
    trials: u32,
    floor: i64,
    exact: u32,
    plus_one: u32,
    large: u32,
    predicted_large: f64,
}

/// Outcome counts of local share truncation of a fixed `x >= 0` over
/// `trials` random sharings.
#[wasm_bindgen]
pub fn truncation_histogram(
    x: u32,
    divisor_bits: u32,
    modulus: u64,
    trials: u32,
    seed: u64,
) -> Result<String, JsError> {
    truncation_json(x, divisor_bits, modulus, trials, seed).map_err(|e| JsError::new(&e))
}

fn truncation_json(x: u32, divisor_bits: u32, modulus: u64, trials: u32, seed: u64) -> Result<String, String> {
    let field = FieldParams::new(modulus).map_err(|e| e.to_string())?;
    if divisor_bits > 20 || x as u64 >= field.modulus() / 2 {
        return Err("x or divisor out of range for this modulus".into());
    }
    let d = 1u64 << divisor_bits;
    let x = x as i64;
    let q = floor_div(x, d);
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let (mut exact, mut plus_one, mut large) = (0, 0, 0);
    for _ in 0..trials {
        let (a, b) = share(field.from_signed(x), &field, &mut rng);
        let t = reconstruct(secure_truncate_local(a, d, &field), secure_truncate_local(b, d, &field), &field)
            .expect("matching roles");
        match field.to_signed(t) - q {
            0 => exact += 1,
            1 => plus_one += 1,
            _ => large += 1,
        }
    }
    let view = TruncationView {
        x,
        divisor: d,
        modulus: field.modulus(),
        trials,
        floor: q,
        exact,
        plus_one,
        large,
        predicted_large: trials as f64 * (x + 1) as f64 / field.modulus() as f64,
    };
    Ok(serde_json::to_string(&view).expect("serializable"))
}

#[derive(Serialize)]
struct StorageRow {
    k: u32,
    bytes: u64,
}

#[derive(Serialize)]
struct StorageView {
    activations: u64,
    rows: Vec<StorageRow>,
    /// Garbled-circuit ReLU storage at 32, 16 and 8 bits for comparison.
    gc_relu_bytes: [u64; 3],
}

/// Per-party table storage for `activations` activations at k = 1..=k_max.
#[wasm_bindgen]
pub fn storage_curve(activations: u64, k_max: u32) -> String {
    let rows = (1..=k_max.clamp(1, 16)).map(|k| StorageRow { k, bytes: table_storage_bytes(k, activations) }).collect();
    let view = StorageView { activations, rows, gc_relu_bytes: PublishedFigures::default().gc_relu_storage_bytes };
    serde_json::to_string(&view).expect("serializable")
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::Value;

    #[test]
    fn lookup_matches_plain_table() {
        for f in ["relu", "identity", "clipped_sigmoid"] {
            for x in -8..8 {
                let v: Value = serde_json::from_str(&lookup_json(x, 4, f, (x + 100) as u64).unwrap()).unwrap();
                assert_eq!(v["output"], v["expected"], "{f} {x}");
                let slot = v["slot"].as_u64().unwrap() as usize;
                assert_eq!(v["slot_inputs"][slot], x as i64);
            }
        }
    }

    #[test]
    fn slot_order_is_a_permutation() {
        let v: Value = serde_json::from_str(&lookup_json(3, 5, "relu", 1).unwrap()).unwrap();
        let mut ins: Vec<i64> = v["slot_inputs"].as_array().unwrap().iter().map(|x| x.as_i64().unwrap()).collect();
        ins.sort();
        assert_eq!(ins, (-16..16).collect::<Vec<_>>());
    }

    #[test]
    fn truncation_counts_add_up() {
        let v: Value = serde_json::from_str(&truncation_json(37, 2, 8191, 5000, 9).unwrap()).unwrap();
        let total = v["exact"].as_u64().unwrap() + v["plus_one"].as_u64().unwrap() + v["large"].as_u64().unwrap();
        assert_eq!(total, 5000);
        assert_eq!(v["floor"], 9);
        assert!(v["large"].as_u64().unwrap() < 100);
    }

    #[test]
    fn storage_doubles() {
        let v: Value = serde_json::from_str(&storage_curve(1, 10)).unwrap();
        let rows = v["rows"].as_array().unwrap();
        assert_eq!(rows[7]["bytes"], 2048);
        for w in rows.windows(2) {
            assert_eq!(w[1]["bytes"].as_u64().unwrap(), 2 * w[0]["bytes"].as_u64().unwrap());
        }
    }
}
