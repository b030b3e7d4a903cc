//! Chip and model descriptions shipped with the crate.

use crate::chip::ChipSpec;
use crate::error::Result;
use crate::model::ModelSpec;

const CHIPS: &[(&str, &str)] = &[
    ("h100", include_str!("../../../specs/h100.json")),
    ("h100-pcap-450w", include_str!("../../../specs/h100-pcap-450w.json")),
    ("a100", include_str!("../../../specs/a100.json")),
    ("spad-prefill", include_str!("../../../specs/spad-prefill.json")),
    ("spad-decode", include_str!("../../../specs/spad-decode.json")),
];

const MODELS: &[(&str, &str)] = &[
    ("bloom-176b", include_str!("../../../specs/bloom-176b.json")),
    ("llama3-70b", include_str!("../../../specs/llama3-70b.json")),
    ("deepseek-v2", include_str!("../../../specs/deepseek-v2.json")),
];

pub fn chip_names() -> impl Iterator<Item = &'static str> {
    CHIPS.iter().map(|(n, _)| *n)
}

pub fn model_names() -> impl Iterator<Item = &'static str> {
    MODELS.iter().map(|(n, _)| *n)
}

pub fn chip(name: &str) -> Option<ChipSpec> {
    CHIPS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(n, src)| ChipSpec::from_json(src).unwrap_or_else(|e| panic!("bundled chip {n}: {e}")))
}

pub fn model(name: &str) -> Option<ModelSpec> {
    MODELS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(n, src)| ModelSpec::from_json(src).unwrap_or_else(|e| panic!("bundled model {n}: {e}")))
}

pub fn h100() -> ChipSpec {
    chip("h100").expect("h100 is bundled")
}

pub fn spad_prefill() -> ChipSpec {
    chip("spad-prefill").expect("spad-prefill is bundled")
}

pub fn spad_decode() -> ChipSpec {
    chip("spad-decode").expect("spad-decode is bundled")
}

pub fn bloom_176b() -> ModelSpec {
    model("bloom-176b").expect("bloom-176b is bundled")
}

/// Resolves a bundled chip name, falling back to reading `name_or_path` as a JSON file.
pub fn load_chip(name_or_path: &str) -> Result<ChipSpec> {
    match chip(name_or_path) {
        Some(c) => Ok(c),
        None => ChipSpec::from_file(std::path::Path::new(name_or_path)),
    }
}

pub fn load_model(name_or_path: &str) -> Result<ModelSpec> {
    match model(name_or_path) {
        Some(m) => Ok(m),
        None => ModelSpec::from_file(std::path::Path::new(name_or_path)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_bundled_spec_parses_and_validates() {
        for n in chip_names() {
            let c = chip(n).unwrap();
            assert_eq!(c.name, n);
        }
        for n in model_names() {
            let m = model(n).unwrap();
            assert_eq!(m.name, n);
        }
    }
}
