//! Bundled standard line and transformer types (see `data/README.md`).

use serde::Deserialize;

const LINE_TYPES_CSV: &str = include_str!("../data/line_types.csv");
const TRANSFORMER_TYPES_CSV: &str = include_str!("../data/transformer_types.csv");

pub const REFERENCE_LINE_TYPE: &str = "NA2XS2Y 1x240 RM/25 12/20 kV";
pub const REFERENCE_TRANSFORMER_TYPE: &str = "63 MVA 110/20 kV";

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct LineType {
    pub name: String,
    pub r_ohm_per_km: f64,
    pub x_ohm_per_km: f64,
    pub c_nf_per_km: f64,
    pub max_i_ka: f64,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct TransformerType {
    pub name: String,
    pub sn_mva: f64,
    pub vn_hv_kv: f64,
    pub vn_lv_kv: f64,
    pub vk_percent: f64,
    pub vkr_percent: f64,
    pub pfe_kw: f64,
    pub i0_percent: f64,
    pub shift_degree: f64,
}

fn parse<R: for<'de> Deserialize<'de>>(text: &str) -> Result<Vec<R>, csv::Error> {
    csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes())
        .deserialize()
        .collect()
}

pub fn line_types() -> Vec<LineType> {
    parse(LINE_TYPES_CSV).expect("bundled line type table is well formed")
}

pub fn transformer_types() -> Vec<TransformerType> {
    parse(TRANSFORMER_TYPES_CSV).expect("bundled transformer type table is well formed")
}

pub fn line_type(name: &str) -> Option<LineType> {
    line_types().into_iter().find(|t| t.name == name)
}

pub fn transformer_type(name: &str) -> Option<TransformerType> {
    transformer_types().into_iter().find(|t| t.name == name)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_types_present() {
        let line = line_type(REFERENCE_LINE_TYPE).unwrap();
        assert!(line.r_ohm_per_km > 0.0 && line.c_nf_per_km > 0.0);
        let trafo = transformer_type(REFERENCE_TRANSFORMER_TYPE).unwrap();
        assert_eq!(trafo.sn_mva, 63.0);
        assert_eq!((trafo.vn_hv_kv, trafo.vn_lv_kv), (110.0, 20.0));
        assert!(trafo.vk_percent > trafo.vkr_percent);
    }
}
