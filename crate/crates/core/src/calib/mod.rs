//! Calibration statistics, range initializers and the bit-width policy.

mod init;
mod policy;
mod stats;

pub use init::{
    choose_range, init_minmax, init_omse, init_params, init_percentile, init_tgq, minmax_range,
    omse_search, percentile_range, quant_mse, Initializer, OmseChoice, RangeChoice, DEFAULT_P_HI,
    DEFAULT_P_LO,
};
pub use policy::{apply_bit_policy, is_weight_name, BitOverride, BitPolicy};
pub use stats::{CalibStats, StatsSummary};
