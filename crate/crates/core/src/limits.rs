/// Largest `n` the exact (quadratic-memory) path accepts by default.
pub const DEFAULT_EXACT_N_CAP: usize = 16_384;

/// Default cap on the number of columns of any low-rank factor.
pub const DEFAULT_RANK_CAP: usize = 20_000;

/// Environment variable that overrides the factor rank cap.
pub const RANK_CAP_ENV: &str = "ATTNGRAD_RANK_CAP";

/// Size guards shared by the exact and fast paths.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Limits {
    pub exact_n_cap: usize,
    pub rank_cap: usize,
}

impl Default for Limits {
    fn default() -> Self {
        Self { exact_n_cap: DEFAULT_EXACT_N_CAP, rank_cap: DEFAULT_RANK_CAP }
    }
}

impl Limits {
    /// Defaults, with the rank cap taken from `ATTNGRAD_RANK_CAP` when it
    /// parses as a positive integer.
    pub fn from_env() -> Self {
        let rank_cap = std::env::var(RANK_CAP_ENV)
            .ok()
            .and_then(|s| s.trim().parse::<usize>().ok())
            .filter(|&k| k > 0)
            .unwrap_or(DEFAULT_RANK_CAP);
        Self { rank_cap, ..Self::default() }
    }
}
