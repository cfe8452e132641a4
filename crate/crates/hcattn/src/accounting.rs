//! Closed-form memory, compute and communication budget models.
//!
//! All models assume 2-byte cache elements and 2-byte centroid indices,
//! so quantized keys occupy a `g/d` fraction of the raw key budget.
//! Reports use 1 MB = 10^6 bytes.

use crate::error::{Error, Result};
use crate::value_store::TransferLedger;

/// Element and index widths every budget figure assumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BudgetAssumptions {
    pub element_bytes: u32,
    pub index_bytes: u32,
}

pub const DEFAULT_ASSUMPTIONS: BudgetAssumptions = BudgetAssumptions {
    element_bytes: 2,
    index_bytes: 2,
};

/// Device-memory fractions relative to the uncompressed KV cache.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BudgetReport {
    pub key_budget_fraction: f64,
    pub value_budget_fraction: f64,
    pub total_fraction: f64,
    pub assumptions: BudgetAssumptions,
}

/// Device key/value memory fractions for a strategy.
///
/// Keys cost their full budget without quantization, else `g/d` (one
/// 2-byte index per group versus one 2-byte element per dimension).
/// Offloaded values cost nothing device-side. The total averages the
/// two halves because raw key and value caches are the same size.
pub fn memory_budget(d: usize, g: Option<usize>, value_offloaded: bool) -> Result<BudgetReport> {
    if d == 0 {
        return Err(Error::InvalidConfig("head dimension must be >= 1".into()));
    }
    let key = match g {
        None => 1.0,
        Some(0) => return Err(Error::InvalidConfig("group count must be >= 1".into())),
        Some(g) if d % g != 0 => {
            return Err(Error::InvalidConfig(format!(
                "group count {g} must divide head dimension {d}"
            )))
        }
        Some(g) => g as f64 / d as f64,
    };
    let value = if value_offloaded { 0.0 } else { 1.0 };
    Ok(BudgetReport {
        key_budget_fraction: key,
        value_budget_fraction: value,
        total_fraction: (key + value) / 2.0,
        assumptions: DEFAULT_ASSUMPTIONS,
    })
}

/// Multiplication and addition counts for one configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OpCounts {
    pub mults_exact: u128,
    pub adds_exact: u128,
    pub mults_approx: u128,
    pub adds_approx: u128,
}

/// Exact-vs-approximate cost model, per full `n`-query pass and per
/// single query.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostModel {
    pub per_pass: OpCounts,
    pub per_query: OpCounts,
}

/// Operation counts: exact attention costs `n * d` multiply-adds per
/// query; the table route costs `d * c` multiplications to build the
/// table and `n * g` additions to aggregate scores.
pub fn compute_cost(n: usize, d: usize, c: usize, g: usize) -> CostModel {
    let (n, d, c, g) = (n as u128, d as u128, c as u128, g as u128);
    CostModel {
        per_pass: OpCounts {
            mults_exact: n * n * d,
            adds_exact: n * n * d,
            mults_approx: n * d * c,
            adds_approx: n * n * g,
        },
        per_query: OpCounts {
            mults_exact: n * d,
            adds_exact: n * d,
            mults_approx: d * c,
            adds_approx: n * g,
        },
    }
}

/// Bytes crossing the device-to-host boundary in one decode pass:
/// `retain_fraction * n * layers * heads * bytes_per_score`.
pub fn comm_overhead(
    n: usize,
    layers: usize,
    heads: usize,
    retain_fraction: f64,
    bytes_per_score: usize,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&retain_fraction) {
        return Err(Error::InvalidConfig(format!(
            "retain fraction {retain_fraction} outside [0, 1]"
        )));
    }
    let base = (n as u128 * layers as u128 * heads as u128 * bytes_per_score as u128) as f64;
    Ok(retain_fraction * base)
}

/// 1 MB = 10^6 bytes; the only convention that reads the headline
/// overhead figure back exactly.
pub fn bytes_to_mb(bytes: f64) -> f64 {
    bytes / 1e6
}

/// Outcome of checking measured transfer bytes against the model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReconcileReport {
    pub measured_bytes: u64,
    pub predicted_bytes: f64,
    pub deviation_fraction: f64,
    pub within_tolerance: bool,
}

/// Mean selection ratio implied by a ledger over a session where every
/// message scored `n` cached tokens.
pub fn empirical_mean_ratio(ledger: &TransferLedger, n: usize) -> Result<f64> {
    if ledger.messages == 0 {
        return Err(Error::EmptyLedger);
    }
    if n == 0 {
        return Err(Error::InvalidConfig("sequence length must be >= 1".into()));
    }
    Ok(ledger.selected_tokens as f64 / (ledger.messages as f64 * n as f64))
}

/// Compare a session's measured weight-payload bytes against a model
/// prediction, flagging relative deviation beyond `tolerance_fraction`.
pub fn reconcile_ledger(
    ledger: &TransferLedger,
    predicted_bytes: f64,
    tolerance_fraction: f64,
) -> Result<ReconcileReport> {
    if ledger.messages == 0 {
        return Err(Error::EmptyLedger);
    }
    let measured = ledger.bytes_weights;
    let deviation = if predicted_bytes == 0.0 {
        if measured == 0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (measured as f64 - predicted_bytes).abs() / predicted_bytes
    };
    Ok(ReconcileReport {
        measured_bytes: measured,
        predicted_bytes,
        deviation_fraction: deviation,
        within_tolerance: deviation <= tolerance_fraction,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn budget_table_rows_are_exact() {
        let full = memory_budget(128, None, false).unwrap();
        assert_eq!(
            (full.key_budget_fraction, full.value_budget_fraction, full.total_fraction),
            (1.0, 1.0, 1.0)
        );
        let vo = memory_budget(128, None, true).unwrap();
        assert_eq!(
            (vo.key_budget_fraction, vo.value_budget_fraction, vo.total_fraction),
            (1.0, 0.0, 0.5)
        );
        let g64 = memory_budget(128, Some(64), true).unwrap();
        assert_eq!(
            (g64.key_budget_fraction, g64.value_budget_fraction, g64.total_fraction),
            (0.5, 0.0, 0.25)
        );
        let g32 = memory_budget(128, Some(32), true).unwrap();
        assert_eq!(
            (g32.key_budget_fraction, g32.value_budget_fraction, g32.total_fraction),
            (0.25, 0.0, 0.125)
        );
        assert_eq!(g32.assumptions, DEFAULT_ASSUMPTIONS);
    }

    #[test]
    fn budget_rejects_bad_groups() {
        assert!(memory_budget(128, Some(48), true).is_err());
        assert!(memory_budget(128, Some(0), true).is_err());
        assert!(memory_budget(0, None, true).is_err());
    }

    #[test]
    fn cost_model_reference_points() {
        let m = compute_cost(1_000_000, 128, 4096, 32);
        assert_eq!(m.per_query.mults_approx, 524_288);
        assert_eq!(m.per_query.mults_exact, 128_000_000);
        assert_eq!(m.per_pass.mults_exact, 128_000_000_000_000u128);
        assert_eq!(m.per_pass.adds_approx, 32_000_000_000_000u128);

        // n = 1
        let one = compute_cost(1, 128, 16, 4);
        assert_eq!(one.per_query.mults_exact, 128);

        // break-even: n == c makes the approximate mult count equal
        let be = compute_cost(4096, 64, 4096, 8);
        assert_eq!(be.per_query.mults_approx, be.per_query.mults_exact);
    }

    #[test]
    fn comm_overhead_headline_figure() {
        let bytes = comm_overhead(1_000_000, 32, 8, 0.2, 2).unwrap();
        assert_eq!(bytes, 102_400_000.0);
        assert_eq!(bytes_to_mb(bytes), 102.4);
    }

    #[test]
    fn comm_overhead_edges_and_linearity() {
        assert_eq!(comm_overhead(1_000_000, 32, 8, 0.0, 2).unwrap(), 0.0);
        assert_eq!(comm_overhead(1000, 1, 1, 1.0, 2).unwrap(), 2000.0);
        assert!(comm_overhead(1, 1, 1, 1.5, 2).is_err());
        // linear in each argument
        let base = comm_overhead(1000, 4, 2, 0.5, 2).unwrap();
        assert_eq!(comm_overhead(2000, 4, 2, 0.5, 2).unwrap(), 2.0 * base);
        assert_eq!(comm_overhead(1000, 8, 2, 0.5, 2).unwrap(), 2.0 * base);
        assert_eq!(comm_overhead(1000, 4, 2, 0.25, 2).unwrap(), 0.5 * base);
    }

    #[test]
    fn reconcile_constant_ratio_is_exact() {
        // 10 messages, each selecting exactly 20% of n = 500
        let ledger = TransferLedger {
            bytes_weights: 10 * 100 * 2,
            bytes_indices: 10 * 100 * 4,
            messages: 10,
            selected_tokens: 10 * 100,
        };
        let ratio = empirical_mean_ratio(&ledger, 500).unwrap();
        assert_eq!(ratio, 0.2);
        // predicted for 10 single-layer single-head messages
        let predicted = 10.0 * comm_overhead(500, 1, 1, ratio, 2).unwrap();
        let report = reconcile_ledger(&ledger, predicted, 0.0).unwrap();
        assert_eq!(report.deviation_fraction, 0.0);
        assert!(report.within_tolerance);
    }

    #[test]
    fn reconcile_flags_deviation() {
        let ledger = TransferLedger {
            bytes_weights: 1000,
            bytes_indices: 2000,
            messages: 5,
            selected_tokens: 500,
        };
        let report = reconcile_ledger(&ledger, 800.0, 0.1).unwrap();
        assert!(!report.within_tolerance);
        assert!((report.deviation_fraction - 0.25).abs() < 1e-12);
    }

    #[test]
    fn reconcile_rejects_empty_ledger() {
        let ledger = TransferLedger::default();
        assert!(matches!(
            reconcile_ledger(&ledger, 1.0, 0.1),
            Err(Error::EmptyLedger)
        ));
        assert!(matches!(
            empirical_mean_ratio(&ledger, 10),
            Err(Error::EmptyLedger)
        ));
    }
}
