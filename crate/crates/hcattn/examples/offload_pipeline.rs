//! Drive the host-domain value store through its message channel and
//! reconcile the transfer ledger against the communication model.
//!
//! ```bash
//! cargo run --example offload_pipeline
//! ```

use hcattn::accounting::{comm_overhead, empirical_mean_ratio, reconcile_ledger};
use hcattn::eviction::select;
use hcattn::mat::Matrix;
use hcattn::rng::SplitMix64;
use hcattn::score_engine::{normalize, ScoreVector};
use hcattn::value_store::{GatherRequest, ValueStore};

fn main() -> hcattn::Result<()> {
    let (layers, heads, d, n) = (4usize, 2usize, 32usize, 1024usize);
    let mut store = ValueStore::new(layers, heads, d);
    let mut rng = SplitMix64::new(23);

    // offload every (layer, head) value matrix to the host domain
    for layer in 0..layers {
        for head in 0..heads {
            let mut data = vec![0.0f32; n * d];
            rng.fill_normal(&mut data);
            store.offload(layer, head, &Matrix::from_vec(n, d, data)?)?;
        }
    }
    println!("offloaded {} value matrices of {n}x{d}", layers * heads);

    // 50 decode steps: per (layer, head), select under tau=0.9 and send
    // the explicit channel message
    let steps = 50;
    for _ in 0..steps {
        for layer in 0..layers {
            for head in 0..heads {
                let mut scores = vec![0.0f32; n];
                rng.fill_normal(&mut scores);
                scores[rng.gen_index(n)] += 12.0; // a heavy hitter
                let weights = normalize(&ScoreVector::from_scores(scores), d)?;
                let sel = select(&weights, 0.9)?;
                let req = GatherRequest::from_selection(layer, head, &sel);
                let reply = store.serve(&req)?;
                assert_eq!(reply.output.len(), d);
            }
        }
    }

    let ledger = store.ledger();
    println!(
        "ledger: {} messages, {} weight bytes, {} index bytes",
        ledger.messages, ledger.bytes_weights, ledger.bytes_indices
    );

    let ratio = empirical_mean_ratio(ledger, n)?;
    let predicted = steps as f64 * comm_overhead(n, layers, heads, ratio, 2)?;
    let report = reconcile_ledger(ledger, predicted, 0.001)?;
    println!(
        "mean selection ratio {ratio:.4}; model predicts {predicted} bytes, measured {} \
         (deviation {:.2e}, within 0.1%: {})",
        report.measured_bytes, report.deviation_fraction, report.within_tolerance
    );
    Ok(())
}
