//! Score tokens through the query-codebook lookup table and compare with
//! dense dot products.
//!
//! Building the table costs d*c multiplications once per query; scoring
//! each token is then g table reads instead of d multiplications.
//!
//! ```bash
//! cargo run --example lookup_scores
//! ```

use hcattn::accounting::compute_cost;
use hcattn::mat::dot;
use hcattn::quantizer::{encode, reconstruct, train_codebook, QuantizerConfig};
use hcattn::rng::SplitMix64;
use hcattn::score_engine::{approx_scores, build_table, normalize};
use hcattn::tensor_io::{gen_synthetic, SyntheticSpec};

fn main() -> hcattn::Result<()> {
    let n = 4096;
    let d = 64;
    let (g, c) = (16, 128);

    let keys = gen_synthetic(&SyntheticSpec::gaussian(n, d, 3))?.to_matrix()?;
    let qcfg = QuantizerConfig::new(d, g, c).with_seed(5).with_restarts(1);
    let cb = train_codebook(&keys, &qcfg)?;
    let p = encode(&keys, &cb)?;

    let mut rng = SplitMix64::new(11);
    let mut q = vec![0.0f32; d];
    rng.fill_normal(&mut q);

    let table = build_table(&q, &cb)?;
    let z = approx_scores(&table, &p)?;

    // the table route equals dotting against the reconstructed keys
    let recon = reconstruct(&p, &cb)?;
    let max_identity_gap = (0..n)
        .map(|t| (z.scores[t] as f64 - dot(&q, recon.row(t))).abs())
        .fold(0.0f64, f64::max)
;
    // and approximates the true scores up to quantization error
    let max_true_gap = (0..n)
        .map(|t| (z.scores[t] as f64 - dot(&q, keys.row(t))).abs())
        .fold(0.0f64, f64::max);

    println!("lookup table: {} groups x {} centroids", table.g(), table.c());
    println!("max |table score - reconstructed dot| = {max_identity_gap:.2e} (algebraic identity)");
    println!("max |table score - true dot|          = {max_true_gap:.3} (quantization error)");

    let weights = normalize(&z, d)?.weights.unwrap();
    let sum: f64 = weights.iter().map(|&w| w as f64).sum();
    println!("softmax weights sum to {sum:.9}");

    let cost = compute_cost(n, d, c, g);
    println!(
        "per-query multiplications: exact n*d = {}, table d*c = {} ({}x fewer)",
        cost.per_query.mults_exact,
        cost.per_query.mults_approx,
        cost.per_query.mults_exact / cost.per_query.mults_approx
    );
    Ok(())
}
