//! Full pipeline against the exact-attention oracle: value offloading,
//! key quantization, eviction, and overlapped host gathers.
//!
//! ```bash
//! cargo run --example end_to_end
//! ```

use hcattn::engine::{
    exact_attention, train_layer_codebooks, DecodeEngine, EngineConfig, ExecMode,
};
use hcattn::mat::Matrix;
use hcattn::quantizer::QuantizerConfig;
use hcattn::rng::{mix, SplitMix64};
use hcattn::tensor_io::{gen_synthetic, SyntheticSpec};

fn rel_l2(a: &[f32], b: &[f32]) -> f64 {
    let num: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        .sqrt();
    let den: f64 = b.iter().map(|&y| (y as f64).powi(2)).sum::<f64>().sqrt();
    num / den.max(1e-30)
}

fn main() -> hcattn::Result<()> {
    let (layers, heads, d, n, steps) = (4usize, 4usize, 64usize, 2048usize, 16usize);
    let seed = 99u64;

    let mut keys = Vec::new();
    let mut values = Vec::new();
    for slot in 0..layers * heads {
        keys.push(
            gen_synthetic(&SyntheticSpec::gaussian(n, d, mix(seed, slot as u64)))?.to_matrix()?,
        );
        values.push(
            gen_synthetic(&SyntheticSpec::gaussian(n, d, mix(seed, 0x100 + slot as u64)))?
                .to_matrix()?,
        );
    }

    let mut rng = SplitMix64::new(mix(seed, 0x999));
    let mut step_queries = Vec::new();
    for _ in 0..steps {
        let pass: Vec<Vec<Vec<f32>>> = (0..layers)
            .map(|_| {
                (0..heads)
                    .map(|_| {
                        let mut q = vec![0.0f32; d];
                        rng.fill_normal(&mut q);
                        q
                    })
                    .collect()
            })
            .collect();
        step_queries.push(pass);
    }

    let run = |label: &str, cfg: EngineConfig, keys: &[Matrix], values: &[Matrix]| -> hcattn::Result<()> {
        let codebooks = if cfg.quantize_keys {
            Some(train_layer_codebooks(keys, layers, heads, &cfg.quantizer)?)
        } else {
            None
        };
        let mut engine = DecodeEngine::prefill(keys, values, cfg, codebooks)?;
        let mut max_err = 0.0f64;
        let mut sum_err = 0.0f64;
        let mut count = 0u64;
        for pass in &step_queries {
            // host gathers overlap the next layer's device scores
            let outputs = engine.decode_pass(pass, ExecMode::Overlapped)?;
            for layer in 0..layers {
                for head in 0..heads {
                    let kv = cfg.kv_head_for(head);
                    let slot = layer * heads + kv;
                    let oracle =
                        exact_attention(&pass[layer][head], &keys[slot], &values[slot])?;
                    let err = rel_l2(&outputs[layer][head], &oracle);
                    max_err = max_err.max(err);
                    sum_err += err;
                    count += 1;
                }
            }
        }
        let ratios: Vec<String> = (0..layers)
            .map(|l| format!("{:.3}", engine.mean_selection_ratio(l).unwrap_or(0.0)))
            .collect();
        let ledger = engine.store().ledger();
        println!("{label}");
        println!("  mean rel err {:.3e}, max rel err {:.3e}", sum_err / count as f64, max_err);
        println!("  mean selection ratio per layer: [{}]", ratios.join(", "));
        println!(
            "  channel: {} messages, {} weight bytes\n",
            ledger.messages, ledger.bytes_weights
        );
        Ok(())
    };

    println!(
        "{layers} layers x {heads} heads, n={n}, d={d}, {steps} decode steps vs exact oracle\n"
    );

    run(
        "value offloading only, tau = 1 (exact up to rounding):",
        EngineConfig::new(layers, heads, heads, d).with_tau(1.0),
        &keys,
        &values,
    )?;

    run(
        "value offloading, tau = 0.9:",
        EngineConfig::new(layers, heads, heads, d).with_tau(0.9),
        &keys,
        &values,
    )?;

    let qcfg = QuantizerConfig::new(d, 16, 512).with_seed(1).with_restarts(1);
    run(
        "key quantization g=16 c=512 + offloading, tau = 0.9:",
        EngineConfig::new(layers, heads, heads, d)
            .with_quantizer(qcfg)
            .with_tau(0.9),
        &keys,
        &values,
    )?;

    Ok(())
}
