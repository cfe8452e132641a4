//! Print the memory, compute and communication budget models.
//!
//! ```bash
//! cargo run --example budget_report
//! ```

use hcattn::accounting::{bytes_to_mb, comm_overhead, compute_cost, memory_budget};

fn main() -> hcattn::Result<()> {
    println!("device memory budget at d = 128 (2-byte elements, 2-byte indices):");
    println!("{:<28} {:>8} {:>8} {:>8}", "strategy", "K", "V", "total");
    let rows: [(&str, Option<usize>, bool); 4] = [
        ("full attention", None, false),
        ("value offloading (VO)", None, true),
        ("VO + quantization (g=64)", Some(64), true),
        ("VO + quantization (g=32)", Some(32), true),
    ];
    for (label, g, offload) in rows {
        let b = memory_budget(128, g, offload)?;
        println!(
            "{label:<28} {:>7.1}% {:>7.1}% {:>7.2}%",
            b.key_budget_fraction * 100.0,
            b.value_budget_fraction * 100.0,
            b.total_fraction * 100.0
        );
    }

    println!("\ncompute cost, n=10^6 tokens, d=128, c=4096, g=32:");
    let cost = compute_cost(1_000_000, 128, 4096, 32);
    println!(
        "  per query: exact {} mults vs table {} mults",
        cost.per_query.mults_exact, cost.per_query.mults_approx
    );
    println!(
        "  full pass: exact {} adds vs gather {} adds",
        cost.per_pass.adds_exact, cost.per_pass.adds_approx
    );

    println!("\ncommunication overhead, n=10^6, L=32 layers, H=8 heads, 20% retained:");
    let bytes = comm_overhead(1_000_000, 32, 8, 0.2, 2)?;
    println!("  {bytes} bytes = {} MB per decode pass", bytes_to_mb(bytes));
    Ok(())
}
