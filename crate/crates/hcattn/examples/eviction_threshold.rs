//! Sweep the cumulative-mass threshold and watch how many tokens survive.
//!
//! ```bash
//! cargo run --example eviction_threshold
//! ```

use hcattn::eviction::{select, selection_ratio};
use hcattn::rng::SplitMix64;
use hcattn::score_engine::{normalize, ScoreVector};

fn main() -> hcattn::Result<()> {
    let n = 4096;
    let d = 64;
    let mut rng = SplitMix64::new(17);

    // peaked attention: a handful of tokens dominate
    let mut peaked = vec![0.0f32; n];
    rng.fill_normal(&mut peaked);
    for i in 0..12 {
        peaked[rng.gen_index(n)] += 40.0 + 5.0 * i as f32;
    }
    // diffuse attention: everything comparable
    let mut diffuse = vec![0.0f32; n];
    rng.fill_normal(&mut diffuse);

    let peaked = normalize(&ScoreVector::from_scores(peaked), d)?;
    let diffuse = normalize(&ScoreVector::from_scores(diffuse), d)?;

    println!("n = {n}, selection under varying tau:");
    println!("tau     peaked k*   ratio      diffuse k*   ratio");
    for tau in [0.3, 0.5, 0.7, 0.9, 1.0] {
        let p = select(&peaked, tau)?;
        let f = select(&diffuse, tau)?;
        println!(
            "{tau:<6}  {:>8}   {:>6.4}     {:>8}    {:>6.4}",
            p.k_star,
            selection_ratio(&p),
            f.k_star,
            selection_ratio(&f)
        );
    }

    let sel = select(&peaked, 0.9)?;
    let mass: f64 = sel.weights.iter().map(|&w| w as f64).sum();
    println!(
        "\ntau=0.9 on the peaked head keeps {} of {} tokens carrying {:.4} of the mass",
        sel.k_star, n, mass
    );
    println!(
        "heaviest survivors: indices {:?}",
        &sel.indices[..sel.k_star.min(6)]
    );
    Ok(())
}
