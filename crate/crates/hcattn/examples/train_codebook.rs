//! Train grouped-quantization codebooks and measure reconstruction error.
//!
//! ```bash
//! cargo run --example train_codebook
//! ```

use hcattn::quantizer::{encode, quantization_error, reconstruct, train_codebook, QuantizerConfig};
use hcattn::tensor_io::{gen_synthetic, SyntheticSpec};

fn main() -> hcattn::Result<()> {
    // Planted data with 4 clusters per group quantizes exactly at c = 4.
    let planted = gen_synthetic(&SyntheticSpec::planted(2048, 64, 16, 4, 0.0, 7))?.to_matrix()?;
    let qcfg = QuantizerConfig::new(64, 16, 4).with_seed(1);
    let cb = train_codebook(&planted, &qcfg)?;
    println!(
        "planted data, g=16 c=4: inertia {:.3e} (exact codebook)",
        cb.inertia()
    );
    let p = encode(&planted, &cb)?;
    let recon = reconstruct(&p, &cb)?;
    println!(
        "reconstruct(encode(K)) == K bit-exactly: {}",
        recon.data() == planted.data()
    );
    println!(
        "index matrix: {} tokens x {} groups of u16 = {} bytes vs {} bytes of f32 keys",
        p.n(),
        p.g(),
        p.n() * p.g() * 2,
        planted.rows() * planted.cols() * 4
    );

    // On Gaussian data more centroids buy lower error.
    let gauss = gen_synthetic(&SyntheticSpec::gaussian(2048, 64, 9))?.to_matrix()?;
    println!("\ngaussian data, g=16, error vs centroid count:");
    for c in [4usize, 16, 64, 256] {
        let qcfg = QuantizerConfig::new(64, 16, c).with_seed(1).with_restarts(1);
        let cb = train_codebook(&gauss, &qcfg)?;
        println!(
            "  c={c:<4} inertia {:.4}  quantization_error {:.4}",
            cb.inertia(),
            quantization_error(&gauss, &cb)?
        );
    }
    Ok(())
}
