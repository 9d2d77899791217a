//! The three architectures, their parameter layout and the FXL1 / FXD1
//! file formats.
//!
//! ```text
//! cargo run --release --example model_zoo
//! ```

use fedex::extraction::ExtractedDataset;
use fedex::model::{ArchitectureSpec, Classifier, ModelInstance};
use fedex::tensor::Tensor;

fn main() -> fedex::Result<()> {
    let specs = [
        ArchitectureSpec::mlp(&[8], &[16], 3),
        ArchitectureSpec::basic_cnn(&[1, 28, 28], 10),
        ArchitectureSpec::mini_resnet(&[3, 16, 16], 10),
    ];
    for spec in &specs {
        let model = ModelInstance::initialize(spec, 42)?;
        println!(
            "{spec}: {} parameters, fingerprint {}",
            model.parameter_count(),
            model.fingerprint()
        );
        for (name, t) in model.parameters() {
            println!("  {name:<22} {:?}", t.shape());
        }
        let bytes = model.save_parameters();
        let back = ModelInstance::load_parameters(spec, &bytes)?;
        assert_eq!(back.save_parameters(), bytes);
        println!("  FXL1 round trip ok ({} bytes)", bytes.len());
    }

    // A spec mismatch is reported, not silently reshaped.
    let mlp = ModelInstance::initialize(&specs[0], 1)?;
    let other = ArchitectureSpec::mlp(&[8], &[32], 3);
    println!(
        "loading into `{other}`: {}",
        ModelInstance::load_parameters(&other, &mlp.save_parameters()).unwrap_err()
    );

    // Query/response pairs persist as FXD1.
    let xs = Tensor::new(vec![2, 8], (0..16).map(f64::from).collect())?;
    let pairs = ExtractedDataset::new(xs.clone(), mlp.predict(&xs)?)?;
    let bytes = pairs.to_fxd();
    assert_eq!(ExtractedDataset::from_fxd(&bytes)?, pairs);
    println!(
        "FXD1 round trip ok ({} bytes for {} pairs)",
        bytes.len(),
        pairs.len()
    );
    Ok(())
}
