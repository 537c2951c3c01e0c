//! Run orchestration: synthetic data, configuration, the training loop,
//! ablation suites, instruments, and the gradient audit behind the CLI.

pub mod ablate;
pub mod analyze;
pub mod config;
pub mod data;
pub mod gradcheck;
pub mod train;

pub use ablate::{balance_demo, measure_step_secs, run_suite, Suite};
pub use analyze::{analyze, analyze_model, AnalysisReport};
pub use config::{ConfigMap, RunConfig, Variant};
pub use data::{gen_synthetic, ks_uniform_p, DataSpec, Sample, Split, SyntheticDataset};
pub use gradcheck::gradcheck_suite;
pub use train::{build_model, evaluate, evaluate_model, train, Model, TrainSummary};

use crate::analysis::write_pgm;
use crate::error::Result;

/// Write a generated dataset to disk: per-image PGM channel dumps, mask
/// dumps, and a labels CSV.
pub fn export_dataset(ds: &SyntheticDataset, dir: &std::path::Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let s = ds.spec.size;
    let mut rows = vec!["image,object,class,radius".to_string()];
    for (i, sm) in ds.samples.iter().enumerate() {
        for ch in 0..3 {
            write_pgm(
                &dir.join(format!("img{i:04}_c{ch}.pgm")),
                &sm.image[ch * s * s..(ch + 1) * s * s],
                s,
                s,
            )?;
        }
        write_pgm(&dir.join(format!("img{i:04}_mask.pgm")), &sm.mask, s, s)?;
        for (oi, (cls, r)) in sm
            .segments
            .classes
            .iter()
            .zip(&sm.radii)
            .enumerate()
        {
            rows.push(format!("{i},{oi},{cls},{r}"));
        }
    }
    std::fs::write(dir.join("objects.csv"), rows.join("\n") + "\n")?;
    Ok(())
}
