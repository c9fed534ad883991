use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::latent::sample_latent;
use crate::model::{Example, SumModel};
use crate::numcore::Tape;

/// Writes `n_samples` posterior draws per document as CSV:
/// `doc_id, sample_id, z0_0.., zk_0..`, full vectors. The inference network
/// runs in eval mode so only the reparameterization noise varies.
pub fn dump_latents<R: Rng + ?Sized>(
    model: &SumModel,
    examples: &[Example],
    n_samples: usize,
    path: &Path,
    rng: &mut R,
) -> Result<usize> {
    if n_samples == 0 {
        return Err(Error::Config("n_samples must be at least 1".into()));
    }
    let l = model.config.latent_dim;
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["doc_id".to_string(), "sample_id".to_string()];
    header.extend((0..l).map(|i| format!("z0_{i}")));
    header.extend((0..l).map(|i| format!("zk_{i}")));
    w.write_record(&header)?;
    let mut rows = 0;
    for (doc, ex) in examples.iter().enumerate() {
        for s in 0..n_samples {
            let mut tape = Tape::new();
            let (mu, ls) = model.posterior(&mut tape, &ex.bow, false, rng)?;
            let draw = sample_latent(&mut tape, mu, ls, &model.flows, rng)?;
            let mut rec = vec![doc.to_string(), s.to_string()];
            rec.extend(tape.data(draw.z0).iter().map(|v| v.to_string()));
            rec.extend(tape.data(draw.zk).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
            rows += 1;
        }
    }
    w.flush()?;
    Ok(rows)
}
