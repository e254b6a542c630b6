//! Self-describing model checkpoints.
//!
//! JSON with named tensors; `f64` values round-trip bit-exactly through the
//! shortest-representation float formatting used by the serializer.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::HstuModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub model: HstuModel,
    /// Seed and stream position of the training rng at save time.
    pub rng_seed: u64,
    pub rng_word_pos: u128,
}

impl Checkpoint {
    pub fn new(model: HstuModel, rng_seed: u64, rng_word_pos: u128) -> Self {
        Checkpoint { model, rng_seed, rng_word_pos }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.rng_seed);
        rng.set_word_pos(self.rng_word_pos);
        rng
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = File::create(path)?;
        serde_json::to_writer(BufWriter::new(file), self)
            .map_err(|e| Error::data(format!("checkpoint write: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        let file = File::open(path.as_ref())?;
        serde_json::from_reader(BufReader::new(file))
            .map_err(|e| Error::data(format!("checkpoint read {}: {e}", path.as_ref().display())))
    }
}
