//! The coupled pair of transducers with their shared embedding tables.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::transducer::{ModelConfig, Transducer};
use crate::vocab::{Side, Vocabulary};

/// `M_xz` and `M_zx` over one parameter store.
///
/// Each side has a single embedding table (`emb.x`, `emb.z`). The table of
/// side `Y` is the decoder input table and bottleneck dictionary of the model
/// that generates `Y`, and the encoder input table of the model that reads
/// `Y`.
#[derive(Debug, Clone)]
pub struct SymbolicAutoencoder {
    pub config: ModelConfig,
    pub x_vocab: Vocabulary,
    pub z_vocab: Vocabulary,
    pub store: ParamStore,
    pub m_xz: Transducer,
    pub m_zx: Transducer,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    config: ModelConfig,
    x_vocab: Vec<String>,
    z_vocab: Vec<String>,
}

impl SymbolicAutoencoder {
    pub fn new(config: ModelConfig, x_vocab: Vocabulary, z_vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.d_model;
        let emb_x = store.add_normal("emb.x", [x_vocab.len(), d], 1.0, &mut rng);
        let emb_z = store.add_normal("emb.z", [z_vocab.len(), d], 1.0, &mut rng);
        let m_xz = Transducer::new(&mut store, "xz", Side::X, Side::Z, emb_x, emb_z, &config, &mut rng);
        let m_zx = Transducer::new(&mut store, "zx", Side::Z, Side::X, emb_z, emb_x, &config, &mut rng);
        Ok(SymbolicAutoencoder { config, x_vocab, z_vocab, store, m_xz, m_zx })
    }

    /// The transducer that reads `source`.
    pub fn reader(&self, source: Side) -> &Transducer {
        match source {
            Side::X => &self.m_xz,
            Side::Z => &self.m_zx,
        }
    }

    pub fn vocab(&self, side: Side) -> &Vocabulary {
        match side {
            Side::X => &self.x_vocab,
            Side::Z => &self.z_vocab,
        }
    }

    pub fn metadata(&self) -> String {
        let meta = Meta {
            config: self.config.clone(),
            x_vocab: self.x_vocab.tokens()[3..].to_vec(),
            z_vocab: self.z_vocab.tokens()[3..].to_vec(),
        };
        serde_json::to_string(&meta).expect("metadata serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.metadata(), &self.store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, store) = checkpoint::load(path)?;
        Self::from_parts(&meta, store)
    }

    /// Rebuilds a system from checkpoint metadata and parameters.
    pub fn from_parts(meta: &str, store: ParamStore) -> Result<Self> {
        let meta: Meta = serde_json::from_str(meta).map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
        meta.config.validate()?;
        let m_xz = Transducer::bind_existing(&store, "xz", Side::X, Side::Z, &meta.config)?;
        let m_zx = Transducer::bind_existing(&store, "zx", Side::Z, Side::X, &meta.config)?;
        Ok(SymbolicAutoencoder {
            config: meta.config,
            x_vocab: Vocabulary::from_tokens(&meta.x_vocab),
            z_vocab: Vocabulary::from_tokens(&meta.z_vocab),
            store,
            m_xz,
            m_zx,
        })
    }
}
