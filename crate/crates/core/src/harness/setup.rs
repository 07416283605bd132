//! Data and gateway construction from a run configuration.

use crate::corpus::{load_dataset, split_dataset, Dataset};
use crate::error::{Error, Result};
use crate::llm::{Gateway, HttpTransport, LlmMode, MockTable, TranscriptCache};
use crate::raster::ImageBank;
use crate::synth::{self, BenchmarkConfig};

use super::config::{DataConfig, LlmConfig};

pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub bank: ImageBank,
}

/// Loads the manifest (or renders the synthetic benchmark) and splits it by species.
pub fn load_data(cfg: &DataConfig, input_size: usize) -> Result<Splits> {
    let (ds, bank) = match &cfg.manifest {
        Some(path) => {
            let mut ds = load_dataset(path, None)?;
            let root = cfg
                .image_root
                .clone()
                .or_else(|| path.parent().map(|p| p.to_path_buf()))
                .unwrap_or_default();
            let bank = ImageBank::load(&mut ds, &root, input_size)?;
            (ds, bank)
        }
        None => {
            if input_size != BenchmarkConfig::default().size {
                return Err(Error::Config(format!(
                    "the synthetic benchmark renders {}px images; model.input_size is {input_size}",
                    BenchmarkConfig::default().size
                )));
            }
            synth::generate(&BenchmarkConfig {
                per_species: cfg.synthetic_per_species,
                seed: cfg.synthetic_seed,
                ..Default::default()
            })?
        }
    };
    let (train, val, test) = split_dataset(&ds, &cfg.split)?;
    Ok(Splits {
        train,
        val,
        test,
        bank,
    })
}

pub fn build_gateway(cfg: &LlmConfig) -> Result<Gateway> {
    let cache = match &cfg.cache_path {
        Some(p) => TranscriptCache::open(p)?,
        None => TranscriptCache::in_memory(),
    };
    match cfg.mode {
        LlmMode::Mock => {
            let table = match &cfg.mock_table {
                Some(p) => {
                    MockTable::from_json(&std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?
                }
                None => synth::mock_table(),
            };
            Ok(Gateway::mock(table))
        }
        LlmMode::Replay => {
            if cfg.cache_path.is_none() {
                return Err(Error::Config("replay mode needs llm.cache_path".into()));
            }
            Ok(Gateway::replay(cache))
        }
        LlmMode::Live | LlmMode::Record => Ok(Gateway::with_transport(
            cfg.mode,
            cache,
            Box::new(HttpTransport::from_env()?),
            cfg.max_retries,
        )),
    }
}
