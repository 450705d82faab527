//! Checkpoints are directories holding `manifest.json` and `tensors.bin`
//! (raw little-endian f64 payloads in manifest order).

use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::Config;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.json";
pub const PAYLOAD: &str = "tensors.bin";
const FORMAT_VERSION: u32 = 1;

/// Position of a ChaCha8 stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// `u128` word position, as decimal text.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bad = |what: &str| Error::Corrupt(format!("rng state has a bad {what}"));
        let seed: [u8; 32] = hex::decode(&self.seed)
            .ok()
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| bad("seed"))?;
        let pos: u128 = self.word_pos.parse().map_err(|_| bad("word position"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the payload.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: u32,
    pub stage: String,
    pub step: u64,
    pub config: String,
    pub config_sha256: String,
    pub payload_sha256: String,
    pub rng: RngState,
    pub tensors: Vec<TensorEntry>,
}

/// Everything needed to continue a run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: Config,
    pub step: u64,
    pub rng: RngState,
    pub tensors: Vec<(String, Tensor)>,
}

pub fn checkpoint_dir(run: &Path, step: u64) -> PathBuf {
    run.join("checkpoints").join(format!("step-{step:08}"))
}

/// Highest-step checkpoint under a run directory.
pub fn latest_checkpoint(run: &Path) -> Option<PathBuf> {
    let entries = std::fs::read_dir(run.join("checkpoints")).ok()?;
    entries
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            let step: u64 = name.strip_prefix("step-")?.parse().ok()?;
            e.path().join(MANIFEST).is_file().then_some((step, e.path()))
        })
        .max_by_key(|(s, _)| *s)
        .map(|(_, p)| p)
}

/// Writes into a sibling temporary directory and renames it into place.
pub fn save_checkpoint(dir: &Path, state: &TrainState) -> Result<()> {
    let mut payload = Vec::new();
    let mut entries = Vec::with_capacity(state.tensors.len());
    for (name, t) in &state.tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype: "f64le".into(),
            offset: payload.len() as u64,
        });
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let config = state.config.to_toml_string();
    let manifest = Manifest {
        format: FORMAT_VERSION,
        stage: state.config.stage().to_string(),
        step: state.step,
        config_sha256: state.config.hash(),
        config,
        payload_sha256: hex::encode(Sha256::digest(&payload)),
        rng: state.rng.clone(),
        tensors: entries,
    };
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;

    let parent = dir.parent().unwrap_or(Path::new("."));
    std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or("checkpoint");
    let tmp = parent.join(format!(".{name}.partial"));
    if tmp.exists() {
        std::fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::create_dir(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let write = |file: &str, bytes: &[u8]| {
        let p = tmp.join(file);
        std::fs::write(&p, bytes).map_err(|e| Error::io(p, e))
    };
    write(PAYLOAD, &payload)?;
    write(MANIFEST, &json)?;
    if dir.exists() {
        std::fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Corrupt(format!("{}: {e}", path.display())))
}

pub fn load_checkpoint(dir: &Path) -> Result<TrainState> {
    let manifest = read_manifest(dir)?;
    if manifest.format != FORMAT_VERSION {
        return Err(Error::Corrupt(format!("unsupported checkpoint format {}", manifest.format)));
    }
    let config = Config::from_toml_str(&manifest.config)?;
    if config.hash() != manifest.config_sha256 {
        return Err(Error::Corrupt("config hash does not match the manifest".into()));
    }
    let path = dir.join(PAYLOAD);
    let payload = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if hex::encode(Sha256::digest(&payload)) != manifest.payload_sha256 {
        return Err(Error::Corrupt(format!("{} does not match its recorded hash", path.display())));
    }
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for e in &manifest.tensors {
        if e.dtype != "f64le" {
            return Err(Error::Corrupt(format!("tensor `{}` has dtype {}", e.name, e.dtype)));
        }
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let bytes = payload
            .get(start..start + 8 * n)
            .ok_or_else(|| Error::Corrupt(format!("tensor `{}` runs past the payload", e.name)))?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        tensors.push((e.name.clone(), Tensor::new(&e.shape, data)?));
    }
    manifest.rng.restore()?;
    Ok(TrainState {
        config,
        step: manifest.step,
        rng: manifest.rng,
        tensors,
    })
}
