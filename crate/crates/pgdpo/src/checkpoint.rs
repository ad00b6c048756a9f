//! Versioned JSON checkpoints: policy records (networks or closed forms),
//! optimizer state, and the training position, written atomically.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{AdamState, Head, Mlp};
use crate::sim::{CPolicy, PiPolicy};

/// Format version; readers reject anything else.
pub const CHECKPOINT_VERSION: u32 = 1;

/// One policy as stored on disk: either a network (layer sizes, head kind,
/// parameters in row-major order) or a closed-form benchmark policy with a
/// scale factor.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicyRecord {
    Net { layers: Vec<usize>, head: Head, t_scale: f64, params: Vec<f64> },
    ClosedForm { scale: f64 },
}

impl PolicyRecord {
    pub fn from_pi(p: &PiPolicy) -> PolicyRecord {
        match p {
            PiPolicy::Net(net) => PolicyRecord::from_net(net),
            PiPolicy::ClosedForm { scale } => PolicyRecord::ClosedForm { scale: *scale },
        }
    }

    pub fn from_c(p: &CPolicy) -> PolicyRecord {
        match p {
            CPolicy::Net(net) => PolicyRecord::from_net(net),
            CPolicy::ClosedForm { scale } => PolicyRecord::ClosedForm { scale: *scale },
        }
    }

    fn from_net(net: &Mlp) -> PolicyRecord {
        PolicyRecord::Net {
            layers: net.layers().to_vec(),
            head: net.head(),
            t_scale: net.t_scale(),
            params: net.params().to_vec(),
        }
    }

    /// Rebuild an investment policy; the record must carry the matching head.
    pub fn into_pi(self) -> Result<PiPolicy> {
        match self {
            PolicyRecord::Net { layers, head, t_scale, params } => {
                if head != Head::Investment {
                    return Err(Error::Checkpoint(
                        "investment policy record has a consumption head".into(),
                    ));
                }
                let net = Mlp::from_parts(layers, head, params, t_scale)
                    .map_err(|e| Error::Checkpoint(format!("invalid network record: {e}")))?;
                Ok(PiPolicy::Net(net))
            }
            PolicyRecord::ClosedForm { scale } => Ok(PiPolicy::ClosedForm { scale }),
        }
    }

    pub fn into_c(self) -> Result<CPolicy> {
        match self {
            PolicyRecord::Net { layers, head, t_scale, params } => {
                if head != Head::Consumption {
                    return Err(Error::Checkpoint(
                        "consumption policy record has an investment head".into(),
                    ));
                }
                let net = Mlp::from_parts(layers, head, params, t_scale)
                    .map_err(|e| Error::Checkpoint(format!("invalid network record: {e}")))?;
                Ok(CPolicy::Net(net))
            }
            PolicyRecord::ClosedForm { scale } => Ok(CPolicy::ClosedForm { scale }),
        }
    }
}

/// Full training checkpoint.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    /// Which trainer produced this ("pgdpo" or "pgdpo-reg").
    pub algo: String,
    /// Iterations completed; resuming starts at this iteration.
    pub iter: u64,
    pub seed: u64,
    pub pi: PolicyRecord,
    pub c: PolicyRecord,
    /// Present for network policies produced by training.
    pub adam_pi: Option<AdamState>,
    pub adam_c: Option<AdamState>,
}

/// Serialize and write atomically: a temp file in the target directory is
/// renamed over the destination, so a crash never leaves a partial file.
pub fn save(path: &Path, ck: &Checkpoint) -> Result<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let json = serde_json::to_string(ck)
        .map_err(|e| Error::Checkpoint(format!("serialization failed: {e}")))?;
    write_atomic(path, json.as_bytes())
}

/// Write bytes to `path` via a temp file and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    use std::io::Write;
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Read and validate a checkpoint.
pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    let ck: Checkpoint = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Checkpoint(format!("corrupted checkpoint {}: {e}", path.display())))?;
    if ck.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "version mismatch in {}: found {}, expected {}",
            path.display(),
            ck.version,
            CHECKPOINT_VERSION
        )));
    }
    Ok(ck)
}
