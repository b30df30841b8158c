//! On-disk formats: binary path archives, ensembles, versioned JSON records and configs.

use std::fs;
use std::path::Path as FsPath;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gibbs_sampler::{Ensemble, EnsembleMeta};
use crate::path_domain::{read_archive, sha256, write_archive};

pub use crate::path_domain::{ArchiveHeader, ARCHIVE_VERSION, PATH_MAGIC};

pub const RECORD_VERSION: u32 = 1;

/// Configs that can check themselves before use.
pub trait Validate {
    fn validate(&self) -> Result<()>;
}

/// SHA-256 of the canonical JSON encoding.
pub fn config_hash<T: Serialize>(config: &T) -> Result<[u8; 32]> {
    Ok(sha256(&serde_json::to_vec(config)?))
}

pub fn config_hash_hex<T: Serialize>(config: &T) -> Result<String> {
    Ok(crate::gibbs_sampler::hex(&config_hash(config)?))
}

fn parse_hex32(s: &str) -> Option<[u8; 32]> {
    if s.len() != 64 || !s.is_ascii() {
        return None;
    }
    let mut out = [0u8; 32];
    for (i, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).ok()?;
    }
    Some(out)
}

#[derive(Serialize, Deserialize)]
struct Envelope<T> {
    format: String,
    version: u32,
    payload: T,
}

#[derive(Deserialize)]
struct EnvelopeHead {
    format: String,
    version: u32,
}

/// Wraps `value` in a `{format, version, payload}` envelope and writes it as JSON.
pub fn save_record<T: Serialize>(file: &FsPath, format: &str, value: &T) -> Result<()> {
    let env = Envelope {
        format: format.to_string(),
        version: RECORD_VERSION,
        payload: value,
    };
    write_atomic(file, &serde_json::to_vec_pretty(&env)?)
}

/// Writes through a sibling temporary file and renames it into place, so readers never
/// see a half-written file.
pub fn write_atomic(file: &FsPath, bytes: &[u8]) -> Result<()> {
    let mut tmp = file.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    if let Err(e) = fs::rename(&tmp, file) {
        let _ = fs::remove_file(&tmp);
        return Err(e.into());
    }
    Ok(())
}

pub fn load_record<T: DeserializeOwned>(file: &FsPath, format: &str) -> Result<T> {
    let bytes = fs::read(file)?;
    decode_record(&bytes, format)
}

pub fn decode_record<T: DeserializeOwned>(bytes: &[u8], format: &str) -> Result<T> {
    let head: EnvelopeHead = serde_json::from_slice(bytes)?;
    if head.format != format {
        return Err(Error::Integrity(format!(
            "expected a `{format}` record, found `{}`",
            head.format
        )));
    }
    if head.version != RECORD_VERSION {
        return Err(Error::Migration {
            found: head.version,
            expected: RECORD_VERSION,
        });
    }
    let env: Envelope<T> = serde_json::from_slice(bytes)?;
    Ok(env.payload)
}

#[derive(Serialize, Deserialize)]
struct EnsembleSidecar {
    meta: EnsembleMeta,
    chain_lengths: Vec<usize>,
}

/// Writes `<stem>.bin` (paths) and `<stem>.json` (metadata).
pub fn save_ensemble(stem: &FsPath, ensemble: &Ensemble) -> Result<()> {
    let hash = parse_hex32(&ensemble.meta.config_hash).unwrap_or([0; 32]);
    write_archive(&stem.with_extension("bin"), &ensemble.paths, hash)?;
    save_record(
        &stem.with_extension("json"),
        "ensemble",
        &EnsembleSidecar {
            meta: ensemble.meta.clone(),
            chain_lengths: ensemble.chain_lengths.clone(),
        },
    )
}

pub fn load_ensemble(stem: &FsPath) -> Result<Ensemble> {
    let (header, paths) = read_archive(&stem.with_extension("bin"))?;
    let side: EnsembleSidecar = load_record(&stem.with_extension("json"), "ensemble")?;
    if parse_hex32(&side.meta.config_hash).is_some_and(|h| h != header.config_hash) {
        return Err(Error::Integrity("archive and metadata disagree on the config hash".into()));
    }
    if side.chain_lengths.iter().sum::<usize>() != paths.len() {
        return Err(Error::Integrity("chain lengths do not add up to the path count".into()));
    }
    Ok(Ensemble {
        paths,
        chain_lengths: side.chain_lengths,
        meta: side.meta,
    })
}

/// Reads a JSON config and validates it; field errors carry the field name.
pub fn load_config<T: DeserializeOwned + Validate>(file: &FsPath) -> Result<T> {
    let text = fs::read_to_string(file)?;
    parse_config(&text)
}

pub fn parse_config<T: DeserializeOwned + Validate>(text: &str) -> Result<T> {
    let cfg: T = serde_json::from_str(text).map_err(|e| {
        Error::config("config", format!("line {} column {}: {e}", e.line(), e.column()))
    })?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gibbs_sampler::{run_chains, SamplerConfig};
    use crate::path_domain::Grid;
    use crate::potential::Potential;

    #[test]
    fn ensemble_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SamplerConfig::new(Grid::symmetric(1.0, 0.1).unwrap(), -1.0, 1.0, 0.2, 60, 5);
        let e = run_chains(&cfg, &Potential::quartic(), 2).unwrap();
        let stem = dir.path().join("ens");
        save_ensemble(&stem, &e).unwrap();
        let back = load_ensemble(&stem).unwrap();
        assert_eq!(back.paths, e.paths);
        assert_eq!(back.chain_lengths, e.chain_lengths);
        assert_eq!(back.meta.config_hash, e.meta.config_hash);
    }

    #[test]
    fn records_check_format_and_version() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("r.json");
        save_record(&f, "thing", &vec![1.5, 2.5]).unwrap();
        let v: Vec<f64> = load_record(&f, "thing").unwrap();
        assert_eq!(v, vec![1.5, 2.5]);
        assert!(matches!(load_record::<Vec<f64>>(&f, "other"), Err(Error::Integrity(_))));
        let text = fs::read_to_string(&f).unwrap().replace("\"version\": 1", "\"version\": 7");
        assert!(matches!(
            decode_record::<Vec<f64>>(text.as_bytes(), "thing"),
            Err(Error::Migration { found: 7, .. })
        ));
    }

    #[test]
    fn config_hash_is_stable_and_sensitive() {
        let a = config_hash(&(1, "x")).unwrap();
        assert_eq!(a, config_hash(&(1, "x")).unwrap());
        assert_ne!(a, config_hash(&(2, "x")).unwrap());
        assert_eq!(parse_hex32(&crate::gibbs_sampler::hex(&a)), Some(a));
    }
}
