//! Versioned JSON checkpoints: full model, optimizer state, the training
//! stream's Rng position, the next absolute epoch, and a hash of the
//! training-relevant config. Floats survive the round trip bit-for-bit
//! (serde_json's float_roundtrip), which is what makes resumed runs
//! byte-identical to uninterrupted ones.

use std::path::Path;

use serde::{Deserialize, Serialize};
use vsd_core::model::Model;
use vsd_core::optim::Optimizer;
use vsd_core::rng::RngState;

use crate::fail::Fail;
use crate::report::atomic_write;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    /// Next absolute epoch index (= number of completed epochs).
    pub epoch: usize,
    /// `ExperimentConfig::spec_hash` of the run that wrote this file.
    pub spec_hash: String,
    pub model: Model,
    pub optimizer: Optimizer,
    /// Training-stream state captured right after the last completed epoch.
    pub train_rng: RngState,
}

pub fn save(path: &Path, ck: &Checkpoint) -> Result<(), Fail> {
    let mut bytes = serde_json::to_vec(ck)?;
    bytes.push(b'\n');
    atomic_write(path, &bytes)
}

pub fn load(path: &Path) -> Result<Checkpoint, Fail> {
    let text = std::fs::read(path)
        .map_err(|e| Fail::config(format!("cannot read checkpoint {}: {e}", path.display())))?;
    let ck: Checkpoint = serde_json::from_slice(&text)
        .map_err(|e| Fail::config(format!("{}: {e}", path.display())))?;
    if ck.schema_version != SCHEMA_VERSION {
        return Err(Fail::config(format!(
            "{}: checkpoint schema_version {} != supported {SCHEMA_VERSION}",
            path.display(),
            ck.schema_version
        )));
    }
    Ok(ck)
}

#[cfg(test)]
mod tests {
    use super::*;
    use vsd_core::rng::Rng;

    fn sample() -> Checkpoint {
        let cfg: crate::config::ExperimentConfig = toml::from_str(
            r#"
            [experiment]
            name = "ck"
            seed = 9

            [model]
            input = [3]
            layer = [
                { kind = "vsd_dense", width = 4, reflections = 2, init_alpha = 0.5 },
                { kind = "relu" },
                { kind = "map_dense", width = 2 },
            ]

            [model.likelihood]
            kind = "categorical"
            classes = 2

            [train]
            epochs = 1
            batch_size = 8
            lr = 0.01

            [data]
            source = "synthetic-moons"
            "#,
        )
        .unwrap();
        let mut rng = Rng::with_stream(9, 0);
        let mut optimizer = cfg.optimizer();
        if let vsd_core::optim::Optimizer::Adam { t, .. } = &mut optimizer {
            *t = 37;
        }
        Checkpoint {
            schema_version: SCHEMA_VERSION,
            epoch: 12,
            spec_hash: cfg.spec_hash(),
            model: cfg.build_model(&mut rng).unwrap(),
            optimizer,
            train_rng: Rng::with_stream(9, 2).state(),
        }
    }

    #[test]
    fn round_trip_preserves_every_bit_of_state() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("checkpoint.json");
        let ck = sample();
        save(&path, &ck).unwrap();
        assert!(std::fs::read_to_string(&path).unwrap().ends_with('\n'));

        let back = load(&path).unwrap();
        assert_eq!(back.epoch, 12);
        assert_eq!(back.spec_hash, ck.spec_hash);
        assert_eq!(back.train_rng, ck.train_rng);
        // Random-init floats are the worst case for text serialization; the
        // resumed model must be the written one bit-for-bit.
        assert_eq!(
            serde_json::to_string(&back.model).unwrap(),
            serde_json::to_string(&ck.model).unwrap()
        );
        assert_eq!(
            serde_json::to_string(&back.optimizer).unwrap(),
            serde_json::to_string(&ck.optimizer).unwrap()
        );
    }

    #[test]
    fn load_rejects_foreign_schema_versions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("checkpoint.json");
        save(&path, &sample()).unwrap();
        let text = std::fs::read_to_string(&path)
            .unwrap()
            .replace("{\"schema_version\":1,", "{\"schema_version\":999,");
        std::fs::write(&path, text).unwrap();

        let err = load(&path).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("schema_version 999 != supported 1"), "{err}");
    }

    #[test]
    fn unreadable_or_garbled_checkpoints_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let err = load(&dir.path().join("absent.json")).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("cannot read checkpoint"), "{err}");

        let path = dir.path().join("mangled.json");
        std::fs::write(&path, b"{\"schema_version\": ").unwrap();
        assert_eq!(load(&path).unwrap_err().exit_code(), 2);
    }
}
