//! Versioned JSON artifacts and content digests.
//!
//! Every persisted file carries `schema_version`; loaders reject versions they
//! do not understand. Digests (FNV-1a, 64-bit, hex) let manifests pin the
//! exact artifact bytes they were fitted against.

use crate::data::Standardizer;
use crate::mlp::{Mlp, MlpClassifier};
use crate::model::CountedModel;
use crate::{Error, Result};
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use std::path::Path;

pub const SCHEMA_VERSION: u32 = 1;

/// FNV-1a 64-bit hash of a byte stream, rendered as fixed-width hex.
pub fn fnv1a64(bytes: &[u8]) -> String {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        hash ^= *b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{hash:016x}")
}

pub fn digest_file(path: &Path) -> Result<String> {
    Ok(fnv1a64(&std::fs::read(path)?))
}

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

fn check_version(found: u32) -> Result<()> {
    if found != SCHEMA_VERSION {
        return Err(Error::SchemaVersion {
            found,
            supported: SCHEMA_VERSION,
        });
    }
    Ok(())
}

/// On-disk form of a trained classifier: layer widths, row-major weights, and
/// the standardization statistics applied before the network.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelFile {
    pub schema_version: u32,
    pub kind: String,
    pub net: Mlp,
    pub standardizer: Standardizer,
    pub num_classes: usize,
    pub test_accuracy: Option<f64>,
}

impl ModelFile {
    pub fn new(net: Mlp, standardizer: Standardizer, num_classes: usize) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            kind: "mlp_classifier".into(),
            net,
            standardizer,
            num_classes,
            test_accuracy: None,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: Self = load_json(path)?;
        check_version(file.schema_version)?;
        Ok(file)
    }

    /// Wrap the stored network behind the inference counter. Inputs are
    /// expected in standardized space.
    pub fn counted_model(&self) -> CountedModel {
        CountedModel::new(Box::new(MlpClassifier {
            net: self.net.clone(),
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlp::{Head, MlpSpec};
    use crate::rng::RngSpec;

    #[test]
    fn fnv_digest_is_stable() {
        assert_eq!(fnv1a64(b""), "cbf29ce484222325");
        assert_eq!(fnv1a64(b"a"), "af63dc4c8601ec8c");
        assert_ne!(fnv1a64(b"ab"), fnv1a64(b"ba"));
    }

    #[test]
    fn model_file_roundtrip_is_byte_identical() {
        let spec = MlpSpec::default_arch(3, 2, RngSpec::from_seed(4));
        let net = Mlp::init(&spec, Head::SoftmaxCrossEntropy).unwrap();
        let file = ModelFile::new(net, Standardizer::identity(3), 2);

        let dir = std::env::temp_dir().join(format!("selexp-artifact-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p1 = dir.join("model1.json");
        let p2 = dir.join("model2.json");
        file.save(&p1).unwrap();
        let loaded = ModelFile::load(&p1).unwrap();
        loaded.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(digest_file(&p1).unwrap(), digest_file(&p2).unwrap());
        std::fs::remove_file(&p1).unwrap();
        std::fs::remove_file(&p2).unwrap();
    }

    #[test]
    fn schema_version_is_enforced() {
        let spec = MlpSpec::default_arch(2, 2, RngSpec::from_seed(4));
        let net = Mlp::init(&spec, Head::SoftmaxCrossEntropy).unwrap();
        let mut file = ModelFile::new(net, Standardizer::identity(2), 2);
        file.schema_version = 99;
        let dir = std::env::temp_dir().join(format!("selexp-schema-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("model.json");
        save_json(&p, &file).unwrap();
        assert!(matches!(
            ModelFile::load(&p),
            Err(Error::SchemaVersion { found: 99, .. })
        ));
        std::fs::remove_file(&p).unwrap();
    }
}
