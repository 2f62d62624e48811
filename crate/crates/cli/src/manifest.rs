use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

use crate::config::RunConfig;

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const MANIFEST_FORMAT: u32 = 1;

/// Record of one run: tool and format versions, hashed inputs, the fully
/// resolved config and the invocation.
#[derive(Debug, Clone)]
pub struct Manifest {
    command: String,
    inputs: Vec<(String, String, String)>,
    outputs: Vec<String>,
    provenance: String,
}

impl Manifest {
    pub fn new(command: &str, provenance: String) -> Self {
        Self { command: command.to_string(), inputs: Vec::new(), outputs: Vec::new(), provenance }
    }

    /// Hashes a file input.
    pub fn input_file(&mut self, label: &str, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        self.input_bytes(label, &path.display().to_string(), &bytes);
        Ok(())
    }

    pub fn input_bytes(&mut self, label: &str, origin: &str, bytes: &[u8]) {
        self.inputs.push((label.to_string(), origin.to_string(), versegen::sha256_hex(bytes)));
    }

    pub fn output(&mut self, name: &str) {
        self.outputs.push(name.to_string());
    }

    pub fn to_text(&self, config: &RunConfig) -> String {
        let mut s = String::from("# versegen run manifest\n");
        s.push_str(&format!("manifest_format = {MANIFEST_FORMAT}\n"));
        s.push_str(&format!("tool_version = {}\n", versegen::TOOL_VERSION));
        s.push_str(&format!("checkpoint_format = {}\n", versegen::model::CHECKPOINT_VERSION));
        s.push_str(&format!("tokenizer_format = {}\n", versegen::tokenizer::FORMAT_TAG));
        s.push_str(&format!("command = {}\n", self.command));
        for (label, origin, hash) in &self.inputs {
            s.push_str(&format!("input.{label} = {origin} sha256:{hash}\n"));
        }
        for name in &self.outputs {
            s.push_str(&format!("output = {name}\n"));
        }
        for (k, v) in config.values() {
            s.push_str(&format!("config.{k} = {v}\n"));
        }
        s.push_str(&format!("provenance = {}\n", self.provenance));
        s
    }

    pub fn write(&self, dir: &Path, config: &RunConfig) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, self.to_text(config)).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
