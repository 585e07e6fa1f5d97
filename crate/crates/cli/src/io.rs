use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use frictionlab::market::NodeSpec;
use frictionlab::{PathEnsemble, ScenarioTree, TimeGrid};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

/// Content hash of one input document.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Fingerprint {
    pub path: String,
    pub sha256: String,
}

/// Collects the fingerprints of every input a command reads.
#[derive(Debug, Default)]
pub struct Inputs {
    pub files: BTreeMap<String, Fingerprint>,
}

impl Inputs {
    fn read(&mut self, role: &str, path: &Path) -> Result<Vec<u8>, CliError> {
        let bytes = fs::read(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let sha256 = hex::encode(Sha256::digest(&bytes));
        self.files.insert(
            role.to_string(),
            Fingerprint {
                path: path.display().to_string(),
                sha256,
            },
        );
        Ok(bytes)
    }

    pub fn json<T: DeserializeOwned>(&mut self, role: &str, path: &Path) -> Result<T, CliError> {
        let bytes = self.read(role, path)?;
        serde_json::from_slice(&bytes)
            .map_err(|e| CliError::Parse(format!("{}: {e}", path.display())))
    }

    /// Parses the tree document first and then builds the tree, so structural
    /// problems keep their own error codes.
    pub fn tree(&mut self, path: &Path) -> Result<ScenarioTree, CliError> {
        let doc: TreeDoc = self.json("tree", path)?;
        let grid = TimeGrid::new(doc.grid)?;
        Ok(ScenarioTree::new(doc.d, grid, doc.nodes)?)
    }

    pub fn ensemble(&mut self, bin: &Path, meta: &Path) -> Result<PathEnsemble, CliError> {
        self.read("paths", bin)?;
        self.read("paths_meta", meta)?;
        Ok(PathEnsemble::load(bin, meta)?)
    }

    /// Records parameters given on the command line in place of a file.
    pub fn parameters<T: Serialize>(&mut self, params: &T) {
        let text = serde_json::to_string(params).expect("parameters serialize");
        let sha256 = hex::encode(Sha256::digest(text.as_bytes()));
        self.files.insert(
            "parameters".into(),
            Fingerprint {
                path: "<command line>".into(),
                sha256,
            },
        );
    }
}

#[derive(Deserialize)]
struct TreeDoc {
    d: usize,
    grid: Vec<f64>,
    nodes: Vec<NodeSpec>,
}

/// Report envelope written by every command.
#[derive(Serialize)]
pub struct Envelope<'a, T: Serialize> {
    pub command: &'a str,
    pub inputs: &'a BTreeMap<String, Fingerprint>,
    pub result: &'a T,
}

/// Writes the report to `out`, or to stdout when no path is given.
pub fn emit<T: Serialize>(
    command: &str,
    inputs: &Inputs,
    result: &T,
    out: Option<&PathBuf>,
) -> Result<(), CliError> {
    let env = Envelope {
        command,
        inputs: &inputs.files,
        result,
    };
    let text = serde_json::to_string_pretty(&env).expect("reports serialize");
    match out {
        Some(p) => {
            fs::write(p, text + "\n").map_err(|e| CliError::Io(format!("{}: {e}", p.display())))
        }
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

/// Comma-separated list of numbers, taken as one flag value.
pub type NumList = Vec<f64>;

pub fn parse_list(s: &str) -> Result<NumList, String> {
    s.split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|e| format!("'{t}': {e}")))
        .collect()
}
