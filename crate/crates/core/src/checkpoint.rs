//! Plain-text checkpoints that reload bit-exactly.
//!
//! Layout: a magic line, one JSON metadata line, then for every tensor a
//! `tensor <name> <rows> <cols>` line followed by its values on one line.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{Linear, ModelState, PrototypeBank};

const MAGIC: &str = "seetn-checkpoint 1";
const PROTOTYPES: &str = "prototypes.mu";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub config_hash: String,
    pub init_seed: u64,
    pub data_seed: u64,
    pub shuffle_seed: u64,
    pub config: TrainConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: ModelState,
    pub bank: PrototypeBank,
}

impl Checkpoint {
    pub fn new(cfg: &TrainConfig, epoch: usize, model: ModelState, bank: PrototypeBank) -> Self {
        let meta = CheckpointMeta {
            epoch,
            config_hash: cfg.hash(),
            init_seed: cfg.init_seed,
            data_seed: cfg.data_seed,
            shuffle_seed: cfg.shuffle_seed,
            config: cfg.clone(),
        };
        Self { meta, model, bank }
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{MAGIC}\n");
        out.push_str(&serde_json::to_string(&self.meta).expect("metadata serializes"));
        out.push('\n');
        let names = self.model.param_names();
        let tensors = self.model.params();
        let all = names
            .iter()
            .map(String::as_str)
            .zip(tensors)
            .chain(std::iter::once((PROTOTYPES, &self.bank.mu)));
        for (name, t) in all {
            writeln!(out, "tensor {name} {} {}", t.rows(), t.cols()).unwrap();
            let vals: Vec<String> = t.values().iter().map(|v| format!("{v:?}")).collect();
            out.push_str(&vals.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let mut next = |what: &str| {
            lines.next().ok_or_else(|| Error::Parse {
                line: 0,
                message: format!("unexpected end of checkpoint, expected {what}"),
            })
        };
        let (ln, magic) = next("header")?;
        if magic.trim() != MAGIC {
            return Err(Error::Parse {
                line: ln,
                message: format!("not a checkpoint (header {magic:?})"),
            });
        }
        let (ln, meta_line) = next("metadata")?;
        let meta: CheckpointMeta = serde_json::from_str(meta_line).map_err(|e| Error::Parse {
            line: ln,
            message: e.to_string(),
        })?;
        meta.config.validate()?;
        let dims = meta.config.model;

        let mut model = ModelState {
            dims,
            backbone: vec![
                Linear::zeros(dims.input, dims.hidden),
                Linear::zeros(dims.hidden, dims.hidden),
                Linear::zeros(dims.hidden, dims.feature),
            ],
            regressor: Linear::zeros(dims.feature, 2),
            projection: vec![
                Linear::zeros(dims.feature, dims.proj_hidden),
                Linear::zeros(dims.proj_hidden, dims.proj),
            ],
        };
        let names = model.param_names();
        let mut mu = Tensor::zeros(&[meta.config.k, dims.proj]);
        {
            let mut slots = model.params_mut();
            slots.push(&mut mu);
            let expected = names.iter().map(String::as_str).chain(std::iter::once(PROTOTYPES));
            for (slot, name) in slots.into_iter().zip(expected) {
                let (ln, head) = next("tensor header")?;
                let parse_err = |m: String| Error::Parse { line: ln, message: m };
                let parts: Vec<&str> = head.split_whitespace().collect();
                let (r, c) = match parts.as_slice() {
                    ["tensor", n, r, c] if *n == name => (
                        r.parse::<usize>().map_err(|e| parse_err(e.to_string()))?,
                        c.parse::<usize>().map_err(|e| parse_err(e.to_string()))?,
                    ),
                    _ => return Err(parse_err(format!("expected tensor {name}, got {head:?}"))),
                };
                if [r, c] != slot.shape() {
                    return Err(Error::InvalidShape(format!(
                        "{name}: checkpoint {r}x{c}, config expects {:?}",
                        slot.shape()
                    )));
                }
                let (ln, body) = next("tensor values")?;
                let vals = body
                    .split_whitespace()
                    .map(|v| v.parse::<f64>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| Error::Parse { line: ln, message: format!("{name}: {e}") })?;
                if vals.len() != r * c {
                    return Err(Error::Parse {
                        line: ln,
                        message: format!("{name}: expected {} values, got {}", r * c, vals.len()),
                    });
                }
                slot.values_mut().copy_from_slice(&vals);
            }
        }
        if lines.any(|(_, l)| !l.trim().is_empty()) {
            return Err(Error::Parse {
                line: 0,
                message: "trailing content after last tensor".into(),
            });
        }
        let bank = PrototypeBank::new(mu, meta.config.alpha, meta.config.tau)?;
        Ok(Self { meta, model, bank })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}
