//! Line-delimited JSON corpus export/import.
//!
//! One record per line:
//! `{"question", "answer", "paraphrase", "perturbed", "entity", "attribute", "split"}`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Attribute, DatasetSplit, FactRecord, QAPair, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{TokenSeq, BOS, EOS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JsonRecord {
    pub question: String,
    pub answer: String,
    pub paraphrase: String,
    pub perturbed: Vec<String>,
    pub entity: u32,
    pub attribute: String,
    pub split: String,
}

impl JsonRecord {
    fn from_pair(p: &QAPair, vocab: &Vocabulary, split: &str) -> Self {
        Self {
            question: vocab.detokenize(p.question.tokens()),
            answer: vocab.detokenize(p.answer.tokens()),
            paraphrase: vocab.detokenize(p.paraphrase.tokens()),
            perturbed: p.perturbed.iter().map(|s| vocab.detokenize(s.tokens())).collect(),
            entity: p.fact.entity_id,
            attribute: p.fact.attribute.name().to_string(),
            split: split.to_string(),
        }
    }

    fn to_pair(&self, vocab: &Vocabulary) -> Result<QAPair> {
        let attribute = Attribute::from_name(&self.attribute)
            .ok_or_else(|| Error::arg(format!("unknown attribute `{}`", self.attribute)))?;
        let answer = |text: &str| -> Result<TokenSeq> {
            let mut ids = vocab.tokenize_strict(text)?;
            ids.push(EOS);
            Ok(TokenSeq::answer(ids))
        };
        let mut q = vec![BOS];
        q.extend(vocab.tokenize_strict(&self.question)?);
        // The paraphrase always opens with the value.
        let value = self
            .paraphrase
            .split_whitespace()
            .next()
            .ok_or_else(|| Error::arg("empty paraphrase"))?
            .to_string();
        Ok(QAPair {
            question: TokenSeq::prompt(q),
            answer: answer(&self.answer)?,
            paraphrase: answer(&self.paraphrase)?,
            perturbed: self.perturbed.iter().map(|s| answer(s)).collect::<Result<_>>()?,
            fact: FactRecord { entity_id: self.entity, attribute, value },
            original_answer: None,
        })
    }
}

/// Writes retain, forget and held-out pairs with their split labels.
pub fn write_jsonl(path: &Path, split: &DatasetSplit, vocab: &Vocabulary) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let groups = [("retain", &split.retain), ("forget", &split.forget), ("heldout", &split.heldout_world)];
    for (label, pairs) in groups {
        for p in pairs.iter() {
            let line = serde_json::to_string(&JsonRecord::from_pair(p, vocab, label))?;
            writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a file written by [`write_jsonl`]. `forget_ratio` is recomputed
/// from the pair counts.
pub fn read_jsonl(path: &Path, vocab: &Vocabulary) -> Result<DatasetSplit> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut split = DatasetSplit { retain: vec![], forget: vec![], heldout_world: vec![], forget_ratio: 0.0 };
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonRecord = serde_json::from_str(&line)
            .map_err(|e| Error::arg(format!("{}:{}: {e}", path.display(), n + 1)))?;
        let pair = rec.to_pair(vocab)?;
        match rec.split.as_str() {
            "retain" => split.retain.push(pair),
            "forget" => split.forget.push(pair),
            "heldout" => split.heldout_world.push(pair),
            other => return Err(Error::arg(format!("{}:{}: unknown split `{other}`", path.display(), n + 1))),
        }
    }
    let total = split.retain.len() + split.forget.len();
    if total > 0 {
        split.forget_ratio = split.forget.len() as f64 / total as f64;
    }
    Ok(split)
}
