use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::train::{prepare, AnyModel, Example};
use crate::data::{Tokenizer, Utterance};
use crate::error::{Error, Result};
use crate::frontend::FrontendConfig;
use crate::nnet::checkpoint::Checkpoint;
use crate::nnet::AsrModel;
use crate::objective::{joint_beam_decode, BeamOptions};
use crate::scoring::{score_corpus, ScoreReport, ScoredPair, Unit};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decoded {
    pub utt_id: String,
    pub reference: String,
    pub hypothesis: String,
    pub score: f64,
}

pub fn decode_examples(
    model: &dyn AsrModel<f32>,
    tokenizer: &Tokenizer,
    examples: &[Example],
    beam: &BeamOptions,
) -> Result<Vec<Decoded>> {
    examples
        .iter()
        .map(|ex| {
            let hyp = joint_beam_decode(model, &ex.feats, beam)?;
            Ok(Decoded {
                utt_id: ex.utt_id.clone(),
                reference: ex.transcript.clone(),
                hypothesis: tokenizer.decode(&hyp.tokens),
                score: hyp.score,
            })
        })
        .collect()
}

pub fn score_decoded(decoded: &[Decoded], unit: Unit) -> Result<ScoreReport> {
    score_corpus(
        decoded.iter().map(|d| ScoredPair {
            utt_id: &d.utt_id,
            reference: &d.reference,
            hypothesis: &d.hypothesis,
        }),
        unit,
    )
}

/// Decodes and scores `utts`. References using symbols the model cannot emit are an error.
pub fn evaluate_model(
    model: &dyn AsrModel<f32>,
    tokenizer: &Tokenizer,
    utts: &[Utterance],
    frontend: &FrontendConfig,
    beam: &BeamOptions,
    unit: Unit,
) -> Result<(ScoreReport, Vec<Decoded>)> {
    if tokenizer.vocab_size() != model.vocab_size() {
        return Err(Error::invalid(format!(
            "tokenizer has {} symbols but the model emits {}",
            tokenizer.vocab_size(),
            model.vocab_size()
        )));
    }
    let examples = prepare(utts, frontend, tokenizer)
        .map_err(|e| Error::invalid(format!("vocabulary mismatch between checkpoint and references: {e}")))?;
    let decoded = decode_examples(model, tokenizer, &examples, beam)?;
    Ok((score_decoded(&decoded, unit)?, decoded))
}

/// Loads `checkpoint`, evaluates `utts`, and (with `out_dir`) writes
/// `hyps.tsv` and `score.csv` there.
pub fn run_evaluate(
    checkpoint: &Path,
    utts: &[Utterance],
    frontend: &FrontendConfig,
    beam: &BeamOptions,
    unit: Unit,
    out_dir: Option<&Path>,
) -> Result<ScoreReport> {
    let ckpt = Checkpoint::<f32>::load(checkpoint)?;
    let model = AnyModel::from_checkpoint(&ckpt)?;
    let (report, decoded) = evaluate_model(model.asr(), &ckpt.tokenizer, utts, frontend, beam, unit)?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        let mut f = fs::File::create(dir.join("hyps.tsv"))?;
        for d in &decoded {
            writeln!(f, "{}\t{}\t{}\t{:.4}", d.utt_id, d.reference, d.hypothesis, d.score)?;
        }
        fs::write(dir.join("score.csv"), report.to_csv())?;
    }
    Ok(report)
}
