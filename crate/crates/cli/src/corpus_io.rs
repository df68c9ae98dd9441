//! JSON-lines corpus files: one header line, then one utterance per line.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use csvmasr_core::corpus::{build_language_specs, Corpus, CorpusConfig, Split, Utterance};
use csvmasr_core::numerics::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: CorpusConfig,
    /// Symbol to global token id.
    vocabulary: BTreeMap<String, usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Line {
    split: Split,
    utterance_id: String,
    language_id: usize,
    transcript: Vec<usize>,
    features: Vec<Vec<f64>>,
}

pub fn write_corpus<W: Write>(corpus: &Corpus, mut out: W) -> CliResult<()> {
    let vocab = corpus.vocabulary();
    let header =
        Header { config: corpus.config.clone(), vocabulary: (0..vocab.size()).map(|t| (vocab.symbol(t), t)).collect() };
    write_line(&mut out, &header)?;
    for split in Split::ALL {
        for u in corpus.split(split) {
            write_line(
                &mut out,
                &Line {
                    split,
                    utterance_id: u.utterance_id.clone(),
                    language_id: u.language_id,
                    transcript: u.transcript.clone(),
                    features: u.features.to_rows(),
                },
            )?;
        }
    }
    Ok(())
}

fn write_line<W: Write, T: Serialize>(out: &mut W, value: &T) -> CliResult<()> {
    serde_json::to_writer(&mut *out, value)?;
    out.write_all(b"\n").map_err(|e| CliError::io("<corpus>", e))
}

pub fn save_corpus(corpus: &Corpus, path: &Path) -> CliResult<()> {
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_corpus(corpus, &mut w)?;
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn load_corpus(path: &Path) -> CliResult<Corpus> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let bad = |line: usize, msg: String| CliError::format(path, format!("line {}: {msg}", line + 1));
    let (_, first) = lines.next().ok_or_else(|| CliError::format(path, "empty corpus file"))?;
    let header: Header =
        serde_json::from_str(&first.map_err(|e| CliError::io(path, e))?).map_err(|e| bad(0, e.to_string()))?;
    header.config.validate()?;
    let config = header.config;
    let vocab = config.vocabulary();
    let mut corpus = Corpus {
        languages: build_language_specs(&config)?,
        config,
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (i, text) in lines {
        let text = text.map_err(|e| CliError::io(path, e))?;
        if text.is_empty() {
            continue;
        }
        let line: Line = serde_json::from_str(&text).map_err(|e| bad(i, e.to_string()))?;
        if line.language_id >= vocab.num_languages {
            return Err(bad(i, format!("language {} out of range", line.language_id)));
        }
        if let Some(&t) = line.transcript.iter().find(|&&t| vocab.language_of(t) != Some(line.language_id)) {
            return Err(csvmasr_core::Error::ForeignToken { token: t, language: line.language_id }.into());
        }
        let features = Tensor::from_rows(&line.features)?;
        if features.cols() != corpus.config.d_feat || features.rows() == 0 {
            return Err(bad(
                i,
                format!("features are {:?}, expected d_feat {}", features.shape(), corpus.config.d_feat),
            ));
        }
        let utt = Utterance {
            utterance_id: line.utterance_id,
            language_id: line.language_id,
            transcript: line.transcript,
            features,
        };
        match line.split {
            Split::Train => corpus.train.push(utt),
            Split::Val => corpus.val.push(utt),
            Split::Test => corpus.test.push(utt),
        }
    }
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use csvmasr_core::corpus::generate_corpus;

    #[test]
    fn round_trip_is_exact() {
        let cfg = CorpusConfig {
            train_per_language: 3,
            val_per_language: 2,
            test_per_language: 1,
            seed: 9,
            ..Default::default()
        };
        let corpus = generate_corpus(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        save_corpus(&corpus, &path).unwrap();
        assert_eq!(load_corpus(&path).unwrap(), corpus);
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 1 + 3 * 6);
        assert!(text.lines().next().unwrap().contains("\"L2_T09\":30"));
    }

    #[test]
    fn rejects_foreign_tokens() {
        let cfg =
            CorpusConfig { train_per_language: 1, val_per_language: 1, test_per_language: 1, ..Default::default() };
        let corpus = generate_corpus(&cfg).unwrap();
        let mut buf = Vec::new();
        write_corpus(&corpus, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let mut v: serde_json::Value = serde_json::from_str(&lines[1]).unwrap();
        v["transcript"][0] = serde_json::json!(25);
        lines[1] = v.to_string();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        std::fs::write(&path, lines.join("\n")).unwrap();
        let err = load_corpus(&path).unwrap_err();
        assert!(matches!(err, CliError::Core(csvmasr_core::Error::ForeignToken { token: 25, language: 0 })), "{err}");
    }
}
