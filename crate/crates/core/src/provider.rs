//! Text providers used by dataset construction, and their wire protocol.
//!
//! Production deployments back these traits with external services (a VLM
//! describer, BERTScore, an embedding model, an LLM summarizer). The offline
//! fallbacks here are deterministic so the whole pipeline runs hermetically.
//!
//! Remote providers speak line-delimited JSON over any byte stream (a child
//! process's stdio, a Unix socket): one [`ProviderRequest`] per line in, one
//! [`ProviderResponse`] per line out.

use std::collections::{BTreeSet, HashMap};
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interleave::FrameSample;

pub trait Describer: Send + Sync {
    /// Short description of the frames inside `[start_s, end_s]`.
    fn describe(&self, video_id: &str, start_s: f64, end_s: f64, frames: &[FrameSample]) -> Result<String>;
}

pub trait TextSimilarity: Send + Sync {
    /// Similarity in `[0, 1]`.
    fn similarity(&self, a: &str, b: &str) -> Result<f64>;
}

pub trait Embedder: Send + Sync {
    fn embed(&self, text: &str) -> Result<Vec<f64>>;
}

pub trait Summarizer: Send + Sync {
    fn summarize(&self, texts: &[String]) -> Result<String>;
}

pub trait EntityExtractor: Send + Sync {
    fn entities(&self, description: &str) -> Result<Vec<String>>;
}

fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric() && c != '\'')
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Token-level F1 over lowercase word multisets.
pub fn token_f1(a: &str, b: &str) -> f64 {
    let (wa, wb) = (words(a), words(b));
    if wa.is_empty() && wb.is_empty() {
        return 1.0;
    }
    if wa.is_empty() || wb.is_empty() {
        return 0.0;
    }
    let mut counts: HashMap<&str, isize> = HashMap::new();
    for w in &wa {
        *counts.entry(w).or_default() += 1;
    }
    let mut overlap = 0usize;
    for w in &wb {
        if let Some(c) = counts.get_mut(w.as_str()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / wb.len() as f64;
    let recall = overlap as f64 / wa.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Jaccard index over lowercase word sets.
pub fn token_jaccard(a: &str, b: &str) -> f64 {
    let sa: BTreeSet<String> = words(a).into_iter().collect();
    let sb: BTreeSet<String> = words(b).into_iter().collect();
    if sa.is_empty() && sb.is_empty() {
        return 1.0;
    }
    let inter = sa.intersection(&sb).count();
    let union = sa.union(&sb).count();
    inter as f64 / union as f64
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TokenF1;

impl TextSimilarity for TokenF1 {
    fn similarity(&self, a: &str, b: &str) -> Result<f64> {
        Ok(token_f1(a, b))
    }
}

/// Cosine similarity over an embedder's vectors, mapped to `[0, 1]` by
/// clamping negatives to zero.
pub struct EmbeddingSimilarity<E> {
    pub embedder: E,
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb)
}

impl<E: Embedder> TextSimilarity for EmbeddingSimilarity<E> {
    fn similarity(&self, a: &str, b: &str) -> Result<f64> {
        let (va, vb) = (self.embedder.embed(a)?, self.embedder.embed(b)?);
        if va.len() != vb.len() {
            return Err(Error::LengthMismatch { left: va.len(), right: vb.len() });
        }
        Ok(cosine(&va, &vb).clamp(0.0, 1.0))
    }
}

/// Joins distinct texts in order with `"; "`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ConcatSummarizer;

impl Summarizer for ConcatSummarizer {
    fn summarize(&self, texts: &[String]) -> Result<String> {
        let mut seen = BTreeSet::new();
        let parts: Vec<&str> = texts
            .iter()
            .map(|t| t.trim())
            .filter(|t| !t.is_empty() && seen.insert(t.to_string()))
            .collect();
        Ok(parts.join("; "))
    }
}

const STOPWORDS: &[&str] = &[
    "a", "an", "the", "and", "or", "of", "in", "on", "at", "to", "from", "with", "by", "for", "into", "onto", "is",
    "are", "was", "were", "be", "being", "its", "their", "his", "her", "then", "while", "near", "over", "under",
    "up", "down", "out", "off", "through", "across", "toward", "towards", "some", "another", "other",
];

/// Content words (lowercase, stopwords removed, first occurrence order).
#[derive(Debug, Clone, Copy, Default)]
pub struct KeywordEntities;

impl EntityExtractor for KeywordEntities {
    fn entities(&self, description: &str) -> Result<Vec<String>> {
        let mut seen = BTreeSet::new();
        Ok(words(description)
            .into_iter()
            .filter(|w| w.len() > 2 && !STOPWORDS.contains(&w.as_str()))
            .filter(|w| seen.insert(w.clone()))
            .collect())
    }
}

/// One request line of the provider protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum ProviderRequest {
    Describe { video_id: String, start_s: f64, end_s: f64, frames: Vec<FrameSample> },
    Similarity { a: String, b: String },
    Embed { text: String },
    Summarize { texts: Vec<String> },
    Entities { text: String },
}

/// One response line of the provider protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProviderResponse {
    Text { text: String },
    Ratio { value: f64 },
    Vector { values: Vec<f64> },
    List { items: Vec<String> },
    Error { message: String },
}

/// Client side of the protocol over any reader/writer pair.
pub struct StreamProvider<R, W> {
    io: Mutex<(R, W)>,
    _child: Option<Mutex<Child>>,
}

impl<R: BufRead + Send, W: Write + Send> StreamProvider<R, W> {
    pub fn new(reader: R, writer: W) -> Self {
        Self { io: Mutex::new((reader, writer)), _child: None }
    }

    pub fn call(&self, request: &ProviderRequest) -> Result<ProviderResponse> {
        let mut guard = self.io.lock().map_err(|_| Error::Provider("provider stream poisoned".into()))?;
        let (reader, writer) = &mut *guard;
        let mut line = serde_json::to_string(request)?;
        line.push('\n');
        writer.write_all(line.as_bytes())?;
        writer.flush()?;
        let mut reply = String::new();
        if reader.read_line(&mut reply)? == 0 {
            return Err(Error::Provider("provider closed the stream".into()));
        }
        match serde_json::from_str(reply.trim_end())? {
            ProviderResponse::Error { message } => Err(Error::Provider(message)),
            other => Ok(other),
        }
    }

    fn expect_text(&self, req: ProviderRequest) -> Result<String> {
        match self.call(&req)? {
            ProviderResponse::Text { text } => Ok(text),
            other => Err(Error::Provider(format!("expected text, got {other:?}"))),
        }
    }
}

impl StreamProvider<BufReader<ChildStdout>, ChildStdin> {
    /// Spawns `program args...` and talks to it over stdio.
    pub fn spawn(program: &str, args: &[String]) -> Result<Self> {
        let mut child = Command::new(program).args(args).stdin(Stdio::piped()).stdout(Stdio::piped()).spawn()?;
        let stdin = child.stdin.take().ok_or_else(|| Error::Provider("no stdin on child".into()))?;
        let stdout = child.stdout.take().ok_or_else(|| Error::Provider("no stdout on child".into()))?;
        Ok(Self { io: Mutex::new((BufReader::new(stdout), stdin)), _child: Some(Mutex::new(child)) })
    }
}

impl<R: BufRead + Send, W: Write + Send> Describer for StreamProvider<R, W> {
    fn describe(&self, video_id: &str, start_s: f64, end_s: f64, frames: &[FrameSample]) -> Result<String> {
        self.expect_text(ProviderRequest::Describe { video_id: video_id.into(), start_s, end_s, frames: frames.to_vec() })
    }
}

impl<R: BufRead + Send, W: Write + Send> TextSimilarity for StreamProvider<R, W> {
    fn similarity(&self, a: &str, b: &str) -> Result<f64> {
        match self.call(&ProviderRequest::Similarity { a: a.into(), b: b.into() })? {
            ProviderResponse::Ratio { value } if (0.0..=1.0).contains(&value) => Ok(value),
            other => Err(Error::Provider(format!("expected ratio in [0, 1], got {other:?}"))),
        }
    }
}

impl<R: BufRead + Send, W: Write + Send> Embedder for StreamProvider<R, W> {
    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        match self.call(&ProviderRequest::Embed { text: text.into() })? {
            ProviderResponse::Vector { values } => Ok(values),
            other => Err(Error::Provider(format!("expected vector, got {other:?}"))),
        }
    }
}

impl<R: BufRead + Send, W: Write + Send> Summarizer for StreamProvider<R, W> {
    fn summarize(&self, texts: &[String]) -> Result<String> {
        self.expect_text(ProviderRequest::Summarize { texts: texts.to_vec() })
    }
}

impl<R: BufRead + Send, W: Write + Send> EntityExtractor for StreamProvider<R, W> {
    fn entities(&self, description: &str) -> Result<Vec<String>> {
        match self.call(&ProviderRequest::Entities { text: description.into() })? {
            ProviderResponse::List { items } => Ok(items),
            other => Err(Error::Provider(format!("expected list, got {other:?}"))),
        }
    }
}

/// Server side: a bundle of in-process providers answering protocol lines.
/// Unset providers answer with an error response.
#[derive(Clone, Default)]
pub struct ProviderSuite {
    pub describer: Option<Arc<dyn Describer>>,
    pub similarity: Option<Arc<dyn TextSimilarity>>,
    pub embedder: Option<Arc<dyn Embedder>>,
    pub summarizer: Option<Arc<dyn Summarizer>>,
    pub entities: Option<Arc<dyn EntityExtractor>>,
}

impl ProviderSuite {
    /// Token-F1 similarity, concatenation summaries, keyword entities.
    pub fn offline() -> Self {
        Self {
            describer: None,
            similarity: Some(Arc::new(TokenF1)),
            embedder: None,
            summarizer: Some(Arc::new(ConcatSummarizer)),
            entities: Some(Arc::new(KeywordEntities)),
        }
    }

    pub fn handle(&self, request: &ProviderRequest) -> ProviderResponse {
        fn missing(what: &str) -> ProviderResponse {
            ProviderResponse::Error { message: format!("no {what} provider configured") }
        }
        let result = match request {
            ProviderRequest::Describe { video_id, start_s, end_s, frames } => match &self.describer {
                Some(p) => p.describe(video_id, *start_s, *end_s, frames).map(|text| ProviderResponse::Text { text }),
                None => return missing("describer"),
            },
            ProviderRequest::Similarity { a, b } => match &self.similarity {
                Some(p) => p.similarity(a, b).map(|value| ProviderResponse::Ratio { value }),
                None => return missing("similarity"),
            },
            ProviderRequest::Embed { text } => match &self.embedder {
                Some(p) => p.embed(text).map(|values| ProviderResponse::Vector { values }),
                None => return missing("embedding"),
            },
            ProviderRequest::Summarize { texts } => match &self.summarizer {
                Some(p) => p.summarize(texts).map(|text| ProviderResponse::Text { text }),
                None => return missing("summarizer"),
            },
            ProviderRequest::Entities { text } => match &self.entities {
                Some(p) => p.entities(text).map(|items| ProviderResponse::List { items }),
                None => return missing("entity"),
            },
        };
        result.unwrap_or_else(|e| ProviderResponse::Error { message: e.to_string() })
    }

    /// Answers requests until the reader hits EOF.
    pub fn serve<R: BufRead, W: Write>(&self, reader: R, mut writer: W) -> Result<()> {
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let response = match serde_json::from_str::<ProviderRequest>(&line) {
                Ok(req) => self.handle(&req),
                Err(e) => ProviderResponse::Error { message: format!("bad request: {e}") },
            };
            let mut out = serde_json::to_string(&response)?;
            out.push('\n');
            writer.write_all(out.as_bytes())?;
            writer.flush()?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::os::unix::net::UnixStream;

    #[test]
    fn token_f1_arithmetic() {
        assert!((token_f1("red car", "a red car") - 0.8).abs() < 1e-12);
        assert_eq!(token_f1("Red Car", "red car"), 1.0);
        assert_eq!(token_f1("dog", "cat"), 0.0);
        assert_eq!(token_f1("", "cat"), 0.0);
    }

    #[test]
    fn jaccard() {
        assert_eq!(token_jaccard("a b c", "c b a"), 1.0);
        assert!((token_jaccard("a b", "b c") - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn concat_summary_dedups() {
        let s = ConcatSummarizer.summarize(&["x".into(), "x".into(), "y".into()]).unwrap();
        assert_eq!(s, "x; y");
    }

    #[test]
    fn keyword_entities() {
        let e = KeywordEntities.entities("A man in a red jacket opens the fridge; the man smiles").unwrap();
        assert_eq!(e, vec!["man", "red", "jacket", "opens", "fridge", "smiles"]);
    }

    struct Bag;
    impl Embedder for Bag {
        fn embed(&self, text: &str) -> Result<Vec<f64>> {
            let w = words(text);
            Ok(["red", "car", "dog"].iter().map(|k| w.iter().filter(|x| x == k).count() as f64).collect())
        }
    }

    #[test]
    fn embedding_similarity_is_cosine() {
        let sim = EmbeddingSimilarity { embedder: Bag };
        assert!((sim.similarity("red car", "a red car").unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(sim.similarity("red", "dog").unwrap(), 0.0);
    }

    #[test]
    fn stream_round_trip_over_socket() {
        let (client_sock, server_sock) = UnixStream::pair().unwrap();
        let server = std::thread::spawn(move || {
            let reader = BufReader::new(server_sock.try_clone().unwrap());
            ProviderSuite::offline().serve(reader, server_sock).unwrap();
        });
        let client = StreamProvider::new(BufReader::new(client_sock.try_clone().unwrap()), client_sock);
        assert!((client.similarity("red car", "a red car").unwrap() - 0.8).abs() < 1e-12);
        assert_eq!(client.summarize(&["a".into(), "b".into()]).unwrap(), "a; b");
        assert_eq!(client.entities("the blue door").unwrap(), vec!["blue", "door"]);
        let err = client.embed("x").unwrap_err();
        assert!(err.to_string().contains("no embedding provider"));
        drop(client);
        server.join().unwrap();
    }

    #[test]
    fn spawned_process_transport() {
        // A trivial provider process that always answers 0.5.
        let script = r#"while read -r line; do echo '{"kind":"ratio","value":0.5}'; done"#;
        let p = StreamProvider::spawn("sh", &["-c".into(), script.into()]).unwrap();
        assert_eq!(p.similarity("a", "b").unwrap(), 0.5);
        assert_eq!(p.similarity("c", "d").unwrap(), 0.5);
    }

    #[test]
    fn request_wire_format() {
        let req = ProviderRequest::Similarity { a: "x".into(), b: "y".into() };
        assert_eq!(serde_json::to_string(&req).unwrap(), r#"{"op":"similarity","a":"x","b":"y"}"#);
        let resp: ProviderResponse = serde_json::from_str(r#"{"kind":"text","text":"hi"}"#).unwrap();
        assert_eq!(resp, ProviderResponse::Text { text: "hi".into() });
    }
}
