//! Event graphs from per-chunk descriptions.
//!
//! A video is tiled into short uniform chunks, each chunk gets a description,
//! and a left-to-right scan merges neighbours whose descriptions are similar
//! enough. Each merged segment becomes an [`EventNode`] whose absolute
//! start/end times are its ground-truth span. Edges carry the Allen relation
//! between node spans; entities mentioned across events are clustered.

use std::io::{BufRead, Write};
use std::thread;

use serde::{Deserialize, Serialize};

use crate::budget::FrameSource;
use crate::error::{Error, Result};
use crate::provider::{Describer, EntityExtractor, Summarizer, TextSimilarity};
use crate::span::{interval_relation, IntervalRelation, Span, SpanSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chunk {
    pub chunk_id: usize,
    pub span: Span,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventNode {
    pub event_id: String,
    pub spans: SpanSet,
    pub description: String,
    #[serde(default)]
    pub entities: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventEdge {
    pub from_event: String,
    pub to_event: String,
    pub relation: IntervalRelation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityCluster {
    pub cluster_id: usize,
    /// `(event_id, entity)` pairs; the first member is the representative.
    pub members: Vec<(String, String)>,
}

/// What an incoming chunk is compared against during the merge scan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeTarget {
    /// The most recent chunk of the open segment.
    #[default]
    LastChunk,
    /// All descriptions of the open segment joined together.
    SegmentText,
}

/// Parses `mm:ss`, `hh:mm:ss` or plain seconds (fractions allowed in the
/// last field) into seconds.
pub fn parse_clock(text: &str) -> Result<f64> {
    let bad = || Error::InvalidArgument(format!("not a timestamp: `{text}`"));
    let parts: Vec<&str> = text.trim().split(':').collect();
    if parts.is_empty() || parts.len() > 3 {
        return Err(bad());
    }
    let mut total = 0.0;
    for (i, p) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        let v: f64 = if last { p.parse().map_err(|_| bad())? } else { p.parse::<u32>().map_err(|_| bad())? as f64 };
        if v < 0.0 || (i > 0 && v >= 60.0) {
            return Err(bad());
        }
        total = total * 60.0 + v;
    }
    Ok(total)
}

/// Tiles `[0, duration_s]` with chunks of `chunk_len_s`; the last may be shorter.
pub fn chunk_timeline(duration_s: f64, chunk_len_s: f64) -> Result<Vec<Chunk>> {
    if !(duration_s.is_finite() && duration_s > 0.0) {
        return Err(Error::InvalidArgument(format!("duration must be positive, got {duration_s}")));
    }
    if !(chunk_len_s.is_finite() && chunk_len_s > 0.0) {
        return Err(Error::InvalidArgument(format!("chunk length must be positive, got {chunk_len_s}")));
    }
    let mut chunks = Vec::new();
    let mut i = 0usize;
    loop {
        let start = i as f64 * chunk_len_s;
        if start >= duration_s {
            break;
        }
        let end = ((i + 1) as f64 * chunk_len_s).min(duration_s);
        chunks.push(Chunk { chunk_id: i, span: Span::new(start, end)?, description: String::new() });
        i += 1;
    }
    Ok(chunks)
}

/// Fills chunk descriptions using up to `jobs` concurrent describer calls.
/// Output order follows the chunk order regardless of completion order.
pub fn describe_chunks(source: &FrameSource, chunks: &mut [Chunk], describer: &dyn Describer, jobs: usize) -> Result<()> {
    let jobs = jobs.max(1);
    let frames = source.frames();
    let describe_one = |chunk: &Chunk| {
        let lo = frames.partition_point(|f| f.timestamp_s < chunk.span.start());
        let hi = frames.partition_point(|f| f.timestamp_s <= chunk.span.end());
        describer.describe(source.video_id(), chunk.span.start(), chunk.span.end(), &frames[lo..hi])
    };
    let per_worker = chunks.len().div_ceil(jobs).max(1);
    let results: Vec<Result<()>> = thread::scope(|scope| {
        let handles: Vec<_> = chunks
            .chunks_mut(per_worker)
            .map(|batch| {
                scope.spawn(move || {
                    for chunk in batch.iter_mut() {
                        chunk.description = describe_one(chunk)?;
                    }
                    Ok(())
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("describer worker panicked")).collect()
    });
    results.into_iter().collect()
}

/// Left-to-right semantic merge.
///
/// The incoming chunk joins the open segment iff its similarity to the
/// comparison target reaches `threshold`. A threshold above 1 therefore never
/// merges and a threshold of 0 merges everything.
pub fn merge_chunks(
    chunks: &[Chunk],
    similarity: &dyn TextSimilarity,
    summarizer: &dyn Summarizer,
    threshold: f64,
    target: MergeTarget,
) -> Result<Vec<EventNode>> {
    if chunks.is_empty() {
        return Err(Error::EmptyInput("chunk list"));
    }
    if !threshold.is_finite() {
        return Err(Error::InvalidArgument("merge threshold must be finite".into()));
    }
    if let Some(c) = chunks.iter().find(|c| c.description.trim().is_empty()) {
        return Err(Error::InvalidArgument(format!("chunk {} has an empty description", c.chunk_id)));
    }

    let mut segments: Vec<Vec<&Chunk>> = vec![vec![&chunks[0]]];
    for chunk in &chunks[1..] {
        let open = segments.last_mut().expect("at least one segment");
        let reference = match target {
            MergeTarget::LastChunk => open.last().expect("non-empty segment").description.clone(),
            MergeTarget::SegmentText => open.iter().map(|c| c.description.as_str()).collect::<Vec<_>>().join(" "),
        };
        if similarity.similarity(&reference, &chunk.description)? >= threshold {
            open.push(chunk);
        } else {
            segments.push(vec![chunk]);
        }
    }

    segments
        .into_iter()
        .enumerate()
        .map(|(i, seg)| {
            let first = seg.first().expect("non-empty segment");
            let last = seg.last().expect("non-empty segment");
            let span = Span::new(first.span.start(), last.span.end())?;
            let texts: Vec<String> = seg.iter().map(|c| c.description.clone()).collect();
            let mut description = summarizer.summarize(&texts)?;
            if description.trim().is_empty() {
                description = texts.join("; ");
            }
            Ok(EventNode { event_id: format!("e{i:03}"), spans: SpanSet::single(span), description, entities: Vec::new() })
        })
        .collect()
}

/// One edge per ordered pair of distinct nodes, labelled by the Allen
/// relation between their first spans. Ordered by (from, to) position.
pub fn derive_edges(nodes: &[EventNode]) -> Vec<EventEdge> {
    let mut edges = Vec::new();
    for (i, a) in nodes.iter().enumerate() {
        for (j, b) in nodes.iter().enumerate() {
            if i == j {
                continue;
            }
            let (Some(sa), Some(sb)) = (a.spans.first(), b.spans.first()) else { continue };
            edges.push(EventEdge {
                from_event: a.event_id.clone(),
                to_event: b.event_id.clone(),
                relation: interval_relation(sa, sb),
            });
        }
    }
    edges
}

pub fn attach_entities(nodes: &mut [EventNode], extractor: &dyn EntityExtractor) -> Result<()> {
    for node in nodes {
        node.entities = extractor.entities(&node.description)?;
    }
    Ok(())
}

/// Greedy agglomeration: each entity joins the first cluster whose
/// representative reaches `link_threshold`, otherwise founds a new one.
pub fn cluster_entities(nodes: &[EventNode], similarity: &dyn TextSimilarity, link_threshold: f64) -> Result<Vec<EntityCluster>> {
    let mut clusters: Vec<EntityCluster> = Vec::new();
    for node in nodes {
        for entity in &node.entities {
            let mut home = None;
            for (ci, c) in clusters.iter().enumerate() {
                if similarity.similarity(&c.members[0].1, entity)? >= link_threshold {
                    home = Some(ci);
                    break;
                }
            }
            let member = (node.event_id.clone(), entity.clone());
            match home {
                Some(ci) => clusters[ci].members.push(member),
                None => clusters.push(EntityCluster { cluster_id: clusters.len(), members: vec![member] }),
            }
        }
    }
    Ok(clusters)
}

/// Settings for building one graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphConfig {
    pub chunk_len_s: f64,
    pub merge_threshold: f64,
    pub merge_target: MergeTarget,
    pub link_threshold: f64,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self { chunk_len_s: 3.0, merge_threshold: 0.85, merge_target: MergeTarget::LastChunk, link_threshold: 0.75 }
    }
}

/// Providers needed to turn chunk descriptions into a graph.
#[derive(Clone, Copy)]
pub struct GraphProviders<'a> {
    pub similarity: &'a dyn TextSimilarity,
    pub summarizer: &'a dyn Summarizer,
    pub entities: &'a dyn EntityExtractor,
    pub entity_similarity: &'a dyn TextSimilarity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventGraph {
    pub video_id: String,
    pub duration_s: f64,
    pub nodes: Vec<EventNode>,
    pub edges: Vec<EventEdge>,
    pub clusters: Vec<EntityCluster>,
}

/// Builds a graph from already-described chunks.
pub fn build_graph(
    video_id: &str,
    duration_s: f64,
    chunks: &[Chunk],
    providers: GraphProviders<'_>,
    config: &GraphConfig,
) -> Result<EventGraph> {
    let mut nodes =
        merge_chunks(chunks, providers.similarity, providers.summarizer, config.merge_threshold, config.merge_target)?;
    attach_entities(&mut nodes, providers.entities)?;
    let edges = derive_edges(&nodes);
    let clusters = cluster_entities(&nodes, providers.entity_similarity, config.link_threshold)?;
    Ok(EventGraph { video_id: video_id.to_string(), duration_s, nodes, edges, clusters })
}

/// Attaches chunk descriptions (in order) to a fresh timeline.
pub fn chunks_with_descriptions(duration_s: f64, chunk_len_s: f64, descriptions: &[String]) -> Result<Vec<Chunk>> {
    let mut chunks = chunk_timeline(duration_s, chunk_len_s)?;
    if chunks.len() != descriptions.len() {
        return Err(Error::LengthMismatch { left: chunks.len(), right: descriptions.len() });
    }
    for (c, d) in chunks.iter_mut().zip(descriptions) {
        c.description = d.clone();
    }
    Ok(chunks)
}

/// Line-delimited graph persistence record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum GraphRecord {
    Video { video_id: String, duration_s: f64 },
    Node { video_id: String, #[serde(flatten)] node: EventNode },
    Edge { video_id: String, #[serde(flatten)] edge: EventEdge },
    Cluster { video_id: String, #[serde(flatten)] cluster: EntityCluster },
}

pub fn write_graphs<W: Write>(graphs: &[EventGraph], mut out: W) -> Result<()> {
    for g in graphs {
        let vid = || g.video_id.clone();
        let mut records = vec![GraphRecord::Video { video_id: vid(), duration_s: g.duration_s }];
        records.extend(g.nodes.iter().map(|n| GraphRecord::Node { video_id: vid(), node: n.clone() }));
        records.extend(g.edges.iter().map(|e| GraphRecord::Edge { video_id: vid(), edge: e.clone() }));
        records.extend(g.clusters.iter().map(|c| GraphRecord::Cluster { video_id: vid(), cluster: c.clone() }));
        for r in records {
            serde_json::to_writer(&mut out, &r)?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}

pub fn read_graphs<R: BufRead>(input: R) -> Result<Vec<EventGraph>> {
    let mut graphs: Vec<EventGraph> = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: GraphRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Record { id: format!("line {}", n + 1), reason: e.to_string() })?;
        let current = |graphs: &mut Vec<EventGraph>, vid: &str| -> Result<usize> {
            graphs
                .iter()
                .rposition(|g| g.video_id == vid)
                .ok_or_else(|| Error::Record { id: format!("line {}", n + 1), reason: format!("no video header for {vid}") })
        };
        match record {
            GraphRecord::Video { video_id, duration_s } => graphs.push(EventGraph {
                video_id,
                duration_s,
                nodes: Vec::new(),
                edges: Vec::new(),
                clusters: Vec::new(),
            }),
            GraphRecord::Node { video_id, node } => {
                let i = current(&mut graphs, &video_id)?;
                graphs[i].nodes.push(node);
            }
            GraphRecord::Edge { video_id, edge } => {
                let i = current(&mut graphs, &video_id)?;
                graphs[i].edges.push(edge);
            }
            GraphRecord::Cluster { video_id, cluster } => {
                let i = current(&mut graphs, &video_id)?;
                graphs[i].clusters.push(cluster);
            }
        }
    }
    Ok(graphs)
}
