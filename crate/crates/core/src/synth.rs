//! Deterministic synthetic videos for offline runs and tests.
//!
//! Each video is a sequence of scripted events made of whole 3-second
//! chunks. Neighbouring events share no vocabulary slot, so semantic
//! chunking recovers the script exactly; some events recur later in the
//! video (at most twice in total), which yields two-span records.

use rand::seq::IndexedRandom;
use rand::Rng;

use crate::budget::FrameSource;
use crate::error::{Error, Result};
use crate::graph::{build_graph, chunk_timeline, describe_chunks, EventGraph, GraphConfig, GraphProviders};
use crate::interleave::FrameSample;
use crate::provider::{ConcatSummarizer, Describer, KeywordEntities, TokenF1};
use crate::seed::rng_for;

const ACTORS: &[&str] = &["man", "woman", "child", "dog", "chef", "cyclist", "teacher", "farmer", "musician", "nurse"];
const ACTIONS: &[&str] = &[
    "pours coffee",
    "opens a window",
    "juggles oranges",
    "paints a fence",
    "reads a newspaper",
    "repairs a bicycle",
    "waters tomatoes",
    "stacks firewood",
    "plays violin",
    "folds laundry",
];
const PLACES: &[&str] = &[
    "in the kitchen",
    "beside the river",
    "inside a garage",
    "on the balcony",
    "at the market",
    "under a bridge",
    "behind the barn",
    "along the beach",
    "in a library",
    "on a rooftop",
];

pub const CHUNK_LEN_S: f64 = 3.0;

/// One scripted event: its description and chunk range `[first, last)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScriptedEvent {
    pub description: String,
    pub first_chunk: usize,
    pub chunk_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticVideo {
    pub video_id: String,
    pub events: Vec<ScriptedEvent>,
    pub source: FrameSource,
}

impl SyntheticVideo {
    pub fn duration_s(&self) -> f64 {
        self.source.duration_s()
    }

    /// Description of the chunk containing time `t`.
    pub fn description_at(&self, t: f64) -> Option<&str> {
        let chunk = (t / CHUNK_LEN_S).floor() as usize;
        self.events
            .iter()
            .find(|e| (e.first_chunk..e.first_chunk + e.chunk_count).contains(&chunk))
            .map(|e| e.description.as_str())
    }

    pub fn chunk_descriptions(&self) -> Vec<String> {
        self.events.iter().flat_map(|e| std::iter::repeat_n(e.description.clone(), e.chunk_count)).collect()
    }
}

type Slots = (usize, usize, usize);

fn describe_slots((a, v, p): Slots) -> String {
    format!("a {} {} {}", ACTORS[a], ACTIONS[v], PLACES[p])
}

fn disjoint(x: Slots, y: Slots) -> bool {
    x.0 != y.0 && x.1 != y.1 && x.2 != y.2
}

/// Generates video number `index` of a corpus seeded by `seed`.
pub fn synth_video(seed: u64, index: usize, fps: f64) -> Result<SyntheticVideo> {
    let video_id = format!("syn{index:04}");
    let mut rng = rng_for(seed, &["synth", &video_id]);
    let event_count = rng.random_range(6..=12);
    let mut slots: Vec<Slots> = Vec::with_capacity(event_count);
    let mut events = Vec::with_capacity(event_count);
    let mut chunk = 0;
    for i in 0..event_count {
        let prev = slots.last().copied();
        let recurring: Vec<Slots> = if i >= 4 {
            slots[..i - 1]
                .iter()
                .copied()
                .filter(|s| prev.is_none_or(|p| disjoint(*s, p)) && slots.iter().filter(|x| *x == s).count() < 2)
                .collect()
        } else {
            Vec::new()
        };
        let chosen = match recurring.choose(&mut rng) {
            Some(s) if rng.random_bool(0.3) => *s,
            _ => loop {
                let fresh = (rng.random_range(0..ACTORS.len()), rng.random_range(0..ACTIONS.len()), rng.random_range(0..PLACES.len()));
                if prev.is_none_or(|p| disjoint(fresh, p)) && !slots.contains(&fresh) {
                    break fresh;
                }
            },
        };
        let chunk_count = rng.random_range(2..=8);
        events.push(ScriptedEvent { description: describe_slots(chosen), first_chunk: chunk, chunk_count });
        slots.push(chosen);
        chunk += chunk_count;
    }
    let duration = chunk as f64 * CHUNK_LEN_S;
    let source = FrameSource::uniform(video_id.clone(), duration, fps)?;
    Ok(SyntheticVideo { video_id, events, source })
}

pub fn synth_corpus(seed: u64, videos: usize, fps: f64) -> Result<Vec<SyntheticVideo>> {
    if videos == 0 {
        return Err(Error::EmptyInput("synthetic corpus size"));
    }
    (0..videos).map(|i| synth_video(seed, i, fps)).collect()
}

/// Describer that reads the script of known synthetic videos.
pub struct ScriptedDescriber<'a> {
    pub videos: &'a [SyntheticVideo],
}

impl Describer for ScriptedDescriber<'_> {
    fn describe(&self, video_id: &str, start_s: f64, end_s: f64, _frames: &[FrameSample]) -> Result<String> {
        let video = self
            .videos
            .iter()
            .find(|v| v.video_id == video_id)
            .ok_or_else(|| Error::Provider(format!("unknown video {video_id}")))?;
        video
            .description_at(0.5 * (start_s + end_s))
            .map(str::to_string)
            .ok_or_else(|| Error::Provider(format!("{video_id}: no event at {start_s}..{end_s}")))
    }
}

/// Builds event graphs for synthetic videos with the offline providers.
pub fn synth_graphs(videos: &[SyntheticVideo], config: &GraphConfig, jobs: usize) -> Result<Vec<EventGraph>> {
    let describer = ScriptedDescriber { videos };
    let providers = GraphProviders {
        similarity: &TokenF1,
        summarizer: &ConcatSummarizer,
        entities: &KeywordEntities,
        entity_similarity: &TokenF1,
    };
    videos
        .iter()
        .map(|v| {
            let mut chunks = chunk_timeline(v.duration_s(), config.chunk_len_s)?;
            describe_chunks(&v.source, &mut chunks, &describer, jobs)?;
            build_graph(&v.video_id, v.duration_s(), &chunks, providers, config)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(synth_video(4, 2, 24.0).unwrap(), synth_video(4, 2, 24.0).unwrap());
        assert_ne!(synth_video(4, 2, 24.0).unwrap().events, synth_video(5, 2, 24.0).unwrap().events);
    }

    #[test]
    fn chunking_recovers_script() {
        let videos = synth_corpus(11, 5, 4.0).unwrap();
        let graphs = synth_graphs(&videos, &GraphConfig::default(), 3).unwrap();
        for (v, g) in videos.iter().zip(&graphs) {
            assert_eq!(g.nodes.len(), v.events.len());
            for (node, event) in g.nodes.iter().zip(&v.events) {
                assert_eq!(node.description, event.description);
                let start = event.first_chunk as f64 * CHUNK_LEN_S;
                assert_eq!(node.spans.to_pairs(), vec![(start, start + event.chunk_count as f64 * CHUNK_LEN_S)]);
            }
        }
    }
}
