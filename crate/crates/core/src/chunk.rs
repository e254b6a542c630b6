//! Fixed-length user-history chunking.
//!
//! Each user's full history is partitioned into contiguous segments of at
//! most `max_len` events. A chunk keeps a stable id `(user, index)` so that
//! re-chunking a longer prefix of the stream assigns the same ids to the
//! same leading segments. The chunk is the unit of training, selection, and
//! evaluation; a user token is prepended at embedding time.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::stream::InteractionEvent;

/// Default maximum chunk length (events per segment).
pub const DEFAULT_MAX_LEN: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ChunkId {
    pub user: u32,
    pub index: u32,
}

impl std::fmt::Display for ChunkId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "u{}c{}", self.user, self.index)
    }
}

/// A contiguous segment of one user's history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceChunk {
    pub id: ChunkId,
    /// Time-ordered, 2..=max_len events.
    pub events: Vec<InteractionEvent>,
    /// Interval index of the last event; -1 when not assigned yet.
    pub source_interval: i64,
}

impl SequenceChunk {
    pub fn user_token(&self) -> u32 {
        self.id.user
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn last_timestamp(&self) -> i64 {
        self.events.last().expect("chunk has >= 2 events").timestamp
    }

    pub fn final_item(&self) -> u32 {
        self.events.last().expect("chunk has >= 2 events").item_id
    }
}

/// Chunks every user's history in `events` (globally time-ordered input).
///
/// Trailing partial segments are kept when they still contain at least two
/// events; a trailing single event yields no chunk.
pub fn chunk_events(events: &[InteractionEvent], max_len: usize) -> Vec<SequenceChunk> {
    assert!(max_len >= 2);
    let mut per_user: BTreeMap<u32, Vec<InteractionEvent>> = BTreeMap::new();
    for &ev in events {
        per_user.entry(ev.user_id).or_default().push(ev);
    }
    let mut chunks = Vec::new();
    for (user, history) in per_user {
        for (index, seg) in history.chunks(max_len).enumerate() {
            if seg.len() < 2 {
                continue;
            }
            chunks.push(SequenceChunk {
                id: ChunkId { user, index: index as u32 },
                events: seg.to_vec(),
                source_interval: -1,
            });
        }
    }
    chunks
}
