use std::collections::BTreeMap;
use std::sync::Arc;

use chrono::{DateTime, Utc};
use im::{HashMap, OrdMap, OrdSet};
use serde::{Deserialize, Serialize};

use crate::expr::Atomic;
use crate::xml::{NodeRef, Tree};

pub type MessageId = u64;

/// Slice membership recorded when a message is created.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceStamp {
    pub key: String,
    pub generation: u64,
}

/// An immutable message. The processed flag is kept by the store.
#[derive(Debug, Clone)]
pub struct Message {
    pub id: MessageId,
    /// Global FIFO position, assigned at commit.
    pub seq: u64,
    pub queue: String,
    pub body: Arc<Tree>,
    pub props: BTreeMap<String, Atomic>,
    pub created_at: DateTime<Utc>,
    pub creating_rule: Option<String>,
    pub slice_stamps: BTreeMap<String, SliceStamp>,
}

impl Message {
    pub fn document(&self) -> NodeRef {
        self.body.root()
    }

    pub fn prop(&self, name: &str) -> Option<&Atomic> {
        self.props.get(name)
    }
}

pub(crate) type SliceId = (String, String);

/// One committed version of the store contents. Cloning is cheap.
#[derive(Debug, Clone, Default)]
pub(crate) struct State {
    pub version: u64,
    pub next_seq: u64,
    pub messages: OrdMap<MessageId, Arc<Message>>,
    pub queues: HashMap<String, OrdMap<u64, MessageId>>,
    pub processed: OrdSet<MessageId>,
    pub generations: HashMap<SliceId, u64>,
    pub slices: HashMap<SliceId, OrdMap<u64, MessageId>>,
}

impl State {
    pub fn generation(&self, slicing: &str, key: &str) -> u64 {
        self.generations
            .get(&(slicing.to_string(), key.to_string()))
            .copied()
            .unwrap_or(0)
    }

    pub fn insert(&mut self, m: Arc<Message>) {
        self.next_seq = self.next_seq.max(m.seq + 1);
        self.queues
            .entry(m.queue.clone())
            .or_default()
            .insert(m.seq, m.id);
        for (slicing, stamp) in &m.slice_stamps {
            self.slices
                .entry((slicing.clone(), stamp.key.clone()))
                .or_default()
                .insert(m.seq, m.id);
        }
        self.messages.insert(m.id, m);
    }

    pub fn remove(&mut self, id: MessageId) -> Option<Arc<Message>> {
        let m = self.messages.remove(&id)?;
        if let Some(q) = self.queues.get_mut(&m.queue) {
            q.remove(&m.seq);
        }
        for (slicing, stamp) in &m.slice_stamps {
            let sid = (slicing.clone(), stamp.key.clone());
            if let Some(s) = self.slices.get_mut(&sid) {
                s.remove(&m.seq);
                if s.is_empty() {
                    self.slices.remove(&sid);
                }
            }
        }
        self.processed.remove(&id);
        Some(m)
    }

    pub fn bump_generation(&mut self, slicing: &str, key: &str) -> u64 {
        let g = self
            .generations
            .entry((slicing.to_string(), key.to_string()))
            .or_insert(0);
        *g += 1;
        *g
    }

    /// Processed and in no current-lifetime slice.
    pub fn removable(&self, m: &Message) -> bool {
        self.processed.contains(&m.id)
            && m
                .slice_stamps
                .iter()
                .all(|(s, st)| st.generation < self.generation(s, &st.key))
    }
}
