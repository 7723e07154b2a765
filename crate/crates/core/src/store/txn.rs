use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::Arc;

use chrono::{DateTime, Utc};

use super::state::{Message, MessageId, SliceId, SliceStamp};
use super::{Footprint, Resource, Snapshot, Store, StoreError, TrackingView};
use crate::expr::{evaluate, Atomic, EvalContext, Expr, RuleTarget, ValueType};
use crate::sysprops;
use crate::xml::Tree;

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Enqueue(Arc<Message>),
    MarkProcessed(MessageId),
    Reset(String, String),
    Remove(MessageId),
}

/// Result of a successful commit.
#[derive(Debug, Clone)]
pub struct CommitInfo {
    pub version: u64,
    /// Messages created by the transaction, with their final sequence numbers.
    pub created: Vec<Arc<Message>>,
}

/// Everything needed to create one message.
#[derive(Debug, Clone)]
pub struct EnqueueRequest {
    pub queue: String,
    pub body: Arc<Tree>,
    /// Values from a `with` clause.
    pub explicit: Vec<(String, Atomic)>,
    /// The message whose processing created this one.
    pub trigger: Option<Arc<Message>>,
    pub creating_rule: Option<String>,
    /// Reserved properties supplied by gateways, e.g. ArrivalTime.
    pub system: Vec<(String, Atomic)>,
}

impl EnqueueRequest {
    pub fn new(queue: impl Into<String>, body: Arc<Tree>) -> Self {
        EnqueueRequest {
            queue: queue.into(),
            body,
            explicit: Vec::new(),
            trigger: None,
            creating_rule: None,
            system: Vec::new(),
        }
    }

    pub fn with(mut self, name: impl Into<String>, value: Atomic) -> Self {
        self.explicit.push((name.into(), value));
        self
    }

    pub fn trigger(mut self, trigger: Arc<Message>) -> Self {
        self.trigger = Some(trigger);
        self
    }

    pub fn rule(mut self, rule: impl Into<String>) -> Self {
        self.creating_rule = Some(rule.into());
        self
    }

    pub fn system(mut self, name: impl Into<String>, value: Atomic) -> Self {
        self.system.push((name.into(), value));
        self
    }
}

/// Opaque marker for [`Txn::rollback_to`].
pub struct Savepoint {
    ops: usize,
    footprint: Footprint,
    generations: HashMap<SliceId, u64>,
    processed: HashSet<MessageId>,
}

/// A transaction: a snapshot plus buffered writes.
///
/// Dropping a transaction without committing aborts it.
pub struct Txn<'s> {
    store: &'s Store,
    snapshot: Snapshot,
    ops: Vec<Op>,
    footprint: Footprint,
    generations: HashMap<SliceId, u64>,
    processed: HashSet<MessageId>,
}

impl<'s> Txn<'s> {
    pub(crate) fn new(store: &'s Store, snapshot: Snapshot) -> Self {
        Txn {
            store,
            snapshot,
            ops: Vec::new(),
            footprint: Footprint::default(),
            generations: HashMap::new(),
            processed: HashSet::new(),
        }
    }

    pub fn snapshot(&self) -> &Snapshot {
        &self.snapshot
    }

    pub fn footprint(&self) -> &Footprint {
        &self.footprint
    }

    pub fn now(&self) -> DateTime<Utc> {
        self.store.clock().now()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    /// Adds reads made outside the transaction (e.g. by rule evaluation
    /// against its snapshot) to the conflict footprint.
    pub fn note_reads(&mut self, reads: impl IntoIterator<Item = Resource>) {
        self.footprint.reads.extend(reads);
    }

    pub fn note_queue_read(&mut self, queue: &str) {
        self.footprint.reads.insert(Resource::Queue(queue.to_string()));
    }

    /// Current generation of a slice as seen by this transaction.
    pub fn generation(&self, slicing: &str, key: &str) -> u64 {
        self.generations
            .get(&(slicing.to_string(), key.to_string()))
            .copied()
            .unwrap_or_else(|| self.snapshot.state.generation(slicing, key))
    }

    pub fn enqueue(&mut self, req: EnqueueRequest) -> Result<MessageId, StoreError> {
        let catalog = self.snapshot.catalog().clone();
        let queue = catalog
            .queue(&req.queue)
            .ok_or_else(|| StoreError::UnknownQueue(req.queue.clone()))?;
        let now = self.now();
        let mut explicit: BTreeMap<String, Atomic> = BTreeMap::new();
        let mut props: BTreeMap<String, Atomic> = BTreeMap::new();

        for (name, value) in &req.explicit {
            if let Some(ty) = sysprops::value_type(name) {
                if !sysprops::settable(name, queue.kind) {
                    return Err(StoreError::FixedPropertyOverride(name.clone()));
                }
                props.insert(name.clone(), cast(name, value, ty)?);
                continue;
            }
            let def = catalog
                .property(name)
                .ok_or_else(|| StoreError::UnknownProperty(name.clone()))?;
            if def.fixed {
                return Err(StoreError::FixedPropertyOverride(name.clone()));
            }
            if def.clause_for(&req.queue).is_none() {
                return Err(StoreError::PropertyNotDefined {
                    property: name.clone(),
                    queue: req.queue.clone(),
                });
            }
            explicit.insert(name.clone(), cast(name, value, def.value_type)?);
        }

        let mut reads = Vec::new();
        for (def, clause) in catalog.properties_for_queue(&req.queue) {
            let computed = |reads: &mut Vec<Resource>| -> Result<Option<Atomic>, StoreError> {
                match &clause.value {
                    Some(expr) => {
                        let (v, r) = self.compute(&def.name, expr, &req, def.value_type, now)?;
                        reads.extend(r);
                        Ok(v)
                    }
                    None => Ok(None),
                }
            };
            let value = if def.fixed && clause.value.is_some() {
                computed(&mut reads)?
            } else if let Some(v) = explicit.remove(&def.name) {
                Some(v)
            } else if let Some(v) = req
                .trigger
                .as_ref()
                .filter(|_| def.inherited)
                .and_then(|t| t.prop(&def.name))
            {
                Some(cast(&def.name, v, def.value_type)?)
            } else {
                computed(&mut reads)?
            };
            if let Some(v) = value {
                props.insert(def.name.clone(), v);
            }
        }
        self.note_reads(reads);

        props.insert(sysprops::CREATION_TIME.to_string(), Atomic::DateTime(now));
        if let Some(rule) = &req.creating_rule {
            props.insert(sysprops::CREATING_RULE.to_string(), Atomic::Str(rule.clone()));
        }
        if let Some(trigger) = &req.trigger {
            for (name, v) in &trigger.props {
                if sysprops::inherited(name) && !props.contains_key(name) {
                    props.insert(name.clone(), v.clone());
                }
            }
        }
        for (name, value) in &req.system {
            let ty = sysprops::value_type(name).unwrap_or(ValueType::String);
            props.insert(name.clone(), cast(name, value, ty)?);
        }

        let mut stamps = BTreeMap::new();
        for s in catalog.slicings_for_queue(&req.queue) {
            let Some(v) = props.get(&s.property) else {
                continue;
            };
            let key = catalog.slice_key(&s.name, v).unwrap_or_else(|| v.key_string());
            let generation = self.generation(&s.name, &key);
            self.footprint
                .reads
                .insert(Resource::SliceGeneration(s.name.clone(), key.clone()));
            self.footprint
                .appends
                .insert(Resource::SliceMembers(s.name.clone(), key.clone()));
            stamps.insert(s.name.clone(), SliceStamp { key, generation });
        }
        self.footprint
            .appends
            .insert(Resource::Queue(req.queue.clone()));

        let id = self.store.allocate_id();
        self.ops.push(Op::Enqueue(Arc::new(Message {
            id,
            seq: 0,
            queue: req.queue,
            body: req.body,
            props,
            created_at: now,
            creating_rule: req.creating_rule,
            slice_stamps: stamps,
        })));
        Ok(id)
    }

    fn compute(
        &self,
        property: &str,
        expr: &Expr,
        req: &EnqueueRequest,
        ty: ValueType,
        now: DateTime<Utc>,
    ) -> Result<(Option<Atomic>, Vec<Resource>), StoreError> {
        let view = TrackingView::new(&self.snapshot);
        let no_props = BTreeMap::new();
        let ctx = EvalContext {
            document: req.body.root(),
            queue: &req.queue,
            properties: &no_props,
            store: &view,
            target: RuleTarget::None,
            clock: now,
            variables: Vec::new(),
        };
        let (value, _) = evaluate(expr, &ctx).map_err(|source| StoreError::PropertyEvaluation {
            property: property.to_string(),
            source,
        })?;
        let first = value.items().first().map(|i| i.atomize());
        let v = first.map(|a| cast(property, &a, ty)).transpose()?;
        Ok((v, view.into_reads()))
    }

    pub fn reset_slice(&mut self, slicing: &str, key: &Atomic) -> Result<(), StoreError> {
        let key = self.snapshot.slice_key(slicing, key)?;
        let next = self.generation(slicing, &key) + 1;
        self.generations
            .insert((slicing.to_string(), key.clone()), next);
        self.footprint
            .writes
            .insert(Resource::SliceGeneration(slicing.to_string(), key.clone()));
        self.ops.push(Op::Reset(slicing.to_string(), key));
        Ok(())
    }

    pub fn mark_processed(&mut self, id: MessageId) -> Result<(), StoreError> {
        if self.snapshot.message(id).is_none() {
            return Err(StoreError::UnknownMessage(id));
        }
        if self.snapshot.is_processed(id) || !self.processed.insert(id) {
            return Err(StoreError::AlreadyProcessed(id));
        }
        self.footprint.writes.insert(Resource::Message(id));
        self.ops.push(Op::MarkProcessed(id));
        Ok(())
    }

    pub fn savepoint(&self) -> Savepoint {
        Savepoint {
            ops: self.ops.len(),
            footprint: self.footprint.clone(),
            generations: self.generations.clone(),
            processed: self.processed.clone(),
        }
    }

    /// Discards everything done since `sp` was taken.
    pub fn rollback_to(&mut self, sp: Savepoint) {
        self.ops.truncate(sp.ops);
        self.footprint = sp.footprint;
        self.generations = sp.generations;
        self.processed = sp.processed;
    }

    pub fn commit(self) -> Result<CommitInfo, StoreError> {
        self.store
            .commit_ops(self.snapshot.version(), self.ops, self.footprint, false)
    }

    pub fn abort(self) {}
}

fn cast(property: &str, value: &Atomic, ty: ValueType) -> Result<Atomic, StoreError> {
    value.cast(ty).ok_or_else(|| StoreError::PropertyType {
        property: property.to_string(),
        value: value.lexical(),
        expected: ty,
    })
}
