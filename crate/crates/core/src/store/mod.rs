//! Transactional, append-only message storage.
//!
//! Committed state is an immutable [`State`] value behind an `Arc`; a
//! [`Snapshot`] is a cheap handle on one such version. Transactions buffer
//! their operations and validate a read/write footprint against the commits
//! that happened since they began (optimistic concurrency control).
//! Persistent changes are written to a checksummed log before a new version
//! is published.

mod catalog;
mod state;
mod txn;
mod wal;

use std::collections::{BTreeSet, VecDeque};
use std::fs::{self, File, OpenOptions};
use std::io;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use fs2::FileExt;
use thiserror::Error;

use crate::clock::{Clock, SystemClock};
use crate::expr::{Atomic, DynamicError, DynamicErrorKind, StoreView, ValueType};
use crate::lang::ApplicationDef;
use crate::xml::NodeRef;

pub use catalog::Catalog;
pub use state::{Message, MessageId, SliceStamp};
pub use txn::{CommitInfo, EnqueueRequest, Savepoint, Txn};
pub use wal::{Manifest, ManifestQueue, WalRecord};

use state::State;
use txn::Op;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("unknown queue '{0}'")]
    UnknownQueue(String),
    #[error("unknown slicing '{0}'")]
    UnknownSlicing(String),
    #[error("unknown message {0}")]
    UnknownMessage(MessageId),
    #[error("unknown property '{0}'")]
    UnknownProperty(String),
    #[error("property '{property}' is not defined on queue '{queue}'")]
    PropertyNotDefined { property: String, queue: String },
    #[error("property '{0}' cannot be set explicitly")]
    FixedPropertyOverride(String),
    #[error("value '{value}' of property '{property}' is not a valid {}", expected.xs_name())]
    PropertyType {
        property: String,
        value: String,
        expected: ValueType,
    },
    #[error("computing property '{property}' failed: {source}")]
    PropertyEvaluation {
        property: String,
        source: DynamicError,
    },
    #[error("message {0} is already processed")]
    AlreadyProcessed(MessageId),
    #[error("transaction conflicts with a concurrent commit")]
    ConflictAbort,
    #[error("application is incompatible with stored data: {0}")]
    IncompatibleApplication(String),
    #[error("corrupt store: {0}")]
    CorruptLog(String),
    #[error("store is locked by another process")]
    Locked,
    #[error("store was opened read-only")]
    ReadOnly,
    #[error("store stopped after a failed log write; reopen to recover")]
    Poisoned,
    #[error("no application deployed in this store")]
    NotDeployed,
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// A conflict-relevant piece of store state.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Resource {
    Queue(String),
    SliceGeneration(String, String),
    SliceMembers(String, String),
    Message(MessageId),
}

/// What a transaction read, appended to and overwrote.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Footprint {
    pub reads: BTreeSet<Resource>,
    pub appends: BTreeSet<Resource>,
    pub writes: BTreeSet<Resource>,
}

impl Footprint {
    pub fn is_empty(&self) -> bool {
        self.reads.is_empty() && self.appends.is_empty() && self.writes.is_empty()
    }

    /// Whether committing `self` after `earlier` committed concurrently
    /// would break serializability. Concurrent appends to the same queue
    /// or slice are allowed.
    pub fn conflicts_with(&self, earlier: &Footprint) -> bool {
        let touched = |r: &Resource| earlier.appends.contains(r) || earlier.writes.contains(r);
        self.reads.iter().any(touched)
            || self.writes.iter().any(touched)
            || self.appends.iter().any(|r| earlier.writes.contains(r))
    }
}

pub struct StoreOptions {
    pub clock: Arc<dyn Clock>,
    pub read_only: bool,
    /// fsync the log on every commit that touches persistent data.
    pub sync: bool,
    /// Fail the log writer after this many bytes, leaving a torn record.
    pub crash_after_bytes: Option<u64>,
    /// Number of recent commit footprints kept for validation.
    pub history_limit: usize,
}

impl Default for StoreOptions {
    fn default() -> Self {
        StoreOptions {
            clock: Arc::new(SystemClock),
            read_only: false,
            sync: true,
            crash_after_bytes: None,
            history_limit: 10_000,
        }
    }
}

struct CommitEntry {
    version: u64,
    footprint: Footprint,
}

struct CommitLog {
    wal: Option<wal::WalWriter>,
    history: VecDeque<CommitEntry>,
    history_limit: usize,
}

pub struct Store {
    dir: PathBuf,
    catalog: Arc<Catalog>,
    current: RwLock<Arc<State>>,
    commit: Mutex<CommitLog>,
    next_id: AtomicU64,
    clock: Arc<dyn Clock>,
    poisoned: AtomicBool,
    read_only: bool,
    _lock: Option<File>,
}

fn corrupt(e: impl ToString) -> StoreError {
    StoreError::CorruptLog(e.to_string())
}

fn acquire_lock(dir: &Path) -> Result<File, StoreError> {
    let f = OpenOptions::new()
        .create(true)
        .truncate(false)
        .write(true)
        .open(dir.join("LOCK"))?;
    f.try_lock_exclusive().map_err(|_| StoreError::Locked)?;
    Ok(f)
}

impl Store {
    /// Opens (or creates) the store in `dir` for `app`, recovering committed
    /// state from the latest snapshot and the log.
    pub fn open(dir: impl AsRef<Path>, app: &ApplicationDef, opts: StoreOptions) -> Result<Store, StoreError> {
        let dir = dir.as_ref().to_path_buf();
        if opts.read_only {
            if !dir.is_dir() {
                return Err(StoreError::NotDeployed);
            }
        } else {
            fs::create_dir_all(&dir)?;
        }
        let lock = if opts.read_only {
            None
        } else {
            Some(acquire_lock(&dir)?)
        };
        let catalog = Arc::new(Catalog::new(app.clone()));
        let (state, next_id, valid_len) = recover(&dir)?;
        check_compatibility(&dir, app, &state)?;
        let wal = if opts.read_only {
            None
        } else {
            Some(wal::WalWriter::open(
                &wal::log_path(&dir),
                valid_len,
                opts.sync,
                opts.crash_after_bytes,
            )?)
        };
        Ok(Store {
            dir,
            catalog,
            current: RwLock::new(Arc::new(state)),
            commit: Mutex::new(CommitLog {
                wal,
                history: VecDeque::new(),
                history_limit: opts.history_limit.max(1),
            }),
            next_id: AtomicU64::new(next_id),
            clock: opts.clock,
            poisoned: AtomicBool::new(false),
            read_only: opts.read_only,
            _lock: lock,
        })
    }

    /// The application text recorded by the last deployment.
    pub fn deployed_application(dir: impl AsRef<Path>) -> Result<String, StoreError> {
        match wal::read_manifest(dir.as_ref()) {
            Ok(Some(m)) => Ok(m.application),
            Ok(None) => Err(StoreError::NotDeployed),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Err(StoreError::NotDeployed),
            Err(e) => Err(corrupt(e)),
        }
    }

    /// Records `app_text` (which must describe this store's application) as
    /// the deployed application.
    pub fn install_manifest(&self, app_text: &str) -> Result<(), StoreError> {
        if self.read_only {
            return Err(StoreError::ReadOnly);
        }
        let app = self.catalog.app();
        let manifest = Manifest {
            format: 1,
            application: app_text.to_string(),
            queues: app
                .queues
                .iter()
                .map(|q| ManifestQueue {
                    name: q.name.clone(),
                    kind: q.kind,
                    mode: q.mode,
                })
                .collect(),
            slicings: app
                .slicings
                .iter()
                .map(|s| (s.name.clone(), s.property.clone()))
                .collect(),
        };
        wal::write_manifest(&self.dir, &manifest)?;
        Ok(())
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn catalog(&self) -> &Arc<Catalog> {
        &self.catalog
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    pub fn is_poisoned(&self) -> bool {
        self.poisoned.load(Ordering::SeqCst)
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot {
            state: self.current.read().unwrap().clone(),
            catalog: self.catalog.clone(),
        }
    }

    pub fn begin(&self) -> Txn<'_> {
        Txn::new(self, self.snapshot())
    }

    pub(crate) fn allocate_id(&self) -> MessageId {
        self.next_id.fetch_add(1, Ordering::SeqCst)
    }

    fn commit_ops(
        &self,
        base_version: u64,
        ops: Vec<Op>,
        footprint: Footprint,
        exempt: bool,
    ) -> Result<CommitInfo, StoreError> {
        if self.read_only {
            return Err(StoreError::ReadOnly);
        }
        if self.is_poisoned() {
            return Err(StoreError::Poisoned);
        }
        let mut log = self.commit.lock().unwrap();
        let current = self.current.read().unwrap().clone();
        if !exempt && base_version < current.version {
            let covered = log
                .history
                .front()
                .is_some_and(|e| e.version <= base_version + 1);
            if !covered && !footprint.is_empty() {
                return Err(StoreError::ConflictAbort);
            }
            let clash = log
                .history
                .iter()
                .filter(|e| e.version > base_version)
                .any(|e| footprint.conflicts_with(&e.footprint));
            if clash {
                return Err(StoreError::ConflictAbort);
            }
        }
        let mut next = (*current).clone();
        next.version += 1;
        let mut records = Vec::new();
        let mut created = Vec::new();
        for op in ops {
            match op {
                Op::Enqueue(m) => {
                    let mut m = (*m).clone();
                    m.seq = next.next_seq;
                    let m = Arc::new(m);
                    if self.catalog.is_persistent(&m.queue) {
                        records.push(WalRecord::Enqueue {
                            message: wal::StoredMessage::from_message(&m),
                        });
                    }
                    created.push(m.clone());
                    next.insert(m);
                }
                Op::MarkProcessed(id) => {
                    let Some(m) = next.messages.get(&id).cloned() else {
                        return Err(StoreError::UnknownMessage(id));
                    };
                    if next.processed.contains(&id) {
                        return Err(StoreError::AlreadyProcessed(id));
                    }
                    next.processed.insert(id);
                    if self.catalog.is_persistent(&m.queue) {
                        records.push(WalRecord::MarkProcessed { id });
                    }
                }
                Op::Reset(slicing, key) => {
                    let generation = next.bump_generation(&slicing, &key);
                    records.push(WalRecord::Reset {
                        slicing,
                        key,
                        generation,
                    });
                }
                Op::Remove(id) => {
                    if let Some(m) = next.remove(id) {
                        if self.catalog.is_persistent(&m.queue) {
                            records.push(WalRecord::Remove { id });
                        }
                    }
                }
            }
        }
        if !records.is_empty() {
            records.push(WalRecord::Commit {
                version: next.version,
                next_id: self.next_id.load(Ordering::SeqCst),
            });
            if let Some(w) = log.wal.as_mut() {
                if let Err(e) = w.append(&records) {
                    self.poisoned.store(true, Ordering::SeqCst);
                    return Err(StoreError::Io(e));
                }
            }
        }
        let version = next.version;
        *self.current.write().unwrap() = Arc::new(next);
        if !exempt && !footprint.is_empty() {
            log.history.push_back(CommitEntry { version, footprint });
            while log.history.len() > log.history_limit {
                log.history.pop_front();
            }
        }
        Ok(CommitInfo { version, created })
    }

    /// Physically removes every processed message that belongs to no
    /// current-lifetime slice. Returns the number removed.
    pub fn garbage_collect(&self) -> Result<usize, StoreError> {
        let snap = self.snapshot();
        let ids: Vec<MessageId> = snap
            .state
            .messages
            .values()
            .filter(|m| snap.state.removable(m))
            .map(|m| m.id)
            .collect();
        if ids.is_empty() {
            return Ok(0);
        }
        let n = ids.len();
        self.commit_ops(
            snap.version(),
            ids.into_iter().map(Op::Remove).collect(),
            Footprint::default(),
            true,
        )?;
        Ok(n)
    }

    /// Writes a full snapshot of the persistent state and empties the log.
    pub fn checkpoint(&self) -> Result<u64, StoreError> {
        if self.read_only {
            return Err(StoreError::ReadOnly);
        }
        if self.is_poisoned() {
            return Err(StoreError::Poisoned);
        }
        let mut log = self.commit.lock().unwrap();
        let state = self.current.read().unwrap().clone();
        let persistent = |m: &Message| self.catalog.is_persistent(&m.queue);
        let snap = wal::SnapshotFile {
            version: state.version,
            next_id: self.next_id.load(Ordering::SeqCst),
            next_seq: state.next_seq,
            messages: state
                .messages
                .values()
                .filter(|m| persistent(m))
                .map(|m| wal::StoredMessage::from_message(m))
                .collect(),
            processed: state
                .processed
                .iter()
                .copied()
                .filter(|id| state.messages.get(id).is_some_and(|m| persistent(m)))
                .collect(),
            generations: state
                .generations
                .iter()
                .map(|((s, k), g)| (s.clone(), k.clone(), *g))
                .collect(),
        };
        wal::write_snapshot(&self.dir, &snap)?;
        if let Some(w) = log.wal.as_mut() {
            w.reset()?;
        }
        Ok(state.version)
    }
}

fn recover(dir: &Path) -> Result<(State, MessageId, u64), StoreError> {
    let mut state = State::default();
    let mut next_id: MessageId = 1;
    if let Some(snap) = wal::read_latest_snapshot(dir)? {
        state.version = snap.version;
        state.next_seq = snap.next_seq;
        next_id = snap.next_id;
        for m in snap.messages {
            state.insert(wal::message_from_stored(m).map_err(corrupt)?);
        }
        for id in snap.processed {
            if state.messages.contains_key(&id) {
                state.processed.insert(id);
            }
        }
        for (s, k, g) in snap.generations {
            state.generations.insert((s, k), g);
        }
    }
    let log = wal::read_log(&wal::log_path(dir)).map_err(corrupt)?;
    let mut valid_len = 0;
    if let Some(log) = log {
        valid_len = log.valid_len;
        for txn in log.txns {
            next_id = next_id.max(txn.next_id);
            if txn.version <= state.version {
                continue;
            }
            for r in txn.records {
                match r {
                    WalRecord::Enqueue { message } => {
                        next_id = next_id.max(message.id + 1);
                        state.insert(wal::message_from_stored(message).map_err(corrupt)?);
                    }
                    WalRecord::MarkProcessed { id } => {
                        if state.messages.contains_key(&id) {
                            state.processed.insert(id);
                        }
                    }
                    WalRecord::Reset {
                        slicing,
                        key,
                        generation,
                    } => {
                        let g = state.generations.entry((slicing, key)).or_insert(0);
                        *g = (*g).max(generation);
                    }
                    WalRecord::Remove { id } => {
                        state.remove(id);
                    }
                    WalRecord::Commit { .. } => {}
                }
            }
            state.version = txn.version;
        }
    }
    if let Some(max) = state.messages.keys().next_back() {
        next_id = next_id.max(max + 1);
    }
    Ok((state, next_id, valid_len))
}

fn check_compatibility(dir: &Path, app: &ApplicationDef, state: &State) -> Result<(), StoreError> {
    let Some(manifest) = wal::read_manifest(dir).map_err(corrupt)? else {
        return Ok(());
    };
    for mq in &manifest.queues {
        match app.queue(&mq.name) {
            Some(q) if q.kind != mq.kind || q.mode != mq.mode => {
                return Err(StoreError::IncompatibleApplication(format!(
                    "queue '{}' was deployed as kind {} mode {} but is now kind {} mode {}",
                    mq.name, mq.kind, mq.mode, q.kind, q.mode
                )));
            }
            Some(_) => {}
            None => {
                let held = state.queues.get(&mq.name).map_or(0, |q| q.len());
                if held > 0 {
                    return Err(StoreError::IncompatibleApplication(format!(
                        "queue '{}' was removed but still holds {held} message(s)",
                        mq.name
                    )));
                }
            }
        }
    }
    Ok(())
}

/// An immutable read view of one committed store version.
#[derive(Clone)]
pub struct Snapshot {
    state: Arc<State>,
    catalog: Arc<Catalog>,
}

impl Snapshot {
    pub fn version(&self) -> u64 {
        self.state.version
    }

    pub fn catalog(&self) -> &Arc<Catalog> {
        &self.catalog
    }

    pub fn message(&self, id: MessageId) -> Option<Arc<Message>> {
        self.state.messages.get(&id).cloned()
    }

    pub fn is_processed(&self, id: MessageId) -> bool {
        self.state.processed.contains(&id)
    }

    pub fn message_count(&self) -> usize {
        self.state.messages.len()
    }

    /// All retained messages in global FIFO order.
    pub fn messages(&self) -> Vec<Arc<Message>> {
        let mut all: Vec<Arc<Message>> = self.state.messages.values().cloned().collect();
        all.sort_by_key(|m| m.seq);
        all
    }

    /// Unprocessed messages in global FIFO order.
    pub fn unprocessed(&self) -> Vec<Arc<Message>> {
        let mut v: Vec<Arc<Message>> = self
            .state
            .messages
            .values()
            .filter(|m| !self.state.processed.contains(&m.id))
            .cloned()
            .collect();
        v.sort_by_key(|m| m.seq);
        v
    }

    /// Retained messages of `queue` in enqueue order, processed included.
    pub fn read_queue(&self, queue: &str) -> Result<Vec<Arc<Message>>, StoreError> {
        if self.catalog.queue(queue).is_none() {
            return Err(StoreError::UnknownQueue(queue.to_string()));
        }
        Ok(self
            .state
            .queues
            .get(queue)
            .map(|q| {
                q.values()
                    .filter_map(|id| self.state.messages.get(id).cloned())
                    .collect()
            })
            .unwrap_or_default())
    }

    pub fn slice_key(&self, slicing: &str, key: &Atomic) -> Result<String, StoreError> {
        self.catalog
            .slice_key(slicing, key)
            .ok_or_else(|| StoreError::UnknownSlicing(slicing.to_string()))
    }

    pub fn generation(&self, slicing: &str, key: &Atomic) -> Result<u64, StoreError> {
        let k = self.slice_key(slicing, key)?;
        Ok(self.state.generation(slicing, &k))
    }

    /// Current-lifetime members of a slice in enqueue order.
    pub fn read_slice(&self, slicing: &str, key: &Atomic) -> Result<Vec<Arc<Message>>, StoreError> {
        let k = self.slice_key(slicing, key)?;
        let generation = self.state.generation(slicing, &k);
        let sid = (slicing.to_string(), k);
        Ok(self
            .state
            .slices
            .get(&sid)
            .map(|members| {
                members
                    .values()
                    .filter_map(|id| self.state.messages.get(id))
                    .filter(|m| {
                        m.slice_stamps
                            .get(slicing)
                            .is_some_and(|st| st.generation == generation)
                    })
                    .cloned()
                    .collect()
            })
            .unwrap_or_default())
    }

    /// Whether `m` could be removed by garbage collection in this version.
    pub fn is_removable(&self, m: &Message) -> bool {
        self.state.removable(m)
    }
}

fn dynamic(e: StoreError) -> DynamicError {
    let kind = match e {
        StoreError::UnknownQueue(_) => DynamicErrorKind::UnknownQueue,
        StoreError::UnknownSlicing(_) => DynamicErrorKind::UnknownSlicing,
        _ => DynamicErrorKind::TypeMismatch,
    };
    DynamicError::new(kind, e.to_string())
}

impl StoreView for Snapshot {
    fn queue(&self, queue: &str) -> Result<Vec<NodeRef>, DynamicError> {
        Ok(self
            .read_queue(queue)
            .map_err(dynamic)?
            .iter()
            .map(|m| m.document())
            .collect())
    }

    fn slice(&self, slicing: &str, key: &Atomic) -> Result<Vec<NodeRef>, DynamicError> {
        Ok(self
            .read_slice(slicing, key)
            .map_err(dynamic)?
            .iter()
            .map(|m| m.document())
            .collect())
    }

    fn property_declared(&self, name: &str) -> bool {
        self.catalog.property(name).is_some()
    }
}

/// A [`StoreView`] that records the resources it reads.
pub struct TrackingView<'a> {
    snapshot: &'a Snapshot,
    reads: Mutex<Vec<Resource>>,
}

impl<'a> TrackingView<'a> {
    pub fn new(snapshot: &'a Snapshot) -> Self {
        TrackingView {
            snapshot,
            reads: Mutex::new(Vec::new()),
        }
    }

    pub fn into_reads(self) -> Vec<Resource> {
        self.reads.into_inner().unwrap()
    }
}

impl StoreView for TrackingView<'_> {
    fn queue(&self, queue: &str) -> Result<Vec<NodeRef>, DynamicError> {
        self.reads
            .lock()
            .unwrap()
            .push(Resource::Queue(queue.to_string()));
        self.snapshot.queue(queue)
    }

    fn slice(&self, slicing: &str, key: &Atomic) -> Result<Vec<NodeRef>, DynamicError> {
        let k = self.snapshot.slice_key(slicing, key).map_err(dynamic)?;
        {
            let mut reads = self.reads.lock().unwrap();
            reads.push(Resource::SliceGeneration(slicing.to_string(), k.clone()));
            reads.push(Resource::SliceMembers(slicing.to_string(), k));
        }
        self.snapshot.slice(slicing, key)
    }

    fn property_declared(&self, name: &str) -> bool {
        self.snapshot.property_declared(name)
    }
}
