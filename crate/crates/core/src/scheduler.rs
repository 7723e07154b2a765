//! Dispatches unprocessed messages in priority-then-FIFO order and runs
//! background work (echo ticks, garbage collection) when idle.

use std::cmp::Reverse;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use crossbeam_channel::{unbounded, Receiver, RecvTimeoutError, Sender};

use crate::config::EngineConfig;
use crate::engine::{CompiledPlan, Engine, EngineError, ErrorKind, Evaluation, ProcessingOutcome, RaisedError};
use crate::lang::QueueKind;
use crate::store::{Message, MessageId, Snapshot, Store};
use crate::system::{self, DeliveryPolicy, DeliveryResult, Notify, SyncHub, Transport};

type ReadyKey = (Reverse<u32>, u64);

/// Ready and in-flight message sets.
#[derive(Debug, Default)]
pub struct SchedulerState {
    ready: BTreeMap<ReadyKey, MessageId>,
    keys: HashMap<MessageId, ReadyKey>,
    in_flight: HashSet<MessageId>,
}

impl SchedulerState {
    /// Adds a committed message to the ready set. Idempotent.
    pub fn notify(&mut self, id: MessageId, priority: u32, seq: u64) {
        if self.keys.contains_key(&id) || self.in_flight.contains(&id) {
            return;
        }
        let key = (Reverse(priority), seq);
        self.ready.insert(key, id);
        self.keys.insert(id, key);
    }

    /// Takes the highest-priority, oldest ready message and marks it
    /// in flight.
    pub fn next_message(&mut self) -> Option<MessageId> {
        let (_, id) = self.ready.pop_first()?;
        self.keys.remove(&id);
        self.in_flight.insert(id);
        Some(id)
    }

    /// Returns an in-flight message to the ready set with its original
    /// position.
    pub fn requeue(&mut self, id: MessageId, priority: u32, seq: u64) {
        self.in_flight.remove(&id);
        self.notify(id, priority, seq);
    }

    pub fn complete(&mut self, id: MessageId) {
        self.in_flight.remove(&id);
    }

    pub fn ready_len(&self) -> usize {
        self.ready.len()
    }

    pub fn in_flight_len(&self) -> usize {
        self.in_flight.len()
    }

    pub fn is_idle(&self) -> bool {
        self.ready.is_empty() && self.in_flight.is_empty()
    }
}

#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct RunStats {
    pub processed: usize,
    pub conflicts: usize,
    pub echoes_fired: usize,
    pub collected: usize,
}

enum Event {
    Created(Vec<Arc<Message>>),
    #[cfg_attr(not(feature = "parallel"), allow(dead_code))]
    Done(MessageId, Result<ProcessingOutcome, EngineError>),
}

/// A deployed application ready to process messages.
pub struct Runtime {
    store: Arc<Store>,
    plan: Arc<CompiledPlan>,
    config: EngineConfig,
    transport: Arc<dyn Transport>,
    hub: Arc<SyncHub>,
    sleep: Arc<dyn Fn(Duration) + Send + Sync>,
    events: (Sender<Event>, Receiver<Event>),
    dispatch_log: Mutex<Vec<MessageId>>,
    delivered: Mutex<HashMap<MessageId, DeliveryResult>>,
}

impl Runtime {
    pub fn new(
        store: Arc<Store>,
        plan: Arc<CompiledPlan>,
        config: EngineConfig,
        transport: Arc<dyn Transport>,
    ) -> Runtime {
        Runtime {
            store,
            plan,
            config,
            transport,
            hub: Arc::new(SyncHub::default()),
            sleep: Arc::new(std::thread::sleep),
            events: unbounded(),
            dispatch_log: Mutex::new(Vec::new()),
            delivered: Mutex::new(HashMap::new()),
        }
    }

    /// Replaces the sleep used between delivery attempts.
    pub fn with_sleep(mut self, sleep: Arc<dyn Fn(Duration) + Send + Sync>) -> Runtime {
        self.sleep = sleep;
        self
    }

    pub fn store(&self) -> &Arc<Store> {
        &self.store
    }

    pub fn hub(&self) -> &Arc<SyncHub> {
        &self.hub
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    /// A callback that makes externally committed messages known to a
    /// running scheduler.
    pub fn notifier(&self) -> Notify {
        let tx = self.events.0.clone();
        Arc::new(move |created| {
            let _ = tx.send(Event::Created(created));
        })
    }

    pub fn engine(&self) -> Engine<'_> {
        Engine {
            store: &self.store,
            plan: &self.plan,
            system_errorqueue: self.config.system_error_queue.as_deref(),
            evaluation: if self.config.parallel_rules {
                Evaluation::Parallel
            } else {
                Evaluation::Sequential
            },
        }
    }

    /// Message ids in the order they were handed to processing.
    pub fn dispatch_log(&self) -> Vec<MessageId> {
        self.dispatch_log.lock().unwrap().clone()
    }

    fn priority(&self, m: &Message) -> Option<u32> {
        let q = self.store.catalog().queue(&m.queue)?;
        (q.kind != QueueKind::Echo).then_some(q.priority)
    }

    fn admit(&self, state: &mut SchedulerState, msgs: &[Arc<Message>]) {
        for m in msgs {
            if let Some(p) = self.priority(m) {
                state.notify(m.id, p, m.seq);
            }
        }
    }

    fn seed(&self, state: &mut SchedulerState, snap: &Snapshot) {
        self.admit(state, &snap.unprocessed());
    }

    /// Processes one message, delivering it first if it sits in an
    /// outgoing gateway queue.
    pub fn process_one(&self, id: MessageId) -> Result<ProcessingOutcome, EngineError> {
        let engine = self.engine();
        let snap = self.store.snapshot();
        let msg = snap.message(id).ok_or(EngineError::NotFound(id))?;
        let outgoing = snap
            .catalog()
            .queue(&msg.queue)
            .is_some_and(|q| q.kind == QueueKind::OutgoingGateway);
        let mut pre = Vec::new();
        if outgoing && !snap.is_processed(id) {
            let cached = self.delivered.lock().unwrap().get(&id).cloned();
            let result = cached.unwrap_or_else(|| {
                let policy = DeliveryPolicy {
                    attempts: self.config.delivery_attempts,
                    backoff: self.config.delivery_backoff,
                };
                let r = system::deliver_outgoing(
                    &self.store,
                    &msg,
                    self.transport.as_ref(),
                    &self.hub,
                    &policy,
                    self.sleep.as_ref(),
                );
                self.delivered.lock().unwrap().insert(id, r.clone());
                r
            });
            if let DeliveryResult::Failed(description) = result {
                pre.push(RaisedError {
                    kind: ErrorKind::DisconnectedTransport,
                    rule: msg.creating_rule.clone(),
                    description,
                });
            }
        }
        let r = engine.process_message_with(id, pre);
        if r.is_ok() {
            self.delivered.lock().unwrap().remove(&id);
        }
        r
    }

    /// Fires due echo messages at the store clock's current time.
    pub fn echo_tick(&self) -> Result<Vec<Arc<Message>>, EngineError> {
        system::echo_tick(&self.engine(), self.store.clock().now())
    }

    /// Handles one finished message. Returns a fatal error if processing
    /// must stop.
    fn finish(
        &self,
        state: &mut SchedulerState,
        stats: &mut RunStats,
        retries: &mut HashMap<MessageId, u32>,
        id: MessageId,
        result: Result<ProcessingOutcome, EngineError>,
    ) -> Result<(), EngineError> {
        match result {
            Ok(outcome) => {
                state.complete(id);
                retries.remove(&id);
                stats.processed += 1;
                self.admit(state, &outcome.created);
                Ok(())
            }
            Err(e) if e.is_conflict() => {
                stats.conflicts += 1;
                let n = retries.entry(id).or_insert(0);
                *n += 1;
                if *n > self.config.retry_limit {
                    retries.remove(&id);
                    state.complete(id);
                    let err = RaisedError {
                        kind: ErrorKind::SystemError,
                        rule: None,
                        description: format!(
                            "processing aborted after {} conflicting attempts",
                            self.config.retry_limit + 1
                        ),
                    };
                    let out = self.engine().fail_message(id, err)?;
                    self.admit(state, &out.created);
                    return Ok(());
                }
                match self.store.snapshot().message(id) {
                    Some(m) => {
                        let p = self.priority(&m).unwrap_or(0);
                        state.requeue(id, p, m.seq);
                    }
                    None => state.complete(id),
                }
                Ok(())
            }
            Err(EngineError::NotFound(_) | EngineError::AlreadyProcessed(_)) => {
                state.complete(id);
                Ok(())
            }
            Err(e) => {
                state.complete(id);
                Err(e)
            }
        }
    }

    /// Idle work. Returns true if it produced new messages.
    fn idle(&self, state: &mut SchedulerState, stats: &mut RunStats, gc: bool) -> Result<bool, EngineError> {
        let fired = self.echo_tick()?;
        stats.echoes_fired += fired.len();
        self.admit(state, &fired);
        self.seed(state, &self.store.snapshot());
        if state.ready_len() > 0 {
            return Ok(true);
        }
        if gc {
            stats.collected += self.store.garbage_collect()?;
        }
        Ok(false)
    }

    /// Processes until no message is ready and no echo is due.
    pub fn run_until_idle(&self) -> Result<RunStats, EngineError> {
        self.drive(None)
    }

    /// Processes until `shutdown` is set, polling when idle.
    pub fn run(&self, shutdown: &AtomicBool) -> Result<RunStats, EngineError> {
        self.drive(Some(shutdown))
    }

    fn drive(&self, shutdown: Option<&AtomicBool>) -> Result<RunStats, EngineError> {
        let mut state = SchedulerState::default();
        let mut stats = RunStats::default();
        self.seed(&mut state, &self.store.snapshot());
        self.drive_with(&mut state, &mut stats, shutdown)?;
        Ok(stats)
    }

    #[cfg(not(feature = "parallel"))]
    fn drive_with(
        &self,
        state: &mut SchedulerState,
        stats: &mut RunStats,
        shutdown: Option<&AtomicBool>,
    ) -> Result<(), EngineError> {
        let mut retries = HashMap::new();
        let mut gc_pending = self.config.gc_on_idle;
        loop {
            if shutdown.is_some_and(|s| s.load(Ordering::SeqCst)) {
                return Ok(());
            }
            self.drain_events(state, stats, &mut retries)?;
            if let Some(id) = state.next_message() {
                gc_pending = self.config.gc_on_idle;
                self.dispatch_log.lock().unwrap().push(id);
                let r = self.process_one(id);
                self.finish(state, stats, &mut retries, id, r)?;
                continue;
            }
            if self.idle(state, stats, gc_pending)? {
                continue;
            }
            gc_pending = false;
            match shutdown {
                None => return Ok(()),
                Some(_) => self.wait_event(state, stats, &mut retries)?,
            }
        }
    }

    #[cfg(feature = "parallel")]
    fn drive_with(
        &self,
        state: &mut SchedulerState,
        stats: &mut RunStats,
        shutdown: Option<&AtomicBool>,
    ) -> Result<(), EngineError> {
        let workers = self.config.workers.max(1);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| EngineError::Fatal(format!("cannot start workers: {e}")))?;
        let mut retries = HashMap::new();
        let mut gc_pending = self.config.gc_on_idle;
        let mut fatal = None;
        pool.in_place_scope(|scope| {
            loop {
                let stopping = fatal.is_some() || shutdown.is_some_and(|s| s.load(Ordering::SeqCst));
                if stopping {
                    // Let in-flight transactions finish before returning.
                    while state.in_flight_len() > 0 {
                        match self.events.1.recv() {
                            Ok(Event::Done(id, r)) => {
                                if let Err(e) = self.finish(state, stats, &mut retries, id, r) {
                                    fatal.get_or_insert(e);
                                }
                            }
                            Ok(Event::Created(_)) => {}
                            Err(_) => break,
                        }
                    }
                    return;
                }
                if let Err(e) = self.drain_events(state, stats, &mut retries) {
                    fatal = Some(e);
                    continue;
                }
                let mut dispatched = false;
                while state.in_flight_len() < workers {
                    let Some(id) = state.next_message() else { break };
                    dispatched = true;
                    gc_pending = self.config.gc_on_idle;
                    self.dispatch_log.lock().unwrap().push(id);
                    let tx = self.events.0.clone();
                    scope.spawn(move |_| {
                        let r = self.process_one(id);
                        let _ = tx.send(Event::Done(id, r));
                    });
                }
                if state.in_flight_len() > 0 {
                    match self.events.1.recv() {
                        Ok(ev) => {
                            if let Err(e) = self.handle(state, stats, &mut retries, ev) {
                                fatal = Some(e);
                            }
                        }
                        Err(_) => return,
                    }
                    continue;
                }
                if dispatched {
                    continue;
                }
                match self.idle(state, stats, gc_pending) {
                    Ok(true) => continue,
                    Ok(false) => {}
                    Err(e) => {
                        fatal = Some(e);
                        continue;
                    }
                }
                gc_pending = false;
                match shutdown {
                    None => return,
                    Some(_) => {
                        if let Err(e) = self.wait_event(state, stats, &mut retries) {
                            fatal = Some(e);
                        }
                    }
                }
            }
        });
        match fatal {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    fn handle(
        &self,
        state: &mut SchedulerState,
        stats: &mut RunStats,
        retries: &mut HashMap<MessageId, u32>,
        ev: Event,
    ) -> Result<(), EngineError> {
        match ev {
            Event::Created(msgs) => {
                self.admit(state, &msgs);
                Ok(())
            }
            Event::Done(id, r) => self.finish(state, stats, retries, id, r),
        }
    }

    fn drain_events(
        &self,
        state: &mut SchedulerState,
        stats: &mut RunStats,
        retries: &mut HashMap<MessageId, u32>,
    ) -> Result<(), EngineError> {
        while let Ok(ev) = self.events.1.try_recv() {
            self.handle(state, stats, retries, ev)?;
        }
        Ok(())
    }

    fn wait_event(
        &self,
        state: &mut SchedulerState,
        stats: &mut RunStats,
        retries: &mut HashMap<MessageId, u32>,
    ) -> Result<(), EngineError> {
        match self.events.1.recv_timeout(self.config.idle_poll) {
            Ok(ev) => self.handle(state, stats, retries, ev),
            Err(RecvTimeoutError::Timeout | RecvTimeoutError::Disconnected) => Ok(()),
        }
    }
}
