#![allow(dead_code)]

pub mod oracle;

use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use qflow::clock::ManualClock;
use qflow::config::EngineConfig;
use qflow::engine::{compile_ruleset, CompiledPlan};
use qflow::expr::{evaluate, Atomic, DynamicError, DynamicErrorKind, EvalContext, RuleTarget, StoreView, Value};
use qflow::lang::{parse_application, ApplicationDef};
use qflow::scheduler::Runtime;
use qflow::store::{EnqueueRequest, Message, Store, StoreOptions};
use qflow::system::{Transport, TransportError};
use qflow::xml::{parse_document, NodeRef, Tree};

pub const PROCUREMENT: &str = include_str!("../../../../apps/procurement.dq");

pub fn app(text: &str) -> ApplicationDef {
    parse_application(text).unwrap_or_else(|e| panic!("{e}"))
}

pub fn body(xml: &str) -> Arc<Tree> {
    parse_document(xml).unwrap_or_else(|e| panic!("{e}: {xml}"))
}

/// Records every POST and answers with a fixed outcome.
#[derive(Default)]
pub struct MockTransport {
    pub sent: Mutex<Vec<(String, String, Option<String>)>>,
    pub fail: bool,
}

impl MockTransport {
    pub fn failing() -> Self {
        MockTransport {
            fail: true,
            ..Default::default()
        }
    }
}

impl Transport for MockTransport {
    fn post(&self, endpoint: &str, body: &str, sender: Option<&str>) -> Result<(), TransportError> {
        self.sent
            .lock()
            .unwrap()
            .push((endpoint.into(), body.into(), sender.map(str::to_string)));
        if self.fail {
            Err(TransportError::Network("connection refused".into()))
        } else {
            Ok(())
        }
    }
}

pub struct Harness {
    pub clock: Arc<ManualClock>,
    pub store: Arc<Store>,
    pub plan: Arc<CompiledPlan>,
    pub runtime: Runtime,
}

pub fn config(system_errorqueue: Option<&str>) -> EngineConfig {
    EngineConfig {
        system_error_queue: system_errorqueue.map(str::to_string),
        delivery_backoff: Duration::from_millis(1),
        gc_on_idle: false,
        ..EngineConfig::default()
    }
}

pub fn harness_with(
    dir: &Path,
    text: &str,
    cfg: EngineConfig,
    transport: Arc<dyn Transport>,
    clock: Arc<ManualClock>,
    crash_after_bytes: Option<u64>,
) -> Harness {
    let app = app(text);
    let plan = Arc::new(compile_ruleset(&app).unwrap_or_else(|e| panic!("{e}")));
    let store = Arc::new(
        Store::open(
            dir,
            &app,
            StoreOptions {
                clock: clock.clone(),
                sync: false,
                crash_after_bytes,
                ..StoreOptions::default()
            },
        )
        .unwrap(),
    );
    let runtime = Runtime::new(store.clone(), plan.clone(), cfg, transport)
        .with_sleep(Arc::new(|_| {}));
    Harness {
        clock,
        store,
        plan,
        runtime,
    }
}

pub fn harness(dir: &Path, text: &str, transport: Arc<dyn Transport>) -> Harness {
    harness_with(
        dir,
        text,
        config(Some("systemErrors")),
        transport,
        Arc::new(ManualClock::default()),
        None,
    )
}

impl Harness {
    pub fn inject(&self, queue: &str, xml: &str) -> u64 {
        let mut t = self.store.begin();
        let id = t.enqueue(EnqueueRequest::new(queue, body(xml))).unwrap();
        t.commit().unwrap();
        id
    }

    pub fn queue(&self, name: &str) -> Vec<Arc<Message>> {
        self.store.snapshot().read_queue(name).unwrap()
    }

    pub fn unprocessed_in(&self, name: &str) -> Vec<Arc<Message>> {
        let snap = self.store.snapshot();
        snap.read_queue(name)
            .unwrap()
            .into_iter()
            .filter(|m| !snap.is_processed(m.id))
            .collect()
    }
}

pub struct NoStore;

impl StoreView for NoStore {
    fn queue(&self, q: &str) -> Result<Vec<NodeRef>, DynamicError> {
        Err(DynamicError::new(DynamicErrorKind::UnknownQueue, q))
    }

    fn slice(&self, s: &str, _: &Atomic) -> Result<Vec<NodeRef>, DynamicError> {
        Err(DynamicError::new(DynamicErrorKind::UnknownSlicing, s))
    }

    fn property_declared(&self, _: &str) -> bool {
        false
    }
}

/// Evaluates a path expression against a message body.
pub fn query(doc: &Arc<Tree>, expr: &str) -> Value {
    let e = qflow::expr::parse_expression(expr).unwrap();
    let props = Default::default();
    let store = NoStore;
    let ctx = EvalContext {
        document: doc.root(),
        queue: "",
        properties: &props,
        store: &store,
        target: RuleTarget::None,
        clock: chrono::Utc::now(),
        variables: Vec::new(),
    };
    evaluate(&e, &ctx).unwrap().0
}
