//! Gateway and echo queues.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use chrono::{DateTime, TimeDelta, Utc};
use crossbeam_channel::{bounded, Receiver, Sender};
use thiserror::Error;

use crate::engine::{Engine, EngineError, ErrorKind, RaisedError};
use crate::expr::Atomic;
use crate::lang::QueueKind;
use crate::store::{EnqueueRequest, Message, Store, StoreError};
use crate::sysprops;
use crate::xml::parse_document;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransportError {
    #[error("endpoint answered with status {0}")]
    Status(u16),
    #[error("{0}")]
    Network(String),
}

/// Sends a message body to a remote endpoint.
pub trait Transport: Send + Sync {
    fn post(&self, endpoint: &str, body: &str, sender: Option<&str>) -> Result<(), TransportError>;
}

/// Plain HTTP/1.1 POST with `Content-Type: application/xml`.
pub struct HttpTransport {
    agent: ureq::Agent,
}

impl HttpTransport {
    pub fn new(timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .new_agent();
        HttpTransport { agent }
    }
}

impl Default for HttpTransport {
    fn default() -> Self {
        HttpTransport::new(Duration::from_secs(10))
    }
}

impl Transport for HttpTransport {
    fn post(&self, endpoint: &str, body: &str, sender: Option<&str>) -> Result<(), TransportError> {
        let mut req = self
            .agent
            .post(endpoint)
            .header("Content-Type", "application/xml");
        if let Some(s) = sender {
            req = req.header("X-Demaq-Sender", s);
        }
        match req.send(body) {
            Ok(_) => Ok(()),
            Err(ureq::Error::StatusCode(code)) => Err(TransportError::Status(code)),
            Err(e) => Err(TransportError::Network(e.to_string())),
        }
    }
}

/// Held synchronous HTTP connections, keyed by ConnectionId.
#[derive(Default)]
pub struct SyncHub {
    waiting: Mutex<HashMap<String, Sender<String>>>,
}

impl SyncHub {
    pub fn register(&self, connection: &str) -> Receiver<String> {
        let (tx, rx) = bounded(1);
        self.waiting.lock().unwrap().insert(connection.to_string(), tx);
        rx
    }

    pub fn unregister(&self, connection: &str) {
        self.waiting.lock().unwrap().remove(connection);
    }

    pub fn is_waiting(&self, connection: &str) -> bool {
        self.waiting.lock().unwrap().contains_key(connection)
    }

    /// Hands `body` to the held connection; false if none is waiting.
    pub fn reply(&self, connection: &str, body: String) -> bool {
        match self.waiting.lock().unwrap().remove(connection) {
            Some(tx) => tx.send(body).is_ok(),
            None => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DeliveryResult {
    Delivered,
    /// Written back to a held synchronous connection.
    Replied,
    Failed(String),
}

pub struct DeliveryPolicy {
    pub attempts: u32,
    pub backoff: Duration,
}

/// Delivers an outgoing gateway message. Never fails: problems are
/// reported as [`DeliveryResult::Failed`].
pub fn deliver_outgoing(
    store: &Store,
    msg: &Message,
    transport: &dyn Transport,
    hub: &SyncHub,
    policy: &DeliveryPolicy,
    sleep: &dyn Fn(Duration),
) -> DeliveryResult {
    let body = msg.document().to_xml();
    if let Some(Atomic::Str(conn)) = msg.prop(sysprops::CONNECTION_ID) {
        if hub.reply(conn, body.clone()) {
            return DeliveryResult::Replied;
        }
    }
    let endpoint = store
        .catalog()
        .queue(&msg.queue)
        .and_then(|q| q.endpoint.clone())
        .or_else(|| msg.prop(sysprops::RECIPIENT).map(Atomic::lexical));
    let Some(endpoint) = endpoint else {
        return DeliveryResult::Failed(format!("queue '{}' has no endpoint and the message no Recipient", msg.queue));
    };
    let sender = msg.prop(sysprops::SENDER).map(Atomic::lexical);
    let mut delay = policy.backoff;
    let mut last = String::new();
    for attempt in 1..=policy.attempts.max(1) {
        match transport.post(&endpoint, &body, sender.as_deref()) {
            Ok(()) => return DeliveryResult::Delivered,
            Err(e) => {
                log::warn!("delivery of message {} to {endpoint} failed (attempt {attempt}): {e}", msg.id);
                last = e.to_string();
            }
        }
        if attempt < policy.attempts {
            sleep(delay);
            delay *= 2;
        }
    }
    DeliveryResult::Failed(format!(
        "delivery to {endpoint} failed after {} attempts: {last}",
        policy.attempts.max(1)
    ))
}

fn echo_settings(msg: &Message) -> Result<(String, i64), String> {
    let target = match msg.prop(sysprops::ECHO_TARGET) {
        Some(t) => t.lexical(),
        None => return Err("echo message has no EchoTarget".into()),
    };
    let delay = match msg.prop(sysprops::ECHO_DELAY) {
        Some(Atomic::Int(d)) if *d >= 0 => *d,
        Some(other) => return Err(format!("invalid EchoDelay '{}'", other.lexical())),
        None => return Err("echo message has no EchoDelay".into()),
    };
    Ok((target, delay))
}

/// Fires every due echo message: its body is copied into EchoTarget and
/// the echo message is marked processed, one transaction per firing.
/// Returns the messages created.
pub fn echo_tick(engine: &Engine<'_>, now: DateTime<Utc>) -> Result<Vec<Arc<Message>>, EngineError> {
    let snap = engine.store.snapshot();
    let mut created = Vec::new();
    for msg in snap.unprocessed() {
        let is_echo = snap
            .catalog()
            .queue(&msg.queue)
            .is_some_and(|q| q.kind == QueueKind::Echo);
        if !is_echo {
            continue;
        }
        let result = match echo_settings(&msg) {
            Err(description) => engine
                .fail_message(
                    msg.id,
                    RaisedError {
                        kind: ErrorKind::ConfigurationError,
                        rule: msg.creating_rule.clone(),
                        description,
                    },
                )
                .map(|o| o.created),
            Ok((target, delay)) => {
                if msg.created_at + TimeDelta::seconds(delay) > now {
                    continue;
                }
                fire(engine, &msg, &target)
            }
        };
        match result {
            Ok(c) => created.extend(c),
            Err(e) if e.is_conflict() => {}
            Err(EngineError::AlreadyProcessed(_) | EngineError::NotFound(_)) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(created)
}

fn fire(engine: &Engine<'_>, msg: &Arc<Message>, target: &str) -> Result<Vec<Arc<Message>>, EngineError> {
    let mut txn = engine.store.begin();
    if txn.snapshot().is_processed(msg.id) {
        return Err(EngineError::AlreadyProcessed(msg.id));
    }
    let req = EnqueueRequest::new(target, msg.body.clone()).trigger(msg.clone());
    if let Err(e) = txn.enqueue(req) {
        let sp_err = RaisedError {
            kind: ErrorKind::ConfigurationError,
            rule: msg.creating_rule.clone(),
            description: format!("echo into '{target}' failed: {e}"),
        };
        txn.abort();
        return engine.fail_message(msg.id, sp_err).map(|o| o.created);
    }
    txn.mark_processed(msg.id)?;
    Ok(txn.commit()?.created)
}

/// Callback informing the scheduler about messages committed outside it.
pub type Notify = Arc<dyn Fn(Vec<Arc<Message>>) + Send + Sync>;

pub struct GatewayContext {
    pub store: Arc<Store>,
    pub hub: Arc<SyncHub>,
    pub system_errorqueue: Option<String>,
    pub sync_timeout: Duration,
    pub notify: Notify,
    last_arrival: Mutex<HashMap<String, DateTime<Utc>>>,
}

/// Outcome of one inbound request, independent of the HTTP library.
#[derive(Debug, Clone, PartialEq)]
pub struct GatewayResponse {
    pub status: u16,
    pub body: String,
}

impl GatewayContext {
    pub fn new(
        store: Arc<Store>,
        hub: Arc<SyncHub>,
        system_errorqueue: Option<String>,
        sync_timeout: Duration,
        notify: Notify,
    ) -> Self {
        GatewayContext {
            store,
            hub,
            system_errorqueue,
            sync_timeout,
            notify,
            last_arrival: Mutex::new(HashMap::new()),
        }
    }

    /// Strictly increasing per queue, even when the clock is not.
    fn arrival_time(&self, queue: &str) -> DateTime<Utc> {
        let mut last = self.last_arrival.lock().unwrap();
        let now = self.store.clock().now();
        let t = match last.get(queue) {
            Some(prev) if *prev >= now => *prev + TimeDelta::microseconds(1),
            _ => now,
        };
        last.insert(queue.to_string(), t);
        t
    }

    fn commit_with_retry<T>(
        &self,
        mut f: impl FnMut(&mut crate::store::Txn<'_>) -> Result<T, StoreError>,
    ) -> Result<(T, Vec<Arc<Message>>), StoreError> {
        loop {
            let mut txn = self.store.begin();
            let v = f(&mut txn)?;
            match txn.commit() {
                Ok(info) => return Ok((v, info.created)),
                Err(StoreError::ConflictAbort) => continue,
                Err(e) => return Err(e),
            }
        }
    }

    /// Accepts one inbound message for `queue`.
    pub fn accept_incoming(
        &self,
        queue: &str,
        body: &str,
        sync: bool,
        sender: String,
    ) -> GatewayResponse {
        let resp = |status: u16, body: String| GatewayResponse { status, body };
        let desc = match self.store.catalog().queue(queue) {
            Some(q) if q.kind == QueueKind::IncomingGateway => q.clone(),
            _ => return resp(404, format!("no incoming gateway queue '{queue}'\n")),
        };
        let tree = match parse_document(body) {
            Ok(t) => t,
            Err(e) => {
                self.reject(queue, desc.errorqueue.as_deref(), body, &e.to_string());
                return resp(400, format!("malformed XML: {e}\n"));
            }
        };
        let arrival = self.arrival_time(queue);
        let connection = sync.then(|| uuid::Uuid::new_v4().to_string());
        let waiter = connection.as_deref().map(|c| self.hub.register(c));
        let result = self.commit_with_retry(|txn| {
            let mut req = EnqueueRequest::new(queue, tree.clone())
                .system(sysprops::SENDER, Atomic::Str(sender.clone()))
                .system(sysprops::ARRIVAL_TIME, Atomic::DateTime(arrival));
            if let Some(c) = &connection {
                req = req.system(sysprops::CONNECTION_ID, Atomic::Str(c.clone()));
            }
            txn.enqueue(req)
        });
        let id = match result {
            Ok((id, created)) => {
                (self.notify)(created);
                id
            }
            Err(e) => {
                if let Some(c) = &connection {
                    self.hub.unregister(c);
                }
                return resp(500, format!("{e}\n"));
            }
        };
        match (connection, waiter) {
            (Some(c), Some(rx)) => {
                let reply = rx.recv_timeout(self.sync_timeout);
                self.hub.unregister(&c);
                match reply {
                    Ok(body) => resp(200, body),
                    Err(_) => resp(504, format!("no reply for message {id}\n")),
                }
            }
            _ => resp(202, format!("{id}\n")),
        }
    }

    fn reject(&self, queue: &str, queue_errorqueue: Option<&str>, body: &str, detail: &str) {
        let Some(target) = queue_errorqueue.or(self.system_errorqueue.as_deref()) else {
            log::warn!("malformed message for '{queue}' dropped: no error queue");
            return;
        };
        let mut original = crate::xml::TreeBuilder::document();
        original.text(body);
        let original = original.finish();
        let error = crate::engine::build_error_message(
            ErrorKind::SchemaError,
            None,
            queue,
            self.store.clock().now(),
            detail,
            Some(&original.root()),
        );
        let r = self.commit_with_retry(|txn| txn.enqueue(EnqueueRequest::new(target, error.clone())));
        match r {
            Ok((_, created)) => (self.notify)(created),
            Err(e) => log::error!("cannot record schema error in '{target}': {e}"),
        }
    }
}

fn route(url: &str) -> Option<(String, bool)> {
    let (path, query) = url.split_once('?').unwrap_or((url, ""));
    let queue = path.strip_prefix("/queues/")?;
    if queue.is_empty() || queue.contains('/') {
        return None;
    }
    let sync = query
        .split('&')
        .any(|kv| kv == "sync=true" || kv == "sync=1");
    Some((queue.to_string(), sync))
}

/// A running HTTP listener for incoming gateway queues.
pub struct HttpGateway {
    pub addr: SocketAddr,
    stop: Arc<AtomicBool>,
    handle: Option<thread::JoinHandle<()>>,
}

impl HttpGateway {
    pub fn start(listen: &str, ctx: Arc<GatewayContext>) -> std::io::Result<HttpGateway> {
        let server = tiny_http::Server::http(listen).map_err(|e| std::io::Error::other(e.to_string()))?;
        let addr = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| std::io::Error::other("listener has no IP address"))?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let handle = thread::spawn(move || {
            while !flag.load(Ordering::SeqCst) {
                match server.recv_timeout(Duration::from_millis(50)) {
                    Ok(Some(req)) => {
                        let ctx = ctx.clone();
                        thread::spawn(move || handle_request(&ctx, req));
                    }
                    Ok(None) => {}
                    Err(e) => {
                        log::error!("http listener failed: {e}");
                        break;
                    }
                }
            }
        });
        Ok(HttpGateway {
            addr,
            stop,
            handle: Some(handle),
        })
    }

    pub fn stop(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

impl Drop for HttpGateway {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn handle_request(ctx: &GatewayContext, mut req: tiny_http::Request) {
    let respond = |req: tiny_http::Request, r: GatewayResponse| {
        let header = tiny_http::Header::from_bytes(&b"Content-Type"[..], &b"application/xml"[..]).unwrap();
        let _ = req.respond(
            tiny_http::Response::from_string(r.body)
                .with_status_code(r.status)
                .with_header(header),
        );
    };
    let Some((queue, sync)) = route(req.url()) else {
        return respond(req, GatewayResponse { status: 404, body: "not found\n".into() });
    };
    if *req.method() != tiny_http::Method::Post {
        return respond(req, GatewayResponse { status: 405, body: "use POST\n".into() });
    }
    let sender = req
        .headers()
        .iter()
        .find(|h| h.field.equiv("X-Demaq-Sender"))
        .map(|h| h.value.as_str().to_string())
        .or_else(|| req.remote_addr().map(|a| a.to_string()))
        .unwrap_or_default();
    let mut body = String::new();
    if req.as_reader().read_to_string(&mut body).is_err() {
        return respond(req, GatewayResponse { status: 400, body: "body is not UTF-8\n".into() });
    }
    let r = ctx.accept_incoming(&queue, &body, sync, sender);
    respond(req, r);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn routes() {
        assert_eq!(route("/queues/crm"), Some(("crm".into(), false)));
        assert_eq!(route("/queues/crm?sync=true"), Some(("crm".into(), true)));
        assert_eq!(route("/queues/"), None);
        assert_eq!(route("/other/crm"), None);
    }

    #[test]
    fn hub_replies_once() {
        let hub = SyncHub::default();
        let rx = hub.register("c");
        assert!(hub.reply("c", "<r/>".into()));
        assert!(!hub.reply("c", "<r/>".into()));
        assert_eq!(rx.recv().unwrap(), "<r/>");
    }
}
