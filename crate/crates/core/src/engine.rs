//! Rule compilation and per-message processing.
//!
//! All rules that pertain to a message's queue are evaluated against one
//! snapshot. Their pending updates are then applied in rule order, the
//! message is marked processed, and everything commits as one transaction.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use chrono::{DateTime, SecondsFormat, Utc};
use thiserror::Error;

use crate::expr::{evaluate, Atomic, DynamicError, EvalContext, Expr, PendingUpdate, RuleTarget};
use crate::lang::{validate_application, ApplicationDef, TargetKind, ValidationReport};
use crate::store::{Catalog, EnqueueRequest, Message, MessageId, Resource, Store, StoreError, TrackingView, Txn};
use crate::xml::{NodeRef, Tree, TreeBuilder};

#[derive(Debug, Clone, PartialEq)]
pub enum RuleOrigin {
    Queue,
    Slicing { slicing: String, property: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompiledRule {
    pub name: String,
    pub body: Expr,
    pub origin: RuleOrigin,
    pub errorqueue: Option<String>,
}

/// Per-queue rule lists, in application declaration order.
#[derive(Debug, Clone)]
pub struct CompiledPlan {
    catalog: Arc<Catalog>,
    rules: HashMap<String, Vec<Arc<CompiledRule>>>,
}

#[derive(Debug, Error)]
#[error("application is invalid:\n{0}")]
pub struct CompileError(pub ValidationReport);

impl CompiledPlan {
    pub fn catalog(&self) -> &Arc<Catalog> {
        &self.catalog
    }

    pub fn rules_for(&self, queue: &str) -> &[Arc<CompiledRule>] {
        self.rules.get(queue).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn rule(&self, name: &str) -> Option<&Arc<CompiledRule>> {
        self.rules.values().flatten().find(|r| r.name == name)
    }
}

fn bind_current_queue(body: &Expr, queue: &str) -> Expr {
    body.clone().rewrite(&mut |e| match e {
        Expr::Call { name, args }
            if args.is_empty() && name.strip_prefix("fn:").unwrap_or(&name) == "qs:queue" =>
        {
            Expr::Call {
                name,
                args: vec![Expr::Literal(Atomic::Str(queue.to_string()))],
            }
        }
        other => other,
    })
}

/// Validates `app` and builds its execution plan.
pub fn compile_ruleset(app: &ApplicationDef) -> Result<CompiledPlan, CompileError> {
    let report = validate_application(app);
    if !report.is_empty() {
        return Err(CompileError(report));
    }
    let catalog = Arc::new(Catalog::new(app.clone()));
    let mut rules: HashMap<String, Vec<Arc<CompiledRule>>> = HashMap::new();
    for q in &app.queues {
        let list = rules.entry(q.name.clone()).or_default();
        for r in &app.rules {
            let compiled = match r.target_kind {
                TargetKind::Queue if r.target == q.name => CompiledRule {
                    name: r.name.clone(),
                    body: bind_current_queue(&r.body, &q.name),
                    origin: RuleOrigin::Queue,
                    errorqueue: r.errorqueue.clone(),
                },
                TargetKind::Slicing => {
                    let Some(s) = app.slicing(&r.target) else { continue };
                    let covers = app
                        .property(&s.property)
                        .is_some_and(|p| p.clause_for(&q.name).is_some());
                    if !covers {
                        continue;
                    }
                    CompiledRule {
                        name: r.name.clone(),
                        body: r.body.clone(),
                        origin: RuleOrigin::Slicing {
                            slicing: s.name.clone(),
                            property: s.property.clone(),
                        },
                        errorqueue: r.errorqueue.clone(),
                    }
                }
                _ => continue,
            };
            list.push(Arc::new(compiled));
        }
    }
    Ok(CompiledPlan { catalog, rules })
}

/// Kind element of an error message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ErrorKind {
    DisconnectedTransport,
    ExpressionError,
    SchemaError,
    PropertyError,
    SystemError,
    ConfigurationError,
}

impl ErrorKind {
    pub fn element_name(self) -> &'static str {
        match self {
            ErrorKind::DisconnectedTransport => "disconnectedTransport",
            ErrorKind::ExpressionError => "expressionError",
            ErrorKind::SchemaError => "schemaError",
            ErrorKind::PropertyError => "propertyError",
            ErrorKind::SystemError => "systemError",
            ErrorKind::ConfigurationError => "configurationError",
        }
    }
}

impl fmt::Display for ErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.element_name())
    }
}

/// First defined of rule, queue and system error queue.
pub fn resolve_errorqueue(
    rule_errorqueue: Option<&str>,
    queue_errorqueue: Option<&str>,
    system_errorqueue: Option<&str>,
) -> Option<String> {
    rule_errorqueue
        .or(queue_errorqueue)
        .or(system_errorqueue)
        .map(str::to_string)
}

/// Builds the error document:
///
/// ```text
/// <error><KIND/><ruleName/><queueName/><timestamp/><description/>
///   <initialMessage>copy of the original body</initialMessage></error>
/// ```
pub fn build_error_message(
    kind: ErrorKind,
    rule: Option<&str>,
    queue: &str,
    timestamp: DateTime<Utc>,
    description: &str,
    original: Option<&NodeRef>,
) -> Arc<Tree> {
    let mut b = TreeBuilder::document();
    b.start_element("error");
    b.start_element(kind.element_name());
    b.end_element();
    let leaf = |b: &mut TreeBuilder, name: &str, text: &str| {
        b.start_element(name);
        if !text.is_empty() {
            b.text(text);
        }
        b.end_element();
    };
    leaf(&mut b, "ruleName", rule.unwrap_or(""));
    leaf(&mut b, "queueName", queue);
    leaf(
        &mut b,
        "timestamp",
        &timestamp.to_rfc3339_opts(SecondsFormat::AutoSi, true),
    );
    leaf(&mut b, "description", description);
    b.start_element("initialMessage");
    if let Some(node) = original {
        b.copy_node(node);
    }
    b.end_element();
    b.end_element();
    b.finish()
}

/// An error to be turned into an error message while processing.
#[derive(Debug, Clone, PartialEq)]
pub struct RaisedError {
    pub kind: ErrorKind,
    /// Rule whose error queue is consulted first.
    pub rule: Option<String>,
    pub description: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProcessingStatus {
    Completed,
    Failed,
}

#[derive(Debug, Clone)]
pub struct ProcessingOutcome {
    pub message_id: MessageId,
    pub status: ProcessingStatus,
    pub updates_applied: usize,
    pub errors_raised: Vec<(Option<String>, ErrorKind)>,
    /// Messages created by the committed transaction.
    pub created: Vec<Arc<Message>>,
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("message {0} not found")]
    NotFound(MessageId),
    #[error("message {0} is already processed")]
    AlreadyProcessed(MessageId),
    #[error("fatal: {0}")]
    Fatal(String),
}

impl EngineError {
    pub fn is_conflict(&self) -> bool {
        matches!(self, EngineError::Store(StoreError::ConflictAbort))
    }
}

/// Evaluation result of one rule against the snapshot.
struct RuleResult {
    reads: Vec<Resource>,
    outcome: Result<Vec<PendingUpdate>, DynamicError>,
}

fn evaluate_rule(
    rule: &CompiledRule,
    msg: &Message,
    snapshot: &crate::store::Snapshot,
    now: DateTime<Utc>,
) -> Option<RuleResult> {
    let target = match &rule.origin {
        RuleOrigin::Queue => RuleTarget::Queue(msg.queue.clone()),
        RuleOrigin::Slicing { slicing, property } => RuleTarget::Slicing {
            name: slicing.clone(),
            key: msg.prop(property)?.clone(),
        },
    };
    let view = TrackingView::new(snapshot);
    let ctx = EvalContext {
        document: msg.document(),
        queue: &msg.queue,
        properties: &msg.props,
        store: &view,
        target,
        clock: now,
        variables: Vec::new(),
    };
    let outcome = evaluate(&rule.body, &ctx).map(|(_, updates)| updates);
    Some(RuleResult {
        reads: view.into_reads(),
        outcome,
    })
}

/// How the rules for one message are evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Evaluation {
    /// One rule after another on the calling thread.
    Sequential,
    /// Rules spread over the rayon pool. Same as `Sequential` when the
    /// `parallel` feature is off.
    #[default]
    Parallel,
}

fn evaluate_all(
    rules: &[Arc<CompiledRule>],
    msg: &Message,
    snapshot: &crate::store::Snapshot,
    now: DateTime<Utc>,
    mode: Evaluation,
) -> Vec<Option<RuleResult>> {
    #[cfg(feature = "parallel")]
    if mode == Evaluation::Parallel && rules.len() > 1 {
        use rayon::prelude::*;
        return rules
            .par_iter()
            .map(|r| evaluate_rule(r, msg, snapshot, now))
            .collect();
    }
    let _ = mode;
    rules.iter().map(|r| evaluate_rule(r, msg, snapshot, now)).collect()
}

/// Evaluates every rule for message `id` against `snapshot` without
/// applying anything. Returns the number of pending updates and the
/// number of failing rules.
pub fn dry_run(
    plan: &CompiledPlan,
    snapshot: &crate::store::Snapshot,
    id: MessageId,
    now: DateTime<Utc>,
    mode: Evaluation,
) -> Option<(usize, usize)> {
    let msg = snapshot.message(id)?;
    let results = evaluate_all(plan.rules_for(&msg.queue), &msg, snapshot, now, mode);
    let mut updates = 0;
    let mut failures = 0;
    for r in results.into_iter().flatten() {
        match r.outcome {
            Ok(u) => updates += u.len(),
            Err(_) => failures += 1,
        }
    }
    Some((updates, failures))
}

fn apply_updates(
    txn: &mut Txn<'_>,
    updates: Vec<PendingUpdate>,
    trigger: &Arc<Message>,
    rule: &str,
) -> Result<usize, StoreError> {
    let n = updates.len();
    for u in updates {
        match u {
            PendingUpdate::Enqueue {
                body,
                queue,
                explicit_props,
            } => {
                let mut req = EnqueueRequest::new(queue, body).trigger(trigger.clone()).rule(rule);
                req.explicit = explicit_props;
                txn.enqueue(req)?;
            }
            PendingUpdate::Reset { slicing, key } => txn.reset_slice(&slicing, &key)?,
        }
    }
    Ok(n)
}

fn error_kind_for(e: &StoreError) -> ErrorKind {
    match e {
        StoreError::UnknownQueue(_) | StoreError::UnknownSlicing(_) => ErrorKind::ConfigurationError,
        StoreError::PropertyEvaluation { .. } => ErrorKind::ExpressionError,
        _ => ErrorKind::PropertyError,
    }
}

/// Processing context shared by all messages.
pub struct Engine<'a> {
    pub store: &'a Store,
    pub plan: &'a CompiledPlan,
    pub system_errorqueue: Option<&'a str>,
    pub evaluation: Evaluation,
}

impl Engine<'_> {
    /// Enqueues an error message for `err` raised while processing `msg`.
    pub fn raise(&self, txn: &mut Txn<'_>, msg: &Arc<Message>, err: &RaisedError) -> Result<(), EngineError> {
        let rule_eq = err
            .rule
            .as_deref()
            .and_then(|r| self.plan.catalog().app().rule(r))
            .and_then(|r| r.errorqueue.as_deref());
        let queue_eq = self
            .plan
            .catalog()
            .queue(&msg.queue)
            .and_then(|q| q.errorqueue.as_deref());
        let target = resolve_errorqueue(rule_eq, queue_eq, self.system_errorqueue).ok_or_else(|| {
            EngineError::Fatal(format!(
                "no error queue for {} in queue '{}': {}",
                err.kind, msg.queue, err.description
            ))
        })?;
        let body = build_error_message(
            err.kind,
            err.rule.as_deref(),
            &msg.queue,
            txn.now(),
            &err.description,
            Some(&msg.document()),
        );
        let mut req = EnqueueRequest::new(target.clone(), body).trigger(msg.clone());
        if let Some(r) = &err.rule {
            req = req.rule(r.clone());
        }
        txn.enqueue(req).map_err(|e| {
            EngineError::Fatal(format!("cannot enqueue error message into '{target}': {e}"))
        })?;
        Ok(())
    }

    pub fn process_message(&self, id: MessageId) -> Result<ProcessingOutcome, EngineError> {
        self.process_message_with(id, Vec::new())
    }

    /// Processes `id`, first turning `pre_errors` (e.g. a failed delivery)
    /// into error messages in the same transaction.
    pub fn process_message_with(
        &self,
        id: MessageId,
        pre_errors: Vec<RaisedError>,
    ) -> Result<ProcessingOutcome, EngineError> {
        let mut txn = self.store.begin();
        let snapshot = txn.snapshot().clone();
        let msg = snapshot.message(id).ok_or(EngineError::NotFound(id))?;
        if snapshot.is_processed(id) {
            return Err(EngineError::AlreadyProcessed(id));
        }
        let now = txn.now();
        let mut errors_raised = Vec::new();
        for e in &pre_errors {
            self.raise(&mut txn, &msg, e)?;
            errors_raised.push((e.rule.clone(), e.kind));
        }

        let rules = self.plan.rules_for(&msg.queue);
        let results = evaluate_all(rules, &msg, &snapshot, now, self.evaluation);
        let mut updates_applied = 0;
        for (rule, result) in rules.iter().zip(results) {
            let Some(result) = result else { continue };
            txn.note_reads(result.reads);
            let raised = match result.outcome {
                Ok(updates) => {
                    let sp = txn.savepoint();
                    match apply_updates(&mut txn, updates, &msg, &rule.name) {
                        Ok(n) => {
                            updates_applied += n;
                            None
                        }
                        Err(e) => {
                            txn.rollback_to(sp);
                            Some(RaisedError {
                                kind: error_kind_for(&e),
                                rule: Some(rule.name.clone()),
                                description: e.to_string(),
                            })
                        }
                    }
                }
                Err(e) => Some(RaisedError {
                    kind: ErrorKind::ExpressionError,
                    rule: Some(rule.name.clone()),
                    description: e.to_string(),
                }),
            };
            if let Some(err) = raised {
                log::warn!("rule {} failed on message {id}: {}", rule.name, err.description);
                self.raise(&mut txn, &msg, &err)?;
                errors_raised.push((err.rule, err.kind));
            }
        }
        txn.mark_processed(id)?;
        let info = txn.commit()?;
        Ok(ProcessingOutcome {
            message_id: id,
            status: if errors_raised.is_empty() {
                ProcessingStatus::Completed
            } else {
                ProcessingStatus::Failed
            },
            updates_applied,
            errors_raised,
            created: info.created,
        })
    }

    /// Marks `id` processed after routing `err` to the system error queue;
    /// used when a message cannot be processed at all.
    pub fn fail_message(&self, id: MessageId, err: RaisedError) -> Result<ProcessingOutcome, EngineError> {
        let mut txn = self.store.begin();
        let msg = txn.snapshot().message(id).ok_or(EngineError::NotFound(id))?;
        self.raise(&mut txn, &msg, &err)?;
        txn.mark_processed(id)?;
        let info = txn.commit()?;
        Ok(ProcessingOutcome {
            message_id: id,
            status: ProcessingStatus::Failed,
            updates_applied: 0,
            errors_raised: vec![(err.rule, err.kind)],
            created: info.created,
        })
    }
}
