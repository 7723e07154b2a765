use std::collections::BTreeMap;
use std::sync::Arc;

use chrono::{DateTime, Utc};
use thiserror::Error;

use super::ast::*;
use super::value::{Atomic, Item, Value};
use crate::xml::{local_part, wrap_in_document, NodeKind, NodeRef, Tree, TreeBuilder};

/// Read access to message collections, as seen from one snapshot.
pub trait StoreView: Sync {
    /// Document nodes of all retained messages of `queue`, in enqueue order.
    fn queue(&self, queue: &str) -> Result<Vec<NodeRef>, DynamicError>;
    /// Document nodes of the current-lifetime members of a slice.
    fn slice(&self, slicing: &str, key: &Atomic) -> Result<Vec<NodeRef>, DynamicError>;
    /// Whether `name` is a declared (or reserved system) property.
    fn property_declared(&self, name: &str) -> bool;
}

/// What the evaluated rule is attached to.
#[derive(Debug, Clone, PartialEq)]
pub enum RuleTarget {
    /// Not a rule: property value computation and ad-hoc evaluation.
    None,
    Queue(String),
    Slicing { name: String, key: Atomic },
}

pub struct EvalContext<'a> {
    /// Document node of the triggering message; the initial context item.
    pub document: NodeRef,
    pub queue: &'a str,
    pub properties: &'a BTreeMap<String, Atomic>,
    pub store: &'a dyn StoreView,
    pub target: RuleTarget,
    pub clock: DateTime<Utc>,
    pub variables: Vec<(String, Value)>,
}

/// An update primitive produced by evaluation and applied afterwards.
#[derive(Debug, Clone)]
pub enum PendingUpdate {
    Enqueue {
        body: Arc<Tree>,
        queue: String,
        explicit_props: Vec<(String, Atomic)>,
    },
    Reset {
        slicing: String,
        key: Atomic,
    },
}

impl PartialEq for PendingUpdate {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (
                PendingUpdate::Enqueue {
                    body: b1,
                    queue: q1,
                    explicit_props: p1,
                },
                PendingUpdate::Enqueue {
                    body: b2,
                    queue: q2,
                    explicit_props: p2,
                },
            ) => q1 == q2 && p1 == p2 && b1.same_content(b2),
            (
                PendingUpdate::Reset { slicing: s1, key: k1 },
                PendingUpdate::Reset { slicing: s2, key: k2 },
            ) => s1 == s2 && k1 == k2,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DynamicErrorKind {
    TypeMismatch,
    UnknownFunction,
    ArityMismatch,
    SliceFunctionOutsideSlicing,
    AmbiguousQueue,
    UndefinedProperty,
    UnboundVariable,
    NotANode,
    EffectiveBoolean,
    UnknownQueue,
    UnknownSlicing,
    InvalidEnqueueBody,
    InvalidPropertyValue,
    ResetOutsideSlicing,
    Constructor,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{kind:?}: {message}")]
pub struct DynamicError {
    pub kind: DynamicErrorKind,
    pub message: String,
}

impl DynamicError {
    pub fn new(kind: DynamicErrorKind, message: impl Into<String>) -> Self {
        DynamicError {
            kind,
            message: message.into(),
        }
    }
}

type EvalResult<T> = Result<T, DynamicError>;

/// Evaluates `expr` against `ctx`, returning its value and the pending
/// updates it produced in left-to-right order. Nothing is applied.
pub fn evaluate(expr: &Expr, ctx: &EvalContext<'_>) -> EvalResult<(Value, Vec<PendingUpdate>)> {
    let mut ev = Evaluator {
        ctx,
        env: ctx.variables.clone(),
        updates: Vec::new(),
    };
    let focus = Focus {
        item: Item::Node(ctx.document.clone()),
        position: 1,
        size: 1,
    };
    let v = ev.eval(expr, &focus)?;
    Ok((v, ev.updates))
}

/// Effective boolean value.
pub fn effective_boolean(v: &Value) -> EvalResult<bool> {
    match v.items() {
        [] => Ok(false),
        [Item::Node(_), ..] => Ok(true),
        [Item::Atomic(a)] => match a {
            Atomic::Bool(b) => Ok(*b),
            Atomic::Str(s) | Atomic::Untyped(s) => Ok(!s.is_empty()),
            Atomic::Int(i) => Ok(*i != 0),
            Atomic::Dec(d) => Ok(*d != 0.0 && !d.is_nan()),
            Atomic::DateTime(_) => Err(DynamicError::new(
                DynamicErrorKind::EffectiveBoolean,
                "no effective boolean value for a dateTime",
            )),
        },
        _ => Err(DynamicError::new(
            DynamicErrorKind::EffectiveBoolean,
            "no effective boolean value for a sequence of several atomic values",
        )),
    }
}

const BUILTINS: &[(&str, &[usize])] = &[
    ("qs:message", &[0]),
    ("qs:queue", &[0, 1]),
    ("qs:property", &[1]),
    ("qs:slice", &[0]),
    ("qs:slicekey", &[0]),
    ("collection", &[1]),
    ("not", &[1]),
    ("count", &[1]),
    ("exists", &[1]),
    ("empty", &[1]),
    ("string", &[0, 1]),
    ("true", &[0]),
    ("false", &[0]),
    ("position", &[0]),
    ("last", &[0]),
    ("current-dateTime", &[0]),
];

/// Whether `name` with `arity` arguments is a built-in function.
pub fn is_builtin(name: &str, arity: usize) -> bool {
    let name = name.strip_prefix("fn:").unwrap_or(name);
    BUILTINS
        .iter()
        .any(|(n, arities)| *n == name && arities.contains(&arity))
}

fn arity(name: &str, args: &[Value], allowed: &[usize]) -> EvalResult<()> {
    if allowed.contains(&args.len()) {
        Ok(())
    } else {
        Err(DynamicError::new(
            DynamicErrorKind::ArityMismatch,
            format!("{name} called with {} argument(s)", args.len()),
        ))
    }
}

fn single_string(name: &str, v: &Value) -> EvalResult<String> {
    match v.items() {
        [item] => Ok(item.atomize().lexical()),
        _ => Err(DynamicError::new(
            DynamicErrorKind::TypeMismatch,
            format!("{name} expects a single string argument"),
        )),
    }
}

fn docs(nodes: Vec<NodeRef>) -> Value {
    nodes.into_iter().map(Item::Node).collect()
}

/// Calls a built-in function with already evaluated arguments.
pub fn builtin_call(name: &str, args: Vec<Value>, ctx: &EvalContext<'_>) -> EvalResult<Value> {
    builtin_with_focus(name, args, ctx, None)
}

fn builtin_with_focus(
    name: &str,
    args: Vec<Value>,
    ctx: &EvalContext<'_>,
    focus: Option<&Item>,
) -> EvalResult<Value> {
    let (prefix, local) = match name.split_once(':') {
        Some((p, l)) => (p, l),
        None => ("", name),
    };
    match (prefix, local) {
        ("qs", "message") => {
            arity(name, &args, &[0])?;
            Ok(Value::one(Item::Node(ctx.document.clone())))
        }
        ("qs", "queue") | ("" | "fn", "collection") => {
            arity(name, &args, if local == "queue" { &[0, 1] } else { &[1] })?;
            let queue = match args.first() {
                Some(v) => single_string(name, v)?,
                None => match &ctx.target {
                    RuleTarget::Queue(q) => q.clone(),
                    RuleTarget::Slicing { .. } => {
                        return Err(DynamicError::new(
                            DynamicErrorKind::AmbiguousQueue,
                            "qs:queue() without a name is ambiguous in a slicing rule",
                        ))
                    }
                    RuleTarget::None => {
                        return Err(DynamicError::new(
                            DynamicErrorKind::AmbiguousQueue,
                            "qs:queue() without a name needs a queue rule",
                        ))
                    }
                },
            };
            Ok(docs(ctx.store.queue(&queue)?))
        }
        ("qs", "property") => {
            arity(name, &args, &[1])?;
            let prop = single_string(name, &args[0])?;
            if !ctx.store.property_declared(&prop) && !crate::sysprops::is_reserved(&prop) {
                return Err(DynamicError::new(
                    DynamicErrorKind::UndefinedProperty,
                    format!("property '{prop}' is not defined"),
                ));
            }
            Ok(ctx
                .properties
                .get(&prop)
                .map(|a| Value::atomic(a.clone()))
                .unwrap_or_default())
        }
        ("qs", "slice") | ("qs", "slicekey") => {
            arity(name, &args, &[0])?;
            let RuleTarget::Slicing { name: slicing, key } = &ctx.target else {
                return Err(DynamicError::new(
                    DynamicErrorKind::SliceFunctionOutsideSlicing,
                    format!("{name}() is only available to rules defined on slicings"),
                ));
            };
            if local == "slice" {
                Ok(docs(ctx.store.slice(slicing, key)?))
            } else {
                Ok(Value::atomic(key.clone()))
            }
        }
        ("" | "fn", "not") => {
            arity(name, &args, &[1])?;
            Ok(Value::boolean(!effective_boolean(&args[0])?))
        }
        ("" | "fn", "count") => {
            arity(name, &args, &[1])?;
            Ok(Value::atomic(Atomic::Int(args[0].len() as i64)))
        }
        ("" | "fn", "exists") => {
            arity(name, &args, &[1])?;
            Ok(Value::boolean(!args[0].is_empty()))
        }
        ("" | "fn", "empty") => {
            arity(name, &args, &[1])?;
            Ok(Value::boolean(args[0].is_empty()))
        }
        ("" | "fn", "string") => {
            arity(name, &args, &[0, 1])?;
            let item = match args.first() {
                Some(v) => match v.items() {
                    [] => return Ok(Value::atomic(Atomic::Str(String::new()))),
                    [item] => item.clone(),
                    _ => {
                        return Err(DynamicError::new(
                            DynamicErrorKind::TypeMismatch,
                            "string() expects at most one item",
                        ))
                    }
                },
                None => focus.cloned().ok_or_else(|| {
                    DynamicError::new(DynamicErrorKind::TypeMismatch, "string() without a context item")
                })?,
            };
            Ok(Value::atomic(Atomic::Str(item.atomize().lexical())))
        }
        ("" | "fn", "true") | ("" | "fn", "false") => {
            arity(name, &args, &[0])?;
            Ok(Value::boolean(local == "true"))
        }
        ("" | "fn", "current-dateTime") => {
            arity(name, &args, &[0])?;
            Ok(Value::atomic(Atomic::DateTime(ctx.clock)))
        }
        _ => Err(DynamicError::new(
            DynamicErrorKind::UnknownFunction,
            format!("unknown function {name}#{}", args.len()),
        )),
    }
}

#[derive(Clone)]
struct Focus {
    item: Item,
    position: usize,
    size: usize,
}

struct Evaluator<'c, 'a> {
    ctx: &'c EvalContext<'a>,
    env: Vec<(String, Value)>,
    updates: Vec<PendingUpdate>,
}

fn single_atomic(what: &str, v: Value) -> EvalResult<Atomic> {
    let mut atoms = v.atomize();
    if atoms.len() != 1 {
        return Err(DynamicError::new(
            DynamicErrorKind::InvalidPropertyValue,
            format!("{what} must be a single atomic value, got {} item(s)", atoms.len()),
        ));
    }
    Ok(atoms.pop().unwrap())
}

fn matches_test(node: &NodeRef, test: &NodeTest, principal: NodeKind) -> bool {
    match test {
        NodeTest::AnyNode => true,
        NodeTest::Text => node.kind() == NodeKind::Text,
        NodeTest::Wildcard => node.kind() == principal,
        NodeTest::Name(n) => node.kind() == principal && node.local_name() == local_part(n),
    }
}

fn sort_dedup(nodes: &mut Vec<NodeRef>) {
    nodes.sort();
    nodes.dedup();
}

impl<'c, 'a> Evaluator<'c, 'a> {
    fn lookup(&self, var: &str) -> EvalResult<Value> {
        self.env
            .iter()
            .rev()
            .find(|(n, _)| n == var)
            .map(|(_, v)| v.clone())
            .ok_or_else(|| {
                DynamicError::new(
                    DynamicErrorKind::UnboundVariable,
                    format!("variable ${var} is not bound"),
                )
            })
    }

    fn eval(&mut self, e: &Expr, focus: &Focus) -> EvalResult<Value> {
        match e {
            Expr::Literal(a) => Ok(Value::atomic(a.clone())),
            Expr::EmptySeq => Ok(Value::empty()),
            Expr::Var(v) => self.lookup(v),
            Expr::ContextItem => Ok(Value::one(focus.item.clone())),
            Expr::Sequence(items) => {
                let mut out = Vec::new();
                for item in items {
                    out.extend(self.eval(item, focus)?.into_items());
                }
                Ok(Value(out))
            }
            Expr::Let { var, value, body } => {
                let v = self.eval(value, focus)?;
                self.env.push((var.clone(), v));
                let r = self.eval(body, focus);
                self.env.pop();
                r
            }
            Expr::For {
                var,
                source,
                filter,
                body,
            } => {
                let src = self.eval(source, focus)?;
                let mut out = Vec::new();
                for item in src.into_items() {
                    self.env.push((var.clone(), Value::one(item)));
                    let r = (|| {
                        if let Some(w) = filter {
                            if !effective_boolean(&self.eval(w, focus)?)? {
                                return Ok(Value::empty());
                            }
                        }
                        self.eval(body, focus)
                    })();
                    self.env.pop();
                    out.extend(r?.into_items());
                }
                Ok(Value(out))
            }
            Expr::If {
                cond,
                then,
                otherwise,
            } => {
                let c = self.eval(cond, focus)?;
                if effective_boolean(&c)? {
                    self.eval(then, focus)
                } else if let Some(e) = otherwise {
                    self.eval(e, focus)
                } else {
                    Ok(Value::empty())
                }
            }
            Expr::Path(p) => self.eval_path(p, focus),
            Expr::Filter { base, predicates } => {
                let mut v = self.eval(base, focus)?.into_items();
                for p in predicates {
                    v = self.apply_predicate(v, p)?;
                }
                Ok(Value(v))
            }
            Expr::Compare { op, lhs, rhs } => {
                let l = self.eval(lhs, focus)?.atomize();
                let r = self.eval(rhs, focus)?.atomize();
                for a in &l {
                    for b in &r {
                        let ord = a.compare(b).map_err(|m| {
                            DynamicError::new(
                                DynamicErrorKind::TypeMismatch,
                                format!(
                                    "cannot compare {} with {}",
                                    m.left.xs_name(),
                                    m.right.xs_name()
                                ),
                            )
                        })?;
                        if op.holds(ord) {
                            return Ok(Value::boolean(true));
                        }
                    }
                }
                Ok(Value::boolean(false))
            }
            Expr::And(l, r) => {
                if !effective_boolean(&self.eval(l, focus)?)? {
                    return Ok(Value::boolean(false));
                }
                Ok(Value::boolean(effective_boolean(&self.eval(r, focus)?)?))
            }
            Expr::Or(l, r) => {
                if effective_boolean(&self.eval(l, focus)?)? {
                    return Ok(Value::boolean(true));
                }
                Ok(Value::boolean(effective_boolean(&self.eval(r, focus)?)?))
            }
            Expr::Call { name, args } if args.is_empty() && matches!(name.as_str(), "position" | "last" | "fn:position" | "fn:last") => {
                let n = if name.ends_with("position") { focus.position } else { focus.size };
                Ok(Value::atomic(Atomic::Int(n as i64)))
            }
            Expr::Call { name, args } => {
                let mut vals = Vec::with_capacity(args.len());
                for a in args {
                    vals.push(self.eval(a, focus)?);
                }
                builtin_with_focus(name, vals, self.ctx, Some(&focus.item))
            }
            Expr::Element(ctor) => {
                let mut b = TreeBuilder::fragment();
                self.build_element(&mut b, ctor, focus)?;
                Ok(Value::one(Item::Node(b.finish().root())))
            }
            Expr::Enqueue { body, queue, props } => {
                let v = self.eval(body, focus)?;
                let tree = match v.items() {
                    [Item::Node(n)] => wrap_in_document(n),
                    _ => None,
                }
                .ok_or_else(|| {
                    DynamicError::new(
                        DynamicErrorKind::InvalidEnqueueBody,
                        format!("enqueue into {queue} needs exactly one element or document node"),
                    )
                })?;
                let mut explicit_props = Vec::with_capacity(props.len());
                for (name, pe) in props {
                    let pv = self.eval(pe, focus)?;
                    explicit_props.push((name.clone(), single_atomic(&format!("property {name}"), pv)?));
                }
                self.updates.push(PendingUpdate::Enqueue {
                    body: tree,
                    queue: queue.clone(),
                    explicit_props,
                });
                Ok(Value::empty())
            }
            Expr::Reset { target } => {
                let update = match target {
                    Some(t) => {
                        let k = self.eval(&t.key, focus)?;
                        PendingUpdate::Reset {
                            slicing: t.slicing.clone(),
                            key: single_atomic("slice key", k)?,
                        }
                    }
                    None => match &self.ctx.target {
                        RuleTarget::Slicing { name, key } => PendingUpdate::Reset {
                            slicing: name.clone(),
                            key: key.clone(),
                        },
                        _ => {
                            return Err(DynamicError::new(
                                DynamicErrorKind::ResetOutsideSlicing,
                                "do reset without arguments needs a slicing rule",
                            ))
                        }
                    },
                };
                self.updates.push(update);
                Ok(Value::empty())
            }
        }
    }

    fn apply_predicate(&mut self, items: Vec<Item>, pred: &Expr) -> EvalResult<Vec<Item>> {
        let size = items.len();
        let mut out = Vec::new();
        for (i, item) in items.into_iter().enumerate() {
            let focus = Focus {
                item: item.clone(),
                position: i + 1,
                size,
            };
            let v = self.eval(pred, &focus)?;
            let keep = match v.items() {
                [Item::Atomic(Atomic::Int(n))] => *n == (i + 1) as i64,
                [Item::Atomic(Atomic::Dec(d))] => *d == (i + 1) as f64,
                _ => effective_boolean(&v)?,
            };
            if keep {
                out.push(item);
            }
        }
        Ok(out)
    }

    fn eval_path(&mut self, p: &PathExpr, focus: &Focus) -> EvalResult<Value> {
        let not_a_node = || {
            DynamicError::new(
                DynamicErrorKind::NotANode,
                "path step applied to an atomic value",
            )
        };
        let mut current: Vec<Item> = match &p.start {
            PathStart::Root => match &focus.item {
                Item::Node(n) => vec![Item::Node(n.root())],
                Item::Atomic(_) => return Err(not_a_node()),
            },
            PathStart::Context => vec![focus.item.clone()],
            PathStart::Expr(e) => self.eval(e, focus)?.into_items(),
        };
        for step in &p.steps {
            let mut next: Vec<NodeRef> = Vec::new();
            for item in &current {
                let Item::Node(node) = item else {
                    return Err(not_a_node());
                };
                let candidates: Vec<NodeRef> = match step.axis {
                    Axis::Child => node
                        .children()
                        .filter(|c| matches_test(c, &step.test, NodeKind::Element))
                        .collect(),
                    Axis::DescendantOrSelf => node
                        .descendants_or_self()
                        .filter(|c| matches_test(c, &step.test, NodeKind::Element))
                        .collect(),
                    Axis::Attribute => node
                        .attributes()
                        .filter(|c| matches_test(c, &step.test, NodeKind::Attribute))
                        .collect(),
                };
                let mut selected: Vec<Item> = candidates.into_iter().map(Item::Node).collect();
                for pred in &step.predicates {
                    selected = self.apply_predicate(selected, pred)?;
                }
                next.extend(selected.into_iter().filter_map(|i| match i {
                    Item::Node(n) => Some(n),
                    Item::Atomic(_) => None,
                }));
            }
            sort_dedup(&mut next);
            current = next.into_iter().map(Item::Node).collect();
        }
        if !p.steps.is_empty() {
            return Ok(Value(current));
        }
        // `/` alone or a bare primary: still normalise node sequences.
        if current.iter().all(|i| matches!(i, Item::Node(_))) {
            let mut nodes: Vec<NodeRef> = current
                .into_iter()
                .filter_map(|i| i.as_node().cloned())
                .collect();
            sort_dedup(&mut nodes);
            return Ok(nodes.into_iter().map(Item::Node).collect());
        }
        Ok(Value(current))
    }

    fn build_element(
        &mut self,
        b: &mut TreeBuilder,
        ctor: &ElementCtor,
        focus: &Focus,
    ) -> EvalResult<()> {
        b.start_element(&ctor.name);
        for (name, parts) in &ctor.attributes {
            let mut value = String::new();
            for part in parts {
                match part {
                    AttrPart::Text(t) => value.push_str(t),
                    AttrPart::Enclosed(e) => {
                        let atoms = self.eval(e, focus)?.atomize();
                        let joined: Vec<String> = atoms.iter().map(Atomic::lexical).collect();
                        value.push_str(&joined.join(" "));
                    }
                }
            }
            b.attribute(name, &value);
        }
        for c in &ctor.content {
            match c {
                Content::Text(t) => b.text(t),
                Content::Element(inner) => self.build_element(b, inner, focus)?,
                Content::Enclosed(e) => {
                    let v = self.eval(e, focus)?;
                    let mut prev_atomic = false;
                    for item in v.items() {
                        match item {
                            Item::Node(n) => {
                                if n.kind() == NodeKind::Attribute && b.current_has_children() {
                                    return Err(DynamicError::new(
                                        DynamicErrorKind::Constructor,
                                        "attribute node added after element content",
                                    ));
                                }
                                b.copy_node(n);
                                prev_atomic = false;
                            }
                            Item::Atomic(a) => {
                                if prev_atomic {
                                    b.text(" ");
                                }
                                b.text(&a.lexical());
                                prev_atomic = true;
                            }
                        }
                    }
                }
            }
        }
        b.end_element();
        Ok(())
    }
}
