//! Application definitions: queues, properties, slicings and rules.

mod parse;
mod render;
mod validate;

use std::fmt;

use crate::expr::{Expr, ValueType};

pub use parse::{parse_application, LangError};
pub use render::render_application;
pub use validate::{validate_application, Diagnostic, ValidationReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum QueueKind {
    Basic,
    IncomingGateway,
    OutgoingGateway,
    Echo,
}

impl QueueKind {
    pub fn keyword(self) -> &'static str {
        match self {
            QueueKind::Basic => "basic",
            QueueKind::IncomingGateway => "incomingGateway",
            QueueKind::OutgoingGateway => "outgoingGateway",
            QueueKind::Echo => "echo",
        }
    }

    pub fn from_keyword(word: &str) -> Option<QueueKind> {
        Some(match word {
            "basic" => QueueKind::Basic,
            "incomingGateway" => QueueKind::IncomingGateway,
            "outgoingGateway" => QueueKind::OutgoingGateway,
            "echo" => QueueKind::Echo,
            _ => return None,
        })
    }

    pub fn is_gateway(self) -> bool {
        matches!(self, QueueKind::IncomingGateway | QueueKind::OutgoingGateway)
    }
}

impl fmt::Display for QueueKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.keyword())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum QueueMode {
    Persistent,
    Transient,
}

impl QueueMode {
    pub fn keyword(self) -> &'static str {
        match self {
            QueueMode::Persistent => "persistent",
            QueueMode::Transient => "transient",
        }
    }

    pub fn from_keyword(word: &str) -> Option<QueueMode> {
        match word {
            "persistent" => Some(QueueMode::Persistent),
            "transient" => Some(QueueMode::Transient),
            _ => None,
        }
    }
}

impl fmt::Display for QueueMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.keyword())
    }
}

/// A clause kept verbatim but never interpreted, such as `interface` or
/// `using ... policy ...`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Annotation {
    pub keyword: String,
    pub words: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueueDescriptor {
    pub name: String,
    pub kind: QueueKind,
    pub mode: QueueMode,
    pub priority: u32,
    pub endpoint: Option<String>,
    pub errorqueue: Option<String>,
    pub annotations: Vec<Annotation>,
}

impl QueueDescriptor {
    pub fn new(name: impl Into<String>, kind: QueueKind, mode: QueueMode) -> Self {
        QueueDescriptor {
            name: name.into(),
            kind,
            mode,
            priority: 0,
            endpoint: None,
            errorqueue: None,
            annotations: Vec::new(),
        }
    }
}

/// Per-queue value of a property. For fixed properties the value is
/// computed; otherwise it is a default that explicit and inherited values
/// override.
#[derive(Debug, Clone, PartialEq)]
pub struct PropertyClause {
    pub queues: Vec<String>,
    pub value: Option<Expr>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropertyDef {
    pub name: String,
    pub value_type: ValueType,
    pub fixed: bool,
    pub inherited: bool,
    pub clauses: Vec<PropertyClause>,
}

impl PropertyDef {
    /// The clause covering `queue`, if the property is defined there.
    pub fn clause_for(&self, queue: &str) -> Option<&PropertyClause> {
        self.clauses
            .iter()
            .find(|c| c.queues.iter().any(|q| q == queue))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlicingDef {
    pub name: String,
    pub property: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetKind {
    Queue,
    Slicing,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RuleDef {
    pub name: String,
    pub target: String,
    pub target_kind: TargetKind,
    pub errorqueue: Option<String>,
    pub body: Expr,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ApplicationDef {
    pub queues: Vec<QueueDescriptor>,
    pub properties: Vec<PropertyDef>,
    pub slicings: Vec<SlicingDef>,
    pub rules: Vec<RuleDef>,
}

impl ApplicationDef {
    pub fn queue(&self, name: &str) -> Option<&QueueDescriptor> {
        self.queues.iter().find(|q| q.name == name)
    }

    pub fn property(&self, name: &str) -> Option<&PropertyDef> {
        self.properties.iter().find(|p| p.name == name)
    }

    pub fn slicing(&self, name: &str) -> Option<&SlicingDef> {
        self.slicings.iter().find(|s| s.name == name)
    }

    pub fn rule(&self, name: &str) -> Option<&RuleDef> {
        self.rules.iter().find(|r| r.name == name)
    }

    /// Properties with a clause for `queue`, in declaration order.
    pub fn properties_for_queue<'a>(
        &'a self,
        queue: &'a str,
    ) -> impl Iterator<Item = (&'a PropertyDef, &'a PropertyClause)> + 'a {
        self.properties
            .iter()
            .filter_map(move |p| p.clause_for(queue).map(|c| (p, c)))
    }

    /// Slicings whose property is defined on `queue`.
    pub fn slicings_for_queue<'a>(&'a self, queue: &'a str) -> impl Iterator<Item = &'a SlicingDef> + 'a {
        self.slicings.iter().filter(move |s| {
            self.property(&s.property)
                .is_some_and(|p| p.clause_for(queue).is_some())
        })
    }
}
