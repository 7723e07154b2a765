//! Immutable XML node trees.
//!
//! A [`Tree`] is an arena of nodes laid out in document order: every node's
//! id is larger than its parent's, attributes directly follow their owning
//! element, and an element's subtree occupies a contiguous id range. Document
//! order inside one tree is therefore plain id order. Across trees, order is
//! decided by the tree's creation ordinal.
//!
//! Trees are built once (by [`parse_document`] or a [`TreeBuilder`]) and never
//! mutated afterwards; they are shared through [`NodeRef`] handles.

use std::cmp::Ordering;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::sync::atomic::{AtomicU64, Ordering as AtomicOrdering};
use std::sync::Arc;

use quick_xml::events::Event;
use quick_xml::Reader;
use thiserror::Error;

static TREE_ORDINAL: AtomicU64 = AtomicU64::new(1);

pub type NodeId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NodeKind {
    Document,
    Element,
    Attribute,
    Text,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct NodeData {
    kind: NodeKind,
    name: String,
    value: String,
    parent: Option<NodeId>,
    children: Vec<NodeId>,
    attributes: Vec<NodeId>,
    /// One past the last id in this node's subtree.
    end: NodeId,
}

/// An immutable node arena. Node 0 is the root.
#[derive(Debug)]
pub struct Tree {
    ordinal: u64,
    nodes: Vec<NodeData>,
}

impl Tree {
    pub fn root(self: &Arc<Self>) -> NodeRef {
        NodeRef {
            tree: Arc::clone(self),
            id: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// The single element child of a document root, or the root itself when
    /// the tree is a bare element.
    pub fn document_element(self: &Arc<Self>) -> Option<NodeRef> {
        let root = self.root();
        match root.kind() {
            NodeKind::Element => Some(root),
            NodeKind::Document => root.children().find(|c| c.kind() == NodeKind::Element),
            _ => None,
        }
    }

    /// Structural equality, ignoring tree identity.
    pub fn same_content(&self, other: &Tree) -> bool {
        self.nodes == other.nodes
    }

    /// Hash of the tree's content. Used to check that evaluation never
    /// mutates a tree.
    pub fn content_hash(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        self.nodes.hash(&mut h);
        h.finish()
    }
}

/// A handle to one node of a shared tree.
#[derive(Clone)]
pub struct NodeRef {
    tree: Arc<Tree>,
    id: NodeId,
}

impl NodeRef {
    fn data(&self) -> &NodeData {
        &self.tree.nodes[self.id as usize]
    }

    fn at(&self, id: NodeId) -> NodeRef {
        NodeRef {
            tree: Arc::clone(&self.tree),
            id,
        }
    }

    pub fn tree(&self) -> &Arc<Tree> {
        &self.tree
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn kind(&self) -> NodeKind {
        self.data().kind
    }

    /// Qualified name of an element or attribute; empty for other kinds.
    pub fn name(&self) -> &str {
        &self.data().name
    }

    /// Name with any namespace prefix stripped.
    pub fn local_name(&self) -> &str {
        local_part(self.name())
    }

    pub fn parent(&self) -> Option<NodeRef> {
        self.data().parent.map(|p| self.at(p))
    }

    pub fn root(&self) -> NodeRef {
        self.at(0)
    }

    pub fn children(&self) -> impl Iterator<Item = NodeRef> + '_ {
        self.data().children.iter().map(move |&c| self.at(c))
    }

    pub fn attributes(&self) -> impl Iterator<Item = NodeRef> + '_ {
        self.data().attributes.iter().map(move |&a| self.at(a))
    }

    pub fn attribute(&self, name: &str) -> Option<String> {
        self.attributes()
            .find(|a| a.name() == name)
            .map(|a| a.data().value.clone())
    }

    /// This node followed by all descendants in document order, attributes
    /// excluded.
    pub fn descendants_or_self(&self) -> impl Iterator<Item = NodeRef> + '_ {
        let end = self.data().end;
        (self.id..end)
            .filter(move |&i| self.tree.nodes[i as usize].kind != NodeKind::Attribute)
            .map(move |i| self.at(i))
    }

    /// XPath string value: concatenated descendant text for documents and
    /// elements, the value itself for attributes and text.
    pub fn string_value(&self) -> String {
        match self.kind() {
            NodeKind::Attribute | NodeKind::Text => self.data().value.clone(),
            NodeKind::Document | NodeKind::Element => {
                let end = self.data().end;
                let mut out = String::new();
                for i in self.id..end {
                    let n = &self.tree.nodes[i as usize];
                    if n.kind == NodeKind::Text {
                        out.push_str(&n.value);
                    }
                }
                out
            }
        }
    }

    pub fn is_same(&self, other: &NodeRef) -> bool {
        Arc::ptr_eq(&self.tree, &other.tree) && self.id == other.id
    }

    /// Serializes this node (and its subtree) to canonical XML.
    pub fn to_xml(&self) -> String {
        let mut out = String::new();
        write_node(self, &mut out);
        out
    }
}

impl PartialEq for NodeRef {
    fn eq(&self, other: &Self) -> bool {
        self.is_same(other)
    }
}

impl Eq for NodeRef {}

impl PartialOrd for NodeRef {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for NodeRef {
    fn cmp(&self, other: &Self) -> Ordering {
        self.tree
            .ordinal
            .cmp(&other.tree.ordinal)
            .then(self.id.cmp(&other.id))
    }
}

impl Hash for NodeRef {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.tree.ordinal.hash(state);
        self.id.hash(state);
    }
}

impl fmt::Debug for NodeRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind() {
            NodeKind::Document => write!(f, "document#{}", self.tree.ordinal),
            NodeKind::Element => write!(f, "<{}>#{}:{}", self.name(), self.tree.ordinal, self.id),
            NodeKind::Attribute => write!(f, "@{}#{}:{}", self.name(), self.tree.ordinal, self.id),
            NodeKind::Text => write!(f, "text({:?})", self.data().value),
        }
    }
}

pub fn local_part(name: &str) -> &str {
    name.rsplit_once(':').map_or(name, |(_, local)| local)
}

/// Incremental builder producing a [`Tree`] in document order.
#[derive(Debug)]
pub struct TreeBuilder {
    nodes: Vec<NodeData>,
    open: Vec<NodeId>,
}

impl TreeBuilder {
    /// Builder whose root is a document node.
    pub fn document() -> Self {
        let mut b = TreeBuilder {
            nodes: Vec::new(),
            open: Vec::new(),
        };
        b.push(NodeKind::Document, String::new(), String::new());
        b.open.push(0);
        b
    }

    /// Builder whose root will be the first element started.
    pub fn fragment() -> Self {
        TreeBuilder {
            nodes: Vec::new(),
            open: Vec::new(),
        }
    }

    fn push(&mut self, kind: NodeKind, name: String, value: String) -> NodeId {
        let id = self.nodes.len() as NodeId;
        let parent = self.open.last().copied();
        self.nodes.push(NodeData {
            kind,
            name,
            value,
            parent,
            children: Vec::new(),
            attributes: Vec::new(),
            end: id + 1,
        });
        if let Some(p) = parent {
            match kind {
                NodeKind::Attribute => self.nodes[p as usize].attributes.push(id),
                _ => self.nodes[p as usize].children.push(id),
            }
        }
        id
    }

    pub fn depth(&self) -> usize {
        self.open.len()
    }

    /// Whether the currently open element has any children yet; attributes
    /// may only be added before the first child.
    pub fn current_has_children(&self) -> bool {
        self.open
            .last()
            .map(|&p| !self.nodes[p as usize].children.is_empty())
            .unwrap_or(false)
    }

    pub fn start_element(&mut self, name: &str) {
        let id = self.push(NodeKind::Element, name.to_string(), String::new());
        self.open.push(id);
    }

    /// Adds an attribute to the open element. A duplicate name replaces the
    /// earlier value.
    pub fn attribute(&mut self, name: &str, value: &str) {
        let Some(&owner) = self.open.last() else {
            return;
        };
        let existing = self.nodes[owner as usize]
            .attributes
            .iter()
            .copied()
            .find(|&a| self.nodes[a as usize].name == name);
        match existing {
            Some(a) => self.nodes[a as usize].value = value.to_string(),
            None => {
                self.push(NodeKind::Attribute, name.to_string(), value.to_string());
            }
        }
    }

    /// Appends text, merging with a directly preceding text sibling.
    pub fn text(&mut self, s: &str) {
        if s.is_empty() {
            return;
        }
        if let Some(&p) = self.open.last() {
            if let Some(&last) = self.nodes[p as usize].children.last() {
                if self.nodes[last as usize].kind == NodeKind::Text
                    && last as usize == self.nodes.len() - 1
                {
                    self.nodes[last as usize].value.push_str(s);
                    return;
                }
            }
        }
        self.push(NodeKind::Text, String::new(), s.to_string());
    }

    pub fn end_element(&mut self) {
        if let Some(id) = self.open.pop() {
            self.nodes[id as usize].end = self.nodes.len() as NodeId;
        }
    }

    /// Deep-copies `node` into the current position. Document nodes copy
    /// their children; attribute nodes become attributes of the open element.
    pub fn copy_node(&mut self, node: &NodeRef) {
        match node.kind() {
            NodeKind::Document => {
                for c in node.children() {
                    self.copy_node(&c);
                }
            }
            NodeKind::Element => {
                self.start_element(node.name());
                for a in node.attributes() {
                    self.attribute(a.name(), &a.data().value);
                }
                for c in node.children() {
                    self.copy_node(&c);
                }
                self.end_element();
            }
            NodeKind::Attribute => self.attribute(node.name(), &node.data().value),
            NodeKind::Text => self.text(&node.data().value),
        }
    }

    pub fn finish(mut self) -> Arc<Tree> {
        while !self.open.is_empty() {
            self.end_element();
        }
        let len = self.nodes.len() as NodeId;
        if let Some(root) = self.nodes.first_mut() {
            root.end = len;
        }
        Arc::new(Tree {
            ordinal: TREE_ORDINAL.fetch_add(1, AtomicOrdering::Relaxed),
            nodes: self.nodes,
        })
    }
}

/// Wraps a copy of `node` (an element, or a document with one element child)
/// in a fresh document node.
pub fn wrap_in_document(node: &NodeRef) -> Option<Arc<Tree>> {
    let element = match node.kind() {
        NodeKind::Element => node.clone(),
        NodeKind::Document => {
            let mut elems = node.children().filter(|c| c.kind() == NodeKind::Element);
            let first = elems.next()?;
            if elems.next().is_some() {
                return None;
            }
            first
        }
        _ => return None,
    };
    let mut b = TreeBuilder::document();
    b.copy_node(&element);
    Some(b.finish())
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum XmlError {
    #[error("malformed XML at byte {position}: {message}")]
    Malformed { position: u64, message: String },
    #[error("document has no root element")]
    NoRootElement,
    #[error("document has more than one root element")]
    MultipleRoots,
    #[error("unexpected end of document: {0} unclosed element(s)")]
    Truncated(usize),
    #[error("text content outside the root element")]
    TextOutsideRoot,
}

fn predefined_entity(name: &str) -> Option<&'static str> {
    Some(match name {
        "lt" => "<",
        "gt" => ">",
        "amp" => "&",
        "apos" => "'",
        "quot" => "\"",
        _ => return None,
    })
}

fn malformed(reader_pos: u64, message: impl Into<String>) -> XmlError {
    XmlError::Malformed {
        position: reader_pos,
        message: message.into(),
    }
}

/// Parses a complete XML document with exactly one root element.
///
/// Whitespace text is preserved inside the root; whitespace outside the root
/// is dropped. Comments, processing instructions, and the declaration are
/// not represented.
pub fn parse_document(text: &str) -> Result<Arc<Tree>, XmlError> {
    let mut reader = Reader::from_str(text);
    reader.config_mut().check_end_names = true;
    let mut b = TreeBuilder::document();
    let mut roots = 0usize;

    fn start(
        b: &mut TreeBuilder,
        e: &quick_xml::events::BytesStart<'_>,
        pos: u64,
    ) -> Result<(), XmlError> {
        let name = e.name().0.to_string();
        b.start_element(&name);
        for attr in e.attributes() {
            let attr = attr.map_err(|err| malformed(pos, err.to_string()))?;
            let key = attr.key.0.to_string();
            let value = attr
                .normalized_value(quick_xml::XmlVersion::Implicit1_0)
                .map_err(|err| malformed(pos, err.to_string()))?;
            b.attribute(&key, &value);
        }
        Ok(())
    }

    loop {
        let pos = reader.buffer_position();
        let event = reader
            .read_event()
            .map_err(|err| malformed(reader.error_position(), err.to_string()))?;
        let at_top = b.depth() == 1;
        match event {
            Event::Start(e) => {
                if at_top {
                    roots += 1;
                    if roots > 1 {
                        return Err(XmlError::MultipleRoots);
                    }
                }
                start(&mut b, &e, pos)?;
            }
            Event::Empty(e) => {
                if at_top {
                    roots += 1;
                    if roots > 1 {
                        return Err(XmlError::MultipleRoots);
                    }
                }
                start(&mut b, &e, pos)?;
                b.end_element();
            }
            Event::End(_) => {
                if at_top {
                    return Err(malformed(pos, "unmatched end tag"));
                }
                b.end_element();
            }
            Event::Text(t) => {
                let s = t.xml10_content();
                if at_top {
                    if !s.trim().is_empty() {
                        return Err(XmlError::TextOutsideRoot);
                    }
                } else {
                    b.text(&s);
                }
            }
            Event::CData(t) => {
                if at_top {
                    return Err(XmlError::TextOutsideRoot);
                }
                let s = std::str::from_utf8(AsRef::<[u8]>::as_ref(&*t))
                    .map_err(|err| malformed(pos, err.to_string()))?
                    .to_string();
                b.text(&s);
            }
            Event::GeneralRef(r) => {
                if at_top {
                    return Err(XmlError::TextOutsideRoot);
                }
                let resolved = match r.resolve_char_ref() {
                    Ok(Some(c)) => c.to_string(),
                    Ok(None) => {
                        let name = r.xml10_content();
                        predefined_entity(&name)
                            .ok_or_else(|| malformed(pos, format!("unknown entity &{name};")))?
                            .to_string()
                    }
                    Err(err) => return Err(malformed(pos, err.to_string())),
                };
                b.text(&resolved);
            }
            Event::Comment(_) | Event::Decl(_) | Event::PI(_) | Event::DocType(_) => {}
            Event::Eof => break,
        }
    }
    if b.depth() > 1 {
        return Err(XmlError::Truncated(b.depth() - 1));
    }
    if roots == 0 {
        return Err(XmlError::NoRootElement);
    }
    Ok(b.finish())
}

pub fn escape_text(s: &str, out: &mut String) {
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '\r' => out.push_str("&#13;"),
            _ => out.push(c),
        }
    }
}

pub fn escape_attr(s: &str, out: &mut String) {
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '"' => out.push_str("&quot;"),
            '\n' => out.push_str("&#10;"),
            '\r' => out.push_str("&#13;"),
            '\t' => out.push_str("&#9;"),
            _ => out.push(c),
        }
    }
}

fn write_node(node: &NodeRef, out: &mut String) {
    match node.kind() {
        NodeKind::Document => {
            for c in node.children() {
                write_node(&c, out);
            }
        }
        NodeKind::Element => {
            out.push('<');
            out.push_str(node.name());
            for a in node.attributes() {
                out.push(' ');
                out.push_str(a.name());
                out.push_str("=\"");
                escape_attr(&a.data().value, out);
                out.push('"');
            }
            if node.data().children.is_empty() {
                out.push_str("/>");
            } else {
                out.push('>');
                for c in node.children() {
                    write_node(&c, out);
                }
                out.push_str("</");
                out.push_str(node.name());
                out.push('>');
            }
        }
        NodeKind::Attribute => {
            out.push_str(node.name());
            out.push_str("=\"");
            escape_attr(&node.data().value, out);
            out.push('"');
        }
        NodeKind::Text => escape_text(&node.data().value, out),
    }
}
