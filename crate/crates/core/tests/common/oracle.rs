//! Reference implementations used to cross-check the engine: a naive
//! path walker over a generated document model, and a brute-force slice
//! membership model.

use std::collections::{BTreeMap, HashMap};

use qflow::expr::{evaluate, Atomic, EvalContext, Item, RuleTarget, Value};
use qflow::lang::parse_application;
use qflow::store::{EnqueueRequest, MessageId, Store, StoreOptions};
use qflow::xml::{parse_document, NodeKind, NodeRef};
use rand::Rng;

use super::{body, NoStore};

// ---------------------------------------------------------------------
// Documents

const NAMES: [&str; 3] = ["a", "b", "c"];
const TEXTS: [&str; 3] = ["1", "2", "foo"];

#[derive(Debug, Clone)]
pub enum GenChild {
    Elem(GenElem),
    Text(String),
}

#[derive(Debug, Clone)]
pub struct GenElem {
    pub id: usize,
    pub name: &'static str,
    pub attrs: Vec<(&'static str, String)>,
    pub children: Vec<GenChild>,
}

pub fn gen_document<R: Rng>(rng: &mut R) -> GenElem {
    let mut next = 0;
    gen_elem(rng, 0, &mut next)
}

fn gen_elem<R: Rng>(rng: &mut R, depth: usize, next: &mut usize) -> GenElem {
    let id = *next;
    *next += 1;
    let mut attrs = vec![("id", id.to_string())];
    if rng.random_bool(0.5) {
        attrs.push(("x", rng.random_range(1..=3).to_string()));
    }
    if rng.random_bool(0.3) {
        attrs.push(("y", rng.random_range(1..=3).to_string()));
    }
    let mut children = Vec::new();
    if depth < 4 {
        for _ in 0..rng.random_range(0..=3) {
            let after_text = matches!(children.last(), Some(GenChild::Text(_)));
            if !after_text && rng.random_bool(0.25) {
                children.push(GenChild::Text(TEXTS[rng.random_range(0..3)].to_string()));
            } else {
                children.push(GenChild::Elem(gen_elem(rng, depth + 1, next)));
            }
        }
    }
    GenElem {
        id,
        name: NAMES[rng.random_range(0..3)],
        attrs,
        children,
    }
}

impl GenElem {
    pub fn to_xml(&self) -> String {
        let mut s = format!("<{}", self.name);
        for (k, v) in &self.attrs {
            s.push_str(&format!(" {k}=\"{v}\""));
        }
        if self.children.is_empty() {
            s.push_str("/>");
            return s;
        }
        s.push('>');
        for c in &self.children {
            match c {
                GenChild::Elem(e) => s.push_str(&e.to_xml()),
                GenChild::Text(t) => s.push_str(t),
            }
        }
        s.push_str(&format!("</{}>", self.name));
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum OKind {
    Doc,
    Elem,
    Attr,
    Text,
}

#[derive(Debug)]
struct ONode {
    kind: OKind,
    name: String,
    value: String,
    children: Vec<usize>,
    attrs: Vec<usize>,
}

/// Flat arena whose indices are document order: the document node, then
/// each element followed by its attributes and then its children.
pub struct OracleDoc {
    nodes: Vec<ONode>,
    by_elem_id: HashMap<usize, usize>,
}

impl OracleDoc {
    pub fn new(root: &GenElem) -> Self {
        let mut d = OracleDoc {
            nodes: vec![ONode {
                kind: OKind::Doc,
                name: String::new(),
                value: String::new(),
                children: Vec::new(),
                attrs: Vec::new(),
            }],
            by_elem_id: HashMap::new(),
        };
        let r = d.add(root);
        d.nodes[0].children.push(r);
        d
    }

    fn push(&mut self, kind: OKind, name: &str, value: &str) -> usize {
        self.nodes.push(ONode {
            kind,
            name: name.to_string(),
            value: value.to_string(),
            children: Vec::new(),
            attrs: Vec::new(),
        });
        self.nodes.len() - 1
    }

    fn add(&mut self, e: &GenElem) -> usize {
        let me = self.push(OKind::Elem, e.name, "");
        self.by_elem_id.insert(e.id, me);
        for (k, v) in &e.attrs {
            let a = self.push(OKind::Attr, k, v);
            self.nodes[me].attrs.push(a);
        }
        for c in &e.children {
            let ci = match c {
                GenChild::Elem(ce) => self.add(ce),
                GenChild::Text(t) => self.push(OKind::Text, "", t),
            };
            self.nodes[me].children.push(ci);
        }
        me
    }

    fn string_value(&self, n: usize) -> String {
        let node = &self.nodes[n];
        match node.kind {
            OKind::Attr | OKind::Text => node.value.clone(),
            _ => node.children.iter().map(|&c| self.string_value(c)).collect(),
        }
    }

    fn desc_or_self(&self, n: usize, out: &mut Vec<usize>) {
        out.push(n);
        for &c in &self.nodes[n].children {
            self.desc_or_self(c, out);
        }
    }

    fn child_elems<'a>(&'a self, n: usize, name: &'a str) -> impl Iterator<Item = usize> + 'a {
        self.nodes[n]
            .children
            .iter()
            .copied()
            .filter(move |&c| self.nodes[c].kind == OKind::Elem && self.nodes[c].name == name)
    }

    fn attr(&self, n: usize, name: &str) -> Option<&str> {
        self.nodes[n]
            .attrs
            .iter()
            .find(|&&a| self.nodes[a].name == name)
            .map(|&a| self.nodes[a].value.as_str())
    }

    /// Arena index of a node of the parsed document.
    fn locate(&self, n: &NodeRef) -> usize {
        match n.kind() {
            NodeKind::Document => 0,
            NodeKind::Element => {
                let id: usize = n.attribute("id").expect("generated id").parse().unwrap();
                self.by_elem_id[&id]
            }
            NodeKind::Attribute => {
                let p = self.locate(&n.parent().unwrap());
                *self.nodes[p]
                    .attrs
                    .iter()
                    .find(|&&a| self.nodes[a].name == n.name())
                    .unwrap()
            }
            NodeKind::Text => {
                let parent = n.parent().unwrap();
                let p = self.locate(&parent);
                let pos = parent.children().position(|c| c.is_same(n)).unwrap();
                self.nodes[p].children[pos]
            }
        }
    }

    fn describe(&self, i: usize) -> String {
        let n = &self.nodes[i];
        match n.kind {
            OKind::Doc => "doc".into(),
            OKind::Elem => format!("{}#{i}", n.name),
            OKind::Attr => format!("@{}#{i}", n.name),
            OKind::Text => format!("text#{i}"),
        }
    }
}

// ---------------------------------------------------------------------
// Paths

#[derive(Debug, Clone)]
pub enum Test {
    Name(&'static str),
    AnyElem,
    Text,
    Attr(&'static str),
    AnyAttr,
}

#[derive(Debug, Clone)]
pub enum Pred {
    Pos(usize),
    Last,
    HasChild(&'static str),
    HasAttr(&'static str),
    AttrEq(&'static str, i64),
    ChildEq(&'static str, &'static str),
    Not(Box<Pred>),
}

#[derive(Debug, Clone)]
pub struct Step {
    pub descendant: bool,
    pub test: Test,
    pub preds: Vec<Pred>,
}

#[derive(Debug, Clone)]
pub struct PathExpr {
    pub absolute: bool,
    pub steps: Vec<Step>,
}

fn gen_pred<R: Rng>(rng: &mut R, allow_positional: bool) -> Pred {
    let attr = ["x", "y"][rng.random_range(0..2)];
    let name = NAMES[rng.random_range(0..3)];
    match rng.random_range(0..if allow_positional { 7 } else { 5 }) {
        0 => Pred::HasChild(name),
        1 => Pred::HasAttr(attr),
        2 => Pred::AttrEq(attr, rng.random_range(1..=3)),
        3 => Pred::ChildEq(name, TEXTS[rng.random_range(0..3)]),
        4 => Pred::Not(Box::new(gen_pred(rng, false))),
        5 => Pred::Pos(rng.random_range(1..=3)),
        _ => Pred::Last,
    }
}

pub fn gen_path<R: Rng>(rng: &mut R) -> PathExpr {
    let absolute = rng.random_bool(0.7);
    let n = rng.random_range(1..=4);
    let mut steps = Vec::new();
    for i in 0..n {
        let last = i == n - 1;
        let descendant = (absolute || i > 0) && rng.random_bool(0.4);
        let test = match rng.random_range(0..10) {
            0..=5 => Test::Name(NAMES[rng.random_range(0..3)]),
            6 | 7 => Test::AnyElem,
            8 if last => Test::Text,
            9 if last => {
                if rng.random_bool(0.3) {
                    Test::AnyAttr
                } else {
                    Test::Attr(["x", "y", "id"][rng.random_range(0..3)])
                }
            }
            _ => Test::AnyElem,
        };
        let npreds = match rng.random_range(0..10) {
            0..=5 => 0,
            6..=8 => 1,
            _ => 2,
        };
        let preds = (0..npreds).map(|_| gen_pred(rng, true)).collect();
        steps.push(Step {
            descendant,
            test,
            preds,
        });
    }
    PathExpr { absolute, steps }
}

fn render_pred(p: &Pred) -> String {
    match p {
        Pred::Pos(k) => k.to_string(),
        Pred::Last => "last()".into(),
        Pred::HasChild(n) => (*n).into(),
        Pred::HasAttr(a) => format!("@{a}"),
        Pred::AttrEq(a, v) => format!("@{a} = {v}"),
        Pred::ChildEq(n, s) => format!("{n} = \"{s}\""),
        Pred::Not(inner) => format!("not({})", render_pred(inner)),
    }
}

impl PathExpr {
    pub fn render(&self) -> String {
        let mut s = String::new();
        for (i, step) in self.steps.iter().enumerate() {
            if self.absolute || i > 0 {
                s.push_str(if step.descendant { "//" } else { "/" });
            }
            s.push_str(&match step.test {
                Test::Name(n) => n.to_string(),
                Test::AnyElem => "*".into(),
                Test::Text => "text()".into(),
                Test::Attr(a) => format!("@{a}"),
                Test::AnyAttr => "@*".into(),
            });
            for p in &step.preds {
                s.push_str(&format!("[{}]", render_pred(p)));
            }
        }
        s
    }
}

fn pred_holds(doc: &OracleDoc, n: usize, pos: usize, size: usize, p: &Pred) -> bool {
    match p {
        Pred::Pos(k) => pos == *k,
        Pred::Last => pos == size,
        Pred::HasChild(name) => doc.child_elems(n, name).next().is_some(),
        Pred::HasAttr(a) => doc.attr(n, a).is_some(),
        Pred::AttrEq(a, v) => doc
            .attr(n, a)
            .is_some_and(|s| s.parse::<f64>().ok() == Some(*v as f64)),
        Pred::ChildEq(name, s) => doc.child_elems(n, name).any(|c| doc.string_value(c) == *s),
        Pred::Not(inner) => !pred_holds(doc, n, pos, size, inner),
    }
}

/// Evaluates `path` by walking the arena, returning arena indices in
/// document order.
pub fn oracle_eval(doc: &OracleDoc, path: &PathExpr) -> Vec<usize> {
    let mut ctx = vec![0usize];
    for step in &path.steps {
        if step.descendant {
            let mut expanded = Vec::new();
            for &c in &ctx {
                doc.desc_or_self(c, &mut expanded);
            }
            expanded.sort_unstable();
            expanded.dedup();
            ctx = expanded;
        }
        let mut out = Vec::new();
        for &c in &ctx {
            let node = &doc.nodes[c];
            let mut cands: Vec<usize> = match &step.test {
                Test::Name(n) => doc.child_elems(c, n).collect(),
                Test::AnyElem => node
                    .children
                    .iter()
                    .copied()
                    .filter(|&x| doc.nodes[x].kind == OKind::Elem)
                    .collect(),
                Test::Text => node
                    .children
                    .iter()
                    .copied()
                    .filter(|&x| doc.nodes[x].kind == OKind::Text)
                    .collect(),
                Test::Attr(a) => node
                    .attrs
                    .iter()
                    .copied()
                    .filter(|&x| doc.nodes[x].name == *a)
                    .collect(),
                Test::AnyAttr => node.attrs.clone(),
            };
            for p in &step.preds {
                let size = cands.len();
                cands = cands
                    .into_iter()
                    .enumerate()
                    .filter(|&(i, n)| pred_holds(doc, n, i + 1, size, p))
                    .map(|(_, n)| n)
                    .collect();
            }
            out.extend(cands);
        }
        out.sort_unstable();
        out.dedup();
        ctx = out;
    }
    ctx
}

/// Runs one document against `paths` random path expressions through
/// both the evaluator and the oracle. Returns how many results were
/// non-empty, or a description of the first mismatch.
pub fn path_round<R: Rng>(rng: &mut R, paths: usize) -> Result<usize, String> {
    let gen = gen_document(rng);
    let xml = gen.to_xml();
    let tree = parse_document(&xml).map_err(|e| format!("{e}: {xml}"))?;
    let doc = OracleDoc::new(&gen);
    let store = NoStore;
    let props = BTreeMap::new();
    let mut non_empty = 0;
    for _ in 0..paths {
        let path = gen_path(rng);
        let text = path.render();
        let expr = qflow::expr::parse_expression(&text).map_err(|e| format!("{text}: {e}"))?;
        let ctx = EvalContext {
            document: tree.root(),
            queue: "",
            properties: &props,
            store: &store,
            target: RuleTarget::None,
            clock: chrono::Utc::now(),
            variables: Vec::new(),
        };
        let (value, _) = evaluate(&expr, &ctx).map_err(|e| format!("{text}: {e}"))?;
        let got: Vec<usize> = node_items(&value)
            .map_err(|e| format!("{text}: {e}"))?
            .iter()
            .map(|n| doc.locate(n))
            .collect();
        let want = oracle_eval(&doc, &path);
        if got != want {
            let show = |v: &[usize]| v.iter().map(|&i| doc.describe(i)).collect::<Vec<_>>().join(",");
            return Err(format!(
                "path {text} over {xml}: engine [{}], oracle [{}]",
                show(&got),
                show(&want)
            ));
        }
        non_empty += usize::from(!want.is_empty());
    }
    Ok(non_empty)
}

fn node_items(v: &Value) -> Result<Vec<NodeRef>, String> {
    v.items()
        .iter()
        .map(|i| match i {
            Item::Node(n) => Ok(n.clone()),
            Item::Atomic(a) => Err(format!("atomic {a:?} in path result")),
        })
        .collect()
}

// ---------------------------------------------------------------------
// Slices

pub const SLICE_APP: &str = r#"
create queue q1 kind basic mode persistent
create queue q2 kind basic mode persistent
create queue q3 kind basic mode persistent
create property p1 as xs:string queue q1, q2
create property p2 as xs:string queue q2, q3
create property p3 as xs:integer queue q1, q3
create slicing s1 on p1
create slicing s2 on p2
create slicing s3 on p3
"#;

const SLICINGS: [(&str, &str); 3] = [("s1", "p1"), ("s2", "p2"), ("s3", "p3")];
const QUEUE_PROPS: [(&str, [&str; 2]); 3] = [("q1", ["p1", "p3"]), ("q2", ["p1", "p2"]), ("q3", ["p2", "p3"])];

fn keys(slicing: &str) -> Vec<Atomic> {
    match slicing {
        "s1" => ["a", "b", "c"].iter().map(|s| Atomic::Str(s.to_string())).collect(),
        "s2" => ["a", "b"].iter().map(|s| Atomic::Str(s.to_string())).collect(),
        _ => (1..=3).map(Atomic::Int).collect(),
    }
}

fn random_value<R: Rng>(rng: &mut R, prop: &str) -> Atomic {
    let slicing = SLICINGS.iter().find(|(_, p)| *p == prop).unwrap().0;
    let ks = keys(slicing);
    ks[rng.random_range(0..ks.len())].clone()
}

/// Executes one random interleaving of enqueues, resets, processing and
/// collection, comparing every slice after every step with membership
/// derived from the operation history. Returns the number of slice
/// comparisons made.
pub fn slice_round<R: Rng>(rng: &mut R, dir: &std::path::Path, steps: usize) -> Result<usize, String> {
    let app = parse_application(SLICE_APP).unwrap();
    let store = Store::open(
        dir,
        &app,
        StoreOptions {
            sync: false,
            ..StoreOptions::default()
        },
    )
    .map_err(|e| e.to_string())?;
    let mut clock = 0u64;
    let mut enqueued_at: HashMap<MessageId, u64> = HashMap::new();
    let mut reset_at: HashMap<(String, String), u64> = HashMap::new();
    let mut checks = 0;
    for _ in 0..steps {
        if rng.random_bool(0.08) {
            store.garbage_collect().map_err(|e| e.to_string())?;
        } else {
            let mut t = store.begin();
            let mut marked = Vec::new();
            for _ in 0..rng.random_range(1..=3) {
                clock += 1;
                match rng.random_range(0..10) {
                    0..=5 => {
                        let (q, props) = QUEUE_PROPS[rng.random_range(0..3)];
                        let mut req = EnqueueRequest::new(q, body("<m/>"));
                        for p in props {
                            if rng.random_bool(0.7) {
                                req = req.with(p, random_value(rng, p));
                            }
                        }
                        let id = t.enqueue(req).map_err(|e| e.to_string())?;
                        enqueued_at.insert(id, clock);
                    }
                    6 | 7 => {
                        let (s, _) = SLICINGS[rng.random_range(0..3)];
                        let ks = keys(s);
                        let k = &ks[rng.random_range(0..ks.len())];
                        t.reset_slice(s, k).map_err(|e| e.to_string())?;
                        reset_at.insert((s.to_string(), k.key_string()), clock);
                    }
                    _ => {
                        let snap = t.snapshot().clone();
                        let open: Vec<_> = snap
                            .unprocessed()
                            .into_iter()
                            .filter(|m| !marked.contains(&m.id))
                            .collect();
                        if !open.is_empty() {
                            let m = &open[rng.random_range(0..open.len())];
                            t.mark_processed(m.id).map_err(|e| e.to_string())?;
                            marked.push(m.id);
                        }
                    }
                }
            }
            t.commit().map_err(|e| e.to_string())?;
        }

        let snap = store.snapshot();
        let mut all = Vec::new();
        for (q, _) in QUEUE_PROPS {
            all.extend(snap.read_queue(q).map_err(|e| e.to_string())?);
        }
        all.sort_by_key(|m| enqueued_at[&m.id]);
        for (s, p) in SLICINGS {
            for k in keys(s) {
                let since = reset_at.get(&(s.to_string(), k.key_string())).copied().unwrap_or(0);
                let want: Vec<MessageId> = all
                    .iter()
                    .filter(|m| m.prop(p) == Some(&k) && enqueued_at[&m.id] > since)
                    .map(|m| m.id)
                    .collect();
                let got: Vec<MessageId> = snap
                    .read_slice(s, &k)
                    .map_err(|e| e.to_string())?
                    .iter()
                    .map(|m| m.id)
                    .collect();
                if got != want {
                    return Err(format!("slice {s}/{k:?}: store {got:?}, brute force {want:?}"));
                }
                checks += 1;
            }
        }
    }
    Ok(checks)
}
