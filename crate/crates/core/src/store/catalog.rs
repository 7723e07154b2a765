use std::collections::HashMap;

use crate::expr::{Atomic, ValueType};
use crate::lang::{ApplicationDef, PropertyClause, PropertyDef, QueueDescriptor, QueueMode, SlicingDef};

/// Indexed view of an application used by the store and the engine.
#[derive(Debug, Clone, Default)]
pub struct Catalog {
    app: ApplicationDef,
    queues: HashMap<String, usize>,
    properties: HashMap<String, usize>,
    slicings: HashMap<String, usize>,
    queue_props: HashMap<String, Vec<(usize, usize)>>,
    queue_slicings: HashMap<String, Vec<usize>>,
}

impl Catalog {
    pub fn new(app: ApplicationDef) -> Self {
        let index = |names: Vec<&String>| -> HashMap<String, usize> {
            names
                .into_iter()
                .enumerate()
                .map(|(i, n)| (n.clone(), i))
                .collect()
        };
        let queues = index(app.queues.iter().map(|q| &q.name).collect());
        let properties = index(app.properties.iter().map(|p| &p.name).collect());
        let slicings = index(app.slicings.iter().map(|s| &s.name).collect());
        let mut queue_props: HashMap<String, Vec<(usize, usize)>> = HashMap::new();
        for (pi, p) in app.properties.iter().enumerate() {
            for (ci, c) in p.clauses.iter().enumerate() {
                for q in &c.queues {
                    let entry = queue_props.entry(q.clone()).or_default();
                    if !entry.iter().any(|(p2, _)| *p2 == pi) {
                        entry.push((pi, ci));
                    }
                }
            }
        }
        let mut queue_slicings: HashMap<String, Vec<usize>> = HashMap::new();
        for q in &app.queues {
            let list = app
                .slicings
                .iter()
                .enumerate()
                .filter(|(_, s)| {
                    app.property(&s.property)
                        .is_some_and(|p| p.clause_for(&q.name).is_some())
                })
                .map(|(i, _)| i)
                .collect();
            queue_slicings.insert(q.name.clone(), list);
        }
        Catalog {
            app,
            queues,
            properties,
            slicings,
            queue_props,
            queue_slicings,
        }
    }

    pub fn app(&self) -> &ApplicationDef {
        &self.app
    }

    pub fn queue(&self, name: &str) -> Option<&QueueDescriptor> {
        self.queues.get(name).map(|&i| &self.app.queues[i])
    }

    pub fn property(&self, name: &str) -> Option<&PropertyDef> {
        self.properties.get(name).map(|&i| &self.app.properties[i])
    }

    pub fn slicing(&self, name: &str) -> Option<&SlicingDef> {
        self.slicings.get(name).map(|&i| &self.app.slicings[i])
    }

    pub fn is_persistent(&self, queue: &str) -> bool {
        self.queue(queue)
            .is_some_and(|q| q.mode == QueueMode::Persistent)
    }

    /// Properties defined on `queue` with the clause that covers it.
    pub fn properties_for_queue(&self, queue: &str) -> impl Iterator<Item = (&PropertyDef, &PropertyClause)> {
        self.queue_props
            .get(queue)
            .into_iter()
            .flatten()
            .map(|&(p, c)| {
                let def = &self.app.properties[p];
                (def, &def.clauses[c])
            })
    }

    pub fn slicings_for_queue(&self, queue: &str) -> impl Iterator<Item = &SlicingDef> {
        self.queue_slicings
            .get(queue)
            .into_iter()
            .flatten()
            .map(|&i| &self.app.slicings[i])
    }

    /// Normalised slice key: the key cast to the slicing property's type,
    /// in lexical form.
    pub fn slice_key(&self, slicing: &str, key: &Atomic) -> Option<String> {
        let s = self.slicing(slicing)?;
        let ty = self
            .property(&s.property)
            .map(|p| p.value_type)
            .unwrap_or(ValueType::String);
        Some(key.cast(ty).unwrap_or_else(|| key.clone()).key_string())
    }
}
