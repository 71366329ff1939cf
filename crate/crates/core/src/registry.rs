//! Name-keyed registries for the engine's interchangeable strategies
//! (samplers, mask modes, reference-noise policies).

use indexmap::IndexMap;

use crate::error::{Error, Result};

type Ctor<T> = Box<dyn Fn() -> Box<T> + Send + Sync>;

pub struct Registry<T: ?Sized> {
    kind: &'static str,
    entries: IndexMap<&'static str, Ctor<T>>,
}

impl<T: ?Sized> Registry<T> {
    pub fn new(kind: &'static str) -> Self {
        Self {
            kind,
            entries: IndexMap::new(),
        }
    }

    /// Registers `ctor` under `name`, replacing any earlier entry.
    pub fn register(
        &mut self,
        name: &'static str,
        ctor: impl Fn() -> Box<T> + Send + Sync + 'static,
    ) -> &mut Self {
        self.entries.insert(name, Box::new(ctor));
        self
    }

    pub fn create(&self, name: &str) -> Result<Box<T>> {
        self.entries.get(name).map(|c| c()).ok_or_else(|| {
            Error::Config(format!(
                "unknown {} {name:?}; known: {}",
                self.kind,
                self.names().join(", ")
            ))
        })
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }
}
