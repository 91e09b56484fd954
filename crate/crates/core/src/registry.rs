//! Name-keyed strategy registries.
//!
//! Every pluggable algorithm family in the harness — generation backends,
//! equivalence scorers, entailment filters, mask tokenizers — lives behind a
//! trait object and is constructed from a `{"kind": "...", ...}` descriptor
//! in the run config. Each family owns one [`Registry`] listing its builtin
//! variants; `build` dispatches on the `kind` string and hands the remaining
//! descriptor fields to the variant's factory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde_json::Value;

use crate::error::{Error, Result};
use crate::gateway::cache::DiskCache;
use crate::gateway::RetryPolicy;

/// Shared construction context passed to every strategy factory.
///
/// Carries the cross-cutting machinery a strategy may opt into: the on-disk
/// response cache and the retry policy for remote calls. The config dir is
/// the base for resolving relative paths in descriptors.
#[derive(Clone, Default)]
pub struct BuildContext {
    pub cache: Option<DiskCache>,
    pub retry: RetryPolicy,
    pub base_dir: Option<PathBuf>,
}

impl BuildContext {
    /// Resolve a possibly-relative path from a descriptor against the
    /// directory the config file was loaded from.
    pub fn resolve(&self, path: &str) -> PathBuf {
        let p = Path::new(path);
        match (&self.base_dir, p.is_relative()) {
            (Some(base), true) => base.join(p),
            _ => p.to_path_buf(),
        }
    }
}

type Factory<T> = fn(&Value, &BuildContext) -> Result<Box<T>>;

/// A family of interchangeable strategies keyed by kind name.
pub struct Registry<T: ?Sized> {
    family: &'static str,
    entries: BTreeMap<&'static str, Factory<T>>,
}

impl<T: ?Sized> Registry<T> {
    pub fn new(family: &'static str) -> Self {
        Registry {
            family,
            entries: BTreeMap::new(),
        }
    }

    pub fn register(mut self, kind: &'static str, factory: Factory<T>) -> Self {
        let previous = self.entries.insert(kind, factory);
        assert!(
            previous.is_none(),
            "duplicate {} strategy {kind:?}",
            self.family
        );
        self
    }

    /// Registered kind names, sorted.
    pub fn kinds(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }

    /// Construct the strategy named by `descriptor["kind"]`.
    pub fn build(&self, descriptor: &Value, ctx: &BuildContext) -> Result<Box<T>> {
        let kind = descriptor
            .get("kind")
            .and_then(Value::as_str)
            .ok_or_else(|| {
                Error::config(format!(
                    "{} descriptor needs a \"kind\" field (one of {:?})",
                    self.family,
                    self.kinds()
                ))
            })?;
        let factory = self.entries.get(kind).ok_or_else(|| {
            Error::config(format!(
                "unknown {} kind {kind:?}; registered: {:?}",
                self.family,
                self.kinds()
            ))
        })?;
        factory(descriptor, ctx)
    }
}

/// Deserialize the non-`kind` fields of a descriptor into a typed options
/// struct. Factories call this so option structs can use plain serde derives.
pub fn options<O: serde::de::DeserializeOwned>(descriptor: &Value, family: &str) -> Result<O> {
    serde_json::from_value(descriptor.clone())
        .map_err(|e| Error::config(format!("bad {family} descriptor: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    trait Greeter {
        fn greet(&self) -> String;
    }

    struct Hello(String);
    impl Greeter for Hello {
        fn greet(&self) -> String {
            format!("hello {}", self.0)
        }
    }

    fn registry() -> Registry<dyn Greeter> {
        Registry::new("greeter").register("hello", |v, _| {
            let name = v.get("name").and_then(Value::as_str).unwrap_or("world");
            Ok(Box::new(Hello(name.to_string())))
        })
    }

    #[test]
    fn builds_by_kind() {
        let reg = registry();
        let g = reg
            .build(
                &serde_json::json!({"kind": "hello", "name": "there"}),
                &BuildContext::default(),
            )
            .unwrap();
        assert_eq!(g.greet(), "hello there");
    }

    #[test]
    fn unknown_kind_lists_registered() {
        let reg = registry();
        let Err(err) = reg.build(
            &serde_json::json!({"kind": "nope"}),
            &BuildContext::default(),
        ) else {
            panic!("expected an error")
        };
        assert!(err.to_string().contains("hello"), "{err}");
    }

    #[test]
    fn missing_kind_is_config_error() {
        let reg = registry();
        let Err(err) = reg.build(&serde_json::json!({}), &BuildContext::default()) else {
            panic!("expected an error")
        };
        assert_eq!(err.exit_code(), 2);
    }
}
