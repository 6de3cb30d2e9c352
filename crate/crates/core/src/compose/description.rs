use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Semantic component kinds of an action description.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ComponentKind {
    Verb,
    Preposition,
    Noun,
}

impl ComponentKind {
    pub const ALL: [ComponentKind; 3] = [ComponentKind::Verb, ComponentKind::Preposition, ComponentKind::Noun];

    pub fn index(self) -> usize {
        self as usize
    }

    fn letter(self) -> char {
        match self {
            ComponentKind::Verb => 'v',
            ComponentKind::Preposition => 'p',
            ComponentKind::Noun => 'n',
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ComponentKind::Verb => "verb",
            ComponentKind::Preposition => "prep",
            ComponentKind::Noun => "noun",
        }
    }
}

/// Position of one component inside its kind's list, e.g. the second verb.
/// Serialized as `v1`, `p0`, `n0`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ComponentRef {
    pub kind: ComponentKind,
    pub index: usize,
}

impl ComponentRef {
    pub fn new(kind: ComponentKind, index: usize) -> Self {
        ComponentRef { kind, index }
    }
}

impl fmt::Display for ComponentRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.kind.letter(), self.index)
    }
}

impl FromStr for ComponentRef {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let mut chars = s.chars();
        let kind = match chars.next() {
            Some('v') => ComponentKind::Verb,
            Some('p') => ComponentKind::Preposition,
            Some('n') => ComponentKind::Noun,
            _ => return Err(format!("bad component reference `{s}`")),
        };
        let index = chars
            .as_str()
            .parse()
            .map_err(|_| format!("bad component index in `{s}`"))?;
        Ok(ComponentRef { kind, index })
    }
}

impl TryFrom<String> for ComponentRef {
    type Error = String;
    fn try_from(s: String) -> std::result::Result<Self, String> {
        s.parse()
    }
}

impl From<ComponentRef> for String {
    fn from(c: ComponentRef) -> String {
        c.to_string()
    }
}

/// Ordered verb / preposition / noun content of an action class.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ActionDescription {
    pub verbs: Vec<u32>,
    pub preps: Vec<u32>,
    pub nouns: Vec<u32>,
    /// Interleaved appearance order of every component.
    pub order: Vec<ComponentRef>,
}

/// The shape of a description without its vocabulary ids: how many of each
/// kind and in which order. Two classes with the same layout produce
/// representations through the same reducers and concatenation order.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Layout {
    pub counts: [usize; 3],
    pub order: Vec<ComponentRef>,
}

impl Layout {
    pub fn count(&self, kind: ComponentKind) -> usize {
        self.counts[kind.index()]
    }
}

impl ActionDescription {
    /// Builds a description with the canonical interleaving used by the
    /// synthetic generator: first verb, its object, a preposition with its
    /// reference noun, then the second verb and remaining components.
    pub fn new(verbs: Vec<u32>, preps: Vec<u32>, nouns: Vec<u32>) -> Self {
        let order = canonical_order(verbs.len(), preps.len(), nouns.len());
        ActionDescription {
            verbs,
            preps,
            nouns,
            order,
        }
    }

    pub fn ids(&self, kind: ComponentKind) -> &[u32] {
        match kind {
            ComponentKind::Verb => &self.verbs,
            ComponentKind::Preposition => &self.preps,
            ComponentKind::Noun => &self.nouns,
        }
    }

    pub fn count(&self, kind: ComponentKind) -> usize {
        self.ids(kind).len()
    }

    pub fn layout(&self) -> Layout {
        Layout {
            counts: ComponentKind::ALL.map(|k| self.count(k)),
            order: self.order.clone(),
        }
    }

    /// Checks the structural invariants against the per-kind maxima
    /// `[verbs, preps, nouns]`.
    pub fn validate(&self, n_max: [usize; 3]) -> Result<()> {
        if self.verbs.is_empty() || self.nouns.is_empty() {
            return Err(Error::InvalidSample(
                "description needs at least one verb and one noun".into(),
            ));
        }
        for kind in ComponentKind::ALL {
            if self.count(kind) > n_max[kind.index()] {
                return Err(Error::InvalidSample(format!(
                    "{} {}s exceed the configured maximum {}",
                    self.count(kind),
                    kind.name(),
                    n_max[kind.index()]
                )));
            }
        }
        let mut expected: Vec<ComponentRef> = ComponentKind::ALL
            .iter()
            .flat_map(|&k| (0..self.count(k)).map(move |i| ComponentRef::new(k, i)))
            .collect();
        let mut got = self.order.clone();
        expected.sort();
        got.sort();
        if expected != got {
            return Err(Error::InvalidSample(
                "order is not a permutation of the components".into(),
            ));
        }
        Ok(())
    }
}

/// `v0 n0 [p0 [n1]] [v1] [p1] [n1]` with the bracketed parts present when
/// the counts allow.
pub fn canonical_order(n_verbs: usize, n_preps: usize, n_nouns: usize) -> Vec<ComponentRef> {
    use ComponentKind::*;
    let mut order = Vec::new();
    let mut next = [0usize; 3];
    let limit = [n_verbs, n_preps, n_nouns];
    let take = |order: &mut Vec<ComponentRef>, next: &mut [usize; 3], kind: ComponentKind| {
        let i = kind.index();
        if next[i] < limit[i] {
            order.push(ComponentRef::new(kind, next[i]));
            next[i] += 1;
        }
    };
    take(&mut order, &mut next, Verb);
    take(&mut order, &mut next, Noun);
    if n_preps > 0 {
        take(&mut order, &mut next, Preposition);
        take(&mut order, &mut next, Noun);
    }
    while next != limit {
        take(&mut order, &mut next, Verb);
        take(&mut order, &mut next, Preposition);
        take(&mut order, &mut next, Noun);
    }
    order
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_orders() {
        let s = |o: Vec<ComponentRef>| o.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(" ");
        assert_eq!(s(canonical_order(1, 0, 1)), "v0 n0");
        assert_eq!(s(canonical_order(1, 1, 2)), "v0 n0 p0 n1");
        assert_eq!(s(canonical_order(2, 2, 1)), "v0 n0 p0 v1 p1");
        assert_eq!(s(canonical_order(2, 0, 2)), "v0 n0 v1 n1");
    }

    #[test]
    fn component_ref_serde() {
        let d = ActionDescription::new(vec![3, 1], vec![], vec![2]);
        let json = serde_json::to_string(&d).unwrap();
        assert!(json.contains(r#""order":["v0","n0","v1"]"#));
        let back: ActionDescription = serde_json::from_str(&json).unwrap();
        assert_eq!(back, d);
        assert!("x1".parse::<ComponentRef>().is_err());
    }

    #[test]
    fn validate_checks_order_and_counts() {
        let mut d = ActionDescription::new(vec![0, 1], vec![2], vec![0]);
        d.validate([2, 2, 2]).unwrap();
        assert!(d.validate([1, 2, 2]).is_err());
        d.order.pop();
        assert!(d.validate([2, 2, 2]).is_err());
        assert!(ActionDescription::new(vec![], vec![], vec![0]).validate([2, 2, 2]).is_err());
    }
}
