//! Name patterns used in policies: literals, `<>` (exactly one component) and
//! `<>*` (zero or more components), with implicit prefix semantics.
//!
//! A pattern matches a name when it matches some prefix of that name
//! exactly. At most one `<>*` is allowed per pattern, which keeps matching
//! linear in the name length.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::name::{Name, NameComponent, NameError};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PatternError {
    #[error("pattern holds more than one <>* wildcard")]
    MultipleStars,
    #[error(transparent)]
    Name(#[from] NameError),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PatternComponent {
    Literal(NameComponent),
    AnyOne,
    AnyZeroOrMore,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NamePattern {
    components: Vec<PatternComponent>,
}

impl NamePattern {
    pub fn new(components: Vec<PatternComponent>) -> Result<Self, PatternError> {
        let stars = components
            .iter()
            .filter(|c| matches!(c, PatternComponent::AnyZeroOrMore))
            .count();
        if stars > 1 {
            return Err(PatternError::MultipleStars);
        }
        Ok(Self { components })
    }

    /// A literal pattern, matching the name and everything under it.
    pub fn prefix(name: &Name) -> Self {
        Self {
            components: name
                .components()
                .iter()
                .cloned()
                .map(PatternComponent::Literal)
                .collect(),
        }
    }

    pub fn components(&self) -> &[PatternComponent] {
        &self.components
    }

    pub fn has_wildcards(&self) -> bool {
        self.components
            .iter()
            .any(|c| !matches!(c, PatternComponent::Literal(_)))
    }

    /// True iff the pattern matches some prefix of `name` exactly.
    pub fn matches(&self, name: &Name) -> bool {
        let comps = name.components();
        let star = self
            .components
            .iter()
            .position(|c| matches!(c, PatternComponent::AnyZeroOrMore));
        match star {
            None => {
                self.components.len() <= comps.len()
                    && positional(&self.components, &comps[..self.components.len()])
            }
            Some(s) => {
                let (head, tail) = (&self.components[..s], &self.components[s + 1..]);
                if head.len() + tail.len() > comps.len() || !positional(head, &comps[..head.len()]) {
                    return false;
                }
                (head.len() + tail.len()..=comps.len())
                    .any(|end| positional(tail, &comps[end - tail.len()..end]))
            }
        }
    }

    /// True iff some name under `prefix` (including `prefix` itself) could
    /// match this pattern.
    pub fn may_match_under(&self, prefix: &Name) -> bool {
        let n = self.components.len();
        // Each state counts pattern components consumed; a star stays put.
        let closure = |states: &mut Vec<usize>| {
            let mut i = 0;
            while i < states.len() {
                let s = states[i];
                if s < n && matches!(self.components[s], PatternComponent::AnyZeroOrMore) && !states.contains(&(s + 1)) {
                    states.push(s + 1);
                }
                i += 1;
            }
        };
        let mut states = alloc::vec![0usize];
        closure(&mut states);
        for comp in prefix.components() {
            if states.contains(&n) {
                return true;
            }
            let mut next = Vec::new();
            for &s in &states {
                let step = match &self.components[s] {
                    PatternComponent::Literal(l) if l == comp => Some(s + 1),
                    PatternComponent::Literal(_) => None,
                    PatternComponent::AnyOne => Some(s + 1),
                    PatternComponent::AnyZeroOrMore => Some(s),
                };
                if let Some(t) = step {
                    if !next.contains(&t) {
                        next.push(t);
                    }
                }
            }
            closure(&mut next);
            if next.is_empty() {
                return false;
            }
            states = next;
        }
        true
    }

    pub fn to_uri(&self) -> String {
        alloc::format!("{self}")
    }
}

fn positional(pattern: &[PatternComponent], comps: &[NameComponent]) -> bool {
    pattern.iter().zip(comps).all(|(p, c)| match p {
        PatternComponent::Literal(l) => l == c,
        PatternComponent::AnyOne => true,
        PatternComponent::AnyZeroOrMore => unreachable!("star handled by caller"),
    })
}

impl fmt::Display for NamePattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.components.is_empty() {
            return f.write_str("/");
        }
        for c in &self.components {
            f.write_str("/")?;
            match c {
                PatternComponent::Literal(l) => write!(f, "{l}")?,
                PatternComponent::AnyOne => f.write_str("<>")?,
                PatternComponent::AnyZeroOrMore => f.write_str("<>*")?,
            }
        }
        Ok(())
    }
}

impl FromStr for NamePattern {
    type Err = PatternError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let rest = s.strip_prefix('/').ok_or(NameError::NotAbsolute)?;
        let rest = rest.strip_suffix('/').unwrap_or(rest);
        if rest.is_empty() {
            return Ok(Self { components: Vec::new() });
        }
        let mut comps = Vec::new();
        for seg in rest.split('/') {
            comps.push(match seg {
                "<>" => PatternComponent::AnyOne,
                "<>*" => PatternComponent::AnyZeroOrMore,
                _ => {
                    let n: Name = alloc::format!("/{seg}").parse()?;
                    PatternComponent::Literal(n.components()[0].clone())
                }
            });
        }
        Self::new(comps)
    }
}

impl From<&Name> for NamePattern {
    fn from(name: &Name) -> Self {
        Self::prefix(name)
    }
}

#[cfg(test)]
pub(crate) mod oracle {
    //! Backtracking matcher that tries every wildcard assignment. Used only
    //! to cross-check the linear matcher.
    use super::*;

    fn exact(p: &[PatternComponent], n: &[NameComponent]) -> bool {
        match p.split_first() {
            None => n.is_empty(),
            Some((PatternComponent::AnyZeroOrMore, rest)) => (0..=n.len()).any(|k| exact(rest, &n[k..])),
            Some((PatternComponent::AnyOne, rest)) => !n.is_empty() && exact(rest, &n[1..]),
            Some((PatternComponent::Literal(l), rest)) => n.first() == Some(l) && exact(rest, &n[1..]),
        }
    }

    pub fn brute_match(p: &NamePattern, n: &Name) -> bool {
        let comps = n.components();
        (0..=comps.len()).any(|k| exact(p.components(), &comps[..k]))
    }
}

#[cfg(test)]
mod tests {
    use super::oracle::brute_match;
    use alloc::string::ToString;
    use super::*;
    use crate::name::name;
    use proptest::prelude::*;

    fn pat(s: &str) -> NamePattern {
        s.parse().unwrap()
    }

    #[test]
    fn footnote_examples() {
        let p = pat("/alice-home/LOCK/<>*/CMD");
        assert!(p.matches(&name("/alice-home/LOCK/CMD")));
        assert!(p.matches(&name("/alice-home/LOCK/frontdoor/CMD/lock/t=5")));
        assert!(!p.matches(&name("/alice-home/LOCK/frontdoor")));
        assert!(!pat("/alice-home/TEMP").matches(&name("/alice-home/AirCon/bedroom")));
        assert!(pat("/alice-home/TEMP").matches(&name("/alice-home/TEMP/bedroom/senor-1")));
    }

    #[test]
    fn any_one() {
        let p = pat("/h/<>/bedroom");
        assert!(p.matches(&name("/h/AirCon/bedroom/ac")));
        assert!(!p.matches(&name("/h/bedroom")));
    }

    #[test]
    fn parse_and_display() {
        let p = pat("/a/<>/<>*/b");
        assert_eq!(p.to_string(), "/a/<>/<>*/b");
        assert_eq!("/a/<>*/<>*".parse::<NamePattern>(), Err(PatternError::MultipleStars));
    }

    #[test]
    fn may_match_under_cases() {
        let lock = pat("/h/LOCK/<>*/CMD");
        assert!(lock.may_match_under(&name("/h/LOCK")));
        assert!(lock.may_match_under(&name("/h")));
        assert!(!lock.may_match_under(&name("/h/TEMP")));
        assert!(pat("/h").may_match_under(&name("/h/TEMP/x")));
        assert!(pat("/h/<>*/CMD").may_match_under(&name("/h/Light")));
        assert!(!pat("/h/TEMP/CONTENT").may_match_under(&name("/h/TEMP/DKEY")));
    }

    fn arb_pattern() -> impl Strategy<Value = NamePattern> {
        let comp = prop_oneof![
            4 => (0u8..4).prop_map(|i| PatternComponent::Literal(NameComponent::new([b'a' + i]).unwrap())),
            1 => Just(PatternComponent::AnyOne),
        ];
        (prop::collection::vec(comp, 0..5), prop::option::of(0usize..5)).prop_map(|(mut v, star)| {
            if let Some(pos) = star {
                v.insert(pos.min(v.len()), PatternComponent::AnyZeroOrMore);
            }
            NamePattern::new(v).unwrap()
        })
    }

    fn arb_name() -> impl Strategy<Value = Name> {
        prop::collection::vec((0u8..4).prop_map(|i| NameComponent::new([b'a' + i]).unwrap()), 0..6)
            .prop_map(Name::from_components)
    }

    proptest! {
        #[test]
        fn agrees_with_backtracking_oracle(p in arb_pattern(), n in arb_name()) {
            prop_assert_eq!(p.matches(&n), brute_match(&p, &n));
        }

        #[test]
        fn may_match_under_agrees_with_extension_search(p in arb_pattern(), n in arb_name()) {
            // Extending by up to five components over the same alphabet is
            // enough to witness any match (patterns have at most 6 parts).
            let mut found = brute_match(&p, &n);
            let mut frontier = alloc::vec![n.clone()];
            for _ in 0..5 {
                if found { break; }
                let mut next = Vec::new();
                for f in &frontier {
                    for i in 0..4u8 {
                        let ext = f.child(NameComponent::new([b'a' + i]).unwrap());
                        found |= brute_match(&p, &ext);
                        next.push(ext);
                    }
                }
                frontier = next;
            }
            prop_assert_eq!(p.may_match_under(&n), found);
        }

        #[test]
        fn trailing_star_is_monotone(p in arb_pattern(), n in arb_name(), extra in arb_name()) {
            let mut comps = p.components().to_vec();
            if !comps.contains(&PatternComponent::AnyZeroOrMore) {
                comps.push(PatternComponent::AnyZeroOrMore);
            }
            let p = NamePattern::new(comps).unwrap();
            if p.matches(&n) {
                prop_assert!(p.matches(&n.append(&extra)));
            }
        }

        #[test]
        fn display_parse_round_trip(p in arb_pattern()) {
            prop_assert_eq!(p.to_string().parse::<NamePattern>().unwrap(), p);
        }
    }
}
