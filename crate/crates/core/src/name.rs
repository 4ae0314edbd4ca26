//! Hierarchical names and their canonical URI text form.
//!
//! A [`Name`] is an ordered list of generic components. Names order
//! component-wise, each component comparing as a byte string, so a prefix
//! always sorts before its extensions.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

/// Upper bound on a single component's length in this system.
pub const MAX_COMPONENT_LEN: usize = 255;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum NameError {
    #[error("empty name component")]
    EmptyComponent,
    #[error("name component longer than {MAX_COMPONENT_LEN} bytes")]
    ComponentTooLong,
    #[error("name component contains '/'")]
    Slash,
    #[error("URI must start with '/'")]
    NotAbsolute,
    #[error("bad percent escape")]
    BadEscape,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NameComponent(Vec<u8>);

impl NameComponent {
    pub fn new(value: impl Into<Vec<u8>>) -> Result<Self, NameError> {
        let value = value.into();
        if value.is_empty() {
            return Err(NameError::EmptyComponent);
        }
        if value.len() > MAX_COMPONENT_LEN {
            return Err(NameError::ComponentTooLong);
        }
        Ok(Self(value))
    }

    /// Builds a component from text that must not contain a path separator.
    pub fn from_text(text: &str) -> Result<Self, NameError> {
        if text.contains('/') {
            return Err(NameError::Slash);
        }
        Self::new(text.as_bytes())
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn as_str(&self) -> Option<&str> {
        core::str::from_utf8(&self.0).ok()
    }

    /// Parses a `t=<millis>` uniqueness/version component.
    pub fn timestamp(&self) -> Option<u64> {
        self.as_str()?.strip_prefix("t=")?.parse().ok()
    }

    pub fn from_timestamp(millis: u64) -> Self {
        Self(alloc::format!("t={millis}").into_bytes())
    }

    fn write_escaped(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.0 {
            if b > 0x20 && b < 0x7f && b != b'/' && b != b'%' {
                write!(f, "{}", b as char)?;
            } else {
                write!(f, "%{b:02X}")?;
            }
        }
        Ok(())
    }
}

impl fmt::Display for NameComponent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.write_escaped(f)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Name {
    components: Vec<NameComponent>,
}

impl Name {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_components(components: Vec<NameComponent>) -> Self {
        Self { components }
    }

    /// Builds a name from text components, each validated.
    pub fn from_parts<S: AsRef<str>>(parts: &[S]) -> Result<Self, NameError> {
        parts
            .iter()
            .map(|p| NameComponent::from_text(p.as_ref()))
            .collect::<Result<Vec<_>, _>>()
            .map(Self::from_components)
    }

    pub fn components(&self) -> &[NameComponent] {
        &self.components
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<&NameComponent> {
        self.components.get(i)
    }

    pub fn last(&self) -> Option<&NameComponent> {
        self.components.last()
    }

    pub fn push(&mut self, component: NameComponent) {
        self.components.push(component);
    }

    pub fn child(&self, component: NameComponent) -> Self {
        let mut out = self.clone();
        out.push(component);
        out
    }

    /// Appends a text component. Panics on an invalid component, so only use
    /// it with constants.
    pub fn with(&self, text: &str) -> Self {
        self.child(NameComponent::from_text(text).expect("valid constant component"))
    }

    pub fn append(&self, other: &Name) -> Self {
        let mut out = self.clone();
        out.components.extend(other.components.iter().cloned());
        out
    }

    pub fn prefix(&self, len: usize) -> Self {
        Self {
            components: self.components[..len.min(self.len())].to_vec(),
        }
    }

    pub fn suffix_from(&self, start: usize) -> Self {
        Self {
            components: self.components[start.min(self.len())..].to_vec(),
        }
    }

    pub fn is_prefix_of(&self, other: &Name) -> bool {
        self.len() <= other.len() && self.components[..] == other.components[..self.len()]
    }

    /// Position of the first component equal to `text`.
    pub fn position(&self, text: &str) -> Option<usize> {
        self.components.iter().position(|c| c.as_bytes() == text.as_bytes())
    }

    /// Timestamp carried in the last component, if it is a `t=` component.
    pub fn timestamp(&self) -> Option<u64> {
        self.last().and_then(NameComponent::timestamp)
    }

    pub fn to_uri(&self) -> String {
        alloc::format!("{self}")
    }
}

impl fmt::Display for Name {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.components.is_empty() {
            return f.write_str("/");
        }
        for c in &self.components {
            f.write_str("/")?;
            c.write_escaped(f)?;
        }
        Ok(())
    }
}

fn unescape(segment: &str) -> Result<Vec<u8>, NameError> {
    let bytes = segment.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'%' {
            let hex = bytes.get(i + 1..i + 3).ok_or(NameError::BadEscape)?;
            let hex = core::str::from_utf8(hex).map_err(|_| NameError::BadEscape)?;
            out.push(u8::from_str_radix(hex, 16).map_err(|_| NameError::BadEscape)?);
            i += 3;
        } else {
            out.push(bytes[i]);
            i += 1;
        }
    }
    Ok(out)
}

impl FromStr for Name {
    type Err = NameError;

    /// Parses `/a/b/c`. A trailing slash is tolerated; `/` is the empty name.
    fn from_str(uri: &str) -> Result<Self, Self::Err> {
        let uri = uri.trim();
        let rest = uri.strip_prefix('/').ok_or(NameError::NotAbsolute)?;
        let rest = rest.strip_suffix('/').unwrap_or(rest);
        if rest.is_empty() {
            return Ok(Name::new());
        }
        rest.split('/')
            .map(|seg| NameComponent::new(unescape(seg)?))
            .collect::<Result<Vec<_>, _>>()
            .map(Name::from_components)
    }
}

/// Shorthand for parsing a constant URI in tests and examples.
pub fn name(uri: &str) -> Name {
    uri.parse().expect("valid name URI")
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;

    #[test]
    fn uri_round_trip_with_escapes() {
        let n = Name::from_components(alloc::vec![
            NameComponent::new(*b"alice-home").unwrap(),
            NameComponent::new(*b"living room").unwrap(),
            NameComponent::new([0u8, 0x2f, 0x25, 0xff]).unwrap(),
        ]);
        let uri = n.to_string();
        assert_eq!(uri, "/alice-home/living%20room/%00%2F%25%FF");
        assert_eq!(uri.parse::<Name>().unwrap(), n);
    }

    #[test]
    fn raw_spaces_are_accepted() {
        let n: Name = "/alice-home/TEMP/CONTENT/living room".parse().unwrap();
        assert_eq!(n.get(3).unwrap().as_bytes(), b"living room");
    }

    #[test]
    fn empty_and_root() {
        assert_eq!("/".parse::<Name>().unwrap(), Name::new());
        assert_eq!(Name::new().to_string(), "/");
        assert_eq!("/a//b".parse::<Name>(), Err(NameError::EmptyComponent));
        assert_eq!("a/b".parse::<Name>(), Err(NameError::NotAbsolute));
        assert_eq!("/a%2".parse::<Name>(), Err(NameError::BadEscape));
    }

    #[test]
    fn component_limits() {
        assert!(NameComponent::new(alloc::vec![1u8; 255]).is_ok());
        assert_eq!(
            NameComponent::new(alloc::vec![1u8; 256]),
            Err(NameError::ComponentTooLong)
        );
        assert_eq!(NameComponent::from_text("a/b"), Err(NameError::Slash));
    }

    #[test]
    fn prefix_ordering() {
        let a = name("/a/b");
        let b = name("/a/b/c");
        assert!(a.is_prefix_of(&b));
        assert!(!b.is_prefix_of(&a));
        assert!(a < b);
        assert!(name("/a/b/c") < name("/a/c"));
    }

    #[test]
    fn timestamps() {
        let n = name("/x/t=1700000000123");
        assert_eq!(n.timestamp(), Some(1_700_000_000_123));
        assert_eq!(NameComponent::from_timestamp(5).to_string(), "t=5");
        assert_eq!(name("/x/y").timestamp(), None);
    }
}
