//! Prompt templates with named placeholders.
//!
//! Syntax: `{name}` substitutes a value, where `name` matches
//! `[A-Za-z_][A-Za-z0-9_()]*` (so `{image(s)}` is a placeholder).
//! `{{#items}} ... {{/items}}` repeats its body once per item of the list
//! `items`; inside the body, item fields shadow outer values. Any other brace
//! is literal text, so JSON examples can appear verbatim. Values are inserted
//! as-is and never rescanned for placeholders.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
enum Node {
    Text(String),
    Var(String),
    Block { name: String, body: Vec<Node> },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    id: String,
    nodes: Vec<Node>,
}

pub type Fields = BTreeMap<String, String>;

#[derive(Debug, Clone, Default)]
pub struct Context {
    vars: Fields,
    blocks: BTreeMap<String, Vec<Fields>>,
}

impl Context {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn var(mut self, name: &str, value: impl Into<String>) -> Self {
        self.vars.insert(name.to_string(), value.into());
        self
    }

    pub fn block(mut self, name: &str, items: Vec<Fields>) -> Self {
        self.blocks.insert(name.to_string(), items);
        self
    }
}

fn is_ident_start(c: char) -> bool {
    c.is_ascii_alphabetic() || c == '_'
}

fn is_ident_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_' || c == '(' || c == ')'
}

/// Length of `{ident}` at the start of `s`, if present.
fn placeholder_at(s: &str) -> Option<(usize, &str)> {
    let rest = s.strip_prefix('{')?;
    let mut chars = rest.char_indices();
    let (_, first) = chars.next()?;
    if !is_ident_start(first) {
        return None;
    }
    for (i, c) in chars {
        if c == '}' {
            return Some((i + 2, &rest[..i]));
        }
        if !is_ident_char(c) {
            return None;
        }
    }
    None
}

/// `{{#name}}` or `{{/name}}` at the start of `s`.
fn block_marker_at(s: &str) -> Option<(usize, bool, &str)> {
    let rest = s.strip_prefix("{{")?;
    let (open, rest) = match rest.chars().next()? {
        '#' => (true, &rest[1..]),
        '/' => (false, &rest[1..]),
        _ => return None,
    };
    let end = rest.find("}}")?;
    let name = &rest[..end];
    if name.is_empty() || !name.starts_with(is_ident_start) || !name.chars().all(is_ident_char) {
        return None;
    }
    Some((3 + end + 2, open, name))
}

impl Template {
    pub fn parse(id: &str, text: &str) -> Result<Self> {
        let err = |message: String| Error::Template {
            template: id.to_string(),
            message,
        };
        // Stack of (block name, nodes collected so far).
        let mut stack: Vec<(Option<String>, Vec<Node>)> = vec![(None, Vec::new())];
        let mut text_buf = String::new();
        let mut i = 0;
        while i < text.len() {
            let rest = &text[i..];
            if let Some((len, open, name)) = block_marker_at(rest) {
                let top = &mut stack.last_mut().expect("stack never empty").1;
                if !text_buf.is_empty() {
                    top.push(Node::Text(std::mem::take(&mut text_buf)));
                }
                if open {
                    stack.push((Some(name.to_string()), Vec::new()));
                } else {
                    let (open_name, body) = stack.pop().expect("stack never empty");
                    match open_name {
                        Some(n) if n == name => stack
                            .last_mut()
                            .ok_or_else(|| err("unbalanced block".into()))?
                            .1
                            .push(Node::Block { name: n, body }),
                        _ => return Err(err(format!("unexpected block close {{{{/{name}}}}}"))),
                    }
                }
                i += len;
            } else if let Some((len, name)) = placeholder_at(rest) {
                let top = &mut stack.last_mut().expect("stack never empty").1;
                if !text_buf.is_empty() {
                    top.push(Node::Text(std::mem::take(&mut text_buf)));
                }
                top.push(Node::Var(name.to_string()));
                i += len;
            } else {
                let c = rest.chars().next().expect("non-empty rest");
                text_buf.push(c);
                i += c.len_utf8();
            }
        }
        if stack.len() != 1 {
            let name = stack.last().and_then(|s| s.0.clone()).unwrap_or_default();
            return Err(err(format!("block {{{{#{name}}}}} is never closed")));
        }
        let mut nodes = stack.pop().expect("root").1;
        if !text_buf.is_empty() {
            nodes.push(Node::Text(text_buf));
        }
        Ok(Template {
            id: id.to_string(),
            nodes,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    /// Names of all scalar placeholders, including those inside blocks.
    pub fn placeholders(&self) -> BTreeSet<String> {
        fn walk(nodes: &[Node], out: &mut BTreeSet<String>) {
            for n in nodes {
                match n {
                    Node::Var(v) => {
                        out.insert(v.clone());
                    }
                    Node::Block { body, .. } => walk(body, out),
                    Node::Text(_) => {}
                }
            }
        }
        let mut out = BTreeSet::new();
        walk(&self.nodes, &mut out);
        out
    }

    pub fn render(&self, ctx: &Context) -> Result<String> {
        let mut out = String::new();
        self.render_nodes(&self.nodes, ctx, None, &mut out)?;
        Ok(out)
    }

    fn render_nodes(
        &self,
        nodes: &[Node],
        ctx: &Context,
        item: Option<&Fields>,
        out: &mut String,
    ) -> Result<()> {
        for n in nodes {
            match n {
                Node::Text(t) => out.push_str(t),
                Node::Var(v) => {
                    let value = item
                        .and_then(|f| f.get(v))
                        .or_else(|| ctx.vars.get(v))
                        .ok_or_else(|| Error::Template {
                            template: self.id.clone(),
                            message: format!("unresolved placeholder {{{v}}}"),
                        })?;
                    out.push_str(value);
                }
                Node::Block { name, body } => {
                    let items = ctx.blocks.get(name).ok_or_else(|| Error::Template {
                        template: self.id.clone(),
                        message: format!("no list supplied for block {name:?}"),
                    })?;
                    for it in items {
                        self.render_nodes(body, ctx, Some(it), out)?;
                    }
                }
            }
        }
        Ok(())
    }
}

pub const FEATURES: &str = "features";
pub const SESSION: &str = "session";
pub const USER_SEQUENTIAL: &str = "user_sequential";
pub const USER_AU: &str = "user_au";
pub const USER_SHUFFLED: &str = "user_shuffled";

const BUILTIN: [(&str, &str); 5] = [
    (FEATURES, include_str!("../assets/templates/features.txt")),
    (SESSION, include_str!("../assets/templates/session.txt")),
    (USER_SEQUENTIAL, include_str!("../assets/templates/user_sequential.txt")),
    (USER_AU, include_str!("../assets/templates/user_au.txt")),
    (USER_SHUFFLED, include_str!("../assets/templates/user_shuffled.txt")),
];

/// The five pipeline templates, keyed by id.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    templates: BTreeMap<String, Template>,
}

impl TemplateSet {
    pub fn builtin() -> Self {
        let templates = BUILTIN
            .iter()
            .map(|(id, text)| {
                let t = Template::parse(id, text).expect("bundled templates parse");
                (id.to_string(), t)
            })
            .collect();
        TemplateSet { templates }
    }

    /// Bundled templates, overridden by `<id>.txt` files present in `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mut set = Self::builtin();
        for (id, _) in BUILTIN {
            let path = dir.join(format!("{id}.txt"));
            if path.exists() {
                let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                set.templates.insert(id.to_string(), Template::parse(id, &text)?);
            }
        }
        Ok(set)
    }

    pub fn get(&self, id: &str) -> Result<&Template> {
        self.templates.get(id).ok_or_else(|| Error::Template {
            template: id.to_string(),
            message: "no such template".into(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn substitutes_and_keeps_json_braces() {
        let t = Template::parse("t", r#"Hi {name}! {"k": 1} {image(s)} { x }"#).unwrap();
        let s = t
            .render(&Context::new().var("name", "Ann").var("image(s)", "[img]"))
            .unwrap();
        assert_eq!(s, r#"Hi Ann! {"k": 1} [img] { x }"#);
    }

    #[test]
    fn values_are_not_rescanned() {
        let t = Template::parse("t", "{a}").unwrap();
        assert_eq!(t.render(&Context::new().var("a", "{b}")).unwrap(), "{b}");
    }

    #[test]
    fn repeated_blocks_with_shadowing() {
        let t = Template::parse("t", "{{#xs}}{i}:{v}{sep}{{/xs}}end").unwrap();
        let items = (1..=3)
            .map(|i| {
                let mut f = Fields::new();
                f.insert("i".into(), i.to_string());
                f.insert("v".into(), format!("x{i}"));
                f
            })
            .collect();
        let s = t
            .render(&Context::new().block("xs", items).var("sep", ";").var("i", "outer"))
            .unwrap();
        assert_eq!(s, "1:x1;2:x2;3:x3;end");
    }

    #[test]
    fn unresolved_and_malformed() {
        let t = Template::parse("t", "{missing}").unwrap();
        assert!(matches!(t.render(&Context::new()), Err(Error::Template { .. })));
        assert!(Template::parse("t", "{{#a}}x").is_err());
        assert!(Template::parse("t", "{{#a}}x{{/b}}").is_err());
        assert!(Template::parse("t", "x{{/b}}").is_err());
    }

    #[test]
    fn bundled_templates_have_expected_placeholders() {
        let set = TemplateSet::builtin();
        let f = set.get(FEATURES).unwrap().placeholders();
        for p in ["image(s)", "title", "upper_texts_str", "iab_list"] {
            assert!(f.contains(p), "{p}");
        }
        let s = set.get(SESSION).unwrap().placeholders();
        for p in [
            "i",
            "caption",
            "iab_category_tier_1",
            "descriptive_category",
            "key_entities_in_images_and_slogan",
            "label_options",
        ] {
            assert!(s.contains(p), "{p}");
        }
        for id in [USER_SEQUENTIAL, USER_AU, USER_SHUFFLED] {
            let u = set.get(id).unwrap().placeholders();
            assert!(u.contains("i") && u.contains("summary"));
        }
        assert!(set
            .get(USER_SHUFFLED)
            .unwrap()
            .render(
                &Context::new()
                    .block("sessions", vec![])
                    .var("label_options", "")
            )
            .unwrap()
            .contains("presented in random order"));
    }
}
