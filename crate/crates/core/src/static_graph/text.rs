//! Line-oriented graph text format.
//!
//! ```text
//! FORWARD
//! x = input(; shape=4)
//! s = sigmoid(x)
//! y = mul(s, x)
//! BACKWARD
//! gy = seed(; of=y)
//! SAVE-EDGES
//! s -> d1
//! OUTPUTS
//! y
//! ```
//!
//! Empty sections are omitted, so the empty graph is the empty string.

use super::{Node, StaticGraph};
use crate::error::{Error, Result};

const FORWARD: &str = "FORWARD";
const BACKWARD: &str = "BACKWARD";
const SAVE_EDGES: &str = "SAVE-EDGES";
const OUTPUTS: &str = "OUTPUTS";

pub fn write(g: &StaticGraph) -> String {
    let mut s = String::new();
    if !g.forward.is_empty() {
        s.push_str(FORWARD);
        s.push('\n');
        for n in &g.forward {
            write_node(&mut s, n);
        }
    }
    if !g.backward.is_empty() {
        s.push_str(BACKWARD);
        s.push('\n');
        for n in &g.backward {
            write_node(&mut s, n);
        }
    }
    if !g.save_edges.is_empty() {
        s.push_str(SAVE_EDGES);
        s.push('\n');
        for (a, b) in &g.save_edges {
            s.push_str(&format!("{a} -> {b}\n"));
        }
    }
    if !g.outputs.is_empty() {
        s.push_str(OUTPUTS);
        s.push('\n');
        for o in &g.outputs {
            s.push_str(o);
            s.push('\n');
        }
    }
    s
}

fn write_node(s: &mut String, n: &Node) {
    s.push_str(&n.id);
    s.push_str(" = ");
    s.push_str(&n.op);
    s.push('(');
    s.push_str(&n.args.join(", "));
    if !n.attrs.is_empty() {
        s.push_str("; ");
        let attrs: Vec<String> = n.attrs.iter().map(|(k, v)| format!("{k}={v}")).collect();
        s.push_str(&attrs.join(", "));
    }
    s.push_str(")\n");
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Section {
    None,
    Forward,
    Backward,
    SaveEdges,
    Outputs,
}

fn err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        line,
        msg: msg.into(),
    }
}

fn is_ident(s: &str) -> bool {
    !s.is_empty()
        && s.chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
}

fn is_value(s: &str) -> bool {
    !s.is_empty()
        && s.chars()
            .all(|c| !c.is_whitespace() && !",;()=".contains(c))
}

/// Parse and validate a graph.
pub fn parse(text: &str) -> Result<StaticGraph> {
    let mut g = StaticGraph::default();
    let mut section = Section::None;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let next = match line {
            FORWARD => Some(Section::Forward),
            BACKWARD => Some(Section::Backward),
            SAVE_EDGES => Some(Section::SaveEdges),
            OUTPUTS => Some(Section::Outputs),
            _ => None,
        };
        if let Some(next) = next {
            if next <= section {
                return Err(err(line_no, format!("section {line} out of order")));
            }
            section = next;
            continue;
        }
        match section {
            Section::None => return Err(err(line_no, "content before the first section header")),
            Section::Forward => g.forward.push(parse_node(line, line_no)?),
            Section::Backward => g.backward.push(parse_node(line, line_no)?),
            Section::SaveEdges => {
                let (a, b) = line
                    .split_once("->")
                    .ok_or_else(|| err(line_no, "expected `tensor -> node`"))?;
                let (a, b) = (a.trim(), b.trim());
                if !is_ident(a) || !is_ident(b) {
                    return Err(err(line_no, "bad identifier in save-edge"));
                }
                g.save_edges.push((a.to_string(), b.to_string()));
            }
            Section::Outputs => {
                if !is_ident(line) {
                    return Err(err(line_no, format!("bad output id `{line}`")));
                }
                g.outputs.push(line.to_string());
            }
        }
    }
    g.validate()?;
    Ok(g)
}

fn parse_node(line: &str, line_no: usize) -> Result<Node> {
    let (id, rhs) = line
        .split_once('=')
        .ok_or_else(|| err(line_no, "expected `id = op(args; attrs)`"))?;
    let id = id.trim();
    if !is_ident(id) {
        return Err(err(line_no, format!("bad node id `{id}`")));
    }
    let rhs = rhs.trim();
    let open = rhs.find('(').ok_or_else(|| err(line_no, "missing `(`"))?;
    if !rhs.ends_with(')') {
        return Err(err(line_no, "missing `)`"));
    }
    let op = rhs[..open].trim();
    if !is_ident(op) {
        return Err(err(line_no, format!("bad op name `{op}`")));
    }
    let inner = &rhs[open + 1..rhs.len() - 1];
    let (args_s, attrs_s) = match inner.split_once(';') {
        Some((a, b)) => (a, Some(b)),
        None => (inner, None),
    };
    let mut args = Vec::new();
    if !args_s.trim().is_empty() {
        for a in args_s.split(',') {
            let a = a.trim();
            if !is_ident(a) {
                return Err(err(line_no, format!("bad argument `{a}`")));
            }
            args.push(a.to_string());
        }
    }
    let mut attrs = Vec::new();
    if let Some(attrs_s) = attrs_s {
        for kv in attrs_s.split(',') {
            let (k, v) = kv.split_once('=').ok_or_else(|| {
                err(
                    line_no,
                    format!("attribute `{}` is not key=value", kv.trim()),
                )
            })?;
            let (k, v) = (k.trim(), v.trim());
            if !is_ident(k) || !is_value(v) {
                return Err(err(line_no, format!("bad attribute `{k}={v}`")));
            }
            attrs.push((k.to_string(), v.to_string()));
        }
    }
    Ok(Node {
        id: id.to_string(),
        op: op.to_string(),
        args,
        attrs,
    })
}
