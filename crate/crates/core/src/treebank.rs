//! Bracketed constituency parses, Collins head percolation and per-token spines.
//!
//! A [`ParseNode`] leaf is a preterminal: it carries the POS tag as its label
//! and the surface token. Every node of a tree, leaves included, lies on
//! exactly one token's [`Spine`].

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const COLLINS_TABLE: &str = include_str!("../data/collins_head_table.txt");

/// Tags skipped when a head is chosen by fallback.
const PUNCTUATION: &[&str] = &[",", ".", ":", "``", "''", "-LRB-", "-RRB-", "-NONE-"];

/// Half-open token interval `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Span { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseNode {
    pub label: String,
    pub children: Vec<ParseNode>,
    pub token: Option<String>,
    pub span: Span,
}

impl ParseNode {
    pub fn leaf(label: impl Into<String>, token: impl Into<String>, index: usize) -> Self {
        ParseNode {
            label: label.into(),
            children: Vec::new(),
            token: Some(token.into()),
            span: Span::new(index, index + 1),
        }
    }

    /// Builds an internal node; the span is taken from the children, which
    /// must already be contiguous.
    pub fn internal(label: impl Into<String>, children: Vec<ParseNode>) -> Self {
        let start = children.first().map_or(0, |c| c.span.start);
        let end = children.last().map_or(0, |c| c.span.end);
        ParseNode {
            label: label.into(),
            children,
            token: None,
            span: Span::new(start, end),
        }
    }

    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }

    pub fn tokens(&self) -> Vec<&str> {
        let mut out = Vec::with_capacity(self.span.len());
        self.visit_leaves(&mut |leaf| out.push(leaf.token.as_deref().unwrap_or("")));
        out
    }

    pub fn pos_tags(&self) -> Vec<&str> {
        let mut out = Vec::with_capacity(self.span.len());
        self.visit_leaves(&mut |leaf| out.push(leaf.label.as_str()));
        out
    }

    fn visit_leaves<'a>(&'a self, f: &mut impl FnMut(&'a ParseNode)) {
        if self.is_leaf() {
            f(self);
        } else {
            for child in &self.children {
                child.visit_leaves(f);
            }
        }
    }

    pub fn node_count(&self) -> usize {
        1 + self.children.iter().map(ParseNode::node_count).sum::<usize>()
    }

    /// Removes unary `ROOT`/`TOP` wrappers emitted by some parsers.
    pub fn strip_root(self) -> ParseNode {
        let mut node = self;
        while !node.is_leaf()
            && node.children.len() == 1
            && matches!(node.label.as_str(), "ROOT" | "TOP")
        {
            node = node.children.pop().expect("one child");
        }
        node
    }

    /// Checks the structural invariants: leaf iff token, contiguous child
    /// spans, one token per leaf.
    pub fn validate(&self) -> Result<()> {
        if self.is_leaf() != self.token.is_some() {
            return Err(Error::Invariant(format!(
                "node `{}` must be a leaf iff it carries a token",
                self.label
            )));
        }
        if self.is_leaf() {
            if self.span.len() != 1 {
                return Err(Error::Invariant(format!(
                    "leaf `{}` spans {} tokens",
                    self.label,
                    self.span.len()
                )));
            }
            return Ok(());
        }
        let mut cursor = self.span.start;
        for child in &self.children {
            if child.span.start != cursor {
                return Err(Error::Invariant(format!(
                    "children of `{}` are not contiguous at token {cursor}",
                    self.label
                )));
            }
            child.validate()?;
            cursor = child.span.end;
        }
        if cursor != self.span.end {
            return Err(Error::Invariant(format!(
                "span of `{}` does not match its children",
                self.label
            )));
        }
        Ok(())
    }
}

impl fmt::Display for ParseNode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.token {
            Some(token) => write!(f, "({} {})", self.label, token),
            None => {
                write!(f, "({}", self.label)?;
                for child in &self.children {
                    write!(f, " {child}")?;
                }
                write!(f, ")")
            }
        }
    }
}

impl FromStr for ParseNode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        parse_ptb(s)
    }
}

/// Parses one bracketed tree such as `(S (NP (NN tess)) (VP (VBD went)))`.
pub fn parse_ptb(text: &str) -> Result<ParseNode> {
    let mut parser = BracketParser {
        text,
        pos: 0,
        next_token: 0,
    };
    parser.skip_ws();
    if parser.pos == text.len() {
        return Err(parser.error("empty tree"));
    }
    let root = parser.node()?;
    parser.skip_ws();
    if parser.pos != text.len() {
        return Err(parser.error("trailing input after the root node"));
    }
    Ok(root)
}

struct BracketParser<'a> {
    text: &'a str,
    pos: usize,
    next_token: usize,
}

impl BracketParser<'_> {
    fn error(&self, message: &str) -> Error {
        Error::Parse {
            offset: self.pos,
            message: message.to_string(),
        }
    }

    fn peek(&self) -> Option<u8> {
        self.text.as_bytes().get(self.pos).copied()
    }

    fn skip_ws(&mut self) {
        while matches!(self.peek(), Some(b) if b.is_ascii_whitespace()) {
            self.pos += 1;
        }
    }

    fn atom(&mut self) -> &str {
        let start = self.pos;
        while matches!(self.peek(), Some(b) if !b.is_ascii_whitespace() && b != b'(' && b != b')')
        {
            self.pos += 1;
        }
        &self.text[start..self.pos]
    }

    fn node(&mut self) -> Result<ParseNode> {
        if self.peek() != Some(b'(') {
            return Err(self.error("expected `(`"));
        }
        self.pos += 1;
        self.skip_ws();
        let label = self.atom().to_string();
        if label.is_empty() {
            return Err(self.error("empty label"));
        }
        self.skip_ws();
        match self.peek() {
            None => Err(self.error("unbalanced brackets: unexpected end of input")),
            Some(b')') => Err(self.error("node has neither children nor a token")),
            Some(b'(') => {
                let mut children = Vec::new();
                loop {
                    self.skip_ws();
                    match self.peek() {
                        Some(b'(') => children.push(self.node()?),
                        Some(b')') => {
                            self.pos += 1;
                            return Ok(ParseNode::internal(label, children));
                        }
                        None => {
                            return Err(self.error("unbalanced brackets: unexpected end of input"))
                        }
                        Some(_) => return Err(self.error("token mixed with child nodes")),
                    }
                }
            }
            Some(_) => {
                let token = self.atom().to_string();
                self.skip_ws();
                match self.peek() {
                    Some(b')') => {
                        self.pos += 1;
                        let leaf = ParseNode::leaf(label, token, self.next_token);
                        self.next_token += 1;
                        Ok(leaf)
                    }
                    None => Err(self.error("unbalanced brackets: unexpected end of input")),
                    Some(_) => Err(self.error("leaf must hold exactly one token")),
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Priority over labels, children scanned left to right.
    Left,
    /// Priority over labels, children scanned right to left.
    Right,
    /// First child (from the left) matching any label.
    LeftDis,
    /// First child (from the right) matching any label.
    RightDis,
}

impl Direction {
    fn scans_left(self) -> bool {
        matches!(self, Direction::Left | Direction::LeftDis)
    }
}

impl FromStr for Direction {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "left" => Ok(Direction::Left),
            "right" => Ok(Direction::Right),
            "leftdis" => Ok(Direction::LeftDis),
            "rightdis" => Ok(Direction::RightDis),
            other => Err(format!("unknown direction `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeadRule {
    pub direction: Direction,
    pub labels: Vec<String>,
}

impl HeadRule {
    fn scan(&self, kids: &[&str]) -> Option<usize> {
        let order: Vec<usize> = if self.direction.scans_left() {
            (0..kids.len()).collect()
        } else {
            (0..kids.len()).rev().collect()
        };
        match self.direction {
            Direction::Left | Direction::Right => self
                .labels
                .iter()
                .find_map(|want| order.iter().copied().find(|&i| kids[i] == want)),
            Direction::LeftDis | Direction::RightDis => order
                .into_iter()
                .find(|&i| self.labels.iter().any(|want| kids[i] == want)),
        }
    }
}

/// Per-parent head rules. Parents without rules take their leftmost child.
#[derive(Debug, Clone, Default)]
pub struct HeadTable {
    rules: HashMap<String, Vec<HeadRule>>,
}

impl HeadTable {
    /// The standard Collins table shipped in `data/collins_head_table.txt`.
    pub fn collins() -> Self {
        COLLINS_TABLE.parse().expect("bundled head table is well formed")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading head table {}", path.display()), e))?;
        text.parse()
    }

    pub fn rules(&self, label: &str) -> Option<&[HeadRule]> {
        self.rules.get(label).map(Vec::as_slice)
    }

    pub fn push_rule(&mut self, parent: impl Into<String>, rule: HeadRule) {
        self.rules.entry(parent.into()).or_default().push(rule);
    }
}

impl FromStr for HeadTable {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut table = HeadTable::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut fields = line.split_whitespace();
            let parent = fields.next().expect("nonempty line");
            let direction = fields
                .next()
                .ok_or_else(|| Error::data(format!("head table line {}: missing direction", lineno + 1)))?
                .parse::<Direction>()
                .map_err(|e| Error::data(format!("head table line {}: {e}", lineno + 1)))?;
            let labels = fields.map(str::to_string).collect();
            table.push_rule(parent, HeadRule { direction, labels });
        }
        Ok(table)
    }
}

/// Strips function tags and indices: `NP-SBJ-1` becomes `NP`. Labels that
/// start with `-` (`-LRB-`, `-NONE-`) are kept whole.
pub fn base_label(label: &str) -> &str {
    if label.starts_with('-') {
        return label;
    }
    label.split(['-', '=']).next().unwrap_or(label)
}

fn is_punctuation(label: &str) -> bool {
    PUNCTUATION.contains(&label)
}

fn first_content_child(kids: &[&str], scans_left: bool) -> usize {
    let found = if scans_left {
        (0..kids.len()).find(|&i| !is_punctuation(kids[i]))
    } else {
        (0..kids.len()).rev().find(|&i| !is_punctuation(kids[i]))
    };
    found.unwrap_or(if scans_left { 0 } else { kids.len() - 1 })
}

/// Index of the head child of `node`.
///
/// Leaves have no children; they return 0.
pub fn find_head(node: &ParseNode, table: &HeadTable) -> usize {
    if node.children.len() <= 1 {
        return 0;
    }
    let kids: Vec<&str> = node.children.iter().map(|c| base_label(&c.label)).collect();
    let head = match table.rules(base_label(&node.label)) {
        None => first_content_child(&kids, true),
        Some(rules) => rules
            .iter()
            .find_map(|rule| rule.scan(&kids))
            .unwrap_or_else(|| {
                let scans_left = rules.last().is_none_or(|r| r.direction.scans_left());
                first_content_child(&kids, scans_left)
            }),
    };
    // Coordination: a head preceded by CC moves to the left conjunct.
    if head >= 2 && kids[head - 1] == "CC" {
        head - 2
    } else {
        head
    }
}

/// Labels from a token's POS tag up through every ancestor it heads.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Spine {
    pub token_index: usize,
    pub labels: Vec<String>,
}

impl Spine {
    pub fn pos(&self) -> &str {
        &self.labels[0]
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

impl fmt::Display for Spine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.labels.join("/"))
    }
}

/// One spine per token, in token order.
pub fn derive_spines(root: &ParseNode, table: &HeadTable) -> Vec<Spine> {
    let offset = root.span.start;
    let mut spines: Vec<Spine> = (0..root.span.len())
        .map(|i| Spine {
            token_index: i,
            labels: Vec::new(),
        })
        .collect();
    percolate(root, table, offset, &mut spines);
    spines
}

fn percolate(node: &ParseNode, table: &HeadTable, offset: usize, spines: &mut [Spine]) -> usize {
    let token = if node.is_leaf() {
        node.span.start - offset
    } else {
        let heads: Vec<usize> = node
            .children
            .iter()
            .map(|child| percolate(child, table, offset, spines))
            .collect();
        heads[find_head(node, table)]
    };
    spines[token].labels.push(node.label.clone());
    token
}
