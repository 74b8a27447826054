#![allow(dead_code)]

use std::collections::BTreeMap;
use std::net::TcpListener;
use std::path::{Path, PathBuf};

use gg_core::app;

pub fn fixture_dir() -> PathBuf {
    app::default_fixture_dir()
}

pub fn golden_dir() -> PathBuf {
    fixture_dir().join("golden")
}

/// Copies the fixture inputs into `dest`, replacing the config with
/// `config_text`.
pub fn copy_fixture(dest: &Path, config_text: &str) {
    std::fs::create_dir_all(dest).unwrap();
    for f in ["corpus.jsonl", "notes.jsonl", "transcript.jsonl"] {
        std::fs::copy(fixture_dir().join(f), dest.join(f)).unwrap();
    }
    std::fs::write(dest.join("config.toml"), config_text).unwrap();
}

pub fn fixture_config() -> String {
    std::fs::read_to_string(fixture_dir().join("config.toml")).unwrap()
}

/// A localhost listener that records whether anything ever connected.
pub struct Tripwire {
    listener: TcpListener,
}

impl Tripwire {
    pub fn new() -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        listener.set_nonblocking(true).unwrap();
        Self { listener }
    }

    pub fn url(&self) -> String {
        format!("http://{}/v1", self.listener.local_addr().unwrap())
    }

    pub fn connections(&self) -> usize {
        let mut n = 0;
        while self.listener.accept().is_ok() {
            n += 1;
        }
        n
    }
}

#[derive(Debug, Default)]
pub struct DotGraph {
    pub directed: bool,
    pub name: Option<String>,
    pub graph_attrs: BTreeMap<String, String>,
    pub nodes: Vec<(String, BTreeMap<String, String>)>,
    pub edges: Vec<(String, String, BTreeMap<String, String>)>,
}

impl DotGraph {
    pub fn node(&self, id: &str) -> Option<&BTreeMap<String, String>> {
        self.nodes.iter().find(|(n, _)| n == id).map(|(_, a)| a)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Id(String),
    Arrow,
    Line,
    LBrace,
    RBrace,
    LBracket,
    RBracket,
    Eq,
    Semi,
    Comma,
}

fn lex(src: &str) -> Result<Vec<Tok>, String> {
    let chars: Vec<char> = src.chars().collect();
    let mut i = 0;
    let mut out = Vec::new();
    while i < chars.len() {
        let c = chars[i];
        match c {
            c if c.is_whitespace() => i += 1,
            '{' => {
                out.push(Tok::LBrace);
                i += 1
            }
            '}' => {
                out.push(Tok::RBrace);
                i += 1
            }
            '[' => {
                out.push(Tok::LBracket);
                i += 1
            }
            ']' => {
                out.push(Tok::RBracket);
                i += 1
            }
            '=' => {
                out.push(Tok::Eq);
                i += 1
            }
            ';' => {
                out.push(Tok::Semi);
                i += 1
            }
            ',' => {
                out.push(Tok::Comma);
                i += 1
            }
            '-' if chars.get(i + 1) == Some(&'>') => {
                out.push(Tok::Arrow);
                i += 2
            }
            '-' if chars.get(i + 1) == Some(&'-') => {
                out.push(Tok::Line);
                i += 2
            }
            '"' => {
                let mut s = String::new();
                i += 1;
                loop {
                    match chars.get(i) {
                        None => return Err("unterminated string".into()),
                        Some('"') => {
                            i += 1;
                            break;
                        }
                        Some('\\') => {
                            match chars.get(i + 1) {
                                Some('"') => s.push('"'),
                                Some('\\') => s.push('\\'),
                                Some('n') => s.push('\n'),
                                Some(other) => {
                                    s.push('\\');
                                    s.push(*other)
                                }
                                None => return Err("dangling escape".into()),
                            }
                            i += 2;
                        }
                        Some('\n') => return Err("raw newline in string".into()),
                        Some(ch) => {
                            s.push(*ch);
                            i += 1
                        }
                    }
                }
                out.push(Tok::Id(s));
            }
            c if c.is_ascii_alphanumeric() || c == '_' || c == '.' || c == '-' => {
                let start = i;
                while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_' || chars[i] == '.') {
                    i += 1;
                }
                if i == start {
                    return Err(format!("unexpected `{c}`"));
                }
                let word: String = chars[start..i].iter().collect();
                let is_numeral = word.chars().all(|c| c.is_ascii_digit() || c == '.');
                let is_ident = word.chars().next().is_some_and(|c| !c.is_ascii_digit()) && !word.contains('.');
                if !is_numeral && !is_ident {
                    return Err(format!("bad identifier `{word}`"));
                }
                out.push(Tok::Id(word));
            }
            other => return Err(format!("unexpected `{other}`")),
        }
    }
    Ok(out)
}

struct Parser {
    toks: Vec<Tok>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos)
    }

    fn next(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).cloned();
        self.pos += 1;
        t
    }

    fn expect(&mut self, t: Tok) -> Result<(), String> {
        match self.next() {
            Some(ref got) if *got == t => Ok(()),
            got => Err(format!("expected {t:?}, got {got:?}")),
        }
    }

    fn id(&mut self) -> Result<String, String> {
        match self.next() {
            Some(Tok::Id(s)) => Ok(s),
            got => Err(format!("expected identifier, got {got:?}")),
        }
    }

    fn attr_list(&mut self) -> Result<BTreeMap<String, String>, String> {
        let mut attrs = BTreeMap::new();
        while self.peek() == Some(&Tok::LBracket) {
            self.next();
            loop {
                match self.peek() {
                    Some(Tok::RBracket) => {
                        self.next();
                        break;
                    }
                    Some(Tok::Id(_)) => {
                        let k = self.id()?;
                        self.expect(Tok::Eq)?;
                        let v = self.id()?;
                        if attrs.insert(k.clone(), v).is_some() {
                            return Err(format!("duplicate attribute `{k}`"));
                        }
                        if matches!(self.peek(), Some(Tok::Comma) | Some(Tok::Semi)) {
                            self.next();
                        }
                    }
                    got => return Err(format!("bad attribute list at {got:?}")),
                }
            }
        }
        Ok(attrs)
    }
}

/// Parses the DOT subset used by the emitter: one (di)graph of node, edge,
/// attribute and `id = id` statements. Rejects anything else.
pub fn parse_dot(src: &str) -> Result<DotGraph, String> {
    let mut p = Parser { toks: lex(src)?, pos: 0 };
    let mut g = DotGraph::default();
    if p.peek() == Some(&Tok::Id("strict".into())) {
        p.next();
    }
    g.directed = match p.id()?.as_str() {
        "digraph" => true,
        "graph" => false,
        other => return Err(format!("expected graph keyword, got `{other}`")),
    };
    if let Some(Tok::Id(_)) = p.peek() {
        g.name = Some(p.id()?);
    }
    p.expect(Tok::LBrace)?;
    loop {
        match p.peek() {
            Some(Tok::RBrace) => {
                p.next();
                break;
            }
            Some(Tok::Semi) => {
                p.next();
            }
            Some(Tok::Id(_)) => {
                let first = p.id()?;
                match p.peek() {
                    Some(Tok::Eq) => {
                        p.next();
                        let v = p.id()?;
                        g.graph_attrs.insert(first, v);
                    }
                    Some(Tok::Arrow) | Some(Tok::Line) => {
                        let mut chain = vec![first];
                        while let Some(op) = p.peek().cloned() {
                            let ok = match op {
                                Tok::Arrow => g.directed,
                                Tok::Line => !g.directed,
                                _ => break,
                            };
                            if !ok {
                                return Err("edge operator does not match graph kind".into());
                            }
                            p.next();
                            chain.push(p.id()?);
                        }
                        let attrs = p.attr_list()?;
                        for w in chain.windows(2) {
                            g.edges.push((w[0].clone(), w[1].clone(), attrs.clone()));
                        }
                    }
                    _ => {
                        let attrs = p.attr_list()?;
                        if matches!(first.as_str(), "node" | "edge" | "graph") {
                            continue;
                        }
                        if g.nodes.iter().any(|(n, _)| *n == first) {
                            return Err(format!("node `{first}` declared twice"));
                        }
                        g.nodes.push((first, attrs));
                    }
                }
            }
            got => return Err(format!("unexpected token {got:?}")),
        }
    }
    if p.pos != p.toks.len() {
        return Err("trailing tokens after graph".into());
    }
    for (a, b, _) in &g.edges {
        for end in [a, b] {
            if g.node(end).is_none() {
                return Err(format!("edge endpoint `{end}` is not declared"));
            }
        }
    }
    Ok(g)
}
