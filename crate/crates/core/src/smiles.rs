//! SMILES vocabulary, parsing, validity and simple descriptors.
//!
//! Validity is decided natively: the string must parse (balanced branches,
//! paired ring closures, legal bracket atoms), aromatic atoms must sit on
//! rings and admit a Kekulé assignment, and every atom's bond-order sum must
//! fit its valence table. This is stricter than a pure grammar check but
//! looser than a full chemistry toolkit.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD_TOKEN: &str = "<pad>";
pub const SOS_TOKEN: &str = "<sos>";
pub const EOS_TOKEN: &str = "<eos>";

pub const PAD_ID: usize = 0;
pub const SOS_ID: usize = 1;
pub const EOS_ID: usize = 2;

/// The 30 chemical tokens that occur in canonical QM9 SMILES.
pub const QM9_TOKENS: [&str; 30] = [
    "#", "(", ")", "-", "1", "2", "3", "4", "5", "=", "C", "F", "N", "O", "[C-]", "[CH-]", "[N+]",
    "[N-]", "[NH+]", "[NH2+]", "[NH3+]", "[O-]", "[c-]", "[cH-]", "[n-]", "[nH+]", "[nH]", "c",
    "n", "o",
];

/// Ordered token list: `<pad>`, `<sos>`, `<eos>`, then chemical tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    /// chemical token ids, longest string first
    greedy: Vec<usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from chemical tokens; specials are prepended.
    pub fn from_tokens<S: AsRef<str>>(chemical: &[S]) -> Result<Self> {
        let mut tokens = vec![PAD_TOKEN.to_string(), SOS_TOKEN.to_string(), EOS_TOKEN.to_string()];
        tokens.extend(chemical.iter().map(|t| t.as_ref().to_string()));
        Self::from_full_list(tokens)
    }

    fn from_full_list(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 3 || tokens[..3] != [PAD_TOKEN, SOS_TOKEN, EOS_TOKEN] {
            return Err(Error::validation("vocabulary must start with <pad>, <sos>, <eos>"));
        }
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() {
                return Err(Error::validation("empty token in vocabulary"));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::validation(format!("duplicate token {t:?}")));
            }
        }
        let mut greedy: Vec<usize> = (3..tokens.len()).collect();
        greedy.sort_by(|&a, &b| tokens[b].len().cmp(&tokens[a].len()).then(a.cmp(&b)));
        Ok(Vocabulary { tokens, index, greedy })
    }

    /// The 33-token QM9 vocabulary.
    pub fn qm9() -> Self {
        Self::from_tokens(&QM9_TOKENS).expect("static vocabulary is well formed")
    }

    /// Derives the chemical tokens present in `corpus`. Bracket atoms,
    /// two-letter halogens and `%nn` ring labels are single tokens. Tokens
    /// are stored in byte order so ids do not depend on corpus order.
    pub fn from_corpus<'a, I: IntoIterator<Item = &'a str>>(corpus: I) -> Result<Self> {
        let mut found = HashSet::new();
        for smiles in corpus {
            for tok in lex(smiles)? {
                found.insert(tok.to_string());
            }
        }
        let mut chemical: Vec<String> = found.into_iter().collect();
        chemical.sort();
        Self::from_tokens(&chemical)
    }

    /// The QM9 vocabulary when `corpus` only uses QM9 tokens, otherwise the
    /// corpus-derived vocabulary.
    pub fn for_corpus<'a, I: IntoIterator<Item = &'a str>>(corpus: I) -> Result<Self> {
        let derived = Self::from_corpus(corpus)?;
        let qm9 = Self::qm9();
        if derived.chemical_tokens().all(|t| qm9.id(t).is_some()) {
            Ok(qm9)
        } else {
            Ok(derived)
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn chemical_tokens(&self) -> impl Iterator<Item = &str> {
        self.tokens[3..].iter().map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn is_special(id: usize) -> bool {
        id < 3
    }

    /// Greedy longest-match tokenization. SOS/EOS are not added.
    pub fn tokenize(&self, smiles: &str) -> Result<Vec<usize>> {
        let mut ids = Vec::new();
        let mut offset = 0;
        while offset < smiles.len() {
            let rest = &smiles[offset..];
            let hit = self.greedy.iter().find(|&&id| rest.starts_with(self.tokens[id].as_str()));
            match hit {
                Some(&id) => {
                    ids.push(id);
                    offset += self.tokens[id].len();
                }
                None => {
                    return Err(Error::Tokenize { offset, remainder: rest.to_string() });
                }
            }
        }
        Ok(ids)
    }

    /// Concatenates token strings; special tokens are rejected.
    pub fn detokenize(&self, ids: &[usize]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            if Self::is_special(id) || id >= self.tokens.len() {
                return Err(Error::validation(format!("id {id} is not a chemical token")));
            }
            out.push_str(&self.tokens[id]);
        }
        Ok(out)
    }

    /// Renders ids verbatim, special tokens included, for display or for
    /// scoring sampled sequences (a stray special token makes them invalid).
    pub fn render(&self, ids: &[usize]) -> String {
        ids.iter().map(|&id| self.token(id).unwrap_or("<unk>")).collect()
    }

    /// Writes one token per line.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_full_list(text.lines().filter(|l| !l.is_empty()).map(String::from).collect())
    }
}

/// Lexical SMILES tokens used to discover a vocabulary.
fn lex(smiles: &str) -> Result<Vec<&str>> {
    let bytes = smiles.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let len = match bytes[i] {
            b'[' => match smiles[i..].find(']') {
                Some(end) => end + 1,
                None => {
                    return Err(Error::Tokenize { offset: i, remainder: smiles[i..].to_string() })
                }
            },
            b'%' if bytes.len() >= i + 3 => 3,
            b'C' if bytes.get(i + 1) == Some(&b'l') => 2,
            b'B' if bytes.get(i + 1) == Some(&b'r') => 2,
            b if b.is_ascii() && !b.is_ascii_whitespace() => 1,
            _ => return Err(Error::Tokenize { offset: i, remainder: smiles[i..].to_string() }),
        };
        out.push(&smiles[i..i + len]);
        i += len;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Molecular graph

struct ElementInfo {
    symbol: &'static str,
    number: u8,
    weight: f64,
}

const ELEMENTS: &[ElementInfo] = &[
    ElementInfo { symbol: "H", number: 1, weight: 1.008 },
    ElementInfo { symbol: "B", number: 5, weight: 10.812 },
    ElementInfo { symbol: "C", number: 6, weight: 12.011 },
    ElementInfo { symbol: "N", number: 7, weight: 14.007 },
    ElementInfo { symbol: "O", number: 8, weight: 15.999 },
    ElementInfo { symbol: "F", number: 9, weight: 18.998 },
    ElementInfo { symbol: "Si", number: 14, weight: 28.086 },
    ElementInfo { symbol: "P", number: 15, weight: 30.974 },
    ElementInfo { symbol: "S", number: 16, weight: 32.067 },
    ElementInfo { symbol: "Cl", number: 17, weight: 35.453 },
    ElementInfo { symbol: "Se", number: 34, weight: 78.971 },
    ElementInfo { symbol: "Br", number: 35, weight: 79.904 },
    ElementInfo { symbol: "I", number: 53, weight: 126.904 },
];

const HYDROGEN_WEIGHT: f64 = 1.008;

fn element_by_symbol(symbol: &str) -> Option<&'static ElementInfo> {
    ELEMENTS.iter().find(|e| e.symbol == symbol)
}

fn element_by_number(number: u8) -> &'static ElementInfo {
    ELEMENTS.iter().find(|e| e.number == number).expect("only table elements are constructed")
}

/// Allowed total valences for an element carrying `charge`, using the
/// isoelectronic neutral element (e.g. N+ behaves like C).
fn allowed_valences(number: u8, charge: i32) -> Option<&'static [u32]> {
    let effective = number as i32 - charge;
    if number == 1 {
        return Some(if charge == 0 { &[1] } else { &[0] });
    }
    let (core, heavy) = match number {
        3..=10 => (2, false),
        11..=18 => (10, true),
        31..=36 => (28, true),
        49..=54 => (46, true),
        _ => return None,
    };
    let outer = effective - core;
    let table: &'static [u32] = match (outer, heavy) {
        (2, _) => &[2],
        (3, _) => &[3],
        (4, _) => &[4],
        (5, false) => &[3],
        (5, true) => &[3, 5],
        (6, false) => &[2],
        (6, true) => &[2, 4, 6],
        (7, true) if number >= 49 => &[1, 3, 5],
        (7, _) => &[1],
        (8, _) => &[0],
        _ => return None,
    };
    Some(table)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Atom {
    pub number: u8,
    pub aromatic: bool,
    pub charge: i32,
    /// Hydrogen count written inside brackets; `None` for organic-subset atoms.
    pub bracket_h: Option<u32>,
}

impl Atom {
    pub fn symbol(&self) -> &'static str {
        element_by_number(self.number).symbol
    }

    fn weight(&self) -> f64 {
        element_by_number(self.number).weight
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BondOrder {
    Single,
    Double,
    Triple,
    Quadruple,
    Aromatic,
}

impl BondOrder {
    fn sigma_pi(self) -> u32 {
        match self {
            BondOrder::Single | BondOrder::Aromatic => 1,
            BondOrder::Double => 2,
            BondOrder::Triple => 3,
            BondOrder::Quadruple => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bond {
    pub a: usize,
    pub b: usize,
    pub order: BondOrder,
}

/// A parsed, valence-checked molecule.
#[derive(Debug, Clone, PartialEq)]
pub struct MolGraph {
    pub atoms: Vec<Atom>,
    pub bonds: Vec<Bond>,
    /// Number of ring-closure bonds written in the SMILES.
    pub ring_closures: usize,
    /// Connected components (`.`-separated pieces, counted structurally).
    pub fragments: usize,
    /// Kekulé bond orders, parallel to `bonds`.
    kekule: Vec<u32>,
    /// Implicit plus bracket hydrogens per atom.
    hydrogens: Vec<u32>,
    /// Whether each bond lies on a ring.
    ring_bond: Vec<bool>,
}

/// Outcome of [`check_validity`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Validity {
    Valid,
    Invalid(String),
}

impl Validity {
    pub fn is_valid(&self) -> bool {
        matches!(self, Validity::Valid)
    }
}

impl fmt::Display for Validity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Validity::Valid => write!(f, "VALID"),
            Validity::Invalid(reason) => write!(f, "INVALID({reason})"),
        }
    }
}

pub fn check_validity(smiles: &str) -> Validity {
    match MolGraph::from_smiles(smiles) {
        Ok(_) => Validity::Valid,
        Err(reason) => Validity::Invalid(reason),
    }
}

struct Parser<'a> {
    s: &'a [u8],
    pos: usize,
}

impl Parser<'_> {
    fn peek(&self) -> Option<u8> {
        self.s.get(self.pos).copied()
    }

    fn bump(&mut self) -> Option<u8> {
        let c = self.peek()?;
        self.pos += 1;
        Some(c)
    }

    fn number(&mut self) -> Option<u32> {
        let start = self.pos;
        while self.peek().is_some_and(|c| c.is_ascii_digit()) {
            self.pos += 1;
        }
        if start == self.pos {
            None
        } else {
            std::str::from_utf8(&self.s[start..self.pos]).ok()?.parse().ok()
        }
    }

    fn organic_atom(&mut self) -> Option<Atom> {
        let c = self.peek()?;
        let two = self.s.get(self.pos..self.pos + 2);
        let (symbol, aromatic, len) = match (c, two) {
            (b'C', Some(b"Cl")) => ("Cl", false, 2),
            (b'B', Some(b"Br")) => ("Br", false, 2),
            (b'B', _) => ("B", false, 1),
            (b'C', _) => ("C", false, 1),
            (b'N', _) => ("N", false, 1),
            (b'O', _) => ("O", false, 1),
            (b'P', _) => ("P", false, 1),
            (b'S', _) => ("S", false, 1),
            (b'F', _) => ("F", false, 1),
            (b'I', _) => ("I", false, 1),
            (b'b', _) => ("B", true, 1),
            (b'c', _) => ("C", true, 1),
            (b'n', _) => ("N", true, 1),
            (b'o', _) => ("O", true, 1),
            (b'p', _) => ("P", true, 1),
            (b's', _) => ("S", true, 1),
            _ => return None,
        };
        self.pos += len;
        let number = element_by_symbol(symbol)?.number;
        Some(Atom { number, aromatic, charge: 0, bracket_h: None })
    }

    fn bracket_atom(&mut self) -> std::result::Result<Atom, String> {
        // '[' already consumed
        let _isotope = self.number();
        let start = self.pos;
        let first = self.bump().ok_or("unterminated bracket atom")?;
        let (symbol, aromatic) = if first.is_ascii_lowercase() {
            // aromatic: c n o p s b, se, as
            if first == b's' && self.peek() == Some(b'e') {
                self.pos += 1;
                ("Se".to_string(), true)
            } else {
                ((first.to_ascii_uppercase() as char).to_string(), true)
            }
        } else if first.is_ascii_uppercase() {
            let mut sym = (first as char).to_string();
            if let Some(c) = self.peek().filter(u8::is_ascii_lowercase) {
                let two = format!("{sym}{}", c as char);
                if element_by_symbol(&two).is_some() {
                    self.pos += 1;
                    sym = two;
                }
            }
            (sym, false)
        } else {
            return Err(format!("bad bracket atom at offset {start}"));
        };
        let info = element_by_symbol(&symbol).ok_or(format!("unsupported element {symbol}"))?;
        if aromatic && !matches!(symbol.as_str(), "B" | "C" | "N" | "O" | "P" | "S" | "Se") {
            return Err(format!("element {symbol} cannot be aromatic"));
        }
        // chirality
        while self.peek() == Some(b'@') {
            self.pos += 1;
        }
        let mut h = 0;
        if self.peek() == Some(b'H') {
            self.pos += 1;
            h = self.number().unwrap_or(1);
        }
        let mut charge = 0i32;
        if let Some(sign @ (b'+' | b'-')) = self.peek() {
            self.pos += 1;
            let unit = if sign == b'+' { 1 } else { -1 };
            if let Some(n) = self.number() {
                charge = unit * n as i32;
            } else {
                charge = unit;
                while self.peek() == Some(sign) {
                    self.pos += 1;
                    charge += unit;
                }
            }
        }
        if self.peek() == Some(b':') {
            self.pos += 1;
            self.number().ok_or("atom class without digits")?;
        }
        if self.bump() != Some(b']') {
            return Err(format!("malformed bracket atom at offset {}", start - 1));
        }
        Ok(Atom { number: info.number, aromatic, charge, bracket_h: Some(h) })
    }
}

struct Builder {
    atoms: Vec<Atom>,
    bonds: Vec<Bond>,
    ring_closures: usize,
}

impl Builder {
    fn add_bond(&mut self, a: usize, b: usize, order: Option<BondOrder>) -> std::result::Result<(), String> {
        if a == b {
            return Err("atom bonded to itself".into());
        }
        if self.bonds.iter().any(|e| (e.a == a && e.b == b) || (e.a == b && e.b == a)) {
            return Err("duplicate bond".into());
        }
        let order = order.unwrap_or(if self.atoms[a].aromatic && self.atoms[b].aromatic {
            BondOrder::Aromatic
        } else {
            BondOrder::Single
        });
        self.bonds.push(Bond { a, b, order });
        Ok(())
    }
}

fn bond_symbol(c: u8) -> Option<BondOrder> {
    match c {
        b'-' | b'/' | b'\\' => Some(BondOrder::Single),
        b'=' => Some(BondOrder::Double),
        b'#' => Some(BondOrder::Triple),
        b'$' => Some(BondOrder::Quadruple),
        b':' => Some(BondOrder::Aromatic),
        _ => None,
    }
}

fn parse_structure(smiles: &str) -> std::result::Result<Builder, String> {
    if smiles.is_empty() {
        return Err("empty string".into());
    }
    let mut p = Parser { s: smiles.as_bytes(), pos: 0 };
    let mut g = Builder { atoms: Vec::new(), bonds: Vec::new(), ring_closures: 0 };
    let mut prev: Option<usize> = None;
    let mut pending: Option<BondOrder> = None;
    let mut pending_set = false;
    let mut branches: Vec<usize> = Vec::new();
    let mut rings: HashMap<u32, (usize, Option<BondOrder>)> = HashMap::new();

    while let Some(c) = p.peek() {
        let offset = p.pos;
        if let Some(order) = bond_symbol(c) {
            if pending_set {
                return Err(format!("two bond symbols in a row at offset {offset}"));
            }
            if prev.is_none() {
                return Err(format!("bond without preceding atom at offset {offset}"));
            }
            p.pos += 1;
            pending = Some(order);
            pending_set = true;
            continue;
        }
        match c {
            b'(' => {
                let anchor = prev.ok_or(format!("branch without preceding atom at offset {offset}"))?;
                if pending_set {
                    return Err(format!("bond symbol before branch at offset {offset}"));
                }
                branches.push(anchor);
                p.pos += 1;
            }
            b')' => {
                if pending_set {
                    return Err(format!("dangling bond at offset {offset}"));
                }
                let anchor = branches.pop().ok_or("unbalanced parentheses")?;
                if prev.is_none() {
                    return Err("empty branch".into());
                }
                p.pos += 1;
                prev = Some(anchor);
            }
            b'.' => {
                if pending_set {
                    return Err(format!("dangling bond at offset {offset}"));
                }
                if !branches.is_empty() {
                    return Err("dot inside branch".into());
                }
                prev = None;
                p.pos += 1;
            }
            b'0'..=b'9' | b'%' => {
                let atom = prev.ok_or(format!("ring label without atom at offset {offset}"))?;
                let label = if c == b'%' {
                    p.pos += 1;
                    let digits = p.s.get(p.pos..p.pos + 2).ok_or("truncated %nn ring label")?;
                    if !digits.iter().all(u8::is_ascii_digit) {
                        return Err(format!("bad %nn ring label at offset {offset}"));
                    }
                    p.pos += 2;
                    (digits[0] - b'0') as u32 * 10 + (digits[1] - b'0') as u32
                } else {
                    p.pos += 1;
                    (c - b'0') as u32
                };
                let here = if pending_set { pending } else { None };
                pending = None;
                pending_set = false;
                match rings.remove(&label) {
                    Some((other, there)) => {
                        let order = match (here, there) {
                            (Some(x), Some(y)) if x != y => {
                                return Err(format!("conflicting ring bond orders for label {label}"))
                            }
                            (x, y) => x.or(y),
                        };
                        g.add_bond(other, atom, order)?;
                        g.ring_closures += 1;
                    }
                    None => {
                        rings.insert(label, (atom, here));
                    }
                }
            }
            b'[' => {
                p.pos += 1;
                let atom = p.bracket_atom()?;
                let idx = g.atoms.len();
                g.atoms.push(atom);
                if let Some(prev) = prev {
                    g.add_bond(prev, idx, pending)?;
                }
                pending = None;
                pending_set = false;
                prev = Some(idx);
            }
            _ => {
                let atom = p.organic_atom().ok_or(format!(
                    "unexpected character {:?} at offset {offset}",
                    c as char
                ))?;
                let idx = g.atoms.len();
                g.atoms.push(atom);
                if let Some(prev) = prev {
                    g.add_bond(prev, idx, pending)?;
                }
                pending = None;
                pending_set = false;
                prev = Some(idx);
            }
        }
    }
    if pending_set {
        return Err("dangling bond at end of string".into());
    }
    if !branches.is_empty() {
        return Err("unbalanced parentheses".into());
    }
    if !rings.is_empty() {
        let mut open: Vec<u32> = rings.keys().copied().collect();
        open.sort_unstable();
        return Err(format!("unclosed ring {open:?}"));
    }
    Ok(g)
}

/// Marks bonds that lie on at least one cycle (non-bridges).
fn ring_bonds(n: usize, bonds: &[Bond]) -> Vec<bool> {
    let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
    for (e, b) in bonds.iter().enumerate() {
        adj[b.a].push((b.b, e));
        adj[b.b].push((b.a, e));
    }
    let mut disc = vec![usize::MAX; n];
    let mut low = vec![0; n];
    let mut is_bridge = vec![false; bonds.len()];
    let mut timer = 0;
    for root in 0..n {
        if disc[root] != usize::MAX {
            continue;
        }
        // iterative DFS: (node, parent edge, next neighbour index)
        let mut stack = vec![(root, usize::MAX, 0usize)];
        disc[root] = timer;
        low[root] = timer;
        timer += 1;
        while let Some(&mut (v, parent_edge, ref mut next)) = stack.last_mut() {
            if *next < adj[v].len() {
                let (u, e) = adj[v][*next];
                *next += 1;
                if e == parent_edge {
                    continue;
                }
                if disc[u] == usize::MAX {
                    disc[u] = timer;
                    low[u] = timer;
                    timer += 1;
                    stack.push((u, e, 0));
                } else {
                    low[v] = low[v].min(disc[u]);
                }
            } else {
                stack.pop();
                if let Some(&(parent, _, _)) = stack.last() {
                    low[parent] = low[parent].min(low[v]);
                    if low[v] > disc[parent] {
                        is_bridge[parent_edge] = true;
                    }
                }
            }
        }
    }
    is_bridge.into_iter().map(|b| !b).collect()
}

fn count_components(n: usize, bonds: &[Bond]) -> usize {
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    let mut components = n;
    for b in bonds {
        let (ra, rb) = (find(&mut parent, b.a), find(&mut parent, b.b));
        if ra != rb {
            parent[ra] = rb;
            components -= 1;
        }
    }
    components
}

/// Finds a perfect matching of `need` atoms over aromatic bonds.
fn kekule_matching(
    need: &[bool],
    aromatic_edges: &[(usize, usize, usize)],
    matched: &mut Vec<Option<usize>>,
    chosen: &mut Vec<usize>,
) -> bool {
    // most constrained unmatched atom first
    let mut best: Option<(usize, usize)> = None;
    for v in 0..need.len() {
        if !need[v] || matched[v].is_some() {
            continue;
        }
        let options = aromatic_edges
            .iter()
            .filter(|&&(a, b, _)| {
                (a == v && need[b] && matched[b].is_none()) || (b == v && need[a] && matched[a].is_none())
            })
            .count();
        if options == 0 {
            return false;
        }
        if best.is_none_or(|(_, o)| options < o) {
            best = Some((v, options));
        }
    }
    let Some((v, _)) = best else { return true };
    for &(a, b, e) in aromatic_edges {
        let u = if a == v { b } else if b == v { a } else { continue };
        if !need[u] || matched[u].is_some() {
            continue;
        }
        matched[v] = Some(e);
        matched[u] = Some(e);
        chosen.push(e);
        if kekule_matching(need, aromatic_edges, matched, chosen) {
            return true;
        }
        chosen.pop();
        matched[v] = None;
        matched[u] = None;
    }
    false
}

impl MolGraph {
    /// Parses and sanitizes `smiles`; the error string names the failure.
    pub fn from_smiles(smiles: &str) -> std::result::Result<Self, String> {
        let Builder { atoms, bonds, ring_closures } = parse_structure(smiles)?;
        let n = atoms.len();
        let ring_bond = ring_bonds(n, &bonds);
        let fragments = count_components(n, &bonds);

        for (e, b) in bonds.iter().enumerate() {
            if b.order == BondOrder::Aromatic && !ring_bond[e] {
                return Err("aromatic bond outside a ring".into());
            }
        }
        for (v, atom) in atoms.iter().enumerate() {
            if atom.aromatic
                && !bonds.iter().enumerate().any(|(e, b)| ring_bond[e] && (b.a == v || b.b == v))
            {
                return Err(format!("non-ring atom {v} marked aromatic"));
            }
        }

        // sigma-bond sum with aromatic bonds counted once
        let mut base = vec![0u32; n];
        for b in &bonds {
            base[b.a] += b.order.sigma_pi();
            base[b.b] += b.order.sigma_pi();
        }
        let valences: Vec<&[u32]> = atoms
            .iter()
            .map(|a| {
                allowed_valences(a.number, a.charge)
                    .ok_or(format!("unsupported charge {} on {}", a.charge, a.symbol()))
            })
            .collect::<std::result::Result<_, _>>()?;

        let mut need = vec![false; n];
        for v in 0..n {
            let has_aromatic_bond =
                bonds.iter().any(|b| b.order == BondOrder::Aromatic && (b.a == v || b.b == v));
            if !has_aromatic_bond {
                continue;
            }
            let used = base[v] + atoms[v].bracket_h.unwrap_or(0);
            if let Some(&target) = valences[v].iter().find(|&&val| val >= used) {
                need[v] = target > used;
            }
        }
        let aromatic_edges: Vec<(usize, usize, usize)> = bonds
            .iter()
            .enumerate()
            .filter(|(_, b)| b.order == BondOrder::Aromatic)
            .map(|(e, b)| (b.a, b.b, e))
            .collect();
        let mut matched = vec![None; n];
        let mut chosen = Vec::new();
        if !kekule_matching(&need, &aromatic_edges, &mut matched, &mut chosen) {
            return Err("cannot kekulize aromatic system".into());
        }
        let mut kekule: Vec<u32> = bonds.iter().map(|b| b.order.sigma_pi()).collect();
        for e in chosen {
            kekule[e] = 2;
        }

        let mut hydrogens = vec![0u32; n];
        for v in 0..n {
            let kekule_sum: u32 = bonds
                .iter()
                .enumerate()
                .filter(|(_, b)| b.a == v || b.b == v)
                .map(|(e, _)| kekule[e])
                .sum();
            let max = *valences[v].iter().max().unwrap_or(&0);
            let explicit_h = atoms[v].bracket_h.unwrap_or(0);
            if kekule_sum + explicit_h > max {
                return Err(format!(
                    "valence: {} with bond order sum {} exceeds {}",
                    atoms[v].symbol(),
                    kekule_sum + explicit_h,
                    max
                ));
            }
            hydrogens[v] = match atoms[v].bracket_h {
                Some(h) => h,
                None => valences[v].iter().find(|&&val| val >= kekule_sum).map_or(0, |&val| val - kekule_sum),
            };
        }

        Ok(MolGraph { atoms, bonds, ring_closures, fragments, kekule, hydrogens, ring_bond })
    }

    /// `bonds − atoms + fragments`.
    pub fn cyclomatic_number(&self) -> usize {
        self.bonds.len() + self.fragments - self.atoms.len()
    }

    pub fn total_hydrogens(&self, atom: usize) -> u32 {
        let neighbours = self
            .bonds
            .iter()
            .filter(|b| {
                (b.a == atom && self.atoms[b.b].number == 1) || (b.b == atom && self.atoms[b.a].number == 1)
            })
            .count() as u32;
        self.hydrogens[atom] + neighbours
    }

    fn heavy_degree(&self, atom: usize) -> usize {
        self.bonds
            .iter()
            .filter(|b| {
                (b.a == atom && self.atoms[b.b].number != 1) || (b.b == atom && self.atoms[b.a].number != 1)
            })
            .count()
    }

    pub fn kekule_order(&self, bond: usize) -> u32 {
        self.kekule[bond]
    }

    pub fn is_ring_bond(&self, bond: usize) -> bool {
        self.ring_bond[bond]
    }
}

/// Descriptors computable from the graph alone.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Descriptors {
    pub mw: f64,
    pub hba: u32,
    pub hbd: u32,
    pub n_rot: u32,
    pub n_ring: u32,
    pub n_het: u32,
}

impl Descriptors {
    /// The nine-property layout (MW, HBA, HBD, nRot, nRing, nHet, TPSA,
    /// logP, Stereo); the last three are not computed natively.
    pub fn partial_vector(&self) -> [Option<f64>; 9] {
        [
            Some(self.mw),
            Some(self.hba as f64),
            Some(self.hbd as f64),
            Some(self.n_rot as f64),
            Some(self.n_ring as f64),
            Some(self.n_het as f64),
            None,
            None,
            None,
        ]
    }
}

pub fn descriptors(graph: &MolGraph) -> Descriptors {
    let mut mw = 0.0;
    let (mut hba, mut hbd, mut n_het) = (0, 0, 0);
    for (v, atom) in graph.atoms.iter().enumerate() {
        mw += atom.weight() + graph.hydrogens[v] as f64 * HYDROGEN_WEIGHT;
        if matches!(atom.number, 7 | 8) {
            hba += 1;
            if graph.total_hydrogens(v) > 0 {
                hbd += 1;
            }
        }
        if !matches!(atom.number, 1 | 6) {
            n_het += 1;
        }
    }
    let n_rot = graph
        .bonds
        .iter()
        .enumerate()
        .filter(|&(e, b)| {
            b.order == BondOrder::Single
                && !graph.ring_bond[e]
                && graph.atoms[b.a].number != 1
                && graph.atoms[b.b].number != 1
                && graph.heavy_degree(b.a) >= 2
                && graph.heavy_degree(b.b) >= 2
        })
        .count() as u32;
    Descriptors { mw, hba, hbd, n_rot, n_ring: graph.ring_closures as u32, n_het }
}

/// Validity / uniqueness / novelty summary of a batch of generated strings.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationMetrics {
    pub total: usize,
    pub valid: usize,
    pub unique_valid: usize,
    pub novel: usize,
    /// Percentages.
    pub validity: f64,
    pub uniqueness: f64,
    pub validity_times_uniqueness: f64,
    pub novelty: f64,
    /// Set when no sample was valid, so uniqueness and novelty are reported
    /// as 0 but are really undefined.
    pub undefined: bool,
}

impl GenerationMetrics {
    pub fn csv_header() -> &'static str {
        "total,valid,unique_valid,novel,validity_pct,uniqueness_pct,vxu_pct,novelty_pct,undefined"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{:.4},{:.4},{:.4},{:.4},{}",
            self.total,
            self.valid,
            self.unique_valid,
            self.novel,
            self.validity,
            self.uniqueness,
            self.validity_times_uniqueness,
            self.novelty,
            self.undefined
        )
    }
}

impl fmt::Display for GenerationMetrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "samples      {}", self.total)?;
        writeln!(f, "validity     {:6.2} %", self.validity)?;
        writeln!(f, "uniqueness   {:6.2} %", self.uniqueness)?;
        writeln!(f, "V x U        {:6.2} %", self.validity_times_uniqueness)?;
        write!(f, "novelty      {:6.2} %", self.novelty)?;
        if self.undefined {
            write!(f, "  (no valid samples; uniqueness/novelty undefined)")?;
        }
        Ok(())
    }
}

/// Uniqueness and novelty compare raw strings.
pub fn generation_metrics(generated: &[String], training: &HashSet<String>) -> Result<GenerationMetrics> {
    if generated.is_empty() {
        return Err(Error::validation("no generated samples"));
    }
    let total = generated.len();
    let valid: Vec<&String> = generated.iter().filter(|s| check_validity(s).is_valid()).collect();
    let distinct: HashSet<&String> = valid.iter().copied().collect();
    let novel = distinct.iter().filter(|s| !training.contains(s.as_str())).count();
    let pct = |num: usize, den: usize| if den == 0 { 0.0 } else { 100.0 * num as f64 / den as f64 };
    Ok(GenerationMetrics {
        total,
        valid: valid.len(),
        unique_valid: distinct.len(),
        novel,
        validity: pct(valid.len(), total),
        uniqueness: pct(distinct.len(), valid.len()),
        validity_times_uniqueness: pct(distinct.len(), total),
        novelty: pct(novel, distinct.len()),
        undefined: valid.is_empty(),
    })
}
