//! Tree-edit-distance-based similarity over a minimal table markup.
//!
//! The markup subset is `<table>`, `<tr>`, `<td>` with text permitted only
//! inside cells; it is enough to exercise the real algorithm without a
//! full HTML parser. Distance is the Zhang-Shasha ordered tree edit
//! distance with unit costs; similarity is `1 - ted / max(|a|, |b|)`.

use crate::error::{ChimeraError, Result};

/// Rooted, ordered, labeled tree. Node 0 is the root when non-empty.
#[derive(Clone, Debug, PartialEq)]
pub struct Tree {
    pub labels: Vec<String>,
    pub children: Vec<Vec<usize>>,
}

impl Tree {
    pub fn empty() -> Self {
        Tree { labels: Vec::new(), children: Vec::new() }
    }

    pub fn leaf(label: impl Into<String>) -> Self {
        Tree { labels: vec![label.into()], children: vec![Vec::new()] }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Adds a node, returning its id.
    pub fn add_node(&mut self, label: impl Into<String>, parent: Option<usize>) -> usize {
        let id = self.labels.len();
        self.labels.push(label.into());
        self.children.push(Vec::new());
        if let Some(p) = parent {
            self.children[p].push(id);
        }
        id
    }
}

/// Postorder view used by the distance computation.
struct PostOrder {
    /// labels in postorder, 1-based (index 0 unused)
    labels: Vec<String>,
    /// l[i] = postorder index of the leftmost leaf under node i
    lml: Vec<usize>,
    keyroots: Vec<usize>,
}

fn postorder(tree: &Tree) -> PostOrder {
    let n = tree.len();
    let mut labels = vec![String::new(); n + 1];
    let mut lml = vec![0usize; n + 1];
    let mut order = Vec::with_capacity(n);
    // iterative postorder from the root
    if n > 0 {
        let mut stack = vec![(0usize, false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
            } else {
                stack.push((node, true));
                for &c in tree.children[node].iter().rev() {
                    stack.push((c, false));
                }
            }
        }
    }
    let mut post_of = vec![0usize; n];
    for (idx, &node) in order.iter().enumerate() {
        post_of[node] = idx + 1;
    }
    for (idx, &node) in order.iter().enumerate() {
        let i = idx + 1;
        labels[i] = tree.labels[node].clone();
        lml[i] = if tree.children[node].is_empty() {
            i
        } else {
            lml[post_of[tree.children[node][0]]]
        };
    }
    // keyroot: highest-postorder node among those sharing its leftmost leaf
    let mut keyroots = Vec::new();
    for i in 1..=n {
        if !(i + 1..=n).any(|j| lml[j] == lml[i]) {
            keyroots.push(i);
        }
    }
    PostOrder { labels, lml, keyroots }
}

/// Zhang-Shasha ordered tree edit distance, unit costs.
pub fn ted(a: &Tree, b: &Tree) -> usize {
    let (na, nb) = (a.len(), b.len());
    if na == 0 {
        return nb;
    }
    if nb == 0 {
        return na;
    }
    let pa = postorder(a);
    let pb = postorder(b);
    let mut td = vec![vec![0usize; nb + 1]; na + 1];
    for &i in &pa.keyroots {
        for &j in &pb.keyroots {
            // forest distance over (lml_a(i)..i) × (lml_b(j)..j)
            let (li, lj) = (pa.lml[i], pb.lml[j]);
            let (m, n) = (i - li + 1, j - lj + 1);
            let mut fd = vec![vec![0usize; n + 1]; m + 1];
            for di in 1..=m {
                fd[di][0] = fd[di - 1][0] + 1;
            }
            for dj in 1..=n {
                fd[0][dj] = fd[0][dj - 1] + 1;
            }
            for di in 1..=m {
                let i1 = li + di - 1;
                for dj in 1..=n {
                    let j1 = lj + dj - 1;
                    if pa.lml[i1] == li && pb.lml[j1] == lj {
                        let relabel = usize::from(pa.labels[i1] != pb.labels[j1]);
                        fd[di][dj] = (fd[di - 1][dj] + 1)
                            .min(fd[di][dj - 1] + 1)
                            .min(fd[di - 1][dj - 1] + relabel);
                        td[i1][j1] = fd[di][dj];
                    } else {
                        let pi = pa.lml[i1] - li;
                        let pj = pb.lml[j1] - lj;
                        fd[di][dj] = (fd[di - 1][dj] + 1)
                            .min(fd[di][dj - 1] + 1)
                            .min(fd[pi][pj] + td[i1][j1]);
                    }
                }
            }
        }
    }
    td[na][nb]
}

/// Tree-edit-distance-based similarity in [0, 1]. Identical trees score 1;
/// any tree against the empty tree scores 0; two empty trees are identical.
/// The distance can exceed max(|a|, |b|) when structures are incompatible
/// (a path versus a star), so the score clamps at zero.
pub fn teds(a: &Tree, b: &Tree) -> f64 {
    let denom = a.len().max(b.len());
    if denom == 0 {
        return 1.0;
    }
    (1.0 - ted(a, b) as f64 / denom as f64).max(0.0)
}

// ---- markup parsing ----

const TAGS: [&str; 3] = ["table", "tr", "td"];

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn err<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(ChimeraError::Parse { at: self.pos, msg: msg.into() })
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn read_tag_name(&mut self) -> Result<&'a str> {
        let start = self.pos;
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_alphanumeric() {
            self.pos += 1;
        }
        if self.pos == start {
            return self.err("expected tag name");
        }
        let name = std::str::from_utf8(&self.src[start..self.pos])
            .map_err(|_| ChimeraError::Parse { at: start, msg: "non-utf8 tag".into() })?;
        if !TAGS.contains(&name) {
            self.pos = start;
            return self.err(format!("unknown tag `{name}`"));
        }
        Ok(name)
    }

    /// Parses one element into `tree` under `parent`, returning its node id.
    fn element(&mut self, tree: &mut Tree, parent: Option<usize>) -> Result<usize> {
        if self.pos >= self.src.len() || self.src[self.pos] != b'<' {
            return self.err("expected `<`");
        }
        self.pos += 1;
        let name = self.read_tag_name()?;
        if self.pos >= self.src.len() || self.src[self.pos] != b'>' {
            return self.err("expected `>`");
        }
        self.pos += 1;
        let node = tree.add_node(name, parent);
        // content: child elements, or raw text inside a cell
        let mut text = String::new();
        loop {
            if name != "td" {
                self.skip_ws();
            }
            if self.pos >= self.src.len() {
                return self.err(format!("unclosed `<{name}>`"));
            }
            if self.src[self.pos] == b'<' {
                if self.pos + 1 < self.src.len() && self.src[self.pos + 1] == b'/' {
                    break;
                }
                if name == "td" && !text.trim().is_empty() {
                    return self.err("cell mixes text and elements");
                }
                self.element(tree, Some(node))?;
            } else {
                if name != "td" {
                    return self.err(format!("text not allowed inside `<{name}>`"));
                }
                text.push(self.src[self.pos] as char);
                self.pos += 1;
            }
        }
        // closing tag
        self.pos += 2; // consume `</`
        let close_at = self.pos;
        let close = self.read_tag_name().map_err(|_| ChimeraError::Parse {
            at: close_at,
            msg: "expected closing tag name".into(),
        })?;
        if close != name {
            return Err(ChimeraError::Parse {
                at: close_at,
                msg: format!("mismatched close: `</{close}>` for `<{name}>`"),
            });
        }
        if self.pos >= self.src.len() || self.src[self.pos] != b'>' {
            return self.err("expected `>` after closing tag");
        }
        self.pos += 1;
        if name == "td" && !text.trim().is_empty() {
            tree.labels[node] = format!("td:{}", text.trim());
        }
        Ok(node)
    }
}

/// Parses the markup subset into a tree. The root element must be
/// `<table>`; trailing whitespace is permitted.
pub fn parse_table_markup(src: &str) -> Result<Tree> {
    let mut p = Parser { src: src.as_bytes(), pos: 0 };
    p.skip_ws();
    let mut tree = Tree::empty();
    let root = p.element(&mut tree, None)?;
    if tree.labels[root] != "table" {
        return Err(ChimeraError::Parse { at: 0, msg: "root element must be <table>".into() });
    }
    p.skip_ws();
    if p.pos != p.src.len() {
        return p.err("trailing content after root element");
    }
    Ok(tree)
}
