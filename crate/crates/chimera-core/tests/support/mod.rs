//! Independent oracles for the acceptance suite. Everything here is
//! deliberately naive and separate from the library implementations it
//! checks.

use chimera_core::teds::Tree;

/// Plain exponential recursion straight from the edit-distance
/// definition.
pub fn edit_distance_recursive(a: &[u8], b: &[u8]) -> usize {
    match (a.split_last(), b.split_last()) {
        (None, _) => b.len(),
        (_, None) => a.len(),
        (Some((ax, arest)), Some((bx, brest))) => {
            let sub = edit_distance_recursive(arest, brest) + usize::from(ax != bx);
            let del = edit_distance_recursive(arest, b) + 1;
            let ins = edit_distance_recursive(a, brest) + 1;
            sub.min(del).min(ins)
        }
    }
}

/// Enumerates every ordered tree with exactly `n` nodes as child-count
/// lists in preorder, then attaches every labeling over `labels` symbols.
pub fn all_trees_up_to(max_nodes: usize, labels: usize) -> Vec<Tree> {
    let mut trees = Vec::new();
    for n in 1..=max_nodes {
        for shape in tree_shapes(n) {
            let total = shape.len();
            for mut code in 0..labels.pow(total as u32) {
                let mut tree = Tree::empty();
                let mut assigned = Vec::with_capacity(total);
                for _ in 0..total {
                    assigned.push(code % labels);
                    code /= labels;
                }
                build_from_shape(&shape, &assigned, &mut tree, 0, None);
                trees.push(tree);
            }
        }
    }
    trees
}

/// All ordered tree shapes with `n` nodes, encoded as preorder child
/// counts.
fn tree_shapes(n: usize) -> Vec<Vec<usize>> {
    // shape of a tree with n nodes: root has k subtrees whose sizes sum
    // to n-1, ordered
    fn forests(n: usize) -> Vec<Vec<Vec<usize>>> {
        // all ordered forests with exactly n nodes, as lists of tree shapes
        if n == 0 {
            return vec![Vec::new()];
        }
        let mut out = Vec::new();
        for first in 1..=n {
            for t in tree_shapes(first) {
                for rest in forests(n - first) {
                    let mut f = vec![t.clone()];
                    f.extend(rest);
                    out.push(f);
                }
            }
        }
        out
    }
    let mut out = Vec::new();
    for f in forests(n - 1) {
        let mut shape = vec![f.len()];
        for t in &f {
            shape.extend(t);
        }
        out.push(shape);
    }
    out
}

fn build_from_shape(
    shape: &[usize],
    labels: &[usize],
    tree: &mut Tree,
    idx: usize,
    parent: Option<usize>,
) -> usize {
    let node = tree.add_node(format!("L{}", labels[idx]), parent);
    let kids = shape[idx];
    let mut next = idx + 1;
    for _ in 0..kids {
        next = build_from_shape(shape, labels, tree, next, Some(node));
    }
    next
}

/// Brute-force ordered forest edit distance with unit costs, memoized on
/// forest node-lists. Forests are sequences of root indices into the
/// owning tree; with at most 8 nodes per tree a forest packs into a u32
/// (base-9 digits), keeping the memo cheap.
pub fn ted_bruteforce(a: &Tree, b: &Tree) -> usize {
    use std::collections::HashMap;
    assert!(a.len() <= 8 && b.len() <= 8, "oracle sized for tiny trees");
    fn size(t: &Tree, node: usize) -> usize {
        1 + t.children[node].iter().map(|&c| size(t, c)).sum::<usize>()
    }
    fn forest_size(t: &Tree, f: &[usize]) -> usize {
        f.iter().map(|&n| size(t, n)).sum()
    }
    fn encode(f: &[usize]) -> u32 {
        f.iter().fold(1u32, |acc, &n| acc * 9 + n as u32 + 1)
    }
    fn dist(
        a: &Tree,
        b: &Tree,
        fa: &[usize],
        fb: &[usize],
        memo: &mut HashMap<u64, usize>,
    ) -> usize {
        if fa.is_empty() {
            return forest_size(b, fb);
        }
        if fb.is_empty() {
            return forest_size(a, fa);
        }
        let key = ((encode(fa) as u64) << 32) | encode(fb) as u64;
        if let Some(&d) = memo.get(&key) {
            return d;
        }
        // operate on the rightmost roots
        let ra = *fa.last().unwrap();
        let rb = *fb.last().unwrap();
        // delete root of the last tree in fa: its children join the forest
        let mut fa_del = fa[..fa.len() - 1].to_vec();
        fa_del.extend(a.children[ra].iter().copied());
        let d_del = dist(a, b, &fa_del, fb, memo) + 1;
        // insert root of the last tree in fb
        let mut fb_ins = fb[..fb.len() - 1].to_vec();
        fb_ins.extend(b.children[rb].iter().copied());
        let d_ins = dist(a, b, fa, &fb_ins, memo) + 1;
        // match the two roots: subforests of children plus the rests
        let d_children = dist(a, b, &a.children[ra], &b.children[rb], memo);
        let relabel = usize::from(a.labels[ra] != b.labels[rb]);
        let d_match =
            dist(a, b, &fa[..fa.len() - 1], &fb[..fb.len() - 1], memo) + d_children + relabel;
        let d = d_del.min(d_ins).min(d_match);
        memo.insert(key, d);
        d
    }
    let mut memo = HashMap::new();
    dist(a, b, &[0], &[0], &mut memo)
}

#[test]
fn tree_enumeration_counts_match_catalan() {
    // trees with n nodes: catalan(n-1) shapes
    assert_eq!(tree_shapes(1).len(), 1);
    assert_eq!(tree_shapes(2).len(), 1);
    assert_eq!(tree_shapes(3).len(), 2);
    assert_eq!(tree_shapes(4).len(), 5);
    assert_eq!(tree_shapes(5).len(), 14);
    assert_eq!(tree_shapes(6).len(), 42);
}

#[test]
fn bruteforce_sanity() {
    let a = Tree::leaf("L0");
    let b = Tree::leaf("L1");
    assert_eq!(ted_bruteforce(&a, &a), 0);
    assert_eq!(ted_bruteforce(&a, &b), 1);
    let mut chain = Tree::empty();
    let r = chain.add_node("L0", None);
    chain.add_node("L1", Some(r));
    assert_eq!(ted_bruteforce(&a, &chain), 1);
    assert_eq!(ted_bruteforce(&b, &chain), 2);
}
