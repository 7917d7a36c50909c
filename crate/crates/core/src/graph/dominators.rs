//! Immediate dominators by iterative intersection over a topological order.

use super::CompGraph;

#[derive(Debug, Clone, PartialEq)]
pub struct DominatorInfo {
    /// `idom[v]`, `None` for SOURCE.
    pub idom: Vec<Option<usize>>,
    /// SOURCE, each dominator of SINK in order, then SINK.
    pub dom_path: Vec<usize>,
    pre: Vec<usize>,
    post: Vec<usize>,
}

impl DominatorInfo {
    /// `a` dominates `b` (reflexive).
    pub fn dominates(&self, a: usize, b: usize) -> bool {
        self.pre[a] <= self.pre[b] && self.post[b] <= self.post[a]
    }

    pub fn strictly_dominates(&self, a: usize, b: usize) -> bool {
        a != b && self.dominates(a, b)
    }
}

pub fn dominators(g: &CompGraph) -> DominatorInfo {
    let n = g.len();
    let order = g.topo_order();
    let pos = |v: usize| g.rank(v);
    let mut idom: Vec<Option<usize>> = vec![None; n];
    idom[g.source()] = Some(g.source());

    let intersect = |idom: &[Option<usize>], mut a: usize, mut b: usize| {
        while a != b {
            while pos(a) > pos(b) {
                a = idom[a].expect("processed");
            }
            while pos(b) > pos(a) {
                b = idom[b].expect("processed");
            }
        }
        a
    };

    let mut changed = true;
    while changed {
        changed = false;
        for &v in order.iter().skip(1) {
            let mut new = None;
            for &p in g.pred(v) {
                if idom[p].is_some() {
                    new = Some(match new {
                        None => p,
                        Some(cur) => intersect(&idom, p, cur),
                    });
                }
            }
            if new.is_some() && idom[v] != new {
                idom[v] = new;
                changed = true;
            }
        }
    }
    idom[g.source()] = None;

    let mut dom_path = vec![g.sink()];
    let mut cur = g.sink();
    while let Some(d) = idom[cur] {
        dom_path.push(d);
        cur = d;
    }
    dom_path.reverse();

    // Pre/post numbering of the dominator tree for constant-time queries.
    let mut children = vec![Vec::new(); n];
    for (v, d) in idom.iter().enumerate() {
        if let Some(d) = *d {
            children[d].push(v);
        }
    }
    let mut pre = vec![0; n];
    let mut post = vec![0; n];
    let mut clock = 0;
    let mut stack = vec![(g.source(), 0usize)];
    pre[g.source()] = clock;
    while let Some(&mut (v, ref mut next)) = stack.last_mut() {
        if *next < children[v].len() {
            let c = children[v][*next];
            *next += 1;
            clock += 1;
            pre[c] = clock;
            stack.push((c, 0));
        } else {
            clock += 1;
            post[v] = clock;
            stack.pop();
        }
    }

    DominatorInfo {
        idom,
        dom_path,
        pre,
        post,
    }
}
