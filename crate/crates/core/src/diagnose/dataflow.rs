//! Backward walk over def-use edges to configuration and argument sources.

use std::collections::{BTreeMap, HashMap, VecDeque};

use serde::Serialize;

use super::DiagnoseError;
use crate::trace_model::{is_source_var, ProgramModel};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DataflowChain {
    pub source: String,
    /// Key variable first, source last.
    pub vars: Vec<String>,
    /// Assignment site of each hop; one shorter than `vars`.
    pub sites: Vec<String>,
}

impl DataflowChain {
    pub fn hops(&self) -> usize {
        self.sites.len()
    }
}

/// Every source reachable backward from `key`, each with its shortest chain,
/// ordered by chain length and then source name.
pub fn backward_dataflow(key: &str, model: &ProgramModel) -> Result<Vec<DataflowChain>, DiagnoseError> {
    let mut incoming: BTreeMap<&str, Vec<(&str, &str)>> = BTreeMap::new();
    let mut known = false;
    for e in &model.def_use {
        incoming.entry(&e.to).or_default().push((&e.from, &e.site));
        known |= e.to == key || e.from == key;
    }
    if !known {
        return Err(DiagnoseError::DanglingVariable(key.to_string()));
    }
    for preds in incoming.values_mut() {
        preds.sort();
    }
    check_acyclic(key, &incoming)?;

    // Breadth-first, so the first visit of each variable is along a shortest chain.
    let mut parent: HashMap<&str, (&str, &str)> = HashMap::new();
    let mut queue = VecDeque::from([key]);
    let mut order = vec![key];
    while let Some(v) = queue.pop_front() {
        if is_source_var(v) {
            continue;
        }
        let Some(preds) = incoming.get(v) else {
            return Err(DiagnoseError::DanglingVariable(v.to_string()));
        };
        for &(p, site) in preds {
            if p != key && !parent.contains_key(p) {
                parent.insert(p, (v, site));
                order.push(p);
                queue.push_back(p);
            }
        }
    }
    let mut chains: Vec<DataflowChain> = order
        .into_iter()
        .filter(|v| is_source_var(v))
        .map(|src| {
            let mut vars = vec![src.to_string()];
            let mut sites = Vec::new();
            let mut cur = src;
            while let Some(&(next, site)) = parent.get(cur) {
                vars.push(next.to_string());
                sites.push(site.to_string());
                cur = next;
            }
            vars.reverse();
            sites.reverse();
            DataflowChain {
                source: src.to_string(),
                vars,
                sites,
            }
        })
        .collect();
    chains.sort_by(|a, b| a.hops().cmp(&b.hops()).then_with(|| a.source.cmp(&b.source)));
    Ok(chains)
}

fn check_acyclic(key: &str, incoming: &BTreeMap<&str, Vec<(&str, &str)>>) -> Result<(), DiagnoseError> {
    let mut state: HashMap<&str, u8> = HashMap::new();
    let mut stack = vec![(key, 0usize)];
    state.insert(key, 1);
    while let Some(&mut (v, ref mut next)) = stack.last_mut() {
        let preds = incoming.get(v).map(Vec::as_slice).unwrap_or(&[]);
        if *next < preds.len() {
            let p = preds[*next].0;
            *next += 1;
            match state.get(p) {
                Some(1) => return Err(DiagnoseError::Cycle(p.to_string())),
                Some(_) => {}
                None => {
                    state.insert(p, 1);
                    stack.push((p, 0));
                }
            }
        } else {
            state.insert(v, 2);
            stack.pop();
        }
    }
    Ok(())
}
